use rand::Rng;

use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    OuterSum(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize(Var, f64),
    Dropout(Var, Vec<f64>),
    MaxRows(Var, Vec<usize>),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of executed operations.
///
/// Nodes are stored in execution order, which is a topological order of the
/// computation graph, so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Tensor::from_parts(t.shape().to_vec(), t.into_data()),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter leaf. Gradients flow back into `params` on backward.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let t = params.get(id);
        self.nodes.push(Node {
            value: Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()),
            op: Op::Param(id),
            needs_grad: t.is_trainable(),
        });
        Var(self.nodes.len() - 1)
    }

    /// `a · b` for `a: m×k` (or a `k`-vector) and `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let bs = self.shape(b);
        if bs.len() != 2 || bs[0] != k {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", self.shape(a), bs)));
        }
        let n = bs[1];
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &y) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let shape = if self.shape(a).len() == 1 { vec![n] } else { vec![m, n] };
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::from_parts(shape, out), Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ` for `a: m×k` (or a `k`-vector) and `b: n×k` (or a `k`-vector).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, kb) = self.dims(b);
        if k != kb {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} x {:?}^T", self.shape(a), self.shape(b)),
            ));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out.push(dot(ar, &bd[j * k..(j + 1) * k]));
            }
        }
        let shape = if self.shape(a).len() == 1 { vec![n] } else { vec![m, n] };
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul_nt", Tensor::from_parts(shape, out), Op::MatMulNt(a, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn row_operand(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (_, n) = self.dims(a);
        let bs = self.shape(b);
        if bs.len() != 1 || bs[0] != n {
            return Err(Error::shape(op, format!("{:?} with row {:?}", self.shape(a), bs)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push("add", Tensor::from_parts(shape, out), Op::Add(a, b), ng)
    }

    /// Adds the vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_operand("add_row", a, b)?;
        let (_, n) = self.dims(a);
        let bd = self.data(b);
        let out = self.data(a).iter().enumerate().map(|(i, x)| x + bd[i % n]).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push("add_row", Tensor::from_parts(shape, out), Op::AddRow(a, b), ng)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push("mul", Tensor::from_parts(shape, out), Op::Mul(a, b), ng)
    }

    /// Multiplies every row of `a` element-wise by the vector `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_operand("mul_row", a, b)?;
        let (_, n) = self.dims(a);
        let bd = self.data(b);
        let out = self.data(a).iter().enumerate().map(|(i, x)| x * bd[i % n]).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push("mul_row", Tensor::from_parts(shape, out), Op::MulRow(a, b), ng)
    }

    /// `out[i][j] = a[i] + b[j]` for vectors `a: m`, `b: n`.
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sb.len() != 1 {
            return Err(Error::shape("outer_sum", format!("{sa:?}, {sb:?}")));
        }
        let (m, n) = (sa[0], sb[0]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(m * n);
        for &x in ad {
            out.extend(bd.iter().map(|y| x + y));
        }
        let ng = self.needs(a) || self.needs(b);
        self.push("outer_sum", Tensor::from_parts(vec![m, n], out), Op::OuterSum(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push("scale", Tensor::from_parts(shape, out), Op::Scale(a, c), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push("sigmoid", Tensor::from_parts(shape, out), Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push("tanh", Tensor::from_parts(shape, out), Op::Tanh(a), ng)
    }

    /// Softmax over the last axis (each row independently).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        let mut out = self.data(a).to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax(a), ng)
    }

    /// Log-softmax over the last axis, max-shifted before exponentiation.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push("log_softmax", Tensor::from_parts(shape, out), Op::LogSoftmax(a), ng)
    }

    /// Row-wise `x / max(‖x‖₂, eps)`: unit rows when `‖x‖ > eps`, zero rows stay zero.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("l2_normalize epsilon must be positive"));
        }
        let (_, n) = self.dims(a);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            let denom = norm(row).max(eps);
            row.iter_mut().for_each(|x| *x /= denom);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push("l2_normalize", Tensor::from_parts(shape, out), Op::L2Normalize(a, eps), ng)
    }

    /// Inverted dropout: identity unless `train` and `keep < 1`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        keep: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::contract(format!("dropout keep probability {keep} not in (0, 1]")));
        }
        if !train || keep == 1.0 {
            return Ok(a);
        }
        let mask: Vec<f64> = (0..self.data(a).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push("dropout", Tensor::from_parts(shape, out), Op::Dropout(a, mask), ng)
    }

    /// Row-wise max, ties broken toward the smallest column. With
    /// `exclude_diagonal`, column `i` is skipped for row `i`.
    pub fn max_rows(&mut self, a: Var, exclude_diagonal: bool) -> Result<Var> {
        let (m, n) = self.dims(a);
        if exclude_diagonal && n < 2 {
            return Err(Error::contract("max_rows excluding the diagonal needs at least 2 columns"));
        }
        let d = self.data(a);
        let mut out = Vec::with_capacity(m);
        let mut arg = Vec::with_capacity(m);
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let j = argmax_skipping(row, exclude_diagonal.then_some(i));
            out.push(row[j]);
            arg.push(j);
        }
        let ng = self.needs(a);
        self.push("max_rows", Tensor::from_parts(vec![m], out), Op::MaxRows(a, arg), ng)
    }

    /// Concatenates along the last axis; all parts must have the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let m = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(Error::shape("concat", format!("row count {pm} vs {m}")));
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let (_, pn) = self.dims(p);
                out.extend_from_slice(&self.data(p)[i * pn..(i + 1) * pn]);
            }
        }
        let shape = if self.shape(first).len() == 1 { vec![total] } else { vec![m, total] };
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat", Tensor::from_parts(shape, out), Op::Concat(parts.to_vec()), ng)
    }

    /// Stacks vectors (or matrices) with equal column counts along the first axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("stack_rows of zero tensors"))?;
        let n = self.dims(first).1;
        let mut out = Vec::new();
        for &p in parts {
            let (_, pn) = self.dims(p);
            if pn != n {
                return Err(Error::shape("stack_rows", format!("column count {pn} vs {n}")));
            }
            out.extend_from_slice(self.data(p));
        }
        let m = out.len() / n;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("stack_rows", Tensor::from_parts(vec![m, n], out), Op::StackRows(parts.to_vec()), ng)
    }

    /// Selects flat elements into a vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let d = self.data(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= d.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of {}", d.len())));
        }
        if indices.is_empty() {
            return Err(Error::contract("gather of zero elements"));
        }
        let out = indices.iter().map(|&i| d[i]).collect();
        let ng = self.needs(a);
        self.push(
            "gather",
            Tensor::from_parts(vec![indices.len()], out),
            Op::Gather(a, indices.to_vec()),
            ng,
        )
    }

    /// Selects rows of a matrix (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {m}")));
        }
        if rows.is_empty() {
            return Err(Error::contract("gather_rows of zero rows"));
        }
        let d = self.data(a);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&d[r * n..(r + 1) * n]);
        }
        let ng = self.needs(a);
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![rows.len(), n], out),
            Op::GatherRows(a, rows.to_vec()),
            ng,
        )
    }

    /// Row `r` of a matrix as a vector.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let v = self.gather_rows(a, &[r])?;
        let n = self.dims(a).1;
        self.reshape(v, &[n])
    }

    /// Columns `start..start+len` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", format!("{start}..{} of {n}", start + len)));
        }
        let d = self.data(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + start + len]);
        }
        let shape = if self.shape(a).len() == 1 { vec![len] } else { vec![m, len] };
        let ng = self.needs(a);
        self.push("slice_cols", Tensor::from_parts(shape, out), Op::SliceCols(a, start), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.data(a).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let out = self.data(a).to_vec();
        let ng = self.needs(a);
        self.push("reshape", Tensor::from_parts(shape.to_vec(), out), Op::Reshape(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        let ng = self.needs(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Sum of a list of same-shaped values.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::contract("add_all of zero tensors"))?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    /// `Σ_t w[t] · x[t, :]` for weights `w: T` and rows `x: T×d`.
    pub fn weighted_sum(&mut self, w: Var, x: Var) -> Result<Var> {
        let t = self.shape(w);
        if t.len() != 1 {
            return Err(Error::shape("weighted_sum", format!("weights {t:?}")));
        }
        self.matmul(w, x)
    }

    /// Reverse sweep from the scalar `loss`, accumulating into the gradient
    /// buffers of trainable parameters. Clears the tape.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads, params)?;
        }
        self.nodes.clear();
        Ok(())
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut ParamSet,
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                let p = params.get_mut(*id);
                if let Some(pg) = p.grad_mut() {
                    if pg.len() != g.len() {
                        return Err(Error::shape("backward", "parameter changed shape"));
                    }
                    pg.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.shape(b)[1];
                let (ad, bd) = (self.data(a), self.data(b));
                if self.needs(a) {
                    let ga = self.slot(grads, a);
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(gr, &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.needs(b) {
                    let gb = self.slot(grads, b);
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            axpy(ad[i * k + p], gr, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(a);
                let (n, _) = self.dims(b);
                let (ad, bd) = (self.data(a), self.data(b));
                if self.needs(a) {
                    let ga = self.slot(grads, a);
                    for i in 0..m {
                        for j in 0..n {
                            axpy(g[i * n + j], &bd[j * k..(j + 1) * k], &mut ga[i * k..(i + 1) * k]);
                        }
                    }
                }
                if self.needs(b) {
                    let gb = self.slot(grads, b);
                    for i in 0..m {
                        for j in 0..n {
                            axpy(g[i * n + j], &ad[i * k..(i + 1) * k], &mut gb[j * k..(j + 1) * k]);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(v) {
                        add_into(self.slot(grads, v), g);
                    }
                }
            }
            &Op::AddRow(a, b) => {
                if self.needs(a) {
                    add_into(self.slot(grads, a), g);
                }
                if self.needs(b) {
                    let n = self.shape(b)[0];
                    let gb = self.slot(grads, b);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let bd = self.data(b);
                    let ga = self.slot(grads, a);
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gi * bi;
                    }
                }
                if self.needs(b) {
                    let ad = self.data(a);
                    let gb = self.slot(grads, b);
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gi * ai;
                    }
                }
            }
            &Op::MulRow(a, b) => {
                let n = self.shape(b)[0];
                if self.needs(a) {
                    let bd = self.data(b);
                    let ga = self.slot(grads, a);
                    for (i, (o, gi)) in ga.iter_mut().zip(g).enumerate() {
                        *o += gi * bd[i % n];
                    }
                }
                if self.needs(b) {
                    let ad = self.data(a);
                    let gb = self.slot(grads, b);
                    for (i, (gi, ai)) in g.iter().zip(ad).enumerate() {
                        gb[i % n] += gi * ai;
                    }
                }
            }
            &Op::OuterSum(a, b) => {
                let n = self.shape(b)[0];
                if self.needs(a) {
                    let ga = self.slot(grads, a);
                    for (o, row) in ga.iter_mut().zip(g.chunks(n)) {
                        *o += row.iter().sum::<f64>();
                    }
                }
                if self.needs(b) {
                    let gb = self.slot(grads, b);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Scale(a, c) => {
                let ga = self.slot(grads, a);
                ga.iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi);
            }
            &Op::Sigmoid(a) => {
                let ga = self.slot(grads, a);
                for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *o += gi * yi * (1.0 - yi);
                }
            }
            &Op::Tanh(a) => {
                let ga = self.slot(grads, a);
                for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *o += gi * (1.0 - yi * yi);
                }
            }
            &Op::Softmax(a) => {
                let n = self.dims(a).1;
                let ga = self.slot(grads, a);
                for ((orow, grow), yrow) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let s = dot(grow, yrow);
                    for ((o, gi), yi) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += yi * (gi - s);
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let n = self.dims(a).1;
                let ga = self.slot(grads, a);
                for ((orow, grow), yrow) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let s: f64 = grow.iter().sum();
                    for ((o, gi), yi) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += gi - yi.exp() * s;
                    }
                }
            }
            &Op::L2Normalize(a, eps) => {
                let n = self.dims(a).1;
                let xd = self.data(a);
                let ga = self.slot(grads, a);
                for (((orow, grow), yrow), xrow) in ga
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(y.chunks(n))
                    .zip(xd.chunks(n))
                {
                    let nx = norm(xrow);
                    if nx > eps {
                        let s = dot(grow, yrow);
                        for ((o, gi), yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += (gi - yi * s) / nx;
                        }
                    } else {
                        for (o, gi) in orow.iter_mut().zip(grow) {
                            *o += gi / eps;
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                let ga = self.slot(grads, *a);
                for ((o, gi), mi) in ga.iter_mut().zip(g).zip(mask) {
                    *o += gi * mi;
                }
            }
            Op::MaxRows(a, arg) => {
                let n = self.dims(*a).1;
                let ga = self.slot(grads, *a);
                for (i, (&j, gi)) in arg.iter().zip(g).enumerate() {
                    ga[i * n + j] += gi;
                }
            }
            Op::Concat(parts) => {
                let m = self.dims(parts[0]).0;
                let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
                let mut offset = 0;
                for &p in parts {
                    let pn = self.dims(p).1;
                    if self.needs(p) {
                        let gp = self.slot(grads, p);
                        for i in 0..m {
                            add_into(
                                &mut gp[i * pn..(i + 1) * pn],
                                &g[i * total + offset..i * total + offset + pn],
                            );
                        }
                    }
                    offset += pn;
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.data(p).len();
                    if self.needs(p) {
                        add_into(self.slot(grads, p), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Gather(a, indices) => {
                let ga = self.slot(grads, *a);
                for (&i, gi) in indices.iter().zip(g) {
                    ga[i] += gi;
                }
            }
            Op::GatherRows(a, rows) => {
                let n = self.dims(*a).1;
                let ga = self.slot(grads, *a);
                for (&r, grow) in rows.iter().zip(g.chunks(n)) {
                    add_into(&mut ga[r * n..(r + 1) * n], grow);
                }
            }
            &Op::SliceCols(a, start) => {
                let (m, n) = self.dims(a);
                let len = g.len() / m;
                let ga = self.slot(grads, a);
                for i in 0..m {
                    add_into(&mut ga[i * n + start..i * n + start + len], &g[i * len..(i + 1) * len]);
                }
            }
            &Op::Reshape(a) => add_into(self.slot(grads, a), g),
            &Op::Sum(a) => {
                let ga = self.slot(grads, a);
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

fn argmax_skipping(row: &[f64], skip: Option<usize>) -> usize {
    let mut best: Option<usize> = None;
    for (j, &v) in row.iter().enumerate() {
        if Some(j) == skip {
            continue;
        }
        if best.map_or(true, |b| v > row[b]) {
            best = Some(j);
        }
    }
    best.unwrap_or(0)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    if a == 0.0 {
        return;
    }
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(vec_t(&[0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn l2_normalize_keeps_zero_vector() {
        let mut tape = Tape::new();
        let x = tape.constant(vec_t(&[0.0; 4]));
        let y = tape.l2_normalize(x, 1e-12).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn dropout_keep_all_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.constant(vec_t(&[1.0, -2.0, 3.0]));
        let y = tape.dropout(x, 1.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.0]);
        let z = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(tape.value(z).data(), &[1.0, -2.0, 3.0]);
        assert!(tape.dropout(x, 0.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_is_inverted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4000], vec![1.0; 4000]).unwrap());
        let y = tape.dropout(x, 0.7, true, &mut rng).unwrap();
        let d = tape.value(y).data();
        assert!(d.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-15));
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut params = ParamSet::new();
        let id = params.add("x", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&params, id);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y, &mut params).unwrap();
        assert_eq!(params.get(id).grad().unwrap(), &[6.0]);
        assert!(tape.is_empty());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut params = ParamSet::new();
        let id = params.add("x", Tensor::scalar(0.7)).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&params, id);
        let y = tape.add(x, x).unwrap();
        tape.backward(y, &mut params).unwrap();
        assert_eq!(params.get(id).grad().unwrap(), &[2.0]);
    }

    #[test]
    fn nll_of_softmax_gives_p_minus_onehot() {
        let logits = [0.3, -1.2, 2.0, 0.5];
        let k = 1;
        let mut params = ParamSet::new();
        let id = params.add("z", vec_t(&logits)).unwrap();
        let mut tape = Tape::new();
        let z = tape.param(&params, id);
        let ls = tape.log_softmax(z).unwrap();
        let pick = tape.gather(ls, &[k]).unwrap();
        let loss = tape.scale(pick, -1.0).unwrap();
        tape.backward(loss, &mut params).unwrap();
        let lse = log_sum_exp(&logits);
        for (i, g) in params.get(id).grad().unwrap().iter().enumerate() {
            let p = (logits[i] - lse).exp();
            let want = p - if i == k { 1.0 } else { 0.0 };
            assert!((g - want).abs() < 1e-14, "{i}: {g} vs {want}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut params = ParamSet::new();
        let mut tape = Tape::new();
        let x = tape.constant(vec_t(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x, &mut params), Err(Error::Contract(_))));
        let mut empty = Tape::new();
        assert!(empty.backward(Var(0), &mut params).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
        assert!(tape.add(a, b).is_ok());
        let c = tape.constant(Tensor::zeros(&[4]));
        assert!(tape.mul_row(a, c).is_err());
    }

    #[test]
    fn non_finite_output_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(vec_t(&[1e200]));
        let err = tape.mul(a, a).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul" }));
    }

    #[test]
    fn max_rows_breaks_ties_low_and_skips_diagonal() {
        let mut tape = Tape::new();
        let a = tape
            .constant(Tensor::matrix(2, 3, vec![5.0, 5.0, 1.0, 2.0, 9.0, 9.0]).unwrap());
        let m = tape.max_rows(a, false).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, 9.0]);
        let md = tape.max_rows(a, true).unwrap();
        assert_eq!(tape.value(md).data(), &[5.0, 9.0]);
        match &tape.nodes[md.0].op {
            Op::MaxRows(_, arg) => assert_eq!(arg, &vec![1, 2]),
            _ => unreachable!(),
        }
    }
}
