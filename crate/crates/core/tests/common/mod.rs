//! Scalar reference implementations written directly from the model
//! equations, sharing nothing with the tape.
#![allow(dead_code)]

use cmn_core::shapeworld::{Color, Description, Relation, ShapeClass, Size};
use cmn_core::ParamSet;

pub fn p<'a>(params: &'a ParamSet, name: &str) -> &'a [f64] {
    params.by_name(name).unwrap_or_else(|| panic!("missing {name}")).data()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `w . normalize((W x + b) * q) + b_out` for the head under `prefix`.
pub fn head(params: &ParamSet, prefix: &str, x: &[f64], q: &[f64]) -> f64 {
    let w = p(params, &format!("{prefix}.embed_w"));
    let b = p(params, &format!("{prefix}.embed_b"));
    let out_w = p(params, &format!("{prefix}.out_w"));
    let out_b = p(params, &format!("{prefix}.out_b"))[0];
    let d = b.len();
    let n_in = x.len();
    assert_eq!(w.len(), d * n_in);
    let mut z = vec![0.0; d];
    for r in 0..d {
        let mut acc = b[r];
        for c in 0..n_in {
            acc += w[r * n_in + c] * x[c];
        }
        z[r] = acc * q[r];
    }
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = norm.max(1e-12);
    let mut s = out_b;
    for r in 0..d {
        s += out_w[r] * z[r] / denom;
    }
    s
}

/// Row-major pair matrix: `loc(b_i, q_s) + loc(b_j, q_o) + rel(b_i, b_j, q_r)`.
/// `regions[i]` is `[x_v x_s]`; the last five entries are the spatial part.
pub fn pair_matrix(params: &ParamSet, regions: &[Vec<f64>], qs: &[f64], qr: &[f64], qo: &[f64]) -> Vec<f64> {
    let n = regions.len();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let xs_i = &regions[i][regions[i].len() - 5..];
            let xs_j = &regions[j][regions[j].len() - 5..];
            let pair: Vec<f64> = xs_i.iter().chain(xs_j).copied().collect();
            out.push(head(params, "loc", &regions[i], qs) + head(params, "loc", &regions[j], qo) + head(params, "rel", &pair, qr));
        }
    }
    out
}

/// Hand-unrolled LSTM with gate order `i, f, g, o` and zero initial state.
pub fn lstm(params: &ParamSet, name: &str, inputs: &[Vec<f64>], reverse: bool) -> Vec<Vec<f64>> {
    let w_ih = p(params, &format!("{name}.w_ih"));
    let w_hh = p(params, &format!("{name}.w_hh"));
    let bias = p(params, &format!("{name}.bias"));
    let dh = bias.len() / 4;
    let n_in = inputs[0].len();
    let mut h = vec![0.0; dh];
    let mut c = vec![0.0; dh];
    let mut out = vec![Vec::new(); inputs.len()];
    let order: Vec<usize> = if reverse {
        (0..inputs.len()).rev().collect()
    } else {
        (0..inputs.len()).collect()
    };
    for t in order {
        let mut pre = bias.to_vec();
        for (r, v) in pre.iter_mut().enumerate() {
            for k in 0..n_in {
                *v += w_ih[r * n_in + k] * inputs[t][k];
            }
            for k in 0..dh {
                *v += w_hh[r * dh + k] * h[k];
            }
        }
        for k in 0..dh {
            let i = sigmoid(pre[k]);
            let f = sigmoid(pre[dh + k]);
            let g = pre[2 * dh + k].tanh();
            let o = sigmoid(pre[3 * dh + k]);
            c[k] = f * c[k] + i * g;
            h[k] = o * c[k].tanh();
        }
        out[t] = h.clone();
    }
    out
}

pub struct ScalarParse {
    pub attention: [Vec<f64>; 3],
    pub queries: [Vec<f64>; 3],
}

/// Two-layer bi-LSTM, attention over `[h1_fw h1_bw h2_fw h2_bw]`, and
/// attention-weighted pooling of the embeddings.
pub fn parse(params: &ParamSet, token_ids: &[usize]) -> ScalarParse {
    let table = p(params, "lang.embedding");
    let de = params.by_name("lang.embedding").unwrap().shape()[1];
    let emb: Vec<Vec<f64>> = token_ids.iter().map(|&t| table[t * de..(t + 1) * de].to_vec()).collect();
    let f1 = lstm(params, "lang.l1_fw", &emb, false);
    let b1 = lstm(params, "lang.l1_bw", &emb, true);
    let l1: Vec<Vec<f64>> = f1.iter().zip(&b1).map(|(f, b)| [f.as_slice(), b].concat()).collect();
    let f2 = lstm(params, "lang.l2_fw", &l1, false);
    let b2 = lstm(params, "lang.l2_bw", &l1, true);
    let ctx: Vec<Vec<f64>> = (0..emb.len()).map(|t| [f1[t].as_slice(), &b1[t], &f2[t], &b2[t]].concat()).collect();
    let component = |beta: &str| {
        let beta = p(params, beta);
        let logits: Vec<f64> = ctx.iter().map(|h| h.iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|v| v / z).collect();
        let mut q = vec![0.0; de];
        for (t, at) in a.iter().enumerate() {
            for k in 0..de {
                q[k] += at * emb[t][k];
            }
        }
        (a, q)
    };
    let (a_s, q_s) = component("lang.beta_subj");
    let (a_r, q_r) = component("lang.beta_rel");
    let (a_o, q_o) = component("lang.beta_obj");
    ScalarParse {
        attention: [a_s, a_r, a_o],
        queries: [q_s, q_r, q_o],
    }
}

/// Reads an expression back into its template, word by word.
pub fn parse_template(tokens: &[String]) -> Option<(Description, Relation, Description)> {
    let words: Vec<&str> = tokens.iter().map(String::as_str).collect();
    let (rest, subject) = description(words.strip_prefix(&["the"])?)?;
    let (rest, relation) = match rest {
        ["left", "of", r @ ..] => (r, Relation::LeftOf),
        ["right", "of", r @ ..] => (r, Relation::RightOf),
        ["above", r @ ..] => (r, Relation::Above),
        ["below", r @ ..] => (r, Relation::Below),
        _ => return None,
    };
    let (rest, object) = description(rest.strip_prefix(&["a"])?)?;
    rest.is_empty().then_some((subject, relation, object))
}

fn description<'a>(mut w: &'a [&'a str]) -> Option<(&'a [&'a str], Description)> {
    let size = match w.first()? {
        &"small" => Some(Size::Small),
        &"large" => Some(Size::Large),
        _ => None,
    };
    if size.is_some() {
        w = &w[1..];
    }
    let color = Color::ALL.iter().copied().find(|c| Some(&c.word()) == w.first());
    if color.is_some() {
        w = &w[1..];
    }
    let shape = ShapeClass::ALL.iter().copied().find(|s| Some(&s.word()) == w.first())?;
    Some((&w[1..], Description { shape, color, size }))
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
