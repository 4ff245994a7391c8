//! Language representation: learned word embeddings, a two-layer
//! bidirectional LSTM, and three soft-attention heads that pool the raw
//! embeddings into subject, relationship and object vectors. Also the
//! single-LSTM last-state encoder used by the localization-only baseline.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{xavier_init, ParamId, ParamSet, Tape, Tensor, Var};

/// Bijective token <-> index map over a closed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let tokens: Vec<String> = words.iter().map(|w| w.as_ref().to_string()).collect();
        let v = Vocabulary::from(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(Error::contract("vocabulary has duplicate tokens"));
        }
        Ok(v)
    }

    /// The closed synthetic-shape vocabulary.
    pub fn shapeworld() -> Self {
        Vocabulary::new(&crate::shapeworld::vocabulary_words()).expect("unique words")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Indices for a token sequence; fails listing every unknown token.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        let mut unknown = Vec::new();
        let ids: Vec<usize> = tokens
            .iter()
            .filter_map(|t| {
                let id = self.get(t.as_ref());
                if id.is_none() {
                    unknown.push(t.as_ref().to_string());
                }
                id
            })
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownTokens(unknown));
        }
        if ids.is_empty() {
            return Err(Error::contract("empty token sequence"));
        }
        Ok(ids)
    }
}

/// Unidirectional LSTM with gates ordered (input, forget, candidate, output).
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_ih = params.add(format!("{name}.w_ih"), xavier_init(&[4 * hidden, input], rng))?;
        let w_hh = params.add(format!("{name}.w_hh"), xavier_init(&[4 * hidden, hidden], rng))?;
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = params.add(format!("{name}.bias"), Tensor::vector(b)?)?;
        Ok(Lstm {
            w_ih,
            w_hh,
            bias,
            hidden,
        })
    }

    pub fn lookup(params: &ParamSet, name: &str) -> Result<Self> {
        let id = |suffix: &str| {
            params
                .id(&format!("{name}.{suffix}"))
                .ok_or_else(|| Error::NotFound(format!("parameter {name}.{suffix}")))
        };
        let w_hh = id("w_hh")?;
        Ok(Lstm {
            w_ih: id("w_ih")?,
            w_hh,
            bias: id("bias")?,
            hidden: params.get(w_hh).shape()[1],
        })
    }

    /// Hidden states for the rows of `inputs` (`T x in`), returned in input
    /// order. With `reverse`, the scan runs from the last row to the first.
    pub fn run(&self, tape: &mut Tape, params: &ParamSet, inputs: Var, reverse: bool) -> Result<Vec<Var>> {
        let w_ih = tape.param(params, self.w_ih);
        let w_hh = tape.param(params, self.w_hh);
        let bias = tape.param(params, self.bias);
        let proj = tape.matmul_nt(inputs, w_ih)?;
        let proj = tape.add_row(proj, bias)?;
        let steps = tape.value(inputs).dims2().0;
        let dh = self.hidden;
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        let mut out = vec![None; steps];
        let mut state: Option<(Var, Var)> = None;
        for t in order {
            let mut pre = tape.row(proj, t)?;
            if let Some((h, _)) = state {
                let rec = tape.matmul_nt(h, w_hh)?;
                pre = tape.add(pre, rec)?;
            }
            let i = tape.slice_cols(pre, 0, dh)?;
            let i = tape.sigmoid(i)?;
            let g = tape.slice_cols(pre, 2 * dh, dh)?;
            let g = tape.tanh(g)?;
            let o = tape.slice_cols(pre, 3 * dh, dh)?;
            let o = tape.sigmoid(o)?;
            let mut c = tape.mul(i, g)?;
            if let Some((_, c_prev)) = state {
                let f = tape.slice_cols(pre, dh, dh)?;
                let f = tape.sigmoid(f)?;
                let keep = tape.mul(f, c_prev)?;
                c = tape.add(c, keep)?;
            }
            let tc = tape.tanh(c)?;
            let h = tape.mul(o, tc)?;
            out[t] = Some(h);
            state = Some((h, c));
        }
        Ok(out.into_iter().map(|h| h.expect("every step visited")).collect())
    }
}

/// Parameters of the expression parser.
#[derive(Debug, Clone, Copy)]
pub struct LangParams {
    pub embedding: ParamId,
    pub layer1_fw: Lstm,
    pub layer1_bw: Lstm,
    pub layer2_fw: Lstm,
    pub layer2_bw: Lstm,
    pub beta_subj: ParamId,
    pub beta_rel: ParamId,
    pub beta_obj: ParamId,
}

impl LangParams {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        vocab_size: usize,
        embed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let embedding = params.add("lang.embedding", xavier_init(&[vocab_size, embed_dim], rng))?;
        let layer1_fw = Lstm::register(params, "lang.l1_fw", embed_dim, hidden, rng)?;
        let layer1_bw = Lstm::register(params, "lang.l1_bw", embed_dim, hidden, rng)?;
        let layer2_fw = Lstm::register(params, "lang.l2_fw", 2 * hidden, hidden, rng)?;
        let layer2_bw = Lstm::register(params, "lang.l2_bw", 2 * hidden, hidden, rng)?;
        let mut beta = |name: &str| params.add(name, xavier_init(&[4 * hidden], rng));
        Ok(LangParams {
            embedding,
            layer1_fw,
            layer1_bw,
            layer2_fw,
            layer2_bw,
            beta_subj: beta("lang.beta_subj")?,
            beta_rel: beta("lang.beta_rel")?,
            beta_obj: beta("lang.beta_obj")?,
        })
    }

    pub fn lookup(params: &ParamSet) -> Result<Self> {
        let id = |n: &str| params.id(n).ok_or_else(|| Error::NotFound(format!("parameter {n}")));
        Ok(LangParams {
            embedding: id("lang.embedding")?,
            layer1_fw: Lstm::lookup(params, "lang.l1_fw")?,
            layer1_bw: Lstm::lookup(params, "lang.l1_bw")?,
            layer2_fw: Lstm::lookup(params, "lang.l2_fw")?,
            layer2_bw: Lstm::lookup(params, "lang.l2_bw")?,
            beta_subj: id("lang.beta_subj")?,
            beta_rel: id("lang.beta_rel")?,
            beta_obj: id("lang.beta_obj")?,
        })
    }

    /// Context size of `h_t`: four concatenated hidden states.
    pub fn context_dim(&self) -> usize {
        4 * self.layer1_fw.hidden
    }
}

/// Recorded outputs of the bi-LSTM.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `T x 4 d_h` rows `[h1_fw h1_bw h2_fw h2_bw]`, after dropout.
    pub hidden: Var,
    /// `T x d_e` raw word embeddings.
    pub embeddings: Var,
}

/// Dropout settings for a forward pass.
#[derive(Debug)]
pub struct DropoutCtx<'r, R: Rng + ?Sized> {
    pub keep: f64,
    pub train: bool,
    pub rng: &'r mut R,
}

pub fn encode_bilstm<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ParamSet,
    lang: &LangParams,
    token_ids: &[usize],
    dropout: &mut DropoutCtx<'_, R>,
) -> Result<Encoded> {
    if token_ids.is_empty() {
        return Err(Error::contract("empty token sequence"));
    }
    let table = tape.param(params, lang.embedding);
    let embeddings = tape.gather_rows(table, token_ids)?;
    let f1 = lang.layer1_fw.run(tape, params, embeddings, false)?;
    let b1 = lang.layer1_bw.run(tape, params, embeddings, true)?;
    let layer1: Vec<Var> = f1
        .iter()
        .zip(&b1)
        .map(|(&f, &b)| tape.concat(&[f, b]))
        .collect::<Result<_>>()?;
    let layer1 = tape.stack_rows(&layer1)?;
    let f2 = lang.layer2_fw.run(tape, params, layer1, false)?;
    let b2 = lang.layer2_bw.run(tape, params, layer1, true)?;
    let rows: Vec<Var> = (0..token_ids.len())
        .map(|t| tape.concat(&[f1[t], b1[t], f2[t], b2[t]]))
        .collect::<Result<_>>()?;
    let hidden = tape.stack_rows(&rows)?;
    let hidden = tape.dropout(hidden, dropout.keep, dropout.train, dropout.rng)?;
    Ok(Encoded { hidden, embeddings })
}

/// Recorded attention weights and pooled vectors.
#[derive(Debug, Clone, Copy)]
pub struct ParsedVars {
    pub q_subj: Var,
    pub q_rel: Var,
    pub q_obj: Var,
    pub a_subj: Var,
    pub a_rel: Var,
    pub a_obj: Var,
}

/// `a = softmax_t(βᵀ h_t)`, `q = Σ_t a_t e_t` for each of the three heads.
pub fn attend_and_pool(tape: &mut Tape, params: &ParamSet, lang: &LangParams, enc: Encoded) -> Result<ParsedVars> {
    let (t_len, _) = tape.value(enc.hidden).dims2();
    if tape.value(enc.embeddings).dims2().0 != t_len {
        return Err(Error::shape("attend_and_pool", "hidden and embedding sequences differ in length"));
    }
    let mut head = |beta: ParamId| -> Result<(Var, Var)> {
        let b = tape.param(params, beta);
        let logits = tape.matmul_nt(enc.hidden, b)?;
        let logits = tape.reshape(logits, &[t_len])?;
        let a = tape.softmax(logits)?;
        let q = tape.weighted_sum(a, enc.embeddings)?;
        Ok((a, q))
    };
    let (a_subj, q_subj) = head(lang.beta_subj)?;
    let (a_rel, q_rel) = head(lang.beta_rel)?;
    let (a_obj, q_obj) = head(lang.beta_obj)?;
    Ok(ParsedVars {
        q_subj,
        q_rel,
        q_obj,
        a_subj,
        a_rel,
        a_obj,
    })
}

/// Plain-value parse of one expression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedExpression {
    pub q_subj: Vec<f64>,
    pub q_rel: Vec<f64>,
    pub q_obj: Vec<f64>,
    pub a_subj: Vec<f64>,
    pub a_rel: Vec<f64>,
    pub a_obj: Vec<f64>,
}

impl ParsedExpression {
    pub fn from_tape(tape: &Tape, p: &ParsedVars) -> Self {
        let v = |x: Var| tape.value(x).data().to_vec();
        ParsedExpression {
            q_subj: v(p.q_subj),
            q_rel: v(p.q_rel),
            q_obj: v(p.q_obj),
            a_subj: v(p.a_subj),
            a_rel: v(p.a_rel),
            a_obj: v(p.a_obj),
        }
    }
}

/// Parses an expression without dropout.
pub fn parse_expression(params: &ParamSet, lang: &LangParams, token_ids: &[usize]) -> Result<ParsedExpression> {
    let mut tape = Tape::new();
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut ctx = DropoutCtx {
        keep: 1.0,
        train: false,
        rng: &mut rng,
    };
    let enc = encode_bilstm(&mut tape, params, lang, token_ids, &mut ctx)?;
    let parsed = attend_and_pool(&mut tape, params, lang, enc)?;
    Ok(ParsedExpression::from_tape(&tape, &parsed))
}

/// Single LSTM whose final hidden state is projected to the embedding size.
#[derive(Debug, Clone, Copy)]
pub struct LastStateEncoder {
    pub embedding: ParamId,
    pub lstm: Lstm,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl LastStateEncoder {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        vocab_size: usize,
        embed_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let embedding = params.add("lang.embedding", xavier_init(&[vocab_size, embed_dim], rng))?;
        let lstm = Lstm::register(params, "lang.last", embed_dim, hidden, rng)?;
        let proj_w = params.add("lang.proj_w", xavier_init(&[embed_dim, hidden], rng))?;
        let proj_b = params.add("lang.proj_b", Tensor::zeros(&[embed_dim]))?;
        Ok(LastStateEncoder {
            embedding,
            lstm,
            proj_w,
            proj_b,
        })
    }

    pub fn lookup(params: &ParamSet) -> Result<Self> {
        let id = |n: &str| params.id(n).ok_or_else(|| Error::NotFound(format!("parameter {n}")));
        Ok(LastStateEncoder {
            embedding: id("lang.embedding")?,
            lstm: Lstm::lookup(params, "lang.last")?,
            proj_w: id("lang.proj_w")?,
            proj_b: id("lang.proj_b")?,
        })
    }

    /// `q_loc = W h_T + b`.
    pub fn encode(&self, tape: &mut Tape, params: &ParamSet, token_ids: &[usize]) -> Result<Var> {
        if token_ids.is_empty() {
            return Err(Error::contract("empty token sequence"));
        }
        let table = tape.param(params, self.embedding);
        let emb = tape.gather_rows(table, token_ids)?;
        let states = self.lstm.run(tape, params, emb, false)?;
        let last = *states.last().expect("non-empty");
        let w = tape.param(params, self.proj_w);
        let b = tape.param(params, self.proj_b);
        let q = tape.matmul_nt(last, w)?;
        tape.add(q, b)
    }
}

/// Overwrites embedding rows from a whitespace-separated text file
/// (`word v1 v2 ... vd` per line). Returns the number of rows replaced.
pub fn load_pretrained_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    table: &mut Tensor,
) -> Result<usize> {
    let path = path.as_ref();
    let (rows, dim) = table.dims2();
    if rows != vocab.len() {
        return Err(Error::shape("embeddings", format!("table has {rows} rows for {} tokens", vocab.len())));
    }
    let reader = BufReader::new(File::open(path).map_err(Error::file(path))?);
    let mut loaded = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let Some(row) = vocab.get(word) else { continue };
        let values = fields
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        if values.len() != dim {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {dim} values, got {}", values.len()),
            });
        }
        table.data_mut()[row * dim..(row + 1) * dim].copy_from_slice(&values);
        loaded += 1;
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lang(d_e: usize, d_h: usize, seed: u64) -> (ParamSet, LangParams) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = LangParams::register(&mut params, 18, d_e, d_h, &mut rng).unwrap();
        (params, l)
    }

    #[test]
    fn unknown_tokens_are_listed() {
        let v = Vocabulary::shapeworld();
        match v.encode(&["the", "purple", "square", "beside"]) {
            Err(Error::UnknownTokens(t)) => assert_eq!(t, vec!["purple", "beside"]),
            other => panic!("{other:?}"),
        }
        assert_eq!(v.encode(&["the", "a"]).unwrap(), vec![0, 1]);
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let (mut params, l) = lang(4, 3, 1);
        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = DropoutCtx {
            keep: 1.0,
            train: false,
            rng: &mut rng,
        };
        let enc = encode_bilstm(&mut tape, &params, &l, &[0, 3, 5], &mut ctx).unwrap();
        assert_eq!(tape.value(enc.hidden).shape(), &[3, 12]);
        assert!(tape.value(enc.hidden).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paper_scale_context_is_4000() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = LangParams::register(&mut params, 18, 8, 1000, &mut rng).unwrap();
        assert_eq!(l.context_dim(), 4000);
        assert_eq!(params.get(l.beta_rel).shape(), &[4000]);
    }

    #[test]
    fn single_token_pools_its_embedding() {
        let (params, l) = lang(5, 4, 2);
        let p = parse_expression(&params, &l, &[7]).unwrap();
        let row = &params.get(l.embedding).data()[7 * 5..8 * 5];
        for q in [&p.q_subj, &p.q_rel, &p.q_obj] {
            assert_eq!(q.as_slice(), row);
        }
        assert_eq!(p.a_rel, vec![1.0]);
    }

    #[test]
    fn attention_sums_to_one() {
        for seed in 0..20 {
            let (params, l) = lang(6, 5, seed);
            let p = parse_expression(&params, &l, &[0, 4, 11, 14, 1, 9]).unwrap();
            for a in [&p.a_subj, &p.a_rel, &p.a_obj] {
                assert!(a.iter().all(|&w| w >= 0.0));
                assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn last_state_shape_and_zero_case() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = LastStateEncoder::register(&mut params, 18, 7, 5, &mut rng).unwrap();
        for len in [1, 4, 9] {
            let mut tape = Tape::new();
            let ids: Vec<usize> = (0..len).collect();
            let q = enc.encode(&mut tape, &params, &ids).unwrap();
            assert_eq!(tape.value(q).shape(), &[7]);
        }
        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let q = enc.encode(&mut tape, &params, &[2, 3]).unwrap();
        assert!(tape.value(q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pretrained_rows_are_loaded() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        std::fs::write(&p, "square 1 2 3\nunknownword 9 9 9\nred 0.5 0.25 -1\n").unwrap();
        let vocab = Vocabulary::shapeworld();
        let mut table = Tensor::zeros(&[vocab.len(), 3]);
        assert_eq!(load_pretrained_embeddings(&p, &vocab, &mut table).unwrap(), 2);
        let sq = vocab.get("square").unwrap();
        assert_eq!(&table.data()[sq * 3..sq * 3 + 3], &[1.0, 2.0, 3.0]);
        std::fs::write(&p, "square 1 2\n").unwrap();
        assert!(matches!(
            load_pretrained_embeddings(&p, &vocab, &mut table),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
