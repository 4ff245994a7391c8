//! Localization and relationship scoring, their pairwise composition, and
//! argmax grounding.
//!
//! Both modules share one pipeline: an affine embedding of the region
//! features, element-wise product with the query vector, row-wise L2
//! normalization, then a linear read-out.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shapeworld::RegionFeatures;
use crate::tensor::{xavier_init, ParamId, ParamSet, Tape, Tensor, Var};

/// Guard inside the L2 normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Affine embed, multiply by query, normalize, read out.
#[derive(Debug, Clone, Copy)]
pub struct ScoringHead {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Output of a scoring head over a batch of rows.
#[derive(Debug, Clone, Copy)]
pub struct HeadScores {
    /// One score per input row.
    pub scores: Var,
    /// Normalized joint representation, one row per input row.
    pub z_hat: Var,
}

impl ScoringHead {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ScoringHead {
            embed_w: params.add(format!("{prefix}.embed_w"), xavier_init(&[embed_dim, input_dim], rng))?,
            embed_b: params.add(format!("{prefix}.embed_b"), Tensor::zeros(&[embed_dim]))?,
            out_w: params.add(format!("{prefix}.out_w"), xavier_init(&[embed_dim], rng))?,
            out_b: params.add(format!("{prefix}.out_b"), Tensor::zeros(&[1]))?,
        })
    }

    pub fn lookup(params: &ParamSet, prefix: &str) -> Result<Self> {
        let id = |s: &str| {
            params
                .id(&format!("{prefix}.{s}"))
                .ok_or_else(|| Error::NotFound(format!("parameter {prefix}.{s}")))
        };
        Ok(ScoringHead {
            embed_w: id("embed_w")?,
            embed_b: id("embed_b")?,
            out_w: id("out_w")?,
            out_b: id("out_b")?,
        })
    }

    pub fn input_dim(&self, params: &ParamSet) -> usize {
        params.get(self.embed_w).shape()[1]
    }

    /// `x̃ = W x + b` for every row of `inputs`. Independent of the query, so
    /// it can be shared across expressions.
    pub fn project(&self, tape: &mut Tape, params: &ParamSet, inputs: Var) -> Result<Var> {
        let w = tape.param(params, self.embed_w);
        let b = tape.param(params, self.embed_b);
        let x = tape.matmul_nt(inputs, w)?;
        tape.add_row(x, b)
    }

    /// `s = wᵀ normalize(x̃ ⊙ q) + b` for every row of a projection.
    pub fn score(&self, tape: &mut Tape, params: &ParamSet, projected: Var, query: Var) -> Result<HeadScores> {
        let n = tape.value(projected).dims2().0;
        let z = tape.mul_row(projected, query)?;
        let z_hat = tape.l2_normalize(z, NORM_EPS)?;
        let w = tape.param(params, self.out_w);
        let b = tape.param(params, self.out_b);
        let s = tape.matmul_nt(z_hat, w)?;
        let s = tape.reshape(s, &[n, 1])?;
        let s = tape.add_row(s, b)?;
        let scores = tape.reshape(s, &[n])?;
        Ok(HeadScores { scores, z_hat })
    }
}

/// Localization module: scores a region's `[x_v x_s]` against `q_loc`.
#[derive(Debug, Clone, Copy)]
pub struct LocParams(pub ScoringHead);

/// Relationship module: scores an ordered pair's `[x_s1 x_s2]` against `q_rel`.
#[derive(Debug, Clone, Copy)]
pub struct RelParams(pub ScoringHead);

impl LocParams {
    pub const PREFIX: &'static str = "loc";

    pub fn register<R: Rng + ?Sized>(params: &mut ParamSet, region_dim: usize, embed_dim: usize, rng: &mut R) -> Result<Self> {
        ScoringHead::register(params, Self::PREFIX, region_dim, embed_dim, rng).map(LocParams)
    }

    pub fn lookup(params: &ParamSet) -> Result<Self> {
        ScoringHead::lookup(params, Self::PREFIX).map(LocParams)
    }
}

impl RelParams {
    pub const PREFIX: &'static str = "rel";

    pub fn register<R: Rng + ?Sized>(params: &mut ParamSet, embed_dim: usize, rng: &mut R) -> Result<Self> {
        ScoringHead::register(params, Self::PREFIX, 10, embed_dim, rng).map(RelParams)
    }

    pub fn lookup(params: &ParamSet) -> Result<Self> {
        ScoringHead::lookup(params, Self::PREFIX).map(RelParams)
    }
}

fn query_var(tape: &mut Tape, q: &[f64]) -> Result<Var> {
    Ok(tape.constant(Tensor::vector(q.to_vec())?))
}

fn single_row(tape: &mut Tape, row: Vec<f64>) -> Result<Var> {
    let n = row.len();
    Ok(tape.constant(Tensor::matrix(1, n, row)?))
}

/// Localization score of one region.
pub fn loc_score(region: &RegionFeatures, q_loc: &[f64], params: &ParamSet, loc: &LocParams) -> Result<f64> {
    let mut tape = Tape::new();
    let x = single_row(&mut tape, region.concat())?;
    if tape.value(x).dims2().1 != loc.0.input_dim(params) {
        return Err(Error::shape("loc_score", "region feature length does not match the module"));
    }
    let q = query_var(&mut tape, q_loc)?;
    let proj = loc.0.project(&mut tape, params, x)?;
    let s = loc.0.score(&mut tape, params, proj, q)?;
    Ok(tape.value(s.scores).item())
}

/// Relationship score of the ordered pair `(b1, b2)`.
pub fn rel_score(
    b1: &RegionFeatures,
    b2: &RegionFeatures,
    q_rel: &[f64],
    params: &ParamSet,
    rel: &RelParams,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut row = b1.x_s.to_vec();
    row.extend_from_slice(&b2.x_s);
    let x = single_row(&mut tape, row)?;
    let q = query_var(&mut tape, q_rel)?;
    let proj = rel.0.project(&mut tape, params, x)?;
    let s = rel.0.score(&mut tape, params, proj, q)?;
    Ok(tape.value(s.scores).item())
}

/// `s_pair = s_loc(b_i, q_subj) + s_loc(b_j, q_obj) + s_rel(b_i, b_j, q_rel)`.
pub fn pair_score(
    bi: &RegionFeatures,
    bj: &RegionFeatures,
    q: Queries<'_>,
    params: &ParamSet,
    loc: &LocParams,
    rel: &RelParams,
) -> Result<f64> {
    Ok(loc_score(bi, q.subj, params, loc)? + loc_score(bj, q.obj, params, loc)? + rel_score(bi, bj, q.rel, params, rel)?)
}

/// Borrowed component vectors of a parsed expression.
#[derive(Debug, Clone, Copy)]
pub struct Queries<'a> {
    pub subj: &'a [f64],
    pub rel: &'a [f64],
    pub obj: &'a [f64],
}

/// Recorded component vectors of one expression.
#[derive(Debug, Clone, Copy)]
pub struct QueryVars {
    pub subj: Var,
    pub rel: Var,
    pub obj: Var,
}

/// Recorded pairwise and unary scores for one expression.
#[derive(Debug, Clone, Copy)]
pub struct PairScores {
    pub loc_subj: HeadScores,
    pub loc_obj: HeadScores,
    pub rel: HeadScores,
    /// `N x N`, row = subject candidate, column = object candidate.
    pub pair: Var,
    /// `N`, max over each row of `pair`.
    pub subj: Var,
}

/// Query-independent projections for a candidate set, shared across the
/// expressions of one scene.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedCandidates {
    pub n: usize,
    pub regions: Var,
    pub pairs: Var,
}

impl ProjectedCandidates {
    pub fn new(
        tape: &mut Tape,
        params: &ParamSet,
        loc: &LocParams,
        rel: Option<&RelParams>,
        regions: &Tensor,
        pairs: &Tensor,
    ) -> Result<Self> {
        let n = regions.dims2().0;
        if n == 0 {
            return Err(Error::contract("empty candidate set"));
        }
        if regions.dims2().1 != loc.0.input_dim(params) {
            return Err(Error::shape(
                "candidates",
                format!("region width {} vs module input {}", regions.dims2().1, loc.0.input_dim(params)),
            ));
        }
        let r = tape.constant(regions.clone());
        let regions = loc.0.project(tape, params, r)?;
        let pairs = match rel {
            Some(rel) => {
                if pairs.dims2() != (n * n, 10) {
                    return Err(Error::shape("candidates", format!("pair features {:?}", pairs.shape())));
                }
                let p = tape.constant(pairs.clone());
                rel.0.project(tape, params, p)?
            }
            None => regions,
        };
        Ok(ProjectedCandidates { n, regions, pairs })
    }
}

/// Records the full `N x N` pair matrix and the unary subject scores.
pub fn pair_scores(
    tape: &mut Tape,
    params: &ParamSet,
    loc: &LocParams,
    rel: &RelParams,
    cand: &ProjectedCandidates,
    q: QueryVars,
    exclude_self_pair: bool,
) -> Result<PairScores> {
    let n = cand.n;
    if exclude_self_pair && n < 2 {
        return Err(Error::contract("excluding self pairs needs at least two candidates"));
    }
    let loc_subj = loc.0.score(tape, params, cand.regions, q.subj)?;
    let loc_obj = loc.0.score(tape, params, cand.regions, q.obj)?;
    let rel_s = rel.0.score(tape, params, cand.pairs, q.rel)?;
    let rel_m = tape.reshape(rel_s.scores, &[n, n])?;
    let unary = tape.outer_sum(loc_subj.scores, loc_obj.scores)?;
    let pair = tape.add(unary, rel_m)?;
    let subj = tape.max_rows(pair, exclude_self_pair)?;
    Ok(PairScores {
        loc_subj,
        loc_obj,
        rel: rel_s,
        pair,
        subj,
    })
}

/// Plain-value score table for one expression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub n: usize,
    /// Row-major `n x n`: `pair_scores[i * n + j] = s_pair(b_i, b_j)`.
    pub pair_scores: Vec<f64>,
    /// `subj_scores[i] = max_j s_pair(b_i, b_j)`.
    pub subj_scores: Vec<f64>,
    /// Display-only object map: `obj_scores[j] = max_i s_pair(b_i, b_j)`.
    pub obj_scores: Vec<f64>,
    /// Maximizing `(subject, object)`; ties go to the smallest row-major index.
    pub best_pair: (usize, usize),
    pub exclude_self_pair: bool,
}

impl ScoreTable {
    pub fn from_pair_matrix(n: usize, pair_scores: Vec<f64>, exclude_self_pair: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::contract("score table over an empty candidate set"));
        }
        if pair_scores.len() != n * n {
            return Err(Error::shape("score_table", format!("{} scores for {n} candidates", pair_scores.len())));
        }
        if exclude_self_pair && n < 2 {
            return Err(Error::contract("excluding self pairs needs at least two candidates"));
        }
        let allowed = |i: usize, j: usize| !(exclude_self_pair && i == j);
        let mut subj = vec![f64::NEG_INFINITY; n];
        let mut obj = vec![f64::NEG_INFINITY; n];
        let mut best: Option<(usize, usize)> = None;
        for i in 0..n {
            for j in 0..n {
                if !allowed(i, j) {
                    continue;
                }
                let s = pair_scores[i * n + j];
                subj[i] = subj[i].max(s);
                obj[j] = obj[j].max(s);
                if best.map_or(true, |(bi, bj)| s > pair_scores[bi * n + bj]) {
                    best = Some((i, j));
                }
            }
        }
        Ok(ScoreTable {
            n,
            pair_scores,
            subj_scores: subj,
            obj_scores: obj,
            best_pair: best.expect("at least one allowed pair"),
            exclude_self_pair,
        })
    }

    pub fn pair(&self, i: usize, j: usize) -> f64 {
        self.pair_scores[i * self.n + j]
    }

    pub fn best_subject(&self) -> usize {
        self.best_pair.0
    }
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d_e: usize, region_dim: usize, seed: u64) -> (ParamSet, LocParams, RelParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let loc = LocParams::register(&mut params, region_dim, d_e, &mut rng).unwrap();
        let rel = RelParams::register(&mut params, d_e, &mut rng).unwrap();
        params.get_mut(loc.0.out_b).data_mut()[0] = 0.3;
        params.get_mut(rel.0.out_b).data_mut()[0] = -0.2;
        (params, loc, rel)
    }

    fn region(v: &[f64], s: [f64; 5]) -> RegionFeatures {
        RegionFeatures { x_v: v.to_vec(), x_s: s }
    }

    #[test]
    fn zero_query_gives_bias() {
        let (params, loc, rel) = setup(4, 7, 1);
        let r = region(&[1.0, 0.0], [0.0, 0.0, 0.2, 0.2, 0.04]);
        assert_eq!(loc_score(&r, &[0.0; 4], &params, &loc).unwrap(), 0.3);
        assert_eq!(rel_score(&r, &r, &[0.0; 4], &params, &rel).unwrap(), -0.2);
    }

    #[test]
    fn zero_readout_gives_bias() {
        let (mut params, loc, _) = setup(4, 7, 2);
        params.get_mut(loc.0.out_w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        for k in 0..5 {
            let r = region(&[k as f64, 1.0], [0.2, 0.0, 0.4, 0.2, 0.04]);
            assert_eq!(loc_score(&r, &[0.5, -1.0, 2.0, 0.1], &params, &loc).unwrap(), 0.3);
        }
    }

    #[test]
    fn symmetric_weights_make_relation_symmetric() {
        let (mut params, _, rel) = setup(3, 7, 3);
        let w = params.get_mut(rel.0.embed_w).data_mut();
        for r in 0..3 {
            for c in 0..5 {
                w[r * 10 + 5 + c] = w[r * 10 + c];
            }
        }
        let a = region(&[], [0.0, 0.2, 0.2, 0.4, 0.04]);
        let b = region(&[], [0.6, 0.8, 0.8, 1.0, 0.04]);
        let q = [0.3, -0.7, 1.1];
        let ab = rel_score(&a, &b, &q, &params, &rel).unwrap();
        let ba = rel_score(&b, &a, &q, &params, &rel).unwrap();
        assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn loc_dimension_mismatch() {
        let (params, loc, _) = setup(4, 7, 1);
        let r = region(&[1.0], [0.0; 5]);
        assert!(matches!(loc_score(&r, &[1.0; 4], &params, &loc), Err(Error::Shape { .. })));
    }

    #[test]
    fn score_table_ties_and_singleton() {
        let t = ScoreTable::from_pair_matrix(1, vec![2.5], false).unwrap();
        assert_eq!(t.subj_scores, vec![2.5]);
        assert_eq!(t.best_pair, (0, 0));
        let t = ScoreTable::from_pair_matrix(2, vec![1.0, 3.0, 3.0, 0.0], false).unwrap();
        assert_eq!(t.best_pair, (0, 1));
        assert_eq!(t.subj_scores, vec![3.0, 3.0]);
        assert_eq!(t.obj_scores, vec![3.0, 3.0]);
        let t = ScoreTable::from_pair_matrix(2, vec![9.0, 1.0, 2.0, 9.0], true).unwrap();
        assert_eq!(t.best_pair, (1, 0));
        assert!(ScoreTable::from_pair_matrix(1, vec![1.0], true).is_err());
        assert!(ScoreTable::from_pair_matrix(0, vec![], false).is_err());
    }
}
