//! Full models: the compositional network and the localization-only
//! baseline, sharing one parameter store each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::{self, HeadScores, LocParams, PairScores, ProjectedCandidates, QueryVars, RelParams, ScoreTable};
use crate::langrep::{self, DropoutCtx, LangParams, LastStateEncoder, ParsedExpression, ParsedVars, Vocabulary};
use crate::shapeworld::{candidates, AnnotatedScene, CandidateSet, FeatureMode};
use crate::tensor::{ParamSet, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Parser + localization + relationship modules.
    #[default]
    Cmn,
    /// Last-state LSTM + localization module only.
    #[serde(alias = "baseline")]
    BaselineLoc,
}

/// Architecture snapshot stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub vocab: Vocabulary,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub features: FeatureMode,
    pub exclude_self_pair: bool,
}

impl ModelSpec {
    pub fn region_dim(&self) -> usize {
        self.features.visual_dim() + 5
    }
}

#[derive(Debug, Clone, Copy)]
enum Modules {
    Cmn {
        lang: LangParams,
        loc: LocParams,
        rel: RelParams,
    },
    Baseline {
        enc: LastStateEncoder,
        loc: LocParams,
    },
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamSet,
    modules: Modules,
}

/// Per-expression inputs: token ids plus ground-truth candidate indices.
#[derive(Debug, Clone)]
pub struct ExpressionInput {
    pub token_ids: Vec<usize>,
    pub subject: usize,
    pub object: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SceneInput {
    pub scene_id: String,
    pub candidates: CandidateSet,
    pub expressions: Vec<ExpressionInput>,
}

/// Recorded scores for one expression.
#[derive(Debug, Clone, Copy)]
pub enum ExpressionScores {
    Cmn { parsed: ParsedVars, scores: PairScores },
    Baseline { q_loc: Var, loc: HeadScores },
}

impl ExpressionScores {
    /// Unary scores the loss and argmax operate on: `s_subj` or `s_loc`.
    pub fn unary(&self) -> Var {
        match self {
            ExpressionScores::Cmn { scores, .. } => scores.subj,
            ExpressionScores::Baseline { loc, .. } => loc.scores,
        }
    }
}

/// Plain-value prediction for one expression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// `s_subj` (full model) or `s_loc` (baseline) per candidate.
    pub unary: Vec<f64>,
    pub subject: usize,
    /// Object candidate of the best pair; `None` for the baseline.
    pub object: Option<usize>,
    pub table: Option<ScoreTable>,
    pub parsed: Option<ParsedExpression>,
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(spec, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        if spec.embed_dim == 0 || spec.hidden_dim == 0 || spec.vocab.is_empty() {
            return Err(Error::Config("model dimensions and vocabulary must be non-empty".into()));
        }
        let mut params = ParamSet::new();
        let v = spec.vocab.len();
        let modules = match spec.kind {
            ModelKind::Cmn => Modules::Cmn {
                lang: LangParams::register(&mut params, v, spec.embed_dim, spec.hidden_dim, rng)?,
                loc: LocParams::register(&mut params, spec.region_dim(), spec.embed_dim, rng)?,
                rel: RelParams::register(&mut params, spec.embed_dim, rng)?,
            },
            ModelKind::BaselineLoc => Modules::Baseline {
                enc: LastStateEncoder::register(&mut params, v, spec.embed_dim, spec.hidden_dim, rng)?,
                loc: LocParams::register(&mut params, spec.region_dim(), spec.embed_dim, rng)?,
            },
        };
        Ok(Model { spec, params, modules })
    }

    /// Rebuilds a model around stored weights; names and shapes must match
    /// what the spec implies.
    pub fn from_params(spec: ModelSpec, params: ParamSet) -> Result<Self> {
        let mut template = Model::new(spec, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (name, t) in params.iter() {
            template.params.assign(name, t).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(template)
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn lang(&self) -> Option<&LangParams> {
        match &self.modules {
            Modules::Cmn { lang, .. } => Some(lang),
            Modules::Baseline { .. } => None,
        }
    }

    pub fn loc(&self) -> &LocParams {
        match &self.modules {
            Modules::Cmn { loc, .. } | Modules::Baseline { loc, .. } => loc,
        }
    }

    pub fn rel(&self) -> Option<&RelParams> {
        match &self.modules {
            Modules::Cmn { rel, .. } => Some(rel),
            Modules::Baseline { .. } => None,
        }
    }

    /// Encodes a scene's expressions and candidate features.
    pub fn scene_input(&self, scene: &AnnotatedScene) -> Result<SceneInput> {
        let cands = candidates(&scene.scene, self.spec.features)?;
        let expressions = scene
            .expressions
            .iter()
            .map(|e| {
                let locate = |c| {
                    cands
                        .position(c)
                        .ok_or_else(|| Error::contract(format!("cell {c} is not a candidate")))
                };
                Ok(ExpressionInput {
                    token_ids: self.spec.vocab.encode(&e.tokens)?,
                    subject: locate(e.subject_cell)?,
                    object: e.object_cell.map(locate).transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneInput {
            scene_id: scene.scene.scene_id.clone(),
            candidates: cands,
            expressions,
        })
    }

    /// Records the forward pass for every expression of a scene. The
    /// candidate projections are computed once and shared.
    pub fn forward_scene<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        input: &SceneInput,
        dropout: &mut DropoutCtx<'_, R>,
    ) -> Result<Vec<ExpressionScores>> {
        let params = &self.params;
        let cand = &input.candidates;
        match self.modules {
            Modules::Cmn { lang, loc, rel } => {
                let proj = ProjectedCandidates::new(tape, params, &loc, Some(&rel), &cand.regions, &cand.pairs)?;
                input
                    .expressions
                    .iter()
                    .map(|e| {
                        let enc = langrep::encode_bilstm(tape, params, &lang, &e.token_ids, dropout)?;
                        let parsed = langrep::attend_and_pool(tape, params, &lang, enc)?;
                        let q = QueryVars {
                            subj: parsed.q_subj,
                            rel: parsed.q_rel,
                            obj: parsed.q_obj,
                        };
                        let scores =
                            grounding::pair_scores(tape, params, &loc, &rel, &proj, q, self.spec.exclude_self_pair)?;
                        Ok(ExpressionScores::Cmn { parsed, scores })
                    })
                    .collect()
            }
            Modules::Baseline { enc, loc } => {
                let proj = ProjectedCandidates::new(tape, params, &loc, None, &cand.regions, &cand.pairs)?;
                input
                    .expressions
                    .iter()
                    .map(|e| {
                        let q = enc.encode(tape, params, &e.token_ids)?;
                        let s = loc.0.score(tape, params, proj.regions, q)?;
                        Ok(ExpressionScores::Baseline {
                            q_loc: q,
                            loc: s,
                        })
                    })
                    .collect()
            }
        }
    }

    /// Inference without dropout.
    pub fn predict(&self, input: &SceneInput) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut ctx = DropoutCtx {
            keep: 1.0,
            train: false,
            rng: &mut rng,
        };
        let out = self.forward_scene(&mut tape, input, &mut ctx)?;
        let n = input.candidates.len();
        out.iter()
            .map(|s| match s {
                ExpressionScores::Cmn { parsed, scores } => {
                    let table = ScoreTable::from_pair_matrix(
                        n,
                        tape.value(scores.pair).data().to_vec(),
                        self.spec.exclude_self_pair,
                    )?;
                    Ok(Prediction {
                        unary: table.subj_scores.clone(),
                        subject: table.best_pair.0,
                        object: Some(table.best_pair.1),
                        parsed: Some(ParsedExpression::from_tape(&tape, parsed)),
                        table: Some(table),
                    })
                }
                ExpressionScores::Baseline { loc, .. } => {
                    let unary = tape.value(loc.scores).data().to_vec();
                    Ok(Prediction {
                        subject: grounding::argmax(&unary),
                        unary,
                        object: None,
                        table: None,
                        parsed: None,
                    })
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapeworld::{generate_dataset, GeneratorConfig};

    fn spec(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            kind,
            vocab: Vocabulary::shapeworld(),
            embed_dim: 6,
            hidden_dim: 5,
            features: FeatureMode::Symbolic,
            exclude_self_pair: false,
        }
    }

    #[test]
    fn baseline_has_no_relationship_parameters() {
        let m = Model::new(spec(ModelKind::BaselineLoc), 1).unwrap();
        assert!(m.rel().is_none());
        assert!(m.params.iter().all(|(n, _)| !n.starts_with("rel.")));
        let c = Model::new(spec(ModelKind::Cmn), 1).unwrap();
        assert!(c.params.iter().any(|(n, _)| n.starts_with("rel.")));
    }

    #[test]
    fn predictions_cover_all_expressions() {
        let data = generate_dataset(&GeneratorConfig {
            n_scenes: 3,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        for kind in [ModelKind::Cmn, ModelKind::BaselineLoc] {
            let m = Model::new(spec(kind), 4).unwrap();
            for s in &data.scenes {
                let input = m.scene_input(s).unwrap();
                let preds = m.predict(&input).unwrap();
                assert_eq!(preds.len(), s.expressions.len());
                for p in preds {
                    assert_eq!(p.unary.len(), 25);
                    assert!(p.subject < 25);
                    assert_eq!(p.object.is_some(), kind == ModelKind::Cmn);
                }
            }
        }
    }

    #[test]
    fn from_params_rejects_foreign_shapes() {
        let m = Model::new(spec(ModelKind::Cmn), 1).unwrap();
        let mut other = spec(ModelKind::Cmn);
        other.embed_dim = 7;
        assert!(Model::from_params(other, m.params.clone()).is_err());
        let back = Model::from_params(spec(ModelKind::Cmn), m.params.clone()).unwrap();
        assert_eq!(back.params.get(back.loc().0.embed_w), m.params.get(m.loc().0.embed_w));
    }
}
