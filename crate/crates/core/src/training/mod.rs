//! Supervised (pair) and multiple-instance (subject-only) losses, the SGD
//! training loop, and checkpoints.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::evaluate;
use crate::langrep::{DropoutCtx, Vocabulary};
use crate::model::{ExpressionScores, Model, ModelKind, ModelSpec, SceneInput};
use crate::shapeworld::{AnnotatedScene, Dataset, FeatureMode};
use crate::tensor::{OptimizerState, Sgd, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Subject ground truth only; the object is latent.
    #[default]
    Weak,
    /// Subject and object ground truth; softmax over all pairs.
    Strong,
}

/// Which ground-truth cell a localization-only model is trained to find.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Subject,
    Object,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub supervision: Supervision,
    pub baseline_target: Role,
    pub iterations: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_interval: u64,
    pub dropout_keep: f64,
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub features: FeatureMode,
    pub exclude_self_pair: bool,
    /// Average instead of sum the per-expression losses of a scene.
    pub average_loss: bool,
    /// Metrics cadence in iterations; 0 logs only the first and last step.
    pub log_every: u64,
    /// Scenes in the fixed train / held-out probes used for metrics.
    pub probe_scenes: usize,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Cmn,
            supervision: Supervision::Weak,
            baseline_target: Role::Subject,
            iterations: 20_000,
            learning_rate: 0.005,
            momentum: 0.95,
            decay_factor: 0.1,
            decay_interval: 8_000,
            dropout_keep: 0.7,
            seed: 0,
            embed_dim: 64,
            hidden_dim: 64,
            features: FeatureMode::Symbolic,
            exclude_self_pair: false,
            average_loss: false,
            log_every: 1_000,
            probe_scenes: 100,
            train_path: None,
            test_path: None,
        }
    }
}

impl TrainConfig {
    /// The schedule used by the original large-scale runs: 300k iterations,
    /// decay by 0.1 every 120k, 1000-unit LSTMs.
    pub fn paper_scale() -> Self {
        TrainConfig {
            iterations: 300_000,
            decay_interval: 120_000,
            hidden_dim: 1000,
            ..Default::default()
        }
    }

    pub fn model_spec(&self, vocab: Vocabulary) -> ModelSpec {
        ModelSpec {
            kind: self.model,
            vocab,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            features: self.features,
            exclude_self_pair: self.exclude_self_pair,
        }
    }

    pub fn optimizer_state(&self) -> Result<OptimizerState> {
        OptimizerState::new(self.learning_rate, self.momentum, self.decay_factor, self.decay_interval)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model == ModelKind::BaselineLoc && self.supervision == Supervision::Strong {
            return Err(Error::Config(
                "the localization-only baseline scores single regions and cannot use pair supervision".into(),
            ));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!("dropout_keep {} not in (0, 1]", self.dropout_keep)));
        }
        self.optimizer_state().map(|_| ())
    }

    fn needs_object(&self) -> bool {
        match self.model {
            ModelKind::Cmn => self.supervision == Supervision::Strong,
            ModelKind::BaselineLoc => self.baseline_target == Role::Object,
        }
    }
}

/// `-log softmax` over all `N^2` pairs at `(subject, object)`.
///
/// With `exclude_self_pair` the diagonal is left out of the softmax.
pub fn loss_strong(tape: &mut Tape, pair: Var, subject: usize, object: usize, exclude_self_pair: bool) -> Result<Var> {
    let shape = tape.shape(pair).to_vec();
    let n = match shape.as_slice() {
        [r, c] if r == c => *r,
        _ => return Err(Error::shape("loss_strong", format!("pair matrix {shape:?}"))),
    };
    if subject >= n || object >= n {
        return Err(Error::contract(format!("ground truth ({subject}, {object}) outside {n} candidates")));
    }
    let flat = tape.reshape(pair, &[n * n])?;
    let (logits, target) = if exclude_self_pair {
        if subject == object {
            return Err(Error::contract("ground-truth pair is a self pair but self pairs are excluded"));
        }
        let keep: Vec<usize> = (0..n * n).filter(|k| k / n != k % n).collect();
        let target = keep.iter().position(|&k| k == subject * n + object).expect("off-diagonal");
        (tape.gather(flat, &keep)?, target)
    } else {
        (flat, subject * n + object)
    };
    nll(tape, logits, target)
}

/// `-log softmax` over candidates at `subject`.
pub fn loss_weak(tape: &mut Tape, unary: Var, subject: usize) -> Result<Var> {
    let shape = tape.shape(unary).to_vec();
    if shape.len() != 1 {
        return Err(Error::shape("loss_weak", format!("scores {shape:?}")));
    }
    if subject >= shape[0] {
        return Err(Error::contract(format!("ground truth {subject} outside {} candidates", shape[0])));
    }
    nll(tape, unary, subject)
}

fn nll(tape: &mut Tape, logits: Var, target: usize) -> Result<Var> {
    let ls = tape.log_softmax(logits)?;
    let pick = tape.gather(ls, &[target])?;
    tape.scale(pick, -1.0)
}

/// [`loss_strong`] on plain values.
pub fn loss_strong_value(pair: &[f64], n: usize, subject: usize, object: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::matrix(n, n, pair.to_vec())?);
    let l = loss_strong(&mut tape, p, subject, object, false)?;
    Ok(tape.value(l).item())
}

/// [`loss_weak`] on plain values.
pub fn loss_weak_value(scores: &[f64], subject: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::vector(scores.to_vec())?);
    let l = loss_weak(&mut tape, s, subject)?;
    Ok(tape.value(l).item())
}

/// Records the loss of every expression in a scene and returns their sum
/// (or mean) together with the expression count.
pub fn scene_loss(
    tape: &mut Tape,
    model: &Model,
    config: &TrainConfig,
    input: &SceneInput,
    scores: &[ExpressionScores],
) -> Result<Var> {
    let mut losses = Vec::with_capacity(scores.len());
    for (e, s) in input.expressions.iter().zip(scores) {
        let l = match (s, model.kind()) {
            (ExpressionScores::Cmn { scores, .. }, _) => match config.supervision {
                Supervision::Weak => loss_weak(tape, scores.subj, e.subject)?,
                Supervision::Strong => {
                    let object = e
                        .object
                        .ok_or_else(|| Error::Config("strong supervision needs object ground truth".into()))?;
                    loss_strong(tape, scores.pair, e.subject, object, model.spec.exclude_self_pair)?
                }
            },
            (ExpressionScores::Baseline { loc, .. }, _) => {
                let target = match config.baseline_target {
                    Role::Subject => e.subject,
                    Role::Object => e
                        .object
                        .ok_or_else(|| Error::Config("object-target baseline needs object ground truth".into()))?,
                };
                loss_weak(tape, loc.scores, target)?
            }
        };
        losses.push(l);
    }
    let total = tape.add_all(&losses)?;
    if config.average_loss {
        tape.scale(total, 1.0 / losses.len() as f64)
    } else {
        Ok(total)
    }
}

/// One metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr_eff: f64,
    /// Mean per-expression loss on the fixed training probe, without dropout.
    pub train_loss: f64,
    pub p_at_1_subj: Option<f64>,
    pub p_at_1_pair: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
}

fn check_dataset(config: &TrainConfig, data: &Dataset) -> Result<()> {
    if data.n_expressions() == 0 {
        return Err(Error::Config("training set has no expressions".into()));
    }
    if config.needs_object() {
        if let Some(s) = data
            .scenes
            .iter()
            .find(|s| s.expressions.iter().any(|e| e.object_cell.is_none()))
        {
            return Err(Error::Config(format!(
                "this configuration needs object ground truth, missing in scene {}",
                s.scene.scene_id
            )));
        }
    }
    Ok(())
}

fn probe(data: &Dataset, n: usize) -> Dataset {
    Dataset {
        scenes: data.scenes.iter().filter(|s| !s.expressions.is_empty()).take(n).cloned().collect(),
    }
}

/// Mean per-expression loss without dropout.
pub fn mean_loss(model: &Model, config: &TrainConfig, data: &Dataset) -> Result<f64> {
    let per_expression = TrainConfig {
        average_loss: false,
        ..config.clone()
    };
    let mut total = 0.0;
    let mut count = 0usize;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    for s in &data.scenes {
        if s.expressions.is_empty() {
            continue;
        }
        let input = model.scene_input(s)?;
        let mut tape = Tape::new();
        let mut ctx = DropoutCtx {
            keep: 1.0,
            train: false,
            rng: &mut rng,
        };
        let scores = model.forward_scene(&mut tape, &input, &mut ctx)?;
        let l = scene_loss(&mut tape, model, &per_expression, &input, &scores)?;
        total += tape.value(l).item();
        count += input.expressions.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Trains a fresh model. See [`train_from`].
pub fn train(
    config: &TrainConfig,
    data: &Dataset,
    heldout: Option<&Dataset>,
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Model::new(config.model_spec(Vocabulary::shapeworld()), config.seed)?;
    train_from(config, model, data, heldout, sink)
}

/// Runs `config.iterations` SGD steps starting from `model`, one scene per
/// batch. Scenes are visited in a seeded order reshuffled every epoch.
pub fn train_from(
    config: &TrainConfig,
    mut model: Model,
    data: &Dataset,
    heldout: Option<&Dataset>,
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(config, data)?;
    if model.kind() != config.model {
        return Err(Error::Config(format!(
            "config trains {:?} but the model is {:?}",
            config.model,
            model.kind()
        )));
    }
    let scenes: Vec<&AnnotatedScene> = data.scenes.iter().filter(|s| !s.expressions.is_empty()).collect();
    let train_probe = probe(data, config.probe_scenes);
    let held_probe = heldout.map(|h| probe(h, config.probe_scenes));

    let mut sgd = Sgd::new(config.optimizer_state()?, &model.params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5ce7_e0a1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd50f_0a7e);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;
    let mut metrics = Vec::new();

    let mut log = |model: &Model, step: u64, lr: f64| -> Result<()> {
        let train_loss = mean_loss(model, config, &train_probe)?;
        let (p_subj, p_pair) = match &held_probe {
            Some(h) if !h.scenes.is_empty() => {
                let r = evaluate(model, None, h)?;
                (Some(r.p_at_1_subj), r.p_at_1_pair)
            }
            _ => (None, None),
        };
        let rec = MetricsRecord {
            step,
            lr_eff: lr,
            train_loss,
            p_at_1_subj: p_subj,
            p_at_1_pair: p_pair,
        };
        sink(&rec);
        metrics.push(rec);
        Ok(())
    };

    log(&model, 0, sgd.state.effective_lr())?;
    for it in 0..config.iterations {
        if cursor == order.len() {
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let scene = scenes[order[cursor]];
        cursor += 1;
        let diverged = || Error::Diverged {
            iteration: it,
            scene_id: scene.scene.scene_id.clone(),
        };

        let input = model.scene_input(scene)?;
        let mut tape = Tape::new();
        let mut ctx = DropoutCtx {
            keep: config.dropout_keep,
            train: true,
            rng: &mut dropout_rng,
        };
        let step = (|| -> Result<()> {
            let scores = model.forward_scene(&mut tape, &input, &mut ctx)?;
            let loss = scene_loss(&mut tape, &model, config, &input, &scores)?;
            tape.backward(loss, &mut model.params)?;
            sgd.step(&mut model.params)
        })();
        match step {
            Ok(()) => {}
            Err(Error::NonFinite { .. }) => return Err(diverged()),
            Err(e) => return Err(e),
        }

        let done = it + 1;
        let periodic = config.log_every > 0 && done % config.log_every == 0;
        if periodic || done == config.iterations {
            log(&model, done, sgd.state.effective_lr())?;
        }
    }

    let velocity = model
        .params
        .iter()
        .zip(sgd.velocity())
        .map(|((name, _), v)| (name.to_string(), v.clone()))
        .collect();
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            spec: model.spec.clone(),
            optimizer: sgd.state,
            velocity,
            params: model.params,
        },
        metrics,
    })
}
