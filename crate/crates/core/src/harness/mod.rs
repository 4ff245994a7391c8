//! Evaluation, end-to-end experiments, inspection dumps and gradient checks.

mod gradcheck;
mod inspect;

pub use gradcheck::{grad_check, micro_problem, GradCheckCase, GradCheckReport, MicroProblem, TensorCheck};
pub use inspect::{inspect, relation_span_weight, render_grid, Dump};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::shapeworld::{generate_dataset, load_dataset, split_by_hash, Cell, Dataset, GeneratorConfig};
use crate::training::{save_checkpoint, train, Checkpoint, MetricsRecord, Role, Supervision, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene_id: String,
    pub expression_index: usize,
    pub predicted_subject: Cell,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_object: Option<Cell>,
    pub gt_subject: Cell,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_object: Option<Cell>,
    pub subject_correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelKind,
    pub p_at_1_subj: f64,
    /// Present when every expression has object ground truth and the model
    /// (or its companion object model) predicts objects.
    pub p_at_1_pair: Option<f64>,
    pub n_expressions: usize,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    /// One-line human summary.
    pub fn summary(&self) -> String {
        let pair = self
            .p_at_1_pair
            .map_or_else(|| "n/a".to_string(), |p| format!("{:.4}", p));
        format!(
            "{:?}: P@1-subj {:.4}  P@1-pair {}  ({} expressions)",
            self.model, self.p_at_1_subj, pair, self.n_expressions
        )
    }
}

/// Top-1 precision of `model` on `data`. For a localization-only model the
/// object prediction comes from `object_model`, trained to find objects.
pub fn evaluate(model: &Model, object_model: Option<&Model>, data: &Dataset) -> Result<EvalReport> {
    let per_scene: Vec<Vec<EvalRecord>> = data
        .scenes
        .par_iter()
        .map(|s| {
            let input = model.scene_input(s)?;
            let preds = model.predict(&input)?;
            let obj_preds = match object_model {
                Some(m) if model.kind() == ModelKind::BaselineLoc => Some(m.predict(&m.scene_input(s)?)?),
                _ => None,
            };
            let cells = &input.candidates.cells;
            Ok(s.expressions
                .iter()
                .zip(&preds)
                .enumerate()
                .map(|(k, (e, p))| {
                    let predicted_subject = cells[p.subject];
                    let predicted_object = match &obj_preds {
                        Some(o) => Some(cells[o[k].subject]),
                        None => p.object.map(|j| cells[j]),
                    };
                    let subject_correct = predicted_subject == e.subject_cell;
                    let pair_correct = match (predicted_object, e.object_cell) {
                        (Some(po), Some(go)) => Some(subject_correct && po == go),
                        _ => None,
                    };
                    EvalRecord {
                        scene_id: s.scene.scene_id.clone(),
                        expression_index: k,
                        predicted_subject,
                        predicted_object,
                        gt_subject: e.subject_cell,
                        gt_object: e.object_cell,
                        subject_correct,
                        pair_correct,
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let records: Vec<EvalRecord> = per_scene.into_iter().flatten().collect();
    let n = records.len();
    if n == 0 {
        return Err(Error::Config("evaluation set has no expressions".into()));
    }
    let hits = records.iter().filter(|r| r.subject_correct).count();
    let p_at_1_pair = if records.iter().all(|r| r.pair_correct.is_some()) {
        Some(records.iter().filter(|r| r.pair_correct == Some(true)).count() as f64 / n as f64)
    } else {
        None
    };
    Ok(EvalReport {
        model: model.kind(),
        p_at_1_subj: hits as f64 / n as f64,
        p_at_1_pair,
        n_expressions: n,
        records,
    })
}

/// Where an experiment's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Train and test sets drawn independently with their own seeds.
    Generate { train: GeneratorConfig, test: GeneratorConfig },
    Files { train: PathBuf, test: PathBuf },
    /// One generated pool split by scene-id hash.
    HashSplit { pool: GeneratorConfig, test_fraction: f64 },
}

impl DataSource {
    /// The desk-scale split: 3000 training and 500 test scenes on a 5x5 grid.
    pub fn desk(seed: u64) -> Self {
        DataSource::Generate {
            train: GeneratorConfig {
                n_scenes: 3000,
                seed,
                id_prefix: "train-".into(),
                ..Default::default()
            },
            test: GeneratorConfig {
                n_scenes: 500,
                seed: seed.wrapping_add(1_000_003),
                id_prefix: "test-".into(),
                ..Default::default()
            },
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Generate { train, test } => Ok((generate_dataset(train)?, generate_dataset(test)?)),
            DataSource::Files { train, test } => Ok((load_dataset(train)?, load_dataset(test)?)),
            DataSource::HashSplit { pool, test_fraction } => {
                if !(0.0..1.0).contains(test_fraction) {
                    return Err(Error::Config(format!("test_fraction {test_fraction} not in [0, 1)")));
                }
                Ok(split_by_hash(&generate_dataset(pool)?, *test_fraction))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub data: DataSource,
    /// Model, supervision and schedule.
    pub train: TrainConfig,
    /// For the baseline: also train an object-finding model so P@1-pair
    /// can be reported.
    #[serde(default)]
    pub pair_baseline: bool,
}

impl ExperimentSpec {
    pub fn desk(model: ModelKind, supervision: Supervision, seed: u64) -> Self {
        ExperimentSpec {
            data: DataSource::desk(seed),
            train: TrainConfig {
                model,
                supervision,
                seed,
                ..Default::default()
            },
            pair_baseline: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub checkpoint: Checkpoint,
    pub object_checkpoint: Option<Checkpoint>,
    pub report: EvalReport,
    pub metrics: Vec<MetricsRecord>,
}

/// Trains per `spec`, evaluates on the held-out split, and (with `out`)
/// writes `checkpoint.cmn`, `object.cmn`, `metrics.jsonl` and `report.json`.
pub fn run_experiment(spec: &ExperimentSpec, out: Option<&Path>) -> Result<ExperimentResult> {
    spec.train.validate()?;
    let (train_set, test_set) = spec.data.load()?;
    let mut metrics_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(Error::file(dir))?;
            let p = dir.join("metrics.jsonl");
            Some(std::io::BufWriter::new(fs::File::create(&p).map_err(Error::file(&p))?))
        }
        None => None,
    };
    let mut write_err = None;
    let mut sink = |r: &MetricsRecord| {
        if let Some(f) = metrics_file.as_mut() {
            let line = serde_json::to_string(r).expect("metrics serialize");
            if let Err(e) = writeln!(f, "{line}") {
                write_err.get_or_insert(e);
            }
        }
    };
    let outcome = train(&spec.train, &train_set, Some(&test_set), &mut sink)?;

    let object_checkpoint = if spec.pair_baseline && spec.train.model == ModelKind::BaselineLoc {
        let cfg = TrainConfig {
            baseline_target: Role::Object,
            ..spec.train.clone()
        };
        Some(train(&cfg, &train_set, None, &mut |_| {})?.checkpoint)
    } else {
        None
    };
    drop(sink);
    if let Some(e) = write_err {
        return Err(e.into());
    }
    if let Some(mut f) = metrics_file {
        f.flush()?;
    }

    let model = outcome.checkpoint.model()?;
    let object_model = object_checkpoint.as_ref().map(Checkpoint::model).transpose()?;
    let report = evaluate(&model, object_model.as_ref(), &test_set)?;

    if let Some(dir) = out {
        save_checkpoint(dir.join("checkpoint.cmn"), &outcome.checkpoint)?;
        if let Some(c) = &object_checkpoint {
            save_checkpoint(dir.join("object.cmn"), c)?;
        }
        let p = dir.join("report.json");
        fs::write(&p, serde_json::to_vec_pretty(&report)?).map_err(Error::file(&p))?;
    }
    Ok(ExperimentResult {
        checkpoint: outcome.checkpoint,
        object_checkpoint,
        report,
        metrics: outcome.metrics,
    })
}
