//! `cmn` command-line tool.
//!
//! Every subcommand accepts `--config <file.toml>`, `--seed` and `--out`;
//! flags override values from the file. Config layout:
//!
//! ```toml
//! seed = 7
//! out = "runs/desk"
//! train_scenes = 3000
//! test_scenes = 500
//! pair_baseline = false
//!
//! [generator]        # shape-world generator fields
//! grid_size = 5
//!
//! [train]            # training fields
//! iterations = 20000
//! learning_rate = 0.005
//! ```

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use cmn_core::harness::{self, DataSource, ExperimentSpec, GradCheckCase};
use cmn_core::shapeworld::{generate_dataset, load_dataset, save_dataset, Dataset, GeneratorConfig};
use cmn_core::training::{load_checkpoint, Role};
use cmn_core::{Error, ModelKind, Result, Supervision, TrainConfig};

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "cmn", about = "Compositional modular networks on a synthetic shape world")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train.jsonl and test.jsonl.
    Generate {
        #[arg(long)]
        train_scenes: Option<usize>,
        #[arg(long)]
        test_scenes: Option<usize>,
        #[arg(long)]
        grid_size: Option<usize>,
    },
    /// Train a model, evaluate it on the test split, write checkpoint and report.
    Train {
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        #[arg(long, value_enum)]
        supervision: Option<SupervisionArg>,
        /// Directory with train.jsonl and test.jsonl, or a training file
        /// (then `--test` is required). Generated when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
        /// Also train an object-finding baseline to report P@1-pair.
        #[arg(long)]
        pair_baseline: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        object_checkpoint: Option<PathBuf>,
        /// Dataset file, or a directory holding test.jsonl.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Dump attention weights and score maps for one expression.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        scene: String,
        #[arg(long, default_value_t = 0)]
        expression: usize,
    },
    /// Compare autodiff and finite-difference gradients on a micro-problem.
    GradCheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Cmn,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum SupervisionArg {
    Weak,
    Strong,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    out: Option<PathBuf>,
    train_scenes: usize,
    test_scenes: usize,
    pair_baseline: bool,
    generator: GeneratorConfig,
    train: TrainConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            seed: None,
            out: None,
            train_scenes: 3000,
            test_scenes: 500,
            pair_baseline: false,
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

struct Settings {
    file: FileConfig,
    seed: u64,
    out: PathBuf,
}

impl Settings {
    fn new(common: &Common) -> Result<Self> {
        let file = match &common.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(Error::file(p))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => FileConfig::default(),
        };
        let seed = common.seed.or(file.seed).unwrap_or(0);
        let out = common.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| "out".into());
        Ok(Settings { file, seed, out })
    }

    fn data_source(&self) -> DataSource {
        let split = |n, seed, prefix: &str| GeneratorConfig {
            n_scenes: n,
            seed,
            id_prefix: prefix.into(),
            ..self.file.generator.clone()
        };
        DataSource::Generate {
            train: split(self.file.train_scenes, self.seed, "train-"),
            test: split(self.file.test_scenes, self.seed.wrapping_add(1_000_003), "test-"),
        }
    }
}

fn dataset_file(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(Error::file(dir))?;
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_vec_pretty(value)?).map_err(Error::file(&p))?;
    Ok(p)
}

fn run(cli: Cli) -> Result<bool> {
    let mut s = Settings::new(&cli.common)?;
    match cli.command {
        Command::Generate {
            train_scenes,
            test_scenes,
            grid_size,
        } => {
            if let Some(n) = train_scenes {
                s.file.train_scenes = n;
            }
            if let Some(n) = test_scenes {
                s.file.test_scenes = n;
            }
            if let Some(g) = grid_size {
                s.file.generator.grid_size = g;
            }
            std::fs::create_dir_all(&s.out).map_err(Error::file(&s.out))?;
            let DataSource::Generate { train, test } = s.data_source() else {
                unreachable!("settings always generate")
            };
            for (cfg, name) in [(train, "train.jsonl"), (test, "test.jsonl")] {
                let data = generate_dataset(&cfg)?;
                let p = s.out.join(name);
                save_dataset(&p, &data)?;
                println!("{}: {} scenes, {} expressions", p.display(), data.scenes.len(), data.n_expressions());
            }
        }
        Command::Train {
            model,
            supervision,
            dataset,
            test,
            iterations,
            pair_baseline,
        } => {
            let mut train = s.file.train.clone();
            train.seed = s.seed;
            if let Some(m) = model {
                train.model = match m {
                    ModelArg::Cmn => ModelKind::Cmn,
                    ModelArg::Baseline => ModelKind::BaselineLoc,
                };
            }
            if let Some(sup) = supervision {
                train.supervision = match sup {
                    SupervisionArg::Weak => Supervision::Weak,
                    SupervisionArg::Strong => Supervision::Strong,
                };
            }
            if let Some(n) = iterations {
                train.iterations = n;
            }
            let data = match (dataset, test) {
                (None, None) => s.data_source(),
                (Some(d), t) => DataSource::Files {
                    train: dataset_file(&d, "train.jsonl"),
                    test: match t {
                        Some(t) => t,
                        None if d.is_dir() => d.join("test.jsonl"),
                        None => return Err(Error::Config("--dataset is a file; pass --test as well".into())),
                    },
                },
                (None, Some(_)) => return Err(Error::Config("--test needs --dataset".into())),
            };
            let spec = ExperimentSpec {
                data,
                train,
                pair_baseline: pair_baseline || s.file.pair_baseline,
            };
            let result = harness::run_experiment(&spec, Some(&s.out))?;
            if let (Some(first), Some(last)) = (result.metrics.first(), result.metrics.last()) {
                println!("train loss {:.4} -> {:.4}", first.train_loss, last.train_loss);
            }
            println!("{}", result.report.summary());
            println!("wrote {}", s.out.display());
        }
        Command::Eval {
            checkpoint,
            object_checkpoint,
            dataset,
        } => {
            let model = load_checkpoint(&checkpoint)?.model()?;
            let object = match object_checkpoint {
                Some(p) => {
                    let c = load_checkpoint(&p)?;
                    if c.config.baseline_target != Role::Object {
                        eprintln!("warning: {} was not trained to find objects", p.display());
                    }
                    Some(c.model()?)
                }
                None => None,
            };
            let data: Dataset = load_dataset(dataset_file(&dataset, "test.jsonl"))?;
            let report = harness::evaluate(&model, object.as_ref(), &data)?;
            let p = write_json(&s.out, "report.json", &report)?;
            println!("{}", report.summary());
            println!("wrote {}", p.display());
        }
        Command::Inspect {
            checkpoint,
            dataset,
            scene,
            expression,
        } => {
            let model = load_checkpoint(&checkpoint)?.model()?;
            let data = load_dataset(dataset_file(&dataset, "test.jsonl"))?;
            let dump = harness::inspect(&model, &data, &scene, expression)?;
            print!("{}", dump.render());
            let p = write_json(&s.out, "dump.json", &dump)?;
            println!("wrote {}", p.display());
        }
        Command::GradCheck => {
            let mut reports = Vec::new();
            for case in GradCheckCase::ALL {
                let r = harness::grad_check(case, s.seed)?;
                println!(
                    "{:?}/{:?}: max relative error {:.3e} over {} tensors",
                    case.model,
                    case.supervision,
                    r.max_rel_err,
                    r.tensors.len()
                );
                reports.push(r);
            }
            let p = write_json(&s.out, "grad_check.json", &reports)?;
            println!("wrote {}", p.display());
            return Ok(reports.iter().all(|r| r.max_rel_err <= GRAD_TOLERANCE));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check exceeded tolerance {GRAD_TOLERANCE:e}");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
