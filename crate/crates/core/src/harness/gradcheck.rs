use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::langrep::{DropoutCtx, Vocabulary};
use crate::model::{Model, ModelKind, SceneInput};
use crate::shapeworld::{
    AnnotatedScene, Cell, Color, Description, GroundedExpression, PlacedShape, Relation, Scene, ShapeClass, Size,
    Template,
};
use crate::tensor::Tape;
use crate::training::{scene_loss, Role, Supervision, TrainConfig};

const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub model: ModelKind,
    pub supervision: Supervision,
}

impl GradCheckCase {
    pub const ALL: [GradCheckCase; 3] = [
        GradCheckCase {
            model: ModelKind::Cmn,
            supervision: Supervision::Weak,
        },
        GradCheckCase {
            model: ModelKind::Cmn,
            supervision: Supervision::Strong,
        },
        GradCheckCase {
            model: ModelKind::BaselineLoc,
            supervision: Supervision::Weak,
        },
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub case: GradCheckCase,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
}

/// A 2x2 scene (four candidates) with two expressions and a tiny model.
#[derive(Debug, Clone)]
pub struct MicroProblem {
    pub config: TrainConfig,
    pub model: Model,
    pub scene: AnnotatedScene,
    pub input: SceneInput,
}

pub fn micro_problem(case: GradCheckCase, seed: u64) -> Result<MicroProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = Vec::new();
    for row in 0..2 {
        for col in 0..2 {
            objects.push(PlacedShape {
                row,
                col,
                shape: *ShapeClass::ALL.choose(&mut rng).expect("non-empty"),
                color: *Color::ALL.choose(&mut rng).expect("non-empty"),
                size: *Size::ALL.choose(&mut rng).expect("non-empty"),
            });
        }
    }
    let cells: Vec<Cell> = objects.iter().map(PlacedShape::cell).collect();
    let mut expressions = Vec::new();
    for _ in 0..2 {
        let s = rng.gen_range(0..4);
        let o = (s + rng.gen_range(1..4)) % 4;
        let desc = |p: &PlacedShape, rng: &mut ChaCha8Rng| Description {
            shape: p.shape,
            color: rng.gen_bool(0.5).then_some(p.color),
            size: rng.gen_bool(0.5).then_some(p.size),
        };
        let template = Template {
            subject: desc(&objects[s], &mut rng),
            relation: *Relation::ALL.choose(&mut rng).expect("non-empty"),
            object: desc(&objects[o], &mut rng),
        };
        expressions.push(GroundedExpression {
            tokens: template.tokens(),
            subject_cell: cells[s],
            object_cell: Some(cells[o]),
            template_parts: template.parts(),
        });
    }
    let scene = AnnotatedScene {
        scene: Scene {
            scene_id: format!("micro-{seed}"),
            grid_size: 2,
            objects,
        },
        expressions,
    };
    let config = TrainConfig {
        model: case.model,
        supervision: case.supervision,
        baseline_target: Role::Subject,
        embed_dim: 3,
        hidden_dim: 2,
        dropout_keep: 0.8,
        seed,
        ..Default::default()
    };
    let model = Model::new(config.model_spec(Vocabulary::shapeworld()), seed)?;
    let input = model.scene_input(&scene)?;
    Ok(MicroProblem {
        config,
        model,
        scene,
        input,
    })
}

impl MicroProblem {
    /// Scene loss under a dropout mask fixed by the seed.
    pub fn loss(&self, model: &Model, tape: &mut Tape) -> Result<crate::tensor::Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xd0d0);
        let mut ctx = DropoutCtx {
            keep: self.config.dropout_keep,
            train: true,
            rng: &mut rng,
        };
        let scores = model.forward_scene(tape, &self.input, &mut ctx)?;
        scene_loss(tape, model, &self.config, &self.input, &scores)
    }

    fn loss_value(&self, model: &Model) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss(model, &mut tape)?;
        Ok(tape.value(l).item())
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares backpropagated gradients of the micro-problem loss with central
/// differences at step `1e-5`, for every parameter entry.
pub fn grad_check(case: GradCheckCase, seed: u64) -> Result<GradCheckReport> {
    let problem = micro_problem(case, seed)?;
    let mut model = problem.model.clone();
    let mut tape = Tape::new();
    let l = problem.loss(&model, &mut tape)?;
    let loss = tape.value(l).item();
    tape.backward(l, &mut model.params)?;
    let analytic: Vec<Vec<f64>> = model
        .params
        .iter()
        .map(|(_, t)| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut probe = problem.model.clone();
    let mut tensors = Vec::new();
    for (k, id) in problem.model.params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let n = probe.params.get(id).len();
        let mut max_rel_err: f64 = 0.0;
        let mut max_abs_grad: f64 = 0.0;
        for e in 0..n {
            let orig = probe.params.get(id).data()[e];
            probe.params.get_mut(id).data_mut()[e] = orig + FD_STEP;
            let up = problem.loss_value(&probe)?;
            probe.params.get_mut(id).data_mut()[e] = orig - FD_STEP;
            let down = problem.loss_value(&probe)?;
            probe.params.get_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[k][e];
            max_rel_err = max_rel_err.max(relative_error(a, numeric));
            max_abs_grad = max_abs_grad.max(a.abs());
        }
        tensors.push(TensorCheck {
            name: problem.model.params.name(id).to_string(),
            entries: n,
            max_rel_err,
            max_abs_grad,
        });
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        case,
        loss,
        tensors,
        max_rel_err,
    })
}
