use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    AnnotatedScene, Color, Dataset, Description, GroundedExpression, PlacedShape, Relation, Scene,
    ShapeClass, Size, Template,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_scenes: usize,
    pub grid_size: usize,
    pub seed: u64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Target number of distinct expressions per scene (at least one is guaranteed).
    pub expressions_per_scene: usize,
    pub shapes: Vec<ShapeClass>,
    pub colors: Vec<Color>,
    pub sizes: Vec<Size>,
    /// Layout resamples per scene before giving up.
    pub retry_budget: usize,
    pub id_prefix: String,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_scenes: 1000,
            grid_size: 5,
            seed: 0,
            min_shapes: 6,
            max_shapes: 12,
            expressions_per_scene: 2,
            shapes: ShapeClass::ALL.to_vec(),
            colors: Color::ALL.to_vec(),
            sizes: Size::ALL.to_vec(),
            retry_budget: 1000,
            id_prefix: "scene-".into(),
        }
    }
}

impl GeneratorConfig {
    fn check(&self) -> Result<()> {
        if self.n_scenes == 0 {
            return Err(Error::Config("n_scenes must be at least 1".into()));
        }
        if self.grid_size == 0 || self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!(
                "invalid layout bounds: grid {} shapes {}..={}",
                self.grid_size, self.min_shapes, self.max_shapes
            )));
        }
        if self.shapes.is_empty() || self.colors.is_empty() || self.sizes.is_empty() {
            return Err(Error::Config("attribute vocabularies must be non-empty".into()));
        }
        if self.expressions_per_scene == 0 || self.retry_budget == 0 {
            return Err(Error::Config("expressions_per_scene and retry_budget must be positive".into()));
        }
        Ok(())
    }
}

/// Per-scene seed, so scenes can be generated independently.
fn scene_seed(seed: u64, index: usize) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(index as u64))
}

pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    config.check()?;
    let scenes = (0..config.n_scenes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(config.seed, i));
            generate_scene(config, format!("{}{i:06}", config.id_prefix), &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { scenes })
}

fn generate_scene(config: &GeneratorConfig, scene_id: String, rng: &mut ChaCha8Rng) -> Result<AnnotatedScene> {
    let n_cells = config.grid_size * config.grid_size;
    let mut failure = "subject description ambiguous with a unique relational grounding";
    if config.min_shapes > n_cells {
        failure = "grid has fewer cells than the minimum shape count";
    }
    for _ in 0..config.retry_budget {
        if config.min_shapes > n_cells {
            break;
        }
        let n = rng.gen_range(config.min_shapes..=config.max_shapes.min(n_cells));
        let objects = index::sample(rng, n_cells, n)
            .into_iter()
            .map(|c| PlacedShape {
                row: c / config.grid_size,
                col: c % config.grid_size,
                shape: *config.shapes.choose(rng).expect("non-empty"),
                color: *config.colors.choose(rng).expect("non-empty"),
                size: *config.sizes.choose(rng).expect("non-empty"),
            })
            .collect();
        let scene = Scene {
            scene_id: scene_id.clone(),
            grid_size: config.grid_size,
            objects,
        };
        let mut expressions = Vec::new();
        let mut used = HashSet::new();
        for _ in 0..config.expressions_per_scene {
            match draw_expression(&scene, rng, &used) {
                Some((t, e)) => {
                    used.insert(t);
                    expressions.push(e);
                }
                None => break,
            }
        }
        if !expressions.is_empty() {
            return Ok(AnnotatedScene { scene, expressions });
        }
    }
    Err(Error::Generation {
        attempts: config.retry_budget,
        constraint: format!("{scene_id}: {failure}"),
    })
}

/// Draws one expression whose subject description matches at least two
/// shapes while exactly one (subject, object) pair satisfies the whole
/// expression.
pub fn generate_expression<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Result<GroundedExpression> {
    draw_expression(scene, rng, &HashSet::new())
        .map(|(_, e)| e)
        .ok_or_else(|| Error::Generation {
            attempts: 1,
            constraint: format!("{}: no ambiguous subject with a unique grounding", scene.scene_id),
        })
}

fn descriptions(p: &PlacedShape) -> [Description; 4] {
    let d = |color, size| Description {
        shape: p.shape,
        color,
        size,
    };
    [
        d(None, None),
        d(Some(p.color), None),
        d(None, Some(p.size)),
        d(Some(p.color), Some(p.size)),
    ]
}

fn draw_expression<R: Rng + ?Sized>(
    scene: &Scene,
    rng: &mut R,
    used: &HashSet<Template>,
) -> Option<(Template, GroundedExpression)> {
    let mut pairs = Vec::new();
    for s in &scene.objects {
        for o in &scene.objects {
            if let Some(rel) = Relation::ALL.iter().copied().find(|r| r.holds(s.cell(), o.cell())) {
                pairs.push((s, o, rel));
            }
        }
    }
    pairs.shuffle(rng);
    for (s, o, relation) in pairs {
        let mut subjects = descriptions(s).to_vec();
        subjects.shuffle(rng);
        for subject in subjects {
            let probe = Template {
                subject,
                relation,
                object: descriptions(o)[0],
            };
            if probe.subject_matches(scene) < 2 {
                continue;
            }
            let mut objects = descriptions(o).to_vec();
            objects.shuffle(rng);
            for object in objects {
                let t = Template {
                    subject,
                    relation,
                    object,
                };
                if used.contains(&t) {
                    continue;
                }
                if t.groundings(scene) == [(s.cell(), o.cell())] {
                    let e = GroundedExpression {
                        tokens: t.tokens(),
                        subject_cell: s.cell(),
                        object_cell: Some(o.cell()),
                        template_parts: t.parts(),
                    };
                    return Some((t, e));
                }
            }
        }
    }
    None
}
