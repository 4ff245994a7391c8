//! Synthetic grid scenes of colored shapes with templated referring
//! expressions.
//!
//! Coordinates: row 0 is the top row and column 0 the left column, so
//! "above" means a strictly smaller row in the same column and "left of" a
//! strictly smaller column in the same row.

mod cmnf;
mod features;
mod generate;
mod io;

pub use cmnf::{read_region_file, write_region_file, RegionRecord};
pub use features::{
    candidates, region_features, spatial_feature, CandidateSet, FeatureMode, RegionFeatures,
};
pub use generate::{generate_dataset, generate_expression, GeneratorConfig};
pub use io::{load_dataset, read_dataset, save_dataset, split_by_hash, write_dataset, FORMAT_VERSION};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Magenta,
        Color::Cyan,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Magenta => "magenta",
            Color::Cyan => "cyan",
        }
    }

    /// Grayscale luminance, used by the raster feature mode.
    pub fn luminance(self) -> f64 {
        let (r, g, b) = match self {
            Color::Red => (1.0, 0.0, 0.0),
            Color::Green => (0.0, 1.0, 0.0),
            Color::Blue => (0.0, 0.0, 1.0),
            Color::Yellow => (1.0, 1.0, 0.0),
            Color::Magenta => (1.0, 0.0, 1.0),
            Color::Cyan => (0.0, 1.0, 1.0),
        };
        0.299 * r + 0.587 * g + 0.114 * b
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub shape: ShapeClass,
    pub color: Color,
    pub size: Size,
}

/// Grid position, serialized as `[row, col]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }

    /// Row-major index on a grid of the given size.
    pub fn index(self, grid_size: usize) -> usize {
        self.row * grid_size + self.col
    }

    pub fn from_index(index: usize, grid_size: usize) -> Self {
        Cell::new(index / grid_size, index % grid_size)
    }
}

impl From<[usize; 2]> for Cell {
    fn from([row, col]: [usize; 2]) -> Self {
        Cell { row, col }
    }
}

impl From<Cell> for [usize; 2] {
    fn from(c: Cell) -> Self {
        [c.row, c.col]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub row: usize,
    pub col: usize,
    pub shape: ShapeClass,
    pub color: Color,
    pub size: Size,
}

impl PlacedShape {
    pub fn cell(&self) -> Cell {
        Cell::new(self.row, self.col)
    }

    pub fn instance(&self) -> ShapeInstance {
        ShapeInstance {
            shape: self.shape,
            color: self.color,
            size: self.size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub grid_size: usize,
    pub objects: Vec<PlacedShape>,
}

impl Scene {
    pub fn at(&self, cell: Cell) -> Option<ShapeInstance> {
        self.objects
            .iter()
            .find(|o| o.row == cell.row && o.col == cell.col)
            .map(PlacedShape::instance)
    }

    pub fn n_cells(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return Err(Error::contract("grid_size must be positive"));
        }
        let mut seen = std::collections::HashSet::new();
        for o in &self.objects {
            if o.row >= self.grid_size || o.col >= self.grid_size {
                return Err(Error::contract(format!(
                    "object at {} outside {}x{} grid",
                    o.cell(),
                    self.grid_size,
                    self.grid_size
                )));
            }
            if !seen.insert(o.cell()) {
                return Err(Error::contract(format!("two objects at {}", o.cell())));
            }
        }
        Ok(())
    }
}

/// Attribute subset naming one or more shapes: "large red circle".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Description {
    pub shape: ShapeClass,
    pub color: Option<Color>,
    pub size: Option<Size>,
}

impl Description {
    pub fn matches(&self, s: &ShapeInstance) -> bool {
        s.shape == self.shape
            && self.color.map_or(true, |c| c == s.color)
            && self.size.map_or(true, |z| z == s.size)
    }

    pub fn words(&self) -> Vec<&'static str> {
        let mut w = Vec::with_capacity(3);
        w.extend(self.size.map(Size::word));
        w.extend(self.color.map(Color::word));
        w.push(self.shape.word());
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }

    /// Whether `subject` stands in this relation to `object`.
    pub fn holds(self, subject: Cell, object: Cell) -> bool {
        match self {
            Relation::LeftOf => subject.row == object.row && subject.col < object.col,
            Relation::RightOf => subject.row == object.row && subject.col > object.col,
            Relation::Above => subject.col == object.col && subject.row < object.row,
            Relation::Below => subject.col == object.col && subject.row > object.row,
        }
    }
}

/// The (subject, relationship, object) template behind an expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Template {
    pub subject: Description,
    pub relation: Relation,
    pub object: Description,
}

impl Template {
    pub fn tokens(&self) -> Vec<String> {
        let mut t = vec!["the"];
        t.extend(self.subject.words());
        t.extend(self.relation.words());
        t.push("a");
        t.extend(self.object.words());
        t.into_iter().map(String::from).collect()
    }

    pub fn parts(&self) -> TemplateParts {
        let mut subj = vec!["the"];
        subj.extend(self.subject.words());
        let mut obj = vec!["a"];
        obj.extend(self.object.words());
        TemplateParts {
            subj: subj.join(" "),
            rel: self.relation.words().join(" "),
            obj: obj.join(" "),
        }
    }

    /// Every ordered (subject, object) pair of distinct occupied cells that
    /// satisfies the full expression.
    pub fn groundings(&self, scene: &Scene) -> Vec<(Cell, Cell)> {
        let mut out = Vec::new();
        for s in scene.objects.iter().filter(|o| self.subject.matches(&o.instance())) {
            for o in scene.objects.iter().filter(|o| self.object.matches(&o.instance())) {
                if s.cell() != o.cell() && self.relation.holds(s.cell(), o.cell()) {
                    out.push((s.cell(), o.cell()));
                }
            }
        }
        out
    }

    pub fn subject_matches(&self, scene: &Scene) -> usize {
        scene.objects.iter().filter(|o| self.subject.matches(&o.instance())).count()
    }
}

/// Substrings used to realize an expression. Diagnostics only; never model input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateParts {
    pub subj: String,
    pub rel: String,
    pub obj: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedExpression {
    pub tokens: Vec<String>,
    pub subject_cell: Cell,
    /// Absent for subject-only annotations; generated data always has it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_cell: Option<Cell>,
    pub template_parts: TemplateParts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedScene {
    #[serde(flatten)]
    pub scene: Scene,
    pub expressions: Vec<GroundedExpression>,
}

impl AnnotatedScene {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        for (k, e) in self.expressions.iter().enumerate() {
            if e.tokens.is_empty() {
                return Err(Error::contract(format!("expression {k} has no tokens")));
            }
            if Some(e.subject_cell) == e.object_cell {
                return Err(Error::contract(format!("expression {k}: subject and object share a cell")));
            }
            for c in std::iter::once(e.subject_cell).chain(e.object_cell) {
                if self.scene.at(c).is_none() {
                    return Err(Error::contract(format!("expression {k}: cell {c} is empty")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub scenes: Vec<AnnotatedScene>,
}

impl Dataset {
    pub fn n_expressions(&self) -> usize {
        self.scenes.iter().map(|s| s.expressions.len()).sum()
    }

    pub fn find(&self, scene_id: &str) -> Option<&AnnotatedScene> {
        self.scenes.iter().find(|s| s.scene.scene_id == scene_id)
    }
}

/// The closed token vocabulary, in a fixed order.
pub fn vocabulary_words() -> Vec<&'static str> {
    let mut w = vec!["the", "a"];
    w.extend(Size::ALL.iter().map(|s| s.word()));
    w.extend(Color::ALL.iter().map(|c| c.word()));
    w.extend(ShapeClass::ALL.iter().map(|s| s.word()));
    w.extend(["left", "right", "of", "above", "below"]);
    w
}
