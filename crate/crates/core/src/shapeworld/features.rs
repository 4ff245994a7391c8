use serde::{Deserialize, Serialize};

use super::{Cell, Color, Scene, ShapeClass, ShapeInstance, Size};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the visual descriptor `x_v` of a cell is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMode {
    /// one-hot(shape) ++ one-hot(color) ++ one-hot(size); zeros for empty cells.
    #[default]
    Symbolic,
    /// Flattened `patch x patch` grayscale rendering of the cell.
    Raster { patch: usize },
}

impl FeatureMode {
    pub fn visual_dim(self) -> usize {
        match self {
            FeatureMode::Symbolic => ShapeClass::ALL.len() + Color::ALL.len() + Size::ALL.len(),
            FeatureMode::Raster { patch } => patch * patch,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatures {
    pub x_v: Vec<f64>,
    pub x_s: [f64; 5],
}

impl RegionFeatures {
    pub fn concat(&self) -> Vec<f64> {
        let mut v = self.x_v.clone();
        v.extend_from_slice(&self.x_s);
        v
    }
}

/// `[x_min/W, y_min/H, x_max/W, y_max/H, area_box/area_image]`.
pub fn spatial_feature(bbox: [f64; 4], width: f64, height: f64) -> [f64; 5] {
    let [x0, y0, x1, y1] = bbox;
    [
        x0 / width,
        y0 / height,
        x1 / width,
        y1 / height,
        (x1 - x0) * (y1 - y0) / (width * height),
    ]
}

/// Box of a cell on the unit-square image.
fn cell_box(cell: Cell, grid: usize) -> [f64; 4] {
    let g = grid as f64;
    [
        cell.col as f64 / g,
        cell.row as f64 / g,
        (cell.col + 1) as f64 / g,
        (cell.row + 1) as f64 / g,
    ]
}

pub fn region_features(scene: &Scene, cell: Cell, mode: FeatureMode) -> Result<RegionFeatures> {
    if cell.row >= scene.grid_size || cell.col >= scene.grid_size {
        return Err(Error::contract(format!("cell {cell} outside the grid")));
    }
    let shape = scene.at(cell);
    let x_v = match mode {
        FeatureMode::Symbolic => symbolic(shape),
        FeatureMode::Raster { patch } => raster(shape, patch),
    };
    Ok(RegionFeatures {
        x_v,
        x_s: spatial_feature(cell_box(cell, scene.grid_size), 1.0, 1.0),
    })
}

fn symbolic(shape: Option<ShapeInstance>) -> Vec<f64> {
    let mut v = vec![0.0; FeatureMode::Symbolic.visual_dim()];
    if let Some(s) = shape {
        let n_shape = ShapeClass::ALL.len();
        let n_color = Color::ALL.len();
        v[s.shape as usize] = 1.0;
        v[n_shape + s.color as usize] = 1.0;
        v[n_shape + n_color + s.size as usize] = 1.0;
    }
    v
}

fn raster(shape: Option<ShapeInstance>, patch: usize) -> Vec<f64> {
    let mut v = vec![0.0; patch * patch];
    let Some(s) = shape else { return v };
    let r = match s.size {
        Size::Small => 0.25,
        Size::Large => 0.45,
    };
    let lum = s.color.luminance();
    for py in 0..patch {
        for px in 0..patch {
            // pixel centre in [-0.5, 0.5], y growing downward
            let x = (px as f64 + 0.5) / patch as f64 - 0.5;
            let y = (py as f64 + 0.5) / patch as f64 - 0.5;
            let inside = match s.shape {
                ShapeClass::Circle => x * x + y * y <= r * r,
                ShapeClass::Square => x.abs() <= r && y.abs() <= r,
                ShapeClass::Triangle => y.abs() <= r && x.abs() <= (y + r) / 2.0,
            };
            if inside {
                v[py * patch + px] = lum;
            }
        }
    }
    v
}

/// Features for every cell of a scene, batched for the scoring modules.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub cells: Vec<Cell>,
    /// `N x (dim(x_v) + 5)` rows of `[x_v x_s]`.
    pub regions: Tensor,
    /// `N^2 x 10` rows of `[x_s(i) x_s(j)]`, row-major over `(i, j)`.
    pub pairs: Tensor,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn position(&self, cell: Cell) -> Option<usize> {
        self.cells.iter().position(|&c| c == cell)
    }

    /// Builds a candidate set from precomputed region features.
    pub fn from_regions(cells: Vec<Cell>, regions: &[RegionFeatures]) -> Result<Self> {
        if regions.is_empty() || cells.len() != regions.len() {
            return Err(Error::contract("candidate set needs one feature per cell and at least one cell"));
        }
        let dim = regions[0].x_v.len() + 5;
        let mut flat = Vec::with_capacity(regions.len() * dim);
        for r in regions {
            if r.x_v.len() + 5 != dim {
                return Err(Error::shape("candidates", "visual descriptors differ in length"));
            }
            flat.extend(r.concat());
        }
        let n = regions.len();
        let mut pairs = Vec::with_capacity(n * n * 10);
        for a in regions {
            for b in regions {
                pairs.extend_from_slice(&a.x_s);
                pairs.extend_from_slice(&b.x_s);
            }
        }
        Ok(CandidateSet {
            cells,
            regions: Tensor::matrix(n, dim, flat)?,
            pairs: Tensor::matrix(n * n, 10, pairs)?,
        })
    }
}

/// All grid cells of the scene in row-major order.
pub fn candidates(scene: &Scene, mode: FeatureMode) -> Result<CandidateSet> {
    let cells: Vec<Cell> = (0..scene.n_cells()).map(|i| Cell::from_index(i, scene.grid_size)).collect();
    let regions = cells
        .iter()
        .map(|&c| region_features(scene, c, mode))
        .collect::<Result<Vec<_>>>()?;
    CandidateSet::from_regions(cells, &regions)
}
