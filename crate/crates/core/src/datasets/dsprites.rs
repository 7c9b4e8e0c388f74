//! Binary 64×64 sprite images over a (shape, scale, orientation, x, y) grid.

use std::f64::consts::TAU;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{linspace, DatasetError, FactorGrid, LabeledImageDataset};

pub const SPRITE_SIDE: usize = 64;
/// Half extent in pixels of a sprite at scale 1.
const BASE_HALF_SIZE: f64 = 9.0;
/// Sprite centres range over `[MARGIN, SIDE − MARGIN]`.
const MARGIN: f64 = 13.0;

pub const FACTOR_NAMES: [&str; 5] = ["shape", "scale", "orientation", "pos_x", "pos_y"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Ellipse,
    Heart,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Ellipse, Shape::Heart];

    pub fn code(self) -> f64 {
        match self {
            Shape::Square => 1.0,
            Shape::Ellipse => 2.0,
            Shape::Heart => 3.0,
        }
    }

    /// Membership test in the sprite's own frame, where the shape fills the
    /// box `[−1, 1]²` and `v` points down.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => u.abs().max(v.abs()) <= 1.0,
            Shape::Ellipse => u * u + 4.0 * v * v <= 1.0,
            Shape::Heart => {
                // (x² + y² − 1)³ − x²y³ ≤ 0 spans x ∈ [−1.139, 1.139], y ∈ [−1, 1.236].
                let x = 1.139 * u;
                let y = 0.118 - 1.118 * v;
                let r = x * x + y * y - 1.0;
                r * r * r - x * x * y * y * y <= 0.0
            }
        }
    }
}

impl FromStr for Shape {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "square" => Ok(Shape::Square),
            "ellipse" => Ok(Shape::Ellipse),
            "heart" => Ok(Shape::Heart),
            other => Err(DatasetError::UnknownShape(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DspritesConfig {
    pub shapes: Vec<Shape>,
    pub scale_count: usize,
    pub orientation_count: usize,
    pub x_count: usize,
    pub y_count: usize,
}

impl DspritesConfig {
    /// Grid of the public dataset: 3 × 6 × 40 × 32 × 32.
    pub fn canonical() -> Self {
        Self::from_counts(&[3, 6, 40, 32, 32]).unwrap()
    }

    /// 3 × 4 × 10 × 8 × 8 = 7,680 images.
    pub fn desk_scale() -> Self {
        Self::from_counts(&[3, 4, 10, 8, 8]).unwrap()
    }

    /// Counts in factor order; the shape count picks the first shapes of
    /// square, ellipse, heart.
    pub fn from_counts(counts: &[usize]) -> Result<Self, DatasetError> {
        if counts.len() != 5 {
            return Err(DatasetError::Config(format!("expected 5 factor counts, got {}", counts.len())));
        }
        if counts.contains(&0) || counts[0] > 3 {
            return Err(DatasetError::Config(format!("invalid factor counts {counts:?}")));
        }
        Ok(Self {
            shapes: Shape::ALL[..counts[0]].to_vec(),
            scale_count: counts[1],
            orientation_count: counts[2],
            x_count: counts[3],
            y_count: counts[4],
        })
    }

    pub fn with_shape_names(mut self, names: &[&str]) -> Result<Self, DatasetError> {
        self.shapes = names.iter().map(|n| n.parse()).collect::<Result<_, _>>()?;
        if self.shapes.is_empty() {
            return Err(DatasetError::Config("at least one shape is required".into()));
        }
        Ok(self)
    }

    pub fn grid(&self) -> Result<FactorGrid, DatasetError> {
        FactorGrid::new(
            FACTOR_NAMES.iter().map(|s| s.to_string()).collect(),
            vec![
                self.shapes.iter().map(|s| s.code()).collect(),
                linspace(0.5, 1.0, self.scale_count, 1.0),
                linspace(0.0, TAU, self.orientation_count, 0.0),
                linspace(0.0, 1.0, self.x_count, 0.5),
                linspace(0.0, 1.0, self.y_count, 0.5),
            ],
        )
    }
}

/// Rasterizes one sprite: a pixel is white iff its centre lies inside the
/// shape after undoing translation, rotation and scaling.
pub fn rasterize(shape: Shape, scale: f64, orientation: f64, pos_x: f64, pos_y: f64) -> Vec<f64> {
    let side = SPRITE_SIDE as f64;
    let cx = MARGIN + pos_x * (side - 2.0 * MARGIN);
    let cy = MARGIN + pos_y * (side - 2.0 * MARGIN);
    let half = BASE_HALF_SIZE * scale;
    let (sin, cos) = orientation.sin_cos();
    let mut img = vec![0.0; SPRITE_SIDE * SPRITE_SIDE];
    for py in 0..SPRITE_SIDE {
        let dy = py as f64 + 0.5 - cy;
        for px in 0..SPRITE_SIDE {
            let dx = px as f64 + 0.5 - cx;
            let u = (cos * dx + sin * dy) / half;
            let v = (-sin * dx + cos * dy) / half;
            if shape.contains(u, v) {
                img[py * SPRITE_SIDE + px] = 1.0;
            }
        }
    }
    img
}

/// Full Cartesian product of the configured factor values.
pub fn gen_dsprites(config: &DspritesConfig) -> Result<LabeledImageDataset, DatasetError> {
    let grid = config.grid()?;
    let n = grid.num_images();
    let size = SPRITE_SIDE * SPRITE_SIDE;
    let mut pixels = Vec::with_capacity(n * size);
    let mut factors = Vec::with_capacity(n * 5);
    for row in 0..n {
        let t = grid.tuple_of(row);
        let value = |f: usize| grid.values[f][t[f] as usize];
        pixels.extend(rasterize(
            config.shapes[t[0] as usize],
            value(1),
            value(2),
            value(3),
            value(4),
        ));
        factors.extend_from_slice(&t);
    }
    LabeledImageDataset::new(SPRITE_SIDE, SPRITE_SIDE, pixels, factors, grid)
}
