//! Procedural shapes dataset: squares, disks and triangles on a tinted
//! background, with per-pixel labels rendered from the same geometry.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::pnm::{self, PnmError};

pub const NUM_CLASSES: usize = 4;
pub const BACKGROUND: u8 = 0;
pub const MIN_SHAPE_SIZE: u32 = 8;
pub const MAX_SHAPE_SIZE: u32 = 24;
pub const NOISE_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Square = 1,
    Disk = 2,
    Triangle = 3,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Square, ShapeClass::Disk, ShapeClass::Triangle];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn from_label(label: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == label)
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Square => "square",
            ShapeClass::Disk => "disk",
            ShapeClass::Triangle => "triangle",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// One rendered shape, centred at `(cy, cx)` with extent `size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub class: ShapeClass,
    pub cy: f64,
    pub cx: f64,
    pub size: f64,
    pub color: [f32; 3],
}

impl ShapeInstance {
    /// Whether the pixel centre `(y + 0.5, x + 0.5)` lies inside the shape.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let half = self.size / 2.0;
        match self.class {
            ShapeClass::Square => dx >= -half && dx < half && dy >= -half && dy < half,
            ShapeClass::Disk => dx * dx + dy * dy <= half * half,
            // Upright isosceles triangle: apex on top, base at the bottom.
            ShapeClass::Triangle => dy >= -half && dy < half && dx.abs() <= (dy + half) / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesSample {
    /// `[3, h, w]`, 8-bit quantized values in `[0, 1]`.
    pub image: Array3<f32>,
    /// `[h, w]` class indices.
    pub labels: Array2<u8>,
    /// Shapes in drawing order; empty for samples loaded from disk.
    pub shapes: Vec<ShapeInstance>,
}

impl ShapesSample {
    /// Pixels of one drawn shape still visible after occlusion.
    pub fn visible_mask(&self, index: usize) -> Array2<bool> {
        let (h, w) = self.labels.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            self.shapes
                .iter()
                .rposition(|s| s.covers(y, x))
                .is_some_and(|top| top == index)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
}

fn pick_color(rng: &mut ChaCha8Rng, background: [f32; 3]) -> [f32; 3] {
    let mut color = [0.0; 3];
    for _ in 0..32 {
        color = [rng.gen(), rng.gen(), rng.gen()];
        let contrast: f32 = color
            .iter()
            .zip(&background)
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / 3.0;
        if contrast >= 0.2 {
            break;
        }
    }
    color
}

fn render(rng: &mut ChaCha8Rng, size: usize) -> ShapesSample {
    let base: f32 = rng.gen_range(0.25..0.55);
    let background = [
        base + rng.gen_range(-0.05..0.05),
        base + rng.gen_range(-0.05..0.05),
        base + rng.gen_range(-0.05..0.05),
    ];
    let count = rng.gen_range(1..=4);
    let shapes: Vec<ShapeInstance> = (0..count)
        .map(|_| {
            let class = ShapeClass::ALL[rng.gen_range(0..3)];
            let extent = rng.gen_range(MIN_SHAPE_SIZE..=MAX_SHAPE_SIZE) as f64;
            let half = extent / 2.0;
            let cy = rng.gen_range(half..=size as f64 - half);
            let cx = rng.gen_range(half..=size as f64 - half);
            ShapeInstance {
                class,
                cy,
                cx,
                size: extent,
                color: pick_color(rng, background),
            }
        })
        .collect();
    let illumination: f32 = rng.gen_range(0.85..1.15);
    let noise = Normal::new(0.0, NOISE_SIGMA).unwrap();

    let mut labels = Array2::from_elem((size, size), BACKGROUND);
    let mut image = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let mut color = background;
            if let Some(s) = shapes.iter().rev().find(|s| s.covers(y, x)) {
                color = s.color;
                labels[[y, x]] = s.class.label();
            }
            for c in 0..3 {
                let v = color[c] * illumination + noise.sample(rng) as f32;
                image[[c, y, x]] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    ShapesSample {
        image,
        labels,
        shapes,
    }
}

/// Generate `count` samples of `image_size` squared pixels.
///
/// Samples are drawn from one seeded stream, so the first `k` samples do
/// not depend on `count`.
///
/// # Panics
/// If `image_size < 32`.
pub fn gen_shapes_dataset(count: usize, image_size: usize, seed: u64) -> Vec<ShapesSample> {
    assert!(image_size >= 32, "image_size must be at least 32");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| render(&mut rng, image_size)).collect()
}

/// Write `NNNNN.ppm`, `NNNNN.pgm` and `meta.json` into `dir`. Returns the
/// written paths in order.
pub fn save_dataset(
    dir: &Path,
    samples: &[ShapesSample],
    meta: &DatasetMeta,
) -> Result<Vec<std::path::PathBuf>, PnmError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(2 * samples.len() + 1);
    for (i, s) in samples.iter().enumerate() {
        let img = dir.join(format!("{i:05}.ppm"));
        pnm::write_pnm(&img, &pnm::rgb_to_pnm(&s.image))?;
        let lab = dir.join(format!("{i:05}.pgm"));
        pnm::write_pnm(&lab, &pnm::gray_to_pnm(&s.labels))?;
        written.push(img);
        written.push(lab);
    }
    let meta_path = dir.join("meta.json");
    std::fs::write(
        &meta_path,
        serde_json::to_string_pretty(meta).expect("meta serializes"),
    )?;
    written.push(meta_path);
    Ok(written)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetMeta, Vec<ShapesSample>), PnmError> {
    let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)
        .map_err(|e| PnmError::Header(format!("meta.json: {e}")))?;
    let samples = (0..meta.count)
        .map(|i| {
            let image = pnm::pnm_to_rgb(&pnm::read_pnm(&dir.join(format!("{i:05}.ppm")))?)?;
            let labels = pnm::pnm_to_gray(&pnm::read_pnm(&dir.join(format!("{i:05}.pgm")))?)?;
            Ok(ShapesSample {
                image,
                labels,
                shapes: Vec::new(),
            })
        })
        .collect::<Result<_, PnmError>>()?;
    Ok((meta, samples))
}
