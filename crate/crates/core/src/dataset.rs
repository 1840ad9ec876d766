//! Synthetic shapes dataset, partitions and batch sampling.
//!
//! Each image shows one to three non-overlapping filled shapes over a smooth
//! noisy background. Class 1 is a circle, 2 an axis-aligned rectangle, 3 a
//! triangle; classes 4 and up are rotated rectangles, rotated triangles and
//! rotated ellipses, in that cycle.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::IGNORE;
use crate::pnm;
use crate::tensor::Tensor;

pub const MAX_OBJECT_CLASSES: usize = 8;
const PIXEL_NOISE: f64 = 0.02;
/// Minimum mean absolute RGB difference between a fill colour and the
/// background base colour.
const MIN_CONTRAST: f32 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `H·W` class indices, background 0.
    pub label: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub height: usize,
    pub width: usize,
    pub object_classes: usize,
    pub seed: u64,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
}

impl DatasetMeta {
    /// Object classes plus background.
    pub fn num_classes(&self) -> usize {
        self.object_classes + 1
    }
}

/// Samples are stored in id order; ids are `0..train + val`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Generates `train` training and `val` validation images.
    pub fn generate(train: usize, val: usize, height: usize, width: usize, object_classes: usize, seed: u64) -> Result<Self> {
        let samples = gen_shapes(train + val, height, width, object_classes, seed)?;
        Ok(Dataset {
            meta: DatasetMeta {
                height,
                width,
                object_classes,
                seed,
                train_ids: (0..train).collect(),
                val_ids: (train..train + val).collect(),
            },
            samples,
        })
    }

    pub fn sample(&self, id: usize) -> &Sample {
        &self.samples[id]
    }

    /// Writes `images/NNNN.ppm`, `labels/NNNN.pgm` and `meta.json` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["images", "labels"] {
            fs::create_dir_all(dir.join(sub)).map_err(Error::file(dir.join(sub)))?;
        }
        for s in &self.samples {
            pnm::write_ppm(&s.image, dir.join(format!("images/{:04}.ppm", s.id)))?;
            pnm::write_pgm(
                self.meta.width,
                self.meta.height,
                &s.label,
                dir.join(format!("labels/{:04}.pgm", s.id)),
            )?;
        }
        let meta = dir.join("meta.json");
        fs::write(&meta, serde_json::to_string_pretty(&self.meta)?).map_err(Error::file(&meta))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let meta: DatasetMeta = serde_json::from_slice(&fs::read(&meta_path).map_err(Error::file(&meta_path))?)?;
        let count = meta.train_ids.len() + meta.val_ids.len();
        let mut samples = Vec::with_capacity(count);
        for id in 0..count {
            let image = pnm::read_ppm(dir.join(format!("images/{id:04}.ppm")))?;
            let (w, h, label) = pnm::read_pgm(dir.join(format!("labels/{id:04}.pgm")))?;
            if image.shape() != [3, meta.height, meta.width] || (w, h) != (meta.width, meta.height) {
                return Err(Error::Config(format!("sample {id} does not match the size in meta.json")));
            }
            if let Some(&bad) = label.iter().find(|&&l| l != IGNORE && l as usize > meta.object_classes) {
                return Err(Error::Label {
                    value: bad,
                    pixel: 0,
                    classes: meta.num_classes(),
                });
            }
            samples.push(Sample { id, image, label });
        }
        Ok(Dataset { meta, samples })
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generates `count` samples with ids `0..count`. Image `i` depends only on
/// `splitmix64(seed ^ i)`.
pub fn gen_shapes(count: usize, height: usize, width: usize, object_classes: usize, seed: u64) -> Result<Vec<Sample>> {
    if height < 32 || width < 32 {
        return Err(Error::InvalidArgument(format!("image size {height}x{width} is below 32x32")));
    }
    if !(1..=MAX_OBJECT_CLASSES).contains(&object_classes) {
        return Err(Error::InvalidArgument(format!(
            "object classes must be in 1..={MAX_OBJECT_CLASSES}, got {object_classes}"
        )));
    }
    Ok((0..count)
        .into_par_iter()
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ id as u64));
            let (image, label) = render(&mut rng, height, width, object_classes);
            Sample { id, image, label }
        })
        .collect())
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Ellipse,
    Rect,
    Triangle,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: Kind,
    cx: f64,
    cy: f64,
    /// Half extents in the shape's own frame.
    a: f64,
    b: f64,
    angle: f64,
}

impl Shape {
    fn random(rng: &mut impl Rng, class: usize, h: usize, w: usize) -> Shape {
        let s = h.min(w) as f64 / 64.0;
        let (kind, rotated) = match class {
            1 => (Kind::Ellipse, false),
            2 => (Kind::Rect, false),
            3 => (Kind::Triangle, false),
            k => ([Kind::Rect, Kind::Triangle, Kind::Ellipse][(k - 4) % 3], true),
        };
        let (a, b) = match kind {
            Kind::Ellipse if !rotated => {
                let r = rng.random_range(6.0..12.0) * s;
                (r, r)
            }
            Kind::Ellipse => (rng.random_range(8.0..13.0) * s, rng.random_range(4.0..7.0) * s),
            Kind::Rect => (rng.random_range(5.0..12.0) * s, rng.random_range(5.0..12.0) * s),
            Kind::Triangle => {
                let half = rng.random_range(7.0..14.0) * s;
                (half, half * rng.random_range(0.8..1.2))
            }
        };
        let angle = if rotated { rng.random_range(PI / 12.0..PI / 4.0) } else { 0.0 };
        let reach = a.hypot(b);
        let cx = rng.random_range(reach.min(w as f64 / 2.0)..(w as f64 - reach).max(w as f64 / 2.0 + 1e-9));
        let cy = rng.random_range(reach.min(h as f64 / 2.0)..(h as f64 - reach).max(h as f64 / 2.0 + 1e-9));
        Shape { kind, cx, cy, a, b, angle }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (sin, cos) = self.angle.sin_cos();
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        match self.kind {
            Kind::Ellipse => (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0,
            Kind::Rect => u.abs() <= self.a && v.abs() <= self.b,
            // Apex up at v = -b, base at v = +b spanning u in [-a, a].
            Kind::Triangle => v <= self.b && v >= -self.b && u.abs() <= self.a * (v + self.b) / (2.0 * self.b),
        }
    }
}

fn render(rng: &mut ChaCha8Rng, h: usize, w: usize, object_classes: usize) -> (Tensor, Vec<u8>) {
    let hw = h * w;
    // Smooth background: base colour plus a bilinearly interpolated coarse grid.
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    const GRID: usize = 5;
    let grid: Vec<f32> = (0..3 * GRID * GRID).map(|_| rng.random_range(-0.15..0.15)).collect();
    let mut image = vec![0.0f32; 3 * hw];
    for c in 0..3 {
        for y in 0..h {
            let gy = y as f32 / (h - 1) as f32 * (GRID - 1) as f32;
            let (y0, fy) = ((gy as usize).min(GRID - 2), gy.fract());
            let fy = if gy as usize >= GRID - 1 { 1.0 } else { fy };
            for x in 0..w {
                let gx = x as f32 / (w - 1) as f32 * (GRID - 1) as f32;
                let (x0, fx) = ((gx as usize).min(GRID - 2), gx.fract());
                let fx = if gx as usize >= GRID - 1 { 1.0 } else { fx };
                let g = |yy: usize, xx: usize| grid[(c * GRID + yy) * GRID + xx];
                let v = g(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + g(y0, x0 + 1) * fx * (1.0 - fy)
                    + g(y0 + 1, x0) * (1.0 - fx) * fy
                    + g(y0 + 1, x0 + 1) * fx * fy;
                image[c * hw + y * w + x] = base[c] + v;
            }
        }
    }

    let mut label = vec![0u8; hw];
    let shapes = rng.random_range(1..=3);
    for i in 0..shapes {
        let class = rng.random_range(1..=object_classes);
        let color = loop {
            let c: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let diff: f32 = c.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum::<f32>() / 3.0;
            if diff >= MIN_CONTRAST {
                break c;
            }
        };
        // The first shape always fits; later ones retry and are dropped if
        // they keep overlapping.
        for _ in 0..if i == 0 { usize::MAX } else { 30 } {
            let shape = Shape::random(rng, class, h, w);
            let pixels: Vec<usize> = (0..hw)
                .filter(|&p| shape.contains((p % w) as f64 + 0.5, (p / w) as f64 + 0.5))
                .collect();
            if pixels.is_empty() || pixels.iter().any(|&p| label[p] != 0) {
                continue;
            }
            for p in pixels {
                label[p] = class as u8;
                for c in 0..3 {
                    image[c * hw + p] = color[c];
                }
            }
            break;
        }
    }

    // Pixel noise is part of the background texture; shape fills stay solid.
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    for c in 0..3 {
        for (p, &l) in label.iter().enumerate() {
            let v = &mut image[c * hw + p];
            if l == 0 {
                *v += noise.sample(rng) as f32;
            }
            *v = v.clamp(0.0, 1.0);
        }
    }
    (Tensor::new([3, h, w], image).expect("consistent shape"), label)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub validation: Vec<usize>,
    /// Human-readable fraction, e.g. `1/16`.
    pub ratio: String,
}

fn ratio_tag(fraction: f64) -> String {
    let inv = 1.0 / fraction;
    if (inv - inv.round()).abs() < 1e-9 {
        format!("1/{}", inv.round() as u64)
    } else {
        format!("{fraction}")
    }
}

/// Shuffles the training ids with `seed` and labels the first
/// `ceil(fraction · train)` of them.
pub fn partition(meta: &DatasetMeta, labeled_fraction: f64, seed: u64) -> Result<Partition> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "labeled fraction {labeled_fraction} is outside (0, 1]"
        )));
    }
    let mut ids = meta.train_ids.clone();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ((labeled_fraction * ids.len() as f64) - 1e-9).ceil() as usize;
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "labeled fraction {labeled_fraction} of {} images selects no samples",
            ids.len()
        )));
    }
    let unlabeled = ids.split_off(n);
    Ok(Partition {
        labeled: ids,
        unlabeled,
        validation: meta.val_ids.clone(),
        ratio: ratio_tag(labeled_fraction),
    })
}

/// One draw pool of [`Sampler`].
#[derive(Clone, Debug)]
struct Pool {
    ids: Vec<usize>,
    queue: VecDeque<usize>,
}

impl Pool {
    fn draw(&mut self, b: usize, rng: &mut impl Rng) -> Vec<usize> {
        if self.ids.len() < b {
            return (0..b).map(|_| self.ids[rng.random_range(0..self.ids.len())]).collect();
        }
        if self.queue.len() < b {
            let mut order = self.ids.clone();
            order.shuffle(rng);
            self.queue = order.into();
        }
        self.queue.drain(..b).collect()
    }
}

/// Draws equal-sized labeled and unlabeled batches.
///
/// A pool with at least `b` ids is consumed in shuffled epochs without
/// replacement (a partial tail is discarded when a new epoch starts); smaller
/// pools are sampled uniformly with replacement.
#[derive(Clone, Debug)]
pub struct Sampler {
    labeled: Pool,
    unlabeled: Pool,
}

impl Sampler {
    pub fn new(partition: &Partition) -> Result<Self> {
        if partition.labeled.is_empty() {
            return Err(Error::EmptyPool("labeled"));
        }
        let pool = |ids: &[usize]| Pool {
            ids: ids.to_vec(),
            queue: VecDeque::new(),
        };
        Ok(Sampler {
            labeled: pool(&partition.labeled),
            unlabeled: pool(&partition.unlabeled),
        })
    }

    pub fn labeled(&mut self, b: usize, rng: &mut impl Rng) -> Vec<usize> {
        self.labeled.draw(b, rng)
    }

    pub fn unlabeled(&mut self, b: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.unlabeled.ids.is_empty() {
            return Err(Error::EmptyPool("unlabeled"));
        }
        Ok(self.unlabeled.draw(b, rng))
    }

    /// `b` labeled and `b` unlabeled ids.
    pub fn sample_batch(&mut self, b: usize, rng: &mut impl Rng) -> Result<(Vec<usize>, Vec<usize>)> {
        let l = self.labeled(b, rng);
        Ok((l, self.unlabeled(b, rng)?))
    }
}
