//! Synthetic single-object images and translating-object sequences with
//! exact ground-truth boxes.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::BoundingBox;
use crate::imageio;
use crate::rng::{derive_seed, rng_for, streams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Disk,
    Cross,
    Triangle,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Square,
        ShapeKind::Disk,
        ShapeKind::Cross,
        ShapeKind::Triangle,
        ShapeKind::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Disk => "disk",
            ShapeKind::Cross => "cross",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
        }
    }

    /// Fill color, distinct per kind.
    pub fn color(self) -> [f64; 3] {
        match self {
            ShapeKind::Square => [1.0, 0.25, 0.25],
            ShapeKind::Disk => [0.25, 1.0, 0.25],
            ShapeKind::Cross => [0.3, 0.45, 1.0],
            ShapeKind::Triangle => [1.0, 1.0, 0.25],
            ShapeKind::Ring => [1.0, 0.3, 1.0],
        }
    }

    /// Whether local coordinates `(u, v)` in the unit square are inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return false;
        }
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            ShapeKind::Square => true,
            ShapeKind::Disk => r2 <= 0.25,
            ShapeKind::Cross => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
            ShapeKind::Triangle => du.abs() <= v / 2.0,
            ShapeKind::Ring => (0.275 * 0.275..=0.25).contains(&r2),
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shape {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesConfig {
    pub height: usize,
    pub width: usize,
    /// Class `i` is drawn as `classes[i]`.
    pub classes: Vec<ShapeKind>,
    /// Background amplitude: each background value is `U[0, noise_sigma]`.
    pub noise_sigma: f64,
    /// Shape extent as a fraction of `min(height, width)`.
    pub scale_range: (f64, f64),
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            height: 32,
            width: 32,
            classes: ShapeKind::ALL[..4].to_vec(),
            noise_sigma: 0.1,
            scale_range: (0.2, 0.6),
        }
    }
}

impl ShapesConfig {
    pub fn with_size(height: usize, width: usize) -> Self {
        ShapesConfig {
            height,
            width,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::invalid(format!(
                "images must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::invalid("at least one shape class is required"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                return Err(Error::invalid(format!("shape {c} listed twice")));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_sigma) {
            return Err(Error::invalid(format!("noise_sigma must lie in [0, 1], got {}", self.noise_sigma)));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!("invalid scale range ({lo}, {hi})")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[height, width, 3]`, values in `[0, 1]`.
    pub image: Tensor,
    pub class: usize,
    pub shape: ShapeKind,
    pub bbox: BoundingBox,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    /// `[frames, height, width, 3]`.
    pub frames: Tensor,
    pub class: usize,
    pub shape: ShapeKind,
    pub boxes: Vec<BoundingBox>,
    pub seed: u64,
}

/// Balanced labels: classes are dealt in blocks, each block a fresh permutation.
fn balanced_labels(n: usize, n_classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(seed, streams::DATA);
    let mut labels = Vec::with_capacity(n);
    while labels.len() < n {
        let mut block: Vec<usize> = (0..n_classes).collect();
        block.shuffle(&mut rng);
        labels.extend(block);
    }
    labels.truncate(n);
    labels
}

/// Rasterizes a shape with extent `size` at top-left `(y0, x0)` into a mask.
fn rasterize(kind: ShapeKind, size: f64, y0: f64, x0: f64, h: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let u = (c as f64 + 0.5 - x0) / size;
            let v = (r as f64 + 0.5 - y0) / size;
            mask[r * w + c] = kind.contains(u, v);
        }
    }
    mask
}

fn tight_box(mask: &[bool], w: usize) -> Option<BoundingBox> {
    let on: Vec<(usize, usize)> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| (i / w, i % w))
        .collect();
    let y_min = on.iter().map(|p| p.0).min()?;
    let y_max = on.iter().map(|p| p.0).max()? + 1;
    let x_min = on.iter().map(|p| p.1).min()?;
    let x_max = on.iter().map(|p| p.1).max()? + 1;
    BoundingBox::new(x_min, y_min, x_max, y_max).ok()
}

fn paint(mask: &[bool], color: [f64; 3], noise: f64, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 3);
    for &m in mask {
        for &ch in &color {
            let bg = if noise > 0.0 { rng.random_range(0.0..=noise) } else { 0.0 };
            data.push(if m { ch } else { bg });
        }
    }
    Tensor::from_parts(vec![h, w, 3], data)
}

struct Placement {
    size: f64,
    y0: f64,
    x0: f64,
    vy: i64,
    vx: i64,
}

/// Draws extent, velocity (only for multi-frame paths) and a start position
/// from which every frame of the path stays inside the image.
fn place(cfg: &ShapesConfig, frames: usize, max_speed: i64, rng: &mut ChaCha8Rng) -> Placement {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let min_side = h.min(w);
    loop {
        let size = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1) * min_side;
        let (vy, vx) = if frames > 1 && max_speed > 0 {
            (rng.random_range(-max_speed..=max_speed), rng.random_range(-max_speed..=max_speed))
        } else {
            (0, 0)
        };
        let span = (frames as i64 - 1) as f64;
        let (dy, dx) = (vy as f64 * span, vx as f64 * span);
        let (y_lo, y_hi) = (0f64.max(-dy), h - size - 0f64.max(dy));
        let (x_lo, x_hi) = (0f64.max(-dx), w - size - 0f64.max(dx));
        if y_lo > y_hi || x_lo > x_hi {
            continue;
        }
        let y0 = rng.random_range(y_lo..=y_hi);
        let x0 = rng.random_range(x_lo..=x_hi);
        return Placement { size, y0, x0, vy, vx };
    }
}

fn render_path(
    cfg: &ShapesConfig,
    kind: ShapeKind,
    frames: usize,
    max_speed: i64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Tensor>, Vec<BoundingBox>) {
    let (h, w) = (cfg.height, cfg.width);
    loop {
        let p = place(cfg, frames, max_speed, rng);
        let masks: Vec<Vec<bool>> = (0..frames)
            .map(|t| {
                let y0 = p.y0 + (p.vy * t as i64) as f64;
                let x0 = p.x0 + (p.vx * t as i64) as f64;
                rasterize(kind, p.size, y0, x0, h, w)
            })
            .collect();
        let boxes: Option<Vec<BoundingBox>> = masks.iter().map(|m| tight_box(m, w)).collect();
        // A sliver that covers no pixel center is redrawn.
        let Some(boxes) = boxes else { continue };
        let images = masks
            .iter()
            .map(|m| paint(m, kind.color(), cfg.noise_sigma, h, w, rng))
            .collect();
        return (images, boxes);
    }
}

/// `n` single-object images with balanced classes. Sample `i` depends only on
/// `(seed, i)`.
pub fn generate_shapes(n: usize, cfg: &ShapesConfig, seed: u64) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let labels = balanced_labels(n, cfg.classes.len(), seed);
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, class)| {
            let sample_seed = derive_seed(seed, i as u64);
            let mut rng = rng_for(sample_seed, streams::DATA);
            let kind = cfg.classes[class];
            let (mut images, boxes) = render_path(cfg, kind, 1, 0, &mut rng);
            SyntheticSample {
                image: images.remove(0),
                class,
                shape: kind,
                bbox: boxes[0],
                seed: sample_seed,
            }
        })
        .collect())
}

/// `n_events` sequences of `frames` frames: one shape translating along a
/// straight line with integer per-frame velocity in `[-max_speed, max_speed]`
/// on each axis.
pub fn generate_sequence(
    n_events: usize,
    frames: usize,
    cfg: &ShapesConfig,
    max_speed: usize,
    seed: u64,
) -> Result<Vec<SyntheticSequence>> {
    cfg.validate()?;
    if frames == 0 || n_events == 0 {
        return Err(Error::invalid("need at least one event and one frame"));
    }
    let labels = balanced_labels(n_events, cfg.classes.len(), seed);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, class)| {
            let sample_seed = derive_seed(seed, i as u64);
            let mut rng = rng_for(sample_seed, streams::DATA);
            let kind = cfg.classes[class];
            let (images, boxes) = render_path(cfg, kind, frames, max_speed as i64, &mut rng);
            Ok(SyntheticSequence {
                frames: Tensor::stack(&images)?,
                class,
                shape: kind,
                boxes,
                seed: sample_seed,
            })
        })
        .collect()
}

/// Splits samples into model inputs and labels.
pub fn inputs_and_labels(samples: &[SyntheticSample]) -> (Vec<Tensor>, Vec<usize>) {
    samples.iter().map(|s| (s.image.clone(), s.class)).unzip()
}

/// Writes `NNNNN.ppm` per sample and `manifest.csv` into `dir`.
pub fn dump_dataset(dir: impl AsRef<Path>, samples: &[SyntheticSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::io(&manifest, std::io::Error::other(e)))?;
    let to_io = |e: csv::Error| Error::io(&manifest, std::io::Error::other(e));
    w.write_record(["id", "class", "x_min", "y_min", "x_max", "y_max", "seed"])
        .map_err(to_io)?;
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{i:05}");
        let path = dir.join(format!("{id}.ppm"));
        fs::write(&path, imageio::encode_ppm(&s.image)?).map_err(|e| Error::io(&path, e))?;
        let b = s.bbox;
        w.write_record([
            id,
            s.class.to_string(),
            b.x_min.to_string(),
            b.y_min.to_string(),
            b.x_max.to_string(),
            b.y_max.to_string(),
            s.seed.to_string(),
        ])
        .map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))
}
