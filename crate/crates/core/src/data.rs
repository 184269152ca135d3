//! Seeded synthetic segmentation data and label-preserving augmentation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Ring,
    Rectangle,
    ThinCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Square image extent.
    pub size: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Shape drawn for each foreground class `1..num_classes`.
    pub shapes: Vec<ShapeKind>,
    pub noise_std: f64,
    /// Foreground intensities are spread evenly over this range.
    pub contrast: (f64, f64),
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            size: 64,
            channels: 3,
            num_classes: 4,
            shapes: vec![ShapeKind::Disk, ShapeKind::Ring, ShapeKind::Rectangle],
            noise_std: 0.1,
            contrast: (0.35, 0.95),
            train_count: 400,
            test_count: 64,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Config("synthetic data needs 2..=256 classes".into()));
        }
        if self.shapes.len() != self.num_classes - 1 {
            return Err(Error::Config(format!(
                "{} shapes listed for {} foreground classes",
                self.shapes.len(),
                self.num_classes - 1
            )));
        }
        if self.size < 24 || self.channels == 0 {
            return Err(Error::Config(
                "image extent must be at least 24 with one or more channels".into(),
            ));
        }
        if !(self.noise_std >= 0.0)
            || !(self.contrast.0 > 0.0 && self.contrast.0 <= self.contrast.1)
        {
            return Err(Error::Config(
                "noise must be non-negative and the contrast range positive".into(),
            ));
        }
        Ok(())
    }

    /// Intensity of foreground class `c` (1-based).
    pub fn class_level(&self, c: usize) -> f64 {
        let k = self.num_classes - 1;
        if k == 1 {
            return self.contrast.1;
        }
        let (lo, hi) = self.contrast;
        lo + (hi - lo) * (c - 1) as f64 / (k - 1) as f64
    }

    /// Probability that a given foreground class appears in one image.
    pub fn class_presence(&self) -> f64 {
        let k = (self.num_classes - 1) as i32;
        2f64.powi(k - 1) / (2f64.powi(k) - 1.0)
    }
}

/// Images as `[channels, size, size]` row-major values with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub size: usize,
    pub channels: usize,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<LabelMap>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bit = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    rng.set_stream((index as u64) << 1 | bit);
    rng
}

/// Pixel membership of one drawn shape.
struct Shape {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    t: f64,
}

impl Shape {
    fn random(kind: ShapeKind, size: usize, rng: &mut impl Rng) -> Self {
        let s = size as f64;
        let (a, b, t) = match kind {
            ShapeKind::Disk => (rng.random_range(0.08..0.16) * s, 0.0, 0.0),
            ShapeKind::Ring => {
                let r = rng.random_range(0.12..0.2) * s;
                (r, 0.0, rng.random_range(0.035..0.06) * s)
            }
            ShapeKind::Rectangle => (
                rng.random_range(0.08..0.16) * s,
                rng.random_range(0.08..0.16) * s,
                0.0,
            ),
            ShapeKind::ThinCurve => (
                rng.random_range(0.2..0.35) * s,
                rng.random_range(0.05..0.1) * s,
                1.2,
            ),
        };
        let reach = if kind == ShapeKind::Rectangle {
            a.max(b)
        } else {
            a
        } + 1.0;
        let cy = rng.random_range(reach..s - reach);
        let cx = rng.random_range(reach..s - reach);
        Self {
            kind,
            cy,
            cx,
            a,
            b,
            t,
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        match self.kind {
            ShapeKind::Disk => dy * dy + dx * dx <= self.a * self.a,
            ShapeKind::Ring => {
                let r = (dy * dy + dx * dx).sqrt();
                r <= self.a && r >= self.a - self.t
            }
            ShapeKind::Rectangle => dy.abs() <= self.b && dx.abs() <= self.a,
            ShapeKind::ThinCurve => {
                dx.abs() <= self.a
                    && (dy - self.b * (std::f64::consts::PI * dx / self.a).sin()).abs() <= self.t
            }
        }
    }

    /// Bounding box half-extent used for overlap rejection.
    fn bbox(&self) -> (f64, f64, f64, f64) {
        let (ry, rx) = match self.kind {
            ShapeKind::Rectangle => (self.b, self.a),
            ShapeKind::ThinCurve => (self.b + self.t, self.a),
            _ => (self.a, self.a),
        };
        (self.cy - ry, self.cy + ry, self.cx - rx, self.cx + rx)
    }

    fn overlaps(&self, other: &Shape) -> bool {
        let (a0, a1, a2, a3) = self.bbox();
        let (b0, b1, b2, b3) = other.bbox();
        a0 <= b1 + 1.0 && b0 <= a1 + 1.0 && a2 <= b3 + 1.0 && b2 <= a3 + 1.0
    }
}

/// Generates sample `index` of `split`; independent of every other sample.
pub fn generate_sample(spec: &SynthSpec, split: Split, index: usize) -> (Vec<f32>, LabelMap) {
    let mut rng = sample_rng(spec.seed, split, index);
    let k = spec.num_classes - 1;
    let subset = rng.random_range(1..(1u64 << k));
    let classes: Vec<usize> = (0..k)
        .filter(|i| subset >> i & 1 == 1)
        .map(|i| i + 1)
        .collect();
    let mut placed: Vec<(usize, Shape)> = Vec::new();
    for &c in &classes {
        let kind = spec.shapes[c - 1];
        let mut shape = Shape::random(kind, spec.size, &mut rng);
        for _ in 0..64 {
            if placed.iter().all(|(_, p)| !p.overlaps(&shape)) {
                break;
            }
            shape = Shape::random(kind, spec.size, &mut rng);
        }
        placed.push((c, shape));
    }
    let n = spec.size;
    let mut label = LabelMap::zeros(n, n);
    for (c, shape) in &placed {
        for y in 0..n {
            for x in 0..n {
                if shape.contains(y, x) {
                    label.data[y * n + x] = *c as u8;
                }
            }
        }
    }
    let levels: Vec<f64> = (0..=k)
        .map(|c| if c == 0 { 0.0 } else { spec.class_level(c) })
        .collect();
    let jitter: Vec<f64> = (0..=k).map(|_| rng.random_range(-0.04..0.04)).collect();
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite noise std");
    let mut image = Vec::with_capacity(spec.channels * n * n);
    for _ in 0..spec.channels {
        for &l in &label.data {
            let base = levels[l as usize] + if l == 0 { 0.0 } else { jitter[l as usize] };
            let v = if spec.noise_std > 0.0 {
                base + noise.sample(&mut rng)
            } else {
                base
            };
            image.push(v as f32);
        }
    }
    (image, label)
}

pub fn generate_dataset(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let count = match split {
        Split::Train => spec.train_count,
        Split::Test => spec.test_count,
    };
    let (images, labels) = (0..count).map(|i| generate_sample(spec, split, i)).unzip();
    Ok(Dataset {
        size: spec.size,
        channels: spec.channels,
        images,
        labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    /// Quarter-turn rotations by 90, 180 or 270 degrees.
    pub rotate: bool,
    pub p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: true,
            rotate: true,
            p: 0.5,
        }
    }
}

/// Applies the same spatial transform to a `[c, n, n]` image and its labels.
pub fn augment(
    image: &[f32],
    label: &LabelMap,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (Vec<f32>, LabelMap) {
    let n = label.width;
    let c = image.len() / (n * n);
    let hflip = cfg.hflip && rng.random_bool(cfg.p);
    let vflip = cfg.vflip && rng.random_bool(cfg.p);
    let turns = if cfg.rotate && rng.random_bool(cfg.p) {
        rng.random_range(1..4)
    } else {
        0
    };
    // source coordinate of each destination pixel
    let src = |y: usize, x: usize| -> usize {
        let (mut y, mut x) = (y, x);
        for _ in 0..turns {
            (y, x) = (x, n - 1 - y);
        }
        if vflip {
            y = n - 1 - y;
        }
        if hflip {
            x = n - 1 - x;
        }
        y * n + x
    };
    let map: Vec<usize> = (0..n * n).map(|i| src(i / n, i % n)).collect();
    let mut out = Vec::with_capacity(image.len());
    for ch in 0..c {
        let plane = &image[ch * n * n..(ch + 1) * n * n];
        out.extend(map.iter().map(|&s| plane[s]));
    }
    let data = map.iter().map(|&s| label.data[s]).collect();
    (
        out,
        LabelMap {
            height: n,
            width: n,
            data,
        },
    )
}

/// Deterministic epoch order.
pub fn shuffled_indices(len: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx
}
