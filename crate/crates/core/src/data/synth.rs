//! Dermoscopy-like synthetic samples: a smooth skin-tone background, one to
//! three irregular dark lesions, optional hair strokes.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::SegSample;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

pub const NOISE_SIGMA: f64 = 0.02;
/// Accepted range of the lesion pixel fraction.
pub const MASK_FRACTION: (f64, f64) = (0.02, 0.5);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Easy,
    LowContrast,
    MultiLesion,
    Hairy,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [
        Difficulty::Easy,
        Difficulty::LowContrast,
        Difficulty::MultiLesion,
        Difficulty::Hairy,
    ];

    /// Range of the lesion darkening Δ.
    pub fn contrast(self) -> (f64, f64) {
        match self {
            Difficulty::Easy => (0.4, 0.45),
            Difficulty::LowContrast => (0.05, 0.1),
            Difficulty::MultiLesion | Difficulty::Hairy => (0.25, 0.4),
        }
    }

    fn lesions(self, rng: &mut impl Rng) -> usize {
        match self {
            Difficulty::MultiLesion => rng.random_range(2..=3),
            _ => 1,
        }
    }

    /// Width of the blended rim, as a fraction of the lesion radius.
    fn rim(self) -> f64 {
        match self {
            Difficulty::LowContrast => 0.2,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::LowContrast => "low-contrast",
            Difficulty::MultiLesion => "multi-lesion",
            Difficulty::Hairy => "hairy",
        })
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Difficulty::ALL
            .into_iter()
            .find(|d| d.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown difficulty {s:?}")))
    }
}

/// Ellipse with a radial perturbation `1 + Σ a_k cos(kθ + φ_k)`.
struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Blob {
    fn random(rng: &mut impl Rng, extent: f64, radius: (f64, f64)) -> Self {
        let r = |rng: &mut dyn rand::RngCore| rng.random_range(radius.0..radius.1) * extent;
        let (ry, rx) = (r(rng), r(rng));
        let margin = ry.max(rx) * 0.6;
        Blob {
            cy: rng.random_range(margin..extent - margin),
            cx: rng.random_range(margin..extent - margin),
            ry,
            rx,
            angle: rng.random_range(0.0..PI),
            harmonics: (2..=4)
                .map(|k| (k as f64, rng.random_range(0.0..0.08), rng.random_range(0.0..2.0 * PI)))
                .collect(),
        }
    }

    /// `radius(θ) − ρ` in normalized units; positive inside.
    fn depth(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = ((dx * c + dy * s) / self.rx, (-dx * s + dy * c) / self.ry);
        let rho = u.hypot(v);
        let theta = v.atan2(u);
        let radius = 1.0 + self.harmonics.iter().map(|&(k, a, p)| a * (k * theta + p).cos()).sum::<f64>();
        radius - rho
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    };
    (p.0 - a.0 - t * dy).hypot(p.1 - a.1 - t * dx)
}

fn lesion_layout(rng: &mut impl Rng, difficulty: Difficulty, e: usize) -> (Vec<Blob>, Vec<f64>, Vec<bool>) {
    let ef = e as f64;
    let n = e * e;
    loop {
        let count = difficulty.lesions(rng);
        let radius = if count > 1 { (0.08, 0.18) } else { (0.12, 0.3) };
        let blobs: Vec<Blob> = (0..count).map(|_| Blob::random(rng, ef, radius)).collect();
        let mut depth = vec![f64::NEG_INFINITY; n];
        for (i, d) in depth.iter_mut().enumerate() {
            let (y, x) = ((i / e) as f64 + 0.5, (i % e) as f64 + 0.5);
            *d = blobs.iter().map(|b| b.depth(y, x)).fold(f64::NEG_INFINITY, f64::max);
        }
        let mask: Vec<bool> = depth.iter().map(|&d| d >= 0.0).collect();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / n as f64;
        if (MASK_FRACTION.0..=MASK_FRACTION.1).contains(&frac) {
            return (blobs, depth, mask);
        }
    }
}

fn sample(seed: u64, index: u32, extent: usize, difficulty: Difficulty) -> SegSample {
    let mut rng = stream(seed, Purpose::Data, index);
    let e = extent;
    let ef = e as f64;
    let n = e * e;
    let (blobs, depth, mask) = lesion_layout(&mut rng, difficulty, e);

    // skin tone plus a planar tilt and one slow ripple, ±0.04 in total
    let tone = [rng.random_range(0.75..0.9), rng.random_range(0.6..0.72), rng.random_range(0.55..0.65)];
    let (ty, tx) = (rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
    let (fy, fx, phase) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(0.0..2.0 * PI));
    let ripple = rng.random_range(0.0..0.02);
    let (lo, hi) = difficulty.contrast();
    let delta = rng.random_range(lo..=hi);
    let hue = [1.0, 1.1, 1.05];
    let rim = difficulty.rim();

    let mut img = vec![0.0; 3 * n];
    for i in 0..n {
        let (y, x) = ((i / e) as f64 / ef, (i % e) as f64 / ef);
        let shade = ty * (2.0 * y - 1.0)
            + tx * (2.0 * x - 1.0)
            + ripple * (2.0 * PI * (fy * y + fx * x) + phase).sin();
        let blend = if !mask[i] {
            0.0
        } else if rim > 0.0 {
            (depth[i] / rim).min(1.0).max(0.5)
        } else {
            1.0
        };
        for c in 0..3 {
            img[c * n + i] = tone[c] + shade - blend * delta * hue[c];
        }
    }

    if difficulty == Difficulty::Hairy {
        let strokes = rng.random_range(5..=15);
        for _ in 0..strokes {
            let b = &blobs[rng.random_range(0..blobs.len())];
            let through = (b.cy + rng.random_range(-0.3..0.3) * b.ry, b.cx + rng.random_range(-0.3..0.3) * b.rx);
            let ends = [
                (rng.random_range(0.0..ef), rng.random_range(0.0..ef)),
                through,
                (rng.random_range(0.0..ef), rng.random_range(0.0..ef)),
            ];
            let half = if rng.random_bool(0.5) { 0.5 } else { 1.0 };
            let dark = rng.random_range(0.08..0.2);
            for i in 0..n {
                let p = ((i / e) as f64 + 0.5, (i % e) as f64 + 0.5);
                if ends.windows(2).any(|s| segment_distance(p, s[0], s[1]) <= half) {
                    for c in 0..3 {
                        img[c * n + i] = dark;
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    for v in img.iter_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }

    SegSample {
        image: Tensor::new(vec![3, e, e], img).expect("sized above"),
        mask: Tensor::new(vec![1, e, e], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()).expect("sized above"),
        meta: format!("synth:{difficulty}:seed={seed}:index={index}"),
        difficulty: Some(difficulty),
    }
}

/// `count` samples of side `extent` (≥ 32, divisible by 8). Sample `i` only
/// depends on `(seed, i, extent, difficulty)`.
pub fn synth_generate(count: usize, extent: usize, seed: u64, difficulty: Difficulty) -> Result<Vec<SegSample>> {
    if extent < 32 || extent % 8 != 0 {
        return Err(Error::config(format!("extent {extent} must be ≥ 32 and divisible by 8")));
    }
    let count = u32::try_from(count).map_err(|_| Error::config("sample count too large"))?;
    Ok((0..count).map(|i| sample(seed, i, extent, difficulty)).collect())
}
