//! Saliency and segmentation metrics.
//!
//! Pixel metrics (F-measure, MAE, PR curve, IoU) compare a real-valued map
//! `S ∈ [0,1]` with a binary truth `G`. Region metrics (PRI, VOI, GCE) and the
//! boundary metric (BDE) compare two label maps; a saliency pair is turned
//! into the two-segment partitions {lesion, background} by thresholding `S`
//! at 0.5.

mod boundary;
pub mod brute;
mod region;
mod report;

pub use boundary::{bde, boundary};
pub use region::{contingency, gce, pri, voi, Contingency};
pub use report::{aggregate, write_pr_csv, write_report, MetricsReport};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_BETA_SQ: f64 = 0.3;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Row-major 2-D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<L> {
    height: usize,
    width: usize,
    data: Vec<L>,
}

impl<L: Copy> Grid<L> {
    pub fn new(height: usize, width: usize, data: Vec<L>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{height}×{width} grid needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Grid { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> L) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Grid { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[L] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> L {
        self.data[y * self.width + x]
    }

    pub fn map<M: Copy>(&self, f: impl Fn(L) -> M) -> Grid<M> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_extent<M>(&self, other: &Grid<M>) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Single plane of a tensor shaped `[h,w]`, `[1,h,w]` or `[1,1,h,w]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, f: impl Fn(T) -> L) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [h, w] => (*h, *w),
            [1, h, w] | [1, 1, h, w] => (*h, *w),
            _ => return Err(Error::shape(format!("expected a single plane, got {s:?}"))),
        };
        Ok(Grid {
            height: h,
            width: w,
            data: t.data().iter().map(|&v| f(v)).collect(),
        })
    }
}

pub(crate) fn check_extents<A: Copy, B: Copy>(a: &Grid<A>, b: &Grid<B>) -> Result<()> {
    if !a.same_extent(b) {
        return Err(Error::shape(format!(
            "extent mismatch: {}×{} vs {}×{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Predicted map `S ∈ [0,1]` with binary truth `G` of the same extent.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    s: Grid<f64>,
    g: Grid<bool>,
}

impl MaskPair {
    pub fn new(s: Grid<f64>, g: Grid<bool>) -> Result<Self> {
        check_extents(&s, &g)?;
        if let Some(v) = s.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("saliency value {v} outside [0,1]")));
        }
        Ok(MaskPair { s, g })
    }

    /// From tensors; `g` must hold only 0 and 1.
    pub fn from_tensors<T: Real>(s: &Tensor<T>, g: &Tensor<T>) -> Result<Self> {
        if let Some(v) = g.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
            return Err(Error::Domain(format!("ground truth value {} is not binary", v.as_f64())));
        }
        Self::new(Grid::from_tensor(s, |v| v.as_f64())?, Grid::from_tensor(g, |v| v == T::one())?)
    }

    pub fn saliency(&self) -> &Grid<f64> {
        &self.s
    }

    pub fn truth(&self) -> &Grid<bool> {
        &self.g
    }

    pub fn binarize(&self, threshold: f64) -> Grid<bool> {
        self.s.map(|v| v >= threshold)
    }

    /// {lesion, background} labels of the thresholded prediction and of the truth.
    pub fn segments(&self) -> (Grid<u32>, Grid<u32>) {
        (self.binarize(DEFAULT_THRESHOLD).map(u32::from), self.g.map(u32::from))
    }
}

/// True-positive, false-positive and false-negative counts of `pred` against `truth`.
pub fn confusion(pred: &Grid<bool>, truth: &Grid<bool>) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.data.iter().zip(&truth.data) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    (tp, fp, fn_)
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Domain(format!("threshold {threshold} outside (0,1)")));
    }
    Ok(())
}

/// `(1+β²)PR / (β²P + R)` after binarizing at `threshold` (`S ≥ t` is
/// positive). Empty prediction and empty truth score 1; exactly one of them
/// empty scores 0.
pub fn f_measure(pair: &MaskPair, threshold: f64, beta_sq: f64) -> Result<f64> {
    check_threshold(threshold)?;
    if !(beta_sq > 0.0) {
        return Err(Error::Domain(format!("β² must be positive, got {beta_sq}")));
    }
    let (tp, fp, fn_) = confusion(&pair.binarize(threshold), &pair.g);
    let (predicted, actual) = (tp + fp, tp + fn_);
    if predicted == 0 && actual == 0 {
        return Ok(1.0);
    }
    if predicted == 0 || actual == 0 || tp == 0 {
        return Ok(0.0);
    }
    let p = tp as f64 / predicted as f64;
    let r = tp as f64 / actual as f64;
    Ok((1.0 + beta_sq) * p * r / (beta_sq * p + r))
}

/// Mean of `|S − G|`.
pub fn mae(pair: &MaskPair) -> f64 {
    let n = pair.s.len().max(1) as f64;
    pair.s
        .data
        .iter()
        .zip(&pair.g.data)
        .map(|(&s, &g)| (s - f64::from(u8::from(g))).abs())
        .sum::<f64>()
        / n
}

/// Intersection over union of the binarized prediction; two empty masks give 1.
pub fn iou(pair: &MaskPair, threshold: f64) -> Result<f64> {
    check_threshold(threshold)?;
    let (tp, fp, fn_) = confusion(&pair.binarize(threshold), &pair.g);
    let union = tp + fp + fn_;
    Ok(if union == 0 { 1.0 } else { tp as f64 / union as f64 })
}

/// `(precision, recall)` at each threshold. With nothing predicted precision
/// is 1; with an empty truth recall is 1.
pub fn pr_curve(pair: &MaskPair, thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    for &t in thresholds {
        check_threshold(t)?;
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("thresholds must be strictly increasing".into()));
    }
    // sort once, then sweep thresholds upward removing pixels below each
    let mut order: Vec<(f64, bool)> = pair.s.data.iter().copied().zip(pair.g.data.iter().copied()).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let actual = pair.g.data.iter().filter(|&&g| g).count();
    let (mut tp, mut fp) = (actual, pair.s.len() - actual);
    let mut next = 0;
    let mut out = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        while next < order.len() && order[next].0 < t {
            if order[next].1 {
                tp -= 1;
            } else {
                fp -= 1;
            }
            next += 1;
        }
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if actual == 0 { 1.0 } else { tp as f64 / actual as f64 };
        out.push((precision, recall));
    }
    Ok(out)
}

/// `count` evenly spaced thresholds `i/(count+1)`, `i = 1..=count`.
pub fn uniform_thresholds(count: usize) -> Vec<f64> {
    (1..=count).map(|i| i as f64 / (count + 1) as f64).collect()
}

/// Every metric of one pair. BDE is `None` when either mask has no boundary.
pub fn evaluate(pair: &MaskPair, threshold: f64, beta_sq: f64) -> Result<MetricsReport> {
    let (a, b) = pair.segments();
    let pred = pair.binarize(DEFAULT_THRESHOLD);
    let bde = match bde(&pred, &pair.g) {
        Ok(v) => Some(v),
        Err(Error::Domain(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        f_score: f_measure(pair, threshold, beta_sq)?,
        mae: mae(pair),
        pri: pri(&a, &b)?,
        voi: voi(&a, &b)?,
        gce: gce(&a, &b)?,
        bde,
    })
}
