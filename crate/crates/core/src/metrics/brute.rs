//! Reference implementations straight from the definitions: all pixel pairs,
//! explicit segment sets, all-pairs boundary distances. Quadratic or worse;
//! meant for maps up to a few hundred pixels.

use super::{boundary, check_extents, Grid, MaskPair};
use crate::error::{Error, Result};

/// Agreement over every unordered pixel pair.
pub fn pri(a: &Grid<u32>, b: &Grid<u32>) -> Result<f64> {
    check_extents(a, b)?;
    let (a, b) = (a.data(), b.data());
    let (mut agree, mut total) = (0u64, 0u64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { agree as f64 / total as f64 })
}

fn labels(a: &[u32]) -> Vec<u32> {
    let mut l = a.to_vec();
    l.sort_unstable();
    l.dedup();
    l
}

fn entropy(a: &[u32]) -> f64 {
    let n = a.len() as f64;
    labels(a)
        .into_iter()
        .map(|l| {
            let p = a.iter().filter(|&&v| v == l).count() as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Entropies and mutual information from per-label pixel scans.
pub fn voi(a: &Grid<u32>, b: &Grid<u32>) -> Result<f64> {
    check_extents(a, b)?;
    let (a, b) = (a.data(), b.data());
    if a.is_empty() {
        return Ok(0.0);
    }
    let n = a.len() as f64;
    let mut mutual = 0.0;
    for &i in &labels(a) {
        for &j in &labels(b) {
            let joint = (0..a.len()).filter(|&x| a[x] == i && b[x] == j).count() as f64 / n;
            if joint > 0.0 {
                let pi = a.iter().filter(|&&v| v == i).count() as f64 / n;
                let pj = b.iter().filter(|&&v| v == j).count() as f64 / n;
                mutual += joint * (joint / (pi * pj)).ln();
            }
        }
    }
    Ok(entropy(a) + entropy(b) - 2.0 * mutual)
}

/// Per-pixel refinement errors from explicit region sets.
pub fn gce(a: &Grid<u32>, b: &Grid<u32>) -> Result<f64> {
    check_extents(a, b)?;
    let (a, b) = (a.data(), b.data());
    if a.is_empty() {
        return Ok(0.0);
    }
    let region = |m: &[u32], x: usize| -> Vec<usize> { (0..m.len()).filter(|&y| m[y] == m[x]).collect() };
    let local = |r1: &[usize], r2: &[usize]| r1.iter().filter(|p| !r2.contains(p)).count() as f64 / r1.len() as f64;
    let (mut ab, mut ba) = (0.0, 0.0);
    for x in 0..a.len() {
        let (ra, rb) = (region(a, x), region(b, x));
        ab += local(&ra, &rb);
        ba += local(&rb, &ra);
    }
    Ok(ab.min(ba) / a.len() as f64)
}

fn points(g: &Grid<bool>) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for y in 0..g.height() {
        for x in 0..g.width() {
            if g.get(y, x) {
                out.push((y as f64, x as f64));
            }
        }
    }
    out
}

fn mean_nearest(from: &[(f64, f64)], to: &[(f64, f64)]) -> f64 {
    from.iter()
        .map(|p| to.iter().map(|q| (p.0 - q.0).hypot(p.1 - q.1)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / from.len() as f64
}

/// All-pairs nearest-boundary distances.
pub fn bde(a: &Grid<bool>, b: &Grid<bool>) -> Result<f64> {
    check_extents(a, b)?;
    let (pa, pb) = (points(&boundary(a)), points(&boundary(b)));
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::Domain("mask has no boundary".into()));
    }
    Ok(0.5 * (mean_nearest(&pa, &pb) + mean_nearest(&pb, &pa)))
}

/// Precision and recall by binarizing anew at each threshold.
pub fn pr_curve(pair: &MaskPair, thresholds: &[f64]) -> Vec<(f64, f64)> {
    thresholds
        .iter()
        .map(|&t| {
            let pred = pair.binarize(t);
            let (tp, fp, fn_) = super::confusion(&pred, pair.truth());
            let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
            (precision, recall)
        })
        .collect()
}
