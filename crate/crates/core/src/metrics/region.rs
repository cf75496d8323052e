//! Partition comparisons from the joint label histogram.

use std::collections::BTreeMap;

use super::{check_extents, Grid};
use crate::error::Result;

/// Joint label histogram of two label maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Contingency {
    /// `n_ij` keyed by (label in a, label in b).
    pub joint: BTreeMap<(u32, u32), u64>,
    pub rows: BTreeMap<u32, u64>,
    pub cols: BTreeMap<u32, u64>,
    pub n: u64,
}

pub fn contingency(a: &Grid<u32>, b: &Grid<u32>) -> Result<Contingency> {
    check_extents(a, b)?;
    let mut t = Contingency {
        joint: BTreeMap::new(),
        rows: BTreeMap::new(),
        cols: BTreeMap::new(),
        n: a.len() as u64,
    };
    for (&x, &y) in a.data().iter().zip(b.data()) {
        *t.joint.entry((x, y)).or_default() += 1;
        *t.rows.entry(x).or_default() += 1;
        *t.cols.entry(y).or_default() += 1;
    }
    Ok(t)
}

fn pairs(k: u64) -> u64 {
    k * k.saturating_sub(1) / 2
}

/// Fraction of unordered pixel pairs grouped alike by both maps. A map with
/// fewer than two pixels scores 1.
pub fn pri(a: &Grid<u32>, b: &Grid<u32>) -> Result<f64> {
    let t = contingency(a, b)?;
    let total = pairs(t.n);
    if total == 0 {
        return Ok(1.0);
    }
    let both: u64 = t.joint.values().map(|&k| pairs(k)).sum();
    let in_a: u64 = t.rows.values().map(|&k| pairs(k)).sum();
    let in_b: u64 = t.cols.values().map(|&k| pairs(k)).sum();
    let disagree = in_a + in_b - 2 * both;
    Ok((total - disagree) as f64 / total as f64)
}

/// `H(a) + H(b) − 2·I(a;b)` in nats.
pub fn voi(a: &Grid<u32>, b: &Grid<u32>) -> Result<f64> {
    let t = contingency(a, b)?;
    if t.n == 0 {
        return Ok(0.0);
    }
    let n = t.n as f64;
    // −Σ p_ij [ln(p_ij/p_i) + ln(p_ij/p_j)]
    let v: f64 = t
        .joint
        .iter()
        .map(|(&(i, j), &k)| {
            let k = k as f64;
            let (ri, cj) = (t.rows[&i] as f64, t.cols[&j] as f64);
            -(k / n) * ((k / ri).ln() + (k / cj).ln())
        })
        .sum();
    Ok(v.max(0.0))
}

/// `(1/n)·min(Σₓ E(a,b,x), Σₓ E(b,a,x))` with
/// `E(a,b,x) = |R(a,x) \ R(b,x)| / |R(a,x)|`.
pub fn gce(a: &Grid<u32>, b: &Grid<u32>) -> Result<f64> {
    let t = contingency(a, b)?;
    if t.n == 0 {
        return Ok(0.0);
    }
    // pixels in cell (i,j) all share E(a,b,x) = (r_i − n_ij)/r_i
    let (mut ab, mut ba) = (0.0, 0.0);
    for (&(i, j), &k) in &t.joint {
        let (k, ri, cj) = (k as f64, t.rows[&i] as f64, t.cols[&j] as f64);
        ab += k * (ri - k) / ri;
        ba += k * (cj - k) / cj;
    }
    Ok(ab.min(ba) / t.n as f64)
}
