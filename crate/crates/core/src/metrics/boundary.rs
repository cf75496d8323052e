//! Boundary displacement via an exact Euclidean distance transform.

use super::{check_extents, Grid};
use crate::error::{Error, Result};

/// Mask pixels with a 4-neighbour of the opposite value (inner boundary).
pub fn boundary(mask: &Grid<bool>) -> Grid<bool> {
    let (h, w) = (mask.height(), mask.width());
    Grid::from_fn(h, w, |y, x| {
        let v = mask.get(y, x);
        v && ((y > 0 && !mask.get(y - 1, x))
            || (y + 1 < h && !mask.get(y + 1, x))
            || (x > 0 && !mask.get(y, x - 1))
            || (x + 1 < w && !mask.get(y, x + 1)))
    })
}

/// One-dimensional squared-distance transform by lower envelope of parabolas.
fn envelope(f: &[i64], out: &mut [i64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let key = |q: usize| (f[q] + (q * q) as i64) as f64;
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = (key(q) - key(v[k])) / (2.0 * (q - v[k]) as f64);
        // z[0] = −∞ stops the walk at the first parabola
        while s <= z[k] {
            k -= 1;
            s = (key(q) - key(v[k])) / (2.0 * (q - v[k]) as f64);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as i64 - v[k] as i64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel.
fn squared_distance_transform(sites: &Grid<bool>) -> Vec<i64> {
    let (h, w) = (sites.height(), sites.width());
    let far = ((h + w) * (h + w)) as i64 * 4 + 1;
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0f64; n + 1]);
    let mut d: Vec<i64> = sites.data().iter().map(|&s| if s { 0 } else { far }).collect();
    let (mut col, mut tmp) = (vec![0i64; h], vec![0i64; h]);
    for x in 0..w {
        for y in 0..h {
            col[y] = d[y * w + x];
        }
        envelope(&col, &mut tmp, &mut v, &mut z);
        for y in 0..h {
            d[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0i64; w];
    for y in 0..h {
        envelope(&d[y * w..(y + 1) * w], &mut row, &mut v, &mut z);
        d[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    d
}

fn mean_distance(from: &Grid<bool>, to: &Grid<bool>) -> f64 {
    let dt = squared_distance_transform(to);
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, &b) in from.data().iter().enumerate() {
        if b {
            sum += (dt[i] as f64).sqrt();
            count += 1;
        }
    }
    sum / count as f64
}

/// Symmetric mean nearest-boundary distance. Fails with a domain error if
/// either mask has no boundary pixel.
pub fn bde(a: &Grid<bool>, b: &Grid<bool>) -> Result<f64> {
    check_extents(a, b)?;
    let (ba, bb) = (boundary(a), boundary(b));
    for (which, g) in [("first", &ba), ("second", &bb)] {
        if !g.data().iter().any(|&v| v) {
            return Err(Error::Domain(format!("{which} mask has no boundary")));
        }
    }
    Ok(0.5 * (mean_distance(&ba, &bb) + mean_distance(&bb, &ba)))
}
