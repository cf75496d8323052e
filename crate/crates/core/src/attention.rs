//! Scale-wise attention and feature re-weighting.
//!
//! A feature map `X` is halved `L` times; each level yields a spatial
//! probability map `ℓⁿ`. The maps are upsampled back to `X` and fused as
//! `Υ = (1/L)·Σₙ (1 + ℓ̃ⁿ) ⊙ X`. The fused features are then re-weighted by a
//! channel gate and a spatial gate whose outputs are summed.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{conv2d, global_avg_pool, he_normal, spatial_softmax, stacked_pool, Conv2dSpec, HALVING_POOL};
use crate::params::{Ctx, ParamStore};
use crate::real::Real;
use crate::tensor::expect_rank4;

/// `levels` successive 2×2 average-pool halvings of `x` (odd extents round
/// up); element `i` has extents halved `i + 1` times.
pub fn multiscale_downsample<T: Real>(tape: &mut Tape<T>, x: Var, levels: usize) -> Result<Vec<Var>> {
    let [_, _, h, w] = expect_rank4(tape.shape(x), "multiscale_downsample")?;
    if levels == 0 {
        return Err(Error::config("multiscale_downsample needs at least one level"));
    }
    if levels >= usize::BITS as usize || h.min(w) < 1 << levels {
        return Err(Error::shape(format!(
            "{h}×{w} cannot be halved {levels} times"
        )));
    }
    let mut out = Vec::with_capacity(levels);
    let mut cur = x;
    for _ in 0..levels {
        cur = tape.avg_pool2d(cur, HALVING_POOL)?;
        out.push(cur);
    }
    Ok(out)
}

fn pointwise(tape: &Tape<impl Real>, w: Var, what: &str) -> Result<Conv2dSpec> {
    let s = tape.shape(w);
    if s.len() != 4 || s[2] != 1 || s[3] != 1 {
        return Err(Error::shape(format!("{what} must be a 1×1 kernel, got {s:?}")));
    }
    Ok(Conv2dSpec::same(s[1], s[0], 1, 1, 1))
}

/// `softmax over positions of (Wⁿ · Xⁿ)`, with `Wⁿ` a 1×C×1×1 projection.
pub fn attention_map<T: Real>(tape: &mut Tape<T>, xn: Var, w: Var) -> Result<Var> {
    let spec = pointwise(tape, w, "attention projection")?;
    if spec.out_channels != 1 {
        return Err(Error::shape(format!(
            "attention projection must produce one channel, got {}",
            spec.out_channels
        )));
    }
    let score = conv2d(tape, xn, &spec, w, None)?;
    spatial_softmax(tape, score)
}

fn upsampled<T: Real>(tape: &mut Tape<T>, x: Var, maps: &[Var]) -> Result<Vec<Var>> {
    let [b, _, h, w] = expect_rank4(tape.shape(x), "attention_fuse")?;
    if maps.is_empty() {
        return Err(Error::shape("attention_fuse needs at least one map"));
    }
    maps.iter()
        .map(|&m| {
            let [mb, mc, _, _] = expect_rank4(tape.shape(m), "attention map")?;
            if mb != b || mc != 1 {
                return Err(Error::shape(format!(
                    "attention map {:?} does not fit features {:?}",
                    tape.shape(m),
                    tape.shape(x)
                )));
            }
            tape.bilinear_resize(m, h, w)
        })
        .collect()
}

/// Residual fusion `(1/L)·Σₙ (1 + ℓ̃ⁿ) ⊙ X` of native-resolution maps.
pub fn attention_fuse<T: Real>(tape: &mut Tape<T>, x: Var, maps: &[Var]) -> Result<Var> {
    let up = upsampled(tape, x, maps)?;
    let mut acc: Option<Var> = None;
    for u in up {
        let gate = tape.offset(u, T::one())?;
        let term = tape.mul(gate, x)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    tape.scale(acc.unwrap(), T::one() / T::from_usize(maps.len()))
}

/// The non-residual part `(1/L)·Σₙ ℓ̃ⁿ ⊙ X`.
pub fn attention_term<T: Real>(tape: &mut Tape<T>, x: Var, maps: &[Var]) -> Result<Var> {
    let up = upsampled(tape, x, maps)?;
    let mut acc: Option<Var> = None;
    for u in up {
        let term = tape.mul(u, x)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    tape.scale(acc.unwrap(), T::one() / T::from_usize(maps.len()))
}

/// `F ⊙ σ(W¹ δ(W² GAP(F)))`, the gate broadcast over positions.
pub fn channel_weight<T: Real>(tape: &mut Tape<T>, f: Var, w1: Var, w2: Var) -> Result<Var> {
    let (s1, s2) = (pointwise(tape, w1, "W1")?, pointwise(tape, w2, "W2")?);
    if s2.out_channels != s1.in_channels || s1.out_channels != s2.in_channels {
        return Err(Error::shape(format!(
            "W1 {:?} and W2 {:?} do not form a bottleneck",
            tape.shape(w1),
            tape.shape(w2)
        )));
    }
    let z = global_avg_pool(tape, f)?;
    let hidden = conv2d(tape, z, &s2, w2, None)?;
    let hidden = tape.relu(hidden)?;
    let zhat = conv2d(tape, hidden, &s1, w1, None)?;
    let r = tape.sigmoid(zhat)?;
    tape.mul(f, r)
}

/// `F ⊙ σ(W³ F)`, the gate broadcast over channels.
pub fn spatial_weight<T: Real>(tape: &mut Tape<T>, f: Var, w3: Var) -> Result<Var> {
    let s3 = pointwise(tape, w3, "W3")?;
    if s3.out_channels != 1 {
        return Err(Error::shape(format!("W3 must map to one channel, got {:?}", tape.shape(w3))));
    }
    let v = conv2d(tape, f, &s3, w3, None)?;
    let t = tape.sigmoid(v)?;
    tape.mul(f, t)
}

/// `channel_weight(F) + spatial_weight(F)`.
pub fn enhance<T: Real>(tape: &mut Tape<T>, f: Var, w1: Var, w2: Var, w3: Var) -> Result<Var> {
    let c = channel_weight(tape, f, w1, w2)?;
    let s = spatial_weight(tape, f, w3)?;
    tape.add(c, s)
}

/// Shape of an attention block placed on `channels`-wide features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PyramidConfig {
    pub channels: usize,
    /// L, number of halvings.
    pub levels: usize,
    /// Channel reduction in the channel gate.
    pub reduction: usize,
    /// Terms of the stacked pool applied to every level.
    pub pool_stages: usize,
}

impl PyramidConfig {
    pub fn new(channels: usize) -> Self {
        PyramidConfig {
            channels,
            levels: 3,
            reduction: 4,
            pool_stages: 1,
        }
    }

    pub fn hidden(&self) -> usize {
        (self.channels / self.reduction).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.levels == 0 || self.reduction == 0 || self.pool_stages == 0 {
            return Err(Error::config(format!("degenerate attention config {self:?}")));
        }
        Ok(())
    }
}

pub fn init_pyramid<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &PyramidConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let (c, h) = (cfg.channels, cfg.hidden());
    for n in 1..=cfg.levels {
        store.insert_norm(&format!("{prefix}.level{n}.bn"), c)?;
        store.insert(format!("{prefix}.level{n}.proj"), he_normal(&[1, c, 1, 1], c, rng))?;
    }
    store.insert(format!("{prefix}.w2"), he_normal(&[h, c, 1, 1], c, rng))?;
    store.insert(format!("{prefix}.w1"), he_normal(&[c, h, 1, 1], h, rng))?;
    store.insert(format!("{prefix}.w3"), he_normal(&[1, c, 1, 1], c, rng))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PyramidTrace {
    /// Attention maps at each level's own resolution.
    pub maps: Vec<Var>,
    pub fused: Var,
    pub out: Var,
}

/// Per level: stacked pool, batch norm, 1×1 projection, ReLU, spatial
/// softmax. The maps are fused with `x` and the result enhanced.
pub fn pyramid_forward<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, cfg: &PyramidConfig, prefix: &str) -> Result<PyramidTrace> {
    cfg.validate()?;
    let levels = multiscale_downsample(ctx.tape, x, cfg.levels)?;
    let mut maps = Vec::with_capacity(cfg.levels);
    for (i, xn) in levels.into_iter().enumerate() {
        let n = i + 1;
        let pooled = stacked_pool(ctx.tape, xn, cfg.pool_stages)?;
        let normed = ctx.batch_norm(pooled, &format!("{prefix}.level{n}.bn"))?;
        let w = ctx.param(&format!("{prefix}.level{n}.proj"))?;
        let spec = pointwise(ctx.tape, w, "attention projection")?;
        let score = conv2d(ctx.tape, normed, &spec, w, None)?;
        let score = ctx.tape.relu(score)?;
        maps.push(spatial_softmax(ctx.tape, score)?);
    }
    let fused = attention_fuse(ctx.tape, x, &maps)?;
    let w1 = ctx.param(&format!("{prefix}.w1"))?;
    let w2 = ctx.param(&format!("{prefix}.w2"))?;
    let w3 = ctx.param(&format!("{prefix}.w3"))?;
    let out = enhance(ctx.tape, fused, w1, w2, w3)?;
    Ok(PyramidTrace { maps, fused, out })
}

#[cfg(test)]
mod tests;
