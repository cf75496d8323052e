//! Network building blocks on top of the tape.

mod init;
mod norm;

pub use init::{he_normal, orthogonal_init};
pub use norm::{batch_norm, BatchNormState, Mode};

use crate::autograd::{ReduceKind, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, PoolGeom};
use crate::real::Real;
use crate::tensor::expect_rank4;

/// Geometry and channel counts of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl Conv2dSpec {
    /// Stride-`stride` convolution with "same" padding `r·(n−1)/2`.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize, stride: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation,
            padding: dilation * (kernel - 1) / 2,
            has_bias: false,
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.stride, self.dilation, self.padding)
    }

    /// Side of the dilated kernel footprint, `(n−1)·r + 1`.
    pub fn effective_kernel(&self) -> usize {
        self.geom().effective(self.kernel)
    }

    /// `floor((H + 2·pad − effective)/stride) + 1`, or `None` below 1.
    pub fn out_extent(&self, input: usize) -> Option<usize> {
        self.geom().out_extent(input, self.kernel)
    }

    /// `out × in × n × n`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    /// `in × out × n × n`, the layout used when this spec describes a
    /// transposed convolution.
    pub fn transposed_weight_shape(&self) -> [usize; 4] {
        [self.in_channels, self.out_channels, self.kernel, self.kernel]
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::config(format!("degenerate conv spec {self:?}")));
        }
        Ok(())
    }

    fn check_params<T: Real>(&self, tape: &Tape<T>, w: Var, b: Option<Var>, wshape: [usize; 4]) -> Result<()> {
        self.validate()?;
        if tape.shape(w) != wshape {
            return Err(Error::shape(format!(
                "weight shape {:?}, spec wants {wshape:?}",
                tape.shape(w)
            )));
        }
        match (self.has_bias, b) {
            (true, None) => Err(Error::shape("spec has bias but none given")),
            (false, Some(_)) => Err(Error::shape("bias given for bias-free spec")),
            _ => Ok(()),
        }
    }
}

/// Dilated cross-correlation of a B×M×H×W input.
pub fn conv2d<T: Real>(tape: &mut Tape<T>, x: Var, spec: &Conv2dSpec, w: Var, b: Option<Var>) -> Result<Var> {
    let [_, c, h, wd] = expect_rank4(tape.shape(x), "conv2d")?;
    if c != spec.in_channels {
        return Err(Error::shape(format!(
            "conv2d expects {} input channels, got {c}",
            spec.in_channels
        )));
    }
    spec.check_params(tape, w, b, spec.weight_shape())?;
    if spec.out_extent(h).is_none() || spec.out_extent(wd).is_none() {
        return Err(Error::shape(format!(
            "conv2d output extent < 1 for {h}×{wd} with {spec:?}"
        )));
    }
    tape.conv2d(x, w, b, spec.geom())
}

/// Adjoint of [`conv2d`]: output extent `(H−1)·stride − 2·pad + (n−1)·r + 1`.
pub fn transposed_conv2d<T: Real>(tape: &mut Tape<T>, x: Var, spec: &Conv2dSpec, w: Var, b: Option<Var>) -> Result<Var> {
    let [_, c, _, _] = expect_rank4(tape.shape(x), "transposed_conv2d")?;
    if c != spec.in_channels {
        return Err(Error::shape(format!(
            "transposed_conv2d expects {} input channels, got {c}",
            spec.in_channels
        )));
    }
    spec.check_params(tape, w, b, spec.transposed_weight_shape())?;
    tape.conv_transpose2d(x, w, b, spec.geom())
}

/// Per-channel spatial mean, B×C×H×W → B×C×1×1.
pub fn global_avg_pool<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    expect_rank4(tape.shape(x), "global_avg_pool")?;
    tape.reduce(ReduceKind::Mean, x, &[2, 3], true)
}

pub fn bilinear_resize<T: Real>(tape: &mut Tape<T>, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    tape.bilinear_resize(x, out_h, out_w)
}

/// Softmax over the positions of a single-channel map.
pub fn spatial_softmax<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let [_, c, _, _] = expect_rank4(tape.shape(x), "spatial_softmax")?;
    if c != 1 {
        return Err(Error::shape(format!(
            "spatial_softmax expects one channel, got {c}"
        )));
    }
    tape.spatial_softmax(x)
}

/// 3×3 stride-1 average pool with border-aware divisor.
pub const SMOOTH_POOL: PoolGeom = PoolGeom {
    kernel: 3,
    stride: 1,
    padding: 1,
    ceil_mode: false,
};

/// 2×2 stride-2 average pool; odd extents round up.
pub const HALVING_POOL: PoolGeom = PoolGeom {
    kernel: 2,
    stride: 2,
    padding: 0,
    ceil_mode: true,
};

/// Cumulative cascade `x + p(x) + p(p(x)) + …` with `stages` pooled terms,
/// `p` the 3×3 stride-1 average pool. Shape is preserved.
pub fn stacked_pool<T: Real>(tape: &mut Tape<T>, x: Var, stages: usize) -> Result<Var> {
    if stages == 0 {
        return Err(Error::config("stacked_pool needs at least one stage"));
    }
    expect_rank4(tape.shape(x), "stacked_pool")?;
    let mut acc = x;
    let mut cur = x;
    for _ in 0..stages {
        cur = tape.avg_pool2d(cur, SMOOTH_POOL)?;
        acc = tape.add(acc, cur)?;
    }
    Ok(acc)
}
