//! Factorized dilated unit with stepwise fusion.
//!
//! A 1×1 "instant" convolution reduces `M` input channels to `N/K`; `K`
//! parallel `n×n` convolutions with dilation `2^(k−1)` resample the reduced
//! maps; stepwise fusion turns the branch outputs into prefix sums, which are
//! concatenated back to `N` channels, optionally added to the input, then
//! batch-normalized and rectified.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{conv2d, he_normal, orthogonal_init, Conv2dSpec, Mode};
use crate::params::{Ctx, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DsfConfig {
    /// M
    pub in_channels: usize,
    /// N
    pub out_channels: usize,
    /// K, the width divider and branch count.
    pub branches: usize,
    /// n, odd.
    pub kernel: usize,
    /// 1 or 2; applied inside each dilated branch.
    pub stride: usize,
    pub residual: bool,
    pub sff: bool,
    dilation_skew: usize,
}

impl DsfConfig {
    /// Residual on exactly when the shapes allow it; fusion on.
    pub fn new(in_channels: usize, out_channels: usize, branches: usize, kernel: usize, stride: usize) -> Self {
        DsfConfig {
            in_channels,
            out_channels,
            branches,
            kernel,
            stride,
            residual: in_channels == out_channels && stride == 1,
            sff: true,
            dilation_skew: 0,
        }
    }

    pub fn with_sff(mut self, sff: bool) -> Self {
        self.sff = sff;
        self
    }

    pub fn with_residual(mut self, residual: bool) -> Self {
        self.residual = residual;
        self
    }

    /// Adds `skew` to every branch dilation. Fault injection for the
    /// self-check; never used by the model.
    #[doc(hidden)]
    pub fn with_dilation_skew(mut self, skew: usize) -> Self {
        self.dilation_skew = skew;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad(format!("zero channels in {self:?}"));
        }
        if self.branches == 0 {
            return bad("K must be at least 1".into());
        }
        if self.out_channels % self.branches != 0 {
            return bad(format!(
                "N={} not divisible by K={}",
                self.out_channels, self.branches
            ));
        }
        if self.kernel < 3 || self.kernel % 2 == 0 {
            return bad(format!("branch kernel must be odd and ≥ 3, got {}", self.kernel));
        }
        if self.stride != 1 && self.stride != 2 {
            return bad(format!("stride must be 1 or 2, got {}", self.stride));
        }
        if self.residual && (self.in_channels != self.out_channels || self.stride != 1) {
            return bad(format!(
                "residual needs M == N and stride 1 ({}→{}, stride {})",
                self.in_channels, self.out_channels, self.stride
            ));
        }
        if self.branches > 30 {
            return bad(format!("K={} overflows the dilation schedule", self.branches));
        }
        Ok(())
    }

    pub fn branch_width(&self) -> usize {
        self.out_channels / self.branches
    }

    /// Dilation of branch `k`, 1-based.
    pub fn dilation(&self, k: usize) -> usize {
        (1usize << (k - 1)) + self.dilation_skew
    }

    pub fn instant_spec(&self) -> Conv2dSpec {
        Conv2dSpec::same(self.in_channels, self.branch_width(), 1, 1, 1)
    }

    pub fn branch_spec(&self, k: usize) -> Conv2dSpec {
        let w = self.branch_width();
        Conv2dSpec::same(w, w, self.kernel, self.dilation(k), self.stride)
    }

    pub fn out_extent(&self, input: usize) -> Option<usize> {
        self.branch_spec(1).out_extent(input)
    }

    /// Every conv weight of the unit as (name suffix, shape).
    pub fn weight_shapes(&self) -> Vec<(String, [usize; 4])> {
        let mut v = vec![("instant".to_string(), self.instant_spec().weight_shape())];
        for k in 1..=self.branches {
            v.push((format!("branch{k}"), self.branch_spec(k).weight_shape()));
        }
        v
    }

    /// Count obtained by enumerating the weight tensors.
    pub fn enumerated_weight_count(&self) -> usize {
        self.weight_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// `M·N/K + n²·N²/K`.
pub fn dsf_param_count(cfg: &DsfConfig) -> usize {
    let (m, n_out, k, n) = (cfg.in_channels, cfg.out_channels, cfg.branches, cfg.kernel);
    m * n_out / k + n * n * n_out * n_out / k
}

/// `n²·M·N`, the plain convolution the unit replaces.
pub fn standard_conv_param_count(m: usize, n_out: usize, kernel: usize) -> usize {
    kernel * kernel * m * n_out
}

/// Side of the widest branch's field, `(n−1)·2^(K−1) + 1`.
pub fn dsf_receptive_field(kernel: usize, branches: usize) -> usize {
    (kernel - 1) * (1 << (branches - 1)) + 1
}

/// Prefix sums `s_k = s_{k−1} + b_k`, branches ordered by ascending dilation.
pub fn sff_merge<T: Real>(tape: &mut Tape<T>, branches: &[Var]) -> Result<Vec<Var>> {
    let Some(&first) = branches.first() else {
        return Err(Error::shape("sff_merge of zero branches"));
    };
    let shape = tape.shape(first).to_vec();
    let mut out = Vec::with_capacity(branches.len());
    let mut acc = first;
    out.push(acc);
    for &b in &branches[1..] {
        if tape.shape(b) != shape.as_slice() {
            return Err(Error::shape(format!(
                "sff_merge branch shape {:?} vs {shape:?}",
                tape.shape(b)
            )));
        }
        acc = tape.add(acc, b)?;
        out.push(acc);
    }
    Ok(out)
}

/// Registers the unit's weights under `prefix`: an orthogonal (or He, when
/// `orthogonal` is false) instant weight, He-normal branch weights and one
/// batch norm over N channels.
pub fn init_dsf<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &DsfConfig,
    orthogonal: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let inst = cfg.instant_spec();
    let instant = if orthogonal {
        orthogonal_init::<T>(inst.out_channels, inst.in_channels, rng.next_u64())?
            .reshape(inst.weight_shape().to_vec())?
    } else {
        he_normal(&inst.weight_shape(), inst.in_channels, rng)
    };
    store.insert(format!("{prefix}.instant"), instant)?;
    for k in 1..=cfg.branches {
        let spec = cfg.branch_spec(k);
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        store.insert(
            format!("{prefix}.branch{k}"),
            he_normal(&spec.weight_shape(), fan_in, rng),
        )?;
    }
    store.insert_norm(&format!("{prefix}.bn"), cfg.out_channels)
}

/// Intermediate values of one unit evaluation.
#[derive(Clone, Debug)]
pub struct DsfTrace {
    pub reduced: Var,
    pub branches: Vec<Var>,
    /// Prefix sums when fusion is on, the raw branches otherwise.
    pub fused: Vec<Var>,
    pub concat: Var,
    /// After the residual add, before normalization.
    pub pre_norm: Var,
    pub out: Var,
}

pub fn dsf_forward<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, cfg: &DsfConfig, prefix: &str) -> Result<Var> {
    Ok(dsf_forward_traced(ctx, x, cfg, prefix)?.out)
}

pub fn dsf_forward_traced<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, cfg: &DsfConfig, prefix: &str) -> Result<DsfTrace> {
    cfg.validate()?;
    let instant = ctx.param(&format!("{prefix}.instant"))?;
    let reduced = conv2d(ctx.tape, x, &cfg.instant_spec(), instant, None)?;
    let mut branches = Vec::with_capacity(cfg.branches);
    for k in 1..=cfg.branches {
        let w = ctx.param(&format!("{prefix}.branch{k}"))?;
        branches.push(conv2d(ctx.tape, reduced, &cfg.branch_spec(k), w, None)?);
    }
    let fused = if cfg.sff {
        sff_merge(ctx.tape, &branches)?
    } else {
        branches.clone()
    };
    let concat = if fused.len() == 1 {
        fused[0]
    } else {
        ctx.tape.concat_channels(&fused)?
    };
    let pre_norm = if cfg.residual {
        ctx.tape.add(concat, x)?
    } else {
        concat
    };
    let normed = ctx.batch_norm(pre_norm, &format!("{prefix}.bn"))?;
    let out = ctx.tape.relu(normed)?;
    Ok(DsfTrace {
        reduced,
        branches,
        fused,
        concat,
        pre_norm,
        out,
    })
}

fn impulse_trace(cfg: &DsfConfig, extent: usize) -> Result<(Tape<f64>, DsfTrace)> {
    cfg.validate()?;
    let mut store = ParamStore::<f64>::new();
    for (name, shape) in cfg.weight_shapes() {
        store.insert(format!("u.{name}"), Tensor::ones(shape.to_vec()))?;
    }
    store.insert_norm("u.bn", cfg.out_channels)?;
    let mut x = Tensor::zeros(vec![1, cfg.in_channels, extent, extent]);
    let c = extent / 2;
    x.data_mut()[c * extent + c] = 1.0;

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Eval);
    ctx.bypass_norm = true;
    let tr = dsf_forward_traced(&mut ctx, xv, cfg, "u")?;
    Ok((tape, tr))
}

fn channel_sum(v: &Tensor<f64>) -> Tensor<f64> {
    let (h, w) = (v.shape()[2], v.shape()[3]);
    let mut out = Tensor::zeros(vec![h, w]);
    for c in 0..v.shape()[1] {
        for (o, &p) in out.data_mut().iter_mut().zip(v.plane(0, c)) {
            *o += p;
        }
    }
    out
}

/// Channel-summed pre-normalization response of a unit with all-ones
/// weights to a unit impulse at the centre of channel 0, on a square grid
/// of side `extent`. Normalization is bypassed.
pub fn impulse_response(cfg: &DsfConfig, extent: usize) -> Result<Tensor<f64>> {
    let (tape, tr) = impulse_trace(cfg, extent)?;
    Ok(channel_sum(tape.value(tr.concat)))
}

/// The same response split per concatenated group: raw branches with fusion
/// off, prefix sums with fusion on.
pub fn group_impulse_responses(cfg: &DsfConfig, extent: usize) -> Result<Vec<Tensor<f64>>> {
    let (tape, tr) = impulse_trace(cfg, extent)?;
    Ok(tr.fused.iter().map(|&f| channel_sum(tape.value(f))).collect())
}

/// Side of the bounding square of the nonzero entries of an H×W map.
pub fn support_side(map: &Tensor<f64>) -> usize {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..h {
        for c in 0..w {
            if map.data()[r * w + c] != 0.0 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return 0;
    }
    (r1 - r0 + 1).max(c1 - c0 + 1)
}

/// Columns of the centre row that are zero yet lie strictly between two
/// nonzero columns.
pub fn center_row_interior_zeros(map: &Tensor<f64>) -> Vec<usize> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let row = &map.data()[(h / 2) * w..(h / 2 + 1) * w];
    let nz: Vec<usize> = (0..w).filter(|&c| row[c] != 0.0).collect();
    match (nz.first(), nz.last()) {
        (Some(&a), Some(&b)) => (a..=b).filter(|&c| row[c] == 0.0).collect(),
        _ => Vec::new(),
    }
}
