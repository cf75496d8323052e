//! Encoder–decoder saliency network and its training loss.

use crate::attention::{init_pyramid, pyramid_forward, PyramidConfig};
use crate::autograd::{Tape, Var};
use crate::dsf::{dsf_forward, init_dsf, DsfConfig};
use crate::error::{Error, Result};
use crate::nn::{conv2d, he_normal, transposed_conv2d, Conv2dSpec, Mode};
use crate::params::{Ctx, ParamStore};
use crate::real::Real;
use crate::rng::{stream, Purpose};
use crate::tensor::{expect_rank4, Tensor};

/// Probability clamp used by the cross-entropy term.
pub const CE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// α: units per DSF stage (one strided plus α−1 residual).
    pub alpha: usize,
    /// (in, out) channels per encoder stage. Stage 0 is a plain 3×3 conv,
    /// the rest are DSF stages.
    pub stages: Vec<(usize, usize)>,
    /// K
    pub branches: usize,
    /// n
    pub kernel: usize,
    pub input_extent: usize,
    pub attention: bool,
    /// Attention after every encoder stage instead of only the deepest.
    pub attention_per_stage: bool,
    /// L, pyramid levels.
    pub levels: usize,
    pub reduction: usize,
    pub pool_stages: usize,
    pub sff: bool,
    /// Orthogonal instant-conv init; He-normal when off.
    pub orthogonal_instant: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            alpha: 2,
            stages: vec![(3, 16), (16, 64), (64, 128)],
            branches: 4,
            kernel: 3,
            input_extent: 64,
            attention: true,
            attention_per_stage: false,
            levels: 3,
            reduction: 4,
            pool_stages: 1,
            sff: true,
            orthogonal_instant: true,
        }
    }
}

impl NetConfig {
    /// Two stages of `width` channels; the smallest useful network.
    pub fn tiny(width: usize, input_extent: usize) -> Self {
        NetConfig {
            stages: vec![(3, width), (width, width)],
            input_extent,
            levels: 2,
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.stages.is_empty() {
            return bad("at least one encoder stage required".into());
        }
        if self.alpha == 0 {
            return bad("alpha must be at least 1".into());
        }
        for w in self.stages.windows(2) {
            if w[0].1 != w[1].0 {
                return bad(format!("stage plan breaks between {:?} and {:?}", w[0], w[1]));
            }
        }
        if self.stages.iter().any(|&(m, n)| m == 0 || n == 0) {
            return bad("zero-width stage".into());
        }
        for cfg in self.unit_configs().iter().map(|(_, c)| c) {
            cfg.validate()?;
        }
        let s = self.stages.len();
        let deepest = self.stages[s - 1].1;
        if deepest % (1 << s) != 0 {
            return bad(format!(
                "deepest width {deepest} cannot be halved by {s} decoder stages"
            ));
        }
        if self.input_extent == 0 || self.input_extent % (1 << s) != 0 {
            return bad(format!(
                "input extent {} not divisible by 2^{s}",
                self.input_extent
            ));
        }
        if self.attention {
            for (stage, extent) in self.attention_sites() {
                if extent < 1 << self.levels {
                    return bad(format!(
                        "attention after stage {stage} sees {extent}×{extent}, too small for {} levels",
                        self.levels
                    ));
                }
                self.pyramid(stage).validate()?;
            }
        }
        Ok(())
    }

    /// Every DSF unit as (parameter prefix, config), encoder order.
    pub fn unit_configs(&self) -> Vec<(String, DsfConfig)> {
        let mut v = Vec::new();
        for (s, &(m, n)) in self.stages.iter().enumerate().skip(1) {
            v.push((
                format!("enc{s}.dsf0"),
                DsfConfig::new(m, n, self.branches, self.kernel, 2).with_sff(self.sff),
            ));
            for j in 1..self.alpha {
                v.push((
                    format!("enc{s}.dsf{j}"),
                    DsfConfig::new(n, n, self.branches, self.kernel, 1).with_sff(self.sff),
                ));
            }
        }
        v
    }

    pub fn stem_spec(&self) -> Conv2dSpec {
        let (m, n) = self.stages[0];
        Conv2dSpec::same(m, n, 3, 1, 2)
    }

    /// (stage, spatial extent) of every attention block.
    pub fn attention_sites(&self) -> Vec<(usize, usize)> {
        let s = self.stages.len();
        let range = if self.attention_per_stage { 0..s } else { s - 1..s };
        range.map(|i| (i, self.input_extent >> (i + 1))).collect()
    }

    pub fn pyramid(&self, stage: usize) -> PyramidConfig {
        PyramidConfig {
            channels: self.stages[stage].1,
            levels: self.levels,
            reduction: self.reduction,
            pool_stages: self.pool_stages,
        }
    }

    /// Transposed-conv spec of decoder step `j` (deepest first).
    pub fn decoder_spec(&self, j: usize) -> Conv2dSpec {
        let c = self.stages[self.stages.len() - 1].1 >> j;
        Conv2dSpec {
            in_channels: c,
            out_channels: c / 2,
            kernel: 2,
            stride: 2,
            dilation: 1,
            padding: 0,
            has_bias: false,
        }
    }

    pub fn head_channels(&self) -> usize {
        self.stages[self.stages.len() - 1].1 >> self.stages.len()
    }
}

/// Registers every parameter of the network described by `cfg`. Draws come
/// from the initialization stream of `seed`.
pub fn build_network<T: Real>(cfg: &NetConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = stream(seed, Purpose::Init, 0);
    let mut store = ParamStore::new();
    let stem = cfg.stem_spec();
    store.insert("enc0.conv", he_normal(&stem.weight_shape(), stem.in_channels * 9, &mut rng))?;
    store.insert_norm("enc0.bn", stem.out_channels)?;
    for (prefix, unit) in cfg.unit_configs() {
        init_dsf(&mut store, &prefix, &unit, cfg.orthogonal_instant, &mut rng)?;
    }
    if cfg.attention {
        for (stage, _) in cfg.attention_sites() {
            init_pyramid(&mut store, &format!("att{stage}"), &cfg.pyramid(stage), &mut rng)?;
        }
    }
    for j in 0..cfg.stages.len() {
        let spec = cfg.decoder_spec(j);
        store.insert(
            format!("dec{j}.up"),
            he_normal(&spec.transposed_weight_shape(), spec.in_channels, &mut rng),
        )?;
        store.insert_norm(&format!("dec{j}.bn"), spec.out_channels)?;
    }
    let c = cfg.head_channels();
    store.insert("head.conv", he_normal(&[1, c, 1, 1], c, &mut rng))?;
    store.insert("head.bias", Tensor::zeros(vec![1]))?;
    Ok(store)
}

#[derive(Clone, Copy, Debug)]
pub struct SaliencyOutput {
    /// B×1×H×W probabilities at input resolution.
    pub map: Var,
    /// B×1×h×w head logits at decoder resolution.
    pub logits: Var,
}

pub fn network_forward<T: Real>(ctx: &mut Ctx<'_, T>, cfg: &NetConfig, images: Var) -> Result<SaliencyOutput> {
    let [_, c, h, w] = expect_rank4(ctx.tape.shape(images), "network input")?;
    let s = cfg.stages.len();
    if c != cfg.stages[0].0 {
        return Err(Error::shape(format!(
            "network expects {} input channels, got {c}",
            cfg.stages[0].0
        )));
    }
    if h % (1 << s) != 0 || w % (1 << s) != 0 {
        return Err(Error::shape(format!("input {h}×{w} not divisible by 2^{s}")));
    }
    let sites = if cfg.attention { cfg.attention_sites() } else { Vec::new() };
    let attend = |ctx: &mut Ctx<'_, T>, x: Var, stage: usize| -> Result<Var> {
        if sites.iter().any(|&(st, _)| st == stage) {
            Ok(pyramid_forward(ctx, x, &cfg.pyramid(stage), &format!("att{stage}"))?.out)
        } else {
            Ok(x)
        }
    };

    let stem_w = ctx.param("enc0.conv")?;
    let x = conv2d(ctx.tape, images, &cfg.stem_spec(), stem_w, None)?;
    let x = ctx.batch_norm(x, "enc0.bn")?;
    let mut x = ctx.tape.relu(x)?;
    x = attend(ctx, x, 0)?;
    let units = cfg.unit_configs();
    for stage in 1..s {
        for (prefix, unit) in units.iter().filter(|(p, _)| p.starts_with(&format!("enc{stage}."))) {
            x = dsf_forward(ctx, x, unit, prefix)?;
        }
        x = attend(ctx, x, stage)?;
    }

    for j in 0..s {
        let wv = ctx.param(&format!("dec{j}.up"))?;
        x = transposed_conv2d(ctx.tape, x, &cfg.decoder_spec(j), wv, None)?;
        x = ctx.batch_norm(x, &format!("dec{j}.bn"))?;
        x = ctx.tape.relu(x)?;
    }

    let hw = ctx.param("head.conv")?;
    let hb = ctx.param("head.bias")?;
    let head = Conv2dSpec::same(cfg.head_channels(), 1, 1, 1, 1).with_bias(true);
    let logits = conv2d(ctx.tape, x, &head, hw, Some(hb))?;
    let prob = ctx.tape.sigmoid(logits)?;
    let map = ctx.tape.bilinear_resize(prob, h, w)?;
    Ok(SaliencyOutput { map, logits })
}

/// A configured network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DsfNet<T> {
    pub cfg: NetConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> DsfNet<T> {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        let params = build_network(&cfg, seed)?;
        Ok(DsfNet { cfg, params })
    }

    /// Saliency maps (B×1×H×W) for a B×3×H×W batch in eval mode.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let mut ctx = Ctx::new(&mut tape, &mut self.params, Mode::Eval);
        let out = network_forward(&mut ctx, &self.cfg, x)?;
        Ok(tape.value(out.map).clone())
    }

    /// Conv weights of the encoder (stem plus every DSF unit).
    pub fn encoder_conv_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| {
                k.starts_with("enc") && (k.ends_with(".conv") || k.ends_with(".instant") || k.contains(".branch"))
            })
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn dsf_unit_count(&self) -> usize {
        self.cfg.unit_configs().len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub mae: Var,
}

/// `CE(G, S) + MAE(G, S)`. CE is the per-pixel binary cross-entropy of the
/// clamped probabilities, averaged; MAE is the mean of `|S − G|` on the raw
/// map.
pub fn fused_loss<T: Real>(tape: &mut Tape<T>, s: Var, g: &Tensor<T>) -> Result<LossParts> {
    if tape.shape(s) != g.shape() {
        return Err(Error::shape(format!(
            "loss extents differ: prediction {:?}, mask {:?}",
            tape.shape(s),
            g.shape()
        )));
    }
    let eps = T::lit(CE_EPS);
    let sc = tape.clamp(s, eps, T::one() - eps)?;
    let ln_s = tape.ln(sc)?;
    let neg = tape.neg(sc)?;
    let comp = tape.offset(neg, T::one())?;
    let ln_c = tape.ln(comp)?;
    let gv = tape.constant(g.clone());
    let gc = tape.constant(g.map(|v| T::one() - v));
    let a = tape.mul(gv, ln_s)?;
    let b = tape.mul(gc, ln_c)?;
    let ll = tape.add(a, b)?;
    let ll = tape.mean(ll)?;
    let ce = tape.neg(ll)?;

    let d = tape.sub(s, gv)?;
    let d = tape.abs(d)?;
    let mae = tape.mean(d)?;
    let total = tape.add(ce, mae)?;
    Ok(LossParts { total, ce, mae })
}
