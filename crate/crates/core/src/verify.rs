//! Self-check suite: parameter-count grid, receptive fields from impulse
//! responses, gradient checks, attention normalization and metric
//! brute-force oracles. Each check is pure; groups run on scoped threads.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_fuse, attention_map, channel_weight, enhance, init_pyramid, pyramid_forward, spatial_weight, PyramidConfig};
use crate::autograd::{finite_diff_check_many, piecewise_check_many, Tape, Var};
use crate::dsf::{dsf_forward, dsf_param_count, dsf_receptive_field, impulse_response, init_dsf, support_side, DsfConfig};
use crate::error::Result;
use crate::metrics::{boundary, brute, evaluate, pri, voi, gce, bde, Grid, MaskPair, DEFAULT_BETA_SQ, DEFAULT_THRESHOLD};
use crate::model::{build_network, fused_loss, network_forward, NetConfig};
use crate::nn::{
    batch_norm, bilinear_resize, conv2d, global_avg_pool, spatial_softmax, stacked_pool, transposed_conv2d, BatchNormState,
    Conv2dSpec, Mode, HALVING_POOL,
};
use crate::params::{Ctx, ParamStore};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

/// Tolerance for single layers.
pub const LAYER_TOL: f64 = 1e-6;
/// Tolerance for composite units and the whole network.
pub const MODULE_TOL: f64 = 1e-4;
pub const ATTENTION_TOL: f64 = 1e-6;
pub const METRIC_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub group: &'static str,
    pub name: String,
    pub measured: String,
    pub target: String,
    pub pass: bool,
}

impl Check {
    fn new(group: &'static str, name: impl Into<String>, measured: impl Into<String>, target: impl Into<String>, pass: bool) -> Self {
        Check {
            group,
            name: name.into(),
            measured: measured.into(),
            target: target.into(),
            pass,
        }
    }

    fn failed(group: &'static str, name: impl Into<String>, err: crate::Error) -> Self {
        Check::new(group, name, format!("error: {err}"), "-", false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Seeds per gradient check.
    pub seeds: u64,
    /// Random inputs for the attention check.
    pub attention_inputs: u64,
    /// Random mask pairs for the metric oracles.
    pub masks: u64,
    /// Added to every branch dilation in the receptive-field check.
    pub dilation_skew: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seeds: 10,
            attention_inputs: 100,
            masks: 100,
            dilation_skew: 0,
        }
    }
}

/// Enumerated weight counts against `M·N/K + n²·N²/K` over
/// M, N ∈ {8, 16, 128}, K ∈ {1, 2, 4, 8}, n ∈ {3, 5}, plus the 128/4/3 case.
pub fn param_grid() -> Vec<Check> {
    let mut out = Vec::new();
    let mut bad = Vec::new();
    let mut cases = 0;
    for m in [8, 16, 128] {
        for n_out in [8, 16, 128] {
            for k in [1, 2, 4, 8] {
                if n_out % k != 0 {
                    continue;
                }
                for n in [3, 5] {
                    let cfg = DsfConfig::new(m, n_out, k, n, 1);
                    let formula = m * n_out / k + n * n * n_out * n_out / k;
                    let enumerated = build_unit(&cfg).map(|s| s.scalar_count()).unwrap_or(0);
                    cases += 1;
                    if enumerated != formula || dsf_param_count(&cfg) != formula {
                        bad.push(format!("M={m} N={n_out} K={k} n={n}: {enumerated} vs {formula}"));
                    }
                }
            }
        }
    }
    out.push(Check::new(
        "params",
        format!("grid ({cases} configs)"),
        if bad.is_empty() { "all equal".to_string() } else { bad.join("; ") },
        "M·N/K + n²N²/K",
        bad.is_empty(),
    ));
    let cfg = DsfConfig::new(128, 128, 4, 3, 1);
    let got = build_unit(&cfg).map(|s| s.scalar_count()).unwrap_or(0);
    out.push(Check::new("params", "M=N=128 K=4 n=3", got.to_string(), "40960", got == 40960));
    out
}

fn build_unit(cfg: &DsfConfig) -> Result<ParamStore<f64>> {
    let mut store = ParamStore::new();
    init_dsf(&mut store, "u", cfg, true, &mut ChaCha8Rng::seed_from_u64(0))?;
    // only convolution weights count
    let mut weights = ParamStore::new();
    for (name, t) in store.iter() {
        if t.rank() == 4 {
            weights.insert(name, t.clone())?;
        }
    }
    Ok(weights)
}

/// Measured impulse-response support against `(n−1)·2^(K−1)+1` for
/// K ∈ {1..4}, n ∈ {3, 5}.
pub fn receptive_fields(dilation_skew: usize) -> Vec<Check> {
    let mut out = Vec::new();
    for k in 1..=4 {
        for n in [3, 5] {
            let cfg = DsfConfig::new(k, 2 * k, k, n, 1)
                .with_residual(false)
                .with_dilation_skew(dilation_skew);
            let rf = dsf_receptive_field(n, k);
            let name = format!("K={k} n={n}");
            // margin for skewed dilations to grow past the formula
            let extent = rf + 2 * (n - 1) * (k + dilation_skew) + 4;
            match impulse_response(&cfg, extent) {
                Ok(map) => {
                    let side = support_side(&map);
                    out.push(Check::new("receptive field", name, side.to_string(), rf.to_string(), side == rf));
                }
                Err(e) => out.push(Check::failed("receptive field", name, e)),
            }
        }
    }
    out
}

type LayerFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync>;

fn probe_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = stream(seed, Purpose::Probe, 99);
    let r = tape.constant(Tensor::randn(tape.shape(y).to_vec(), 1.0, &mut rng));
    let m = tape.mul(y, r)?;
    tape.sum(m)
}

/// Which layer table to check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerGroup {
    /// Convolutions, normalization, pooling, resizing, softmax, the loss.
    Nn,
    /// Attention maps, fusion and the gates.
    Attention,
}

fn layer_cases(group: LayerGroup) -> Vec<(&'static str, Vec<Vec<usize>>, LayerFn)> {
    let all = all_layer_cases();
    let attention = ["attention map", "attention fusion", "channel gate", "spatial gate", "gated enhancement"];
    all.into_iter()
        .filter(|(name, _, _)| attention.contains(name) == (group == LayerGroup::Attention))
        .collect()
}

fn all_layer_cases() -> Vec<(&'static str, Vec<Vec<usize>>, LayerFn)> {
    let dilated = Conv2dSpec::same(3, 2, 3, 2, 1).with_bias(true);
    let strided = Conv2dSpec::same(2, 4, 3, 1, 2);
    let up = Conv2dSpec {
        in_channels: 2,
        out_channels: 3,
        kernel: 2,
        stride: 2,
        dilation: 1,
        padding: 0,
        has_bias: true,
    };
    vec![
        ("conv2d dilated", vec![vec![2, 3, 6, 6], vec![2, 3, 3, 3], vec![2]], Box::new(move |tp, v| conv2d(tp, v[0], &dilated, v[1], Some(v[2])))),
        ("conv2d strided", vec![vec![1, 2, 7, 7], vec![4, 2, 3, 3]], Box::new(move |tp, v| conv2d(tp, v[0], &strided, v[1], None))),
        ("transposed conv2d", vec![vec![1, 2, 3, 3], vec![2, 3, 2, 2], vec![3]], Box::new(move |tp, v| transposed_conv2d(tp, v[0], &up, v[1], Some(v[2])))),
        (
            "batch norm train",
            vec![vec![3, 2, 3, 3], vec![2], vec![2]],
            Box::new(|tp, v| batch_norm(tp, v[0], v[1], v[2], &mut BatchNormState::new(2), Mode::Train)),
        ),
        (
            "batch norm eval",
            vec![vec![1, 2, 3, 3], vec![2], vec![2]],
            Box::new(|tp, v| {
                let mut st = BatchNormState::new(2);
                st.running_mean = vec![0.5, -0.25];
                st.running_var = vec![1.5, 0.75];
                batch_norm(tp, v[0], v[1], v[2], &mut st, Mode::Eval)
            }),
        ),
        ("global average pool", vec![vec![2, 3, 4, 5]], Box::new(|tp, v| global_avg_pool(tp, v[0]))),
        ("bilinear resize", vec![vec![1, 2, 3, 4]], Box::new(|tp, v| bilinear_resize(tp, v[0], 7, 9))),
        ("spatial softmax", vec![vec![2, 1, 3, 4]], Box::new(|tp, v| spatial_softmax(tp, v[0]))),
        ("halving pool", vec![vec![1, 2, 5, 6]], Box::new(|tp, v| tp.avg_pool2d(v[0], HALVING_POOL))),
        ("stacked pool", vec![vec![1, 2, 5, 5]], Box::new(|tp, v| stacked_pool(tp, v[0], 2))),
        ("attention map", vec![vec![1, 4, 8, 8], vec![1, 4, 1, 1]], Box::new(|tp, v| attention_map(tp, v[0], v[1]))),
        (
            "attention fusion",
            vec![vec![1, 4, 8, 8], vec![1, 1, 4, 4], vec![1, 1, 2, 2]],
            Box::new(|tp, v| attention_fuse(tp, v[0], &v[1..])),
        ),
        (
            "channel gate",
            vec![vec![1, 4, 8, 8], vec![4, 2, 1, 1], vec![2, 4, 1, 1]],
            Box::new(|tp, v| channel_weight(tp, v[0], v[1], v[2])),
        ),
        ("spatial gate", vec![vec![1, 4, 8, 8], vec![1, 4, 1, 1]], Box::new(|tp, v| spatial_weight(tp, v[0], v[1]))),
        (
            "gated enhancement",
            vec![vec![1, 4, 8, 8], vec![4, 2, 1, 1], vec![2, 4, 1, 1], vec![1, 4, 1, 1]],
            Box::new(|tp, v| enhance(tp, v[0], v[1], v[2], v[3])),
        ),
        (
            "fused loss",
            vec![vec![2, 1, 4, 4]],
            Box::new(|tp, v| {
                // logits squashed into (0,1) stay clear of the clamp
                let s = tp.sigmoid(v[0])?;
                let mut rng = stream(0, Purpose::Probe, 98);
                let g = Tensor::<f64>::rand_uniform(vec![2, 1, 4, 4], 0.0, 1.0, &mut rng).map(|x| x.round());
                Ok(fused_loss(tp, s, &g)?.total)
            }),
        ),
    ]
}

/// Max relative error of each layer in `group` over `seeds` seeds,
/// fixed-step fourth-order differences with step 1e-3.
pub fn layer_gradient_errors(group: LayerGroup, seeds: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for (name, shapes, f) in layer_cases(group) {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = stream(seed, Purpose::Probe, 5);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s.clone(), 1.0, &mut rng)).collect();
            let r = finite_diff_check_many(
                |tp, v| {
                    let y = f(tp, v)?;
                    probe_sum(tp, y, seed)
                },
                &inputs,
                1e-3,
            )?;
            worst = worst.max(r.max_rel_error);
        }
        out.push((name, worst));
    }
    Ok(out)
}

/// Layers against [`LAYER_TOL`]; attention ops against [`MODULE_TOL`].
pub fn layer_gradients(seeds: u64) -> Vec<Check> {
    let mut out = Vec::new();
    for (group, label, tol) in [
        (LayerGroup::Nn, "layer gradient", LAYER_TOL),
        (LayerGroup::Attention, "attention gradient", MODULE_TOL),
    ] {
        match layer_gradient_errors(group, seeds) {
            Ok(errs) => out.extend(
                errs.into_iter()
                    .map(|(name, e)| Check::new(label, name, format!("{e:.2e}"), format!("< {tol:.0e}"), e < tol)),
            ),
            Err(e) => out.push(Check::failed(label, "gradient check", e)),
        }
    }
    out
}

fn bound_check(
    store: &ParamStore<f64>,
    x: Tensor<f64>,
    seed: u64,
    mode: Mode,
    body: impl Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>,
) -> Result<f64> {
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut inputs = vec![x];
    inputs.extend(names.iter().map(|n| store.get(n).unwrap().clone()));
    let r = piecewise_check_many(
        |tape, v| {
            let mut s = store.clone();
            let mut ctx = Ctx::new(tape, &mut s, mode);
            for (n, &var) in names.iter().zip(&v[1..]) {
                ctx.bind(n, var)?;
            }
            let y = body(&mut ctx, v[0])?;
            probe_sum(tape, y, seed)
        },
        &inputs,
        1e-3,
    )?;
    Ok(r.max_rel_error)
}

fn unit_gradient(seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for (cfg, mode) in [
        (DsfConfig::new(8, 8, 4, 3, 1), Mode::Train),
        (DsfConfig::new(4, 8, 2, 3, 2).with_sff(false), Mode::Train),
        (DsfConfig::new(6, 6, 3, 3, 1), Mode::Eval),
    ] {
        let mut store = ParamStore::new();
        init_dsf(&mut store, "u", &cfg, true, &mut stream(seed, Purpose::Init, 0))?;
        let x = Tensor::randn(vec![2, cfg.in_channels, 8, 8], 1.0, &mut stream(seed, Purpose::Probe, 1));
        worst = worst.max(bound_check(&store, x, seed, mode, |ctx, x| dsf_forward(ctx, x, &cfg, "u"))?);
    }
    Ok(worst)
}

fn pyramid_gradient(seed: u64) -> Result<f64> {
    let cfg = PyramidConfig {
        levels: 2,
        ..PyramidConfig::new(4)
    };
    let mut store = ParamStore::new();
    init_pyramid(&mut store, "att", &cfg, &mut stream(seed, Purpose::Init, 0))?;
    let x = Tensor::randn(vec![2, 4, 8, 8], 1.0, &mut stream(seed, Purpose::Probe, 8));
    bound_check(&store, x, seed, Mode::Train, |ctx, x| Ok(pyramid_forward(ctx, x, &cfg, "att")?.out))
}

/// Gradient of the fused loss of a tiny network with respect to the input
/// and every parameter, in train mode.
pub fn network_gradient(seed: u64) -> Result<f64> {
    let cfg = NetConfig::tiny(8, 16);
    let store = build_network::<f64>(&cfg, seed)?;
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut rng = stream(seed, Purpose::Probe, 11);
    let mut inputs = vec![Tensor::rand_uniform(vec![2, 3, 16, 16], 0.0, 1.0, &mut rng)];
    inputs.extend(names.iter().map(|n| store.get(n).unwrap().clone()));
    let mask = Tensor::<f64>::rand_uniform(vec![2, 1, 16, 16], 0.0, 1.0, &mut rng).map(|v| v.round());
    let r = piecewise_check_many(
        |tape, v| {
            let mut s = store.clone();
            let mut ctx = Ctx::new(tape, &mut s, Mode::Train);
            for (n, &var) in names.iter().zip(&v[1..]) {
                ctx.bind(n, var)?;
            }
            let out = network_forward(&mut ctx, &cfg, v[0])?;
            Ok(fused_loss(tape, out.map, &mask)?.total)
        },
        &inputs,
        1e-3,
    )?;
    Ok(r.max_rel_error)
}

fn module_check(name: &str, seeds: u64, f: impl Fn(u64) -> Result<f64>) -> Check {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        match f(seed) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return Check::failed("module gradient", name.to_string(), e),
        }
    }
    Check::new("module gradient", name.to_string(), format!("{worst:.2e}"), format!("< {MODULE_TOL:.0e}"), worst < MODULE_TOL)
}

pub fn module_gradients(seeds: u64) -> Vec<Check> {
    vec![
        module_check("scale-wise fusion unit", seeds, unit_gradient),
        module_check("pyramid attention", seeds, pyramid_gradient),
        module_check("tiny network", seeds, network_gradient),
    ]
}

/// Largest deviation of an attention map's mass from 1 over random
/// features and weights.
pub fn attention_mass_error(inputs: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..inputs {
        let mut rng = stream(seed, Purpose::Probe, 20);
        let c = rng.random_range(1..=6);
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let scale = rng.random_range(0.1..10.0);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::randn(vec![2, c, h, w], scale, &mut rng));
        let wv = tape.constant(Tensor::randn(vec![1, c, 1, 1], 1.0, &mut rng));
        let m = attention_map(&mut tape, x, wv)?;
        for b in 0..2 {
            let p = tape.value(m).plane(b, 0);
            if p.iter().any(|&v| v < 0.0) {
                return Ok(f64::INFINITY);
            }
            worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(worst)
}

pub fn attention_normalization(inputs: u64) -> Check {
    let name = format!("map mass ({inputs} inputs)");
    match attention_mass_error(inputs) {
        Ok(e) => Check::new("attention", name, format!("{e:.2e}"), format!("< {ATTENTION_TOL:.0e}"), e < ATTENTION_TOL),
        Err(e) => Check::failed("attention", name, e),
    }
}

/// Largest |fast − brute force| for PRI, VOI, GCE and BDE over random
/// binary mask pairs up to 8×8.
pub fn metric_oracle_errors(masks: u64) -> Result<[f64; 4]> {
    let mut worst = [0.0f64; 4];
    for seed in 0..masks {
        let mut rng = stream(seed, Purpose::Probe, 30);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let pa: f64 = rng.random_range(0.1..0.9);
        let pb: f64 = rng.random_range(0.1..0.9);
        let a = Grid::from_fn(h, w, |_, _| rng.random_bool(pa));
        let b = Grid::from_fn(h, w, |_, _| rng.random_bool(pb));
        let (la, lb) = (a.map(u32::from), b.map(u32::from));
        let pairs = [
            (pri(&la, &lb)?, brute::pri(&la, &lb)?),
            (voi(&la, &lb)?, brute::voi(&la, &lb)?),
            (gce(&la, &lb)?, brute::gce(&la, &lb)?),
        ];
        for (i, (fast, slow)) in pairs.iter().enumerate() {
            worst[i] = worst[i].max((fast - slow).abs());
        }
        let has = |g: &Grid<bool>| boundary(g).data().iter().any(|&v| v);
        match (bde(&a, &b), brute::bde(&a, &b)) {
            (Ok(f), Ok(s)) => worst[3] = worst[3].max((f - s).abs()),
            (Err(_), Err(_)) if !has(&a) || !has(&b) => {}
            _ => worst[3] = f64::INFINITY,
        }
    }
    Ok(worst)
}

/// Perfect prediction: F=1, MAE=0, PRI=1, VOI=0, GCE=0, BDE=0.
pub fn fixed_point_holds() -> Result<bool> {
    let g = Grid::from_fn(8, 8, |y, x| (2..6).contains(&y) && (1..5).contains(&x));
    let pair = MaskPair::new(g.map(|v| if v { 1.0 } else { 0.0 }), g)?;
    let r = evaluate(&pair, DEFAULT_THRESHOLD, DEFAULT_BETA_SQ)?;
    Ok(r.f_score == 1.0 && r.mae == 0.0 && r.pri == 1.0 && r.voi == 0.0 && r.gce == 0.0 && r.bde == Some(0.0))
}

pub fn metric_oracles(masks: u64) -> Vec<Check> {
    let mut out = Vec::new();
    match metric_oracle_errors(masks) {
        Ok(errs) => {
            for (name, e) in ["PRI", "VOI", "GCE", "BDE"].iter().zip(errs) {
                out.push(Check::new(
                    "metric oracle",
                    format!("{name} vs brute force ({masks} pairs)"),
                    format!("{e:.2e}"),
                    format!("< {METRIC_TOL:.0e}"),
                    e < METRIC_TOL,
                ));
            }
        }
        Err(e) => out.push(Check::failed("metric oracle", "brute force", e)),
    }
    out.push(match fixed_point_holds() {
        Ok(ok) => Check::new("metric oracle", "perfect prediction", if ok { "F=1 MAE=0 PRI=1 VOI=0 GCE=0 BDE=0" } else { "off" }, "fixed point", ok),
        Err(e) => Check::failed("metric oracle", "perfect prediction", e),
    });
    out
}

/// Every group, run concurrently; order of the result is fixed.
pub fn run(opts: &VerifyOptions) -> Vec<Check> {
    std::thread::scope(|s| {
        let groups = [
            s.spawn(param_grid),
            s.spawn(move || receptive_fields(opts.dilation_skew)),
            s.spawn(move || layer_gradients(opts.seeds)),
            s.spawn(move || module_gradients(opts.seeds)),
            s.spawn(move || vec![attention_normalization(opts.attention_inputs)]),
            s.spawn(move || metric_oracles(opts.masks)),
        ];
        groups.into_iter().flat_map(|g| g.join().expect("check thread panicked")).collect()
    })
}

pub fn all_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.pass)
}

/// Fixed-width pass/fail table.
pub fn render(checks: &[Check]) -> String {
    let wg = checks.iter().map(|c| c.group.len()).max().unwrap_or(0).max(5);
    let wn = checks.iter().map(|c| c.name.len()).max().unwrap_or(0).max(5);
    let wm = checks.iter().map(|c| c.measured.chars().count()).max().unwrap_or(0).max(8);
    let mut out = String::new();
    let _ = writeln!(out, "{:<4}  {:<wg$}  {:<wn$}  {:<wm$}  target", "", "group", "check", "measured");
    for c in checks {
        let _ = writeln!(
            out,
            "{:<4}  {:<wg$}  {:<wn$}  {:<wm$}  {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.group,
            c.name,
            c.measured,
            c.target
        );
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    let _ = writeln!(out, "{} checks, {failed} failed", checks.len());
    out
}
