//! Acceptance criteria, run in sequence so the timing bounds are measured on
//! an otherwise idle core. One PASS/FAIL line per criterion.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dsfnet::attention::{attention_fuse, attention_term};
use dsfnet::autograd::Tape;
use dsfnet::data::Checkpoint;
use dsfnet::dsf::{center_row_interior_zeros, impulse_response, init_dsf, support_side, DsfConfig};
use dsfnet::nn::Mode;
use dsfnet::params::ParamStore;
use dsfnet::rng::{stream, Purpose};
use dsfnet::train::{load_training_data, RunConfig, TraceRow, Trainer};
use dsfnet::verify::{self, LayerGroup};
use dsfnet::Tensor;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn record(out: &mut Vec<Outcome>, name: &'static str, pass: bool, detail: String) {
    println!("{}  {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { name, pass, detail });
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn param_count(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let mut mismatches = Vec::new();
    let mut cases = 0;
    for m in [8, 16, 128] {
        for n_out in [8, 16, 128] {
            for k in [1, 2, 4, 8] {
                if n_out % k != 0 {
                    continue;
                }
                for n in [3, 5] {
                    let cfg = DsfConfig::new(m, n_out, k, n, 1);
                    let mut store = ParamStore::<f64>::new();
                    init_dsf(&mut store, "u", &cfg, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                    let enumerated: usize = store.iter().filter(|(_, w)| w.rank() == 4).map(|(_, w)| w.len()).sum();
                    let formula = m * n_out / k + n * n * n_out * n_out / k;
                    cases += 1;
                    if enumerated != formula {
                        mismatches.push(format!("M={m} N={n_out} K={k} n={n}: {enumerated} vs {formula}"));
                    }
                    if (m, n_out, k, n) == (128, 128, 4, 3) && enumerated != 40960 {
                        mismatches.push(format!("running example gives {enumerated}, not 40960"));
                    }
                }
            }
        }
    }
    let el = t.elapsed();
    record(
        out,
        "parameter count formula",
        mismatches.is_empty() && el < Duration::from_secs(1),
        format!("{cases} configs, {} mismatches, 128/128/4/3 included, {} (< 1s)", mismatches.len(), secs(el)),
    );
}

fn receptive_field(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let mut rows = Vec::new();
    let mut ok = true;
    for k in 1..=4usize {
        for n in [3usize, 5] {
            let formula = (n - 1) * (1 << (k - 1)) + 1;
            let cfg = DsfConfig::new(k, 2 * k, k, n, 1).with_residual(false);
            let side = support_side(&impulse_response(&cfg, formula + 6).unwrap());
            ok &= side == formula;
            rows.push(format!("K{k}n{n}={side}/{formula}"));
        }
    }
    let k4 = support_side(&impulse_response(&DsfConfig::new(4, 8, 4, 3, 1).with_residual(false), 23).unwrap());
    ok &= k4 == 17;
    let el = t.elapsed();
    record(
        out,
        "receptive field",
        ok && el < Duration::from_secs(5),
        format!("measured/formula {}; K=4 n=3 side {k4} (target 17); {} (< 5s)", rows.join(" "), secs(el)),
    );
}

fn gridding(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let mut ok = true;
    let mut rows = Vec::new();
    for k in [3usize, 4] {
        for n in [3usize, 5] {
            let rf = (n - 1) * (1 << (k - 1)) + 1;
            let cfg = DsfConfig::new(k, 2 * k, k, n, 1).with_residual(false);
            let off = center_row_interior_zeros(&impulse_response(&cfg.with_sff(false), rf + 4).unwrap()).len();
            let on = center_row_interior_zeros(&impulse_response(&cfg, rf + 4).unwrap()).len();
            ok &= off > 0 && on == 0;
            rows.push(format!("K{k}n{n} off={off} on={on}"));
        }
    }
    let el = t.elapsed();
    record(
        out,
        "fusion removes gridding gaps",
        ok && el < Duration::from_secs(5),
        format!("interior zeros on the centre row: {}; target off > 0, on = 0; {}", rows.join(", "), secs(el)),
    );
}

fn gradients(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let nn = verify::layer_gradient_errors(LayerGroup::Nn, 10).unwrap();
    let att = verify::layer_gradient_errors(LayerGroup::Attention, 10).unwrap();
    let modules = verify::module_gradients(10);
    let el = t.elapsed();
    let fmt = |v: &[(&str, f64)]| v.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    let worst = |v: &[(&str, f64)]| v.iter().map(|p| p.1).fold(0.0f64, f64::max);
    record(out, "layer gradients below 1e-6", worst(&nn) < 1e-6, format!("10 seeds: {}", fmt(&nn)));
    record(out, "attention-op gradients below 1e-6", worst(&att) < 1e-6, format!("10 seeds: {}", fmt(&att)));
    let mods: Vec<String> = modules.iter().map(|c| format!("{} {}", c.name, c.measured)).collect();
    record(
        out,
        "unit and network gradients below 1e-4",
        modules.iter().all(|c| c.pass),
        format!("10 seeds: {}", mods.join(", ")),
    );
    record(out, "gradient checks within 2 min", el < Duration::from_secs(120), secs(el));
}

fn attention_mass(out: &mut Vec<Outcome>) {
    let e = verify::attention_mass_error(100).unwrap();
    record(out, "attention maps sum to one", e < 1e-6, format!("100 inputs, max |Σℓ − 1| = {e:.1e} (< 1e-6)"));
}

fn fusion_identity(out: &mut Vec<Outcome>) {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = stream(seed, Purpose::Probe, 40);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::randn(vec![2, 5, 16, 16], 1.0, &mut rng));
        let maps: Vec<_> = [8, 4, 2]
            .iter()
            .map(|&s| tape.constant(Tensor::rand_uniform(vec![2, 1, s, s], 0.0, 1.0, &mut rng)))
            .collect();
        let b = attention_fuse(&mut tape, x, &maps).unwrap();
        let a = attention_term(&mut tape, x, &maps).unwrap();
        let diff = tape.value(b).zip_map(tape.value(x), |p, q| p - q).unwrap();
        worst = worst.max(diff.max_abs_diff(tape.value(a)));
    }
    record(
        out,
        "fused output minus input equals attention term",
        worst < 1e-12,
        format!("20 inputs, max diff {worst:.1e} (< 1e-12)"),
    );
}

fn metric_oracles(out: &mut Vec<Outcome>) {
    let errs = verify::metric_oracle_errors(100).unwrap();
    let fixed = verify::fixed_point_holds().unwrap();
    record(
        out,
        "metrics match brute force, perfect fixed point",
        errs.iter().all(|&e| e < 1e-9) && fixed,
        format!(
            "100 pairs, max diff PRI {:.1e} VOI {:.1e} GCE {:.1e} BDE {:.1e} (< 1e-9); fixed point {}",
            errs[0], errs[1], errs[2], errs[3], if fixed { "holds" } else { "broken" }
        ),
    );
}

/// 8 easy 64×64 samples, 2 stages, batch 4, 200 iterations; learning rate
/// 0.1 because 1e-3 barely moves a fresh network in 200 steps.
fn overfit_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.optim.lr = 0.1;
    cfg
}

fn trainer(cfg: &RunConfig) -> Trainer<f32> {
    Trainer::new(cfg.clone(), load_training_data(cfg).unwrap()).unwrap()
}

fn overfit(out: &mut Vec<Outcome>) {
    let cfg = overfit_config();
    assert_eq!((cfg.data.count, cfg.data.extent, cfg.model.stages, cfg.run.batch_size), (8, 64, 2, 4));
    let t = Instant::now();
    let mut tr = trainer(&cfg);
    let initial = tr.dataset_loss(Mode::Train).unwrap();
    let rows = tr.run_until(200, |_| Ok(())).unwrap();
    let last = tr.dataset_loss(Mode::Train).unwrap();
    let iou = tr.mean_iou().unwrap();
    let el = t.elapsed();
    record(
        out,
        "overfit: loss below 0.1x initial, IoU above 0.9, under 5 min",
        last < 0.1 * initial && iou > 0.9 && el < Duration::from_secs(300),
        format!("loss {initial:.4} -> {last:.4} (ratio {:.3}), mean IoU {iou:.3}, {}", last / initial, secs(el)),
    );

    let losses: Vec<f64> = rows[..50].iter().map(|r| r.loss).collect();
    let ma: Vec<(usize, f64)> = (9..50).map(|i| (i, losses[i - 9..=i].iter().sum::<f64>() / 10.0)).collect();
    let rises: Vec<usize> = ma.windows(2).filter(|w| w[0].0 >= 20 && w[1].1 >= w[0].1).map(|w| w[1].0).collect();
    record(
        out,
        "first 50 losses finite, 10-step mean strictly falling after 20",
        losses.iter().all(|v| v.is_finite()) && rises.is_empty(),
        format!("moving average fails to fall at iterations {rises:?}"),
    );
}

fn ablation(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let mut wins = 0;
    let mut converged = true;
    let mut rows = Vec::new();
    for seed in 0..10 {
        let mut fin = [0.0; 2];
        for (i, sff) in [true, false].into_iter().enumerate() {
            let mut cfg = RunConfig::default();
            cfg.run.seed = seed;
            cfg.data.difficulty = "low-contrast".into();
            cfg.model.sff = sff;
            let mut tr = trainer(&cfg);
            let initial = tr.dataset_loss(Mode::Train).unwrap();
            tr.run_until(cfg.run.iterations, |_| Ok(())).unwrap();
            fin[i] = tr.dataset_loss(Mode::Train).unwrap();
            converged &= fin[i].is_finite() && fin[i] < initial;
        }
        if fin[0] <= fin[1] {
            wins += 1;
        }
        rows.push(format!("{:.3}/{:.3}", fin[0], fin[1]));
    }
    record(
        out,
        "fusion on beats fusion off in at least 7 of 10 seeds",
        wins >= 7 && converged,
        format!(
            "on <= off in {wins}/10, all runs reduce loss: {converged}; final on/off {}; {}",
            rows.join(" "),
            secs(t.elapsed())
        ),
    );
}

fn determinism(out: &mut Vec<Outcome>) {
    let mut cfg = overfit_config();
    cfg.run.iterations = 20;
    let run = |cfg: &RunConfig| -> Vec<TraceRow> { trainer(cfg).run_until(20, |_| Ok(())).unwrap() };
    let a = run(&cfg);
    let b = run(&cfg);
    let same = a.iter().zip(&b).all(|(x, y)| x.loss.to_bits() == y.loss.to_bits()) && a.len() == b.len();

    let mut full = trainer(&cfg);
    full.run_until(20, |_| Ok(())).unwrap();
    let mut first = trainer(&cfg);
    first.run_until(8, |_| Ok(())).unwrap();
    let bytes = first.checkpoint().unwrap().to_bytes().unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::<f32>::resume(cfg.clone(), load_training_data(&cfg).unwrap(), &ck).unwrap();
    let tail = resumed.run_until(20, |_| Ok(())).unwrap();
    let tail_same = tail.iter().zip(&a[8..]).all(|(x, y)| x.loss.to_bits() == y.loss.to_bits()) && tail.len() == 12;
    let params_same = full.net.params == resumed.net.params;
    record(
        out,
        "identical seeds identical traces, resume bit-exact",
        same && tail_same && params_same,
        format!("trace repeat {same}, resumed losses {tail_same}, resumed parameters {params_same} (f32, 8 + 12 steps)"),
    );
}

#[test]
fn acceptance() {
    let mut out = Vec::new();
    param_count(&mut out);
    receptive_field(&mut out);
    gridding(&mut out);
    gradients(&mut out);
    attention_mass(&mut out);
    fusion_identity(&mut out);
    metric_oracles(&mut out);
    overfit(&mut out);
    ablation(&mut out);
    determinism(&mut out);
    let failed: Vec<String> = out.iter().filter(|o| !o.pass).map(|o| format!("{}: {}", o.name, o.detail)).collect();
    println!("{} criteria, {} failed", out.len(), failed.len());
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
