use indexmap::IndexMap;

use super::*;
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn one_param(p: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::full(vec![1], p)).unwrap();
    s
}

fn grad(g: f64) -> IndexMap<String, Tensor<f64>> {
    [("w".to_string(), Tensor::full(vec![1], g))].into_iter().collect()
}

fn w(s: &ParamStore<f64>) -> f64 {
    s.get("w").unwrap().data()[0]
}

#[test]
fn vanilla_step() {
    let mut p = one_param(0.0);
    let mut st = OptimState::new(&p, 0.0, 0.0).unwrap();
    sgd_step(&mut p, &grad(1.0), &mut st, 0.1).unwrap();
    assert_eq!(w(&p), -0.1);
}

#[test]
fn momentum_recurrence() {
    let mut p = one_param(0.0);
    let mut st = OptimState::new(&p, 0.9, 0.0).unwrap();
    let mut vs = Vec::new();
    for _ in 0..2 {
        sgd_step(&mut p, &grad(1.0), &mut st, 0.01).unwrap();
        vs.push(st.velocity["w"].data()[0]);
    }
    assert_eq!(vs, [1.0, 1.9]);
    assert!((w(&p) - -0.029).abs() < 1e-15);
}

#[test]
fn weight_decay_shrinks_geometrically() {
    let mut p = one_param(2.0);
    let mut st = OptimState::new(&p, 0.0, 5e-4).unwrap();
    for k in 1..=3 {
        sgd_step(&mut p, &grad(0.0), &mut st, 0.1).unwrap();
        assert!((w(&p) - 2.0 * (1.0 - 0.1 * 5e-4f64).powi(k)).abs() < 1e-15);
    }
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let mut p = one_param(0.7);
    let mut st = OptimState::new(&p, 0.9, 0.0).unwrap();
    sgd_step(&mut p, &grad(0.0), &mut st, 0.5).unwrap();
    assert_eq!(w(&p), 0.7);
}

#[test]
fn bad_gradients_leave_parameters_untouched() {
    let mut p = one_param(0.7);
    p.insert("v", Tensor::zeros(vec![2])).unwrap();
    let mut st = OptimState::new(&p, 0.9, 0.0).unwrap();
    let mut g = grad(1.0);
    g.insert("v".into(), Tensor::from_f64(vec![2], &[1.0, f64::NAN]).unwrap());
    assert!(matches!(sgd_step(&mut p, &g, &mut st, 0.1), Err(Error::Grad(_))));
    assert_eq!(w(&p), 0.7);
    let mut g = grad(1.0);
    g.insert("v".into(), Tensor::zeros(vec![3]));
    assert!(matches!(sgd_step(&mut p, &g, &mut st, 0.1), Err(Error::Shape(_))));
    assert!(sgd_step(&mut p, &grad(1.0), &mut st, 0.0).is_err());
    assert!(OptimState::new(&p, 1.0, 0.0).is_err());
}

#[test]
fn schedule_examples() {
    let s = LrSchedule::default();
    assert_eq!(s.lr_at(0), 1e-3);
    assert_eq!(s.lr_at(99), 1e-3);
    assert!((s.lr_at(150) - 1e-5).abs() < 1e-20);
    assert!((s.lr_at(250) - 1e-7).abs() < 1e-22);
    let single = LrSchedule {
        decay: Decay::Single,
        ..LrSchedule::default()
    };
    assert!((single.lr_at(150) - 1e-5).abs() < 1e-20);
    assert!((single.lr_at(250) - 1e-5).abs() < 1e-20);
    for sched in [s, single] {
        let lrs: Vec<f64> = (0..=300).map(|e| sched.lr_at(e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.iter().all(|&v| v > 0.0));
    }
    assert!(LrSchedule {
        milestones: vec![200, 100],
        ..LrSchedule::default()
    }
    .validate()
    .is_err());
}

#[test]
fn config_defaults_and_unknown_keys() {
    let cfg = RunConfig::from_toml("").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.run.batch_size, 4);
    assert_eq!(cfg.optim.milestones, [100, 200]);

    let text = "[run]\nseed = 3\niterations = 5\n\n[model]\nsff = false\n\n[optim]\ndecay = \"single\"\n";
    let cfg = RunConfig::from_toml(text).unwrap();
    assert_eq!((cfg.run.seed, cfg.run.iterations), (3, 5));
    assert!(!cfg.net_config().sff);
    assert_eq!(cfg.optim.decay, Decay::Single);
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);

    for bad in [
        "[run]\nsed = 3\n",
        "[extras]\na = 1\n",
        "top = 1\n",
        "[run]\nbatch_size = 1\n",
        "[data]\ndifficulty = \"medium\"\n",
        "[model]\nstages = 4\n",
        "[run]\nprecision = \"f16\"\n",
    ] {
        assert!(matches!(RunConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
    }
}

fn small(seed: u64, iterations: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.seed = seed;
    cfg.run.iterations = iterations;
    cfg.run.batch_size = 2;
    cfg.data.count = 5;
    cfg.data.extent = 32;
    cfg.model.width = 8;
    cfg.optim.lr = 0.05;
    cfg
}

fn trainer<T: crate::Real>(cfg: &RunConfig) -> Trainer<T> {
    Trainer::new(cfg.clone(), load_training_data(cfg).unwrap()).unwrap()
}

#[test]
fn every_epoch_visits_each_sample_once() {
    let tr = trainer::<f32>(&small(1, 1));
    // five samples, batches of two: positions 0..10 are two epochs
    let seen: Vec<usize> = (0..5).flat_map(|t| tr.batch_indices(t)).collect();
    for epoch in seen.chunks(5) {
        let mut e = epoch.to_vec();
        e.sort();
        assert_eq!(e, [0, 1, 2, 3, 4]);
    }
    assert_ne!(&seen[..5], &seen[5..]);
    assert_eq!(tr.epoch_of(2), 0);
    assert_eq!(tr.epoch_of(3), 1);
}

#[test]
fn equal_seeds_give_identical_traces() {
    let cfg = small(2, 4);
    let mut a = trainer::<f32>(&cfg);
    let mut b = trainer::<f32>(&cfg);
    let ra = a.run_until(4, |_| Ok(())).unwrap();
    let rb = b.run_until(4, |_| Ok(())).unwrap();
    assert_eq!(ra, rb);
    let mut c = trainer::<f32>(&small(3, 4));
    assert_ne!(c.run_until(4, |_| Ok(())).unwrap(), ra);
}

#[test]
fn resume_matches_uninterrupted_training_bitwise() {
    let cfg = small(4, 7);
    let mut full = trainer::<f32>(&cfg);
    let rows = full.run_until(7, |_| Ok(())).unwrap();

    let mut first = trainer::<f32>(&cfg);
    first.run_until(3, |_| Ok(())).unwrap();
    let bytes = first.checkpoint().unwrap().to_bytes().unwrap();
    let ck = crate::data::Checkpoint::from_bytes(&bytes).unwrap();
    let mut second = Trainer::<f32>::resume(cfg.clone(), load_training_data(&cfg).unwrap(), &ck).unwrap();
    assert_eq!(second.iteration, 3);
    let tail = second.run_until(7, |_| Ok(())).unwrap();
    assert_eq!(&rows[3..], &tail[..]);
    assert_eq!(full.net.params, second.net.params);
    assert_eq!(full.optim, second.optim);
}

#[test]
fn loss_falls_on_a_small_overfit() {
    let cfg = small(5, 30);
    let mut tr = trainer::<f32>(&cfg);
    let before = tr.dataset_loss(Mode::Train).unwrap();
    let rows = tr.run_until(30, |_| Ok(())).unwrap();
    assert!(rows.iter().all(|r| r.loss.is_finite() && r.lr == 0.05));
    let after = tr.dataset_loss(Mode::Train).unwrap();
    assert!(after < before, "{before} -> {after}");
    // dataset_loss must not disturb the running statistics
    let snapshot = tr.net.params.clone();
    tr.dataset_loss(Mode::Train).unwrap();
    assert_eq!(snapshot, tr.net.params);
}

#[test]
fn train_run_writes_trace_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(6, 4);
    cfg.run.checkpoint_every = 2;
    cfg.output.dir = dir.path().join("out");
    let summary = train_run::<f32>(&cfg, None).unwrap();
    assert_eq!(summary.iterations, 4);
    let out = &cfg.output.dir;
    for f in [FINAL_CKPT, BEST_CKPT, CONFIG_FILE, "iter_2.ckpt", "iter_4.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let trace = read_trace(&out.join(TRACE_FILE)).unwrap();
    assert_eq!(trace.iter().map(|r| r.iteration).collect::<Vec<_>>(), [0, 1, 2, 3]);
    assert_eq!(Some(trace[0].loss), summary.first_loss);
    assert_eq!(RunConfig::load(out.join(CONFIG_FILE)).unwrap(), cfg);

    // resuming from iteration 2 to 6 appends rows 2..6
    let mut more = cfg.clone();
    more.run.iterations = 6;
    more.output.dir = dir.path().join("resumed");
    std::fs::create_dir_all(&more.output.dir).unwrap();
    std::fs::copy(out.join(TRACE_FILE), more.output.dir.join(TRACE_FILE)).unwrap();
    train_run::<f32>(&more, Some(&out.join("iter_2.ckpt"))).unwrap();
    let resumed = read_trace(&more.output.dir.join(TRACE_FILE)).unwrap();
    assert_eq!(resumed.iter().map(|r| r.iteration).collect::<Vec<_>>(), [0, 1, 2, 3, 2, 3, 4, 5]);
    assert_eq!(resumed[2..4], trace[2..4]);
}

#[test]
fn divergence_aborts_with_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(7, 50);
    cfg.optim.lr = 1e30;
    cfg.output.dir = dir.path().to_path_buf();
    let err = train_run::<f32>(&cfg, None).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_) | Error::Grad(_)), "{err}");
    let ck = crate::data::Checkpoint::load(dir.path().join(LAST_GOOD_CKPT)).unwrap();
    assert!(ck.names().all(|n| ck.get(n).unwrap().all_finite()));
}

#[test]
fn samples_must_match_the_model_extent() {
    let cfg = small(8, 1);
    let samples = crate::data::synth_generate(4, 64, 0, crate::data::Difficulty::Easy).unwrap();
    assert!(Trainer::<f32>::new(cfg.clone(), samples).is_err());
    let few = crate::data::synth_generate(1, 32, 0, crate::data::Difficulty::Easy).unwrap();
    assert!(Trainer::<f32>::new(cfg, few).is_err());
}

#[test]
fn evaluation_of_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(9, 3);
    cfg.output.dir = dir.path().to_path_buf();
    train_run::<f32>(&cfg, None).unwrap();
    let ck = crate::data::Checkpoint::load(dir.path().join(FINAL_CKPT)).unwrap();
    let mut net = load_model::<f32>(&cfg, &ck).unwrap();
    let samples: Vec<(String, crate::data::SegSample)> = load_training_data(&cfg)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("s{i}"), s))
        .collect();
    let thresholds = crate::metrics::uniform_thresholds(9);
    let out = evaluate_samples(&mut net, &samples, &thresholds).unwrap();
    assert_eq!(out.rows.len(), 5);
    assert_eq!(out.pr.len(), 9);
    for (_, r) in &out.rows {
        assert!((0.0..=1.0).contains(&r.f_score) && (0.0..=1.0).contains(&r.mae));
    }
    // single-image prediction equals the batched eval-mode forward
    let one = predict_image(&mut net, &samples[0].1.image).unwrap();
    let (x, _) = crate::data::stack_batch::<f32>(&[samples[0].1.clone()], &[0]).unwrap();
    assert_eq!(one, net.predict(&x).unwrap().cast::<f64>().reshape(vec![1, 32, 32]).unwrap());
    assert!(predict_image(&mut net, &Tensor::zeros(vec![1, 32, 32])).is_err());
}
