use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::finite_diff_check_many;
use crate::nn::Mode;
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

#[test]
fn downsample_examples() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(vec![1, 2, 8, 8], 0.7));
    for lvl in multiscale_downsample(&mut tape, c, 3).unwrap() {
        assert!(tape.value(lvl).data().iter().all(|&v: &f64| (v - 0.7).abs() < 1e-15));
    }

    let board: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
    let cb = tape.constant(t(&[1, 1, 4, 4], &board));
    let l = multiscale_downsample(&mut tape, cb, 1).unwrap();
    assert_eq!(tape.value(l[0]).data(), &[0.5; 4]);

    let big = tape.constant(Tensor::zeros(vec![1, 1, 32, 32]));
    let l = multiscale_downsample(&mut tape, big, 3).unwrap();
    let sides: Vec<usize> = l.iter().map(|&v| tape.shape(v)[2]).collect();
    assert_eq!(sides, [16, 8, 4]);

    let odd = tape.constant(Tensor::zeros(vec![1, 1, 13, 9]));
    let l = multiscale_downsample(&mut tape, odd, 3).unwrap();
    let ext: Vec<(usize, usize)> = l.iter().map(|&v| (tape.shape(v)[2], tape.shape(v)[3])).collect();
    assert_eq!(ext, [(7, 5), (4, 3), (2, 2)]);

    assert!(multiscale_downsample(&mut tape, big, 0).is_err());
    assert!(multiscale_downsample(&mut tape, big, 6).is_err());
}

#[test]
fn attention_map_examples() {
    let mut tape = Tape::new();
    let w = tape.constant(t(&[1, 2, 1, 1], &[0.5, -1.0]));
    let c = tape.constant(Tensor::full(vec![1, 2, 3, 5], 2.0));
    let m = attention_map(&mut tape, c, w).unwrap();
    assert!(tape.value(m).data().iter().all(|&v| (v - 1.0 / 15.0).abs() < 1e-15));

    let one = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let x = tape.constant(t(&[1, 1, 1, 2], &[3f64.ln(), 0.0]));
    let m = attention_map(&mut tape, x, one).unwrap();
    assert!(tape.value(m).max_abs_diff(&t(&[1, 1, 1, 2], &[0.75, 0.25])) < 1e-15);

    let bad = tape.constant(Tensor::ones(vec![2, 2, 1, 1]));
    assert!(attention_map(&mut tape, c, bad).is_err());
    let wrong_c = tape.constant(Tensor::ones(vec![1, 3, 1, 1]));
    assert!(attention_map(&mut tape, c, wrong_c).is_err());
}

#[test]
fn attention_maps_are_distributions() {
    for seed in 0..20 {
        let mut rng = stream(seed, Purpose::Probe, 0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(vec![2, 4, 8, 8], 2.0, &mut rng));
        let w = tape.constant(Tensor::randn(vec![1, 4, 1, 1], 1.0, &mut rng));
        let m = attention_map(&mut tape, x, w).unwrap();
        for b in 0..2 {
            let p = tape.value(m).plane(b, 0);
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn uniform_attention_on_constant_features() {
    let (h, w, c) = (4usize, 6usize, 1.5);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(vec![1, 3, h, w], c));
    let u = tape.constant(Tensor::full(vec![1, 1, h, w], 1.0 / (h * w) as f64));
    let y = attention_fuse(&mut tape, x, &[u]).unwrap();
    let want = c * (1.0 + 1.0 / (h * w) as f64);
    assert!(tape.value(y).data().iter().all(|&v| (v - want).abs() < 1e-14));

    let zero = tape.constant(Tensor::zeros(vec![1, 1, 2, 3]));
    let y = attention_fuse(&mut tape, x, &[zero]).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn fuse_minus_input_is_attention_term() {
    for seed in 0..10 {
        let mut rng = stream(seed, Purpose::Probe, 1);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::randn(vec![2, 3, 8, 8], 1.0, &mut rng));
        let maps: Vec<Var> = [4, 2, 1]
            .iter()
            .map(|&s| tape.constant(Tensor::rand_uniform(vec![2, 1, s, s], 0.0, 1.0, &mut rng)))
            .collect();
        let b = attention_fuse(&mut tape, x, &maps).unwrap();
        let a = attention_term(&mut tape, x, &maps).unwrap();
        let diff = tape.value(b).zip_map(tape.value(x), |p, q| p - q).unwrap();
        assert!(diff.max_abs_diff(tape.value(a)) < 1e-12);
    }
}

#[test]
fn fuse_rejects_mismatched_maps() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![2, 3, 4, 4]));
    let two_ch = tape.constant(Tensor::zeros(vec![2, 2, 2, 2]));
    let one_b = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
    assert!(attention_fuse(&mut tape, x, &[two_ch]).is_err());
    assert!(attention_fuse(&mut tape, x, &[one_b]).is_err());
    assert!(attention_fuse(&mut tape, x, &[]).is_err());
}

#[test]
fn gate_examples() {
    let mut rng = stream(3, Purpose::Probe, 0);
    let ft = Tensor::<f64>::randn(vec![1, 4, 5, 5], 1.0, &mut rng);
    let mut tape = Tape::new();
    let f = tape.constant(ft.clone());
    let w1 = tape.constant(Tensor::zeros(vec![4, 1, 1, 1]));
    let w2 = tape.constant(Tensor::zeros(vec![1, 4, 1, 1]));
    let w3 = tape.constant(Tensor::zeros(vec![1, 4, 1, 1]));
    let half = ft.scale(0.5);
    let c = channel_weight(&mut tape, f, w1, w2).unwrap();
    assert!(tape.value(c).max_abs_diff(&half) < 1e-15);
    let s = spatial_weight(&mut tape, f, w3).unwrap();
    assert!(tape.value(s).max_abs_diff(&half) < 1e-15);
    let e = enhance(&mut tape, f, w1, w2, w3).unwrap();
    assert!(tape.value(e).max_abs_diff(&ft) < 1e-15);

    let zero = tape.constant(Tensor::zeros(vec![1, 4, 5, 5]));
    let e = enhance(&mut tape, zero, w1, w2, w3).unwrap();
    assert!(tape.value(e).data().iter().all(|&v| v == 0.0));

    let single = tape.constant(ft.reshape(vec![4, 1, 5, 5]).unwrap());
    let unit = tape.constant(Tensor::ones(vec![1, 1, 1, 1]));
    let s = spatial_weight(&mut tape, single, unit).unwrap();
    let want = ft.map(|v| v / (1.0 + (-v).exp()));
    assert!(tape.value(s).data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
fn gates_are_bounded_by_input() {
    for seed in 0..10 {
        let mut rng = stream(seed, Purpose::Probe, 4);
        let mut tape = Tape::new();
        let ft = Tensor::<f64>::randn(vec![2, 8, 4, 4], 3.0, &mut rng);
        let f = tape.constant(ft.clone());
        let w1 = tape.constant(Tensor::randn(vec![8, 2, 1, 1], 2.0, &mut rng));
        let w2 = tape.constant(Tensor::randn(vec![2, 8, 1, 1], 2.0, &mut rng));
        let w3 = tape.constant(Tensor::randn(vec![1, 8, 1, 1], 2.0, &mut rng));
        let c = channel_weight(&mut tape, f, w1, w2).unwrap();
        let s = spatial_weight(&mut tape, f, w3).unwrap();
        let e = enhance(&mut tape, f, w1, w2, w3).unwrap();
        for i in 0..ft.len() {
            let x = ft.data()[i].abs();
            assert!(tape.value(c).data()[i].abs() <= x);
            assert!(tape.value(s).data()[i].abs() <= x);
            assert!(tape.value(e).data()[i].abs() <= 2.0 * x);
        }
    }
}

#[test]
fn channel_gate_reads_the_channel_mean() {
    // with W2 = I, W1 = I the gate on a constant channel c is σ(relu(c))
    let mut tape = Tape::new();
    let f = tape.constant(t(&[1, 2, 1, 2], &[1.0, 1.0, -2.0, -2.0]));
    let eye = tape.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
    let y = channel_weight(&mut tape, f, eye, eye).unwrap();
    let s1 = 1.0 / (1.0 + (-1f64).exp());
    let want = t(&[1, 2, 1, 2], &[s1, s1, -1.0, -1.0]);
    assert!(tape.value(y).max_abs_diff(&want) < 1e-15);
}

fn pyramid_store(cfg: &PyramidConfig, seed: u64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    init_pyramid(&mut s, "att", cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    s
}

#[test]
fn pyramid_maps_have_level_extents_and_unit_mass() {
    let cfg = PyramidConfig::new(8);
    let mut store = pyramid_store(&cfg, 1);
    let mut rng = stream(1, Purpose::Probe, 5);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(vec![2, 8, 16, 12], 1.0, &mut rng));
    let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Train);
    let tr = pyramid_forward(&mut ctx, x, &cfg, "att").unwrap();
    assert_eq!(tape.shape(tr.out), &[2, 8, 16, 12]);
    for (i, &m) in tr.maps.iter().enumerate() {
        let div = 1 << (i + 1);
        assert_eq!(tape.shape(m), &[2, 1, 16usize.div_ceil(div), 12usize.div_ceil(div)]);
        for b in 0..2 {
            let p = tape.value(m).plane(b, 0);
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

#[test]
fn attention_ops_pass_gradient_check() {
    let cases: Vec<(&str, Vec<Vec<usize>>, OpFn)> = vec![
        (
            "attention_map",
            vec![vec![1, 4, 8, 8], vec![1, 4, 1, 1]],
            Box::new(|tp, v| attention_map(tp, v[0], v[1])),
        ),
        (
            "attention_fuse",
            vec![vec![1, 4, 8, 8], vec![1, 1, 4, 4], vec![1, 1, 2, 2]],
            Box::new(|tp, v| attention_fuse(tp, v[0], &v[1..])),
        ),
        (
            "downsample",
            vec![vec![1, 4, 8, 8]],
            Box::new(|tp, v| {
                let l = multiscale_downsample(tp, v[0], 3)?;
                let a = tp.sum(l[0])?;
                let b = tp.sum(l[2])?;
                let b = tp.scale(b, 3.0)?;
                let s = tp.mul(a, b)?;
                tp.reshape(s, &[1, 1, 1, 1])
            }),
        ),
        (
            "channel_weight",
            vec![vec![1, 4, 8, 8], vec![4, 2, 1, 1], vec![2, 4, 1, 1]],
            Box::new(|tp, v| channel_weight(tp, v[0], v[1], v[2])),
        ),
        (
            "spatial_weight",
            vec![vec![1, 4, 8, 8], vec![1, 4, 1, 1]],
            Box::new(|tp, v| spatial_weight(tp, v[0], v[1])),
        ),
        (
            "enhance",
            vec![vec![1, 4, 8, 8], vec![4, 2, 1, 1], vec![2, 4, 1, 1], vec![1, 4, 1, 1]],
            Box::new(|tp, v| enhance(tp, v[0], v[1], v[2], v[3])),
        ),
    ];
    for (name, shapes, f) in &cases {
        for seed in 0..10u64 {
            let mut rng = stream(seed, Purpose::Probe, 6);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s.clone(), 1.0, &mut rng)).collect();
            let report = finite_diff_check_many(
                |tp, v| {
                    let y = f(tp, v)?;
                    let mut r = stream(seed, Purpose::Probe, 7);
                    let p = tp.constant(Tensor::randn(tp.shape(y).to_vec(), 1.0, &mut r));
                    let m = tp.mul(y, p)?;
                    tp.sum(m)
                },
                &inputs,
                1e-3,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn pyramid_gradient_check() {
    let cfg = PyramidConfig {
        levels: 2,
        ..PyramidConfig::new(4)
    };
    for seed in 0..3 {
        let store = pyramid_store(&cfg, seed);
        let names: Vec<String> = store.names().map(String::from).collect();
        let mut rng = stream(seed, Purpose::Probe, 8);
        let mut inputs = vec![Tensor::randn(vec![2, 4, 8, 8], 1.0, &mut rng)];
        for n in &names {
            let p = store.get(n).unwrap();
            let noise = Tensor::randn(p.shape().to_vec(), 0.1, &mut rng);
            inputs.push(p.zip_map(&noise, |a, b| a + b).unwrap());
        }
        let probe = Tensor::randn(vec![2, 4, 8, 8], 1.0, &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let report = finite_diff_check_many(
                |tape, v| {
                    let mut s = store.clone();
                    let mut ctx = Ctx::new(tape, &mut s, mode);
                    for (n, &var) in names.iter().zip(&v[1..]) {
                        ctx.bind(n, var)?;
                    }
                    let y = pyramid_forward(&mut ctx, v[0], &cfg, "att")?.out;
                    let r = tape.constant(probe.clone());
                    let m = tape.mul(y, r)?;
                    tape.sum(m)
                },
                &inputs,
                1e-3,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{mode:?} seed {seed}: {report:?}");
        }
    }
}
