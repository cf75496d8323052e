use std::path::Path;

use super::*;
use crate::model::{build_network, NetConfig};
use crate::params::ParamStore;

fn intensity_gap(s: &SegSample) -> f64 {
    let n = s.mask.len();
    let (mut inside, mut outside, mut ni) = (0.0, 0.0, 0usize);
    for i in 0..n {
        let v = (0..3).map(|c| s.image.data()[c * n + i]).sum::<f64>() / 3.0;
        if s.mask.data()[i] == 1.0 {
            inside += v;
            ni += 1;
        } else {
            outside += v;
        }
    }
    outside / (n - ni) as f64 - inside / ni as f64
}

#[test]
fn generator_is_deterministic_per_seed() {
    let a = synth_generate(4, 32, 11, Difficulty::Hairy).unwrap();
    let b = synth_generate(4, 32, 11, Difficulty::Hairy).unwrap();
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);
    let c = synth_generate(4, 32, 12, Difficulty::Hairy).unwrap();
    assert_ne!(a[0].image, c[0].image);
    // sample i does not depend on how many were requested
    let one = synth_generate(2, 32, 11, Difficulty::Hairy).unwrap();
    assert_eq!(one[1], a[1]);
}

#[test]
fn easy_lesions_are_at_least_point_three_darker() {
    for s in synth_generate(20, 64, 3, Difficulty::Easy).unwrap() {
        assert!(intensity_gap(&s) >= 0.3, "{}: {}", s.meta, intensity_gap(&s));
    }
}

#[test]
fn low_contrast_lesions_are_faint() {
    for s in synth_generate(20, 64, 4, Difficulty::LowContrast).unwrap() {
        let gap = intensity_gap(&s);
        assert!(gap > 0.0 && gap < 0.12, "{}: {gap}", s.meta);
    }
}

#[test]
fn every_difficulty_keeps_mask_fraction_in_range() {
    for d in Difficulty::ALL {
        for extent in [32, 64] {
            for s in synth_generate(10, extent, 5, d).unwrap() {
                let frac = s.mask.mean_all();
                assert!((0.02..=0.5).contains(&frac), "{d} {frac}");
                assert_eq!(s.image.shape(), &[3, extent, extent]);
                assert_eq!(s.mask.shape(), &[1, extent, extent]);
                assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
                assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}

#[test]
fn hair_adds_dark_strokes() {
    // strokes run past the lesion onto skin, which is never that dark
    let dark = |s: &SegSample| {
        let n = s.mask.len();
        (0..n)
            .filter(|&i| s.mask.data()[i] == 0.0 && (0..3).all(|c| s.image.data()[c * n + i] < 0.3))
            .count()
    };
    for s in synth_generate(5, 64, 6, Difficulty::Hairy).unwrap() {
        assert!(dark(&s) > 30, "{}", s.meta);
    }
    for s in synth_generate(5, 64, 6, Difficulty::Easy).unwrap() {
        assert_eq!(dark(&s), 0);
    }
}

#[test]
fn generator_rejects_bad_extents() {
    for e in [0, 24, 36, 100] {
        assert!(synth_generate(1, e, 0, Difficulty::Easy).is_err(), "{e}");
    }
}

#[test]
fn difficulty_names_roundtrip() {
    for d in Difficulty::ALL {
        assert_eq!(d.to_string().parse::<Difficulty>().unwrap(), d);
    }
    assert!("medium".parse::<Difficulty>().is_err());
}

fn p(name: &str) -> &Path {
    Path::new(name)
}

#[test]
fn ppm_header_arithmetic() {
    let mut bytes = b"P6 4 4 255\n".to_vec();
    bytes.extend((0..48).map(|i| i as u8));
    let t: Tensor<f64> = netpbm::decode(&bytes, p("x.ppm")).unwrap();
    assert_eq!(t.shape(), &[3, 4, 4]);
    // interleaved RGB: byte 3 is the red sample of pixel 1
    assert_eq!(t.at(&[0, 0, 1]), 3.0 / 255.0);
    assert_eq!(t.at(&[2, 3, 3]), 47.0 / 255.0);
}

#[test]
fn header_comments_and_whitespace() {
    let mut bytes = b"P5\n# made by hand\n2 # width\n1\n255\n".to_vec();
    bytes.extend([0, 255]);
    let t: Tensor<f64> = netpbm::decode(&bytes, p("x.pgm")).unwrap();
    assert_eq!(t.data(), &[0.0, 1.0]);
}

#[test]
fn malformed_netpbm_is_rejected() {
    let cases: [&[u8]; 6] = [
        b"P3 1 1 255\n\x00\x00\x00",
        b"P6 1 1 65535\n\x00\x00\x00\x00\x00\x00",
        b"P6 2 2 255\n\x00\x00\x00",
        b"P5 1 1 255",
        b"P5 1 x 255\n\x00",
        b"P5 0 1 255\n",
    ];
    for bytes in cases {
        let r: Result<Tensor<f64>> = netpbm::decode(bytes, p("bad"));
        assert!(matches!(r, Err(Error::Format { .. })), "{:?}", String::from_utf8_lossy(bytes));
    }
}

#[test]
fn image_roundtrip_is_within_half_a_level() {
    let mut rng = crate::rng::stream(1, crate::rng::Purpose::Probe, 0);
    let t = Tensor::<f64>::rand_uniform(vec![3, 5, 7], 0.0, 1.0, &mut rng);
    let back: Tensor<f64> = netpbm::decode(&netpbm::encode(&t).unwrap(), p("x")).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert!(back.max_abs_diff(&t) <= 1.0 / 510.0);
    let g = Tensor::<f64>::rand_uniform(vec![1, 3, 2], 0.0, 1.0, &mut rng);
    let bytes = netpbm::encode(&g).unwrap();
    assert!(bytes.starts_with(b"P5\n2 3\n255\n"));
    assert!(netpbm::encode(&Tensor::<f64>::zeros(vec![2, 3, 3])).is_err());
}

#[test]
fn masks_store_as_zero_or_full() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgm");
    let m = Tensor::<f64>::from_f64(vec![1, 1, 4], &[0.0, 0.7, 0.2, 1.0]).unwrap();
    save_mask(&m, &path).unwrap();
    let raw = std::fs::read(&path).unwrap();
    assert_eq!(&raw[raw.len() - 4..], &[0, 255, 0, 255]);
    let back: Tensor<f64> = load_mask(&path).unwrap();
    assert_eq!(back.data(), &[0.0, 1.0, 0.0, 1.0]);
    let rgb = dir.path().join("c.ppm");
    save_image(&Tensor::<f64>::zeros(vec![3, 2, 2]), &rgb).unwrap();
    assert!(load_mask::<f64>(&rgb).is_err());
}

fn tiny_store(seed: u64) -> ParamStore<f32> {
    build_network::<f32>(&NetConfig::tiny(8, 32), seed).unwrap()
}

#[test]
fn empty_checkpoint_is_ten_bytes() {
    let bytes = Checkpoint::new().to_bytes().unwrap();
    assert_eq!(bytes.len(), 10);
    assert_eq!(&bytes[..4], b"DSF1");
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), Checkpoint::new());
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let mut store = tiny_store(1);
    store.norm_mut("enc0.bn").unwrap().running_mean[0] = 0.1234567;
    let bytes = Checkpoint::from_store(&store).unwrap().to_bytes().unwrap();
    let mut fresh = tiny_store(2);
    Checkpoint::from_bytes(&bytes).unwrap().restore_store(&mut fresh).unwrap();
    for ((na, a), (nb, b)) in store.iter().zip(fresh.iter()) {
        assert_eq!(na, nb);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{na}");
    }
    for ((_, a), (_, b)) in store.norms().zip(fresh.norms()) {
        assert_eq!(a.running_mean, b.running_mean);
        assert_eq!(a.running_var, b.running_var);
    }
}

#[test]
fn checkpoint_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = Checkpoint::from_store(&tiny_store(3)).unwrap();
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    assert!(matches!(Checkpoint::load(dir.path().join("none")), Err(Error::Io { .. })));
}

#[test]
fn corrupt_checkpoints_fail_whole() {
    let mut ck = Checkpoint::new();
    ck.insert("a", &Tensor::<f32>::ones(vec![2, 3])).unwrap();
    ck.insert("b", &Tensor::<f32>::scalar(2.5)).unwrap();
    assert!(ck.insert("a", &Tensor::<f32>::ones(vec![1])).is_err());
    let bytes = ck.to_bytes().unwrap();

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&magic).is_err());
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(Checkpoint::from_bytes(&version).is_err());
    for cut in 0..bytes.len() {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "prefix {cut}");
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::from_bytes(&trailing).is_err());
    // rename entry "b" to "a"
    let mut dup = bytes.clone();
    let pos = dup.windows(3).position(|w| w == [1, 0, b'b']).unwrap();
    dup[pos + 2] = b'a';
    assert!(Checkpoint::from_bytes(&dup).is_err());
}

#[test]
fn restore_checks_everything_before_writing() {
    let src = tiny_store(4);
    let mut ck = Checkpoint::new();
    for (name, t) in src.iter().take(3) {
        ck.insert(name, t).unwrap();
    }
    let mut dst = tiny_store(5);
    let before = dst.clone();
    assert!(ck.restore_store(&mut dst).is_err());
    assert_eq!(dst, before);
}

#[test]
fn batches_and_dataset_directories() {
    let samples = synth_generate(3, 32, 7, Difficulty::Easy).unwrap();
    let (x, g) = stack_batch::<f32>(&samples, &[2, 0]).unwrap();
    assert_eq!(x.shape(), &[2, 3, 32, 32]);
    assert_eq!(g.shape(), &[2, 1, 32, 32]);
    assert_eq!(x.data()[0], samples[2].image.data()[0] as f32);
    assert!(stack_batch::<f32>(&samples, &[]).is_err());
    assert!(stack_batch::<f32>(&samples, &[3]).is_err());

    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &samples).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    let ids: Vec<&str> = loaded.iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(ids, ["0000", "0001", "0002"]);
    for ((_, l), s) in loaded.iter().zip(&samples) {
        assert_eq!(l.mask, s.mask);
        assert!(l.image.max_abs_diff(&s.image) <= 1.0 / 510.0);
    }
}

#[test]
fn saved_streams_are_identical_for_equal_seeds() {
    let bytes = |seed| {
        synth_generate(2, 32, seed, Difficulty::MultiLesion)
            .unwrap()
            .iter()
            .flat_map(|s| {
                let mut b = netpbm::encode(&s.image).unwrap();
                b.extend(netpbm::encode_mask(&s.mask).unwrap());
                b
            })
            .collect::<Vec<u8>>()
    };
    assert_eq!(bytes(9), bytes(9));
    assert_ne!(bytes(9), bytes(10));
}
