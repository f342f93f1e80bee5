use super::*;
use crate::rng::seeded;

fn class_mean(s: &SegSample, class: u8) -> Option<f64> {
    let m = s.mask.as_ref().unwrap();
    let vals: Vec<f64> =
        m.labels.iter().zip(s.image.data()).filter(|(l, _)| **l == class).map(|(_, v)| *v as f64).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[test]
fn generator_uses_background_and_three_foreground_classes() {
    let samples = generate_synthetic(100, 32, 6, 0).unwrap();
    let good = samples
        .iter()
        .filter(|s| {
            let seen = s.mask.as_ref().unwrap().classes_present(6);
            seen[0] && seen[1..].iter().filter(|&&b| b).count() >= 3
        })
        .count();
    assert!(good >= 95, "{good}/100");
}

#[test]
fn generator_is_deterministic() {
    assert_eq!(generate_synthetic(5, 32, 6, 9).unwrap(), generate_synthetic(5, 32, 6, 9).unwrap());
    assert_ne!(generate_synthetic(1, 32, 6, 9).unwrap(), generate_synthetic(1, 32, 6, 10).unwrap());
    assert_eq!(generate_lunglike(3, 32, 4).unwrap(), generate_lunglike(3, 32, 4).unwrap());
}

#[test]
fn class_intensities_are_ordered() {
    let samples = generate_synthetic(200, 32, 6, 1).unwrap();
    let mut checked = 0;
    let mut ordered = 0;
    for s in &samples {
        if let (Some(p), Some(d), Some(e)) = (class_mean(s, PULP), class_mean(s, DENTINE), class_mean(s, ENAMEL)) {
            checked += 1;
            if p < d && d < e {
                ordered += 1;
            }
        }
    }
    assert!(checked >= 150, "{checked}");
    assert!(ordered as f64 >= 0.99 * checked as f64, "{ordered}/{checked}");
}

#[test]
fn images_are_quantized_and_in_range() {
    for s in generate_synthetic(4, 32, 6, 2).unwrap().iter().chain(&generate_lunglike(4, 32, 2).unwrap()) {
        assert_eq!(s.image.shape(), &[1, 32, 32]);
        for &v in s.image.data() {
            assert!((-1.0..=1.0).contains(&v));
            let q = (v + 1.0) * 127.5;
            assert!((q - q.round()).abs() < 1e-3);
        }
    }
}

#[test]
fn lunglike_has_four_classes() {
    let samples = generate_lunglike(20, 32, 3).unwrap();
    for s in &samples {
        let seen = s.mask.as_ref().unwrap().classes_present(4);
        assert!(seen.iter().all(|&b| b), "{seen:?}");
        assert!(s.mask.as_ref().unwrap().labels.iter().all(|&l| l < 4));
    }
}

#[test]
fn normalize_examples() {
    let raw = Tensor::from_vec(&[3], vec![0.0f32, 255.0, 127.5]).unwrap();
    assert_eq!(normalize(&raw).unwrap().data(), &[-1.0, 1.0, 0.0]);
    let v = normalize(&Tensor::scalar(64.0)).unwrap().item().unwrap();
    assert!((v - (-0.4980)).abs() < 1e-4);
    assert!(matches!(normalize(&Tensor::scalar(256.0)), Err(crate::Error::Contract(_))));
    assert!(matches!(normalize(&Tensor::scalar(-0.5)), Err(crate::Error::Contract(_))));
}

#[test]
fn identity_affine_is_a_no_op() {
    let s = &generate_synthetic(1, 32, 6, 4).unwrap()[0];
    let out = apply_affine(s, &AffineParams::identity());
    assert_eq!(out.mask, s.mask);
    for (a, b) in out.image.data().iter().zip(s.image.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn rotation_round_trip_keeps_interior_mask() {
    let s = &generate_synthetic(1, 32, 6, 5).unwrap()[0];
    for theta in [17.0, 45.0, 90.0, 133.0] {
        let fwd = AffineParams { rotation: theta, ..AffineParams::identity() };
        let back = AffineParams { rotation: -theta, ..AffineParams::identity() };
        let out = apply_affine(&apply_affine(s, &fwd), &back);
        let (a, b) = (&out.mask.as_ref().unwrap().labels, &s.mask.as_ref().unwrap().labels);
        // Foreground IoU on the disc that stays inside the frame under any rotation.
        let c = 15.5f64;
        let (mut inter, mut union) = (0usize, 0usize);
        for y in 0..32 {
            for x in 0..32 {
                if ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt() > 13.0 {
                    continue;
                }
                let (p, g) = (a[y * 32 + x] != 0, b[y * 32 + x] != 0);
                inter += (p && g) as usize;
                union += (p || g) as usize;
            }
        }
        let iou = inter as f64 / union as f64;
        assert!(iou > 0.95, "theta {theta}: {iou}");
    }
}

#[test]
fn affine_introduces_no_new_classes() {
    let mut rng = seeded(6);
    for s in generate_synthetic(10, 32, 6, 6).unwrap() {
        let before = s.mask.as_ref().unwrap().classes_present(6);
        let out = random_affine(&s, &mut rng);
        let after = out.mask.as_ref().unwrap().classes_present(6);
        for c in 1..6 {
            assert!(!after[c] || before[c]);
        }
        assert!(out.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn one_hot_channels_follow_the_mask() {
    let mut rng = seeded(7);
    let mut agree = 0usize;
    let mut total = 0usize;
    for s in generate_synthetic(5, 32, 6, 7).unwrap() {
        let p = sample_affine(&mut rng);
        let warped = apply_affine(&s, &p);
        let labels = &s.mask.as_ref().unwrap().labels;
        // Warp each one-hot channel as an image (in [-1, 1]) and take the argmax.
        // Background is skipped: its out-of-frame fill differs from the image fill.
        for c in 1..6u8 {
            let img = Tensor::from_vec(&[1, 32, 32], labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect())
                .unwrap();
            let one = SegSample { id: String::new(), image: img, mask: None };
            let channel = apply_affine(&one, &p).image;
            for (v, &l) in channel.data().iter().zip(&warped.mask.as_ref().unwrap().labels) {
                total += 1;
                agree += ((*v > 0.0) == (l == c)) as usize;
            }
        }
    }
    assert!(agree as f64 > 0.99 * total as f64, "{agree}/{total}");
}

#[test]
fn pgm_round_trip_and_errors() {
    let px: Vec<u8> = (0..12).map(|v| v * 20).collect();
    let mut buf = Vec::new();
    write_pgm(&mut buf, 4, 3, &px).unwrap();
    assert_eq!(read_pgm(&buf).unwrap(), (4, 3, px.clone()));
    let commented = [b"P5\n# c\n4 3\n255\n".as_slice(), &px].concat();
    assert_eq!(read_pgm(&commented).unwrap().2, px);
    assert!(matches!(read_pgm(b"P2\n1 1\n255\n0"), Err(crate::Error::Format(_))));
    assert!(matches!(read_pgm(b"P5\n2 2\n65535\n"), Err(crate::Error::Format(_))));
    assert!(matches!(read_pgm(&buf[..buf.len() - 1]), Err(crate::Error::Format(_))));
    assert!(matches!(read_pgm(b"P5\nx 2\n255\n"), Err(crate::Error::Format(_))));
}

#[test]
fn dataset_round_trip() {
    let spec = BenchmarkSpec { n_pretrain: 6, n_train: 3, n_val: 2, n_test: 4, size: 16 };
    let data = make_benchmark(DataKind::Bitewing, &spec, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &data).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, data);
    let first = std::fs::read(dir.path().join("images/pre-00000.pgm")).unwrap();
    save_dataset(dir.path(), &back).unwrap();
    assert_eq!(std::fs::read(dir.path().join("images/pre-00000.pgm")).unwrap(), first);
}

#[test]
fn missing_manifest_and_bad_class_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(crate::Error::Format(_))));
    let spec = BenchmarkSpec { n_pretrain: 0, n_train: 1, n_val: 0, n_test: 0, size: 16 };
    let mut data = make_benchmark(DataKind::Bitewing, &spec, 1).unwrap();
    data.num_classes = 3;
    assert!(matches!(save_dataset(dir.path(), &data), Err(crate::Error::Format(_))));
    data.num_classes = 6;
    save_dataset(dir.path(), &data).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join("index.json")).unwrap();
    std::fs::write(dir.path().join("index.json"), manifest.replace("\"num_classes\": 6", "\"num_classes\": 2")).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(crate::Error::Format(_))));
}

#[test]
fn default_benchmark_split_sizes_and_disjointness() {
    let data = make_benchmark(DataKind::Bitewing, &BenchmarkSpec { n_pretrain: 50, ..Default::default() }, 3).unwrap();
    let split = data.labeled_split();
    assert_eq!((split.train.len(), split.val.len(), split.test.len()), (10, 5, 85));
    let pool: std::collections::HashSet<String> = data.ids(Split::Pretrain).into_iter().collect();
    for id in split.train.iter().chain(&split.val).chain(&split.test) {
        assert!(!pool.contains(id));
    }
    assert!(data.split(Split::Pretrain).iter().all(|s| s.mask.is_none()));
    assert!(data.split(Split::Train).iter().all(|s| s.mask.is_some()));
    let again = make_benchmark(DataKind::Bitewing, &BenchmarkSpec { n_pretrain: 50, ..Default::default() }, 3).unwrap();
    assert_eq!(again.labeled_split(), split);
}

#[test]
fn split_assignment_is_disjoint_and_seeded() {
    let ids: Vec<String> = (0..20).map(|i| i.to_string()).collect();
    let a = DatasetSplit::assign(&ids, 4, 3, 1).unwrap();
    let mut all: Vec<&String> = a.train.iter().chain(&a.val).chain(&a.test).collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 20);
    assert_eq!(a, DatasetSplit::assign(&ids, 4, 3, 1).unwrap());
    assert!(DatasetSplit::assign(&ids, 15, 6, 1).is_err());
}
