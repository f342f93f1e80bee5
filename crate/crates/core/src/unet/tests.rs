use super::*;
use crate::rng::{normal, seeded};
use crate::tensor::check::check_gradients;

fn tiny() -> UnetConfig {
    UnetConfig {
        in_channels: 1,
        base_width: 4,
        channel_mults: vec![1, 2],
        num_res_blocks: 1,
        attention_levels: vec![1],
        time_embed_dim: 8,
        out_channels_noise: 1,
        num_classes: 3,
        diffusion_steps: 20,
        norm_groups: 2,
    }
}

#[test]
fn output_shapes_follow_head() {
    let cfg = UnetConfig { base_width: 8, time_embed_dim: 16, ..UnetConfig::default() };
    let mut m = UnetModel::<f32>::new(cfg, &mut seeded(0)).unwrap();
    let x: Tensor<f32> = normal(&[1, 1, 32, 32], &mut seeded(1));
    assert_eq!(m.infer(&x, &[1]).unwrap().shape(), &[1, 1, 32, 32]);
    m.set_head(HeadMode::Segmentation);
    assert_eq!(m.infer(&x, &[1]).unwrap().shape(), &[1, 6, 32, 32]);
}

#[test]
fn default_model_output_is_sane() {
    let m = UnetModel::<f32>::new(UnetConfig::default(), &mut seeded(2)).unwrap();
    let x = normal::<f32>(&[1, 1, 32, 32], &mut seeded(3)).map(|v| v.clamp(-1.0, 1.0));
    let y = m.infer(&x, &[10]).unwrap();
    assert!(y.is_finite());
    assert!(y.mean().abs() < 1.0);
}

#[test]
fn timestep_conditions_output() {
    let m = UnetModel::<f32>::new(tiny(), &mut seeded(4)).unwrap();
    let x: Tensor<f32> = normal(&[1, 1, 8, 8], &mut seeded(5));
    let a = m.infer(&x, &[1]).unwrap();
    let b = m.infer(&x, &[15]).unwrap();
    let diff = a.zip_map(&b, |p, q| p - q).unwrap().l2_norm();
    assert!(diff > 0.0);
}

#[test]
fn spatial_divisibility_enforced() {
    let m = UnetModel::<f32>::new(UnetConfig { base_width: 8, ..UnetConfig::default() }, &mut seeded(6)).unwrap();
    let x = Tensor::<f32>::zeros(&[1, 1, 30, 30]);
    assert!(matches!(m.infer(&x, &[1]), Err(crate::Error::Dimension(_))));
}

#[test]
fn head_swap_preserves_trunk() {
    let mut m = UnetModel::<f32>::new(tiny(), &mut seeded(7)).unwrap();
    let before = m.trunk_checksum();
    let all_before = m.params().clone();
    m.set_head(HeadMode::Segmentation);
    assert_eq!(m.trunk_checksum(), before);
    m.set_head(HeadMode::Segmentation);
    assert_eq!(m.params(), &all_before);
}

#[test]
fn zero_segmentation_head_gives_uniform_prediction() {
    let mut m = UnetModel::<f64>::new(tiny(), &mut seeded(8)).unwrap();
    m.set_head(HeadMode::Segmentation);
    let x: Tensor<f64> = normal(&[2, 1, 8, 8], &mut seeded(9));
    let logits = m.infer(&x, &[1, 1]).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let tape = Tape::new();
    let probs = tape.constant(logits).softmax(1).unwrap().value();
    assert!(probs.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn noise_prediction_rejected_in_segmentation_mode() {
    let mut m = UnetModel::<f32>::new(tiny(), &mut seeded(10)).unwrap();
    m.set_head(HeadMode::Segmentation);
    let x = Tensor::<f32>::zeros(&[1, 1, 8, 8]);
    assert!(matches!(m.predict(&x, &[1]), Err(crate::Error::Mode(_))));
    let tape = Tape::new();
    let b = m.bind(&tape, true);
    assert!(matches!(b.predict_noise(tape.constant(x), &[1]), Err(crate::Error::Mode(_))));
}

#[test]
fn batch_permutation_equivariance() {
    let m = UnetModel::<f64>::new(tiny(), &mut seeded(11)).unwrap();
    let x: Tensor<f64> = normal(&[3, 1, 8, 8], &mut seeded(12));
    let y = m.infer(&x, &[2, 7, 19]).unwrap();
    let per = 64;
    let perm = [2usize, 0, 1];
    let mut xp = Vec::new();
    for &i in &perm {
        xp.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let ts = [19, 2, 7];
    let yp = m.infer(&Tensor::from_vec(&[3, 1, 8, 8], xp).unwrap(), &ts).unwrap();
    for (slot, &i) in perm.iter().enumerate() {
        for k in 0..per {
            assert!((yp.data()[slot * per + k] - y.data()[i * per + k]).abs() < 1e-12);
        }
    }
}

#[test]
fn embedding_properties() {
    let e1 = timestep_embedding(1, 32, 100).unwrap();
    let e2 = timestep_embedding(100, 32, 100).unwrap();
    assert!(e1.data().iter().chain(e2.data()).all(|v| (-1.0..=1.0).contains(v)));
    let d = e1.zip_map(&e2, |a, b| a - b).unwrap().l2_norm();
    assert!(d > 0.1 * 32f64.sqrt(), "{d}");
    assert_eq!(timestep_embedding(37, 32, 100).unwrap(), timestep_embedding(37, 32, 100).unwrap());
    assert!(matches!(timestep_embedding(1, 7, 100), Err(crate::Error::Config(_))));
    assert!(timestep_embedding(0, 8, 100).is_err());
}

#[test]
fn block_ids_parse_and_validate() {
    assert_eq!("mid".parse::<BlockId>().unwrap(), BlockId::Middle);
    assert_eq!("dec2".parse::<BlockId>().unwrap(), BlockId::Decoder(2));
    assert!("enc0".parse::<BlockId>().is_err());
    let m = UnetModel::<f32>::new(tiny(), &mut seeded(13)).unwrap();
    let tape = Tape::new();
    let b = m.bind(&tape, false);
    let x = tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
    assert!(b.forward_capture(x, &[1], &[BlockId::Decoder(5)]).is_err());
    let (_, taps) = b.forward_capture(x, &[1], &[BlockId::Middle, BlockId::Decoder(0)]).unwrap();
    assert_eq!(taps[0].shape(), vec![1, 8, 4, 4]);
    assert_eq!(taps[1].shape(), vec![1, 4, 8, 8]);
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let mut m = UnetModel::<f32>::new(tiny(), &mut seeded(14)).unwrap();
    m.set_head(HeadMode::Segmentation);
    let mut bytes = Vec::new();
    write_checkpoint(&m, &mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"PTDR");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(bytes[8], 1);
    let back: UnetModel<f32> = read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(back.head(), HeadMode::Segmentation);
    assert_eq!(back.params(), m.params());
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    assert_eq!(again, bytes);
}

#[test]
fn checkpoint_rejects_corruption() {
    let m = UnetModel::<f32>::new(tiny(), &mut seeded(15)).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&m, &mut bytes).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint::<f32>(bad.as_slice()), Err(crate::Error::Format(_))));
    assert!(read_checkpoint::<f32>(&bytes[..bytes.len() - 3]).is_err());
    assert!(read_checkpoint::<f64>(bytes.as_slice()).is_err());
}

#[test]
fn every_trunk_parameter_receives_gradient() {
    for seed in 0..5 {
        let m = UnetModel::<f64>::new(tiny(), &mut seeded(100 + seed)).unwrap();
        let x: Tensor<f64> = normal(&[2, 1, 8, 8], &mut seeded(200 + seed));
        let tape = Tape::new();
        let b = m.bind(&tape, true);
        let y = b.forward(tape.constant(x.clone()), &[3, 11]).unwrap();
        let loss = y.mse(tape.constant(x)).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let g = b.collect_grads(&mut grads);
        for ((name, _), gi) in m.params().iter().zip(&g) {
            if name.starts_with(HEAD_SEGMENTATION) {
                assert!(gi.is_none());
                continue;
            }
            let gi = gi.as_ref().unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(gi.max_abs() > 0.0, "{name} gradient is all zero");
        }
    }
}

#[test]
fn small_unet_gradients_match_finite_differences() {
    let m = UnetModel::<f64>::new(tiny(), &mut seeded(16)).unwrap();
    let x: Tensor<f64> = normal(&[2, 1, 8, 8], &mut seeded(17));
    let target: Tensor<f64> = normal(&[2, 1, 8, 8], &mut seeded(18));
    let params: Vec<Tensor<f64>> = m
        .params()
        .iter()
        .filter(|(n, _)| !n.starts_with(HEAD_SEGMENTATION))
        .map(|(_, t)| t.clone())
        .collect();
    let names: Vec<String> = m.params().names().to_vec();
    let report = check_gradients(
        &params,
        |tape, vars| {
            let mut it = vars.iter();
            let all = names
                .iter()
                .zip(m.params().tensors())
                .map(|(n, t)| if n.starts_with(HEAD_SEGMENTATION) { tape.constant(t.clone()) } else { *it.next().unwrap() })
                .collect();
            let bound = m.bind_vars(tape, all)?;
            let y = bound.forward(tape.constant(x.clone()), &[4, 13])?;
            y.mse(tape.constant(target.clone()))
        },
        1e-4,
        Some(3),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
