mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zsq_core::model_io::dataset::export_raw;
use zsq_core::model_io::format::{decode_model, encode_model};
use zsq_core::model_io::{
    absorb_bn_stats, build_toy_model, load_model, replicate_channels, save_model, GeneratorKind, SyntheticDataset,
    ToyArchitecture,
};
use zsq_core::{batch_stats, forward, Layer, ModelGraph, Tensor};

use common::*;

fn dataset(channels: usize, hw: usize) -> SyntheticDataset {
    SyntheticDataset {
        generator: GeneratorKind::Structured {
            means: vec![0.4; channels],
            scales: vec![0.3; channels],
            scene_length: 6,
            blobs: 2,
            noise: 0.1,
        },
        seed: 5,
        count: 96,
        channels,
        height: hw,
        width: hw,
    }
}

#[test]
fn random_architectures_roundtrip_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let dir = tempfile::tempdir().unwrap();
    for i in 0..8 {
        let arch = random_architecture(&mut rng);
        let model: ModelGraph<f32> = build_toy_model(&arch, i).unwrap();
        let path = dir.path().join(format!("m{i}.zsq"));
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, model);
        let mut shape = vec![3];
        shape.extend_from_slice(model.input_shape());
        let x: Tensor<f32> = gaussian_tensor(&mut rng, shape).cast();
        let (y0, t0) = forward(&model, &x, true).unwrap();
        let (y1, t1) = forward(&back, &x, true).unwrap();
        assert_eq!(y0, y1);
        assert_eq!(t0, t1);
    }
}

#[test]
fn f64_models_are_stored_as_f32() {
    let model: ModelGraph<f64> = build_toy_model(&ToyArchitecture::reference(), 2).unwrap();
    let back = decode_model(&encode_model(&model).unwrap()).unwrap();
    assert_eq!(back, model.cast::<f32>());
}

#[test]
fn absorption_is_deterministic_and_leaves_weights_alone() {
    let mut arch = ToyArchitecture::reference();
    arch.input_shape = vec![3, 16, 16];
    let raw: ModelGraph<f32> = build_toy_model(&arch, 4).unwrap();
    let data = dataset(3, 16);
    let a = absorb_bn_stats(&raw, &data, 0.1, 16).unwrap();
    let b = absorb_bn_stats(&raw, &data, 0.1, 16).unwrap();
    assert_eq!(encode_model(&a).unwrap(), encode_model(&b).unwrap());
    for (before, after) in raw.layers().iter().zip(a.layers()) {
        match (before, after) {
            (Layer::BatchNorm2d(x), Layer::BatchNorm2d(y)) => {
                assert!(y.running_std.iter().all(|&s| s > 0.0));
                assert_eq!((&x.gamma, &x.beta), (&y.gamma, &y.beta));
                assert_ne!(x.running_mean, y.running_mean);
            }
            _ => assert_eq!(before, after),
        }
    }
}

#[test]
fn single_channel_data_feeds_three_channel_models() {
    let data = dataset(1, 8);
    let gray: Tensor<f32> = data.images(0, 4).unwrap();
    let batch: Tensor<f32> = data.model_batch(0, 4, 3).unwrap();
    assert_eq!(batch, replicate_channels(&gray).unwrap());
    let (gm, _) = batch_stats(&gray).unwrap();
    let (bm, _) = batch_stats(&batch).unwrap();
    assert!(bm.iter().all(|&m| m == gm[0]));

    let mut arch = ToyArchitecture::reference();
    arch.input_shape = vec![3, 8, 8];
    arch.blocks.truncate(2);
    let raw: ModelGraph<f32> = build_toy_model(&arch, 1).unwrap();
    let absorbed = absorb_bn_stats(&raw, &data, 0.1, 8).unwrap();
    // The first conv sees three identical channels.
    assert!(absorbed.batch_norm(1).unwrap().running_std.iter().all(|&s| s > 0.0));
}

#[test]
fn raw_export_is_little_endian_f32() {
    let t = Tensor::new(vec![1, 1, 1, 3], vec![1.0f32, -2.5, 0.125]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.raw");
    export_raw(&t, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let vals: Vec<f32> = bytes.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(vals, t.data());
}

#[test]
fn dataset_is_a_pure_function_of_its_description() {
    let d = dataset(3, 8);
    let a: Tensor<f32> = d.images(10, 5).unwrap();
    let b: Tensor<f32> = d.clone().images(10, 5).unwrap();
    assert_eq!(a, b);
    let mut other = d.clone();
    other.seed += 1;
    assert_ne!(a, other.images::<f32>(10, 5).unwrap());
}
