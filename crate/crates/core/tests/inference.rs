mod common;

use capsqz_core::colorspace::{ChannelId, ChannelImage};
use capsqz_core::compress::{train_pruned_quantized_cnn, train_quantized_mlp, QuantConfig};
use capsqz_core::inference::{binarized_matvec, dense_matvec, BinarizedLayer, ExecPath, FrozenLayer, FrozenNet};
use capsqz_core::nn::{cnn_spec, mlp_spec, train, Network, NoHooks, Tensor, TrainConfig};
use common::{random_vec, toy_patches};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig { batch_size: 32, ..TrainConfig::new(epochs, 3) }
}

fn quant() -> QuantConfig {
    QuantConfig { warmup_epochs: 1, ..QuantConfig::default() }
}

#[test]
fn binarized_matvec_is_bit_exact_against_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let in_dim = rng.random_range(1..300);
        let out_dim = rng.random_range(1..50);
        let signs: Vec<f32> =
            (0..in_dim * out_dim).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let bias = random_vec(out_dim, -2.0, 2.0, &mut rng);
        let x = random_vec(in_dim, -10.0, 10.0, &mut rng);
        let layer = BinarizedLayer::from_signs(&signs, in_dim, out_dim, bias.clone()).unwrap();
        let fast = binarized_matvec(&layer, &x).unwrap();
        let dense = dense_matvec(&signs, in_dim, &bias, &x).unwrap();
        let fast_bits: Vec<u32> = fast.iter().map(|v| v.to_bits()).collect();
        let dense_bits: Vec<u32> = dense.iter().map(|v| v.to_bits()).collect();
        assert_eq!(fast_bits, dense_bits);
    }
}

#[test]
fn binarized_layer_rejects_non_signs() {
    assert!(BinarizedLayer::from_signs(&[1.0, 0.5], 2, 1, vec![0.0]).is_err());
    assert!(BinarizedLayer::from_signs(&[1.0, -1.0], 3, 1, vec![0.0]).is_err());
}

fn random_patches(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_vec(n * 243, -1.5, 1.5, &mut rng)
}

#[test]
fn quantized_mlp_paths_agree_bitwise() {
    let data = toy_patches(128, 2);
    let mut net = Network::<f32>::new(mlp_spec(), 4).unwrap();
    train_quantized_mlp(&mut net, &data, &cfg(3), &quant()).unwrap();
    let frozen = FrozenNet::from_network(&net, "test").unwrap();
    let binary = frozen
        .layers()
        .iter()
        .filter(|l| matches!(l, FrozenLayer::Dense { weights, .. } if weights.is_binary()))
        .count();
    assert_eq!(binary, 4);
    let x = random_patches(1000, 5);
    let fast = frozen.predict(&x, ExecPath::Fast).unwrap();
    let reference = frozen.predict(&x, ExecPath::Reference).unwrap();
    assert_eq!(fast, reference);
}

#[test]
fn frozen_net_matches_training_network() {
    let data = toy_patches(128, 6);
    let mut net = Network::<f32>::new(cnn_spec(), 7).unwrap();
    train(&mut net, &data, &cfg(2), &mut NoHooks).unwrap();
    let frozen = FrozenNet::from_network(&net, "test").unwrap();
    let x = random_patches(64, 8);
    let p_net = net.predict_positive(&x).unwrap();
    let p_frozen = frozen.predict(&x, ExecPath::Fast).unwrap();
    for (a, b) in p_net.iter().zip(&p_frozen) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn sparse_convolutions_match_dense_expansion() {
    let data = toy_patches(96, 9);
    let mut net = Network::<f32>::new(cnn_spec(), 10).unwrap();
    train_pruned_quantized_cnn(&mut net, &data, 1.0, &cfg(2), &quant()).unwrap();
    let frozen = FrozenNet::from_network(&net, "test").unwrap();
    let x = random_patches(200, 11);
    let fast = frozen.predict(&x, ExecPath::Fast).unwrap();
    let reference = frozen.predict(&x, ExecPath::Reference).unwrap();
    for (a, b) in fast.iter().zip(&reference) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
    // The binarized dense layers sum in a different order from the training GEMM, so
    // compare both against a double-precision forward pass.
    let exact = net.cast::<f64>();
    let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let p64 = exact.forward(&Tensor::new(vec![200, 3, 9, 9], xs).unwrap()).unwrap();
    let p_net = net.predict_positive(&x).unwrap();
    let (mut e_fast, mut e_net) = (0.0f64, 0.0f64);
    for (i, (a, b)) in fast.iter().zip(&p_net).enumerate() {
        let truth = p64.data()[2 * i + 1];
        e_fast = e_fast.max((*a as f64 - truth).abs());
        e_net = e_net.max((*b as f64 - truth).abs());
    }
    assert!(e_fast < 1e-4 && e_net < 1e-4);
}

fn constant_image(w: usize, h: usize, v: f32) -> ChannelImage {
    let planes = [ChannelId::A, ChannelId::G, ChannelId::S].into_iter().map(|id| (id, vec![v; w * h])).collect();
    ChannelImage::new(w, h, planes).unwrap()
}

#[test]
fn zero_network_segments_to_half() {
    for spec in [mlp_spec(), cnn_spec()] {
        let frozen = FrozenNet::from_network(&Network::zeros(spec).unwrap(), "zero").unwrap();
        let (prob, mask) = frozen.segment(&constant_image(13, 7, 0.4)).unwrap();
        assert_eq!(prob.len(), 13 * 7);
        assert_eq!((mask.width(), mask.height()), (13, 7));
        assert!(prob.iter().all(|&p| p == 0.5));
        // p >= 0.5 is positive.
        assert_eq!(mask.positives(), 13 * 7);
    }
}

#[test]
fn segmentation_matches_per_patch_prediction() {
    let data = toy_patches(64, 12);
    let mut net = Network::<f32>::new(mlp_spec(), 13).unwrap();
    train(&mut net, &data, &cfg(2), &mut NoHooks).unwrap();
    let frozen = FrozenNet::from_network(&net, "test").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (w, h) = (12, 10);
    let planes = [ChannelId::A, ChannelId::G, ChannelId::S]
        .into_iter()
        .map(|id| (id, random_vec(w * h, -1.0, 1.0, &mut rng)))
        .collect();
    let img = ChannelImage::new(w, h, planes).unwrap();
    let (prob, mask) = frozen.segment(&img).unwrap();
    let (again, _) = frozen.segment(&img).unwrap();
    assert_eq!(prob, again);
    let mut patch = vec![0.0f32; 243];
    for &(x, y) in &[(0, 0), (11, 9), (5, 4), (0, 9)] {
        capsqz_core::dataset::patches::write_patch(&img, x, y, 9, &mut patch);
        let p = frozen.predict(&patch, ExecPath::Fast).unwrap()[0];
        assert_eq!(p, prob[y * w + x]);
        assert_eq!(mask.get(x, y), (p >= 0.5) as u8);
    }
}

#[test]
fn wrong_channel_count_is_rejected() {
    let frozen = FrozenNet::from_network(&Network::zeros(mlp_spec()).unwrap(), "zero").unwrap();
    let img = ChannelImage::new(9, 9, vec![(ChannelId::A, vec![0.0; 81])]).unwrap();
    assert!(frozen.segment(&img).is_err());
    assert!(frozen.predict(&[0.0; 10], ExecPath::Fast).is_err());
}
