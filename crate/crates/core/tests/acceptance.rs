//! Acceptance suite: one pass/fail line per criterion.
//!
//! Run with `cargo test --test acceptance`; pass criterion numbers after `--` to run a
//! subset (e.g. `cargo test --test acceptance -- 3 8`).

use std::time::Instant;

use capsqz_core::channel_select::{
    combinations, default_bins, entropy, mutual_information_table, rank_combinations, Pooling,
};
use capsqz_core::checkpoint::Checkpoint;
use capsqz_core::colorspace::{lab_pixel, ChannelId, RgbImage};
use capsqz_core::complexity::{count_params_spec, estimate_energy, EnergyModel, LayerCompression, NumFormat};
use capsqz_core::compress::{binarize_det, binarize_stoch, compute_mask, hard_sigmoid, train_pruned_quantized_cnn};
use capsqz_core::compress::QuantConfig;
use capsqz_core::dataset::{split_indices, synth_generate, BinaryMask, LabeledImage, PatchSet, PatchSource};
use capsqz_core::inference::{binarized_matvec, dense_matvec, BinarizedLayer};
use capsqz_core::metrics::{dice, mann_whitney_auc, roc_auc, ConfusionCounts};
use capsqz_core::nn::gradcheck::gradient_check;
use capsqz_core::nn::{
    cnn_spec, mlp_spec, train, Activation, InputShape, LayerSpec, LayerState, Network, NetworkSpec, NoHooks, Tensor,
    TrainConfig,
};
use capsqz_core::pipeline::{evaluate, prepare_synth, train_on_images, train_on_patches, Arch, Compression, TrainSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 11] = [
        (1, "parameter-count fixtures", c1_param_counts),
        (2, "gradient correctness", c2_gradients),
        (3, "multiplication-free equivalence", c3_binarized_matvec),
        (4, "quantization properties", c4_quantization),
        (5, "pruning properties", c5_pruning),
        (6, "mutual information oracle", c6_mutual_information),
        (7, "metrics oracle", c7_metrics),
        (8, "end-to-end synthetic regression", c8_end_to_end),
        (9, "channel selection sanity", c9_channel_selection),
        (10, "determinism and persistence", c10_persistence),
        (11, "energy accounting", c11_energy),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn c1_param_counts() -> Outcome {
    let counts = |r: &capsqz_core::complexity::ComplexityReport| {
        r.rows.iter().map(|l| l.full_precision_weights).collect::<Vec<_>>()
    };
    let mlp = count_params_spec(&mlp_spec(), &[LayerCompression::Quantized; 4]).map_err(|e| e.to_string())?;
    let cnn = count_params_spec(&cnn_spec(), &[LayerCompression::Full; 5]).map_err(|e| e.to_string())?;
    let simplified = count_params_spec(
        &cnn_spec(),
        &[
            LayerCompression::Pruned { survivors: 979 },
            LayerCompression::Pruned { survivors: 9163 },
            LayerCompression::Quantized,
            LayerCompression::Quantized,
            LayerCompression::Quantized,
        ],
    )
    .map_err(|e| e.to_string())?;
    let ok = counts(&mlp) == [9720, 800, 160, 16]
        && mlp.total_one_bit == 10696
        && mlp.total_thirty_two_bit == 0
        && counts(&cnn) == [1728, 18432, 17280, 2400, 80]
        && simplified.total_thirty_two_bit == 10142
        && simplified.total_one_bit == 19760;
    check(
        ok,
        format!(
            "MLP {:?} = {} 1-bit; CNN {:?}; simplified CNN {} 32-bit + {} 1-bit",
            counts(&mlp),
            mlp.total_one_bit,
            counts(&cnn),
            simplified.total_thirty_two_bit,
            simplified.total_one_bit
        ),
    )
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize_params(net: &mut Network<f64>, rng: &mut ChaCha8Rng) {
    for l in &mut net.layers {
        if let LayerState::BatchNorm(bn) = l {
            bn.gamma.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
            bn.beta.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
        if let Some(w) = l.weights_mut() {
            w.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
            w.refresh_effective();
        }
    }
}

fn c2_gradients() -> Outcome {
    let dense = |i, o, a| LayerSpec::Dense { inputs: i, outputs: o, activation: a };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut probes = 0;
    for trial in 0..4u64 {
        let c: usize = rng.random_range(1..=3);
        let oc: usize = rng.random_range(2..=4);
        let side: usize = rng.random_range(4..=6);
        let pooled = side.div_ceil(2);
        let conv_net = NetworkSpec::new(
            InputShape { channels: c, height: side, width: side },
            vec![
                LayerSpec::Conv { in_channels: c, out_channels: oc, kernel: 3, padding: 1 },
                LayerSpec::BatchNorm { channels: oc },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2, ceil_mode: true },
                LayerSpec::Flatten,
                dense(oc * pooled * pooled, 2, Activation::Identity),
                LayerSpec::Softmax,
            ],
        )
        .map_err(|e| e.to_string())?;
        let h: usize = rng.random_range(3..=7);
        let dense_net = NetworkSpec::new(
            InputShape { channels: 2, height: 2, width: 2 },
            vec![
                dense(8, h, Activation::Sigmoid),
                dense(h, 5, Activation::Relu),
                LayerSpec::BatchNorm { channels: 5 },
                dense(5, 2, Activation::Identity),
                LayerSpec::Softmax,
            ],
        )
        .map_err(|e| e.to_string())?;
        for spec in [conv_net, dense_net] {
            let input = spec.input;
            let mut net = Network::<f64>::new(spec, 10 + trial).map_err(|e| e.to_string())?;
            randomize_params(&mut net, &mut rng);
            let batch = 5;
            let x = random_tensor(vec![batch, input.channels, input.height, input.width], &mut rng);
            let mut labels: Vec<u8> = (0..batch).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let r = gradient_check(&mut net, &x, &labels, 100, 1e-4, 1e-6, rng.random())
                .map_err(|e| e.to_string())?;
            worst = worst.max(r.max_rel_error);
            worst_abs = worst_abs.max(r.max_abs_error);
            probes += r.probes;
        }
    }
    check(worst < 1e-4, format!("{probes} probes over 8 random nets, max relative error {worst:.2e} (< 1e-4), max absolute {worst_abs:.1e}"))
}

fn c3_binarized_matvec() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for pair in 0..1000 {
        let in_dim = rng.random_range(1..400);
        let out_dim = rng.random_range(1..64);
        let signs: Vec<f32> = (0..in_dim * out_dim).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let bias: Vec<f32> = (0..out_dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x: Vec<f32> = (0..in_dim).map(|_| rng.random_range(-10.0..10.0)).collect();
        let layer = BinarizedLayer::from_signs(&signs, in_dim, out_dim, bias.clone()).map_err(|e| e.to_string())?;
        let a = binarized_matvec(&layer, &x).map_err(|e| e.to_string())?;
        let b = dense_matvec(&signs, in_dim, &bias, &x).map_err(|e| e.to_string())?;
        if a.iter().zip(&b).any(|(p, q)| p.to_bits() != q.to_bits()) {
            return Err(format!("pair {pair} ({out_dim}x{in_dim}) differs"));
        }
    }
    Ok("1000 random (layer, input) pairs bit-identical".into())
}

fn c4_quantization() -> Outcome {
    let det = binarize_det(&[0.3f64, -0.5, 0.0, 1e-30, -1e-30, 2.0]).map_err(|e| e.to_string())?;
    if det != [1.0, -1.0, 1.0, 1.0, -1.0, 1.0] {
        return Err(format!("binarize_det gave {det:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10_000;
    let mut worst_z = 0.0f64;
    let mut freqs = Vec::new();
    for w in [-1.5f64, -0.5, 0.0, 0.5, 1.5] {
        let draws = binarize_stoch(&vec![w; n], &mut rng).map_err(|e| e.to_string())?;
        let p_hat = draws.iter().filter(|&&d| d == 1.0).count() as f64 / n as f64;
        let p = hard_sigmoid(w);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let z = if se == 0.0 {
            if p_hat == p { 0.0 } else { f64::INFINITY }
        } else {
            (p_hat - p).abs() / se
        };
        worst_z = worst_z.max(z);
        freqs.push(format!("{w}:{p_hat:.4}"));
    }
    check(worst_z <= 3.0, format!("sign(0)=+1; P(+1) {} within {worst_z:.2} SE (<= 3)", freqs.join(" ")))
}

fn toy_patches(n: usize, seed: u64) -> PatchSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 243);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u8;
        let shift = if label == 1 { 0.3 } else { -0.3 };
        for c in 0..3 {
            for _ in 0..81 {
                let v: f32 = rng.random_range(-1.0..1.0);
                data.push(if c == 0 { v + shift } else { v });
            }
        }
        labels.push(label);
    }
    let sources = (0..n).map(|i| PatchSource { image: 0, x: i as u32, y: 0 }).collect();
    PatchSet::new(9, vec![ChannelId::A, ChannelId::G, ChannelId::S], data, labels, sources).unwrap()
}

fn c5_pruning() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.random_range(2..500);
        let w: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        if compute_mask(&w, 0.0).map_err(|e| e.to_string())?.survivors() != n {
            return Err("alpha = 0 pruned a weight".into());
        }
        let mut prev = vec![1u8; n];
        for k in 0..30 {
            let m = compute_mask(&w, k as f64 * 0.1).map_err(|e| e.to_string())?;
            if m.mask.iter().zip(&prev).any(|(a, b)| a > b) {
                return Err(format!("mask at alpha {} not nested", k as f64 * 0.1));
            }
            prev = m.mask;
        }
    }

    let data = toy_patches(32, 6);
    let mut net = Network::<f32>::new(cnn_spec(), 7).map_err(|e| e.to_string())?;
    let base = TrainConfig { batch_size: 32, ..TrainConfig::new(2, 8) };
    let quant = QuantConfig { warmup_epochs: 1, ..QuantConfig::default() };
    train_pruned_quantized_cnn(&mut net, &data, 0.8, &base, &quant).map_err(|e| e.to_string())?;
    let digest = |net: &Network<f32>| {
        let mut h = Sha256::new();
        for w in net.layers.iter().filter_map(LayerState::weights) {
            if let Some(m) = &w.mask {
                h.update(m);
                for i in (0..m.len()).filter(|&i| m[i] == 0) {
                    h.update(w.shadow[i].to_le_bytes());
                    h.update(w.effective[i].to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    };
    let start = digest(&net);
    let mut pruned = 0;
    for step in 0..10 {
        let cfg = TrainConfig { first_epoch: 2 + step, ..TrainConfig { epochs: 1, ..base.clone() } };
        let before: Vec<Vec<f32>> = net.layers.iter().filter_map(LayerState::weights).map(|w| w.shadow.clone()).collect();
        train(&mut net, &data, &cfg, &mut NoHooks).map_err(|e| e.to_string())?;
        if digest(&net) != start {
            return Err(format!("mask or pruned weights changed at step {step}"));
        }
        pruned = 0;
        for (w, old) in net.layers.iter().filter_map(LayerState::weights).zip(&before) {
            if let Some(m) = &w.mask {
                for i in (0..m.len()).filter(|&i| m[i] == 0) {
                    pruned += 1;
                    if w.shadow[i] != 0.0 || w.effective[i] != 0.0 || old[i] != w.shadow[i] {
                        return Err(format!("masked weight moved at step {step}"));
                    }
                }
            }
        }
    }
    Ok(format!("alpha=0 keeps all; masks nested over 30 rates x 100 vectors; {pruned} pruned weights fixed over 10 steps (hash {})", &start[..12]))
}

fn c6_mutual_information() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let rows = rng.random_range(2..6);
        let cols = rng.random_range(2..4);
        let table: Vec<Vec<u64>> =
            (0..rows).map(|_| (0..cols).map(|_| rng.random_range(0..50)).collect()).collect();
        let total: u64 = table.iter().flatten().sum();
        if total == 0 {
            continue;
        }
        let n = total as f64;
        let px: Vec<f64> = table.iter().map(|r| r.iter().sum::<u64>() as f64 / n).collect();
        let py: Vec<f64> = (0..cols).map(|j| table.iter().map(|r| r[j]).sum::<u64>() as f64 / n).collect();
        let mut direct = 0.0;
        for (i, r) in table.iter().enumerate() {
            for (j, &c) in r.iter().enumerate() {
                if c > 0 {
                    let p = c as f64 / n;
                    direct += p * (p / (px[i] * py[j])).log2();
                }
            }
        }
        let mi = mutual_information_table(&table).map_err(|e| e.to_string())?;
        worst = worst.max((mi - direct).abs());
    }
    let x = [3u64, 5, 2, 7];
    let diag: Vec<Vec<u64>> = (0..4).map(|i| (0..4).map(|j| if i == j { x[i] } else { 0 }).collect()).collect();
    let self_err = (mutual_information_table(&diag).unwrap() - entropy(&x).unwrap()).abs();
    let indep: Vec<Vec<u64>> = [1u64, 2, 3].iter().map(|&a| [2u64, 5].iter().map(|&b| a * b).collect()).collect();
    let indep_mi = mutual_information_table(&indep).unwrap();
    let counts: Vec<usize> = (1..=3).map(|k| combinations(10, k).len()).collect();
    check(
        worst < 1e-9 && self_err < 1e-9 && indep_mi.abs() < 1e-9 && counts == [10, 45, 120],
        format!(
            "max |MI - direct| {worst:.1e} over 50 tables; |I(X;X) - H(X)| {self_err:.1e}; independent {indep_mi:.1e}; combinations {counts:?}"
        ),
    )
}

fn c7_metrics() -> Outcome {
    let perfect = dice(&ConfusionCounts { tp: 10, fp: 0, fn_: 0, tn: 5 }).value;
    let disjoint = dice(&ConfusionCounts { tp: 0, fp: 4, fn_: 6, tn: 5 }).value;
    let hand = dice(&ConfusionCounts { tp: 50, fp: 10, fn_: 10, tn: 0 }).value;
    if perfect != 1.0 || disjoint != 0.0 || (hand - 100.0 / 120.0).abs() > 1e-12 {
        return Err(format!("DICE cases {perfect} {disjoint} {hand}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(4..300);
        // Coarse scores so ties occur.
        let scores: Vec<f32> = (0..n).map(|_| (rng.random_range(0..20) as f32) / 20.0).collect();
        let mut gt: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        gt[0] = 0;
        gt[1] = 1;
        let a = roc_auc(&scores, &gt).map_err(|e| e.to_string())?.auc;
        worst = worst.max((a - mann_whitney_auc(&scores, &gt)).abs());
    }
    let sep = roc_auc(&[0.9, 0.8, 0.7, 0.2, 0.1], &[1, 1, 1, 0, 0]).unwrap().auc;
    let flat = roc_auc(&[0.4; 6], &[1, 0, 0, 1, 0, 1]).unwrap().auc;
    check(
        worst < 1e-9 && sep == 1.0 && flat == 0.5,
        format!("DICE 1.0/0.0/{hand:.4}; max |trapezoid - Mann-Whitney| {worst:.1e}; separated {sep}; constant {flat}"),
    )
}

/// Setup of the end-to-end regression.
struct E2e {
    seed: u64,
    mlp_samples: usize,
    cnn_samples: usize,
    mlp_epochs: usize,
    cnn_epochs: usize,
    alpha: f64,
}

const E2E: E2e = E2e { seed: 8, mlp_samples: 40_000, cnn_samples: 40_000, mlp_epochs: 20, cnn_epochs: 12, alpha: 0.75 };

fn c8_end_to_end() -> Outcome {
    let e = &E2E;
    let synth = synth_generate(60, 64, 64, e.seed).map_err(|e| e.to_string())?;
    let (train_idx, test_idx) = split_indices(60, 50.0 / 60.0, e.seed);
    if (train_idx.len(), test_idx.len()) != (50, 10) {
        return Err(format!("split gave {}/{}", train_idx.len(), test_idx.len()));
    }
    let channels = vec![ChannelId::A, ChannelId::G, ChannelId::S];
    let all = prepare_synth(&synth, &channels).map_err(|e| e.to_string())?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| all[i].clone()).collect::<Vec<LabeledImage>>();
    let (train_set, test_set) = (pick(&train_idx), pick(&test_idx));

    let run = |arch, compression, samples, epochs| -> Result<(f64, Vec<(usize, usize)>), String> {
        let s = TrainSettings { samples, epochs, alpha: e.alpha, seed: e.seed, ..TrainSettings::new(arch, compression) };
        let t = Instant::now();
        let out = train_on_images(&train_set, &s).map_err(|e| e.to_string())?;
        let frozen = capsqz_core::inference::FrozenNet::from_network(&out.net, "e2e").map_err(|e| e.to_string())?;
        let ev = evaluate(&frozen, &test_set).map_err(|e| e.to_string())?;
        eprintln!(
            "  {arch} {compression}: dice {:.4} auc {:?} survivors {:?} ({:.0}s)",
            ev.report.dice,
            ev.report.auc,
            out.meta.survivors,
            t.elapsed().as_secs_f64()
        );
        Ok((ev.report.dice, out.meta.survivors))
    };
    let (mlp, _) = run(Arch::Mlp, Compression::None, e.mlp_samples, e.mlp_epochs)?;
    let (qmlp, _) = run(Arch::Mlp, Compression::Quantize, e.mlp_samples, e.mlp_epochs)?;
    let (cnn, _) = run(Arch::Cnn, Compression::None, e.cnn_samples, e.cnn_epochs)?;
    let (pq, survivors) = run(Arch::Cnn, Compression::PruneQuantize, e.cnn_samples, e.cnn_epochs)?;

    let targets = [979.0, 9163.0];
    let bands: Vec<f64> = survivors.iter().zip(targets).map(|(&(k, _), t)| (k as f64 - t) / t).collect();
    let ok = mlp >= 0.90 && qmlp >= mlp - 0.05 && pq >= cnn - 0.03 && bands.iter().all(|b| b.abs() <= 0.15);
    check(
        ok,
        format!(
            "MLP {mlp:.4} (>= 0.90), quantized MLP {qmlp:.4} (>= {:.4}), CNN {cnn:.4}, pruned-quantized CNN {pq:.4} (>= {:.4}); conv survivors {}/{} vs 979/9163 ({:+.1}%, {:+.1}%)",
            mlp - 0.05,
            cnn - 0.03,
            survivors[0].0,
            survivors[1].0,
            100.0 * bands[0],
            100.0 * bands[1]
        ),
    )
}

fn c9_channel_selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (w, h) = (48, 48);
    let mut images = Vec::new();
    for _ in 0..6 {
        let pixels: Vec<[u8; 3]> = (0..w * h).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        // Bleeding label is a deterministic threshold on the red-green opponent signal.
        let mask: Vec<u8> = pixels.iter().map(|&p| (lab_pixel(p).1 > 30.0) as u8).collect();
        let rgb = RgbImage::new(w, h, pixels).map_err(|e| e.to_string())?;
        let mask = BinaryMask::new(w, h, mask).map_err(|e| e.to_string())?;
        images.push(LabeledImage::from_rgb(&rgb, mask, &ChannelId::ALL).map_err(|e| e.to_string())?);
    }
    let ranking = rank_combinations(&images, 1, default_bins(1), Pooling::Pooled).map_err(|e| e.to_string())?;
    let top: Vec<String> = ranking.entries().iter().take(3).map(|e| format!("{} {:.3}", e.label(), e.mi_bits)).collect();
    let best = ranking.best().map(|e| e.combination.clone());
    check(best == Some(vec![ChannelId::A]), format!("top channels: {}", top.join(", ")))
}

fn c10_persistence() -> Outcome {
    let data = toy_patches(128, 10);
    let settings = |arch| TrainSettings {
        epochs: 3,
        batch_size: 32,
        samples: 128,
        seed: 11,
        quant: QuantConfig { warmup_epochs: 1, ..QuantConfig::default() },
        ..TrainSettings::new(arch, Compression::PruneQuantize)
    };
    let mut details = Vec::new();
    for arch in [Arch::Mlp, Arch::Cnn] {
        let a = train_on_patches(&data, &settings(arch)).map_err(|e| e.to_string())?;
        let b = train_on_patches(&data, &settings(arch)).map_err(|e| e.to_string())?;
        let (ca, cb) = (Checkpoint::new(a.net, a.meta), Checkpoint::new(b.net, b.meta));
        if ca.sha256() != cb.sha256() {
            return Err(format!("{arch}: identical seeds gave different checkpoints"));
        }
        let bytes = ca.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
        if back.to_bytes() != bytes || back != ca {
            return Err(format!("{arch}: round trip changed the checkpoint"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pixels: Vec<[u8; 3]> = (0..40 * 30).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let rgb = RgbImage::new(40, 30, pixels).map_err(|e| e.to_string())?;
        let img = capsqz_core::colorspace::extract_channels(&rgb, &ca.meta.channels).map_err(|e| e.to_string())?;
        let (p1, m1) = ca.freeze().map_err(|e| e.to_string())?.segment(&img).map_err(|e| e.to_string())?;
        let (p2, m2) = back.freeze().map_err(|e| e.to_string())?.segment(&img).map_err(|e| e.to_string())?;
        if p1.iter().zip(&p2).any(|(a, b)| a.to_bits() != b.to_bits()) || m1 != m2 {
            return Err(format!("{arch}: segmentation changed after round trip"));
        }
        details.push(format!("{arch} {}", &ca.sha256()[..12]));
    }
    Ok(format!("hash-equal reruns, bit-exact round trip and segmentation ({})", details.join(", ")))
}

fn c11_energy() -> Outcome {
    let model = EnergyModel::default();
    let full = count_params_spec(&mlp_spec(), &[LayerCompression::Full; 4]).map_err(|e| e.to_string())?;
    let e = estimate_energy(&full, &model, NumFormat::Float32).map_err(|e| e.to_string())?;
    let q = count_params_spec(&mlp_spec(), &[LayerCompression::Quantized; 4]).map_err(|e| e.to_string())?;
    let eq = estimate_energy(&q, &model, NumFormat::Float32).map_err(|e| e.to_string())?;
    // 10,696 · (3.7 + 0.9) pJ = 49,201.6 pJ = 49,201,600 fJ.
    check(
        e.total_fj == 10696 * 4600 && eq.multiply_fj == 0,
        format!("full MLP {} fJ ({} pJ) per patch; binarized MLP multiply energy {} fJ", e.total_fj, e.total_pj, eq.multiply_fj),
    )
}
