#![allow(dead_code)]

use capsqz_core::colorspace::ChannelId;
use capsqz_core::dataset::{PatchSet, PatchSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Alternating labels; positives have the first channel shifted up by 0.3.
pub fn toy_patches(n: usize, seed: u64) -> PatchSet {
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

pub fn random_vec(n: usize, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}
