#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use seqrep::dataio::{gen_synthetic, Dataset, SynthConfig};
use seqrep::Tensor;

/// A handful of short labelled utterances with a second view.
pub fn tiny_data(seed: u64) -> Dataset {
    let cfg = SynthConfig {
        n_states: 3,
        dim: 4,
        min_segment: 2,
        max_segment: 3,
        n_utterances: 3,
        min_len: 8,
        max_len: 10,
        view2_dim: 3,
        ..SynthConfig::default()
    };
    gen_synthetic(&cfg, seed).unwrap()
}

pub fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(rows, cols, data).unwrap()
}
