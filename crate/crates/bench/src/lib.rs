//! Fixtures shared by the benchmarks.

use probsam_core::data::{gen_synthetic, Dataset, Split, SynthConfig};
use probsam_core::image::BinaryMask;
use probsam_core::model::{ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default-sized model and the training split of a small default corpus.
pub fn default_fixture(n_samples: usize) -> (ModelParams, Dataset) {
    let corpus = gen_synthetic(&SynthConfig { n_samples, ..SynthConfig::default() }, 0).expect("corpus");
    let params = ModelParams::init(ModelConfig::default()).expect("model");
    (params, corpus.dataset(Split::Train).expect("train split"))
}

/// Random `count` masks of `h x w` with pixel density `p`.
pub fn random_masks(count: usize, h: usize, w: usize, p: f64, seed: u64) -> Vec<BinaryMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| BinaryMask::new(h, w, (0..h * w).map(|_| rng.gen_bool(p)).collect()).expect("mask"))
        .collect()
}
