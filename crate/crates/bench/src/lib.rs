//! Shared fixtures for the benchmarks.

use everadapt_core::config::{ExperimentConfig, Preset};
use everadapt_core::data::DomainDataset;
use everadapt_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic uniform values in `[-1, 1)`.
pub fn values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::new(shape.to_vec(), values(shape.iter().product(), seed)).expect("shape matches data")
}

/// The desk preset with the first `per_class` training segments of the
/// source and first target domain.
pub fn desk_pair(per_class: usize) -> (ExperimentConfig, DomainDataset, DomainDataset) {
    let mut cfg = ExperimentConfig::preset(Preset::Desk);
    cfg.data.train_per_class = per_class;
    cfg.data.test_per_class = 1;
    let splits = cfg.generate().expect("desk preset generates");
    let (source, targets) = cfg.arrange(&splits).expect("scenario domains exist");
    let (s, t) = (source.train.clone(), targets[0].train.without_labels());
    (cfg, s, t)
}
