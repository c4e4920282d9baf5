//! The fixed desk-scale experiment used by the acceptance suite and the
//! examples: four Gaussian clusters in 8 dimensions, 600 training and 200
//! test records per seed.

use crate::data::{generate_synthetic, QualityPolicy, SyntheticSpec, UtteranceRecord};
use crate::error::Result;
use crate::scoring::InferenceRecord;
use crate::training::TrainConfig;

pub const TRAIN_PER_CLUSTER: usize = 150;
pub const TEST_PER_CLUSTER: usize = 50;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Offset between a seed's training and test generator seeds.
const TEST_SEED_OFFSET: u64 = 1000;

pub fn train_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec::four_cluster(seed, TRAIN_PER_CLUSTER)
}

pub fn test_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec::four_cluster(seed + TEST_SEED_OFFSET, TEST_PER_CLUSTER)
}

/// `(train, test)` records for `seed`. Test records are never augmented.
pub fn dataset(seed: u64) -> Result<(Vec<UtteranceRecord>, Vec<UtteranceRecord>)> {
    Ok((
        generate_synthetic(&train_spec(seed))?,
        generate_synthetic(&test_spec(seed))?,
    ))
}

pub fn inference_set(records: &[UtteranceRecord], policy: &QualityPolicy) -> Vec<InferenceRecord> {
    records
        .iter()
        .map(|r| InferenceRecord::from_record(r, policy))
        .collect()
}

/// QAMO with default margins and optimizer, batch 16, 50 epochs.
pub fn config(seed: u64, lambda: f64) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        epochs: 50,
        batch_size: 16,
        ..TrainConfig::default()
    };
    c.hyper.lambda = lambda;
    c
}
