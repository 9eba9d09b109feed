//! Fixtures shared by the criterion benches in `benches/`.

use loffta::{FeatureGrid, FeatureRecord, RngStream};

/// A record with standard normal entries.
pub fn random_record(h: usize, w: usize, d: usize, classes: u32, seed: u64) -> FeatureRecord {
    let mut rng = RngStream::new(seed);
    let cls = (0..d).map(|_| rng.normal()).collect();
    let values = (0..h * w * d).map(|_| rng.normal()).collect();
    let label = rng.below(classes as u64) as u32;
    FeatureRecord::new(cls, FeatureGrid::new(h, w, d, values).unwrap(), label).unwrap()
}

/// `n` records from consecutive seeds.
pub fn random_batch(n: usize, h: usize, w: usize, d: usize, classes: u32) -> Vec<FeatureRecord> {
    (0..n).map(|i| random_record(h, w, d, classes, i as u64)).collect()
}
