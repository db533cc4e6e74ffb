//! Benchmark fixtures shared by the criterion targets.

use cperb::data::{gen_domain_dataset, Dataset, DomainSpec};
use cperb::model::CnnConfig;
use cperb::Rng;

/// The small network and source domain used across benchmarks.
pub fn desk_setup(per_class: usize) -> (Dataset, CnnConfig) {
    let spec: DomainSpec = "plain".parse().expect("builtin domain");
    let data = gen_domain_dataset(&spec, per_class, 5, 24, &mut Rng::new(1)).expect("generation");
    let model = CnnConfig {
        channels: vec![16, 32, 64],
        input: [3, 24, 24],
        ..CnnConfig::new(5)
    };
    (data, model)
}
