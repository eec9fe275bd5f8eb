//! Shared fixtures for the criterion benchmarks.

use mega_core::body::dataset::make_dataset;
use mega_core::tokenizer::fit_tokenizer;
use mega_core::{MegaModel, Observation, RunConfig, Skeleton, TokenizerModel};

pub struct BenchFixture {
    pub skeleton: Skeleton,
    pub tokenizer: TokenizerModel,
    pub model: MegaModel,
    pub observation: Observation,
}

/// Untrained default-dimension model plus a fitted tokenizer; benchmark
/// numbers measure architecture cost, not model quality.
pub fn fixture() -> BenchFixture {
    let cfg = RunConfig::default();
    let skeleton = Skeleton::default_body();
    let records = make_dataset(&skeleton, 256, 0.3, 0).unwrap();
    let meshes: Vec<_> = records.iter().map(|r| r.canonical.clone()).collect();
    let tokenizer = fit_tokenizer(&meshes, &skeleton, cfg.n, cfg.l, cfg.s, 0).unwrap();
    let model = MegaModel::new(cfg.model_config(), 0).unwrap();
    BenchFixture {
        skeleton,
        tokenizer,
        model,
        observation: records[0].observation.clone(),
    }
}
