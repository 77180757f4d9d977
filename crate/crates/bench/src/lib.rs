//! Shared fixtures for the criterion benchmarks.

use gref_core::data::{simulate_sessions, SessionRecord, SimulatorConfig};
use gref_core::model::{GenRerankerModel, ModelConfig};

/// The default desk-scale serving shape: 30 candidates in, 10 out,
/// 4 heads, 4+4 transformer layers at width 64.
pub fn desk_model() -> GenRerankerModel<f32> {
    GenRerankerModel::new(ModelConfig::default(), 7).expect("default config is valid")
}

/// A handful of matching sessions to decode.
pub fn desk_sessions(count: usize) -> Vec<SessionRecord> {
    let config = SimulatorConfig { num_sessions: count, ..SimulatorConfig::default() };
    simulate_sessions(&config).expect("default simulator config is valid")
}
