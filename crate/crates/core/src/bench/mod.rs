//! Synthetic data, Fréchet quality metric and speed/quality sweeps.

mod frechet;
mod sweep;
mod synth;

pub use frechet::{embed_fit, eval_quality, frechet_distance, GaussianFit, SAMPLES_PER_DIM};
pub use sweep::{
    read_records, reference_fit, sampler_quality, summarize, sweep, task_target, tradeoff_svg, write_tradeoff_csv,
    GridCell, ModelZoo, RecordAppender, RunRecord, SweepGrid, TradeoffRow, SCHEMA_VERSION,
};
pub use synth::{synth_generate, SynthDatasetSpec, MOOD_TEMPLATES};
