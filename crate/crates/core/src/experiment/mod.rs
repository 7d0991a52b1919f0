//! Experiment orchestration: configuration, calibration, episode runs and
//! condition sweeps with cell-level checkpoints.

mod config;
mod runner;
mod sweep;

pub use config::{default_shift, AdaptationConfig, CalibrationConfig, ExperimentConfig, GridConfig, ShiftValue};
pub use runner::{
    random_phys,
    calibrate, calibrate_regimes, collect_baseline, ground_truth_samples, read_trace_kappa, run_episode,
    snapshot_digest, trace_jsonl, write_atomic, CalibrationSnapshot, EpisodeOptions, EpisodeOutput, EpisodeSummary, StepRecord,
    TraceHeader,
};
pub use sweep::{
    analyze_dir, analyze_summaries, cell_stem, label_mean, matched_records, run_cell, run_sweep, CellCheckpoint,
    SweepOutcome, SweepReport, CELLS_DIR, RECORDS_FILE, REPORT_FILE,
};
