//! Reconstruction metrics, batch matching, experiment grids and plots.

mod grid;
mod metrics;
mod plot;

pub use grid::{
    defense_label, run_grid, run_scenario, AttackEntry, CellRecord, DatasetEntry, ExperimentGrid, GridCell,
    GridManifest, GridReport, GridRow, ModelEntry, NetSettings, ScenarioOutcome, DEFAULT_SEEDS,
};
pub use metrics::{mae, match_batch, mse, smape, MetricReport, SampleMetrics, MAX_EXHAUSTIVE_BATCH, SMAPE_ZERO};
pub use plot::{emit_plots, PlotInput};
