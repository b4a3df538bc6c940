//! Experiment orchestration: run configurations, the training loop, grids
//! of (weighting, class, model, size, seed) cells and report emission.

pub mod config;
pub mod grid;
pub mod presets;
pub mod report;
pub mod train;

pub use config::{Cell, Data, DatasetConfig, EvalConfig, GridSpec, LrSchedule, OptimConfig, RunConfig, OUTPUT_ROOT_ENV};
pub use grid::{evaluate, run_cell, run_cells, run_grid, CellResult, Evaluation, GridResults};
pub use report::{emit_report, read_results_csv, write_results_csv};
pub use train::{init_store, load_run, train, LogEntry, TrainOutcome};
