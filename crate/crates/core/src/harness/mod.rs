//! Experiment driver: configs, checkpoint files, sweeps and reports.

pub mod checkpoint;
pub mod config;
pub mod sweep;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use config::{MethodGrid, SweepConfig};
pub use sweep::{
    read_trajectory, run_probe_report, run_sweep, write_trajectory, RunStatus, SweepOutcome, TradeoffRecord,
};
