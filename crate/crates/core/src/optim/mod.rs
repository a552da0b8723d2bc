//! Update rules, learning-rate scheduling, early stopping and grid search.

mod grid;
mod optimizer;
mod record;
mod schedule;

pub use grid::{grid_search, Axis, AxisValue, GridPoint, HyperparameterSpace, PointResult, SearchOutcome};
pub use optimizer::{Optimizer, OptimizerHyper, OptimizerKind};
pub use record::{EpochRecord, RunStatus, TrainRecord};
pub use schedule::{early_stop, last_improvement, plateau_schedule, PlateauConfig, PlateauScheduler, IMPROVEMENT};
