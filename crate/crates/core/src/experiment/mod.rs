//! Experiment families: last-layer-only finetuning, IL x LL grids and
//! graduated multiplier schedules swept over scales, with their metrics.

mod graduated;
mod grid;
pub mod metrics;
mod recommend;
mod runs;

pub use graduated::{graduated_schedule, GraduatedLayout, GraduatedSpec};
pub use grid::{power_of_ten, GridSpec};
pub use metrics::{alpha, beta, percent_gain};
pub use recommend::{recommend_multipliers, Recommender};
pub use runs::*;
