//! Variance-preserving score-based diffusion at desk scale.
//!
//! The crate covers the whole loop: discrete noise schedules and their
//! attenuation factors, exact forward simulation, analytic and learned score
//! fields, Euler–Maruyama reverse integration, the temporal-correlation and
//! Gaussianity diagnostics, polynomial-kernel KID, and U-turn sampling where a
//! truncated forward run seeds the reverse run.
//!
//! Sample matrices are `ndarray::Array2<f64>` with one sample per row.
//! Path ensembles are `Array3<f64>` indexed `[sample, recorded step, dim]`.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod forward;
pub mod reverse;
pub mod rng;
pub mod schedule;
pub mod score;
pub mod series;
pub mod uturn;

pub use error::{Error, Result};
pub use schedule::{Schedule, ScheduleKind, ScheduleSpec};
pub use series::DiagnosticSeries;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
