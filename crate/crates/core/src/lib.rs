pub mod analytic;
pub mod arith;
pub mod config;
pub mod csv;
pub mod error;
pub mod field;
pub mod flow;
pub mod par;
pub mod residual;
pub mod rng;
pub mod scorenet;
pub mod sde;
pub mod train;

pub use analytic::{AnalyticScoreField, GmmSpec};
pub use arith::{BatchArith, FieldArith};
pub use config::{Config, FlatConfig};
pub use error::{Error, Result};
pub use field::{ScoreField, ZeroField};
pub use residual::{ResidualConfig, ResidualMode, ResidualReport};
pub use scorenet::{Activation, Adam, NetConfig, ScoreNet, Tape};
pub use sde::{KernelStats, SdeKind, SdeSpec};
pub use train::{Objective, TrainConfig, TrainReport, Weighting};
