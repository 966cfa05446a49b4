//! MAP inference on chain-structured LiDAR-inertial odometry factor graphs.
//!
//! Keyframes form a chain: each one may carry a GPS factor, and consecutive
//! keyframes are tied by between (LiDAR odometry) and motion (inertial)
//! factors. Least-squares steps are solved by variable elimination with
//! partial Householder QR, either front to back or from both ends toward the
//! middle.

pub mod blockla;
pub mod eliminate;
pub mod error;
pub mod factors;
pub mod graph;
pub mod incremental;
pub mod io;
pub mod metrics;
pub mod perfmodel;
pub mod solver;
pub mod storage;
pub mod synth;

pub use blockla::Mat;
pub use eliminate::{ChainBayesNet, ChainConditional, ElimMode, Exec, TauFactor, TauPolicy};
pub use error::{Error, Result};
pub use factors::{
    BetweenFactor, Factor, FactorKind, GpsFactor, KeyframeState, MotionFactor, StateLayout, WhitenedBlockRow,
};
pub use graph::ChainFactorGraph;
pub use incremental::ChainBayesTree;
pub use solver::{gauss_newton, SolveConfig, SolveReport};
