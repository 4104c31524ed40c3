//! Patch-prior image restoration with flat-tail Gaussian mixtures, a balanced
//! Gaussian search tree and jittered patch subsampling.

pub mod counters;
pub mod error;
pub mod gmm;
pub mod image;
pub mod linalg;
pub mod metrics;
pub mod operators;
pub mod patches;
pub mod solver;
pub mod synth;
pub mod tree;

mod binio;

pub use counters::OpCounter;
pub use error::{FepllError, Result};
pub use gmm::{FlatTailComponent, GmmModel, ScoreContext};
pub use image::Image;
pub use operators::{CgConfig, DegradationOperator, Kernel};
pub use patches::GridMode;
pub use solver::{restore, RestorationConfig};
pub use tree::{build_tree, GmmTree};
