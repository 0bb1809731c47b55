//! Blind, fully constrained hyperspectral unmixing.
//!
//! A scene `S` (bands x pixels) is explained by its own columns,
//! `S ~ S_w X`, with `X` nonnegative and column-stochastic. A row-sparsity
//! (group lasso) penalty leaves only the rows of pure pixels nonzero.
//! [`glup`] solves the convex problem by ADMM and [`nglup`] adds a
//! heteroscedastic noise model through an outer reweighting loop.

pub mod baselines;
pub mod cli;
pub mod error;
pub mod glup;
pub mod matrix_io;
pub mod nglup;
pub mod prox;
pub mod scene;
pub mod selection;
pub mod synth;

pub use error::{Result, UnmixError};
pub use glup::{glup_solve, GlupConfig, SolveReport};
pub use nglup::{nglup_solve, NglupConfig, NglupReport, WeightPolicy, WeightSource};
pub use scene::{restrict_columns, AbundanceEstimate, CandidateSet, SceneGroundTruth, SpectralScene};
pub use selection::{deduplicate, detect_endmembers, mutual_coherence, EndmemberSet};
pub use synth::{compute_metrics, synthesize_scene, QualityMetrics, SynthConfig};
