//! Analytic defaults shared by the library and the command line.

/// Upper edge of the Low score bucket (inclusive).
pub const LOW_HI: f64 = 0.1;
/// Upper edge of the Mid score bucket (inclusive).
pub const HIGH_LO: f64 = 0.9;
/// No-tool score at or below which an instance needs the tool.
pub const NEED_THRESHOLD: f64 = 0.9;
/// Score differences at or below this magnitude count as neutral utility.
pub const EPS: f64 = 1e-9;
/// Probability threshold for estimator-driven call decisions.
pub const TAU: f64 = 0.5;
/// Total budget in currency units.
pub const BUDGET: f64 = 10_000.0;
/// Cross-validation folds.
pub const FOLDS: usize = 5;
/// Seed for every stochastic step.
pub const SEED: u64 = 42;

pub const MAX_EPOCHS: usize = 100;
pub const PATIENCE: usize = 5;
pub const L2_PENALTY: f64 = 1e-4;
pub const MAX_BATCH: usize = 200;
pub const VALIDATION_FRACTION: f64 = 0.1;
pub const IMPROVEMENT_TOLERANCE: f64 = 1e-4;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Hidden-layer configurations searched when training estimators.
pub const HIDDEN_GRID: &[&[usize]] = &[&[], &[128], &[256], &[128, 64], &[1024, 64]];
/// Initial learning rates searched when training estimators.
pub const LEARNING_RATE_GRID: &[f64] = &[1e-3, 1e-4];
