//! Every numeric default in one place.
//!
//! CLI subcommands and test fixtures resolve their defaults from here; no
//! other module hard-codes a tunable constant.

use crate::tensor::NormOrder;

/// Occupancy threshold ε: a numerical guard against floating-point rounding,
/// not a tuned hyperparameter (feature norms are either exactly zero or O(1)).
pub const EPSILON: f64 = 1e-5;

/// Temperature of the soft occupancy sigmoid.
pub const TAU_SOFT: f64 = 1.0;

/// Weight of the soft nonvoid ratio in the training loss.
pub const LAMBDA_NV: f64 = 0.01;

/// Order of the per-voxel feature norm used for occupancy.
pub const NORM_ORDER: NormOrder = NormOrder::L2;

/// Embedding convolution kernel and stride (patch embedding).
pub const EMBED_KERNEL: usize = 2;
pub const EMBED_STRIDE: usize = 2;

/// Attention heads per stage.
pub const HEADS: usize = 4;

/// Pooling stride between resolution levels.
pub const S_POOL: usize = 2;

/// Kernel extent of residual sparse convolution blocks.
pub const SPARSE_CONV_KERNEL: usize = 3;

/// Hidden width multiplier of block MLPs.
pub const MLP_EXPANSION: usize = 2;

/// Layer-norm stabilizer.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Smoothing constant of the soft Dice loss (added to numerator and
/// denominator so a perfect prediction scores exactly zero loss).
pub const DICE_SMOOTH: f64 = 1e-6;

/// Surface-distance tolerance of NSD, in voxel units.
pub const NSD_TOLERANCE: f64 = 1.0;

/// Histogram bins for the background-mode estimate.
pub const HISTOGRAM_BINS: usize = 512;

/// Central-difference step of gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Relative tolerance for block-level and end-to-end gradient checks.
pub const FD_TOLERANCE_BLOCK: f64 = 1e-4;
pub const FD_TOLERANCE_NET: f64 = 1e-3;

/// Toy training-loop defaults: two resolution levels, small channels, plain
/// gradient descent.
pub const TOY_STAGES: usize = 2;
pub const TOY_CHANNELS: [usize; 2] = [12, 24];
pub const TOY_WINDOW: [usize; 2] = [4, 4];
pub const TOY_SUBSET_CAPACITY: [usize; 2] = [16, 16];
pub const TOY_CLASSES: usize = 2;
pub const TOY_LEARNING_RATE: f64 = 0.2;
pub const TOY_STEPS: usize = 50;

/// Divergence guard of the training loop.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// ε-sweep grid: decade steps across twelve orders of magnitude.
pub fn epsilon_sweep_grid() -> Vec<f64> {
    (-11..=1).map(|e| 10f64.powi(e)).collect()
}
