//! Loss terms and the auto-decoder training loop.

mod losses;
mod trainer;

pub use losses::{
    loss_and_grads, loss_correction, loss_latent, loss_normal, loss_sdf, loss_smooth, shape_objective, total_loss,
    BatchItem, GradMode, LossTerms, LossWeights, ShapeObjective,
};
pub use trainer::{fit, fit_latent, write_history_csv, EpochRecord, LatentFitConfig, TrainConfig, Trainer};
