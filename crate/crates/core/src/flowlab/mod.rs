//! Toy flow matching: analytic Gaussian flows, 2D datasets, training and metrics.

mod data;
mod gaussian;
mod metrics;
mod train;

pub use data::{eight_gaussians_centers, nearest_mode, toy_dataset, ToyDataset};
pub use gaussian::{gaussian_flow_velocity, GaussianFlowSpec};
pub use metrics::{density_pgm, energy_distance, write_pgm};
pub use train::{
    cfm_loss, grad, train, write_loss_csv, Optimizer, ToyFlow, TrainConfig, TrainReport,
};
