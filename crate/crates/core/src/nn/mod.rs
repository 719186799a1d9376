//! Trainable building blocks and the Adam optimizer.

mod adam;
mod layers;
mod params;

pub use adam::{Adam, AdamConfig};
pub use layers::{
    hypercolumn, Activation, Backbone, BackboneConfig, BatchNorm, Conv2d, Linear, Mlp, MlpLayer, Stage, BN_EPS,
};
pub use params::{xavier_uniform, Mode, ParamId, ParamStore, Pass, PassOutcome};

/// Running-statistics decay for batch normalization.
pub const BN_DECAY: f64 = 0.9;
