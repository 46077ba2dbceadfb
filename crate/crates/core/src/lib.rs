//! Joint cross-attention fusion of audio and visual features for
//! per-clip valence/arousal regression, with feature-concatenation and
//! vanilla cross-attention baselines, exact gradients, CCC training and
//! a spectrogram front end.

pub mod audio;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradients;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use baselines::{concat_forward, vanilla_ca_forward, ConcatParams, VanillaCaParams};
pub use data::SubSequence;
pub use error::{Error, Result};
pub use gradients::{grad_check, GradCheckReport};
pub use metrics::{ccc, ccc_loss, CccReport};
pub use model::{
    Dims, ForwardTrace, FusionModel, HeadSpec, JcaParams, ModalityFeatures, Model, ModelKind,
    Target,
};
pub use numerics::Matrix;
pub use training::{train, TrainConfig, TrainHistory};
