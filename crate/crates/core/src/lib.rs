//! Lag-robust LiDAR-camera BEV detection at desk scale.
//!
//! The pipeline encodes three compensated history clouds and the observed
//! (possibly lagged) cloud with one pillar encoder, predicts the current
//! LiDAR feature with a Swin-LSTM, realigns predicted and observed features
//! against a camera BEV reference with deformable convolutions, combines
//! them and feeds a center-heatmap detector. A synthetic scene simulator
//! supplies data.

pub mod bev_encoder;
pub mod detection_head;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod pointcloud;
pub mod pose;
pub mod predictor;
pub mod scene_sim;
pub mod temporal_data;
pub mod train_eval;

pub use error::{Error, Result};
pub use pose::SE3Pose;

/// Process exit codes used by the command-line tool.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const DIVERGENCE: i32 = 4;
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => exit_code::CONFIG,
            Error::Divergence(_) => exit_code::DIVERGENCE,
            Error::Nn(timealign_nn::NnError::Config(_)) => exit_code::CONFIG,
            _ => exit_code::DATA,
        }
    }
}
