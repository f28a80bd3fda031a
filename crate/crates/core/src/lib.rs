//! Hand segmentation masks and 21-joint 3D hand skeletons from WiFi channel
//! state information, with a synthetic multipath simulator standing in for
//! capture hardware.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`). Training
//! runs in `f32`; gradient checks use `f64`. The aliases below name the
//! common instantiations.

pub mod apps;
pub mod csi_processing;
pub mod dataset_io;
pub mod error;
pub mod geom;
pub mod hand_model;
pub mod kv;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod scalar;
pub mod synth_sim;
pub mod train_harness;

pub use dataset_io::{Checkpoint, Dataset};
pub use error::{Error, Result};
pub use hand_model::{HandModel, HandPose};
pub use mask::HandMask;
pub use network::NetworkConfig;

pub type HandNet32 = network::HandNet<f32>;
pub type HandNet64 = network::HandNet<f64>;
pub type HandPose32 = hand_model::HandPose<f32>;
pub type HandPose64 = hand_model::HandPose<f64>;
pub type CsiSample32 = csi_processing::CsiSample<f32>;
pub type CsiSample64 = csi_processing::CsiSample<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
