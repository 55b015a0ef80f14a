//! HCMA-UNet: a hybrid CNN / state-space / axial-attention network for 3-D
//! lesion segmentation, the feature-guided region-aware loss used to train
//! it, and the small tensor engine both run on.

pub mod attention;
pub mod blocks;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod mism;
pub mod network;
pub mod module;
pub mod ssm;
pub mod stats;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{DType, Element, SeedStream, Tensor};
