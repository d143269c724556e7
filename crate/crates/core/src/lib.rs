//! Query-based MaxViT U-Net for scribble-supervised medical image
//! segmentation.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod edge;
pub mod error;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod query;
pub mod train;

pub use error::{Error, Result};
