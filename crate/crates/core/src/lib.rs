//! Panoptic segmentation toolkit: a deterministic CPU forward pass of a
//! four-branch FPN network with inter-task feature flows, the detection and
//! fusion post-processing, panoptic quality evaluation and COCO panoptic I/O.

pub mod checkpoint;
pub mod detection;
pub mod error;
pub mod evaluate;
pub mod ftns;
pub mod fusion;
pub mod heads;
pub mod model;
pub mod panoptic;
pub mod panoptic_io;
pub mod pq;
pub mod pyramid;
pub mod subnets;
pub mod tensor;

pub use error::{Error, Result};
