//! Depth-guided one-stage scene graph generation at desk scale.
//!
//! The crate covers the full pipeline: synthetic paired (RGB, depth, scene
//! graph) data, HHA re-encoding of depth, a dense center-point/relation-field
//! codec, a small convolutional teacher/student pair whose deformable-conv
//! offsets carry the distilled depth knowledge, the two-phase training
//! protocol with its ablations, and the scene-graph evaluation protocol
//! (recall@K with and without graph constraint, mean recall, zero-shot
//! recall, AP50, throughput).

pub mod autodiff;
pub mod hha;
pub mod error;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
