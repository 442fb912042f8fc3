//! Two-branch ("mirror") UNet-3D lesion segmentation for co-registered PET/CT.
//!
//! The crate is organised bottom-up:
//!
//! - [`volumes`]: scalar volumes, label maps, sidecar file I/O, body-contour
//!   preprocessing and the synthetic phantom generator.
//! - [`tensor`]: a small reverse-mode engine over `N,C,D,H,W` tensors with
//!   exactly the primitives the network needs.
//! - [`net`]: the CT branch (tissue groups) and PET branch (lesions) joined at
//!   the bottleneck.
//! - [`optimize`]: losses, poly learning-rate decay, SGD, checkpoint averaging
//!   and the two training stages.
//! - [`sampler`]: patch enumeration, class-balanced epochs and augmentation.
//! - [`inference`]: half-overlap sliding windows with Gaussian blending and
//!   mirror test-time augmentation.
//! - [`metrics`]: Dice, false-positive and false-negative volume over 3D
//!   connected components.

pub mod error;
pub mod inference;
pub mod metrics;
pub mod net;
pub mod optimize;
pub mod sampler;
pub mod seed;
pub mod tensor;
pub mod volumes;

pub use error::{Error, Result};
pub use inference::{InferenceConfig, LesionModel, WeightMap, WindowPlan};
pub use metrics::{CohortReport, Connectivity, StudyMetrics};
pub use net::{BranchConfig, BranchFilter, MirrorConfig, MirrorNet, TissueGrouping};
pub use optimize::{Checkpoint, Stage, TrainConfig};
pub use sampler::{AugmentConfig, PatchIndex, Study};
pub use tensor::{Dims, Graph, Tensor, Var};
pub use volumes::{BoundingBox, LabelMap, LabelSemantics, Modality, PhantomConfig, Volume};
