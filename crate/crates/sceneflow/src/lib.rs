//! End-to-end stereo scene flow estimation at desk scale.
//!
//! The pipeline: stereo image quads in, dense 4-channel scene flow
//! (optical flow u, v plus disparities at t and t+1) out, learned
//! adversarially by a conditioned encoder-decoder generator against an
//! unconditioned critic. The crate also ships the file-format codecs the
//! datasets use, a synthetic data generator with exact ground truth, the
//! training loop, and evaluation/reporting tools.

pub mod eval;
pub mod io;
pub mod loss;
pub mod net;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod types;
pub mod viz;

pub use tensor::{pack_input, pack_target, unpack_input, unpack_target};
pub use types::{
    CameraRig, CoreError, DisparityPair, FlowField, Image2D, SceneFlowField, StereoQuad,
};
