//! Learning-based personalized car-following driver models.
//!
//! Two predictors share a Gaussian mixture fitted by k-means-initialized EM
//! over the joint vector `[z_t, a_t]` of driving situation and host
//! acceleration:
//!
//! * [`hmm`]: each mixture component is a hidden state; the forward variable
//!   weights per-component conditional-Gaussian regressions (GMM+HMM).
//! * [`pdf`]: the acceleration maximizing the mixture density at the observed
//!   situation, searched over a bounded interval (GMM+PDF).
//!
//! [`preprocess`] turns trajectories into smoothed feature sequences,
//! [`evaluation`] runs the grouped cross-validation sweeps, and [`synth`]
//! produces IDM-driven synthetic corpora to train and test on.

pub mod error;
pub mod evaluation;
pub mod gaussian;
pub mod gmm;
pub mod gmr;
pub mod hmm;
pub mod io;
pub mod model;
pub mod pdf;
pub mod preprocess;
pub mod synth;

pub use error::{Error, Result};
pub use model::{
    AccelBounds, CvReport, FeatureSet, FittedModel, FoldResult, GmmParams, HmmParams, Method,
    ObservationVector, Trajectory, TrajectorySample,
};
