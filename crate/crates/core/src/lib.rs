//! Abstract gradient training (AGT).
//!
//! Trains a dense ReLU classifier with clipped SGD while maintaining interval
//! bounds on every parameter vector reachable when up to `k` training examples
//! are added or removed. The bounds certify that individual predictions are
//! unaffected by such changes, which in turn bounds their smooth sensitivity
//! for differentially private prediction release and tightens privacy
//! accounting.
//!
//! Module map:
//!
//! - [`interval`]: interval arithmetic on vectors and matrices.
//! - [`nn`]: the nominal MLP, cross-entropy loss and backpropagation.
//! - [`bounds`]: interval forward/backward passes giving gradient enclosures.
//! - [`trainer`]: the AGT training loop and descent-direction bounds.
//! - [`certifier`]: certificates, k-ladders and smooth-sensitivity bounds.
//! - [`mechanisms`]: noisy prediction release and Lambert-W accounting.
//! - [`oracle`]: brute-force retraining checks of all of the above.
//! - [`datasets`]: synthetic blobs and CSV ingestion.
//! - [`artifact`]: on-disk formats for models, boxes and bundles.

pub mod artifact;
pub mod bounds;
pub mod certifier;
pub mod datasets;
pub mod error;
pub mod interval;
pub mod mechanisms;
pub mod nn;
pub mod oracle;
pub mod parambox;
pub mod trainer;

pub use error::{AgtError, Result};
pub use nn::{LabeledExample, Mlp, ModelShape};
pub use parambox::ParamBox;
pub use trainer::{Mode, PerturbationModel, TrainConfig};
