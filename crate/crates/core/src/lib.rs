//! Interactive deformable 3D registration by test-time optimization.
//!
//! A dense displacement field is optimized with Adam against either the
//! whole-image loss (image-specific optimization, ISO) or a loss restricted
//! to a reviewer-drawn box (region-specific optimization, RSO). The
//! [`engine`] module ties both into an init → ISO → RSO review workflow.

pub mod engine;
pub mod error;
pub mod loss;
pub mod phantom;
pub mod transform;
pub mod volume;

pub use error::{Error, ErrorKind, Result};
pub use loss::{GradientShareReport, LossConfig, RegionPartition};
pub use transform::{DisplacementField, RoiBox};
pub use volume::{Dims, Volume3};
