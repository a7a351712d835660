//! Auto-context diffeomorphic registration of tissue segmentation maps.
//!
//! Deformations are parameterized by stationary velocity fields, integrated
//! by scaling and squaring, and estimated per image pair by adaptive-moment
//! descent on a similarity + smoothness + tissue-aware Jacobian objective.
//! The outer auto-context loop repeatedly registers the warped moving map
//! and composes the incremental fields, always resampling the original
//! moving map with the composed field.
//!
//! Conventions used throughout:
//! - voxel `(x, y, z)` is stored at `x + nx * (y + ny * z)`;
//! - displacements are in voxel units of the fixed grid, `φ(x) = x + u(x)`;
//! - `compose(a, b)` is `a ∘ b`, i.e. `x ↦ a(b(x))`, so warping by the
//!   composition equals warping by `a` and then by `b`.

pub mod autocontext;
pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod optimizer;
pub mod phantom;
pub mod transform;
pub mod volume;

pub use autocontext::{register_auto_context, AutoContextConfig, IterationDiagnostics, RegistrationResult};
pub use error::{Error, Result};
pub use loss::{LossBreakdown, LossWeights};
pub use optimizer::{estimate_velocity, OptimizerConfig};
pub use phantom::PhantomSpec;
pub use transform::{DisplacementField, VelocityField};
pub use volume::{GridMeta, LabelVolume, ScalarVolume, SoftTissueMap, Tissue};
