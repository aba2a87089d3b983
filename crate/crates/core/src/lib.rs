//! Continuous field representation of Gaussian splats: ground-truth fields,
//! triplane neural fields, a toy VAE and latent diffusion model, and
//! octree-guided extraction back to discrete splats.

pub mod diffusion;
pub mod error;
pub mod extraction;
pub mod field;
pub mod field_api;
pub mod gs_model;
pub mod gt_functions;
pub mod io;
pub mod math;
pub mod metrics;
pub mod numeric;
pub mod rng;
pub mod toy;
pub mod vae;

pub use error::{Error, Result};
pub use field_api::GaussianField;
pub use gs_model::{Attributes, Gaussian, GaussianSplat, NormalizationTransform};
pub use gt_functions::{FieldSampleSet, GroundTruthField, Mapping, SpatialIndex, TruncationConfig};
pub use math::{Quat, Vec3};
