//! Scar segmentation on anatomical surface meshes via a graph cut whose
//! unary (t-link) and pairwise (n-link) potentials are learned by small
//! fully-connected networks from surface-aligned intensity patches.
//!
//! The pipeline stages are:
//!
//! 1. **volio** – volume containers, trilinear sampling, normalization, file I/O.
//! 2. **phantom** – synthetic cavity/wall/scar volumes for end-to-end testing.
//! 3. **surface** – marching-cubes mesh extraction, normals, edge-graph geodesics.
//! 4. **flatmap** – azimuthal-equidistant projection of the mesh to a 2D map.
//! 5. **patches** – tangent-frame patch extraction and training-library assembly.
//! 6. **neural** – MLP forward/backward, SGD training of both potential networks.
//! 7. **graphcut** – energy assembly and exact min-cut binary labeling.
//! 8. **baselines** – Otsu and GMM-EM classifiers on per-vertex intensities.
//! 9. **eval** – confusion metrics, lambda and patch-size sweeps.
//! 10. **pipeline** – configuration, seed derivation, reproducible runs.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod flatmap;
pub mod graphcut;
pub mod neural;
pub mod par;
pub mod patches;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod surface;
pub mod vec3;
pub mod volio;

pub use error::{Error, Result};
