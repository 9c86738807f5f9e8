//! Multi-view spine landmark localization and identification on simulated
//! radiographs.
//!
//! The pipeline turns a CT-like attenuation volume into a set of fused,
//! labeled 3D vertebra centroids:
//!
//! 1. [`volume`] / [`phantom`] — voxel volumes (load/save, resampling,
//!    trilinear sampling) and a synthetic spine phantom generator.
//! 2. [`geometry`] / [`drr`] — a rotating source/detector rig around the
//!    volume's vertical axis, perspective projection and its inverse, and
//!    ray-marched projection images.
//! 3. [`detect2d`] — per-view 2D centroid detection: Gaussian heatmap
//!    synthesis, density-peak extraction with sub-pixel refinement, and a
//!    pluggable detector simulator standing in for a trained network.
//! 4. [`ident2d`] — per-view, per-detection class probability rows averaged
//!    from a pixel probability field, with a pluggable classifier simulator.
//! 5. [`sequence_dp`] — the anatomy-aware dynamic program over a probability
//!    map: accumulated best chain score, a sequence quality loss, and
//!    consecutive-label correction anchored on the best final row entry.
//! 6. [`fusion`] — cross-view correspondence by vertical rank, least-squares
//!    triangulation of back-projected rays, and sequence-weighted soft voting
//!    of the per-view probability maps.
//! 7. [`metrics`] — identification-rate / localization-error scoring and the
//!    view-count ablation sweep.
//! 8. [`pipeline`] — one-call orchestration of the above, deterministic for a
//!    fixed seed regardless of thread count.
//!
//! All randomness is seeded [`rand_chacha`] and every stage is a pure
//! function of its inputs, so a run is reproducible bit-for-bit.

pub mod config;
pub mod detect2d;
pub mod drr;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod ident2d;
pub mod labels;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
mod seeding;
pub mod sequence_dp;
pub mod volume;

pub use error::{Error, Result};
pub use labels::{Annotation3, VertebraLabel, DEFAULT_CATEGORIES};
pub use volume::Volume3;
