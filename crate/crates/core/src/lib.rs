//! Regional region-text attention control for text-guided super-resolution.
//!
//! The crate builds the joint text/image attention mask that restricts each
//! image region to its own caption, applies it inside a two-stage masked
//! multi-head attention block, drives a toy denoising loop that gates the
//! regional stage on its first `K` steps, and checks every construction
//! against brute-force oracles.
//!
//! Module map:
//!
//! * [`scene_io`]: scene annotations, JSON persistence, detector/captioner clients
//! * [`box_prep`]: confidence filter, sort, truncate and pad
//! * [`region_raster`]: boxes to flattened latent-grid masks
//! * [`mask_assembly`]: the four-block joint mask
//! * [`attention`]: masked attention forward/backward and the block stages
//! * [`pipeline`]: the gated loop and artifact writers
//! * [`degrade`]: LR synthesis and PSNR
//! * [`verify`]: oracle suites behind `regattn verify`

pub mod attention;
pub mod bitmat;
pub mod box_prep;
pub mod degrade;
pub mod imageio;
pub mod mask_assembly;
pub mod pipeline;
pub mod region_raster;
pub mod rng;
pub mod scene_io;
pub mod verify;

pub use bitmat::BitMatrix;
