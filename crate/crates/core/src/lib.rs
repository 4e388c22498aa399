//! Self-supervised reconstruction of sparse-view parallel-beam CT data.
//!
//! The crate bundles everything needed to train an image-domain CNN with a
//! projection-domain loss on held-out projection angles, and to compare it
//! against the image-domain (Noise2Inverse) objective, filtered
//! backprojection and total-variation reconstruction:
//!
//! + [`tomo`]: 2D parallel-beam geometry, Joseph forward projector with its
//!   exact transpose, filtered backprojection and angle restriction.
//! + [`noise`]: post-log Poisson transmission noise.
//! + [`split`]: modular angle partitions and the subset collection used to
//!   build network inputs and loss targets.
//! + [`neural`]: a small reverse-mode autodiff tape, an encoder-decoder CNN
//!   with skip connections and Adam.
//! + [`train`]: the two training objectives, training loop and inference.
//! + [`tv`]: Chambolle-Pock total-variation reconstruction.
//! + [`metrics`]: PSNR and SSIM.
//! + [`phantom`], [`io`], [`experiment`]: data generation, file formats and
//!   the end-to-end method comparison.

pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod neural;
pub mod noise;
pub mod phantom;
pub mod split;
pub mod tomo;
pub mod train;
pub mod tv;

pub use error::{Error, Result};
pub use tomo::{Filter, Geometry, Image, Sinogram};
