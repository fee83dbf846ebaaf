//! Deterministic CNN training stack for grayscale medical-style images.
//!
//! Everything is seeded and accumulation orders are fixed, so a run is
//! reproducible bit for bit: same seed, same bytes out.

// `!(x >= 0.0)` rejects NaN along with negatives; indexed loops keep the
// documented accumulation orders visible in the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod augment;
pub mod data;
pub mod error;
pub mod image;
pub mod layers;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
pub use rng::SeededRng;
pub use tensor::{Dist, Reduce, Shape, Tensor};
