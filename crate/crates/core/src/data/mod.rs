//! Dataset layer: synthetic phantom generation, manifests, and splits.
//!
//! Every file this module produces is a function of (parameters, seed), so
//! regenerating a corpus yields byte-identical PGMs and manifests.

mod manifest;
mod phantom;
mod split;

pub use manifest::{load_manifest, save_manifest, ClassLabel, DatasetManifest, ManifestRow, Split};
pub use phantom::{blob_disc, generate_dataset, generate_phantom, PhantomParams};
pub use split::{split_dataset, SplitRatios};
