//! Image I/O, manifests, aligned patch sampling and the synthetic dataset.

mod image;
mod manifest;
mod patches;
mod synth;

pub(crate) use image::write_atomic;
pub use image::{load_image, save_image, ImageBuffer};
pub use manifest::{
    build_synthetic_manifest, write_synthetic_references, DatasetManifest, ManifestRecord, MANIFEST_FILE,
    MANIFEST_HEADER,
};
pub use patches::{grid_coords, random_coords, sample_patches, PatchBatch, PatchCoord, PatchMode};
pub use synth::{pseudo_mos, synth_distort, synth_reference, DistortionKind, MAX_SEVERITY};
