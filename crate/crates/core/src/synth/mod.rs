//! Procedural two-view dataset: identities, rendering, augmentation, PPM
//! images and the CSV manifest.

mod augment;
mod dataset;
mod image;
mod render;

pub use augment::{augment, AugmentConfig};
pub use dataset::{
    build_dataset, capture, capture_variation, CapturePair, Dataset, DatasetConfig, Manifest, ManifestRow, Split,
    MANIFEST_FILE,
};
pub use image::{images_to_tensor, resize, RgbImage};
pub use render::{generate_identity, render_capture, render_view, Blob, CaptureConditions, IdentitySpec, RenderConfig};
