//! Raster containers, file formats, geometric preprocessing and synthetic data.

mod geometry;
mod manifest;
mod png;
mod raster;
mod synthetic;

pub use geometry::{
    coarse_training_patch, random_crop, resize_bilinear, resize_depth, PadOffset, Raster,
    COARSE_DOWNSAMPLE_SIZE, KITTI_PAD_SIZE, TRAIN_CROP_SIZE,
};
pub(crate) use geometry::{bilinear_taps, resize_plane};
pub use manifest::{load_manifest, parse_manifest, write_manifest, write_synthetic_dataset, SampleRecord};
pub use png::{read_depth_png16, read_rgb_png, write_depth_png16, write_rgb_png, DEFAULT_DEPTH_SCALE};
pub use raster::{DepthMap, RgbImage};
pub use synthetic::{
    depth_color, generate_synthetic_scene, SyntheticSpec, HIGH_SYNTHETIC_DEPTHS, LOW_SYNTHETIC_DEPTHS,
};
