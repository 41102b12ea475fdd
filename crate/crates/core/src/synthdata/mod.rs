//! Synthetic crowd scene generation, ground-truth density rasterization,
//! and the on-disk dataset format.

mod io;
mod scene;

pub use io::{
    density_path, image_path, load_dataset, load_scene, manifest_path, points_path, read_manifest,
    read_pgm16, read_points_csv, save_scene, write_manifest, write_pgm16, write_points_csv,
};
pub use scene::{downsample_density, generate_scene, rasterize_density, SceneSample, SceneSpec};
