#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fusecond::scene::{Region, Scene};

/// 112 x 112 images (8 x 8 patches), N = 16 voxel grid, 6 sampling steps.
pub fn small_scene(image_seed: u64) -> Scene {
    Scene {
        height: 112,
        width: 112,
        channels: 3,
        regions: vec![
            Region::Rect { y0: 0, x0: 0, y1: 112, x1: 63 },
            Region::Disc { cy: 56.0, cx: 56.0, radius: 48.0 },
        ],
        image_seed,
        settings: Vec::new(),
    }
    .with("encoder.token_dim", 32)
    .with("flow.latent_dim", 16)
    .with("flow.resolution", 16)
    .with("flow.structure_resolution", 8)
    .with("sampler.steps", 6)
}

pub fn write_scene(scene: &Scene, dir: &Path) -> PathBuf {
    scene.write(dir).expect("scene written")
}

/// Contents of every artifact except the timing file.
pub fn artifact_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "runtime.txt")
        .map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap()))
        .collect()
}
