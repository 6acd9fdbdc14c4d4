//! Shared fixtures: a synthetic scene with the Indian Pines geometry.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use exitgate::data::hyperspectral::{
    write_cube, write_labels, INDIAN_PINES_BANDS, INDIAN_PINES_CLASSES, INDIAN_PINES_COLS,
    INDIAN_PINES_ROWS,
};
use exitgate::data::CubeHeader;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes a 145×145×200 cube whose first `16 · per_class` pixels (spread
/// over the scene) carry class spectra: a smooth per-class curve plus
/// uniform noise of amplitude `noise`. Returns (cube, labels) paths.
pub fn write_scene(dir: &Path, per_class: usize, noise: f32, seed: u64) -> (PathBuf, PathBuf) {
    let header = CubeHeader {
        rows: INDIAN_PINES_ROWS,
        cols: INDIAN_PINES_COLS,
        bands: INDIAN_PINES_BANDS,
    };
    let pixels = header.rows * header.cols;
    let labelled = INDIAN_PINES_CLASSES * per_class;
    assert!(labelled <= pixels);
    let stride = pixels / labelled;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0u16; pixels];
    for i in 0..labelled {
        labels[i * stride] = (i % INDIAN_PINES_CLASSES) as u16 + 1;
    }
    let mut values = Vec::with_capacity(pixels * header.bands);
    for &lab in &labels {
        for b in 0..header.bands {
            let base = if lab == 0 {
                1000.0
            } else {
                let k = f32::from(lab);
                1000.0 + 400.0 * (b as f32 * 0.02 * k + k).sin()
            };
            values.push(base + rng.gen_range(-noise..=noise));
        }
    }
    let cube = dir.join("scene.ipcube");
    let lab = dir.join("scene_labels.txt");
    write_cube(&cube, header, &values).unwrap();
    write_labels(&lab, header, &labels).unwrap();
    (cube, lab)
}

/// Writes a run config for the scene; `extra` lines are appended verbatim.
pub fn scene_config(dir: &Path, cube: &Path, labels: &Path, out: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "dataset = indian_pines\ncube = {}\nlabels = {}\noutput_dir = {}\n{extra}\n",
        cube.display(),
        labels.display(),
        out.display()
    );
    let path = dir.join(format!("run{}.cfg", fs::read_dir(dir).unwrap().count()));
    fs::write(&path, text).unwrap();
    path
}
