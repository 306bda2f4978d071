#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pvdiag::raster::Raster;
use pvdiag::seeding::rng_for;
use pvdiag::DefectClass;
use rand::Rng;
use sha2::{Digest, Sha256};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_pvdiag")
}

pub fn pvdiag(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn pvdiag")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = pvdiag(args);
    assert!(
        out.status.success(),
        "pvdiag {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Grayscale EL-style cell: a smooth brightness falloff, dark busbars,
/// thin fingers, per-pixel grain and a class-dependent defect mark.
pub fn el_cell(w: usize, h: usize, class: DefectClass, variant: u64) -> Raster {
    let mut rng = rng_for(variant, &[class.index() as u64]);
    let phase: f32 = rng.random_range(0.0..6.28);
    let base: f32 = rng.random_range(0.55..0.75);
    let grain: Vec<f32> = (0..w * h).map(|_| rng.random_range(-0.04..0.04)).collect();
    let (cx, cy) = (rng.random_range(0.3..0.7) * w as f32, rng.random_range(0.3..0.7) * h as f32);
    let slope: f32 = rng.random_range(-0.8..0.8);
    Raster::from_fn(w, h, |x, y| {
        let (xf, yf) = (x as f32, y as f32);
        let dx = (xf - w as f32 / 2.0) / w as f32;
        let dy = (yf - h as f32 / 2.0) / h as f32;
        let mut v = base - 0.35 * (dx * dx + dy * dy) + 0.05 * (xf * 0.3 + phase).sin();
        if x % (w / 3).max(1) == (w / 6).max(1) {
            v -= 0.35;
        }
        if y % 4 == 0 {
            v -= 0.08;
        }
        v += grain[y * w + x];
        let near = |a: f32, b: f32, r: f32| (a - b).abs() < r;
        match class {
            DefectClass::Crack if near(yf - cy, slope * (xf - cx), 1.0) => v -= 0.4,
            DefectClass::BlackCore if (xf - cx).hypot(yf - cy) < w as f32 / 5.0 => v *= 0.3,
            DefectClass::Finger if near(yf, cy, 1.0) && xf > cx => v -= 0.3,
            DefectClass::ThickLine if near(xf, cx, 2.0) => v -= 0.3,
            DefectClass::ShortCircuit if xf < w as f32 / 2.0 => v *= 0.4,
            DefectClass::HorizontalDislocation if near(yf, cy, 3.0) => v -= 0.2,
            DefectClass::VerticalDislocation if near(xf, cx, 3.0) => v -= 0.2,
            _ => {}
        }
        v.clamp(0.0, 1.0)
    })
}

/// (dataset, modality, label dir, class, count)
pub const CORPUS: &[(&str, &str, &str, DefectClass, usize)] = &[
    ("ds_a", "el", "crack", DefectClass::Crack, 40),
    ("ds_a", "el", "finger", DefectClass::Finger, 24),
    ("ds_a", "el", "clean_panel", DefectClass::CleanPanel, 30),
    ("ds_a", "el", "black_core", DefectClass::BlackCore, 6),
    ("ds_a", "el", "thick_line", DefectClass::ThickLine, 20),
    ("ds_b", "thermal", "crack", DefectClass::Crack, 15),
    ("ds_b", "thermal", "clean_panel", DefectClass::CleanPanel, 20),
];

/// Writes `root/<dataset>/<modality>/<label>/img_NNN.png`.
pub fn write_corpus(root: &Path, spec: &[(&str, &str, &str, DefectClass, usize)], size: usize) {
    for (ds, modality, label, class, n) in spec {
        for i in 0..*n {
            let img = el_cell(size, size, *class, (i as u64) << 8 | ds.len() as u64);
            img.save_png(root.join(ds).join(modality).join(label).join(format!("img_{i:03}.png"))).unwrap();
        }
    }
}

/// Relative path → SHA-256 of every file under `root`, minus `skip` names.
pub fn snapshot(root: &Path, skip: &[&str]) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    for e in walkdir::WalkDir::new(root).sort_by_file_name() {
        let e = e.unwrap();
        if !e.file_type().is_file() {
            continue;
        }
        let name = e.file_name().to_string_lossy();
        if skip.iter().any(|s| *s == name) {
            continue;
        }
        let bytes = std::fs::read(e.path()).unwrap();
        out.insert(e.path().strip_prefix(root).unwrap().to_path_buf(), hex::encode(Sha256::digest(&bytes)));
    }
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
