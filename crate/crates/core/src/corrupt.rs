//! Robustness corruptions at five severities: Gaussian noise, Gaussian blur
//! and a composed geometric transform (flip, rotate, shear, occlude).
//!
//! Random draws come from `(seed, kind, image content hash)` and do not
//! depend on severity, so one image sees the same underlying noise field and
//! the same unit draws at every level; only their scale changes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imageops;
use crate::raster::{ImageStore, Raster};
use crate::seeding::rng_for;
use crate::taxonomy::{DatasetManifest, SampleRecord};

pub const SEVERITIES: usize = 5;

#[derive(Debug, Error)]
pub enum CorruptError {
    #[error("severity {0} outside 1..=5")]
    Severity(u8),
    #[error("unknown corruption kind `{0}`")]
    UnknownKind(String),
    #[error("invalid severity table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    GaussianBlur,
    Geometric,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [CorruptionKind::GaussianNoise, CorruptionKind::GaussianBlur, CorruptionKind::Geometric];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Geometric => "geometric",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = CorruptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "gaussian_noise" | "noise" => Ok(CorruptionKind::GaussianNoise),
            "gaussian_blur" | "blur" => Ok(CorruptionKind::GaussianBlur),
            "geometric" | "geo" => Ok(CorruptionKind::Geometric),
            _ => Err(CorruptError::UnknownKind(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricParams {
    pub max_rotation_deg: f64,
    pub max_shear: f64,
    /// Fraction of the image area covered by the occluder.
    pub occlusion_fraction: f64,
    pub flip_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeverityTable {
    pub noise_variance: Vec<f64>,
    pub blur_sigma: Vec<f64>,
    pub geometric: Vec<GeometricParams>,
}

impl Default for SeverityTable {
    fn default() -> Self {
        SeverityTable {
            noise_variance: vec![0.01, 0.045, 0.08, 0.115, 0.15],
            blur_sigma: vec![0.5, 1.0, 1.5, 2.0, 3.0],
            geometric: (1..=SEVERITIES)
                .map(|s| GeometricParams {
                    max_rotation_deg: 9.0 * s as f64,
                    max_shear: 0.04 * s as f64,
                    occlusion_fraction: 0.04 * s as f64,
                    flip_probability: 0.5,
                })
                .collect(),
        }
    }
}

fn strictly_increasing(name: &str, v: &[f64]) -> Result<(), CorruptError> {
    if v.len() != SEVERITIES {
        return Err(CorruptError::Table(format!("{name} needs {SEVERITIES} entries, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) || v.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CorruptError::Table(format!("{name} must be nonnegative and strictly increasing: {v:?}")));
    }
    Ok(())
}

impl SeverityTable {
    pub fn validate(&self) -> Result<(), CorruptError> {
        strictly_increasing("noise_variance", &self.noise_variance)?;
        strictly_increasing("blur_sigma", &self.blur_sigma)?;
        let g = &self.geometric;
        strictly_increasing("geometric.max_rotation_deg", &g.iter().map(|p| p.max_rotation_deg).collect::<Vec<_>>())?;
        strictly_increasing("geometric.max_shear", &g.iter().map(|p| p.max_shear).collect::<Vec<_>>())?;
        strictly_increasing("geometric.occlusion_fraction", &g.iter().map(|p| p.occlusion_fraction).collect::<Vec<_>>())?;
        if g.iter().any(|p| p.occlusion_fraction > 1.0 || !(0.0..=1.0).contains(&p.flip_probability)) {
            return Err(CorruptError::Table("occlusion_fraction and flip_probability must lie in [0, 1]".into()));
        }
        if g.windows(2).any(|w| w[1].flip_probability < w[0].flip_probability) {
            return Err(CorruptError::Table("flip_probability must be nondecreasing".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, CorruptError> {
        let t: SeverityTable = toml::from_str(text).map_err(|e| CorruptError::Table(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("severity table serializes")
    }

    /// First 16 hex digits of the SHA-256 of the table's JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("severity table serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self, CorruptError> {
        let spec = CorruptionSpec { kind, severity, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CorruptError> {
        if !(1..=SEVERITIES as u8).contains(&self.severity) {
            return Err(CorruptError::Severity(self.severity));
        }
        Ok(())
    }

    fn level(&self) -> usize {
        self.severity as usize - 1
    }
}

/// Pixel rectangle `[x, x+width) × [y, y+height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// What was applied. Only the fields of the applied kind are set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionMeta {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blur_sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flipped: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shear: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion: Option<Rect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<String>,
}

pub const GEOMETRIC_ORDER: &str = "flip>rotate>shear>occlude";

fn image_key(img: &Raster) -> u64 {
    u64::from_le_bytes(img.content_hash()[..8].try_into().expect("8 bytes"))
}

fn stream(img: &Raster, spec: &CorruptionSpec) -> rand_chacha::ChaCha8Rng {
    rng_for(spec.seed, &[spec.kind as u64, image_key(img)])
}

/// The noise added before clipping: `sqrt(variance) · z` per sample.
pub fn noise_field(img: &Raster, spec: &CorruptionSpec, table: &SeverityTable) -> Vec<f64> {
    let sd = table.noise_variance[spec.level()].sqrt();
    imageops::standard_normal_field(img.data().len(), &mut stream(img, spec))
        .into_iter()
        .map(|z| sd * z)
        .collect()
}

pub fn corrupt(img: &Raster, spec: &CorruptionSpec, table: &SeverityTable) -> Result<Raster, CorruptError> {
    corrupt_detailed(img, spec, table).map(|(r, _)| r)
}

pub fn corrupt_detailed(
    img: &Raster,
    spec: &CorruptionSpec,
    table: &SeverityTable,
) -> Result<(Raster, CorruptionMeta), CorruptError> {
    spec.validate()?;
    let level = spec.level();
    let mut meta = CorruptionMeta {
        kind: spec.kind,
        severity: spec.severity,
        seed: spec.seed,
        noise_variance: None,
        blur_sigma: None,
        flipped: None,
        rotation_deg: None,
        shear: None,
        occlusion: None,
        order: None,
    };
    let out = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let variance = table.noise_variance[level];
            meta.noise_variance = Some(variance);
            let z = imageops::standard_normal_field(img.data().len(), &mut stream(img, spec));
            imageops::add_scaled_noise(img, &z, variance)
        }
        CorruptionKind::GaussianBlur => {
            let sigma = table.blur_sigma[level];
            meta.blur_sigma = Some(sigma);
            imageops::gaussian_blur(img, sigma)
        }
        CorruptionKind::Geometric => {
            let p = table.geometric[level];
            let mut rng = stream(img, spec);
            let flip_u: f64 = rng.random();
            let rot_u: f64 = rng.random_range(-1.0..=1.0);
            let shear_u: f64 = rng.random_range(-1.0..=1.0);
            let (ox, oy): (f64, f64) = (rng.random(), rng.random());

            let flipped = flip_u < p.flip_probability;
            let angle = rot_u * p.max_rotation_deg;
            let shear = shear_u * p.max_shear;
            let (w, h) = (img.width(), img.height());
            let side = p.occlusion_fraction.sqrt();
            let ow = ((w as f64 * side).round() as usize).min(w);
            let oh = ((h as f64 * side).round() as usize).min(h);
            let rect = Rect {
                x: ((ox * (w - ow + 1) as f64) as usize).min(w - ow),
                y: ((oy * (h - oh + 1) as f64) as usize).min(h - oh),
                width: ow,
                height: oh,
            };

            let mut out = if flipped { imageops::flip_h(img) } else { img.clone() };
            out = imageops::rotate(&out, angle);
            out = imageops::shear(&out, shear);
            out = imageops::fill_rect(&out, rect.x, rect.y, rect.width, rect.height, img.mean() as f32);

            meta.flipped = Some(flipped);
            meta.rotation_deg = Some(angle);
            meta.shear = Some(shear);
            meta.occlusion = Some(rect);
            meta.order = Some(GEOMETRIC_ORDER.into());
            out
        }
    };
    Ok((out, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptedRecord {
    #[serde(flatten)]
    pub record: SampleRecord,
    pub source_path: String,
    pub corruption: CorruptionMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordFailure {
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct CorruptOutcome {
    pub records: Vec<CorruptedRecord>,
    pub failures: Vec<RecordFailure>,
}

impl CorruptOutcome {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("corrupted record serializes"));
            out.push('\n');
        }
        out
    }

    /// The corrupted records as a plain manifest pointing at the new images.
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest { records: self.records.iter().map(|r| r.record.clone()).collect() }
    }
}

pub fn corrupted_path(prefix: &str, spec: &CorruptionSpec, id: &str) -> String {
    format!("{prefix}/{}/s{}/{id}.png", spec.kind, spec.severity)
}

/// Corrupts every record once; images are written to
/// `<prefix>/<kind>/s<severity>/<id>.png` in `store`. Records whose image
/// cannot be read or written are collected as failures.
pub fn corrupt_manifest(
    manifest: &DatasetManifest,
    spec: &CorruptionSpec,
    table: &SeverityTable,
    store: &dyn ImageStore,
    prefix: &str,
) -> Result<CorruptOutcome, CorruptError> {
    spec.validate()?;
    table.validate()?;
    let results: Vec<Result<CorruptedRecord, RecordFailure>> = manifest
        .records
        .par_iter()
        .map(|r| {
            let fail = |message: String| RecordFailure { id: r.id.clone(), message };
            let img = store.load(&r.path).map_err(|e| fail(e.to_string()))?;
            let (out, meta) = corrupt_detailed(&img, spec, table).map_err(|e| fail(e.to_string()))?;
            let path = corrupted_path(prefix, spec, &r.id);
            store.save(&path, &out).map_err(|e| fail(e.to_string()))?;
            Ok(CorruptedRecord {
                record: SampleRecord { path, ..r.clone() },
                source_path: r.path.clone(),
                corruption: meta,
            })
        })
        .collect();
    let mut outcome = CorruptOutcome::default();
    for r in results {
        match r {
            Ok(rec) => outcome.records.push(rec),
            Err(f) => outcome.failures.push(f),
        }
    }
    Ok(outcome)
}
