//! Corpus curation: quota undersampling, minority augmentation and
//! stratified splitting.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageops;
use crate::raster::{ImageStore, Raster, RasterError};
use crate::seeding::{rng_for, str_key};
use crate::taxonomy::{apply_label_map, DatasetManifest, DefectClass, LabelMap, Modality, SampleRecord, Split, TaxonomyError};

#[derive(Debug, Error)]
pub enum CurateError {
    #[error("class `{0}` not present in manifest")]
    ClassAbsent(DefectClass),
    #[error("retention fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("invalid augment plan: {0}")]
    InvalidPlan(String),
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),
    #[error("no source images for class `{0}`")]
    NoSourceImages(DefectClass),
    #[error("record `{0}` already has a split")]
    AlreadySplit(String),
    #[error("augmented record `{id}` refers to missing source `{source_id}`")]
    OrphanAugmentation { id: String, source_id: String },
    #[error("augmented record `{id}` is in {got} but its source is in {expected}")]
    SplitLeak { id: String, expected: Split, got: Split },
    #[error("record `{id}`: {source}")]
    Image { id: String, source: RasterError },
    #[error("cannot scan `{path}`: {message}")]
    Scan { path: PathBuf, message: String },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

/// Non-fatal conditions reported alongside a result.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CurateWarning {
    /// The quota rounds a nonempty stratum down to zero records.
    EmptyStratum { class: DefectClass, provenance: String, modality: Modality, size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuotaPolicy {
    pub class: DefectClass,
    pub retention_fraction: f64,
}

impl QuotaPolicy {
    pub fn validate(&self) -> Result<(), CurateError> {
        if !(self.retention_fraction > 0.0 && self.retention_fraction <= 1.0) {
            return Err(CurateError::InvalidFraction(self.retention_fraction));
        }
        Ok(())
    }

    /// round-half-up(fraction × n), never more than n.
    pub fn retained(&self, n: usize) -> usize {
        let x = self.retention_fraction * n as f64;
        ((x + 0.5 + 1e-9).floor() as usize).min(n)
    }
}

/// Keeps the quota count of every (provenance, modality) stratum of the
/// policy's class, sampled uniformly without replacement. Record order is
/// preserved; other classes pass through.
pub fn undersample(
    manifest: &DatasetManifest,
    policy: &QuotaPolicy,
    seed: u64,
) -> Result<(DatasetManifest, Vec<CurateWarning>), CurateError> {
    policy.validate()?;
    let mut strata: BTreeMap<(String, Modality), Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if r.label == policy.class {
            strata.entry((r.provenance.clone(), r.modality)).or_default().push(i);
        }
    }
    if strata.is_empty() {
        return Err(CurateError::ClassAbsent(policy.class));
    }

    let mut keep = vec![true; manifest.records.len()];
    let mut warnings = Vec::new();
    for ((provenance, modality), members) in &strata {
        let n = members.len();
        let k = policy.retained(n);
        if k == 0 {
            warnings.push(CurateWarning::EmptyStratum {
                class: policy.class,
                provenance: provenance.clone(),
                modality: *modality,
                size: n,
            });
        }
        let mut rng = rng_for(seed, &[policy.class.index() as u64, str_key(provenance), modality.index() as u64]);
        let mut chosen = vec![false; n];
        for j in index::sample(&mut rng, n, k) {
            chosen[j] = true;
        }
        for (j, &i) in members.iter().enumerate() {
            keep[i] = chosen[j];
        }
    }
    let records = manifest
        .records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    Ok((DatasetManifest { records }, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    Rotate { degrees: f64 },
    FlipH,
    FlipV,
    Brightness { factor: f64 },
    Contrast { factor: f64 },
    UniformNoise { amplitude: f64 },
}

pub const ROTATION_ANGLES: [f64; 4] = [-30.0, -15.0, 15.0, 30.0];
pub const BRIGHTNESS_FACTORS: [f64; 2] = [0.8, 1.2];
pub const CONTRAST_FACTOR: f64 = 1.3;
pub const NOISE_AMPLITUDE: f64 = 0.1;

impl AugmentOp {
    pub fn name(&self) -> &'static str {
        match self {
            AugmentOp::Rotate { .. } => "rotate",
            AugmentOp::FlipH => "flip_h",
            AugmentOp::FlipV => "flip_v",
            AugmentOp::Brightness { .. } => "brightness",
            AugmentOp::Contrast { .. } => "contrast",
            AugmentOp::UniformNoise { .. } => "uniform_noise",
        }
    }

    pub fn param(&self) -> Option<f64> {
        match *self {
            AugmentOp::Rotate { degrees } => Some(degrees),
            AugmentOp::Brightness { factor } | AugmentOp::Contrast { factor } => Some(factor),
            AugmentOp::UniformNoise { amplitude } => Some(amplitude),
            AugmentOp::FlipH | AugmentOp::FlipV => None,
        }
    }

    pub fn validate(&self) -> Result<(), CurateError> {
        let ok = match *self {
            AugmentOp::Rotate { degrees } => ROTATION_ANGLES.contains(&degrees),
            AugmentOp::Brightness { factor } => BRIGHTNESS_FACTORS.contains(&factor),
            AugmentOp::Contrast { factor } => factor == CONTRAST_FACTOR,
            AugmentOp::UniformNoise { amplitude } => amplitude == NOISE_AMPLITUDE,
            AugmentOp::FlipH | AugmentOp::FlipV => true,
        };
        if ok {
            Ok(())
        } else {
            Err(CurateError::InvalidPlan(format!("{} parameter {:?} not allowed", self.name(), self.param())))
        }
    }

    /// `rng` is only consumed by the noise op.
    pub fn apply<R: Rng + ?Sized>(&self, img: &Raster, rng: &mut R) -> Raster {
        match *self {
            AugmentOp::Rotate { degrees } => imageops::rotate(img, degrees),
            AugmentOp::FlipH => imageops::flip_h(img),
            AugmentOp::FlipV => imageops::flip_v(img),
            AugmentOp::Brightness { factor } => imageops::brightness(img, factor as f32),
            AugmentOp::Contrast { factor } => imageops::contrast(img, factor as f32),
            AugmentOp::UniformNoise { amplitude } => imageops::uniform_noise(img, amplitude as f32, rng),
        }
    }

    /// `op=<name>;param=<value>` with `param=none` for flips.
    pub fn tag(&self) -> String {
        match self.param() {
            Some(p) => format!("op={};param={}", self.name(), p),
            None => format!("op={};param=none", self.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPlan {
    pub target_min: usize,
    pub target_max: usize,
    pub ops: Vec<AugmentOp>,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        let mut ops: Vec<AugmentOp> = ROTATION_ANGLES.iter().map(|&degrees| AugmentOp::Rotate { degrees }).collect();
        ops.extend([AugmentOp::FlipH, AugmentOp::FlipV]);
        ops.extend(BRIGHTNESS_FACTORS.iter().map(|&factor| AugmentOp::Brightness { factor }));
        ops.push(AugmentOp::Contrast { factor: CONTRAST_FACTOR });
        ops.push(AugmentOp::UniformNoise { amplitude: NOISE_AMPLITUDE });
        AugmentPlan { target_min: 1500, target_max: 1800, ops }
    }
}

impl AugmentPlan {
    pub fn validate(&self) -> Result<(), CurateError> {
        if self.target_min > self.target_max {
            return Err(CurateError::InvalidPlan(format!(
                "target_min {} exceeds target_max {}",
                self.target_min, self.target_max
            )));
        }
        if self.ops.is_empty() {
            return Err(CurateError::InvalidPlan("no ops".into()));
        }
        self.ops.iter().try_for_each(AugmentOp::validate)
    }

    pub fn from_toml(text: &str) -> Result<Self, CurateError> {
        let plan: AugmentPlan = toml::from_str(text).map_err(|e| CurateError::InvalidPlan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Extracts the source id from an augmentation tag.
pub fn tag_source(tag: &str) -> Option<&str> {
    tag.split(';').find_map(|kv| kv.strip_prefix("src="))
}

pub fn augmented_id(source_id: &str, i: usize) -> String {
    format!("{source_id}__aug{i:05}")
}

#[derive(Debug, Clone)]
pub struct AugmentOutcome {
    pub manifest: DatasetManifest,
    pub added: usize,
}

/// Synthesizes records of `class` until it reaches `plan.target_min`.
///
/// Sample `i` draws its source and op from the stream `(seed, class, i)`, so
/// outputs do not depend on scheduling. Synthetic records inherit the
/// source's modality, provenance and split; images go to
/// `augmented/<id>.png` in `store`.
pub fn augment_class(
    manifest: &DatasetManifest,
    class: DefectClass,
    plan: &AugmentPlan,
    seed: u64,
    store: &dyn ImageStore,
) -> Result<AugmentOutcome, CurateError> {
    plan.validate()?;
    let count = manifest.count_class(class);
    if count >= plan.target_min {
        return Ok(AugmentOutcome { manifest: manifest.clone(), added: 0 });
    }
    let sources: Vec<&SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| r.label == class && !r.is_augmented())
        .collect();
    if sources.is_empty() {
        return Err(CurateError::NoSourceImages(class));
    }

    let need = plan.target_min - count;
    let new: Vec<SampleRecord> = (0..need)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, &[class.index() as u64, i as u64]);
            let src = sources[rng.random_range(0..sources.len())];
            let op = plan.ops[rng.random_range(0..plan.ops.len())];
            let img = store
                .load(&src.path)
                .map_err(|source| CurateError::Image { id: src.id.clone(), source })?;
            let out = op.apply(&img, &mut rng);
            let id = augmented_id(&src.id, i);
            let path = format!("augmented/{id}.png");
            store
                .save(&path, &out)
                .map_err(|source| CurateError::Image { id: id.clone(), source })?;
            Ok(SampleRecord {
                id,
                path,
                modality: src.modality,
                label: class,
                split: src.split,
                provenance: src.provenance.clone(),
                augmentation_tag: Some(format!("src={};{}", src.id, op.tag())),
            })
        })
        .collect::<Result<_, CurateError>>()?;

    let mut records = manifest.records.clone();
    records.extend(new);
    Ok(AugmentOutcome { manifest: DatasetManifest::new(records)?, added: need })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.70, val: 0.15, test: 0.15, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), CurateError> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(CurateError::InvalidSplit(format!("fractions {f:?} outside [0, 1]")));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CurateError::InvalidSplit(format!("fractions {f:?} do not sum to 1")));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` into (train, val, test).
    /// Equal remainders favour train, then val.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let quotas = [self.train, self.val, self.test].map(|f| f * n as f64);
        let mut counts = quotas.map(|q| (q + 1e-9).floor() as usize);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - counts[a] as f64;
            let rb = quotas[b] - counts[b] as f64;
            rb.partial_cmp(&ra).expect("finite remainders").then(a.cmp(&b))
        });
        let mut left = n.saturating_sub(counts.iter().sum());
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

/// Assigns splits per (class, modality) stratum of source records;
/// augmented records take their source's split.
pub fn split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<DatasetManifest, CurateError> {
    spec.validate()?;
    if let Some(r) = manifest.records.iter().find(|r| r.split != Split::Unassigned) {
        return Err(CurateError::AlreadySplit(r.id.clone()));
    }
    let mut strata: BTreeMap<(DefectClass, Modality), Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if !r.is_augmented() {
            strata.entry((r.label, r.modality)).or_default().push(i);
        }
    }

    let mut out = manifest.records.clone();
    for ((class, modality), mut members) in strata {
        let mut rng = rng_for(spec.seed, &[class.index() as u64, modality.index() as u64]);
        members.shuffle(&mut rng);
        let counts = spec.counts(members.len());
        let mut it = members.into_iter();
        for (split, n) in SPLITS.into_iter().zip(counts) {
            for i in it.by_ref().take(n) {
                out[i].split = split;
            }
        }
    }

    let by_id: HashMap<String, Split> = out
        .iter()
        .filter(|r| !r.is_augmented())
        .map(|r| (r.id.clone(), r.split))
        .collect();
    for r in out.iter_mut().filter(|r| r.is_augmented()) {
        let src = augmentation_source(r)?;
        r.split = *by_id.get(src).ok_or_else(|| CurateError::OrphanAugmentation {
            id: r.id.clone(),
            source_id: src.to_string(),
        })?;
    }
    Ok(DatasetManifest { records: out })
}

fn augmentation_source(r: &SampleRecord) -> Result<&str, CurateError> {
    let tag = r.augmentation_tag.as_deref().unwrap_or_default();
    tag_source(tag).ok_or_else(|| CurateError::OrphanAugmentation { id: r.id.clone(), source_id: String::new() })
}

/// Every augmented record's source exists and shares its split.
pub fn check_augmentation_provenance(manifest: &DatasetManifest) -> Result<(), CurateError> {
    for r in manifest.records.iter().filter(|r| r.is_augmented()) {
        let src_id = augmentation_source(r)?;
        let src = manifest.get(src_id).ok_or_else(|| CurateError::OrphanAugmentation {
            id: r.id.clone(),
            source_id: src_id.to_string(),
        })?;
        if src.split != r.split {
            return Err(CurateError::SplitLeak { id: r.id.clone(), expected: src.split, got: r.split });
        }
    }
    Ok(())
}

/// Split sizes of source records per (class, modality) stratum.
pub fn split_counts(manifest: &DatasetManifest) -> BTreeMap<(DefectClass, Modality), [usize; 3]> {
    let mut out: BTreeMap<_, [usize; 3]> = BTreeMap::new();
    for r in manifest.records.iter().filter(|r| !r.is_augmented()) {
        let slot = out.entry((r.label, r.modality)).or_default();
        if let Some(k) = SPLITS.iter().position(|&s| s == r.split) {
            slot[k] += 1;
        }
    }
    out
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>, CurateError> {
    let rd = std::fs::read_dir(path).map_err(|e| CurateError::Scan { path: path.to_path_buf(), message: e.to_string() })?;
    let mut entries: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    Ok(entries)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Builds a manifest from `root/<dataset>/<modality>/<label>/*.png`. Raw
/// labels go through `label_map` when given, else the canonical parser.
/// Ids are the relative path without extension; paths are relative to `root`.
pub fn scan_tree(root: &Path, label_map: Option<&LabelMap>) -> Result<DatasetManifest, CurateError> {
    let mut records = Vec::new();
    for dataset in sorted_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let ds = file_name(&dataset);
        for mod_dir in sorted_dir(&dataset)?.into_iter().filter(|p| p.is_dir()) {
            let modality: Modality = file_name(&mod_dir).parse()?;
            for label_dir in sorted_dir(&mod_dir)?.into_iter().filter(|p| p.is_dir()) {
                let raw = file_name(&label_dir);
                let label = match label_map {
                    Some(map) => apply_label_map(map, &raw, &ds)?,
                    None => crate::taxonomy::parse_label(&raw)?,
                };
                for img in sorted_dir(&label_dir)? {
                    let is_png = img.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
                    if !img.is_file() || !is_png {
                        continue;
                    }
                    let rel = img.strip_prefix(root).expect("under root");
                    let rel_str = rel.to_string_lossy().replace('\\', "/");
                    let id = rel_str[..rel_str.len() - 4].to_string();
                    records.push(SampleRecord {
                        id,
                        path: rel_str,
                        modality,
                        label,
                        split: Split::Unassigned,
                        provenance: ds.clone(),
                        augmentation_tag: None,
                    });
                }
            }
        }
    }
    Ok(DatasetManifest::new(records)?)
}
