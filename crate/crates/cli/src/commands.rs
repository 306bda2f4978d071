use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pvdiag::corrupt::{corrupt_manifest, CorruptionSpec};
use pvdiag::curate::{self, AugmentPlan, QuotaPolicy};
use pvdiag::eval::{self, LabeledPrediction};
use pvdiag::predictions::{self, DecisionRecord, PredictionRecord, ViewRecord};
use pvdiag::raster::{FsImageStore, ImageStore, Raster};
use pvdiag::report::{self, LintFinding};
use pvdiag::reward;
use pvdiag::rl::{self, Bandit, EnumerableEnv, TabularSequencePolicy, TargetSequence};
use pvdiag::seeding::derive_seed;
use pvdiag::taxonomy::{self, DatasetManifest, LabelMap};
use pvdiag::tta::{self, NoisyOracle, ViewKind, Window};
use pvdiag::{DefectClass, Split};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::run::Run;

/// Stage tags mixed into the run seed so stages draw independent streams.
mod stage {
    pub const UNDERSAMPLE: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const CORRUPT: u64 = 4;
    pub const SIMULATE: u64 = 5;
    pub const RL: u64 = 6;
}

fn store(run: &Run, extra_roots: &[PathBuf]) -> FsImageStore {
    let mut roots = run.config.paths.image_roots.clone();
    roots.extend(extra_roots.iter().cloned());
    FsImageStore::new(roots, run.dir.clone())
}

fn require(path: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    path.clone().ok_or_else(|| CliError::config("MissingPath", format!("no {what} given")))
}

fn load_manifest(run: &mut Run) -> CliResult<DatasetManifest> {
    let path = require(&run.config.paths.manifest, "manifest")?;
    run.record_input(&path);
    Ok(taxonomy::load_manifest(&path)?)
}

fn load_predictions(run: &mut Run, path: &Path) -> CliResult<Vec<PredictionRecord>> {
    run.record_input(path);
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(predictions::read_predictions(f)?)
}

fn filter_split(m: DatasetManifest, split: Option<Split>) -> DatasetManifest {
    match split {
        Some(s) => DatasetManifest { records: m.records.into_iter().filter(|r| r.split == s).collect() },
        None => m,
    }
}

#[derive(Serialize)]
struct CurateSummary {
    input_records: usize,
    output_records: usize,
    augmented: BTreeMap<DefectClass, usize>,
    per_class: BTreeMap<DefectClass, usize>,
    per_split: BTreeMap<Split, usize>,
    warnings: Vec<curate::CurateWarning>,
}

pub fn curate(run: &mut Run, scan: Option<&Path>) -> CliResult<()> {
    let cfg = run.config.curate.clone();
    let label_map = match &cfg.label_map {
        Some(p) => {
            run.record_input(p);
            Some(LabelMap::load(p)?)
        }
        None => None,
    };
    let (mut manifest, scan_root) = match scan {
        Some(root) => {
            run.record_input(root);
            (curate::scan_tree(root, label_map.as_ref())?, Some(root.to_path_buf()))
        }
        None => (load_manifest(run)?, None),
    };
    let input_records = manifest.len();
    let seed = run.config.seed;
    let mut warnings = Vec::new();
    for q in &cfg.quotas {
        let (m, w) = curate::undersample(&manifest, q, derive_seed(seed, &[stage::UNDERSAMPLE]))?;
        manifest = m;
        warnings.extend(w);
    }
    let store = store(run, scan_root.as_slice());
    let mut augmented = BTreeMap::new();
    for &class in &cfg.augment_classes {
        let out = curate::augment_class(&manifest, class, &cfg.augment, derive_seed(seed, &[stage::AUGMENT]), &store)?;
        augmented.insert(class, out.added);
        manifest = out.manifest;
    }
    if cfg.assign_splits {
        let spec = curate::SplitSpec { seed: derive_seed(seed, &[stage::SPLIT]), ..cfg.split };
        manifest = curate::split(&manifest, &spec)?;
        curate::check_augmentation_provenance(&manifest)?;
        for ((class, modality), counts) in curate::split_counts(&manifest) {
            let n: usize = counts.iter().sum();
            let want = spec.counts(n);
            if counts != want {
                return Err(CliError::invariant(
                    "SplitDeviation",
                    format!("{class}/{modality}: got {counts:?}, expected {want:?}"),
                ));
            }
        }
    }

    let mut per_class = BTreeMap::new();
    let mut per_split = BTreeMap::new();
    for r in &manifest.records {
        *per_class.entry(r.label).or_insert(0) += 1;
        *per_split.entry(r.split).or_insert(0) += 1;
    }
    run.write("manifest.jsonl", manifest.to_jsonl())?;
    run.write_json(
        "summary.json",
        &CurateSummary { input_records, output_records: manifest.len(), augmented, per_class, per_split, warnings },
    )?;
    Ok(())
}

pub fn corrupt(run: &mut Run) -> CliResult<()> {
    let manifest = filter_split(load_manifest(run)?, run.config.corrupt.split);
    let c = &run.config.corrupt;
    let spec = CorruptionSpec::new(c.kind, c.severity, derive_seed(run.config.seed, &[stage::CORRUPT]))?;
    let store = store(run, &[]);
    let outcome = corrupt_manifest(&manifest, &spec, &c.table, &store, "corrupted")?;
    run.write("corrupted_manifest.jsonl", outcome.to_jsonl())?;
    run.write("manifest.jsonl", outcome.manifest().to_jsonl())?;
    run.write_json("failures.json", &outcome.failures)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ReportLine {
    id: String,
    text: String,
    #[serde(default)]
    true_class: Option<DefectClass>,
}

fn read_reports(run: &mut Run, path: &Path) -> CliResult<Vec<ReportLine>> {
    run.record_input(path);
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::input("ReportParse", format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn reward(run: &mut Run, reports: &Path) -> CliResult<()> {
    let lines = read_reports(run, reports)?;
    let pairs = lines
        .iter()
        .map(|l| {
            let gt = l.true_class.ok_or_else(|| CliError::input("MissingTrueClass", format!("report `{}`", l.id)))?;
            Ok((l.text.as_str(), gt))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let scores = reward::score_batch(&pairs);
    let mut csv = String::from("id,r_cls,r_steps,r_prob,r_pen,n_steps,total,binary\n");
    for (l, s) in lines.iter().zip(&scores) {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            l.id, s.r_cls, s.r_steps, s.r_prob, s.r_pen, s.n_steps, s.total, s.binary()
        );
    }
    run.write("rewards.csv", csv)?;
    let n = scores.len().max(1) as f64;
    run.write_json(
        "summary.json",
        &serde_json::json!({
            "n": scores.len(),
            "mean_total": scores.iter().map(|s| s.total).sum::<f64>() / n,
            "binary_rate": scores.iter().filter(|s| s.binary() > 0.0).count() as f64 / n,
        }),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct LintLine<'a> {
    id: &'a str,
    rejected: bool,
    findings: Vec<LintFinding>,
}

pub fn validate_reports(run: &mut Run, reports: &Path) -> CliResult<()> {
    let lines = read_reports(run, reports)?;
    let results: Vec<Vec<LintFinding>> = lines.par_iter().map(|l| report::validate_text(&l.text)).collect();
    let mut out = String::new();
    let mut by_code: BTreeMap<String, usize> = BTreeMap::new();
    let mut rejected = 0;
    for (l, findings) in lines.iter().zip(results) {
        let rej = report::is_rejected(&findings);
        rejected += usize::from(rej);
        for f in &findings {
            *by_code.entry(serde_json::to_value(f.code).expect("code").as_str().unwrap_or("").to_string()).or_default() += 1;
        }
        out.push_str(&serde_json::to_string(&LintLine { id: &l.id, rejected: rej, findings }).expect("lint line"));
        out.push('\n');
    }
    run.write("lints.jsonl", out)?;
    run.write_json("summary.json", &serde_json::json!({ "n": lines.len(), "rejected": rejected, "findings_by_code": by_code }))?;
    Ok(())
}

fn decisions_csv(records: &[PredictionRecord]) -> String {
    let mut csv = String::from("id,final_class,rule_fired,confidence\n");
    for r in records {
        if let Some(d) = &r.decision {
            let rule = serde_json::to_value(d.rule_fired).expect("rule");
            let _ = writeln!(csv, "{},{},{},{:.10}", r.id, d.final_class, rule.as_str().unwrap_or(""), d.confidence);
        }
    }
    csv
}

pub fn aggregate(run: &mut Run) -> CliResult<()> {
    let path = require(&run.config.paths.predictions, "prediction manifest")?;
    let records = load_predictions(run, &path)?;
    let done = predictions::aggregate_records(&records)?;
    run.write("predictions.jsonl", predictions::predictions_to_jsonl(&done))?;
    run.write("decisions.csv", decisions_csv(&done))?;
    Ok(())
}

/// Six-view prediction with the noisy oracle, keyed by image content.
pub fn simulate(run: &mut Run) -> CliResult<()> {
    let manifest = filter_split(load_manifest(run)?, run.config.tta.split);
    let seed = derive_seed(run.config.seed, &[stage::SIMULATE]);
    let accuracy = run.config.tta.oracle_accuracy;
    let store = store(run, &[]);
    let records = manifest
        .records
        .par_iter()
        .map(|r| {
            let img = store.load(&r.path)?;
            let key = u64::from_le_bytes(img.content_hash()[..8].try_into().expect("8 bytes"));
            let oracle = NoisyOracle::new(r.label, key, seed, accuracy);
            let d = tta::run_tta(&img, &oracle)?;
            Ok(PredictionRecord {
                id: r.id.clone(),
                image: Some(r.path.clone()),
                true_class: Some(r.label),
                views: d.views.iter().map(ViewRecord::from_prediction).collect(),
                decision: Some(DecisionRecord::from_decision(&d)),
                generation: None,
                metadata: Some(serde_json::json!({ "predictor": "noisy_oracle", "accuracy": accuracy })),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    run.write("predictions.jsonl", predictions::predictions_to_jsonl(&records))?;
    run.write("decisions.csv", decisions_csv(&records))?;
    Ok(())
}

fn labeled(records: &[PredictionRecord]) -> CliResult<(Vec<LabeledPrediction>, BTreeMap<&'static str, usize>)> {
    let mut sources = BTreeMap::new();
    let preds = records
        .iter()
        .map(|r| {
            let true_class = r.true_class.ok_or_else(|| CliError::input("MissingTrueClass", format!("record `{}`", r.id)))?;
            let (pred, conf, src) = r.scored_prediction()?;
            *sources.entry(src).or_insert(0) += 1;
            Ok(LabeledPrediction { id: r.id.clone(), true_class, predicted_class: pred, confidence: conf })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok((preds, sources))
}

pub fn eval(run: &mut Run, compare: Option<&Path>) -> CliResult<()> {
    let path = require(&run.config.paths.predictions, "prediction manifest")?;
    let records = load_predictions(run, &path)?;
    let (preds, sources) = labeled(&records)?;
    let metrics = eval::classification_metrics(&preds)?;
    let curve = eval::risk_coverage(&preds)?;
    let risk_at: BTreeMap<String, f64> = eval::COMPARE_COVERAGES
        .iter()
        .map(|&c| Ok((format!("{c:.1}"), eval::risk_at_coverage(&curve, c)?)))
        .collect::<CliResult<_>>()?;
    let residual = (eval::risk_at_coverage(&curve, 1.0)? - (1.0 - metrics.accuracy)).abs();
    if residual > 1e-12 {
        return Err(CliError::invariant("RiskAccuracyMismatch", format!("risk(1.0) differs from 1 - accuracy by {residual}")));
    }
    run.write("metrics.csv", eval::metrics_csv(&metrics, &curve))?;
    run.write("rc_curve.csv", eval::curve_csv(&curve))?;
    run.write_json(
        "eval.json",
        &serde_json::json!({
            "n": metrics.n,
            "accuracy": metrics.accuracy,
            "macro_f1": metrics.macro_f1(),
            "per_class_f1": metrics.per_class_f1,
            "aurc": curve.aurc,
            "aurc_partial_0.5_1.0": curve.partial(0.5, 1.0),
            "risk_at_coverage": risk_at,
            "confidence_sources": sources,
            "tie_break": curve.tie_break,
        }),
    )?;
    if run.config.eval.plot {
        run.write("rc_curve.svg", eval::curve_svg(&curve, &run.config.eval.plot_title))?;
    }
    if let Some(other) = compare {
        let other_records = load_predictions(run, other)?;
        let (other_preds, _) = labeled(&other_records)?;
        let rows = eval::compare_curves(&curve, &eval::risk_coverage(&other_preds)?)?;
        let mut csv = String::from("metric,a,b,delta\n");
        for r in rows {
            let _ = writeln!(csv, "{},{:.10},{:.10},{:.10}", r.metric, r.a, r.b, r.delta);
        }
        run.write("compare.csv", csv)?;
    }
    Ok(())
}

pub fn toy_env(name: &str) -> CliResult<Box<dyn EnumerableEnv>> {
    match name {
        "bandit2" => Ok(Box::new(Bandit::new(vec![1.0, 0.0]))),
        "bandit3" => Ok(Box::new(Bandit::new(vec![1.0, 0.5, 0.0]))),
        "chain" => Ok(Box::new(TargetSequence { vocab: 3, target: vec![2, 0, 1] })),
        other => Err(CliError::config("UnknownEnv", format!("env `{other}`"))),
    }
}

pub fn rl_sim(run: &mut Run) -> CliResult<()> {
    let cfg = run.config.rl.clone();
    let env = toy_env(&cfg.env)?;
    let mut policy = TabularSequencePolicy::new(env.vocab(), env.horizon());
    let trace = rl::train_toy(&mut policy, env.as_ref(), cfg.method, cfg.steps, derive_seed(run.config.seed, &[stage::RL]), &cfg.train)?;
    let mut csv = String::from("step,expected_reward\n");
    for p in &trace {
        let _ = writeln!(csv, "{},{:.12}", p.step, p.expected_reward);
    }
    run.write("trace.csv", csv)?;
    let last = trace.last().expect("nonempty trace");
    run.write_json(
        "summary.json",
        &serde_json::json!({
            "method": cfg.method,
            "env": cfg.env,
            "steps": cfg.steps,
            "initial_expected_reward": trace[0].expected_reward,
            "final_expected_reward": last.expected_reward,
            "first_step_at_0.95": trace.iter().find(|p| p.expected_reward >= 0.95).map(|p| p.step),
        }),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct ViewFile {
    view: ViewKind,
    path: String,
    window: Window,
}

#[derive(Serialize)]
struct ViewIndex {
    source: String,
    width: usize,
    height: usize,
    views: Vec<ViewFile>,
}

fn safe_name(s: &str) -> String {
    s.chars().map(|c| if c.is_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

/// Writes `views/<name>/<view>.png` for each image and returns the index.
pub fn extract_views(run: &mut Run, images: &[PathBuf]) -> CliResult<String> {
    let mut sources: Vec<(String, String)> = Vec::new();
    for p in images {
        run.record_input(p);
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        sources.push((p.display().to_string(), safe_name(&stem)));
    }
    if run.config.paths.manifest.is_some() {
        for r in load_manifest(run)?.records {
            let name = safe_name(&r.id);
            sources.push((r.path, name));
        }
    }
    if sources.is_empty() {
        return Err(CliError::config("MissingPath", "no --image or --manifest given"));
    }
    let store = store(run, &[]);
    let index = sources
        .par_iter()
        .map(|(src, name)| {
            let img = if Path::new(src).is_absolute() || Path::new(src).exists() {
                Raster::load_png(src)?
            } else {
                store.load(src)?
            };
            let windows = tta::view_windows(img.width(), img.height())?;
            let views = tta::extract_views(&img)?
                .into_iter()
                .zip(windows)
                .map(|((kind, raster), (_, window))| {
                    let rel = format!("views/{name}/{}.png", kind.name());
                    raster.save_png(run.path(&rel))?;
                    Ok(ViewFile { view: kind, path: rel, window })
                })
                .collect::<CliResult<Vec<_>>>()?;
            Ok(ViewIndex { source: src.clone(), width: img.width(), height: img.height(), views })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let path = run.write_json("views.json", &index)?;
    Ok(std::fs::read_to_string(path).expect("just written"))
}

/// `class=fraction`.
pub fn parse_quota(s: &str) -> Result<QuotaPolicy, String> {
    let (class, frac) = s.split_once('=').ok_or_else(|| format!("expected class=fraction, got `{s}`"))?;
    let class: DefectClass = class.parse().map_err(|e: taxonomy::TaxonomyError| e.to_string())?;
    let retention_fraction: f64 = frac.trim().parse().map_err(|_| format!("bad fraction `{frac}`"))?;
    Ok(QuotaPolicy { class, retention_fraction })
}

pub fn load_plan(path: &Path) -> CliResult<AugmentPlan> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config("ConfigRead", format!("{}: {e}", path.display())))?;
    Ok(AugmentPlan::from_toml(&text)?)
}
