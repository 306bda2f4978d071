//! Classification metrics and selective-prediction (risk-coverage) analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::DefectClass;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no predictions to evaluate")]
    EmptyInput,
    #[error("prediction `{id}` has confidence {confidence} outside [0, 1]")]
    Confidence { id: String, confidence: f64 },
    #[error("coverage {0} outside (0, 1]")]
    Coverage(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPrediction {
    pub id: String,
    pub true_class: DefectClass,
    pub predicted_class: DefectClass,
    pub confidence: f64,
}

impl LabeledPrediction {
    pub fn correct(&self) -> bool {
        self.true_class == self.predicted_class
    }
}

fn check(preds: &[LabeledPrediction]) -> Result<(), EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if let Some(p) = preds.iter().find(|p| !(0.0..=1.0).contains(&p.confidence)) {
        return Err(EvalError::Confidence { id: p.id.clone(), confidence: p.confidence });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub n: usize,
    pub accuracy: f64,
    pub per_class_f1: BTreeMap<DefectClass, f64>,
    /// `confusion[true][predicted]`, classes in canonical order.
    pub confusion: [[usize; DefectClass::COUNT]; DefectClass::COUNT],
}

impl MetricReport {
    pub fn support(&self, class: DefectClass) -> usize {
        self.confusion[class.index()].iter().sum()
    }

    /// Mean F1 over classes that occur as a label or a prediction.
    pub fn macro_f1(&self) -> f64 {
        let present: Vec<f64> = DefectClass::ALL
            .iter()
            .filter(|c| {
                let i = c.index();
                self.support(**c) > 0 || (0..DefectClass::COUNT).any(|t| self.confusion[t][i] > 0)
            })
            .map(|c| self.per_class_f1[c])
            .collect();
        present.iter().sum::<f64>() / present.len().max(1) as f64
    }
}

pub fn classification_metrics(preds: &[LabeledPrediction]) -> Result<MetricReport, EvalError> {
    check(preds)?;
    let mut confusion = [[0usize; DefectClass::COUNT]; DefectClass::COUNT];
    for p in preds {
        confusion[p.true_class.index()][p.predicted_class.index()] += 1;
    }
    let trace: usize = (0..DefectClass::COUNT).map(|i| confusion[i][i]).sum();
    let per_class_f1 = DefectClass::ALL
        .iter()
        .map(|&c| {
            let i = c.index();
            let tp = confusion[i][i];
            let fp: usize = (0..DefectClass::COUNT).map(|t| confusion[t][i]).sum::<usize>() - tp;
            let fn_: usize = confusion[i].iter().sum::<usize>() - tp;
            let denom = 2 * tp + fp + fn_;
            let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
            (c, f1)
        })
        .collect();
    Ok(MetricReport { n: preds.len(), accuracy: trace as f64 / preds.len() as f64, per_class_f1, confusion })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcPoint {
    pub coverage: f64,
    pub risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskCoverageCurve {
    pub points: Vec<RcPoint>,
    pub aurc: f64,
    /// Input indices in acceptance order.
    pub order: Vec<usize>,
    pub tie_break: &'static str,
}

pub const TIE_BREAK: &str = "stable_input_order";

impl RiskCoverageCurve {
    /// Mean risk over the points whose coverage lies in `[lo, hi]`; `None`
    /// when no point does.
    pub fn partial(&self, lo: f64, hi: f64) -> Option<f64> {
        let band: Vec<f64> = self
            .points
            .iter()
            .filter(|p| p.coverage >= lo - 1e-12 && p.coverage <= hi + 1e-12)
            .map(|p| p.risk)
            .collect();
        (!band.is_empty()).then(|| band.iter().sum::<f64>() / band.len() as f64)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Sorts by confidence descending (stable), then risk at k/n is the error
/// count of the first k over k.
pub fn risk_coverage(preds: &[LabeledPrediction]) -> Result<RiskCoverageCurve, EvalError> {
    check(preds)?;
    let n = preds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    let mut errors = 0usize;
    let points: Vec<RcPoint> = order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            errors += usize::from(!preds[i].correct());
            RcPoint { coverage: (k + 1) as f64 / n as f64, risk: errors as f64 / (k + 1) as f64 }
        })
        .collect();
    let aurc = points.iter().map(|p| p.risk).sum::<f64>() / n as f64;
    Ok(RiskCoverageCurve { points, aurc, order, tie_break: TIE_BREAK })
}

/// Risk at the first point whose coverage reaches `c`.
pub fn risk_at_coverage(curve: &RiskCoverageCurve, c: f64) -> Result<f64, EvalError> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(EvalError::Coverage(c));
    }
    let last = curve.points.last().ok_or(EvalError::EmptyInput)?;
    Ok(curve
        .points
        .iter()
        .find(|p| p.coverage >= c - 1e-12)
        .unwrap_or(last)
        .risk)
}

pub const COMPARE_COVERAGES: [f64; 4] = [0.5, 0.7, 0.9, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `b − a`.
    pub delta: f64,
}

/// Side-by-side risks at the standard coverages, AURC and partial AURC over
/// [0.5, 1].
pub fn compare_curves(a: &RiskCoverageCurve, b: &RiskCoverageCurve) -> Result<Vec<CompareRow>, EvalError> {
    let mut rows = Vec::new();
    let mut push = |metric: String, x: f64, y: f64| rows.push(CompareRow { metric, a: x, b: y, delta: y - x });
    for c in COMPARE_COVERAGES {
        push(format!("risk@{c:.1}"), risk_at_coverage(a, c)?, risk_at_coverage(b, c)?);
    }
    push("aurc".into(), a.aurc, b.aurc);
    let pa = a.partial(0.5, 1.0).ok_or(EvalError::EmptyInput)?;
    let pb = b.partial(0.5, 1.0).ok_or(EvalError::EmptyInput)?;
    push("aurc_partial_0.5_1.0".into(), pa, pb);
    Ok(rows)
}

pub fn curve_csv(curve: &RiskCoverageCurve) -> String {
    let mut out = String::from("k,coverage,risk\n");
    for (k, p) in curve.points.iter().enumerate() {
        let _ = writeln!(out, "{},{:.10},{:.10}", k + 1, p.coverage, p.risk);
    }
    out
}

/// Metric report as `metric,class,value` rows plus the confusion matrix as
/// `confusion,<true>,<pred>=<count>;...`.
pub fn metrics_csv(report: &MetricReport, curve: &RiskCoverageCurve) -> String {
    let mut out = String::from("metric,class,value\n");
    let _ = writeln!(out, "n,,{}", report.n);
    let _ = writeln!(out, "accuracy,,{:.10}", report.accuracy);
    let _ = writeln!(out, "macro_f1,,{:.10}", report.macro_f1());
    for (c, f1) in &report.per_class_f1 {
        let _ = writeln!(out, "f1,{c},{f1:.10}");
    }
    for c in DefectClass::ALL {
        let _ = writeln!(out, "support,{c},{}", report.support(c));
    }
    let _ = writeln!(out, "aurc,,{:.10}", curve.aurc);
    if let Some(p) = curve.partial(0.5, 1.0) {
        let _ = writeln!(out, "aurc_partial_0.5_1.0,,{p:.10}");
    }
    for c in COMPARE_COVERAGES {
        let r = risk_at_coverage(curve, c).expect("valid coverage");
        let _ = writeln!(out, "risk_at_coverage,{c:.1},{r:.10}");
    }
    let _ = writeln!(out, "tie_break,,{}", curve.tie_break);
    for t in DefectClass::ALL {
        let cells: Vec<String> = DefectClass::ALL
            .iter()
            .map(|p| format!("{p}={}", report.confusion[t.index()][p.index()]))
            .collect();
        let _ = writeln!(out, "confusion,{t},{}", cells.join(";"));
    }
    out
}

/// Standalone SVG line plot of the curve.
pub fn curve_svg(curve: &RiskCoverageCurve, title: &str) -> String {
    let (w, h, m) = (480.0, 360.0, 48.0);
    let max_risk = curve.points.iter().map(|p| p.risk).fold(0.0f64, f64::max).max(0.05);
    let sx = |c: f64| m + c * (w - 2.0 * m);
    let sy = |r: f64| h - m - r / max_risk * (h - 2.0 * m);
    let path: Vec<String> = curve
        .points
        .iter()
        .map(|p| format!("{:.2},{:.2}", sx(p.coverage), sy(p.risk)))
        .collect();
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="10">{t:.2}</text>"#, sx(t), h - m + 14.0);
        let r = t * max_risk;
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="10">{r:.3}</text>"#, m - 4.0, sy(r) + 3.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">coverage</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})">risk</text>"#, h / 2.0, h / 2.0);
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#, path.join(" "));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">AURC = {:.4}</text>"#, w - m, m + 12.0, curve.aurc);
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
