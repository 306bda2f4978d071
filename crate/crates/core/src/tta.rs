//! Six-view test-time augmentation: the full frame, a center crop and four
//! corner crops, each half the size of the input, combined by a tiered
//! decision table.
//!
//! Rules, in order:
//! 1. `FullDefectConfirmed`: the full view predicts a defect and at least one
//!    crop agrees.
//! 2. `CropMajority` / `DefectOverridesClean`: the five crops have a unique
//!    strict plurality class. The second name marks the case where the full
//!    view said clean panel and the plurality is a defect.
//! 3. `FullTiebreak`: otherwise the full view decides.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Raster;
use crate::report::{self, parse_report, DiagnosticReport};
use crate::seeding::rng_for;
use crate::taxonomy::DefectClass;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TtaError {
    #[error("image {width}x{height} is too small for six-view extraction")]
    TooSmall { width: usize, height: usize },
    #[error("missing prediction for view {0}")]
    MissingView(ViewKind),
    #[error("duplicate prediction for view {0}")]
    DuplicateView(ViewKind),
    #[error("view {0}: probabilities violate the sum rule")]
    InvalidProbabilities(ViewKind),
    #[error("view {view}: {message}")]
    InvalidView { view: ViewKind, message: String },
    #[error("predictor failed on view {view}: {message}")]
    Predictor { view: ViewKind, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Full,
    Center,
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl ViewKind {
    pub const ALL: [ViewKind; 6] = [
        ViewKind::Full,
        ViewKind::Center,
        ViewKind::TopLeft,
        ViewKind::TopRight,
        ViewKind::BottomLeft,
        ViewKind::BottomRight,
    ];

    pub const CROPS: [ViewKind; 5] = [
        ViewKind::Center,
        ViewKind::TopLeft,
        ViewKind::TopRight,
        ViewKind::BottomLeft,
        ViewKind::BottomRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ViewKind::Full => "full",
            ViewKind::Center => "center",
            ViewKind::TopLeft => "top_left",
            ViewKind::TopRight => "top_right",
            ViewKind::BottomLeft => "bottom_left",
            ViewKind::BottomRight => "bottom_right",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Crop window in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Window of every view for a `width`×`height` image. Crops are
/// ⌈W/2⌉×⌈H/2⌉; corners are anchored at the image corners and the center
/// crop at (⌊W/4⌋, ⌊H/4⌋).
pub fn view_windows(width: usize, height: usize) -> Result<[(ViewKind, Window); 6], TtaError> {
    if width < 2 || height < 2 {
        return Err(TtaError::TooSmall { width, height });
    }
    let (cw, ch) = (width.div_ceil(2), height.div_ceil(2));
    let win = |x, y| Window { x, y, width: cw, height: ch };
    Ok([
        (ViewKind::Full, Window { x: 0, y: 0, width, height }),
        (ViewKind::Center, win(width / 4, height / 4)),
        (ViewKind::TopLeft, win(0, 0)),
        (ViewKind::TopRight, win(width - cw, 0)),
        (ViewKind::BottomLeft, win(0, height - ch)),
        (ViewKind::BottomRight, win(width - cw, height - ch)),
    ])
}

/// The six views in [`ViewKind::ALL`] order.
pub fn extract_views(image: &Raster) -> Result<Vec<(ViewKind, Raster)>, TtaError> {
    Ok(view_windows(image.width(), image.height())?
        .into_iter()
        .map(|(kind, w)| {
            let view = if kind == ViewKind::Full {
                image.clone()
            } else {
                image.crop(w.x, w.y, w.width, w.height)
            };
            (kind, view)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPrediction {
    pub view: ViewKind,
    pub predicted_class: DefectClass,
    pub probabilities: Option<BTreeMap<DefectClass, f64>>,
    pub report: Option<DiagnosticReport>,
}

impl ViewPrediction {
    pub fn new(view: ViewKind, predicted_class: DefectClass) -> Self {
        ViewPrediction { view, predicted_class, probabilities: None, report: None }
    }

    pub fn with_probabilities(mut self, p: BTreeMap<DefectClass, f64>) -> Self {
        self.probabilities = Some(p);
        self
    }

    /// Class and (well-formed) probabilities taken from a parsed report.
    pub fn from_report(view: ViewKind, report: DiagnosticReport) -> Self {
        ViewPrediction {
            view,
            predicted_class: report.answer.predicted_class,
            probabilities: report.answer.probabilities.parsed().cloned(),
            report: Some(report),
        }
    }

    /// Probability assigned to `class`; views without probabilities count
    /// as one-hot on their prediction.
    pub fn probability_of(&self, class: DefectClass) -> f64 {
        match &self.probabilities {
            Some(p) => p.get(&class).copied().unwrap_or(0.0),
            None if self.predicted_class == class => 1.0,
            None => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    FullDefectConfirmed,
    CropMajority,
    DefectOverridesClean,
    FullTiebreak,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateDecision {
    pub final_class: DefectClass,
    pub rule_fired: Rule,
    pub confidence: f64,
    /// One prediction per view, in [`ViewKind::ALL`] order.
    pub views: Vec<ViewPrediction>,
}

impl AggregateDecision {
    pub fn full_report(&self) -> Option<&DiagnosticReport> {
        self.views[ViewKind::Full.index()].report.as_ref()
    }
}

/// Decision table over classes given in [`ViewKind::ALL`] order.
pub fn decide(classes: &[DefectClass; 6]) -> (DefectClass, Rule) {
    let full = classes[0];
    let crops = &classes[1..];
    if full.is_defect() && crops.contains(&full) {
        return (full, Rule::FullDefectConfirmed);
    }
    let mut counts = [0usize; DefectClass::COUNT];
    for c in crops {
        counts[c.index()] += 1;
    }
    let top = *counts.iter().max().expect("eight classes");
    let mut leaders = counts.iter().enumerate().filter(|(_, &n)| n == top);
    let first = leaders.next().map(|(i, _)| i);
    match (first, leaders.next()) {
        (Some(i), None) => {
            let m = DefectClass::from_index(i).expect("class index");
            if full == DefectClass::CleanPanel && m.is_defect() {
                (m, Rule::DefectOverridesClean)
            } else {
                (m, Rule::CropMajority)
            }
        }
        _ => (full, Rule::FullTiebreak),
    }
}

/// Combines exactly one prediction per view.
pub fn aggregate(views: &[ViewPrediction]) -> Result<AggregateDecision, TtaError> {
    let mut slots: [Option<&ViewPrediction>; 6] = [None; 6];
    for v in views {
        let slot = &mut slots[v.view.index()];
        if slot.is_some() {
            return Err(TtaError::DuplicateView(v.view));
        }
        *slot = Some(v);
    }
    let mut ordered = Vec::with_capacity(6);
    for kind in ViewKind::ALL {
        let v = slots[kind.index()].ok_or(TtaError::MissingView(kind))?;
        if let Some(p) = &v.probabilities {
            if !report::probabilities_valid(p) {
                return Err(TtaError::InvalidProbabilities(kind));
            }
        }
        ordered.push(v.clone());
    }
    let classes: [DefectClass; 6] = std::array::from_fn(|i| ordered[i].predicted_class);
    let (final_class, rule_fired) = decide(&classes);
    let confidence = ordered.iter().map(|v| v.probability_of(final_class)).sum::<f64>() / 6.0;
    Ok(AggregateDecision { final_class, rule_fired, confidence: confidence.clamp(0.0, 1.0), views: ordered })
}

/// Anything that can classify one view.
pub trait ViewPredictor: Sync {
    fn predict(&self, view: ViewKind, image: &Raster) -> Result<ViewPrediction, String>;

    /// Whether `predict` may be called from several threads at once.
    fn concurrent(&self) -> bool {
        false
    }
}

/// Extracts the six views, predicts each and aggregates. The first failing
/// view (in [`ViewKind::ALL`] order) is reported.
pub fn run_tta(image: &Raster, predictor: &dyn ViewPredictor) -> Result<AggregateDecision, TtaError> {
    let views = extract_views(image)?;
    let predict = |(kind, raster): &(ViewKind, Raster)| {
        predictor
            .predict(*kind, raster)
            .map_err(|message| TtaError::Predictor { view: *kind, message })
            .and_then(|p| {
                if p.view != *kind {
                    return Err(TtaError::InvalidView {
                        view: *kind,
                        message: format!("predictor labelled its output as {}", p.view),
                    });
                }
                Ok(p)
            })
    };
    let results: Vec<_> = if predictor.concurrent() {
        views.par_iter().map(predict).collect()
    } else {
        views.iter().map(predict).collect()
    };
    let predictions = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    aggregate(&predictions)
}

/// Simulated predictor that knows the true class and errs at a fixed rate.
///
/// Each view draws from its own stream keyed by `(seed, key, view)`. Correct
/// views report a confidence in `[0.55, 0.95]`, wrong ones in `[0.30, 0.70]`,
/// so confidence is informative but imperfect. Every view carries a
/// well-formed report.
#[derive(Debug, Clone)]
pub struct NoisyOracle {
    pub truth: DefectClass,
    pub key: u64,
    pub seed: u64,
    pub accuracy: f64,
}

impl NoisyOracle {
    pub fn new(truth: DefectClass, key: u64, seed: u64, accuracy: f64) -> Self {
        NoisyOracle { truth, key, seed, accuracy }
    }

    /// The prediction and report text for one view.
    pub fn simulate(&self, view: ViewKind) -> (DefectClass, BTreeMap<DefectClass, f64>, String) {
        let mut rng = rng_for(self.seed, &[self.key, view.index() as u64]);
        let correct = rng.random::<f64>() < self.accuracy;
        let others: Vec<DefectClass> = DefectClass::ALL.into_iter().filter(|c| *c != self.truth).collect();
        let wrong = others[rng.random_range(0..others.len())];
        let (pred, runner_up) = if correct { (self.truth, wrong) } else { (wrong, self.truth) };
        let milli: u32 = if correct { rng.random_range(550..=950) } else { rng.random_range(300..=700) };
        let mut probs = BTreeMap::new();
        probs.insert(pred, milli as f64 / 1000.0);
        probs.insert(runner_up, (1000 - milli) as f64 / 1000.0);
        let n_steps = rng.random_range(5..=7);
        let mut text = String::from("<think>\n");
        for i in 1..=n_steps {
            text.push_str(&format!("Step {i}: examined region {} of the {} view.\n", i, view));
        }
        text.push_str(&format!(
            "</think>\n<answer>\nclass: {pred}\nprobabilities: {}\nroot_cause: simulated\nvisual_evidence: simulated\nrecommended_action: inspect\n</answer>",
            report::format_probabilities(&probs)
        ));
        (pred, probs, text)
    }
}

impl ViewPredictor for NoisyOracle {
    fn predict(&self, view: ViewKind, _image: &Raster) -> Result<ViewPrediction, String> {
        let (_, _, text) = self.simulate(view);
        let report = parse_report(&text).map_err(|e| e.to_string())?;
        Ok(ViewPrediction::from_report(view, report))
    }

    fn concurrent(&self) -> bool {
        true
    }
}
