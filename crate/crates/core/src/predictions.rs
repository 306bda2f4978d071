//! Prediction manifest: one JSON object per line, one line per image.
//!
//! ```json
//! {"id":"img-001","image":"el/img-001.png","true_class":"crack",
//!  "views":[{"view":"full","class":"crack","probabilities":{"crack":0.9,"finger":0.1},
//!            "report_text":"<think>...</think><answer>...</answer>"}, ...],
//!  "decision":{"final_class":"crack","rule_fired":"full_defect_confirmed",
//!              "confidence":0.87,"confidence_source":"tta_mean_probability"},
//!  "generation":{"top_p":0.9,"temperature":0.7,"max_tokens":768}}
//! ```
//!
//! A view may omit `class`; the class and probabilities are then read from
//! `report_text`. `generation` and `metadata` pass through untouched.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::report::parse_report;
use crate::taxonomy::DefectClass;
use crate::tta::{aggregate, AggregateDecision, Rule, TtaError, ViewKind, ViewPrediction};

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("prediction manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record `{id}`: {source}")]
    Record { id: String, source: TtaError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub view: ViewKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<DefectClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<BTreeMap<DefectClass, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_text: Option<String>,
    /// Set by producers when the view could not be predicted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ViewRecord {
    pub fn from_prediction(p: &ViewPrediction) -> Self {
        ViewRecord {
            view: p.view,
            class: Some(p.predicted_class),
            probabilities: p.probabilities.clone(),
            report_text: p.report.as_ref().map(|r| r.raw_text.clone()),
            error: None,
        }
    }

    /// Explicit fields win; otherwise class and probabilities come from the
    /// report text. A report that fails to parse is only an error when the
    /// class is not given explicitly.
    pub fn to_prediction(&self) -> Result<ViewPrediction, TtaError> {
        if let Some(e) = &self.error {
            return Err(TtaError::Predictor { view: self.view, message: e.clone() });
        }
        let report = self.report_text.as_deref().map(parse_report);
        match (self.class, report) {
            (Some(class), report) => Ok(ViewPrediction {
                view: self.view,
                predicted_class: class,
                probabilities: self.probabilities.clone(),
                report: report.and_then(Result::ok),
            }),
            (None, Some(Ok(r))) => {
                let mut p = ViewPrediction::from_report(self.view, r);
                if self.probabilities.is_some() {
                    p.probabilities = self.probabilities.clone();
                }
                Ok(p)
            }
            (None, Some(Err(e))) => Err(TtaError::InvalidView { view: self.view, message: e.to_string() }),
            (None, None) => Err(TtaError::InvalidView {
                view: self.view,
                message: "neither class nor report_text given".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub final_class: DefectClass,
    pub rule_fired: Rule,
    pub confidence: f64,
    pub confidence_source: String,
}

pub const CONFIDENCE_TTA: &str = "tta_mean_probability";
pub const CONFIDENCE_SINGLE_VIEW: &str = "full_view_max_probability";

impl DecisionRecord {
    pub fn from_decision(d: &AggregateDecision) -> Self {
        DecisionRecord {
            final_class: d.final_class,
            rule_fired: d.rule_fired,
            confidence: d.confidence,
            confidence_source: CONFIDENCE_TTA.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_class: Option<DefectClass>,
    pub views: Vec<ViewRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<DecisionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<Value>,
}

impl PredictionRecord {
    pub fn view_predictions(&self) -> Result<Vec<ViewPrediction>, TtaError> {
        self.views.iter().map(ViewRecord::to_prediction).collect()
    }

    pub fn aggregate(&self) -> Result<AggregateDecision, TtaError> {
        aggregate(&self.view_predictions()?)
    }

    /// Prediction and confidence for evaluation: the stored decision when
    /// present, else the full view's class with its largest probability.
    pub fn scored_prediction(&self) -> Result<(DefectClass, f64, &'static str), TtaError> {
        if let Some(d) = &self.decision {
            return Ok((d.final_class, d.confidence, CONFIDENCE_TTA));
        }
        let full = self
            .views
            .iter()
            .find(|v| v.view == ViewKind::Full)
            .ok_or(TtaError::MissingView(ViewKind::Full))?
            .to_prediction()?;
        let conf = full
            .probabilities
            .as_ref()
            .and_then(|p| p.values().copied().reduce(f64::max))
            .unwrap_or(1.0);
        Ok((full.predicted_class, conf, CONFIDENCE_SINGLE_VIEW))
    }
}

pub fn read_predictions<R: Read>(reader: R) -> Result<Vec<PredictionRecord>, PredictionError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| PredictionError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>, PredictionError> {
    read_predictions(text.as_bytes())
}

pub fn predictions_to_jsonl(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("prediction record serializes"));
        out.push('\n');
    }
    out
}

/// Fills in `decision` for every record. Stops at the first failing record.
pub fn aggregate_records(records: &[PredictionRecord]) -> Result<Vec<PredictionRecord>, PredictionError> {
    records
        .iter()
        .map(|r| {
            let d = r.aggregate().map_err(|source| PredictionError::Record { id: r.id.clone(), source })?;
            Ok(PredictionRecord { decision: Some(DecisionRecord::from_decision(&d)), ..r.clone() })
        })
        .collect()
}
