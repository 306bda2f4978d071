//! Rule-based reward with the Accuracy > Reasoning > Calibration hierarchy.
//!
//! total = clamp(r_cls + r_steps + r_prob + r_pen, -1, 1) where
//! r_cls = ±1, r_steps = 0.5·min(n,7)/7, r_prob = 0.3 for a valid
//! distribution and r_pen = -0.5 for missing tags or fewer than four steps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::report::{scan_report, MIN_STEPS};
use crate::taxonomy::DefectClass;

pub const CLASS_REWARD: f64 = 1.0;
pub const STEPS_WEIGHT: f64 = 0.5;
pub const TARGET_STEPS: usize = 7;
pub const PROB_BONUS: f64 = 0.3;
pub const FORMAT_PENALTY: f64 = -0.5;

/// Correct-class floor; the binary verifier reward is 1 at or above it.
pub const BINARY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_cls: f64,
    pub r_steps: f64,
    pub r_prob: f64,
    pub r_pen: f64,
    pub n_steps: usize,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn raw_sum(&self) -> f64 {
        self.r_cls + self.r_steps + self.r_prob + self.r_pen
    }

    /// {0, 1} reward for the text-only phase: 1 iff total reaches the
    /// correct-class floor.
    pub fn binary(&self) -> f64 {
        if self.total >= BINARY_THRESHOLD {
            1.0
        } else {
            0.0
        }
    }
}

pub fn steps_reward(n_steps: usize) -> f64 {
    STEPS_WEIGHT * n_steps.min(TARGET_STEPS) as f64 / TARGET_STEPS as f64
}

/// Scores a raw model response against the ground-truth class. Malformed
/// text is scored, not rejected.
pub fn score(report_text: &str, ground_truth: DefectClass) -> RewardBreakdown {
    let scan = scan_report(report_text);
    let r_cls = if scan.class == Some(ground_truth) {
        CLASS_REWARD
    } else {
        -CLASS_REWARD
    };
    let r_steps = steps_reward(scan.n_steps);
    let r_prob = if scan.probabilities.passes_sum_check() {
        PROB_BONUS
    } else {
        0.0
    };
    let r_pen = if !scan.is_complete() || scan.n_steps < MIN_STEPS {
        FORMAT_PENALTY
    } else {
        0.0
    };
    let total = (r_cls + r_steps + r_prob + r_pen).clamp(-1.0, 1.0);
    RewardBreakdown { r_cls, r_steps, r_prob, r_pen, n_steps: scan.n_steps, total }
}

/// Element-wise [`score`], order preserved.
pub fn score_batch<S: AsRef<str> + Sync>(pairs: &[(S, DefectClass)]) -> Vec<RewardBreakdown> {
    pairs
        .par_iter()
        .map(|(text, gt)| score(text.as_ref(), *gt))
        .collect()
}
