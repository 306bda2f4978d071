//! Deterministic machinery for reasoning-aware photovoltaic defect inspection:
//! report grammar and lints, rule-based rewards, policy-gradient objectives,
//! multi-view aggregation, dataset curation, corruption generation and
//! selective-prediction evaluation.

pub mod corrupt;
pub mod curate;
pub mod eval;
pub mod imageops;
pub mod predictions;
pub mod raster;
pub mod report;
pub mod reward;
pub mod rl;
pub mod seeding;
pub mod taxonomy;
pub mod tta;

pub use taxonomy::{DefectClass, Modality, Split};
