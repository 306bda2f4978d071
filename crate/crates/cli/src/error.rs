use std::fmt;
use std::path::Path;

use pvdiag::corrupt::CorruptError;
use pvdiag::curate::CurateError;
use pvdiag::eval::EvalError;
use pvdiag::predictions::PredictionError;
use pvdiag::raster::RasterError;
use pvdiag::rl::RlError;
use pvdiag::taxonomy::TaxonomyError;
use pvdiag::tta::TtaError;
use serde::Serialize;

/// Exit-code classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Config,
    Input,
    Invariant,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Input => 3,
            ErrorClass::Invariant => 4,
        }
    }
}

/// Machine-readable failure, printed as one JSON object on stderr.
#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub class: ErrorClass,
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(class: ErrorClass, kind: impl Into<String>, message: impl fmt::Display) -> Self {
        CliError { class, kind: kind.into(), message: message.to_string() }
    }

    pub fn config(kind: &str, message: impl fmt::Display) -> Self {
        Self::new(ErrorClass::Config, kind, message)
    }

    pub fn input(kind: &str, message: impl fmt::Display) -> Self {
        Self::new(ErrorClass::Input, kind, message)
    }

    pub fn invariant(kind: &str, message: impl fmt::Display) -> Self {
        Self::new(ErrorClass::Invariant, kind, message)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::input("Io", format!("{}: {err}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn variant_name<T: fmt::Debug>(e: &T) -> String {
    let dbg = format!("{e:?}");
    dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string()
}

impl From<TaxonomyError> for CliError {
    fn from(e: TaxonomyError) -> Self {
        CliError::input(&variant_name(&e), e)
    }
}

impl From<TtaError> for CliError {
    fn from(e: TtaError) -> Self {
        CliError::input(&variant_name(&e), e)
    }
}

impl From<PredictionError> for CliError {
    fn from(e: PredictionError) -> Self {
        match e {
            PredictionError::Record { ref source, .. } => CliError::input(&variant_name(source), e),
            _ => CliError::input(&variant_name(&e), e),
        }
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        CliError::input(&variant_name(&e), e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::input(&variant_name(&e), e)
    }
}

impl From<CorruptError> for CliError {
    fn from(e: CorruptError) -> Self {
        CliError::config(&variant_name(&e), e)
    }
}

impl From<RlError> for CliError {
    fn from(e: RlError) -> Self {
        match e {
            RlError::InvalidConfig(_) | RlError::DegenerateGroup(_) => CliError::config(&variant_name(&e), e),
            _ => CliError::invariant(&variant_name(&e), e),
        }
    }
}

impl From<CurateError> for CliError {
    fn from(e: CurateError) -> Self {
        let kind = variant_name(&e);
        match e {
            CurateError::InvalidFraction(_) | CurateError::InvalidPlan(_) | CurateError::InvalidSplit(_) => {
                CliError::config(&kind, e)
            }
            CurateError::SplitLeak { .. } | CurateError::OrphanAugmentation { .. } => CliError::invariant(&kind, e),
            CurateError::Taxonomy(inner) => inner.into(),
            _ => CliError::input(&kind, e),
        }
    }
}
