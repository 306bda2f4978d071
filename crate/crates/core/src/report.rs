//! Structured diagnostic reports: a `<think>` block of numbered reasoning
//! steps followed by an `<answer>` block of labeled fields.
//!
//! ```text
//! <think>
//! Step 1: Dark branching line crosses two busbars.
//! Step 2: ...
//! </think>
//! <answer>
//! class: crack
//! probabilities: crack=0.950, finger=0.050
//! root_cause: thermal cycling stress
//! visual_evidence: dark branching line
//! recommended_action: replace module
//! </answer>
//! ```
//!
//! A step is a line of the think block matching `Step <int>:` (case-insensitive,
//! leading whitespace allowed). Answer fields are `key: value` lines; unknown
//! lines are kept as free text. Probabilities are `name=value` pairs separated
//! by commas or semicolons.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{parse_label, DefectClass};

/// Bumped whenever the accepted report grammar changes.
pub const GRAMMAR_VERSION: &str = "1";

/// Allowed deviation of a probability sum from one.
pub const PROB_SUM_TOLERANCE: f64 = 0.01;

/// Minimum number of unique steps before a chain counts as truncated.
pub const MIN_STEPS: usize = 4;

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("missing <think> block")]
    MissingThink,
    #[error("missing <answer> block")]
    MissingAnswer,
    #[error("duplicate {0} tag")]
    DuplicateBlocks(&'static str),
    #[error("<think> block must precede the <answer> block")]
    MisorderedBlocks,
    #[error("unparseable class field `{0}`")]
    UnparseableClass(String),
}

/// Byte offsets into the report's raw text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub index: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ThinkBlock {
    /// Steps in the order written, duplicates included.
    pub steps: Vec<Step>,
    /// Non-step lines, trimmed, joined with `\n`.
    pub free_text: String,
}

impl ThinkBlock {
    /// Number of distinct step indices.
    pub fn n_steps(&self) -> usize {
        self.steps.iter().map(|s| s.index).collect::<BTreeSet<_>>().len()
    }

    /// True when indices run 1, 2, 3, ... without gaps or repeats.
    pub fn is_strictly_sequential(&self) -> bool {
        self.steps
            .iter()
            .enumerate()
            .all(|(i, s)| s.index as usize == i + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum ProbabilityField {
    #[default]
    Absent,
    Parsed(BTreeMap<DefectClass, f64>),
    /// Present but not a list of `class=value` pairs; holds the raw value.
    Malformed(String),
}

impl ProbabilityField {
    pub fn parsed(&self) -> Option<&BTreeMap<DefectClass, f64>> {
        match self {
            ProbabilityField::Parsed(m) => Some(m),
            _ => None,
        }
    }

    /// True iff the field parsed, every value lies in `[0, 1]` and the sum is
    /// within [`PROB_SUM_TOLERANCE`] of one.
    pub fn passes_sum_check(&self) -> bool {
        self.parsed().is_some_and(probabilities_valid)
    }
}

/// Shared probability rule: values in `[0, 1]`, `|sum - 1| <= 0.01`.
pub fn probabilities_valid(p: &BTreeMap<DefectClass, f64>) -> bool {
    !p.is_empty()
        && p.values().all(|v| (0.0..=1.0).contains(v))
        && !prob_sum_violated(p.values().sum())
}

/// `|sum - 1| > 0.01`, with a 1e-9 allowance for float summation at the
/// boundary itself.
pub fn prob_sum_violated(sum: f64) -> bool {
    (sum - 1.0).abs() > PROB_SUM_TOLERANCE + 1e-9
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerBlock {
    pub predicted_class: DefectClass,
    pub probabilities: ProbabilityField,
    pub root_cause: Option<String>,
    pub visual_evidence: Option<String>,
    pub recommended_action: Option<String>,
    /// Unrecognized lines, trimmed, joined with `\n`.
    pub free_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AnswerField {
    Class,
    Probabilities,
    RootCause,
    VisualEvidence,
    RecommendedAction,
}

impl AnswerField {
    pub fn key(self) -> &'static str {
        match self {
            AnswerField::Class => "class",
            AnswerField::Probabilities => "probabilities",
            AnswerField::RootCause => "root_cause",
            AnswerField::VisualEvidence => "visual_evidence",
            AnswerField::RecommendedAction => "recommended_action",
        }
    }

    fn from_key(key: &str) -> Option<Self> {
        let squashed: String = key
            .chars()
            .filter(|c| !(c.is_whitespace() || *c == '_' || *c == '-'))
            .flat_map(char::to_lowercase)
            .collect();
        match squashed.as_str() {
            "class" => Some(AnswerField::Class),
            "probabilities" => Some(AnswerField::Probabilities),
            "rootcause" => Some(AnswerField::RootCause),
            "visualevidence" => Some(AnswerField::VisualEvidence),
            "recommendedaction" => Some(AnswerField::RecommendedAction),
            _ => None,
        }
    }
}

/// Where things were found in the raw text; used for lint locations.
#[derive(Debug, Clone, Default)]
pub struct ReportSpans {
    pub think: Span,
    pub answer: Span,
    pub steps: Vec<Span>,
    pub fields: BTreeMap<AnswerField, Span>,
}

#[derive(Debug, Clone)]
pub struct DiagnosticReport {
    pub think: ThinkBlock,
    pub answer: AnswerBlock,
    pub raw_text: String,
    pub spans: ReportSpans,
}

/// Field-level equality: raw text and spans are ignored.
impl PartialEq for DiagnosticReport {
    fn eq(&self, other: &Self) -> bool {
        self.think == other.think && self.answer == other.answer
    }
}

impl DiagnosticReport {
    pub fn n_steps(&self) -> usize {
        self.think.n_steps()
    }
}

fn step_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*step\s+(\d+)\s*:(.*)$").unwrap())
}

fn field_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*([A-Za-z][A-Za-z _-]*?)\s*:(.*)$").unwrap())
}

fn find_all(text: &str, pat: &str) -> Vec<usize> {
    text.match_indices(pat).map(|(i, _)| i).collect()
}

/// Lines of `text[span]` with their absolute byte offsets.
fn lines_with_offsets(text: &str, span: Span) -> impl Iterator<Item = (usize, &str)> {
    let body = &text[span.start..span.end];
    let mut offset = span.start;
    body.split('\n').map(move |line| {
        let start = offset;
        offset += line.len() + 1;
        (start, line.strip_suffix('\r').unwrap_or(line))
    })
}

/// Span of the trimmed substring `part` located at absolute offset `base`.
fn trimmed_span(base: usize, part: &str) -> (Span, &str) {
    let lead = part.len() - part.trim_start().len();
    let t = part.trim();
    (Span::new(base + lead, base + lead + t.len()), t)
}

struct ThinkParse {
    block: ThinkBlock,
    step_spans: Vec<Span>,
}

fn parse_think(text: &str, span: Span) -> ThinkParse {
    let mut steps = Vec::new();
    let mut step_spans = Vec::new();
    let mut free = Vec::new();
    for (start, line) in lines_with_offsets(text, span) {
        if let Some(caps) = step_regex().captures(line) {
            if let Ok(index) = caps[1].parse::<u32>() {
                if index > 0 {
                    let body = caps.get(2).unwrap();
                    let (s, t) = trimmed_span(start + body.start(), body.as_str());
                    steps.push(Step { index, text: t.to_string() });
                    step_spans.push(s);
                    continue;
                }
            }
        }
        let t = line.trim();
        if !t.is_empty() {
            free.push(t);
        }
    }
    ThinkParse {
        block: ThinkBlock { steps, free_text: free.join("\n") },
        step_spans,
    }
}

/// Answer fields before class validation.
#[derive(Default)]
struct RawAnswer {
    class: Option<String>,
    probabilities: ProbabilityField,
    root_cause: Option<String>,
    visual_evidence: Option<String>,
    recommended_action: Option<String>,
    free_text: String,
    fields: BTreeMap<AnswerField, Span>,
}

fn parse_answer_fields(text: &str, span: Span) -> RawAnswer {
    let mut raw = RawAnswer::default();
    let mut free = Vec::new();
    for (start, line) in lines_with_offsets(text, span) {
        let field = field_regex().captures(line).and_then(|caps| {
            let f = AnswerField::from_key(&caps[1])?;
            if raw.fields.contains_key(&f) {
                return None;
            }
            let body = caps.get(2).unwrap();
            Some((f, trimmed_span(start + body.start(), body.as_str())))
        });
        let Some((f, (vspan, value))) = field else {
            let t = line.trim();
            if !t.is_empty() {
                free.push(t);
            }
            continue;
        };
        raw.fields.insert(f, vspan);
        let value = value.to_string();
        match f {
            AnswerField::Class => raw.class = Some(value),
            AnswerField::Probabilities => raw.probabilities = parse_probabilities(&value),
            AnswerField::RootCause => raw.root_cause = Some(value),
            AnswerField::VisualEvidence => raw.visual_evidence = Some(value),
            AnswerField::RecommendedAction => raw.recommended_action = Some(value),
        }
    }
    raw.free_text = free.join("\n");
    raw
}

/// Parses `crack=0.95, finger=0.05`. Percent values (`95%`) are scaled to
/// fractions. Anything else yields [`ProbabilityField::Malformed`].
pub fn parse_probabilities(value: &str) -> ProbabilityField {
    let malformed = || ProbabilityField::Malformed(value.trim().to_string());
    let mut map = BTreeMap::new();
    for pair in value.split([',', ';']) {
        let pair = pair.trim();
        if pair.is_empty() {
            continue;
        }
        let Some((name, v)) = pair.split_once('=') else {
            return malformed();
        };
        let Ok(class) = parse_label(name) else {
            return malformed();
        };
        let v = v.trim();
        let parsed = match v.strip_suffix('%') {
            Some(pct) => pct.trim().parse::<f64>().map(|x| x / 100.0),
            None => v.parse::<f64>(),
        };
        match parsed {
            Ok(x) if x.is_finite() => {
                if map.insert(class, x).is_some() {
                    return malformed();
                }
            }
            _ => return malformed(),
        }
    }
    if map.is_empty() {
        return malformed();
    }
    ProbabilityField::Parsed(map)
}

/// Parses a report, requiring exactly one think block followed by exactly one
/// answer block and a parseable `class:` field.
pub fn parse_report(text: &str) -> Result<DiagnosticReport, SchemaError> {
    let tags = |open: &'static str, close: &'static str, missing: SchemaError| {
        let o = find_all(text, open);
        let c = find_all(text, close);
        match (o.len(), c.len()) {
            (0, _) | (_, 0) => Err(missing),
            (1, 1) => Ok((o[0], c[0])),
            (n, _) if n > 1 => Err(SchemaError::DuplicateBlocks(open)),
            _ => Err(SchemaError::DuplicateBlocks(close)),
        }
    };
    let (to, tc) = tags(THINK_OPEN, THINK_CLOSE, SchemaError::MissingThink)?;
    let (ao, ac) = tags(ANSWER_OPEN, ANSWER_CLOSE, SchemaError::MissingAnswer)?;
    if !(to < tc && tc < ao && ao < ac) {
        return Err(SchemaError::MisorderedBlocks);
    }
    let think_span = Span::new(to + THINK_OPEN.len(), tc);
    let answer_span = Span::new(ao + ANSWER_OPEN.len(), ac);

    let think = parse_think(text, think_span);
    let raw = parse_answer_fields(text, answer_span);
    let class_text = raw.class.unwrap_or_default();
    let predicted_class =
        parse_label(&class_text).map_err(|_| SchemaError::UnparseableClass(class_text.clone()))?;

    Ok(DiagnosticReport {
        think: think.block,
        answer: AnswerBlock {
            predicted_class,
            probabilities: raw.probabilities,
            root_cause: raw.root_cause,
            visual_evidence: raw.visual_evidence,
            recommended_action: raw.recommended_action,
            free_text: raw.free_text,
        },
        raw_text: text.to_string(),
        spans: ReportSpans {
            think: think_span,
            answer: answer_span,
            steps: think.step_spans,
            fields: raw.fields,
        },
    })
}

/// Best-effort reading of a possibly malformed report, used for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportScan {
    /// Both blocks present exactly once and correctly ordered.
    pub tags_intact: bool,
    pub class: Option<DefectClass>,
    pub n_steps: usize,
    pub probabilities: ProbabilityField,
}

impl ReportScan {
    /// All critical structure present: both blocks and a parseable class.
    pub fn is_complete(&self) -> bool {
        self.tags_intact && self.class.is_some()
    }
}

/// Reads whatever structure is present. Unterminated blocks run to the next
/// block opener or the end of the text.
pub fn scan_report(text: &str) -> ReportScan {
    let tags_intact = match parse_report(text) {
        Ok(r) => {
            return ReportScan {
                tags_intact: true,
                class: Some(r.answer.predicted_class),
                n_steps: r.n_steps(),
                probabilities: r.answer.probabilities,
            }
        }
        Err(e) => matches!(e, SchemaError::UnparseableClass(_)),
    };
    let think_start = text.find(THINK_OPEN).map(|i| i + THINK_OPEN.len());
    let answer_open = text.find(ANSWER_OPEN);
    let n_steps = think_start
        .map(|s| {
            let rest = &text[s..];
            let end = [rest.find(THINK_CLOSE), rest.find(ANSWER_OPEN)]
                .into_iter()
                .flatten()
                .min()
                .unwrap_or(rest.len());
            parse_think(text, Span::new(s, s + end)).block.n_steps()
        })
        .unwrap_or(0);
    let (class, probabilities) = match answer_open {
        Some(a) => {
            let s = a + ANSWER_OPEN.len();
            let end = text[s..].find(ANSWER_CLOSE).map_or(text.len(), |e| s + e);
            let raw = parse_answer_fields(text, Span::new(s, end));
            (raw.class.and_then(|c| parse_label(&c).ok()), raw.probabilities)
        }
        None => (None, ProbabilityField::Absent),
    };
    ReportScan { tags_intact, class, n_steps, probabilities }
}

/// Renders the canonical text form. Probabilities use canonical class order
/// with three decimals.
pub fn serialize(report: &DiagnosticReport) -> String {
    let mut out = String::new();
    out.push_str(THINK_OPEN);
    out.push('\n');
    for s in &report.think.steps {
        if s.text.is_empty() {
            let _ = writeln!(out, "Step {}:", s.index);
        } else {
            let _ = writeln!(out, "Step {}: {}", s.index, s.text);
        }
    }
    if !report.think.free_text.is_empty() {
        out.push_str(&report.think.free_text);
        out.push('\n');
    }
    out.push_str(THINK_CLOSE);
    out.push('\n');
    out.push_str(ANSWER_OPEN);
    out.push('\n');
    let a = &report.answer;
    let _ = writeln!(out, "class: {}", a.predicted_class);
    match &a.probabilities {
        ProbabilityField::Absent => {}
        ProbabilityField::Parsed(p) => {
            let _ = writeln!(out, "probabilities: {}", format_probabilities(p));
        }
        ProbabilityField::Malformed(raw) => {
            let _ = writeln!(out, "probabilities: {raw}");
        }
    }
    for (key, value) in [
        (AnswerField::RootCause, &a.root_cause),
        (AnswerField::VisualEvidence, &a.visual_evidence),
        (AnswerField::RecommendedAction, &a.recommended_action),
    ] {
        if let Some(v) = value {
            let _ = writeln!(out, "{}: {}", key.key(), v);
        }
    }
    if !a.free_text.is_empty() {
        out.push_str(&a.free_text);
        out.push('\n');
    }
    out.push_str(ANSWER_CLOSE);
    out
}

pub fn format_probabilities(p: &BTreeMap<DefectClass, f64>) -> String {
    p.iter()
        .map(|(c, v)| format!("{c}={v:.3}"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LintCode {
    MissingTag,
    TruncatedChain,
    NaPlaceholder,
    ProbSumViolation,
    PromptEcho,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LintFinding {
    pub code: LintCode,
    pub severity: Severity,
    pub location: Span,
    pub message: String,
}

impl fmt::Display for LintFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?}:{:?} at {}..{}: {}",
            self.code, self.severity, self.location.start, self.location.end, self.message
        )
    }
}

fn finding(code: LintCode, severity: Severity, location: Span, message: impl Into<String>) -> LintFinding {
    LintFinding { code, severity, location, message: message.into() }
}

/// Placeholder text standing in for real diagnostic content.
pub fn is_placeholder(value: &str) -> bool {
    let v = value.trim().trim_end_matches('.').to_lowercase();
    matches!(
        v.as_str(),
        "n/a" | "na" | "n.a" | "n\\a" | "tbd" | "null" | "-" | "--" | "not applicable"
    )
}

fn prompt_echo_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(?:the\s+(?:ground[\s-]*truth\s+|given\s+|provided\s+)?label\s+(?:is|was)|told\s+that)\b")
            .unwrap()
    })
}

fn class_mention_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let alts: Vec<String> = DefectClass::ALL
            .iter()
            .map(|c| c.canonical_name().replace('_', r"[\s_-]*"))
            .collect();
        Regex::new(&format!(r"(?i)\b(?:{})\b", alts.join("|"))).unwrap()
    })
}

/// Schema and hallucination lints. Error-severity findings mark a report
/// that automated QA rejects. Output is ordered by location, then code.
pub fn validate(report: &DiagnosticReport) -> Vec<LintFinding> {
    let mut out = Vec::new();
    let spans = &report.spans;
    let a = &report.answer;

    for (field, value) in [
        (AnswerField::RootCause, &a.root_cause),
        (AnswerField::VisualEvidence, &a.visual_evidence),
        (AnswerField::RecommendedAction, &a.recommended_action),
    ] {
        match value {
            None => out.push(finding(
                LintCode::MissingTag,
                Severity::Error,
                Span::new(spans.answer.end, spans.answer.end),
                format!("answer is missing `{}`", field.key()),
            )),
            Some(v) if v.is_empty() => out.push(finding(
                LintCode::MissingTag,
                Severity::Error,
                spans.fields.get(&field).copied().unwrap_or(spans.answer),
                format!("`{}` is empty", field.key()),
            )),
            Some(v) if is_placeholder(v) => out.push(finding(
                LintCode::NaPlaceholder,
                Severity::Error,
                spans.fields.get(&field).copied().unwrap_or(spans.answer),
                format!("`{}` is a placeholder (`{v}`)", field.key()),
            )),
            Some(_) => {}
        }
    }

    for (step, span) in report.think.steps.iter().zip(&spans.steps) {
        if is_placeholder(&step.text) {
            out.push(finding(
                LintCode::NaPlaceholder,
                Severity::Error,
                *span,
                format!("step {} is a placeholder (`{}`)", step.index, step.text),
            ));
        }
    }

    let n = report.n_steps();
    if n < MIN_STEPS {
        out.push(finding(
            LintCode::TruncatedChain,
            Severity::Error,
            spans.think,
            format!("reasoning chain has {n} unique steps, fewer than {MIN_STEPS}"),
        ));
    }

    let prob_span = spans
        .fields
        .get(&AnswerField::Probabilities)
        .copied()
        .unwrap_or(Span::new(spans.answer.end, spans.answer.end));
    match &a.probabilities {
        ProbabilityField::Absent => out.push(finding(
            LintCode::MissingTag,
            Severity::Warning,
            prob_span,
            "answer has no probabilities",
        )),
        ProbabilityField::Malformed(raw) => out.push(finding(
            LintCode::ProbSumViolation,
            Severity::Error,
            prob_span,
            format!("malformed probabilities `{raw}`"),
        )),
        ProbabilityField::Parsed(p) => {
            if let Some((c, v)) = p.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
                out.push(finding(
                    LintCode::ProbSumViolation,
                    Severity::Error,
                    prob_span,
                    format!("probability for {c} is {v}, outside [0, 1]"),
                ));
            } else {
                let sum: f64 = p.values().sum();
                if prob_sum_violated(sum) {
                    out.push(finding(
                        LintCode::ProbSumViolation,
                        Severity::Error,
                        prob_span,
                        format!("probabilities sum to {sum:.4}"),
                    ));
                }
            }
        }
    }

    let think_text = &report.raw_text[spans.think.start..spans.think.end];
    for m in prompt_echo_regex().find_iter(think_text) {
        let window_end = think_text[m.end()..]
            .find(['\n', '.'])
            .map_or(think_text.len(), |i| m.end() + i);
        if let Some(c) = class_mention_regex().find(&think_text[m.end()..window_end]) {
            out.push(finding(
                LintCode::PromptEcho,
                Severity::Error,
                Span::new(spans.think.start + m.start(), spans.think.start + m.end() + c.end()),
                "reasoning cites the label instead of visual evidence",
            ));
        }
    }

    out.sort_by(|x, y| {
        (x.location.start, x.location.end, x.code).cmp(&(y.location.start, y.location.end, y.code))
    });
    out
}

/// Parses and validates. A schema error becomes a single `MissingTag` error.
pub fn validate_text(text: &str) -> Vec<LintFinding> {
    match parse_report(text) {
        Ok(r) => validate(&r),
        Err(e) => vec![finding(
            LintCode::MissingTag,
            Severity::Error,
            Span::new(0, text.len()),
            e.to_string(),
        )],
    }
}

pub fn is_rejected(findings: &[LintFinding]) -> bool {
    findings.iter().any(|f| f.severity == Severity::Error)
}
