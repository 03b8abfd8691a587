//! Answer extraction: pulling the structured answer span out of a raw
//! completion.
//!
//! Extraction runs a fixed priority chain. The final `\boxed{...}` occurrence
//! wins when present, then an explicit answer line (`Answer:` /
//! `Final answer:`). In permissive mode three fallbacks follow: the last
//! non-empty line, tagged answer spans (`<answer>...</answer>` or a trailing
//! `**Answer**` block), and finally a regex sweep over the whole completion.
//! Strict mode stops after the answer-line rule and, for single-label kinds,
//! requires exactly one well-formed identifier in the span.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::task::TaskKind;

/// Strict is the training-time regime; Permissive is for evaluation dumps.
/// The mode is always chosen by the caller, never inferred from content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    Strict,
    Permissive,
}

/// Which rule produced the span. Strict mode never yields the last three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    Boxed,
    AnswerLine,
    LastLine,
    TaggedSpan,
    RegexSweep,
}

/// The structured answer pulled from a completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    /// Raw extracted text.
    pub span: String,
    /// Identifier tokens found in the span, first-occurrence order, deduped.
    pub ids: Vec<String>,
    pub source: AnswerSource,
}

// Matching is case-insensitive; canonicalization uppercases afterwards.
static TECHNIQUE_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"(?i)\bT\d{4}(?:\.\d{1,3})?\b").unwrap());
static TACTIC_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?i)\bTA\d{4}\b").unwrap());
static MITIGATION_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?i)\bM\d{4}\b").unwrap());
static CWE_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?i)\bCWE-\d+\b").unwrap());
static CAPEC_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?i)\bCAPEC-\d+\b").unwrap());
static CVSS_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?i)CVSS:3\.1/[A-Za-z0-9:./]+").unwrap());

static ANSWER_LINE_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"(?im)^[\s*>#\-•]*(?:final\s+answer|answer)\s*:\s*(.*)$").unwrap());
static ANSWER_TAG_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"(?is)<answer>(.*?)</answer>").unwrap());
static BOLD_ANSWER_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?i)\*\*answer:?\*\*:?").unwrap());

/// The identifier token grammar for a task kind. Actor kinds are free text
/// and return an empty set.
pub fn identifier_regexes(kind: TaskKind) -> Vec<&'static Regex> {
    match kind {
        TaskKind::AttackTechnique => vec![&TECHNIQUE_RE],
        TaskKind::CvssVector => vec![&CVSS_RE],
        TaskKind::ActorAttribution => vec![],
        TaskKind::SingleId | TaskKind::IdSet => vec![
            &TECHNIQUE_RE,
            &TACTIC_RE,
            &MITIGATION_RE,
            &CWE_RE,
            &CAPEC_RE,
        ],
    }
}

/// All identifier grammars, for ID-like token stripping in the filter stage.
pub fn all_identifier_patterns() -> Vec<&'static Regex> {
    vec![
        &TECHNIQUE_RE,
        &TACTIC_RE,
        &MITIGATION_RE,
        &CWE_RE,
        &CAPEC_RE,
        &CVSS_RE,
    ]
}

/// Contents of every `\boxed{...}` group, in order, with balanced-brace
/// matching. Nested braces are retained verbatim; an unterminated box is
/// ignored.
pub fn boxed_spans(completion: &str) -> Vec<String> {
    const MARKER: &str = "\\boxed{";
    let mut spans = Vec::new();
    let bytes = completion.as_bytes();
    let mut search_from = 0;
    while let Some(rel) = completion[search_from..].find(MARKER) {
        let open = search_from + rel + MARKER.len();
        let mut depth = 1usize;
        let mut close = None;
        for (offset, b) in bytes[open..].iter().enumerate() {
            match b {
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        close = Some(open + offset);
                        break;
                    }
                }
                _ => {}
            }
        }
        match close {
            Some(end) => {
                spans.push(completion[open..end].to_string());
                search_from = end + 1;
            }
            // Unbalanced: skip this marker and keep scanning.
            None => search_from = open,
        }
    }
    spans
}

/// Identifier tokens in a span for a kind, first-occurrence order, deduped
/// on the raw token.
pub fn ids_in_span(span: &str, kind: TaskKind) -> Vec<String> {
    let mut hits: Vec<(usize, String)> = Vec::new();
    for re in identifier_regexes(kind) {
        for m in re.find_iter(span) {
            hits.push((m.start(), m.as_str().to_string()));
        }
    }
    hits.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let mut out: Vec<String> = Vec::new();
    for (_, tok) in hits {
        let tok = if kind == TaskKind::CvssVector {
            trim_cvss_token(&tok)
        } else {
            tok
        };
        if !out.contains(&tok) {
            out.push(tok);
        }
    }
    out
}

// Vectors never contain whitespace, but sweeps over prose can drag trailing
// punctuation into the token.
fn trim_cvss_token(token: &str) -> String {
    token
        .trim_end_matches(|c: char| !c.is_ascii_alphanumeric())
        .to_string()
}

fn last_answer_line(completion: &str) -> Option<String> {
    ANSWER_LINE_RE
        .captures_iter(completion)
        .last()
        .map(|c| c[1].trim().trim_matches('*').trim().to_string())
}

fn last_nonempty_line(completion: &str) -> Option<String> {
    completion
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .map(String::from)
}

fn tagged_span(completion: &str) -> Option<String> {
    if let Some(c) = ANSWER_TAG_RE.captures_iter(completion).last() {
        return Some(c[1].trim().to_string());
    }
    // Trailing bold-answer block: everything after the last `**Answer**`.
    BOLD_ANSWER_RE
        .find_iter(completion)
        .last()
        .map(|m| completion[m.end()..].trim().to_string())
}

/// Single-label kinds must extract exactly one identifier under strict mode.
fn requires_single_id(kind: TaskKind) -> bool {
    matches!(kind, TaskKind::SingleId | TaskKind::AttackTechnique)
}

fn answer_for_span(span: String, kind: TaskKind, source: AnswerSource) -> ExtractedAnswer {
    let ids = ids_in_span(&span, kind);
    ExtractedAnswer { span, ids, source }
}

/// A permissive fallback span is only taken when it pins down an answer:
/// at least one identifier for grammar kinds (exactly one for single-label
/// kinds), anything for free-text actor kinds.
fn fallback_acceptable(answer: &ExtractedAnswer, kind: TaskKind) -> bool {
    match kind {
        TaskKind::ActorAttribution => true,
        _ if requires_single_id(kind) => answer.ids.len() == 1,
        _ => !answer.ids.is_empty(),
    }
}

/// Extracts the answer span found by the first applicable rule in priority
/// order. Returns `None` when no rule applies; downstream scoring treats an
/// absent answer as reward 0.
pub fn extract(
    completion: &str,
    kind: TaskKind,
    mode: ExtractionMode,
) -> Option<ExtractedAnswer> {
    let primary = if let Some(span) = boxed_spans(completion).pop() {
        Some(answer_for_span(span, kind, AnswerSource::Boxed))
    } else {
        last_answer_line(completion).map(|span| answer_for_span(span, kind, AnswerSource::AnswerLine))
    };

    if let Some(answer) = primary {
        if mode == ExtractionMode::Strict && requires_single_id(kind) && answer.ids.len() != 1 {
            return None;
        }
        return Some(answer);
    }
    if mode == ExtractionMode::Strict {
        return None;
    }

    if let Some(line) = last_nonempty_line(completion) {
        let answer = answer_for_span(line, kind, AnswerSource::LastLine);
        if fallback_acceptable(&answer, kind) {
            return Some(answer);
        }
    }
    if let Some(span) = tagged_span(completion) {
        let answer = answer_for_span(span, kind, AnswerSource::TaggedSpan);
        if fallback_acceptable(&answer, kind) {
            return Some(answer);
        }
    }
    let sweep = answer_for_span(completion.to_string(), kind, AnswerSource::RegexSweep);
    if !sweep.ids.is_empty() {
        return Some(sweep);
    }
    None
}
