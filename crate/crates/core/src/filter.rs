//! Acceptance pipeline for answer-conditioned distillation traces: heuristic
//! leakage/length/grounding/degeneracy checks, a pluggable quality scorer,
//! and per-uid argmax-q selection.
//!
//! A trace is eligible iff the verifier scored it 1, no heuristic flags
//! fired, the grounding Jaccard is at least 0.05, and the quality score
//! clears the threshold. All threshold comparisons are done in integer
//! arithmetic so verdicts flip exactly at the documented boundaries.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use once_cell::sync::Lazy;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::extract::all_identifier_patterns;
use crate::fnv1a;

pub const GROUNDING_MIN_JACCARD_NUM: usize = 1; // 1/20 = 0.05
pub const GROUNDING_MIN_JACCARD_DEN: usize = 20;
pub const MIN_REASONING_CHARS: usize = 100;
pub const DEGENERACY_MIN_TOKENS: usize = 30;
pub const REP3_THRESHOLD: (usize, usize) = (7, 10); // 0.70
pub const REP4_THRESHOLD: (usize, usize) = (3, 4); // 0.75
pub const WINDOW_SIZE: usize = 24;
pub const WINDOW_STRIDE: usize = 12;
pub const WINDOW_JACCARD: (usize, usize) = (9, 10); // 0.90
pub const SENTENCE_WINDOW: usize = 6;
pub const SENTENCE_MIN_WORDS: usize = 6;
pub const SENTENCE_SIMILARITY: (usize, usize) = (3, 4); // 0.75
pub const SCORER_MAX_TOKENS: usize = 1024;
pub const DEFAULT_QUALITY_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad scorer file: {0}")]
    BadScorerFile(String),
    #[error("scorer training needs both GOOD and BAD examples")]
    SingleClass,
    #[error("scorer training needs more data (got {0} examples)")]
    NotEnoughData(usize),
    #[error("bad leakage rule file: {0}")]
    BadRuleFile(String),
}

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

static WORD_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"[A-Za-z0-9_]+").unwrap());

/// Raw whitespace tokens, used by the degeneracy and length gates.
pub fn whitespace_tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Lowercased word tokens (`[A-Za-z0-9_]+`), used for Jaccard overlap and
/// scorer input.
pub fn word_tokens(text: &str) -> Vec<String> {
    WORD_RE
        .find_iter(text)
        .map(|m| m.as_str().to_ascii_lowercase())
        .collect()
}

/// Strips identifier-shaped spans (technique/tactic/mitigation/CWE/CAPEC/CVSS
/// grammars, case-insensitively) so a revealed label cannot count as
/// grounding.
fn strip_id_tokens(text: &str) -> String {
    static CI_PATTERNS: Lazy<Vec<Regex>> = Lazy::new(|| {
        all_identifier_patterns()
            .iter()
            .map(|re| Regex::new(&format!("(?i){}", re.as_str())).unwrap())
            .collect()
    });
    let mut out = text.to_string();
    for re in CI_PATTERNS.iter() {
        out = re.replace_all(&out, " ").into_owned();
    }
    out
}

/// All lines before the final answer line (the last non-empty line),
/// trailing whitespace trimmed.
pub fn reasoning_portion(response: &str) -> String {
    let lines: Vec<&str> = response.lines().collect();
    let Some(last_idx) = lines.iter().rposition(|l| !l.trim().is_empty()) else {
        return String::new();
    };
    lines[..last_idx].join("\n").trim_end().to_string()
}

// ---------------------------------------------------------------------------
// Leakage
// ---------------------------------------------------------------------------

const DEFAULT_LEAKAGE_PHRASES: [&str; 6] = [
    "given the answer",
    "based on the provided label",
    "ground truth",
    "the provided answer",
    "as stated in the reference",
    "the label says",
];

const DEFAULT_LEAKAGE_REGEXES: [&str; 2] = [r"ground[- ]?truth", r"provided (label|answer)s?"];

/// Curated leakage cues: literal phrases (case-insensitive) plus regexes.
/// The shipped list is the contract; extra cues can be loaded from a JSON
/// file `{"phrases": [...], "regexes": [...]}`.
#[derive(Debug, Clone)]
pub struct LeakageRules {
    phrases: Vec<String>,
    regexes: Vec<Regex>,
}

impl Default for LeakageRules {
    fn default() -> Self {
        LeakageRules {
            phrases: DEFAULT_LEAKAGE_PHRASES
                .iter()
                .map(|p| p.to_string())
                .collect(),
            regexes: DEFAULT_LEAKAGE_REGEXES
                .iter()
                .map(|r| Regex::new(&format!("(?i){r}")).unwrap())
                .collect(),
        }
    }
}

#[derive(Deserialize)]
struct RuleFile {
    #[serde(default)]
    phrases: Vec<String>,
    #[serde(default)]
    regexes: Vec<String>,
}

impl LeakageRules {
    pub fn from_file(path: &Path) -> Result<Self, FilterError> {
        let raw: RuleFile = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| FilterError::BadRuleFile(e.to_string()))?;
        let mut rules = Self::default();
        rules.phrases.extend(raw.phrases);
        for r in raw.regexes {
            rules.regexes.push(
                Regex::new(&format!("(?i){r}")).map_err(|e| FilterError::BadRuleFile(e.to_string()))?,
            );
        }
        Ok(rules)
    }

    pub fn matches(&self, response: &str) -> bool {
        let lower = response.to_ascii_lowercase();
        self.phrases.iter().any(|p| lower.contains(p.as_str()))
            || self.regexes.iter().any(|re| re.is_match(response))
    }
}

/// Flags responses containing label-leakage cues.
pub fn check_leakage(response: &str, rules: &LeakageRules) -> bool {
    rules.matches(response)
}

/// Flags responses whose reasoning portion is under 100 characters.
pub fn check_reasoning_length(response: &str) -> bool {
    reasoning_portion(response).chars().count() < MIN_REASONING_CHARS
}

// ---------------------------------------------------------------------------
// Grounding
// ---------------------------------------------------------------------------

/// Jaccard overlap between reasoning tokens and context tokens, ID-like
/// spans removed from both sides. Two empty sets overlap 0 (flagged).
pub fn grounding_jaccard(response: &str, context: &str) -> f64 {
    let (inter, union) = grounding_counts(response, context);
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn grounding_counts(response: &str, context: &str) -> (usize, usize) {
    let reasoning: BTreeSet<String> =
        word_tokens(&strip_id_tokens(&reasoning_portion(response))).into_iter().collect();
    let ctx: BTreeSet<String> = word_tokens(&strip_id_tokens(context)).into_iter().collect();
    let inter = reasoning.intersection(&ctx).count();
    let union = reasoning.union(&ctx).count();
    (inter, union)
}

/// Exact `>= 0.05` test on the overlap counts.
pub fn grounding_passes(response: &str, context: &str) -> bool {
    let (inter, union) = grounding_counts(response, context);
    if union == 0 {
        return false;
    }
    inter * GROUNDING_MIN_JACCARD_DEN >= union * GROUNDING_MIN_JACCARD_NUM
}

// ---------------------------------------------------------------------------
// Degeneracy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegeneracyReason {
    NgramRepetition3,
    NgramRepetition4,
    WindowRepeat,
    NearDuplicateSentences,
}

/// Every degeneracy sub-check outcome; `flagged` is their disjunction,
/// applied only when the response has at least 30 whitespace tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegeneracyReport {
    pub token_count: usize,
    pub applied: bool,
    pub rep3: f64,
    pub rep4: f64,
    pub rep3_flag: bool,
    pub rep4_flag: bool,
    pub window_repeat: bool,
    pub near_duplicate_sentences: bool,
}

impl DegeneracyReport {
    pub fn flagged(&self) -> bool {
        self.applied
            && (self.rep3_flag || self.rep4_flag || self.window_repeat || self.near_duplicate_sentences)
    }

    pub fn reason(&self) -> Option<DegeneracyReason> {
        if !self.applied {
            return None;
        }
        if self.rep3_flag {
            Some(DegeneracyReason::NgramRepetition3)
        } else if self.rep4_flag {
            Some(DegeneracyReason::NgramRepetition4)
        } else if self.window_repeat {
            Some(DegeneracyReason::WindowRepeat)
        } else if self.near_duplicate_sentences {
            Some(DegeneracyReason::NearDuplicateSentences)
        } else {
            None
        }
    }
}

/// `(duplicate n-grams, total n-grams)`; `rep_n = dup / total`.
fn ngram_counts(tokens: &[&str], n: usize) -> (usize, usize) {
    if tokens.len() < n {
        return (0, 0);
    }
    let total = tokens.len() - n + 1;
    let distinct: HashSet<&[&str]> = tokens.windows(n).collect();
    (total - distinct.len(), total)
}

/// `rep_n = 1 - distinct/total` over whitespace tokens.
pub fn ngram_repetition(tokens: &[&str], n: usize) -> f64 {
    let (dup, total) = ngram_counts(tokens, n);
    if total == 0 {
        0.0
    } else {
        dup as f64 / total as f64
    }
}

fn window_starts(len: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    while s + WINDOW_SIZE <= len {
        starts.push(s);
        s += WINDOW_STRIDE;
    }
    starts
}

fn window_repeat(tokens: &[&str]) -> bool {
    let starts = window_starts(tokens.len());
    for (i, &a) in starts.iter().enumerate() {
        for &b in &starts[i + 1..] {
            let wa = &tokens[a..a + WINDOW_SIZE];
            let wb = &tokens[b..b + WINDOW_SIZE];
            if wa == wb {
                return true;
            }
            // 3-gram Jaccard only between non-overlapping windows.
            if b - a >= WINDOW_SIZE {
                let ta: HashSet<&[&str]> = wa.windows(3).collect();
                let tb: HashSet<&[&str]> = wb.windows(3).collect();
                let inter = ta.intersection(&tb).count();
                let union = ta.union(&tb).count();
                if union > 0 && inter * WINDOW_JACCARD.1 >= union * WINDOW_JACCARD.0 {
                    return true;
                }
            }
        }
    }
    false
}

static SENTENCE_SPLIT_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"[.!?]+(\s+|$)").unwrap());

/// Sentences: segments split on `[.!?]` followed by whitespace (or end),
/// trimmed, empties dropped.
pub fn split_sentences(text: &str) -> Vec<&str> {
    SENTENCE_SPLIT_RE
        .split(text)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Total length of the longest matching blocks between two char sequences,
/// found by recursive longest-common-substring splitting (ties: earliest in
/// `a`, then earliest in `b`).
fn matching_block_total(a: &[char], b: &[char]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // DP over suffix-match lengths; O(|a|*|b|), fine at sentence scale.
    let mut best = (0usize, 0usize, 0usize); // (len, i, j)
    let mut prev = vec![0usize; b.len() + 1];
    for i in 0..a.len() {
        let mut row = vec![0usize; b.len() + 1];
        for j in 0..b.len() {
            if a[i] == b[j] {
                let len = prev[j] + 1;
                row[j + 1] = len;
                let (start_i, start_j) = (i + 1 - len, j + 1 - len);
                if len > best.0
                    || (len == best.0 && (start_i, start_j) < (best.1, best.2) && best.0 > 0)
                {
                    best = (len, start_i, start_j);
                }
            }
        }
        prev = row;
    }
    if best.0 == 0 {
        return 0;
    }
    let (len, i, j) = best;
    len + matching_block_total(&a[..i], &b[..j])
        + matching_block_total(&a[i + len..], &b[j + len..])
}

/// Diff-matcher similarity `2*M / (len_a + len_b)` over characters.
pub fn sequence_similarity(a: &str, b: &str) -> f64 {
    let (ca, cb): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    if ca.is_empty() && cb.is_empty() {
        return 1.0;
    }
    2.0 * matching_block_total(&ca, &cb) as f64 / (ca.len() + cb.len()) as f64
}

fn near_duplicate_sentences(text: &str) -> bool {
    let sentences = split_sentences(text);
    let qualifying: Vec<(usize, Vec<char>)> = sentences
        .iter()
        .enumerate()
        .filter(|(_, s)| whitespace_tokens(s).len() >= SENTENCE_MIN_WORDS)
        .map(|(i, s)| (i, s.chars().collect()))
        .collect();
    for (ai, (ia, ca)) in qualifying.iter().enumerate() {
        for (ib, cb) in qualifying[ai + 1..].iter() {
            if ib - ia >= SENTENCE_WINDOW {
                break;
            }
            let m = matching_block_total(ca, cb);
            // similarity >= 0.75, exactly: 8*M >= 3*(la+lb)
            if 2 * m * SENTENCE_SIMILARITY.1 >= SENTENCE_SIMILARITY.0 * (ca.len() + cb.len()) {
                return true;
            }
        }
    }
    false
}

/// Runs every repetition heuristic. The checks are independent of each
/// other and of evaluation order; the report captures each outcome.
pub fn check_degenerate(response: &str) -> DegeneracyReport {
    let tokens = whitespace_tokens(response);
    let token_count = tokens.len();
    let applied = token_count >= DEGENERACY_MIN_TOKENS;
    if !applied {
        return DegeneracyReport {
            token_count,
            applied,
            rep3: 0.0,
            rep4: 0.0,
            rep3_flag: false,
            rep4_flag: false,
            window_repeat: false,
            near_duplicate_sentences: false,
        };
    }
    let (dup3, total3) = ngram_counts(&tokens, 3);
    let (dup4, total4) = ngram_counts(&tokens, 4);
    DegeneracyReport {
        token_count,
        applied,
        rep3: if total3 == 0 { 0.0 } else { dup3 as f64 / total3 as f64 },
        rep4: if total4 == 0 { 0.0 } else { dup4 as f64 / total4 as f64 },
        rep3_flag: total3 > 0 && dup3 * REP3_THRESHOLD.1 >= REP3_THRESHOLD.0 * total3,
        rep4_flag: total4 > 0 && dup4 * REP4_THRESHOLD.1 >= REP4_THRESHOLD.0 * total4,
        window_repeat: window_repeat(&tokens),
        near_duplicate_sentences: near_duplicate_sentences(response),
    }
}

// ---------------------------------------------------------------------------
// Quality scorer
// ---------------------------------------------------------------------------

pub const SCORER_DEFAULT_DIM: usize = 1 << 16;

/// Logistic model over hashed uni/bi-gram presence features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    fn feature_indices(&self, tokens: &[String]) -> BTreeSet<usize> {
        hashed_features(tokens, self.dim)
    }

    pub fn predict(&self, tokens: &[String]) -> f64 {
        let mut z = self.bias;
        for idx in self.feature_indices(tokens) {
            z += self.weights[idx];
        }
        sigmoid(z)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn hashed_features(tokens: &[String], dim: usize) -> BTreeSet<usize> {
    let mut idx = BTreeSet::new();
    for tok in tokens {
        idx.insert((fnv1a(tok) % dim as u64) as usize);
    }
    for pair in tokens.windows(2) {
        let joined = format!("{}\u{1}{}", pair[0], pair[1]);
        idx.insert((fnv1a(&joined) % dim as u64) as usize);
    }
    idx
}

/// Abstract trace-quality scorer mapping response text to `q` in `[0, 1]`.
/// Deterministic given fixed parameters and input.
#[derive(Debug, Clone)]
pub enum QualityScorer {
    /// Always 1.0; the no-ML-filter configuration.
    ConstantPass,
    /// Trainable hashed n-gram logistic model.
    HashedNgramLinear(LinearModel),
    /// Pre-computed scores keyed by trace id; unknown ids score 0.
    ExternalScores(BTreeMap<String, f64>),
}

/// Tokenizes with the word grammar, lowercases, truncates to 1024 tokens,
/// and applies the scorer.
pub fn score_quality(response: &str, trace_id: &str, scorer: &QualityScorer) -> f64 {
    match scorer {
        QualityScorer::ConstantPass => 1.0,
        QualityScorer::HashedNgramLinear(model) => {
            let mut tokens = word_tokens(response);
            tokens.truncate(SCORER_MAX_TOKENS);
            model.predict(&tokens)
        }
        QualityScorer::ExternalScores(map) => map.get(trace_id).copied().unwrap_or(0.0),
    }
}

impl QualityScorer {
    /// Writes a sparse text weight file with a version header.
    pub fn save(&self, path: &Path) -> Result<(), FilterError> {
        let QualityScorer::HashedNgramLinear(model) = self else {
            return Err(FilterError::BadScorerFile(
                "only linear models can be saved".into(),
            ));
        };
        let mut out = format!("ctirl-scorer-v1 dim={} bias={:e}\n", model.dim, model.bias);
        for (idx, w) in model.weights.iter().enumerate() {
            if *w != 0.0 {
                out.push_str(&format!("{idx} {w:e}\n"));
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FilterError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| FilterError::BadScorerFile("empty file".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("ctirl-scorer-v1") {
            return Err(FilterError::BadScorerFile("unknown version header".into()));
        }
        let mut dim = None;
        let mut bias = None;
        for field in fields {
            if let Some(v) = field.strip_prefix("dim=") {
                dim = v.parse::<usize>().ok();
            } else if let Some(v) = field.strip_prefix("bias=") {
                bias = v.parse::<f64>().ok();
            }
        }
        let dim = dim.ok_or_else(|| FilterError::BadScorerFile("missing dim".into()))?;
        let bias = bias.ok_or_else(|| FilterError::BadScorerFile("missing bias".into()))?;
        let mut weights = vec![0.0; dim];
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (idx, w) = line
                .split_once(' ')
                .ok_or_else(|| FilterError::BadScorerFile(format!("bad line {line:?}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| FilterError::BadScorerFile(format!("bad index {idx:?}")))?;
            if idx >= dim {
                return Err(FilterError::BadScorerFile(format!("index {idx} out of range")));
            }
            weights[idx] = w
                .parse()
                .map_err(|_| FilterError::BadScorerFile(format!("bad weight {w:?}")))?;
        }
        Ok(QualityScorer::HashedNgramLinear(LinearModel {
            dim,
            weights,
            bias,
        }))
    }
}

#[derive(Debug, Clone)]
pub struct ScorerTrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ScorerTrainConfig {
    fn default() -> Self {
        ScorerTrainConfig {
            dim: SCORER_DEFAULT_DIM,
            epochs: 20,
            lr: 0.5,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Trains the logistic hashed n-gram scorer on `(text, is_good)` pairs with
/// a stratified holdout split. Returns the scorer and held-out accuracy.
pub fn train_linear_scorer(
    labeled: &[(String, bool)],
    config: &ScorerTrainConfig,
) -> Result<(QualityScorer, f64), FilterError> {
    let good: Vec<&(String, bool)> = labeled.iter().filter(|(_, y)| *y).collect();
    let bad: Vec<&(String, bool)> = labeled.iter().filter(|(_, y)| !*y).collect();
    if good.is_empty() || bad.is_empty() {
        return Err(FilterError::SingleClass);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut split = |class: &[&(String, bool)]| -> (Vec<(Vec<String>, f64)>, Vec<(Vec<String>, f64)>) {
        let mut shuffled: Vec<&(String, bool)> = class.to_vec();
        shuffled.shuffle(&mut rng);
        let n_holdout = ((shuffled.len() as f64) * config.holdout_fraction).round() as usize;
        let featurize = |(text, label): &&(String, bool)| {
            let mut tokens = word_tokens(text);
            tokens.truncate(SCORER_MAX_TOKENS);
            (tokens, if *label { 1.0 } else { 0.0 })
        };
        let holdout = shuffled[..n_holdout].iter().map(featurize).collect();
        let train = shuffled[n_holdout..].iter().map(featurize).collect();
        (train, holdout)
    };
    let (mut train, mut holdout) = split(&good);
    let (train_bad, holdout_bad) = split(&bad);
    train.extend(train_bad);
    holdout.extend(holdout_bad);
    if holdout.is_empty() || train.is_empty() {
        return Err(FilterError::NotEnoughData(labeled.len()));
    }

    let mut model = LinearModel {
        dim: config.dim,
        weights: vec![0.0; config.dim],
        bias: 0.0,
    };
    let features: Vec<(BTreeSet<usize>, f64)> = train
        .iter()
        .map(|(tokens, y)| (hashed_features(tokens, config.dim), *y))
        .collect();
    let mut order: Vec<usize> = (0..features.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (idxs, y) = &features[i];
            let mut z = model.bias;
            for &idx in idxs {
                z += model.weights[idx];
            }
            let err = sigmoid(z) - y;
            model.bias -= config.lr * err;
            for &idx in idxs {
                model.weights[idx] -= config.lr * err;
            }
        }
    }

    let correct = holdout
        .iter()
        .filter(|(tokens, y)| (model.predict(tokens) >= 0.5) == (*y >= 0.5))
        .count();
    let accuracy = correct as f64 / holdout.len() as f64;
    Ok((QualityScorer::HashedNgramLinear(model), accuracy))
}

// ---------------------------------------------------------------------------
// Verdict and selection
// ---------------------------------------------------------------------------

/// Per-trace verifier score, heuristic flags, quality score, and the
/// resulting eligibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub verifier_score: f64,
    pub leakage: bool,
    pub short_reasoning: bool,
    pub grounding_jaccard: f64,
    pub grounding_pass: bool,
    pub degenerate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degeneracy_reason: Option<DegeneracyReason>,
    pub quality: f64,
    pub eligible: bool,
}

impl FilterVerdict {
    /// True when every heuristic check passed (leakage, length, grounding,
    /// degeneracy), independent of verifier and quality scores.
    pub fn heuristics_pass(&self) -> bool {
        !self.leakage && !self.short_reasoning && self.grounding_pass && !self.degenerate
    }
}

/// Runs the full two-stage pipeline on one trace. `context` is the task
/// text concatenated with the label reference.
pub fn evaluate_trace(
    response: &str,
    context: &str,
    verifier_score: f64,
    trace_id: &str,
    rules: &LeakageRules,
    scorer: &QualityScorer,
    quality_threshold: f64,
) -> FilterVerdict {
    let leakage = check_leakage(response, rules);
    let short_reasoning = check_reasoning_length(response);
    let jaccard = grounding_jaccard(response, context);
    let grounding_pass = grounding_passes(response, context);
    let degeneracy = check_degenerate(response);
    let quality = score_quality(response, trace_id, scorer);
    let eligible = verifier_score == 1.0
        && !leakage
        && !short_reasoning
        && grounding_pass
        && !degeneracy.flagged()
        && quality >= quality_threshold;
    FilterVerdict {
        verifier_score,
        leakage,
        short_reasoning,
        grounding_jaccard: jaccard,
        grounding_pass,
        degenerate: degeneracy.flagged(),
        degeneracy_reason: degeneracy.reason(),
        quality,
        eligible,
    }
}

/// [`select_trace`] with the rng derived from a caller-supplied seed.
pub fn select_trace_seeded<T>(candidates: &[(T, FilterVerdict)], seed: u64) -> Option<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    select_trace(candidates, &mut rng)
}

/// Among eligible candidates, picks the max-q trace; exact ties are broken
/// uniformly at random with the caller-supplied rng. Returns the index into
/// `candidates`, or `None` when no candidate is eligible.
pub fn select_trace<T>(candidates: &[(T, FilterVerdict)], rng: &mut impl Rng) -> Option<usize> {
    let best_q = candidates
        .iter()
        .filter(|(_, v)| v.eligible)
        .map(|(_, v)| v.quality)
        .fold(f64::NEG_INFINITY, f64::max);
    if best_q == f64::NEG_INFINITY {
        return None;
    }
    let tied: Vec<usize> = candidates
        .iter()
        .enumerate()
        .filter(|(_, (_, v))| v.eligible && v.quality == best_q)
        .map(|(i, _)| i)
        .collect();
    Some(tied[rng.gen_range(0..tied.len())])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_rules() -> LeakageRules {
        LeakageRules::default()
    }

    #[test]
    fn leakage_cues_flagged() {
        let rules = default_rules();
        assert!(check_leakage("Based on the provided label, T1059 fits", &rules));
        assert!(!check_leakage(
            "The PowerShell invocation indicates T1059.001",
            &rules
        ));
        assert!(check_leakage("GROUND TRUTH: T1027", &rules));
        assert!(check_leakage("the ground-truth label", &rules));
        assert!(check_leakage("using the provided answers here", &rules));
    }

    #[test]
    fn reasoning_length_gate() {
        let reasoning_40 = "a".repeat(40);
        assert!(check_reasoning_length(&format!("{reasoning_40}\nAnswer: T1059")));
        let reasoning_250 = "b".repeat(250);
        assert!(!check_reasoning_length(&format!("{reasoning_250}\nAnswer: T1059")));
        // Answer-only response: reasoning length 0.
        assert!(check_reasoning_length("Answer: T1059"));
    }

    #[test]
    fn grounding_jaccard_extremes() {
        // Reasoning copies half the context tokens.
        let ctx = "alpha bravo charlie delta echo foxtrot golf hotel";
        let resp = "alpha bravo charlie delta\nAnswer: T1059";
        assert!(grounding_jaccard(resp, ctx) >= 0.05);
        assert!(grounding_passes(resp, ctx));

        let disjoint = "uniform victor whiskey xray\nAnswer: T1059";
        assert_eq!(grounding_jaccard(disjoint, ctx), 0.0);

        let identical = format!("{ctx}\nAnswer: T1059");
        assert_eq!(grounding_jaccard(&identical, ctx), 1.0);
    }

    #[test]
    fn grounding_ignores_id_tokens() {
        // Only the revealed id is shared: no grounding credit.
        let ctx = "context words here T1059.003";
        let resp = "totally unrelated reasoning T1059.003\nAnswer: T1059.003";
        assert_eq!(grounding_jaccard(resp, ctx), 0.0);
        assert!(!grounding_passes(resp, ctx));
    }

    #[test]
    fn empty_token_sets_fail_grounding() {
        assert!(!grounding_passes("", ""));
        assert_eq!(grounding_jaccard("", ""), 0.0);
    }

    #[test]
    fn degenerate_repetition_flagged() {
        let spam = vec!["the attack"; 40].join(" ");
        let report = check_degenerate(&spam);
        assert!(report.applied);
        assert!(report.rep3_flag, "rep3 = {}", report.rep3);
        assert!(report.flagged());
        assert_eq!(report.reason(), Some(DegeneracyReason::NgramRepetition3));
    }

    #[test]
    fn short_responses_skip_degeneracy() {
        let spam29 = vec!["loop"; 29].join(" ");
        let report = check_degenerate(&spam29);
        assert!(!report.applied);
        assert!(!report.flagged());
        let spam30 = vec!["loop"; 30].join(" ");
        assert!(check_degenerate(&spam30).flagged());
    }

    #[test]
    fn varied_text_not_flagged() {
        let text = "The rule inspects process creation events and correlates the parent \
                    image path with command line arguments. When an office application \
                    spawns a shell interpreter, the chain strongly suggests macro abuse. \
                    Defenders should confirm the signer, inspect recent attachments, and \
                    review proxy logs for follow-on payload retrieval before containment.";
        let report = check_degenerate(text);
        assert!(report.applied);
        assert!(!report.flagged(), "{report:?}");
    }

    #[test]
    fn exact_window_repeat_detected() {
        // 24-token block repeated back to back: windows at 0 and 24 match.
        let block: Vec<String> = (0..24).map(|i| format!("w{i}")).collect();
        let mut tokens = block.clone();
        tokens.extend(block.clone());
        let text = tokens.join(" ");
        let report = check_degenerate(&text);
        assert!(report.window_repeat);
        assert!(report.flagged());
    }

    #[test]
    fn sentence_near_duplicates_detected() {
        let a = "the analyst reviewed the suspicious scheduled task carefully today";
        let b = "the analyst reviewed the suspicious scheduled task carefully there";
        // Pad with distinct filler to clear the 30-token gate without
        // introducing other repetition.
        let filler = "one two three four five six seven eight nine ten eleven twelve";
        let text = format!("{a}. {b}. {filler}.");
        let report = check_degenerate(&text);
        assert!(report.near_duplicate_sentences, "{report:?}");
    }

    #[test]
    fn rep_bounds_hold() {
        let distinct: Vec<String> = (0..50).map(|i| format!("t{i}")).collect();
        let joined = distinct.join(" ");
        let tokens = whitespace_tokens(&joined);
        assert_eq!(ngram_repetition(&tokens, 3), 0.0);
        let spam = vec!["x"; 100];
        let r = ngram_repetition(&spam, 3);
        assert!(r > 0.0 && r < 1.0);
    }

    #[test]
    fn sequence_similarity_matches_diff_ratio() {
        // Cross-checked against Python difflib.SequenceMatcher.ratio().
        assert_eq!(sequence_similarity("abcd", "abcd"), 1.0);
        assert_eq!(sequence_similarity("abcd", "wxyz"), 0.0);
        let got = sequence_similarity("abcd", "abxd");
        assert!((got - 0.75).abs() < 1e-12, "{got}");
        let got = sequence_similarity("private thread", "private threads");
        assert!((got - 2.0 * 14.0 / 29.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn quality_scorers_are_deterministic() {
        assert_eq!(score_quality("anything", "id", &QualityScorer::ConstantPass), 1.0);
        let mut map = BTreeMap::new();
        map.insert("t1".to_string(), 0.37);
        let external = QualityScorer::ExternalScores(map);
        assert_eq!(score_quality("anything", "t1", &external), 0.37);
        assert_eq!(score_quality("anything", "t2", &external), 0.0);
    }

    fn toy_corpus(n_per_class: usize) -> Vec<(String, bool)> {
        // Linearly separable: GOOD texts talk about evidence, BAD ones loop.
        let mut corpus = Vec::new();
        for i in 0..n_per_class {
            corpus.push((
                format!(
                    "the detection correlates registry writes with process lineage \
                     and flags persistence case {i} with clear supporting evidence"
                ),
                true,
            ));
            corpus.push((
                format!("loop loop loop loop answer answer answer filler {i}"),
                false,
            ));
        }
        corpus
    }

    #[test]
    fn linear_scorer_separates_toy_corpus() {
        let corpus = toy_corpus(60);
        let (scorer, acc) = train_linear_scorer(&corpus, &ScorerTrainConfig::default()).unwrap();
        assert!(acc >= 0.95, "holdout accuracy {acc}");
        let q_good = score_quality(
            "the detection correlates registry writes with process lineage evidence",
            "x",
            &scorer,
        );
        let q_bad = score_quality("loop loop loop loop answer answer answer", "x", &scorer);
        assert!(q_good > 0.5 && q_bad < 0.5, "good={q_good} bad={q_bad}");
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        use rand::Rng;
        let mut corpus = toy_corpus(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for item in corpus.iter_mut() {
            item.1 = rng.gen_bool(0.5);
        }
        let (_, acc) = train_linear_scorer(&corpus, &ScorerTrainConfig::default()).unwrap();
        assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
    }

    #[test]
    fn single_class_or_empty_training_fails() {
        assert!(matches!(
            train_linear_scorer(&[], &ScorerTrainConfig::default()),
            Err(FilterError::SingleClass)
        ));
        let one_class = vec![("text".to_string(), true); 10];
        assert!(matches!(
            train_linear_scorer(&one_class, &ScorerTrainConfig::default()),
            Err(FilterError::SingleClass)
        ));
    }

    #[test]
    fn scorer_round_trips_through_file() {
        let corpus = toy_corpus(30);
        let (scorer, _) = train_linear_scorer(&corpus, &ScorerTrainConfig::default()).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        scorer.save(f.path()).unwrap();
        let loaded = QualityScorer::load(f.path()).unwrap();
        let text = "the detection correlates registry writes with process lineage";
        assert_eq!(
            score_quality(text, "x", &scorer),
            score_quality(text, "x", &loaded)
        );
    }

    fn verdict_with_quality(q: f64, eligible: bool) -> FilterVerdict {
        FilterVerdict {
            verifier_score: 1.0,
            leakage: false,
            short_reasoning: false,
            grounding_jaccard: 0.5,
            grounding_pass: true,
            degenerate: false,
            degeneracy_reason: None,
            quality: q,
            eligible,
        }
    }

    #[test]
    fn selection_takes_argmax_quality() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let candidates = vec![
            ("a", verdict_with_quality(0.6, true)),
            ("b", verdict_with_quality(0.9, true)),
            ("c", verdict_with_quality(0.7, true)),
        ];
        assert_eq!(select_trace(&candidates, &mut rng), Some(1));
        let none: Vec<(&str, FilterVerdict)> = vec![
            ("a", verdict_with_quality(0.9, false)),
        ];
        assert_eq!(select_trace(&none, &mut rng), None);
    }

    #[test]
    fn selection_is_maximal_under_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = vec![
            ("a", verdict_with_quality(0.2, true)),
            ("b", verdict_with_quality(0.8, true)),
            ("c", verdict_with_quality(0.5, false)),
            ("d", verdict_with_quality(0.4, true)),
        ];
        // All 4! permutations.
        let mut perm = [0usize, 1, 2, 3];
        let mut perms = Vec::new();
        heap_permutations(&mut perm, 4, &mut perms);
        for p in perms {
            let cands: Vec<(&str, FilterVerdict)> =
                p.iter().map(|&i| base[i].clone()).collect();
            let chosen = select_trace(&cands, &mut rng).unwrap();
            assert_eq!(cands[chosen].0, "b");
        }
    }

    fn heap_permutations(arr: &mut [usize; 4], k: usize, out: &mut Vec<[usize; 4]>) {
        if k == 1 {
            out.push(*arr);
            return;
        }
        for i in 0..k {
            heap_permutations(arr, k - 1, out);
            if k % 2 == 0 {
                arr.swap(i, k - 1);
            } else {
                arr.swap(0, k - 1);
            }
        }
    }

    #[test]
    fn tie_break_is_uniform_over_seeds() {
        let candidates = vec![
            ("a", verdict_with_quality(0.8, true)),
            ("b", verdict_with_quality(0.8, true)),
        ];
        let mut counts = [0usize; 2];
        for seed in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            counts[select_trace(&candidates, &mut rng).unwrap()] += 1;
        }
        // Chi-square with 1 dof; 10.83 is the 0.1% critical value.
        let expected = 5_000.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 10.83, "chi2 = {chi2}, counts = {counts:?}");
        // Determinism for a fixed seed.
        let mut rng1 = ChaCha8Rng::seed_from_u64(42);
        let mut rng2 = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(
            select_trace(&candidates, &mut rng1),
            select_trace(&candidates, &mut rng2)
        );
    }

    #[test]
    fn eligibility_is_a_strict_conjunction() {
        let rules = default_rules();
        let ctx = "a sigma rule matching office applications spawning shell interpreters \
                   with suspicious command lines";
        let good = "The rule matches office applications spawning shell interpreters, \
                    and the command lines carry encoded payload markers, which points to \
                    scripted execution of a malicious macro chain.\nAnswer: T1059";
        // One fixture per check: flipping that single failing check restores
        // eligibility.
        let cases: Vec<(String, f64)> = vec![
            (good.to_string(), 1.0),                                  // baseline: eligible
            (format!("Based on the provided label. {good}"), 1.0),    // leakage
            ("tiny.\nAnswer: T1059".to_string(), 1.0),                // short + grounding
            (good.to_string(), 0.5),                                  // verifier < 1
        ];
        let verdicts: Vec<FilterVerdict> = cases
            .iter()
            .map(|(resp, s)| {
                evaluate_trace(resp, ctx, *s, "t", &rules, &QualityScorer::ConstantPass, 0.5)
            })
            .collect();
        assert!(verdicts[0].eligible, "{:?}", verdicts[0]);
        assert!(verdicts[1].leakage && !verdicts[1].eligible);
        assert!(verdicts[2].short_reasoning && !verdicts[2].eligible);
        assert!(!verdicts[3].eligible && verdicts[3].heuristics_pass());
    }

    #[test]
    fn custom_rule_file_extends_defaults() {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), r#"{"phrases":["secret hint"],"regexes":["answer key"]}"#).unwrap();
        let rules = LeakageRules::from_file(f.path()).unwrap();
        assert!(rules.matches("the SECRET HINT was"));
        assert!(rules.matches("per the Answer Key"));
        assert!(rules.matches("ground truth"));
    }
}
