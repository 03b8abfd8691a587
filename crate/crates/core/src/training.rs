//! The self-training loop: RLVR rollouts with group-normalized updates,
//! hardness-gated buffering of answer-conditioned prompts, deferred
//! generation + filtering through the trace pipeline, and capped supervised
//! distillation back onto the original prompts.
//!
//! The loop is a single-threaded state machine over
//! `(dataset, policy, config, seed)`; identical inputs reproduce the metric
//! log byte for byte. Every sampling site draws from its own seed derived
//! from `(seed, step, site, uid)`, so one site's consumption never perturbs
//! another's stream.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::filter::{evaluate_trace, select_trace, FilterVerdict, LeakageRules, QualityScorer};
use crate::policy::{
    acr_sample, acr_success_prob, sample_rollouts, PolicyError, SimTraceGenerator, TeacherState,
    ToyPolicy,
};
use crate::reward::{score_completion, RewardError};
use crate::task::{AliasTable, TaskInstance, TaskKind};
use crate::{fnv1a, mix_seed};

pub const ACR_MAX_TOKENS: usize = 4096;

const SITE_BATCH: u64 = 1;
const SITE_ROLLOUT: u64 = 2;
const SITE_ACR: u64 = 3;
const SITE_SELECT: u64 = 4;
const SITE_DISTILL: u64 = 5;

#[derive(Debug, thiserror::Error)]
pub enum LoopError {
    #[error("config invalid: {0}")]
    BadConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset uids missing from policy: {0:?}")]
    UidMismatch(Vec<String>),
    #[error("gold answer for {0} is not in its answer space")]
    GoldNotInAnswerSpace(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    /// Rollouts + group updates only.
    Grpo,
    /// Full loop with answer-conditioned distillation.
    Acr,
}

/// Loop hyperparameters. The defaults are the reference settings for
/// LLM-scale training; desk-scale simulations override the learning rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub mode: LoopMode,
    /// N: rollouts per prompt per step (group normalization needs >= 2).
    pub rollouts_per_prompt: usize,
    /// K: answer-conditioned samples per buffered prompt.
    pub acr_rollouts: usize,
    /// I: distill every this many steps.
    pub distill_interval: u64,
    /// M: max distillation pairs consumed per interval.
    pub distill_cap: usize,
    pub lr_rlvr: f64,
    /// gamma: SFT learning rate = gamma * lr_rlvr.
    pub lr_scale: f64,
    pub ema_decay: f64,
    pub quality_threshold: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// beta: per-draw probability that ACR sampling emits the gold answer.
    pub exposure: f64,
    pub seed: u64,
    /// Task kinds never buffered for ACR.
    pub excluded_from_acr: Vec<TaskKind>,
    /// Record per-prompt success probabilities every this many steps.
    pub snapshot_every: Option<u64>,
    /// Synthetic-trace defect injection rates.
    pub defect_leakage_rate: f64,
    pub defect_repetition_rate: f64,
    pub defect_answer_only_rate: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            mode: LoopMode::Acr,
            rollouts_per_prompt: 8,
            acr_rollouts: 4,
            distill_interval: 10,
            distill_cap: 256,
            lr_rlvr: 1e-6,
            lr_scale: 0.05,
            ema_decay: 0.995,
            quality_threshold: 0.5,
            batch_size: 128,
            total_steps: 500,
            exposure: 0.6,
            seed: 0,
            excluded_from_acr: vec![TaskKind::CvssVector],
            snapshot_every: None,
            defect_leakage_rate: 0.0,
            defect_repetition_rate: 0.0,
            defect_answer_only_rate: 0.0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        if self.rollouts_per_prompt < 2 {
            return Err(LoopError::BadConfig(
                "rollouts_per_prompt must be >= 2".into(),
            ));
        }
        if self.acr_rollouts < 1 {
            return Err(LoopError::BadConfig("acr_rollouts must be >= 1".into()));
        }
        if self.distill_interval < 1 {
            return Err(LoopError::BadConfig("distill_interval must be >= 1".into()));
        }
        if self.distill_cap < 1 {
            return Err(LoopError::BadConfig("distill_cap must be >= 1".into()));
        }
        if !(self.lr_scale > 0.0 && self.lr_scale <= 1.0) {
            return Err(LoopError::BadConfig("lr_scale must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.exposure) {
            return Err(LoopError::BadConfig("exposure must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(LoopError::BadConfig("ema_decay must be in [0, 1]".into()));
        }
        if self.batch_size < 1 {
            return Err(LoopError::BadConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-step diagnostics, one CSV row each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Fraction of batch prompts whose best rollout reward was exactly 0.
    pub zero_solve_fraction: f64,
    pub mean_reward: f64,
    pub mean_entropy: f64,
    /// Of verifier-correct ACR candidates, the fraction passing heuristics.
    pub heuristic_pass_fraction: Option<f64>,
    /// Of heuristic passers, the fraction clearing the quality threshold.
    pub ml_pass_fraction: Option<f64>,
    /// Distinct uids with an accepted trace / uids processed this interval.
    pub uid_coverage: Option<f64>,
    pub distilled: usize,
}

/// Per-prompt success probability of the gold answer at a snapshot step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub step: u64,
    pub uid: String,
    pub p_star: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LoopEventKind {
    /// One K-sample answer-conditioned attempt for a buffered prompt.
    AcrAttempt { alpha: f64, accepted: bool },
    /// One supervised step distilling an accepted trace.
    Distill { log_p_before: f64, log_p_after: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopEvent {
    pub step: u64,
    pub uid: String,
    #[serde(flatten)]
    pub kind: LoopEventKind,
}

/// An accepted distillation pair: the original prompt's uid and the chosen
/// trace. The answer-conditioned prompt is deliberately not representable
/// here, so distillation can only ever target the original prompt.
#[derive(Debug, Clone)]
pub struct DistillPair {
    pub uid: String,
    pub target_idx: usize,
    pub trace: String,
}

/// Mutable loop state: step counter, buffers, teacher, hardness stats.
#[derive(Debug)]
pub struct LoopState {
    pub step: u64,
    pub acr_buffer: Vec<String>,
    acr_buffered: BTreeSet<String>,
    pub distill_buffer: Vec<DistillPair>,
    pub teacher: TeacherState,
    /// uid -> (times seen in a batch, times hard, last max reward).
    pub hardness: BTreeMap<String, (u64, u64, f64)>,
}

/// Everything a finished run produces.
#[derive(Debug)]
pub struct RunResult {
    pub metrics: Vec<StepMetrics>,
    pub snapshots: Vec<SnapshotRecord>,
    pub events: Vec<LoopEvent>,
    pub policy: ToyPolicy,
    pub hardness: BTreeMap<String, (u64, u64, f64)>,
}

/// Builds the label-revealing prompt for one instance: the original prompt
/// followed by the ground-truth block, an optional label reference, the
/// no-leakage instruction, and the answer-format instruction. The result is
/// kept within the 4096-token context, truncating the label reference first.
pub fn build_acr_prompt(instance: &TaskInstance) -> String {
    let assemble = |details: Option<&str>, prompt: &str| -> String {
        let mut text = String::new();
        text.push_str(prompt);
        text.push_str(
            "\n\nYou are generating a reasoning trace for training.\n\nGROUND_TRUTH_LABELS:\n",
        );
        for label in instance.gold.label_lines() {
            let _ = writeln!(text, "- {label}");
        }
        if let Some(details) = details {
            if !details.is_empty() {
                let _ = write!(text, "\nLABEL_REFERENCE:\n{details}\n");
            }
        }
        text.push_str(
            "\nInstructions:\n\
             - Write a short reasoning that would justify selecting the correct label(s) from the input.\n\
             - Do NOT say or imply that the answer was provided (no phrases like \"given the answer\", \"based on the provided label\", \"ground truth\", etc.).\n\
             - End with the final answer in the same format required by the original task.\n",
        );
        text
    };

    let token_count = |text: &str| text.split_whitespace().count();
    let truncate_tokens = |text: &str, keep: usize| -> String {
        text.split_whitespace()
            .take(keep)
            .collect::<Vec<_>>()
            .join(" ")
    };

    let details = instance.label_details.as_deref();
    let full = assemble(details, &instance.prompt);
    if token_count(&full) <= ACR_MAX_TOKENS {
        return full;
    }
    // Over budget: shrink the label reference by the excess.
    if let Some(details) = details {
        let overshoot = token_count(&full) - ACR_MAX_TOKENS;
        let detail_tokens = token_count(details);
        let kept = detail_tokens.saturating_sub(overshoot);
        let trimmed = truncate_tokens(details, kept);
        let rebuilt = assemble(
            if trimmed.is_empty() { None } else { Some(&trimmed) },
            &instance.prompt,
        );
        if token_count(&rebuilt) <= ACR_MAX_TOKENS {
            return rebuilt;
        }
    }
    // Still over: trim the original prompt from its end, template intact.
    let without_details = assemble(None, &instance.prompt);
    let overshoot = token_count(&without_details).saturating_sub(ACR_MAX_TOKENS);
    let prompt_tokens = token_count(&instance.prompt);
    let trimmed_prompt =
        truncate_tokens(&instance.prompt, prompt_tokens.saturating_sub(overshoot));
    assemble(None, &trimmed_prompt)
}

/// Uniformly samples up to `cap` pairs without replacement and performs one
/// supervised step per pair onto the original prompt. Returns the distill
/// count and the per-pair log-probability movement.
pub fn distill_batch(
    pairs: &[DistillPair],
    policy: &mut ToyPolicy,
    cap: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<(usize, Vec<(String, f64, f64)>), LoopError> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    order.truncate(cap);
    // Fixed processing order keeps float accumulation reproducible.
    order.sort_unstable();
    let mut moves = Vec::with_capacity(order.len());
    for idx in order {
        let pair = &pairs[idx];
        let answer = policy.prompt(&pair.uid)?.answers[pair.target_idx].clone();
        let before = policy.answer_prob(&pair.uid, &answer)?.max(1e-300).ln();
        policy.sft_step(&pair.uid, pair.target_idx, lr)?;
        let after = policy.answer_prob(&pair.uid, &answer)?.max(1e-300).ln();
        moves.push((pair.uid.clone(), before, after));
    }
    Ok((moves.len(), moves))
}

struct LoopRunner<'a> {
    dataset: &'a [TaskInstance],
    by_uid: BTreeMap<&'a str, &'a TaskInstance>,
    config: &'a LoopConfig,
    aliases: Option<&'a AliasTable>,
    scorer: &'a QualityScorer,
    rules: LeakageRules,
    generator: SimTraceGenerator,
    policy: ToyPolicy,
    state: LoopState,
    metrics: Vec<StepMetrics>,
    snapshots: Vec<SnapshotRecord>,
    events: Vec<LoopEvent>,
}

/// Runs the configured loop over any policy exposing the toy interface.
/// `scorer` is the ML-filter stage; pass [`QualityScorer::ConstantPass`] to
/// disable it.
pub fn run_loop(
    dataset: &[TaskInstance],
    policy: ToyPolicy,
    config: &LoopConfig,
    aliases: Option<&AliasTable>,
    scorer: &QualityScorer,
) -> Result<RunResult, LoopError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(LoopError::EmptyDataset);
    }
    let missing: Vec<String> = dataset
        .iter()
        .filter(|inst| policy.prompt(&inst.uid).is_err())
        .map(|inst| inst.uid.clone())
        .collect();
    if !missing.is_empty() {
        return Err(LoopError::UidMismatch(missing));
    }
    for inst in dataset {
        let gold = inst.gold.answer_text();
        if policy.prompt(&inst.uid)?.answer_index(&gold).is_none() {
            return Err(LoopError::GoldNotInAnswerSpace(inst.uid.clone()));
        }
    }

    let teacher = TeacherState::new(&policy, config.ema_decay);
    let mut runner = LoopRunner {
        dataset,
        by_uid: dataset.iter().map(|i| (i.uid.as_str(), i)).collect(),
        config,
        aliases,
        scorer,
        rules: LeakageRules::default(),
        generator: SimTraceGenerator {
            leakage_rate: config.defect_leakage_rate,
            repetition_rate: config.defect_repetition_rate,
            answer_only_rate: config.defect_answer_only_rate,
        },
        policy,
        state: LoopState {
            step: 0,
            acr_buffer: Vec::new(),
            acr_buffered: BTreeSet::new(),
            distill_buffer: Vec::new(),
            teacher,
            hardness: BTreeMap::new(),
        },
        metrics: Vec::new(),
        snapshots: Vec::new(),
        events: Vec::new(),
    };
    runner.run()?;
    Ok(RunResult {
        metrics: runner.metrics,
        snapshots: runner.snapshots,
        events: runner.events,
        policy: runner.policy,
        hardness: runner.state.hardness,
    })
}

/// The ablation baseline: the same loop with buffering, generation, and
/// distillation disabled.
pub fn run_grpo_only(
    dataset: &[TaskInstance],
    policy: ToyPolicy,
    config: &LoopConfig,
    aliases: Option<&AliasTable>,
) -> Result<RunResult, LoopError> {
    let config = LoopConfig {
        mode: LoopMode::Grpo,
        ..config.clone()
    };
    run_loop(
        dataset,
        policy,
        &config,
        aliases,
        &QualityScorer::ConstantPass,
    )
}

impl<'a> LoopRunner<'a> {
    fn site_rng(&self, step: u64, site: u64, uid: Option<&str>) -> ChaCha8Rng {
        let uid_hash = uid.map(fnv1a).unwrap_or(0);
        ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, step, site, uid_hash]))
    }

    fn take_snapshot(&mut self, step: u64) {
        for inst in self.dataset {
            let gold = inst.gold.answer_text();
            let p_star = self.policy.answer_prob(&inst.uid, &gold).unwrap_or(0.0);
            self.snapshots.push(SnapshotRecord {
                step,
                uid: inst.uid.clone(),
                p_star,
            });
        }
    }

    fn run(&mut self) -> Result<(), LoopError> {
        if self.config.snapshot_every.is_some() {
            self.take_snapshot(0);
        }
        for step in 1..=self.config.total_steps {
            self.state.step = step;
            self.run_step(step)?;
            let on_cadence =
                matches!(self.config.snapshot_every, Some(k) if k > 0 && step % k == 0);
            let is_last = self.config.snapshot_every.is_some() && step == self.config.total_steps;
            if on_cadence || is_last {
                // Avoid a duplicate row when the final step lands on cadence.
                if self.snapshots.last().map_or(true, |s| s.step != step) {
                    self.take_snapshot(step);
                }
            }
        }
        Ok(())
    }

    fn run_step(&mut self, step: u64) -> Result<(), LoopError> {
        let batch = self.sample_batch(step);
        let n = self.config.rollouts_per_prompt;
        let mut zero_solve = 0usize;
        let mut reward_sum = 0.0;
        let mut entropy_sum = 0.0;

        for &idx in &batch {
            let inst = &self.dataset[idx];
            let uid = inst.uid.as_str();
            entropy_sum += self.policy.entropy(uid)?;

            let mut rng = self.site_rng(step, SITE_ROLLOUT, Some(uid));
            let rollouts = sample_rollouts(
                &self.policy,
                &self.generator,
                uid,
                &inst.prompt,
                n,
                &mut rng,
            )?;
            let mut scored = Vec::with_capacity(n);
            let mut max_reward = 0.0f64;
            for rollout in &rollouts {
                let (report, _) = score_completion(
                    inst,
                    &rollout.trace,
                    crate::extract::ExtractionMode::Strict,
                    self.aliases,
                    None,
                )?;
                max_reward = max_reward.max(report.reward);
                reward_sum += report.reward;
                scored.push((rollout.answer_idx, report.reward));
            }
            self.policy
                .grpo_update(uid, &scored, self.config.lr_rlvr, None)?;

            let entry = self
                .state
                .hardness
                .entry(uid.to_string())
                .or_insert((0, 0, 0.0));
            entry.0 += 1;
            entry.2 = max_reward;
            if max_reward == 0.0 {
                zero_solve += 1;
            }
            let hard = max_reward < 1.0;
            if hard {
                entry.1 += 1;
            }
            if self.config.mode == LoopMode::Acr
                && hard
                && !self.config.excluded_from_acr.contains(&inst.kind)
                && !self.state.acr_buffered.contains(uid)
            {
                self.state.acr_buffer.push(uid.to_string());
                self.state.acr_buffered.insert(uid.to_string());
            }
        }

        self.state.teacher.update(&self.policy);

        let mut heuristic_pass = None;
        let mut ml_pass = None;
        let mut uid_coverage = None;
        let mut distilled = 0;
        if self.config.mode == LoopMode::Acr && step % self.config.distill_interval == 0 {
            let (h, m, c, d) = self.run_interval(step)?;
            heuristic_pass = h;
            ml_pass = m;
            uid_coverage = c;
            distilled = d;
        }

        let batch_len = batch.len() as f64;
        self.metrics.push(StepMetrics {
            step,
            zero_solve_fraction: zero_solve as f64 / batch_len,
            mean_reward: reward_sum / (batch_len * n as f64),
            mean_entropy: entropy_sum / batch_len,
            heuristic_pass_fraction: heuristic_pass,
            ml_pass_fraction: ml_pass,
            uid_coverage,
            distilled,
        });
        Ok(())
    }

    fn sample_batch(&self, step: u64) -> Vec<usize> {
        let mut rng = self.site_rng(step, SITE_BATCH, None);
        let mut indices: Vec<usize> = (0..self.dataset.len()).collect();
        if self.config.batch_size >= indices.len() {
            return indices;
        }
        indices.shuffle(&mut rng);
        indices.truncate(self.config.batch_size);
        indices
    }

    /// Deferred generation + filtering + distillation. Returns the interval
    /// metrics (heuristic pass, ml pass, uid coverage, distilled count).
    #[allow(clippy::type_complexity)]
    fn run_interval(
        &mut self,
        step: u64,
    ) -> Result<(Option<f64>, Option<f64>, Option<f64>, usize), LoopError> {
        let buffered: Vec<String> = self.state.acr_buffer.clone();
        let mut verified = 0usize;
        let mut heuristics_passed = 0usize;
        let mut eligible_count = 0usize;
        let mut covered_uids: BTreeSet<String> = BTreeSet::new();

        for uid in &buffered {
            let inst = self.by_uid[uid.as_str()];
            let gold_answer = inst.gold.answer_text();
            let acr_prompt = build_acr_prompt(inst);
            let alpha = acr_success_prob(
                &self.state.teacher,
                uid,
                &gold_answer,
                self.config.acr_rollouts,
                self.config.exposure,
            )?;
            let mut rng = self.site_rng(step, SITE_ACR, Some(uid));
            let candidates = acr_sample(
                &self.state.teacher,
                &self.generator,
                uid,
                &acr_prompt,
                &gold_answer,
                self.config.acr_rollouts,
                self.config.exposure,
                &mut rng,
            )?;

            let context = match &inst.label_details {
                Some(details) => format!("{}\n{}", inst.prompt, details),
                None => inst.prompt.clone(),
            };
            let mut judged: Vec<(crate::policy::Rollout, FilterVerdict)> = Vec::new();
            for (k, rollout) in candidates.into_iter().enumerate() {
                let (report, _) = score_completion(
                    inst,
                    &rollout.trace,
                    crate::extract::ExtractionMode::Strict,
                    self.aliases,
                    None,
                )?;
                let verdict = evaluate_trace(
                    &rollout.trace,
                    &context,
                    report.reward,
                    &format!("{uid}:{step}:{k}"),
                    &self.rules,
                    self.scorer,
                    self.config.quality_threshold,
                );
                if verdict.verifier_score == 1.0 {
                    verified += 1;
                    if verdict.heuristics_pass() {
                        heuristics_passed += 1;
                        if verdict.eligible {
                            eligible_count += 1;
                        }
                    }
                }
                judged.push((rollout, verdict));
            }

            let mut select_rng = self.site_rng(step, SITE_SELECT, Some(uid));
            let chosen = select_trace(&judged, &mut select_rng);
            let accepted = chosen.is_some();
            self.events.push(LoopEvent {
                step,
                uid: uid.clone(),
                kind: LoopEventKind::AcrAttempt { alpha, accepted },
            });
            if let Some(chosen_idx) = chosen {
                let (rollout, _) = &judged[chosen_idx];
                covered_uids.insert(uid.clone());
                self.state.distill_buffer.push(DistillPair {
                    uid: uid.clone(),
                    target_idx: rollout.answer_idx,
                    trace: rollout.trace.clone(),
                });
            }
        }

        let mut distill_rng = self.site_rng(step, SITE_DISTILL, None);
        let (distilled, moves) = distill_batch(
            &self.state.distill_buffer,
            &mut self.policy,
            self.config.distill_cap,
            self.config.lr_rlvr * self.config.lr_scale,
            &mut distill_rng,
        )?;
        for (uid, before, after) in moves {
            self.events.push(LoopEvent {
                step,
                uid,
                kind: LoopEventKind::Distill {
                    log_p_before: before,
                    log_p_after: after,
                },
            });
        }

        // Flush both buffers entirely, dropping any unsampled remainder.
        self.state.acr_buffer.clear();
        self.state.acr_buffered.clear();
        self.state.distill_buffer.clear();

        let frac = |num: usize, den: usize| -> Option<f64> {
            (den > 0).then(|| num as f64 / den as f64)
        };
        Ok((
            frac(heuristics_passed, verified),
            frac(eligible_count, heuristics_passed),
            frac(covered_uids.len(), buffered.len()),
            distilled,
        ))
    }
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Metrics CSV: a schema header line, a column header, one row per step.
pub fn metrics_to_csv(metrics: &[StepMetrics]) -> String {
    let mut out = String::from("# ctirl-metrics-v1\n");
    out.push_str(
        "step,zero_solve_fraction,mean_reward,mean_entropy,heuristic_pass_fraction,ml_pass_fraction,uid_coverage,distilled\n",
    );
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{},{},{},{}",
            m.step,
            m.zero_solve_fraction,
            m.mean_reward,
            m.mean_entropy,
            fmt_opt(m.heuristic_pass_fraction),
            fmt_opt(m.ml_pass_fraction),
            fmt_opt(m.uid_coverage),
            m.distilled
        );
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<StepMetrics>, LoopError> {
    let mut out = Vec::new();
    for line in text.lines().skip(2) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(LoopError::BadConfig(format!("bad metrics row: {line}")));
        }
        let opt = |s: &str| -> Option<f64> {
            if s.is_empty() {
                None
            } else {
                s.parse().ok()
            }
        };
        let req = |s: &str| -> Result<f64, LoopError> {
            s.parse()
                .map_err(|_| LoopError::BadConfig(format!("bad metrics value: {s}")))
        };
        out.push(StepMetrics {
            step: cols[0]
                .parse()
                .map_err(|_| LoopError::BadConfig(format!("bad step: {}", cols[0])))?,
            zero_solve_fraction: req(cols[1])?,
            mean_reward: req(cols[2])?,
            mean_entropy: req(cols[3])?,
            heuristic_pass_fraction: opt(cols[4]),
            ml_pass_fraction: opt(cols[5]),
            uid_coverage: opt(cols[6]),
            distilled: cols[7]
                .parse()
                .map_err(|_| LoopError::BadConfig(format!("bad distilled: {}", cols[7])))?,
        });
    }
    Ok(out)
}

fn jsonl_with_header<T: Serialize>(schema: &str, records: &[T]) -> String {
    let mut out = format!("{}\n", serde_json::json!({ "schema": schema }));
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serialization"));
        out.push('\n');
    }
    out
}

fn read_jsonl_with_header<T: for<'de> Deserialize<'de>>(
    path: &Path,
    schema: &str,
) -> Result<Vec<T>, LoopError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: serde_json::Value = lines
        .next()
        .map(serde_json::from_str)
        .transpose()
        .map_err(|e| LoopError::BadConfig(format!("bad header: {e}")))?
        .ok_or_else(|| LoopError::BadConfig("empty file".into()))?;
    if header["schema"] != schema {
        return Err(LoopError::BadConfig(format!(
            "expected schema {schema}, found {}",
            header["schema"]
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| LoopError::BadConfig(format!("bad record: {e}")))?,
        );
    }
    Ok(out)
}

/// Writes metrics.csv, snapshots.jsonl, events.jsonl, policy.jsonl and
/// run_meta.json into a directory.
pub fn write_run(dir: &Path, result: &RunResult, config: &LoopConfig) -> Result<(), LoopError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_to_csv(&result.metrics))?;
    fs::write(
        dir.join("snapshots.jsonl"),
        jsonl_with_header("snapshots-v1", &result.snapshots),
    )?;
    fs::write(
        dir.join("events.jsonl"),
        jsonl_with_header("events-v1", &result.events),
    )?;
    result
        .policy
        .save(&dir.join("policy.jsonl"))
        .map_err(LoopError::Policy)?;
    let meta = serde_json::json!({
        "schema": "run-meta-v1",
        "config": config,
    });
    fs::write(dir.join("run_meta.json"), format!("{meta:#}\n"))?;
    Ok(())
}

pub fn read_snapshots(path: &Path) -> Result<Vec<SnapshotRecord>, LoopError> {
    read_jsonl_with_header(path, "snapshots-v1")
}

pub fn read_events(path: &Path) -> Result<Vec<LoopEvent>, LoopError> {
    read_jsonl_with_header(path, "events-v1")
}

pub fn read_run_meta(path: &Path) -> Result<LoopConfig, LoopError> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| LoopError::BadConfig(e.to_string()))?;
    if value["schema"] != "run-meta-v1" {
        return Err(LoopError::BadConfig("unknown run meta schema".into()));
    }
    serde_json::from_value(value["config"].clone())
        .map_err(|e| LoopError::BadConfig(format!("bad config block: {e}")))
}

// ---------------------------------------------------------------------------
// Synthetic datasets and policies for simulations
// ---------------------------------------------------------------------------

/// How a toy policy is initialized over each prompt's answer space.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyInit {
    pub answers_per_prompt: usize,
    /// Initial sampling probability of the gold answer.
    pub initial_gold_prob: f64,
    /// When set, one wrong answer starts with this much mass (a confidently
    /// wrong prior); the rest is spread uniformly.
    pub initial_dominant_prob: Option<f64>,
    pub temperature: f64,
}

impl Default for PolicyInit {
    fn default() -> Self {
        PolicyInit {
            answers_per_prompt: 50,
            initial_gold_prob: 0.002,
            initial_dominant_prob: Some(0.95),
            temperature: 1.0,
        }
    }
}

const PROMPT_TOOLS: [&str; 8] = [
    "powershell", "rundll32", "mshta", "wmic", "certutil", "schtasks", "regsvr32", "msbuild",
];
const PROMPT_ACTIONS: [&str; 6] = [
    "stage encoded payloads",
    "establish scheduled persistence",
    "enumerate domain trusts",
    "exfiltrate archive fragments",
    "tamper with event logging",
    "pivot across admin shares",
];
const PROMPT_SOURCES: [&str; 5] = [
    "endpoint telemetry",
    "proxy records",
    "authentication logs",
    "registry audit trails",
    "network flow captures",
];

/// Generates a synthetic single-identifier dataset with varied prompt
/// vocabulary; prompts are distinct and deterministic in the seed.
pub fn generate_dataset(count: usize, seed: u64) -> Vec<TaskInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xD47A]));
    (0..count)
        .map(|i| {
            let tool = PROMPT_TOOLS[rng.gen_range(0..PROMPT_TOOLS.len())];
            let action = PROMPT_ACTIONS[rng.gen_range(0..PROMPT_ACTIONS.len())];
            let source = PROMPT_SOURCES[rng.gen_range(0..PROMPT_SOURCES.len())];
            let gold = format!("CAPEC-{}", 100 + i);
            TaskInstance {
                uid: format!("sim-{i:04}"),
                kind: TaskKind::SingleId,
                prompt: format!(
                    "An intrusion segment {i} abused {tool} to {action}, surfacing in {source} \
                     before defenders rotated credentials and isolated the affected subnet"
                ),
                gold: crate::task::GoldLabel::Id(gold),
                label_details: Some(format!(
                    "Catalog entry describing how {tool} can {action} when chained with \
                     weak segmentation controls"
                )),
            }
        })
        .collect()
}

/// Builds a toy policy over `gold + (n-1)` distractor answers per prompt,
/// with the configured initial probabilities.
pub fn build_policy(
    dataset: &[TaskInstance],
    init: &PolicyInit,
    seed: u64,
) -> Result<ToyPolicy, LoopError> {
    if init.answers_per_prompt < 2 {
        return Err(LoopError::BadConfig(
            "answers_per_prompt must be >= 2".into(),
        ));
    }
    let n = init.answers_per_prompt;
    let p0 = init.initial_gold_prob;
    if !(0.0 < p0 && p0 < 1.0) {
        return Err(LoopError::BadConfig(
            "initial_gold_prob must be in (0, 1)".into(),
        ));
    }
    if let Some(d) = init.initial_dominant_prob {
        if d <= 0.0 || p0 + d >= 1.0 || n < 3 {
            return Err(LoopError::BadConfig(
                "initial_dominant_prob must leave mass for the rest".into(),
            ));
        }
    }
    let mut policy = ToyPolicy::new(init.temperature);
    for inst in dataset {
        let gold = inst.gold.answer_text();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xA25, fnv1a(&inst.uid)]));
        let mut answers = vec![gold.clone()];
        let mut seen: BTreeSet<String> = answers.iter().cloned().collect();
        while answers.len() < n {
            let candidate = distractor_for(&gold, inst.kind, &mut rng);
            if seen.insert(candidate.clone()) {
                answers.push(candidate);
            }
        }
        let probs = match init.initial_dominant_prob {
            Some(d) => {
                let rest = (1.0 - p0 - d) / (n - 2) as f64;
                let mut probs = vec![rest; n];
                probs[0] = p0;
                probs[1] = d;
                probs
            }
            None => {
                let rest = (1.0 - p0) / (n - 1) as f64;
                let mut probs = vec![rest; n];
                probs[0] = p0;
                probs
            }
        };
        policy.add_prompt(&inst.uid, answers, &probs);
    }
    Ok(policy)
}

fn distractor_for(gold: &str, kind: TaskKind, rng: &mut impl Rng) -> String {
    match kind {
        TaskKind::AttackTechnique => {
            // Distinct base techniques so rewards stay binary.
            format!("T{}", 1600 + rng.gen_range(0..300))
        }
        TaskKind::CvssVector => {
            let av = ["N", "A", "L", "P"][rng.gen_range(0..4)];
            let ui = ["N", "R"][rng.gen_range(0..2)];
            let c = ["H", "L", "N"][rng.gen_range(0..3)];
            format!("CVSS:3.1/AV:{av}/AC:L/PR:N/UI:{ui}/S:U/C:{c}/I:L/A:N")
        }
        TaskKind::ActorAttribution => format!("Group {}", rng.gen_range(100..999)),
        TaskKind::IdSet => format!("CWE-{}", rng.gen_range(1..999)),
        TaskKind::SingleId => {
            if gold.starts_with("CWE-") {
                format!("CWE-{}", rng.gen_range(1..999))
            } else {
                format!("CAPEC-{}", 600 + rng.gen_range(0..400))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::GoldLabel;

    fn tiny_config() -> LoopConfig {
        LoopConfig {
            mode: LoopMode::Acr,
            rollouts_per_prompt: 4,
            acr_rollouts: 4,
            distill_interval: 2,
            distill_cap: 8,
            lr_rlvr: 0.2,
            lr_scale: 1.0,
            ema_decay: 0.9,
            quality_threshold: 0.5,
            batch_size: 4,
            total_steps: 10,
            exposure: 0.8,
            seed: 7,
            excluded_from_acr: vec![TaskKind::CvssVector],
            snapshot_every: Some(2),
            defect_leakage_rate: 0.0,
            defect_repetition_rate: 0.0,
            defect_answer_only_rate: 0.0,
        }
    }

    fn tiny_dataset() -> Vec<TaskInstance> {
        generate_dataset(6, 3)
    }

    fn tiny_policy(dataset: &[TaskInstance]) -> ToyPolicy {
        build_policy(
            dataset,
            &PolicyInit {
                answers_per_prompt: 6,
                initial_gold_prob: 0.05,
                initial_dominant_prob: Some(0.7),
                temperature: 1.0,
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn zero_steps_is_a_null_run() {
        let dataset = tiny_dataset();
        let policy = tiny_policy(&dataset);
        let before: Vec<f64> = dataset
            .iter()
            .map(|i| policy.answer_prob(&i.uid, &i.gold.answer_text()).unwrap())
            .collect();
        let config = LoopConfig {
            total_steps: 0,
            ..tiny_config()
        };
        let result =
            run_loop(&dataset, policy, &config, None, &QualityScorer::ConstantPass).unwrap();
        assert!(result.metrics.is_empty());
        for (inst, p0) in dataset.iter().zip(before) {
            let p = result
                .policy
                .answer_prob(&inst.uid, &inst.gold.answer_text())
                .unwrap();
            assert_eq!(p, p0);
        }
    }

    #[test]
    fn uid_mismatch_aborts_at_startup() {
        let dataset = tiny_dataset();
        let policy = ToyPolicy::new(1.0);
        let err = run_loop(
            &dataset,
            policy,
            &tiny_config(),
            None,
            &QualityScorer::ConstantPass,
        )
        .unwrap_err();
        assert!(matches!(err, LoopError::UidMismatch(uids) if uids.len() == 6));
    }

    #[test]
    fn invalid_config_is_named() {
        let bad = LoopConfig {
            rollouts_per_prompt: 1,
            ..tiny_config()
        };
        assert!(matches!(bad.validate(), Err(LoopError::BadConfig(m)) if m.contains("rollouts")));
        let bad = LoopConfig {
            lr_scale: 0.0,
            ..tiny_config()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cvss_prompts_never_enter_the_acr_buffer() {
        // One CVSS prompt that always fails plus one ordinary prompt; the
        // CVSS uid must never appear in an ACR attempt event.
        let cvss_gold =
            crate::cvss::parse_cvss("CVSS:3.1/AV:N/AC:L/PR:N/UI:N/S:U/C:H/I:H/A:H").unwrap();
        let dataset = vec![
            TaskInstance {
                uid: "cvss-0".into(),
                kind: TaskKind::CvssVector,
                prompt: "a heap overflow reachable from the network with no privileges".into(),
                gold: GoldLabel::Cvss(cvss_gold),
                label_details: None,
            },
            TaskInstance {
                uid: "id-0".into(),
                kind: TaskKind::SingleId,
                prompt: "an injection example against a query parser component".into(),
                gold: GoldLabel::Id("CAPEC-66".into()),
                label_details: None,
            },
        ];
        let policy = build_policy(
            &dataset,
            &PolicyInit {
                answers_per_prompt: 4,
                initial_gold_prob: 0.01,
                initial_dominant_prob: None,
                temperature: 1.0,
            },
            5,
        )
        .unwrap();
        let config = LoopConfig {
            batch_size: 2,
            total_steps: 12,
            distill_interval: 3,
            ..tiny_config()
        };
        let result =
            run_loop(&dataset, policy, &config, None, &QualityScorer::ConstantPass).unwrap();
        assert!(result
            .events
            .iter()
            .filter(|e| matches!(e.kind, LoopEventKind::AcrAttempt { .. }))
            .all(|e| e.uid != "cvss-0"));
        assert!(result
            .events
            .iter()
            .any(|e| matches!(e.kind, LoopEventKind::AcrAttempt { .. }) && e.uid == "id-0"));
    }

    #[test]
    fn distill_cap_is_respected_and_buffers_flush() {
        let dataset = tiny_dataset();
        let policy = tiny_policy(&dataset);
        let config = LoopConfig {
            distill_cap: 2,
            batch_size: 6,
            total_steps: 6,
            distill_interval: 2,
            ..tiny_config()
        };
        let result =
            run_loop(&dataset, policy, &config, None, &QualityScorer::ConstantPass).unwrap();
        for m in &result.metrics {
            assert!(m.distilled <= 2, "step {} distilled {}", m.step, m.distilled);
            if m.step % 2 != 0 {
                assert_eq!(m.distilled, 0);
            }
        }
        let mut by_step: BTreeMap<u64, usize> = BTreeMap::new();
        for e in &result.events {
            if matches!(e.kind, LoopEventKind::Distill { .. }) {
                *by_step.entry(e.step).or_default() += 1;
            }
        }
        assert!(by_step.values().all(|&c| c <= 2));
    }

    #[test]
    fn distill_targets_use_original_prompts() {
        // Structural guarantee: a distill pair carries only the original
        // uid; resolving it through the policy must find the original
        // prompt's answer space. Log-probability must move up at each step.
        let dataset = tiny_dataset();
        let policy = tiny_policy(&dataset);
        let config = LoopConfig {
            batch_size: 6,
            total_steps: 4,
            distill_interval: 2,
            exposure: 1.0,
            ..tiny_config()
        };
        let result =
            run_loop(&dataset, policy, &config, None, &QualityScorer::ConstantPass).unwrap();
        let distills: Vec<&LoopEvent> = result
            .events
            .iter()
            .filter(|e| matches!(e.kind, LoopEventKind::Distill { .. }))
            .collect();
        assert!(!distills.is_empty());
        for e in distills {
            assert!(dataset.iter().any(|i| i.uid == e.uid));
            if let LoopEventKind::Distill {
                log_p_before,
                log_p_after,
            } = e.kind
            {
                assert!(log_p_after > log_p_before);
            }
        }
    }

    #[test]
    fn grpo_only_matches_full_loop_before_first_interval() {
        let dataset = tiny_dataset();
        let policy = tiny_policy(&dataset);
        let config = LoopConfig {
            distill_interval: 5,
            total_steps: 6,
            batch_size: 4,
            ..tiny_config()
        };
        let full = run_loop(
            &dataset,
            policy.clone(),
            &config,
            None,
            &QualityScorer::ConstantPass,
        )
        .unwrap();
        let baseline = run_grpo_only(&dataset, policy, &config, None).unwrap();
        for (a, b) in full.metrics[..4].iter().zip(&baseline.metrics[..4]) {
            assert_eq!(a, b, "step {}", a.step);
        }
        // Divergence can only start at the first interval boundary.
        assert_eq!(full.metrics[4].step, 5);
        assert!(full.metrics[4].uid_coverage.is_some());
        assert_eq!(baseline.metrics[4].distilled, 0);
        assert!(baseline.metrics[4].uid_coverage.is_none());
    }

    #[test]
    fn metric_log_is_deterministic_in_the_seed() {
        let dataset = tiny_dataset();
        let policy = tiny_policy(&dataset);
        let config = tiny_config();
        let a = run_loop(
            &dataset,
            policy.clone(),
            &config,
            None,
            &QualityScorer::ConstantPass,
        )
        .unwrap();
        let b = run_loop(&dataset, policy, &config, None, &QualityScorer::ConstantPass).unwrap();
        assert_eq!(metrics_to_csv(&a.metrics), metrics_to_csv(&b.metrics));
        assert_eq!(a.snapshots.len(), b.snapshots.len());
    }

    #[test]
    fn acr_prompt_template_blocks() {
        let inst = TaskInstance {
            uid: "x".into(),
            kind: TaskKind::SingleId,
            prompt: "original task text".into(),
            gold: GoldLabel::Id("CAPEC-66".into()),
            label_details: Some("reference details".into()),
        };
        let prompt = build_acr_prompt(&inst);
        assert!(prompt.starts_with("original task text"));
        assert!(prompt.contains("GROUND_TRUTH_LABELS:\n- CAPEC-66"));
        assert!(prompt.contains("LABEL_REFERENCE:\nreference details"));
        assert!(prompt.contains("Do NOT say or imply"));
        assert!(prompt.contains("final answer in the same format"));

        let no_details = TaskInstance {
            label_details: None,
            ..inst.clone()
        };
        assert!(!build_acr_prompt(&no_details).contains("LABEL_REFERENCE"));

        let set_inst = TaskInstance {
            kind: TaskKind::IdSet,
            gold: GoldLabel::IdSet(
                ["CWE-79".to_string(), "CWE-89".to_string()]
                    .into_iter()
                    .collect(),
            ),
            ..inst.clone()
        };
        let set_prompt = build_acr_prompt(&set_inst);
        assert!(set_prompt.contains("- CWE-79\n- CWE-89"));
    }

    #[test]
    fn oversized_label_details_are_truncated_first() {
        let huge = vec!["filler"; 6000].join(" ");
        let inst = TaskInstance {
            uid: "x".into(),
            kind: TaskKind::SingleId,
            prompt: "short prompt".into(),
            gold: GoldLabel::Id("CAPEC-66".into()),
            label_details: Some(huge),
        };
        let prompt = build_acr_prompt(&inst);
        assert!(prompt.split_whitespace().count() <= ACR_MAX_TOKENS);
        assert!(prompt.starts_with("short prompt"));
        assert!(prompt.contains("Do NOT say or imply"));

        // A prompt that is itself over budget gets trimmed from its end,
        // with the template preserved.
        let huge_prompt = vec!["word"; 5000].join(" ");
        let inst = TaskInstance {
            prompt: huge_prompt,
            label_details: None,
            ..inst
        };
        let prompt = build_acr_prompt(&inst);
        assert!(prompt.split_whitespace().count() <= ACR_MAX_TOKENS);
        assert!(prompt.contains("GROUND_TRUTH_LABELS"));
    }

    #[test]
    fn metrics_csv_round_trips() {
        let dataset = tiny_dataset();
        let policy = tiny_policy(&dataset);
        let result = run_loop(
            &dataset,
            policy,
            &tiny_config(),
            None,
            &QualityScorer::ConstantPass,
        )
        .unwrap();
        let csv = metrics_to_csv(&result.metrics);
        assert!(csv.starts_with("# ctirl-metrics-v1\n"));
        let parsed = parse_metrics_csv(&csv).unwrap();
        assert_eq!(parsed.len(), result.metrics.len());
        for (a, b) in parsed.iter().zip(&result.metrics) {
            assert_eq!(a.step, b.step);
            assert!((a.mean_reward - b.mean_reward).abs() < 1e-9);
            assert_eq!(a.distilled, b.distilled);
        }
    }

    #[test]
    fn run_files_are_written_and_readable() {
        let dataset = tiny_dataset();
        let policy = tiny_policy(&dataset);
        let config = tiny_config();
        let result =
            run_loop(&dataset, policy, &config, None, &QualityScorer::ConstantPass).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &result, &config).unwrap();
        let snaps = read_snapshots(&dir.path().join("snapshots.jsonl")).unwrap();
        assert_eq!(snaps.len(), result.snapshots.len());
        let events = read_events(&dir.path().join("events.jsonl")).unwrap();
        assert_eq!(events.len(), result.events.len());
        let meta = read_run_meta(&dir.path().join("run_meta.json")).unwrap();
        assert_eq!(meta.seed, config.seed);
        let reloaded = ToyPolicy::load(&dir.path().join("policy.jsonl")).unwrap();
        assert_eq!(reloaded.len(), dataset.len());
    }

    #[test]
    fn snapshots_cover_every_prompt_at_cadence() {
        let dataset = tiny_dataset();
        let policy = tiny_policy(&dataset);
        let config = LoopConfig {
            snapshot_every: Some(5),
            total_steps: 12,
            ..tiny_config()
        };
        let result =
            run_loop(&dataset, policy, &config, None, &QualityScorer::ConstantPass).unwrap();
        let steps: BTreeSet<u64> = result.snapshots.iter().map(|s| s.step).collect();
        assert_eq!(steps, [0u64, 5, 10, 12].into_iter().collect());
        for step in steps {
            let count = result.snapshots.iter().filter(|s| s.step == step).count();
            assert_eq!(count, dataset.len());
        }
    }
}
