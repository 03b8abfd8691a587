//! Finite-answer-space softmax policy standing in for the LLM actor.
//!
//! Each prompt owns a logit vector over its fixed answer space. Sampling
//! draws from `softmax(logits / temperature)`; the same distribution feeds
//! the group-normalized policy-gradient update, the supervised
//! cross-entropy step, the EMA teacher, and the closed-form success
//! probabilities used by the detectability calculators.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const ADVANTAGE_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("unknown prompt uid {0}")]
    UnknownUid(String),
    #[error("answer {answer} not in the answer space of {uid}")]
    AnswerNotInSpace { uid: String, answer: String },
    #[error("group update needs at least 2 rollouts, got {0}")]
    GroupTooSmall(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad snapshot file: {0}")]
    BadSnapshot(String),
}

/// Logits over one prompt's answer space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptPolicy {
    pub answers: Vec<String>,
    pub logits: Vec<f64>,
}

impl PromptPolicy {
    pub fn answer_index(&self, answer: &str) -> Option<usize> {
        self.answers.iter().position(|a| a == answer)
    }
}

/// Per-prompt softmax policy with a global sampling temperature.
#[derive(Debug, Clone)]
pub struct ToyPolicy {
    prompts: BTreeMap<String, PromptPolicy>,
    pub temperature: f64,
}

fn softmax_scaled(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 0.0 {
        // Zero-temperature limit: point mass on the argmax (lowest index
        // wins ties).
        let best = logits
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (i, &z)| {
                if z > acc.1 {
                    (i, z)
                } else {
                    acc
                }
            })
            .0;
        let mut p = vec![0.0; logits.len()];
        p[best] = 1.0;
        return p;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

impl ToyPolicy {
    pub fn new(temperature: f64) -> Self {
        ToyPolicy {
            prompts: BTreeMap::new(),
            temperature,
        }
    }

    /// Registers a prompt with its fixed answer space. `probs` are the
    /// desired initial sampling probabilities; logits are set so that
    /// `softmax(logits / temperature)` reproduces them exactly.
    pub fn add_prompt(&mut self, uid: &str, answers: Vec<String>, probs: &[f64]) {
        assert_eq!(answers.len(), probs.len());
        let temperature = if self.temperature == 0.0 { 1.0 } else { self.temperature };
        let logits = probs.iter().map(|p| temperature * p.max(1e-300).ln()).collect();
        self.prompts.insert(
            uid.to_string(),
            PromptPolicy { answers, logits },
        );
    }

    pub fn prompt(&self, uid: &str) -> Result<&PromptPolicy, PolicyError> {
        self.prompts
            .get(uid)
            .ok_or_else(|| PolicyError::UnknownUid(uid.to_string()))
    }

    fn prompt_mut(&mut self, uid: &str) -> Result<&mut PromptPolicy, PolicyError> {
        self.prompts
            .get_mut(uid)
            .ok_or_else(|| PolicyError::UnknownUid(uid.to_string()))
    }

    pub fn uids(&self) -> impl Iterator<Item = &String> {
        self.prompts.keys()
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Sampling distribution for a prompt.
    pub fn distribution(&self, uid: &str) -> Result<Vec<f64>, PolicyError> {
        Ok(softmax_scaled(&self.prompt(uid)?.logits, self.temperature))
    }

    /// Probability of one answer under the sampling distribution.
    pub fn answer_prob(&self, uid: &str, answer: &str) -> Result<f64, PolicyError> {
        let prompt = self.prompt(uid)?;
        let idx = prompt
            .answer_index(answer)
            .ok_or_else(|| PolicyError::AnswerNotInSpace {
                uid: uid.to_string(),
                answer: answer.to_string(),
            })?;
        Ok(self.distribution(uid)?[idx])
    }

    /// Draws `n` independent answer indices.
    pub fn sample_answers(
        &self,
        uid: &str,
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>, PolicyError> {
        let dist = self.distribution(uid)?;
        Ok((0..n).map(|_| sample_index(&dist, rng)).collect())
    }

    /// Shannon entropy (nats) of the sampling distribution.
    pub fn entropy(&self, uid: &str) -> Result<f64, PolicyError> {
        let dist = self.distribution(uid)?;
        Ok(dist
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum())
    }

    /// Group-normalized policy-gradient update on one prompt.
    ///
    /// Advantages are `(r_j - mean) / (std + 1e-8)` over the group; the
    /// logits move along `lr * sum_j A_j * grad log p(a_j)`. A constant-
    /// reward group is exactly signal-free and leaves the logits
    /// bit-identical.
    pub fn grpo_update(
        &mut self,
        uid: &str,
        rollouts: &[(usize, f64)],
        lr: f64,
        kl: Option<&KlPenalty>,
    ) -> Result<(), PolicyError> {
        if rollouts.len() < 2 {
            return Err(PolicyError::GroupTooSmall(rollouts.len()));
        }
        let temperature = self.temperature;
        let dist = self.distribution(uid)?;
        let prompt = self.prompt_mut(uid)?;
        let n = rollouts.len() as f64;
        let mean = rollouts.iter().map(|(_, r)| r).sum::<f64>() / n;
        let var = rollouts.iter().map(|(_, r)| (r - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let all_equal = rollouts.iter().all(|(_, r)| *r == rollouts[0].1);
        if !all_equal {
            let inv_temp = 1.0 / temperature;
            let mut grad = vec![0.0; prompt.logits.len()];
            for (answer_idx, r) in rollouts {
                let adv = (r - mean) / (std + ADVANTAGE_EPS);
                for (i, g) in grad.iter_mut().enumerate() {
                    let indicator = if i == *answer_idx { 1.0 } else { 0.0 };
                    *g += adv * inv_temp * (indicator - dist[i]);
                }
            }
            for (z, g) in prompt.logits.iter_mut().zip(&grad) {
                *z += lr * g;
            }
        }
        if let Some(kl) = kl {
            if kl.coeff != 0.0 {
                self.apply_kl_pull(uid, kl)?;
            }
        }
        Ok(())
    }

    // Gradient of -coeff * KL(pi || ref) with respect to the logits; an
    // optional regularizer for parity with trainers that anchor updates to
    // a reference policy.
    fn apply_kl_pull(&mut self, uid: &str, kl: &KlPenalty) -> Result<(), PolicyError> {
        let dist = self.distribution(uid)?;
        let ref_dist = softmax_scaled(&kl.reference_logits, self.temperature);
        let inv_temp = 1.0 / if self.temperature == 0.0 { 1.0 } else { self.temperature };
        let log_ratio: Vec<f64> = dist
            .iter()
            .zip(&ref_dist)
            .map(|(p, q)| (p.max(1e-300)).ln() - (q.max(1e-300)).ln())
            .collect();
        let expected: f64 = dist.iter().zip(&log_ratio).map(|(p, lr_)| p * lr_).sum();
        let prompt = self.prompt_mut(uid)?;
        for (i, z) in prompt.logits.iter_mut().enumerate() {
            *z -= kl.coeff * inv_temp * dist[i] * (log_ratio[i] - expected);
        }
        Ok(())
    }

    /// One supervised cross-entropy step toward `target_idx`; strictly
    /// increases `log p(target)` for any positive learning rate.
    pub fn sft_step(&mut self, uid: &str, target_idx: usize, lr: f64) -> Result<(), PolicyError> {
        let dist = self.distribution(uid)?;
        let temperature = self.temperature;
        let prompt = self.prompt_mut(uid)?;
        if target_idx >= prompt.answers.len() {
            return Err(PolicyError::AnswerNotInSpace {
                uid: uid.to_string(),
                answer: format!("#{target_idx}"),
            });
        }
        let inv_temp = 1.0 / temperature;
        for (i, z) in prompt.logits.iter_mut().enumerate() {
            let indicator = if i == target_idx { 1.0 } else { 0.0 };
            *z += lr * inv_temp * (indicator - dist[i]);
        }
        Ok(())
    }

    /// Writes the policy as a versioned flat file: a header record, then one
    /// record per prompt in uid order.
    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let mut out = fs::File::create(path)?;
        writeln!(
            out,
            "{}",
            serde_json::json!({"schema": "policy-v1", "temperature": self.temperature})
        )?;
        for (uid, prompt) in &self.prompts {
            let record = serde_json::json!({
                "uid": uid,
                "answers": prompt.answers,
                "logits": prompt.logits,
            });
            writeln!(out, "{record}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| PolicyError::BadSnapshot("empty file".into()))??;
        let header: serde_json::Value = serde_json::from_str(&header)
            .map_err(|e| PolicyError::BadSnapshot(e.to_string()))?;
        if header["schema"] != "policy-v1" {
            return Err(PolicyError::BadSnapshot(format!(
                "unknown schema {}",
                header["schema"]
            )));
        }
        let temperature = header["temperature"]
            .as_f64()
            .ok_or_else(|| PolicyError::BadSnapshot("missing temperature".into()))?;
        let mut policy = ToyPolicy::new(temperature);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            #[derive(Deserialize)]
            struct Record {
                uid: String,
                answers: Vec<String>,
                logits: Vec<f64>,
            }
            let record: Record = serde_json::from_str(&line)
                .map_err(|e| PolicyError::BadSnapshot(e.to_string()))?;
            if record.answers.len() != record.logits.len() {
                return Err(PolicyError::BadSnapshot(format!(
                    "uid {}: {} answers vs {} logits",
                    record.uid,
                    record.answers.len(),
                    record.logits.len()
                )));
            }
            policy.prompts.insert(
                record.uid,
                PromptPolicy {
                    answers: record.answers,
                    logits: record.logits,
                },
            );
        }
        Ok(policy)
    }
}

/// Optional KL-to-reference pull for the group update.
#[derive(Debug, Clone)]
pub struct KlPenalty {
    pub coeff: f64,
    pub reference_logits: Vec<f64>,
}

fn sample_index(dist: &[f64], rng: &mut impl Rng) -> usize {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    dist.len() - 1
}

/// EMA copy of the actor's logits, used to sample answer-conditioned traces.
#[derive(Debug, Clone)]
pub struct TeacherState {
    pub policy: ToyPolicy,
    pub decay: f64,
}

impl TeacherState {
    /// Initializes the teacher as a copy of the actor.
    pub fn new(actor: &ToyPolicy, decay: f64) -> Self {
        TeacherState {
            policy: actor.clone(),
            decay,
        }
    }

    /// `teacher = decay * teacher + (1 - decay) * actor`, elementwise.
    pub fn update(&mut self, actor: &ToyPolicy) {
        for (uid, teacher_prompt) in self.policy.prompts.iter_mut() {
            if let Some(actor_prompt) = actor.prompts.get(uid) {
                for (t, a) in teacher_prompt.logits.iter_mut().zip(&actor_prompt.logits) {
                    *t = self.decay * *t + (1.0 - self.decay) * a;
                }
            }
        }
    }
}

/// Synthetic reasoning-trace generator for the simulated loop. With all
/// defect rates at zero the produced traces pass every heuristic filter.
#[derive(Debug, Clone)]
pub struct SimTraceGenerator {
    pub leakage_rate: f64,
    pub repetition_rate: f64,
    pub answer_only_rate: f64,
}

impl Default for SimTraceGenerator {
    fn default() -> Self {
        SimTraceGenerator {
            leakage_rate: 0.0,
            repetition_rate: 0.0,
            answer_only_rate: 0.0,
        }
    }
}

const TRACE_TEMPLATES: [[&str; 3]; 3] = [
    [
        "The report centers on {A} together with {B}, and the sequencing mirrors what {C} produces when paired with {D}.",
        "Weighing the remaining candidates, the references to {E} narrow the field decisively toward one option.",
        "Nothing else in the description accounts for both {A} and {E} at once.",
    ],
    [
        "Starting from {A}, the described chain touches {B} before settling on behavior tied to {C}.",
        "Because {D} appears alongside {E}, alternative explanations drop away after a first pass.",
        "The correlation between {B} and {D} is the deciding detail here.",
    ],
    [
        "Key observables here are {A}, {B} and {C}, which jointly describe the activity in question.",
        "A second look at {D} next to {E} confirms the initial read rather than contradicting it.",
        "On that basis the remaining option is the only consistent one.",
    ],
];

impl SimTraceGenerator {
    /// Renders a synthetic completion that reasons over words drawn from the
    /// prompt and ends with the answer in a boxed final line.
    pub fn render(&self, prompt_text: &str, answer: &str, rng: &mut impl Rng) -> String {
        if self.answer_only_rate > 0.0 && rng.gen_bool(self.answer_only_rate) {
            return format!("\\boxed{{{answer}}}");
        }
        let words: Vec<&str> = prompt_text
            .split_whitespace()
            .filter(|w| w.len() > 2)
            .collect();
        let pick = |rng: &mut dyn rand::RngCore, fallback: &'static str| -> String {
            if words.is_empty() {
                fallback.to_string()
            } else {
                words[rng.gen_range(0..words.len())].to_string()
            }
        };
        let template = &TRACE_TEMPLATES[rng.gen_range(0..TRACE_TEMPLATES.len())];
        let fallbacks = ["activity", "telemetry", "artifacts", "context", "tooling"];
        let slots: Vec<String> = fallbacks.iter().map(|f| pick(rng, *f)).collect();
        let fill = |line: &str| -> String {
            line.replace("{A}", &slots[0])
                .replace("{B}", &slots[1])
                .replace("{C}", &slots[2])
                .replace("{D}", &slots[3])
                .replace("{E}", &slots[4])
        };
        let mut body: Vec<String> = template.iter().map(|l| fill(l)).collect();
        if self.repetition_rate > 0.0 && rng.gen_bool(self.repetition_rate) {
            let loop_line = fill("The activity involves {A} and the activity involves {A}.");
            body = vec![loop_line; 12];
        }
        if self.leakage_rate > 0.0 && rng.gen_bool(self.leakage_rate) {
            body.insert(0, "Based on the provided label, the mapping is clear.".to_string());
        }
        format!("{}\n\\boxed{{{answer}}}", body.join(" "))
    }
}

/// One sampled rollout: the chosen answer and its synthetic trace text.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub answer_idx: usize,
    pub answer: String,
    pub trace: String,
}

/// Draws `n` independent rollouts from the policy for one prompt.
pub fn sample_rollouts(
    policy: &ToyPolicy,
    generator: &SimTraceGenerator,
    uid: &str,
    prompt_text: &str,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Rollout>, PolicyError> {
    let prompt = policy.prompt(uid)?;
    let indices = policy.sample_answers(uid, n, rng)?;
    Ok(indices
        .into_iter()
        .map(|answer_idx| {
            let answer = prompt.answers[answer_idx].clone();
            let trace = generator.render(prompt_text, &answer, rng);
            Rollout {
                answer_idx,
                answer,
                trace,
            }
        })
        .collect())
}

/// Answer-conditioned sampling from the teacher: each draw emits the gold
/// answer with probability `exposure`, otherwise samples the teacher
/// distribution.
pub fn acr_sample(
    teacher: &TeacherState,
    generator: &SimTraceGenerator,
    uid: &str,
    acr_prompt_text: &str,
    gold_answer: &str,
    k: usize,
    exposure: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Rollout>, PolicyError> {
    let prompt = teacher.policy.prompt(uid)?;
    let gold_idx =
        prompt
            .answer_index(gold_answer)
            .ok_or_else(|| PolicyError::AnswerNotInSpace {
                uid: uid.to_string(),
                answer: gold_answer.to_string(),
            })?;
    let mut rollouts = Vec::with_capacity(k);
    for _ in 0..k {
        let answer_idx = if exposure > 0.0 && rng.gen_bool(exposure) {
            gold_idx
        } else {
            teacher.policy.sample_answers(uid, 1, rng)?[0]
        };
        let answer = prompt.answers[answer_idx].clone();
        let trace = generator.render(acr_prompt_text, &answer, rng);
        rollouts.push(Rollout {
            answer_idx,
            answer,
            trace,
        });
    }
    Ok(rollouts)
}

/// Closed-form probability that at least one of `k` answer-conditioned
/// draws emits the gold answer: the per-draw success probability is
/// `exposure + (1 - exposure) * p_teacher(gold)`.
pub fn acr_success_prob(
    teacher: &TeacherState,
    uid: &str,
    gold_answer: &str,
    k: usize,
    exposure: f64,
) -> Result<f64, PolicyError> {
    let p_gold = teacher.policy.answer_prob(uid, gold_answer)?;
    let per_draw = exposure + (1.0 - exposure) * p_gold;
    Ok(1.0 - (1.0 - per_draw).powi(k as i32))
}
