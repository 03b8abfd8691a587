//! Detectability-threshold calculators and estimators that check the
//! support-expansion predictions against simulation output.
//!
//! Under a rollout budget of `k` samples per prompt, an answer with success
//! probability below `eps = -ln(zeta) / k` is likely missed by every
//! rollout, so on-policy updates receive no signal for it. Seeding the
//! answer through conditioned generation and distilling at log-increment
//! `delta` per step crosses that threshold in
//! `N = ceil((ln(eps) - ln(p0)) / delta)` successful steps, and the expected
//! number of conditioned attempts to get those steps is `N / alpha` when
//! each attempt succeeds with probability `alpha`.
//!
//! Logs are natural throughout. `alpha_exp` here is the per-attempt
//! acceptance probability; it is unrelated to the EMA teacher decay, which
//! some configurations also call alpha.

use serde::{Deserialize, Serialize};

use crate::training::{LoopEvent, LoopEventKind, SnapshotRecord};

#[derive(Debug, thiserror::Error)]
pub enum TheoryError {
    #[error("parameter {name} = {value} outside domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("estimator needs {0}")]
    MissingData(&'static str),
}

fn check_domain(
    name: &'static str,
    value: f64,
    domain: &'static str,
    ok: bool,
) -> Result<(), TheoryError> {
    if ok {
        Ok(())
    } else {
        Err(TheoryError::Domain {
            name,
            value,
            domain,
        })
    }
}

/// Calculator inputs: rollout budget, failure probability, initial success
/// probability, per-step log increment, per-attempt acceptance probability.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SupportParams {
    pub k: u64,
    pub zeta: f64,
    pub p0: f64,
    pub delta: f64,
    pub alpha_exp: f64,
}

impl SupportParams {
    pub fn validate(&self) -> Result<(), TheoryError> {
        check_domain("k", self.k as f64, "k >= 1", self.k >= 1)?;
        check_domain(
            "zeta",
            self.zeta,
            "0 < zeta < 1",
            0.0 < self.zeta && self.zeta < 1.0,
        )?;
        check_domain("p0", self.p0, "0 < p0 < 1", 0.0 < self.p0 && self.p0 < 1.0)?;
        check_domain("delta", self.delta, "delta > 0", self.delta > 0.0)?;
        check_domain(
            "alpha_exp",
            self.alpha_exp,
            "0 < alpha_exp <= 1",
            0.0 < self.alpha_exp && self.alpha_exp <= 1.0,
        )?;
        Ok(())
    }
}

/// `eps = -ln(zeta) / k`: the success probability below which `k` rollouts
/// are likely to all miss.
pub fn detect_threshold(k: u64, zeta: f64) -> Result<f64, TheoryError> {
    check_domain("k", k as f64, "k >= 1", k >= 1)?;
    check_domain("zeta", zeta, "0 < zeta < 1", 0.0 < zeta && zeta < 1.0)?;
    Ok(-zeta.ln() / k as f64)
}

/// `(1 - p)^k`: probability that `k` independent rollouts all miss an
/// answer of probability `p`.
pub fn miss_probability(p: f64, k: u64) -> Result<f64, TheoryError> {
    check_domain("p", p, "0 <= p <= 1", (0.0..=1.0).contains(&p))?;
    check_domain("k", k as f64, "k >= 1", k >= 1)?;
    Ok((1.0 - p).powi(k as i32))
}

/// Successful distillation steps of log-increment `delta` needed to raise
/// `p0` to at least `eps`; zero when already there.
pub fn cycles_to_threshold(p0: f64, eps: f64, delta: f64) -> Result<u64, TheoryError> {
    check_domain("p0", p0, "0 < p0 <= 1", 0.0 < p0 && p0 <= 1.0)?;
    check_domain("eps", eps, "eps > 0", eps > 0.0)?;
    check_domain("delta", delta, "delta > 0", delta > 0.0)?;
    if p0 >= eps {
        return Ok(0);
    }
    Ok(((eps.ln() - p0.ln()) / delta).ceil() as u64)
}

/// Negative-binomial mean bound: expected conditioned attempts to collect
/// `n_cycles` accepted traces at per-attempt acceptance `alpha_exp`.
pub fn expected_acr_attempts(n_cycles: u64, alpha_exp: f64) -> Result<f64, TheoryError> {
    check_domain(
        "alpha_exp",
        alpha_exp,
        "0 < alpha_exp <= 1",
        0.0 < alpha_exp && alpha_exp <= 1.0,
    )?;
    Ok(n_cycles as f64 / alpha_exp)
}

/// Per-prompt comparison of a run against the calculator predictions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptSupportStats {
    pub uid: String,
    pub p_first: f64,
    pub p_final: f64,
    /// First snapshot step with `p >= eps`, if any.
    pub first_cross_step: Option<u64>,
    /// Distillation steps observed before the crossing (all of them when
    /// the prompt never crossed).
    pub distills_before_cross: u64,
    pub total_distills: u64,
    /// Mean observed log-increment per distillation step.
    pub mean_delta: Option<f64>,
    /// `cycles_to_threshold(p_first, eps, mean_delta)`, when computable.
    pub predicted_cycles: Option<u64>,
}

/// Waiting-time summary over conditioned-generation episodes: an episode is
/// the run of attempts for one uid up to and including its first acceptance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaitingTimeStats {
    pub episodes: usize,
    pub mean_attempts: f64,
    /// `1 / mean(alpha)` over the attempts' closed-form acceptance
    /// probabilities.
    pub predicted_mean_attempts: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportEstimate {
    pub eps: f64,
    pub per_prompt: Vec<PromptSupportStats>,
    pub waiting_times: Option<WaitingTimeStats>,
    pub median_p_final: f64,
    pub crossed_fraction: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Computes empirical support curves, waiting times, and realized
/// log-increments from a run's snapshots and events, compared against the
/// calculator predictions at threshold `eps`.
pub fn estimate_from_sim(
    snapshots: &[SnapshotRecord],
    events: &[LoopEvent],
    eps: f64,
) -> Result<SupportEstimate, TheoryError> {
    if snapshots.is_empty() {
        return Err(TheoryError::MissingData(
            "snapshots (run with snapshots enabled)",
        ));
    }
    let mut uids: Vec<&str> = snapshots.iter().map(|s| s.uid.as_str()).collect();
    uids.sort_unstable();
    uids.dedup();

    let mut per_prompt = Vec::with_capacity(uids.len());
    for uid in &uids {
        let mut curve: Vec<(u64, f64)> = snapshots
            .iter()
            .filter(|s| s.uid == *uid)
            .map(|s| (s.step, s.p_star))
            .collect();
        curve.sort_by_key(|(step, _)| *step);
        let p_first = curve.first().map(|&(_, p)| p).unwrap_or(f64::NAN);
        let p_final = curve.last().map(|&(_, p)| p).unwrap_or(f64::NAN);
        let first_cross_step = curve.iter().find(|&&(_, p)| p >= eps).map(|&(s, _)| s);

        let deltas: Vec<(u64, f64)> = events
            .iter()
            .filter(|e| e.uid == *uid)
            .filter_map(|e| match e.kind {
                LoopEventKind::Distill {
                    log_p_before,
                    log_p_after,
                } => Some((e.step, log_p_after - log_p_before)),
                _ => None,
            })
            .collect();
        let distills_before_cross = deltas
            .iter()
            .filter(|(step, _)| first_cross_step.map_or(true, |cross| *step <= cross))
            .count() as u64;
        let mean_delta = if deltas.is_empty() {
            None
        } else {
            Some(deltas.iter().map(|(_, d)| d).sum::<f64>() / deltas.len() as f64)
        };
        let predicted_cycles = mean_delta
            .filter(|d| *d > 0.0 && p_first > 0.0 && p_first < 1.0)
            .map(|d| cycles_to_threshold(p_first, eps, d))
            .transpose()?;
        per_prompt.push(PromptSupportStats {
            uid: uid.to_string(),
            p_first,
            p_final,
            first_cross_step,
            distills_before_cross,
            total_distills: deltas.len() as u64,
            mean_delta,
            predicted_cycles,
        });
    }

    // Waiting times: scan each uid's attempt stream; an episode closes at
    // its first acceptance.
    let mut episodes = Vec::new();
    let mut alphas = Vec::new();
    for uid in &uids {
        let mut pending = 0u64;
        for event in events.iter().filter(|e| e.uid == *uid) {
            if let LoopEventKind::AcrAttempt { alpha, accepted } = event.kind {
                pending += 1;
                alphas.push(alpha);
                if accepted {
                    episodes.push(pending as f64);
                    pending = 0;
                }
            }
        }
    }
    let waiting_times = if episodes.is_empty() {
        None
    } else {
        let mean_attempts = episodes.iter().sum::<f64>() / episodes.len() as f64;
        let mean_alpha = alphas.iter().sum::<f64>() / alphas.len() as f64;
        Some(WaitingTimeStats {
            episodes: episodes.len(),
            mean_attempts,
            predicted_mean_attempts: 1.0 / mean_alpha,
        })
    };

    let mut finals: Vec<f64> = per_prompt.iter().map(|p| p.p_final).collect();
    let crossed = per_prompt
        .iter()
        .filter(|p| p.first_cross_step.is_some())
        .count();
    Ok(SupportEstimate {
        eps,
        per_prompt,
        waiting_times,
        median_p_final: median(&mut finals),
        crossed_fraction: crossed as f64 / uids.len().max(1) as f64,
    })
}

/// One named pass/fail assertion from a run-vs-calculator comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Assertions for a baseline (no-distillation) run: prompts starting below
/// the threshold should stay below it.
pub fn check_grpo_run(estimate: &SupportEstimate) -> Vec<TheoryCheck> {
    let below_at_start = estimate
        .per_prompt
        .iter()
        .filter(|p| p.p_first < estimate.eps)
        .count();
    let still_below = estimate
        .per_prompt
        .iter()
        .filter(|p| p.p_first < estimate.eps && p.p_final < estimate.eps)
        .count();
    vec![TheoryCheck {
        name: "sampling-barrier".into(),
        passed: estimate.median_p_final < estimate.eps,
        detail: format!(
            "median final p = {:.6} vs eps = {:.6}; {}/{} sub-threshold prompts stayed below",
            estimate.median_p_final, estimate.eps, still_below, below_at_start
        ),
    }]
}

/// Assertions for a full self-training run: crossings happen and take no
/// more than twice the predicted number of distillation cycles at the
/// observed mean log-increment; waiting times match the closed form.
pub fn check_acr_run(estimate: &SupportEstimate) -> Vec<TheoryCheck> {
    let mut checks = Vec::new();
    checks.push(TheoryCheck {
        name: "support-seeding".into(),
        passed: estimate.crossed_fraction > 0.0,
        detail: format!(
            "{:.1}% of prompts crossed eps = {:.6}",
            estimate.crossed_fraction * 100.0,
            estimate.eps
        ),
    });

    let crossed: Vec<&PromptSupportStats> = estimate
        .per_prompt
        .iter()
        .filter(|p| p.first_cross_step.is_some() && p.predicted_cycles.is_some())
        .collect();
    if !crossed.is_empty() {
        let within = crossed
            .iter()
            .filter(|p| {
                let predicted = p.predicted_cycles.unwrap().max(1);
                p.distills_before_cross <= 2 * predicted
            })
            .count();
        // The 2x bound is a median-level expectation: acceptance gaps and
        // snapshot cadence both add slack on individual prompts.
        let fraction = within as f64 / crossed.len() as f64;
        checks.push(TheoryCheck {
            name: "cycle-count".into(),
            passed: fraction >= 0.5,
            detail: format!(
                "{within}/{} crossed prompts within 2x predicted cycles",
                crossed.len()
            ),
        });
    }

    if let Some(wt) = &estimate.waiting_times {
        let rel =
            (wt.mean_attempts - wt.predicted_mean_attempts).abs() / wt.predicted_mean_attempts;
        checks.push(TheoryCheck {
            name: "waiting-time".into(),
            passed: rel <= 0.10 || wt.episodes < 100,
            detail: format!(
                "mean attempts {:.4} vs predicted {:.4} over {} episodes (rel err {:.3})",
                wt.mean_attempts, wt.predicted_mean_attempts, wt.episodes, rel
            ),
        });
    }
    checks
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn detect_threshold_known_values() {
        let eps = detect_threshold(8, 0.05).unwrap();
        assert!((eps - 20.0f64.ln() / 8.0).abs() < 1e-12);
        assert!((eps - 0.374_46).abs() < 1e-4);
        // zeta -> 1 sends the threshold to zero.
        assert!(detect_threshold(8, 0.999_999).unwrap() < 1e-5);
        let unit = detect_threshold(1, (-1.0f64).exp()).unwrap();
        assert!((unit - 1.0).abs() < 1e-12);
    }

    #[test]
    fn detect_threshold_domain_errors() {
        assert!(detect_threshold(0, 0.5).is_err());
        assert!(detect_threshold(8, 0.0).is_err());
        assert!(detect_threshold(8, 1.0).is_err());
        assert!(detect_threshold(8, 1.5).is_err());
    }

    #[test]
    fn miss_probability_extremes() {
        assert_eq!(miss_probability(0.0, 5).unwrap(), 1.0);
        assert_eq!(miss_probability(1.0, 5).unwrap(), 0.0);
        let eps = detect_threshold(8, 0.05).unwrap();
        assert!(miss_probability(eps, 8).unwrap() <= 0.05);
    }

    #[test]
    fn eps_monotone_in_k_and_zeta() {
        let mut last = f64::INFINITY;
        for k in [1u64, 2, 4, 8, 16, 64] {
            let eps = detect_threshold(k, 0.05).unwrap();
            assert!(eps < last);
            last = eps;
        }
        // Smaller zeta (stricter confidence) raises the threshold.
        assert!(detect_threshold(8, 0.01).unwrap() > detect_threshold(8, 0.05).unwrap());
    }

    #[test]
    fn cycles_to_threshold_worked_example() {
        let eps = detect_threshold(8, 0.05).unwrap();
        let n = cycles_to_threshold(0.001, eps, 0.5).unwrap();
        // (ln eps - ln 0.001) / 0.5 = 11.85...
        assert_eq!(n, 12);
        assert_eq!(cycles_to_threshold(eps, eps, 0.5).unwrap(), 0);
        assert_eq!(cycles_to_threshold(0.9, 0.3, 0.5).unwrap(), 0);
        // Doubling delta never increases the cycle count.
        assert!(cycles_to_threshold(0.001, eps, 1.0).unwrap() <= n);
    }

    #[test]
    fn cycles_consistency_with_ideal_increments() {
        let eps = detect_threshold(8, 0.05).unwrap();
        for (p0, delta) in [(0.001, 0.5), (0.002, 0.21), (0.01, 1.0), (0.1, 0.05)] {
            let n = cycles_to_threshold(p0, eps, delta).unwrap();
            let log_p_after = p0.ln() + n as f64 * delta;
            assert!(log_p_after >= eps.ln() - 1e-12, "p0={p0} delta={delta}");
            if n > 0 {
                let log_before_last = p0.ln() + (n - 1) as f64 * delta;
                assert!(log_before_last < eps.ln());
            }
        }
    }

    #[test]
    fn expected_attempts_formula() {
        assert_eq!(expected_acr_attempts(12, 0.5).unwrap(), 24.0);
        assert_eq!(expected_acr_attempts(7, 1.0).unwrap(), 7.0);
        assert_eq!(expected_acr_attempts(0, 0.3).unwrap(), 0.0);
        assert!(expected_acr_attempts(1, 0.0).is_err());
    }

    #[test]
    fn detectability_bound_holds_for_10k_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xF00D);
        for _ in 0..10_000 {
            let k = rng.gen_range(1u64..=64);
            let zeta: f64 = rng.gen_range(0.001..0.999);
            let eps = detect_threshold(k, zeta).unwrap();
            if eps >= 1.0 {
                continue;
            }
            let p = rng.gen_range(eps..1.0);
            assert!(
                miss_probability(p, k).unwrap() <= zeta,
                "violation at p={p} k={k} zeta={zeta}"
            );
        }
    }

    proptest! {
        #[test]
        fn detectability_bound_property(
            k in 1u64..64,
            zeta in 0.001f64..0.999,
            frac in 0.0f64..1.0,
        ) {
            let eps = detect_threshold(k, zeta).unwrap();
            prop_assume!(eps < 1.0);
            let p = eps + frac * (1.0 - eps);
            prop_assert!(miss_probability(p, k).unwrap() <= zeta);
        }
    }

    #[test]
    fn estimator_requires_snapshots() {
        assert!(matches!(
            estimate_from_sim(&[], &[], 0.37),
            Err(TheoryError::MissingData(_))
        ));
    }

    #[test]
    fn estimator_summarizes_curves_and_waiting_times() {
        let snapshots = vec![
            SnapshotRecord { step: 0, uid: "a".into(), p_star: 0.01 },
            SnapshotRecord { step: 10, uid: "a".into(), p_star: 0.2 },
            SnapshotRecord { step: 20, uid: "a".into(), p_star: 0.5 },
            SnapshotRecord { step: 0, uid: "b".into(), p_star: 0.01 },
            SnapshotRecord { step: 10, uid: "b".into(), p_star: 0.015 },
            SnapshotRecord { step: 20, uid: "b".into(), p_star: 0.02 },
        ];
        let events = vec![
            LoopEvent {
                step: 5,
                uid: "a".into(),
                kind: LoopEventKind::AcrAttempt { alpha: 0.5, accepted: false },
            },
            LoopEvent {
                step: 10,
                uid: "a".into(),
                kind: LoopEventKind::AcrAttempt { alpha: 0.5, accepted: true },
            },
            LoopEvent {
                step: 10,
                uid: "a".into(),
                kind: LoopEventKind::Distill { log_p_before: -4.6, log_p_after: -2.6 },
            },
            LoopEvent {
                step: 15,
                uid: "a".into(),
                kind: LoopEventKind::Distill { log_p_before: -2.6, log_p_after: -1.0 },
            },
        ];
        let estimate = estimate_from_sim(&snapshots, &events, 0.37).unwrap();
        assert_eq!(estimate.per_prompt.len(), 2);
        let a = estimate.per_prompt.iter().find(|p| p.uid == "a").unwrap();
        assert_eq!(a.first_cross_step, Some(20));
        assert_eq!(a.total_distills, 2);
        assert!((a.mean_delta.unwrap() - 1.8).abs() < 1e-12);
        let b = estimate.per_prompt.iter().find(|p| p.uid == "b").unwrap();
        assert_eq!(b.first_cross_step, None);
        let wt = estimate.waiting_times.unwrap();
        assert_eq!(wt.episodes, 1);
        assert_eq!(wt.mean_attempts, 2.0);
        assert!((estimate.crossed_fraction - 0.5).abs() < 1e-12);
    }

    #[test]
    fn exposure_one_gives_unit_waiting_times() {
        let snapshots = vec![SnapshotRecord { step: 0, uid: "a".into(), p_star: 0.01 }];
        let events: Vec<LoopEvent> = (0..5)
            .map(|i| LoopEvent {
                step: i * 10,
                uid: "a".into(),
                kind: LoopEventKind::AcrAttempt { alpha: 1.0, accepted: true },
            })
            .collect();
        let estimate = estimate_from_sim(&snapshots, &events, 0.37).unwrap();
        let wt = estimate.waiting_times.unwrap();
        assert_eq!(wt.mean_attempts, 1.0);
        assert_eq!(wt.predicted_mean_attempts, 1.0);
    }
}
