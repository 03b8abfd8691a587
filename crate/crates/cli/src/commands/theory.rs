use std::io::Write;

use ctirl_core::theory::{
    check_acr_run, check_grpo_run, cycles_to_threshold, detect_threshold, estimate_from_sim,
    expected_acr_attempts, miss_probability,
};
use ctirl_core::training::{read_events, read_run_meta, read_snapshots, LoopMode};

use crate::{CliError, CliResult, TheoryCheckCliArgs, TheoryParamsCliArgs};

pub fn params(args: TheoryParamsCliArgs) -> CliResult {
    let eps = detect_threshold(args.k, args.zeta).map_err(|e| CliError::Input(e.to_string()))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "eps {eps:.6}  (k = {}, zeta = {})", args.k, args.zeta)?;
    if let Some(p0) = args.p0 {
        let miss = miss_probability(p0, args.k).map_err(|e| CliError::Input(e.to_string()))?;
        writeln!(stdout, "miss_probability {miss:.6}  ((1 - p0)^k at p0 = {p0})")?;
        if p0 >= eps {
            writeln!(stdout, "p0 is already above the detectability threshold")?;
        }
        if let Some(delta) = args.delta {
            let cycles =
                cycles_to_threshold(p0, eps, delta).map_err(|e| CliError::Input(e.to_string()))?;
            writeln!(stdout, "cycles_to_threshold {cycles}  (delta = {delta})")?;
            if let Some(alpha) = args.alpha_exp {
                let attempts = expected_acr_attempts(cycles, alpha)
                    .map_err(|e| CliError::Input(e.to_string()))?;
                writeln!(stdout, "expected_attempts {attempts:.2}  (alpha_exp = {alpha})")?;
            }
        }
    }
    Ok(())
}

pub fn check(args: TheoryCheckCliArgs) -> CliResult {
    let meta = read_run_meta(&args.run.join("run_meta.json"))
        .map_err(|e| CliError::Input(format!("run_meta.json: {e}")))?;
    let snapshots = read_snapshots(&args.run.join("snapshots.jsonl"))
        .map_err(|e| CliError::Input(format!("snapshots.jsonl: {e}")))?;
    let events = read_events(&args.run.join("events.jsonl"))
        .map_err(|e| CliError::Input(format!("events.jsonl: {e}")))?;

    let eps = detect_threshold(meta.rollouts_per_prompt as u64, args.zeta)
        .map_err(|e| CliError::Input(e.to_string()))?;
    let estimate =
        estimate_from_sim(&snapshots, &events, eps).map_err(|e| CliError::Input(e.to_string()))?;
    let checks = match meta.mode {
        LoopMode::Grpo => check_grpo_run(&estimate),
        LoopMode::Acr => check_acr_run(&estimate),
    };

    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "run mode {:?}; eps {:.6}; {} prompts; median final p {:.6}; crossed {:.1}%",
        meta.mode,
        eps,
        estimate.per_prompt.len(),
        estimate.median_p_final,
        estimate.crossed_fraction * 100.0
    )?;
    let mut failed = Vec::new();
    for check in &checks {
        let status = if check.passed { "PASS" } else { "FAIL" };
        writeln!(stdout, "[{status}] {}: {}", check.name, check.detail)?;
        if !check.passed {
            failed.push(check.name.clone());
        }
    }
    if !failed.is_empty() {
        return Err(CliError::CheckFailed(format!(
            "{} of {} assertions failed: {}",
            failed.len(),
            checks.len(),
            failed.join(", ")
        )));
    }
    Ok(())
}
