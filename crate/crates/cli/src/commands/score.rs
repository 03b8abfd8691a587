use std::collections::BTreeMap;
use std::fs;
use std::io::Write;

use serde::{Deserialize, Serialize};

use ctirl_core::extract::ExtractedAnswer;
use ctirl_core::reward::{score_completion, Evidence, RewardReport};
use ctirl_core::task::{load_dataset, AliasTable, Catalog, TaskInstance, TaskKind};

use super::read_jsonl;
use crate::{CliError, CliResult, ScoreCliArgs};

#[derive(Deserialize)]
struct RolloutRecord {
    uid: String,
    completion: String,
}

#[derive(Serialize)]
struct ScoreRecord<'a> {
    uid: &'a str,
    #[serde(flatten)]
    report: &'a RewardReport,
    extracted: &'a Option<ExtractedAnswer>,
}

fn truncate_tokens(text: &str, max_tokens: usize) -> String {
    if max_tokens == 0 || text.split_whitespace().count() <= max_tokens {
        return text.to_string();
    }
    text.split_whitespace()
        .take(max_tokens)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn run(args: ScoreCliArgs) -> CliResult {
    let dataset = load_dataset(&args.dataset, true)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.dataset.display())))?;
    let by_uid: BTreeMap<&str, &TaskInstance> =
        dataset.iter().map(|i| (i.uid.as_str(), i)).collect();
    let aliases = args
        .aliases
        .as_deref()
        .map(AliasTable::load)
        .transpose()
        .map_err(|e| CliError::Input(format!("alias table: {e}")))?;
    let catalog = args
        .catalog_dir
        .as_deref()
        .map(Catalog::load_dir)
        .transpose()
        .map_err(|e| CliError::Input(format!("catalog: {e}")))?;

    let rollouts: Vec<(usize, RolloutRecord)> = read_jsonl(&args.rollouts)?;
    let unknown: Vec<String> = rollouts
        .iter()
        .filter(|(_, r)| !by_uid.contains_key(r.uid.as_str()))
        .map(|(line, r)| format!("{} (line {line})", r.uid))
        .collect();
    if !unknown.is_empty() {
        return Err(CliError::Input(format!(
            "rollout uids not present in the dataset: {}",
            unknown.join(", ")
        )));
    }

    let mut out = String::from("{\"schema\":\"score-v1\"}\n");
    let mut reward_sum = 0.0;
    let mut parse_failures = 0usize;
    let mut best_by_uid: BTreeMap<&str, f64> = BTreeMap::new();
    let mut vsp_pairs: Vec<(f64, f64)> = Vec::new();
    for (_, rollout) in &rollouts {
        let instance = by_uid[rollout.uid.as_str()];
        let completion = truncate_tokens(&rollout.completion, args.max_response_tokens);
        let (report, extracted) = score_completion(
            instance,
            &completion,
            args.mode.into(),
            aliases.as_ref(),
            catalog.as_ref(),
        )
        .map_err(|e| CliError::Input(format!("uid {}: {e}", rollout.uid)))?;
        reward_sum += report.reward;
        if report.evidence == Evidence::ParseFailure {
            parse_failures += 1;
        }
        if let Evidence::CvssDistance {
            pred_score,
            gold_score,
        } = report.evidence
        {
            vsp_pairs.push((pred_score, gold_score));
        }
        let best = best_by_uid.entry(by_uid[rollout.uid.as_str()].uid.as_str()).or_insert(0.0);
        *best = best.max(report.reward);
        let record = ScoreRecord {
            uid: &rollout.uid,
            report: &report,
            extracted: &extracted,
        };
        out.push_str(&serde_json::to_string(&record).expect("record serialization"));
        out.push('\n');
    }
    fs::write(&args.output, out)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", args.output.display())))?;

    let n = rollouts.len();
    let zero_solve = if best_by_uid.is_empty() {
        0.0
    } else {
        best_by_uid.values().filter(|&&b| b == 0.0).count() as f64 / best_by_uid.len() as f64
    };
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "scored {n} rollouts over {} uids", best_by_uid.len())?;
    if n > 0 {
        writeln!(stdout, "mean_reward {:.6}", reward_sum / n as f64)?;
        writeln!(stdout, "zero_solve_fraction {zero_solve:.6}")?;
        writeln!(stdout, "parse_failures {parse_failures}")?;
    }
    if !vsp_pairs.is_empty() {
        let scores: Vec<(f64, f64)> = vsp_pairs;
        let vsp = ctirl_core::reward::vsp_eval_score(&scores)
            .expect("non-empty pairs");
        writeln!(stdout, "vsp_score {vsp:.6} (over {} parsed vectors)", scores.len())?;
    } else if dataset.iter().any(|i| i.kind == TaskKind::CvssVector) {
        writeln!(stdout, "vsp_score n/a (no parseable vector predictions)")?;
    }
    Ok(())
}
