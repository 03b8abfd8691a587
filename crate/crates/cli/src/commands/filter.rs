use std::collections::BTreeMap;
use std::fs;
use std::io::Write;

use serde::{Deserialize, Serialize};

use ctirl_core::filter::{evaluate_trace, select_trace, FilterVerdict, LeakageRules, QualityScorer};
use ctirl_core::reward::score_completion;
use ctirl_core::task::{load_dataset, AliasTable, TaskInstance};
use ctirl_core::{fnv1a, mix_seed};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{CliError, CliResult, FilterCliArgs};

#[derive(Deserialize)]
struct TraceRecord {
    uid: String,
    response: String,
    #[serde(default)]
    verifier_score: Option<f64>,
}

#[derive(Deserialize)]
struct ExternalScoreRecord {
    id: String,
    q: f64,
}

#[derive(Serialize)]
struct VerdictRecord<'a> {
    uid: &'a str,
    trace_index: usize,
    #[serde(flatten)]
    verdict: &'a FilterVerdict,
    chosen: bool,
}

pub fn run(args: FilterCliArgs) -> CliResult {
    let dataset = load_dataset(&args.context, true)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.context.display())))?;
    let by_uid: BTreeMap<&str, &TaskInstance> =
        dataset.iter().map(|i| (i.uid.as_str(), i)).collect();
    let aliases = args
        .aliases
        .as_deref()
        .map(AliasTable::load)
        .transpose()
        .map_err(|e| CliError::Input(format!("alias table: {e}")))?;

    let rules = match &args.rules {
        Some(path) => LeakageRules::from_file(path)
            .map_err(|e| CliError::Input(format!("rule file: {e}")))?,
        None => LeakageRules::default(),
    };

    let scorer = match (&args.scorer, &args.external_scores) {
        (Some(path), _) if path.exists() => QualityScorer::load(path)
            .map_err(|e| CliError::Input(format!("scorer file: {e}")))?,
        (Some(path), _) => {
            eprintln!(
                "warning: scorer {} not found, falling back to constant-pass",
                path.display()
            );
            QualityScorer::ConstantPass
        }
        (None, Some(path)) => {
            let records: Vec<(usize, ExternalScoreRecord)> = super::read_jsonl(path)?;
            QualityScorer::ExternalScores(
                records.into_iter().map(|(_, r)| (r.id, r.q)).collect(),
            )
        }
        (None, None) => QualityScorer::ConstantPass,
    };

    let traces: Vec<(usize, TraceRecord)> = super::read_jsonl(&args.traces)?;
    let unknown: Vec<String> = traces
        .iter()
        .filter(|(_, t)| !by_uid.contains_key(t.uid.as_str()))
        .map(|(line, t)| format!("{} (line {line})", t.uid))
        .collect();
    if !unknown.is_empty() {
        return Err(CliError::Input(format!(
            "trace uids not present in the context dataset: {}",
            unknown.join(", ")
        )));
    }

    // Per-uid trace index in input order; uids are processed in input order
    // for the per-trace records, selection is per uid.
    let mut grouped: BTreeMap<&str, Vec<(usize, &TraceRecord, FilterVerdict)>> = BTreeMap::new();
    let mut index_within: BTreeMap<&str, usize> = BTreeMap::new();
    let mut verified = 0usize;
    let mut heuristic_passed = 0usize;
    let mut eligible = 0usize;
    for (_, trace) in &traces {
        let instance = by_uid[trace.uid.as_str()];
        let verifier_score = match trace.verifier_score {
            Some(s) => s,
            None => {
                let (report, _) = score_completion(
                    instance,
                    &trace.response,
                    ctirl_core::extract::ExtractionMode::Strict,
                    aliases.as_ref(),
                    None,
                )
                .map_err(|e| CliError::Input(format!("uid {}: {e}", trace.uid)))?;
                report.reward
            }
        };
        let context = match &instance.label_details {
            Some(details) => format!("{}\n{}", instance.prompt, details),
            None => instance.prompt.clone(),
        };
        let idx = index_within.entry(instance.uid.as_str()).or_insert(0);
        let trace_id = format!("{}:{}", trace.uid, *idx);
        let verdict = evaluate_trace(
            &trace.response,
            &context,
            verifier_score,
            &trace_id,
            &rules,
            &scorer,
            args.tau_q,
        );
        if verdict.verifier_score == 1.0 {
            verified += 1;
            if verdict.heuristics_pass() {
                heuristic_passed += 1;
                if verdict.eligible {
                    eligible += 1;
                }
            }
        }
        grouped
            .entry(instance.uid.as_str())
            .or_default()
            .push((*idx, trace, verdict));
        *idx += 1;
    }

    let mut chosen_count = 0usize;
    let mut out = String::from("{\"schema\":\"filter-v1\"}\n");
    for (uid, candidates) in &grouped {
        let pairs: Vec<((), FilterVerdict)> = candidates
            .iter()
            .map(|(_, _, v)| ((), v.clone()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[args.seed, fnv1a(uid)]));
        let chosen = select_trace(&pairs, &mut rng);
        if chosen.is_some() {
            chosen_count += 1;
        }
        for (pos, (trace_index, _, verdict)) in candidates.iter().enumerate() {
            let record = VerdictRecord {
                uid,
                trace_index: *trace_index,
                verdict,
                chosen: chosen == Some(pos),
            };
            out.push_str(&serde_json::to_string(&record).expect("record serialization"));
            out.push('\n');
        }
    }
    fs::write(&args.output, out)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", args.output.display())))?;

    let frac = |num: usize, den: usize| {
        if den == 0 {
            "n/a".to_string()
        } else {
            format!("{:.6}", num as f64 / den as f64)
        }
    };
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "filtered {} traces over {} uids", traces.len(), grouped.len())?;
    writeln!(stdout, "verifier_correct {verified}")?;
    writeln!(stdout, "heuristic_pass_fraction {}", frac(heuristic_passed, verified))?;
    writeln!(stdout, "ml_pass_fraction {}", frac(eligible, heuristic_passed))?;
    writeln!(stdout, "selection_fraction {}", frac(chosen_count, grouped.len()))?;
    Ok(())
}
