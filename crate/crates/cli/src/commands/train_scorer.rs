use std::io::Write;

use serde::Deserialize;

use ctirl_core::filter::{train_linear_scorer, ScorerTrainConfig};

use crate::{CliError, CliResult, TrainScorerCliArgs};

#[derive(Deserialize)]
struct LabeledRecord {
    text: String,
    label: String,
}

pub fn run(args: TrainScorerCliArgs) -> CliResult {
    let records: Vec<(usize, LabeledRecord)> = super::read_jsonl(&args.labeled)?;
    let mut labeled = Vec::with_capacity(records.len());
    for (line, record) in records {
        let good = match record.label.to_ascii_uppercase().as_str() {
            "GOOD" => true,
            "BAD" => false,
            other => {
                return Err(CliError::Input(format!(
                    "line {line}: label must be GOOD or BAD, got {other:?}"
                )))
            }
        };
        labeled.push((record.text, good));
    }
    let config = ScorerTrainConfig {
        dim: args.dim,
        epochs: args.epochs,
        lr: args.lr,
        holdout_fraction: args.holdout,
        seed: args.seed,
    };
    let (scorer, accuracy) =
        train_linear_scorer(&labeled, &config).map_err(|e| CliError::Input(e.to_string()))?;
    scorer
        .save(&args.output)
        .map_err(|e| CliError::Input(format!("cannot write scorer: {e}")))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "trained on {} examples", labeled.len())?;
    writeln!(stdout, "holdout_accuracy {accuracy:.4}")?;
    writeln!(stdout, "weights written to {}", args.output.display())?;
    Ok(())
}
