pub mod filter;
pub mod gen_dataset;
pub mod score;
pub mod simulate;
pub mod theory;
pub mod train_scorer;

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::CliError;

/// Reads a headerless record file, collecting every malformed line into one
/// input error with line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))?;
    let mut records = Vec::new();
    let mut bad_lines = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CliError::Input(format!("read error at line {line_no}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(record) => records.push((line_no, record)),
            Err(e) => bad_lines.push(format!("line {line_no}: {e}")),
        }
    }
    if !bad_lines.is_empty() {
        return Err(CliError::Input(format!(
            "malformed records in {}:\n  {}",
            path.display(),
            bad_lines.join("\n  ")
        )));
    }
    Ok(records)
}
