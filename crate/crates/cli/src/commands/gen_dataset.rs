use std::fs;
use std::io::Write;

use ctirl_core::task::serialize_dataset;
use ctirl_core::training::generate_dataset;

use crate::{CliError, CliResult, GenDatasetCliArgs};

pub fn run(args: GenDatasetCliArgs) -> CliResult {
    if args.count == 0 {
        return Err(CliError::Input("count must be positive".into()));
    }
    let dataset = generate_dataset(args.count, args.seed);
    fs::write(&args.output, serialize_dataset(&dataset))
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", args.output.display())))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "wrote {} instances to {}",
        dataset.len(),
        args.output.display()
    )?;
    Ok(())
}
