use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use ctirl_core::filter::QualityScorer;
use ctirl_core::policy::ToyPolicy;
use ctirl_core::task::{load_dataset, AliasTable};
use ctirl_core::training::{
    build_policy, run_loop, write_run, LoopConfig, LoopMode, PolicyInit,
};

use crate::{CliError, CliResult, SimulateCliArgs};

/// Run configuration: dataset/output paths, the loop section, and either a
/// synthetic policy init or a snapshot to resume from. Unknown keys are
/// rejected.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimConfig {
    dataset: PathBuf,
    out_dir: PathBuf,
    #[serde(default)]
    aliases: Option<PathBuf>,
    /// Resume from a policy snapshot instead of initializing one.
    #[serde(default)]
    init_policy: Option<PathBuf>,
    /// Trained quality-scorer weights; constant-pass when absent.
    #[serde(default)]
    scorer: Option<PathBuf>,
    #[serde(rename = "loop", default)]
    loop_config: LoopConfig,
    #[serde(default)]
    policy: PolicyInit,
}

/// Resolves a config path, falling back to `$CTIRL_CONFIG_DIR/<path>` for
/// relative paths that do not exist as given.
fn resolve_config_path(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("CTIRL_CONFIG_DIR") {
        Some(dir) => PathBuf::from(dir).join(path),
        None => path.to_path_buf(),
    }
}

pub fn run(args: SimulateCliArgs) -> CliResult {
    let config_path = resolve_config_path(&args.config);
    let raw = fs::read_to_string(&config_path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", config_path.display())))?;
    let mut sim: SimConfig = toml::from_str(&raw)
        .map_err(|e| CliError::Input(format!("{}: {e}", config_path.display())))?;

    // Explicit flags win over the config file.
    if args.grpo_only {
        sim.loop_config.mode = LoopMode::Grpo;
    }
    if let Some(seed) = args.seed {
        sim.loop_config.seed = seed;
    }
    if let Some(n) = args.rollouts {
        sim.loop_config.rollouts_per_prompt = n;
    }
    if let Some(every) = args.snapshot_every {
        sim.loop_config.snapshot_every = if every == 0 { None } else { Some(every) };
    }
    if let Some(out) = args.out {
        sim.out_dir = out;
    }
    sim.loop_config
        .validate()
        .map_err(|e| CliError::Input(e.to_string()))?;

    let base = config_path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &Path| -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };

    let dataset = load_dataset(&resolve(&sim.dataset), true)
        .map_err(|e| CliError::Input(format!("dataset: {e}")))?;
    if dataset.is_empty() {
        return Err(CliError::Input("dataset is empty".into()));
    }
    let aliases = sim
        .aliases
        .as_deref()
        .map(|p| AliasTable::load(&resolve(p)))
        .transpose()
        .map_err(|e| CliError::Input(format!("alias table: {e}")))?;
    let policy = match &sim.init_policy {
        Some(path) => ToyPolicy::load(&resolve(path))
            .map_err(|e| CliError::Input(format!("init policy: {e}")))?,
        None => build_policy(&dataset, &sim.policy, sim.loop_config.seed)
            .map_err(|e| CliError::Input(e.to_string()))?,
    };
    let scorer = match &sim.scorer {
        Some(path) => QualityScorer::load(&resolve(path))
            .map_err(|e| CliError::Input(format!("scorer: {e}")))?,
        None => QualityScorer::ConstantPass,
    };

    let result = run_loop(&dataset, policy, &sim.loop_config, aliases.as_ref(), &scorer)
        .map_err(|e| CliError::Input(e.to_string()))?;
    let out_dir = resolve(&sim.out_dir);
    write_run(&out_dir, &result, &sim.loop_config)
        .map_err(|e| CliError::Internal(anyhow::anyhow!("writing run: {e}")))?;

    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "completed {} steps", result.metrics.len())?;
    if let Some(last) = result.metrics.last() {
        writeln!(stdout, "final_zero_solve_fraction {:.6}", last.zero_solve_fraction)?;
        writeln!(stdout, "final_mean_reward {:.6}", last.mean_reward)?;
        writeln!(stdout, "final_mean_entropy {:.6}", last.mean_entropy)?;
    }
    writeln!(stdout, "outputs in {}", out_dir.display())?;
    Ok(())
}
