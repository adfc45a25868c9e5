//! `debias` — run the bias-expert pipeline on synthetic spurious-correlation
//! data: single runs, ablation suites, expert-budget sweeps, and dataset
//! dumps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use debias_core::datagen::dump_csv;
use debias_core::evalkit::{aggregate, mean_csv_row, RunReport, CSV_HEADER};
use debias_core::pipeline::{load_bundle, preset, run_seeds, PipelineArm, RunConfig};
use debias_core::training::TrajectoryLog;
use debias_core::{Error, Result};

#[derive(Parser)]
#[command(name = "debias", version, about = "Bias-expert debiasing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline over one or more seeds and write reports.
    Run(CommonArgs),
    /// Run the four-arm ablation suite (full / no-amp / no-OvR / neither).
    Ablate(CommonArgs),
    /// Re-run the pipeline for each expert step budget T.
    #[command(name = "sweep-t")]
    SweepT(SweepArgs),
    /// Generate the synthetic dataset and write it as CSV.
    GenData(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Named preset: default | mnli-like | fever-like | qqp-like.
    #[arg(long)]
    preset: Option<String>,
    /// JSON config file; fields override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed (flags override the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds (seed, seed+1, ...).
    #[arg(long)]
    seeds: Option<usize>,
    /// Amplification exponent for expert training.
    #[arg(long)]
    alpha: Option<f64>,
    /// Expert merge rule: softmax | softplus.
    #[arg(long)]
    merge: Option<String>,
    /// Class-imbalance strategy: reweight | oversample | undersample | none.
    #[arg(long)]
    balance: Option<String>,
    /// Recompute confidences from a co-trained auxiliary each epoch.
    #[arg(long)]
    dynamic_q: bool,
    /// Epochs per stage.
    #[arg(long)]
    epochs: Option<usize>,
    /// Expert-stage step budget T (overrides --epochs for that stage).
    #[arg(long)]
    max_steps: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Expert step budgets, e.g. --t 100,1000,2000 (positive, increasing).
    #[arg(long, value_delimiter = ',', required = true)]
    t: Vec<u64>,
}

impl CommonArgs {
    /// Precedence: flags > config file > preset > defaults.
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.preset {
            Some(name) => preset(name)?,
            None => RunConfig::default(),
        };
        let mut value = serde_json::to_value(&base)?;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)?;
            let overlay: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config file: {e}")))?;
            merge_json(&mut value, overlay);
        }
        let mut config: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;

        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(seeds) = self.seeds {
            config.n_seeds = seeds;
        }
        if let Some(alpha) = self.alpha {
            config.alpha = alpha;
        }
        if let Some(merge) = &self.merge {
            config.merge_rule = merge.parse()?;
        }
        if let Some(balance) = &self.balance {
            config.balance = balance.parse()?;
        }
        if self.dynamic_q {
            config.dynamic_q = true;
        }
        if let Some(epochs) = self.epochs {
            config.epochs = epochs;
        }
        if let Some(t) = self.max_steps {
            config.expert_max_steps = Some(t);
        }
        if let Some(out) = &self.out {
            config.out_dir = out.to_string_lossy().into_owned();
        }
        config.validate()?;
        Ok(config)
    }
}

/// Recursively merges `overlay` into `base`; objects merge per key, anything
/// else replaces.
fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn write_report(dir: &Path, report: &RunReport, label: &str) -> Result<()> {
    fs::write(
        dir.join(format!("report_{label}.json")),
        report.to_json()? + "\n",
    )?;
    Ok(())
}

fn write_trajectory(dir: &Path, log: &TrajectoryLog, seed: u64) -> Result<()> {
    fs::write(
        dir.join(format!("trajectory_{seed}.csv")),
        RunReport::trajectory_csv(log),
    )?;
    Ok(())
}

fn cmd_run(config: &RunConfig) -> Result<()> {
    let dir = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&dir)?;
    let bundle = load_bundle(config)?;
    let reports = run_seeds(config, &bundle, PipelineArm::Full)?;

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for report in &reports {
        write_report(&dir, report, &report.seed.to_string())?;
        // The trajectory CSV tracks the auxiliary model: the per-epoch
        // group-confidence story the experts build on.
        if let Some(aux) = &report.trajectories.auxiliary {
            write_trajectory(&dir, aux, report.seed)?;
        }
        csv.push_str(&report.csv_row());
        csv.push('\n');
    }
    csv.push_str(&mean_csv_row(&reports)?);
    csv.push('\n');
    fs::write(dir.join("runs.csv"), csv)?;
    fs::write(
        dir.join("aggregate.json"),
        serde_json::to_string_pretty(&aggregate(&reports)?)? + "\n",
    )?;

    let agg = aggregate(&reports)?;
    let show = |k: &str| {
        agg.metrics
            .get(k)
            .map(|m| format!("{:.2} +- {:.2}", m.mean, m.std))
            .unwrap_or_else(|| "n/a".to_string())
    };
    println!(
        "run: {} seed(s), acc_id {} | acc_ood {} | gap {}",
        reports.len(),
        show("acc_id"),
        show("acc_ood"),
        show("gap"),
    );
    println!("reports written to {}", dir.display());
    Ok(())
}

fn cmd_ablate(config: &RunConfig) -> Result<()> {
    let dir = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&dir)?;
    let bundle = load_bundle(config)?;

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut aggregates = Vec::new();
    for arm in PipelineArm::ABLATION {
        let reports = run_seeds(config, &bundle, arm)?;
        for report in &reports {
            write_report(&dir, report, &format!("{}_{}", arm.tag(), report.seed))?;
            csv.push_str(&report.csv_row());
            csv.push('\n');
        }
        aggregates.push(aggregate(&reports)?);
    }
    fs::write(dir.join("ablation.csv"), csv)?;
    fs::write(
        dir.join("ablation_aggregate.json"),
        serde_json::to_string_pretty(&aggregates)? + "\n",
    )?;

    for agg in &aggregates {
        let ood = agg
            .metrics
            .get("acc_ood")
            .map(|m| format!("{:.2} +- {:.2}", m.mean, m.std))
            .unwrap_or_else(|| "n/a".to_string());
        println!("{:<8} acc_ood {}", agg.arm, ood);
    }
    println!("ablation files written to {}", dir.display());
    Ok(())
}

fn cmd_sweep_t(config: &RunConfig, ts: &[u64]) -> Result<()> {
    if ts.is_empty() {
        return Err(Error::Config("sweep needs at least one T".to_string()));
    }
    if ts.iter().any(|&t| t == 0) {
        return Err(Error::Config("T values must be positive".to_string()));
    }
    if ts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("T values must be increasing".to_string()));
    }

    let dir = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&dir)?;
    let bundle = load_bundle(config)?;

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for &t in ts {
        let sub = dir.join(format!("t{t}"));
        fs::create_dir_all(&sub)?;
        let t_config = RunConfig {
            expert_max_steps: Some(t),
            ..config.clone()
        };
        let reports = run_seeds(&t_config, &bundle, PipelineArm::Full)?;
        for report in &reports {
            write_report(&sub, report, &report.seed.to_string())?;
            csv.push_str(&report.csv_row());
            csv.push('\n');
        }
        fs::write(
            sub.join("aggregate.json"),
            serde_json::to_string_pretty(&aggregate(&reports)?)? + "\n",
        )?;
        let agg = aggregate(&reports)?;
        let ood = agg
            .metrics
            .get("acc_ood")
            .map(|m| format!("{:.2}", m.mean))
            .unwrap_or_else(|| "n/a".to_string());
        println!("T = {t:<6} mean acc_ood {ood}");
    }
    fs::write(dir.join("sweep.csv"), csv)?;
    println!("sweep files written to {}", dir.display());
    Ok(())
}

fn cmd_gen_data(config: &RunConfig) -> Result<()> {
    let dir = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&dir)?;
    let bundle = load_bundle(config)?;
    for (name, ds) in [
        ("dataset.csv", &bundle.train),
        ("id_test.csv", &bundle.id_test),
        ("ood_test.csv", &bundle.ood_test),
    ] {
        let mut buf = Vec::new();
        dump_csv(ds, &mut buf)?;
        fs::write(dir.join(name), buf)?;
    }
    println!(
        "wrote {} train / {} id / {} ood examples to {}",
        bundle.train.len(),
        bundle.id_test.len(),
        bundle.ood_test.len(),
        dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    let outcome = match &cli.command {
        Command::Run(args) => args.resolve().and_then(|c| cmd_run(&c)),
        Command::Ablate(args) => args.resolve().and_then(|c| cmd_ablate(&c)),
        Command::SweepT(args) => args
            .common
            .resolve()
            .and_then(|c| cmd_sweep_t(&c, &args.t)),
        Command::GenData(args) => args.resolve().and_then(|c| cmd_gen_data(&c)),
    };

    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
