//! `pvdiag`: curation, corruption, report scoring, six-view aggregation,
//! evaluation and toy policy-gradient runs from one entry point.

mod commands;
mod config;
mod error;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pvdiag::corrupt::CorruptionKind;
use pvdiag::curate::QuotaPolicy;
use pvdiag::rl::Method;
use pvdiag::{DefectClass, Split};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::run::Run;

#[derive(Parser)]
#[command(name = "pvdiag", about = "PV defect inspection pipeline tools", disable_version_flag = true)]
struct Cli {
    /// Print version, report grammar version and severity table digest.
    #[arg(short = 'V', long)]
    version: bool,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = automatic).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Directory that manifest image paths resolve against. Repeatable.
    #[arg(long = "image-root", global = true)]
    image_roots: Vec<PathBuf>,
    /// Run directory for all outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Undersample, augment and split a corpus.
    Curate {
        #[arg(long, conflicts_with = "scan")]
        manifest: Option<PathBuf>,
        /// Scan `<root>/<dataset>/<modality>/<label>/*.png` instead of reading a manifest.
        #[arg(long)]
        scan: Option<PathBuf>,
        /// CSV of `source_dataset,source_label,canonical_class`.
        #[arg(long)]
        label_map: Option<PathBuf>,
        /// `class=fraction`, repeatable.
        #[arg(long = "quota", value_parser = commands::parse_quota)]
        quotas: Vec<QuotaPolicy>,
        /// Class to augment up to the plan's band, repeatable.
        #[arg(long = "augment")]
        augment: Vec<DefectClass>,
        /// Augment plan (TOML).
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        no_split: bool,
    },
    /// Apply one corruption at one severity to every record.
    Corrupt {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        kind: Option<CorruptionKind>,
        #[arg(long)]
        severity: Option<u8>,
        /// Severity table override (TOML).
        #[arg(long)]
        table: Option<PathBuf>,
        /// Only corrupt records in this split.
        #[arg(long)]
        split: Option<Split>,
        /// Print the effective severity table and exit.
        #[arg(long)]
        show_table: bool,
    },
    /// Score reports (`{"id","text","true_class"}` per line).
    Reward {
        #[arg(long)]
        reports: PathBuf,
    },
    /// Lint reports (`{"id","text"}` per line).
    ValidateReports {
        #[arg(long)]
        reports: PathBuf,
    },
    /// Fill in six-view decisions for a prediction manifest.
    Aggregate {
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run the noisy-oracle predictor over a manifest's images.
    Simulate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        accuracy: Option<f64>,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Accuracy, per-class F1, confusion and the risk-coverage curve.
    Eval {
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Second prediction manifest to tabulate against.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Also render rc_curve.svg.
        #[arg(long)]
        plot: bool,
    },
    /// Train a tabular policy on a toy environment.
    RlSim {
        #[arg(long)]
        method: Option<Method>,
        #[arg(short = 'k', long = "group-size")]
        k: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// bandit2, bandit3 or chain.
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Write the full image and four corner plus one center half-size crop.
    ExtractViews {
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Curate { .. } => "curate",
            Command::Corrupt { .. } => "corrupt",
            Command::Reward { .. } => "reward",
            Command::ValidateReports { .. } => "validate-reports",
            Command::Aggregate { .. } => "aggregate",
            Command::Simulate { .. } => "simulate",
            Command::Eval { .. } => "eval",
            Command::RlSim { .. } => "rl-sim",
            Command::ExtractViews { .. } => "extract-views",
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn read_table(path: &Path) -> CliResult<pvdiag::corrupt::SeverityTable> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config("ConfigRead", format!("{}: {e}", path.display())))?;
    Ok(pvdiag::corrupt::SeverityTable::from_toml(&text)?)
}

fn base_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut c.seed, cli.seed);
    set(&mut c.jobs, cli.jobs);
    if !cli.image_roots.is_empty() {
        c.paths.image_roots = cli.image_roots.clone();
    }
    if cli.out.is_some() {
        c.paths.out_dir = cli.out.clone();
    }
    Ok(c)
}

/// Applies subcommand flags on top of the config document.
fn apply_flags(c: &mut RunConfig, cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Curate { manifest, label_map, quotas, augment, plan, no_split, .. } => {
            set(&mut c.paths.manifest, manifest.clone().map(Some));
            set(&mut c.curate.label_map, label_map.clone().map(Some));
            if !quotas.is_empty() {
                c.curate.quotas = quotas.clone();
            }
            if !augment.is_empty() {
                c.curate.augment_classes = augment.clone();
            }
            if let Some(p) = plan {
                c.curate.augment = commands::load_plan(p)?;
            }
            if *no_split {
                c.curate.assign_splits = false;
            }
        }
        Command::Corrupt { manifest, kind, severity, table, split, .. } => {
            set(&mut c.paths.manifest, manifest.clone().map(Some));
            set(&mut c.corrupt.kind, *kind);
            set(&mut c.corrupt.severity, *severity);
            if let Some(p) = table {
                c.corrupt.table = read_table(p)?;
            }
            set(&mut c.corrupt.split, split.map(Some));
        }
        Command::Aggregate { predictions } => set(&mut c.paths.predictions, predictions.clone().map(Some)),
        Command::Simulate { manifest, accuracy, split } => {
            set(&mut c.paths.manifest, manifest.clone().map(Some));
            set(&mut c.tta.oracle_accuracy, *accuracy);
            set(&mut c.tta.split, split.map(Some));
        }
        Command::Eval { predictions, plot, .. } => {
            set(&mut c.paths.predictions, predictions.clone().map(Some));
            if *plot {
                c.eval.plot = true;
            }
        }
        Command::RlSim { method, k, steps, env, learning_rate } => {
            set(&mut c.rl.method, *method);
            set(&mut c.rl.train.k, *k);
            set(&mut c.rl.steps, *steps);
            set(&mut c.rl.env, env.clone());
            set(&mut c.rl.train.learning_rate, *learning_rate);
        }
        Command::ExtractViews { manifest, .. } => set(&mut c.paths.manifest, manifest.clone().map(Some)),
        Command::Reward { .. } | Command::ValidateReports { .. } => {}
    }
    c.curate.split.seed = c.seed;
    Ok(())
}

fn version_text(config: &RunConfig) -> String {
    format!(
        "pvdiag {}\nreport grammar version: {}\nseverity table digest: {}\n",
        env!("CARGO_PKG_VERSION"),
        pvdiag::report::GRAMMAR_VERSION,
        config.corrupt.table.digest()
    )
}

fn execute(cli: Cli) -> CliResult<Option<String>> {
    let mut config = base_config(&cli)?;
    let Some(cmd) = cli.command else {
        if cli.version {
            return Ok(Some(version_text(&config)));
        }
        return Err(CliError::config("MissingCommand", "no subcommand given; see --help"));
    };
    if cli.version {
        return Ok(Some(version_text(&config)));
    }
    apply_flags(&mut config, &cmd)?;
    config.validate()?;
    if let Command::Corrupt { show_table: true, .. } = cmd {
        return Ok(Some(config.corrupt.table.to_toml()));
    }
    if config.jobs > 0 {
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(config.jobs).build_global();
    }

    let dir = config.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("pvdiag-run"));
    let mut run = Run::create(dir, config, cmd.name())?;
    let mut stdout = None;
    match &cmd {
        Command::Curate { scan, .. } => commands::curate(&mut run, scan.as_deref())?,
        Command::Corrupt { .. } => commands::corrupt(&mut run)?,
        Command::Reward { reports } => commands::reward(&mut run, reports)?,
        Command::ValidateReports { reports } => commands::validate_reports(&mut run, reports)?,
        Command::Aggregate { .. } => commands::aggregate(&mut run)?,
        Command::Simulate { .. } => commands::simulate(&mut run)?,
        Command::Eval { compare, .. } => commands::eval(&mut run, compare.as_deref())?,
        Command::RlSim { .. } => commands::rl_sim(&mut run)?,
        Command::ExtractViews { images, .. } => stdout = Some(commands::extract_views(&mut run, images)?),
    }
    let dir = run.finish()?;
    Ok(Some(stdout.unwrap_or_else(|| format!("{}\n", serde_json::json!({ "ok": true, "run_dir": dir })))))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(out) => {
            if let Some(text) = out {
                print!("{text}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.class.exit_code() as u8)
        }
    }
}
