use clap::{Args, Parser, Subcommand};
use passport_core::experiment::{self, AttackKind, ExperimentConfig};
use passport_core::verification::Verdict;
use passport_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_NOT_OWNED: u8 = 3;

/// Train, verify and attack passport-protected networks.
#[derive(Parser)]
#[command(name = "passport", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for artifacts written by this command.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Results store root.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Keep records free of wall-clock measurements.
    #[arg(long)]
    deterministic: bool,
    /// Validate the configuration and inputs without running.
    #[arg(long)]
    dry_run: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(r) = &self.results {
            cfg.results_dir = r.clone();
        }
        cfg.deterministic |= self.deterministic;
        cfg.dry_run |= self.dry_run;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a protected (or baseline) model.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Check an ownership claim: claimed passports plus signature.
    Verify {
        #[arg(long)]
        model: PathBuf,
        /// Passport file holding the claimed passports and signature.
        #[arg(long)]
        passports: PathBuf,
        /// Trigger set for V3 models; defaults to the one next to the model.
        #[arg(long)]
        trigger: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run an ambiguity or removal attack.
    Attack {
        /// forge-feature, forge-trigger, random-passport, reverse-passport,
        /// insider, flip-signs, finetune or prune.
        kind: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        passports: Option<PathBuf>,
        /// Genuine watermark or trigger key, for comparisons.
        #[arg(long)]
        key: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Render tables and plots from a results store.
    Report {
        #[arg(long, default_value = "results")]
        results: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Fidelity of random passports against a trained model.
    Probe {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<u8, Error> {
    let print = |v: serde_json::Value| println!("{}", serde_json::to_string_pretty(&v).expect("json"));
    match cli.command {
        Command::Train { common } => {
            let rec = experiment::cmd_train(&common.config()?)?;
            print(experiment::summary(&rec));
        }
        Command::Verify { model, passports, trigger, common } => {
            let (report, _) = experiment::cmd_verify(&common.config()?, &model, &passports, trigger.as_deref())?;
            print(serde_json::to_value(&report)?);
            if report.verdict == Verdict::NotOwned {
                return Ok(EXIT_NOT_OWNED);
            }
        }
        Command::Attack { kind, model, passports, key, common } => {
            let kind: AttackKind = kind.parse()?;
            let rec = experiment::cmd_attack(&common.config()?, kind, &model, passports.as_deref(), key.as_deref())?;
            print(experiment::summary(&rec));
        }
        Command::Report { results, out } => {
            let report = experiment::cmd_report(&results, &out)?;
            println!("wrote {} with {} plot(s)", out.join("report.md").display(), report.plots.len());
        }
        Command::Probe { model, common } => {
            let rec = experiment::cmd_probe(&common.config()?, &model)?;
            print(experiment::summary(&rec));
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            })
        }
    }
}
