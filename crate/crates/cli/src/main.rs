use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use oodkit::harness::{
    self, cmd_evaluate, cmd_finetune, cmd_fit_detector, cmd_gen_synthetic, cmd_train, report, run_all, Detector,
    Experiment, ExperimentConfig, Variant, EXIT_DATA, EXIT_PARTIAL,
};
use oodkit::toy::{OodFamily, ToyConfig};

#[derive(Parser, Debug)]
#[command(name = "oodkit", version, about = "Out-of-distribution detection experiments")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cross-entropy training of the classifier.
    Train,
    /// OECC fine-tuning over the λ grid, with model selection.
    Finetune,
    /// Fit detector state on the trained networks.
    FitDetector {
        #[arg(long, value_enum, default_value = "all")]
        detector: DetectorArg,
        #[arg(long, value_enum, default_value = "all")]
        variant: VariantArg,
    },
    /// Score all test sets and write the result table.
    Evaluate,
    /// Generate synthetic validation outliers from the training set.
    GenSynthetic,
    /// Recompute the result table from persisted raw scores.
    Report,
    /// Write the synthetic toy task and its config to --out.
    GenToy {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long)]
        n_train: Option<usize>,
        /// Family of the test outliers.
        #[arg(long, value_enum, default_value = "pairs")]
        ood: OodArg,
    },
    /// train, finetune, fit-detector and evaluate in sequence.
    Run,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum DetectorArg {
    Md,
    Fcgm,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum OodArg {
    Bars,
    Center,
    Pairs,
}

impl From<OodArg> for OodFamily {
    fn from(a: OodArg) -> Self {
        match a {
            OodArg::Bars => OodFamily::Bars,
            OodArg::Center => OodFamily::Center,
            OodArg::Pairs => OodFamily::Pairs,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum VariantArg {
    Base,
    Oecc,
    All,
}

/// A failure with its process exit status.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = error
            .chain()
            .find_map(|e| e.downcast_ref::<oodkit::Error>())
            .map_or(EXIT_DATA, harness::exit_code);
        Self {
            code: code as u8,
            error,
        }
    }
}

impl From<oodkit::Error> for Failure {
    fn from(e: oodkit::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn experiment(cli: &Cli) -> anyhow::Result<Experiment> {
    let path = cli.config.as_deref().context("--config is required for this command")?;
    let config = ExperimentConfig::load(path)?;
    Ok(Experiment::new(config, cli.out.clone(), cli.seed)?)
}

fn print_table(table: &harness::ResultTable) -> Result<(), Failure> {
    print!("{}", table.render());
    if table.failed_cells() > 0 {
        return Err(Failure {
            code: EXIT_PARTIAL as u8,
            error: anyhow::anyhow!("{} of the table's cells failed", table.failed_cells()),
        });
    }
    Ok(())
}

fn fit_detectors(exp: &Experiment, detector: DetectorArg, variant: VariantArg) -> anyhow::Result<()> {
    let detectors = match detector {
        DetectorArg::Md => vec![Detector::Md],
        DetectorArg::Fcgm => vec![Detector::Fcgm],
        DetectorArg::All => vec![Detector::Md, Detector::Fcgm],
    };
    let tuned = exp.selected_dir().join("manifest.json").exists();
    let variants = match variant {
        VariantArg::Base => vec![Variant::Base],
        VariantArg::Oecc if !tuned => bail!("no fine-tuned checkpoint under {}", exp.selected_dir().display()),
        VariantArg::Oecc => vec![Variant::Oecc],
        VariantArg::All if tuned => vec![Variant::Base, Variant::Oecc],
        VariantArg::All => vec![Variant::Base],
    };
    for &d in &detectors {
        for &v in &variants {
            let dir = cmd_fit_detector(exp, d, v)?;
            info!("{} detector written to {}", v.method_name(d), dir.display());
        }
    }
    Ok(())
}

fn report_dir(cli: &Cli) -> anyhow::Result<PathBuf> {
    if let Some(out) = &cli.out {
        return Ok(out.clone());
    }
    Ok(experiment(cli)?.out)
}

fn gen_toy(out: &Path, classes: usize, n_train: Option<usize>, ood: OodFamily, seed: u64) -> anyhow::Result<()> {
    let mut toy = ToyConfig {
        classes,
        ood,
        ..ToyConfig::default()
    };
    if let Some(n) = n_train {
        toy.n_train = n;
    }
    let path = harness::write_toy_experiment(out, &toy, seed)?;
    println!("{}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.command {
        Command::Train => {
            let dir = cmd_train(&experiment(cli)?)?;
            println!("{}", dir.display());
        }
        Command::Finetune => {
            let exp = experiment(cli)?;
            let rep = cmd_finetune(&exp)?;
            let p = rep.selected_point();
            println!(
                "selected lambda1={} lambda2={} mean validation AUROC {:.4}",
                p.lambda1,
                p.lambda2,
                p.mean_auroc.unwrap_or(f64::NAN)
            );
            println!("{}", exp.selected_dir().display());
        }
        Command::FitDetector { detector, variant } => fit_detectors(&experiment(cli)?, *detector, *variant)?,
        Command::Evaluate => print_table(&cmd_evaluate(&experiment(cli)?)?)?,
        Command::GenSynthetic => {
            let rep = cmd_gen_synthetic(&experiment(cli)?)?;
            for dir in &rep.written {
                println!("{}", dir.display());
            }
            if !rep.refused.is_empty() {
                for (kind, e) in &rep.refused {
                    eprintln!("refused {}: {e}", kind.as_str());
                }
                return Err(Failure {
                    code: EXIT_DATA as u8,
                    error: anyhow::anyhow!("{} generator(s) refused", rep.refused.len()),
                });
            }
        }
        Command::Report => print_table(&report(&report_dir(cli)?)?)?,
        Command::GenToy { classes, n_train, ood } => {
            let out = cli.out.as_deref().context("gen-toy needs --out")?;
            gen_toy(out, *classes, *n_train, (*ood).into(), cli.seed.unwrap_or(0))?;
        }
        Command::Run => print_table(&run_all(&experiment(cli)?)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
