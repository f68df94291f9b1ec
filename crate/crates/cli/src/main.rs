//! Command-line front end for the attack/defense testbed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use advasv::config::ExperimentConfig;
use advasv::harness::{
    cmd_attack, cmd_evaluate, cmd_gen_data, cmd_selfcheck, cmd_train, ArtifactPaths, Experiment,
    Threat,
};
use advasv::Error;

#[derive(Parser)]
#[command(
    name = "advasv",
    about = "Adversarial attack and purification testbed for a toy speaker verifier",
    version
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Config file (key = value lines); defaults apply when omitted
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed, overriding the config file
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory, overriding the config file
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the train/eval corpora and the trial list
    GenData,
    /// Train the verifier and both purifier replicas
    Train,
    /// Craft adversarial test utterances for every trial
    Attack {
        /// Attacker knowledge: bare verifier, or verifier behind a substitute purifier
        #[arg(long, value_parser = parse_threat)]
        threat: Threat,
    },
    /// Score stored artifacts and write <experiment>.csv
    Evaluate {
        /// Which condition table to produce
        #[arg(long, value_parser = parse_experiment)]
        experiment: Experiment,
    },
    /// Run the internal consistency checks
    Selfcheck,
}

fn parse_threat(s: &str) -> Result<Threat, String> {
    Threat::parse(s).map_err(|e| e.to_string())
}

fn parse_experiment(s: &str) -> Result<Experiment, String> {
    Experiment::parse(s).map_err(|e| e.to_string())
}

fn load_config(global: &GlobalArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(&cli.global)?;
            let s = cmd_gen_data(&cfg)?;
            println!(
                "wrote {} train + {} eval utterances and {} trials ({} target / {} nontarget) to {}",
                s.train_utterances,
                s.eval_utterances,
                s.target_trials + s.nontarget_trials,
                s.target_trials,
                s.nontarget_trials,
                cfg.out_dir.display()
            );
            println!(
                "pooled standardization: mean {:.6}, std {:.6}",
                s.standardized.0, s.standardized.1
            );
        }
        Command::Train => {
            let cfg = load_config(&cli.global)?;
            let s = cmd_train(&cfg)?;
            let last = s.asv_epoch_losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "verifier: {} epochs, loss {:.4} -> {:.4}",
                s.asv_epoch_losses.len(),
                s.asv_epoch_losses.first().copied().unwrap_or(f64::NAN),
                last
            );
            println!(
                "purifier recon0: loss {:.4} -> {:.4}",
                s.recon0.initial_loss, s.recon0.final_loss
            );
            println!(
                "purifier recon1: loss {:.4} -> {:.4}",
                s.recon1.initial_loss, s.recon1.final_loss
            );
        }
        Command::Attack { threat } => {
            let cfg = load_config(&cli.global)?;
            let s = cmd_attack(&cfg, *threat)?;
            println!(
                "attacked {} trials under the {} threat model (max |delta|_inf {:.4}); wrote {}",
                s.n_trials,
                s.threat.name(),
                s.max_linf,
                s.out_path.display()
            );
        }
        Command::Evaluate { experiment } => {
            let cfg = load_config(&cli.global)?;
            let rows = cmd_evaluate(&cfg, *experiment)?;
            let width = rows
                .iter()
                .map(|r| r.condition.len())
                .max()
                .unwrap_or(9)
                .max("condition".len());
            println!("{:<width$}  {:>7}  {:>8}", "condition", "eer%", "min_dcf");
            for r in &rows {
                println!(
                    "{:<width$}  {:>7.2}  {:>8.3}",
                    r.condition, r.eer_percent, r.min_dcf
                );
            }
            println!(
                "full precision in {}",
                ArtifactPaths::new(&cfg.out_dir).report(*experiment).display()
            );
        }
        Command::Selfcheck => {
            let report = cmd_selfcheck()?;
            for c in &report.checks {
                let mark = if c.passed { "PASS" } else { "FAIL" };
                println!("{mark} {} — {}", c.name, c.detail);
            }
            println!("selfcheck finished in {:.2?}", report.elapsed);
            if !report.passed() {
                eprintln!("error: selfcheck found broken invariants");
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version land here.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
