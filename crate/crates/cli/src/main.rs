use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use neurovis::gradcheck::suite::run_suite;
use neurovis::pipeline::{run_pipeline, run_stage, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "neurovis", version, about = "fMRI-to-image decoding pipeline on synthetic data")]
struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Computation is single-threaded, so only 1 is accepted.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Run directory (defaults to runs/<preset>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML configuration file; missing keys take desk-default values.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset.
    Synth(ConfigArgs),
    /// Phase-1 fMRI pretraining.
    Pretrain(ConfigArgs),
    /// Phase-2 cross-modal tuning (includes image auto-encoder pretraining).
    Xtune(ConfigArgs),
    /// Train the latent image auto-encoder.
    TrainLatentAe(ConfigArgs),
    /// Label-conditioned denoiser pretraining.
    PretrainLdm(ConfigArgs),
    /// fMRI-conditioned denoiser fine-tuning.
    FinetuneLdm(ConfigArgs),
    /// Generate images for the held-out fMRI samples.
    Generate(ConfigArgs),
    /// Train the judge classifier and score generated images.
    Evaluate(ConfigArgs),
    /// Run every stage, optionally resuming from a later one.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// First stage to execute; earlier stages must have run already.
        #[arg(long, default_value = "synth")]
        from: String,
    },
    /// Finite-difference check of every operation and objective.
    Gradcheck,
    /// Print the resolved configuration.
    DumpConfig(ConfigArgs),
}

fn resolve(args: &ConfigArgs, seed: Option<u64>) -> neurovis::Result<RunConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::preset("desk-default")?,
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.threads != 1 {
        return Err(neurovis::Error::config(format!(
            "--threads {}: computation is single-threaded, use --threads 1",
            cli.threads
        ))
        .into());
    }
    let run_dir = |cfg: &RunConfig| cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&cfg.preset));
    let stage = |args: &ConfigArgs, stage: Stage| -> anyhow::Result<()> {
        let cfg = resolve(args, cli.seed)?;
        let dir = run_dir(&cfg);
        let metrics = run_stage(stage, &cfg, &dir)?;
        println!("{stage}: {}", serde_json::to_string(&metrics)?);
        Ok(())
    };
    match &cli.command {
        Command::Synth(a) => stage(a, Stage::Synth),
        Command::Pretrain(a) => stage(a, Stage::Pretrain),
        Command::Xtune(a) => stage(a, Stage::Xtune),
        Command::TrainLatentAe(a) => stage(a, Stage::TrainLatentAe),
        Command::PretrainLdm(a) => stage(a, Stage::PretrainLdm),
        Command::FinetuneLdm(a) => stage(a, Stage::FinetuneLdm),
        Command::Generate(a) => stage(a, Stage::Generate),
        Command::Evaluate(a) => stage(a, Stage::Evaluate),
        Command::Run { config, from } => {
            let cfg = resolve(config, cli.seed)?;
            let from: Stage = from.parse()?;
            let dir = run_dir(&cfg);
            let summary = run_pipeline(&cfg, &dir, from)?;
            for (stage, secs) in &summary.seconds {
                println!("{stage}: {secs:.1}s {}", serde_json::to_string(&summary.metrics[stage])?);
            }
            println!(
                "{}-way top-{} success rate: {:.4} (report in {})",
                summary.report.n,
                summary.report.k,
                summary.report.mean_sr,
                dir.join("eval_report.json").display()
            );
            Ok(())
        }
        Command::Gradcheck => {
            let entries = run_suite(cli.seed.unwrap_or(0))?;
            let mut failed = 0;
            for e in &entries {
                let status = if e.passed() { "ok" } else { "FAIL" };
                failed += usize::from(!e.passed());
                println!(
                    "{status:4} {:20} max rel err {:.3e} (tol {:.0e})",
                    e.name, e.report.max_rel_err, e.report.tol
                );
            }
            if failed > 0 {
                bail!("{failed} of {} gradient checks failed", entries.len());
            }
            Ok(())
        }
        Command::DumpConfig(a) => {
            let cfg = resolve(a, cli.seed).context("resolving configuration")?;
            print!("{}", cfg.dump());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .chain()
                .find_map(|e| e.downcast_ref::<neurovis::Error>())
                .map_or(1, neurovis::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
