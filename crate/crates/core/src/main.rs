use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use tunechat::eval::MetricsReport;
use tunechat::pipeline::artifacts::{read_json, write_json};
use tunechat::pipeline::{Pipeline, PipelineConfig, Stage};
use tunechat::policy::{load_checkpoint, save_checkpoint};
use tunechat::uq2i::Split;
use tunechat::{Error, Result};

/// Train and evaluate a conversational music recommender over a synthetic
/// music world.
#[derive(Parser)]
#[command(name = "tunechat", version)]
struct Cli {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Skip stages whose recorded artifacts are still current.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, ValueEnum)]
enum Suite {
    Offline,
    Probes,
    Scaling,
}

#[derive(Copy, Clone, ValueEnum)]
enum SplitArg {
    Sft,
    Rl,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the world, the user split and the listening trajectories.
    Worldgen,
    /// Build the three pre-training corpora.
    Corpus,
    /// Multi-stage pre-training.
    Pretrain,
    /// Train the reward model and synthesize instruction data. With
    /// `--split` and `--n`, also write `n` samples of that split to a
    /// separate file, reusing current stage outputs.
    Uq2i {
        #[arg(long, value_enum, requires = "n")]
        split: Option<SplitArg>,
        #[arg(long, requires = "split")]
        n: Option<usize>,
    },
    /// Supervised instruction tuning.
    Sft,
    /// GRPO alignment. `--policy` and `--ref` default to the SFT checkpoint.
    Rl {
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or run the eval stage on `rl.ckpt`.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "offline")]
        suite: Suite,
    },
    /// Summarize the report and every ablation table into `report.md`.
    Report,
    /// Render SVG figures for the tables present.
    Plots,
    /// Probe metrics per pre-training stage and for the mixed schedule.
    #[command(name = "ablate-pretrain")]
    AblatePretrain,
    /// Held-out perplexity as user-context components are added.
    #[command(name = "ablate-context")]
    AblateContext,
    /// GRPO with each reward component removed.
    #[command(name = "ablate-rewards")]
    AblateRewards,
    /// Offline metrics of SFT only, pretrain+SFT and the full pipeline.
    #[command(name = "ablate-training-stage")]
    AblateTrainingStage,
    /// Every stage from worldgen to eval.
    RunAll,
    /// Print the effective config as TOML.
    ShowConfig,
}

fn pipeline(cli: &Cli) -> Result<Pipeline> {
    let (mut config, text) = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
            (PipelineConfig::from_toml(&text)?, Some(text))
        }
        None => (PipelineConfig::default(), None),
    };
    let mut text = text;
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
        text = None;
    }
    Pipeline::new(config, text)
}

fn stage(p: &Pipeline, s: Stage, resume: bool) -> Result<()> {
    p.run(&[s], resume)?;
    println!("{} done -> {}", s.name(), p.out.display());
    Ok(())
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let p = pipeline(cli)?;
    match &cli.command {
        Command::Worldgen => stage(&p, Stage::Worldgen, cli.resume),
        Command::Corpus => stage(&p, Stage::Corpus, cli.resume),
        Command::Pretrain => stage(&p, Stage::Pretrain, cli.resume),
        Command::Uq2i {
            split: Some(split),
            n: Some(n),
        } => {
            p.run(&[Stage::Uq2i], true)?;
            let split = match split {
                SplitArg::Sft => Split::Sft,
                SplitArg::Rl => Split::Rl,
                SplitArg::Eval => Split::Eval,
            };
            println!("{}", p.path(&p.synthesize_split(split, *n)?).display());
            Ok(())
        }
        Command::Uq2i { .. } => stage(&p, Stage::Uq2i, cli.resume),
        Command::Sft => stage(&p, Stage::Sft, cli.resume),
        Command::Rl {
            reference: None,
            policy: None,
        } => stage(&p, Stage::Rl, cli.resume),
        Command::Rl { reference, policy } => rl_from(&p, reference.as_deref(), policy.as_deref()),
        Command::Eval {
            ckpt: None,
            suite: Suite::Offline,
        } => {
            stage(&p, Stage::Eval, cli.resume)?;
            print_json(&read_json::<MetricsReport>(&p.path("report.json"))?)
        }
        Command::Eval {
            ckpt,
            suite: Suite::Offline,
        } => {
            let started = Instant::now();
            let ckpt = absolute(ckpt.as_deref().expect("matched above"), Stage::Sft)?;
            let base = p.load_base()?;
            let (report, _) = p.evaluate(&load_checkpoint(Path::new(&ckpt))?, &base)?;
            write_json(&p.path("eval_offline.json"), &report)?;
            p.record(
                "eval-offline",
                &eval_inputs(&ckpt),
                &["eval_offline.json".into()],
                started,
            )?;
            print_json(&report)
        }
        Command::Eval {
            ckpt,
            suite: Suite::Probes,
        } => {
            let started = Instant::now();
            let path = absolute(
                &ckpt.clone().unwrap_or_else(|| p.path("pretrain.ckpt")),
                Stage::Pretrain,
            )?;
            let rows = p.probe_report(&load_checkpoint(Path::new(&path))?)?;
            write_json(&p.path("eval_probes.json"), &rows)?;
            p.record(
                "eval-probes",
                &eval_inputs(&path),
                &["eval_probes.json".into()],
                started,
            )?;
            print_json(&rows)
        }
        Command::Eval {
            suite: Suite::Scaling, ..
        } => {
            let rows = p.scaling_sweep(&p.config.eval.scaling_budgets)?;
            print_json(&rows)
        }
        Command::Report => {
            let text = p.report()?;
            print!("{text}");
            Ok(())
        }
        Command::Plots => {
            for f in p.plots()? {
                println!("{}", p.path(&f).display());
            }
            Ok(())
        }
        Command::AblatePretrain => print_json(&p.ablate_pretrain()?),
        Command::AblateContext => print_json(&p.ablate_context()?),
        Command::AblateRewards => print_json(&p.ablate_rewards()?),
        Command::AblateTrainingStage => print_json(&p.ablate_training_stage()?),
        Command::RunAll => {
            let m = p.run(&Stage::ALL, cli.resume)?;
            print_json(&m)
        }
        Command::ShowConfig => {
            print!("{}", p.config.to_toml());
            Ok(())
        }
    }
}

/// Absolute form of a user-supplied path, so manifest keys are unambiguous.
fn absolute(path: &Path, producer: Stage) -> Result<String> {
    let abs = std::fs::canonicalize(path).map_err(|_| Error::MissingArtifact {
        stage: producer.name().into(),
        path: path.to_path_buf(),
    })?;
    Ok(abs.to_string_lossy().into_owned())
}

fn eval_inputs(ckpt: &str) -> Vec<(&str, Stage)> {
    vec![
        ("world.jsonl", Stage::Worldgen),
        ("split.json", Stage::Worldgen),
        ("uq2i_eval.jsonl", Stage::Uq2i),
        (ckpt, Stage::Sft),
    ]
}

/// RL from explicit checkpoints; writes `rl.ckpt` like the stage does.
fn rl_from(p: &Pipeline, reference: Option<&Path>, policy: Option<&Path>) -> Result<()> {
    let started = Instant::now();
    let sft = p.path("sft.ckpt");
    let r = absolute(reference.unwrap_or(&sft), Stage::Sft)?;
    let q = match policy {
        Some(path) => absolute(path, Stage::Sft)?,
        None => r.clone(),
    };
    let base = p.load_base()?;
    let (tuned, log) = p.run_rl_from(
        &base,
        &p.config.rewards,
        load_checkpoint(Path::new(&q))?,
        load_checkpoint(Path::new(&r))?,
    )?;
    save_checkpoint(&tuned, &p.path("rl.ckpt"))?;
    tunechat::pipeline::artifacts::write_jsonl(&p.path("rl_log.jsonl"), &log)?;
    let mut inputs = Stage::Rl.inputs().to_vec();
    inputs.retain(|(n, _)| *n != "sft.ckpt");
    inputs.push((&r, Stage::Sft));
    if q != r {
        inputs.push((&q, Stage::Sft));
    }
    p.record("rl", &inputs, &["rl.ckpt".into(), "rl_log.jsonl".into()], started)?;
    println!("rl done -> {}", p.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
