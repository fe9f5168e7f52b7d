use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use vlci_core::data::{synth_dataset, Split};
use vlci_core::scm::scm_verify;
use vlci_core::trainer::{
    train, write_report, Checkpoint, Dataset, Generator, RunConfig, Stage, Start,
};
use vlci_core::Error;

#[derive(Parser)]
#[command(
    name = "vlci",
    version,
    about = "Report generation with cross-modal causal intervention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value`, applied after the file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Vision-language pre-training (PLM + MIM).
    Pretrain(Common),
    /// Report-generation fine-tuning from `checkpoint_in`, or from scratch.
    Finetune(Common),
    /// Writes `id<TAB>report` for every sample of `split`.
    Generate(Common),
    /// Scores generated reports on `split`.
    Evaluate(Common),
    /// Checks the adjustment formulas against interventions on random SCMs.
    ScmVerify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Writes a synthetic corpus (annotation.json and images/) to `out`.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(c: &Common, stage: Option<Stage>) -> anyhow::Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(stage) = stage {
        let name = match stage {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        };
        overrides.push(format!("stage=\"{name}\""));
    }
    overrides.extend(c.overrides.iter().cloned());
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(RunConfig::from_file(&c.config, &overrides)?)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> anyhow::Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` is not set")).into())
}

fn load_checkpoint(run: &RunConfig) -> anyhow::Result<Option<Checkpoint>> {
    run.checkpoint_in
        .as_deref()
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()
}

fn load_data(run: &RunConfig, image_size: usize, views: usize) -> anyhow::Result<Dataset> {
    let ann = required(&run.annotations, "annotations")?;
    Ok(Dataset::load(
        ann,
        run.images.as_deref(),
        image_size,
        views,
    )?)
}

fn run_stage(c: &Common, stage: Stage) -> anyhow::Result<()> {
    let run = load_config(c, Some(stage))?;
    let ckpt = load_checkpoint(&run)?;
    let model = match &ckpt {
        Some(k) => k.model.clone(),
        // only the image geometry is read here; any valid vocabulary size will do
        None => run.model_config(1024)?,
    };
    let data = load_data(&run, model.image_size, model.views)?;
    let start = match &ckpt {
        None => Start::Fresh,
        Some(k) if k.stage == stage => Start::Resume(k),
        Some(k) => Start::Warm(k),
    };
    let out = train(&run, &data, start)?;
    for e in &out.epochs {
        println!("{}", serde_json::to_string(e)?);
    }
    if let Some(p) = &run.checkpoint_out {
        println!("best checkpoint written to {}", p.display());
    }
    Ok(())
}

fn split_of(run: &RunConfig) -> anyhow::Result<Split> {
    run.split
        .parse()
        .map_err(|_| Error::Config(format!("unknown split '{}'", run.split)).into())
}

fn inference(c: &Common, evaluate: bool) -> anyhow::Result<()> {
    let run = load_config(c, None)?;
    required(&run.checkpoint_in, "checkpoint_in")?;
    let ckpt = load_checkpoint(&run)?.expect("checkpoint_in is set");
    let split = split_of(&run)?;
    let data = load_data(&run, ckpt.model.image_size, ckpt.model.views)?;
    let params = ckpt.param_store(DType::F32)?;
    let g = Generator {
        params: &params,
        config: &ckpt.model,
        vocab: &ckpt.vocab,
        mode: run.mode,
    };
    let dc = run.decode_config();
    let examples = data.split(split);
    if evaluate {
        let e = g.evaluate(examples, &dc)?;
        println!("{}", e.report.table());
        if let Some(p) = &run.report {
            write_report(p, split.name(), &e)?;
        }
        return Ok(());
    }
    let mut trace = match &run.trace {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for e in examples {
        if e.images.is_empty() {
            bail!(Error::InvalidArgument(format!(
                "sample '{}' has no image",
                e.id
            )));
        }
        let (text, t) = g.generate_traced(&e.images, &dc)?;
        writeln!(out, "{}\t{}", e.id, text)?;
        if let (Some(w), Some(t)) = (trace.as_mut(), t) {
            let rec = serde_json::json!({ "id": e.id, "trace": t });
            writeln!(w, "{rec}")?;
        }
    }
    if let Some(mut w) = trace {
        w.flush()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain(c) => run_stage(&c, Stage::Pretrain),
        Command::Finetune(c) => run_stage(&c, Stage::Finetune),
        Command::Generate(c) => inference(&c, false),
        Command::Evaluate(c) => inference(&c, true),
        Command::ScmVerify {
            config,
            seed,
            trials,
        } => {
            if let Some(p) = config {
                // only checked for validity; the oracle has no tunables there
                RunConfig::from_file(&p, &[])?;
            }
            let report = scm_verify(seed, trials, None)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.passed {
                bail!(Error::Probability(format!(
                    "adjustment error {:e} / {:e} exceeds {:e}",
                    report.max_abs_error.frontdoor, report.max_abs_error.backdoor, report.tolerance
                )));
            }
            Ok(())
        }
        Command::Synth { out, samples, seed } => {
            let ann = synth_dataset(seed, samples)?.write_to(&out)?;
            println!("{}", ann.display());
            Ok(())
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::NonFinite { .. }) | Some(Error::Probability(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
