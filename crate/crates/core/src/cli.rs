//! The `nhans` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::audio::{self, BitDepth};
use crate::bench;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PmAuxModel, Reference, TaskKind};
use crate::synth::{self, SynthSpec};
use crate::train::{self, Checkpoint, EvalConfig, TrainConfig};

/// Directory searched for `<task>.ckpt` when `--model` is not given.
pub const MODEL_DIR_ENV: &str = "NHANS_MODEL_DIR";

#[derive(Debug, Parser)]
#[command(name = "nhans", version, about = "Reference-conditioned speech enhancement and separation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Remove the noise exemplified by --neg.
    Denoise(EnhanceArgs),
    /// Keep the noise exemplified by --pos and remove the one in --neg.
    Selective(EnhanceArgs),
    /// Keep the speaker heard in --pos and remove the one in --neg.
    Separate(EnhanceArgs),
    /// Train a model from a key=value config file.
    Train(TrainArgs),
    /// Score a checkpoint on the test split against the unprocessed input.
    Evaluate(EvaluateArgs),
    /// Measure compute time per second of audio.
    Benchmark(BenchmarkArgs),
    /// Write the synthetic desk corpus as WAV files plus a manifest.
    SynthCorpus(SynthArgs),
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    /// Input WAV file, or a directory of WAV files.
    #[arg(long)]
    pub input: PathBuf,
    /// Output WAV file, or a directory in batch mode.
    #[arg(long)]
    pub output: PathBuf,
    /// Recording of what to keep.
    #[arg(long)]
    pub pos: Option<PathBuf>,
    /// Recording of what to remove.
    #[arg(long)]
    pub neg: Option<PathBuf>,
    /// Checkpoint file; defaults to $NHANS_MODEL_DIR/<task>.ckpt.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output sample format: 16 or 32f.
    #[arg(long, default_value = "32f")]
    pub bit_depth: String,
    /// Replace existing output files.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path; overrides the config's `checkpoint`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Corpus, grids and task; without it the checkpoint's task is scored on
    /// the synthetic corpus.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV report destination.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Checkpoint to time; without one a freshly initialised model of the
    /// default size is used.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Seconds of audio per run.
    #[arg(long, default_value_t = 1.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    /// Initialisation seed for the fresh model.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report file; printed to standard output when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses `args` (including the program name) and runs the command. Returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("nhans: {first}");
            return 2;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("nhans: error: {e}");
            1
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Denoise(a) => enhance(TaskKind::Denoiser, a),
        Command::Selective(a) => enhance(TaskKind::SelectiveDenoiser, a),
        Command::Separate(a) => enhance(TaskKind::Separator, a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Benchmark(a) => run_benchmark(a),
        Command::SynthCorpus(a) => run_synth(a),
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn check_writable(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(usage(format!(
            "{} already exists; pass --overwrite to replace it",
            path.display()
        )));
    }
    Ok(())
}

/// Checkpoint named by `--model`, or the task's file in `$NHANS_MODEL_DIR`.
pub fn resolve_model(explicit: Option<&Path>, task: TaskKind) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    let dir = std::env::var_os(MODEL_DIR_ENV)
        .ok_or_else(|| usage(format!("no --model given and {MODEL_DIR_ENV} is not set")))?;
    let dir = PathBuf::from(dir);
    let candidates: &[&str] = match task {
        TaskKind::Denoiser => &["denoiser.ckpt", "selective_denoiser.ckpt"],
        TaskKind::SelectiveDenoiser => &["selective_denoiser.ckpt", "denoiser.ckpt"],
        TaskKind::Separator => &["separator.ckpt"],
    };
    candidates
        .iter()
        .map(|c| dir.join(c))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            usage(format!(
                "no {} checkpoint in {} (looked for {})",
                task,
                dir.display(),
                candidates.join(", ")
            ))
        })
}

fn enhance(task: TaskKind, a: EnhanceArgs) -> Result<()> {
    match task {
        TaskKind::Denoiser if a.pos.is_some() => {
            return Err(usage("denoise takes no --pos; use selective to keep a noise"))
        }
        TaskKind::SelectiveDenoiser | TaskKind::Separator if a.pos.is_none() => {
            return Err(usage(format!("{} requires --pos", subcommand(task))))
        }
        _ => {}
    }
    let neg_path = a
        .neg
        .as_ref()
        .ok_or_else(|| usage(format!("{} requires --neg", subcommand(task))))?;
    let depth: BitDepth = a.bit_depth.parse()?;
    let model = Checkpoint::load(&resolve_model(a.model.as_deref(), task)?)?.into_model()?;
    if !task.compatible_with(model.task) {
        return Err(Error::TaskMismatch(format!(
            "{} needs a {} checkpoint, got {}",
            subcommand(task),
            if task == TaskKind::Separator { "separator" } else { "denoiser" },
            model.task
        )));
    }
    let minus = audio::read_wav(neg_path)?;
    let plus = match &a.pos {
        Some(p) => Reference::from_audio(audio::read_wav(p)?),
        None => Reference::Mute,
    };
    if task == TaskKind::Separator && matches!(plus, Reference::Mute) {
        return Err(usage("separate needs an audible --pos recording of the target speaker"));
    }
    let process = |input: &Path, output: &Path| -> Result<()> {
        check_writable(output, a.overwrite)?;
        let noisy = audio::read_wav(input)?;
        let out = model.run_task(task, &noisy, &plus, &minus)?;
        audio::write_wav(output, &out, depth)
    };

    if !a.input.is_dir() {
        if a.output.is_dir() {
            return Err(usage(format!(
                "{} is a directory but --input is a single file",
                a.output.display()
            )));
        }
        return process(&a.input, &a.output);
    }
    if a.output.exists() && !a.output.is_dir() {
        return Err(usage(format!(
            "--input is a directory, so --output must be one too ({} is a file)",
            a.output.display()
        )));
    }
    fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
    let mut entries: Vec<PathBuf> = fs::read_dir(&a.input)
        .map_err(|e| Error::io(&a.input, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&a.input, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    let mut failures = 0usize;
    let mut written = 0usize;
    for path in entries {
        if path.is_dir() {
            continue;
        }
        if !crate::harness::is_wav(&path) {
            eprintln!("nhans: warning: skipping non-WAV file {}", path.display());
            continue;
        }
        let name = path.file_name().expect("directory entries have names");
        match process(&path, &a.output.join(name)) {
            Ok(()) => written += 1,
            Err(e) => {
                eprintln!("nhans: error: {}: {e}", path.display());
                failures += 1;
            }
        }
    }
    if failures > 0 {
        return Err(Error::Usage(format!(
            "{failures} of {} files failed",
            failures + written
        )));
    }
    Ok(())
}

fn subcommand(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Denoiser => "denoise",
        TaskKind::SelectiveDenoiser => "selective",
        TaskKind::Separator => "separate",
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(out) = a.output {
        cfg.checkpoint = Some(out);
    }
    let path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| usage("no checkpoint destination: set `checkpoint` in the config or pass --output"))?;
    check_writable(&path, a.overwrite)?;
    let corpus = cfg.corpus.load()?;
    let outcome = train::train(&cfg, &corpus)?;
    if let Some((step, loss)) = outcome.losses.last() {
        eprintln!("nhans: trained {} for {step} steps, final loss {loss:.6}", cfg.task);
    }
    eprintln!("nhans: wrote {}", path.display());
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    check_writable(&a.output, a.overwrite)?;
    let cfg = match &a.config {
        Some(p) => Some(TrainConfig::load(p)?),
        None => None,
    };
    let task_hint = cfg.as_ref().map_or(TaskKind::Denoiser, |c| c.task);
    let checkpoint = Checkpoint::load(&resolve_model(a.model.as_deref(), task_hint)?)?;
    let (eval_cfg, corpus) = match &cfg {
        Some(c) => (EvalConfig::from_train_config(c), c.corpus.load()?),
        None => (
            EvalConfig {
                task: checkpoint.task,
                ..EvalConfig::default()
            },
            synth::generate(&SynthSpec::default())?,
        ),
    };
    let evaluation = train::evaluate(&checkpoint, &corpus, &eval_cfg)?;
    fs::write(&a.output, evaluation.to_csv()).map_err(|e| Error::io(&a.output, e))?;
    eprint!("{}", evaluation.render());
    Ok(())
}

fn run_benchmark(a: BenchmarkArgs) -> Result<()> {
    if let Some(out) = &a.output {
        check_writable(out, a.overwrite)?;
    }
    let model = match &a.model {
        Some(p) => Checkpoint::load(p)?.into_model()?,
        None => PmAuxModel::<f32>::new(ModelConfig::default(), TaskKind::Denoiser, a.seed)?,
    };
    let report = bench::benchmark_rtf(&model, a.duration, a.repetitions)?;
    match &a.output {
        Some(out) => fs::write(out, format!("{report}\n")).map_err(|e| Error::io(out, e)),
        None => {
            println!("{report}");
            Ok(())
        }
    }
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::default();
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let corpus = synth::generate(&spec)?;
    let manifest = synth::write_corpus(&corpus, &a.output)?;
    eprintln!(
        "nhans: wrote {} files and manifest.tsv under {}",
        manifest.entries.len(),
        a.output.display()
    );
    Ok(())
}
