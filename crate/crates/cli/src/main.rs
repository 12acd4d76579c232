use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tenet_core::pipeline::{self, PipelineConfig, PromptSource, StageReport, SynthConfig};
use tenet_core::synth::SuiteSpec;
use tenet_core::Error;

const ENV_ENDPOINT: &str = "TENET_ENDPOINT";
const ENV_TIMEOUT: &str = "TENET_TIMEOUT";

#[derive(Parser, Debug)]
#[command(name = "tenet", version, about = "Temporal box prompts for referring video segmentation")]
struct Cli {
    /// TOML config file; flags and environment override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-video parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Output directory for stage results.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset into the data directory.
    Synth(SynthArgs),
    /// Run the tracker over top-K detections and write raw tracks.
    Track(PromptArgs),
    /// Build the reference proposal and candidate tracks.
    Prompts(PromptArgs),
    /// Train the preference classifier.
    Train(TrainArgs),
    /// Choose one temporal prompt per video.
    Select(SelectArgs),
    /// Turn the chosen prompts into masks.
    Segment(SegmentArgs),
    /// Score masks against ground truth and compare prompt choices.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// TOML scene description (`prefix`, `[suite]`, `[[scene]]`).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of suite videos when no spec is given.
    #[arg(long)]
    videos: Option<usize>,
}

#[derive(Args, Debug)]
struct PromptArgs {
    /// Pretrained detections kept per frame.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    coverage_min: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Prompt features (defaults to the prompts stage output).
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Fraction of videos withheld from training.
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    no_grad_check: bool,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Select with ground truth instead of a model.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    /// Segmentation service URL; the rectangle mock is used otherwise.
    #[arg(long)]
    endpoint: Option<String>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    retries: Option<u32>,
    #[arg(long, value_parser = parse_prompt_source)]
    prompt: Option<PromptSource>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Boundary tolerance in pixels.
    #[arg(long)]
    tolerance: Option<f64>,
}

fn parse_prompt_source(s: &str) -> Result<PromptSource, String> {
    match s {
        "selected" => Ok(PromptSource::Selected),
        "reference" => Ok(PromptSource::Reference),
        "ground_truth" | "ground-truth" => Ok(PromptSource::GroundTruth),
        _ => Err(format!("unknown prompt source {s:?} (selected, reference, ground_truth)")),
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Track(_) => "track",
            Command::Prompts(_) => "prompts",
            Command::Train(_) => "train",
            Command::Select(_) => "select",
            Command::Segment(_) => "segment",
            Command::Eval(_) => "eval",
        }
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    stage: &'a str,
    kind: &'a str,
    message: String,
}

fn fail(stage: &str, kind: &str, message: String, code: u8) -> ExitCode {
    let rec = ErrorRecord { stage, kind, message };
    eprintln!("{}", serde_json::to_string(&rec).expect("error record serializes"));
    ExitCode::from(code)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::MissingInput(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

struct FileConfig {
    pipeline: PipelineConfig,
    synth: Option<SynthConfig>,
}

fn load_file(path: &Path) -> Result<FileConfig, Error> {
    if !path.is_file() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: toml::de::Error| Error::Config(format!("{}: {e}", path.display()));
    let mut table: toml::Table = toml::from_str(&text).map_err(bad)?;
    let synth = match table.remove("synth") {
        Some(v) => Some(v.try_into().map_err(bad)?),
        None => None,
    };
    let pipeline = toml::Value::Table(table).try_into().map_err(bad)?;
    Ok(FileConfig { pipeline, synth })
}

fn load_synth_spec(path: &Path) -> Result<SynthConfig, Error> {
    if !path.is_file() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn env_overrides(cfg: &mut PipelineConfig) -> Result<(), Error> {
    if let Ok(endpoint) = std::env::var(ENV_ENDPOINT) {
        cfg.segment.endpoint = (!endpoint.is_empty()).then_some(endpoint);
    }
    if let Ok(t) = std::env::var(ENV_TIMEOUT) {
        cfg.segment.timeout_secs = t
            .parse()
            .map_err(|_| Error::Config(format!("{ENV_TIMEOUT}={t:?} is not a number of seconds")))?;
    }
    Ok(())
}

/// defaults < config file < flags < environment
fn effective_config(cli: &Cli) -> Result<(PipelineConfig, Option<SynthConfig>), Error> {
    let (mut cfg, mut synth) = match &cli.config {
        Some(p) => {
            let f = load_file(p)?;
            (f.pipeline, f.synth)
        }
        None => (PipelineConfig::default(), None),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = Some(j);
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &cli.data {
        cfg.data = d.clone();
    }
    match &cli.command {
        Command::Synth(a) => {
            if let Some(p) = &a.spec {
                synth = Some(load_synth_spec(p)?);
            }
            let s = synth.get_or_insert_with(|| SynthConfig {
                suite: Some(SuiteSpec::default()),
                ..SynthConfig::default()
            });
            if let Some(n) = a.videos {
                s.suite.get_or_insert_with(SuiteSpec::default).videos = n;
            }
        }
        Command::Track(a) | Command::Prompts(a) => {
            if let Some(k) = a.top_k {
                cfg.prompts.top_k = k;
            }
            if let Some(c) = a.coverage_min {
                cfg.prompts.coverage_min = c;
            }
        }
        Command::Train(a) => {
            if a.features.is_some() {
                cfg.features = a.features.clone();
            }
            if let Some(e) = a.epochs {
                cfg.training.epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.training.learning_rate = lr;
            }
            if let Some(h) = a.holdout {
                cfg.train.holdout = h;
            }
            if a.no_grad_check {
                cfg.train.grad_check = false;
            }
        }
        Command::Select(a) => {
            if a.checkpoint.is_some() {
                cfg.checkpoint = a.checkpoint.clone();
            }
            if a.features.is_some() {
                cfg.features = a.features.clone();
            }
            cfg.select.oracle |= a.oracle;
        }
        Command::Segment(a) => {
            if a.endpoint.is_some() {
                cfg.segment.endpoint = a.endpoint.clone();
            }
            if let Some(t) = a.timeout {
                cfg.segment.timeout_secs = t;
            }
            if let Some(r) = a.retries {
                cfg.segment.retries = r;
            }
            if let Some(p) = a.prompt {
                cfg.segment.prompt = p;
            }
        }
        Command::Eval(a) => {
            if a.tolerance.is_some() {
                cfg.eval.tolerance = a.tolerance;
            }
        }
    }
    env_overrides(&mut cfg)?;
    cfg.validate()?;
    Ok((cfg, synth))
}

fn run(cli: &Cli) -> Result<StageReport, Error> {
    let (cfg, synth) = effective_config(cli)?;
    if let Some(j) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Synth(_) => pipeline::run_synth(&synth.unwrap_or_default(), cfg.seed, &cfg.data),
        Command::Track(_) => pipeline::run_track(&cfg),
        Command::Prompts(_) => pipeline::run_prompts(&cfg),
        Command::Train(_) => pipeline::run_train(&cfg),
        Command::Select(_) => pipeline::run_select(&cfg),
        Command::Segment(_) => pipeline::run_segment(&cfg),
        Command::Eval(_) => pipeline::run_eval(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("cli", "usage", e.to_string().trim().to_string(), 2),
    };
    let stage = cli.command.name();
    match run(&cli) {
        Ok(report) => {
            log::info!("{stage}: wrote {} files", report.outputs.len());
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(stage, e.kind(), e.to_string(), exit_code(&e)),
    }
}
