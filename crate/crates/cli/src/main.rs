use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use gtpt::checkpoint;
use gtpt::complexity::count_flops;
use gtpt::dump::dump_sample;
use gtpt::synthdata::{generate, load_dataset, save_dataset, Geometry, Sample};
use gtpt::training::{curriculum_transfer, evaluate_with, fit, prepare, Example};
use gtpt::{ForwardOptions, IntroductionMode, Mode, Model, ModelConfig};

#[derive(Parser)]
#[command(name = "gtpt", version, about = "Group-based token pruning keypoint transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic keypoint dataset.
    Synth(SynthArgs),
    /// Train one curriculum stage.
    Train(TrainArgs),
    /// Report PCK of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print parameter and FLOPs accounting.
    Flops(FlopsArgs),
    /// Write attention maps and retained-token masks for one sample.
    Dump(DumpArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON config file, or `default` / `s-like`.
    #[arg(long)]
    config: String,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Body,
    Wholebody,
}

impl From<Stage> for Mode {
    fn from(s: Stage) -> Self {
        match s {
            Stage::Body => Mode::Body,
            Stage::Wholebody => Mode::Wholebody,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    stage: Stage,
    /// Checkpoint to start from; a body checkpoint is transferred when
    /// training the whole-body stage.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    no_prune: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Introduction {
    Dense,
    SparseDense,
    HumanSparseDense,
}

impl From<Introduction> for IntroductionMode {
    fn from(i: Introduction) -> Self {
        match i {
            Introduction::Dense => IntroductionMode::Dense,
            Introduction::SparseDense => IntroductionMode::SparseDense,
            Introduction::HumanSparseDense => IntroductionMode::HumanSparseDense,
        }
    }
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    config: String,
    #[arg(long)]
    no_prune: bool,
    #[arg(long, value_enum)]
    introduction: Option<Introduction>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    config: String,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
}

/// An error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

const USAGE: u8 = 1;
const CONFIG: u8 = 2;
const IO: u8 = 3;

impl From<gtpt::Error> for Failure {
    fn from(e: gtpt::Error) -> Self {
        let code = match e {
            gtpt::Error::Config { .. } => CONFIG,
            gtpt::Error::Io(_) | gtpt::Error::Format(_) | gtpt::Error::Json(_) => IO,
            _ => USAGE,
        };
        Failure { code, error: e.into() }
    }
}

trait OrExit<T> {
    fn or_exit(self, code: u8, what: impl fmt::Display) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, code: u8, what: impl fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code,
            error: e.into().context(what.to_string()),
        })
    }
}

fn load_config(spec: &str) -> Result<ModelConfig, Failure> {
    let path = Path::new(spec);
    if !path.exists() {
        match spec {
            "default" => return Ok(ModelConfig::default()),
            "s-like" => return Ok(ModelConfig::s_like()),
            _ => {}
        }
    }
    ModelConfig::from_file(path).or_exit(CONFIG, format_args!("config {spec}"))
}

fn load_samples(path: &Path) -> Result<Vec<Sample>, Failure> {
    load_dataset(path).or_exit(IO, format_args!("dataset {}", path.display()))
}

fn load_model(cfg: ModelConfig, ckpt: &Path) -> Result<Model<f32>, Failure> {
    let what = format_args!("checkpoint {}", ckpt.display()).to_string();
    let store = checkpoint::load::<f32>(ckpt).or_exit(IO, &what)?;
    Model::with_params(cfg, store).or_exit(IO, &what)
}

fn examples(samples: &[Sample], cfg: &ModelConfig, path: &Path) -> Result<Vec<Example<f32>>, Failure> {
    samples
        .iter()
        .map(|s| prepare(s, cfg))
        .collect::<gtpt::Result<_>>()
        .or_exit(IO, format_args!("dataset {} does not match the config", path.display()))
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.config)?;
    let samples = generate(
        a.count,
        a.seed,
        &cfg.schema(),
        &Geometry::default(),
        cfg.image_height,
        cfg.image_width,
    )?;
    save_dataset(&a.out, &samples).or_exit(IO, format_args!("writing {}", a.out.display()))?;
    log::info!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.config)?.with_mode(a.stage.into());
    let samples = load_samples(&a.data)?;
    let data = examples(&samples, &cfg, &a.data)?;
    let mut model = match &a.init {
        None => Model::<f32>::new(cfg.clone())?,
        Some(path) => {
            let what = format!("checkpoint {}", path.display());
            let store = checkpoint::load::<f32>(path).or_exit(IO, &what)?;
            if cfg.mode == Mode::Wholebody && !store.contains("dense_embed") {
                let t = curriculum_transfer(&store, &cfg).or_exit(IO, &what)?;
                log::info!("transferred body checkpoint; new parameters: {:?}", t.new_names);
                Model::with_params(cfg.clone(), t.params).or_exit(IO, &what)?
            } else {
                Model::with_params(cfg.clone(), store).or_exit(IO, &what)?
            }
        }
    };
    let every = cfg.train.checkpoint_every;
    let out = a.out.clone();
    fit(&mut model, &data, |log, m| {
        println!("{}", serde_json::to_string(log)?);
        if every > 0 && (log.step + 1) % every == 0 {
            checkpoint::save(&out, &m.params)?;
        }
        Ok(())
    })?;
    checkpoint::save(&a.out, &model.params).or_exit(IO, format_args!("writing {}", a.out.display()))
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.config)?;
    let model = load_model(cfg, &a.ckpt)?;
    let samples = load_samples(&a.data)?;
    let opts = if a.no_prune {
        ForwardOptions::unpruned()
    } else {
        ForwardOptions::pruned()
    };
    let r = evaluate_with(&model, &samples, &opts).or_exit(IO, "evaluating")?;
    let groups: serde_json::Map<String, serde_json::Value> = r
        .per_group
        .iter()
        .map(|(g, p1, p2)| (g.clone(), serde_json::json!({ "pck@0.1": p1, "pck@0.2": p2 })))
        .collect();
    let report = serde_json::json!({
        "samples": r.samples,
        "pruned": !a.no_prune,
        "pck@0.1": r.pck_01,
        "pck@0.2": r.pck_02,
        "per_group": groups,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("json values serialise"));
    Ok(())
}

fn flops(a: FlopsArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.config)?;
    if let Some(i) = a.introduction {
        cfg.ablation.introduction_mode = i.into();
    }
    let report = count_flops(&cfg, &cfg.schema(), !a.no_prune)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
    print!("{}", report.table());
    Ok(())
}

fn dump(a: DumpArgs) -> Result<(), Failure> {
    let cfg = load_config(&a.config)?;
    let model = load_model(cfg.clone(), &a.ckpt)?;
    let samples = load_samples(&a.data)?;
    let sample = samples.get(a.index).ok_or_else(|| Failure {
        code: USAGE,
        error: anyhow!("index {} out of range for {} samples", a.index, samples.len()),
    })?;
    let ex = &examples(std::slice::from_ref(sample), &cfg, &a.data)?[0];
    let written = dump_sample(&model, &ex.image, &a.out)
        .or_exit(IO, format_args!("writing {}", a.out.display()))?;
    log::info!("wrote {written} images to {}", a.out.display());
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("GTPT_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| Failure {
        code: USAGE,
        error: anyhow!("GTPT_THREADS must be a positive integer, got `{v}`"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .or_exit(USAGE, "configuring worker threads")
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Flops(a) => flops(a),
        Command::Dump(a) => dump(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
