mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; nothing was written.
    Usage(String),
    Runtime(String),
}

impl From<pollen_core::Error> for CliError {
    fn from(e: pollen_core::Error) -> Self {
        match e {
            pollen_core::Error::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "pollen",
    version,
    about = "Pollen grain detection and honey authentication"
)]
struct Cli {
    /// Config file (`key = value` with `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Worker threads; 1 is the bit-deterministic path.
    #[arg(long, global = true, env = "POLLEN_THREADS")]
    threads: Option<usize>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic slides with annotations and a manifest.
    GenData(GenData),
    /// Fit anchors and train the detector.
    TrainDetector(TrainDetector),
    /// Run a trained detector over images and write a detection record file.
    Detect(Detect),
    /// Score detection records against annotations.
    Evaluate(Evaluate),
    /// Train the honey classifier.
    TrainAuth(TrainAuth),
    /// Classify one honey sample.
    Authenticate(Authenticate),
    /// Finite-difference check of every op and of the full detector loss.
    GradCheck(GradCheck),
}

#[derive(Args, Debug)]
pub struct GenData {
    /// Dataset directory [paths.data].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of slides [data.n_images].
    #[arg(long)]
    pub n: Option<usize>,
    /// Multiply every grain count range, e.g. 0.5 for a diluted set.
    #[arg(long)]
    pub count_scale: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainDetector {
    /// Dataset directory written by gen-data [paths.data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory for weights, optimizer state and the CSV log.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Epochs to run; with --resume, epochs beyond those already completed [train.epochs].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [train.batch_size]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate [train.optimizer.lr].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from the run directory's final weights and optimizer state.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct Detect {
    /// [paths.weights]
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Image files or directories of .png/.ppm images.
    #[arg(long, num_args = 1.., required = true)]
    pub images: Vec<PathBuf>,
    /// Detection record file [paths.detections].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Confidence threshold [detector.conf_threshold].
    #[arg(long)]
    pub conf: Option<f64>,
    /// NMS IoU threshold [detector.nms_iou].
    #[arg(long)]
    pub nms: Option<f64>,
}

#[derive(Args, Debug)]
pub struct Evaluate {
    /// Detection record file [paths.detections].
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Dataset directory or annotation JSONL file.
    #[arg(long)]
    pub annotations: PathBuf,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Match IoU threshold [detector.match_iou].
    #[arg(long)]
    pub iou: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainAuth {
    /// JSON list of `{"label", "counts": [r, t, s], "frames"}` samples.
    #[arg(
        long,
        conflicts_with = "synthetic",
        required_unless_present = "synthetic"
    )]
    pub samples: Option<PathBuf>,
    /// Generate this many samples per built-in honey profile.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Frames per synthetic sample [auth.frames].
    #[arg(long)]
    pub frames: Option<usize>,
    /// Model file [paths.auth_model].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Authenticate {
    /// Model file from train-auth [paths.auth_model].
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// JSON `{"counts": [r, t, s], "frames"}`.
    #[arg(
        long,
        conflicts_with = "detections",
        required_unless_present = "detections"
    )]
    pub features: Option<PathBuf>,
    /// Detection record file covering the sample's frames.
    #[arg(long, requires = "frames")]
    pub detections: Option<PathBuf>,
    /// Frames the detection file covers (frames without detections have no lines).
    #[arg(long)]
    pub frames: Option<u64>,
    /// Reference grains per frame for the dilution check.
    #[arg(long)]
    pub reference_density: Option<f64>,
    /// Reference class counts `r,t,s` for the distribution comparison.
    #[arg(long, value_delimiter = ',')]
    pub reference_counts: Option<Vec<u64>>,
}

#[derive(Args, Debug)]
pub struct GradCheck {
    /// Random trials per op and for the full loss.
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Input size of the full-network check.
    #[arg(long, default_value_t = 64)]
    pub extent: usize,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    let Some(command) = &cli.command else {
        cfg.validate()?;
        return Ok(cfg);
    };
    match command {
        Command::GenData(a) => {
            set(&mut cfg.paths.data, &a.out);
            set(&mut cfg.data.n_images, &a.n);
            set(&mut cfg.data.count_scale, &a.count_scale);
        }
        Command::TrainDetector(a) => {
            set(&mut cfg.paths.data, &a.data);
            set(&mut cfg.paths.run_dir, &a.out);
            set(&mut cfg.train.epochs, &a.epochs);
            set(&mut cfg.train.batch_size, &a.batch_size);
            set(&mut cfg.train.optimizer.lr, &a.lr);
        }
        Command::Detect(a) => {
            set(&mut cfg.paths.weights, &a.weights);
            set(&mut cfg.paths.detections, &a.out);
            set(&mut cfg.detector.conf_threshold, &a.conf);
            set(&mut cfg.detector.nms_iou, &a.nms);
        }
        Command::Evaluate(a) => {
            set(&mut cfg.paths.detections, &a.detections);
            set(&mut cfg.paths.report, &a.out);
            set(&mut cfg.detector.match_iou, &a.iou);
        }
        Command::TrainAuth(a) => {
            set(&mut cfg.paths.auth_model, &a.out);
            set(&mut cfg.auth.samples_per_profile, &a.synthetic);
            set(&mut cfg.auth.frames, &a.frames);
        }
        Command::Authenticate(a) => set(&mut cfg.paths.auth_model, &a.model),
        Command::GradCheck(_) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
    if let Some(v) = value {
        *slot = v.clone();
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(CliError::Usage(
            "a subcommand is required; see --help".into(),
        ));
    };
    pollen_core::tensor::parallel::set_threads(cfg.threads.max(1));
    tune_allocator();
    match command {
        Command::GenData(_) => commands::gen_data(&cfg),
        Command::TrainDetector(a) => commands::train_detector(&cfg, a.resume),
        Command::Detect(a) => commands::detect(&cfg, &a.images),
        Command::Evaluate(a) => commands::evaluate(&cfg, &a.annotations),
        Command::TrainAuth(a) => commands::train_auth(&cfg, a.samples.as_deref()),
        Command::Authenticate(a) => commands::authenticate(&cfg, a),
        Command::GradCheck(a) => commands::grad_check(&cfg, a),
    }
}

/// Keeps large activation buffers mapped between steps instead of returning
/// them to the kernel on every free.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn tune_allocator() {
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn tune_allocator() {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
