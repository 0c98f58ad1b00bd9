//! `se2cnn`: build, train, evaluate and verify SE(2,N) group CNNs.
//!
//! Exit codes: 0 success, 1 usage or invalid input, 2 verification failure,
//! 3 I/O or file format error.

mod config;
mod verify;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use se2cnn::data::{self, LabelKind, LabeledPatchSet};
use se2cnn::error::Error;
use se2cnn::geometry::{apply_l, apply_u, GroupElement, OrientationSampling};
use se2cnn::kernel_rotation::RotationOperator;
use se2cnn::network::{self, read_model_config, write_atomic, Head, Model, NetworkConfig, LAYERS};
use se2cnn::tensor::{Precision, RawTensor, Scalar, Tensor};
use se2cnn::training::{self, Augmentation, TrainSettings};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Lib(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Verification(_) => 2,
            CliError::Lib(Error::Io(_) | Error::Format(_) | Error::InvalidLabel(_)) => 3,
            CliError::Lib(_) => 1,
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "se2cnn", version, about = "Roto-translation group CNNs on SE(2,N)")]
struct Cli {
    /// Worker threads for the global rayon pool.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Seed for weights, data and batch order; falls back to SE2_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a freshly initialised model and print its weight counts.
    Build {
        #[command(flatten)]
        model: ModelArgs,
        /// Output model file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// key=value file with defaults for the flags above.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on a dataset written by `synth`.
    Train(TrainArgs),
    /// Report metrics of a model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// Average predictions over the input and its transpose.
        #[arg(long)]
        tta: bool,
        /// Also write the metrics to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run equivariance, gradient and weight-count checks.
    Verify {
        /// Model to check; without it a model is built from the flags.
        #[arg(long, conflicts_with = "n_orientations")]
        model: Option<PathBuf>,
        #[command(flatten)]
        build: ModelArgs,
        /// Skip the finite-difference gradient audit.
        #[arg(long)]
        skip_gradients: bool,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, value_enum, default_value_t = Task::RotatedPatterns)]
        task: Task,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a roto-translation to a tensor file (debugging aid).
    Rotate {
        /// SE2T tensor, or a PGM/PPM image.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Angle sampling; the rotation is `index · 2π / orientations`.
        #[arg(long, default_value_t = 4)]
        orientations: usize,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Translation in pixels, x to the right.
        #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
        tx: i64,
        /// Translation in pixels, y upwards.
        #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
        ty: i64,
        /// `u` for planar images, `l` for orientation-stacked tensors.
        #[arg(long, value_enum, default_value_t = Action::U)]
        action: Action,
    },
    /// Print the sparse kernel rotation operator as `row col value` lines.
    DumpOperator {
        #[arg(long, default_value_t = 5)]
        kernel_size: usize,
        #[arg(long)]
        n_orientations: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Task {
    RotatedPatterns,
    CurveSegmentation,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Action {
    U,
    L,
}

/// Architecture flags shared by `build`, `train` and `verify`.
#[derive(Debug, Args)]
struct ModelArgs {
    /// Number of sampled orientations N.
    #[arg(long)]
    n_orientations: Option<usize>,
    /// Six comma-separated channel counts; defaults depend on N.
    #[arg(long)]
    channels: Option<String>,
    /// Six comma-separated odd kernel sizes, the last one 1.
    #[arg(long)]
    kernel_sizes: Option<String>,
    /// Layers (1-5) followed by 2x2 max pooling, comma-separated or `none`.
    #[arg(long)]
    pool_layers: Option<String>,
    #[arg(long)]
    input_channels: Option<usize>,
    /// `single` or `double`.
    #[arg(long)]
    precision: Option<String>,
    /// `global-max` or `per-pixel`.
    #[arg(long)]
    head: Option<String>,
    /// `max` or `mean`.
    #[arg(long)]
    projection: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Start from this model instead of building one from the flags.
    #[arg(long, conflicts_with = "n_orientations")]
    init: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Output model file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss log; defaults to the model path with `.log` appended.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// `none`, `transpose`, or `rot90` (only for N = 1).
    #[arg(long)]
    augment: Option<String>,
    #[arg(long)]
    log_every: Option<usize>,
    /// Keep the running batch norm statistics from training.
    #[arg(long)]
    no_recalibrate: bool,
    /// key=value file with defaults for the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv: Vec<OsString> = std::env::args_os().collect();
    let cli = match parse(&argv) {
        Ok(cli) => cli,
        Err(Parsed::Exit(code)) => return ExitCode::from(code),
        Err(Parsed::Failed(e)) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

enum Parsed {
    Exit(u8),
    Failed(CliError),
}

fn parse(argv: &[OsString]) -> Result<Cli, Parsed> {
    let mut cmd = Cli::command();
    cmd.build();
    let clap_exit = |e: clap::Error| {
        let _ = e.print();
        match e.kind() {
            clap::error::ErrorKind::DisplayHelp
            | clap::error::ErrorKind::DisplayVersion
            | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => Parsed::Exit(0),
            _ => Parsed::Exit(1),
        }
    };
    let first = cmd.clone().try_get_matches_from(argv).map_err(clap_exit)?;
    let merged = config::merge(&cmd, &first, argv).map_err(Parsed::Failed)?;
    let matches = cmd.try_get_matches_from(merged).map_err(clap_exit)?;
    Cli::from_arg_matches(&matches).map_err(clap_exit)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure threads: {e}")))?;
    }
    let seed = resolve_seed(cli.seed)?;
    match cli.command {
        Command::Build { model, out, .. } => cmd_build(&model, out, seed),
        Command::Train(args) => cmd_train(args, seed),
        Command::Eval {
            model,
            data,
            batch_size,
            tta,
            out,
        } => cmd_eval(&model, &data, batch_size, tta, out.as_deref()),
        Command::Verify {
            model,
            build,
            skip_gradients,
        } => {
            let config = match &model {
                Some(path) => read_model_config(path)?,
                None => network_config(&build)?,
            };
            let report = match config.precision {
                Precision::Single => verify::run::<f32>(load_or_build(model.as_deref(), config, seed)?, seed, skip_gradients)?,
                Precision::Double => verify::run::<f64>(load_or_build(model.as_deref(), config, seed)?, seed, skip_gradients)?,
            };
            print!("{}", report.text);
            if report.failures > 0 {
                return Err(CliError::Verification(format!("{} check(s) failed", report.failures)));
            }
            Ok(())
        }
        Command::Synth { task, count, out } => cmd_synth(task, count, &out, seed),
        Command::Rotate {
            input,
            out,
            orientations,
            index,
            tx,
            ty,
            action,
        } => cmd_rotate(&input, &out, orientations, index, [tx, ty], action),
        Command::DumpOperator {
            kernel_size,
            n_orientations,
            out,
        } => {
            let op = RotationOperator::new(kernel_size, n_orientations)?;
            match out {
                Some(path) => write_atomic(&path, op.dump().as_bytes())?,
                None => print!("{}", op.dump()),
            }
            Ok(())
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var("SE2_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("SE2_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(0),
    }
}

fn parse_list(flag: &str, value: &str) -> Result<Vec<usize>> {
    let value = value.trim();
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("--{flag}: `{v}` is not a non-negative integer")))
        })
        .collect()
}

fn parse_layers(flag: &str, value: &str) -> Result<[usize; LAYERS]> {
    parse_list(flag, value)?
        .try_into()
        .map_err(|_| CliError::Usage(format!("--{flag} needs {LAYERS} comma-separated values")))
}

fn usage<E: std::fmt::Display>(flag: &'static str) -> impl Fn(E) -> CliError {
    move |e| CliError::Usage(format!("--{flag}: {e}"))
}

fn network_config(args: &ModelArgs) -> Result<NetworkConfig> {
    let n = args
        .n_orientations
        .ok_or_else(|| CliError::Usage("--n-orientations is required".into()))?;
    if n == 0 {
        return Err(CliError::Usage("--n-orientations must be at least 1".into()));
    }
    let mut config = NetworkConfig::new(n);
    if let Some(c) = &args.channels {
        config.channels = parse_layers("channels", c)?;
    }
    if let Some(k) = &args.kernel_sizes {
        config.kernel_sizes = parse_layers("kernel-sizes", k)?;
    }
    if let Some(p) = &args.pool_layers {
        config.pool_layers = parse_list("pool-layers", p)?;
    }
    if let Some(c) = args.input_channels {
        config.input_channels = c;
    }
    if let Some(p) = &args.precision {
        config.precision = match p.as_str() {
            "single" | "f32" => Precision::Single,
            "double" | "f64" => Precision::Double,
            other => return Err(CliError::Usage(format!("--precision: unknown precision `{other}`"))),
        };
    }
    if let Some(h) = &args.head {
        config.head = h.parse().map_err(usage("head"))?;
    }
    if let Some(p) = &args.projection {
        config.projection = p.parse().map_err(usage("projection"))?;
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

fn load_or_build<T: Scalar>(path: Option<&Path>, config: NetworkConfig, seed: u64) -> Result<Model<T>> {
    Ok(match path {
        Some(path) => Model::load(path)?,
        None => {
            let mut model = Model::new(config)?;
            model.init_weights(seed);
            model
        }
    })
}

fn weight_lines(config: &NetworkConfig) -> String {
    let counts = network::weight_counts(config.orientations, config.input_channels, &config.channels, &config.kernel_sizes);
    let mut s = String::new();
    for (l, c) in counts.iter().enumerate() {
        s.push_str(&format!("weights layer={} channels={} count={c}\n", l + 1, config.channels[l]));
    }
    s.push_str(&format!("weights total={}\n", counts.iter().sum::<usize>()));
    s
}

fn cmd_build(args: &ModelArgs, out: Option<PathBuf>, seed: u64) -> Result<()> {
    let out = out.ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let config = network_config(args)?;
    print!("{}", weight_lines(&config));
    match config.precision {
        Precision::Single => load_or_build::<f32>(None, config, seed)?.save(&out)?,
        Precision::Double => load_or_build::<f64>(None, config, seed)?.save(&out)?,
    }
    println!("model={}", out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs, seed: u64) -> Result<()> {
    let data_dir = args
        .data
        .clone()
        .ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let out = args
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    if !data_dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset directory {} not found", data_dir.display()),
        ))
        .into());
    }
    let data = LabeledPatchSet::load(&data_dir)?;

    let config = match &args.init {
        Some(path) => read_model_config(path)?,
        None => {
            let mut config = network_config(&args.model)?;
            if args.model.head.is_none() && data.label_kind() == LabelKind::Pixel {
                config.head = Head::PerPixel;
            }
            config
        }
    };

    let defaults = TrainSettings::default();
    let augmentation: Augmentation = match &args.augment {
        Some(a) => a.parse().map_err(usage("augment"))?,
        None => Augmentation::None,
    };
    if augmentation == Augmentation::TransposeRot90 && config.orientations != 1 {
        return Err(CliError::Usage(
            "--augment rot90 is only valid for the N=1 baseline; rotations are built into N > 1".into(),
        ));
    }
    let settings = TrainSettings {
        learning_rate: args.lr.unwrap_or(defaults.learning_rate),
        momentum: args.momentum.unwrap_or(defaults.momentum),
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        iterations: args.iterations.unwrap_or(defaults.iterations),
        augmentation,
        seed,
        log_every: args.log_every.unwrap_or(defaults.log_every),
        recalibrate: !args.no_recalibrate,
    };
    settings.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let log = match config.precision {
        Precision::Single => train_with::<f32>(args.init.as_deref(), config, seed, &data, &settings, &out)?,
        Precision::Double => train_with::<f64>(args.init.as_deref(), config, seed, &data, &settings, &out)?,
    };
    let log_path = args.log.unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    write_atomic(&log_path, log.as_bytes())?;
    print!("{log}");
    println!("model={}", out.display());
    println!("log={}", log_path.display());
    Ok(())
}

fn train_with<T: Scalar>(
    init: Option<&Path>,
    config: NetworkConfig,
    seed: u64,
    data: &LabeledPatchSet,
    settings: &TrainSettings,
    out: &Path,
) -> Result<String> {
    let mut model = load_or_build::<T>(init, config, seed)?;
    let report = training::train(&mut model, data, settings)?;
    model.save(out)?;
    Ok(report.log_lines())
}

fn cmd_eval(model: &Path, data: &Path, batch_size: usize, tta: bool, out: Option<&Path>) -> Result<()> {
    let config = read_model_config(model)?;
    let data = LabeledPatchSet::load(data)?;
    let text = match config.precision {
        Precision::Single => eval_with(&Model::<f32>::load(model)?, &data, batch_size, tta)?,
        Precision::Double => eval_with(&Model::<f64>::load(model)?, &data, batch_size, tta)?,
    };
    print!("{text}");
    if let Some(out) = out {
        write_atomic(out, text.as_bytes())?;
    }
    Ok(())
}

fn eval_with<T: Scalar>(model: &Model<T>, data: &LabeledPatchSet, batch_size: usize, tta: bool) -> Result<String> {
    let auc = |a: Option<f64>| a.map_or("undefined".to_string(), |v| format!("{v:.6}"));
    Ok(match data.label_kind() {
        LabelKind::Patch => {
            let m = training::evaluate_classification(model, data, batch_size, tta)?;
            format!(
                "samples={}\naccuracy={:.6}\nf1={:.6}\nauc={}\n",
                data.len(),
                m.accuracy,
                m.f1,
                auc(m.auc)
            )
        }
        LabelKind::Pixel => {
            let m = training::evaluate_segmentation(model, data, batch_size, tta)?;
            format!(
                "samples={}\npixel_accuracy={:.6}\nf1={:.6}\nauc={}\nrand={:.6}\nrand_threshold={:.2}\n",
                data.len(),
                m.pixel_accuracy,
                m.f1,
                auc(m.auc),
                m.rand,
                m.rand_threshold
            )
        }
    })
}

fn cmd_synth(task: Task, count: usize, out: &Path, seed: u64) -> Result<()> {
    if count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    let set = match task {
        Task::RotatedPatterns => data::synth_rotated_patterns(count, seed)?,
        Task::CurveSegmentation => data::synth_curve_segmentation(count, seed)?,
    };
    if out.exists() && !out.join("manifest.txt").is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("{} exists and is not a dataset directory", out.display()),
        ))
        .into());
    }
    // Written next to the target and renamed into place.
    let name = out
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("{} is not a directory path", out.display())))?;
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = parent.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let staged = set.save(&tmp).and_then(|()| {
        if out.exists() {
            std::fs::remove_dir_all(out)?;
        }
        std::fs::rename(&tmp, out)?;
        Ok(())
    });
    if staged.is_err() {
        let _ = std::fs::remove_dir_all(&tmp);
    }
    staged?;
    println!("samples={}", set.len());
    println!("positive_fraction={:.4}", set.positive_fraction());
    println!("dataset={}", out.display());
    Ok(())
}

fn cmd_rotate(input: &Path, out: &Path, orientations: usize, index: usize, t: [i64; 2], action: Action) -> Result<()> {
    let sampling = OrientationSampling::new(orientations).map_err(|e| CliError::Usage(e.to_string()))?;
    if index >= orientations {
        return Err(CliError::Usage(format!("--index must be below --orientations ({orientations})")));
    }
    let g = GroupElement::new([t[0] as f64, t[1] as f64], sampling.angle(index));
    let is_image = matches!(
        input.extension().and_then(|e| e.to_str()),
        Some("pgm" | "ppm" | "pnm")
    );
    let bytes = if is_image {
        rotate_tensor(&data::read_pnm(input)?, &g, sampling, action)?
    } else {
        let mut f = std::io::BufReader::new(std::fs::File::open(input).map_err(Error::from)?);
        let raw = RawTensor::read(&mut f)?;
        match raw.precision {
            Precision::Single => rotate_tensor(&raw.into_tensor::<f32>(), &g, sampling, action)?,
            Precision::Double => rotate_tensor(&raw.into_tensor::<f64>(), &g, sampling, action)?,
        }
    };
    write_atomic(out, &bytes)?;
    Ok(())
}

fn rotate_tensor<T: Scalar>(x: &Tensor<T>, g: &GroupElement, sampling: OrientationSampling, action: Action) -> Result<Vec<u8>> {
    let y = match action {
        Action::U => apply_u(g, x)?,
        Action::L => apply_l(g, x, sampling)?,
    };
    Ok(y.to_se2t_bytes())
}
