use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;

use candle_core::Device;
use clap::{Args, Parser, Subcommand};

use dcgaze::config::{schema_help, RunConfig};
use dcgaze::data::{generate_synthetic, images_to_tensor, load_dataset, LabeledSample, SyntheticSpec};
use dcgaze::probe::{default_prototypes, load_prototypes, probe_gaze};
use dcgaze::training::{evaluate, extract_features, load_checkpoint, GazeModel, TensorDataset, Trainer};
use dcgaze::{angular_error, GazeError};

/// Exit codes other than 0.
const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NON_FINITE: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;

fn keys_help() -> &'static str {
    static HELP: OnceLock<String> = OnceLock::new();
    HELP.get_or_init(schema_help)
}

#[derive(Parser)]
#[command(name = "dcgaze", version, about = "Gaze estimation with differential contrastive training")]
#[command(after_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics and checkpoints to out_dir/run_name.
    #[command(after_help = keys_help())]
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Report the mean angular error of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding labels.txt and the images it lists.
        #[arg(long)]
        dataset: PathBuf,
        /// Per-sample CSV (default: eval.csv next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Training-free estimate from prototype prompts.
    #[command(after_help = keys_help())]
    Probe {
        #[arg(long)]
        images: PathBuf,
        /// Lines of `name pitch yaw "prompt"` (default: up/down/left/right).
        #[arg(long)]
        prototypes: Option<PathBuf>,
        /// Only the backend keys are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a synthetic labeled dataset.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 224)]
        size: usize,
        /// Pixel noise standard deviation as a fraction of full scale.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Dump appearance features with labels as CSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    /// Override a config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// An error tagged with the exit code it maps to.
struct Failure {
    code: u8,
    error: GazeError,
}

impl From<GazeError> for Failure {
    fn from(error: GazeError) -> Self {
        let code = match &error {
            GazeError::Config(_) | GazeError::Parse { .. } | GazeError::BackendLoad { .. } => EXIT_CONFIG,
            GazeError::NonFiniteLoss { .. } | GazeError::NonFiniteParameter { .. } => EXIT_NON_FINITE,
            GazeError::Checkpoint { .. } => EXIT_CHECKPOINT,
            _ => EXIT_OTHER,
        };
        Self { code, error }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        GazeError::from(e).into()
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, overrides } => cmd_train(&config, &overrides.set),
        Command::Eval {
            checkpoint,
            dataset,
            out,
        } => cmd_eval(&checkpoint, &dataset, out.as_deref()),
        Command::Probe {
            images,
            prototypes,
            config,
            overrides,
        } => cmd_probe(&images, prototypes.as_deref(), config.as_deref(), &overrides.set),
        Command::Synth {
            count,
            seed,
            out,
            size,
            noise,
        } => cmd_synth(count, seed, size, noise, &out),
        Command::ExportFeatures {
            checkpoint,
            dataset,
            out,
        } => cmd_export_features(&checkpoint, &dataset, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_tensor_dataset(root: &Path, cfg: &RunConfig, device: &Device) -> Result<(Vec<LabeledSample>, TensorDataset), GazeError> {
    let samples = load_dataset(root)?;
    if samples.is_empty() {
        return Err(GazeError::InvalidArgument(format!("{} holds no samples", root.display())));
    }
    let data = TensorDataset::from_samples(&samples, cfg.image_size, cfg.dtype, device)?;
    Ok((samples, data))
}

fn cmd_train(config: &Path, overrides: &[String]) -> CmdResult {
    let device = Device::Cpu;
    let cfg = RunConfig::load(config, overrides)?;
    let train_dir = cfg
        .train_data
        .clone()
        .ok_or_else(|| GazeError::Config("train_data is not set".into()))?;
    let backend = cfg.backend_spec().load(&device)?;
    let (_, train) = load_tensor_dataset(&train_dir, &cfg, &device)?;
    let val = match &cfg.val_data {
        Some(dir) => Some(load_tensor_dataset(dir, &cfg, &device)?.1),
        None => None,
    };
    let run_dir = cfg.run_dir();
    log::info!(
        "training on {} samples for {} epochs into {}",
        train.len(),
        cfg.epochs,
        run_dir.display()
    );
    let mut trainer = Trainer::new(GazeModel::new(&cfg, backend)?)?;
    let history = trainer.fit(&train, val.as_ref(), Some(&run_dir))?;
    if let Some(last) = history.last() {
        println!("final epoch {}: total loss {:.6}, {:.2} deg", last.epoch, last.total, last.val_deg);
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, dataset: &Path, out: Option<&Path>) -> CmdResult {
    let device = Device::Cpu;
    let (model, _) = load_checkpoint(checkpoint, &device)?;
    let cfg = model.config().clone();
    let (samples, data) = load_tensor_dataset(dataset, &cfg, &device)?;
    let report = evaluate(&model, &data, cfg.batch_size)?;
    let out = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join("eval.csv"),
    };
    let mut w = BufWriter::new(File::create(&out)?);
    writeln!(w, "path,pitch,yaw,pred_pitch,pred_yaw,error_deg")?;
    for ((s, p), e) in samples.iter().zip(&report.predictions).zip(&report.per_sample_deg) {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            s.path.display(),
            s.label.pitch,
            s.label.yaw,
            p.pitch,
            p.yaw,
            e
        )?;
    }
    w.flush()?;
    println!("mean angular error: {:.2} deg over {} samples", report.mean_deg, data.len());
    log::info!("per-sample errors written to {}", out.display());
    Ok(())
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Labeled samples when `dir` has a labels file, otherwise every image in it.
fn probe_inputs(dir: &Path) -> Result<Vec<(PathBuf, image::RgbImage, Option<dcgaze::GazeDirection>)>, GazeError> {
    if dir.join(dcgaze::data::LABELS_FILE).is_file() {
        return Ok(load_dataset(dir)?
            .into_iter()
            .map(|s| (s.path, s.image, Some(s.label)))
            .collect());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let img = image::open(&p)
                .map_err(|e| GazeError::Load {
                    path: p.clone(),
                    reason: e.to_string(),
                })?
                .to_rgb8();
            Ok((p, img, None))
        })
        .collect()
}

fn cmd_probe(images: &Path, prototypes: Option<&Path>, config: Option<&Path>, overrides: &[String]) -> CmdResult {
    let device = Device::Cpu;
    let cfg = match config {
        Some(path) => RunConfig::load(path, overrides)?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_overrides(overrides)?;
            cfg.validate()?;
            cfg
        }
    };
    let backend = cfg.backend_spec().load(&device)?;
    let protos = match prototypes {
        Some(p) => load_prototypes(p)?,
        None => default_prototypes(),
    };
    let inputs = probe_inputs(images)?;
    if inputs.is_empty() {
        return Err(GazeError::InvalidArgument(format!("no images found in {}", images.display())).into());
    }
    let tensor = images_to_tensor(inputs.iter().map(|i| &i.1), backend.image_size(), backend.dtype(), &device)?;
    let estimates = probe_gaze(&tensor, &protos, backend.as_ref())?;
    println!("path,pitch,yaw");
    let mut errors = Vec::new();
    for ((path, _, label), g) in inputs.iter().zip(&estimates) {
        println!("{},{:.6},{:.6}", path.display(), g.pitch, g.yaw);
        if let Some(l) = label {
            errors.push(angular_error(*g, *l)?);
        }
    }
    if !errors.is_empty() {
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        log::info!("mean angular error against labels: {mean:.2} deg");
    }
    Ok(())
}

fn cmd_synth(count: usize, seed: u64, size: usize, noise: f64, out: &Path) -> CmdResult {
    let spec = SyntheticSpec {
        count,
        image_size: size,
        seed,
        noise_level: noise,
    };
    let written = generate_synthetic(&spec, out)?;
    println!("wrote {} samples to {}", written.len(), out.display());
    Ok(())
}

fn cmd_export_features(checkpoint: &Path, dataset: &Path, out: &Path) -> CmdResult {
    let device = Device::Cpu;
    let (model, _) = load_checkpoint(checkpoint, &device)?;
    let cfg = model.config().clone();
    let (_, data) = load_tensor_dataset(dataset, &cfg, &device)?;
    // One image per forward pass: f32 matmul results depend on the batch
    // shape, and identical images must export identical rows.
    let rows = extract_features(&model, &data, 1)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(out)?);
    let header: Vec<String> = (0..cfg.feature_dim).map(|i| format!("f{i}")).collect();
    writeln!(w, "{},pitch,yaw,subject", header.join(","))?;
    for ((row, label), subject) in rows.iter().zip(data.labels()).zip(data.subjects()) {
        let values: Vec<String> = row.iter().map(|v| format!("{v:.8}")).collect();
        writeln!(w, "{},{:.6},{:.6},{subject}", values.join(","), label.pitch, label.yaw)?;
    }
    w.flush()?;
    println!("wrote {} feature rows to {}", rows.len(), out.display());
    Ok(())
}
