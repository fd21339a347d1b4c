//! Command-line front end: generate synthetic datasets, train the joint
//! detector/segmenter, evaluate checkpoints, and render predictions.
//!
//! Exit codes: 0 on success, 2 for configuration or usage problems, 3 for
//! data problems (missing or malformed files), 4 for numeric failures
//! during training.

mod overlay;
mod runconfig;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segdet::checkpoint;
use segdet::data::{self, Dataset, Sample, SceneSpec};
use segdet::error::{Error, Result};
use segdet::model::Model;
use segdet::trainer::{prepare_split, Trainer};

#[derive(Parser)]
#[command(
    name = "segdet",
    version,
    about = "Joint structure detection and segmentation on desk-scale images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images, masks, manifest).
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and emit a CSV report.
    Eval(EvalArgs),
    /// Run inference and write overlay images plus box records.
    Predict(PredictArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file (defaults apply for anything omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set train.n_det=4.
    /// May be given multiple times; later values win, dedicated flags win
    /// over --set.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory to write the dataset into.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples (overrides data.count).
    #[arg(long)]
    count: Option<usize>,
    /// Fraction of samples that keep masks (overrides data.mask_fraction).
    #[arg(long)]
    mask_fraction: Option<f64>,
    /// Generator seed (overrides data.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite an existing dataset.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory (from gen-data or hand-written).
    #[arg(long)]
    data: PathBuf,
    /// Directory for logs and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Training steps (overrides train.max_steps).
    #[arg(long)]
    steps: Option<u64>,
    /// Run seed (overrides train.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Resume from a checkpoint written by an earlier train run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overwrite the outputs of an earlier run in the same directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Soft-mask binarization threshold.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct PredictArgs {
    /// Dataset directory to run inference on.
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Directory for overlays and box records.
    #[arg(long)]
    out: PathBuf,
    /// Predict only the sample with this id.
    #[arg(long)]
    id: Option<String>,
    /// Soft-mask binarization threshold.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

fn exit_code(error: &Error) -> u8 {
    match error {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Data(_) | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Predict(args) => predict(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut config = runconfig::load(args.config.config.as_deref(), &args.config.sets)?;
    if let Some(count) = args.count {
        config.data.count = count;
    }
    if let Some(fraction) = args.mask_fraction {
        config.data.mask_fraction = fraction;
    }
    if let Some(seed) = args.seed {
        config.data.seed = seed;
    }
    config.validate()?;

    let spec = SceneSpec {
        seed: config.data.seed,
        distractors: config.data.distractors,
        ..SceneSpec::for_size(config.model.segnet.input_size)
    };
    let mut samples = data::generate(&spec, config.data.count)?;
    data::drop_masks(&mut samples, config.data.masked_count());
    let dataset = Dataset::new(samples);
    dataset.save(&args.out, args.force)?;
    runconfig::echo(&config, &args.out.join("generation.toml"))?;
    println!(
        "wrote {} samples ({} with masks) to {}",
        config.data.count,
        config.data.masked_count(),
        args.out.display()
    );
    Ok(())
}

fn check_geometry(config: &segdet::model::ModelConfig, samples: &[Sample]) -> Result<()> {
    let size = config.segnet.input_size;
    let channels = config.segnet.in_channels;
    for s in samples {
        if (s.height, s.width) != (size, size) || s.channels != channels {
            return Err(Error::config(format!(
                "sample {} is {}x{}x{}, but the model expects {channels}x{size}x{size}; \
                 adjust model.segnet or regenerate the data",
                s.id, s.channels, s.height, s.width
            )));
        }
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = runconfig::load(args.config.config.as_deref(), &args.config.sets)?;
    if let Some(steps) = args.steps {
        config.train.max_steps = steps;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    config.validate()?;

    let marker = args.out.join("train_log.csv");
    if marker.exists() && !args.force {
        return Err(Error::usage(format!(
            "{} already holds a run; pass --force to overwrite",
            args.out.display()
        )));
    }
    let dataset = Dataset::load(&args.data)?;
    check_geometry(&config.model, &dataset.samples)?;
    let (train_samples, val_samples) = prepare_split(dataset.samples, &config.train);
    log::info!(
        "training on {} samples, validating on {}",
        train_samples.len(),
        val_samples.len()
    );

    let mut trainer = match &args.resume {
        Some(path) => Trainer::resume(path, config.train.clone(), train_samples)?,
        None => {
            let model = Model::build(&config.model, config.train.seed)?;
            Trainer::new(model, config.train.clone(), train_samples)?
        }
    };
    fs::create_dir_all(&args.out)?;
    runconfig::echo(&config, &args.out.join("config.toml"))?;
    let summary = trainer.fit(&args.out, &val_samples)?;
    println!(
        "trained {} steps; joint loss {:.6}",
        summary.steps_run, summary.final_joint
    );
    println!("log: {}", summary.train_log.display());
    println!("checkpoint: {}", summary.checkpoint.display());
    if let (Some(best), Some(step)) = (&summary.best_checkpoint, summary.best_step) {
        println!("best (step {step}): {}", best.display());
    }
    Ok(())
}

fn load_model_for(path: &Path) -> Result<Model> {
    let (model, _) = checkpoint::load(path)?;
    Ok(model)
}

fn eval(args: EvalArgs) -> Result<()> {
    if !(0.0 < args.threshold && args.threshold < 1.0) {
        return Err(Error::config("threshold must be in (0, 1)"));
    }
    let dataset = Dataset::load(&args.data)?;
    let model = load_model_for(&args.model)?;
    check_geometry(model.config(), &dataset.samples)?;
    let refs: Vec<&Sample> = dataset.samples.iter().collect();
    let report = model.evaluate(&refs, args.threshold)?;
    let csv = report.to_csv();
    match &args.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, &csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    let agg = report.aggregate();
    if let Some(iou) = agg.mean_iou {
        eprintln!("mean mask IoU: {iou:.4}");
    }
    for class in 0..report.classes {
        if let Some(rate) = agg.hit_rate_percent[class] {
            eprintln!("{} hit rate: {rate:.1}%", data::class_name(class));
        }
    }
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    if !(0.0 < args.threshold && args.threshold < 1.0) {
        return Err(Error::config("threshold must be in (0, 1)"));
    }
    let dataset = Dataset::load(&args.data)?;
    let model = load_model_for(&args.model)?;
    check_geometry(model.config(), &dataset.samples)?;
    let selected: Vec<&Sample> = match &args.id {
        Some(id) => {
            let one = dataset
                .samples
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| Error::data(format!("no sample with id {id:?}")))?;
            vec![one]
        }
        None => dataset.samples.iter().collect(),
    };
    fs::create_dir_all(&args.out)?;
    for sample in selected {
        let prediction = model.predict(sample, args.threshold)?;
        let rgb = overlay::render(sample, &prediction.mask, &prediction.boxes);
        let image_path = args.out.join(format!("{}.ppm", sample.id));
        segdet::data::pnm::write(&image_path, sample.width, sample.height, 3, &rgb)?;

        let mut record = format!("id: {}\n", sample.id);
        let mask_pixels = prediction.mask.iter().filter(|v| **v == 1.0).count();
        writeln!(record, "mask_pixels: {mask_pixels}").unwrap();
        for (class, slot) in prediction.boxes.iter().enumerate() {
            let name = data::class_name(class);
            match slot {
                Some(b) => writeln!(
                    record,
                    "{name}: cx={:.2} cy={:.2} w={:.2} h={:.2} confidence={:.4} score={:.4}",
                    b.cx,
                    b.cy,
                    b.w,
                    b.h,
                    b.confidence,
                    b.score(class)
                )
                .unwrap(),
                None => writeln!(record, "{name}: none").unwrap(),
            }
        }
        fs::write(args.out.join(format!("{}.txt", sample.id)), record)?;
        log::info!("wrote {}", image_path.display());
    }
    println!("predictions in {}", args.out.display());
    Ok(())
}
