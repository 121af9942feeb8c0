//! Command-line front end: dataset generation, the two training stages,
//! prototype extraction, translation, sampling, evaluation, and checkpoint
//! inspection. Exit codes: 0 success, 1 usage error, 2 runtime fault.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ageflow::checkpoint::Checkpoint;
use ageflow::config::AppConfig;
use ageflow::error::{Error, Result};
use ageflow::numerics::Rng;
use ageflow::pipeline::{evaluate, Pipeline, RecoveredSource, SourceInfo, TranslateMode};
use ageflow::toydata::{dataset_generate, Dataset, GrayImage, Split};
use ageflow::training;

/// The training/inference element type.
type Real = f32;

#[derive(Parser)]
#[command(name = "ageflow", version, about = "Invertible flow-based age-group translation on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset utilities
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Training stages
    Train {
        #[command(subcommand)]
        command: TrainCommand,
    },
    /// Compute prototype latents from a trained flow and attach them
    Prototypes(PrototypesArgs),
    /// Translate one image to a target age group
    Translate(TranslateArgs),
    /// Draw unconditional samples from the trained flow
    Sample(SampleArgs),
    /// Score translations on the held-out split with the analytic oracles
    Eval(EvalArgs),
    /// Checkpoint utilities
    Inspect {
        #[command(subcommand)]
        command: InspectCommand,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Generate a balanced synthetic dataset (PGM files + CSV manifest)
    Gen(DataGenArgs),
}

#[derive(Subcommand)]
enum TrainCommand {
    /// Stage 1: maximum-likelihood flow training
    Glow(TrainGlowArgs),
    /// Stage 2: translator + discriminator in latent space
    Ictm(TrainIctmArgs),
}

#[derive(Subcommand)]
enum InspectCommand {
    /// List the tensors in a checkpoint
    Ckpt(InspectArgs),
}

#[derive(Args)]
struct DataGenArgs {
    /// number of samples; must be a multiple of 8 for balance
    #[arg(long, default_value_t = 800)]
    count: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// output directory
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainGlowArgs {
    /// JSON config; missing keys fall back to defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// dataset manifest CSV
    #[arg(long)]
    data: PathBuf,
    /// checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// overrides the config iteration count
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args)]
struct PrototypesArgs {
    /// stage-1 checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainIctmArgs {
    /// checkpoint with flow + prototypes
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON config overriding the one echoed in the checkpoint
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// input PGM image
    #[arg(long)]
    input: PathBuf,
    /// target age group (0..3)
    #[arg(long)]
    target: usize,
    #[arg(long, default_value = "ictm")]
    mode: String,
    /// output PGM path
    #[arg(long)]
    out: PathBuf,
    /// manipulation scale for the prototype-editing modes
    #[arg(long)]
    s: Option<f64>,
    /// source group for prototype modes (defaults to the age oracle)
    #[arg(long)]
    source: Option<usize>,
    /// source attribute for glow-attr-manip (defaults to the attribute oracle)
    #[arg(long)]
    attr: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 0.7)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// output directory for sample_<i>.pgm files
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "ictm")]
    mode: String,
    /// report CSV path (the table always prints to stdout)
    #[arg(long)]
    out: Option<PathBuf>,
    /// evaluate on this split
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    path: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own help/version output with success status
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<AppConfig> {
    match path {
        Some(p) => AppConfig::load(p),
        None => Ok(AppConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Data { command: DataCommand::Gen(args) } => {
            let manifest = dataset_generate(args.count, args.seed, &args.out)?;
            println!("wrote {} samples, manifest {}", args.count, manifest.display());
            Ok(())
        }

        Command::Train { command: TrainCommand::Glow(args) } => {
            let mut config = load_config(&args.config)?;
            if let Some(seed) = args.seed {
                config.train.seed = seed;
            }
            if let Some(iters) = args.iters {
                config.train.glow_iters = iters;
            }
            let dataset = Dataset::load(&args.data)?;
            let result = training::train_glow::<Real>(&config, &dataset)?;
            if let Some(iter) = result.aborted_at {
                eprintln!("warning: non-finite loss at iteration {iter}; kept last good state");
            }
            let ckpt = training::glow_checkpoint(&result.glow, &config, config.train.glow_iters)?;
            ckpt.save(&args.out)?;
            let log_path = args.out.with_extension("loss.csv");
            std::fs::write(&log_path, &result.csv)?;
            println!("flow checkpoint: {}", args.out.display());
            println!("loss log: {}", log_path.display());
            if let Some(last) = result.csv.lines().last().filter(|l| !l.starts_with("iter")) {
                println!("final: {last}");
            }
            Ok(())
        }

        Command::Prototypes(args) => {
            let ckpt = Checkpoint::<Real>::load(&args.ckpt)?;
            let (glow, config) = training::glow_from_checkpoint(&ckpt)?;
            let dataset = Dataset::load(&args.data)?;
            let seed = args.seed.unwrap_or(config.train.seed);
            let table = training::compute_prototype_stage(&glow, &dataset, seed)?;
            let mut out_ckpt = ckpt;
            training::add_prototypes(&mut out_ckpt, &table)?;
            out_ckpt.save(&args.out)?;
            println!(
                "prototypes for {} cells attached; checkpoint: {}",
                table.populated().count(),
                args.out.display()
            );
            Ok(())
        }

        Command::Train { command: TrainCommand::Ictm(args) } => {
            let ckpt = Checkpoint::<Real>::load(&args.ckpt)?;
            let (glow, mut config) = training::glow_from_checkpoint(&ckpt)?;
            if let Some(path) = &args.config {
                config = AppConfig::load(path)?;
            }
            if let Some(seed) = args.seed {
                config.train.seed = seed;
            }
            if let Some(iters) = args.iters {
                config.train.ictm_iters = iters;
            }
            let prototypes = training::prototypes_from_checkpoint(&ckpt)?;
            let dataset = Dataset::load(&args.data)?;
            let result = training::train_ictm(&config, &glow, &prototypes, &dataset)?;
            let full = training::full_checkpoint(
                &glow,
                &prototypes,
                &result.ictm,
                &result.prior,
                &result.disc,
                &config,
                config.train.ictm_iters,
            )?;
            full.save(&args.out)?;
            let log_path = args.out.with_extension("loss.csv");
            std::fs::write(&log_path, &result.csv)?;
            println!("full checkpoint: {}", args.out.display());
            println!("loss log: {}", log_path.display());
            Ok(())
        }

        Command::Translate(args) => {
            let mode = TranslateMode::parse(&args.mode)?;
            let ckpt = Checkpoint::<Real>::load(&args.ckpt)?;
            let models = training::load_models(&ckpt)?;
            let pipeline = Pipeline::from_models(models);
            let image = GrayImage::load_pgm(&args.input)?;
            let source = SourceInfo { group: args.source, attr: args.attr };
            let out = pipeline.translate(&image, args.target, mode, source, args.s)?;
            out.image.save_pgm(&args.out)?;
            match out.recovered {
                RecoveredSource::Condition(c) => {
                    let flat: Vec<String> = c.flat().iter().map(|v| format!("{v:.4}")).collect();
                    println!("recovered source condition (mu, log_sigma): [{}]", flat.join(", "));
                }
                RecoveredSource::Group(g) => println!("source group: {g}"),
            }
            println!("wrote {}", args.out.display());
            Ok(())
        }

        Command::Sample(args) => {
            let ckpt = Checkpoint::<Real>::load(&args.ckpt)?;
            let (glow, config) = training::glow_from_checkpoint(&ckpt)?;
            std::fs::create_dir_all(&args.out)?;
            let mut rng = Rng::new(args.seed);
            let images = glow.sample(&mut rng, args.temperature, args.count)?;
            let quantized = ageflow::glow::postprocess(&images, config.glow.dequant_bins);
            for i in 0..args.count {
                let one = ageflow::numerics::Tensor::from_vec(
                    &[1, 1, config.glow.height, config.glow.width],
                    quantized.sample(i).to_vec(),
                );
                let img = GrayImage::from_tensor(&one)?;
                img.save_pgm(args.out.join(format!("sample_{i:03}.pgm")))?;
            }
            println!("wrote {} samples to {}", args.count, args.out.display());
            Ok(())
        }

        Command::Eval(args) => {
            let mode = TranslateMode::parse(&args.mode)?;
            let split = match args.split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::invalid(format!("unknown split {other}"))),
            };
            let ckpt = Checkpoint::<Real>::load(&args.ckpt)?;
            let models = training::load_models(&ckpt)?;
            let pipeline = Pipeline::from_models(models);
            let dataset = Dataset::load(&args.data)?;
            let report = evaluate(&pipeline, &dataset, split, mode)?;
            print!("{}", report.table());
            if let Some(path) = args.out {
                std::fs::write(&path, report.to_csv())?;
                println!("report CSV: {}", path.display());
            }
            Ok(())
        }

        Command::Inspect { command: InspectCommand::Ckpt(args) } => {
            let ckpt = Checkpoint::<Real>::load(&args.path)?;
            println!("{} tensors", ckpt.len());
            for (name, t) in ckpt.iter() {
                println!("{:>10} {:?}  {}", format!("{:?}", t.shape()), name, t.len());
            }
            Ok(())
        }
    }
}
