use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gradleak::attack::{
    capture_gradients, run_attack, AttackConfig, AttackerPolicy, LabelMode, OptimizerKind,
};
use gradleak::autodiff::{grad_check, Tape};
use gradleak::data::{export_ppm, export_trace_csv, load_cifar10, synth_image, SynthKind};
use gradleak::harness::{
    emit_figures, run_sweep, train_classifier, ExperimentConfig, ImageSource, TrainSettings,
    NUM_CLASSES,
};
use gradleak::nn::build_lenet;
use gradleak::{Error, Tensor};

#[derive(Parser)]
#[command(name = "gradleak", about = "Gradient-inversion attack laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct one image from a captured gradient.
    Attack(AttackArgs),
    /// Dropout-rate sweep over (rate, seed, image) triples.
    Sweep(SweepArgs),
    /// Train the classifier at one dropout rate, report test accuracy.
    Train(TrainArgs),
    /// Verify the autodiff engine against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ImageArgs {
    /// CIFAR-10 binary batch file.
    #[arg(long)]
    cifar: Option<PathBuf>,
    /// Record index within the CIFAR file.
    #[arg(long, default_value_t = 0)]
    image_index: usize,
    /// Synthetic image kind (noise | gradient-ramp | checkerboard).
    #[arg(long)]
    synth: Option<SynthKind>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, default_value_t = 0.0)]
    dropout_rate: f64,
    #[arg(long, default_value_t = 5800)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    image: ImageArgs,
    /// lbfgs | adam
    #[arg(long, default_value = "lbfgs")]
    optimizer: String,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    /// resample | expected | oracle
    #[arg(long, default_value = "resample")]
    mask_policy: String,
    /// extracted | joint
    #[arg(long, default_value = "extracted")]
    label_mode: String,
    /// Project the dummy image onto [0,1] after each step.
    #[arg(long)]
    clamp_pixels: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated dropout rates.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])]
    dropout_rate: Vec<f64>,
    #[arg(long, default_value_t = 5800)]
    iterations: usize,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    seed: Vec<u64>,
    #[arg(long)]
    cifar: Option<PathBuf>,
    /// Record indices within the CIFAR file.
    #[arg(long, value_delimiter = ',')]
    image_index: Vec<usize>,
    #[arg(long)]
    synth: Option<SynthKind>,
    /// Number of synthetic images.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value = "lbfgs")]
    optimizer: String,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long, default_value = "resample")]
    mask_policy: String,
    #[arg(long, default_value = "extracted")]
    label_mode: String,
    #[arg(long)]
    clamp_pixels: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Parallel job bound (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0.0)]
    dropout_rate: f64,
    /// CIFAR-10 training batch file.
    #[arg(long)]
    train: PathBuf,
    /// CIFAR-10 test batch file.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 2000)]
    subset: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    trials: u64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

fn parse_optimizer(name: &str, lr: f64) -> Result<OptimizerKind, Error> {
    match name {
        "lbfgs" => Ok(OptimizerKind::Lbfgs { history: 100, lr }),
        "adam" => Ok(OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
        }),
        other => Err(Error::InvalidArgument(format!(
            "unknown optimizer '{other}' (lbfgs | adam)"
        ))),
    }
}

fn parse_policy(name: &str) -> Result<AttackerPolicy, Error> {
    match name {
        "resample" => Ok(AttackerPolicy::Resample),
        "expected" => Ok(AttackerPolicy::Expected),
        "oracle" => Ok(AttackerPolicy::Oracle),
        other => Err(Error::InvalidArgument(format!(
            "unknown mask policy '{other}' (resample | expected | oracle)"
        ))),
    }
}

fn parse_label_mode(name: &str) -> Result<LabelMode, Error> {
    match name {
        "extracted" => Ok(LabelMode::Extracted),
        "joint" => Ok(LabelMode::JointlyOptimized),
        other => Err(Error::InvalidArgument(format!(
            "unknown label mode '{other}' (extracted | joint)"
        ))),
    }
}

fn load_single_image(args: &ImageArgs, seed: u64) -> Result<(Tensor, usize), Error> {
    match (&args.cifar, args.synth) {
        (Some(path), None) => {
            let rec = load_cifar10(path, args.image_index)?;
            Ok((rec.image, rec.label))
        }
        (None, Some(kind)) => Ok((synth_image(seed, kind), (seed as usize) % NUM_CLASSES)),
        _ => Err(Error::InvalidArgument(
            "exactly one of --cifar or --synth is required".into(),
        )),
    }
}

fn cmd_attack(args: AttackArgs) -> Result<(), Error> {
    let (image, label) = load_single_image(&args.image, args.seed)?;
    let model = build_lenet(NUM_CLASSES, args.dropout_rate, args.seed)?;
    let capture = capture_gradients(&model, &image, label, args.seed)?;
    let config = AttackConfig {
        iterations: args.iterations,
        optimizer: parse_optimizer(&args.optimizer, args.lr)?,
        policy: parse_policy(&args.mask_policy)?,
        label_mode: parse_label_mode(&args.label_mode)?,
        init_seed: args.seed,
        clamp_pixels: args.clamp_pixels,
    };
    let trace = run_attack(&model, &capture, &image, &config)?;
    std::fs::create_dir_all(&args.out)?;
    export_trace_csv(&trace.csv_rows(), &args.out.join("trace.csv"))?;
    export_ppm(&image, &args.out.join("truth.ppm"))?;
    export_ppm(&trace.reconstruction, &args.out.join("reconstruction.ppm"))?;
    println!(
        "label={} (true {}), iterations={}, final_distance={:.6e}, final_rmse={:.4}{}",
        trace.label_used,
        label,
        trace.records.len(),
        trace.final_distance(),
        trace.final_rmse(),
        if trace.diverged { ", diverged" } else { "" }
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Error> {
    let source = match (&args.cifar, args.synth) {
        (Some(path), None) => {
            if args.image_index.is_empty() {
                return Err(Error::InvalidArgument(
                    "--image-index required with --cifar".into(),
                ));
            }
            ImageSource::Cifar {
                path: path.clone(),
                indices: args.image_index.clone(),
            }
        }
        (None, Some(kind)) => ImageSource::Synth {
            kind,
            count: args.count,
        },
        _ => {
            return Err(Error::InvalidArgument(
                "exactly one of --cifar or --synth is required".into(),
            ))
        }
    };
    let config = ExperimentConfig {
        dropout_rates: args.dropout_rate,
        iterations: args.iterations,
        seeds: args.seed,
        source,
        policy: parse_policy(&args.mask_policy)?,
        optimizer: parse_optimizer(&args.optimizer, args.lr)?,
        label_mode: parse_label_mode(&args.label_mode)?,
        clamp_pixels: args.clamp_pixels,
        out_dir: args.out.clone(),
        jobs: args.jobs,
    };
    let report = run_sweep(&config)?;
    emit_figures(&report, &args.out.join("figures"))?;
    for rate in report.rates() {
        println!("rate {rate}: median final RMSE {:.4}", report.median_rmse(rate));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let settings = TrainSettings {
        batch_size: args.batch_size,
        lr: args.lr,
        momentum: args.momentum,
    };
    let acc = train_classifier(
        &args.train,
        &args.test,
        args.dropout_rate,
        args.subset,
        args.epochs,
        args.seed,
        &settings,
    )?;
    println!(
        "dropout_rate={}, subset={}, epochs={}, seed={}: test_accuracy={:.4}",
        args.dropout_rate, args.subset, args.epochs, args.seed, acc
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), Error> {
    use rand::{Rng, SeedableRng};
    let mut worst = 0.0f64;
    for trial in 0..args.trials {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(trial);
        let rows = rng.random_range(2..5);
        let cols = rng.random_range(2..5);
        let x = Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let w = Tensor::new(
            vec![cols, rows],
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let err = grad_check(
            |tape: &Tape, v| {
                let wv = tape.leaf(w.clone());
                v.matmul(&wv, false, false)?.sigmoid()?.square()?.sum()
            },
            &x,
            1e-5,
        )?;
        worst = worst.max(err);
    }
    println!(
        "gradcheck: {} trials, max relative error {:.3e} (tolerance {:.1e})",
        args.trials, worst, args.tolerance
    );
    if worst > args.tolerance {
        return Err(Error::InvalidArgument(format!(
            "gradient check failed: {worst:.3e} > {:.1e}",
            args.tolerance
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Attack(args) => cmd_attack(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Train(args) => cmd_train(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
