use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tcnn::data::DatasetKind;
use tcnn::harness::{self, ExperimentConfig, DEFAULT_FILTER_SCALES};
use tcnn::network::Architecture;
use tcnn::noise::{NoiseKind, NoiseSpec};
use tcnn::selftest;
use tcnn::Result;

#[derive(Parser)]
#[command(name = "tcnn", version, about = "Tropical convolutional networks: training and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one architecture and write metrics, checkpoint and manifest
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split, optionally under noise
    Eval(EvalArgs),
    /// Accuracy change of four checkpoints under each noise strategy
    NoiseSweep(SweepArgs),
    /// Apply random MinP-S and MaxP-S kernel banks to an image
    FilterDemo(FilterArgs),
    /// Per-layer operation counts of one forward pass
    Opcount(OpcountArgs),
    /// Oracle equivalence, gradient checks and algebraic identities
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// key = value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// Comma list of noiseN[:sigma] evaluated on the best checkpoint
    #[arg(long)]
    noise: Option<String>,
    /// Write wall_ms = 0 so repeated runs give identical metrics files
    #[arg(long)]
    no_wall_time: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the dataset the checkpoint was trained on
    #[arg(long)]
    dataset: Option<DatasetKind>,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Comma list of noiseN[:sigma]
    #[arg(long)]
    noise: Option<String>,
    /// Noise seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value = "mnist")]
    dataset: DatasetKind,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Holds the training runs; the tables are written here too
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Explicit checkpoints (repeatable); default is the best checkpoint of
    /// each architecture's run for this dataset and seed
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Comma list of noiseN[:sigma]; default noise1,noise2,noise3,noise4
    #[arg(long)]
    noise: Option<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct FilterArgs {
    /// P6 (or P5) input image
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 16)]
    kernel: usize,
    /// Comma list, one output channel per scale
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FILTER_SCALES)]
    scales: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "filter-demo")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct OpcountArgs {
    #[arg(long, default_value = "mnist")]
    dataset: DatasetKind,
    /// Default: all four
    #[arg(long)]
    arch: Option<Architecture>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 1000)]
    cases: usize,
    /// Gradient cases per layer kind
    #[arg(long, default_value_t = 50)]
    grad_cases: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn parse_noise(list: &str, seed: u64) -> Result<Vec<NoiseSpec>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| NoiseSpec::parse(s, seed))
        .collect()
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    let overrides = [
        ("dataset", &args.dataset),
        ("arch", &args.arch),
        ("epochs", &args.epochs),
        ("batch", &args.batch),
        ("lr", &args.lr),
        ("momentum", &args.momentum),
        ("seed", &args.seed),
        ("data_dir", &args.data_dir),
        ("out_dir", &args.out_dir),
        ("noise", &args.noise),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    if args.no_wall_time {
        cfg.train.record_wall_time = false;
    }
    eprintln!("{} on {} (seed {})", cfg.arch, cfg.dataset, cfg.train.seed);
    let report = harness::cmd_train(&cfg, |row| {
        eprintln!(
            "epoch {:>3} {:<5} loss {:.4} accuracy {:.2}% ({} ms)",
            row.epoch,
            row.split,
            row.loss,
            row.accuracy * 100.0,
            row.wall_ms
        )
    })?;
    println!(
        "best test accuracy {:.2}% at epoch {}; wrote {}",
        report.outcome.best_accuracy * 100.0,
        report.outcome.best_epoch,
        report.run_dir.display()
    );
    for (spec, r) in &report.noise {
        println!("{:<12} {:.2}%", spec.label(), r.accuracy() * 100.0);
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let (ck, kind) = harness::load_checkpoint_for(&args.checkpoint, args.dataset)?;
    let (_, test) = kind.load(&args.data_dir)?;
    let noise = parse_noise(args.noise.as_deref().unwrap_or(""), args.seed)?;
    println!(
        "{} on {} ({} test images; checkpoint seed {}, epoch {})",
        ck.network.arch(),
        kind,
        test.len(),
        ck.seed,
        ck.epoch
    );
    for (spec, r) in harness::evaluate_all(&ck.network, &test, &noise)? {
        let label = spec.map_or_else(|| "clean".to_string(), |s| s.label());
        println!("{label:<12} {:.2}% ({}/{})", r.accuracy() * 100.0, r.correct, r.total);
    }
    Ok(())
}

fn noise_sweep(args: SweepArgs) -> Result<()> {
    let specs = match &args.noise {
        Some(list) => parse_noise(list, args.seed)?,
        None => NoiseKind::ALL.iter().map(|&k| NoiseSpec::new(k, args.seed)).collect(),
    };
    let table =
        harness::cmd_noise_sweep(args.dataset, &args.data_dir, &args.out_dir, &args.checkpoint, &specs, args.seed)?;
    print!("{}", table.to_text());
    Ok(())
}

fn filter_demo(args: FilterArgs) -> Result<()> {
    for path in harness::cmd_filter_demo(&args.image, &args.out_dir, args.kernel, &args.scales, args.seed)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn opcount(args: OpcountArgs) -> Result<bool> {
    let archs = args.arch.map_or_else(|| Architecture::ALL.to_vec(), |a| vec![a]);
    let mut ok = true;
    for arch in archs {
        let report = harness::opcount(arch, args.dataset, args.seed)?;
        println!("{}", report.to_text());
        ok &= report.matches();
    }
    Ok(ok)
}

fn run_selftest(args: SelftestArgs) -> bool {
    let mut reports = vec![selftest::oracle_suite(args.cases, args.seed, &selftest::production_forward)];
    reports.extend(selftest::gradient_suite(args.grad_cases, args.seed));
    reports.extend(selftest::property_suites(args.seed));
    let mut ok = true;
    for r in &reports {
        println!("{} {r}", if r.passed() { "PASS" } else { "FAIL" });
        ok &= r.passed();
    }
    ok
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::NoiseSweep(a) => noise_sweep(a).map(|_| true),
        Command::FilterDemo(a) => filter_demo(a).map(|_| true),
        Command::Opcount(a) => opcount(a),
        Command::Selftest(a) => Ok(run_selftest(a)),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
