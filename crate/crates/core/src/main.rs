use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gflm_gof::bootstrap::{run_bootstrap, PMode, Scheme};
use gflm_gof::fpca::fit_fpca_full;
use gflm_gof::funcdata::{read_dataset_csv, write_dataset_csv, FunctionalSample, ResponseFamily, ScalarResponse};
use gflm_gof::gflm::{Family, FitOptions, GflmDesign, LambdaChoice};
use gflm_gof::harness::{run_experiment, Example, ExperimentConfig};
use gflm_gof::{GofError, Result};

#[derive(Parser)]
#[command(name = "gflm-gof", version, about = "Goodness-of-fit tests for generalized functional linear models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a data set and write it as CSV.
    Simulate(SimulateArgs),
    /// Fit the null model to a CSV data set and write the fit as JSON.
    Fit(FitArgs),
    /// Run one goodness-of-fit test end to end.
    Test(TestArgs),
    /// Run a Monte Carlo experiment from a JSON config.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ExampleArg {
    Example1,
    Example2,
}

impl From<ExampleArg> for Example {
    fn from(e: ExampleArg) -> Self {
        match e {
            ExampleArg::Example1 => Example::Example1,
            ExampleArg::Example2 => Example::Example2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Gaussian,
    Bernoulli,
    Poisson,
}

impl From<FamilyArg> for ResponseFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Gaussian => ResponseFamily::Gaussian,
            FamilyArg::Bernoulli => ResponseFamily::Bernoulli,
            FamilyArg::Poisson => ResponseFamily::Poisson,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    example: ExampleArg,
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Deviation from the null model.
    #[arg(long, default_value_t = 0.0)]
    a: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// CSV written by `simulate` (header `y,<grid>`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    family: FamilyArg,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// `auto` for GCV or a nonnegative number.
    #[arg(long, default_value = "auto")]
    lambda: String,
    #[arg(long, default_value_t = 20)]
    basis_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    /// Data CSV; when absent, data are simulated from `--example`.
    #[arg(long, requires = "family", conflicts_with = "example")]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    #[arg(long, value_enum)]
    example: Option<ExampleArg>,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0.0)]
    a: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long = "bootstrap-B", default_value_t = 500)]
    bootstrap_b: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// `auto`, `auto:<threshold>` or `fixed:<k>`.
    #[arg(long = "p-mode", default_value = "auto")]
    p_mode: String,
    /// Also write the full result, with replicate statistics, as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long = "bootstrap-B")]
    bootstrap_b: Option<usize>,
    /// Replaces the config's p modes; repeat for several.
    #[arg(long = "p-mode")]
    p_mode: Vec<String>,
    /// JSON report path; the CSV table is written beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &GofError) -> u8 {
    match e {
        GofError::Numerical(_) | GofError::DegenerateSample(_) | GofError::DegeneratePair => 3,
        _ => 2,
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| GofError::Config(format!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn load_data(args: &DataArgs) -> Result<(FunctionalSample, ScalarResponse)> {
    read_dataset_csv(open(&args.data)?, args.family.into())
}

fn parse_lambda(s: &str) -> Result<LambdaChoice> {
    if s == "auto" {
        return Ok(LambdaChoice::Auto);
    }
    match s.parse::<f64>() {
        Ok(l) if l >= 0.0 && l.is_finite() => Ok(LambdaChoice::Fixed(l)),
        _ => Err(GofError::Config(format!("--lambda must be `auto` or a nonnegative number, got {s:?}"))),
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let data = Example::from(args.example).generate(args.n, args.a, &mut rng)?;
    let mut w = create(&args.out)?;
    write_dataset_csv(&data.sample, &data.response, &mut w)?;
    w.flush()?;
    Ok(())
}

fn fit(args: FitArgs) -> Result<()> {
    let (sample, response) = load_data(&args.data)?;
    let family = Family::for_response(response.family());
    let options = FitOptions { basis_size: args.basis_size, ..FitOptions::default() };
    let design = GflmDesign::new(&sample, options)?;
    let fit = design.fit(response.values(), family, parse_lambda(&args.lambda)?)?;
    let json = serde_json::to_string_pretty(&fit.summary(sample.grid()))?;
    match args.out {
        Some(path) => {
            let mut w = create(&path)?;
            writeln!(w, "{json}")?;
            w.flush()?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn test(args: TestArgs) -> Result<()> {
    let p_mode: PMode = args.p_mode.parse()?;
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(GofError::Config(format!("--alpha must be in (0, 1), got {}", args.alpha)));
    }
    let (sample, response) = match (&args.data, args.family, args.example) {
        (Some(path), Some(family), _) => read_dataset_csv(open(path)?, family.into())?,
        (None, _, Some(example)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let d = Example::from(example).generate(args.n, args.a, &mut rng)?;
            (d.sample, d.response)
        }
        _ => return Err(GofError::Config("give either --data with --family, or --example".into())),
    };
    let family = Family::for_response(response.family());
    let scheme = Scheme::for_family(family).map_err(|e| GofError::Config(e.to_string()))?;
    let design = GflmDesign::new(&sample, FitOptions::default())?;
    let fit = design.fit(response.values(), family, LambdaChoice::Auto)?;
    if fit.separated {
        return Err(GofError::Numerical("null fit shows perfect separation".into()));
    }
    let basis = fit_fpca_full(&sample)?;
    let p = p_mode.resolve(&basis)?;
    let run = run_bootstrap(&design, &basis, &fit, scheme, &[p], args.bootstrap_b, args.seed)?;
    let result = run.result(0, args.alpha);
    println!("T_n = {:.6e}", result.t_n);
    println!("p = {}", result.p);
    println!("p_value = {:.4}", result.p_value);
    println!("critical_value = {:.6e}", result.critical_value);
    println!(
        "decision = {} at alpha = {}",
        if result.reject { "reject H0" } else { "do not reject H0" },
        args.alpha
    );
    if let Some(path) = args.out {
        let mut w = create(&path)?;
        writeln!(w, "{}", result.to_json(true)?)?;
        w.flush()?;
    }
    Ok(())
}

fn experiment(args: ExperimentArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(r) = args.reps {
        config.reps = r;
    }
    if let Some(b) = args.bootstrap_b {
        config.b = b;
    }
    if !args.p_mode.is_empty() {
        config.p_modes = args.p_mode.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?;
    }
    if let Some(out) = args.out {
        config.output_path = Some(out);
    }
    config.validate()?;
    let report = run_experiment(&config)?;
    if config.output_path.is_none() {
        report.write_csv(std::io::stdout().lock())?;
    } else if let Some(csv) = config.csv_path() {
        eprintln!("wrote {}", csv.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Test(a) => test(a),
        Command::Experiment(a) => experiment(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
