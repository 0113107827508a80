use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repexit::config::CampaignConfig;
use repexit::experiment::{self, Summary};
use repexit::flow::{self, FlowSettings};
use repexit::predict;
use repexit::{Error, Execution};

mod report;

#[derive(Parser)]
#[command(name = "repexit", version, about = "Exit asymptotics near a repelling equilibrium")]
struct Cli {
    /// Worker threads for simulation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Campaign TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed of the [simulation] block.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print ρ, C, χ±(ξ₀), and μ, c_A per target as JSON.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the ε ladder; write raw samples (JSONL) and a summary (JSON).
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides [output].dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute counts and statistics from a stored campaign.
    Fit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a summary as a table and a log-log SVG plot.
    Report {
        /// Summary JSON written by `simulate`.
        summary: PathBuf,
        /// Directory for the SVG (default: next to the summary).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare numeric and closed-form exits of a linear system as CSV.
    ValidateFlow {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of random interior starts.
        #[arg(long, default_value_t = 1000)]
        points: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Data { .. } => 3,
        Error::UnderPowered(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: Option<usize>) -> Result<(), String> {
    match threads {
        Some(0) => Err("--threads must be positive".into()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string()),
        None => Ok(()),
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(threads: Option<usize>) -> Result<(), String> {
    match threads {
        Some(0) => Err("--threads must be positive".into()),
        _ => Ok(()),
    }
}

fn out_dir(cfg: &CampaignConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.output_dir().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn print_json<T: serde::Serialize>(value: &T) -> repexit::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    writeln!(std::io::stdout(), "{text}").map_err(|e| Error::Io {
        path: "<stdout>".into(),
        source: e,
    })
}

fn run(command: Command) -> repexit::Result<()> {
    let exec = Execution::default();
    match command {
        Command::Predict { cfg } => {
            let config = CampaignConfig::from_path(&cfg.config)?;
            let model = config.model()?;
            let targets = config.targets(&model)?;
            let prediction = predict::predict_all(&model, &targets, &config.predict_settings())?;
            print_json(&prediction)
        }
        Command::Simulate { cfg, out } => {
            let config = CampaignConfig::from_path(&cfg.config)?;
            let plan = config.plan(cfg.seed)?;
            let dir = out_dir(&config, out);
            let (summary, files) =
                experiment::run_campaign(&plan, &dir, config.gzip(), &config.analysis_settings(), exec)?;
            for c in &summary.result.cells {
                eprintln!(
                    "ε = {:<8} trials = {:<10} exits = {:<10} {}",
                    c.epsilon,
                    c.trials,
                    c.exits,
                    if c.is_ok() { "ok" } else { "aborted" }
                );
            }
            println!("{}", files.samples.display());
            println!("{}", files.summary.display());
            Ok(())
        }
        Command::Fit { cfg, out } => {
            let config = CampaignConfig::from_path(&cfg.config)?;
            let plan = config.plan(cfg.seed)?;
            let dir = out_dir(&config, out);
            let path = experiment::summary_path(&dir, &plan.name, &plan.config_hash);
            let summary = experiment::refit(&plan, &path, &config.analysis_settings(), exec)?;
            print_json(&summary.analysis)
        }
        Command::Report { summary, out } => {
            let s: Summary = experiment::read_summary(&summary)?;
            print!("{}", report::table(&s));
            if s.result.cells.is_empty() {
                return Ok(());
            }
            let dir = out
                .or_else(|| summary.parent().map(Path::to_path_buf))
                .unwrap_or_else(|| PathBuf::from("."));
            let stem = experiment::file_stem(&s.result.name, &s.result.config_hash);
            let svg_path = dir.join(format!("{stem}.svg"));
            std::fs::write(&svg_path, report::svg(&s)).map_err(|e| Error::Io {
                path: svg_path.clone(),
                source: e,
            })?;
            println!("plot: {}", svg_path.display());
            Ok(())
        }
        Command::ValidateFlow { cfg, points } => {
            let config = CampaignConfig::from_path(&cfg.config)?;
            let model = config.model()?;
            if !model.system().is_linear() {
                return Err(Error::Invalid("validate-flow needs a linear system".into()));
            }
            let lambdas = &model.system().lambdas;
            let d = model.dim();
            let settings = FlowSettings::default();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed(cfg.seed));
            let mut out = String::new();
            let coords = |p: &str| (1..=d).map(|j| format!("{p}{j}")).collect::<Vec<_>>().join(",");
            out.push_str(&format!("{},{},{},error\n", coords("x"), coords("numeric"), coords("exact")));
            let scale = match model.domain() {
                repexit::Domain::Box { half_width } => vec![*half_width; d],
                repexit::Domain::Ellipsoid { semi_axes } => semi_axes.iter().map(|a| a / (d as f64).sqrt()).collect(),
            };
            let mut written = 0;
            while written < points {
                let x: Vec<f64> = scale.iter().map(|s| rng.random_range(-0.95..0.95) * s).collect();
                if x.iter().all(|v| v.abs() < 1e-3) {
                    continue;
                }
                let numeric = flow::deterministic_exit(&x, &model, &settings)?.exit_point;
                let exact = flow::linear_exit(&x, lambdas, model.domain())
                    .ok_or_else(|| Error::Invalid("closed-form exit failed".into()))?
                    .exit_point;
                let err = numeric
                    .iter()
                    .zip(&exact)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                let join = |v: &[f64]| v.iter().map(|c| format!("{c:.17e}")).collect::<Vec<_>>().join(",");
                out.push_str(&format!("{},{},{},{err:.3e}\n", join(&x), join(&numeric), join(&exact)));
                written += 1;
            }
            std::io::stdout().write_all(out.as_bytes()).map_err(|e| Error::Io {
                path: "<stdout>".into(),
                source: e,
            })
        }
    }
}
