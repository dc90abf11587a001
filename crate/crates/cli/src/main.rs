use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evopde::denoise::{denoise, Choice, DenoiseSpec, SavgolConfig};
use evopde::evolve::{discover, EvolveConfig};
use evopde::expr::{canonical_terms, parse_expr};
use evopde::features::{build_feature_table, DerivativeSource, Derivatives, FeatureTable, LibrarySpec};
use evopde::field::{add_noise, read_field, sample_points, write_field};
use evopde::metrics::{coefficient_error, relative_solution_error, TruePde};
use evopde::pipeline::{fit_on_samples, pareto_entries, pareto_json, run_pipeline, run_sweep, write_sweep_csv, ParetoEntry, RunConfig};
use evopde::rng::derive_seed;
use evopde::simulate::{generate_benchmark, BenchmarkSpec, InitialState, RhsSpec};
use evopde::surrogate::{Activation, NetConfig, Surrogate};
use evopde::{Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "evopde", version, about = "Discover PDEs from noisy grid data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a benchmark and write its field
    Generate {
        /// Benchmark spec, e.g. `burgers` or `kdv:beta=0.0025`
        #[arg(long)]
        benchmark: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add Gaussian noise scaled by the field's standard deviation
    Noise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        level: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Savitzky-Golay smoothing with optional (sigma, window) tuning
    Denoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "auto")]
        window: String,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long, default_value = "auto")]
        sigma: String,
    },
    /// Train the surrogate network on sampled grid points
    Fit {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        sample: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        net: NetArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the regression table and write it as CSV
    Features {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "surrogate")]
        source: String,
        /// Network checkpoint, required for the surrogate source
        #[arg(long)]
        net: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        max_order: usize,
        #[arg(long, default_value_t = 1)]
        target_order: usize,
        #[arg(long, default_value_t = 0.5)]
        sample: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Savitzky-Golay window for the savgol source
        #[arg(long, default_value_t = 7)]
        window: usize,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Symbolic search over a feature table; writes the scored Pareto front
    Discover {
        #[arg(long)]
        features: PathBuf,
        /// Name of the target column
        #[arg(long, default_value = "u_t")]
        target: String,
        #[command(flatten)]
        evolve: EvolveArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the selected model of a Pareto front against a known PDE
    Evaluate {
        #[arg(long)]
        pareto: PathBuf,
        /// Benchmark spec of the true equation
        #[arg(long)]
        truth: String,
        /// Reference field on the benchmark grid
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run every stage from a config file
    Pipeline {
        #[command(flatten)]
        run: RunArgs,
        /// Directory for pareto.json, report.json and timings.json
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the effective config as TOML and exit
        #[arg(long)]
        dump_config: bool,
    },
    /// Noise by sample-ratio grid of pipeline runs
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.3, 0.5])]
        noise_levels: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.5, 0.9])]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3])]
        seeds: Vec<u64>,
        /// Heatmap CSV
        #[arg(long)]
        out: PathBuf,
        /// Per-run log with identified equations (JSON)
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

#[derive(Args)]
struct NetArgs {
    #[arg(long, default_value_t = 4)]
    net_depth: usize,
    #[arg(long, default_value_t = 50)]
    net_width: usize,
    #[arg(long, default_value = "sine")]
    activation: String,
    #[arg(long, default_value_t = 3000)]
    epochs: usize,
    #[arg(long, default_value_t = 200)]
    lbfgs_steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

#[derive(Args)]
struct EvolveArgs {
    #[arg(long, default_value_t = 8)]
    populations: usize,
    #[arg(long, default_value_t = 200)]
    pop_size: usize,
    #[arg(long, default_value_t = 40)]
    iterations: usize,
    #[arg(long, default_value_t = 0.005)]
    lambda: f64,
    #[arg(long, default_value_t = 0.2)]
    percentile: f64,
    #[arg(long)]
    parallel: bool,
}

/// Flags that override the matching config keys.
#[derive(Args)]
struct RunArgs {
    /// TOML run config; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    benchmark: Option<String>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    sample: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    populations: Option<usize>,
    #[arg(long)]
    pop_size: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    parallel: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str::<RunConfig>(&text).map_err(|e| Error::config(e.to_string()))?
            }
            None => RunConfig::default(),
        };
        if let Some(b) = &self.benchmark {
            cfg.benchmark = b.clone();
        }
        if let Some(v) = self.noise {
            cfg.noise = v;
        }
        if let Some(v) = self.sample {
            cfg.sample_ratio = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(s) = &self.source {
            cfg.library.source = s.parse()?;
        }
        if let Some(v) = self.populations {
            cfg.evolve.populations = v;
        }
        if let Some(v) = self.pop_size {
            cfg.evolve.pop_size = v;
        }
        if let Some(v) = self.iterations {
            cfg.evolve.iterations = v;
        }
        if let Some(v) = self.percentile {
            cfg.evolve.percentile = v;
        }
        if let Some(v) = self.epochs {
            cfg.network.epochs = v;
        }
        if self.parallel {
            cfg.evolve.parallel = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn choice<T: std::str::FromStr>(text: &str, what: &str) -> Result<Choice<T>> {
    if text == "auto" {
        return Ok(Choice::Auto);
    }
    text.parse()
        .map(Choice::Fixed)
        .map_err(|_| Error::config(format!("{what} must be `auto` or a number, got `{text}`")))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_pareto(path: &Path) -> Result<Vec<ParetoEntry>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct EvaluateReport {
    equation: String,
    truth: String,
    coefficient_error: f64,
    missing: Vec<String>,
    spurious: Vec<evopde::metrics::SpuriousTerm>,
    solution_error: Option<f64>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { benchmark, out } => {
            let spec = BenchmarkSpec::parse(&benchmark)?;
            let field = generate_benchmark(&spec)?;
            write_field(&field, &out)?;
            println!("{} -> {} ({} points)", spec.rhs(), out.display(), field.len());
        }
        Command::Noise { input, level, seed, out } => {
            if !(level >= 0.0 && level.is_finite()) {
                return Err(Error::config(format!("noise level must be nonnegative, got {level}")));
            }
            let field = read_field(&input)?;
            write_field(&add_noise(&field, level, seed)?, &out)?;
        }
        Command::Denoise {
            input,
            out,
            window,
            order,
            sigma,
        } => {
            let spec = DenoiseSpec {
                window: choice(&window, "window")?,
                sigma: choice(&sigma, "sigma")?,
                order,
                ..DenoiseSpec::default()
            };
            spec.validate()?;
            let field = read_field(&input)?;
            let (smooth, tuned) = denoise(&field, &spec)?;
            write_field(&smooth, &out)?;
            println!("window {} sigma {} mse {:.3e}", tuned.window, tuned.sigma, tuned.mse);
        }
        Command::Fit {
            input,
            sample,
            seed,
            net,
            out,
        } => {
            let activation = match net.activation.as_str() {
                "sine" => Activation::Sine,
                "tanh" => Activation::Tanh,
                other => return Err(Error::config(format!("unknown activation `{other}`"))),
            };
            let cfg = NetConfig {
                depth: net.net_depth,
                width: net.net_width,
                activation,
                epochs: net.epochs,
                lbfgs_steps: net.lbfgs_steps,
                learning_rate: net.lr,
                seed: derive_seed(seed, 3),
                ..NetConfig::default()
            };
            cfg.validate()?;
            if !(sample > 0.0 && sample <= 1.0) {
                return Err(Error::config(format!("sample ratio must lie in (0, 1], got {sample}")));
            }
            let field = read_field(&input)?;
            let samples = sample_points(&field, sample, derive_seed(seed, 2))?;
            let (surrogate, report) = fit_on_samples(&field, &samples, &cfg)?;
            surrogate.save(&out)?;
            println!(
                "{} samples, best validation mse {:.3e} (normalized units)",
                samples.len(),
                report.best_validation
            );
        }
        Command::Features {
            input,
            source,
            net,
            max_order,
            target_order,
            sample,
            seed,
            window,
            order,
            out,
        } => {
            let lib = LibrarySpec {
                max_order,
                target_order,
                source: source.parse()?,
            };
            lib.validate()?;
            if !(sample > 0.0 && sample <= 1.0) {
                return Err(Error::config(format!("sample ratio must lie in (0, 1], got {sample}")));
            }
            let surrogate = match (lib.source, &net) {
                (DerivativeSource::Surrogate, Some(p)) => Some(Surrogate::load(p)?),
                (DerivativeSource::Surrogate, None) => {
                    return Err(Error::config("the surrogate source needs --net"));
                }
                _ => None,
            };
            let provider = match (&surrogate, lib.source) {
                (Some(s), _) => Derivatives::Surrogate(s),
                (None, DerivativeSource::Savgol) => {
                    Derivatives::Savgol(SavgolConfig::new(window, order).map_err(|e| Error::config(e.to_string()))?)
                }
                _ => Derivatives::FiniteDiff,
            };
            let field = read_field(&input)?;
            let samples = sample_points(&field, sample, derive_seed(seed, 2))?;
            let table = build_feature_table(&field, &samples, &lib, &provider)?;
            table.write_csv(BufWriter::new(File::create(&out)?))?;
            println!("{} rows ({} dropped)", table.len(), table.dropped());
        }
        Command::Discover {
            features,
            target,
            evolve,
            seed,
            out,
        } => {
            let cfg = EvolveConfig {
                populations: evolve.populations,
                pop_size: evolve.pop_size,
                iterations: evolve.iterations,
                lambda: evolve.lambda,
                percentile: evolve.percentile,
                parallel: evolve.parallel,
                seed: derive_seed(seed, 4),
                ..EvolveConfig::default()
            };
            cfg.validate()?;
            let table = FeatureTable::read_csv(File::open(&features)?, &target)?;
            let found = discover(&table, &cfg)?;
            std::fs::write(&out, pareto_json(&pareto_entries(&found.front, found.selected)))?;
            println!("{} = {}", target, found.model().expr);
        }
        Command::Evaluate {
            pareto,
            truth,
            field,
            report,
        } => {
            let spec = BenchmarkSpec::parse(&truth)?;
            let entries = read_pareto(&pareto)?;
            let chosen = entries
                .iter()
                .find(|e| e.selected)
                .ok_or_else(|| Error::format("pareto file has no selected entry"))?;
            let expr = parse_expr(&chosen.expression)?;
            let terms = canonical_terms(&expr);
            let true_pde = TruePde::from_spec(&spec)?;
            let coef = coefficient_error(&terms, &true_pde);
            let identified = RhsSpec::new(true_pde.target_order, terms.to_expr());
            let solution_error = match field {
                Some(p) => {
                    let reference = read_field(&p)?;
                    let init = InitialState::from_field(&reference, true_pde.target_order)?;
                    Some(relative_solution_error(&identified, &reference, &init, &spec.grid)?)
                }
                None => None,
            };
            println!("{identified}");
            println!("coefficient error {:.4}", coef.error);
            if let Some(e) = solution_error {
                println!("relative solution error {e:.4}%");
            }
            if let Some(p) = report {
                write_json(
                    &p,
                    &EvaluateReport {
                        equation: identified.to_string(),
                        truth: spec.rhs().to_string(),
                        coefficient_error: coef.error,
                        missing: coef.missing,
                        spurious: coef.spurious,
                        solution_error,
                    },
                )?;
            }
        }
        Command::Pipeline { run, out, dump_config } => {
            let cfg = run.resolve()?;
            if dump_config {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            let result = run_pipeline(&cfg)?;
            if let Some(dir) = out {
                result.write(&dir)?;
            }
            let r = &result.report;
            println!("{}", r.selected.equation);
            println!("coefficient error {:.4}", r.coefficient_error());
            match r.solution_error {
                Some(e) => println!("relative solution error {e:.4}%"),
                None => println!(
                    "relative solution error unavailable: {}",
                    r.solution_error_message.as_deref().unwrap_or("")
                ),
            }
        }
        Command::Sweep {
            run,
            noise_levels,
            ratios,
            seeds,
            out,
            log,
        } => {
            let cfg = run.resolve()?;
            let cells = run_sweep(&cfg, &noise_levels, &ratios, &seeds)?;
            write_sweep_csv(&cells, BufWriter::new(File::create(&out)?))?;
            if let Some(p) = log {
                write_json(&p, &cells)?;
            }
            for c in &cells {
                println!("noise {} ratio {}: {:.4} over {} seeds", c.noise, c.samples, c.mean_coef_error, c.n_seeds);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
