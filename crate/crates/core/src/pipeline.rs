//! End-to-end runs: generate, corrupt, denoise, fit, discover, evaluate.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoise::{denoise, DenoiseSpec, SavgolConfig, TunedSavgol};
use crate::error::{Error, Result, Stage, StageExt};
use crate::evolve::{discover, CandidateModel, EvolveConfig};
use crate::expr::canonical_terms;
use crate::features::{build_feature_table, DerivativeSource, Derivatives, LibrarySpec};
use crate::field::{add_noise, sample_points, Field, SampleSet};
use crate::metrics::{coefficient_error, relative_solution_error_with, CoefficientReport, TruePde};
use crate::rng::derive_seed;
use crate::simulate::{generate_benchmark, BenchmarkSpec, RhsSpec, SolverOptions};
use crate::surrogate::{fit_surrogate, NetConfig, Surrogate, TrainReport};

/// Library options; the target order always follows the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LibraryOptions {
    pub max_order: usize,
    pub source: DerivativeSource,
}

impl Default for LibraryOptions {
    fn default() -> Self {
        LibraryOptions {
            max_order: 3,
            source: DerivativeSource::Surrogate,
        }
    }
}

/// Everything a pipeline run depends on. The run seed feeds every random
/// stage through derived streams; `network.seed` and `evolve.seed` are
/// overwritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Benchmark spec string such as `burgers` or `kdv:beta=0.0025`.
    pub benchmark: String,
    pub noise: f64,
    /// Fraction of grid points the surrogate and the feature table see.
    pub sample_ratio: f64,
    pub seed: u64,
    pub denoise: DenoiseSpec,
    pub network: NetConfig,
    pub library: LibraryOptions,
    pub evolve: EvolveConfig,
    /// Step budget when forward-solving the selected model.
    pub eval_max_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            benchmark: "burgers".into(),
            noise: 0.0,
            sample_ratio: 0.5,
            seed: 0,
            denoise: DenoiseSpec::default(),
            network: NetConfig::default(),
            library: LibraryOptions::default(),
            evolve: EvolveConfig {
                percentile: 0.6,
                ..EvolveConfig::default()
            },
            eval_max_steps: 100_000,
        }
    }
}

impl RunConfig {
    pub fn for_benchmark(spec: &str) -> RunConfig {
        RunConfig {
            benchmark: spec.into(),
            ..RunConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn spec(&self) -> Result<BenchmarkSpec> {
        BenchmarkSpec::parse(&self.benchmark)
    }

    pub fn library(&self, spec: &BenchmarkSpec) -> LibrarySpec {
        LibrarySpec {
            max_order: self.library.max_order,
            target_order: spec.name.target_order(),
            source: self.library.source,
        }
    }

    /// Checks everything that can be checked before any computation.
    pub fn validate(&self) -> Result<()> {
        let spec = self.spec()?;
        spec.validate()?;
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(format!("noise level must be nonnegative, got {}", self.noise)));
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(Error::config(format!("sample_ratio must lie in (0, 1], got {}", self.sample_ratio)));
        }
        self.denoise.validate()?;
        self.network.validate()?;
        self.library(&spec).validate()?;
        self.evolve.validate()?;
        Ok(())
    }
}

/// One Pareto-front entry as written to `pareto.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoEntry {
    pub complexity: usize,
    pub loss: f64,
    pub score: f64,
    pub expression: String,
    pub selected: bool,
}

pub fn pareto_entries(front: &[CandidateModel], selected: usize) -> Vec<ParetoEntry> {
    front
        .iter()
        .enumerate()
        .map(|(i, c)| ParetoEntry {
            complexity: c.complexity,
            loss: c.loss,
            score: c.score,
            expression: c.expr.to_string(),
            selected: i == selected,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub monomial: String,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedModel {
    pub equation: String,
    pub expression: String,
    pub complexity: usize,
    pub loss: f64,
    pub score: f64,
    pub terms: Vec<TermReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub benchmark: String,
    pub noise: f64,
    pub sample_ratio: f64,
    pub seed: u64,
    pub savgol: TunedSavgol,
    pub training: Option<TrainReport>,
    pub rows: usize,
    pub dropped_rows: usize,
    pub truth: String,
    pub selected: SelectedModel,
    pub coefficients: CoefficientReport,
    /// Percent relative L2 error of the forward-solved selected model.
    pub solution_error: Option<f64>,
    pub solution_error_message: Option<String>,
}

impl Report {
    pub fn coefficient_error(&self) -> f64 {
        self.coefficients.error
    }

    pub fn exact_structure(&self) -> bool {
        self.coefficients.exact_structure()
    }
}

/// Wall-clock seconds per stage; kept out of [`Report`] so reports are
/// reproducible byte for byte.
pub type Timings = BTreeMap<String, f64>;

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: Report,
    pub pareto: Vec<ParetoEntry>,
    pub timings: Timings,
    pub surrogate: Option<Surrogate>,
}

impl PipelineOutput {
    /// Writes `pareto.json`, `report.json` and `timings.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("pareto.json"), pareto_json(&self.pareto))?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)? + "\n")?;
        std::fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&self.timings)? + "\n")?;
        Ok(())
    }
}

pub fn pareto_json(entries: &[ParetoEntry]) -> String {
    serde_json::to_string_pretty(entries).expect("pareto entries serialize") + "\n"
}

struct Clock(Instant, Timings);

impl Clock {
    fn lap(&mut self, stage: Stage) {
        let now = Instant::now();
        self.1.insert(stage.to_string(), (now - self.0).as_secs_f64());
        self.0 = now;
    }
}

/// Runs every stage. Errors carry the stage they came from.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let library = cfg.library(&spec);
    let mut clock = Clock(Instant::now(), Timings::new());

    let truth = generate_benchmark(&spec).stage(Stage::Generate)?;
    clock.lap(Stage::Generate);
    let noisy = add_noise(&truth, cfg.noise, derive_seed(cfg.seed, 1)).stage(Stage::Noise)?;
    clock.lap(Stage::Noise);
    let (smooth, tuned) = denoise(&noisy, &cfg.denoise).stage(Stage::Denoise)?;
    clock.lap(Stage::Denoise);

    let samples = sample_points(&smooth, cfg.sample_ratio, derive_seed(cfg.seed, 2)).stage(Stage::Fit)?;
    let (surrogate, training) = match library.source {
        DerivativeSource::Surrogate => {
            let net = NetConfig {
                seed: derive_seed(cfg.seed, 3),
                ..cfg.network.clone()
            };
            let (s, r) = fit_on_samples(&smooth, &samples, &net).stage(Stage::Fit)?;
            (Some(s), Some(r))
        }
        _ => (None, None),
    };
    clock.lap(Stage::Fit);

    let provider = match (&surrogate, library.source) {
        (Some(s), _) => Derivatives::Surrogate(s),
        (None, DerivativeSource::Savgol) => {
            Derivatives::Savgol(SavgolConfig::new(tuned.window, cfg.denoise.order).stage(Stage::Features)?)
        }
        _ => Derivatives::FiniteDiff,
    };
    let table = build_feature_table(&smooth, &samples, &library, &provider).stage(Stage::Features)?;
    clock.lap(Stage::Features);

    let evolve = EvolveConfig {
        seed: derive_seed(cfg.seed, 4),
        ..cfg.evolve.clone()
    };
    let found = discover(&table, &evolve).stage(Stage::Discover)?;
    clock.lap(Stage::Discover);

    let model = found.model();
    let true_pde = TruePde::from_spec(&spec).stage(Stage::Evaluate)?;
    let terms = canonical_terms(&model.expr);
    let coefficients = coefficient_error(&terms, &true_pde);
    let identified = RhsSpec::new(library.target_order, terms.to_expr());
    let opts = SolverOptions {
        max_steps: cfg.eval_max_steps,
        ..SolverOptions::default()
    };
    let init = spec.initial_state().stage(Stage::Evaluate)?;
    let (solution_error, solution_error_message) =
        match relative_solution_error_with(&identified, &truth, &init, &spec.grid, &opts) {
            Ok(e) => (Some(e), None),
            Err(e) => (None, Some(e.to_string())),
        };
    clock.lap(Stage::Evaluate);

    let report = Report {
        benchmark: spec.label(),
        noise: cfg.noise,
        sample_ratio: cfg.sample_ratio,
        seed: cfg.seed,
        savgol: tuned,
        training,
        rows: table.len(),
        dropped_rows: table.dropped(),
        truth: spec.rhs().to_string(),
        selected: SelectedModel {
            equation: identified.to_string(),
            expression: model.expr.to_string(),
            complexity: model.complexity,
            loss: model.loss,
            score: model.score,
            terms: terms
                .terms
                .iter()
                .map(|t| TermReport {
                    monomial: t.monomial_string(),
                    coef: t.coef,
                })
                .collect(),
        },
        coefficients,
        solution_error,
        solution_error_message,
    };
    Ok(PipelineOutput {
        report,
        pareto: pareto_entries(&found.front, found.selected),
        timings: clock.1,
        surrogate,
    })
}

/// Fits a surrogate to the field values at the sampled grid points.
pub fn fit_on_samples(field: &Field, samples: &SampleSet, cfg: &NetConfig) -> Result<(Surrogate, TrainReport)> {
    let mut points = Array2::zeros((samples.len(), field.ndim()));
    for (r, &i) in samples.indices.iter().enumerate() {
        for (c, v) in field.coords(i).into_iter().enumerate() {
            points[[r, c]] = v;
        }
    }
    let values: Vec<f64> = samples.indices.iter().map(|&i| field.data()[i]).collect();
    fit_surrogate(points.view(), &values, cfg)
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub seed: u64,
    pub coefficient_error: Option<f64>,
    pub equation: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub noise: f64,
    pub samples: f64,
    /// Mean over the seeds that completed; -1 when none did.
    pub mean_coef_error: f64,
    pub n_seeds: usize,
    pub runs: Vec<SweepRun>,
}

/// Runs `base` for every (noise, sample ratio, seed) combination. Cells are
/// ordered by noise then sample ratio. A failing run is logged in its cell
/// and does not stop the sweep.
pub fn run_sweep(base: &RunConfig, noise_levels: &[f64], ratios: &[f64], seeds: &[u64]) -> Result<Vec<SweepCell>> {
    if noise_levels.is_empty() || ratios.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep grids must be nonempty"));
    }
    base.validate()?;
    let mut noise = noise_levels.to_vec();
    let mut ratio = ratios.to_vec();
    noise.sort_by(f64::total_cmp);
    noise.dedup();
    ratio.sort_by(f64::total_cmp);
    ratio.dedup();
    let mut jobs = Vec::new();
    for &n in &noise {
        for &r in &ratio {
            for &s in seeds {
                let cfg = RunConfig {
                    noise: n,
                    sample_ratio: r,
                    seed: s,
                    ..base.clone()
                };
                cfg.validate()?;
                jobs.push(cfg);
            }
        }
    }
    let runs: Vec<SweepRun> = jobs
        .par_iter()
        .map(|cfg| match run_pipeline(cfg) {
            Ok(out) => SweepRun {
                seed: cfg.seed,
                coefficient_error: Some(out.report.coefficient_error()),
                equation: Some(out.report.selected.equation),
                error: None,
            },
            Err(e) => SweepRun {
                seed: cfg.seed,
                coefficient_error: None,
                equation: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let mut cells = Vec::new();
    let mut runs = runs.into_iter();
    for &n in &noise {
        for &r in &ratio {
            let cell_runs: Vec<SweepRun> = runs.by_ref().take(seeds.len()).collect();
            let ok: Vec<f64> = cell_runs.iter().filter_map(|r| r.coefficient_error).collect();
            cells.push(SweepCell {
                noise: n,
                samples: r,
                mean_coef_error: if ok.is_empty() {
                    -1.0
                } else {
                    ok.iter().sum::<f64>() / ok.len() as f64
                },
                n_seeds: ok.len(),
                runs: cell_runs,
            });
        }
    }
    Ok(cells)
}

/// `noise,samples,mean_coef_error,n_seeds` rows in cell order.
pub fn write_sweep_csv(cells: &[SweepCell], w: impl std::io::Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::format(format!("csv: {e}"));
    out.write_record(["noise", "samples", "mean_coef_error", "n_seeds"]).map_err(err)?;
    for c in cells {
        out.write_record([
            c.noise.to_string(),
            c.samples.to_string(),
            c.mean_coef_error.to_string(),
            c.n_seeds.to_string(),
        ])
        .map_err(err)?;
    }
    out.flush()?;
    Ok(())
}
