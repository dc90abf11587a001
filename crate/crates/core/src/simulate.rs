//! Benchmark PDE solutions and a method-of-lines re-solver.
//!
//! Spatial derivatives are pseudo-spectral: a Fourier basis on periodic grids
//! and a sine basis (odd extension) on grids with homogeneous Dirichlet ends.
//! Time stepping is classical RK4 with a step bounded by the stiffness of the
//! explicit part. For first-order problems, constant-coefficient linear terms
//! are integrated exactly through an integrating factor.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{canonical_terms, eval_columns, simplify, BinOp, Expr, Term, TermList};
use crate::field::{Axis, Field};

// ---------------------------------------------------------------------------
// Grids

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    /// `u = 0` at both ends of every spatial axis.
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceAxis {
    pub name: String,
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeAxis {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

impl TimeAxis {
    pub fn values(&self) -> Vec<f64> {
        let h = (self.end - self.start) / (self.count - 1) as f64;
        (0..self.count).map(|i| self.start + h * i as f64).collect()
    }
}

/// Tensor-product grid. Periodic axes exclude `end`; Dirichlet axes include
/// both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub boundary: Boundary,
    pub space: Vec<SpaceAxis>,
    pub time: TimeAxis,
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        if self.space.is_empty() {
            return Err(Error::config("grid needs at least one spatial axis"));
        }
        for (i, a) in self.space.iter().enumerate() {
            let mut chars = a.name.chars();
            let ok = matches!((chars.next(), chars.next()), (Some(c), None) if c.is_ascii_lowercase() && c != 't' && c != 'u');
            if !ok {
                return Err(Error::config(format!(
                    "spatial axis name `{}` must be a single lowercase letter other than t and u",
                    a.name
                )));
            }
            if self.space[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::config(format!("duplicate axis `{}`", a.name)));
            }
            check_extent(&a.name, a.start, a.end, a.count)?;
        }
        check_extent("t", self.time.start, self.time.end, self.time.count)
    }

    pub fn spatial_dims(&self) -> usize {
        self.space.len()
    }

    pub fn space_shape(&self) -> Vec<usize> {
        self.space.iter().map(|a| a.count).collect()
    }

    pub fn space_len(&self) -> usize {
        self.space.iter().map(|a| a.count).product()
    }

    pub fn spacing(&self, d: usize) -> f64 {
        let a = &self.space[d];
        match self.boundary {
            Boundary::Periodic => (a.end - a.start) / a.count as f64,
            Boundary::Dirichlet => (a.end - a.start) / (a.count - 1) as f64,
        }
    }

    pub fn coords(&self, d: usize) -> Vec<f64> {
        let a = &self.space[d];
        let h = self.spacing(d);
        (0..a.count).map(|i| a.start + h * i as f64).collect()
    }

    /// Field axes: the spatial axes followed by `t`.
    pub fn axes(&self) -> Result<Vec<Axis>> {
        let mut axes = self
            .space
            .iter()
            .enumerate()
            .map(|(d, a)| Axis::new(a.name.clone(), self.coords(d)))
            .collect::<Result<Vec<_>>>()?;
        axes.push(Axis::new("t", self.time.values())?);
        Ok(axes)
    }

    /// Grid with half the spacing on every axis, time included. Every point
    /// of `self` is also a point of the result.
    pub fn refined(&self) -> Grid {
        let mut g = self.clone();
        for a in &mut g.space {
            a.count = match self.boundary {
                Boundary::Periodic => 2 * a.count,
                Boundary::Dirichlet => 2 * a.count - 1,
            };
        }
        g.time.count = 2 * self.time.count - 1;
        g
    }

    /// Coordinates of every spatial grid point, row-major.
    fn points(&self) -> Vec<Vec<f64>> {
        let coords: Vec<Vec<f64>> = (0..self.spatial_dims()).map(|d| self.coords(d)).collect();
        let shape = self.space_shape();
        (0..self.space_len())
            .map(|flat| {
                let mut rem = flat;
                let mut p = vec![0.0; shape.len()];
                for d in (0..shape.len()).rev() {
                    p[d] = coords[d][rem % shape[d]];
                    rem /= shape[d];
                }
                p
            })
            .collect()
    }
}

fn check_extent(name: &str, start: f64, end: f64, count: usize) -> Result<()> {
    if count < 3 {
        return Err(Error::config(format!("axis `{name}` needs at least 3 points, got {count}")));
    }
    if !(start.is_finite() && end.is_finite() && start < end) {
        return Err(Error::config(format!("axis `{name}` has an empty or non-finite extent")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Benchmarks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mode {
    /// Wavenumber per spatial axis, in units of π.
    pub k: Vec<f64>,
    pub amp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    /// `exp(-(x - center)^2)` pulse.
    Exp {
        #[serde(default = "default_exp_center")]
        center: f64,
    },
    /// `-sin(2πx / L)` over the axis length `L`.
    Sine,
    /// Gaussian of standard deviation `width`, summed over periodic images
    /// on periodic grids.
    Gaussian { center: f64, width: f64 },
    /// `Σ amp · Π_d sin(k_d π x_d)`; the displacement starts at rest.
    Mode { modes: Vec<Mode> },
}

fn default_exp_center() -> f64 {
    -2.0
}

impl InitialCondition {
    pub fn tag(&self) -> &'static str {
        match self {
            InitialCondition::Exp { .. } => "exp",
            InitialCondition::Sine => "sine",
            InitialCondition::Gaussian { .. } => "gaussian",
            InitialCondition::Mode { .. } => "mode",
        }
    }

    fn value(&self, p: &[f64], grid: &Grid) -> f64 {
        match self {
            InitialCondition::Exp { center } => p.iter().map(|x| (-(x - center).powi(2)).exp()).product(),
            InitialCondition::Sine => {
                -p.iter()
                    .zip(&grid.space)
                    .map(|(x, a)| (2.0 * PI * x / (a.end - a.start)).sin())
                    .product::<f64>()
            }
            InitialCondition::Gaussian { center, width } => p
                .iter()
                .zip(&grid.space)
                .map(|(&x, a)| {
                    let period = (grid.boundary == Boundary::Periodic).then_some(a.end - a.start);
                    gaussian_images(x - center, *width, period)
                })
                .product(),
            InitialCondition::Mode { modes } => modes
                .iter()
                .map(|m| m.amp * m.k.iter().zip(p).map(|(k, x)| (k * PI * x).sin()).product::<f64>())
                .sum(),
        }
    }
}

/// `exp(-d^2 / 2w^2)`, summed over images `d + nL` when `period` is given.
pub(crate) fn gaussian_images(d: f64, width: f64, period: Option<f64>) -> f64 {
    let g = |d: f64| (-0.5 * (d / width).powi(2)).exp();
    match period {
        None => g(d),
        Some(l) => {
            let reach = (12.0 * width / l).ceil() as i64 + 1;
            (-reach..=reach).map(|n| g(d + n as f64 * l)).sum()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Burgers,
    Kdv,
    KleinGordon,
    ConvectionDiffusion,
    ChaffeeInfante,
    Wave2d,
}

impl Benchmark {
    pub const ALL: [Benchmark; 6] = [
        Benchmark::Burgers,
        Benchmark::Kdv,
        Benchmark::KleinGordon,
        Benchmark::ConvectionDiffusion,
        Benchmark::ChaffeeInfante,
        Benchmark::Wave2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Burgers => "burgers",
            Benchmark::Kdv => "kdv",
            Benchmark::KleinGordon => "klein_gordon",
            Benchmark::ConvectionDiffusion => "convection_diffusion",
            Benchmark::ChaffeeInfante => "chaffee_infante",
            Benchmark::Wave2d => "wave2d",
        }
    }

    /// Parameter names with their preset values.
    pub fn default_params(self) -> BTreeMap<String, f64> {
        let pairs: &[(&str, f64)] = match self {
            Benchmark::Burgers => &[("delta", 0.1)],
            Benchmark::Kdv => &[("beta", 0.0025)],
            Benchmark::KleinGordon => &[("c2", 0.5), ("m2", 5.0)],
            Benchmark::ConvectionDiffusion => &[("velocity", 1.0), ("diffusion", 0.25)],
            Benchmark::ChaffeeInfante => &[],
            Benchmark::Wave2d => &[("c", 1.0)],
        };
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }

    /// 1 for `u_t = ...`, 2 for `u_tt = ...`.
    pub fn target_order(self) -> usize {
        match self {
            Benchmark::KleinGordon | Benchmark::Wave2d => 2,
            _ => 1,
        }
    }

    pub fn spatial_dims(self) -> usize {
        match self {
            Benchmark::Wave2d => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Benchmark::ALL.into_iter().find(|b| b.name() == s).ok_or_else(|| {
            let names: Vec<_> = Benchmark::ALL.iter().map(|b| b.name()).collect();
            Error::config(format!("unknown benchmark `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub name: Benchmark,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub ic: InitialCondition,
    pub grid: Grid,
}

fn axis(name: &str, start: f64, end: f64, count: usize) -> SpaceAxis {
    SpaceAxis {
        name: name.into(),
        start,
        end,
        count,
    }
}

fn time(end: f64, count: usize) -> TimeAxis {
    TimeAxis {
        start: 0.0,
        end,
        count,
    }
}

fn modes(list: &[(&[f64], f64)]) -> InitialCondition {
    InitialCondition::Mode {
        modes: list.iter().map(|&(k, amp)| Mode { k: k.to_vec(), amp }).collect(),
    }
}

impl BenchmarkSpec {
    /// The default grid, parameters and initial condition for `name`.
    pub fn preset(name: Benchmark) -> BenchmarkSpec {
        use Boundary::*;
        let (ic, boundary, space, t) = match name {
            Benchmark::Burgers => (
                InitialCondition::Exp { center: -2.0 },
                Periodic,
                vec![axis("x", -8.0, 8.0, 256)],
                time(10.0, 201),
            ),
            Benchmark::Kdv => (InitialCondition::Sine, Periodic, vec![axis("x", -1.0, 1.0, 512)], time(1.0, 201)),
            Benchmark::KleinGordon => (
                modes(&[(&[1.0], 1.0), (&[2.0], 0.5)]),
                Dirichlet,
                vec![axis("x", -1.0, 1.0, 201)],
                time(3.0, 201),
            ),
            Benchmark::ConvectionDiffusion => (
                InitialCondition::Gaussian {
                    center: 0.5,
                    width: 0.15,
                },
                Periodic,
                vec![axis("x", 0.0, 2.0, 256)],
                time(1.0, 100),
            ),
            Benchmark::ChaffeeInfante => (
                modes(&[(&[1.0 / 3.0], 1.0), (&[2.0 / 3.0], 0.5)]),
                Dirichlet,
                vec![axis("x", 0.0, 3.0, 301)],
                time(0.5, 200),
            ),
            Benchmark::Wave2d => (
                modes(&[(&[1.0, 1.0], 1.0), (&[2.0, 1.0], 0.5)]),
                Dirichlet,
                vec![axis("x", 0.0, 1.0, 64), axis("y", 0.0, 1.0, 64)],
                time(1.0, 101),
            ),
        };
        BenchmarkSpec {
            name,
            params: name.default_params(),
            ic,
            grid: Grid {
                boundary,
                space,
                time: t,
            },
        }
    }

    /// Parses `name` or `name:key=value,key=value` into a preset with the
    /// given parameters overridden.
    pub fn parse(text: &str) -> Result<BenchmarkSpec> {
        let (name, rest) = text.split_once(':').unwrap_or((text, ""));
        let mut spec = BenchmarkSpec::preset(name.trim().parse()?);
        for pair in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::config(format!("expected key=value, got `{pair}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("parameter `{}` is not a number", k.trim())))?;
            spec.set_param(k.trim(), v)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// The `name:key=value,...` form accepted by [`BenchmarkSpec::parse`].
    pub fn label(&self) -> String {
        let params: Vec<String> = self.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        if params.is_empty() {
            self.name.to_string()
        } else {
            format!("{}:{}", self.name, params.join(","))
        }
    }

    pub fn set_param(&mut self, key: &str, value: f64) -> Result<()> {
        match self.params.get_mut(key) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(Error::config(format!("{} has no parameter `{key}`", self.name))),
        }
    }

    pub fn param(&self, key: &str) -> f64 {
        self.params[key]
    }

    pub fn validate(&self) -> Result<()> {
        let expected: Vec<String> = self.name.default_params().into_keys().collect();
        let given: Vec<String> = self.params.keys().cloned().collect();
        if expected != given {
            return Err(Error::config(format!(
                "{} takes parameters [{}], got [{}]",
                self.name,
                expected.join(", "),
                given.join(", ")
            )));
        }
        if let Some((k, _)) = self.params.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::config(format!("parameter `{k}` is not finite")));
        }
        self.grid.validate()?;
        if self.grid.spatial_dims() != self.name.spatial_dims() {
            return Err(Error::config(format!(
                "{} needs {} spatial axes, grid has {}",
                self.name,
                self.name.spatial_dims(),
                self.grid.spatial_dims()
            )));
        }
        match &self.ic {
            InitialCondition::Gaussian { width, center } if !(*width > 0.0 && center.is_finite()) => {
                return Err(Error::config("gaussian initial condition needs a positive width"));
            }
            InitialCondition::Exp { center } if !center.is_finite() => {
                return Err(Error::config("exp initial condition needs a finite center"));
            }
            InitialCondition::Mode { modes } => {
                if modes.is_empty() {
                    return Err(Error::config("mode initial condition needs at least one mode"));
                }
                if modes.iter().any(|m| m.k.len() != self.grid.spatial_dims()) {
                    return Err(Error::config("every mode needs one wavenumber per spatial axis"));
                }
            }
            _ => {}
        }
        if self.grid.boundary == Boundary::Dirichlet {
            let u = self.raw_initial_values();
            let scale = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mask = boundary_mask(&self.grid);
            if u.iter().zip(&mask).any(|(v, &inner)| !inner && v.abs() > 1e-8 * scale.max(1e-300)) {
                return Err(Error::config(format!(
                    "{} initial condition does not vanish on the Dirichlet boundary",
                    self.ic.tag()
                )));
            }
        }
        Ok(())
    }

    fn raw_initial_values(&self) -> Vec<f64> {
        self.grid.points().iter().map(|p| self.ic.value(p, &self.grid)).collect()
    }

    /// IC values with Dirichlet boundary nodes set to exactly zero.
    fn initial_values(&self) -> Vec<f64> {
        let mut u = self.raw_initial_values();
        u.iter_mut().zip(boundary_mask(&self.grid)).for_each(|(v, inner)| {
            if !inner {
                *v = 0.0
            }
        });
        u
    }

    /// Initial displacement on the spatial grid (row-major); second-order
    /// benchmarks start at rest.
    pub fn initial_state(&self) -> Result<InitialState> {
        self.validate()?;
        let u = self.initial_values();
        let u_t = (self.name.target_order() == 2).then(|| vec![0.0; u.len()]);
        Ok(InitialState { u, u_t })
    }

    /// The benchmark's true right-hand side.
    pub fn rhs(&self) -> RhsSpec {
        let p = |k: &str| self.params[k];
        let terms: Vec<(f64, &[&str])> = match self.name {
            Benchmark::Burgers => vec![(-1.0, &["u", "u_x"]), (p("delta"), &["u_xx"])],
            Benchmark::Kdv => vec![(-1.0, &["u", "u_x"]), (-p("beta"), &["u_xxx"])],
            Benchmark::KleinGordon => vec![(p("c2"), &["u_xx"]), (-p("m2"), &["u"])],
            Benchmark::ConvectionDiffusion => vec![(-p("velocity"), &["u_x"]), (p("diffusion"), &["u_xx"])],
            Benchmark::ChaffeeInfante => vec![(1.0, &["u_xx"]), (-1.0, &["u"]), (1.0, &["u", "u", "u"])],
            Benchmark::Wave2d => {
                let c2 = p("c") * p("c");
                vec![(c2, &["u_xx"]), (c2, &["u_yy"])]
            }
        };
        let terms = TermList {
            terms: terms
                .into_iter()
                .map(|(coef, m)| Term {
                    coef,
                    monomial: m.iter().map(|s| s.to_string()).collect(),
                })
                .collect(),
        };
        RhsSpec {
            target_order: self.name.target_order(),
            rhs: terms.to_expr(),
        }
    }
}

/// Solves the benchmark on its grid.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Field> {
    generate_benchmark_with(spec, &SolverOptions::default())
}

pub fn generate_benchmark_with(spec: &BenchmarkSpec, opts: &SolverOptions) -> Result<Field> {
    let init = spec.initial_state()?;
    solve_rhs_with(&spec.rhs(), &init, &spec.grid, opts).map_err(|e| match e {
        Error::Divergence(msg) => Error::Simulation(format!("{} reference solution unstable: {msg}", spec.name)),
        e => e,
    })
}

// ---------------------------------------------------------------------------
// Generic solver

/// `∂^order u / ∂t^order = rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhsSpec {
    pub target_order: usize,
    #[serde(with = "crate::expr::expr_text")]
    pub rhs: Expr,
}

impl RhsSpec {
    pub fn new(target_order: usize, rhs: Expr) -> RhsSpec {
        RhsSpec { target_order, rhs }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if !(1..=2).contains(&self.target_order) {
            return Err(Error::config(format!("target order must be 1 or 2, got {}", self.target_order)));
        }
        for v in self.rhs.variables() {
            derivative_of(&v, grid)?;
        }
        Ok(())
    }
}

impl fmt::Display for RhsSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lhs = if self.target_order == 2 { "u_tt" } else { "u_t" };
        write!(f, "{lhs} = {}", self.rhs)
    }
}

/// Displacement (and velocity, for second-order problems) at the first time,
/// row-major over the spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    pub u: Vec<f64>,
    pub u_t: Option<Vec<f64>>,
}

impl InitialState {
    /// Reads the first time slice of `field`. For second-order problems the
    /// velocity is a one-sided second-order difference over the first three
    /// slices.
    pub fn from_field(field: &Field, target_order: usize) -> Result<InitialState> {
        let u = field.time_slice(0);
        let u_t = if target_order == 2 {
            let dt = field.time_axis().spacing()?;
            let (u1, u2) = (field.time_slice(1), field.time_slice(2));
            Some((0..u.len()).map(|i| (-3.0 * u[i] + 4.0 * u1[i] - u2[i]) / (2.0 * dt)).collect())
        } else {
            None
        };
        Ok(InitialState { u, u_t })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Step as a fraction of the inverse stiffness of the explicit part.
    pub courant: f64,
    pub max_steps: usize,
    /// Blow-up threshold as a multiple of the initial range.
    pub divergence_factor: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            courant: 0.5,
            max_steps: 1_000_000,
            divergence_factor: 1e6,
        }
    }
}

/// Forward-solves `rhs` from `init` and samples the solution on `grid`.
pub fn solve_rhs(rhs: &RhsSpec, init: &InitialState, grid: &Grid) -> Result<Field> {
    solve_rhs_with(rhs, init, grid, &SolverOptions::default())
}

pub fn solve_rhs_with(rhs: &RhsSpec, init: &InitialState, grid: &Grid, opts: &SolverOptions) -> Result<Field> {
    let (u, _) = integrate(rhs, init, grid, opts)?;
    let n = grid.space_len();
    let nt = grid.time.count;
    let mut data = vec![0.0; n * nt];
    for (k, snap) in u.chunks(n).enumerate() {
        for (i, v) in snap.iter().enumerate() {
            data[i * nt + k] = *v;
        }
    }
    Field::new(grid.axes()?, data)
}

/// Derivative variable `u`, `u_x`, `u_xx`, ... as (axis, order).
fn derivative_of(name: &str, grid: &Grid) -> Result<(usize, usize)> {
    if name == "u" {
        return Ok((0, 0));
    }
    let unknown = || Error::config(format!("the solver cannot provide variable `{name}`"));
    let s = name.strip_prefix("u_").ok_or_else(unknown)?;
    let c = s.chars().next().ok_or_else(unknown)?;
    if !s.chars().all(|x| x == c) || s.len() > 3 {
        return Err(unknown());
    }
    let d = grid
        .space
        .iter()
        .position(|a| a.name.len() == 1 && a.name.starts_with(c))
        .ok_or_else(unknown)?;
    Ok((d, s.len()))
}

fn boundary_mask(grid: &Grid) -> Vec<bool> {
    let shape = grid.space_shape();
    (0..grid.space_len())
        .map(|flat| {
            if grid.boundary == Boundary::Periodic {
                return true;
            }
            let mut rem = flat;
            for d in (0..shape.len()).rev() {
                let i = rem % shape[d];
                rem /= shape[d];
                if i == 0 || i == shape[d] - 1 {
                    return false;
                }
            }
            true
        })
        .collect()
}

struct SpectralAxis {
    /// Transform index to (grid index, sign); sign 0 pins boundary nodes.
    source: Vec<(usize, f64)>,
    k: Vec<f64>,
    /// Wavenumbers with the Nyquist mode removed, for odd derivatives.
    k_odd: Vec<f64>,
    kmax: f64,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

struct Spectral {
    axes: Vec<SpectralAxis>,
    ext_shape: Vec<usize>,
    /// Extended flat index to (grid flat index, sign).
    gather: Vec<(usize, f64)>,
    /// Grid flat index to extended flat index.
    scatter: Vec<usize>,
    /// Per axis, the transform index of each extended flat position.
    index: Vec<Vec<u32>>,
}

impl Spectral {
    fn new(grid: &Grid) -> Spectral {
        let mut planner = FftPlanner::new();
        let axes: Vec<SpectralAxis> = grid
            .space
            .iter()
            .enumerate()
            .map(|(d, a)| {
                let n = a.count;
                let (m, len, source): (usize, f64, Vec<(usize, f64)>) = match grid.boundary {
                    Boundary::Periodic => (n, a.end - a.start, (0..n).map(|j| (j, 1.0)).collect()),
                    Boundary::Dirichlet => {
                        let m = 2 * (n - 1);
                        let src = (0..m)
                            .map(|j| {
                                if j == 0 || j == n - 1 {
                                    (j, 0.0)
                                } else if j < n {
                                    (j, 1.0)
                                } else {
                                    (m - j, -1.0)
                                }
                            })
                            .collect();
                        (m, 2.0 * (a.end - a.start), src)
                    }
                };
                let base = 2.0 * PI / len;
                let k: Vec<f64> = (0..m)
                    .map(|j| if j <= m / 2 { j as f64 } else { j as f64 - m as f64 } * base)
                    .collect();
                let mut k_odd = k.clone();
                if m % 2 == 0 {
                    k_odd[m / 2] = 0.0;
                }
                SpectralAxis {
                    source,
                    k,
                    k_odd,
                    kmax: PI / grid.spacing(d),
                    fwd: planner.plan_fft_forward(m),
                    inv: planner.plan_fft_inverse(m),
                }
            })
            .collect();
        let ext_shape: Vec<usize> = axes.iter().map(|a| a.k.len()).collect();
        let shape = grid.space_shape();
        let ext_len: usize = ext_shape.iter().product();
        let mut gather = Vec::with_capacity(ext_len);
        let mut index = vec![Vec::with_capacity(ext_len); axes.len()];
        for flat in 0..ext_len {
            let mut rem = flat;
            let mut src = 0;
            let mut stride = 1;
            let mut sign = 1.0;
            for d in (0..axes.len()).rev() {
                let j = rem % ext_shape[d];
                rem /= ext_shape[d];
                index[d].push(j as u32);
                let (i, s) = axes[d].source[j];
                src += i * stride;
                stride *= shape[d];
                sign *= s;
            }
            gather.push((src, sign));
        }
        let scatter = (0..grid.space_len())
            .map(|flat| {
                let mut rem = flat;
                let mut ext = 0;
                let mut stride = 1;
                for d in (0..shape.len()).rev() {
                    ext += (rem % shape[d]) * stride;
                    rem /= shape[d];
                    stride *= ext_shape[d];
                }
                ext
            })
            .collect();
        Spectral {
            axes,
            ext_shape,
            gather,
            scatter,
            index,
        }
    }

    fn transform(&self, c: &mut [Complex64], inverse: bool) {
        for (d, a) in self.axes.iter().enumerate() {
            let n = self.ext_shape[d];
            let stride: usize = self.ext_shape[d + 1..].iter().product();
            let outer: usize = self.ext_shape[..d].iter().product();
            let fft = if inverse { &a.inv } else { &a.fwd };
            if stride == 1 {
                fft.process(c);
                continue;
            }
            let mut lane = vec![Complex64::default(); n];
            for o in 0..outer {
                for s in 0..stride {
                    let base = o * n * stride + s;
                    for i in 0..n {
                        lane[i] = c[base + i * stride];
                    }
                    fft.process(&mut lane);
                    for i in 0..n {
                        c[base + i * stride] = lane[i];
                    }
                }
            }
        }
    }

    fn forward(&self, u: &[f64]) -> Vec<Complex64> {
        let mut c: Vec<Complex64> = self.gather.iter().map(|&(i, s)| Complex64::new(s * u[i], 0.0)).collect();
        self.transform(&mut c, false);
        c
    }

    fn inverse(&self, mut c: Vec<Complex64>) -> Vec<f64> {
        self.transform(&mut c, true);
        let scale = 1.0 / c.len() as f64;
        self.scatter.iter().map(|&e| c[e].re * scale).collect()
    }

    /// `(ik)^order` along axis `d` at extended position `flat`.
    fn ik_pow(&self, d: usize, order: usize, flat: usize) -> Complex64 {
        let j = self.index[d][flat] as usize;
        let a = &self.axes[d];
        let k = if order % 2 == 1 { a.k_odd[j] } else { a.k[j] };
        Complex64::new(0.0, k).powu(order as u32)
    }

    fn derivative(&self, hat: &[Complex64], d: usize, order: usize) -> Vec<f64> {
        let c = hat.iter().enumerate().map(|(i, h)| h * self.ik_pow(d, order, i)).collect();
        self.inverse(c)
    }

    fn multiply(&self, u: &[f64], factor: &[Complex64]) -> Vec<f64> {
        let mut c = self.forward(u);
        c.iter_mut().zip(factor).for_each(|(x, f)| *x *= f);
        self.inverse(c)
    }
}

#[derive(Debug, Clone)]
struct VarRef {
    name: String,
    axis: usize,
    order: usize,
}

/// The right-hand side split into an exactly integrated linear part and an
/// explicit remainder.
struct Operator {
    spectral: Spectral,
    mask: Vec<bool>,
    linear: Vec<(VarRef, f64)>,
    explicit: Expr,
    vars: Vec<VarRef>,
    partials: Vec<Expr>,
    second_order: bool,
}

fn partial(e: &Expr, v: &str) -> Expr {
    match e {
        Expr::Const(_) => Expr::Const(0.0),
        Expr::Var(name) => Expr::Const(if &**name == v { 1.0 } else { 0.0 }),
        Expr::Bin(BinOp::Mul, a, b) => Expr::bin(
            BinOp::Add,
            Expr::bin(BinOp::Mul, partial(a, v), (**b).clone()),
            Expr::bin(BinOp::Mul, (**a).clone(), partial(b, v)),
        ),
        Expr::Bin(op, a, b) => Expr::bin(*op, partial(a, v), partial(b, v)),
    }
}

impl Operator {
    fn new(rhs: &RhsSpec, grid: &Grid) -> Result<Operator> {
        rhs.validate(grid)?;
        let spectral = Spectral::new(grid);
        let second_order = rhs.target_order == 2;
        let var_ref = |name: &str| -> Result<VarRef> {
            let (axis, order) = derivative_of(name, grid)?;
            Ok(VarRef {
                name: name.to_string(),
                axis,
                order,
            })
        };
        let mut linear = Vec::new();
        let mut rest = Vec::new();
        for t in canonical_terms(&rhs.rhs).terms {
            let exact = !second_order && t.monomial.len() == 1 && {
                let v = var_ref(&t.monomial[0])?;
                grid.boundary == Boundary::Periodic || v.order % 2 == 0
            };
            if exact {
                linear.push((var_ref(&t.monomial[0])?, t.coef));
            } else {
                rest.push(t);
            }
        }
        let explicit = simplify(&TermList { terms: rest }.to_expr());
        let vars = explicit
            .variables()
            .iter()
            .map(|v| var_ref(v))
            .collect::<Result<Vec<_>>>()?;
        let partials = vars.iter().map(|v| simplify(&partial(&explicit, &v.name))).collect();
        Ok(Operator {
            spectral,
            mask: boundary_mask(grid),
            linear,
            explicit,
            vars,
            partials,
            second_order,
        })
    }

    fn columns(&self, u: &[f64]) -> Vec<Vec<f64>> {
        let hat = self.vars.iter().any(|v| v.order > 0).then(|| self.spectral.forward(u));
        self.vars
            .iter()
            .map(|v| match &hat {
                Some(h) if v.order > 0 => self.spectral.derivative(h, v.axis, v.order),
                _ => u.to_vec(),
            })
            .collect()
    }

    fn eval(&self, expr: &Expr, cols: &[Vec<f64>], n: usize) -> Vec<f64> {
        let lookup = |name: &str| -> &[f64] {
            let i = self.vars.iter().position(|v| v.name == name).expect("variable resolved");
            &cols[i]
        };
        eval_columns(expr, n, &lookup)
    }

    /// Explicit part at `u`, zeroed on Dirichlet boundary nodes, plus the
    /// stiffness estimate `Σ_j max|∂N/∂v_j| k_max^order_j`.
    fn explicit(&self, u: &[f64], want_stiffness: bool) -> (Vec<f64>, f64) {
        let cols = self.columns(u);
        let mut out = self.eval(&self.explicit, &cols, u.len());
        out.iter_mut().zip(&self.mask).for_each(|(v, &m)| {
            if !m {
                *v = 0.0
            }
        });
        let mut rho = 0.0;
        if want_stiffness {
            for (v, p) in self.vars.iter().zip(&self.partials) {
                let a = self.eval(p, &cols, u.len()).iter().fold(0.0f64, |m, x| m.max(x.abs()));
                rho += a * self.spectral.axes[v.axis].kmax.powi(v.order as i32);
            }
        }
        (out, rho)
    }

    /// `exp(h L)` over the extended spectral grid.
    fn propagator(&self, h: f64) -> Vec<Complex64> {
        let n = self.spectral.gather.len();
        (0..n)
            .map(|i| {
                let l: Complex64 = self
                    .linear
                    .iter()
                    .map(|(v, c)| {
                        if v.order == 0 {
                            Complex64::new(*c, 0.0)
                        } else {
                            self.spectral.ik_pow(v.axis, v.order, i) * c
                        }
                    })
                    .sum();
                (l * h).exp()
            })
            .collect()
    }
}

/// Snapshots of `u` (and `u_t` for second-order problems) at every output
/// time, concatenated.
fn integrate(
    rhs: &RhsSpec,
    init: &InitialState,
    grid: &Grid,
    opts: &SolverOptions,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    grid.validate()?;
    if !(opts.courant > 0.0 && opts.courant.is_finite()) {
        return Err(Error::config("courant number must be positive"));
    }
    let op = Operator::new(rhs, grid)?;
    let n = grid.space_len();
    if init.u.len() != n {
        return Err(Error::domain(format!(
            "initial state has {} values for a grid of {n}",
            init.u.len()
        )));
    }
    let v0 = match (op.second_order, &init.u_t) {
        (true, Some(v)) if v.len() == n => Some(v.clone()),
        (true, _) => return Err(Error::domain("second-order problems need an initial velocity on the grid")),
        (false, _) => None,
    };
    if init.u.iter().chain(v0.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::domain("initial state has non-finite values"));
    }
    let (lo, hi) = init.u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = if hi > lo { hi - lo } else { hi.abs().max(1.0) };
    let limit = opts.divergence_factor * range;

    let times = grid.time.values();
    let mut u = init.u.clone();
    let mut v = v0;
    let mut snaps_u = Vec::with_capacity(n * times.len());
    let mut snaps_v = v.as_ref().map(|_| Vec::with_capacity(n * times.len()));
    snaps_u.extend_from_slice(&u);
    if let (Some(s), Some(v)) = (&mut snaps_v, &v) {
        s.extend_from_slice(v);
    }
    let mut steps = 0usize;
    let mut cached: Option<(f64, Vec<Complex64>, Vec<Complex64>)> = None;
    for w in times.windows(2) {
        let (mut t, t_end) = (w[0], w[1]);
        while t_end - t > 1e-12 * (t_end - w[0]) {
            steps += 1;
            if steps > opts.max_steps {
                return Err(Error::Simulation(format!(
                    "time step budget of {} exhausted at t = {t:.6}",
                    opts.max_steps
                )));
            }
            match &mut v {
                Some(v) => {
                    let (k1u, (k1v, rho)) = (v.clone(), op.explicit(&u, true));
                    let h = step_size(t_end - t, rho.sqrt(), opts.courant);
                    let add = |a: &[f64], b: &[f64], s: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + s * y).collect() };
                    let (u2, v2) = (add(&u, &k1u, h / 2.0), add(v, &k1v, h / 2.0));
                    let (k2u, k2v) = (v2.clone(), op.explicit(&u2, false).0);
                    let (u3, v3) = (add(&u, &k2u, h / 2.0), add(v, &k2v, h / 2.0));
                    let (k3u, k3v) = (v3.clone(), op.explicit(&u3, false).0);
                    let (u4, v4) = (add(&u, &k3u, h), add(v, &k3v, h));
                    let (k4u, k4v) = (v4, op.explicit(&u4, false).0);
                    for i in 0..n {
                        u[i] += h / 6.0 * (k1u[i] + 2.0 * k2u[i] + 2.0 * k3u[i] + k4u[i]);
                        v[i] += h / 6.0 * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i]);
                    }
                    t += h;
                }
                None => {
                    let (k1, rho) = op.explicit(&u, true);
                    let h = step_size(t_end - t, rho, opts.courant);
                    u = if op.linear.is_empty() {
                        rk4_step(&op, &u, k1, h)
                    } else {
                        if cached.as_ref().is_none_or(|(ch, _, _)| *ch != h) {
                            cached = Some((h, op.propagator(h / 2.0), op.propagator(h)));
                        }
                        let (_, half, full) = cached.as_ref().expect("propagator cached");
                        lawson_step(&op, &u, k1, h, half, full)
                    };
                    t += h;
                }
            }
            let peak = u.iter().fold(0.0f64, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) });
            if !(peak <= limit) {
                return Err(Error::Divergence(format!(
                    "solution blew up at t = {t:.6}: max |u| = {peak:.3e} exceeds {limit:.3e}"
                )));
            }
        }
        snaps_u.extend_from_slice(&u);
        if let (Some(s), Some(v)) = (&mut snaps_v, &v) {
            s.extend_from_slice(v);
        }
    }
    Ok((snaps_u, snaps_v))
}

fn step_size(remaining: f64, rho: f64, courant: f64) -> f64 {
    if rho > 0.0 && rho.is_finite() {
        let count = (remaining * rho / courant).ceil().max(1.0);
        remaining / count
    } else {
        remaining
    }
}

fn rk4_step(op: &Operator, u: &[f64], k1: Vec<f64>, h: f64) -> Vec<f64> {
    let add = |s: f64, k: &[f64]| -> Vec<f64> { u.iter().zip(k).map(|(x, y)| x + s * y).collect() };
    let k2 = op.explicit(&add(h / 2.0, &k1), false).0;
    let k3 = op.explicit(&add(h / 2.0, &k2), false).0;
    let k4 = op.explicit(&add(h, &k3), false).0;
    (0..u.len())
        .map(|i| u[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Integrating-factor RK4 for `u' = L u + N(u)` with `half = exp(hL/2)` and
/// `full = exp(hL)`.
fn lawson_step(op: &Operator, u: &[f64], k1: Vec<f64>, h: f64, half: &[Complex64], full: &[Complex64]) -> Vec<f64> {
    let s = &op.spectral;
    let n = u.len();
    let a: Vec<f64> = (0..n).map(|i| u[i] + h / 2.0 * k1[i]).collect();
    let k2 = op.explicit(&s.multiply(&a, half), false).0;
    let eu_half = s.multiply(u, half);
    let b: Vec<f64> = (0..n).map(|i| eu_half[i] + h / 2.0 * k2[i]).collect();
    let k3 = op.explicit(&b, false).0;
    let eu = s.multiply(u, full);
    let ek3 = s.multiply(&k3, half);
    let c: Vec<f64> = (0..n).map(|i| eu[i] + h * ek3[i]).collect();
    let k4 = op.explicit(&c, false).0;
    let ek1 = s.multiply(&k1, full);
    let mid: Vec<f64> = (0..n).map(|i| k2[i] + k3[i]).collect();
    let emid = s.multiply(&mid, half);
    (0..n)
        .map(|i| eu[i] + h / 6.0 * (ek1[i] + 2.0 * emid[i] + k4[i]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    fn line(boundary: Boundary, start: f64, end: f64, count: usize) -> Grid {
        Grid {
            boundary,
            space: vec![axis("x", start, end, count)],
            time: time(1.0, 3),
        }
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn fourier_derivatives_are_exact_for_band_limited_data() {
        let g = line(Boundary::Periodic, -1.0, 1.0, 32);
        let s = Spectral::new(&g);
        let x = g.coords(0);
        let u: Vec<f64> = x.iter().map(|x| (3.0 * PI * x).sin()).collect();
        let hat = s.forward(&u);
        let w = 3.0 * PI;
        let want = [
            x.iter().map(|x| w * (w * x).cos()).collect::<Vec<_>>(),
            x.iter().map(|x| -w * w * (w * x).sin()).collect(),
            x.iter().map(|x| -w.powi(3) * (w * x).cos()).collect(),
        ];
        for (order, want) in (1..=3).zip(want) {
            let got = s.derivative(&hat, 0, order);
            assert!(max_diff(&got, &want) <= 1e-10 * w.powi(order as i32), "order {order}");
        }
    }

    #[test]
    fn sine_basis_keeps_boundaries_and_differentiates() {
        let g = line(Boundary::Dirichlet, 0.0, 2.0, 41);
        let s = Spectral::new(&g);
        let x = g.coords(0);
        let w = 1.5 * PI;
        let u: Vec<f64> = x.iter().map(|x| (w * x).sin()).collect();
        let hat = s.forward(&u);
        let ux = s.derivative(&hat, 0, 1);
        let uxx = s.derivative(&hat, 0, 2);
        let want_x: Vec<f64> = x.iter().map(|x| w * (w * x).cos()).collect();
        let want_xx: Vec<f64> = u.iter().map(|u| -w * w * u).collect();
        assert!(max_diff(&ux, &want_x) <= 1e-9);
        assert!(max_diff(&uxx, &want_xx) <= 1e-9);
        assert!(uxx[0].abs() <= 1e-12 && uxx[40].abs() <= 1e-12);
    }

    #[test]
    fn two_dimensional_transforms_round_trip() {
        let g = Grid {
            boundary: Boundary::Dirichlet,
            space: vec![axis("x", 0.0, 1.0, 9), axis("y", 0.0, 1.0, 7)],
            time: time(1.0, 3),
        };
        let s = Spectral::new(&g);
        let mask = boundary_mask(&g);
        let u: Vec<f64> = (0..g.space_len())
            .zip(&mask)
            .map(|(i, &inner)| if inner { (i as f64 * 0.37).sin() } else { 0.0 })
            .collect();
        assert!(max_diff(&s.inverse(s.forward(&u)), &u) <= 1e-13);
        // d/dy of sin(πx) sin(πy) along the second axis.
        let p = g.points();
        let v: Vec<f64> = p.iter().map(|p| (PI * p[0]).sin() * (PI * p[1]).sin()).collect();
        let vy = s.derivative(&s.forward(&v), 1, 1);
        let want: Vec<f64> = p.iter().map(|p| PI * (PI * p[0]).sin() * (PI * p[1]).cos()).collect();
        assert!(max_diff(&vy, &want) <= 1e-10);
    }

    #[test]
    fn derivative_variables() {
        let g = Grid {
            boundary: Boundary::Periodic,
            space: vec![axis("x", 0.0, 1.0, 8), axis("y", 0.0, 1.0, 8)],
            time: time(1.0, 3),
        };
        assert_eq!(derivative_of("u", &g).unwrap(), (0, 0));
        assert_eq!(derivative_of("u_xxx", &g).unwrap(), (0, 3));
        assert_eq!(derivative_of("u_yy", &g).unwrap(), (1, 2));
        for bad in ["u_xy", "u_z", "u_xxxx", "u_", "w"] {
            assert!(derivative_of(bad, &g).is_err(), "{bad}");
        }
    }

    #[test]
    fn symbolic_partials() {
        let e = parse_expr("u*u*u_x + 3*u_xx - u").unwrap();
        let du = simplify(&partial(&e, "u"));
        assert_eq!(canonical_terms(&du), canonical_terms(&parse_expr("2*u*u_x - 1").unwrap()));
        let dxx = simplify(&partial(&e, "u_xx"));
        assert_eq!(dxx, Expr::Const(3.0));
    }

    #[test]
    fn linear_terms_are_split_off() {
        let rhs = RhsSpec::new(1, parse_expr("-u*u_x + 0.1*u_xx - 2*u_x").unwrap());
        let op = Operator::new(&rhs, &line(Boundary::Periodic, 0.0, 1.0, 16)).unwrap();
        assert_eq!(op.linear.len(), 2);
        assert_eq!(canonical_terms(&op.explicit).monomials(), vec!["u*u_x"]);
        // Odd derivatives have no sine-basis symbol and stay explicit.
        let op = Operator::new(&rhs, &line(Boundary::Dirichlet, 0.0, 1.0, 16)).unwrap();
        assert_eq!(op.linear.len(), 1);
        assert_eq!(canonical_terms(&op.explicit).len(), 2);
        let second = RhsSpec::new(2, parse_expr("u_xx").unwrap());
        assert!(Operator::new(&second, &line(Boundary::Periodic, 0.0, 1.0, 16)).unwrap().linear.is_empty());
    }

    #[test]
    fn step_sizes_land_on_the_interval() {
        assert_eq!(step_size(0.1, 0.0, 0.5), 0.1);
        let h = step_size(0.1, 100.0, 0.5);
        assert!(h <= 0.005 + 1e-15 && (0.1 / h - (0.1 / h).round()).abs() < 1e-9);
    }
}
