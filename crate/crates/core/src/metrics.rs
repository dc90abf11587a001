//! Evaluation against a known PDE: coefficient error and solution error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{canonical_terms, Term, TermList};
use crate::field::Field;
use crate::simulate::{solve_rhs_with, BenchmarkSpec, Grid, InitialState, RhsSpec, SolverOptions};

/// The reference equation `∂ᵏu/∂tᵏ = Σ θᵢ mᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruePde {
    pub target_order: usize,
    pub terms: TermList,
}

impl TruePde {
    pub fn new(target_order: usize, terms: TermList) -> Result<TruePde> {
        if terms.terms.is_empty() {
            return Err(Error::domain("true PDE has no terms"));
        }
        if terms.terms.iter().any(|t| t.coef == 0.0 || !t.coef.is_finite()) {
            return Err(Error::domain("true PDE coefficients must be finite and nonzero"));
        }
        Ok(TruePde { target_order, terms })
    }

    pub fn from_rhs(rhs: &RhsSpec) -> Result<TruePde> {
        TruePde::new(rhs.target_order, canonical_terms(&rhs.rhs))
    }

    pub fn from_spec(spec: &BenchmarkSpec) -> Result<TruePde> {
        TruePde::from_rhs(&spec.rhs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousTerm {
    pub monomial: String,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientReport {
    /// Mean relative coefficient deviation over the true terms.
    pub error: f64,
    /// True terms absent from the identified equation.
    pub missing: Vec<String>,
    /// Identified terms absent from the true equation.
    pub spurious: Vec<SpuriousTerm>,
}

impl CoefficientReport {
    pub fn exact_structure(&self) -> bool {
        self.missing.is_empty() && self.spurious.is_empty()
    }
}

/// `(1/N) Σ |(θᵢ − θᵢ^true) / θᵢ^true|` over the true terms. A missing term
/// counts as relative error 1; extra terms are listed but not averaged in.
pub fn coefficient_error(identified: &TermList, truth: &TruePde) -> CoefficientReport {
    let mut total = 0.0;
    let mut missing = Vec::new();
    for t in &truth.terms.terms {
        match identified.coefficient(&t.monomial) {
            Some(c) => total += ((c - t.coef) / t.coef).abs(),
            None => {
                total += 1.0;
                missing.push(t.monomial_string());
            }
        }
    }
    let spurious = identified
        .terms
        .iter()
        .filter(|t| truth.terms.coefficient(&t.monomial).is_none())
        .map(|t: &Term| SpuriousTerm {
            monomial: t.monomial_string(),
            coef: t.coef,
        })
        .collect();
    CoefficientReport {
        error: total / truth.terms.len() as f64,
        missing,
        spurious,
    }
}

/// `100 · ‖u − u*‖₂ / ‖u*‖₂` where `u` solves the identified equation from
/// `init` on `grid` and `u*` is `truth`.
pub fn relative_solution_error(identified: &RhsSpec, truth: &Field, init: &InitialState, grid: &Grid) -> Result<f64> {
    relative_solution_error_with(identified, truth, init, grid, &SolverOptions::default())
}

pub fn relative_solution_error_with(
    identified: &RhsSpec,
    truth: &Field,
    init: &InitialState,
    grid: &Grid,
    opts: &SolverOptions,
) -> Result<f64> {
    let u = solve_rhs_with(identified, init, grid, opts).map_err(|e| match e {
        Error::Divergence(msg) => Error::Divergence(format!("identified PDE unstable: {msg}")),
        other => other,
    })?;
    if u.len() != truth.len() {
        return Err(Error::domain(format!(
            "solution has {} points but the reference field has {}",
            u.len(),
            truth.len()
        )));
    }
    Ok(relative_l2(u.data(), truth.data()) * 100.0)
}

/// `‖a − b‖₂ / ‖b‖₂`; infinite when `b` is zero and `a` is not.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    if num == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}
