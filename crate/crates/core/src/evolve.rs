//! Island-model genetic programming over expression trees.
//!
//! Each island evolves its own population by tournament selection, subtree
//! crossover and point mutations. Every offspring is simplified and has its
//! constants refit by L-BFGS. Between generations the islands exchange
//! individuals through a global hall of fame `H` and their per-island
//! memories `M_i`. The final hall of fame is reduced to a Pareto front,
//! scored, and one model is selected.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{random_expr, random_leaf, simplify, BinOp, Expr, DEFAULT_MAX_DEPTH};
use crate::features::FeatureTable;
use crate::optim::{lbfgs, LbfgsConfig};
use crate::rng::{derive_seed, rng_from_seed, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveConfig {
    /// Number of islands `n_k`.
    pub populations: usize,
    /// Individuals per island `L`.
    pub pop_size: usize,
    /// Outer rounds (one generation per island per round).
    pub iterations: usize,
    /// Tournament size `k`.
    pub tournament: usize,
    pub p_mutation: f64,
    pub p_crossover: f64,
    /// Migration probability from the global hall of fame.
    pub alpha_h: f64,
    /// Migration probability from the other islands' memories.
    pub alpha_m: f64,
    /// Complexity penalty in `LE = loss * exp(lambda * complexity)`.
    pub lambda: f64,
    /// Fraction of the front kept by the loss percentile filter.
    pub percentile: f64,
    pub init_complexity: usize,
    pub max_depth: usize,
    pub max_complexity: usize,
    /// Random restarts of the constant optimizer.
    pub restarts: usize,
    pub lbfgs_iterations: usize,
    /// Rows used during the search; 0 uses the whole table.
    pub search_rows: usize,
    /// Run islands on the rayon pool. Results are identical either way.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        EvolveConfig {
            populations: 8,
            pop_size: 200,
            iterations: 40,
            tournament: 10,
            p_mutation: 0.7,
            p_crossover: 0.6,
            alpha_h: 0.05,
            alpha_m: 0.05,
            lambda: 0.005,
            percentile: 0.2,
            init_complexity: 3,
            max_depth: DEFAULT_MAX_DEPTH,
            max_complexity: 17,
            restarts: 2,
            lbfgs_iterations: 40,
            search_rows: 1500,
            parallel: false,
            seed: 0,
        }
    }
}

impl EvolveConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        if self.populations < 1 {
            return Err(Error::config("populations must be at least 1"));
        }
        if self.pop_size < 2 {
            return Err(Error::config("pop_size must be at least 2"));
        }
        if self.tournament < 1 || self.tournament > self.pop_size {
            return Err(Error::config(format!(
                "tournament size must lie in [1, {}], got {}",
                self.pop_size, self.tournament
            )));
        }
        unit("p_mutation", self.p_mutation)?;
        unit("p_crossover", self.p_crossover)?;
        unit("alpha_h", self.alpha_h)?;
        unit("alpha_m", self.alpha_m)?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.percentile > 0.0 && self.percentile <= 1.0) {
            return Err(Error::config(format!("percentile must lie in (0, 1], got {}", self.percentile)));
        }
        if self.init_complexity < 1 || self.max_complexity < self.init_complexity {
            return Err(Error::config("need 1 <= init_complexity <= max_complexity"));
        }
        if self.max_depth < 2 {
            return Err(Error::config("max_depth must be at least 2"));
        }
        Ok(())
    }

    fn allows(&self, e: &Expr) -> bool {
        e.depth() <= self.max_depth && e.complexity() <= self.max_complexity
    }
}

// ---------------------------------------------------------------------------
// Fast evaluation with reverse-mode constant gradients

#[derive(Debug, Clone, Copy)]
enum Slot {
    Const(usize),
    Var(usize),
    Bin(BinOp, usize, usize),
}

/// Post-order program for one expression; the last slot is the root.
struct Tape {
    slots: Vec<Slot>,
    n_consts: usize,
}

enum Val<'a> {
    Scalar(f64),
    Vector(&'a [f64]),
}

impl Val<'_> {
    #[inline]
    fn at(&self, i: usize) -> f64 {
        match self {
            Val::Scalar(c) => *c,
            Val::Vector(v) => v[i],
        }
    }
}

impl Tape {
    fn compile(e: &Expr, names: &[String]) -> Tape {
        fn go(e: &Expr, names: &[String], slots: &mut Vec<Slot>, nc: &mut usize) -> usize {
            let slot = match e {
                Expr::Const(_) => {
                    *nc += 1;
                    Slot::Const(*nc - 1)
                }
                Expr::Var(v) => Slot::Var(names.iter().position(|n| **n == **v).expect("schema checked")),
                Expr::Bin(op, a, b) => {
                    let a = go(a, names, slots, nc);
                    let b = go(b, names, slots, nc);
                    Slot::Bin(*op, a, b)
                }
            };
            slots.push(slot);
            slots.len() - 1
        }
        let mut slots = Vec::new();
        let mut n_consts = 0;
        go(e, names, &mut slots, &mut n_consts);
        Tape { slots, n_consts }
    }

    fn value<'a>(&self, k: usize, consts: &[f64], cols: &'a [Vec<f64>], bufs: &'a [Vec<f64>]) -> Val<'a> {
        match self.slots[k] {
            Slot::Const(c) => Val::Scalar(consts[c]),
            Slot::Var(v) => Val::Vector(&cols[v]),
            Slot::Bin(..) => Val::Vector(&bufs[k]),
        }
    }

    fn forward(&self, consts: &[f64], cols: &[Vec<f64>], n: usize, bufs: &mut Vec<Vec<f64>>) {
        bufs.resize_with(self.slots.len(), Vec::new);
        for k in 0..self.slots.len() {
            if let Slot::Bin(op, a, b) = self.slots[k] {
                let mut out = std::mem::take(&mut bufs[k]);
                out.resize(n, 0.0);
                {
                    let va = self.value(a, consts, cols, bufs);
                    let vb = self.value(b, consts, cols, bufs);
                    match (va, vb) {
                        (Val::Vector(x), Val::Vector(y)) => {
                            for ((o, x), y) in out.iter_mut().zip(x).zip(y) {
                                *o = op.apply(*x, *y);
                            }
                        }
                        (va, vb) => {
                            for (i, o) in out.iter_mut().enumerate() {
                                *o = op.apply(va.at(i), vb.at(i));
                            }
                        }
                    }
                }
                bufs[k] = out;
            }
        }
    }

    /// Mean squared error against `target`; fills `grad` with its gradient
    /// with respect to the constants when given.
    fn loss(
        &self,
        consts: &[f64],
        cols: &[Vec<f64>],
        target: &[f64],
        grad: Option<&mut [f64]>,
        bufs: &mut Vec<Vec<f64>>,
        adj: &mut Vec<Vec<f64>>,
    ) -> f64 {
        let n = target.len();
        self.forward(consts, cols, n, bufs);
        let root = self.slots.len() - 1;
        let pred = self.value(root, consts, cols, bufs);
        let mut sse = 0.0;
        for (i, y) in target.iter().enumerate() {
            let r = pred.at(i) - y;
            sse += r * r;
        }
        let loss = sse / n as f64;
        let Some(grad) = grad else { return loss };
        grad.iter_mut().for_each(|g| *g = 0.0);
        if self.n_consts == 0 {
            return loss;
        }
        adj.resize_with(self.slots.len(), Vec::new);
        for a in adj.iter_mut() {
            a.clear();
        }
        let scale = 2.0 / n as f64;
        adj[root] = (0..n).map(|i| scale * (pred.at(i) - target[i])).collect();
        for k in (0..self.slots.len()).rev() {
            if adj[k].is_empty() {
                continue;
            }
            match self.slots[k] {
                Slot::Const(c) => grad[c] += adj[k].iter().sum::<f64>(),
                Slot::Var(_) => {}
                Slot::Bin(op, a, b) => {
                    let up = std::mem::take(&mut adj[k]);
                    for (child, other, sign) in [(a, b, 1.0), (b, a, if op == BinOp::Sub { -1.0 } else { 1.0 })] {
                        if matches!(self.slots[child], Slot::Var(_)) {
                            continue;
                        }
                        let partial = |i: usize| match op {
                            BinOp::Mul => self.value(other, consts, cols, bufs).at(i),
                            _ => sign,
                        };
                        match self.slots[child] {
                            Slot::Const(c) => {
                                grad[c] += match op {
                                    BinOp::Mul => {
                                        let o = self.value(other, consts, cols, bufs);
                                        up.iter().enumerate().map(|(i, u)| u * o.at(i)).sum::<f64>()
                                    }
                                    _ => sign * up.iter().sum::<f64>(),
                                }
                            }
                            _ => {
                                let dst = &mut adj[child];
                                if dst.is_empty() {
                                    dst.resize(n, 0.0);
                                }
                                if op == BinOp::Mul {
                                    let o = self.value(other, consts, cols, bufs);
                                    for (i, (d, u)) in dst.iter_mut().zip(&up).enumerate() {
                                        *d += u * o.at(i);
                                    }
                                } else {
                                    for (i, (d, u)) in dst.iter_mut().zip(&up).enumerate() {
                                        *d += u * partial(i);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        loss
    }
}

/// Mean squared residual of `e` on `table`; `+inf` if not finite.
pub fn mse(e: &Expr, table: &FeatureTable) -> Result<f64> {
    crate::expr::check_schema(e, table)?;
    let tape = Tape::compile(e, table.names());
    let l = tape.loss(&e.constants(), table.columns(), table.target(), None, &mut Vec::new(), &mut Vec::new());
    Ok(if l.is_finite() { l } else { f64::INFINITY })
}

// ---------------------------------------------------------------------------
// Individuals

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub expr: Expr,
    pub loss: f64,
    pub complexity: usize,
    /// Penalized loss `LE`; lower is fitter.
    pub fitness: f64,
}

impl Individual {
    pub fn new(expr: Expr, loss: f64, lambda: f64) -> Individual {
        let loss = if loss.is_finite() { loss } else { f64::INFINITY };
        let complexity = expr.complexity();
        let fitness = if loss.is_finite() {
            loss * (lambda * complexity as f64).exp()
        } else {
            f64::INFINITY
        };
        Individual {
            expr,
            loss,
            complexity,
            fitness,
        }
    }
}

/// Scores `e` on `table` as-is (no constant fitting).
pub fn fitness(e: &Expr, table: &FeatureTable, lambda: f64) -> Result<Individual> {
    Ok(Individual::new(e.clone(), mse(e, table)?, lambda))
}

/// Index of the tournament winner among `k` distinct uniform draws: lowest
/// fitness, then lowest complexity, then earliest draw.
pub fn tournament_select(pop: &[Individual], k: usize, rng: &mut Rng) -> Result<usize> {
    if pop.is_empty() {
        return Err(Error::domain("tournament over an empty population"));
    }
    let k = k.clamp(1, pop.len());
    let draws = index::sample(rng, pop.len(), k);
    let mut best = draws.index(0);
    for i in draws.iter().skip(1) {
        let (a, b) = (&pop[i], &pop[best]);
        if a.fitness < b.fitness || (a.fitness == b.fitness && a.complexity < b.complexity) {
            best = i;
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Variation operators

fn jitter(e: &Expr, rng: &mut Rng) -> Option<Expr> {
    let mut consts = e.constants();
    if consts.is_empty() {
        return None;
    }
    let i = rng.random_range(0..consts.len());
    let g: f64 = StandardNormal.sample(rng);
    if rng.random_bool(0.5) {
        consts[i] *= 1.0 + 0.1 * g;
    } else {
        consts[i] += 0.1 * g;
    }
    Some(e.with_constants(&consts))
}

fn node_indices(e: &Expr, pred: impl Fn(&Expr) -> bool) -> Vec<usize> {
    (0..e.complexity()).filter(|&i| pred(e.subtree(i))).collect()
}

fn pick(v: &[usize], rng: &mut Rng) -> Option<usize> {
    (!v.is_empty()).then(|| v[rng.random_range(0..v.len())])
}

fn random_op(rng: &mut Rng) -> BinOp {
    BinOp::ALL[rng.random_range(0..BinOp::ALL.len())]
}

fn delete_node(e: &Expr, rng: &mut Rng) -> Option<Expr> {
    let i = pick(&node_indices(e, |n| matches!(n, Expr::Bin(..))), rng)?;
    let Expr::Bin(_, a, b) = e.subtree(i) else { unreachable!() };
    let keep = if rng.random_bool(0.5) { a } else { b };
    Some(e.replace(i, (**keep).clone()))
}

/// Applies one uniformly chosen mutation. Trees without variables only get
/// constant jitter. A result that breaks the depth or size caps is retried
/// as a node deletion, then as a jitter, and finally left unchanged.
pub fn mutate(e: &Expr, vars: &[String], cfg: &EvolveConfig, rng: &mut Rng) -> Expr {
    if !e.has_variables() {
        return jitter(e, rng).unwrap_or_else(|| e.clone());
    }
    let kind = rng.random_range(0..6);
    let out = match kind {
        0 => jitter(e, rng),
        1 => pick(&node_indices(e, |n| matches!(n, Expr::Bin(..))), rng).map(|i| {
            let Expr::Bin(op, a, b) = e.subtree(i) else { unreachable!() };
            let others: Vec<BinOp> = BinOp::ALL.into_iter().filter(|o| o != op).collect();
            let new_op = others[rng.random_range(0..others.len())];
            e.replace(i, Expr::Bin(new_op, a.clone(), b.clone()))
        }),
        2 => pick(&node_indices(e, |n| !matches!(n, Expr::Bin(..))), rng).map(|i| {
            let leaf = match e.subtree(i) {
                Expr::Var(v) if vars.len() > 1 && rng.random_bool(0.5) => {
                    let others: Vec<&String> = vars.iter().filter(|n| n.as_str() != &**v).collect();
                    Expr::var(others[rng.random_range(0..others.len())])
                }
                Expr::Var(_) => Expr::Const(rng.random_range(-2.0..2.0)),
                _ if vars.is_empty() => Expr::Const(rng.random_range(-2.0..2.0)),
                _ => Expr::var(&vars[rng.random_range(0..vars.len())]),
            };
            e.replace(i, leaf)
        }),
        3 => {
            let i = rng.random_range(0..e.complexity());
            Some(e.replace(i, random_expr(3, vars, rng)))
        }
        4 => {
            let i = rng.random_range(0..e.complexity());
            let sub = e.subtree(i).clone();
            let leaf = random_leaf(vars, rng);
            let op = random_op(rng);
            let wrapped = if rng.random_bool(0.5) {
                Expr::bin(op, sub, leaf)
            } else {
                Expr::bin(op, leaf, sub)
            };
            Some(e.replace(i, wrapped))
        }
        _ => delete_node(e, rng),
    };
    let out = out.or_else(|| jitter(e, rng)).unwrap_or_else(|| e.clone());
    if cfg.allows(&out) {
        return out;
    }
    if let Some(d) = delete_node(e, rng).filter(|d| cfg.allows(d)) {
        return d;
    }
    jitter(e, rng).filter(|j| cfg.allows(j)).unwrap_or_else(|| e.clone())
}

/// Swaps the subtree of `a` at pre-order position `i` with that of `b` at `j`.
pub fn crossover_at(a: &Expr, b: &Expr, i: usize, j: usize) -> (Expr, Expr) {
    (a.replace(i, b.subtree(j).clone()), b.replace(j, a.subtree(i).clone()))
}

/// Subtree crossover at uniformly chosen nodes. A child that breaks the caps
/// is replaced by its parent.
pub fn crossover(a: &Expr, b: &Expr, cfg: &EvolveConfig, rng: &mut Rng) -> (Expr, Expr) {
    let i = rng.random_range(0..a.complexity());
    let j = rng.random_range(0..b.complexity());
    let (c1, c2) = crossover_at(a, b, i, j);
    (
        if cfg.allows(&c1) { c1 } else { a.clone() },
        if cfg.allows(&c2) { c2 } else { b.clone() },
    )
}

// ---------------------------------------------------------------------------
// Constant optimization

#[derive(Debug, Clone, Copy)]
pub struct ConstantFit {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for ConstantFit {
    fn default() -> Self {
        ConstantFit {
            restarts: 2,
            max_iter: 100,
        }
    }
}

/// Refits the constants of `e` by L-BFGS from its current values and from
/// `opts.restarts` perturbed starts. Returns the best expression and its
/// loss, never worse than the input.
pub fn optimize_constants_with(e: &Expr, table: &FeatureTable, opts: ConstantFit, rng: &mut Rng) -> Result<(Expr, f64)> {
    crate::expr::check_schema(e, table)?;
    Ok(fit_constants(e, table, opts, rng))
}

fn fit_constants(e: &Expr, table: &FeatureTable, opts: ConstantFit, rng: &mut Rng) -> (Expr, f64) {
    let tape = Tape::compile(e, table.names());
    let c0 = e.constants();
    let mut bufs = Vec::new();
    let mut adj = Vec::new();
    let base = tape.loss(&c0, table.columns(), table.target(), None, &mut bufs, &mut adj);
    let base = if base.is_finite() { base } else { f64::INFINITY };
    if c0.is_empty() {
        return (e.clone(), base);
    }
    let cfg = LbfgsConfig {
        max_iter: opts.max_iter,
        history: 8,
        grad_tol: 0.0,
        f_tol: 1e-12,
    };
    let mut best = (c0.clone(), base);
    for attempt in 0..=opts.restarts {
        let start: Vec<f64> = if attempt == 0 {
            c0.clone()
        } else {
            c0.iter()
                .map(|c| {
                    let g: f64 = StandardNormal.sample(rng);
                    c * (1.0 + 0.5 * g) + 0.1 * g
                })
                .collect()
        };
        let mut obj = |x: &[f64], g: &mut [f64]| tape.loss(x, table.columns(), table.target(), Some(g), &mut bufs, &mut adj);
        let m = lbfgs(&mut obj, start, &cfg);
        if m.f.is_finite() && m.f < best.1 && m.x.iter().all(|v| v.is_finite()) {
            best = (m.x, m.f);
        }
    }
    (e.with_constants(&best.0), best.1)
}

/// Refits the constants of `e` with default settings and a fixed seed.
pub fn optimize_constants(e: &Expr, table: &FeatureTable) -> Result<Expr> {
    let mut rng = rng_from_seed(0);
    optimize_constants_with(e, table, ConstantFit::default(), &mut rng).map(|(e, _)| e)
}

/// Text of `e` with every constant replaced by `c`, identifying trees that
/// differ only in their constants.
fn structure_key(e: &Expr) -> String {
    fn go(e: &Expr, out: &mut String) {
        match e {
            Expr::Const(_) => out.push('c'),
            Expr::Var(v) => out.push_str(v),
            Expr::Bin(op, a, b) => {
                out.push('(');
                go(a, out);
                out.push(match op {
                    BinOp::Add => '+',
                    BinOp::Sub => '-',
                    BinOp::Mul => '*',
                });
                go(b, out);
                out.push(')');
            }
        }
    }
    let mut s = String::new();
    go(e, &mut s);
    s
}

/// Per-island evaluation state: a cache from tree structure to its fitted
/// constants, so identical structures are optimized once per island.
#[derive(Default)]
struct Evaluator {
    cache: HashMap<String, (Vec<f64>, f64)>,
    evaluations: usize,
}

impl Evaluator {
    fn evaluate(&mut self, e: Expr, table: &FeatureTable, cfg: &EvolveConfig, rng: &mut Rng) -> Individual {
        let e = simplify(&e);
        let key = structure_key(&e);
        if let Some((consts, loss)) = self.cache.get(&key) {
            return Individual::new(e.with_constants(consts), *loss, cfg.lambda);
        }
        self.evaluations += 1;
        let opts = ConstantFit {
            restarts: cfg.restarts,
            max_iter: cfg.lbfgs_iterations,
        };
        let (fitted, loss) = fit_constants(&e, table, opts, rng);
        self.cache.insert(key, (fitted.constants(), loss));
        Individual::new(fitted, loss, cfg.lambda)
    }
}

// ---------------------------------------------------------------------------
// Generations

/// Keeps the `size` fittest of `candidates`, preferring distinct expressions;
/// duplicates only fill remaining places.
fn survivors(mut candidates: Vec<Individual>, size: usize) -> Vec<Individual> {
    candidates.sort_by(|a, b| {
        a.fitness
            .total_cmp(&b.fitness)
            .then(a.complexity.cmp(&b.complexity))
    });
    let mut seen: Vec<&Expr> = Vec::new();
    let mut keep = Vec::with_capacity(size);
    let mut spare = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        if keep.len() == size {
            break;
        }
        if seen.contains(&&c.expr) {
            spare.push(i);
        } else {
            seen.push(&c.expr);
            keep.push(i);
        }
    }
    keep.extend(spare.into_iter().take(size - keep.len()));
    keep.sort_unstable();
    let mut out: Vec<Individual> = Vec::with_capacity(size);
    let mut it = keep.into_iter().peekable();
    for (i, c) in candidates.into_iter().enumerate() {
        if it.peek() == Some(&i) {
            out.push(c);
            it.next();
        }
    }
    out
}

fn generation(
    pop: Vec<Individual>,
    table: &FeatureTable,
    cfg: &EvolveConfig,
    rng: &mut Rng,
    eval: &mut Evaluator,
    seen: &mut dyn FnMut(&Individual),
) -> Vec<Individual> {
    let vars = table.names();
    let target = pop.len();
    let mut offspring: Vec<Individual> = Vec::with_capacity(target + 1);
    while offspring.len() < target {
        let i = tournament_select(&pop, cfg.tournament, rng).expect("nonempty population");
        let mut children: Vec<(Expr, Option<usize>)> = if rng.random_bool(cfg.p_crossover) {
            let j = tournament_select(&pop, cfg.tournament, rng).expect("nonempty population");
            let (a, b) = crossover(&pop[i].expr, &pop[j].expr, cfg, rng);
            vec![(a, None), (b, None)]
        } else {
            vec![(pop[i].expr.clone(), Some(i))]
        };
        for (child, parent) in children.iter_mut() {
            if rng.random_bool(cfg.p_mutation) {
                *child = mutate(child, vars, cfg, rng);
                *parent = None;
            }
        }
        for (child, parent) in children {
            if offspring.len() == target {
                break;
            }
            let ind = match parent {
                // Unchanged copy: already simplified and fitted.
                Some(p) => pop[p].clone(),
                None => {
                    let ind = eval.evaluate(child, table, cfg, rng);
                    seen(&ind);
                    ind
                }
            };
            offspring.push(ind);
        }
    }
    let mut all = pop;
    all.extend(offspring);
    survivors(all, target)
}

/// One elitist generation: `|pop|` offspring from tournament selection,
/// crossover and mutation, each simplified and constant-fitted; the next
/// population is the fittest `|pop|` of parents and offspring.
pub fn evolve_population(pop: Vec<Individual>, table: &FeatureTable, cfg: &EvolveConfig, rng: &mut Rng) -> Vec<Individual> {
    let mut eval = Evaluator::default();
    generation(pop, table, cfg, rng, &mut eval, &mut |_| {})
}

// ---------------------------------------------------------------------------
// Hall of fame and the island loop

/// Lowest-loss individual seen at each complexity.
#[derive(Debug, Clone, Default)]
pub struct HallOfFame {
    entries: BTreeMap<usize, Individual>,
}

impl HallOfFame {
    /// Records `ind` if it beats the current entry at its complexity.
    pub fn submit(&mut self, ind: &Individual) -> bool {
        if !ind.loss.is_finite() {
            return false;
        }
        match self.entries.get(&ind.complexity) {
            Some(cur) if cur.loss <= ind.loss => false,
            _ => {
                self.entries.insert(ind.complexity, ind.clone());
                true
            }
        }
    }

    pub fn merge(&mut self, other: &HallOfFame) {
        for ind in other.entries.values() {
            self.submit(ind);
        }
    }

    pub fn get(&self, complexity: usize) -> Option<&Individual> {
        self.entries.get(&complexity)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Individual> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn random(&self, rng: &mut Rng) -> Option<&Individual> {
        if self.entries.is_empty() {
            return None;
        }
        self.entries.values().nth(rng.random_range(0..self.entries.len()))
    }
}

/// Output of [`run_search`].
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub hall_of_fame: HallOfFame,
    /// Hall of fame after each round (index 0 is the initial state).
    pub history: Vec<HallOfFame>,
    /// Minimum loss per complexity over every individual evaluated, tracked
    /// independently of the hall of fame.
    pub audit: BTreeMap<usize, f64>,
    /// Constant optimizations performed (cache misses).
    pub evaluations: usize,
    /// Rows of the input table the search ran on.
    pub rows: Vec<usize>,
}

struct Island {
    pop: Vec<Individual>,
    memory: HallOfFame,
    rng: Rng,
    eval: Evaluator,
    audit: BTreeMap<usize, f64>,
}

impl Island {
    fn record(memory: &mut HallOfFame, audit: &mut BTreeMap<usize, f64>, ind: &Individual) {
        memory.submit(ind);
        if ind.loss.is_finite() {
            let a = audit.entry(ind.complexity).or_insert(f64::INFINITY);
            *a = a.min(ind.loss);
        }
    }

    fn step(&mut self, table: &FeatureTable, cfg: &EvolveConfig) {
        let pop = std::mem::take(&mut self.pop);
        let (memory, audit) = (&mut self.memory, &mut self.audit);
        self.pop = generation(pop, table, cfg, &mut self.rng, &mut self.eval, &mut |ind| {
            Island::record(memory, audit, ind)
        });
    }

    fn migrate(&mut self, hof: &HallOfFame, others: &[&HallOfFame], cfg: &EvolveConfig) {
        let pooled: Vec<&Individual> = others.iter().flat_map(|m| m.iter()).collect();
        for slot in self.pop.iter_mut() {
            if rng_bool(&mut self.rng, cfg.alpha_h) {
                if let Some(m) = hof.random(&mut self.rng) {
                    *slot = m.clone();
                }
            } else if rng_bool(&mut self.rng, cfg.alpha_m) && !pooled.is_empty() {
                *slot = pooled[self.rng.random_range(0..pooled.len())].clone();
            }
        }
    }
}

fn rng_bool(rng: &mut Rng, p: f64) -> bool {
    p > 0.0 && rng.random_bool(p)
}

/// Rows used by the search: all of them, or a seeded uniform subset.
pub fn search_rows(n: usize, cfg: &EvolveConfig) -> Vec<usize> {
    if cfg.search_rows == 0 || cfg.search_rows >= n {
        return (0..n).collect();
    }
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0));
    let mut rows = index::sample(&mut rng, n, cfg.search_rows).into_vec();
    rows.sort_unstable();
    rows
}

/// Runs the island model and returns the final hall of fame (losses on the
/// search rows).
pub fn run_search(table: &FeatureTable, cfg: &EvolveConfig) -> Result<SearchResult> {
    cfg.validate()?;
    if table.is_empty() {
        return Err(Error::EmptyTable { dropped: table.dropped() });
    }
    let rows = search_rows(table.len(), cfg);
    let sub = if rows.len() == table.len() { table.clone() } else { table.subset(&rows) };
    let vars = sub.names().to_vec();

    let mut islands: Vec<Island> = (0..cfg.populations)
        .map(|i| Island {
            pop: Vec::new(),
            memory: HallOfFame::default(),
            rng: rng_from_seed(derive_seed(cfg.seed, i as u64 + 1)),
            eval: Evaluator::default(),
            audit: BTreeMap::new(),
        })
        .collect();
    let init = |isl: &mut Island| {
        for _ in 0..cfg.pop_size {
            let e = random_expr(cfg.init_complexity, &vars, &mut isl.rng);
            let ind = isl.eval.evaluate(e, &sub, cfg, &mut isl.rng);
            Island::record(&mut isl.memory, &mut isl.audit, &ind);
            isl.pop.push(ind);
        }
    };
    if cfg.parallel {
        islands.par_iter_mut().for_each(init);
    } else {
        islands.iter_mut().for_each(init);
    }

    let mut hof = HallOfFame::default();
    for isl in &islands {
        hof.merge(&isl.memory);
    }
    let mut history = vec![hof.clone()];

    for _ in 0..cfg.iterations {
        if cfg.parallel {
            islands.par_iter_mut().for_each(|isl| isl.step(&sub, cfg));
        } else {
            islands.iter_mut().for_each(|isl| isl.step(&sub, cfg));
        }
        for isl in &islands {
            hof.merge(&isl.memory);
        }
        history.push(hof.clone());
        let memories: Vec<HallOfFame> = islands.iter().map(|isl| isl.memory.clone()).collect();
        for (i, isl) in islands.iter_mut().enumerate() {
            let others: Vec<&HallOfFame> = memories
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, m)| m)
                .collect();
            isl.migrate(&hof, &others, cfg);
        }
    }

    let mut audit = BTreeMap::new();
    for isl in &islands {
        for (c, l) in &isl.audit {
            let a = audit.entry(*c).or_insert(f64::INFINITY);
            *a = f64::min(*a, *l);
        }
    }
    Ok(SearchResult {
        hall_of_fame: hof,
        history,
        audit,
        evaluations: islands.iter().map(|i| i.eval.evaluations).sum(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Model selection

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateModel {
    #[serde(with = "crate::expr::expr_text")]
    pub expr: Expr,
    pub complexity: usize,
    pub loss: f64,
    pub score: f64,
}

impl CandidateModel {
    pub fn new(expr: Expr, loss: f64) -> CandidateModel {
        CandidateModel {
            complexity: expr.complexity(),
            expr,
            loss,
            score: 0.0,
        }
    }
}

/// Entries of increasing complexity whose loss is strictly below every
/// simpler entry's.
pub fn pareto_front(candidates: impl IntoIterator<Item = CandidateModel>) -> Vec<CandidateModel> {
    let mut all: Vec<CandidateModel> = candidates.into_iter().filter(|c| c.loss.is_finite()).collect();
    all.sort_by(|a, b| a.complexity.cmp(&b.complexity).then(a.loss.total_cmp(&b.loss)));
    let mut front: Vec<CandidateModel> = Vec::new();
    for c in all {
        if front.last().is_none_or(|last| c.loss < last.loss) {
            front.push(c);
        }
    }
    front
}

/// Assigns `score_i = -ln(loss_i / loss_{i-1}) / (c_i - c_{i-1})` along a list
/// of strictly increasing complexity; the first entry scores 0 and negative
/// scores are clamped to 0. The list need not be Pareto-filtered.
pub fn score_front(front: &[CandidateModel]) -> Result<Vec<CandidateModel>> {
    let mut out = front.to_vec();
    for i in 0..out.len() {
        if i == 0 {
            out[i].score = 0.0;
            continue;
        }
        let (prev, cur) = (&front[i - 1], &front[i]);
        if cur.complexity <= prev.complexity {
            return Err(Error::domain("front complexities must be strictly increasing"));
        }
        let lp = prev.loss.max(f64::MIN_POSITIVE);
        let lc = cur.loss.max(f64::MIN_POSITIVE);
        let s = -(lc / lp).ln() / (cur.complexity - prev.complexity) as f64;
        out[i].score = if s > 0.0 { s } else { 0.0 };
    }
    Ok(out)
}

/// Keeps the entries whose loss is at most the nearest-rank `r`-quantile of
/// the front's losses, and returns the index of the best-scoring survivor
/// (lower complexity on ties).
pub fn select_model(front: &[CandidateModel], r: f64) -> Result<usize> {
    if front.is_empty() {
        return Err(Error::domain("cannot select from an empty front"));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::domain(format!("percentile must lie in (0, 1], got {r}")));
    }
    let mut losses: Vec<f64> = front.iter().map(|c| c.loss).collect();
    losses.sort_by(f64::total_cmp);
    let rank = ((r * losses.len() as f64).ceil() as usize).clamp(1, losses.len());
    let threshold = losses[rank - 1];
    let mut best: Option<usize> = None;
    for (i, c) in front.iter().enumerate() {
        if c.loss > threshold {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &front[b];
                if c.score > cur.score || (c.score == cur.score && c.complexity < cur.complexity) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    Ok(best.expect("the minimum loss always survives"))
}

/// Scored Pareto front with the selected model.
#[derive(Debug, Clone)]
pub struct Discovery {
    pub front: Vec<CandidateModel>,
    pub selected: usize,
    pub search: SearchResult,
}

impl Discovery {
    pub fn model(&self) -> &CandidateModel {
        &self.front[self.selected]
    }
}

/// Search, refit the hall of fame on the full table, then score and select.
pub fn discover(table: &FeatureTable, cfg: &EvolveConfig) -> Result<Discovery> {
    let search = run_search(table, cfg)?;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, u64::MAX));
    // The search already explored restarts on its rows; the refit only
    // polishes from the constants it found.
    let opts = ConstantFit {
        restarts: 0,
        max_iter: 100,
    };
    let refit: Vec<CandidateModel> = search
        .hall_of_fame
        .iter()
        .map(|ind| {
            if search.rows.len() == table.len() {
                CandidateModel::new(ind.expr.clone(), ind.loss)
            } else {
                let (e, loss) = fit_constants(&ind.expr, table, opts, &mut rng);
                CandidateModel::new(e, loss)
            }
        })
        .collect();
    let front = score_front(&pareto_front(refit))?;
    if front.is_empty() {
        return Err(Error::Training("symbolic search produced no finite candidates".into()));
    }
    let selected = select_model(&front, cfg.percentile)?;
    Ok(Discovery { front, selected, search })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{canonical_terms, evaluate, parse_expr};

    fn p(s: &str) -> Expr {
        parse_expr(s).unwrap()
    }

    fn vars() -> Vec<String> {
        ["u", "u_x", "u_xx"].iter().map(|s| s.to_string()).collect()
    }

    fn table_for(rhs: &str, rows: usize, seed: u64) -> FeatureTable {
        let mut rng = rng_from_seed(seed);
        let cols: Vec<Vec<f64>> = vars().iter().map(|_| (0..rows).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let t = FeatureTable::new(vars(), cols.clone(), "u_t", vec![0.0; rows]).unwrap();
        let y = evaluate(&p(rhs), &t).unwrap();
        FeatureTable::new(vars(), cols, "u_t", y).unwrap()
    }

    fn ind(c: usize, fitness: f64) -> Individual {
        let mut e = Expr::var("u");
        while e.complexity() < c {
            e = Expr::bin(BinOp::Add, e, Expr::var("u"));
        }
        Individual {
            expr: e,
            loss: fitness,
            complexity: c,
            fitness,
        }
    }

    fn model(c: usize, loss: f64) -> CandidateModel {
        CandidateModel {
            expr: Expr::var("u"),
            complexity: c,
            loss,
            score: 0.0,
        }
    }

    #[test]
    fn fitness_formula() {
        let t = table_for("u*u_x", 50, 1);
        assert_eq!(fitness(&p("u_x"), &t, 0.0).unwrap().fitness, mse(&p("u_x"), &t).unwrap());
        let i = Individual::new(p("2*u*u_x + 3*u_xx"), 0.5, 0.01);
        assert_eq!(i.complexity, 9);
        assert!((i.fitness - 0.5 * 0.09f64.exp()).abs() < 1e-15);
        assert!(fitness(&p("u*u_x"), &t, 0.005).unwrap().loss <= 1e-20);
        assert_eq!(Individual::new(p("u"), f64::NAN, 0.1).fitness, f64::INFINITY);
    }

    #[test]
    fn tape_matches_reference_evaluation() {
        let t = table_for("u", 40, 2);
        let mut rng = rng_from_seed(3);
        for _ in 0..200 {
            let e = random_expr(rng.random_range(1..20), &vars(), &mut rng);
            let y = evaluate(&e, &t).unwrap();
            let direct = y.iter().zip(t.target()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 40.0;
            let l = mse(&e, &t).unwrap();
            assert!((l - direct).abs() <= 1e-12 * direct.max(1.0), "{e}");

            let c = e.constants();
            if c.is_empty() {
                continue;
            }
            let tape = Tape::compile(&e, t.names());
            let mut g = vec![0.0; c.len()];
            tape.loss(&c, t.columns(), t.target(), Some(&mut g), &mut Vec::new(), &mut Vec::new());
            for j in 0..c.len() {
                let h = 1e-6 * c[j].abs().max(1.0);
                let mut cp = c.clone();
                cp[j] += h;
                let up = mse(&e.with_constants(&cp), &t).unwrap();
                cp[j] -= 2.0 * h;
                let dn = mse(&e.with_constants(&cp), &t).unwrap();
                let fd = (up - dn) / (2.0 * h);
                assert!((g[j] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "{e}: {} vs {fd}", g[j]);
            }
        }
    }

    #[test]
    fn tournament_rules() {
        let mut rng = rng_from_seed(1);
        let pop = vec![ind(1, 1.0), ind(3, 3.0), ind(5, 2.0)];
        for _ in 0..20 {
            assert_eq!(tournament_select(&pop, 3, &mut rng).unwrap(), 0);
        }
        let tied = vec![ind(5, 1.0), ind(3, 1.0)];
        assert_eq!(tournament_select(&tied, 2, &mut rng).unwrap(), 1);
        assert!(tournament_select(&[], 1, &mut rng).is_err());
    }

    #[test]
    fn unit_tournament_is_uniform() {
        let mut rng = rng_from_seed(9);
        let pop: Vec<Individual> = (0..10).map(|i| ind(1 + 2 * i, i as f64)).collect();
        let mut counts = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            counts[tournament_select(&pop, 1, &mut rng).unwrap()] += 1;
        }
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-square with 9 degrees of freedom.
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn constant_trees_only_jitter() {
        let cfg = EvolveConfig::default();
        let mut rng = rng_from_seed(5);
        let e = p("1.5*(2 - 0.5)");
        for _ in 0..200 {
            let m = mutate(&e, &vars(), &cfg, &mut rng);
            assert!(!m.has_variables());
            assert_eq!(m.complexity(), e.complexity());
        }
    }

    #[test]
    fn mutation_respects_caps() {
        let cfg = EvolveConfig {
            max_depth: 4,
            max_complexity: 9,
            ..Default::default()
        };
        let mut rng = rng_from_seed(6);
        let e = p("(u*u_x)*(u_xx + 1)");
        assert_eq!(e.depth(), 3);
        for _ in 0..2000 {
            let m = mutate(&e, &vars(), &cfg, &mut rng);
            assert!(m.depth() <= 4 && m.complexity() <= 9, "{m}");
        }
    }

    #[test]
    fn mutation_fuzz() {
        let cfg = EvolveConfig::default();
        let t = table_for("u", 20, 7);
        let mut rng = rng_from_seed(7);
        let base = p("0.5*u*u_x + 0.1*u_xx - 2");
        for _ in 0..10_000 {
            let m = mutate(&base, &vars(), &cfg, &mut rng);
            let back = parse_expr(&m.to_string()).unwrap();
            assert_eq!(back, m);
            assert!(evaluate(&m, &t).unwrap().iter().all(|v| v.is_finite()));
            assert!(m.depth() <= cfg.max_depth);
        }
    }

    #[test]
    fn crossover_cases() {
        let cfg = EvolveConfig::default();
        let mut rng = rng_from_seed(8);
        let (a, b) = crossover(&p("u"), &p("2"), &cfg, &mut rng);
        assert_eq!((a, b), (p("2"), p("u")));

        let e = p("u*u_x + 0.1*u_xx");
        let t = table_for("u", 10, 1);
        for i in 0..e.complexity() {
            let (c1, c2) = crossover_at(&e, &e, i, i);
            assert_eq!(evaluate(&c1, &t).unwrap(), evaluate(&e, &t).unwrap());
            assert_eq!(evaluate(&c2, &t).unwrap(), evaluate(&e, &t).unwrap());
        }

        let x = p("u*u_x + 3");
        let y = p("u_xx - u*2");
        for _ in 0..10_000 {
            let (c1, c2) = crossover(&x, &y, &cfg, &mut rng);
            for c in [c1, c2] {
                assert!(c.variables().iter().all(|v| ["u", "u_x", "u_xx"].contains(&&**v)));
            }
        }
    }

    #[test]
    fn crossover_cap_violators_revert() {
        let cfg = EvolveConfig {
            max_complexity: 5,
            ..Default::default()
        };
        let mut rng = rng_from_seed(2);
        let a = p("u*u_x + u_xx");
        let b = p("u - 1");
        for _ in 0..500 {
            let (c1, c2) = crossover(&a, &b, &cfg, &mut rng);
            assert!(c1 == a || c1.complexity() <= 5);
            assert!(c2 == b || c2.complexity() <= 5);
        }
    }

    #[test]
    fn optimize_recovers_single_coefficient() {
        let t = table_for("-0.3885*u_x", 200, 3);
        let e = optimize_constants(&p("1*u_x"), &t).unwrap();
        let c = e.constants();
        assert!((c[0] + 0.3885).abs() < 1e-3, "{e}");

        let plain = p("u*u_x");
        assert_eq!(optimize_constants(&plain, &t).unwrap(), plain);
    }

    #[test]
    fn optimize_matches_normal_equations() {
        let t = table_for("-1*u*u_x + 0.1*u_xx", 300, 4);
        let e = optimize_constants(&p("0.5*u*u_x + 1*u_xx"), &t).unwrap();
        let terms = canonical_terms(&e);
        let c1 = terms.coefficient(&["u".into(), "u_x".into()]).unwrap();
        let c2 = terms.coefficient(&["u_xx".into()]).unwrap();
        // Closed-form least squares over the two columns.
        let a: Vec<f64> = t.column("u").unwrap().iter().zip(t.column("u_x").unwrap()).map(|(u, v)| u * v).collect();
        let b = t.column("u_xx").unwrap();
        let y = t.target();
        let (saa, sab, sbb) = (dot(&a, &a), dot(&a, b), dot(b, b));
        let (say, sby) = (dot(&a, y), dot(b, y));
        let det = saa * sbb - sab * sab;
        let ls = ((sbb * say - sab * sby) / det, (saa * sby - sab * say) / det);
        assert!((c1 - ls.0).abs() < 1e-6 && (c2 - ls.1).abs() < 1e-6);
        assert!((c1 + 1.0).abs() < 1e-3 && (c2 - 0.1).abs() < 1e-3);
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn optimize_never_worsens() {
        let t = table_for("u*u*u_x - u_xx", 100, 5);
        let mut rng = rng_from_seed(11);
        for _ in 0..100 {
            let e = random_expr(rng.random_range(3..15), &vars(), &mut rng);
            let before = mse(&e, &t).unwrap();
            let (out, after) = optimize_constants_with(&e, &t, ConstantFit::default(), &mut rng).unwrap();
            assert!(after <= before, "{e}: {before} -> {after}");
            assert_eq!(mse(&out, &t).unwrap().to_bits(), after.to_bits());
        }
    }

    #[test]
    fn frozen_generation_is_identity() {
        let t = table_for("u*u_x", 60, 6);
        let cfg = EvolveConfig {
            p_mutation: 0.0,
            p_crossover: 0.0,
            ..Default::default()
        };
        let mut rng = rng_from_seed(3);
        let mut eval = Evaluator::default();
        let mut pop: Vec<Individual> = Vec::new();
        while pop.len() < 30 {
            let ind = eval.evaluate(random_expr(rng.random_range(3..10), &vars(), &mut rng), &t, &cfg, &mut rng);
            if !pop.iter().any(|p| p.expr == ind.expr) {
                pop.push(ind);
            }
        }
        let pop = survivors(pop, 30);
        let next = evolve_population(pop.clone(), &t, &cfg, &mut rng);
        assert_eq!(next, pop);
    }

    #[test]
    fn best_fitness_never_increases() {
        let t = table_for("u*u_x + 0.1*u_xx", 200, 7);
        let cfg = EvolveConfig::default();
        let mut rng = rng_from_seed(4);
        let mut eval = Evaluator::default();
        let mut pop: Vec<Individual> = (0..50)
            .map(|_| eval.evaluate(random_expr(3, &vars(), &mut rng), &t, &cfg, &mut rng))
            .collect();
        let best = |p: &[Individual]| p.iter().map(|i| i.fitness).fold(f64::INFINITY, f64::min);
        for _ in 0..10 {
            let b = best(&pop);
            pop = evolve_population(pop, &t, &cfg, &mut rng);
            assert!(best(&pop) <= b);
        }
    }

    #[test]
    fn hall_of_fame_keeps_minimum() {
        let mut h = HallOfFame::default();
        assert!(h.submit(&ind(3, 2.0)));
        assert!(!h.submit(&ind(3, 2.5)));
        assert!(h.submit(&ind(3, 1.0)));
        assert!(!h.submit(&ind(5, f64::INFINITY)));
        assert_eq!(h.get(3).unwrap().loss, 1.0);
        assert_eq!(h.len(), 1);
    }

    #[test]
    fn zero_iterations_only_initial_complexity() {
        let t = table_for("u*u_x", 100, 1);
        let cfg = EvolveConfig {
            populations: 2,
            pop_size: 30,
            iterations: 0,
            ..Default::default()
        };
        let r = run_search(&t, &cfg).unwrap();
        assert!(!r.hall_of_fame.is_empty());
        assert!(r.hall_of_fame.iter().all(|i| i.complexity <= 3));
    }

    #[test]
    fn search_history_and_audit() {
        let t = table_for("-1*u*u_x + 0.1*u_xx", 300, 2);
        let cfg = EvolveConfig {
            populations: 3,
            pop_size: 40,
            iterations: 8,
            seed: 5,
            ..Default::default()
        };
        let r = run_search(&t, &cfg).unwrap();
        for w in r.history.windows(2) {
            for ind in w[0].iter() {
                assert!(w[1].get(ind.complexity).unwrap().loss <= ind.loss);
            }
        }
        for ind in r.hall_of_fame.iter() {
            assert!(ind.loss <= r.audit[&ind.complexity]);
        }
        assert_eq!(r.audit.len(), r.hall_of_fame.len());
    }

    #[test]
    fn search_is_deterministic_and_parallel_agrees() {
        let t = table_for("u*u_x", 200, 3);
        let cfg = EvolveConfig {
            populations: 3,
            pop_size: 30,
            iterations: 4,
            seed: 9,
            ..Default::default()
        };
        let a = run_search(&t, &cfg).unwrap();
        let b = run_search(&t, &cfg).unwrap();
        let par = run_search(&t, &EvolveConfig { parallel: true, ..cfg.clone() }).unwrap();
        let key = |r: &SearchResult| r.hall_of_fame.iter().map(|i| (i.expr.to_string(), i.loss.to_bits())).collect::<Vec<_>>();
        assert_eq!(key(&a), key(&b));
        assert_eq!(key(&a), key(&par));
    }

    #[test]
    fn scores_match_formula() {
        let front = vec![model(7, 0.000717), model(9, 0.000331)];
        let s = score_front(&front).unwrap();
        assert_eq!(s[0].score, 0.0);
        assert!((s[1].score - 0.385830).abs() < 1e-3);
        let s = score_front(&[model(5, 2.2671), model(7, 0.863306)]).unwrap();
        assert!((s[1].score - 0.482744).abs() < 1e-3);
        let s = score_front(&[model(1, 0.5), model(3, 0.5), model(5, 0.7)]).unwrap();
        assert_eq!((s[1].score, s[2].score), (0.0, 0.0));
        assert!(score_front(&[model(3, 1.0), model(3, 0.5)]).is_err());
    }

    #[test]
    fn selection_rules() {
        let single = score_front(&[model(5, 1.0)]).unwrap();
        assert_eq!(select_model(&single, 0.2).unwrap(), 0);
        // Equal scores: the simpler model wins.
        let front = vec![
            CandidateModel { score: 0.0, ..model(1, 4.0) },
            CandidateModel { score: 0.5, ..model(3, 2.0) },
            CandidateModel { score: 0.5, ..model(5, 1.0) },
        ];
        assert_eq!(select_model(&front, 1.0).unwrap(), 1);
        // The percentile filter removes the better-scoring simpler model.
        assert_eq!(select_model(&front, 0.3).unwrap(), 2);
        assert_eq!(select_model(&front, 0.34).unwrap(), 1);
    }

    #[test]
    fn pareto_filter() {
        let f = pareto_front(vec![model(5, 1.0), model(1, 3.0), model(3, 3.5), model(7, 1.0), model(9, 0.2)]);
        let c: Vec<usize> = f.iter().map(|m| m.complexity).collect();
        assert_eq!(c, vec![1, 5, 9]);
    }

    #[test]
    fn candidate_json_uses_expression_text() {
        let m = CandidateModel::new(p("-1*u*u_x + 0.1*u_xx"), 0.25);
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"expr\":\"-1*u*u_x + 0.1*u_xx\""));
        let back: CandidateModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }
}
