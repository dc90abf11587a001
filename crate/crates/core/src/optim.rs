//! Gradient-based minimizers: L-BFGS with a strong-Wolfe line search, and Adam.

/// Objective evaluating `f(x)` and writing `∇f(x)` into the second argument.
pub trait Objective {
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Objective for F {
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self(x, grad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LbfgsConfig {
    pub max_iter: usize,
    pub history: usize,
    /// Stop when `‖∇f‖∞ ≤ grad_tol`.
    pub grad_tol: f64,
    /// Stop when the relative decrease of `f` in one iteration is below this.
    pub f_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            max_iter: 100,
            history: 10,
            grad_tol: 1e-10,
            f_tol: 1e-14,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Counted<'a, O: Objective> {
    obj: &'a mut O,
    calls: usize,
}

impl<O: Objective> Counted<'_, O> {
    fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
        self.calls += 1;
        let f = self.obj.eval(x, g);
        if f.is_finite() && g.iter().all(|v| v.is_finite()) {
            f
        } else {
            f64::INFINITY
        }
    }
}

/// Minimizes `obj` from `x0`. Never returns a point worse than `x0`; if the
/// objective is not finite at `x0` the start point is returned unchanged.
pub fn lbfgs(obj: &mut impl Objective, x0: Vec<f64>, cfg: &LbfgsConfig) -> Minimum {
    let n = x0.len();
    let mut counted = Counted { obj, calls: 0 };
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut f = counted.eval(&x, &mut g);
    let result = |x: Vec<f64>, f: f64, iterations: usize, evaluations: usize| Minimum {
        x,
        f,
        iterations,
        evaluations,
    };
    if !f.is_finite() || n == 0 {
        return result(x, f, 0, counted.calls);
    }

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut d = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];

    for it in 0..cfg.max_iter {
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= cfg.grad_tol {
            return result(x, f, it, counted.calls);
        }
        // Two-loop recursion for d = -H g.
        d.copy_from_slice(&g);
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = rho_hist[i] * dot(&s_hist[i], &d);
            d.iter_mut().zip(&y_hist[i]).for_each(|(di, yi)| *di -= alpha[i] * yi);
        }
        let gamma = if k > 0 {
            dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
        } else {
            1.0 / g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0)
        };
        d.iter_mut().for_each(|v| *v *= gamma);
        for i in 0..k {
            let beta = rho_hist[i] * dot(&y_hist[i], &d);
            d.iter_mut().zip(&s_hist[i]).for_each(|(di, si)| *di += (alpha[i] - beta) * si);
        }
        d.iter_mut().for_each(|v| *v = -*v);
        let mut dg = dot(&d, &g);
        if !(dg < 0.0) {
            // Not a descent direction: restart from steepest descent.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            let scale = 1.0 / g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
            d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi * scale);
            dg = dot(&d, &g);
        }

        let Some((step, f_new)) = wolfe_search(&mut counted, &x, f, &d, dg, &mut x_new, &mut g_new) else {
            return result(x, f, it, counted.calls);
        };

        let s: Vec<f64> = d.iter().map(|v| v * step).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let f_old = f;
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        f = f_new;
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if s_hist.len() == cfg.history {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
        }
        if (f_old - f).abs() <= cfg.f_tol * f_old.abs().max(f.abs()).max(f64::MIN_POSITIVE) {
            return result(x, f, it + 1, counted.calls);
        }
    }
    result(x, f, cfg.max_iter, counted.calls)
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

/// Line search for a step satisfying the strong Wolfe conditions.
/// On success `x_new`/`g_new` hold the accepted point and its gradient.
fn wolfe_search<O: Objective>(
    obj: &mut Counted<'_, O>,
    x: &[f64],
    f0: f64,
    d: &[f64],
    dg0: f64,
    x_new: &mut [f64],
    g_new: &mut [f64],
) -> Option<(f64, f64)> {
    let mut probe = |a: f64, x_new: &mut [f64], g_new: &mut [f64]| {
        x_new.iter_mut().zip(x.iter().zip(d)).for_each(|(xn, (xi, di))| *xn = xi + a * di);
        let f = obj.eval(x_new, g_new);
        (f, dot(g_new, d))
    };

    let mut a_prev = 0.0;
    let mut f_prev = f0;
    let mut dg_prev = dg0;
    let mut a = 1.0;
    for i in 0..30 {
        let (fa, dga) = probe(a, x_new, g_new);
        if !fa.is_finite() {
            // Overshoot into a non-finite region: shrink towards the last good step.
            a = a_prev + 0.1 * (a - a_prev);
            continue;
        }
        if fa > f0 + C1 * a * dg0 || (i > 0 && fa >= f_prev) {
            return zoom(&mut probe, (a_prev, f_prev, dg_prev), (a, fa, dga), f0, dg0, x_new, g_new);
        }
        if dga.abs() <= -C2 * dg0 {
            return Some((a, fa));
        }
        if dga >= 0.0 {
            return zoom(&mut probe, (a, fa, dga), (a_prev, f_prev, dg_prev), f0, dg0, x_new, g_new);
        }
        a_prev = a;
        f_prev = fa;
        dg_prev = dga;
        a *= 2.0;
    }
    None
}

/// Cubic interpolation minimizer of the Hermite data on [a, b], safeguarded to
/// the interior of the bracket.
fn cubic_min(a: f64, fa: f64, ga: f64, b: f64, fb: f64, gb: f64) -> f64 {
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - ga * gb;
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let mid = 0.5 * (a + b);
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2);
    let margin = 0.1 * (hi - lo);
    if t.is_finite() && t > lo + margin && t < hi - margin {
        t
    } else {
        mid
    }
}

#[allow(clippy::too_many_arguments)]
fn zoom(
    probe: &mut impl FnMut(f64, &mut [f64], &mut [f64]) -> (f64, f64),
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    f0: f64,
    dg0: f64,
    x_new: &mut [f64],
    g_new: &mut [f64],
) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for _ in 0..30 {
        let a = if hi.1.is_finite() {
            cubic_min(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2)
        } else {
            0.5 * (lo.0 + hi.0)
        };
        let (fa, dga) = probe(a, x_new, g_new);
        if fa.is_finite() && fa < f0 && best.is_none_or(|(_, fb)| fa < fb) {
            best = Some((a, fa));
        }
        if !fa.is_finite() || fa > f0 + C1 * a * dg0 || fa >= lo.1 {
            hi = (a, fa, dga);
        } else {
            if dga.abs() <= -C2 * dg0 {
                return Some((a, fa));
            }
            if dga * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (a, fa, dga);
        }
        if (hi.0 - lo.0).abs() <= 1e-16 * lo.0.abs().max(1e-300) {
            break;
        }
    }
    // No strong-Wolfe point found; accept the best decrease seen, if any.
    let (a, fa) = best?;
    let (f, _) = probe(a, x_new, g_new);
    debug_assert_eq!(f, fa);
    Some((a, f))
}

/// Adam first-order optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let mut f = 0.0;
        g.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..x.len() - 1 {
            let a = x[i + 1] - x[i] * x[i];
            let b = 1.0 - x[i];
            f += 100.0 * a * a + b * b;
            g[i] += -400.0 * x[i] * a - 2.0 * b;
            g[i + 1] += 200.0 * a;
        }
        f
    }

    #[test]
    fn minimizes_rosenbrock() {
        let cfg = LbfgsConfig {
            max_iter: 500,
            ..Default::default()
        };
        let m = lbfgs(&mut rosenbrock, vec![-1.2, 1.0, -0.5, 0.8], &cfg);
        for v in &m.x {
            assert!((v - 1.0).abs() < 1e-6, "{:?}", m.x);
        }
        assert!(m.f < 1e-12);
    }

    #[test]
    fn solves_quadratic_quickly() {
        let diag = [1.0, 10.0, 100.0, 0.5];
        let mut q = |x: &[f64], g: &mut [f64]| {
            let mut f = 0.0;
            for i in 0..4 {
                let r = x[i] - i as f64;
                f += 0.5 * diag[i] * r * r;
                g[i] = diag[i] * r;
            }
            f
        };
        let m = lbfgs(&mut q, vec![10.0; 4], &LbfgsConfig::default());
        assert!(m.iterations < 30);
        for (i, v) in m.x.iter().enumerate() {
            assert!((v - i as f64).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_start_is_returned() {
        let mut bad = |_: &[f64], g: &mut [f64]| {
            g[0] = 0.0;
            f64::NAN
        };
        let m = lbfgs(&mut bad, vec![3.0], &LbfgsConfig::default());
        assert_eq!(m.x, vec![3.0]);
    }

    #[test]
    fn never_worse_than_start() {
        // Objective with a pole: the search must not step into NaN territory.
        let mut f = |x: &[f64], g: &mut [f64]| {
            if x[0] <= 0.0 {
                g[0] = f64::NAN;
                return f64::NAN;
            }
            g[0] = 1.0 - 1.0 / x[0];
            x[0] - x[0].ln()
        };
        let m = lbfgs(&mut f, vec![5.0], &LbfgsConfig::default());
        assert!((m.x[0] - 1.0).abs() < 1e-6);
        assert!(m.f <= 5.0 - 5.0f64.ln());
    }

    #[test]
    fn adam_descends_on_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 8.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3, "{p:?}");
    }
}
