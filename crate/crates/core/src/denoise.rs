//! Savitzky-Golay denoising and derivative estimation.
//!
//! Smoothing and differentiation kernels come from the least-squares fit of
//! an order-`n` polynomial over a centred window of `l = 2m + 1` samples. The
//! fit is applied separably, one axis at a time, with mirror padding at the
//! grid edges. A Gaussian pre-smoothed copy of the data serves as the
//! reference signal when choosing the window length and Gaussian width.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{map_lanes, Field};

/// Window and polynomial order of a Savitzky-Golay fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavgolConfig {
    pub window: usize,
    pub order: usize,
}

impl SavgolConfig {
    pub fn new(window: usize, order: usize) -> Result<Self> {
        if window < 3 || window.is_multiple_of(2) {
            return Err(Error::domain(format!("window must be odd and >= 3, got {window}")));
        }
        if order >= window {
            return Err(Error::domain(format!(
                "polynomial order {order} must be below the window length {window}"
            )));
        }
        Ok(SavgolConfig { window, order })
    }

    pub fn half_width(&self) -> usize {
        self.window / 2
    }
}

/// Convolution weights for one (window, order, derivative, spacing) choice.
///
/// `weights[j]` multiplies the sample at offset `j - m`. The derivative
/// factor `d!/h^d` is folded in, so applying the kernel to samples of
/// `x^d` yields `d!`.
#[derive(Debug, Clone, PartialEq)]
pub struct SavgolKernel {
    pub weights: Vec<f64>,
}

impl SavgolKernel {
    pub fn new(cfg: SavgolConfig, deriv: usize, spacing: f64) -> Result<Self> {
        if deriv > cfg.order {
            return Err(Error::domain(format!(
                "derivative order {deriv} exceeds polynomial order {}",
                cfg.order
            )));
        }
        if !(spacing > 0.0) {
            return Err(Error::domain("grid spacing must be positive"));
        }
        let m = cfg.half_width() as i64;
        let cols = cfg.order + 1;
        // Design matrix A[j, k] = j^k over offsets j = -m..=m.
        let a = DMatrix::from_fn(cfg.window, cols, |r, k| ((r as i64 - m) as f64).powi(k as i32));
        let ata = a.transpose() * &a;
        let chol = ata
            .cholesky()
            .ok_or_else(|| Error::domain("singular Savitzky-Golay normal equations"))?;
        // Row `deriv` of (A^T A)^{-1} A^T, obtained by solving with the unit vector.
        let mut e = DVector::zeros(cols);
        e[deriv] = 1.0;
        let coef = a * chol.solve(&e);
        let scale = factorial(deriv) / spacing.powi(deriv as i32);
        Ok(SavgolKernel {
            weights: coef.iter().map(|c| c * scale).collect(),
        })
    }

    /// Correlates a lane with the kernel using mirror padding.
    pub fn apply_lane(&self, lane: &[f64], out: &mut [f64]) {
        correlate_mirror(lane, &self.weights, out);
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Index into a lane of length `n` reflected about the end samples
/// (`-1 -> 1`, `n -> n-2`).
pub(crate) fn mirror_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as i64 {
        k = period - k;
    }
    k as usize
}

fn correlate_mirror(lane: &[f64], weights: &[f64], out: &mut [f64]) {
    let n = lane.len();
    let m = (weights.len() / 2) as i64;
    for (i, o) in out.iter_mut().enumerate() {
        let i = i as i64;
        let interior = i - m >= 0 && i + m < n as i64;
        let mut acc = 0.0;
        if interior {
            let start = (i - m) as usize;
            for (w, v) in weights.iter().zip(&lane[start..start + weights.len()]) {
                acc += w * v;
            }
        } else {
            for (j, w) in weights.iter().enumerate() {
                acc += w * lane[mirror_index(i + j as i64 - m, n)];
            }
        }
        *o = acc;
    }
}

/// Normalized Gaussian weights truncated at 4 sigma (grid units).
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::domain(format!("sigma must be positive, got {sigma}")));
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Separable Gaussian blur along every axis.
pub fn gaussian_smooth(field: &Field, sigma: f64) -> Result<Field> {
    let kernel = gaussian_kernel(sigma)?;
    let shape = field.shape();
    let mut data = field.data().to_vec();
    for axis in 0..shape.len() {
        data = map_lanes(&data, &shape, axis, |lane, out| correlate_mirror(lane, &kernel, out));
    }
    field.with_data(data)
}

fn check_window(field: &Field, cfg: SavgolConfig, axis: usize) -> Result<()> {
    let n = field.axis(axis).len();
    if cfg.window > n {
        return Err(Error::domain(format!(
            "window {} exceeds the {n} points of axis `{}`",
            cfg.window,
            field.axis(axis).name
        )));
    }
    Ok(())
}

/// Least-squares polynomial smoothing applied along every axis in turn.
pub fn savgol_smooth(field: &Field, cfg: SavgolConfig) -> Result<Field> {
    let kernel = SavgolKernel::new(cfg, 0, 1.0)?;
    let shape = field.shape();
    for axis in 0..shape.len() {
        check_window(field, cfg, axis)?;
    }
    let mut data = field.data().to_vec();
    for axis in 0..shape.len() {
        data = map_lanes(&data, &shape, axis, |lane, out| kernel.apply_lane(lane, out));
    }
    field.with_data(data)
}

/// Derivative of order `deriv` along `axis` from the local polynomial fit.
pub fn savgol_derivative(field: &Field, cfg: SavgolConfig, axis: usize, deriv: usize) -> Result<Field> {
    if axis >= field.ndim() {
        return Err(Error::domain(format!("axis {axis} out of range")));
    }
    check_window(field, cfg, axis)?;
    let h = field.axis(axis).spacing()?;
    let kernel = SavgolKernel::new(cfg, deriv, h)?;
    let data = map_lanes(field.data(), &field.shape(), axis, |lane, out| kernel.apply_lane(lane, out));
    field.with_data(data)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Chosen smoothing parameters and the criterion value they achieved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunedSavgol {
    pub sigma: f64,
    pub window: usize,
    pub mse: f64,
}

/// Picks `(sigma, window)` minimizing the mean squared difference between the
/// Savitzky-Golay output and the Gaussian-blurred reference.
///
/// Candidates are scanned by ascending window then ascending sigma, and a
/// later candidate only wins if it is better by more than a relative 1e-9
/// (with a floor tied to the field's mean square), so near-ties resolve to
/// the smaller window, then the smaller sigma.
/// Windows longer than some axis are skipped.
pub fn tune_savgol(field: &Field, sigma_grid: &[f64], window_grid: &[usize], order: usize) -> Result<TunedSavgol> {
    if sigma_grid.is_empty() || window_grid.is_empty() {
        return Err(Error::domain("tuning grids must be nonempty"));
    }
    let min_len = field.shape().into_iter().min().unwrap_or(0);
    let mut windows: Vec<usize> = window_grid.iter().copied().filter(|&w| w <= min_len).collect();
    windows.sort_unstable();
    windows.dedup();
    let mut sigmas = sigma_grid.to_vec();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();

    let references = sigmas
        .iter()
        .map(|&s| gaussian_smooth(field, s))
        .collect::<Result<Vec<_>>>()?;
    let floor = 1e-20 * mse(field.data(), &vec![0.0; field.len()]) + f64::MIN_POSITIVE;
    let mut best: Option<TunedSavgol> = None;
    for &w in &windows {
        let smoothed = savgol_smooth(field, SavgolConfig::new(w, order)?)?;
        for (&sigma, reference) in sigmas.iter().zip(&references) {
            let m = mse(smoothed.data(), reference.data());
            let better = match best {
                None => true,
                Some(b) => m < b.mse - 1e-9 * b.mse - floor,
            };
            if better {
                best = Some(TunedSavgol { sigma, window: w, mse: m });
            }
        }
    }
    best.ok_or_else(|| Error::domain(format!("no candidate window fits an axis of {min_len} points")))
}

/// Either a fixed value or chosen by [`tune_savgol`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice<T> {
    Auto,
    Fixed(T),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseSpec {
    pub window: Choice<usize>,
    pub order: usize,
    pub sigma: Choice<f64>,
    pub sigma_grid: Vec<f64>,
    pub window_grid: Vec<usize>,
}

impl Default for DenoiseSpec {
    fn default() -> Self {
        DenoiseSpec {
            window: Choice::Auto,
            order: 3,
            sigma: Choice::Auto,
            sigma_grid: vec![1.0, 2.0, 3.0],
            window_grid: vec![5, 7, 9, 11],
        }
    }
}

impl DenoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let windows = match self.window {
            Choice::Auto => self.window_grid.clone(),
            Choice::Fixed(w) => vec![w],
        };
        let sigmas = match self.sigma {
            Choice::Auto => self.sigma_grid.clone(),
            Choice::Fixed(s) => vec![s],
        };
        if windows.is_empty() || sigmas.is_empty() {
            return Err(Error::config("denoise candidate grids must be nonempty"));
        }
        for &w in &windows {
            SavgolConfig::new(w, self.order).map_err(|e| Error::config(e.to_string()))?;
        }
        if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config("denoise sigma must be positive"));
        }
        Ok(())
    }
}

/// Tunes what is left on `Auto` and returns the Savitzky-Golay smoothed field.
pub fn denoise(field: &Field, spec: &DenoiseSpec) -> Result<(Field, TunedSavgol)> {
    let sigmas = match spec.sigma {
        Choice::Auto => spec.sigma_grid.clone(),
        Choice::Fixed(s) => vec![s],
    };
    let windows = match spec.window {
        Choice::Auto => spec.window_grid.clone(),
        Choice::Fixed(w) => vec![w],
    };
    let tuned = tune_savgol(field, &sigmas, &windows, spec.order)?;
    let out = savgol_smooth(field, SavgolConfig::new(tuned.window, spec.order)?)?;
    Ok((out, tuned))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Axis;
    use rand::Rng as _;

    fn field_1d(n: usize, h: f64, f: impl Fn(f64) -> f64) -> Field {
        let x = Axis::new("x", (0..n).map(|i| i as f64 * h).collect()).unwrap();
        Field::from_fn(vec![x], |c| f(c[0])).unwrap()
    }

    /// Brute-force least squares: fit the polynomial to a unit impulse at every
    /// window position and read off the centre value.
    fn brute_force_weights(window: usize, order: usize) -> Vec<f64> {
        let m = (window / 2) as i64;
        (0..window)
            .map(|impulse| {
                let a = DMatrix::from_fn(window, order + 1, |r, k| ((r as i64 - m) as f64).powi(k as i32));
                let mut y = DVector::zeros(window);
                y[impulse] = 1.0;
                let coef = (a.transpose() * &a).lu().solve(&(a.transpose() * y)).unwrap();
                coef[0]
            })
            .collect()
    }

    #[test]
    fn five_point_quadratic_kernel() {
        let k = SavgolKernel::new(SavgolConfig::new(5, 2).unwrap(), 0, 1.0).unwrap();
        let expected = [-3.0, 12.0, 17.0, 12.0, -3.0].map(|v| v / 35.0);
        for (a, b) in k.weights.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
        let brute = brute_force_weights(5, 2);
        for (a, b) in k.weights.iter().zip(brute) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn three_point_quadratic_is_identity() {
        let k = SavgolKernel::new(SavgolConfig::new(3, 2).unwrap(), 0, 1.0).unwrap();
        for (a, b) in k.weights.iter().zip([0.0, 1.0, 0.0]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SavgolConfig::new(4, 2).is_err());
        assert!(SavgolConfig::new(5, 5).is_err());
        assert!(SavgolKernel::new(SavgolConfig::new(5, 2).unwrap(), 3, 1.0).is_err());
    }

    #[test]
    fn smoothing_weights_sum_to_one() {
        for window in (3..=21).step_by(2) {
            for order in 0..window.min(7) {
                let k = SavgolKernel::new(SavgolConfig::new(window, order).unwrap(), 0, 1.0).unwrap();
                assert!((k.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{window} {order}");
            }
        }
    }

    #[test]
    fn derivative_kernels_on_monomials() {
        for (window, order) in [(5, 2), (7, 3), (9, 4), (11, 3), (11, 5)] {
            let cfg = SavgolConfig::new(window, order).unwrap();
            let m = (window / 2) as i64;
            for d in 0..=order {
                let k = SavgolKernel::new(cfg, d, 1.0).unwrap();
                for p in 0..=d {
                    let v: f64 = k
                        .weights
                        .iter()
                        .enumerate()
                        .map(|(j, w)| w * ((j as i64 - m) as f64).powi(p as i32))
                        .sum();
                    if p < d {
                        assert!(v.abs() < 1e-12, "window {window} order {order} d {d} p {p}: {v}");
                    } else {
                        assert!((v - factorial(d)).abs() < 1e-10 * factorial(d), "{v}");
                    }
                }
            }
        }
    }

    #[test]
    fn polynomial_reproduced_at_interior() {
        let f = field_1d(40, 0.1, |x| 1.0 - 2.0 * x + 0.5 * x * x - 0.1 * x * x * x);
        let s = savgol_smooth(&f, SavgolConfig::new(7, 3).unwrap()).unwrap();
        for i in 3..37 {
            assert!((s.data()[i] - f.data()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn derivatives_of_square() {
        let h = 0.05;
        let f = field_1d(30, h, |x| x * x);
        let cfg = SavgolConfig::new(5, 2).unwrap();
        let d1 = savgol_derivative(&f, cfg, 0, 1).unwrap();
        let d2 = savgol_derivative(&f, cfg, 0, 2).unwrap();
        for i in 2..28 {
            let x = i as f64 * h;
            assert!((d1.data()[i] - 2.0 * x).abs() < 1e-10);
            assert!((d2.data()[i] - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn derivative_of_sine() {
        let h = 0.01;
        let f = field_1d(700, h, f64::sin);
        let d = savgol_derivative(&f, SavgolConfig::new(7, 3).unwrap(), 0, 1).unwrap();
        let err = (3..697)
            .map(|i| (d.data()[i] - (i as f64 * h).cos()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-4, "max error {err}");
    }

    #[test]
    fn window_longer_than_axis_rejected() {
        let f = field_1d(4, 1.0, |x| x);
        assert!(savgol_smooth(&f, SavgolConfig::new(5, 2).unwrap()).is_err());
    }

    #[test]
    fn gaussian_preserves_constants_and_ramps() {
        let x = Axis::linspace("x", 0.0, 1.0, 30).unwrap();
        let t = Axis::linspace("t", 0.0, 1.0, 30).unwrap();
        let c = Field::from_fn(vec![x.clone(), t.clone()], |_| 4.5).unwrap();
        let g = gaussian_smooth(&c, 1.7).unwrap();
        assert!(g.data().iter().all(|v| (v - 4.5).abs() < 1e-12));

        let ramp = field_1d(60, 0.1, |x| 3.0 * x - 1.0);
        let g = gaussian_smooth(&ramp, 2.0).unwrap();
        let r = (4.0 * 2.0f64).ceil() as usize;
        for i in r..60 - r {
            assert!((g.data()[i] - ramp.data()[i]).abs() < 1e-12);
        }
        assert!(gaussian_smooth(&ramp, 0.0).is_err());
    }

    #[test]
    fn gaussian_variance_reduction_on_white_noise() {
        let mut rng = crate::rng::rng_from_seed(11);
        let n = 20000;
        let noise: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let var_in = crate::field::population_std(&noise).powi(2);
        let f = Field::new(vec![Axis::linspace("x", 0.0, 1.0, n).unwrap()], noise).unwrap();
        let g = gaussian_smooth(&f, 2.0).unwrap();
        let var_out = crate::field::population_std(g.data()).powi(2);
        let w = gaussian_kernel(2.0).unwrap();
        let expected = w.iter().map(|v| v * v).sum::<f64>();
        let ratio = var_out / var_in;
        assert!((ratio / expected - 1.0).abs() < 0.05, "ratio {ratio} expected {expected}");
    }

    #[test]
    fn smoothing_is_linear() {
        let mut rng = crate::rng::rng_from_seed(5);
        let x = Axis::linspace("x", 0.0, 1.0, 17).unwrap();
        let t = Axis::linspace("t", 0.0, 1.0, 13).unwrap();
        let n = 17 * 13;
        let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let (a, b) = (1.7, -0.3);
        let fu = Field::new(vec![x.clone(), t.clone()], u.clone()).unwrap();
        let fv = Field::new(vec![x.clone(), t.clone()], v.clone()).unwrap();
        let comb = Field::new(vec![x, t], u.iter().zip(&v).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let cfg = SavgolConfig::new(7, 3).unwrap();
        let su = savgol_smooth(&fu, cfg).unwrap();
        let sv = savgol_smooth(&fv, cfg).unwrap();
        let sc = savgol_smooth(&comb, cfg).unwrap();
        for i in 0..n {
            let lin = a * su.data()[i] + b * sv.data()[i];
            assert!((sc.data()[i] - lin).abs() < 1e-12);
        }
    }

    #[test]
    fn tuning_singleton_and_brute_force() {
        let mut rng = crate::rng::rng_from_seed(2);
        let x = Axis::linspace("x", 0.0, 1.0, 40).unwrap();
        let t = Axis::linspace("t", 0.0, 1.0, 30).unwrap();
        let f = Field::from_fn(vec![x, t], |c| (6.0 * c[0]).sin() * (2.0 * c[1]).cos()).unwrap();
        let noisy = f.with_data(f.data().iter().map(|v| v + 0.2 * (rng.random::<f64>() - 0.5)).collect()).unwrap();

        let single = tune_savgol(&noisy, &[2.0], &[7], 3).unwrap();
        assert_eq!((single.sigma, single.window), (2.0, 7));

        let tuned = tune_savgol(&noisy, &[1.0, 2.0], &[5, 7], 3).unwrap();
        let mut best = (f64::INFINITY, 0.0, 0);
        for w in [5, 7] {
            for s in [1.0, 2.0] {
                let sg = savgol_smooth(&noisy, SavgolConfig::new(w, 3).unwrap()).unwrap();
                let gb = gaussian_smooth(&noisy, s).unwrap();
                let m = mse(sg.data(), gb.data());
                if m < best.0 {
                    best = (m, s, w);
                }
            }
        }
        assert_eq!((tuned.sigma, tuned.window), (best.1, best.2));
        assert!((tuned.mse - best.0).abs() <= 1e-15);
    }

    #[test]
    fn tuning_ties_pick_smallest_window() {
        let x = Axis::linspace("x", 0.0, 1.0, 40).unwrap();
        let t = Axis::linspace("t", 0.0, 1.0, 30).unwrap();
        let f = Field::from_fn(vec![x, t], |_| 0.7).unwrap();
        let tuned = tune_savgol(&f, &[3.0, 1.0], &[11, 9, 7, 5], 3).unwrap();
        assert_eq!((tuned.window, tuned.sigma), (5, 1.0));
    }
}
