//! Gated residual surrogate network and its input derivatives.
//!
//! The network maps normalized coordinates `X` to a scalar through
//!
//! ```text
//! U = φ(X W¹ + b¹),  V = φ(X W² + b²),  H¹ = U
//! Zᵏ = φ(Hᵏ Wᶻᵏ + bᶻᵏ),  Hᵏ⁺¹ = Hᵏ + (1 − Zᵏ) ⊙ U + Zᵏ ⊙ V
//! u = Hᴸ⁺¹ W + b
//! ```
//!
//! Input derivatives are propagated exactly with hyper-dual numbers: one
//! nilpotent unit per differentiation, so a jet carries `2^k` coefficients
//! indexed by subsets of units.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{lbfgs, Adam, LbfgsConfig};
use crate::rng::{derive_seed, rng_from_seed};

pub const MAX_DERIVATIVE_ORDER: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sine,
    Tanh,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Sine => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Sine),
            1 => Ok(Activation::Tanh),
            _ => Err(Error::format(format!("unknown activation code {c}"))),
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sine => x.sin(),
            Activation::Tanh => x.tanh(),
        }
    }

    /// `φ(x), φ'(x), ..., φ^(n)(x)` for `n ≤ 3`.
    fn derivatives(self, x: f64, n: usize) -> [f64; 4] {
        let mut d = match self {
            Activation::Sine => {
                let (s, c) = x.sin_cos();
                [s, c, -s, -c]
            }
            Activation::Tanh => {
                let t = x.tanh();
                let p = 1.0 - t * t;
                [t, p, -2.0 * t * p, p * (6.0 * t * t - 2.0)]
            }
        };
        d[n + 1..].iter_mut().for_each(|v| *v = 0.0);
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Number of gated layers `L`.
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub seed: u64,
    /// Adam minibatch steps.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate at the last step as a fraction of the initial one;
    /// the rate decays geometrically in between. 1 keeps it constant.
    pub lr_decay: f64,
    pub lbfgs_steps: usize,
    /// Training points used by the quasi-Newton polish.
    pub lbfgs_points: usize,
    pub validation_fraction: f64,
    /// Adam steps between validation checks.
    pub validate_every: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            depth: 4,
            width: 50,
            activation: Activation::Sine,
            seed: 0,
            epochs: 3000,
            batch_size: 1024,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            lbfgs_steps: 200,
            lbfgs_points: 4096,
            validation_fraction: 0.2,
            validate_every: 100,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.width < 1 {
            return Err(Error::config("network depth and width must be at least 1"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation fraction must lie in (0, 1)"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::config("lr_decay must be positive"));
        }
        if self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::config("batch_size and validate_every must be positive"));
        }
        Ok(())
    }
}

/// Raw network on normalized inputs. Parameters live in one flat vector:
/// `W¹, b¹, W², b²`, then `Wᶻᵏ, bᶻᵏ` per layer, then `W, b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    n_in: usize,
    width: usize,
    depth: usize,
    activation: Activation,
    params: Vec<f64>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    z: Vec<(usize, usize)>,
    w: usize,
    b: usize,
    len: usize,
}

fn layout(n_in: usize, width: usize, depth: usize) -> Layout {
    let mut at = 0;
    let mut take = |n: usize| {
        let o = at;
        at += n;
        o
    };
    let w1 = take(n_in * width);
    let b1 = take(width);
    let w2 = take(n_in * width);
    let b2 = take(width);
    let z = (0..depth).map(|_| (take(width * width), take(width))).collect();
    let w = take(width);
    let b = take(1);
    Layout {
        w1,
        b1,
        w2,
        b2,
        z,
        w,
        b,
        len: at,
    }
}

/// Borrowed weights of one network.
struct Weights<'a> {
    w1: ArrayView2<'a, f64>,
    b1: ArrayView1<'a, f64>,
    w2: ArrayView2<'a, f64>,
    b2: ArrayView1<'a, f64>,
    z: Vec<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)>,
    w: ArrayView1<'a, f64>,
    b: f64,
}

impl Network {
    pub fn zeros(n_in: usize, width: usize, depth: usize, activation: Activation) -> Network {
        let len = layout(n_in, width, depth).len;
        Network {
            n_in,
            width,
            depth,
            activation,
            params: vec![0.0; len],
        }
    }

    /// Glorot-uniform weights and zero biases, deterministic per `cfg.seed`.
    pub fn init(n_in: usize, cfg: &NetConfig) -> Result<Network> {
        cfg.validate()?;
        if n_in == 0 {
            return Err(Error::domain("network needs at least one input"));
        }
        let mut net = Network::zeros(n_in, cfg.width, cfg.depth, cfg.activation);
        let l = layout(n_in, cfg.width, cfg.depth);
        let mut rng = rng_from_seed(derive_seed(cfg.seed, 0));
        let mut fill = |params: &mut [f64], fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.iter_mut().for_each(|p| *p = rng.random_range(-bound..bound));
        };
        let (w, n) = (cfg.width, n_in);
        fill(&mut net.params[l.w1..l.w1 + n * w], n, w);
        fill(&mut net.params[l.w2..l.w2 + n * w], n, w);
        for &(o, _) in &l.z {
            fill(&mut net.params[o..o + w * w], w, w);
        }
        fill(&mut net.params[l.w..l.w + w], w, 1);
        Ok(net)
    }

    pub fn inputs(&self) -> usize {
        self.n_in
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::domain(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn weights<'a>(&self, p: &'a [f64]) -> Weights<'a> {
        let l = layout(self.n_in, self.width, self.depth);
        let (n, w) = (self.n_in, self.width);
        let mat = |o: usize, r: usize, c: usize| ArrayView2::from_shape((r, c), &p[o..o + r * c]).expect("layout");
        let vec = |o: usize, len: usize| ArrayView1::from(&p[o..o + len]);
        Weights {
            w1: mat(l.w1, n, w),
            b1: vec(l.b1, w),
            w2: mat(l.w2, n, w),
            b2: vec(l.b2, w),
            z: l.z.iter().map(|&(wo, bo)| (mat(wo, w, w), vec(bo, w))).collect(),
            w: vec(l.w, w),
            b: p[l.b],
        }
    }

    fn check_points(&self, points: &ArrayView2<f64>) -> Result<()> {
        if points.ncols() != self.n_in {
            return Err(Error::domain(format!(
                "points have {} coordinates, network expects {}",
                points.ncols(),
                self.n_in
            )));
        }
        Ok(())
    }

    /// Network output at each row of `points`.
    pub fn forward(&self, points: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_points(&points)?;
        let wt = self.weights(&self.params);
        let act = |a: Array2<f64>| a.mapv(|v| self.activation.apply(v));
        let u = act(points.dot(&wt.w1) + &wt.b1);
        let v = act(points.dot(&wt.w2) + &wt.b2);
        let mut h = u.clone();
        let diff = &v - &u;
        for (wz, bz) in &wt.z {
            let z = act(h.dot(wz) + bz);
            h = h + &u + &(z * &diff);
        }
        Ok((h.dot(&wt.w) + wt.b).to_vec())
    }

    /// Mean squared error on `(x, y)` and its parameter gradient.
    fn loss_grad(&self, params: &[f64], x: ArrayView2<f64>, y: ArrayView1<f64>, grad: &mut [f64]) -> f64 {
        let wt = self.weights(params);
        let l = layout(self.n_in, self.width, self.depth);
        let act = self.activation;
        let eval = |a: &Array2<f64>| -> (Array2<f64>, Array2<f64>) {
            let mut f = a.clone();
            let mut d = a.clone();
            ndarray::Zip::from(&mut f).and(&mut d).for_each(|f, d| {
                let v = act.derivatives(*f, 1);
                *f = v[0];
                *d = v[1];
            });
            (f, d)
        };
        let (u, du) = eval(&(x.dot(&wt.w1) + &wt.b1));
        let (v, dv) = eval(&(x.dot(&wt.w2) + &wt.b2));
        let diff = &v - &u;
        let mut hs = vec![u.clone()];
        let mut zs = Vec::with_capacity(self.depth);
        let mut dzs = Vec::with_capacity(self.depth);
        for (wz, bz) in &wt.z {
            let h = hs.last().expect("input layer");
            let (z, dz) = eval(&(h.dot(wz) + bz));
            let next = h + &u + &(&z * &diff);
            zs.push(z);
            dzs.push(dz);
            hs.push(next);
        }
        let h_out = hs.last().expect("output layer");
        let pred = h_out.dot(&wt.w) + wt.b;
        let n = y.len() as f64;
        let resid = &pred - &y;
        let loss = resid.dot(&resid) / n;
        let g = resid * (2.0 / n);

        grad.iter_mut().for_each(|v| *v = 0.0);
        let mut put = |o: usize, vals: &[f64]| grad[o..o + vals.len()].copy_from_slice(vals);
        put(l.w, h_out.t().dot(&g).as_slice().expect("contiguous"));
        put(l.b, &[g.sum()]);
        let mut dh = g.view().insert_axis(Axis(1)).dot(&wt.w.insert_axis(Axis(0)));
        let mut du_acc = Array2::<f64>::zeros(u.raw_dim());
        let mut dv_acc = Array2::<f64>::zeros(u.raw_dim());
        for k in (0..self.depth).rev() {
            let z = &zs[k];
            du_acc = du_acc + &dh * &z.mapv(|v| 1.0 - v);
            dv_acc = dv_acc + &dh * z;
            let ds = &dh * &diff * &dzs[k];
            let (wz, _) = &wt.z[k];
            put(l.z[k].0, hs[k].t().dot(&ds).as_standard_layout().as_slice().expect("contiguous"));
            put(l.z[k].1, ds.sum_axis(Axis(0)).as_slice().expect("contiguous"));
            dh = dh + ds.dot(&wz.t());
        }
        du_acc = du_acc + dh;
        let da1 = du_acc * du;
        let da2 = dv_acc * dv;
        put(l.w1, x.t().dot(&da1).as_standard_layout().as_slice().expect("contiguous"));
        put(l.b1, da1.sum_axis(Axis(0)).as_slice().expect("contiguous"));
        put(l.w2, x.t().dot(&da2).as_standard_layout().as_slice().expect("contiguous"));
        put(l.b2, da2.sum_axis(Axis(0)).as_slice().expect("contiguous"));
        loss
    }

    /// Mixed partial derivative `∂^|α| u / ∂x^α` for a multi-index `α` with
    /// one entry per input.
    pub fn derivative(&self, points: ArrayView2<f64>, multi_index: &[usize]) -> Result<Vec<f64>> {
        self.check_points(&points)?;
        if multi_index.len() != self.n_in {
            return Err(Error::domain(format!(
                "multi-index has {} entries, network has {} inputs",
                multi_index.len(),
                self.n_in
            )));
        }
        let total: usize = multi_index.iter().sum();
        if total > MAX_DERIVATIVE_ORDER {
            return Err(Error::UnsupportedOrder(total));
        }
        let dirs: Vec<usize> = multi_index
            .iter()
            .enumerate()
            .flat_map(|(a, &k)| std::iter::repeat_n(a, k))
            .collect();
        let full = (1 << dirs.len()) - 1;
        Ok(self.jet(points, &dirs, &[full]).swap_remove(0))
    }

    /// Pure derivatives of orders `0..=max_order` along input `axis`.
    pub fn derivatives_along(&self, points: ArrayView2<f64>, axis: usize, max_order: usize) -> Result<Vec<Vec<f64>>> {
        self.check_points(&points)?;
        if axis >= self.n_in {
            return Err(Error::domain(format!("axis {axis} out of range")));
        }
        if max_order > MAX_DERIVATIVE_ORDER {
            return Err(Error::UnsupportedOrder(max_order));
        }
        let masks: Vec<usize> = (0..=max_order).map(|k| (1 << k) - 1).collect();
        Ok(self.jet(points, &vec![axis; max_order], &masks))
    }

    /// Propagates hyper-dual jets with one unit per entry of `dirs` and
    /// returns the output coefficients at `masks`.
    fn jet(&self, points: ArrayView2<f64>, dirs: &[usize], masks: &[usize]) -> Vec<Vec<f64>> {
        const CHUNK: usize = 2048;
        let wt = self.weights(&self.params);
        let m = 1usize << dirs.len();
        let mut out = vec![Vec::with_capacity(points.nrows()); masks.len()];
        for start in (0..points.nrows()).step_by(CHUNK) {
            let x = points.slice(s![start..(start + CHUNK).min(points.nrows()), ..]);
            let rows = x.nrows();
            let mut xj = vec![Array2::<f64>::zeros((rows, self.n_in)); m];
            xj[0].assign(&x);
            for (i, &d) in dirs.iter().enumerate() {
                xj[1 << i].column_mut(d).fill(1.0);
            }
            let linear = |j: &[Array2<f64>], w: &ArrayView2<f64>, b: &ArrayView1<f64>| -> Vec<Array2<f64>> {
                let mut r: Vec<Array2<f64>> = j.iter().map(|c| c.dot(w)).collect();
                r[0] += b;
                r
            };
            let u = jet_act(&linear(&xj, &wt.w1, &wt.b1), self.activation, dirs.len());
            let v = jet_act(&linear(&xj, &wt.w2, &wt.b2), self.activation, dirs.len());
            let diff: Vec<Array2<f64>> = v.iter().zip(&u).map(|(a, b)| a - b).collect();
            let mut h = u.clone();
            for (wz, bz) in &wt.z {
                let z = jet_act(&linear(&h, wz, bz), self.activation, dirs.len());
                let zd = jet_mul(&z, &diff);
                for s in 0..m {
                    h[s] = &h[s] + &u[s] + &zd[s];
                }
            }
            for (o, &mask) in out.iter_mut().zip(masks) {
                let y = h[mask].dot(&wt.w);
                o.extend(y.iter().map(|v| if mask == 0 { v + wt.b } else { *v }));
            }
        }
        out
    }
}

/// Product of hyper-dual jets: `c[S] = Σ_{T ⊆ S} a[T] b[S \ T]`.
fn jet_mul(a: &[Array2<f64>], b: &[Array2<f64>]) -> Vec<Array2<f64>> {
    (0..a.len())
        .map(|s| {
            let mut acc = &a[0] * &b[s];
            let mut t = s;
            while t > 0 {
                acc = acc + &a[t] * &b[s & !t];
                t = (t - 1) & s;
            }
            acc
        })
        .collect()
}

/// `φ(a) = Σ_j φ^(j)(a₀) δ^j / j!` with `δ = a - a₀` nilpotent of order `k+1`.
fn jet_act(a: &[Array2<f64>], act: Activation, k: usize) -> Vec<Array2<f64>> {
    let shape = a[0].raw_dim();
    let mut derivs: Vec<Array2<f64>> = (0..=k).map(|_| Array2::zeros(shape)).collect();
    for (idx, &x) in a[0].indexed_iter() {
        let d = act.derivatives(x, k);
        for (j, arr) in derivs.iter_mut().enumerate() {
            arr[idx] = d[j];
        }
    }
    let mut out: Vec<Array2<f64>> = (0..a.len()).map(|_| Array2::zeros(shape)).collect();
    out[0].assign(&derivs[0]);
    if k == 0 {
        return out;
    }
    let mut delta = a.to_vec();
    delta[0].fill(0.0);
    let mut power = delta.clone();
    let mut factorial = 1.0;
    for (j, dj) in derivs.iter().enumerate().skip(1) {
        factorial *= j as f64;
        for s in 1..a.len() {
            out[s] = &out[s] + &(&power[s] * dj / factorial);
        }
        if j < k {
            power = jet_mul(&power, &delta);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Normalized surrogate

/// A trained network together with the affine maps between physical
/// coordinates/values and the network's normalized ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub net: Network,
    pub input_lo: Vec<f64>,
    pub input_hi: Vec<f64>,
    pub output_mean: f64,
    pub output_std: f64,
}

const MAGIC: &[u8; 4] = b"PDEN";
const VERSION: u32 = 1;

impl Surrogate {
    fn input_scale(&self) -> Vec<f64> {
        self.input_lo
            .iter()
            .zip(&self.input_hi)
            .map(|(lo, hi)| if hi > lo { 2.0 / (hi - lo) } else { 1.0 })
            .collect()
    }

    fn normalize(&self, points: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.check_points(&points)?;
        let scale = self.input_scale();
        let mut x = points.to_owned();
        for (j, mut col) in x.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.input_lo[j]) * scale[j] - 1.0);
        }
        Ok(x)
    }

    pub fn predict(&self, points: ArrayView2<f64>) -> Result<Vec<f64>> {
        let x = self.normalize(points)?;
        Ok(self
            .net
            .forward(x.view())?
            .into_iter()
            .map(|v| v * self.output_std + self.output_mean)
            .collect())
    }

    /// Physical-units derivative for a multi-index over the inputs.
    pub fn derivative(&self, points: ArrayView2<f64>, multi_index: &[usize]) -> Result<Vec<f64>> {
        let x = self.normalize(points)?;
        if multi_index.iter().all(|&k| k == 0) {
            return self.predict(points);
        }
        let scale = self.input_scale();
        let factor = self.output_std
            * multi_index
                .iter()
                .zip(&scale)
                .map(|(&k, s)| s.powi(k as i32))
                .product::<f64>();
        Ok(self.net.derivative(x.view(), multi_index)?.into_iter().map(|v| v * factor).collect())
    }

    /// Physical-units pure derivatives of orders `0..=max_order` along `axis`.
    pub fn derivatives_along(&self, points: ArrayView2<f64>, axis: usize, max_order: usize) -> Result<Vec<Vec<f64>>> {
        let x = self.normalize(points)?;
        let s = self.input_scale().get(axis).copied().unwrap_or(1.0);
        let mut out = self.net.derivatives_along(x.view(), axis, max_order)?;
        for (k, col) in out.iter_mut().enumerate() {
            let factor = self.output_std * s.powi(k as i32);
            let shift = if k == 0 { self.output_mean } else { 0.0 };
            col.iter_mut().for_each(|v| *v = *v * factor + shift);
        }
        Ok(out)
    }

    /// Versioned little-endian blob: magic, version, shape, normalization,
    /// then the flat parameter vector.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let net = &self.net;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[net.activation.code()])?;
        for v in [net.n_in, net.width, net.depth] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in self.input_lo.iter().chain(&self.input_hi).chain([&self.output_mean, &self.output_std]) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(net.params.len() as u64).to_le_bytes())?;
        for p in &net.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Surrogate> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut c = Cursor { bytes: &bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::format("not a network checkpoint"));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let activation = Activation::from_code(c.take(1)?[0])?;
        let (n_in, width, depth) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
        if n_in == 0 || width == 0 || depth == 0 || n_in > 16 || width > 1 << 16 || depth > 1 << 10 {
            return Err(Error::format("implausible network shape in checkpoint"));
        }
        let input_lo = c.f64s(n_in)?;
        let input_hi = c.f64s(n_in)?;
        let stats = c.f64s(2)?;
        let count = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")) as usize;
        let mut net = Network::zeros(n_in, width, depth, activation);
        if count != net.params.len() {
            return Err(Error::format(format!(
                "checkpoint has {count} parameters, shape needs {}",
                net.params.len()
            )));
        }
        net.params = c.f64s(count)?;
        if c.pos != bytes.len() {
            return Err(Error::format("trailing bytes after network checkpoint"));
        }
        Ok(Surrogate {
            net,
            input_lo,
            input_hi,
            output_mean: stats[0],
            output_std: stats[1],
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Surrogate> {
        Surrogate::read_from(&mut std::fs::File::open(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format("network checkpoint is truncated"))?;
        self.pos += n;
        Ok(chunk)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n)
            .map(|_| Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"))))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Best-so-far training MSE (normalized units) at each check.
    pub loss_history: Vec<f64>,
    pub validation_history: Vec<f64>,
    pub best_validation: f64,
    /// Adam step of the kept parameters; `epochs + 1` means the polish.
    pub best_step: usize,
    pub train_points: usize,
    pub validation_points: usize,
}

/// Seeded shuffle split into (train, validation) index lists.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(derive_seed(seed, 1)));
    let n_val = ((n as f64 * validation_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Fits a surrogate to `values` at the rows of `points`.
///
/// Coordinates are mapped to [-1, 1] per column and values standardized.
/// Adam minibatch steps are followed by an L-BFGS polish on a subset of the
/// training points; the parameters with the lowest validation MSE seen at
/// any check are returned.
pub fn fit_surrogate(points: ArrayView2<f64>, values: &[f64], cfg: &NetConfig) -> Result<(Surrogate, TrainReport)> {
    cfg.validate()?;
    let n = points.nrows();
    if n < 10 {
        return Err(Error::domain(format!("need at least 10 samples to train, got {n}")));
    }
    if values.len() != n {
        return Err(Error::domain(format!("{n} points but {} values", values.len())));
    }
    if points.iter().chain(values).any(|v| !v.is_finite()) {
        return Err(Error::domain("training data must be finite"));
    }
    let dim = points.ncols();
    let lo: Vec<f64> = (0..dim).map(|j| points.column(j).fold(f64::INFINITY, |m, v| m.min(*v))).collect();
    let hi: Vec<f64> = (0..dim).map(|j| points.column(j).fold(f64::NEG_INFINITY, |m, v| m.max(*v))).collect();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let mut surrogate = Surrogate {
        net: Network::init(dim, cfg)?,
        input_lo: lo,
        input_hi: hi,
        output_mean: mean,
        output_std: if std > 0.0 { std } else { 1.0 },
    };
    let x = surrogate.normalize(points)?;
    let y = Array1::from_iter(values.iter().map(|v| (v - mean) / surrogate.output_std));
    let report = train(&mut surrogate.net, x.view(), y.view(), cfg)?;
    Ok((surrogate, report))
}

/// Trains `net` in place on normalized data.
pub fn train(net: &mut Network, x: ArrayView2<f64>, y: ArrayView1<f64>, cfg: &NetConfig) -> Result<TrainReport> {
    cfg.validate()?;
    net.check_points(&x)?;
    let (train_idx, val_idx) = split_indices(x.nrows(), cfg.validation_fraction, cfg.seed);
    let xt = x.select(Axis(0), &train_idx);
    let yt = y.select(Axis(0), &train_idx);
    let xv = x.select(Axis(0), &val_idx);
    let yv = y.select(Axis(0), &val_idx);
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 2));
    let monitor: Vec<usize> = {
        let mut all: Vec<usize> = (0..train_idx.len()).collect();
        all.shuffle(&mut rng);
        all.truncate(4096);
        all
    };
    let xm = xt.select(Axis(0), &monitor);
    let ym = yt.select(Axis(0), &monitor);
    let mse = |net: &Network, x: &Array2<f64>, y: &Array1<f64>| -> Result<f64> {
        let p = net.forward(x.view())?;
        Ok(p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
    };
    let diverged = |step: usize, lr: f64| {
        Error::Training(format!(
            "loss became non-finite at step {step}; try a learning rate below {lr:.1e}"
        ))
    };

    let mut report = TrainReport {
        loss_history: Vec::new(),
        validation_history: Vec::new(),
        best_validation: f64::INFINITY,
        best_step: 0,
        train_points: train_idx.len(),
        validation_points: val_idx.len(),
    };
    let mut best = net.params.clone();
    let mut best_train = f64::INFINITY;
    let mut check = |net: &Network, step: usize, report: &mut TrainReport, best: &mut Vec<f64>| -> Result<()> {
        let tr = mse(net, &xm, &ym)?;
        let va = mse(net, &xv, &yv)?;
        if !tr.is_finite() || !va.is_finite() {
            return Err(diverged(step, cfg.learning_rate));
        }
        best_train = best_train.min(tr);
        report.loss_history.push(best_train);
        report.validation_history.push(va);
        if va < report.best_validation {
            report.best_validation = va;
            report.best_step = step;
            best.copy_from_slice(&net.params);
        }
        Ok(())
    };
    check(net, 0, &mut report, &mut best)?;

    let batch = cfg.batch_size.min(train_idx.len());
    let mut adam = Adam::new(net.params.len(), cfg.learning_rate);
    let mut grad = vec![0.0; net.params.len()];
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let (mut xb, mut yb) = (Array2::zeros((batch, x.ncols())), Array1::zeros(batch));
    for step in 1..=cfg.epochs {
        adam.lr = cfg.learning_rate * cfg.lr_decay.powf((step - 1) as f64 / cfg.epochs.max(1) as f64);
        if batch < train_idx.len() {
            let (chosen, _) = order.partial_shuffle(&mut rng, batch);
            for (r, &i) in chosen.iter().enumerate() {
                xb.row_mut(r).assign(&xt.row(i));
                yb[r] = yt[i];
            }
        } else {
            xb.assign(&xt);
            yb.assign(&yt);
        }
        let params = net.params.clone();
        let loss = net.loss_grad(&params, xb.view(), yb.view(), &mut grad);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged(step, adam.lr));
        }
        adam.step(&mut net.params, &grad);
        if step % cfg.validate_every == 0 || step == cfg.epochs {
            check(net, step, &mut report, &mut best)?;
        }
    }

    if cfg.lbfgs_steps > 0 {
        let mut sub: Vec<usize> = (0..train_idx.len()).collect();
        sub.shuffle(&mut rng);
        sub.truncate(cfg.lbfgs_points.max(1));
        let xs = xt.select(Axis(0), &sub);
        let ys = yt.select(Axis(0), &sub);
        let shape = net.clone();
        let mut objective = |p: &[f64], g: &mut [f64]| shape.loss_grad(p, xs.view(), ys.view(), g);
        let lcfg = LbfgsConfig {
            max_iter: cfg.lbfgs_steps,
            history: 20,
            ..Default::default()
        };
        let min = lbfgs(&mut objective, net.params.clone(), &lcfg);
        net.params = min.x;
        check(net, cfg.epochs + 1, &mut report, &mut best)?;
    }
    net.params = best;
    Ok(report)
}
