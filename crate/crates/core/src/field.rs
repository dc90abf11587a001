//! Spatio-temporal grid data.
//!
//! A [`Field`] is a scalar sampled on a tensor-product grid. Axes are ordered
//! with time last, and samples are stored row-major so the time index varies
//! fastest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

const MAGIC: &[u8; 4] = b"PDEF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub name: String,
    pub values: Vec<f64>,
}

impl Axis {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if values.len() < 3 {
            return Err(Error::domain(format!(
                "axis `{name}` needs at least 3 points, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("axis `{name}` has non-finite coordinates")));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain(format!("axis `{name}` is not strictly increasing")));
        }
        Ok(Axis { name, values })
    }

    /// `count` points from `start` to `end`, both included.
    pub fn linspace(name: impl Into<String>, start: f64, end: f64, count: usize) -> Result<Self> {
        let n = count.max(1);
        let step = if n > 1 { (end - start) / (n - 1) as f64 } else { 0.0 };
        Axis::new(name, (0..n).map(|i| start + step * i as f64).collect())
    }

    /// `count` points starting at `start` with spacing `(end - start) / count`,
    /// i.e. `end` excluded. This is the natural layout for periodic directions.
    pub fn periodic(name: impl Into<String>, start: f64, end: f64, count: usize) -> Result<Self> {
        let step = (end - start) / count as f64;
        Axis::new(name, (0..count).map(|i| start + step * i as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.values[0]
    }

    pub fn last(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Grid spacing when the axis is uniform to within 1e-6 relative.
    pub fn uniform_spacing(&self) -> Option<f64> {
        let n = self.values.len();
        let h = (self.last() - self.first()) / (n - 1) as f64;
        let tol = 1e-6 * h.abs();
        self.values
            .windows(2)
            .all(|w| ((w[1] - w[0]) - h).abs() <= tol)
            .then_some(h)
    }

    pub fn spacing(&self) -> Result<f64> {
        self.uniform_spacing()
            .ok_or_else(|| Error::domain(format!("axis `{}` is not uniformly spaced", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    axes: Vec<Axis>,
    data: Vec<f64>,
}

impl Field {
    pub fn new(axes: Vec<Axis>, data: Vec<f64>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::domain("a field needs at least one axis"));
        }
        let n: usize = axes.iter().map(Axis::len).product();
        if n != data.len() {
            return Err(Error::domain(format!(
                "data length {} does not match grid size {n}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("field samples must be finite"));
        }
        Ok(Field { axes, data })
    }

    pub fn from_fn(axes: Vec<Axis>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let shape: Vec<usize> = axes.iter().map(Axis::len).collect();
        let n: usize = shape.iter().product();
        let mut coords = vec![0.0; axes.len()];
        let mut data = Vec::with_capacity(n);
        for flat in 0..n {
            let mut rem = flat;
            for (d, axis) in axes.iter().enumerate().rev() {
                coords[d] = axis.values[rem % shape[d]];
                rem /= shape[d];
            }
            data.push(f(&coords));
        }
        Field::new(axes, data)
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, d: usize) -> &Axis {
        &self.axes[d]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn ndim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Axis::len).collect()
    }

    /// Same grid, new samples.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Field::new(self.axes.clone(), data)
    }

    pub fn time_axis(&self) -> &Axis {
        &self.axes[self.axes.len() - 1]
    }

    /// Multi-index of a flat position.
    pub fn unravel(&self, flat: usize) -> Vec<usize> {
        let shape = self.shape();
        let mut idx = vec![0; shape.len()];
        let mut rem = flat;
        for d in (0..shape.len()).rev() {
            idx[d] = rem % shape[d];
            rem /= shape[d];
        }
        idx
    }

    pub fn coords(&self, flat: usize) -> Vec<f64> {
        self.unravel(flat)
            .iter()
            .zip(&self.axes)
            .map(|(&i, a)| a.values[i])
            .collect()
    }

    /// Samples at time index `k`, in row-major order over the spatial axes.
    pub fn time_slice(&self, k: usize) -> Vec<f64> {
        let nt = self.time_axis().len();
        self.data.iter().skip(k).step_by(nt).copied().collect()
    }

    /// Population standard deviation over all samples.
    pub fn std(&self) -> f64 {
        population_std(&self.data)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Applies `op` to every 1-D lane of `data` along `axis`.
///
/// `op` receives the lane and writes its result into the output buffer of the
/// same length.
pub(crate) fn map_lanes(
    data: &[f64],
    shape: &[usize],
    axis: usize,
    mut op: impl FnMut(&[f64], &mut [f64]),
) -> Vec<f64> {
    let n = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; data.len()];
    let mut lane = vec![0.0; n];
    let mut res = vec![0.0; n];
    for o in 0..outer {
        for s in 0..stride {
            let base = o * n * stride + s;
            for i in 0..n {
                lane[i] = data[base + i * stride];
            }
            op(&lane, &mut res);
            for i in 0..n {
                out[base + i * stride] = res[i];
            }
        }
    }
    out
}

/// Returns `u + level * std(u) * g` with `g` i.i.d. standard normal.
pub fn add_noise(field: &Field, level: f64, seed: u64) -> Result<Field> {
    if !(level >= 0.0) || !level.is_finite() {
        return Err(Error::domain(format!("noise level must be >= 0, got {level}")));
    }
    let scale = level * field.std();
    if scale == 0.0 {
        return Ok(field.clone());
    }
    let mut rng = rng_from_seed(seed);
    let data = field
        .data
        .iter()
        .map(|&u| {
            let g: f64 = StandardNormal.sample(&mut rng);
            u + scale * g
        })
        .collect();
    field.with_data(data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// Flat grid indices, ascending.
    pub indices: Vec<usize>,
    pub ratio: f64,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn full(n: usize) -> Self {
        SampleSet {
            indices: (0..n).collect(),
            ratio: 1.0,
        }
    }
}

pub fn sample_count(grid_size: usize, ratio: f64) -> usize {
    (ratio * grid_size as f64).round() as usize
}

/// Uniform random subset of grid points without replacement.
pub fn sample_points(field: &Field, ratio: f64, seed: u64) -> Result<SampleSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::domain(format!("sampling ratio must be in (0, 1], got {ratio}")));
    }
    let n = field.len();
    let m = sample_count(n, ratio);
    let mut indices = if m == n {
        (0..n).collect()
    } else {
        let mut rng = rng_from_seed(seed);
        index::sample(&mut rng, n, m).into_vec()
    };
    indices.sort_unstable();
    Ok(SampleSet { indices, ratio })
}

pub fn write_field(field: &Field, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_field_to(field, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_field_to(field: &Field, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(field.axes.len() as u32).to_le_bytes())?;
    for axis in &field.axes {
        let name = axis.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(axis.values.len() as u32).to_le_bytes())?;
        for v in &axis.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for v in &field.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_field(path: impl AsRef<Path>) -> Result<Field> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_field(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_field(bytes: &[u8]) -> Result<Field> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::format("bad magic, expected PDEF"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported version {version}")));
    }
    let ndim = c.u32()? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::format(format!("implausible axis count {ndim}")));
    }
    let mut axes = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::format("axis name is not UTF-8"))?
            .to_string();
        let count = c.u32()? as usize;
        if count.saturating_mul(8) > bytes.len() {
            return Err(Error::format(format!("truncated file: axis `{name}` claims {count} points")));
        }
        let values = (0..count).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        axes.push(Axis::new(name, values).map_err(|e| Error::format(e.to_string()))?);
    }
    let n: usize = axes.iter().map(Axis::len).product();
    let remaining = bytes.len() - c.pos;
    if remaining != n * 8 {
        return Err(Error::format(format!(
            "payload holds {} values but the axes describe {n}",
            remaining as f64 / 8.0
        )));
    }
    let data = (0..n).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    Field::new(axes, data).map_err(|e| Error::format(e.to_string()))
}
