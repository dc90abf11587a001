//! Regression datasets: per-point variable columns plus a time-derivative target.

use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoise::{savgol_derivative, savgol_smooth, SavgolConfig};
use crate::error::{Error, Result};
use crate::field::{Field, SampleSet};
use crate::surrogate::Surrogate;

/// Column-major regression table.
///
/// Variable columns follow the canonical order `u, u_x, u_xx, u_xxx, u_y,
/// u_yy` (restricted to what the library requests).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    target_name: String,
    target: Vec<f64>,
    dropped: usize,
}

impl FeatureTable {
    pub fn new(
        names: Vec<String>,
        columns: Vec<Vec<f64>>,
        target_name: impl Into<String>,
        target: Vec<f64>,
    ) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Schema(format!(
                "{} names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Schema(format!("duplicate column `{n}`")));
            }
        }
        if let Some((n, c)) = names.iter().zip(&columns).find(|(_, c)| c.len() != target.len()) {
            return Err(Error::Schema(format!(
                "column `{n}` has {} rows, target has {}",
                c.len(),
                target.len()
            )));
        }
        if columns.iter().flatten().chain(&target).any(|v| !v.is_finite()) {
            return Err(Error::Schema("feature table entries must be finite".into()));
        }
        Ok(FeatureTable {
            names,
            columns,
            target_name: target_name.into(),
            target,
            dropped: 0,
        })
    }

    /// Builds a table from row-major data, dropping rows with any non-finite
    /// entry. Fails if no rows remain.
    pub fn from_rows(
        names: Vec<String>,
        rows: impl IntoIterator<Item = (Vec<f64>, f64)>,
        target_name: impl Into<String>,
    ) -> Result<Self> {
        let mut columns = vec![Vec::new(); names.len()];
        let mut target = Vec::new();
        let mut dropped = 0;
        for (row, y) in rows {
            if row.len() != names.len() {
                return Err(Error::Schema(format!("row of length {} for {} columns", row.len(), names.len())));
            }
            if !y.is_finite() || row.iter().any(|v| !v.is_finite()) {
                dropped += 1;
                continue;
            }
            for (c, v) in columns.iter_mut().zip(row) {
                c.push(v);
            }
            target.push(y);
        }
        if target.is_empty() {
            return Err(Error::EmptyTable { dropped });
        }
        let mut table = FeatureTable::new(names, columns, target_name, target)?;
        table.dropped = dropped;
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn target_name(&self) -> &str {
        &self.target_name
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    /// Number of rows discarded for non-finite entries during construction.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    /// Table restricted to the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> FeatureTable {
        FeatureTable {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| rows.iter().map(|&i| c[i]).collect()).collect(),
            target_name: self.target_name.clone(),
            target: rows.iter().map(|&i| self.target[i]).collect(),
            dropped: 0,
        }
    }

    /// CSV with a header of the variable names followed by `target`, values
    /// written with 17 significant digits.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<&str> = self.names.iter().map(String::as_str).collect();
        header.push("target");
        out.write_record(&header).map_err(csv_error)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.len() {
            record.clear();
            record.extend(self.columns.iter().map(|c| format!("{:.16e}", c[i])));
            record.push(format!("{:.16e}", self.target[i]));
            out.write_record(&record).map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`FeatureTable::write_csv`]. The last
    /// column is the target and is given `target_name`.
    pub fn read_csv(r: impl Read, target_name: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let header = reader.headers().map_err(csv_error)?.clone();
        if header.len() < 2 || &header[header.len() - 1] != "target" {
            return Err(Error::format("feature CSV needs variable columns followed by `target`"));
        }
        let names: Vec<String> = header.iter().take(header.len() - 1).map(str::to_string).collect();
        let mut columns = vec![Vec::new(); names.len()];
        let mut target = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(csv_error)?;
            if record.len() != header.len() {
                return Err(Error::format(format!("row {} has {} fields", line + 1, record.len())));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format(format!("row {}: `{s}` is not a number", line + 1)))
            };
            for (c, s) in columns.iter_mut().zip(record.iter()) {
                c.push(parse(s)?);
            }
            target.push(parse(&record[header.len() - 1])?);
        }
        if target.is_empty() {
            return Err(Error::EmptyTable { dropped: 0 });
        }
        FeatureTable::new(names, columns, target_name, target)
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::format(format!("csv: {e}"))
}

/// Where derivative columns come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeSource {
    Surrogate,
    Savgol,
    FiniteDiff,
}

impl FromStr for DerivativeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "surrogate" => Ok(DerivativeSource::Surrogate),
            "savgol" => Ok(DerivativeSource::Savgol),
            "finite_diff" => Ok(DerivativeSource::FiniteDiff),
            _ => Err(Error::config(format!(
                "unknown derivative source `{s}` (expected surrogate, savgol or finite_diff)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LibrarySpec {
    /// Highest derivative order along each spatial axis.
    pub max_order: usize,
    /// 1 for `u_t`, 2 for `u_tt`.
    pub target_order: usize,
    pub source: DerivativeSource,
}

impl Default for LibrarySpec {
    fn default() -> Self {
        LibrarySpec {
            max_order: 3,
            target_order: 1,
            source: DerivativeSource::Surrogate,
        }
    }
}

impl LibrarySpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_order > 3 {
            return Err(Error::config(format!("max_order {} exceeds 3", self.max_order)));
        }
        if !(1..=2).contains(&self.target_order) {
            return Err(Error::config(format!("target_order must be 1 or 2, got {}", self.target_order)));
        }
        Ok(())
    }
}

/// Derivative provider matching [`LibrarySpec::source`].
#[derive(Debug, Clone, Copy)]
pub enum Derivatives<'a> {
    Surrogate(&'a Surrogate),
    Savgol(SavgolConfig),
    FiniteDiff,
}

impl Derivatives<'_> {
    pub fn source(&self) -> DerivativeSource {
        match self {
            Derivatives::Surrogate(_) => DerivativeSource::Surrogate,
            Derivatives::Savgol(_) => DerivativeSource::Savgol,
            Derivatives::FiniteDiff => DerivativeSource::FiniteDiff,
        }
    }
}

fn derivative_name(axis: &str, order: usize) -> String {
    format!("u_{}", axis.repeat(order))
}

/// Variable columns for a field whose last axis is time: `u`, then pure
/// derivatives of orders `1..=max_order` along each spatial axis in turn.
pub fn variable_names(field: &Field, max_order: usize) -> Vec<String> {
    let spatial = &field.axes()[..field.ndim() - 1];
    std::iter::once("u".to_string())
        .chain(
            spatial
                .iter()
                .flat_map(|a| (1..=max_order).map(move |k| derivative_name(&a.name, k))),
        )
        .collect()
}

pub fn target_name(field: &Field, order: usize) -> String {
    derivative_name(&field.time_axis().name, order)
}

/// One row per sampled point: variable columns in [`variable_names`] order
/// and the time derivative of `lib.target_order` as target.
///
/// Grid-based sources skip samples whose stencil would leave the grid along
/// any axis. Rows with non-finite entries are dropped and counted.
pub fn build_feature_table(
    field: &Field,
    samples: &SampleSet,
    lib: &LibrarySpec,
    source: &Derivatives,
) -> Result<FeatureTable> {
    lib.validate()?;
    if source.source() != lib.source {
        return Err(Error::config(format!(
            "library expects {:?} derivatives but {:?} were supplied",
            lib.source,
            source.source()
        )));
    }
    if field.ndim() < 2 {
        return Err(Error::domain("field needs at least one spatial axis and a time axis"));
    }
    if let Some(&bad) = samples.indices.iter().find(|&&i| i >= field.len()) {
        return Err(Error::domain(format!("sample index {bad} outside a grid of {}", field.len())));
    }
    let names = variable_names(field, lib.max_order);
    let target = target_name(field, lib.target_order);
    let time = field.ndim() - 1;
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(names.len());
    let y;
    let mut kept: Vec<usize> = samples.indices.clone();

    match source {
        Derivatives::Surrogate(s) => {
            let mut points = Array2::zeros((kept.len(), field.ndim()));
            for (r, &i) in kept.iter().enumerate() {
                for (c, v) in field.coords(i).into_iter().enumerate() {
                    points[[r, c]] = v;
                }
            }
            for axis in 0..time {
                let mut d = s.derivatives_along(points.view(), axis, lib.max_order)?;
                if axis == 0 {
                    columns.push(std::mem::take(&mut d[0]));
                }
                columns.extend(d.into_iter().skip(1));
            }
            y = s.derivatives_along(points.view(), time, lib.target_order)?.swap_remove(lib.target_order);
        }
        Derivatives::Savgol(cfg) => {
            let reach = cfg.half_width();
            kept.retain(|&i| inside(field, i, &vec![reach; field.ndim()]));
            let pick = |f: &Field| kept.iter().map(|&i| f.data()[i]).collect::<Vec<f64>>();
            columns.push(pick(&savgol_smooth(field, *cfg)?));
            for axis in 0..time {
                for k in 1..=lib.max_order {
                    columns.push(pick(&savgol_derivative(field, *cfg, axis, k)?));
                }
            }
            y = pick(&savgol_derivative(field, *cfg, time, lib.target_order)?);
        }
        Derivatives::FiniteDiff => {
            let mut reach = vec![fd_reach(lib.max_order); field.ndim()];
            reach[time] = fd_reach(lib.target_order);
            kept.retain(|&i| inside(field, i, &reach));
            columns.push(kept.iter().map(|&i| field.data()[i]).collect());
            for axis in 0..time {
                for k in 1..=lib.max_order {
                    columns.push(central_difference(field, &kept, axis, k)?);
                }
            }
            y = central_difference(field, &kept, time, lib.target_order)?;
        }
    }
    let rows = (0..y.len()).map(|r| (columns.iter().map(|c| c[r]).collect(), y[r]));
    FeatureTable::from_rows(names, rows, target)
}

fn fd_reach(order: usize) -> usize {
    match order {
        0 => 0,
        1 | 2 => 1,
        _ => 2,
    }
}

fn inside(field: &Field, flat: usize, reach: &[usize]) -> bool {
    let shape = field.shape();
    field
        .unravel(flat)
        .iter()
        .zip(&shape)
        .zip(reach)
        .all(|((&i, &n), &r)| i >= r && i + r < n)
}

/// Second-order central differences at the given flat indices.
fn central_difference(field: &Field, at: &[usize], axis: usize, order: usize) -> Result<Vec<f64>> {
    let h = field.axis(axis).spacing()?;
    let stride: usize = field.shape()[axis + 1..].iter().product();
    let u = field.data();
    Ok(at
        .iter()
        .map(|&i| {
            let f = |k: isize| u[(i as isize + k * stride as isize) as usize];
            match order {
                1 => (f(1) - f(-1)) / (2.0 * h),
                2 => (f(1) - 2.0 * f(0) + f(-1)) / (h * h),
                3 => (f(2) - 2.0 * f(1) + 2.0 * f(-1) - f(-2)) / (2.0 * h * h * h),
                _ => f(0),
            }
        })
        .collect())
}
