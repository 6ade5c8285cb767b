//! Data-driven perception error statistics: residuals, error bound and S-slope.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::serde_matrix;

/// Above this many samples the pairwise scan runs on an evenly strided subsample.
pub const MAX_PAIRWISE_SAMPLES: usize = 5000;

/// Ground-truth states alongside the perception output at each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
}

impl TrajectoryDataset {
    pub fn new(times: Vec<f64>, states: Vec<DVector<f64>>, measurements: Vec<DVector<f64>>) -> Result<Self> {
        let data = Self {
            times,
            states,
            measurements,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.times.len();
        if len < 2 {
            return Err(invalid("dataset", format!("needs at least 2 samples, got {len}")));
        }
        if self.states.len() != len || self.measurements.len() != len {
            return Err(mismatch(
                "dataset lengths",
                len,
                format!("{} states, {} measurements", self.states.len(), self.measurements.len()),
            ));
        }
        let n = self.states[0].len();
        let p = self.measurements[0].len();
        if self.states.iter().any(|x| x.len() != n) || self.measurements.iter().any(|y| y.len() != p) {
            return Err(invalid("dataset", "ragged sample dimensions"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, DVector::len)
    }

    pub fn measurement_dim(&self) -> usize {
        self.measurements.first().map_or(0, DVector::len)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.state_dim()).map(|i| format!("x{i}")));
        header.extend((0..self.measurement_dim()).map(|i| format!("y{i}")));
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.states[k].iter().map(f64::to_string));
            row.extend(self.measurements[k].iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "<dataset>".into(),
            source,
        })?;
        Ok(())
    }

    /// Parses `t, x0.., y0..`; `source` names the input in error messages.
    pub fn read_csv<R: Read>(reader: R, source: &str) -> Result<Self> {
        let parse_err = |line: usize, reason: String| Error::Parse {
            path: source.to_string(),
            line,
            reason,
        };
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        let names: Vec<&str> = header.iter().collect();
        if names.first() != Some(&"t") {
            return Err(parse_err(1, "first column must be `t`".into()));
        }
        let n = names.iter().filter(|h| h.starts_with('x')).count();
        let p = names.iter().filter(|h| h.starts_with('y')).count();
        let expected: Vec<String> = std::iter::once("t".to_string())
            .chain((0..n).map(|i| format!("x{i}")))
            .chain((0..p).map(|i| format!("y{i}")))
            .collect();
        if names != expected.iter().map(String::as_str).collect::<Vec<_>>() || n == 0 || p == 0 {
            return Err(parse_err(1, format!("expected header {}", expected.join(","))));
        }
        let (mut times, mut states, mut meas) = (Vec::new(), Vec::new(), Vec::new());
        for (idx, record) in rdr.records().enumerate() {
            let line = idx + 2;
            let record = record.map_err(|e| parse_err(line, e.to_string()))?;
            if record.len() != 1 + n + p {
                return Err(parse_err(line, format!("expected {} fields, got {}", 1 + n + p, record.len())));
            }
            let mut values = Vec::with_capacity(record.len());
            for (col, field) in record.iter().enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(line, format!("column `{}`: cannot parse `{field}`", names[col])))?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("column `{}`: non-finite value", names[col])));
                }
                values.push(v);
            }
            times.push(values[0]);
            states.push(DVector::from_column_slice(&values[1..1 + n]));
            meas.push(DVector::from_column_slice(&values[1 + n..]));
        }
        Self::new(times, states, meas).map_err(|e| parse_err(0, e.to_string()))
    }

    pub fn read_csv_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_csv(std::io::BufReader::new(file), &path.display().to_string())
    }
}

/// Fitted perception error profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorModel {
    pub epsilon_e: f64,
    pub s_hat: f64,
    /// Slope at quantile 1, the unfiltered maximum.
    pub s_hat_max: f64,
    pub radius_r: f64,
    pub quantile: f64,
    pub epsilon_quantile: f64,
    #[serde(with = "serde_matrix::vector_list")]
    pub training_states: Vec<DVector<f64>>,
}

/// The three numbers synthesis needs from an error profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptionBounds {
    pub slope: f64,
    pub epsilon_e: f64,
    pub radius: f64,
}

impl PerceptionBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.slope >= 0.0 && self.slope.is_finite()) {
            return Err(invalid("slope", format!("must be non-negative, got {}", self.slope)));
        }
        if !(self.epsilon_e >= 0.0 && self.epsilon_e.is_finite()) {
            return Err(invalid("epsilon_e", format!("must be non-negative, got {}", self.epsilon_e)));
        }
        if !(self.radius > 0.0) {
            return Err(invalid("radius", format!("must be positive, got {}", self.radius)));
        }
        Ok(())
    }
}

impl ErrorModel {
    pub fn bounds(&self) -> PerceptionBounds {
        PerceptionBounds {
            slope: self.s_hat,
            epsilon_e: self.epsilon_e,
            radius: self.radius_r,
        }
    }
}

/// `∥v∥∞`.
pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

fn check_quantile(q: f64) -> Result<()> {
    if q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(invalid("quantile", format!("must lie in (0, 1], got {q}")))
    }
}

/// Nearest-rank quantile, reordering `values` in place.
pub fn nearest_rank(values: &mut [f64], q: f64) -> Result<f64> {
    check_quantile(q)?;
    if values.is_empty() {
        return Err(Error::Empty("quantile input"));
    }
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*v)
}

/// `e[k] = y[k] − C x[k]`.
pub fn residuals(data: &TrajectoryDataset, c: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    if c.ncols() != data.state_dim() {
        return Err(mismatch("C columns vs state", data.state_dim(), c.ncols()));
    }
    if c.nrows() != data.measurement_dim() {
        return Err(mismatch("C rows vs measurement", data.measurement_dim(), c.nrows()));
    }
    Ok(data
        .states
        .iter()
        .zip(&data.measurements)
        .map(|(x, y)| y - c * x)
        .collect())
}

/// Quantile `q` of the residual norms; `q = 1` is the maximum.
pub fn epsilon_bound(residuals: &[DVector<f64>], q: f64) -> Result<f64> {
    let mut norms: Vec<f64> = residuals.iter().map(inf_norm).collect();
    nearest_rank(&mut norms, q)
}

fn stride_indices(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        return (0..len).collect();
    }
    (0..cap).map(|i| i * len / cap).collect()
}

/// Local slope of the error field between every pair of distinct states closer than `radius`.
///
/// Each unordered pair is reported once; the nearest-rank quantile of the ordered-pair
/// multiset (every slope twice) coincides with that of the unordered set.
pub fn pairwise_slopes(
    states: &[DVector<f64>],
    errors: &[DVector<f64>],
    radius: f64,
    exec: Execution,
) -> Vec<f64> {
    let blocks = map_indexed(states.len(), exec, |i| {
        let mut out = Vec::new();
        for d in i + 1..states.len() {
            let dist = inf_norm(&(&states[i] - &states[d]));
            if dist > 0.0 && dist < radius {
                out.push(inf_norm(&(&errors[i] - &errors[d])) / dist);
            }
        }
        out
    });
    blocks.into_iter().flatten().collect()
}

/// Quantile-`q` S-slope estimate over pairs within `radius`.
pub fn s_slope(data: &TrajectoryDataset, c: &DMatrix<f64>, radius: f64, q: f64) -> Result<f64> {
    s_slope_with(data, c, radius, q, Execution::default())
}

pub fn s_slope_with(
    data: &TrajectoryDataset,
    c: &DMatrix<f64>,
    radius: f64,
    q: f64,
    exec: Execution,
) -> Result<f64> {
    let mut slopes = slopes_for(data, c, radius, exec)?;
    check_quantile(q)?;
    nearest_rank(&mut slopes, q)
}

fn slopes_for(data: &TrajectoryDataset, c: &DMatrix<f64>, radius: f64, exec: Execution) -> Result<Vec<f64>> {
    if !(radius > 0.0) {
        return Err(invalid("radius", format!("must be positive, got {radius}")));
    }
    let errs = residuals(data, c)?;
    let idx = stride_indices(data.len(), MAX_PAIRWISE_SAMPLES);
    let states: Vec<_> = idx.iter().map(|&i| data.states[i].clone()).collect();
    let errs: Vec<_> = idx.iter().map(|&i| errs[i].clone()).collect();
    let slopes = pairwise_slopes(&states, &errs, radius, exec);
    if slopes.is_empty() {
        return Err(Error::NoNeighbors { radius });
    }
    Ok(slopes)
}

/// Fits the full error profile from one trajectory dataset.
pub fn fit(data: &TrajectoryDataset, c: &DMatrix<f64>, radius: f64, q_eps: f64, q_slope: f64) -> Result<ErrorModel> {
    fit_with(data, c, radius, q_eps, q_slope, Execution::default())
}

pub fn fit_with(
    data: &TrajectoryDataset,
    c: &DMatrix<f64>,
    radius: f64,
    q_eps: f64,
    q_slope: f64,
    exec: Execution,
) -> Result<ErrorModel> {
    check_quantile(q_eps)?;
    check_quantile(q_slope)?;
    let errs = residuals(data, c)?;
    let epsilon_e = epsilon_bound(&errs, q_eps)?;
    let mut slopes = slopes_for(data, c, radius, exec)?;
    let s_hat_max = slopes.iter().copied().fold(0.0, f64::max);
    let s_hat = nearest_rank(&mut slopes, q_slope)?;
    Ok(ErrorModel {
        epsilon_e,
        s_hat,
        s_hat_max,
        radius_r: radius,
        quantile: q_slope,
        epsilon_quantile: q_eps,
        training_states: data.states.clone(),
    })
}
