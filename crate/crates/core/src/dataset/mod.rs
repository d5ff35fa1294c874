//! SET waveform data: CSV ingestion, spline resampling, adaptive
//! densification, min-max normalization and the train/validation/test split.
//!
//! Units are SI throughout (seconds, amperes) except LET, which is in
//! MeV·cm²/mg, and drain bias, which is in volts.

mod norm;
mod spline;
mod split;

use std::collections::HashMap;
use std::io::{Read, Write};

use thiserror::Error;

pub use norm::{Channel, NormParams};
pub use spline::{Boundary, CubicSpline};
pub use split::{split_dataset, Row, SetDataset, Split};

/// Header of the waveform CSV format.
pub const WAVEFORM_HEADER: [&str; 4] = ["let", "vd", "t", "i"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed input at line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("duplicate time {t} in waveform let={let_value}, vd={vd}")]
    DuplicateTime { let_value: f64, vd: f64, t: f64 },
    #[error("waveform has {found} samples, at least {needed} required")]
    TooFewSamples { found: usize, needed: usize },
    #[error("time {t} outside the data range [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("degenerate channel `{channel}`: min == max == {value}")]
    DegenerateChannel { channel: &'static str, value: f64 },
    #[error("need at least {needed} rows to split, got {found}")]
    TooFewRows { found: usize, needed: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One SET current transient at a fixed LET and drain bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    let_value: f64,
    vd: f64,
    times: Vec<f64>,
    currents: Vec<f64>,
}

impl Waveform {
    /// Minimum sample count for anything that builds a spline.
    pub const MIN_SPLINE_SAMPLES: usize = 4;

    /// Builds a waveform from `(t, i)` samples with strictly increasing time.
    ///
    /// At least two samples are required here; operations that interpolate
    /// (ingestion, resampling, densification) require four.
    pub fn new(let_value: f64, vd: f64, samples: Vec<(f64, f64)>) -> Result<Self, DatasetError> {
        let (times, currents) = samples.into_iter().unzip();
        Self::from_columns(let_value, vd, times, currents)
    }

    pub fn from_columns(
        let_value: f64,
        vd: f64,
        times: Vec<f64>,
        currents: Vec<f64>,
    ) -> Result<Self, DatasetError> {
        if !(let_value > 0.0 && let_value.is_finite()) {
            return Err(DatasetError::Invalid(format!("LET must be positive, got {let_value}")));
        }
        if !(vd >= 0.0 && vd.is_finite()) {
            return Err(DatasetError::Invalid(format!("drain bias must be >= 0, got {vd}")));
        }
        if times.len() != currents.len() {
            return Err(DatasetError::Invalid("time and current columns differ in length".into()));
        }
        if times.len() < 2 {
            return Err(DatasetError::TooFewSamples { found: times.len(), needed: 2 });
        }
        if times.iter().chain(&currents).any(|v| !v.is_finite()) {
            return Err(DatasetError::Invalid("non-finite sample".into()));
        }
        if let Some(w) = times.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(if w[1] == w[0] {
                DatasetError::DuplicateTime { let_value, vd, t: w[0] }
            } else {
                DatasetError::Invalid("sample times must be strictly increasing".into())
            });
        }
        Ok(Self {
            let_value,
            vd,
            times,
            currents,
        })
    }

    pub fn let_value(&self) -> f64 {
        self.let_value
    }

    pub fn vd(&self) -> f64 {
        self.vd
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn currents(&self) -> &[f64] {
        &self.currents
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().copied().zip(self.currents.iter().copied())
    }

    pub fn t_first(&self) -> f64 {
        self.times[0]
    }

    pub fn t_last(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Largest absolute current among the samples.
    pub fn peak_abs(&self) -> f64 {
        self.currents.iter().fold(0.0_f64, |m, i| m.max(i.abs()))
    }

    pub fn spline(&self, boundary: Boundary) -> Result<CubicSpline, DatasetError> {
        CubicSpline::new(&self.times, &self.currents, boundary)
    }

    /// Flattens the waveform into regression rows (split tags assigned later).
    pub fn rows(&self) -> impl Iterator<Item = Row> + '_ {
        self.samples().map(move |(t, i)| Row {
            t,
            let_value: self.let_value,
            vd: self.vd,
            current: i,
        })
    }
}

/// Reads waveforms from CSV with header `let,vd,t,i`.
///
/// Rows are grouped by `(let, vd)` in order of first appearance and sorted by
/// time within each group.
pub fn ingest_waveform_csv<R: Read>(source: R) -> Result<Vec<Waveform>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let header = reader.headers()?.clone();
    if header.iter().ne(WAVEFORM_HEADER) {
        return Err(DatasetError::Malformed {
            line: 1,
            message: format!("expected header `let,vd,t,i`, found `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }

    let mut groups: Vec<(f64, f64, Vec<(f64, f64)>)> = Vec::new();
    let mut index: HashMap<(u64, u64), usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| DatasetError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            return Err(DatasetError::Malformed {
                line,
                message: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let mut vals = [0.0; 4];
        for (k, field) in record.iter().enumerate() {
            vals[k] = field.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                DatasetError::Malformed {
                    line,
                    message: format!("field `{}` is not a number: `{field}`", WAVEFORM_HEADER[k]),
                }
            })?;
        }
        let [let_value, vd, t, i] = vals;
        let key = (let_value.to_bits(), vd.to_bits());
        let g = *index.entry(key).or_insert_with(|| {
            groups.push((let_value, vd, Vec::new()));
            groups.len() - 1
        });
        groups[g].2.push((t, i));
    }

    groups
        .into_iter()
        .map(|(let_value, vd, mut samples)| {
            if samples.len() < Waveform::MIN_SPLINE_SAMPLES {
                return Err(DatasetError::TooFewSamples {
                    found: samples.len(),
                    needed: Waveform::MIN_SPLINE_SAMPLES,
                });
            }
            samples.sort_by(|a, b| a.0.total_cmp(&b.0));
            Waveform::new(let_value, vd, samples)
        })
        .collect()
}

/// Writes waveforms in the `let,vd,t,i` format.
pub fn write_waveform_csv<W: Write>(sink: W, waveforms: &[Waveform]) -> Result<(), DatasetError> {
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(WAVEFORM_HEADER)?;
    for w in waveforms {
        for (t, i) in w.samples() {
            writer.write_record([
                w.let_value.to_string(),
                w.vd.to_string(),
                t.to_string(),
                i.to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Spline-interpolates `w` at `grid` using the default boundary condition.
pub fn resample_cubic_spline(w: &Waveform, grid: &[f64]) -> Result<Waveform, DatasetError> {
    resample_with_boundary(w, grid, Boundary::default())
}

pub fn resample_with_boundary(
    w: &Waveform,
    grid: &[f64],
    boundary: Boundary,
) -> Result<Waveform, DatasetError> {
    let spline = w.spline(boundary)?;
    if grid.windows(2).any(|g| !(g[1] > g[0])) {
        return Err(DatasetError::Invalid("resample grid must be strictly increasing".into()));
    }
    let currents = grid.iter().map(|&t| spline.eval(t)).collect::<Result<Vec<_>, _>>()?;
    Waveform::from_columns(w.let_value, w.vd, grid.to_vec(), currents)
}

/// Chooses a non-uniform time grid on which linear interpolation tracks the
/// spline through `w` to within `max_rel_err` times the peak current.
///
/// The grid always holds both end points and the midpoint. Intervals are
/// bisected until the chord error at their quarter points and midpoint is
/// below tolerance, which puts samples where the pulse bends and leaves the
/// tails sparse.
pub fn densify_adaptive(w: &Waveform, max_rel_err: f64) -> Result<Waveform, DatasetError> {
    if !(max_rel_err > 0.0 && max_rel_err < 1.0) {
        return Err(DatasetError::Invalid(format!(
            "max_rel_err must lie in (0, 1), got {max_rel_err}"
        )));
    }
    let spline = w.spline(Boundary::default())?;
    let (a, b) = (w.t_first(), w.t_last());
    let mid = 0.5 * (a + b);
    let tol = max_rel_err * w.peak_abs();
    let min_width = (b - a) * 1e-9;

    let mut grid = vec![a];
    if tol > 0.0 {
        // Depth-first over [lo, hi] keeps the output sorted.
        let mut stack = vec![(mid, b), (a, mid)];
        while let Some((lo, hi)) = stack.pop() {
            let (ylo, yhi) = (spline.eval_unchecked(lo), spline.eval_unchecked(hi));
            let chord_ok = [0.25, 0.5, 0.75].iter().all(|&f| {
                let x = lo + f * (hi - lo);
                let linear = ylo + f * (yhi - ylo);
                (spline.eval_unchecked(x) - linear).abs() < tol
            });
            if chord_ok || hi - lo <= min_width {
                grid.push(hi);
            } else {
                let m = 0.5 * (lo + hi);
                stack.push((m, hi));
                stack.push((lo, m));
            }
        }
    } else {
        grid.extend([mid, b]);
    }

    let currents = grid.iter().map(|&t| spline.eval_unchecked(t)).collect();
    Waveform::from_columns(w.let_value, w.vd, grid, currents)
}
