//! Double-exponential surrogate for device-simulated SET currents.
//!
//! The collected charge grows linearly with LET and with drain bias through a
//! collection efficiency `eta0 + eta1 * vd / vdd_ref`; the pulse shape is the
//! classical `exp(-t/tau_fall) - exp(-t/tau_rise)` normalized to that charge.

use thiserror::Error;

use crate::dataset::{self, split_dataset, DatasetError, Row, SetDataset, Waveform};

/// LET range covered by the surrogate, MeV·cm²/mg.
pub const LET_RANGE: (f64, f64) = (4.0, 100.0);
/// Drain bias range covered by the surrogate, V.
pub const VD_RANGE: (f64, f64) = (0.0, 1.8);

const FEMTO: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid oracle parameters: {0}")]
    InvalidParams(String),
    #[error("tau_fall equals tau_rise ({0} s); the pulse normalizer is singular")]
    DegenerateTimeConstants(f64),
    #[error("drain bias {vd} V outside [0, {vdd_ref}] V")]
    BiasOutOfRange { vd: f64, vdd_ref: f64 },
    #[error("LET must be positive, got {0}")]
    InvalidLet(f64),
    #[error("time grid: {0}")]
    InvalidGrid(String),
    #[error("(let, vd) pairs outside LET 4-100 MeV·cm²/mg, Vd 0-1.8 V: {}", format_pairs(.0))]
    OutOfRange(Vec<(f64, f64)>),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn format_pairs(pairs: &[(f64, f64)]) -> String {
    pairs
        .iter()
        .map(|(l, v)| format!("({l}, {v})"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleParams {
    /// Rise time constant, s.
    pub tau_rise: f64,
    /// Fall time constant, s.
    pub tau_fall: f64,
    /// Strike onset, s.
    pub t0: f64,
    /// Deposited charge, fC per (MeV·cm²/mg) per µm of collection depth.
    pub charge_per_let: f64,
    /// Collection depth, µm.
    pub depth: f64,
    pub eta0: f64,
    pub eta1: f64,
    /// Bias at which the collection efficiency reaches `eta0 + eta1`, V.
    pub vdd_ref: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            tau_rise: 10e-12,
            tau_fall: 200e-12,
            t0: 0.0,
            charge_per_let: 10.8,
            depth: 1.0,
            eta0: 0.3,
            eta1: 0.5,
            vdd_ref: 1.8,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<(), OracleError> {
        let all = [
            self.tau_rise,
            self.tau_fall,
            self.t0,
            self.charge_per_let,
            self.depth,
            self.eta0,
            self.eta1,
            self.vdd_ref,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::InvalidParams("all parameters must be finite".into()));
        }
        if self.tau_fall == self.tau_rise {
            return Err(OracleError::DegenerateTimeConstants(self.tau_rise));
        }
        if !(self.tau_rise > 0.0 && self.tau_fall > self.tau_rise) {
            return Err(OracleError::InvalidParams(format!(
                "need tau_fall > tau_rise > 0, got tau_rise={} tau_fall={}",
                self.tau_rise, self.tau_fall
            )));
        }
        if !(self.eta0 > 0.0 && self.eta1 >= 0.0 && self.eta0 + self.eta1 <= 1.0) {
            return Err(OracleError::InvalidParams(format!(
                "need 0 < eta0 and eta0 + eta1 <= 1, got eta0={} eta1={}",
                self.eta0, self.eta1
            )));
        }
        if !(self.charge_per_let > 0.0 && self.depth > 0.0 && self.vdd_ref > 0.0) {
            return Err(OracleError::InvalidParams(
                "charge_per_let, depth and vdd_ref must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Collection efficiency at drain bias `vd`.
    pub fn efficiency(&self, vd: f64) -> f64 {
        self.eta0 + self.eta1 * vd / self.vdd_ref
    }

    /// Time of the current maximum after onset, s.
    pub fn peak_delay(&self) -> f64 {
        let (tr, tf) = (self.tau_rise, self.tau_fall);
        tf * tr / (tf - tr) * (tf / tr).ln()
    }
}

/// Charge collected at the drain, in coulombs.
pub fn collected_charge(let_value: f64, vd: f64, p: &OracleParams) -> Result<f64, OracleError> {
    p.validate()?;
    if !(let_value > 0.0 && let_value.is_finite()) {
        return Err(OracleError::InvalidLet(let_value));
    }
    if !(vd >= 0.0 && vd <= p.vdd_ref) {
        return Err(OracleError::BiasOutOfRange { vd, vdd_ref: p.vdd_ref });
    }
    Ok(p.charge_per_let * let_value * p.depth * p.efficiency(vd) * FEMTO)
}

/// A double-exponential pulse carrying a fixed charge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleExp {
    pub charge: f64,
    pub tau_rise: f64,
    pub tau_fall: f64,
    pub t0: f64,
}

impl DoubleExp {
    pub fn new(let_value: f64, vd: f64, p: &OracleParams) -> Result<Self, OracleError> {
        Ok(Self {
            charge: collected_charge(let_value, vd, p)?,
            tau_rise: p.tau_rise,
            tau_fall: p.tau_fall,
            t0: p.t0,
        })
    }

    /// Current at absolute time `t`, A.
    #[inline]
    pub fn current(&self, t: f64) -> f64 {
        if t < self.t0 {
            return 0.0;
        }
        let s = t - self.t0;
        self.charge / (self.tau_fall - self.tau_rise)
            * ((-s / self.tau_fall).exp() - (-s / self.tau_rise).exp())
    }

    pub fn peak_time(&self) -> f64 {
        let (tr, tf) = (self.tau_rise, self.tau_fall);
        self.t0 + tf * tr / (tf - tr) * (tf / tr).ln()
    }

    pub fn peak_current(&self) -> f64 {
        self.current(self.peak_time())
    }
}

/// Samples the surrogate pulse on `grid`.
///
/// The grid must be strictly increasing and span at least
/// `[t0, t0 + 5 tau_fall]`.
pub fn generate_waveform(
    let_value: f64,
    vd: f64,
    grid: &[f64],
    p: &OracleParams,
) -> Result<Waveform, OracleError> {
    let pulse = DoubleExp::new(let_value, vd, p)?;
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(OracleError::InvalidGrid("must be strictly increasing with >= 2 points".into()));
    }
    let need_end = p.t0 + 5.0 * p.tau_fall;
    // Relative slack absorbs rounding in grids built as k * step.
    let slack = 1e-9 * need_end.abs().max(p.tau_fall);
    if grid[0] > p.t0 + slack || grid[grid.len() - 1] < need_end - slack {
        return Err(OracleError::InvalidGrid(format!(
            "[{}, {}] does not cover [{}, {}]",
            grid[0],
            grid[grid.len() - 1],
            p.t0,
            need_end
        )));
    }
    let currents = grid.iter().map(|&t| pulse.current(t)).collect();
    Ok(Waveform::from_columns(let_value, vd, grid.to_vec(), currents)?)
}

fn in_range(let_value: f64, vd: f64) -> bool {
    let_value >= LET_RANGE.0 && let_value <= LET_RANGE.1 && vd >= VD_RANGE.0 && vd <= VD_RANGE.1
}

/// One waveform per `(let, vd)` pair, LET-major.
pub fn generate_grid_dataset(
    let_values: &[f64],
    vd_values: &[f64],
    grid: &[f64],
    p: &OracleParams,
) -> Result<Vec<Waveform>, OracleError> {
    if let_values.is_empty() || vd_values.is_empty() {
        return Err(OracleError::InvalidParams("LET and bias lists must be non-empty".into()));
    }
    let pairs: Vec<(f64, f64)> = let_values
        .iter()
        .flat_map(|&l| vd_values.iter().map(move |&v| (l, v)))
        .collect();
    let bad: Vec<(f64, f64)> = pairs.iter().copied().filter(|&(l, v)| !in_range(l, v)).collect();
    if !bad.is_empty() {
        return Err(OracleError::OutOfRange(bad));
    }
    pairs
        .into_iter()
        .map(|(l, v)| generate_waveform(l, v, grid, p))
        .collect()
}

/// `start, start + step, ...` up to and including `stop`, with values computed
/// as `start + k * step` to avoid accumulated drift.
pub fn uniform_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step).round() as usize;
    (0..=n).map(|k| start + k as f64 * step).collect()
}

/// LET ∈ {4, 8, …, 100}.
pub fn default_let_values() -> Vec<f64> {
    (1..=25).map(|k| 4.0 * k as f64).collect()
}

/// Vd ∈ {0, 0.2, …, 1.8}.
pub fn default_vd_values() -> Vec<f64> {
    (0..=9).map(|k| k as f64 / 5.0).collect()
}

/// Grid and sampling choices for a surrogate training set.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateGrid {
    pub let_values: Vec<f64>,
    pub vd_values: Vec<f64>,
    /// Dense source sampling before spline densification, s.
    pub base_step: f64,
    pub t_stop: f64,
    /// Chord tolerance of the adaptive time grid, fraction of pulse peak.
    pub max_rel_err: f64,
}

impl Default for SurrogateGrid {
    fn default() -> Self {
        Self {
            let_values: default_let_values(),
            vd_values: default_vd_values(),
            base_step: 1e-12,
            t_stop: 1e-9,
            max_rel_err: 1e-6,
        }
    }
}

impl SurrogateGrid {
    /// Oracle waveforms on the dense base grid.
    pub fn waveforms(&self, p: &OracleParams) -> Result<Vec<Waveform>, OracleError> {
        let base = uniform_grid(p.t0, p.t0 + self.t_stop, self.base_step);
        generate_grid_dataset(&self.let_values, &self.vd_values, &base, p)
    }

    /// Waveforms resampled on their adaptive grids.
    pub fn densified(&self, p: &OracleParams) -> Result<Vec<Waveform>, OracleError> {
        self.waveforms(p)?
            .iter()
            .map(|w| dataset::densify_adaptive(w, self.max_rel_err).map_err(OracleError::from))
            .collect()
    }

    /// Densified rows, flattened and split with `seed`.
    pub fn dataset(&self, p: &OracleParams, seed: u64) -> Result<SetDataset, OracleError> {
        let rows: Vec<Row> = self.densified(p)?.iter().flat_map(|w| w.rows().collect::<Vec<_>>()).collect();
        Ok(split_dataset(rows, seed)?)
    }
}
