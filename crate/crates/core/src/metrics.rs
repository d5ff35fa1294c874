//! Pulse peak and full-width-at-half-maximum, used to compare a trained model
//! against the surrogate waveforms.

use crate::mlp::MlpModel;
use crate::oracle::{DoubleExp, OracleError, OracleParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseShape {
    pub peak: f64,
    pub peak_time: f64,
    /// Full width at half maximum, s. Half-maximum crossings are located by
    /// linear interpolation between samples.
    pub fwhm: f64,
}

/// Peak and FWHM of a sampled positive pulse. `None` when the samples hold
/// no positive peak or the pulse does not fall below half maximum on both
/// sides within the window.
pub fn pulse_shape(times: &[f64], currents: &[f64]) -> Option<PulseShape> {
    if times.len() != currents.len() || times.len() < 3 {
        return None;
    }
    let (k, &peak) = currents
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    if !(peak > 0.0) {
        return None;
    }
    let half = 0.5 * peak;
    let cross = |a: usize, b: usize| {
        let (ya, yb) = (currents[a], currents[b]);
        times[a] + (half - ya) / (yb - ya) * (times[b] - times[a])
    };
    let left = (0..k).rev().find(|&j| currents[j] < half).map(|j| cross(j, j + 1))?;
    let right = (k + 1..currents.len()).find(|&j| currents[j] < half).map(|j| cross(j - 1, j))?;
    Some(PulseShape { peak, peak_time: times[k], fwhm: right - left })
}

/// Peak and width errors of a model against the surrogate at one condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fidelity {
    pub let_value: f64,
    pub vd: f64,
    pub oracle: PulseShape,
    pub model: PulseShape,
}

impl Fidelity {
    pub fn peak_rel_err(&self) -> f64 {
        (self.model.peak - self.oracle.peak).abs() / self.oracle.peak
    }

    pub fn fwhm_rel_err(&self) -> f64 {
        (self.model.fwhm - self.oracle.fwhm).abs() / self.oracle.fwhm
    }
}

/// Compares `model` with the surrogate on `grid` for every `(let, vd)` pair.
/// A model curve without a measurable pulse yields a zero-shape entry, which
/// reports a 100% error.
pub fn fit_fidelity(
    model: &MlpModel,
    p: &OracleParams,
    let_values: &[f64],
    vd_values: &[f64],
    grid: &[f64],
) -> Result<Vec<Fidelity>, OracleError> {
    let mut out = Vec::new();
    for &let_value in let_values {
        for &vd in vd_values {
            let pulse = DoubleExp::new(let_value, vd, p)?;
            let truth: Vec<f64> = grid.iter().map(|&t| pulse.current(t)).collect();
            let pred: Vec<f64> = grid.iter().map(|&t| model.predict_current(t, let_value, vd)).collect();
            let oracle = pulse_shape(grid, &truth)
                .ok_or_else(|| OracleError::InvalidGrid("window does not contain the full pulse".into()))?;
            let model = pulse_shape(grid, &pred).unwrap_or(PulseShape { peak: 0.0, peak_time: 0.0, fwhm: 0.0 });
            out.push(Fidelity { let_value, vd, oracle, model });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::uniform_grid;

    #[test]
    fn triangle_pulse() {
        let t = [0.0, 1.0, 2.0, 3.0, 4.0];
        let i = [0.0, 1.0, 2.0, 1.0, 0.0];
        let s = pulse_shape(&t, &i).unwrap();
        assert_eq!(s.peak, 2.0);
        assert_eq!(s.peak_time, 2.0);
        assert!((s.fwhm - 2.0).abs() < 1e-15);
    }

    #[test]
    fn double_exponential_width() {
        // Half-maximum crossings of exp(-t/200p) - exp(-t/10p), found by
        // bisection on the closed form.
        let p = OracleParams::default();
        let pulse = DoubleExp::new(40.0, 0.6, &p).unwrap();
        let half = 0.5 * pulse.peak_current();
        let bisect = |mut lo: f64, mut hi: f64| {
            let rising = pulse.current(lo) < pulse.current(hi);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if (pulse.current(mid) < half) == rising {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let tp = pulse.peak_time();
        let expect = bisect(tp, 2e-9) - bisect(0.0, tp);
        let grid = uniform_grid(0.0, 1e-9, 0.1e-12);
        let truth: Vec<f64> = grid.iter().map(|&t| pulse.current(t)).collect();
        let s = pulse_shape(&grid, &truth).unwrap();
        assert!((s.fwhm - expect).abs() < 1e-3 * expect, "{} vs {expect}", s.fwhm);
    }

    #[test]
    fn no_pulse() {
        assert!(pulse_shape(&[0.0, 1.0, 2.0], &[0.0, 0.0, 0.0]).is_none());
        // Never falls below half maximum on the right.
        assert!(pulse_shape(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.9]).is_none());
    }
}
