//! Min-max scaling of every channel onto [-1, +1].

use super::{DatasetError, Row};

/// Scaling for one channel: `x̂ = 2 (x - min) / (max - min) - 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Channel {
    pub min: f64,
    pub max: f64,
}

impl Channel {
    pub fn new(name: &'static str, min: f64, max: f64) -> Result<Self, DatasetError> {
        if !(min.is_finite() && max.is_finite()) {
            return Err(DatasetError::Invalid(format!("channel `{name}` bounds must be finite")));
        }
        if !(max > min) {
            return Err(DatasetError::DegenerateChannel { channel: name, value: min });
        }
        Ok(Self { min, max })
    }

    fn fit(name: &'static str, values: impl Iterator<Item = f64>) -> Result<Self, DatasetError> {
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        if lo > hi {
            return Err(DatasetError::Invalid("cannot fit normalization on zero rows".into()));
        }
        Self::new(name, lo, hi)
    }

    #[inline]
    pub fn normalize(&self, x: f64) -> f64 {
        2.0 * (x - self.min) / (self.max - self.min) - 1.0
    }

    #[inline]
    pub fn denormalize(&self, x: f64) -> f64 {
        (x + 1.0) * 0.5 * (self.max - self.min) + self.min
    }

    /// Derivative of the physical value with respect to the normalized one.
    pub fn scale(&self) -> f64 {
        0.5 * (self.max - self.min)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max
    }
}

/// Per-channel scaling for the three inputs (time, LET, drain bias) and the
/// output current.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormParams {
    pub time: Channel,
    pub let_value: Channel,
    pub vd: Channel,
    pub current: Channel,
}

impl NormParams {
    pub const INPUT_NAMES: [&'static str; 3] = ["t", "let", "vd"];

    /// Fits the extrema of each channel over `rows`; callers pass the
    /// training split only.
    pub fn fit<'a, I>(rows: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = &'a Row>,
        I::IntoIter: Clone,
    {
        let rows = rows.into_iter();
        Ok(Self {
            time: Channel::fit("t", rows.clone().map(|r| r.t))?,
            let_value: Channel::fit("let", rows.clone().map(|r| r.let_value))?,
            vd: Channel::fit("vd", rows.clone().map(|r| r.vd))?,
            current: Channel::fit("i", rows.map(|r| r.current))?,
        })
    }

    pub fn inputs(&self) -> [Channel; 3] {
        [self.time, self.let_value, self.vd]
    }

    pub fn normalize_input(&self, t: f64, let_value: f64, vd: f64) -> [f64; 3] {
        [
            self.time.normalize(t),
            self.let_value.normalize(let_value),
            self.vd.normalize(vd),
        ]
    }

    pub fn denormalize_input(&self, x: [f64; 3]) -> [f64; 3] {
        [
            self.time.denormalize(x[0]),
            self.let_value.denormalize(x[1]),
            self.vd.denormalize(x[2]),
        ]
    }

    /// True when any input lies outside the fitted range.
    pub fn is_extrapolated(&self, t: f64, let_value: f64, vd: f64) -> bool {
        !(self.time.contains(t) && self.let_value.contains(let_value) && self.vd.contains(vd))
    }
}
