//! Cubic spline through a set of strictly increasing knots.

use super::DatasetError;

/// End conditions for [`CubicSpline`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    /// Zero second derivative at both end knots.
    Natural,
    /// Third derivative continuous across the second and second-to-last
    /// knots. Reproduces any cubic exactly.
    #[default]
    NotAKnot,
}

/// Piecewise cubic interpolant with continuous second derivative.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivative at each knot.
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn new(xs: &[f64], ys: &[f64], boundary: Boundary) -> Result<Self, DatasetError> {
        let n = xs.len();
        if n != ys.len() {
            return Err(DatasetError::Invalid(format!(
                "spline knot count {} does not match value count {}",
                n,
                ys.len()
            )));
        }
        if n < 4 {
            return Err(DatasetError::TooFewSamples { found: n, needed: 4 });
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(DatasetError::Invalid(
                "spline knots must be strictly increasing".into(),
            ));
        }

        // Tridiagonal system in the interior second derivatives m[1..n-1].
        // End values are either zero (natural) or eliminated through the
        // not-a-knot relations.
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let k = n - 2;
        let mut lower = vec![0.0; k];
        let mut diag = vec![0.0; k];
        let mut upper = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for r in 0..k {
            let i = r + 1;
            lower[r] = h[i - 1];
            diag[r] = 2.0 * (h[i - 1] + h[i]);
            upper[r] = h[i];
            rhs[r] = 6.0 * ((ys[i + 1] - ys[i]) / h[i] - (ys[i] - ys[i - 1]) / h[i - 1]);
        }
        if boundary == Boundary::NotAKnot {
            // m0 = ((h0 + h1) m1 - h0 m2) / h1
            let (h0, h1) = (h[0], h[1]);
            diag[0] += h0 * (h0 + h1) / h1;
            upper[0] -= h0 * h0 / h1;
            // m[n-1] = ((a + b) m[n-2] - b m[n-3]) / a, a = h[n-3], b = h[n-2]
            let (a, b) = (h[n - 3], h[n - 2]);
            diag[k - 1] += b * (a + b) / a;
            lower[k - 1] -= b * b / a;
        }

        for r in 1..k {
            let w = lower[r] / diag[r - 1];
            diag[r] -= w * upper[r - 1];
            rhs[r] -= w * rhs[r - 1];
        }
        let mut m = vec![0.0; n];
        m[k] = rhs[k - 1] / diag[k - 1];
        for r in (0..k - 1).rev() {
            m[r + 1] = (rhs[r] - upper[r] * m[r + 2]) / diag[r];
        }
        if boundary == Boundary::NotAKnot {
            let (h0, h1) = (h[0], h[1]);
            m[0] = ((h0 + h1) * m[1] - h0 * m[2]) / h1;
            let (a, b) = (h[n - 3], h[n - 2]);
            m[n - 1] = ((a + b) * m[n - 2] - b * m[n - 3]) / a;
        }

        Ok(Self {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            m,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.xs[0]
    }

    pub fn x_max(&self) -> f64 {
        self.xs[self.xs.len() - 1]
    }

    /// Evaluates the spline; `x` must lie within the knot range.
    pub fn eval(&self, x: f64) -> Result<f64, DatasetError> {
        if !(x >= self.x_min() && x <= self.x_max()) {
            return Err(DatasetError::OutOfRange {
                t: x,
                lo: self.x_min(),
                hi: self.x_max(),
            });
        }
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: f64) -> f64 {
        let n = self.xs.len();
        // Index of the interval [xs[i], xs[i+1]] containing x.
        let i = match self.xs.partition_point(|&k| k <= x) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        if x == self.xs[i] {
            return self.ys[i];
        }
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}
