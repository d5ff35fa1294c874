//! Levenberg-Marquardt training, MSE evaluation and the architecture sweep.
//!
//! Training is full batch: each epoch builds the Gauss-Newton system
//! `(JᵀJ + μI) Δw = Jᵀe` over the training rows (or a fixed seeded subsample
//! of them when `lm_batch` is set) and adapts μ until a step lowers the
//! training MSE. All errors are measured in normalized output units.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{DatasetError, NormParams, SetDataset, Split};
use crate::mlp::{Architecture, MlpError, MlpModel, Workspace};
use crate::par::{stable_sum, CHUNK};

/// Floor for μ after repeated successful steps.
const MU_MIN: f64 = 1e-20;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("split `{0}` has no rows")]
    EmptySplit(Split),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("damped normal equations could not be solved (non-finite entries)")]
    SolveFailed,
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub mu_init: f64,
    pub mu_factor: f64,
    pub mu_max: f64,
    pub grad_tol: f64,
    pub val_patience: usize,
    pub init_seed: u64,
    /// Optional fixed-size uniform subsample of the training split used for
    /// the LM system. `None` trains on every training row.
    pub lm_batch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 1000,
            mu_init: 1e-3,
            mu_factor: 10.0,
            mu_max: 1e10,
            grad_tol: 1e-7,
            val_patience: 6,
            init_seed: 1,
            lm_batch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.max_epochs < 1 {
            return bad("max_epochs must be >= 1");
        }
        if !(self.mu_init > 0.0 && self.mu_init.is_finite()) {
            return bad("mu_init must be positive");
        }
        if !(self.mu_factor > 1.0) {
            return bad("mu_factor must exceed 1");
        }
        if !(self.mu_max >= self.mu_init) {
            return bad("mu_max must be >= mu_init");
        }
        if self.grad_tol < 0.0 || self.grad_tol.is_nan() {
            return bad("grad_tol must be >= 0");
        }
        if self.val_patience < 1 {
            return bad("val_patience must be >= 1");
        }
        if self.lm_batch == Some(0) {
            return bad("lm_batch must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StopReason {
    MaxEpochs,
    MuMax,
    GradTol,
    ValPatience,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::MuMax => "mu_max",
            StopReason::GradTol => "grad_tol",
            StopReason::ValPatience => "val_patience",
        }
    }
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// State after one accepted LM step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// MSE of the LM objective (training rows, or the LM subsample).
    pub train_mse: f64,
    pub val_mse: f64,
    /// μ that produced the accepted step.
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the returned (best validation) parameters; 0 is the
    /// initialization.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    /// Errors of the returned model over the full splits.
    pub train_mse: f64,
    pub val_mse: f64,
    pub test_mse: f64,
    /// Test-split RMSE converted back to amperes.
    pub test_rmse_amps: f64,
    pub lm_rows: usize,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    /// Per-epoch trace as `epoch,train_mse,val_mse,mu`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,train_mse,val_mse,mu")?;
        for e in &self.epochs {
            writeln!(out, "{},{:e},{:e},{:e}", e.epoch, e.train_mse, e.val_mse, e.mu)?;
        }
        Ok(())
    }
}

/// Normalized inputs and targets.
#[derive(Debug, Clone, Default)]
pub struct Samples {
    pub inputs: Vec<[f64; 3]>,
    pub targets: Vec<f64>,
}

impl Samples {
    pub fn from_split(data: &SetDataset, split: Split, norm: &NormParams) -> Self {
        let (inputs, targets) = data
            .rows_in(split)
            .map(|r| (norm.normalize_input(r.t, r.let_value, r.vd), norm.current.normalize(r.current)))
            .unzip();
        Self { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn subsample(&self, n: usize, rng: &mut impl Rng) -> Self {
        let mut picks = index::sample(rng, self.len(), n).into_vec();
        picks.sort_unstable();
        Self {
            inputs: picks.iter().map(|&k| self.inputs[k]).collect(),
            targets: picks.iter().map(|&k| self.targets[k]).collect(),
        }
    }
}

/// Mean squared normalized error over a sample set; chunked and reduced in a
/// fixed order so the value does not depend on the thread count.
pub fn mse_samples(m: &MlpModel, s: &Samples) -> f64 {
    let idx: Vec<usize> = (0..s.len()).collect();
    stable_sum(&idx, |&k| {
        let e = s.targets[k] - m.forward(s.inputs[k]);
        e * e
    }) / s.len() as f64
}

/// Normalized MSE of `m` over one split of `data`, using the model's own
/// normalization.
pub fn mse(m: &MlpModel, data: &SetDataset, split: Split) -> Result<f64, TrainError> {
    let s = Samples::from_split(data, split, m.norm());
    if s.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    Ok(mse_samples(m, &s))
}

/// Candidate parameters `w + Δw` with `(JᵀJ + μI) Δw = Jᵀe` and
/// `e = targets - predictions`.
pub fn lm_step(
    m: &MlpModel,
    jacobian: &DMatrix<f64>,
    residuals: &DVector<f64>,
    mu: f64,
) -> Result<Vec<f64>, TrainError> {
    if jacobian.ncols() != m.param_count() || jacobian.nrows() != residuals.len() {
        return Err(TrainError::Mlp(MlpError::Shape(format!(
            "Jacobian {}x{} with {} residuals for {} parameters",
            jacobian.nrows(),
            jacobian.ncols(),
            residuals.len(),
            m.param_count()
        ))));
    }
    if !(mu > 0.0) {
        return Err(TrainError::InvalidConfig(format!("mu must be positive, got {mu}")));
    }
    let h = jacobian.tr_mul(jacobian);
    let g = jacobian.tr_mul(residuals);
    let step = damped_solve(&h, &g, mu)?.ok_or(TrainError::SolveFailed)?;
    Ok(m.params().iter().zip(step.iter()).map(|(w, d)| w + d).collect())
}

/// Solves `(H + μI) x = g`. `Ok(None)` means the factorization failed on
/// finite input (round-off with a tiny μ); the caller raises μ and retries.
fn damped_solve(h: &DMatrix<f64>, g: &DVector<f64>, mu: f64) -> Result<Option<DVector<f64>>, TrainError> {
    if h.iter().chain(g.iter()).any(|v| !v.is_finite()) {
        return Err(TrainError::SolveFailed);
    }
    let mut a = h.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += mu;
    }
    Ok(a.cholesky().map(|c| c.solve(g)).filter(|x| x.iter().all(|v| v.is_finite())))
}

/// `JᵀJ`, `Jᵀe` and the sum of squared residuals, accumulated chunk by chunk
/// in a fixed order.
fn normal_equations(m: &MlpModel, s: &Samples) -> (DMatrix<f64>, DVector<f64>, f64) {
    let p = m.param_count();
    let idx: Vec<usize> = (0..s.len()).collect();
    let partials: Vec<(DMatrix<f64>, DVector<f64>, f64)> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut ws = Workspace::new(m);
            let mut jdata = vec![0.0; chunk.len() * p];
            let mut e = DVector::zeros(chunk.len());
            let mut sse = 0.0;
            for (r, (&k, row)) in chunk.iter().zip(jdata.chunks_exact_mut(p)).enumerate() {
                let out = m.jacobian_row(s.inputs[k], &mut ws, row);
                let res = s.targets[k] - out;
                e[r] = res;
                sse += res * res;
            }
            let j = DMatrix::from_row_slice(chunk.len(), p, &jdata);
            (j.tr_mul(&j), j.tr_mul(&e), sse)
        })
        .collect();

    let mut h = DMatrix::zeros(p, p);
    let mut g = DVector::zeros(p);
    let mut sse = 0.0;
    for (ph, pg, ps) in partials {
        h += ph;
        g += pg;
        sse += ps;
    }
    (h, g, sse)
}

/// Uniform `[-0.5, 0.5]` initialization from `seed`.
pub fn init_params(arch: &Architecture, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..arch.param_count()).map(|_| rng.random_range(-0.5..=0.5)).collect()
}

/// Trains `arch` on the training split of `data` and returns the parameters
/// with the best validation MSE seen.
pub fn train_lm(
    arch: &Architecture,
    data: &SetDataset,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainReport), TrainError> {
    cfg.validate()?;
    for split in Split::ALL {
        if data.count(split) == 0 {
            return Err(TrainError::EmptySplit(split));
        }
    }
    let norm = data.fit_norm()?;
    let train = Samples::from_split(data, Split::Train, &norm);
    let val = Samples::from_split(data, Split::Validation, &norm);
    let test = Samples::from_split(data, Split::Test, &norm);
    let init = MlpModel::from_params(arch, &init_params(arch, cfg.init_seed), norm)?;

    let lm_set = match cfg.lm_batch {
        Some(n) if n < train.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed ^ 0x5eed_ba7c);
            train.subsample(n, &mut rng)
        }
        _ => train.clone(),
    };

    let (best, mut report) = train_samples(init, &lm_set, &val, cfg)?;
    report.train_mse = mse_samples(&best, &train);
    report.test_mse = mse_samples(&best, &test);
    report.test_rmse_amps = report.test_mse.sqrt() * norm.current.scale();
    Ok((best, report))
}

/// The LM loop on pre-normalized samples, starting from `model`.
///
/// `report.train_mse` is left at the objective MSE of the returned model and
/// `test_mse` at NaN; [`train_lm`] fills both over the full splits.
pub fn train_samples(
    model: MlpModel,
    train: &Samples,
    val: &Samples,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainReport), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit(Split::Validation));
    }
    let n = train.len() as f64;

    let mut current = model;
    let mut params = current.params();
    let (mut h, mut g, sse) = normal_equations(&current, train);
    let mut train_mse = sse / n;
    let mut mu = cfg.mu_init;

    let mut best = current.clone();
    let mut best_val = mse_samples(&current, val);
    let mut best_epoch = 0;
    let mut fails = 0;

    let mut epochs = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    'epochs: for epoch in 1..=cfg.max_epochs {
        // Gradient of the MSE is -2 Jᵀe / N.
        if 2.0 * g.norm() / n < cfg.grad_tol {
            stop = StopReason::GradTol;
            break;
        }
        let (candidate, cand_mse) = loop {
            if let Some(step) = damped_solve(&h, &g, mu)? {
                let p: Vec<f64> = params.iter().zip(step.iter()).map(|(w, d)| w + d).collect();
                if let Ok(cand) = current.with_params(&p) {
                    let cm = mse_samples(&cand, train);
                    if cm < train_mse {
                        break (cand, cm);
                    }
                }
            }
            mu *= cfg.mu_factor;
            if mu > cfg.mu_max {
                stop = StopReason::MuMax;
                break 'epochs;
            }
        };
        let used_mu = mu;
        mu = (mu / cfg.mu_factor).max(MU_MIN);

        current = candidate;
        params = current.params();
        train_mse = cand_mse;
        (h, g, _) = normal_equations(&current, train);

        let val_mse = mse_samples(&current, val);
        epochs.push(EpochRecord { epoch, train_mse, val_mse, mu: used_mu });
        if val_mse < best_val {
            best_val = val_mse;
            best = current.clone();
            best_epoch = epoch;
            fails = 0;
        } else {
            fails += 1;
            if fails >= cfg.val_patience {
                stop = StopReason::ValPatience;
                break;
            }
        }
    }

    let report = TrainReport {
        epochs,
        best_epoch,
        stop_reason: stop,
        train_mse: mse_samples(&best, train),
        val_mse: best_val,
        test_mse: f64::NAN,
        test_rmse_amps: f64::NAN,
        lm_rows: train.len(),
    };
    Ok((best, report))
}

/// One row of the architecture sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub arch: Architecture,
    pub train_mse: f64,
    pub val_mse: f64,
    pub test_mse: f64,
    pub epochs: usize,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub models: Vec<MlpModel>,
}

/// Trains every architecture with the same configuration. Runs are
/// independent and execute in parallel; output order follows `configs`.
pub fn architecture_sweep(
    data: &SetDataset,
    configs: &[Architecture],
    cfg: &TrainConfig,
) -> Result<SweepResult, TrainError> {
    let results: Vec<(MlpModel, TrainReport)> = configs
        .par_iter()
        .map(|arch| train_lm(arch, data, cfg))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::with_capacity(results.len());
    let mut models = Vec::with_capacity(results.len());
    for (arch, (model, report)) in configs.iter().zip(results) {
        rows.push(SweepRow {
            arch: arch.clone(),
            train_mse: report.train_mse,
            val_mse: report.val_mse,
            test_mse: report.test_mse,
            epochs: report.epochs_run(),
            stop_reason: report.stop_reason,
        });
        models.push(model);
    }
    Ok(SweepResult { rows, models })
}

pub const SWEEP_HEADER: &str = "arch,transfer,train_mse,val_mse,test_mse,epochs,stop_reason";

/// Sweep table as CSV.
pub fn write_sweep_csv<W: Write>(mut out: W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e},{},{}",
            r.arch.label(),
            r.arch.hidden_transfer,
            r.train_mse,
            r.val_mse,
            r.test_mse,
            r.epochs,
            r.stop_reason
        )?;
    }
    Ok(())
}

/// Sweep table as aligned text.
pub fn format_sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:<12} {:<10} {:>11} {:>11} {:>11} {:>7}  {}\n",
        "network", "hidden", "train_mse", "val_mse", "test_mse", "epochs", "stop"
    );
    for r in rows {
        s += &format!(
            "{:<12} {:<10} {:>11.3e} {:>11.3e} {:>11.3e} {:>7}  {}\n",
            r.arch.label(),
            r.arch.hidden_transfer.name(),
            r.train_mse,
            r.val_mse,
            r.test_mse,
            r.epochs,
            r.stop_reason
        );
    }
    s
}

/// Rows sorted by test MSE; ties keep their sweep order.
pub fn sorted_by_test_mse(rows: &[SweepRow]) -> Vec<SweepRow> {
    let mut out = rows.to_vec();
    out.sort_by(|a, b| a.test_mse.total_cmp(&b.test_mse));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split_dataset, Channel, Row};
    use crate::mlp::{Layer, Transfer};

    fn unit_norm() -> NormParams {
        let c = |name| Channel::new(name, -1.0, 1.0).unwrap();
        NormParams { time: c("t"), let_value: c("let"), vd: c("vd"), current: c("i") }
    }

    fn linear_problem() -> (MlpModel, Samples) {
        let layer = Layer::new(3, 1, vec![0.1, 0.2, 0.3], vec![0.0], Transfer::Purelin).unwrap();
        let m = MlpModel::new(vec![layer], unit_norm()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = Samples::default();
        for _ in 0..40 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let noise: f64 = rng.random_range(-0.1..0.1);
            s.inputs.push(x);
            s.targets.push(0.7 * x[0] - 1.3 * x[1] + 0.25 * x[2] + 0.4 + noise);
        }
        (m, s)
    }

    fn residuals(m: &MlpModel, s: &Samples) -> DVector<f64> {
        DVector::from_iterator(s.len(), s.inputs.iter().zip(&s.targets).map(|(x, t)| t - m.forward(*x)))
    }

    #[test]
    fn gauss_newton_solves_linear_least_squares_in_one_step() {
        let (m, s) = linear_problem();
        let j = m.jacobian(&s.inputs).unwrap();
        let next = m.with_params(&lm_step(&m, &j, &residuals(&m, &s), 1e-12).unwrap()).unwrap();
        let e = residuals(&next, &s);
        let ortho = j.tr_mul(&e);
        assert!(ortho.amax() < 1e-8, "Jᵀe = {ortho}");
    }

    #[test]
    fn large_mu_gives_scaled_gradient_step() {
        let (m, s) = linear_problem();
        let j = m.jacobian(&s.inputs).unwrap();
        let e = residuals(&m, &s);
        let mu = 1e8;
        let cand = lm_step(&m, &j, &e, mu).unwrap();
        let step = DVector::from_iterator(4, cand.iter().zip(m.params()).map(|(c, p)| c - p));
        let grad = j.tr_mul(&e) / mu;
        let cosine = step.dot(&grad) / (step.norm() * grad.norm());
        assert!(cosine > 0.999, "cosine {cosine}");
        assert!((step.norm() / grad.norm() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn zero_jacobian_gives_zero_step() {
        let (m, s) = linear_problem();
        let j = DMatrix::zeros(s.len(), m.param_count());
        let cand = lm_step(&m, &j, &residuals(&m, &s), 1e-3).unwrap();
        assert_eq!(cand, m.params());
    }

    #[test]
    fn nan_jacobian_is_a_solve_failure() {
        let (m, s) = linear_problem();
        let mut j = m.jacobian(&s.inputs).unwrap();
        j[(0, 0)] = f64::NAN;
        assert!(matches!(lm_step(&m, &j, &residuals(&m, &s), 1e-3), Err(TrainError::SolveFailed)));
    }

    #[test]
    fn vectorized_mse_matches_row_loop() {
        let arch = Architecture::parse("8x8x1", Transfer::Tansig).unwrap();
        let m = MlpModel::from_params(&arch, &init_params(&arch, 3), unit_norm()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = Samples::default();
        for _ in 0..3000 {
            s.inputs.push([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            s.targets.push(rng.random_range(-1.0..1.0));
        }
        let mut acc = 0.0;
        for (x, t) in s.inputs.iter().zip(&s.targets) {
            acc += (t - m.forward(*x)).powi(2);
        }
        let brute = acc / s.len() as f64;
        assert!((mse_samples(&m, &s) - brute).abs() < 1e-12);
    }

    #[test]
    fn mse_of_zero_network_is_mean_square_target() {
        let rows: Vec<Row> = (0..40)
            .map(|k| {
                let x = k as f64 / 39.0;
                Row { t: x, let_value: 4.0 + x, vd: 1.8 * x, current: if k % 2 == 0 { -1.0 } else { 1.0 } * x }
            })
            .collect();
        let data = split_dataset(rows, 1).unwrap();
        let norm = data.fit_norm().unwrap();
        let m = MlpModel::zeros(&Architecture::parse("4x1", Transfer::Tansig).unwrap(), norm);
        let expect: f64 = data.rows_in(Split::Test).map(|r| norm.current.normalize(r.current).powi(2)).sum::<f64>()
            / data.count(Split::Test) as f64;
        assert!((mse(&m, &data, Split::Test).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn exact_model_has_zero_mse() {
        let layer = Layer::new(3, 1, vec![1.0, 0.0, 0.0], vec![0.0], Transfer::Purelin).unwrap();
        let rows: Vec<Row> = (0..20)
            .map(|k| {
                let x = k as f64 / 19.0;
                Row { t: x, let_value: 4.0 + 96.0 * x * x, vd: 1.8 * (1.0 - x), current: 2e-3 * x }
            })
            .collect();
        let mut data = split_dataset(rows, 2).unwrap();
        // Force the extrema into the training split so normalization matches.
        let mut splits = data.splits().to_vec();
        splits[0] = Split::Train;
        splits[19] = Split::Train;
        data = SetDataset::from_parts(data.rows().to_vec(), splits, None).unwrap();
        let m = MlpModel::new(vec![layer], data.fit_norm().unwrap()).unwrap();
        assert!(mse(&m, &data, Split::Validation).unwrap() < 1e-28);
    }

    #[test]
    fn empty_split_is_an_error() {
        let rows: Vec<Row> = (0..10).map(|k| Row { t: k as f64, let_value: 5.0 + k as f64, vd: 0.1 * k as f64, current: 0.0 }).collect();
        let d = SetDataset::from_parts(rows, vec![Split::Train; 10], None).unwrap();
        let m = MlpModel::zeros(&Architecture::parse("2x1", Transfer::Tansig).unwrap(), unit_norm());
        assert!(matches!(mse(&m, &d, Split::Test), Err(TrainError::EmptySplit(Split::Test))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig { max_epochs: 0, ..Default::default() },
            TrainConfig { mu_init: 0.0, ..Default::default() },
            TrainConfig { mu_factor: 1.0, ..Default::default() },
            TrainConfig { lm_batch: Some(0), ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
