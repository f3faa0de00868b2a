//! Polynomial parametric Koopman model: identification and evaluation.
//!
//! The lifted dynamics are `z+ = A(theta) z + B(theta) u` with
//! `A(theta) = sum_k A_k Phi_k(theta)` (same for `B`), and `x = C z` where `C`
//! picks the coordinate block of the dictionary.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dictionary::{batch_loss, loss_and_grad, regressors, Adam, AdamConfig, Dictionary, LossBatch};
use crate::error::{Error, Result};
use crate::pce::PceBasis;

/// Samples per block when accumulating normal equations.
const GRAM_CHUNK: usize = 4096;

/// One transition `(x, u) -> x_plus` observed under parameter `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub x_plus: Vec<f64>,
    pub theta: Vec<f64>,
    /// Index of the simulated trajectory this transition belongs to.
    pub trajectory: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_x: usize,
    pub n_u: usize,
    pub n_theta: usize,
    pub snapshots: Vec<Snapshot>,
}

impl Dataset {
    pub fn new(n_x: usize, n_u: usize, n_theta: usize, snapshots: Vec<Snapshot>) -> Result<Self> {
        let ds = Self { n_x, n_u, n_theta, snapshots };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (j, s) in self.snapshots.iter().enumerate() {
            if s.x.len() != self.n_x
                || s.x_plus.len() != self.n_x
                || s.u.len() != self.n_u
                || s.theta.len() != self.n_theta
            {
                return Err(Error::Contract(format!("snapshot {j} has inconsistent dimensions")));
            }
            let finite = s.x.iter().chain(&s.u).chain(&s.x_plus).chain(&s.theta).all(|v| v.is_finite());
            if !finite {
                return Err(Error::Contract(format!("snapshot {j} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Partition snapshot indices into (train, validation) by whole
    /// trajectories. At least one trajectory lands on each side when the
    /// dataset has two or more.
    pub fn split_by_trajectory(&self, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut ids: Vec<usize> = self.snapshots.iter().map(|s| s.trajectory).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        let mut n_val = (validation_fraction * ids.len() as f64).round() as usize;
        if ids.len() >= 2 {
            n_val = n_val.clamp(1, ids.len() - 1);
        } else {
            n_val = 0;
        }
        let val_ids: std::collections::HashSet<usize> = ids[..n_val].iter().copied().collect();
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (j, s) in self.snapshots.iter().enumerate() {
            if val_ids.contains(&s.trajectory) {
                val.push(j);
            } else {
                train.push(j);
            }
        }
        (train, val)
    }
}

/// Column-major view of a dataset subset with precomputed basis values.
#[derive(Debug, Clone)]
pub struct Columns {
    pub x: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub x_plus: DMatrix<f64>,
    pub phi: DMatrix<f64>,
}

impl Columns {
    pub fn build(dataset: &Dataset, indices: &[usize], basis: &PceBasis) -> Result<Self> {
        if basis.dim() != dataset.n_theta {
            return Err(Error::Contract(format!(
                "basis dimension {} does not match parameter dimension {}",
                basis.dim(),
                dataset.n_theta
            )));
        }
        let m = indices.len();
        let mut x = DMatrix::zeros(dataset.n_x, m);
        let mut u = DMatrix::zeros(dataset.n_u, m);
        let mut x_plus = DMatrix::zeros(dataset.n_x, m);
        let mut phi = DMatrix::zeros(basis.len(), m);
        for (col, &j) in indices.iter().enumerate() {
            let s = &dataset.snapshots[j];
            x.column_mut(col).copy_from_slice(&s.x);
            u.column_mut(col).copy_from_slice(&s.u);
            x_plus.column_mut(col).copy_from_slice(&s.x_plus);
            basis.eval_into(&s.theta, phi.column_mut(col).as_mut_slice())?;
        }
        Ok(Self { x, u, x_plus, phi })
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    fn batch(&self, start: usize, len: usize) -> LossBatch<'_> {
        LossBatch {
            x: self.x.columns(start, len),
            u: self.u.columns(start, len),
            x_plus: self.x_plus.columns(start, len),
            phi: self.phi.columns(start, len),
        }
    }

    fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_columns(idx),
            u: self.u.select_columns(idx),
            x_plus: self.x_plus.select_columns(idx),
            phi: self.phi.select_columns(idx),
        }
    }
}

/// PCE coefficient matrices `{A_k}` and `{B_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
}

impl Coefficients {
    pub fn zeros(n_terms: usize, n_psi: usize, n_u: usize) -> Self {
        Self {
            a: vec![DMatrix::zeros(n_psi, n_psi); n_terms],
            b: vec![DMatrix::zeros(n_psi, n_u); n_terms],
        }
    }

    pub fn n_terms(&self) -> usize {
        self.a.len()
    }

    pub fn n_psi(&self) -> usize {
        self.a.first().map_or(0, |a| a.nrows())
    }

    pub fn n_u(&self) -> usize {
        self.b.first().map_or(0, |b| b.ncols())
    }

    /// Stack as `[A_0 B_0 A_1 B_1 ...]`, matching the Kronecker regressor.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (n_psi, n_u) = (self.n_psi(), self.n_u());
        let block = n_psi + n_u;
        let mut w = DMatrix::zeros(n_psi, self.n_terms() * block);
        for k in 0..self.n_terms() {
            w.view_mut((0, k * block), (n_psi, n_psi)).copy_from(&self.a[k]);
            w.view_mut((0, k * block + n_psi), (n_psi, n_u)).copy_from(&self.b[k]);
        }
        w
    }

    pub fn from_stacked(w: &DMatrix<f64>, n_terms: usize, n_u: usize) -> Result<Self> {
        let n_psi = w.nrows();
        let block = n_psi + n_u;
        if w.ncols() != n_terms * block {
            return Err(Error::Contract(format!(
                "stacked coefficients have {} columns, expected {}",
                w.ncols(),
                n_terms * block
            )));
        }
        let a = (0..n_terms).map(|k| w.view((0, k * block), (n_psi, n_psi)).clone_owned()).collect();
        let b = (0..n_terms).map(|k| w.view((0, k * block + n_psi), (n_psi, n_u)).clone_owned()).collect();
        Ok(Self { a, b })
    }

    pub fn frobenius_norm_squared(&self) -> f64 {
        self.a.iter().chain(&self.b).map(|m| m.norm_squared()).sum()
    }
}

/// Regularized least-squares solve for the coefficient matrices over the
/// whole dataset.
pub fn fit_coefficients(dataset: &Dataset, dict: &Dictionary, basis: &PceBasis, ridge: f64) -> Result<Coefficients> {
    if dataset.is_empty() {
        return Err(Error::Contract("cannot fit coefficients on an empty dataset".into()));
    }
    if dict.n_x() != dataset.n_x {
        return Err(Error::Contract("dictionary state dimension does not match dataset".into()));
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    let cols = Columns::build(dataset, &all, basis)?;
    fit_on_columns(&cols, dict, ridge)
}

pub fn fit_on_columns(cols: &Columns, dict: &Dictionary, ridge: f64) -> Result<Coefficients> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Contract(format!("ridge weight {ridge} must be finite and >= 0")));
    }
    let n_psi = dict.n_psi();
    let n_u = cols.u.nrows();
    let n_terms = cols.phi.nrows();
    let dim = n_terms * (n_psi + n_u);
    if cols.len() < dim {
        log::warn!("fitting {dim} regressors from only {} samples", cols.len());
    }
    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    let mut cross = DMatrix::<f64>::zeros(dim, n_psi);
    let mut start = 0;
    while start < cols.len() {
        let len = GRAM_CHUNK.min(cols.len() - start);
        let b = cols.batch(start, len);
        let z = dict.lift_batch(b.x);
        let z_plus = dict.lift_batch(b.x_plus);
        let r = regressors(&z, b.u, b.phi);
        gram.gemm(1.0, &r, &r.transpose(), 1.0);
        cross.gemm(1.0, &r, &z_plus.transpose(), 1.0);
        start += len;
    }
    gram = (&gram + gram.transpose()) * 0.5;
    let solution = solve_normal_equations(gram, &cross, ridge)?;
    Coefficients::from_stacked(&solution.transpose(), n_terms, n_u)
}

/// Solve `(G + ridge I) W = S`, escalating the ridge on factorization
/// failure. With `ridge == 0` a failure is reported as rank deficiency.
fn solve_normal_equations(gram: DMatrix<f64>, rhs: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let dim = gram.nrows();
    let scale = gram.diagonal().amax().max(f64::MIN_POSITIVE);
    let attempt = |lambda: f64| -> Option<DMatrix<f64>> {
        let mut m = gram.clone();
        for i in 0..dim {
            m[(i, i)] += lambda;
        }
        let chol = Cholesky::new(m)?;
        let l = chol.l_dirty();
        let min_pivot = (0..dim).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if min_pivot <= scale * 1e-14 {
            return None;
        }
        Some(chol.solve(rhs))
    };
    if ridge == 0.0 {
        return attempt(0.0).ok_or_else(|| {
            let eig = SymmetricEigen::new(gram.clone());
            let deficient = eig.eigenvalues.iter().filter(|&&v| v <= scale * 1e-12).count().max(1);
            Error::RankDeficient { deficient, dim }
        });
    }
    let mut lambda = ridge;
    for _ in 0..12 {
        if let Some(w) = attempt(lambda) {
            if lambda != ridge {
                log::warn!("normal equations needed ridge {lambda:e} instead of {ridge:e}");
            }
            return Ok(w);
        }
        lambda *= 10.0;
    }
    Err(Error::Numeric(format!("normal equations failed up to ridge {lambda:e}")))
}

/// Training provenance stored alongside a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: Option<u64>,
    pub ridge: f64,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpkoModel {
    basis: PceBasis,
    dict: Dictionary,
    coeffs: Coefficients,
    output: DMatrix<f64>,
    pub meta: ModelMeta,
}

impl PpkoModel {
    pub fn new(basis: PceBasis, dict: Dictionary, coeffs: Coefficients) -> Result<Self> {
        let n_psi = dict.n_psi();
        if coeffs.n_terms() != basis.len() {
            return Err(Error::Contract(format!(
                "{} coefficient matrices for a {}-term basis",
                coeffs.n_terms(),
                basis.len()
            )));
        }
        let shapes_ok = coeffs.a.iter().all(|a| a.shape() == (n_psi, n_psi))
            && coeffs.b.iter().all(|b| b.nrows() == n_psi && b.ncols() == coeffs.n_u());
        if !shapes_ok {
            return Err(Error::Contract("coefficient matrix shapes disagree with dictionary".into()));
        }
        if coeffs.a.iter().chain(&coeffs.b).any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Contract("coefficient matrices contain non-finite values".into()));
        }
        let n_x = dict.n_x();
        let mut output = DMatrix::zeros(n_x, n_psi);
        for i in 0..n_x {
            output[(i, 1 + i)] = 1.0;
        }
        Ok(Self {
            basis,
            dict,
            coeffs,
            output,
            meta: ModelMeta::default(),
        })
    }

    pub fn basis(&self) -> &PceBasis {
        &self.basis
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dict
    }

    pub fn coefficients(&self) -> &Coefficients {
        &self.coeffs
    }

    /// Output matrix selecting the coordinate observables.
    pub fn output_matrix(&self) -> &DMatrix<f64> {
        &self.output
    }

    pub fn n_x(&self) -> usize {
        self.dict.n_x()
    }

    pub fn n_u(&self) -> usize {
        self.coeffs.n_u()
    }

    pub fn n_psi(&self) -> usize {
        self.dict.n_psi()
    }

    pub fn n_terms(&self) -> usize {
        self.basis.len()
    }

    pub fn lift(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.dict.lift(x)
    }

    /// `A(theta)` and `B(theta)` assembled from the expansion.
    pub fn matrices_at(&self, theta: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let phi = self.basis.eval(theta)?;
        let mut a = DMatrix::<f64>::zeros(self.n_psi(), self.n_psi());
        let mut b = DMatrix::<f64>::zeros(self.n_psi(), self.n_u());
        for (k, &p) in phi.iter().enumerate() {
            a += &self.coeffs.a[k] * p;
            b += &self.coeffs.b[k] * p;
        }
        Ok((a, b))
    }

    pub fn step(&self, z: &DVector<f64>, u: &DVector<f64>, theta: &[f64]) -> Result<DVector<f64>> {
        if z.len() != self.n_psi() || u.len() != self.n_u() {
            return Err(Error::Contract("lifted state or input has the wrong length".into()));
        }
        let (a, b) = self.matrices_at(theta)?;
        Ok(a * z + b * u)
    }

    /// Predicted states `x_1..x_H` from `x0` under the stacked inputs
    /// `[u_0; ...; u_{H-1}]`.
    pub fn rollout(&self, x0: &[f64], inputs: &[f64], theta: &[f64]) -> Result<Vec<DVector<f64>>> {
        let z0 = self.lift(x0)?;
        self.rollout_lifted(&z0, inputs, theta)
    }

    pub fn rollout_lifted(&self, z0: &DVector<f64>, inputs: &[f64], theta: &[f64]) -> Result<Vec<DVector<f64>>> {
        let n_u = self.n_u();
        if z0.len() != self.n_psi() {
            return Err(Error::Contract("lifted initial state has the wrong length".into()));
        }
        if (n_u == 0 && !inputs.is_empty()) || (n_u > 0 && !inputs.len().is_multiple_of(n_u)) {
            return Err(Error::Contract(format!("{} inputs is not a multiple of n_u = {n_u}", inputs.len())));
        }
        let (a, b) = self.matrices_at(theta)?;
        let horizon = inputs.len().checked_div(n_u).unwrap_or(0);
        let mut z = z0.clone();
        let mut out = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let u = DVector::from_column_slice(&inputs[t * n_u..(t + 1) * n_u]);
            z = &a * &z + &b * u;
            out.push(&self.output * &z);
        }
        Ok(out)
    }

    /// Autonomous rollout for `steps` steps with zero input.
    pub fn rollout_free(&self, x0: &[f64], steps: usize, theta: &[f64]) -> Result<Vec<DVector<f64>>> {
        let inputs = vec![0.0; steps * self.n_u()];
        if self.n_u() > 0 {
            return self.rollout(x0, &inputs, theta);
        }
        let (a, _) = self.matrices_at(theta)?;
        let mut z = self.lift(x0)?;
        Ok((0..steps)
            .map(|_| {
                z = &a * &z;
                &self.output * &z
            })
            .collect())
    }

    /// Mean squared one-step residual over a dataset.
    pub fn dataset_loss(&self, dataset: &Dataset) -> Result<f64> {
        let all: Vec<usize> = (0..dataset.len()).collect();
        let cols = Columns::build(dataset, &all, &self.basis)?;
        mean_residual(&cols, &self.dict, &self.coeffs.stacked())
    }

    pub(crate) fn from_parts(basis: PceBasis, dict: Dictionary, coeffs: Coefficients, meta: ModelMeta) -> Result<Self> {
        let mut m = Self::new(basis, dict, coeffs)?;
        m.meta = meta;
        Ok(m)
    }
}

fn mean_residual(cols: &Columns, dict: &Dictionary, stacked: &DMatrix<f64>) -> Result<f64> {
    if cols.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut start = 0;
    while start < cols.len() {
        let len = GRAM_CHUNK.min(cols.len() - start);
        total += batch_loss(dict, cols.batch(start, len), stacked)? * len as f64;
        start += len;
    }
    Ok(total / cols.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs_max: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub ridge: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_max: 1000,
            batch_size: 2048,
            patience: 100,
            ridge: 0.0,
            validation_fraction: 0.1,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_max < 1 || self.batch_size < 1 {
            return Err(Error::Contract("epochs_max and batch_size must be >= 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Contract("validation fraction must lie in (0, 1)".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Contract("ridge weight must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Regularized training objective (per sample) before the coefficient solve.
    pub objective_before_fit: f64,
    /// Regularized training objective (per sample) after the coefficient solve.
    pub objective_after_fit: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }
}

/// Alternating EDMD-DL: Adam passes on the dictionary with coefficients
/// frozen, then a closed-form coefficient solve over the full training set.
/// Returns the snapshot with the lowest validation loss.
pub fn train_edmd_dl(
    dataset: &Dataset,
    mut dict: Dictionary,
    basis: PceBasis,
    cfg: &TrainConfig,
) -> Result<(PpkoModel, TrainingLog)> {
    cfg.validate()?;
    dataset.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    let (train_idx, val_idx) = dataset.split_by_trajectory(cfg.validation_fraction, cfg.seed);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Contract("dataset needs at least two trajectories to split".into()));
    }
    let train = Columns::build(dataset, &train_idx, &basis)?;
    let val = Columns::build(dataset, &val_idx, &basis)?;
    let m = train.len() as f64;

    let objective = |dict: &Dictionary, coeffs: &Coefficients| -> Result<(f64, f64)> {
        let loss = mean_residual(&train, dict, &coeffs.stacked())?;
        Ok((loss, loss + cfg.ridge * coeffs.frobenius_norm_squared() / m))
    };

    let mut coeffs = fit_on_columns(&train, &dict, cfg.ridge)?;
    let (train_loss, obj) = objective(&dict, &coeffs)?;
    let val_loss = mean_residual(&val, &dict, &coeffs.stacked())?;
    let mut log = TrainingLog {
        records: vec![EpochRecord {
            epoch: 0,
            objective_before_fit: obj,
            objective_after_fit: obj,
            train_loss,
            val_loss,
        }],
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best = (dict.clone(), coeffs.clone(), val_loss, train_loss);

    if dict.n_learn() > 0 {
        let mut adam = Adam::new(cfg.adam, &dict);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut history = Vec::new();
        let mut since_best = 0;
        for epoch in 1..=cfg.epochs_max {
            order.shuffle(&mut rng);
            let stacked = coeffs.stacked();
            for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let cols = train.select(chunk);
                let (loss, grad) = loss_and_grad(&dict, cols.batch(0, chunk.len()), &stacked)?;
                history.push(loss);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_no,
                        loss,
                        history: tail(&history),
                    });
                }
                adam.update(&mut dict, &grad)?;
            }
            let (_, before) = objective(&dict, &coeffs)?;
            coeffs = fit_on_columns(&train, &dict, cfg.ridge)?;
            let (train_loss, after) = objective(&dict, &coeffs)?;
            let val_loss = mean_residual(&val, &dict, &coeffs.stacked())?;
            if !(train_loss.is_finite() && val_loss.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: usize::MAX,
                    loss: train_loss,
                    history: tail(&history),
                });
            }
            log.records.push(EpochRecord {
                epoch,
                objective_before_fit: before,
                objective_after_fit: after,
                train_loss,
                val_loss,
            });
            log::debug!("epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e}");
            if val_loss < best.2 {
                best = (dict.clone(), coeffs.clone(), val_loss, train_loss);
                log.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }

    let (dict, coeffs, val_loss, train_loss) = best;
    let meta = ModelMeta {
        seed: Some(cfg.seed),
        ridge: cfg.ridge,
        train_loss: Some(train_loss),
        val_loss: Some(val_loss),
        epochs: log.records.len() - 1,
    };
    let model = PpkoModel::from_parts(basis, dict, coeffs, meta)?;
    Ok((model, log))
}

fn tail(history: &[f64]) -> Vec<f64> {
    history[history.len().saturating_sub(20)..].to_vec()
}
