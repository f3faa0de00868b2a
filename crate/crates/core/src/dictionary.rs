//! Trainable observable dictionary `Psi(x) = [1; x; g(x)]`.
//!
//! The constant and coordinate observables are written directly and never
//! touch the network, so they stay exact under training. `g` is a fully
//! connected tanh network with a linear output layer.

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot limit");
        Self {
            weight: DMatrix::from_fn(outputs, inputs, |_, _| dist.sample(rng)),
            bias: DVector::zeros(outputs),
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Observable dictionary with `n_psi = 1 + n_x + n_learn` features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    n_x: usize,
    layers: Vec<Dense>,
}

impl Dictionary {
    /// Dictionary with only the constant and coordinate observables.
    pub fn fixed(n_x: usize) -> Self {
        Self { n_x, layers: Vec::new() }
    }

    /// Glorot-uniform initialized network `n_x -> hidden... -> n_learn`.
    pub fn new<R: Rng + ?Sized>(n_x: usize, hidden: &[usize], n_learn: usize, rng: &mut R) -> Self {
        if n_learn == 0 {
            return Self::fixed(n_x);
        }
        let mut widths = vec![n_x];
        widths.extend_from_slice(hidden);
        widths.push(n_learn);
        let layers = widths.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect();
        Self { n_x, layers }
    }

    /// Network with every weight and bias set to zero.
    pub fn zeros(n_x: usize, hidden: &[usize], n_learn: usize) -> Self {
        if n_learn == 0 {
            return Self::fixed(n_x);
        }
        let mut widths = vec![n_x];
        widths.extend_from_slice(hidden);
        widths.push(n_learn);
        let layers = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self { n_x, layers }
    }

    pub fn from_layers(n_x: usize, layers: Vec<Dense>) -> Result<Self> {
        let mut width = n_x;
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.ncols() != width || layer.bias.len() != layer.weight.nrows() {
                return Err(Error::Contract(format!("layer {i} has inconsistent shape")));
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("layer {i} has non-finite weights")));
            }
            width = layer.weight.nrows();
        }
        Ok(Self { n_x, layers })
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_learn(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn n_psi(&self) -> usize {
        1 + self.n_x + self.n_learn()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        let n = self.layers.len();
        self.layers.iter().take(n.saturating_sub(1)).map(|l| l.weight.nrows()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Product of spectral norms of the weight matrices; a Lipschitz bound
    /// for the learned block since tanh is 1-Lipschitz.
    pub fn lipschitz_bound(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.singular_values().max())
            .product()
    }

    pub fn lift(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.n_x {
            return Err(Error::Contract(format!(
                "state has {} entries, dictionary expects {}",
                x.len(),
                self.n_x
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("cannot lift a non-finite state".into()));
        }
        let mut z = DVector::zeros(self.n_psi());
        z[0] = 1.0;
        z.rows_mut(1, self.n_x).copy_from_slice(x);
        if !self.layers.is_empty() {
            let mut h = DVector::from_column_slice(x);
            let last = self.layers.len() - 1;
            for (i, layer) in self.layers.iter().enumerate() {
                h = &layer.weight * h + &layer.bias;
                if i < last {
                    h.apply(|v| *v = v.tanh());
                }
            }
            z.rows_mut(1 + self.n_x, h.len()).copy_from(&h);
        }
        Ok(z)
    }

    /// Lift every column of `xs` (shape `n_x x batch`).
    pub fn lift_batch(&self, xs: DMatrixView<'_, f64>) -> DMatrix<f64> {
        self.forward(xs).lifted
    }

    fn forward(&self, xs: DMatrixView<'_, f64>) -> Forward {
        let batch = xs.ncols();
        let mut lifted = DMatrix::zeros(self.n_psi(), batch);
        lifted.row_mut(0).fill(1.0);
        lifted.rows_mut(1, self.n_x).copy_from(&xs);
        let mut activations = Vec::with_capacity(self.layers.len());
        if !self.layers.is_empty() {
            let last = self.layers.len() - 1;
            let mut h = xs.clone_owned();
            for (i, layer) in self.layers.iter().enumerate() {
                let mut next = &layer.weight * &h;
                for mut col in next.column_iter_mut() {
                    col += &layer.bias;
                }
                if i < last {
                    next.apply(|v| *v = v.tanh());
                }
                activations.push(std::mem::replace(&mut h, next));
            }
            lifted.rows_mut(1 + self.n_x, self.n_learn()).copy_from(&h);
        }
        Forward { activations, lifted }
    }

    /// Accumulate into `grad` the gradient of a loss whose derivative with
    /// respect to the lifted batch is `d_lifted` (`n_psi x batch`).
    fn backward(&self, fwd: &Forward, d_lifted: &DMatrix<f64>, grad: &mut DictGradient) {
        if self.layers.is_empty() {
            return;
        }
        let mut delta = d_lifted.rows(1 + self.n_x, self.n_learn()).clone_owned();
        for i in (0..self.layers.len()).rev() {
            let input = &fwd.activations[i];
            let g = &mut grad.layers[i];
            g.weight.gemm(1.0, &delta, &input.transpose(), 1.0);
            for col in delta.column_iter() {
                g.bias += col;
            }
            if i > 0 {
                let mut back = self.layers[i].weight.transpose() * &delta;
                // input is tanh output of the previous layer
                back.zip_apply(input, |d, a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
    }

    pub fn zero_gradient(&self) -> DictGradient {
        DictGradient {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.ncols(), l.weight.nrows()))
                .collect(),
        }
    }

    /// Flattened parameters: per layer, weight (column-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Contract(format!(
                "{} parameters supplied, dictionary has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
            let n = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

struct Forward {
    /// Input to each layer (the raw state for layer 0).
    activations: Vec<DMatrix<f64>>,
    lifted: DMatrix<f64>,
}

/// Gradient with the same layout as the dictionary weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DictGradient {
    pub layers: Vec<Dense>,
}

impl DictGradient {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }
}

/// Column batch of snapshots prepared for the EDMD-DL loss.
///
/// `phi` holds the basis values `Phi_k(theta_j)` (`n_terms x batch`).
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub x: DMatrixView<'a, f64>,
    pub u: DMatrixView<'a, f64>,
    pub x_plus: DMatrixView<'a, f64>,
    pub phi: DMatrixView<'a, f64>,
}

impl LossBatch<'_> {
    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }
}

/// Kronecker regressors `r_j = phi(theta_j) (x) [z_j; u_j]`, one per column.
pub fn regressors(z: &DMatrix<f64>, u: DMatrixView<'_, f64>, phi: DMatrixView<'_, f64>) -> DMatrix<f64> {
    let n_psi = z.nrows();
    let block = n_psi + u.nrows();
    let n_terms = phi.nrows();
    let batch = z.ncols();
    let mut r = DMatrix::zeros(n_terms * block, batch);
    for j in 0..batch {
        let zj = z.column(j);
        let uj = u.column(j);
        let mut col = r.column_mut(j);
        for k in 0..n_terms {
            let p = phi[(k, j)];
            let base = k * block;
            for i in 0..n_psi {
                col[base + i] = p * zj[i];
            }
            for i in 0..uj.len() {
                col[base + n_psi + i] = p * uj[i];
            }
        }
    }
    r
}

/// Mean squared one-step residual of the lifted model and its gradient with
/// respect to the dictionary weights, with the stacked coefficient matrix
/// `coeffs = [A_0 B_0 A_1 B_1 ...]` held fixed.
pub fn loss_and_grad(dict: &Dictionary, batch: LossBatch<'_>, coeffs: &DMatrix<f64>) -> Result<(f64, DictGradient)> {
    let (loss, grad) = loss_impl(dict, batch, coeffs, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

/// Mean squared one-step residual without the gradient.
pub fn batch_loss(dict: &Dictionary, batch: LossBatch<'_>, coeffs: &DMatrix<f64>) -> Result<f64> {
    loss_impl(dict, batch, coeffs, false).map(|(l, _)| l)
}

fn loss_impl(
    dict: &Dictionary,
    batch: LossBatch<'_>,
    coeffs: &DMatrix<f64>,
    want_grad: bool,
) -> Result<(f64, Option<DictGradient>)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Contract("loss batch is empty".into()));
    }
    let n_psi = dict.n_psi();
    let n_u = batch.u.nrows();
    let n_terms = batch.phi.nrows();
    if batch.x.nrows() != dict.n_x()
        || batch.x_plus.nrows() != dict.n_x()
        || batch.x_plus.ncols() != n
        || batch.u.ncols() != n
        || batch.phi.ncols() != n
    {
        return Err(Error::Contract("loss batch columns or state rows mismatch".into()));
    }
    if coeffs.nrows() != n_psi || coeffs.ncols() != n_terms * (n_psi + n_u) {
        return Err(Error::Contract(format!(
            "coefficients are {}x{}, expected {}x{}",
            coeffs.nrows(),
            coeffs.ncols(),
            n_psi,
            n_terms * (n_psi + n_u)
        )));
    }

    let fwd_now = dict.forward(batch.x);
    let fwd_next = dict.forward(batch.x_plus);
    let reg = regressors(&fwd_now.lifted, batch.u, batch.phi);
    let residual = &fwd_next.lifted - coeffs * &reg;
    let loss = residual.norm_squared() / n as f64;
    if !want_grad {
        return Ok((loss, None));
    }

    let mut grad = dict.zero_gradient();
    if dict.n_learn() > 0 {
        dict.backward(&fwd_next, &residual, &mut grad);
        let d_reg = coeffs.transpose() * &residual;
        let block = n_psi + n_u;
        let mut d_now = DMatrix::zeros(n_psi, n);
        for j in 0..n {
            let src = d_reg.column(j);
            let mut dst = d_now.column_mut(j);
            for k in 0..n_terms {
                let p = batch.phi[(k, j)];
                for i in 0..n_psi {
                    dst[i] -= p * src[k * block + i];
                }
            }
        }
        dict.backward(&fwd_now, &d_now, &mut grad);
        grad.scale(2.0 / n as f64);
    }
    Ok((loss, Some(grad)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, dict: &Dictionary) -> Self {
        let n = dict.param_count();
        Self {
            config,
            step: 0,
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, dict: &mut Dictionary, grad: &DictGradient) -> Result<()> {
        if grad.layers.len() != dict.layers.len()
            || grad
                .layers
                .iter()
                .zip(&dict.layers)
                .any(|(g, l)| g.weight.shape() != l.weight.shape() || g.bias.len() != l.bias.len())
        {
            return Err(Error::Contract("gradient shape does not match dictionary".into()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut offset = 0;
        for (layer, g) in dict.layers.iter_mut().zip(&grad.layers) {
            let pairs = layer
                .weight
                .iter_mut()
                .zip(g.weight.iter())
                .chain(layer.bias.iter_mut().zip(g.bias.iter()));
            for (w, &gi) in pairs {
                let m = &mut self.first[offset];
                let v = &mut self.second[offset];
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
                offset += 1;
            }
        }
        Ok(())
    }
}
