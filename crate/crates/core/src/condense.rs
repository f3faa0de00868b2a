//! Offline condensation of the stochastic MPC problem.
//!
//! With `X = E(theta) z0 + F(theta) U` the expected cost becomes
//! `U' H U + 2 g' U + const`, where every expectation over `theta` is taken
//! once with a quadrature rule. Only `z0` changes online.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PpkoModel;
use crate::pce::QuadratureRule;
use crate::solver::{ProgramInstance, QuadConstraint};

/// Lifted linear model with parameter-dependent matrices.
pub trait ParametricLinear {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn n_psi(&self) -> usize;
    /// Highest polynomial degree of `A(theta)`, `B(theta)` in any parameter.
    fn degree(&self) -> usize;
    fn output_matrix(&self) -> &DMatrix<f64>;
    fn matrices_at(&self, theta: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)>;
}

impl ParametricLinear for PpkoModel {
    fn n_x(&self) -> usize {
        PpkoModel::n_x(self)
    }

    fn n_u(&self) -> usize {
        PpkoModel::n_u(self)
    }

    fn n_psi(&self) -> usize {
        PpkoModel::n_psi(self)
    }

    fn degree(&self) -> usize {
        self.basis().degree()
    }

    fn output_matrix(&self) -> &DMatrix<f64> {
        PpkoModel::output_matrix(self)
    }

    fn matrices_at(&self, theta: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        PpkoModel::matrices_at(self, theta)
    }
}

/// Bound on `E[(a' x_t - b)^2] <= c^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentConstraint {
    pub t: usize,
    pub a: Vec<f64>,
    pub b: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmpcSpec {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_f: DMatrix<f64>,
    /// Per-step bounds on the mean state, `x_min[t-1]` for step `t`. Empty
    /// means unconstrained.
    pub x_min: Vec<Vec<f64>>,
    pub x_max: Vec<Vec<f64>>,
    pub moments: Vec<MomentConstraint>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

impl SmpcSpec {
    /// Unconstrained-state spec with input box.
    pub fn new(horizon: usize, q: DMatrix<f64>, r: DMatrix<f64>, q_f: DMatrix<f64>, u_min: Vec<f64>, u_max: Vec<f64>) -> Self {
        Self {
            horizon,
            q,
            r,
            q_f,
            x_min: Vec::new(),
            x_max: Vec::new(),
            moments: Vec::new(),
            u_min,
            u_max,
        }
    }

    /// Same elementwise mean-state bounds at every step.
    pub fn with_state_bounds(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        self.x_min = vec![lo; self.horizon];
        self.x_max = vec![hi; self.horizon];
        self
    }

    pub fn n_x(&self) -> usize {
        self.q.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.r.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n_x, n_u) = (self.n_x(), self.n_u());
        if self.horizon < 1 {
            return Err(Error::Contract("prediction horizon must be >= 1".into()));
        }
        if !self.q.is_square() || self.q_f.shape() != (n_x, n_x) || !self.r.is_square() {
            return Err(Error::Contract("weight matrices must be square with matching sizes".into()));
        }
        for (name, m) in [("Q", &self.q), ("Q_f", &self.q_f)] {
            check_psd(m, name)?;
        }
        check_symmetric(&self.r, "R")?;
        if Cholesky::new(self.r.clone()).is_none() {
            return Err(Error::Contract("R must be positive definite".into()));
        }
        if self.u_min.len() != n_u || self.u_max.len() != n_u {
            return Err(Error::Contract(format!("input bounds must have length n_u = {n_u}")));
        }
        if self.u_min.iter().zip(&self.u_max).any(|(lo, hi)| !(lo <= hi) || lo.is_nan()) {
            return Err(Error::Contract("input bounds need u_min <= u_max".into()));
        }
        if self.x_min.len() != self.x_max.len() || !(self.x_min.is_empty() || self.x_min.len() == self.horizon) {
            return Err(Error::Contract("state bounds must be empty or given for every step".into()));
        }
        for (lo, hi) in self.x_min.iter().zip(&self.x_max) {
            if lo.len() != n_x || hi.len() != n_x || lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                return Err(Error::Contract("each state bound needs n_x entries with lo <= hi".into()));
            }
        }
        for m in &self.moments {
            if m.t < 1 || m.t > self.horizon {
                return Err(Error::Contract(format!("moment constraint step {} outside 1..={}", m.t, self.horizon)));
            }
            if m.a.len() != n_x || !(m.c > 0.0) || !m.b.is_finite() {
                return Err(Error::Contract("moment constraint needs |a| = n_x, finite b and c > 0".into()));
            }
        }
        Ok(())
    }

    /// Stacked `[Q; ...; Q; Q_f]` weight on `x_1..x_H`.
    fn state_weight(&self, t: usize) -> &DMatrix<f64> {
        if t == self.horizon {
            &self.q_f
        } else {
            &self.q
        }
    }

    pub fn descriptor(&self) -> serde_json::Value {
        let mat = |m: &DMatrix<f64>| -> Vec<Vec<f64>> { m.row_iter().map(|r| r.iter().copied().collect()).collect() };
        serde_json::json!({
            "horizon": self.horizon,
            "q": mat(&self.q),
            "r": mat(&self.r),
            "q_f": mat(&self.q_f),
            "x_min": self.x_min,
            "x_max": self.x_max,
            "moments": self.moments,
            "u_min": self.u_min,
            "u_max": self.u_max,
        })
    }
}

fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Contract(format!("{name} must be symmetric")));
    }
    Ok(())
}

fn check_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    check_symmetric(m, name)?;
    let min = SymmetricEigen::new(m.clone()).eigenvalues.min();
    if min < -1e-10 * m.amax().max(1.0) {
        return Err(Error::Contract(format!("{name} must be positive semidefinite (eigenvalue {min:e})")));
    }
    Ok(())
}

/// Prediction matrices: block row `t` of `E` is `C A^t`, block `(t, s)` of
/// `F` is `C A^(t-1-s) B`.
pub fn build_ef<M: ParametricLinear + ?Sized>(model: &M, horizon: usize, theta: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if horizon < 1 {
        return Err(Error::Contract("horizon must be >= 1".into()));
    }
    let (a, b) = model.matrices_at(theta)?;
    Ok(ef_from_matrices(model.output_matrix(), &a, &b, horizon))
}

fn ef_from_matrices(c: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, horizon: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n_x, n_psi, n_u) = (c.nrows(), a.nrows(), b.ncols());
    let mut e = DMatrix::zeros(horizon * n_x, n_psi);
    let mut f = DMatrix::zeros(horizon * n_x, horizon * n_u);
    // powers[k] = C A^k, k = 0..horizon
    let mut powers = Vec::with_capacity(horizon + 1);
    powers.push(c.clone());
    for k in 1..=horizon {
        let next = &powers[k - 1] * a;
        powers.push(next);
    }
    let cb: Vec<DMatrix<f64>> = powers[..horizon].iter().map(|p| p * b).collect();
    for t in 1..=horizon {
        e.rows_mut((t - 1) * n_x, n_x).copy_from(&powers[t]);
        for s in 0..t {
            f.view_mut(((t - 1) * n_x, s * n_u), (n_x, n_u)).copy_from(&cb[t - 1 - s]);
        }
    }
    (e, f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondensedMoment {
    pub t: usize,
    /// `E[G' a a' G]` with `G = [E_t F_t]`.
    pub m: DMatrix<f64>,
    /// `E[G' a]`.
    pub c: DVector<f64>,
    pub b: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondensedProblem {
    pub horizon: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub n_psi: usize,
    pub h: DMatrix<f64>,
    pub w_ge: DMatrix<f64>,
    pub w_ee: DMatrix<f64>,
    pub e_bar: Vec<DMatrix<f64>>,
    pub f_bar: Vec<DMatrix<f64>>,
    pub moments: Vec<CondensedMoment>,
    pub x_min: Vec<Vec<f64>>,
    pub x_max: Vec<Vec<f64>>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub quad_nodes: usize,
    /// Fingerprint of the inputs this problem was built from, if known.
    pub provenance: String,
}

/// Nodes per dimension at which the condensed matrices are integrated
/// exactly for a model of the given per-parameter degree.
pub fn exact_node_count(degree: usize, horizon: usize) -> usize {
    degree * horizon + 1
}

pub fn condense<M: ParametricLinear + ?Sized>(model: &M, spec: &SmpcSpec, quad: &QuadratureRule) -> Result<CondensedProblem> {
    spec.validate()?;
    let (n_x, n_u, n_psi, horizon) = (model.n_x(), model.n_u(), model.n_psi(), spec.horizon);
    if spec.n_x() != n_x || spec.n_u() != n_u {
        return Err(Error::Contract(format!(
            "spec is for n_x = {}, n_u = {} but model has n_x = {n_x}, n_u = {n_u}",
            spec.n_x(),
            spec.n_u()
        )));
    }
    if quad.is_empty() {
        return Err(Error::Contract("quadrature rule has no nodes".into()));
    }
    let needed = exact_node_count(model.degree(), horizon);
    log::info!(
        "condensing with {} quadrature nodes; exact integration needs {needed} per dimension",
        quad.len()
    );
    let dim_u = horizon * n_u;
    let dim_g = n_psi + dim_u;
    let mut h = DMatrix::<f64>::zeros(dim_u, dim_u);
    let mut w_ge = DMatrix::<f64>::zeros(dim_u, n_psi);
    let mut w_ee = DMatrix::<f64>::zeros(n_psi, n_psi);
    let mut e_bar = vec![DMatrix::<f64>::zeros(n_x, n_psi); horizon];
    let mut f_bar = vec![DMatrix::<f64>::zeros(n_x, dim_u); horizon];
    let mut m_acc = vec![DMatrix::<f64>::zeros(dim_g, dim_g); spec.moments.len()];
    let mut c_acc = vec![DVector::<f64>::zeros(dim_g); spec.moments.len()];

    for (theta, w) in quad.iter() {
        let (e, f) = build_ef(model, horizon, theta)?;
        let mut qe = DMatrix::<f64>::zeros(horizon * n_x, n_psi);
        let mut qf = DMatrix::<f64>::zeros(horizon * n_x, dim_u);
        for t in 1..=horizon {
            let qt = spec.state_weight(t);
            let rows = (t - 1) * n_x;
            qe.rows_mut(rows, n_x).copy_from(&(qt * e.rows(rows, n_x)));
            qf.rows_mut(rows, n_x).copy_from(&(qt * f.rows(rows, n_x)));
            e_bar[t - 1] += e.rows(rows, n_x) * w;
            f_bar[t - 1] += f.rows(rows, n_x) * w;
        }
        h.gemm_tr(w, &f, &qf, 1.0);
        w_ge.gemm_tr(w, &f, &qe, 1.0);
        w_ee.gemm_tr(w, &e, &qe, 1.0);
        for (k, mc) in spec.moments.iter().enumerate() {
            let rows = (mc.t - 1) * n_x;
            let a = DVector::from_column_slice(&mc.a);
            // G' a = [E_t' a; F_t' a]
            let mut ga = DVector::<f64>::zeros(dim_g);
            ga.rows_mut(0, n_psi).copy_from(&(e.rows(rows, n_x).transpose() * &a));
            ga.rows_mut(n_psi, dim_u).copy_from(&(f.rows(rows, n_x).transpose() * &a));
            m_acc[k].ger(w, &ga, &ga, 1.0);
            c_acc[k].axpy(w, &ga, 1.0);
        }
    }
    for t in 0..horizon {
        let mut block = h.view_mut((t * n_u, t * n_u), (n_u, n_u));
        block += &spec.r;
    }
    let h = symmetrize(h);
    let w_ee = symmetrize(w_ee);
    let moments = spec
        .moments
        .iter()
        .zip(m_acc.into_iter().zip(c_acc))
        .map(|(mc, (m, c))| CondensedMoment {
            t: mc.t,
            m: symmetrize(m),
            c,
            b: mc.b,
            bound: mc.c,
        })
        .collect();
    Ok(CondensedProblem {
        horizon,
        n_x,
        n_u,
        n_psi,
        h,
        w_ge,
        w_ee,
        e_bar,
        f_bar,
        moments,
        x_min: spec.x_min.clone(),
        x_max: spec.x_max.clone(),
        u_min: spec.u_min.clone(),
        u_max: spec.u_max.clone(),
        quad_nodes: quad.len(),
        provenance: String::new(),
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

impl CondensedProblem {
    pub fn decision_dim(&self) -> usize {
        self.horizon * self.n_u
    }

    /// Expected cost at `(z0, U)`.
    pub fn cost(&self, z0: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let g = &self.w_ge * z0;
        u.dot(&(&self.h * u)) + 2.0 * g.dot(u) + z0.dot(&(&self.w_ee * z0))
    }

    /// Expected squared deviation `E[(a' x_t - b)^2]` of moment constraint `k`.
    pub fn moment_value(&self, k: usize, z0: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let mc = &self.moments[k];
        let mut v = DVector::zeros(self.n_psi + self.decision_dim());
        v.rows_mut(0, self.n_psi).copy_from(z0);
        v.rows_mut(self.n_psi, self.decision_dim()).copy_from(u);
        v.dot(&(&mc.m * &v)) - 2.0 * mc.b * mc.c.dot(&v) + mc.b * mc.b
    }

    /// Mean predicted state at step `t` (1-based).
    pub fn mean_state(&self, t: usize, z0: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.e_bar[t - 1] * z0 + &self.f_bar[t - 1] * u
    }

    /// Convex program in `U` for the measured lifted state `z0`.
    pub fn instantiate(&self, z0: &DVector<f64>) -> Result<ProgramInstance> {
        if z0.len() != self.n_psi {
            return Err(Error::Contract(format!("z0 has length {}, expected {}", z0.len(), self.n_psi)));
        }
        let n = self.decision_dim();
        let q = &self.w_ge * z0;
        let constant = z0.dot(&(&self.w_ee * z0));

        let mut rows: Vec<DVector<f64>> = Vec::new();
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        for i in 0..n {
            let mut row = DVector::zeros(n);
            row[i] = 1.0;
            rows.push(row);
            lo.push(self.u_min[i % self.n_u]);
            hi.push(self.u_max[i % self.n_u]);
        }
        for (t, (xl, xh)) in self.x_min.iter().zip(&self.x_max).enumerate() {
            let offset = &self.e_bar[t] * z0;
            for i in 0..self.n_x {
                if xl[i] == f64::NEG_INFINITY && xh[i] == f64::INFINITY {
                    continue;
                }
                rows.push(self.f_bar[t].row(i).transpose());
                lo.push(xl[i] - offset[i]);
                hi.push(xh[i] - offset[i]);
            }
        }
        let a = if rows.is_empty() {
            DMatrix::zeros(0, n)
        } else {
            DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j])
        };

        let p = self.n_psi;
        let quadratic = self
            .moments
            .iter()
            .map(|mc| {
                let m_uu = mc.m.view((p, p), (n, n)).clone_owned();
                let m_uz = mc.m.view((p, 0), (n, p));
                let m_zz = mc.m.view((0, 0), (p, p));
                let c_z = mc.c.rows(0, p);
                let c_u = mc.c.rows(p, n);
                let q_i = m_uz * z0 - c_u * mc.b;
                let r_i = z0.dot(&(m_zz * z0)) - 2.0 * mc.b * c_z.dot(z0) + mc.b * mc.b - mc.bound * mc.bound;
                QuadConstraint { p: m_uu, q: q_i, r: r_i }
            })
            .collect();

        ProgramInstance::new(self.h.clone(), q, constant, a, DVector::from_vec(lo), DVector::from_vec(hi), quadratic)
    }
}
