//! Dense convex solvers for the condensed program.
//!
//! Instances have the form
//! `min v' P v + 2 q' v + const` subject to `lo <= A v <= hi` and
//! `v' P_i v + 2 q_i' v + r_i <= 0`.

use std::time::Duration;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod admm;
mod barrier;
mod dump;

pub use admm::{AdmmConfig, AdmmSolver};
pub use barrier::{BarrierConfig, BarrierSolver};
pub use dump::dump_instance;

/// Convex quadratic constraint `v' P v + 2 q' v + r <= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadConstraint {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub r: f64,
}

impl QuadConstraint {
    pub fn value(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.p * v)) + 2.0 * self.q.dot(v) + self.r
    }

    pub fn gradient(&self, v: &DVector<f64>) -> DVector<f64> {
        (&self.p * v + &self.q) * 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgramInstance {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub constant: f64,
    pub a: DMatrix<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
    pub quadratic: Vec<QuadConstraint>,
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

impl ProgramInstance {
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        constant: f64,
        a: DMatrix<f64>,
        lo: DVector<f64>,
        hi: DVector<f64>,
        quadratic: Vec<QuadConstraint>,
    ) -> Result<Self> {
        let n = q.len();
        if p.shape() != (n, n) || a.ncols() != n || lo.len() != a.nrows() || hi.len() != a.nrows() {
            return Err(Error::Contract("program dimensions are inconsistent".into()));
        }
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).amax() <= 1e-10 * m.amax().max(1.0);
        if !sym(&p) || min_eigenvalue(&p) < -1e-9 {
            return Err(Error::Contract("objective matrix must be symmetric positive semidefinite".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| !(l <= h)) {
            return Err(Error::Contract("linear bounds need lo <= hi".into()));
        }
        for (i, qc) in quadratic.iter().enumerate() {
            if qc.p.shape() != (n, n) || qc.q.len() != n {
                return Err(Error::Contract(format!("quadratic constraint {i} has wrong dimensions")));
            }
            if !sym(&qc.p) || min_eigenvalue(&qc.p) < -1e-9 {
                return Err(Error::Contract(format!("quadratic constraint {i} is not convex")));
            }
        }
        Ok(Self { p, q, constant, a, lo, hi, quadratic })
    }

    /// Box-constrained instance `lo <= v <= hi`.
    pub fn boxed(p: DMatrix<f64>, q: DVector<f64>, lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        let n = q.len();
        Self::new(p, q, 0.0, DMatrix::identity(n, n), lo, hi, Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.p * v)) + 2.0 * self.q.dot(v) + self.constant
    }

    /// Largest violation over all constraints, by direct substitution.
    pub fn max_violation(&self, v: &DVector<f64>) -> f64 {
        let av = &self.a * v;
        let lin = (0..av.len())
            .map(|i| (self.lo[i] - av[i]).max(av[i] - self.hi[i]))
            .fold(0.0f64, f64::max);
        self.quadratic.iter().map(|qc| qc.value(v)).fold(lin, f64::max)
    }

    /// Same instance with equal scaling of objective terms.
    pub fn scaled_objective(&self, alpha: f64) -> Self {
        Self {
            p: &self.p * alpha,
            q: &self.q * alpha,
            constant: self.constant * alpha,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub v: DVector<f64>,
    pub objective: f64,
    pub status: Status,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub solve_time: Duration,
}

/// Interface shared by the built-in solvers and any external adapter.
pub trait ConvexSolver {
    fn solve(&mut self, inst: &ProgramInstance, warm: Option<&DVector<f64>>) -> Result<Solution>;
}

/// Dispatches to ADMM for pure QPs and to the barrier method otherwise.
#[derive(Debug, Default)]
pub struct SmpcSolver {
    pub qp: AdmmSolver,
    pub qcqp: BarrierSolver,
}

impl SmpcSolver {
    pub fn new(qp: AdmmConfig, qcqp: BarrierConfig) -> Self {
        Self {
            qp: AdmmSolver::new(qp),
            qcqp: BarrierSolver::new(qcqp),
        }
    }
}

impl ConvexSolver for SmpcSolver {
    fn solve(&mut self, inst: &ProgramInstance, warm: Option<&DVector<f64>>) -> Result<Solution> {
        if inst.quadratic.is_empty() {
            self.qp.solve(inst, warm)
        } else {
            self.qcqp.solve(inst, warm)
        }
    }
}

#[cfg(test)]
pub(crate) mod oracles {
    use super::*;

    /// Accelerated projected gradient on a box-constrained QP.
    pub fn projected_gradient(inst: &ProgramInstance, tol: f64) -> DVector<f64> {
        let n = inst.dim();
        let lmax = SymmetricEigen::new(inst.p.clone()).eigenvalues.max().max(1e-12);
        let step = 1.0 / (2.0 * lmax);
        let proj = |v: DVector<f64>| v.zip_zip_map(&inst.lo, &inst.hi, |x, l, h| x.clamp(l, h));
        let mut x = proj(DVector::zeros(n));
        let mut y = x.clone();
        let mut t: f64 = 1.0;
        for _ in 0..2_000_000 {
            let g = (&inst.p * &y + &inst.q) * 2.0;
            let x_next = proj(&y - g * step);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let moved = (&x_next - &x).amax();
            y = &x_next + (&x_next - &x) * ((t - 1.0) / t_next);
            // restart on objective increase keeps the iteration monotone
            if inst.objective(&x_next) > inst.objective(&x) {
                y = x_next.clone();
                t = 1.0;
            } else {
                t = t_next;
            }
            x = x_next;
            if moved < tol {
                break;
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indefinite_objective() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let inst = ProgramInstance::boxed(p, DVector::zeros(2), DVector::from_element(2, -1.0), DVector::from_element(2, 1.0));
        assert!(matches!(inst, Err(Error::Contract(_))));
    }

    #[test]
    fn violation_by_substitution() {
        let inst = ProgramInstance::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            0.0,
            DMatrix::identity(1, 1),
            DVector::from_element(1, -1.0),
            DVector::from_element(1, 0.5),
            vec![QuadConstraint { p: DMatrix::identity(1, 1), q: DVector::zeros(1), r: -0.25 }],
        )
        .unwrap();
        assert_eq!(inst.max_violation(&DVector::from_element(1, 0.4)), 0.0);
        assert!((inst.max_violation(&DVector::from_element(1, 0.7)) - 0.24).abs() < 1e-15);
    }
}
