//! Primal log-barrier method with Newton steps and a phase-1 search for a
//! strictly feasible start.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};

use super::{ConvexSolver, ProgramInstance, Solution, Status};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierConfig {
    /// Barrier weight growth factor per outer iteration.
    pub mu: f64,
    pub t0: f64,
    /// Stop when `m / t <= gap_tol * (1 + |objective|)`.
    pub gap_tol: f64,
    /// Armijo fraction.
    pub ls_alpha: f64,
    /// Backtracking factor.
    pub ls_beta: f64,
    pub max_newton: usize,
    pub max_outer: usize,
    pub newton_tol: f64,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        Self {
            mu: 10.0,
            t0: 1.0,
            gap_tol: 1e-9,
            ls_alpha: 0.25,
            ls_beta: 0.5,
            max_newton: 100,
            max_outer: 60,
            newton_tol: 1e-12,
        }
    }
}

/// Inequality `g(w) <= 0`.
#[derive(Debug, Clone)]
enum Ineq {
    /// `a' w - b`
    Linear { a: DVector<f64>, b: f64 },
    /// `w' P w + 2 q' w + r`
    Quadratic { p: DMatrix<f64>, q: DVector<f64>, r: f64 },
}

impl Ineq {
    fn value(&self, w: &DVector<f64>) -> f64 {
        match self {
            Ineq::Linear { a, b } => a.dot(w) - b,
            Ineq::Quadratic { p, q, r } => w.dot(&(p * w)) + 2.0 * q.dot(w) + r,
        }
    }

    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        match self {
            Ineq::Linear { a, .. } => a.clone(),
            Ineq::Quadratic { p, q, .. } => (p * w + q) * 2.0,
        }
    }

    /// Append one slack coordinate `s`, turning `g(w) <= 0` into `g(w) - s <= 0`.
    fn with_slack(&self) -> Ineq {
        match self {
            Ineq::Linear { a, b } => Ineq::Linear { a: a.clone().insert_row(a.len(), -1.0), b: *b },
            Ineq::Quadratic { p, q, r } => {
                let n = p.nrows();
                Ineq::Quadratic {
                    p: p.clone().insert_row(n, 0.0).insert_column(n, 0.0),
                    q: q.clone().insert_row(n, -0.5),
                    r: *r,
                }
            }
        }
    }
}

/// `min w' P w + 2 q' w` subject to `ineqs`.
struct Problem {
    p: DMatrix<f64>,
    q: DVector<f64>,
    ineqs: Vec<Ineq>,
}

impl Problem {
    fn objective(&self, w: &DVector<f64>) -> f64 {
        w.dot(&(&self.p * w)) + 2.0 * self.q.dot(w)
    }

    fn max_g(&self, w: &DVector<f64>) -> f64 {
        self.ineqs.iter().map(|g| g.value(w)).fold(f64::NEG_INFINITY, f64::max)
    }

    fn barrier(&self, t: f64, w: &DVector<f64>) -> f64 {
        let mut phi = t * self.objective(w);
        for g in &self.ineqs {
            let v = g.value(w);
            if v >= 0.0 {
                return f64::INFINITY;
            }
            phi -= (-v).ln();
        }
        phi
    }
}

struct PathResult {
    w: DVector<f64>,
    newton_steps: usize,
    gap: f64,
}

pub struct BarrierSolver {
    pub config: BarrierConfig,
}

impl Default for BarrierSolver {
    fn default() -> Self {
        Self::new(BarrierConfig::default())
    }
}

impl std::fmt::Debug for BarrierSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BarrierSolver").field("config", &self.config).finish()
    }
}

impl BarrierSolver {
    pub fn new(config: BarrierConfig) -> Self {
        Self { config }
    }

    /// Newton's method on `t f0 - sum log(-g)` from a strictly feasible `w`.
    fn centering(&self, prob: &Problem, t: f64, w: &mut DVector<f64>, steps: &mut usize, stop: &dyn Fn(&DVector<f64>) -> bool) -> Result<bool> {
        let cfg = &self.config;
        let n = w.len();
        for _ in 0..cfg.max_newton {
            let mut grad = (&prob.p * &*w + &prob.q) * (2.0 * t);
            let mut hess = &prob.p * (2.0 * t);
            for g in &prob.ineqs {
                let v = g.value(w);
                let dg = g.gradient(w);
                grad += &dg / (-v);
                hess.ger(1.0 / (v * v), &dg, &dg, 1.0);
                if let Ineq::Quadratic { p, .. } = g {
                    hess += p * (2.0 / (-v));
                }
            }
            let hess = (&hess + hess.transpose()) * 0.5;
            let scale = hess.diagonal().amax().max(1.0);
            let mut reg = 0.0;
            let chol = loop {
                let mut h = hess.clone();
                for i in 0..n {
                    h[(i, i)] += reg;
                }
                if let Some(c) = Cholesky::new(h) {
                    break c;
                }
                reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
                if reg > 1e-2 * scale {
                    return Err(Error::Numeric("barrier Hessian is not positive definite".into()));
                }
            };
            let step = -chol.solve(&grad);
            let lambda2 = -grad.dot(&step);
            if lambda2 / 2.0 <= cfg.newton_tol {
                return Ok(false);
            }
            let phi0 = prob.barrier(t, w);
            let mut s = 1.0;
            loop {
                let trial = &*w + &step * s;
                let phi = prob.barrier(t, &trial);
                if phi.is_finite() && phi <= phi0 - cfg.ls_alpha * s * lambda2 {
                    *w = trial;
                    break;
                }
                s *= cfg.ls_beta;
                if s < 1e-14 {
                    if lambda2 <= 1e-8 * (1.0 + phi0.abs()) {
                        // round-off floor: the point is centred as far as doubles allow
                        return Ok(false);
                    }
                    return Err(Error::Numeric(format!(
                        "barrier Newton step failed to descend (t = {t:e}, decrement^2 = {lambda2:e})"
                    )));
                }
            }
            *steps += 1;
            if stop(w) {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Follow the central path. Returns early when `stop` holds.
    fn central_path(&self, prob: &Problem, mut w: DVector<f64>, stop: &dyn Fn(&DVector<f64>) -> bool) -> Result<(PathResult, bool)> {
        let cfg = &self.config;
        let m = prob.ineqs.len() as f64;
        let mut t = cfg.t0;
        let mut steps = 0;
        for _ in 0..cfg.max_outer {
            if self.centering(prob, t, &mut w, &mut steps, stop)? {
                return Ok((PathResult { w, newton_steps: steps, gap: m / t }, true));
            }
            let gap = m / t;
            if gap <= cfg.gap_tol * (1.0 + prob.objective(&w).abs()) {
                return Ok((PathResult { w, newton_steps: steps, gap }, false));
            }
            t *= cfg.mu;
        }
        let gap = m / t;
        Ok((PathResult { w, newton_steps: steps, gap }, false))
    }
}

fn inequalities(inst: &ProgramInstance) -> Result<Vec<Ineq>> {
    let mut out = Vec::new();
    for i in 0..inst.a.nrows() {
        let row = inst.a.row(i).transpose();
        let (lo, hi) = (inst.lo[i], inst.hi[i]);
        if lo == hi {
            return Err(Error::Contract("the barrier solver does not accept equality rows".into()));
        }
        if hi < f64::INFINITY {
            out.push(Ineq::Linear { a: row.clone(), b: hi });
        }
        if lo > f64::NEG_INFINITY {
            out.push(Ineq::Linear { a: -row, b: -lo });
        }
    }
    for qc in &inst.quadratic {
        out.push(Ineq::Quadratic { p: qc.p.clone(), q: qc.q.clone(), r: qc.r });
    }
    Ok(out)
}

impl ConvexSolver for BarrierSolver {
    fn solve(&mut self, inst: &ProgramInstance, warm: Option<&DVector<f64>>) -> Result<Solution> {
        let start = Instant::now();
        let n = inst.dim();
        let ineqs = inequalities(inst)?;
        let prob = Problem { p: inst.p.clone(), q: inst.q.clone(), ineqs };
        let finish = |v: DVector<f64>, status: Status, iterations: usize, gap: f64| Solution {
            objective: inst.objective(&v),
            primal_residual: inst.max_violation(&v).max(0.0),
            dual_residual: gap,
            v,
            status,
            iterations,
            solve_time: start.elapsed(),
        };

        let mut v0 = match warm {
            Some(w) if w.len() == n => w.clone(),
            Some(_) => return Err(Error::Contract("warm start has the wrong length".into())),
            None => DVector::zeros(n),
        };
        let mut phase1_steps = 0;
        if prob.ineqs.is_empty() {
            let chol = Cholesky::new(inst.p.clone()).ok_or_else(|| Error::Numeric("objective is not strictly convex".into()))?;
            let v = -chol.solve(&inst.q);
            return Ok(finish(v, Status::Optimal, 1, 0.0));
        }
        if prob.max_g(&v0) >= 0.0 {
            let s0 = prob.max_g(&v0) + 1.0;
            let aug = Problem {
                p: DMatrix::zeros(n + 1, n + 1),
                q: DVector::from_fn(n + 1, |i, _| if i == n { 0.5 } else { 0.0 }),
                ineqs: prob.ineqs.iter().map(Ineq::with_slack).collect(),
            };
            let w0 = v0.clone().insert_row(n, s0);
            let feasible = |w: &DVector<f64>| prob.max_g(&w.rows(0, n).clone_owned()) < 0.0;
            let (res, found) = self.central_path(&aug, w0, &feasible)?;
            phase1_steps = res.newton_steps;
            if !found {
                log::debug!("phase 1 ended at slack {:e}", res.w[n]);
                return Ok(finish(res.w.rows(0, n).clone_owned(), Status::Infeasible, phase1_steps, res.gap));
            }
            v0 = res.w.rows(0, n).clone_owned();
        }
        let (res, _) = self.central_path(&prob, v0, &|_| false)?;
        let status = if res.gap <= self.config.gap_tol * (1.0 + prob.objective(&res.w).abs()) {
            Status::Optimal
        } else {
            Status::MaxIter
        };
        Ok(finish(res.w, status, phase1_steps + res.newton_steps, res.gap))
    }
}
