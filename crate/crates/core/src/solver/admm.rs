//! Operator-splitting QP solver in the style of OSQP.
//!
//! Solves `min 1/2 x' Pa x + qa' x` s.t. `lo <= A x <= hi` with `Pa = 2P`,
//! `qa = 2q`, so multipliers refer to the original objective.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{ConvexSolver, ProgramInstance, Solution, Status};
use crate::error::{Error, Result};

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmConfig {
    pub max_iter: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_pinf: f64,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub adaptive_rho: bool,
    /// Iterations between convergence checks.
    pub check_every: usize,
    /// Iterations between step-size updates.
    pub adapt_every: usize,
    pub polish: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            eps_abs: 1e-6,
            eps_rel: 0.0,
            eps_pinf: 1e-7,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            check_every: 5,
            adapt_every: 25,
            polish: true,
        }
    }
}

struct Factor {
    p: DMatrix<f64>,
    a: DMatrix<f64>,
    rho: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

#[derive(Default)]
pub struct AdmmSolver {
    pub config: AdmmConfig,
    cache: Option<Factor>,
    rho: Option<f64>,
    factorizations: usize,
}

impl std::fmt::Debug for AdmmSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdmmSolver")
            .field("config", &self.config)
            .field("rho", &self.rho)
            .field("factorizations", &self.factorizations)
            .finish()
    }
}

struct Residuals {
    prim: f64,
    dual: f64,
    eps_prim: f64,
    eps_dual: f64,
}

impl AdmmSolver {
    pub fn new(config: AdmmConfig) -> Self {
        Self {
            config,
            cache: None,
            rho: None,
            factorizations: 0,
        }
    }

    /// Number of KKT factorizations performed so far.
    pub fn factorizations(&self) -> usize {
        self.factorizations
    }

    fn rho_vector(inst: &ProgramInstance, rho: f64) -> DVector<f64> {
        DVector::from_fn(inst.a.nrows(), |i, _| {
            let (l, h) = (inst.lo[i], inst.hi[i]);
            if l == f64::NEG_INFINITY && h == f64::INFINITY {
                RHO_MIN
            } else if l == h {
                (rho * RHO_EQ_SCALE).min(RHO_MAX)
            } else {
                rho
            }
        })
    }

    fn factor(&mut self, pa: &DMatrix<f64>, a: &DMatrix<f64>, rho: &DVector<f64>, sigma: f64) -> Result<()> {
        if let Some(f) = &self.cache {
            if &f.p == pa && &f.a == a && &f.rho == rho {
                return Ok(());
            }
        }
        let n = pa.nrows();
        let mut k = pa + DMatrix::identity(n, n) * sigma;
        let scaled = DMatrix::from_fn(a.nrows(), n, |i, j| a[(i, j)] * rho[i]);
        k.gemm_tr(1.0, a, &scaled, 1.0);
        let k = (&k + k.transpose()) * 0.5;
        let chol = Cholesky::new(k).ok_or_else(|| Error::Numeric("ADMM KKT matrix is not positive definite".into()))?;
        self.factorizations += 1;
        self.cache = Some(Factor {
            p: pa.clone(),
            a: a.clone(),
            rho: rho.clone(),
            chol,
        });
        Ok(())
    }

    fn residuals(&self, pa: &DMatrix<f64>, qa: &DVector<f64>, a: &DMatrix<f64>, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) -> Residuals {
        let ax = a * x;
        let px = pa * x;
        let aty = a.tr_mul(y);
        let c = &self.config;
        let prim = (&ax - z).amax();
        let dual = (&px + qa + &aty).amax();
        let eps_prim = c.eps_abs + c.eps_rel * ax.amax().max(z.amax());
        let eps_dual = c.eps_abs + c.eps_rel * px.amax().max(aty.amax()).max(qa.amax());
        Residuals { prim, dual, eps_prim, eps_dual }
    }

    fn primal_infeasible(&self, inst: &ProgramInstance, dy: &DVector<f64>) -> bool {
        let norm = dy.amax();
        if norm <= 1e-14 {
            return false;
        }
        let eps = self.config.eps_pinf * norm;
        if inst.a.tr_mul(dy).amax() > eps {
            return false;
        }
        let mut support = 0.0;
        for i in 0..dy.len() {
            let d = dy[i];
            if d > 0.0 {
                if inst.hi[i] == f64::INFINITY {
                    return false;
                }
                support += inst.hi[i] * d;
            } else if d < 0.0 {
                if inst.lo[i] == f64::NEG_INFINITY {
                    return false;
                }
                support += inst.lo[i] * d;
            }
        }
        support < -eps
    }

    /// Solve the equality-constrained QP on the guessed active set and accept
    /// the result only if it satisfies the KKT conditions to tolerance.
    fn polish(&self, pa: &DMatrix<f64>, qa: &DVector<f64>, inst: &ProgramInstance, z: &DVector<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = pa.nrows();
        let m = inst.a.nrows();
        let mut active = Vec::new();
        for i in 0..m {
            let lower = z[i] - inst.lo[i] < -y[i];
            let upper = inst.hi[i] - z[i] < y[i];
            if lower {
                active.push((i, inst.lo[i]));
            } else if upper {
                active.push((i, inst.hi[i]));
            }
        }
        let k = active.len();
        let dim = n + k;
        let mut kkt = DMatrix::<f64>::zeros(dim, dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(pa);
        let mut rhs = DVector::<f64>::zeros(dim);
        rhs.rows_mut(0, n).copy_from(&(-qa));
        for (r, &(i, b)) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = inst.a[(i, j)];
                kkt[(j, n + r)] = inst.a[(i, j)];
            }
            rhs[n + r] = b;
        }
        let delta = 1e-9;
        let mut reg = kkt.clone();
        for i in 0..dim {
            reg[(i, i)] += if i < n { delta } else { -delta };
        }
        let lu = reg.lu();
        let mut sol = lu.solve(&rhs)?;
        for _ in 0..5 {
            let err = &rhs - &kkt * &sol;
            sol += lu.solve(&err)?;
        }
        let x = sol.rows(0, n).clone_owned();
        let mut yp = DVector::<f64>::zeros(m);
        for (r, &(i, b)) in active.iter().enumerate() {
            let lam = sol[n + r];
            // sign check: negative multipliers belong to lower bounds
            let is_lower = b == inst.lo[i] && (b != inst.hi[i] || lam < 0.0);
            if (is_lower && lam > self.config.eps_abs) || (!is_lower && lam < -self.config.eps_abs) {
                return None;
            }
            yp[i] = lam;
        }
        let ax = &inst.a * &x;
        let prim = (0..m).map(|i| (inst.lo[i] - ax[i]).max(ax[i] - inst.hi[i]).max(0.0)).fold(0.0, f64::max);
        let dual = (pa * &x + qa + inst.a.tr_mul(&yp)).amax();
        if prim <= self.config.eps_abs && dual <= self.config.eps_abs {
            Some((x, yp))
        } else {
            None
        }
    }
}

impl ConvexSolver for AdmmSolver {
    fn solve(&mut self, inst: &ProgramInstance, warm: Option<&DVector<f64>>) -> Result<Solution> {
        if !inst.quadratic.is_empty() {
            return Err(Error::Contract("the ADMM solver handles linear constraints only".into()));
        }
        let start = Instant::now();
        let cfg = self.config;
        let n = inst.dim();
        let m = inst.a.nrows();
        let pa = &inst.p * 2.0;
        let qa = &inst.q * 2.0;
        let project = |v: &DVector<f64>| v.zip_zip_map(&inst.lo, &inst.hi, |x, l, h| x.max(l).min(h));

        let mut rho_scalar = self.rho.unwrap_or(cfg.rho);
        let mut rho = Self::rho_vector(inst, rho_scalar);
        self.factor(&pa, &inst.a, &rho, cfg.sigma)?;

        let mut x = match warm {
            Some(w) if w.len() == n => w.clone(),
            Some(_) => return Err(Error::Contract("warm start has the wrong length".into())),
            None => DVector::zeros(n),
        };
        let mut z = project(&(&inst.a * &x));
        let mut y = DVector::<f64>::zeros(m);
        let mut y_prev = y.clone();
        let mut best: Option<(f64, DVector<f64>, f64, f64)> = None;
        let mut last_polish_set: Option<Vec<i8>> = None;

        let finish = |v: DVector<f64>, status: Status, iterations: usize, prim: f64, dual: f64| Solution {
            objective: inst.objective(&v),
            v,
            status,
            iterations,
            primal_residual: prim,
            dual_residual: dual,
            solve_time: start.elapsed(),
        };

        for iter in 1..=cfg.max_iter {
            let rhs = &x * cfg.sigma - &qa + inst.a.tr_mul(&(rho.component_mul(&z) - &y));
            let x_tilde = self.cache.as_ref().expect("factorization cached").chol.solve(&rhs);
            let z_tilde = &inst.a * &x_tilde;
            x = &x_tilde * cfg.alpha + &x * (1.0 - cfg.alpha);
            let z_relax = &z_tilde * cfg.alpha + &z * (1.0 - cfg.alpha);
            let z_new = project(&(&z_relax + y.component_div(&rho)));
            y_prev.copy_from(&y);
            y += rho.component_mul(&(&z_relax - &z_new));
            z = z_new;

            if iter % cfg.check_every != 0 && iter != cfg.max_iter {
                continue;
            }
            let res = self.residuals(&pa, &qa, &inst.a, &x, &z, &y);
            let merit = (res.prim / res.eps_prim).max(res.dual / res.eps_dual);
            if best.as_ref().is_none_or(|b| merit < b.0) {
                best = Some((merit, x.clone(), res.prim, res.dual));
            }
            if res.prim <= res.eps_prim && res.dual <= res.eps_dual {
                self.rho = Some(rho_scalar);
                if cfg.polish {
                    if let Some((xp, _)) = self.polish(&pa, &qa, inst, &z, &y) {
                        return Ok(finish(xp, Status::Optimal, iter, res.prim, res.dual));
                    }
                }
                return Ok(finish(x, Status::Optimal, iter, res.prim, res.dual));
            }
            if cfg.polish && res.prim < 1e-2 * (1.0 + z.amax()) {
                let set: Vec<i8> = (0..m)
                    .map(|i| {
                        if z[i] - inst.lo[i] < -y[i] {
                            -1
                        } else if inst.hi[i] - z[i] < y[i] {
                            1
                        } else {
                            0
                        }
                    })
                    .collect();
                if last_polish_set.as_ref() != Some(&set) {
                    if let Some((xp, yp)) = self.polish(&pa, &qa, inst, &z, &y) {
                        self.rho = Some(rho_scalar);
                        let zp = project(&(&inst.a * &xp));
                        let r = self.residuals(&pa, &qa, &inst.a, &xp, &zp, &yp);
                        return Ok(finish(xp, Status::Optimal, iter, r.prim, r.dual));
                    }
                    last_polish_set = Some(set);
                }
            }
            if self.primal_infeasible(inst, &(&y - &y_prev)) {
                return Ok(finish(x, Status::Infeasible, iter, res.prim, res.dual));
            }
            if cfg.adaptive_rho && iter % cfg.adapt_every == 0 {
                let ax = (&inst.a * &x).amax().max(z.amax()).max(1e-12);
                let dn = (&pa * &x).amax().max(inst.a.tr_mul(&y).amax()).max(qa.amax()).max(1e-12);
                let ratio = ((res.prim / ax) / (res.dual / dn).max(1e-30)).sqrt();
                let proposed = (rho_scalar * ratio).clamp(RHO_MIN, RHO_MAX);
                if ratio.is_finite() && (proposed > 5.0 * rho_scalar || proposed < rho_scalar / 5.0) {
                    rho_scalar = proposed;
                    rho = Self::rho_vector(inst, rho_scalar);
                    self.factor(&pa, &inst.a, &rho, cfg.sigma)?;
                }
            }
        }
        self.rho = Some(rho_scalar);
        let (_, v, prim, dual) = best.expect("at least one residual check");
        Ok(finish(v, Status::MaxIter, cfg.max_iter, prim, dual))
    }
}
