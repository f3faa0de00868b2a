//! Ground-truth parametric plants and their integrators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pce::PolyFamily;

/// Tolerance below zero tolerated for concentrations before a step is rejected.
const NONNEG_SLACK: f64 = 1e-9;

/// Classical fourth-order Runge-Kutta step of `dx/dt = rhs(x)` with inputs
/// held constant by the caller.
pub fn rk4_step<F>(mut rhs: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Contract(format!("step size {h} must be positive")));
    }
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let check = |v: &[f64], stage: &str| -> Result<()> {
        if v.iter().all(|a| a.is_finite()) {
            Ok(())
        } else {
            Err(Error::Integration { time: 0.0, reason: format!("non-finite value in RK4 stage {stage}") })
        }
    };
    rhs(x, &mut k1);
    check(&k1, "1")?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    rhs(&tmp, &mut k2);
    check(&k2, "2")?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    rhs(&tmp, &mut k3);
    check(&k3, "3")?;
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    rhs(&tmp, &mut k4);
    check(&k4, "4")?;
    let out: Vec<f64> = (0..n).map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
    check(&out, "update")?;
    Ok(out)
}

/// Reference point that defines deviation coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

/// Parametric nonlinear system `dx/dt = f(x, u, theta)` sampled with a
/// zero-order hold on `u`.
pub trait Plant: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    /// Marginal distribution of every uncertain parameter.
    fn families(&self) -> Vec<PolyFamily>;
    /// Control interval.
    fn dt(&self) -> f64;
    /// RK4 sub-steps per control interval.
    fn substeps(&self) -> usize {
        1
    }
    /// Physical input bounds.
    fn input_bounds(&self) -> (Vec<f64>, Vec<f64>);
    /// Vector field. `disturbance` acts on a plant-specific channel.
    fn rhs(&self, x: &[f64], u: &[f64], theta: &[f64], disturbance: f64, out: &mut [f64]);
    /// Physical consistency check on a state, run after every sub-step.
    fn check_state(&self, _x: &[f64]) -> std::result::Result<(), String> {
        Ok(())
    }
    /// Map a sampled initial state into the physical domain.
    fn project_state(&self, _x: &mut [f64]) {}
    /// Equilibrium used as the origin of the model coordinates.
    fn operating_point(&self, theta: &[f64]) -> Result<OperatingPoint>;
    /// Constants and distributions, used to fingerprint datasets.
    fn descriptor(&self) -> serde_json::Value;

    fn n_theta(&self) -> usize {
        self.families().len()
    }

    /// Advance one control interval.
    fn step(&self, x: &[f64], u: &[f64], theta: &[f64], disturbance: f64) -> Result<Vec<f64>> {
        if x.len() != self.n_x() || u.len() != self.n_u() || theta.len() != self.n_theta() {
            return Err(Error::Contract(format!("{} step called with mismatched dimensions", self.name())));
        }
        let n = self.substeps();
        let h = self.dt() / n as f64;
        let mut state = x.to_vec();
        for i in 0..n {
            let time = i as f64 * h;
            state = rk4_step(|s, out| self.rhs(s, u, theta, disturbance, out), &state, h).map_err(|e| match e {
                Error::Integration { reason, .. } => Error::Integration { time, reason },
                other => other,
            })?;
            self.check_state(&state).map_err(|reason| Error::Integration { time: time + h, reason })?;
        }
        Ok(state)
    }

    /// i.i.d. parameter draws.
    fn sample_params(&self, rng: &mut dyn rand::RngCore, count: usize) -> Vec<Vec<f64>> {
        let families = self.families();
        (0..count).map(|_| families.iter().map(|f| f.sample(rng)).collect()).collect()
    }

    fn in_support(&self, theta: &[f64]) -> bool {
        let families = self.families();
        theta.len() == families.len() && families.iter().zip(theta).all(|(f, &t)| f.contains(t))
    }
}

/// Controlled Duffing oscillator with parameters `(delta, beta, alpha)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Duffing {
    pub delta: [f64; 2],
    pub beta: [f64; 2],
    pub alpha: [f64; 2],
    pub dt: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for Duffing {
    fn default() -> Self {
        Self {
            delta: [0.0, 1.0],
            beta: [-2.0, 2.0],
            alpha: [0.0, 2.0],
            dt: 0.02,
            u_min: -10.0,
            u_max: 10.0,
        }
    }
}

impl Duffing {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("delta", self.delta), ("beta", self.beta), ("alpha", self.alpha)] {
            PolyFamily::legendre(r[0], r[1]).map_err(|_| Error::Contract(format!("duffing.{name} must satisfy lo < hi")))?;
        }
        if !(self.dt > 0.0) || !(self.u_min < self.u_max) {
            return Err(Error::Contract("duffing needs dt > 0 and u_min < u_max".into()));
        }
        Ok(())
    }
}

pub fn duffing_rhs(x: &[f64], u: f64, theta: &[f64]) -> [f64; 2] {
    let (delta, beta, alpha) = (theta[0], theta[1], theta[2]);
    [x[1], -delta * x[1] - x[0] * (beta + alpha * x[0] * x[0]) + u]
}

impl Plant for Duffing {
    fn name(&self) -> &'static str {
        "duffing"
    }

    fn n_x(&self) -> usize {
        2
    }

    fn n_u(&self) -> usize {
        1
    }

    fn families(&self) -> Vec<PolyFamily> {
        [self.delta, self.beta, self.alpha]
            .iter()
            .map(|r| PolyFamily::Legendre { lo: r[0], hi: r[1] })
            .collect()
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn input_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![self.u_min], vec![self.u_max])
    }

    /// The disturbance is an additive force.
    fn rhs(&self, x: &[f64], u: &[f64], theta: &[f64], disturbance: f64, out: &mut [f64]) {
        out.copy_from_slice(&duffing_rhs(x, u[0] + disturbance, theta));
    }

    fn operating_point(&self, _theta: &[f64]) -> Result<OperatingPoint> {
        Ok(OperatingPoint { x: vec![0.0; 2], u: vec![0.0] })
    }

    fn descriptor(&self) -> serde_json::Value {
        serde_json::json!({ "plant": "duffing", "constants": self })
    }
}

/// Isothermal CSTR with the series-parallel network A + B -> C, A + B -> D,
/// B + C -> *, B + D -> *. Uncertain parameters are `(k1, k2)`; the input is
/// the A-feed flow `q1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cstr {
    pub k1: [f64; 2],
    pub k2: [f64; 2],
    pub k3: f64,
    pub k4: f64,
    pub volume: f64,
    pub q2: f64,
    pub ca_in: f64,
    pub cb_in: f64,
    /// Nominal A-feed flow at the operating point.
    pub q1_ss: f64,
    pub q1_min: f64,
    pub q1_max: f64,
    pub dt: f64,
    pub substeps: usize,
}

impl Default for Cstr {
    fn default() -> Self {
        Self {
            k1: [0.2789, 0.8927],
            k2: [0.1894, 0.9331],
            k3: 0.3,
            k4: 0.1,
            volume: 1.0,
            q2: 0.5,
            ca_in: 20.0,
            cb_in: 2.0,
            q1_ss: 0.5,
            q1_min: 0.0,
            q1_max: 1.0,
            dt: 0.1,
            substeps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub c: [f64; 4],
    pub q1: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl Cstr {
    pub fn validate(&self) -> Result<()> {
        PolyFamily::legendre(self.k1[0], self.k1[1]).map_err(|_| Error::Contract("cstr.k1 must satisfy lo < hi".into()))?;
        PolyFamily::legendre(self.k2[0], self.k2[1]).map_err(|_| Error::Contract("cstr.k2 must satisfy lo < hi".into()))?;
        let nonneg = [self.k3, self.k4, self.ca_in, self.cb_in, self.q1_min];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Contract("cstr rate constants, feeds and q1_min must be >= 0".into()));
        }
        if !(self.volume > 0.0 && self.q2 > 0.0 && self.dt > 0.0 && self.substeps >= 1) {
            return Err(Error::Contract("cstr needs volume, q2, dt > 0 and substeps >= 1".into()));
        }
        if !(self.q1_min <= self.q1_ss && self.q1_ss <= self.q1_max && self.q1_min < self.q1_max) {
            return Err(Error::Contract("cstr needs q1_min <= q1_ss <= q1_max".into()));
        }
        Ok(())
    }

    /// Rates at inlet B concentration `cb_in`.
    pub fn rates(&self, c: &[f64], q1: f64, theta: &[f64], cb_in: f64) -> [f64; 4] {
        let (a, b, cc, d) = (c[0], c[1], c[2], c[3]);
        let (k1, k2) = (theta[0], theta[1]);
        let dil = (q1 + self.q2) / self.volume;
        let ab = a * b;
        [
            q1 / self.volume * self.ca_in - a * dil - ab * (k1 + k2),
            self.q2 / self.volume * cb_in - b * dil - ab * (k1 + k2) - b * cc * self.k3 - b * d * self.k4,
            -cc * dil + ab * k1 - b * cc * self.k3,
            -d * dil + ab * k2 - b * d * self.k4,
        ]
    }

    fn jacobian(&self, c: &[f64], q1: f64, theta: &[f64]) -> DMatrix<f64> {
        let (a, b, cc, d) = (c[0], c[1], c[2], c[3]);
        let (k1, k2) = (theta[0], theta[1]);
        let (k3, k4) = (self.k3, self.k4);
        let dil = (q1 + self.q2) / self.volume;
        let s = k1 + k2;
        DMatrix::from_row_slice(
            4,
            4,
            &[
                -dil - b * s,
                -a * s,
                0.0,
                0.0,
                -b * s,
                -dil - a * s - cc * k3 - d * k4,
                -b * k3,
                -b * k4,
                b * k1,
                a * k1 - cc * k3,
                -dil - b * k3,
                0.0,
                b * k2,
                a * k2 - d * k4,
                0.0,
                -dil - b * k4,
            ],
        )
    }

    /// Damped Newton solve of `rates(c) = 0` started from the pure dilution
    /// solution.
    pub fn steady_state(&self, theta: &[f64], q1: f64, cb_in: f64) -> Result<SteadyState> {
        if !(q1 >= 0.0 && q1.is_finite()) {
            return Err(Error::SteadyState(format!("inlet flow q1 = {q1} must be >= 0")));
        }
        let total = q1 + self.q2;
        let mut c = DVector::from_vec(vec![q1 * self.ca_in / total, self.q2 * cb_in / total, 0.0, 0.0]);
        let residual = |c: &DVector<f64>| DVector::from_row_slice(&self.rates(c.as_slice(), q1, theta, cb_in));
        let mut f = residual(&c);
        for iter in 0..100 {
            let norm = f.norm();
            if norm <= 1e-12 {
                return self.finish(c, q1, norm, iter);
            }
            let jac = self.jacobian(c.as_slice(), q1, theta);
            let delta = jac
                .lu()
                .solve(&(-&f))
                .ok_or_else(|| Error::SteadyState(format!("singular Jacobian at iteration {iter}")))?;
            let mut t = 1.0;
            loop {
                let trial = &c + &delta * t;
                let ft = residual(&trial);
                if ft.norm() < norm || t < 1e-8 {
                    c = trial;
                    f = ft;
                    break;
                }
                t *= 0.5;
            }
        }
        let norm = f.norm();
        if norm <= 1e-10 {
            return self.finish(c, q1, norm, 100);
        }
        Err(Error::SteadyState(format!("Newton did not converge in 100 iterations (residual {norm:e})")))
    }

    fn finish(&self, c: DVector<f64>, q1: f64, residual: f64, iterations: usize) -> Result<SteadyState> {
        if c.iter().any(|&v| v < -NONNEG_SLACK) {
            return Err(Error::SteadyState(format!("steady state has negative concentrations {:?}", c.as_slice())));
        }
        Ok(SteadyState {
            c: [c[0], c[1], c[2], c[3]],
            q1,
            residual,
            iterations,
        })
    }
}

impl Plant for Cstr {
    fn name(&self) -> &'static str {
        "cstr"
    }

    fn n_x(&self) -> usize {
        4
    }

    fn n_u(&self) -> usize {
        1
    }

    fn families(&self) -> Vec<PolyFamily> {
        vec![
            PolyFamily::Legendre { lo: self.k1[0], hi: self.k1[1] },
            PolyFamily::Legendre { lo: self.k2[0], hi: self.k2[1] },
        ]
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn substeps(&self) -> usize {
        self.substeps
    }

    fn input_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![self.q1_min], vec![self.q1_max])
    }

    /// The disturbance is an offset on the B inlet concentration.
    fn rhs(&self, x: &[f64], u: &[f64], theta: &[f64], disturbance: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.rates(x, u[0], theta, self.cb_in + disturbance));
    }

    fn check_state(&self, x: &[f64]) -> std::result::Result<(), String> {
        match x.iter().position(|&c| c < -NONNEG_SLACK) {
            Some(i) => Err(format!("concentration {i} became negative ({})", x[i])),
            None => Ok(()),
        }
    }

    fn project_state(&self, x: &mut [f64]) {
        for c in x {
            *c = c.max(0.0);
        }
    }

    fn operating_point(&self, theta: &[f64]) -> Result<OperatingPoint> {
        let ss = self.steady_state(theta, self.q1_ss, self.cb_in)?;
        Ok(OperatingPoint { x: ss.c.to_vec(), u: vec![self.q1_ss] })
    }

    fn descriptor(&self) -> serde_json::Value {
        serde_json::json!({ "plant": "cstr", "constants": self })
    }
}
