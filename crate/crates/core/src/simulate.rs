//! Data generation, uncertainty propagation and receding-horizon runs.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condense::{condense, CondensedProblem, SmpcSpec};
use crate::dictionary::{Dense, Dictionary};
use crate::error::{Error, Result};
use crate::model::{fit_coefficients, Dataset, PpkoModel, Snapshot};
use crate::pce::{PceBasis, QuadratureRule};
use crate::plants::{OperatingPoint, Plant};
use crate::solver::{ConvexSolver, Solution, Status};

/// Format a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataGenSpec {
    pub n_param_sets: usize,
    pub n_ics_per_set: usize,
    pub n_steps: usize,
    /// Initial-condition box in deviation coordinates.
    pub ic_lo: Vec<f64>,
    pub ic_hi: Vec<f64>,
    /// Standard deviation of the i.i.d. Gaussian input deviations.
    pub input_scale: f64,
    pub seed: u64,
}

impl Default for DataGenSpec {
    fn default() -> Self {
        Self {
            n_param_sets: 20,
            n_ics_per_set: 20,
            n_steps: 200,
            ic_lo: vec![-2.0, -2.0],
            ic_hi: vec![2.0, 2.0],
            input_scale: 1.0,
            seed: 0,
        }
    }
}

impl DataGenSpec {
    pub fn validate(&self, n_x: usize) -> Result<()> {
        if self.n_param_sets == 0 || self.n_ics_per_set == 0 || self.n_steps == 0 {
            return Err(Error::Contract("data generation counts must be >= 1".into()));
        }
        if self.ic_lo.len() != n_x || self.ic_hi.len() != n_x {
            return Err(Error::Contract(format!("initial-condition box must have {n_x} entries")));
        }
        if self.ic_lo.iter().zip(&self.ic_hi).any(|(l, h)| !(l <= h)) {
            return Err(Error::Contract("initial-condition box needs lo <= hi".into()));
        }
        if !(self.input_scale >= 0.0 && self.input_scale.is_finite()) {
            return Err(Error::Contract("input scale must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenReport {
    pub trajectories: usize,
    pub dropped: usize,
}

/// Simulate the training protocol. Snapshots are stored in deviation
/// coordinates about each parameter set's operating point; applied inputs
/// are clamped to the plant's bounds before being recorded.
pub fn gen_training_data(plant: &dyn Plant, spec: &DataGenSpec) -> Result<(Dataset, GenReport)> {
    let (n_x, n_u) = (plant.n_x(), plant.n_u());
    spec.validate(n_x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let thetas = plant.sample_params(&mut rng, spec.n_param_sets);
    let ops = thetas.iter().map(|t| plant.operating_point(t)).collect::<Result<Vec<_>>>()?;
    let (u_lo, u_hi) = plant.input_bounds();
    let total = spec.n_param_sets * spec.n_ics_per_set;

    let trajectories: Vec<Option<Vec<Snapshot>>> = (0..total)
        .into_par_iter()
        .map(|traj| {
            let p = traj / spec.n_ics_per_set;
            let (theta, op) = (&thetas[p], &ops[p]);
            let mut rng = stream_rng(spec.seed, traj as u64 + 1);
            let mut x: Vec<f64> = (0..n_x)
                .map(|i| op.x[i] + rng.random_range(spec.ic_lo[i]..=spec.ic_hi[i]))
                .collect();
            plant.project_state(&mut x);
            let mut out = Vec::with_capacity(spec.n_steps);
            for _ in 0..spec.n_steps {
                let u: Vec<f64> = (0..n_u)
                    .map(|i| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (op.u[i] + spec.input_scale * z).clamp(u_lo[i], u_hi[i])
                    })
                    .collect();
                let x_next = match plant.step(&x, &u, theta, 0.0) {
                    Ok(v) => v,
                    Err(e) => {
                        log::warn!("trajectory {traj} dropped: {e}");
                        return None;
                    }
                };
                out.push(Snapshot {
                    x: sub(&x, &op.x),
                    u: sub(&u, &op.u),
                    x_plus: sub(&x_next, &op.x),
                    theta: theta.clone(),
                    trajectory: traj,
                });
                x = x_next;
            }
            Some(out)
        })
        .collect();

    let dropped = trajectories.iter().filter(|t| t.is_none()).count();
    if dropped * 100 >= total.max(1) && dropped > 0 {
        return Err(Error::Numeric(format!("{dropped} of {total} trajectories blew up (limit is below 1%)")));
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} of {total} trajectories");
    }
    let snapshots = trajectories.into_iter().flatten().flatten().collect();
    let dataset = Dataset::new(n_x, n_u, plant.n_theta(), snapshots)?;
    Ok((dataset, GenReport { trajectories: total - dropped, dropped }))
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "MC")]
    Mc,
    #[serde(rename = "PPKO")]
    Ppko,
}

/// Per-step mean and standard deviation of every state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSeries {
    pub source: Source,
    pub dt: f64,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

/// Largest gap over time between two envelopes, per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub mean_gap: Vec<f64>,
    pub std_gap: Vec<f64>,
}

impl Agreement {
    pub fn max_mean_gap(&self) -> f64 {
        self.mean_gap.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_std_gap(&self) -> f64 {
        self.std_gap.iter().copied().fold(0.0, f64::max)
    }
}

impl EnvelopeSeries {
    pub fn steps(&self) -> usize {
        self.mean.len()
    }

    pub fn compare(&self, other: &EnvelopeSeries) -> Result<Agreement> {
        if self.steps() != other.steps() || self.mean.first().map(Vec::len) != other.mean.first().map(Vec::len) {
            return Err(Error::Contract("envelopes have different shapes".into()));
        }
        let n_x = self.mean.first().map_or(0, Vec::len);
        let gap = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<f64> {
            (0..n_x)
                .map(|i| a.iter().zip(b).map(|(p, q)| (p[i] - q[i]).abs()).fold(0.0, f64::max))
                .collect()
        };
        Ok(Agreement {
            mean_gap: gap(&self.mean, &other.mean),
            std_gap: gap(&self.std, &other.std),
        })
    }

    /// CSV with header `step,t,mean_0..,std_0..`.
    pub fn to_csv(&self) -> String {
        let n_x = self.mean.first().map_or(0, Vec::len);
        let mut out = String::from("step,t");
        for i in 0..n_x {
            let _ = write!(out, ",mean_{i}");
        }
        for i in 0..n_x {
            let _ = write!(out, ",std_{i}");
        }
        out.push('\n');
        for (k, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            let _ = write!(out, "{k},{}", fmt_f64(k as f64 * self.dt));
            for v in m.iter().chain(s) {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }
}

fn envelope(source: Source, dt: f64, samples: &[Vec<Vec<f64>>], weights: Option<&[f64]>) -> EnvelopeSeries {
    let steps = samples[0].len();
    let n_x = samples[0][0].len();
    let n = samples.len() as f64;
    let mut mean = vec![vec![0.0; n_x]; steps];
    let mut std = vec![vec![0.0; n_x]; steps];
    for t in 0..steps {
        for i in 0..n_x {
            let m = match weights {
                Some(w) => samples.iter().zip(w).map(|(s, w)| w * s[t][i]).sum::<f64>(),
                None => samples.iter().map(|s| s[t][i]).sum::<f64>() / n,
            };
            let var = match weights {
                // weighted second moment minus squared mean
                Some(w) => samples.iter().zip(w).map(|(s, w)| w * s[t][i] * s[t][i]).sum::<f64>() - m * m,
                None => samples.iter().map(|s| (s[t][i] - m).powi(2)).sum::<f64>() / (n - 1.0),
            };
            mean[t][i] = m;
            std[t][i] = var.max(0.0).sqrt();
        }
    }
    EnvelopeSeries { source, dt, mean, std }
}

/// Monte Carlo propagation through the truth plant. `inputs` are stacked
/// physical inputs per step; `None` holds each sample's operating-point
/// input.
pub fn mc_propagate(
    plant: &dyn Plant,
    x0: &[f64],
    inputs: Option<&[f64]>,
    n_mc: usize,
    horizon: usize,
    seed: u64,
) -> Result<EnvelopeSeries> {
    if n_mc < 2 {
        return Err(Error::Contract("Monte Carlo needs at least 2 samples".into()));
    }
    let n_u = plant.n_u();
    if x0.len() != plant.n_x() || inputs.is_some_and(|u| u.len() != horizon * n_u) {
        return Err(Error::Contract("Monte Carlo initial state or input sequence has the wrong length".into()));
    }
    let thetas = plant.sample_params(&mut ChaCha8Rng::seed_from_u64(seed), n_mc);
    let samples = thetas
        .par_iter()
        .map(|theta| {
            let hold = match inputs {
                Some(_) => Vec::new(),
                None => plant.operating_point(theta)?.u,
            };
            let mut x = x0.to_vec();
            let mut path = Vec::with_capacity(horizon + 1);
            path.push(x.clone());
            for t in 0..horizon {
                let u = inputs.map_or(&hold[..], |u| &u[t * n_u..(t + 1) * n_u]);
                x = plant.step(&x, u, theta, 0.0)?;
                path.push(x.clone());
            }
            Ok(path)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(envelope(Source::Mc, plant.dt(), &samples, None))
}

/// Quadrature moments of the lifted model's prediction, in model
/// coordinates.
pub fn ppko_propagate(model: &PpkoModel, x0: &[f64], inputs: &[f64], quad: &QuadratureRule, dt: f64) -> Result<EnvelopeSeries> {
    propagate_nodes(model, quad, dt, |_| Ok((x0.to_vec(), vec![0.0; model.n_x()])), inputs)
}

/// Quadrature moments in plant coordinates: each node is rolled out from
/// its own operating point and shifted back, with physical inputs.
pub fn ppko_propagate_plant(
    model: &PpkoModel,
    plant: &dyn Plant,
    x0: &[f64],
    inputs: Option<&[f64]>,
    horizon: usize,
    quad: &QuadratureRule,
) -> Result<EnvelopeSeries> {
    let n_u = model.n_u();
    let ops = quad.nodes().iter().map(|t| plant.operating_point(t)).collect::<Result<Vec<OperatingPoint>>>()?;
    let mut results = Vec::with_capacity(quad.len());
    for ((theta, w), op) in quad.iter().zip(&ops) {
        let dev_inputs: Vec<f64> = match inputs {
            Some(u) => u.iter().enumerate().map(|(k, v)| v - op.u[k % n_u]).collect(),
            None => vec![0.0; horizon * n_u],
        };
        let path = model.rollout(&sub(x0, &op.x), &dev_inputs, theta)?;
        let states: Vec<Vec<f64>> = std::iter::once(x0.to_vec())
            .chain(path.iter().map(|x| x.iter().zip(&op.x).map(|(a, b)| a + b).collect()))
            .collect();
        results.push((states, w));
    }
    let weights: Vec<f64> = results.iter().map(|r| r.1).collect();
    let samples: Vec<Vec<Vec<f64>>> = results.into_iter().map(|r| r.0).collect();
    Ok(envelope(Source::Ppko, plant.dt(), &samples, Some(&weights)))
}

fn propagate_nodes<F>(model: &PpkoModel, quad: &QuadratureRule, dt: f64, start: F, inputs: &[f64]) -> Result<EnvelopeSeries>
where
    F: Fn(&[f64]) -> Result<(Vec<f64>, Vec<f64>)>,
{
    if quad.dim() != model.basis().dim() {
        return Err(Error::Contract("quadrature dimension differs from the parameter dimension".into()));
    }
    let mut samples = Vec::with_capacity(quad.len());
    for (theta, _) in quad.iter() {
        let (x0, offset) = start(theta)?;
        let path = model.rollout(&x0, inputs, theta)?;
        let shifted = |x: &[f64]| -> Vec<f64> { x.iter().zip(&offset).map(|(a, b)| a + b).collect() };
        samples.push(std::iter::once(shifted(&x0)).chain(path.iter().map(|x| shifted(x.as_slice()))).collect());
    }
    Ok(envelope(Source::Ppko, dt, &samples, Some(quad.weights())))
}

/// One receding-horizon experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRun {
    pub theta: Vec<f64>,
    pub x0: Vec<f64>,
    pub n_steps: usize,
    /// Origin of the controller's deviation coordinates.
    pub anchor: OperatingPoint,
    /// Disturbance value per control step; missing entries are zero.
    pub disturbance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Measured plant state before the step.
    pub x: Vec<f64>,
    /// Physical input applied over the step.
    pub u: Vec<f64>,
    pub status: Status,
    pub iterations: usize,
    pub solve_time: f64,
    pub objective: f64,
    /// Set when the solver reported infeasibility and the shifted plan was used.
    pub fallback: bool,
    pub disturbance: f64,
    pub warm_start: Option<Vec<f64>>,
    /// Input sequence (deviation coordinates) the step acted on.
    pub plan: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopLog {
    pub theta: Vec<f64>,
    pub anchor: Vec<f64>,
    pub dt: f64,
    pub records: Vec<StepRecord>,
    pub final_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub final_norm: f64,
    pub mean_solve_time: f64,
    pub median_solve_time: f64,
    pub max_solve_time: f64,
    pub infeasible_steps: usize,
    pub max_iter_steps: usize,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl ClosedLoopLog {
    /// Trajectory including the final state.
    pub fn states(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| &r.x[..]).chain(std::iter::once(&self.final_state[..])).collect()
    }

    /// Distance of the state at step `k` from the anchor.
    pub fn deviation_norm(&self, k: usize) -> f64 {
        let states = self.states();
        states[k].iter().zip(&self.anchor).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }

    pub fn solve_times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.solve_time).collect()
    }

    pub fn summary(&self) -> RunSummary {
        let times = self.solve_times();
        RunSummary {
            steps: self.records.len(),
            final_norm: self.deviation_norm(self.records.len()),
            mean_solve_time: times.iter().sum::<f64>() / times.len().max(1) as f64,
            median_solve_time: median(&times),
            max_solve_time: times.iter().copied().fold(0.0, f64::max),
            infeasible_steps: self.records.iter().filter(|r| r.status == Status::Infeasible).count(),
            max_iter_steps: self.records.iter().filter(|r| r.status == Status::MaxIter).count(),
        }
    }

    /// CSV with header `step,t,x_0..,u_0..,status,iterations,solve_time,objective,fallback,disturbance`.
    /// The last row holds the final state with empty input columns.
    pub fn to_csv(&self) -> String {
        let n_x = self.final_state.len();
        let n_u = self.records.first().map_or(0, |r| r.u.len());
        let mut out = String::from("step,t");
        for i in 0..n_x {
            let _ = write!(out, ",x_{i}");
        }
        for i in 0..n_u {
            let _ = write!(out, ",u_{i}");
        }
        out.push_str(",status,iterations,solve_time,objective,fallback,disturbance\n");
        for r in &self.records {
            let _ = write!(out, "{},{}", r.step, fmt_f64(r.step as f64 * self.dt));
            for v in r.x.iter().chain(&r.u) {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            let _ = writeln!(
                out,
                ",{:?},{},{},{},{},{}",
                r.status,
                r.iterations,
                fmt_f64(r.solve_time),
                fmt_f64(r.objective),
                r.fallback,
                fmt_f64(r.disturbance)
            );
        }
        let k = self.records.len();
        let _ = write!(out, "{k},{}", fmt_f64(k as f64 * self.dt));
        for v in &self.final_state {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        out.push_str(&",".repeat(n_u));
        out.push_str(",,,,,,\n");
        out
    }
}

/// Drop the first input block and repeat the last.
pub fn shift_plan(plan: &[f64], n_u: usize) -> Vec<f64> {
    let n = plan.len();
    if n <= n_u {
        return plan.to_vec();
    }
    let mut out = plan[n_u..].to_vec();
    out.extend_from_slice(&plan[n - n_u..]);
    out
}

/// Receding-horizon loop against the truth plant.
pub fn closed_loop(
    plant: &dyn Plant,
    model: &PpkoModel,
    cp: &CondensedProblem,
    solver: &mut dyn ConvexSolver,
    run: &ClosedLoopRun,
) -> Result<ClosedLoopLog> {
    let (n_x, n_u) = (plant.n_x(), plant.n_u());
    if model.n_x() != n_x || model.n_u() != n_u || cp.n_psi != model.n_psi() || cp.n_u != n_u {
        return Err(Error::Contract("plant, model and condensed problem dimensions disagree".into()));
    }
    if run.x0.len() != n_x || run.anchor.x.len() != n_x || run.anchor.u.len() != n_u {
        return Err(Error::Contract("closed-loop run has mismatched state or anchor lengths".into()));
    }
    if !plant.in_support(&run.theta) {
        return Err(Error::Domain(format!("parameter {:?} is outside the plant's support", run.theta)));
    }
    let (p_lo, p_hi) = plant.input_bounds();
    let mut x = run.x0.clone();
    let mut warm: Option<Vec<f64>> = None;
    let mut records = Vec::with_capacity(run.n_steps);
    for step in 0..run.n_steps {
        let z0 = model.lift(&sub(&x, &run.anchor.x))?;
        let inst = cp.instantiate(&z0)?;
        let warm_vec = warm.as_ref().map(|w| DVector::from_column_slice(w));
        let Solution { v, objective, status, iterations, solve_time, .. } = solver.solve(&inst, warm_vec.as_ref())?;
        let fallback = status == Status::Infeasible;
        let plan: Vec<f64> = if fallback {
            log::warn!("step {step}: solver reported infeasibility, applying the shifted plan");
            warm.clone().unwrap_or_else(|| vec![0.0; cp.decision_dim()])
        } else {
            v.iter().copied().collect()
        };
        let u: Vec<f64> = (0..n_u)
            .map(|i| {
                let dev = plan[i].clamp(cp.u_min[i], cp.u_max[i]);
                (run.anchor.u[i] + dev).clamp(p_lo[i], p_hi[i])
            })
            .collect();
        assert!(u.iter().enumerate().all(|(i, &v)| v >= p_lo[i] && v <= p_hi[i]));
        let d = run.disturbance.get(step).copied().unwrap_or(0.0);
        let x_next = plant.step(&x, &u, &run.theta, d)?;
        records.push(StepRecord {
            step,
            x: x.clone(),
            u,
            status,
            iterations,
            solve_time: solve_time.as_secs_f64(),
            objective,
            fallback,
            disturbance: d,
            warm_start: warm.take(),
            plan: plan.clone(),
        });
        warm = Some(shift_plan(&plan, n_u));
        x = x_next;
    }
    Ok(ClosedLoopLog {
        theta: run.theta.clone(),
        anchor: run.anchor.x.clone(),
        dt: plant.dt(),
        records,
        final_state: x,
    })
}

/// Step on the disturbance channel held for `duration` steps, starting at
/// `onset`; the run lasts `onset + window` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSchedule {
    pub onset: usize,
    pub duration: usize,
    pub window: usize,
    /// Range of the step magnitude; the sign is drawn with equal odds.
    pub magnitude: [f64; 2],
}

impl PulseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.duration == 0 || self.duration > self.window {
            return Err(Error::Contract("disturbance needs 0 < duration <= window".into()));
        }
        if !(0.0 <= self.magnitude[0] && self.magnitude[0] <= self.magnitude[1]) {
            return Err(Error::Contract("disturbance magnitude range must satisfy 0 <= lo <= hi".into()));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        self.onset + self.window
    }

    pub fn profile(&self, value: f64) -> Vec<f64> {
        (0..self.n_steps())
            .map(|k| if k >= self.onset && k < self.onset + self.duration { value } else { 0.0 })
            .collect()
    }

    pub fn sample_value<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let m = rng.random_range(self.magnitude[0]..=self.magnitude[1]);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    }
}

/// Deviation of one output from its reference over the window after onset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub peak: f64,
    pub end: f64,
}

impl Recovery {
    pub fn measure(series: &[f64], reference: f64, onset: usize) -> Self {
        let dev: Vec<f64> = series[onset.min(series.len())..].iter().map(|v| (v - reference).abs()).collect();
        Self {
            peak: dev.iter().copied().fold(0.0, f64::max),
            end: dev.last().copied().unwrap_or(0.0),
        }
    }

    /// End deviation at most `fraction` of the peak.
    pub fn recovered(&self, fraction: f64) -> bool {
        self.end <= fraction * self.peak
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationResult {
    pub theta: Vec<f64>,
    pub disturbance: f64,
    pub controlled: Recovery,
    pub baseline: Recovery,
    pub log: ClosedLoopLog,
}

/// Plant response with the input held at `u`.
pub fn open_loop(plant: &dyn Plant, x0: &[f64], u: &[f64], theta: &[f64], disturbance: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut x = x0.to_vec();
    let mut out = vec![x.clone()];
    for &d in disturbance {
        x = plant.step(&x, u, theta, d)?;
        out.push(x.clone());
    }
    Ok(out)
}

/// Realizations of a disturbance-rejection batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectionPlan {
    pub pulse: PulseSchedule,
    /// Index of the scored state.
    pub output: usize,
    pub realizations: usize,
    pub seed: u64,
}

/// Disturbance-rejection batch: each realization starts at rest at its own
/// operating point, which also anchors the controller, and is scored on
/// the plan's output against the uncontrolled response to the same pulse.
pub fn rejection_batch<S, F>(
    plant: &dyn Plant,
    model: &PpkoModel,
    cp: &CondensedProblem,
    make_solver: F,
    plan: &RejectionPlan,
) -> Result<Vec<RealizationResult>>
where
    S: ConvexSolver,
    F: Fn() -> S + Sync,
{
    let (schedule, output) = (&plan.pulse, plan.output);
    schedule.validate()?;
    if output >= plant.n_x() {
        return Err(Error::Contract(format!("output index {output} is out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let draws: Vec<(Vec<f64>, f64)> = plant
        .sample_params(&mut rng, plan.realizations)
        .into_iter()
        .map(|theta| (theta, schedule.sample_value(&mut rng)))
        .collect();
    draws
        .into_par_iter()
        .map(|(theta, value)| {
            let op = plant.operating_point(&theta)?;
            let profile = schedule.profile(value);
            let run = ClosedLoopRun {
                theta: theta.clone(),
                x0: op.x.clone(),
                n_steps: schedule.n_steps(),
                anchor: op.clone(),
                disturbance: profile.clone(),
            };
            let mut solver = make_solver();
            let log = closed_loop(plant, model, cp, &mut solver, &run)?;
            let series: Vec<f64> = log.states().iter().map(|x| x[output]).collect();
            let free = open_loop(plant, &op.x, &op.u, &theta, &profile)?;
            let free_series: Vec<f64> = free.iter().map(|x| x[output]).collect();
            Ok(RealizationResult {
                theta,
                disturbance: value,
                controlled: Recovery::measure(&series, op.x[output], schedule.onset),
                baseline: Recovery::measure(&free_series, op.x[output], schedule.onset),
                log,
            })
        })
        .collect()
}

/// Model with a fixed random tanh feature block of width `n_psi - 1 - n_x`,
/// fitted by ridge regression.
pub fn random_feature_model(dataset: &Dataset, basis: PceBasis, n_psi: usize, ridge: f64, seed: u64) -> Result<PpkoModel> {
    let n_x = dataset.n_x;
    if n_psi < 1 + n_x {
        return Err(Error::Contract(format!("n_psi = {n_psi} is below the fixed block size {}", 1 + n_x)));
    }
    let n_learn = n_psi - 1 - n_x;
    let dict = if n_learn == 0 {
        Dictionary::fixed(n_x)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bias = Uniform::new_inclusive(-1.0, 1.0).expect("finite range");
        let hidden = Dense {
            weight: DMatrix::from_fn(n_learn, n_x, |_, _| StandardNormal.sample(&mut rng)),
            bias: DVector::from_fn(n_learn, |_, _| bias.sample(&mut rng)),
        };
        let out = Dense { weight: DMatrix::identity(n_learn, n_learn), bias: DVector::zeros(n_learn) };
        Dictionary::from_layers(n_x, vec![hidden, out])?
    };
    let coeffs = fit_coefficients(dataset, &dict, &basis, ridge)?;
    let mut model = PpkoModel::new(basis, dict, coeffs)?;
    model.meta.ridge = ridge;
    model.meta.seed = Some(seed);
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n_psi: usize,
    pub n_terms: usize,
    pub quad_nodes: usize,
    pub condense_seconds: f64,
    pub decision_dim: usize,
    pub median_solve_seconds: f64,
    pub mean_solve_seconds: f64,
    pub steps: usize,
}

impl BenchRow {
    pub fn csv_header() -> &'static str {
        "n_psi,n_terms,quad_nodes,condense_seconds,decision_dim,median_solve_seconds,mean_solve_seconds,steps"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.n_psi,
            self.n_terms,
            self.quad_nodes,
            fmt_f64(self.condense_seconds),
            self.decision_dim,
            fmt_f64(self.median_solve_seconds),
            fmt_f64(self.mean_solve_seconds),
            self.steps
        )
    }
}

/// Time the offline condensation and a fixed closed-loop run for one model.
pub fn bench_point(
    plant: &dyn Plant,
    model: &PpkoModel,
    spec: &SmpcSpec,
    quad: &QuadratureRule,
    solver: &mut dyn ConvexSolver,
    run: &ClosedLoopRun,
) -> Result<BenchRow> {
    let start = Instant::now();
    let cp = condense(model, spec, quad)?;
    let condense_seconds = start.elapsed().as_secs_f64();
    let log = closed_loop(plant, model, &cp, solver, run)?;
    let times = log.solve_times();
    Ok(BenchRow {
        n_psi: model.n_psi(),
        n_terms: model.n_terms(),
        quad_nodes: quad.len(),
        condense_seconds,
        decision_dim: cp.decision_dim(),
        median_solve_seconds: median(&times),
        mean_solve_seconds: times.iter().sum::<f64>() / times.len().max(1) as f64,
        steps: times.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Coefficients;
    use crate::pce::PolyFamily;
    use crate::plants::{rk4_step, Duffing};
    use crate::solver::{AdmmConfig, AdmmSolver, SmpcSolver};

    /// `dx/dt = A x + B u`, with a dummy parameter that has no effect.
    #[derive(Debug)]
    struct Linear {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        dt: f64,
    }

    impl Plant for Linear {
        fn name(&self) -> &'static str {
            "linear"
        }
        fn n_x(&self) -> usize {
            self.a.nrows()
        }
        fn n_u(&self) -> usize {
            self.b.ncols()
        }
        fn families(&self) -> Vec<PolyFamily> {
            vec![PolyFamily::legendre(-1.0, 1.0).unwrap()]
        }
        fn dt(&self) -> f64 {
            self.dt
        }
        fn input_bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![-5.0; self.n_u()], vec![5.0; self.n_u()])
        }
        fn rhs(&self, x: &[f64], u: &[f64], _theta: &[f64], d: f64, out: &mut [f64]) {
            let dx = &self.a * DVector::from_column_slice(x) + &self.b * DVector::from_column_slice(u).add_scalar(d);
            out.copy_from_slice(dx.as_slice());
        }
        fn operating_point(&self, _theta: &[f64]) -> Result<OperatingPoint> {
            Ok(OperatingPoint { x: vec![0.0; self.n_x()], u: vec![0.0; self.n_u()] })
        }
        fn descriptor(&self) -> serde_json::Value {
            serde_json::json!({ "plant": "linear" })
        }
    }

    fn oscillator() -> Linear {
        Linear {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.1]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            dt: 0.1,
        }
    }

    /// RK4 of a linear ODE is a linear map, so the lifted model `[1; x]` with
    /// the RK4 matrices reproduces the plant exactly.
    fn matched_model(plant: &Linear) -> PpkoModel {
        let n = plant.n_x();
        let step = |x: &[f64], u: f64| rk4_step(|s, out| plant.rhs(s, &[u], &[0.0], 0.0, out), x, plant.dt).unwrap();
        let mut a = DMatrix::zeros(n + 1, n + 1);
        a[(0, 0)] = 1.0;
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = step(&e, 0.0);
            for i in 0..n {
                a[(i + 1, j + 1)] = col[i];
            }
        }
        let bu = step(&vec![0.0; n], 1.0);
        let mut b = DMatrix::zeros(n + 1, 1);
        for i in 0..n {
            b[(i + 1, 0)] = bu[i];
        }
        let basis = PceBasis::total_degree(plant.families(), 0).unwrap();
        PpkoModel::new(basis, Dictionary::fixed(n), Coefficients { a: vec![a], b: vec![b] }).unwrap()
    }

    fn regulator(horizon: usize) -> SmpcSpec {
        SmpcSpec::new(horizon, DMatrix::identity(2, 2), DMatrix::identity(1, 1) * 0.1, DMatrix::identity(2, 2) * 10.0, vec![-5.0], vec![5.0])
    }

    fn small_spec() -> DataGenSpec {
        DataGenSpec { n_param_sets: 3, n_ics_per_set: 2, n_steps: 5, seed: 11, ..DataGenSpec::default() }
    }

    #[test]
    fn data_counts() {
        let plant = Duffing::default();
        let (ds, rep) = gen_training_data(&plant, &small_spec()).unwrap();
        assert_eq!(ds.len(), 30);
        assert_eq!(rep, GenReport { trajectories: 6, dropped: 0 });
        let one = DataGenSpec { n_steps: 1, ..small_spec() };
        assert_eq!(gen_training_data(&plant, &one).unwrap().0.len(), 6);
    }

    #[test]
    fn data_is_seeded_and_consistent() {
        let plant = Duffing::default();
        let (a, _) = gen_training_data(&plant, &small_spec()).unwrap();
        let (b, _) = gen_training_data(&plant, &small_spec()).unwrap();
        assert_eq!(a, b);
        let (c, _) = gen_training_data(&plant, &DataGenSpec { seed: 12, ..small_spec() }).unwrap();
        assert_ne!(a, c);
        for s in &a.snapshots {
            assert_eq!(plant.step(&s.x, &s.u, &s.theta, 0.0).unwrap(), s.x_plus);
            assert!(plant.in_support(&s.theta));
        }
        for w in a.snapshots.windows(2) {
            if w[0].trajectory == w[1].trajectory {
                assert_eq!(w[0].x_plus, w[1].x);
            }
        }
    }

    #[test]
    fn cstr_data_uses_deviation_coordinates() {
        let plant = crate::plants::Cstr::default();
        let spec = DataGenSpec {
            ic_lo: vec![-0.1; 4],
            ic_hi: vec![0.1; 4],
            input_scale: 0.1,
            ..small_spec()
        };
        let (ds, _) = gen_training_data(&plant, &spec).unwrap();
        for s in &ds.snapshots {
            let op = plant.operating_point(&s.theta).unwrap();
            let u = s.u[0] + op.u[0];
            assert!((0.0..=1.0).contains(&u));
            let x: Vec<f64> = s.x.iter().zip(&op.x).map(|(a, b)| a + b).collect();
            let xp: Vec<f64> = s.x_plus.iter().zip(&op.x).map(|(a, b)| a + b).collect();
            let next = plant.step(&x, &[u], &s.theta, 0.0).unwrap();
            for i in 0..4 {
                assert!((next[i] - xp[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mc_degenerate_and_zero_horizon() {
        let plant = oscillator();
        let env = mc_propagate(&plant, &[1.0, 1.0], None, 50, 10, 1).unwrap();
        assert_eq!(env.steps(), 11);
        assert!(env.std.iter().flatten().all(|&s| s < 1e-14));
        let env0 = mc_propagate(&Duffing::default(), &[1.0, 1.0], None, 100, 0, 1).unwrap();
        assert_eq!(env0.mean, vec![vec![1.0, 1.0]]);
        assert_eq!(env0.std, vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn mc_seeds_agree_within_sampling_error() {
        let plant = Duffing::default();
        let n = 30_000;
        let a = mc_propagate(&plant, &[1.0, 1.0], None, n, 40, 1).unwrap();
        let b = mc_propagate(&plant, &[1.0, 1.0], None, n, 40, 2).unwrap();
        for t in 0..=40 {
            for i in 0..2 {
                let se = (a.std[t][i].powi(2) / n as f64 + b.std[t][i].powi(2) / n as f64).sqrt();
                assert!((a.mean[t][i] - b.mean[t][i]).abs() <= 4.0 * se + 1e-15, "t={t} i={i}");
            }
        }
    }

    #[test]
    fn mc_reordering_invariance() {
        let plant = Duffing::default();
        let thetas = plant.sample_params(&mut ChaCha8Rng::seed_from_u64(5), 200);
        let path = |th: &Vec<f64>| {
            let mut x = vec![1.0, 1.0];
            let mut p = vec![x.clone()];
            for _ in 0..10 {
                x = plant.step(&x, &[0.0], th, 0.0).unwrap();
                p.push(x.clone());
            }
            p
        };
        let fwd: Vec<_> = thetas.iter().map(path).collect();
        let rev: Vec<_> = thetas.iter().rev().map(path).collect();
        let a = envelope(Source::Mc, 0.02, &fwd, None);
        let b = envelope(Source::Mc, 0.02, &rev, None);
        let g = a.compare(&b).unwrap();
        assert!(g.max_mean_gap() < 1e-14 && g.max_std_gap() < 1e-14);
        let direct = mc_propagate(&plant, &[1.0, 1.0], None, 200, 10, 5).unwrap();
        assert_eq!(direct.mean, a.mean);
    }

    fn uniform_output_model() -> PpkoModel {
        // Cz_1 = theta for theta ~ U[-1,1]: A = 0 except the constant, B = 0,
        // and the constant feeds x via the theta-linear term.
        let basis = PceBasis::total_degree(vec![PolyFamily::legendre(-1.0, 1.0).unwrap()], 1).unwrap();
        let mut coeffs = Coefficients::zeros(2, 2, 1);
        coeffs.a[0][(0, 0)] = 1.0;
        // Phi_1 = sqrt(3) theta
        coeffs.a[1][(1, 0)] = 1.0 / 3f64.sqrt();
        PpkoModel::new(basis, Dictionary::fixed(1), coeffs).unwrap()
    }

    #[test]
    fn quadrature_moments_of_uniform_output() {
        let model = uniform_output_model();
        let quad = model.basis().gauss_rule(3).unwrap();
        let env = ppko_propagate(&model, &[0.0], &[0.0], &quad, 1.0).unwrap();
        assert!(env.mean[1][0].abs() < 1e-15);
        assert!((env.std[1][0] - 1.0 / 3f64.sqrt()).abs() < 1e-14);
        assert_eq!(env, ppko_propagate(&model, &[0.0], &[0.0], &quad, 1.0).unwrap());
    }

    #[test]
    fn quadrature_without_parameter_dependence() {
        let plant = oscillator();
        let model = matched_model(&plant);
        let quad = QuadratureRule::tensor_gauss(&plant.families(), 4).unwrap();
        let env = ppko_propagate(&model, &[1.0, 0.0], &[0.3; 6], &quad, 0.1).unwrap();
        assert!(env.std.iter().flatten().all(|&s| s < 1e-7));
    }

    #[test]
    fn quadrature_matches_monte_carlo_through_model() {
        let basis = PceBasis::total_degree(
            vec![PolyFamily::legendre(0.0, 1.0).unwrap(), PolyFamily::legendre(-1.0, 1.0).unwrap()],
            2,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut coeffs = Coefficients::zeros(basis.len(), 3, 1);
        coeffs.a[0][(0, 0)] = 1.0;
        for k in 0..basis.len() {
            for i in 1..3 {
                for j in 0..3 {
                    coeffs.a[k][(i, j)] = rng.random_range(-0.3..0.3);
                }
                coeffs.b[k][(i, 0)] = rng.random_range(-0.3..0.3);
            }
        }
        let model = PpkoModel::new(basis, Dictionary::fixed(2), coeffs).unwrap();
        let horizon = 4;
        let inputs = vec![0.5, -0.2, 0.1, 0.0];
        let quad = model.basis().gauss_rule(crate::condense::exact_node_count(model.basis().degree(), horizon)).unwrap();
        let q = ppko_propagate(&model, &[1.0, -0.5], &inputs, &quad, 1.0).unwrap();

        let n = 1_000_000;
        let families = model.basis().families().to_vec();
        let (mut s1, mut s2) = (vec![[0.0f64; 2]; horizon + 1], vec![[0.0f64; 2]; horizon + 1]);
        for _ in 0..n {
            let th: Vec<f64> = families.iter().map(|f| f.sample(&mut rng)).collect();
            let path = model.rollout(&[1.0, -0.5], &inputs, &th).unwrap();
            for (t, x) in path.iter().enumerate() {
                for i in 0..2 {
                    s1[t + 1][i] += x[i];
                    s2[t + 1][i] += x[i] * x[i];
                }
            }
        }
        for t in 1..=horizon {
            for i in 0..2 {
                let mean = s1[t][i] / n as f64;
                let var = s2[t][i] / n as f64 - mean * mean;
                let se = (var / n as f64).sqrt();
                assert!((mean - q.mean[t][i]).abs() <= 3.0 * se + 1e-12, "mean t={t} i={i}");
                assert!((var.max(0.0).sqrt() - q.std[t][i]).abs() <= 3.0 * se * 2.0 + 1e-12, "std t={t} i={i}");
            }
        }
    }

    #[test]
    fn zero_state_stays_at_origin() {
        let plant = oscillator();
        let model = matched_model(&plant);
        let quad = QuadratureRule::tensor_gauss(&plant.families(), 1).unwrap();
        let cp = condense(&model, &regulator(5), &quad).unwrap();
        let mut solver = SmpcSolver::default();
        let run = ClosedLoopRun {
            theta: vec![0.0],
            x0: vec![0.0, 0.0],
            n_steps: 20,
            anchor: plant.operating_point(&[0.0]).unwrap(),
            disturbance: Vec::new(),
        };
        let log = closed_loop(&plant, &model, &cp, &mut solver, &run).unwrap();
        assert_eq!(log.records.len(), 20);
        for r in &log.records {
            assert!(r.u[0].abs() < 1e-6 && r.x.iter().all(|v| v.abs() < 1e-6));
            assert!(r.solve_time > 0.0);
        }
        assert!(log.summary().final_norm <= 1e-6);
    }

    #[test]
    fn warm_start_is_the_shifted_plan() {
        let plant = oscillator();
        let model = matched_model(&plant);
        let quad = QuadratureRule::tensor_gauss(&plant.families(), 1).unwrap();
        let cp = condense(&model, &regulator(4), &quad).unwrap();
        let mut solver = SmpcSolver::default();
        let run = ClosedLoopRun {
            theta: vec![0.0],
            x0: vec![2.0, -1.0],
            n_steps: 15,
            anchor: plant.operating_point(&[0.0]).unwrap(),
            disturbance: vec![0.5; 3],
        };
        let log = closed_loop(&plant, &model, &cp, &mut solver, &run).unwrap();
        assert!(log.records[0].warm_start.is_none());
        for w in log.records.windows(2) {
            let prev = &w[0].plan;
            let mut expect = prev[1..].to_vec();
            expect.push(*prev.last().unwrap());
            assert_eq!(w[1].warm_start.as_ref().unwrap(), &expect);
        }
        assert_eq!(log.records[2].disturbance, 0.5);
        assert_eq!(log.records[3].disturbance, 0.0);
        assert!(log.deviation_norm(15) < log.deviation_norm(0));
        let csv = log.to_csv();
        assert_eq!(csv.lines().count(), 17);
        assert!(csv.lines().all(|l| l.split(',').count() == csv.lines().next().unwrap().split(',').count()));
    }

    #[test]
    fn inputs_respect_bounds_under_saturation() {
        let plant = oscillator();
        let model = matched_model(&plant);
        let quad = QuadratureRule::tensor_gauss(&plant.families(), 1).unwrap();
        let mut spec = regulator(5);
        spec.u_min = vec![-0.2];
        spec.u_max = vec![0.2];
        let cp = condense(&model, &spec, &quad).unwrap();
        let mut solver = SmpcSolver::default();
        let run = ClosedLoopRun {
            theta: vec![0.0],
            x0: vec![3.0, 3.0],
            n_steps: 30,
            anchor: plant.operating_point(&[0.0]).unwrap(),
            disturbance: Vec::new(),
        };
        let log = closed_loop(&plant, &model, &cp, &mut solver, &run).unwrap();
        assert!(log.records.iter().all(|r| r.u[0].abs() <= 0.2));
        assert!(log.records.iter().any(|r| (r.u[0].abs() - 0.2).abs() < 1e-9));
    }

    #[test]
    fn infeasible_steps_fall_back_to_shifted_plan() {
        let plant = oscillator();
        let model = matched_model(&plant);
        let quad = QuadratureRule::tensor_gauss(&plant.families(), 1).unwrap();
        // x_1 >= 10 at the first predicted step cannot be reached from the origin
        let spec = regulator(3).with_state_bounds(vec![10.0, f64::NEG_INFINITY], vec![f64::INFINITY, f64::INFINITY]);
        let cp = condense(&model, &spec, &quad).unwrap();
        let mut solver = SmpcSolver::new(AdmmConfig { max_iter: 2000, ..AdmmConfig::default() }, Default::default());
        let run = ClosedLoopRun {
            theta: vec![0.0],
            x0: vec![0.0, 0.0],
            n_steps: 3,
            anchor: plant.operating_point(&[0.0]).unwrap(),
            disturbance: Vec::new(),
        };
        let log = closed_loop(&plant, &model, &cp, &mut solver, &run).unwrap();
        assert_eq!(log.summary().infeasible_steps, 3);
        assert!(log.records.iter().all(|r| r.fallback && r.plan == vec![0.0; 3]));
    }

    #[test]
    fn receding_horizon_versus_blind_plan() {
        let plant = oscillator();
        let model = matched_model(&plant);
        let quad = QuadratureRule::tensor_gauss(&plant.families(), 1).unwrap();
        let horizon = 8;
        let spec = regulator(horizon);
        let cp = condense(&model, &spec, &quad).unwrap();
        let x0 = vec![1.0, 0.5];
        let mut solver = AdmmSolver::new(AdmmConfig::default());
        let plan = solver.solve(&cp.instantiate(&model.lift(&x0).unwrap()).unwrap(), None).unwrap().v;

        let stage = |x: &[f64], u: Option<f64>| {
            let xq: f64 = x.iter().map(|v| v * v).sum();
            xq + u.map_or(0.0, |u| 0.1 * u * u)
        };
        let cost_of = |inputs: &mut dyn FnMut(usize, &[f64]) -> f64| {
            let mut x = x0.clone();
            let mut total = 0.0;
            for t in 0..horizon {
                let u = inputs(t, &x);
                total += if t == 0 { 0.1 * u * u } else { stage(&x, Some(u)) };
                x = plant.step(&x, &[u], &[0.0], 0.0).unwrap();
            }
            total + 10.0 * x.iter().map(|v| v * v).sum::<f64>()
        };
        let blind = cost_of(&mut |t, _| plan[t]);
        let mut rh = AdmmSolver::new(AdmmConfig::default());
        let closed = cost_of(&mut |_, x| rh.solve(&cp.instantiate(&model.lift(x).unwrap()).unwrap(), None).unwrap().v[0]);
        assert!(blind.is_finite() && closed.is_finite());
        eprintln!("finite-horizon cost: open-loop plan {blind:.6e}, receding horizon {closed:.6e}");
    }

    #[test]
    fn random_features_reach_requested_width() {
        let plant = Duffing::default();
        let (ds, _) = gen_training_data(&plant, &DataGenSpec { n_steps: 40, ..small_spec() }).unwrap();
        let basis = PceBasis::total_degree(plant.families(), 1).unwrap();
        for n_psi in [3, 10, 25] {
            let m = random_feature_model(&ds, basis.clone(), n_psi, 1e-6, 1).unwrap();
            assert_eq!(m.n_psi(), n_psi);
        }
        assert!(random_feature_model(&ds, basis, 2, 1e-6, 1).is_err());
    }

    #[test]
    fn bench_decision_dim_is_horizon_times_inputs() {
        let plant = oscillator();
        let model = matched_model(&plant);
        let quad = QuadratureRule::tensor_gauss(&plant.families(), 2).unwrap();
        let run = ClosedLoopRun {
            theta: vec![0.0],
            x0: vec![1.0, 0.0],
            n_steps: 5,
            anchor: plant.operating_point(&[0.0]).unwrap(),
            disturbance: Vec::new(),
        };
        let mut solver = SmpcSolver::default();
        let row = bench_point(&plant, &model, &regulator(6), &quad, &mut solver, &run).unwrap();
        assert_eq!(row.decision_dim, 6);
        assert_eq!(row.steps, 5);
        assert_eq!(BenchRow::csv_header().split(',').count(), row.csv_row().split(',').count());
    }

    #[test]
    fn pulse_profile_and_recovery() {
        let sched = PulseSchedule { onset: 2, duration: 3, window: 6, magnitude: [0.1, 0.2] };
        assert_eq!(sched.profile(1.5), vec![0.0, 0.0, 1.5, 1.5, 1.5, 0.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let v = sched.sample_value(&mut rng).abs();
            assert!((0.1..=0.2).contains(&v));
        }
        let r = Recovery::measure(&[9.0, 1.0, 1.0, 2.0, 1.5, 1.1], 1.0, 2);
        assert_eq!(r.peak, 1.0);
        assert!((r.end - 0.1).abs() < 1e-12 && r.recovered(0.2) && !r.recovered(0.05));
        assert!(PulseSchedule { duration: 7, ..sched }.validate().is_err());
    }

    #[test]
    fn rejection_batch_on_matched_model() {
        let plant = oscillator();
        let model = matched_model(&plant);
        let quad = QuadratureRule::tensor_gauss(&plant.families(), 1).unwrap();
        let cp = condense(&model, &regulator(6), &quad).unwrap();
        let pulse = PulseSchedule { onset: 3, duration: 5, window: 40, magnitude: [0.5, 1.0] };
        let plan = RejectionPlan { pulse, output: 0, realizations: 4, seed: 3 };
        let results = rejection_batch(&plant, &model, &cp, SmpcSolver::default, &plan).unwrap();
        assert_eq!(results.len(), 4);
        for r in &results {
            assert_eq!(r.log.records.len(), 43);
            assert!(r.controlled.peak > 0.0 && r.controlled.recovered(0.2));
            assert!(r.controlled.peak < r.baseline.peak);
        }
        let again = rejection_batch(&plant, &model, &cp, SmpcSolver::default, &plan).unwrap();
        assert_eq!(results.iter().map(|r| r.disturbance).collect::<Vec<_>>(), again.iter().map(|r| r.disturbance).collect::<Vec<_>>());
    }

    #[test]
    fn seventeen_significant_digits() {
        let v = 0.1 + 0.2;
        assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
    }
}
