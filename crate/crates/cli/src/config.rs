//! Run configuration. Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use ppko::condense::{MomentConstraint, SmpcSpec};
use ppko::dictionary::AdamConfig;
use ppko::model::TrainConfig;
use ppko::plants::{Cstr, Duffing, Plant};
use ppko::simulate::{DataGenSpec, PulseSchedule, RejectionPlan};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub plant: PlantConfig,
    pub data: DataConfig,
    pub basis: BasisConfig,
    pub dictionary: DictionaryConfig,
    pub training: TrainingConfig,
    pub smpc: SmpcConfig,
    pub quadrature: QuadratureConfig,
    pub validate: Option<ValidateConfig>,
    pub closed_loop: Option<ClosedLoopConfig>,
    pub bench: Option<BenchConfig>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PlantConfig {
    Duffing(Duffing),
    Cstr(Cstr),
}

impl PlantConfig {
    pub fn plant(&self) -> &dyn Plant {
        match self {
            PlantConfig::Duffing(p) => p,
            PlantConfig::Cstr(p) => p,
        }
    }

    fn validate(&self) -> ppko::Result<()> {
        match self {
            PlantConfig::Duffing(p) => p.validate(),
            PlantConfig::Cstr(p) => p.validate(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_param_sets: usize,
    pub n_ics_per_set: usize,
    pub n_steps: usize,
    pub ic_lo: Vec<f64>,
    pub ic_hi: Vec<f64>,
    pub input_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    pub degree: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryConfig {
    pub hidden: Vec<usize>,
    pub n_learn: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs_max: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub ridge: f64,
    pub validation_fraction: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
}

fn default_lr() -> f64 {
    AdamConfig::default().lr
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmpcConfig {
    pub horizon: usize,
    /// Matrices are given as lists of rows.
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub q_f: Vec<Vec<f64>>,
    /// Input bounds in deviation coordinates; default to the plant's
    /// physical bounds shifted by the operating-point input.
    pub u_min: Option<Vec<f64>>,
    pub u_max: Option<Vec<f64>>,
    /// Mean-state bounds applied at every predicted step.
    pub x_min: Option<Vec<f64>>,
    pub x_max: Option<Vec<f64>>,
    #[serde(default)]
    pub moments: Vec<MomentConstraint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    pub nodes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    pub initial_states: Vec<Vec<f64>>,
    pub horizon: usize,
    pub n_mc: usize,
    pub gate_mean: f64,
    pub gate_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeRun {
    pub name: String,
    pub theta: Vec<f64>,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RejectionConfig {
    pub realizations: usize,
    /// Index of the regulated state.
    pub output: usize,
    /// Required ratio of end deviation to peak deviation.
    pub fraction: f64,
    pub pulse: PulseSchedule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedLoopConfig {
    #[serde(default)]
    pub n_steps: usize,
    pub target_norm: Option<f64>,
    #[serde(default)]
    pub runs: Vec<RegimeRun>,
    pub rejection: Option<RejectionConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub n_psi: Vec<usize>,
    pub steps: usize,
    pub theta: Vec<f64>,
    pub x0: Vec<f64>,
    pub ridge: f64,
    /// Snapshots used to fit each sweep model; 0 uses the whole dataset.
    #[serde(default)]
    pub max_snapshots: usize,
}

impl RejectionConfig {
    pub fn plan(&self, seed: u64) -> RejectionPlan {
        RejectionPlan { pulse: self.pulse.clone(), output: self.output, realizations: self.realizations, seed }
    }
}

fn matrix(rows: &[Vec<f64>], name: &str) -> CliResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(CliError::Config(format!("smpc.{name} must be a non-empty list of equal-length rows")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let ctx = |section: &'static str| move |e: ppko::Error| CliError::Config(format!("[{section}] {e}"));
        self.plant.validate().map_err(ctx("plant"))?;
        let n_x = self.plant.plant().n_x();
        self.data_spec().validate(n_x).map_err(ctx("data"))?;
        self.train_config().validate().map_err(ctx("training"))?;
        self.smpc_spec()?.validate().map_err(ctx("smpc"))?;
        if self.quadrature.nodes == 0 {
            return Err(CliError::Config("[quadrature] nodes must be >= 1".into()));
        }
        if let Some(v) = &self.validate {
            if v.initial_states.iter().any(|x| x.len() != n_x) {
                return Err(CliError::Config(format!("[validate] initial states need {n_x} entries")));
            }
            if v.n_mc < 2 || v.gate_mean < 0.0 || v.gate_std < 0.0 {
                return Err(CliError::Config("[validate] needs n_mc >= 2 and nonnegative gates".into()));
            }
        }
        if let Some(cl) = &self.closed_loop {
            for r in &cl.runs {
                if r.x0.len() != n_x || !self.plant.plant().in_support(&r.theta) {
                    return Err(CliError::Config(format!("[closed_loop] run `{}` has a bad state or parameter", r.name)));
                }
            }
            if let Some(rej) = &cl.rejection {
                rej.pulse.validate().map_err(ctx("closed_loop.rejection"))?;
                if rej.output >= n_x {
                    return Err(CliError::Config("[closed_loop.rejection] output index out of range".into()));
                }
            }
        }
        if let Some(b) = &self.bench {
            if b.x0.len() != n_x || !self.plant.plant().in_support(&b.theta) || b.steps == 0 {
                return Err(CliError::Config("[bench] needs a valid x0, theta and steps >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn data_spec(&self) -> DataGenSpec {
        let d = &self.data;
        DataGenSpec {
            n_param_sets: d.n_param_sets,
            n_ics_per_set: d.n_ics_per_set,
            n_steps: d.n_steps,
            ic_lo: d.ic_lo.clone(),
            ic_hi: d.ic_hi.clone(),
            input_scale: d.input_scale,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs_max: t.epochs_max,
            batch_size: t.batch_size,
            patience: t.patience,
            ridge: t.ridge,
            validation_fraction: t.validation_fraction,
            seed: self.seed,
            adam: AdamConfig { lr: t.learning_rate, ..AdamConfig::default() },
        }
    }

    pub fn smpc_spec(&self) -> CliResult<SmpcSpec> {
        let s = &self.smpc;
        let plant = self.plant.plant();
        let (lo, hi) = plant.input_bounds();
        let mean_theta: Vec<f64> = plant.families().iter().map(|f| f.mean()).collect();
        let op = plant.operating_point(&mean_theta)?;
        let shift = |b: &[f64]| b.iter().zip(&op.u).map(|(v, u)| v - u).collect::<Vec<f64>>();
        let u_min = s.u_min.clone().unwrap_or_else(|| shift(&lo));
        let u_max = s.u_max.clone().unwrap_or_else(|| shift(&hi));
        let mut spec = SmpcSpec::new(s.horizon, matrix(&s.q, "q")?, matrix(&s.r, "r")?, matrix(&s.q_f, "q_f")?, u_min, u_max);
        if s.x_min.is_some() || s.x_max.is_some() {
            let n = plant.n_x();
            spec = spec.with_state_bounds(
                s.x_min.clone().unwrap_or(vec![f64::NEG_INFINITY; n]),
                s.x_max.clone().unwrap_or(vec![f64::INFINITY; n]),
            );
        }
        spec.moments = s.moments.clone();
        Ok(spec)
    }
}
