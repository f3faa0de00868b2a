use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ppko::condense::{condense, exact_node_count, CondensedProblem};
use ppko::dictionary::Dictionary;
use ppko::io::{self, CondensedManifest, DatasetManifest};
use ppko::model::{train_edmd_dl, Dataset, PpkoModel, TrainingLog};
use ppko::pce::{PceBasis, QuadratureRule};
use ppko::simulate::{
    bench_point, closed_loop, fmt_f64, gen_training_data, mc_propagate, ppko_propagate_plant, random_feature_model,
    rejection_batch, BenchRow, ClosedLoopRun, RunSummary,
};
use ppko::solver::SmpcSolver;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Settings shared by every command after flag overrides.
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub quad_nodes: Option<usize>,
    pub horizon: Option<usize>,
}

impl Context {
    fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out.join("dataset.bin"))
    }

    fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.out.join("model.bin"))
    }

    fn quad_nodes(&self) -> usize {
        self.quad_nodes.unwrap_or(self.config.quadrature.nodes)
    }

    fn plant_hash(&self) -> String {
        io::json_hash(&self.config.plant.plant().descriptor())
    }

    fn load_model(&self) -> CliResult<(PpkoModel, String)> {
        let (model, hash) = io::load_model(&self.model_path())?;
        let plant = self.config.plant.plant();
        if model.n_x() != plant.n_x() || model.n_u() != plant.n_u() || model.basis().families() != plant.families().as_slice() {
            return Err(CliError::Mismatch(format!(
                "model {} does not match the configured {} plant",
                self.model_path().display(),
                plant.name()
            )));
        }
        Ok((model, hash))
    }

    fn load_dataset(&self) -> CliResult<(Dataset, DatasetManifest)> {
        let path = self.dataset_path();
        let (ds, manifest) = io::load_dataset(&path)?;
        if manifest.plant_hash != self.plant_hash() {
            return Err(CliError::Mismatch(format!(
                "dataset {} was generated for a different plant (hash {}, config hash {})",
                path.display(),
                manifest.plant_hash,
                self.plant_hash()
            )));
        }
        Ok((ds, manifest))
    }

    fn quadrature(&self) -> CliResult<QuadratureRule> {
        Ok(QuadratureRule::tensor_gauss(&self.config.plant.plant().families(), self.quad_nodes())?)
    }
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    Ok(io::write_atomic(path, text.as_bytes())?)
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    write(path, &(serde_json::to_string_pretty(value).expect("json value serializes") + "\n"))
}

pub fn gen_data(ctx: &Context) -> CliResult<()> {
    let plant = ctx.config.plant.plant();
    let spec = ctx.config.data_spec();
    let (dataset, report) = gen_training_data(plant, &spec)?;
    let manifest = DatasetManifest {
        plant: plant.name().to_string(),
        plant_hash: ctx.plant_hash(),
        seed: spec.seed,
        snapshots: dataset.len(),
        trajectories: report.trajectories,
        dropped_trajectories: report.dropped,
        n_x: dataset.n_x,
        n_u: dataset.n_u,
        n_theta: dataset.n_theta,
    };
    let path = ctx.dataset_path();
    let hash = io::save_dataset(&path, &dataset, &manifest)?;
    let mut meta = serde_json::to_value(&manifest).expect("manifest serializes");
    meta["sha256"] = json!(hash);
    meta["spec"] = serde_json::to_value(&spec).expect("spec serializes");
    write_json(&path.with_extension("json"), &meta)?;
    println!(
        "gen-data: {} snapshots from {} trajectories ({} dropped) -> {} sha256={hash}",
        manifest.snapshots,
        manifest.trajectories,
        manifest.dropped_trajectories,
        path.display()
    );
    Ok(())
}

fn training_csv(log: &TrainingLog) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,objective_before_fit,objective_after_fit\n");
    for r in &log.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch,
            fmt_f64(r.train_loss),
            fmt_f64(r.val_loss),
            fmt_f64(r.objective_before_fit),
            fmt_f64(r.objective_after_fit)
        );
    }
    out
}

pub fn train(ctx: &Context) -> CliResult<()> {
    let (dataset, _) = ctx.load_dataset()?;
    let plant = ctx.config.plant.plant();
    let basis = PceBasis::total_degree(plant.families(), ctx.config.basis.degree)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.seed);
    let d = &ctx.config.dictionary;
    let dict = Dictionary::new(plant.n_x(), &d.hidden, d.n_learn, &mut rng);
    let (model, log) = train_edmd_dl(&dataset, dict, basis, &ctx.config.train_config())?;
    let path = ctx.model_path();
    let log_path = path.with_file_name("training_log.csv");
    write(&log_path, &training_csv(&log))?;
    let hash = io::save_model(&path, &model)?;
    let best = log.best().expect("log has the initial fit");
    println!(
        "train: n_psi={} N_K={} epochs={} best_epoch={} train_loss={} val_loss={} stopped_early={} -> {} sha256={hash}",
        model.n_psi(),
        model.n_terms(),
        log.records.len() - 1,
        log.best_epoch,
        fmt_f64(best.train_loss),
        fmt_f64(best.val_loss),
        log.stopped_early,
        path.display()
    );
    Ok(())
}

pub fn validate(ctx: &Context) -> CliResult<()> {
    let vcfg = ctx
        .config
        .validate
        .clone()
        .ok_or_else(|| CliError::Config("config has no [validate] table".into()))?;
    let (model, _) = ctx.load_model()?;
    let plant = ctx.config.plant.plant();
    let quad = ctx.quadrature()?;
    let horizon = ctx.horizon.unwrap_or(vcfg.horizon);
    let dir = ctx.out.join("validate");
    let mut cases = Vec::new();
    let mut failed = Vec::new();
    for (i, x0) in vcfg.initial_states.iter().enumerate() {
        let mc = mc_propagate(plant, x0, None, vcfg.n_mc, horizon, ctx.config.seed)?;
        let pp = ppko_propagate_plant(&model, plant, x0, None, horizon, &quad)?;
        let gap = pp.compare(&mc)?;
        write(&dir.join(format!("mc_{i:02}.csv")), &mc.to_csv())?;
        write(&dir.join(format!("ppko_{i:02}.csv")), &pp.to_csv())?;
        let pass = gap.max_mean_gap() <= vcfg.gate_mean && gap.max_std_gap() <= vcfg.gate_std;
        println!(
            "validate: x0={x0:?} max mean gap {} max std gap {} -> {}",
            fmt_f64(gap.max_mean_gap()),
            fmt_f64(gap.max_std_gap()),
            if pass { "within gate" } else { "OUTSIDE gate" }
        );
        if !pass {
            failed.push(i);
        }
        cases.push(json!({ "x0": x0, "mean_gap": gap.mean_gap, "std_gap": gap.std_gap, "pass": pass }));
    }
    write_json(
        &dir.join("metrics.json"),
        &json!({
            "horizon": horizon,
            "n_mc": vcfg.n_mc,
            "quad_nodes": quad.len(),
            "gate_mean": vcfg.gate_mean,
            "gate_std": vcfg.gate_std,
            "cases": cases,
        }),
    )?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gate(format!("initial states {failed:?} exceed the agreement gate")))
    }
}

/// Load the condensed problem from the cache or build and store it.
fn condensed(ctx: &Context, model: &PpkoModel, model_hash: &str, horizon: usize) -> CliResult<(CondensedProblem, bool)> {
    let mut spec = ctx.config.smpc_spec()?;
    spec.horizon = horizon;
    if !spec.x_min.is_empty() {
        spec.x_min.resize(horizon, spec.x_min[0].clone());
        spec.x_max.resize(horizon, spec.x_max[0].clone());
    }
    let quad = ctx.quadrature()?;
    let spec_hash = io::json_hash(&spec.descriptor());
    let quad_hash = io::quad_hash(&quad);
    let key = CondensedManifest::key(model_hash, &spec_hash, &quad_hash);
    let path = ctx.out.join("cache").join(format!("condensed-{}.bin", &key[..16]));
    if let Ok(bytes) = std::fs::read(&path) {
        match io::condensed_from_bytes(&bytes) {
            Ok((cp, m)) if m.model_hash == model_hash && m.spec_hash == spec_hash && m.quad_hash == quad_hash => {
                return Ok((cp, true));
            }
            _ => log::warn!("ignoring stale condensed cache {}", path.display()),
        }
    }
    let needed = exact_node_count(model.basis().degree(), horizon);
    if ctx.quad_nodes() < needed {
        log::info!("{} nodes per dimension; {needed} would make the expectations exact", ctx.quad_nodes());
    }
    let cp = condense(model, &spec, &quad)?;
    io::write_atomic(&path, &io::condensed_to_bytes(&cp, model_hash, &spec_hash, &quad_hash))?;
    Ok((cp, false))
}

pub fn smpc(ctx: &Context) -> CliResult<()> {
    let cl = ctx
        .config
        .closed_loop
        .clone()
        .ok_or_else(|| CliError::Config("config has no [closed_loop] table".into()))?;
    let (model, model_hash) = ctx.load_model()?;
    let plant = ctx.config.plant.plant();
    let horizon = ctx.horizon.unwrap_or(ctx.config.smpc.horizon);
    let (cp, cached) = condensed(ctx, &model, &model_hash, horizon)?;
    let dir = ctx.out.join("smpc");
    let abort = |e: ppko::Error| CliError::Abort(e.to_string());
    let mut files: Vec<(PathBuf, String)> = Vec::new();

    let mut runs = Vec::new();
    for (i, r) in cl.runs.iter().enumerate() {
        let run = ClosedLoopRun {
            theta: r.theta.clone(),
            x0: r.x0.clone(),
            n_steps: cl.n_steps,
            anchor: plant.operating_point(&r.theta).map_err(abort)?,
            disturbance: Vec::new(),
        };
        let mut solver = SmpcSolver::default();
        let log = closed_loop(plant, &model, &cp, &mut solver, &run).map_err(abort)?;
        files.push((dir.join(format!("run_{i:02}_{}.csv", r.name)), log.to_csv()));
        let summary: RunSummary = log.summary();
        let reached = cl.target_norm.and_then(|tol| (0..=log.records.len()).find(|&k| log.deviation_norm(k) <= tol));
        println!(
            "smpc: {} final |x| {} first step within target {:?} infeasible {} mean solve {} s",
            r.name,
            fmt_f64(summary.final_norm),
            reached,
            summary.infeasible_steps,
            fmt_f64(summary.mean_solve_time)
        );
        runs.push(json!({ "name": r.name, "theta": r.theta, "x0": r.x0, "summary": summary, "first_step_within_target": reached }));
    }

    let mut rejection = serde_json::Value::Null;
    if let Some(rej) = &cl.rejection {
        let results = rejection_batch(plant, &model, &cp, SmpcSolver::default, &rej.plan(ctx.config.seed))
            .map_err(abort)?;
        let mut csv = String::from("realization");
        for i in 0..plant.n_theta() {
            let _ = write!(csv, ",theta_{i}");
        }
        csv.push_str(",disturbance,peak,end,recovered,baseline_peak,baseline_end,baseline_recovered,infeasible_steps\n");
        let (mut recovered, mut baseline_fail, mut infeasible) = (0, 0, 0);
        for (k, r) in results.iter().enumerate() {
            let ok = r.controlled.recovered(rej.fraction);
            let base_ok = r.baseline.recovered(rej.fraction);
            let inf = r.log.summary().infeasible_steps;
            recovered += ok as usize;
            baseline_fail += !base_ok as usize;
            infeasible += inf;
            let _ = write!(csv, "{k}");
            for t in &r.theta {
                let _ = write!(csv, ",{}", fmt_f64(*t));
            }
            let _ = writeln!(
                csv,
                ",{},{},{},{ok},{},{},{base_ok},{inf}",
                fmt_f64(r.disturbance),
                fmt_f64(r.controlled.peak),
                fmt_f64(r.controlled.end),
                fmt_f64(r.baseline.peak),
                fmt_f64(r.baseline.end)
            );
            files.push((dir.join("rejection").join(format!("realization_{k:03}.csv")), r.log.to_csv()));
        }
        files.push((dir.join("rejection.csv"), csv));
        println!(
            "smpc: rejection recovered {recovered}/{} (baseline violating {baseline_fail}/{}), infeasible steps {infeasible}",
            results.len(),
            results.len()
        );
        rejection = json!({
            "realizations": results.len(),
            "recovered": recovered,
            "baseline_violating": baseline_fail,
            "infeasible_steps": infeasible,
            "mean_solve_time": results.iter().map(|r| r.log.summary().mean_solve_time).sum::<f64>() / results.len().max(1) as f64,
        });
    }

    for (path, text) in &files {
        write(path, text)?;
    }
    write_json(
        &dir.join("summary.json"),
        &json!({
            "horizon": horizon,
            "decision_dim": cp.decision_dim(),
            "n_psi": cp.n_psi,
            "quad_nodes": cp.quad_nodes,
            "exact_node_count": exact_node_count(model.basis().degree(), horizon),
            "condensed_from_cache": cached,
            "runs": runs,
            "rejection": rejection,
        }),
    )
}

pub fn bench(ctx: &Context) -> CliResult<()> {
    let b = ctx
        .config
        .bench
        .clone()
        .ok_or_else(|| CliError::Config("config has no [bench] table".into()))?;
    let plant = ctx.config.plant.plant();
    let horizon = ctx.horizon.unwrap_or(ctx.config.smpc.horizon);
    let mut spec = ctx.config.smpc_spec()?;
    spec.horizon = horizon;
    if !spec.x_min.is_empty() {
        spec.x_min.resize(horizon, spec.x_min[0].clone());
        spec.x_max.resize(horizon, spec.x_max[0].clone());
    }
    let quad = ctx.quadrature()?;
    let run = ClosedLoopRun {
        theta: b.theta.clone(),
        x0: b.x0.clone(),
        n_steps: b.steps,
        anchor: plant.operating_point(&b.theta)?,
        disturbance: Vec::new(),
    };

    let mut models = Vec::new();
    if b.n_psi.is_empty() {
        models.push(ctx.load_model()?.0);
    } else {
        let (mut dataset, _) = ctx.load_dataset()?;
        if b.max_snapshots > 0 && dataset.len() > b.max_snapshots {
            let stride = dataset.len().div_ceil(b.max_snapshots);
            dataset.snapshots = dataset.snapshots.into_iter().step_by(stride).collect();
        }
        let basis = PceBasis::total_degree(plant.families(), ctx.config.basis.degree)?;
        for &n_psi in &b.n_psi {
            models.push(random_feature_model(&dataset, basis.clone(), n_psi, b.ridge, ctx.config.seed)?);
        }
    }

    let mut csv = format!("{}\n", BenchRow::csv_header());
    let mut rows = Vec::new();
    for model in &models {
        let mut solver = SmpcSolver::default();
        let row = bench_point(plant, model, &spec, &quad, &mut solver, &run).map_err(|e| CliError::Abort(e.to_string()))?;
        println!(
            "bench: n_psi={} N_K={} decision_dim={} condense {} s median solve {} s",
            row.n_psi,
            row.n_terms,
            row.decision_dim,
            fmt_f64(row.condense_seconds),
            fmt_f64(row.median_solve_seconds)
        );
        csv.push_str(&row.csv_row());
        csv.push('\n');
        rows.push(row);
    }
    write(&ctx.out.join("bench.csv"), &csv)?;
    let expected = horizon * plant.n_u();
    if let Some(bad) = rows.iter().find(|r| r.decision_dim != expected) {
        return Err(CliError::Bench(format!(
            "decision dimension {} at n_psi={} differs from H*n_u = {expected}",
            bad.decision_dim, bad.n_psi
        )));
    }
    Ok(())
}
