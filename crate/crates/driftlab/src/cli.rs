//! Config schema and command runners behind the command-line interface.
//!
//! One JSON config drives every subcommand; dotted-key overrides patch it
//! and unknown keys fail closed. Each runner writes its tables and
//! snapshots under its own subdirectory of the output directory, plus a
//! `run.json` stamp carrying the canonical config and its fingerprint.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::baselines::eakf_qg::{EnsembleFilterConfig, QgEnsembleFilter};
use crate::baselines::oi::{regression_slope, OiConfig, OiFilter};
use crate::baselines::reference::Climatology;
use crate::cg::{run_filter, LatentPosterior};
use crate::dataset::{
    choose_subset, generate_to_dir, load_dataset, Dataset, DatasetConfig, Record, Split,
};
use crate::error::{Error, Result};
use crate::eval::{
    config_fingerprint, field_rmse, median_seconds_per_step, tracer_rmse, write_bench_csv,
    write_field_snapshot, write_series_csv, write_summary_csv, write_timings_csv, BenchRow,
    MethodSeries,
    MetricsReport, StepMetrics,
};
use crate::model::batch::{tensor_to_fields, training_arrays};
use crate::model::infer::{assimilate, forecast, AssimilationOutput};
use crate::model::train::train_full;
use crate::model::{Surrogate, SurrogateConfig};
use crate::nn::encode::angular_embed_flat;
use crate::nn::weights::ModelWeights;
use crate::qg::{hyperviscosity_matching, QGParams, QGSolver, QGState};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSettings {
    /// Solver steps to integrate.
    pub steps: usize,
    /// Diagnostics sampling interval in steps.
    pub sample_every: usize,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        SimulateSettings { steps: 2000, sample_every: 20 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Leading assimilation steps excluded from summary metrics.
    pub spinup: usize,
    /// Which dataset split to score.
    pub split: Split,
    /// Cap on scored records; 0 scores the whole split.
    pub limit: usize,
    /// Split-relative record indices to snapshot.
    pub snapshot_steps: Vec<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { spinup: 50, split: Split::Test, limit: 0, snapshot_steps: Vec::new() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    /// Tracer counts for the method comparison; one trained weights file
    /// serves every count.
    pub tracer_counts: Vec<usize>,
    /// Assimilation steps per timed batch.
    pub cycles: usize,
    /// Timed batches per row; the median is reported.
    pub repeats: usize,
    /// Grids for the latent-update cost rows (coefficients plus filter,
    /// no decoding), timed on freshly initialized weights.
    pub grids: Vec<usize>,
    /// Extra ensemble sizes for propagation-cost scaling rows.
    pub ensemble_sizes: Vec<usize>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            tracer_counts: vec![8, 16, 32],
            cycles: 5,
            repeats: 3,
            grids: vec![32, 64],
            ensemble_sizes: vec![10, 20, 40],
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub qg: QGParams,
    pub dataset: DatasetConfig,
    pub model: SurrogateConfig,
    /// Ensemble baseline knobs. `substeps` and `tracer_sigma` are bound to
    /// the dataset manifest when a dataset is in play.
    pub ensemble: EnsembleFilterConfig,
    /// Interpolation baseline knobs; `substeps` is bound like the ensemble's.
    pub oi: OiConfig,
    pub simulate: SimulateSettings,
    pub eval: EvalSettings,
    pub bench: BenchSettings,
}

fn parse_scalar(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

fn set_path(root: &mut serde_json::Value, key: &str, value: serde_json::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .as_object_mut()
            .ok_or_else(|| {
                Error::Config(format!("override key '{key}' descends into a non-object"))
            })?
            .entry(p.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    cur.as_object_mut()
        .ok_or_else(|| Error::Config(format!("override key '{key}' descends into a non-object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Load the config file, apply `KEY=VALUE` overrides and the global flags,
/// and validate against the schema. Returns the typed config together with
/// its canonical JSON form (the fingerprint input).
pub fn load_config(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    threads: Option<usize>,
) -> Result<(AppConfig, serde_json::Value)> {
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::MissingArtifact(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => serde_json::Value::Object(Default::default()),
    };
    if !value.is_object() {
        return Err(Error::Config("config root must be a JSON object".into()));
    }
    for kv in overrides {
        let (key, raw) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' is not KEY=VALUE")))?;
        set_path(&mut value, key, parse_scalar(raw))?;
    }
    if let Some(s) = seed {
        for key in ["dataset.seed", "model.seed", "ensemble.seed"] {
            set_path(&mut value, key, serde_json::json!(s))?;
        }
    }
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        set_path(&mut value, "ensemble.threads", serde_json::json!(t))?;
    }
    let cfg: AppConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
    let canon = serde_json::to_value(&cfg).expect("config serializes");
    Ok((cfg, canon))
}

fn write_run_stamp(
    dir: &Path,
    command: &str,
    fingerprint: &str,
    config: &serde_json::Value,
) -> Result<()> {
    let stamp = serde_json::json!({
        "command": command,
        "fingerprint": fingerprint,
        "config": config,
    });
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(&stamp).expect("stamp serializes");
    fs::write(dir.join("run.json"), text + "\n")?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(name: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Format(format!("manifest field {name} = '{v}' does not parse")))
}

fn scored_records<'a>(ds: &'a Dataset, ev: &EvalSettings) -> Result<&'a [Record]> {
    let recs = ds.split_records(ev.split)?;
    if recs.len() < 2 {
        return Err(Error::Config("scoring needs at least two records".into()));
    }
    Ok(if ev.limit > 0 && ev.limit < recs.len() { &recs[..ev.limit] } else { recs })
}

/// Spin a decorrelated state onto the attractor for cold-started baselines.
fn spun_base(params: &QGParams, init_std: f64, warmup: u64, seed: u64) -> Result<QGState> {
    let solver = QGSolver::new(params.clone())?;
    let mut state = solver.random_init(init_std, seed);
    for _ in 0..warmup {
        solver.step(&mut state)?;
    }
    Ok(state)
}

fn stride_fields(fields: &[Array2<f64>; 2], stride: usize) -> [Array2<f64>; 2] {
    if stride <= 1 {
        return fields.clone();
    }
    [0, 1].map(|l| {
        let g = fields[l].nrows() / stride;
        Array2::from_shape_fn((g, g), |(iy, ix)| fields[l][[iy * stride, ix * stride]])
    })
}

fn field_step(
    step: usize,
    est: &[Array2<f64>; 2],
    rec: &Record,
    tracer: Option<f64>,
    spread: Option<f64>,
) -> Result<StepMetrics> {
    let fe = field_rmse(est, &rec.psi)?;
    Ok(StepMetrics { step, tracer, upper: fe.upper, lower: fe.lower, both: fe.both, spread })
}

/// Per-record series for the conditioning filter. The tracer column stays
/// empty: the filter conditions on the observed positions, so it carries no
/// independent tracer estimate.
fn posterior_series(name: &str, out: &AssimilationOutput, records: &[Record]) -> Result<MethodSeries> {
    let mut steps = Vec::with_capacity(records.len());
    for (k, rec) in records.iter().enumerate() {
        let est = tensor_to_fields(&out.fields[k]);
        let spread = 0.5 * (out.predicted_std[k][0] + out.predicted_std[k][1]);
        steps.push(field_step(k, &est, rec, None, Some(spread))?);
    }
    Ok(MethodSeries { method: name.into(), steps })
}

/// Integrate the flow from a noise start and record energy and enstrophy
/// diagnostics, plus initial and final snapshots.
pub fn cmd_simulate(cfg: &AppConfig, canon: &serde_json::Value, out_dir: &Path) -> Result<()> {
    let dir = out_dir.join("simulate");
    fs::create_dir_all(&dir)?;
    let solver = QGSolver::new(cfg.qg.clone())?;
    let mut state = solver.random_init(cfg.dataset.init_std, cfg.dataset.seed);
    let sample = cfg.simulate.sample_every.max(1);

    let mut rows =
        String::from("step,time,kinetic1,kinetic2,potential,enstrophy1,enstrophy2\n");
    let mut log = |step: usize, state: &QGState| -> Result<()> {
        let d = solver.diagnostics(state);
        let vals =
            [d.kinetic[0], d.kinetic[1], d.potential, d.enstrophy[0], d.enstrophy[1]];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!("diagnostics blew up at step {step}")));
        }
        rows.push_str(&format!(
            "{step},{},{},{},{},{},{}\n",
            state.time, vals[0], vals[1], vals[2], vals[3], vals[4]
        ));
        Ok(())
    };

    log(0, &state)?;
    write_field_snapshot(&dir, "initial", &solver.snapshot(&state).psi)?;
    for step in 1..=cfg.simulate.steps {
        solver.step(&mut state)?;
        if step % sample == 0 {
            log(step, &state)?;
        }
    }
    drop(log);
    write_field_snapshot(&dir, "final", &solver.snapshot(&state).psi)?;
    fs::write(dir.join("diagnostics.csv"), rows)?;
    let fp = config_fingerprint(canon, None, None);
    write_run_stamp(&dir, "simulate", &fp, canon)?;
    println!("simulated {} steps into {}", cfg.simulate.steps, dir.display());
    Ok(())
}

/// Generate the tracer observation dataset into `<out>/data`.
pub fn cmd_gen_data(cfg: &AppConfig, canon: &serde_json::Value, out_dir: &Path) -> Result<()> {
    let dir = out_dir.join("data");
    let manifest = generate_to_dir(&cfg.qg, &cfg.dataset, &dir)?;
    let fp = config_fingerprint(canon, Some(&manifest), None);
    write_run_stamp(&dir, "gen-data", &fp, canon)?;
    println!("wrote {} records to {}", manifest.n_records(), dir.display());
    Ok(())
}

/// Train the surrogate on a dataset's training split and save weights plus
/// the per-epoch loss log.
pub fn cmd_train(
    cfg: &AppConfig,
    canon: &serde_json::Value,
    out_dir: &Path,
    data: &Path,
) -> Result<()> {
    let ds = load_dataset(data)?;
    let arrays = training_arrays(ds.split_records(Split::Train)?);
    cfg.model.validate(arrays.grid)?;
    let mut s = Surrogate::init(cfg.model.clone(), arrays.grid, arrays.tracer_count)?;
    let t0 = Instant::now();
    let report = train_full(&mut s, &arrays, 0..arrays.fields.len())?;
    let secs = t0.elapsed().as_secs_f64();

    let dir = out_dir.join("train");
    fs::create_dir_all(&dir)?;
    let weights = s.to_weights();
    weights.save(&dir.join("surrogate.weights"))?;
    write_json(&dir.join("train_log.json"), &report)?;
    let fp = config_fingerprint(canon, Some(&ds.manifest), Some(&weights.meta));
    write_run_stamp(&dir, "train", &fp, canon)?;
    println!(
        "trained in {secs:.1}s over {} logged epochs; weights at {}",
        report.entries.len(),
        dir.join("surrogate.weights").display()
    );
    if report.diverged {
        return Err(Error::Numerics(
            "training diverged; weights roll back to the last stable epoch".into(),
        ));
    }
    Ok(())
}

/// Filter the scored split's observed positions into flow estimates.
pub fn cmd_assimilate(
    cfg: &AppConfig,
    canon: &serde_json::Value,
    out_dir: &Path,
    data: &Path,
    weights_path: &Path,
) -> Result<()> {
    let ds = load_dataset(data)?;
    let w = ModelWeights::load(weights_path)?;
    let s = Surrogate::from_weights(&w)?;
    let records = scored_records(&ds, &cfg.eval)?;
    let positions: Vec<Vec<[f64; 2]>> = records.iter().map(|r| r.positions.clone()).collect();

    let t0 = Instant::now();
    let out = assimilate(&s, &positions, None, None)?;
    let secs = t0.elapsed().as_secs_f64();

    let dir = out_dir.join("assimilate");
    fs::create_dir_all(&dir)?;
    let series = posterior_series("lacgkn", &out, records)?;
    write_series_csv(&dir.join("series.csv"), std::slice::from_ref(&series))?;
    for &k in &cfg.eval.snapshot_steps {
        if k < records.len() {
            write_field_snapshot(&dir, &format!("posterior_{k:05}"), &tensor_to_fields(&out.fields[k]))?;
            write_field_snapshot(&dir, &format!("truth_{k:05}"), &records[k].psi)?;
        }
    }
    let fp = config_fingerprint(canon, Some(&ds.manifest), Some(&w.meta));
    let report = MetricsReport {
        fingerprint: fp.clone(),
        spinup: cfg.eval.spinup,
        summaries: vec![series.summarize(cfg.eval.spinup, secs)?],
    };
    write_summary_csv(&dir.join("summary.csv"), &report)?;
    write_timings_csv(&dir.join("timings.csv"), &report)?;
    write_json(&dir.join("report.json"), &report)?;
    write_run_stamp(&dir, "assimilate", &fp, canon)?;
    println!(
        "assimilated {} records in {secs:.1}s; two-layer RMSE {:.4}",
        records.len(),
        report.summaries[0].both
    );
    Ok(())
}

/// Assimilate up to a start record, then roll the learned dynamics forward
/// with no observations, scoring against the later records. A persistence
/// series from the start record rides along for comparison.
pub fn cmd_forecast(
    cfg: &AppConfig,
    canon: &serde_json::Value,
    out_dir: &Path,
    data: &Path,
    weights_path: &Path,
    start: usize,
    horizon: usize,
) -> Result<()> {
    let ds = load_dataset(data)?;
    let w = ModelWeights::load(weights_path)?;
    let s = Surrogate::from_weights(&w)?;
    let records = ds.split_records(cfg.eval.split)?;
    if horizon == 0 {
        return Err(Error::Config("forecast horizon must be at least 1".into()));
    }
    if start + horizon >= records.len() {
        return Err(Error::Config(format!(
            "start {start} + horizon {horizon} runs past the {}-record split",
            records.len()
        )));
    }

    let positions: Vec<Vec<[f64; 2]>> =
        records[..=start].iter().map(|r| r.positions.clone()).collect();
    let out = assimilate(&s, &positions, None, None)?;
    let z0: Vec<f64> = out.posteriors[start].mu.iter().copied().collect();

    let t0 = Instant::now();
    let steps = forecast(&s, &records[start].positions, &z0, horizon)?;
    let secs = t0.elapsed().as_secs_f64();

    let mut fc = Vec::with_capacity(horizon);
    let mut pers = Vec::with_capacity(horizon);
    for lead in 1..=horizon {
        let truth = &records[start + lead];
        let est = tensor_to_fields(&steps[lead - 1].fields);
        let tr = tracer_rmse(&steps[lead - 1].positions, &truth.positions)?;
        fc.push(field_step(lead, &est, truth, Some(tr), None)?);
        let tr = tracer_rmse(&records[start].positions, &truth.positions)?;
        pers.push(field_step(lead, &records[start].psi, truth, Some(tr), None)?);
    }
    let series = vec![
        MethodSeries { method: "lacgkn_forecast".into(), steps: fc },
        MethodSeries { method: "persistence".into(), steps: pers },
    ];

    let dir = out_dir.join("forecast");
    fs::create_dir_all(&dir)?;
    write_series_csv(&dir.join("series.csv"), &series)?;
    for &lead in &cfg.eval.snapshot_steps {
        if lead >= 1 && lead <= horizon {
            write_field_snapshot(
                &dir,
                &format!("forecast_{lead:05}"),
                &tensor_to_fields(&steps[lead - 1].fields),
            )?;
            write_field_snapshot(&dir, &format!("truth_{lead:05}"), &records[start + lead].psi)?;
        }
    }
    let fp = config_fingerprint(canon, Some(&ds.manifest), Some(&w.meta));
    let report = MetricsReport {
        fingerprint: fp.clone(),
        spinup: 0,
        summaries: vec![
            series[0].summarize(0, secs)?,
            series[1].summarize(0, 0.0)?,
        ],
    };
    write_summary_csv(&dir.join("summary.csv"), &report)?;
    write_timings_csv(&dir.join("timings.csv"), &report)?;
    write_json(&dir.join("report.json"), &report)?;
    write_run_stamp(&dir, "forecast", &fp, canon)?;
    println!(
        "forecast {horizon} steps from record {start}; lead-1 two-layer RMSE {:.4}",
        series[0].steps[0].both
    );
    Ok(())
}

struct EvalRun {
    series: Vec<MethodSeries>,
    summaries: Vec<crate::eval::MethodSummary>,
}

impl EvalRun {
    fn push(&mut self, series: MethodSeries, spinup: usize, secs: f64) -> Result<()> {
        self.summaries.push(series.summarize(spinup, secs)?);
        self.series.push(series);
        Ok(())
    }
}

/// Score the surrogate filter, its one-step forecasts, and every baseline
/// on the same split, writing the comparison tables.
pub fn cmd_evaluate(
    cfg: &AppConfig,
    canon: &serde_json::Value,
    out_dir: &Path,
    data: &Path,
    weights_path: &Path,
) -> Result<()> {
    let ds = load_dataset(data)?;
    let w = ModelWeights::load(weights_path)?;
    let s = Surrogate::from_weights(&w)?;
    let records = scored_records(&ds, &cfg.eval)?;
    let train_records = ds.split_records(Split::Train)?;
    let spinup = cfg.eval.spinup;
    let qg_true = ds.manifest.qg_params()?;
    let data_grid = ds.manifest.data_grid();
    let warmup: u64 = parse_field("warmup_steps", &ds.manifest.warmup_steps)?;
    let obs_substeps: usize = parse_field("obs_subsample", &ds.manifest.obs_subsample)?;
    let tracer_sigma: f64 = parse_field("tracer_sigma", &ds.manifest.tracer_sigma)?;
    let init_std: f64 = parse_field("init_std", &ds.manifest.init_std)?;
    let mut run = EvalRun { series: Vec::new(), summaries: Vec::new() };

    // conditioning filter and its one-step forecasts
    let positions: Vec<Vec<[f64; 2]>> = records.iter().map(|r| r.positions.clone()).collect();
    let t0 = Instant::now();
    let out = assimilate(&s, &positions, None, None)?;
    let lac_secs = t0.elapsed().as_secs_f64();
    run.push(posterior_series("lacgkn", &out, records)?, spinup, lac_secs)?;

    let t0 = Instant::now();
    let mut fc_steps = Vec::with_capacity(records.len() - 1);
    for k in 0..records.len() - 1 {
        let z: Vec<f64> = out.posteriors[k].mu.iter().copied().collect();
        let step = forecast(&s, &records[k].positions, &z, 1)?.pop().expect("one step");
        let truth = &records[k + 1];
        let tr = tracer_rmse(&step.positions, &truth.positions)?;
        fc_steps.push(field_step(k + 1, &tensor_to_fields(&step.fields), truth, Some(tr), None)?);
    }
    let fc_secs = t0.elapsed().as_secs_f64();
    run.push(MethodSeries { method: "lacgkn_forecast".into(), steps: fc_steps }, spinup, fc_secs)?;

    // persistence: the previous record forecasts the next
    let mut pers = Vec::with_capacity(records.len() - 1);
    for k in 0..records.len() - 1 {
        let truth = &records[k + 1];
        let tr = tracer_rmse(&records[k].positions, &truth.positions)?;
        pers.push(field_step(k + 1, &records[k].psi, truth, Some(tr), None)?);
    }
    run.push(MethodSeries { method: "persistence".into(), steps: pers }, spinup, 0.0)?;

    // climatology of the training split as a constant posterior
    let clim = Climatology::from_fields(train_records.iter().map(|r| &r.psi))?;
    let mut clim_steps = Vec::with_capacity(records.len());
    for (k, rec) in records.iter().enumerate() {
        clim_steps.push(field_step(k, &clim.mean, rec, None, None)?);
    }
    run.push(MethodSeries { method: "climatology".into(), steps: clim_steps }, spinup, 0.0)?;

    // ensemble filter on the solver grid, scored on the stored grid
    let mut ecfg = cfg.ensemble.clone();
    ecfg.substeps = obs_substeps;
    ecfg.tracer_sigma = tracer_sigma;
    let base = spun_base(&qg_true, init_std, warmup, ecfg.seed ^ 0xBA5E)?;
    let mut filter =
        QgEnsembleFilter::init(qg_true.clone(), ecfg.clone(), &base, 1e-3, &records[0].positions)?;
    let stride = qg_true.n / data_grid;
    let t0 = Instant::now();
    let mut ek_steps = Vec::with_capacity(records.len());
    let est = stride_fields(&filter.mean_fields(), stride);
    let tr = tracer_rmse(&filter.mean_positions()?, &records[0].positions)?;
    ek_steps.push(field_step(0, &est, &records[0], Some(tr), Some(filter.field_spread()))?);
    for (k, rec) in records.iter().enumerate().skip(1) {
        filter.assimilate_step(&rec.positions)?;
        let est = stride_fields(&filter.mean_fields(), stride);
        let tr = tracer_rmse(&filter.mean_positions()?, &rec.positions)?;
        ek_steps.push(field_step(k, &est, rec, Some(tr), Some(filter.field_spread()))?);
    }
    let ek_secs = t0.elapsed().as_secs_f64();
    run.push(MethodSeries { method: "eakf".into(), steps: ek_steps }, spinup, ek_secs)?;

    // interpolation baseline on the stored grid, with matched damping
    let mut oi_params = qg_true.clone();
    if data_grid != qg_true.n {
        oi_params.n = data_grid;
        oi_params.nu =
            hyperviscosity_matching(data_grid, qg_true.n, qg_true.nu, qg_true.hyper_order);
    }
    let mut oicfg = cfg.oi.clone();
    oicfg.substeps = obs_substeps;
    let slope = regression_slope(
        &train_records.iter().map(|r| r.psi.clone()).collect::<Vec<_>>(),
    )?;
    let oi_base = spun_base(&oi_params, init_std, warmup, cfg.ensemble.seed ^ 0x01AF)?;
    let mut oi = OiFilter::new(oi_params, oicfg, oi_base, slope)?;
    let t0 = Instant::now();
    let mut oi_steps = Vec::with_capacity(records.len());
    oi_steps.push(field_step(0, &oi.fields(), &records[0], None, None)?);
    oi.assimilate_step(&records[0].positions)?;
    for (k, rec) in records.iter().enumerate().skip(1) {
        oi.assimilate_step(&rec.positions)?;
        oi_steps.push(field_step(k, &oi.fields(), rec, None, None)?);
    }
    let oi_secs = t0.elapsed().as_secs_f64();
    run.push(MethodSeries { method: "oi".into(), steps: oi_steps }, spinup, oi_secs)?;

    let dir = out_dir.join("evaluate");
    fs::create_dir_all(&dir)?;
    write_series_csv(&dir.join("series.csv"), &run.series)?;
    for &k in &cfg.eval.snapshot_steps {
        if k < records.len() {
            write_field_snapshot(&dir, &format!("lacgkn_{k:05}"), &tensor_to_fields(&out.fields[k]))?;
            write_field_snapshot(&dir, &format!("truth_{k:05}"), &records[k].psi)?;
        }
    }
    let fp = config_fingerprint(canon, Some(&ds.manifest), Some(&w.meta));
    let report = MetricsReport { fingerprint: fp.clone(), spinup, summaries: run.summaries };
    write_summary_csv(&dir.join("summary.csv"), &report)?;
    write_timings_csv(&dir.join("timings.csv"), &report)?;
    write_json(&dir.join("report.json"), &report)?;
    write_run_stamp(&dir, "evaluate", &fp, canon)?;
    for s in &report.summaries {
        println!(
            "{:>16}: two-layer RMSE {:.4} over {} steps ({:.1}s)",
            s.method, s.both, s.steps_scored, s.wall_seconds
        );
    }
    Ok(())
}

/// Wall-clock comparison per assimilation step: the surrogate filter against
/// the ensemble baseline across tracer counts, latent-update cost across
/// grids, and ensemble cost across sizes.
pub fn cmd_bench(
    cfg: &AppConfig,
    canon: &serde_json::Value,
    out_dir: &Path,
    data: &Path,
    weights_path: &Path,
) -> Result<()> {
    let ds = load_dataset(data)?;
    let w = ModelWeights::load(weights_path)?;
    let s = Surrogate::from_weights(&w)?;
    let records = ds.split_records(cfg.eval.split)?;
    let cycles = cfg.bench.cycles.max(1).min(records.len().saturating_sub(1));
    if cycles == 0 {
        return Err(Error::Config("benchmark needs at least two records".into()));
    }
    let repeats = cfg.bench.repeats.max(1);
    let qg_true = ds.manifest.qg_params()?;
    let data_grid = ds.manifest.data_grid();
    let full_count = ds.manifest.tracer_count();
    let warmup: u64 = parse_field("warmup_steps", &ds.manifest.warmup_steps)?;
    let obs_substeps: usize = parse_field("obs_subsample", &ds.manifest.obs_subsample)?;
    let tracer_sigma: f64 = parse_field("tracer_sigma", &ds.manifest.tracer_sigma)?;
    let init_std: f64 = parse_field("init_std", &ds.manifest.init_std)?;
    let full_obs: Vec<Vec<[f64; 2]>> =
        records[..=cycles].iter().map(|r| r.positions.clone()).collect();

    let mut ecfg = cfg.ensemble.clone();
    ecfg.substeps = obs_substeps;
    ecfg.tracer_sigma = tracer_sigma;
    let base = spun_base(&qg_true, init_std, warmup, ecfg.seed ^ 0xBA5E)?;

    let mut rows = Vec::new();
    for &count in &cfg.bench.tracer_counts {
        if count == 0 || count > full_count {
            return Err(Error::Config(format!(
                "benchmark tracer count {count} exceeds the dataset's {full_count}"
            )));
        }
        let ids = choose_subset(full_count, count, cfg.model.seed);
        let obs: Vec<Vec<[f64; 2]>> =
            full_obs.iter().map(|ps| ids.iter().map(|&i| ps[i]).collect()).collect();

        let sec = median_seconds_per_step(repeats, || {
            assimilate(&s, &obs, Some(&ids), None)?;
            Ok(cycles)
        })?;
        rows.push(BenchRow {
            method: "lacgkn".into(),
            grid: data_grid,
            tracer_count: count,
            ensemble: 0,
            cycles,
            seconds_per_step: sec,
        });

        let mut filter =
            QgEnsembleFilter::init(qg_true.clone(), ecfg.clone(), &base, 1e-3, &obs[0])?;
        let mut next = 1usize;
        let sec = median_seconds_per_step(repeats, || {
            for _ in 0..cycles {
                filter.assimilate_step(&obs[next])?;
                next = if next == cycles { 1 } else { next + 1 };
            }
            Ok(cycles)
        })?;
        rows.push(BenchRow {
            method: "eakf".into(),
            grid: qg_true.n,
            tracer_count: count,
            ensemble: ecfg.n_e,
            cycles,
            seconds_per_step: sec,
        });
    }

    // latent update alone, on fresh weights, to expose grid dependence
    let emb: Vec<nalgebra::DVector<f64>> = full_obs
        .iter()
        .map(|ps| nalgebra::DVector::from_vec(angular_embed_flat(ps)))
        .collect();
    for &g in &cfg.bench.grids {
        let mut sg = Surrogate::init(cfg.model.clone(), g, full_count)?;
        // fresh weights cost the same as trained ones; the noise calibration
        // is a grid-independent table, so borrow the trained one
        for key in ["const.sigma1_full", "const.sigma1_pooled"] {
            if let Ok(t) = s.params.get(key) {
                sg.params.insert(key, t.clone());
            }
        }
        let init = LatentPosterior::spherical(sg.d_z(), 0.1);
        let sec = median_seconds_per_step(repeats, || {
            run_filter(
                |k, _| sg.eval_coefficients(&full_obs[k]),
                &emb,
                init.clone(),
            )?;
            Ok(cycles)
        })?;
        rows.push(BenchRow {
            method: "lacgkn_filter".into(),
            grid: g,
            tracer_count: full_count,
            ensemble: 0,
            cycles,
            seconds_per_step: sec,
        });
    }

    for &n_e in &cfg.bench.ensemble_sizes {
        let mut sized = ecfg.clone();
        sized.n_e = n_e;
        let mut filter =
            QgEnsembleFilter::init(qg_true.clone(), sized, &base, 1e-3, &full_obs[0])?;
        let mut next = 1usize;
        let sec = median_seconds_per_step(repeats, || {
            for _ in 0..cycles {
                filter.assimilate_step(&full_obs[next])?;
                next = if next == cycles { 1 } else { next + 1 };
            }
            Ok(cycles)
        })?;
        rows.push(BenchRow {
            method: "eakf".into(),
            grid: qg_true.n,
            tracer_count: full_count,
            ensemble: n_e,
            cycles,
            seconds_per_step: sec,
        });
    }

    let dir = out_dir.join("bench");
    fs::create_dir_all(&dir)?;
    write_bench_csv(&dir.join("bench.csv"), &rows)?;
    let fp = config_fingerprint(canon, Some(&ds.manifest), Some(&w.meta));
    write_run_stamp(&dir, "bench", &fp, canon)?;
    for r in &rows {
        println!(
            "{:>14} grid {:>3} tracers {:>3} ensemble {:>3}: {:.6}s per step",
            r.method, r.grid, r.tracer_count, r.ensemble, r.seconds_per_step
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_patch_nested_keys_and_reject_unknown_ones() {
        let (cfg, canon) = load_config(
            None,
            &["qg.n=64".into(), "model.rank=16".into(), "eval.split=\"val\"".into()],
            Some(11),
            Some(2),
        )
        .unwrap();
        assert_eq!(cfg.qg.n, 64);
        assert_eq!(cfg.model.rank, 16);
        assert_eq!(cfg.eval.split, Split::Val);
        assert_eq!(cfg.dataset.seed, 11);
        assert_eq!(cfg.model.seed, 11);
        assert_eq!(cfg.ensemble.seed, 11);
        assert_eq!(cfg.ensemble.threads, 2);
        assert_eq!(canon["qg"]["n"], serde_json::json!(64));

        assert!(matches!(
            load_config(None, &["qg.wavelength=3".into()], None, None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            load_config(None, &["qg.n".into()], None, None),
            Err(Error::Config(_))
        ));
        assert!(matches!(load_config(None, &[], None, Some(0)), Err(Error::Config(_))));
    }

    #[test]
    fn config_files_override_defaults_and_bad_values_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        fs::write(&path, r#"{ "dataset": { "tracer_count": 4 } }"#).unwrap();
        let (cfg, _) = load_config(Some(&path), &[], None, None).unwrap();
        assert_eq!(cfg.dataset.tracer_count, 4);
        assert_eq!(cfg.qg.n, QGParams::default().n);

        fs::write(&path, r#"{ "dataset": { "tracer_count": "many" } }"#).unwrap();
        assert!(matches!(load_config(Some(&path), &[], None, None), Err(Error::Config(_))));
        assert!(matches!(
            load_config(Some(&dir.path().join("absent.json")), &[], None, None),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn strided_fields_match_the_dataset_sampling() {
        let full = Array2::from_shape_fn((8, 8), |(iy, ix)| (iy * 8 + ix) as f64);
        let strided = stride_fields(&[full.clone(), full.clone()], 2);
        assert_eq!(strided[0].dim(), (4, 4));
        assert_eq!(strided[0][[1, 2]], full[[2, 4]]);
        let same = stride_fields(&[full.clone(), full.clone()], 1);
        assert_eq!(same[0], full);
    }
}
