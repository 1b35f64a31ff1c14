use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use coprefl_core::downstream::{pct, pct2, SuiteReport};
use coprefl_core::io::{load_model, save_model};
use serde::Serialize;
use thiserror::Error;

use crate::config::{validate_gamma, ConfigError, ExperimentConfig, Method};
use crate::pipeline::{self, Prepared};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("run failed: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Invalid(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<coprefl_core::Error> for CliError {
    fn from(e: coprefl_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Overrides applied on top of the loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
}

pub fn load_config(path: &Path, overrides: &Overrides) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodRecord {
    pub method: String,
    pub task_classes: Vec<Vec<usize>>,
}

/// Everything needed to reproduce a run directory.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub outputs: Vec<String>,
    pub methods: Vec<MethodRecord>,
    pub timings: Vec<PhaseTiming>,
}

impl RunManifest {
    fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            outputs: Vec::new(),
            methods: Vec::new(),
            timings: Vec::new(),
        }
    }

    fn write(&self, dir: &Path) -> CliResult<()> {
        let file = File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self).map_err(std::io::Error::other)?;
        fs::write(dir.join("config.toml"), self.config.to_toml_string())?;
        Ok(())
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
        let start = Instant::now();
        let out = f()?;
        self.timings.push(PhaseTiming {
            phase: phase.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

fn create_out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Invalid(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(
    dir: &Path,
    name: &str,
    manifest: &mut RunManifest,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> CliResult<PathBuf> {
    let path = dir.join(name);
    let mut out = BufWriter::new(File::create(&path)?);
    f(&mut out)?;
    out.flush()?;
    manifest.outputs.push(name.to_string());
    Ok(path)
}

fn write_suite(
    dir: &Path,
    prefix: &str,
    report: &SuiteReport,
    manifest: &mut RunManifest,
) -> CliResult<()> {
    write_file(dir, &format!("{prefix}suite.json"), manifest, |w| {
        report.write_json(w)
    })?;
    write_file(dir, &format!("{prefix}tasks.csv"), manifest, |w| {
        report.write_tasks_csv(w)
    })?;
    write_file(dir, &format!("{prefix}histogram.csv"), manifest, |w| {
        report.histogram.write_csv(w)
    })?;
    Ok(())
}

/// Pre-trains with `pretrain.method`; writes `model.bin`, `history.csv` and
/// the manifest.
pub fn cmd_pretrain(config_path: &Path, out_dir: &Path, overrides: &Overrides) -> CliResult<()> {
    let cfg = load_config(config_path, overrides)?;
    create_out_dir(out_dir)?;
    let mut manifest = RunManifest::new("pretrain", &cfg);
    manifest.outputs = vec!["model.bin".into(), "history.csv".into()];
    manifest.write(out_dir)?;

    let prepared = manifest.time("prepare", || Ok(pipeline::prepare(&cfg)?))?;
    let method = cfg.pretrain.method;
    let result = manifest.time(method.name(), || {
        Ok(pipeline::pretrain(&cfg, &prepared, method)?)
    })?;
    for (round, r) in result.history.iter().enumerate() {
        log::info!(
            "round {}: total {:.5} variance {:.6} combined {:.5}",
            round + 1,
            r.total,
            r.variance,
            r.combined
        );
    }
    save_model(
        &out_dir.join("model.bin"),
        &prepared.spec,
        &result.final_params,
    )?;
    let mut history = BufWriter::new(File::create(out_dir.join("history.csv"))?);
    result.write_history_csv(&mut history)?;
    history.flush()?;
    manifest.write(out_dir)?;
    Ok(())
}

/// Runs the downstream suite from a saved model.
pub fn cmd_downstream(
    config_path: &Path,
    model_path: &Path,
    out_dir: &Path,
    overrides: &Overrides,
) -> CliResult<()> {
    let cfg = load_config(config_path, overrides)?;
    let (spec, params) = load_model(model_path).map_err(|e| {
        CliError::Invalid(format!("cannot load model {}: {e}", model_path.display()))
    })?;
    let expected = cfg.model_spec();
    if spec.layer_dims() != expected.layer_dims() {
        return Err(CliError::Invalid(format!(
            "model layers {:?} do not match the config's {:?}",
            spec.layer_dims(),
            expected.layer_dims()
        )));
    }
    create_out_dir(out_dir)?;
    let mut manifest = RunManifest::new("downstream", &cfg);
    manifest.write(out_dir)?;
    let prepared = manifest.time("prepare", || Ok(pipeline::prepare(&cfg)?))?;
    let report = manifest.time("downstream", || {
        Ok(pipeline::downstream(&cfg, &prepared, &params)?)
    })?;
    write_suite(out_dir, "", &report, &mut manifest)?;
    manifest.methods.push(MethodRecord {
        method: model_path.display().to_string(),
        task_classes: report.task_classes.clone(),
    });
    manifest.write(out_dir)?;
    Ok(())
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub method: Method,
    pub report: SuiteReport,
}

pub fn run_comparison(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    methods: &[Method],
) -> CliResult<Vec<ComparisonRow>> {
    methods
        .iter()
        .map(|&method| {
            let result = pipeline::pretrain(cfg, prepared, method)?;
            let report = pipeline::downstream(cfg, prepared, &result.final_params)?;
            Ok(ComparisonRow { method, report })
        })
        .collect()
}

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "method,acc,variance,worst10,worst20,worst30")?;
    for row in rows {
        let r = &row.report;
        writeln!(
            out,
            "{},{:.2},{:.2},{:.2},{:.2},{:.2}",
            row.method.name(),
            pct(r.mean_acc),
            pct2(r.acc_variance),
            pct(r.worst_10),
            pct(r.worst_20),
            pct(r.worst_30)
        )?;
    }
    Ok(())
}

/// Pre-trains every method in `pretrain.methods` and evaluates each on the
/// same downstream tasks.
pub fn cmd_compare(config_path: &Path, out_dir: &Path, overrides: &Overrides) -> CliResult<()> {
    let cfg = load_config(config_path, overrides)?;
    let methods = cfg.pretrain.methods.clone();
    if methods.len() < 2 {
        return Err(CliError::Invalid(
            "`pretrain.methods` must list at least two methods to compare".into(),
        ));
    }
    create_out_dir(out_dir)?;
    let mut manifest = RunManifest::new("compare", &cfg);
    manifest.write(out_dir)?;
    let prepared = manifest.time("prepare", || Ok(pipeline::prepare(&cfg)?))?;
    let mut rows = Vec::with_capacity(methods.len());
    for &method in &methods {
        let mut batch =
            manifest.time(method.name(), || run_comparison(&cfg, &prepared, &[method]))?;
        rows.append(&mut batch);
    }
    write_file(out_dir, "comparison.csv", &mut manifest, |w| {
        write_comparison_csv(&rows, w)
    })?;
    for row in &rows {
        let name = row.method.name();
        write_file(
            out_dir,
            &format!("histogram_{name}.csv"),
            &mut manifest,
            |w| row.report.histogram.write_csv(w),
        )?;
        write_file(out_dir, &format!("tasks_{name}.csv"), &mut manifest, |w| {
            row.report.write_tasks_csv(w)
        })?;
        manifest.methods.push(MethodRecord {
            method: name.to_string(),
            task_classes: row.report.task_classes.clone(),
        });
    }
    manifest.write(out_dir)?;
    Ok(())
}

pub fn write_gamma_csv<W: Write>(rows: &[(f64, SuiteReport)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "gamma,acc,variance")?;
    for (gamma, r) in rows {
        writeln!(
            out,
            "{gamma},{:.2},{:.2}",
            pct(r.mean_acc),
            pct2(r.acc_variance)
        )?;
    }
    Ok(())
}

/// Re-runs pre-training and the downstream suite once per balancer value,
/// holding every seed fixed. Non-meta methods in the config fall back to
/// Scenario I.
pub fn cmd_gamma_sweep(
    config_path: &Path,
    gammas: &[f64],
    out_dir: &Path,
    overrides: &Overrides,
) -> CliResult<()> {
    let cfg = load_config(config_path, overrides)?;
    if gammas.is_empty() {
        return Err(CliError::Invalid("at least one gamma is required".into()));
    }
    for &g in gammas {
        validate_gamma("--gammas", g)?;
    }
    let method = if cfg.pretrain.method.is_coprefl() {
        cfg.pretrain.method
    } else {
        Method::CopreflS1
    };
    create_out_dir(out_dir)?;
    let mut manifest = RunManifest::new("gamma-sweep", &cfg);
    manifest.write(out_dir)?;
    let prepared = manifest.time("prepare", || Ok(pipeline::prepare(&cfg)?))?;
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let mut swept = cfg.clone();
        swept.pretrain.gamma = gamma;
        let report = manifest.time(&format!("gamma={gamma}"), || {
            let result = pipeline::pretrain(&swept, &prepared, method)?;
            Ok(pipeline::downstream(
                &swept,
                &prepared,
                &result.final_params,
            )?)
        })?;
        manifest.methods.push(MethodRecord {
            method: format!("{}(gamma={gamma})", method.name()),
            task_classes: report.task_classes.clone(),
        });
        rows.push((gamma, report));
    }
    write_file(out_dir, "gamma_sweep.csv", &mut manifest, |w| {
        write_gamma_csv(&rows, w)
    })?;
    manifest.write(out_dir)?;
    Ok(())
}
