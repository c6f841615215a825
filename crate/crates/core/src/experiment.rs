//! Configuration-driven runs, `(d, ‖μ‖)` sweeps and check suites, with their
//! CSV and JSON output.
//!
//! A run draws everything from named streams of one base seed, so the seed and
//! the config fully determine every output byte. Sweep cells derive their own
//! seeds from the cell coordinates and are sorted before writing, which makes
//! the heatmap independent of the thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{
    generate_dataset, generate_multiclass, make_class_signals, make_signals, reference_init_variance, snr, DataConfig,
    Dataset, SignalBasis, SignalMode,
};
use crate::error::{Error, Result};
use crate::model::{init_params, make_head, HeadNorm, ModelState};
use crate::rng;
use crate::theory::{
    classify_regime, g_linearity, good_run_check, measure_grokking, softmax_bound_check, stage_boundary,
    suppression_row, token_score_check, verify_update_identity, GLinearity, GapQuantity, GoodRunTolerances, InitDraw, LinearFit,
    Regime, RegimeThresholds, SoftmaxBoundReport, TheoryReport,
};
use crate::trainer::{
    finite_diff_grad, gradients, multiclass_finite_diff, multiclass_loss_and_grads, relative_error, train,
    MulticlassState, SubspaceModel, TestSet, TrainConfig, TrainTrace,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Everything one run needs. Unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
    pub mu_norm: f64,
    pub sigma_eps: f64,
    pub eta: f64,
    pub rho: f64,
    #[serde(default = "defaults::weak_same")]
    pub n_weak_same: usize,
    pub alpha: f64,
    pub steps: usize,
    #[serde(default = "defaults::log_every")]
    pub log_every: usize,
    #[serde(default = "defaults::test_size")]
    pub test_size: usize,
    #[serde(default = "defaults::fit")]
    pub fit_threshold: f64,
    #[serde(default = "defaults::gen")]
    pub gen_threshold: f64,
    /// Overrides `init_scale · sqrt(reference variance)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_p: Option<f64>,
    #[serde(default = "defaults::init_scale")]
    pub init_scale: f64,
    #[serde(default = "defaults::delta")]
    pub delta: f64,
    #[serde(default)]
    pub head_norm: HeadNorm,
    #[serde(default)]
    pub signal_mode: SignalMode,
    /// Samples whose softmax rows go into the trace. Default: first clean and
    /// first noisy sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracked_samples: Option<Vec<usize>>,
    #[serde(default)]
    pub regime_thresholds: RegimeThresholds,
    #[serde(default = "defaults::etf_classes")]
    pub etf_classes: usize,
    #[serde(default = "defaults::etf_samples")]
    pub etf_samples: usize,
}

mod defaults {
    pub fn weak_same() -> usize {
        1
    }
    pub fn log_every() -> usize {
        10
    }
    pub fn test_size() -> usize {
        1000
    }
    pub fn fit() -> f64 {
        1.0
    }
    pub fn gen() -> f64 {
        0.95
    }
    pub fn init_scale() -> f64 {
        2.0
    }
    pub fn delta() -> f64 {
        0.01
    }
    pub fn etf_classes() -> usize {
        2
    }
    pub fn etf_samples() -> usize {
        100_000
    }
}

/// Named configurations for the three regimes.
pub const PRESETS: [&str; 3] = ["harmful", "benign", "not-overfitting"];

impl ExperimentConfig {
    /// `n = 20, T = 8, σ_ε = 1, η = 0.2, ρ = 0.1, α = 5e−3` at the given
    /// `(d, ‖μ‖)` and step budget.
    pub fn base(d: usize, mu_norm: f64, steps: usize) -> Self {
        ExperimentConfig {
            n: 20,
            t: 8,
            d,
            mu_norm,
            sigma_eps: 1.0,
            eta: 0.2,
            rho: 0.1,
            n_weak_same: defaults::weak_same(),
            alpha: 5e-3,
            steps,
            log_every: defaults::log_every(),
            test_size: defaults::test_size(),
            fit_threshold: defaults::fit(),
            gen_threshold: defaults::gen(),
            sigma_w: None,
            sigma_p: None,
            init_scale: defaults::init_scale(),
            delta: defaults::delta(),
            head_norm: HeadNorm::InverseMu,
            signal_mode: SignalMode::RandomOrthogonal,
            tracked_samples: None,
            regime_thresholds: RegimeThresholds::default(),
            etf_classes: defaults::etf_classes(),
            etf_samples: defaults::etf_samples(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "harmful" => Ok(Self::base(5000, 5.0, 5000)),
            "benign" => Ok(Self::base(2000, 20.0, 5000)),
            // stops once the clean samples are fit and the noisy ones are not
            "not-overfitting" => Ok(Self::base(1000, 100.0, 500)),
            other => Err(Error::config("preset", format!("unknown preset `{other}`, expected one of {PRESETS:?}"))),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn data(&self) -> DataConfig {
        DataConfig {
            n: self.n,
            t: self.t,
            d: self.d,
            mu_norm: self.mu_norm,
            sigma_eps: self.sigma_eps,
            eta: self.eta,
            rho: self.rho,
            n_weak_same: self.n_weak_same,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            steps: self.steps,
            log_every: self.log_every,
            test_size: self.test_size,
            fit_threshold: self.fit_threshold,
            gen_threshold: self.gen_threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data().validate()?;
        self.train_config().validate()?;
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("init_scale", "must be positive and finite"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta", "must lie in (0, 1)"));
        }
        for (name, v) in [("sigma_w", self.sigma_w), ("sigma_p", self.sigma_p)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::config(name, "must be non-negative and finite"));
                }
            }
        }
        if let Some(list) = &self.tracked_samples {
            if let Some(k) = list.iter().position(|&i| i >= self.n) {
                return Err(Error::config(format!("tracked_samples[{k}]"), format!("must be below n = {}", self.n)));
            }
        }
        if self.etf_classes < 2 {
            return Err(Error::config("etf_classes", "must be at least 2"));
        }
        if self.etf_samples < 1000 {
            return Err(Error::config("etf_samples", "must be at least 1000"));
        }
        Ok(())
    }

    /// `(σ_w, σ_p)`, defaulting to `init_scale` times the reference standard
    /// deviation.
    pub fn scales(&self) -> (f64, f64) {
        let s = self.init_scale * reference_init_variance(&self.data(), self.delta).sqrt();
        (self.sigma_w.unwrap_or(s), self.sigma_p.unwrap_or(s))
    }

    /// Hex FNV-1a of the compact JSON form.
    pub fn hash(&self) -> String {
        format!("{:016x}", rng::fnv1a(serde_json::to_string(self).expect("config serializes").as_bytes()))
    }
}

/// Strict JSON parse that reports the path of the offending field.
fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
    })
}

/// Data, head, initialization and test set for one seed.
pub struct Prepared {
    pub signals: SignalBasis,
    pub dataset: Dataset,
    pub nu: Array1<f64>,
    pub sigma_w: f64,
    pub sigma_p: f64,
    pub model: SubspaceModel,
    pub test: Option<TestSet>,
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        Self::with_test_size(cfg, seed, cfg.test_size)
    }

    pub fn with_test_size(cfg: &ExperimentConfig, seed: u64, test_size: usize) -> Result<Self> {
        cfg.validate()?;
        let data = cfg.data();
        let signals = make_signals(cfg.d, cfg.mu_norm, cfg.signal_mode, &mut rng::stream(seed, rng::SIGNALS))?;
        let dataset = generate_dataset(
            &data,
            &signals,
            &mut rng::stream(seed, rng::DATA),
            &mut rng::stream(seed, rng::LABEL_NOISE),
        )?;
        let nu = make_head(&signals, cfg.head_norm)?;
        let (sigma_w, sigma_p) = cfg.scales();
        let model =
            SubspaceModel::initialize(&dataset, &signals, &nu, sigma_w, sigma_p, &mut rng::stream(seed, rng::INIT))?;
        let test = if test_size > 0 {
            Some(model.test_set(&data, &signals, test_size, &mut rng::stream(seed, rng::TEST))?)
        } else {
            None
        };
        Ok(Prepared { signals, dataset, nu, sigma_w, sigma_p, model, test })
    }

    /// The dense initial state the engine was started from (same stream).
    pub fn dense_init(&self, seed: u64) -> Result<ModelState> {
        let (w, p) = init_params(self.nu.len(), self.sigma_w, self.sigma_p, &mut rng::stream(seed, rng::INIT));
        ModelState::new(w, p, self.nu.clone())
    }
}

/// Compact view of the theory quantities of one run.
#[derive(Clone, Debug, Serialize)]
pub struct Digest {
    pub softmax_bound_pass: bool,
    pub softmax_identity_max_err: f64,
    /// `max_{i,t} |s_t(0) − 1/T|·T`
    pub init_uniformity: f64,
    pub clean_g_pooled: Option<LinearFit>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub config_hash: String,
    pub regime: String,
    pub snr: f64,
    pub steps_completed: usize,
    pub diverged_at: Option<usize>,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub final_train_acc: f64,
    pub final_train_acc_true: f64,
    pub final_test_acc: f64,
    pub tau_fit: Option<usize>,
    pub tau_gen: Option<usize>,
    pub noisy_samples: Vec<usize>,
    /// Samples misclassified against their training label at the last logged step.
    pub misclassified: Vec<usize>,
    pub all_misclassified_noisy: bool,
    pub tracked_samples: Vec<usize>,
    /// Final `s₂` of every noisy sample.
    pub noisy_s2_final: Vec<f64>,
    pub digest: Digest,
}

pub struct RunOutcome {
    pub trace: TrainTrace,
    pub summary: Summary,
    pub dataset: Dataset,
}

impl RunOutcome {
    pub fn diverged(&self) -> bool {
        self.summary.diverged_at.is_some()
    }
}

fn tracked(cfg: &ExperimentConfig, ds: &Dataset) -> Vec<usize> {
    match &cfg.tracked_samples {
        Some(list) => list.clone(),
        None => ds.clean_idx.first().into_iter().chain(ds.noisy_idx.first()).copied().collect(),
    }
}

/// Generate, train and summarize. Divergence is reported in the summary with
/// the partial trace kept.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome> {
    let mut prep = Prepared::new(cfg, seed)?;
    let (trace, diverged_at) = match train(&mut prep.model, &cfg.train_config(), prep.test.as_ref(), &mut []) {
        Ok(t) => (t, None),
        Err(d) => (d.trace, Some(d.step)),
    };
    let summary = summarize(cfg, seed, &prep.dataset, &trace, diverged_at)?;
    Ok(RunOutcome { trace, summary, dataset: prep.dataset })
}

fn summarize(
    cfg: &ExperimentConfig,
    seed: u64,
    ds: &Dataset,
    trace: &TrainTrace,
    diverged_at: Option<usize>,
) -> Result<Summary> {
    let last = trace.last();
    let pick = |f: fn(&crate::trainer::TraceRow) -> f64| last.map_or(f64::NAN, f);
    let misclassified: Vec<usize> = trace.outputs.last().map_or_else(Vec::new, |out| {
        ds.samples
            .iter()
            .zip(out)
            .enumerate()
            .filter(|(_, (s, f))| !crate::model::is_correct(**f, s.y_train))
            .map(|(i, _)| i)
            .collect()
    });
    let noisy_s2_final = trace.probs.last().map_or_else(Vec::new, |p| ds.noisy_idx.iter().map(|&j| p[[j, 1]]).collect());
    let mut bound = SoftmaxBoundReport::default();
    for (dg, p) in trace.diagnostics.iter().zip(&trace.probs) {
        bound.merge(&softmax_bound_check(dg, p));
    }
    let t = cfg.t as f64;
    let init_uniformity =
        trace.probs.first().map_or(f64::NAN, |p| p.iter().fold(0f64, |m, s| m.max((s - 1.0 / t).abs() * t)));
    let clean_g_pooled = clean_g_linearity(trace, ds).ok().map(|g| g.pooled);
    let grok = measure_grokking(&trace.rows, cfg.fit_threshold, cfg.gen_threshold);
    Ok(Summary {
        seed,
        config_hash: cfg.hash(),
        regime: classify_regime(&cfg.data(), cfg.regime_thresholds)?.as_str().to_string(),
        snr: snr(&cfg.data())?,
        steps_completed: last.map_or(0, |r| r.step),
        diverged_at,
        final_train_loss: pick(|r| r.train_loss),
        final_test_loss: pick(|r| r.test_loss),
        final_train_acc: pick(|r| r.train_acc),
        final_train_acc_true: pick(|r| r.train_acc_true),
        final_test_acc: pick(|r| r.test_acc),
        tau_fit: grok.tau_fit,
        tau_gen: grok.tau_gen,
        noisy_samples: ds.noisy_idx.clone(),
        all_misclassified_noisy: misclassified.iter().all(|&i| ds.samples[i].is_noisy()),
        misclassified,
        tracked_samples: tracked(cfg, ds),
        noisy_s2_final,
        digest: Digest {
            softmax_bound_pass: bound.pass(),
            softmax_identity_max_err: bound.identity_max_err,
            init_uniformity,
            clean_g_pooled,
        },
    })
}

fn clean_g_linearity(trace: &TrainTrace, ds: &Dataset) -> Result<GLinearity> {
    g_linearity(trace, &ds.clean_idx, GapQuantity::Lambda, crate::theory::default_window(trace))
}

/// Phase fits for one noisy sample. The first phase ends at the first logged
/// row where the relevant token holds less than `ρ/T`, i.e. `ρ` times its
/// uniform share.
#[derive(Clone, Debug, Serialize)]
pub struct NoisyDynamics {
    pub sample: usize,
    /// `None` when `s₁` never drops that far; the whole trace is then early.
    pub boundary_row: Option<usize>,
    pub boundary_step: Option<usize>,
    /// Logged row where `s₂` starts its final monotone increase.
    pub s2_rise_row: usize,
    /// Mean `g(Λ_{j,t})` over `t = 2..T`, rows `1..=boundary`.
    pub early_lambda: Option<LinearFit>,
    /// Mean `g(Γ_{j,u})` over `u = 3..T`, rows from the boundary on.
    pub late_gamma: Option<LinearFit>,
    /// `g(Γ_{j,1} − log ρ⁻¹)` over the same rows.
    pub late_gamma_relevant: Option<LinearFit>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GDynamics {
    pub clean: GLinearity,
    pub noisy: Vec<NoisyDynamics>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GDynamicsThresholds {
    pub clean_r2: f64,
    pub early_r2: f64,
}

impl Default for GDynamicsThresholds {
    fn default() -> Self {
        GDynamicsThresholds { clean_r2: 0.95, early_r2: 0.90 }
    }
}

impl GDynamics {
    pub fn clean_pass(&self, th: GDynamicsThresholds) -> bool {
        let f = &self.clean.pooled;
        f.slope > 0.0 && f.r2.is_some_and(|r| r >= th.clean_r2)
    }

    pub fn early_pass(&self, th: GDynamicsThresholds) -> bool {
        self.noisy
            .iter()
            .all(|n| n.early_lambda.is_some_and(|f| f.slope < 0.0 && f.r2.is_some_and(|r| r >= th.early_r2)))
    }

    pub fn late_pass(&self) -> bool {
        self.noisy.iter().all(|n| n.late_gamma.is_some_and(|f| f.slope > 0.0))
    }
}

/// Pooled g-fits: clean samples over the pre-saturation window, noisy
/// samples split where their relevant token is suppressed.
pub fn g_dynamics(trace: &TrainTrace, rho: f64) -> Result<GDynamics> {
    let (n, t) = trace.probs.first().map_or((0, 0), |p| p.dim());
    let clean: Vec<usize> = (0..n).filter(|i| !trace.noisy.contains(i)).collect();
    let clean = g_linearity(trace, &clean, GapQuantity::Lambda, crate::theory::default_window(trace))?;
    let rows = trace.rows.len();
    let level = rho / t as f64;
    let noisy = trace
        .noisy
        .iter()
        .map(|&j| {
            let k = suppression_row(trace, j, level);
            let split = k.unwrap_or(rows - 1);
            let fit = |q, lo, hi| g_linearity(trace, &[j], q, (lo, hi)).ok().map(|g| g.pooled);
            NoisyDynamics {
                sample: j,
                boundary_row: k,
                boundary_step: k.map(|k| trace.rows[k].step),
                s2_rise_row: stage_boundary(trace, j),
                early_lambda: fit(GapQuantity::Lambda, 1, split + 1),
                late_gamma: fit(GapQuantity::Gamma, split, rows),
                late_gamma_relevant: fit(GapQuantity::GammaRelevantShifted { rho }, split, rows),
            }
        })
        .collect();
    Ok(GDynamics { clean, noisy })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::config("format", format!("expected csv or json, got `{other}`"))),
        }
    }
}

/// Header and rows of the wide trace table.
pub fn trace_table(trace: &TrainTrace, tracked: &[usize]) -> (Vec<String>, Vec<Vec<f64>>) {
    let t = trace.probs.first().map_or(0, |p| p.ncols());
    let mut header: Vec<String> =
        ["step", "train_loss", "train_acc", "train_acc_true", "test_acc", "lambda_plus", "lambda_minus"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    for &i in tracked {
        header.extend((1..=t).map(|k| format!("sample{i}_s{k}")));
    }
    let rows = trace
        .rows
        .iter()
        .zip(&trace.probs)
        .map(|(r, p)| {
            let mut v = vec![
                r.step as f64,
                r.train_loss,
                r.train_acc,
                r.train_acc_true,
                r.test_acc,
                r.lambda_plus,
                r.lambda_minus,
            ];
            for &i in tracked {
                v.extend(p.row(i).iter().copied());
            }
            v
        })
        .collect();
    (header, rows)
}

fn csv_field(v: f64) -> String {
    format!("{v}")
}

pub fn trace_csv(trace: &TrainTrace, tracked: &[usize]) -> String {
    let (header, rows) = trace_table(trace, tracked);
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        let fields: Vec<String> = r.iter().map(|v| csv_field(*v)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn trace_json(trace: &TrainTrace, tracked: &[usize]) -> String {
    let (header, rows) = trace_table(trace, tracked);
    serde_json::to_string(&json!({ "columns": header, "rows": rows })).expect("trace serializes")
}

/// Paths written by [`run_to_dir`].
#[derive(Clone, Debug, Serialize)]
pub struct RunArtifacts {
    pub trace_path: PathBuf,
    pub summary_path: PathBuf,
    pub config_path: PathBuf,
    pub diverged_at: Option<usize>,
}

pub fn run_to_dir(cfg: &ExperimentConfig, seed: u64, out_dir: &Path, format: OutputFormat) -> Result<RunArtifacts> {
    let outcome = run_experiment(cfg, seed)?;
    fs::create_dir_all(out_dir)?;
    let tracked = &outcome.summary.tracked_samples;
    let trace_path = match format {
        OutputFormat::Csv => {
            let p = out_dir.join("trace.csv");
            fs::write(&p, trace_csv(&outcome.trace, tracked))?;
            p
        }
        OutputFormat::Json => {
            let p = out_dir.join("trace.json");
            fs::write(&p, trace_json(&outcome.trace, tracked))?;
            p
        }
    };
    let summary_path = out_dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&outcome.summary)? + "\n")?;
    let config_path = out_dir.join("config.json");
    fs::write(&config_path, cfg.to_json_string() + "\n")?;
    Ok(RunArtifacts { trace_path, summary_path, config_path, diverged_at: outcome.summary.diverged_at })
}

/// A `(d, ‖μ‖)` grid over several base seeds. Every cell shares the other
/// fields of `base`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub d_values: Vec<usize>,
    pub mu_values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub base: ExperimentConfig,
}

impl SweepSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: Self = parse_json(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, empty) in
            [("d_values", self.d_values.is_empty()), ("mu_values", self.mu_values.is_empty()), ("seeds", self.seeds.is_empty())]
        {
            if empty {
                return Err(Error::config(name, "must not be empty"));
            }
        }
        for (di, &d) in self.d_values.iter().enumerate() {
            for (mi, &mu) in self.mu_values.iter().enumerate() {
                self.cell_config(di, mi).validate().map_err(|e| match e {
                    Error::Config { path, message } => Error::config(
                        format!("base.{path}"),
                        format!("{message} (cell d = {d}, mu_norm = {mu})"),
                    ),
                    other => other,
                })?;
            }
        }
        Ok(())
    }

    pub fn cell_config(&self, di: usize, mi: usize) -> ExperimentConfig {
        ExperimentConfig { d: self.d_values[di], mu_norm: self.mu_values[mi], ..self.base.clone() }
    }

    pub fn cell_count(&self) -> usize {
        self.d_values.len() * self.mu_values.len() * self.seeds.len()
    }
}

/// Seed of cell `(di, mi, si)`: a hash of the base seed and the grid indices.
pub fn cell_seed(base_seed: u64, di: usize, mi: usize, si: usize) -> u64 {
    rng::mix_seed(&[base_seed, di as u64, mi as u64, si as u64])
}

/// One heatmap row. `seed` is `None` on seed-averaged rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub d: usize,
    pub mu_norm: f64,
    pub seed: Option<u64>,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub status: String,
}

fn run_cell(spec: &SweepSpec, di: usize, mi: usize, si: usize) -> CellResult {
    let cfg = spec.cell_config(di, mi);
    let seed = spec.seeds[si];
    let mut row = CellResult {
        d: cfg.d,
        mu_norm: cfg.mu_norm,
        seed: Some(seed),
        train_loss: f64::NAN,
        test_loss: f64::NAN,
        train_acc: f64::NAN,
        test_acc: f64::NAN,
        status: String::new(),
    };
    match run_experiment(&cfg, cell_seed(seed, di, mi, si)) {
        Ok(out) => {
            let s = &out.summary;
            row.train_loss = s.final_train_loss;
            row.test_loss = s.final_test_loss;
            row.train_acc = s.final_train_acc;
            row.test_acc = s.final_test_acc;
            row.status = s.diverged_at.map_or_else(|| "ok".to_string(), |k| format!("diverged@{k}"));
        }
        Err(e) => row.status = format!("error: {e}"),
    }
    row
}

/// Run every cell on a pool of `threads` workers, sorted by `(d, ‖μ‖, seed)`.
pub fn sweep(spec: &SweepSpec, threads: usize) -> Result<Vec<CellResult>> {
    spec.validate()?;
    if threads == 0 {
        return Err(Error::config("threads", "must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let cells: Vec<(usize, usize, usize)> = (0..spec.d_values.len())
        .flat_map(|di| (0..spec.mu_values.len()).flat_map(move |mi| (0..spec.seeds.len()).map(move |si| (di, mi, si))))
        .collect();
    let mut rows: Vec<(usize, CellResult)> =
        pool.install(|| cells.par_iter().map(|&(di, mi, si)| (si, run_cell(spec, di, mi, si))).collect());
    rows.sort_by(|(sa, a), (sb, b)| {
        a.d.cmp(&b.d).then(a.mu_norm.total_cmp(&b.mu_norm)).then(a.seed.cmp(&b.seed)).then(sa.cmp(sb))
    });
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// Per `(d, ‖μ‖)` means over the cells whose status is `ok`.
pub fn seed_means(cells: &[CellResult]) -> Vec<CellResult> {
    let mut out: Vec<CellResult> = Vec::new();
    let mut i = 0;
    while i < cells.len() {
        let j = (i..cells.len()).find(|&k| cells[k].d != cells[i].d || cells[k].mu_norm != cells[i].mu_norm).unwrap_or(cells.len());
        let group = &cells[i..j];
        let ok: Vec<&CellResult> = group.iter().filter(|c| c.status == "ok").collect();
        let mean = |f: fn(&CellResult) -> f64| {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|c| f(c)).sum::<f64>() / ok.len() as f64
            }
        };
        out.push(CellResult {
            d: cells[i].d,
            mu_norm: cells[i].mu_norm,
            seed: None,
            train_loss: mean(|c| c.train_loss),
            test_loss: mean(|c| c.test_loss),
            train_acc: mean(|c| c.train_acc),
            test_acc: mean(|c| c.test_acc),
            status: if ok.len() == group.len() { "ok".into() } else { format!("{}/{} ok", ok.len(), group.len()) },
        });
        i = j;
    }
    out
}

/// Per-cell rows, then the seed-averaged rows with `seed = mean`.
pub fn heatmap_csv(cells: &[CellResult]) -> String {
    let mut out = String::from("d,mu_norm,seed,train_loss,test_loss,train_acc,test_acc,status\n");
    for c in cells.iter().cloned().chain(seed_means(cells)) {
        let seed = c.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
        let status = if c.status.contains([',', '"', '\n']) {
            format!("\"{}\"", c.status.replace('"', "\"\""))
        } else {
            c.status.clone()
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.d,
            csv_field(c.mu_norm),
            seed,
            csv_field(c.train_loss),
            csv_field(c.test_loss),
            csv_field(c.train_acc),
            csv_field(c.test_acc),
            status
        )
        .expect("write to string");
    }
    out
}

pub fn sweep_to_dir(spec: &SweepSpec, threads: usize, out_dir: &Path) -> Result<(PathBuf, Vec<CellResult>)> {
    let cells = sweep(spec, threads)?;
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("heatmap.csv");
    fs::write(&path, heatmap_csv(&cells))?;
    Ok((path, cells))
}

/// Check suites selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    Gradients,
    Update,
    Softmax,
    GoodRun,
    Init,
    Etf,
    GLinear,
    Tokens,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Gradients,
        Suite::Update,
        Suite::Softmax,
        Suite::GoodRun,
        Suite::Init,
        Suite::Etf,
        Suite::GLinear,
        Suite::Tokens,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Gradients => "gradients",
            Suite::Update => "update",
            Suite::Softmax => "softmax",
            Suite::GoodRun => "goodrun",
            Suite::Init => "init",
            Suite::Etf => "etf",
            Suite::GLinear => "glinear",
            Suite::Tokens => "tokens",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::config("suite", format!("unknown suite `{s}`")))
    }
}

/// Comma-separated suite names, or `all`. An empty selector is an error.
pub fn parse_suites(selector: &str) -> Result<Vec<Suite>> {
    let names: Vec<&str> = selector.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(Error::config("suite", "selector is empty"));
    }
    if names == ["all"] {
        return Ok(Suite::ALL.to_vec());
    }
    let mut out = Vec::new();
    for n in names {
        let s: Suite = n.parse()?;
        if !out.contains(&s) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Binary and multiclass random instances with Gaussian entries.
#[derive(Clone, Debug, Serialize)]
pub struct GradientCheck {
    pub instances: usize,
    pub max_rel_err: f64,
    pub max_rel_err_multiclass: f64,
}

fn gaussian2<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn gaussian1<R: Rng + ?Sized>(len: usize, scale: f64, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn small_config(n: usize, t: usize, d: usize) -> DataConfig {
    DataConfig { n, t, d, mu_norm: 2.0, sigma_eps: 1.0, eta: 0.25, rho: 0.5, n_weak_same: 1 }
}

/// A random small dataset with random `W`, `p` and `ν`.
pub fn random_instance(n: usize, t: usize, d: usize, seed: u64) -> Result<(SignalBasis, Dataset, ModelState)> {
    let cfg = small_config(n, t, d);
    let signals = make_signals(d, cfg.mu_norm, SignalMode::RandomOrthogonal, &mut rng::stream(seed, rng::SIGNALS))?;
    let ds = generate_dataset(&cfg, &signals, &mut rng::stream(seed, rng::DATA), &mut rng::stream(seed, rng::LABEL_NOISE))?;
    let mut r = rng::stream(seed, rng::INIT);
    let w = gaussian2(d, d, 0.4, &mut r);
    let p = gaussian1(d, 0.7, &mut r);
    let nu = gaussian1(d, 0.5, &mut r);
    Ok((signals, ds, ModelState::new(w, p, nu)?))
}

/// Closed-form gradients against central differences (`h = 1e−5`), with a
/// `k`-class head for the multiclass part.
pub fn gradient_check(n: usize, t: usize, d: usize, k: usize, instances: usize, seed: u64) -> Result<GradientCheck> {
    const H: f64 = 1e-5;
    let mut out = GradientCheck { instances, max_rel_err: 0.0, max_rel_err_multiclass: 0.0 };
    for inst in 0..instances {
        let s = rng::mix_seed(&[seed, inst as u64]);
        let (_, ds, state) = random_instance(n, t, d, s)?;
        let g = gradients(&ds, &state)?;
        let fd = finite_diff_grad(&ds, &state, H)?;
        out.max_rel_err = out.max_rel_err.max(relative_error(&g.w, &fd.w)).max(relative_error(&g.p, &fd.p));

        let mut r = rng::stream(s, rng::ETF);
        let signals: Vec<Array1<f64>> = (0..k).map(|_| gaussian1(d, 1.0, &mut r)).collect();
        let samples = generate_multiclass(&small_config(n, t, d), &signals, n, &mut r)?;
        let mc = MulticlassState { w: state.w().clone(), p: state.p().clone(), heads: gaussian2(k, d, 0.5, &mut r) };
        let g = multiclass_loss_and_grads(&samples, &mc)?;
        let fd = multiclass_finite_diff(&samples, &mc, H);
        let mut heads_fd = Array2::zeros(mc.heads.dim());
        let mut probe = mc.clone();
        for idx in ndarray::indices(mc.heads.dim()) {
            probe.heads[idx] = mc.heads[idx] + H;
            let up = multiclass_loss_and_grads(&samples, &probe)?.loss;
            probe.heads[idx] = mc.heads[idx] - H;
            let down = multiclass_loss_and_grads(&samples, &probe)?.loss;
            probe.heads[idx] = mc.heads[idx];
            heads_fd[idx] = (up - down) / (2.0 * H);
        }
        out.max_rel_err_multiclass = out
            .max_rel_err_multiclass
            .max(relative_error(&g.w, &fd.w))
            .max(relative_error(&g.p, &fd.p))
            .max(relative_error(&g.heads, &heads_fd));
    }
    Ok(out)
}

/// Largest relative error of the one-step identities over random instances.
pub fn update_identity_check(n: usize, t: usize, d: usize, alpha: f64, instances: usize, seed: u64) -> Result<f64> {
    let mut worst = 0f64;
    for inst in 0..instances {
        let (signals, ds, state) = random_instance(n, t, d, rng::mix_seed(&[seed, inst as u64, 1]))?;
        worst = worst.max(verify_update_identity(&state, &ds, &signals, alpha)?.max_rel_err);
    }
    Ok(worst)
}

/// Cosines between the Monte Carlo head gradient and the centered signals for
/// `cfg.etf_classes` classes. The dimension is capped at 64; the geometry
/// only needs `d ≥ K`.
pub fn etf_check(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<f64>> {
    let d = cfg.d.min(64);
    let data = DataConfig { d, ..cfg.data() };
    let signals = make_class_signals(d, cfg.etf_classes, cfg.mu_norm, cfg.signal_mode, &mut rng::stream(seed, rng::SIGNALS))?;
    crate::theory::etf_gradient_check(&signals, &data, cfg.etf_samples, &mut rng::stream(seed, rng::ETF))
}

/// Run `suites` for `cfg` under `seed`.
pub fn run_checks(cfg: &ExperimentConfig, seed: u64, suites: &[Suite]) -> Result<TheoryReport> {
    if suites.is_empty() {
        return Err(Error::config("suite", "selector is empty"));
    }
    cfg.validate()?;
    let hash = cfg.hash();
    let mut report = TheoryReport::default();
    let needs_run = suites.iter().any(|s| matches!(s, Suite::Softmax | Suite::GLinear));
    let needs_prep = needs_run || suites.iter().any(|s| matches!(s, Suite::GoodRun | Suite::Init | Suite::Tokens));
    let mut prep = if needs_prep { Some(Prepared::with_test_size(cfg, seed, 0)?) } else { None };
    let trace = match (&mut prep, needs_run) {
        (Some(p), true) => match train(&mut p.model, &cfg.train_config(), None, &mut []) {
            Ok(t) => Some(t),
            Err(d) => return Err(Error::Divergence { step: d.step }),
        },
        _ => None,
    };
    for suite in suites {
        match suite {
            Suite::Gradients => {
                let g = gradient_check(4, 3, 8, 3, 20, seed)?;
                report.push("gradients.binary", g.max_rel_err <= 1e-6, json!(g.max_rel_err), json!(1e-6), &hash, seed);
                report.push(
                    "gradients.multiclass",
                    g.max_rel_err_multiclass <= 1e-6,
                    json!(g.max_rel_err_multiclass),
                    json!(1e-6),
                    &hash,
                    seed,
                );
            }
            Suite::Update => {
                let e = update_identity_check(4, 3, 8, 0.1, 10, seed)?;
                report.push("update.identities", e <= 1e-9, json!(e), json!(1e-9), &hash, seed);
            }
            Suite::Softmax => {
                let trace = trace.as_ref().expect("trained");
                let mut b = SoftmaxBoundReport::default();
                for (dg, p) in trace.diagnostics.iter().zip(&trace.probs) {
                    b.merge(&softmax_bound_check(dg, p));
                }
                report.push("softmax.bounds", b.pass(), json!(b), json!({"identity": 1e-12}), &hash, seed);
            }
            Suite::GoodRun => {
                let p = prep.as_ref().expect("prepared");
                let dense = p.dense_init(seed)?;
                let init = InitDraw { w: dense.w(), p: dense.p(), sigma_w: p.sigma_w, sigma_p: p.sigma_p };
                let r = good_run_check(
                    &p.dataset,
                    Some(init),
                    &p.signals,
                    &p.nu,
                    cfg.sigma_eps,
                    cfg.eta,
                    GoodRunTolerances { delta: cfg.delta, ..GoodRunTolerances::default() },
                );
                for e in &r.events {
                    report.push(
                        &format!("goodrun.{}", e.name),
                        e.holds,
                        json!(e.measured),
                        json!({"lower": e.lower, "upper": e.upper}),
                        &hash,
                        seed,
                    );
                }
            }
            Suite::Init => {
                let p = prep.as_ref().expect("prepared");
                let mut probe = p.model.clone();
                let one = TrainConfig { steps: 1, log_every: 1, ..cfg.train_config() };
                let tr = train(&mut probe, &one, None, &mut []).map_err(|d| Error::Divergence { step: d.step })?;
                let r = crate::theory::init_checks(
                    &tr.probs[0],
                    &tr.diagnostics[0],
                    &tr.diagnostics[1],
                    crate::theory::InitThresholds::default(),
                );
                report.push("init.small_attention", r.pass(), json!(r), json!(r.thresholds), &hash, seed);
            }
            Suite::Etf => {
                let cos = etf_check(cfg, seed)?;
                let ok = cos.iter().all(|c| *c >= 0.99);
                report.push("etf.cosines", ok, json!(cos), json!(0.99), &hash, seed);
            }
            Suite::GLinear => {
                let g = g_dynamics(trace.as_ref().expect("trained"), cfg.rho)?;
                let th = GDynamicsThresholds::default();
                report.push("glinear.clean", g.clean_pass(th), json!(g.clean.pooled), json!(th.clean_r2), &hash, seed);
                let early: Vec<Value> = g.noisy.iter().map(|n| json!(n.early_lambda)).collect();
                let late: Vec<Value> = g.noisy.iter().map(|n| json!(n.late_gamma)).collect();
                report.push("glinear.noisy_early", g.early_pass(th), json!(early), json!(th.early_r2), &hash, seed);
                report.push("glinear.noisy_late", g.late_pass(), json!(late), json!({"slope": "> 0"}), &hash, seed);
            }
            Suite::Tokens => {
                let p = prep.as_ref().expect("prepared");
                let r = token_score_check(&p.dataset, &p.nu, &p.signals, cfg.sigma_eps, cfg.rho);
                report.push("tokens.scores", r.pass, json!(r), json!("3 standard errors"), &hash, seed);
            }
        }
    }
    Ok(report)
}

pub fn classify(cfg: &ExperimentConfig) -> Result<Regime> {
    classify_regime(&cfg.data(), cfg.regime_thresholds)
}

/// Exit code for a library error: configuration and usage problems are 2,
/// divergence is 3, anything else is treated as a failed run (1).
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Json(_) | Error::Io(_) => EXIT_USAGE,
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_CHECK_FAILED,
    }
}
