//! Experiment orchestration: a TOML config describing cohort, model,
//! strategies and schedule; a runner that sweeps (strategy, seed) pairs
//! and writes CSV traces plus text reports; and helpers for reading the
//! traces back.
//!
//! All strategies within one experiment seed share the same cohort,
//! split, initial model and client-selection stream, so strategy
//! differences reflect aggregation alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::{generate_cohort, split_clients, CohortConfig};
use crate::error::{Error, Result};
use crate::federation::{
    self, LossMode, RunResult, StrategyConfig, StrategyKind,
};
use crate::metrics::{self, MetricsReport, METRIC_NAMES};
use crate::numerics::{init_params, ModelSpec};
use crate::seed::{derive_seed, tag};

/// Training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setting {
    /// `rounds` rounds sampling from the whole train pool.
    Randomly { rounds: usize },
    /// `rounds_per_month` rounds within each month's arrival pool.
    Chronologically { rounds_per_month: usize },
}

impl Setting {
    pub fn name(&self) -> &'static str {
        match self {
            Setting::Randomly { .. } => "randomly",
            Setting::Chronologically { .. } => "chronologically",
        }
    }
}

/// A fully validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub cohort: CohortConfig,
    pub model: ModelSpec,
    pub strategies: Vec<StrategyConfig>,
    pub setting: Setting,
    pub eval_every: usize,
    pub seeds: Vec<u64>,
    pub test_fraction: f64,
    pub output_dir: PathBuf,
    pub bootstrap_resamples: usize,
    pub confidence_level: f64,
}

// ---------------------------------------------------------------------------
// Config file schema. Every field is optional and falls back to the
// reference defaults; unknown keys are rejected.
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    cohort: Option<RawCohort>,
    model: Option<RawModel>,
    federation: Option<RawFederation>,
    strategies: Option<Vec<RawStrategy>>,
    run: Option<RawRun>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCohort {
    n_positive_clients: Option<usize>,
    n_negative_clients: Option<usize>,
    n_months: Option<usize>,
    monthly_arrival_weights: Option<Vec<f64>>,
    mixed_class_fraction: Option<f64>,
    seed: Option<u64>,
    samples_per_client: Option<RawSampleCount>,
    feature_model: Option<RawFeatureModel>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSampleCount {
    p_single: Option<f64>,
    tail_stop: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFeatureModel {
    embed_dim: Option<usize>,
    symptom_dim: Option<usize>,
    embed_mean_neg: Option<Vec<f64>>,
    embed_mean_pos: Option<Vec<f64>>,
    embed_std: Option<Vec<f64>>,
    symptom_rates_neg: Option<Vec<f64>>,
    symptom_rates_pos: Option<Vec<f64>>,
    separability: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    hidden_dims: Option<Vec<usize>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFederation {
    clients_per_round: Option<usize>,
    local_epochs: Option<usize>,
    global_rate: Option<f64>,
    local_rate: Option<f64>,
    loss_mode: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStrategy {
    kind: String,
    mu: Option<f64>,
    clients_per_round: Option<usize>,
    local_epochs: Option<usize>,
    global_rate: Option<f64>,
    local_rate: Option<f64>,
    loss_mode: Option<String>,
}

impl Default for RawStrategy {
    fn default() -> Self {
        RawStrategy {
            kind: "fedloss".into(),
            mu: None,
            clients_per_round: None,
            local_epochs: None,
            global_rate: None,
            local_rate: None,
            loss_mode: None,
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    setting: Option<String>,
    rounds: Option<usize>,
    rounds_per_month: Option<usize>,
    eval_every: Option<usize>,
    seeds: Option<Vec<u64>>,
    test_fraction: Option<f64>,
    output_dir: Option<PathBuf>,
    bootstrap_resamples: Option<usize>,
    confidence_level: Option<f64>,
}

fn parse_loss_mode(s: &str, key: &str) -> Result<LossMode> {
    match s {
        "sum" => Ok(LossMode::Sum),
        "mean" => Ok(LossMode::Mean),
        other => Err(Error::InvalidConfig(format!(
            "{key} must be \"sum\" or \"mean\", got \"{other}\""
        ))),
    }
}

fn resolve(raw: RawConfig) -> Result<ExperimentConfig> {
    let defaults = CohortConfig::default();
    let mut cohort = defaults.clone();
    if let Some(rc) = raw.cohort {
        if let Some(v) = rc.n_positive_clients {
            cohort.n_positive_clients = v;
        }
        if let Some(v) = rc.n_negative_clients {
            cohort.n_negative_clients = v;
        }
        if let Some(v) = rc.n_months {
            cohort.n_months = v;
            cohort.monthly_arrival_weights = crate::cohort::default_arrival_weights(v);
        }
        if let Some(v) = rc.monthly_arrival_weights {
            cohort.monthly_arrival_weights = v;
        }
        if let Some(v) = rc.mixed_class_fraction {
            cohort.mixed_class_fraction = v;
        }
        if let Some(v) = rc.seed {
            cohort.seed = v;
        }
        if let Some(sc) = rc.samples_per_client {
            if let Some(v) = sc.p_single {
                cohort.samples_per_client.p_single = v;
            }
            if let Some(v) = sc.tail_stop {
                cohort.samples_per_client.tail_stop = v;
            }
        }
        if let Some(fm) = rc.feature_model {
            let f = &mut cohort.feature_model;
            if let Some(v) = fm.embed_dim {
                f.embed_dim = v;
                f.embed_mean_neg = vec![-0.1; v];
                f.embed_mean_pos = vec![0.1; v];
                f.embed_std = vec![1.0; v];
            }
            if let Some(v) = fm.symptom_dim {
                if fm.symptom_rates_neg.is_none() || fm.symptom_rates_pos.is_none() {
                    return Err(Error::InvalidConfig(
                        "feature_model.symptom_dim requires explicit symptom_rates_neg and symptom_rates_pos".into(),
                    ));
                }
                f.symptom_dim = v;
            }
            if let Some(v) = fm.embed_mean_neg {
                f.embed_mean_neg = v;
            }
            if let Some(v) = fm.embed_mean_pos {
                f.embed_mean_pos = v;
            }
            if let Some(v) = fm.embed_std {
                f.embed_std = v;
            }
            if let Some(v) = fm.symptom_rates_neg {
                f.symptom_rates_neg = v;
            }
            if let Some(v) = fm.symptom_rates_pos {
                f.symptom_rates_pos = v;
            }
            if let Some(v) = fm.separability {
                f.separability = v;
            }
        }
    }
    cohort.validate()?;

    let hidden_dims = raw.model.and_then(|m| m.hidden_dims).unwrap_or_else(|| vec![64]);
    let model = ModelSpec::new(cohort.feature_model.embed_dim, cohort.feature_model.symptom_dim, hidden_dims)?;

    let shared = raw.federation.unwrap_or_default();
    let shared_loss_mode = shared
        .loss_mode
        .as_deref()
        .map(|s| parse_loss_mode(s, "federation.loss_mode"))
        .transpose()?
        .unwrap_or(LossMode::Sum);

    let raw_strategies = raw.strategies.unwrap_or_else(|| vec![RawStrategy::default()]);
    if raw_strategies.is_empty() {
        return Err(Error::InvalidConfig("strategies must name at least one strategy".into()));
    }
    let mut strategies = Vec::with_capacity(raw_strategies.len());
    for rs in raw_strategies {
        let kind = match rs.kind.as_str() {
            "fedavg" => {
                if rs.mu.is_some() {
                    return Err(Error::InvalidConfig(
                        "strategies.mu applies only to kind = \"fedprox\"".into(),
                    ));
                }
                StrategyKind::FedAvg
            }
            "fedprox" => StrategyKind::FedProx { mu: rs.mu.unwrap_or(0.01) },
            "fedloss" => {
                if rs.mu.is_some() {
                    return Err(Error::InvalidConfig(
                        "strategies.mu applies only to kind = \"fedprox\"".into(),
                    ));
                }
                StrategyKind::FedLoss
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "strategies.kind must be fedavg, fedprox or fedloss, got \"{other}\""
                )));
            }
        };
        let cfg = StrategyConfig {
            kind,
            global_rate: rs.global_rate.or(shared.global_rate).unwrap_or(1.0),
            local_rate: rs.local_rate.or(shared.local_rate).unwrap_or(0.015),
            local_epochs: rs.local_epochs.or(shared.local_epochs).unwrap_or(1),
            clients_per_round: rs.clients_per_round.or(shared.clients_per_round).unwrap_or(30),
            loss_mode: rs
                .loss_mode
                .as_deref()
                .map(|s| parse_loss_mode(s, "strategies.loss_mode"))
                .transpose()?
                .unwrap_or(shared_loss_mode),
        };
        if cfg.clients_per_round == 0 {
            return Err(Error::InvalidConfig(
                "clients_per_round (M) must be at least 1".into(),
            ));
        }
        cfg.validate()?;
        strategies.push(cfg);
    }
    if strategies
        .iter()
        .map(|s| s.kind.name())
        .collect::<std::collections::HashSet<_>>()
        .len()
        != strategies.len()
    {
        return Err(Error::InvalidConfig(
            "strategies must not repeat a kind (outputs are keyed by strategy name)".into(),
        ));
    }

    let run = raw.run.unwrap_or_default();
    let setting = match run.setting.as_deref().unwrap_or("randomly") {
        "randomly" => Setting::Randomly { rounds: run.rounds.unwrap_or(2000) },
        "chronologically" => {
            Setting::Chronologically { rounds_per_month: run.rounds_per_month.unwrap_or(100) }
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "run.setting must be \"randomly\" or \"chronologically\", got \"{other}\""
            )));
        }
    };
    match setting {
        Setting::Randomly { rounds: 0 } => {
            return Err(Error::InvalidConfig("run.rounds must be at least 1".into()));
        }
        Setting::Chronologically { rounds_per_month: 0 } => {
            return Err(Error::InvalidConfig("run.rounds_per_month must be at least 1".into()));
        }
        _ => {}
    }
    let eval_every = run.eval_every.unwrap_or(10);
    if eval_every == 0 {
        return Err(Error::InvalidConfig("run.eval_every must be at least 1".into()));
    }
    let seeds = run.seeds.unwrap_or_else(|| vec![1]);
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("run.seeds must name at least one seed".into()));
    }
    let test_fraction = run.test_fraction.unwrap_or(0.2);
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(Error::InvalidConfig(format!(
            "run.test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let bootstrap_resamples = run.bootstrap_resamples.unwrap_or(1000);
    if bootstrap_resamples == 0 {
        return Err(Error::InvalidConfig("run.bootstrap_resamples must be at least 1".into()));
    }
    let confidence_level = run.confidence_level.unwrap_or(0.95);
    if !(0.0..1.0).contains(&confidence_level) || confidence_level == 0.0 {
        return Err(Error::InvalidConfig(format!(
            "run.confidence_level must lie in (0, 1), got {confidence_level}"
        )));
    }

    Ok(ExperimentConfig {
        cohort,
        model,
        strategies,
        setting,
        eval_every,
        seeds,
        test_fraction,
        output_dir: run.output_dir.unwrap_or_else(|| PathBuf::from("out")),
        bootstrap_resamples,
        confidence_level,
    })
}

/// Parse and validate an experiment config file, filling defaults for
/// every omitted key. Unknown keys are rejected.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
    })?;
    parse_config_str(&text)
}

/// [`parse_config`] on an in-memory string.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text)
        .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))?;
    resolve(raw)
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Default, Clone)]
pub struct ConfigOverrides {
    pub output_dir: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    /// Keep only this strategy from the config.
    pub strategy: Option<String>,
    /// "randomly" or "chronologically".
    pub setting: Option<String>,
}

/// Parse a config file and apply CLI-style overrides. The setting
/// override is applied before default resolution, so `rounds` /
/// `rounds_per_month` values in the file still take effect.
pub fn parse_config_with_overrides(
    path: &Path,
    overrides: &ConfigOverrides,
) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut raw: RawConfig = toml::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))?;
    if let Some(setting) = &overrides.setting {
        raw.run.get_or_insert_with(RawRun::default).setting = Some(setting.clone());
    }
    let mut cfg = resolve(raw)?;
    if let Some(dir) = &overrides.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seeds) = &overrides.seeds {
        if seeds.is_empty() {
            return Err(Error::InvalidConfig("--seeds must name at least one seed".into()));
        }
        cfg.seeds = seeds.clone();
    }
    if let Some(name) = &overrides.strategy {
        cfg.strategies.retain(|s| s.kind.name() == name);
        if cfg.strategies.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "strategy \"{name}\" is not in the config (expected fedavg, fedprox or fedloss)"
            )));
        }
    }
    Ok(cfg)
}

impl ExperimentConfig {
    /// Serialise back to TOML with every field explicit; parsing the
    /// result reproduces this config.
    pub fn to_toml_string(&self) -> Result<String> {
        let raw = RawConfig {
            cohort: Some(RawCohort {
                n_positive_clients: Some(self.cohort.n_positive_clients),
                n_negative_clients: Some(self.cohort.n_negative_clients),
                n_months: Some(self.cohort.n_months),
                monthly_arrival_weights: Some(self.cohort.monthly_arrival_weights.clone()),
                mixed_class_fraction: Some(self.cohort.mixed_class_fraction),
                seed: Some(self.cohort.seed),
                samples_per_client: Some(RawSampleCount {
                    p_single: Some(self.cohort.samples_per_client.p_single),
                    tail_stop: Some(self.cohort.samples_per_client.tail_stop),
                }),
                feature_model: Some(RawFeatureModel {
                    embed_dim: Some(self.cohort.feature_model.embed_dim),
                    symptom_dim: None,
                    embed_mean_neg: Some(self.cohort.feature_model.embed_mean_neg.clone()),
                    embed_mean_pos: Some(self.cohort.feature_model.embed_mean_pos.clone()),
                    embed_std: Some(self.cohort.feature_model.embed_std.clone()),
                    symptom_rates_neg: Some(self.cohort.feature_model.symptom_rates_neg.clone()),
                    symptom_rates_pos: Some(self.cohort.feature_model.symptom_rates_pos.clone()),
                    separability: Some(self.cohort.feature_model.separability),
                }),
            }),
            model: Some(RawModel { hidden_dims: Some(self.model.hidden_dims.clone()) }),
            federation: None,
            strategies: Some(
                self.strategies
                    .iter()
                    .map(|s| RawStrategy {
                        kind: s.kind.name().to_string(),
                        mu: match s.kind {
                            StrategyKind::FedProx { mu } => Some(mu),
                            _ => None,
                        },
                        clients_per_round: Some(s.clients_per_round),
                        local_epochs: Some(s.local_epochs),
                        global_rate: Some(s.global_rate),
                        local_rate: Some(s.local_rate),
                        loss_mode: Some(
                            match s.loss_mode {
                                LossMode::Sum => "sum",
                                LossMode::Mean => "mean",
                            }
                            .to_string(),
                        ),
                    })
                    .collect(),
            ),
            run: Some(RawRun {
                setting: Some(self.setting.name().to_string()),
                rounds: match self.setting {
                    Setting::Randomly { rounds } => Some(rounds),
                    _ => None,
                },
                rounds_per_month: match self.setting {
                    Setting::Chronologically { rounds_per_month } => Some(rounds_per_month),
                    _ => None,
                },
                eval_every: Some(self.eval_every),
                seeds: Some(self.seeds.clone()),
                test_fraction: Some(self.test_fraction),
                output_dir: Some(self.output_dir.clone()),
                bootstrap_resamples: Some(self.bootstrap_resamples),
                confidence_level: Some(self.confidence_level),
            }),
        };
        toml::to_string(&raw)
            .map_err(|e| Error::InvalidConfig(format!("config serialisation failed: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

/// Files and final report of one (strategy, seed) run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub strategy: String,
    pub seed: u64,
    pub report: MetricsReport,
    pub trace_path: PathBuf,
    pub weights_path: PathBuf,
    pub report_path: PathBuf,
}

/// Per-strategy cross-seed summary.
#[derive(Debug, Clone)]
pub struct StrategySummary {
    pub strategy: String,
    pub mean: BTreeMap<String, f64>,
    pub ci: BTreeMap<String, (f64, f64)>,
    /// True when the CI is a bootstrap over seeds; false when it is the
    /// min-max range (fewer than five seeds).
    pub bootstrap_ci: bool,
}

/// Everything an experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunRecord>,
    pub summaries: Vec<StrategySummary>,
    pub summary_path: PathBuf,
}

fn run_one(
    cfg: &ExperimentConfig,
    strategy: &StrategyConfig,
    split: &crate::cohort::CohortSplit,
    initial: &crate::numerics::ParamVector,
    select_seed: u64,
) -> Result<RunResult> {
    match cfg.setting {
        Setting::Randomly { rounds } => federation::run_random_setting(
            initial,
            split,
            strategy,
            rounds,
            cfg.eval_every,
            select_seed,
        ),
        Setting::Chronologically { rounds_per_month } => federation::run_chronological_setting(
            initial,
            split,
            strategy,
            cfg.cohort.n_months,
            rounds_per_month,
            select_seed,
        ),
    }
}

/// Run every (strategy, seed) pair, writing per-run trace, weight and
/// report files plus one cross-seed summary. Returns an error (after
/// writing whatever completed) if any run failed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    fs::create_dir_all(&cfg.output_dir)?;
    let mut runs = Vec::new();
    let mut failures: Vec<String> = Vec::new();

    for &seed in &cfg.seeds {
        let run_base = derive_seed(cfg.cohort.seed, seed);
        let mut cohort_cfg = cfg.cohort.clone();
        cohort_cfg.seed = derive_seed(run_base, tag::COHORT);
        let cohort = generate_cohort(&cohort_cfg)?;
        let split = split_clients(cohort, cfg.test_fraction, derive_seed(run_base, tag::SPLIT))?;
        let initial = init_params(&cfg.model, derive_seed(run_base, tag::INIT));
        let select_seed = derive_seed(run_base, tag::SELECT);

        for strategy in &cfg.strategies {
            let name = strategy.kind.name();
            let result = match run_one(cfg, strategy, &split, &initial, select_seed) {
                Ok(r) => r,
                Err(e) => {
                    failures.push(format!("{name} seed {seed}: {e}"));
                    continue;
                }
            };

            let trace_path = cfg.output_dir.join(format!("trace_{name}_seed{seed}.csv"));
            federation::write_trace_csv(fs::File::create(&trace_path)?, name, &result.history)?;
            let weights_path = cfg.output_dir.join(format!("weights_{name}_seed{seed}.csv"));
            federation::write_weight_csv(fs::File::create(&weights_path)?, &result.history)?;

            let scored = federation::score_clients(&result.final_params, &split.test_clients)?;
            let report = metrics::report(
                &scored,
                cfg.bootstrap_resamples,
                cfg.confidence_level,
                derive_seed(run_base, tag::BOOTSTRAP),
            )?;
            let report_path = cfg.output_dir.join(format!("report_{name}_seed{seed}.txt"));
            fs::write(&report_path, report.to_table(name))?;

            runs.push(RunRecord {
                strategy: name.to_string(),
                seed,
                report,
                trace_path,
                weights_path,
                report_path,
            });
        }
    }

    let summaries = summarise(cfg, &runs)?;
    let summary_path = cfg.output_dir.join("summary.txt");
    fs::write(&summary_path, render_summary(cfg, &summaries, &failures))?;

    if !failures.is_empty() {
        return Err(Error::ExperimentFailed(format!(
            "{} of {} runs failed (partial outputs in {}): {}",
            failures.len(),
            cfg.seeds.len() * cfg.strategies.len(),
            cfg.output_dir.display(),
            failures.join("; ")
        )));
    }
    Ok(ExperimentOutcome { runs, summaries, summary_path })
}

fn metric_of(report: &MetricsReport, name: &str) -> f64 {
    match name {
        "auc" => report.auc,
        "se" => report.se,
        "sp" => report.sp,
        "se_at_80sp" => report.se_at_80sp,
        _ => unreachable!("unknown metric {name}"),
    }
}

fn summarise(cfg: &ExperimentConfig, runs: &[RunRecord]) -> Result<Vec<StrategySummary>> {
    let mut summaries = Vec::new();
    for strategy in &cfg.strategies {
        let name = strategy.kind.name();
        let finals: Vec<&MetricsReport> =
            runs.iter().filter(|r| r.strategy == name).map(|r| &r.report).collect();
        if finals.is_empty() {
            continue;
        }
        let bootstrap_ci = finals.len() >= 5;
        if !bootstrap_ci {
            log::warn!(
                "{name}: only {} seed(s); summary interval is the min-max range, not a bootstrap CI",
                finals.len()
            );
        }
        let mut mean = BTreeMap::new();
        let mut ci = BTreeMap::new();
        for metric in METRIC_NAMES {
            let values: Vec<f64> = finals.iter().map(|r| metric_of(r, metric)).collect();
            let m = values.iter().sum::<f64>() / values.len() as f64;
            let interval = if bootstrap_ci {
                metrics::bootstrap_ci_values(
                    &values,
                    cfg.bootstrap_resamples,
                    cfg.confidence_level,
                    derive_seed(cfg.cohort.seed, tag::SUMMARY),
                )?
            } else {
                let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            };
            mean.insert(metric.to_string(), m);
            ci.insert(metric.to_string(), interval);
        }
        summaries.push(StrategySummary { strategy: name.to_string(), mean, ci, bootstrap_ci });
    }
    Ok(summaries)
}

fn render_summary(
    cfg: &ExperimentConfig,
    summaries: &[StrategySummary],
    failures: &[String],
) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Strategy comparison, {} setting, {} seed(s)",
        cfg.setting.name(),
        cfg.seeds.len()
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<14}{:<16}{:<16}{:<16}{:<16}",
        "", "AUC", "SE", "SP", "SE@80%SP"
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{:<14}{:<16.3}{:<16.3}{:<16.3}{:<16.3}",
            s.strategy, s.mean["auc"], s.mean["se"], s.mean["sp"], s.mean["se_at_80sp"]
        );
        let fmt_ci = |name: &str| {
            let (lo, hi) = s.ci[name];
            format!("({lo:.3}-{hi:.3})")
        };
        let _ = writeln!(
            out,
            "{:<14}{:<16}{:<16}{:<16}{:<16}",
            "",
            fmt_ci("auc"),
            fmt_ci("se"),
            fmt_ci("sp"),
            fmt_ci("se_at_80sp")
        );
    }
    let _ = writeln!(out);
    if summaries.iter().any(|s| !s.bootstrap_ci) {
        let _ = writeln!(
            out,
            "note: intervals are min-max ranges over seeds (bootstrap CIs need >= 5 seeds)"
        );
    } else {
        let _ = writeln!(
            out,
            "note: intervals are {:.0}% bootstrap CIs over per-seed finals",
            cfg.confidence_level * 100.0
        );
    }
    if !failures.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "FAILED RUNS ({}):", failures.len());
        for f in failures {
            let _ = writeln!(out, "  {f}");
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Trace analysis
// ---------------------------------------------------------------------------

/// First evaluation round (per the trace CSV) at which `metric` reached
/// `target`; `None` if it never did.
pub fn rounds_to_target(trace_path: &Path, metric: &str, target: f64) -> Result<Option<usize>> {
    if !METRIC_NAMES.contains(&metric) {
        return Err(Error::UndefinedMetric(format!(
            "unknown metric \"{metric}\" (expected one of {METRIC_NAMES:?})"
        )));
    }
    let mut reader = csv::Reader::from_path(trace_path)
        .map_err(|e| Error::ExperimentFailed(format!("cannot read trace: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::ExperimentFailed(format!("trace has no header: {e}")))?;
    let col = headers
        .iter()
        .position(|h| h == metric)
        .ok_or_else(|| Error::UndefinedMetric(format!("trace has no \"{metric}\" column")))?;
    let round_col = headers
        .iter()
        .position(|h| h == "round")
        .ok_or_else(|| Error::ExperimentFailed("trace has no \"round\" column".into()))?;

    for row in reader.records() {
        let row = row.map_err(|e| Error::ExperimentFailed(format!("bad trace row: {e}")))?;
        let value: f64 = row[col]
            .parse()
            .map_err(|e| Error::ExperimentFailed(format!("bad {metric} value: {e}")))?;
        if value >= target {
            let round: usize = row[round_col]
                .parse()
                .map_err(|e| Error::ExperimentFailed(format!("bad round value: {e}")))?;
            return Ok(Some(round));
        }
    }
    Ok(None)
}
