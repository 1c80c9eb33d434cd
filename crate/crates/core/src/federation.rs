//! The federated round engine: client selection, local execution
//! returning (pre-training loss, pseudo-gradient), strategy-specific
//! aggregation weights, and the global update — plus the two training
//! schedules (random selection over the whole pool, and month-by-month
//! pools).
//!
//! The pseudo-gradient convention: a client returns
//! `delta = global - locally_trained`, and the server applies
//! `global - eta * sum(w_i * delta_i)`, so with `eta = 1` one round
//! lands exactly on the weighted average of the clients' trained models.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{monthly_pools, ClientDataset, CohortSplit};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsSnapshot, ScoredSample};
use crate::numerics::{self, ClassLabel, ParamVector, Proximal};

/// Aggregation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum StrategyKind {
    FedAvg,
    FedProx { mu: f64 },
    FedLoss,
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedProx { .. } => "fedprox",
            StrategyKind::FedLoss => "fedloss",
        }
    }
}

/// Whether clients report the summed or the per-sample mean
/// cross-entropy as their pre-training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Sum,
    Mean,
}

/// Strategy choice plus the shared round hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Global update rate (eta).
    pub global_rate: f64,
    /// Local SGD rate (lambda).
    pub local_rate: f64,
    /// Local epochs per round (E).
    pub local_epochs: usize,
    /// Clients sampled per round (M).
    pub clients_per_round: usize,
    pub loss_mode: LossMode,
}

impl StrategyConfig {
    /// Reference defaults: eta 1, lambda 0.015, E 1, M 30, summed loss.
    pub fn new(kind: StrategyKind) -> Self {
        StrategyConfig {
            kind,
            global_rate: 1.0,
            local_rate: 0.015,
            local_epochs: 1,
            clients_per_round: 30,
            loss_mode: LossMode::Sum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let StrategyKind::FedProx { mu } = self.kind {
            if mu.is_nan() || mu < 0.0 || !mu.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "mu must be a nonnegative finite value, got {mu}"
                )));
            }
        }
        if self.global_rate.is_nan() || self.global_rate < 0.0 || !self.global_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "global_rate must be nonnegative, got {}",
                self.global_rate
            )));
        }
        if self.local_rate.is_nan() || self.local_rate < 0.0 || !self.local_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "local_rate must be nonnegative, got {}",
                self.local_rate
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::InvalidConfig("local_epochs must be at least 1".into()));
        }
        if self.clients_per_round == 0 {
            return Err(Error::InvalidConfig("clients_per_round must be at least 1".into()));
        }
        Ok(())
    }
}

/// What one client sends back: its id, the total cross-entropy of the
/// received global model on its data (evaluated before any local step),
/// the pseudo-gradient, and its sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u64,
    pub pre_loss: f64,
    pub delta: ParamVector,
    pub n_samples: usize,
}

/// Uniform draw of `min(m, pool)` distinct ids, without replacement.
pub fn select_clients(pool: &[u64], m: usize, rng: &mut impl Rng) -> Result<Vec<u64>> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let n = pool.len();
    let k = m.min(n);
    let mut order: Vec<u64> = pool.to_vec();
    // Partial Fisher-Yates: the first k entries are the draw.
    for i in 0..k {
        let j = rng.gen_range(i..n);
        order.swap(i, j);
    }
    order.truncate(k);
    Ok(order)
}

/// Local execution: evaluate the received model's loss, then train for
/// `local_epochs` full-batch steps (with the proximal anchor under
/// FedProx) and return the pseudo-gradient.
pub fn client_execute(
    global: &ParamVector,
    client: &ClientDataset,
    cfg: &StrategyConfig,
) -> Result<ClientUpdate> {
    if client.samples.is_empty() {
        return Err(Error::DegenerateData(format!(
            "client {} has no samples",
            client.client_id
        )));
    }
    let raw = numerics::total_loss(global, &client.samples)?;
    let pre_loss = match cfg.loss_mode {
        LossMode::Sum => raw,
        LossMode::Mean => raw / client.samples.len() as f64,
    };
    let prox = match cfg.kind {
        StrategyKind::FedProx { mu } => Some(Proximal { mu, anchor: global }),
        _ => None,
    };
    let trained = numerics::sgd_epochs(
        global,
        &client.samples,
        cfg.local_rate,
        cfg.local_epochs,
        prox,
    )?;
    let delta = global.minus(&trained)?;
    Ok(ClientUpdate {
        client_id: client.client_id,
        pre_loss,
        delta,
        n_samples: client.samples.len(),
    })
}

/// Sample-count weights over the round's participants: `n_i / sum(n)`.
pub fn weights_fedavg(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::DegenerateData("cannot aggregate an empty update set".into()));
    }
    let total: usize = updates.iter().map(|u| u.n_samples).sum();
    Ok(updates.iter().map(|u| u.n_samples as f64 / total as f64).collect())
}

/// Softmax weights over the reported pre-training losses, stabilised by
/// max subtraction.
pub fn weights_fedloss(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::DegenerateData("cannot aggregate an empty update set".into()));
    }
    if let Some(bad) = updates.iter().find(|u| !u.pre_loss.is_finite()) {
        return Err(Error::NonFiniteLoss { client_id: bad.client_id });
    }
    let max = updates.iter().map(|u| u.pre_loss).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = updates.iter().map(|u| (u.pre_loss - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Global update: `theta - eta * sum(w_i * delta_i)`.
pub fn apply_update(
    global: &ParamVector,
    weights: &[f64],
    updates: &[ClientUpdate],
    eta: f64,
) -> Result<ParamVector> {
    if weights.len() != updates.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} updates",
            weights.len(),
            updates.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "aggregation weights must sum to 1, got {total}"
        )));
    }
    let mut new = global.clone();
    for (w, update) in weights.iter().zip(updates) {
        new.add_scaled(-eta * w, &update.delta)?;
    }
    Ok(new)
}

/// Per-client slice of a round's log.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundRecord {
    pub client_id: u64,
    pub label_class: ClassLabel,
    pub n_samples: usize,
    pub pre_loss: f64,
    pub weight: f64,
}

/// Everything recorded about one round: the participants (ascending
/// client id) with their losses and aggregation weights, per-class
/// weight/loss means, and the optional evaluation snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub clients: Vec<ClientRoundRecord>,
    pub mean_weight_pos: Option<f64>,
    pub mean_weight_neg: Option<f64>,
    pub mean_preloss_pos: Option<f64>,
    pub mean_preloss_neg: Option<f64>,
    pub metrics: Option<MetricsSnapshot>,
}

fn class_mean(records: &[ClientRoundRecord], positive: bool, f: impl Fn(&ClientRoundRecord) -> f64) -> Option<f64> {
    let vals: Vec<f64> = records
        .iter()
        .filter(|r| r.label_class.is_positive() == positive)
        .map(f)
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// One round of the engine: select, execute every selected client,
/// compute strategy weights, apply the global update. The reduction runs
/// in ascending client-id order, so the result does not depend on the
/// order clients happen to finish.
pub fn run_round(
    global: &ParamVector,
    pool: &[&ClientDataset],
    cfg: &StrategyConfig,
    rng: &mut ChaCha8Rng,
    round_index: usize,
) -> Result<(ParamVector, RoundLog)> {
    cfg.validate()?;
    let ids: Vec<u64> = pool.iter().map(|c| c.client_id).collect();
    let by_id: HashMap<u64, &ClientDataset> =
        pool.iter().map(|c| (c.client_id, *c)).collect();

    let mut selected = select_clients(&ids, cfg.clients_per_round, rng)?;
    selected.sort_unstable();

    let mut updates = Vec::with_capacity(selected.len());
    for id in &selected {
        let client = by_id[id];
        updates.push(client_execute(global, client, cfg)?);
    }

    let weights = match cfg.kind {
        StrategyKind::FedLoss => weights_fedloss(&updates)?,
        StrategyKind::FedAvg | StrategyKind::FedProx { .. } => weights_fedavg(&updates)?,
    };
    let new_global = apply_update(global, &weights, &updates, cfg.global_rate)?;

    let clients: Vec<ClientRoundRecord> = updates
        .iter()
        .zip(&weights)
        .map(|(u, &w)| ClientRoundRecord {
            client_id: u.client_id,
            label_class: by_id[&u.client_id].label_class,
            n_samples: u.n_samples,
            pre_loss: u.pre_loss,
            weight: w,
        })
        .collect();
    let log = RoundLog {
        round: round_index,
        mean_weight_pos: class_mean(&clients, true, |r| r.weight),
        mean_weight_neg: class_mean(&clients, false, |r| r.weight),
        mean_preloss_pos: class_mean(&clients, true, |r| r.pre_loss),
        mean_preloss_neg: class_mean(&clients, false, |r| r.pre_loss),
        clients,
        metrics: None,
    };
    Ok((new_global, log))
}

/// Score every sample of every client with the current model.
pub fn score_clients(params: &ParamVector, clients: &[ClientDataset]) -> Result<Vec<ScoredSample>> {
    let mut scored = Vec::new();
    for client in clients {
        for sample in &client.samples {
            let (p_neg, p_pos) = numerics::forward(params, sample)?;
            scored.push(ScoredSample::new(p_neg, p_pos, sample.label)?);
        }
    }
    Ok(scored)
}

fn evaluate(params: &ParamVector, test_clients: &[ClientDataset]) -> Result<Option<MetricsSnapshot>> {
    if test_clients.is_empty() {
        return Ok(None);
    }
    let scored = score_clients(params, test_clients)?;
    Ok(Some(metrics::snapshot(&scored)?))
}

/// A finished run: every round's log plus the final global model.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub history: Vec<RoundLog>,
    pub final_params: ParamVector,
}

/// The whole-pool schedule: `rounds` rounds sampling from every train
/// client, evaluating on the held-out clients every `eval_every` rounds
/// (and at the final round).
pub fn run_random_setting(
    initial: &ParamVector,
    split: &CohortSplit,
    cfg: &StrategyConfig,
    rounds: usize,
    eval_every: usize,
    seed: u64,
) -> Result<RunResult> {
    if eval_every == 0 {
        return Err(Error::InvalidConfig("eval_every must be at least 1".into()));
    }
    if split.train_clients.is_empty() {
        return Err(Error::EmptyPool);
    }
    let pool: Vec<&ClientDataset> = split.train_clients.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut global = initial.clone();
    let mut history = Vec::with_capacity(rounds);
    for round in 1..=rounds {
        let (next, mut log) = run_round(&global, &pool, cfg, &mut rng, round)?;
        global = next;
        if round % eval_every == 0 || round == rounds {
            log.metrics = evaluate(&global, &split.test_clients)?;
        }
        history.push(log);
    }
    Ok(RunResult { history, final_params: global })
}

/// The month-by-month schedule: for each month in order, only that
/// month's arrivals are selectable for `rounds_per_month` rounds; the
/// global model persists across months and is evaluated once at each
/// month end. Months with no train clients are skipped.
pub fn run_chronological_setting(
    initial: &ParamVector,
    split: &CohortSplit,
    cfg: &StrategyConfig,
    n_months: usize,
    rounds_per_month: usize,
    seed: u64,
) -> Result<RunResult> {
    if rounds_per_month == 0 {
        return Err(Error::InvalidConfig("rounds_per_month must be at least 1".into()));
    }
    let pools = monthly_pools(&split.train_clients, n_months)?;
    if pools.iter().all(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(
            "every monthly pool is empty; nothing to train on".into(),
        ));
    }
    let by_id: HashMap<u64, &ClientDataset> =
        split.train_clients.iter().map(|c| (c.client_id, c)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut global = initial.clone();
    let mut history = Vec::new();
    let mut round = 0;
    for (month, pool_ids) in pools.iter().enumerate() {
        if pool_ids.is_empty() {
            log::warn!("month {month}: no train clients arrived; skipping its rounds");
            continue;
        }
        let pool: Vec<&ClientDataset> = pool_ids.iter().map(|id| by_id[id]).collect();
        for r in 0..rounds_per_month {
            round += 1;
            let (next, mut log) = run_round(&global, &pool, cfg, &mut rng, round)?;
            global = next;
            if r + 1 == rounds_per_month {
                log.metrics = evaluate(&global, &split.test_clients)?;
            }
            history.push(log);
        }
    }
    Ok(RunResult { history, final_params: global })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write the evaluation trace: one row per round that carries a metrics
/// snapshot. Columns: round, strategy, auc, se, sp, se_at_80sp,
/// mean_weight_pos, mean_weight_neg, mean_preloss_pos, mean_preloss_neg.
pub fn write_trace_csv(out: impl Write, strategy: &str, history: &[RoundLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "round",
        "strategy",
        "auc",
        "se",
        "sp",
        "se_at_80sp",
        "mean_weight_pos",
        "mean_weight_neg",
        "mean_preloss_pos",
        "mean_preloss_neg",
    ])
    .map_err(csv_err)?;
    for log in history {
        let Some(m) = &log.metrics else { continue };
        w.write_record([
            log.round.to_string(),
            strategy.to_string(),
            m.auc.to_string(),
            m.se.to_string(),
            m.sp.to_string(),
            m.se_at_80sp.to_string(),
            fmt_opt(log.mean_weight_pos),
            fmt_opt(log.mean_weight_neg),
            fmt_opt(log.mean_preloss_pos),
            fmt_opt(log.mean_preloss_neg),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Write the per-round weight trace: one row per round. Columns:
/// round, mean_weight_pos, mean_weight_neg.
pub fn write_weight_csv(out: impl Write, history: &[RoundLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "mean_weight_pos", "mean_weight_neg"]).map_err(csv_err)?;
    for log in history {
        w.write_record([
            log.round.to_string(),
            fmt_opt(log.mean_weight_pos),
            fmt_opt(log.mean_weight_neg),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::ExperimentFailed(format!("csv write failed: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, split_clients, CohortConfig};
    use crate::numerics::{init_params, ModelSpec, Sample};
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_spec() -> ModelSpec {
        ModelSpec::new(2, 2, vec![]).unwrap()
    }

    fn tiny_client(id: u64, label: ClassLabel, samples: Vec<Sample>) -> ClientDataset {
        ClientDataset { client_id: id, label_class: label, join_month: 0, mixed: false, samples }
    }

    fn tiny_sample(a: f64, b: f64, label: ClassLabel) -> Sample {
        Sample::new(vec![a, b], vec![1, 0], label).unwrap()
    }

    fn tiny_pool(n: usize, seed: u64) -> Vec<ClientDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n as u64)
            .map(|id| {
                let label = if rng.gen::<f64>() < 0.3 {
                    ClassLabel::Positive
                } else {
                    ClassLabel::Negative
                };
                let k = rng.gen_range(1..4);
                let samples = (0..k)
                    .map(|_| tiny_sample(rng.gen::<f64>() - 0.5, rng.gen::<f64>() + 0.2, label))
                    .collect();
                tiny_client(id, label, samples)
            })
            .collect()
    }

    fn update_with(id: u64, loss: f64, n: usize, delta: ParamVector) -> ClientUpdate {
        ClientUpdate { client_id: id, pre_loss: loss, delta, n_samples: n }
    }

    #[test]
    fn select_whole_pool_when_m_exceeds_it() {
        let pool: Vec<u64> = (0..7).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut picked = select_clients(&pool, 30, &mut rng).unwrap();
        picked.sort_unstable();
        assert_eq!(picked, pool);
    }

    #[test]
    fn select_draws_distinct_ids() {
        let pool: Vec<u64> = (0..100).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let picked = select_clients(&pool, 30, &mut rng).unwrap();
        assert_eq!(picked.len(), 30);
        let set: std::collections::HashSet<u64> = picked.iter().copied().collect();
        assert_eq!(set.len(), 30);
    }

    #[test]
    fn select_rejects_empty_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(select_clients(&[], 5, &mut rng), Err(Error::EmptyPool)));
    }

    #[test]
    fn selection_is_uniform() {
        let pool: Vec<u64> = (0..10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = [0usize; 10];
        for _ in 0..20_000 {
            let picked = select_clients(&pool, 1, &mut rng).unwrap();
            counts[picked[0] as usize] += 1;
        }
        for (id, &c) in counts.iter().enumerate() {
            assert!(
                (1850..=2150).contains(&c),
                "id {id} drawn {c} times, expected 2000 +/- 150"
            );
        }
    }

    #[test]
    fn zero_rate_client_returns_zero_delta() {
        let spec = tiny_spec();
        let global = init_params(&spec, 5);
        let client = tiny_client(0, ClassLabel::Positive, vec![
            tiny_sample(0.4, -0.2, ClassLabel::Positive),
            tiny_sample(0.1, 0.3, ClassLabel::Positive),
        ]);
        let mut cfg = StrategyConfig::new(StrategyKind::FedAvg);
        cfg.local_rate = 0.0;
        let update = client_execute(&global, &client, &cfg).unwrap();
        assert!(update.delta.values().iter().all(|&v| v == 0.0));
        let eval = numerics::total_loss(&global, &client.samples).unwrap();
        assert_eq!(update.pre_loss, eval);
        assert_eq!(update.n_samples, 2);
    }

    #[test]
    fn single_epoch_delta_is_scaled_gradient() {
        let spec = tiny_spec();
        let global = init_params(&spec, 6);
        let client = tiny_client(1, ClassLabel::Negative, vec![
            tiny_sample(-0.3, 0.6, ClassLabel::Negative),
        ]);
        let cfg = StrategyConfig::new(StrategyKind::FedLoss);
        let update = client_execute(&global, &client, &cfg).unwrap();
        let g = numerics::gradient(&global, &client.samples).unwrap();
        for (d, g_i) in update.delta.values().iter().zip(g.values()) {
            let want = cfg.local_rate * g_i;
            assert!((d - want).abs() <= 1e-12 * want.abs().max(1.0), "{d} vs {want}");
        }
    }

    #[test]
    fn zero_global_preloss_counts_samples() {
        let spec = tiny_spec();
        let global = ParamVector::zeros(spec);
        let k = 3;
        let samples: Vec<Sample> =
            (0..k).map(|_| tiny_sample(0.2, 0.9, ClassLabel::Positive)).collect();
        let client = tiny_client(2, ClassLabel::Positive, samples);
        let cfg = StrategyConfig::new(StrategyKind::FedAvg);
        let update = client_execute(&global, &client, &cfg).unwrap();
        assert!((update.pre_loss - k as f64 * std::f64::consts::LN_2).abs() < 1e-12);

        let mut mean_cfg = cfg;
        mean_cfg.loss_mode = LossMode::Mean;
        let update = client_execute(&global, &client, &mean_cfg).unwrap();
        assert!((update.pre_loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn prox_kind_pulls_towards_anchor() {
        // With a proximal term, a long local run stays closer to the
        // received model than plain SGD does.
        let spec = tiny_spec();
        let global = init_params(&spec, 16);
        let client = tiny_client(0, ClassLabel::Positive, vec![
            tiny_sample(0.9, 0.8, ClassLabel::Positive),
        ]);
        let mut plain = StrategyConfig::new(StrategyKind::FedAvg);
        plain.local_epochs = 50;
        plain.local_rate = 0.2;
        let mut prox = plain;
        prox.kind = StrategyKind::FedProx { mu: 2.0 };
        let d_plain = client_execute(&global, &client, &plain).unwrap();
        let d_prox = client_execute(&global, &client, &prox).unwrap();
        let norm = |u: &ClientUpdate| {
            u.delta.values().iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        assert!(norm(&d_prox) < norm(&d_plain));
    }

    #[test]
    fn fedavg_weights_are_sample_fractions() {
        let spec = tiny_spec();
        let z = ParamVector::zeros(spec);
        let updates: Vec<ClientUpdate> =
            (0..5).map(|i| update_with(i, 1.0, 2, z.clone())).collect();
        let w = weights_fedavg(&updates).unwrap();
        assert!(w.iter().all(|&x| x == 0.2));

        let updates = vec![update_with(0, 1.0, 1, z.clone()), update_with(1, 1.0, 3, z)];
        let w = weights_fedavg(&updates).unwrap();
        assert_eq!(w, vec![0.25, 0.75]);
    }

    #[test]
    fn fedloss_weights_match_hand_softmax() {
        let spec = tiny_spec();
        let z = ParamVector::zeros(spec);
        let updates =
            vec![update_with(0, 0.0, 1, z.clone()), update_with(1, 3f64.ln(), 1, z.clone())];
        let w = weights_fedloss(&updates).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-12);
        assert!((w[1] - 0.75).abs() < 1e-12);

        let equal: Vec<ClientUpdate> =
            (0..8).map(|i| update_with(i, 2.5, 1, z.clone())).collect();
        let w = weights_fedloss(&equal).unwrap();
        assert!(w.iter().all(|&x| x == 0.125));
    }

    #[test]
    fn fedloss_weights_are_shift_invariant() {
        let spec = tiny_spec();
        let z = ParamVector::zeros(spec);
        let losses = [0.3, 1.7, 0.9, 2.2];
        let base: Vec<ClientUpdate> =
            losses.iter().enumerate().map(|(i, &l)| update_with(i as u64, l, 1, z.clone())).collect();
        for c in [-5.0, 17.0] {
            let shifted: Vec<ClientUpdate> = losses
                .iter()
                .enumerate()
                .map(|(i, &l)| update_with(i as u64, l + c, 1, z.clone()))
                .collect();
            let w0 = weights_fedloss(&base).unwrap();
            let w1 = weights_fedloss(&shifted).unwrap();
            for (a, b) in w0.iter().zip(&w1) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fedloss_rejects_non_finite_losses() {
        let spec = tiny_spec();
        let z = ParamVector::zeros(spec);
        let updates = vec![
            update_with(3, 1.0, 1, z.clone()),
            update_with(7, f64::NAN, 1, z),
        ];
        match weights_fedloss(&updates) {
            Err(Error::NonFiniteLoss { client_id }) => assert_eq!(client_id, 7),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn apply_update_zero_rate_keeps_global() {
        let spec = tiny_spec();
        let global = init_params(&spec, 9);
        let updates = vec![update_with(0, 1.0, 1, init_params(&spec, 10))];
        let out = apply_update(&global, &[1.0], &updates, 0.0).unwrap();
        assert_eq!(out.values(), global.values());
    }

    #[test]
    fn apply_update_single_client_lands_on_its_model() {
        let spec = tiny_spec();
        let global = init_params(&spec, 11);
        let trained = init_params(&spec, 12);
        let delta = global.minus(&trained).unwrap();
        let updates = vec![update_with(0, 1.0, 1, delta)];
        let out = apply_update(&global, &[1.0], &updates, 1.0).unwrap();
        for (o, t) in out.values().iter().zip(trained.values()) {
            assert!((o - t).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_update_equal_weights_is_midpoint() {
        let spec = ModelSpec::new(1, 1, vec![]).unwrap();
        let global = ParamVector::new(spec.clone(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let a = ParamVector::new(spec.clone(), vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        let b = ParamVector::new(spec, vec![2.0, 2.0, 3.0, 3.0, 4.0, 4.0]).unwrap();
        let updates = vec![
            update_with(0, 1.0, 1, global.minus(&a).unwrap()),
            update_with(1, 1.0, 1, global.minus(&b).unwrap()),
        ];
        let out = apply_update(&global, &[0.5, 0.5], &updates, 1.0).unwrap();
        let midpoint = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        for (o, m) in out.values().iter().zip(&midpoint) {
            assert!((o - m).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_update_checks_weight_normalisation() {
        let spec = tiny_spec();
        let global = init_params(&spec, 13);
        let updates = vec![update_with(0, 1.0, 1, ParamVector::zeros(tiny_spec()))];
        assert!(apply_update(&global, &[0.6], &updates, 1.0).is_err());
    }

    #[test]
    fn round_with_single_client_adopts_its_model() {
        let pool_data = tiny_pool(1, 21);
        let pool: Vec<&ClientDataset> = pool_data.iter().collect();
        let spec = tiny_spec();
        let global = init_params(&spec, 22);
        let cfg = StrategyConfig::new(StrategyKind::FedLoss);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (new_global, log) = run_round(&global, &pool, &cfg, &mut rng, 1).unwrap();
        let trained = numerics::sgd_epochs(
            &global,
            &pool_data[0].samples,
            cfg.local_rate,
            cfg.local_epochs,
            None,
        )
        .unwrap();
        for (o, t) in new_global.values().iter().zip(trained.values()) {
            assert!((o - t).abs() < 1e-12);
        }
        assert_eq!(log.clients.len(), 1);
        assert_eq!(log.clients[0].weight, 1.0);
    }

    #[test]
    fn identical_clients_make_strategies_agree() {
        // Equal losses and equal counts: both weightings collapse to
        // uniform, so the aggregated model is bit-identical.
        let sample = tiny_sample(0.3, 0.4, ClassLabel::Positive);
        let pool_data: Vec<ClientDataset> = (0..4)
            .map(|id| tiny_client(id, ClassLabel::Positive, vec![sample.clone()]))
            .collect();
        let pool: Vec<&ClientDataset> = pool_data.iter().collect();
        let spec = tiny_spec();
        let global = init_params(&spec, 23);

        let avg_cfg = StrategyConfig::new(StrategyKind::FedAvg);
        let loss_cfg = StrategyConfig::new(StrategyKind::FedLoss);
        let (g_avg, _) =
            run_round(&global, &pool, &avg_cfg, &mut ChaCha8Rng::seed_from_u64(7), 1).unwrap();
        let (g_loss, _) =
            run_round(&global, &pool, &loss_cfg, &mut ChaCha8Rng::seed_from_u64(7), 1).unwrap();
        assert_eq!(g_avg.values(), g_loss.values());
    }

    #[test]
    fn rounds_are_deterministic() {
        let pool_data = tiny_pool(40, 31);
        let pool: Vec<&ClientDataset> = pool_data.iter().collect();
        let global = init_params(&tiny_spec(), 32);
        let cfg = StrategyConfig::new(StrategyKind::FedLoss);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = global.clone();
            let mut logs = Vec::new();
            for t in 1..=5 {
                let (next, log) = run_round(&g, &pool, &cfg, &mut rng, t).unwrap();
                g = next;
                logs.push(log);
            }
            (g, logs)
        };
        let (g1, l1) = run(5);
        let (g2, l2) = run(5);
        assert_eq!(g1.values(), g2.values());
        assert_eq!(l1, l2);
    }

    #[test]
    fn round_log_per_class_means() {
        let pool_data = [tiny_client(0, ClassLabel::Positive, vec![tiny_sample(0.5, 0.1, ClassLabel::Positive)]),
            tiny_client(1, ClassLabel::Negative, vec![tiny_sample(-0.5, 0.2, ClassLabel::Negative)]),
            tiny_client(2, ClassLabel::Negative, vec![tiny_sample(0.2, -0.2, ClassLabel::Negative)])];
        let pool: Vec<&ClientDataset> = pool_data.iter().collect();
        let global = init_params(&tiny_spec(), 41);
        let cfg = StrategyConfig::new(StrategyKind::FedLoss);
        let (_, log) = run_round(&global, &pool, &cfg, &mut ChaCha8Rng::seed_from_u64(1), 1).unwrap();

        let pos: Vec<&ClientRoundRecord> =
            log.clients.iter().filter(|r| r.label_class.is_positive()).collect();
        let neg: Vec<&ClientRoundRecord> =
            log.clients.iter().filter(|r| !r.label_class.is_positive()).collect();
        assert_eq!(pos.len(), 1);
        assert_eq!(neg.len(), 2);
        assert_eq!(log.mean_weight_pos.unwrap(), pos[0].weight);
        let neg_mean = (neg[0].weight + neg[1].weight) / 2.0;
        assert!((log.mean_weight_neg.unwrap() - neg_mean).abs() < 1e-15);
        let total: f64 = log.clients.iter().map(|r| r.weight).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn preloss_in_log_matches_independent_recompute() {
        let pool_data = tiny_pool(12, 55);
        let pool: Vec<&ClientDataset> = pool_data.iter().collect();
        let global = init_params(&tiny_spec(), 56);
        let cfg = StrategyConfig::new(StrategyKind::FedLoss);
        let (_, log) = run_round(&global, &pool, &cfg, &mut ChaCha8Rng::seed_from_u64(3), 1).unwrap();
        for rec in &log.clients {
            let client = pool_data.iter().find(|c| c.client_id == rec.client_id).unwrap();
            let expect = numerics::total_loss(&global, &client.samples).unwrap();
            assert_eq!(rec.pre_loss, expect);
        }
    }

    #[test]
    fn full_participation_fedavg_is_a_centralised_step() {
        // M = |pool|, E = 1, eta = 1: one round must equal a single
        // gradient step on the pooled, count-weighted data.
        let pool_data = tiny_pool(9, 61);
        let pool: Vec<&ClientDataset> = pool_data.iter().collect();
        let global = init_params(&tiny_spec(), 62);
        let mut cfg = StrategyConfig::new(StrategyKind::FedAvg);
        cfg.clients_per_round = pool.len();
        let (engine, _) =
            run_round(&global, &pool, &cfg, &mut ChaCha8Rng::seed_from_u64(9), 1).unwrap();

        let total_n: usize = pool_data.iter().map(|c| c.samples.len()).sum();
        let mut direct = global.clone();
        let mut step = vec![0.0; global.values().len()];
        for client in &pool_data {
            let g = numerics::gradient(&global, &client.samples).unwrap();
            let w = client.samples.len() as f64 / total_n as f64;
            for (s, g_i) in step.iter_mut().zip(g.values()) {
                *s += w * cfg.local_rate * g_i;
            }
        }
        for (d, s) in direct.values_mut().iter_mut().zip(&step) {
            *d -= s;
        }
        for (a, b) in engine.values().iter().zip(direct.values()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    /// Split with a guaranteed two-class test set: every 4th client of
    /// each class is held out.
    fn stratified_split(cohort: Vec<ClientDataset>) -> CohortSplit {
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut counts = [0usize; 2];
        for client in cohort {
            let k = client.label_class.index();
            counts[k] += 1;
            if counts[k] % 4 == 0 {
                test.push(client);
            } else {
                train.push(client);
            }
        }
        CohortSplit { train_clients: train, test_clients: test }
    }

    #[test]
    fn random_setting_counts_snapshots() {
        let cohort = generate_cohort(&CohortConfig {
            n_positive_clients: 12,
            n_negative_clients: 36,
            ..CohortConfig::default()
        })
        .unwrap();
        let split = stratified_split(cohort);
        let spec = ModelSpec::new(32, 10, vec![8]).unwrap();
        let initial = init_params(&spec, 1);
        let mut cfg = StrategyConfig::new(StrategyKind::FedAvg);
        cfg.clients_per_round = 5;
        let result = run_random_setting(&initial, &split, &cfg, 100, 10, 4).unwrap();
        assert_eq!(result.history.len(), 100);
        let snapshots = result.history.iter().filter(|l| l.metrics.is_some()).count();
        assert_eq!(snapshots, 10);
    }

    #[test]
    fn zero_rounds_leave_model_untouched() {
        let cohort = generate_cohort(&CohortConfig {
            n_positive_clients: 4,
            n_negative_clients: 8,
            ..CohortConfig::default()
        })
        .unwrap();
        let split = split_clients(cohort, 0.25, 3).unwrap();
        let spec = ModelSpec::new(32, 10, vec![]).unwrap();
        let initial = init_params(&spec, 1);
        let cfg = StrategyConfig::new(StrategyKind::FedLoss);
        let result = run_random_setting(&initial, &split, &cfg, 0, 10, 4).unwrap();
        assert!(result.history.is_empty());
        assert_eq!(result.final_params.values(), initial.values());
    }

    #[test]
    fn chronological_single_month_reduces_to_random() {
        let mut cohort = generate_cohort(&CohortConfig {
            n_positive_clients: 10,
            n_negative_clients: 30,
            ..CohortConfig::default()
        })
        .unwrap();
        for c in &mut cohort {
            c.join_month = 0;
        }
        let split = stratified_split(cohort);
        let spec = ModelSpec::new(32, 10, vec![]).unwrap();
        let initial = init_params(&spec, 2);
        let mut cfg = StrategyConfig::new(StrategyKind::FedLoss);
        cfg.clients_per_round = 6;

        let chrono =
            run_chronological_setting(&initial, &split, &cfg, 1, 25, 77).unwrap();
        let random = run_random_setting(&initial, &split, &cfg, 25, 5, 77).unwrap();
        assert_eq!(chrono.final_params.values(), random.final_params.values());
        for (a, b) in chrono.history.iter().zip(&random.history) {
            let ids =
                |log: &RoundLog| log.clients.iter().map(|r| r.client_id).collect::<Vec<_>>();
            assert_eq!(ids(a), ids(b));
        }
    }

    #[test]
    fn chronological_emits_month_end_snapshots() {
        let cohort = generate_cohort(&CohortConfig {
            n_positive_clients: 60,
            n_negative_clients: 120,
            ..CohortConfig::default()
        })
        .unwrap();
        let split = stratified_split(cohort);
        let pools = monthly_pools(&split.train_clients, 12).unwrap();
        let nonempty = pools.iter().filter(|p| !p.is_empty()).count();

        let spec = ModelSpec::new(32, 10, vec![]).unwrap();
        let initial = init_params(&spec, 3);
        let mut cfg = StrategyConfig::new(StrategyKind::FedAvg);
        cfg.clients_per_round = 5;
        let result =
            run_chronological_setting(&initial, &split, &cfg, 12, 4, 9).unwrap();
        assert_eq!(result.history.len(), nonempty * 4);
        assert!(result.history.len() <= 48);
        let snapshots = result.history.iter().filter(|l| l.metrics.is_some()).count();
        assert_eq!(snapshots, nonempty);
    }

    #[test]
    fn chronological_rejects_all_empty_months() {
        let split = CohortSplit { train_clients: vec![], test_clients: vec![] };
        let spec = tiny_spec();
        let initial = init_params(&spec, 4);
        let cfg = StrategyConfig::new(StrategyKind::FedAvg);
        assert!(run_chronological_setting(&initial, &split, &cfg, 3, 5, 1).is_err());
    }

    #[test]
    fn trace_csv_has_one_row_per_snapshot() {
        let cohort = generate_cohort(&CohortConfig {
            n_positive_clients: 8,
            n_negative_clients: 16,
            ..CohortConfig::default()
        })
        .unwrap();
        let split = stratified_split(cohort);
        let spec = ModelSpec::new(32, 10, vec![]).unwrap();
        let initial = init_params(&spec, 1);
        let mut cfg = StrategyConfig::new(StrategyKind::FedLoss);
        cfg.clients_per_round = 4;
        let result = run_random_setting(&initial, &split, &cfg, 20, 5, 4).unwrap();

        let mut trace = Vec::new();
        write_trace_csv(&mut trace, "fedloss", &result.history).unwrap();
        let trace = String::from_utf8(trace).unwrap();
        assert_eq!(trace.lines().count(), 1 + 4); // header + 4 snapshots
        assert!(trace.lines().next().unwrap().starts_with("round,strategy,auc"));

        let mut weights = Vec::new();
        write_weight_csv(&mut weights, &result.history).unwrap();
        let weights = String::from_utf8(weights).unwrap();
        assert_eq!(weights.lines().count(), 1 + 20); // header + every round
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn weights_form_a_simplex(seed in 0u64..500, m in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = ParamVector::zeros(tiny_spec());
            let updates: Vec<ClientUpdate> = (0..m as u64)
                .map(|i| update_with(i, rng.gen::<f64>() * 40.0, rng.gen_range(1..6), z.clone()))
                .collect();
            for w in [weights_fedavg(&updates).unwrap(), weights_fedloss(&updates).unwrap()] {
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(w.iter().all(|&x| x >= 0.0));
            }
            // FedLoss weights are strictly positive and strictly ordered
            // by loss.
            let w = weights_fedloss(&updates).unwrap();
            prop_assert!(w.iter().all(|&x| x > 0.0));
            for i in 0..m {
                for j in 0..m {
                    if updates[i].pre_loss > updates[j].pre_loss {
                        prop_assert!(w[i] > w[j]);
                    }
                }
            }
        }

        #[test]
        fn unit_rate_round_stays_in_client_hull(seed in 0u64..40) {
            let pool_data = tiny_pool(6, seed);
            let pool: Vec<&ClientDataset> = pool_data.iter().collect();
            let global = init_params(&tiny_spec(), seed ^ 0xabc);
            let cfg = StrategyConfig::new(StrategyKind::FedLoss);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (new_global, log) = run_round(&global, &pool, &cfg, &mut rng, 1).unwrap();

            // Recompute each participant's trained model.
            let mut trained = Vec::new();
            for rec in &log.clients {
                let client = pool_data.iter().find(|c| c.client_id == rec.client_id).unwrap();
                trained.push(
                    numerics::sgd_epochs(&global, &client.samples, cfg.local_rate, 1, None)
                        .unwrap(),
                );
            }
            for (i, v) in new_global.values().iter().enumerate() {
                let lo = trained.iter().map(|t| t.values()[i]).fold(f64::INFINITY, f64::min);
                let hi = trained.iter().map(|t| t.values()[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9, "coord {i}: {v} outside [{lo}, {hi}]");
            }
        }
    }
}
