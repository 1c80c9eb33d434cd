//! Synthetic cohort generation: single-class clients with a heavy
//! single-sample skew, a globally imbalanced class mix, monthly arrival,
//! and a client-level train/test split. Feature vectors come from a
//! class-conditional Gaussian (embeddings) plus per-symptom Bernoulli
//! draws with deliberately overlapping rates, so the two classes are
//! confusable but separable.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ClassLabel, Sample};

/// Distribution of per-client sample counts: probability `p_single` of
/// exactly one sample, otherwise a geometric tail starting at two with
/// per-count stop probability `tail_stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleCountDist {
    pub p_single: f64,
    pub tail_stop: f64,
}

impl Default for SampleCountDist {
    /// 72% single-sample clients with mean about 1.56 samples/client,
    /// which scales to roughly 4,612 samples at the default cohort size.
    fn default() -> Self {
        SampleCountDist { p_single: 0.72, tail_stop: 0.5 }
    }
}

impl SampleCountDist {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_single) {
            return Err(Error::InvalidConfig(format!(
                "samples_per_client.p_single must lie in [0, 1], got {}",
                self.p_single
            )));
        }
        if !(self.tail_stop > 0.0 && self.tail_stop <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "samples_per_client.tail_stop must lie in (0, 1], got {}",
                self.tail_stop
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        if rng.gen::<f64>() < self.p_single {
            return 1;
        }
        let mut count = 2;
        while rng.gen::<f64>() > self.tail_stop {
            count += 1;
        }
        count
    }

    pub fn mean(&self) -> f64 {
        self.p_single + (1.0 - self.p_single) * (1.0 + 1.0 / self.tail_stop)
    }
}

/// Class-conditional feature distributions. `separability` scales the
/// distance of the two embedding means from their midpoint; zero makes
/// the embedding branches identical across classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub embed_dim: usize,
    pub symptom_dim: usize,
    pub embed_mean_neg: Vec<f64>,
    pub embed_mean_pos: Vec<f64>,
    pub embed_std: Vec<f64>,
    pub symptom_rates_neg: Vec<f64>,
    pub symptom_rates_pos: Vec<f64>,
    pub separability: f64,
}

impl Default for FeatureModel {
    fn default() -> Self {
        // Most of the class signal sits in the binary symptom rates;
        // the embedding carries a weaker, noisier share. The rates
        // overlap on purpose: some positives show no symptoms and a
        // large share of negatives are symptomatic.
        FeatureModel {
            embed_dim: 32,
            symptom_dim: 10,
            embed_mean_neg: vec![-0.05; 32],
            embed_mean_pos: vec![0.05; 32],
            embed_std: vec![1.0; 32],
            symptom_rates_neg: vec![0.28, 0.24, 0.20, 0.17, 0.14, 0.11, 0.09, 0.07, 0.05, 0.03],
            symptom_rates_pos: vec![0.50, 0.45, 0.40, 0.36, 0.32, 0.25, 0.18, 0.12, 0.08, 0.05],
            separability: 1.0,
        }
    }
}

impl FeatureModel {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.symptom_dim == 0 {
            return Err(Error::InvalidConfig(
                "feature_model dims must be positive".into(),
            ));
        }
        for (name, v) in [
            ("embed_mean_neg", &self.embed_mean_neg),
            ("embed_mean_pos", &self.embed_mean_pos),
            ("embed_std", &self.embed_std),
        ] {
            if v.len() != self.embed_dim {
                return Err(Error::InvalidConfig(format!(
                    "feature_model.{name} must have embed_dim = {} entries",
                    self.embed_dim
                )));
            }
        }
        if self.embed_std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::InvalidConfig(
                "feature_model.embed_std entries must be > 0".into(),
            ));
        }
        for (name, v) in [
            ("symptom_rates_neg", &self.symptom_rates_neg),
            ("symptom_rates_pos", &self.symptom_rates_pos),
        ] {
            if v.len() != self.symptom_dim {
                return Err(Error::InvalidConfig(format!(
                    "feature_model.{name} must have symptom_dim = {} entries",
                    self.symptom_dim
                )));
            }
            if v.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidConfig(format!(
                    "feature_model.{name} entries must lie in [0, 1]"
                )));
            }
        }
        if self.separability.is_nan() || self.separability < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "feature_model.separability must be nonnegative, got {}",
                self.separability
            )));
        }
        Ok(())
    }

    /// Effective embedding mean for a class: midpoint plus the scaled
    /// class offset.
    fn effective_mean(&self, label: ClassLabel, dim: usize) -> f64 {
        let center = 0.5 * (self.embed_mean_neg[dim] + self.embed_mean_pos[dim]);
        let class_mean = match label {
            ClassLabel::Negative => self.embed_mean_neg[dim],
            ClassLabel::Positive => self.embed_mean_pos[dim],
        };
        center + self.separability * (class_mean - center)
    }

    fn draw(&self, label: ClassLabel, rng: &mut ChaCha8Rng) -> Sample {
        let embedding = (0..self.embed_dim)
            .map(|d| {
                let normal = Normal::new(self.effective_mean(label, d), self.embed_std[d])
                    .expect("validated std is positive and finite");
                normal.sample(rng)
            })
            .collect();
        let rates = match label {
            ClassLabel::Negative => &self.symptom_rates_neg,
            ClassLabel::Positive => &self.symptom_rates_pos,
        };
        let symptoms = rates.iter().map(|&p| u8::from(rng.gen::<f64>() < p)).collect();
        Sample { embedding, symptoms, label }
    }
}

/// Arrival weights mirroring a collection campaign: a ramp up to a peak
/// at the middle month, then a slow wind-down. A baseline floor keeps
/// every month's pool viable for sampling. Normalised to sum to one.
pub fn default_arrival_weights(n_months: usize) -> Vec<f64> {
    let peak = n_months / 2;
    let width = (n_months as f64 / 7.0).max(1.0);
    let raw: Vec<f64> = (0..n_months)
        .map(|m| {
            if m <= peak {
                let d = (m as f64 - peak as f64).powi(2);
                0.25 + (-d / (2.0 * width * width)).exp()
            } else {
                (0.25 + 1.0 - 0.12 * (m - peak) as f64).max(0.15)
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Full description of a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_positive_clients: usize,
    pub n_negative_clients: usize,
    pub samples_per_client: SampleCountDist,
    pub n_months: usize,
    pub monthly_arrival_weights: Vec<f64>,
    pub feature_model: FeatureModel,
    /// Fraction of clients whose samples may carry either label.
    pub mixed_class_fraction: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    /// The reference population: 482 positive and 2,478 negative
    /// clients, twelve months of arrivals, mean 1.56 samples/client.
    fn default() -> Self {
        CohortConfig {
            n_positive_clients: 482,
            n_negative_clients: 2478,
            samples_per_client: SampleCountDist::default(),
            n_months: 12,
            monthly_arrival_weights: default_arrival_weights(12),
            feature_model: FeatureModel::default(),
            mixed_class_fraction: 0.0,
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        self.samples_per_client.validate()?;
        self.feature_model.validate()?;
        if self.n_months == 0 {
            return Err(Error::InvalidConfig("n_months must be positive".into()));
        }
        if self.monthly_arrival_weights.len() != self.n_months {
            return Err(Error::InvalidConfig(format!(
                "monthly_arrival_weights must have n_months = {} entries, got {}",
                self.n_months,
                self.monthly_arrival_weights.len()
            )));
        }
        if self.monthly_arrival_weights.iter().any(|&w| w.is_nan() || w < 0.0) {
            return Err(Error::InvalidConfig(
                "monthly_arrival_weights entries must be nonnegative".into(),
            ));
        }
        let total: f64 = self.monthly_arrival_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "monthly_arrival_weights must sum to 1 (got {total})"
            )));
        }
        if !(0.0..=1.0).contains(&self.mixed_class_fraction) {
            return Err(Error::InvalidConfig(format!(
                "mixed_class_fraction must lie in [0, 1], got {}",
                self.mixed_class_fraction
            )));
        }
        Ok(())
    }
}

/// One client's private data. All samples share `label_class` unless the
/// client was generated with `mixed = true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: u64,
    pub label_class: ClassLabel,
    pub join_month: usize,
    #[serde(default)]
    pub mixed: bool,
    pub samples: Vec<Sample>,
}

impl ClientDataset {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }
}

/// Client-level train/test partition of a cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSplit {
    pub train_clients: Vec<ClientDataset>,
    pub test_clients: Vec<ClientDataset>,
}

/// Generate the cohort: positives get ids `0..n_positive`, negatives
/// follow. One sequential RNG stream makes the result a pure function of
/// the config.
pub fn generate_cohort(config: &CohortConfig) -> Result<Vec<ClientDataset>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let total = config.n_positive_clients + config.n_negative_clients;
    let mut cohort = Vec::with_capacity(total);

    // Cumulative arrival weights for the join-month draw.
    let mut cum = Vec::with_capacity(config.n_months);
    let mut acc = 0.0;
    for &w in &config.monthly_arrival_weights {
        acc += w;
        cum.push(acc);
    }

    for client_id in 0..total as u64 {
        let label_class = if (client_id as usize) < config.n_positive_clients {
            ClassLabel::Positive
        } else {
            ClassLabel::Negative
        };
        let mixed = rng.gen::<f64>() < config.mixed_class_fraction;
        let n_samples = config.samples_per_client.sample(&mut rng);
        let u: f64 = rng.gen();
        let join_month = cum.partition_point(|&c| c < u).min(config.n_months - 1);
        let samples = (0..n_samples)
            .map(|_| {
                let label = if mixed && rng.gen::<bool>() {
                    match label_class {
                        ClassLabel::Positive => ClassLabel::Negative,
                        ClassLabel::Negative => ClassLabel::Positive,
                    }
                } else {
                    label_class
                };
                config.feature_model.draw(label, &mut rng)
            })
            .collect();
        cohort.push(ClientDataset { client_id, label_class, join_month, mixed, samples });
    }
    Ok(cohort)
}

/// Hold out `round(test_fraction * N)` clients uniformly at random.
/// The split is by client, never by sample; both halves come back
/// sorted by client id.
pub fn split_clients(
    cohort: Vec<ClientDataset>,
    test_fraction: f64,
    seed: u64,
) -> Result<CohortSplit> {
    if cohort.is_empty() {
        return Err(Error::InvalidConfig("cannot split an empty cohort".into()));
    }
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::InvalidConfig(format!(
            "test_fraction must lie in [0, 1], got {test_fraction}"
        )));
    }
    let n = cohort.len();
    let n_test = (test_fraction * n as f64).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    // Partial Fisher-Yates: the first n_test entries are a uniform
    // draw without replacement.
    for i in 0..n_test.min(n.saturating_sub(1)) {
        let j = rng.gen_range(i..n);
        order.swap(i, j);
    }
    let mut test_idx: Vec<usize> = order[..n_test].to_vec();
    test_idx.sort_unstable();

    let mut train_clients = Vec::with_capacity(n - n_test);
    let mut test_clients = Vec::with_capacity(n_test);
    let mut next_test = 0;
    for (i, client) in cohort.into_iter().enumerate() {
        if next_test < test_idx.len() && test_idx[next_test] == i {
            test_clients.push(client);
            next_test += 1;
        } else {
            train_clients.push(client);
        }
    }
    train_clients.sort_by_key(|c| c.client_id);
    test_clients.sort_by_key(|c| c.client_id);
    Ok(CohortSplit { train_clients, test_clients })
}

/// Partition train client ids by join month: pool `m` holds exactly the
/// clients that joined in month `m`.
pub fn monthly_pools(train_clients: &[ClientDataset], n_months: usize) -> Result<Vec<Vec<u64>>> {
    let mut pools = vec![Vec::new(); n_months];
    for client in train_clients {
        if client.join_month >= n_months {
            return Err(Error::InvalidConfig(format!(
                "client {} joined in month {} but only {} months are configured",
                client.client_id, client.join_month, n_months
            )));
        }
        pools[client.join_month].push(client.client_id);
    }
    Ok(pools)
}

/// Write one client per line as JSON.
pub fn save_cohort(path: &Path, cohort: &[ClientDataset]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for client in cohort {
        let line = serde_json::to_string(client)
            .map_err(|e| Error::InvalidConfig(format!("cohort serialisation failed: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Read a line-delimited cohort file, validating every client invariant:
/// parseable labels, nonempty single-class samples (unless marked mixed),
/// 0/1 symptoms, consistent feature dimensions, and unique client ids.
pub fn load_cohort(path: &Path) -> Result<Vec<ClientDataset>> {
    let reader = BufReader::new(File::open(path)?);
    let mut cohort: Vec<ClientDataset> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut seen_ids = std::collections::HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let bad = |message: String| Error::InvalidCohortFile { line: line_no, message };
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let client: ClientDataset =
            serde_json::from_str(&line).map_err(|e| bad(format!("parse error: {e}")))?;
        if client.samples.is_empty() {
            return Err(bad(format!("client {} has no samples", client.client_id)));
        }
        if !seen_ids.insert(client.client_id) {
            return Err(bad(format!("duplicate client id {}", client.client_id)));
        }
        for sample in &client.samples {
            if !client.mixed && sample.label != client.label_class {
                return Err(bad(format!(
                    "client {} is single-class but carries a {:?} sample",
                    client.client_id, sample.label
                )));
            }
            if sample.symptoms.iter().any(|&s| s > 1) {
                return Err(bad(format!(
                    "client {} has a symptom entry outside {{0, 1}}",
                    client.client_id
                )));
            }
            if !sample.embedding.iter().all(|v| v.is_finite()) {
                return Err(bad(format!(
                    "client {} has a non-finite embedding value",
                    client.client_id
                )));
            }
            let d = (sample.embedding.len(), sample.symptoms.len());
            match dims {
                None => dims = Some(d),
                Some(expected) if expected != d => {
                    return Err(bad(format!(
                        "client {} has feature dims {:?}, expected {:?}",
                        client.client_id, d, expected
                    )));
                }
                _ => {}
            }
        }
        cohort.push(client);
    }
    Ok(cohort)
}
