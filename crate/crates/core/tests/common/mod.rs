//! Shared helpers for the integration and acceptance suites.

use fedsim::cohort::ClientDataset;
use fedsim::metrics::ScoredSample;
use fedsim::numerics::{self, ModelSpec, ParamVector, Sample};

/// Single-node baseline: full-batch gradient descent on the mean
/// cross-entropy of the pooled samples. Used as an oracle for what the
/// synthetic task supports; deliberately independent of the federation
/// engine.
pub fn train_centralized(
    spec: &ModelSpec,
    data: &[Sample],
    epochs: usize,
    rate: f64,
    seed: u64,
) -> ParamVector {
    let mut params = numerics::init_params(spec, seed);
    let scale = rate / data.len() as f64;
    for _ in 0..epochs {
        let g = numerics::gradient(&params, data).expect("gradient on pooled data");
        let values = params.values_mut();
        for (p, g_i) in values.iter_mut().zip(g.values()) {
            *p -= scale * g_i;
        }
    }
    params
}

/// Pool every sample of every client.
pub fn pooled_samples(clients: &[ClientDataset]) -> Vec<Sample> {
    clients.iter().flat_map(|c| c.samples.iter().cloned()).collect()
}

/// Score all samples of all clients with a model.
pub fn score(params: &ParamVector, clients: &[ClientDataset]) -> Vec<ScoredSample> {
    fedsim::federation::score_clients(params, clients).expect("scoring test clients")
}
