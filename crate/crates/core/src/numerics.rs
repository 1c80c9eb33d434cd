//! Minimal differentiable classifier: concatenated two-branch input
//! (dense embedding + multi-hot symptoms), fully connected ReLU hidden
//! layers, and a two-way softmax output. Cross-entropy loss, analytic
//! gradients via backpropagation, and full-batch SGD. Everything is
//! `f64` and deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The output layer is always a binary softmax.
pub const N_CLASSES: usize = 2;

/// Binary class label; `Positive` is the disease/minority class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ClassLabel {
    Negative,
    Positive,
}

impl ClassLabel {
    /// Output index of this class (negative = 0, positive = 1).
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Negative => 0,
            ClassLabel::Positive => 1,
        }
    }

    pub fn is_positive(self) -> bool {
        matches!(self, ClassLabel::Positive)
    }
}

impl TryFrom<u8> for ClassLabel {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(ClassLabel::Negative),
            1 => Ok(ClassLabel::Positive),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<ClassLabel> for u8 {
    fn from(label: ClassLabel) -> u8 {
        label.index() as u8
    }
}

/// Architecture descriptor. The parameter layout is fully determined by
/// it: for each layer, a row-major `(out x in)` weight matrix followed
/// by `out` biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub embed_dim: usize,
    pub symptom_dim: usize,
    pub hidden_dims: Vec<usize>,
}

impl ModelSpec {
    pub fn new(embed_dim: usize, symptom_dim: usize, hidden_dims: Vec<usize>) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::InvalidSpec("embed_dim must be positive".into()));
        }
        if symptom_dim == 0 {
            return Err(Error::InvalidSpec("symptom_dim must be positive".into()));
        }
        if hidden_dims.contains(&0) {
            return Err(Error::InvalidSpec("hidden_dims entries must be positive".into()));
        }
        Ok(ModelSpec { embed_dim, symptom_dim, hidden_dims })
    }

    /// Width of the concatenated input vector.
    pub fn input_dim(&self) -> usize {
        self.embed_dim + self.symptom_dim
    }

    /// (in, out) dimensions of each fully connected layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim();
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, N_CLASSES));
        dims
    }

    /// Total number of parameters (weights + biases over all layers).
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

/// Flat parameter vector tied to the `ModelSpec` it conforms to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    spec: ModelSpec,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters for spec, got {}",
                spec.param_count(),
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::TrainingDivergence("non-finite parameter value".into()));
        }
        Ok(ParamVector { spec, values })
    }

    pub fn zeros(spec: ModelSpec) -> Self {
        let n = spec.param_count();
        ParamVector { spec, values: vec![0.0; n] }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &ParamVector) -> bool {
        self.spec == other.spec
    }

    fn check_same_shape(&self, other: &ParamVector, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!("{what}: model specs differ")));
        }
        Ok(())
    }

    /// Element-wise `self - other`.
    pub fn minus(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_same_shape(other, "minus")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(ParamVector { spec: self.spec.clone(), values })
    }

    /// In-place `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &ParamVector) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }
}

/// One labelled observation: dense embedding, multi-hot symptom vector,
/// and the binary outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub embedding: Vec<f64>,
    pub symptoms: Vec<u8>,
    pub label: ClassLabel,
}

impl Sample {
    pub fn new(embedding: Vec<f64>, symptoms: Vec<u8>, label: ClassLabel) -> Result<Self> {
        if symptoms.iter().any(|&s| s > 1) {
            return Err(Error::InvalidSpec("symptom entries must be 0 or 1".into()));
        }
        Ok(Sample { embedding, symptoms, label })
    }

    fn check_dims(&self, spec: &ModelSpec) -> Result<()> {
        if self.embedding.len() != spec.embed_dim || self.symptoms.len() != spec.symptom_dim {
            return Err(Error::ShapeMismatch(format!(
                "sample dims ({}, {}) do not match spec ({}, {})",
                self.embedding.len(),
                self.symptoms.len(),
                spec.embed_dim,
                spec.symptom_dim
            )));
        }
        Ok(())
    }

    /// Concatenated input vector fed to the first layer.
    fn input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.embedding.len() + self.symptoms.len());
        x.extend_from_slice(&self.embedding);
        x.extend(self.symptoms.iter().map(|&s| f64::from(s)));
        x
    }
}

/// Initialise parameters: weights uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
/// biases zero. Bit-identical for identical `(spec, seed)`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for (in_dim, out_dim) in spec.layer_dims() {
        let bound = 1.0 / (in_dim as f64).sqrt();
        for _ in 0..in_dim * out_dim {
            let u: f64 = rng.gen();
            values.push((2.0 * u - 1.0) * bound);
        }
        values.extend(std::iter::repeat_n(0.0, out_dim));
    }
    ParamVector { spec: spec.clone(), values }
}

/// Per-layer slices into the flat parameter vector.
struct Layers<'a> {
    weights: Vec<&'a [f64]>,
    biases: Vec<&'a [f64]>,
    dims: Vec<(usize, usize)>,
}

fn layers(params: &ParamVector) -> Layers<'_> {
    let dims = params.spec.layer_dims();
    let mut weights = Vec::with_capacity(dims.len());
    let mut biases = Vec::with_capacity(dims.len());
    let mut off = 0;
    for &(in_dim, out_dim) in &dims {
        weights.push(&params.values[off..off + in_dim * out_dim]);
        off += in_dim * out_dim;
        biases.push(&params.values[off..off + out_dim]);
        off += out_dim;
    }
    Layers { weights, biases, dims }
}

/// Forward pass keeping every layer's activations (input included) for
/// backpropagation. Returns (activations, logits).
fn forward_traced(params: &ParamVector, sample: &Sample) -> Result<(Vec<Vec<f64>>, [f64; 2])> {
    sample.check_dims(&params.spec)?;
    let layers = layers(params);
    let n_layers = layers.dims.len();
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    acts.push(sample.input());

    for l in 0..n_layers {
        let (in_dim, out_dim) = layers.dims[l];
        let w = layers.weights[l];
        let b = layers.biases[l];
        let x = &acts[l];
        let mut z = vec![0.0; out_dim];
        for (o, z_o) in z.iter_mut().enumerate() {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            *z_o = acc;
        }
        if l + 1 == n_layers {
            return Ok((acts, [z[0], z[1]]));
        }
        for v in &mut z {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        acts.push(z);
    }
    unreachable!("model always has an output layer");
}

fn softmax2(logits: [f64; 2]) -> (f64, f64) {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    (e0 / z, e1 / z)
}

/// Log of the softmax normaliser, numerically stable.
fn log_sum_exp2(logits: [f64; 2]) -> f64 {
    let m = logits[0].max(logits[1]);
    m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln()
}

/// Class probabilities `(p_neg, p_pos)` for one sample.
pub fn forward(params: &ParamVector, sample: &Sample) -> Result<(f64, f64)> {
    let (_, logits) = forward_traced(params, sample)?;
    Ok(softmax2(logits))
}

/// Total (summed, not averaged) cross-entropy over `data`. Empty data
/// yields zero.
pub fn total_loss(params: &ParamVector, data: &[Sample]) -> Result<f64> {
    let mut loss = 0.0;
    for sample in data {
        let (_, logits) = forward_traced(params, sample)?;
        loss += log_sum_exp2(logits) - logits[sample.label.index()];
    }
    Ok(loss)
}

/// Analytic gradient of `total_loss` with respect to every parameter.
pub fn gradient(params: &ParamVector, data: &[Sample]) -> Result<ParamVector> {
    let dims = params.spec.layer_dims();
    let n_layers = dims.len();
    let mut grad = vec![0.0; params.values.len()];

    // Offsets of each layer's weight and bias blocks.
    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = 0;
    for &(in_dim, out_dim) in &dims {
        offsets.push((off, off + in_dim * out_dim));
        off += (in_dim + 1) * out_dim;
    }

    for sample in data {
        let (acts, logits) = forward_traced(params, sample)?;
        let (p_neg, p_pos) = softmax2(logits);

        // dL/dlogits = p - onehot(label)
        let mut delta = vec![p_neg, p_pos];
        delta[sample.label.index()] -= 1.0;

        let layer_views = layers(params);
        for l in (0..n_layers).rev() {
            let (in_dim, out_dim) = dims[l];
            let (w_off, b_off) = offsets[l];
            let x = &acts[l];
            for o in 0..out_dim {
                let d = delta[o];
                let g_row = &mut grad[w_off + o * in_dim..w_off + (o + 1) * in_dim];
                for (g, xi) in g_row.iter_mut().zip(x) {
                    *g += d * xi;
                }
                grad[b_off + o] += d;
            }
            if l > 0 {
                // Propagate through the ReLU of the previous layer:
                // a zero activation means the unit was clipped.
                let w = layer_views.weights[l];
                let mut prev = vec![0.0; in_dim];
                for (i, p) in prev.iter_mut().enumerate() {
                    if x[i] > 0.0 {
                        let mut acc = 0.0;
                        for (o, d) in delta.iter().enumerate() {
                            acc += w[o * in_dim + i] * d;
                        }
                        *p = acc;
                    }
                }
                delta = prev;
            }
        }
    }

    Ok(ParamVector { spec: params.spec.clone(), values: grad })
}

/// Optional proximal term for local training: pulls the iterate towards
/// `anchor` with strength `mu`.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub mu: f64,
    pub anchor: &'a ParamVector,
}

/// `epochs` full-batch gradient steps of rate `rate` on the summed
/// cross-entropy, plus `(mu/2)·||theta - anchor||^2` when a proximal
/// term is given.
pub fn sgd_epochs(
    params: &ParamVector,
    data: &[Sample],
    rate: f64,
    epochs: usize,
    prox: Option<Proximal<'_>>,
) -> Result<ParamVector> {
    if let Some(p) = prox {
        params.check_same_shape(p.anchor, "proximal anchor")?;
    }
    let mut theta = params.clone();
    for _ in 0..epochs {
        let mut g = gradient(&theta, data)?;
        if let Some(p) = prox {
            for ((g_i, t_i), a_i) in g.values.iter_mut().zip(&theta.values).zip(&p.anchor.values) {
                *g_i += p.mu * (t_i - a_i);
            }
        }
        if !g.is_finite() {
            return Err(Error::TrainingDivergence("non-finite gradient".into()));
        }
        for (t, g_i) in theta.values.iter_mut().zip(&g.values) {
            *t -= rate * g_i;
        }
        if !theta.is_finite() {
            return Err(Error::TrainingDivergence("non-finite parameters after step".into()));
        }
    }
    Ok(theta)
}
