//! The contextual bounds estimator.
//!
//! Embeddings for the categorical slots are concatenated with the continuous
//! slots and fed through `dense(256) → ReLU → dropout → dense(256) → ReLU →
//! dense(4)`. The four raw outputs go through softplus so the predicted
//! extents are nonnegative; that map can be switched off, in which case the
//! valid-bounds loss term is what keeps boxes from inverting.
//!
//! All parameters live in one flat `Vec<f64>`; [`Layout`] names the slices.
//! Dropout masks are explicit arguments, so forward and backward are pure
//! functions of `(params, features, mask)`.

mod checkpoint;
mod loss;
mod train;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featurizer::{
    embedding_dim, hex_digest, FeatureVector, Featurizer, SearchRequest, Vocabulary, N_CATEGORICAL,
    N_CONTINUOUS,
};
use crate::geo::{to_box, BoundingBox, ExtentOffsets, GeoPoint};
use crate::rng::seeded;

pub use checkpoint::{load_checkpoint, load_checkpoint_for_vocab, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use loss::{
    bl_loss, loss_and_offset_grad, rbs_loss, total_loss, vb_loss, BlMode, LossWeights,
};
pub use train::{
    backward, encode_examples, fit_estimator, train, train_from, AdamConfig, TrainConfig,
    TrainOutcome,
};

pub const OUTPUTS: usize = 4;
/// Rows the model has never trained on stay far from trained ones, which
/// is what lets MC dropout tell rare contexts apart.
pub const DEFAULT_EMBEDDING_STD: f64 = 1.0;
pub const DEFAULT_HIDDEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub vocab_sizes: [usize; N_CATEGORICAL],
    pub embedding_dims: [usize; N_CATEGORICAL],
    pub hidden: usize,
    /// Softplus on the raw outputs.
    pub nonneg: bool,
}

impl Architecture {
    pub fn for_vocab(vocab: &Vocabulary, hidden: usize, nonneg: bool) -> Self {
        let vocab_sizes = vocab.sizes();
        Architecture {
            vocab_sizes,
            embedding_dims: vocab_sizes.map(embedding_dim),
            hidden,
            nonneg,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.embedding_dims.iter().sum::<usize>() + N_CONTINUOUS
    }
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embeddings: [usize; N_CATEGORICAL],
    /// `hidden × input`, row per hidden unit.
    pub w1: usize,
    pub b1: usize,
    /// `hidden × hidden`, row per *input* unit of layer 2.
    pub w2: usize,
    pub b2: usize,
    /// `4 × hidden`, row per output.
    pub w3: usize,
    pub b3: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(arch: &Architecture) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let embeddings =
            std::array::from_fn(|s| take(arch.vocab_sizes[s] * arch.embedding_dims[s]));
        let (h, d) = (arch.hidden, arch.input_dim());
        let w1 = take(h * d);
        let b1 = take(h);
        let w2 = take(h * h);
        let b2 = take(h);
        let w3 = take(OUTPUTS * h);
        let b3 = take(OUTPUTS);
        Layout { embeddings, w1, b1, w2, b2, w3, b3, len: at }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub layout: Layout,
    pub values: Vec<f64>,
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y - 1), stable for small y
    y + (-(-y).exp_m1()).ln()
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        let layout = Layout::new(&arch);
        ModelParams {
            values: vec![0.0; layout.len],
            arch,
            layout,
        }
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&arch);
        if values.len() != layout.len {
            return Err(Error::DimensionMismatch(format!(
                "architecture needs {} parameters, got {}",
                layout.len,
                values.len()
            )));
        }
        Ok(ModelParams { arch, layout, values })
    }

    /// He-initialized dense layers, unit-normal embeddings, and an output
    /// bias that starts every extent at `init_offset_deg`.
    pub fn init(arch: Architecture, seed: u64, init_offset_deg: f64) -> Self {
        Self::init_with(arch, seed, init_offset_deg, DEFAULT_EMBEDDING_STD)
    }

    pub fn init_with(arch: Architecture, seed: u64, init_offset_deg: f64, embedding_std: f64) -> Self {
        let mut p = Self::zeros(arch);
        let mut rng = seeded(seed, "model-init");
        let (h, d) = (p.arch.hidden, p.arch.input_dim());
        let l = p.layout.clone();
        let mut fill = |vals: &mut [f64], std: f64| {
            let n = Normal::new(0.0, std).expect("finite std");
            for v in vals {
                *v = n.sample(&mut rng);
            }
        };
        fill(&mut p.values[l.embeddings[0]..l.w1], embedding_std);
        fill(&mut p.values[l.w1..l.b1], (2.0 / d as f64).sqrt());
        fill(&mut p.values[l.w2..l.b2], (2.0 / h as f64).sqrt());
        fill(&mut p.values[l.w3..l.b3], (1.0 / h as f64).sqrt() * 0.1);
        // off the ReLU kink when every upstream unit is inactive
        p.values[l.b1..l.w2].fill(0.01);
        p.values[l.b2..l.w3].fill(0.01);
        let bias = if p.arch.nonneg {
            softplus_inverse(init_offset_deg.max(1e-6))
        } else {
            init_offset_deg
        };
        p.values[l.b3..l.len].fill(bias);
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn embedding_row(&self, slot: usize, index: usize) -> &[f64] {
        let dim = self.arch.embedding_dims[slot];
        let at = self.layout.embeddings[slot] + index * dim;
        &self.values[at..at + dim]
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Content hash of the architecture and parameter bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("architecture serializes"));
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex_digest(&h.finalize()[..16])
    }
}

/// Inverted dropout mask over the first hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub rate: f64,
    pub keep: Vec<bool>,
}

impl DropoutMask {
    pub fn sample<R: Rng + ?Sized>(rate: f64, width: usize, rng: &mut R) -> Self {
        let keep = (0..width).map(|_| rng.random::<f64>() >= rate).collect();
        DropoutMask { rate, keep }
    }

    pub fn keep_all(width: usize) -> Self {
        DropoutMask {
            rate: 0.0,
            keep: vec![true; width],
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 / (1.0 - self.rate)
    }

    pub fn kept(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, k)| k.then_some(i))
            .collect()
    }
}

/// Intermediate values of one forward pass, restricted to the kept units of
/// the first hidden layer.
#[derive(Debug, Clone)]
pub struct Activations {
    pub input: Vec<f64>,
    pub kept: Vec<usize>,
    pub z1: Vec<f64>,
    /// Post-dropout first-layer outputs, aligned with `kept`.
    pub d1: Vec<f64>,
    pub z2: Vec<f64>,
    pub h2: Vec<f64>,
    pub raw: [f64; OUTPUTS],
    pub out: [f64; OUTPUTS],
    pub scale: f64,
}

pub(crate) fn check_features(arch: &Architecture, fv: &FeatureVector) -> Result<()> {
    for (slot, &idx) in fv.categorical.iter().enumerate() {
        if idx as usize >= arch.vocab_sizes[slot] {
            return Err(Error::DimensionMismatch(format!(
                "slot {slot} index {idx} exceeds vocabulary size {}",
                arch.vocab_sizes[slot]
            )));
        }
    }
    Ok(())
}

pub fn forward_activations(
    params: &ModelParams,
    fv: &FeatureVector,
    mask: Option<&DropoutMask>,
) -> Result<Activations> {
    let arch = &params.arch;
    check_features(arch, fv)?;
    let (h, d) = (arch.hidden, arch.input_dim());
    if let Some(m) = mask {
        if m.keep.len() != h {
            return Err(Error::DimensionMismatch(format!(
                "mask width {} != hidden width {h}",
                m.keep.len()
            )));
        }
    }
    let l = &params.layout;
    let v = &params.values;

    let mut input = Vec::with_capacity(d);
    for (slot, &idx) in fv.categorical.iter().enumerate() {
        input.extend_from_slice(params.embedding_row(slot, idx as usize));
    }
    input.extend_from_slice(&fv.continuous);

    let (kept, scale) = match mask {
        Some(m) => (m.kept(), m.scale()),
        None => ((0..h).collect(), 1.0),
    };
    let mut z1 = Vec::with_capacity(kept.len());
    let mut d1 = Vec::with_capacity(kept.len());
    for &k in &kept {
        let row = &v[l.w1 + k * d..l.w1 + (k + 1) * d];
        let z = dot(row, &input) + v[l.b1 + k];
        z1.push(z);
        d1.push(z.max(0.0) * scale);
    }

    let mut z2 = v[l.b2..l.b2 + h].to_vec();
    for (&k, &a) in kept.iter().zip(&d1) {
        if a != 0.0 {
            axpy(a, &v[l.w2 + k * h..l.w2 + (k + 1) * h], &mut z2);
        }
    }
    let h2: Vec<f64> = z2.iter().map(|z| z.max(0.0)).collect();

    let mut raw = [0.0; OUTPUTS];
    for (o, r) in raw.iter_mut().enumerate() {
        *r = dot(&v[l.w3 + o * h..l.w3 + (o + 1) * h], &h2) + v[l.b3 + o];
    }
    let out = if arch.nonneg { raw.map(softplus) } else { raw };
    Ok(Activations { input, kept, z1, d1, z2, h2, raw, out, scale })
}

/// Predicted extents for one feature vector.
pub fn forward(
    params: &ModelParams,
    fv: &FeatureVector,
    mask: Option<&DropoutMask>,
) -> Result<ExtentOffsets> {
    Ok(ExtentOffsets::from_array(forward_activations(params, fv, mask)?.out))
}

/// Accumulates `scale · ∂(loss)/∂θ` into `grad`, given `d_out = ∂loss/∂out`.
pub(crate) fn backprop(
    params: &ModelParams,
    fv: &FeatureVector,
    act: &Activations,
    d_out: [f64; OUTPUTS],
    grad: &mut [f64],
) {
    let arch = &params.arch;
    let (h, d) = (arch.hidden, arch.input_dim());
    let l = &params.layout;
    let v = &params.values;

    let mut d_raw = d_out;
    if arch.nonneg {
        for (g, r) in d_raw.iter_mut().zip(act.raw) {
            *g *= sigmoid(r);
        }
    }

    let mut d_h2 = vec![0.0; h];
    for (o, &g) in d_raw.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad[l.b3 + o] += g;
        axpy(g, &act.h2, &mut grad[l.w3 + o * h..l.w3 + (o + 1) * h]);
        axpy(g, &v[l.w3 + o * h..l.w3 + (o + 1) * h], &mut d_h2);
    }
    let d_z2: Vec<f64> = d_h2
        .iter()
        .zip(&act.z2)
        .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
        .collect();
    axpy(1.0, &d_z2, &mut grad[l.b2..l.b2 + h]);

    let mut d_input = vec![0.0; d];
    for (i, &k) in act.kept.iter().enumerate() {
        let a = act.d1[i];
        if a != 0.0 {
            axpy(a, &d_z2, &mut grad[l.w2 + k * h..l.w2 + (k + 1) * h]);
        }
        if act.z1[i] <= 0.0 {
            continue;
        }
        let d_z1 = dot(&v[l.w2 + k * h..l.w2 + (k + 1) * h], &d_z2) * act.scale;
        if d_z1 == 0.0 {
            continue;
        }
        grad[l.b1 + k] += d_z1;
        axpy(d_z1, &act.input, &mut grad[l.w1 + k * d..l.w1 + (k + 1) * d]);
        axpy(d_z1, &v[l.w1 + k * d..l.w1 + (k + 1) * d], &mut d_input);
    }

    let mut at = 0;
    for (slot, &idx) in fv.categorical.iter().enumerate() {
        let dim = arch.embedding_dims[slot];
        let row = l.embeddings[slot] + idx as usize * dim;
        axpy(1.0, &d_input[at..at + dim], &mut grad[row..row + dim]);
        at += dim;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// One attributed booking: the originating search and where the guest stayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub request: SearchRequest,
    pub booked: GeoPoint,
}

/// A training example after featurization.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub features: FeatureVector,
    pub center: GeoPoint,
    pub label: GeoPoint,
}

/// A trained model together with everything needed to featurize requests.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimator {
    pub featurizer: Featurizer,
    pub params: ModelParams,
    pub config: TrainConfig,
    pub version: String,
}

impl Estimator {
    pub fn new(featurizer: Featurizer, params: ModelParams, config: TrainConfig) -> Self {
        let version = model_version(&featurizer.vocab, &params);
        Estimator { featurizer, params, config, version }
    }

    pub fn encode(&self, req: &SearchRequest) -> FeatureVector {
        self.featurizer.encode(req)
    }

    /// Deterministic pass without dropout.
    pub fn predict_plain(&self, req: &SearchRequest) -> Result<BoundingBox> {
        let o = forward(&self.params, &self.encode(req), None)?;
        Ok(to_box(req.center, o))
    }
}

pub fn model_version(vocab: &Vocabulary, params: &ModelParams) -> String {
    format!("{}-{}", vocab.fingerprint(), params.digest())
}

#[cfg(test)]
mod tests;
