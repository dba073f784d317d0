use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{loss_and_offset_grad, BlMode, LossWeights};
use super::{
    backprop, check_features, forward_activations, Architecture, DropoutMask, EncodedExample,
    Estimator, ModelParams, TrainingExample, DEFAULT_EMBEDDING_STD, DEFAULT_HIDDEN,
};
use crate::error::{Error, Result};
use crate::featurizer::Featurizer;
use crate::geo::ExtentOffsets;
use crate::rng::{seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Dropout rate of the layer between the hidden layers, used for MC scoring.
    pub dropout_rate: f64,
    /// Rate used while training; `None` means the same as `dropout_rate`.
    pub train_dropout_rate: Option<f64>,
    pub seed: u64,
    pub bl_mode: BlMode,
    pub weights: LossWeights,
    pub hidden: usize,
    pub nonneg: bool,
    /// Every extent starts here before training.
    pub init_offset_deg: f64,
    pub embedding_init_std: f64,
    /// Multiplies the learning rate after each epoch.
    pub lr_decay: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 30,
            dropout_rate: 0.95,
            train_dropout_rate: None,
            seed: 0,
            bl_mode: BlMode::Hinge,
            weights: LossWeights::default(),
            hidden: DEFAULT_HIDDEN,
            nonneg: true,
            init_offset_deg: 0.5,
            embedding_init_std: DEFAULT_EMBEDDING_STD,
            lr_decay: 1.0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn effective_train_dropout(&self) -> f64 {
        self.train_dropout_rate.unwrap_or(self.dropout_rate)
    }

    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| (0.0..1.0).contains(&r);
        if !rate_ok(self.dropout_rate) || !rate_ok(self.effective_train_dropout()) {
            return Err(Error::InvalidConfig("dropout rates must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig("batch size and hidden width must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be >= 0 and decay > 0".into()));
        }
        if !(self.embedding_init_std.is_finite() && self.embedding_init_std >= 0.0) {
            return Err(Error::InvalidConfig("embedding_init_std must be finite and >= 0".into()));
        }
        let w = &self.weights;
        if [w.alpha, w.beta, w.gamma].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean loss over the dataset before training, then after each epoch,
    /// measured with a fixed set of dropout masks.
    pub loss_curve: Vec<f64>,
}

fn sample_mask(rate: f64, width: usize, rng: &mut Rng) -> Option<DropoutMask> {
    (rate > 0.0).then(|| DropoutMask::sample(rate, width, rng))
}

/// Mean loss over `batch` and its gradient with respect to every parameter.
pub fn backward(
    params: &ModelParams,
    batch: &[EncodedExample],
    masks: &[Option<DropoutMask>],
    weights: &LossWeights,
    mode: BlMode,
) -> Result<(f64, Vec<f64>)> {
    if masks.len() != batch.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} masks for {} examples",
            masks.len(),
            batch.len()
        )));
    }
    let mut grad = vec![0.0; params.len()];
    let pairs: Vec<_> = batch.iter().zip(masks.iter().map(Option::as_ref)).collect();
    let loss = accumulate(params, &pairs, weights, mode, &mut grad)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    Ok((loss, grad))
}

fn accumulate(
    params: &ModelParams,
    batch: &[(&EncodedExample, Option<&DropoutMask>)],
    weights: &LossWeights,
    mode: BlMode,
    grad: &mut [f64],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for &(ex, mask) in batch {
        let act = forward_activations(params, &ex.features, mask)?;
        let (loss, d_out) = loss_and_offset_grad(
            ex.center,
            ex.label,
            ExtentOffsets::from_array(act.out),
            weights,
            mode,
        );
        total += loss;
        backprop(params, &ex.features, &act, d_out.map(|g| g * inv_n), grad);
    }
    Ok(total * inv_n)
}

struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(cfg: AdamConfig, n: usize) -> Self {
        Adam {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, lr: f64, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.cfg;
        let step = lr * (1.0 - beta2.powi(self.t)).sqrt() / (1.0 - beta1.powi(self.t));
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= step * *m / (v.sqrt() + epsilon);
        }
    }
}

fn dataset_loss(
    params: &ModelParams,
    data: &[EncodedExample],
    masks: &[Option<DropoutMask>],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (ex, mask) in data.iter().zip(masks) {
        let act = forward_activations(params, &ex.features, mask.as_ref())?;
        let (loss, _) = loss_and_offset_grad(
            ex.center,
            ex.label,
            ExtentOffsets::from_array(act.out),
            &cfg.weights,
            cfg.bl_mode,
        );
        total += loss;
    }
    let mean = total / data.len() as f64;
    if !mean.is_finite() {
        return Err(Error::Numerical("loss diverged".into()));
    }
    Ok(mean)
}

/// Trains freshly initialized parameters.
pub fn train(arch: Architecture, config: &TrainConfig, data: &[EncodedExample]) -> Result<TrainOutcome> {
    let params = ModelParams::init_with(arch, config.seed, config.init_offset_deg, config.embedding_init_std);
    train_from(params, config, data)
}

/// Continues training from `params`.
pub fn train_from(
    mut params: ModelParams,
    config: &TrainConfig,
    data: &[EncodedExample],
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    for ex in data {
        check_features(&params.arch, &ex.features)?;
    }
    let width = params.arch.hidden;
    let rate = config.effective_train_dropout();

    let mut eval_rng = seeded(config.seed, "eval-masks");
    let eval_masks: Vec<_> = data.iter().map(|_| sample_mask(rate, width, &mut eval_rng)).collect();

    let mut rng = seeded(config.seed, "train");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut adam = Adam::new(config.adam, params.len());
    let mut grad = vec![0.0; params.len()];
    let mut masks: Vec<Option<DropoutMask>> = Vec::with_capacity(config.batch_size);
    let mut lr = config.learning_rate;

    let mut loss_curve = vec![dataset_loss(&params, data, &eval_masks, config)?];
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            masks.clear();
            masks.extend(chunk.iter().map(|_| sample_mask(rate, width, &mut rng)));
            let batch: Vec<_> = chunk.iter().map(|&i| &data[i]).zip(masks.iter().map(Option::as_ref)).collect();
            grad.fill(0.0);
            accumulate(&params, &batch, &config.weights, config.bl_mode, &mut grad)?;
            adam.step(lr, &mut params.values, &grad);
            if !params.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite parameters after a step in epoch {}",
                    epoch + 1
                )));
            }
        }
        lr *= config.lr_decay;
        let loss = dataset_loss(&params, data, &eval_masks, config)?;
        debug!("epoch {}: mean loss {loss:.4}", epoch + 1);
        loss_curve.push(loss);
    }
    Ok(TrainOutcome { params, loss_curve })
}

pub fn encode_examples(featurizer: &Featurizer, examples: &[TrainingExample]) -> Vec<EncodedExample> {
    examples
        .iter()
        .map(|ex| EncodedExample {
            features: featurizer.encode(&ex.request),
            center: ex.request.center,
            label: ex.booked,
        })
        .collect()
}

/// Fits vocabulary and statistics on `examples`, then trains a model on them.
pub fn fit_estimator(examples: &[TrainingExample], config: &TrainConfig) -> Result<(Estimator, Vec<f64>)> {
    let featurizer = Featurizer::fit(examples.iter().map(|e| &e.request))?;
    let data = encode_examples(&featurizer, examples);
    let arch = Architecture::for_vocab(&featurizer.vocab, config.hidden, config.nonneg);
    let outcome = train(arch, config, &data)?;
    info!(
        "trained on {} examples: loss {:.3} -> {:.3}",
        data.len(),
        outcome.loss_curve.first().copied().unwrap_or(f64::NAN),
        outcome.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok((Estimator::new(featurizer, outcome.params, config.clone()), outcome.loss_curve))
}
