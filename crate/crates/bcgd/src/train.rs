//! The full quantized-training loop: resolution calibration from one
//! mini-batch, per-iteration coarse gradients, the blended update, and
//! per-epoch metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::act::{ActQuantizer, AlphaVariant, ALPHA_FLOOR};
use crate::data::{DataError, Dataset, MetricsRecord, RunMetrics};
use crate::matrix::Matrix;
use crate::net::{argmax_accuracy, ActFn, Labels, LinearLayer, LossKind, NetError, QuantNet};
use crate::optim::{BlendedState, Method, OptimError, OptimParams};
use crate::rng::{normal_vec, stream_rng, Stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, iteration {iteration}")]
    Diverged { epoch: usize, iteration: usize },
    #[error(transparent)]
    Config(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Run configuration; the text-file keys map onto these fields.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub bits_w: u32,
    pub bits_a: u32,
    pub variant: AlphaVariant,
    pub rho: f64,
    pub lr: f64,
    pub rate_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub keep_ends_float: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            bits_w: 1,
            bits_a: 4,
            variant: AlphaVariant::ThreeValued,
            rho: 1e-5,
            lr: 0.01,
            rate_factor: 0.01,
            momentum: 0.95,
            weight_decay: 1e-4,
            milestones: vec![],
            decay: 0.1,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            keep_ends_float: true,
        }
    }
}

impl TrainConfig {
    /// Builds a config from a parsed key/value map, defaulting absent keys.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, DataError> {
        let mut cfg = TrainConfig::default();
        let bad = |key: &str, value: &str| DataError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        for (key, value) in map {
            match key.as_str() {
                "bits_w" => cfg.bits_w = value.parse().map_err(|_| bad(key, value))?,
                "bits_a" => cfg.bits_a = value.parse().map_err(|_| bad(key, value))?,
                "variant" => {
                    cfg.variant = AlphaVariant::parse(value).ok_or_else(|| bad(key, value))?
                }
                "rho" => cfg.rho = value.parse().map_err(|_| bad(key, value))?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad(key, value))?,
                "rate_factor" => cfg.rate_factor = value.parse().map_err(|_| bad(key, value))?,
                "momentum" => cfg.momentum = value.parse().map_err(|_| bad(key, value))?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad(key, value))?,
                "milestones" => {
                    cfg.milestones = if value.is_empty() {
                        vec![]
                    } else {
                        value
                            .split(',')
                            .map(|t| t.trim().parse().map_err(|_| bad(key, value)))
                            .collect::<Result<_, _>>()?
                    }
                }
                "decay" => cfg.decay = value.parse().map_err(|_| bad(key, value))?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad(key, value))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad(key, value))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad(key, value))?,
                "keep_ends_float" => {
                    cfg.keep_ends_float = match value.as_str() {
                        "true" | "1" => true,
                        "false" | "0" => false,
                        _ => return Err(bad(key, value)),
                    }
                }
                _ => {
                    return Err(DataError::UnknownKey {
                        key: key.clone(),
                        valid: crate::data::CONFIG_KEYS.join(", "),
                    })
                }
            }
        }
        Ok(cfg)
    }

    fn optim_params(&self) -> OptimParams {
        OptimParams {
            rho: self.rho,
            eta_w: self.lr,
            rate_factor: self.rate_factor,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            milestones: self.milestones.clone(),
            decay: self.decay,
            bits_w: self.bits_w,
            keep_ends_float: self.keep_ends_float,
        }
    }
}

/// Result of one training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: RunMetrics,
    pub final_train_loss: f64,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
}

/// He-style initialization of an MLP with the layer widths
/// `[inputs, hidden..., classes]`.
fn init_net(dims: &[usize], cfg: &TrainConfig) -> Result<QuantNet, NetError> {
    let mut rng = stream_rng(cfg.seed, Stream::Init);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for pair in dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let scale = (2.0 / fan_in as f64).sqrt();
        let data: Vec<f64> =
            normal_vec(&mut rng, fan_in * fan_out).into_iter().map(|x| scale * x).collect();
        layers.push(LinearLayer::new(
            Matrix::from_vec(fan_out, fan_in, data),
            Some(vec![0.0; fan_out]),
        ));
    }
    let quantizers = (0..dims.len() - 2)
        .map(|_| ActQuantizer::new(cfg.bits_a, 1.0, cfg.variant).expect("valid defaults"))
        .collect();
    QuantNet::new(layers, quantizers, LossKind::SoftmaxCrossEntropy)
}

/// Sets each resolution to `1/(2^bits - 1)` of the maximal value of its
/// layer's float feature map over one mini-batch.
fn calibrate_alphas(net: &mut QuantNet, batch: &Matrix) -> Result<(), NetError> {
    if net.quantizers().is_empty() {
        return Ok(());
    }
    let float_net = net.clone().with_act_fn(ActFn::Relu);
    let cache = float_net.forward(batch)?;
    let denom = (net.quantizers()[0].levels() - 1) as f64;
    for j in 0..net.quantizers().len() {
        let peak = cache
            .pre_activation(j)
            .iter()
            .fold(0.0f64, |m, &x| m.max(x.max(0.0)));
        let alpha = if peak > 0.0 { peak / denom } else { 1.0 / denom };
        net.set_alpha(j, alpha.max(ALPHA_FLOOR));
    }
    Ok(())
}

fn full_eval(
    net: &QuantNet,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<(f64, f64, Vec<f64>), TrainError> {
    let cache = net.forward(inputs)?;
    let owned = Labels::Classes(labels.to_vec());
    let grads = net.coarse_backward(&cache, &owned)?;
    let norms = grads.weights.iter().map(|g| g.frobenius_norm()).collect();
    Ok((grads.loss, argmax_accuracy(cache.logits(), labels), norms))
}

/// Trains an MLP on the dataset with an 80/20 train/validation split,
/// recording metrics once per epoch. `hidden` lists the hidden layer
/// widths.
pub fn train(
    dataset: &Dataset,
    hidden: &[usize],
    cfg: &TrainConfig,
    method: Method,
) -> Result<(TrainOutcome, QuantNet), TrainError> {
    let (train_set, val_set) = dataset.split_train_val();
    let mut dims = vec![dataset.meta.feature_count];
    dims.extend_from_slice(hidden);
    dims.push(dataset.meta.class_count);

    let mut net = init_net(&dims, cfg)?;

    // resolution calibration on one mini-batch of the float model
    let batch_size = cfg.batch_size.max(1).min(train_set.len());
    let mut init_rng = stream_rng(cfg.seed, Stream::Init);
    let mut calibration: Vec<usize> = (0..train_set.len()).collect();
    calibration.shuffle(&mut init_rng);
    calibration.truncate(batch_size);
    let (calib_batch, _) = train_set.gather(&calibration);
    calibrate_alphas(&mut net, &calib_batch)?;

    let mut state = BlendedState::init(&mut net, cfg.optim_params())?;
    let mut metrics = RunMetrics::new(dims.len() - 1, dims.len().saturating_sub(2));
    let mut shuffle_rng = stream_rng(cfg.seed, Stream::Shuffle);
    let mut iteration = 0usize;

    for epoch in 0..cfg.epochs {
        state.apply_schedule(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(batch_size) {
            let (batch, batch_labels) = train_set.gather(chunk);
            let cache = net.forward(&batch)?;
            let grads = net.coarse_backward(&cache, &Labels::Classes(batch_labels))?;
            if !grads.loss.is_finite() {
                return Err(TrainError::Diverged { epoch, iteration });
            }
            state
                .step(&mut net, &grads, method)
                .map_err(|e| match e {
                    OptimError::NonFinite { .. } => TrainError::Diverged { epoch, iteration },
                    other => TrainError::Optim(other),
                })?;
            iteration += 1;
        }

        let (train_loss, train_acc, grad_norms) =
            full_eval(&net, &train_set.inputs, &train_set.labels)?;
        let val_cache = net.forward(&val_set.inputs)?;
        let val_acc = argmax_accuracy(val_cache.logits(), &val_set.labels);
        if !train_loss.is_finite() {
            return Err(TrainError::Diverged { epoch, iteration });
        }
        metrics.push(MetricsRecord {
            epoch,
            iteration,
            train_loss,
            train_acc,
            val_acc,
            alphas: net.quantizers().iter().map(|q| q.alpha()).collect(),
            shadow_dists: state.shadow_distances(),
            grad_norms,
        })?;
    }

    let (final_train_loss, final_train_acc, _) = if cfg.epochs > 0 {
        let last = metrics.records().last().unwrap();
        (last.train_loss, last.train_acc, ())
    } else {
        let (l, a, _) = full_eval(&net, &train_set.inputs, &train_set.labels)?;
        (l, a, ())
    };
    let val_cache = net.forward(&val_set.inputs)?;
    let final_val_acc = argmax_accuracy(val_cache.logits(), &val_set.labels);

    Ok((
        TrainOutcome { metrics, final_train_loss, final_train_acc, final_val_acc },
        net,
    ))
}
