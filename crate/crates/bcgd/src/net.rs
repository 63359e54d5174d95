//! Fully-connected networks with quantized activations and the modified
//! chain rule.
//!
//! Forward passes run through the staircase activation; the backward pass
//! replaces its almost-everywhere-zero derivative with the clipped-ReLU
//! derivative in `x` and the selected variant in `alpha`. The last linear
//! layer needs no substitute, so its gradient is the true loss gradient.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::act::{ActQuantizer, AlphaVariant};
use crate::matrix::Matrix;
use crate::weights;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("dimension mismatch: {0}")]
    ShapeMismatch(String),
    #[error("network was mutated after the cache was built")]
    StaleCache,
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("checkpoint error at {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error(transparent)]
    Weights(#[from] weights::WeightError),
}

/// Loss attached to the network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    SquaredError,
}

/// Forward activation between linear layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActFn {
    /// The staircase activation (training target).
    Quantized,
    /// Its clipped-ReLU envelope; the backward proxies are exact here.
    Clipped,
    /// Plain ReLU, used for the float pass that calibrates `alpha`.
    Relu,
}

/// Batch labels: class indices for cross-entropy, target rows for squared
/// error.
#[derive(Debug, Clone)]
pub enum Labels {
    Classes(Vec<usize>),
    Targets(Matrix),
}

/// One linear layer, `weight` is `out x in`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl LinearLayer {
    pub fn new(weight: Matrix, bias: Option<Vec<f64>>) -> Self {
        LinearLayer { weight, bias }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// MLP with one activation quantizer between consecutive linear layers.
#[derive(Debug, Clone)]
pub struct QuantNet {
    layers: Vec<LinearLayer>,
    quantizers: Vec<ActQuantizer>,
    loss: LossKind,
    act_fn: ActFn,
    version: u64,
}

/// Values cached by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    input: Matrix,
    /// Pre-activation output of every linear layer; the last entry is the
    /// logits.
    pre_acts: Vec<Matrix>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Matrix {
        self.pre_acts.last().expect("network has at least one layer")
    }

    pub fn pre_activation(&self, layer: usize) -> &Matrix {
        &self.pre_acts[layer]
    }
}

/// Gradients produced by one coarse backward pass, batch-mean convention.
#[derive(Debug, Clone)]
pub struct CoarseGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Option<Vec<f64>>>,
    /// One scalar per activation quantizer: elementwise sum, batch mean.
    pub alphas: Vec<f64>,
    pub loss: f64,
}

impl CoarseGrads {
    pub fn all_finite(&self) -> bool {
        self.loss.is_finite()
            && self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self
                .biases
                .iter()
                .flatten()
                .all(|b| b.iter().all(|x| x.is_finite()))
            && self.alphas.iter().all(|a| a.is_finite())
    }
}

impl QuantNet {
    pub fn new(
        layers: Vec<LinearLayer>,
        quantizers: Vec<ActQuantizer>,
        loss: LossKind,
    ) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::InvalidArchitecture("no layers".into()));
        }
        if quantizers.len() + 1 != layers.len() {
            return Err(NetError::InvalidArchitecture(format!(
                "{} layers need {} quantizers, got {}",
                layers.len(),
                layers.len() - 1,
                quantizers.len()
            )));
        }
        for (j, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NetError::InvalidArchitecture(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    j,
                    pair[0].out_dim(),
                    j + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (j, layer) in layers.iter().enumerate() {
            if let Some(b) = &layer.bias {
                if b.len() != layer.out_dim() {
                    return Err(NetError::InvalidArchitecture(format!(
                        "layer {} bias length {} != out dim {}",
                        j,
                        b.len(),
                        layer.out_dim()
                    )));
                }
            }
        }
        Ok(QuantNet { layers, quantizers, loss, act_fn: ActFn::Quantized, version: 0 })
    }

    pub fn with_act_fn(mut self, act_fn: ActFn) -> Self {
        self.act_fn = act_fn;
        self.version += 1;
        self
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn quantizers(&self) -> &[ActQuantizer] {
        &self.quantizers
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn act_fn(&self) -> ActFn {
        self.act_fn
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Replaces the weights of layer `j` and invalidates outstanding caches.
    pub fn set_layer_weights(&mut self, j: usize, weight: Matrix) {
        assert_eq!(
            (weight.rows(), weight.cols()),
            (self.layers[j].weight.rows(), self.layers[j].weight.cols()),
            "replacement weights must keep the layer shape"
        );
        self.layers[j].weight = weight;
        self.version += 1;
    }

    pub fn set_layer_bias(&mut self, j: usize, bias: Vec<f64>) {
        assert_eq!(Some(bias.len()), self.layers[j].bias.as_ref().map(|b| b.len()));
        self.layers[j].bias = Some(bias);
        self.version += 1;
    }

    pub fn set_alpha(&mut self, j: usize, alpha: f64) {
        self.quantizers[j].set_alpha(alpha);
        self.version += 1;
    }

    fn activate(&self, q: &ActQuantizer, x: f64) -> f64 {
        match self.act_fn {
            ActFn::Quantized => q.apply(x),
            ActFn::Clipped => q.clipped(x),
            ActFn::Relu => x.max(0.0),
        }
    }

    fn linear(&self, j: usize, input: &Matrix) -> Matrix {
        let mut out = input.matmul_nt(&self.layers[j].weight);
        if let Some(bias) = &self.layers[j].bias {
            for r in 0..out.rows() {
                for c in 0..out.cols() {
                    let v = out.get(r, c) + bias[c];
                    out.set(r, c, v);
                }
            }
        }
        out
    }

    /// Runs the batch through the network, caching every pre-activation.
    pub fn forward(&self, batch: &Matrix) -> Result<ForwardCache, NetError> {
        if batch.cols() != self.input_dim() {
            return Err(NetError::ShapeMismatch(format!(
                "batch width {} != input dim {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        let mut current = self.linear(0, batch);
        pre_acts.push(current.clone());
        for j in 1..self.layers.len() {
            let q = &self.quantizers[j - 1];
            let activated = current.map(|x| self.activate(q, x));
            current = self.linear(j, &activated);
            pre_acts.push(current.clone());
        }
        Ok(ForwardCache { version: self.version, input: batch.clone(), pre_acts })
    }

    /// Batch-mean loss and its gradient w.r.t. the logits.
    pub fn loss_and_dlogits(
        &self,
        logits: &Matrix,
        labels: &Labels,
    ) -> Result<(f64, Matrix), NetError> {
        let n = logits.rows();
        match (self.loss, labels) {
            (LossKind::SoftmaxCrossEntropy, Labels::Classes(classes)) => {
                if classes.len() != n {
                    return Err(NetError::ShapeMismatch(format!(
                        "{} labels for {} rows",
                        classes.len(),
                        n
                    )));
                }
                let k = logits.cols();
                let mut dl = Matrix::zeros(n, k);
                let mut total = 0.0;
                for r in 0..n {
                    let row = logits.row(r);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    let c = classes[r];
                    if c >= k {
                        return Err(NetError::ShapeMismatch(format!(
                            "class {} out of range for {} outputs",
                            c, k
                        )));
                    }
                    total += z.ln() - (row[c] - m);
                    for j in 0..k {
                        let p = exps[j] / z;
                        dl.set(r, j, (p - if j == c { 1.0 } else { 0.0 }) / n as f64);
                    }
                }
                Ok((total / n as f64, dl))
            }
            (LossKind::SquaredError, Labels::Targets(targets)) => {
                if targets.rows() != n || targets.cols() != logits.cols() {
                    return Err(NetError::ShapeMismatch(format!(
                        "targets {}x{} for logits {}x{}",
                        targets.rows(),
                        targets.cols(),
                        n,
                        logits.cols()
                    )));
                }
                let mut dl = Matrix::zeros(n, logits.cols());
                let mut total = 0.0;
                for r in 0..n {
                    for c in 0..logits.cols() {
                        let diff = logits.get(r, c) - targets.get(r, c);
                        total += 0.5 * diff * diff;
                        dl.set(r, c, diff / n as f64);
                    }
                }
                Ok((total / n as f64, dl))
            }
            _ => Err(NetError::ShapeMismatch(
                "label kind does not match the configured loss".into(),
            )),
        }
    }

    /// Back-propagates with the substitute derivatives, returning batch-mean
    /// gradients for all weights, biases and resolutions.
    pub fn coarse_backward(
        &self,
        cache: &ForwardCache,
        labels: &Labels,
    ) -> Result<CoarseGrads, NetError> {
        if cache.version != self.version {
            return Err(NetError::StaleCache);
        }
        let l = self.layers.len();
        let (loss, dlogits) = self.loss_and_dlogits(cache.logits(), labels)?;

        let mut weight_grads: Vec<Option<Matrix>> = (0..l).map(|_| None).collect();
        let mut bias_grads: Vec<Option<Vec<f64>>> = (0..l).map(|_| None).collect();
        let mut alpha_grads = vec![0.0; self.quantizers.len()];

        // delta = dLoss/d(pre-activation of layer j), starting at the top
        let mut delta = dlogits;
        for j in (0..l).rev() {
            let input_acts: Matrix = if j == 0 {
                cache.input.clone()
            } else {
                let q = &self.quantizers[j - 1];
                cache.pre_acts[j - 1].map(|x| self.activate(q, x))
            };
            weight_grads[j] = Some(delta.matmul_tn(&input_acts));
            if self.layers[j].bias.is_some() {
                let mut bg = vec![0.0; self.layers[j].out_dim()];
                for r in 0..delta.rows() {
                    for (c, acc) in bg.iter_mut().enumerate() {
                        *acc += delta.get(r, c);
                    }
                }
                bias_grads[j] = Some(bg);
            }
            if j > 0 {
                // dLoss/d(activation output of layer j-1)
                let dact = delta.matmul_nn(&self.layers[j].weight);
                let q = &self.quantizers[j - 1];
                let pre = &cache.pre_acts[j - 1];
                alpha_grads[j - 1] = pre
                    .iter()
                    .zip(dact.iter())
                    .map(|(&x, &g)| q.dalpha(x) * g)
                    .sum();
                delta = dact.hadamard(&pre.map(|x| q.dx_proxy(x)));
            }
        }

        Ok(CoarseGrads {
            weights: weight_grads.into_iter().map(Option::unwrap).collect(),
            biases: bias_grads,
            alphas: alpha_grads,
            loss,
        })
    }
}

/// Fraction of rows whose argmax matches the class label.
pub fn argmax_accuracy(logits: &Matrix, classes: &[usize]) -> f64 {
    assert_eq!(logits.rows(), classes.len());
    if classes.is_empty() {
        return 0.0;
    }
    let hits = classes
        .iter()
        .enumerate()
        .filter(|(r, &c)| {
            let row = logits.row(*r);
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            best == c
        })
        .count();
    hits as f64 / classes.len() as f64
}

fn loss_name(loss: LossKind) -> &'static str {
    match loss {
        LossKind::SoftmaxCrossEntropy => "softmax_ce",
        LossKind::SquaredError => "squared_error",
    }
}

fn parse_loss(s: &str) -> Option<LossKind> {
    match s {
        "softmax_ce" => Some(LossKind::SoftmaxCrossEntropy),
        "squared_error" => Some(LossKind::SquaredError),
        _ => None,
    }
}

/// Saves the network as per-layer weight files plus a text manifest.
pub fn save_checkpoint(net: &QuantNet, dir: &Path) -> Result<(), NetError> {
    fs::create_dir_all(dir).map_err(|e| NetError::Checkpoint {
        path: dir.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut manifest = String::new();
    manifest.push_str(&format!("layers = {}\n", net.layers.len()));
    manifest.push_str(&format!("loss = {}\n", loss_name(net.loss)));
    if let Some(q) = net.quantizers.first() {
        manifest.push_str(&format!("bits_a = {}\n", q.bits()));
        manifest.push_str(&format!("variant = {}\n", q.variant().name()));
    }
    for (j, layer) in net.layers.iter().enumerate() {
        manifest.push_str(&format!(
            "layer_{} = {} {} {}\n",
            j,
            layer.out_dim(),
            layer.in_dim(),
            if layer.bias.is_some() { 1 } else { 0 }
        ));
        weights::write_weight_file(&dir.join(format!("layer_{j}.wgt")), layer.weight.data())?;
        if let Some(bias) = &layer.bias {
            weights::write_weight_file(&dir.join(format!("bias_{j}.wgt")), bias)?;
        }
    }
    for (j, q) in net.quantizers.iter().enumerate() {
        manifest.push_str(&format!("alpha_{} = {}\n", j, q.alpha()));
    }
    fs::write(dir.join("manifest.txt"), manifest).map_err(|e| NetError::Checkpoint {
        path: dir.display().to_string(),
        reason: e.to_string(),
    })
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<QuantNet, NetError> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| NetError::Checkpoint {
        path: manifest_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut kv = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let bad = |reason: String| NetError::Checkpoint {
        path: manifest_path.display().to_string(),
        reason,
    };
    let layer_count: usize = kv
        .get("layers")
        .ok_or_else(|| bad("missing layers".into()))?
        .parse()
        .map_err(|_| bad("bad layers".into()))?;
    let loss = parse_loss(kv.get("loss").ok_or_else(|| bad("missing loss".into()))?)
        .ok_or_else(|| bad("bad loss".into()))?;

    let mut layers = Vec::with_capacity(layer_count);
    for j in 0..layer_count {
        let spec = kv
            .get(&format!("layer_{j}"))
            .ok_or_else(|| bad(format!("missing layer_{j}")))?;
        let parts: Vec<usize> = spec
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(format!("bad layer_{j}"))))
            .collect::<Result<_, _>>()?;
        if parts.len() != 3 {
            return Err(bad(format!("layer_{j} needs 3 fields")));
        }
        let (rows, cols, has_bias) = (parts[0], parts[1], parts[2] != 0);
        let data = weights::read_weight_file(&dir.join(format!("layer_{j}.wgt")))?;
        if data.len() != rows * cols {
            return Err(bad(format!("layer_{j} has {} values, expected {}", data.len(), rows * cols)));
        }
        let bias = if has_bias {
            Some(weights::read_weight_file(&dir.join(format!("bias_{j}.wgt")))?)
        } else {
            None
        };
        layers.push(LinearLayer::new(Matrix::from_vec(rows, cols, data), bias));
    }

    let mut quantizers = Vec::new();
    if layer_count > 1 {
        let bits: u32 = kv
            .get("bits_a")
            .ok_or_else(|| bad("missing bits_a".into()))?
            .parse()
            .map_err(|_| bad("bad bits_a".into()))?;
        let variant = AlphaVariant::parse(
            kv.get("variant").ok_or_else(|| bad("missing variant".into()))?,
        )
        .ok_or_else(|| bad("bad variant".into()))?;
        for j in 0..layer_count - 1 {
            let alpha: f64 = kv
                .get(&format!("alpha_{j}"))
                .ok_or_else(|| bad(format!("missing alpha_{j}")))?
                .parse()
                .map_err(|_| bad(format!("bad alpha_{j}")))?;
            quantizers.push(
                ActQuantizer::new(bits, alpha, variant)
                    .map_err(|e| bad(format!("alpha_{j}: {e}")))?,
            );
        }
    }
    QuantNet::new(layers, quantizers, loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::act::AlphaVariant;

    fn quantizer(bits: u32, alpha: f64, variant: AlphaVariant) -> ActQuantizer {
        ActQuantizer::new(bits, alpha, variant).unwrap()
    }

    fn two_layer(
        w1: Matrix,
        w2: Matrix,
        q: ActQuantizer,
        loss: LossKind,
    ) -> QuantNet {
        QuantNet::new(
            vec![LinearLayer::new(w1, None), LinearLayer::new(w2, None)],
            vec![q],
            loss,
        )
        .unwrap()
    }

    #[test]
    fn single_layer_is_a_plain_matrix_product() {
        let w = Matrix::from_vec(2, 3, vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]);
        let net = QuantNet::new(
            vec![LinearLayer::new(w.clone(), None)],
            vec![],
            LossKind::SquaredError,
        )
        .unwrap();
        let batch = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let cache = net.forward(&batch).unwrap();
        let expected = batch.matmul_nt(&w);
        assert_eq!(cache.logits(), &expected);
    }

    #[test]
    fn dead_activations_give_bias_only_logits() {
        let w1 = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let w2 = Matrix::from_vec(1, 2, vec![1.0, 1.0]);
        let mut net = two_layer(
            w1,
            w2,
            quantizer(2, 0.5, AlphaVariant::Ae),
            LossKind::SquaredError,
        );
        net.layers[1].bias = Some(vec![0.25]);
        net.version += 1;
        let batch = Matrix::from_vec(1, 2, vec![-3.0, -4.0]);
        let cache = net.forward(&batch).unwrap();
        assert_eq!(cache.logits().get(0, 0), 0.25);
    }

    #[test]
    fn architecture_validation() {
        let w1 = Matrix::zeros(3, 2);
        let w2 = Matrix::zeros(1, 4); // mismatched: expects 4, gets 3
        let err = QuantNet::new(
            vec![LinearLayer::new(w1, None), LinearLayer::new(w2, None)],
            vec![quantizer(2, 0.5, AlphaVariant::Ae)],
            LossKind::SquaredError,
        );
        assert!(matches!(err, Err(NetError::InvalidArchitecture(_))));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let w = Matrix::from_vec(1, 2, vec![1.0, 1.0]);
        let mut net = QuantNet::new(
            vec![LinearLayer::new(w, None)],
            vec![],
            LossKind::SquaredError,
        )
        .unwrap();
        let batch = Matrix::from_vec(1, 2, vec![1.0, 2.0]);
        let cache = net.forward(&batch).unwrap();
        net.set_layer_weights(0, Matrix::from_vec(1, 2, vec![2.0, 2.0]));
        let labels = Labels::Targets(Matrix::zeros(1, 1));
        assert!(matches!(net.coarse_backward(&cache, &labels), Err(NetError::StaleCache)));
    }

    /// Central finite differences of the batch loss in one layer's weights.
    fn fd_weight_grad(
        net: &QuantNet,
        batch: &Matrix,
        labels: &Labels,
        layer: usize,
        h: f64,
    ) -> Matrix {
        let mut grad = Matrix::zeros(
            net.layers[layer].weight.rows(),
            net.layers[layer].weight.cols(),
        );
        for idx in 0..grad.data().len() {
            let mut plus = net.clone();
            plus.layers[layer].weight.data_mut()[idx] += h;
            plus.version += 1;
            let cp = plus.forward(batch).unwrap();
            let (lp, _) = plus.loss_and_dlogits(cp.logits(), labels).unwrap();

            let mut minus = net.clone();
            minus.layers[layer].weight.data_mut()[idx] -= h;
            minus.version += 1;
            let cm = minus.forward(batch).unwrap();
            let (lm, _) = minus.loss_and_dlogits(cm.logits(), labels).unwrap();

            grad.data_mut()[idx] = (lp - lm) / (2.0 * h);
        }
        grad
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        let mut diff = 0.0;
        let mut scale = 0.0f64;
        for (x, y) in a.iter().zip(b.iter()) {
            diff += (x - y) * (x - y);
            scale += y * y;
        }
        (diff / scale.max(1e-30)).sqrt()
    }

    #[test]
    fn pure_linear_network_matches_finite_differences() {
        let w = Matrix::from_vec(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4]);
        let net = QuantNet::new(
            vec![LinearLayer::new(w, Some(vec![0.1, -0.2]))],
            vec![],
            LossKind::SquaredError,
        )
        .unwrap();
        let batch = Matrix::from_vec(3, 3, vec![1.0, 2.0, -1.0, 0.5, -0.5, 1.5, -2.0, 0.3, 0.9]);
        let labels = Labels::Targets(Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]));
        let cache = net.forward(&batch).unwrap();
        let grads = net.coarse_backward(&cache, &labels).unwrap();
        let fd = fd_weight_grad(&net, &batch, &labels, 0, 1e-6);
        assert!(rel_err(&grads.weights[0], &fd) < 1e-4);
    }

    #[test]
    fn last_layer_gradient_is_exact() {
        // the top layer needs no substitute derivative, so it must match
        // finite differences even with a staircase activation below it
        let w1 = Matrix::from_vec(4, 3, vec![0.4, -0.6, 0.2, 0.9, 0.1, -0.3, -0.8, 0.5, 0.7, 0.2, -0.2, 0.6]);
        let w2 = Matrix::from_vec(2, 4, vec![0.3, -0.1, 0.5, 0.2, -0.4, 0.6, 0.1, -0.7]);
        let net = two_layer(
            w1,
            w2,
            quantizer(4, 0.25, AlphaVariant::ThreeValued),
            LossKind::SoftmaxCrossEntropy,
        );
        let batch = Matrix::from_vec(3, 3, vec![0.9, -1.2, 0.4, 1.5, 0.2, -0.6, -0.3, 0.8, 1.1]);
        let labels = Labels::Classes(vec![0, 1, 0]);
        let cache = net.forward(&batch).unwrap();
        let grads = net.coarse_backward(&cache, &labels).unwrap();
        let fd = fd_weight_grad(&net, &batch, &labels, 1, 1e-6);
        assert!(rel_err(&grads.weights[1], &fd) < 1e-4);
    }

    #[test]
    fn clipped_forward_backward_is_a_true_gradient() {
        // with the clipped envelope in the forward pass, the dx proxy and
        // the two-valued dalpha are the exact derivatives a.e., so the
        // whole backward pass is the true gradient
        let w1 = Matrix::from_vec(4, 3, vec![0.4, -0.6, 0.2, 0.9, 0.1, -0.3, -0.8, 0.5, 0.7, 0.2, -0.2, 0.6]);
        let w2 = Matrix::from_vec(2, 4, vec![0.3, -0.1, 0.5, 0.2, -0.4, 0.6, 0.1, -0.7]);
        let net = two_layer(
            w1,
            w2,
            quantizer(2, 0.4, AlphaVariant::TwoValued),
            LossKind::SquaredError,
        )
        .with_act_fn(ActFn::Clipped);
        let batch = Matrix::from_vec(3, 3, vec![0.9, -1.2, 0.4, 1.5, 0.2, -0.6, -0.3, 0.8, 1.1]);
        let labels = Labels::Targets(Matrix::from_vec(3, 2, vec![0.5, 0.1, -0.2, 0.4, 0.8, -0.1]));
        let cache = net.forward(&batch).unwrap();
        let grads = net.coarse_backward(&cache, &labels).unwrap();

        for layer in 0..2 {
            let fd = fd_weight_grad(&net, &batch, &labels, layer, 1e-6);
            assert!(rel_err(&grads.weights[layer], &fd) < 1e-4, "layer {layer}");
        }

        // alpha gradient vs finite differences of the clipped network
        let h = 1e-6;
        let eval = |alpha: f64| {
            let mut n2 = net.clone();
            n2.set_alpha(0, alpha);
            let c = n2.forward(&batch).unwrap();
            n2.loss_and_dlogits(c.logits(), &labels).unwrap().0
        };
        let a0 = net.quantizers[0].alpha();
        let fd_alpha = (eval(a0 + h) - eval(a0 - h)) / (2.0 * h);
        let denom = fd_alpha.abs().max(1e-12);
        assert!(
            (grads.alphas[0] - fd_alpha).abs() / denom < 1e-3,
            "alpha grad {} vs fd {}",
            grads.alphas[0],
            fd_alpha
        );
    }

    #[test]
    fn batch_gradient_is_the_mean_of_per_sample_gradients() {
        let w1 = Matrix::from_vec(3, 2, vec![0.4, -0.6, 0.9, 0.1, -0.8, 0.5]);
        let w2 = Matrix::from_vec(2, 3, vec![0.3, -0.1, 0.5, 0.2, -0.4, 0.6]);
        let net = two_layer(
            w1,
            w2,
            quantizer(4, 0.3, AlphaVariant::Ae),
            LossKind::SoftmaxCrossEntropy,
        );
        let s1 = Matrix::from_vec(1, 2, vec![0.7, -0.9]);
        let s2 = Matrix::from_vec(1, 2, vec![-0.4, 1.3]);
        let both = Matrix::from_vec(2, 2, vec![0.7, -0.9, -0.4, 1.3]);

        let g1 = net
            .coarse_backward(&net.forward(&s1).unwrap(), &Labels::Classes(vec![0]))
            .unwrap();
        let g2 = net
            .coarse_backward(&net.forward(&s2).unwrap(), &Labels::Classes(vec![1]))
            .unwrap();
        let gb = net
            .coarse_backward(&net.forward(&both).unwrap(), &Labels::Classes(vec![0, 1]))
            .unwrap();

        for layer in 0..2 {
            for idx in 0..gb.weights[layer].data().len() {
                let mean = 0.5 * (g1.weights[layer].data()[idx] + g2.weights[layer].data()[idx]);
                assert!((gb.weights[layer].data()[idx] - mean).abs() < 1e-12);
            }
        }
        let mean_alpha = 0.5 * (g1.alphas[0] + g2.alphas[0]);
        assert!((gb.alphas[0] - mean_alpha).abs() < 1e-12);
        assert!((gb.loss - 0.5 * (g1.loss + g2.loss)).abs() < 1e-12);
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let w1 = Matrix::from_vec(3, 2, vec![0.4, -0.6, 0.9, 0.1, -0.8, 0.5]);
        let w2 = Matrix::from_vec(2, 3, vec![0.3, -0.1, 0.5, 0.2, -0.4, 0.6]);
        let net = two_layer(
            w1,
            w2,
            quantizer(4, 0.3, AlphaVariant::ThreeValued),
            LossKind::SoftmaxCrossEntropy,
        );
        let batch = Matrix::from_vec(2, 2, vec![0.7, -0.9, -0.4, 1.3]);
        let labels = Labels::Classes(vec![0, 1]);
        let a = net.coarse_backward(&net.forward(&batch).unwrap(), &labels).unwrap();
        let b = net.coarse_backward(&net.forward(&batch).unwrap(), &labels).unwrap();
        for layer in 0..2 {
            assert_eq!(a.weights[layer].data(), b.weights[layer].data());
        }
        assert_eq!(a.alphas, b.alphas);
        assert!(a.loss.to_bits() == b.loss.to_bits());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w1 = Matrix::from_vec(3, 2, vec![0.5, -0.25, 0.75, 0.125, -0.5, 1.0]);
        let w2 = Matrix::from_vec(2, 3, vec![0.25, -0.125, 0.5, 0.75, -0.25, 0.5]);
        let mut net = two_layer(
            w1,
            w2,
            quantizer(4, 0.25, AlphaVariant::ThreeValued),
            LossKind::SoftmaxCrossEntropy,
        );
        net.layers[0].bias = Some(vec![0.5, -0.5, 0.25]);
        net.version += 1;
        save_checkpoint(&net, dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.layers.len(), 2);
        assert_eq!(loaded.layers[0].weight.data(), net.layers[0].weight.data());
        assert_eq!(loaded.layers[0].bias, net.layers[0].bias);
        assert_eq!(loaded.quantizers[0].alpha(), 0.25);
        assert_eq!(loaded.quantizers[0].bits(), 4);
        assert_eq!(loaded.loss_kind(), LossKind::SoftmaxCrossEntropy);
    }
}
