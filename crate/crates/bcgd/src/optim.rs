//! Blended gradient optimizer and its BinaryConnect / projected-gradient
//! limits.
//!
//! The float shadow weights are pulled toward their quantized projection by
//! a blending factor `rho` before the gradient correction; `rho = 0` is
//! BinaryConnect, `rho = 1` is projected gradient descent, and all three
//! run through the same kernel so they differ by exactly that scalar.

use thiserror::Error;

use crate::act::ALPHA_FLOOR;
use crate::matrix::Matrix;
use crate::net::{CoarseGrads, QuantNet};
use crate::weights::{project, QuantizedWeights, WeightError};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient at optimizer step {step}")]
    NonFinite { step: usize },
    #[error("blending factor must lie in [0, 1], got {0}")]
    InvalidRho(f64),
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("gradient shapes do not match the optimizer state")]
    ShapeMismatch,
    #[error("need at least 2 trace points, got {0}")]
    InsufficientTrace(usize),
    #[error(transparent)]
    Weights(#[from] WeightError),
}

/// Which update rule to run. All three share one kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Blended update with the configured `rho`.
    Bcgd,
    /// BinaryConnect: `rho` pinned to 0.
    Bc,
    /// Projected gradient descent: `rho` pinned to 1.
    Pgd,
}

impl Method {
    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "bcgd" => Some(Method::Bcgd),
            "bc" => Some(Method::Bc),
            "pgd" => Some(Method::Pgd),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Bcgd => "bcgd",
            Method::Bc => "bc",
            Method::Pgd => "pgd",
        }
    }
}

/// Hyperparameters of the blended optimizer.
#[derive(Debug, Clone)]
pub struct OptimParams {
    pub rho: f64,
    pub eta_w: f64,
    /// Learning rate of the resolutions is `rate_factor * eta_w`.
    pub rate_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which both learning rates are multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub bits_w: u32,
    /// Keep the first and last linear layers in float precision.
    pub keep_ends_float: bool,
}

impl Default for OptimParams {
    fn default() -> Self {
        OptimParams {
            rho: 1e-5,
            eta_w: 0.01,
            rate_factor: 0.01,
            momentum: 0.95,
            weight_decay: 1e-4,
            milestones: vec![],
            decay: 0.1,
            bits_w: 1,
            keep_ends_float: true,
        }
    }
}

/// Optimizer state: per-layer float shadows, their projections, and the
/// momentum buffers.
#[derive(Debug, Clone)]
pub struct BlendedState {
    pub params: OptimParams,
    shadow: Vec<Vec<f64>>,
    quantized: Vec<Option<QuantizedWeights>>,
    velocity: Vec<Vec<f64>>,
    bias_velocity: Vec<Option<Vec<f64>>>,
    eta_w: f64,
    step: usize,
}

impl BlendedState {
    /// Captures the network's weights as the initial shadow, projects the
    /// quantizable layers, and writes the projected values back into the
    /// network so gradients are evaluated at the quantized point.
    pub fn init(net: &mut QuantNet, params: OptimParams) -> Result<Self, OptimError> {
        if !(0.0..=1.0).contains(&params.rho) {
            return Err(OptimError::InvalidRho(params.rho));
        }
        if params.eta_w <= 0.0 {
            return Err(OptimError::InvalidLearningRate(params.eta_w));
        }
        let layer_count = net.layers().len();
        let mut shadow = Vec::with_capacity(layer_count);
        let mut velocity = Vec::with_capacity(layer_count);
        let mut bias_velocity = Vec::with_capacity(layer_count);
        for layer in net.layers() {
            shadow.push(layer.weight.data().to_vec());
            velocity.push(vec![0.0; layer.weight.data().len()]);
            bias_velocity.push(layer.bias.as_ref().map(|b| vec![0.0; b.len()]));
        }
        let mut state = BlendedState {
            eta_w: params.eta_w,
            params,
            shadow,
            quantized: vec![None; layer_count],
            velocity,
            bias_velocity,
            step: 0,
        };
        for j in 0..layer_count {
            if state.is_quantized_layer(j, layer_count) {
                state.quantized[j] = Some(project(&state.shadow[j], state.params.bits_w)?);
            }
        }
        state.write_weights(net);
        Ok(state)
    }

    fn is_quantized_layer(&self, j: usize, layer_count: usize) -> bool {
        !(self.params.keep_ends_float && (j == 0 || j == layer_count - 1))
    }

    pub fn eta_w(&self) -> f64 {
        self.eta_w
    }

    pub fn eta_alpha(&self) -> f64 {
        self.params.rate_factor * self.eta_w
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Distance between the shadow and the quantized point, per layer.
    pub fn shadow_distances(&self) -> Vec<f64> {
        self.shadow
            .iter()
            .zip(&self.quantized)
            .map(|(wf, q)| match q {
                Some(q) => q
                    .dequantize()
                    .iter()
                    .zip(wf)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
                None => 0.0,
            })
            .collect()
    }

    /// Applies the learning-rate schedule at the start of the given epoch.
    /// `eta_alpha` stays locked to `rate_factor * eta_w`.
    pub fn apply_schedule(&mut self, epoch: usize) {
        if self.params.milestones.contains(&epoch) {
            self.eta_w *= self.params.decay;
        }
    }

    fn write_weights(&self, net: &mut QuantNet) {
        for j in 0..self.shadow.len() {
            let values = match &self.quantized[j] {
                Some(q) => q.dequantize(),
                None => self.shadow[j].clone(),
            };
            let (r, c) = (net.layers()[j].weight.rows(), net.layers()[j].weight.cols());
            net.set_layer_weights(j, Matrix::from_vec(r, c, values));
        }
    }

    pub fn step(
        &mut self,
        net: &mut QuantNet,
        grads: &CoarseGrads,
        method: Method,
    ) -> Result<(), OptimError> {
        let rho = match method {
            Method::Bcgd => self.params.rho,
            Method::Bc => 0.0,
            Method::Pgd => 1.0,
        };
        self.step_with_rho(net, grads, rho)
    }

    /// One update with an explicit blending factor.
    pub fn step_with_rho(
        &mut self,
        net: &mut QuantNet,
        grads: &CoarseGrads,
        rho: f64,
    ) -> Result<(), OptimError> {
        if !grads.all_finite() {
            return Err(OptimError::NonFinite { step: self.step });
        }
        let layer_count = self.shadow.len();
        if grads.weights.len() != layer_count || grads.alphas.len() != net.quantizers().len() {
            return Err(OptimError::ShapeMismatch);
        }
        let eta = self.eta_w;
        let wd = self.params.weight_decay;
        let mu = self.params.momentum;

        for j in 0..layer_count {
            let grad = grads.weights[j].data();
            if grad.len() != self.shadow[j].len() {
                return Err(OptimError::ShapeMismatch);
            }
            let quantized = self.quantized[j].as_ref().map(|q| q.dequantize());
            for (i, wf) in self.shadow[j].iter_mut().enumerate() {
                let g = grad[i] + wd * *wf;
                let vel = &mut self.velocity[j][i];
                *vel = mu * *vel + g;
                *wf = match &quantized {
                    // blended correction toward the projected point
                    Some(w) => (1.0 - rho) * *wf + rho * w[i] - eta * *vel,
                    // float layers have w == w_f, where the blend is the
                    // identity
                    None => *wf - eta * *vel,
                };
            }
            if self.quantized[j].is_some() {
                self.quantized[j] = Some(project(&self.shadow[j], self.params.bits_w)?);
            }

            if let (Some(bias_grad), Some(vel)) = (&grads.biases[j], &mut self.bias_velocity[j]) {
                let mut bias = net.layers()[j].bias.clone().expect("bias exists");
                for i in 0..bias.len() {
                    vel[i] = mu * vel[i] + bias_grad[i];
                    bias[i] -= eta * vel[i];
                }
                net.set_layer_bias(j, bias);
            }
        }
        self.write_weights(net);

        let eta_alpha = self.eta_alpha();
        for (k, &ga) in grads.alphas.iter().enumerate() {
            let alpha = net.quantizers()[k].alpha() - eta_alpha * ga;
            net.set_alpha(k, alpha.max(ALPHA_FLOOR));
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::act::{ActQuantizer, AlphaVariant};
    use crate::net::{Labels, LinearLayer, LossKind};

    fn tiny_net(weight: Vec<f64>, rows: usize, cols: usize) -> QuantNet {
        QuantNet::new(
            vec![LinearLayer::new(Matrix::from_vec(rows, cols, weight), None)],
            vec![],
            LossKind::SquaredError,
        )
        .unwrap()
    }

    fn grads_for(net: &QuantNet, weight_grad: Vec<f64>) -> CoarseGrads {
        CoarseGrads {
            weights: vec![Matrix::from_vec(
                net.layers()[0].weight.rows(),
                net.layers()[0].weight.cols(),
                weight_grad,
            )],
            biases: vec![None],
            alphas: vec![],
            loss: 0.0,
        }
    }

    fn params(rho: f64, eta: f64) -> OptimParams {
        OptimParams {
            rho,
            eta_w: eta,
            rate_factor: 0.01,
            momentum: 0.0,
            weight_decay: 0.0,
            milestones: vec![],
            decay: 0.1,
            bits_w: 1,
            keep_ends_float: false,
        }
    }

    #[test]
    fn hand_computed_blended_step() {
        // w_f = [1.0], w = proj = 1.0, grad = 0.5, rho = 1e-5, eta = 0.1:
        // w_f' = (1 - 1e-5) * 1 + 1e-5 * 1 - 0.05 = 0.95
        let mut net = tiny_net(vec![1.0], 1, 1);
        let mut state = BlendedState::init(&mut net, params(1e-5, 0.1)).unwrap();
        let g = grads_for(&net, vec![0.5]);
        state.step(&mut net, &g, Method::Bcgd).unwrap();
        assert!((state.shadow[0][0] - 0.95).abs() < 1e-15);
        // reprojection of 0.95 at 1 bit: delta = 0.95, q = 1
        assert!((net.layers()[0].weight.get(0, 0) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn rho_zero_is_binaryconnect_bit_for_bit() {
        let seed_weights = vec![0.8, -1.3, 0.4, 2.1];
        let run = |method: Method, rho: f64| {
            let mut net = tiny_net(seed_weights.clone(), 2, 2);
            let mut state = BlendedState::init(&mut net, params(rho, 0.05)).unwrap();
            for k in 0..5 {
                let g = grads_for(&net, vec![0.1 * k as f64, -0.2, 0.3, 0.05]);
                state.step(&mut net, &g, method).unwrap();
            }
            (state.shadow[0].clone(), net.layers()[0].weight.data().to_vec())
        };
        let (bc_shadow, bc_w) = run(Method::Bc, 0.7);
        let (blend_shadow, blend_w) = run(Method::Bcgd, 0.0);
        assert_eq!(bc_shadow, blend_shadow);
        assert_eq!(bc_w, blend_w);

        let (pgd_shadow, pgd_w) = run(Method::Pgd, 0.3);
        let (blend1_shadow, blend1_w) = run(Method::Bcgd, 1.0);
        assert_eq!(pgd_shadow, blend1_shadow);
        assert_eq!(pgd_w, blend1_w);
    }

    #[test]
    fn momentum_matches_the_velocity_recursion() {
        let mut net = tiny_net(vec![2.0], 1, 1);
        let mut p = params(0.0, 0.1);
        p.momentum = 0.9;
        let mut state = BlendedState::init(&mut net, p).unwrap();
        // two steps with constant gradient 1.0:
        // v1 = 1, wf1 = 2 - 0.1
        // v2 = 0.9 + 1 = 1.9, wf2 = 1.9 - 0.19
        let g = grads_for(&net, vec![1.0]);
        state.step(&mut net, &g, Method::Bc).unwrap();
        assert!((state.shadow[0][0] - 1.9).abs() < 1e-15);
        let g = grads_for(&net, vec![1.0]);
        state.step(&mut net, &g, Method::Bc).unwrap();
        assert!((state.shadow[0][0] - (1.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn schedule_preserves_the_rate_ratio() {
        let mut net = tiny_net(vec![1.0], 1, 1);
        let mut p = params(1e-5, 0.04);
        p.milestones = vec![3, 7];
        p.decay = 0.1;
        let mut state = BlendedState::init(&mut net, p).unwrap();
        for epoch in 0..10 {
            state.apply_schedule(epoch);
            // eta_alpha is derived, so the ratio survives every decay
            let derived = state.params.rate_factor * state.eta_w();
            assert_eq!(state.eta_alpha().to_bits(), derived.to_bits());
            assert!((state.eta_alpha() / state.eta_w() - 0.01).abs() < 1e-12);
        }
        assert!((state.eta_w() - 0.04 * 0.01).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradients_are_rejected_with_the_step_index() {
        let mut net = tiny_net(vec![1.0], 1, 1);
        let mut state = BlendedState::init(&mut net, params(1e-5, 0.1)).unwrap();
        let g = grads_for(&net, vec![0.25]);
        state.step(&mut net, &g, Method::Bcgd).unwrap();
        let bad = grads_for(&net, vec![f64::NAN]);
        match state.step(&mut net, &bad, Method::Bcgd) {
            Err(OptimError::NonFinite { step }) => assert_eq!(step, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn keep_ends_float_skips_projection() {
        let mut net = QuantNet::new(
            vec![
                LinearLayer::new(Matrix::from_vec(2, 2, vec![0.3, -0.8, 1.2, 0.4]), None),
                LinearLayer::new(Matrix::from_vec(2, 2, vec![0.5, 0.6, -0.7, 0.1]), None),
            ],
            vec![ActQuantizer::new(4, 0.5, AlphaVariant::ThreeValued).unwrap()],
            LossKind::SquaredError,
        )
        .unwrap();
        let mut p = params(1e-5, 0.1);
        p.keep_ends_float = true;
        let state = BlendedState::init(&mut net, p).unwrap();
        // a 2-layer net has only end layers, so nothing is projected
        assert!(state.quantized.iter().all(|q| q.is_none()));
        assert_eq!(net.layers()[0].weight.data(), &[0.3, -0.8, 1.2, 0.4]);

        let mut net2 = QuantNet::new(
            vec![
                LinearLayer::new(Matrix::from_vec(2, 2, vec![0.3, -0.8, 1.2, 0.4]), None),
                LinearLayer::new(Matrix::from_vec(2, 2, vec![0.5, 0.6, -0.7, 0.1]), None),
            ],
            vec![ActQuantizer::new(4, 0.5, AlphaVariant::ThreeValued).unwrap()],
            LossKind::SquaredError,
        )
        .unwrap();
        let mut p2 = params(1e-5, 0.1);
        p2.keep_ends_float = false;
        let state2 = BlendedState::init(&mut net2, p2).unwrap();
        assert!(state2.quantized.iter().all(|q| q.is_some()));
        // the network now holds binarized weights
        let w0 = net2.layers()[0].weight.data().to_vec();
        let q0 = state2.quantized[0].as_ref().unwrap();
        assert_eq!(w0, q0.dequantize());
    }

    #[test]
    fn alpha_updates_are_plain_descent_with_a_floor() {
        let mut net = QuantNet::new(
            vec![
                LinearLayer::new(Matrix::from_vec(1, 1, vec![0.5]), None),
                LinearLayer::new(Matrix::from_vec(1, 1, vec![0.5]), None),
            ],
            vec![ActQuantizer::new(2, 0.5, AlphaVariant::TwoValued).unwrap()],
            LossKind::SquaredError,
        )
        .unwrap();
        let mut p = params(1e-5, 0.1);
        p.rate_factor = 0.5;
        let mut state = BlendedState::init(&mut net, p).unwrap();
        let g = CoarseGrads {
            weights: vec![
                Matrix::from_vec(1, 1, vec![0.0]),
                Matrix::from_vec(1, 1, vec![0.0]),
            ],
            biases: vec![None, None],
            alphas: vec![2.0],
            loss: 0.0,
        };
        state.step(&mut net, &g, Method::Bcgd).unwrap();
        // alpha <- 0.5 - 0.05 * 2.0 = 0.4
        assert!((net.quantizers()[0].alpha() - 0.4).abs() < 1e-15);

        let g_big = CoarseGrads {
            weights: g.weights.clone(),
            biases: vec![None, None],
            alphas: vec![1e9],
            loss: 0.0,
        };
        state.step(&mut net, &g_big, Method::Bcgd).unwrap();
        assert_eq!(net.quantizers()[0].alpha(), ALPHA_FLOOR);
    }
}
