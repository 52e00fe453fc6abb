//! Small feed-forward network engine.
//!
//! Networks process row-major minibatches: an input of shape `(batch, in)`
//! produces an output of shape `(batch, out)`. Each layer computes
//! `activation(x W^T + b)` with `W` stored as `(out, in)`.
//!
//! The backward pass returns gradients for *every* weight position, including
//! positions that a sparsity mask currently holds at zero. The gradient at a
//! masked position `(i, j)` is the ordinary outer-product term
//! `sum_batch delta_i * x_j`, evaluated at the masked forward values. Growth
//! rules that rank inactive connections by gradient magnitude rely on this.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dst::SparsityMask;
use crate::error::{Error, Result};
use crate::rng;

/// Default negative slope for [`Activation::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Identity,
}

impl Activation {
    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu { slope: LEAKY_SLOPE }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a`.
    /// At exactly zero the ReLU family takes the left branch.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Shape `(out, in)`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub mask: Option<SparsityMask>,
}

impl Layer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::shape("layer bias", weights.nrows(), bias.len()));
        }
        Ok(Layer {
            weights,
            bias,
            activation,
            mask: None,
        })
    }

    pub fn in_width(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_width(&self) -> usize {
        self.weights.nrows()
    }

    /// Install `mask` and zero every weight it excludes.
    pub fn set_mask(&mut self, mask: SparsityMask) -> Result<()> {
        if mask.shape() != self.weights.dim() {
            return Err(Error::shape(
                "layer mask",
                format!("{:?}", self.weights.dim()),
                format!("{:?}", mask.shape()),
            ));
        }
        self.mask = Some(mask);
        self.apply_mask();
        Ok(())
    }

    /// Zero every weight outside the mask. No-op for dense layers.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            Zip::from(&mut self.weights)
                .and(mask.as_array())
                .for_each(|w, &keep| {
                    if !keep {
                        *w = 0.0;
                    }
                });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
}

/// Values recorded by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    /// Activation (output) of each layer.
    post: Vec<Array2<f64>>,
    /// Effective input-layer weights when they differed from the stored ones.
    input_weights: Option<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().expect("cache of a non-empty network")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl GradientBundle {
    pub fn zeros_like(net: &Network) -> Self {
        GradientBundle {
            weights: net
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weights.dim()))
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.len()))
                .collect(),
        }
    }

    fn check_shapes(&self, net: &Network) -> Result<()> {
        if self.weights.len() != net.layers.len() || self.biases.len() != net.layers.len() {
            return Err(Error::shape(
                "gradient layers",
                net.layers.len(),
                self.weights.len(),
            ));
        }
        for (i, l) in net.layers.iter().enumerate() {
            if self.weights[i].dim() != l.weights.dim() || self.biases[i].len() != l.bias.len() {
                return Err(Error::shape(
                    "gradient layer",
                    format!("{:?}", l.weights.dim()),
                    format!("{:?}", self.weights[i].dim()),
                ));
            }
        }
        Ok(())
    }
}

impl Network {
    /// Build a network with the given layer widths. Hidden layers use
    /// `activation`; the output layer is linear. Weights are drawn uniformly
    /// from `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`, biases start at zero.
    pub fn init(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "a network needs at least 2 layer widths, got {}",
                widths.len()
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut rng = rng::stream(seed, "network-init", 0);
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
                let act = if i + 1 == n {
                    Activation::Identity
                } else {
                    activation
                };
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                    activation: act,
                    mask: None,
                }
            })
            .collect();
        Ok(Network { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_width() != pair[1].in_width() {
                return Err(Error::shape(
                    "adjacent layer widths",
                    pair[0].out_width(),
                    pair[1].in_width(),
                ));
            }
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_layer(&self) -> &Layer {
        &self.layers[0]
    }

    pub fn input_layer_mut(&mut self) -> &mut Layer {
        &mut self.layers[0]
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].out_width()
    }

    pub fn forward(&self, input: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.forward_with(input, None)
    }

    /// Forward pass where the input layer uses `input_weights` in place of
    /// its stored weights (DropConnect masks, evaluation-time scaling).
    pub fn forward_with(
        &self,
        input: ArrayView2<'_, f64>,
        input_weights: Option<Array2<f64>>,
    ) -> Result<ForwardCache> {
        if input.ncols() != self.input_width() {
            return Err(Error::shape("network input", self.input_width(), input.ncols()));
        }
        if let Some(w) = &input_weights {
            if w.dim() != self.layers[0].weights.dim() {
                return Err(Error::shape(
                    "input-layer weight override",
                    format!("{:?}", self.layers[0].weights.dim()),
                    format!("{:?}", w.dim()),
                ));
            }
        }
        let n = self.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
            input_weights: None,
        };
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = match (i, &input_weights) {
                (0, Some(w)) => w,
                _ => &layer.weights,
            };
            let mut z = x.dot(&w.t());
            z += &layer.bias;
            let act = layer.activation;
            let a = if act == Activation::Identity {
                z.clone()
            } else {
                z.mapv(|v| act.apply(v))
            };
            cache.inputs.push(x);
            cache.pre.push(z);
            x = a.clone();
            cache.post.push(a);
        }
        cache.input_weights = input_weights;
        Ok(cache)
    }

    /// Forward pass without a cache.
    pub fn predict(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.predict_with(input, None)
    }

    pub fn predict_with(
        &self,
        input: ArrayView2<'_, f64>,
        input_weights: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>> {
        if input.ncols() != self.input_width() {
            return Err(Error::shape("network input", self.input_width(), input.ncols()));
        }
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = match (i, input_weights) {
                (0, Some(w)) => w,
                _ => &layer.weights,
            };
            let mut z = x.dot(&w.t());
            z += &layer.bias;
            let act = layer.activation;
            if act != Activation::Identity {
                z.mapv_inplace(|v| act.apply(v));
            }
            x = z;
        }
        Ok(x)
    }

    /// Backpropagate `output_grad` (dLoss/dOutput, shape `(batch, out)`).
    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<'_, f64>,
    ) -> Result<(GradientBundle, Array2<f64>)> {
        let (grads, input) = self.backward_parts(cache, output_grad, true, true)?;
        Ok((grads.expect("requested"), input.expect("requested")))
    }

    /// Parameter gradients only.
    pub fn param_gradients(&self, cache: &ForwardCache, output_grad: ArrayView2<'_, f64>) -> Result<GradientBundle> {
        Ok(self.backward_parts(cache, output_grad, true, false)?.0.expect("requested"))
    }

    /// Gradient with respect to the input only.
    pub fn input_gradient(&self, cache: &ForwardCache, output_grad: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.backward_parts(cache, output_grad, false, true)?.1.expect("requested"))
    }

    fn backward_parts(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<'_, f64>,
        want_params: bool,
        want_input: bool,
    ) -> Result<(Option<GradientBundle>, Option<Array2<f64>>)> {
        let n = self.layers.len();
        if cache.pre.len() != n {
            return Err(Error::shape("forward cache layers", n, cache.pre.len()));
        }
        let out_shape = cache.output().dim();
        if output_grad.dim() != out_shape {
            return Err(Error::shape(
                "output gradient",
                format!("{out_shape:?}"),
                format!("{:?}", output_grad.dim()),
            ));
        }
        for (l, z) in self.layers.iter().zip(&cache.pre) {
            if z.ncols() != l.out_width() {
                return Err(Error::shape("forward cache width", l.out_width(), z.ncols()));
            }
        }
        let mut weights = vec![Array2::zeros((0, 0)); n];
        let mut biases = vec![Array1::zeros(0); n];
        let mut upstream = output_grad.to_owned();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let act = layer.activation;
            let mut delta = upstream;
            if act != Activation::Identity {
                Zip::from(&mut delta)
                    .and(&cache.pre[i])
                    .and(&cache.post[i])
                    .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            }
            if want_params {
                weights[i] = delta.t().dot(&cache.inputs[i]);
                biases[i] = delta.sum_axis(Axis(0));
            }
            if i == 0 && !want_input {
                return Ok((Some(GradientBundle { weights, biases }), None));
            }
            let w = match (i, &cache.input_weights) {
                (0, Some(w)) => w,
                _ => &layer.weights,
            };
            upstream = delta.dot(w);
        }
        Ok((want_params.then_some(GradientBundle { weights, biases }), Some(upstream)))
    }

    /// Total number of active weights in the input layer.
    pub fn input_active_count(&self) -> usize {
        let l = &self.layers[0];
        l.mask
            .as_ref()
            .map_or(l.weights.len(), SparsityMask::active_count)
    }

    /// `self <- tau * source + (1 - tau) * self`, then copy the source masks.
    pub fn soft_update_from(&mut self, source: &Network, tau: f64) {
        for (dst, src) in self.layers.iter_mut().zip(&source.layers) {
            Zip::from(&mut dst.weights)
                .and(&src.weights)
                .for_each(|d, &s| *d = tau * s + (1.0 - tau) * *d);
            Zip::from(&mut dst.bias)
                .and(&src.bias)
                .for_each(|d, &s| *d = tau * s + (1.0 - tau) * *d);
            dst.mask.clone_from(&src.mask);
            dst.apply_mask();
        }
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
}

impl AdamState {
    pub fn new(net: &Network, lr: f64) -> Self {
        Self::with_betas(net, lr, 0.9, 0.999)
    }

    pub fn with_betas(net: &Network, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = GradientBundle::zeros_like(net);
        AdamState {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m_w: zeros.weights.clone(),
            v_w: zeros.weights,
            m_b: zeros.biases.clone(),
            v_b: zeros.biases,
        }
    }

    /// Zero both moments of the listed weight positions in `layer`.
    pub fn reset_positions(&mut self, layer: usize, positions: &[(usize, usize)]) {
        for &p in positions {
            self.m_w[layer][p] = 0.0;
            self.v_w[layer][p] = 0.0;
        }
    }

    pub fn weight_moments(&self, layer: usize) -> (&Array2<f64>, &Array2<f64>) {
        (&self.m_w[layer], &self.v_w[layer])
    }
}

/// One bias-corrected Adam step. With `mask_respect`, positions outside a
/// layer's mask are neither updated nor allowed to leave zero.
pub fn adam_step(
    net: &mut Network,
    grads: &GradientBundle,
    state: &mut AdamState,
    mask_respect: bool,
) -> Result<()> {
    grads.check_shapes(net)?;
    if state.m_w.len() != net.layers.len() {
        return Err(Error::shape(
            "adam state layers",
            net.layers.len(),
            state.m_w.len(),
        ));
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.lr;
    let update = move |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (i, layer) in net.layers.iter_mut().enumerate() {
        match (&layer.mask, mask_respect) {
            (Some(mask), true) => {
                Zip::from(&mut layer.weights)
                    .and(&mut state.m_w[i])
                    .and(&mut state.v_w[i])
                    .and(&grads.weights[i])
                    .and(mask.as_array())
                    .for_each(|p, m, v, &g, &keep| {
                        if keep {
                            update(p, m, v, g);
                        } else {
                            *p = 0.0;
                        }
                    });
            }
            _ => {
                Zip::from(&mut layer.weights)
                    .and(&mut state.m_w[i])
                    .and(&mut state.v_w[i])
                    .and(&grads.weights[i])
                    .for_each(|p, m, v, &g| update(p, m, v, g));
            }
        }
        Zip::from(&mut layer.bias)
            .and(&mut state.m_b[i])
            .and(&mut state.v_b[i])
            .and(&grads.biases[i])
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
    Ok(())
}

/// Adam on a single scalar parameter (SAC temperature).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: f64,
    v: f64,
}

impl ScalarAdam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        ScalarAdam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: 0.0,
            v: 0.0,
        }
    }

    pub fn step(&mut self, param: &mut f64, grad: f64) {
        self.step += 1;
        let t = self.step as i32;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad;
        let m_hat = self.m / (1.0 - self.beta1.powi(t));
        let v_hat = self.v / (1.0 - self.beta2.powi(t));
        *param -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
    }
}

/// Compare backprop against central differences on every unmasked parameter.
///
/// `probe` maps a network output to `(loss, dLoss/dOutput)`. The returned
/// error for each parameter is `|analytic - numeric| / max(1, |analytic|, |numeric|)`,
/// i.e. relative for large gradients and absolute for small ones; the
/// maximum over all parameters is returned.
pub fn finite_diff_check<F>(
    net: &Network,
    input: ArrayView2<'_, f64>,
    probe: F,
    epsilon: f64,
) -> Result<f64>
where
    F: Fn(&Array2<f64>) -> (f64, Array2<f64>),
{
    if epsilon <= 0.0 {
        return Err(Error::Config("finite-difference epsilon must be positive".into()));
    }
    let cache = net.forward(input)?;
    let (_, out_grad) = probe(cache.output());
    let (grads, _) = net.backward(&cache, out_grad.view())?;
    let loss_at = |n: &Network| -> Result<f64> { Ok(probe(&n.predict(input)?).0) };
    let rel = |a: f64, b: f64| (a - b).abs() / 1f64.max(a.abs()).max(b.abs());

    let mut probe_net = net.clone();
    let mut worst = 0.0f64;
    for li in 0..net.layers.len() {
        let (rows, cols) = net.layers[li].weights.dim();
        for r in 0..rows {
            for c in 0..cols {
                if let Some(mask) = &net.layers[li].mask {
                    if !mask.is_active(r, c) {
                        continue;
                    }
                }
                let orig = net.layers[li].weights[(r, c)];
                probe_net.layers[li].weights[(r, c)] = orig + epsilon;
                let plus = loss_at(&probe_net)?;
                probe_net.layers[li].weights[(r, c)] = orig - epsilon;
                let minus = loss_at(&probe_net)?;
                probe_net.layers[li].weights[(r, c)] = orig;
                let numeric = (plus - minus) / (2.0 * epsilon);
                worst = worst.max(rel(grads.weights[li][(r, c)], numeric));
            }
        }
        for r in 0..rows {
            let orig = net.layers[li].bias[r];
            probe_net.layers[li].bias[r] = orig + epsilon;
            let plus = loss_at(&probe_net)?;
            probe_net.layers[li].bias[r] = orig - epsilon;
            let minus = loss_at(&probe_net)?;
            probe_net.layers[li].bias[r] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(rel(grads.biases[li][r], numeric));
        }
    }
    Ok(worst)
}
