//! Minimal deterministic dense-network engine.
//!
//! All three model roles in the pipeline (auxiliary, bias experts, main) are
//! plain MLPs: affine layers with ReLU on hidden layers and raw logits at the
//! output. Everything is `f64` so analytic gradients can be compared against
//! finite differences at tight tolerances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Nonlinearity for hidden layers. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

impl Activation {
    #[inline]
    fn forward(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative expressed in terms of the post-activation value.
    #[inline]
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One dense layer; weights are row-major with shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Vec<f64>,
    biases: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }
}

/// Dense feedforward classifier shared by the auxiliary model, the bias
/// experts (`output_dim == 1`), and the main model (`output_dim == k`).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    activation: Activation,
    layers: Vec<DenseLayer>,
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::Config(format!(
            "layer_dims must have length >= 2, got {}",
            layer_dims.len()
        )));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!(
            "layer_dims entries must be >= 1, got {layer_dims:?}"
        )));
    }
    Ok(())
}

impl MlpModel {
    /// Builds a model with symmetric uniform fan-in initialization:
    /// weights ~ U(-1/sqrt(in_dim), 1/sqrt(in_dim)), biases zero.
    pub fn new(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (in_dim, out_dim) = (w[0], w[1]);
                let limit = 1.0 / (in_dim as f64).sqrt();
                let weights = (0..in_dim * out_dim)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                DenseLayer {
                    weights,
                    biases: vec![0.0; out_dim],
                    in_dim,
                    out_dim,
                }
            })
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            activation,
            layers,
        })
    }

    /// All-zero parameters; useful for tests and fixed-point checks.
    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        let mut model = Self::new(layer_dims, activation, 0)?;
        for layer in &mut model.layers {
            layer.weights.fill(0.0);
            layer.biases.fill(0.0);
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Total parameter count; a pure function of `layer_dims`.
    pub fn param_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn set_weight(&mut self, layer: usize, row: usize, col: usize, value: f64) {
        let l = &mut self.layers[layer];
        l.weights[row * l.in_dim + col] = value;
    }

    pub fn set_bias(&mut self, layer: usize, row: usize, value: f64) {
        self.layers[layer].biases[row] = value;
    }

    fn check_finite(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = layer.weights.iter().chain(layer.biases.iter());
            if bad.into_iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericState(format!(
                    "non-finite parameter in layer {i}"
                )));
            }
        }
        Ok(())
    }

    /// Forward pass: returns `output_dim` raw logits (no final activation).
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(features)?.0)
    }

    /// Forward pass that also returns the cached activations needed by
    /// [`MlpModel::backward`].
    pub fn forward_cached(&self, features: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if features.len() != self.input_dim() {
            return Err(Error::InputShape(format!(
                "expected {} features, got {}",
                self.input_dim(),
                features.len()
            )));
        }
        self.check_finite()?;

        let mut hidden = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let mut current = features.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.out_dim];
            for (o, out_v) in out.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                let mut sum = layer.biases[o];
                for (w, x) in row.iter().zip(current.iter()) {
                    sum += w * x;
                }
                *out_v = if i == last {
                    sum
                } else {
                    self.activation.forward(sum)
                };
            }
            if i != last {
                hidden.push(out.clone());
            }
            current = out;
        }

        let cache = ForwardCache {
            layer_dims: self.layer_dims.clone(),
            input: features.to_vec(),
            hidden,
        };
        Ok((current, cache))
    }

    /// Analytic gradients of `logits . upstream` w.r.t. every parameter.
    ///
    /// `cache` must come from [`MlpModel::forward_cached`] on this model.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<GradientBuffer> {
        let mut grads = GradientBuffer::zeros_like(self);
        self.backward_into(cache, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Like [`MlpModel::backward`] but accumulates into an existing buffer,
    /// for summing per-example gradients over a batch without reallocating.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut GradientBuffer,
    ) -> Result<()> {
        if cache.layer_dims != self.layer_dims {
            return Err(Error::CacheMismatch(format!(
                "cache built for dims {:?}, model has {:?}",
                cache.layer_dims, self.layer_dims
            )));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::InputShape(format!(
                "upstream gradient has length {}, expected {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if !grads.matches_model(self) {
            return Err(Error::InputShape(
                "gradient buffer does not match model shapes".to_string(),
            ));
        }

        let mut delta = upstream.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let inputs: &[f64] = if l == 0 {
                &cache.input
            } else {
                &cache.hidden[l - 1]
            };
            let g = &mut grads.layers[l];
            let mut delta_prev = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let d = delta[o];
                g.d_biases[o] += d;
                let row = o * layer.in_dim;
                for i in 0..layer.in_dim {
                    g.d_weights[row + i] += d * inputs[i];
                    delta_prev[i] += layer.weights[row + i] * d;
                }
            }
            if l > 0 {
                for (dp, a) in delta_prev.iter_mut().zip(inputs.iter()) {
                    *dp *= self.activation.grad_from_output(*a);
                }
            }
            delta = delta_prev;
        }
        Ok(())
    }

    /// Hex digest of all parameter bits; equal iff parameters are bit-identical.
    pub fn param_fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for layer in &self.layers {
            for v in layer.weights.iter().chain(layer.biases.iter()) {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Activations cached by a forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layer_dims: Vec<usize>,
    input: Vec<f64>,
    hidden: Vec<Vec<f64>>,
}

/// Per-parameter gradient tensors matching an [`MlpModel`]'s shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub d_weights: Vec<f64>,
    pub d_biases: Vec<f64>,
}

impl GradientBuffer {
    pub fn zeros_like(model: &MlpModel) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| LayerGrads {
                d_weights: vec![0.0; l.weights.len()],
                d_biases: vec![0.0; l.biases.len()],
            })
            .collect();
        Self { layers }
    }

    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.d_weights.fill(0.0);
            l.d_biases.fill(0.0);
        }
    }

    /// Adds `other` into `self`; shapes must match.
    pub fn accumulate(&mut self, other: &GradientBuffer) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::InputShape(
                "gradient buffers have different shapes".to_string(),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            for (x, y) in a.d_weights.iter_mut().zip(b.d_weights.iter()) {
                *x += y;
            }
            for (x, y) in a.d_biases.iter_mut().zip(b.d_biases.iter()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            for v in &mut l.d_weights {
                *v *= factor;
            }
            for v in &mut l.d_biases {
                *v *= factor;
            }
        }
    }

    fn same_shape(&self, other: &GradientBuffer) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(other.layers.iter()).all(|(a, b)| {
                a.d_weights.len() == b.d_weights.len() && a.d_biases.len() == b.d_biases.len()
            })
    }

    fn matches_model(&self, model: &MlpModel) -> bool {
        self.layers.len() == model.layers.len()
            && self.layers.iter().zip(model.layers.iter()).all(|(g, l)| {
                g.d_weights.len() == l.weights.len() && g.d_biases.len() == l.biases.len()
            })
    }
}

/// AdamW state: first/second moment accumulators plus hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<LayerGrads>,
    v: Vec<LayerGrads>,
    step: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    /// Zeroed moments with the default hyperparameters
    /// (beta1 0.9, beta2 0.999, eps 1e-8, weight decay 0.01).
    pub fn new(model: &MlpModel, learning_rate: f64) -> Self {
        let zeros = || GradientBuffer::zeros_like(model).layers;
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            learning_rate,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn with_weight_decay(model: &MlpModel, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::new(model, learning_rate)
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update: decoupled weight decay, then bias-corrected moment step.
pub fn optimizer_step(
    model: &mut MlpModel,
    grads: &GradientBuffer,
    state: &mut OptimizerState,
) -> Result<()> {
    if state.learning_rate <= 0.0 {
        return Err(Error::Config(format!(
            "learning_rate must be > 0, got {}",
            state.learning_rate
        )));
    }
    if !grads.matches_model(model) {
        return Err(Error::Config(
            "gradient shapes do not match model parameters".to_string(),
        ));
    }

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let lr = state.learning_rate;

    for ((layer, g), (m, v)) in model
        .layers
        .iter_mut()
        .zip(grads.layers.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let params = layer.weights.iter_mut().chain(layer.biases.iter_mut());
        let grads = g.d_weights.iter().chain(g.d_biases.iter());
        let moments = m
            .d_weights
            .iter_mut()
            .chain(m.d_biases.iter_mut())
            .zip(v.d_weights.iter_mut().chain(v.d_biases.iter_mut()));
        for ((p, &grad), (m_val, v_val)) in params.zip(grads).zip(moments) {
            *p *= 1.0 - lr * state.weight_decay;
            *m_val = state.beta1 * *m_val + (1.0 - state.beta1) * grad;
            *v_val = state.beta2 * *v_val + (1.0 - state.beta2) * grad * grad;
            let m_hat = *m_val / bc1;
            let v_hat = *v_val / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    model.check_finite()
}

/// Analytic parameter gradients of `loss_fn(model(x))`.
///
/// `loss_fn` maps logits to a scalar loss and its gradient w.r.t. the logits.
pub fn loss_gradients<F>(model: &MlpModel, features: &[f64], loss_fn: F) -> Result<GradientBuffer>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (logits, cache) = model.forward_cached(features)?;
    let (_, grad_logits) = loss_fn(&logits);
    model.backward(&cache, &grad_logits)
}

/// Max relative error between `analytic` and central finite differences
/// (h = 1e-5) of `value_fn(model(x))` over every parameter.
pub fn fd_max_rel_error<F>(
    model: &mut MlpModel,
    features: &[f64],
    value_fn: F,
    analytic: &GradientBuffer,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if !analytic.matches_model(model) {
        return Err(Error::Config(
            "analytic gradient shapes do not match model parameters".to_string(),
        ));
    }
    let h = 1e-5;
    let mut max_err: f64 = 0.0;
    let n_layers = model.layers.len();
    for l in 0..n_layers {
        let n_w = model.layers[l].weights.len();
        let n_b = model.layers[l].biases.len();
        for p in 0..n_w + n_b {
            let read = |m: &MlpModel| {
                if p < n_w {
                    m.layers[l].weights[p]
                } else {
                    m.layers[l].biases[p - n_w]
                }
            };
            let write = |m: &mut MlpModel, v: f64| {
                if p < n_w {
                    m.layers[l].weights[p] = v;
                } else {
                    m.layers[l].biases[p - n_w] = v;
                }
            };
            let orig = read(model);
            write(model, orig + h);
            let plus = value_fn(&model.forward(features)?);
            write(model, orig - h);
            let minus = value_fn(&model.forward(features)?);
            write(model, orig);

            let numeric = (plus - minus) / (2.0 * h);
            let a = if p < n_w {
                analytic.layers[l].d_weights[p]
            } else {
                analytic.layers[l].d_biases[p - n_w]
            };
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

/// Compares the analytic backward pass against central finite differences and
/// returns the max relative gradient error over all parameters.
pub fn finite_difference_check<F>(
    model: &mut MlpModel,
    features: &[f64],
    loss_fn: F,
) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let analytic = loss_gradients(model, features, &loss_fn)?;
    fd_max_rel_error(model, features, |logits| loss_fn(logits).0, &analytic)
}
