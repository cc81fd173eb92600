//! Fully-connected classifier with Monte-Carlo dropout.
//!
//! Architecture: `input -> [FC -> ReLU -> dropout] x H -> FC(2) -> softmax`.
//! Dropout is inverted: kept units are scaled by `1 / (1 - rate)` so the
//! mask-free pass equals the expectation over masks. At prediction time the
//! masks stay active and `T` stochastic passes are averaged in probability
//! space.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{FeatureLayout, FeatureVector, Pathology};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MlpError {
    #[error("dimension mismatch at layer {layer}: expected {expected}, got {got}")]
    Dimension {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid probability pair ({0}, {1})")]
    InvalidDistribution(f64, f64),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("degenerate labels: training set contains only {0}")]
    DegenerateLabels(Pathology),
    #[error("number of stochastic passes must be at least 1")]
    ZeroPasses,
    #[error("feature layout mismatch: model expects {model}, data encoded with {data}")]
    LayoutMismatch { model: String, data: String },
}

pub type Result<T, E = MlpError> = std::result::Result<T, E>;

/// Two-class predictive distribution `(p_benign, p_malignant)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveDistribution<T> {
    p_benign: T,
    p_malignant: T,
}

impl<T: Scalar> PredictiveDistribution<T> {
    pub fn new(p_benign: T, p_malignant: T) -> Result<Self> {
        let unit = |p: T| p >= T::zero() && p <= T::one();
        let sum_ok = (p_benign + p_malignant - T::one()).abs() <= T::sum_tolerance();
        if !(unit(p_benign) && unit(p_malignant) && sum_ok) {
            return Err(MlpError::InvalidDistribution(
                p_benign.to_f64_lossless(),
                p_malignant.to_f64_lossless(),
            ));
        }
        Ok(Self {
            p_benign,
            p_malignant,
        })
    }

    /// `(1 - p, p)`.
    pub fn from_malignant(p_malignant: T) -> Result<Self> {
        Self::new(T::one() - p_malignant, p_malignant)
    }

    pub fn p_benign(&self) -> T {
        self.p_benign
    }

    pub fn p_malignant(&self) -> T {
        self.p_malignant
    }

    pub fn prob(&self, class: Pathology) -> T {
        match class {
            Pathology::Benign => self.p_benign,
            Pathology::Malignant => self.p_malignant,
        }
    }

    /// Argmax label; an exact 0.5 goes to the malignant class.
    pub fn predicted_label(&self) -> Pathology {
        if self.p_malignant >= T::lit(0.5) {
            Pathology::Malignant
        } else {
            Pathology::Benign
        }
    }
}

/// Numerically stable two-class softmax over `(benign, malignant)` logits.
pub fn softmax<T: Scalar>(logits: [T; 2]) -> Result<PredictiveDistribution<T>> {
    if !logits.iter().all(|l| l.is_finite()) {
        return Err(MlpError::NonFinite("logits"));
    }
    let [a, b] = logits;
    // e = exp(min - max) in (0, 1]
    let (lo_is_b, d) = if a >= b {
        (true, b - a)
    } else {
        (false, a - b)
    };
    let e = d.exp();
    let denom = T::one() + e;
    let hi = T::one() / denom;
    let lo = e / denom;
    let (pb, pm) = if lo_is_b { (hi, lo) } else { (lo, hi) };
    Ok(PredictiveDistribution {
        p_benign: pb,
        p_malignant: pm,
    })
}

/// Probability floor applied before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-ln p(label)`, floored at [`PROB_FLOOR`].
pub fn loss_cross_entropy<T: Scalar>(dist: &PredictiveDistribution<T>, label: Pathology) -> T {
    let p = dist.prob(label).max(T::lit(PROB_FLOOR));
    -p.ln()
}

/// Weights (row-major, `n_out x n_in`) and bias of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    n_in: usize,
    n_out: usize,
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn new(n_in: usize, n_out: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weights.len() != n_in * n_out {
            return Err(MlpError::InvalidConfig(format!(
                "weight array of length {} for a {n_out}x{n_in} layer",
                weights.len()
            )));
        }
        if bias.len() != n_out {
            return Err(MlpError::InvalidConfig(format!(
                "bias of length {} for a layer with {n_out} units",
                bias.len()
            )));
        }
        Ok(Self {
            n_in,
            n_out,
            weights,
            bias,
        })
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![T::zero(); n_in * n_out],
            bias: vec![T::zero(); n_out],
        }
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    pub fn weight(&self, out: usize, inp: usize) -> T {
        self.weights[out * self.n_in + inp]
    }

    fn affine(&self, x: &[T]) -> Vec<T> {
        self.weights
            .chunks_exact(self.n_in)
            .zip(&self.bias)
            .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&w, &xi)| acc + w * xi))
            .collect()
    }
}

/// Ordered dense layers ending in the two-unit output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> NetworkParams<T> {
    /// Validates shape chaining, a two-unit output and finiteness.
    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(MlpError::InvalidConfig("network without layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].n_in != pair[0].n_out {
                return Err(MlpError::Dimension {
                    layer: i + 1,
                    expected: pair[0].n_out,
                    got: pair[1].n_in,
                });
            }
        }
        let last = layers.len() - 1;
        if layers[last].n_out != 2 {
            return Err(MlpError::Dimension {
                layer: last,
                expected: 2,
                got: layers[last].n_out,
            });
        }
        let net = Self { layers };
        if !net.is_finite() {
            return Err(MlpError::NonFinite("network parameters"));
        }
        Ok(net)
    }

    /// All-zero network for `sizes = [input, hidden.., 2]`.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        Self::from_layers(sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect())
    }

    /// Fan-in-scaled uniform initialisation: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases.
    pub fn kaiming_uniform<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        for layer in &mut net.layers {
            let bound = (6.0 / layer.n_in as f64).sqrt();
            for w in &mut layer.weights {
                *w = T::lit(rng.gen_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    /// `[input, hidden.., 2]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].n_in)
            .chain(self.layers.iter().map(|l| l.n_out))
            .collect()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.n_out)
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// All parameters, layer by layer, weights before bias.
    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.n_in, l.n_out))
                .collect(),
        }
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(MlpError::Dimension {
                layer: self.layers.len().min(other.layers.len()),
                expected: self.layers.len(),
                got: other.layers.len(),
            });
        }
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.n_in != b.n_in || a.n_out != b.n_out {
                return Err(MlpError::Dimension {
                    layer: i,
                    expected: a.n_in * a.n_out,
                    got: b.n_in * b.n_out,
                });
            }
        }
        Ok(())
    }

    fn scale(&mut self, s: T) {
        for v in self.iter_mut() {
            *v = *v * s;
        }
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(MlpError::InvalidConfig(
            "need at least input and output sizes".into(),
        ));
    }
    if sizes.contains(&0) {
        return Err(MlpError::InvalidConfig(format!(
            "zero-width layer in {sizes:?}"
        )));
    }
    if *sizes.last().unwrap() != 2 {
        return Err(MlpError::InvalidConfig(format!(
            "output layer must have 2 units, got {sizes:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutConfig {
    rate: f64,
}

impl DropoutConfig {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(MlpError::InvalidConfig(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        Ok(Self { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self { rate: 0.5 }
    }
}

/// Keep/drop pattern for every hidden layer of one stochastic pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    rate: f64,
    keep: Vec<Vec<bool>>,
}

impl DropoutMasks {
    pub fn new(rate: f64, keep: Vec<Vec<bool>>) -> Result<Self> {
        DropoutConfig::new(rate)?;
        Ok(Self { rate, keep })
    }

    /// Keeps every unit.
    pub fn all_ones(widths: &[usize], rate: f64) -> Result<Self> {
        Self::new(rate, widths.iter().map(|&w| vec![true; w]).collect())
    }

    /// Each unit is dropped independently with probability `rate`.
    pub fn sample<R: Rng>(widths: &[usize], rate: f64, rng: &mut R) -> Self {
        let keep = widths
            .iter()
            .map(|&w| (0..w).map(|_| rng.gen::<f64>() >= rate).collect())
            .collect();
        Self { rate, keep }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn keep(&self) -> &[Vec<bool>] {
        &self.keep
    }
}

/// Inverted dropout of one activation vector.
pub fn apply_dropout<T: Scalar>(h: &[T], keep: &[bool], rate: f64) -> Vec<T> {
    let scale = T::lit(1.0 / (1.0 - rate));
    h.iter()
        .zip(keep)
        .map(|(&v, &k)| if k { v * scale } else { T::zero() })
        .collect()
}

struct Trace<T> {
    /// `activations[0]` is the input; `activations[l + 1]` the (dropped-out)
    /// output of hidden layer `l`.
    activations: Vec<Vec<T>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<T>>,
    logits: [T; 2],
}

fn forward_trace<T: Scalar>(
    params: &NetworkParams<T>,
    x: &[T],
    masks: Option<&DropoutMasks>,
) -> Result<Trace<T>> {
    if x.len() != params.input_dim() {
        return Err(MlpError::Dimension {
            layer: 0,
            expected: params.input_dim(),
            got: x.len(),
        });
    }
    let hidden = params.layers.len() - 1;
    if let Some(m) = masks {
        if m.keep.len() != hidden {
            return Err(MlpError::Dimension {
                layer: hidden,
                expected: hidden,
                got: m.keep.len(),
            });
        }
        for (l, (k, layer)) in m.keep.iter().zip(&params.layers).enumerate() {
            if k.len() != layer.n_out {
                return Err(MlpError::Dimension {
                    layer: l,
                    expected: layer.n_out,
                    got: k.len(),
                });
            }
        }
    }
    let mut activations = Vec::with_capacity(hidden + 1);
    let mut pre = Vec::with_capacity(hidden);
    activations.push(x.to_vec());
    for (l, layer) in params.layers[..hidden].iter().enumerate() {
        let z = layer.affine(activations.last().unwrap());
        let relu: Vec<T> = z.iter().map(|&v| v.max(T::zero())).collect();
        let a = match masks {
            Some(m) => apply_dropout(&relu, &m.keep[l], m.rate),
            None => relu,
        };
        pre.push(z);
        activations.push(a);
    }
    let out = params.layers[hidden].affine(activations.last().unwrap());
    Ok(Trace {
        activations,
        pre,
        logits: [out[0], out[1]],
    })
}

/// Logits `(benign, malignant)` for one input, optionally under dropout masks.
pub fn forward<T: Scalar>(
    params: &NetworkParams<T>,
    x: &[T],
    masks: Option<&DropoutMasks>,
) -> Result<[T; 2]> {
    forward_trace(params, x, masks).map(|t| t.logits)
}

/// Gradient of `loss_cross_entropy(softmax(forward(x)), label)` with masks
/// held fixed.
///
/// The output delta is `softmax - one_hot`; the probability floor of the
/// loss is not differentiated.
pub fn backward<T: Scalar>(
    params: &NetworkParams<T>,
    x: &[T],
    masks: Option<&DropoutMasks>,
    label: Pathology,
) -> Result<NetworkParams<T>> {
    let mut grads = params.zeros_like();
    backward_accumulate(params, x, masks, label, &mut grads)?;
    Ok(grads)
}

/// Adds the per-example gradient into `grads`; returns the example's loss.
fn backward_accumulate<T: Scalar>(
    params: &NetworkParams<T>,
    x: &[T],
    masks: Option<&DropoutMasks>,
    label: Pathology,
    grads: &mut NetworkParams<T>,
) -> Result<T> {
    let trace = forward_trace(params, x, masks)?;
    let dist = softmax(trace.logits)?;
    let loss = loss_cross_entropy(&dist, label);
    let mut delta = vec![dist.p_benign, dist.p_malignant];
    delta[label.index()] = delta[label.index()] - T::one();

    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let input = &trace.activations[l];
        let g = &mut grads.layers[l];
        for (o, &d) in delta.iter().enumerate() {
            g.bias[o] = g.bias[o] + d;
            let row = &mut g.weights[o * layer.n_in..(o + 1) * layer.n_in];
            for (gw, &a) in row.iter_mut().zip(input) {
                *gw = *gw + d * a;
            }
        }
        if l == 0 {
            break;
        }
        // delta for hidden layer l - 1
        let below = l - 1;
        let scale = masks.map(|m| T::lit(1.0 / (1.0 - m.rate)));
        let mut next = vec![T::zero(); layer.n_in];
        for (o, &d) in delta.iter().enumerate() {
            for (i, n) in next.iter_mut().enumerate() {
                *n = *n + layer.weight(o, i) * d;
            }
        }
        for (i, n) in next.iter_mut().enumerate() {
            let active = trace.pre[below][i] > T::zero();
            let kept = masks.is_none_or(|m| m.keep[below][i]);
            *n = if active && kept {
                scale.map_or(*n, |s| *n * s)
            } else {
                T::zero()
            };
        }
        delta = next;
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MlpError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be > 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("adam {name} = {b} outside (0, 1)"));
            }
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad(format!("adam epsilon {} must be > 0", self.adam_epsilon));
        }
        Ok(())
    }
}

/// Adam moment accumulators and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    m: NetworkParams<T>,
    v: NetworkParams<T>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &NetworkParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &NetworkParams<T> {
        &self.m
    }

    pub fn second_moment(&self) -> &NetworkParams<T> {
        &self.v
    }

    /// Bias-corrected Adam update applied in place.
    pub fn step(
        &mut self,
        params: &mut NetworkParams<T>,
        grads: &NetworkParams<T>,
        config: &TrainConfig,
    ) -> Result<()> {
        params.check_shape(grads)?;
        params.check_shape(&self.m)?;
        self.t += 1;
        let b1 = T::lit(config.adam_beta1);
        let b2 = T::lit(config.adam_beta2);
        let lr = T::lit(config.learning_rate);
        let eps = T::lit(config.adam_epsilon);
        let c1 = T::one() - b1.powi(self.t as i32);
        let c2 = T::one() - b2.powi(self.t as i32);
        let update = |w: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
            for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        for (((p, g), m), v) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.m.layers.iter_mut())
            .zip(self.v.layers.iter_mut())
        {
            update(&mut p.weights, &g.weights, &mut m.weights, &mut v.weights);
            update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step<T: Scalar>(
    state: &AdamState<T>,
    params: &NetworkParams<T>,
    grads: &NetworkParams<T>,
    config: &TrainConfig,
) -> Result<(AdamState<T>, NetworkParams<T>)> {
    let mut s = state.clone();
    let mut p = params.clone();
    s.step(&mut p, grads, config)?;
    Ok((s, p))
}

/// Trained network plus everything needed to reproduce its predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesianClassifier<T> {
    pub params: NetworkParams<T>,
    pub dropout: DropoutConfig,
    pub layout: FeatureLayout,
    pub seed: u64,
    pub final_loss: f64,
}

impl<T: Scalar> BayesianClassifier<T> {
    pub fn check_layout(&self, x: &FeatureVector<T>) -> Result<()> {
        if x.layout_hash() != self.layout.hash() {
            return Err(MlpError::LayoutMismatch {
                model: self.layout.hash().to_string(),
                data: x.layout_hash().to_string(),
            });
        }
        Ok(())
    }

    /// Mask-free pass.
    pub fn predict_deterministic(&self, x: &FeatureVector<T>) -> Result<PredictiveDistribution<T>> {
        self.check_layout(x)?;
        softmax(forward(&self.params, x.values(), None)?)
    }
}

/// ChaCha stream `stream` of `seed`. Distinct streams are independent.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Mini-batch Adam on mean cross-entropy, with dropout active.
///
/// Initialisation, shuffling and dropout masks each come from their own
/// stream of `config.seed`, so the result is a pure function of the inputs.
pub fn train<T: Scalar>(
    data: &[(FeatureVector<T>, Pathology)],
    layout: &FeatureLayout,
    hidden: &[usize],
    dropout: DropoutConfig,
    config: &TrainConfig,
) -> Result<BayesianClassifier<T>> {
    config.validate()?;
    if data.is_empty() {
        return Err(MlpError::EmptyTrainingSet);
    }
    let first = data[0].1;
    if data.iter().all(|(_, y)| *y == first) {
        return Err(MlpError::DegenerateLabels(first));
    }
    for (x, _) in data {
        if x.layout_hash() != layout.hash() {
            return Err(MlpError::LayoutMismatch {
                model: layout.hash().to_string(),
                data: x.layout_hash().to_string(),
            });
        }
    }
    let mut sizes = vec![layout.len()];
    sizes.extend_from_slice(hidden);
    sizes.push(2);

    let mut params =
        NetworkParams::kaiming_uniform(&sizes, &mut stream_rng(config.seed, INIT_STREAM))?;
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = stream_rng(config.seed, SHUFFLE_STREAM);
    let mut mask_rng = stream_rng(config.seed, DROPOUT_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads = params.zeros_like();

    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            for v in grads.iter_mut() {
                *v = T::zero();
            }
            for &i in batch {
                let (x, y) = &data[i];
                let masks = DropoutMasks::sample(hidden, dropout.rate, &mut mask_rng);
                backward_accumulate(&params, x.values(), Some(&masks), *y, &mut grads)?;
            }
            grads.scale(T::one() / T::lit(batch.len() as f64));
            adam.step(&mut params, &grads, config)?;
        }
        if !params.is_finite() {
            return Err(MlpError::NonFinite("parameters during training"));
        }
    }

    let mut total = 0.0;
    for (x, y) in data {
        let dist = softmax(forward(&params, x.values(), None)?)?;
        total += loss_cross_entropy(&dist, *y).to_f64_lossless();
    }
    Ok(BayesianClassifier {
        params,
        dropout,
        layout: layout.clone(),
        seed: config.seed,
        final_loss: total / data.len() as f64,
    })
}

/// Per-pass softmax outputs of one Monte-Carlo-dropout prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSamples<T> {
    per_pass: Vec<PredictiveDistribution<T>>,
    seed: u64,
}

impl<T: Scalar> PredictiveSamples<T> {
    pub fn new(per_pass: Vec<PredictiveDistribution<T>>, seed: u64) -> Result<Self> {
        if per_pass.is_empty() {
            return Err(MlpError::ZeroPasses);
        }
        Ok(Self { per_pass, seed })
    }

    pub fn per_pass(&self) -> &[PredictiveDistribution<T>] {
        &self.per_pass
    }

    pub fn passes(&self) -> usize {
        self.per_pass.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Componentwise average of the per-pass distributions, without
    /// re-normalisation.
    pub fn mean(&self) -> Result<PredictiveDistribution<T>> {
        let n = T::lit(self.per_pass.len() as f64);
        let (sb, sm) = self
            .per_pass
            .iter()
            .fold((T::zero(), T::zero()), |(b, m), d| {
                (b + d.p_benign, m + d.p_malignant)
            });
        PredictiveDistribution::new(sb / n, sm / n)
    }
}

/// `passes` stochastic forward passes with fresh dropout masks, averaged.
///
/// Pass `t` draws its masks from stream `t` of `seed`, independent of how
/// passes are scheduled.
pub fn mc_predict<T: Scalar>(
    model: &BayesianClassifier<T>,
    x: &FeatureVector<T>,
    passes: usize,
    seed: u64,
) -> Result<(PredictiveSamples<T>, PredictiveDistribution<T>)> {
    if passes == 0 {
        return Err(MlpError::ZeroPasses);
    }
    model.check_layout(x)?;
    let widths = model.params.hidden_widths();
    let per_pass = (0..passes as u64)
        .map(|t| {
            let masks = DropoutMasks::sample(&widths, model.dropout.rate, &mut stream_rng(seed, t));
            softmax(forward(&model.params, x.values(), Some(&masks))?)
        })
        .collect::<Result<Vec<_>>>()?;
    let samples = PredictiveSamples::new(per_pass, seed)?;
    let dist = samples.mean()?;
    Ok((samples, dist))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn net(sizes: &[usize], seed: u64) -> NetworkParams<f64> {
        NetworkParams::kaiming_uniform(sizes, &mut stream_rng(seed, 99)).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let d = softmax([0.0f64, 0.0]).unwrap();
        assert_eq!((d.p_benign(), d.p_malignant()), (0.5, 0.5));
        let d = softmax([3.0f64.ln(), 0.0]).unwrap();
        assert_relative_eq!(d.p_benign(), 0.75, epsilon = 1e-15);
        assert_relative_eq!(d.p_malignant(), 0.25, epsilon = 1e-15);
        assert!(softmax([f64::NAN, 0.0]).is_err());
        assert!(softmax([f64::INFINITY, 0.0]).is_err());
        let d = softmax([800.0f64, -800.0]).unwrap();
        assert_eq!(d.p_benign(), 1.0);
    }

    proptest! {
        // Dyadic inputs keep (a + c) - (b + c) exact in f64.
        #[test]
        fn softmax_shift_invariant(a in -6400i32..6400, b in -6400i32..6400, c in -6400i32..=6400) {
            let (a, b, c) = (a as f64 / 64.0, b as f64 / 64.0, c as f64 / 64.0);
            prop_assert_eq!(softmax([a + c, b + c]).unwrap(), softmax([a, b]).unwrap());
        }

        #[test]
        fn softmax_normalised(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let d = softmax([a, b]).unwrap();
            prop_assert!((d.p_benign() + d.p_malignant() - 1.0).abs() <= 1e-12);
            prop_assert!(d.p_benign() > 0.0 && d.p_malignant() > 0.0);
        }
    }

    #[test]
    fn softmax_f32() {
        let d = softmax([1.0f32, -1.0]).unwrap();
        assert!((d.p_benign() + d.p_malignant() - 1.0).abs() < 1e-6);
        assert!(d.p_benign() > 0.88 && d.p_benign() < 0.881);
    }

    #[test]
    fn cross_entropy_examples() {
        let u = PredictiveDistribution::new(0.5f64, 0.5).unwrap();
        assert_relative_eq!(loss_cross_entropy(&u, Pathology::Benign), 2f64.ln());
        assert_relative_eq!(loss_cross_entropy(&u, Pathology::Malignant), 2f64.ln());
        let sure = PredictiveDistribution::new(1.0f64, 0.0).unwrap();
        assert_eq!(loss_cross_entropy(&sure, Pathology::Benign), 0.0);
        assert_relative_eq!(
            loss_cross_entropy(&sure, Pathology::Malignant),
            -(1e-12f64).ln()
        );
        let d = PredictiveDistribution::new(0.25f64, 0.75).unwrap();
        assert_relative_eq!(
            loss_cross_entropy(&d, Pathology::Malignant),
            0.287_682_072_451_780_9,
            epsilon = 1e-12
        );
    }

    #[test]
    fn distribution_validation() {
        assert!(PredictiveDistribution::new(0.6f64, 0.5).is_err());
        assert!(PredictiveDistribution::new(-0.1f64, 1.1).is_err());
        assert_eq!(
            PredictiveDistribution::from_malignant(0.5f64)
                .unwrap()
                .predicted_label(),
            Pathology::Malignant
        );
        assert_eq!(
            PredictiveDistribution::from_malignant(0.49f64)
                .unwrap()
                .predicted_label(),
            Pathology::Benign
        );
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let p = NetworkParams::<f64>::zeros(&[4, 3, 3, 2]).unwrap();
        assert_eq!(
            forward(&p, &[0.3, 0.1, 0.9, 1.0], None).unwrap(),
            [0.0, 0.0]
        );
    }

    #[test]
    fn unit_masks_at_rate_zero_match_mask_free() {
        let p = net(&[5, 8, 6, 2], 1);
        let x = [0.1, 0.4, 0.9, 0.0, 1.0];
        let m = DropoutMasks::all_ones(&p.hidden_widths(), 0.0).unwrap();
        assert_eq!(
            forward(&p, &x, Some(&m)).unwrap(),
            forward(&p, &x, None).unwrap()
        );
    }

    #[test]
    fn hand_computed_forward() {
        // 2 inputs -> 1 hidden unit -> 2 outputs
        let l0 = Layer::new(2, 1, vec![2.0, -1.0], vec![0.5]).unwrap();
        let l1 = Layer::new(1, 2, vec![1.5, -3.0], vec![0.25, 1.0]).unwrap();
        let p = NetworkParams::from_layers(vec![l0, l1]).unwrap();
        // h = relu(2*1 - 1*0.5 + 0.5) = 2
        assert_eq!(forward(&p, &[1.0, 0.5], None).unwrap(), [3.25, -5.0]);
        // h = relu(2*0 - 1*3 + 0.5) = 0
        assert_eq!(forward(&p, &[0.0, 3.0], None).unwrap(), [0.25, 1.0]);
        // dropout keeps the unit and doubles it at rate 0.5: h = 4
        let m = DropoutMasks::new(0.5, vec![vec![true]]).unwrap();
        assert_eq!(forward(&p, &[1.0, 0.5], Some(&m)).unwrap(), [6.25, -11.0]);
        let m = DropoutMasks::new(0.5, vec![vec![false]]).unwrap();
        assert_eq!(forward(&p, &[1.0, 0.5], Some(&m)).unwrap(), [0.25, 1.0]);
    }

    #[test]
    fn shape_errors_name_layer() {
        let p = net(&[3, 4, 2], 2);
        assert_eq!(
            forward(&p, &[1.0, 2.0], None),
            Err(MlpError::Dimension {
                layer: 0,
                expected: 3,
                got: 2
            })
        );
        let m = DropoutMasks::all_ones(&[5], 0.5).unwrap();
        assert_eq!(
            forward(&p, &[1.0, 2.0, 3.0], Some(&m)),
            Err(MlpError::Dimension {
                layer: 0,
                expected: 4,
                got: 5
            })
        );
        let bad = NetworkParams::from_layers(vec![Layer::<f64>::zeros(3, 4), Layer::zeros(5, 2)]);
        assert_eq!(
            bad,
            Err(MlpError::Dimension {
                layer: 1,
                expected: 4,
                got: 5
            })
        );
        assert!(NetworkParams::<f64>::zeros(&[3, 4, 3]).is_err());
    }

    #[test]
    fn gradient_zero_at_optimum() {
        // Output bias pushes all mass to the benign class; weights are zero.
        let mut p = NetworkParams::<f64>::zeros(&[2, 3, 2]).unwrap();
        p.layers[1].bias = vec![1000.0, -1000.0];
        let g = backward(&p, &[0.3, 0.7], None, Pathology::Benign).unwrap();
        assert!(g.iter().all(|v| v == 0.0));
    }

    #[test]
    fn output_bias_gradient_is_softmax_minus_one_hot() {
        let p = net(&[4, 6, 5, 2], 3);
        let x = [0.2, 0.8, 0.5, 0.1];
        let d = softmax(forward(&p, &x, None).unwrap()).unwrap();
        let g = backward(&p, &x, None, Pathology::Malignant).unwrap();
        let ob = g.layers().last().unwrap().bias();
        assert_relative_eq!(ob[0], d.p_benign(), epsilon = 1e-15);
        assert_relative_eq!(ob[1], d.p_malignant() - 1.0, epsilon = 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_stationary() {
        let p = net(&[3, 4, 2], 4);
        let g = p.zeros_like();
        let (s, q) = adam_step(&AdamState::new(&p), &p, &g, &TrainConfig::default()).unwrap();
        assert_eq!(q, p);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn adam_first_and_second_step_size() {
        let cfg = TrainConfig::default();
        let lr = cfg.learning_rate;
        let mut p = NetworkParams::<f64>::zeros(&[1, 2]).unwrap();
        p.layers[0].weights = vec![0.3, -0.2];
        let mut g = p.zeros_like();
        g.layers[0].weights = vec![0.7, -2.5];
        let (s1, p1) = adam_step(&AdamState::new(&p), &p, &g, &cfg).unwrap();
        let d1 = p1.layers[0].weights[0] - p.layers[0].weights[0];
        let d1b = p1.layers[0].weights[1] - p.layers[0].weights[1];
        // moves against the gradient by lr * |g| / (|g| + eps)
        assert!(d1 < 0.0 && d1b > 0.0);
        for (d, gabs) in [(d1.abs(), 0.7f64), (d1b.abs(), 2.5)] {
            assert!(d <= lr * (1.0 + 1e-12));
            assert!(d >= lr * (1.0 - cfg.adam_epsilon / gabs) * (1.0 - 1e-12));
        }
        // bias-only parameters with zero gradient stay put
        assert_eq!(p1.layers[0].bias, p.layers[0].bias);
        let (s2, p2) = adam_step(&s1, &p1, &g, &cfg).unwrap();
        let d2 = p2.layers[0].weights[0] - p1.layers[0].weights[0];
        assert_relative_eq!(d2.abs(), lr, max_relative = 1e-6);
        assert_eq!(s2.step_count(), 2);
    }

    #[test]
    fn adam_shape_mismatch() {
        let p = net(&[3, 4, 2], 4);
        let g = NetworkParams::<f64>::zeros(&[3, 5, 2]).unwrap();
        assert!(adam_step(&AdamState::new(&p), &p, &g, &TrainConfig::default()).is_err());
    }

    #[test]
    fn train_config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.adam_beta1 = 1.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert!(DropoutConfig::new(1.0).is_err());
        assert!(DropoutConfig::new(0.0).is_ok());
    }

    fn toy_data(n: usize, layout: &FeatureLayout) -> Vec<(FeatureVector<f64>, Pathology)> {
        let mut rng = stream_rng(11, 0);
        (0..n)
            .map(|_| {
                let a: f64 = rng.gen();
                let b: f64 = rng.gen();
                let y = if a + b > 1.0 {
                    Pathology::Malignant
                } else {
                    Pathology::Benign
                };
                (layout.vector(vec![a, b]).unwrap(), y)
            })
            .collect()
    }

    #[test]
    fn train_rejects_degenerate_labels() {
        let layout = FeatureLayout::raw(2);
        let data: Vec<_> = (0..5)
            .map(|i| {
                (
                    layout.vector(vec![i as f64, 0.0]).unwrap(),
                    Pathology::Benign,
                )
            })
            .collect();
        assert_eq!(
            train(
                &data,
                &layout,
                &[4],
                DropoutConfig::default(),
                &TrainConfig::default()
            ),
            Err(MlpError::DegenerateLabels(Pathology::Benign))
        );
        assert_eq!(
            train::<f64>(
                &[],
                &layout,
                &[4],
                DropoutConfig::default(),
                &TrainConfig::default()
            ),
            Err(MlpError::EmptyTrainingSet)
        );
    }

    #[test]
    fn train_is_deterministic() {
        let layout = FeatureLayout::raw(2);
        let data = toy_data(64, &layout);
        let cfg = TrainConfig {
            epochs: 3,
            seed: 5,
            ..Default::default()
        };
        let a = train(&data, &layout, &[8, 8], DropoutConfig::default(), &cfg).unwrap();
        let b = train(&data, &layout, &[8, 8], DropoutConfig::default(), &cfg).unwrap();
        let bits =
            |m: &BayesianClassifier<f64>| m.params.iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
    }

    #[test]
    fn zero_epochs_returns_untrained_network() {
        let layout = FeatureLayout::raw(2);
        let data = toy_data(200, &layout);
        let cfg = TrainConfig {
            epochs: 0,
            seed: 8,
            ..Default::default()
        };
        let m = train(&data, &layout, &[64, 64], DropoutConfig::default(), &cfg).unwrap();
        let init =
            NetworkParams::<f64>::kaiming_uniform(&[2, 64, 64, 2], &mut stream_rng(8, INIT_STREAM))
                .unwrap();
        assert_eq!(m.params, init);
        let mean_pm: f64 = data
            .iter()
            .map(|(x, _)| m.predict_deterministic(x).unwrap().p_malignant())
            .sum::<f64>()
            / data.len() as f64;
        assert!((mean_pm - 0.5).abs() < 0.35, "mean p_malignant {mean_pm}");
    }

    #[test]
    fn mc_predict_rate_zero_is_deterministic_pass() {
        let layout = FeatureLayout::raw(2);
        let data = toy_data(32, &layout);
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let m = train(&data, &layout, &[6], DropoutConfig::new(0.0).unwrap(), &cfg).unwrap();
        let x = &data[0].0;
        let det = m.predict_deterministic(x).unwrap();
        let (s, d) = mc_predict(&m, x, 17, 3).unwrap();
        assert!(s.per_pass().iter().all(|p| *p == det));
        assert_relative_eq!(d.p_malignant(), det.p_malignant(), epsilon = 1e-15);
        let (s1, d1) = mc_predict(&m, x, 1, 3).unwrap();
        assert_eq!(s1.per_pass()[0], d1);
        assert_eq!(mc_predict(&m, x, 0, 3).unwrap_err(), MlpError::ZeroPasses);
    }

    #[test]
    fn mc_predict_layout_mismatch() {
        let layout = FeatureLayout::raw(2);
        let data = toy_data(16, &layout);
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let m = train(&data, &layout, &[4], DropoutConfig::default(), &cfg).unwrap();
        let other = FeatureLayout::new("other", layout.slots().to_vec());
        let x = other.vector(vec![0.1, 0.2]).unwrap();
        assert!(matches!(
            mc_predict(&m, &x, 3, 0),
            Err(MlpError::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn f32_network_trains() {
        let layout = FeatureLayout::raw(2);
        let data: Vec<(FeatureVector<f32>, Pathology)> = toy_data(128, &layout)
            .into_iter()
            .map(|(x, y)| {
                let v = x.values().iter().map(|&a| a as f32).collect();
                (layout.vector(v).unwrap(), y)
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 20,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let m = train(
            &data,
            &layout,
            &[16],
            DropoutConfig::new(0.1).unwrap(),
            &cfg,
        )
        .unwrap();
        let (_, d) = mc_predict(&m, &data[0].0, 10, 1).unwrap();
        assert!((d.p_benign() + d.p_malignant() - 1.0).abs() < 1e-5);
        assert!(m.final_loss < 2f64.ln());
    }
}
