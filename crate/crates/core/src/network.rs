//! Dense feed-forward networks: forward evaluation, dataset loss,
//! reverse-mode weight gradients and the toy trainer used for fixtures.
//!
//! Layers use the column convention `y = act(W x + b)` with `W` of shape
//! `d_out × d_in`. Sample-level work is split into fixed-size chunks whose
//! partial results are combined in chunk order, so results do not depend on
//! how many threads evaluate them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, FactorPair, Matrix};

const CHUNK: usize = 32;

/// Initialization gain applied to layers that are neither the first nor the
/// last. Keeping interior layers small at init leaves their trained weights
/// with a decaying singular spectrum.
pub const INTERIOR_INIT_GAIN: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative in terms of the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weight: Matrix,
    bias: Vec<f64>,
    activation: Activation,
    factors: Option<FactorPair>,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::invalid(format!(
                "bias length {} does not match weight rows {}",
                bias.len(),
                weight.rows()
            )));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("non-finite bias entry"));
        }
        Ok(Layer {
            weight,
            bias,
            activation,
            factors: None,
        })
    }

    /// A layer whose weight is stored as `L Rᵀ`.
    pub fn decomposed(factors: FactorPair, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        let mut layer = Layer::new(factors.product(), bias, activation)?;
        layer.factors = Some(factors);
        Ok(layer)
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn factors(&self) -> Option<&FactorPair> {
        self.factors.as_ref()
    }

    pub fn is_decomposed(&self) -> bool {
        self.factors.is_some()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Stored weight parameters: `N·M` intact, `N·k + M·k` decomposed.
    /// Biases are not counted.
    pub fn param_count(&self) -> usize {
        match &self.factors {
            Some(f) => f.param_count(),
            None => self.weight.rows() * self.weight.cols(),
        }
    }

    fn affine(&self, x: &[f64], z: &mut Vec<f64>) {
        z.clear();
        z.extend((0..self.weight.rows()).map(|i| dot(self.weight.row(i), x) + self.bias[i]));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    loss_kind: LossKind,
}

/// Training targets, one per sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    targets: Targets,
}

#[derive(Clone, Copy)]
enum Target<'a> {
    Class(usize),
    Values(&'a [f64]),
}

impl Dataset {
    pub fn classification(inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        Dataset::new(inputs, Targets::Classes(labels))
    }

    pub fn regression(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        Dataset::new(inputs, Targets::Values(targets))
    }

    pub fn new(inputs: Vec<Vec<f64>>, targets: Targets) -> Result<Self> {
        let m = match &targets {
            Targets::Classes(l) => l.len(),
            Targets::Values(v) => v.len(),
        };
        if inputs.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if inputs.len() != m {
            return Err(Error::invalid(format!(
                "{} inputs but {m} targets",
                inputs.len()
            )));
        }
        let d = inputs[0].len();
        if d == 0 || inputs.iter().any(|x| x.len() != d) {
            return Err(Error::invalid("inputs must share one positive length"));
        }
        let finite = inputs.iter().flatten().all(|v| v.is_finite())
            && match &targets {
                Targets::Values(v) => v.iter().flatten().all(|t| t.is_finite()),
                Targets::Classes(_) => true,
            };
        if !finite {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes(l) => Some(l),
            Targets::Values(_) => None,
        }
    }

    /// A dataset holding only sample `i`.
    pub fn sample(&self, i: usize) -> Dataset {
        let targets = match &self.targets {
            Targets::Classes(l) => Targets::Classes(vec![l[i]]),
            Targets::Values(v) => Targets::Values(vec![v[i].clone()]),
        };
        Dataset {
            inputs: vec![self.inputs[i].clone()],
            targets,
        }
    }

    fn target(&self, i: usize) -> Target<'_> {
        match &self.targets {
            Targets::Classes(l) => Target::Class(l[i]),
            Targets::Values(v) => Target::Values(&v[i]),
        }
    }
}

/// Mean gradient of the dataset loss with respect to every layer weight.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSnapshot {
    layers: Vec<Matrix>,
}

impl GradientSnapshot {
    pub fn new(layers: Vec<Matrix>) -> Self {
        GradientSnapshot { layers }
    }

    pub fn layer(&self, i: usize) -> &Matrix {
        &self.layers[i]
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Weight and bias gradients, summed (not yet averaged).
struct GradAccum {
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    loss: f64,
}

impl GradAccum {
    fn zeros(net: &Network) -> Self {
        GradAccum {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.output_dim(), l.input_dim()))
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.output_dim()])
                .collect(),
            loss: 0.0,
        }
    }

    fn merge(mut self, other: GradAccum) -> Self {
        for (a, b) in self.weights.iter_mut().zip(other.weights) {
            *a = a.add(&b).expect("same shapes");
        }
        for (a, b) in self.biases.iter_mut().zip(other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.loss += other.loss;
        self
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>, loss_kind: LossKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::invalid(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Network { layers, loss_kind })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> Result<&Layer> {
        self.layers.get(i).ok_or_else(|| {
            Error::invalid(format!(
                "layer index {i} out of range (network has {} layers)",
                self.layers.len()
            ))
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss_kind
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Total stored weight parameters.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has length {} but the network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(self.forward_unchecked(x))
    }

    fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut z = Vec::new();
        for layer in &self.layers {
            layer.affine(&a, &mut z);
            a.clear();
            a.extend(z.iter().map(|&v| layer.activation.apply(v)));
        }
        a
    }

    /// Check that the dataset fits this network's input and loss.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.feature_dim() != self.input_dim() {
            return Err(Error::invalid(format!(
                "dataset has {} features but the network expects {}",
                data.feature_dim(),
                self.input_dim()
            )));
        }
        let out = self.output_dim();
        match (self.loss_kind, &data.targets) {
            (LossKind::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
                if let Some(bad) = labels.iter().find(|&&y| y >= out) {
                    return Err(Error::invalid(format!(
                        "label {bad} out of range for {out} outputs"
                    )));
                }
            }
            (LossKind::MeanSquaredError, Targets::Values(t)) => {
                if t.iter().any(|v| v.len() != out) {
                    return Err(Error::invalid(format!(
                        "target vectors must have length {out}"
                    )));
                }
            }
            (kind, _) => {
                return Err(Error::invalid(format!(
                    "{kind:?} loss is incompatible with the dataset's target type"
                )))
            }
        }
        Ok(())
    }

    fn sample_loss(&self, output: &[f64], target: Target<'_>) -> f64 {
        match target {
            Target::Class(y) => {
                let shift = output.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = output.iter().map(|v| (v - shift).exp()).sum::<f64>().ln() + shift;
                lse - output[y]
            }
            Target::Values(t) => {
                output
                    .iter()
                    .zip(t)
                    .map(|(o, t)| (o - t) * (o - t))
                    .sum::<f64>()
                    / output.len() as f64
            }
        }
    }

    /// Per-sample losses, in dataset order.
    pub fn sample_losses(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.check_dataset(data)?;
        Ok((0..data.len())
            .into_par_iter()
            .with_min_len(CHUNK)
            .map(|i| self.sample_loss(&self.forward_unchecked(&data.inputs[i]), data.target(i)))
            .collect())
    }

    /// Mean per-sample loss over the dataset.
    pub fn dataset_loss(&self, data: &Dataset) -> Result<f64> {
        self.check_dataset(data)?;
        let partials: Vec<f64> = chunk_ranges(data.len())
            .into_par_iter()
            .map(|(lo, hi)| {
                (lo..hi)
                    .map(|i| {
                        self.sample_loss(&self.forward_unchecked(&data.inputs[i]), data.target(i))
                    })
                    .sum::<f64>()
            })
            .collect();
        Ok(partials.iter().sum::<f64>() / data.len() as f64)
    }

    fn backprop_sample(&self, x: &[f64], target: Target<'_>, acc: &mut GradAccum) {
        let n = self.layers.len();
        // activations[0] = x, activations[i+1] = output of layer i
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut act: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        act.push(x.to_vec());
        for layer in &self.layers {
            let mut z = Vec::new();
            layer.affine(&act[act.len() - 1], &mut z);
            act.push(z.iter().map(|&v| layer.activation.apply(v)).collect());
            pre.push(z);
        }
        let output = &act[n];
        acc.loss += self.sample_loss(output, target);

        let mut grad_out: Vec<f64> = match target {
            Target::Class(y) => {
                let shift = output.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let exps: Vec<f64> = output.iter().map(|v| (v - shift).exp()).collect();
                let total: f64 = exps.iter().sum();
                let mut g: Vec<f64> = exps.iter().map(|e| e / total).collect();
                g[y] -= 1.0;
                g
            }
            Target::Values(t) => {
                let scale = 2.0 / output.len() as f64;
                output.iter().zip(t).map(|(o, t)| scale * (o - t)).collect()
            }
        };

        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let dz: Vec<f64> = grad_out
                .iter()
                .zip(&pre[i])
                .zip(&act[i + 1])
                .map(|((g, &z), &a)| g * layer.activation.derivative(z, a))
                .collect();
            acc.weights[i].add_outer(1.0, &dz, &act[i]);
            for (b, d) in acc.biases[i].iter_mut().zip(&dz) {
                *b += d;
            }
            if i > 0 {
                let w = &layer.weight;
                let mut next = vec![0.0; w.cols()];
                for (r, &d) in dz.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (nx, &wv) in next.iter_mut().zip(w.row(r)) {
                        *nx += d * wv;
                    }
                }
                grad_out = next;
            }
        }
    }

    fn accumulate(&self, data: &Dataset) -> GradAccum {
        let partials: Vec<GradAccum> = chunk_ranges(data.len())
            .into_par_iter()
            .map(|(lo, hi)| {
                let mut acc = GradAccum::zeros(self);
                for i in lo..hi {
                    self.backprop_sample(&data.inputs[i], data.target(i), &mut acc);
                }
                acc
            })
            .collect();
        partials
            .into_iter()
            .reduce(GradAccum::merge)
            .expect("dataset is non-empty")
    }

    /// Exact mean gradients of [`Network::dataset_loss`] with respect to each
    /// layer weight. No weights are updated.
    pub fn gradients(&self, data: &Dataset) -> Result<GradientSnapshot> {
        self.check_dataset(data)?;
        let m = data.len() as f64;
        let acc = self.accumulate(data);
        let layers: Vec<Matrix> = acc.weights.iter().map(|g| g.scale(1.0 / m)).collect();
        if layers
            .iter()
            .any(|g| g.as_slice().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::invalid("gradient contains non-finite entries"));
        }
        Ok(GradientSnapshot { layers })
    }

    /// A copy with `weight := weight + delta` on one layer.
    pub fn perturb(&self, layer: usize, delta: &Matrix) -> Result<Network> {
        let target = self.layer(layer)?;
        if target.is_decomposed() {
            return Err(Error::State {
                layer,
                reason: "cannot perturb a decomposed layer".into(),
            });
        }
        let weight = target.weight.add(delta).map_err(|e| e.in_layer(layer))?;
        let mut out = self.clone();
        out.layers[layer].weight = weight;
        Ok(out)
    }

    /// A copy whose layer weight is replaced by `L Rᵀ` and marked decomposed.
    pub fn apply_factorization(&self, layer: usize, factors: FactorPair) -> Result<Network> {
        let target = self.layer(layer)?;
        if target.is_decomposed() {
            return Err(Error::State {
                layer,
                reason: "layer is already decomposed".into(),
            });
        }
        if factors.product_shape() != target.weight.shape() {
            return Err(Error::invalid(format!(
                "factor product shape {:?} does not match weight shape {:?}",
                factors.product_shape(),
                target.weight.shape()
            ))
            .in_layer(layer));
        }
        let mut out = self.clone();
        let l = &mut out.layers[layer];
        l.weight = factors.product();
        l.factors = Some(factors);
        Ok(out)
    }
}

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(CHUNK))
        .map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(n)))
        .collect()
}

/// Seeded initialization: weights `N(0, gain²/fan_in)`, zero biases, tanh
/// hidden activations and an identity output layer. The first and last
/// layers use gain 1, interior layers [`INTERIOR_INIT_GAIN`].
pub fn init_network(arch: &[usize], loss_kind: LossKind, seed: u64) -> Result<Network> {
    if arch.len() < 2 || arch.contains(&0) {
        return Err(Error::invalid(format!(
            "architecture needs at least two positive sizes, got {arch:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = arch.len() - 1;
    let mut layers = Vec::with_capacity(n);
    for (i, pair) in arch.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let gain = if i == 0 || i == n - 1 {
            1.0
        } else {
            INTERIOR_INIT_GAIN
        };
        let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("positive std");
        let weight = Matrix::from_fn(fan_out, fan_in, |_, _| normal.sample(&mut rng));
        let activation = if i == n - 1 {
            Activation::Identity
        } else {
            Activation::Tanh
        };
        layers.push(Layer::new(weight, vec![0.0; fan_out], activation)?);
    }
    Network::new(layers, loss_kind)
}

#[derive(Debug, Clone)]
pub struct TrainedNetwork {
    pub network: Network,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Full-batch gradient descent from [`init_network`]. The loss kind follows
/// the dataset's targets.
pub fn train_toy(
    arch: &[usize],
    data: &Dataset,
    steps: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<TrainedNetwork> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    let loss_kind = match data.targets {
        Targets::Classes(_) => LossKind::SoftmaxCrossEntropy,
        Targets::Values(_) => LossKind::MeanSquaredError,
    };
    let mut net = init_network(arch, loss_kind, seed)?;
    net.check_dataset(data)?;
    let m = data.len() as f64;
    let initial_loss = net.dataset_loss(data)?;
    let mut loss = initial_loss;
    for step in 0..steps {
        let acc = net.accumulate(data);
        loss = acc.loss / m;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let lr = learning_rate / m;
        for (layer, (gw, gb)) in net
            .layers
            .iter_mut()
            .zip(acc.weights.iter().zip(&acc.biases))
        {
            layer.weight = layer
                .weight
                .sub(&gw.scale(lr))
                .map_err(|_| Error::Divergence {
                    step,
                    loss: f64::NAN,
                })?;
            for (b, g) in layer.bias.iter_mut().zip(gb) {
                *b -= lr * g;
            }
        }
        if layer_weights_nonfinite(&net) {
            return Err(Error::Divergence { step, loss });
        }
    }
    if steps > 0 {
        loss = net.dataset_loss(data)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: steps, loss });
        }
    }
    Ok(TrainedNetwork {
        network: net,
        initial_loss,
        final_loss: loss,
    })
}

fn layer_weights_nonfinite(net: &Network) -> bool {
    net.layers.iter().any(|l| {
        l.weight.as_slice().iter().any(|v| !v.is_finite()) || l.bias.iter().any(|v| !v.is_finite())
    })
}
