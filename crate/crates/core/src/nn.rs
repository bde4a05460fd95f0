//! Dense layers, ReLU MLPs, softmax and plain SGD with time-based decay.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Affine layer `y = x·W + b` with `W` of shape `(inputs, outputs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Uniform weights with He-style standard deviation `sqrt(2 / fan_in)`
    /// and zero bias.
    pub fn he_uniform<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((inputs, outputs), || {
            rng.random_range(-bound..bound)
        });
        Self {
            weights,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }

    /// Parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, input: ArrayView2<f64>, grad_out: ArrayView2<f64>) -> (DenseGrad, Array2<f64>) {
        let grad = DenseGrad {
            weights: input.t().dot(&grad_out),
            bias: grad_out.sum_axis(Axis(0)),
        };
        (grad, grad_out.dot(&self.weights.t()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseGrad {
    pub fn zeros_like(layer: &Dense) -> Self {
        Self {
            weights: Array2::zeros(layer.weights.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

pub fn relu(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Pulls a gradient with respect to softmax outputs back to the logits:
/// `g_z = p ⊙ (g_p - <g_p, p>)`.
pub fn softmax_backward(probs: &Array2<f64>, grad_probs: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, g), mut o) in probs
        .rows()
        .into_iter()
        .zip(grad_probs.rows())
        .zip(out.rows_mut())
    {
        let inner = p.dot(&g);
        o.assign(&(&p * &(&g - inner)));
    }
    out
}

pub(crate) fn check_finite(x: &Array2<f64>, layer: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activation in {layer}")))
    }
}

/// Models whose parameters are a flat sequence of dense layers.
pub trait Layers {
    fn layers(&self) -> Vec<&Dense>;
    fn layers_mut(&mut self) -> Vec<&mut Dense>;

    fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }
}

/// Learning rate after `step` updates with time-based decay.
pub fn learning_rate(lr: f64, decay: f64, step: u64) -> f64 {
    lr / (1.0 + decay * step as f64)
}

/// One SGD update `w ← w − lr_t·g` with `lr_t = lr / (1 + decay·step)`.
pub fn sgd_step<M: Layers + ?Sized>(
    model: &mut M,
    grads: &[DenseGrad],
    lr: f64,
    decay: f64,
    step: u64,
) -> Result<()> {
    let mut layers = model.layers_mut();
    if layers.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} gradient blocks for {} layers",
            grads.len(),
            layers.len()
        )));
    }
    for (i, (layer, g)) in layers.iter().zip(grads).enumerate() {
        if layer.weights.raw_dim() != g.weights.raw_dim() || layer.bias.len() != g.bias.len() {
            return Err(Error::Shape(format!("gradient block {i} does not match its layer")));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in layer {i}")));
        }
    }
    let rate = learning_rate(lr, decay, step);
    for (layer, g) in layers.iter_mut().zip(grads) {
        layer.weights.scaled_add(-rate, &g.weights);
        layer.bias.scaled_add(-rate, &g.bias);
    }
    Ok(())
}

/// ReLU MLP with a softmax output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations kept from [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of every layer (post-ReLU outputs of the previous one).
    inputs: Vec<Array2<f64>>,
    pub probabilities: Array2<f64>,
}

impl Mlp {
    /// `dims = [input, hidden..., classes]`.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid MLP dimensions {dims:?}")));
        }
        let mut rng = rng::seeded(seed);
        let layers = dims
            .windows(2)
            .map(|w| Dense::he_uniform(w[0], w[1], &mut rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(h.view());
            check_finite(&z, &format!("layer {i}"))?;
            if i < last {
                relu(&mut z);
            }
            inputs.push(h);
            h = z;
        }
        let probabilities = softmax_rows(&h);
        Ok((
            probabilities.clone(),
            MlpCache {
                inputs,
                probabilities,
            },
        ))
    }

    pub fn backward(&self, cache: &MlpCache, grad_probs: ArrayView2<f64>) -> Result<Vec<DenseGrad>> {
        if grad_probs.dim() != cache.probabilities.dim() {
            return Err(Error::Shape("probability gradient shape mismatch".into()));
        }
        let mut grad = softmax_backward(&cache.probabilities, grad_probs);
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let (g, mut grad_in) = layer.backward(input.view(), grad.view());
            grads.push(g);
            if i > 0 {
                // input[i] is relu(z_{i-1}); zero where it was clipped
                grad_in.zip_mut_with(input, |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            grad = grad_in;
        }
        grads.reverse();
        Ok(grads)
    }
}

impl Layers for Mlp {
    fn layers(&self) -> Vec<&Dense> {
        self.layers.iter().collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense> {
        self.layers.iter_mut().collect()
    }
}

/// Row-major serialised form of a [`Dense`] layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl From<&Dense> for LayerRecord {
    fn from(layer: &Dense) -> Self {
        Self {
            inputs: layer.inputs(),
            outputs: layer.outputs(),
            weights: layer.weights.iter().copied().collect(),
            bias: layer.bias.to_vec(),
        }
    }
}

impl TryFrom<&LayerRecord> for Dense {
    type Error = Error;

    fn try_from(rec: &LayerRecord) -> Result<Self> {
        let weights = Array2::from_shape_vec((rec.inputs, rec.outputs), rec.weights.clone())
            .map_err(|e| Error::Data(format!("layer weights: {e}")))?;
        if rec.bias.len() != rec.outputs {
            return Err(Error::Data(format!(
                "bias has {} entries for {} outputs",
                rec.bias.len(),
                rec.outputs
            )));
        }
        Ok(Self {
            weights,
            bias: Array1::from(rec.bias.clone()),
        })
    }
}
