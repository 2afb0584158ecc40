//! Softmax regression and ReLU multilayer perceptrons with hand-written
//! backpropagation.
//!
//! A model maps an input `x` to logits `z`; the softmax and the loss live in
//! [`crate::losses`], which hands back `dL/dz`. [`Model::backward`] chains
//! that through the layers.
//!
//! Checkpoints are JSON documents:
//!
//! ```json
//! {
//!   "architecture": {"kind": "mlp", "inputs": 10, "hidden": [50], "outputs": 100},
//!   "layers": [
//!     {"weights": {"rows": 50, "cols": 10, "data": [..]}, "bias": [..], "activation": "relu"},
//!     {"weights": {"rows": 100, "cols": 50, "data": [..]}, "bias": [..], "activation": "identity"}
//!   ]
//! }
//! ```
//!
//! Weights are row-major `outputs × inputs` decimal arrays. Softmax
//! regression has a single layer with `"bias": null`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{glorot_init, DenseMatrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// `z = θ · x`, no bias.
    SoftmaxRegression { inputs: usize, outputs: usize },
    /// Dense ReLU layers of the given widths, then a linear output layer.
    Mlp {
        inputs: usize,
        hidden: Vec<usize>,
        outputs: usize,
    },
}

impl Architecture {
    pub fn inputs(&self) -> usize {
        match self {
            Architecture::SoftmaxRegression { inputs, .. } | Architecture::Mlp { inputs, .. } => *inputs,
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            Architecture::SoftmaxRegression { outputs, .. } | Architecture::Mlp { outputs, .. } => *outputs,
        }
    }

    fn widths(&self) -> Vec<usize> {
        match self {
            Architecture::SoftmaxRegression { inputs, outputs } => vec![*inputs, *outputs],
            Architecture::Mlp { inputs, hidden, outputs } => {
                let mut w = vec![*inputs];
                w.extend_from_slice(hidden);
                w.push(*outputs);
                w
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.widths().contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.outputs() < 2 {
            return Err(Error::invalid("a classifier needs at least two outputs"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `outputs × inputs`
    pub weights: DenseMatrix,
    pub bias: Option<Vec<f64>>,
    pub activation: Activation,
}

impl Layer {
    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.weights.matvec(x);
        if let Some(b) = &self.bias {
            h.iter_mut().zip(b).for_each(|(h, b)| *h += b);
        }
        h
    }
}

/// Per-layer inputs and pre-activations recorded by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: DenseMatrix,
    pub bias: Option<Vec<f64>>,
}

/// Gradients shaped like the parameters of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros_like(model: &Model) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| LayerGrads {
                weights: DenseMatrix::zeros(l.weights.rows(), l.weights.cols()),
                bias: l.bias.as_ref().map(|b| vec![0.0; b.len()]),
            })
            .collect();
        Self { layers }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| {
            l.weights
                .as_slice()
                .iter()
                .chain(l.bias.iter().flat_map(|b| b.iter()))
        })
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| {
            l.weights
                .as_mut_slice()
                .iter_mut()
                .chain(l.bias.iter_mut().flat_map(|b| b.iter_mut()))
        })
    }

    /// `self += other`
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Flattened in the same order as [`Model::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        self.values().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    architecture: Architecture,
    layers: Vec<Layer>,
}

impl Model {
    /// Softmax regression with Glorot-uniform `θ` (`outputs × inputs`).
    pub fn softmax_regression(inputs: usize, outputs: usize, rng: &mut Rng) -> Result<Self> {
        Self::init(Architecture::SoftmaxRegression { inputs, outputs }, rng)
    }

    /// ReLU MLP with Glorot-uniform weights and zero biases.
    pub fn mlp(inputs: usize, hidden: &[usize], outputs: usize, rng: &mut Rng) -> Result<Self> {
        Self::init(
            Architecture::Mlp {
                inputs,
                hidden: hidden.to_vec(),
                outputs,
            },
            rng,
        )
    }

    pub fn init(architecture: Architecture, rng: &mut Rng) -> Result<Self> {
        architecture.validate()?;
        let widths = architecture.widths();
        let with_bias = matches!(architecture, Architecture::Mlp { .. });
        let last = widths.len() - 2;
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            layers.push(Layer {
                weights: glorot_init(pair[0], pair[1], rng)?,
                bias: with_bias.then(|| vec![0.0; pair[1]]),
                activation: if i == last { Activation::Identity } else { Activation::Relu },
            });
        }
        Ok(Self { architecture, layers })
    }

    /// Softmax regression with a given `θ` (`outputs × inputs`).
    pub fn from_theta(theta: DenseMatrix) -> Result<Self> {
        let architecture = Architecture::SoftmaxRegression {
            inputs: theta.cols(),
            outputs: theta.rows(),
        };
        architecture.validate()?;
        Ok(Self {
            architecture,
            layers: vec![Layer {
                weights: theta,
                bias: None,
                activation: Activation::Identity,
            }],
        })
    }

    /// Assemble a model from explicit layers; shapes must chain and the
    /// final activation must be the identity.
    pub fn from_layers(architecture: Architecture, layers: Vec<Layer>) -> Result<Self> {
        architecture.validate()?;
        let model = Self { architecture, layers };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let widths = self.architecture.widths();
        if self.layers.len() != widths.len() - 1 {
            return Err(Error::invalid("layer count does not match architecture"));
        }
        let with_bias = matches!(self.architecture, Architecture::Mlp { .. });
        for (i, (layer, pair)) in self.layers.iter().zip(widths.windows(2)).enumerate() {
            if layer.weights.rows() != pair[1] || layer.weights.cols() != pair[0] {
                return Err(Error::invalid(format!("layer {i} has the wrong shape")));
            }
            match &layer.bias {
                Some(b) if !with_bias || b.len() != pair[1] => {
                    return Err(Error::invalid(format!("layer {i} has a malformed bias")))
                }
                None if with_bias => return Err(Error::invalid(format!("layer {i} is missing its bias"))),
                _ => {}
            }
            let is_last = i + 1 == self.layers.len();
            if is_last && layer.activation != Activation::Identity {
                return Err(Error::invalid("the output layer must be linear"));
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn inputs(&self) -> usize {
        self.architecture.inputs()
    }

    pub fn outputs(&self) -> usize {
        self.architecture.outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.as_ref().map_or(0, Vec::len))
            .sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.inputs() {
            return Err(Error::DimensionMismatch {
                expected: self.inputs(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(x)?;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut a = x.to_vec();
        for layer in &self.layers {
            let h = layer.pre_activation(&a);
            let next = h.iter().map(|&v| layer.activation.apply(v)).collect();
            cache.inputs.push(std::mem::replace(&mut a, next));
            cache.pre.push(h);
        }
        Ok((a, cache))
    }

    /// Forward pass without keeping a cache.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for layer in &self.layers {
            a = layer
                .pre_activation(&a)
                .into_iter()
                .map(|v| layer.activation.apply(v))
                .collect();
        }
        Ok(a)
    }

    pub fn backward(&self, cache: &ForwardCache, grad_z: &[f64]) -> Result<ParamGrads> {
        let mut grads = ParamGrads::zeros_like(self);
        self.backward_into(cache, grad_z, &mut grads)?;
        Ok(grads)
    }

    /// Adds the parameter gradients for `grad_z` to `grads`.
    pub fn backward_into(&self, cache: &ForwardCache, grad_z: &[f64], grads: &mut ParamGrads) -> Result<()> {
        if grad_z.len() != self.outputs() {
            return Err(Error::DimensionMismatch {
                expected: self.outputs(),
                got: grad_z.len(),
            });
        }
        let stale = cache.inputs.len() != self.layers.len()
            || cache
                .inputs
                .iter()
                .zip(&self.layers)
                .any(|(a, l)| a.len() != l.weights.cols());
        if stale {
            return Err(Error::invalid("forward cache does not match this model"));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::invalid("gradient buffer does not match this model"));
        }
        let mut delta = grad_z.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            for (d, &h) in delta.iter_mut().zip(&cache.pre[idx]) {
                *d *= layer.activation.derivative(h);
            }
            let g = &mut grads.layers[idx];
            g.weights.add_outer(1.0, &delta, &cache.inputs[idx]);
            if let Some(b) = &mut g.bias {
                b.iter_mut().zip(&delta).for_each(|(b, d)| *b += d);
            }
            if idx > 0 {
                delta = layer.weights.matvec_t(&delta);
            }
        }
        Ok(())
    }

    /// `θ ← θ - λ (grad + weight_decay · θ)`. Rejected without side effects
    /// if `λ <= 0` or any gradient is non-finite.
    pub fn sgd_step(&mut self, grads: &ParamGrads, learning_rate: f64, weight_decay: f64) -> Result<()> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {learning_rate}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::invalid("weight decay must be finite and >= 0"));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::invalid("gradient shape does not match this model"));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, dw) in layer.weights.as_mut_slice().iter_mut().zip(g.weights.as_slice()) {
                *w -= learning_rate * (dw + weight_decay * *w);
            }
            if let (Some(b), Some(db)) = (&mut layer.bias, &g.bias) {
                for (w, dw) in b.iter_mut().zip(db) {
                    *w -= learning_rate * (dw + weight_decay * *w);
                }
            }
        }
        Ok(())
    }

    /// All parameters, layer by layer: weights row-major, then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.weights
                    .as_slice()
                    .iter()
                    .chain(l.bias.iter().flat_map(|b| b.iter()))
                    .copied()
            })
            .collect()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut it = params.iter();
        for layer in &mut self.layers {
            for w in layer.weights.as_mut_slice() {
                *w = *it.next().expect("length checked");
            }
            if let Some(b) = &mut layer.bias {
                for w in b {
                    *w = *it.next().expect("length checked");
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Model = serde_json::from_str(text)?;
        model.architecture.validate()?;
        model.check_shapes()?;
        if model.layers.iter().any(|l| !l.weights.is_finite()) {
            return Err(Error::NonFinite("checkpoint weight".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_regression_passes_one_hot_through() {
        let model = Model::from_theta(DenseMatrix::identity(4)).unwrap();
        for j in 0..4 {
            let mut x = vec![0.0; 4];
            x[j] = 1.0;
            let (z, _) = model.forward(&x).unwrap();
            assert_eq!(z, x);
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut model = Model::mlp(3, &[4], 5, &mut Rng::new(1)).unwrap();
        let zeros = vec![0.0; model.param_count()];
        model.set_flat_params(&zeros).unwrap();
        model.layers[1].bias = Some(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let (z, _) = model.forward(&[0.3, -0.2, 0.9]).unwrap();
        assert_eq!(z, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn one_hot_gradient_lands_in_one_column() {
        let model = Model::softmax_regression(4, 3, &mut Rng::new(2)).unwrap();
        let (_, cache) = model.forward(&[0.0, 0.0, 1.0, 0.0]).unwrap();
        let g = model.backward(&cache, &[0.5, -0.25, 1.0]).unwrap();
        let w = &g.layers[0].weights;
        for r in 0..3 {
            for c in 0..4 {
                let expected = if c == 2 { [0.5, -0.25, 1.0][r] } else { 0.0 };
                assert_eq!(w.get(r, c), expected);
            }
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let model = Model::mlp(3, &[5, 4], 3, &mut Rng::new(3)).unwrap();
        let (_, cache) = model.forward(&[1.0, 2.0, 3.0]).unwrap();
        let g = model.backward(&cache, &[0.0; 3]).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_errors() {
        let model = Model::mlp(3, &[4], 2, &mut Rng::new(4)).unwrap();
        assert!(model.forward(&[1.0, 2.0]).is_err());
        let other = Model::mlp(5, &[4], 2, &mut Rng::new(4)).unwrap();
        let (_, cache) = other.forward(&[0.0; 5]).unwrap();
        assert!(model.backward(&cache, &[0.0, 0.0]).is_err());
        let (_, cache) = model.forward(&[0.0; 3]).unwrap();
        assert!(model.backward(&cache, &[0.0; 3]).is_err());
    }

    #[test]
    fn sgd_step_arithmetic_and_contract() {
        let mut model = Model::from_theta(DenseMatrix::from_vec(2, 1, vec![1.0, -1.0]).unwrap()).unwrap();
        let mut g = ParamGrads::zeros_like(&model);
        g.layers[0].weights = DenseMatrix::from_vec(2, 1, vec![2.0, 0.0]).unwrap();
        model.sgd_step(&g, 0.1, 0.0).unwrap();
        assert!((model.flat_params()[0] - 0.8).abs() < 1e-15);
        assert_eq!(model.flat_params()[1], -1.0);

        let before = model.clone();
        assert!(model.sgd_step(&g, 0.0, 0.0).is_err());
        model.sgd_step(&ParamGrads::zeros_like(&model), 0.5, 0.0).unwrap();
        assert_eq!(model, before);

        let mut bad = ParamGrads::zeros_like(&model);
        bad.layers[0].weights.as_mut_slice()[1] = f64::NAN;
        assert!(model.sgd_step(&bad, 0.1, 0.0).is_err());
        assert_eq!(model, before);
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let mut model = Model::from_theta(DenseMatrix::from_vec(2, 1, vec![1.0, -2.0]).unwrap()).unwrap();
        model.sgd_step(&ParamGrads::zeros_like(&model), 0.1, 1e-3).unwrap();
        assert!((model.flat_params()[0] - (1.0 - 1e-4)).abs() < 1e-15);
        assert!((model.flat_params()[1] - (-2.0 + 2e-4)).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Model::mlp(4, &[6, 5], 3, &mut Rng::new(5)).unwrap();
        let back = Model::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(model, back);
        let reg = Model::softmax_regression(3, 2, &mut Rng::new(6)).unwrap();
        assert_eq!(Model::from_json(&reg.to_json().unwrap()).unwrap(), reg);
    }

    #[test]
    fn malformed_checkpoints_rejected() {
        let model = Model::mlp(2, &[3], 2, &mut Rng::new(7)).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&model.to_json().unwrap()).unwrap();
        v["architecture"]["hidden"] = serde_json::json!([4]);
        assert!(Model::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut model = Model::mlp(3, &[5, 4], 3, &mut Rng::new(8)).unwrap();
        let x = [0.7, -0.4, 1.3];
        let c = [0.3, -1.1, 0.8];
        let (_, cache) = model.forward(&x).unwrap();
        let analytic = model.backward(&cache, &c).unwrap().flatten();
        let theta = model.flat_params();
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut t = theta.clone();
            t[i] += h;
            model.set_flat_params(&t).unwrap();
            let up = crate::numkit::dot(&model.logits(&x).unwrap(), &c);
            t[i] -= 2.0 * h;
            model.set_flat_params(&t).unwrap();
            let down = crate::numkit::dot(&model.logits(&x).unwrap(), &c);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-6, "param {i}: fd {fd} vs {}", analytic[i]);
        }
    }
}
