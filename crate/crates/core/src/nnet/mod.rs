//! The shared-trunk multi-task network.
//!
//! A stack of dense ReLU layers maps covariates to a shared representation
//! `h_shared` (the last trunk layer). Two heads read it:
//!
//! - the outcome head is one affine map on `[h_shared, A]`, so treatment
//!   enters the outcome prediction only through the scalar weight on the
//!   final input slot;
//! - the propensity head is one affine map on `h_shared` followed by a
//!   sigmoid.
//!
//! Trunk layers are indexed from 0 (`h1` is layer 0, `h_shared` is layer
//! `depth - 1`).

mod backprop;
mod gradcheck;
mod train;

use alloc::vec::Vec;

use rand::Rng;

use crate::causal::{OutcomeRegression, PropensityScore};
use crate::matrix::{dot, Matrix};
use crate::rng::{self, streams};
use crate::stats::expit;
use crate::{Error, Result};

pub use backprop::{combined_loss, loss_and_gradients, LossBreakdown, BCE_CLIP};
pub use gradcheck::{grad_check, GradCheckReport, GRAD_SCALE_FLOOR};
pub use train::{train, EpochLosses, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_size: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub activation: Activation,
    pub seed: u64,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden_layers", self.hidden_layers),
            ("hidden_size", self.hidden_size),
        ] {
            if v == 0 {
                return Err(Error::InvalidParameter {
                    name,
                    reason: "must be at least 1".into(),
                });
            }
        }
        Ok(())
    }
}

/// Affine map stored as an (out × in) weight matrix plus bias.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(outputs, inputs),
            bias: alloc::vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    /// Row-wise `x · Wᵀ + b`.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul_transposed(&self.weight);
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        out
    }

    fn param_len(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

/// Post-activation trunk outputs and head predictions of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    /// `layers[l]` is the (rows × hidden_size) post-ReLU output of trunk layer `l`;
    /// empty when capture was not requested.
    pub layers: Vec<Matrix>,
    pub q_pred: Vec<f64>,
    pub g_pred: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MultiTaskNet {
    pub config: NetConfig,
    pub trunk: Vec<Dense>,
    /// (hidden_size + 1) inputs; the last input is the treatment slot.
    pub q_head: Dense,
    pub g_head: Dense,
}

#[inline]
fn relu_in_place(m: &mut Matrix) {
    for v in m.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

impl MultiTaskNet {
    /// Glorot-uniform weights, `U(±sqrt(6 / (fan_in + fan_out)))`, drawn
    /// layer by layer (trunk, outcome head, propensity head) in row-major
    /// order from the `INIT` stream of `config.seed`. Biases start at zero.
    pub fn init(config: &NetConfig) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = rng::stream(config.seed, streams::INIT);
        let mut fill = |layer: &mut Dense| {
            let limit = libm::sqrt(6.0 / (layer.inputs() + layer.outputs()) as f64);
            for w in layer.weight.as_mut_slice() {
                *w = rng.random_range(-limit..limit);
            }
        };
        for layer in net.trunk.iter_mut() {
            fill(layer);
        }
        fill(&mut net.q_head);
        fill(&mut net.g_head);
        Ok(net)
    }

    /// All weights and biases zero.
    pub fn zeros(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_size;
        let mut trunk = Vec::with_capacity(config.hidden_layers);
        trunk.push(Dense::zeros(config.input_dim, h));
        for _ in 1..config.hidden_layers {
            trunk.push(Dense::zeros(h, h));
        }
        Ok(Self {
            config: config.clone(),
            trunk,
            q_head: Dense::zeros(h + 1, 1),
            g_head: Dense::zeros(h, 1),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    pub fn depth(&self) -> usize {
        self.trunk.len()
    }

    /// Weight on the treatment input of the outcome head.
    pub fn treatment_weight(&self) -> f64 {
        self.q_head.weight.get(0, self.hidden_size())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().map(Dense::param_len).sum()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain([&self.q_head, &self.g_head])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk.iter_mut().chain([&mut self.q_head, &mut self.g_head])
    }

    /// Flat parameter vector: for each layer (trunk, outcome head, propensity
    /// head) its weights row-major followed by its bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for layer in self.layers() {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.parameter_count(),
                found: params.len(),
            });
        }
        let mut offset = 0;
        for layer in self.layers_mut() {
            let nw = layer.weight.as_slice().len();
            layer
                .weight
                .as_mut_slice()
                .copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// Checks that layer shapes agree with the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let h = self.hidden_size();
        if self.trunk.len() != self.config.hidden_layers {
            return Err(Error::DimensionMismatch {
                what: "trunk depth",
                expected: self.config.hidden_layers,
                found: self.trunk.len(),
            });
        }
        for (l, layer) in self.trunk.iter().enumerate() {
            let fan_in = if l == 0 { self.input_dim() } else { h };
            if layer.inputs() != fan_in || layer.outputs() != h || layer.bias.len() != h {
                return Err(Error::DimensionMismatch {
                    what: "trunk layer shape",
                    expected: fan_in * h,
                    found: layer.inputs() * layer.outputs(),
                });
            }
        }
        if self.q_head.inputs() != h + 1 || self.q_head.outputs() != 1 || self.q_head.bias.len() != 1 {
            return Err(Error::DimensionMismatch {
                what: "outcome head inputs",
                expected: h + 1,
                found: self.q_head.inputs(),
            });
        }
        if self.g_head.inputs() != h || self.g_head.outputs() != 1 || self.g_head.bias.len() != 1 {
            return Err(Error::DimensionMismatch {
                what: "propensity head inputs",
                expected: h,
                found: self.g_head.inputs(),
            });
        }
        Ok(())
    }

    fn check_inputs(&self, w: &Matrix, a: &[f64]) -> Result<()> {
        if w.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "covariate columns",
                expected: self.input_dim(),
                found: w.cols(),
            });
        }
        if a.len() != w.rows() {
            return Err(Error::DimensionMismatch {
                what: "treatment vector",
                expected: w.rows(),
                found: a.len(),
            });
        }
        Ok(())
    }

    /// Post-ReLU output of trunk layer `l` given that layer's input.
    pub fn trunk_layer(&self, l: usize, input: &Matrix) -> Matrix {
        let mut h = self.trunk[l].apply(input);
        relu_in_place(&mut h);
        h
    }

    /// Outcome predictions from the shared representation and treatment.
    pub fn q_from_shared(&self, h_shared: &Matrix, a: &[f64]) -> Vec<f64> {
        let hs = self.hidden_size();
        let w = self.q_head.weight.row(0);
        let (w_h, w_a) = (&w[..hs], w[hs]);
        (0..h_shared.rows())
            .map(|i| dot(w_h, h_shared.row(i)) + w_a * a[i] + self.q_head.bias[0])
            .collect()
    }

    /// Propensity logits from the shared representation.
    pub fn g_logits_from_shared(&self, h_shared: &Matrix) -> Vec<f64> {
        let w = self.g_head.weight.row(0);
        (0..h_shared.rows())
            .map(|i| dot(w, h_shared.row(i)) + self.g_head.bias[0])
            .collect()
    }

    pub fn g_from_shared(&self, h_shared: &Matrix) -> Vec<f64> {
        self.g_logits_from_shared(h_shared).into_iter().map(expit).collect()
    }

    pub fn forward(&self, w: &Matrix, a: &[f64], capture: bool) -> Result<ActivationRecord> {
        let mut rec = self.forward_with_hook(w, a, &mut |_, _| {})?;
        if !capture {
            rec.layers.clear();
        }
        Ok(rec)
    }

    /// Forward pass that lets `hook(l, h)` edit each trunk layer's
    /// post-activation output before it feeds layer `l + 1`.
    pub fn forward_with_hook(
        &self,
        w: &Matrix,
        a: &[f64],
        hook: &mut dyn FnMut(usize, &mut Matrix),
    ) -> Result<ActivationRecord> {
        self.check_inputs(w, a)?;
        let mut first = self.trunk_layer(0, w);
        hook(0, &mut first);
        let mut prefix = Vec::with_capacity(self.depth());
        prefix.push(first);
        self.resume(prefix, a, hook)
    }

    /// Continues a forward pass from already computed trunk outputs
    /// `prefix[0..k]` (the last of which may have been edited), running
    /// layers `k..depth` and both heads. `hook` sees only the new layers.
    pub fn resume(
        &self,
        mut prefix: Vec<Matrix>,
        a: &[f64],
        hook: &mut dyn FnMut(usize, &mut Matrix),
    ) -> Result<ActivationRecord> {
        let Some(last) = prefix.last() else {
            return Err(Error::TooFewRows { needed: 1, found: 0 });
        };
        if prefix.len() > self.depth() {
            return Err(Error::IndexOutOfRange {
                what: "trunk layer",
                index: prefix.len() - 1,
                bound: self.depth(),
            });
        }
        if last.cols() != self.hidden_size() || a.len() != last.rows() {
            return Err(Error::DimensionMismatch {
                what: "resumed activations",
                expected: self.hidden_size(),
                found: last.cols(),
            });
        }
        for l in prefix.len()..self.depth() {
            let mut h = self.trunk_layer(l, &prefix[l - 1]);
            hook(l, &mut h);
            prefix.push(h);
        }
        let shared = &prefix[self.depth() - 1];
        let q_pred = self.q_from_shared(shared, a);
        let g_pred = self.g_from_shared(shared);
        Ok(ActivationRecord {
            layers: prefix,
            q_pred,
            g_pred,
        })
    }

    /// Trunk outputs for every layer; the heads are not evaluated.
    pub fn trunk_activations(&self, w: &Matrix) -> Result<Vec<Matrix>> {
        if w.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "covariate columns",
                expected: self.input_dim(),
                found: w.cols(),
            });
        }
        let mut layers: Vec<Matrix> = Vec::with_capacity(self.depth());
        for l in 0..self.depth() {
            let h = if l == 0 {
                self.trunk_layer(0, w)
            } else {
                self.trunk_layer(l, &layers[l - 1])
            };
            layers.push(h);
        }
        Ok(layers)
    }
}

impl OutcomeRegression for MultiTaskNet {
    fn predict_outcome(&self, w: &Matrix, a: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(w, a, false)?.q_pred)
    }

    /// One trunk pass serves all three treatment vectors.
    fn predict_outcome_all(&self, w: &Matrix, a: &[f64]) -> Result<[Vec<f64>; 3]> {
        self.check_inputs(w, a)?;
        let layers = self.trunk_activations(w)?;
        let shared = &layers[self.depth() - 1];
        let ones = alloc::vec![1.0; w.rows()];
        let zeros = alloc::vec![0.0; w.rows()];
        Ok([
            self.q_from_shared(shared, a),
            self.q_from_shared(shared, &ones),
            self.q_from_shared(shared, &zeros),
        ])
    }
}

impl PropensityScore for MultiTaskNet {
    fn predict_propensity(&self, w: &Matrix) -> Result<Vec<f64>> {
        let layers = self.trunk_activations(w)?;
        Ok(self.g_from_shared(&layers[self.depth() - 1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cfg(layers: usize, size: usize, seed: u64) -> NetConfig {
        NetConfig {
            input_dim: 3,
            hidden_layers: layers,
            hidden_size: size,
            activation: Activation::Relu,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = MultiTaskNet::init(&cfg(2, 4, 1)).unwrap();
        let b = MultiTaskNet::init(&cfg(2, 4, 1)).unwrap();
        let c = MultiTaskNet::init(&cfg(2, 4, 2)).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert_ne!(a.parameters(), c.parameters());
        assert!(a.layers().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_respects_glorot_bound() {
        let net = MultiTaskNet::init(&cfg(3, 5, 9)).unwrap();
        for layer in net.layers() {
            let limit = libm::sqrt(6.0 / (layer.inputs() + layer.outputs()) as f64);
            assert!(layer.weight.as_slice().iter().all(|w| w.abs() <= limit));
        }
    }

    #[test]
    fn width_one_shapes() {
        let net = MultiTaskNet::init(&cfg(3, 1, 0)).unwrap();
        assert_eq!(net.trunk[0].weight.rows(), 1);
        assert_eq!(net.trunk[1].weight.cols(), 1);
        assert_eq!(net.q_head.inputs(), 2);
        assert_eq!(net.g_head.inputs(), 1);
        assert_eq!(net.parameter_count(), (3 + 1) + 2 * (1 + 1) + (2 + 1) + (1 + 1));
        net.validate().unwrap();
    }

    #[test]
    fn zero_net_predicts_one_half() {
        let net = MultiTaskNet::zeros(&cfg(2, 3, 0)).unwrap();
        let w = Matrix::from_fn(5, 3, |i, j| (i + j) as f64);
        let rec = net.forward(&w, &[0.0, 1.0, 0.0, 1.0, 1.0], true).unwrap();
        assert!(rec.g_pred.iter().all(|&g| g == 0.5));
        assert_eq!(rec.layers.len(), 2);
    }

    #[test]
    fn treatment_slot_only_gives_three_a() {
        let mut net = MultiTaskNet::init(&cfg(2, 3, 4)).unwrap();
        net.q_head.weight = Matrix::from_vec(1, 4, vec![0.0, 0.0, 0.0, 3.0]).unwrap();
        let w = Matrix::from_fn(4, 3, |i, j| i as f64 - j as f64);
        let a = [1.0, 0.0, 1.0, 0.0];
        let rec = net.forward(&w, &a, false).unwrap();
        assert_eq!(rec.q_pred, vec![3.0, 0.0, 3.0, 0.0]);
        assert!(rec.layers.is_empty());
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let net = MultiTaskNet::init(&cfg(1, 2, 0)).unwrap();
        let w = Matrix::zeros(2, 4);
        assert!(matches!(
            net.forward(&w, &[0.0, 1.0], false),
            Err(Error::DimensionMismatch { .. })
        ));
        let w = Matrix::zeros(2, 3);
        assert!(matches!(
            net.forward(&w, &[0.0], false),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn parameters_round_trip() {
        let net = MultiTaskNet::init(&cfg(2, 4, 3)).unwrap();
        let mut other = MultiTaskNet::zeros(&net.config).unwrap();
        other.set_parameters(&net.parameters()).unwrap();
        assert_eq!(net, other);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(MultiTaskNet::init(&cfg(0, 4, 0)).is_err());
        assert!(MultiTaskNet::init(&cfg(1, 0, 0)).is_err());
    }
}
