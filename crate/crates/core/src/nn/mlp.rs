use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{gemm, Matrix, View};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Linear,
    Sigmoid,
}

/// `tanh` through one `exp`; within a few ulps of libm's and much cheaper.
#[inline]
pub(crate) fn fast_tanh(z: f64) -> f64 {
    if z.abs() > 19.0 {
        return z.signum();
    }
    if z.abs() < 1e-4 {
        let z2 = z * z;
        return z * (1.0 - z2 / 3.0 + 2.0 * z2 * z2 / 15.0);
    }
    let e = (2.0 * z).exp();
    (e - 1.0) / (e + 1.0)
}

impl HiddenActivation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            HiddenActivation::Tanh => fast_tanh(z),
            HiddenActivation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative(self, a: f64) -> f64 {
        match self {
            HiddenActivation::Tanh => 1.0 - a * a,
            HiddenActivation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl OutputActivation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            OutputActivation::Linear => z,
            OutputActivation::Sigmoid => sigmoid(z),
        }
    }

    #[inline]
    fn derivative(self, a: f64) -> f64 {
        match self {
            OutputActivation::Linear => 1.0,
            OutputActivation::Sigmoid => a * (1.0 - a),
        }
    }
}

/// Logistic function, evaluated without overflow for large |z|.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Parameters of a dense feed-forward network.
///
/// Layer `i` maps `layer_dims[i]` inputs to `layer_dims[i + 1]` outputs with a
/// row-major `out x in` weight matrix. Every layer but the last applies the
/// hidden activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    hidden_act: HiddenActivation,
    out_act: OutputActivation,
}

/// Forward intermediates for one batch. Consumed by [`Mlp::backward`].
#[derive(Clone, Debug)]
pub struct Tape {
    // activations[0] is the input; activations[l + 1] is the output of layer l
    activations: Vec<Matrix>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.activations[0].rows()
    }

    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("tape holds at least the input")
    }
}

/// Gradient of a scalar loss with respect to every parameter of an [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &Mlp) -> Self {
        Gradients {
            weights: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_assign(b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.scale_in_place(factor);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Parameters in the same flat order as [`Mlp::flat_params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.as_slice().iter().all(|&v| v == 0.0))
            && self.biases.iter().flatten().all(|&v| v == 0.0)
    }

    pub(crate) fn congruent_with(&self, params: &Mlp) -> bool {
        self.weights.len() == params.weights.len()
            && self
                .weights
                .iter()
                .zip(&params.weights)
                .all(|(g, w)| g.shape() == w.shape())
            && self
                .biases
                .iter()
                .zip(&params.biases)
                .all(|(g, b)| g.len() == b.len())
    }
}

impl Mlp {
    /// Builds a network with weights drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
    /// and zero biases.
    pub fn new(
        layer_dims: &[usize],
        hidden_act: HiddenActivation,
        out_act: OutputActivation,
        seed: u64,
    ) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Mlp {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            hidden_act,
            out_act,
        })
    }

    /// Assembles a network from explicit parameters, validating every shape.
    pub fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        hidden_act: HiddenActivation,
        out_act: OutputActivation,
    ) -> Result<Self> {
        validate_dims(&layer_dims)?;
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::Shape(format!(
                "{layers} layers declared but {} weight and {} bias blocks given",
                weights.len(),
                biases.len()
            )));
        }
        for (i, pair) in layer_dims.windows(2).enumerate() {
            if weights[i].shape() != (pair[1], pair[0]) {
                return Err(Error::Shape(format!(
                    "layer {i} weights are {:?}, expected {:?}",
                    weights[i].shape(),
                    (pair[1], pair[0])
                )));
            }
            if biases[i].len() != pair[1] {
                return Err(Error::Shape(format!(
                    "layer {i} bias has length {}, expected {}",
                    biases[i].len(),
                    pair[1]
                )));
            }
            if !weights[i].is_finite() || biases[i].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        Ok(Mlp {
            layer_dims,
            weights,
            biases,
            hidden_act,
            out_act,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    pub fn hidden_act(&self) -> HiddenActivation {
        self.hidden_act
    }

    pub fn out_act(&self) -> OutputActivation {
        self.out_act
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.as_slice().len() + b.len())
            .sum()
    }

    /// Layer-by-layer flattening: `W_0` (row-major), `b_0`, `W_1`, `b_1`, ...
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.as_slice().len();
            w.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
            let nb = b.len();
            b.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (&mut Matrix, &mut Vec<f64>)> {
        self.weights.iter_mut().zip(self.biases.iter_mut())
    }

    /// Evaluates a `B x in` batch and records what backward needs.
    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, Tape)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let last = self.weights.len() - 1;
        let mut activations = Vec::with_capacity(self.weights.len() + 1);
        activations.push(batch.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let input = &activations[l];
            let mut out = Matrix::zeros(input.rows(), w.rows());
            gemm(View::of(input), View::transposed(w), 0.0, &mut out);
            let act = |z: f64| {
                if l == last {
                    self.out_act.apply(z)
                } else {
                    self.hidden_act.apply(z)
                }
            };
            for r in 0..out.rows() {
                for (y, &bj) in out.row_mut(r).iter_mut().zip(b) {
                    *y = act(*y + bj);
                }
            }
            activations.push(out);
        }
        let output = activations.last().expect("non-empty").clone();
        Ok((output, Tape { activations }))
    }

    /// Forward pass without keeping the tape.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        self.forward(batch).map(|(out, _)| out)
    }

    /// Exact reverse-mode gradients for a forward batch.
    ///
    /// `upstream` is `dLoss/dOutput` with the forward output's shape. Returns
    /// parameter gradients and `dLoss/dInput`. The tape is consumed, so each
    /// forward pass admits exactly one backward pass.
    pub fn backward(&self, tape: Tape, upstream: &Matrix) -> Result<(Gradients, Matrix)> {
        let layers = self.weights.len();
        if tape.activations.len() != layers + 1
            || tape
                .activations
                .iter()
                .zip(&self.layer_dims)
                .any(|(a, &d)| a.cols() != d)
        {
            return Err(Error::Shape(
                "tape was recorded by a network of a different shape".into(),
            ));
        }
        let output = &tape.activations[layers];
        if upstream.shape() != output.shape() {
            return Err(Error::Shape(format!(
                "upstream is {:?}, forward output is {:?}",
                upstream.shape(),
                output.shape()
            )));
        }

        let mut grads = Gradients::zeros_like(self);
        let mut delta = Matrix::zeros(output.rows(), output.cols());
        for (d, (&u, &a)) in delta
            .as_mut_slice()
            .iter_mut()
            .zip(upstream.as_slice().iter().zip(output.as_slice()))
        {
            *d = u * self.out_act.derivative(a);
        }

        for l in (0..layers).rev() {
            let input = &tape.activations[l];
            let w = &self.weights[l];
            gemm(View::transposed(&delta), View::of(input), 0.0, &mut grads.weights[l]);
            let gb = &mut grads.biases[l];
            for dr in delta.iter_rows() {
                for (g, &dj) in gb.iter_mut().zip(dr) {
                    *g += dj;
                }
            }
            let mut prev = Matrix::zeros(input.rows(), input.cols());
            gemm(View::of(&delta), View::of(w), 0.0, &mut prev);
            if l > 0 {
                for (p, &a) in prev.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    *p *= self.hidden_act.derivative(a);
                }
            }
            delta = prev;
        }
        Ok((grads, delta))
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a network needs at least an input and an output width, got {layer_dims:?}"
        )));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "layer widths must be positive, got {layer_dims:?}"
        )));
    }
    Ok(())
}
