//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Weights are stored `(in, out)` row-major so a batch `x` of shape
//! `(batch, in)` maps to `x · W + b`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamVector, TensorSpec};
use super::NeuralError;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
}

/// One affine layer addressing its weights by offset into a flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    pub inp: usize,
    pub out: usize,
    pub w: usize,
    pub b: usize,
    pub act: Activation,
}

impl Dense {
    fn weights<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.inp, self.out), &p[self.w..self.w + self.inp * self.out])
            .expect("weight slice matches shape")
    }

    fn bias<'a>(&self, p: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&p[self.b..self.b + self.out])
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights(p));
        z += &self.bias(p);
        if self.act == Activation::Relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
        z
    }

    /// Accumulates parameter gradients into `g` and returns the input gradient.
    /// `y` is this layer's forward output.
    pub fn backward(
        &self,
        p: &[f64],
        x: ArrayView2<f64>,
        y: ArrayView2<f64>,
        mut dz: Array2<f64>,
        g: &mut [f64],
    ) -> Array2<f64> {
        if self.act == Activation::Relu {
            Zip::from(&mut dz).and(y).for_each(|d, &o| {
                if o <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        {
            let mut gw = ArrayViewMut2::from_shape((self.inp, self.out), &mut g[self.w..self.w + self.inp * self.out])
                .expect("gradient slice matches shape");
            general_mat_mul(1.0, &x.t(), &dz, 1.0, &mut gw);
        }
        {
            let mut gb = ArrayViewMut1::from(&mut g[self.b..self.b + self.out]);
            gb += &dz.sum_axis(Axis(0));
        }
        dz.dot(&self.weights(p).t())
    }
}

/// Appends layers for `sizes` (ReLU between layers, `output` on the last)
/// starting at `offset`, returning the layers and their tensor specs.
pub(crate) fn build_stack(
    prefix: &str,
    sizes: &[usize],
    output: Activation,
    mut offset: usize,
) -> (Vec<Dense>, Vec<TensorSpec>) {
    let mut layers = Vec::new();
    let mut specs = Vec::new();
    for (i, pair) in sizes.windows(2).enumerate() {
        let (inp, out) = (pair[0], pair[1]);
        let act = if i + 2 == sizes.len() { output } else { Activation::Relu };
        specs.push(TensorSpec::new(format!("{prefix}l{i}.weight"), &[inp, out]));
        specs.push(TensorSpec::new(format!("{prefix}l{i}.bias"), &[out]));
        layers.push(Dense { inp, out, w: offset, b: offset + inp * out, act });
        offset += inp * out + out;
    }
    (layers, specs)
}

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
pub(crate) fn init_layers(layers: &[Dense], p: &mut [f64], rng: &mut SeededRng) {
    for layer in layers {
        let bound = 1.0 / (layer.inp as f64).sqrt();
        for w in &mut p[layer.w..layer.w + layer.inp * layer.out] {
            *w = rng.random_range(-bound..=bound);
        }
        p[layer.b..layer.b + layer.out].iter_mut().for_each(|b| *b = 0.0);
    }
}

/// Runs the stack, returning every activation with the input first.
pub(crate) fn stack_forward(layers: &[Dense], p: &[f64], x: Array2<f64>) -> Vec<Array2<f64>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x);
    for layer in layers {
        let y = layer.forward(p, acts.last().expect("input present").view());
        acts.push(y);
    }
    acts
}

pub(crate) fn stack_backward(
    layers: &[Dense],
    p: &[f64],
    acts: &[Array2<f64>],
    d_out: Array2<f64>,
    g: &mut [f64],
) -> Array2<f64> {
    let mut d = d_out;
    for (i, layer) in layers.iter().enumerate().rev() {
        d = layer.backward(p, acts[i].view(), acts[i + 1].view(), d, g);
    }
    d
}

/// Forward intermediates needed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpTape {
    pub(crate) acts: Vec<Array2<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("tape holds at least the input")
    }

    /// Activation sign pattern of every ReLU unit, used to detect kinks.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.acts[1..self.acts.len() - 1]
            .iter()
            .flat_map(|a| a.iter().map(|&v| v > 0.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    output_activation: Activation,
    layers: Vec<Dense>,
    params: ParamVector,
}

impl Mlp {
    pub fn zeros(sizes: &[usize], output_activation: Activation) -> Self {
        Self::zeros_with_prefix("", sizes, output_activation)
    }

    pub fn zeros_with_prefix(prefix: &str, sizes: &[usize], output_activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let (layers, specs) = build_stack(prefix, sizes, output_activation, 0);
        Self { sizes: sizes.to_vec(), output_activation, layers, params: ParamVector::zeros(specs) }
    }

    pub fn new(sizes: &[usize], output_activation: Activation, rng: &mut SeededRng) -> Self {
        let mut net = Self::zeros(sizes, output_activation);
        init_layers(&net.layers, net.params.values_mut(), rng);
        net
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    /// Sum of `(in + 1) * out` over layers.
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<(), NeuralError> {
        self.params.copy_from(params)
    }

    pub fn zero_grad(&self) -> ParamVector {
        self.params.zeros_like()
    }

    fn check_input(&self, cols: usize) -> Result<(), NeuralError> {
        if cols != self.input_dim() {
            return Err(NeuralError::ShapeMismatch { expected: self.input_dim(), actual: cols });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.check_input(input.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = layer.forward(self.params.values(), h.view());
        }
        Ok(h.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: Array2<f64>) -> Result<MlpTape, NeuralError> {
        self.check_input(x.ncols())?;
        Ok(MlpTape { acts: stack_forward(&self.layers, self.params.values(), x) })
    }

    /// Output only; no tape kept.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NeuralError> {
        self.check_input(x.ncols())?;
        let mut layers = self.layers.iter();
        let first = layers.next().expect("at least one layer");
        let mut h = first.forward(self.params.values(), x);
        for layer in layers {
            h = layer.forward(self.params.values(), h.view());
        }
        Ok(h)
    }

    /// Adds the gradient of `sum(d_out ⊙ output)` to `grads` and returns the
    /// gradient with respect to the input batch.
    pub fn backward(
        &self,
        tape: &MlpTape,
        d_out: Array2<f64>,
        grads: &mut ParamVector,
    ) -> Result<Array2<f64>, NeuralError> {
        let out = tape.output();
        if d_out.dim() != out.dim() {
            return Err(NeuralError::ShapeMismatch { expected: out.len(), actual: d_out.len() });
        }
        self.params.check_layout(grads)?;
        Ok(stack_backward(&self.layers, self.params.values(), &tape.acts, d_out, grads.values_mut()))
    }
}
