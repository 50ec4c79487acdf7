//! Dense feed-forward networks evaluated against a flat [`ParamVector`].
//!
//! A network is described by a list of [`LayerSpec`]s. Its parameters live in
//! a `ParamVector` with, per layer, an `(out_dim, in_dim)` weight segment
//! followed by an `out_dim` bias segment when the layer has a bias.
//!
//! Gradients are computed by explicit reverse-mode passes over a retained
//! [`ForwardTrace`]. The ReLU derivative at exactly zero is taken as zero.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{config, Error, Result};

use super::matrix::{add_transposed_matmul, matmul, matmul_transposed};
use super::{Matrix, ParamVector, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, has_bias: bool) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
            has_bias,
        }
    }

    pub fn relu(in_dim: usize, out_dim: usize) -> Self {
        Self::new(in_dim, out_dim, Activation::Relu, true)
    }

    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        Self::new(in_dim, out_dim, Activation::Identity, true)
    }
}

/// Checks dimensions and chaining of a layer stack.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(config("network needs at least one layer"));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(config(format!("layer {i} has a zero dimension")));
        }
        if i > 0 && specs[i - 1].out_dim != s.in_dim {
            return Err(config(format!(
                "layer {} outputs {} values but layer {i} expects {}",
                i - 1,
                specs[i - 1].out_dim,
                s.in_dim
            )));
        }
    }
    Ok(())
}

/// Segment layout of the parameters for `specs`.
pub fn param_layout(specs: &[LayerSpec]) -> Vec<Segment> {
    let mut shapes = Vec::with_capacity(specs.len() * 2);
    for s in specs {
        shapes.push(Segment::Matrix {
            rows: s.out_dim,
            cols: s.in_dim,
        });
        if s.has_bias {
            shapes.push(Segment::Vector(s.out_dim));
        }
    }
    shapes
}

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_params<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<ParamVector> {
    validate_specs(specs)?;
    let mut params = ParamVector::zeros(param_layout(specs));
    let mut seg = 0;
    for s in specs {
        let limit = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
        let dist = Uniform::new(-limit, limit).map_err(|e| config(e.to_string()))?;
        for w in params.segment_mut(seg) {
            *w = dist.sample(rng);
        }
        seg += if s.has_bias { 2 } else { 1 };
    }
    Ok(params)
}

fn check_params(theta: &ParamVector, specs: &[LayerSpec]) -> Result<()> {
    validate_specs(specs)?;
    let layout = param_layout(specs);
    if theta.shapes() != layout.as_slice() {
        return Err(config(format!(
            "parameter layout {:?} does not match network layout {:?}",
            theta.shapes(),
            layout
        )));
    }
    Ok(())
}

/// Intermediate values of one forward pass, retained for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l + 1]` is layer `l`'s output.
    activations: Vec<Matrix>,
    /// Pre-activation of each layer.
    pre_activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("trace holds the input")
    }

    pub fn into_output(mut self) -> Matrix {
        self.activations.pop().expect("trace holds the input")
    }
}

/// Runs the network, keeping every intermediate for a later [`backward_trace`].
pub fn forward_trace(
    theta: &ParamVector,
    specs: &[LayerSpec],
    inputs: &Matrix,
) -> Result<ForwardTrace> {
    check_params(theta, specs)?;
    if inputs.cols() != specs[0].in_dim {
        return Err(config(format!(
            "input has {} columns, first layer expects {}",
            inputs.cols(),
            specs[0].in_dim
        )));
    }
    let mut activations = Vec::with_capacity(specs.len() + 1);
    let mut pre_activations = Vec::with_capacity(specs.len());
    activations.push(inputs.clone());
    let mut seg = 0;
    for s in specs {
        let w = Matrix::from_vec(s.out_dim, s.in_dim, theta.segment(seg).to_vec())?;
        seg += 1;
        let mut z = matmul_transposed(activations.last().unwrap(), &w);
        if s.has_bias {
            let b = theta.segment(seg);
            seg += 1;
            for i in 0..z.rows() {
                for (v, bv) in z.row_mut(i).iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }
        let mut a = z.clone();
        if s.activation == Activation::Relu {
            for v in a.as_mut_slice() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        pre_activations.push(z);
        activations.push(a);
    }
    let trace = ForwardTrace {
        activations,
        pre_activations,
    };
    if !trace.output().is_finite() {
        return Err(Error::Numeric("network output is not finite".into()));
    }
    Ok(trace)
}

/// Feature matrix (`N x out_dim` of the last layer) for every input row.
pub fn forward_features(
    theta: &ParamVector,
    specs: &[LayerSpec],
    inputs: &Matrix,
) -> Result<Matrix> {
    forward_trace(theta, specs, inputs).map(ForwardTrace::into_output)
}

/// Gradient of `sum(upstream ⊙ output)` with respect to `theta`, given a
/// trace produced by [`forward_trace`] with the same `theta`.
pub fn backward_trace(
    theta: &ParamVector,
    specs: &[LayerSpec],
    trace: &ForwardTrace,
    upstream: &Matrix,
) -> Result<ParamVector> {
    check_params(theta, specs)?;
    let out = trace.output();
    if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
        return Err(config(format!(
            "upstream is {}x{}, network output is {}x{}",
            upstream.rows(),
            upstream.cols(),
            out.rows(),
            out.cols()
        )));
    }
    let mut grad = theta.zeros_like();
    // segment index of each layer's weight
    let mut weight_seg = Vec::with_capacity(specs.len());
    let mut seg = 0;
    for s in specs {
        weight_seg.push(seg);
        seg += if s.has_bias { 2 } else { 1 };
    }

    let mut delta = upstream.clone();
    for (l, s) in specs.iter().enumerate().rev() {
        if s.activation == Activation::Relu {
            let z = &trace.pre_activations[l];
            for (d, zv) in delta.as_mut_slice().iter_mut().zip(z.as_slice()) {
                if *zv <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let ws = weight_seg[l];
        add_transposed_matmul(&delta, &trace.activations[l], grad.segment_mut(ws));
        if s.has_bias {
            let gb = grad.segment_mut(ws + 1);
            for i in 0..delta.rows() {
                for (g, d) in gb.iter_mut().zip(delta.row(i)) {
                    *g += d;
                }
            }
        }
        if l > 0 {
            let w = Matrix::from_vec(s.out_dim, s.in_dim, theta.segment(ws).to_vec())?;
            delta = matmul(&delta, &w);
        }
    }
    Ok(grad)
}

/// Recomputes the forward pass and returns the gradient of
/// `sum(upstream ⊙ features)` with respect to `theta`.
pub fn backward(
    theta: &ParamVector,
    specs: &[LayerSpec],
    inputs: &Matrix,
    upstream: &Matrix,
) -> Result<ParamVector> {
    let trace = forward_trace(theta, specs, inputs)?;
    backward_trace(theta, specs, &trace, upstream)
}
