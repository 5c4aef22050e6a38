//! Fully connected networks with ReLU hidden layers and hand-written backprop.

use std::ops::Range;

use super::matrix::{matmul, matmul_tn, Matrix};
use super::rng::RngState;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
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
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
            Activation::Tanh => 3,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Tanh,
            _ => return None,
        })
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One affine layer: `W` is `fan_in × fan_out`, `b` is `1 × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
    output: Activation,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.b.rows() != 1 || l.b.cols() != l.w.cols() {
                return Err(Error::Dimension {
                    op: "layer bias",
                    left: l.w.shape(),
                    right: l.b.shape(),
                });
            }
            if let Some(next) = layers.get(i + 1) {
                if next.w.rows() != l.w.cols() {
                    return Err(Error::Dimension {
                        op: "adjacent layers",
                        left: l.w.shape(),
                        right: next.w.shape(),
                    });
                }
            }
        }
        Ok(Self { layers, output })
    }

    /// All-zero network with the given widths (input first, output last).
    pub fn zeros(widths: &[usize], output: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                w: Matrix::zeros(w[0], w[1]),
                b: Matrix::zeros(1, w[1]),
            })
            .collect();
        Self::new(layers, output)
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn he_init(widths: &[usize], output: Activation, rng: &mut RngState) -> Result<Self> {
        let mut p = Self::zeros(widths, output)?;
        for l in &mut p.layers {
            let std = (2.0 / l.w.rows() as f64).sqrt();
            rng.fill_normal(l.w.as_mut_slice());
            l.w.scale(std);
        }
        Ok(p)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].w.cols()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(|l| l.w.cols()));
        w
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Matrices in flattening order: `W₀, b₀, W₁, b₁, …`.
    pub fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b])
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b])
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for m in self.matrices() {
            v.extend_from_slice(m.as_slice());
        }
        v
    }

    /// Overwrites all parameters from a flat vector in [`Self::matrices`] order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension {
                op: "assign_flat",
                left: (self.num_params(), 1),
                right: (flat.len(), 1),
            });
        }
        let mut off = 0;
        for m in self.matrices_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Same architecture, parameters taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.assign_flat(flat)?;
        Ok(p)
    }

    /// Flat index range of each layer's `(W, b)` block.
    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let n = l.w.len() + l.b.len();
                off += n;
                off - n..off
            })
            .collect()
    }

    fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.w.shape() == b.w.shape())
    }

    fn hidden_activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            Activation::Relu
        }
    }
}

/// Values saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    output: Matrix,
    shapes: Vec<(usize, usize)>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn batch_size(&self) -> usize {
        self.output.rows()
    }
}

pub fn mlp_forward(params: &MlpParams, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if x.cols() != params.input_width() {
        return Err(Error::Dimension {
            op: "mlp_forward",
            left: x.shape(),
            right: params.layers[0].w.shape(),
        });
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut a = x.clone();
    for (i, l) in params.layers.iter().enumerate() {
        let mut z = matmul(&a, &l.w)?;
        z.add_row_broadcast(&l.b)?;
        let act = params.hidden_activation(i);
        let next = z.map(|v| act.apply(v));
        inputs.push(a);
        pre.push(z);
        a = next;
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("mlp_forward"));
    }
    let cache = ForwardCache {
        inputs,
        pre,
        output: a.clone(),
        shapes: params.layers.iter().map(|l| l.w.shape()).collect(),
    };
    Ok((a, cache))
}

/// Forward pass without keeping a cache.
pub fn mlp_predict(params: &MlpParams, x: &Matrix) -> Result<Matrix> {
    if x.cols() != params.input_width() {
        return Err(Error::Dimension {
            op: "mlp_predict",
            left: x.shape(),
            right: params.layers[0].w.shape(),
        });
    }
    let mut a = x.clone();
    for (i, l) in params.layers.iter().enumerate() {
        let mut z = matmul(&a, &l.w)?;
        z.add_row_broadcast(&l.b)?;
        let act = params.hidden_activation(i);
        z.map_inplace(|v| act.apply(v));
        a = z;
    }
    Ok(a)
}

fn check_cache(params: &MlpParams, cache: &ForwardCache, output_grad: &Matrix) -> Result<()> {
    let shapes: Vec<_> = params.layers.iter().map(|l| l.w.shape()).collect();
    if shapes != cache.shapes {
        return Err(Error::StaleCache(format!(
            "cache built for layers {:?}, params have {:?}",
            cache.shapes, shapes
        )));
    }
    if output_grad.shape() != cache.output.shape() {
        return Err(Error::StaleCache(format!(
            "output gradient {:?} vs cached output {:?}",
            output_grad.shape(),
            cache.output.shape()
        )));
    }
    Ok(())
}

/// Gradient with respect to each layer's pre-activation, last layer first.
fn pre_activation_grads(
    params: &MlpParams,
    cache: &ForwardCache,
    output_grad: &Matrix,
    need_input: bool,
) -> Result<(Vec<Matrix>, Option<Matrix>)> {
    check_cache(params, cache, output_grad)?;
    let n_layers = params.layers.len();
    let mut dzs = Vec::with_capacity(n_layers);
    let mut upstream = output_grad.clone();
    let mut input_grad = None;
    for i in (0..n_layers).rev() {
        let act = params.hidden_activation(i);
        let z = &cache.pre[i];
        let a_out = if i + 1 == n_layers {
            &cache.output
        } else {
            &cache.inputs[i + 1]
        };
        let mut dz = upstream;
        for ((d, &zv), &av) in dz
            .as_mut_slice()
            .iter_mut()
            .zip(z.as_slice())
            .zip(a_out.as_slice())
        {
            *d *= act.derivative(zv, av);
        }
        if i > 0 || need_input {
            let da = matmul(&dz, &params.layers[i].w.transpose())?;
            if i == 0 {
                input_grad = Some(da.clone());
            }
            upstream = da;
        } else {
            upstream = Matrix::zeros(0, 0);
        }
        dzs.push(dz);
    }
    dzs.reverse();
    Ok((dzs, input_grad))
}

/// Parameter gradients (summed over the batch) plus the gradient at the input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: MlpParams,
    pub input: Option<Matrix>,
}

fn batch_grads(params: &MlpParams, cache: &ForwardCache, dzs: &[Matrix]) -> Result<MlpParams> {
    let layers = dzs
        .iter()
        .zip(&cache.inputs)
        .map(|(dz, a)| {
            Ok(Layer {
                w: matmul_tn(a, dz)?,
                b: dz.sum_rows(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MlpParams::new(layers, params.output)
}

/// Reverse-mode gradients of `Σ_rows ⟨output_grad, output⟩`, summed over the batch.
pub fn mlp_backward(params: &MlpParams, cache: &ForwardCache, output_grad: &Matrix) -> Result<MlpParams> {
    let (dzs, _) = pre_activation_grads(params, cache, output_grad, false)?;
    batch_grads(params, cache, &dzs)
}

/// Like [`mlp_backward`] but also returns the gradient with respect to the input batch.
pub fn mlp_backward_with_input(
    params: &MlpParams,
    cache: &ForwardCache,
    output_grad: &Matrix,
) -> Result<Gradients> {
    let (dzs, input) = pre_activation_grads(params, cache, output_grad, true)?;
    Ok(Gradients {
        params: batch_grads(params, cache, &dzs)?,
        input,
    })
}

/// One flattened gradient per example, in [`MlpParams::matrices`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleGrads {
    grads: Matrix,
    layer_ranges: Vec<Range<usize>>,
}

impl PerExampleGrads {
    pub fn new(grads: Matrix, layer_ranges: Vec<Range<usize>>) -> Result<Self> {
        let total = layer_ranges.last().map_or(0, |r| r.end);
        if total != grads.cols() {
            return Err(Error::Dimension {
                op: "per-example grads",
                left: grads.shape(),
                right: (1, total),
            });
        }
        Ok(Self { grads, layer_ranges })
    }

    pub fn batch_size(&self) -> usize {
        self.grads.rows()
    }

    pub fn num_params(&self) -> usize {
        self.grads.cols()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        self.grads.row(i)
    }

    pub fn example_mut(&mut self, i: usize) -> &mut [f64] {
        self.grads.row_mut(i)
    }

    pub fn layer_ranges(&self) -> &[Range<usize>] {
        &self.layer_ranges
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.grads
    }

    /// Sum over examples, accumulated in ascending example order.
    pub fn sum(&self) -> Vec<f64> {
        self.grads.sum_rows().into_vec()
    }
}

pub fn per_example_grads(
    params: &MlpParams,
    cache: &ForwardCache,
    output_grad: &Matrix,
) -> Result<PerExampleGrads> {
    let (dzs, _) = pre_activation_grads(params, cache, output_grad, false)?;
    let n = cache.batch_size();
    let total = params.num_params();
    let mut out = Matrix::zeros(n, total);
    for e in 0..n {
        let row = out.row_mut(e);
        let mut off = 0;
        for (dz, a) in dzs.iter().zip(&cache.inputs) {
            let dz_row = dz.row(e);
            let fan_out = dz_row.len();
            for &ai in a.row(e) {
                for (slot, &d) in row[off..off + fan_out].iter_mut().zip(dz_row) {
                    *slot = ai * d;
                }
                off += fan_out;
            }
            row[off..off + fan_out].copy_from_slice(dz_row);
            off += fan_out;
        }
    }
    PerExampleGrads::new(out, params.layer_ranges())
}

/// Elementwise `a + b` for equally shaped networks.
pub fn add_params(a: &MlpParams, b: &MlpParams) -> Result<MlpParams> {
    if !a.same_shape(b) {
        return Err(Error::InvalidArgument("parameter shapes differ".into()));
    }
    let mut out = a.clone();
    for (x, y) in out.matrices_mut().zip(b.matrices()) {
        x.add_assign(y)?;
    }
    Ok(out)
}
