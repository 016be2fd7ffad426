//! Feed-forward networks: concrete evaluation, reverse-mode gradients and
//! star-set propagation share one layer description.

pub mod arch;
mod conv;
mod transformer;

use std::sync::{Arc, OnceLock};

use rand::Rng;

pub use conv::{Conv, Geometry};
pub use transformer::{
    clamp01_transform, neuron_bounds, relu_transform, sigmoid_tanh_transform, Diagnostics, PropagateOptions,
};

use crate::error::{invalid, Result};
use crate::interval::sigmoid;
use crate::linalg::{Matrix, SparseMatrix};
use crate::star::Shape;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `y = W x + b` with `W` of shape `out x in`.
    Dense { weight: Matrix, bias: Vec<f64> },
    Conv2d(Conv),
    ConvTranspose2d(Conv),
    Relu,
    /// Pixel saturation `min(max(x, 0), 1)`.
    Clamp01,
    Sigmoid,
    Tanh,
    Reshape(Shape),
    Flatten,
}

impl Layer {
    pub fn dense(weight: Matrix, bias: Vec<f64>) -> Self {
        Layer::Dense { weight, bias }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d(_) | Layer::ConvTranspose2d(_) | Layer::Reshape(_) | Layer::Flatten)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::ConvTranspose2d(_) => "conv_transpose2d",
            Layer::Relu => "relu",
            Layer::Clamp01 => "clamp01",
            Layer::Sigmoid => "sigmoid",
            Layer::Tanh => "tanh",
            Layer::Reshape(_) => "reshape",
            Layer::Flatten => "flatten",
        }
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        let n = input.len();
        match self {
            Layer::Dense { weight, bias } => {
                if weight.cols() != n || weight.rows() != bias.len() {
                    return invalid(format!(
                        "dense layer {}x{} (+{}) cannot follow a shape of {n} values",
                        weight.rows(),
                        weight.cols(),
                        bias.len()
                    ));
                }
                Ok(Shape::Flat(weight.rows()))
            }
            Layer::Conv2d(c) | Layer::ConvTranspose2d(c) => {
                let transposed = matches!(self, Layer::ConvTranspose2d(_));
                let Shape::Image { channels, height, width } = input else {
                    return invalid(format!("{} needs an image input, got {input:?}", self.name()));
                };
                if channels != c.in_channels
                    || c.weight.len() != c.weight_len()
                    || c.bias.len() != c.out_channels
                    || c.stride == 0
                    || c.kernel_size == 0
                {
                    return invalid(format!("{} parameters do not match input {input:?}", self.name()));
                }
                let out = if transposed { c.transpose_output(height, width) } else { c.conv_output(height, width) };
                let Some((h, w)) = out else {
                    return invalid(format!("{} produces an empty output from {input:?}", self.name()));
                };
                Ok(Shape::Image { channels: c.out_channels, height: h, width: w })
            }
            Layer::Relu | Layer::Clamp01 | Layer::Sigmoid | Layer::Tanh => Ok(input),
            Layer::Reshape(s) => {
                if s.len() != n {
                    return invalid(format!("cannot reshape {n} values to {s:?}"));
                }
                Ok(*s)
            }
            Layer::Flatten => Ok(Shape::Flat(n)),
        }
    }

    /// Mutable weight and bias slices, `None` for parameter-free layers.
    pub fn params_mut(&mut self) -> Option<(&mut [f64], &mut [f64])> {
        match self {
            Layer::Dense { weight, bias } => Some((weight.data_mut(), bias.as_mut_slice())),
            Layer::Conv2d(c) | Layer::ConvTranspose2d(c) => Some((c.weight.as_mut_slice(), c.bias.as_mut_slice())),
            _ => None,
        }
    }

    pub fn params(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Layer::Dense { weight, bias } => Some((weight.data(), bias.as_slice())),
            Layer::Conv2d(c) | Layer::ConvTranspose2d(c) => Some((c.weight.as_slice(), c.bias.as_slice())),
            _ => None,
        }
    }
}

fn geometry(input: Shape, output: Shape) -> Geometry {
    match (input, output) {
        (Shape::Image { height: in_h, width: in_w, .. }, Shape::Image { height: out_h, width: out_w, .. }) => {
            Geometry { in_h, in_w, out_h, out_w }
        }
        _ => unreachable!("convolution shapes are validated at construction"),
    }
}

/// A layer as an explicit affine map, used by star propagation.
#[derive(Debug, Clone)]
pub(crate) enum Lowered {
    Sparse(Arc<(SparseMatrix, Vec<f64>)>),
    /// Reshape / flatten: values unchanged.
    Identity,
    Dense,
    Nonlinear,
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the output.
    shapes: Vec<Shape>,
    lowered: OnceLock<Vec<Lowered>>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.shapes == other.shapes
    }
}

/// Per-layer `(weight, bias)` gradients; empty for parameter-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<(Vec<f64>, Vec<f64>)>);

impl ParamGrads {
    pub fn zeros_like(net: &Network) -> Self {
        ParamGrads(
            net.layers
                .iter()
                .map(|l| match l.params() {
                    Some((w, b)) => (vec![0.0; w.len()], vec![0.0; b.len()]),
                    None => (Vec::new(), Vec::new()),
                })
                .collect(),
        )
    }

    pub fn scale(&mut self, k: f64) {
        for (w, b) in &mut self.0 {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= k);
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for ((w, b), (ow, ob)) in self.0.iter_mut().zip(&other.0) {
            w.iter_mut().zip(ow).for_each(|(a, o)| *a += o);
            b.iter_mut().zip(ob).for_each(|(a, o)| *a += o);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|(w, b)| w.iter().chain(b).all(|v| v.is_finite()))
    }
}

impl Network {
    pub fn new(input: Shape, layers: Vec<Layer>) -> Result<Self> {
        if input.is_empty() {
            return invalid("network input shape is empty");
        }
        let mut shapes = vec![input];
        for (i, l) in layers.iter().enumerate() {
            let next = l.output_shape(*shapes.last().unwrap()).map_err(|e| match e {
                crate::Error::InvalidArgument(m) => crate::Error::InvalidArgument(format!("layer {i}: {m}")),
                other => other,
            })?;
            shapes.push(next);
        }
        Ok(Self { layers, shapes, lowered: OnceLock::new() })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().unwrap()
    }

    /// Input shape of layer `i` (or the output shape for `i == len`).
    pub fn shape_at(&self, i: usize) -> Shape {
        self.shapes[i]
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().filter_map(Layer::params).map(|(w, b)| w.len() + b.len()).sum()
    }

    /// Calls `f(layer_index, weights, bias)` for every parameterised layer.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, &mut [f64], &mut [f64])) {
        self.lowered = OnceLock::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Some((w, b)) = l.params_mut() {
                f(i, w, b);
            }
        }
    }

    pub fn params_finite(&self) -> bool {
        self.layers.iter().filter_map(Layer::params).all(|(w, b)| w.iter().chain(b).all(|v| v.is_finite()))
    }

    /// Kaiming-uniform weights (`U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`) and zero biases.
    pub fn init_kaiming(&mut self, rng: &mut impl Rng) {
        self.lowered = OnceLock::new();
        for l in &mut self.layers {
            let fan_in = match l {
                Layer::Dense { weight, .. } => weight.cols(),
                Layer::Conv2d(c) => c.in_channels * c.kernel_size * c.kernel_size,
                // Each output of a strided transposed conv receives about k^2 / s^2 taps per input channel.
                Layer::ConvTranspose2d(c) => {
                    (c.in_channels * c.kernel_size * c.kernel_size / (c.stride * c.stride)).max(1)
                }
                _ => continue,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            if let Some((w, b)) = l.params_mut() {
                w.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
                b.fill(0.0);
            }
        }
    }

    /// Weights and biases from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`. A transposed
    /// convolution counts its fan-in over output channels, matching the usual
    /// deep-learning default. Non-zero biases keep early ReLUs from starting dead.
    pub fn init_fan_in_uniform(&mut self, rng: &mut impl Rng) {
        self.lowered = OnceLock::new();
        for l in &mut self.layers {
            let fan_in = match l {
                Layer::Dense { weight, .. } => weight.cols(),
                Layer::Conv2d(c) => c.in_channels * c.kernel_size * c.kernel_size,
                Layer::ConvTranspose2d(c) => c.out_channels * c.kernel_size * c.kernel_size,
                _ => continue,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            if let Some((w, b)) = l.params_mut() {
                w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = rng.gen_range(-bound..bound));
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_shape().len() {
            return invalid(format!("network expects {} inputs, got {}", self.input_shape().len(), x.len()));
        }
        let mut cur = x.to_vec();
        for i in 0..self.layers.len() {
            cur = self.layer_forward(i, cur);
        }
        Ok(cur)
    }

    /// Activations before every layer plus the output (`len + 1` entries).
    pub fn forward_trace(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.input_shape().len() {
            return invalid(format!("network expects {} inputs, got {}", self.input_shape().len(), x.len()));
        }
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(x.to_vec());
        for i in 0..self.layers.len() {
            let next = self.layer_forward(i, trace[i].clone());
            trace.push(next);
        }
        Ok(trace)
    }

    fn layer_forward(&self, i: usize, mut x: Vec<f64>) -> Vec<f64> {
        match &self.layers[i] {
            Layer::Dense { weight, bias } => {
                let mut y = weight.mul_vec(&x);
                y.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
                y
            }
            Layer::Conv2d(c) => c.forward(geometry(self.shapes[i], self.shapes[i + 1]), false, &x),
            Layer::ConvTranspose2d(c) => c.forward(geometry(self.shapes[i], self.shapes[i + 1]), true, &x),
            Layer::Relu => {
                x.iter_mut().for_each(|v| *v = v.max(0.0));
                x
            }
            Layer::Clamp01 => {
                x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                x
            }
            Layer::Sigmoid => {
                x.iter_mut().for_each(|v| *v = sigmoid(*v));
                x
            }
            Layer::Tanh => {
                x.iter_mut().for_each(|v| *v = v.tanh());
                x
            }
            Layer::Reshape(_) | Layer::Flatten => x,
        }
    }

    /// Back-propagates `grad_out` (gradient of a scalar loss w.r.t. the
    /// output) through a trace from [`Network::forward_trace`]. Parameter
    /// gradients are accumulated into `param_grads` when given. Returns the
    /// gradient w.r.t. the input.
    pub fn backward(&self, trace: &[Vec<f64>], grad_out: &[f64], mut param_grads: Option<&mut ParamGrads>) -> Result<Vec<f64>> {
        if trace.len() != self.layers.len() + 1 || grad_out.len() != self.output_shape().len() {
            return invalid("backward called with a trace or gradient of the wrong shape");
        }
        let mut g = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let x = &trace[i];
            let y = &trace[i + 1];
            let pg = param_grads.as_deref_mut().map(|p| {
                let (w, b) = &mut p.0[i];
                (w.as_mut_slice(), b.as_mut_slice())
            });
            g = match &self.layers[i] {
                Layer::Dense { weight, .. } => {
                    if let Some((gw, gb)) = pg {
                        let cols = weight.cols();
                        for (r, gr) in g.iter().enumerate() {
                            gb[r] += gr;
                            if *gr != 0.0 {
                                crate::linalg::axpy(*gr, x, &mut gw[r * cols..(r + 1) * cols]);
                            }
                        }
                    }
                    weight.tr_mul_vec(&g)
                }
                Layer::Conv2d(c) => c.backward(geometry(self.shapes[i], self.shapes[i + 1]), false, x, &g, pg),
                Layer::ConvTranspose2d(c) => c.backward(geometry(self.shapes[i], self.shapes[i + 1]), true, x, &g, pg),
                Layer::Relu => g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                Layer::Clamp01 => g.iter().zip(x).map(|(g, x)| if *x > 0.0 && *x < 1.0 { *g } else { 0.0 }).collect(),
                Layer::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                Layer::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                Layer::Reshape(_) | Layer::Flatten => g,
            };
        }
        Ok(g)
    }

    pub(crate) fn lowered(&self) -> &[Lowered] {
        self.lowered.get_or_init(|| {
            self.layers
                .iter()
                .enumerate()
                .map(|(i, l)| match l {
                    Layer::Dense { .. } => Lowered::Dense,
                    Layer::Conv2d(c) => Lowered::Sparse(Arc::new(c.lower(geometry(self.shapes[i], self.shapes[i + 1]), false))),
                    Layer::ConvTranspose2d(c) => {
                        Lowered::Sparse(Arc::new(c.lower(geometry(self.shapes[i], self.shapes[i + 1]), true)))
                    }
                    Layer::Reshape(_) | Layer::Flatten => Lowered::Identity,
                    _ => Lowered::Nonlinear,
                })
                .collect()
        })
    }

    /// The sub-network made of layers `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Network> {
        if range.start > range.end || range.end > self.layers.len() {
            return invalid("layer range out of bounds");
        }
        Network::new(self.shapes[range.start], self.layers[range].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_dense() {
        let net = Network::new(Shape::Flat(3), vec![Layer::dense(Matrix::identity(3), vec![0.0; 3])]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn relu_definition() {
        let net = Network::new(Shape::Flat(2), vec![Layer::Relu]).unwrap();
        assert_eq!(net.forward(&[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn output_ranges_of_activations() {
        let x = [-50.0, -1.0, 0.3, 1.2, 60.0];
        for (layer, lo, hi, open) in [(Layer::Clamp01, 0.0, 1.0, false), (Layer::Sigmoid, 0.0, 1.0, true), (Layer::Tanh, -1.0, 1.0, true)] {
            let net = Network::new(Shape::Flat(5), vec![layer]).unwrap();
            for y in net.forward(&x).unwrap() {
                assert!(y >= lo && y <= hi);
                if open {
                    assert!(y > lo || x[0] < -30.0);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let net = Network::new(Shape::Flat(2), vec![Layer::Relu]).unwrap();
        assert!(net.forward(&[1.0]).is_err());
        assert!(Network::new(Shape::Flat(3), vec![Layer::dense(Matrix::identity(2), vec![0.0; 2])]).is_err());
    }

    #[test]
    fn relu_passes_gradient_where_positive() {
        let net = Network::new(Shape::Flat(3), vec![Layer::Relu]).unwrap();
        let t = net.forward_trace(&[0.5, 2.0, 3.0]).unwrap();
        assert_eq!(net.backward(&t, &[1.0, -2.0, 0.25], None).unwrap(), vec![1.0, -2.0, 0.25]);
    }

    #[test]
    fn clamp_saturated_pixel_has_zero_gradient() {
        let net = Network::new(Shape::Flat(2), vec![Layer::Clamp01]).unwrap();
        let t = net.forward_trace(&[1.2, 0.5]).unwrap();
        assert_eq!(net.backward(&t, &[1.0, 1.0], None).unwrap(), vec![0.0, 1.0]);
    }

    fn small_conv_net(rng: &mut ChaCha8Rng) -> Network {
        let conv = |cin, cout, k, s, p, rng: &mut ChaCha8Rng| Conv {
            in_channels: cin,
            out_channels: cout,
            kernel_size: k,
            stride: s,
            padding: p,
            weight: rand_vec(rng, cin * cout * k * k),
            bias: rand_vec(rng, cout),
        };
        let layers = vec![
            Layer::dense(Matrix::from_vec(8, 2, rand_vec(rng, 16)).unwrap(), rand_vec(rng, 8)),
            Layer::Tanh,
            Layer::Reshape(Shape::Image { channels: 2, height: 2, width: 2 }),
            Layer::ConvTranspose2d(conv(2, 3, 4, 2, 1, rng)),
            Layer::Sigmoid,
            Layer::Conv2d(conv(3, 2, 3, 2, 1, rng)),
            Layer::Clamp01,
            Layer::Flatten,
            Layer::dense(Matrix::from_vec(2, 8, rand_vec(rng, 16)).unwrap(), rand_vec(rng, 2)),
            Layer::Relu,
        ];
        Network::new(Shape::Flat(2), layers).unwrap()
    }

    #[test]
    fn gradients_match_central_differences() {
        // Oracle: central differences with h = 1e-5 on the scalar loss sum(w_o * y_o).
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut checked = 0;
        for _ in 0..20 {
            let net = small_conv_net(&mut rng);
            let x = rand_vec(&mut rng, 2);
            let wts = rand_vec(&mut rng, 2);
            let loss = |n: &Network, x: &[f64]| n.forward(x).unwrap().iter().zip(&wts).map(|(a, b)| a * b).sum::<f64>();
            let trace = net.forward_trace(&x).unwrap();
            let mut pg = ParamGrads::zeros_like(&net);
            let gx = net.backward(&trace, &wts, Some(&mut pg)).unwrap();
            let h = 1e-5;
            for i in 0..2 {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
                assert!((fd - gx[i]).abs() <= 1e-6 + 1e-4 * fd.abs(), "input {i}: {fd} vs {}", gx[i]);
            }
            for li in 0..net.layers().len() {
                let len = pg.0[li].0.len();
                for k in (0..len).step_by(5) {
                    let mut np = net.clone();
                    let mut nm = net.clone();
                    np.for_each_param_mut(|j, w, _| if j == li { w[k] += h });
                    nm.for_each_param_mut(|j, w, _| if j == li { w[k] -= h });
                    let fd = (loss(&np, &x) - loss(&nm, &x)) / (2.0 * h);
                    assert!((fd - pg.0[li].0[k]).abs() <= 1e-6 + 1e-4 * fd.abs());
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }
}
