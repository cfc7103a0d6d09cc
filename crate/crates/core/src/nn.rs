//! Layer-level CNN with forward, tangent (forward-mode) and dual reverse passes.
//!
//! Every layer is linear in its parameters or piecewise linear in its input
//! (3×3 "same" convolution, ReLU, 2×2 max-pool, flatten, dense). Besides the
//! usual value pass the network can push a tangent `ẋ` through a recorded
//! [`Trace`] and then run a reverse pass that carries adjoints for both the
//! values and the tangents. Seeding the tangent adjoint at the output gives
//! `∂/∂θ ⟨∂f/∂x, ẋ⟩`, which is what losses defined on gradients (Grad-CAM
//! weights, input gradients) need.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::exec::{self, Execution};
use crate::tensor::{gemm, Op, Scalar, Tensor};

/// One convolutional block: a 3×3 convolution, ReLU, optional 2×2 max-pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filters: usize,
    pub followed_by_maxpool: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        cin: usize,
        cout: usize,
        height: usize,
        width: usize,
        weight: usize,
        bias: usize,
    },
    Relu,
    MaxPool {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flatten,
    Dense {
        din: usize,
        dout: usize,
        weight: usize,
        bias: usize,
    },
}

impl Layer {
    fn param_ranges(&self) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        match *self {
            Layer::Conv {
                cin,
                cout,
                weight,
                bias,
                ..
            } => Some((weight..weight + cout * cin * 9, bias..bias + cout)),
            Layer::Dense {
                din,
                dout,
                weight,
                bias,
            } => Some((weight..weight + dout * din, bias..bias + dout)),
            _ => None,
        }
    }
}

/// Values (and optionally tangents) at every layer boundary of a forward run.
#[derive(Clone, Debug)]
pub struct Trace<F> {
    start: usize,
    inputs: Vec<Tensor<F>>,
    output: Tensor<F>,
    tangents: Option<Vec<Tensor<F>>>,
}

impl<F: Scalar> Trace<F> {
    pub fn output(&self) -> &Tensor<F> {
        &self.output
    }

    /// Value entering layer `layer` (absolute index).
    pub fn input_of(&self, layer: usize) -> &Tensor<F> {
        &self.inputs[layer - self.start]
    }

    /// Tangent of the output, available after [`Network::push_tangent`].
    pub fn output_tangent(&self) -> Option<&Tensor<F>> {
        self.tangents.as_ref().map(|t| &t[t.len() - 1])
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.inputs.len()
    }
}

/// Adjoints flowing backwards: one for values, one for tangents.
#[derive(Clone, Debug)]
pub struct Adjoint<F> {
    pub value: Option<Tensor<F>>,
    pub tangent: Option<Tensor<F>>,
}

impl<F> Adjoint<F> {
    pub fn value(t: Tensor<F>) -> Self {
        Adjoint {
            value: Some(t),
            tangent: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Network<F> {
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
    params: Vec<F>,
    feature_layer: Option<usize>,
    exec: Execution,
}

impl<F: Scalar> Network<F> {
    /// Builds the layer stack with zeroed parameters.
    ///
    /// Layout: `[conv → relu → (maxpool)]* → flatten → [dense → relu]* → dense`.
    pub fn new(input: (usize, usize, usize), conv: &[ConvBlock], fc: &[usize], classes: usize) -> Self {
        let (mut c, mut h, mut w) = input;
        let mut layers = Vec::new();
        let mut shapes = Vec::new();
        let mut n_params = 0usize;
        for block in conv {
            shapes.push(vec![c, h, w]);
            let weight = n_params;
            let bias = weight + block.filters * c * 9;
            n_params = bias + block.filters;
            layers.push(Layer::Conv {
                cin: c,
                cout: block.filters,
                height: h,
                width: w,
                weight,
                bias,
            });
            c = block.filters;
            shapes.push(vec![c, h, w]);
            layers.push(Layer::Relu);
            if block.followed_by_maxpool {
                shapes.push(vec![c, h, w]);
                layers.push(Layer::MaxPool {
                    channels: c,
                    height: h,
                    width: w,
                });
                h /= 2;
                w /= 2;
            }
        }
        let feature_layer = if conv.is_empty() { None } else { Some(layers.len()) };
        shapes.push(vec![c, h, w]);
        layers.push(Layer::Flatten);
        let mut d = c * h * w;
        let mut dense = |layers: &mut Vec<Layer>, shapes: &mut Vec<Vec<usize>>, din: usize, dout: usize| {
            shapes.push(vec![din]);
            let weight = n_params;
            let bias = weight + dout * din;
            n_params = bias + dout;
            layers.push(Layer::Dense {
                din,
                dout,
                weight,
                bias,
            });
        };
        for &units in fc {
            dense(&mut layers, &mut shapes, d, units);
            shapes.push(vec![units]);
            layers.push(Layer::Relu);
            d = units;
        }
        dense(&mut layers, &mut shapes, d, classes);
        shapes.push(vec![classes]);
        Network {
            layers,
            shapes,
            params: vec![F::zero(); n_params],
            feature_layer,
            exec: Execution::default(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_glorot<R: Rng>(&mut self, rng: &mut R) {
        for layer in &self.layers {
            let (fan_in, fan_out) = match *layer {
                Layer::Conv { cin, cout, .. } => (cin * 9, cout * 9),
                Layer::Dense { din, dout, .. } => (din, dout),
                _ => continue,
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, b) = layer.param_ranges().expect("parametrised layer");
            for p in &mut self.params[w] {
                *p = F::of(rng.random_range(-limit..limit));
            }
            for p in &mut self.params[b] {
                *p = F::zero();
            }
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<F>) {
        assert_eq!(params.len(), self.params.len(), "parameter count mismatch");
        self.params = params;
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn set_execution(&mut self, exec: Execution) {
        self.exec = exec;
    }

    /// Index of the flatten layer; its input is the last-conv feature map `A`.
    pub fn feature_layer(&self) -> Option<usize> {
        self.feature_layer
    }

    /// Per-item shape entering `layer` (`layer == num_layers()` gives the output).
    pub fn shape_at(&self, layer: usize) -> &[usize] {
        &self.shapes[layer]
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn num_classes(&self) -> usize {
        self.shapes[self.layers.len()][0]
    }

    /// Parameter ranges `(weight, bias)` of the final classification layer.
    pub fn head_ranges(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        self.layers
            .last()
            .and_then(Layer::param_ranges)
            .expect("network ends with a dense layer")
    }

    /// Runs layers `from..to` on `x`, recording every intermediate value.
    pub fn forward(&self, x: &Tensor<F>, from: usize, to: usize) -> Trace<F> {
        let mut inputs = Vec::with_capacity(to - from);
        let mut cur = x.clone();
        for l in from..to {
            let next = self.layer_forward(l, &cur, false);
            inputs.push(cur);
            cur = next;
        }
        Trace {
            start: from,
            inputs,
            output: cur,
            tangents: None,
        }
    }

    /// Convenience: full forward pass returning only the logits.
    pub fn logits(&self, x: &Tensor<F>) -> Tensor<F> {
        let mut cur = x.clone();
        for l in 0..self.layers.len() {
            cur = self.layer_forward(l, &cur, false);
        }
        cur
    }

    /// Pushes the input tangent `xdot` through the recorded trace.
    pub fn push_tangent(&self, trace: &mut Trace<F>, xdot: Tensor<F>) {
        assert_eq!(xdot.shape(), trace.inputs[0].shape(), "tangent shape");
        let mut tangents = Vec::with_capacity(trace.inputs.len() + 1);
        let mut cur = xdot;
        for (i, l) in trace.range().enumerate() {
            let next = self.layer_tangent(l, &trace.inputs[i], &cur);
            tangents.push(cur);
            cur = next;
        }
        tangents.push(cur);
        trace.tangents = Some(tangents);
    }

    /// Reverse pass over the trace's layer range.
    ///
    /// `seed` holds adjoints of the output value and (optionally) output
    /// tangent. Parameter gradients are accumulated into `grads` when given.
    /// Input adjoints are only formed for the first layer when `need_input`.
    pub fn backward(&self, trace: &Trace<F>, seed: Adjoint<F>, mut grads: Option<&mut [F]>, need_input: bool) -> Adjoint<F> {
        if let Some(g) = grads.as_deref() {
            assert_eq!(g.len(), self.params.len(), "gradient buffer size");
        }
        assert!(
            seed.tangent.is_none() || trace.tangents.is_some(),
            "tangent adjoint given but no tangent was pushed"
        );
        let mut adj = seed;
        for (i, l) in trace.range().enumerate().rev() {
            let x = &trace.inputs[i];
            let xdot = trace.tangents.as_ref().map(|t| &t[i]);
            let want_input = need_input || i > 0;
            adj = self.layer_backward(l, x, xdot, adj, grads.as_deref_mut(), want_input);
        }
        adj
    }

    fn layer_forward(&self, l: usize, x: &Tensor<F>, tangent: bool) -> Tensor<F> {
        let b = x.batch();
        match self.layers[l] {
            Layer::Conv {
                cin,
                cout,
                height,
                width,
                weight,
                bias,
            } => {
                let w = &self.params[weight..weight + cout * cin * 9];
                let bias = (!tangent).then(|| &self.params[bias..bias + cout]);
                let items = exec::map_indices(self.exec, b, |i| conv_forward(x.item(i), w, bias, cin, cout, height, width));
                Tensor::stack(&[cout, height, width], items)
            }
            Layer::Relu => {
                let data = x.data().iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect();
                Tensor::from_vec(x.shape(), data)
            }
            Layer::MaxPool {
                channels,
                height,
                width,
            } => {
                let (oh, ow) = (height / 2, width / 2);
                let items = exec::map_indices(self.exec, b, |i| {
                    let xi = x.item(i);
                    let mut out = Vec::with_capacity(channels * oh * ow);
                    for c in 0..channels {
                        for y in 0..oh {
                            for xx in 0..ow {
                                out.push(xi[pool_argmax(xi, c, height, width, y, xx)]);
                            }
                        }
                    }
                    out
                });
                Tensor::stack(&[channels, oh, ow], items)
            }
            Layer::Flatten => x.clone().reshaped(&[b, x.item_len()]),
            Layer::Dense {
                din,
                dout,
                weight,
                bias,
            } => {
                let w = &self.params[weight..weight + dout * din];
                let mut y = vec![F::zero(); b * dout];
                if !tangent {
                    for row in y.chunks_mut(dout) {
                        row.copy_from_slice(&self.params[bias..bias + dout]);
                    }
                }
                gemm(b, din, dout, x.data(), Op::N, w, Op::T, F::one(), &mut y);
                Tensor::from_vec(&[b, dout], y)
            }
        }
    }

    fn layer_tangent(&self, l: usize, x: &Tensor<F>, xdot: &Tensor<F>) -> Tensor<F> {
        match self.layers[l] {
            Layer::Conv { .. } | Layer::Dense { .. } | Layer::Flatten => self.layer_forward(l, xdot, true),
            Layer::Relu => {
                let data = x
                    .data()
                    .iter()
                    .zip(xdot.data())
                    .map(|(&v, &d)| if v > F::zero() { d } else { F::zero() })
                    .collect();
                Tensor::from_vec(x.shape(), data)
            }
            Layer::MaxPool {
                channels,
                height,
                width,
            } => {
                let (oh, ow) = (height / 2, width / 2);
                let items = exec::map_indices(self.exec, x.batch(), |i| {
                    let (xi, di) = (x.item(i), xdot.item(i));
                    let mut out = Vec::with_capacity(channels * oh * ow);
                    for c in 0..channels {
                        for y in 0..oh {
                            for xx in 0..ow {
                                out.push(di[pool_argmax(xi, c, height, width, y, xx)]);
                            }
                        }
                    }
                    out
                });
                Tensor::stack(&[channels, oh, ow], items)
            }
        }
    }

    fn layer_backward(
        &self,
        l: usize,
        x: &Tensor<F>,
        xdot: Option<&Tensor<F>>,
        adj: Adjoint<F>,
        grads: Option<&mut [F]>,
        want_input: bool,
    ) -> Adjoint<F> {
        let b = x.batch();
        match self.layers[l] {
            Layer::Relu => {
                let gate = |t: Tensor<F>| {
                    let data = x
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(&v, &g)| if v > F::zero() { g } else { F::zero() })
                        .collect();
                    Tensor::from_vec(x.shape(), data)
                };
                Adjoint {
                    value: adj.value.map(gate),
                    tangent: adj.tangent.map(gate),
                }
            }
            Layer::Flatten => {
                let shape = x.shape().to_vec();
                Adjoint {
                    value: adj.value.map(|t| t.reshaped(&shape)),
                    tangent: adj.tangent.map(|t| t.reshaped(&shape)),
                }
            }
            Layer::MaxPool {
                channels,
                height,
                width,
            } => {
                let (oh, ow) = (height / 2, width / 2);
                let route = |t: Tensor<F>| {
                    let items = exec::map_indices(self.exec, b, |i| {
                        let xi = x.item(i);
                        let gi = t.item(i);
                        let mut out = vec![F::zero(); channels * height * width];
                        for c in 0..channels {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    out[pool_argmax(xi, c, height, width, y, xx)] += gi[(c * oh + y) * ow + xx];
                                }
                            }
                        }
                        out
                    });
                    Tensor::stack(&[channels, height, width], items)
                };
                Adjoint {
                    value: adj.value.map(route),
                    tangent: adj.tangent.map(route),
                }
            }
            Layer::Dense {
                din,
                dout,
                weight,
                bias,
            } => {
                let w = &self.params[weight..weight + dout * din];
                if let Some(g) = grads {
                    if let Some(yb) = &adj.value {
                        gemm(dout, b, din, yb.data(), Op::T, x.data(), Op::N, F::one(), &mut g[weight..weight + dout * din]);
                        let gb = &mut g[bias..bias + dout];
                        for row in yb.data().chunks(dout) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                    if let (Some(yd), Some(xd)) = (&adj.tangent, xdot) {
                        gemm(dout, b, din, yd.data(), Op::T, xd.data(), Op::N, F::one(), &mut g[weight..weight + dout * din]);
                    }
                }
                let back = |t: &Tensor<F>| {
                    let mut out = vec![F::zero(); b * din];
                    gemm(b, dout, din, t.data(), Op::N, w, Op::N, F::zero(), &mut out);
                    Tensor::from_vec(&[b, din], out)
                };
                if !want_input {
                    return Adjoint {
                        value: None,
                        tangent: None,
                    };
                }
                Adjoint {
                    value: adj.value.as_ref().map(back),
                    tangent: adj.tangent.as_ref().map(back),
                }
            }
            Layer::Conv {
                cin,
                cout,
                height,
                width,
                weight,
                bias,
            } => {
                let w = &self.params[weight..weight + cout * cin * 9];
                let need_grads = grads.is_some();
                let per_item = exec::map_indices(self.exec, b, |i| {
                    conv_backward_item(
                        x.item(i),
                        xdot.map(|t| t.item(i)),
                        adj.value.as_ref().map(|t| t.item(i)),
                        adj.tangent.as_ref().map(|t| t.item(i)),
                        w,
                        (cin, cout, height, width),
                        need_grads,
                        want_input,
                    )
                });
                if let Some(g) = grads {
                    for item in &per_item {
                        if let Some(gw) = &item.grad_w {
                            for (acc, &v) in g[weight..weight + cout * cin * 9].iter_mut().zip(gw) {
                                *acc += v;
                            }
                        }
                        if let Some(gb) = &item.grad_b {
                            for (acc, &v) in g[bias..bias + cout].iter_mut().zip(gb) {
                                *acc += v;
                            }
                        }
                    }
                }
                if !want_input {
                    return Adjoint {
                        value: None,
                        tangent: None,
                    };
                }
                let mut values = Vec::new();
                let mut tangents = Vec::new();
                for item in per_item {
                    if let Some(v) = item.input_value {
                        values.push(v);
                    }
                    if let Some(t) = item.input_tangent {
                        tangents.push(t);
                    }
                }
                let shape = [cin, height, width];
                Adjoint {
                    value: adj.value.as_ref().map(|_| Tensor::stack(&shape, values)),
                    tangent: adj.tangent.as_ref().map(|_| Tensor::stack(&shape, tangents)),
                }
            }
        }
    }
}

fn pool_argmax<F: Scalar>(x: &[F], c: usize, h: usize, w: usize, oy: usize, ox: usize) -> usize {
    let base = c * h * w;
    let mut best = base + (2 * oy) * w + 2 * ox;
    for dy in 0..2 {
        for dx in 0..2 {
            let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
            if x[idx] > x[best] {
                best = idx;
            }
        }
    }
    best
}

/// Lays out 3×3 zero-padded patches as a `(cin·9) × (h·w)` matrix.
fn im2col<F: Scalar>(x: &[F], cin: usize, h: usize, w: usize) -> Vec<F> {
    let hw = h * w;
    let mut cols = vec![F::zero(); cin * 9 * hw];
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[xx] = src[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(cols: &[F], cin: usize, h: usize, w: usize) -> Vec<F> {
    let hw = h * w;
    let mut x = vec![F::zero(); cin * hw];
    for c in 0..cin {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_forward<F: Scalar>(x: &[F], w: &[F], bias: Option<&[F]>, cin: usize, cout: usize, h: usize, wd: usize) -> Vec<F> {
    let hw = h * wd;
    let cols = im2col(x, cin, h, wd);
    let mut y = vec![F::zero(); cout * hw];
    if let Some(bias) = bias {
        for (row, &bv) in y.chunks_mut(hw).zip(bias) {
            row.fill(bv);
        }
    }
    gemm(cout, cin * 9, hw, w, Op::N, &cols, Op::N, F::one(), &mut y);
    y
}

struct ConvItemGrads<F> {
    grad_w: Option<Vec<F>>,
    grad_b: Option<Vec<F>>,
    input_value: Option<Vec<F>>,
    input_tangent: Option<Vec<F>>,
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_item<F: Scalar>(
    x: &[F],
    xdot: Option<&[F]>,
    ybar: Option<&[F]>,
    ydotbar: Option<&[F]>,
    w: &[F],
    (cin, cout, h, wd): (usize, usize, usize, usize),
    need_grads: bool,
    want_input: bool,
) -> ConvItemGrads<F> {
    let hw = h * wd;
    let k = cin * 9;
    let mut grad_w = None;
    let mut grad_b = None;
    if need_grads {
        let mut gw = vec![F::zero(); cout * k];
        if let Some(yb) = ybar {
            let cols = im2col(x, cin, h, wd);
            gemm(cout, hw, k, yb, Op::N, &cols, Op::T, F::one(), &mut gw);
            grad_b = Some(yb.chunks(hw).map(|r| r.iter().copied().sum()).collect());
        }
        if let (Some(yd), Some(xd)) = (ydotbar, xdot) {
            let cols = im2col(xd, cin, h, wd);
            gemm(cout, hw, k, yd, Op::N, &cols, Op::T, F::one(), &mut gw);
        }
        grad_w = Some(gw);
    }
    let back = |g: &[F]| {
        let mut dcols = vec![F::zero(); k * hw];
        gemm(k, cout, hw, w, Op::T, g, Op::N, F::zero(), &mut dcols);
        col2im(&dcols, cin, h, wd)
    };
    ConvItemGrads {
        grad_w,
        grad_b,
        input_value: if want_input { ybar.map(back) } else { None },
        input_tangent: if want_input { ydotbar.map(back) } else { None },
    }
}
