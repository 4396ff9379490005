//! Layer graphs with cached activations for reverse mode.
//!
//! A network is an ordered list of layers, where a residual layer wraps a
//! nested list `f` and computes `x + f(x)`. Shapes are per sample; every
//! batch tensor carries the batch size in front. Dense layers flatten their
//! input. Convolutions are 3x3, stride 1, zero padding 1, in NCHW layout.

use matrixmultiply::dgemm;
use serde::{Deserialize, Serialize};
use shapelift::rng::{purpose, StreamRng};

use crate::{Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { units: usize },
    Conv3x3 { channels: usize },
    MaxPool2,
    Relu,
    Dropout { rate: f64 },
    Residual { body: Vec<LayerSpec> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout masks come from the stream with this index.
    Train { stream: u64 },
}

#[derive(Clone, Debug)]
enum Node {
    Dense { w: usize, b: usize, inp: usize, out: usize },
    Conv { w: usize, b: usize, cin: usize, cout: usize, h: usize, wd: usize },
    MaxPool { c: usize, h: usize, wd: usize },
    Relu,
    Dropout { rate: f64 },
    Residual(Vec<Node>),
}

#[derive(Clone, Debug)]
enum Cache {
    Dense { x: Vec<f64> },
    Conv { cols: Vec<f64> },
    MaxPool { argmax: Vec<usize>, in_len: usize },
    Relu { active: Vec<bool> },
    Dropout { scale: Option<Vec<f64>> },
    Residual(Vec<Cache>),
}

/// Activations recorded by [`Network::forward`], consumed by
/// [`Network::backward`].
#[derive(Clone, Debug)]
pub struct Tape {
    batch: usize,
    caches: Vec<Cache>,
}

#[derive(Clone, Debug)]
pub struct Network {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    nodes: Vec<Node>,
    params: Vec<Tensor>,
    names: Vec<String>,
    seed: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
}

/// `c = op(a)·op(b) + beta·c` with row-major operands; `op(a)` is m×k and
/// `op(b)` is k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address only the first m*k, k*n and m*n
    // elements of a, b and c, whose lengths were checked.
    unsafe {
        dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

struct Builder<'a> {
    params: Vec<Tensor>,
    names: Vec<String>,
    rng: &'a mut dyn FnMut(usize) -> StreamRng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let idx = self.params.len();
        let mut t = Tensor::zeros(shape);
        if fan_in > 0 {
            let mut rng = (self.rng)(idx);
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.uniform_range(-bound, bound);
            }
        }
        self.params.push(t);
        self.names.push(name);
        idx
    }

    fn build(&mut self, specs: &[LayerSpec], mut shape: Vec<usize>, path: &str) -> Result<(Vec<Node>, Vec<usize>)> {
        let mut nodes = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let name = format!("{path}{i}");
            let node = match spec {
                LayerSpec::Dense { units } => {
                    let inp: usize = shape.iter().product();
                    if *units == 0 || inp == 0 {
                        return Err(Error::Shape(format!("layer {name}: empty dense layer")));
                    }
                    let w = self.add(format!("{name}.w"), &[inp, *units], inp);
                    let b = self.add(format!("{name}.b"), &[*units], 0);
                    shape = vec![*units];
                    Node::Dense { w, b, inp, out: *units }
                }
                LayerSpec::Conv3x3 { channels } => {
                    let [cin, h, wd] = shape[..] else {
                        return Err(Error::Shape(format!("layer {name}: convolution needs a [c, h, w] input, got {shape:?}")));
                    };
                    if *channels == 0 {
                        return Err(Error::Shape(format!("layer {name}: zero output channels")));
                    }
                    let w = self.add(format!("{name}.w"), &[*channels, cin * 9], cin * 9);
                    let b = self.add(format!("{name}.b"), &[*channels], 0);
                    shape = vec![*channels, h, wd];
                    Node::Conv { w, b, cin, cout: *channels, h, wd }
                }
                LayerSpec::MaxPool2 => {
                    let [c, h, wd] = shape[..] else {
                        return Err(Error::Shape(format!("layer {name}: pooling needs a [c, h, w] input, got {shape:?}")));
                    };
                    if h % 2 != 0 || wd % 2 != 0 || h == 0 || wd == 0 {
                        return Err(Error::Shape(format!("layer {name}: pooling needs even spatial size, got {h}x{wd}")));
                    }
                    shape = vec![c, h / 2, wd / 2];
                    Node::MaxPool { c, h, wd }
                }
                LayerSpec::Relu => Node::Relu,
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::InvalidArgument(format!("layer {name}: dropout rate {rate} outside [0, 1)")));
                    }
                    Node::Dropout { rate: *rate }
                }
                LayerSpec::Residual { body } => {
                    let (inner, out) = self.build(body, shape.clone(), &format!("{name}."))?;
                    if out != shape {
                        return Err(Error::Shape(format!("layer {name}: residual body maps {shape:?} to {out:?}")));
                    }
                    Node::Residual(inner)
                }
            };
            nodes.push(node);
        }
        Ok((nodes, shape))
    }
}

impl Network {
    /// Builds the graph, checking shapes, with He-uniform weights and zero
    /// biases drawn from `seed`.
    pub fn new(input_shape: &[usize], specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        if input_shape.is_empty() || input_shape.len() > 3 || input_shape.contains(&0) {
            return Err(Error::Shape(format!("bad input shape {input_shape:?}")));
        }
        let mut rng = |idx: usize| StreamRng::new(seed, purpose::INIT, idx as u64);
        let mut b = Builder { params: Vec::new(), names: Vec::new(), rng: &mut rng };
        let (nodes, output_shape) = b.build(&specs, input_shape.to_vec(), "")?;
        Ok(Self {
            input_shape: input_shape.to_vec(),
            output_shape,
            specs,
            nodes,
            params: b.params,
            names: b.names,
            seed,
            step: 0,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces parameter `idx`, keeping its shape.
    pub fn set_param(&mut self, idx: usize, t: Tensor) -> Result<()> {
        let slot = self.params.get_mut(idx).ok_or_else(|| Error::InvalidArgument(format!("no parameter {idx}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Shape(format!("parameter {idx} has shape {:?}, got {:?}", slot.shape(), t.shape())));
        }
        *slot = t;
        Ok(())
    }

    pub fn forward(&self, input: &Tensor, mode: Mode) -> Result<(Tensor, Tape)> {
        if input.shape().len() < 2 || input.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "network expects [batch, {:?}], got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        let batch = input.batch();
        let mut rng = match mode {
            Mode::Eval => None,
            Mode::Train { stream } => Some(StreamRng::new(self.seed, purpose::DROPOUT, stream)),
        };
        let (out, caches) = self.run(&self.nodes, input.data().to_vec(), batch, &mut rng);
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.output_shape);
        Ok((Tensor::new(shape, out)?, Tape { batch, caches }))
    }

    /// Forward pass in evaluation mode, discarding the tape.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input, Mode::Eval)?.0)
    }

    fn run(&self, nodes: &[Node], mut x: Vec<f64>, n: usize, rng: &mut Option<StreamRng>) -> (Vec<f64>, Vec<Cache>) {
        let mut caches = Vec::with_capacity(nodes.len());
        for node in nodes {
            let (y, cache) = match node {
                Node::Dense { w, b, inp, out } => {
                    let mut y = vec![0.0; n * out];
                    for row in y.chunks_exact_mut(*out) {
                        row.copy_from_slice(self.params[*b].data());
                    }
                    gemm(n, *inp, *out, &x, false, self.params[*w].data(), false, 1.0, &mut y);
                    (y, Cache::Dense { x })
                }
                Node::Conv { w, b, cin, cout, h, wd } => {
                    // All samples share one product: cols is [9·cin, n·hw].
                    let hw = h * wd;
                    let k = cin * 9;
                    let mut cols = vec![0.0; k * n * hw];
                    for i in 0..n {
                        im2col(&x[i * cin * hw..(i + 1) * cin * hw], *cin, *h, *wd, &mut cols[i * hw..], n * hw);
                    }
                    let mut prod = vec![0.0; cout * n * hw];
                    gemm(*cout, k, n * hw, self.params[*w].data(), false, &cols, false, 0.0, &mut prod);
                    let bias = self.params[*b].data();
                    let mut y = vec![0.0; n * cout * hw];
                    for i in 0..n {
                        for c in 0..*cout {
                            let src = &prod[c * n * hw + i * hw..c * n * hw + (i + 1) * hw];
                            for (d, s) in y[(i * cout + c) * hw..(i * cout + c + 1) * hw].iter_mut().zip(src) {
                                *d = s + bias[c];
                            }
                        }
                    }
                    (y, Cache::Conv { cols })
                }
                Node::MaxPool { c, h, wd } => {
                    let (oh, ow) = (h / 2, wd / 2);
                    let mut y = vec![0.0; n * c * oh * ow];
                    let mut argmax = vec![0; y.len()];
                    for plane in 0..n * c {
                        let base = plane * h * wd;
                        for r in 0..oh {
                            for q in 0..ow {
                                let o = plane * oh * ow + r * ow + q;
                                let mut best = base + 2 * r * wd + 2 * q;
                                for (dr, dq) in [(0, 1), (1, 0), (1, 1)] {
                                    let idx = base + (2 * r + dr) * wd + 2 * q + dq;
                                    if x[idx] > x[best] {
                                        best = idx;
                                    }
                                }
                                y[o] = x[best];
                                argmax[o] = best;
                            }
                        }
                    }
                    (y, Cache::MaxPool { argmax, in_len: x.len() })
                }
                Node::Relu => {
                    let active: Vec<bool> = x.iter().map(|v| *v > 0.0).collect();
                    for v in x.iter_mut() {
                        *v = v.max(0.0);
                    }
                    (x, Cache::Relu { active })
                }
                Node::Dropout { rate } => match rng.as_mut() {
                    Some(rng) if *rate > 0.0 => {
                        let keep = 1.0 - rate;
                        let scale: Vec<f64> = x.iter().map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 }).collect();
                        for (v, s) in x.iter_mut().zip(&scale) {
                            *v *= s;
                        }
                        (x, Cache::Dropout { scale: Some(scale) })
                    }
                    _ => (x, Cache::Dropout { scale: None }),
                },
                Node::Residual(body) => {
                    let (mut y, inner) = self.run(body, x.clone(), n, rng);
                    for (a, b) in y.iter_mut().zip(&x) {
                        *a += b;
                    }
                    (y, Cache::Residual(inner))
                }
            };
            x = y;
            caches.push(cache);
        }
        (x, caches)
    }

    /// Gradients of the scalar whose derivative with respect to the output
    /// is `upstream`: one tensor per parameter, plus the input gradient.
    pub fn backward(&self, tape: &Tape, upstream: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        self.check_tape(tape, upstream)?;
        let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let dx = self.back(&self.nodes, &tape.caches, upstream.data().to_vec(), tape.batch, &mut grads, false)?;
        let mut in_shape = vec![tape.batch];
        in_shape.extend_from_slice(&self.input_shape);
        Ok((grads, Tensor::new(in_shape, dx)?))
    }

    fn check_tape(&self, tape: &Tape, upstream: &Tensor) -> Result<()> {
        let mut out_shape = vec![tape.batch];
        out_shape.extend_from_slice(&self.output_shape);
        if upstream.shape() != out_shape {
            return Err(Error::Shape(format!("upstream gradient {:?}, expected {out_shape:?}", upstream.shape())));
        }
        if tape.caches.len() != self.nodes.len() {
            return Err(Error::InvalidArgument("tape was not recorded by this network".into()));
        }
        Ok(())
    }

    /// Parameter gradients only.
    pub fn backward_params(&self, tape: &Tape, upstream: &Tensor) -> Result<Vec<Tensor>> {
        self.check_tape(tape, upstream)?;
        let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        self.back(&self.nodes, &tape.caches, upstream.data().to_vec(), tape.batch, &mut grads, true)?;
        Ok(grads)
    }

    /// With `skip_input`, a leading dense or conv layer does not form the
    /// input gradient and an empty vector is returned.
    fn back(
        &self,
        nodes: &[Node],
        caches: &[Cache],
        mut dy: Vec<f64>,
        n: usize,
        grads: &mut [Tensor],
        skip_input: bool,
    ) -> Result<Vec<f64>> {
        for (idx, (node, cache)) in nodes.iter().zip(caches).enumerate().rev() {
            let skip_dx = skip_input && idx == 0;
            dy = match (node, cache) {
                (Node::Dense { w, b, inp, out }, Cache::Dense { x }) => {
                    gemm(*inp, n, *out, x, true, &dy, false, 1.0, grads[*w].data_mut());
                    let gb = grads[*b].data_mut();
                    for row in dy.chunks_exact(*out) {
                        for (g, d) in gb.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                    if skip_dx {
                        return Ok(Vec::new());
                    }
                    let mut dx = vec![0.0; n * inp];
                    gemm(n, *out, *inp, &dy, false, self.params[*w].data(), true, 0.0, &mut dx);
                    dx
                }
                (Node::Conv { w, b, cin, cout, h, wd }, Cache::Conv { cols }) => {
                    let hw = h * wd;
                    let k = cin * 9;
                    let mut dyb = vec![0.0; cout * n * hw];
                    for i in 0..n {
                        for c in 0..*cout {
                            dyb[c * n * hw + i * hw..c * n * hw + (i + 1) * hw]
                                .copy_from_slice(&dy[(i * cout + c) * hw..(i * cout + c + 1) * hw]);
                        }
                    }
                    gemm(*cout, n * hw, k, &dyb, false, cols, true, 1.0, grads[*w].data_mut());
                    for (g, row) in grads[*b].data_mut().iter_mut().zip(dyb.chunks_exact(n * hw)) {
                        *g += row.iter().sum::<f64>();
                    }
                    if skip_dx {
                        return Ok(Vec::new());
                    }
                    let mut dcol = vec![0.0; k * n * hw];
                    gemm(k, *cout, n * hw, self.params[*w].data(), true, &dyb, false, 0.0, &mut dcol);
                    let mut dx = vec![0.0; n * cin * hw];
                    for i in 0..n {
                        col2im_add(&dcol[i * hw..], *cin, *h, *wd, n * hw, &mut dx[i * cin * hw..(i + 1) * cin * hw]);
                    }
                    dx
                }
                (Node::MaxPool { .. }, Cache::MaxPool { argmax, in_len }) => {
                    let mut dx = vec![0.0; *in_len];
                    for (d, &j) in dy.iter().zip(argmax) {
                        dx[j] += d;
                    }
                    dx
                }
                (Node::Relu, Cache::Relu { active }) => {
                    for (d, a) in dy.iter_mut().zip(active) {
                        if !a {
                            *d = 0.0;
                        }
                    }
                    dy
                }
                (Node::Dropout { .. }, Cache::Dropout { scale }) => {
                    if let Some(scale) = scale {
                        for (d, s) in dy.iter_mut().zip(scale) {
                            *d *= s;
                        }
                    }
                    dy
                }
                (Node::Residual(body), Cache::Residual(inner)) => {
                    let mut dx = self.back(body, inner, dy.clone(), n, grads, false)?;
                    for (a, b) in dx.iter_mut().zip(&dy) {
                        *a += b;
                    }
                    dx
                }
                _ => return Err(Error::InvalidArgument("tape was not recorded by this network".into())),
            };
        }
        Ok(dy)
    }
}

/// Unfolds 3x3 zero-padded neighborhoods: row `c*9 + ky*3 + kx` of `col`
/// (rows `stride` apart) holds the shifted plane, `y*w + x` within the row.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, col: &mut [f64], stride: usize) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let r = (ch * 9 + ky * 3 + kx) * stride;
                let row = &mut col[r..r + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, d) in dst.iter_mut().enumerate() {
                        let sx = xx as isize + kx as isize - 1;
                        *d = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], c: usize, h: usize, w: usize, stride: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = (ch * 9 + ky * 3 + kx) * stride;
                let row = &col[r..r + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dx[ch * hw + sy as usize * w + sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}
