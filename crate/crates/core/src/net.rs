//! Layer graph, exact forward evaluation and reverse-mode gradients.
//!
//! Activations are indexed from the network input: activation `0` is the
//! input and activation `i + 1` is the output of layer `i`. A residual add at
//! layer `i` sums its input (activation `i`) with an earlier activation
//! `skip_from < i`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::{Scalar, Tensor};

/// Largest activation (elements) a network may declare.
const MAX_ACTIVATION: usize = 1 << 26;

/// Binary keep-mask over one weight tensor; `false` marks a pruned weight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    keep: Vec<bool>,
}

impl Mask {
    pub fn ones(len: usize) -> Self {
        Self {
            keep: vec![true; len],
        }
    }

    pub fn from_keep(keep: Vec<bool>) -> Self {
        Self { keep }
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn is_pruned(&self, idx: usize) -> bool {
        !self.keep[idx]
    }

    pub(crate) fn prune(&mut self, idx: usize) {
        self.keep[idx] = false;
    }

    /// Bit-packed, least significant bit first; a set bit means "kept".
    pub fn to_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.keep.len().div_ceil(8)];
        for (i, &k) in self.keep.iter().enumerate() {
            if k {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_bits(bits: &[u8], len: usize) -> Option<Self> {
        if bits.len() != len.div_ceil(8) {
            return None;
        }
        let keep = (0..len).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        Some(Self { keep })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub prunable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T = f32> {
    Conv2d(Conv2d<T>),
    Linear(Linear<T>),
    Relu,
    Flatten,
    GlobalAvgPool,
    /// Non-overlapping `k×k` average pooling (stride `k`, remainder dropped).
    AvgPool2d { kernel: usize },
    ResidualAdd { skip_from: usize },
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Linear(_) => "linear",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::AvgPool2d { .. } => "avg_pool2d",
            Layer::ResidualAdd { .. } => "residual_add",
        }
    }

    pub fn params(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        match self {
            Layer::Conv2d(c) => Some((&c.weight, &c.bias)),
            Layer::Linear(l) => Some((&l.weight, &l.bias)),
            _ => None,
        }
    }

    pub(crate) fn params_mut(&mut self) -> Option<(&mut Tensor<T>, &mut Tensor<T>)> {
        match self {
            Layer::Conv2d(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Linear(l) => Some((&mut l.weight, &mut l.bias)),
            _ => None,
        }
    }

    pub fn is_prunable(&self) -> bool {
        matches!(self, Layer::Conv2d(c) if c.prunable)
    }

    fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                weight: c.weight.cast(),
                bias: c.bias.cast(),
                stride: c.stride,
                padding: c.padding,
                prunable: c.prunable,
            }),
            Layer::Linear(l) => Layer::Linear(Linear {
                weight: l.weight.cast(),
                bias: l.bias.cast(),
            }),
            Layer::Relu => Layer::Relu,
            Layer::Flatten => Layer::Flatten,
            Layer::GlobalAvgPool => Layer::GlobalAvgPool,
            Layer::AvgPool2d { kernel } => Layer::AvgPool2d { kernel: *kernel },
            Layer::ResidualAdd { skip_from } => Layer::ResidualAdd {
                skip_from: *skip_from,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    layers: Vec<Layer<T>>,
    input_shape: [usize; 3],
    num_classes: usize,
    /// Activation shapes, `layers.len() + 1` entries.
    shapes: Vec<Vec<usize>>,
    /// Keep-masks keyed by prunable layer index.
    masks: BTreeMap<usize, Mask>,
    /// Conv geometry keyed by layer index.
    geometry: BTreeMap<usize, ConvGeometry>,
}

impl<T: Scalar> Network<T> {
    /// Validates the layer graph and attaches all-ones masks to every
    /// prunable conv layer.
    pub fn new(input_shape: [usize; 3], num_classes: usize, layers: Vec<Layer<T>>) -> Result<Self> {
        let mut shapes = vec![input_shape.to_vec()];
        let mut geometry = BTreeMap::new();
        let mut masks = BTreeMap::new();
        for (i, layer) in layers.iter().enumerate() {
            let input = shapes[i].clone();
            let err = |detail: String| Error::LayerShape { layer: i, detail };
            let out = match layer {
                Layer::Conv2d(c) => {
                    let g = ConvGeometry::new(&input, c.weight.shape(), c.stride, c.padding)
                        .map_err(|e| err(e.to_string()))?;
                    if c.bias.len() != g.out_channels {
                        return Err(err(format!(
                            "bias has {} entries for {} channels",
                            c.bias.len(),
                            g.out_channels
                        )));
                    }
                    if c.prunable {
                        masks.insert(i, Mask::ones(c.weight.len()));
                    }
                    geometry.insert(i, g);
                    g.output_shape()
                }
                Layer::Linear(l) => {
                    let &[out, n_in] = l.weight.shape() else {
                        return Err(err(format!("linear weights must be 2-D, got {:?}", l.weight.shape())));
                    };
                    if input.len() != 1 || input[0] != n_in {
                        return Err(err(format!("linear expects [{n_in}] input, got {input:?}")));
                    }
                    if l.bias.len() != out {
                        return Err(err(format!("bias has {} entries for {out} outputs", l.bias.len())));
                    }
                    vec![out]
                }
                Layer::Relu => input,
                Layer::Flatten => vec![input.iter().product()],
                Layer::GlobalAvgPool => {
                    if input.len() != 3 {
                        return Err(err(format!("global pooling expects C×H×W, got {input:?}")));
                    }
                    vec![input[0], 1, 1]
                }
                Layer::AvgPool2d { kernel } => {
                    if input.len() != 3 || *kernel == 0 || input[1] < *kernel || input[2] < *kernel {
                        return Err(err(format!("{kernel}×{kernel} pooling does not fit {input:?}")));
                    }
                    vec![input[0], input[1] / kernel, input[2] / kernel]
                }
                Layer::ResidualAdd { skip_from } => {
                    if *skip_from >= i {
                        return Err(err(format!(
                            "skip source activation {skip_from} is not strictly earlier than input {i}"
                        )));
                    }
                    if shapes[*skip_from] != input {
                        return Err(err(format!(
                            "skip shape {:?} differs from input shape {input:?}",
                            shapes[*skip_from]
                        )));
                    }
                    input
                }
            };
            if out
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .is_none_or(|n| n > MAX_ACTIVATION)
            {
                return Err(err(format!("activation shape {out:?} is too large")));
            }
            shapes.push(out);
        }
        let last = shapes.last().unwrap();
        if last.len() != 1 || last[0] != num_classes {
            return Err(Error::Shape(format!(
                "network emits {last:?}, expected [{num_classes}] logits"
            )));
        }
        Ok(Self {
            layers,
            input_shape,
            num_classes,
            shapes,
            masks,
            geometry,
        })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Shape of activation `idx` (0 = input).
    pub fn activation_shape(&self, idx: usize) -> &[usize] {
        &self.shapes[idx]
    }

    pub fn activation_len(&self, idx: usize) -> usize {
        self.shapes[idx].iter().product()
    }

    pub fn masks(&self) -> &BTreeMap<usize, Mask> {
        &self.masks
    }

    pub(crate) fn conv_geometry(&self, layer: usize) -> &ConvGeometry {
        &self.geometry[&layer]
    }

    /// Replaces the masks and zeroes every masked weight.
    pub fn set_masks(&mut self, masks: BTreeMap<usize, Mask>) -> Result<()> {
        if masks.keys().ne(self.masks.keys()) {
            return Err(Error::Shape("mask set does not match prunable layers".into()));
        }
        for (idx, mask) in &masks {
            if mask.len() != self.masks[idx].len() {
                return Err(Error::LayerShape {
                    layer: *idx,
                    detail: format!("mask has {} entries for {} weights", mask.len(), self.masks[idx].len()),
                });
            }
        }
        self.masks = masks;
        self.project_masks();
        Ok(())
    }

    /// Re-zeroes masked weights. Called after every mutation of weights.
    pub fn project_masks(&mut self) {
        for (&idx, mask) in &self.masks {
            if let Layer::Conv2d(c) = &mut self.layers[idx] {
                for (w, &k) in c.weight.data_mut().iter_mut().zip(mask.keep()) {
                    if !k {
                        *w = T::zero();
                    }
                }
            }
        }
    }

    /// Number of trainable tensors (weight and bias per parametric layer).
    pub fn param_tensors(&self) -> Vec<(usize, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some((w, b)) = layer.params() {
                out.push((i, w));
                out.push((i, b));
            }
        }
        out
    }

    pub(crate) fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut() {
            if let Some((w, b)) = layer.params_mut() {
                out.push(w);
                out.push(b);
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            layers: self.layers.iter().map(Layer::cast).collect(),
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            shapes: self.shapes.clone(),
            masks: self.masks.clone(),
            geometry: self.geometry.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != self.input_shape || !x.is_finite() {
            return Err(Error::LayerShape {
                layer: 0,
                detail: format!(
                    "input {:?} does not match network input {:?} (or is not finite)",
                    x.shape(),
                    self.input_shape
                ),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let acts = self.forward_flat(x.data());
        Ok(Tensor::from_vec(acts.into_iter().last().unwrap()))
    }

    /// Forward pass retaining every activation, for [`backward`].
    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<Trace<T>> {
        self.check_input(x)?;
        Ok(Trace {
            acts: self.forward_flat(x.data()),
        })
    }

    /// [`Network::forward_trace`] on a raw slice; panics on length mismatch.
    pub fn forward_trace_raw(&self, x: &[T]) -> Trace<T> {
        assert_eq!(x.len(), self.input_len());
        Trace {
            acts: self.forward_flat(x),
        }
    }

    /// Logits for a raw input slice; panics on length mismatch.
    pub fn logits(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.input_len());
        self.forward_flat(x).pop().unwrap()
    }

    pub fn predict(&self, x: &[T]) -> usize {
        crate::tensor::argmax(&self.logits(x))
    }

    fn forward_flat(&self, x: &[T]) -> Vec<Vec<T>> {
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = &acts[i];
            let out = match layer {
                Layer::Conv2d(c) => {
                    let g = &self.geometry[&i];
                    let mut out = vec![T::zero(); self.activation_len(i + 1)];
                    ops::conv2d_raw(g, input, c.weight.data(), Some(c.bias.data()), &mut out);
                    out
                }
                Layer::Linear(l) => {
                    let mut out = vec![T::zero(); l.bias.len()];
                    ops::linear_raw(l.weight.data(), Some(l.bias.data()), input, &mut out);
                    out
                }
                Layer::Relu => input.iter().map(|&v| v.max(T::zero())).collect(),
                Layer::Flatten => input.clone(),
                Layer::GlobalAvgPool => {
                    let c = self.shapes[i][0];
                    let plane = input.len() / c;
                    let inv = T::one() / T::of(plane as f64);
                    input
                        .chunks(plane)
                        .map(|ch| ch.iter().fold(T::zero(), |a, &b| a + b) * inv)
                        .collect()
                }
                Layer::AvgPool2d { kernel } => {
                    let mut out = vec![T::zero(); self.activation_len(i + 1)];
                    avg_pool_raw(&self.shapes[i], *kernel, input, &mut out);
                    out
                }
                Layer::ResidualAdd { skip_from } => input
                    .iter()
                    .zip(&acts[*skip_from])
                    .map(|(&a, &b)| a + b)
                    .collect(),
            };
            acts.push(out);
        }
        acts
    }

    /// Reverse-mode gradients of a scalar loss given `dL/dlogits`.
    ///
    /// Gradients of masked weights are returned as computed; projection is
    /// the caller's concern.
    pub fn backward(&self, trace: &Trace<T>, loss_grad: &Tensor<T>) -> Result<Gradients<T>> {
        if trace.acts.len() != self.layers.len() + 1
            || trace
                .acts
                .iter()
                .enumerate()
                .any(|(i, a)| a.len() != self.activation_len(i))
        {
            return Err(Error::MissingActivations(format!(
                "trace has {} activations for {} layers",
                trace.acts.len(),
                self.layers.len()
            )));
        }
        if loss_grad.len() != self.num_classes {
            return Err(Error::Shape(format!(
                "loss gradient has {} entries for {} classes",
                loss_grad.len(),
                self.num_classes
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        let input_grad = self.backward_into(&trace.acts, loss_grad.data(), &mut grads);
        grads.input = Tensor::new(self.input_shape.to_vec(), input_grad)?;
        Ok(grads)
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub(crate) fn backward_into(&self, acts: &[Vec<T>], loss_grad: &[T], grads: &mut Gradients<T>) -> Vec<T> {
        let n = self.layers.len();
        let mut g: Vec<Option<Vec<T>>> = vec![None; n + 1];
        g[n] = Some(loss_grad.to_vec());
        for i in (0..n).rev() {
            let Some(g_out) = g[i + 1].take() else {
                continue;
            };
            let contrib: Vec<T> = match &self.layers[i] {
                Layer::Conv2d(c) => {
                    let geo = &self.geometry[&i];
                    let (gw, gb) = grads.layers[i].as_mut().unwrap();
                    ops::conv2d_weight_grad_raw(geo, &acts[i], &g_out, gw.data_mut(), gb.data_mut());
                    let mut gi = vec![T::zero(); acts[i].len()];
                    ops::conv2d_transpose_raw(geo, &g_out, c.weight.data(), &mut gi);
                    gi
                }
                Layer::Linear(l) => {
                    let (gw, gb) = grads.layers[i].as_mut().unwrap();
                    let n_in = acts[i].len();
                    for (o, &go) in g_out.iter().enumerate() {
                        gb.data_mut()[o] += go;
                        if go == T::zero() {
                            continue;
                        }
                        let row = &mut gw.data_mut()[o * n_in..(o + 1) * n_in];
                        for (w, &x) in row.iter_mut().zip(&acts[i]) {
                            *w += go * x;
                        }
                    }
                    let mut gi = vec![T::zero(); n_in];
                    ops::linear_transpose_raw(l.weight.data(), &g_out, &mut gi);
                    gi
                }
                Layer::Relu => g_out
                    .iter()
                    .zip(&acts[i])
                    .map(|(&go, &z)| if z > T::zero() { go } else { T::zero() })
                    .collect(),
                Layer::Flatten => g_out,
                Layer::GlobalAvgPool => {
                    let plane = acts[i].len() / g_out.len();
                    let inv = T::one() / T::of(plane as f64);
                    g_out
                        .iter()
                        .flat_map(|&go| std::iter::repeat(go * inv).take(plane))
                        .collect()
                }
                Layer::AvgPool2d { kernel } => {
                    let mut gi = vec![T::zero(); acts[i].len()];
                    avg_pool_transpose_raw(&self.shapes[i], *kernel, &g_out, &mut gi);
                    gi
                }
                Layer::ResidualAdd { skip_from } => {
                    accumulate(&mut g[*skip_from], &g_out);
                    g_out
                }
            };
            accumulate(&mut g[i], &contrib);
        }
        g[0].take().unwrap_or_else(|| vec![T::zero(); self.input_len()])
    }
}

/// `k×k` mean pooling of a `C×H×W` input with stride `k`.
pub(crate) fn avg_pool_raw<T: Scalar>(shape: &[usize], k: usize, input: &[T], out: &mut [T]) {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::of((k * k) as f64);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..k {
                    let row = (ch * h + oy * k + dy) * w + ox * k;
                    for &v in &input[row..row + k] {
                        acc += v;
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
}

/// Adjoint of [`avg_pool_raw`].
pub(crate) fn avg_pool_transpose_raw<T: Scalar>(shape: &[usize], k: usize, grad_out: &[T], grad_in: &mut [T]) {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::of((k * k) as f64);
    grad_in.iter_mut().for_each(|v| *v = T::zero());
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(ch * oh + oy) * ow + ox] * inv;
                for dy in 0..k {
                    let row = (ch * h + oy * k + dy) * w + ox * k;
                    for v in &mut grad_in[row..row + k] {
                        *v += g;
                    }
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, v: &[T]) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.iter_mut().zip(v) {
                *a += b;
            }
        }
        None => *slot = Some(v.to_vec()),
    }
}

/// Cached activations from [`Network::forward_trace`].
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub(crate) acts: Vec<Vec<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn activation(&self, idx: usize) -> &[T] {
        &self.acts[idx]
    }

    pub fn logits(&self) -> &[T] {
        self.acts.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.acts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acts.is_empty()
    }
}

/// Per-layer `(dW, db)` (None for parameter-free layers) and `dL/dx`.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub layers: Vec<Option<(Tensor<T>, Tensor<T>)>>,
    pub input: Tensor<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| {
                    l.params()
                        .map(|(w, b)| (Tensor::zeros(w.shape().to_vec()), Tensor::zeros(b.shape().to_vec())))
                })
                .collect(),
            input: Tensor::zeros(net.input_shape().to_vec()),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some((aw, ab)), Some((bw, bb))) = (a, b) {
                aw.add_assign(bw);
                ab.add_assign(bb);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for (w, b) in self.layers.iter_mut().flatten() {
            w.scale(s);
            b.scale(s);
        }
    }

    /// Flattened in the same order as [`Network::param_tensors`].
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flatten().flat_map(|(w, b)| [w, b]).collect()
    }
}

/// He-uniform draw for a weight tensor with the given fan-in; biases start at zero.
pub fn he_uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
    Tensor::new(shape, data).unwrap()
}

/// Head that maps the residual block output to logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    GlobalAvgPool,
    /// `k×k` average pooling, then flatten.
    AvgPool(usize),
    Flatten,
}

/// Four-weight-layer residual network: conv stem, one two-conv residual
/// block with identity skip, and a linear classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ResNet4Config {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub channels: usize,
    pub stem_stride: usize,
    pub head: Head,
}

impl ResNet4Config {
    /// Desk-scale model: 16 channels, stride-2 stem, 4×4 average-pooling head.
    pub fn desk(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            input_shape,
            num_classes,
            channels: 16,
            stem_stride: 2,
            head: Head::AvgPool(4),
        }
    }

    pub fn build<R: Rng>(&self, rng: &mut R) -> Result<Network<f32>> {
        let c = self.channels;
        let in_c = self.input_shape[0];
        let conv = |rng: &mut R, cin: usize, stride: usize| {
            Layer::Conv2d(Conv2d {
                weight: he_uniform(rng, vec![c, cin, 3, 3], cin * 9),
                bias: Tensor::zeros(vec![c]),
                stride,
                padding: 1,
                prunable: true,
            })
        };
        let mut layers = vec![
            conv(rng, in_c, self.stem_stride),
            Layer::Relu,
            conv(rng, c, 1),
            Layer::Relu,
            conv(rng, c, 1),
            // Skip from the block input: the stem's ReLU output.
            Layer::ResidualAdd { skip_from: 2 },
            Layer::Relu,
        ];
        let probe = Network::new(self.input_shape, c, {
            let mut l = layers.clone();
            l.push(Layer::GlobalAvgPool);
            l.push(Layer::Flatten);
            l
        })
        .map_err(|e| Error::InvalidArgument(format!("resnet4 geometry: {e}")))?;
        let block_shape = probe.activation_shape(layers.len()).to_vec();
        let features = match self.head {
            Head::GlobalAvgPool => {
                layers.push(Layer::GlobalAvgPool);
                block_shape[0]
            }
            Head::AvgPool(k) => {
                layers.push(Layer::AvgPool2d { kernel: k });
                block_shape[0] * (block_shape[1] / k) * (block_shape[2] / k)
            }
            Head::Flatten => block_shape.iter().product(),
        };
        layers.push(Layer::Flatten);
        layers.push(Layer::Linear(Linear {
            weight: he_uniform(rng, vec![self.num_classes, features], features),
            bias: Tensor::zeros(vec![self.num_classes]),
        }));
        Network::new(self.input_shape, self.num_classes, layers)
    }
}
