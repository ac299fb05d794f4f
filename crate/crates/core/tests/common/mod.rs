#![allow(dead_code)]

use pcv_core::net::{Conv2d, Head, Layer, Linear, Network, ResNet4Config};
use pcv_core::verify::{InputBox, RobustnessProperty};
use pcv_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn linear(rng: &mut ChaCha8Rng, out: usize, n_in: usize) -> Layer<f64> {
    Layer::Linear(Linear {
        weight: uniform(rng, vec![out, n_in], 1.5 / (n_in as f64).sqrt()),
        bias: uniform(rng, vec![out], 0.5),
    })
}

/// Fully connected ReLU net on a `1×1×dim` input with at most `budget`
/// hidden units; optionally with a residual block.
pub fn tiny_mlp(rng: &mut ChaCha8Rng, dim: usize, classes: usize, budget: usize) -> Network<f64> {
    let residual = rng.gen_bool(0.4) && budget >= 4;
    let mut layers = vec![Layer::Flatten];
    let width;
    if residual {
        // act 0 input, 1 flat, 2 pre, 3 relu, 4 pre, 5 relu, 6 pre, 7 sum, 8 relu
        width = rng.gen_range(1..=budget / 3);
        layers.push(linear(rng, width, dim));
        layers.push(Layer::Relu);
        layers.push(linear(rng, width, width));
        layers.push(Layer::Relu);
        layers.push(linear(rng, width, width));
        layers.push(Layer::ResidualAdd { skip_from: 3 });
        layers.push(Layer::Relu);
    } else {
        let h1 = rng.gen_range(2..=budget.min(6));
        let h2 = if budget > h1 + 1 && rng.gen_bool(0.5) {
            rng.gen_range(1..=budget - h1)
        } else {
            0
        };
        layers.push(linear(rng, h1, dim));
        layers.push(Layer::Relu);
        width = if h2 > 0 {
            layers.push(linear(rng, h2, h1));
            layers.push(Layer::Relu);
            h2
        } else {
            h1
        };
    }
    layers.push(linear(rng, classes, width));
    Network::new([1, 1, dim], classes, layers).unwrap()
}

/// Small conv ResNet4 with random biases and a random head.
pub fn tiny_resnet(rng: &mut ChaCha8Rng) -> Network<f64> {
    let side = rng.gen_range(4..=6);
    let in_c = rng.gen_range(1..=2);
    let head = match rng.gen_range(0..3) {
        0 => Head::GlobalAvgPool,
        1 => Head::AvgPool(2),
        _ => Head::Flatten,
    };
    let cfg = ResNet4Config {
        input_shape: [in_c, side, side],
        num_classes: rng.gen_range(2..=4),
        channels: rng.gen_range(2..=3),
        stem_stride: rng.gen_range(1..=2),
        head,
    };
    let net = cfg.build(rng).unwrap().cast::<f64>();
    let layers = net
        .layers()
        .iter()
        .map(|l| match l {
            Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                bias: uniform(rng, c.bias.shape().to_vec(), 0.3),
                ..c.clone()
            }),
            Layer::Linear(lin) => Layer::Linear(Linear {
                bias: uniform(rng, lin.bias.shape().to_vec(), 0.3),
                ..lin.clone()
            }),
            other => other.clone(),
        })
        .collect();
    Network::new(net.input_shape(), net.num_classes(), layers).unwrap()
}

/// Box of radius `eps` around a random anchor in `[0,1]^n`, labelled with
/// the network's own prediction.
pub fn random_property(rng: &mut ChaCha8Rng, net: &Network<f64>, eps: f64) -> RobustnessProperty {
    let n = net.input_len();
    let anchor: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let lower = anchor.iter().map(|a| (a - eps).max(0.0)).collect();
    let upper = anchor.iter().map(|a| (a + eps).min(1.0)).collect();
    let label = net.predict(&anchor);
    RobustnessProperty::with_box(anchor, label, InputBox::new(lower, upper).unwrap()).unwrap()
}

pub fn sample_box(rng: &mut ChaCha8Rng, bx: &InputBox) -> Vec<f64> {
    bx.lower
        .iter()
        .zip(&bx.upper)
        .map(|(&l, &u)| if u > l { rng.gen_range(l..=u) } else { l })
        .collect()
}

/// `min_{j≠c} z_c − z_j`.
pub fn true_margin(net: &Network<f64>, x: &[f64], c: usize) -> f64 {
    let z = net.logits(x);
    z.iter()
        .enumerate()
        .filter(|&(j, _)| j != c)
        .map(|(_, v)| z[c] - v)
        .fold(f64::INFINITY, f64::min)
}

/// Weights and biases perturbed in place, one scalar at a time.
fn with_param(net: &Network<f64>, layer: usize, bias: bool, idx: usize, delta: f64) -> Network<f64> {
    let mut layers = net.layers().to_vec();
    let t = match &mut layers[layer] {
        Layer::Conv2d(c) => if bias { &mut c.bias } else { &mut c.weight },
        Layer::Linear(l) => if bias { &mut l.bias } else { &mut l.weight },
        _ => unreachable!(),
    };
    t.data_mut()[idx] += delta;
    Network::new(net.input_shape(), net.num_classes(), layers).unwrap()
}

fn ce_loss(net: &Network<f64>, x: &[f64], label: usize) -> f64 {
    pcv_core::train::cross_entropy(&net.logits(x), label).unwrap().0
}

/// Input whose pre-activations all sit at least `gap` away from a ReLU kink.
fn kink_free_input(rng: &mut ChaCha8Rng, net: &Network<f64>, gap: f64) -> Option<Vec<f64>> {
    for _ in 0..200 {
        let x: Vec<f64> = (0..net.input_len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let trace = net.forward_trace_raw(&x);
        let clear = net
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Relu))
            .all(|(i, _)| trace.activation(i).iter().all(|z| z.abs() >= gap));
        if clear {
            return Some(x);
        }
    }
    None
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between analytic cross-entropy gradients and
/// central differences with step `h`, over every parameter and input
/// coordinate. `None` if no kink-free input was found.
pub fn fd_max_rel_error(rng: &mut ChaCha8Rng, net: &Network<f64>, h: f64) -> Option<f64> {
    let x = kink_free_input(rng, net, 1e-3)?;
    let label = rng.gen_range(0..net.num_classes());
    let trace = net.forward_trace_raw(&x);
    let (_, g) = pcv_core::train::cross_entropy(trace.logits(), label).unwrap();
    let grads = net.backward(&trace, &Tensor::from_vec(g)).unwrap();
    let mut worst: f64 = 0.0;
    for (li, layer) in net.layers().iter().enumerate() {
        let Some((w, b)) = layer.params() else { continue };
        let (gw, gb) = grads.layers[li].as_ref().unwrap();
        for (bias, len, analytic) in [(false, w.len(), gw), (true, b.len(), gb)] {
            for i in 0..len {
                let up = ce_loss(&with_param(net, li, bias, i, h), &x, label);
                let down = ce_loss(&with_param(net, li, bias, i, -h), &x, label);
                worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * h)));
            }
        }
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let num = (ce_loss(net, &xp, label) - ce_loss(net, &xm, label)) / (2.0 * h);
        worst = worst.max(rel_err(grads.input.data()[i], num));
    }
    Some(worst)
}

/// Every violated pruning invariant across `ratios` (ascending), as text.
pub fn prune_violations(net: &Network<f32>, ratios: &[f64]) -> Vec<String> {
    use pcv_core::prune::{apply_prune, compute_plan};
    use std::collections::BTreeSet;
    let mut out = Vec::new();
    let mut prev: Option<BTreeSet<(usize, usize)>> = None;
    for &r in ratios {
        let plan = compute_plan(net, r).unwrap();
        let pruned = apply_prune(net, &plan).unwrap();
        let mut m = 0;
        let mut zeros = 0;
        let mut kept_min = f32::INFINITY;
        let mut pruned_max = 0.0f32;
        let mut set = BTreeSet::new();
        for (li, (before, after)) in net.layers().iter().zip(pruned.layers()).enumerate() {
            match (before, after) {
                (Layer::Conv2d(a), Layer::Conv2d(b)) if a.prunable => {
                    let mask = &pruned.masks()[&li];
                    m += a.weight.len();
                    for (i, (&w0, &w1)) in a.weight.data().iter().zip(b.weight.data()).enumerate() {
                        if w1 == 0.0 {
                            zeros += 1;
                        }
                        if mask.is_pruned(i) {
                            set.insert((li, i));
                            pruned_max = pruned_max.max(w0.abs());
                            if w1 != 0.0 {
                                out.push(format!("ratio {r}: masked weight {li}/{i} is {w1}"));
                            }
                        } else {
                            kept_min = kept_min.min(w0.abs());
                            if w1.to_bits() != w0.to_bits() {
                                out.push(format!("ratio {r}: kept weight {li}/{i} changed"));
                            }
                        }
                    }
                    if a.bias != b.bias {
                        out.push(format!("ratio {r}: bias of layer {li} changed"));
                    }
                }
                (a, b) => {
                    if a != b {
                        out.push(format!("ratio {r}: {} layer {li} not bit-identical", a.kind()));
                    }
                }
            }
        }
        let frac = zeros as f64 / m as f64;
        if frac < r || frac > r + 1.0 / m as f64 + 1e-12 {
            out.push(format!("ratio {r}: zero fraction {frac} outside [{r}, {r} + 1/{m}]"));
        }
        let k = set.len();
        if (k as f64) < r * m as f64 - 1e-9 || (k > 0 && ((k - 1) as f64 / m as f64) >= r) {
            out.push(format!("ratio {r}: {k} pruned of {m} is not the least count covering the ratio"));
        }
        if !set.is_empty() && kept_min < pruned_max {
            out.push(format!("ratio {r}: kept min {kept_min} below pruned max {pruned_max}"));
        }
        if let Some(p) = &prev {
            if !p.is_subset(&set) {
                out.push(format!("ratio {r}: pruned set does not contain the previous ratio's"));
            }
        }
        prev = Some(set);
    }
    out
}

/// Scalar AdamW written out longhand, for comparison against the library.
pub struct ScalarAdamW {
    pub w: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdamW {
    pub fn new(w: f64) -> Self {
        Self { w, m: 0.0, v: 0.0, t: 0 }
    }

    pub fn step(&mut self, g: f64, lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) {
        self.t += 1;
        self.w -= lr * wd * self.w;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mh = self.m / (1.0 - b1.powi(self.t));
        let vh = self.v / (1.0 - b2.powi(self.t));
        self.w -= lr * mh / (vh.sqrt() + eps);
    }
}
