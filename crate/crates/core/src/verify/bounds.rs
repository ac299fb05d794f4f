//! Interval bound propagation and the backward linear relaxation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::property::{InputBox, RobustnessProperty};
use crate::error::{Error, Result};
use crate::net::{avg_pool_raw, avg_pool_transpose_raw, Layer, Network};
use crate::ops;

/// Relative widening applied around every affine map, standing in for
/// directed rounding.
const INFLATE: f64 = 1e-12;

/// A ReLU unit: `layer` is the index of the ReLU layer, `index` the flat
/// position in its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Pre-activation `≥ 0`.
    Active,
    /// Pre-activation `≤ 0`.
    Inactive,
}

pub type SplitSet = BTreeMap<NeuronId, Phase>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stability {
    Active,
    Inactive,
    Unstable,
}

/// Interval bounds for every activation; entry 0 is the input box and entry
/// `i` is the pre-activation of layer `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundsCache {
    lower: Vec<Vec<f64>>,
    upper: Vec<Vec<f64>>,
}

impl BoundsCache {
    pub fn activation(&self, idx: usize) -> (&[f64], &[f64]) {
        (&self.lower[idx], &self.upper[idx])
    }

    pub fn num_activations(&self) -> usize {
        self.lower.len()
    }

    pub fn input_box(&self) -> InputBox {
        InputBox {
            lower: self.lower[0].clone(),
            upper: self.upper[0].clone(),
        }
    }

    pub fn logits(&self) -> (&[f64], &[f64]) {
        self.activation(self.lower.len() - 1)
    }

    pub fn stability(&self, n: NeuronId) -> Stability {
        let (l, u) = (self.lower[n.layer][n.index], self.upper[n.layer][n.index]);
        if l >= 0.0 {
            Stability::Active
        } else if u <= 0.0 {
            Stability::Inactive
        } else {
            Stability::Unstable
        }
    }

    /// Unstable ReLU units in `(layer, index)` order.
    pub fn unstable(&self, net: &Network<f64>) -> Vec<NeuronId> {
        relu_layers(net)
            .flat_map(|layer| {
                let (l, u) = self.activation(layer);
                (0..l.len())
                    .filter(move |&k| l[k] < 0.0 && u[k] > 0.0)
                    .map(move |index| NeuronId { layer, index })
            })
            .collect()
    }
}

pub(crate) fn relu_layers(net: &Network<f64>) -> impl Iterator<Item = usize> + '_ {
    net.layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Relu))
        .map(|(i, _)| i)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Propagation {
    Bounds(BoundsCache),
    /// Some constrained unit's interval became empty: no input satisfies the
    /// split constraints.
    Infeasible(NeuronId),
}

fn check_splits(net: &Network<f64>, splits: &SplitSet) -> Result<()> {
    for n in splits.keys() {
        let ok = matches!(net.layers().get(n.layer), Some(Layer::Relu)) && n.index < net.activation_len(n.layer);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "split on {n:?} does not name a ReLU unit"
            )));
        }
    }
    Ok(())
}

/// Center-radius propagation through `y = W·x + b`, widened by [`INFLATE`].
fn affine_interval(
    lower: &[f64],
    upper: &[f64],
    n_out: usize,
    apply: impl Fn(&[f64], bool, &mut [f64]),
) -> (Vec<f64>, Vec<f64>) {
    let center: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)).collect();
    let radius: Vec<f64> = lower
        .iter()
        .zip(upper)
        .zip(&center)
        .map(|((l, u), c)| 0.5 * (u - l) + INFLATE * c.abs())
        .collect();
    let mut oc = vec![0.0; n_out];
    let mut or = vec![0.0; n_out];
    apply(&center, false, &mut oc);
    apply(&radius, true, &mut or);
    let lo = oc.iter().zip(&or).map(|(c, r)| c - r - INFLATE * c.abs()).collect();
    let hi = oc.iter().zip(&or).map(|(c, r)| c + r + INFLATE * c.abs()).collect();
    (lo, hi)
}

fn abs_all(v: &[f64]) -> Vec<f64> {
    v.iter().map(|w| w.abs()).collect()
}

/// Interval bounds for every activation over `bx`, with split units
/// intersected with their phase.
pub fn ibp_bounds(net: &Network<f64>, bx: &InputBox, splits: &SplitSet) -> Result<Propagation> {
    if bx.len() != net.input_len() {
        return Err(Error::Shape(format!(
            "box has {} entries, network takes {}",
            bx.len(),
            net.input_len()
        )));
    }
    check_splits(net, splits)?;
    let mut lower = vec![bx.lower.clone()];
    let mut upper = vec![bx.upper.clone()];
    for (i, layer) in net.layers().iter().enumerate() {
        let n_out = net.activation_len(i + 1);
        let (lo, hi) = match layer {
            Layer::Conv2d(c) => {
                let g = net.conv_geometry(i);
                let abs_w = abs_all(c.weight.data());
                affine_interval(&lower[i], &upper[i], n_out, |x, radius, out| {
                    if radius {
                        ops::conv2d_raw(g, x, &abs_w, None, out)
                    } else {
                        ops::conv2d_raw(g, x, c.weight.data(), Some(c.bias.data()), out)
                    }
                })
            }
            Layer::Linear(l) => {
                let abs_w = abs_all(l.weight.data());
                affine_interval(&lower[i], &upper[i], n_out, |x, radius, out| {
                    if radius {
                        ops::linear_raw(&abs_w, None, x, out)
                    } else {
                        ops::linear_raw(l.weight.data(), Some(l.bias.data()), x, out)
                    }
                })
            }
            Layer::Relu => {
                for (n, phase) in splits.range(NeuronId { layer: i, index: 0 }..=NeuronId { layer: i, index: usize::MAX }) {
                    let (l, u) = (&mut lower[i][n.index], &mut upper[i][n.index]);
                    match phase {
                        Phase::Active => *l = l.max(0.0),
                        Phase::Inactive => *u = u.min(0.0),
                    }
                    if *l > *u {
                        return Ok(Propagation::Infeasible(*n));
                    }
                }
                (
                    lower[i].iter().map(|v| v.max(0.0)).collect(),
                    upper[i].iter().map(|v| v.max(0.0)).collect(),
                )
            }
            Layer::Flatten => (lower[i].clone(), upper[i].clone()),
            Layer::GlobalAvgPool => {
                let c = net.activation_shape(i)[0];
                let plane = lower[i].len() / c;
                let mean = |v: &[f64]| -> Vec<f64> {
                    v.chunks(plane).map(|ch| ch.iter().sum::<f64>() / plane as f64).collect()
                };
                (mean(&lower[i]), mean(&upper[i]))
            }
            Layer::AvgPool2d { kernel } => {
                let shape = net.activation_shape(i);
                let mut lo = vec![0.0; n_out];
                let mut hi = vec![0.0; n_out];
                avg_pool_raw(shape, *kernel, &lower[i], &mut lo);
                avg_pool_raw(shape, *kernel, &upper[i], &mut hi);
                (lo, hi)
            }
            Layer::ResidualAdd { skip_from } => {
                let add = |a: &[f64], b: &[f64], sign: f64| -> Vec<f64> {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| {
                            let s = x + y;
                            s + sign * INFLATE * s.abs()
                        })
                        .collect()
                };
                (
                    add(&lower[i], &lower[*skip_from], -1.0),
                    add(&upper[i], &upper[*skip_from], 1.0),
                )
            }
        };
        lower.push(lo);
        upper.push(hi);
    }
    Ok(Propagation::Bounds(BoundsCache { lower, upper }))
}

/// Linear lower bounds on the margins `z_label − z_j` over the cached box.
#[derive(Clone, Debug, PartialEq)]
pub struct CrownBounds {
    pub classes: Vec<usize>,
    pub lower: Vec<f64>,
    /// Box vertex minimizing the worst class's linear lower bound.
    pub minimizer: Vec<f64>,
}

impl CrownBounds {
    pub fn min(&self) -> f64 {
        self.lower.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Class with the lowest bound, lowest index on ties.
    pub fn worst_class(&self) -> usize {
        let k = crate::tensor::argmax(&self.lower.iter().map(|v| -v).collect::<Vec<_>>());
        self.classes[k]
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, v: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
        None => *slot = Some(v),
    }
}

/// Pushes `rows` linear functions of the logits back to the input, relaxing
/// unstable ReLUs. Returns input coefficients (`rows × n_in`) and constants.
fn backward_lower(net: &Network<f64>, cache: &BoundsCache, rows: usize, init: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = net.layers().len();
    let mut coef: Vec<Option<Vec<f64>>> = vec![None; n + 1];
    coef[n] = Some(init);
    let mut konst = vec![0.0; rows];
    for i in (0..n).rev() {
        let Some(a) = coef[i + 1].take() else {
            continue;
        };
        let n_in = net.activation_len(i);
        let n_out = net.activation_len(i + 1);
        let per_row = |f: &dyn Fn(&[f64], &mut [f64])| -> Vec<f64> {
            let mut out = vec![0.0; rows * n_in];
            for (src, dst) in a.chunks(n_out).zip(out.chunks_mut(n_in)) {
                if src.iter().any(|&v| v != 0.0) {
                    f(src, dst);
                }
            }
            out
        };
        let contrib = match &net.layers()[i] {
            Layer::Conv2d(c) => {
                let g = net.conv_geometry(i);
                let plane = g.out_h * g.out_w;
                for (k, src) in konst.iter_mut().zip(a.chunks(n_out)) {
                    for (b, ch) in c.bias.data().iter().zip(src.chunks(plane)) {
                        *k += b * ch.iter().sum::<f64>();
                    }
                }
                per_row(&|src, dst| ops::conv2d_transpose_raw(g, src, c.weight.data(), dst))
            }
            Layer::Linear(l) => {
                for (k, src) in konst.iter_mut().zip(a.chunks(n_out)) {
                    *k += src.iter().zip(l.bias.data()).map(|(x, y)| x * y).sum::<f64>();
                }
                per_row(&|src, dst| ops::linear_transpose_raw(l.weight.data(), src, dst))
            }
            Layer::Relu => {
                let (lo, up) = cache.activation(i);
                let mut out = a;
                for (k, row) in konst.iter_mut().zip(out.chunks_mut(n_in)) {
                    for ((c, &l), &u) in row.iter_mut().zip(lo).zip(up) {
                        if u <= 0.0 {
                            *c = 0.0;
                        } else if l < 0.0 && *c > 0.0 {
                            // Lower line α·z.
                            if u < -l {
                                *c = 0.0;
                            }
                        } else if l < 0.0 && *c < 0.0 {
                            // Upper line u·(z − l)/(u − l).
                            let s = u / (u - l);
                            *k -= *c * s * l;
                            *c *= s;
                        }
                    }
                }
                out
            }
            Layer::Flatten => a,
            Layer::GlobalAvgPool => {
                let plane = n_in / n_out;
                let inv = 1.0 / plane as f64;
                a.iter()
                    .flat_map(|&v| std::iter::repeat(v * inv).take(plane))
                    .collect()
            }
            Layer::AvgPool2d { kernel } => {
                let shape = net.activation_shape(i);
                per_row(&|src, dst| avg_pool_transpose_raw(shape, *kernel, src, dst))
            }
            Layer::ResidualAdd { skip_from } => {
                accumulate(&mut coef[*skip_from], a.clone());
                a
            }
        };
        accumulate(&mut coef[i], contrib);
    }
    let n_in = net.input_len();
    (coef[0].take().unwrap_or_else(|| vec![0.0; rows * n_in]), konst)
}

/// Sound lower bound on `z_label − z_j` for every `j ≠ label`, concretized
/// over the box stored in `cache` (which already carries the split
/// constraints).
pub fn crown_margin_bounds(net: &Network<f64>, prop: &RobustnessProperty, cache: &BoundsCache) -> Result<CrownBounds> {
    prop.check(net)?;
    if cache.num_activations() != net.layers().len() + 1 || cache.lower[0].len() != net.input_len() {
        return Err(Error::Shape("bounds cache does not belong to this network".into()));
    }
    let nc = net.num_classes();
    let classes: Vec<usize> = (0..nc).filter(|&j| j != prop.label).collect();
    let rows = classes.len();
    let mut init = vec![0.0; rows * nc];
    for (r, &j) in classes.iter().enumerate() {
        init[r * nc + prop.label] = 1.0;
        init[r * nc + j] = -1.0;
    }
    let (coef, konst) = backward_lower(net, cache, rows, init);
    let (bl, bu) = cache.activation(0);
    let n_in = net.input_len();
    let lower: Vec<f64> = coef
        .chunks(n_in)
        .zip(&konst)
        .map(|(row, k)| {
            let mut acc = *k;
            for ((a, l), u) in row.iter().zip(bl).zip(bu) {
                let (mid, rad) = (0.5 * (l + u), 0.5 * (u - l));
                acc += a * mid - a.abs() * rad;
            }
            acc
        })
        .collect();
    let worst = crate::tensor::argmax(&lower.iter().map(|v| -v).collect::<Vec<_>>());
    let minimizer = coef[worst * n_in..(worst + 1) * n_in]
        .iter()
        .zip(bl.iter().zip(bu))
        .map(|(a, (l, u))| if *a >= 0.0 { *l } else { *u })
        .collect();
    Ok(CrownBounds {
        classes,
        lower,
        minimizer,
    })
}
