//! Brute-force robustness ground truth for networks with at most two inputs.

use serde::{Deserialize, Serialize};

use super::property::RobustnessProperty;
use crate::error::{Error, Result};
use crate::net::{Layer, Network};

/// Largest grid the oracle will evaluate.
pub const MAX_GRID_POINTS: u64 = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleVerdict {
    Robust,
    Nonrobust,
    /// Too close to call at this tolerance.
    Marginal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub verdict: OracleVerdict,
    pub grid_min_margin: f64,
    /// Lipschitz bound of every margin in the L∞ norm.
    pub lipschitz: f64,
    pub spacing: f64,
    pub points: u64,
    pub witness: Option<Vec<f64>>,
}

/// L∞→L∞ Lipschitz bound of the logits, composed layer by layer; residual
/// adds sum their operands' bounds.
pub fn logit_lipschitz(net: &Network<f64>) -> f64 {
    let mut lip = vec![1.0];
    for (i, layer) in net.layers().iter().enumerate() {
        let norm = match layer {
            Layer::Linear(l) => {
                let n_in = l.weight.shape()[1];
                l.weight
                    .data()
                    .chunks(n_in)
                    .map(|row| row.iter().map(|w| w.abs()).sum::<f64>())
                    .fold(0.0, f64::max)
            }
            Layer::Conv2d(c) => {
                let per_out = c.weight.len() / c.weight.shape()[0];
                c.weight
                    .data()
                    .chunks(per_out)
                    .map(|k| k.iter().map(|w| w.abs()).sum::<f64>())
                    .fold(0.0, f64::max)
            }
            Layer::Relu | Layer::Flatten | Layer::GlobalAvgPool | Layer::AvgPool2d { .. } => 1.0,
            Layer::ResidualAdd { skip_from } => {
                lip.push(lip[i] + lip[*skip_from]);
                continue;
            }
        };
        lip.push(norm * lip[i]);
    }
    *lip.last().unwrap()
}

/// Grid evaluation with spacing at most `tolerance / L`, where `L` bounds
/// the margin's Lipschitz constant.
pub fn exact_oracle(net: &Network<f64>, prop: &RobustnessProperty, tolerance: f64) -> Result<OracleResult> {
    let lip = 2.0 * logit_lipschitz(net);
    let h = if lip > 0.0 { tolerance / lip } else { f64::INFINITY };
    exact_oracle_with_spacing(net, prop, tolerance, h)
}

/// As [`exact_oracle`] with an explicit spacing `h ≤ tolerance / L`.
pub fn exact_oracle_with_spacing(net: &Network<f64>, prop: &RobustnessProperty, tolerance: f64, h: f64) -> Result<OracleResult> {
    prop.check(net)?;
    let dim = net.input_len();
    if dim > 2 {
        return Err(Error::InvalidArgument(format!(
            "exact oracle needs at most 2 inputs, network takes {dim}"
        )));
    }
    if !(tolerance > 0.0) {
        return Err(Error::InvalidArgument("oracle tolerance must be positive".into()));
    }
    let lip = 2.0 * logit_lipschitz(net);
    if !(h > 0.0) || h * lip > tolerance * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "spacing {h} exceeds tolerance/L = {}",
            tolerance / lip
        )));
    }
    let bx = &prop.input_box;
    let axes: Vec<Vec<f64>> = (0..dim)
        .map(|d| {
            let (l, u) = (bx.lower[d], bx.upper[d]);
            let steps = if u > l { ((u - l) / h).ceil().max(1.0) as u64 } else { 0 };
            (0..=steps)
                .map(|k| if k == steps { u } else { l + (u - l) * k as f64 / steps as f64 })
                .collect()
        })
        .collect();
    let points = axes.iter().map(|a| a.len() as u64).product::<u64>();
    if points > MAX_GRID_POINTS {
        return Err(Error::InvalidArgument(format!(
            "oracle grid of {points} points exceeds {MAX_GRID_POINTS}"
        )));
    }
    let c = prop.label;
    let mut min_margin = f64::INFINITY;
    let mut witness = None;
    let mut x = vec![0.0; dim];
    for flat in 0..points {
        let mut rest = flat;
        for (d, axis) in axes.iter().enumerate() {
            x[d] = axis[(rest % axis.len() as u64) as usize];
            rest /= axis.len() as u64;
        }
        let z = net.logits(&x);
        if crate::tensor::argmax(&z) != c {
            witness.get_or_insert_with(|| x.clone());
        }
        let margin = z
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != c)
            .map(|(_, v)| z[c] - v)
            .fold(f64::INFINITY, f64::min);
        min_margin = min_margin.min(margin);
    }
    let verdict = if witness.is_some() {
        OracleVerdict::Nonrobust
    } else if min_margin > tolerance {
        OracleVerdict::Robust
    } else {
        OracleVerdict::Marginal
    };
    Ok(OracleResult {
        verdict,
        grid_min_margin: min_margin,
        lipschitz: lip,
        spacing: h,
        points,
        witness,
    })
}
