//! Global unstructured magnitude pruning over the prunable conv layers.
//!
//! One cut is taken across every prunable layer at once: the `k`
//! smallest-magnitude weights are masked to zero, where `k` is the least
//! count with `k/M ≥ ratio` (M = total prunable weights), so the pruned
//! fraction lies in `[ratio, ratio + 1/M)`. Equal magnitudes are ordered by `(layer index, flat weight index)`
//! ascending, so plans nest: the set pruned at a lower ratio is always a
//! subset of the set pruned at a higher one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{Layer, Mask, Network};
use crate::train::{evaluate_accuracy, train, StopReason, TrainConfig, TrainResult};

pub const TIE_POLICY: &str = "magnitude, then layer index, then flat weight index, ascending";

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    pub layer: usize,
    pub weight_count: usize,
    /// Flat weight indices to mask, ascending.
    pub pruned: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrunePlan {
    pub ratio: f64,
    /// Largest pruned magnitude (0 for an empty plan).
    pub threshold: f32,
    pub total_prunable: usize,
    pub layers: Vec<LayerPlan>,
}

/// Audit record of a plan, without the index lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub ratio: f64,
    pub threshold: f32,
    pub total_prunable: usize,
    pub total_pruned: usize,
    pub per_layer: BTreeMap<usize, usize>,
    pub tie_policy: String,
}

impl PrunePlan {
    pub fn pruned_count(&self) -> usize {
        self.layers.iter().map(|l| l.pruned.len()).sum()
    }

    pub fn summary(&self) -> PlanSummary {
        PlanSummary {
            ratio: self.ratio,
            threshold: self.threshold,
            total_prunable: self.total_prunable,
            total_pruned: self.pruned_count(),
            per_layer: self.layers.iter().map(|l| (l.layer, l.pruned.len())).collect(),
            tie_policy: TIE_POLICY.to_string(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary())?)
    }
}

fn prunable_weights(net: &Network<f32>) -> Vec<(usize, &[f32])> {
    net.layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Layer::Conv2d(c) if c.prunable => Some((i, c.weight.data())),
            _ => None,
        })
        .collect()
}

/// Least `k` with `k/m ≥ ratio`.
pub fn prune_count(ratio: f64, m: usize) -> usize {
    let mut k = ((ratio * m as f64).ceil() as usize).min(m);
    while k > 0 && (k - 1) as f64 / m as f64 >= ratio {
        k -= 1;
    }
    while k < m && (k as f64 / m as f64) < ratio {
        k += 1;
    }
    k
}

pub fn compute_plan(net: &Network<f32>, ratio: f64) -> Result<PrunePlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("prune ratio {ratio} outside [0, 1)")));
    }
    let prunable = prunable_weights(net);
    if prunable.is_empty() {
        return Err(Error::InvalidArgument("network has no prunable layers".into()));
    }
    let mut all: Vec<(f32, usize, usize)> = prunable
        .iter()
        .flat_map(|&(layer, w)| w.iter().enumerate().map(move |(i, v)| (v.abs(), layer, i)))
        .collect();
    let total = all.len();
    let k = prune_count(ratio, total);
    all.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let threshold = if k == 0 { 0.0 } else { all[k - 1].0 };
    let mut layers: Vec<LayerPlan> = prunable
        .iter()
        .map(|&(layer, w)| LayerPlan {
            layer,
            weight_count: w.len(),
            pruned: Vec::new(),
        })
        .collect();
    for &(_, layer, idx) in &all[..k] {
        let lp = layers.iter_mut().find(|l| l.layer == layer).unwrap();
        lp.pruned.push(idx);
    }
    for lp in &mut layers {
        lp.pruned.sort_unstable();
    }
    Ok(PrunePlan {
        ratio,
        threshold,
        total_prunable: total,
        layers,
    })
}

/// Masks and zeroes the planned weights; every other tensor is left as is.
/// Weights already masked stay masked.
pub fn apply_prune(net: &Network<f32>, plan: &PrunePlan) -> Result<Network<f32>> {
    let prunable = prunable_weights(net);
    if prunable.len() != plan.layers.len()
        || prunable
            .iter()
            .zip(&plan.layers)
            .any(|(&(layer, w), lp)| layer != lp.layer || w.len() != lp.weight_count)
    {
        return Err(Error::Shape("prune plan was computed for a different network".into()));
    }
    let mut masks: BTreeMap<usize, Mask> = net.masks().clone();
    for lp in &plan.layers {
        let mask = masks.get_mut(&lp.layer).unwrap();
        for &idx in &lp.pruned {
            if idx >= lp.weight_count {
                return Err(Error::Shape(format!(
                    "plan index {idx} beyond {} weights of layer {}",
                    lp.weight_count, lp.layer
                )));
            }
            mask.prune(idx);
        }
    }
    let mut out = net.clone();
    out.set_masks(masks)?;
    Ok(out)
}

/// Prune at `ratio`, then retrain with the same config and masks held fixed
/// until the accuracy threshold is met again. A pruned model that already
/// meets the threshold is returned without retraining.
pub fn prune_and_finetune(
    net: &Network<f32>,
    train_ds: &Dataset,
    test_ds: &Dataset,
    ratio: f64,
    cfg: &TrainConfig,
) -> Result<(PrunePlan, TrainResult)> {
    let plan = compute_plan(net, ratio)?;
    let pruned = apply_prune(net, &plan)?;
    let accuracy = evaluate_accuracy(&pruned, test_ds)?;
    if accuracy >= cfg.accuracy_threshold {
        return Ok((
            plan,
            TrainResult {
                network: pruned,
                epochs_run: 0,
                history: Vec::new(),
                stop_reason: StopReason::ThresholdReached,
                final_accuracy: accuracy,
            },
        ));
    }
    let result = train(pruned, train_ds, test_ds, cfg, true)?;
    Ok((plan, result))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: usize,
    pub kind: String,
    pub prunable: bool,
    pub weights: usize,
    pub zeros: usize,
}

/// Zero fractions over weight tensors (biases excluded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
    pub prunable_zero_fraction: f64,
    pub overall_zero_fraction: f64,
    /// Share of all weights that sit in conv layers.
    pub conv_share: f64,
}

pub fn sparsity_report(net: &Network<f32>) -> SparsityReport {
    let layers: Vec<LayerSparsity> = net
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            l.params().map(|(w, _)| LayerSparsity {
                layer: i,
                kind: l.kind().to_string(),
                prunable: l.is_prunable(),
                weights: w.len(),
                zeros: w.data().iter().filter(|v| **v == 0.0).count(),
            })
        })
        .collect();
    let frac = |f: &dyn Fn(&LayerSparsity) -> bool| {
        let (z, n) = layers
            .iter()
            .filter(|l| f(l))
            .fold((0, 0), |(z, n), l| (z + l.zeros, n + l.weights));
        if n == 0 {
            0.0
        } else {
            z as f64 / n as f64
        }
    };
    let total: usize = layers.iter().map(|l| l.weights).sum();
    let conv: usize = layers.iter().filter(|l| l.kind == "conv2d").map(|l| l.weights).sum();
    SparsityReport {
        prunable_zero_fraction: frac(&|l| l.prunable),
        overall_zero_fraction: frac(&|_| true),
        conv_share: if total == 0 { 0.0 } else { conv as f64 / total as f64 },
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Conv2d, Linear};
    use crate::tensor::Tensor;

    fn net_with(conv_a: Vec<f32>, conv_b: Vec<f32>) -> Network<f32> {
        let conv = |w: Vec<f32>| {
            let n = w.len();
            Layer::Conv2d(Conv2d {
                weight: Tensor::new(vec![1, 1, 1, n], w).unwrap(),
                bias: Tensor::zeros(vec![1]),
                stride: 1,
                padding: 0,
                prunable: true,
            })
        };
        let (na, nb) = (conv_a.len(), conv_b.len());
        // Input 1×1×W, each conv shrinks width by (n - 1).
        let width = na + nb - 1;
        let out_w = width - (na - 1) - (nb - 1);
        Network::new(
            [1, 1, width],
            2,
            vec![
                conv(conv_a),
                conv(conv_b),
                Layer::Flatten,
                Layer::Linear(Linear {
                    weight: Tensor::new(vec![2, out_w], vec![0.01; 2 * out_w]).unwrap(),
                    bias: Tensor::zeros(vec![2]),
                }),
            ],
        )
        .unwrap()
    }

    #[test]
    fn prunes_smallest_magnitudes() {
        let net = net_with(vec![0.3, -0.1], vec![0.4, -0.2]);
        let plan = compute_plan(&net, 0.5).unwrap();
        assert_eq!(plan.pruned_count(), 2);
        assert_eq!(plan.layers[0].pruned, vec![1]);
        assert_eq!(plan.layers[1].pruned, vec![1]);
        assert_eq!(plan.threshold, 0.2);
        let pruned = apply_prune(&net, &plan).unwrap();
        let Layer::Conv2d(c) = &pruned.layers()[0] else { panic!() };
        assert_eq!(c.weight.data(), &[0.3, 0.0]);
    }

    #[test]
    fn count_is_the_least_covering_k() {
        assert_eq!(prune_count(0.1, 189), 19);
        assert_eq!(prune_count(0.3, 10), 3);
        assert_eq!(prune_count(0.0, 10), 0);
        assert_eq!(prune_count(0.99, 10), 10);
        for m in 1..200 {
            for r in [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8] {
                let k = prune_count(r, m);
                assert!(k as f64 / m as f64 >= r);
                assert!(k == 0 || ((k - 1) as f64 / m as f64) < r);
            }
        }
    }

    #[test]
    fn zero_ratio_is_empty() {
        let net = net_with(vec![0.3, -0.1], vec![0.4, -0.2]);
        let plan = compute_plan(&net, 0.0).unwrap();
        assert_eq!(plan.pruned_count(), 0);
        let pruned = apply_prune(&net, &plan).unwrap();
        assert!(pruned.masks().values().all(|m| m.pruned_count() == 0));
        assert_eq!(pruned, net);
    }

    #[test]
    fn ties_break_by_layer_then_index() {
        let net = net_with(vec![0.5; 4], vec![-0.5; 6]);
        let plan = compute_plan(&net, 0.3).unwrap();
        assert_eq!(plan.pruned_count(), 3);
        assert_eq!(plan.layers[0].pruned, vec![0, 1, 2]);
        assert!(plan.layers[1].pruned.is_empty());
        let plan = compute_plan(&net, 0.5).unwrap();
        assert_eq!(plan.layers[0].pruned, vec![0, 1, 2, 3]);
        assert_eq!(plan.layers[1].pruned, vec![0]);
    }

    #[test]
    fn rejects_bad_ratio_and_foreign_plan() {
        let net = net_with(vec![0.3, -0.1], vec![0.4, -0.2]);
        assert!(compute_plan(&net, 1.0).is_err());
        assert!(compute_plan(&net, -0.1).is_err());
        let other = net_with(vec![0.3, -0.1, 0.2], vec![0.4]);
        let plan = compute_plan(&other, 0.5).unwrap();
        assert!(apply_prune(&net, &plan).is_err());
    }

    #[test]
    fn linear_layer_untouched_and_report() {
        let net = net_with(vec![0.3, -0.1, 0.7], vec![0.4, -0.2]);
        let pruned = apply_prune(&net, &compute_plan(&net, 0.8).unwrap()).unwrap();
        assert_eq!(pruned.layers()[3], net.layers()[3]);
        let rep = sparsity_report(&pruned);
        assert_eq!(rep.prunable_zero_fraction, 0.8);
        assert_eq!(rep.conv_share, 5.0 / 7.0);
        assert_eq!(sparsity_report(&net).prunable_zero_fraction, 0.0);
    }

    #[test]
    fn plan_json_has_audit_fields() {
        let net = net_with(vec![0.3, -0.1], vec![0.4, -0.2]);
        let json = compute_plan(&net, 0.5).unwrap().to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["ratio"], 0.5);
        assert_eq!(v["total_pruned"], 2);
        assert!(v["per_layer"].is_object());
    }
}
