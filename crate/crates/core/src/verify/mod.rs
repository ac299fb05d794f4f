//! Sound L∞ local-robustness verification.
//!
//! Root bounds come from interval propagation followed by a fixed-slope
//! backward linear relaxation. Undecided properties go to branch-and-bound
//! over ReLU phase splits, with input bisection once a subdomain has no
//! unstable unit left.

mod bounds;
mod oracle;
mod pgd;
mod property;

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bounds::{
    crown_margin_bounds, ibp_bounds, BoundsCache, CrownBounds, NeuronId, Phase, Propagation, SplitSet, Stability,
};
pub use oracle::{exact_oracle, exact_oracle_with_spacing, logit_lipschitz, OracleResult, OracleVerdict, MAX_GRID_POINTS};
pub use pgd::{pgd_falsify, PgdParams};
pub use property::{make_property, InputBox, RobustnessProperty};

use crate::error::Result;
use crate::net::Network;
use crate::tensor::argmax;

/// Proven margins must exceed this to count.
pub const SOUNDNESS_SLACK: f64 = 1e-6;

/// Input dimensions narrower than this are not bisected further.
const MIN_SPLIT_WIDTH: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Verified,
    Falsified,
    Timeout,
    Unknown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyStats {
    /// Subdomains bounded, root included.
    pub subdomains: usize,
    pub relu_splits: usize,
    pub input_splits: usize,
    pub wall_time_s: f64,
    /// Global lower bound after the root and after every branching round.
    pub lb_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub verdict: Verdict,
    pub counterexample: Option<Vec<f64>>,
    /// Worst proven lower bound over adversarial classes; absent when the
    /// property was falsified before any bound was computed.
    pub margin_lower_bound: Option<f64>,
    pub stats: VerifyStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    /// Wall-clock budget; `None` runs until decided or out of subdomains.
    pub timeout_s: Option<f64>,
    pub max_subdomains: usize,
    pub pgd: PgdParams,
    /// Seed for the attack's random restarts.
    pub seed: u64,
    /// Subdomains branched per round.
    pub batch: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            timeout_s: Some(300.0),
            max_subdomains: 10_000,
            pgd: PgdParams::default(),
            seed: 0,
            batch: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Relu(NeuronId),
    Input(usize),
}

/// A region of the property box: a sub-box plus ReLU phase constraints.
#[derive(Clone, Debug, PartialEq)]
pub struct Subdomain {
    pub input_box: InputBox,
    pub splits: SplitSet,
}

impl Subdomain {
    pub fn root(prop: &RobustnessProperty) -> Self {
        Self {
            input_box: prop.input_box.clone(),
            splits: SplitSet::new(),
        }
    }

    /// Whether `x` lies in the box and meets every phase constraint.
    pub fn contains(&self, net: &Network<f64>, x: &[f64]) -> bool {
        if !self.input_box.contains(x) {
            return false;
        }
        if self.splits.is_empty() {
            return true;
        }
        let trace = net.forward_trace_raw(x);
        self.splits.iter().all(|(n, phase)| {
            let z = trace.activation(n.layer)[n.index];
            match phase {
                Phase::Active => z >= 0.0,
                Phase::Inactive => z <= 0.0,
            }
        })
    }

    pub fn branch(&self, b: Branch) -> (Self, Self) {
        match b {
            Branch::Relu(n) => {
                let mut active = self.clone();
                let mut inactive = self.clone();
                active.splits.insert(n, Phase::Active);
                inactive.splits.insert(n, Phase::Inactive);
                (active, inactive)
            }
            Branch::Input(d) => {
                let (l, r) = self.input_box.bisect(d);
                (
                    Self {
                        input_box: l,
                        splits: self.splits.clone(),
                    },
                    Self {
                        input_box: r,
                        splits: self.splits.clone(),
                    },
                )
            }
        }
    }
}

/// Unstable unit with the largest `min(−l, u)`, lowest id on ties; else the
/// widest input dimension; else nothing left to split.
pub fn choose_branch(net: &Network<f64>, cache: &BoundsCache) -> Option<Branch> {
    let mut best: Option<(f64, NeuronId)> = None;
    for n in cache.unstable(net) {
        let (l, u) = cache.activation(n.layer);
        let score = (-l[n.index]).min(u[n.index]);
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, n));
        }
    }
    if let Some((_, n)) = best {
        return Some(Branch::Relu(n));
    }
    let (dim, width) = cache.input_box().widest();
    (width > MIN_SPLIT_WIDTH).then_some(Branch::Input(dim))
}

struct Bounded {
    crown: CrownBounds,
    branch: Option<Branch>,
}

fn bound_subdomain(net: &Network<f64>, prop: &RobustnessProperty, sub: &Subdomain) -> Result<Option<Bounded>> {
    match ibp_bounds(net, &sub.input_box, &sub.splits)? {
        Propagation::Infeasible(_) => Ok(None),
        Propagation::Bounds(cache) => {
            let crown = crown_margin_bounds(net, prop, &cache)?;
            let branch = choose_branch(net, &cache);
            Ok(Some(Bounded { crown, branch }))
        }
    }
}

/// Total order on bounds for the priority queue; NaN never occurs.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Key(f64, u64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

struct Node {
    sub: Subdomain,
    lb: f64,
    branch: Branch,
}

pub fn verify(net: &Network<f64>, prop: &RobustnessProperty, cfg: &VerifyConfig) -> Result<VerificationOutcome> {
    verify_until(net, prop, cfg, &AtomicBool::new(false))
}

/// [`verify`] that also gives up, with [`Verdict::Timeout`], once `stop` is
/// raised.
pub fn verify_until(
    net: &Network<f64>,
    prop: &RobustnessProperty,
    cfg: &VerifyConfig,
    stop: &AtomicBool,
) -> Result<VerificationOutcome> {
    prop.check(net)?;
    let start = Instant::now();
    let deadline = cfg
        .timeout_s
        .map(|s| start + Duration::from_secs_f64(s.clamp(0.0, 1e9)));
    let expired = || stop.load(AtomicOrdering::Relaxed) || deadline.is_some_and(|d| Instant::now() >= d);
    let mut stats = VerifyStats::default();
    let finish = |verdict, counterexample, bound: Option<f64>, mut stats: VerifyStats| {
        stats.wall_time_s = start.elapsed().as_secs_f64();
        VerificationOutcome {
            verdict,
            counterexample,
            margin_lower_bound: bound,
            stats,
        }
    };
    let misclassified = |x: &[f64]| argmax(&net.logits(x)) != prop.label;

    if misclassified(&prop.anchor) {
        return Ok(finish(Verdict::Falsified, Some(prop.anchor.clone()), None, stats));
    }
    if let Some(x) = pgd::pgd_until(net, prop, &cfg.pgd, cfg.seed, deadline) {
        return Ok(finish(Verdict::Falsified, Some(x), None, stats));
    }

    let root = Subdomain::root(prop);
    stats.subdomains = 1;
    let Some(bounded) = bound_subdomain(net, prop, &root)? else {
        // The anchor itself is feasible, so only an empty box lands here.
        return Ok(finish(Verdict::Verified, None, None, stats));
    };
    let root_lb = bounded.crown.min();
    stats.lb_history.push(root_lb);
    if root_lb > SOUNDNESS_SLACK {
        return Ok(finish(Verdict::Verified, None, Some(root_lb), stats));
    }
    if misclassified(&bounded.crown.minimizer) {
        return Ok(finish(Verdict::Falsified, Some(bounded.crown.minimizer), Some(root_lb), stats));
    }

    let mut nodes: Vec<Option<Node>> = Vec::new();
    let mut queue: BinaryHeap<Reverse<Key>> = BinaryHeap::new();
    let mut stuck_min = f64::INFINITY;
    let mut proven_min = f64::INFINITY;
    match bounded.branch {
        Some(branch) => {
            queue.push(Reverse(Key(root_lb, 0)));
            nodes.push(Some(Node {
                sub: root,
                lb: root_lb,
                branch,
            }));
        }
        None => stuck_min = root_lb,
    }
    let global = |queue: &BinaryHeap<Reverse<Key>>, stuck_min: f64, proven_min: f64| {
        let open = queue.peek().map_or(f64::INFINITY, |Reverse(k)| k.0);
        open.min(stuck_min).min(proven_min)
    };

    loop {
        let lb = global(&queue, stuck_min, proven_min);
        if queue.is_empty() {
            let bound = lb.is_finite().then_some(lb);
            let verdict = if stuck_min.is_finite() { Verdict::Unknown } else { Verdict::Verified };
            return Ok(finish(verdict, None, bound, stats));
        }
        if expired() {
            return Ok(finish(Verdict::Timeout, None, Some(lb), stats));
        }
        let room = cfg.max_subdomains.saturating_sub(stats.subdomains) / 2;
        let take = cfg.batch.max(1).min(room);
        if take == 0 {
            return Ok(finish(Verdict::Unknown, None, Some(lb), stats));
        }
        let mut children = Vec::with_capacity(2 * take);
        let mut batch_min = f64::INFINITY;
        for _ in 0..take {
            let Some(Reverse(Key(_, id))) = queue.pop() else {
                break;
            };
            let node = nodes[id as usize].take().expect("queued node");
            match node.branch {
                Branch::Relu(_) => stats.relu_splits += 1,
                Branch::Input(_) => stats.input_splits += 1,
            }
            batch_min = batch_min.min(node.lb);
            let (a, b) = node.sub.branch(node.branch);
            children.push((a, node.lb));
            children.push((b, node.lb));
        }
        let results: Vec<Result<Option<Bounded>>> = children
            .par_iter()
            .map(|(sub, _)| bound_subdomain(net, prop, sub))
            .collect();
        for ((sub, parent_lb), res) in children.into_iter().zip(results) {
            stats.subdomains += 1;
            let Some(b) = res? else {
                continue;
            };
            for x in [sub.input_box.center(), b.crown.minimizer.clone()] {
                if misclassified(&x) {
                    // Unprocessed siblings are still covered by their parents' bounds.
                    let lb = global(&queue, stuck_min, proven_min).min(batch_min);
                    return Ok(finish(Verdict::Falsified, Some(x), Some(lb), stats));
                }
            }
            let lb = b.crown.min().max(parent_lb);
            if lb > SOUNDNESS_SLACK {
                proven_min = proven_min.min(lb);
                continue;
            }
            match b.branch {
                Some(branch) => {
                    queue.push(Reverse(Key(lb, nodes.len() as u64)));
                    nodes.push(Some(Node { sub, lb, branch }));
                }
                None => stuck_min = stuck_min.min(lb),
            }
        }
        let lb = global(&queue, stuck_min, proven_min);
        if lb.is_finite() {
            stats.lb_history.push(lb);
        }
    }
}
