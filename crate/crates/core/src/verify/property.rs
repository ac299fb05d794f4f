use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::Tensor;

/// Axis-aligned box over the flattened input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Shape(format!(
                "box bounds have {} and {} entries",
                lower.len(),
                upper.len()
            )));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u))
        {
            return Err(Error::InvalidArgument("box needs finite lower ≤ upper".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.len()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| l <= v && v <= u)
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *u);
        }
    }

    /// Widest dimension, lowest index on ties.
    pub fn widest(&self) -> (usize, f64) {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, w)| if w > best.1 { (i, w) } else { best })
    }

    /// Halves dimension `dim` at its midpoint.
    pub fn bisect(&self, dim: usize) -> (Self, Self) {
        let mid = 0.5 * (self.lower[dim] + self.upper[dim]);
        let mut left = self.clone();
        let mut right = self.clone();
        left.upper[dim] = mid;
        right.lower[dim] = mid;
        (left, right)
    }
}

/// L∞ local robustness of `anchor`'s label within `input_box`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessProperty {
    pub anchor: Vec<f64>,
    pub label: usize,
    pub epsilon: f64,
    pub input_box: InputBox,
}

/// The ε-ball around `x` clipped to the pixel range `[0, 1]`.
pub fn make_property(x: &Tensor<f64>, label: usize, epsilon: f64) -> Result<RobustnessProperty> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be finite and non-negative, got {epsilon}"
        )));
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("anchor pixels must lie in [0, 1]".into()));
    }
    let lower = x.data().iter().map(|v| (v - epsilon).max(0.0)).collect();
    let upper = x.data().iter().map(|v| (v + epsilon).min(1.0)).collect();
    Ok(RobustnessProperty {
        anchor: x.data().to_vec(),
        label,
        epsilon,
        input_box: InputBox { lower, upper },
    })
}

impl RobustnessProperty {
    /// A property over an arbitrary box, for inputs outside the pixel range.
    pub fn with_box(anchor: Vec<f64>, label: usize, input_box: InputBox) -> Result<Self> {
        if !input_box.contains(&anchor) {
            return Err(Error::InvalidArgument("anchor lies outside the box".into()));
        }
        let epsilon = anchor
            .iter()
            .zip(input_box.lower.iter().zip(&input_box.upper))
            .map(|(a, (l, u))| (a - l).max(u - a))
            .fold(0.0, f64::max);
        Ok(Self {
            anchor,
            label,
            epsilon,
            input_box,
        })
    }

    pub(crate) fn check(&self, net: &Network<f64>) -> Result<()> {
        if self.input_box.len() != net.input_len() || self.anchor.len() != net.input_len() {
            return Err(Error::Shape(format!(
                "property has {} inputs, network takes {}",
                self.anchor.len(),
                net.input_len()
            )));
        }
        if self.label >= net.num_classes() || net.num_classes() < 2 {
            return Err(Error::InvalidArgument(format!(
                "label {} is not a class of a {}-class network",
                self.label,
                net.num_classes()
            )));
        }
        Ok(())
    }
}
