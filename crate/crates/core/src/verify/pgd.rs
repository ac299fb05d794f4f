use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::property::RobustnessProperty;
use crate::error::Result;
use crate::net::{Gradients, Network};
use crate::rng::{stream, Stream};
use crate::tensor::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdParams {
    pub steps: usize,
    pub restarts: usize,
    /// Defaults to `ε/10`.
    pub step_size: Option<f64>,
}

impl Default for PgdParams {
    fn default() -> Self {
        Self {
            steps: 50,
            restarts: 5,
            step_size: None,
        }
    }
}

/// Margin-loss projected gradient ascent inside the property box.
///
/// The first restart starts at the anchor, later ones uniformly in the box.
/// Returns the first misclassified point found.
pub fn pgd_falsify(net: &Network<f64>, prop: &RobustnessProperty, params: &PgdParams, seed: u64) -> Result<Option<Vec<f64>>> {
    prop.check(net)?;
    Ok(pgd_until(net, prop, params, seed, None))
}

pub(crate) fn pgd_until(
    net: &Network<f64>,
    prop: &RobustnessProperty,
    params: &PgdParams,
    seed: u64,
    deadline: Option<Instant>,
) -> Option<Vec<f64>> {
    let bx = &prop.input_box;
    let step = params.step_size.unwrap_or(prop.epsilon / 10.0);
    let c = prop.label;
    let mut rng = stream(seed, Stream::Attack);
    let mut grads = Gradients::zeros_like(net);
    for restart in 0..params.restarts {
        let mut x: Vec<f64> = if restart == 0 {
            prop.anchor.clone()
        } else {
            bx.lower
                .iter()
                .zip(&bx.upper)
                .map(|(&l, &u)| if u > l { rng.gen_range(l..=u) } else { l })
                .collect()
        };
        for it in 0..=params.steps {
            let trace = net.forward_trace_raw(&x);
            let z = trace.logits();
            if argmax(z) != c {
                return Some(x);
            }
            if it == params.steps || step == 0.0 || deadline.is_some_and(|d| Instant::now() >= d) {
                break;
            }
            let mut other = z.to_vec();
            other[c] = f64::NEG_INFINITY;
            let j = argmax(&other);
            let mut lg = vec![0.0; z.len()];
            lg[j] = 1.0;
            lg[c] = -1.0;
            let g = net.backward_into(&trace.acts, &lg, &mut grads);
            for (v, d) in x.iter_mut().zip(&g) {
                if *d != 0.0 {
                    *v += step * d.signum();
                }
            }
            bx.clamp(&mut x);
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            break;
        }
    }
    None
}
