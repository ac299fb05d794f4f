//! Synthetic two-class "frost" imagery.
//!
//! Class 0 is smooth terrain: three random low-frequency cosine waves,
//! rescaled into `[0.2, 0.6]`, plus uniform noise of amplitude 0.05. Class 1
//! is the same terrain model with a speckle field: 5% of the image's pixels,
//! all inside a random ellipse covering 10–40% of the image, brightened by
//! 0.35. Images are generated in pairs sharing one terrain so the classes
//! differ only by the speckle; pair order is then shuffled.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

const TERRAIN_LO: f64 = 0.2;
const TERRAIN_HI: f64 = 0.6;
const NOISE_AMPLITUDE: f64 = 0.05;
const SPECKLE_FRACTION: f64 = 0.05;
const SPECKLE_GAIN: f64 = 0.35;
const ELLIPSE_MIN_AREA: f64 = 0.10;
const ELLIPSE_MAX_AREA: f64 = 0.40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
}

impl SurrogateParams {
    /// Desk default: 1×16×16.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            n_train: 2000,
            n_test: 500,
            size: 16,
        }
    }
}

/// Train and test splits, each a pure function of `params`.
pub fn gen_frost_surrogate(params: &SurrogateParams) -> Result<(Dataset, Dataset)> {
    if params.n_train == 0 || params.n_test == 0 {
        return Err(Error::InvalidArgument("surrogate splits must be non-empty".into()));
    }
    if params.size < 8 {
        return Err(Error::InvalidArgument(format!(
            "surrogate image size must be at least 8, got {}",
            params.size
        )));
    }
    let train = gen_split(params, params.n_train, Split::Train)?;
    let test = gen_split(params, params.n_test, Split::Test)?;
    Ok((train, test))
}

fn gen_split(params: &SurrogateParams, n: usize, split: Split) -> Result<Dataset> {
    let mut rng = stream(
        params.seed,
        match split {
            Split::Train => Stream::SurrogateTrain,
            Split::Test => Stream::SurrogateTest,
        },
    );
    let s = params.size;
    let mut items: Vec<(Vec<f32>, u8)> = Vec::with_capacity(n);
    while items.len() < n {
        let terrain = terrain(&mut rng, s);
        items.push((noisy(&mut rng, &terrain), 0));
        if items.len() < n {
            let mut frost = noisy(&mut rng, &terrain);
            speckle(&mut rng, s, &mut frost);
            items.push((frost, 1));
        }
    }
    items.shuffle(&mut rng);
    let labels = items.iter().map(|(_, l)| *l).collect();
    let pixels = items.into_iter().flat_map(|(p, _)| p).collect();
    Dataset::new(Tensor::new(vec![n, 1, s, s], pixels)?, labels, 2, split)
}

fn terrain<R: Rng>(rng: &mut R, s: usize) -> Vec<f64> {
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            let amp = rng.gen_range(0.5..1.0);
            // 0.3 to 1.5 cycles across the image on each axis.
            let fx = rng.gen_range(0.3..1.5) * 2.0 * PI / s as f64;
            let fy = rng.gen_range(0.3..1.5) * 2.0 * PI / s as f64;
            let phase = rng.gen_range(0.0..2.0 * PI);
            [amp, fx, fy, phase]
        })
        .collect();
    let mut t: Vec<f64> = (0..s * s)
        .map(|i| {
            let (y, x) = ((i / s) as f64, (i % s) as f64);
            waves.iter().map(|[a, fx, fy, p]| a * (fx * x + fy * y + p).cos()).sum()
        })
        .collect();
    let (lo, hi) = t.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-12);
    for v in &mut t {
        *v = TERRAIN_LO + (*v - lo) / span * (TERRAIN_HI - TERRAIN_LO);
    }
    t
}

fn noisy<R: Rng>(rng: &mut R, terrain: &[f64]) -> Vec<f32> {
    terrain
        .iter()
        .map(|&t| (t + rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE)).clamp(0.0, 1.0) as f32)
        .collect()
}

fn speckle<R: Rng>(rng: &mut R, s: usize, img: &mut [f32]) {
    let total = (s * s) as f64;
    let count = ((SPECKLE_FRACTION * total).round() as usize).max(1);
    let inside = loop {
        let area = rng.gen_range(ELLIPSE_MIN_AREA..ELLIPSE_MAX_AREA) * total;
        let aspect: f64 = rng.gen_range(0.5..2.0);
        let a = (area * aspect / PI).sqrt();
        let b = a / aspect;
        let theta = rng.gen_range(0.0..PI);
        let cx = rng.gen_range(0.0..s as f64);
        let cy = rng.gen_range(0.0..s as f64);
        let (sin, cos) = theta.sin_cos();
        let inside: Vec<usize> = (0..s * s)
            .filter(|&i| {
                let dx = (i % s) as f64 + 0.5 - cx;
                let dy = (i / s) as f64 + 0.5 - cy;
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            })
            .collect();
        // An ellipse hanging off the border can cover too few pixels; redraw.
        if inside.len() >= count {
            break inside;
        }
    };
    for &i in inside.choose_multiple(rng, count) {
        img[i] = (img[i] as f64 + SPECKLE_GAIN).clamp(0.0, 1.0) as f32;
    }
}
