//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance runner. Nothing here calls into the code it is checking.
#![allow(dead_code)]

use mixdl::imaging::Image;
use mixdl::metrics::PathGenerator;
use mixdl::models::ModelConfig;
use mixdl::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `Err` with a readable message when `got` is farther than `tol` from `want`.
pub fn close(what: &str, got: f64, want: f64, tol: f64) -> std::result::Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: got {got}, want {want} ± {tol}"))
    }
}

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

pub fn kl(q: &[f64], p: &[f64]) -> f64 {
    q.iter().zip(p).map(|(a, b)| a * (a / b).ln()).sum()
}

pub fn gaussian_vec(r: &mut impl Rng, n: usize) -> Vec<f64> {
    // Box-Muller, so the fixtures do not share a sampler with the library
    (0..n)
        .map(|_| {
            let u1: f64 = 1.0 - r.random::<f64>();
            let u2: f64 = r.random::<f64>();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Root-mean-square pixel difference.
pub fn rms(a: &Image, b: &Image) -> f64 {
    let d = a.data();
    let e = b.data();
    (d.iter().zip(e).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / d.len() as f64).sqrt()
}

/// k-NN precision and recall by exhaustive sorting of every distance row.
pub fn knn_oracle(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> (f64, f64) {
    let radii = |set: &[Vec<f64>]| -> Vec<f64> {
        (0..set.len())
            .map(|i| {
                let mut d: Vec<f64> = (0..set.len())
                    .filter(|&j| j != i)
                    .map(|j| euclid(&set[i], &set[j]))
                    .collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                d[k - 1]
            })
            .collect()
    };
    let covered = |manifold: &[Vec<f64>], probes: &[Vec<f64>]| -> f64 {
        let r = radii(manifold);
        let hits = probes
            .iter()
            .filter(|p| manifold.iter().zip(&r).any(|(m, rad)| euclid(p, m) <= *rad))
            .count();
        hits as f64 / probes.len() as f64
    };
    (covered(real, fake), covered(fake, real))
}

/// Distinct argmin training indices, first index on ties.
pub fn mode_oracle(samples: &[Image], train: &[Image]) -> usize {
    let mut seen = std::collections::BTreeSet::new();
    for s in samples {
        let d: Vec<f64> = train.iter().map(|t| rms(s, t)).collect();
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        seen.insert(d.iter().position(|v| *v == min).unwrap());
    }
    seen.len()
}

pub fn diversity_oracle(samples: &[Image]) -> f64 {
    let mut all = Vec::new();
    for i in 0..samples.len() {
        for j in 0..samples.len() {
            if i < j {
                all.push(rms(&samples[i], &samples[j]));
            }
        }
    }
    all.iter().sum::<f64>() / all.len() as f64
}

/// 1-D points whose sample mean is `mean` and unbiased variance is `sd^2`.
pub fn moment_matched(n: usize, mean: f64, sd: f64) -> Vec<Vec<f64>> {
    let raw: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let m = raw.iter().sum::<f64>() / n as f64;
    let var = raw.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    raw.iter()
        .map(|x| vec![mean + sd * (x - m) / var.sqrt()])
        .collect()
}

/// `G(z) = A z` reshaped to a 3×4×4 image.
pub struct LinearGenerator {
    pub a: Vec<Vec<f64>>,
}

impl LinearGenerator {
    pub fn new(seed: u64, d_z: usize) -> Self {
        let mut r = rng(seed);
        LinearGenerator {
            a: (0..48).map(|_| gaussian_vec(&mut r, d_z)).collect(),
        }
    }

    pub fn image(&self, z: &[f64]) -> Image {
        let data = self
            .a
            .iter()
            .map(|row| row.iter().zip(z).map(|(w, x)| w * x).sum())
            .collect();
        Image::new(3, 4, 4, data).unwrap()
    }
}

impl PathGenerator for LinearGenerator {
    fn sample_endpoint(&self, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        Ok((0..self.a[0].len()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    }

    fn render_points(&self, points: &[Vec<f64>]) -> Result<Vec<Image>> {
        Ok(points.iter().map(|z| self.image(z)).collect())
    }
}

/// Tiny model for fast training tests.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        resolution: 8,
        d_z: 8,
        mapping_layers: 1,
        g_channels: 8,
        d_channels: 8,
        d_pen: 16,
        proj_dim: 32,
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = euclid(a, b);
    let scale = euclid(a, &vec![0.0; a.len()]).max(euclid(b, &vec![0.0; b.len()]));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub mod checks;
