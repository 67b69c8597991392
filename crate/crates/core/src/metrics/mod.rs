//! Sample-quality diagnostics: diversity, path smoothness, mode coverage,
//! Fréchet distance and k-NN precision/recall.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MixdlError, Result};
use crate::imaging::Image;
use crate::mixup::LatentSpace;
use crate::models::Generator;

pub mod eval;
pub mod frechet;
pub mod providers;

pub use eval::{evaluate_generator, parse_metric_list, EvalSettings, MetricKind};
pub use frechet::{frechet_distance, knn_precision_recall};
pub use providers::{
    builtin_providers, distance_by_name, embedder_by_name, pixel_l2, Embedder, ExternalDistance,
    ExternalEmbedder, MultiScaleL2, PerceptualDistance, PixelL2, RandomConvEmbedder,
};

pub const PPL_SUBINTERVALS: usize = 10;
pub const DEFAULT_PPL_PATHS: usize = 500;
pub const DEFAULT_MODE_SAMPLES: usize = 500;

/// Mean provider distance over all unordered pairs.
pub fn pairwise_diversity(samples: &[Image], provider: &dyn PerceptualDistance) -> Result<f64> {
    if samples.len() < 2 {
        return Err(MixdlError::param("pairwise diversity needs at least 2 samples"));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            total += provider.distance(&samples[i], &samples[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Something whose latent paths can be rendered: endpoints are drawn in
/// the interpolation space and points along the path are rendered.
pub trait PathGenerator {
    fn sample_endpoint(&self, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>>;
    fn render_points(&self, points: &[Vec<f64>]) -> Result<Vec<Image>>;
}

/// Paths through a [`Generator`] in the prior or mapped space.
pub struct GeneratorPaths<'a> {
    pub generator: &'a Generator,
    pub space: LatentSpace,
}

impl PathGenerator for GeneratorPaths<'_> {
    fn sample_endpoint(&self, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        let z: Vec<f64> = (0..self.generator.latent_dim())
            .map(|_| Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        match self.space {
            LatentSpace::Prior => Ok(z),
            LatentSpace::Mapped => Ok(self.generator.map_latent(&[z])?.remove(0)),
        }
    }

    fn render_points(&self, points: &[Vec<f64>]) -> Result<Vec<Image>> {
        match self.space {
            LatentSpace::Prior => self.generator.generate(points),
            LatentSpace::Mapped => self.generator.render(points),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplUniformity {
    pub subinterval_mean: f64,
    pub subinterval_std: f64,
    pub endpoint_mean: f64,
}

/// Splits random linear latent paths into 10 segments and measures each
/// segment's distance divided by the squared step (0.1^2). `subinterval_std`
/// is the per-path standard deviation across segments, averaged over paths.
pub fn ppl_uniformity(
    generator: &dyn PathGenerator,
    n_paths: usize,
    provider: &dyn PerceptualDistance,
    rng: &mut dyn rand::RngCore,
) -> Result<PplUniformity> {
    if n_paths == 0 {
        return Err(MixdlError::param("ppl_uniformity needs n_paths >= 1"));
    }
    let step = 1.0 / PPL_SUBINTERVALS as f64;
    let norm = step * step;
    let (mut sub_sum, mut std_sum, mut end_sum) = (0.0, 0.0, 0.0);
    for _ in 0..n_paths {
        let a = generator.sample_endpoint(rng)?;
        let b = generator.sample_endpoint(rng)?;
        let points: Vec<Vec<f64>> = (0..=PPL_SUBINTERVALS)
            .map(|k| {
                let t = k as f64 / PPL_SUBINTERVALS as f64;
                a.iter().zip(&b).map(|(x, y)| x + t * (y - x)).collect()
            })
            .collect();
        let images = generator.render_points(&points)?;
        let segs = images
            .windows(2)
            .map(|w| provider.distance(&w[0], &w[1]).map(|d| d / norm))
            .collect::<Result<Vec<f64>>>()?;
        let mean = segs.iter().sum::<f64>() / segs.len() as f64;
        let var = segs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / segs.len() as f64;
        sub_sum += mean;
        std_sum += var.sqrt();
        end_sum += provider.distance(&images[0], &images[PPL_SUBINTERVALS])? / norm;
    }
    let n = n_paths as f64;
    Ok(PplUniformity {
        subinterval_mean: sub_sum / n,
        subinterval_std: std_sum / n,
        endpoint_mean: end_sum / n,
    })
}

/// Number of distinct training images that are the nearest neighbor of at
/// least one sample. Ties go to the lowest training index.
pub fn nn_mode_count(
    samples: &[Image],
    train_set: &[Image],
    provider: &dyn PerceptualDistance,
) -> Result<usize> {
    if samples.is_empty() || train_set.is_empty() {
        return Err(MixdlError::param("nn_mode_count needs nonempty sample and training sets"));
    }
    let mut hit = vec![false; train_set.len()];
    for s in samples {
        let mut best = (f64::INFINITY, 0);
        for (j, t) in train_set.iter().enumerate() {
            let d = provider.distance(s, t)?;
            if d < best.0 {
                best = (d, j);
            }
        }
        hit[best.1] = true;
    }
    Ok(hit.iter().filter(|&&h| h).count())
}

/// Named scalar results with the providers and sample counts behind them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    pub providers: BTreeMap<String, String>,
    pub sample_counts: BTreeMap<String, usize>,
    pub seed: u64,
}

impl MetricReport {
    pub fn new(seed: u64) -> Self {
        MetricReport {
            seed,
            ..Default::default()
        }
    }

    /// Adds a scalar; non-finite values are rejected.
    pub fn insert(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(MixdlError::NumericalDomain(format!("metric {name} is {value}")));
        }
        self.metrics.insert(name, value);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| MixdlError::NumericalDomain(format!("cannot serialize report: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| MixdlError::io(parent, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| MixdlError::io(path, e))
    }
}

/// Draws `n` standard-normal prior latents of width `dim`.
pub fn sample_latents<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| Distribution::<f64>::sample(&StandardNormal, rng))
                .collect()
        })
        .collect()
}
