//! Evaluating a trained generator against its training set.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    distance_by_name, embedder_by_name, frechet_distance, knn_precision_recall, nn_mode_count,
    pairwise_diversity, ppl_uniformity, sample_latents, GeneratorPaths, MetricReport,
    DEFAULT_MODE_SAMPLES, DEFAULT_PPL_PATHS,
};
use crate::error::{MixdlError, Result};
use crate::imaging::Image;
use crate::mixup::LatentSpace;
use crate::models::Generator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Diversity,
    Ppl,
    Modes,
    Fid,
    Pr,
}

impl FromStr for MetricKind {
    type Err = MixdlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "diversity" => Ok(MetricKind::Diversity),
            "ppl" => Ok(MetricKind::Ppl),
            "modes" => Ok(MetricKind::Modes),
            "fid" => Ok(MetricKind::Fid),
            "pr" => Ok(MetricKind::Pr),
            other => Err(MixdlError::Configuration(format!(
                "unknown metric {other:?} (expected diversity, ppl, modes, fid or pr)"
            ))),
        }
    }
}

/// Parses a comma-separated metric list.
pub fn parse_metric_list(s: &str) -> Result<Vec<MetricKind>> {
    s.split(',').filter(|m| !m.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub metrics: Vec<MetricKind>,
    /// Generated samples for diversity, mode counting and embeddings.
    pub samples: usize,
    pub ppl_paths: usize,
    pub distance: String,
    pub embedder: String,
    pub knn_k: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            metrics: vec![MetricKind::Diversity, MetricKind::Ppl, MetricKind::Modes],
            samples: DEFAULT_MODE_SAMPLES,
            ppl_paths: DEFAULT_PPL_PATHS,
            distance: "pixel-l2".into(),
            embedder: "random-conv".into(),
            knn_k: 3,
        }
    }
}

/// Computes the requested metrics. Samples and paths are drawn from a
/// stream seeded by `seed`, so reports are reproducible.
pub fn evaluate_generator(
    generator: &Generator,
    space: LatentSpace,
    train_set: &[Image],
    settings: &EvalSettings,
    seed: u64,
) -> Result<MetricReport> {
    let distance = distance_by_name(&settings.distance)?;
    let mut report = MetricReport::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let needs_samples = settings.metrics.iter().any(|m| *m != MetricKind::Ppl);
    let samples = if needs_samples {
        let z = sample_latents(settings.samples, generator.latent_dim(), &mut rng);
        generator.generate(&z)?
    } else {
        Vec::new()
    };
    for metric in &settings.metrics {
        match metric {
            MetricKind::Diversity => {
                report.insert("diversity", pairwise_diversity(&samples, distance.as_ref())?)?;
                report.providers.insert("diversity".into(), distance.name().into());
                report.sample_counts.insert("diversity".into(), samples.len());
            }
            MetricKind::Ppl => {
                let paths = GeneratorPaths { generator, space };
                let r = ppl_uniformity(&paths, settings.ppl_paths, distance.as_ref(), &mut rng)?;
                report.insert("ppl", r.subinterval_mean)?;
                report.insert("ppl_std", r.subinterval_std)?;
                report.insert("ppl_endpoint", r.endpoint_mean)?;
                report.providers.insert("ppl".into(), distance.name().into());
                report.sample_counts.insert("ppl".into(), settings.ppl_paths);
            }
            MetricKind::Modes => {
                let count = nn_mode_count(&samples, train_set, distance.as_ref())?;
                report.insert("modes", count as f64)?;
                report.providers.insert("modes".into(), distance.name().into());
                report.sample_counts.insert("modes".into(), samples.len());
            }
            MetricKind::Fid | MetricKind::Pr => {
                let embedder = embedder_by_name(&settings.embedder)?;
                let real = embedder.embed(train_set)?;
                let fake = embedder.embed(&samples)?;
                let key = if *metric == MetricKind::Fid { "fid" } else { "precision" };
                if *metric == MetricKind::Fid {
                    report.insert("fid", frechet_distance(&real, &fake)?)?;
                } else {
                    let (p, r) = knn_precision_recall(&real, &fake, settings.knn_k)?;
                    report.insert("precision", p)?;
                    report.insert("recall", r)?;
                }
                report.providers.insert(key.into(), embedder.name().into());
                report.sample_counts.insert(key.into(), samples.len());
            }
        }
    }
    Ok(report)
}
