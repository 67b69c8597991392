//! Perceptual distances and embedders used by the metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Graph;
use crate::error::{MixdlError, Result};
use crate::imaging::Image;
use crate::tensor::Tensor;

/// A symmetric, deterministic image distance with `d(x, x) = 0`.
pub trait PerceptualDistance: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

/// A deterministic map from images to fixed-width feature vectors.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, images: &[Image]) -> Result<Vec<Vec<f64>>>;
}

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MixdlError::param(format!(
            "cannot compare images of shape {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Root-mean-square pixel difference. Panics on mismatched shapes.
pub fn pixel_l2(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.shape(), b.shape(), "pixel_l2 on mismatched shapes");
    let ss: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    (ss / a.data().len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PixelL2;

impl PerceptualDistance for PixelL2 {
    fn name(&self) -> &str {
        "pixel-l2"
    }

    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        check_same_shape(a, b)?;
        Ok(pixel_l2(a, b))
    }
}

/// Mean of pixel L2 at full, half and quarter resolution (2x2 box
/// downsampling). Scales that would vanish are skipped.
#[derive(Clone, Copy, Debug, Default)]
pub struct MultiScaleL2;

impl PerceptualDistance for MultiScaleL2 {
    fn name(&self) -> &str {
        "multiscale-l2"
    }

    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        check_same_shape(a, b)?;
        let (mut a, mut b) = (a.clone(), b.clone());
        let mut total = pixel_l2(&a, &b);
        let mut scales = 1;
        for _ in 0..2 {
            if a.height() < 2 || a.width() < 2 {
                break;
            }
            a = a.downsample2();
            b = b.downsample2();
            total += pixel_l2(&a, &b);
            scales += 1;
        }
        Ok(total / scales as f64)
    }
}

/// Fixed random two-layer conv features: per-channel spatial means and
/// standard deviations of both layers. Weights depend only on the seed.
#[derive(Clone, Debug)]
pub struct RandomConvEmbedder {
    name: String,
    layers: Vec<(Tensor, Tensor)>,
}

const EMBED_CHANNELS: [usize; 2] = [16, 32];

impl RandomConvEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut prev = 3;
        for &out in &EMBED_CHANNELS {
            let fan_in = prev * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..out * fan_in)
                .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            layers.push((Tensor::new(vec![out, prev, 3, 3], w), Tensor::zeros(vec![out])));
            prev = out;
        }
        RandomConvEmbedder {
            name: format!("random-conv-{seed}"),
            layers,
        }
    }
}

fn channel_stats(t: &Tensor, out: &mut [Vec<f64>]) {
    let s = t.shape();
    let plane = s[2] * s[3];
    for (i, feats) in out.iter_mut().enumerate() {
        let row = t.row(i);
        for c in 0..s[1] {
            let px = &row[c * plane..(c + 1) * plane];
            let mean = px.iter().sum::<f64>() / plane as f64;
            let var = px.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            feats.push(mean);
            feats.push(var.sqrt());
        }
    }
}

impl Embedder for RandomConvEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        2 * EMBED_CHANNELS.iter().sum::<usize>()
    }

    fn embed(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = Graph::new();
            let mut h = g.constant(Image::batch_to_tensor(chunk)?);
            let mut feats = vec![Vec::with_capacity(self.dim()); chunk.len()];
            for (w, b) in &self.layers {
                let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
                h = g.conv2d(h, w, Some(b));
                h = g.leaky_relu(h, 0.2);
                channel_stats(g.value(h), &mut feats);
                if g.value(h).shape()[2] >= 2 {
                    h = g.avg_pool2(h);
                }
            }
            out.extend(feats);
        }
        Ok(out)
    }
}

type DistanceFn = dyn Fn(&Image, &Image) -> Result<f64> + Send + Sync;
type EmbedFn = dyn Fn(&[Image]) -> Result<Vec<Vec<f64>>> + Send + Sync;

/// Adapter for an externally supplied distance (e.g. a learned perceptual
/// metric). The caller is responsible for its symmetry.
pub struct ExternalDistance {
    name: String,
    f: Box<DistanceFn>,
}

impl ExternalDistance {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(&Image, &Image) -> Result<f64> + Send + Sync + 'static,
    ) -> Self {
        ExternalDistance {
            name: name.into(),
            f: Box::new(f),
        }
    }
}

impl PerceptualDistance for ExternalDistance {
    fn name(&self) -> &str {
        &self.name
    }

    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        let d = (self.f)(a, b)?;
        if !d.is_finite() || d < 0.0 {
            return Err(MixdlError::NumericalDomain(format!(
                "distance provider {} returned {d}",
                self.name
            )));
        }
        Ok(d)
    }
}

/// Adapter for an externally supplied embedding network.
pub struct ExternalEmbedder {
    name: String,
    dim: usize,
    f: Box<EmbedFn>,
}

impl ExternalEmbedder {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        f: impl Fn(&[Image]) -> Result<Vec<Vec<f64>>> + Send + Sync + 'static,
    ) -> Self {
        ExternalEmbedder {
            name: name.into(),
            dim,
            f: Box::new(f),
        }
    }
}

impl Embedder for ExternalEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let out = (self.f)(images)?;
        if out.len() != images.len() || out.iter().any(|e| e.len() != self.dim) {
            return Err(MixdlError::param(format!(
                "embedder {} returned the wrong shape",
                self.name
            )));
        }
        Ok(out)
    }
}

pub const DEFAULT_EMBEDDER_SEED: u64 = 0x5eed;

pub struct BuiltinProviders {
    pub distances: Vec<Box<dyn PerceptualDistance>>,
    pub embedders: Vec<Box<dyn Embedder>>,
}

pub fn builtin_providers() -> BuiltinProviders {
    BuiltinProviders {
        distances: vec![Box::new(PixelL2), Box::new(MultiScaleL2)],
        embedders: vec![Box::new(RandomConvEmbedder::new(DEFAULT_EMBEDDER_SEED))],
    }
}

/// Looks up a built-in distance by name.
pub fn distance_by_name(name: &str) -> Result<Box<dyn PerceptualDistance>> {
    builtin_providers()
        .distances
        .into_iter()
        .find(|d| d.name() == name)
        .ok_or_else(|| {
            MixdlError::Configuration(format!(
                "unknown distance provider {name:?} (expected pixel-l2 or multiscale-l2)"
            ))
        })
}

/// Looks up a built-in embedder; `random-conv-<seed>` selects any seed.
pub fn embedder_by_name(name: &str) -> Result<Box<dyn Embedder>> {
    if name == "random-conv" {
        return Ok(Box::new(RandomConvEmbedder::new(DEFAULT_EMBEDDER_SEED)));
    }
    name.strip_prefix("random-conv-")
        .and_then(|s| s.parse::<u64>().ok())
        .map(|seed| Box::new(RandomConvEmbedder::new(seed)) as Box<dyn Embedder>)
        .ok_or_else(|| {
            MixdlError::Configuration(format!(
                "unknown embedder {name:?} (expected random-conv or random-conv-<seed>)"
            ))
        })
}
