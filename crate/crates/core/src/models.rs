//! Small reference generator and discriminator used by the trainer.
//!
//! The generator splits into a mapping network (prior latent to mapped
//! latent, identity when it has no layers) and an upsampling convolutional
//! synthesis network that exposes one activation tap per upsampling block.
//! The discriminator is a mirrored downsampling stack that exposes its
//! penultimate feature vector, a scalar logit, and a patch logit grid read
//! from the 8x8 feature map.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{MixdlError, Result};
use crate::imaging::Image;
use crate::losses::GeneratorTapSpec;
use crate::similarity::{FeatureLayer, FeatureStack};
use crate::tensor::Tensor;

pub const SUPPORTED_RESOLUTIONS: [usize; 4] = [8, 16, 32, 64];
const LRELU_SLOPE: f64 = 0.2;
/// Rows per forward pass when generating without gradients.
const INFERENCE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub resolution: usize,
    pub d_z: usize,
    pub mapping_layers: usize,
    pub g_channels: usize,
    pub d_channels: usize,
    pub d_pen: usize,
    pub proj_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resolution: 32,
            d_z: 64,
            mapping_layers: 2,
            g_channels: 32,
            d_channels: 32,
            d_pen: 64,
            proj_dim: crate::losses::DEFAULT_PROJECTION_DIM,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        check_resolution(self.resolution)?;
        if self.d_z == 0 || self.g_channels == 0 || self.d_channels == 0 {
            return Err(MixdlError::Configuration(
                "model.d_z, model.g_channels and model.d_channels must be positive".into(),
            ));
        }
        if self.d_pen == 0 || self.proj_dim == 0 {
            return Err(MixdlError::Configuration(
                "model.d_pen and model.proj_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn check_resolution(resolution: usize) -> Result<()> {
    if SUPPORTED_RESOLUTIONS.contains(&resolution) {
        Ok(())
    } else {
        Err(MixdlError::param(format!(
            "unsupported resolution {resolution}; expected one of {SUPPORTED_RESOLUTIONS:?}"
        )))
    }
}

/// Number of 2x resampling blocks between 4x4 and `resolution`.
fn block_count(resolution: usize) -> usize {
    resolution.trailing_zeros() as usize - 2
}

/// Channel width of the block producing `4 << (i + 1)` pixels.
fn width(channels: usize, i: usize) -> usize {
    (channels >> i).max(channels.min(8))
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| g.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Replaces every tensor, keeping names and shapes.
    pub fn load(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(MixdlError::param(format!(
                "expected {} parameter tensors, got {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for ((name, old), new) in self.entries.iter_mut().zip(tensors) {
            if old.shape() != new.shape() {
                return Err(MixdlError::param(format!(
                    "parameter {name} has shape {:?}, got {:?}",
                    old.shape(),
                    new.shape()
                )));
            }
            *old = new;
        }
        Ok(())
    }
}

fn he_normal<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize, gain: f64) -> Tensor {
    let std = gain / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect(),
    )
}

fn push_linear<R: Rng + ?Sized>(p: &mut ParamSet, rng: &mut R, name: &str, inp: usize, out: usize, gain: f64) {
    p.push(format!("{name}.weight"), he_normal(rng, vec![out, inp], inp, gain));
    p.push(format!("{name}.bias"), Tensor::zeros(vec![out]));
}

fn push_conv<R: Rng + ?Sized>(p: &mut ParamSet, rng: &mut R, name: &str, inp: usize, out: usize, k: usize, gain: f64) {
    p.push(format!("{name}.weight"), he_normal(rng, vec![out, inp, k, k], inp * k * k, gain));
    p.push(format!("{name}.bias"), Tensor::zeros(vec![out]));
}

const HE_GAIN: f64 = std::f64::consts::SQRT_2;

/// Images and per-tap activations for a batch of mapped latents.
pub struct SynthesisVars {
    pub images: Var,
    /// `(tap id, [n, c, h, w] activation)` in tap order.
    pub taps: Vec<(String, Var)>,
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub images: Tensor,
    pub taps: Vec<(String, Tensor)>,
}

impl Synthesis {
    /// Feature stack for anchor row `anchor` against rows `batch`.
    pub fn feature_stack(&self, anchor: usize, batch: &[usize]) -> Result<FeatureStack> {
        FeatureStack::new(
            self.taps
                .iter()
                .map(|(id, t)| FeatureLayer {
                    id: id.clone(),
                    anchor: t.row(anchor).to_vec(),
                    batch: batch.iter().map(|&i| t.row(i).to_vec()).collect(),
                })
                .collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    resolution: usize,
    d_z: usize,
    mapping_layers: usize,
    channels: usize,
    params: ParamSet,
    taps: GeneratorTapSpec,
}

impl Generator {
    pub fn build<R: Rng + ?Sized>(
        resolution: usize,
        d_z: usize,
        mapping_layers: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_resolution(resolution)?;
        if d_z == 0 || channels == 0 {
            return Err(MixdlError::param("generator needs d_z >= 1 and channels >= 1"));
        }
        let mut p = ParamSet::default();
        for l in 0..mapping_layers {
            push_linear(&mut p, rng, &format!("mapping.{l}"), d_z, d_z, HE_GAIN);
        }
        push_linear(&mut p, rng, "input", d_z, channels * 16, HE_GAIN);
        let mut prev = channels;
        let mut taps = Vec::new();
        for i in 0..block_count(resolution) {
            let out = width(channels, i);
            let res = 8 << i;
            push_conv(&mut p, rng, &format!("up{res}.conv"), prev, out, 3, HE_GAIN);
            taps.push(format!("up{res}"));
            prev = out;
        }
        push_conv(&mut p, rng, "to_rgb", prev, 3, 1, 1.0);
        Ok(Generator {
            resolution,
            d_z,
            mapping_layers,
            channels,
            params: p,
            taps: GeneratorTapSpec::new(taps)?,
        })
    }

    pub fn from_config<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Self::build(cfg.resolution, cfg.d_z, cfg.mapping_layers, cfg.g_channels, rng)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn tap_spec(&self) -> &GeneratorTapSpec {
        &self.taps
    }

    pub fn latent_dim(&self) -> usize {
        self.d_z
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn has_mapping(&self) -> bool {
        self.mapping_layers > 0
    }

    /// Mapping network; the identity when there are no mapping layers.
    pub fn map_latent_graph(&self, g: &mut Graph, vars: &[Var], z: Var) -> Var {
        let mut h = z;
        for l in 0..self.mapping_layers {
            h = g.linear(h, vars[2 * l], Some(vars[2 * l + 1]));
            h = g.leaky_relu(h, LRELU_SLOPE);
        }
        h
    }

    pub fn synthesize_graph(&self, g: &mut Graph, vars: &[Var], w: Var) -> SynthesisVars {
        let n = g.value(w).rows();
        let mut idx = 2 * self.mapping_layers;
        let h = g.linear(w, vars[idx], Some(vars[idx + 1]));
        idx += 2;
        let h = g.leaky_relu(h, LRELU_SLOPE);
        let mut h = g.reshape(h, vec![n, self.channels, 4, 4]);
        let mut taps = Vec::with_capacity(self.taps.layer_ids().len());
        for id in self.taps.layer_ids() {
            h = g.upsample2(h);
            h = g.conv2d(h, vars[idx], Some(vars[idx + 1]));
            idx += 2;
            h = g.leaky_relu(h, LRELU_SLOPE);
            taps.push((id.clone(), h));
        }
        let rgb = g.conv2d(h, vars[idx], Some(vars[idx + 1]));
        SynthesisVars {
            images: g.tanh(rgb),
            taps,
        }
    }

    /// Maps prior latents without recording gradients.
    pub fn map_latent(&self, z: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if !self.has_mapping() {
            return Ok(z.to_vec());
        }
        let mut out = Vec::with_capacity(z.len());
        for chunk in z.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let vars = self.params.bind(&mut g, false);
            let zv = g.constant(self.latent_tensor(chunk)?);
            let w = self.map_latent_graph(&mut g, &vars, zv);
            let t = g.value(w);
            out.extend((0..t.rows()).map(|i| t.row(i).to_vec()));
        }
        Ok(out)
    }

    /// Images and tap activations for mapped latents.
    pub fn synthesize(&self, w: &[Vec<f64>]) -> Result<Synthesis> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let wv = g.constant(self.latent_tensor(w)?);
        let out = self.synthesize_graph(&mut g, &vars, wv);
        Ok(Synthesis {
            images: g.value(out.images).clone(),
            taps: out
                .taps
                .iter()
                .map(|(id, v)| (id.clone(), g.value(*v).clone()))
                .collect(),
        })
    }

    /// Images for mapped latents, in bounded-size chunks.
    pub fn render(&self, w: &[Vec<f64>]) -> Result<Vec<Image>> {
        let mut images = Vec::with_capacity(w.len());
        for chunk in w.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let vars = self.params.bind(&mut g, false);
            let wv = g.constant(self.latent_tensor(chunk)?);
            let out = self.synthesize_graph(&mut g, &vars, wv);
            images.extend(Image::batch_from_tensor(g.value(out.images)));
        }
        Ok(images)
    }

    /// Maps then renders prior latents.
    pub fn generate(&self, z: &[Vec<f64>]) -> Result<Vec<Image>> {
        self.render(&self.map_latent(z)?)
    }

    pub fn latent_tensor(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(MixdlError::param("empty latent batch"));
        }
        let mut data = Vec::with_capacity(rows.len() * self.d_z);
        for r in rows {
            if r.len() != self.d_z {
                return Err(MixdlError::param(format!(
                    "latent has dimension {}, generator expects {}",
                    r.len(),
                    self.d_z
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor::new(vec![rows.len(), self.d_z], data))
    }
}

/// Discriminator outputs for one batch.
pub struct DiscriminatorVars {
    /// `[n, 1, 8, 8]` patch logits.
    pub patch: Var,
    /// `[n, d_pen]` penultimate features, when the full trunk was evaluated.
    pub pen: Option<Var>,
    /// `[n, 1]` image-level logits, when the full trunk was evaluated.
    pub logits: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    resolution: usize,
    d_pen: usize,
    top_channels: usize,
    params: ParamSet,
}

impl Discriminator {
    pub fn build<R: Rng + ?Sized>(resolution: usize, channels: usize, d_pen: usize, rng: &mut R) -> Result<Self> {
        check_resolution(resolution)?;
        if channels == 0 || d_pen == 0 {
            return Err(MixdlError::param("discriminator needs channels >= 1 and d_pen >= 1"));
        }
        let blocks = block_count(resolution);
        let mut p = ParamSet::default();
        // block i runs at resolution >> i and mirrors generator block (blocks - 1 - i)
        let mut prev = width(channels, blocks - 1);
        push_conv(&mut p, rng, "from_rgb", 3, prev, 1, HE_GAIN);
        for i in 0..blocks {
            let out = width(channels, blocks - 1 - i);
            push_conv(&mut p, rng, &format!("down{}.conv", resolution >> i), prev, out, 3, HE_GAIN);
            prev = out;
        }
        let patch_channels = if blocks >= 2 { width(channels, 1) } else { width(channels, 0) };
        push_conv(&mut p, rng, "patch", patch_channels, 1, 1, 1.0);
        push_linear(&mut p, rng, "pen", prev * 16, d_pen, HE_GAIN);
        push_linear(&mut p, rng, "out", d_pen, 1, 1.0);
        Ok(Discriminator {
            resolution,
            d_pen,
            top_channels: prev,
            params: p,
        })
    }

    pub fn from_config<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Self::build(cfg.resolution, cfg.d_channels, cfg.d_pen, rng)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn pen_dim(&self) -> usize {
        self.d_pen
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Evaluates the trunk. With `full == false` it stops after the patch
    /// head, which only needs the 8x8 feature map.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var, full: bool) -> DiscriminatorVars {
        let blocks = block_count(self.resolution);
        let patch_idx = 2 + 2 * blocks;
        let n = g.value(x).rows();
        let mut h = g.conv2d(x, vars[0], Some(vars[1]));
        h = g.leaky_relu(h, LRELU_SLOPE);
        let mut patch = None;
        let mut res = self.resolution;
        if res == 8 {
            patch = Some(g.conv2d(h, vars[patch_idx], Some(vars[patch_idx + 1])));
        }
        for i in 0..blocks {
            if !full && patch.is_some() {
                break;
            }
            h = g.conv2d(h, vars[2 + 2 * i], Some(vars[3 + 2 * i]));
            h = g.leaky_relu(h, LRELU_SLOPE);
            h = g.avg_pool2(h);
            res /= 2;
            if res == 8 {
                patch = Some(g.conv2d(h, vars[patch_idx], Some(vars[patch_idx + 1])));
            }
        }
        let patch = patch.expect("patch map at 8x8");
        if !full {
            return DiscriminatorVars {
                patch,
                pen: None,
                logits: None,
            };
        }
        let flat = g.reshape(h, vec![n, self.top_channels * 16]);
        let pen = g.linear(flat, vars[patch_idx + 2], Some(vars[patch_idx + 3]));
        let pen = g.leaky_relu(pen, LRELU_SLOPE);
        let logits = g.linear(pen, vars[patch_idx + 4], Some(vars[patch_idx + 5]));
        DiscriminatorVars {
            patch,
            pen: Some(pen),
            logits: Some(logits),
        }
    }

    /// Penultimate features `d1(x)`.
    pub fn d1(&self, images: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &vars, x, true);
        g.value(out.pen.expect("full pass")).clone()
    }

    /// Final linear layer `d2(pen)`.
    pub fn d2(&self, pen: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let blocks = block_count(self.resolution);
        let idx = 2 + 2 * blocks + 4;
        let p = g.constant(pen.clone());
        let logits = g.linear(p, vars[idx], Some(vars[idx + 1]));
        g.value(logits).clone()
    }

    /// Image-level logits `d2(d1(x))`.
    pub fn logits(&self, images: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &vars, x, true);
        g.value(out.logits.expect("full pass")).clone()
    }

    pub fn patch_logits(&self, images: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &vars, x, false);
        g.value(out.patch).clone()
    }
}
