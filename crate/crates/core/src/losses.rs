//! Mixup distance losses for the generator and the discriminator.
//!
//! Both losses measure `KL(profile || softmax(c))`, where the profile is the
//! softmax over cosine similarities between the anchor (mixed) sample and each
//! batch member. The generator loss averages this over tapped layers; the
//! discriminator loss applies it to linearly projected penultimate features.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MixdlError, Result};
use crate::mixup::{target_distribution, MixupCoefficients};
use crate::similarity::{profile_kl_with_grad, FeatureStack};
use crate::tensor::Tensor;

/// Output width of the discriminator projection head.
pub const DEFAULT_PROJECTION_DIM: usize = 512;

/// Affine map `y = W x + b` applied to penultimate discriminator features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    weight: Tensor,
    bias: Vec<f64>,
}

impl ProjectionHead {
    /// `weight` is `[out_dim, in_dim]`.
    pub fn new(weight: Tensor, bias: Vec<f64>) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(MixdlError::param("projection weight must be a matrix"));
        }
        if weight.shape()[0] != bias.len() {
            return Err(MixdlError::param(format!(
                "projection weight has {} rows but bias has {} entries",
                weight.shape()[0],
                bias.len()
            )));
        }
        if !weight.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(MixdlError::param("projection parameters must be finite"));
        }
        Ok(ProjectionHead { weight, bias })
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = Tensor::zeros(vec![dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        ProjectionHead {
            weight: w,
            bias: vec![0.0; dim],
        }
    }

    /// Weights drawn from N(0, 1/in_dim), zero bias.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        ProjectionHead {
            weight: Tensor::new(vec![out_dim, in_dim], data),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(MixdlError::param(format!(
                "projection head expects {} features, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok((0..self.output_dim())
            .map(|o| {
                let row = self.weight.row(o);
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect())
    }
}

/// Ordered generator layers whose activations enter the generator loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorTapSpec {
    layer_ids: Vec<String>,
}

impl GeneratorTapSpec {
    pub fn new(layer_ids: Vec<String>) -> Result<Self> {
        if layer_ids.is_empty() {
            return Err(MixdlError::param("tap spec must name at least one layer"));
        }
        for (i, id) in layer_ids.iter().enumerate() {
            if layer_ids[..i].contains(id) {
                return Err(MixdlError::param(format!("duplicate tap {id}")));
            }
        }
        Ok(GeneratorTapSpec { layer_ids })
    }

    pub fn layer_ids(&self) -> &[String] {
        &self.layer_ids
    }
}

/// Per-layer gradient of the generator loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub anchor: Vec<f64>,
    pub batch: Vec<Vec<f64>>,
}

/// Mean over layers of `KL(q^l || softmax(c))`.
pub fn generator_distance_loss(stack: &FeatureStack, coeff: &MixupCoefficients) -> Result<f64> {
    generator_distance_loss_with_grad(stack, coeff).map(|(loss, _)| loss)
}

pub fn generator_distance_loss_with_grad(
    stack: &FeatureStack,
    coeff: &MixupCoefficients,
) -> Result<(f64, Vec<LayerGrad>)> {
    if stack.is_empty() {
        return Err(MixdlError::param("generator distance loss over an empty feature stack"));
    }
    if stack.width() != coeff.n() {
        return Err(MixdlError::param(format!(
            "feature batch width {} does not match {} mixup coefficients",
            stack.width(),
            coeff.n()
        )));
    }
    let target = target_distribution(coeff);
    let scale = 1.0 / stack.layers().len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(stack.layers().len());
    for layer in stack.layers() {
        let term = profile_kl_with_grad(&layer.anchor, &layer.batch, &target)?;
        total += term.loss;
        grads.push(LayerGrad {
            anchor: term.grad_anchor.iter().map(|g| g * scale).collect(),
            batch: term
                .grad_batch
                .iter()
                .map(|row| row.iter().map(|g| g * scale).collect())
                .collect(),
        });
    }
    Ok((total * scale, grads))
}

/// Gradient of the discriminator loss with respect to its inputs and the
/// projection head parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorDistanceGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub batch: Vec<Vec<f64>>,
    /// Same layout as the head weight, `[out_dim, in_dim]` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// `KL(r || softmax(c))` where `r` is the similarity profile of projected
/// penultimate features.
pub fn discriminator_distance_loss(
    anchor_pen: &[f64],
    batch_pen: &[Vec<f64>],
    head: &ProjectionHead,
    coeff: &MixupCoefficients,
) -> Result<f64> {
    discriminator_distance_loss_with_grad(anchor_pen, batch_pen, head, coeff).map(|g| g.loss)
}

pub fn discriminator_distance_loss_with_grad(
    anchor_pen: &[f64],
    batch_pen: &[Vec<f64>],
    head: &ProjectionHead,
    coeff: &MixupCoefficients,
) -> Result<DiscriminatorDistanceGrad> {
    if batch_pen.len() != coeff.n() {
        return Err(MixdlError::param(format!(
            "{} penultimate feature rows but {} mixup coefficients",
            batch_pen.len(),
            coeff.n()
        )));
    }
    let anchor_proj = head.project(anchor_pen)?;
    let batch_proj = batch_pen
        .iter()
        .map(|x| head.project(x))
        .collect::<Result<Vec<_>>>()?;
    let term = profile_kl_with_grad(&anchor_proj, &batch_proj, &target_distribution(coeff))?;

    let (out_dim, in_dim) = (head.output_dim(), head.input_dim());
    let mut weight = vec![0.0; out_dim * in_dim];
    let mut bias = vec![0.0; out_dim];
    let mut back = |g: &[f64], x: &[f64]| -> Vec<f64> {
        let mut dx = vec![0.0; in_dim];
        for o in 0..out_dim {
            bias[o] += g[o];
            let w = head.weight.row(o);
            let dw = &mut weight[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dw[i] += g[o] * x[i];
                dx[i] += g[o] * w[i];
            }
        }
        dx
    };
    let anchor = back(&term.grad_anchor, anchor_pen);
    let batch = term
        .grad_batch
        .iter()
        .zip(batch_pen)
        .map(|(g, x)| back(g, x))
        .collect();
    Ok(DiscriminatorDistanceGrad {
        loss: term.loss,
        anchor,
        batch,
        weight,
        bias,
    })
}
