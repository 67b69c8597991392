//! Pairwise-similarity distributions and KL divergence.
//!
//! A similarity profile is the softmax over the cosine similarities between
//! an anchor vector and each member of a batch. The distance losses compare
//! such profiles against a target distribution with `KL(q || p)`.

use crate::error::{MixdlError, Result};

/// Probability-sum tolerance of [`ProbVector`].
pub const PROB_TOLERANCE: f64 = 1e-9;

/// A strictly positive discrete distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(MixdlError::param("probability vector is empty"));
        }
        if probs.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(MixdlError::param(format!(
                "probabilities must be strictly positive and finite: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_TOLERANCE {
            return Err(MixdlError::param(format!("probabilities sum to {sum}")));
        }
        Ok(ProbVector(probs))
    }

    /// Numerically stable softmax. Entries are floored at the smallest
    /// positive normal so the result stays strictly positive.
    pub fn softmax(scores: &[f64]) -> Self {
        assert!(!scores.is_empty(), "softmax of an empty slice");
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        ProbVector(
            exps.into_iter()
                .map(|e| (e / sum).max(f64::MIN_POSITIVE))
                .collect(),
        )
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Flattened activations of one layer: the anchor sample and the batch it
/// was mixed from.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLayer {
    pub id: String,
    pub anchor: Vec<f64>,
    pub batch: Vec<Vec<f64>>,
}

/// Per-layer activations for a batch plus its anchor.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FeatureStack {
    layers: Vec<FeatureLayer>,
}

impl FeatureStack {
    pub fn new(layers: Vec<FeatureLayer>) -> Result<Self> {
        if let Some(first) = layers.first() {
            let n = first.batch.len();
            for layer in &layers {
                if layer.batch.len() != n {
                    return Err(MixdlError::param(format!(
                        "layer {} has batch width {}, expected {n}",
                        layer.id,
                        layer.batch.len()
                    )));
                }
                let dim = layer.anchor.len();
                if layer.batch.iter().any(|v| v.len() != dim) {
                    return Err(MixdlError::param(format!(
                        "layer {} mixes vector dimensions",
                        layer.id
                    )));
                }
            }
        }
        Ok(FeatureStack { layers })
    }

    pub fn layers(&self) -> &[FeatureLayer] {
        &self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Batch width shared by every layer.
    pub fn width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.batch.len())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(MixdlError::param(format!(
            "cosine similarity of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(MixdlError::NumericalDomain(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Softmax over the cosine similarities between `anchor` and each batch row.
pub fn similarity_profile<V: AsRef<[f64]>>(anchor: &[f64], batch: &[V]) -> Result<ProbVector> {
    if batch.is_empty() {
        return Err(MixdlError::param("similarity profile over an empty batch"));
    }
    let sims = batch
        .iter()
        .map(|b| cosine_similarity(anchor, b.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbVector::softmax(&sims))
}

/// `KL(q || p) = sum_i q_i ln(q_i / p_i)` in nats.
pub fn kl_divergence(q: &ProbVector, p: &ProbVector) -> Result<f64> {
    if q.len() != p.len() {
        return Err(MixdlError::param(format!(
            "KL divergence between distributions of sizes {} and {}",
            q.len(),
            p.len()
        )));
    }
    let kl: f64 = q
        .probs()
        .iter()
        .zip(p.probs())
        .map(|(qi, pi)| qi * (qi / pi).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// `KL(similarity_profile(anchor, batch) || target)` with its gradient with
/// respect to the anchor and every batch row.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileKl {
    pub loss: f64,
    pub profile: ProbVector,
    pub grad_anchor: Vec<f64>,
    pub grad_batch: Vec<Vec<f64>>,
}

pub fn profile_kl_with_grad<V: AsRef<[f64]>>(
    anchor: &[f64],
    batch: &[V],
    target: &ProbVector,
) -> Result<ProfileKl> {
    if batch.len() != target.len() {
        return Err(MixdlError::param(format!(
            "batch of {} rows against a {}-way target",
            batch.len(),
            target.len()
        )));
    }
    let dim = anchor.len();
    let na = norm(anchor);
    if na == 0.0 {
        return Err(MixdlError::NumericalDomain("zero-norm anchor features".into()));
    }
    let mut norms = Vec::with_capacity(batch.len());
    let mut sims = Vec::with_capacity(batch.len());
    for b in batch {
        let b = b.as_ref();
        if b.len() != dim {
            return Err(MixdlError::param("anchor and batch feature sizes differ"));
        }
        let nb = norm(b);
        if nb == 0.0 {
            return Err(MixdlError::NumericalDomain("zero-norm batch features".into()));
        }
        sims.push(dot(anchor, b) / (na * nb));
        norms.push(nb);
    }
    let profile = ProbVector::softmax(&sims);
    let loss = kl_divergence(&profile, target)?;

    // dL/ds_j = q_j (ln(q_j / p_j) - L)
    let log_ratio: Vec<f64> = profile
        .probs()
        .iter()
        .zip(target.probs())
        .map(|(q, p)| (q / p).ln())
        .collect();
    let raw_loss: f64 = profile.probs().iter().zip(&log_ratio).map(|(q, r)| q * r).sum();

    let mut grad_anchor = vec![0.0; dim];
    let mut grad_batch = Vec::with_capacity(batch.len());
    for (j, b) in batch.iter().enumerate() {
        let b = b.as_ref();
        let g = profile.probs()[j] * (log_ratio[j] - raw_loss);
        let (nb, s) = (norms[j], sims[j]);
        let inv = 1.0 / (na * nb);
        for d in 0..dim {
            grad_anchor[d] += g * (b[d] * inv - s * anchor[d] / (na * na));
        }
        grad_batch.push(
            (0..dim)
                .map(|d| g * (anchor[d] * inv - s * b[d] / (nb * nb)))
                .collect(),
        );
    }
    Ok(ProfileKl {
        loss,
        profile,
        grad_anchor,
        grad_batch,
    })
}
