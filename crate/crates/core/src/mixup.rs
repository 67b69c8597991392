//! Mixup coefficient sampling, anchor latents, and the target distribution
//! the distance losses bind to.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MixdlError, Result};
use crate::similarity::ProbVector;

/// Tolerance of the simplex sum check.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientSource {
    /// Dirichlet draw, normalized independent Gamma(alpha_i, 1) variates.
    Dirichlet,
    /// Softmax of independent standard-normal draws.
    Gaussian,
    /// Independent U[0,1) draws divided by their sum.
    Uniform,
}

impl std::str::FromStr for CoefficientSource {
    type Err = MixdlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dirichlet" => Ok(Self::Dirichlet),
            "gaussian" => Ok(Self::Gaussian),
            "uniform" => Ok(Self::Uniform),
            other => Err(MixdlError::param(format!("unknown coefficient source {other:?}"))),
        }
    }
}

/// A point on the probability simplex used to mix `n` latents.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupCoefficients {
    values: Vec<f64>,
    source: CoefficientSource,
    alpha: Vec<f64>,
}

impl MixupCoefficients {
    pub fn new(values: Vec<f64>, source: CoefficientSource, alpha: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(MixdlError::param("mixup coefficients must be nonempty"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MixdlError::param(format!(
                "mixup coefficients must be finite and nonnegative: {values:?}"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(MixdlError::param(format!(
                "mixup coefficients sum to {sum}, not 1"
            )));
        }
        Ok(MixupCoefficients {
            values,
            source,
            alpha,
        })
    }

    /// Coefficients selecting latent `index` exactly.
    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return Err(MixdlError::param(format!("one-hot index {index} out of range for n = {n}")));
        }
        let mut values = vec![0.0; n];
        values[index] = 1.0;
        Self::new(values, CoefficientSource::Dirichlet, vec![1.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn source(&self) -> CoefficientSource {
        self.source
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Applies the same reordering to values and concentration.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n())?;
        let alpha = if self.alpha.len() == self.n() {
            perm.iter().map(|&i| self.alpha[i]).collect()
        } else {
            self.alpha.clone()
        };
        Self::new(perm.iter().map(|&i| self.values[i]).collect(), self.source, alpha)
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(MixdlError::param("permutation length mismatch"));
    }
    for &i in perm {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(MixdlError::param(format!("{perm:?} is not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

/// Draws an `n`-way simplex point. `alpha` holds either one concentration per
/// coordinate or a single value broadcast to all of them; it is only consulted
/// for the Dirichlet source.
pub fn sample_coefficients<R: Rng + ?Sized>(
    n: usize,
    source: CoefficientSource,
    alpha: &[f64],
    rng: &mut R,
) -> Result<MixupCoefficients> {
    if n == 0 {
        return Err(MixdlError::param("cannot sample 0 mixup coefficients"));
    }
    let alpha = broadcast_alpha(alpha, n)?;
    let values = match source {
        CoefficientSource::Dirichlet => {
            if let Some(bad) = alpha.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
                return Err(MixdlError::param(format!(
                    "Dirichlet concentration must be positive and finite, got {bad}"
                )));
            }
            let gammas = alpha
                .iter()
                .map(|&a| Gamma::new(a, 1.0).map_err(|e| MixdlError::param(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            loop {
                let draws: Vec<f64> = gammas.iter().map(|g| g.sample(rng)).collect();
                let sum: f64 = draws.iter().sum();
                // tiny concentrations can underflow every Gamma draw
                if sum > 0.0 && sum.is_finite() {
                    break draws.into_iter().map(|g| g / sum).collect();
                }
            }
        }
        CoefficientSource::Gaussian => {
            let scores: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            ProbVector::softmax(&scores).into_vec()
        }
        CoefficientSource::Uniform => loop {
            let draws: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let sum: f64 = draws.iter().sum();
            if sum >= 1e-12 {
                break draws.into_iter().map(|u| u / sum).collect();
            }
        },
    };
    MixupCoefficients::new(values, source, alpha)
}

fn broadcast_alpha(alpha: &[f64], n: usize) -> Result<Vec<f64>> {
    match alpha.len() {
        1 => Ok(vec![alpha[0]; n]),
        len if len == n => Ok(alpha.to_vec()),
        len => Err(MixdlError::param(format!(
            "alpha has {len} entries; expected 1 or {n}"
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSpace {
    /// Latents drawn from the prior, before any mapping network.
    Prior,
    /// Latents after the mapping network.
    Mapped,
}

/// A batch of latent codes that all live in the same space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    vectors: Vec<Vec<f64>>,
    space: LatentSpace,
}

impl LatentBatch {
    pub fn new(vectors: Vec<Vec<f64>>, space: LatentSpace) -> Result<Self> {
        let dim = vectors
            .first()
            .map(Vec::len)
            .ok_or_else(|| MixdlError::param("latent batch is empty"))?;
        if dim == 0 {
            return Err(MixdlError::param("latent dimension must be at least 1"));
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
            return Err(MixdlError::param(format!(
                "latent dimensions disagree: {} vs {dim}",
                v.len()
            )));
        }
        Ok(LatentBatch { vectors, space })
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn space(&self) -> LatentSpace {
        self.space
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }
}

/// A single latent code tagged with its space.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub values: Vec<f64>,
    pub space: LatentSpace,
}

/// Convex combination `sum_i c_i z_i` of the batch.
pub fn anchor_latent(batch: &LatentBatch, coeff: &MixupCoefficients) -> Result<Latent> {
    let rows: Vec<&[f64]> = batch.vectors.iter().map(Vec::as_slice).collect();
    let values = mix_rows(&rows, coeff.values())?;
    Ok(Latent {
        values,
        space: batch.space,
    })
}

/// Weighted sum of equally sized rows. Zero weights are skipped so a one-hot
/// weight vector reproduces the selected row bit for bit.
pub(crate) fn mix_rows(rows: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    if rows.len() != weights.len() {
        return Err(MixdlError::param(format!(
            "{} latents but {} mixup coefficients",
            rows.len(),
            weights.len()
        )));
    }
    let dim = rows.first().map_or(0, |r| r.len());
    let mut acc: Option<Vec<f64>> = None;
    for (row, &w) in rows.iter().zip(weights) {
        if row.len() != dim {
            return Err(MixdlError::param("latent dimensions disagree"));
        }
        if w == 0.0 {
            continue;
        }
        match acc.as_mut() {
            None => acc = Some(row.iter().map(|x| w * x).collect()),
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(row.iter()) {
                    *a += w * x;
                }
            }
        }
    }
    Ok(acc.unwrap_or_else(|| vec![0.0; dim]))
}

/// Softmax over the raw coefficient values.
pub fn target_distribution(coeff: &MixupCoefficients) -> ProbVector {
    ProbVector::softmax(coeff.values())
}
