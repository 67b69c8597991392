//! Distribution-level metrics over embeddings.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{MixdlError, Result};

fn to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.len() < 2 {
        return Err(MixdlError::param(format!("{what} needs at least 2 rows, got {}", rows.len())));
    }
    let e = rows[0].len();
    if e == 0 || rows.iter().any(|r| r.len() != e) {
        return Err(MixdlError::param(format!("{what} rows must share a nonzero width")));
    }
    Ok(DMatrix::from_fn(rows.len(), e, |i, j| rows[i][j]))
}

/// Mean and unbiased covariance of the rows of `x`.
fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

fn symmetric(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetric(m.clone()));
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// `Tr((A B)^{1/2})` for PSD `A`, `B`, via the symmetric form
/// `A^{1/2} B A^{1/2}`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let sa = psd_sqrt(a);
    let inner = symmetric(&sa * b * &sa);
    SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum()
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn frechet_distance(emb_a: &[Vec<f64>], emb_b: &[Vec<f64>]) -> Result<f64> {
    let a = to_matrix(emb_a, "frechet_distance first set")?;
    let b = to_matrix(emb_b, "frechet_distance second set")?;
    if a.ncols() != b.ncols() {
        return Err(MixdlError::param("embedding sets differ in width"));
    }
    let (mu_a, cov_a) = moments(&a);
    let (mu_b, cov_b) = moments(&b);
    let mean_term = (&mu_a - &mu_b).norm_squared();
    // averaging both orders makes the result exactly symmetric
    let tr = 0.5 * (trace_sqrt_product(&cov_a, &cov_b) + trace_sqrt_product(&cov_b, &cov_a));
    let d = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr;
    Ok(d.max(0.0))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance from each point to its `k`-th nearest other point.
fn knn_radii(points: &[Vec<f64>], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| euclidean(p, q))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn coverage(manifold: &[Vec<f64>], radii: &[f64], queries: &[Vec<f64>]) -> f64 {
    let inside = queries
        .iter()
        .filter(|q| {
            manifold
                .iter()
                .zip(radii)
                .any(|(m, &r)| euclidean(q, m) <= r)
        })
        .count();
    inside as f64 / queries.len() as f64
}

/// k-NN manifold precision and recall.
pub fn knn_precision_recall(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(MixdlError::param("k must be at least 1"));
    }
    if real.len() <= k || fake.len() <= k {
        return Err(MixdlError::param(format!(
            "precision/recall needs more than k={k} points per set, got {} real and {} fake",
            real.len(),
            fake.len()
        )));
    }
    let width = real[0].len();
    if real.iter().chain(fake).any(|r| r.len() != width) {
        return Err(MixdlError::param("embedding sets differ in width"));
    }
    let precision = coverage(real, &knn_radii(real, k), fake);
    let recall = coverage(fake, &knn_radii(fake, k), real);
    Ok((precision, recall))
}
