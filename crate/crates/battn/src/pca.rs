//! Two-component PCA via exact eigendecomposition of the D×D covariance.
//!
//! D is small here (attention head width), so a cyclic Jacobi sweep is both
//! exact enough and fully deterministic — no iterative solver randomness,
//! and a fixed sign convention (first non-negligible coefficient positive)
//! so repeated runs emit identical scatter files.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Pca2 {
    /// [2, D] principal directions, unit norm, deterministic sign.
    pub components: Tensor<f64>,
    /// [N, 2] centered data projected onto the components.
    pub projections: Tensor<f64>,
    /// Fraction of total variance captured by each component, non-increasing.
    pub explained_variance_ratio: [f64; 2],
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), unsorted.
fn jacobi_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← Jᵀ A J on rows/columns p and q
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let evals = (0..d).map(|i| a[i * d + i]).collect();
    (evals, v)
}

/// Projects N×D points onto their top two principal directions.
pub fn pca2(points: &Tensor<f64>) -> Result<Pca2> {
    if points.shape().len() != 2 {
        return Err(Error::shape("pca2", points.shape(), &[0, 0]));
    }
    let (n, d) = (points.rows(), points.cols());
    if n < 2 || d < 2 {
        return Err(Error::DegenerateData(format!("pca2 needs at least 2 points and 2 dims, got {n}x{d}")));
    }

    // center
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(points.row(i)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            centered[i * d + j] = points.at(i, j) - mean[j];
        }
    }

    // covariance (population normalization; the variance ratio is
    // insensitive to the divisor)
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let row = &centered[i * d..(i + 1) * d];
        for p in 0..d {
            let xp = row[p];
            for q in p..d {
                cov[p * d + q] += xp * row[q];
            }
        }
    }
    for p in 0..d {
        for q in p..d {
            let c = cov[p * d + q] / n as f64;
            cov[p * d + q] = c;
            cov[q * d + p] = c;
        }
    }
    let total_var: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if total_var <= 0.0 {
        return Err(Error::DegenerateData("pca2: all points identical (zero variance)".into()));
    }

    let (evals, evecs) = jacobi_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| evals[j].partial_cmp(&evals[i]).unwrap().then(i.cmp(&j)));

    let mut components = Tensor::zeros(&[2, d]);
    let mut ratios = [0.0; 2];
    for k in 0..2 {
        let col = order[k];
        let mut comp: Vec<f64> = (0..d).map(|r| evecs[r * d + col]).collect();
        // fixed sign: first coefficient of non-negligible magnitude is positive
        if let Some(&lead) = comp.iter().find(|x| x.abs() > 1e-12) {
            if lead < 0.0 {
                for x in &mut comp {
                    *x = -*x;
                }
            }
        }
        for j in 0..d {
            components.set(k, j, comp[j]);
        }
        ratios[k] = (evals[col].max(0.0)) / total_var;
    }

    let mut projections = Tensor::zeros(&[n, 2]);
    for i in 0..n {
        let row = &centered[i * d..(i + 1) * d];
        for k in 0..2 {
            let mut acc = 0.0;
            for j in 0..d {
                acc += row[j] * components.at(k, j);
            }
            projections.set(i, k, acc);
        }
    }

    Ok(Pca2 { components, projections, explained_variance_ratio: ratios })
}
