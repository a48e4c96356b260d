//! Mahalanobis metric on the nonconstant auxiliaries and k-nearest-neighbor
//! donor sets.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{DataError, PsiError};
use crate::linalg::condition_number_sym;

const RIDGE_EPS: f64 = 1e-8;
const MAX_CONDITION: f64 = 1e12;

/// Sample covariance of the nonconstant auxiliary variables over `S`.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    /// Auxiliary column indices entering the metric (never the constant).
    pub columns: Vec<usize>,
    pub sigma: DMatrix<f64>,
    /// Nonconstant columns that turned out to be constant on `S`.
    pub dropped: Vec<usize>,
    pub ridge_applied: bool,
}

pub fn estimate_covariance(ds: &Dataset) -> Result<CovarianceEstimate, DataError> {
    let n = ds.n();
    if n < 2 {
        return Err(DataError::Shape(format!("covariance needs n >= 2, got {n}")));
    }
    let mut columns = Vec::new();
    let mut dropped = Vec::new();
    for c in 1..ds.q() {
        let first = ds.x(0)[c];
        if (0..n).all(|i| ds.x(i)[c] == first) {
            warn!("auxiliary `{}` is constant on the sample; dropped from the metric", ds.aux_names()[c]);
            dropped.push(c);
        } else {
            columns.push(c);
        }
    }
    let p = columns.len();
    let mut mean = vec![0.0; p];
    for i in 0..n {
        for (a, &c) in columns.iter().enumerate() {
            mean[a] += ds.x(i)[c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut sigma = DMatrix::zeros(p, p);
    for i in 0..n {
        let x = ds.x(i);
        for a in 0..p {
            let da = x[columns[a]] - mean[a];
            for b in a..p {
                sigma[(a, b)] += da * (x[columns[b]] - mean[b]);
            }
        }
    }
    for a in 0..p {
        for b in a..p {
            let v = sigma[(a, b)] / (n - 1) as f64;
            sigma[(a, b)] = v;
            sigma[(b, a)] = v;
        }
    }
    let mut ridge_applied = false;
    if p > 0 && condition_number_sym(&sigma) > MAX_CONDITION {
        let mean_diag = sigma.diagonal().mean();
        for a in 0..p {
            sigma[(a, a)] += RIDGE_EPS * mean_diag;
        }
        ridge_applied = true;
        warn!("auxiliary covariance is numerically singular; ridge regularization applied");
    }
    Ok(CovarianceEstimate {
        columns,
        sigma,
        dropped,
        ridge_applied,
    })
}

/// `√((x_i − x_j)ᵀ Σ⁻¹ (x_i − x_j))` for already-selected nonconstant coordinates.
pub fn mahalanobis(xi: &[f64], xj: &[f64], sigma_inv: &DMatrix<f64>) -> f64 {
    let d = DVector::from_iterator(xi.len(), xi.iter().zip(xj).map(|(a, b)| a - b));
    (d.dot(&(sigma_inv * &d))).max(0.0).sqrt()
}

/// Precomputed Mahalanobis metric: units are mapped to whitened coordinates so
/// that distances become Euclidean.
#[derive(Debug, Clone)]
pub struct MahalanobisMetric {
    pub covariance: CovarianceEstimate,
    whitened: Vec<DVector<f64>>,
}

impl MahalanobisMetric {
    pub fn new(ds: &Dataset) -> Result<Self, DataError> {
        let covariance = estimate_covariance(ds)?;
        let p = covariance.columns.len();
        if p == 0 {
            return Ok(MahalanobisMetric {
                covariance,
                whitened: vec![DVector::zeros(0); ds.n()],
            });
        }
        let chol = covariance
            .sigma
            .clone()
            .cholesky()
            .ok_or_else(|| DataError::Shape("covariance not positive definite".into()))?;
        let l = chol.l();
        let whitened = (0..ds.n())
            .map(|i| {
                let x = DVector::from_iterator(p, covariance.columns.iter().map(|&c| ds.x(i)[c]));
                l.solve_lower_triangular(&x).expect("cholesky factor is invertible")
            })
            .collect();
        Ok(MahalanobisMetric {
            covariance,
            whitened,
        })
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        (&self.whitened[i] - &self.whitened[j]).norm()
    }

    pub fn sigma_inverse(&self) -> DMatrix<f64> {
        self.covariance
            .sigma
            .clone()
            .try_inverse()
            .unwrap_or_else(|| crate::linalg::pinv(&self.covariance.sigma).0)
    }
}

/// Ordered donor-candidate lists, one per nonrespondent.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnSets {
    pub k: usize,
    /// Nonrespondent unit indices, in `Dataset::nonrespondents()` order.
    pub recipients: Vec<usize>,
    /// Respondent unit indices, ascending distance (ties by unit index).
    pub neighbors: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
}

/// The `k` respondents closest to each nonrespondent.
pub fn knn_sets(ds: &Dataset, k: usize) -> Result<KnnSets, crate::error::Error> {
    let metric = MahalanobisMetric::new(ds)?;
    Ok(knn_sets_with(ds, &metric, k)?)
}

pub fn knn_sets_with(ds: &Dataset, metric: &MahalanobisMetric, k: usize) -> Result<KnnSets, PsiError> {
    let n_r = ds.n_r();
    if n_r == 0 {
        return Err(PsiError::NoRespondents);
    }
    if k == 0 || k > n_r {
        return Err(PsiError::KTooLarge { k, n_r });
    }
    let mut neighbors = Vec::with_capacity(ds.n_m());
    let mut distances = Vec::with_capacity(ds.n_m());
    for &j in ds.nonrespondents() {
        let mut cand: Vec<(f64, usize)> = ds
            .respondents()
            .iter()
            .map(|&i| (metric.distance(i, j), i))
            .collect();
        let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by);
            cand.truncate(k);
        }
        cand.sort_by(by);
        neighbors.push(cand.iter().map(|c| c.1).collect());
        distances.push(cand.iter().map(|c| c.0).collect());
    }
    Ok(KnnSets {
        k,
        recipients: ds.nonrespondents().to_vec(),
        neighbors,
        distances,
    })
}
