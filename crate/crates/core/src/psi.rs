//! Imputation-probability matrices `ψ` over `S_r × S_m`.
//!
//! Entry `ψ_ij` is the probability that respondent `i` donates to
//! nonrespondent `j`; every column sums to one. Besides the simple random
//! (`ψ^srs`) and k-nearest-neighbor (`ψ^knn`) matrices, this module builds the
//! balanced matrix `ψ^bknn` by alternating raking calibration of the aggregated
//! donor weights with column normalization, until the expected imputed
//! auxiliary totals match the nonrespondents' own totals.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use log::debug;
use nalgebra::DMatrix;

use crate::calibration::{self, TAU_ABS};
use crate::data::Dataset;
use crate::error::{DataError, PsiError};
use crate::neighbors::KnnSets;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_OUTER: usize = 500;

const STALL_WINDOW: usize = 10;
const STALL_DECREASE: f64 = 1e-12;

/// Column-sparse matrix of imputation probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiMatrix {
    /// Nonrespondent unit indices; column `m` belongs to `recipients[m]`.
    pub recipients: Vec<usize>,
    /// Nonzero entries `(respondent unit index, ψ)` per column, sorted by unit.
    pub columns: Vec<Vec<(usize, f64)>>,
    /// Neighborhood size (0 for `ψ^srs`).
    pub k: usize,
    /// Relative balance residual per auxiliary variable.
    pub balance_residual: Vec<f64>,
}

impl PsiMatrix {
    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn nnz(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }

    /// `ψ_ij` addressed by unit indices; zero outside the support.
    pub fn get(&self, donor: usize, recipient: usize) -> f64 {
        self.recipients
            .iter()
            .position(|&j| j == recipient)
            .and_then(|m| {
                self.columns[m]
                    .iter()
                    .find(|&&(i, _)| i == donor)
                    .map(|&(_, p)| p)
            })
            .unwrap_or(0.0)
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.columns
            .iter()
            .map(|c| c.iter().map(|&(_, p)| p).sum())
            .collect()
    }

    /// Support as `(donor, recipient)` unit pairs.
    pub fn support(&self) -> HashSet<(usize, usize)> {
        self.columns
            .iter()
            .zip(&self.recipients)
            .flat_map(|(c, &j)| c.iter().filter(|e| e.1 > 0.0).map(move |&(i, _)| (i, j)))
            .collect()
    }

    pub fn max_balance_residual(&self) -> f64 {
        self.balance_residual.iter().fold(0.0, |m: f64, &r| m.max(r))
    }

    /// Expected donor mass `Σ_j d_j ψ_ij` for each respondent.
    pub fn donor_mass(&self, ds: &Dataset) -> HashMap<usize, f64> {
        let mut mass: HashMap<usize, f64> = ds.respondents().iter().map(|&i| (i, 0.0)).collect();
        for (col, &j) in self.columns.iter().zip(&self.recipients) {
            for &(i, p) in col {
                *mass.entry(i).or_insert(0.0) += ds.weight(j) * p;
            }
        }
        mass
    }

    /// Expected final weight of each respondent, `d_i + Σ_j d_j ψ_ij`, in
    /// `Dataset::respondents()` order.
    pub fn implied_weights(&self, ds: &Dataset) -> Vec<f64> {
        let mass = self.donor_mass(ds);
        ds.respondents().iter().map(|&i| ds.weight(i) + mass[&i]).collect()
    }

    /// Response propensities `θ_i = 1 / (1 + Σ_j (d_j/d_i) ψ_ij)` under which
    /// the imputed total is unbiased, in `Dataset::respondents()` order.
    pub fn implied_response_propensities(&self, ds: &Dataset) -> Vec<f64> {
        let mass = self.donor_mass(ds);
        ds.respondents()
            .iter()
            .map(|&i| 1.0 / (1.0 + mass[&i] / ds.weight(i)))
            .collect()
    }

    /// Writes `donor_id,recipient_id,probability` rows for the nonzero entries.
    pub fn write_csv<W: Write>(&self, ds: &Dataset, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["donor_id", "recipient_id", "probability"])?;
        for (col, &j) in self.columns.iter().zip(&self.recipients) {
            for &(i, p) in col {
                w.write_record([ds.unit_id(i), ds.unit_id(j), &format!("{p:e}")])?;
            }
        }
        w.flush().map_err(|source| DataError::Io {
            path: "<writer>".into(),
            source,
        })
    }
}

/// `ψ^srs`: every respondent equally likely, `1/n_r`.
pub fn psi_srs(ds: &Dataset) -> Result<PsiMatrix, PsiError> {
    let n_r = ds.n_r();
    if n_r == 0 {
        return Err(PsiError::NoRespondents);
    }
    let p = 1.0 / n_r as f64;
    let col: Vec<(usize, f64)> = ds.respondents().iter().map(|&i| (i, p)).collect();
    let mut psi = PsiMatrix {
        recipients: ds.nonrespondents().to_vec(),
        columns: vec![col; ds.n_m()],
        k: 0,
        balance_residual: Vec::new(),
    };
    psi.balance_residual = balance_residual(&psi, ds);
    Ok(psi)
}

/// `ψ^knn`: `1/k` on each recipient's k nearest respondents.
pub fn psi_knn(knn: &KnnSets, ds: &Dataset) -> PsiMatrix {
    let p = 1.0 / knn.k as f64;
    let columns = knn
        .neighbors
        .iter()
        .map(|nb| {
            let mut c: Vec<(usize, f64)> = nb.iter().map(|&i| (i, p)).collect();
            c.sort_by_key(|e| e.0);
            c
        })
        .collect();
    let mut psi = PsiMatrix {
        recipients: knn.recipients.clone(),
        columns,
        k: knn.k,
        balance_residual: Vec::new(),
    };
    psi.balance_residual = balance_residual(&psi, ds);
    psi
}

/// Zeroes forbidden `(donor, recipient)` pairs (unit indices) and rescales
/// each affected column to sum to one.
pub fn apply_edit_rules(psi: &PsiMatrix, forbidden: &HashSet<(usize, usize)>) -> Result<PsiMatrix, PsiError> {
    let mut out = psi.clone();
    for (col, &j) in out.columns.iter_mut().zip(&psi.recipients) {
        let before = col.len();
        col.retain(|&(i, p)| p > 0.0 && !forbidden.contains(&(i, j)));
        if col.is_empty() {
            return Err(PsiError::EmptyColumn(j));
        }
        if col.len() != before {
            let s: f64 = col.iter().map(|e| e.1).sum();
            col.iter_mut().for_each(|e| e.1 /= s);
        }
    }
    Ok(out)
}

/// Relative gap between `Σ_j d_j Σ_i ψ_ij x_i` and `Σ_j d_j x_j`, per variable.
pub fn balance_residual(psi: &PsiMatrix, ds: &Dataset) -> Vec<f64> {
    let q = ds.q();
    let target = ds.nonrespondent_aux_total();
    let mut expected = vec![0.0; q];
    for (col, &j) in psi.columns.iter().zip(&psi.recipients) {
        let dj = ds.weight(j);
        for &(i, p) in col {
            for (e, x) in expected.iter_mut().zip(ds.x(i)) {
                *e += dj * p * x;
            }
        }
    }
    expected
        .iter()
        .zip(&target)
        .map(|(e, t)| (e - t).abs() / t.abs().max(TAU_ABS))
        .collect()
}

/// Smallest `k` satisfying `k ≥ (n_m + Q) / n_m`.
pub fn min_admissible_k(n_m: usize, q: usize) -> usize {
    if n_m == 0 {
        return 1;
    }
    (n_m + q).div_ceil(n_m)
}

/// Alternates raking and normalization starting from `psi0` until the balance
/// residual is within `tol` on every auxiliary variable.
///
/// Zero entries of `psi0` stay zero. Fails with [`PsiError::Infeasible`] when
/// the raking step has no solution, the residual stalls, or `max_outer`
/// iterations are exhausted.
pub fn compute_psi_bknn(psi0: &PsiMatrix, ds: &Dataset, tol: f64, max_outer: usize) -> Result<PsiMatrix, PsiError> {
    let q = ds.q();
    let resp = ds.respondents();
    let pos: HashMap<usize, usize> = resp.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let x_r = DMatrix::from_fn(resp.len(), q, |r, c| ds.x(resp[r])[c]);
    let target = ds.nonrespondent_aux_total();

    let mut psi = psi0.clone();
    let mut residual = balance_residual(&psi, ds);
    let mut best = f64::INFINITY;
    let mut stalled = 0;

    for outer in 0..=max_outer {
        let res = residual.iter().fold(0.0_f64, |m, &r| m.max(r));
        if res <= tol {
            debug!("psi_bknn converged after {outer} outer iterations (residual {res:e})");
            psi.balance_residual = residual;
            return Ok(psi);
        }
        if outer == max_outer {
            break;
        }
        if best - res < STALL_DECREASE {
            stalled += 1;
            if stalled >= STALL_WINDOW {
                return Err(PsiError::Infeasible(format!(
                    "balance residual stalled at {res:e} after {outer} iterations"
                )));
            }
        } else {
            stalled = 0;
        }
        best = best.min(res);

        // calibration of the aggregated donor weights
        let mut d_tilde = vec![0.0; resp.len()];
        for (col, &j) in psi.columns.iter().zip(&psi.recipients) {
            for &(i, p) in col {
                d_tilde[pos[&i]] += ds.weight(j) * p;
            }
        }
        let sol = calibration::rake(
            &d_tilde,
            &x_r,
            &target,
            calibration::DEFAULT_TOL,
            calibration::DEFAULT_MAX_ITER,
        )
        .map_err(|e| PsiError::Infeasible(format!("raking failed at iteration {outer}: {e}")))?;
        let factor: Vec<f64> = resp
            .iter()
            .map(|&i| {
                let eta: f64 = ds.x(i).iter().zip(&sol.lambda).map(|(x, l)| x * l).sum();
                eta.exp()
            })
            .collect();

        // scaling then normalization
        for col in psi.columns.iter_mut() {
            let mut s = 0.0;
            for e in col.iter_mut() {
                e.1 *= factor[pos[&e.0]];
                s += e.1;
            }
            if !(s > 0.0 && s.is_finite()) {
                return Err(PsiError::Infeasible(format!("column mass degenerated at iteration {outer}")));
            }
            col.iter_mut().for_each(|e| e.1 /= s);
        }
        residual = balance_residual(&psi, ds);
    }
    Err(PsiError::Infeasible(format!(
        "no convergence within {max_outer} outer iterations (residual {:e})",
        residual.iter().fold(0.0_f64, |m, &r| m.max(r))
    )))
}

/// Tries `k = k_start, k_start + 1, …, k_max` and returns the first `k` for
/// which [`compute_psi_bknn`] succeeds. `start_for_k` builds the starting
/// matrix (typically `ψ^knn`, possibly edit-masked) for a given `k`.
pub fn select_k<F>(
    ds: &Dataset,
    mut start_for_k: F,
    k_start: usize,
    k_max: usize,
    tol: f64,
    max_outer: usize,
) -> Result<(usize, PsiMatrix), PsiError>
where
    F: FnMut(usize) -> Result<PsiMatrix, PsiError>,
{
    let min = min_admissible_k(ds.n_m(), ds.q());
    if k_start < min {
        return Err(PsiError::KTooSmall { k: k_start, min });
    }
    if k_max > ds.n_r() {
        return Err(PsiError::KTooLarge { k: k_max, n_r: ds.n_r() });
    }
    for k in k_start..=k_max {
        let psi0 = start_for_k(k)?;
        match compute_psi_bknn(&psi0, ds, tol, max_outer) {
            Ok(psi) => return Ok((k, psi)),
            Err(PsiError::Infeasible(reason)) => debug!("k = {k} infeasible: {reason}"),
            Err(e) => return Err(e),
        }
    }
    Err(PsiError::AllInfeasible(k_max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neighbors::knn_sets;

    fn tiny(recipient_x: f64) -> (Dataset, PsiMatrix) {
        let ds = Dataset::census(
            vec![vec![1.0], vec![3.0], vec![recipient_x]],
            vec![Some(10.0), Some(30.0), None],
        )
        .unwrap();
        let psi = psi_knn(&knn_sets(&ds, 2).unwrap(), &ds);
        (ds, psi)
    }

    #[test]
    fn srs_entries() {
        let ds = Dataset::census(
            (0..6).map(|i| vec![i as f64]).collect(),
            vec![Some(1.0), Some(2.0), None, Some(3.0), Some(4.0), None],
        )
        .unwrap();
        let psi = psi_srs(&ds).unwrap();
        assert_eq!(psi.nnz(), 8);
        assert!(psi.columns.iter().flatten().all(|&(_, p)| p == 0.25));
        assert!(psi.column_sums().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn srs_single_respondent() {
        let ds = Dataset::census(vec![vec![0.0], vec![1.0]], vec![Some(1.0), None]).unwrap();
        let psi = psi_srs(&ds).unwrap();
        assert_eq!(psi.columns, vec![vec![(0, 1.0)]]);
    }

    #[test]
    fn knn_support_matches() {
        let ds = Dataset::census(
            (0..10).map(|i| vec![(i * i) as f64]).collect(),
            (0..10).map(|i| if i % 3 == 0 { None } else { Some(i as f64) }).collect(),
        )
        .unwrap();
        let knn = knn_sets(&ds, 3).unwrap();
        let psi = psi_knn(&knn, &ds);
        for (m, nb) in knn.neighbors.iter().enumerate() {
            let mut s: Vec<usize> = psi.columns[m].iter().map(|e| e.0).collect();
            let mut t = nb.clone();
            s.sort();
            t.sort();
            assert_eq!(s, t);
            assert!(psi.columns[m].iter().all(|e| (e.1 - 1.0 / 3.0).abs() < 1e-16));
        }
    }

    #[test]
    fn edit_rules() {
        let (_, psi) = tiny(2.0);
        let j = psi.recipients[0];
        // forbidding a pair outside the support changes nothing
        let same = apply_edit_rules(&psi, &HashSet::from([(2, j), (0, 99)])).unwrap();
        assert_eq!(same, psi);
        let masked = apply_edit_rules(&psi, &HashSet::from([(0, j)])).unwrap();
        assert_eq!(masked.columns[0], vec![(1, 1.0)]);
        assert_eq!(
            apply_edit_rules(&psi, &HashSet::from([(0, j), (1, j)])),
            Err(PsiError::EmptyColumn(j))
        );
    }

    #[test]
    fn balanced_start_is_kept() {
        let (ds, psi0) = tiny(2.0);
        let psi = compute_psi_bknn(&psi0, &ds, 1e-10, 100).unwrap();
        assert!((psi.get(0, 2) - 0.5).abs() < 1e-12);
        assert!((psi.get(1, 2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_candidate_balance_solution() {
        // ψ1 + ψ2 = 1, ψ1·1 + ψ2·3 = 2.5  ⇒  (1/4, 3/4)
        let (ds, psi0) = tiny(2.5);
        let psi = compute_psi_bknn(&psi0, &ds, 1e-12, 500).unwrap();
        assert!((psi.get(0, 2) - 0.25).abs() < 1e-8);
        assert!((psi.get(1, 2) - 0.75).abs() < 1e-8);
    }

    #[test]
    fn constant_only_is_fixed_point() {
        let ds = Dataset::new(
            (1..=5).map(|i| i.to_string()).collect(),
            vec![1.0, 2.0, 1.0, 3.0, 1.0],
            vec!["const".into()],
            vec![vec![1.0]; 5],
            vec![Some(1.0), None, Some(2.0), None, Some(5.0)],
        )
        .unwrap();
        let psi0 = psi_knn(&knn_sets(&ds, 2).unwrap(), &ds);
        assert_eq!(psi0.balance_residual, vec![0.0]);
        let psi = compute_psi_bknn(&psi0, &ds, 1e-12, 10).unwrap();
        assert_eq!(psi.columns, psi0.columns);
    }

    #[test]
    fn extreme_nonrespondents_are_infeasible() {
        // the recipient lies beyond every respondent
        let (ds, psi0) = tiny(5.0);
        assert!(matches!(compute_psi_bknn(&psi0, &ds, 1e-6, 500), Err(PsiError::Infeasible(_))));
    }

    #[test]
    fn minimum_k() {
        assert_eq!(min_admissible_k(10, 3), 2);
        assert_eq!(min_admissible_k(85, 4), 2);
        assert_eq!(min_admissible_k(2, 4), 3);
    }

    #[test]
    fn select_k_first_success() {
        // recipients at 2.5 and 6: k=2 feasible from the respondents {1,3,5,7}
        let ds = Dataset::census(
            vec![vec![1.0], vec![3.0], vec![5.0], vec![7.0], vec![2.5], vec![5.5]],
            vec![Some(1.0), Some(1.0), Some(1.0), Some(1.0), None, None],
        )
        .unwrap();
        let start = |k| Ok(psi_knn(&knn_sets(&ds, k).map_err(|_| PsiError::NoRespondents)?, &ds));
        let (k, psi) = select_k(&ds, start, 2, 4, 1e-8, 500).unwrap();
        assert_eq!(k, 2);
        assert!(psi.max_balance_residual() <= 1e-8);
        assert!(matches!(select_k(&ds, start, 1, 4, 1e-8, 500), Err(PsiError::KTooSmall { .. })));
    }

    #[test]
    fn select_k_all_infeasible() {
        let ds = Dataset::census(
            vec![vec![1.0], vec![2.0], vec![3.0], vec![10.0], vec![11.0]],
            vec![Some(1.0), Some(1.0), Some(1.0), None, None],
        )
        .unwrap();
        let start = |k| Ok(psi_knn(&knn_sets(&ds, k).map_err(|_| PsiError::NoRespondents)?, &ds));
        assert_eq!(select_k(&ds, start, 2, 3, 1e-6, 500), Err(PsiError::AllInfeasible(3)));
    }

    #[test]
    fn response_model_identity() {
        let (ds, psi0) = tiny(2.5);
        let psi = compute_psi_bknn(&psi0, &ds, 1e-12, 500).unwrap();
        let w = psi.implied_weights(&ds);
        let theta = psi.implied_response_propensities(&ds);
        for ((&i, w), t) in ds.respondents().iter().zip(w).zip(theta) {
            assert!((w - ds.weight(i) / t).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_export() {
        let (ds, psi) = tiny(2.0);
        let mut buf = Vec::new();
        psi.write_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("donor_id,recipient_id,probability"));
    }
}
