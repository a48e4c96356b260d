//! Random donor selection that respects `ψ` as selection probabilities and
//! keeps the imputed auxiliary totals close to their expectation.
//!
//! Every positive entry `ψ_ij` is a cell with inclusion probability `ψ_ij`.
//! Cells of one recipient form a stratum, from which exactly one cell is
//! selected. The overall balancing variables of a cell are `d_j x_i`. A
//! stratified cube method moves the probability vector along random
//! directions of the null space of the balancing constraints (flight phase),
//! relaxing the overall constraints one by one when no such direction remains
//! (landing phase), and finishes with one multinomial draw in each stratum
//! that is still fractional.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::DataError;
use crate::linalg::project_null_space;
use crate::psi::PsiMatrix;

/// Probabilities this close to 0 or 1 are treated as decided.
const SNAP_EPS: f64 = 1e-10;

/// Cell-level sampling problem derived from a `ψ` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CellProblem {
    /// Donor unit index per cell.
    pub donor: Vec<usize>,
    /// Stratum (recipient column) per cell; cells of a stratum are contiguous.
    pub stratum: Vec<usize>,
    /// Inclusion probability `π̇ = ψ_ij`.
    pub pi: Vec<f64>,
    /// Balancing totals `ẋ = d_j ψ_ij x_i`, one row per cell.
    pub x_dot: Vec<Vec<f64>>,
    pub n_strata: usize,
    pub q: usize,
}

impl CellProblem {
    /// Strata are laid out by decreasing relative spread of their candidates'
    /// auxiliaries, so the strata left fractional for the landing phase are
    /// those whose rounding moves the totals least.
    pub fn new(psi: &PsiMatrix, ds: &Dataset) -> Self {
        let nnz = psi.nnz();
        let mut p = CellProblem {
            donor: Vec::with_capacity(nnz),
            stratum: Vec::with_capacity(nnz),
            pi: Vec::with_capacity(nnz),
            x_dot: Vec::with_capacity(nnz),
            n_strata: psi.n_columns(),
            q: ds.q(),
        };
        let scale: Vec<f64> = expected_aux_total(psi, ds).iter().map(|t| t.abs().max(1e-12)).collect();
        let spread = |m: usize| -> f64 {
            let dj = ds.weight(psi.recipients[m]);
            (0..ds.q())
                .map(|q| {
                    let (lo, hi) = psi.columns[m]
                        .iter()
                        .filter(|e| e.1 > 0.0)
                        .map(|e| ds.x(e.0)[q])
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                    if hi >= lo {
                        dj * (hi - lo) / scale[q]
                    } else {
                        0.0
                    }
                })
                .fold(0.0, f64::max)
        };
        let spreads: Vec<f64> = (0..psi.n_columns()).map(spread).collect();
        let mut order: Vec<usize> = (0..psi.n_columns()).collect();
        order.sort_by(|&a, &b| spreads[b].total_cmp(&spreads[a]).then(a.cmp(&b)));
        for m in order {
            let j = psi.recipients[m];
            let dj = ds.weight(j);
            for &(i, prob) in psi.columns[m].iter().filter(|e| e.1 > 0.0) {
                p.donor.push(i);
                p.stratum.push(m);
                p.pi.push(prob);
                p.x_dot.push(ds.x(i).iter().map(|x| dj * prob * x).collect());
            }
        }
        p
    }

    pub fn n_cells(&self) -> usize {
        self.pi.len()
    }

    /// Overall balancing coefficient `ẋ_cq / π̇_c = d_j x_iq`.
    fn coef(&self, c: usize, q: usize) -> f64 {
        self.x_dot[c][q] / self.pi[c]
    }
}

fn is_fractional(p: f64) -> bool {
    p > SNAP_EPS && p < 1.0 - SNAP_EPS
}

fn snap(p: f64) -> f64 {
    if p <= SNAP_EPS {
        0.0
    } else if p >= 1.0 - SNAP_EPS {
        1.0
    } else {
        p
    }
}

/// Flight phase with the stratum constraints and the first `n_overall`
/// overall balancing rows. Works on a small window of fractional cells taken
/// in cell order, so each step only involves `O(Q)` cells.
pub fn flight_phase<R: Rng + ?Sized>(problem: &CellProblem, pi: &mut [f64], n_overall: usize, rng: &mut R) {
    let n = problem.n_cells();
    let mut cursor = 0;
    let mut window: Vec<usize> = Vec::new();
    let mut extra = 0;
    loop {
        // refill until the window surely has a nontrivial null space
        loop {
            let strata = count_strata(problem, &window);
            if window.len() > strata + n_overall + extra || cursor == n {
                break;
            }
            if is_fractional(pi[cursor]) {
                window.push(cursor);
            }
            cursor += 1;
        }
        if window.is_empty() {
            return;
        }
        let a = constraint_matrix(problem, &window, n_overall);
        let g = DVector::from_iterator(window.len(), (0..window.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let u = match project_null_space(&a, &g) {
            Some(u) if u.amax() > 1e-14 => u,
            _ if cursor == n => return,
            _ => {
                extra += 1;
                continue;
            }
        };
        extra = 0;
        let (mut l1, mut l2) = (f64::INFINITY, f64::INFINITY);
        for (b, &c) in window.iter().enumerate() {
            let (p, ub) = (pi[c], u[b]);
            if ub > 0.0 {
                l1 = l1.min((1.0 - p) / ub);
                l2 = l2.min(p / ub);
            } else if ub < 0.0 {
                l1 = l1.min(p / -ub);
                l2 = l2.min((1.0 - p) / -ub);
            }
        }
        let t = if rng.random::<f64>() * (l1 + l2) < l2 { l1 } else { -l2 };
        for (b, &c) in window.iter().enumerate() {
            pi[c] = snap(pi[c] + t * u[b]);
        }
        window.retain(|&c| is_fractional(pi[c]));
    }
}

fn count_strata(problem: &CellProblem, window: &[usize]) -> usize {
    // window is in cell order, so equal strata are adjacent
    let mut count = 0;
    let mut last = usize::MAX;
    for &c in window {
        if problem.stratum[c] != last {
            count += 1;
            last = problem.stratum[c];
        }
    }
    count
}

fn constraint_matrix(problem: &CellProblem, window: &[usize], n_overall: usize) -> DMatrix<f64> {
    let strata: Vec<usize> = {
        let mut s: Vec<usize> = window.iter().map(|&c| problem.stratum[c]).collect();
        s.dedup();
        s
    };
    let rows = strata.len() + n_overall;
    DMatrix::from_fn(rows, window.len(), |r, b| {
        let c = window[b];
        if r < strata.len() {
            if problem.stratum[c] == strata[r] {
                1.0
            } else {
                0.0
            }
        } else {
            problem.coef(c, r - strata.len())
        }
    })
}

/// Landing phase: relaxes the overall rows from the last auxiliary variable
/// back to the constant, running a flight phase after each removal, then
/// settles every remaining fractional stratum by a multinomial draw.
pub fn landing_phase<R: Rng + ?Sized>(problem: &CellProblem, pi: &mut [f64], rng: &mut R) {
    for n_overall in (1..problem.q).rev() {
        if !pi.iter().any(|&p| is_fractional(p)) {
            return;
        }
        flight_phase(problem, pi, n_overall, rng);
    }
    let n = problem.n_cells();
    let mut start = 0;
    while start < n {
        let s = problem.stratum[start];
        let mut end = start;
        while end < n && problem.stratum[end] == s {
            end += 1;
        }
        let frac: Vec<usize> = (start..end).filter(|&c| is_fractional(pi[c])).collect();
        if !frac.is_empty() {
            let total: f64 = frac.iter().map(|&c| pi[c]).sum();
            let mut u = rng.random::<f64>() * total;
            let mut chosen = *frac.last().expect("nonempty");
            for &c in &frac {
                if u < pi[c] {
                    chosen = c;
                    break;
                }
                u -= pi[c];
            }
            for &c in &frac {
                pi[c] = if c == chosen { 1.0 } else { 0.0 };
            }
        }
        start = end;
    }
}

/// One donor per recipient.
#[derive(Debug, Clone, PartialEq)]
pub struct DonorAssignment {
    /// Recipient unit indices, in `ψ` column order.
    pub recipients: Vec<usize>,
    /// Donor unit index for each recipient.
    pub donor_of: Vec<usize>,
    /// `|Σ_j d_j x_donor(j) − Σ_j d_j Σ_i ψ_ij x_i|` per auxiliary variable.
    pub balance_gap: Vec<f64>,
}

impl DonorAssignment {
    /// Balance gap divided by `|Σ_j d_j Σ_i ψ_ij x_i|` (floored at `1e-12`).
    pub fn relative_balance_gap(&self, psi: &PsiMatrix, ds: &Dataset) -> Vec<f64> {
        let expected = expected_aux_total(psi, ds);
        self.balance_gap
            .iter()
            .zip(expected)
            .map(|(g, e)| g / e.abs().max(1e-12))
            .collect()
    }

    /// Writes `recipient_id,donor_id` rows.
    pub fn write_csv<W: Write>(&self, ds: &Dataset, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["recipient_id", "donor_id"])?;
        for (&j, &i) in self.recipients.iter().zip(&self.donor_of) {
            w.write_record([ds.unit_id(j), ds.unit_id(i)])?;
        }
        w.flush().map_err(|source| DataError::Io {
            path: "<writer>".into(),
            source,
        })
    }
}

/// `Σ_j d_j Σ_i ψ_ij x_i`.
pub fn expected_aux_total(psi: &PsiMatrix, ds: &Dataset) -> Vec<f64> {
    let mut t = vec![0.0; ds.q()];
    for (col, &j) in psi.columns.iter().zip(&psi.recipients) {
        for &(i, p) in col {
            for (tq, x) in t.iter_mut().zip(ds.x(i)) {
                *tq += ds.weight(j) * p * x;
            }
        }
    }
    t
}

/// Draws one donor per recipient with `P(donor(j) = i) = ψ_ij`.
pub fn select_donors<R: Rng + ?Sized>(psi: &PsiMatrix, ds: &Dataset, rng: &mut R) -> DonorAssignment {
    let problem = CellProblem::new(psi, ds);
    select_donors_prepared(&problem, psi, ds, rng)
}

/// [`select_donors`] with a precomputed [`CellProblem`] for repeated draws.
pub fn select_donors_prepared<R: Rng + ?Sized>(
    problem: &CellProblem,
    psi: &PsiMatrix,
    ds: &Dataset,
    rng: &mut R,
) -> DonorAssignment {
    let mut pi = problem.pi.clone();
    pi.iter_mut().for_each(|p| *p = snap(*p));
    flight_phase(problem, &mut pi, problem.q, rng);
    landing_phase(problem, &mut pi, rng);

    let mut donor_of = vec![usize::MAX; problem.n_strata];
    let mut best = vec![f64::NEG_INFINITY; problem.n_strata];
    for c in 0..problem.n_cells() {
        let s = problem.stratum[c];
        if pi[c] > best[s] {
            best[s] = pi[c];
            donor_of[s] = problem.donor[c];
        }
    }
    debug_assert!(best.iter().all(|&b| b == 1.0));

    let expected = expected_aux_total(psi, ds);
    let mut realized = vec![0.0; ds.q()];
    for (&j, &i) in psi.recipients.iter().zip(&donor_of) {
        for (r, x) in realized.iter_mut().zip(ds.x(i)) {
            *r += ds.weight(j) * x;
        }
    }
    DonorAssignment {
        recipients: psi.recipients.clone(),
        donor_of,
        balance_gap: realized.iter().zip(&expected).map(|(r, e)| (r - e).abs()).collect(),
    }
}
