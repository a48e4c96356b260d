//! The six donor imputation methods behind one interface.
//!
//! Each method is split into a preparation step that depends only on the
//! response set (neighbor sets, regression fit, `ψ`) and a cheap random draw,
//! so repeated imputations of one response set reuse the preparation.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::Serialize;

use crate::data::{Dataset, ImputedDataset};
use crate::donor::{select_donors_prepared, CellProblem, DonorAssignment};
use crate::error::{Error, PsiError, Result};
use crate::linalg::solve_spd;
use crate::neighbors::{knn_sets_with, KnnSets, MahalanobisMetric};
use crate::psi::{self, apply_edit_rules, compute_psi_bknn, min_admissible_k, psi_knn, select_k, PsiMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Method {
    Nni,
    Pmm,
    Srs,
    Srswor,
    Knni,
    Bknni,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Nni, Method::Pmm, Method::Srs, Method::Srswor, Method::Knni, Method::Bknni];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nni => "NNI",
            Method::Pmm => "PMM",
            Method::Srs => "SRS",
            Method::Srswor => "SRSWOR",
            Method::Knni => "kNNI",
            Method::Bknni => "bkNNI",
        }
    }

    /// Stable tag mixed into per-replicate seeds.
    pub fn tag(self) -> u64 {
        self as u64 + 1
    }

    pub fn is_deterministic(self) -> bool {
        matches!(self, Method::Nni | Method::Pmm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nni" => Ok(Method::Nni),
            "pmm" => Ok(Method::Pmm),
            "srs" => Ok(Method::Srs),
            "srswor" => Ok(Method::Srswor),
            "knni" => Ok(Method::Knni),
            "bknni" | "bknn" => Ok(Method::Bknni),
            _ => Err(Error::Config(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImputerConfig {
    pub method: Method,
    pub k: usize,
    /// Search `k, k+1, …, k_max` for the first feasible `ψ^bknn`.
    pub k_auto: bool,
    /// Upper end of the automatic search; `None` means `n_r`.
    pub k_max: Option<usize>,
    pub tol: f64,
    pub max_outer: usize,
    pub fallback_to_knni: bool,
    /// Forbidden `(donor, recipient)` unit-index pairs.
    pub forbidden: HashSet<(usize, usize)>,
    pub seed: u64,
}

impl Default for ImputerConfig {
    fn default() -> Self {
        ImputerConfig {
            method: Method::Bknni,
            k: 20,
            k_auto: false,
            k_max: None,
            tol: psi::DEFAULT_TOL,
            max_outer: psi::DEFAULT_MAX_OUTER,
            fallback_to_knni: true,
            forbidden: HashSet::new(),
            seed: 0,
        }
    }
}

impl ImputerConfig {
    pub fn new(method: Method, k: usize) -> Self {
        ImputerConfig {
            method,
            k,
            ..Default::default()
        }
    }
}

/// One realized imputation.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    /// Donor unit index per nonrespondent, in `Dataset::nonrespondents()` order.
    pub donors: Vec<usize>,
    /// Present for the `ψ`-based stratified selection.
    pub balance_gap: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum State {
    Fixed(Vec<usize>),
    Srs,
    Srswor,
    Knn(KnnSets),
    Balanced { psi: PsiMatrix, cells: CellProblem },
}

/// Imputer bound to one response set.
#[derive(Debug, Clone)]
pub struct PreparedImputer<'a> {
    ds: &'a Dataset,
    method: Method,
    state: State,
    fallback: bool,
    k_used: Option<usize>,
    pmm_rank_deficient: bool,
}

impl<'a> PreparedImputer<'a> {
    pub fn prepare(ds: &'a Dataset, cfg: &ImputerConfig) -> Result<Self> {
        let n_r = ds.n_r();
        if n_r == 0 {
            return Err(PsiError::NoRespondents.into());
        }
        let mut out = PreparedImputer {
            ds,
            method: cfg.method,
            state: State::Srs,
            fallback: false,
            k_used: None,
            pmm_rank_deficient: false,
        };
        match cfg.method {
            Method::Nni => {
                let metric = MahalanobisMetric::new(ds)?;
                let knn = knn_sets_with(ds, &metric, 1)?;
                out.state = State::Fixed(knn.neighbors.iter().map(|nb| nb[0]).collect());
                out.k_used = Some(1);
            }
            Method::Pmm => {
                let (donors, flag) = pmm_donors(ds);
                if flag {
                    warn!("PMM design matrix is rank deficient; pseudo-inverse used");
                }
                out.pmm_rank_deficient = flag;
                out.state = State::Fixed(donors);
            }
            Method::Srs => out.state = State::Srs,
            Method::Srswor => {
                if ds.n_m() > n_r {
                    return Err(Error::NotEnoughDonors { n_m: ds.n_m(), n_r });
                }
                out.state = State::Srswor;
            }
            Method::Knni => {
                let metric = MahalanobisMetric::new(ds)?;
                out.state = State::Knn(knn_sets_with(ds, &metric, cfg.k)?);
                out.k_used = Some(cfg.k);
            }
            Method::Bknni => {
                let (k, psi, fallback) = prepare_bknn(ds, cfg)?;
                let cells = CellProblem::new(&psi, ds);
                out.state = State::Balanced { psi, cells };
                out.fallback = fallback;
                out.k_used = Some(k);
            }
        }
        Ok(out)
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.ds
    }

    /// `ψ^knn` was used because no balanced matrix was found.
    pub fn is_fallback(&self) -> bool {
        self.fallback
    }

    pub fn k_used(&self) -> Option<usize> {
        self.k_used
    }

    pub fn pmm_rank_deficient(&self) -> bool {
        self.pmm_rank_deficient
    }

    pub fn psi(&self) -> Option<&PsiMatrix> {
        match &self.state {
            State::Balanced { psi, .. } => Some(psi),
            _ => None,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Draw {
        let ds = self.ds;
        let resp = ds.respondents();
        let n_m = ds.n_m();
        match &self.state {
            State::Fixed(d) => Draw {
                donors: d.clone(),
                balance_gap: None,
            },
            State::Srs => Draw {
                donors: (0..n_m).map(|_| resp[rng.random_range(0..resp.len())]).collect(),
                balance_gap: None,
            },
            State::Srswor => {
                let mut picks = index::sample(rng, resp.len(), n_m).into_vec();
                picks.shuffle(rng);
                Draw {
                    donors: picks.into_iter().map(|r| resp[r]).collect(),
                    balance_gap: None,
                }
            }
            State::Knn(knn) => Draw {
                donors: knn
                    .neighbors
                    .iter()
                    .map(|nb| nb[rng.random_range(0..nb.len())])
                    .collect(),
                balance_gap: None,
            },
            State::Balanced { psi, cells } => {
                let a: DonorAssignment = select_donors_prepared(cells, psi, ds, rng);
                Draw {
                    donors: a.donor_of,
                    balance_gap: Some(a.balance_gap),
                }
            }
        }
    }

    pub fn impute<R: Rng + ?Sized>(&self, rng: &mut R) -> ImputedDataset<'a> {
        ImputedDataset::from_donors(self.ds, self.draw(rng).donors)
    }
}

/// Returns `(k, ψ, fallback)`.
fn prepare_bknn(ds: &Dataset, cfg: &ImputerConfig) -> Result<(usize, PsiMatrix, bool)> {
    let min = min_admissible_k(ds.n_m(), ds.q());
    if cfg.k < min {
        return Err(PsiError::KTooSmall { k: cfg.k, min }.into());
    }
    let metric = MahalanobisMetric::new(ds)?;
    let start = |k: usize| -> std::result::Result<PsiMatrix, PsiError> {
        let psi0 = psi_knn(&knn_sets_with(ds, &metric, k)?, ds);
        if cfg.forbidden.is_empty() {
            Ok(psi0)
        } else {
            apply_edit_rules(&psi0, &cfg.forbidden)
        }
    };
    let result = if cfg.k_auto {
        let k_max = cfg.k_max.unwrap_or(ds.n_r()).min(ds.n_r());
        select_k(ds, start, cfg.k, k_max, cfg.tol, cfg.max_outer)
    } else {
        compute_psi_bknn(&start(cfg.k)?, ds, cfg.tol, cfg.max_outer).map(|p| (cfg.k, p))
    };
    match result {
        Ok((k, psi)) => Ok((k, psi, false)),
        Err(e @ (PsiError::Infeasible(_) | PsiError::AllInfeasible(_))) if cfg.fallback_to_knni => {
            warn!("{e}; falling back to kNN imputation probabilities");
            Ok((cfg.k, start(cfg.k)?, true))
        }
        Err(e) => Err(e.into()),
    }
}

/// Deterministic predictive mean matching: weighted least squares of `y` on
/// the auxiliaries over the respondents, then the respondent with the closest
/// predicted mean (lowest unit index on ties).
fn pmm_donors(ds: &Dataset) -> (Vec<usize>, bool) {
    let q = ds.q();
    let resp = ds.respondents();
    let mut xtx = DMatrix::<f64>::zeros(q, q);
    let mut xty = DVector::<f64>::zeros(q);
    for &i in resp {
        let (x, w, y) = (ds.x(i), ds.weight(i), ds.y_obs(i));
        for a in 0..q {
            xty[a] += w * x[a] * y;
            for b in 0..q {
                xtx[(a, b)] += w * x[a] * x[b];
            }
        }
    }
    let (beta, mut flag) = solve_spd(&xtx, &xty);
    if resp.len() < q {
        flag = true;
    }
    let pred = |i: usize| -> f64 { ds.x(i).iter().zip(beta.iter()).map(|(x, b)| x * b).sum() };
    let fitted: Vec<(f64, usize)> = resp.iter().map(|&i| (pred(i), i)).collect();
    let donors = ds
        .nonrespondents()
        .iter()
        .map(|&j| {
            let target = pred(j);
            fitted
                .iter()
                .map(|&(f, i)| ((f - target).abs(), i))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .expect("at least one respondent")
                .1
        })
        .collect();
    (donors, flag)
}

fn single<'a, R: Rng + ?Sized>(ds: &'a Dataset, cfg: ImputerConfig, rng: &mut R) -> Result<ImputedDataset<'a>> {
    Ok(PreparedImputer::prepare(ds, &cfg)?.impute(rng))
}

/// Nearest-neighbor imputation.
pub fn impute_nni(ds: &Dataset) -> Result<ImputedDataset<'_>> {
    let p = PreparedImputer::prepare(ds, &ImputerConfig::new(Method::Nni, 1))?;
    Ok(ImputedDataset::from_donors(ds, p.draw(&mut NoRng).donors))
}

/// Predictive mean matching.
pub fn impute_pmm(ds: &Dataset) -> Result<ImputedDataset<'_>> {
    let p = PreparedImputer::prepare(ds, &ImputerConfig::new(Method::Pmm, 1))?;
    Ok(ImputedDataset::from_donors(ds, p.draw(&mut NoRng).donors))
}

/// Random hot-deck with replacement.
pub fn impute_srs<'a, R: Rng + ?Sized>(ds: &'a Dataset, rng: &mut R) -> Result<ImputedDataset<'a>> {
    single(ds, ImputerConfig::new(Method::Srs, 1), rng)
}

/// Random hot-deck without replacement.
pub fn impute_srswor<'a, R: Rng + ?Sized>(ds: &'a Dataset, rng: &mut R) -> Result<ImputedDataset<'a>> {
    single(ds, ImputerConfig::new(Method::Srswor, 1), rng)
}

/// Uniform donor among the `k` nearest respondents.
pub fn impute_knni<'a, R: Rng + ?Sized>(ds: &'a Dataset, k: usize, rng: &mut R) -> Result<ImputedDataset<'a>> {
    single(ds, ImputerConfig::new(Method::Knni, k), rng)
}

/// Balanced k-nearest-neighbor imputation; also reports `ψ`, the donor
/// assignment and whether the kNN fallback was used.
pub fn impute_bknn<'a, R: Rng + ?Sized>(ds: &'a Dataset, cfg: &ImputerConfig, rng: &mut R) -> Result<BknnOutcome<'a>> {
    let cfg = ImputerConfig {
        method: Method::Bknni,
        ..cfg.clone()
    };
    let prepared = PreparedImputer::prepare(ds, &cfg)?;
    let psi = prepared.psi().expect("balanced state").clone();
    let State::Balanced { cells, .. } = &prepared.state else {
        unreachable!("bkNNI prepares a balanced state")
    };
    let assignment = select_donors_prepared(cells, &psi, ds, rng);
    Ok(BknnOutcome {
        imputed: ImputedDataset::from_donors(ds, assignment.donor_of.clone()),
        k: prepared.k_used.unwrap_or(cfg.k),
        fallback: prepared.fallback,
        psi,
        assignment,
    })
}

#[derive(Debug, Clone)]
pub struct BknnOutcome<'a> {
    pub imputed: ImputedDataset<'a>,
    pub psi: PsiMatrix,
    pub assignment: DonorAssignment,
    pub k: usize,
    pub fallback: bool,
}

/// Generator for the deterministic methods, which never draw.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("deterministic imputer drew a random number")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("deterministic imputer drew a random number")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("deterministic imputer drew a random number")
    }
}
