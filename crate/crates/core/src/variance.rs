//! Approximate conditional imputation variance of the imputed total under
//! random donor selection with probabilities `ψ`.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::PsiError;
use crate::linalg::pinv;
use crate::psi::PsiMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct VarApproxResult {
    pub var_app: f64,
    /// Regression coefficient of `y` on the auxiliaries over the cells.
    pub b: Vec<f64>,
    /// `Σ c_ij` over the cells.
    pub c_sum: f64,
    /// The cell Gram matrix was singular and a pseudo-inverse was used.
    pub singular: bool,
}

/// `Var_app = Σ c_ij d_j² (y_i − bᵀx_i)²` over the cells `ψ_ij > 0`, with
/// `c_ij = ψ_ij (1 − ψ_ij) n_c / (n_c − Q)`, where `n_c` is the number of cells
/// (`n_m k` for an unedited neighborhood matrix) and `Q` counts the constant.
pub fn var_app(psi: &PsiMatrix, ds: &Dataset) -> Result<VarApproxResult, PsiError> {
    let q = ds.q();
    let n_cells = psi.columns.iter().flatten().filter(|e| e.1 > 0.0).count();
    if n_cells <= q {
        return Err(PsiError::DegenerateCorrection { nmk: n_cells, q });
    }
    let factor = n_cells as f64 / (n_cells - q) as f64;

    let mut gram = DMatrix::<f64>::zeros(q, q);
    let mut rhs = DVector::<f64>::zeros(q);
    let mut c_sum = 0.0;
    let cells = || {
        psi.columns
            .iter()
            .zip(&psi.recipients)
            .flat_map(|(col, &j)| col.iter().filter(|e| e.1 > 0.0).map(move |&(i, p)| (i, j, p)))
    };
    for (i, j, p) in cells() {
        let c = p * (1.0 - p) * factor;
        c_sum += c;
        let w = c * ds.weight(j).powi(2);
        let x = ds.x(i);
        let y = ds.y_obs(i);
        for a in 0..q {
            rhs[a] += w * x[a] * y;
            for b in a..q {
                gram[(a, b)] += w * x[a] * x[b];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }

    let (b, singular) = match gram.clone().cholesky() {
        Some(ch) if c_sum > 0.0 => {
            let b = ch.solve(&rhs);
            if b.iter().all(|v| v.is_finite()) {
                (b, false)
            } else {
                (pinv(&gram).0 * &rhs, true)
            }
        }
        _ => (pinv(&gram).0 * &rhs, true),
    };

    let mut v = 0.0;
    for (i, j, p) in cells() {
        let c = p * (1.0 - p) * factor;
        let fit: f64 = ds.x(i).iter().zip(b.iter()).map(|(x, b)| x * b).sum();
        v += c * ds.weight(j).powi(2) * (ds.y_obs(i) - fit).powi(2);
    }
    Ok(VarApproxResult {
        var_app: v,
        b: b.iter().copied().collect(),
        c_sum,
        singular,
    })
}
