//! Damped Newton ascent on the semi-dual, for small dense problems where
//! Sinkhorn's linear rate is too slow (low `eps` relative to the cost
//! range). Produces the same [`SinkhornSolution`] record.

use ndarray::{Array1, Array2, ArrayView1};

use super::cost::{CostColumns, CostSpec};
use super::semidual::coupling;
use super::sinkhorn::{finish, sinkhorn_from, transform_with_rows, SinkhornSolution};
use crate::error::{Error, Result};
use crate::samples::cholesky;

/// [`solve_eot`] uses Newton up to this many rows.
pub const NEWTON_MAX_ROWS: usize = 256;
const NEWTON_MAX_ITER: usize = 500;

/// Maximizes the semi-dual in `phi` with Newton steps and backtracking.
/// The Hessian is `-(1/eps)(diag(r) - m Pi Pi^T)`; the constant direction,
/// along which the objective is flat, is removed by adding `11^T / n`.
pub fn newton_eot<C: CostColumns + ?Sized>(
    spec: &CostSpec,
    cost: &C,
    tol: f64,
    max_iter: usize,
    phi0: Option<ArrayView1<f64>>,
) -> Result<SinkhornSolution> {
    if !(tol > 0.0) {
        return Err(Error::Validation(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let (n, m) = (cost.n_rows(), cost.n_cols());
    if n == 0 || m == 0 {
        return Err(Error::Empty);
    }
    let eps = spec.eps;
    let mut phi = match phi0 {
        Some(p) if p.len() == n => p.to_vec(),
        Some(p) => {
            return Err(Error::Dimension(format!(
                "warm start of length {} for {n} rows",
                p.len()
            )))
        }
        None => vec![0.0; n],
    };
    let objective = |phi: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        let (psi, rows) = transform_with_rows(cost, phi, eps);
        let value = phi.iter().sum::<f64>() / n as f64 + psi.iter().sum::<f64>() / m as f64;
        (value, psi, rows)
    };
    let (mut value, mut psi, mut rows) = objective(&phi);
    let mut err = f64::INFINITY;
    for it in 0..=max_iter {
        let grad: Vec<f64> = rows.iter().map(|r| 1.0 / n as f64 - r / m as f64).collect();
        err = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if !err.is_finite() {
            return Err(Error::Numerical { step: it, eps });
        }
        if err < tol {
            return finish(spec, cost, phi, psi, it, err);
        }
        if it == max_iter {
            break;
        }
        let pi = coupling(spec, Array1::from(phi.clone()).view(), cost)?.into_values();
        let r: Vec<f64> = rows.iter().map(|v| v / m as f64).collect();
        let mut h: Array2<f64> = pi.dot(&pi.t()) * (-(m as f64));
        let trace: f64 = r.iter().sum();
        for i in 0..n {
            h[[i, i]] += r[i] + 1e-12 * trace;
        }
        h.mapv_inplace(|v| v / eps + 1.0 / (n as f64 * n as f64));
        let dir = solve_spd(&h, &grad)?;
        let slope: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = phi.iter().zip(&dir).map(|(p, d)| p + t * d).collect();
            let (v, ps, rs) = objective(&trial);
            // Close to the optimum the increase drops below the resolution
            // of `value`; a smaller gradient is accepted instead.
            let trial_err = rs
                .iter()
                .fold(0.0f64, |a, r| a.max((1.0 / n as f64 - r / m as f64).abs()));
            if v.is_finite() && (v >= value + 1e-4 * t * slope || trial_err < 0.5 * err) {
                phi = trial;
                value = v;
                psi = ps;
                rows = rs;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                // No ascent possible along the Newton direction; take a
                // Sinkhorn sweep instead.
                let (next_phi, _) =
                    transform_with_rows(&super::sinkhorn::Transposed(cost), &psi, eps);
                phi = next_phi;
                let (v, ps, rs) = objective(&phi);
                value = v;
                psi = ps;
                rows = rs;
                break;
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        marginal_error: err,
    })
}

fn solve_spd(a: &Array2<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let l = cholesky(a)
        .map_err(|_| Error::Validation("Newton system is not positive definite".into()))?;
    let n = b.len();
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[[i, k]] * z[k]).sum();
        z[i] = (b[i] - s) / l[[i, i]];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[[k, i]] * x[k]).sum();
        x[i] = (z[i] - s) / l[[i, i]];
    }
    Ok(x)
}

/// Exact EOT solve: Newton for small problems, Sinkhorn otherwise.
pub fn solve_eot<C: CostColumns + ?Sized>(
    spec: &CostSpec,
    cost: &C,
    tol: f64,
    phi0: Option<ArrayView1<f64>>,
) -> Result<SinkhornSolution> {
    if cost.n_rows() <= NEWTON_MAX_ROWS {
        newton_eot(spec, cost, tol, NEWTON_MAX_ITER, phi0)
    } else {
        sinkhorn_from(spec, cost, tol, super::sinkhorn::DEFAULT_MAX_ITER, phi0)
    }
}
