//! Log-domain Sinkhorn for uniform marginals, used as a reference solver.

use ndarray::{Array1, ArrayView1};

use super::cost::{CostColumns, CostSpec};
use super::semidual::{column_pass, coupling, Coupling};
use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 100_000;

/// Transposed view of any cost.
pub struct Transposed<'a, C: ?Sized>(pub &'a C);

impl<C: CostColumns + ?Sized> CostColumns for Transposed<'_, C> {
    fn n_rows(&self) -> usize {
        self.0.n_cols()
    }

    fn n_cols(&self) -> usize {
        self.0.n_rows()
    }

    fn fill_column(&self, j: usize, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.0.at(j, i);
        }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.0.at(j, i)
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    /// Potential on the rows (first marginal).
    pub phi: Array1<f64>,
    /// `psi = phi^{c, eps}`, so the coupling's column sums are exact.
    pub psi: Array1<f64>,
    pub coupling: Coupling,
    /// Dual value `mean(phi) + mean(psi)`, equal to the semi-dual at `phi`.
    pub value: f64,
    /// `<C, Pi> + eps KL(Pi || unif (x) unif)`.
    pub primal: f64,
    pub iterations: usize,
    /// Sup-norm error of the row sums at exit.
    pub marginal_error: f64,
}

/// Alternates `psi <- phi^{c,eps}` and `phi <- psi^{c,eps}` until every
/// row sum of the induced coupling is within `tol` of `1/n`.
pub fn sinkhorn<C: CostColumns + ?Sized>(
    spec: &CostSpec,
    cost: &C,
    tol: f64,
    max_iter: usize,
) -> Result<SinkhornSolution> {
    sinkhorn_from(spec, cost, tol, max_iter, None)
}

/// [`sinkhorn`] started from a given row potential.
pub fn sinkhorn_from<C: CostColumns + ?Sized>(
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
    let eps = spec.eps;
    let transposed = Transposed(cost);
    let mut err = f64::INFINITY;
    for it in 0..=max_iter {
        let (psi, rows) = transform_with_rows(cost, &phi, eps);
        err = rows
            .iter()
            .map(|r| (r / m as f64 - 1.0 / n as f64).abs())
            .fold(0.0, f64::max);
        if !err.is_finite() {
            return Err(Error::Numerical { step: it, eps });
        }
        if err < tol {
            return finish(spec, cost, phi, psi, it, err);
        }
        if it == max_iter {
            break;
        }
        phi = transform_with_rows(&transposed, &psi, eps).0;
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        marginal_error: err,
    })
}

pub(crate) fn finish<C: CostColumns + ?Sized>(
    spec: &CostSpec,
    cost: &C,
    phi: Vec<f64>,
    psi: Vec<f64>,
    iterations: usize,
    marginal_error: f64,
) -> Result<SinkhornSolution> {
    let phi = Array1::from(phi);
    let psi = Array1::from(psi);
    let coupling = coupling(spec, phi.view(), cost)?;
    let value = phi.mean().expect("n >= 1") + psi.mean().expect("m >= 1");
    let primal = coupling.transport_cost(cost) + spec.eps * coupling.entropy_gap();
    Ok(SinkhornSolution {
        phi,
        psi,
        coupling,
        value,
        primal,
        iterations,
        marginal_error,
    })
}

/// c-transform of `f` through `cost` plus the row sums of the softmax weights.
pub(crate) fn transform_with_rows<C: CostColumns + ?Sized>(
    cost: &C,
    f: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = cost.n_rows();
    let parts = column_pass(
        cost,
        f,
        eps,
        || (Vec::new(), vec![0.0; n]),
        |(out, rows): &mut (Vec<f64>, Vec<f64>), _, lse, w| {
            out.push(-eps * lse);
            rows.iter_mut().zip(w).for_each(|(r, &wi)| *r += wi);
        },
    );
    let mut psi = Vec::with_capacity(cost.n_cols());
    let mut rows = vec![0.0; n];
    for (p, r) in parts {
        psi.extend(p);
        rows.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
    }
    (psi, rows)
}
