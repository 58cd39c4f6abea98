//! The (c, eps)-transform, the empirical semi-dual and the coupling it
//! induces. Every exponential goes through [`column_pass`], which subtracts
//! the column maximum before exponentiating.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ShapeBuilder};
use rayon::prelude::*;
use serde::Serialize;

use super::cost::{CostColumns, CostSpec};
use crate::error::{Error, Result};

/// Columns per rayon task. Chunk results are merged in index order, so
/// every reduction is independent of the number of threads.
const COL_CHUNK: usize = 64;

/// For every column `j` of the cost, with `z_i = (f_i - C_ij)/eps`, calls
/// `visit(state, j, lse_j, w)` where `lse_j = log((1/n) sum_i e^{z_i})` and
/// `w` is the softmax of `z` over `i`. Returns one state per chunk, in order.
pub(crate) fn column_pass<C, S, M, V>(cost: &C, f: &[f64], eps: f64, make: M, visit: V) -> Vec<S>
where
    C: CostColumns + ?Sized,
    S: Send,
    M: Fn() -> S + Sync,
    V: Fn(&mut S, usize, f64, &[f64]) + Sync,
{
    let (n, m) = (cost.n_rows(), cost.n_cols());
    debug_assert_eq!(f.len(), n);
    let log_n = (n as f64).ln();
    let inv_eps = 1.0 / eps;
    (0..m.div_ceil(COL_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut state = make();
            let mut buf = vec![0.0; n];
            for j in c * COL_CHUNK..((c + 1) * COL_CHUNK).min(m) {
                cost.fill_column(j, &mut buf);
                let mut top = f64::NEG_INFINITY;
                for (b, &fi) in buf.iter_mut().zip(f) {
                    *b = (fi - *b) * inv_eps;
                    top = top.max(*b);
                }
                let mut s = 0.0;
                for b in buf.iter_mut() {
                    *b = (*b - top).exp();
                    s += *b;
                }
                let scale = 1.0 / s;
                for b in buf.iter_mut() {
                    *b *= scale;
                }
                visit(&mut state, j, top + s.ln() - log_n, &buf);
            }
            state
        })
        .collect()
}

fn check<C: CostColumns + ?Sized>(f: ArrayView1<f64>, cost: &C) -> Result<()> {
    if f.len() != cost.n_rows() {
        return Err(Error::Dimension(format!(
            "{} potential values for {} cost rows",
            f.len(),
            cost.n_rows()
        )));
    }
    if cost.n_rows() == 0 || cost.n_cols() == 0 {
        return Err(Error::Empty);
    }
    Ok(())
}

fn contiguous(f: ArrayView1<f64>) -> Vec<f64> {
    f.to_vec()
}

/// `psi_j = -eps log((1/n) sum_i exp((f_i - C_ij)/eps))`.
pub fn ctransform<C: CostColumns + ?Sized>(
    spec: &CostSpec,
    f: ArrayView1<f64>,
    cost: &C,
) -> Result<Array1<f64>> {
    check(f, cost)?;
    let eps = spec.eps;
    let parts = column_pass(
        cost,
        &contiguous(f),
        eps,
        Vec::new,
        |out: &mut Vec<f64>, _, lse, _| out.push(-eps * lse),
    );
    Ok(Array1::from(parts.concat()))
}

/// `mean(f) + mean(ctransform(f))`.
pub fn semidual_value<C: CostColumns + ?Sized>(
    spec: &CostSpec,
    f: ArrayView1<f64>,
    cost: &C,
) -> Result<f64> {
    let psi = ctransform(spec, f, cost)?;
    Ok(f.mean().expect("nonempty") + psi.mean().expect("nonempty"))
}

/// Semi-dual value together with its gradient in `f`:
/// `g_i = 1/n_rows - sum_j Pi_ij`.
pub fn semidual_with_grad<C: CostColumns + ?Sized>(
    spec: &CostSpec,
    f: ArrayView1<f64>,
    cost: &C,
) -> Result<(f64, Array1<f64>)> {
    check(f, cost)?;
    let (n, m) = (cost.n_rows(), cost.n_cols());
    let eps = spec.eps;
    let parts = column_pass(
        cost,
        &contiguous(f),
        eps,
        || (0.0, vec![0.0; n]),
        |(psi_sum, rows): &mut (f64, Vec<f64>), _, lse, w| {
            *psi_sum += -eps * lse;
            for (r, &wi) in rows.iter_mut().zip(w) {
                *r += wi;
            }
        },
    );
    let mut psi_sum = 0.0;
    let mut rows = vec![0.0; n];
    for (p, r) in parts {
        psi_sum += p;
        rows.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
    }
    let inv_m = 1.0 / m as f64;
    let grad = rows.iter().map(|r| 1.0 / n as f64 - r * inv_m).collect();
    Ok((f.mean().expect("nonempty") + psi_sum * inv_m, grad))
}

pub fn semidual_grad_fvals<C: CostColumns + ?Sized>(
    spec: &CostSpec,
    f: ArrayView1<f64>,
    cost: &C,
) -> Result<Array1<f64>> {
    Ok(semidual_with_grad(spec, f, cost)?.1)
}

/// `X^T Pi Y` for the coupling induced by `f`, without forming `Pi`.
pub fn cross_moment<C: CostColumns + ?Sized>(
    spec: &CostSpec,
    f: ArrayView1<f64>,
    cost: &C,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    Ok(semidual_with_cross_moment(spec, f, cost, x, y)?.1)
}

/// Semi-dual value and `X^T Pi Y` from a single pass over the cost.
pub fn semidual_with_cross_moment<C: CostColumns + ?Sized>(
    spec: &CostSpec,
    f: ArrayView1<f64>,
    cost: &C,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    check(f, cost)?;
    if x.nrows() != cost.n_rows() || y.nrows() != cost.n_cols() {
        return Err(Error::Dimension(
            "sample counts do not match the cost matrix".into(),
        ));
    }
    let (dx, dy) = (x.ncols(), y.ncols());
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let eps = spec.eps;
    let inv_m = 1.0 / cost.n_cols() as f64;
    let parts = column_pass(
        cost,
        &contiguous(f),
        eps,
        || (0.0, Array2::<f64>::zeros((dx, dy)), vec![0.0; dx]),
        |(psi_sum, acc, xbar): &mut (f64, Array2<f64>, Vec<f64>), j, lse, w| {
            *psi_sum += -eps * lse;
            xbar.iter_mut().for_each(|v| *v = 0.0);
            for (i, &wi) in w.iter().enumerate() {
                for (b, &xv) in xbar.iter_mut().zip(&xs[i * dx..(i + 1) * dx]) {
                    *b += wi * xv;
                }
            }
            let yj = y.row(j);
            for (p, &b) in xbar.iter().enumerate() {
                for (q, &yv) in yj.iter().enumerate() {
                    acc[[p, q]] += b * yv * inv_m;
                }
            }
        },
    );
    let mut psi_sum = 0.0;
    let mut out = Array2::zeros((dx, dy));
    for (p, acc, _) in parts {
        psi_sum += p;
        out += &acc;
    }
    Ok((f.mean().expect("nonempty") + psi_sum * inv_m, out))
}

/// Nonnegative `n x m` plan; entry `(i, j)` is the mass on `(X_i, Y_j)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coupling {
    values: Array2<f64>,
}

impl Coupling {
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Validation(
                "coupling entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.values.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn column_sums(&self) -> Array1<f64> {
        self.values.columns().into_iter().map(|c| c.sum()).collect()
    }

    pub fn total(&self) -> f64 {
        self.values.sum()
    }

    /// Largest deviation of a column sum from `1/m`.
    pub fn column_marginal_error(&self) -> f64 {
        let target = 1.0 / self.dim().1 as f64;
        self.column_sums()
            .iter()
            .map(|s| (s - target).abs())
            .fold(0.0, f64::max)
    }

    /// Largest deviation of a row sum from `1/n`.
    pub fn row_marginal_error(&self) -> f64 {
        let target = 1.0 / self.dim().0 as f64;
        self.row_sums()
            .iter()
            .map(|s| (s - target).abs())
            .fold(0.0, f64::max)
    }

    /// `<C, Pi>`.
    pub fn transport_cost<C: CostColumns + ?Sized>(&self, cost: &C) -> f64 {
        let mut col = vec![0.0; cost.n_rows()];
        let mut total = 0.0;
        for (j, p) in self.values.columns().into_iter().enumerate() {
            cost.fill_column(j, &mut col);
            total += p.iter().zip(&col).map(|(a, b)| a * b).sum::<f64>();
        }
        total
    }

    /// `KL(Pi || unif (x) unif)`.
    pub fn entropy_gap(&self) -> f64 {
        let (n, m) = self.dim();
        let nm = (n * m) as f64;
        self.values
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * (p * nm).ln())
            .sum()
    }
}

/// Plan induced by `f`: column `j` is the softmax over `i` of
/// `(f_i - C_ij)/eps`, scaled by `1/m`. Stored column major.
pub fn coupling<C: CostColumns + ?Sized>(
    spec: &CostSpec,
    f: ArrayView1<f64>,
    cost: &C,
) -> Result<Coupling> {
    check(f, cost)?;
    let (n, m) = (cost.n_rows(), cost.n_cols());
    let inv_m = 1.0 / m as f64;
    let parts = column_pass(
        cost,
        &contiguous(f),
        spec.eps,
        Vec::new,
        |cols: &mut Vec<f64>, _, _, w| cols.extend(w.iter().map(|v| v * inv_m)),
    );
    let values = Array2::from_shape_vec((n, m).f(), parts.concat()).expect("n*m entries");
    Ok(Coupling { values })
}

/// `sum p log(p/q)` with `0 log 0 = 0`.
pub fn kl_between(p: &Coupling, q: &Coupling) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Dimension(format!(
            "couplings of shape {:?} and {:?}",
            p.dim(),
            q.dim()
        )));
    }
    let mut total = 0.0;
    for (&a, &b) in p.values.iter().zip(q.values.iter()) {
        if a == 0.0 {
            continue;
        }
        if b <= 0.0 {
            return Err(Error::Support(format!(
                "reference mass is zero where the coupling has mass {a:e}"
            )));
        }
        total += a * (a / b).ln();
    }
    Ok(total)
}
