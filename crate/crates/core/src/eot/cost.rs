use ndarray::{Array2, ArrayView2, ShapeBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `c_A(x, y) = -4|x|^2|y|^2 - 32 x^T A y`.
    Quadratic,
    /// `c_A(x, y) = -8 x^T A y`.
    InnerProduct,
}

impl CostKind {
    pub fn name(self) -> &'static str {
        match self {
            CostKind::Quadratic => "quadratic",
            CostKind::InnerProduct => "inner_product",
        }
    }
}

impl std::str::FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" | "quad" | "egw" => Ok(CostKind::Quadratic),
            "inner_product" | "inner" | "iegw" => Ok(CostKind::InnerProduct),
            other => Err(Error::Validation(format!("unknown cost kind {other:?}"))),
        }
    }
}

/// Cost family plus entropic regularization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub kind: CostKind,
    pub eps: f64,
}

impl CostSpec {
    pub fn new(kind: CostKind, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Validation(format!(
                "eps must be positive and finite, got {eps}"
            )));
        }
        Ok(Self { kind, eps })
    }

    pub fn quadratic(eps: f64) -> Result<Self> {
        Self::new(CostKind::Quadratic, eps)
    }

    pub fn inner(eps: f64) -> Result<Self> {
        Self::new(CostKind::InnerProduct, eps)
    }

    pub fn with_eps(self, eps: f64) -> Result<Self> {
        Self::new(self.kind, eps)
    }

    pub fn quad_coeff(&self) -> f64 {
        match self.kind {
            CostKind::Quadratic => 4.0,
            CostKind::InnerProduct => 0.0,
        }
    }

    pub fn bilinear_coeff(&self) -> f64 {
        match self.kind {
            CostKind::Quadratic => 32.0,
            CostKind::InnerProduct => 8.0,
        }
    }

    /// Weight of `|A|_F^2` in the outer objective.
    pub fn reg_weight(&self) -> f64 {
        self.bilinear_coeff()
    }

    pub fn grad_lin(&self) -> f64 {
        2.0 * self.reg_weight()
    }

    pub fn grad_bilin(&self) -> f64 {
        self.bilinear_coeff()
    }

    /// Floor and numerator of the outer smoothness constant.
    pub(crate) fn smoothness_constants(&self) -> (f64, f64) {
        match self.kind {
            CostKind::Quadratic => (64.0, 32.0 * 32.0),
            CostKind::InnerProduct => (16.0, 8.0 * 8.0),
        }
    }

    pub fn pair_cost(&self, x: &[f64], y: &[f64], a: ArrayView2<f64>) -> f64 {
        let (xs, ys) = (sq_norm(x), sq_norm(y));
        let mut bil = 0.0;
        for (p, &xp) in x.iter().enumerate() {
            let row = a.row(p);
            let mut s = 0.0;
            for (q, &yq) in y.iter().enumerate() {
                s += row[q] * yq;
            }
            bil += xp * s;
        }
        -self.quad_coeff() * xs * ys - self.bilinear_coeff() * bil
    }
}

/// Read access to an `n_rows x n_cols` cost matrix one column at a time.
pub trait CostColumns: Sync {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    /// Writes column `j` into `out` (length `rows()`).
    fn fill_column(&self, j: usize, out: &mut [f64]);
    fn at(&self, i: usize, j: usize) -> f64;
}

impl CostColumns for ArrayView2<'_, f64> {
    fn n_rows(&self) -> usize {
        self.nrows()
    }

    fn n_cols(&self) -> usize {
        self.ncols()
    }

    fn fill_column(&self, j: usize, out: &mut [f64]) {
        let col = self.column(j);
        match col.as_slice() {
            Some(s) => out.copy_from_slice(s),
            None => out.iter_mut().zip(col.iter()).for_each(|(o, &c)| *o = c),
        }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self[[i, j]]
    }
}

impl CostColumns for Array2<f64> {
    fn n_rows(&self) -> usize {
        self.nrows()
    }

    fn n_cols(&self) -> usize {
        self.ncols()
    }

    fn fill_column(&self, j: usize, out: &mut [f64]) {
        self.view().fill_column(j, out)
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self[[i, j]]
    }
}

/// The cost `c_A(X_i, Y_j)` evaluated on demand from `O(n d)` precomputed
/// quantities instead of a stored `n x n` matrix.
#[derive(Debug, Clone)]
pub struct PairCost {
    quad: f64,
    bilin: f64,
    x_sq: Vec<f64>,
    /// Row `i` is `X_i^T A` (length `dy`).
    xa: Array2<f64>,
    y: Array2<f64>,
    y_sq: Vec<f64>,
}

impl PairCost {
    pub fn new(
        spec: &CostSpec,
        a: ArrayView2<f64>,
        x: ArrayView2<f64>,
        y: ArrayView2<f64>,
    ) -> Result<Self> {
        check_shapes(a, x, y)?;
        let rows_sq =
            |m: ArrayView2<f64>| m.rows().into_iter().map(|r| r.dot(&r)).collect::<Vec<_>>();
        Ok(Self {
            quad: spec.quad_coeff(),
            bilin: spec.bilinear_coeff(),
            x_sq: rows_sq(x),
            xa: x.dot(&a).as_standard_layout().into_owned(),
            y: y.as_standard_layout().into_owned(),
            y_sq: rows_sq(y),
        })
    }

    /// Stores every entry, column major so that columns are contiguous.
    pub fn materialize(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows(), self.n_cols()).f());
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            self.fill_column(j, col.as_slice_mut().expect("column major"));
        }
        out
    }
}

impl CostColumns for PairCost {
    fn n_rows(&self) -> usize {
        self.x_sq.len()
    }

    fn n_cols(&self) -> usize {
        self.y_sq.len()
    }

    fn fill_column(&self, j: usize, out: &mut [f64]) {
        let yj = self.y.row(j);
        let yj = yj.as_slice().expect("standard layout");
        let q = self.quad * self.y_sq[j];
        let xa = self.xa.as_slice().expect("standard layout");
        let dy = yj.len();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &xa[i * dy..(i + 1) * dy];
            let mut s = 0.0;
            for (r, y) in row.iter().zip(yj) {
                s += r * y;
            }
            *o = -q * self.x_sq[i] - self.bilin * s;
        }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        let s = self.xa.row(i).dot(&self.y.row(j));
        -self.quad * self.x_sq[i] * self.y_sq[j] - self.bilin * s
    }
}

fn check_shapes(a: ArrayView2<f64>, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<()> {
    if a.dim() != (x.ncols(), y.ncols()) {
        return Err(Error::Dimension(format!(
            "A is {:?} but samples have dimensions ({}, {})",
            a.dim(),
            x.ncols(),
            y.ncols()
        )));
    }
    Ok(())
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Dense `n_x x n_y` matrix of `c_A(X_i, Y_j)`.
pub fn cost_matrix(
    spec: &CostSpec,
    a: ArrayView2<f64>,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_shapes(a, x, y)?;
    let x = x.as_standard_layout();
    let y = y.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let ys = y.as_slice().expect("standard layout");
    let (dx, dy) = (x.ncols(), y.ncols());
    Ok(Array2::from_shape_fn((x.nrows(), y.nrows()), |(i, j)| {
        spec.pair_cost(&xs[i * dx..(i + 1) * dx], &ys[j * dy..(j + 1) * dy], a)
    }))
}
