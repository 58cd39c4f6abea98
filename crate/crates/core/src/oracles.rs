//! Reference quantities independent of the neural estimator.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::egw::marginal_constant;
use crate::eot::semidual::Coupling;
use crate::eot::solve_eot;
use crate::eot::{CostKind, CostSpec};
use crate::error::{Error, Result};
use crate::samples::SampleSet;

pub const DEFAULT_GRID_POINTS: usize = 401;
pub const REFINE_FACTOR: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOracle {
    pub value: f64,
    pub a: f64,
    /// Objective on the coarse grid, as `(A, value)` pairs.
    pub coarse: Vec<(f64, f64)>,
    pub sinkhorn_iterations: usize,
}

/// Scalar-`A` objective `const + reg A^2 + OT_A` along a sequence of `A`
/// values, warm starting each Sinkhorn solve from the previous potential.
struct ScalarScan {
    spec: CostSpec,
    base: Array2<f64>,
    slope: Array2<f64>,
    constant: f64,
    tol: f64,
    phi: Option<Array1<f64>>,
    iterations: usize,
}

impl ScalarScan {
    fn new(spec: &CostSpec, x: &SampleSet, y: &SampleSet, tol: f64) -> Result<Self> {
        if x.d() != 1 || y.d() != 1 {
            return Err(Error::Dimension(format!(
                "grid oracle needs dx = dy = 1, got ({}, {})",
                x.d(),
                y.d()
            )));
        }
        if x.n() != y.n() {
            return Err(Error::Dimension("sample counts differ".into()));
        }
        let (x, y) = match spec.kind {
            CostKind::Quadratic => (x.center(), y.center()),
            CostKind::InnerProduct => (x.clone(), y.clone()),
        };
        let xs = x.points().column(0).to_owned();
        let ys = y.points().column(0).to_owned();
        let n = xs.len();
        let base = Array2::from_shape_fn((n, n), |(i, j)| {
            -spec.quad_coeff() * xs[i] * xs[i] * ys[j] * ys[j]
        });
        let slope = Array2::from_shape_fn((n, n), |(i, j)| -spec.bilinear_coeff() * xs[i] * ys[j]);
        Ok(Self {
            spec: *spec,
            base,
            slope,
            constant: marginal_constant(spec.kind, &x, &y),
            tol,
            phi: None,
            iterations: 0,
        })
    }

    fn eval(&mut self, a: f64) -> Result<f64> {
        let mut cost = self.base.clone();
        cost.scaled_add(a, &self.slope);
        let sol = solve_eot(
            &self.spec,
            &cost,
            self.tol,
            self.phi.as_ref().map(|p| p.view()),
        )?;
        self.iterations += sol.iterations;
        let value = self.constant + self.spec.reg_weight() * a * a + sol.value;
        self.phi = Some(sol.phi);
        Ok(value)
    }
}

fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

/// Brute-force minimum over a uniform grid of `A` in `[-M/2, M/2]` (with
/// `M = 1` for scalars), refined once on a grid `10x` finer around the
/// coarse minimizer. Refinement never increases the value.
pub fn grid_oracle_1d(
    spec: &CostSpec,
    x: &SampleSet,
    y: &SampleSet,
    grid_points: usize,
    tol: f64,
) -> Result<GridOracle> {
    if grid_points < 3 {
        return Err(Error::Validation(format!(
            "grid needs at least 3 points, got {grid_points}"
        )));
    }
    let mut scan = ScalarScan::new(spec, x, y, tol)?;
    let half = 0.5;
    let coarse_a = grid(-half, half, grid_points);
    let mut coarse = Vec::with_capacity(grid_points);
    for &a in &coarse_a {
        coarse.push((a, scan.eval(a)?));
    }
    let best = coarse
        .iter()
        .enumerate()
        .min_by(|p, q| p.1 .1.total_cmp(&q.1 .1))
        .map(|(i, _)| i)
        .expect("grid nonempty");
    let (mut a_best, mut v_best) = coarse[best];
    let lo = coarse_a[best.saturating_sub(1)];
    let hi = coarse_a[(best + 1).min(grid_points - 1)];
    let fine_points =
        ((hi - lo) / (coarse_a[1] - coarse_a[0]) * REFINE_FACTOR as f64).round() as usize + 1;
    scan.phi = None;
    // Start from the coarse minimizer's potential and sweep outward.
    scan.eval(a_best)?;
    for a in grid(lo, hi, fine_points.max(3)) {
        let v = scan.eval(a)?;
        if v < v_best {
            a_best = a;
            v_best = v;
        }
    }
    Ok(GridOracle {
        value: v_best,
        a: a_best,
        coarse,
        sinkhorn_iterations: scan.iterations,
    })
}

/// Objective of the scalar problem at fixed `a` (exact inner solve).
pub fn scalar_objective(
    spec: &CostSpec,
    x: &SampleSet,
    y: &SampleSet,
    a: f64,
    tol: f64,
) -> Result<f64> {
    ScalarScan::new(spec, x, y, tol)?.eval(a)
}

/// Optimal plan covariance for IEGW with `eps = 0.5`, `mu = N(0, 1)`,
/// `nu = N(0, 1/4)`.
pub fn gaussian_iegw_plan_1d() -> Array2<f64> {
    let off = 1.0 / 8f64.sqrt();
    ndarray::array![[1.0, off], [off, 0.25]]
}

/// Covariance of `(X_i, Y_j)` under the plan, as a `(dx + dy)` square matrix.
pub fn coupling_covariance(
    pi: &Coupling,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if pi.dim() != (x.nrows(), y.nrows()) {
        return Err(Error::Dimension(format!(
            "coupling is {:?} for {} x {} samples",
            pi.dim(),
            x.nrows(),
            y.nrows()
        )));
    }
    let (dx, dy) = (x.ncols(), y.ncols());
    let r = pi.row_sums();
    let c = pi.column_sums();
    let weighted_mean = |pts: ArrayView2<f64>, w: &Array1<f64>| pts.t().dot(w);
    let weighted_second = |pts: ArrayView2<f64>, w: &Array1<f64>| {
        let scaled = &pts * &w.view().insert_axis(Axis(1));
        pts.t().dot(&scaled)
    };
    let (mx, my) = (weighted_mean(x, &r), weighted_mean(y, &c));
    let sxx = weighted_second(x, &r);
    let syy = weighted_second(y, &c);
    let sxy = x.t().dot(&pi.values()).dot(&y);
    let mut out = Array2::zeros((dx + dy, dx + dy));
    for p in 0..dx + dy {
        for q in 0..dx + dy {
            let mp = if p < dx { mx[p] } else { my[p - dx] };
            let mq = if q < dx { mx[q] } else { my[q - dx] };
            let s = match (p < dx, q < dx) {
                (true, true) => sxx[[p, q]],
                (true, false) => sxy[[p, q - dx]],
                (false, true) => sxy[[q, p - dx]],
                (false, false) => syy[[p - dx, q - dx]],
            };
            out[[p, q]] = s - mp * mq;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// `(ln n, ln err)`.
    pub points: Vec<(f64, f64)>,
}

/// Least squares line through `(ln n, ln err)`.
pub fn fit_loglog_slope(ns: &[f64], errs: &[f64]) -> Result<SlopeFit> {
    if ns.len() != errs.len() {
        return Err(Error::Dimension(format!(
            "{} sizes but {} errors",
            ns.len(),
            errs.len()
        )));
    }
    if ns.len() < 2 {
        return Err(Error::Validation("need at least two points".into()));
    }
    if let Some(e) = errs.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(Error::Validation(format!(
            "errors must be positive, got {e}"
        )));
    }
    if ns.iter().any(|n| !(*n > 0.0)) {
        return Err(Error::Validation("sample sizes must be positive".into()));
    }
    let points: Vec<(f64, f64)> = ns.iter().zip(errs).map(|(n, e)| (n.ln(), e.ln())).collect();
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Validation(
            "sample sizes must not all be equal".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok(SlopeFit {
        slope,
        intercept,
        r2,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub numeric: Vec<f64>,
}

/// Compares `grad` with central differences of `f` at `x0`. The relative
/// error of coordinate `i` is `|fd_i - g_i| / max(|fd_i|, |g_i|, floor)`.
pub fn finite_diff_check<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    grad: &[f64],
    h: f64,
    floor: f64,
) -> Result<FdReport> {
    if !(h > 0.0) {
        return Err(Error::Validation(format!("step must be positive, got {h}")));
    }
    if grad.len() != x0.len() {
        return Err(Error::Dimension(format!(
            "{} gradient entries for {} coordinates",
            grad.len(),
            x0.len()
        )));
    }
    let mut x = x0.to_vec();
    let mut numeric = Vec::with_capacity(x0.len());
    let (mut max_rel_err, mut max_abs_err, mut worst_index) = (0.0, 0.0, 0);
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let up = f(&x);
        x[i] = x0[i] - h;
        let down = f(&x);
        x[i] = x0[i];
        let fd = (up - down) / (2.0 * h);
        let abs = (fd - grad[i]).abs();
        let rel = abs / fd.abs().max(grad[i].abs()).max(floor);
        if rel > max_rel_err || i == 0 {
            max_rel_err = rel;
            worst_index = i;
        }
        max_abs_err = f64::max(max_abs_err, abs);
        numeric.push(fd);
    }
    Ok(FdReport {
        max_rel_err,
        max_abs_err,
        worst_index,
        numeric,
    })
}
