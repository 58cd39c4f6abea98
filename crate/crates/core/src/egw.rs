//! The outer loop over the correlation matrix `A` and the assembled
//! EGW / IEGW estimators.
//!
//! Objective: `Phi(A) = reg_weight |A|_F^2 + OT_A`, minimized over the box
//! `[-M/2, M/2]^{dx x dy}` with `M = sqrt(dx dy)`. The estimate is
//! `const + Phi(B)` where `const` depends only on the marginals.
//!
//! The iteration follows the listing literally. With `A_1 = C_0`, `G_1`
//! the gradient at `A_1` and `k = 1, 2, ...`:
//!
//! ```text
//! B_k     = P(A_k - beta G_k)
//! C_k     = P(C_{k-1} - gamma_k G_k)
//! A_{k+1} = tau_k C_k + (1 - tau_k) B_k
//! G_{k+1} = gradient at A_{k+1}
//! ```
//!
//! The loop stops after `max_outer` updates or once `|G|_F < grad_tol`. The
//! reported matrix is the last `B_k`, or `A_1` if no update was made. The
//! potential is retrained at that matrix before the final semi-dual value is
//! taken.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayView2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eot::semidual::semidual_with_cross_moment;
use crate::eot::{
    coupling, semidual_value, CostKind, CostSpec, Coupling, PairCost, PotentialTrainer,
};
use crate::error::{Error, Result};
use crate::net::{MlpParams, TrainPlan};
use crate::rng::derive_seed;
use crate::samples::{MomentSummary, SampleSet};

/// Rows per rayon task in the marginal constants.
const ROW_CHUNK: usize = 256;

/// `C(mu, nu) = E|x - x'|^4 + E|y - y'|^4 - 4 E|x|^2 E|y|^2` over the
/// empirical measures (all ordered pairs, diagonal included).
pub fn marginal_constant_quadratic(x: &SampleSet, y: &SampleSet) -> f64 {
    let cross = 4.0 * x.moments().m2 * y.moments().m2;
    pair_mean(x, |a, b| {
        let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        d * d
    }) + pair_mean(y, |a, b| {
        let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        d * d
    }) - cross
}

/// `F_1(mu, nu) = E<x, x'>^2 + E<y, y'>^2` over the empirical measures.
pub fn marginal_constant_inner(x: &SampleSet, y: &SampleSet) -> f64 {
    let sq_dot = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        d * d
    };
    pair_mean(x, sq_dot) + pair_mean(y, sq_dot)
}

pub fn marginal_constant(kind: CostKind, x: &SampleSet, y: &SampleSet) -> f64 {
    match kind {
        CostKind::Quadratic => marginal_constant_quadratic(x, y),
        CostKind::InnerProduct => marginal_constant_inner(x, y),
    }
}

/// `(1/n^2) sum_{i, i'} k(s_i, s_i')`, reduced in row order.
fn pair_mean<K: Fn(&[f64], &[f64]) -> f64 + Sync>(s: &SampleSet, kernel: K) -> f64 {
    let (n, d) = (s.n(), s.d());
    let pts = s.points();
    let flat = pts.as_slice().expect("standard layout");
    let partial: Vec<f64> = (0..n.div_ceil(ROW_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = 0.0;
            for i in c * ROW_CHUNK..((c + 1) * ROW_CHUNK).min(n) {
                let a = &flat[i * d..(i + 1) * d];
                for j in 0..n {
                    acc += kernel(a, &flat[j * d..(j + 1) * d]);
                }
            }
            acc
        })
        .collect();
    partial.iter().sum::<f64>() / (n * n) as f64
}

/// Step sizes of the accelerated scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub l: f64,
    pub beta: f64,
}

impl StepSchedule {
    pub fn gamma(&self, k: usize) -> f64 {
        k as f64 / (4.0 * self.l)
    }

    pub fn tau(&self, k: usize) -> f64 {
        2.0 / (k as f64 + 2.0)
    }
}

/// `L = floor v (num/eps sqrt(M4(mu) M4(nu)) - floor)` with
/// `(floor, num) = (64, 32^2)` for the quadratic cost and `(16, 8^2)` for
/// the inner-product cost.
pub fn step_schedule(spec: &CostSpec, mx: &MomentSummary, my: &MomentSummary) -> StepSchedule {
    let (floor, num) = spec.smoothness_constants();
    let l = floor.max(num / spec.eps * (mx.m4 * my.m4).sqrt() - floor);
    StepSchedule {
        l,
        beta: 1.0 / (2.0 * l),
    }
}

/// Entrywise clamp to `[-M/2, M/2]`.
pub fn project_box(v: ArrayView2<f64>, m: f64) -> Array2<f64> {
    let h = m / 2.0;
    v.mapv(|x| x.clamp(-h, h))
}

/// `grad_lin A - grad_bilin X^T Pi Y`.
pub fn approx_gradient(
    spec: &CostSpec,
    a: ArrayView2<f64>,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    pi: &Coupling,
) -> Result<Array2<f64>> {
    if pi.dim() != (x.nrows(), y.nrows()) {
        return Err(Error::Dimension(format!(
            "coupling is {:?} for {} x {} samples",
            pi.dim(),
            x.nrows(),
            y.nrows()
        )));
    }
    if a.dim() != (x.ncols(), y.ncols()) {
        return Err(Error::Dimension(format!(
            "A is {:?} for dimensions ({}, {})",
            a.dim(),
            x.ncols(),
            y.ncols()
        )));
    }
    let xty = x.t().dot(&pi.values()).dot(&y);
    Ok(gradient_from_cross(spec, a, xty.view()))
}

fn gradient_from_cross(spec: &CostSpec, a: ArrayView2<f64>, xty: ArrayView2<f64>) -> Array2<f64> {
    let mut g = a.mapv(|v| spec.grad_lin() * v);
    g.scaled_add(-spec.grad_bilin(), &xty);
    g
}

pub(crate) fn frobenius(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Options of [`estimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateOptions {
    pub k_neurons: usize,
    pub plan: TrainPlan,
    pub max_outer: usize,
    pub grad_tol: f64,
    pub seed: u64,
    /// Class bound `a` enforced when `plan.projection` is set.
    pub bound_a: Option<f64>,
    /// Every entry of the initial matrix `C_0` (clamped to the box).
    pub init_fill: f64,
    /// Epochs of the final solve at the reported matrix; `None` uses `plan.epochs`.
    pub final_epochs: Option<usize>,
    /// On a numerical failure, double `eps` and restart, up to `max_doublings` times.
    pub auto_eps: bool,
    pub max_doublings: usize,
    /// Store the `n x n` coupling in the result.
    pub keep_coupling: bool,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            k_neurons: 32,
            plan: TrainPlan::default(),
            max_outer: 100,
            grad_tol: 1e-4,
            seed: 0,
            bound_a: None,
            init_fill: 0.0,
            final_epochs: Some(200),
            auto_eps: false,
            max_doublings: 16,
            keep_coupling: true,
        }
    }
}

impl EstimateOptions {
    /// Stopping preset for Gaussian-type runs.
    pub fn gaussian_preset() -> Self {
        Self {
            max_outer: 200,
            grad_tol: 1e-3,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k_neurons == 0 {
            return Err(Error::Validation("k_neurons must be at least 1".into()));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::Validation(format!(
                "grad_tol must be nonnegative, got {}",
                self.grad_tol
            )));
        }
        if !self.init_fill.is_finite() {
            return Err(Error::Validation("init_fill must be finite".into()));
        }
        if self.plan.projection && self.bound_a.is_none() {
            return Err(Error::Validation(
                "projection requires a class bound".into(),
            ));
        }
        Ok(())
    }
}

/// One outer iteration. `k = 0` records the initial matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub k: usize,
    /// `reg_weight |A|^2 + semi-dual` at the matrix the gradient was taken at.
    pub objective: f64,
    pub grad_norm: f64,
    /// Largest entry magnitude over `A_{k+1}`, `B_k`, `C_k`.
    pub box_max: f64,
    pub inner: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EgwResult {
    pub schema: u32,
    pub kind: CostKind,
    /// Regularization actually used (after any doubling).
    pub eps: f64,
    pub eps_doublings: usize,
    pub n: usize,
    pub dx: usize,
    pub dy: usize,
    pub total: f64,
    pub marginal_const: f64,
    /// `reg_weight |A_star|_F^2`.
    pub reg_term: f64,
    pub semidual: f64,
    #[serde(with = "matrix_rows")]
    pub a_star: Array2<f64>,
    pub net: MlpParams,
    #[serde(skip)]
    pub coupling: Option<Coupling>,
    pub schedule: StepSchedule,
    pub box_half_width: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_grad_norm: f64,
    pub trace: Vec<OuterRecord>,
}

impl EgwResult {
    /// `marginal_const + reg_term + semidual`.
    pub fn reassembled(&self) -> f64 {
        self.marginal_const + self.reg_term + self.semidual
    }

    /// Whether every outer iterate stayed inside the box.
    pub fn iterates_in_box(&self) -> bool {
        let h = self.box_half_width;
        self.trace.iter().all(|r| r.box_max <= h)
    }
}

/// Runs the estimator, doubling `eps` after numerical failures when
/// `opts.auto_eps` is set.
pub fn estimate(
    spec: &CostSpec,
    x: &SampleSet,
    y: &SampleSet,
    opts: &EstimateOptions,
) -> Result<EgwResult> {
    let mut spec = *spec;
    let mut doublings = 0;
    loop {
        match estimate_once(&spec, x, y, opts) {
            Err(Error::Numerical { .. }) if opts.auto_eps && doublings < opts.max_doublings => {
                doublings += 1;
                spec = spec.with_eps(2.0 * spec.eps)?;
            }
            Ok(mut r) => {
                r.eps_doublings = doublings;
                return Ok(r);
            }
            Err(e) => return Err(e),
        }
    }
}

fn estimate_once(
    spec: &CostSpec,
    x: &SampleSet,
    y: &SampleSet,
    opts: &EstimateOptions,
) -> Result<EgwResult> {
    opts.validate()?;
    if x.n() != y.n() {
        return Err(Error::Dimension(format!(
            "{} source samples but {} target samples",
            x.n(),
            y.n()
        )));
    }
    let (x, y) = match spec.kind {
        CostKind::Quadratic => (x.center(), y.center()),
        CostKind::InnerProduct => (x.clone(), y.clone()),
    };
    let (dx, dy) = (x.d(), y.d());
    let mx = x.moments();
    let my = y.moments();
    let schedule = step_schedule(spec, &mx, &my);
    let m = ((dx * dy) as f64).sqrt();
    let half = m / 2.0;
    let marginal_const = marginal_constant(spec.kind, &x, &y);
    let reg = spec.reg_weight();
    let (xp, yp) = (x.points(), y.points());

    let net = MlpParams::init(opts.k_neurons, dx, opts.bound_a, derive_seed(opts.seed, 1))?;
    let mut trainer = PotentialTrainer::new(net, opts.plan, derive_seed(opts.seed, 2));

    let grad_at =
        |trainer: &mut PotentialTrainer, a: &Array2<f64>| -> Result<(Vec<f64>, f64, Array2<f64>)> {
            let inner = trainer.train(spec, a.view(), xp, yp)?;
            let f = trainer.net.forward_batch(xp)?;
            let cost = PairCost::new(spec, a.view(), xp, yp)?;
            let (value, xty) = semidual_with_cross_moment(spec, f.view(), &cost, xp, yp)?;
            let g = gradient_from_cross(spec, a.view(), xty.view());
            if !value.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    step: trainer.steps(),
                    eps: spec.eps,
                });
            }
            Ok((inner, reg * sq_frobenius(a.view()) + value, g))
        };

    let mut c = project_box(Array2::from_elem((dx, dy), opts.init_fill).view(), m);
    let mut a = c.clone();
    let (inner, objective, mut g) = grad_at(&mut trainer, &a)?;
    let mut grad_norm = frobenius(g.view());
    let mut trace = vec![OuterRecord {
        k: 0,
        objective,
        grad_norm,
        box_max: max_abs(a.view()),
        inner,
    }];
    let mut b = a.clone();
    let mut k = 1;
    while k <= opts.max_outer && grad_norm >= opts.grad_tol {
        b = project_box((&a - &(&g * schedule.beta)).view(), m);
        c = project_box((&c - &(&g * schedule.gamma(k))).view(), m);
        let tau = schedule.tau(k);
        a = Zip::from(&c)
            .and(&b)
            .map_collect(|&cv, &bv| tau * cv + (1.0 - tau) * bv);
        let box_max = max_abs(a.view())
            .max(max_abs(b.view()))
            .max(max_abs(c.view()));
        if box_max > half {
            return Err(Error::Validation(format!(
                "iterate left the box at k = {k}: {box_max} > {half}"
            )));
        }
        let (inner, objective, next) = grad_at(&mut trainer, &a)?;
        g = next;
        grad_norm = frobenius(g.view());
        trace.push(OuterRecord {
            k,
            objective,
            grad_norm,
            box_max,
            inner,
        });
        k += 1;
    }
    let iterations = k - 1;
    let a_star = if iterations == 0 { a } else { b };

    let final_epochs = opts.final_epochs.unwrap_or(opts.plan.epochs);
    trainer.train_epochs(spec, a_star.view(), xp, yp, final_epochs)?;
    let f = trainer.net.forward_batch(xp)?;
    let cost = PairCost::new(spec, a_star.view(), xp, yp)?;
    let semidual = semidual_value(spec, f.view(), &cost)?;
    if !semidual.is_finite() {
        return Err(Error::Numerical {
            step: trainer.steps(),
            eps: spec.eps,
        });
    }
    let plan = if opts.keep_coupling {
        Some(coupling(spec, f.view(), &cost)?)
    } else {
        None
    };
    let reg_term = reg * sq_frobenius(a_star.view());
    Ok(EgwResult {
        schema: 1,
        kind: spec.kind,
        eps: spec.eps,
        eps_doublings: 0,
        n: x.n(),
        dx,
        dy,
        total: marginal_const + reg_term + semidual,
        marginal_const,
        reg_term,
        semidual,
        a_star,
        net: trainer.net,
        coupling: plan,
        schedule,
        box_half_width: half,
        iterations,
        converged: grad_norm < opts.grad_tol,
        final_grad_norm: grad_norm,
        trace,
    })
}

fn sq_frobenius(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

fn max_abs(a: ArrayView2<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Path of the JSON sidecar written next to a plan CSV.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

#[derive(Serialize)]
struct PlanSidecar<'a> {
    schema: u32,
    #[serde(with = "matrix_rows")]
    a_star: &'a Array2<f64>,
    total: f64,
    marginal_const: f64,
}

/// Writes the coupling as CSV (row `i` = source sample `i`) plus a JSON
/// sidecar with `a_star`, `total` and `marginal_const`.
pub fn export_plan(r: &EgwResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let pi = r
        .coupling
        .as_ref()
        .ok_or_else(|| Error::Validation("result holds no coupling".into()))?;
    write_matrix_csv(pi.values(), path)?;
    let side = PlanSidecar {
        schema: 1,
        a_star: &r.a_star,
        total: r.total,
        marginal_const: r.marginal_const,
    };
    let mut out = BufWriter::new(File::create(sidecar_path(path))?);
    serde_json::to_writer_pretty(&mut out, &side)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Shortest round-trip decimal form, one row per line.
pub fn write_matrix_csv(m: ArrayView2<f64>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut line = String::new();
    for row in m.rows() {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&v.to_string());
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<Coupling> {
    let s = crate::samples::load_csv(path, false)?;
    Coupling::from_values(s.points().to_owned())
}

/// Outer objective at a fixed matrix with the inner problem solved
/// exactly: `const + reg |A|^2 + OT_A`.
pub fn fixed_a_objective(
    spec: &CostSpec,
    a: ArrayView2<f64>,
    x: &SampleSet,
    y: &SampleSet,
    tol: f64,
    warm: Option<ArrayView1<f64>>,
) -> Result<(f64, crate::eot::SinkhornSolution)> {
    let (x, y) = match spec.kind {
        CostKind::Quadratic => (x.center(), y.center()),
        CostKind::InnerProduct => (x.clone(), y.clone()),
    };
    let cost = crate::eot::cost_matrix(spec, a, x.points(), y.points())?;
    let sol = crate::eot::solve_eot(spec, &cost, tol, warm)?;
    let value =
        marginal_constant(spec.kind, &x, &y) + spec.reg_weight() * sq_frobenius(a) + sol.value;
    Ok((value, sol))
}

/// Serializes a matrix as a list of rows.
pub(crate) mod matrix_rows {
    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::borrow::Borrow;

    pub fn serialize<M: Borrow<Array2<f64>>, S: Serializer>(
        m: &M,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.borrow().rows().into_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let nrows = flat.len().checked_div(ncols).unwrap_or(0);
        Array2::from_shape_vec((nrows, ncols), flat).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eot::{cost_matrix, sinkhorn};
    use crate::samples::{gen_uniform_cube, random_orthogonal};
    use ndarray::array;

    fn set(rows: Array2<f64>) -> SampleSet {
        SampleSet::new(rows, "test").unwrap()
    }

    #[test]
    fn marginal_constant_examples() {
        let zero = set(array![[0.0]]);
        assert_eq!(marginal_constant_quadratic(&zero, &zero), 0.0);
        let pm = set(array![[-1.0], [1.0]]);
        assert!((marginal_constant_quadratic(&pm, &pm) - 12.0).abs() < 1e-12);
        assert!((marginal_constant_inner(&pm, &pm) - 2.0).abs() < 1e-12);
        let z = set(Array2::zeros((3, 2)));
        assert_eq!(marginal_constant_inner(&z, &z), 0.0);
    }

    #[test]
    fn marginal_constants_match_moment_identities() {
        let x = gen_uniform_cube(3, 40, 1).unwrap().center();
        let y = gen_uniform_cube(2, 40, 2).unwrap().center();
        let (mx, my) = (x.moments(), y.moments());
        let gram_sq = |m: &MomentSummary| m.gram.iter().map(|v| v * v).sum::<f64>();
        let quad = 2.0 * mx.m4
            + 2.0 * mx.m2 * mx.m2
            + 4.0 * gram_sq(&mx)
            + 2.0 * my.m4
            + 2.0 * my.m2 * my.m2
            + 4.0 * gram_sq(&my)
            - 4.0 * mx.m2 * my.m2;
        assert!((marginal_constant_quadratic(&x, &y) - quad).abs() < 1e-12 * quad.abs().max(1.0));
        let inner = gram_sq(&mx) + gram_sq(&my);
        assert!((marginal_constant_inner(&x, &y) - inner).abs() < 1e-12);
    }

    #[test]
    fn marginal_constants_are_rotation_invariant() {
        let x = gen_uniform_cube(3, 30, 3).unwrap().center();
        let y = gen_uniform_cube(3, 30, 4).unwrap().center();
        let q = random_orthogonal(3, 5).unwrap();
        let xr = x.rotate(&q).unwrap();
        assert!(
            (marginal_constant_quadratic(&x, &y) - marginal_constant_quadratic(&xr, &y)).abs()
                < 1e-12
        );
        assert!((marginal_constant_inner(&x, &y) - marginal_constant_inner(&xr, &y)).abs() < 1e-12);
    }

    #[test]
    fn schedule_examples() {
        let unit = MomentSummary {
            m2: 1.0,
            m4: 1.0,
            gram: Array2::eye(1),
        };
        let s = step_schedule(&CostSpec::quadratic(2.0).unwrap(), &unit, &unit);
        assert_eq!(s.l, 448.0);
        assert_eq!(s.beta, 1.0 / 896.0);
        let s = step_schedule(&CostSpec::quadratic(1e6).unwrap(), &unit, &unit);
        assert_eq!(s.l, 64.0);
        assert_eq!((s.tau(1), s.tau(2)), (2.0 / 3.0, 0.5));
        assert_eq!(s.gamma(3), 3.0 / 256.0);
        let s = step_schedule(&CostSpec::inner(1.0).unwrap(), &unit, &unit);
        assert_eq!(s.l, 48.0);
        assert_eq!(
            step_schedule(&CostSpec::inner(100.0).unwrap(), &unit, &unit).l,
            16.0
        );
    }

    #[test]
    fn box_projection() {
        assert_eq!(
            project_box(array![[3.0, -0.5, -7.0]].view(), 2.0),
            array![[1.0, -0.5, -1.0]]
        );
        let v = array![[0.3, 9.0], [-4.0, 0.0]];
        let once = project_box(v.view(), 1.5);
        assert_eq!(project_box(once.view(), 1.5), once);
    }

    #[test]
    fn gradient_examples() {
        let q = CostSpec::quadratic(1.0).unwrap();
        let one = array![[1.0]];
        let pi = Coupling::from_values(array![[1.0]]).unwrap();
        let g = approx_gradient(&q, array![[0.0]].view(), one.view(), one.view(), &pi).unwrap();
        assert_eq!(g[[0, 0]], -32.0);

        let x = gen_uniform_cube(2, 5, 1).unwrap().center();
        let y = gen_uniform_cube(3, 5, 2).unwrap().center();
        let a = array![[0.1, 0.2, -0.3], [0.0, 0.4, 0.1]];
        let uniform = Coupling::from_values(Array2::from_elem((5, 5), 1.0 / 25.0)).unwrap();
        let g = approx_gradient(&q, a.view(), x.points(), y.points(), &uniform).unwrap();
        assert!((&g - &(&a * 64.0)).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn gradient_matches_danskin_differences() {
        for kind in [CostKind::Quadratic, CostKind::InnerProduct] {
            let s = CostSpec::new(kind, 1.0).unwrap();
            let x = gen_uniform_cube(2, 6, 7).unwrap().center();
            let y = gen_uniform_cube(2, 6, 8).unwrap().center();
            let a = array![[0.2, -0.1], [0.15, 0.05]];
            let phi = |a: &Array2<f64>| {
                let c = cost_matrix(&s, a.view(), x.points(), y.points()).unwrap();
                s.reg_weight() * sq_frobenius(a.view())
                    + sinkhorn(&s, &c, 1e-13, 100_000).unwrap().value
            };
            let c = cost_matrix(&s, a.view(), x.points(), y.points()).unwrap();
            let sol = sinkhorn(&s, &c, 1e-13, 100_000).unwrap();
            let g = approx_gradient(&s, a.view(), x.points(), y.points(), &sol.coupling).unwrap();
            let h = 1e-5;
            for idx in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let (mut ap, mut am) = (a.clone(), a.clone());
                ap[idx] += h;
                am[idx] -= h;
                let fd = (phi(&ap) - phi(&am)) / (2.0 * h);
                assert!(
                    (fd - g[idx]).abs() <= 1e-4 * g[idx].abs().max(1.0),
                    "{kind:?} {idx:?}: {fd} vs {}",
                    g[idx]
                );
            }
        }
    }

    fn quick_opts() -> EstimateOptions {
        EstimateOptions {
            k_neurons: 8,
            plan: TrainPlan {
                epochs: 5,
                rate: 0.02,
                ..TrainPlan::default()
            },
            max_outer: 10,
            ..EstimateOptions::default()
        }
    }

    #[test]
    fn single_points_give_zero() {
        let x = set(array![[3.0, 1.0]]);
        let y = set(array![[-2.0]]);
        let r = estimate(&CostSpec::quadratic(0.5).unwrap(), &x, &y, &quick_opts()).unwrap();
        assert_eq!(r.total, 0.0);
        assert_eq!(r.a_star, Array2::<f64>::zeros((2, 1)));
        assert_eq!(r.iterations, 0);
        assert!(r.converged);
    }

    #[test]
    fn result_invariants() {
        let x = gen_uniform_cube(2, 20, 1).unwrap();
        let y = gen_uniform_cube(3, 20, 2).unwrap();
        let r = estimate(&CostSpec::quadratic(1.0).unwrap(), &x, &y, &quick_opts()).unwrap();
        assert!((r.total - r.reassembled()).abs() < 1e-10);
        assert!(r.iterates_in_box());
        assert_eq!(r.a_star.dim(), (2, 3));
        let pi = r.coupling.as_ref().unwrap();
        assert!(pi.column_marginal_error() < 1e-12);
        assert!((pi.total() - 1.0).abs() < 1e-12);
        assert_eq!(r.trace.len(), r.iterations + 1);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let x = gen_uniform_cube(2, 16, 3).unwrap();
        let y = gen_uniform_cube(2, 16, 4).unwrap();
        let s = CostSpec::inner(1.0).unwrap();
        let mut opts = quick_opts();
        opts.init_fill = 0.3;
        let a = estimate(&s, &x, &y, &opts).unwrap();
        let b = estimate(&s, &x, &y, &opts).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn zero_iterations_report_initial_matrix() {
        let x = gen_uniform_cube(1, 10, 3).unwrap();
        let y = gen_uniform_cube(1, 10, 4).unwrap();
        let mut opts = quick_opts();
        opts.max_outer = 0;
        opts.init_fill = 0.2;
        let r = estimate(&CostSpec::inner(1.0).unwrap(), &x, &y, &opts).unwrap();
        assert_eq!(r.a_star, array![[0.2]]);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn auto_eps_recovers_from_overflow() {
        let x = gen_uniform_cube(1, 6, 3).unwrap();
        let y = gen_uniform_cube(1, 6, 4).unwrap();
        let s = CostSpec::quadratic(1e-310).unwrap();
        let mut opts = quick_opts();
        assert!(matches!(
            estimate(&s, &x, &y, &opts),
            Err(Error::Numerical { .. })
        ));
        opts.auto_eps = true;
        opts.max_doublings = 64;
        let r = estimate(&s, &x, &y, &opts).unwrap();
        assert!(r.eps_doublings > 0);
        assert!(r.eps > 1e-310 && r.total.is_finite());
    }

    #[test]
    fn plan_export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let x = gen_uniform_cube(2, 7, 1).unwrap();
        let y = gen_uniform_cube(2, 7, 2).unwrap();
        let r = estimate(&CostSpec::quadratic(1.0).unwrap(), &x, &y, &quick_opts()).unwrap();
        let path = dir.path().join("plan.csv");
        export_plan(&r, &path).unwrap();
        let back = load_plan(&path).unwrap();
        assert_eq!(back.values(), r.coupling.as_ref().unwrap().values());
        assert!(back.column_marginal_error() < 1e-12);
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side["total"].as_f64().unwrap(), r.total);

        let one = set(array![[1.0]]);
        let r1 = estimate(
            &CostSpec::quadratic(1.0).unwrap(),
            &one,
            &one,
            &quick_opts(),
        )
        .unwrap();
        let p1 = dir.path().join("one.csv");
        export_plan(&r1, &p1).unwrap();
        assert_eq!(std::fs::read_to_string(&p1).unwrap(), "1\n");
    }

    #[test]
    fn result_json_round_trip() {
        let x = gen_uniform_cube(1, 5, 1).unwrap();
        let r = estimate(&CostSpec::inner(1.0).unwrap(), &x, &x, &quick_opts()).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        let back: EgwResult = serde_json::from_str(&s).unwrap();
        assert_eq!(back.a_star, r.a_star);
        assert_eq!(back.total, r.total);
        assert_eq!(back.net, r.net);
    }
}
