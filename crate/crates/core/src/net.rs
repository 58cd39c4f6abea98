//! One-hidden-layer ReLU potentials with an affine skip connection:
//!
//! ```text
//! f(x) = sum_i beta_i * relu(w_i . x + b_i) + w0 . x + b0
//! ```
//!
//! Optionally constrained to the box `max_i |w_i|_1 v |b_i| <= 1`,
//! `|beta_i| <= 2a/k`, `|b0| <= a`, `|w0|_1 <= a`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Rows per rayon task in [`MlpParams::forward_batch`].
const ROW_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MlpDocument", try_from = "MlpDocument")]
pub struct MlpParams {
    /// `k x d`, row `i` is `w_i`.
    pub hidden_w: Array2<f64>,
    pub hidden_b: Array1<f64>,
    pub out_w: Array1<f64>,
    pub skip_w: Array1<f64>,
    pub skip_b: f64,
    /// Class bound `a`; `None` means unrestricted.
    pub bound_a: Option<f64>,
}

/// Gradient with respect to every parameter of an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub hidden_w: Array2<f64>,
    pub hidden_b: Array1<f64>,
    pub out_w: Array1<f64>,
    pub skip_w: Array1<f64>,
    pub skip_b: f64,
}

impl MlpParams {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            hidden_w: Array2::zeros((k, d)),
            hidden_b: Array1::zeros(k),
            out_w: Array1::zeros(k),
            skip_w: Array1::zeros(d),
            skip_b: 0.0,
            bound_a: None,
        }
    }

    /// Hidden weights and biases uniform on `[-1/sqrt(d), 1/sqrt(d)]`, zero
    /// readout and skip. Projected onto the class box when `bound_a` is set.
    pub fn init(k: usize, d: usize, bound_a: Option<f64>, seed: u64) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Validation(format!(
                "need k, d >= 1, got k={k}, d={d}"
            )));
        }
        if let Some(a) = bound_a {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Validation(format!(
                    "bound a must be finite and nonnegative, got {a}"
                )));
            }
        }
        let half = 1.0 / (d as f64).sqrt();
        let dist =
            Uniform::new_inclusive(-half, half).map_err(|e| Error::Validation(e.to_string()))?;
        let mut r = rng::seeded(seed);
        let mut p = Self::zeros(k, d);
        p.hidden_w = Array2::from_shape_simple_fn((k, d), || dist.sample(&mut r));
        p.hidden_b = Array1::from_shape_simple_fn(k, || dist.sample(&mut r));
        p.bound_a = bound_a;
        p.project();
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.hidden_w.nrows()
    }

    pub fn d(&self) -> usize {
        self.hidden_w.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.k() * (self.d() + 2) + self.d() + 1
    }

    pub fn is_finite(&self) -> bool {
        self.hidden_w
            .iter()
            .chain(&self.hidden_b)
            .chain(&self.out_w)
            .chain(&self.skip_w)
            .all(|v| v.is_finite())
            && self.skip_b.is_finite()
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.d() {
            return Err(Error::Dimension(format!(
                "network input dimension {} but got {d}",
                self.d()
            )));
        }
        Ok(())
    }

    /// Evaluation on a contiguous row; all public forward paths go through here.
    fn eval(&self, x: &[f64]) -> f64 {
        let w = self.hidden_w.as_slice().expect("standard layout");
        let d = self.d();
        let mut acc = 0.0;
        for (i, (&b, &beta)) in self.hidden_b.iter().zip(self.out_w.iter()).enumerate() {
            let z = dot(&w[i * d..(i + 1) * d], x) + b;
            if z > 0.0 {
                acc += beta * z;
            }
        }
        acc + dot(self.skip_w.as_slice().expect("contiguous"), x) + self.skip_b
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(match x.as_slice() {
            Some(s) => self.eval(s),
            None => self.eval(&x.to_vec()),
        })
    }

    /// Row-wise [`forward`](Self::forward). Each row is computed by the same
    /// sequential routine, so the result is independent of thread count.
    pub fn forward_batch(&self, xs: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_dim(xs.ncols())?;
        let xs = xs.as_standard_layout();
        let flat = xs.as_slice().expect("standard layout");
        let d = self.d().max(1);
        let mut out = vec![0.0; xs.nrows()];
        out.par_chunks_mut(ROW_CHUNK)
            .enumerate()
            .for_each(|(c, chunk)| {
                for (r, o) in chunk.iter_mut().enumerate() {
                    let i = c * ROW_CHUNK + r;
                    *o = self.eval(&flat[i * d..(i + 1) * d]);
                }
            });
        Ok(Array1::from(out))
    }

    /// Gradient of `sum_s dl_df[s] * f(xs[s])` in every parameter. The ReLU
    /// derivative at zero is taken to be zero.
    pub fn backward(&self, xs: ArrayView2<f64>, dl_df: ArrayView1<f64>) -> Result<MlpGrad> {
        self.check_dim(xs.ncols())?;
        if xs.nrows() != dl_df.len() {
            return Err(Error::Dimension(format!(
                "{} samples but {} upstream derivatives",
                xs.nrows(),
                dl_df.len()
            )));
        }
        let (k, d) = (self.k(), self.d());
        let w = self.hidden_w.as_slice().expect("standard layout");
        let mut g = MlpGrad::zeros(k, d);
        let gw = g.hidden_w.as_slice_mut().expect("standard layout");
        let xs = xs.as_standard_layout();
        let flat = xs.as_slice().expect("standard layout");
        for (s, &up) in dl_df.iter().enumerate() {
            if up == 0.0 {
                continue;
            }
            let x = &flat[s * d..(s + 1) * d];
            for i in 0..k {
                let z = dot(&w[i * d..(i + 1) * d], x) + self.hidden_b[i];
                if z > 0.0 {
                    g.out_w[i] += up * z;
                    let scale = up * self.out_w[i];
                    g.hidden_b[i] += scale;
                    for (gj, xj) in gw[i * d..(i + 1) * d].iter_mut().zip(x) {
                        *gj += scale * xj;
                    }
                }
            }
            for (gj, xj) in g.skip_w.iter_mut().zip(x) {
                *gj += up * xj;
            }
            g.skip_b += up;
        }
        Ok(g)
    }

    /// Euclidean projection onto the class box (no-op when unrestricted).
    pub fn project(&mut self) {
        let Some(a) = self.bound_a else { return };
        let k = self.k() as f64;
        for mut row in self.hidden_w.rows_mut() {
            project_l1_ball(row.as_slice_mut().expect("standard layout"), 1.0);
        }
        self.hidden_b.mapv_inplace(|b| b.clamp(-1.0, 1.0));
        let cap = 2.0 * a / k;
        self.out_w.mapv_inplace(|b| b.clamp(-cap, cap));
        self.skip_b = self.skip_b.clamp(-a, a);
        project_l1_ball(self.skip_w.as_slice_mut().expect("contiguous"), a);
    }

    /// Whether the parameters satisfy the class constraints (within `tol`).
    pub fn in_class(&self, tol: f64) -> bool {
        let Some(a) = self.bound_a else { return true };
        let k = self.k() as f64;
        self.hidden_w
            .rows()
            .into_iter()
            .all(|r| r.iter().map(|v| v.abs()).sum::<f64>() <= 1.0 + tol)
            && self.hidden_b.iter().all(|b| b.abs() <= 1.0 + tol)
            && self.out_w.iter().all(|b| b.abs() <= 2.0 * a / k + tol)
            && self.skip_b.abs() <= a + tol
            && self.skip_w.iter().map(|v| v.abs()).sum::<f64>() <= a + tol
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.hidden_w.as_slice_mut().expect("standard layout"),
            self.hidden_b.as_slice_mut().expect("contiguous"),
            self.out_w.as_slice_mut().expect("contiguous"),
            self.skip_w.as_slice_mut().expect("contiguous"),
            std::slice::from_mut(&mut self.skip_b),
        ]
    }

    /// Parameters in a fixed order: hidden weights (row major), hidden
    /// biases, readout, skip weights, skip bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend(self.hidden_w.iter());
        v.extend(self.hidden_b.iter());
        v.extend(self.out_w.iter());
        v.extend(self.skip_w.iter());
        v.push(self.skip_b);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }
}

impl MlpGrad {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            hidden_w: Array2::zeros((k, d)),
            hidden_b: Array1::zeros(k),
            out_w: Array1::zeros(k),
            skip_w: Array1::zeros(d),
            skip_b: 0.0,
        }
    }

    /// Same ordering as [`MlpParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend(self.hidden_w.iter());
        v.extend(self.hidden_b.iter());
        v.extend(self.out_w.iter());
        v.extend(self.skip_w.iter());
        v.push(self.skip_b);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean projection of `v` onto `{u : |u|_1 <= radius}` (sort-based).
pub(crate) fn project_l1_ball(v: &mut [f64], radius: f64) {
    let norm: f64 = v.iter().map(|x| x.abs()).sum();
    if norm <= radius {
        return;
    }
    if radius <= 0.0 {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &m) in mags.iter().enumerate() {
        cum += m;
        let t = (cum - radius) / (j + 1) as f64;
        if m > t {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = x.signum() * (x.abs() - theta).max(0.0);
    }
}

/// Number of epochs, minibatch size (0 = full batch), step size and whether
/// to project onto the class box after every step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub rate: f64,
    pub projection: bool,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 0,
            rate: 5e-2,
            projection: false,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        if self.batch_size > n {
            return Err(Error::Validation(format!(
                "batch size {} exceeds sample count {n}",
                self.batch_size
            )));
        }
        if !(self.rate >= 0.0 && self.rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.rate
            )));
        }
        Ok(())
    }

    /// Adam steps per epoch for `n` samples.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        if self.batch_size == 0 || self.batch_size >= n {
            1
        } else {
            n.div_ceil(self.batch_size)
        }
    }
}

/// Adam moment accumulators, flattened in [`MlpParams::to_flat`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    pub t: u64,
    pub rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub stabilizer: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams, rate: f64) -> Self {
        let n = params.num_params();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            rate,
            beta1: 0.9,
            beta2: 0.999,
            stabilizer: 1e-8,
        }
    }

    /// One bias-corrected Adam descent step on `params` along `grad`,
    /// followed by projection onto the class box when `project` is set.
    pub fn step(&mut self, params: &mut MlpParams, grad: &MlpGrad, project: bool) -> Result<()> {
        let g = grad.to_flat();
        if g.len() != self.m.len() || params.num_params() != self.m.len() {
            return Err(Error::Dimension(
                "gradient, parameters and optimizer state disagree".into(),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut offset = 0;
        for s in params.slices_mut() {
            for p in s.iter_mut() {
                let gi = g[offset];
                let m = &mut self.m[offset];
                let v = &mut self.v[offset];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.rate * mhat / (vhat.sqrt() + self.stabilizer);
                offset += 1;
            }
        }
        if project {
            params.project();
        }
        Ok(())
    }
}

/// On-disk form: a shape header plus flat arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MlpDocument {
    k: usize,
    d: usize,
    bound_a: Option<f64>,
    hidden_w: Vec<f64>,
    hidden_b: Vec<f64>,
    out_w: Vec<f64>,
    skip_w: Vec<f64>,
    skip_b: f64,
}

impl From<MlpParams> for MlpDocument {
    fn from(p: MlpParams) -> Self {
        Self {
            k: p.k(),
            d: p.d(),
            bound_a: p.bound_a,
            hidden_w: p.hidden_w.iter().copied().collect(),
            hidden_b: p.hidden_b.to_vec(),
            out_w: p.out_w.to_vec(),
            skip_w: p.skip_w.to_vec(),
            skip_b: p.skip_b,
        }
    }
}

impl TryFrom<MlpDocument> for MlpParams {
    type Error = String;

    fn try_from(doc: MlpDocument) -> std::result::Result<Self, String> {
        let (k, d) = (doc.k, doc.d);
        if doc.hidden_b.len() != k || doc.out_w.len() != k || doc.skip_w.len() != d {
            return Err(format!("array lengths do not match shape k={k}, d={d}"));
        }
        let hidden_w = Array2::from_shape_vec((k, d), doc.hidden_w).map_err(|e| e.to_string())?;
        Ok(Self {
            hidden_w,
            hidden_b: Array1::from(doc.hidden_b),
            out_w: Array1::from(doc.out_w),
            skip_w: Array1::from(doc.skip_w),
            skip_b: doc.skip_b,
            bound_a: doc.bound_a,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn random_params(k: usize, d: usize, seed: u64) -> MlpParams {
        let mut r = rng::seeded(seed);
        let mut p = MlpParams::zeros(k, d);
        let flat: Vec<f64> = (0..p.num_params())
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        p.set_flat(&flat).unwrap();
        p
    }

    #[test]
    fn single_relu() {
        let mut p = MlpParams::zeros(1, 2);
        p.out_w[0] = 1.0;
        p.hidden_w[[0, 0]] = 1.0;
        assert_eq!(p.forward(array![2.0, 3.0].view()).unwrap(), 2.0);
        assert_eq!(p.forward(array![-1.0, 0.0].view()).unwrap(), 0.0);
    }

    #[test]
    fn constant_networks() {
        let mut p = MlpParams::zeros(3, 2);
        assert_eq!(p.forward(array![4.0, -7.0].view()).unwrap(), 0.0);
        p.skip_b = 5.0;
        assert_eq!(p.forward(array![4.0, -7.0].view()).unwrap(), 5.0);
        assert_eq!(p.forward(array![0.0, 0.0].view()).unwrap(), 5.0);
    }

    #[test]
    fn dimension_mismatch() {
        let p = MlpParams::zeros(2, 3);
        assert!(matches!(
            p.forward(array![1.0].view()),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            p.forward_batch(Array2::zeros((2, 2)).view()),
            Err(Error::Dimension(_))
        ));
        assert!(p
            .backward(Array2::zeros((2, 3)).view(), Array1::zeros(3).view())
            .is_err());
    }

    #[test]
    fn batch_matches_scalar_bitwise() {
        let p = random_params(6, 3, 2);
        let mut r = rng::seeded(9);
        let xs = Array2::from_shape_simple_fn((10_000, 3), || r.random_range(-2.0..2.0));
        let batch = p.forward_batch(xs.view()).unwrap();
        for (i, row) in xs.rows().into_iter().enumerate() {
            assert_eq!(batch[i].to_bits(), p.forward(row).unwrap().to_bits());
        }
        assert_eq!(
            p.forward_batch(Array2::zeros((0, 3)).view()).unwrap().len(),
            0
        );
    }

    #[test]
    fn backward_simple_cases() {
        let p = random_params(4, 3, 1);
        let xs = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let g = p.backward(xs.view(), Array1::zeros(2).view()).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));

        let mut q = MlpParams::zeros(1, 2);
        q.hidden_w[[0, 0]] = 1.0;
        q.hidden_b[0] = 0.5;
        q.out_w[0] = 2.0;
        let x = array![[1.5, -3.0]];
        let g = q.backward(x.view(), array![0.7].view()).unwrap();
        assert!((g.out_w[0] - 2.0 * 0.7).abs() < 1e-15);
        assert!((g.hidden_b[0] - 2.0 * 0.7).abs() < 1e-15);
        assert_eq!(g.skip_b, 0.7);
    }

    #[test]
    fn init_properties() {
        let p = MlpParams::init(64, 8, None, 3).unwrap();
        let bound = 1.0 / 8f64.sqrt();
        assert!(p
            .hidden_w
            .iter()
            .chain(&p.hidden_b)
            .all(|v| v.abs() <= bound));
        assert_eq!(p, MlpParams::init(64, 8, None, 3).unwrap());
        assert_eq!(
            p.forward(array![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0].view())
                .unwrap(),
            0.0
        );
        let c = MlpParams::init(16, 8, Some(1.0), 3).unwrap();
        assert!(c.in_class(1e-12));
        assert!(MlpParams::init(0, 1, None, 0).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = random_params(3, 2, 4);
        let before = p.clone();
        let mut st = AdamState::new(&p, 0.1);
        st.step(&mut p, &MlpGrad::zeros(3, 2), false).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_rate() {
        let mut p = MlpParams::zeros(1, 1);
        let mut g = MlpGrad::zeros(1, 1);
        g.skip_b = 1.0;
        let mut st = AdamState::new(&p, 0.001);
        st.step(&mut p, &g, false).unwrap();
        assert!((p.skip_b + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_projection_bounds_readout() {
        let mut p = MlpParams::init(2, 3, Some(1.0), 0).unwrap();
        let mut st = AdamState::new(&p, 0.5);
        let mut g = MlpGrad::zeros(2, 3);
        g.out_w = array![-1.0, 1.0];
        for _ in 0..20 {
            st.step(&mut p, &g, true).unwrap();
            assert!(p.out_w.iter().all(|b| b.abs() <= 1.0));
        }
        assert!(p.in_class(1e-12));
    }

    #[test]
    fn json_round_trip() {
        let mut p = random_params(5, 2, 8);
        p.bound_a = Some(2.5);
        let s = serde_json::to_string(&p).unwrap();
        let back: MlpParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        let bad = r#"{"k":2,"d":1,"bound_a":null,"hidden_w":[1.0],"hidden_b":[0,0],"out_w":[0,0],"skip_w":[0],"skip_b":0}"#;
        assert!(serde_json::from_str::<MlpParams>(bad).is_err());
    }

    #[test]
    fn doubling_readout_doubles_output() {
        let mut p = random_params(4, 2, 6);
        p.skip_w.fill(0.0);
        p.skip_b = 0.0;
        let x = array![0.3, -0.8];
        let f = p.forward(x.view()).unwrap();
        p.out_w *= 2.0;
        assert!((p.forward(x.view()).unwrap() - 2.0 * f).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn l1_projection_is_idempotent_and_nonexpansive(
            u in proptest::collection::vec(-3.0f64..3.0, 1..6),
            v in proptest::collection::vec(-3.0f64..3.0, 1..6),
            radius in 0.1f64..2.0,
        ) {
            let len = u.len().min(v.len());
            let (mut pu, mut pv) = (u[..len].to_vec(), v[..len].to_vec());
            project_l1_ball(&mut pu, radius);
            project_l1_ball(&mut pv, radius);
            prop_assert!(pu.iter().map(|x| x.abs()).sum::<f64>() <= radius + 1e-12);
            let mut again = pu.clone();
            project_l1_ball(&mut again, radius);
            for (a, b) in again.iter().zip(&pu) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            let d_in: f64 = u[..len].iter().zip(&v[..len]).map(|(a, b)| (a - b).powi(2)).sum();
            let d_out: f64 = pu.iter().zip(&pv).map(|(a, b)| (a - b).powi(2)).sum();
            prop_assert!(d_out <= d_in + 1e-12);
        }

        #[test]
        fn class_projection_is_idempotent(seed in 0u64..500, a in 0.1f64..3.0) {
            let mut p = random_params(4, 3, seed);
            p.hidden_w *= 3.0;
            p.out_w *= 5.0;
            p.bound_a = Some(a);
            p.project();
            prop_assert!(p.in_class(1e-12));
            let q = { let mut q = p.clone(); q.project(); q };
            for (x, y) in p.to_flat().iter().zip(q.to_flat()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
