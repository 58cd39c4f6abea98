//! Adam ascent on the empirical semi-dual over a shallow ReLU potential.

use ndarray::{ArrayView2, Axis};
use rand::seq::index;

use super::cost::{CostColumns, CostSpec, PairCost};
use super::semidual::semidual_with_grad;
use crate::error::{Error, Result};
use crate::net::{AdamState, MlpParams, TrainPlan};
use crate::rng::{self, Rng};

/// Full-batch training stores the cost matrix when it has at most this many
/// entries and evaluates it on the fly otherwise.
pub const DENSE_LIMIT: usize = 1 << 22;

/// Network plus optimizer state, carried across calls so that consecutive
/// inner solves continue from the previous potential.
#[derive(Debug, Clone)]
pub struct PotentialTrainer {
    pub net: MlpParams,
    pub plan: TrainPlan,
    adam: AdamState,
    rng: Rng,
    steps: usize,
}

impl PotentialTrainer {
    pub fn new(net: MlpParams, plan: TrainPlan, seed: u64) -> Self {
        let adam = AdamState::new(&net, plan.rate);
        Self {
            net,
            plan,
            adam,
            rng: rng::seeded(seed),
            steps: 0,
        }
    }

    /// Adam steps taken so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Runs `plan.epochs` epochs at cost `c_A` and returns the mean batch
    /// objective of each epoch.
    pub fn train(
        &mut self,
        spec: &CostSpec,
        a: ArrayView2<f64>,
        x: ArrayView2<f64>,
        y: ArrayView2<f64>,
    ) -> Result<Vec<f64>> {
        self.train_epochs(spec, a, x, y, self.plan.epochs)
    }

    pub fn train_epochs(
        &mut self,
        spec: &CostSpec,
        a: ArrayView2<f64>,
        x: ArrayView2<f64>,
        y: ArrayView2<f64>,
        epochs: usize,
    ) -> Result<Vec<f64>> {
        let n = x.nrows();
        if y.nrows() != n {
            return Err(Error::Dimension(format!(
                "{n} source samples but {} target samples",
                y.nrows()
            )));
        }
        if x.ncols() != self.net.d() {
            return Err(Error::Dimension(format!(
                "network input dimension {} but source samples have dimension {}",
                self.net.d(),
                x.ncols()
            )));
        }
        self.plan.validate(n)?;
        self.adam.rate = self.plan.rate;
        let per_epoch = self.plan.steps_per_epoch(n);
        let mut trace = Vec::with_capacity(epochs);
        if per_epoch == 1 {
            let full = PairCost::new(spec, a, x, y)?;
            if n * n <= DENSE_LIMIT {
                let dense = full.materialize();
                for _ in 0..epochs {
                    trace.push(self.step(spec, x, &dense)?);
                }
            } else {
                for _ in 0..epochs {
                    trace.push(self.step(spec, x, &full)?);
                }
            }
            return Ok(trace);
        }
        let m = self.plan.batch_size;
        for _ in 0..epochs {
            let mut total = 0.0;
            for _ in 0..per_epoch {
                let ix = index::sample(&mut self.rng, n, m).into_vec();
                let iy = index::sample(&mut self.rng, n, m).into_vec();
                let xb = x.select(Axis(0), &ix);
                let yb = y.select(Axis(0), &iy);
                let cost = PairCost::new(spec, a, xb.view(), yb.view())?;
                total += self.step(spec, xb.view(), &cost)?;
            }
            trace.push(total / per_epoch as f64);
        }
        Ok(trace)
    }

    fn step<C: CostColumns + ?Sized>(
        &mut self,
        spec: &CostSpec,
        x: ArrayView2<f64>,
        cost: &C,
    ) -> Result<f64> {
        let fail = Error::Numerical {
            step: self.steps,
            eps: spec.eps,
        };
        let f = self.net.forward_batch(x)?;
        if f.iter().any(|v| !v.is_finite()) {
            return Err(fail);
        }
        let (value, g) = semidual_with_grad(spec, f.view(), cost)?;
        if !value.is_finite() {
            return Err(fail);
        }
        let up = g.mapv(|v| -v);
        let grad = self.net.backward(x, up.view())?;
        if !grad.is_finite() {
            return Err(fail);
        }
        self.adam.step(&mut self.net, &grad, self.plan.projection)?;
        self.steps += 1;
        if !self.net.is_finite() {
            return Err(Error::Numerical {
                step: self.steps,
                eps: spec.eps,
            });
        }
        Ok(value)
    }
}

/// One-shot training from `net` with fresh optimizer state.
pub fn train_potential(
    spec: &CostSpec,
    net: MlpParams,
    a: ArrayView2<f64>,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    plan: TrainPlan,
    seed: u64,
) -> Result<(MlpParams, Vec<f64>)> {
    let mut t = PotentialTrainer::new(net, plan, seed);
    let trace = t.train(spec, a, x, y)?;
    Ok((t.net, trace))
}
