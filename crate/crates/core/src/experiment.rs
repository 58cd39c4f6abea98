//! Drivers behind the CLI experiments: convergence rate, oracle comparison
//! and rotation invariance.
//!
//! Every driver derives all of its randomness from one base seed, runs its
//! independent cells on the current rayon pool and aggregates in index
//! order, so reports are reproducible for any thread count.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::egw::{estimate, fixed_a_objective, EstimateOptions};
use crate::eot::{CostKind, CostSpec};
use crate::error::{Error, Result};
use crate::oracles::{fit_loglog_slope, grid_oracle_1d, SlopeFit, DEFAULT_GRID_POINTS};
use crate::rng::derive_seed;
use crate::samples::{gen_uniform_cube, random_orthogonal, GaussianLaw, SampleSet};

pub const SCHEMA: u32 = 1;

/// Sampling law for synthetic experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distribution {
    UniformCube,
    /// Centered Gaussian with a random covariance drawn once per experiment.
    Gaussian,
}

impl std::str::FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-cube" | "uniform" => Ok(Self::UniformCube),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::Validation(format!("unknown distribution {other:?}"))),
        }
    }
}

/// A law that can be sampled repeatedly with fresh seeds.
#[derive(Debug, Clone)]
pub enum Law {
    UniformCube(usize),
    Gaussian(GaussianLaw),
}

impl Law {
    pub fn new(dist: Distribution, d: usize, seed: u64) -> Result<Self> {
        match dist {
            Distribution::UniformCube => {
                if d == 0 {
                    return Err(Error::Validation("dimension must be at least 1".into()));
                }
                Ok(Self::UniformCube(d))
            }
            Distribution::Gaussian => Ok(Self::Gaussian(GaussianLaw::random_cov(d, seed)?)),
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<SampleSet> {
        match self {
            Self::UniformCube(d) => gen_uniform_cube(*d, n, seed),
            Self::Gaussian(g) => g.sample(n, seed),
        }
    }
}

/// Configuration of [`run_rate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateConfig {
    pub kind: CostKind,
    pub eps: f64,
    pub dist: Distribution,
    pub dx: usize,
    pub dy: usize,
    pub n_grid: Vec<usize>,
    pub runs: usize,
    pub seed: u64,
    pub estimator: EstimateOptions,
    pub reference_runs: usize,
    /// Multiplier on the inner epochs of the reference estimates.
    pub reference_budget: usize,
    /// Replace estimation by errors `c n^{-1/2}` to test the harness.
    pub stub_constant: Option<f64>,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            kind: CostKind::Quadratic,
            eps: 0.5,
            dist: Distribution::UniformCube,
            dx: 8,
            dy: 8,
            n_grid: vec![64, 128, 256, 512, 1024, 2048],
            runs: 10,
            seed: 0,
            estimator: EstimateOptions::default(),
            reference_runs: 3,
            reference_budget: 4,
            stub_constant: None,
        }
    }
}

impl RateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Validation("runs must be at least 1".into()));
        }
        if self.n_grid.len() < 3 {
            return Err(Error::Validation(format!(
                "n grid needs at least 3 sizes, got {}",
                self.n_grid.len()
            )));
        }
        if self.n_grid[0] == 0 || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "n grid must be positive and strictly increasing: {:?}",
                self.n_grid
            )));
        }
        if self.reference_runs == 0 || self.reference_budget == 0 {
            return Err(Error::Validation(
                "reference runs and budget must be at least 1".into(),
            ));
        }
        if let Some(c) = self.stub_constant {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Validation(format!(
                    "stub constant must be positive, got {c}"
                )));
            }
        }
        CostSpec::new(self.kind, self.eps)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub n: usize,
    pub run: usize,
    pub seed: u64,
    pub total: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub n: usize,
    pub mean_err: f64,
    /// Sample standard deviation over runs; absent for a single run.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub schema: u32,
    pub config: RateConfig,
    /// Median of the reference estimates at the largest `n`.
    pub reference: f64,
    pub reference_values: Vec<f64>,
    pub cells: Vec<RateCell>,
    pub summary: Vec<RateSummary>,
    pub fit: SlopeFit,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn estimate_total(
    spec: &CostSpec,
    law_x: &Law,
    law_y: &Law,
    n: usize,
    seed: u64,
    opts: &EstimateOptions,
) -> Result<f64> {
    let x = law_x.sample(n, derive_seed(seed, 1))?;
    let y = law_y.sample(n, derive_seed(seed, 2))?;
    let opts = EstimateOptions {
        seed: derive_seed(seed, 3),
        keep_coupling: false,
        ..opts.clone()
    };
    Ok(estimate(spec, &x, &y, &opts)?.total)
}

/// Mean relative error against a self-consistent reference at each sample
/// size, plus the log-log slope of those means.
pub fn run_rate(cfg: &RateConfig) -> Result<RateReport> {
    cfg.validate()?;
    let grid = &cfg.n_grid;
    let cell_seed = |n: usize, run: usize| derive_seed(derive_seed(cfg.seed, n as u64), run as u64);
    let (reference, reference_values, totals) = match cfg.stub_constant {
        Some(c) => {
            let totals = grid
                .iter()
                .flat_map(|&n| std::iter::repeat_n(1.0 + c / (n as f64).sqrt(), cfg.runs))
                .collect::<Vec<_>>();
            (1.0, vec![1.0], totals)
        }
        None => {
            let spec = CostSpec::new(cfg.kind, cfg.eps)?;
            let law_x = Law::new(cfg.dist, cfg.dx, derive_seed(cfg.seed, 100))?;
            let law_y = Law::new(cfg.dist, cfg.dy, derive_seed(cfg.seed, 101))?;
            let mut strong = cfg.estimator.clone();
            strong.plan.epochs *= cfg.reference_budget;
            strong.final_epochs = Some(
                cfg.estimator
                    .final_epochs
                    .unwrap_or(cfg.estimator.plan.epochs)
                    * cfg.reference_budget,
            );
            let n_max = *grid.last().expect("validated");
            let reference_values = (0..cfg.reference_runs)
                .into_par_iter()
                .map(|r| {
                    estimate_total(
                        &spec,
                        &law_x,
                        &law_y,
                        n_max,
                        derive_seed(cfg.seed, 1_000_000 + r as u64),
                        &strong,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let totals = grid
                .iter()
                .flat_map(|&n| (0..cfg.runs).map(move |run| (n, run)))
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|(n, run)| {
                    estimate_total(&spec, &law_x, &law_y, n, cell_seed(n, run), &cfg.estimator)
                })
                .collect::<Result<Vec<_>>>()?;
            (median(&reference_values), reference_values, totals)
        }
    };
    if reference == 0.0 {
        return Err(Error::Validation(
            "reference value is zero, relative errors are undefined".into(),
        ));
    }
    let cells: Vec<RateCell> = grid
        .iter()
        .flat_map(|&n| (0..cfg.runs).map(move |run| (n, run)))
        .zip(totals)
        .map(|((n, run), total)| RateCell {
            n,
            run,
            seed: cell_seed(n, run),
            total,
            rel_err: (total - reference).abs() / reference.abs(),
        })
        .collect();
    let summary: Vec<RateSummary> = cells
        .chunks(cfg.runs)
        .map(|block| {
            let k = block.len() as f64;
            let mean_err = block.iter().map(|c| c.rel_err).sum::<f64>() / k;
            let std_err = (block.len() > 1).then(|| {
                (block
                    .iter()
                    .map(|c| (c.rel_err - mean_err).powi(2))
                    .sum::<f64>()
                    / (k - 1.0))
                    .sqrt()
            });
            RateSummary {
                n: block[0].n,
                mean_err,
                std_err,
            }
        })
        .collect();
    let ns: Vec<f64> = summary.iter().map(|s| s.n as f64).collect();
    let errs: Vec<f64> = summary.iter().map(|s| s.mean_err).collect();
    let fit = fit_loglog_slope(&ns, &errs)?;
    Ok(RateReport {
        schema: SCHEMA,
        config: cfg.clone(),
        reference,
        reference_values,
        cells,
        summary,
        fit,
    })
}

/// Configuration of [`run_oracle_compare`]. Samples are uniform on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub kind: CostKind,
    pub eps: f64,
    pub n: usize,
    pub seed: u64,
    pub grid_points: usize,
    pub sinkhorn_tol: f64,
    pub estimator: EstimateOptions,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            kind: CostKind::Quadratic,
            eps: 1.0,
            n: 8,
            seed: 0,
            grid_points: DEFAULT_GRID_POINTS,
            sinkhorn_tol: 1e-9,
            estimator: EstimateOptions::default(),
        }
    }
}

/// Slack of the restricted-sup check.
pub const RESTRICTED_SUP_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub schema: u32,
    pub config: OracleConfig,
    pub ne_total: f64,
    pub ne_a: f64,
    pub oracle_total: f64,
    pub oracle_a: f64,
    /// `|ne_total - oracle_total| / |oracle_total|`, zero when both agree exactly.
    pub rel_gap: f64,
    pub ne_semidual: f64,
    /// Exact entropic OT value at the estimator's matrix.
    pub sinkhorn_value: f64,
    /// `ne_semidual <= sinkhorn_value + 1e-8`.
    pub restricted_sup_ok: bool,
}

pub fn oracle_samples(n: usize, seed: u64) -> Result<(SampleSet, SampleSet)> {
    Ok((
        gen_uniform_cube(1, n, derive_seed(seed, 1))?,
        gen_uniform_cube(1, n, derive_seed(seed, 2))?,
    ))
}

/// Runs the estimator and the grid oracle on one seeded 1-D instance.
pub fn run_oracle_compare(cfg: &OracleConfig) -> Result<OracleReport> {
    let (x, y) = oracle_samples(cfg.n, cfg.seed)?;
    oracle_compare(cfg, &x, &y)
}

/// [`run_oracle_compare`] on given samples.
pub fn oracle_compare(cfg: &OracleConfig, x: &SampleSet, y: &SampleSet) -> Result<OracleReport> {
    let spec = CostSpec::new(cfg.kind, cfg.eps)?;
    let oracle = grid_oracle_1d(&spec, x, y, cfg.grid_points, cfg.sinkhorn_tol)?;
    let opts = EstimateOptions {
        keep_coupling: false,
        ..cfg.estimator.clone()
    };
    let r = estimate(&spec, x, y, &opts)?;
    let spec = spec.with_eps(r.eps)?;
    let (_, sol) = fixed_a_objective(&spec, r.a_star.view(), x, y, cfg.sinkhorn_tol, None)?;
    let diff = (r.total - oracle.value).abs();
    let rel_gap = if diff == 0.0 {
        0.0
    } else {
        diff / oracle.value.abs()
    };
    Ok(OracleReport {
        schema: SCHEMA,
        config: cfg.clone(),
        ne_total: r.total,
        ne_a: r.a_star[[0, 0]],
        oracle_total: oracle.value,
        oracle_a: oracle.a,
        rel_gap,
        ne_semidual: r.semidual,
        sinkhorn_value: sol.value,
        restricted_sup_ok: r.semidual <= sol.value + RESTRICTED_SUP_SLACK,
    })
}

/// Configuration of [`run_invariance`]. The cost is always the inner product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvarianceConfig {
    pub eps: f64,
    pub dx: usize,
    pub dy: usize,
    pub n_grid: Vec<usize>,
    pub runs: usize,
    pub seed: u64,
    /// Use `U = V = I` instead of random rotations.
    pub identity: bool,
    pub estimator: EstimateOptions,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self {
            eps: 1.0,
            dx: 4,
            dy: 4,
            n_grid: vec![64, 128, 256, 512],
            runs: 5,
            seed: 0,
            identity: false,
            estimator: EstimateOptions::default(),
        }
    }
}

impl InvarianceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Validation("runs must be at least 1".into()));
        }
        if self.n_grid.is_empty()
            || self.n_grid[0] == 0
            || self.n_grid.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Validation(format!(
                "n grid must be positive and strictly increasing: {:?}",
                self.n_grid
            )));
        }
        CostSpec::inner(self.eps)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceCell {
    pub n: usize,
    pub run: usize,
    pub original: f64,
    pub rotated: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub schema: u32,
    pub config: InvarianceConfig,
    pub cells: Vec<InvarianceCell>,
    /// `(n, mean gap)` in grid order.
    pub mean_gaps: Vec<(usize, f64)>,
    /// Number of consecutive increases of the mean gap.
    pub inversions: usize,
    /// At most one inversion.
    pub decreasing: bool,
}

/// Compares IEGW estimates on a pair `(X0, X1)` and on an independent pair
/// `(Y0 U^T, Y1 V^T)` from the same laws. The population values agree, so
/// the gap measures estimation error alone.
pub fn run_invariance(cfg: &InvarianceConfig) -> Result<InvarianceReport> {
    cfg.validate()?;
    let spec = CostSpec::inner(cfg.eps)?;
    let law_x = Law::new(Distribution::Gaussian, cfg.dx, derive_seed(cfg.seed, 100))?;
    let law_y = Law::new(Distribution::Gaussian, cfg.dy, derive_seed(cfg.seed, 101))?;
    let (u, v) = if cfg.identity {
        (Array2::eye(cfg.dx), Array2::eye(cfg.dy))
    } else {
        (
            random_orthogonal(cfg.dx, derive_seed(cfg.seed, 102))?,
            random_orthogonal(cfg.dy, derive_seed(cfg.seed, 103))?,
        )
    };
    let cells = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.runs).map(move |run| (n, run)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(n, run)| {
            let seed = derive_seed(derive_seed(cfg.seed, n as u64), run as u64);
            let x0 = law_x.sample(n, derive_seed(seed, 1))?;
            let x1 = law_y.sample(n, derive_seed(seed, 2))?;
            let y0 = law_x.sample(n, derive_seed(seed, 4))?.rotate(&u)?;
            let y1 = law_y.sample(n, derive_seed(seed, 5))?.rotate(&v)?;
            let opts = EstimateOptions {
                seed: derive_seed(seed, 3),
                keep_coupling: false,
                ..cfg.estimator.clone()
            };
            let original = estimate(&spec, &x0, &x1, &opts)?.total;
            let rotated = estimate(&spec, &y0, &y1, &opts)?.total;
            Ok(InvarianceCell {
                n,
                run,
                original,
                rotated,
                gap: (original - rotated).abs(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_gaps: Vec<(usize, f64)> = cells
        .chunks(cfg.runs)
        .map(|b| {
            (
                b[0].n,
                b.iter().map(|c| c.gap).sum::<f64>() / b.len() as f64,
            )
        })
        .collect();
    let inversions = mean_gaps.windows(2).filter(|w| w[1].1 > w[0].1).count();
    Ok(InvarianceReport {
        schema: SCHEMA,
        config: cfg.clone(),
        cells,
        mean_gaps,
        inversions,
        decreasing: inversions <= 1,
    })
}
