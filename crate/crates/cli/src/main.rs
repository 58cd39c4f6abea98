use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use negw::egw::export_plan;
use negw::experiment::{
    oracle_compare, run_invariance, run_oracle_compare, run_rate, Distribution, InvarianceConfig,
    OracleConfig, RateConfig, RateReport,
};
use negw::samples::{gen_gaussian_random_cov, gen_uniform_cube, load_csv, save_csv, GaussianLaw};
use negw::{estimate, CostKind, CostSpec, Error, EstimateOptions, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Neural estimation of entropic Gromov-Wasserstein costs.
#[derive(Parser)]
#[command(name = "negw", version)]
struct Cli {
    /// Base seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "EGW_THREADS")]
    threads: Option<usize>,
    /// Omit wall-clock fields so repeated runs give identical output.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Directory for report files.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// JSON file with the command's configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sample file.
    Gen(GenArgs),
    /// Estimate the cost between two sample files.
    Estimate(EstimateArgs),
    /// Relative error versus sample size and its log-log slope.
    Rate(RateArgs),
    /// Compare the estimator with the 1-D grid oracle.
    OracleCompare(OracleArgs),
    /// Estimates on original versus rotated Gaussian data.
    Invariance(InvarianceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GenDist {
    UniformCube,
    /// Random covariance.
    Gaussian,
    /// Covariance `var * I`.
    GaussianIso,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    dist: GenDist,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    d: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Variance of `gaussian-iso`.
    #[arg(long, default_value_t = 1.0)]
    var: f64,
    /// Output CSV; a metadata JSON is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Quadratic,
    Inner,
}

impl From<KindArg> for CostKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Quadratic => CostKind::Quadratic,
            KindArg::Inner => CostKind::InnerProduct,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    UniformCube,
    Gaussian,
}

impl From<DistArg> for Distribution {
    fn from(d: DistArg) -> Self {
        match d {
            DistArg::UniformCube => Distribution::UniformCube,
            DistArg::Gaussian => Distribution::Gaussian,
        }
    }
}

/// Estimator settings shared by all commands that run it.
#[derive(Args, Default)]
struct TrainArgs {
    /// Hidden neurons.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size; 0 means full batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    max_outer: Option<usize>,
    #[arg(long)]
    grad_tol: Option<f64>,
    /// Entry value of the initial matrix.
    #[arg(long)]
    init_fill: Option<f64>,
    #[arg(long)]
    final_epochs: Option<usize>,
    /// Project the network onto the class with this bound after each step.
    #[arg(long)]
    bound_a: Option<f64>,
    /// Double eps after numerical failures.
    #[arg(long)]
    auto_eps: bool,
}

impl TrainArgs {
    fn apply(&self, o: &mut EstimateOptions) {
        if let Some(v) = self.k {
            o.k_neurons = v;
        }
        if let Some(v) = self.epochs {
            o.plan.epochs = v;
        }
        if let Some(v) = self.batch_size {
            o.plan.batch_size = v;
        }
        if let Some(v) = self.rate {
            o.plan.rate = v;
        }
        if let Some(v) = self.max_outer {
            o.max_outer = v;
        }
        if let Some(v) = self.grad_tol {
            o.grad_tol = v;
        }
        if let Some(v) = self.init_fill {
            o.init_fill = v;
        }
        if let Some(v) = self.final_epochs {
            o.final_epochs = Some(v);
        }
        if let Some(v) = self.bound_a {
            o.bound_a = Some(v);
            o.plan.projection = true;
        }
        if self.auto_eps {
            o.auto_eps = true;
        }
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    /// Input files start with a header row.
    #[arg(long)]
    header: bool,
    /// Cost (default quadratic).
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// Entropic regularization (default 1).
    #[arg(long)]
    eps: Option<f64>,
    #[command(flatten)]
    train: TrainArgs,
    /// Write the learned coupling as CSV (plus a JSON sidecar).
    #[arg(long)]
    plan_out: Option<PathBuf>,
    /// Write the outer-loop trace as CSV.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

/// Flat configuration document accepted by `estimate --config`.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateConfig {
    kind: Option<CostKind>,
    eps: Option<f64>,
    k_neurons: Option<usize>,
    epochs: Option<usize>,
    batch: Option<usize>,
    rate: Option<f64>,
    max_outer: Option<usize>,
    grad_tol: Option<f64>,
    seed: Option<u64>,
    projection: Option<bool>,
    auto_eps: Option<bool>,
    bound_a: Option<f64>,
    init_fill: Option<f64>,
    final_epochs: Option<usize>,
}

impl EstimateConfig {
    fn options(&self) -> EstimateOptions {
        let mut o = EstimateOptions::default();
        let d = &mut o;
        set(&mut d.k_neurons, self.k_neurons);
        set(&mut d.plan.epochs, self.epochs);
        set(&mut d.plan.batch_size, self.batch);
        set(&mut d.plan.rate, self.rate);
        set(&mut d.max_outer, self.max_outer);
        set(&mut d.grad_tol, self.grad_tol);
        set(&mut d.seed, self.seed);
        set(&mut d.plan.projection, self.projection);
        set(&mut d.auto_eps, self.auto_eps);
        set(&mut d.init_fill, self.init_fill);
        if self.bound_a.is_some() {
            d.bound_a = self.bound_a;
        }
        if self.final_epochs.is_some() {
            d.final_epochs = self.final_epochs;
        }
        o
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[derive(Args)]
struct RateArgs {
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, value_enum)]
    dist: Option<DistArg>,
    /// Dimension of both samples.
    #[arg(long)]
    d: Option<usize>,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    reference_runs: Option<usize>,
    /// Skip estimation and inject errors `c n^{-1/2}`.
    #[arg(long)]
    stub: Option<f64>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    grid_points: Option<usize>,
    /// Use these 1-D samples instead of generated ones.
    #[arg(long, requires = "y")]
    x: Option<PathBuf>,
    #[arg(long, requires = "x")]
    y: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct InvarianceArgs {
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long)]
    runs: Option<usize>,
    /// Use identity rotations.
    #[arg(long)]
    identity: bool,
    #[command(flatten)]
    train: TrainArgs,
}

/// Failure with a machine-readable tag.
struct Failure {
    kind: String,
    message: String,
    code: u8,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            kind: e.kind().into(),
            message: e.to_string(),
            code: 1,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

type CmdResult = std::result::Result<Value, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            return fail(Failure {
                kind: "threads".into(),
                message: e.to_string(),
                code: 1,
            });
        }
    }
    let start = Instant::now();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(&cli, a),
        Command::Estimate(a) => cmd_estimate(&cli, a),
        Command::Rate(a) => cmd_rate(&cli, a),
        Command::OracleCompare(a) => cmd_oracle_compare(&cli, a),
        Command::Invariance(a) => cmd_invariance(&cli, a),
    };
    match result {
        Ok(mut report) => {
            if !cli.deterministic {
                if let Value::Object(m) = &mut report {
                    m.insert(
                        "elapsed_seconds".into(),
                        json!(start.elapsed().as_secs_f64()),
                    );
                }
            }
            match serde_json::to_string_pretty(&report) {
                Ok(s) => {
                    // A closed pipe (e.g. `| head`) is not an error worth reporting.
                    let _ = writeln!(std::io::stdout().lock(), "{s}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e.into()),
            }
        }
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    let body = json!({ "schema": 1, "status": "error", "kind": f.kind, "message": f.message });
    eprintln!("{body}");
    ExitCode::from(f.code)
}

fn load_config<T: DeserializeOwned + Default>(cli: &Cli) -> Result<T> {
    match &cli.config {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, v: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(dir.join(name), s)?;
    Ok(())
}

fn cmd_gen(cli: &Cli, a: &GenArgs) -> CmdResult {
    let seed = cli.seed.unwrap_or(0);
    let (d, n) = (a.d as usize, a.n as usize);
    let (samples, dist) = match a.dist {
        GenDist::UniformCube => (gen_uniform_cube(d, n, seed)?, "uniform-cube"),
        GenDist::Gaussian => (gen_gaussian_random_cov(d, n, seed)?, "gaussian"),
        GenDist::GaussianIso => {
            if !(a.var > 0.0 && a.var.is_finite()) {
                return Err(
                    Error::Validation(format!("variance must be positive, got {}", a.var)).into(),
                );
            }
            let cov = Array2::eye(d) * a.var;
            (GaussianLaw::new(cov)?.sample(n, seed)?, "gaussian-iso")
        }
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_csv(&samples, &a.out)?;
    let mut meta = json!({
        "schema": 1,
        "dist": dist,
        "d": d,
        "n": n,
        "seed": seed,
        "file": a.out.file_name().map(|f| f.to_string_lossy().into_owned()),
    });
    if matches!(a.dist, GenDist::GaussianIso) {
        meta["var"] = json!(a.var);
    }
    let mut s = serde_json::to_string_pretty(&meta)?;
    s.push('\n');
    fs::write(a.out.with_extension("json"), s)?;
    Ok(meta)
}

fn cmd_estimate(cli: &Cli, a: &EstimateArgs) -> CmdResult {
    let doc: EstimateConfig = load_config(cli)?;
    let mut opts = doc.options();
    if let Some(s) = cli.seed {
        opts.seed = s;
    }
    a.train.apply(&mut opts);
    opts.keep_coupling = a.plan_out.is_some();
    let x = load_csv(&a.x, a.header)?;
    let y = load_csv(&a.y, a.header)?;
    let kind = a
        .kind
        .map(CostKind::from)
        .or(doc.kind)
        .unwrap_or(CostKind::Quadratic);
    let spec = CostSpec::new(kind, a.eps.or(doc.eps).unwrap_or(1.0))?;
    let r = estimate(&spec, &x, &y, &opts)?;
    if let Some(p) = &a.plan_out {
        export_plan(&r, p)?;
    }
    if let Some(p) = &a.trace_out {
        let mut t = String::from("iteration,objective,grad_norm\n");
        for rec in &r.trace {
            t.push_str(&format!("{},{},{}\n", rec.k, rec.objective, rec.grad_norm));
        }
        fs::write(p, t)?;
    }
    let mut v = serde_json::to_value(&r)?;
    v["options"] = serde_json::to_value(&opts)?;
    if let Some(dir) = &cli.out_dir {
        write_json(dir, "estimate.json", &v)?;
    }
    Ok(v)
}

fn cmd_rate(cli: &Cli, a: &RateArgs) -> CmdResult {
    let mut cfg: RateConfig = load_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(k) = a.kind {
        cfg.kind = k.into();
    }
    if let Some(e) = a.eps {
        cfg.eps = e;
    }
    if let Some(d) = a.dist {
        cfg.dist = d.into();
    }
    if let Some(d) = a.d {
        cfg.dx = d;
        cfg.dy = d;
    }
    if let Some(g) = &a.n_grid {
        cfg.n_grid = g.clone();
    }
    if let Some(r) = a.runs {
        cfg.runs = r;
    }
    if let Some(r) = a.reference_runs {
        cfg.reference_runs = r;
    }
    if a.stub.is_some() {
        cfg.stub_constant = a.stub;
    }
    a.train.apply(&mut cfg.estimator);
    let report = run_rate(&cfg)?;
    if let Some(dir) = &cli.out_dir {
        write_json(dir, "rate.json", &report)?;
        fs::write(dir.join("rate_cells.csv"), cells_csv(&report))?;
        fs::write(dir.join("rate_summary.csv"), summary_csv(&report))?;
    }
    Ok(serde_json::to_value(&report)?)
}

fn cells_csv(r: &RateReport) -> String {
    let mut s = String::from("n,run,seed,total,rel_err\n");
    for c in &r.cells {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            c.n, c.run, c.seed, c.total, c.rel_err
        ));
    }
    s
}

fn summary_csv(r: &RateReport) -> String {
    let spread = r.config.runs > 1;
    let mut s = String::from(if spread {
        "n,mean_err,std_err\n"
    } else {
        "n,mean_err\n"
    });
    for row in &r.summary {
        match row.std_err {
            Some(sd) if spread => s.push_str(&format!("{},{},{}\n", row.n, row.mean_err, sd)),
            _ => s.push_str(&format!("{},{}\n", row.n, row.mean_err)),
        }
    }
    s
}

fn cmd_oracle_compare(cli: &Cli, a: &OracleArgs) -> CmdResult {
    let mut cfg: OracleConfig = load_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.estimator.seed = s;
    }
    if let Some(k) = a.kind {
        cfg.kind = k.into();
    }
    if let Some(e) = a.eps {
        cfg.eps = e;
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(g) = a.grid_points {
        cfg.grid_points = g;
    }
    a.train.apply(&mut cfg.estimator);
    let report = match (&a.x, &a.y) {
        (Some(px), Some(py)) => {
            let x = load_csv(px, false)?;
            let y = load_csv(py, false)?;
            cfg.n = x.n();
            oracle_compare(&cfg, &x, &y)?
        }
        _ => run_oracle_compare(&cfg)?,
    };
    if let Some(dir) = &cli.out_dir {
        write_json(dir, "oracle_compare.json", &report)?;
    }
    if !report.restricted_sup_ok {
        return Err(Failure {
            kind: "restricted_sup".into(),
            message: format!(
                "neural semi-dual {} exceeds the entropic OT value {} at the same matrix",
                report.ne_semidual, report.sinkhorn_value
            ),
            code: 3,
        });
    }
    Ok(serde_json::to_value(&report)?)
}

fn cmd_invariance(cli: &Cli, a: &InvarianceArgs) -> CmdResult {
    let mut cfg: InvarianceConfig = load_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.eps {
        cfg.eps = e;
    }
    if let Some(d) = a.d {
        cfg.dx = d;
        cfg.dy = d;
    }
    if let Some(g) = &a.n_grid {
        cfg.n_grid = g.clone();
    }
    if let Some(r) = a.runs {
        cfg.runs = r;
    }
    if a.identity {
        cfg.identity = true;
    }
    a.train.apply(&mut cfg.estimator);
    let report = run_invariance(&cfg)?;
    if let Some(dir) = &cli.out_dir {
        write_json(dir, "invariance.json", &report)?;
    }
    Ok(serde_json::to_value(&report)?)
}
