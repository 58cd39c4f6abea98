//! Point clouds: loading, generation, centering and moment summaries.
//!
//! A [`SampleSet`] is an `n x d` matrix whose rows are i.i.d. draws; the
//! empirical measure it induces puts mass `1/n` on every row.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    points: Array2<f64>,
    label: String,
}

impl SampleSet {
    pub fn new(points: Array2<f64>, label: impl Into<String>) -> Result<Self> {
        let (n, d) = points.dim();
        if n == 0 {
            return Err(Error::Empty);
        }
        if d == 0 {
            return Err(Error::Validation(
                "sample dimension must be at least 1".into(),
            ));
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite coordinate at row {}, column {}",
                pos / d + 1,
                pos % d + 1
            )));
        }
        Ok(Self {
            points: points.as_standard_layout().into_owned(),
            label: label.into(),
        })
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.points.row(i)
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn d(&self) -> usize {
        self.points.ncols()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn column_means(&self) -> Array1<f64> {
        self.points.mean_axis(Axis(0)).expect("n >= 1")
    }

    /// Subtracts the column mean from every row.
    pub fn center(&self) -> SampleSet {
        let mean = self.column_means();
        SampleSet {
            points: &self.points - &mean,
            label: self.label.clone(),
        }
    }

    pub fn moments(&self) -> MomentSummary {
        let n = self.n() as f64;
        let mut m2 = 0.0;
        let mut m4 = 0.0;
        for row in self.points.rows() {
            let sq = row.dot(&row);
            m2 += sq;
            m4 += sq * sq;
        }
        let gram = self.points.t().dot(&self.points) / n;
        MomentSummary {
            m2: m2 / n,
            m4: m4 / n,
            gram,
        }
    }

    /// Maps every row `x` to `q x`.
    pub fn rotate(&self, q: &Array2<f64>) -> Result<SampleSet> {
        if q.dim() != (self.d(), self.d()) {
            return Err(Error::Dimension(format!(
                "rotation is {:?}, samples have dimension {}",
                q.dim(),
                self.d()
            )));
        }
        SampleSet::new(self.points.dot(&q.t()), format!("{} (rotated)", self.label))
    }

    /// Rows selected by `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> SampleSet {
        SampleSet {
            points: self.points.select(Axis(0), idx),
            label: self.label.clone(),
        }
    }
}

/// Moments of the empirical measure of a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    /// Mean squared norm.
    pub m2: f64,
    /// Mean fourth power of the norm.
    pub m4: f64,
    /// `(1/n) sum_i x_i x_i^T`.
    pub gram: Array2<f64>,
}

/// Reads comma-separated points, one per row.
pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<SampleSet> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    parse_csv(file, has_header, path.display().to_string())
}

pub fn parse_csv<R: Read>(
    reader: R,
    has_header: bool,
    label: impl Into<String>,
) -> Result<SampleSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse {
                    row,
                    msg: format!("expected {w} fields, found {}", record.len()),
                })
            }
            _ => {}
        }
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row,
                msg: format!("cannot parse {field:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite value {field:?} at row {row}"
                )));
            }
            data.push(v);
        }
        rows += 1;
    }
    let Some(d) = width else {
        return Err(Error::Empty);
    };
    let points =
        Array2::from_shape_vec((rows, d), data).map_err(|e| Error::Validation(e.to_string()))?;
    SampleSet::new(points, label)
}

/// Writes points with shortest round-trip float formatting.
pub fn write_csv<W: Write>(s: &SampleSet, mut out: W) -> Result<()> {
    for row in s.points.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn save_csv(s: &SampleSet, path: impl AsRef<Path>) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(s, file)
}

fn check_shape(d: usize, n: usize) -> Result<()> {
    if d == 0 || n == 0 {
        return Err(Error::Validation(format!(
            "need d >= 1 and n >= 1, got d={d}, n={n}"
        )));
    }
    Ok(())
}

/// I.i.d. rows uniform on `[-1/sqrt(d), 1/sqrt(d)]^d`.
pub fn gen_uniform_cube(d: usize, n: usize, seed: u64) -> Result<SampleSet> {
    check_shape(d, n)?;
    let half = 1.0 / (d as f64).sqrt();
    let dist = Uniform::new_inclusive(-half, half).map_err(|e| Error::Validation(e.to_string()))?;
    let mut r = rng::seeded(seed);
    let points = Array2::from_shape_simple_fn((n, d), || dist.sample(&mut r));
    SampleSet::new(points, format!("uniform-cube d={d} n={n} seed={seed}"))
}

/// Centered Gaussian law with a fixed covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    cov: Array2<f64>,
    chol: Array2<f64>,
}

impl GaussianLaw {
    pub fn new(cov: Array2<f64>) -> Result<Self> {
        let chol = cholesky(&cov)?;
        Ok(Self { cov, chol })
    }

    /// Covariance `B^T B + I/(3d)` with the entries of `B` uniform on `[-1/d, 1/d]`.
    pub fn random_cov(d: usize, seed: u64) -> Result<Self> {
        check_shape(d, 1)?;
        let mut r = rng::seeded(seed);
        Self::new(random_covariance(d, &mut r))
    }

    pub fn covariance(&self) -> &Array2<f64> {
        &self.cov
    }

    pub fn d(&self) -> usize {
        self.cov.nrows()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<SampleSet> {
        check_shape(self.d(), n)?;
        let mut r = rng::seeded(seed);
        Ok(self.sample_with(n, &mut r))
    }

    fn sample_with(&self, n: usize, r: &mut rng::Rng) -> SampleSet {
        let d = self.d();
        let z = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(r));
        SampleSet {
            points: z.dot(&self.chol.t()),
            label: format!("gaussian d={d} n={n}"),
        }
    }
}

fn random_covariance(d: usize, r: &mut rng::Rng) -> Array2<f64> {
    let w = 1.0 / d as f64;
    let b = Array2::from_shape_simple_fn((d, d), || r.random_range(-w..=w));
    let mut cov = b.t().dot(&b);
    for i in 0..d {
        cov[[i, i]] += 1.0 / (3.0 * d as f64);
    }
    cov
}

/// Draws a random covariance and then `n` rows from the corresponding
/// centered Gaussian, all from one seeded stream.
pub fn gen_gaussian_random_cov(d: usize, n: usize, seed: u64) -> Result<SampleSet> {
    check_shape(d, n)?;
    let mut r = rng::seeded(seed);
    let law = GaussianLaw::new(random_covariance(d, &mut r))?;
    Ok(law
        .sample_with(n, &mut r)
        .with_label(format!("gaussian-random-cov d={d} n={n} seed={seed}")))
}

/// Lower-triangular `L` with `L L^T = a`.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::Dimension(format!(
            "cholesky of non-square {:?}",
            a.dim()
        )));
    }
    let mut l = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            if i == j {
                let v = a[[i, i]] - s;
                if v <= 0.0 || !v.is_finite() {
                    return Err(Error::Validation(
                        "covariance is not positive definite".into(),
                    ));
                }
                l[[i, j]] = v.sqrt();
            } else {
                l[[i, j]] = (a[[i, j]] - s) / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Orthogonal matrix from modified Gram-Schmidt on a seeded Gaussian matrix.
pub fn random_orthogonal(d: usize, seed: u64) -> Result<Array2<f64>> {
    check_shape(d, 1)?;
    let mut r = rng::seeded(seed);
    loop {
        let g: Array2<f64> = Array2::from_shape_simple_fn((d, d), || StandardNormal.sample(&mut r));
        if let Some(q) = gram_schmidt(g) {
            return Ok(q);
        }
    }
}

fn gram_schmidt(mut m: Array2<f64>) -> Option<Array2<f64>> {
    let d = m.ncols();
    for j in 0..d {
        for _pass in 0..2 {
            for p in 0..j {
                let proj = m.column(p).dot(&m.column(j));
                let qp = m.column(p).to_owned();
                m.column_mut(j).scaled_add(-proj, &qp);
            }
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        if norm < 1e-8 {
            return None;
        }
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
    Some(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn parses_rows_in_order() {
        let s = parse_csv("0,0\n1,1".as_bytes(), false, "t").unwrap();
        assert_eq!(s.points(), array![[0.0, 0.0], [1.0, 1.0]]);
    }

    #[test]
    fn header_is_skipped() {
        let s = parse_csv("a,b\n1.5,2\n".as_bytes(), true, "t").unwrap();
        assert_eq!((s.n(), s.d()), (1, 2));
        assert_eq!(s.row(0)[0], 1.5);
    }

    #[test]
    fn empty_file_has_no_rows() {
        let err = parse_csv("".as_bytes(), false, "t").unwrap_err();
        assert_eq!(err.to_string(), "no rows");
    }

    #[test]
    fn bad_field_names_its_row() {
        match parse_csv("1,abc".as_bytes(), false, "t") {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_csv("1,2\n3\n".as_bytes(), false, "t") {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(matches!(
            parse_csv("1,inf".as_bytes(), false, "t"),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            parse_csv("NaN".as_bytes(), false, "t"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let s = gen_gaussian_random_cov(3, 20, 5).unwrap();
        let mut buf = Vec::new();
        write_csv(&s, &mut buf).unwrap();
        let back = parse_csv(buf.as_slice(), false, s.label()).unwrap();
        assert_eq!(back.points(), s.points());
    }

    #[test]
    fn uniform_cube_is_seeded_and_bounded() {
        let a = gen_uniform_cube(1, 3, 7).unwrap();
        let b = gen_uniform_cube(1, 3, 7).unwrap();
        assert_eq!(a.points(), b.points());
        let c = gen_uniform_cube(4, 10_000, 1).unwrap();
        assert!(c.points().iter().all(|v| (-0.5..=0.5).contains(v)));
    }

    #[test]
    fn uniform_cube_second_moment() {
        // Each coordinate of Unif[-a, a] has variance a^2/3 = 1/(3d); summed over d.
        let s = gen_uniform_cube(2, 100_000, 11).unwrap();
        let m2 = s.moments().m2;
        assert!((m2 - 1.0 / 3.0).abs() < 0.01 / 3.0, "m2 = {m2}");
    }

    #[test]
    fn random_covariance_is_positive_definite() {
        for d in [1, 2, 5, 8] {
            let law = GaussianLaw::random_cov(d, 3).unwrap();
            let cov = law.covariance();
            assert_eq!(cov, &cov.t().to_owned());
            // Smallest eigenvalue bound: x^T cov x >= |x|^2/(3d) on random directions.
            let mut r = rng::seeded(1);
            for _ in 0..20 {
                let x: Array1<f64> =
                    Array1::from_shape_simple_fn(d, || StandardNormal.sample(&mut r));
                let q = x.dot(&cov.dot(&x));
                assert!(q >= x.dot(&x) / (3.0 * d as f64) - 1e-12);
            }
        }
    }

    #[test]
    fn one_dimensional_gaussian_variance() {
        let seed = 21;
        let mut r = rng::seeded(seed);
        let b: f64 = r.random_range(-1.0..=1.0);
        let s = gen_gaussian_random_cov(1, 100_000, seed).unwrap();
        let mean = s.column_means()[0];
        let var = s.points().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.n() as f64;
        let target = b * b + 1.0 / 3.0;
        assert!(
            (var - target).abs() < 0.03 * target,
            "var {var} vs {target}"
        );
        assert_eq!(
            s.points(),
            gen_gaussian_random_cov(1, 100_000, seed).unwrap().points()
        );
    }

    #[test]
    fn centering() {
        let s = SampleSet::new(array![[0.0, 0.0], [2.0, 2.0]], "t").unwrap();
        assert_eq!(s.center().points(), array![[-1.0, -1.0], [1.0, 1.0]]);
        let one = SampleSet::new(array![[5.0]], "t").unwrap();
        assert_eq!(one.center().points(), array![[0.0]]);
        let g = gen_gaussian_random_cov(3, 50, 2).unwrap().center();
        let again = g.center();
        for (a, b) in g.points().iter().zip(again.points().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn moment_examples() {
        let s = SampleSet::new(array![[1.0], [-1.0]], "t").unwrap();
        let m = s.moments();
        assert_eq!((m.m2, m.m4), (1.0, 1.0));
        let z = SampleSet::new(array![[0.0, 0.0]], "t").unwrap().moments();
        assert_eq!((z.m2, z.m4), (0.0, 0.0));
        let h = SampleSet::new(array![[1.0, 1.0], [0.0, 0.0]], "t")
            .unwrap()
            .moments();
        assert_eq!((h.m2, h.m4), (1.0, 2.0));
        assert_eq!(h.gram, array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn orthogonal_matrices() {
        let q1 = random_orthogonal(1, 4).unwrap();
        assert!(q1[[0, 0]] == 1.0 || q1[[0, 0]] == -1.0);
        for (d, seed) in [(2, 1), (5, 2), (16, 3)] {
            let q = random_orthogonal(d, seed).unwrap();
            let e = q.t().dot(&q) - Array2::<f64>::eye(d);
            let fro = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(fro <= 1e-10, "d={d}: {fro}");
            let s = gen_gaussian_random_cov(d, 30, seed).unwrap();
            let r = s.rotate(&q).unwrap();
            for i in 0..s.n() {
                let a = s.row(i).dot(&s.row(i)).sqrt();
                let b = r.row(i).dot(&r.row(i)).sqrt();
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }
}
