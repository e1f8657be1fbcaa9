//! Local objective oracles.
//!
//! Each node `i` owns a smooth function `f_i: R^d -> R`. A [`Problem`] bundles
//! the `N` oracles with their smoothness constants and, when known, the
//! Polyak-Łojasiewicz constant and the optimal value of `f = Σ f_i`.

use std::fmt;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::seeds;

#[derive(Debug, Error, PartialEq)]
pub enum ProblemError {
    #[error("node {0} holds no samples")]
    EmptyNode(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("dataset parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// A smooth local objective `f_i`.
pub trait LocalObjective: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Writes `∇f_i(x)` into `out` (length `dim()`).
    fn gradient_into(&self, x: &[f64], out: &mut [f64]);

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.gradient_into(x, &mut g);
        g
    }

    /// Lipschitz constant `M_i` of the gradient.
    fn smoothness(&self) -> f64;
}

/// `N` local oracles over a shared decision space `R^d`.
#[derive(Debug)]
pub struct Problem {
    kind: String,
    dim: usize,
    objectives: Vec<Box<dyn LocalObjective>>,
    m_bar: f64,
    pl_constant: Option<f64>,
    f_star: Option<f64>,
    minimizer: Option<Vec<f64>>,
}

impl Problem {
    pub fn new(kind: impl Into<String>, objectives: Vec<Box<dyn LocalObjective>>) -> Result<Self, ProblemError> {
        let first = objectives
            .first()
            .ok_or_else(|| ProblemError::InvalidParameter("problem needs at least one node".into()))?;
        let dim = first.dim();
        if let Some(i) = objectives.iter().position(|o| o.dim() != dim) {
            return Err(ProblemError::DimensionMismatch(format!(
                "node {i} has dimension {}, expected {dim}",
                objectives[i].dim()
            )));
        }
        let m_bar = objectives.iter().map(|o| o.smoothness()).fold(0.0, f64::max);
        Ok(Self {
            kind: kind.into(),
            dim,
            objectives,
            m_bar,
            pl_constant: None,
            f_star: None,
            minimizer: None,
        })
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn node_count(&self) -> usize {
        self.objectives.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn objective(&self, i: usize) -> &dyn LocalObjective {
        self.objectives[i].as_ref()
    }

    pub fn smoothness(&self, i: usize) -> f64 {
        self.objectives[i].smoothness()
    }

    /// `M̄ = max_i M_i`.
    pub fn m_bar(&self) -> f64 {
        self.m_bar
    }

    pub fn pl_constant(&self) -> Option<f64> {
        self.pl_constant
    }

    pub fn f_star(&self) -> Option<f64> {
        self.f_star
    }

    pub fn minimizer(&self) -> Option<&[f64]> {
        self.minimizer.as_deref()
    }

    /// `Σ_i ∇f_i(x_i)` stacked: `out[i*d..(i+1)*d] = ∇f_i(x[i*d..(i+1)*d])`.
    pub fn stacked_gradient_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (i, obj) in self.objectives.iter().enumerate() {
            obj.gradient_into(&x[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d]);
        }
    }

    pub fn stacked_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.stacked_gradient_into(x, &mut g);
        g
    }

    /// `f(x) = Σ_i f_i(x)` for a single point `x ∈ R^d`.
    pub fn global_value(&self, x: &[f64]) -> f64 {
        self.objectives.iter().map(|o| o.value(x)).sum()
    }

    /// `∇f(x) = Σ_i ∇f_i(x)`.
    pub fn global_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        let mut g = vec![0.0; self.dim];
        for o in &self.objectives {
            o.gradient_into(x, &mut g);
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        acc
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Labelled samples `(y_is, z_is)` for every node.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    m: usize,
    labels: Vec<f64>,
    features: Vec<f64>,
}

impl Dataset {
    /// `labels` has length `n·m`, `features` length `n·m·d`, both node-major.
    pub fn new(n: usize, d: usize, m: usize, labels: Vec<f64>, features: Vec<f64>) -> Result<Self, ProblemError> {
        if n == 0 || d == 0 {
            return Err(ProblemError::InvalidParameter("dataset needs n > 0 and d > 0".into()));
        }
        if m == 0 {
            return Err(ProblemError::EmptyNode(0));
        }
        if labels.len() != n * m || features.len() != n * m * d {
            return Err(ProblemError::DimensionMismatch(format!(
                "expected {} labels and {} feature values, got {} and {}",
                n * m,
                n * m * d,
                labels.len(),
                features.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
            return Err(ProblemError::InvalidParameter(format!("label {bad} is not ±1")));
        }
        Ok(Self {
            n,
            d,
            m,
            labels,
            features,
        })
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn samples_per_node(&self) -> usize {
        self.m
    }

    pub fn node_labels(&self, i: usize) -> &[f64] {
        &self.labels[i * self.m..(i + 1) * self.m]
    }

    /// Row-major `m × d` feature block of node `i`.
    pub fn node_features(&self, i: usize) -> &[f64] {
        let block = self.m * self.d;
        &self.features[i * block..(i + 1) * block]
    }

    /// Header `N d m`, then one `node label z_1 … z_d` line per sample with
    /// 1-indexed nodes.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.n, self.d, self.m);
        for i in 0..self.n {
            let labels = self.node_labels(i);
            let feats = self.node_features(i);
            for (s_idx, y) in labels.iter().enumerate() {
                let _ = write!(s, "{} {}", i + 1, *y as i64);
                for z in &feats[s_idx * self.d..(s_idx + 1) * self.d] {
                    let _ = write!(s, " {z:e}");
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ProblemError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or(ProblemError::Parse {
            line: 0,
            msg: "missing header".into(),
        })?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|f| f.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| ProblemError::Parse {
                line: hline,
                msg: e.to_string(),
            })?;
        let [n, d, m] = dims[..] else {
            return Err(ProblemError::Parse {
                line: hline,
                msg: "header must be `N d m`".into(),
            });
        };
        let mut labels = vec![0.0; n * m];
        let mut features = vec![0.0; n * m * d];
        let mut counts = vec![0usize; n];
        for (line, l) in lines {
            let perr = |msg: String| ProblemError::Parse { line, msg };
            let fields: Vec<&str> = l.split_whitespace().collect();
            if fields.len() != d + 2 {
                return Err(perr(format!("expected {} fields, got {}", d + 2, fields.len())));
            }
            let node: usize = fields[0].parse().map_err(|e| perr(format!("node: {e}")))?;
            if node == 0 || node > n {
                return Err(perr(format!("node {node} outside 1..={n}")));
            }
            let i = node - 1;
            if counts[i] == m {
                return Err(perr(format!("node {node} has more than {m} samples")));
            }
            let y: f64 = fields[1].parse().map_err(|e| perr(format!("label: {e}")))?;
            let s_idx = counts[i];
            labels[i * m + s_idx] = y;
            for (t, f) in fields[2..].iter().enumerate() {
                features[(i * m + s_idx) * d + t] = f.parse().map_err(|e| perr(format!("feature {}: {e}", t + 1)))?;
            }
            counts[i] += 1;
        }
        if let Some(i) = counts.iter().position(|&c| c != m) {
            return Err(ProblemError::Parse {
                line: 0,
                msg: format!("node {} has {} samples, expected {m}", i + 1, counts[i]),
            });
        }
        Self::new(n, d, m, labels, features)
    }
}

/// Draws standard Gaussian features and labels from a planted linear model,
/// `y = sign(zᵀw* + ξ)` with `w*, ξ` standard Gaussian. Deterministic in `seed`.
pub fn generate_dataset(n: usize, d: usize, m: usize, seed: u64) -> Result<Dataset, ProblemError> {
    if n == 0 || d == 0 || m == 0 {
        return Err(ProblemError::InvalidParameter(format!(
            "dataset dimensions must be positive (N={n}, d={d}, m={m})"
        )));
    }
    let mut rng = seeds::stream(seed, 0);
    let w_star: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut labels = Vec::with_capacity(n * m);
    let mut features = Vec::with_capacity(n * m * d);
    for _ in 0..n * m {
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let noise: f64 = rng.sample(StandardNormal);
        let score: f64 = z.iter().zip(&w_star).map(|(a, b)| a * b).sum::<f64>() + noise;
        labels.push(if score >= 0.0 { 1.0 } else { -1.0 });
        features.extend(z);
    }
    Dataset::new(n, d, m, labels, features)
}

/// Logistic loss with the smooth nonconvex penalty
/// `Σ_t λω x_t² / (1 + ω x_t²)`.
#[derive(Debug, Clone)]
pub struct LogisticObjective {
    d: usize,
    labels: Vec<f64>,
    features: Vec<f64>,
    lambda: f64,
    omega: f64,
    smoothness: f64,
}

impl LogisticObjective {
    pub fn new(d: usize, labels: Vec<f64>, features: Vec<f64>, lambda: f64, omega: f64) -> Self {
        let m = labels.len();
        let sq_norms: f64 = features.iter().map(|z| z * z).sum();
        // logistic Hessian ≼ (1/4m) Σ z zᵀ, penalty curvature bounded by 2λω
        let smoothness = sq_norms / (4.0 * m as f64) + 2.0 * lambda * omega;
        Self {
            d,
            labels,
            features,
            lambda,
            omega,
            smoothness,
        }
    }
}

impl LocalObjective for LogisticObjective {
    fn dim(&self) -> usize {
        self.d
    }

    fn value(&self, x: &[f64]) -> f64 {
        let m = self.labels.len() as f64;
        let loss: f64 = self
            .labels
            .iter()
            .zip(self.features.chunks_exact(self.d))
            .map(|(y, z)| softplus(-y * dot(x, z)))
            .sum::<f64>()
            / m;
        let penalty: f64 = x
            .iter()
            .map(|t| self.lambda * self.omega * t * t / (1.0 + self.omega * t * t))
            .sum();
        loss + penalty
    }

    fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        let m = self.labels.len() as f64;
        out.fill(0.0);
        for (y, z) in self.labels.iter().zip(self.features.chunks_exact(self.d)) {
            let c = -y * sigmoid(-y * dot(x, z)) / m;
            for (o, zt) in out.iter_mut().zip(z) {
                *o += c * zt;
            }
        }
        for (o, t) in out.iter_mut().zip(x) {
            let den = 1.0 + self.omega * t * t;
            *o += 2.0 * self.lambda * self.omega * t / (den * den);
        }
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The nonconvex regularized logistic benchmark, one oracle per node.
pub fn logistic_nonconvex(dataset: &Dataset, lambda: f64, omega: f64) -> Result<Problem, ProblemError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(ProblemError::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
    }
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(ProblemError::InvalidParameter(format!("omega must be > 0, got {omega}")));
    }
    let objectives = (0..dataset.nodes())
        .map(|i| {
            if dataset.node_labels(i).is_empty() {
                return Err(ProblemError::EmptyNode(i));
            }
            Ok(Box::new(LogisticObjective::new(
                dataset.dim(),
                dataset.node_labels(i).to_vec(),
                dataset.node_features(i).to_vec(),
                lambda,
                omega,
            )) as Box<dyn LocalObjective>)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Problem::new("logistic", objectives)
}

/// Least squares `½‖A x − b‖²`.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    a: DMatrix<f64>,
    b: DVector<f64>,
    smoothness: f64,
}

impl QuadraticObjective {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self, ProblemError> {
        if a.nrows() != b.len() {
            return Err(ProblemError::DimensionMismatch(format!(
                "A has {} rows but b has length {}",
                a.nrows(),
                b.len()
            )));
        }
        let ata = a.transpose() * &a;
        let smoothness = SymmetricEigen::new(ata).eigenvalues.iter().copied().fold(0.0, f64::max);
        Ok(Self { a, b, smoothness })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }
}

impl LocalObjective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.a.ncols()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let r = &self.a * DVector::from_column_slice(x) - &self.b;
        0.5 * r.norm_squared()
    }

    fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        let r = &self.a * DVector::from_column_slice(x) - &self.b;
        let g = self.a.tr_mul(&r);
        out.copy_from_slice(g.as_slice());
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }
}

/// Builds a least-squares problem from explicit `(A_i, b_i)` blocks and
/// attaches its P-Ł constant (smallest nonzero eigenvalue of `Σ A_iᵀA_i`),
/// a pseudo-inverse minimizer and the optimal value.
pub fn quadratic_from_parts(parts: Vec<(DMatrix<f64>, DVector<f64>)>) -> Result<Problem, ProblemError> {
    let d = parts
        .first()
        .map(|(a, _)| a.ncols())
        .ok_or_else(|| ProblemError::InvalidParameter("need at least one block".into()))?;
    let mut h = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    let mut objectives: Vec<Box<dyn LocalObjective>> = Vec::with_capacity(parts.len());
    for (a, b) in parts {
        if a.ncols() != d {
            return Err(ProblemError::DimensionMismatch(format!("block has {} columns, expected {d}", a.ncols())));
        }
        h += a.transpose() * &a;
        rhs += a.tr_mul(&b);
        objectives.push(Box::new(QuadraticObjective::new(a, b)?));
    }
    let eig = SymmetricEigen::new(h.clone());
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let tol = 1e-10 * top.max(f64::MIN_POSITIVE);
    let nu = eig
        .eigenvalues
        .iter()
        .copied()
        .filter(|&l| l > tol)
        .fold(f64::INFINITY, f64::min);
    if !nu.is_finite() {
        return Err(ProblemError::InvalidParameter("all blocks are zero".into()));
    }
    // minimum-norm minimizer via the eigen pseudo-inverse
    let mut x_star = DVector::<f64>::zeros(d);
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > tol {
            let v = eig.eigenvectors.column(k);
            x_star += v * (v.dot(&rhs) / l);
        }
    }
    let mut problem = Problem::new("quadratic_pl", objectives)?;
    let f_star = problem.global_value(x_star.as_slice());
    problem.pl_constant = Some(nu);
    problem.f_star = Some(f_star);
    problem.minimizer = Some(x_star.as_slice().to_vec());
    Ok(problem)
}

/// Seeded least-squares instance satisfying the P-Ł condition. With
/// `rank_deficit = r > 0`, an `r`-dimensional subspace shared by all nodes
/// is projected out of every `A_i`, so the global Hessian is singular while
/// P-Ł still holds. Each `A_i` is `3d × d` with `N(0, 1/(3d))` entries, so
/// `A_iᵀA_i` is well conditioned around the identity; every `b_i = A_i x_true`
/// for a common `x_true`.
pub fn quadratic_pl(n: usize, d: usize, rank_deficit: usize, seed: u64) -> Result<Problem, ProblemError> {
    if n == 0 || d == 0 {
        return Err(ProblemError::InvalidParameter("quadratic_pl needs N > 0 and d > 0".into()));
    }
    if rank_deficit >= d {
        return Err(ProblemError::InvalidParameter(format!(
            "rank_deficit must be < d ({rank_deficit} >= {d})"
        )));
    }
    let mut rng = seeds::stream(seed, 1);
    let rows = 3 * d;
    let std = 1.0 / (rows as f64).sqrt();
    let projector = if rank_deficit > 0 {
        let g = DMatrix::<f64>::from_fn(d, rank_deficit, |_, _| rng.sample(StandardNormal));
        let q = g.qr().q();
        Some(DMatrix::<f64>::identity(d, d) - &q * q.transpose())
    } else {
        None
    };
    let x_true = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
    let parts = (0..n)
        .map(|_| {
            let mut a = DMatrix::<f64>::from_fn(rows, d, |_, _| std * rng.sample::<f64, _>(StandardNormal));
            if let Some(p) = &projector {
                a *= p;
            }
            let b = &a * &x_true;
            (a, b)
        })
        .collect();
    quadratic_from_parts(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_dataset() -> Dataset {
        generate_dataset(3, 4, 6, 11).unwrap()
    }

    #[test]
    fn logistic_value_at_origin_is_log_two() {
        let p = logistic_nonconvex(&tiny_dataset(), 0.01, 2.0).unwrap();
        for i in 0..p.node_count() {
            assert_relative_eq!(p.objective(i).value(&[0.0; 4]), std::f64::consts::LN_2, max_relative = 1e-15);
        }
    }

    #[test]
    fn logistic_gradient_at_origin_is_half_mean_signed_feature() {
        let ds = tiny_dataset();
        let p = logistic_nonconvex(&ds, 0.01, 2.0).unwrap();
        for i in 0..ds.nodes() {
            let g = p.objective(i).gradient(&[0.0; 4]);
            let m = ds.samples_per_node() as f64;
            for t in 0..4 {
                let expected: f64 = ds
                    .node_labels(i)
                    .iter()
                    .zip(ds.node_features(i).chunks_exact(4))
                    .map(|(y, z)| -y * z[t])
                    .sum::<f64>()
                    / (2.0 * m);
                assert_relative_eq!(g[t], expected, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn logistic_is_stable_for_huge_margins() {
        let p = logistic_nonconvex(&tiny_dataset(), 0.001, 1.0).unwrap();
        let x = [1e6, -1e6, 1e6, 1e6];
        assert!(p.objective(0).value(&x).is_finite());
        assert!(p.objective(0).gradient(&x).iter().all(|g| g.is_finite()));
    }

    #[test]
    fn logistic_rejects_bad_hyperparameters() {
        assert!(logistic_nonconvex(&tiny_dataset(), -1.0, 1.0).is_err());
        assert!(logistic_nonconvex(&tiny_dataset(), 0.1, 0.0).is_err());
    }

    #[test]
    fn dataset_generation_is_deterministic_with_pm_one_labels() {
        let a = generate_dataset(2, 3, 5, 42).unwrap();
        let b = generate_dataset(2, 3, 5, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_dataset(2, 3, 5, 43).unwrap());
        let single = generate_dataset(1, 2, 1, 0).unwrap();
        assert!(single.node_labels(0)[0] == 1.0 || single.node_labels(0)[0] == -1.0);
        assert!(generate_dataset(0, 1, 1, 0).is_err());
    }

    #[test]
    fn dataset_text_round_trip() {
        let ds = tiny_dataset();
        assert_eq!(Dataset::from_text(&ds.to_text()).unwrap(), ds);
        let err = Dataset::from_text("1 2 1\n1 1 0.5\n").unwrap_err();
        assert!(matches!(err, ProblemError::Parse { line: 2, .. }));
    }

    #[test]
    fn scalar_quadratic() {
        let p = quadratic_from_parts(vec![(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 0.0))]).unwrap();
        assert_relative_eq!(p.pl_constant().unwrap(), 1.0);
        assert_relative_eq!(p.f_star().unwrap(), 0.0);
        assert_relative_eq!(p.objective(0).value(&[3.0]), 4.5);
        assert_relative_eq!(p.m_bar(), 1.0);
    }

    #[test]
    fn quadratic_pl_validates_rank_deficit() {
        assert!(quadratic_pl(2, 3, 3, 0).is_err());
        assert!(quadratic_pl(2, 3, 2, 0).is_ok());
    }

    #[test]
    fn quadratic_pl_optimum_is_zero_and_minimizer_attains_it() {
        let p = quadratic_pl(4, 3, 1, 5).unwrap();
        let x = p.minimizer().unwrap().to_vec();
        assert!(p.f_star().unwrap().abs() < 1e-20);
        let g = p.global_gradient(&x);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }
}
