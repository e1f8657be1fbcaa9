//! Analysis-side quantities: optimality gap, Lyapunov function, traces and
//! rate fits.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::algorithm::{average_into, DerivedConstants};
use crate::graph::Network;
use crate::problems::Problem;

/// Largest `N·d` for which dense Lyapunov analysis is allowed.
pub const DENSE_LIMIT: usize = 4096;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("dense analysis limited to N*d <= {DENSE_LIMIT}, got {0}")]
    TooLarge(usize),
    #[error("rate fit needs at least {needed} points after burn-in, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("linear rate fit needs a known optimal value")]
    MissingOptimum,
}

/// Terms of `Ŵ = ‖x − 1⊗x̄‖² + (1/N)‖Σ_i g_i‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapTerms {
    pub w_hat: f64,
    pub consensus: f64,
    pub stationarity: f64,
}

/// Optimality gap of stacked iterate `x` with stacked local gradients.
pub fn optimality_gap(x: &[f64], gradients: &[f64], d: usize) -> GapTerms {
    let n = x.len() / d;
    let mut xbar = vec![0.0; d];
    average_into(x, d, &mut xbar);
    let consensus: f64 = x
        .chunks_exact(d)
        .flat_map(|b| b.iter().zip(&xbar).map(|(v, m)| (v - m) * (v - m)))
        .sum();
    let mut gsum = vec![0.0; d];
    for block in gradients.chunks_exact(d) {
        for (s, g) in gsum.iter_mut().zip(block) {
            *s += g;
        }
    }
    let stationarity = gsum.iter().map(|g| g * g).sum::<f64>() / n as f64;
    GapTerms {
        w_hat: consensus + stationarity,
        consensus,
        stationarity,
    }
}

/// Dense `N × N` factors of the Lyapunov quadratic forms; every `Nd × Nd`
/// operator is `A ⊗ I_d` and is applied blockwise.
#[derive(Debug, Clone)]
pub struct DenseAnalyzer {
    n: usize,
    d: usize,
    theta: f64,
    k: DMatrix<f64>,
    /// `(θG + GQ/ρ)K`.
    s_form: DMatrix<f64>,
    zeta3: f64,
    zeta4: f64,
}

/// Pieces of `V` at one iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovParts {
    /// `V` without the `−f*` shift.
    pub unshifted: f64,
    /// `‖x‖²_K + ‖s‖²_K`.
    pub k_norms: f64,
    /// `f(x̄)`.
    pub objective: f64,
}

impl DenseAnalyzer {
    pub fn new(network: &Network, d: usize, c: &DerivedConstants) -> Result<Self, DiagnosticsError> {
        let n = network.node_count();
        if n * d > DENSE_LIMIT {
            return Err(DiagnosticsError::TooLarge(n * d));
        }
        let p = network.p().clone();
        let k = DMatrix::<f64>::identity(n, n) - DMatrix::<f64>::from_element(n, n, 1.0 / n as f64);
        let g = DMatrix::<f64>::identity(n, n) * c.alpha - &p * c.beta;
        let eig = SymmetricEigen::new(p);
        let mut q = DMatrix::<f64>::zeros(n, n);
        for (i, &l) in eig.eigenvalues.iter().enumerate() {
            if l > 1e-10 {
                let v = eig.eigenvectors.column(i);
                q += v * v.transpose() / l;
            }
        }
        let s_form = (&g * c.theta + &g * &q / c.rho) * &k;
        Ok(Self {
            n,
            d,
            theta: c.theta,
            k,
            s_form,
            zeta3: c.zeta[2],
            zeta4: c.zeta[3],
        })
    }

    fn apply(&self, a: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; v.len()];
        for i in 0..self.n {
            for j in 0..self.n {
                let aij = a[(i, j)];
                if aij != 0.0 {
                    for t in 0..d {
                        out[i * d + t] += aij * v[j * d + t];
                    }
                }
            }
        }
        out
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn parts(&self, problem: &Problem, x: &[f64], q: &[f64]) -> LyapunovParts {
        let d = self.d;
        let mut xbar = vec![0.0; d];
        average_into(x, d, &mut xbar);
        // s = q + ∇f̃(1 ⊗ x̄)
        let consensus_point: Vec<f64> = xbar.iter().copied().cycle().take(x.len()).collect();
        let ga = problem.stacked_gradient(&consensus_point);
        let s: Vec<f64> = q.iter().zip(&ga).map(|(a, b)| a + b).collect();
        let kx = self.apply(&self.k, x);
        let ks = self.apply(&self.k, &s);
        let ms = self.apply(&self.s_form, &s);
        let x_k = Self::dot(x, &kx);
        let s_k = Self::dot(&s, &ks);
        let objective = problem.global_value(&xbar);
        let unshifted = 0.5 * x_k + 0.5 * Self::dot(&s, &ms) + 0.5 * self.theta * Self::dot(x, &ks) + objective;
        LyapunovParts {
            unshifted,
            k_norms: x_k + s_k,
            objective,
        }
    }

    pub fn lyapunov_unshifted(&self, problem: &Problem, x: &[f64], q: &[f64]) -> f64 {
        self.parts(problem, x, q).unshifted
    }

    /// `V = ½‖x‖²_K + ½‖s‖²_{(θG+GQ/ρ)K} + ⟨x, ½θKs⟩ + f(x̄) − f*`.
    pub fn lyapunov(&self, problem: &Problem, x: &[f64], q: &[f64], f_star: f64) -> f64 {
        self.lyapunov_unshifted(problem, x, q) - f_star
    }

    /// `(ζ₃ V̂ + f(x̄) − f*, V, ζ₄ V̂ + f(x̄) − f*)` with `V̂ = ‖x‖²_K + ‖s‖²_K`.
    pub fn sandwich(&self, problem: &Problem, x: &[f64], q: &[f64], f_star: f64) -> (f64, f64, f64) {
        let p = self.parts(problem, x, q);
        let gap = p.objective - f_star;
        (self.zeta3 * p.k_norms + gap, p.unshifted - f_star, self.zeta4 * p.k_norms + gap)
    }
}

/// One recorded iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: u64,
    pub w_hat: f64,
    pub consensus: f64,
    pub stationarity: f64,
    /// `f(x̄^k)`.
    pub objective: f64,
    pub lyapunov: Option<f64>,
    /// `V^{k+1} − V^k − (D₁‖w^k‖² + D₂‖e^k‖²)`.
    pub descent_residual: Option<f64>,
    /// `‖w^k‖²`, the noise injected in the step leaving iteration `k`.
    pub noise_w_sq: Option<f64>,
    pub noise_e_sq: Option<f64>,
}

/// Metrics of one run plus its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    pub f_star: Option<f64>,
    /// The Lyapunov column uses the best observed objective in place of `f*`.
    pub lyapunov_surrogate: bool,
    pub metadata: Vec<(String, String)>,
}

/// CSV column order.
pub const TRACE_COLUMNS: [&str; 9] = [
    "k",
    "w_hat",
    "consensus",
    "stationarity",
    "objective",
    "lyapunov",
    "descent_residual",
    "noise_w_sq",
    "noise_e_sq",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl Trace {
    pub fn push_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.push((key.into(), value.into()));
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// `#`-prefixed `key = value` header lines, then the column header and one
    /// row per recorded iteration. Absent values are empty fields.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "# {k} = {v}");
        }
        if let Some(fs) = self.f_star {
            let _ = writeln!(s, "# f_star = {fs:e}");
        }
        let mut cols = TRACE_COLUMNS.to_vec();
        if self.lyapunov_surrogate {
            cols[5] = "V_surrogate";
        }
        s.push_str(&cols.join(","));
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{},{},{},{}",
                r.k,
                r.w_hat,
                r.consensus,
                r.stationarity,
                r.objective,
                opt(r.lyapunov),
                opt(r.descent_residual),
                opt(r.noise_w_sq),
                opt(r.noise_e_sq)
            );
        }
        s
    }
}

/// Which convergence rate to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateMode {
    /// `log(Σ_{t≤k} Ŵ^t / (k+1))` against `log k`.
    Sublinear,
    /// `log(‖x − x̄‖² + f(x̄) − f*)` against `k`.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Rows with `k` below this are ignored.
    pub burn_in: u64,
    /// Rows with `k` above this are ignored.
    pub until: u64,
    /// The fit stops at the first metric value at or below this floor.
    pub floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            burn_in: 0,
            until: u64::MAX,
            floor: 1e-300,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
    pub first_k: u64,
    pub last_k: u64,
}

impl RateFit {
    pub fn to_text(&self) -> String {
        format!(
            "slope = {:e}\nintercept = {:e}\nr_squared = {:e}\npoints = {}\nk_range = [{}, {}]\n",
            self.slope, self.intercept, self.r_squared, self.points, self.first_k, self.last_k
        )
    }
}

/// Minimum number of fitted points.
pub const MIN_FIT_POINTS: usize = 50;

/// Ordinary least squares of `ys` on `xs`: `(slope, intercept, R²)`.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Fits the requested rate to a trace recorded at cadence 1.
pub fn rate_fit(trace: &Trace, mode: RateMode, opts: FitOptions) -> Result<RateFit, DiagnosticsError> {
    let series: Vec<(u64, f64)> = match mode {
        RateMode::Sublinear => {
            let mut acc = 0.0;
            trace
                .rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    acc += r.w_hat;
                    (r.k, acc / (i + 1) as f64)
                })
                .collect()
        }
        RateMode::Linear => {
            let fs = trace.f_star.ok_or(DiagnosticsError::MissingOptimum)?;
            trace.rows.iter().map(|r| (r.k, r.consensus + r.objective - fs)).collect()
        }
    };
    fit_series(&series, mode, opts)
}

/// Fits `(k, metric)` pairs directly.
pub fn fit_series(series: &[(u64, f64)], mode: RateMode, opts: FitOptions) -> Result<RateFit, DiagnosticsError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ks = Vec::new();
    for &(k, m) in series {
        if k < opts.burn_in || k > opts.until || (mode == RateMode::Sublinear && k == 0) {
            continue;
        }
        if !(m > opts.floor) {
            break;
        }
        xs.push(match mode {
            RateMode::Sublinear => (k as f64).ln(),
            RateMode::Linear => k as f64,
        });
        ys.push(m.ln());
        ks.push(k);
    }
    if xs.len() < MIN_FIT_POINTS {
        return Err(DiagnosticsError::TooFewPoints {
            needed: MIN_FIT_POINTS,
            got: xs.len(),
        });
    }
    let (slope, intercept, r_squared) = least_squares(&xs, &ys);
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        points: xs.len(),
        first_k: ks[0],
        last_k: *ks.last().unwrap(),
    })
}
