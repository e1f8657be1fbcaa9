//! The DPP² iteration, its η-free equivalent form, and the parameter
//! validator.
//!
//! Every node keeps a primal `x_i`, a merged dual `d_i` and a Laplacian dual
//! `q_i`, and only ever transmits the masked messages
//!
//! ```text
//! y_i = x_i + (1 − η) d_i + w_i
//! z_i = ∇f_i(x_i) + η q_i + ρ Σ_j p_ij y_j + e_i
//! ```
//!
//! Updates are synchronous: all nodes read the iterate at `k` and write `k+1`.

use std::fmt::Write as _;

use log::warn;
use rand::distr::Open01;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diagnostics::{optimality_gap, DenseAnalyzer, DiagnosticsError, Trace, TraceRow};
use crate::graph::{GraphError, Network};
use crate::privacy::{fmt_num, NoiseSchedule, NoiseSource};
use crate::problems::Problem;
use crate::seeds;

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite gradient at node {node} (1-indexed) in iteration {iteration}")]
    NonFiniteGradient { node: usize, iteration: u64 },
    #[error("network is disconnected; set allow_disconnected to run anyway")]
    Disconnected,
}

/// How `η^k ∈ (0, 1)` is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaSchedule {
    Constant(f64),
    /// i.i.d. uniform draws on the open interval from a dedicated stream.
    Random { seed: u64 },
}

impl Default for EtaSchedule {
    fn default() -> Self {
        EtaSchedule::Constant(0.5)
    }
}

impl EtaSchedule {
    pub fn validate(&self) -> Result<(), AlgoError> {
        match *self {
            EtaSchedule::Constant(eta) if !(eta > 0.0 && eta < 1.0) => {
                Err(AlgoError::InvalidParameter(format!("eta must lie in (0, 1), got {eta}")))
            }
            _ => Ok(()),
        }
    }

    pub fn stream(&self) -> EtaStream {
        match *self {
            EtaSchedule::Constant(eta) => EtaStream::Constant(eta),
            EtaSchedule::Random { seed } => EtaStream::Random(Box::new(seeds::stream(seed, 0))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum EtaStream {
    Constant(f64),
    Random(Box<ChaCha8Rng>),
}

impl EtaStream {
    pub fn next_eta(&mut self) -> f64 {
        match self {
            EtaStream::Constant(eta) => *eta,
            EtaStream::Random(rng) => rng.sample(Open01),
        }
    }
}

/// User-facing parameters of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgoParams {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub eta: EtaSchedule,
    pub noise: NoiseSchedule,
    pub horizon: u64,
}

impl AlgoParams {
    pub fn validate(&self, n: usize) -> Result<(), AlgoError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(AlgoError::InvalidParameter(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(AlgoError::InvalidParameter(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(AlgoError::InvalidParameter(format!("rho must be > 0, got {}", self.rho)));
        }
        self.eta.validate()?;
        if self.noise.node_count() != n {
            return Err(AlgoError::DimensionMismatch(format!(
                "noise schedule covers {} nodes, network has {n}",
                self.noise.node_count()
            )));
        }
        Ok(())
    }
}

/// Stacked per-node state; node `i` owns `[i*d, (i+1)*d)` of each vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgState {
    pub k: u64,
    pub x: Vec<f64>,
    pub d: Vec<f64>,
    pub q: Vec<f64>,
    /// Messages of the last completed iteration.
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

impl AlgState {
    /// `d⁰ = q⁰ = 0` with the given primal start.
    pub fn new(x0: Vec<f64>) -> Self {
        let len = x0.len();
        Self {
            k: 0,
            x: x0,
            d: vec![0.0; len],
            q: vec![0.0; len],
            y: vec![0.0; len],
            z: vec![0.0; len],
        }
    }
}

/// The synchronous iteration, driven one step at a time with caller-supplied noise.
#[derive(Debug)]
pub struct Dpp2<'a> {
    problem: &'a Problem,
    network: &'a Network,
    alpha: f64,
    beta: f64,
    rho: f64,
    state: AlgState,
    grad: Vec<f64>,
    ly: Vec<f64>,
    lz: Vec<f64>,
}

impl<'a> Dpp2<'a> {
    pub fn new(
        problem: &'a Problem,
        network: &'a Network,
        alpha: f64,
        beta: f64,
        rho: f64,
        x0: Vec<f64>,
    ) -> Result<Self, AlgoError> {
        let len = check_dims(problem, network, &x0)?;
        let mut me = Self {
            problem,
            network,
            alpha,
            beta,
            rho,
            state: AlgState::new(x0),
            grad: vec![0.0; len],
            ly: vec![0.0; len],
            lz: vec![0.0; len],
        };
        me.refresh_gradient()?;
        Ok(me)
    }

    pub fn state(&self) -> &AlgState {
        &self.state
    }

    /// `∇f̃(x^k)` at the current iterate.
    pub fn gradient(&self) -> &[f64] {
        &self.grad
    }

    fn refresh_gradient(&mut self) -> Result<(), AlgoError> {
        self.problem.stacked_gradient_into(&self.state.x, &mut self.grad);
        check_finite(&self.grad, self.problem.dim(), self.state.k)
    }

    /// One synchronous iteration with noise realizations `w^k`, `e^k`.
    pub fn step(&mut self, eta: f64, w: &[f64], e: &[f64]) -> Result<(), AlgoError> {
        let d = self.problem.dim();
        let s = &mut self.state;
        for i in 0..s.x.len() {
            s.y[i] = s.x[i] + (1.0 - eta) * s.d[i] + w[i];
        }
        // one aggregation of y serves both z and q
        self.network.apply_l_into(&s.y, d, &mut self.ly)?;
        for i in 0..s.x.len() {
            s.z[i] = self.grad[i] + eta * s.q[i] + self.rho * self.ly[i] + e[i];
        }
        self.network.apply_l_into(&s.z, d, &mut self.lz)?;
        for i in 0..s.x.len() {
            s.x[i] = s.x[i] + w[i] - self.alpha * (s.z[i] - e[i]) + self.beta * self.lz[i];
            s.d[i] = eta * s.d[i] + s.y[i];
            s.q[i] = eta * s.q[i] + self.rho * self.ly[i];
        }
        s.k += 1;
        self.refresh_gradient()
    }
}

fn check_dims(problem: &Problem, network: &Network, x0: &[f64]) -> Result<usize, AlgoError> {
    if problem.node_count() != network.node_count() {
        return Err(AlgoError::DimensionMismatch(format!(
            "problem has {} nodes, network has {}",
            problem.node_count(),
            network.node_count()
        )));
    }
    let len = problem.node_count() * problem.dim();
    if x0.len() != len {
        return Err(AlgoError::DimensionMismatch(format!(
            "x0 has length {}, expected {len}",
            x0.len()
        )));
    }
    Ok(len)
}

fn check_finite(grad: &[f64], d: usize, iteration: u64) -> Result<(), AlgoError> {
    match grad.iter().position(|g| !g.is_finite()) {
        Some(pos) => Err(AlgoError::NonFiniteGradient {
            node: pos / d + 1,
            iteration,
        }),
        None => Ok(()),
    }
}

/// The η-free recursion
///
/// ```text
/// x' = x + w − G(∇f̃(x) + q + ρL(x + w)) + βLe,   q' = q + ρL(x + w)
/// ```
///
/// with `G = αI − βL` applied blockwise.
#[allow(clippy::too_many_arguments)]
pub fn step_equivalent(
    problem: &Problem,
    network: &Network,
    alpha: f64,
    beta: f64,
    rho: f64,
    x: &[f64],
    q: &[f64],
    w: &[f64],
    e: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), AlgoError> {
    let d = problem.dim();
    check_dims(problem, network, x)?;
    let grad = problem.stacked_gradient(x);
    check_finite(&grad, d, 0)?;
    let u: Vec<f64> = x.iter().zip(w).map(|(a, b)| a + b).collect();
    let lu = network.apply_l(&u, d)?;
    let h: Vec<f64> = (0..x.len()).map(|i| grad[i] + q[i] + rho * lu[i]).collect();
    let lh = network.apply_l(&h, d)?;
    let le = network.apply_l(e, d)?;
    let x_next = (0..x.len())
        .map(|i| u[i] - (alpha * h[i] - beta * lh[i]) + beta * le[i])
        .collect();
    let q_next = (0..x.len()).map(|i| q[i] + rho * lu[i]).collect();
    Ok((x_next, q_next))
}

/// Free constants of the analysis that the step sizes do not pin down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeConstants {
    pub c_theta: f64,
    pub gamma: f64,
}

/// Per-condition outcome of the certificate check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeasibilityFlags {
    /// `λ_G > 0`, i.e. `G ≻ 0` on the disagreement subspace.
    pub g_positive: bool,
    /// `1 < c̄_α < κ_L/(κ_L − 1)`.
    pub c_alpha_range: bool,
    /// `0 < c̄_θ < 1/κ_G`.
    pub c_theta_range: bool,
    /// `0 < γ < c̄_θ/5`.
    pub gamma_range: bool,
    /// `ρ > max{ξ₈, ξ₉}`.
    pub rho_range: bool,
    /// `0 < λ̄_G < min{ξ₁/ξ₂, root of ξ₃ − ξ₄t − ξ₅t², ξ₆/(c̄_α ξ₇)}`.
    pub lambda_g_range: bool,
    /// `λ̄_G < α < ξ₆/ξ₇`.
    pub alpha_range: bool,
}

impl FeasibilityFlags {
    pub fn all(&self) -> bool {
        self.g_positive
            && self.c_alpha_range
            && self.c_theta_range
            && self.gamma_range
            && self.rho_range
            && self.lambda_g_range
            && self.alpha_range
    }
}

/// Every theory constant derived from `(α, β, ρ)`, the spectrum of `P`,
/// `M̄` and the free constants.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedConstants {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub n: usize,
    pub m_bar: f64,
    pub nu: Option<f64>,
    pub r_bar: f64,
    pub lambda_bar_l: f64,
    pub lambda_l: f64,
    pub kappa_l: f64,
    /// Largest eigenvalue of `G` off the consensus direction, `α − βλ_L`.
    pub lambda_bar_g: f64,
    /// Smallest eigenvalue of `G`, `α − βλ̄_L`.
    pub lambda_g: f64,
    pub kappa_g: f64,
    /// `α / λ̄_G`.
    pub c_alpha: f64,
    pub c_theta: f64,
    pub gamma: f64,
    pub theta: f64,
    /// `ξ₁ … ξ₉`, index 0 holds `ξ₁`.
    pub xi: [f64; 9],
    /// Upper end of the admissible `λ̄_G` range.
    pub lambda_g_bound: f64,
    /// `ξ₁ − ξ₂λ̄_G`, `ξ₃ − ξ₄λ̄_G − ξ₅λ̄_G²`, `ξ₆ − ξ₇α`.
    pub positivity: [f64; 3],
    /// `ζ₁ … ζ₅`; `ζ₆` and `ζ = ζ₆/ζ₄` need a P-Ł constant.
    pub zeta: [f64; 5],
    pub zeta6: Option<f64>,
    pub zeta_rate: Option<f64>,
    pub d1: f64,
    pub d2: f64,
    pub flags: FeasibilityFlags,
}

/// Spectral and problem inputs of [`derive_constants`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisInputs {
    pub n: usize,
    pub lambda_bar_l: f64,
    pub lambda_l: f64,
    pub m_bar: f64,
    pub nu: Option<f64>,
    pub r_bar: f64,
}

impl AnalysisInputs {
    pub fn new(network: &Network, problem: &Problem, r_bar: f64) -> Self {
        Self {
            n: network.node_count(),
            lambda_bar_l: network.lambda_max(),
            lambda_l: network.lambda_min_pos(),
            m_bar: problem.m_bar(),
            nu: problem.pl_constant(),
            r_bar,
        }
    }

    fn kappa_l(&self) -> f64 {
        (self.lambda_bar_l / self.lambda_l).max(1.0)
    }

    /// Upper end of the `c̄_α` range; infinite when `κ_L = 1`.
    pub fn c_alpha_upper(&self) -> f64 {
        let k = self.kappa_l();
        if k - 1.0 <= 1e-12 {
            f64::INFINITY
        } else {
            k / (k - 1.0)
        }
    }
}

/// `ξ₁ … ξ₉`, which depend on the step sizes only through `ρ`, `c̄_α`, `κ_G`.
fn xis(inp: &AnalysisInputs, rho: f64, c_alpha: f64, kappa_g: f64, ct: f64, gamma: f64) -> [f64; 9] {
    let (lb, l) = (inp.lambda_bar_l, inp.lambda_l);
    let m2 = inp.m_bar * inp.m_bar;
    let gap = 1.0 / kappa_g - ct;
    let xi1 = rho * lb / 2.0 * gap - (1.0 + 0.75 * m2 + 0.5 * m2 * c_alpha);
    let xi2 = 0.5 * (1.0 + 1.0 / gamma) * rho * rho * lb
        + ct / 4.0
        + 0.5 * ct * rho * lb
        + 2.75
        + m2 * (2.0 / gamma + 0.25 * ct * rho * lb + 0.5 * ct * ct);
    let xi3 = ct / 2.0 - 2.5 * gamma - 1.0 / (rho * rho * l * l);
    let xi4 = ct * ct / 4.0;
    let xi5 = 1.75 * ct * ct;
    let xi6 = 0.25;
    let xi7 = inp.m_bar + 10.5 * m2;
    let xi8 = if gap > 0.0 {
        (4.0 + 3.0 * m2 + 2.0 * m2 * c_alpha) / (2.0 * lb * gap)
    } else {
        f64::INFINITY
    };
    let inner = l * l * (ct / 2.0 - 2.5 * gamma);
    let xi9 = if inner > 0.0 { 1.0 / inner.sqrt() } else { f64::INFINITY };
    [xi1, xi2, xi3, xi4, xi5, xi6, xi7, xi8, xi9]
}

fn lambda_g_bound(xi: &[f64; 9], c_alpha: f64) -> f64 {
    let [xi1, xi2, xi3, xi4, xi5, xi6, xi7, _, _] = *xi;
    let root = (-xi4 + (xi4 * xi4 + 4.0 * xi3 * xi5).sqrt()) / (2.0 * xi5);
    (xi1 / xi2).min(root).min(xi6 / (c_alpha * xi7))
}

/// Evaluates every derived constant and the certificate flags.
pub fn derive_constants(inp: &AnalysisInputs, alpha: f64, beta: f64, rho: f64, free: FreeConstants) -> DerivedConstants {
    let FreeConstants { c_theta: ct, gamma } = free;
    let (lb, l) = (inp.lambda_bar_l, inp.lambda_l);
    let kappa_l = inp.kappa_l();
    let lbg = alpha - beta * l;
    let lg = alpha - beta * lb;
    let kappa_g = if lg > 0.0 { lbg / lg } else { f64::INFINITY };
    let c_alpha = alpha / lbg;
    let theta = ct * lbg;
    let xi = xis(inp, rho, c_alpha, kappa_g, ct, gamma);
    let [xi1, xi2, xi3, xi4, xi5, xi6, xi7, xi8, xi9] = xi;
    let bound = lambda_g_bound(&xi, c_alpha);
    let positivity = [xi1 - xi2 * lbg, xi3 - xi4 * lbg - xi5 * lbg * lbg, xi6 - xi7 * alpha];

    let c1 = lg * (theta + 1.0 / (rho * lb));
    let zeta1 = 1.0 - c1 + ((c1 - 1.0).powi(2) + theta * theta).sqrt();
    let c2 = lbg * (theta + 1.0 / (rho * l));
    let zeta2 = 1.0 - c2 + ((c2 - 1.0).powi(2) + theta * theta).sqrt();
    let zeta3 = 0.5 - zeta1 / 4.0;
    let zeta4 = (0.5 + zeta2 / 4.0).max(1.0);
    let zeta5 = (lbg * positivity[0]).min(alpha * positivity[2]);
    let zeta6 = inp.nu.map(|nu| {
        (lbg * positivity[0])
            .min(lbg * lbg * positivity[1])
            .min(alpha * nu * inp.n as f64 / 4.0)
            .min(zeta4 * (1.0 - inp.r_bar * inp.r_bar))
    });

    let m = inp.m_bar;
    let d1 = kappa_g / lbg
        + 2.0 * kappa_g * kappa_g / (lbg * lbg)
        + 2.0
        + 3.0 * rho * rho * lb * lb
        + theta * rho * rho * lb * lb * lbg
        + rho * lb * lbg
        + 0.25 * theta * theta * rho * lb * lbg * lbg
        + 2.0 / alpha
        + m
        + 10.5 * m * m;
    let d2 = beta * beta * (2.0 + kappa_g / lbg + 2.0 * kappa_g * kappa_g / (lbg * lbg));

    let flags = FeasibilityFlags {
        g_positive: lg > 0.0,
        c_alpha_range: c_alpha > 1.0 && c_alpha < inp.c_alpha_upper(),
        c_theta_range: ct > 0.0 && ct < 1.0 / kappa_g,
        gamma_range: gamma > 0.0 && gamma < ct / 5.0,
        rho_range: rho > xi8.max(xi9),
        lambda_g_range: lbg > 0.0 && lbg < bound,
        alpha_range: alpha > lbg && alpha < xi6 / xi7,
    };
    DerivedConstants {
        alpha,
        beta,
        rho,
        n: inp.n,
        m_bar: inp.m_bar,
        nu: inp.nu,
        r_bar: inp.r_bar,
        lambda_bar_l: lb,
        lambda_l: l,
        kappa_l,
        lambda_bar_g: lbg,
        lambda_g: lg,
        kappa_g,
        c_alpha,
        c_theta: ct,
        gamma,
        theta,
        xi,
        lambda_g_bound: bound,
        positivity,
        zeta: [zeta1, zeta2, zeta3, zeta4, zeta5],
        zeta6,
        zeta_rate: zeta6.map(|z6| z6 / zeta4),
        d1,
        d2,
        flags,
    }
}

/// Validator entry point; requires a connected network.
pub fn validate_parameters(
    params: &AlgoParams,
    network: &Network,
    problem: &Problem,
    free: FreeConstants,
) -> Result<DerivedConstants, AlgoError> {
    if !network.is_connected() {
        return Err(AlgoError::Disconnected);
    }
    if network.kappa() - 1.0 <= 1e-12 {
        warn!("kappa_L = 1: the c_alpha range is unbounded above");
    }
    let inp = AnalysisInputs::new(network, problem, params.noise.r_bar());
    Ok(derive_constants(&inp, params.alpha, params.beta, params.rho, free))
}

impl DerivedConstants {
    /// Two-column `name value` table followed by the flags.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let mut row = |name: &str, v: f64| {
            let _ = writeln!(s, "{name:<16} {}", fmt_num(v));
        };
        row("alpha", self.alpha);
        row("beta", self.beta);
        row("rho", self.rho);
        row("M_bar", self.m_bar);
        row("lambda_bar_L", self.lambda_bar_l);
        row("lambda_L", self.lambda_l);
        row("kappa_L", self.kappa_l);
        row("lambda_bar_G", self.lambda_bar_g);
        row("lambda_G", self.lambda_g);
        row("kappa_G", self.kappa_g);
        row("c_alpha", self.c_alpha);
        row("c_theta", self.c_theta);
        row("gamma", self.gamma);
        row("theta", self.theta);
        for (i, v) in self.xi.iter().enumerate() {
            row(&format!("xi{}", i + 1), *v);
        }
        row("lambda_G_bound", self.lambda_g_bound);
        row("xi1-xi2*lG", self.positivity[0]);
        row("xi3-xi4*lG-..", self.positivity[1]);
        row("xi6-xi7*alpha", self.positivity[2]);
        for (i, v) in self.zeta.iter().enumerate() {
            row(&format!("zeta{}", i + 1), *v);
        }
        if let Some(z6) = self.zeta6 {
            row("zeta6", z6);
        }
        if let Some(z) = self.zeta_rate {
            row("zeta", z);
        }
        row("D1", self.d1);
        row("D2", self.d2);
        let f = &self.flags;
        for (name, ok) in [
            ("G_positive", f.g_positive),
            ("c_alpha_range", f.c_alpha_range),
            ("c_theta_range", f.c_theta_range),
            ("gamma_range", f.gamma_range),
            ("rho_range", f.rho_range),
            ("lambda_G_range", f.lambda_g_range),
            ("alpha_range", f.alpha_range),
        ] {
            let _ = writeln!(s, "{name:<16} {}", if ok { "pass" } else { "FAIL" });
        }
        let _ = writeln!(s, "{:<16} {}", "certified", if f.all() { "yes" } else { "no" });
        s
    }
}

/// A certified `(α, β, ρ)` together with the free constants that certify it.
#[derive(Debug, Clone, PartialEq)]
pub struct CertifiedParameters {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub free: FreeConstants,
    pub constants: DerivedConstants,
}

/// Grid search in dependency order: `c̄_α`, `c̄_θ`, `γ`, then `ρ` above
/// `max{ξ₈, ξ₉}`, `λ̄_G` below its bound, and finally `α = c̄_α λ̄_G`,
/// `β = (α − λ̄_G)/λ_L`. Returns the candidate with the largest `α`.
pub fn search_certified_parameters(inp: &AnalysisInputs) -> Option<CertifiedParameters> {
    if !(inp.lambda_l > 0.0) {
        return None;
    }
    let kappa_l = inp.kappa_l();
    let upper = inp.c_alpha_upper().min(10.0);
    let fractions = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95];
    let mut best: Option<CertifiedParameters> = None;
    for &ta in &fractions {
        let c_alpha = 1.0 + ta * (upper - 1.0);
        let kappa_g = 1.0 / (kappa_l - (kappa_l - 1.0) * c_alpha);
        if !(kappa_g > 0.0 && kappa_g.is_finite()) {
            continue;
        }
        for &tt in &fractions {
            let ct = tt / kappa_g;
            for &tg in &fractions {
                let gamma = tg * ct / 5.0;
                let probe = xis(inp, 1.0, c_alpha, kappa_g, ct, gamma);
                let rho_min = probe[7].max(probe[8]);
                for mult in [1.01, 1.1, 1.5, 2.0, 4.0, 8.0] {
                    let rho = mult * rho_min;
                    let xi = xis(inp, rho, c_alpha, kappa_g, ct, gamma);
                    if !(xi[0] > 0.0 && xi[2] > 0.0) {
                        continue;
                    }
                    let lbg = 0.9 * lambda_g_bound(&xi, c_alpha);
                    if !(lbg > 0.0) {
                        continue;
                    }
                    let alpha = c_alpha * lbg;
                    let beta = (alpha - lbg) / inp.lambda_l;
                    let free = FreeConstants { c_theta: ct, gamma };
                    let constants = derive_constants(inp, alpha, beta, rho, free);
                    if !constants.flags.all() {
                        continue;
                    }
                    if best.as_ref().is_none_or(|b| alpha > b.alpha) {
                        best = Some(CertifiedParameters {
                            alpha,
                            beta,
                            rho,
                            free,
                            constants,
                        });
                    }
                }
            }
        }
    }
    best
}

/// What to record during [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct TraceConfig {
    /// Record every `cadence`-th iteration (and always the last one).
    pub cadence: u64,
    /// Primal start; zero when absent.
    pub x0: Option<Vec<f64>>,
    /// Evaluate the Lyapunov function with these free constants.
    pub lyapunov: Option<FreeConstants>,
    pub allow_disconnected: bool,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            cadence: 1,
            x0: None,
            lyapunov: None,
            allow_disconnected: false,
        }
    }
}

/// Runs `params.horizon` iterations from `d = q = 0`. The noise of node `i`
/// comes from stream `i + 1` of `seed`.
pub fn run(
    problem: &Problem,
    network: &Network,
    params: &AlgoParams,
    seed: u64,
    config: &TraceConfig,
) -> Result<Trace, AlgoError> {
    let n = network.node_count();
    let dim = problem.dim();
    params.validate(n)?;
    if config.cadence == 0 {
        return Err(AlgoError::InvalidParameter("trace cadence must be >= 1".into()));
    }
    if !network.is_connected() && !config.allow_disconnected {
        return Err(AlgoError::Disconnected);
    }
    let x0 = config.x0.clone().unwrap_or_else(|| vec![0.0; n * dim]);
    let mut alg = Dpp2::new(problem, network, params.alpha, params.beta, params.rho, x0)?;

    let analyzer = match config.lyapunov {
        Some(free) => {
            let c = validate_parameters(params, network, problem, free)?;
            if !c.flags.all() {
                warn!("parameters are not certified; Lyapunov descent is not guaranteed");
            }
            Some((DenseAnalyzer::new(network, dim, &c)?, c))
        }
        None => None,
    };
    let f_star = problem.f_star();

    let mut noise = NoiseSource::new(params.noise.clone(), seed);
    let mut eta = params.eta.stream();
    let len = n * dim;
    let mut w = vec![0.0; len];
    let mut e = vec![0.0; len];
    let mut xbar = vec![0.0; dim];
    let mut rows: Vec<TraceRow> = Vec::new();
    let mut best_objective = f64::INFINITY;
    let horizon = params.horizon;

    // V at the current iterate, without the −f* shift
    let mut v_now = analyzer
        .as_ref()
        .map(|(a, _)| a.lyapunov_unshifted(problem, &alg.state().x, &alg.state().q));

    for k in 0..=horizon {
        let gap = optimality_gap(&alg.state().x, alg.gradient(), dim);
        average_into(&alg.state().x, dim, &mut xbar);
        let objective = problem.global_value(&xbar);
        best_objective = best_objective.min(objective);
        let record = k % config.cadence == 0 || k == horizon;
        let mut row = TraceRow {
            k,
            w_hat: gap.w_hat,
            consensus: gap.consensus,
            stationarity: gap.stationarity,
            objective,
            lyapunov: v_now,
            descent_residual: None,
            noise_w_sq: None,
            noise_e_sq: None,
        };
        if k == horizon {
            if record {
                rows.push(row);
            }
            break;
        }
        noise.draw(k, dim, &mut w, &mut e);
        let eta_k = eta.next_eta();
        alg.step(eta_k, &w, &e)?;
        let w_sq: f64 = w.iter().map(|v| v * v).sum();
        let e_sq: f64 = e.iter().map(|v| v * v).sum();
        if let Some((a, c)) = &analyzer {
            let v_next = a.lyapunov_unshifted(problem, &alg.state().x, &alg.state().q);
            row.descent_residual = v_now.map(|v| v_next - v - (c.d1 * w_sq + c.d2 * e_sq));
            v_now = Some(v_next);
        }
        row.noise_w_sq = Some(w_sq);
        row.noise_e_sq = Some(e_sq);
        if record {
            rows.push(row);
        }
    }

    let (shift, surrogate) = match f_star {
        Some(fs) => (fs, false),
        None => (best_objective, true),
    };
    if analyzer.is_some() {
        for r in &mut rows {
            if let Some(v) = r.lyapunov.as_mut() {
                *v -= shift;
            }
        }
    }
    Ok(Trace {
        rows,
        f_star,
        lyapunov_surrogate: analyzer.is_some() && surrogate,
        metadata: Vec::new(),
    })
}

/// Node average `x̄` of a stacked vector.
pub fn average_into(x: &[f64], d: usize, out: &mut [f64]) {
    let n = x.len() / d;
    out.fill(0.0);
    for block in x.chunks_exact(d) {
        for (o, v) in out.iter_mut().zip(block) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= n as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::path_edges;
    use crate::problems::quadratic_from_parts;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn two_node_problem() -> (Problem, Network) {
        let parts = vec![
            (DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 1.0)),
            (DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, -1.0)),
        ];
        (quadratic_from_parts(parts).unwrap(), Network::from_edges(2, &[(0, 1)]).unwrap())
    }

    #[test]
    fn first_iterate_matches_dense_evaluation() {
        let (p, net) = two_node_problem();
        let (alpha, beta, rho) = (0.1, 0.02, 0.7);
        let x0 = vec![0.3, -0.4];
        let mut alg = Dpp2::new(&p, &net, alpha, beta, rho, x0.clone()).unwrap();
        alg.step(0.37, &[0.0; 2], &[0.0; 2]).unwrap();
        // x¹ = x⁰ − G(∇f̃(x⁰) + ρ L x⁰), G = αI − βL
        let l = net.p().clone();
        let g = DMatrix::identity(2, 2) * alpha - &l * beta;
        let xv = DVector::from_column_slice(&x0);
        let grad = DVector::from_column_slice(&p.stacked_gradient(&x0));
        let expected = &xv - &g * (grad + &l * &xv * rho);
        for i in 0..2 {
            assert_relative_eq!(alg.state().x[i], expected[i], max_relative = 1e-14);
        }
    }

    #[test]
    fn stationary_consensus_point_is_fixed() {
        let parts = vec![
            (DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 2.0)),
            (DMatrix::from_element(1, 1, 3.0), DVector::from_element(1, 6.0)),
        ];
        let p = quadratic_from_parts(parts).unwrap();
        let net = Network::from_edges(2, &[(0, 1)]).unwrap();
        let mut alg = Dpp2::new(&p, &net, 0.1, 0.01, 1.0, vec![2.0, 2.0]).unwrap();
        alg.step(0.5, &[0.0; 2], &[0.0; 2]).unwrap();
        assert_eq!(alg.state().x, vec![2.0, 2.0]);
        assert_eq!(alg.state().q, vec![0.0, 0.0]);
    }

    #[test]
    fn beta_zero_equivalent_step() {
        let (p, net) = two_node_problem();
        let x = [0.5, -1.0];
        let q = [0.2, -0.2];
        let w = [0.01, 0.03];
        let e = [0.5, 0.7];
        let (xn, qn) = step_equivalent(&p, &net, 0.1, 0.0, 2.0, &x, &q, &w, &e).unwrap();
        let u = [x[0] + w[0], x[1] + w[1]];
        let lu = net.apply_l(&u, 1).unwrap();
        let g = p.stacked_gradient(&x);
        for i in 0..2 {
            let h = g[i] + q[i] + 2.0 * lu[i];
            assert_relative_eq!(xn[i], u[i] - 0.1 * h, max_relative = 1e-14);
            assert_relative_eq!(qn[i], q[i] + 2.0 * lu[i], max_relative = 1e-14);
        }
    }

    #[test]
    fn non_finite_gradient_names_node_and_iteration() {
        let (p, net) = two_node_problem();
        let mut alg = Dpp2::new(&p, &net, 0.1, 0.0, 1.0, vec![0.0, 0.0]).unwrap();
        let err = alg.step(0.5, &[0.0, f64::INFINITY], &[0.0; 2]).unwrap_err();
        assert!(matches!(err, AlgoError::NonFiniteGradient { iteration: 1, .. }), "{err}");
        assert!(err.to_string().contains("iteration 1"));
    }

    #[test]
    fn theta_threshold_makes_xi1_negative() {
        let net = Network::from_edges(5, &path_edges(5)).unwrap();
        let inp = AnalysisInputs {
            n: 5,
            lambda_bar_l: net.lambda_max(),
            lambda_l: net.lambda_min_pos(),
            m_bar: 1.0,
            nu: None,
            r_bar: 0.0,
        };
        let c = derive_constants(&inp, 0.1, 0.01, 10.0, FreeConstants { c_theta: 0.5, gamma: 0.01 });
        let bad = derive_constants(
            &inp,
            0.1,
            0.01,
            10.0,
            FreeConstants {
                c_theta: 1.0 / c.kappa_g,
                gamma: 0.01,
            },
        );
        assert!(bad.xi[0] < 0.0);
        assert!(!bad.flags.c_theta_range);
        assert!(!bad.flags.all());
    }

    #[test]
    fn grid_search_certifies_path_graph() {
        let net = Network::from_edges(5, &path_edges(5)).unwrap();
        let inp = AnalysisInputs {
            n: 5,
            lambda_bar_l: net.lambda_max(),
            lambda_l: net.lambda_min_pos(),
            m_bar: 1.0,
            nu: Some(0.1),
            r_bar: 0.0,
        };
        let cert = search_certified_parameters(&inp).expect("certified parameters");
        let c = &cert.constants;
        assert!(c.flags.all());
        assert!(c.positivity.iter().all(|&p| p > 0.0));
        assert!(c.zeta[2] > 0.0);
        let z = c.zeta_rate.unwrap();
        assert!(z > 0.0 && z < 1.0);
    }

    #[test]
    fn complete_graph_has_unbounded_c_alpha() {
        let net = Network::from_edges(4, &crate::graph::complete_edges(4)).unwrap();
        let inp = AnalysisInputs {
            n: 4,
            lambda_bar_l: net.lambda_max(),
            lambda_l: net.lambda_min_pos(),
            m_bar: 1.0,
            nu: None,
            r_bar: 0.0,
        };
        assert!(inp.c_alpha_upper().is_infinite());
        assert!(search_certified_parameters(&inp).is_some());
    }

    #[test]
    fn eta_constant_must_be_open_unit() {
        assert!(EtaSchedule::Constant(1.0).validate().is_err());
        assert!(EtaSchedule::Constant(0.0).validate().is_err());
        let mut s = EtaSchedule::Random { seed: 3 }.stream();
        for _ in 0..1000 {
            let v = s.next_eta();
            assert!(v > 0.0 && v < 1.0);
        }
    }
}
