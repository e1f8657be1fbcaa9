//! Decaying Laplace perturbations and ε-DP budget accounting.
//!
//! Node `i` perturbs its outgoing messages with Laplace noise of scale
//! `r_i^k u_{w,i}` (on `y`) and `r_i^k u_{e,i}` (on `z`). The accountant
//! evaluates the resulting privacy loss
//!
//! ```text
//! ε = c̃ Σ_{k=1}^{K} r^{-k},   c̃ = √d (1/(α u_e) + 1/u_w) α δ / (1 − α M̄)
//! ```
//!
//! for one node, where `δ` bounds the gradient gap between adjacent objectives.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::seeds;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("invalid noise parameter: {0}")]
    InvalidNoise(String),
    #[error("invalid budget input: {0}")]
    InvalidInput(String),
}

/// Initial scales and decay rate of one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeNoise {
    pub u_e: f64,
    pub u_w: f64,
    pub r: f64,
}

/// Per-node geometric noise schedule. A node with zero initial scales sends
/// its messages unperturbed; `r = 0` perturbs only iteration 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    nodes: Vec<NodeNoise>,
}

impl NoiseSchedule {
    pub fn per_node(nodes: Vec<NodeNoise>) -> Result<Self, PrivacyError> {
        for (i, n) in nodes.iter().enumerate() {
            if !(n.u_e >= 0.0 && n.u_e.is_finite() && n.u_w >= 0.0 && n.u_w.is_finite()) {
                return Err(PrivacyError::InvalidNoise(format!(
                    "node {i}: scales must be finite and >= 0 (u_e={}, u_w={})",
                    n.u_e, n.u_w
                )));
            }
            if !(0.0..1.0).contains(&n.r) {
                return Err(PrivacyError::InvalidNoise(format!("node {i}: decay rate {} outside [0, 1)", n.r)));
            }
        }
        Ok(Self { nodes })
    }

    /// Every node uses `u_e = u_w = u` and decay `r`.
    pub fn uniform(n: usize, u: f64, r: f64) -> Result<Self, PrivacyError> {
        Self::per_node(vec![NodeNoise { u_e: u, u_w: u, r }; n])
    }

    pub fn zero(n: usize) -> Self {
        Self {
            nodes: vec![
                NodeNoise {
                    u_e: 0.0,
                    u_w: 0.0,
                    r: 0.0
                };
                n
            ],
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, i: usize) -> NodeNoise {
        self.nodes[i]
    }

    pub fn is_zero(&self) -> bool {
        self.nodes.iter().all(|n| n.u_e == 0.0 && n.u_w == 0.0)
    }

    /// `θ_{e,i}^k = r_i^k u_{e,i}`.
    pub fn theta_e(&self, i: usize, k: u64) -> f64 {
        decay(self.nodes[i].r, k) * self.nodes[i].u_e
    }

    /// `θ_{w,i}^k = r_i^k u_{w,i}`.
    pub fn theta_w(&self, i: usize, k: u64) -> f64 {
        decay(self.nodes[i].r, k) * self.nodes[i].u_w
    }

    /// `ū = max_i max(u_{e,i}, u_{w,i})`.
    pub fn u_bar(&self) -> f64 {
        self.nodes.iter().map(|n| n.u_e.max(n.u_w)).fold(0.0, f64::max)
    }

    /// `r̄ = max_i r_i`.
    pub fn r_bar(&self) -> f64 {
        self.nodes.iter().map(|n| n.r).fold(0.0, f64::max)
    }
}

fn decay(r: f64, k: u64) -> f64 {
    if k == 0 {
        1.0
    } else if r == 0.0 {
        0.0
    } else {
        (k as f64 * r.ln()).exp()
    }
}

/// Fills `out` with i.i.d. Laplace(`scale`) draws by inverting the CDF.
pub fn fill_laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R, out: &mut [f64]) {
    for o in out.iter_mut() {
        let mut u: f64 = rng.random();
        while u == 0.0 {
            u = rng.random();
        }
        let c = u - 0.5;
        *o = -scale * c.signum() * (1.0 - 2.0 * c.abs()).ln();
    }
}

/// `dim` i.i.d. Laplace(`scale`) coordinates.
pub fn laplace_sample<R: Rng + ?Sized>(scale: f64, dim: usize, rng: &mut R) -> Result<Vec<f64>, PrivacyError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(PrivacyError::InvalidNoise(format!("Laplace scale must be > 0, got {scale}")));
    }
    let mut v = vec![0.0; dim];
    fill_laplace(scale, rng, &mut v);
    Ok(v)
}

/// Independent per-node noise streams derived from one run seed.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    schedule: NoiseSchedule,
    streams: Vec<ChaCha8Rng>,
}

impl NoiseSource {
    pub fn new(schedule: NoiseSchedule, seed: u64) -> Self {
        let streams = (0..schedule.node_count())
            .map(|i| seeds::stream(seed, i as u64 + 1))
            .collect();
        Self { schedule, streams }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Draws `w^k` and `e^k` (stacked, `d` coordinates per node). Each node
    /// samples `w_i` then `e_i` from its own stream; zero scales write zeros
    /// without consuming randomness.
    pub fn draw(&mut self, k: u64, d: usize, w: &mut [f64], e: &mut [f64]) {
        for (i, rng) in self.streams.iter_mut().enumerate() {
            let wi = &mut w[i * d..(i + 1) * d];
            let tw = self.schedule.theta_w(i, k);
            if tw > 0.0 {
                fill_laplace(tw, rng, wi);
            } else {
                wi.fill(0.0);
            }
            let ei = &mut e[i * d..(i + 1) * d];
            let te = self.schedule.theta_e(i, k);
            if te > 0.0 {
                fill_laplace(te, rng, ei);
            } else {
                ei.fill(0.0);
            }
        }
    }
}

/// Inputs of the single-node budget formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetInputs {
    pub horizon: u64,
    pub dim: usize,
    pub alpha: f64,
    pub delta: f64,
    pub m_bar: f64,
    pub u_e: f64,
    pub u_w: f64,
    pub r: f64,
}

impl BudgetInputs {
    fn validate(&self) -> Result<(), PrivacyError> {
        let bad = |m: String| Err(PrivacyError::InvalidInput(m));
        if self.horizon == 0 {
            return bad("horizon K must be >= 1".into());
        }
        if self.dim == 0 {
            return bad("dimension d must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be > 0, got {}", self.delta));
        }
        if !(self.m_bar >= 0.0 && self.m_bar.is_finite()) {
            return bad(format!("M_bar must be >= 0, got {}", self.m_bar));
        }
        if !(self.u_e > 0.0 && self.u_w > 0.0 && self.u_e.is_finite() && self.u_w.is_finite()) {
            return bad(format!("u_e and u_w must be > 0, got {} and {}", self.u_e, self.u_w));
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return bad(format!("r must lie in (0, 1), got {}", self.r));
        }
        Ok(())
    }
}

/// `c̃ = √d (1/(α u_e) + 1/u_w) α δ / (1 − α M̄)`, or `None` when `α M̄ ≥ 1`.
pub fn c_tilde(dim: usize, alpha: f64, delta: f64, m_bar: f64, u_e: f64, u_w: f64) -> Option<f64> {
    let slack = 1.0 - alpha * m_bar;
    if slack <= 0.0 {
        return None;
    }
    Some((dim as f64).sqrt() * (1.0 / (alpha * u_e) + 1.0 / u_w) * alpha * delta / slack)
}

/// `Σ_{k=1}^{K} r^{-k}` in closed form; `r = 1` gives `K`.
pub fn inverse_geometric_sum(r: f64, horizon: u64) -> f64 {
    if r == 1.0 {
        return horizon as f64;
    }
    let lp = -r.ln();
    (1.0 / r) * (horizon as f64 * lp).exp_m1() / lp.exp_m1()
}

/// Closed-form budget; `Ok(None)` when `α M̄ ≥ 1` makes the bound vacuous.
pub fn dp_budget(inputs: &BudgetInputs) -> Result<Option<f64>, PrivacyError> {
    inputs.validate()?;
    Ok(c_tilde(inputs.dim, inputs.alpha, inputs.delta, inputs.m_bar, inputs.u_e, inputs.u_w)
        .map(|c| c * inverse_geometric_sum(inputs.r, inputs.horizon)))
}

/// The same budget accumulated one iteration at a time (compensated sum).
pub fn dp_budget_termwise(inputs: &BudgetInputs) -> Result<Option<f64>, PrivacyError> {
    inputs.validate()?;
    let Some(c) = c_tilde(inputs.dim, inputs.alpha, inputs.delta, inputs.m_bar, inputs.u_e, inputs.u_w) else {
        return Ok(None);
    };
    let lp = -inputs.r.ln();
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for k in 1..=inputs.horizon {
        let term = c * (k as f64 * lp).exp();
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
        if sum.is_infinite() {
            // past f64 range; the compensation term would turn this into NaN
            return Ok(Some(f64::INFINITY));
        }
    }
    Ok(Some(sum + comp))
}

/// A budget evaluation with its inputs echoed.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyReport {
    pub inputs: BudgetInputs,
    /// `None` when `α M̄ ≥ 1`.
    pub epsilon: Option<f64>,
    pub target: Option<f64>,
    pub feasible: bool,
}

impl PrivacyReport {
    pub fn evaluate(inputs: BudgetInputs, target: Option<f64>) -> Result<Self, PrivacyError> {
        let epsilon = dp_budget(&inputs)?;
        let feasible = match (epsilon, target) {
            (None, _) => false,
            (Some(e), Some(t)) => e <= t,
            (Some(e), None) => e.is_finite(),
        };
        Ok(Self {
            inputs,
            epsilon,
            target,
            feasible,
        })
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let i = &self.inputs;
        let mut s = String::new();
        let _ = writeln!(s, "K = {}", i.horizon);
        let _ = writeln!(s, "d = {}", i.dim);
        let _ = writeln!(s, "alpha = {}", fmt_num(i.alpha));
        let _ = writeln!(s, "delta = {}", fmt_num(i.delta));
        let _ = writeln!(s, "M_bar = {}", fmt_num(i.m_bar));
        let _ = writeln!(s, "u_e = {}", fmt_num(i.u_e));
        let _ = writeln!(s, "u_w = {}", fmt_num(i.u_w));
        let _ = writeln!(s, "r = {}", fmt_num(i.r));
        match self.epsilon {
            Some(e) => {
                let _ = writeln!(s, "epsilon = {}", fmt_num(e));
            }
            None => {
                let _ = writeln!(s, "epsilon = infeasible (alpha * M_bar >= 1)");
            }
        }
        if let Some(t) = self.target {
            let _ = writeln!(s, "target = {}", fmt_num(t));
        }
        let _ = writeln!(s, "feasible = {}", self.feasible);
        s
    }
}

/// Rounds to 12 significant digits and prints the shortest representation,
/// so `4.400000000000001` prints as `4.4`.
pub fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.11e}").parse().unwrap_or(x);
    format!("{rounded}")
}

/// `α_max = min{1/M̄, (ε − √d M̄/u_e) / (δ(√d/u_w + ε))}` for a given `u_e`.
pub fn alpha_max_for(epsilon: f64, delta: f64, dim: usize, m_bar: f64, u_e: f64, u_w: f64) -> f64 {
    let sd = (dim as f64).sqrt();
    let cap = if m_bar > 0.0 { 1.0 / m_bar } else { f64::INFINITY };
    let a = (epsilon - sd * m_bar / u_e) / (delta * (sd / u_w + epsilon));
    cap.min(a)
}

/// Lower end `(c̃/ε)^{1/(K−1)}` of the textbook decay-rate interval.
pub fn textbook_r_lower(c_tilde: f64, epsilon: f64, horizon: u64) -> f64 {
    (c_tilde / epsilon).powf(1.0 / (horizon as f64 - 1.0))
}

/// Smallest decay rate whose budget stays within `epsilon`, found by
/// bisection on the monotone map `r ↦ c̃ Σ r^{-k}`. `None` when even
/// `r → 1` (budget `K c̃`) exceeds `epsilon`.
pub fn certified_r_lower(c_tilde: f64, epsilon: f64, horizon: u64) -> Option<f64> {
    if c_tilde * horizon as f64 >= epsilon {
        return None;
    }
    let over = |r: f64| c_tilde * inverse_geometric_sum(r, horizon) > epsilon;
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    // invariant: budget(lo) > ε (or lo = 0), budget(hi) <= ε (hi = 1 is the limit)
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if over(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (hi < 1.0).then_some(hi)
}

/// Output of the parameter-selection recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct DpSelection {
    pub epsilon_target: f64,
    pub delta: f64,
    pub dim: usize,
    pub m_bar: f64,
    pub horizon: u64,
    pub u_w: f64,
    pub u_e: f64,
    pub alpha_max: f64,
    /// `0.99 · α_max`, the step size the intervals are evaluated at.
    pub alpha: f64,
    pub c_tilde: Option<f64>,
    /// `((c̃/ε)^{1/(K−1)}, 1)` as the textbook recipe states it. Not every `r`
    /// in it meets the budget.
    pub textbook_interval: Option<(f64, f64)>,
    /// `(r*, 1)` where every `r` provably satisfies `dp_budget ≤ ε`.
    pub certified_interval: Option<(f64, f64)>,
    pub feasible: bool,
}

impl DpSelection {
    pub fn budget_inputs(&self, r: f64) -> BudgetInputs {
        BudgetInputs {
            horizon: self.horizon,
            dim: self.dim,
            alpha: self.alpha,
            delta: self.delta,
            m_bar: self.m_bar,
            u_e: self.u_e,
            u_w: self.u_w,
            r,
        }
    }

    pub fn to_text(&self) -> String {
        let interval = |iv: Option<(f64, f64)>| match iv {
            Some((a, b)) => format!("({}, {})", fmt_num(a), fmt_num(b)),
            None => "empty".to_string(),
        };
        let mut s = String::new();
        let _ = writeln!(s, "epsilon_target = {}", fmt_num(self.epsilon_target));
        let _ = writeln!(s, "delta = {}", fmt_num(self.delta));
        let _ = writeln!(s, "d = {}", self.dim);
        let _ = writeln!(s, "M_bar = {}", fmt_num(self.m_bar));
        let _ = writeln!(s, "K = {}", self.horizon);
        let _ = writeln!(s, "u_w = {}", fmt_num(self.u_w));
        let _ = writeln!(s, "u_e = {}", fmt_num(self.u_e));
        let _ = writeln!(s, "alpha_max = {}", fmt_num(self.alpha_max));
        let _ = writeln!(s, "alpha = {}", fmt_num(self.alpha));
        match self.c_tilde {
            Some(c) => {
                let _ = writeln!(s, "c_tilde = {}", fmt_num(c));
            }
            None => {
                let _ = writeln!(s, "c_tilde = undefined (alpha * M_bar >= 1)");
            }
        }
        let _ = writeln!(s, "r_interval_textbook = {}", interval(self.textbook_interval));
        let _ = writeln!(s, "r_interval_certified = {}", interval(self.certified_interval));
        let _ = writeln!(s, "feasible = {}", self.feasible);
        s
    }
}

/// Picks `u_e = 1.1 √d M̄/ε`, `α = 0.99 α_max` and the admissible decay rates
/// for a target budget.
pub fn select_dp_parameters(
    epsilon_target: f64,
    delta: f64,
    dim: usize,
    m_bar: f64,
    horizon: u64,
    u_w: f64,
) -> Result<DpSelection, PrivacyError> {
    let bad = |m: String| Err(PrivacyError::InvalidInput(m));
    if !(epsilon_target > 0.0 && epsilon_target.is_finite()) {
        return bad(format!("epsilon must be > 0, got {epsilon_target}"));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return bad(format!("delta must be > 0, got {delta}"));
    }
    if !(m_bar > 0.0 && m_bar.is_finite()) {
        return bad(format!("M_bar must be > 0, got {m_bar}"));
    }
    if !(u_w > 0.0 && u_w.is_finite()) {
        return bad(format!("u_w must be > 0, got {u_w}"));
    }
    if dim == 0 {
        return bad("dimension d must be >= 1".into());
    }
    if horizon < 2 {
        return bad(format!("horizon K must be >= 2, got {horizon}"));
    }
    let u_e = 1.1 * (dim as f64).sqrt() * m_bar / epsilon_target;
    let alpha_max = alpha_max_for(epsilon_target, delta, dim, m_bar, u_e, u_w);
    let alpha = 0.99 * alpha_max;
    let c = if alpha > 0.0 {
        c_tilde(dim, alpha, delta, m_bar, u_e, u_w)
    } else {
        None
    };
    let textbook_interval = c.and_then(|c| {
        let lo = textbook_r_lower(c, epsilon_target, horizon);
        (lo < 1.0).then_some((lo, 1.0))
    });
    let certified_interval = c
        .and_then(|c| certified_r_lower(c, epsilon_target, horizon))
        .map(|lo| (lo, 1.0));
    Ok(DpSelection {
        epsilon_target,
        delta,
        dim,
        m_bar,
        horizon,
        u_w,
        u_e,
        alpha_max,
        alpha,
        c_tilde: c,
        textbook_interval,
        certified_interval,
        feasible: certified_interval.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn worked() -> BudgetInputs {
        BudgetInputs {
            horizon: 1,
            dim: 1,
            alpha: 0.1,
            delta: 1.0,
            m_bar: 5.0,
            u_e: 1.0,
            u_w: 1.0,
            r: 0.5,
        }
    }

    #[test]
    fn worked_example() {
        let eps = dp_budget(&worked()).unwrap().unwrap();
        // (1/0.1 + 1)·0.1 / (0.5 · 0.5)
        assert_relative_eq!(eps, 4.4, max_relative = 1e-14);
        assert_eq!(fmt_num(eps), "4.4");
    }

    #[test]
    fn vacuous_when_alpha_times_smoothness_reaches_one() {
        let mut i = worked();
        i.alpha = 0.2;
        assert_eq!(dp_budget(&i).unwrap(), None);
        assert!(!PrivacyReport::evaluate(i, Some(1e9)).unwrap().feasible);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut i = worked();
        i.r = 1.0;
        assert!(dp_budget(&i).is_err());
        let mut i = worked();
        i.horizon = 0;
        assert!(dp_budget(&i).is_err());
        let mut i = worked();
        i.delta = 0.0;
        assert!(dp_budget(&i).is_err());
    }

    #[test]
    fn closed_form_matches_termwise() {
        for (k, r) in [(1u64, 0.5), (10, 0.9), (500, 0.99), (3000, 0.999), (40, 0.3)] {
            let mut i = worked();
            i.horizon = k;
            i.r = r;
            let a = dp_budget(&i).unwrap().unwrap();
            let b = dp_budget_termwise(&i).unwrap().unwrap();
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn inverse_geometric_sum_at_one_is_horizon() {
        assert_eq!(inverse_geometric_sum(1.0, 7), 7.0);
        assert_relative_eq!(inverse_geometric_sum(1.0 - 1e-12, 7), 7.0, max_relative = 1e-9);
    }

    #[test]
    fn laplace_rejects_non_positive_scale() {
        let mut rng = seeds::stream(0, 0);
        assert!(laplace_sample(0.0, 3, &mut rng).is_err());
        assert!(laplace_sample(-1.0, 3, &mut rng).is_err());
    }

    #[test]
    fn schedule_scales_decay() {
        let s = NoiseSchedule::uniform(3, 2.0, 0.5).unwrap();
        assert_eq!(s.theta_e(1, 0), 2.0);
        assert_relative_eq!(s.theta_w(1, 3), 0.25, max_relative = 1e-15);
        assert_eq!(s.u_bar(), 2.0);
        assert_eq!(s.r_bar(), 0.5);
        let z = NoiseSchedule::uniform(2, 1.0, 0.0).unwrap();
        assert_eq!(z.theta_e(0, 0), 1.0);
        assert_eq!(z.theta_e(0, 1), 0.0);
        assert!(NoiseSchedule::uniform(2, 1.0, 1.0).is_err());
        assert!(NoiseSchedule::uniform(2, -1.0, 0.5).is_err());
        assert!(NoiseSchedule::zero(4).is_zero());
    }

    #[test]
    fn zero_schedule_draws_zeros() {
        let mut src = NoiseSource::new(NoiseSchedule::zero(2), 1);
        let mut w = vec![1.0; 4];
        let mut e = vec![1.0; 4];
        src.draw(0, 2, &mut w, &mut e);
        assert!(w.iter().chain(&e).all(|&v| v == 0.0));
    }

    #[test]
    fn textbook_example_interval_is_nonempty() {
        let sel = select_dp_parameters(10.0, 1.0, 1, 1.0, 100, 1.0).unwrap();
        let (lo, hi) = sel.textbook_interval.unwrap();
        assert!(lo > 0.0 && lo < hi && hi == 1.0);
        // K c̃ ≈ 999 > 10: no decay rate meets this target
        assert!(!sel.feasible);
    }

    #[test]
    fn limits_with_fixed_u_e() {
        let (delta, m_bar) = (0.5, 4.0);
        let a = alpha_max_for(1e12, delta, 3, m_bar, 1.0, 1.0);
        assert_relative_eq!(a, (1.0 / m_bar).min(1.0 / delta), max_relative = 1e-9);
        let a = alpha_max_for(1e12, 4.0, 3, 0.1, 1.0, 1.0);
        assert_relative_eq!(a, 0.25, max_relative = 1e-9);
        assert!(textbook_r_lower(2.0, 1e300, 50) < 1e-5);
    }

    #[test]
    fn certified_interval_round_trips() {
        let sel = select_dp_parameters(5.0, 1e-4, 2, 3.0, 50, 2.0).unwrap();
        let (lo, _) = sel.certified_interval.unwrap();
        for t in [0.0, 0.25, 0.5, 0.75, 0.999] {
            let r = lo + t * (1.0 - lo);
            let eps = dp_budget(&sel.budget_inputs(r)).unwrap().unwrap();
            assert!(eps <= 5.0, "r={r} eps={eps}");
        }
    }
}
