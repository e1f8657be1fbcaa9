//! Communication topology and the consensus weight matrix.
//!
//! A [`Network`] owns the neighbor-sparse, symmetric positive semidefinite
//! matrix `P` whose null space is the consensus direction. The stacked
//! operator `L = P ⊗ I_d` is never materialized: [`Network::apply_l`] works
//! blockwise through per-node neighbor sums.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("network must have at least one node")]
    Empty,
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    NodeOutOfRange(usize, usize, usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("expected a vector of length {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("geometric graph parameters invalid: {0}")]
    InvalidParameter(String),
    #[error("no connected geometric graph after {attempts} attempts (last seed tried: {last_seed})")]
    NotConnected { attempts: u32, last_seed: u64 },
    #[error("edge list parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("laplacian scale must be positive and finite, got {0}")]
    InvalidScale(f64),
}

/// Undirected topology plus its consensus weight matrix and spectral summary.
#[derive(Debug, Clone)]
pub struct Network {
    n: usize,
    edges: Vec<(usize, usize)>,
    /// Per node, the neighbors `j` with edge weight `-p_ij > 0`, sorted.
    rows: Vec<Vec<(usize, f64)>>,
    p: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    connected: bool,
    scale: f64,
}

impl Network {
    /// Builds the unweighted graph Laplacian (degree on the diagonal, `-1`
    /// per edge) from 0-indexed edges. Duplicate edges are merged.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(GraphError::NodeOutOfRange(a, b, n));
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        Ok(Self::assemble(n, edges, 1.0))
    }

    fn assemble(n: usize, edges: Vec<(usize, usize)>, scale: f64) -> Self {
        let mut p = DMatrix::<f64>::zeros(n, n);
        for &(a, b) in &edges {
            p[(a, b)] -= scale;
            p[(b, a)] -= scale;
            p[(a, a)] += scale;
            p[(b, b)] += scale;
        }
        let rows = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i && p[(i, j)] != 0.0)
                    .map(|j| (j, -p[(i, j)]))
                    .collect()
            })
            .collect();
        let mut eigenvalues: Vec<f64> = SymmetricEigen::new(p.clone()).eigenvalues.iter().copied().collect();
        eigenvalues.sort_by(f64::total_cmp);
        let connected = is_connected(n, &edges);
        Self {
            n,
            edges,
            rows,
            p,
            eigenvalues,
            connected,
            scale,
        }
    }

    /// Returns the same topology with `P` multiplied by `scale`.
    pub fn scaled(&self, scale: f64) -> Result<Self, GraphError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(GraphError::InvalidScale(scale));
        }
        Ok(Self::assemble(self.n, self.edges.clone(), self.scale * scale))
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Sorted 0-indexed edges with `a < b`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Multiplier applied to the unweighted Laplacian.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn degree(&self, i: usize) -> usize {
        self.rows[i].len()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.n).map(|i| self.degree(i)).max().unwrap_or(0)
    }

    /// Eigenvalues of `P` in ascending order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Largest eigenvalue of `P`.
    pub fn lambda_max(&self) -> f64 {
        *self.eigenvalues.last().expect("non-empty network")
    }

    /// Second-smallest eigenvalue of `P` (algebraic connectivity); zero for a
    /// single node.
    pub fn lambda_min_pos(&self) -> f64 {
        self.eigenvalues.get(1).copied().unwrap_or(0.0)
    }

    /// Spectral condition number `lambda_max / lambda_min_pos`; infinite on
    /// disconnected graphs.
    pub fn kappa(&self) -> f64 {
        let lo = self.lambda_min_pos();
        if self.connected && lo > 0.0 {
            (self.lambda_max() / lo).max(1.0)
        } else {
            f64::INFINITY
        }
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    /// True when the graph is disconnected; the runner refuses such networks
    /// unless explicitly overridden.
    pub fn disconnected_warning(&self) -> bool {
        !self.connected
    }

    /// Computes `(P ⊗ I_d) v` for a stacked vector `v` of length `N·d`.
    pub fn apply_l(&self, v: &[f64], d: usize) -> Result<Vec<f64>, GraphError> {
        let mut out = vec![0.0; v.len()];
        self.apply_l_into(v, d, &mut out)?;
        Ok(out)
    }

    /// In-place variant of [`Network::apply_l`]; `out` must not alias `v`.
    pub fn apply_l_into(&self, v: &[f64], d: usize, out: &mut [f64]) -> Result<(), GraphError> {
        let expected = self.n * d;
        if v.len() != expected {
            return Err(GraphError::LengthMismatch { expected, actual: v.len() });
        }
        if out.len() != expected {
            return Err(GraphError::LengthMismatch { expected, actual: out.len() });
        }
        // Σ_j w_ij (v_i − v_j) vanishes exactly on consensus vectors
        for (i, row) in self.rows.iter().enumerate() {
            let dst = &mut out[i * d..(i + 1) * d];
            let vi = &v[i * d..(i + 1) * d];
            dst.fill(0.0);
            for &(j, wij) in row {
                let vj = &v[j * d..(j + 1) * d];
                for ((o, a), b) in dst.iter_mut().zip(vi).zip(vj) {
                    *o += wij * (a - b);
                }
            }
        }
        Ok(())
    }

    /// Serializes as an `N` header line followed by 1-indexed `i j` pairs.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("{}\n", self.n);
        for &(a, b) in &self.edges {
            let _ = writeln!(s, "{} {}", a + 1, b + 1);
        }
        s
    }

    /// Parses the format produced by [`Network::to_edge_list`]. Blank lines
    /// and lines starting with `#` are skipped.
    pub fn from_edge_list(text: &str) -> Result<Self, GraphError> {
        let mut n = None;
        let mut edges = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parse = |f: &str| {
                f.parse::<usize>().map_err(|e| GraphError::Parse {
                    line: line_no,
                    msg: format!("{f:?}: {e}"),
                })
            };
            match (n, fields.as_slice()) {
                (None, [count]) => n = Some(parse(count)?),
                (None, _) => {
                    return Err(GraphError::Parse {
                        line: line_no,
                        msg: "expected node-count header".into(),
                    })
                }
                (Some(count), [a, b]) => {
                    let (a, b) = (parse(a)?, parse(b)?);
                    if a == 0 || b == 0 || a > count || b > count {
                        return Err(GraphError::Parse {
                            line: line_no,
                            msg: format!("node index out of range 1..={count}"),
                        });
                    }
                    edges.push((a - 1, b - 1));
                }
                (Some(_), _) => {
                    return Err(GraphError::Parse {
                        line: line_no,
                        msg: "expected two node indices".into(),
                    })
                }
            }
        }
        let n = n.ok_or(GraphError::Parse {
            line: 0,
            msg: "missing node-count header".into(),
        })?;
        Self::from_edges(n, &edges)
    }
}

fn is_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Edge set of a random geometric graph together with the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricGraph {
    pub edges: Vec<(usize, usize)>,
    pub seed: u64,
    pub points: Vec<[f64; 2]>,
}

/// Draws `n` points uniformly in the unit square and joins pairs within
/// `radius`. Disconnected draws are retried with successor seeds
/// `seed + 1, seed + 2, ...` up to `max_attempts` total draws.
pub fn random_geometric_graph(
    n: usize,
    radius: f64,
    seed: u64,
    max_attempts: u32,
) -> Result<GeometricGraph, GraphError> {
    if n < 2 {
        return Err(GraphError::InvalidParameter(format!("need at least 2 nodes, got {n}")));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(GraphError::InvalidParameter(format!("radius must be positive, got {radius}")));
    }
    if max_attempts == 0 {
        return Err(GraphError::InvalidParameter("max_attempts must be at least 1".into()));
    }
    let r2 = radius * radius;
    let mut last_seed = seed;
    for attempt in 0..max_attempts {
        let s = seed.wrapping_add(attempt as u64);
        last_seed = s;
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let points: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                let dx = points[a][0] - points[b][0];
                let dy = points[a][1] - points[b][1];
                if dx * dx + dy * dy <= r2 {
                    edges.push((a, b));
                }
            }
        }
        if is_connected(n, &edges) {
            return Ok(GeometricGraph { edges, seed: s, points });
        }
    }
    Err(GraphError::NotConnected {
        attempts: max_attempts,
        last_seed,
    })
}

/// Path `0 - 1 - ... - (n-1)`.
pub fn path_edges(n: usize) -> Vec<(usize, usize)> {
    (1..n).map(|i| (i - 1, i)).collect()
}

/// Cycle on `n >= 3` nodes.
pub fn ring_edges(n: usize) -> Vec<(usize, usize)> {
    let mut e = path_edges(n);
    if n >= 3 {
        e.push((0, n - 1));
    }
    e
}

pub fn complete_edges(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn path_of_three_laplacian_and_spectrum() {
        let net = Network::from_edges(3, &path_edges(3)).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(net.p(), &expected);
        let ev = net.eigenvalues();
        assert_abs_diff_eq!(ev[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ev[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ev[2], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(net.lambda_max(), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(net.lambda_min_pos(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(net.kappa(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn two_node_laplacian() {
        let net = Network::from_edges(2, &[(0, 1)]).unwrap();
        assert_eq!(net.p(), &DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert_abs_diff_eq!(net.eigenvalues()[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(net.eigenvalues()[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_edges() {
        assert_eq!(Network::from_edges(3, &[(0, 3)]).unwrap_err(), GraphError::NodeOutOfRange(0, 3, 3));
        assert_eq!(Network::from_edges(3, &[(1, 1)]).unwrap_err(), GraphError::SelfLoop(1));
        assert_eq!(Network::from_edges(0, &[]).unwrap_err(), GraphError::Empty);
    }

    #[test]
    fn disconnected_graph_is_flagged() {
        let net = Network::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        assert!(net.disconnected_warning());
        assert!(net.lambda_min_pos().abs() < 1e-10);
        assert!(net.kappa().is_infinite());
    }

    #[test]
    fn apply_l_first_row_of_path() {
        let net = Network::from_edges(3, &path_edges(3)).unwrap();
        assert_eq!(net.apply_l(&[1.0, 0.0, 0.0], 1).unwrap(), vec![1.0, -1.0, 0.0]);
    }

    #[test]
    fn apply_l_rejects_length_mismatch() {
        let net = Network::from_edges(3, &path_edges(3)).unwrap();
        assert_eq!(
            net.apply_l(&[1.0; 5], 2).unwrap_err(),
            GraphError::LengthMismatch { expected: 6, actual: 5 }
        );
    }

    #[test]
    fn geometric_two_nodes_large_radius() {
        let g = random_geometric_graph(2, 1.5, 9, 1).unwrap();
        assert_eq!(g.edges, vec![(0, 1)]);
    }

    #[test]
    fn geometric_tiny_radius_fails_with_last_seed() {
        let err = random_geometric_graph(5, 1e-4, 100, 7).unwrap_err();
        assert_eq!(err, GraphError::NotConnected { attempts: 7, last_seed: 106 });
    }

    #[test]
    fn geometric_fifty_nodes_is_connected() {
        let g = random_geometric_graph(50, 0.3, 2024, 200).unwrap();
        let net = Network::from_edges(50, &g.edges).unwrap();
        assert!(net.is_connected());
        assert!(net.lambda_min_pos() > 1e-10);
    }

    #[test]
    fn scaling_scales_spectrum() {
        let net = Network::from_edges(3, &path_edges(3)).unwrap();
        let half = net.scaled(0.5).unwrap();
        assert_abs_diff_eq!(half.lambda_max(), 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(half.kappa(), 3.0, epsilon = 1e-12);
        assert!(net.scaled(0.0).is_err());
    }

    #[test]
    fn edge_list_parse_errors_carry_line_numbers() {
        let err = Network::from_edge_list("3\n1 2\n2 x\n").unwrap_err();
        assert!(matches!(err, GraphError::Parse { line: 3, .. }));
        let err = Network::from_edge_list("3\n1 4\n").unwrap_err();
        assert!(matches!(err, GraphError::Parse { line: 2, .. }));
    }
}
