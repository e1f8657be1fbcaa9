use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use dpp2::algorithm::{Dpp2, EtaSchedule};
use dpp2::diagnostics::optimality_gap;
use dpp2::graph::{random_geometric_graph, Network};
use dpp2::privacy::{dp_budget, dp_budget_termwise, BudgetInputs, NoiseSchedule, NoiseSource};
use dpp2::problems::quadratic_pl;

fn network(n: usize, seed: u64) -> Network {
    let g = random_geometric_graph(n, 0.7, seed, 1000).unwrap();
    Network::from_edges(n, &g.edges).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn laplacian_is_symmetric_psd_with_consensus_null_space(n in 2usize..16, d in 1usize..5, seed in any::<u64>(), c in prop::collection::vec(-100.0f64..100.0, 4)) {
        let net = network(n, seed);
        let p = net.p();
        prop_assert_eq!(p, &p.transpose());
        prop_assert!(net.eigenvalues()[0] > -1e-10);
        prop_assert!(net.lambda_min_pos() > 1e-10);
        let v: Vec<f64> = c.iter().copied().cycle().take(d).collect::<Vec<_>>().repeat(n);
        prop_assert!(net.apply_l(&v, d).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn blockwise_product_matches_kronecker(n in 2usize..12, d in 1usize..4, seed in any::<u64>(), scale in 0.1f64..2.0) {
        let net = network(n, seed).scaled(scale).unwrap();
        let v: Vec<f64> = (0..n * d).map(|i| ((i as f64) * 1.37 + seed as f64 * 1e-19).sin()).collect();
        let dense = net.p().kronecker(&DMatrix::<f64>::identity(d, d)) * DVector::from_column_slice(&v);
        let block = net.apply_l(&v, d).unwrap();
        for (a, b) in block.iter().zip(dense.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn closed_form_budget_matches_termwise_sum(
        horizon in 1u64..3000, dim in 1usize..20, alpha in 0.001f64..0.5, delta in 1e-6f64..1.0,
        m_bar in 0.1f64..1.9, u_e in 0.1f64..10.0, u_w in 0.1f64..10.0, r in 0.001f64..0.9999,
    ) {
        let inputs = BudgetInputs { horizon, dim, alpha, delta, m_bar, u_e, u_w, r };
        let closed = dp_budget(&inputs).unwrap();
        let termwise = dp_budget_termwise(&inputs).unwrap();
        match (closed, termwise) {
            (Some(a), Some(b)) if a.is_infinite() || b.is_infinite() => {
                prop_assert_eq!(a, b);
            }
            (Some(a), Some(b)) => {
                prop_assert!(a > 0.0);
                prop_assert!((a - b).abs() <= 1e-12 * b, "{} vs {}", a, b);
            }
            (None, None) => prop_assert!(alpha * m_bar >= 1.0),
            other => prop_assert!(false, "disagreement {:?}", other),
        }
    }

    #[test]
    fn budget_grows_with_horizon_and_decay(dim in 1usize..8, r in 0.05f64..0.95, horizon in 1u64..200) {
        let base = BudgetInputs { horizon, dim, alpha: 0.1, delta: 0.01, m_bar: 1.0, u_e: 1.0, u_w: 1.0, r };
        let e = dp_budget(&base).unwrap().unwrap();
        let longer = dp_budget(&BudgetInputs { horizon: horizon + 1, ..base }).unwrap().unwrap();
        let slower = dp_budget(&BudgetInputs { r: (r + 0.04).min(0.99), ..base }).unwrap().unwrap();
        prop_assert!(longer > e);
        prop_assert!(slower <= e);
    }

    #[test]
    fn dual_stays_in_laplacian_range(n in 2usize..8, d in 1usize..4, seed in any::<u64>(), u in 0.0f64..2.0, r in 0.0f64..0.99) {
        let net = network(n, seed);
        let problem = quadratic_pl(n, d, 0, seed).unwrap();
        let rho = 3.0;
        let mut alg = Dpp2::new(&problem, &net, 0.05, 0.01, rho, vec![0.5; n * d]).unwrap();
        let mut src = NoiseSource::new(NoiseSchedule::uniform(n, u, r).unwrap(), seed);
        let mut eta = EtaSchedule::Random { seed }.stream();
        let (mut w, mut e) = (vec![0.0; n * d], vec![0.0; n * d]);
        for k in 0..40 {
            src.draw(k, d, &mut w, &mut e);
            alg.step(eta.next_eta(), &w, &e).unwrap();
            let s = alg.state();
            let ld = net.apply_l(&s.d, d).unwrap();
            let scale = s.q.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (q, l) in s.q.iter().zip(&ld) {
                prop_assert!((q - rho * l).abs() <= 1e-9 * scale);
            }
            for t in 0..d {
                let col: f64 = (0..n).map(|i| s.q[i * d + t]).sum();
                prop_assert!(col.abs() <= 1e-9 * scale);
            }
        }
    }

    #[test]
    fn optimality_gap_is_nonnegative_and_zero_only_at_stationary_consensus(
        n in 1usize..6, d in 1usize..4, x in prop::collection::vec(-5.0f64..5.0, 24), g in prop::collection::vec(-5.0f64..5.0, 24),
    ) {
        let len = n * d;
        let gap = optimality_gap(&x[..len], &g[..len], d);
        prop_assert!(gap.consensus >= 0.0 && gap.stationarity >= 0.0);
        prop_assert!((gap.w_hat - gap.consensus - gap.stationarity).abs() <= 1e-12 * (1.0 + gap.w_hat));
        let same: Vec<f64> = x[..d].repeat(n);
        let balanced: Vec<f64> = (0..len).map(|i| if i / d == 0 { g[i % d] * (n as f64 - 1.0) } else { -g[i % d] }).collect();
        let zero = optimality_gap(&same, &balanced, d);
        prop_assert!(zero.w_hat <= 1e-20 + 1e-12 * g.iter().map(|v| v * v).sum::<f64>());
    }

    #[test]
    fn noise_scales_follow_the_geometric_schedule(u in 0.0f64..5.0, r in 0.0f64..0.99, k in 0u64..200) {
        let s = NoiseSchedule::uniform(3, u, r).unwrap();
        for i in 0..3 {
            let expected = r.powi(k as i32) * u;
            prop_assert!((s.theta_w(i, k) - expected).abs() <= 1e-12 * (1.0 + expected));
            prop_assert!((s.theta_e(i, k) - expected).abs() <= 1e-12 * (1.0 + expected));
        }
        prop_assert_eq!(s.u_bar(), u);
        prop_assert_eq!(s.r_bar(), r);
    }
}
