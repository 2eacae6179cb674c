use super::*;
use crate::gcore::{Penalty, TimeGrid, VolatilityInterval};
use crate::lq::{solve_gamma, LqSolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quad_gen() -> ConvexGenerator {
    let theta = VolatilityInterval::new(1.0, 4.0).unwrap();
    ConvexGenerator::new(theta, Penalty::Quadratic { curvature: 1.0, anchor: 2.0 }).unwrap()
}

fn scalar(steps: usize, c: Coefficients, l: f64, x0: f64) -> LqProblem {
    let grid = TimeGrid::new(1.0, steps).unwrap();
    LqProblem::constant(grid, quad_gen(), c, DMatrix::from_element(1, 1, l), DVector::from_element(1, x0)).unwrap()
}

fn mc_problem(steps: usize) -> LqProblem {
    scalar(steps, Coefficients::scalar(-0.5, 1.0, 0.5, 0.0, 0.0, 1.0, 0.1, 0.5, 0.0, 0.5), 0.2, 1.0)
}

fn tanh_problem() -> LqProblem {
    scalar(100, Coefficients::scalar(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0), 0.0, 1.0)
}

fn random_problem(rng: &mut ChaCha8Rng) -> LqProblem {
    let (n, m) = (2, 2);
    let mut r = || rng.gen_range(-1.0..1.0);
    let mut c = Coefficients::zeros(n, m);
    c.a = DMatrix::from_fn(n, n, |_, _| r());
    c.b = DMatrix::from_fn(n, m, |_, _| r());
    c.drift = DVector::from_fn(n, |_, _| r());
    c.c = DMatrix::from_fn(n, n, |_, _| r());
    c.d = DMatrix::from_fn(n, m, |_, _| r());
    c.sigma = DVector::from_fn(n, |_, _| r());
    c.e = r();
    let q = DMatrix::from_fn(n, n, |_, _| r());
    c.q = &q * q.transpose();
    c.s = DMatrix::from_fn(m, n, |_, _| r());
    c.r = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]);
    let grid = TimeGrid::new(1.0, 4).unwrap();
    LqProblem::constant(grid, quad_gen(), c, DMatrix::identity(n, n), DVector::zeros(n)).unwrap()
}

#[test]
fn hamiltonian_zero_and_shapes() {
    let prob = scalar(4, Coefficients::zeros(1, 1), 0.0, 0.0);
    assert_eq!(hamiltonian(&prob, 0.3, &[0.0], 0.0, &[0.0], &[0.0], &[0.0], 2.0).unwrap(), 0.0);
    assert_eq!(hamiltonian_v(&prob, 0.3, &[0.0], &[0.0], &[0.0], &[0.0], 2.0).unwrap(), vec![0.0]);
    assert!(matches!(
        hamiltonian_v(&prob, 0.3, &[0.0, 1.0], &[0.0], &[0.0], &[0.0], 2.0),
        Err(MpError::DimensionMismatch { what: "x", expected: 1, got: 2 })
    ));
}

#[test]
fn stationary_control_zeroes_gradient() {
    let c = Coefficients::scalar(0.3, 1.5, 0.2, 0.4, 0.7, 0.9, 0.1, 1.0, 0.25, 2.0);
    let prob = scalar(4, c, 1.0, 1.0);
    let (x, p, q, gamma) = (0.8, -0.6, 1.1, 2.5);
    let v = -(1.5 * p + gamma * 0.7 * q + 0.25 * x) / 2.0;
    let g = hamiltonian_v(&prob, 0.1, &[x], &[v], &[p], &[q], gamma).unwrap();
    assert!(g[0].abs() < 1e-15);
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let prob = random_problem(&mut rng);
    let h = 1e-4;
    for _ in 0..100 {
        let mut r = |s: f64| rng.gen_range(-s..s);
        let x = [r(2.0), r(2.0)];
        let v = [r(2.0), r(2.0)];
        let p = [r(2.0), r(2.0)];
        let q = [r(2.0), r(2.0)];
        let (y, gamma, t) = (r(1.0), 1.0 + r(1.0).abs() * 3.0, r(1.0).abs());
        let g = hamiltonian_v(&prob, t, &x, &v, &p, &q, gamma).unwrap();
        for i in 0..2 {
            let (mut up, mut dn) = (v, v);
            up[i] += h;
            dn[i] -= h;
            let fd = (hamiltonian(&prob, t, &x, y, &up, &p, &q, gamma).unwrap()
                - hamiltonian(&prob, t, &x, y, &dn, &p, &q, gamma).unwrap())
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "{fd} vs {}", g[i]);
        }
    }
}

#[test]
fn adjoint_examples() {
    let prob = tanh_problem();
    let sol = solve_gamma(&prob, &LqSolverConfig::default()).unwrap();
    let fb = synthesize_control(&sol);
    let scn = expand(&sol, prob.gen()).unwrap();
    let ens = simulate_b(&scn, 8, 1);
    let paths = simulate_state(&ClosedLoop::new(&prob, &fb), &scn, &ens).unwrap();
    let adj = adjoint_lq(&prob, &sol, &paths);
    for path in 0..8 {
        for k in 0..=100 {
            let t = prob.grid().time(k);
            let x = paths.at(path, k)[0];
            assert!((adj.p_at(path, k)[0] - (1.0 - t).tanh() * x).abs() < 1e-6);
        }
        // L = 0 here; the terminal identity is exact
        assert_eq!(adj.p_at(path, 100)[0], 0.0);
    }

    let prob = mc_problem(20);
    let sol = solve_gamma(&prob, &LqSolverConfig::default()).unwrap();
    let fb = synthesize_control(&sol);
    let scn = expand(&sol, prob.gen()).unwrap();
    let ens = simulate_b(&scn, 16, 2);
    let paths = simulate_state(&ClosedLoop::new(&prob, &fb), &scn, &ens).unwrap();
    let adj = adjoint_lq(&prob, &sol, &paths);
    for path in 0..16 {
        assert_eq!(adj.p_at(path, 20)[0], 0.2 * paths.terminal(path)[0]);
        assert!(adj.q_at(path, 7)[0].is_finite());
    }

    let zero = scalar(10, Coefficients::scalar(-0.2, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0), 0.0, 1.0);
    let sol = solve_gamma(&zero, &LqSolverConfig::default()).unwrap();
    let fb = synthesize_control(&sol);
    let scn = expand(&sol, zero.gen()).unwrap();
    let paths = simulate_state(&ClosedLoop::new(&zero, &fb), &scn, &simulate_b(&scn, 4, 3)).unwrap();
    let adj = adjoint_lq(&zero, &sol, &paths);
    assert!(adj.p.iter().chain(&adj.q).all(|v| *v == 0.0));
}

#[test]
fn residual_at_optimum_and_sabotage() {
    let prob = mc_problem(100);
    let sol = solve_gamma(&prob, &LqSolverConfig::default()).unwrap();
    let rep = mp_residual(&prob, &sol, &ControlDomain::AllSpace, &[0.0], 500, 9).unwrap();
    assert!(rep.residual_unconstrained <= 1e-5 * rep.scale, "{rep:?}");
    assert!(rep.residual_constrained.is_none());
    let bad = mp_residual(&prob, &sol, &ControlDomain::AllSpace, &[0.1], 500, 9).unwrap();
    assert!(bad.residual_unconstrained >= 0.1 * prob.delta() - 1e-12);
    assert_eq!(bad.scale, rep.scale);

    let wide = ControlDomain::Box { lo: vec![-100.0], hi: vec![100.0] };
    let rep = mp_residual(&prob, &sol, &wide, &[0.0], 200, 9).unwrap();
    assert!(rep.residual_constrained.unwrap() <= 1e-5 * rep.scale);
    // clipping to a tight box is the projected optimum, so the vertex condition still holds
    let tight = ControlDomain::Box { lo: vec![-0.01], hi: vec![0.01] };
    let rep = mp_residual(&prob, &sol, &tight, &[0.0], 200, 9).unwrap();
    assert!(rep.residual_constrained.unwrap() <= 1e-5 * rep.scale);
    let rep = mp_residual(&prob, &sol, &wide, &[0.1], 200, 9).unwrap();
    assert!(rep.residual_constrained.unwrap() >= 0.1 * prob.delta());
}

#[test]
fn zero_problem_residual() {
    let zero = scalar(10, Coefficients::scalar(-0.2, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0), 0.0, 1.0);
    let sol = solve_gamma(&zero, &LqSolverConfig::default()).unwrap();
    let dom = ControlDomain::Box { lo: vec![-1.0], hi: vec![1.0] };
    let rep = mp_residual(&zero, &sol, &dom, &[0.0], 50, 1).unwrap();
    assert_eq!(rep.residual_unconstrained, 0.0);
    assert_eq!(rep.residual_constrained, Some(0.0));
}

#[test]
fn sufficiency_examples() {
    let ok = sufficiency_check(&scalar(4, Coefficients::scalar(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0), 0.0, 1.0));
    assert!(ok.all_pass());
    let cross = sufficiency_check(&scalar(4, Coefficients::scalar(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0), 0.0, 1.0));
    assert!(!cross.joint_convex.pass);
    assert!((cross.joint_convex.min_eigenvalue - (1.0 - 5f64.sqrt()) / 2.0).abs() < 1e-12);
    assert!(cross.control_coercive.pass && cross.terminal_convex.pass);
    let flat = sufficiency_check(&scalar(4, Coefficients::scalar(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0), 0.0, 1.0));
    assert!(!flat.control_coercive.pass);
    let concave = sufficiency_check(&scalar(4, Coefficients::scalar(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0), -0.5, 1.0));
    assert!(!concave.terminal_convex.pass);
}

#[test]
fn zero_direction_has_zero_slope() {
    let prob = mc_problem(20);
    let sol = solve_gamma(&prob, &LqSolverConfig::default()).unwrap();
    let mc = MonteCarlo { n_paths: 1000, seed: 4, blocks: 4 };
    let table = variational_slope(&prob, &sol, &[0.0], &[0.1, 0.01], mc, &OptimizerConfig::default()).unwrap();
    assert_eq!(table.expected, 0.0);
    assert!(table.rows.iter().all(|r| r.slope == 0.0 && r.gap == 0.0));
    let mut csv = Vec::new();
    table.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("eps,slope,expected,gap,stderr\n"));
}

#[test]
fn deterministic_slope_vanishes_at_optimum() {
    // σ = 0: the state is deterministic and u* is stationary, so E[L^u] ≈ 0 and the slope is O(ε)
    let prob = tanh_problem();
    let sol = solve_gamma(&prob, &LqSolverConfig::default()).unwrap();
    let mc = MonteCarlo { n_paths: 64, seed: 4, blocks: 4 };
    let table = variational_slope(&prob, &sol, &[1.0], &[0.1, 0.03, 0.01], mc, &OptimizerConfig::default()).unwrap();
    assert!(table.expected.abs() < 1e-2, "{table:?}");
    assert!(table.rows.windows(2).all(|w| w[1].gap <= w[0].gap));
    assert!(table.rows[2].gap <= 3.0 * table.expected_stderr + 1e-2);
}
