use gexp_core::lq::{solve_gamma, Coefficients, LqProblem, LqSolverConfig};
use gexp_core::scenario::{discount_weights, FnDriver};
use gexp_core::{ConvexGenerator, Penalty, TimeGrid, VolatilityInterval};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn gen(curvature: f64, anchor: f64) -> ConvexGenerator {
    let th = VolatilityInterval::new(1.0, 4.0).unwrap();
    ConvexGenerator::new(th, Penalty::Quadratic { curvature, anchor }).unwrap()
}

/// Two-dimensional problems satisfying the convexity assumptions: `Q − SᵀR⁻¹S ⪰ 0`, `R ≻ 0`, `L ⪰ 0`.
fn problem(seed: [f64; 12], curvature: f64, anchor: f64) -> LqProblem {
    let grid = TimeGrid::new(1.0, 40).unwrap();
    let mut c = Coefficients::zeros(2, 1);
    c.a = DMatrix::from_row_slice(2, 2, &[seed[0], seed[1], seed[2], seed[3]]);
    c.b = DMatrix::from_row_slice(2, 1, &[seed[4], 1.0]);
    c.drift = DVector::from_row_slice(&[seed[5], seed[6]]);
    c.sigma = DVector::from_row_slice(&[seed[7], seed[8]]);
    c.e = seed[9] * 0.3;
    c.r = DMatrix::from_element(1, 1, 0.5 + seed[10].abs());
    c.s = DMatrix::from_row_slice(1, 2, &[0.3 * seed[11], 0.0]);
    let base = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5 + seed[10].abs()]);
    c.q = base + c.s.transpose() * c.r.clone().try_inverse().unwrap() * &c.s;
    let l = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]);
    LqProblem::constant(grid, gen(curvature, anchor), c, l, DVector::from_row_slice(&[1.0, -1.0])).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fixed_point_invariants(
        seed in proptest::array::uniform12(-1.0..1.0f64),
        curvature in 0.2..3.0f64,
        anchor in 1.0..4.0f64,
    ) {
        let prob = problem(seed, curvature, anchor);
        let sol = solve_gamma(&prob, &LqSolverConfig::default()).unwrap();
        prop_assert!(sol.gamma.iter().all(|g| (1.0..=4.0).contains(g)));
        for run in &sol.runs {
            prop_assert!(run.residual < 1e-6);
        }
        prop_assert!(sol.summary().start_gap < 1e-6);
        for k in 0..=40 {
            let p = sol.p.node(k);
            prop_assert_eq!(&p, &p.transpose());
            let eig = p.symmetric_eigen().eigenvalues.min();
            prop_assert!(eig >= -1e-10, "{}", eig);
        }
        let x0 = prob.x0();
        let direct = 0.5 * (x0.transpose() * sol.p.node(0) * x0)[(0, 0)]
            + (sol.phi.node(0).transpose() * x0)[(0, 0)]
            + sol.l.node(0)[(0, 0)];
        prop_assert!((direct - sol.j_analytic).abs() < 1e-12);
    }

    #[test]
    fn discount_monotone_iff_nonnegative(rates in proptest::collection::vec(-1.0..1.0f64, 10)) {
        let driver = FnDriver::new(rates.clone(), 0.1, |_, _| (0.0, 0.0), |_| 0.0);
        let w = discount_weights(&driver, 10, 0.1);
        prop_assert_eq!(w[0], 1.0);
        prop_assert!(w.iter().all(|v| *v > 0.0));
        let increasing = w.windows(2).all(|p| p[1] >= p[0]);
        prop_assert_eq!(increasing, rates.iter().all(|r| *r >= 0.0));
    }
}
