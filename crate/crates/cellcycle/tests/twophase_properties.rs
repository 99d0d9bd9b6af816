use std::sync::OnceLock;

use cellcycle::coefficients::{ModelCoefficients, Recruitment, Transition, TwoPhaseParams};
use cellcycle::eigensolver::{default_grid, solve, EigenSolution, SolverOptions};
use cellcycle::grid::Field;
use cellcycle::transport::{TimeField, TransportScheme};
use cellcycle::twophase::{
    classify_regime, dispersion_root, growth_exponent, lambda_from_lambda0, lambda_zero_criterion,
    limit_eigensystem, proliferating_start, simulate_twophase, Regime, RootForm, TwoPhaseOptions,
};
use proptest::prelude::*;

struct Setup {
    model: ModelCoefficients,
    sol: EigenSolution,
}

fn setup() -> &'static Setup {
    static SETUP: OnceLock<Setup> = OnceLock::new();
    SETUP.get_or_init(|| {
        let model = ModelCoefficients::reference();
        let opts = SolverOptions::default();
        let grid = default_grid(&model, 41, 0.1, &opts).unwrap();
        let sol = solve(&model, &grid, &opts).unwrap();
        Setup { model, sol }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dispersion_root_solves_the_link(
        lambda0 in 0.0..5.0_f64,
        d1 in 0.0..5.0_f64,
        d2 in 0.0..5.0_f64,
        l in 0.0..5.0_f64,
        g in 0.0..10.0_f64,
    ) {
        let r = lambda_from_lambda0(lambda0, d1, d2, l, g).unwrap();
        prop_assert!(r.residual(d1, d2, l) < 1e-10);
        prop_assert!(r.lambda > -(g + d2));
        let radical = dispersion_root(lambda0, d1, d2, l, g, RootForm::Radical).unwrap();
        let rationalized = dispersion_root(lambda0, d1, d2, l, g, RootForm::Rationalized).unwrap();
        prop_assert!((radical - rationalized).abs() < 1e-10);
        let disc = (r.g_plus + r.l_plus).powi(2) - 4.0 * (r.d_plus * r.g_plus + l * d2);
        prop_assert!(disc >= -1e-12);
        if lambda0 > 1e-9 {
            prop_assert!(r.lambda > r.lower_bound);
        }
    }

    #[test]
    fn engineered_zero_is_detected(d1 in 0.0..5.0_f64, d2 in 0.0..5.0_f64, l in 0.0..5.0_f64, g in 0.01..10.0_f64) {
        let lambda0 = d1 + l * d2 / (g + d2);
        let z = lambda_zero_criterion(lambda0, d1, d2, l, g, 1e-12).unwrap();
        prop_assert!(z.holds);
        prop_assert!(lambda_from_lambda0(lambda0, d1, d2, l, g).unwrap().lambda.abs() < 1e-8);
    }

    #[test]
    fn positive_growth_below_the_death_rate(lambda0 in 0.01..5.0_f64, share in 0.0..0.99_f64, l in 0.0..5.0_f64, g in 0.01..10.0_f64) {
        let d1 = share * lambda0;
        prop_assert!(lambda_from_lambda0(lambda0, d1, 0.0, l, g).unwrap().lambda > 0.0);
        prop_assert!(!lambda_zero_criterion(lambda0, d1, 0.0, l, g, 1e-12).unwrap().holds || l == 0.0 && d1 == lambda0);
    }
}

#[test]
fn decoupled_system_is_the_one_phase_run() {
    let s = setup();
    let params = TwoPhaseParams::new(
        0.0,
        0.0,
        Transition::Constant(0.0),
        Recruitment::new(8.0, 0.0, 1.0, 1.0).unwrap(),
    )
    .unwrap();
    let (p0, q0) = proliferating_start(&s.sol);
    let options = TwoPhaseOptions {
        horizon: 20.0,
        record_every: 1,
        ..Default::default()
    };
    let run = simulate_twophase(&params, &s.model, &p0, &q0, None, &options).unwrap();
    let scheme = TransportScheme::new(&s.model, s.sol.grid(), 0.0, false).unwrap();
    let mut state = TimeField::new(p0);
    for r in &run.records[1..] {
        state = scheme.step(&state);
        assert!((r.proliferating - state.density.integral()).abs() <= 1e-12 * r.proliferating);
        assert_eq!(r.quiescent, 0.0);
    }
    assert_eq!(run.last.proliferating, state.density);
}

#[test]
fn quiescent_cells_decay_pointwise_without_transition() {
    let s = setup();
    let g = *s.sol.grid();
    let d2 = 0.3;
    let params = TwoPhaseParams::new(
        0.0,
        d2,
        Transition::Constant(0.0),
        Recruitment::new(2.0, 0.5, 1.0, 2.0).unwrap(),
    )
    .unwrap();
    let p0 = Field::zeros(g);
    let q0 = Field::from_fn(g, |a, x| (1.0 + x) * (-0.05 * a).exp());
    let options = TwoPhaseOptions {
        horizon: 5.0,
        record_every: 1,
        ..Default::default()
    };
    let run = simulate_twophase(&params, &s.model, &p0, &q0, None, &options).unwrap();
    // explicit Euler oracle from the recorded recruitment history
    let dt = g.da();
    let factor: f64 = run.records[..run.records.len() - 1]
        .iter()
        .map(|r| 1.0 - dt * (r.recruitment + d2))
        .product();
    let rates: Vec<f64> = run.records[..run.records.len() - 1]
        .iter()
        .map(|r| dt * (r.recruitment + d2))
        .collect();
    let integral: f64 = rates.iter().sum();
    // |ln(1 - z) + z| <= z^2 / (2 (1 - z)) per step
    let gap: f64 = rates.iter().map(|z| z * z / (2.0 * (1.0 - z))).sum();
    for (q, q_start) in run.last.quiescent.values().iter().zip(q0.values()) {
        assert!((q - q_start * factor).abs() <= 1e-12 * q_start.max(1e-300));
    }
    assert!((factor.ln() + integral).abs() <= gap);
}

#[test]
fn recruitment_falls_while_the_population_grows() {
    let s = setup();
    let params = TwoPhaseParams::reference(0.01, 1);
    let (p0, q0) = proliferating_start(&s.sol);
    let options = TwoPhaseOptions {
        horizon: 1500.0,
        record_every: 10,
        ..Default::default()
    };
    let run = simulate_twophase(&params, &s.model, &p0, &q0, None, &options).unwrap();
    for w in run.records.windows(2) {
        if w[1].population >= w[0].population {
            assert!(w[1].recruitment <= w[0].recruitment);
        }
    }
    let (t, n) = (run.times(), run.populations());
    assert!(n[n.len() - 1] > 10.0 * n[0]);
    assert!(growth_exponent(&t, &n, None).unwrap().slope > 0.0);
    assert_eq!(
        classify_regime(&t, &n, None).unwrap().regime,
        Regime::PolynomialGrowth
    );
}

#[test]
fn large_death_rate_decays() {
    let s = setup();
    let params = TwoPhaseParams::reference(0.05, 1);
    let (p0, q0) = proliferating_start(&s.sol);
    let run = simulate_twophase(
        &params,
        &s.model,
        &p0,
        &q0,
        None,
        &TwoPhaseOptions::default(),
    )
    .unwrap();
    let (t, n) = (run.times(), run.populations());
    assert!(n[n.len() - 1] < n[0]);
    let fit = classify_regime(&t, &n, None).unwrap();
    assert_eq!(fit.regime, Regime::ExponentialDecay);
    assert!(fit.exponential.slope < 0.0);
}

#[test]
fn limit_system_relations() {
    let s = setup();
    let params = TwoPhaseParams::reference(0.01, 1);
    let lim = limit_eigensystem(&params, &s.sol).unwrap();
    assert!((lim.mass() - 1.0).abs() < 1e-10);
    assert!((lim.pairing() - 1.0).abs() < 1e-10);
    assert!((lim.ratio - (lim.transition + 0.01 - s.sol.lambda0)).abs() < 1e-15);
    for (q, p) in lim
        .quiescent
        .values()
        .iter()
        .zip(lim.proliferating.values())
    {
        assert!((q - lim.ratio * p).abs() <= 1e-12 * p.abs().max(1e-300));
    }
    for (psi, phi) in lim
        .adjoint_quiescent
        .values()
        .iter()
        .zip(lim.adjoint_proliferating.values())
    {
        assert!((psi - lim.ratio / lim.transition * phi).abs() <= 1e-12 * phi.abs().max(1e-300));
    }
    let too_much = TwoPhaseParams::reference(0.05, 1);
    assert!(limit_eigensystem(&too_much, &s.sol).is_err());
}
