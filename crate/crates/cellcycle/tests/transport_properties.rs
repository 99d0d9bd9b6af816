use std::sync::OnceLock;

use cellcycle::coefficients::ModelCoefficients;
use cellcycle::eigensolver::{default_grid, solve, EigenSolution, SolverOptions};
use cellcycle::grid::Field;
use cellcycle::transport::{
    gre_entropy, simulate, weighted_distance, EntropyFunctional, SimulationOptions, TimeField,
    TransportScheme,
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

fn scaled_density(sol: &EigenSolution, factor: impl Fn(f64, f64) -> f64) -> Field {
    let g = *sol.grid();
    let mut f = sol.density.clone();
    for k in 0..g.na() {
        for i in 0..g.nx() {
            f.set(k, i, sol.density.at(k, i) * factor(g.a(k), g.x(i)));
        }
    }
    f
}

fn options(horizon: f64) -> SimulationOptions {
    SimulationOptions {
        horizon,
        ..Default::default()
    }
}

/// Largest `d(t)` over a run started from `N` on a grid with `nx` nodes.
fn stationary_departure(nx: usize, da: f64) -> f64 {
    let model = ModelCoefficients::reference();
    let opts = SolverOptions::default();
    let sol = solve(&model, &default_grid(&model, nx, da, &opts).unwrap(), &opts).unwrap();
    let run = simulate(&sol.density, &model, &sol, &options(20.0)).unwrap();
    assert!((run.projection - 1.0).abs() < 1e-9);
    run.observations
        .iter()
        .map(|o| o.distance)
        .fold(0.0, f64::max)
}

#[test]
fn eigendensity_is_stationary_to_first_order() {
    let coarse = stationary_departure(41, 0.1);
    let fine = stationary_departure(81, 0.05);
    assert!(coarse < 0.1, "{coarse}");
    assert!(fine < 0.6 * coarse, "{coarse} -> {fine}");
}

#[test]
fn doubled_eigendensity_is_the_doubled_run() {
    let s = setup();
    let one = simulate(&s.sol.density, &s.model, &s.sol, &options(10.0)).unwrap();
    let two = simulate(&s.sol.density.scaled(2.0), &s.model, &s.sol, &options(10.0)).unwrap();
    assert!((two.projection - 2.0).abs() < 1e-9);
    for (a, b) in one.observations.iter().zip(&two.observations) {
        assert!((b.distance - 2.0 * a.distance).abs() <= 1e-10 * (1.0 + a.distance));
        assert!((b.duality - 2.0 * a.duality).abs() <= 1e-10);
    }
}

#[test]
fn quadratic_entropy_of_doubled_density_is_one() {
    let s = setup();
    let h = gre_entropy(
        &s.sol.density.scaled(2.0),
        &s.sol,
        &EntropyFunctional::Quadratic,
    );
    assert!((h - 1.0).abs() < 1e-9, "{h}");
    assert!(gre_entropy(&s.sol.density, &s.sol, &EntropyFunctional::Quadratic).abs() < 1e-15);
}

#[test]
fn signed_data_keeps_duality_and_contracts_the_weighted_norm() {
    let s = setup();
    let x_max = s.sol.grid().x_max();
    let n0 = scaled_density(&s.sol, |_, x| {
        (2.0 * std::f64::consts::PI * x / x_max).cos()
    });
    let run = simulate(&n0, &s.model, &s.sol, &options(30.0)).unwrap();
    let first = &run.observations[0];
    let norm0 = weighted_distance(&n0, &s.sol, 0.0);
    let norm_end = weighted_distance(&run.last.density, &s.sol, 0.0);
    assert!(run
        .observations
        .iter()
        .all(|o| (o.duality - first.duality).abs() < 0.05 * norm0));
    assert!(norm_end <= norm0 * 1.01, "{norm0} -> {norm_end}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn comparison_principle(
        lower in prop::collection::vec(0.0..1.0_f64, 8),
        extra in prop::collection::vec(0.0..1.0_f64, 8),
        steps in 1usize..40,
    ) {
        let s = setup();
        let g = *s.sol.grid();
        let pick = |v: &[f64], x: f64| v[((x / g.x_max()) * (v.len() - 1) as f64).round() as usize];
        let small = scaled_density(&s.sol, |_, x| pick(&lower, x));
        let large = scaled_density(&s.sol, |_, x| pick(&lower, x) + pick(&extra, x));
        let scheme = TransportScheme::new(&s.model, &g, s.sol.lambda0, true).unwrap();
        let mut a = TimeField::new(small);
        let mut b = TimeField::new(large);
        for _ in 0..steps {
            a = scheme.step(&a);
            b = scheme.step(&b);
            prop_assert!(a.density.min() >= 0.0);
            for (u, v) in a.density.values().iter().zip(b.density.values()) {
                prop_assert!(u <= v);
            }
        }
    }

    #[test]
    fn positivity(values in prop::collection::vec(0.0..10.0_f64, 16), steps in 1usize..40) {
        let s = setup();
        let g = *s.sol.grid();
        let n0 = Field::from_fn(g, |a, x| {
            let j = ((x / g.x_max()) * 15.0).round() as usize;
            values[j] * (-0.1 * a).exp()
        });
        let scheme = TransportScheme::new(&s.model, &g, s.sol.lambda0, false).unwrap();
        let mut state = TimeField::new(n0);
        for _ in 0..steps {
            state = scheme.step(&state);
            prop_assert!(state.density.min() >= 0.0);
        }
    }
}
