//! Time integration of the renewal transport equation
//! `d_t n + d_a n + d_x (Gamma n) + (B + lambda0 s) n = 0`,
//! `n(t, 0, x) = 2 int int b(a, x, y) n(t, a, y) dy da`,
//! where `s = 1` for the renormalised problem and `0` otherwise.
//!
//! Age is shifted exactly by one node per step (`dt = da`); content uses a
//! conservative upwind flux on the dual cells of the grid, so nodal values
//! are cell averages and positivity holds under the step condition checked
//! at construction.

use rayon::prelude::*;

use crate::coefficients::{Deposit, ModelCoefficients};
use crate::eigensolver::EigenSolution;
use crate::error::{Error, Result};
use crate::grid::{Field, Grid};

/// Convex function `H` of the relative entropy `int int N phi H(n / N)`.
#[derive(Debug, Clone, PartialEq)]
pub enum EntropyFunctional {
    /// `(u - 1)^2`.
    Quadratic,
    /// `|u - 1|`.
    Absolute,
    /// Piecewise-linear through `(u, H(u))` points, extended linearly.
    Tabulated(Vec<(f64, f64)>),
}

impl EntropyFunctional {
    /// Piecewise-linear `H`; points are sorted and must describe a convex
    /// function.
    pub fn tabulated(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 || points.iter().any(|(u, h)| !u.is_finite() || !h.is_finite()) {
            return Err(Error::param(
                "entropy.points",
                "needs at least two finite points",
            ));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let slopes: Vec<f64> = points
            .windows(2)
            .map(|w| {
                if w[1].0 == w[0].0 {
                    f64::NAN
                } else {
                    (w[1].1 - w[0].1) / (w[1].0 - w[0].0)
                }
            })
            .collect();
        if slopes.iter().any(|s| s.is_nan()) {
            return Err(Error::param("entropy.points", "abscissae must be distinct"));
        }
        if slopes
            .windows(2)
            .any(|s| s[1] < s[0] - 1e-12 * (1.0 + s[0].abs()))
        {
            return Err(Error::param("entropy.points", "function is not convex"));
        }
        Ok(EntropyFunctional::Tabulated(points))
    }

    pub fn eval(&self, u: f64) -> f64 {
        match self {
            EntropyFunctional::Quadratic => (u - 1.0) * (u - 1.0),
            EntropyFunctional::Absolute => (u - 1.0).abs(),
            EntropyFunctional::Tabulated(p) => {
                let n = p.len();
                let j = p.partition_point(|q| q.0 <= u).clamp(1, n - 1);
                let (u0, h0) = p[j - 1];
                let (u1, h1) = p[j];
                h0 + (h1 - h0) * (u - u0) / (u1 - u0)
            }
        }
    }
}

/// Density `n(t, a, x)` at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeField {
    pub t: f64,
    pub density: Field,
}

impl TimeField {
    pub fn new(density: Field) -> Self {
        TimeField { t: 0.0, density }
    }
}

/// Observables recorded along a run; all but `mass` are evaluated on the
/// renormalised density `n exp(-lambda0 t)` (or `n` itself when the run is
/// already renormalised).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub t: f64,
    /// `int int n`.
    pub mass: f64,
    /// `int int n~ phi`.
    pub duality: f64,
    pub entropy: f64,
    /// `int int |n~ - m0 N| phi`.
    pub distance: f64,
}

/// The precomputed first-order scheme on one grid.
#[derive(Debug, Clone)]
pub struct TransportScheme {
    grid: Grid,
    lambda0: f64,
    renormalize: bool,
    /// `Gamma` at the half ages and dual-cell interfaces, `(na - 1) x (nx - 1)`.
    velocity: Vec<f64>,
    /// `exp(-(B + lambda0 s) dt)` at the half ages, `(na - 1) x nx`.
    decay: Vec<f64>,
    /// `B` at the nodes, jump-averaged.
    rates: Vec<f64>,
    /// `projection[j * nx + i] = (1/w_i) int hat_i k(., y_j)`.
    projection: Vec<f64>,
}

/// Largest explicit renewal factor `da B(0, .)` for the fixed-point solve
/// of the age-zero row.
const RENEWAL_CONTRACTION: f64 = 0.9;

impl TransportScheme {
    /// Build the scheme; fails with [`Error::Cfl`] when a content step
    /// could create negative values.
    pub fn new(
        model: &ModelCoefficients,
        grid: &Grid,
        lambda0: f64,
        renormalize: bool,
    ) -> Result<Self> {
        if (grid.x_max() - model.x_max()).abs() > 1e-12 * model.x_max() {
            return Err(Error::param(
                "grid.x_max",
                "must equal the growth field's bound",
            ));
        }
        let (nx, na) = (grid.nx(), grid.na());
        let dt = grid.da();
        let dx = grid.dx();
        let shift = if renormalize { lambda0 } else { 0.0 };
        let mut velocity = Vec::with_capacity((na - 1) * (nx - 1));
        let mut decay = Vec::with_capacity((na - 1) * nx);
        for k in 0..na - 1 {
            let a = grid.a(k) + 0.5 * dt;
            for i in 0..nx - 1 {
                velocity.push(model.growth.rate(a, (i as f64 + 0.5) * dx)?);
            }
            for i in 0..nx {
                decay.push((-(model.division.value(a, grid.x(i)) + shift) * dt).exp());
            }
        }
        for k in 0..na - 1 {
            let v = &velocity[k * (nx - 1)..(k + 1) * (nx - 1)];
            for i in 0..nx {
                let out = if i + 1 < nx { v[i].max(0.0) } else { 0.0 };
                let back = if i > 0 { (-v[i - 1]).max(0.0) } else { 0.0 };
                let courant = dt * (out + back) / grid.wx(i);
                if courant > 1.0 {
                    return Err(Error::Cfl {
                        courant,
                        age: grid.a(k),
                    });
                }
            }
        }
        let mut rates = Vec::with_capacity(na * nx);
        for k in 0..na {
            for i in 0..nx {
                rates.push(model.division.node_value(grid.a(k), grid.x(i)));
            }
        }
        let first_row = rates[..nx].iter().fold(0.0_f64, |m, b| m.max(*b));
        if dt * first_row > RENEWAL_CONTRACTION {
            return Err(Error::Resolution(format!(
                "age step {dt} is too long for the division rate {first_row} at age 0"
            )));
        }
        let shape = model.kernel.shape();
        let mut projection = vec![0.0; nx * nx];
        for j in 0..nx {
            let mut acc = Deposit::new(nx);
            acc.project(grid, &shape, grid.x(j), 1.0);
            let row = &mut projection[j * nx..(j + 1) * nx];
            acc.add_into(row);
            row.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok(TransportScheme {
            grid: *grid,
            lambda0,
            renormalize,
            velocity,
            decay,
            rates,
            projection,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.grid.da()
    }

    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }

    pub fn renormalized(&self) -> bool {
        self.renormalize
    }

    /// `n(0, .)` from the rows `k >= 1` of `values`; the age-zero term of
    /// the trapezoid sum is handled by fixed-point iteration.
    pub fn renewal(&self, values: &mut [f64]) {
        let g = &self.grid;
        let (nx, na) = (g.nx(), g.na());
        let mut older = vec![0.0; nx];
        for k in 1..na {
            let wa = g.wa(k);
            let row = &values[k * nx..(k + 1) * nx];
            let b = &self.rates[k * nx..(k + 1) * nx];
            for j in 0..nx {
                older[j] += wa * b[j] * row[j];
            }
        }
        let wa0 = g.wa(0);
        let b0 = &self.rates[..nx];
        let implicit = b0.iter().any(|b| *b > 0.0);
        let mut n0 = vec![0.0; nx];
        let mut births = vec![0.0; nx];
        for _ in 0..100 {
            for j in 0..nx {
                births[j] = 2.0 * g.wx(j) * (older[j] + wa0 * b0[j] * n0[j]);
            }
            let mut next = vec![0.0; nx];
            for (j, m) in births.iter().enumerate() {
                if *m != 0.0 {
                    let p = &self.projection[j * nx..(j + 1) * nx];
                    for (o, q) in next.iter_mut().zip(p) {
                        *o += m * q;
                    }
                }
            }
            let change = next
                .iter()
                .zip(&n0)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let scale = next.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            n0 = next;
            if !implicit || change <= 1e-15 * scale {
                break;
            }
        }
        values[..nx].copy_from_slice(&n0);
    }

    /// One step from `old` into `new` (both age-major).
    pub fn advance(&self, old: &[f64], new: &mut [f64]) {
        self.shift(old, new);
        self.renewal(new);
    }

    /// Rows `k >= 1` of a step: age shift, content flux and decay. Row 0 of
    /// `new` is left untouched.
    pub fn shift(&self, old: &[f64], new: &mut [f64]) {
        let g = &self.grid;
        let nx = g.nx();
        let dt = g.da();
        let wx = g.x_weights();
        new.par_chunks_mut(nx)
            .enumerate()
            .skip(1)
            .for_each(|(k, row)| {
                let src = &old[(k - 1) * nx..k * nx];
                let vel = &self.velocity[(k - 1) * (nx - 1)..k * (nx - 1)];
                let decay = &self.decay[(k - 1) * nx..k * nx];
                let mut left = 0.0;
                for i in 0..nx {
                    let right = if i + 1 < nx {
                        let v = vel[i];
                        v.max(0.0) * src[i] - (-v).max(0.0) * src[i + 1]
                    } else {
                        0.0
                    };
                    row[i] = (src[i] - dt / wx[i] * (right - left)) * decay[i];
                    left = right;
                }
            });
    }

    pub fn step(&self, state: &TimeField) -> TimeField {
        let mut next = Field::zeros(self.grid);
        self.advance(state.density.values(), next.values_mut());
        TimeField {
            t: state.t + self.dt(),
            density: next,
        }
    }

    /// Factor turning `n` into the renormalised density at time `t`.
    pub fn renormalisation(&self, t: f64) -> f64 {
        if self.renormalize {
            1.0
        } else {
            (-self.lambda0 * t).exp()
        }
    }
}

/// One step of the scheme built on the state's grid.
pub fn step(
    state: &TimeField,
    model: &ModelCoefficients,
    lambda0: f64,
    renormalize: bool,
) -> Result<TimeField> {
    let scheme = TransportScheme::new(model, state.density.grid(), lambda0, renormalize)?;
    Ok(scheme.step(state))
}

/// `int int N phi H(n / N)` over the points where `N > 0`.
pub fn gre_entropy(density: &Field, reference: &EigenSolution, h: &EntropyFunctional) -> f64 {
    let n_ref = &reference.density;
    let phi = &reference.adjoint;
    let g = density.grid();
    let mut total = 0.0;
    for k in 0..g.na() {
        let mut s = 0.0;
        for i in 0..g.nx() {
            let nn = n_ref.at(k, i);
            if nn > 0.0 {
                s += g.wx(i) * nn * phi.at(k, i) * h.eval(density.at(k, i) / nn);
            }
        }
        total += g.wa(k) * s;
    }
    total
}

/// `int int |n - m0 N| phi`.
pub fn weighted_distance(density: &Field, reference: &EigenSolution, m0: f64) -> f64 {
    let n_ref = reference.density.values();
    let phi = reference.adjoint.values();
    let diff: Vec<f64> = density
        .values()
        .iter()
        .zip(n_ref)
        .zip(phi)
        .map(|((n, nn), p)| (n - m0 * nn).abs() * p)
        .collect();
    density.grid().integrate(&diff)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOptions {
    pub horizon: f64,
    pub entropy: EntropyFunctional,
    /// Solve the equation shifted by `lambda0`.
    pub renormalize: bool,
    /// Times at which the density is stored.
    pub snapshot_times: Vec<f64>,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions {
            horizon: 100.0,
            entropy: EntropyFunctional::Quadratic,
            renormalize: true,
            snapshot_times: Vec::new(),
        }
    }
}

/// A run of the transport scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Observation>,
    /// `m0 = int int n0 phi`.
    pub projection: f64,
    pub snapshots: Vec<TimeField>,
    pub last: TimeField,
}

impl Trajectory {
    /// `max_t |D(t) - D(0)| / |D(0)|`.
    pub fn duality_drift(&self) -> f64 {
        let d0 = self.observations[0].duality;
        self.observations
            .iter()
            .map(|o| (o.duality - d0).abs())
            .fold(0.0, f64::max)
            / d0.abs()
    }

    /// Largest one-step increase of the entropy.
    pub fn max_entropy_increase(&self) -> f64 {
        self.observations
            .windows(2)
            .map(|w| w[1].entropy - w[0].entropy)
            .fold(0.0, f64::max)
    }
}

fn observe(
    scheme: &TransportScheme,
    state: &TimeField,
    sol: &EigenSolution,
    m0: f64,
    h: &EntropyFunctional,
) -> Observation {
    let mass = state.density.integral();
    let scaled = state.density.scaled(scheme.renormalisation(state.t));
    Observation {
        t: state.t,
        mass,
        duality: scaled.dot(&sol.adjoint),
        entropy: gre_entropy(&scaled, sol, h),
        distance: weighted_distance(&scaled, sol, m0),
    }
}

/// Run from `n0` up to `options.horizon`, recording every step.
pub fn simulate(
    n0: &Field,
    model: &ModelCoefficients,
    sol: &EigenSolution,
    options: &SimulationOptions,
) -> Result<Trajectory> {
    if n0.grid() != sol.grid() {
        return Err(Error::param(
            "initial",
            "initial density must live on the eigensolution's grid",
        ));
    }
    if !(options.horizon >= 0.0) {
        return Err(Error::param("simulate.horizon", "must be >= 0"));
    }
    let scheme = TransportScheme::new(model, n0.grid(), sol.lambda0, options.renormalize)?;
    let steps = (options.horizon / scheme.dt() - 1e-9).ceil().max(0.0) as usize;
    let m0 = n0.dot(&sol.adjoint);
    let mut state = TimeField::new(n0.clone());
    let mut observations = Vec::with_capacity(steps + 1);
    observations.push(observe(&scheme, &state, sol, m0, &options.entropy));
    let mut pending: Vec<f64> = options.snapshot_times.clone();
    pending.sort_by(|a, b| b.total_cmp(a));
    let mut snapshots = Vec::new();
    let mut scratch = Field::zeros(*n0.grid());
    let take = |state: &TimeField, pending: &mut Vec<f64>, snapshots: &mut Vec<TimeField>| {
        while pending
            .last()
            .is_some_and(|t| *t <= state.t + 1e-9 * scheme.dt())
        {
            pending.pop();
            snapshots.push(state.clone());
        }
    };
    take(&state, &mut pending, &mut snapshots);
    for _ in 0..steps {
        scheme.advance(state.density.values(), scratch.values_mut());
        std::mem::swap(&mut state.density, &mut scratch);
        state.t += scheme.dt();
        observations.push(observe(&scheme, &state, sol, m0, &options.entropy));
        take(&state, &mut pending, &mut snapshots);
    }
    Ok(Trajectory {
        observations,
        projection: m0,
        snapshots,
        last: state,
    })
}
