//! Principal eigenelements `(lambda0, N, phi)`.
//!
//! Integrating the stationary equation along characteristics turns it into
//! a fixed point for the age-zero profile,
//! `N0(x) = int K_lambda(x, y) N0(y) dy` with
//! `K_lambda(x, y) = 2 int_0^A b(a, x, X(a, y)) exp(-lambda a - int_0^a B) da`.
//! The operator is discretised by collocation on the content grid with the
//! age integral folded into every entry; `lambda0` is the root of
//! `mu(lambda) = 1` where `mu` is the spectral radius.
//!
//! A small regularisation `b + eps / x_max`, `B + eps` makes the matrix
//! strictly positive. `lambda` is solved for a decreasing schedule of `eps`
//! and extrapolated linearly to `eps = 0`.

use rayon::prelude::*;

use crate::characteristics::{
    check_weak_assumptions, CharacteristicTable, FlowSolver, StepControl, TAIL_TOLERANCE,
};
use crate::coefficients::{Deposit, KernelShape, ModelCoefficients};
use crate::error::{Error, Result};
use crate::grid::{Field, Grid};

/// Dense square matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::param("matrix", "rows must form a nonempty square"));
        }
        Ok(SquareMatrix {
            n,
            data: rows.concat(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.n)
            .map(|row| row.iter().zip(v).map(|(m, x)| m * x).sum())
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Stopping rule of the power iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    /// Bound on `|M v - mu v| / |M v|` (max norm).
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PowerIteration {
    fn default() -> Self {
        PowerIteration {
            tolerance: 1e-10,
            max_iterations: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Eigenpair {
    pub value: f64,
    /// Normalised to `sum_i w_i v_i = 1`.
    pub vector: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Dominant eigenpair of a nonnegative matrix by power iteration.
///
/// `weights` define the normalisation of the returned vector; `start`
/// defaults to a constant vector.
pub fn leading_eigenpair(
    matrix: &SquareMatrix,
    weights: &[f64],
    start: Option<&[f64]>,
    control: &PowerIteration,
) -> Result<Eigenpair> {
    let n = matrix.dim();
    if weights.len() != n {
        return Err(Error::param(
            "weights",
            "length differs from the matrix size",
        ));
    }
    let dot = |v: &[f64]| -> f64 { v.iter().zip(weights).map(|(a, b)| a * b).sum() };
    let mut v: Vec<f64> = match start {
        Some(s) if s.len() == n && s.iter().all(|x| *x >= 0.0) && dot(s) > 0.0 => s.to_vec(),
        Some(_) => {
            return Err(Error::param(
                "start",
                "needs a nonnegative vector with positive mass",
            ))
        }
        None => vec![1.0; n],
    };
    let mass = dot(&v);
    v.iter_mut().for_each(|x| *x /= mass);
    let mut residual = f64::INFINITY;
    for it in 1..=control.max_iterations {
        let y = matrix.apply(&v);
        let mu = dot(&y);
        if !(mu > 0.0) {
            return Ok(Eigenpair {
                value: 0.0,
                vector: v,
                iterations: it,
                residual: 0.0,
            });
        }
        let scale = y.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        residual = y
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - mu * b).abs())
            .fold(0.0, f64::max)
            / scale;
        v = y.into_iter().map(|x| x / mu).collect();
        if residual <= control.tolerance {
            return Ok(Eigenpair {
                value: mu,
                vector: v,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: control.max_iterations,
        residual,
    })
}

/// Collocation matrix `M_ij = K(x_i, y_j) w_j` of the birth operator.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelOperator {
    pub lambda: f64,
    pub epsilon: f64,
    pub matrix: SquareMatrix,
    /// Content quadrature weights `w_j`.
    pub weights: Vec<f64>,
    /// Share of the births (without the regularisation) that the frozen
    /// tail beyond the last age node contributes.
    pub tail_fraction: f64,
}

impl KernelOperator {
    pub fn leading_eigenpair(
        &self,
        start: Option<&[f64]>,
        control: &PowerIteration,
    ) -> Result<Eigenpair> {
        leading_eigenpair(&self.matrix, &self.weights, start, control)
    }

    /// `int K(x, y) dx` for every column `y_j`.
    pub fn column_integrals(&self) -> Vec<f64> {
        let n = self.matrix.dim();
        (0..n)
            .map(|j| {
                (0..n)
                    .map(|i| self.weights[i] * self.matrix.get(i, j))
                    .sum::<f64>()
                    / self.weights[j]
            })
            .collect()
    }

    /// The operator `phi -> int phi(x) K(x, .) dx` in the same collocation,
    /// `M*_ji = w_i K(x_i, y_j)`.
    pub fn adjoint(&self) -> KernelOperator {
        let n = self.matrix.dim();
        let mut t = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                t.set(
                    j,
                    i,
                    self.matrix.get(i, j) * self.weights[i] / self.weights[j],
                );
            }
        }
        KernelOperator {
            matrix: t,
            ..self.clone()
        }
    }
}

/// Knobs of the eigenvalue solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Regularisation schedule; `lambda0` is extrapolated from the two
    /// smallest values.
    pub epsilons: Vec<f64>,
    /// Target `|mu - 1|` of the bisection.
    pub tolerance: f64,
    pub power: PowerIteration,
    /// Close the age integral beyond the last node with frozen
    /// coefficients (rates with unbounded age support only).
    pub tail_closure: bool,
    pub control: StepControl,
    /// Launches per content cell used to rebuild `N` and `phi`.
    pub launch_refinement: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            epsilons: vec![1e-2, 1e-3, 1e-4],
            tolerance: 1e-10,
            power: PowerIteration::default(),
            tail_closure: true,
            control: StepControl::default(),
            launch_refinement: 4,
        }
    }
}

/// Largest share of births the tail closure may carry before the age
/// range is declared too short.
pub const TAIL_LIMIT: f64 = 1e-3;

/// `(1 - exp(-z)) / z`.
fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 - 0.5 * z
    } else {
        -(-z).exp_m1() / z
    }
}

/// `int_0^1 t exp(-z t) dt`.
fn phi2(z: f64) -> f64 {
    if z.abs() < 1e-2 {
        0.5 - z / 3.0 + z * z / 8.0 - z * z * z / 30.0
    } else {
        (-(-z).exp_m1() - z * (-z).exp()) / (z * z)
    }
}

/// Age nodes carrying the operator: the grid's, cut at the end of a
/// compact age support.
fn operator_ages(model: &ModelCoefficients, grid: &Grid) -> Result<Vec<f64>> {
    let nodes = grid.a_nodes();
    match model.division.support_end() {
        Some(end) => {
            if grid.a_max() < end * (1.0 - 1e-12) {
                return Err(Error::Resolution(format!(
                    "a_max = {} stops before the end of the division window at {end}",
                    grid.a_max()
                )));
            }
            let mut ages: Vec<f64> = nodes
                .into_iter()
                .filter(|a| *a < end * (1.0 - 1e-12))
                .collect();
            ages.push(end);
            Ok(ages)
        }
        None => Ok(nodes),
    }
}

/// The lambda- and eps-independent part of the birth operator: every
/// characteristic launched from a content node, sampled on the age nodes.
#[derive(Debug, Clone)]
pub struct BirthOperator<'m> {
    model: &'m ModelCoefficients,
    grid: Grid,
    table: CharacteristicTable,
    shape: KernelShape,
    closure: bool,
    end_rates: Vec<f64>,
}

impl<'m> BirthOperator<'m> {
    pub fn new(model: &'m ModelCoefficients, grid: &Grid, options: &SolverOptions) -> Result<Self> {
        if (grid.x_max() - model.x_max()).abs() > 1e-12 * model.x_max() {
            return Err(Error::param(
                "grid.x_max",
                format!("must equal the growth field's bound {}", model.x_max()),
            ));
        }
        let ages = operator_ages(model, grid)?;
        let launches = grid.x_nodes();
        let table = CharacteristicTable::trace(
            &model.growth,
            &model.division,
            &launches,
            &ages,
            &options.control,
        )?;
        let closure = options.tail_closure && model.division.support_end().is_none();
        let last = ages.len() - 1;
        let a_end = ages[last];
        let end_rates = (0..launches.len())
            .map(|j| {
                model
                    .division
                    .value(a_end, table.positions[table.index(j, last)])
            })
            .collect();
        Ok(BirthOperator {
            model,
            grid: *grid,
            table,
            shape: model.kernel.shape(),
            closure,
            end_rates,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn compact_support(&self) -> bool {
        self.model.division.support_end().is_some()
    }

    /// Column `y_j` of `K`, the births of the regularisation excluded, plus
    /// the regularisation survival integral and the closure share.
    fn column(&self, j: usize, lambda: f64, eps: f64, acc: &mut Deposit) -> (f64, f64, f64) {
        let t = &self.table;
        let ages = &t.ages;
        let g = &self.grid;
        let dx = g.dx();
        let rate = lambda + eps;
        let mut survival = 0.0;
        let mut births = 0.0;
        for k in 0..ages.len() - 1 {
            let (i0, i1) = (t.index(j, k), t.index(j, k + 1));
            let da = ages[k + 1] - ages[k];
            if da <= 0.0 {
                continue;
            }
            let (x0, x1) = (t.positions[i0], t.positions[i1]);
            let (h0, h1) = (t.hazard[i0], t.hazard[i1]);
            let bbar = ((h1 - h0) / da).max(0.0);
            let c = rate + bbar;
            let m = ((x1 - x0).abs() / dx).ceil().clamp(1.0, 64.0) as usize;
            let step = da / m as f64;
            let decay = (-c * step).exp();
            let f1 = phi1(c * step) * step;
            let mut base = (-rate * ages[k] - h0).exp();
            for l in 0..m {
                let weight = base * f1;
                survival += weight;
                let omega = bbar * weight;
                if omega > 0.0 {
                    births += 2.0 * omega;
                    let xa = x0 + (x1 - x0) * l as f64 / m as f64;
                    let xb = x0 + (x1 - x0) * (l + 1) as f64 / m as f64;
                    acc.project(g, &self.shape, xa, omega);
                    acc.project(g, &self.shape, xb, omega);
                }
                base *= decay;
            }
        }
        let mut tail = 0.0;
        if self.closure {
            let last = ages.len() - 1;
            let idx = t.index(j, last);
            let b_end = self.end_rates[j];
            let denom = rate + b_end;
            let base = (-rate * ages[last] - t.hazard[idx]).exp();
            if denom > 0.0 && base > 0.0 {
                survival += base / denom;
                tail = 2.0 * base * b_end / denom;
                acc.project(g, &self.shape, t.positions[idx], tail);
            }
        }
        (survival, births + tail, tail)
    }

    /// Assemble `K` for the shift `lambda` and regularisation `eps`.
    pub fn assemble(&self, lambda: f64, eps: f64) -> Result<KernelOperator> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::param("epsilon", "must be finite and >= 0"));
        }
        if !lambda.is_finite() {
            return Err(Error::param("lambda", "must be finite"));
        }
        if lambda < 0.0 && !self.compact_support() {
            return Err(Error::param(
                "lambda",
                "negative shifts need a division rate with compact age support",
            ));
        }
        let g = &self.grid;
        let nx = g.nx();
        let x_max = g.x_max();
        let columns: Vec<(Vec<f64>, f64, f64)> = (0..nx)
            .into_par_iter()
            .map(|j| {
                let mut acc = Deposit::new(nx);
                let (survival, births, tail) = self.column(j, lambda, eps, &mut acc);
                let mut col = vec![2.0 * eps / x_max * survival; nx];
                acc.add_into(&mut col);
                // range updates cancel to rounding level outside the boxes
                col.iter_mut().for_each(|v| *v = v.max(0.0));
                (col, births, tail)
            })
            .collect();
        let wx = g.x_weights();
        let mut matrix = SquareMatrix::zeros(nx);
        let mut all_births = 0.0;
        let mut tail_births = 0.0;
        for (j, (col, births, tail)) in columns.into_iter().enumerate() {
            for (i, v) in col.into_iter().enumerate() {
                matrix.set(i, j, v * wx[j]);
            }
            all_births += wx[j] * births;
            tail_births += wx[j] * tail;
        }
        let tail_fraction = if all_births > 0.0 {
            tail_births / all_births
        } else {
            0.0
        };
        Ok(KernelOperator {
            lambda,
            epsilon: eps,
            matrix,
            weights: wx,
            tail_fraction,
        })
    }
}

/// Assemble the regularised operator with default options.
pub fn assemble_operator(
    model: &ModelCoefficients,
    grid: &Grid,
    lambda: f64,
    eps: f64,
) -> Result<KernelOperator> {
    BirthOperator::new(model, grid, &SolverOptions::default())?.assemble(lambda, eps)
}

/// Spectral radius of the regularised operator at `lambda`.
pub fn mu_of_lambda(model: &ModelCoefficients, grid: &Grid, lambda: f64, eps: f64) -> Result<f64> {
    let op = assemble_operator(model, grid, lambda, eps)?;
    Ok(op
        .leading_eigenpair(None, &PowerIteration::default())?
        .value)
}

/// Which operator the bisection works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Direct,
    Adjoint,
}

/// One point of the regularisation schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationPoint {
    pub epsilon: f64,
    /// Root of `mu(lambda, eps) = 1`.
    pub lambda: f64,
    pub mu_at_zero: f64,
    /// `|mu(lambda, eps) - 1|` at the returned root.
    pub mu_residual: f64,
}

/// Result of the eigenvalue continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenvalueEstimate {
    /// Extrapolated to `eps = 0`.
    pub lambda: f64,
    /// `mu(0)` extrapolated to `eps = 0`.
    pub mu_at_zero: f64,
    pub points: Vec<ContinuationPoint>,
    /// Eigenvector at the smallest `eps`, unit content integral.
    pub profile: Vec<f64>,
    pub tail_fraction: f64,
}

/// Linear extrapolation to 0 through the two smallest abscissae.
fn extrapolate_to_zero(pts: &[(f64, f64)]) -> f64 {
    let mut sorted = pts.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    match sorted.as_slice() {
        [] => f64::NAN,
        [(_, y)] => *y,
        [(e1, y1), (e2, y2), ..] => {
            if e2 == e1 {
                *y1
            } else {
                y1 - e1 * (y2 - y1) / (e2 - e1)
            }
        }
    }
}

fn continuation(
    builder: &BirthOperator<'_>,
    options: &SolverOptions,
    side: Side,
) -> Result<EigenvalueEstimate> {
    if options.epsilons.is_empty() || options.epsilons.iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::param(
            "solver.epsilons",
            "needs at least one value >= 0",
        ));
    }
    if !(options.tolerance > 0.0) {
        return Err(Error::param("solver.tolerance", "must be positive"));
    }
    let mut eps = options.epsilons.clone();
    eps.sort_by(|a, b| b.total_cmp(a));

    let eigen = |lambda: f64, e: f64, start: Option<&[f64]>| -> Result<(Eigenpair, f64)> {
        let op = builder.assemble(lambda, e)?;
        if op.tail_fraction > TAIL_LIMIT {
            return Err(Error::Resolution(format!(
                "{:.2e} of the births happen beyond a_max = {}; increase a_max",
                op.tail_fraction,
                builder.grid.a_max()
            )));
        }
        let op = match side {
            Side::Direct => op,
            Side::Adjoint => op.adjoint(),
        };
        let pair = op.leading_eigenpair(start, &options.power)?;
        Ok((pair, op.tail_fraction))
    };

    let mut zero = Vec::with_capacity(eps.len());
    let mut starts = Vec::with_capacity(eps.len());
    for &e in &eps {
        let (pair, _) = eigen(0.0, e, None)?;
        zero.push((e, pair.value));
        starts.push(pair.vector);
    }
    let mu_at_zero = extrapolate_to_zero(&zero);
    let smallest = zero.last().map(|p| p.1).unwrap_or(f64::NAN);
    if !(mu_at_zero > 1.0) || !(smallest > 1.0) {
        return Err(Error::Subcritical {
            mu_at_zero: mu_at_zero.min(smallest),
        });
    }

    let mut points = Vec::with_capacity(eps.len());
    let mut profile = Vec::new();
    let mut profiles: Vec<(f64, Vec<f64>)> = Vec::with_capacity(eps.len());
    let mut tail_fraction = 0.0;
    for (n, &e) in eps.iter().enumerate() {
        let mut v = starts[n].clone();
        let mut lo = 0.0;
        let mut hi = {
            let bound =
                2.0 * builder.model.kernel.sup_density(
                    &builder.model.division,
                    builder.grid.a_max(),
                    builder.grid.x_max(),
                ) * builder.grid.x_max()
                    + 2.0 * e;
            if bound.is_finite() && bound > 0.0 {
                bound
            } else {
                1.0
            }
        };
        let mut f_lo = zero[n].1.ln();
        let mut f_hi;
        loop {
            let (pair, _) = eigen(hi, e, Some(&v))?;
            if pair.value < 1.0 {
                f_hi = pair.value.ln();
                break;
            }
            lo = hi;
            f_lo = pair.value.ln();
            hi *= 2.0;
            if hi > 1e8 {
                return Err(Error::NoSolution("mu(lambda) stays above 1".into()));
            }
        }
        // bracketing false position on ln(mu), Illinois variant: the
        // bracket always shrinks, and stale ends are down-weighted
        let mut kept = 0i8;
        let mut best = (f64::INFINITY, 0.0, v.clone(), 0.0);
        for _ in 0..200 {
            let mut mid = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
            if !(mid > lo && mid < hi) {
                mid = 0.5 * (lo + hi);
            }
            let (pair, tail) = eigen(mid, e, Some(&v))?;
            let gap = (pair.value - 1.0).abs();
            if gap < best.0 {
                best = (gap, mid, pair.vector.clone(), tail);
            }
            let f_mid = pair.value.ln();
            if f_mid > 0.0 {
                lo = mid;
                f_lo = f_mid;
                if kept == 1 {
                    f_hi *= 0.5;
                }
                kept = 1;
            } else {
                hi = mid;
                f_hi = f_mid;
                if kept == -1 {
                    f_lo *= 0.5;
                }
                kept = -1;
            }
            v = pair.vector;
            if gap <= options.tolerance || hi - lo <= 1e-14 * (1.0 + hi.abs()) {
                break;
            }
        }
        if best.0 > options.tolerance.max(1e-8) {
            return Err(Error::NoConvergence {
                iterations: 200,
                residual: best.0,
            });
        }
        points.push(ContinuationPoint {
            epsilon: e,
            lambda: best.1,
            mu_at_zero: zero[n].1,
            mu_residual: best.0,
        });
        profiles.push((e, best.2.clone()));
        profile = best.2;
        tail_fraction = best.3;
    }
    let lambda = extrapolate_to_zero(
        &points
            .iter()
            .map(|p| (p.epsilon, p.lambda))
            .collect::<Vec<_>>(),
    );
    // The profile at the smallest eps still carries the uniform
    // regularisation births, so it is extrapolated like lambda.
    if let [.., (e1, p1), (e2, p2)] = profiles.as_slice() {
        if e1 != e2 {
            let t = e2 / (e1 - e2);
            profile = p2
                .iter()
                .zip(p1)
                .map(|(b, a)| (b + t * (b - a)).max(0.0))
                .collect();
        }
    }
    Ok(EigenvalueEstimate {
        lambda,
        mu_at_zero,
        points,
        profile,
        tail_fraction,
    })
}

/// Solve `mu(lambda, eps) = 1` along the regularisation schedule.
///
/// Fails with [`Error::Subcritical`] when `mu(0) <= 1` (no positive root).
pub fn solve_eigenvalue(
    model: &ModelCoefficients,
    grid: &Grid,
    options: &SolverOptions,
) -> Result<EigenvalueEstimate> {
    let builder = BirthOperator::new(model, grid, options)?;
    continuation(&builder, options, Side::Direct)
}

/// Forward characteristics from a refined set of launches on the grid's
/// age nodes.
fn refined_table(
    model: &ModelCoefficients,
    grid: &Grid,
    options: &SolverOptions,
) -> Result<CharacteristicTable> {
    let r = options.launch_refinement.max(1);
    let n = (grid.nx() - 1) * r + 1;
    let h = grid.x_max() / (n - 1) as f64;
    let launches: Vec<f64> = (0..n)
        .map(|l| {
            if l + 1 == n {
                grid.x_max()
            } else {
                l as f64 * h
            }
        })
        .collect();
    CharacteristicTable::trace(
        &model.growth,
        &model.division,
        &launches,
        &grid.a_nodes(),
        &options.control,
    )
}

/// Piecewise-linear interpolant of nodal values.
fn interpolate(grid: &Grid, values: &[f64], x: f64) -> f64 {
    let i = grid.x_cell(x);
    let t = ((x - grid.x(i)) / grid.dx()).clamp(0.0, 1.0);
    values[i] * (1.0 - t) + values[i + 1] * t
}

fn density_from_table(
    table: &CharacteristicTable,
    boundary: &[f64],
    grid: &Grid,
    lambda0: f64,
) -> Result<Field> {
    let nx = grid.nx();
    let nl = table.launches.len();
    let mut field = Field::zeros(*grid);
    let mut acc = Deposit::new(nx);
    let mut row = vec![0.0; nx];
    for (k, &a) in table.ages.iter().enumerate() {
        acc.clear();
        let value = |l: usize| {
            let z = table.launches[l];
            interpolate(grid, boundary, z) * (-lambda0 * a - table.hazard[table.index(l, k)]).exp()
        };
        let mut prev = value(0);
        for l in 0..nl - 1 {
            let next = value(l + 1);
            let dz = table.launches[l + 1] - table.launches[l];
            let mass = 0.5 * (prev + next) * dz;
            let xa = table.positions[table.index(l, k)];
            let xb = table.positions[table.index(l + 1, k)];
            acc.segment(grid, xa, xb, mass);
            prev = next;
        }
        row.iter_mut().for_each(|v| *v = 0.0);
        acc.add_into(&mut row);
        // mass that the hat basis spread above the ceiling goes back down
        let ceiling = table.positions[table.index(nl - 1, k)];
        let tol = 1e-12 * grid.x_max();
        let top = (0..nx)
            .rev()
            .find(|&i| grid.x(i) <= ceiling + tol)
            .unwrap_or(0);
        for i in top + 1..nx {
            row[top] += row[i] * grid.wx(i) / grid.wx(top);
            row[i] = 0.0;
        }
        for (i, v) in row.iter().enumerate() {
            field.set(k, i, v.max(0.0));
        }
    }
    let total = field.integral();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate(
            "reconstructed density has no mass".into(),
        ));
    }
    field.scale(1.0 / total);
    Ok(field)
}

/// Rebuild `N(a, x)` from the age-zero profile by transporting it along
/// characteristics with the survival weight at `lambda0`.
///
/// Nodal values are averages against the hat basis, so the trapezoid
/// integral of every age row is the transported mass. The result has unit
/// integral.
pub fn reconstruct_density(
    boundary: &[f64],
    model: &ModelCoefficients,
    grid: &Grid,
    lambda0: f64,
    options: &SolverOptions,
) -> Result<Field> {
    if boundary.len() != grid.nx() {
        return Err(Error::param(
            "boundary",
            "length differs from the content grid",
        ));
    }
    if boundary.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::param("boundary", "profile must be nonnegative"));
    }
    let table = refined_table(model, grid, options)?;
    density_from_table(&table, boundary, grid, lambda0)
}

/// `int k(x, z) f(x) dx` for the piecewise-linear interpolant `f` of nodal
/// values.
struct KernelAverage<'g> {
    grid: &'g Grid,
    values: Vec<f64>,
    cumulative: Vec<f64>,
    shape: KernelShape,
}

impl<'g> KernelAverage<'g> {
    fn new(grid: &'g Grid, values: &[f64], shape: KernelShape) -> Self {
        let h = grid.dx();
        let mut cumulative = vec![0.0; values.len()];
        for i in 1..values.len() {
            cumulative[i] = cumulative[i - 1] + 0.5 * h * (values[i - 1] + values[i]);
        }
        KernelAverage {
            grid,
            values: values.to_vec(),
            cumulative,
            shape,
        }
    }

    fn primitive(&self, x: f64) -> f64 {
        let g = self.grid;
        let h = g.dx();
        let i = g.x_cell(x);
        let t = ((x - g.x(i)) / h).clamp(0.0, 1.0);
        let (f0, f1) = (self.values[i], self.values[i + 1]);
        self.cumulative[i] + h * (f0 * t + 0.5 * (f1 - f0) * t * t)
    }

    fn eval(&self, z: f64) -> f64 {
        match &self.shape {
            KernelShape::Atom(r) => interpolate(self.grid, &self.values, r * z),
            KernelShape::Boxes(boxes) => boxes
                .iter()
                .map(|&(lo, hi, m)| {
                    let (zl, zh) = (lo * z, hi * z);
                    if zh - zl <= 1e-12 * self.grid.x_max() {
                        m * interpolate(self.grid, &self.values, 0.5 * (zl + zh))
                    } else {
                        m * (self.primitive(zh) - self.primitive(zl)) / (zh - zl)
                    }
                })
                .sum(),
        }
    }
}

fn adjoint_from_table(
    table: &CharacteristicTable,
    model: &ModelCoefficients,
    boundary: &[f64],
    grid: &Grid,
    lambda0: f64,
    tail_closure: bool,
) -> Field {
    let avg = KernelAverage::new(grid, boundary, model.kernel.shape());
    let ages = &table.ages;
    let na = ages.len();
    let nl = table.launches.len();
    let closure = tail_closure && model.division.support_end().is_none();
    // phi along every launch at every age node
    let along: Vec<Vec<f64>> = (0..nl)
        .into_par_iter()
        .map(|l| {
            let birth = |k: usize| {
                let x = table.positions[table.index(l, k)];
                let b = model.division.value(ages[k], x);
                if b > 0.0 {
                    2.0 * b * avg.eval(x)
                } else {
                    0.0
                }
            };
            let mut out = vec![0.0; na];
            let mut g_next = birth(na - 1);
            let mut f = 0.0;
            if closure {
                let x = table.positions[table.index(l, na - 1)];
                let c = lambda0 + model.division.value(ages[na - 1], x);
                if c > 0.0 {
                    f = g_next / c;
                }
            }
            out[na - 1] = f;
            for k in (0..na - 1).rev() {
                let da = ages[k + 1] - ages[k];
                let bbar =
                    ((table.hazard[table.index(l, k + 1)] - table.hazard[table.index(l, k)]) / da)
                        .max(0.0);
                let c = (lambda0 + bbar) * da;
                let g = birth(k);
                f = (-c).exp() * f + da * (g * (phi1(c) - phi2(c)) + g_next * phi2(c));
                out[k] = f;
                g_next = g;
            }
            out
        })
        .collect();
    let mut field = Field::zeros(*grid);
    for k in 0..na {
        let mut l = 0;
        for i in 0..grid.nx() {
            let x = grid.x(i);
            while l + 1 < nl && table.positions[table.index(l + 1, k)] < x {
                l += 1;
            }
            let xa = table.positions[table.index(l, k)];
            let v = if l + 1 >= nl || x <= xa {
                // at or below the first launch, or above the ceiling
                along[l][k]
            } else {
                let xb = table.positions[table.index(l + 1, k)];
                if x >= xb || xb - xa <= 0.0 {
                    along[l + 1][k]
                } else {
                    let t = (x - xa) / (xb - xa);
                    along[l][k] * (1.0 - t) + along[l + 1][k] * t
                }
            };
            field.set(k, i, v.max(0.0));
        }
    }
    field
}

/// Adjoint eigenelements.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSolution {
    /// Root of `mu = 1` for the transposed operator.
    pub lambda1: f64,
    pub points: Vec<ContinuationPoint>,
    /// Age-zero profile `phi(0, .)` from the transposed eigenproblem.
    pub profile: Vec<f64>,
    /// `phi(a, x)` with `int int N phi = 1`.
    pub field: Field,
}

/// Solve the transposed eigenproblem for `lambda1` and `phi(0, .)`, then
/// integrate `phi` forward along characteristics:
/// `phi(a, x) = int_a^inf exp(-lambda0 (s - a) - int_a^s B) g(s, X) ds` with
/// `g(s, z) = 2 int b(s, y, z) phi(0, y) dy`.
pub fn solve_adjoint(
    model: &ModelCoefficients,
    grid: &Grid,
    lambda0: f64,
    density: &Field,
    options: &SolverOptions,
) -> Result<AdjointSolution> {
    let builder = BirthOperator::new(model, grid, options)?;
    let est = continuation(&builder, options, Side::Adjoint)?;
    let table = refined_table(model, grid, options)?;
    adjoint_with_table(model, grid, lambda0, density, options, est, &table)
}

fn adjoint_with_table(
    model: &ModelCoefficients,
    grid: &Grid,
    lambda0: f64,
    density: &Field,
    options: &SolverOptions,
    est: EigenvalueEstimate,
    table: &CharacteristicTable,
) -> Result<AdjointSolution> {
    let mut field = adjoint_from_table(
        table,
        model,
        &est.profile,
        grid,
        lambda0,
        options.tail_closure,
    );
    let pairing = density.dot(&field);
    if !(pairing > 0.0) || !pairing.is_finite() {
        return Err(Error::Degenerate(
            "adjoint has no overlap with the density".into(),
        ));
    }
    field.scale(1.0 / pairing);
    let profile = field.row(0).to_vec();
    Ok(AdjointSolution {
        lambda1: est.lambda,
        points: est.points,
        profile,
        field,
    })
}

/// `int int exp(lambda0 eta a) N` against its bound `1 / (1 - eta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentCheck {
    pub eta: f64,
    pub value: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Residuals of the integral identities satisfied by the eigenelements.
///
/// The identities are taken on the computational age range `[0, A]`, so
/// each carries the outflow through `a = A`; with `M_A = int N(A, x) dx`
/// and `X_A = int x N(A, x) dx` they vanish exactly for the continuous
/// problem truncated at `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    /// `|lambda0 - int int B N + M_A|`.
    pub birth: f64,
    /// `|lambda0 int int x N - int int Gamma N + X_A|`.
    pub content: f64,
    /// `|lambda0 int int a N + int int a B N + A M_A - 1|`.
    pub age: f64,
    /// `M_A`, the density leaving the age range.
    pub outflow: f64,
    /// `|lambda1 - lambda0|`.
    pub adjoint: f64,
    /// `|int int N phi - 1|`.
    pub pairing: f64,
    pub moments: Vec<MomentCheck>,
}

/// Slack allowed on the exponential age moments.
pub const MOMENT_SLACK: f64 = 1e-2;

/// Complete eigenelements on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSolution {
    pub lambda0: f64,
    pub lambda1: f64,
    pub mu_at_zero: f64,
    pub continuation: Vec<ContinuationPoint>,
    pub adjoint_continuation: Vec<ContinuationPoint>,
    /// `N(0, x)`.
    pub boundary: Vec<f64>,
    /// `phi(0, x)`.
    pub adjoint_boundary: Vec<f64>,
    pub density: Field,
    pub adjoint: Field,
    pub tail_fraction: f64,
    pub residuals: Residuals,
}

impl EigenSolution {
    pub fn grid(&self) -> &Grid {
        self.density.grid()
    }

    pub fn epsilons(&self) -> Vec<f64> {
        self.continuation.iter().map(|p| p.epsilon).collect()
    }
}

/// Residuals of the moment identities of `(lambda0, N)`, plus the
/// adjoint agreement and pairing.
pub fn eigen_diagnostics(sol: &EigenSolution, model: &ModelCoefficients) -> Result<Residuals> {
    let n = &sol.density;
    let g = *n.grid();
    let l0 = sol.lambda0;
    let mass = n.integral();
    if !(mass > 0.0) {
        return Err(Error::Degenerate("density has no mass".into()));
    }
    let births = n.weighted_integral(|a, x| model.division.node_value(a, x)) / mass;
    let mut gamma_moment = 0.0;
    for k in 0..g.na() {
        let a = g.a(k);
        let mut s = 0.0;
        for i in 0..g.nx() {
            s += g.wx(i) * model.growth.rate(a, g.x(i))? * n.at(k, i);
        }
        gamma_moment += g.wa(k) * s;
    }
    gamma_moment /= mass;
    let content = n.weighted_integral(|_, x| x) / mass;
    let age = n.weighted_integral(|a, _| a) / mass;
    let age_births = n.weighted_integral(|a, x| a * model.division.node_value(a, x)) / mass;
    let last = g.na() - 1;
    let outflow = (0..g.nx()).map(|i| g.wx(i) * n.at(last, i)).sum::<f64>() / mass;
    let content_outflow = (0..g.nx())
        .map(|i| g.wx(i) * g.x(i) * n.at(last, i))
        .sum::<f64>()
        / mass;
    let moments = [0.25, 0.5, 0.75]
        .iter()
        .map(|&eta| {
            let value = n.weighted_integral(|a, _| (l0 * eta * a).exp()) / mass;
            let bound = 1.0 / (1.0 - eta);
            MomentCheck {
                eta,
                value,
                bound,
                holds: value <= bound + MOMENT_SLACK,
            }
        })
        .collect();
    Ok(Residuals {
        birth: (l0 - births + outflow).abs(),
        content: (l0 * content - gamma_moment + content_outflow).abs(),
        age: (l0 * age + age_births + g.a_max() * outflow - 1.0).abs(),
        outflow,
        adjoint: (sol.lambda1 - l0).abs(),
        pairing: (n.dot(&sol.adjoint) / mass - 1.0).abs(),
        moments,
    })
}

/// Direct and adjoint eigenelements with their diagnostics.
pub fn solve(
    model: &ModelCoefficients,
    grid: &Grid,
    options: &SolverOptions,
) -> Result<EigenSolution> {
    let builder = BirthOperator::new(model, grid, options)?;
    let direct = continuation(&builder, options, Side::Direct)?;
    let dual = continuation(&builder, options, Side::Adjoint)?;
    let table = refined_table(model, grid, options)?;
    let density = density_from_table(&table, &direct.profile, grid, direct.lambda)?;
    let adjoint = adjoint_with_table(model, grid, direct.lambda, &density, options, dual, &table)?;
    let mut sol = EigenSolution {
        lambda0: direct.lambda,
        lambda1: adjoint.lambda1,
        mu_at_zero: direct.mu_at_zero,
        continuation: direct.points,
        adjoint_continuation: adjoint.points,
        boundary: density.row(0).to_vec(),
        adjoint_boundary: adjoint.profile,
        density,
        adjoint: adjoint.field,
        tail_fraction: direct.tail_fraction,
        residuals: Residuals {
            birth: f64::NAN,
            content: f64::NAN,
            age: f64::NAN,
            adjoint: f64::NAN,
            pairing: f64::NAN,
            outflow: f64::NAN,
            moments: Vec::new(),
        },
    };
    sol.residuals = eigen_diagnostics(&sol, model)?;
    Ok(sol)
}

/// Smallest age range whose survival tail over `[A, 2A]` is below
/// [`TAIL_TOLERANCE`] of the total, for rates with unbounded age support.
pub fn auto_age_horizon(
    model: &ModelCoefficients,
    nx: usize,
    control: &StepControl,
) -> Result<f64> {
    let solver = FlowSolver::with_control(&model.growth, *control);
    let start = model.division.breakpoints().into_iter().fold(0.0, f64::max);
    let mut a_max = (start + 5.0).max(5.0);
    while a_max < 1e4 {
        let na = ((a_max / 0.25).ceil() as usize + 1).max(16);
        let grid = Grid::new(model.x_max(), nx, a_max, na)?;
        let report = check_weak_assumptions(&solver, &model.division, &model.kernel, &grid)?;
        if report.survival_tail < TAIL_TOLERANCE * report.survival_integral {
            return Ok(a_max);
        }
        a_max *= 1.5;
    }
    Err(Error::Resolution(
        "survival does not decay within age 1e4; the division rate is too weak".into(),
    ))
}

/// Age range of the density: the automatic rule for unbounded supports,
/// and `A + ln(1e6) / lambda0` beyond a compact support `[0, A]`, with
/// `lambda0` from a preliminary solve on `[0, A]`.
pub fn age_horizon(
    model: &ModelCoefficients,
    nx: usize,
    da: f64,
    options: &SolverOptions,
) -> Result<f64> {
    match model.division.support_end() {
        None => auto_age_horizon(model, nx, &options.control),
        Some(end) => {
            let grid = Grid::with_age_step(model.x_max(), nx, end, da)?;
            let est = solve_eigenvalue(model, &grid, options)?;
            Ok(end + (1e6_f64).ln() / est.lambda)
        }
    }
}

/// Content nodes of the default grid.
pub const DEFAULT_NX: usize = 121;
/// Age step of the default grid.
pub const DEFAULT_DA: f64 = 0.05;

/// Grid with `nx` content nodes and age step `da` over [`age_horizon`].
pub fn default_grid(
    model: &ModelCoefficients,
    nx: usize,
    da: f64,
    options: &SolverOptions,
) -> Result<Grid> {
    let a_max = age_horizon(model, nx, da, options)?;
    Grid::with_age_step(model.x_max(), nx, a_max, da)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{DivisionRate, GrowthField, RepartitionKernel, Table2};
    use approx::assert_relative_eq;

    fn window(rate: f64, end: f64) -> ModelCoefficients {
        ModelCoefficients::new(
            GrowthField::logistic(1.0, 1.0).unwrap(),
            DivisionRate::constant_window(rate, end).unwrap(),
            RepartitionKernel::Uniform,
        )
    }

    /// `2 B (1 - exp(-(lambda + B) A)) / (lambda + B)`.
    fn window_mu(rate: f64, end: f64, lambda: f64) -> f64 {
        let c = lambda + rate;
        2.0 * rate * (1.0 - (-c * end).exp()) / c
    }

    fn frozen() -> GrowthField {
        let t = Table2::new(vec![0.0, 100.0], vec![0.0, 1.0], vec![0.0; 4]).unwrap();
        GrowthField::tabulated(t).unwrap()
    }

    #[test]
    fn identity_and_two_by_two() {
        let w = vec![1.0; 3];
        let p = leading_eigenpair(
            &SquareMatrix::identity(3),
            &w,
            None,
            &PowerIteration::default(),
        )
        .unwrap();
        assert_relative_eq!(p.value, 1.0);
        for v in &p.vector {
            assert_relative_eq!(*v, 1.0 / 3.0, epsilon = 1e-14);
        }
        let m = SquareMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let p = leading_eigenpair(
            &m,
            &[1.0, 1.0],
            Some(&[1.0, 0.0]),
            &PowerIteration::default(),
        )
        .unwrap();
        assert_relative_eq!(p.value, 3.0, epsilon = 1e-9);
        assert_relative_eq!(p.vector[0], p.vector[1], epsilon = 1e-9);
    }

    #[test]
    fn pure_regularisation_kernel_is_constant() {
        // b = B = 0: K = 2 eps / (x_max (lambda + eps))
        let t = Table2::new(vec![0.0, 100.0], vec![0.0, 1.0], vec![0.0; 4]).unwrap();
        let model = ModelCoefficients::new(
            frozen(),
            DivisionRate::tabulated(t).unwrap(),
            RepartitionKernel::Uniform,
        );
        let grid = Grid::new(1.0, 17, 100.0, 2001).unwrap();
        let (lambda, eps) = (0.5, 0.1);
        let op = assemble_operator(&model, &grid, lambda, eps).unwrap();
        let expected = 2.0 * eps / (lambda + eps);
        for i in 0..17 {
            for j in 0..17 {
                assert_relative_eq!(
                    op.matrix.get(i, j) / op.weights[j],
                    expected,
                    max_relative = 1e-10
                );
            }
        }
    }

    #[test]
    fn window_column_integrals_are_exact() {
        let model = window(1.0, 2.0);
        let grid = Grid::new(1.0, 41, 2.0, 41).unwrap();
        for lambda in [-0.5, 0.0, 0.7, 3.0] {
            let op = assemble_operator(&model, &grid, lambda, 0.0).unwrap();
            assert!(op.matrix.min() >= 0.0);
            for c in op.column_integrals() {
                assert_relative_eq!(c, window_mu(1.0, 2.0, lambda), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn large_shift_kills_the_kernel() {
        let model = window(1.0, 2.0);
        let grid = Grid::new(1.0, 21, 2.0, 21).unwrap();
        let op = assemble_operator(&model, &grid, 1e4, 1e-3).unwrap();
        let max = (0..21)
            .flat_map(|i| (0..21).map(move |j| (i, j)))
            .map(|(i, j)| op.matrix.get(i, j))
            .fold(0.0, f64::max);
        assert!(max < 1e-3);
    }

    #[test]
    fn window_mu_at_zero_and_eigenvalue() {
        let model = window(1.0, 2.0);
        let grid = Grid::new(1.0, 41, 2.0, 41).unwrap();
        let mu = mu_of_lambda(&model, &grid, 0.0, 0.0).unwrap();
        assert_relative_eq!(mu, 2.0 * (1.0 - (-2.0_f64).exp()), max_relative = 1e-9);
        let est = solve_eigenvalue(&model, &grid, &SolverOptions::default()).unwrap();
        // 2 (1 - exp(-2u)) = u with u = lambda + 1
        let u = est.lambda + 1.0;
        assert!((2.0 * (1.0 - (-2.0 * u).exp()) - u).abs() < 1e-6, "{est:?}");
    }

    #[test]
    fn subcritical_window_is_reported() {
        let model = window(0.3, 2.0);
        let grid = Grid::new(1.0, 21, 2.0, 21).unwrap();
        match solve_eigenvalue(&model, &grid, &SolverOptions::default()) {
            Err(Error::Subcritical { mu_at_zero }) => {
                assert_relative_eq!(
                    mu_at_zero,
                    2.0 * (1.0 - (-0.6_f64).exp()),
                    max_relative = 1e-6
                )
            }
            other => panic!("expected subcritical, got {other:?}"),
        }
    }

    #[test]
    fn negative_shift_needs_compact_support() {
        let model = ModelCoefficients::reference();
        let grid = Grid::new(model.x_max(), 16, 40.0, 41).unwrap();
        assert!(matches!(
            assemble_operator(&model, &grid, -0.1, 0.0),
            Err(Error::InvalidParameter { .. })
        ));
    }

    #[test]
    fn frozen_flow_density_is_separable() {
        // Gamma = 0 and B = 1 on [0, 2]: N(a, y) = N0(y) exp(-(lambda + 1) a) for a <= 2
        let model = ModelCoefficients::new(
            frozen(),
            DivisionRate::constant_window(1.0, 2.0).unwrap(),
            RepartitionKernel::Uniform,
        );
        let grid = Grid::new(1.0, 21, 4.0, 41).unwrap();
        let boundary: Vec<f64> = grid.x_nodes().iter().map(|x| 1.0 + x).collect();
        let n =
            reconstruct_density(&boundary, &model, &grid, 0.3, &SolverOptions::default()).unwrap();
        let scale = n.at(0, 10) / boundary[10];
        for k in [5, 20, 30] {
            let a = grid.a(k);
            let decay = (-0.3 * a - a.min(2.0)).exp();
            for i in 1..20 {
                assert_relative_eq!(n.at(k, i), scale * boundary[i] * decay, max_relative = 1e-9);
            }
        }
        assert_relative_eq!(n.integral(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn phi_helpers_match_quadrature() {
        for z in [-2.0, -1e-3, 0.0, 1e-5, 5e-3, 0.5, 7.0] {
            let n = 20000;
            let (mut q1, mut q2) = (0.0, 0.0);
            for m in 0..n {
                let t = (m as f64 + 0.5) / n as f64;
                q1 += (-z * t).exp() / n as f64;
                q2 += t * (-z * t).exp() / n as f64;
            }
            assert_relative_eq!(phi1(z), q1, max_relative = 1e-8);
            assert_relative_eq!(phi2(z), q2, max_relative = 1e-8);
        }
    }
}
