//! Characteristic curves `dX/da = Gamma(a, X)` and the weights carried along
//! them.
//!
//! The state integrated along a curve is `(X, int d_x Gamma, int B)`; the
//! last two give the divergence weight `exp(-int d_x Gamma) = 1 / d_y X` and
//! the survival weight `exp(-lambda a - int B)`.

use std::collections::HashMap;
use std::f64::consts::LN_2;
use std::sync::Mutex;

use rayon::prelude::*;

use crate::coefficients::{project_shape, DivisionRate, GrowthField, RepartitionKernel};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Step control for the adaptive RK4 integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepControl {
    pub initial_step: f64,
    /// Bound on the step-doubling error estimate per step.
    pub tolerance: f64,
    pub max_step: f64,
    pub min_step: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl {
            initial_step: 0.05,
            tolerance: 1e-11,
            max_step: 0.5,
            min_step: 1e-9,
        }
    }
}

/// `[X, int d_x Gamma, int B]`.
type State = [f64; 3];

#[derive(Clone, Copy)]
struct System<'a> {
    field: &'a GrowthField,
    rate: Option<&'a DivisionRate>,
    /// Age interval between two breakpoints of the rate; the rate is read
    /// from its interior so jumps never fall inside a step.
    window: (f64, f64),
}

impl<'a> System<'a> {
    fn new(field: &'a GrowthField, rate: Option<&'a DivisionRate>) -> Self {
        System {
            field,
            rate,
            window: (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    fn rhs(&self, a: f64, s: &State) -> Result<State> {
        // stages may overshoot the invariant interval [0, x_max] by rounding
        let x = s[0].clamp(0.0, self.field.x_max());
        let g = self.field.rate(a, x)?;
        let dg = self.field.rate_slope(a, x)?;
        let b = match self.rate {
            Some(r) => {
                let (lo, hi) = self.window;
                let nudge = 1e-9 * (1.0 + a.abs());
                let inside = if hi - lo > 4.0 * nudge {
                    a.clamp(lo + nudge, hi - nudge)
                } else {
                    a
                };
                r.value(inside, x)
            }
            None => 0.0,
        };
        Ok([g, dg, b])
    }

    fn rk4(&self, a: f64, s: &State, h: f64) -> Result<State> {
        let add =
            |s: &State, k: &State, c: f64| [s[0] + c * k[0], s[1] + c * k[1], s[2] + c * k[2]];
        let k1 = self.rhs(a, s)?;
        let k2 = self.rhs(a + 0.5 * h, &add(s, &k1, 0.5 * h))?;
        let k3 = self.rhs(a + 0.5 * h, &add(s, &k2, 0.5 * h))?;
        let k4 = self.rhs(a + h, &add(s, &k3, h))?;
        let mut out = *s;
        for c in 0..3 {
            out[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        Ok(out)
    }

    /// One accepted step of at most `h` (signed). Returns the new age, state
    /// and a suggested next step size.
    fn adaptive_step(
        &self,
        a: f64,
        s: &State,
        mut h: f64,
        control: &StepControl,
    ) -> Result<(f64, State, f64)> {
        loop {
            if h.abs() < control.min_step {
                return Err(Error::Integrator {
                    age: a,
                    x: s[0],
                    reason: format!("step fell below {:e}", control.min_step),
                });
            }
            let attempt = self.rk4(a, s, h).and_then(|full| {
                let mid = self.rk4(a, s, 0.5 * h)?;
                let fine = self.rk4(a + 0.5 * h, &mid, 0.5 * h)?;
                Ok((full, fine))
            });
            match attempt {
                Ok((full, fine)) => {
                    let err = (0..3)
                        .map(|c| (full[c] - fine[c]).abs())
                        .fold(0.0, f64::max);
                    if err.is_finite() && err <= control.tolerance {
                        let grow = if err < control.tolerance / 64.0 {
                            2.0
                        } else {
                            1.0
                        };
                        let next = (h.abs() * grow).min(control.max_step);
                        let mut fine = fine;
                        fine[0] = fine[0].clamp(0.0, self.field.x_max());
                        return Ok((a + h, fine, next));
                    }
                }
                // a stage left the content domain: the step was too long
                Err(Error::Domain { .. }) => {}
                Err(e) => return Err(e),
            }
            h *= 0.5;
        }
    }

    /// Integrate from `a0` to `a1` (either direction), stepping exactly onto
    /// every breakpoint in between.
    fn integrate(
        &self,
        a0: f64,
        s0: State,
        a1: f64,
        control: &StepControl,
        first_step: f64,
    ) -> Result<(State, f64)> {
        let dir = if a1 >= a0 { 1.0 } else { -1.0 };
        let mut stops: Vec<f64> = self
            .rate
            .map(|r| r.breakpoints())
            .unwrap_or_default()
            .into_iter()
            .filter(|b| (b - a0) * dir > 0.0 && (a1 - b) * dir > 0.0)
            .collect();
        stops.sort_by(|x, y| (dir * x).total_cmp(&(dir * y)));
        stops.push(a1);
        let mut a = a0;
        let mut s = s0;
        let mut h = first_step.abs().min(control.max_step).max(control.min_step);
        let snap = 1e-12 * (1.0 + a0.abs() + a1.abs());
        let mut sys = *self;
        for stop in stops {
            sys.window = if dir > 0.0 { (a, stop) } else { (stop, a) };
            loop {
                let remaining = (stop - a).abs();
                if remaining <= snap {
                    break;
                }
                if remaining < control.min_step {
                    // sliver left by rounding: one plain step is exact enough
                    s = sys.rk4(a, &s, stop - a)?;
                    break;
                }
                let trial = h.min(remaining);
                let (na, ns, next) = sys.adaptive_step(a, &s, dir * trial, control)?;
                a = na;
                s = ns;
                if trial < remaining {
                    h = next;
                } else {
                    h = h.max(next);
                }
            }
            a = stop;
        }
        Ok((s, h))
    }
}

/// Dense record of one forward characteristic at its accepted steps.
#[derive(Debug, Clone)]
struct Trajectory {
    ages: Vec<f64>,
    states: Vec<State>,
    steps: Vec<f64>,
}

/// Integrates characteristics of one growth field.
///
/// Forward launches are cached per launch point; a query restarts from the
/// last cached node at or below the requested age, so results do not depend
/// on the order in which queries arrive.
#[derive(Debug)]
pub struct FlowSolver<'a> {
    field: &'a GrowthField,
    control: StepControl,
    cache: Mutex<HashMap<u64, Trajectory>>,
}

/// Weights carried along the characteristic launched at `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharacteristicWeights {
    /// `exp(-lambda a - int_0^a B(s, X(s, y)) ds)`.
    pub survival: f64,
    /// `exp(-int_0^a d_x Gamma(s, X(s, y)) ds)`.
    pub divergence: f64,
}

impl<'a> FlowSolver<'a> {
    pub fn new(field: &'a GrowthField) -> Self {
        Self::with_control(field, StepControl::default())
    }

    pub fn with_control(field: &'a GrowthField, control: StepControl) -> Self {
        FlowSolver {
            field,
            control,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn field(&self) -> &GrowthField {
        self.field
    }

    pub fn control(&self) -> &StepControl {
        &self.control
    }

    fn system(&self) -> System<'a> {
        System::new(self.field, None)
    }

    fn check_launch(&self, a: f64, x: f64) -> Result<()> {
        if !(a >= 0.0) || !a.is_finite() {
            return Err(Error::param(
                "age",
                format!("must be finite and >= 0, got {a}"),
            ));
        }
        let x_max = self.field.x_max();
        if !(0.0..=x_max).contains(&x) {
            return Err(Error::Domain { x, x_max });
        }
        Ok(())
    }

    /// State `(X, int d_x Gamma)` of the launch from `y` at age `a`.
    fn forward_state(&self, a: f64, y: f64) -> Result<State> {
        self.check_launch(a, y)?;
        let sys = self.system();
        let mut cache = self.cache.lock().expect("flow cache poisoned");
        let traj = cache.entry(y.to_bits()).or_insert_with(|| Trajectory {
            ages: vec![0.0],
            states: vec![[y, 0.0, 0.0]],
            steps: vec![self.control.initial_step],
        });
        while *traj.ages.last().unwrap() < a {
            let n = traj.ages.len() - 1;
            let (na, ns, next) =
                sys.adaptive_step(traj.ages[n], &traj.states[n], traj.steps[n], &self.control)?;
            traj.ages.push(na);
            traj.states.push(ns);
            traj.steps.push(next);
        }
        let n = traj.ages.partition_point(|&t| t <= a) - 1;
        let (a0, s0, h0) = (traj.ages[n], traj.states[n], traj.steps[n]);
        drop(cache);
        if a0 == a {
            return Ok(s0);
        }
        Ok(sys.integrate(a0, s0, a, &self.control, h0)?.0)
    }

    /// `X(a, x)`.
    pub fn forward_flow(&self, a: f64, x: f64) -> Result<f64> {
        Ok(self.forward_state(a, x)?[0])
    }

    /// `X(a, x_max)`: the largest content reachable at age `a`.
    pub fn ceiling(&self, a: f64) -> Result<f64> {
        self.forward_flow(a, self.field.x_max())
    }

    /// `Y(a, x)`, the content at age 0 of the curve through `(a, x)`.
    pub fn inverse_flow(&self, a: f64, x: f64) -> Result<f64> {
        self.check_launch(a, x)?;
        if a == 0.0 {
            return Ok(x);
        }
        let ceiling = self.ceiling(a)?;
        if x > ceiling {
            return Err(Error::OutOfRange { age: a, x, ceiling });
        }
        let sys = self.system();
        let (s, _) = sys.integrate(
            a,
            [x, 0.0, 0.0],
            0.0,
            &self.control,
            self.control.initial_step,
        )?;
        Ok(s[0].clamp(0.0, self.field.x_max()))
    }

    /// `exp(-int_0^a d_x Gamma(s, X(s, y)) ds)`, equal to `1 / d_y X(a, y)`.
    pub fn divergence_weight(&self, a: f64, y: f64) -> Result<f64> {
        Ok((-self.forward_state(a, y)?[1]).exp())
    }

    /// `exp(-lambda a - int_0^a B(s, X(s, y)) ds)`.
    pub fn survival_weight(&self, rate: &DivisionRate, a: f64, y: f64, lambda: f64) -> Result<f64> {
        Ok(self.weights(rate, a, y, lambda)?.survival)
    }

    pub fn weights(
        &self,
        rate: &DivisionRate,
        a: f64,
        y: f64,
        lambda: f64,
    ) -> Result<CharacteristicWeights> {
        self.check_launch(a, y)?;
        let sys = System::new(self.field, Some(rate));
        let (s, _) = sys.integrate(
            0.0,
            [y, 0.0, 0.0],
            a,
            &self.control,
            self.control.initial_step,
        )?;
        Ok(CharacteristicWeights {
            survival: (-lambda * a - s[2]).exp(),
            divergence: (-s[1]).exp(),
        })
    }

    /// First age at which the growth speed at content `x` becomes
    /// nonnegative and stays so (the start of the monotone branch of
    /// `a -> Y(a, x)`).
    pub fn branch_start(&self, x: f64, horizon: f64) -> Result<f64> {
        let h = self.control.max_step.min(0.05);
        let steps = (horizon / h).ceil() as usize;
        let mut start = None;
        let mut prev_positive = false;
        for n in 0..=steps {
            let a = n as f64 * h;
            let positive = self.field.rate(a, x)? >= 0.0;
            if positive && !prev_positive {
                if start.is_some() {
                    return Err(Error::NoSolution(format!(
                        "growth speed at content {x} changes sign more than once; \
                         the zero curve is not increasing"
                    )));
                }
                start = Some(a);
            }
            prev_positive = positive;
        }
        let Some(mut hi) = start else {
            return Err(Error::NoSolution(format!(
                "growth speed at content {x} stays negative up to age {horizon}"
            )));
        };
        if hi == 0.0 {
            return Ok(0.0);
        }
        let mut lo = hi - h;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.field.rate(mid, x)? >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }

    /// Age `a` on the monotone branch with `Y(a, start) = target`, i.e. the
    /// age at which the curve launched from `target` climbs through `start`.
    pub fn arrival_time(&self, start: f64, target: f64) -> Result<f64> {
        const HORIZON: f64 = 1e3;
        let x_max = self.field.x_max();
        for v in [start, target] {
            if !(0.0..=x_max).contains(&v) {
                return Err(Error::Domain { x: v, x_max });
            }
        }
        if self.field.is_zero() {
            return if start == target {
                Ok(0.0)
            } else {
                Err(Error::NoSolution("flow is the identity".into()))
            };
        }
        let a0 = self.branch_start(start, HORIZON)?;
        let level = |a: f64| -> Result<f64> { Ok(self.forward_flow(a, target)? - start) };
        let f0 = level(a0)?;
        if f0 >= 0.0 {
            if f0 == 0.0 || a0 == 0.0 && f0.abs() <= 1e-14 * (1.0 + start) {
                return Ok(a0);
            }
            return Err(Error::NoSolution(format!(
                "the curve from {target} is already above {start} when the branch starts at age {a0}"
            )));
        }
        let mut lo = a0;
        let mut hi = a0 + 1.0;
        while level(hi)? < 0.0 {
            lo = hi;
            hi = a0 + 2.0 * (hi - a0);
            if hi > HORIZON {
                return Err(Error::NoSolution(format!(
                    "the curve from {target} does not reach {start} before age {HORIZON}"
                )));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if level(mid)? < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-13 * (1.0 + hi) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Characteristics launched from a set of contents, sampled on age nodes.
#[derive(Debug, Clone)]
pub struct CharacteristicTable {
    pub launches: Vec<f64>,
    pub ages: Vec<f64>,
    /// `X(a_k, y_j)` at index `j * ages.len() + k`.
    pub positions: Vec<f64>,
    /// `int_0^{a_k} B(s, X(s, y_j)) ds`.
    pub hazard: Vec<f64>,
    /// `int_0^{a_k} d_x Gamma(s, X(s, y_j)) ds`.
    pub divergence: Vec<f64>,
}

impl CharacteristicTable {
    /// Trace every launch through the age nodes (in parallel).
    pub fn trace(
        field: &GrowthField,
        rate: &DivisionRate,
        launches: &[f64],
        ages: &[f64],
        control: &StepControl,
    ) -> Result<Self> {
        let sys = System::new(field, Some(rate));
        let rows: Vec<Result<Vec<State>>> = launches
            .par_iter()
            .map(|&y| {
                let mut out = Vec::with_capacity(ages.len());
                let mut s: State = [y, 0.0, 0.0];
                let mut a = 0.0;
                let mut h = control.initial_step;
                for &t in ages {
                    if t > a {
                        let (ns, nh) = sys.integrate(a, s, t, control, h)?;
                        s = ns;
                        h = nh;
                        a = t;
                    }
                    out.push(s);
                }
                Ok(out)
            })
            .collect();
        let na = ages.len();
        let mut positions = Vec::with_capacity(launches.len() * na);
        let mut divergence = Vec::with_capacity(launches.len() * na);
        let mut hazard = Vec::with_capacity(launches.len() * na);
        for row in rows {
            for s in row? {
                positions.push(s[0]);
                divergence.push(s[1]);
                hazard.push(s[2]);
            }
        }
        Ok(CharacteristicTable {
            launches: launches.to_vec(),
            ages: ages.to_vec(),
            positions,
            hazard,
            divergence,
        })
    }

    pub fn index(&self, j: usize, k: usize) -> usize {
        j * self.ages.len() + k
    }
}

/// Outcome of the checkable integral conditions on the coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakAssumptionReport {
    /// `int_0^{A_max} int_0^{x_max} exp(-int_0^a B(s, X(s, y)) ds) dy da`.
    pub survival_integral: f64,
    /// The same integral over `[A_max, 2 A_max]`.
    pub survival_tail: f64,
    /// `survival_tail < 1e-6 * survival_integral`.
    pub integrable: bool,
    /// `min_y int_0^{A_max} B(s, X(s, y)) ds`.
    pub min_birth_integral: f64,
    /// Launch content achieving the minimum.
    pub argmin_content: f64,
    /// `min_birth_integral > ln 2`.
    pub enough_birth: bool,
    /// `sup_{a, y} int b(a, x, y) exp(-int_0^A B) dx / B(a, y)` for rates
    /// with compact age support `[0, A]`.
    pub window_ratio: Option<f64>,
    pub window_condition: Option<bool>,
}

impl WeakAssumptionReport {
    /// Whether the checks support a positive growth exponent.
    pub fn positive_exponent_expected(&self) -> bool {
        match self.window_condition {
            Some(ok) => ok,
            None => self.integrable && self.enough_birth,
        }
    }
}

/// Tolerance of the survival tail relative to the total.
pub const TAIL_TOLERANCE: f64 = 1e-6;

/// Evaluate the integrability, birth-along-characteristics and window
/// ratio conditions on `grid`.
///
/// Launches sit at cell midpoints: the curve from `x = 0` never moves and
/// never divides, but it carries no mass.
pub fn check_weak_assumptions(
    solver: &FlowSolver<'_>,
    rate: &DivisionRate,
    kernel: &RepartitionKernel,
    grid: &Grid,
) -> Result<WeakAssumptionReport> {
    let field = solver.field();
    let dx = grid.dx();
    let launches: Vec<f64> = (0..grid.nx() - 1).map(|j| (j as f64 + 0.5) * dx).collect();
    let na = grid.na();
    let mut ages = grid.a_nodes();
    ages.extend((1..na).map(|k| grid.a_max() + grid.a(k)));
    let table = CharacteristicTable::trace(field, rate, &launches, &ages, solver.control())?;

    let wa = grid.a_weights();
    let mut total = 0.0;
    let mut tail = 0.0;
    let mut min_birth = f64::INFINITY;
    let mut argmin = 0.0;
    for (j, &y) in launches.iter().enumerate() {
        for k in 0..na {
            total += dx * wa[k] * (-table.hazard[table.index(j, k)]).exp();
            tail += dx * wa[k] * (-table.hazard[table.index(j, na - 1 + k)]).exp();
        }
        let h = table.hazard[table.index(j, na - 1)];
        if h < min_birth {
            min_birth = h;
            argmin = y;
        }
    }

    let (window_ratio, window_condition) = match rate.support_end() {
        None => (None, None),
        Some(end) => {
            let nodes = grid.x_nodes();
            let end_table =
                CharacteristicTable::trace(field, rate, &nodes, &[0.0, end], solver.control())?;
            let survive: Vec<f64> = (0..nodes.len())
                .map(|i| (-end_table.hazard[end_table.index(i, 1)]).exp())
                .collect();
            let shape = kernel.shape();
            let mut proj = vec![0.0; grid.nx()];
            let mut ratio: f64 = 0.0;
            for (j, &y) in nodes.iter().enumerate() {
                let divides = (0..na).any(|k| rate.value(grid.a(k), y) > 0.0);
                if !divides {
                    continue;
                }
                proj.iter_mut().for_each(|p| *p = 0.0);
                project_shape(grid, &shape, y, 1.0, &mut proj);
                let r: f64 = (0..grid.nx())
                    .map(|i| grid.wx(i) * proj[i] * survive[i])
                    .sum();
                if j > 0 || y > 0.0 {
                    ratio = ratio.max(r);
                }
            }
            (Some(ratio), Some(ratio < 0.5))
        }
    };

    Ok(WeakAssumptionReport {
        survival_integral: total,
        survival_tail: tail,
        integrable: tail < TAIL_TOLERANCE * total,
        min_birth_integral: min_birth,
        argmin_content: argmin,
        enough_birth: min_birth > LN_2,
        window_ratio,
        window_condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{AgeBound, Table2};
    use approx::assert_relative_eq;

    fn logistic() -> GrowthField {
        GrowthField::logistic(1.0, 1.0).unwrap()
    }

    fn exact_logistic(a: f64, x: f64) -> f64 {
        let e = a.exp();
        x * e / (1.0 + x * (e - 1.0))
    }

    #[test]
    fn initial_condition() {
        let g = logistic();
        let s = FlowSolver::new(&g);
        assert_eq!(s.forward_flow(0.0, 0.3).unwrap(), 0.3);
        assert_eq!(s.inverse_flow(0.0, 0.3).unwrap(), 0.3);
        assert_eq!(s.divergence_weight(0.0, 0.3).unwrap(), 1.0);
    }

    #[test]
    fn logistic_closed_form() {
        let g = logistic();
        let s = FlowSolver::new(&g);
        let x = s.forward_flow(LN_2, 0.5).unwrap();
        assert_relative_eq!(x, 2.0 / 3.0, epsilon = 1e-10);
        let y = s.inverse_flow(LN_2, 2.0 / 3.0).unwrap();
        assert_relative_eq!(y, 0.5, epsilon = 1e-10);
        for a in [0.1, 1.0, 7.5] {
            assert_eq!(s.forward_flow(a, 1.0).unwrap(), 1.0);
            assert_relative_eq!(
                s.forward_flow(a, 0.2).unwrap(),
                exact_logistic(a, 0.2),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn round_trip_on_sample() {
        let g = logistic();
        let s = FlowSolver::new(&g);
        for ia in 0..20 {
            let a = 0.25 * ia as f64;
            for iy in 0..20 {
                let y = iy as f64 / 19.0;
                let x = s.forward_flow(a, y).unwrap();
                let back = s.inverse_flow(a, x).unwrap();
                assert!((back - y).abs() < 1e-8, "a={a} y={y} back={back}");
            }
        }
    }

    #[test]
    fn inverse_above_ceiling_is_out_of_range() {
        let g = GrowthField::saturating(0.1, 0.075, 3.0, 1.95, 0.4).unwrap();
        let s = FlowSolver::new(&g);
        let c = s.ceiling(2.0).unwrap();
        assert!(c < 3.0);
        assert!(matches!(
            s.inverse_flow(2.0, 0.5 * (c + 3.0)),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn divergence_matches_difference_quotient() {
        let g = logistic();
        let s = FlowSolver::new(&g);
        let h = 1e-5;
        for &(a, y) in &[(0.5, 0.2), (2.0, 0.6), (4.0, 0.05)] {
            let fd =
                (s.forward_flow(a, y + h).unwrap() - s.forward_flow(a, y - h).unwrap()) / (2.0 * h);
            let w = s.divergence_weight(a, y).unwrap();
            assert_relative_eq!(w * fd, 1.0, max_relative = 1e-4);
        }
    }

    #[test]
    fn zero_field_is_identity() {
        let t = Table2::new(vec![0.0, 10.0], vec![0.0, 1.0], vec![0.0; 4]).unwrap();
        let g = GrowthField::tabulated(t).unwrap();
        let s = FlowSolver::new(&g);
        for a in [0.0, 1.0, 9.0] {
            assert_eq!(s.forward_flow(a, 0.4).unwrap(), 0.4);
            assert_eq!(s.divergence_weight(a, 0.4).unwrap(), 1.0);
        }
        let rate = DivisionRate::constant_window(0.0, 1.0).unwrap();
        assert_relative_eq!(
            s.survival_weight(&rate, 3.0, 0.4, 0.2).unwrap(),
            (-0.6f64).exp()
        );
    }

    #[test]
    fn survival_for_constant_window() {
        let g = logistic();
        let s = FlowSolver::new(&g);
        let rate = DivisionRate::constant_window(1.3, 2.0).unwrap();
        for a in [0.0, 0.7, 2.0, 3.1] {
            for lambda in [0.0, 0.4] {
                let w = s.survival_weight(&rate, a, 0.3, lambda).unwrap();
                let exact = (-lambda * a - 1.3 * a.min(2.0)).exp();
                assert!((w - exact).abs() < 1e-10, "a={a}: {w} vs {exact}");
            }
        }
    }

    #[test]
    fn arrival_time_identity_and_round_trip() {
        let g = logistic();
        let s = FlowSolver::new(&g);
        assert_eq!(s.arrival_time(0.4, 0.4).unwrap(), 0.0);
        for &(a, x) in &[(0.3, 0.2), (1.5, 0.35), (3.0, 0.1)] {
            let start = 2.0 * x;
            let y = s.inverse_flow(a, start).unwrap();
            let back = s.arrival_time(start, y).unwrap();
            assert!((back - a).abs() < 1e-6, "a={a} back={back}");
        }
    }

    #[test]
    fn arrival_time_waits_for_the_branch() {
        let g = GrowthField::saturating(0.1, 0.075, 3.0, 1.95, 0.4).unwrap();
        let s = FlowSolver::new(&g);
        let start = 1.2;
        // zero-curve age at `start`
        let a0 = s.branch_start(start, 100.0).unwrap();
        assert!(g.rate(a0 + 1e-6, start).unwrap() > 0.0);
        assert!(g.rate(a0 - 1e-6, start).unwrap() < 0.0);
        let a = s.arrival_time(start, 0.2).unwrap();
        assert!(a > a0);
        assert!((s.forward_flow(a, 0.2).unwrap() - start).abs() < 1e-8);
    }

    #[test]
    fn weak_assumptions_constant_window() {
        let g = logistic();
        let s = FlowSolver::new(&g);
        let grid = Grid::new(1.0, 33, 4.0, 41).unwrap();
        let kernel = RepartitionKernel::Uniform;
        for (b, ok) in [(0.3, false), (0.5, true)] {
            let rate = DivisionRate::constant_window(b, 2.0).unwrap();
            let r = check_weak_assumptions(&s, &rate, &kernel, &grid).unwrap();
            assert_relative_eq!(r.min_birth_integral, 2.0 * b, epsilon = 1e-9);
            assert_eq!(r.enough_birth, ok);
            assert_eq!(r.window_condition, Some(ok));
            assert_relative_eq!(r.window_ratio.unwrap(), (-2.0 * b).exp(), epsilon = 1e-9);
        }
    }

    #[test]
    fn weak_assumptions_flag_missing_division() {
        let g = logistic();
        let s = FlowSolver::new(&g);
        let grid = Grid::new(1.0, 17, 10.0, 21).unwrap();
        let rate = DivisionRate::power_window(1.0, 1.0, 0.0, AgeBound::Finite(1e-3)).unwrap();
        let zero = DivisionRate::tabulated(
            Table2::new(vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0; 4]).unwrap(),
        )
        .unwrap();
        let r = check_weak_assumptions(&s, &zero, &RepartitionKernel::Uniform, &grid).unwrap();
        assert!(!r.integrable && !r.enough_birth);
        assert!(!r.positive_exponent_expected());
        let r = check_weak_assumptions(&s, &rate, &RepartitionKernel::Uniform, &grid).unwrap();
        assert!(!r.enough_birth);
    }
}
