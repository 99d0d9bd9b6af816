//! Proliferating/quiescent system
//!
//! ```text
//! d_t p + d_a p + d_x (Gamma p) + (B + d1 + L) p = G(N(t)) q
//! d_t q = L p - (G(N(t)) + d2) q
//! p(t, 0, x) = 2 int int b(a, x, y) p(t, a, y) dy da
//! ```
//!
//! with the weighted population `N(t) = int int (phi* p + psi* q)`. The
//! module also carries the algebra linking the one-phase eigenvalue to the
//! two-phase one, the eigensystem reached as the recruitment vanishes and
//! the supersolution bound on `S2 = int int (phi2 p + psi2 q)`.

use rayon::prelude::*;

use crate::coefficients::{ModelCoefficients, Transition, TwoPhaseParams};
use crate::eigensolver::EigenSolution;
use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::transport::TransportScheme;

/// Two-phase eigenvalue for a frozen recruitment rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispersionResult {
    /// One-phase eigenvalue.
    pub lambda0: f64,
    /// Frozen recruitment rate `G~`.
    pub recruitment: f64,
    /// `G~ + d2`.
    pub g_plus: f64,
    /// `d1 - lambda0`.
    pub d_plus: f64,
    /// `L + d1 - lambda0`.
    pub l_plus: f64,
    pub lambda: f64,
    /// Root of the same relation with `lambda0 = 0`; `lambda` exceeds it
    /// whenever `lambda0 > 0`.
    pub lower_bound: f64,
}

/// Which algebraic expression of the quadratic root to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootForm {
    /// `(-s + sqrt(s^2 - 4 p)) / 2`.
    Radical,
    /// `-2 p / (s + sqrt(s^2 - 4 p))`.
    Rationalized,
}

/// Right side of the link `lambda0 = lambda + d1 + L (lambda + d2) / (lambda + G~ + d2)`.
pub fn dispersion_link(lambda: f64, d1: f64, d2: f64, transition: f64, recruitment: f64) -> f64 {
    lambda + d1 + transition * (lambda + d2) / (lambda + recruitment + d2)
}

/// Upper root of `lambda^2 + s lambda + p = 0` in the requested form.
fn upper_root(s: f64, p: f64, form: RootForm) -> f64 {
    let disc = (s * s - 4.0 * p).max(0.0).sqrt();
    match form {
        RootForm::Radical => 0.5 * (-s + disc),
        RootForm::Rationalized => {
            if s + disc == 0.0 {
                0.0
            } else {
                -2.0 * p / (s + disc)
            }
        }
    }
}

/// The root using whichever form avoids cancellation.
fn stable_root(s: f64, p: f64) -> f64 {
    if s >= 0.0 {
        upper_root(s, p, RootForm::Rationalized)
    } else {
        upper_root(s, p, RootForm::Radical)
    }
}

fn check_rates(lambda0: f64, d1: f64, d2: f64, transition: f64, recruitment: f64) -> Result<()> {
    if !lambda0.is_finite() {
        return Err(Error::param("lambda0", "must be finite"));
    }
    for (name, v) in [
        ("d1", d1),
        ("d2", d2),
        ("L", transition),
        ("G", recruitment),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::param(name, "must be finite and nonnegative"));
        }
    }
    Ok(())
}

/// Coefficients `(s, p)` of the quadratic satisfied by the two-phase
/// eigenvalue.
fn quadratic(lambda0: f64, d1: f64, d2: f64, transition: f64, recruitment: f64) -> (f64, f64) {
    let g_plus = recruitment + d2;
    let d_plus = d1 - lambda0;
    let l_plus = transition + d1 - lambda0;
    (g_plus + l_plus, d_plus * g_plus + d2 * transition)
}

/// Two-phase eigenvalue in the given algebraic form, for testing the two
/// against each other.
pub fn dispersion_root(
    lambda0: f64,
    d1: f64,
    d2: f64,
    transition: f64,
    recruitment: f64,
    form: RootForm,
) -> Result<f64> {
    check_rates(lambda0, d1, d2, transition, recruitment)?;
    let (s, p) = quadratic(lambda0, d1, d2, transition, recruitment);
    Ok(upper_root(s, p, form))
}

/// Solve the link formula for `lambda` on the branch `lambda > -(G~ + d2)`.
pub fn lambda_from_lambda0(
    lambda0: f64,
    d1: f64,
    d2: f64,
    transition: f64,
    recruitment: f64,
) -> Result<DispersionResult> {
    check_rates(lambda0, d1, d2, transition, recruitment)?;
    let (s, p) = quadratic(lambda0, d1, d2, transition, recruitment);
    let (s0, p0) = quadratic(0.0, d1, d2, transition, recruitment);
    Ok(DispersionResult {
        lambda0,
        recruitment,
        g_plus: recruitment + d2,
        d_plus: d1 - lambda0,
        l_plus: transition + d1 - lambda0,
        lambda: stable_root(s, p),
        lower_bound: stable_root(s0, p0),
    })
}

impl DispersionResult {
    /// `|f(lambda) - lambda0|` for the link `f` with transition `L`.
    pub fn residual(&self, d1: f64, d2: f64, transition: f64) -> f64 {
        (dispersion_link(self.lambda, d1, d2, transition, self.recruitment) - self.lambda0).abs()
    }
}

/// Outcome of testing `G+ d+ = -L d2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroCriterion {
    pub holds: bool,
    /// `G+ d+ + L d2`.
    pub residual: f64,
}

/// Whether the two-phase eigenvalue vanishes, decided from the constant
/// term of its quadratic.
pub fn lambda_zero_criterion(
    lambda0: f64,
    d1: f64,
    d2: f64,
    transition: f64,
    recruitment: f64,
    tolerance: f64,
) -> Result<ZeroCriterion> {
    check_rates(lambda0, d1, d2, transition, recruitment)?;
    let (_, p) = quadratic(lambda0, d1, d2, transition, recruitment);
    Ok(ZeroCriterion {
        holds: p.abs() <= tolerance,
        residual: p,
    })
}

/// `int int L N / int int N` over the one-phase density: the constant
/// transition rate used when the theory needs one.
pub fn effective_transition(transition: &Transition, sol: &EigenSolution) -> f64 {
    match *transition {
        Transition::Constant(l) => l,
        _ => {
            let total = sol.density.integral();
            sol.density.weighted_integral(|a, x| transition.value(a, x)) / total
        }
    }
}

/// Eigensystem of the two-phase problem in the limit of vanishing
/// recruitment, with `Q2` standing for the limit of `G q`.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitSystem {
    pub lambda0: f64,
    /// Constant transition rate used.
    pub transition: f64,
    /// `L + d1 - lambda0`.
    pub ratio: f64,
    pub proliferating: Field,
    pub quiescent: Field,
    pub adjoint_proliferating: Field,
    pub adjoint_quiescent: Field,
}

impl LimitSystem {
    /// `int int (P2 + Q2)`, equal to 1.
    pub fn mass(&self) -> f64 {
        self.proliferating.integral() + self.quiescent.integral()
    }

    /// `int int (phi2 P2 + psi2 Q2)`, equal to 1.
    pub fn pairing(&self) -> f64 {
        self.proliferating.dot(&self.adjoint_proliferating)
            + self.quiescent.dot(&self.adjoint_quiescent)
    }

    /// Constant `C` in `dS2/dt <= C G S2`.
    pub fn growth_constant(&self, d1: f64) -> f64 {
        (self.lambda0 - d1) / self.ratio
    }
}

/// Build the limit eigensystem from the one-phase solution. Requires
/// `d2 = 0`, `0 < d1 < lambda0` and `L > lambda0 - d1`, with `L` the
/// effective constant transition rate.
pub fn limit_eigensystem(params: &TwoPhaseParams, sol: &EigenSolution) -> Result<LimitSystem> {
    let d1 = params.death_proliferating;
    let lambda0 = sol.lambda0;
    if params.death_quiescent != 0.0 {
        return Err(Error::param("twophase.d2", "the limit system needs d2 = 0"));
    }
    if !(d1 > 0.0 && d1 < lambda0) {
        return Err(Error::param(
            "twophase.d1",
            format!("the limit system needs 0 < d1 < lambda0 = {lambda0:.6}"),
        ));
    }
    let transition = effective_transition(&params.transition, sol);
    let ratio = transition + d1 - lambda0;
    if !(ratio > 0.0) {
        return Err(Error::param(
            "twophase.L",
            format!("the limit system needs L = {transition:.6} > lambda0 - d1"),
        ));
    }
    let proliferating = sol
        .density
        .scaled(1.0 / ((1.0 + ratio) * sol.density.integral()));
    let quiescent = proliferating.scaled(ratio);
    let pairing = proliferating.dot(&sol.adjoint) * (1.0 + ratio * ratio / transition);
    let adjoint_proliferating = sol.adjoint.scaled(1.0 / pairing);
    let adjoint_quiescent = adjoint_proliferating.scaled(ratio / transition);
    Ok(LimitSystem {
        lambda0,
        transition,
        ratio,
        proliferating,
        quiescent,
        adjoint_proliferating,
        adjoint_quiescent,
    })
}

/// Weights `(phi*, psi*)` of the population that drives recruitment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PopulationWeights {
    /// Plain totals.
    #[default]
    Unit,
    /// Adjoint pair of the limit system.
    Limit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoPhaseOptions {
    pub horizon: f64,
    pub weights: PopulationWeights,
    /// Keep one record every this many steps (the last step is always kept).
    pub record_every: usize,
}

impl Default for TwoPhaseOptions {
    fn default() -> Self {
        TwoPhaseOptions {
            horizon: 1000.0,
            weights: PopulationWeights::Unit,
            record_every: 10,
        }
    }
}

/// Both compartments at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPhaseState {
    pub t: f64,
    pub proliferating: Field,
    pub quiescent: Field,
    /// Weighted population `N(t)`.
    pub population: f64,
    /// `G(N(t))`.
    pub recruitment: f64,
}

/// One output row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoPhaseRecord {
    pub t: f64,
    /// Weighted population `N`.
    pub population: f64,
    /// `P = int int p`.
    pub proliferating: f64,
    /// `Q = int int q`.
    pub quiescent: f64,
    pub recruitment: f64,
    /// `S2`, when a limit system is available.
    pub s2: Option<f64>,
    /// `P / (P + Q)`.
    pub proliferating_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoPhaseRun {
    pub records: Vec<TwoPhaseRecord>,
    pub last: TwoPhaseState,
}

impl TwoPhaseRun {
    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn populations(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.population).collect()
    }
}

/// Integrate the two-phase system from `(p0, q0)` up to `options.horizon`.
///
/// `limit` supplies the `S2` weights and, with [`PopulationWeights::Limit`],
/// the population weights.
pub fn simulate_twophase(
    params: &TwoPhaseParams,
    model: &ModelCoefficients,
    p0: &Field,
    q0: &Field,
    limit: Option<&LimitSystem>,
    options: &TwoPhaseOptions,
) -> Result<TwoPhaseRun> {
    let grid = *p0.grid();
    if q0.grid() != &grid {
        return Err(Error::param("initial.q", "p and q must share a grid"));
    }
    if let Some(l) = limit {
        if l.proliferating.grid() != &grid {
            return Err(Error::param("limit", "limit system lives on another grid"));
        }
    }
    if !(options.horizon >= 0.0) {
        return Err(Error::param("twophase.horizon", "must be >= 0"));
    }
    if p0.min() < 0.0 || q0.min() < 0.0 {
        return Err(Error::param("initial", "densities must be nonnegative"));
    }
    let weights = match (options.weights, limit) {
        (PopulationWeights::Unit, _) => None,
        (PopulationWeights::Limit, Some(l)) => {
            Some((&l.adjoint_proliferating, &l.adjoint_quiescent))
        }
        (PopulationWeights::Limit, None) => {
            return Err(Error::param(
                "twophase.weights",
                "limit weights need the limit system",
            ));
        }
    };
    let scheme = TransportScheme::new(model, &grid, 0.0, false)?;
    let dt = scheme.dt();
    let d1 = params.death_proliferating;
    let d2 = params.death_quiescent;
    let stiffness = dt
        * (params
            .recruitment
            .low_density_rate
            .max(params.recruitment.high_density_rate)
            + d2);
    if stiffness > 1.0 {
        return Err(Error::Cfl {
            courant: stiffness,
            age: 0.0,
        });
    }
    let nx = grid.nx();
    // Per-node loss factor of p and the share of the loss that moves to q.
    let mut sink = Vec::with_capacity(grid.na() * nx);
    let mut moved = Vec::with_capacity(grid.na() * nx);
    for k in 0..grid.na() {
        for i in 0..nx {
            let l = params.transition.value(grid.a(k), grid.x(i));
            let rate = d1 + l;
            let kept = (-rate * dt).exp();
            sink.push(kept);
            moved.push(if rate > 0.0 {
                (1.0 - kept) * l / rate
            } else {
                0.0
            });
        }
    }

    let population = |p: &Field, q: &Field| -> f64 {
        match weights {
            None => p.integral() + q.integral(),
            Some((wp, wq)) => p.dot(wp) + q.dot(wq),
        }
    };
    let record = |p: &Field, q: &Field, t: f64, n: f64, g: f64| -> TwoPhaseRecord {
        let pp = p.integral();
        let qq = q.integral();
        TwoPhaseRecord {
            t,
            population: n,
            proliferating: pp,
            quiescent: qq,
            recruitment: g,
            s2: limit.map(|l| p.dot(&l.adjoint_proliferating) + q.dot(&l.adjoint_quiescent)),
            proliferating_fraction: pp / (pp + qq),
        }
    };

    let steps = (options.horizon / dt - 1e-9).ceil().max(0.0) as usize;
    let every = options.record_every.max(1);
    let mut p = p0.clone();
    let mut q = q0.clone();
    let mut p_next = Field::zeros(grid);
    let mut q_next = Field::zeros(grid);
    let mut t = 0.0;
    let mut n = population(&p, &q);
    let mut g = params.recruitment.rate(n);
    let mut records = Vec::with_capacity(steps / every + 2);
    records.push(record(&p, &q, t, n, g));
    for s in 1..=steps {
        // transport, then the exchange on every node past the age-zero row;
        // p there is fixed by the renewal, so q at age zero only loses cells
        scheme.shift(p.values(), p_next.values_mut());
        {
            let qv = q.values();
            let kept = 1.0 - dt * (g + d2);
            for (next, old) in q_next.values_mut()[..nx].iter_mut().zip(&qv[..nx]) {
                *next = old * kept;
            }
            p_next.values_mut()[nx..]
                .par_chunks_mut(nx)
                .zip(q_next.values_mut()[nx..].par_chunks_mut(nx))
                .enumerate()
                .for_each(|(r, (pr, qr))| {
                    let c0 = (r + 1) * nx;
                    for i in 0..nx {
                        let c = c0 + i;
                        let shifted = pr[i];
                        let back = dt * g * qv[c];
                        pr[i] = shifted * sink[c] + back;
                        qr[i] = qv[c] + shifted * moved[c] - back - dt * d2 * qv[c];
                    }
                });
        }
        scheme.renewal(p_next.values_mut());
        std::mem::swap(&mut p, &mut p_next);
        std::mem::swap(&mut q, &mut q_next);
        t = s as f64 * dt;
        n = population(&p, &q);
        g = params.recruitment.rate(n);
        if s % every == 0 || s == steps {
            records.push(record(&p, &q, t, n, g));
        }
    }
    Ok(TwoPhaseRun {
        records,
        last: TwoPhaseState {
            t,
            proliferating: p,
            quiescent: q,
            population: n,
            recruitment: g,
        },
    })
}

/// Least-squares line through `(u, v)` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square deviation of the points from the line.
    pub residual: f64,
}

fn fit_line(u: &[f64], v: &[f64]) -> LineFit {
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let suu: f64 = u.iter().map(|x| (x - mu) * (x - mu)).sum();
    let suv: f64 = u.iter().zip(v).map(|(x, y)| (x - mu) * (y - mv)).sum();
    let slope = if suu > 0.0 { suv / suu } else { 0.0 };
    let intercept = mv - slope * mu;
    let ss: f64 = u
        .iter()
        .zip(v)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    LineFit {
        slope,
        intercept,
        residual: (ss / n).sqrt(),
    }
}

/// Points of `(times, values)` inside `window`, defaulting to the last half
/// of the time range.
fn window_points(
    times: &[f64],
    values: &[f64],
    window: Option<(f64, f64)>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if times.len() != values.len() || times.is_empty() {
        return Err(Error::param(
            "series",
            "times and values must be nonempty and of equal length",
        ));
    }
    let (lo, hi) = window.unwrap_or_else(|| {
        let end = times[times.len() - 1];
        (0.5 * end, end)
    });
    let (t, v): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= lo && **t <= hi)
        .map(|(t, v)| (*t, *v))
        .unzip();
    if t.len() < 3 {
        return Err(Error::Degenerate(format!(
            "fit window [{lo}, {hi}] holds fewer than 3 points"
        )));
    }
    Ok((t, v))
}

/// Slope of `ln N` against `ln t` on the window (default: last half).
pub fn growth_exponent(
    times: &[f64],
    values: &[f64],
    window: Option<(f64, f64)>,
) -> Result<LineFit> {
    let (t, v) = window_points(times, values, window)?;
    if t[0] <= 0.0 {
        return Err(Error::param("window", "log-log fit needs t > 0"));
    }
    if v.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::Regime(
            "population is not positive on the fit window".into(),
        ));
    }
    let lt: Vec<f64> = t.iter().map(|x| x.ln()).collect();
    let lv: Vec<f64> = v.iter().map(|x| x.ln()).collect();
    Ok(fit_line(&lt, &lv))
}

/// Slope of `ln N` against `t` on the window (default: last half).
pub fn exponential_rate(
    times: &[f64],
    values: &[f64],
    window: Option<(f64, f64)>,
) -> Result<LineFit> {
    let (t, v) = window_points(times, values, window)?;
    if v.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::Regime(
            "population is not positive on the fit window".into(),
        ));
    }
    let lv: Vec<f64> = v.iter().map(|x| x.ln()).collect();
    Ok(fit_line(&t, &lv))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    PolynomialGrowth,
    ExponentialDecay,
    ExponentialGrowth,
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Regime::PolynomialGrowth => "polynomial-growth",
            Regime::ExponentialDecay => "exponential-decay",
            Regime::ExponentialGrowth => "exponential-growth",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeFit {
    pub regime: Regime,
    /// Fit of `ln N` against `ln t`.
    pub power: LineFit,
    /// Fit of `ln N` against `t`.
    pub exponential: LineFit,
}

/// Classify the late behaviour of a population series.
///
/// A series that shrinks over the window decays; a growing one is called
/// polynomial or exponential by whichever of the two fits is closer.
pub fn classify_regime(
    times: &[f64],
    values: &[f64],
    window: Option<(f64, f64)>,
) -> Result<RegimeFit> {
    let exponential = exponential_rate(times, values, window)?;
    let power = growth_exponent(times, values, window)?;
    let regime = if exponential.slope < 0.0 {
        Regime::ExponentialDecay
    } else if exponential.residual < power.residual {
        Regime::ExponentialGrowth
    } else {
        Regime::PolynomialGrowth
    };
    Ok(RegimeFit {
        regime,
        power,
        exponential,
    })
}

/// Result of comparing `S2(t)` with `Sigma(t) = a (t + t0)^(1/n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupersolutionReport {
    /// `C` in `dS2/dt <= C G S2`.
    pub growth_constant: f64,
    /// Smallest observed `N(t) / S2(t)`.
    pub population_ratio: f64,
    /// Amplitude making `Sigma` a supersolution of the differential
    /// inequality with the estimated constants.
    pub amplitude: f64,
    /// `t0` with `Sigma(0) = S2(0)` for that amplitude.
    pub offset: f64,
    /// First time `S2` exceeds `Sigma`, if it does.
    pub first_crossing: Option<f64>,
    /// Smallest amplitude for which `S2 <= Sigma` holds on the whole run.
    pub tightest_amplitude: f64,
}

impl SupersolutionReport {
    pub fn holds(&self) -> bool {
        self.first_crossing.is_none()
    }
}

/// `t0` such that `a t0^(1/n) = s0`.
fn offset_for(a: f64, s0: f64, exponent: f64) -> f64 {
    (s0 / a).powf(exponent)
}

/// First time at which `s2` exceeds `a (t + t0)^(1/n)` with `t0` matched at
/// `t = 0`; relative slack `1e-12` absorbs roundoff.
pub fn supersolution_crossing(
    times: &[f64],
    s2: &[f64],
    amplitude: f64,
    exponent: f64,
) -> Option<f64> {
    let t0 = offset_for(amplitude, s2[0], exponent);
    times
        .iter()
        .zip(s2)
        .find(|(t, s)| **s > amplitude * (**t + t0).powf(1.0 / exponent) * (1.0 + 1e-12))
        .map(|(t, _)| *t)
}

/// Smallest amplitude with no crossing, by bisection; `Sigma` grows with
/// the amplitude at every `t > 0` once `t0` is matched to `S2(0)`.
fn tightest_amplitude(times: &[f64], s2: &[f64], exponent: f64) -> f64 {
    let mut hi = s2[0].max(1e-300);
    while supersolution_crossing(times, s2, hi, exponent).is_some() {
        hi *= 2.0;
        if !hi.is_finite() {
            return f64::INFINITY;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if supersolution_crossing(times, s2, mid, exponent).is_some() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Check `S2(t) <= a (t + t0)^(1/n)` along a run.
///
/// `C = (lambda0 - d1) / (L + d1 - lambda0)` comes from the limit system and
/// `C3` is the smallest observed `N / S2`; with those the power law is a
/// supersolution of `dS/dt = C S alpha1 theta^n / (theta^n + (C3 S)^n)` as
/// soon as `a^n >= n C alpha1 theta^n / C3^n`.
pub fn s2_supersolution_check(
    run: &TwoPhaseRun,
    params: &TwoPhaseParams,
    limit: &LimitSystem,
) -> Result<SupersolutionReport> {
    let mut times = Vec::with_capacity(run.records.len());
    let mut s2 = Vec::with_capacity(run.records.len());
    let mut ratio = f64::INFINITY;
    for r in &run.records {
        let s = r.s2.ok_or_else(|| {
            Error::param("run", "records carry no S2; simulate with the limit system")
        })?;
        if !(s > 0.0) {
            return Err(Error::Degenerate("S2 vanishes along the run".into()));
        }
        times.push(r.t);
        s2.push(s);
        ratio = ratio.min(r.population / s);
    }
    let n = params.recruitment.exponent;
    let c = limit.growth_constant(params.death_proliferating);
    let theta = params.recruitment.threshold;
    let alpha1 = params.recruitment.low_density_rate;
    let amplitude = (n * c * alpha1).powf(1.0 / n) * theta / ratio;
    let first_crossing = supersolution_crossing(&times, &s2, amplitude, n);
    Ok(SupersolutionReport {
        growth_constant: c,
        population_ratio: ratio,
        amplitude,
        offset: offset_for(amplitude, s2[0], n),
        first_crossing,
        tightest_amplitude: tightest_amplitude(&times, &s2, n),
    })
}

/// Initial data on `grid` for the growth experiments: all cells
/// proliferating with the one-phase profile.
pub fn proliferating_start(sol: &EigenSolution) -> (Field, Field) {
    let grid: Grid = *sol.density.grid();
    let p = sol.density.scaled(1.0 / sol.density.integral());
    (p, Field::zeros(grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_transition_collapses_the_link() {
        let r = lambda_from_lambda0(0.3, 0.1, 0.2, 0.0, 1.5).unwrap();
        assert_relative_eq!(r.lambda, 0.2, epsilon = 1e-14);
    }

    #[test]
    fn death_equal_to_growth_gives_zero() {
        let r = lambda_from_lambda0(0.4, 0.4, 0.0, 1.0, 2.0).unwrap();
        assert!(r.lambda.abs() < 1e-15);
        let z = lambda_zero_criterion(0.4, 0.4, 0.0, 1.0, 2.0, 1e-12).unwrap();
        assert!(z.holds);
    }

    #[test]
    fn small_death_keeps_growth_positive() {
        for g in [1e-6, 0.1, 3.0] {
            let r = lambda_from_lambda0(0.5, 0.2, 0.0, 2.0, g).unwrap();
            assert!(r.lambda > 0.0, "G = {g}");
            assert!(r.residual(0.2, 0.0, 2.0) < 1e-12);
        }
        let z = lambda_zero_criterion(0.5, 0.2, 0.0, 2.0, 0.1, 1e-12).unwrap();
        assert!(!z.holds);
    }

    #[test]
    fn forms_agree_when_constant_term_vanishes() {
        let a = dispersion_root(0.4, 0.4, 0.0, 1.0, 2.0, RootForm::Radical).unwrap();
        let b = dispersion_root(0.4, 0.4, 0.0, 1.0, 2.0, RootForm::Rationalized).unwrap();
        assert_eq!(a, 0.0);
        assert_eq!(b, 0.0);
    }

    #[test]
    fn exact_power_series_fits() {
        let t: Vec<f64> = (1..200).map(|k| k as f64).collect();
        let v: Vec<f64> = t.iter().map(|x| 3.0 * x.sqrt()).collect();
        let f = growth_exponent(&t, &v, None).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-10);
        assert!(f.residual < 1e-12);
        let fit = classify_regime(&t, &v, None).unwrap();
        assert_eq!(fit.regime, Regime::PolynomialGrowth);
    }

    #[test]
    fn regimes_from_synthetic_series() {
        let t: Vec<f64> = (1..400).map(|k| 0.5 * k as f64).collect();
        let up: Vec<f64> = t.iter().map(|x| (0.05 * x).exp()).collect();
        let down: Vec<f64> = t.iter().map(|x| 5.0 * (-0.02 * x).exp()).collect();
        assert_eq!(
            classify_regime(&t, &up, None).unwrap().regime,
            Regime::ExponentialGrowth
        );
        assert_eq!(
            classify_regime(&t, &down, None).unwrap().regime,
            Regime::ExponentialDecay
        );
    }

    #[test]
    fn nonpositive_population_is_a_regime_error() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let v = [1.0, 0.5, 0.0, 0.0];
        assert!(matches!(
            growth_exponent(&t, &v, Some((1.0, 4.0))),
            Err(Error::Regime(_))
        ));
    }

    #[test]
    fn synthetic_supersolution_is_tight() {
        let n = 0.5;
        let t: Vec<f64> = (0..500).map(|k| 0.1 * k as f64).collect();
        let s: Vec<f64> = t.iter().map(|x| (1.0 + x).powf(1.0 / n)).collect();
        assert_eq!(supersolution_crossing(&t, &s, 1.0, n), None);
        assert!(supersolution_crossing(&t, &s, 0.9, n).is_some());
        let a = tightest_amplitude(&t, &s, n);
        assert!((a - 1.0).abs() < 1e-9, "a = {a}");
    }
}
