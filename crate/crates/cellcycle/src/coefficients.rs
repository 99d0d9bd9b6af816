//! Model data: growth field, division rate, repartition kernel and the
//! auxiliary parameters of the proliferating/quiescent system.

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Samples of a scalar function on a rectilinear `(a, x)` lattice.
///
/// Evaluation is bilinear. Ages beyond the sampled range hold the last value;
/// contents outside the sampled range are a domain error.
#[derive(Debug, Clone, PartialEq)]
pub struct Table2 {
    ages: Vec<f64>,
    contents: Vec<f64>,
    values: Vec<f64>,
}

impl Table2 {
    pub fn new(ages: Vec<f64>, contents: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if ages.len() < 2 || contents.len() < 2 {
            return Err(Error::param(
                "table",
                "needs at least two ages and two contents",
            ));
        }
        if values.len() != ages.len() * contents.len() {
            return Err(Error::param(
                "table",
                "value count does not match the lattice",
            ));
        }
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
        if !increasing(&ages) || !increasing(&contents) {
            return Err(Error::param(
                "table",
                "sample coordinates must be strictly increasing",
            ));
        }
        if contents[0] != 0.0 {
            return Err(Error::param("table", "content samples must start at 0"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("table", "non-finite sample"));
        }
        Ok(Table2 {
            ages,
            contents,
            values,
        })
    }

    /// Build from unordered `(a, x, value)` triples covering a full lattice.
    pub fn from_samples(samples: &[(f64, f64, f64)]) -> Result<Self> {
        let mut ages: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let mut contents: Vec<f64> = samples.iter().map(|s| s.1).collect();
        for v in [&mut ages, &mut contents] {
            v.sort_by(f64::total_cmp);
            v.dedup();
        }
        let nx = contents.len();
        let mut values = vec![f64::NAN; ages.len() * nx];
        for &(a, x, v) in samples {
            let k = ages.binary_search_by(|p| p.total_cmp(&a)).unwrap();
            let i = contents.binary_search_by(|p| p.total_cmp(&x)).unwrap();
            values[k * nx + i] = v;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::param(
                "table",
                "samples do not cover a full (a, x) lattice",
            ));
        }
        Table2::new(ages, contents, values)
    }

    pub fn x_max(&self) -> f64 {
        *self.contents.last().unwrap()
    }

    pub fn ages(&self) -> &[f64] {
        &self.ages
    }

    pub fn contents(&self) -> &[f64] {
        &self.contents
    }

    pub fn eval(&self, a: f64, x: f64) -> Result<f64> {
        let x_max = self.x_max();
        if !(0.0..=x_max).contains(&x) {
            return Err(Error::Domain { x, x_max });
        }
        let (k, s) = locate(&self.ages, a);
        let (i, t) = locate(&self.contents, x);
        let nx = self.contents.len();
        let v = |k: usize, i: usize| self.values[k * nx + i];
        let lo = v(k, i) * (1.0 - t) + v(k, i + 1) * t;
        let hi = v(k + 1, i) * (1.0 - t) + v(k + 1, i + 1) * t;
        Ok(lo * (1.0 - s) + hi * s)
    }

    fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Interval index and fractional position, clamping outside the range.
fn locate(nodes: &[f64], t: f64) -> (usize, f64) {
    let n = nodes.len();
    if t <= nodes[0] {
        return (0, 0.0);
    }
    if t >= nodes[n - 1] {
        return (n - 2, 1.0);
    }
    let j = nodes.partition_point(|&p| p <= t) - 1;
    let j = j.min(n - 2);
    (j, (t - nodes[j]) / (nodes[j + 1] - nodes[j]))
}

/// Content growth speed `dx/da = Gamma(a, x)`.
#[derive(Debug, Clone, PartialEq)]
pub enum GrowthField {
    /// `rate * x * (x_max - x)`.
    Logistic {
        rate: f64,
        x_max: f64,
    },
    /// `rate * x^alpha * (x_max - x)^beta` with `0 < alpha < 1`, `beta > 0`.
    PowerLaw {
        rate: f64,
        alpha: f64,
        beta: f64,
        x_max: f64,
    },
    /// `c1 x/(1+x) (r1 - r2 e^{-c4 a}) - c2 x`: saturating synthesis with
    /// an age-dependent ramp and linear degradation.
    Saturating {
        c1: f64,
        c2: f64,
        r1: f64,
        r2: f64,
        c4: f64,
    },
    Tabulated(Table2),
}

impl GrowthField {
    pub fn logistic(rate: f64, x_max: f64) -> Result<Self> {
        positive("growth.rate", rate)?;
        positive("growth.x_max", x_max)?;
        Ok(GrowthField::Logistic { rate, x_max })
    }

    pub fn power_law(rate: f64, alpha: f64, beta: f64, x_max: f64) -> Result<Self> {
        positive("growth.rate", rate)?;
        positive("growth.x_max", x_max)?;
        positive("growth.beta", beta)?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::param("growth.alpha", "must lie in (0, 1)"));
        }
        Ok(GrowthField::PowerLaw {
            rate,
            alpha,
            beta,
            x_max,
        })
    }

    pub fn saturating(c1: f64, c2: f64, r1: f64, r2: f64, c4: f64) -> Result<Self> {
        for (name, v) in [
            ("growth.c1", c1),
            ("growth.c2", c2),
            ("growth.r1", r1),
            ("growth.r2", r2),
            ("growth.c4", c4),
        ] {
            positive(name, v)?;
        }
        if c2 / c1 >= r1 - r2 {
            return Err(Error::param(
                "growth.c2",
                "requires c2/c1 < r1 - r2 so that the zero curve starts above 0",
            ));
        }
        Ok(GrowthField::Saturating { c1, c2, r1, r2, c4 })
    }

    /// Tabulated field. Must vanish at `x = 0` and be nonpositive at `x_max`.
    pub fn tabulated(table: Table2) -> Result<Self> {
        let x_max = table.x_max();
        for &a in table.ages() {
            if table.eval(a, 0.0)? != 0.0 {
                return Err(Error::param("growth.table", "Gamma(a, 0) must be 0"));
            }
            if table.eval(a, x_max)? > 0.0 {
                return Err(Error::param("growth.table", "Gamma(a, x_max) must be <= 0"));
            }
        }
        Ok(GrowthField::Tabulated(table))
    }

    /// Upper end of the content domain.
    pub fn x_max(&self) -> f64 {
        match self {
            GrowthField::Logistic { x_max, .. } | GrowthField::PowerLaw { x_max, .. } => *x_max,
            GrowthField::Saturating { c1, c2, r1, .. } => c1 / c2 * r1 - 1.0,
            GrowthField::Tabulated(t) => t.x_max(),
        }
    }

    /// Content where the growth speed changes sign at age `a`, if any.
    ///
    /// For the saturating field this is `(c1/c2)(r1 - r2 e^{-c4 a}) - 1`.
    pub fn zero_curve(&self, a: f64) -> Option<f64> {
        match self {
            GrowthField::Saturating { c1, c2, r1, r2, c4 } => {
                Some(c1 / c2 * (r1 - r2 * (-c4 * a).exp()) - 1.0)
            }
            _ => None,
        }
    }

    fn check_domain(&self, x: f64) -> Result<()> {
        let x_max = self.x_max();
        if x.is_nan() || x < 0.0 || x > x_max {
            return Err(Error::Domain { x, x_max });
        }
        Ok(())
    }

    /// `Gamma(a, x)`.
    pub fn rate(&self, a: f64, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        Ok(match self {
            GrowthField::Logistic { rate, x_max } => rate * x * (x_max - x),
            GrowthField::PowerLaw {
                rate,
                alpha,
                beta,
                x_max,
            } => rate * x.powf(*alpha) * (x_max - x).powf(*beta),
            GrowthField::Saturating { c1, c2, r1, r2, c4 } => {
                c1 * x / (1.0 + x) * (r1 - r2 * (-c4 * a).exp()) - c2 * x
            }
            GrowthField::Tabulated(t) => t.eval(a, x)?,
        })
    }

    /// `d Gamma / dx` at `(a, x)`: analytic for closed forms, centred
    /// differences for tables.
    pub fn rate_slope(&self, a: f64, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        Ok(match self {
            GrowthField::Logistic { rate, x_max } => rate * (x_max - 2.0 * x),
            GrowthField::PowerLaw {
                rate,
                alpha,
                beta,
                x_max,
            } => {
                if x == 0.0 {
                    f64::INFINITY
                } else {
                    let r = x_max - x;
                    rate * (alpha * x.powf(alpha - 1.0) * r.powf(*beta)
                        - beta * x.powf(*alpha) * r.powf(beta - 1.0))
                }
            }
            GrowthField::Saturating { c1, c2, r1, r2, c4 } => {
                c1 / ((1.0 + x) * (1.0 + x)) * (r1 - r2 * (-c4 * a).exp()) - c2
            }
            GrowthField::Tabulated(t) => {
                let x_max = t.x_max();
                let h = 1e-6 * x_max;
                let lo = (x - h).max(0.0);
                let hi = (x + h).min(x_max);
                (t.eval(a, hi)? - t.eval(a, lo)?) / (hi - lo)
            }
        })
    }

    /// `true` when the field is identically zero.
    pub fn is_zero(&self) -> bool {
        match self {
            GrowthField::Tabulated(t) => t.values.iter().all(|v| *v == 0.0),
            _ => false,
        }
    }
}

/// Upper end of an age window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AgeBound {
    Finite(f64),
    Unbounded,
}

/// Total division rate `B(a, x)`.
#[derive(Debug, Clone, PartialEq)]
pub enum DivisionRate {
    /// `scale * x^exponent` on `start <= a <= end`.
    PowerWindow {
        scale: f64,
        exponent: f64,
        start: f64,
        end: AgeBound,
    },
    /// `max_rate x^h / (half^h + x^h)` for `a >= start`.
    HillAge {
        max_rate: f64,
        half_content: f64,
        exponent: f64,
        start: f64,
    },
    /// `rate` on `0 <= a <= end`, independent of content.
    ConstantWindow {
        rate: f64,
        end: f64,
    },
    Tabulated(Table2),
}

impl DivisionRate {
    pub fn power_window(scale: f64, exponent: f64, start: f64, end: AgeBound) -> Result<Self> {
        positive("division.scale", scale)?;
        if !(exponent >= 1.0) {
            return Err(Error::param("division.exponent", "must be >= 1"));
        }
        nonnegative("division.start", start)?;
        if let AgeBound::Finite(e) = end {
            if !(e > start) {
                return Err(Error::param("division.end", "must exceed division.start"));
            }
        }
        Ok(DivisionRate::PowerWindow {
            scale,
            exponent,
            start,
            end,
        })
    }

    pub fn hill_age(max_rate: f64, half_content: f64, exponent: f64, start: f64) -> Result<Self> {
        positive("division.max_rate", max_rate)?;
        positive("division.half_content", half_content)?;
        positive("division.exponent", exponent)?;
        nonnegative("division.start", start)?;
        Ok(DivisionRate::HillAge {
            max_rate,
            half_content,
            exponent,
            start,
        })
    }

    pub fn constant_window(rate: f64, end: f64) -> Result<Self> {
        nonnegative("division.rate", rate)?;
        positive("division.end", end)?;
        Ok(DivisionRate::ConstantWindow { rate, end })
    }

    pub fn tabulated(table: Table2) -> Result<Self> {
        if table.min() < 0.0 {
            return Err(Error::param("division.table", "rates must be nonnegative"));
        }
        Ok(DivisionRate::Tabulated(table))
    }

    /// `B(a, x)`. Defined for every `x >= 0`; tables clamp to their range.
    pub fn value(&self, a: f64, x: f64) -> f64 {
        match self {
            DivisionRate::PowerWindow {
                scale,
                exponent,
                start,
                end,
            } => {
                let inside = a >= *start
                    && match end {
                        AgeBound::Finite(e) => a <= *e,
                        AgeBound::Unbounded => true,
                    };
                if inside {
                    scale * x.powf(*exponent)
                } else {
                    0.0
                }
            }
            DivisionRate::HillAge {
                max_rate,
                half_content,
                exponent,
                start,
            } => {
                if a >= *start {
                    let xh = x.powf(*exponent);
                    max_rate * xh / (half_content.powf(*exponent) + xh)
                } else {
                    0.0
                }
            }
            DivisionRate::ConstantWindow { rate, end } => {
                if a <= *end {
                    *rate
                } else {
                    0.0
                }
            }
            DivisionRate::Tabulated(t) => t.eval(a, x.clamp(0.0, t.x_max())).unwrap_or(0.0),
        }
    }

    /// `B` at a quadrature node: the mean of the two one-sided limits when
    /// `a` sits on a jump, so trapezoid sums stay second order there.
    pub fn node_value(&self, a: f64, x: f64) -> f64 {
        let tol = 1e-9 * (1.0 + a.abs());
        if self.breakpoints().iter().any(|b| (b - a).abs() <= tol) {
            let d = 2.0 * tol;
            0.5 * (self.value((a - d).max(0.0), x) + self.value(a + d, x))
        } else {
            self.value(a, x)
        }
    }

    /// Ages where the rate jumps; integrators step exactly onto them.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            DivisionRate::PowerWindow { start, end, .. } => {
                let mut v = vec![*start];
                if let AgeBound::Finite(e) = end {
                    v.push(*e);
                }
                v
            }
            DivisionRate::HillAge { start, .. } => vec![*start],
            DivisionRate::ConstantWindow { end, .. } => vec![*end],
            DivisionRate::Tabulated(_) => Vec::new(),
        }
        .into_iter()
        .filter(|a| *a > 0.0)
        .collect()
    }

    /// End of the age support when it is bounded.
    pub fn support_end(&self) -> Option<f64> {
        match self {
            DivisionRate::PowerWindow {
                end: AgeBound::Finite(e),
                ..
            } => Some(*e),
            DivisionRate::ConstantWindow { end, .. } => Some(*end),
            _ => None,
        }
    }

    /// Largest sampled value over `[0, a_max] x [0, x_max]`.
    pub fn sup(&self, a_max: f64, x_max: f64) -> f64 {
        match self {
            DivisionRate::PowerWindow {
                scale, exponent, ..
            } => scale * x_max.powf(*exponent),
            DivisionRate::HillAge {
                max_rate,
                half_content,
                exponent,
                ..
            } => {
                let xh = x_max.powf(*exponent);
                max_rate * xh / (half_content.powf(*exponent) + xh)
            }
            DivisionRate::ConstantWindow { rate, .. } => *rate,
            DivisionRate::Tabulated(_) => {
                let mut best: f64 = 0.0;
                for k in 0..=64 {
                    for i in 0..=64 {
                        let v = self.value(a_max * k as f64 / 64.0, x_max * i as f64 / 64.0);
                        best = best.max(v);
                    }
                }
                best
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            DivisionRate::ConstantWindow { rate, .. } => *rate == 0.0,
            DivisionRate::Tabulated(t) => t.values.iter().all(|v| *v == 0.0),
            _ => false,
        }
    }
}

/// Daughter-content distribution, as a fraction of the mother's content.
///
/// Every kernel factorises as `b(a, x, y) = B(a, y) k(x, y)` with
/// `int k(x, y) dx = 1`.
#[derive(Debug, Clone, PartialEq)]
pub enum RepartitionKernel {
    /// `k = 1_{x <= y} / y`.
    Uniform,
    /// `k = 1_{margin y <= x <= (1 - margin) y} / (y (1 - 2 margin))`.
    TruncatedUniform { margin: f64 },
    /// Atom at `x = y / 2`.
    EqualMitosis,
    /// Histogram over the fraction `x / y` on equal bins of `[0, 1]`.
    Tabulated(Vec<f64>),
}

/// Normalised shape of a kernel on the fraction `r = x / y`.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelShape {
    /// Uniform pieces `(lo, hi, mass)` with `sum mass = 1`.
    Boxes(Vec<(f64, f64, f64)>),
    /// All mass at one fraction.
    Atom(f64),
}

impl RepartitionKernel {
    pub fn truncated_uniform(margin: f64) -> Result<Self> {
        if !(margin > 0.0 && margin < 0.5) {
            return Err(Error::param("kernel.margin", "must lie in (0, 1/2)"));
        }
        Ok(RepartitionKernel::TruncatedUniform { margin })
    }

    /// Histogram kernel. Masses are renormalised; the histogram must be
    /// symmetric about `1/2` so that content is conserved at division.
    pub fn tabulated(masses: Vec<f64>) -> Result<Self> {
        if masses.is_empty() || masses.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::param(
                "kernel.masses",
                "needs nonnegative bin masses",
            ));
        }
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(Error::param("kernel.masses", "total mass is zero"));
        }
        let n = masses.len();
        for j in 0..n / 2 {
            if (masses[j] - masses[n - 1 - j]).abs() > 1e-9 * total {
                return Err(Error::param("kernel.masses", "histogram is not symmetric"));
            }
        }
        Ok(RepartitionKernel::Tabulated(
            masses.into_iter().map(|m| m / total).collect(),
        ))
    }

    pub fn shape(&self) -> KernelShape {
        match self {
            RepartitionKernel::Uniform => KernelShape::Boxes(vec![(0.0, 1.0, 1.0)]),
            RepartitionKernel::TruncatedUniform { margin } => {
                KernelShape::Boxes(vec![(*margin, 1.0 - margin, 1.0)])
            }
            RepartitionKernel::EqualMitosis => KernelShape::Atom(0.5),
            RepartitionKernel::Tabulated(m) => {
                let h = 1.0 / m.len() as f64;
                KernelShape::Boxes(
                    m.iter()
                        .enumerate()
                        .filter(|(_, w)| **w > 0.0)
                        .map(|(j, w)| (j as f64 * h, (j + 1) as f64 * h, *w))
                        .collect(),
                )
            }
        }
    }

    pub fn is_atomic(&self) -> bool {
        matches!(self.shape(), KernelShape::Atom(_))
    }

    /// Pointwise `b(a, x, y)`; `None` for the atomic kernel.
    pub fn density(&self, rate: &DivisionRate, a: f64, x: f64, y: f64) -> Option<f64> {
        match self.shape() {
            KernelShape::Atom(_) => None,
            KernelShape::Boxes(boxes) => {
                if y <= 0.0 {
                    return Some(0.0);
                }
                let r = x / y;
                let k: f64 = boxes
                    .iter()
                    .filter(|(lo, hi, _)| r >= *lo && r <= *hi)
                    .map(|(lo, hi, m)| m / ((hi - lo) * y))
                    .sum();
                Some(rate.value(a, y) * k)
            }
        }
    }

    /// `sup_{x, y} k(x, y) * y`, the largest density on the fraction scale.
    fn peak_fraction_density(&self) -> f64 {
        match self.shape() {
            KernelShape::Atom(_) => f64::INFINITY,
            KernelShape::Boxes(b) => b
                .iter()
                .map(|(lo, hi, m)| m / (hi - lo))
                .fold(0.0, f64::max),
        }
    }

    /// `sup b` over the domain, infinite when `B / y` is unbounded near 0.
    pub fn sup_density(&self, rate: &DivisionRate, a_max: f64, x_max: f64) -> f64 {
        let peak = self.peak_fraction_density();
        if !peak.is_finite() {
            return f64::INFINITY;
        }
        let mut best: f64 = 0.0;
        for k in 0..=200 {
            let a = a_max * k as f64 / 200.0;
            for i in 1..=200 {
                let y = x_max * i as f64 / 200.0;
                best = best.max(rate.value(a, y) / y);
            }
            // behaviour as y -> 0
            let tiny = 1e-9 * x_max;
            let near_zero = rate.value(a, tiny) / tiny;
            if near_zero > 1e3 * best.max(1.0) {
                return f64::INFINITY;
            }
        }
        peak * best
    }
}

/// Complete model: growth field, division rate and kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCoefficients {
    pub growth: GrowthField,
    pub division: DivisionRate,
    pub kernel: RepartitionKernel,
}

impl ModelCoefficients {
    pub fn new(growth: GrowthField, division: DivisionRate, kernel: RepartitionKernel) -> Self {
        ModelCoefficients {
            growth,
            division,
            kernel,
        }
    }

    pub fn x_max(&self) -> f64 {
        self.growth.x_max()
    }

    /// The proliferation model used in the two-phase experiments:
    /// saturating growth, Hill division after age 23, uniform repartition.
    pub fn reference() -> Self {
        ModelCoefficients {
            growth: GrowthField::saturating(0.1, 0.075, 3.0, 1.95, 0.4).unwrap(),
            division: DivisionRate::hill_age(1.2, 1.5, 5.0, 23.0).unwrap(),
            kernel: RepartitionKernel::Uniform,
        }
    }
}

/// Transition rate from the proliferating to the quiescent compartment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transition {
    Constant(f64),
    /// `max_rate half^h / (half^h + x^h)` for `a >= onset`.
    Hill {
        max_rate: f64,
        half_content: f64,
        exponent: f64,
        onset: f64,
    },
}

impl Transition {
    pub fn value(&self, a: f64, x: f64) -> f64 {
        match *self {
            Transition::Constant(l) => l,
            Transition::Hill {
                max_rate,
                half_content,
                exponent,
                onset,
            } => {
                if a >= onset {
                    let hh = half_content.powf(exponent);
                    max_rate * hh / (hh + x.powf(exponent))
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Transition::Constant(_))
    }
}

/// Hill recruitment `G(N) = (hi theta^n + lo N^n) / (theta^n + N^n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recruitment {
    /// Rate at vanishing population (`alpha_1`).
    pub low_density_rate: f64,
    /// Rate at saturation (`alpha_2`).
    pub high_density_rate: f64,
    /// Population scale `theta`.
    pub threshold: f64,
    /// Hill exponent `n`.
    pub exponent: f64,
}

impl Recruitment {
    pub fn new(alpha1: f64, alpha2: f64, threshold: f64, exponent: f64) -> Result<Self> {
        nonnegative("recruitment.alpha2", alpha2)?;
        if !(alpha1 > alpha2) {
            return Err(Error::param("recruitment.alpha1", "must exceed alpha2"));
        }
        positive("recruitment.theta", threshold)?;
        positive("recruitment.n", exponent)?;
        Ok(Recruitment {
            low_density_rate: alpha1,
            high_density_rate: alpha2,
            threshold,
            exponent,
        })
    }

    pub fn rate(&self, population: f64) -> f64 {
        recruitment(population, self)
    }
}

/// `G(N)` for a weighted population `N >= 0`.
pub fn recruitment(population: f64, r: &Recruitment) -> f64 {
    let tn = r.threshold.powf(r.exponent);
    let nn = population.max(0.0).powf(r.exponent);
    if nn.is_infinite() {
        return r.high_density_rate;
    }
    (r.low_density_rate * tn + r.high_density_rate * nn) / (tn + nn)
}

/// Parameters of the proliferating/quiescent system.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPhaseParams {
    /// Death rate of proliferating cells (`d1`).
    pub death_proliferating: f64,
    /// Death rate of quiescent cells (`d2`).
    pub death_quiescent: f64,
    pub transition: Transition,
    pub recruitment: Recruitment,
}

impl TwoPhaseParams {
    pub fn new(d1: f64, d2: f64, transition: Transition, recruitment: Recruitment) -> Result<Self> {
        nonnegative("twophase.d1", d1)?;
        nonnegative("twophase.d2", d2)?;
        match transition {
            Transition::Constant(l) => nonnegative("twophase.L", l)?,
            Transition::Hill {
                max_rate,
                half_content,
                exponent,
                onset,
            } => {
                nonnegative("twophase.A3", max_rate)?;
                positive("twophase.A2", half_content)?;
                positive("twophase.gamma2", exponent)?;
                nonnegative("twophase.a_bar", onset)?;
            }
        }
        Ok(TwoPhaseParams {
            death_proliferating: d1,
            death_quiescent: d2,
            transition,
            recruitment,
        })
    }

    /// Parameter set of the growth experiment with `n = 1/k`.
    pub fn reference(d1: f64, k: u32) -> Self {
        TwoPhaseParams {
            death_proliferating: d1,
            death_quiescent: 0.0,
            transition: Transition::Hill {
                max_rate: 4.0,
                half_content: 2.0,
                exponent: 5.0,
                onset: 18.0,
            },
            recruitment: Recruitment {
                low_density_rate: 8.0,
                high_density_rate: 0.0,
                threshold: 1.0,
                exponent: 1.0 / k as f64,
            },
        }
    }
}

/// Moment residuals of a kernel against its division rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelReport {
    /// `max |int b dx - B|`.
    pub mass_residual: f64,
    /// `max |2 int x b dx - y B|`.
    pub content_residual: f64,
}

/// Compare the discretised kernel moments with `B` and `y B` on every node.
///
/// The daughter integral uses the same piecewise-linear projection as the
/// eigensolver; the atom is integrated exactly.
pub fn check_kernel_consistency(
    kernel: &RepartitionKernel,
    rate: &DivisionRate,
    grid: &Grid,
) -> Result<KernelReport> {
    if let DivisionRate::Tabulated(t) = rate {
        if t.x_max() < grid.x_max() {
            return Err(Error::param(
                "division.table",
                "tabulated rate does not cover the grid's content range",
            ));
        }
    }
    let shape = kernel.shape();
    let mut proj = vec![0.0; grid.nx()];
    let mut report = KernelReport {
        mass_residual: 0.0,
        content_residual: 0.0,
    };
    for k in 0..grid.na() {
        let a = grid.a(k);
        for j in 0..grid.nx() {
            let y = grid.x(j);
            let b = rate.value(a, y);
            project_shape(grid, &shape, y, 1.0, &mut proj);
            let mut m0 = 0.0;
            let mut m1 = 0.0;
            for (i, p) in proj.iter_mut().enumerate() {
                m0 += grid.wx(i) * *p;
                m1 += grid.wx(i) * grid.x(i) * *p;
                *p = 0.0;
            }
            report.mass_residual = report.mass_residual.max((b * m0 - b).abs());
            report.content_residual = report.content_residual.max((2.0 * b * m1 - y * b).abs());
        }
    }
    Ok(report)
}

/// Add `weight * (1/w_i) int hat_i(x) k(x, y) dx` to `out[i]`.
///
/// This is the daughter distribution of a mother of content `y` tested
/// against the hat basis, so `sum_i w_i out[i]` gains exactly `weight`.
pub(crate) fn project_shape(
    grid: &Grid,
    shape: &KernelShape,
    y: f64,
    weight: f64,
    out: &mut [f64],
) {
    let mut acc = Deposit::new(grid.nx());
    acc.project(grid, shape, y, weight);
    acc.add_into(out);
}

/// Accumulates many kernel projections on one content grid.
///
/// Nodes whose hat lies inside a box all receive the same value, so they
/// are recorded as a range update; only the few nodes cut by a box edge
/// are integrated one by one.
#[derive(Debug, Clone)]
pub(crate) struct Deposit {
    direct: Vec<f64>,
    ramp: Vec<f64>,
}

impl Deposit {
    pub(crate) fn new(nx: usize) -> Self {
        Deposit {
            direct: vec![0.0; nx],
            ramp: vec![0.0; nx + 1],
        }
    }

    pub(crate) fn clear(&mut self) {
        self.direct.iter_mut().for_each(|v| *v = 0.0);
        self.ramp.iter_mut().for_each(|v| *v = 0.0);
    }

    fn add_range(&mut self, first: usize, last: usize, v: f64) {
        if first <= last {
            self.ramp[first] += v;
            self.ramp[last + 1] -= v;
        }
    }

    /// Add the accumulated values to `out`.
    pub(crate) fn add_into(&self, out: &mut [f64]) {
        let mut run = 0.0;
        for (i, o) in out.iter_mut().enumerate() {
            run += self.ramp[i];
            *o += run + self.direct[i];
        }
    }

    /// Spread `mass` uniformly over `[zl, zh]`.
    pub(crate) fn segment(&mut self, grid: &Grid, zl: f64, zh: f64, mass: f64) {
        let (zl, zh) = if zl <= zh { (zl, zh) } else { (zh, zl) };
        self.project(grid, &KernelShape::Boxes(vec![(zl, zh, 1.0)]), 1.0, mass);
    }

    pub(crate) fn point(&mut self, grid: &Grid, z: f64, wgt: f64) {
        let h = grid.dx();
        let i = grid.x_cell(z);
        let t = ((z - grid.x(i)) / h).clamp(0.0, 1.0);
        self.direct[i] += wgt * (1.0 - t) / grid.wx(i);
        self.direct[i + 1] += wgt * t / grid.wx(i + 1);
    }

    pub(crate) fn project(&mut self, grid: &Grid, shape: &KernelShape, y: f64, weight: f64) {
        if weight == 0.0 {
            return;
        }
        match shape {
            KernelShape::Atom(r) => self.point(grid, r * y, weight),
            KernelShape::Boxes(boxes) => {
                let h = grid.dx();
                let last_node = grid.nx() - 1;
                for &(lo, hi, mass) in boxes {
                    let zl = lo * y;
                    let zh = hi * y;
                    let wgt = weight * mass;
                    if zh - zl <= 1e-12 * grid.x_max() {
                        self.point(grid, 0.5 * (zl + zh), wgt);
                        continue;
                    }
                    let scale = wgt / (zh - zl);
                    let first = grid.x_cell(zl);
                    let last = (grid.x_cell(zh) + 1).min(last_node);
                    // nodes whose whole hat support lies in [zl, zh]
                    let inner_first = if zl <= 0.0 {
                        0
                    } else {
                        (zl / h).ceil() as usize + 1
                    };
                    let inner_last = if zh >= grid.x_max() {
                        last_node as isize
                    } else {
                        (zh / h).floor() as isize - 1
                    };
                    let inner_last = inner_last.min(last as isize);
                    let mut partial = |i: usize| {
                        let c = grid.hat_cumulative(i, zh) - grid.hat_cumulative(i, zl);
                        if c != 0.0 {
                            self.direct[i] += scale * c / grid.wx(i);
                        }
                    };
                    if (inner_first as isize) <= inner_last {
                        let inner_last = inner_last as usize;
                        (first..inner_first.min(last + 1)).for_each(&mut partial);
                        (inner_last + 1..=last).for_each(&mut partial);
                        self.add_range(inner_first, inner_last, scale);
                    } else {
                        (first..=last).for_each(&mut partial);
                    }
                }
            }
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be positive, got {v}")))
    }
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be nonnegative, got {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logistic_vanishes_at_both_ends() {
        let g = GrowthField::logistic(1.0, 1.0).unwrap();
        assert_eq!(g.rate(0.7, 0.0).unwrap(), 0.0);
        for a in [0.0, 1.3, 50.0] {
            assert_eq!(g.rate(a, 1.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn saturating_bounds() {
        let g = GrowthField::saturating(0.1, 0.075, 3.0, 1.95, 0.4).unwrap();
        // (c1/c2) r1 - 1 and (c1/c2)(r1 - r2) - 1 with c1/c2 = 4/3
        let c = 0.1 / 0.075;
        assert_relative_eq!(g.x_max(), c * 3.0 - 1.0, epsilon = 1e-12);
        assert_relative_eq!(g.x_max(), 3.0, epsilon = 1e-12);
        assert_relative_eq!(g.zero_curve(0.0).unwrap(), c * 1.05 - 1.0, epsilon = 1e-12);
        assert_relative_eq!(g.zero_curve(0.0).unwrap(), 0.4, epsilon = 1e-12);
        assert!(g.rate(0.0, g.x_max()).unwrap() <= 0.0);
    }

    #[test]
    fn saturating_rejects_inverted_rates() {
        assert!(GrowthField::saturating(0.1, 0.2, 3.0, 1.95, 0.4).is_err());
    }

    #[test]
    fn domain_errors_are_not_clamped() {
        let g = GrowthField::logistic(1.0, 1.0).unwrap();
        assert!(matches!(g.rate(0.0, 1.0001), Err(Error::Domain { .. })));
        assert!(matches!(g.rate(0.0, -1e-9), Err(Error::Domain { .. })));
    }

    #[test]
    fn slope_matches_difference_quotient() {
        let fields = [
            GrowthField::logistic(1.3, 2.0).unwrap(),
            GrowthField::power_law(0.8, 0.5, 1.5, 2.0).unwrap(),
            GrowthField::saturating(0.1, 0.075, 3.0, 1.95, 0.4).unwrap(),
        ];
        for g in &fields {
            let h = 1e-6;
            for &(a, x) in &[(0.3, 0.4), (5.0, 1.1), (20.0, 1.7)] {
                let fd = (g.rate(a, x + h).unwrap() - g.rate(a, x - h).unwrap()) / (2.0 * h);
                assert_relative_eq!(g.rate_slope(a, x).unwrap(), fd, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn tabulated_growth_interpolates() {
        let t = Table2::new(
            vec![0.0, 1.0],
            vec![0.0, 1.0, 2.0],
            vec![0.0, 1.0, 0.0, 0.0, 3.0, -1.0],
        )
        .unwrap();
        let g = GrowthField::tabulated(t).unwrap();
        assert_relative_eq!(g.rate(0.5, 1.0).unwrap(), 2.0);
        assert_relative_eq!(g.rate(0.5, 0.5).unwrap(), 1.0);
        assert_relative_eq!(g.rate(9.0, 1.5).unwrap(), 1.0);
        assert!(g.rate(0.0, 2.5).is_err());
    }

    #[test]
    fn division_rates_vanish_at_zero_content() {
        let p = DivisionRate::power_window(2.0, 1.0, 1.0, AgeBound::Unbounded).unwrap();
        let h = DivisionRate::hill_age(1.2, 1.5, 5.0, 23.0).unwrap();
        for a in [0.0, 1.5, 30.0] {
            assert_eq!(p.value(a, 0.0), 0.0);
            assert_eq!(h.value(a, 0.0), 0.0);
        }
        assert_eq!(h.value(22.9, 2.0), 0.0);
        assert!(h.value(23.0, 2.0) > 0.0);
        let c = DivisionRate::constant_window(1.0, 2.0).unwrap();
        assert_eq!(c.value(2.0, 0.5), 1.0);
        assert_eq!(c.value(2.0001, 0.5), 0.0);
        assert_eq!(c.support_end(), Some(2.0));
    }

    #[test]
    fn recruitment_limits() {
        let r = Recruitment::new(8.0, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(recruitment(0.0, &r), 8.0);
        assert_relative_eq!(recruitment(1e300, &r), 0.5, max_relative = 1e-12);
        assert_relative_eq!(recruitment(1.0, &r), (8.0 + 0.5) / 2.0);
        let r = Recruitment::new(3.0, 1.0, 2.5, 0.5).unwrap();
        assert_relative_eq!(recruitment(2.5, &r), 2.0);
        assert_eq!(recruitment(f64::INFINITY, &r), 1.0);
    }

    #[test]
    fn recruitment_rejects_bad_parameters() {
        assert!(Recruitment::new(1.0, 2.0, 1.0, 1.0).is_err());
        assert!(Recruitment::new(2.0, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn kernel_moments_vanish() {
        let g = Grid::new(2.0, 41, 30.0, 31).unwrap();
        let rate = DivisionRate::power_window(1.0, 2.0, 0.0, AgeBound::Unbounded).unwrap();
        for kernel in [
            RepartitionKernel::Uniform,
            RepartitionKernel::truncated_uniform(0.25).unwrap(),
            RepartitionKernel::EqualMitosis,
            RepartitionKernel::tabulated(vec![1.0, 3.0, 3.0, 1.0]).unwrap(),
        ] {
            let r = check_kernel_consistency(&kernel, &rate, &g).unwrap();
            assert!(r.mass_residual < 1e-12, "{kernel:?}: {r:?}");
            assert!(r.content_residual < 1e-12, "{kernel:?}: {r:?}");
        }
    }

    #[test]
    fn truncated_first_moment_in_closed_form() {
        // 2 B/(y(1-2e)) ((1-e)^2 - e^2) y^2 / 2 = y B
        let (eta, y, b) = (0.25_f64, 1.7_f64, 0.9_f64);
        let m1 =
            2.0 * b / (y * (1.0 - 2.0 * eta)) * ((1.0 - eta).powi(2) - eta.powi(2)) * y * y / 2.0;
        assert_relative_eq!(m1, y * b, epsilon = 1e-14);
    }

    #[test]
    fn asymmetric_histogram_is_rejected() {
        assert!(RepartitionKernel::tabulated(vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn pointwise_density() {
        let rate = DivisionRate::constant_window(2.0, 1.0).unwrap();
        let k = RepartitionKernel::Uniform;
        assert_relative_eq!(k.density(&rate, 0.5, 0.3, 0.5).unwrap(), 4.0);
        assert_eq!(k.density(&rate, 0.5, 0.6, 0.5).unwrap(), 0.0);
        assert!(RepartitionKernel::EqualMitosis
            .density(&rate, 0.5, 0.25, 0.5)
            .is_none());
    }

    #[test]
    fn range_deposit_matches_node_by_node_integration() {
        let g = Grid::new(2.0, 33, 1.0, 16).unwrap();
        for kernel in [
            RepartitionKernel::Uniform,
            RepartitionKernel::truncated_uniform(0.3).unwrap(),
            RepartitionKernel::tabulated(vec![1.0, 0.0, 2.0, 0.0, 1.0]).unwrap(),
        ] {
            let KernelShape::Boxes(boxes) = kernel.shape() else {
                unreachable!()
            };
            for y in [0.0, 0.01, 0.0625, 0.77, 1.3125, 2.0] {
                let mut fast = vec![0.0; g.nx()];
                project_shape(&g, &kernel.shape(), y, 1.5, &mut fast);
                for i in 0..g.nx() {
                    let mut slow = 0.0;
                    for &(lo, hi, m) in &boxes {
                        let (zl, zh) = (lo * y, hi * y);
                        if zh - zl > 1e-12 {
                            slow += 1.5 * m * (g.hat_cumulative(i, zh) - g.hat_cumulative(i, zl))
                                / ((zh - zl) * g.wx(i));
                        }
                    }
                    if y > 0.0 {
                        assert_relative_eq!(fast[i], slow, epsilon = 1e-12, max_relative = 1e-12);
                    }
                }
            }
        }
    }
}
