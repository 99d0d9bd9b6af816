//! INI run configuration.

use std::cell::RefCell;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cellcycle::coefficients::{
    AgeBound, DivisionRate, GrowthField, ModelCoefficients, Recruitment, RepartitionKernel, Table2,
    Transition, TwoPhaseParams,
};
use cellcycle::eigensolver::{PowerIteration, SolverOptions, DEFAULT_DA, DEFAULT_NX};
use cellcycle::grid::MIN_NODES;
use cellcycle::transport::EntropyFunctional;
use cellcycle::twophase::PopulationWeights;
use ini::{Ini, Properties};

use crate::error::{CliError, Result};

/// Sections a configuration may contain.
const SECTIONS: [&str; 9] = [
    "run", "growth", "division", "kernel", "grid", "solver", "simulate", "twophase", "sweep",
];

/// Age extent of the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AgeRange {
    /// Chosen from the model (survival tail or decay beyond the window).
    Auto,
    Fixed(f64),
}

/// Age resolution of the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AgeResolution {
    Step(f64),
    Nodes(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub nx: usize,
    pub ages: AgeResolution,
    pub a_max: AgeRange,
}

/// Initial density of `simulate`: `scale N (1 + amplitude sin(2 pi x / x_M))`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    pub scale: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateConfig {
    pub horizon: f64,
    pub initial: InitialData,
    pub entropy: EntropyFunctional,
    pub renormalize: bool,
    pub snapshots: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoPhaseConfig {
    pub params: TwoPhaseParams,
    pub horizon: f64,
    pub record_every: usize,
    pub weights: PopulationWeights,
    /// Fit window; `None` is the last half of the horizon.
    pub fit_window: Option<(f64, f64)>,
}

/// Command run at every sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepCommand {
    Eigen,
    Simulate,
    TwoPhase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// `section.key` to vary.
    pub key: String,
    pub values: Vec<String>,
    pub command: SweepCommand,
}

/// A parsed configuration. Sections a command does not need may be
/// absent; they are parsed eagerly when present.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelCoefficients,
    pub grid: GridConfig,
    pub solver: SolverOptions,
    pub simulate: SimulateConfig,
    pub twophase: Option<TwoPhaseConfig>,
    pub sweep: Option<SweepConfig>,
    pub threads: usize,
}

/// Raw key/value document with the directory used to resolve table paths.
#[derive(Debug, Clone)]
pub struct ConfigSource {
    pub ini: Ini,
    pub base: PathBuf,
}

impl ConfigSource {
    pub fn load(path: &Path) -> Result<Self> {
        let ini = Ini::load_from_file(path).map_err(|e| CliError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(ConfigSource { ini, base })
    }

    pub fn parse_str(text: &str, base: &Path) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| CliError::Read {
            path: PathBuf::from("<string>"),
            reason: e.to_string(),
        })?;
        Ok(ConfigSource {
            ini,
            base: base.to_path_buf(),
        })
    }

    /// Override `section.key`.
    pub fn set(&mut self, dotted: &str, value: &str) -> Result<()> {
        let (section, key) = dotted
            .split_once('.')
            .ok_or_else(|| CliError::invalid("sweep.key", dotted, "expected section.key"))?;
        if !SECTIONS.contains(&section) {
            return Err(CliError::Unknown { key: dotted.into() });
        }
        self.ini.with_section(Some(section)).set(key, value);
        Ok(())
    }

    pub fn get(&self, dotted: &str) -> Option<&str> {
        let (section, key) = dotted.split_once('.')?;
        self.ini.section(Some(section))?.get(key)
    }

    pub fn to_config(&self) -> Result<RunConfig> {
        for (name, _) in self.ini.iter() {
            match name {
                Some(s) if SECTIONS.contains(&s) => {}
                Some(s) => {
                    return Err(CliError::Unknown {
                        key: format!("[{s}]"),
                    })
                }
                None => {
                    if let Some((key, _)) = self.ini.general_section().iter().next() {
                        return Err(CliError::Unknown { key: key.into() });
                    }
                }
            }
        }
        let run = self.section("run");
        let threads = run.parse_or("threads", 1usize)?;
        if threads == 0 {
            return Err(CliError::invalid("run.threads", "0", "must be at least 1"));
        }
        run.finish()?;
        Ok(RunConfig {
            model: self.model()?,
            grid: self.grid()?,
            solver: self.solver()?,
            simulate: self.simulate()?,
            twophase: self.twophase()?,
            sweep: self.sweep()?,
            threads,
        })
    }

    fn section(&self, name: &'static str) -> Section<'_> {
        Section {
            name,
            props: self.ini.section(Some(name)),
            used: RefCell::new(Vec::new()),
        }
    }

    fn has(&self, name: &str) -> bool {
        self.ini.section(Some(name)).is_some()
    }

    fn table(&self, s: &Section<'_>) -> Result<Table2> {
        let file = s.required("table")?;
        let path = self.base.join(file);
        let key = s.key("table");
        let mut reader = csv::Reader::from_path(&path)
            .map_err(|e| CliError::invalid(&key, file, e.to_string()))?;
        let mut samples = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| CliError::invalid(&key, file, e.to_string()))?;
            let field = |j: usize| -> Result<f64> {
                row.get(j)
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| CliError::invalid(&key, file, "rows must be `a,x,value`"))
            };
            samples.push((field(0)?, field(1)?, field(2)?));
        }
        Ok(Table2::from_samples(&samples)?)
    }

    fn model(&self) -> Result<ModelCoefficients> {
        let g = self.section("growth");
        let growth = match g.required("type")? {
            "logistic" => GrowthField::logistic(g.parse("rate")?, g.parse("x_max")?)?,
            "power_law" => GrowthField::power_law(
                g.parse("rate")?,
                g.parse("alpha")?,
                g.parse("beta")?,
                g.parse("x_max")?,
            )?,
            "saturating" => GrowthField::saturating(
                g.parse("c1")?,
                g.parse("c2")?,
                g.parse("r1")?,
                g.parse("r2")?,
                g.parse("c4")?,
            )?,
            "tabulated" => GrowthField::tabulated(self.table(&g)?)?,
            other => {
                return Err(g.unknown_variant(
                    "type",
                    other,
                    "logistic, power_law, saturating, tabulated",
                ))
            }
        };
        g.finish()?;

        let d = self.section("division");
        let division = match d.required("type")? {
            "constant_window" => DivisionRate::constant_window(d.parse("rate")?, d.parse("end")?)?,
            "power_window" => {
                let end = match d.required("end")? {
                    "inf" | "infinity" => AgeBound::Unbounded,
                    v => AgeBound::Finite(parse_value(&d.key("end"), v)?),
                };
                DivisionRate::power_window(
                    d.parse("scale")?,
                    d.parse("exponent")?,
                    d.parse_or("start", 0.0)?,
                    end,
                )?
            }
            "hill_age" => DivisionRate::hill_age(
                d.parse("max_rate")?,
                d.parse("half_content")?,
                d.parse("exponent")?,
                d.parse_or("start", 0.0)?,
            )?,
            "tabulated" => DivisionRate::tabulated(self.table(&d)?)?,
            other => {
                return Err(d.unknown_variant(
                    "type",
                    other,
                    "constant_window, power_window, hill_age, tabulated",
                ))
            }
        };
        d.finish()?;

        let k = self.section("kernel");
        let kernel = match k.optional("type").unwrap_or("uniform") {
            "uniform" => RepartitionKernel::Uniform,
            "truncated_uniform" => RepartitionKernel::truncated_uniform(k.parse("margin")?)?,
            "equal_mitosis" => RepartitionKernel::EqualMitosis,
            "tabulated" => RepartitionKernel::tabulated(k.list("masses")?)?,
            other => {
                return Err(k.unknown_variant(
                    "type",
                    other,
                    "uniform, truncated_uniform, equal_mitosis, tabulated",
                ))
            }
        };
        k.finish()?;
        Ok(ModelCoefficients::new(growth, division, kernel))
    }

    fn grid(&self) -> Result<GridConfig> {
        let s = self.section("grid");
        let nx = s.parse_or("nx", DEFAULT_NX)?;
        if nx < MIN_NODES {
            return Err(CliError::invalid(
                s.key("nx"),
                nx.to_string(),
                format!("must be >= {MIN_NODES}"),
            ));
        }
        let ages = match (s.optional("na"), s.optional("da")) {
            (Some(_), Some(_)) => {
                return Err(CliError::invalid(
                    s.key("na"),
                    "",
                    "give either grid.na or grid.da, not both",
                ));
            }
            (Some(_), None) => {
                let na: usize = s.parse("na")?;
                if na < MIN_NODES {
                    return Err(CliError::invalid(
                        s.key("na"),
                        na.to_string(),
                        format!("must be >= {MIN_NODES}"),
                    ));
                }
                AgeResolution::Nodes(na)
            }
            (None, _) => AgeResolution::Step(s.positive_or("da", DEFAULT_DA)?),
        };
        let a_max = match s.optional("a_max") {
            None | Some("auto") => AgeRange::Auto,
            Some(_) => AgeRange::Fixed(s.positive("a_max")?),
        };
        if matches!((ages, a_max), (AgeResolution::Nodes(_), AgeRange::Auto)) {
            return Err(CliError::invalid(
                s.key("na"),
                "",
                "grid.na needs a fixed grid.a_max; use grid.da with auto",
            ));
        }
        s.finish()?;
        Ok(GridConfig { nx, ages, a_max })
    }

    fn solver(&self) -> Result<SolverOptions> {
        let s = self.section("solver");
        let defaults = SolverOptions::default();
        let epsilons = match s.optional("epsilons") {
            Some(_) => s.list("epsilons")?,
            None => defaults.epsilons.clone(),
        };
        if epsilons.is_empty() || epsilons.iter().any(|e| e.is_nan() || *e <= 0.0) {
            return Err(CliError::invalid(
                s.key("epsilons"),
                format!("{epsilons:?}"),
                "needs positive values",
            ));
        }
        let options = SolverOptions {
            epsilons,
            tolerance: s.positive_or("tolerance", defaults.tolerance)?,
            power: PowerIteration {
                tolerance: s.positive_or("power_tolerance", defaults.power.tolerance)?,
                max_iterations: s.parse_or("max_iterations", defaults.power.max_iterations)?,
            },
            tail_closure: s.parse_or("tail_closure", defaults.tail_closure)?,
            control: defaults.control,
            launch_refinement: s.parse_or("launch_refinement", defaults.launch_refinement)?,
        };
        s.finish()?;
        Ok(options)
    }

    fn simulate(&self) -> Result<SimulateConfig> {
        let s = self.section("simulate");
        let initial = match s.optional("initial").unwrap_or("eigen") {
            "eigen" => InitialData {
                scale: s.positive_or("scale", 1.0)?,
                amplitude: 0.0,
            },
            "perturbed" => {
                let amplitude: f64 = s.parse_or("amplitude", 0.5)?;
                if !(0.0..=1.0).contains(&amplitude) {
                    return Err(CliError::invalid(
                        s.key("amplitude"),
                        amplitude.to_string(),
                        "must lie in [0, 1]",
                    ));
                }
                InitialData {
                    scale: s.positive_or("scale", 1.0)?,
                    amplitude,
                }
            }
            other => return Err(s.unknown_variant("initial", other, "eigen, perturbed")),
        };
        let entropy = match s.optional("entropy").unwrap_or("quadratic") {
            "quadratic" => EntropyFunctional::Quadratic,
            "absolute" => EntropyFunctional::Absolute,
            other => return Err(s.unknown_variant("entropy", other, "quadratic, absolute")),
        };
        let config = SimulateConfig {
            horizon: s.positive_or("horizon", 100.0)?,
            initial,
            entropy,
            renormalize: s.parse_or("renormalize", true)?,
            snapshots: match s.optional("snapshots") {
                Some(_) => s.list("snapshots")?,
                None => Vec::new(),
            },
        };
        s.finish()?;
        Ok(config)
    }

    fn twophase(&self) -> Result<Option<TwoPhaseConfig>> {
        if !self.has("twophase") {
            return Ok(None);
        }
        let s = self.section("twophase");
        let transition = match s.optional("transition").unwrap_or("hill") {
            "constant" => Transition::Constant(s.parse("L")?),
            "hill" => Transition::Hill {
                max_rate: s.parse("max_rate")?,
                half_content: s.parse("half_content")?,
                exponent: s.parse("exponent")?,
                onset: s.parse_or("onset", 0.0)?,
            },
            other => return Err(s.unknown_variant("transition", other, "constant, hill")),
        };
        let exponent = match (s.optional("k"), s.optional("n")) {
            (Some(_), Some(_)) => {
                return Err(CliError::invalid(
                    s.key("k"),
                    "",
                    "give either twophase.k or twophase.n",
                ))
            }
            (Some(_), None) => 1.0 / s.positive("k")?,
            (None, Some(_)) => s.positive("n")?,
            (None, None) => return Err(CliError::Missing { key: s.key("k") }),
        };
        let recruitment = Recruitment::new(
            s.parse("alpha1")?,
            s.parse_or("alpha2", 0.0)?,
            s.parse("theta")?,
            exponent,
        )?;
        let params = TwoPhaseParams::new(
            s.parse("d1")?,
            s.parse_or("d2", 0.0)?,
            transition,
            recruitment,
        )?;
        let weights = match s.optional("weights").unwrap_or("unit") {
            "unit" => PopulationWeights::Unit,
            "limit" => PopulationWeights::Limit,
            other => return Err(s.unknown_variant("weights", other, "unit, limit")),
        };
        let fit_window = match s.optional("fit_window") {
            None | Some("auto") => None,
            Some(v) => match s.list("fit_window")?.as_slice() {
                [a, b] if a < b => Some((*a, *b)),
                _ => {
                    return Err(CliError::invalid(
                        s.key("fit_window"),
                        v,
                        "expected `start, end` with start < end",
                    ))
                }
            },
        };
        let record_every = s.parse_or("record_every", 10usize)?;
        if record_every == 0 {
            return Err(CliError::invalid(
                s.key("record_every"),
                "0",
                "must be at least 1",
            ));
        }
        let config = TwoPhaseConfig {
            params,
            horizon: s.positive_or("horizon", 1000.0)?,
            record_every,
            weights,
            fit_window,
        };
        s.finish()?;
        Ok(Some(config))
    }

    fn sweep(&self) -> Result<Option<SweepConfig>> {
        if !self.has("sweep") {
            return Ok(None);
        }
        let s = self.section("sweep");
        let key = s.required("key")?.to_string();
        if key.starts_with("sweep.") || !key.contains('.') {
            return Err(CliError::invalid(
                s.key("key"),
                key,
                "expected section.key outside [sweep]",
            ));
        }
        let values: Vec<String> = s
            .required("values")?
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(CliError::invalid(
                s.key("values"),
                "",
                "needs at least one value",
            ));
        }
        let command = match s.optional("command").unwrap_or("eigen") {
            "eigen" => SweepCommand::Eigen,
            "simulate" => SweepCommand::Simulate,
            "twophase" => SweepCommand::TwoPhase,
            other => return Err(s.unknown_variant("command", other, "eigen, simulate, twophase")),
        };
        s.finish()?;
        Ok(Some(SweepConfig {
            key,
            values,
            command,
        }))
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| {
        CliError::invalid(
            key,
            value,
            format!("expected {}", std::any::type_name::<T>()),
        )
    })
}

/// One section, tracking which keys were read so leftovers can be
/// reported as unknown.
struct Section<'a> {
    name: &'static str,
    props: Option<&'a Properties>,
    used: RefCell<Vec<String>>,
}

impl<'a> Section<'a> {
    fn key(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn optional(&self, key: &str) -> Option<&'a str> {
        self.used.borrow_mut().push(key.to_string());
        self.props.and_then(|p| p.get(key)).map(str::trim)
    }

    fn required(&self, key: &str) -> Result<&'a str> {
        self.optional(key)
            .ok_or_else(|| CliError::Missing { key: self.key(key) })
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        parse_value(&self.key(key), self.required(key)?)
    }

    fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.optional(key) {
            Some(v) => parse_value(&self.key(key), v),
            None => Ok(default),
        }
    }

    fn positive(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parse(key)?;
        self.check_positive(key, v)
    }

    fn positive_or(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.parse_or(key, default)?;
        self.check_positive(key, v)
    }

    fn check_positive(&self, key: &str, v: f64) -> Result<f64> {
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(CliError::invalid(
                self.key(key),
                v.to_string(),
                "must be positive",
            ))
        }
    }

    fn list(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.required(key)?;
        raw.split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| parse_value(&self.key(key), v))
            .collect()
    }

    fn unknown_variant(&self, key: &str, value: &str, allowed: &str) -> CliError {
        CliError::invalid(self.key(key), value, format!("expected one of {allowed}"))
    }

    fn finish(self) -> Result<()> {
        let Some(props) = self.props else {
            return Ok(());
        };
        let used = self.used.borrow();
        match props.iter().find(|(k, _)| !used.iter().any(|u| u == k)) {
            Some((k, _)) => Err(CliError::Unknown { key: self.key(k) }),
            None => Ok(()),
        }
    }
}
