//! The five commands. Each computes its results first and writes files
//! only on success.

use std::f64::consts::{LN_2, PI};
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use cellcycle::characteristics::{check_weak_assumptions, FlowSolver, TAIL_TOLERANCE};
use cellcycle::coefficients::check_kernel_consistency;
use cellcycle::eigensolver::{auto_age_horizon, default_grid, solve, EigenSolution};
use cellcycle::error::Error as SolverError;
use cellcycle::grid::{Field, Grid};
use cellcycle::transport::{simulate, SimulationOptions, Trajectory};
use cellcycle::twophase::{
    classify_regime, effective_transition, lambda_from_lambda0, lambda_zero_criterion,
    limit_eigensystem, proliferating_start, s2_supersolution_check, simulate_twophase,
    TwoPhaseOptions, TwoPhaseRun,
};

use crate::config::{
    AgeRange, AgeResolution, ConfigSource, RunConfig, SweepCommand, TwoPhaseConfig,
};
use crate::error::{CliError, Result};

/// Ordered `key = value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub entries: Vec<(String, String)>,
}

impl Summary {
    pub fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Grid described by the configuration.
pub fn build_grid(config: &RunConfig) -> Result<Grid> {
    let x_max = config.model.x_max();
    let g = &config.grid;
    let grid = match (g.a_max, g.ages) {
        (AgeRange::Auto, AgeResolution::Step(da)) => {
            default_grid(&config.model, g.nx, da, &config.solver)?
        }
        (AgeRange::Fixed(a_max), AgeResolution::Step(da)) => {
            Grid::with_age_step(x_max, g.nx, a_max, da)?
        }
        (AgeRange::Fixed(a_max), AgeResolution::Nodes(na)) => Grid::new(x_max, g.nx, a_max, na)?,
        (AgeRange::Auto, AgeResolution::Nodes(_)) => {
            return Err(CliError::invalid(
                "grid.na",
                "",
                "grid.na needs a fixed grid.a_max",
            ))
        }
    };
    Ok(grid)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|source| CliError::Write {
        path: out.to_path_buf(),
        source,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::Write {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Write rows of displayable cells under `header`.
fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn write_field(path: &Path, name: &str, field: &Field) -> Result<()> {
    let g = *field.grid();
    let rows = (0..g.na()).flat_map(|k| {
        (0..g.nx()).map(move |i| {
            vec![
                g.a(k).to_string(),
                g.x(i).to_string(),
                field.at(k, i).to_string(),
            ]
        })
    });
    write_rows(path, &["a", "x", name], rows)
}

fn grid_summary(summary: &mut Summary, grid: &Grid) {
    summary.push("nx", grid.nx());
    summary.push("na", grid.na());
    summary.push("x_max", grid.x_max());
    summary.push("a_max", grid.a_max());
    summary.push("da", grid.da());
}

fn eigen_summary(sol: &EigenSolution) -> Summary {
    let mut s = Summary::default();
    s.push("lambda0", sol.lambda0);
    s.push("lambda1", sol.lambda1);
    s.push("mu_at_zero", sol.mu_at_zero);
    grid_summary(&mut s, sol.grid());
    for p in &sol.continuation {
        s.push(&format!("lambda_eps_{}", p.epsilon), p.lambda);
    }
    s.push("tail_fraction", sol.tail_fraction);
    let r = &sol.residuals;
    s.push("residual_birth", r.birth);
    s.push("residual_content", r.content);
    s.push("residual_age", r.age);
    s.push("residual_adjoint", r.adjoint);
    s.push("residual_pairing", r.pairing);
    s.push("age_outflow", r.outflow);
    for m in &r.moments {
        s.push(
            &format!("moment_{}", m.eta),
            format!("{} (bound {}, holds {})", m.value, m.bound, m.holds),
        );
    }
    s
}

fn eigen(config: &RunConfig) -> Result<EigenSolution> {
    let grid = build_grid(config)?;
    Ok(solve(&config.model, &grid, &config.solver)?)
}

/// `eigen`: `summary.txt`, `N.csv`, `phi.csv`.
pub fn run_eigen(config: &RunConfig, out: &Path) -> Result<Summary> {
    let sol = eigen(config)?;
    let summary = eigen_summary(&sol);
    prepare_out(out)?;
    write_field(&out.join("N.csv"), "N", &sol.density)?;
    write_field(&out.join("phi.csv"), "phi", &sol.adjoint)?;
    write_file(&out.join("summary.txt"), &summary.render())?;
    Ok(summary)
}

fn initial_density(config: &RunConfig, sol: &EigenSolution) -> Field {
    let g = *sol.grid();
    let init = &config.simulate.initial;
    let mut n0 = sol.density.clone();
    for k in 0..g.na() {
        for i in 0..g.nx() {
            let f = init.scale * (1.0 + init.amplitude * (2.0 * PI * g.x(i) / g.x_max()).sin());
            n0.set(k, i, sol.density.at(k, i) * f);
        }
    }
    n0
}

struct SimulateResult {
    run: Trajectory,
    summary: Summary,
}

fn simulate_run(config: &RunConfig) -> Result<SimulateResult> {
    let sol = eigen(config)?;
    let sc = &config.simulate;
    let options = SimulationOptions {
        horizon: sc.horizon,
        entropy: sc.entropy.clone(),
        renormalize: sc.renormalize,
        snapshot_times: sc.snapshots.clone(),
    };
    let run = simulate(
        &initial_density(config, &sol),
        &config.model,
        &sol,
        &options,
    )?;
    // the run from N itself measures what the scheme alone adds per step
    let stationary = simulate(&sol.density, &config.model, &sol, &options)?;
    let obs = &run.observations;
    let first = obs[0];
    let last = obs[obs.len() - 1];
    let mut s = Summary::default();
    s.push("lambda0", sol.lambda0);
    grid_summary(&mut s, sol.grid());
    s.push("horizon", sc.horizon);
    s.push("steps", obs.len() - 1);
    s.push("projection", run.projection);
    s.push("duality_drift", run.duality_drift());
    s.push("max_entropy_increase", run.max_entropy_increase());
    s.push(
        "scheme_dissipation_bound",
        stationary.max_entropy_increase(),
    );
    s.push(
        "entropy_nonincreasing",
        run.max_entropy_increase() <= stationary.max_entropy_increase(),
    );
    s.push("distance_initial", first.distance);
    s.push("distance_final", last.distance);
    s.push("distance_halved", last.distance < 0.5 * first.distance);
    Ok(SimulateResult { run, summary: s })
}

/// `simulate`: `observables.csv`, `snapshot_<t>.csv`, `summary.txt`.
pub fn run_simulate(config: &RunConfig, out: &Path) -> Result<Summary> {
    let SimulateResult { run, summary } = simulate_run(config)?;
    prepare_out(out)?;
    write_rows(
        &out.join("observables.csv"),
        &["t", "mass", "duality", "entropy", "distance"],
        run.observations.iter().map(|o| {
            vec![
                o.t.to_string(),
                o.mass.to_string(),
                o.duality.to_string(),
                o.entropy.to_string(),
                o.distance.to_string(),
            ]
        }),
    )?;
    for snap in &run.snapshots {
        // stored times carry the accumulated step roundoff
        let t = (snap.t * 1e6).round() / 1e6;
        write_field(&out.join(format!("snapshot_{t}.csv")), "n", &snap.density)?;
    }
    write_file(&out.join("summary.txt"), &summary.render())?;
    Ok(summary)
}

fn twophase_config(config: &RunConfig) -> Result<&TwoPhaseConfig> {
    config.twophase.as_ref().ok_or_else(|| CliError::Missing {
        key: "[twophase]".into(),
    })
}

fn twophase_run(config: &RunConfig) -> Result<(TwoPhaseRun, Summary)> {
    let tc = twophase_config(config)?;
    let sol = eigen(config)?;
    let params = &tc.params;
    let limit = limit_eigensystem(params, &sol);
    let options = TwoPhaseOptions {
        horizon: tc.horizon,
        weights: tc.weights,
        record_every: tc.record_every,
    };
    let (p0, q0) = proliferating_start(&sol);
    let run = simulate_twophase(
        params,
        &config.model,
        &p0,
        &q0,
        limit.as_ref().ok(),
        &options,
    )?;

    let mut s = Summary::default();
    s.push("lambda0", sol.lambda0);
    grid_summary(&mut s, sol.grid());
    s.push("d1", params.death_proliferating);
    s.push("d2", params.death_quiescent);
    s.push("n", params.recruitment.exponent);
    s.push("horizon", tc.horizon);
    let (t, n) = (run.times(), run.populations());
    s.push("population_initial", n[0]);
    s.push("population_final", n[n.len() - 1]);
    match classify_regime(&t, &n, tc.fit_window) {
        Ok(fit) => {
            s.push("regime", fit.regime);
            s.push("power_exponent", fit.power.slope);
            s.push("power_residual", fit.power.residual);
            s.push("exponential_rate", fit.exponential.slope);
            s.push("exponential_residual", fit.exponential.residual);
        }
        // a population that underflows to zero has decayed
        Err(SolverError::Regime(reason)) => {
            s.push("regime", "exponential-decay");
            s.push("regime_note", reason);
        }
        Err(e) => return Err(e.into()),
    }

    let transition = effective_transition(&params.transition, &sol);
    let recruitment = run.last.recruitment;
    s.push("transition_effective", transition);
    s.push("recruitment_final", recruitment);
    let d = lambda_from_lambda0(
        sol.lambda0,
        params.death_proliferating,
        params.death_quiescent,
        transition,
        recruitment,
    )?;
    s.push("dispersion_lambda", d.lambda);
    s.push("dispersion_lower_bound", d.lower_bound);
    s.push(
        "dispersion_residual",
        d.residual(
            params.death_proliferating,
            params.death_quiescent,
            transition,
        ),
    );
    let zero = lambda_zero_criterion(
        sol.lambda0,
        params.death_proliferating,
        params.death_quiescent,
        transition,
        recruitment,
        1e-12,
    )?;
    s.push("zero_criterion_residual", zero.residual);

    match &limit {
        Ok(lim) => match s2_supersolution_check(&run, params, lim) {
            Ok(r) => {
                s.push("s2_growth_constant", r.growth_constant);
                s.push("s2_population_ratio", r.population_ratio);
                s.push("s2_amplitude", r.amplitude);
                s.push("s2_offset", r.offset);
                s.push("s2_bound_holds", r.holds());
                if let Some(t) = r.first_crossing {
                    s.push("s2_first_crossing", t);
                }
                s.push("s2_tightest_amplitude", r.tightest_amplitude);
            }
            Err(e) => s.push("s2_check", format!("unavailable: {e}")),
        },
        Err(e) => s.push("limit_system", format!("unavailable: {e}")),
    }
    Ok((run, s))
}

/// `twophase`: `trajectory.csv` and `summary.txt`.
pub fn run_twophase(config: &RunConfig, out: &Path) -> Result<Summary> {
    let (run, summary) = twophase_run(config)?;
    prepare_out(out)?;
    write_rows(
        &out.join("trajectory.csv"),
        &["t", "N", "P", "Q", "G", "S2", "R"],
        run.records.iter().map(|r| {
            vec![
                r.t.to_string(),
                r.population.to_string(),
                r.proliferating.to_string(),
                r.quiescent.to_string(),
                r.recruitment.to_string(),
                r.s2.map(|v| v.to_string()).unwrap_or_default(),
                r.proliferating_fraction.to_string(),
            ]
        }),
    )?;
    write_file(&out.join("summary.txt"), &summary.render())?;
    Ok(summary)
}

/// One line of the `validate` report.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Age range for the assumption checks: the configured one, else the
/// automatic horizon, else the end of a compact window (or a fixed 100
/// when no survival decay can be found).
fn validation_grid(config: &RunConfig) -> Result<Grid> {
    let x_max = config.model.x_max();
    let nx = config.grid.nx;
    let a_max = match config.grid.a_max {
        AgeRange::Fixed(a) => a,
        AgeRange::Auto => match config.model.division.support_end() {
            Some(end) => end,
            None => auto_age_horizon(&config.model, nx, &config.solver.control).unwrap_or(100.0),
        },
    };
    let grid = match config.grid.ages {
        AgeResolution::Step(da) => Grid::with_age_step(x_max, nx, a_max, da)?,
        AgeResolution::Nodes(na) => Grid::new(x_max, nx, a_max, na)?,
    };
    Ok(grid)
}

/// Assumption checks; always produces a report for a valid model.
pub fn validate(config: &RunConfig) -> Result<(Grid, Vec<Check>)> {
    let grid = validation_grid(config)?;
    let m = &config.model;
    let flow = FlowSolver::with_control(&m.growth, config.solver.control);
    let weak = check_weak_assumptions(&flow, &m.division, &m.kernel, &grid)?;
    let kernel = check_kernel_consistency(&m.kernel, &m.division, &grid)?;
    let rate_scale = m.division.sup(grid.a_max(), grid.x_max()).max(1.0);
    let mut checks = vec![Check {
        name: "survival_integral",
        value: weak.survival_integral,
        threshold: 0.0,
        pass: weak.survival_integral.is_finite() && weak.survival_integral > 0.0,
    }];
    // past a compact window survival stays flat; the window ratio replaces the tail test
    if weak.window_ratio.is_none() {
        checks.push(Check {
            name: "survival_tail",
            value: weak.survival_tail,
            threshold: TAIL_TOLERANCE * weak.survival_integral,
            pass: weak.integrable,
        });
    }
    checks.push(Check {
        name: "birth_integral_ln2",
        value: weak.min_birth_integral,
        threshold: LN_2,
        pass: weak.enough_birth,
    });
    if let (Some(ratio), Some(ok)) = (weak.window_ratio, weak.window_condition) {
        checks.push(Check {
            name: "window_ratio",
            value: ratio,
            threshold: 0.5,
            pass: ok,
        });
    }
    // mass moments are exact; the content moment carries the projection error
    checks.push(Check {
        name: "kernel_mass_moment",
        value: kernel.mass_residual,
        threshold: 1e-10 * rate_scale,
        pass: kernel.mass_residual <= 1e-10 * rate_scale,
    });
    let content_tol = grid.dx() * grid.x_max() * rate_scale;
    checks.push(Check {
        name: "kernel_content_moment",
        value: kernel.content_residual,
        threshold: content_tol,
        pass: kernel.content_residual <= content_tol,
    });
    Ok((grid, checks))
}

/// `validate`: `report.csv` and `summary.txt`.
pub fn run_validate(config: &RunConfig, out: &Path) -> Result<Summary> {
    let (grid, checks) = validate(config)?;
    let mut s = Summary::default();
    grid_summary(&mut s, &grid);
    for c in &checks {
        s.push(
            c.name,
            format!(
                "{} (threshold {}, {})",
                c.value,
                c.threshold,
                if c.pass { "pass" } else { "fail" }
            ),
        );
    }
    s.push("all_pass", checks.iter().all(|c| c.pass));
    prepare_out(out)?;
    write_rows(
        &out.join("report.csv"),
        &["check", "value", "threshold", "pass"],
        checks.iter().map(|c| {
            vec![
                c.name.to_string(),
                c.value.to_string(),
                c.threshold.to_string(),
                c.pass.to_string(),
            ]
        }),
    )?;
    write_file(&out.join("summary.txt"), &s.render())?;
    Ok(s)
}

fn point_summary(config: &RunConfig, command: SweepCommand) -> Result<Summary> {
    match command {
        SweepCommand::Eigen => Ok(eigen_summary(&eigen(config)?)),
        SweepCommand::Simulate => Ok(simulate_run(config)?.summary),
        SweepCommand::TwoPhase => Ok(twophase_run(config)?.1),
    }
}

/// `sweep`: `sweep.csv` with one row per value of the swept key.
pub fn run_sweep(source: &ConfigSource, out: &Path) -> Result<Summary> {
    let sweep = source.to_config()?.sweep.ok_or_else(|| CliError::Missing {
        key: "[sweep]".into(),
    })?;
    let configs = sweep
        .values
        .iter()
        .map(|value| {
            let mut src = source.clone();
            src.set(&sweep.key, value)?;
            Ok((value.clone(), src.to_config()?))
        })
        .collect::<Result<Vec<_>>>()?;
    // points are independent; collect keeps the input order
    let rows: Vec<(String, Result<Summary>)> = configs
        .into_par_iter()
        .map(|(value, config)| {
            let r = point_summary(&config, sweep.command);
            (value, r)
        })
        .collect();
    let columns: Vec<String> = rows
        .iter()
        .find_map(|(_, r)| r.as_ref().ok())
        .map(|s| s.entries.iter().map(|(k, _)| k.clone()).collect())
        .unwrap_or_default();
    let mut header: Vec<&str> = vec![sweep.key.as_str(), "status", "exit_code"];
    header.extend(columns.iter().map(String::as_str));
    let table = rows.iter().map(|(value, r)| {
        let mut row = vec![value.clone()];
        match r {
            Ok(s) => {
                row.push("ok".into());
                row.push("0".into());
                row.extend(
                    columns
                        .iter()
                        .map(|c| s.get(c).unwrap_or_default().to_string()),
                );
            }
            Err(e) => {
                row.push(e.to_string());
                row.push(e.exit_code().to_string());
                row.extend(columns.iter().map(|_| String::new()));
            }
        }
        row
    });
    prepare_out(out)?;
    write_rows(&out.join("sweep.csv"), &header, table)?;
    let mut s = Summary::default();
    s.push("key", &sweep.key);
    s.push("points", rows.len());
    s.push("failed", rows.iter().filter(|(_, r)| r.is_err()).count());
    write_file(&out.join("summary.txt"), &s.render())?;
    Ok(s)
}

/// Matplotlib script reading the CSV files the command wrote.
pub fn plot_script(command: &str) -> Option<&'static str> {
    match command {
        "eigen" => Some(include_str!("plots/eigen.py")),
        "simulate" => Some(include_str!("plots/simulate.py")),
        "twophase" => Some(include_str!("plots/twophase.py")),
        "sweep" => Some(include_str!("plots/sweep.py")),
        "validate" => None,
        _ => None,
    }
}

pub fn write_plot_script(command: &str, out: &Path) -> Result<Option<PathBuf>> {
    match plot_script(command) {
        Some(script) => {
            let path = out.join("plot.py");
            write_file(&path, script)?;
            Ok(Some(path))
        }
        None => Ok(None),
    }
}
