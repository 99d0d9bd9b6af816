use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const WINDOW: &str = "
[growth]
type = logistic
rate = 1.0
x_max = 2.0

[division]
type = constant_window
rate = 1.0
end = 1.0

[grid]
nx = 61
da = 0.05
";

const REFERENCE: &str = "
[growth]
type = saturating
c1 = 0.1
c2 = 0.075
r1 = 3.0
r2 = 1.95
c4 = 0.4

[division]
type = hill_age
max_rate = 1.2
half_content = 1.5
exponent = 5
start = 23

[grid]
nx = 41
da = 0.1
";

const TWOPHASE: &str = "
[twophase]
transition = hill
max_rate = 4
half_content = 2
exponent = 5
onset = 18
alpha1 = 8
theta = 1
";

struct Run {
    dir: TempDir,
    output: Output,
}

impl Run {
    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn code(&self) -> i32 {
        self.output.status.code().unwrap()
    }

    fn stderr(&self) -> String {
        String::from_utf8_lossy(&self.output.stderr).into_owned()
    }

    fn read(&self, name: &str) -> String {
        fs::read_to_string(self.out().join(name)).unwrap()
    }

    fn summary(&self, key: &str) -> String {
        let text = self.read("summary.txt");
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_string))
            .unwrap_or_else(|| panic!("no {key} in\n{text}"))
    }

    fn number(&self, key: &str) -> f64 {
        self.summary(key).parse().unwrap()
    }
}

fn cellcycle(command: &str, config: &str, extra: &[&str]) -> Run {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("run.ini");
    fs::write(&path, config).unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_cellcycle"))
        .arg(command)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .args(extra)
        .output()
        .unwrap();
    Run { dir, output }
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect();
    (header, rows)
}

/// Root of `2 B (1 - exp(-(B + l) A)) / (B + l) = 1` by bisection.
fn window_root(rate: f64, end: f64) -> f64 {
    let mu = |l: f64| 2.0 * rate * (1.0 - (-(rate + l) * end).exp()) / (rate + l);
    let (mut lo, mut hi) = (0.0, 2.0 * rate);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mu(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn eigen_matches_the_window_root() {
    let run = cellcycle("eigen", WINDOW, &[]);
    assert_eq!(run.code(), 0, "{}", run.stderr());
    let exact = window_root(1.0, 1.0);
    let lambda0 = run.number("lambda0");
    assert!(
        (lambda0 - exact).abs() < 1e-4 * exact,
        "{lambda0} vs {exact}"
    );
    let (header, rows) = csv_rows(&run.out().join("N.csv"));
    assert_eq!(header, ["a", "x", "N"]);
    let nx = run.number("nx") as usize;
    let na = run.number("na") as usize;
    assert_eq!(rows.len(), nx * na);
    let (header, _) = csv_rows(&run.out().join("phi.csv"));
    assert_eq!(header, ["a", "x", "phi"]);
}

#[test]
fn subcritical_model_exits_3_without_density_files() {
    let config = WINDOW.replace("rate = 1.0\nend", "rate = 0.5\nend");
    let run = cellcycle("eigen", &config, &[]);
    assert_eq!(run.code(), 3, "{}", run.stderr());
    assert!(run.stderr().contains("subcritical"));
    assert!(!run.out().join("N.csv").exists());
}

#[test]
fn missing_key_exits_2_and_is_named() {
    let run = cellcycle("eigen", &REFERENCE.replace("c4 = 0.4\n", ""), &[]);
    assert_eq!(run.code(), 2);
    assert!(run.stderr().contains("growth.c4"), "{}", run.stderr());
}

#[test]
fn misspelled_key_exits_2() {
    let run = cellcycle(
        "eigen",
        &format!("{WINDOW}\n[simulate]\nhorzion = 3\n"),
        &[],
    );
    assert_eq!(run.code(), 2);
    assert!(
        run.stderr().contains("simulate.horzion"),
        "{}",
        run.stderr()
    );
}

#[test]
fn courant_violation_exits_4() {
    let config = "
[growth]
type = logistic
rate = 50
x_max = 1.0

[division]
type = constant_window
rate = 1.0
end = 2.0

[grid]
nx = 41
da = 0.1
a_max = 4
";
    let run = cellcycle("simulate", config, &[]);
    assert_eq!(run.code(), 4, "{}", run.stderr());
    assert!(run.stderr().contains("CFL"));
}

#[test]
fn simulation_from_the_eigendensity_stays_there() {
    let config =
        format!("{REFERENCE}\n[simulate]\ninitial = eigen\nhorizon = 20\nsnapshots = 10\n");
    let run = cellcycle("simulate", &config, &["--emit-plot-script"]);
    assert_eq!(run.code(), 0, "{}", run.stderr());
    assert!(run.number("distance_initial") < 1e-12);
    assert!(run.number("distance_final") < 0.1);
    assert!(run.number("duality_drift") < 0.05);
    assert!((run.number("projection") - 1.0).abs() < 1e-9);
    let (header, rows) = csv_rows(&run.out().join("observables.csv"));
    assert_eq!(header, ["t", "mass", "duality", "entropy", "distance"]);
    assert_eq!(rows.len(), 201);
    assert!(run.out().join("snapshot_10.csv").exists());
    assert!(run.read("plot.py").contains("observables.csv"));
}

#[test]
fn perturbed_simulation_relaxes() {
    let config =
        format!("{REFERENCE}\n[simulate]\ninitial = perturbed\namplitude = 0.5\nhorizon = 60\n");
    let run = cellcycle("simulate", &config, &[]);
    assert_eq!(run.code(), 0, "{}", run.stderr());
    assert_eq!(run.summary("entropy_nonincreasing"), "true");
    assert_eq!(run.summary("distance_halved"), "true");
}

#[test]
fn large_death_rate_decays() {
    let config = format!("{REFERENCE}{TWOPHASE}d1 = 0.05\nk = 1\nhorizon = 1000\n");
    let run = cellcycle("twophase", &config, &[]);
    assert_eq!(run.code(), 0, "{}", run.stderr());
    assert_eq!(run.summary("regime"), "exponential-decay");
    assert!(run.summary("limit_system").starts_with("unavailable"));
    let (header, rows) = csv_rows(&run.out().join("trajectory.csv"));
    assert_eq!(header, ["t", "N", "P", "Q", "G", "S2", "R"]);
    assert!(rows.iter().all(|r| r[5].is_empty()));
}

#[test]
fn small_death_rate_grows_polynomially() {
    let config =
        format!("{REFERENCE}{TWOPHASE}d1 = 0.01\nk = 1\nhorizon = 3000\nrecord_every = 50\n");
    let run = cellcycle("twophase", &config, &[]);
    assert_eq!(run.code(), 0, "{}", run.stderr());
    assert_eq!(run.summary("regime"), "polynomial-growth");
    let k = run.number("power_exponent");
    assert!(k > 0.5 && k < 1.5, "{k}");
    assert_eq!(run.summary("s2_bound_holds"), "true");
}

#[test]
fn decoupled_phases_grow_at_lambda0() {
    let config = format!(
        "{REFERENCE}\n[twophase]\ntransition = constant\nL = 0\nd1 = 0\nalpha1 = 8\ntheta = 1\nk = 1\nhorizon = 400\n"
    );
    let run = cellcycle("twophase", &config, &[]);
    assert_eq!(run.code(), 0, "{}", run.stderr());
    assert_eq!(run.summary("regime"), "exponential-growth");
    let rate = run.number("exponential_rate");
    let lambda0 = run.number("lambda0");
    assert!(
        (rate - lambda0).abs() < 0.05 * lambda0,
        "{rate} vs {lambda0}"
    );
}

fn report(run: &Run) -> Vec<(String, bool)> {
    let (header, rows) = csv_rows(&run.out().join("report.csv"));
    assert_eq!(header, ["check", "value", "threshold", "pass"]);
    rows.into_iter()
        .map(|r| (r[0].clone(), r[3] == "true"))
        .collect()
}

#[test]
fn validate_reference_model_passes() {
    let run = cellcycle("validate", REFERENCE, &[]);
    assert_eq!(run.code(), 0, "{}", run.stderr());
    let checks = report(&run);
    assert!(checks.iter().all(|(_, pass)| *pass), "{checks:?}");
    assert!(checks.iter().any(|(name, _)| name == "survival_tail"));
}

#[test]
fn validate_flags_a_vanishing_division_rate() {
    let run = cellcycle(
        "validate",
        &WINDOW.replace("rate = 1.0\nend", "rate = 0\nend"),
        &[],
    );
    assert_eq!(run.code(), 0, "{}", run.stderr());
    let checks = report(&run);
    assert!(
        checks.contains(&("birth_integral_ln2".to_string(), false)),
        "{checks:?}"
    );
    assert_eq!(run.summary("all_pass"), "false");
}

#[test]
fn validate_reports_the_window_ratio_for_equal_mitosis() {
    let config = format!("{WINDOW}\n[kernel]\ntype = equal_mitosis\n");
    let run = cellcycle("validate", &config, &[]);
    assert_eq!(run.code(), 0, "{}", run.stderr());
    let (_, rows) = csv_rows(&run.out().join("report.csv"));
    let ratio = rows.iter().find(|r| r[0] == "window_ratio").unwrap();
    // B = 1 on [0, 1]: the ratio is exp(-1)
    let value: f64 = ratio[1].parse().unwrap();
    assert!((value - (-1.0_f64).exp()).abs() < 1e-3, "{value}");
    assert_eq!(ratio[3], "true");
}

#[test]
fn runs_are_deterministic() {
    let a = cellcycle("eigen", REFERENCE, &[]);
    let b = cellcycle("eigen", REFERENCE, &["--threads", "4"]);
    for name in ["N.csv", "phi.csv", "summary.txt"] {
        assert!(a.read(name) == b.read(name), "{name} differs");
    }
}

#[test]
fn sweep_records_every_point() {
    let config = format!(
        "{}\n[sweep]\nkey = division.rate\nvalues = 0.5, 1.0, 2.0\ncommand = eigen\n",
        WINDOW.replace("nx = 61", "nx = 41")
    );
    let serial = cellcycle("sweep", &config, &["--threads", "1"]);
    assert_eq!(serial.code(), 0, "{}", serial.stderr());
    let (header, rows) = csv_rows(&serial.out().join("sweep.csv"));
    assert_eq!(
        &header[..4],
        ["division.rate", "status", "exit_code", "lambda0"]
    );
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][2], "3");
    assert_eq!(rows[1][1], "ok");
    let lambda: f64 = rows[2][3].parse().unwrap();
    let exact = window_root(2.0, 1.0);
    assert!((lambda - exact).abs() < 1e-3 * exact, "{lambda} vs {exact}");
    let parallel = cellcycle("sweep", &config, &["--threads", "3"]);
    assert!(serial.read("sweep.csv") == parallel.read("sweep.csv"));
}
