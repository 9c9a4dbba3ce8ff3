//! Scenario runner for magflow.
//!
//! A scenario is a JSON file naming a magnetic system, an orbit and one
//! experiment. Running it writes a JSON report and a CSV table. Exit codes:
//! `0` success, `2` invalid scenario, `3` numerical failure or failed check.
//! Reports carry no timestamps, so reruns with the same seed are byte-identical.

pub mod experiments;
pub mod scenario;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

pub use experiments::Check;
pub use scenario::Scenario;

use experiments::{Context, Partial};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        EXIT_INVALID
    }
}

/// Command-line overrides applied on top of a scenario.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub tol_scale: f64,
    pub dump_intermediate: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { seed: None, tol_scale: 1.0, dump_intermediate: false }
    }
}

#[derive(Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    CheckFailed,
    NumericalFailure,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub scenario: String,
    pub description: String,
    pub experiment: &'static str,
    pub seed: Option<u64>,
    pub tol_scale: f64,
    pub status: Status,
    pub error: Option<String>,
    pub system: Value,
    pub checks: Vec<Check>,
    pub result: Map<String, Value>,
}

impl Report {
    pub fn exit_code(&self) -> i32 {
        match self.status {
            Status::Ok => EXIT_OK,
            _ => EXIT_NUMERICAL,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// A finished run: the report plus the files it would write.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub report: Report,
    pub data: String,
    pub extras: Vec<(String, String)>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        self.report.exit_code()
    }

    /// Writes the report, the CSV table and any intermediate files into `dir`.
    pub fn write(&self, scenario: &Scenario, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
        let mut written = Vec::new();
        let mut put = |name: String, body: &str| -> Result<(), CliError> {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|source| CliError::Io { path: path.clone(), source })?;
            written.push(path);
            Ok(())
        };
        put(scenario.report_name(), &self.report.to_json())?;
        put(scenario.data_name(), &self.data)?;
        for (suffix, body) in &self.extras {
            put(format!("{}.{suffix}", scenario.name), body)?;
        }
        Ok(written)
    }
}

/// Runs a validated scenario. Numerical errors do not abort: they end the
/// experiment and are recorded in the report next to whatever was finished.
pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<Outcome, CliError> {
    let mut sc = scenario.clone();
    if let Some(seed) = opts.seed {
        sc.seed = Some(seed);
    }
    if !(opts.tol_scale > 0.0) || !opts.tol_scale.is_finite() {
        return Err(CliError::Validation(format!("--tol-scale must be positive, got {}", opts.tol_scale)));
    }
    sc.validate()?;
    let needs_system = sc.experiment.needs_orbit();
    let sys = if needs_system { Some(sc.build_system()?) } else { None };
    let ctx = Context { scenario: &sc, tol: sc.tolerances.scaled(opts.tol_scale), seed: sc.seed, dump: opts.dump_intermediate };
    let mut partial = Partial::default();
    let mut error = None;
    let system = match &sys {
        Some(s) => match experiments::injectivity_summary(s, sc.c, 64) {
            Ok(inj) => serde_json::json!({
                "chart": s.chart.name(),
                "form": s.form.label(),
                "dim": s.dim(),
                "c": sc.c,
                "injectivity": inj,
            }),
            Err(e) => {
                error = Some(e.to_string());
                Value::Null
            }
        },
        None => Value::Null,
    };
    if error.is_none() {
        if let Err(e) = experiments::run(&ctx, sys.as_ref(), &mut partial) {
            error = Some(e.to_string());
        }
    }
    let status = if error.is_some() {
        Status::NumericalFailure
    } else if partial.checks.iter().all(|c| c.pass) {
        Status::Ok
    } else {
        Status::CheckFailed
    };
    let report = Report {
        scenario: sc.name.clone(),
        description: sc.description.clone(),
        experiment: sc.experiment.name(),
        seed: sc.seed,
        tol_scale: opts.tol_scale,
        status,
        error,
        system,
        checks: partial.checks,
        result: partial.result,
    };
    Ok(Outcome { report, data: partial.data, extras: partial.extras })
}

/// Reads a scenario from a file path, or from the bundled set when `arg` is
/// not a file but names a bundled scenario.
pub fn load(arg: &str) -> Result<Scenario, CliError> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(b) = bundled().into_iter().find(|b| b.name == arg) {
            return Scenario::parse(b.source);
        }
    }
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    Scenario::parse(&text)
}

/// A scenario shipped with the binary.
#[derive(Clone, Copy, Debug)]
pub struct Bundled {
    pub name: &'static str,
    pub source: &'static str,
}

impl Bundled {
    pub fn scenario(&self) -> Scenario {
        Scenario::from_json(self.source).expect("bundled scenarios are valid")
    }

    pub fn description(&self) -> String {
        self.scenario().description
    }
}

macro_rules! bundle {
    ($($name:literal),* $(,)?) => {
        vec![$(Bundled { name: $name, source: include_str!(concat!("../scenarios/", $name, ".json")) }),*]
    };
}

pub fn bundled() -> Vec<Bundled> {
    bundle![
        "larmor_circle",
        "flat_geodesic",
        "sphere_geodesic",
        "m3_remark_check",
        "bracket_ledger_n2",
        "franks_demo",
        "algebra_ledgers",
        "larmor_monodromy",
        "perturbed_field_oracle",
        "curvature_shift",
        "variational_basis",
        "sphere_jacobi",
    ]
}
