//! The JSON scenario schema. Every object rejects unknown keys.

use magflow::geometry::{check_closed, Axis};
use magflow::perturb::FranksOptions;
use magflow::{Assembly, ChartMetric, ClosedTwoForm, MagneticSystem};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub chart: ChartSpec,
    pub omega: FormSpec,
    /// Energy level `c = |v|^2 / 2`.
    pub c: f64,
    #[serde(default)]
    pub orbit: Option<OrbitSpec>,
    pub experiment: Experiment,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub outputs: Outputs,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChartSpec {
    FlatTorus { dim: usize },
    RoundSphere,
    /// Metric entries as expressions in `x1..xm`.
    Expressions {
        axes: Vec<Axis>,
        metric: Vec<Vec<String>>,
        injectivity_radius: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum FormSpec {
    Zero,
    /// `b dx1 ^ dx2`.
    ConstantPlanar { b: f64 },
    /// `(b0 + amplitude cos(2 pi x1)) dx1 ^ dx2`.
    CosinePlanar { b0: f64, amplitude: f64 },
    /// `b` times the area form of the round sphere.
    SphereArea { b: f64 },
    /// Constant antisymmetric matrix, given row by row.
    ConstantMatrix { matrix: Vec<Vec<f64>> },
    /// Entries `Omega_ij`, `i < j`, 1-based, as expressions in `x1..xm`.
    Expressions { entries: Vec<FormEntry> },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FormEntry {
    pub i: usize,
    pub j: usize,
    pub expr: String,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Closure {
    /// Plain integration over `duration`.
    #[default]
    None,
    /// Check that the integrated segment closes up.
    Mark,
    /// Newton shooting for a closed orbit with period near `duration`.
    Search,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OrbitSpec {
    pub x: Vec<f64>,
    /// Initial direction; rescaled onto the energy level.
    pub direction: Vec<f64>,
    pub duration: f64,
    pub step: f64,
    #[serde(default)]
    pub closure: Closure,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub energy_drift: f64,
    pub closure: f64,
    pub oracle: f64,
    pub monodromy: f64,
    pub curvature_shift: f64,
    pub orbit_deviation: f64,
    pub franks_residual: f64,
    pub variational: f64,
    pub symplectic: f64,
    pub reciprocity: f64,
    pub containment: f64,
    pub jacobi: f64,
    pub self_intersection: f64,
    pub symmetry: f64,
    pub momentum: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            energy_drift: 1e-8,
            closure: 1e-9,
            oracle: 1e-4,
            monodromy: 1e-5,
            curvature_shift: 1e-5,
            orbit_deviation: 1e-7,
            franks_residual: 1e-6,
            variational: 1e-4,
            symplectic: 1e-8,
            reciprocity: 1e-7,
            containment: 1e-10,
            jacobi: 1e-5,
            self_intersection: 1e-6,
            symmetry: 1e-8,
            momentum: 1e-8,
        }
    }
}

impl Tolerances {
    pub fn scaled(&self, s: f64) -> Tolerances {
        Tolerances {
            energy_drift: self.energy_drift * s,
            closure: self.closure * s,
            oracle: self.oracle * s,
            monodromy: self.monodromy * s,
            curvature_shift: self.curvature_shift * s,
            orbit_deviation: self.orbit_deviation * s,
            franks_residual: self.franks_residual * s,
            variational: self.variational * s,
            symplectic: self.symplectic * s,
            reciprocity: self.reciprocity * s,
            containment: self.containment * s,
            jacobi: self.jacobi * s,
            self_intersection: self.self_intersection * s,
            symmetry: self.symmetry * s,
            momentum: self.momentum * s,
        }
    }
}

/// Output file names, relative to the run's output directory. Defaults are
/// `<name>.json` and `<name>.csv`.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    pub report: Option<String>,
    pub data: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// Trajectory, energy drift, period, `K(c, Omega)` and a self-intersection
    /// search on `[0, K)`.
    Integrate {
        #[serde(default = "default_injectivity_samples")]
        injectivity_samples: usize,
    },
    /// Fermi frame and curvature curve; optionally the curvature-shift
    /// identity for random perturbations and reduced Jacobi residuals.
    Curvature {
        #[serde(default)]
        assembly: Option<Assembly>,
        #[serde(default)]
        shift_check: Option<ShiftCheck>,
        #[serde(default)]
        jacobi_check: bool,
    },
    /// Linearized return map against the finite-difference oracle.
    Poincare {
        #[serde(default)]
        fd_step: Option<f64>,
        #[serde(default)]
        expect: Option<ExpectedMonodromy>,
    },
    /// Algebraic and control-theoretic certificates.
    Certificate { checks: Vec<CertificateCheck> },
    /// Franks-lemma solves on spheres of radius `eps` about the endpoint.
    FranksScan {
        eps: Vec<f64>,
        samples: usize,
        #[serde(default)]
        slope_radii: Vec<f64>,
        #[serde(default = "default_slope_samples")]
        slope_samples: usize,
        #[serde(default = "default_slope_range")]
        slope_range: (f64, f64),
        #[serde(default)]
        options: FranksOptions,
    },
    /// Basis certificate for pulse controls and Duhamel against flow derivatives.
    Variational {
        lambda: f64,
        #[serde(default)]
        center: Option<f64>,
        #[serde(default = "default_delta")]
        delta: f64,
        #[serde(default = "default_fd_step")]
        fd_step: f64,
    },
}

fn default_injectivity_samples() -> usize {
    64
}

fn default_slope_samples() -> usize {
    10
}

fn default_slope_range() -> (f64, f64) {
    (0.4, 1.1)
}

fn default_delta() -> f64 {
    0.02
}

fn default_fd_step() -> f64 {
    1e-3
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ShiftCheck {
    pub families: usize,
    pub support: (f64, f64),
    #[serde(default = "default_shift_modes")]
    pub modes: usize,
    #[serde(default = "default_shift_scale")]
    pub scale: f64,
}

fn default_shift_modes() -> usize {
    4
}

fn default_shift_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExpectedMonodromy {
    #[serde(default)]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub order: Option<usize>,
    /// Assembly expected to agree best with the oracle.
    #[serde(default)]
    pub best_assembly: Option<Assembly>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum CertificateCheck {
    /// Exact integer bracket identities for `n = 1..=n_max`.
    BracketLedger { n_max: usize },
    /// Span dimensions of `S_1, S_2, S_3` on random constant `K`.
    Dimensions { n_max: usize, samples: usize },
    /// Containment residuals on random constant `K`.
    Containment { n_max: usize, samples: usize },
    /// Propagation over random smooth `K(t)`.
    Symplecticity { curves: usize, n_max: usize, horizon: f64 },
    /// First-order span along the scenario's orbit.
    FirstOrder {
        #[serde(default)]
        t: Option<f64>,
        #[serde(default = "default_j_cap")]
        j_cap: usize,
    },
}

fn default_j_cap() -> usize {
    magflow::sympctl::DEFAULT_J_CAP
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Integrate { .. } => "integrate",
            Experiment::Curvature { .. } => "curvature",
            Experiment::Poincare { .. } => "poincare",
            Experiment::Certificate { .. } => "certificate",
            Experiment::FranksScan { .. } => "franks_scan",
            Experiment::Variational { .. } => "variational",
        }
    }

    pub fn is_stochastic(&self) -> bool {
        match self {
            Experiment::Curvature { shift_check, .. } => shift_check.is_some(),
            Experiment::Certificate { checks } => checks.iter().any(|c| {
                matches!(
                    c,
                    CertificateCheck::Dimensions { .. } | CertificateCheck::Containment { .. } | CertificateCheck::Symplecticity { .. }
                )
            }),
            Experiment::FranksScan { .. } => true,
            _ => false,
        }
    }

    pub fn needs_orbit(&self) -> bool {
        match self {
            Experiment::Certificate { checks } => checks.iter().any(|c| matches!(c, CertificateCheck::FirstOrder { .. })),
            _ => true,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl Scenario {
    /// Parses against the schema only; see [`Scenario::validate`].
    pub fn parse(text: &str) -> Result<Scenario, CliError> {
        serde_json::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Scenario, CliError> {
        let s = Scenario::parse(text)?;
        s.validate()?;
        Ok(s)
    }

    /// Checks beyond the schema: positivity, dimensions and the seed rule.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.trim().is_empty() {
            return Err(invalid("`name` must not be empty"));
        }
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(invalid(format!("`c` must be positive, got {}", self.c)));
        }
        let m = self.dim()?;
        if let Some(o) = &self.orbit {
            if o.x.len() != m || o.direction.len() != m {
                return Err(invalid(format!("`orbit.x` and `orbit.direction` need {m} entries")));
            }
            if !(o.step > 0.0) || !(o.duration > 0.0) {
                return Err(invalid("`orbit.step` and `orbit.duration` must be positive"));
            }
        } else if self.experiment.needs_orbit() {
            return Err(invalid(format!("experiment `{}` needs an `orbit`", self.experiment.name())));
        }
        if self.experiment.is_stochastic() && self.seed.is_none() {
            return Err(invalid(format!("experiment `{}` is stochastic and needs a `seed`", self.experiment.name())));
        }
        match &self.experiment {
            Experiment::FranksScan { eps, samples, slope_radii, .. } => {
                if eps.is_empty() || *samples == 0 {
                    return Err(invalid("`experiment.eps` and `experiment.samples` must be non-empty"));
                }
                if eps.iter().chain(slope_radii).any(|e| !(*e > 0.0)) {
                    return Err(invalid("radii in `experiment.eps` and `experiment.slope_radii` must be positive"));
                }
                if slope_radii.len() == 1 {
                    return Err(invalid("`experiment.slope_radii` needs at least two radii"));
                }
            }
            Experiment::Variational { lambda, delta, fd_step, .. } => {
                if !(*lambda > 0.0) || !(*delta > 0.0) || !(*fd_step > 0.0) {
                    return Err(invalid("`lambda`, `delta` and `fd_step` must be positive"));
                }
            }
            Experiment::Certificate { checks } if checks.is_empty() => {
                return Err(invalid("`experiment.checks` must not be empty"));
            }
            Experiment::Curvature { shift_check: Some(sc), .. } => {
                if sc.families == 0 || sc.modes == 0 || !(sc.support.1 > sc.support.0) {
                    return Err(invalid("`shift_check` needs families, modes and an increasing support"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn dim(&self) -> Result<usize, CliError> {
        match &self.chart {
            ChartSpec::FlatTorus { dim } if *dim >= 1 => Ok(*dim),
            ChartSpec::FlatTorus { .. } => Err(invalid("`chart.dim` must be at least 1")),
            ChartSpec::RoundSphere => Ok(2),
            ChartSpec::Expressions { axes, .. } => Ok(axes.len()),
        }
    }

    pub fn build_chart(&self) -> Result<ChartMetric, CliError> {
        Ok(match &self.chart {
            ChartSpec::FlatTorus { dim } => ChartMetric::flat_torus(*dim),
            ChartSpec::RoundSphere => ChartMetric::round_sphere(),
            ChartSpec::Expressions { axes, metric, injectivity_radius } => {
                ChartMetric::from_expressions("expressions", axes.clone(), metric, *injectivity_radius).map_err(|e| invalid(format!("chart: {e}")))?
            }
        })
    }

    pub fn build_form(&self) -> Result<ClosedTwoForm, CliError> {
        let m = self.dim()?;
        let planar = |what: &str| {
            if m == 2 {
                Ok(())
            } else {
                Err(invalid(format!("omega preset `{what}` needs a 2-dimensional chart")))
            }
        };
        Ok(match &self.omega {
            FormSpec::Zero => ClosedTwoForm::zero(m),
            FormSpec::ConstantPlanar { b } => {
                planar("constant_planar")?;
                ClosedTwoForm::constant_planar(*b)
            }
            FormSpec::CosinePlanar { b0, amplitude } => {
                planar("cosine_planar")?;
                ClosedTwoForm::cosine_planar(*b0, *amplitude)
            }
            FormSpec::SphereArea { b } => {
                planar("sphere_area")?;
                ClosedTwoForm::sphere_area(*b)
            }
            FormSpec::ConstantMatrix { matrix } => {
                if matrix.len() != m || matrix.iter().any(|r| r.len() != m) {
                    return Err(invalid(format!("`omega.matrix` must be {m}x{m}")));
                }
                let w = DMatrix::from_fn(m, m, |i, j| matrix[i][j]);
                if (&w + w.transpose()).amax() > 1e-12 {
                    return Err(invalid("`omega.matrix` must be antisymmetric"));
                }
                ClosedTwoForm::constant_matrix(&w, "constant matrix")
            }
            FormSpec::Expressions { entries } => {
                let list: Vec<((usize, usize), String)> = entries.iter().map(|e| ((e.i, e.j), e.expr.clone())).collect();
                ClosedTwoForm::from_expressions(m, &list).map_err(|e| invalid(format!("omega: {e}")))?
            }
        })
    }

    /// The system; a form given by expressions must be closed to `1e-6`.
    pub fn build_system(&self) -> Result<MagneticSystem, CliError> {
        let chart = self.build_chart()?;
        let form = self.build_form()?;
        if matches!(self.omega, FormSpec::Expressions { .. }) {
            let r = check_closed(&chart, &form, 64);
            if r.max_residual > 1e-6 {
                return Err(invalid(format!("omega is not closed: |d omega| = {:e} at {:?}", r.max_residual, r.worst_point)));
            }
        }
        MagneticSystem::new(chart, form).map_err(|e| invalid(e.to_string()))
    }

    pub fn report_name(&self) -> String {
        self.outputs.report.clone().unwrap_or_else(|| format!("{}.json", self.name))
    }

    pub fn data_name(&self) -> String {
        self.outputs.data.clone().unwrap_or_else(|| format!("{}.csv", self.name))
    }
}
