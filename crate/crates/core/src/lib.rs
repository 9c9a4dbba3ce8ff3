//! Numerical laboratory for magnetic geodesic flows.
//!
//! A magnetic system is a Riemannian chart together with a closed two-form.
//! The library integrates its trajectories, builds Fermi frames and the
//! magnetic curvature along them, propagates the reduced linearized flow,
//! and checks control-theoretic certificates for perturbations of the form.

pub mod error;
pub mod expr;
pub mod flow;
pub mod frame;
pub mod geometry;
pub mod linalg;
pub mod linmap;
pub mod perturb;
pub mod sympctl;

pub use error::{Error, Result};
pub use flow::{MagneticSystem, OrbitSegment, PhaseState};

pub use frame::{Assembly, CurvatureCurve, FermiChart, FermiFrame};
pub use geometry::{ChartMetric, ClosedTwoForm};
pub use linmap::{LinearSystemCurve, OrbitClassification, SymplecticMatrix};
pub use sympctl::ControlVector;


