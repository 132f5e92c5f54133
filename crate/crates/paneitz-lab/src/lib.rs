//! Numerical toolkit for fourth-order curvature energies on asymptotically
//! Euclidean metrics: exact jet arithmetic for curvature out of metric
//! derivatives, Q-curvature and Paneitz operators, conformal families and
//! inverted-chart constructions, sphere/annulus quadrature, and the energy
//! functionals with their decay gates. The `paneitz-lab` binary exposes the
//! pointwise reports, energy ladders and the verification suites.

pub mod functionals;
pub mod geometry;
pub mod integrate;
pub mod jets;
pub mod metrics;
pub mod qcurv;
pub mod tensors;

pub use jets::{Jet, JetError};
pub use tensors::{PointMetric, PointTensor, TensorError, Variance};
