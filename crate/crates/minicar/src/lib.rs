//! Modeling, state estimation and racing control for miniature car-like robots.
//!
//! The crate is organized as a pipeline:
//!
//! * [`dynamics`] - dynamic bicycle model with smoothed tire forces and its
//!   RK4 discretization,
//! * [`sensors`] - IMU, wheel encoder and lighthouse sweep-angle models,
//! * [`nlp`] - the in-repo solvers: bound-constrained Levenberg-Marquardt and
//!   a banded Gauss-Newton SQP for horizon-structured problems,
//! * [`lh_calibration`] - lighthouse base-station pose calibration and
//!   crossing-beam triangulation,
//! * [`sysid`] - offline model identification as one large horizon problem,
//! * [`estimation`] - moving horizon estimator and an EKF baseline,
//! * [`mpcc`] - contouring control on sampled tracks,
//! * [`simulator`] - multi-rate closed-loop simulation with sensor dropout,
//! * [`data`] / [`experiments`] - dataset format, replay and the packaged
//!   experiments behind the command-line tool.
//!
//! Each runnable capability also ships as an example under `examples/`.

pub mod data;
pub mod dynamics;
pub mod estimation;
pub mod experiments;
pub mod lh_calibration;
pub mod math;
pub mod mpcc;
pub mod nlp;
pub mod sensors;
pub mod simulator;
pub mod sysid;
