//! Extended Kalman filter baseline.
//!
//! Runs on the same estimation grid as the moving horizon estimator and sees
//! the same information: `step(u, frame)` first corrects the current estimate
//! with the frame measured at the period's start, then predicts through the
//! input to the period's end. Invalid channels are skipped entirely, so a
//! fully masked frame degenerates to pure prediction.

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use crate::dynamics::{discrete_step, dynamics_jacobians, ControlInput, DriveConfig, VehicleState};
use crate::math::wrap_angle;
use crate::sensors::{full_measurement, lh_range, measurement_jacobians, MeasurementFrame, NoiseLevels, ParamSet};

#[derive(Clone, Debug)]
pub struct EkfConfig {
    /// Process noise covariance diagonal added per prediction step.
    pub process_cov: [f64; 6],
    /// Initial state covariance diagonal.
    pub initial_cov: [f64; 6],
    /// Per-channel noise levels; measurement covariance is their square.
    pub noise: NoiseLevels,
    pub dt: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        EkfConfig {
            process_cov: [1e-6, 1e-6, 1e-5, 1e-4, 1e-4, 1e-3],
            initial_cov: [1e-4, 1e-4, 1e-4, 1e-3, 1e-3, 1e-2],
            noise: NoiseLevels::default(),
            dt: 1.0 / 60.0,
        }
    }
}

pub struct Ekf {
    cfg: EkfConfig,
    params: ParamSet,
    drive: DriveConfig,
    x: Vector6<f64>,
    cov: Matrix6<f64>,
}

impl Ekf {
    pub fn new(cfg: EkfConfig, params: ParamSet, drive: DriveConfig, x0: &VehicleState) -> Self {
        let cov = Matrix6::from_diagonal(&Vector6::from_row_slice(&cfg.initial_cov));
        Ekf {
            cfg,
            params,
            drive,
            x: x0.as_vector(),
            cov,
        }
    }

    pub fn state(&self) -> VehicleState {
        VehicleState::from_vector(&self.x)
    }

    pub fn covariance(&self) -> &Matrix6<f64> {
        &self.cov
    }

    /// Correct with the frame, then predict through the input.
    pub fn step(&mut self, u: &ControlInput, frame: &MeasurementFrame) -> VehicleState {
        self.correct(u, frame);
        self.predict(u);
        self.state()
    }

    /// Measurement update only; invalid channels are skipped.
    pub fn correct(&mut self, u: &ControlInput, frame: &MeasurementFrame) {
        let x = VehicleState::from_vector(&self.x);
        let pred = full_measurement(frame.t, &x, u, None, &self.params, &self.drive);
        let jacs = measurement_jacobians(&x, u, &self.params, &self.drive);
        let stds = self.cfg.noise.channel_stds(self.params.stations.len());
        let lh_start = lh_range(0).start;

        let rows: Vec<usize> = (0..frame.values.len())
            .filter(|&c| frame.valid[c] && pred.valid[c])
            .collect();
        if rows.is_empty() {
            return;
        }
        let mut innovation = DVector::zeros(rows.len());
        let mut h = DMatrix::zeros(rows.len(), 6);
        let mut r_diag = DVector::zeros(rows.len());
        for (r, &c) in rows.iter().enumerate() {
            let mut d = frame.values[c] - pred.values[c];
            if c >= lh_start {
                d = wrap_angle(d);
            }
            innovation[r] = d;
            for k in 0..6 {
                h[(r, k)] = jacs.wrt_state[(c, k)];
            }
            r_diag[r] = stds[c] * stds[c];
        }
        joseph_update(&mut self.x, &mut self.cov, &innovation, &h, &r_diag);
    }

    /// Time update only: roll the mean through the model, propagate the
    /// covariance and add process noise.
    pub fn predict(&mut self, u: &ControlInput) {
        let x = VehicleState::from_vector(&self.x);
        let jd = dynamics_jacobians(&x, u, &self.params.model, &self.drive, self.cfg.dt);
        self.x = discrete_step(&x, u, &Vector6::zeros(), &self.params.model, &self.drive, self.cfg.dt)
            .as_vector();
        let q = Matrix6::from_diagonal(&Vector6::from_row_slice(&self.cfg.process_cov));
        self.cov = jd.wrt_state * self.cov * jd.wrt_state.transpose() + q;
        symmetrize(&mut self.cov);
    }
}

/// Joseph-form measurement update on a linear(ized) observation
/// `y = H x + v`, `v ~ N(0, diag(r_diag))`, with `innovation = y - H x̂`.
pub fn joseph_update(
    x: &mut Vector6<f64>,
    cov: &mut Matrix6<f64>,
    innovation: &DVector<f64>,
    h: &DMatrix<f64>,
    r_diag: &DVector<f64>,
) {
    let n = innovation.len();
    assert_eq!(h.nrows(), n);
    assert_eq!(h.ncols(), 6);
    assert_eq!(r_diag.len(), n);

    let p = DMatrix::from_fn(6, 6, |i, j| cov[(i, j)]);
    let r = DMatrix::from_diagonal(r_diag);
    let s = h * &p * h.transpose() + &r;
    let s_inv = s.try_inverse().expect("innovation covariance invertible");
    let gain = &p * h.transpose() * s_inv;

    let dx = &gain * innovation;
    for k in 0..6 {
        x[k] += dx[k];
    }
    let ikh = DMatrix::identity(6, 6) - &gain * h;
    let updated = &ikh * &p * ikh.transpose() + &gain * r * gain.transpose();
    for i in 0..6 {
        for j in 0..6 {
            cov[(i, j)] = 0.5 * (updated[(i, j)] + updated[(j, i)]);
        }
    }
}

fn symmetrize(m: &mut Matrix6<f64>) {
    let t = m.transpose();
    *m = (*m + t) * 0.5;
}
