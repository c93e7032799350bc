//! Sensor models: IMU, wheel odometry and lighthouse sweep angles.
//!
//! The stacked measurement vector is laid out as
//! `[ax, ay, gyro, fl, fr, rl, rr, station 0 angles (8), station 1 angles (8), ...]`
//! with `3 + 4 + 8 * n_stations` channels. Lighthouse angles come in sensor
//! order within each sweep plane: `(s1..s4, plane 1)` then `(s1..s4, plane 2)`.
//!
//! Every channel carries a validity flag. Lighthouse channels go invalid when
//! the geometry degenerates (photodiode on the rotation axis of the station,
//! or outside the cone swept by a tilted plane); invalid channels report a
//! zero value and are expected to be skipped by consumers, never clamped.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    forces_g, ControlInput, DriveConfig, ModelParams, VehicleState, N_MODEL_PARAMS,
};
use crate::math::{Dual, Real};

/// Entries of the flattened wheel-odometry parameter block.
pub const N_WHEEL_PARAMS: usize = 2;
/// Entries of the flattened per-station lighthouse parameter block:
/// 3 rotation angles, 3 position coordinates, 4 sensors x 2 body coordinates,
/// 2 sweep-plane tilt offsets.
pub const N_STATION_PARAMS: usize = 16;
/// IMU channels.
pub const N_IMU: usize = 3;
/// Wheel-speed channels.
pub const N_WHEEL: usize = 4;
/// Sweep-angle channels per station.
pub const N_LH_PER_STATION: usize = 8;

/// Wheel odometry parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WheelEncoderParams {
    /// Wheel radius [m].
    pub wheel_radius: f64,
    /// Track width (left-right wheel separation) [m].
    pub track_width: f64,
}

impl Default for WheelEncoderParams {
    fn default() -> Self {
        WheelEncoderParams {
            wheel_radius: 0.02,
            track_width: 0.09,
        }
    }
}

impl WheelEncoderParams {
    pub fn to_array(&self) -> [f64; N_WHEEL_PARAMS] {
        [self.wheel_radius, self.track_width]
    }
    pub fn from_array(a: &[f64; N_WHEEL_PARAMS]) -> Self {
        WheelEncoderParams {
            wheel_radius: a[0],
            track_width: a[1],
        }
    }
    pub fn names() -> [&'static str; N_WHEEL_PARAMS] {
        ["wheel_radius", "track_width"]
    }
}

/// Pose of a lighthouse base station in the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationPose {
    /// Intrinsic rotation angles [rad]; the station rotation is
    /// `Rz(rot[2]) * Ry(rot[1]) * Rx(rot[0])`.
    pub rot: [f64; 3],
    /// Station origin in the world frame [m].
    pub pos: [f64; 3],
}

impl StationPose {
    pub fn rotation(&self) -> nalgebra::Rotation3<f64> {
        nalgebra::Rotation3::from_euler_angles(self.rot[0], self.rot[1], self.rot[2])
    }
}

/// Full lighthouse station parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationParams {
    pub pose: StationPose,
    /// Photodiode positions in the car body frame [m], planar.
    pub sensors: [[f64; 2]; 4],
    /// Additive offsets on the nominal sweep-plane tilts [rad]:
    /// plane tilts are `t1 = -pi/6 - tilt_offset[0]`, `t2 = pi/6 - tilt_offset[1]`.
    pub tilt_offset: [f64; 2],
}

impl Default for StationParams {
    fn default() -> Self {
        StationParams {
            pose: StationPose {
                rot: [std::f64::consts::PI, 0.0, 0.0],
                pos: [0.0, 0.0, 2.0],
            },
            sensors: [
                [0.035, 0.025],
                [0.035, -0.025],
                [-0.035, 0.025],
                [-0.035, -0.025],
            ],
            tilt_offset: [0.0, 0.0],
        }
    }
}

impl StationParams {
    pub fn to_array(&self) -> [f64; N_STATION_PARAMS] {
        let mut a = [0.0; N_STATION_PARAMS];
        a[..3].copy_from_slice(&self.pose.rot);
        a[3..6].copy_from_slice(&self.pose.pos);
        for k in 0..4 {
            a[6 + 2 * k] = self.sensors[k][0];
            a[7 + 2 * k] = self.sensors[k][1];
        }
        a[14] = self.tilt_offset[0];
        a[15] = self.tilt_offset[1];
        a
    }

    pub fn from_array(a: &[f64; N_STATION_PARAMS]) -> Self {
        let mut sensors = [[0.0; 2]; 4];
        for k in 0..4 {
            sensors[k] = [a[6 + 2 * k], a[7 + 2 * k]];
        }
        StationParams {
            pose: StationPose {
                rot: [a[0], a[1], a[2]],
                pos: [a[3], a[4], a[5]],
            },
            sensors,
            tilt_offset: [a[14], a[15]],
        }
    }
}

/// Everything the sensor stack and the dynamics depend on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub model: ModelParams,
    pub wheel: WheelEncoderParams,
    pub stations: Vec<StationParams>,
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet {
            model: ModelParams::default(),
            wheel: WheelEncoderParams::default(),
            stations: vec![StationParams::default()],
        }
    }
}

impl ParamSet {
    /// Flattened length: model (15) + wheel (2) + 16 per station.
    pub fn n_params(&self) -> usize {
        N_MODEL_PARAMS + N_WHEEL_PARAMS + N_STATION_PARAMS * self.stations.len()
    }

    pub fn n_channels(&self) -> usize {
        n_channels(self.stations.len())
    }

    pub fn flatten(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.n_params());
        v.as_mut_slice()[..N_MODEL_PARAMS].copy_from_slice(&self.model.to_array());
        v.as_mut_slice()[N_MODEL_PARAMS..N_MODEL_PARAMS + N_WHEEL_PARAMS]
            .copy_from_slice(&self.wheel.to_array());
        for (s, st) in self.stations.iter().enumerate() {
            let o = N_MODEL_PARAMS + N_WHEEL_PARAMS + s * N_STATION_PARAMS;
            v.as_mut_slice()[o..o + N_STATION_PARAMS].copy_from_slice(&st.to_array());
        }
        v
    }

    pub fn unflatten(template: &ParamSet, v: &DVector<f64>) -> ParamSet {
        assert_eq!(v.len(), template.n_params());
        let mut model = [0.0; N_MODEL_PARAMS];
        model.copy_from_slice(&v.as_slice()[..N_MODEL_PARAMS]);
        let mut wheel = [0.0; N_WHEEL_PARAMS];
        wheel.copy_from_slice(&v.as_slice()[N_MODEL_PARAMS..N_MODEL_PARAMS + N_WHEEL_PARAMS]);
        let mut stations = Vec::with_capacity(template.stations.len());
        for s in 0..template.stations.len() {
            let o = N_MODEL_PARAMS + N_WHEEL_PARAMS + s * N_STATION_PARAMS;
            let mut a = [0.0; N_STATION_PARAMS];
            a.copy_from_slice(&v.as_slice()[o..o + N_STATION_PARAMS]);
            stations.push(StationParams::from_array(&a));
        }
        ParamSet {
            model: ModelParams::from_array(&model),
            wheel: WheelEncoderParams::from_array(&wheel),
            stations,
        }
    }

    /// Index of a named parameter in the flattened vector. Model and wheel
    /// parameters are addressed by name; station scalars as
    /// `lh<station>.<idx>` with `idx` in `0..16`.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        if let Some(i) = ModelParams::names().iter().position(|n| *n == name) {
            return Some(i);
        }
        if let Some(i) = WheelEncoderParams::names().iter().position(|n| *n == name) {
            return Some(N_MODEL_PARAMS + i);
        }
        let rest = name.strip_prefix("lh")?;
        let (st, idx) = rest.split_once('.')?;
        let st: usize = st.parse().ok()?;
        let idx: usize = idx.parse().ok()?;
        if st < self.stations.len() && idx < N_STATION_PARAMS {
            Some(N_MODEL_PARAMS + N_WHEEL_PARAMS + st * N_STATION_PARAMS + idx)
        } else {
            None
        }
    }
}

/// Total stacked channel count for `n_stations` base stations.
pub fn n_channels(n_stations: usize) -> usize {
    N_IMU + N_WHEEL + N_LH_PER_STATION * n_stations
}

/// Range of IMU channels in the stacked vector.
pub fn imu_range() -> std::ops::Range<usize> {
    0..N_IMU
}

/// Range of wheel-speed channels.
pub fn wheel_range() -> std::ops::Range<usize> {
    N_IMU..N_IMU + N_WHEEL
}

/// Range of sweep-angle channels for station `s`.
pub fn lh_range(s: usize) -> std::ops::Range<usize> {
    let o = N_IMU + N_WHEEL + s * N_LH_PER_STATION;
    o..o + N_LH_PER_STATION
}

/// One stacked measurement with per-channel validity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementFrame {
    /// Sample time [s].
    pub t: f64,
    pub values: DVector<f64>,
    pub valid: Vec<bool>,
}

impl MeasurementFrame {
    pub fn empty(t: f64, n_stations: usize) -> Self {
        let n = n_channels(n_stations);
        MeasurementFrame {
            t,
            values: DVector::zeros(n),
            valid: vec![false; n],
        }
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Inertial measurement `[ax, ay, gyro]`: body-frame accelerometer readings
/// and yaw-rate gyro. The accelerations include the rotating-frame terms
/// (`+vy*yaw_rate` on x, `-vx*yaw_rate` on y), which makes them equal to the
/// body-frame velocity derivatives of the model.
pub fn imu_measurement(
    x: &VehicleState,
    u: &ControlInput,
    params: &ModelParams,
    cfg: &DriveConfig,
) -> Vector3<f64> {
    let out = imu_g(
        &[x.x, x.y, x.yaw, x.vx, x.vy, x.yaw_rate],
        &[u.steer, u.torque],
        &params.to_array(),
        cfg,
    );
    Vector3::new(out[0], out[1], out[2])
}

fn imu_g<S: Real>(x: &[S; 6], u: &[S; 2], th: &[S; N_MODEL_PARAMS], cfg: &DriveConfig) -> [S; 3] {
    let (vx, vy, yaw_rate) = (x[3], x[4], x[5]);
    let steer = u[0];
    let m = th[6];
    let f = forces_g(x, u, th, cfg);
    let (sd, cd) = (steer.sin(), steer.cos());
    [
        (f.fxr + f.fxf * cd - f.fyf * sd - f.ffr) / m + vy * yaw_rate,
        (f.fyr + f.fxf * sd + f.fyf * cd) / m - vx * yaw_rate,
        yaw_rate,
    ]
}

/// Wheel rotation rates `[fl, fr, rl, rr]` [rad/s] from rigid-body wheel
/// contact velocities. Front wheels project the contact velocity onto the
/// steered rolling direction.
pub fn wheel_encoder_measurement(
    x: &VehicleState,
    steer: f64,
    wheel: &WheelEncoderParams,
    lf: f64,
) -> [f64; 4] {
    wheel_g(
        &[x.x, x.y, x.yaw, x.vx, x.vy, x.yaw_rate],
        steer,
        wheel.wheel_radius,
        wheel.track_width,
        lf,
    )
}

fn wheel_g<S: Real>(x: &[S; 6], steer: S, radius: S, width: S, lf: S) -> [S; 4] {
    let (vx, vy, yaw_rate) = (x[3], x[4], x[5]);
    let half = S::from_f64(0.5);
    let (sd, cd) = (steer.sin(), steer.cos());
    let lat_front = vy + lf * yaw_rate;
    [
        (cd * (vx - half * width * yaw_rate) + sd * lat_front) / radius,
        (cd * (vx + half * width * yaw_rate) + sd * lat_front) / radius,
        (vx - half * width * yaw_rate) / radius,
        (vx + half * width * yaw_rate) / radius,
    ]
}

/// Position of body-frame sensor `k` expressed in the station frame.
pub fn body_to_station(x: &VehicleState, sensor: usize, station: &StationParams) -> Vector3<f64> {
    let a = station.to_array();
    let mut ths = [0.0; N_STATION_PARAMS];
    ths.copy_from_slice(&a);
    let p = body_to_station_g(&[x.x, x.y, x.yaw, x.vx, x.vy, x.yaw_rate], sensor, &ths);
    Vector3::new(p[0], p[1], p[2])
}

/// Rotation matrix `Rz(c) Ry(b) Rx(a)` with generic entries.
fn rot_zyx_g<S: Real>(a: S, b: S, c: S) -> [[S; 3]; 3] {
    let (sa, ca) = (a.sin(), a.cos());
    let (sb, cb) = (b.sin(), b.cos());
    let (sc, cc) = (c.sin(), c.cos());
    [
        [cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa],
        [sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa],
        [-sb, cb * sa, cb * ca],
    ]
}

fn body_to_station_g<S: Real>(x: &[S; 6], sensor: usize, st: &[S; N_STATION_PARAMS]) -> [S; 3] {
    let yaw = x[2];
    let (sy, cy) = (yaw.sin(), yaw.cos());
    let (bx, by) = (st[6 + 2 * sensor], st[7 + 2 * sensor]);
    // planar sensor position in the world, tracking plane z = 0
    let pw = [x[0] + cy * bx - sy * by, x[1] + sy * bx + cy * by, S::from_f64(0.0)];
    let r = rot_zyx_g(st[0], st[1], st[2]);
    let d = [pw[0] - st[3], pw[1] - st[4], pw[2] - st[5]];
    // R^T d
    [
        r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
        r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
        r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
    ]
}

/// Nominal sweep-plane tilts [rad] before per-station offsets.
pub const PLANE_TILTS: [f64; 2] = [-std::f64::consts::FRAC_PI_6, std::f64::consts::FRAC_PI_6];

/// Margin keeping `asin` away from its domain edge; channels closer to the
/// sweep-cone boundary than this are flagged invalid.
const ASIN_GUARD: f64 = 1.0 - 1e-9;
/// Minimum squared radial distance from the station rotation axis.
const MIN_RADIAL_SQ: f64 = 1e-12;

/// Sweep angle of plane `plane` (0 or 1) at a point in the station frame.
/// Returns `None` when the point is on the rotation axis or outside the
/// swept cone.
fn sweep_angle_g<S: Real>(p: &[S; 3], tilt_offset: S, plane: usize) -> Option<S> {
    let (x, y, z) = (p[0], p[1], p[2]);
    let rho_sq = x * x + y * y;
    if rho_sq.value() <= MIN_RADIAL_SQ {
        return None;
    }
    let tilt = S::from_f64(PLANE_TILTS[plane]) - tilt_offset;
    let arg = z * tilt.tan() / rho_sq.sqrt();
    if arg.value().abs() >= ASIN_GUARD {
        return None;
    }
    Some(y.atan2(x) + arg.asin())
}

/// All eight sweep angles of one station for the car at `x`:
/// sensors 1..4 on plane 1, then sensors 1..4 on plane 2.
pub fn lighthouse_angles(x: &VehicleState, station: &StationParams) -> ([f64; 8], [bool; 8]) {
    let mut vals = [0.0; 8];
    let mut ok = [false; 8];
    let st = station.to_array();
    let xs = [x.x, x.y, x.yaw, x.vx, x.vy, x.yaw_rate];
    for plane in 0..2 {
        for k in 0..4 {
            let p = body_to_station_g(&xs, k, &st);
            if let Some(a) = sweep_angle_g(&p, st[14 + plane], plane) {
                vals[plane * 4 + k] = a;
                ok[plane * 4 + k] = true;
            }
        }
    }
    (vals, ok)
}

/// Sweep angles of one station plus their derivatives: columns `0..6` with
/// respect to the vehicle state, columns `6..22` with respect to the
/// flattened station block.
pub(crate) fn lighthouse_angles_with_jacobian(
    x: &VehicleState,
    station: &StationParams,
) -> ([f64; 8], [[f64; 22]; 8], [bool; 8]) {
    let mut vals = [0.0; 8];
    let mut jac = [[0.0; 22]; 8];
    let mut ok = [false; 8];
    let xs = [x.x, x.y, x.yaw, x.vx, x.vy, x.yaw_rate];
    let mut xd = [Dual::constant(0.0); 6];
    for i in 0..6 {
        xd[i] = Dual::variable(xs[i], i);
    }
    let sa = station.to_array();
    let mut std = [Dual::constant(0.0); N_STATION_PARAMS];
    for i in 0..N_STATION_PARAMS {
        std[i] = Dual::variable(sa[i], 6 + i);
    }
    for plane in 0..2 {
        for k in 0..4 {
            let ch = plane * 4 + k;
            let p = body_to_station_g(&xd, k, &std);
            if let Some(a) = sweep_angle_g(&p, std[14 + plane], plane) {
                vals[ch] = a.v;
                jac[ch][..22].copy_from_slice(&a.d[..22]);
                ok[ch] = true;
            }
        }
    }
    (vals, jac, ok)
}

/// Stacks all sensor models into one frame, adding measurement noise (when
/// given) to valid channels only.
pub fn full_measurement(
    t: f64,
    x: &VehicleState,
    u: &ControlInput,
    noise: Option<&DVector<f64>>,
    params: &ParamSet,
    cfg: &DriveConfig,
) -> MeasurementFrame {
    let n = params.n_channels();
    let mut frame = MeasurementFrame {
        t,
        values: DVector::zeros(n),
        valid: vec![true; n],
    };
    let imu = imu_measurement(x, u, &params.model, cfg);
    frame.values.rows_mut(0, 3).copy_from(&imu);
    let wheels = wheel_encoder_measurement(x, u.steer, &params.wheel, params.model.lf);
    for (i, w) in wheels.iter().enumerate() {
        frame.values[N_IMU + i] = *w;
    }
    for (s, st) in params.stations.iter().enumerate() {
        let (vals, ok) = lighthouse_angles(x, st);
        let o = lh_range(s).start;
        for i in 0..N_LH_PER_STATION {
            frame.values[o + i] = vals[i];
            frame.valid[o + i] = ok[i];
        }
    }
    if let Some(w) = noise {
        assert_eq!(w.len(), n);
        for i in 0..n {
            if frame.valid[i] {
                frame.values[i] += w[i];
            }
        }
    }
    frame
}

/// Jacobians of the stacked measurement at `(x, u, params)`. Rows of invalid
/// channels are zero. The noise Jacobian is the identity on valid channels
/// and is not stored.
#[derive(Clone, Debug)]
pub struct MeasurementJacobians {
    pub wrt_state: DMatrix<f64>,
    /// Columns ordered like [`ParamSet::flatten`].
    pub wrt_params: DMatrix<f64>,
    pub valid: Vec<bool>,
}

/// Forward-mode Jacobians of [`full_measurement`] (noise-free part).
pub fn measurement_jacobians(
    x: &VehicleState,
    u: &ControlInput,
    params: &ParamSet,
    cfg: &DriveConfig,
) -> MeasurementJacobians {
    let n = params.n_channels();
    let np = params.n_params();
    let mut wrt_state = DMatrix::zeros(n, 6);
    let mut wrt_params = DMatrix::zeros(n, np);
    let mut valid = vec![true; n];

    let xs = [x.x, x.y, x.yaw, x.vx, x.vy, x.yaw_rate];
    let th = params.model.to_array();

    // IMU: lanes 0..6 state, 6..8 input (unused), 8..23 model parameters
    let mut xd = [Dual::constant(0.0); 6];
    for i in 0..6 {
        xd[i] = Dual::variable(xs[i], i);
    }
    let ud = [Dual::constant(u.steer), Dual::constant(u.torque)];
    let mut thd = [Dual::constant(0.0); N_MODEL_PARAMS];
    for i in 0..N_MODEL_PARAMS {
        thd[i] = Dual::variable(th[i], 8 + i);
    }
    let imu = imu_g(&xd, &ud, &thd, cfg);
    for r in 0..3 {
        for c in 0..6 {
            wrt_state[(r, c)] = imu[r].d[c];
        }
        for c in 0..N_MODEL_PARAMS {
            wrt_params[(r, c)] = imu[r].d[8 + c];
        }
    }

    // wheels: lanes 0..6 state, 6 radius, 7 width, 8 lf
    let wh = wheel_g(
        &xd,
        Dual::constant(u.steer),
        Dual::variable(params.wheel.wheel_radius, 6),
        Dual::variable(params.wheel.track_width, 7),
        Dual::variable(params.model.lf, 8),
    );
    for r in 0..4 {
        let row = N_IMU + r;
        for c in 0..6 {
            wrt_state[(row, c)] = wh[r].d[c];
        }
        wrt_params[(row, N_MODEL_PARAMS)] = wh[r].d[6];
        wrt_params[(row, N_MODEL_PARAMS + 1)] = wh[r].d[7];
        // lf is model parameter index 8
        wrt_params[(row, 8)] = wh[r].d[8];
    }

    // lighthouse: per station, lanes 0..6 state, 6..22 station block
    for (s, st) in params.stations.iter().enumerate() {
        let (_, jac, ok) = lighthouse_angles_with_jacobian(x, st);
        let col0 = N_MODEL_PARAMS + N_WHEEL_PARAMS + s * N_STATION_PARAMS;
        for ch in 0..N_LH_PER_STATION {
            let row = lh_range(s).start + ch;
            if !ok[ch] {
                valid[row] = false;
                continue;
            }
            for c in 0..6 {
                wrt_state[(row, c)] = jac[ch][c];
            }
            for c in 0..N_STATION_PARAMS {
                wrt_params[(row, col0 + c)] = jac[ch][6 + c];
            }
        }
    }

    MeasurementJacobians {
        wrt_state,
        wrt_params,
        valid,
    }
}

/// Per-channel measurement noise levels (standard deviations).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevels {
    /// Accelerometer noise [m/s^2].
    pub accel: f64,
    /// Gyro noise [rad/s].
    pub gyro: f64,
    /// Wheel-speed noise [rad/s].
    pub wheel: f64,
    /// Sweep-angle noise [rad].
    pub lighthouse: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        NoiseLevels {
            accel: 0.5,
            gyro: 0.05,
            wheel: 0.5,
            lighthouse: 1.0e-3,
        }
    }
}

impl NoiseLevels {
    /// Standard deviation per stacked channel.
    pub fn channel_stds(&self, n_stations: usize) -> DVector<f64> {
        let n = n_channels(n_stations);
        let mut v = DVector::zeros(n);
        v[0] = self.accel;
        v[1] = self.accel;
        v[2] = self.gyro;
        for i in wheel_range() {
            v[i] = self.wheel;
        }
        for s in 0..n_stations {
            for i in lh_range(s) {
                v[i] = self.lighthouse;
            }
        }
        v
    }
}
