//! Lighthouse base-station calibration and beam-crossing triangulation.
//!
//! Calibration fits the 16 parameters of each station (pose, body-frame
//! photodiode positions, sweep-plane tilt offsets) to sweep angles recorded
//! with the car resting at known deck poses. The fit is a damped least
//! squares over all valid channels of all samples.
//!
//! Triangulation goes the other way: the two sweep angles seen by one sensor
//! define two planes through the station origin; their intersection is a ray,
//! and cutting it with the deck plane recovers the sensor position without
//! using the dynamics at all. This inversion also powers the accuracy metric
//! reported after calibration.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleState;
use crate::nlp::{solve_nlls, NllsOptions, NllsReport};
use crate::sensors::{
    lighthouse_angles, lighthouse_angles_with_jacobian, StationParams, N_LH_PER_STATION,
    N_STATION_PARAMS, PLANE_TILTS,
};

/// Sweep angles recorded with the car at a known deck pose.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationSample {
    /// Known pose `[x, y, yaw]` on the deck.
    pub pose: [f64; 3],
    /// Eight angles per station.
    pub angles: Vec<[f64; N_LH_PER_STATION]>,
    pub valid: Vec<[bool; N_LH_PER_STATION]>,
}

fn pose_state(pose: &[f64; 3]) -> VehicleState {
    VehicleState {
        x: pose[0],
        y: pose[1],
        yaw: pose[2],
        ..Default::default()
    }
}

/// Simulates a calibration session: the car is placed at each pose and the
/// sweep angles of every station are recorded with additive Gaussian noise.
pub fn synthesize_scene(
    stations: &[StationParams],
    poses: &[[f64; 3]],
    noise_std: f64,
    rng: &mut impl Rng,
) -> Vec<CalibrationSample> {
    let dist = Normal::new(0.0, noise_std).expect("nonnegative noise");
    poses
        .iter()
        .map(|pose| {
            let mut angles = Vec::with_capacity(stations.len());
            let mut valid = Vec::with_capacity(stations.len());
            for st in stations {
                let (mut a, ok) = lighthouse_angles(&pose_state(pose), st);
                for (v, o) in a.iter_mut().zip(ok) {
                    if o {
                        *v += dist.sample(rng);
                    }
                }
                angles.push(a);
                valid.push(ok);
            }
            CalibrationSample {
                pose: *pose,
                angles,
                valid,
            }
        })
        .collect()
}

/// Deterministic spread of calibration poses over the annulus where an
/// overhead station sees the deck: radii sweep `[r_min, r_max]`, headings
/// rotate through a full turn.
pub fn ring_poses(n: usize, r_min: f64, r_max: f64) -> Vec<[f64; 3]> {
    // golden-angle spacing decorrelates radius from azimuth
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n)
        .map(|k| {
            let t = (k as f64 + 0.5) / n as f64;
            let r = r_min + (r_max - r_min) * t;
            let a = golden * k as f64;
            [r * a.cos(), r * a.sin(), (k as f64 * 2.39).sin() * std::f64::consts::PI]
        })
        .collect()
}

/// Per-station fit result.
#[derive(Debug)]
pub struct CalibrationResult {
    pub stations: Vec<StationParams>,
    pub reports: Vec<NllsReport>,
}

/// Half-widths of the trust box around the initial mount guess, indexed like
/// the flattened station block: rotation angles, position, sensor
/// coordinates, tilt offsets. The box does double duty: a mount is never
/// off by more than a few centimeters and degrees, and staying near the
/// initial geometry keeps every sensor visible. Without it the fit could
/// lower its cost by moving the station until channels drop out of the
/// sweep cone, deleting their residuals.
const TRUST_BOX: [f64; N_STATION_PARAMS] = [
    0.15, 0.15, 0.15, // rotation [rad]
    0.15, 0.15, 0.15, // position [m]
    0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, // sensors [m]
    0.03, 0.03, // tilt offsets [rad]
];

/// Fits every station's parameter block to the scene, starting from `init`.
/// Stations are independent given known poses, so each gets its own solve.
/// The solution is confined to [`TRUST_BOX`] around `init`.
pub fn calibrate(
    samples: &[CalibrationSample],
    init: &[StationParams],
    opts: &NllsOptions,
) -> CalibrationResult {
    let mut stations = Vec::with_capacity(init.len());
    let mut reports = Vec::with_capacity(init.len());
    for (s, st0) in init.iter().enumerate() {
        // fixed residual layout: one row per channel marked valid in the data
        let rows: Vec<(usize, usize)> = samples
            .iter()
            .enumerate()
            .flat_map(|(i, smp)| {
                (0..N_LH_PER_STATION)
                    .filter(move |ch| smp.valid[s][*ch])
                    .map(move |ch| (i, ch))
            })
            .collect();
        assert!(
            rows.len() >= N_STATION_PARAMS,
            "station {s}: {} valid channels cannot determine {} parameters",
            rows.len(),
            N_STATION_PARAMS
        );
        let samples_ref = samples.to_vec();
        let rows_ref = rows.clone();
        let eval = move |z: &DVector<f64>| {
            let mut block = [0.0; N_STATION_PARAMS];
            block.copy_from_slice(z.as_slice());
            let cand = StationParams::from_array(&block);
            let mut r = DVector::zeros(rows_ref.len());
            let mut jac = DMatrix::zeros(rows_ref.len(), N_STATION_PARAMS);
            let mut last_sample = usize::MAX;
            let mut vals = [0.0; N_LH_PER_STATION];
            let mut grads = [[0.0; 22]; N_LH_PER_STATION];
            let mut ok = [false; N_LH_PER_STATION];
            for (row, (i, ch)) in rows_ref.iter().enumerate() {
                if *i != last_sample {
                    let x = pose_state(&samples_ref[*i].pose);
                    (vals, grads, ok) = lighthouse_angles_with_jacobian(&x, &cand);
                    last_sample = *i;
                }
                // channels the candidate geometry cannot see contribute
                // nothing; they reappear as the iterate moves back in range
                if ok[*ch] {
                    // sweep angles live on a circle; comparing them without
                    // wrapping would leave 2*pi jumps near the atan2 cut
                    r[row] = crate::math::wrap_angle(vals[*ch] - samples_ref[*i].angles[s][*ch]);
                    for c in 0..N_STATION_PARAMS {
                        jac[(row, c)] = grads[*ch][6 + c];
                    }
                }
            }
            (r, jac)
        };
        let z0 = DVector::from_row_slice(&st0.to_array());
        let lower = DVector::from_fn(N_STATION_PARAMS, |i, _| z0[i] - TRUST_BOX[i]);
        let upper = DVector::from_fn(N_STATION_PARAMS, |i, _| z0[i] + TRUST_BOX[i]);
        let report = solve_nlls(eval, &lower, &upper, &z0, opts);
        let mut block = [0.0; N_STATION_PARAMS];
        block.copy_from_slice(report.z.as_slice());
        stations.push(StationParams::from_array(&block));
        reports.push(report);
    }
    CalibrationResult { stations, reports }
}

/// Intersects the two sweep planes seen by one sensor with the deck plane
/// `z = z_deck`. Returns the sensor position in the world frame, or `None`
/// when the beams are parallel to the deck or the crossing lies behind the
/// station.
pub fn triangulate_sensor(
    alpha: [f64; 2],
    station: &StationParams,
    z_deck: f64,
) -> Option<Vector3<f64>> {
    let mut normals = [Vector3::zeros(); 2];
    for plane in 0..2 {
        let tilt = PLANE_TILTS[plane] - station.tilt_offset[plane];
        let a = alpha[plane];
        normals[plane] = Vector3::new(a.sin(), -a.cos(), -tilt.tan());
    }
    let dir_station = normals[0].cross(&normals[1]);
    let rot = station.pose.rotation();
    let dir = rot * dir_station;
    let origin = Vector3::from_row_slice(&station.pose.pos);
    if dir.z.abs() < 1e-12 {
        return None;
    }
    let s = (z_deck - origin.z) / dir.z;
    if s <= 0.0 {
        return None;
    }
    Some(origin + dir * s)
}

/// Rigid 2D registration of the known body-frame sensor layout onto
/// triangulated world positions; returns the car pose `[x, y, yaw]`.
/// Needs at least two distinct sensors.
pub fn pose_from_sensor_positions(
    body: &[[f64; 2]],
    world: &[Vector3<f64>],
) -> Option<[f64; 3]> {
    assert_eq!(body.len(), world.len());
    let n = body.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let bc = [
        body.iter().map(|b| b[0]).sum::<f64>() / nf,
        body.iter().map(|b| b[1]).sum::<f64>() / nf,
    ];
    let wc = [
        world.iter().map(|w| w.x).sum::<f64>() / nf,
        world.iter().map(|w| w.y).sum::<f64>() / nf,
    ];
    // 2x2 cross-covariance of centered point sets
    let (mut sxx, mut sxy, mut syx, mut syy) = (0.0, 0.0, 0.0, 0.0);
    for (b, w) in body.iter().zip(world) {
        let bx = b[0] - bc[0];
        let by = b[1] - bc[1];
        let wx = w.x - wc[0];
        let wy = w.y - wc[1];
        sxx += wx * bx;
        sxy += wx * by;
        syx += wy * bx;
        syy += wy * by;
    }
    let yaw = f64::atan2(syx - sxy, sxx + syy);
    if !(sxx + syy).is_finite() || (syx - sxy == 0.0 && sxx + syy == 0.0) {
        return None;
    }
    let (sy, cy) = yaw.sin_cos();
    Some([
        wc[0] - (cy * bc[0] - sy * bc[1]),
        wc[1] - (sy * bc[0] + cy * bc[1]),
        yaw,
    ])
}

/// Reconstructs the car pose from one station's eight sweep angles. Sensors
/// missing either plane are dropped.
pub fn pose_from_station_angles(
    angles: &[f64; N_LH_PER_STATION],
    valid: &[bool; N_LH_PER_STATION],
    station: &StationParams,
    z_deck: f64,
) -> Option<[f64; 3]> {
    let mut body = Vec::with_capacity(4);
    let mut world = Vec::with_capacity(4);
    for k in 0..4 {
        if !(valid[k] && valid[4 + k]) {
            continue;
        }
        if let Some(p) = triangulate_sensor([angles[k], angles[4 + k]], station, z_deck) {
            body.push(station.sensors[k]);
            world.push(p);
        }
    }
    pose_from_sensor_positions(&body, &world)
}

/// Position error (meters) of the pose reconstructed through `estimated`
/// from noise-free angles generated by `truth`, at each test pose. Poses
/// that cannot be reconstructed report infinity.
pub fn pose_errors(
    truth: &StationParams,
    estimated: &StationParams,
    test_poses: &[[f64; 3]],
    z_deck: f64,
) -> Vec<f64> {
    test_poses
        .iter()
        .map(|pose| {
            let (angles, valid) = lighthouse_angles(&pose_state(pose), truth);
            match pose_from_station_angles(&angles, &valid, estimated, z_deck) {
                Some(p) => ((p[0] - pose[0]).powi(2) + (p[1] - pose[1]).powi(2)).sqrt(),
                None => f64::INFINITY,
            }
        })
        .collect()
}
