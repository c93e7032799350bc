//! Dynamic bicycle model with smoothed tire forces.
//!
//! State is `[x, y, yaw, vx, vy, yaw_rate]`: world position, heading, and
//! body-frame velocities. Input is `[steer, torque]`. Lateral tire forces
//! follow a simplified magic-formula curve `F_y = D sin(C atan(B alpha))`;
//! the drivetrain force is `(cm1 - cm2 vx) * torque`, split between the
//! axles, minus a speed-dependent rolling/drag friction term.
//!
//! Slip angles use the arctangent expression for `|vx| >= vx_blend` and a
//! cubic polynomial `b vx + c vx^3` below, with `(b, c)` chosen so that
//! value and first derivative are continuous at `+vx_blend`. The polynomial
//! passes through the origin, which removes the singularity of the
//! arctangent expression at standstill. The match is one-sided: branch
//! coefficients are fitted at `+vx_blend`, so crossing `-vx_blend` in
//! reverse is only approximately continuous. Reverse driving is outside the
//! envelope this model is tuned for.
//!
//! Discretization is one fixed-step RK4 stage; process noise enters
//! additively after integration. All Jacobians are produced by forward-mode
//! dual numbers and validated against central finite differences in tests.

use nalgebra::{Matrix2, SMatrix, Vector6};
use serde::{Deserialize, Serialize};

use crate::math::{Dual, Real};

/// Number of entries in the flattened model parameter vector.
pub const N_MODEL_PARAMS: usize = 15;

/// Planar vehicle state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// World x position [m].
    pub x: f64,
    /// World y position [m].
    pub y: f64,
    /// Heading [rad], unwrapped.
    pub yaw: f64,
    /// Longitudinal body velocity [m/s].
    pub vx: f64,
    /// Lateral body velocity [m/s].
    pub vy: f64,
    /// Yaw rate [rad/s].
    pub yaw_rate: f64,
}

impl VehicleState {
    pub fn from_vector(v: &Vector6<f64>) -> Self {
        VehicleState {
            x: v[0],
            y: v[1],
            yaw: v[2],
            vx: v[3],
            vy: v[4],
            yaw_rate: v[5],
        }
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(self.x, self.y, self.yaw, self.vx, self.vy, self.yaw_rate)
    }
}

/// Steering angle [rad] and drive command (normalized duty, dimensionless).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub steer: f64,
    pub torque: f64,
}

impl ControlInput {
    pub fn new(steer: f64, torque: f64) -> Self {
        ControlInput { steer, torque }
    }
}

/// Lumped model parameters.
///
/// Flattening order (used by identification and Jacobian columns):
/// `[d_front, d_rear, c_front, c_rear, b_front, b_rear, mass, inertia_z,
/// lf, lr, cd0, cd1, cd2, cm1, cm2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Front/rear tire peak lateral force [N].
    pub d_front: f64,
    pub d_rear: f64,
    /// Front/rear tire shape factor [-].
    pub c_front: f64,
    pub c_rear: f64,
    /// Front/rear tire stiffness factor [1/rad].
    pub b_front: f64,
    pub b_rear: f64,
    /// Vehicle mass [kg].
    pub mass: f64,
    /// Yaw inertia [kg m^2].
    pub inertia_z: f64,
    /// Distance center of gravity to front/rear axle [m].
    pub lf: f64,
    pub lr: f64,
    /// Friction force: constant, linear and quadratic coefficients
    /// [N], [N s/m], [N s^2/m^2].
    pub cd0: f64,
    pub cd1: f64,
    pub cd2: f64,
    /// Drive force gain [N] and speed-proportional reduction [N s/m].
    pub cm1: f64,
    pub cm2: f64,
}

impl Default for ModelParams {
    /// Plausible values for a palm-sized 1:28 scale car.
    fn default() -> Self {
        ModelParams {
            d_front: 0.55,
            d_rear: 0.62,
            c_front: 1.35,
            c_rear: 1.4,
            b_front: 4.0,
            b_rear: 4.5,
            mass: 0.28,
            inertia_z: 4.0e-4,
            lf: 0.047,
            lr: 0.05,
            cd0: 0.05,
            cd1: 0.01,
            cd2: 0.02,
            cm1: 0.9,
            cm2: 0.12,
        }
    }
}

impl ModelParams {
    pub fn to_array(&self) -> [f64; N_MODEL_PARAMS] {
        [
            self.d_front,
            self.d_rear,
            self.c_front,
            self.c_rear,
            self.b_front,
            self.b_rear,
            self.mass,
            self.inertia_z,
            self.lf,
            self.lr,
            self.cd0,
            self.cd1,
            self.cd2,
            self.cm1,
            self.cm2,
        ]
    }

    pub fn from_array(a: &[f64; N_MODEL_PARAMS]) -> Self {
        ModelParams {
            d_front: a[0],
            d_rear: a[1],
            c_front: a[2],
            c_rear: a[3],
            b_front: a[4],
            b_rear: a[5],
            mass: a[6],
            inertia_z: a[7],
            lf: a[8],
            lr: a[9],
            cd0: a[10],
            cd1: a[11],
            cd2: a[12],
            cm1: a[13],
            cm2: a[14],
        }
    }

    /// Names matching the flattening order of [`ModelParams::to_array`].
    pub fn names() -> [&'static str; N_MODEL_PARAMS] {
        [
            "d_front", "d_rear", "c_front", "c_rear", "b_front", "b_rear", "mass", "inertia_z",
            "lf", "lr", "cd0", "cd1", "cd2", "cm1", "cm2",
        ]
    }
}

/// Drivetrain layout and numerical smoothing configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriveConfig {
    /// Fraction of drive force on the rear axle, in `[0, 1]`
    /// (1 = rear wheel drive, 0.5 = symmetric all wheel drive).
    pub torque_split: f64,
    /// Longitudinal speed [m/s] below which slip angles switch to the
    /// polynomial branch. Must be positive.
    pub vx_blend: f64,
}

impl Default for DriveConfig {
    fn default() -> Self {
        DriveConfig {
            torque_split: 0.5,
            vx_blend: 0.1,
        }
    }
}

impl DriveConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.torque_split) {
            return Err(format!("torque_split {} outside [0, 1]", self.torque_split));
        }
        if !(self.vx_blend > 0.0) {
            return Err(format!("vx_blend {} must be positive", self.vx_blend));
        }
        Ok(())
    }
}

/// Additive disturbance: process part enters the state after integration,
/// measurement part enters the stacked sensor model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoiseVector {
    pub process: Vector6<f64>,
    pub measurement: nalgebra::DVector<f64>,
}

/// Slip-polynomial coefficients `(b, c)` for one axle: `alpha = b vx + c vx^3`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlipPoly {
    pub b: f64,
    pub c: f64,
}

pub(crate) struct Forces<S> {
    pub fxf: S,
    pub fxr: S,
    pub fyf: S,
    pub fyr: S,
    pub ffr: S,
}

/// Front slip angle, generic scalar. `q = -yaw_rate*lf - vy`.
fn slip_front_g<S: Real>(vx: S, vy: S, yaw_rate: S, steer: S, lf: S, eps: f64) -> S {
    let q = -yaw_rate * lf - vy;
    if vx.value().abs() >= eps {
        (q / vx).atan() + steer
    } else {
        let e = S::from_f64(eps);
        let val = (q / e).atan() + steer;
        let der = -q / (e * e + q * q);
        let (b, c) = poly_coeffs_g(val, der, eps);
        b * vx + c * vx * vx * vx
    }
}

/// Rear slip angle, generic scalar. `q = yaw_rate*lr - vy`.
fn slip_rear_g<S: Real>(vx: S, vy: S, yaw_rate: S, lr: S, eps: f64) -> S {
    let q = yaw_rate * lr - vy;
    if vx.value().abs() >= eps {
        (q / vx).atan()
    } else {
        let e = S::from_f64(eps);
        let val = (q / e).atan();
        let der = -q / (e * e + q * q);
        let (b, c) = poly_coeffs_g(val, der, eps);
        b * vx + c * vx * vx * vx
    }
}

/// Cubic coefficients matching value `val` and slope `der` at `+eps`:
/// `c = (der - val/eps) / (2 eps^2)`, `b = val/eps - c eps^2`.
fn poly_coeffs_g<S: Real>(val: S, der: S, eps: f64) -> (S, S) {
    let e = S::from_f64(eps);
    let e2 = e * e;
    let c = (der - val / e) / (S::from_f64(2.0) * e2);
    let b = val / e - c * e2;
    (b, c)
}

fn pacejka_g<S: Real>(alpha: S, d: S, c: S, b: S) -> S {
    d * (c * (b * alpha).atan()).sin()
}

pub(crate) fn forces_g<S: Real>(
    x: &[S; 6],
    u: &[S; 2],
    th: &[S; N_MODEL_PARAMS],
    cfg: &DriveConfig,
) -> Forces<S> {
    let (vx, vy, yaw_rate) = (x[3], x[4], x[5]);
    let (steer, torque) = (u[0], u[1]);
    let (d_f, d_r, c_f, c_r, b_f, b_r) = (th[0], th[1], th[2], th[3], th[4], th[5]);
    let (lf, lr) = (th[8], th[9]);
    let (cd0, cd1, cd2) = (th[10], th[11], th[12]);
    let (cm1, cm2) = (th[13], th[14]);

    let alpha_f = slip_front_g(vx, vy, yaw_rate, steer, lf, cfg.vx_blend);
    let alpha_r = slip_rear_g(vx, vy, yaw_rate, lr, cfg.vx_blend);
    let fyf = pacejka_g(alpha_f, d_f, c_f, b_f);
    let fyr = pacejka_g(alpha_r, d_r, c_r, b_r);

    let fm = (cm1 - cm2 * vx) * torque;
    let gamma = S::from_f64(cfg.torque_split);
    let fxr = gamma * fm;
    let fxf = (S::from_f64(1.0) - gamma) * fm;
    let ffr = vx.signum0() * (cd2 * vx * vx + cd1 * vx + cd0);

    Forces { fxf, fxr, fyf, fyr, ffr }
}

pub(crate) fn continuous_dynamics_g<S: Real>(
    x: &[S; 6],
    u: &[S; 2],
    th: &[S; N_MODEL_PARAMS],
    cfg: &DriveConfig,
) -> [S; 6] {
    let (yaw, vx, vy, yaw_rate) = (x[2], x[3], x[4], x[5]);
    let steer = u[0];
    let (m, iz) = (th[6], th[7]);
    let (lf, lr) = (th[8], th[9]);
    let f = forces_g(x, u, th, cfg);
    let (sd, cd) = (steer.sin(), steer.cos());
    let (sy, cy) = (yaw.sin(), yaw.cos());
    [
        vx * cy - vy * sy,
        vx * sy + vy * cy,
        yaw_rate,
        (f.fxr + f.fxf * cd - f.fyf * sd + m * vy * yaw_rate - f.ffr) / m,
        (f.fyr + f.fxf * sd + f.fyf * cd - m * vx * yaw_rate) / m,
        (f.fyf * lf * cd + f.fxf * lf * sd - f.fyr * lr) / iz,
    ]
}

fn rk4_g<S: Real>(
    x: &[S; 6],
    u: &[S; 2],
    th: &[S; N_MODEL_PARAMS],
    cfg: &DriveConfig,
    dt: f64,
) -> [S; 6] {
    let h = S::from_f64(dt);
    let half = S::from_f64(0.5);
    let sixth = S::from_f64(1.0 / 6.0);
    let two = S::from_f64(2.0);

    let k1 = continuous_dynamics_g(x, u, th, cfg);
    let mut x2 = *x;
    for i in 0..6 {
        x2[i] = x[i] + half * h * k1[i];
    }
    let k2 = continuous_dynamics_g(&x2, u, th, cfg);
    let mut x3 = *x;
    for i in 0..6 {
        x3[i] = x[i] + half * h * k2[i];
    }
    let k3 = continuous_dynamics_g(&x3, u, th, cfg);
    let mut x4 = *x;
    for i in 0..6 {
        x4[i] = x[i] + h * k3[i];
    }
    let k4 = continuous_dynamics_g(&x4, u, th, cfg);
    let mut out = *x;
    for i in 0..6 {
        out[i] = x[i] + h * sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
    }
    out
}

fn state_arr(x: &VehicleState) -> [f64; 6] {
    [x.x, x.y, x.yaw, x.vx, x.vy, x.yaw_rate]
}

/// Front and rear slip angles [rad], branch-selected by `|vx|` against
/// `cfg.vx_blend`.
pub fn slip_angles(
    x: &VehicleState,
    steer: f64,
    params: &ModelParams,
    cfg: &DriveConfig,
) -> (f64, f64) {
    let f = slip_front_g(x.vx, x.vy, x.yaw_rate, steer, params.lf, cfg.vx_blend);
    let r = slip_rear_g(x.vx, x.vy, x.yaw_rate, params.lr, cfg.vx_blend);
    (f, r)
}

/// Slip-polynomial coefficients for the current `(vy, yaw_rate, steer)`,
/// front and rear. Exposed so the branch-continuity conditions can be
/// checked directly.
pub fn slip_poly_coeffs(
    x: &VehicleState,
    steer: f64,
    params: &ModelParams,
    cfg: &DriveConfig,
) -> (SlipPoly, SlipPoly) {
    let eps = cfg.vx_blend;
    let qf = -x.yaw_rate * params.lf - x.vy;
    let vf = (qf / eps).atan() + steer;
    let df = -qf / (eps * eps + qf * qf);
    let (bf, cf) = poly_coeffs_g(vf, df, eps);
    let qr = x.yaw_rate * params.lr - x.vy;
    let vr = (qr / eps).atan();
    let dr = -qr / (eps * eps + qr * qr);
    let (br, cr) = poly_coeffs_g(vr, dr, eps);
    (SlipPoly { b: bf, c: cf }, SlipPoly { b: br, c: cr })
}

/// Lateral tire force [N] for one axle: `d sin(c atan(b alpha))`.
pub fn lateral_force(alpha: f64, d: f64, c: f64, b: f64) -> f64 {
    pacejka_g(alpha, d, c, b)
}

/// State derivative of the continuous-time model.
pub fn continuous_dynamics(
    x: &VehicleState,
    u: &ControlInput,
    params: &ModelParams,
    cfg: &DriveConfig,
) -> Vector6<f64> {
    let xd = continuous_dynamics_g(&state_arr(x), &[u.steer, u.torque], &params.to_array(), cfg);
    Vector6::from_row_slice(&xd)
}

/// One RK4 step of length `dt` followed by additive process noise.
pub fn discrete_step(
    x: &VehicleState,
    u: &ControlInput,
    process_noise: &Vector6<f64>,
    params: &ModelParams,
    cfg: &DriveConfig,
    dt: f64,
) -> VehicleState {
    let xn = rk4_g(&state_arr(x), &[u.steer, u.torque], &params.to_array(), cfg, dt);
    VehicleState {
        x: xn[0] + process_noise[0],
        y: xn[1] + process_noise[1],
        yaw: xn[2] + process_noise[2],
        vx: xn[3] + process_noise[3],
        vy: xn[4] + process_noise[4],
        yaw_rate: xn[5] + process_noise[5],
    }
}

/// `substeps` noise-free RK4 steps of length `dt / substeps`. Controllers
/// use this to keep the integration of the fast yaw/side-slip modes stable
/// on coarse planning grids.
pub fn integrate_substeps(
    x: &VehicleState,
    u: &ControlInput,
    params: &ModelParams,
    cfg: &DriveConfig,
    dt: f64,
    substeps: usize,
) -> VehicleState {
    assert!(substeps >= 1);
    let h = dt / substeps as f64;
    let zero = Vector6::zeros();
    let mut cur = *x;
    for _ in 0..substeps {
        cur = discrete_step(&cur, u, &zero, params, cfg, h);
    }
    cur
}

/// Jacobians of [`discrete_step`] (noise-free part). The Jacobian with
/// respect to the additive process noise is the identity and is not stored.
#[derive(Clone, Debug)]
pub struct StepJacobians {
    pub wrt_state: SMatrix<f64, 6, 6>,
    pub wrt_input: SMatrix<f64, 6, 2>,
    /// Columns ordered like [`ModelParams::to_array`].
    pub wrt_params: SMatrix<f64, 6, N_MODEL_PARAMS>,
}

/// Forward-mode Jacobians of one RK4 step. Lanes: 0..6 state, 6..8 input,
/// 8..23 parameters.
pub fn dynamics_jacobians(
    x: &VehicleState,
    u: &ControlInput,
    params: &ModelParams,
    cfg: &DriveConfig,
    dt: f64,
) -> StepJacobians {
    let xs = state_arr(x);
    let th = params.to_array();
    let mut xd = [Dual::constant(0.0); 6];
    for i in 0..6 {
        xd[i] = Dual::variable(xs[i], i);
    }
    let ud = [Dual::variable(u.steer, 6), Dual::variable(u.torque, 7)];
    let mut thd = [Dual::constant(0.0); N_MODEL_PARAMS];
    for i in 0..N_MODEL_PARAMS {
        thd[i] = Dual::variable(th[i], 8 + i);
    }
    let out = rk4_g(&xd, &ud, &thd, cfg, dt);
    let mut wrt_state = SMatrix::<f64, 6, 6>::zeros();
    let mut wrt_input = SMatrix::<f64, 6, 2>::zeros();
    let mut wrt_params = SMatrix::<f64, 6, N_MODEL_PARAMS>::zeros();
    for r in 0..6 {
        for c in 0..6 {
            wrt_state[(r, c)] = out[r].d[c];
        }
        for c in 0..2 {
            wrt_input[(r, c)] = out[r].d[6 + c];
        }
        for c in 0..N_MODEL_PARAMS {
            wrt_params[(r, c)] = out[r].d[8 + c];
        }
    }
    StepJacobians {
        wrt_state,
        wrt_input,
        wrt_params,
    }
}

/// Solves the two continuity conditions for the slip polynomial as a plain
/// 2x2 linear system. Used by tests as an independent check of the closed
/// form in [`slip_poly_coeffs`].
pub fn slip_poly_from_linear_solve(val: f64, der: f64, eps: f64) -> SlipPoly {
    // [ eps  eps^3 ] [b]   [val]
    // [ 1    3eps^2] [c] = [der]
    let a = Matrix2::new(eps, eps.powi(3), 1.0, 3.0 * eps * eps);
    let rhs = nalgebra::Vector2::new(val, der);
    let sol = a.lu().solve(&rhs).expect("continuity system is nonsingular for eps > 0");
    SlipPoly { b: sol[0], c: sol[1] }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sample_state(rng: &mut ChaCha8Rng) -> VehicleState {
        VehicleState {
            x: rng.gen_range(-2.0..2.0),
            y: rng.gen_range(-2.0..2.0),
            yaw: rng.gen_range(-3.0..3.0),
            vx: rng.gen_range(0.5..2.0),
            vy: rng.gen_range(-0.2..0.2),
            yaw_rate: rng.gen_range(-1.5..1.5),
        }
    }

    fn sample_input(rng: &mut ChaCha8Rng) -> ControlInput {
        ControlInput::new(rng.gen_range(-0.25..0.25), rng.gen_range(-0.3..0.6))
    }

    #[test]
    fn slip_poly_matches_independent_linear_solve() {
        let params = ModelParams::default();
        let cfg = DriveConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let st = VehicleState {
                vy: rng.gen_range(-0.5..0.5),
                yaw_rate: rng.gen_range(-2.0..2.0),
                ..Default::default()
            };
            let steer = rng.gen_range(-0.3..0.3);
            let (pf, pr) = slip_poly_coeffs(&st, steer, &params, &cfg);
            let eps = cfg.vx_blend;
            let qf = -st.yaw_rate * params.lf - st.vy;
            let oracle_f = slip_poly_from_linear_solve(
                (qf / eps).atan() + steer,
                -qf / (eps * eps + qf * qf),
                eps,
            );
            let qr = st.yaw_rate * params.lr - st.vy;
            let oracle_r = slip_poly_from_linear_solve(
                (qr / eps).atan(),
                -qr / (eps * eps + qr * qr),
                eps,
            );
            assert!((pf.b - oracle_f.b).abs() < 1e-12);
            assert!((pf.c - oracle_f.c).abs() < 1e-12);
            assert!((pr.b - oracle_r.b).abs() < 1e-12);
            assert!((pr.c - oracle_r.c).abs() < 1e-12);
        }
    }

    #[test]
    fn slip_branches_continuous_at_blend_speed() {
        let params = ModelParams::default();
        let cfg = DriveConfig::default();
        let eps = cfg.vx_blend;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let st = VehicleState {
                vy: rng.gen_range(-0.5..0.5),
                yaw_rate: rng.gen_range(-2.0..2.0),
                ..Default::default()
            };
            let steer = rng.gen_range(-0.3..0.3);
            let (pf, pr) = slip_poly_coeffs(&st, steer, &params, &cfg);
            // value continuity at +eps
            let qf = -st.yaw_rate * params.lf - st.vy;
            let arctan_f = (qf / eps).atan() + steer;
            let poly_f = pf.b * eps + pf.c * eps.powi(3);
            assert!((arctan_f - poly_f).abs() < 1e-12);
            // derivative continuity at +eps
            let der_arctan = -qf / (eps * eps + qf * qf);
            let der_poly = pf.b + 3.0 * pf.c * eps * eps;
            assert!((der_arctan - der_poly).abs() < 1e-12);
            // polynomial passes exactly through the origin
            assert_eq!(pr.b * 0.0 + pr.c * 0.0, 0.0);
        }
    }

    mod force_properties {
        use super::super::lateral_force;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn lateral_force_bounded_and_odd(
                alpha in -1.5f64..1.5,
                d in 0.2f64..1.5,
                c in 1.0f64..2.0,
                b in 2.0f64..12.0,
            ) {
                let f = lateral_force(alpha, d, c, b);
                prop_assert!(f.abs() <= d + 1e-12);
                let f_neg = lateral_force(-alpha, d, c, b);
                prop_assert!((f + f_neg).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lateral_force_peak_matches_grid_scan() {
        let (d, c, b) = (0.62, 1.4, 4.5);
        // closed-form peak location: atan(b a) = pi/(2c)
        let a_peak = (std::f64::consts::PI / (2.0 * c)).tan() / b;
        let mut best = (0.0, f64::MIN);
        let n = 200_000;
        for i in 0..n {
            let a = 1.5 * i as f64 / n as f64;
            let f = lateral_force(a, d, c, b);
            if f > best.1 {
                best = (a, f);
            }
        }
        assert!((best.0 - a_peak).abs() < 1e-4, "grid {} vs closed form {}", best.0, a_peak);
        assert!((best.1 - lateral_force(a_peak, d, c, b)).abs() < 1e-9);
    }

    #[test]
    fn standstill_is_equilibrium() {
        let params = ModelParams::default();
        let cfg = DriveConfig::default();
        let x = VehicleState::default();
        let u = ControlInput::new(0.2, 0.0);
        let xd = continuous_dynamics(&x, &u, &params, &cfg);
        // sgn(0) = 0 kills the friction term; slip polynomial is zero at vx=0
        for i in 0..6 {
            assert_eq!(xd[i], 0.0, "component {i}");
        }
    }

    #[test]
    fn coasting_speed_non_increasing() {
        let params = ModelParams::default();
        let cfg = DriveConfig::default();
        let mut x = VehicleState {
            vx: 2.0,
            ..Default::default()
        };
        let u = ControlInput::new(0.0, 0.0);
        let zero = Vector6::zeros();
        let mut prev = x.vx;
        for _ in 0..500 {
            x = discrete_step(&x, &u, &zero, &params, &cfg, 0.004);
            assert!(x.vx <= prev + 1e-12);
            prev = x.vx;
        }
        assert!(x.vx < 1.5);
    }

    #[test]
    fn rotating_the_world_commutes_with_stepping() {
        let params = ModelParams::default();
        let cfg = DriveConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x = sample_state(&mut rng);
            let u = sample_input(&mut rng);
            let phi: f64 = rng.gen_range(-3.0..3.0);
            let zero = Vector6::zeros();
            let rot = |s: &VehicleState| VehicleState {
                x: phi.cos() * s.x - phi.sin() * s.y,
                y: phi.sin() * s.x + phi.cos() * s.y,
                yaw: s.yaw + phi,
                ..*s
            };
            let a = rot(&discrete_step(&x, &u, &zero, &params, &cfg, 0.01));
            let b = discrete_step(&rot(&x), &u, &zero, &params, &cfg, 0.01);
            for (l, r) in a.as_vector().iter().zip(b.as_vector().iter()) {
                assert!((l - r).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rk4_step_matches_fine_euler_on_smooth_trajectory() {
        let params = ModelParams::default();
        let cfg = DriveConfig::default();
        let u = ControlInput::new(0.05, 0.2);
        // settle onto a steady cornering arc first so the fine-step Euler
        // reference is not dominated by its own error during the fast
        // side-slip transient
        let mut x = VehicleState {
            vx: 1.2,
            ..Default::default()
        };
        let zero_w = Vector6::zeros();
        for _ in 0..500 {
            x = discrete_step(&x, &u, &zero_w, &params, &cfg, 1e-3);
        }
        let dt = 0.02;
        let zero = Vector6::zeros();
        let rk4 = discrete_step(&x, &u, &zero, &params, &cfg, dt);
        let mut euler = x.as_vector();
        let n = 1000;
        for _ in 0..n {
            let xd = continuous_dynamics(&VehicleState::from_vector(&euler), &u, &params, &cfg);
            euler += xd * (dt / n as f64);
        }
        for i in 0..6 {
            assert!(
                (rk4.as_vector()[i] - euler[i]).abs() < 1e-6,
                "state {i}: {} vs {}",
                rk4.as_vector()[i],
                euler[i]
            );
        }
    }

    #[test]
    fn jacobians_match_central_differences() {
        let params = ModelParams::default();
        let cfg = DriveConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dt = 0.01;
        let zero = Vector6::zeros();
        for _ in 0..20 {
            let x = sample_state(&mut rng);
            let u = sample_input(&mut rng);
            let jac = dynamics_jacobians(&x, &u, &params, &cfg, dt);
            let h = 1e-6;
            // state columns
            for c in 0..6 {
                let mut xp = x.as_vector();
                let mut xm = x.as_vector();
                xp[c] += h;
                xm[c] -= h;
                let fp = discrete_step(&VehicleState::from_vector(&xp), &u, &zero, &params, &cfg, dt);
                let fm = discrete_step(&VehicleState::from_vector(&xm), &u, &zero, &params, &cfg, dt);
                let fd = (fp.as_vector() - fm.as_vector()) / (2.0 * h);
                for r in 0..6 {
                    let a = jac.wrt_state[(r, c)];
                    assert!(
                        (a - fd[r]).abs() <= 1e-5 * (1.0 + a.abs()),
                        "state jac ({r},{c}): {} vs {}",
                        a,
                        fd[r]
                    );
                }
            }
            // input columns
            for c in 0..2 {
                let mut up = u;
                let mut um = u;
                match c {
                    0 => {
                        up.steer += h;
                        um.steer -= h;
                    }
                    _ => {
                        up.torque += h;
                        um.torque -= h;
                    }
                }
                let fp = discrete_step(&x, &up, &zero, &params, &cfg, dt);
                let fm = discrete_step(&x, &um, &zero, &params, &cfg, dt);
                let fd = (fp.as_vector() - fm.as_vector()) / (2.0 * h);
                for r in 0..6 {
                    let a = jac.wrt_input[(r, c)];
                    assert!((a - fd[r]).abs() <= 1e-5 * (1.0 + a.abs()));
                }
            }
            // parameter columns
            let th = params.to_array();
            for c in 0..N_MODEL_PARAMS {
                let mut tp = th;
                let mut tm = th;
                let hh = h * (1.0 + th[c].abs());
                tp[c] += hh;
                tm[c] -= hh;
                let fp = discrete_step(&x, &u, &zero, &ModelParams::from_array(&tp), &cfg, dt);
                let fm = discrete_step(&x, &u, &zero, &ModelParams::from_array(&tm), &cfg, dt);
                let fd = (fp.as_vector() - fm.as_vector()) / (2.0 * hh);
                for r in 0..6 {
                    let a = jac.wrt_params[(r, c)];
                    assert!(
                        (a - fd[r]).abs() <= 1e-5 * (1.0 + a.abs()),
                        "param jac ({r},{c}): {} vs {}",
                        a,
                        fd[r]
                    );
                }
            }
        }
    }

    #[test]
    fn mass_column_vanishes_when_forces_vanish() {
        let params = ModelParams::default();
        let cfg = DriveConfig::default();
        let x = VehicleState::default();
        let u = ControlInput::default();
        let jac = dynamics_jacobians(&x, &u, &params, &cfg, 0.01);
        // at standstill with zero input every force is zero, so scaling
        // 1/mass has no effect
        for r in 0..6 {
            assert_eq!(jac.wrt_params[(r, 6)], 0.0);
        }
    }

    #[test]
    fn drive_config_validation() {
        assert!(DriveConfig::default().validate().is_ok());
        assert!(DriveConfig { torque_split: 1.2, vx_blend: 0.1 }.validate().is_err());
        assert!(DriveConfig { torque_split: 0.5, vx_blend: 0.0 }.validate().is_err());
    }
}
