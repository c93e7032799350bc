//! Contouring controller that races the car along a corridor.
//!
//! The horizon carries the vehicle state plus one extra path coordinate per
//! stage, advanced by a virtual speed input. The objective trades off lag
//! error (falling behind the path point), contouring error (lateral offset
//! from the centerline), a soft corridor penalty that activates near the
//! track edge, control effort and rates, and a linear reward on the path
//! coordinate that pulls the whole horizon forward. Dynamics enter as
//! equality defects between consecutive stages, so the problem keeps the
//! banded structure the SQP solver expects, and each call warm-starts from
//! the previous solution shifted by one stage.

pub mod track;

pub use track::{Track, TrackError, TrackPoint};

use std::rc::Rc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SMatrix, Vector6};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    discrete_step, dynamics_jacobians, integrate_substeps, ControlInput, DriveConfig, ModelParams,
    VehicleState,
};
use crate::math::Dual;
use crate::nlp::{ShootingProblem, SqpOptions, TermEval};

/// Stage variable layout: vehicle state, path coordinate, contouring error,
/// controls, virtual speed. The contouring error is a separate variable tied
/// to the state by an equality constraint, so the corridor becomes a plain
/// box on it. The terminal stage drops the controls.
const IDX_S: usize = 6;
const IDX_E: usize = 7;
const IDX_STEER: usize = 8;
const IDX_TORQUE: usize = 9;
const IDX_VS: usize = 10;
const STAGE_DIM: usize = 11;
const LAST_DIM: usize = 8;

/// Controller tuning. Weights are in SI units of the errors they multiply.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MpccConfig {
    /// Prediction steps per solve.
    pub horizon: usize,
    /// Control period [s].
    pub dt: f64,
    /// Integrator substeps per control period.
    pub substeps: usize,
    pub q_contour: f64,
    pub q_lag: f64,
    /// Linear reward on the path coordinate, per stage.
    pub q_advance: f64,
    /// Quadratic penalty on corridor violation distance; backs up the hard
    /// box whenever the box had to be widened past a reference outside it.
    pub q_corridor: f64,
    pub r_steer: f64,
    pub r_torque: f64,
    pub r_steer_rate: f64,
    pub r_torque_rate: f64,
    pub r_progress_rate: f64,
    pub steer_limit: f64,
    pub torque_min: f64,
    pub torque_max: f64,
    /// Upper bound on the virtual path speed [m/s].
    pub progress_rate_max: f64,
    /// Shrinks the usable half width before the corridor penalty kicks in.
    pub corridor_margin: f64,
    /// Per-iteration step limits keep the linearization honest. The path
    /// coordinate needs none: the lag cost already pins it to the position.
    pub trust_pos: f64,
    pub trust_yaw: f64,
    pub trust_vel: f64,
    pub trust_yaw_rate: f64,
    pub max_sqp_iter: usize,
    /// Iteration budget without a warm start (first solve after a reset).
    pub max_sqp_iter_cold: usize,
    /// Stationarity tolerance of the planner. Control-grade rather than
    /// optimizer-grade: the receding horizon refines the plan every period,
    /// so squeezing each solve much further buys nothing.
    pub tol: f64,
}

impl Default for MpccConfig {
    fn default() -> Self {
        MpccConfig {
            horizon: 40,
            dt: 1.0 / 30.0,
            substeps: 2,
            q_contour: 50.0,
            q_lag: 100.0,
            q_advance: 1.0,
            q_corridor: 2000.0,
            r_steer: 0.5,
            r_torque: 0.2,
            r_steer_rate: 2.0,
            r_torque_rate: 0.5,
            r_progress_rate: 0.05,
            steer_limit: 0.35,
            torque_min: -1.0,
            torque_max: 1.0,
            progress_rate_max: 3.0,
            corridor_margin: 0.02,
            trust_pos: 0.2,
            trust_yaw: 0.5,
            trust_vel: 0.8,
            trust_yaw_rate: 4.0,
            max_sqp_iter: 25,
            max_sqp_iter_cold: 150,
            tol: 1e-2,
        }
    }
}

/// Result of one controller update.
#[derive(Clone, Debug)]
pub struct MpccPlan {
    /// Control to apply over the next period.
    pub control: ControlInput,
    /// Path coordinate of the current position, wrapped into one lap.
    pub s: f64,
    /// Planned path speed at the current stage [m/s].
    pub progress_rate: f64,
    /// Predicted states along the horizon, current state first.
    pub predicted: Vec<VehicleState>,
    /// Path coordinates matching `predicted` (continuous, not wrapped).
    pub predicted_s: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Worst dynamics defect of the returned plan.
    pub defect: f64,
    pub solve_seconds: f64,
}

/// Receding-horizon contouring controller.
pub struct MpccController {
    track: Rc<Track>,
    cfg: MpccConfig,
    params: ModelParams,
    drive: DriveConfig,
    /// Previous solution, used to warm-start the next solve.
    warm: Option<Vec<DVector<f64>>>,
    prev_control: ControlInput,
}

/// One integrator step over a control period with chained step Jacobians.
fn step_with_jacobians(
    x: &VehicleState,
    u: &ControlInput,
    params: &ModelParams,
    drive: &DriveConfig,
    dt: f64,
    substeps: usize,
) -> (VehicleState, SMatrix<f64, 6, 6>, SMatrix<f64, 6, 2>) {
    let h = dt / substeps as f64;
    let zero = Vector6::zeros();
    let mut cur = *x;
    let mut jx = SMatrix::<f64, 6, 6>::identity();
    let mut ju = SMatrix::<f64, 6, 2>::zeros();
    for _ in 0..substeps {
        let j = dynamics_jacobians(&cur, u, params, drive, h);
        cur = discrete_step(&cur, u, &zero, params, drive, h);
        ju = j.wrt_state * ju + j.wrt_input;
        jx = j.wrt_state * jx;
    }
    (cur, jx, ju)
}

impl MpccController {
    pub fn new(track: Track, params: ModelParams, drive: DriveConfig, cfg: MpccConfig) -> Self {
        assert!(cfg.horizon >= 2);
        assert!(cfg.dt > 0.0 && cfg.substeps >= 1);
        MpccController {
            track: Rc::new(track),
            cfg,
            params,
            drive,
            warm: None,
            prev_control: ControlInput::default(),
        }
    }

    pub fn track(&self) -> &Track {
        &self.track
    }

    pub fn config(&self) -> &MpccConfig {
        &self.cfg
    }

    /// Drops the warm start, e.g. after teleporting the vehicle.
    pub fn reset(&mut self) {
        self.warm = None;
        self.prev_control = ControlInput::default();
    }

    /// Plans from the current state estimate and returns the control to
    /// apply now. Always returns a usable plan; `converged` reports whether
    /// the solver met its tolerances within the iteration budget.
    pub fn plan(&mut self, x: &VehicleState) -> MpccPlan {
        let started = Instant::now();
        let total = self.track.total_length();
        let p = [x.x, x.y];

        let cold = self.warm.is_none();
        let (mut s0, mut guess) = match self.warm.take() {
            Some(w) => {
                let hint = self.track.canonical_s(w[1][IDX_S]);
                let s_can = self.track.nearest_s(p, Some(hint));
                // keep the path coordinate continuous with the shifted plan
                let s0 = s_can + total * ((w[1][IDX_S] - s_can) / total).round();
                (s0, self.shifted_guess(&w))
            }
            None => {
                let s0 = self.track.nearest_s(p, None);
                (s0, self.cold_guess(x, s0))
            }
        };
        // re-anchor into the first lap so the coordinate never grows without
        // bound; shifting every stage by the same amount changes nothing
        let lap_shift = s0.div_euclid(total) * total;
        if lap_shift != 0.0 {
            s0 -= lap_shift;
            for z in guess.iter_mut() {
                z[IDX_S] -= lap_shift;
            }
        }
        let x0 = x.as_vector();
        for k in 0..6 {
            guess[0][k] = x0[k];
        }
        guess[0][IDX_S] = s0;
        // consistent contouring-error guesses and the corridor boxes around
        // them; a reference already outside keeps a widened box so the
        // subproblems stay feasible while the penalty pulls it back in
        let mut corridor = Vec::with_capacity(guess.len());
        for z in guess.iter_mut() {
            let tp = self.track.sample::<f64>(z[IDX_S]);
            let e = (z[0] - tp.position[0]) * tp.normal[0] + (z[1] - tp.position[1]) * tp.normal[1];
            z[IDX_E] = e;
            corridor.push((e, tp.half_width));
        }

        let problem = self.build_problem(&x0, s0, &corridor);
        let opts = SqpOptions {
            max_iter: if cold {
                self.cfg.max_sqp_iter_cold
            } else {
                self.cfg.max_sqp_iter
            },
            tol_stat: self.cfg.tol,
            // dynamics defects must stay tight regardless of how loose the
            // stationarity bar is, or the prediction itself is untrustworthy
            tol_feas: 1e-6,
            // several states carry no cost of their own, so a little proximal
            // damping keeps the subproblems well conditioned
            reg: 1e-4,
            ..Default::default()
        };
        let report = problem.solve(&guess, &opts);

        let stages = report.stages;
        let control = ControlInput::new(
            stages[0][IDX_STEER].clamp(-self.cfg.steer_limit, self.cfg.steer_limit),
            stages[0][IDX_TORQUE].clamp(self.cfg.torque_min, self.cfg.torque_max),
        );
        let predicted = stages
            .iter()
            .map(|z| VehicleState::from_vector(&Vector6::from_row_slice(&z.as_slice()[0..6])))
            .collect();
        let predicted_s = stages.iter().map(|z| z[IDX_S]).collect();
        let progress_rate = stages[0][IDX_VS];
        self.prev_control = control;
        self.warm = Some(stages);

        MpccPlan {
            control,
            s: self.track.canonical_s(s0),
            progress_rate,
            predicted,
            predicted_s,
            cost: report.cost,
            iterations: report.iterations,
            converged: report.status.is_converged(),
            defect: report.constraint_violation,
            solve_seconds: started.elapsed().as_secs_f64(),
        }
    }

    /// Previous solution advanced by one stage, tail extrapolated.
    fn shifted_guess(&self, w: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let n = self.cfg.horizon;
        let mut out = Vec::with_capacity(n + 1);
        for i in 0..n {
            let src = &w[i + 1];
            let mut z = DVector::zeros(STAGE_DIM);
            for k in 0..=IDX_E {
                z[k] = src[k];
            }
            // the terminal stage has no controls; reuse the last ones
            let ctrl = if src.len() == STAGE_DIM { src } else { &w[n - 1] };
            z[IDX_STEER] = ctrl[IDX_STEER];
            z[IDX_TORQUE] = ctrl[IDX_TORQUE];
            z[IDX_VS] = ctrl[IDX_VS];
            out.push(z);
        }
        let tail = &out[n - 1];
        let state = VehicleState::from_vector(&Vector6::from_row_slice(&tail.as_slice()[0..6]));
        let u = ControlInput::new(tail[IDX_STEER], tail[IDX_TORQUE]);
        let nx = integrate_substeps(
            &state,
            &u,
            &self.params,
            &self.drive,
            self.cfg.dt,
            self.cfg.substeps,
        );
        let mut z = DVector::zeros(LAST_DIM);
        z.rows_mut(0, 6).copy_from(&nx.as_vector());
        z[IDX_S] = tail[IDX_S] + self.cfg.dt * tail[IDX_VS];
        out.push(z);
        out
    }

    /// Dynamically feasible rollout following the centerline with a simple
    /// feedback law, so the first solve starts with zero defects.
    fn cold_guess(&self, x: &VehicleState, s0: f64) -> Vec<DVector<f64>> {
        let n = self.cfg.horizon;
        let dt = self.cfg.dt;
        let total = self.track.total_length();
        let mut out = Vec::with_capacity(n + 1);
        let mut cur = *x;
        let mut s = s0;
        for i in 0..=n {
            let dim = if i == n { LAST_DIM } else { STAGE_DIM };
            let mut z = DVector::zeros(dim);
            z.rows_mut(0, 6).copy_from(&cur.as_vector());
            z[IDX_S] = s;
            out.push(z);
            if i == n {
                break;
            }
            let tp = self.track.sample::<f64>(s);
            let target_yaw = tp.tangent[1].atan2(tp.tangent[0]);
            let lateral = (cur.x - tp.position[0]) * tp.normal[0]
                + (cur.y - tp.position[1]) * tp.normal[1];
            let heading = crate::math::wrap_angle(target_yaw - cur.yaw);
            let steer =
                (1.2 * heading - 1.0 * lateral).clamp(-self.cfg.steer_limit, self.cfg.steer_limit);
            let torque =
                (0.6 * (1.0 - cur.vx)).clamp(self.cfg.torque_min, self.cfg.torque_max);
            let u = ControlInput::new(steer, torque);
            cur = integrate_substeps(&cur, &u, &self.params, &self.drive, dt, self.cfg.substeps);
            let s_can = self
                .track
                .nearest_s([cur.x, cur.y], Some(self.track.canonical_s(s)));
            let s_next = s_can + total * ((s - s_can) / total).round();
            let vs = ((s_next - s) / dt).clamp(0.0, self.cfg.progress_rate_max);
            let zi = out.last_mut().unwrap();
            zi[IDX_STEER] = steer;
            zi[IDX_TORQUE] = torque;
            zi[IDX_VS] = vs;
            // advance by the stored rate so the progress defects vanish
            s += vs * dt;
        }
        out
    }

    /// `corridor` carries one `(reference error, half width)` pair per stage.
    fn build_problem(
        &self,
        x0: &Vector6<f64>,
        s0: f64,
        corridor: &[(f64, f64)],
    ) -> ShootingProblem {
        let cfg = self.cfg;
        let n = cfg.horizon;
        let mut dims = vec![STAGE_DIM; n];
        dims.push(LAST_DIM);
        let mut problem = ShootingProblem::new(&dims);

        // dynamics and path-coordinate defects
        for i in 0..n {
            let next_dim = dims[i + 1];
            let params = self.params;
            let drive = self.drive;
            let (dt, substeps) = (cfg.dt, cfg.substeps);
            problem.add_pair_constraint(i, 7, move |z, zn| {
                let state = VehicleState::from_vector(&Vector6::from_row_slice(&z[0..6]));
                let u = ControlInput::new(z[IDX_STEER], z[IDX_TORQUE]);
                let (pred, jx, ju) = step_with_jacobians(&state, &u, &params, &drive, dt, substeps);
                let predv = pred.as_vector();
                let mut value = DVector::zeros(7);
                for k in 0..6 {
                    value[k] = zn[k] - predv[k];
                }
                value[6] = zn[IDX_S] - z[IDX_S] - dt * z[IDX_VS];
                let mut jac = DMatrix::zeros(7, STAGE_DIM);
                for r in 0..6 {
                    for c in 0..6 {
                        jac[(r, c)] = -jx[(r, c)];
                    }
                    jac[(r, IDX_STEER)] = -ju[(r, 0)];
                    jac[(r, IDX_TORQUE)] = -ju[(r, 1)];
                }
                jac[(6, IDX_S)] = -1.0;
                jac[(6, IDX_VS)] = -dt;
                let mut jn = DMatrix::zeros(7, next_dim);
                for k in 0..6 {
                    jn[(k, k)] = 1.0;
                }
                jn[(6, IDX_S)] = 1.0;
                TermEval::pair(value, jac, jn)
            });
        }

        // the contouring-error variable equals the lateral offset from the
        // centerline; the equality is linearized by the SQP, leaving the
        // corridor as a plain box on the variable
        for i in 0..=n {
            let track = Rc::clone(&self.track);
            let dim = dims[i];
            problem.add_constraint(i, 1, move |z| {
                let px = Dual::variable(z[0], 0);
                let py = Dual::variable(z[1], 1);
                let s = Dual::variable(z[IDX_S], 2);
                let tp = track.sample::<Dual>(s);
                let dx = px - tp.position[0];
                let dy = py - tp.position[1];
                let ec = tp.normal[0] * dx + tp.normal[1] * dy;
                let mut jac = DMatrix::zeros(1, dim);
                jac[(0, 0)] = -ec.d[0];
                jac[(0, 1)] = -ec.d[1];
                jac[(0, IDX_S)] = -ec.d[2];
                jac[(0, IDX_E)] = 1.0;
                TermEval::new(DVector::from_row_slice(&[z[IDX_E] - ec.v]), jac)
            });
        }

        // lag and contouring costs along the horizon
        for i in 1..=n {
            let track = Rc::clone(&self.track);
            let dim = dims[i];
            let wl = cfg.q_lag.sqrt();
            let wc = cfg.q_contour.sqrt();
            problem.add_residual(i, 2, move |z| {
                let px = Dual::variable(z[0], 0);
                let py = Dual::variable(z[1], 1);
                let s = Dual::variable(z[IDX_S], 2);
                let tp = track.sample::<Dual>(s);
                let dx = px - tp.position[0];
                let dy = py - tp.position[1];
                let e_lag = Dual::constant(0.0) - (tp.tangent[0] * dx + tp.tangent[1] * dy);
                let mut value = DVector::zeros(2);
                let mut jac = DMatrix::zeros(2, dim);
                value[0] = wl * e_lag.v;
                jac[(0, 0)] = wl * e_lag.d[0];
                jac[(0, 1)] = wl * e_lag.d[1];
                jac[(0, IDX_S)] = wl * e_lag.d[2];
                value[1] = wc * z[IDX_E];
                jac[(1, IDX_E)] = wc;
                TermEval::new(value, jac)
            });
        }

        // corridor box and its soft backup
        let wcor = cfg.q_corridor.sqrt();
        for i in 1..=n {
            let (e_ref, half) = corridor[i];
            let wb = half - cfg.corridor_margin;
            let lo = (-wb).min(e_ref - 1e-3);
            let hi = wb.max(e_ref + 1e-3);
            problem.set_bounds(i, IDX_E, lo, hi);
            let dim = dims[i];
            problem.add_residual(i, 1, move |z| {
                let viol = z[IDX_E].abs() - wb;
                let mut value = DVector::zeros(1);
                let mut jac = DMatrix::zeros(1, dim);
                if viol > 0.0 {
                    value[0] = wcor * viol;
                    jac[(0, IDX_E)] = wcor * z[IDX_E].signum();
                }
                TermEval::new(value, jac)
            });
        }

        // control effort and rates
        let ws = cfg.r_steer.sqrt();
        let wt = cfg.r_torque.sqrt();
        let wds = cfg.r_steer_rate.sqrt();
        let wdt = cfg.r_torque_rate.sqrt();
        for i in 0..n {
            problem.add_residual(i, 2, move |z| {
                let mut jac = DMatrix::zeros(2, STAGE_DIM);
                jac[(0, IDX_STEER)] = ws;
                jac[(1, IDX_TORQUE)] = wt;
                TermEval::new(
                    DVector::from_row_slice(&[ws * z[IDX_STEER], wt * z[IDX_TORQUE]]),
                    jac,
                )
            });
        }
        let prev = self.prev_control;
        problem.add_residual(0, 2, move |z| {
            let mut jac = DMatrix::zeros(2, STAGE_DIM);
            jac[(0, IDX_STEER)] = wds;
            jac[(1, IDX_TORQUE)] = wdt;
            TermEval::new(
                DVector::from_row_slice(&[
                    wds * (z[IDX_STEER] - prev.steer),
                    wdt * (z[IDX_TORQUE] - prev.torque),
                ]),
                jac,
            )
        });
        for i in 0..n - 1 {
            problem.add_pair_residual(i, 2, move |z, zn| {
                let mut jac = DMatrix::zeros(2, STAGE_DIM);
                jac[(0, IDX_STEER)] = -wds;
                jac[(1, IDX_TORQUE)] = -wdt;
                let mut jn = DMatrix::zeros(2, STAGE_DIM);
                jn[(0, IDX_STEER)] = wds;
                jn[(1, IDX_TORQUE)] = wdt;
                TermEval::pair(
                    DVector::from_row_slice(&[
                        wds * (zn[IDX_STEER] - z[IDX_STEER]),
                        wdt * (zn[IDX_TORQUE] - z[IDX_TORQUE]),
                    ]),
                    jac,
                    jn,
                )
            });
        }

        // smooth virtual speed; this also gives the progress chain real
        // curvature, which the advance reward alone does not provide
        let wvs = cfg.r_progress_rate.sqrt();
        for i in 0..n - 1 {
            problem.add_pair_residual(i, 1, move |z, zn| {
                let mut jac = DMatrix::zeros(1, STAGE_DIM);
                jac[(0, IDX_VS)] = -wvs;
                let mut jn = DMatrix::zeros(1, STAGE_DIM);
                jn[(0, IDX_VS)] = wvs;
                TermEval::pair(
                    DVector::from_row_slice(&[wvs * (zn[IDX_VS] - z[IDX_VS])]),
                    jac,
                    jn,
                )
            });
        }

        // forward pull on the path coordinate
        for i in 1..=n {
            let mut w = vec![0.0; dims[i]];
            w[IDX_S] = -cfg.q_advance;
            problem.set_linear_cost(i, &w);
        }

        for i in 0..n {
            problem.set_bounds(i, IDX_STEER, -cfg.steer_limit, cfg.steer_limit);
            problem.set_bounds(i, IDX_TORQUE, cfg.torque_min, cfg.torque_max);
            problem.set_bounds(i, IDX_VS, 0.0, cfg.progress_rate_max);
        }
        for i in 0..=n {
            problem.set_step_bound(i, 0, cfg.trust_pos);
            problem.set_step_bound(i, 1, cfg.trust_pos);
            problem.set_step_bound(i, 2, cfg.trust_yaw);
            problem.set_step_bound(i, 3, cfg.trust_vel);
            problem.set_step_bound(i, 4, cfg.trust_vel);
            problem.set_step_bound(i, 5, cfg.trust_yaw_rate);
        }
        for k in 0..6 {
            problem.pin(0, k, x0[k]);
        }
        problem.pin(0, IDX_S, s0);
        problem
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aligned_state(track: &Track, s: f64, vx: f64) -> VehicleState {
        let tp = track.sample::<f64>(s);
        VehicleState {
            x: tp.position[0],
            y: tp.position[1],
            yaw: tp.tangent[1].atan2(tp.tangent[0]),
            vx,
            vy: 0.0,
            yaw_rate: 0.0,
        }
    }

    #[test]
    fn straight_track_yields_forward_drive() {
        let pts = (0..16).map(|i| [2.0 * i as f64, 0.0, 0.3]).collect();
        let track = Track::new(pts, false).unwrap();
        let cfg = MpccConfig::default();
        let mut ctl = MpccController::new(
            track,
            ModelParams::default(),
            DriveConfig::default(),
            cfg,
        );
        let x = VehicleState {
            x: 0.5,
            y: 0.02,
            yaw: 0.0,
            vx: 0.5,
            vy: 0.0,
            yaw_rate: 0.0,
        };
        let plan = ctl.plan(&x);
        assert!(plan.control.torque > 0.05, "torque {}", plan.control.torque);
        assert!(plan.control.steer.abs() <= cfg.steer_limit + 1e-12);
        assert!((0.0..=cfg.progress_rate_max).contains(&plan.progress_rate));
        let last = plan.predicted.last().unwrap();
        assert!(last.x > x.x + 0.3, "end of horizon at x = {}", last.x);
        assert!(plan.defect < 1e-4, "defect {}", plan.defect);
        assert_eq!(plan.predicted.len(), cfg.horizon + 1);
        assert_eq!(plan.predicted_s.len(), cfg.horizon + 1);
        // replanning from the predicted next state should be cheap
        let iters_cold = plan.iterations;
        let next = plan.predicted[1];
        let plan2 = ctl.plan(&next);
        assert!(plan2.iterations <= iters_cold);
    }

    #[test]
    fn predicted_path_stays_inside_corridor() {
        let track = Track::wavy_ring();
        let params = ModelParams::default();
        let drive = DriveConfig::default();
        let cfg = MpccConfig::default();
        let mut ctl = MpccController::new(track.clone(), params, drive, cfg);
        let mut x = aligned_state(&track, 2.0, 1.0);
        for _ in 0..10 {
            let plan = ctl.plan(&x);
            x = integrate_substeps(&x, &plan.control, &params, &drive, cfg.dt, cfg.substeps);
        }
        let plan = ctl.plan(&x);
        for (state, s) in plan.predicted.iter().zip(&plan.predicted_s) {
            let tp = track.sample::<f64>(*s);
            let d = [state.x - tp.position[0], state.y - tp.position[1]];
            let lat = d[0] * tp.normal[0] + d[1] * tp.normal[1];
            assert!(
                lat.abs() <= tp.half_width + 0.01,
                "lateral {lat} at s = {s}"
            );
        }
    }

    #[test]
    fn oval_closed_loop_makes_progress_inside_corridor() {
        let track = Track::oval();
        let params = ModelParams::default();
        let drive = DriveConfig::default();
        let cfg = MpccConfig::default();
        let mut ctl = MpccController::new(track.clone(), params, drive, cfg);
        let total = track.total_length();
        let mut x = aligned_state(&track, 0.5, 0.8);
        let mut s_prev: Option<f64> = None;
        let mut progress = 0.0;
        for step in 0..90 {
            let plan = ctl.plan(&x);
            assert!(plan.control.steer.abs() <= cfg.steer_limit + 1e-9);
            assert!(plan.control.torque <= cfg.torque_max + 1e-9);
            assert!(plan.control.torque >= cfg.torque_min - 1e-9);
            x = integrate_substeps(&x, &plan.control, &params, &drive, cfg.dt, cfg.substeps);
            let (lat, s_here) = track.lateral_offset([x.x, x.y], s_prev);
            let width = track.sample::<f64>(s_here).half_width;
            assert!(
                lat.abs() <= width,
                "left the corridor at step {step}: lateral {lat} vs {width}"
            );
            if let Some(sp) = s_prev {
                let mut ds = s_here - sp;
                if ds < -0.5 * total {
                    ds += total;
                }
                progress += ds;
            }
            s_prev = Some(s_here);
        }
        assert!(progress > 1.5, "progress over 3 s: {progress}");
    }
}
