//! Moving horizon estimation.
//!
//! The estimator keeps a window of the last `M` input/measurement pairs and
//! solves a small trajectory optimization over the window: decision variables
//! are the window states and per-step process noise, measurements enter as
//! weighted residuals on valid channels, and the window's first state is
//! anchored to the estimate the filter itself produced when that step was
//! current. Older terms are geometrically discounted, so the window behaves
//! like a fading-memory smoother whose newest state is the estimate.
//!
//! Measurement noise does not appear as a decision variable: it enters the
//! output map additively, so minimizing over it in closed form folds it into
//! the output residual weight. The window grows from one step until it
//! reaches `M`, then slides.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector6};

use crate::dynamics::{discrete_step, dynamics_jacobians, ControlInput, DriveConfig, VehicleState};
use crate::math::wrap_angle;
use crate::nlp::{ShootingProblem, SqpOptions, TermEval};
use crate::sensors::{
    full_measurement, lh_range, measurement_jacobians, MeasurementFrame, NoiseLevels, ParamSet,
};

const X_DIM: usize = 6;
/// Interior stages carry the state and that step's process noise; the final
/// stage carries only the state.
const STAGE_DIM: usize = 12;

#[derive(Clone, Debug)]
pub struct MheConfig {
    /// Maximum window length in steps.
    pub horizon: usize,
    /// Geometric forgetting factor in (0, 1]; newer data weighs more.
    pub discount: f64,
    /// Estimation grid period [s].
    pub dt: f64,
    /// Prior weight on the window's first state (inverse covariance diagonal).
    pub weight_prior: [f64; 6],
    /// Process-noise weight (inverse covariance diagonal).
    pub weight_process: [f64; 6],
    /// Per-channel noise levels; output residual weights are the inverse
    /// variances.
    pub noise: NoiseLevels,
    /// Box on each process-noise component (symmetric, per state).
    pub process_bound: [f64; 6],
    /// Innovation gate in noise standard deviations: measured channels whose
    /// one-step prediction misses the measurement by more than this are
    /// dropped for the step. Infinite disables the gate.
    pub gate: f64,
    pub max_iter: usize,
    pub tol_stat: f64,
    pub tol_feas: f64,
}

impl Default for MheConfig {
    fn default() -> Self {
        MheConfig {
            horizon: 40,
            discount: 0.95,
            dt: 1.0 / 60.0,
            weight_prior: [1e4, 1e4, 1e4, 1e3, 1e3, 1e2],
            weight_process: [1e6, 1e6, 1e5, 1e4, 1e4, 1e3],
            noise: NoiseLevels::default(),
            process_bound: [f64::INFINITY; 6],
            gate: f64::INFINITY,
            max_iter: 25,
            tol_stat: 1e-4,
            tol_feas: 1e-9,
        }
    }
}

/// One estimation step's outcome.
#[derive(Clone, Debug)]
pub struct MheEstimate {
    /// Estimate of the current state (newest window state).
    pub state: VehicleState,
    /// Smoothed states over the whole window, oldest first.
    pub window: Vec<VehicleState>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Worst dynamics defect of the returned window.
    pub defect: f64,
    pub solve_seconds: f64,
}

pub struct Mhe {
    cfg: MheConfig,
    params: ParamSet,
    drive: DriveConfig,
    /// Window of (input, frame) pairs, oldest first.
    buffer: VecDeque<(ControlInput, MeasurementFrame)>,
    /// Past estimates; the front anchors the current window start.
    history: VecDeque<Vector6<f64>>,
    /// Previous solution stages for warm starting.
    warm: Option<Vec<DVector<f64>>>,
}

impl Mhe {
    pub fn new(cfg: MheConfig, params: ParamSet, drive: DriveConfig, x0: &VehicleState) -> Self {
        assert!(cfg.horizon >= 1);
        assert!(cfg.discount > 0.0 && cfg.discount <= 1.0);
        let mut history = VecDeque::new();
        history.push_back(x0.as_vector());
        Mhe {
            cfg,
            params,
            drive,
            buffer: VecDeque::new(),
            history,
            warm: None,
        }
    }

    pub fn config(&self) -> &MheConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Current window length, `min(steps so far, horizon)`.
    pub fn window_len(&self) -> usize {
        self.buffer.len()
    }

    /// Most recent estimate (the initial state before the first step).
    pub fn latest(&self) -> VehicleState {
        VehicleState::from_vector(self.history.back().expect("history non-empty"))
    }

    /// Advances the estimator by one grid step. `u` was applied over the last
    /// period and `frame` was measured at the period's start; the returned
    /// estimate is for the period's end.
    pub fn step(&mut self, u: &ControlInput, frame: &MeasurementFrame) -> MheEstimate {
        let started = Instant::now();
        let frame = self.gate_frame(u, frame);
        self.buffer.push_back((*u, frame));
        if self.buffer.len() > self.cfg.horizon {
            self.buffer.pop_front();
            self.history.pop_front();
        }
        let m = self.buffer.len();
        let anchor = self.history.front().copied().expect("anchor present");

        let guess = self.build_guess(m);
        let problem = self.build_problem(m, &anchor);
        let opts = SqpOptions {
            max_iter: self.cfg.max_iter,
            tol_stat: self.cfg.tol_stat,
            tol_feas: self.cfg.tol_feas,
            reg: 1e-8,
            ..Default::default()
        };
        let report = problem.solve(&guess, &opts);

        let window: Vec<VehicleState> = report
            .stages
            .iter()
            .map(|z| VehicleState::from_vector(&Vector6::from_row_slice(&z.as_slice()[..X_DIM])))
            .collect();
        let state = *window.last().expect("window non-empty");
        self.history.push_back(state.as_vector());
        self.warm = Some(report.stages);

        MheEstimate {
            state,
            window,
            cost: report.cost,
            iterations: report.iterations,
            converged: report.status.is_converged(),
            defect: report.constraint_violation,
            solve_seconds: started.elapsed().as_secs_f64(),
        }
    }

    /// Drops channels whose innovation against the one-step prediction from
    /// the latest estimate is implausibly large.
    fn gate_frame(&self, u: &ControlInput, frame: &MeasurementFrame) -> MeasurementFrame {
        let mut frame = frame.clone();
        if !self.cfg.gate.is_finite() {
            return frame;
        }
        let latest = self.history.back().expect("history non-empty");
        let x = VehicleState::from_vector(latest);
        let pred = full_measurement(frame.t, &x, u, None, &self.params, &self.drive);
        let stds = self.cfg.noise.channel_stds(self.params.stations.len());
        let lh_start = lh_range(0).start;
        for c in 0..frame.values.len() {
            if !frame.valid[c] || !pred.valid[c] {
                continue;
            }
            let mut innov = pred.values[c] - frame.values[c];
            if c >= lh_start {
                innov = wrap_angle(innov);
            }
            if innov.abs() > self.cfg.gate * stds[c] {
                frame.valid[c] = false;
            }
        }
        frame
    }

    fn build_guess(&self, m: usize) -> Vec<DVector<f64>> {
        let mut guess: Vec<DVector<f64>> = Vec::with_capacity(m + 1);
        match &self.warm {
            Some(w) => {
                // When the window grew every old stage is kept; when it slid
                // the oldest drops. Either way the old terminal stage gains a
                // zero noise block and a fresh prediction is appended.
                let skip = if m > w.len() - 1 { 0 } else { 1 };
                for (i, src) in w.iter().enumerate().skip(skip) {
                    let dim = if i == w.len() - 1 { STAGE_DIM } else { src.len() };
                    let mut z = DVector::zeros(dim);
                    let keep = src.len().min(dim);
                    z.rows_mut(0, keep).copy_from(&src.rows(0, keep));
                    guess.push(z);
                }
            }
            None => {
                let mut z = DVector::zeros(STAGE_DIM);
                z.rows_mut(0, X_DIM)
                    .copy_from(self.history.front().expect("history non-empty"));
                guess.push(z);
            }
        }
        let (u, _) = self.buffer.back().expect("buffer non-empty");
        let last = guess.last().expect("at least one stage");
        let xl = VehicleState::from_vector(&Vector6::from_row_slice(&last.as_slice()[..X_DIM]));
        let xp = discrete_step(&xl, u, &Vector6::zeros(), &self.params.model, &self.drive, self.cfg.dt);
        guess.push(DVector::from_row_slice(xp.as_vector().as_slice()));
        debug_assert_eq!(guess.len(), m + 1);
        guess
    }

    fn build_problem(&self, m: usize, anchor: &Vector6<f64>) -> ShootingProblem {
        let mut dims = vec![STAGE_DIM; m];
        dims.push(X_DIM);
        let mut problem = ShootingProblem::new(&dims);
        let eta = self.cfg.discount;

        // anchor pull on the first window state
        let wa = eta.powi(m as i32);
        let wp: [f64; 6] = std::array::from_fn(|k| (wa * self.cfg.weight_prior[k]).sqrt());
        let a = *anchor;
        problem.add_residual(0, 6, move |z| {
            let mut val = DVector::zeros(6);
            let mut jac = DMatrix::zeros(6, STAGE_DIM);
            for k in 0..6 {
                val[k] = wp[k] * (z[k] - a[k]);
                jac[(k, k)] = wp[k];
            }
            TermEval::new(val, jac)
        });

        let stds = self.cfg.noise.channel_stds(self.params.stations.len());
        let lh_start = lh_range(0).start;
        for (i, (u, frame)) in self.buffer.iter().enumerate() {
            let disc = eta.powi((m - 1 - i) as i32);

            // process noise penalty
            let wq: [f64; 6] = std::array::from_fn(|k| (disc * self.cfg.weight_process[k]).sqrt());
            problem.add_residual(i, 6, move |z| {
                let mut val = DVector::zeros(6);
                let mut jac = DMatrix::zeros(6, STAGE_DIM);
                for k in 0..6 {
                    val[k] = wq[k] * z[X_DIM + k];
                    jac[(k, X_DIM + k)] = wq[k];
                }
                TermEval::new(val, jac)
            });

            // output residuals on channels valid in the frame; the row set is
            // fixed at build time, channels the model cannot produce at the
            // current iterate contribute nothing for that iterate
            let rows: Vec<usize> = (0..frame.values.len()).filter(|&c| frame.valid[c]).collect();
            if !rows.is_empty() {
                let nrows = rows.len();
                let sq = disc.sqrt();
                let scale: Vec<f64> = rows.iter().map(|&c| sq / stds[c]).collect();
                let meas: Vec<f64> = rows.iter().map(|&c| frame.values[c]).collect();
                let uk = *u;
                let params = self.params.clone();
                let drive = self.drive;
                problem.add_residual(i, nrows, move |z| {
                    let x = VehicleState::from_vector(&Vector6::from_row_slice(&z[..X_DIM]));
                    let pred = full_measurement(0.0, &x, &uk, None, &params, &drive);
                    let jacs = measurement_jacobians(&x, &uk, &params, &drive);
                    let mut val = DVector::zeros(nrows);
                    let mut jac = DMatrix::zeros(nrows, STAGE_DIM);
                    for (r, &c) in rows.iter().enumerate() {
                        if !pred.valid[c] {
                            continue;
                        }
                        let mut innov = pred.values[c] - meas[r];
                        if c >= lh_start {
                            innov = wrap_angle(innov);
                        }
                        val[r] = scale[r] * innov;
                        for k in 0..X_DIM {
                            jac[(r, k)] = scale[r] * jacs.wrt_state[(c, k)];
                        }
                    }
                    TermEval::new(val, jac)
                });
            }

            // one dynamics step ties neighbouring stages together
            let uk = *u;
            let model = self.params.model;
            let drive = self.drive;
            let dt = self.cfg.dt;
            let next_dim = if i + 1 == m { X_DIM } else { STAGE_DIM };
            problem.add_pair_constraint(i, 6, move |z, zn| {
                let x = VehicleState::from_vector(&Vector6::from_row_slice(&z[..X_DIM]));
                let w = Vector6::from_row_slice(&z[X_DIM..STAGE_DIM]);
                let xn = discrete_step(&x, &uk, &w, &model, &drive, dt).as_vector();
                let jd = dynamics_jacobians(&x, &uk, &model, &drive, dt);
                let mut val = DVector::zeros(6);
                let mut jac = DMatrix::zeros(6, STAGE_DIM);
                let mut jn = DMatrix::zeros(6, next_dim);
                for r in 0..6 {
                    val[r] = zn[r] - xn[r];
                    for c in 0..6 {
                        jac[(r, c)] = -jd.wrt_state[(r, c)];
                    }
                    jac[(r, X_DIM + r)] = -1.0;
                    jn[(r, r)] = 1.0;
                }
                TermEval::pair(val, jac, jn)
            });

            for k in 0..6 {
                let b = self.cfg.process_bound[k];
                if b.is_finite() {
                    problem.set_bounds(i, X_DIM + k, -b, b);
                }
            }
        }
        problem
    }
}
