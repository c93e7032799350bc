//! Offline model identification from logged input/output data.
//!
//! The identifier solves one trajectory optimization over the whole log:
//! decision variables are the state at every sample and the free model
//! parameters, tied together by the discrete dynamics. Parameters are lifted
//! into every stage with equality links between neighbours so the problem
//! keeps the banded structure the solver expects, and each free parameter is
//! scaled by its prior so a step of one means the same relative change for a
//! quantity of 1e-4 and one of 4.
//!
//! Measurement noise enters the output map additively and is eliminated in
//! closed form into weighted output residuals. Process noise is eliminated
//! the same way while its box is unbounded (the default); a finite box turns
//! it into explicit per-stage variables.

use nalgebra::{DMatrix, DVector, Vector6};

use crate::dynamics::{
    discrete_step, dynamics_jacobians, ControlInput, DriveConfig, ModelParams, VehicleState,
    N_MODEL_PARAMS,
};
use crate::estimation::{Ekf, EkfConfig};
use crate::math::wrap_angle;
use crate::nlp::{ShootingProblem, SqpOptions, TermEval};
use crate::sensors::{
    full_measurement, lh_range, measurement_jacobians, MeasurementFrame, NoiseLevels, ParamSet,
};

/// Uniformly sampled input/output log.
///
/// `steps[j]` holds the input applied over period `j` and the measurement
/// frame taken at the period's start.
#[derive(Clone, Debug)]
pub struct Dataset {
    dt: f64,
    steps: Vec<(ControlInput, MeasurementFrame)>,
}

#[derive(Debug, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset needs at least two samples, got {0}")]
    TooShort(usize),
    #[error("sample period must be positive, got {0}")]
    BadPeriod(f64),
    #[error("timestamps not uniform at index {index}: expected {expected}, got {got}")]
    NonUniform { index: usize, expected: f64, got: f64 },
    #[error("frame at index {0} has a different channel count")]
    MixedChannels(usize),
}

impl Dataset {
    /// Validates uniform spacing (tolerance 1e-6 s) and consistent channel
    /// layout.
    pub fn new(dt: f64, steps: Vec<(ControlInput, MeasurementFrame)>) -> Result<Self, DatasetError> {
        if !(dt > 0.0) {
            return Err(DatasetError::BadPeriod(dt));
        }
        if steps.len() < 2 {
            return Err(DatasetError::TooShort(steps.len()));
        }
        let t0 = steps[0].1.t;
        let n = steps[0].1.values.len();
        for (j, (_, frame)) in steps.iter().enumerate() {
            let expected = t0 + j as f64 * dt;
            if (frame.t - expected).abs() > 1e-6 {
                return Err(DatasetError::NonUniform {
                    index: j,
                    expected,
                    got: frame.t,
                });
            }
            if frame.values.len() != n {
                return Err(DatasetError::MixedChannels(j));
            }
        }
        Ok(Dataset { dt, steps })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[(ControlInput, MeasurementFrame)] {
        &self.steps
    }

    pub fn input(&self, j: usize) -> &ControlInput {
        &self.steps[j].0
    }

    pub fn frame(&self, j: usize) -> &MeasurementFrame {
        &self.steps[j].1
    }

    /// Sub-log starting at `start`, `len` samples long.
    pub fn slice(&self, start: usize, len: usize) -> Dataset {
        assert!(start + len <= self.steps.len());
        Dataset {
            dt: self.dt,
            steps: self.steps[start..start + len].to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum WarmStart {
    /// Run a filter pass with the prior parameters first (default).
    PriorFilter,
    /// Use caller-provided states aligned with the dataset.
    Provided(Vec<VehicleState>),
    /// Initialize every stage from the prior state.
    Cold,
}

#[derive(Clone, Debug)]
pub struct SysIdConfig {
    /// Prior parameter set; non-model entries are kept as-is.
    pub prior: ParamSet,
    /// Prior for the first state.
    pub prior_state: VehicleState,
    /// Which of the 15 model parameters to identify; the rest stay pinned to
    /// the prior.
    pub free: [bool; N_MODEL_PARAMS],
    /// Half-width of the parameter box, relative to the prior.
    pub bound_frac: f64,
    /// Weight on relative parameter deviation from the prior.
    pub weight_param: [f64; N_MODEL_PARAMS],
    /// Weight on the first-state deviation from `prior_state`.
    pub weight_state: [f64; 6],
    /// Process-noise weight (inverse covariance diagonal).
    pub weight_process: [f64; 6],
    /// Per-channel noise levels; output residual weights are the inverse
    /// variances.
    pub noise: NoiseLevels,
    /// Box on each process-noise component; any finite entry makes the noise
    /// an explicit decision variable.
    pub process_bound: [f64; 6],
    /// Box on each state component across the whole log.
    pub state_bound: [(f64, f64); 6],
    pub warm_start: WarmStart,
    pub max_iter: usize,
    pub tol_stat: f64,
    pub tol_feas: f64,
}

impl Default for SysIdConfig {
    fn default() -> Self {
        // tire, inertia, friction and motor terms are identified; mass and
        // geometry are measured on the bench, so they stay pinned
        let mut free = [true; N_MODEL_PARAMS];
        for name in ["mass", "lf", "lr"] {
            free[param_index(name)] = false;
        }
        SysIdConfig {
            prior: ParamSet::default(),
            prior_state: VehicleState::default(),
            free,
            bound_frac: 0.5,
            weight_param: [1.0; N_MODEL_PARAMS],
            weight_state: [1e2; 6],
            weight_process: [1e6, 1e6, 1e5, 1e4, 1e4, 1e3],
            noise: NoiseLevels::default(),
            process_bound: [f64::INFINITY; 6],
            state_bound: [(f64::NEG_INFINITY, f64::INFINITY); 6],
            warm_start: WarmStart::PriorFilter,
            max_iter: 60,
            tol_stat: 1e-6,
            tol_feas: 1e-8,
        }
    }
}

/// Index of a model parameter by name in the flattening order.
pub fn param_index(name: &str) -> usize {
    ModelParams::names()
        .iter()
        .position(|n| *n == name)
        .unwrap_or_else(|| panic!("unknown model parameter {name}"))
}

#[derive(Clone, Debug)]
pub struct SysIdResult {
    /// Identified parameter set (model entries updated, rest from the prior).
    pub params: ParamSet,
    /// Smoothed state trajectory, one per sample.
    pub states: Vec<VehicleState>,
    /// Process noise per transition, reconstructed from the dynamics defect.
    pub process_noise: Vec<Vector6<f64>>,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    pub stationarity: f64,
    /// Worst equality-constraint violation of the returned solution.
    pub defect: f64,
}

struct Layout {
    /// Indices of the free model parameters.
    free: Vec<usize>,
    /// Per-parameter scale (the prior value, or 1 where the prior is 0).
    scale: Vec<f64>,
    /// Explicit process-noise variables present.
    lifted: bool,
    stage_dim: usize,
}

impl Layout {
    fn from_config(cfg: &SysIdConfig) -> Self {
        let free: Vec<usize> = (0..N_MODEL_PARAMS).filter(|&i| cfg.free[i]).collect();
        let prior = cfg.prior.model.to_array();
        let scale: Vec<f64> = free
            .iter()
            .map(|&i| if prior[i].abs() > 1e-9 { prior[i] } else { 1.0 })
            .collect();
        let lifted = cfg.process_bound.iter().any(|b| b.is_finite());
        let stage_dim = 6 + if lifted { 6 } else { 0 } + free.len();
        Layout {
            free,
            scale,
            lifted,
            stage_dim,
        }
    }

    fn theta_off(&self) -> usize {
        if self.lifted {
            12
        } else {
            6
        }
    }

    /// Assembles full model parameters from a stage's scaled block.
    fn model_from_stage(&self, z: &[f64], prior: &ModelParams) -> ModelParams {
        let mut a = prior.to_array();
        for (k, &i) in self.free.iter().enumerate() {
            a[i] = z[self.theta_off() + k] * self.scale[k];
        }
        ModelParams::from_array(&a)
    }
}

/// Identifies the free model parameters from a logged run.
pub fn identify(data: &Dataset, cfg: &SysIdConfig, drive: &DriveConfig) -> SysIdResult {
    let layout = Layout::from_config(cfg);
    let l = data.len();
    let problem = build_problem(data, cfg, drive, &layout);
    let guess = build_guess(data, cfg, drive, &layout);
    let opts = SqpOptions {
        max_iter: cfg.max_iter,
        tol_stat: cfg.tol_stat,
        tol_feas: cfg.tol_feas,
        reg: 1e-8,
        ..Default::default()
    };
    let report = problem.solve(&guess, &opts);

    let states: Vec<VehicleState> = report
        .stages
        .iter()
        .map(|z| VehicleState::from_vector(&Vector6::from_row_slice(&z.as_slice()[..6])))
        .collect();
    let model = layout.model_from_stage(report.stages[0].as_slice(), &cfg.prior.model);
    let params = ParamSet {
        model,
        ..cfg.prior.clone()
    };
    let mut process_noise = Vec::with_capacity(l - 1);
    for j in 0..l - 1 {
        let roll = discrete_step(&states[j], data.input(j), &Vector6::zeros(), &model, drive, data.dt());
        process_noise.push(states[j + 1].as_vector() - roll.as_vector());
    }

    SysIdResult {
        params,
        states,
        process_noise,
        cost: report.cost,
        converged: report.status.is_converged(),
        iterations: report.iterations,
        stationarity: report.stationarity,
        defect: report.constraint_violation,
    }
}

fn build_guess(
    data: &Dataset,
    cfg: &SysIdConfig,
    drive: &DriveConfig,
    layout: &Layout,
) -> Vec<DVector<f64>> {
    let l = data.len();
    let states: Vec<VehicleState> = match &cfg.warm_start {
        WarmStart::Provided(s) => {
            assert_eq!(s.len(), l, "provided warm start must match the dataset");
            s.clone()
        }
        WarmStart::Cold => vec![cfg.prior_state; l],
        WarmStart::PriorFilter => {
            let ekf_cfg = EkfConfig {
                noise: cfg.noise,
                dt: data.dt(),
                ..Default::default()
            };
            let mut ekf = Ekf::new(ekf_cfg, cfg.prior.clone(), *drive, &cfg.prior_state);
            let mut out = Vec::with_capacity(l);
            for (u, frame) in data.steps() {
                ekf.correct(u, frame);
                out.push(ekf.state());
                ekf.predict(u);
            }
            out
        }
    };
    states
        .iter()
        .map(|x| {
            let mut z = DVector::zeros(layout.stage_dim);
            z.rows_mut(0, 6).copy_from(&x.as_vector());
            for k in 0..layout.free.len() {
                // scaled parameters start at the prior, which is exactly 1
                z[layout.theta_off() + k] = 1.0;
            }
            z
        })
        .collect()
}

fn build_problem(
    data: &Dataset,
    cfg: &SysIdConfig,
    drive: &DriveConfig,
    layout: &Layout,
) -> ShootingProblem {
    let l = data.len();
    let nf = layout.free.len();
    let toff = layout.theta_off();
    let dims = vec![layout.stage_dim; l];
    let mut problem = ShootingProblem::new(&dims);

    // prior pull on the first state and on the parameters
    {
        let wx: [f64; 6] = std::array::from_fn(|k| cfg.weight_state[k].sqrt());
        let wt: Vec<f64> = layout.free.iter().map(|&i| cfg.weight_param[i].sqrt()).collect();
        let x0 = cfg.prior_state.as_vector();
        let stage_dim = layout.stage_dim;
        problem.add_residual(0, 6 + nf, move |z| {
            let mut val = DVector::zeros(6 + wt.len());
            let mut jac = DMatrix::zeros(6 + wt.len(), stage_dim);
            for k in 0..6 {
                val[k] = wx[k] * (z[k] - x0[k]);
                jac[(k, k)] = wx[k];
            }
            for (k, w) in wt.iter().enumerate() {
                val[6 + k] = w * (z[toff + k] - 1.0);
                jac[(6 + k, toff + k)] = *w;
            }
            TermEval::new(val, jac)
        });
    }

    let stds = cfg.noise.channel_stds(cfg.prior.stations.len());
    let lh_start = lh_range(0).start;
    let dt = data.dt();
    let prior = cfg.prior.clone();
    for j in 0..l {
        // output residuals on valid channels
        let frame = data.frame(j);
        let rows: Vec<usize> = (0..frame.values.len()).filter(|&c| frame.valid[c]).collect();
        if !rows.is_empty() {
            let nrows = rows.len();
            let scale: Vec<f64> = rows.iter().map(|&c| 1.0 / stds[c]).collect();
            let meas: Vec<f64> = rows.iter().map(|&c| frame.values[c]).collect();
            let u = *data.input(j);
            let p = prior.clone();
            let lay = LayoutView::snapshot(layout);
            let d = *drive;
            let stage_dim = layout.stage_dim;
            problem.add_residual(j, nrows, move |z| {
                let x = VehicleState::from_vector(&Vector6::from_row_slice(&z[..6]));
                let params = ParamSet {
                    model: lay.model_from_stage(z, &p.model),
                    ..p.clone()
                };
                let pred = full_measurement(0.0, &x, &u, None, &params, &d);
                let jacs = measurement_jacobians(&x, &u, &params, &d);
                let mut val = DVector::zeros(nrows);
                let mut jac = DMatrix::zeros(nrows, stage_dim);
                for (r, &c) in rows.iter().enumerate() {
                    if !pred.valid[c] {
                        continue;
                    }
                    let mut innov = pred.values[c] - meas[r];
                    if c >= lh_start {
                        innov = wrap_angle(innov);
                    }
                    val[r] = scale[r] * innov;
                    for k in 0..6 {
                        jac[(r, k)] = scale[r] * jacs.wrt_state[(c, k)];
                    }
                    // model parameter columns come first in the flat order
                    for (k, &i) in lay.free.iter().enumerate() {
                        jac[(r, lay.theta_off + k)] =
                            scale[r] * jacs.wrt_params[(c, i)] * lay.scale[k];
                    }
                }
                TermEval::new(val, jac)
            });
        }

        // state box
        for k in 0..6 {
            let (lo, hi) = cfg.state_bound[k];
            if lo.is_finite() || hi.is_finite() {
                problem.set_bounds(j, k, lo, hi);
            }
        }

        if j + 1 == l {
            continue;
        }

        // dynamics link to the next stage: an equality constraint plus a
        // penalized noise variable when the noise box is finite, otherwise
        // the noise is eliminated into a weighted defect residual
        let u = *data.input(j);
        let prior_model = cfg.prior.model;
        let lay = LayoutView::snapshot(layout);
        let d = *drive;
        let stage_dim = layout.stage_dim;
        if layout.lifted {
            let wq: [f64; 6] = std::array::from_fn(|k| cfg.weight_process[k].sqrt());
            problem.add_residual(j, 6, move |z| {
                let mut val = DVector::zeros(6);
                let mut jac = DMatrix::zeros(6, stage_dim);
                for k in 0..6 {
                    val[k] = wq[k] * z[6 + k];
                    jac[(k, 6 + k)] = wq[k];
                }
                TermEval::new(val, jac)
            });
            problem.add_pair_constraint(j, 6, move |z, zn| {
                let x = VehicleState::from_vector(&Vector6::from_row_slice(&z[..6]));
                let w = Vector6::from_row_slice(&z[6..12]);
                let model = lay.model_from_stage(z, &prior_model);
                let xn = discrete_step(&x, &u, &w, &model, &d, dt).as_vector();
                let jd = dynamics_jacobians(&x, &u, &model, &d, dt);
                let mut val = DVector::zeros(6);
                let mut jac = DMatrix::zeros(6, stage_dim);
                let mut jn = DMatrix::zeros(6, stage_dim);
                for r in 0..6 {
                    val[r] = zn[r] - xn[r];
                    for c in 0..6 {
                        jac[(r, c)] = -jd.wrt_state[(r, c)];
                    }
                    jac[(r, 6 + r)] = -1.0;
                    for (k, &i) in lay.free.iter().enumerate() {
                        jac[(r, lay.theta_off + k)] = -jd.wrt_params[(r, i)] * lay.scale[k];
                    }
                    jn[(r, r)] = 1.0;
                }
                TermEval::pair(val, jac, jn)
            });
            for k in 0..6 {
                let b = cfg.process_bound[k];
                if b.is_finite() {
                    problem.set_bounds(j, 6 + k, -b, b);
                }
            }
        } else {
            let wq: [f64; 6] = std::array::from_fn(|k| cfg.weight_process[k].sqrt());
            problem.add_pair_residual(j, 6, move |z, zn| {
                let x = VehicleState::from_vector(&Vector6::from_row_slice(&z[..6]));
                let model = lay.model_from_stage(z, &prior_model);
                let xn = discrete_step(&x, &u, &Vector6::zeros(), &model, &d, dt).as_vector();
                let jd = dynamics_jacobians(&x, &u, &model, &d, dt);
                let mut val = DVector::zeros(6);
                let mut jac = DMatrix::zeros(6, stage_dim);
                let mut jn = DMatrix::zeros(6, stage_dim);
                for r in 0..6 {
                    val[r] = wq[r] * (zn[r] - xn[r]);
                    for c in 0..6 {
                        jac[(r, c)] = -wq[r] * jd.wrt_state[(r, c)];
                    }
                    for (k, &i) in lay.free.iter().enumerate() {
                        jac[(r, lay.theta_off + k)] = -wq[r] * jd.wrt_params[(r, i)] * lay.scale[k];
                    }
                    jn[(r, r)] = wq[r];
                }
                TermEval::pair(val, jac, jn)
            });
        }

        // parameters are one shared block: link neighbouring copies
        problem.add_pair_constraint(j, nf, move |z, zn| {
            let mut val = DVector::zeros(nf);
            let mut jac = DMatrix::zeros(nf, stage_dim);
            let mut jnx = DMatrix::zeros(nf, stage_dim);
            for k in 0..nf {
                val[k] = zn[toff + k] - z[toff + k];
                jac[(k, toff + k)] = -1.0;
                jnx[(k, toff + k)] = 1.0;
            }
            TermEval::pair(val, jac, jnx)
        });
    }

    // parameter box, relative to the prior
    for j in 0..l {
        for k in 0..nf {
            let lo = 1.0 - cfg.bound_frac;
            let hi = 1.0 + cfg.bound_frac;
            problem.set_bounds(j, toff + k, lo, hi);
        }
    }
    problem
}

/// Copyable view of the layout for use inside term closures.
#[derive(Clone)]
struct LayoutView {
    free: Vec<usize>,
    scale: Vec<f64>,
    theta_off: usize,
}

impl LayoutView {
    fn snapshot(layout: &Layout) -> Self {
        LayoutView {
            free: layout.free.clone(),
            scale: layout.scale.clone(),
            theta_off: layout.theta_off(),
        }
    }

    fn model_from_stage(&self, z: &[f64], prior: &ModelParams) -> ModelParams {
        let mut a = prior.to_array();
        for (k, &i) in self.free.iter().enumerate() {
            a[i] = z[self.theta_off + k] * self.scale[k];
        }
        ModelParams::from_array(&a)
    }
}

/// Rolls the model open loop from a reference state using logged inputs.
///
/// Returns `horizon + 1` states starting at `reference[start]`; inputs come
/// from the dataset, process noise is zero.
pub fn open_loop_predict(
    params: &ParamSet,
    drive: &DriveConfig,
    data: &Dataset,
    reference: &[VehicleState],
    horizon: usize,
    start: usize,
) -> Vec<VehicleState> {
    assert_eq!(reference.len(), data.len());
    assert!(start + horizon <= data.len() - 1, "horizon exceeds the log");
    let mut out = Vec::with_capacity(horizon + 1);
    let mut x = reference[start];
    out.push(x);
    for k in 0..horizon {
        x = discrete_step(&x, data.input(start + k), &Vector6::zeros(), &params.model, drive, data.dt());
        out.push(x);
    }
    out
}

/// Open-loop predictions from every admissible start index.
pub fn open_loop_sweep(
    params: &ParamSet,
    drive: &DriveConfig,
    data: &Dataset,
    reference: &[VehicleState],
    horizon: usize,
) -> Vec<(usize, Vec<VehicleState>)> {
    (0..data.len() - horizon)
        .map(|j| (j, open_loop_predict(params, drive, data, reference, horizon, j)))
        .collect()
}

/// Root mean square planar position error of predicted trajectories against
/// a reference, pooled over all prediction steps and start indices.
pub fn prediction_rmse(
    predictions: &[(usize, Vec<VehicleState>)],
    reference: &[VehicleState],
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (start, traj) in predictions {
        for (k, pred) in traj.iter().enumerate().skip(1) {
            let truth = &reference[start + k];
            let dx = pred.x - truth.x;
            let dy = pred.y - truth.y;
            sum += dx * dx + dy * dy;
            count += 1;
        }
    }
    if count == 0 {
        return 0.0;
    }
    (sum / count as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn drive() -> DriveConfig {
        DriveConfig::default()
    }

    /// Simulates a weaving run and packages it as a dataset; returns the
    /// ground-truth states alongside.
    fn make_dataset(
        truth: &ParamSet,
        x0: &VehicleState,
        len: usize,
        dt: f64,
        meas_scale: f64,
        seed: u64,
    ) -> (Dataset, Vec<VehicleState>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stds = NoiseLevels::default().channel_stds(truth.stations.len());
        let mut steps = Vec::with_capacity(len);
        let mut states = Vec::with_capacity(len);
        let mut x = *x0;
        // seed-dependent phase so different seeds drive different trajectories
        let phase = seed as f64 * 0.7;
        for j in 0..len {
            let t = j as f64 * dt;
            let u = ControlInput::new(
                0.2 * (1.3 * t + phase).sin() + 0.1 * (0.4 * t).cos(),
                0.3 + 0.1 * (0.7 * t + phase).sin(),
            );
            let noise: DVector<f64> = DVector::from_iterator(
                stds.len(),
                stds.iter().map(|s| meas_scale * s * rng.gen_range(-1.0..1.0)),
            );
            let frame = full_measurement(t, &x, &u, Some(&noise), truth, &drive());
            steps.push((u, frame));
            states.push(x);
            x = discrete_step(&x, &u, &Vector6::zeros(), &truth.model, &drive(), dt);
        }
        (Dataset::new(dt, steps).unwrap(), states)
    }

    fn only_free(names: &[&str]) -> [bool; N_MODEL_PARAMS] {
        let mut free = [false; N_MODEL_PARAMS];
        for n in names {
            free[param_index(n)] = true;
        }
        free
    }

    #[test]
    fn dataset_validation_catches_bad_input() {
        let truth = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.5,
            ..Default::default()
        };
        let (data, _) = make_dataset(&truth, &x0, 5, 0.01, 0.0, 1);
        assert_eq!(data.len(), 5);

        let mut steps = data.steps().to_vec();
        steps[3].1.t += 1e-3;
        assert!(matches!(
            Dataset::new(0.01, steps),
            Err(DatasetError::NonUniform { index: 3, .. })
        ));
        assert!(matches!(
            Dataset::new(0.01, data.steps()[..1].to_vec()),
            Err(DatasetError::TooShort(1))
        ));
        assert!(matches!(
            Dataset::new(-0.1, data.steps().to_vec()),
            Err(DatasetError::BadPeriod(_))
        ));
    }

    #[test]
    fn truth_prior_on_clean_data_is_a_fixed_point() {
        let truth = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.6,
            ..Default::default()
        };
        let (data, _) = make_dataset(&truth, &x0, 100, 1.0 / 60.0, 0.0, 2);
        let cfg = SysIdConfig {
            prior: truth.clone(),
            prior_state: x0,
            ..Default::default()
        };
        let result = identify(&data, &cfg, &drive());
        assert!(result.converged);
        assert!(result.cost <= 1e-10, "cost {}", result.cost);
        let got = result.params.model.to_array();
        let want = truth.model.to_array();
        for k in 0..N_MODEL_PARAMS {
            assert!(
                (got[k] - want[k]).abs() <= 1e-9 * want[k].abs().max(1.0),
                "param {k}: {} vs {}",
                got[k],
                want[k]
            );
        }
    }

    #[test]
    fn recovers_perturbed_tire_and_motor_params() {
        let truth = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.6,
            ..Default::default()
        };
        let (data, _) = make_dataset(&truth, &x0, 600, 1.0 / 60.0, 0.3, 3);

        let mut prior = truth.clone();
        prior.model.d_front *= 1.3;
        prior.model.d_rear *= 0.7;
        prior.model.cm1 *= 1.3;
        let cfg = SysIdConfig {
            prior: prior.clone(),
            prior_state: x0,
            free: only_free(&["d_front", "d_rear", "cm1"]),
            ..Default::default()
        };
        let result = identify(&data, &cfg, &drive());
        assert!(result.converged, "stat {}", result.stationarity);
        for name in ["d_front", "d_rear", "cm1"] {
            let i = param_index(name);
            let got = result.params.model.to_array()[i];
            let want = truth.model.to_array()[i];
            let rel = (got - want).abs() / want.abs();
            assert!(rel <= 0.05, "{name}: {got} vs {want} (rel {rel:.4})");
        }
    }

    #[test]
    fn pinned_parameters_are_returned_bit_identical() {
        let truth = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.5,
            ..Default::default()
        };
        let (data, _) = make_dataset(&truth, &x0, 80, 1.0 / 60.0, 0.2, 4);
        let mut prior = truth.clone();
        prior.model.d_rear *= 1.17;
        prior.model.cd1 = 0.0123456789012345;
        let cfg = SysIdConfig {
            prior: prior.clone(),
            prior_state: x0,
            free: only_free(&["d_front"]),
            ..Default::default()
        };
        let result = identify(&data, &cfg, &drive());
        let got = result.params.model.to_array();
        let want = prior.model.to_array();
        for k in 0..N_MODEL_PARAMS {
            if k == param_index("d_front") {
                continue;
            }
            assert_eq!(got[k].to_bits(), want[k].to_bits(), "param {k} drifted");
        }
    }

    #[test]
    fn finite_noise_box_lifts_variables_and_binds() {
        let truth = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.5,
            ..Default::default()
        };
        let (data, _) = make_dataset(&truth, &x0, 40, 1.0 / 60.0, 0.2, 5);
        let cfg = SysIdConfig {
            prior: truth.clone(),
            prior_state: x0,
            free: only_free(&["d_front"]),
            process_bound: [1e-4; 6],
            ..Default::default()
        };
        let result = identify(&data, &cfg, &drive());
        assert!(result.defect <= 1e-6, "defect {}", result.defect);
        for w in &result.process_noise {
            for k in 0..6 {
                assert!(w[k].abs() <= 1e-4 + 1e-8, "noise escaped its box: {}", w[k]);
            }
        }
    }

    #[test]
    fn reported_cost_matches_recomputed_objective() {
        let truth = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.6,
            ..Default::default()
        };
        let (data, _) = make_dataset(&truth, &x0, 120, 1.0 / 60.0, 0.4, 6);
        let mut prior = truth.clone();
        prior.model.d_front *= 1.2;
        let cfg = SysIdConfig {
            prior: prior.clone(),
            prior_state: x0,
            free: only_free(&["d_front", "d_rear"]),
            ..Default::default()
        };
        let result = identify(&data, &cfg, &drive());

        let stds = cfg.noise.channel_stds(truth.stations.len());
        let lh_start = lh_range(0).start;
        let mut v = 0.0;
        // parameter prior on relative deviation
        let got = result.params.model.to_array();
        let pri = prior.model.to_array();
        for name in ["d_front", "d_rear"] {
            let i = param_index(name);
            v += cfg.weight_param[i] * (got[i] / pri[i] - 1.0).powi(2);
        }
        // first-state prior
        let dx0 = result.states[0].as_vector() - x0.as_vector();
        for k in 0..6 {
            v += cfg.weight_state[k] * dx0[k] * dx0[k];
        }
        // process and measurement noise terms
        for w in &result.process_noise {
            for k in 0..6 {
                v += cfg.weight_process[k] * w[k] * w[k];
            }
        }
        for j in 0..data.len() {
            let frame = data.frame(j);
            let pred = full_measurement(0.0, &result.states[j], data.input(j), None, &result.params, &drive());
            for c in 0..frame.values.len() {
                if !frame.valid[c] || !pred.valid[c] {
                    continue;
                }
                let mut innov = pred.values[c] - frame.values[c];
                if c >= lh_start {
                    innov = wrap_angle(innov);
                }
                v += innov * innov / (stds[c] * stds[c]);
            }
        }
        let rel = (2.0 * result.cost - v).abs() / v.max(1.0);
        assert!(rel <= 1e-9, "cost decomposition off by {rel}");
    }

    #[test]
    fn more_data_does_not_hurt_recovery() {
        let truth = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.6,
            ..Default::default()
        };
        let run = |len: usize, seed: u64| -> f64 {
            let (data, _) = make_dataset(&truth, &x0, len, 1.0 / 60.0, 0.5, seed);
            let mut prior = truth.clone();
            prior.model.d_front *= 1.25;
            prior.model.d_rear *= 0.8;
            prior.model.cm1 *= 1.2;
            let cfg = SysIdConfig {
                prior,
                prior_state: x0,
                free: only_free(&["d_front", "d_rear", "cm1"]),
                ..Default::default()
            };
            let result = identify(&data, &cfg, &drive());
            let got = result.params.model.to_array();
            let want = truth.model.to_array();
            ["d_front", "d_rear", "cm1"]
                .iter()
                .map(|n| {
                    let i = param_index(n);
                    ((got[i] - want[i]) / want[i]).abs()
                })
                .fold(0.0, f64::max)
        };
        let mut short_errs: Vec<f64> = (0..10).map(|s| run(500, 100 + s)).collect();
        let mut long_errs: Vec<f64> = (0..10).map(|s| run(2000, 100 + s)).collect();
        short_errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        long_errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med_short = 0.5 * (short_errs[4] + short_errs[5]);
        let med_long = 0.5 * (long_errs[4] + long_errs[5]);
        assert!(
            med_long <= med_short,
            "more data hurt: {med_long} vs {med_short}"
        );
    }

    #[test]
    fn open_loop_predict_zero_horizon_returns_start() {
        let truth = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.5,
            ..Default::default()
        };
        let (data, states) = make_dataset(&truth, &x0, 10, 1.0 / 60.0, 0.0, 7);
        let pred = open_loop_predict(&truth, &drive(), &data, &states, 0, 4);
        assert_eq!(pred.len(), 1);
        assert_eq!(pred[0].as_vector(), states[4].as_vector());
    }

    #[test]
    fn open_loop_predict_with_truth_model_matches_log() {
        let truth = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.5,
            ..Default::default()
        };
        let (data, states) = make_dataset(&truth, &x0, 30, 1.0 / 60.0, 0.0, 8);
        let pred = open_loop_predict(&truth, &drive(), &data, &states, 20, 3);
        for (k, p) in pred.iter().enumerate() {
            let err = (p.as_vector() - states[3 + k].as_vector()).norm();
            assert!(err <= 1e-9, "step {k}: {err}");
        }
    }

    #[test]
    fn prediction_rmse_constant_offset() {
        let mk = |x: f64| VehicleState {
            x,
            ..Default::default()
        };
        let reference: Vec<VehicleState> = (0..5).map(|k| mk(k as f64)).collect();
        let shifted: Vec<VehicleState> = (0..5).map(|k| mk(k as f64 + 0.1)).collect();
        let preds = vec![(0usize, shifted)];
        let rmse = prediction_rmse(&preds, &reference);
        assert!((rmse - 0.1).abs() <= 1e-12);
        let exact = vec![(0usize, reference.clone())];
        assert_eq!(prediction_rmse(&exact, &reference), 0.0);
    }

    #[test]
    fn prediction_rmse_hand_case() {
        let mk = |x: f64, y: f64| VehicleState {
            x,
            y,
            ..Default::default()
        };
        let reference = vec![mk(0.0, 0.0), mk(1.0, 0.0), mk(2.0, 0.0)];
        // one two-step prediction with planar errors (0.3, 0.4) and (0, 0.5)
        let traj = vec![mk(0.0, 0.0), mk(1.3, 0.4), mk(2.0, 0.5)];
        let rmse = prediction_rmse(&[(0, traj)], &reference);
        let expect = ((0.25 + 0.25) / 2.0_f64).sqrt();
        assert!((rmse - expect).abs() <= 1e-12, "got {rmse}");
    }

    #[test]
    fn identified_model_halves_open_loop_error() {
        let truth = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.6,
            ..Default::default()
        };
        let dt = 1.0 / 60.0;
        let (train, _) = make_dataset(&truth, &x0, 600, dt, 0.3, 9);
        let (holdout, holdout_truth) = make_dataset(&truth, &x0, 180, dt, 0.3, 10);

        let mut prior = truth.clone();
        prior.model.d_front *= 1.3;
        prior.model.d_rear *= 0.7;
        prior.model.cm1 *= 1.3;
        let cfg = SysIdConfig {
            prior: prior.clone(),
            prior_state: x0,
            free: only_free(&["d_front", "d_rear", "cm1"]),
            ..Default::default()
        };
        let result = identify(&train, &cfg, &drive());
        assert!(result.converged);

        // two-second open-loop predictions from ground-truth starts
        let horizon = (2.0 / dt) as usize;
        let before = prediction_rmse(
            &open_loop_sweep(&prior, &drive(), &holdout, &holdout_truth, horizon),
            &holdout_truth,
        );
        let after = prediction_rmse(
            &open_loop_sweep(&result.params, &drive(), &holdout, &holdout_truth, horizon),
            &holdout_truth,
        );
        assert!(
            after <= 0.5 * before,
            "open-loop RMSE only improved from {before} to {after}"
        );
    }
}
