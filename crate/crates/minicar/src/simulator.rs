//! Multi-rate closed-loop simulation with sensor dropout.
//!
//! Everything runs on one base time grid whose step divides every configured
//! sensor, estimator and controller period, so each component fires exactly
//! on its nominal instants and two runs with the same seed are bit-identical.
//! Within one base tick the order is: estimator (consuming the sensor data
//! collected since its previous call), controller, low-level controller,
//! sensor sampling, then ground-truth integration over the next base step.
//! Measurements therefore see the input that is active from the sample
//! instant onward, matching how the estimator pairs inputs with frames.
//!
//! Sensors firing between two estimator calls are collected into a single
//! stacked frame stamped at the window start; when several samples of the
//! same channel land in one window the earliest is kept. With sensor rates
//! that are integer multiples of the estimator rate this assignment is exact;
//! otherwise it introduces a sub-period time skew that the estimator's noise
//! weights absorb.
//!
//! Noise is zero-mean Gaussian, drawn from per-source counter streams of one
//! seeded generator, so changing one noise level never shifts the samples of
//! the other sources.

use std::collections::VecDeque;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{discrete_step, ControlInput, DriveConfig, VehicleState};
use crate::estimation::Mhe;
use crate::mpcc::MpccController;
use crate::sensors::{
    full_measurement, imu_range, lh_range, wheel_range, MeasurementFrame, NoiseLevels, ParamSet,
};
use crate::sysid::{Dataset, DatasetError};
use nalgebra::{DVector, Vector6};

/// Update rates of the moving parts [Hz]. Each period must be an integer
/// multiple of the base step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SimRates {
    pub imu: f64,
    pub encoders: f64,
    pub lighthouse: f64,
    pub estimator: f64,
    pub controller: f64,
    pub low_level: f64,
}

impl Default for SimRates {
    fn default() -> Self {
        SimRates {
            imu: 250.0,
            encoders: 250.0,
            lighthouse: 50.0,
            estimator: 60.0,
            controller: 30.0,
            low_level: 250.0,
        }
    }
}

/// Which sensor channels a dropout window silences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelGroup {
    Imu,
    Wheels,
    /// All lighthouse stations.
    Lighthouse,
    /// One lighthouse station by index.
    Station(usize),
}

impl ChannelGroup {
    /// Stacked-vector channel indices covered by this group.
    pub fn channels(&self, n_stations: usize) -> Vec<usize> {
        match *self {
            ChannelGroup::Imu => imu_range().collect(),
            ChannelGroup::Wheels => wheel_range().collect(),
            ChannelGroup::Lighthouse => (0..n_stations).flat_map(lh_range).collect(),
            ChannelGroup::Station(s) => {
                if s < n_stations {
                    lh_range(s).collect()
                } else {
                    vec![]
                }
            }
        }
    }
}

/// Half-open time interval `[start, end)` during which a channel group
/// reports no data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutWindow {
    pub start: f64,
    pub end: f64,
    pub group: ChannelGroup,
}

/// Marks the channels of every window covering `frame.t` invalid. Values are
/// left in place; consumers must honor the validity mask.
pub fn inject_dropout(frame: &mut MeasurementFrame, windows: &[DropoutWindow], n_stations: usize) {
    for w in windows {
        if frame.t >= w.start && frame.t < w.end {
            for c in w.group.channels(n_stations) {
                frame.valid[c] = false;
            }
        }
    }
}

/// Scenario description for one run.
#[derive(Clone, Debug)]
pub struct SimConfig {
    /// Ground-truth parameters; estimators and controllers receive their own,
    /// possibly different, copies.
    pub params: ParamSet,
    pub drive: DriveConfig,
    pub rates: SimRates,
    /// Measurement noise levels (standard deviations; zero for a clean run).
    pub noise: NoiseLevels,
    /// Continuous-time process noise densities per state; each base step adds
    /// `density * sqrt(base_dt)` times a standard normal draw.
    pub process_noise: [f64; 6],
    /// Added to the ground-truth rolling resistance only, for plant-model
    /// mismatch studies.
    pub extra_damping: f64,
    pub dropouts: Vec<DropoutWindow>,
    pub x0: VehicleState,
    pub duration: f64,
    /// Base grid step [s]. The default of 1/1500 s divides the default
    /// sensor, estimator and controller periods exactly.
    pub base_dt: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            params: ParamSet::default(),
            drive: DriveConfig::default(),
            rates: SimRates::default(),
            noise: NoiseLevels::default(),
            process_noise: [0.0; 6],
            extra_damping: 0.0,
            dropouts: vec![],
            x0: VehicleState::default(),
            duration: 5.0,
            base_dt: 1.0 / 1500.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum SimError {
    #[error("base step must be positive, got {0}")]
    BadBaseStep(f64),
    #[error("duration must cover at least one base step, got {0}")]
    BadDuration(f64),
    #[error("{name} period is not an integer multiple of the base step ({hz} Hz on a {base:.6} s grid)")]
    IncompatibleRate {
        name: &'static str,
        hz: f64,
        base: f64,
    },
    #[error("estimator is configured for a period of {got} s, simulation runs it every {expected} s")]
    EstimatorPeriod { expected: f64, got: f64 },
    #[error("controller is configured for a period of {got} s, simulation runs it every {expected} s")]
    ControllerPeriod { expected: f64, got: f64 },
}

/// Base-step counts between firings of each component.
#[derive(Clone, Copy, Debug)]
struct Intervals {
    imu: usize,
    enc: usize,
    lh: usize,
    est: usize,
    ctl: usize,
    ll: usize,
    n_base: usize,
}

fn rate_interval(name: &'static str, hz: f64, base_dt: f64) -> Result<usize, SimError> {
    let err = SimError::IncompatibleRate {
        name,
        hz,
        base: base_dt,
    };
    if !(hz > 0.0) {
        return Err(err);
    }
    let steps = 1.0 / (hz * base_dt);
    let k = steps.round();
    if k < 1.0 || (steps - k).abs() > 1e-9 {
        return Err(err);
    }
    Ok(k as usize)
}

impl SimConfig {
    fn intervals(&self) -> Result<Intervals, SimError> {
        if !(self.base_dt > 0.0) {
            return Err(SimError::BadBaseStep(self.base_dt));
        }
        let n = (self.duration / self.base_dt).round();
        if !(self.duration > 0.0) || n < 1.0 {
            return Err(SimError::BadDuration(self.duration));
        }
        Ok(Intervals {
            imu: rate_interval("imu", self.rates.imu, self.base_dt)?,
            enc: rate_interval("encoders", self.rates.encoders, self.base_dt)?,
            lh: rate_interval("lighthouse", self.rates.lighthouse, self.base_dt)?,
            est: rate_interval("estimator", self.rates.estimator, self.base_dt)?,
            ctl: rate_interval("controller", self.rates.controller, self.base_dt)?,
            ll: rate_interval("low_level", self.rates.low_level, self.base_dt)?,
            n_base: n as usize,
        })
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

/// Low-level controller tuning. The steering loop is a rate servo: its PID
/// output is a steering angular speed that is integrated onto the applied
/// angle, tracking the reference against a noisy angle measurement. The speed
/// loop outputs drive torque from the rear-axle encoder speed. With the
/// default gains a 1 m/s speed step from rest settles within 2 percent in
/// under 1.5 s.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LowLevelConfig {
    pub steer_pid: PidGains,
    pub speed_pid: PidGains,
    /// Anti-windup clamp on each loop's error integral.
    pub integrator_limit: f64,
    /// Standard deviation of the servo's own steering angle measurement.
    pub steer_meas_noise: f64,
    pub steer_limit: f64,
    pub torque_limit: f64,
}

impl Default for LowLevelConfig {
    fn default() -> Self {
        LowLevelConfig {
            steer_pid: PidGains {
                kp: 40.0,
                ki: 0.0,
                kd: 0.0,
            },
            speed_pid: PidGains {
                kp: 1.5,
                ki: 3.0,
                kd: 0.0,
            },
            integrator_limit: 0.4,
            steer_meas_noise: 0.002,
            steer_limit: 0.35,
            torque_limit: 1.0,
        }
    }
}

/// Setpoint consumed by the low-level layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LowLevelCommand {
    /// Steering angle and drive torque passed through directly, subject to
    /// the actuator boxes.
    Direct { steer: f64, torque: f64 },
    /// Steering angle tracked by the servo loop plus a longitudinal speed
    /// target tracked by the torque loop.
    Speed { steer: f64, speed: f64 },
}

/// Sensor data available to the low-level loops.
#[derive(Clone, Copy, Debug)]
pub struct LowLevelFeedback {
    /// Servo-side measurement of the applied steering angle.
    pub measured_steer: f64,
    /// Latest rear wheel angular speeds [rad/s].
    pub wheel_rear_left: f64,
    pub wheel_rear_right: f64,
}

/// Integrators and memory of the low-level loops.
#[derive(Clone, Copy, Debug, Default)]
pub struct LowLevelState {
    pub applied: ControlInput,
    steer_integral: f64,
    speed_integral: f64,
    prev_steer_err: f64,
    prev_speed_err: f64,
    primed: bool,
}

fn pid(gains: &PidGains, err: f64, integral: &mut f64, prev: &mut f64, limit: f64, dt: f64) -> f64 {
    *integral = (*integral + err * dt).clamp(-limit, limit);
    let deriv = (err - *prev) / dt;
    *prev = err;
    gains.kp * err + gains.ki * *integral + gains.kd * deriv
}

/// One low-level update. Returns the input applied until the next update.
pub fn low_level_step(
    state: &mut LowLevelState,
    cmd: &LowLevelCommand,
    fb: &LowLevelFeedback,
    wheel_radius: f64,
    cfg: &LowLevelConfig,
    dt: f64,
) -> ControlInput {
    match *cmd {
        LowLevelCommand::Direct { steer, torque } => {
            state.steer_integral = 0.0;
            state.speed_integral = 0.0;
            state.primed = false;
            state.applied = ControlInput::new(
                steer.clamp(-cfg.steer_limit, cfg.steer_limit),
                torque.clamp(-cfg.torque_limit, cfg.torque_limit),
            );
        }
        LowLevelCommand::Speed { steer, speed } => {
            let steer_err = steer - fb.measured_steer;
            let v_hat = wheel_radius * (fb.wheel_rear_left + fb.wheel_rear_right) / 2.0;
            let speed_err = speed - v_hat;
            if !state.primed {
                state.prev_steer_err = steer_err;
                state.prev_speed_err = speed_err;
                state.primed = true;
            }
            let steer_rate = pid(
                &cfg.steer_pid,
                steer_err,
                &mut state.steer_integral,
                &mut state.prev_steer_err,
                cfg.integrator_limit,
                dt,
            );
            let torque = pid(
                &cfg.speed_pid,
                speed_err,
                &mut state.speed_integral,
                &mut state.prev_speed_err,
                cfg.integrator_limit,
                dt,
            );
            state.applied = ControlInput::new(
                (state.applied.steer + steer_rate * dt).clamp(-cfg.steer_limit, cfg.steer_limit),
                torque.clamp(-cfg.torque_limit, cfg.torque_limit),
            );
        }
    }
    state.applied
}

/// Discrete happenings worth replaying.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SimEvent {
    DropoutStart { t: f64, window: usize },
    DropoutEnd { t: f64, window: usize },
    /// The ground-truth position completed its `lap`-th circuit of the track.
    LapComplete { t: f64, lap: usize },
}

/// One controller update, without wall-clock timing so logs stay
/// reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub t: f64,
    pub control: ControlInput,
    /// Path coordinate at plan time, wrapped into one lap.
    pub s: f64,
    pub progress_rate: f64,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub defect: f64,
}

/// One estimator update, without wall-clock timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub t: f64,
    pub state: VehicleState,
    pub converged: bool,
    pub defect: f64,
}

/// Complete record of a run. Serializes losslessly; two runs of the same
/// scenario and seed produce identical logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimLog {
    pub base_dt: f64,
    /// Estimator period [s]; the spacing of `estimation_steps`.
    pub estimator_dt: f64,
    /// Ground truth at every base step boundary, including the final time.
    pub truth: Vec<(f64, VehicleState)>,
    /// Input applied over each base step.
    pub applied: Vec<(f64, ControlInput)>,
    /// Raw sensor frames as they fired, one per base tick with data; channels
    /// outside the groups that fired are invalid.
    pub frames: Vec<MeasurementFrame>,
    /// Input and collected-frame pairs at the estimator rate, exactly as an
    /// estimator consumes them. Filled in open loop too, so scripted runs
    /// double as identification datasets.
    pub estimation_steps: Vec<(ControlInput, MeasurementFrame)>,
    pub estimates: Vec<EstimateRecord>,
    pub plans: Vec<PlanRecord>,
    pub events: Vec<SimEvent>,
}

impl SimLog {
    /// Repackages the estimator-rate stream as an identification dataset.
    pub fn dataset(&self) -> Result<Dataset, DatasetError> {
        Dataset::new(self.estimator_dt, self.estimation_steps.clone())
    }

    /// Ground truth resampled at the estimator instants `t_1, t_2, ...`
    /// (those carrying estimates), for error metrics.
    pub fn truth_at_estimates(&self) -> Vec<(f64, VehicleState)> {
        self.estimates
            .iter()
            .map(|e| {
                let k = (e.t / self.base_dt).round() as usize;
                self.truth[k.min(self.truth.len() - 1)]
            })
            .collect()
    }
}

enum Pilot<'a> {
    Closed {
        estimator: Mhe,
        controller: MpccController,
    },
    Scripted {
        command: Box<dyn FnMut(f64) -> LowLevelCommand + 'a>,
    },
}

/// Runs the full loop: moving horizon estimator feeding a contouring
/// controller whose output is passed through the low-level layer. The
/// estimator's and controller's configured periods must match the scenario
/// rates.
pub fn run_closed_loop(
    cfg: &SimConfig,
    estimator: Mhe,
    controller: MpccController,
) -> Result<SimLog, SimError> {
    let iv = cfg.intervals()?;
    let est_dt = iv.est as f64 * cfg.base_dt;
    if (estimator.config().dt - est_dt).abs() > 1e-9 {
        return Err(SimError::EstimatorPeriod {
            expected: est_dt,
            got: estimator.config().dt,
        });
    }
    let ctl_dt = iv.ctl as f64 * cfg.base_dt;
    if (controller.config().dt - ctl_dt).abs() > 1e-9 {
        return Err(SimError::ControllerPeriod {
            expected: ctl_dt,
            got: controller.config().dt,
        });
    }
    run(cfg, iv, Pilot::Closed {
        estimator,
        controller,
    })
}

/// Runs a scripted scenario: `command` is evaluated at the low-level rate and
/// no estimator or controller is involved. The log still carries the
/// estimator-rate measurement stream.
pub fn run_open_loop(
    cfg: &SimConfig,
    command: impl FnMut(f64) -> LowLevelCommand,
) -> Result<SimLog, SimError> {
    let iv = cfg.intervals()?;
    run(cfg, iv, Pilot::Scripted {
        command: Box::new(command),
    })
}

fn run(cfg: &SimConfig, iv: Intervals, mut pilot: Pilot) -> Result<SimLog, SimError> {
    let n_stations = cfg.params.stations.len();
    let n_ch = cfg.params.n_channels();
    let stds = cfg.noise.channel_stds(n_stations);
    let mut truth_model = cfg.params.model;
    truth_model.cd1 += cfg.extra_damping;

    let mut rng_proc = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rng_imu = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rng_wheel = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rng_lh = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rng_servo = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_proc.set_stream(0);
    rng_imu.set_stream(1);
    rng_wheel.set_stream(2);
    rng_lh.set_stream(3);
    rng_servo.set_stream(4);
    let mut draw = move |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let mut log = SimLog {
        base_dt: cfg.base_dt,
        estimator_dt: iv.est as f64 * cfg.base_dt,
        truth: Vec::with_capacity(iv.n_base + 1),
        applied: Vec::with_capacity(iv.n_base),
        frames: vec![],
        estimation_steps: vec![],
        estimates: vec![],
        plans: vec![],
        events: vec![],
    };

    let mut x = cfg.x0;
    let mut ll = LowLevelState::default();
    let mut command = LowLevelCommand::Direct {
        steer: 0.0,
        torque: 0.0,
    };
    let mut last_enc = [0.0; 2];
    let mut dropout_active = vec![false; cfg.dropouts.len()];

    // Lap accounting on ground truth, relative to the starting position.
    let (mut lap_s, mut lap_progress, mut laps) = match &pilot {
        Pilot::Closed { controller, .. } => {
            let track = controller.track();
            (track.nearest_s([x.x, x.y], None), 0.0, 0usize)
        }
        Pilot::Scripted { .. } => (0.0, 0.0, 0),
    };

    let empty_frame = |t: f64| MeasurementFrame {
        t,
        values: DVector::zeros(n_ch),
        valid: vec![false; n_ch],
    };
    let mut pending_frame = empty_frame(0.0);
    let mut pending_u = ControlInput::default();

    let mut fire_estimator = |k: usize,
                              t: f64,
                              pilot: &mut Pilot,
                              pending_frame: &mut MeasurementFrame,
                              pending_u: &ControlInput,
                              log: &mut SimLog| {
        if k == 0 || k % iv.est != 0 {
            return;
        }
        log.estimation_steps
            .push((*pending_u, pending_frame.clone()));
        if let Pilot::Closed { estimator, .. } = pilot {
            let est = estimator.step(pending_u, pending_frame);
            log.estimates.push(EstimateRecord {
                t,
                state: est.state,
                converged: est.converged,
                defect: est.defect,
            });
        }
    };

    for k in 0..iv.n_base {
        let t = k as f64 * cfg.base_dt;

        for (i, w) in cfg.dropouts.iter().enumerate() {
            let active = t >= w.start && t < w.end;
            if active != dropout_active[i] {
                dropout_active[i] = active;
                log.events.push(if active {
                    SimEvent::DropoutStart { t, window: i }
                } else {
                    SimEvent::DropoutEnd { t, window: i }
                });
            }
        }

        fire_estimator(k, t, &mut pilot, &mut pending_frame, &pending_u, &mut log);
        if k % iv.est == 0 {
            pending_frame = empty_frame(t);
        }

        if k % iv.ctl == 0 {
            match &mut pilot {
                Pilot::Closed {
                    estimator,
                    controller,
                } => {
                    let plan = controller.plan(&estimator.latest());
                    command = LowLevelCommand::Direct {
                        steer: plan.control.steer,
                        torque: plan.control.torque,
                    };
                    log.plans.push(PlanRecord {
                        t,
                        control: plan.control,
                        s: plan.s,
                        progress_rate: plan.progress_rate,
                        cost: plan.cost,
                        iterations: plan.iterations,
                        converged: plan.converged,
                        defect: plan.defect,
                    });

                    let track = controller.track();
                    let total = track.total_length();
                    let s_now = track.nearest_s([x.x, x.y], Some(lap_s));
                    let mut ds = track.canonical_s(s_now) - track.canonical_s(lap_s);
                    if ds > total / 2.0 {
                        ds -= total;
                    } else if ds < -total / 2.0 {
                        ds += total;
                    }
                    lap_progress += ds;
                    lap_s = s_now;
                    while lap_progress >= (laps + 1) as f64 * total {
                        laps += 1;
                        log.events.push(SimEvent::LapComplete { t, lap: laps });
                    }
                }
                Pilot::Scripted { .. } => {}
            }
        }

        if k % iv.ll == 0 {
            if let Pilot::Scripted { command: f } = &mut pilot {
                command = f(t);
            }
            let fb = LowLevelFeedback {
                measured_steer: ll.applied.steer
                    + LowLevelConfig::default().steer_meas_noise * draw(&mut rng_servo),
                wheel_rear_left: last_enc[0],
                wheel_rear_right: last_enc[1],
            };
            let ll_cfg = LowLevelConfig::default();
            low_level_step(
                &mut ll,
                &command,
                &fb,
                cfg.params.wheel.wheel_radius,
                &ll_cfg,
                iv.ll as f64 * cfg.base_dt,
            );
        }
        if k % iv.est == 0 {
            pending_u = ll.applied;
        }

        let imu_fires = k % iv.imu == 0;
        let enc_fires = k % iv.enc == 0;
        let lh_fires = k % iv.lh == 0;
        if imu_fires || enc_fires || lh_fires {
            let clean = full_measurement(t, &x, &ll.applied, None, &cfg.params, &cfg.drive);
            let mut frame = empty_frame(t);
            let mut add = |frame: &mut MeasurementFrame, c: usize, z: f64| {
                frame.values[c] = clean.values[c] + stds[c] * z;
                frame.valid[c] = clean.valid[c];
            };
            if imu_fires {
                for c in imu_range() {
                    let z = draw(&mut rng_imu);
                    add(&mut frame, c, z);
                }
            }
            if enc_fires {
                for c in wheel_range() {
                    let z = draw(&mut rng_wheel);
                    add(&mut frame, c, z);
                }
                let w = wheel_range().start;
                last_enc = [frame.values[w + 2], frame.values[w + 3]];
            }
            if lh_fires {
                for s in 0..n_stations {
                    for c in lh_range(s) {
                        let z = draw(&mut rng_lh);
                        add(&mut frame, c, z);
                    }
                }
            }
            inject_dropout(&mut frame, &cfg.dropouts, n_stations);
            for c in 0..n_ch {
                if frame.valid[c] && !pending_frame.valid[c] {
                    pending_frame.values[c] = frame.values[c];
                    pending_frame.valid[c] = true;
                }
            }
            log.frames.push(frame);
        }

        log.truth.push((t, x));
        log.applied.push((t, ll.applied));

        let w = Vector6::from_fn(|i, _| {
            let z = draw(&mut rng_proc);
            cfg.process_noise[i] * cfg.base_dt.sqrt() * z
        });
        x = discrete_step(&x, &ll.applied, &w, &truth_model, &cfg.drive, cfg.base_dt);
    }

    let t_end = iv.n_base as f64 * cfg.base_dt;
    log.truth.push((t_end, x));
    fire_estimator(
        iv.n_base,
        t_end,
        &mut pilot,
        &mut pending_frame,
        &pending_u,
        &mut log,
    );
    Ok(log)
}
