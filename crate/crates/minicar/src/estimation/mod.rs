//! Online state estimation: a discounted moving horizon estimator and an
//! extended Kalman filter baseline, plus accuracy metrics for comparing
//! estimate streams against ground truth.

mod ekf;
mod metrics;
mod mhe;

pub use ekf::{joseph_update, Ekf, EkfConfig};
pub use metrics::{evaluate_rmse, EmptyOverlap, RmseReport};
pub use mhe::{Mhe, MheConfig, MheEstimate};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{discrete_step, ControlInput, DriveConfig, VehicleState};
    use crate::math::wrap_angle;
    use crate::nlp::{ShootingProblem, SqpOptions, TermEval};
    use crate::sensors::{full_measurement, lh_range, measurement_jacobians, MeasurementFrame, ParamSet};
    use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn drive() -> DriveConfig {
        DriveConfig::default()
    }

    /// Rolls the model forward under a gentle weave and returns states,
    /// inputs and frames; measurement noise scaled by `meas_scale`.
    fn rollout(
        x0: &VehicleState,
        steps: usize,
        dt: f64,
        params: &ParamSet,
        meas_scale: f64,
        seed: u64,
    ) -> (Vec<VehicleState>, Vec<ControlInput>, Vec<MeasurementFrame>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stds = crate::sensors::NoiseLevels::default().channel_stds(params.stations.len());
        let mut states = vec![*x0];
        let mut inputs = Vec::new();
        let mut frames = Vec::new();
        let mut x = *x0;
        for j in 0..steps {
            let t = j as f64 * dt;
            let u = ControlInput::new(0.15 * (2.0 * t).sin(), 0.25);
            let noise: DVector<f64> = DVector::from_iterator(
                stds.len(),
                stds.iter().map(|s| meas_scale * s * rng.gen_range(-1.0..1.0)),
            );
            let frame = full_measurement(t, &x, &u, Some(&noise), params, &drive());
            x = discrete_step(&x, &u, &Vector6::zeros(), &params.model, &drive(), dt);
            states.push(x);
            inputs.push(u);
            frames.push(frame);
        }
        (states, inputs, frames)
    }

    #[test]
    fn first_step_with_truth_anchor_is_exact() {
        let params = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.8,
            ..Default::default()
        };
        let (states, inputs, frames) = rollout(&x0, 1, 1.0 / 60.0, &params, 0.0, 1);
        let mut mhe = Mhe::new(MheConfig::default(), params, drive(), &x0);
        let est = mhe.step(&inputs[0], &frames[0]);
        assert!(est.converged);
        let err = (est.state.as_vector() - states[1].as_vector()).norm();
        assert!(err <= 1e-8, "first estimate off by {err}");
    }

    #[test]
    fn window_grows_to_horizon_then_slides() {
        let params = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.5,
            ..Default::default()
        };
        let (_, inputs, frames) = rollout(&x0, 8, 1.0 / 60.0, &params, 0.0, 2);
        let cfg = MheConfig {
            horizon: 5,
            ..Default::default()
        };
        let mut mhe = Mhe::new(cfg, params, drive(), &x0);
        for j in 0..8 {
            mhe.step(&inputs[j], &frames[j]);
            assert_eq!(mhe.window_len(), (j + 1).min(5));
        }
    }

    #[test]
    fn noise_free_run_reproduces_truth() {
        let params = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.6,
            ..Default::default()
        };
        let steps = 50;
        let (states, inputs, frames) = rollout(&x0, steps, 1.0 / 60.0, &params, 0.0, 3);
        let mut mhe = Mhe::new(MheConfig::default(), params, drive(), &x0);
        for j in 0..steps {
            let est = mhe.step(&inputs[j], &frames[j]);
            let err = (est.state.as_vector() - states[j + 1].as_vector()).norm();
            assert!(err <= 1e-6, "step {j}: error {err}");
        }
    }

    #[test]
    fn fully_masked_frames_fall_back_to_model_prediction() {
        let params = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.7,
            ..Default::default()
        };
        let steps = 10;
        let (states, inputs, mut frames) = rollout(&x0, steps, 1.0 / 60.0, &params, 0.0, 4);
        for f in &mut frames {
            f.valid.iter_mut().for_each(|v| *v = false);
        }
        let mut mhe = Mhe::new(MheConfig::default(), params, drive(), &x0);
        for j in 0..steps {
            let est = mhe.step(&inputs[j], &frames[j]);
            let err = (est.state.as_vector() - states[j + 1].as_vector()).norm();
            assert!(err <= 1e-6, "step {j}: error {err}");
        }
    }

    /// Builds the undiscounted full-information problem over all data from
    /// scratch and solves it once, then checks the recursive estimator lands
    /// on the same answer while the window still covers everything.
    #[test]
    fn matches_full_information_solve_when_undiscounted() {
        let params = ParamSet::default();
        let dt = 1.0 / 60.0;
        let x0 = VehicleState {
            vx: 0.8,
            ..Default::default()
        };
        let steps = 6;
        let (_, inputs, frames) = rollout(&x0, steps, dt, &params, 0.5, 5);
        let cfg = MheConfig {
            discount: 1.0,
            tol_stat: 1e-9,
            tol_feas: 1e-11,
            max_iter: 60,
            ..Default::default()
        };

        let mut mhe = Mhe::new(cfg.clone(), params.clone(), drive(), &x0);
        let mut last = None;
        for j in 0..steps {
            last = Some(mhe.step(&inputs[j], &frames[j]));
        }
        let recursive = last.unwrap();

        // independent batch formulation: stages [x; w] with terminal [x]
        let mut dims = vec![12usize; steps];
        dims.push(6);
        let mut problem = ShootingProblem::new(&dims);
        let anchor = x0.as_vector();
        let wp: [f64; 6] = std::array::from_fn(|k| cfg.weight_prior[k].sqrt());
        problem.add_residual(0, 6, move |z| {
            let mut val = DVector::zeros(6);
            let mut jac = DMatrix::zeros(6, 12);
            for k in 0..6 {
                val[k] = wp[k] * (z[k] - anchor[k]);
                jac[(k, k)] = wp[k];
            }
            TermEval::new(val, jac)
        });
        let stds = cfg.noise.channel_stds(params.stations.len());
        let lh_start = lh_range(0).start;
        for j in 0..steps {
            let wq: [f64; 6] = std::array::from_fn(|k| cfg.weight_process[k].sqrt());
            problem.add_residual(j, 6, move |z| {
                let mut val = DVector::zeros(6);
                let mut jac = DMatrix::zeros(6, 12);
                for k in 0..6 {
                    val[k] = wq[k] * z[6 + k];
                    jac[(k, 6 + k)] = wq[k];
                }
                TermEval::new(val, jac)
            });
            let frame = frames[j].clone();
            let u = inputs[j];
            let p = params.clone();
            let rows: Vec<usize> = (0..frame.values.len()).filter(|&c| frame.valid[c]).collect();
            let scale: Vec<f64> = rows.iter().map(|&c| 1.0 / stds[c]).collect();
            let nrows = rows.len();
            problem.add_residual(j, nrows, move |z| {
                let x = VehicleState::from_vector(&Vector6::from_row_slice(&z[..6]));
                let pred = full_measurement(0.0, &x, &u, None, &p, &drive());
                let jacs = measurement_jacobians(&x, &u, &p, &drive());
                let mut val = DVector::zeros(nrows);
                let mut jac = DMatrix::zeros(nrows, 12);
                for (r, &c) in rows.iter().enumerate() {
                    if !pred.valid[c] {
                        continue;
                    }
                    let mut innov = pred.values[c] - frame.values[c];
                    if c >= lh_start {
                        innov = wrap_angle(innov);
                    }
                    val[r] = scale[r] * innov;
                    for k in 0..6 {
                        jac[(r, k)] = scale[r] * jacs.wrt_state[(c, k)];
                    }
                }
                TermEval::new(val, jac)
            });
            let u2 = inputs[j];
            let model = params.model;
            let next_dim = if j + 1 == steps { 6 } else { 12 };
            problem.add_pair_constraint(j, 6, move |z, zn| {
                let x = VehicleState::from_vector(&Vector6::from_row_slice(&z[..6]));
                let w = Vector6::from_row_slice(&z[6..12]);
                let xn = discrete_step(&x, &u2, &w, &model, &drive(), dt).as_vector();
                let jd = crate::dynamics::dynamics_jacobians(&x, &u2, &model, &drive(), dt);
                let mut val = DVector::zeros(6);
                let mut jac = DMatrix::zeros(6, 12);
                let mut jn = DMatrix::zeros(6, next_dim);
                for r in 0..6 {
                    val[r] = zn[r] - xn[r];
                    for c in 0..6 {
                        jac[(r, c)] = -jd.wrt_state[(r, c)];
                    }
                    jac[(r, 6 + r)] = -1.0;
                    jn[(r, r)] = 1.0;
                }
                TermEval::pair(val, jac, jn)
            });
        }
        // cold start from a pure rollout of the prior state
        let mut guess = Vec::new();
        let mut x = x0;
        for j in 0..steps {
            let mut z = DVector::zeros(12);
            z.rows_mut(0, 6).copy_from(&x.as_vector());
            guess.push(z);
            x = discrete_step(&x, &inputs[j], &Vector6::zeros(), &params.model, &drive(), dt);
        }
        guess.push(DVector::from_row_slice(x.as_vector().as_slice()));
        let opts = SqpOptions {
            max_iter: 80,
            tol_stat: 1e-9,
            tol_feas: 1e-11,
            reg: 1e-8,
            ..Default::default()
        };
        let report = problem.solve(&guess, &opts);
        assert!(report.status.is_converged());
        let batch_last = Vector6::from_row_slice(&report.stages[steps].as_slice()[..6]);

        let diff = (recursive.state.as_vector() - batch_last).norm();
        assert!(diff <= 1e-6, "recursive vs batch differ by {diff}");
    }

    #[test]
    fn common_weight_scaling_leaves_estimate_unchanged() {
        let params = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.8,
            ..Default::default()
        };
        let steps = 12;
        let (_, inputs, frames) = rollout(&x0, steps, 1.0 / 60.0, &params, 0.5, 6);

        let tight = |scale: f64| {
            let mut cfg = MheConfig {
                tol_stat: 1e-9,
                tol_feas: 1e-11,
                max_iter: 60,
                ..Default::default()
            };
            for k in 0..6 {
                cfg.weight_prior[k] *= scale;
                cfg.weight_process[k] *= scale;
            }
            // measurement weights are inverse variances of the noise levels
            let s = scale.sqrt();
            cfg.noise.accel /= s;
            cfg.noise.gyro /= s;
            cfg.noise.wheel /= s;
            cfg.noise.lighthouse /= s;
            cfg
        };

        let run = |cfg: MheConfig| {
            let mut mhe = Mhe::new(cfg, params.clone(), drive(), &x0);
            let mut out = Vec::new();
            for j in 0..steps {
                out.push(mhe.step(&inputs[j], &frames[j]).state.as_vector());
            }
            out
        };
        let base = run(tight(1.0));
        let scaled = run(tight(7.3));
        for (a, b) in base.iter().zip(&scaled) {
            assert!((a - b).norm() <= 1e-6, "scaling changed the estimate");
        }
    }

    #[test]
    fn reported_cost_matches_recomputed_objective() {
        let params = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.8,
            ..Default::default()
        };
        let steps = 9;
        let dt = 1.0 / 60.0;
        let (_, inputs, frames) = rollout(&x0, steps, dt, &params, 0.5, 7);
        let cfg = MheConfig::default();
        let mut mhe = Mhe::new(cfg.clone(), params.clone(), drive(), &x0);
        let mut anchors = vec![x0.as_vector()];
        let mut last = None;
        for j in 0..steps {
            let est = mhe.step(&inputs[j], &frames[j]);
            anchors.push(est.state.as_vector());
            last = Some(est);
        }
        let est = last.unwrap();
        let m = steps.min(cfg.horizon);
        let anchor = anchors[steps - m];
        let eta = cfg.discount;
        let stds = cfg.noise.channel_stds(params.stations.len());
        let lh_start = lh_range(0).start;

        // prior term
        let first = est.window[0].as_vector();
        let mut v = 0.0;
        for k in 0..6 {
            v += eta.powi(m as i32) * cfg.weight_prior[k] * (first[k] - anchor[k]).powi(2);
        }
        for i in 0..m {
            let disc = eta.powi((m - 1 - i) as i32);
            let x = est.window[i];
            let xn = est.window[i + 1].as_vector();
            let u = inputs[steps - m + i];
            // process noise recovered from the dynamics defect
            let roll = discrete_step(&x, &u, &Vector6::zeros(), &params.model, &drive(), dt);
            let w = xn - roll.as_vector();
            for k in 0..6 {
                v += disc * cfg.weight_process[k] * w[k] * w[k];
            }
            let frame = &frames[steps - m + i];
            let pred = full_measurement(0.0, &x, &u, None, &params, &drive());
            for c in 0..frame.values.len() {
                if !frame.valid[c] || !pred.valid[c] {
                    continue;
                }
                let mut innov = pred.values[c] - frame.values[c];
                if c >= lh_start {
                    innov = wrap_angle(innov);
                }
                v += disc * innov * innov / (stds[c] * stds[c]);
            }
        }
        // solver reports half the squared residual norm
        let rel = (2.0 * est.cost - v).abs() / v.max(1.0);
        assert!(rel <= 1e-9, "cost decomposition off by {rel}");
    }

    #[test]
    fn gate_drops_wild_outlier() {
        let params = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.8,
            ..Default::default()
        };
        let steps = 20;
        let (states, inputs, mut frames) = rollout(&x0, steps, 1.0 / 60.0, &params, 0.0, 8);
        // corrupt one wheel channel mid-run by an absurd amount
        let c = crate::sensors::wheel_range().start;
        frames[10].values[c] += 500.0;

        let cfg = MheConfig {
            gate: 8.0,
            ..Default::default()
        };
        let mut mhe = Mhe::new(cfg, params, drive(), &x0);
        let mut worst: f64 = 0.0;
        for j in 0..steps {
            let est = mhe.step(&inputs[j], &frames[j]);
            let err = (est.state.as_vector() - states[j + 1].as_vector()).norm();
            worst = worst.max(err);
        }
        assert!(worst <= 1e-4, "outlier leaked into the estimate: {worst}");
    }

    #[test]
    fn ekf_matches_dense_kalman_filter_on_linear_problem() {
        // arbitrary well-conditioned linear observation, three rounds
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = Vector6::from_fn(|i, _| 0.1 * i as f64);
        let mut cov = Matrix6::identity() * 0.5;
        for i in 0..6 {
            for j in 0..i {
                let v = 0.02 * ((i + j) as f64).sin();
                cov[(i, j)] += v;
                cov[(j, i)] += v;
            }
        }
        let mut x_ref = DVector::from_row_slice(x.as_slice());
        let mut p_ref = DMatrix::from_fn(6, 6, |i, j| cov[(i, j)]);

        for _ in 0..3 {
            let h = DMatrix::from_fn(4, 6, |_, _| rng.gen_range(-1.0..1.0));
            let r_diag = DVector::from_fn(4, |i, _| 0.1 + 0.05 * i as f64);
            let y = DVector::from_fn(4, |i, _| 0.3 * (i as f64 + 1.0));
            let xd = DVector::from_row_slice(x.as_slice());
            let innovation = &y - &h * &xd;

            joseph_update(&mut x, &mut cov, &innovation, &h, &r_diag);

            // textbook update, equal to the Joseph form at the optimal gain
            let r = DMatrix::from_diagonal(&r_diag);
            let s = &h * &p_ref * h.transpose() + &r;
            let k = &p_ref * h.transpose() * s.try_inverse().unwrap();
            x_ref = &x_ref + &k * (&y - &h * &x_ref);
            let p_new = (DMatrix::identity(6, 6) - &k * &h) * &p_ref;
            p_ref = DMatrix::from_fn(6, 6, |i, j| 0.5 * (p_new[(i, j)] + p_new[(j, i)]));
        }
        for i in 0..6 {
            assert!((x[i] - x_ref[i]).abs() <= 1e-10);
            for j in 0..6 {
                assert!((cov[(i, j)] - p_ref[(i, j)]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn ekf_converges_on_noise_free_run() {
        let params = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.6,
            ..Default::default()
        };
        let steps = 150;
        let (states, inputs, frames) = rollout(&x0, steps, 1.0 / 60.0, &params, 0.0, 9);
        let off = VehicleState {
            x: x0.x + 0.05,
            y: x0.y - 0.04,
            ..x0
        };
        let mut ekf = Ekf::new(EkfConfig::default(), params, drive(), &off);
        let mut last_err = f64::INFINITY;
        for j in 0..steps {
            let est = ekf.step(&inputs[j], &frames[j]);
            last_err = (est.as_vector() - states[j + 1].as_vector()).norm();
        }
        assert!(last_err <= 1e-3, "EKF did not converge: {last_err}");
    }

    #[test]
    fn ekf_masked_frame_is_pure_prediction() {
        let params = ParamSet::default();
        let x0 = VehicleState {
            vx: 0.6,
            ..Default::default()
        };
        let u = ControlInput::new(0.05, 0.2);
        let mut frame = MeasurementFrame::empty(0.0, params.stations.len());
        frame.valid.iter_mut().for_each(|v| *v = false);

        let mut ekf = Ekf::new(EkfConfig::default(), params.clone(), drive(), &x0);
        // velocity variance can contract under the damped dynamics, but
        // position variance only accumulates
        let pos0 = ekf.covariance()[(0, 0)] + ekf.covariance()[(1, 1)];
        let est = ekf.step(&u, &frame);
        let expect = discrete_step(&x0, &u, &Vector6::zeros(), &params.model, &drive(), 1.0 / 60.0);
        assert!((est.as_vector() - expect.as_vector()).norm() <= 1e-12);
        assert!(ekf.covariance()[(0, 0)] + ekf.covariance()[(1, 1)] > pos0);
    }

    #[test]
    fn rmse_identical_streams_is_zero() {
        let s = |t: f64| {
            (
                t,
                VehicleState {
                    x: t,
                    y: 2.0 * t,
                    yaw: 0.1 * t,
                    vx: 1.0,
                    vy: 0.0,
                    yaw_rate: 0.1,
                },
            )
        };
        let stream: Vec<_> = (0..50).map(|k| s(k as f64 * 0.01)).collect();
        let r = evaluate_rmse(&stream, &stream).unwrap();
        assert_eq!(r.count, 50);
        for k in 0..6 {
            assert!(r.rmse[k] == 0.0 && r.std[k] == 0.0);
        }
    }

    #[test]
    fn rmse_wraps_yaw_residual() {
        let truth = vec![(
            0.0,
            VehicleState {
                yaw: 3.1,
                ..Default::default()
            },
        )];
        let est = vec![(
            0.0,
            VehicleState {
                yaw: -3.1,
                ..Default::default()
            },
        )];
        let r = evaluate_rmse(&est, &truth).unwrap();
        let expect = 2.0 * std::f64::consts::PI - 6.2;
        assert!((r.rmse[2] - expect).abs() <= 1e-12, "got {}", r.rmse[2]);
    }

    #[test]
    fn rmse_pairs_nearest_in_time() {
        let est = vec![
            (0.0, VehicleState { x: 1.0, ..Default::default() }),
            (1.0, VehicleState { x: 3.0, ..Default::default() }),
        ];
        // truth at 0.4 pairs with the first estimate, at 0.6 with the second
        let truth = vec![
            (0.4, VehicleState::default()),
            (0.6, VehicleState::default()),
        ];
        let r = evaluate_rmse(&est, &truth).unwrap();
        let expect = ((1.0_f64.powi(2) + 3.0_f64.powi(2)) / 2.0).sqrt();
        assert!((r.rmse[0] - expect).abs() <= 1e-12);
    }

    #[test]
    fn rmse_rejects_disjoint_streams() {
        let est = vec![(0.0, VehicleState::default())];
        let truth = vec![(5.0, VehicleState::default())];
        assert!(matches!(evaluate_rmse(&est, &truth), Err(EmptyOverlap)));
        assert!(matches!(evaluate_rmse(&[], &truth), Err(EmptyOverlap)));
    }
}
