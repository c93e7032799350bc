//! Accuracy metrics for estimate streams.

use crate::dynamics::VehicleState;
use crate::math::wrap_angle;

/// Per-state accuracy of an estimate stream against ground truth.
#[derive(Clone, Copy, Debug)]
pub struct RmseReport {
    /// Root mean square error per state `[x, y, yaw, vx, vy, yaw_rate]`.
    pub rmse: [f64; 6],
    /// Standard deviation of the residual per state.
    pub std: [f64; 6],
    /// Number of paired samples.
    pub count: usize,
}

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
#[error("estimate and ground-truth streams do not overlap in time")]
pub struct EmptyOverlap;

/// Pairs every ground-truth sample inside the estimate stream's time span
/// with the nearest-in-time estimate and accumulates per-state residual
/// statistics. The yaw residual is wrapped to (-pi, pi].
pub fn evaluate_rmse(
    estimates: &[(f64, VehicleState)],
    truth: &[(f64, VehicleState)],
) -> Result<RmseReport, EmptyOverlap> {
    if estimates.is_empty() || truth.is_empty() {
        return Err(EmptyOverlap);
    }
    debug_assert!(estimates.windows(2).all(|w| w[0].0 <= w[1].0));
    let span = (estimates[0].0, estimates[estimates.len() - 1].0);

    let mut sum = [0.0; 6];
    let mut sum_sq = [0.0; 6];
    let mut count = 0usize;
    for &(t, ref xt) in truth {
        if t < span.0 || t > span.1 {
            continue;
        }
        let est = &nearest(estimates, t).1;
        let res = [
            est.x - xt.x,
            est.y - xt.y,
            wrap_angle(est.yaw - xt.yaw),
            est.vx - xt.vx,
            est.vy - xt.vy,
            est.yaw_rate - xt.yaw_rate,
        ];
        for (k, r) in res.iter().enumerate() {
            sum[k] += r;
            sum_sq[k] += r * r;
        }
        count += 1;
    }
    if count == 0 {
        return Err(EmptyOverlap);
    }

    let n = count as f64;
    let mut rmse = [0.0; 6];
    let mut std = [0.0; 6];
    for k in 0..6 {
        rmse[k] = (sum_sq[k] / n).sqrt();
        let mean = sum[k] / n;
        std[k] = (sum_sq[k] / n - mean * mean).max(0.0).sqrt();
    }
    Ok(RmseReport { rmse, std, count })
}

fn nearest(samples: &[(f64, VehicleState)], t: f64) -> &(f64, VehicleState) {
    let i = samples.partition_point(|s| s.0 < t);
    if i == 0 {
        return &samples[0];
    }
    if i == samples.len() {
        return &samples[samples.len() - 1];
    }
    let (lo, hi) = (&samples[i - 1], &samples[i]);
    if (t - lo.0) <= (hi.0 - t) {
        lo
    } else {
        hi
    }
}
