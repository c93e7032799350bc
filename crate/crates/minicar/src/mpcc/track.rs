//! Arc-length parameterized centerline with a lateral corridor.
//!
//! The centerline is a cubic Hermite spline through the waypoints with
//! Catmull-Rom tangents; arc length is accumulated by dense subdivision and
//! each segment is traversed proportionally to it. Sampling is generic over
//! the scalar type, so contouring and lag errors can be differentiated with
//! respect to the path coordinate by feeding dual numbers through.

use thiserror::Error;

use crate::math::Real;

/// Subdivision count per segment for the arc-length tables.
const LEN_SUBDIV: usize = 64;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("a track needs at least {min} waypoints, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("waypoint {index} has nonpositive half width {value}")]
    BadWidth { index: usize, value: f64 },
    #[error("waypoints {a} and {b} coincide")]
    DuplicatePoint { a: usize, b: usize },
}

/// Centerline sample at a path coordinate.
#[derive(Clone, Copy, Debug)]
pub struct TrackPoint<S> {
    pub position: [S; 2],
    /// Unit tangent along increasing path coordinate.
    pub tangent: [S; 2],
    /// Unit left normal (tangent rotated +90 degrees).
    pub normal: [S; 2],
    pub half_width: S,
}

/// Closed or open corridor around a spline centerline.
#[derive(Clone, Debug)]
pub struct Track {
    closed: bool,
    /// Waypoints as `[x, y, half_width]`.
    points: Vec<[f64; 3]>,
    /// Catmull-Rom tangents per waypoint (d position / d segment fraction).
    tangents: Vec<[f64; 2]>,
    /// Cumulative arc length at the start of each segment; the last entry is
    /// the total length.
    cum_len: Vec<f64>,
    /// Cumulative arc length at each subdivision node within a segment,
    /// used to invert arc length to the spline parameter.
    sub_len: Vec<Vec<f64>>,
}

impl Track {
    pub fn new(points: Vec<[f64; 3]>, closed: bool) -> Result<Track, TrackError> {
        let min = if closed { 3 } else { 2 };
        if points.len() < min {
            return Err(TrackError::TooFewPoints {
                min,
                got: points.len(),
            });
        }
        for (i, p) in points.iter().enumerate() {
            if !(p[2] > 0.0) {
                return Err(TrackError::BadWidth {
                    index: i,
                    value: p[2],
                });
            }
        }
        let n = points.len();
        for i in 0..if closed { n } else { n - 1 } {
            let j = (i + 1) % n;
            let dx = points[j][0] - points[i][0];
            let dy = points[j][1] - points[i][1];
            if dx * dx + dy * dy < 1e-16 {
                return Err(TrackError::DuplicatePoint { a: i, b: j });
            }
        }
        let mut track = Track {
            closed,
            points,
            tangents: vec![],
            cum_len: vec![],
            sub_len: vec![],
        };
        track.rebuild();
        Ok(track)
    }

    fn rebuild(&mut self) {
        let n = self.points.len();
        let pt = |i: usize| [self.points[i][0], self.points[i][1]];
        self.tangents = (0..n)
            .map(|i| {
                let (prev, next) = if self.closed {
                    (pt((i + n - 1) % n), pt((i + 1) % n))
                } else if i == 0 {
                    (pt(0), pt(1))
                } else if i == n - 1 {
                    (pt(n - 2), pt(n - 1))
                } else {
                    (pt(i - 1), pt(i + 1))
                };
                let scale = if !self.closed && (i == 0 || i == n - 1) {
                    // one-sided difference at open ends
                    1.0
                } else {
                    0.5
                };
                [(next[0] - prev[0]) * scale, (next[1] - prev[1]) * scale]
            })
            .collect();

        let n_seg = self.n_segments();
        let mut cum = Vec::with_capacity(n_seg + 1);
        let mut sub = Vec::with_capacity(n_seg);
        cum.push(0.0);
        for seg in 0..n_seg {
            let mut table = Vec::with_capacity(LEN_SUBDIV + 1);
            table.push(0.0);
            let mut len = 0.0;
            let mut prev = self.hermite::<f64>(seg, 0.0);
            for k in 1..=LEN_SUBDIV {
                let u = k as f64 / LEN_SUBDIV as f64;
                let p = self.hermite::<f64>(seg, u);
                len += ((p[0] - prev[0]).powi(2) + (p[1] - prev[1]).powi(2)).sqrt();
                table.push(len);
                prev = p;
            }
            cum.push(cum.last().unwrap() + len);
            sub.push(table);
        }
        self.cum_len = cum;
        self.sub_len = sub;
    }

    fn n_segments(&self) -> usize {
        if self.closed {
            self.points.len()
        } else {
            self.points.len() - 1
        }
    }

    pub fn closed(&self) -> bool {
        self.closed
    }

    pub fn waypoints(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn total_length(&self) -> f64 {
        *self.cum_len.last().unwrap()
    }

    /// Wraps a path coordinate into `[0, total)` on closed tracks, clamps it
    /// on open ones.
    pub fn canonical_s(&self, s: f64) -> f64 {
        let total = self.total_length();
        if self.closed {
            s.rem_euclid(total)
        } else {
            s.clamp(0.0, total)
        }
    }

    fn hermite<S: Real>(&self, seg: usize, u: S) -> [S; 2] {
        let n = self.points.len();
        let j = (seg + 1) % n;
        let one = S::from_f64(1.0);
        let u2 = u * u;
        let u3 = u2 * u;
        let h00 = u3 * S::from_f64(2.0) - u2 * S::from_f64(3.0) + one;
        let h10 = u3 - u2 * S::from_f64(2.0) + u;
        let h01 = u2 * S::from_f64(3.0) - u3 * S::from_f64(2.0);
        let h11 = u3 - u2;
        let p0 = &self.points[seg];
        let p1 = &self.points[j];
        let t0 = &self.tangents[seg];
        let t1 = &self.tangents[j];
        [
            h00 * S::from_f64(p0[0])
                + h10 * S::from_f64(t0[0])
                + h01 * S::from_f64(p1[0])
                + h11 * S::from_f64(t1[0]),
            h00 * S::from_f64(p0[1])
                + h10 * S::from_f64(t0[1])
                + h01 * S::from_f64(p1[1])
                + h11 * S::from_f64(t1[1]),
        ]
    }

    fn hermite_deriv<S: Real>(&self, seg: usize, u: S) -> [S; 2] {
        let n = self.points.len();
        let j = (seg + 1) % n;
        let u2 = u * u;
        let d00 = (u2 - u) * S::from_f64(6.0);
        let d10 = u2 * S::from_f64(3.0) - u * S::from_f64(4.0) + S::from_f64(1.0);
        let d01 = (u - u2) * S::from_f64(6.0);
        let d11 = u2 * S::from_f64(3.0) - u * S::from_f64(2.0);
        let p0 = &self.points[seg];
        let p1 = &self.points[j];
        let t0 = &self.tangents[seg];
        let t1 = &self.tangents[j];
        [
            d00 * S::from_f64(p0[0])
                + d10 * S::from_f64(t0[0])
                + d01 * S::from_f64(p1[0])
                + d11 * S::from_f64(t1[0]),
            d00 * S::from_f64(p0[1])
                + d10 * S::from_f64(t0[1])
                + d01 * S::from_f64(p1[1])
                + d11 * S::from_f64(t1[1]),
        ]
    }

    /// Samples the centerline at path coordinate `s`. On closed tracks `s`
    /// is periodic; open tracks clamp it to the ends. The branch decisions
    /// (wrap, segment lookup) depend only on the value part of `s`, so dual
    /// derivatives flow through the within-segment interpolation.
    pub fn sample<S: Real>(&self, s: S) -> TrackPoint<S> {
        let total = self.total_length();
        let sv = s.value();
        let s = if self.closed {
            // subtract a constant multiple of the length; keeps d/ds intact
            s - S::from_f64((sv / total).floor() * total)
        } else if sv < 0.0 {
            S::from_f64(0.0)
        } else if sv > total {
            S::from_f64(total)
        } else {
            s
        };
        let sv = s.value().clamp(0.0, total);
        // segment with cum_len[seg] <= sv < cum_len[seg + 1]
        let seg = match self
            .cum_len
            .binary_search_by(|c| c.partial_cmp(&sv).unwrap())
        {
            Ok(i) => i.min(self.n_segments() - 1),
            Err(i) => i - 1,
        };
        // invert arc length to the spline parameter through the subdivision
        // table, so the coordinate tracks true arc length closely
        let table = &self.sub_len[seg];
        let lv = sv - self.cum_len[seg];
        let k = match table.binary_search_by(|c| c.partial_cmp(&lv).unwrap()) {
            Ok(i) => i.min(LEN_SUBDIV - 1),
            Err(i) => (i - 1).min(LEN_SUBDIV - 1),
        };
        let dl = table[k + 1] - table[k];
        let frac = (s - S::from_f64(self.cum_len[seg] + table[k])) / S::from_f64(dl);
        let u = (S::from_f64(k as f64) + frac) / S::from_f64(LEN_SUBDIV as f64);
        let position = self.hermite(seg, u);
        let d = self.hermite_deriv(seg, u);
        let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let tangent = [d[0] / norm, d[1] / norm];
        let normal = [S::from_f64(0.0) - tangent[1], tangent[0]];
        let n = self.points.len();
        let w0 = self.points[seg][2];
        let w1 = self.points[(seg + 1) % n][2];
        let half_width = S::from_f64(w0) + u * S::from_f64(w1 - w0);
        TrackPoint {
            position,
            tangent,
            normal,
            half_width,
        }
    }

    /// Path coordinate of the point closest to `p`. With a `hint` the search
    /// is local around it (tracking a moving car); without, the whole track
    /// is scanned first.
    pub fn nearest_s(&self, p: [f64; 2], hint: Option<f64>) -> f64 {
        let total = self.total_length();
        let dist2 = |s: f64| {
            let tp = self.sample::<f64>(s);
            (tp.position[0] - p[0]).powi(2) + (tp.position[1] - p[1]).powi(2)
        };
        let (mut lo, mut hi) = match hint {
            Some(h) => {
                let h = if self.closed { h } else { self.canonical_s(h) };
                (h - 0.15 * total, h + 0.15 * total)
            }
            None => {
                // coarse global scan
                let k = (self.points.len() * 8).max(64);
                let mut best = (f64::INFINITY, 0.0);
                for i in 0..k {
                    let s = total * i as f64 / k as f64;
                    let d = dist2(s);
                    if d < best.0 {
                        best = (d, s);
                    }
                }
                (best.1 - total / k as f64, best.1 + total / k as f64)
            }
        };
        if !self.closed {
            lo = lo.max(0.0);
            hi = hi.min(total);
        }
        // golden-section refinement on the bracket
        let phi = 0.5 * (3.0 - 5.0_f64.sqrt());
        let mut a = lo;
        let mut b = hi;
        let mut c = a + phi * (b - a);
        let mut d = b - phi * (b - a);
        let mut fc = dist2(c);
        let mut fd = dist2(d);
        for _ in 0..60 {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = a + phi * (b - a);
                fc = dist2(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = b - phi * (b - a);
                fd = dist2(d);
            }
        }
        self.canonical_s(0.5 * (a + b))
    }

    /// Signed lateral offset (along the left normal) and path coordinate of
    /// the projection of `p`.
    pub fn lateral_offset(&self, p: [f64; 2], hint: Option<f64>) -> (f64, f64) {
        let s = self.nearest_s(p, hint);
        let tp = self.sample::<f64>(s);
        let d = [p[0] - tp.position[0], p[1] - tp.position[1]];
        (d[0] * tp.normal[0] + d[1] * tp.normal[1], s)
    }

    /// Closed oval: straights at `y = +/- 1.5` joined by semicircles, sized
    /// to sit inside the annulus visible from an overhead station.
    pub fn oval() -> Track {
        let mut pts = vec![];
        let (hx, r, w) = (0.7, 1.5, 0.25);
        let n_arc = 12;
        let n_straight = 6;
        // top straight, right to left
        for i in 0..n_straight {
            let x = hx - 2.0 * hx * i as f64 / n_straight as f64;
            pts.push([x, r, w]);
        }
        // left semicircle
        for i in 0..n_arc {
            let a = std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * i as f64 / n_arc as f64;
            pts.push([-hx + r * a.cos(), r * a.sin(), w]);
        }
        // bottom straight, left to right
        for i in 0..n_straight {
            let x = -hx + 2.0 * hx * i as f64 / n_straight as f64;
            pts.push([x, -r, w]);
        }
        // right semicircle
        for i in 0..n_arc {
            let a = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * i as f64 / n_arc as f64;
            pts.push([hx + r * a.cos(), r * a.sin(), w]);
        }
        Track::new(pts, true).expect("oval waypoints are valid")
    }

    /// Closed ring with three gentle radial waves, entirely inside the
    /// annulus visible from an overhead station.
    pub fn wavy_ring() -> Track {
        let n = 48;
        let pts = (0..n)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                let r = 1.8 + 0.22 * (3.0 * a).sin();
                [r * a.cos(), r * a.sin(), 0.22]
            })
            .collect();
        Track::new(pts, true).expect("ring waypoints are valid")
    }
}
