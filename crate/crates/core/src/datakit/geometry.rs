use std::f64::consts::FRAC_PI_2;

use crate::error::{AnydError, Result};
use crate::planner::{Command, WaypointSet, HORIZON};

/// Spacing between consecutive waypoints, in seconds.
pub const WAYPOINT_DT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    /// Radians, counterclockwise from +x.
    pub heading: f64,
}

/// World-frame poses with strictly increasing timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseTrace {
    poses: Vec<Pose>,
}

impl PoseTrace {
    pub fn new(poses: Vec<Pose>) -> Result<Self> {
        if poses.is_empty() {
            return Err(AnydError::Data("empty pose trace".into()));
        }
        if poses.iter().any(|p| ![p.t, p.x, p.y, p.heading].iter().all(|v| v.is_finite())) {
            return Err(AnydError::Data("non-finite pose".into()));
        }
        if poses.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(AnydError::Data("pose timestamps must strictly increase".into()));
        }
        Ok(PoseTrace { poses })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    /// Linear interpolation of position and (shortest-arc) heading at `t`.
    pub fn at(&self, t: f64) -> Result<Pose> {
        let (first, last) = (self.poses[0], *self.poses.last().unwrap());
        const SLACK: f64 = 1e-9;
        if t < first.t - SLACK || t > last.t + SLACK {
            return Err(AnydError::Data(format!("time {t} outside trace [{}, {}]", first.t, last.t)));
        }
        let k = self.poses.partition_point(|p| p.t <= t);
        if k == 0 {
            return Ok(Pose { t, ..first });
        }
        if k == self.poses.len() {
            return Ok(Pose { t, ..last });
        }
        let (a, b) = (self.poses[k - 1], self.poses[k]);
        let u = (t - a.t) / (b.t - a.t);
        let dh = wrap_angle(b.heading - a.heading);
        Ok(Pose { t, x: a.x + u * (b.x - a.x), y: a.y + u * (b.y - a.y), heading: a.heading + u * dh })
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r - two_pi
    } else {
        r
    }
}

/// Translates by the ego position and rotates by `−(heading − π/2)`, so the
/// ego's forward direction becomes `+y` and its right `+x`.
pub fn to_ego_frame(point: [f64; 2], ego: &Pose) -> [f64; 2] {
    let (dx, dy) = (point[0] - ego.x, point[1] - ego.y);
    let phi = -(ego.heading - FRAC_PI_2);
    let (s, c) = phi.sin_cos();
    [c * dx - s * dy, s * dx + c * dy]
}

/// Inverse of [`to_ego_frame`].
pub fn from_ego_frame(point: [f64; 2], ego: &Pose) -> [f64; 2] {
    let phi = ego.heading - FRAC_PI_2;
    let (s, c) = phi.sin_cos();
    [c * point[0] - s * point[1] + ego.x, s * point[0] + c * point[1] + ego.y]
}

/// Positions at `t0 + 0.5, …, t0 + 2.5` s in the ego frame of the pose at `t0`.
pub fn extract_waypoints(trace: &PoseTrace, t0: f64) -> Result<WaypointSet> {
    let last = trace.poses().last().unwrap().t;
    let end = t0 + WAYPOINT_DT * HORIZON as f64;
    if end > last + 1e-9 {
        return Err(AnydError::Data(format!("trace ends at {last}, need {end}")));
    }
    let ego = trace.at(t0)?;
    let mut w = [[0.0; 2]; HORIZON];
    for (k, p) in w.iter_mut().enumerate() {
        let pose = trace.at(t0 + WAYPOINT_DT * (k + 1) as f64)?;
        *p = to_ego_frame([pose.x, pose.y], &ego);
    }
    Ok(w)
}

/// Signed curvature of the circle through three points, positive when the
/// path turns counterclockwise. `None` when any two points nearly coincide.
pub fn menger_curvature(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<f64> {
    let d = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    let (ab, bc, ac) = (d(a, b), d(b, c), d(a, c));
    if ab < 1e-9 || bc < 1e-9 || ac < 1e-9 {
        return None;
    }
    let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
    Some(2.0 * cross / (ab * bc * ac))
}

/// Mean Menger curvature over the interior triples of the polyline that starts
/// at the ego origin and runs through the five waypoints.
pub fn mean_curvature(w: &WaypointSet) -> Option<f64> {
    let mut pts = vec![[0.0, 0.0]];
    pts.extend_from_slice(w);
    let ks: Vec<f64> = pts.windows(3).filter_map(|t| menger_curvature(t[0], t[1], t[2])).collect();
    if ks.is_empty() {
        None
    } else {
        Some(ks.iter().sum::<f64>() / ks.len() as f64)
    }
}

/// Leftward curvature above the threshold is Left, below its negative Right.
pub fn infer_command(w: &WaypointSet, kappa_thresh: f64) -> Command {
    match mean_curvature(w) {
        Some(k) if k > kappa_thresh => Command::Left,
        Some(k) if k < -kappa_thresh => Command::Right,
        _ => Command::Forward,
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use proptest::prelude::*;

    use super::*;

    fn trace(f: impl Fn(f64) -> Pose, until: f64) -> PoseTrace {
        let n = (until / 0.1).round() as usize;
        PoseTrace::new((0..=n).map(|i| f(i as f64 * 0.1)).collect()).unwrap()
    }

    #[test]
    fn straight_line() {
        let tr = trace(|t| Pose { t, x: 3.0, y: -1.0 + 10.0 * t, heading: FRAC_PI_2 }, 3.0);
        let w = extract_waypoints(&tr, 0.0).unwrap();
        for (k, p) in w.iter().enumerate() {
            assert!(p[0].abs() < 1e-12);
            assert!((p[1] - 5.0 * (k + 1) as f64).abs() < 1e-9);
        }
        assert_eq!(infer_command(&w, 0.05), Command::Forward);
    }

    #[test]
    fn stationary() {
        let tr = trace(|t| Pose { t, x: 1.0, y: 2.0, heading: 0.3 }, 3.0);
        let w = extract_waypoints(&tr, 0.0).unwrap();
        assert_eq!(w, [[0.0, 0.0]; 5]);
        assert_eq!(infer_command(&w, 0.05), Command::Forward);
    }

    #[test]
    fn quarter_arc_matches_analytic() {
        // left turn of radius 10 about (−10, 0) starting at the origin heading +y,
        // covering a quarter circle over the 2.5 s horizon
        let r = 10.0;
        let omega = (PI / 2.0) / 2.5;
        let tr = trace(
            |t| {
                let a = omega * t;
                Pose { t, x: -r + r * a.cos(), y: r * a.sin(), heading: FRAC_PI_2 + a }
            },
            3.0,
        );
        let w = extract_waypoints(&tr, 0.0).unwrap();
        for (k, p) in w.iter().enumerate() {
            let a = omega * 0.5 * (k + 1) as f64;
            let want = [-r + r * a.cos(), r * a.sin()];
            // chord interpolation error between 0.1 s samples is below 1e-9 only at
            // sample instants, which all waypoint times are
            assert!((p[0] - want[0]).abs() < 1e-9 && (p[1] - want[1]).abs() < 1e-9);
        }
        let k = mean_curvature(&w).unwrap();
        assert!((k - 0.1).abs() < 1e-9);
        assert_eq!(infer_command(&w, 0.05), Command::Left);
        let mirrored = w.map(|p| [-p[0], p[1]]);
        assert_eq!(infer_command(&mirrored, 0.05), Command::Right);
    }

    #[test]
    fn ego_frame_axes() {
        let ego = Pose { t: 0.0, x: 4.0, y: -2.0, heading: FRAC_PI_2 };
        assert_eq!(to_ego_frame([4.0, -2.0], &ego), [0.0, 0.0]);
        let p = to_ego_frame([4.0, 1.0], &ego);
        assert!(p[0].abs() < 1e-15 && (p[1] - 3.0).abs() < 1e-15);
        let east = Pose { heading: 0.0, ..ego };
        let p = to_ego_frame([4.0, -5.0], &east);
        assert!((p[0] - 3.0).abs() < 1e-12 && p[1].abs() < 1e-12);
    }

    #[test]
    fn insufficient_horizon() {
        let tr = trace(|t| Pose { t, x: 0.0, y: t, heading: FRAC_PI_2 }, 2.0);
        assert!(extract_waypoints(&tr, 0.0).is_err());
        assert!(PoseTrace::new(vec![Pose { t: 1.0, x: 0.0, y: 0.0, heading: 0.0 }; 2]).is_err());
    }

    #[test]
    fn menger_examples() {
        assert!((menger_curvature([1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((menger_curvature([-1.0, 0.0], [0.0, 1.0], [1.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(menger_curvature([0.0, 0.0], [1.0, 1.0], [2.0, 2.0]), Some(0.0));
        assert_eq!(menger_curvature([0.0, 0.0], [0.0, 0.0], [1.0, 0.0]), None);
    }

    proptest! {
        #[test]
        fn ego_round_trip(px in -100.0..100.0f64, py in -100.0..100.0f64,
                          ex in -100.0..100.0f64, ey in -100.0..100.0f64, h in -7.0..7.0f64) {
            let ego = Pose { t: 0.0, x: ex, y: ey, heading: h };
            let back = from_ego_frame(to_ego_frame([px, py], &ego), &ego);
            prop_assert!((back[0] - px).abs() < 1e-12 && (back[1] - py).abs() < 1e-12);
            let local = [px / 10.0, py / 10.0];
            let again = to_ego_frame(from_ego_frame(local, &ego), &ego);
            prop_assert!((again[0] - local[0]).abs() < 1e-12 && (again[1] - local[1]).abs() < 1e-12);
        }

        #[test]
        fn mirror_swaps_turns(pts in proptest::array::uniform5(proptest::array::uniform2(-30.0..30.0f64))) {
            let mirrored = pts.map(|p| [-p[0], p[1]]);
            let a = infer_command(&pts, 0.05);
            let b = infer_command(&mirrored, 0.05);
            let swapped = match a {
                Command::Left => Command::Right,
                Command::Right => Command::Left,
                Command::Forward => Command::Forward,
            };
            prop_assert_eq!(b, swapped);
        }
    }
}
