//! Schematic top-down scenes whose observations are shared across regions for
//! the same scene index, while the driven trajectory follows each region's
//! traffic rules.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datakit::geometry::{extract_waypoints, from_ego_frame, infer_command, Pose, PoseTrace};
use crate::datakit::{DrivingRecord, DEFAULT_KAPPA_THRESH};
use crate::error::{AnydError, Result};
use crate::planner::Command;
use crate::seed::derive_rng;

/// Upper bound on approach speed through a turn, m/s.
const TURN_SPEED_CAP: f64 = 5.0;
const NEAR_FACTOR: f64 = 0.5;
const FAR_FACTOR: f64 = 1.5;
const MIN_RADIUS: f64 = 2.0;
const TRACE_DT: f64 = 0.1;
const TRACE_LEN: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Handedness {
    Right,
    Left,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionProfile {
    pub name: String,
    pub handedness: Handedness,
    pub turn_on_red_allowed: bool,
    /// m/s
    pub speed_limit: f64,
    /// m
    pub turn_radius_mean: f64,
    pub turn_radius_std: f64,
    /// In `[0, 1]`; more aggressive drivers brake later at red lights.
    pub yield_aggressiveness: f64,
}

impl RegionProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AnydError::invalid(format!("profile {}: {m}", self.name)));
        if self.name.is_empty() {
            return Err(AnydError::invalid("profile name must be nonempty"));
        }
        if !(self.speed_limit > 0.0 && self.speed_limit.is_finite()) {
            return bad("speed_limit must be positive");
        }
        if !(self.turn_radius_mean > 0.0 && self.turn_radius_mean.is_finite()) {
            return bad("turn_radius_mean must be positive");
        }
        if !(self.turn_radius_std >= 0.0 && self.turn_radius_std.is_finite()) {
            return bad("turn_radius_std must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.yield_aggressiveness) {
            return bad("yield_aggressiveness must lie in [0, 1]");
        }
        Ok(())
    }

    /// Four regions with mixed handedness and red-light rules.
    pub fn desk_set() -> Vec<RegionProfile> {
        let p = |name: &str, handedness, tor, limit, radius, yld| RegionProfile {
            name: name.into(),
            handedness,
            turn_on_red_allowed: tor,
            speed_limit: limit,
            turn_radius_mean: radius,
            turn_radius_std: 1.0,
            yield_aggressiveness: yld,
        };
        vec![
            p("boston", Handedness::Right, true, 11.2, 10.0, 0.5),
            p("singapore", Handedness::Left, false, 13.9, 11.0, 0.3),
            p("new_york", Handedness::Right, false, 11.2, 9.0, 0.8),
            p("pittsburgh", Handedness::Right, true, 15.6, 12.0, 0.4),
        ]
    }

    /// Two regions with identical observation statistics and opposite rules.
    pub fn conflict_pair() -> [RegionProfile; 2] {
        let base = RegionProfile {
            name: "east".into(),
            handedness: Handedness::Right,
            turn_on_red_allowed: true,
            speed_limit: 12.0,
            turn_radius_mean: 10.0,
            turn_radius_std: 0.0,
            yield_aggressiveness: 0.5,
        };
        let west = RegionProfile {
            name: "west".into(),
            handedness: Handedness::Left,
            turn_on_red_allowed: false,
            ..base.clone()
        };
        [base, west]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Light {
    Green,
    Red,
}

/// Turn geometry relative to the side of the road the region drives on: the
/// near turn does not cross oncoming traffic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Maneuver {
    Straight,
    NearTurn,
    FarTurn,
}

pub fn maneuver_for(command: Command, handedness: Handedness) -> Maneuver {
    match (command, handedness) {
        (Command::Forward, _) => Maneuver::Straight,
        (Command::Right, Handedness::Right) | (Command::Left, Handedness::Left) => Maneuver::NearTurn,
        _ => Maneuver::FarTurn,
    }
}

/// Everything about a scene that is shared by every region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scene {
    pub command: Command,
    pub light: Light,
    /// In `[0, 1)`; scales the approach speed.
    pub speed_frac: f64,
    /// Standard-normal draw applied to each region's turn radius spread.
    pub radius_z: f64,
    /// In `[0, 1)`; vertical position of the crossing road in the raster.
    pub crossing: f64,
    pub origin: [f64; 2],
    pub heading: f64,
    /// Seed for raster texture.
    pub texture_seed: u64,
}

pub fn sample_scene(seed: u64, index: u64) -> Scene {
    let mut rng = derive_rng(seed, &[index]);
    let command = Command::ALL[rng.random_range(0..3)];
    let light = if rng.random_bool(0.35) { Light::Red } else { Light::Green };
    Scene {
        command,
        light,
        speed_frac: rng.random(),
        radius_z: rng.sample(StandardNormal),
        crossing: rng.random(),
        origin: [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)],
        heading: rng.random_range(-PI..PI),
        texture_seed: rng.random(),
    }
}

/// How one region drives one scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryPlan {
    pub maneuver: Maneuver,
    /// +1 for a left turn, −1 for right, 0 straight.
    pub turn_sign: f64,
    pub radius: f64,
    /// Speed at the first pose, m/s.
    pub speed: f64,
    /// Time to come to rest, when braking for a red light.
    pub stop_time: Option<f64>,
    pub turned_on_red: bool,
}

fn turn_sign(maneuver: Maneuver, handedness: Handedness) -> f64 {
    match (maneuver, handedness) {
        (Maneuver::Straight, _) => 0.0,
        (Maneuver::NearTurn, Handedness::Right) | (Maneuver::FarTurn, Handedness::Left) => -1.0,
        _ => 1.0,
    }
}

pub fn plan(profile: &RegionProfile, scene: &Scene, maneuver: Maneuver, kappa_thresh: f64) -> TrajectoryPlan {
    let base = (profile.turn_radius_mean + profile.turn_radius_std * scene.radius_z).max(MIN_RADIUS / NEAR_FACTOR);
    // keep the curvature of far turns clearly above the command threshold
    let max_radius = 1.0 / (1.2 * kappa_thresh);
    let radius = match maneuver {
        Maneuver::Straight => f64::INFINITY,
        Maneuver::NearTurn => (base * NEAR_FACTOR).min(max_radius),
        Maneuver::FarTurn => (base * FAR_FACTOR).min(max_radius),
    };
    let speed = match maneuver {
        Maneuver::Straight => profile.speed_limit * (0.5 + 0.5 * scene.speed_frac),
        _ => profile.speed_limit.min(TURN_SPEED_CAP) * (0.6 + 0.4 * scene.speed_frac),
    };
    let goes_on_red = maneuver == Maneuver::NearTurn && profile.turn_on_red_allowed;
    let stop_time = (scene.light == Light::Red && !goes_on_red).then_some(2.0 - 0.5 * profile.yield_aggressiveness);
    TrajectoryPlan {
        maneuver,
        turn_sign: turn_sign(maneuver, profile.handedness),
        radius,
        speed,
        stop_time,
        turned_on_red: scene.light == Light::Red && goes_on_red,
    }
}

/// Distance travelled after `t` seconds: constant speed, or constant
/// deceleration to rest at the stop time.
fn travelled(p: &TrajectoryPlan, t: f64) -> f64 {
    match p.stop_time {
        None => p.speed * t,
        Some(ts) => {
            let t = t.min(ts);
            p.speed * t - p.speed * t * t / (2.0 * ts)
        }
    }
}

/// World-frame trace of a constant-curvature path following `plan`.
pub fn scene_trajectory(scene: &Scene, plan: &TrajectoryPlan) -> Result<PoseTrace> {
    let ego = Pose { t: 0.0, x: scene.origin[0], y: scene.origin[1], heading: scene.heading };
    let n = (TRACE_LEN / TRACE_DT).round() as usize;
    let poses = (0..=n)
        .map(|i| {
            let t = i as f64 * TRACE_DT;
            let s = travelled(plan, t);
            let (local, turn) = if plan.turn_sign == 0.0 {
                ([0.0, s], 0.0)
            } else {
                let a = s / plan.radius;
                // the center sits at (−sign·R, 0) in the ego frame; right is +x
                let x = -plan.turn_sign * plan.radius * (1.0 - a.cos());
                ([x, plan.radius * a.sin()], plan.turn_sign * a)
            };
            let w = from_ego_frame(local, &ego);
            Pose { t, x: w[0], y: w[1], heading: scene.heading + turn }
        })
        .collect();
    PoseTrace::new(poses)
}

/// Schematic raster in `[0, 1]`: textured ground, a vertical road, a crossing
/// road, and a signal block in the top-left corner.
pub fn render_scene(scene: &Scene, h: usize, w: usize) -> Vec<f64> {
    let mut rng = derive_rng(scene.texture_seed, &[]);
    let mut img = vec![0.0; h * w * 3];
    let road = (w * 7 / 20, w * 13 / 20);
    let band = (h / 4).max(1);
    let cross_top = ((h / 2) as f64 * scene.crossing) as usize;
    let signal = ((h / 8).max(1), (w / 16).max(1));
    for y in 0..h {
        for x in 0..w {
            let on_road = (road.0..road.1).contains(&x) || (cross_top..cross_top + band).contains(&y);
            let base = if on_road { 0.55 } else { 0.25 };
            let px = &mut img[(y * w + x) * 3..(y * w + x + 1) * 3];
            for v in px.iter_mut() {
                *v = base + rng.random_range(-0.05..0.05);
            }
            if y < signal.0 && x < signal.1 {
                px.copy_from_slice(match scene.light {
                    Light::Red => &[1.0, 0.0, 0.0],
                    Light::Green => &[0.0, 1.0, 0.0],
                });
            }
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorOptions {
    pub image_h: usize,
    pub image_w: usize,
    pub kappa_thresh: f64,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions { image_h: 36, image_w: 64, kappa_thresh: DEFAULT_KAPPA_THRESH }
    }
}

fn make_record(
    profile: &RegionProfile,
    region_id: usize,
    index: usize,
    seed: u64,
    opts: &GeneratorOptions,
) -> Result<DrivingRecord> {
    let scene = sample_scene(seed, index as u64);
    let maneuver = maneuver_for(scene.command, profile.handedness);
    let p = plan(profile, &scene, maneuver, opts.kappa_thresh);
    let trace = scene_trajectory(&scene, &p)?;
    let waypoints = extract_waypoints(&trace, 0.0)?;
    let inferred = infer_command(&waypoints, opts.kappa_thresh);
    if inferred != scene.command {
        return Err(AnydError::Data(format!(
            "{}-{index}: generated {} trajectory reads as {inferred}",
            profile.name, scene.command
        )));
    }
    let mut tags = vec![scene.command.as_str().to_string()];
    if scene.light == Light::Red {
        tags.push("red_light".into());
    }
    if p.turned_on_red {
        tags.push("turn_on_red".into());
    }
    if p.speed >= 0.9 * profile.speed_limit {
        tags.push("high_speed".into());
    }
    Ok(DrivingRecord {
        id: format!("{}-{index:06}", profile.name),
        shape: [opts.image_h, opts.image_w, 3],
        image: render_scene(&scene, opts.image_h, opts.image_w),
        speed: p.speed,
        command: scene.command,
        region_id,
        region_name: profile.name.clone(),
        waypoints: Some(waypoints),
        tags,
    })
}

/// `n_per_region` records per profile. Record `k` of every region observes the
/// same scene (image, speed, command); only the trajectory differs.
pub fn generate_region_dataset(
    profiles: &[RegionProfile],
    n_per_region: usize,
    seed: u64,
    opts: &GeneratorOptions,
) -> Result<Vec<DrivingRecord>> {
    if profiles.is_empty() {
        return Err(AnydError::invalid("at least one region profile is required"));
    }
    for p in profiles {
        p.validate()?;
    }
    let mut names: Vec<&str> = profiles.iter().map(|p| p.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != profiles.len() {
        return Err(AnydError::invalid("profile names must be unique"));
    }
    if opts.image_h < 4 || opts.image_w < 4 || !(opts.kappa_thresh > 0.0) {
        return Err(AnydError::invalid("generator needs images of at least 4×4 and a positive curvature threshold"));
    }
    (0..profiles.len() * n_per_region)
        .into_par_iter()
        .map(|i| make_record(&profiles[i / n_per_region], i / n_per_region, i % n_per_region, seed, opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::ade;

    fn opts() -> GeneratorOptions {
        GeneratorOptions { image_h: 16, image_w: 32, kappa_thresh: 0.05 }
    }

    #[test]
    fn deterministic() {
        let profiles = RegionProfile::desk_set();
        let a = generate_region_dataset(&profiles, 20, 4, &opts()).unwrap();
        let b = generate_region_dataset(&profiles, 20, 4, &opts()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 80);
        assert_eq!(a[25].id, "singapore-000005");
    }

    #[test]
    fn commands_close_under_inference() {
        let profiles = RegionProfile::desk_set();
        let recs = generate_region_dataset(&profiles, 300, 5, &opts()).unwrap();
        for r in &recs {
            r.validate().unwrap();
            assert_eq!(infer_command(&r.waypoints.unwrap(), 0.05), r.command, "{}", r.id);
            assert!(r.has_tag(r.command.as_str()));
        }
        for tag in ["left", "forward", "right", "red_light", "turn_on_red", "high_speed"] {
            assert!(recs.iter().any(|r| r.has_tag(tag)), "{tag}");
        }
    }

    #[test]
    fn left_handed_mirrors_right_handed() {
        let [right, _] = RegionProfile::conflict_pair();
        let left = RegionProfile { handedness: Handedness::Left, ..right.clone() };
        for index in 0..30 {
            let scene = sample_scene(9, index);
            for m in [Maneuver::Straight, Maneuver::NearTurn, Maneuver::FarTurn] {
                let wr =
                    extract_waypoints(&scene_trajectory(&scene, &plan(&right, &scene, m, 0.05)).unwrap(), 0.0).unwrap();
                let wl =
                    extract_waypoints(&scene_trajectory(&scene, &plan(&left, &scene, m, 0.05)).unwrap(), 0.0).unwrap();
                for (a, b) in wr.iter().zip(&wl) {
                    assert!((a[0] + b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn conflict_pair_is_ambiguous() {
        let pair = RegionProfile::conflict_pair();
        let n = 400;
        let recs = generate_region_dataset(&pair, n, 6, &opts()).unwrap();
        let mut total = 0.0;
        let mut ambiguous = 0;
        for k in 0..n {
            let (a, b) = (&recs[k], &recs[n + k]);
            assert_eq!(a.image, b.image);
            assert_eq!((a.speed, a.command), (b.speed, b.command));
            let d = ade(&a.waypoints.unwrap(), &b.waypoints.unwrap());
            if d > 1e-9 {
                total += d;
                ambiguous += 1;
            }
        }
        let mean = total / ambiguous as f64;
        assert!(ambiguous > n / 2, "{ambiguous}");
        assert!(mean >= 1.0, "mean pairwise ADE {mean}");
    }

    #[test]
    fn red_light_rules() {
        let [east, west] = RegionProfile::conflict_pair();
        let mut scene = sample_scene(1, 0);
        scene.light = Light::Red;
        let near = plan(&east, &scene, Maneuver::NearTurn, 0.05);
        assert!(near.turned_on_red && near.stop_time.is_none());
        let banned = plan(&west, &scene, Maneuver::NearTurn, 0.05);
        assert!(!banned.turned_on_red && banned.stop_time.is_some());
        assert!(plan(&east, &scene, Maneuver::Straight, 0.05).stop_time.is_some());
        assert!(plan(&east, &scene, Maneuver::FarTurn, 0.05).stop_time.is_some());
    }

    #[test]
    fn rejects_bad_profiles() {
        let mut p = RegionProfile::desk_set();
        p[0].speed_limit = 0.0;
        assert!(generate_region_dataset(&p, 1, 0, &opts()).is_err());
        assert!(generate_region_dataset(&[], 1, 0, &opts()).is_err());
        let dup = vec![RegionProfile::desk_set()[0].clone(); 2];
        assert!(generate_region_dataset(&dup, 1, 0, &opts()).is_err());
    }

    #[test]
    fn images_in_range_and_signal_visible() {
        let scene = Scene { light: Light::Red, ..sample_scene(2, 3) };
        let img = render_scene(&scene, 16, 32);
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(&img[..3], &[1.0, 0.0, 0.0]);
    }
}
