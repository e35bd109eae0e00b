//! Driving records, JSONL IO, waypoint geometry, GPS noise, K-means and the
//! synthetic multi-region generator.

mod generator;
mod geometry;
mod kmeans;

pub use generator::{
    generate_region_dataset, maneuver_for, plan, render_scene, sample_scene, scene_trajectory, GeneratorOptions,
    Handedness, Light, Maneuver, RegionProfile, Scene, TrajectoryPlan,
};
pub use geometry::{
    extract_waypoints, from_ego_frame, infer_command, mean_curvature, menger_curvature, to_ego_frame, Pose, PoseTrace,
    WAYPOINT_DT,
};
pub use kmeans::{kmeans_cluster, lloyd, KMeansResult};

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{AnydError, Result};
use crate::planner::{Command, WaypointSet};

/// Default curvature threshold separating turns from lane-following, in 1/m.
pub const DEFAULT_KAPPA_THRESH: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrivingRecord {
    pub id: String,
    pub shape: [usize; 3],
    pub image: Vec<f64>,
    pub speed: f64,
    pub command: Command,
    pub region_id: usize,
    pub region_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub waypoints: Option<WaypointSet>,
    pub tags: Vec<String>,
}

impl DrivingRecord {
    pub fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if n == 0 || n != self.image.len() {
            return Err(AnydError::Data(format!(
                "{}: shape {:?} does not match {} values",
                self.id,
                self.shape,
                self.image.len()
            )));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(AnydError::Data(format!("{}: image values must lie in [0, 1]", self.id)));
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) {
            return Err(AnydError::Data(format!("{}: invalid speed {}", self.id, self.speed)));
        }
        if let Some(w) = &self.waypoints {
            if w.iter().flatten().any(|v| !v.is_finite()) {
                return Err(AnydError::Data(format!("{}: non-finite waypoint", self.id)));
            }
        }
        Ok(())
    }

    pub fn is_labeled(&self) -> bool {
        self.waypoints.is_some()
    }

    pub fn image_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.to_vec(), self.image.clone())
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }
}

pub fn parse_records<R: BufRead>(reader: R) -> Result<Vec<DrivingRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DrivingRecord =
            serde_json::from_str(&line).map_err(|e| AnydError::Format { line: i + 1, reason: e.to_string() })?;
        rec.validate().map_err(|e| AnydError::Format { line: i + 1, reason: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<DrivingRecord>> {
    parse_records(BufReader::new(std::fs::File::open(path)?))
}

pub fn write_records(path: &Path, records: &[DrivingRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Adds i.i.d. `N(0, σ²)` noise to every waypoint coordinate of labeled records,
/// in record order. `σ = 0` returns the records untouched.
pub fn inject_gps_noise(records: &[DrivingRecord], sigma: f64, seed: u64) -> Result<Vec<DrivingRecord>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(AnydError::invalid(format!("noise sigma must be nonnegative, got {sigma}")));
    }
    let mut out = records.to_vec();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| AnydError::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for r in &mut out {
        if let Some(w) = &mut r.waypoints {
            for v in w.iter_mut().flatten() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, labeled: bool) -> DrivingRecord {
        DrivingRecord {
            id: id.into(),
            shape: [2, 2, 1],
            image: vec![0.0, 0.1, 1.0 / 3.0, 1.0],
            speed: 7.123456789012345,
            command: Command::Right,
            region_id: 1,
            region_name: "b".into(),
            waypoints: labeled.then_some([[0.1, 0.2], [0.3, 1e-17], [-2.5, 3.0], [4.0, 5.0], [6.0, 7.0]]),
            tags: vec!["right".into()],
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let recs = vec![record("a", true), record("b", false)];
        write_records(&path, &recs).unwrap();
        assert_eq!(read_records(&path).unwrap(), recs);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.lines().nth(1).unwrap().contains("waypoints"));
        assert!(text.starts_with("{\"id\":\"a\",\"shape\":[2,2,1],\"image\":"));
    }

    #[test]
    fn empty_and_malformed() {
        assert!(parse_records("".as_bytes()).unwrap().is_empty());
        let good = serde_json::to_string(&record("a", true)).unwrap();
        let text = format!("{good}\n{{\"id\": 3}}\n");
        match parse_records(text.as_bytes()) {
            Err(AnydError::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let extra = good.replacen("{", "{\"bogus\":1,", 1);
        assert!(parse_records(extra.as_bytes()).is_err());
        let bad_shape = good.replace("[2,2,1]", "[2,2,2]");
        assert!(matches!(parse_records(bad_shape.as_bytes()), Err(AnydError::Format { line: 1, .. })));
    }

    #[test]
    fn unlabeled_record_parses() {
        let text = serde_json::to_string(&record("u", false)).unwrap();
        let recs = parse_records(text.as_bytes()).unwrap();
        assert!(!recs[0].is_labeled());
    }

    #[test]
    fn zero_noise_is_identity() {
        let recs = vec![record("a", true), record("b", false)];
        assert_eq!(inject_gps_noise(&recs, 0.0, 3).unwrap(), recs);
        assert!(inject_gps_noise(&recs, -1.0, 3).is_err());
        let noisy = inject_gps_noise(&recs, 1.0, 3).unwrap();
        assert_ne!(noisy[0].waypoints, recs[0].waypoints);
        assert_eq!(noisy[0].image, recs[0].image);
        assert_eq!(noisy[1], recs[1]);
    }

    #[test]
    fn noise_statistics() {
        let base: Vec<DrivingRecord> = (0..10_000).map(|i| record(&i.to_string(), true)).collect();
        for sigma in [1.0, 3.0] {
            let noisy = inject_gps_noise(&base, sigma, 11).unwrap();
            let diffs: Vec<f64> = noisy
                .iter()
                .zip(&base)
                .flat_map(|(a, b)| {
                    let (wa, wb) = (a.waypoints.unwrap(), b.waypoints.unwrap());
                    (0..10).map(move |k| wa[k / 2][k % 2] - wb[k / 2][k % 2])
                })
                .collect();
            assert_eq!(diffs.len(), 100_000);
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
            assert!((var.sqrt() / sigma - 1.0).abs() < 0.01);
        }
    }
}
