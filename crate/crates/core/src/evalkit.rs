//! Displacement metrics, per-city balanced averages and report emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datakit::DrivingRecord;
use crate::error::{AnydError, Result};
use crate::planner::{forward_all_branches, select_command, ModelParams, Observation, WaypointSet};

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean Euclidean distance over the five points.
pub fn ade(pred: &WaypointSet, gt: &WaypointSet) -> f64 {
    pred.iter().zip(gt).map(|(&p, &g)| dist(p, g)).sum::<f64>() / pred.len() as f64
}

/// Euclidean distance at the final point.
pub fn fde(pred: &WaypointSet, gt: &WaypointSet) -> f64 {
    dist(pred[pred.len() - 1], gt[gt.len() - 1])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricStats {
    pub ade: f64,
    pub fde: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub per_city: BTreeMap<String, MetricStats>,
    pub balanced_ade: f64,
    pub balanced_fde: f64,
    pub per_event: BTreeMap<String, MetricStats>,
    pub config_fingerprint: String,
    pub model_fingerprint: String,
}

/// Hex SHA-256.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One scored record.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordScore {
    pub id: String,
    pub city: String,
    pub tags: Vec<String>,
    pub ade: f64,
    pub fde: f64,
}

fn stats(scores: &[&RecordScore]) -> MetricStats {
    let n = scores.len();
    MetricStats {
        ade: scores.iter().map(|s| s.ade).sum::<f64>() / n as f64,
        fde: scores.iter().map(|s| s.fde).sum::<f64>() / n as f64,
        n,
    }
}

/// Aggregates record scores into per-city and per-tag means and the
/// unweighted mean over cities. Scores are summed in record-id order.
/// `tags` restricts the event breakdown; `None` reports every tag seen.
pub fn summarize(scores: &[RecordScore], tags: Option<&[String]>) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(AnydError::Data("no labeled records to evaluate".into()));
    }
    let mut sorted: Vec<&RecordScore> = scores.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut cities: BTreeMap<String, Vec<&RecordScore>> = BTreeMap::new();
    let mut events: BTreeMap<String, Vec<&RecordScore>> = BTreeMap::new();
    for s in sorted {
        cities.entry(s.city.clone()).or_default().push(s);
        for t in &s.tags {
            if tags.is_none_or(|keep| keep.contains(t)) {
                events.entry(t.clone()).or_default().push(s);
            }
        }
    }
    let per_city: BTreeMap<String, MetricStats> = cities.iter().map(|(c, v)| (c.clone(), stats(v))).collect();
    let per_event = events.iter().map(|(t, v)| (t.clone(), stats(v))).collect();
    let k = per_city.len() as f64;
    Ok(MetricsReport {
        balanced_ade: per_city.values().map(|s| s.ade).sum::<f64>() / k,
        balanced_fde: per_city.values().map(|s| s.fde).sum::<f64>() / k,
        per_city,
        per_event,
        config_fingerprint: String::new(),
        model_fingerprint: String::new(),
    })
}

/// Scores every labeled record, predicting with the ground-truth command's branch.
pub fn score_records(model: &ModelParams, data: &[DrivingRecord]) -> Result<Vec<RecordScore>> {
    data.par_iter()
        .filter(|r| r.is_labeled())
        .map(|r| {
            let region = model
                .config
                .region_index(&r.region_name)
                .ok_or_else(|| AnydError::Data(format!("{}: region {} unknown to the model", r.id, r.region_name)))?;
            let image = r.image_tensor()?;
            let pred = forward_all_branches(model, &Observation { image: &image, speed: r.speed, region })?;
            let chosen = select_command(&pred.branches, r.command);
            let gt = r.waypoints.as_ref().expect("filtered to labeled");
            Ok(RecordScore {
                id: r.id.clone(),
                city: r.region_name.clone(),
                tags: r.tags.clone(),
                ade: ade(&chosen, gt),
                fde: fde(&chosen, gt),
            })
        })
        .collect()
}

/// Evaluates a model; fingerprints cover the serialized model and its config.
pub fn evaluate(model: &ModelParams, data: &[DrivingRecord], tags: Option<&[String]>) -> Result<MetricsReport> {
    let scores = score_records(model, data)?;
    let mut report = summarize(&scores, tags)?;
    report.model_fingerprint = fingerprint(&model.to_bytes());
    report.config_fingerprint = fingerprint(&serde_json::to_vec(&model.config)?);
    Ok(report)
}

pub fn csv_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

/// Writes the report as JSON at `path` and a `city,ade,fde,n` CSV next to it.
pub fn emit_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    std::fs::write(path, json)?;
    let mut w = csv::Writer::from_path(csv_sidecar_path(path)).map_err(|e| AnydError::Data(e.to_string()))?;
    w.write_record(["city", "ade", "fde", "n"]).map_err(|e| AnydError::Data(e.to_string()))?;
    for (city, s) in &report.per_city {
        w.write_record([city.clone(), s.ade.to_string(), s.fde.to_string(), s.n.to_string()])
            .map_err(|e| AnydError::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn offset(dx: f64, dy: f64) -> WaypointSet {
        [[dx, dy]; 5]
    }

    fn score(id: &str, city: &str, ade: f64, tags: &[&str]) -> RecordScore {
        RecordScore {
            id: id.into(),
            city: city.into(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
            ade,
            fde: 2.0 * ade,
        }
    }

    #[test]
    fn pair_metrics() {
        let zero = offset(0.0, 0.0);
        assert_eq!(ade(&zero, &zero), 0.0);
        assert_eq!(fde(&zero, &zero), 0.0);
        assert_eq!(ade(&offset(1.0, 0.0), &zero), 1.0);
        let mut p = zero;
        p[2] = [3.0, 4.0];
        assert_eq!(ade(&p, &zero), 1.0);
        assert_eq!(fde(&p, &zero), 0.0);
        let mut q = zero;
        q[4] = [0.0, 2.0];
        assert_eq!(fde(&q, &zero), 2.0);
    }

    #[test]
    fn balanced_ignores_counts() {
        let mut scores: Vec<RecordScore> = (0..1000).map(|i| score(&format!("a{i:04}"), "a", 1.0, &[])).collect();
        scores.extend((0..10).map(|i| score(&format!("b{i}"), "b", 2.0, &[])));
        let r = summarize(&scores, None).unwrap();
        assert_eq!(r.balanced_ade, 1.5);
        assert_eq!(r.per_city["a"].n, 1000);
        assert!(r.per_event.is_empty());
    }

    #[test]
    fn single_record() {
        let r = summarize(&[score("x", "c", 0.7, &["left"])], None).unwrap();
        assert_eq!(r.balanced_ade, 0.7);
        assert_eq!(r.balanced_fde, 1.4);
        assert_eq!(r.per_event["left"], MetricStats { ade: 0.7, fde: 1.4, n: 1 });
    }

    #[test]
    fn per_tag_brute_force() {
        let scores: Vec<RecordScore> = (0..50)
            .map(|i| {
                let tags: &[&str] = match i % 3 {
                    0 => &["left", "red_light"],
                    1 => &["forward"],
                    _ => &["red_light"],
                };
                score(&format!("{i:03}"), if i % 2 == 0 { "p" } else { "q" }, (i as f64 * 0.37).sin().abs(), tags)
            })
            .collect();
        let r = summarize(&scores, None).unwrap();
        for (tag, s) in &r.per_event {
            let hits: Vec<f64> = scores.iter().filter(|x| x.tags.contains(tag)).map(|x| x.ade).collect();
            let mean = hits.iter().sum::<f64>() / hits.len() as f64;
            assert_eq!(s.n, hits.len());
            assert!((s.ade - mean).abs() < 1e-12);
        }
        let only = vec!["left".to_string()];
        let r = summarize(&scores, Some(&only)).unwrap();
        assert_eq!(r.per_event.keys().collect::<Vec<_>>(), vec!["left"]);
        let mut rev = scores.clone();
        rev.reverse();
        assert_eq!(summarize(&rev, None).unwrap(), summarize(&scores, None).unwrap());
    }

    #[test]
    fn empty_is_error() {
        assert!(summarize(&[], None).is_err());
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let scores = vec![score("1", "zeta", 1.0, &[]), score("2", "alpha", 0.25, &[])];
        let report = summarize(&scores, None).unwrap();
        emit_report(&report, &path).unwrap();
        assert_eq!(read_report(&path).unwrap(), report);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"per_event\": {}"));
        let csv = std::fs::read_to_string(csv_sidecar_path(&path)).unwrap();
        assert_eq!(csv, "city,ade,fde,n\nalpha,0.25,0.5,1\nzeta,1,2,1\n");
    }

    #[test]
    fn fingerprint_is_sha256() {
        assert_eq!(fingerprint(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    proptest! {
        #[test]
        fn ade_bounds(p in proptest::array::uniform5(proptest::array::uniform2(-50.0..50.0f64)),
                      g in proptest::array::uniform5(proptest::array::uniform2(-50.0..50.0f64))) {
            let d: Vec<f64> = p.iter().zip(&g).map(|(&a, &b)| dist(a, b)).collect();
            let a = ade(&p, &g);
            let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = d.iter().copied().fold(0.0, f64::max);
            prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
            prop_assert!(fde(&p, &g) >= 0.0);
        }
    }
}
