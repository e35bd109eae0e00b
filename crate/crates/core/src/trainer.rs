//! Centralized SGD training and ensemble pseudo-labeling.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datakit::DrivingRecord;
use crate::diffcore::{sgd_step, SgdConfig, Tape, Tensor};
use crate::error::{AnydError, Result};
use crate::losses::{total_loss, LossWeights, SampleVars};
use crate::planner::{
    flatten_waypoints, forward_all_branches, forward_vars, select_command, Command, ModelConfig, ModelParams,
    Observation, WaypointSet, BRANCH_OUT,
};
use crate::seed::{derive_rng, derive_seed};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr0: f64,
    pub decay: f64,
    pub weight_decay: f64,
    pub loss: LossWeights,
    /// Global gradient norm cap applied before each SGD step.
    #[serde(default = "default_max_grad_norm")]
    pub max_grad_norm: Option<f64>,
    /// Filled from the run-level seed.
    #[serde(skip)]
    pub seed: u64,
}

fn default_max_grad_norm() -> Option<f64> {
    Some(1.0)
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 48,
            iterations: 7500,
            lr0: 0.1,
            decay: 0.997,
            weight_decay: 1e-3,
            loss: LossWeights::default(),
            max_grad_norm: default_max_grad_norm(),
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        TrainConfig { batch_size: 16, iterations: 1500, ..TrainConfig::paper() }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.lr0,
            decay_per_step: self.decay,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(AnydError::invalid("batch_size must be positive"));
        }
        self.sgd().validate()?;
        self.loss.validate()
    }

    /// `lr0 · decay^step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.sgd().lr_at(step)
    }
}

/// A labeled training example with the region resolved to a table row.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub speed: f64,
    pub command: Command,
    pub region: usize,
    pub target: [f64; BRANCH_OUT],
}

impl Sample {
    pub fn observation(&self) -> Observation<'_> {
        Observation { image: &self.image, speed: self.speed, region: self.region }
    }
}

fn region_of(config: &ModelConfig, r: &DrivingRecord) -> Result<usize> {
    config
        .region_index(&r.region_name)
        .ok_or_else(|| AnydError::Data(format!("{}: region {} unknown to the model", r.id, r.region_name)))
}

fn make_sample(config: &ModelConfig, r: &DrivingRecord, target: &WaypointSet) -> Result<Sample> {
    let image = r.image_tensor()?;
    if image.shape() != [config.image_h, config.image_w, config.image_ch] {
        return Err(AnydError::Data(format!("{}: image shape {:?} does not fit the model", r.id, image.shape())));
    }
    Ok(Sample {
        id: r.id.clone(),
        image,
        speed: r.speed,
        command: r.command,
        region: region_of(config, r)?,
        target: flatten_waypoints(target),
    })
}

/// Converts labeled records; unlabeled records are an error.
pub fn prepare_samples(config: &ModelConfig, records: &[DrivingRecord]) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| {
            let w = r.waypoints.as_ref().ok_or_else(|| AnydError::Data(format!("{}: record is unlabeled", r.id)))?;
            make_sample(config, r, w)
        })
        .collect()
}

/// Batch indices for one step, drawn uniformly with replacement from a
/// generator keyed by `(seed, step)`.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = derive_rng(seed, &[step as u64]);
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLosses {
    pub total: f64,
    pub bc: f64,
    pub cmd: f64,
    pub geo: Option<f64>,
}

/// Forward and backward over a batch; gradients are added into the store.
pub fn accumulate_gradients(
    model: &mut ModelParams,
    batch: &[&Sample],
    w: &LossWeights,
    include_geo: bool,
    step: usize,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let vars = model.store.bind(&mut tape);
    let mut samples = Vec::with_capacity(batch.len());
    for s in batch {
        let out = forward_vars(&mut tape, &vars, model, &s.observation())?;
        samples.push(SampleVars {
            branches: out.branches,
            head_weights: out.head_weights,
            target: s.target,
            command: s.command,
            region: s.region,
        });
    }
    let loss = total_loss(&mut tape, &samples, w, include_geo)?;
    let value = |v| tape.value(v).item();
    let losses =
        StepLosses { total: value(loss.total), bc: value(loss.bc), cmd: value(loss.cmd), geo: loss.geo.map(value) };
    if !losses.total.is_finite() {
        return Err(AnydError::Numeric { iteration: step, reason: format!("loss is {}", losses.total) });
    }
    let grads = tape.backward(loss.total)?;
    model.store.accumulate(&vars, &grads);
    Ok(losses)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub lr: f64,
    #[serde(rename = "L")]
    pub total: f64,
    #[serde(rename = "L_BC")]
    pub bc: f64,
    #[serde(rename = "L_cmd")]
    pub cmd: f64,
    #[serde(rename = "L_geo")]
    pub geo: Option<f64>,
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| AnydError::Data(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| AnydError::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// SGD over `samples` with the step schedule of `cfg`; `include_geo` selects
/// whether the geo-contrastive term is part of the loss.
pub fn train_on_samples(
    samples: &[Sample],
    cfg: &TrainConfig,
    init: ModelParams,
    include_geo: bool,
) -> Result<(ModelParams, Vec<TraceRow>)> {
    cfg.validate()?;
    if samples.is_empty() && cfg.iterations > 0 {
        return Err(AnydError::Data("no training samples".into()));
    }
    let sgd = cfg.sgd();
    let mut model = init;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let idx = batch_indices(cfg.seed, step, samples.len(), cfg.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let l = accumulate_gradients(&mut model, &batch, &cfg.loss, include_geo, step)?;
        sgd_step(model.store.as_mut_slice(), &sgd, step)?;
        trace.push(TraceRow { iteration: step, lr: sgd.lr_at(step), total: l.total, bc: l.bc, cmd: l.cmd, geo: l.geo });
    }
    Ok((model, trace))
}

/// Supervised training on pooled multi-region data with the full loss.
pub fn train_centralized(
    data: &[DrivingRecord],
    cfg: &TrainConfig,
    init: ModelParams,
) -> Result<(ModelParams, Vec<TraceRow>)> {
    let samples = prepare_samples(&init.config, data)?;
    train_on_samples(&samples, cfg, init, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    pub ensemble_size: usize,
    /// Pseudo-labels whose confidence exceeds this are dropped. When absent,
    /// the 80th percentile of confidences on a probe sample is used.
    pub variance_threshold: Option<f64>,
    pub lr0: f64,
    pub iterations: usize,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig { ensemble_size: 3, variance_threshold: None, lr0: 1e-3, iterations: 500 }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(AnydError::invalid("ensemble_size must be at least 2"));
        }
        if let Some(t) = self.variance_threshold {
            if !(t > 0.0 && t.is_finite()) {
                return Err(AnydError::invalid("variance_threshold must be positive"));
            }
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(AnydError::invalid("ssl lr0 must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub id: String,
    pub waypoints: WaypointSet,
    /// Mean over the ten coordinates of the across-model variance.
    pub confidence: f64,
}

/// Ensemble mean and confidence of waypoint predictions from several models.
pub fn ensemble_label(id: &str, predictions: &[WaypointSet]) -> PseudoLabel {
    let m = predictions.len() as f64;
    let flat: Vec<[f64; BRANCH_OUT]> = predictions.iter().map(flatten_waypoints).collect();
    // offsets from the first member, so agreeing members give exactly zero variance
    let base = flat[0];
    let mut shift = [0.0; BRANCH_OUT];
    for p in &flat {
        for k in 0..BRANCH_OUT {
            shift[k] += p[k] - base[k];
        }
    }
    shift.iter_mut().for_each(|a| *a /= m);
    let var_sum: f64 =
        (0..BRANCH_OUT).map(|k| flat.iter().map(|p| (p[k] - base[k] - shift[k]).powi(2)).sum::<f64>() / m).sum();
    let mut waypoints = [[0.0; 2]; 5];
    for (k, w) in waypoints.iter_mut().enumerate() {
        *w = [base[2 * k] + shift[2 * k], base[2 * k + 1] + shift[2 * k + 1]];
    }
    PseudoLabel { id: id.to_string(), waypoints, confidence: var_sum / BRANCH_OUT as f64 }
}

/// Labels every record with the ensemble mean of the commanded branch.
/// Output is sorted by record id.
pub fn label_all(models: &[ModelParams], records: &[DrivingRecord]) -> Result<Vec<PseudoLabel>> {
    if models.len() < 2 {
        return Err(AnydError::invalid("pseudo-labeling needs at least two models"));
    }
    let mut labels: Vec<PseudoLabel> = records
        .par_iter()
        .map(|r| {
            let image = r.image_tensor()?;
            let preds = models
                .iter()
                .map(|m| {
                    let obs = Observation { image: &image, speed: r.speed, region: region_of(&m.config, r)? };
                    Ok(select_command(&forward_all_branches(m, &obs)?.branches, r.command))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ensemble_label(&r.id, &preds))
        })
        .collect::<Result<_>>()?;
    labels.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(labels)
}

/// Keeps labels whose confidence does not exceed `threshold`.
pub fn filter_labels(labels: Vec<PseudoLabel>, threshold: f64) -> Vec<PseudoLabel> {
    labels.into_iter().filter(|l| l.confidence <= threshold).collect()
}

pub fn pseudo_label(models: &[ModelParams], unlabeled: &[DrivingRecord], threshold: f64) -> Result<Vec<PseudoLabel>> {
    Ok(filter_labels(label_all(models, unlabeled)?, threshold))
}

pub const PROBE_SIZE: usize = 256;
pub const PROBE_PERCENTILE: f64 = 0.8;

/// Nearest-rank percentile of a nonempty list.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// The configured threshold, or the 80th percentile of ensemble confidences
/// on up to 256 unlabeled records chosen by `seed`.
pub fn resolve_threshold(
    models: &[ModelParams],
    unlabeled: &[DrivingRecord],
    ssl: &SslConfig,
    seed: u64,
) -> Result<f64> {
    if let Some(t) = ssl.variance_threshold {
        return Ok(t);
    }
    if unlabeled.is_empty() {
        return Ok(0.0);
    }
    let mut rng = derive_rng(seed, &[0x9_0be]);
    let k = unlabeled.len().min(PROBE_SIZE);
    let mut idx = sample(&mut rng, unlabeled.len(), k).into_vec();
    idx.sort_unstable();
    let probe: Vec<DrivingRecord> = idx.iter().map(|&i| unlabeled[i].clone()).collect();
    let conf: Vec<f64> = label_all(models, &probe)?.iter().map(|l| l.confidence).collect();
    Ok(percentile(&conf, PROBE_PERCENTILE))
}

/// Fine-tunes `init` on labeled records plus pseudo-labeled ones, with the
/// SSL learning rate and iteration count and the full loss.
pub fn train_ssl(
    labeled: &[DrivingRecord],
    unlabeled: &[DrivingRecord],
    pseudo: &[PseudoLabel],
    cfg: &TrainConfig,
    ssl: &SslConfig,
    init: ModelParams,
) -> Result<(ModelParams, Vec<TraceRow>)> {
    ssl.validate()?;
    let mut samples = prepare_samples(&init.config, labeled)?;
    let by_id: std::collections::HashMap<&str, &DrivingRecord> = unlabeled.iter().map(|r| (r.id.as_str(), r)).collect();
    for p in pseudo {
        let r = by_id
            .get(p.id.as_str())
            .ok_or_else(|| AnydError::Data(format!("pseudo-label for unknown record {}", p.id)))?;
        samples.push(make_sample(&init.config, r, &p.waypoints)?);
    }
    let tuned = TrainConfig { lr0: ssl.lr0, iterations: ssl.iterations, ..*cfg };
    train_on_samples(&samples, &tuned, init, true)
}

pub struct SslOutcome {
    pub model: ModelParams,
    pub ensemble: Vec<ModelParams>,
    pub threshold: f64,
    pub labels: Vec<PseudoLabel>,
    pub kept: Vec<PseudoLabel>,
    pub trace: Vec<TraceRow>,
}

/// Trains an ensemble from different seeds on the labeled data, pseudo-labels
/// the unlabeled records, filters by confidence and fine-tunes the first
/// ensemble member on the union.
pub fn run_ssl(
    labeled: &[DrivingRecord],
    unlabeled: &[DrivingRecord],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    ssl: &SslConfig,
) -> Result<SslOutcome> {
    ssl.validate()?;
    let mut ensemble = Vec::with_capacity(ssl.ensemble_size);
    for member in 0..ssl.ensemble_size {
        let seed = derive_seed(cfg.seed, &[member as u64]);
        let init = ModelParams::init(model_config.clone(), seed)?;
        let member_cfg = TrainConfig { seed, ..*cfg };
        ensemble.push(train_centralized(labeled, &member_cfg, init)?.0);
    }
    let threshold = resolve_threshold(&ensemble, unlabeled, ssl, cfg.seed)?;
    let labels = label_all(&ensemble, unlabeled)?;
    let kept = filter_labels(labels.clone(), threshold);
    let (model, trace) = train_ssl(labeled, unlabeled, &kept, cfg, ssl, ensemble[0].clone())?;
    Ok(SslOutcome { model, ensemble, threshold, labels, kept, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{generate_region_dataset, GeneratorOptions, RegionProfile};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(regions: Vec<String>) -> ModelConfig {
        ModelConfig {
            image_h: 8,
            image_w: 8,
            image_ch: 3,
            patch_h: 4,
            patch_w: 4,
            channels: 4,
            speed_dim: 2,
            d_model: 4,
            heads: 2,
            branch_hidden: [8, 8],
            regions,
        }
    }

    fn data(n: usize) -> (Vec<DrivingRecord>, ModelConfig) {
        let profiles = RegionProfile::conflict_pair().to_vec();
        let opts = GeneratorOptions { image_h: 8, image_w: 8, kappa_thresh: 0.05 };
        let recs = generate_region_dataset(&profiles, n, 1, &opts).unwrap();
        (recs, tiny_config(vec!["east".into(), "west".into()]))
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::paper();
        assert_eq!(cfg.lr_at(0), 0.1);
        assert!((cfg.lr_at(1) - 0.0997).abs() < 1e-15);
        assert!((cfg.lr_at(2) - 0.0994009).abs() < 1e-15);
    }

    #[test]
    fn zero_iterations_is_identity() {
        let (recs, mc) = data(5);
        let init = ModelParams::init(mc, 2).unwrap();
        let cfg = TrainConfig { iterations: 0, ..TrainConfig::desk() };
        let (out, trace) = train_centralized(&recs, &cfg, init.clone()).unwrap();
        assert_eq!(out, init);
        assert!(trace.is_empty());
    }

    #[test]
    fn deterministic_training() {
        let (recs, mc) = data(10);
        let cfg = TrainConfig { iterations: 5, batch_size: 4, seed: 9, ..TrainConfig::desk() };
        let run = || train_centralized(&recs, &cfg, ModelParams::init(mc.clone(), 3).unwrap()).unwrap();
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ta, tb);
        assert!(ta.iter().all(|r| r.total.is_finite() && r.geo.is_some()));
    }

    /// Straight driving where every waypoint is a fixed multiple of speed.
    fn linear_toy(n: usize) -> Vec<DrivingRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        (0..n)
            .map(|i| {
                let speed = rng.random_range(1.0..8.0);
                let mut wp = [[0.0; 2]; 5];
                for (k, w) in wp.iter_mut().enumerate() {
                    w[1] = speed * 0.5 * (k + 1) as f64;
                }
                DrivingRecord {
                    id: format!("toy-{i:03}"),
                    shape: [8, 8, 3],
                    image: (0..192).map(|_| rng.random::<f64>()).collect(),
                    speed,
                    command: Command::Forward,
                    region_id: i % 2,
                    region_name: ["east", "west"][i % 2].into(),
                    waypoints: Some(wp),
                    tags: vec![],
                }
            })
            .collect()
    }

    #[test]
    fn learns_linear_toy_set() {
        let recs = linear_toy(50);
        let mc = tiny_config(vec!["east".into(), "west".into()]);
        let cfg = TrainConfig { iterations: 200, seed: 4, ..TrainConfig::desk() };
        let (_, trace) = train_centralized(&recs, &cfg, ModelParams::init(mc, 4).unwrap()).unwrap();
        let first = trace[0].bc;
        let last = trace[190..].iter().map(|r| r.bc).sum::<f64>() / 10.0;
        assert!(last <= 0.5 * first, "bc {first} -> {last}");
    }

    #[test]
    fn rejects_unlabeled_and_unknown_regions() {
        let (mut recs, mc) = data(3);
        let init = ModelParams::init(mc.clone(), 0).unwrap();
        recs[0].waypoints = None;
        assert!(prepare_samples(&mc, &recs).is_err());
        recs[0].waypoints = recs[1].waypoints;
        recs[0].region_name = "north".into();
        assert!(train_centralized(&recs, &TrainConfig::desk(), init).is_err());
    }

    #[test]
    fn ensemble_confidence_oracle() {
        let c = |v: f64| [[v; 2]; 5];
        let l = ensemble_label("x", &[c(1.0), c(2.0), c(6.0)]);
        // mean 3, population variance ((−2)² + (−1)² + 3²) / 3
        assert!((l.confidence - 14.0 / 3.0).abs() < 1e-12);
        assert_eq!(l.waypoints, c(3.0));
        assert_eq!(ensemble_label("y", &[c(0.5), c(0.5)]).confidence, 0.0);
    }

    #[test]
    fn identical_models_keep_everything() {
        let (recs, mc) = data(6);
        let m = ModelParams::init(mc, 4).unwrap();
        let labels = pseudo_label(&[m.clone(), m.clone(), m], &recs, 0.0).unwrap();
        assert_eq!(labels.len(), recs.len());
        assert!(labels.iter().all(|l| l.confidence == 0.0));
        assert!(labels.windows(2).all(|w| w[0].id < w[1].id));
    }

    #[test]
    fn empty_unlabeled_set() {
        let (_, mc) = data(1);
        let m = ModelParams::init(mc, 4).unwrap();
        assert!(pseudo_label(&[m.clone(), m], &[], 1.0).unwrap().is_empty());
    }

    #[test]
    fn nearest_rank_percentile() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.8), 8.0);
        assert_eq!(percentile(&[3.0], 0.8), 3.0);
    }

    #[test]
    fn ssl_reductions() {
        let (recs, mc) = data(8);
        let (labeled, unlabeled): (Vec<_>, Vec<_>) = recs
            .into_iter()
            .partition(|r| r.id.ends_with('0') || r.id.ends_with('1') || r.id.ends_with('2') || r.id.ends_with('3'));
        let unlabeled: Vec<DrivingRecord> = unlabeled
            .into_iter()
            .map(|mut r| {
                r.waypoints = None;
                r
            })
            .collect();
        let init = ModelParams::init(mc, 5).unwrap();
        let cfg = TrainConfig { batch_size: 4, seed: 1, ..TrainConfig::desk() };
        let ssl = SslConfig { iterations: 0, ..SslConfig::default() };
        let (same, _) = train_ssl(&labeled, &unlabeled, &[], &cfg, &ssl, init.clone()).unwrap();
        assert_eq!(same, init);

        let ssl = SslConfig { iterations: 3, ..SslConfig::default() };
        let (a, _) = train_ssl(&labeled, &unlabeled, &[], &cfg, &ssl, init.clone()).unwrap();
        let plain = TrainConfig { lr0: ssl.lr0, iterations: 3, ..cfg };
        let (b, _) = train_centralized(&labeled, &plain, init.clone()).unwrap();
        assert_eq!(a, b);

        let m2 = ModelParams::init(init.config.clone(), 6).unwrap();
        let labels = pseudo_label(&[init.clone(), m2], &unlabeled, f64::INFINITY).unwrap();
        let (x, _) = train_ssl(&labeled, &unlabeled, &labels, &cfg, &ssl, init.clone()).unwrap();
        let (y, _) = train_ssl(&labeled, &unlabeled, &labels, &cfg, &ssl, init).unwrap();
        assert_eq!(x.to_bytes(), y.to_bytes());
    }
}
