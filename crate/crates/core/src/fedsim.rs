//! Synchronous federated training: one node per region, each keeping its
//! region-embedding row private, with FedAvg or FedDyn aggregation.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datakit::DrivingRecord;
use crate::diffcore::{sgd_step, Tensor};
use crate::error::{AnydError, Result};
use crate::evalkit::evaluate;
use crate::planner::ModelParams;
use crate::planner::{encode_blob, split_blob, Blob, BlobEntry};
use crate::seed::derive_seed;
use crate::trainer::{accumulate_gradients, batch_indices, prepare_samples, Sample, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    FedDyn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientWeighting {
    Uniform,
    BySampleCount,
}

fn default_alpha() -> f64 {
    0.01
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_iterations: usize,
    pub algorithm: Algorithm,
    #[serde(default = "default_alpha")]
    pub alpha_dyn: f64,
    /// FedAvg weighting; defaults to sample counts. FedDyn always averages uniformly.
    #[serde(default)]
    pub client_weighting: Option<ClientWeighting>,
    #[serde(skip)]
    pub seed: u64,
}

impl FedConfig {
    pub fn paper() -> Self {
        FedConfig {
            rounds: 1500,
            local_iterations: 5,
            algorithm: Algorithm::FedAvg,
            alpha_dyn: 0.01,
            client_weighting: None,
            seed: 0,
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.rounds * self.local_iterations
    }

    pub fn weighting(&self) -> ClientWeighting {
        self.client_weighting.unwrap_or(ClientWeighting::BySampleCount)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_dyn >= 0.0 && self.alpha_dyn.is_finite()) {
            return Err(AnydError::invalid("alpha_dyn must be nonnegative"));
        }
        if self.algorithm == Algorithm::FedDyn && self.alpha_dyn <= 0.0 {
            return Err(AnydError::invalid("FedDyn needs alpha_dyn > 0"));
        }
        Ok(())
    }
}

/// The shared (non-table) parameters of a model, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedParams {
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
}

impl SharedParams {
    pub fn from_model(m: &ModelParams) -> Self {
        let ids = m.shared_ids();
        SharedParams {
            names: ids.iter().map(|&id| m.store.get(id).name().to_string()).collect(),
            values: ids.iter().map(|&id| m.store.get(id).value.clone()).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        SharedParams {
            names: self.names.clone(),
            values: self.values.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Overwrites the shared parameters of `m`; its table is untouched.
    pub fn write_into(&self, m: &mut ModelParams) -> Result<()> {
        let ids = m.shared_ids();
        if ids.len() != self.values.len() {
            return Err(AnydError::shape("shared parameter count differs from the model"));
        }
        for ((id, name), v) in ids.into_iter().zip(&self.names).zip(&self.values) {
            let p = m.store.get_mut(id);
            if p.name() != name || p.value.shape() != v.shape() {
                return Err(AnydError::shape(format!("shared parameter {name} does not match {}", p.name())));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    fn check_compatible(&self, other: &SharedParams) -> Result<()> {
        let same =
            self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.shape() == b.shape());
        if same {
            Ok(())
        } else {
            Err(AnydError::shape("client parameter sets differ in layout"))
        }
    }

    fn zip_map(&self, other: &SharedParams, f: impl Fn(f64, f64) -> f64) -> SharedParams {
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape(), data).expect("same shape")
            })
            .collect();
        SharedParams { names: self.names.clone(), values }
    }

    /// Serialized as one message frame body; never carries a table.
    pub fn to_message(&self, meta: serde_json::Value) -> Vec<u8> {
        let entries = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| BlobEntry { name: n.clone(), value: v.clone(), table: false })
            .collect();
        encode_blob(&Blob { config: None, region_names: None, meta: Some(meta), entries })
    }
}

/// Coordinatewise weighted mean, computed as `θ₀ + Σ w_k (θ_k − θ₀)` so that
/// identical clients reproduce their parameters exactly.
pub fn fedavg_aggregate(clients: &[SharedParams], weights: &[f64]) -> Result<SharedParams> {
    if clients.is_empty() || clients.len() != weights.len() {
        return Err(AnydError::invalid("need one weight per client and at least one client"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(AnydError::invalid(format!("client weights must be nonnegative and sum to 1, got {total}")));
    }
    let base = &clients[0];
    for c in &clients[1..] {
        base.check_compatible(c)?;
    }
    let mut out = base.clone();
    for (c, &w) in clients.iter().zip(weights).skip(1) {
        for ((o, t), b) in out.values.iter_mut().zip(&c.values).zip(&base.values) {
            for ((o, &t), &b) in o.data_mut().iter_mut().zip(t.data()).zip(b.data()) {
                *o += w * (t - b);
            }
        }
    }
    Ok(out)
}

/// Server step: `h ← h − α·mean(θ_k − θ_prev)`, `θ ← mean(θ_k) − h/α`.
pub fn feddyn_server_update(
    clients: &[SharedParams],
    prev: &SharedParams,
    h_prev: &SharedParams,
    alpha: f64,
) -> Result<(SharedParams, SharedParams)> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(AnydError::invalid("FedDyn needs alpha_dyn > 0"));
    }
    prev.check_compatible(h_prev)?;
    let k = clients.len();
    let mean = fedavg_aggregate(clients, &vec![1.0 / k as f64; k])?;
    prev.check_compatible(&mean)?;
    let mut drift = prev.zeros_like();
    for c in clients {
        drift = drift.zip_map(&c.zip_map(prev, |a, b| a - b), |d, x| d + x);
    }
    let h = h_prev.zip_map(&drift, |h, d| h - alpha * (d / k as f64));
    let theta = mean.zip_map(&h, |m, h| m - h / alpha);
    Ok((theta, h))
}

/// Seed of node `node_id`; its step `t` batch is drawn from `(node_seed, t)`.
pub fn node_seed(global_seed: u64, node_id: usize) -> u64 {
    derive_seed(global_seed, &[node_id as u64])
}

/// One client: its region, local samples, a single-row working model whose
/// table is the private embedding row, and the FedDyn correction state.
#[derive(Clone, Debug)]
pub struct NodeState {
    pub id: usize,
    pub region: String,
    pub samples: Vec<Sample>,
    pub model: ModelParams,
    pub h: SharedParams,
    pub seed: u64,
}

impl NodeState {
    /// Builds node `id` for `region` from the global initial model, taking the
    /// shared parameters and that region's embedding row.
    pub fn new(
        id: usize,
        region: &str,
        records: &[DrivingRecord],
        init: &ModelParams,
        global_seed: u64,
    ) -> Result<Self> {
        let row = init
            .config
            .region_index(region)
            .ok_or_else(|| AnydError::Data(format!("region {region} unknown to the model")))?;
        let config = crate::planner::ModelConfig { regions: vec![region.to_string()], ..init.config.clone() };
        let mut model = ModelParams::init(config, 0)?;
        let shared = SharedParams::from_model(init);
        shared.write_into(&mut model)?;
        let table = model.table.embedding;
        model.store.get_mut(table).value = Tensor::new([1, init.config.channels], init.embedding_row(row).to_vec())?;
        let samples = prepare_samples(&model.config, records)?;
        if samples.is_empty() {
            return Err(AnydError::Data(format!("node {id} ({region}) has no data")));
        }
        Ok(NodeState {
            id,
            region: region.to_string(),
            samples,
            h: shared.zeros_like(),
            model,
            seed: node_seed(global_seed, id),
        })
    }

    pub fn private_row(&self) -> &[f64] {
        self.model.embedding_row(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub params: SharedParams,
    pub mean_loss: f64,
}

/// Local SGD from the server parameters. Steps are numbered globally
/// (`round · local_iterations + s`) for both the batch draw and the learning
/// rate. FedDyn adds `−h_k + α(θ − θ_server)` to the shared gradients and
/// then updates `h_k`.
pub fn client_local_update(
    node: &mut NodeState,
    server: &SharedParams,
    fed: &FedConfig,
    train: &TrainConfig,
    round: usize,
) -> Result<ClientUpdate> {
    server.write_into(&mut node.model)?;
    let sgd = train.sgd();
    let alpha = fed.alpha_dyn;
    let shared_ids = node.model.shared_ids();
    let mut loss_sum = 0.0;
    for s in 0..fed.local_iterations {
        let step = round * fed.local_iterations + s;
        let idx = batch_indices(node.seed, step, node.samples.len(), train.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &node.samples[i]).collect();
        loss_sum += accumulate_gradients(&mut node.model, &batch, &train.loss, false, step)?.total;
        if fed.algorithm == Algorithm::FedDyn {
            for (k, &id) in shared_ids.iter().enumerate() {
                let p = node.model.store.get_mut(id);
                let (h, anchor) = (node.h.values[k].data(), server.values[k].data());
                for (i, g) in p.gradient.data_mut().iter_mut().enumerate() {
                    *g = *g - h[i] + alpha * (p.value.data()[i] - anchor[i]);
                }
            }
        }
        sgd_step(node.model.store.as_mut_slice(), &sgd, step)?;
    }
    let params = SharedParams::from_model(&node.model);
    if fed.algorithm == Algorithm::FedDyn {
        let drift = params.zip_map(server, |a, b| a - b);
        node.h = node.h.zip_map(&drift, |h, d| h - alpha * d);
    }
    let mean_loss = if fed.local_iterations == 0 { 0.0 } else { loss_sum / fed.local_iterations as f64 };
    Ok(ClientUpdate { params, mean_loss })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundTrace {
    pub round: usize,
    pub node_losses: Vec<f64>,
    pub validation_ade: Option<f64>,
}

pub fn write_round_trace_csv(path: &Path, regions: &[String], rows: &[RoundTrace]) -> Result<()> {
    let err = |e: csv::Error| AnydError::Data(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["round".to_string()];
    header.extend(regions.iter().map(|r| format!("loss_{r}")));
    header.push("val_ade".into());
    w.write_record(&header).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.round.to_string()];
        rec.extend(r.node_losses.iter().map(f64::to_string));
        rec.push(r.validation_ade.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&rec).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Default)]
pub struct FedRunOptions<'a> {
    pub validation: Option<&'a [DrivingRecord]>,
    /// Run clients of a round on the rayon pool; results are identical either way.
    pub parallel: bool,
    /// Receives every server↔client message as `u64 LE length ‖ ANYD1 blob`.
    pub message_log: Option<&'a mut dyn Write>,
}

pub struct FedOutcome {
    /// Shared parameters plus every node's private row in its table slot.
    pub model: ModelParams,
    pub shared: SharedParams,
    pub nodes: Vec<NodeState>,
    pub trace: Vec<RoundTrace>,
    pub local_steps: usize,
}

fn write_frame(log: &mut Option<&mut dyn Write>, msg: &SharedParams, meta: serde_json::Value) -> Result<()> {
    if let Some(w) = log.as_mut() {
        let body = msg.to_message(meta);
        w.write_all(&(body.len() as u64).to_le_bytes())?;
        w.write_all(&body)?;
    }
    Ok(())
}

/// Places the shared parameters and each node's private row into a copy of `init`.
pub fn assemble_model(init: &ModelParams, shared: &SharedParams, nodes: &[NodeState]) -> Result<ModelParams> {
    let mut m = init.clone();
    shared.write_into(&mut m)?;
    let table = m.table.embedding;
    let c = m.config.channels;
    for n in nodes {
        let row = m.config.region_index(&n.region).expect("node region belongs to the model");
        m.store.get_mut(table).value.data_mut()[row * c..(row + 1) * c].copy_from_slice(n.private_row());
    }
    Ok(m)
}

/// Runs `fed.rounds` synchronous rounds over one node per model region that
/// has data. Node ids are region indices.
pub fn run_federated(
    data: &[DrivingRecord],
    init: &ModelParams,
    fed: &FedConfig,
    train: &TrainConfig,
    mut opts: FedRunOptions<'_>,
) -> Result<FedOutcome> {
    fed.validate()?;
    train.validate()?;
    let mut nodes = Vec::new();
    for (id, region) in init.config.regions.iter().enumerate() {
        let local: Vec<DrivingRecord> = data.iter().filter(|r| &r.region_name == region).cloned().collect();
        if !local.is_empty() {
            nodes.push(NodeState::new(id, region, &local, init, fed.seed)?);
        }
    }
    if let Some(r) = data.iter().find(|r| init.config.region_index(&r.region_name).is_none()) {
        return Err(AnydError::Data(format!("{}: region {} unknown to the model", r.id, r.region_name)));
    }
    if nodes.is_empty() {
        return Err(AnydError::Data("federation needs at least one node with data".into()));
    }
    let counts: Vec<f64> = nodes.iter().map(|n| n.samples.len() as f64).collect();
    let weights: Vec<f64> = match (fed.algorithm, fed.weighting()) {
        (Algorithm::FedAvg, ClientWeighting::BySampleCount) => {
            let total: f64 = counts.iter().sum();
            counts.iter().map(|c| c / total).collect()
        }
        _ => vec![1.0 / nodes.len() as f64; nodes.len()],
    };

    let mut shared = SharedParams::from_model(init);
    let mut h = shared.zeros_like();
    let mut trace = Vec::with_capacity(fed.rounds);
    let mut local_steps = 0;
    for round in 0..fed.rounds {
        for n in &nodes {
            write_frame(&mut opts.message_log, &shared, serde_json::json!({"round": round, "to": n.id}))?;
        }
        let run = |n: &mut NodeState| {
            client_local_update(n, &shared, fed, train, round).map_err(|e| AnydError::Federated {
                round,
                node: n.id,
                source: Box::new(e),
            })
        };
        let updates: Vec<ClientUpdate> = if opts.parallel {
            nodes.par_iter_mut().map(run).collect::<Result<_>>()?
        } else {
            nodes.iter_mut().map(run).collect::<Result<_>>()?
        };
        local_steps += fed.local_iterations;
        for (n, u) in nodes.iter().zip(&updates) {
            write_frame(&mut opts.message_log, &u.params, serde_json::json!({"round": round, "from": n.id}))?;
        }
        let params: Vec<SharedParams> = updates.iter().map(|u| u.params.clone()).collect();
        shared = match fed.algorithm {
            Algorithm::FedAvg => fedavg_aggregate(&params, &weights)?,
            Algorithm::FedDyn => {
                let (theta, h_new) = feddyn_server_update(&params, &shared, &h, fed.alpha_dyn)?;
                h = h_new;
                theta
            }
        };
        let validation_ade = match opts.validation {
            Some(v) => Some(evaluate(&assemble_model(init, &shared, &nodes)?, v, None)?.balanced_ade),
            None => None,
        };
        trace.push(RoundTrace { round, node_losses: updates.iter().map(|u| u.mean_loss).collect(), validation_ade });
    }
    let model = assemble_model(init, &shared, &nodes)?;
    Ok(FedOutcome { model, shared, nodes, trace, local_steps })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AuditReport {
    pub frames: usize,
    /// Frames whose manifest declares a table region or table entries.
    pub table_frames: usize,
    /// Frames whose payload contains the exact bytes of a private row.
    pub row_hits: usize,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.frames > 0 && self.table_frames == 0 && self.row_hits == 0
    }
}

/// Scans a message log for any embedding-table content.
pub fn audit_message_log(log: &[u8], private_rows: &[Vec<f64>]) -> Result<AuditReport> {
    let needles: Vec<Vec<u8>> = private_rows.iter().map(|r| r.iter().flat_map(|v| v.to_le_bytes()).collect()).collect();
    let mut report = AuditReport::default();
    let mut rest = log;
    while !rest.is_empty() {
        if rest.len() < 8 {
            return Err(AnydError::ModelFile("truncated frame header".into()));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let body = rest.get(8..8 + len).ok_or_else(|| AnydError::ModelFile("truncated frame".into()))?;
        let (manifest, payload) = split_blob(body)?;
        report.frames += 1;
        if manifest.table.is_some() || manifest.params.iter().any(|p| p.table) {
            report.table_frames += 1;
        }
        if needles.iter().any(|n| !n.is_empty() && payload.windows(n.len()).any(|w| w == n.as_slice())) {
            report.row_hits += 1;
        }
        rest = &rest[8 + len..];
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{generate_region_dataset, GeneratorOptions, RegionProfile};
    use crate::planner::ModelConfig;
    use crate::trainer::train_on_samples;

    fn scalar(v: f64) -> SharedParams {
        SharedParams { names: vec!["w".into()], values: vec![Tensor::scalar(v)] }
    }

    fn tiny(regions: &[&str]) -> ModelConfig {
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
            branch_hidden: [6, 6],
            regions: regions.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn records(n: usize) -> Vec<DrivingRecord> {
        let opts = GeneratorOptions { image_h: 8, image_w: 8, kappa_thresh: 0.05 };
        generate_region_dataset(&RegionProfile::conflict_pair(), n, 3, &opts).unwrap()
    }

    fn train_cfg() -> TrainConfig {
        TrainConfig { batch_size: 3, seed: 0, ..TrainConfig::desk() }
    }

    #[test]
    fn fedavg_examples() {
        let a = fedavg_aggregate(&[scalar(1.0), scalar(3.0)], &[0.5, 0.5]).unwrap();
        assert_eq!(a.values[0].item(), 2.0);
        let b = fedavg_aggregate(&[scalar(1.0), scalar(3.0)], &[0.25, 0.75]).unwrap();
        assert_eq!(b.values[0].item(), 2.5);
        let x = scalar(0.1 + 0.2);
        let c = fedavg_aggregate(&[x.clone(), x.clone(), x.clone()], &[1.0 / 3.0; 3]).unwrap();
        assert_eq!(c, x);
        assert!(fedavg_aggregate(&[scalar(1.0)], &[0.5]).is_err());
        let other = SharedParams { names: vec!["v".into()], values: vec![Tensor::scalar(1.0)] };
        assert!(fedavg_aggregate(&[scalar(1.0), other], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn feddyn_server_examples() {
        let (theta, h) = feddyn_server_update(&[scalar(1.0), scalar(3.0)], &scalar(0.0), &scalar(0.0), 1.0).unwrap();
        assert_eq!(h.values[0].item(), -2.0);
        assert_eq!(theta.values[0].item(), 4.0);
        let p = scalar(0.7);
        let (theta, h) = feddyn_server_update(&[p.clone(), p.clone()], &p, &scalar(0.0), 0.3).unwrap();
        assert_eq!(theta, p);
        assert_eq!(h.values[0].item(), 0.0);
        assert!(feddyn_server_update(&[scalar(1.0)], &scalar(0.0), &scalar(0.0), 0.0).is_err());
    }

    #[test]
    fn feddyn_first_round_is_alpha_free() {
        // With h_prev = 0 the server gives mean + mean(θ_k − θ_prev) for any α.
        for alpha in [1e-3, 1.0, 1e9] {
            let (theta, _) =
                feddyn_server_update(&[scalar(1.0), scalar(3.0)], &scalar(0.0), &scalar(0.0), alpha).unwrap();
            assert!((theta.values[0].item() - 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_local_iterations_is_identity() {
        let recs = records(4);
        let init = ModelParams::init(tiny(&["east", "west"]), 1).unwrap();
        let east: Vec<_> = recs.iter().filter(|r| r.region_name == "east").cloned().collect();
        let mut node = NodeState::new(0, "east", &east, &init, 5).unwrap();
        let server = SharedParams::from_model(&init);
        let fed = FedConfig { local_iterations: 0, algorithm: Algorithm::FedDyn, ..FedConfig::paper() };
        node.h.values[0].data_mut()[0] = 0.5;
        let h_before = node.h.clone();
        let u = client_local_update(&mut node, &server, &fed, &train_cfg(), 3).unwrap();
        assert_eq!(u.params, server);
        assert_eq!(node.h, h_before);
    }

    #[test]
    fn feddyn_zero_alpha_matches_fedavg_client() {
        let recs = records(5);
        let init = ModelParams::init(tiny(&["east", "west"]), 2).unwrap();
        let west: Vec<_> = recs.iter().filter(|r| r.region_name == "west").cloned().collect();
        let server = SharedParams::from_model(&init);
        let avg = FedConfig { local_iterations: 4, ..FedConfig::paper() };
        let dyn0 = FedConfig { algorithm: Algorithm::FedDyn, alpha_dyn: 0.0, ..avg };
        let mut a = NodeState::new(1, "west", &west, &init, 8).unwrap();
        let mut b = a.clone();
        let ua = client_local_update(&mut a, &server, &avg, &train_cfg(), 2).unwrap();
        let ub = client_local_update(&mut b, &server, &dyn0, &train_cfg(), 2).unwrap();
        assert_eq!(ua, ub);
        assert_eq!(a.private_row(), b.private_row());
    }

    #[test]
    fn client_messages_exclude_table() {
        let init = ModelParams::init(tiny(&["east", "west"]), 2).unwrap();
        let shared = SharedParams::from_model(&init);
        let table_name = init.store.get(init.table.embedding).name().to_string();
        assert!(!shared.names.contains(&table_name));
        let (manifest, _) = split_blob(&shared.to_message(serde_json::json!({}))).unwrap();
        assert!(manifest.table.is_none());
        assert!(manifest.params.iter().all(|p| !p.table && p.name != table_name));
    }

    #[test]
    fn single_node_matches_centralized() {
        let recs: Vec<_> = records(6).into_iter().filter(|r| r.region_name == "east").collect();
        let init = ModelParams::init(tiny(&["east"]), 4).unwrap();
        let fed = FedConfig { rounds: 3, local_iterations: 2, seed: 17, ..FedConfig::paper() };
        let out = run_federated(&recs, &init, &fed, &train_cfg(), FedRunOptions::default()).unwrap();
        assert_eq!(out.local_steps, 6);
        let samples = prepare_samples(&init.config, &recs).unwrap();
        let cfg = TrainConfig { iterations: 6, seed: node_seed(17, 0), ..train_cfg() };
        let (central, _) = train_on_samples(&samples, &cfg, init, false).unwrap();
        assert_eq!(out.model.to_bytes(), central.to_bytes());
    }

    #[test]
    fn parallel_equals_sequential_and_audit_is_clean() {
        let recs = records(6);
        let init = ModelParams::init(tiny(&["east", "west"]), 6).unwrap();
        for algorithm in [Algorithm::FedAvg, Algorithm::FedDyn] {
            let fed =
                FedConfig { rounds: 2, local_iterations: 2, algorithm, alpha_dyn: 0.1, seed: 1, ..FedConfig::paper() };
            let mut log = Vec::new();
            let seq = run_federated(
                &recs,
                &init,
                &fed,
                &train_cfg(),
                FedRunOptions { message_log: Some(&mut log), validation: Some(&recs), ..Default::default() },
            )
            .unwrap();
            let par = run_federated(
                &recs,
                &init,
                &fed,
                &train_cfg(),
                FedRunOptions { parallel: true, validation: Some(&recs), ..Default::default() },
            )
            .unwrap();
            assert_eq!(seq.model.to_bytes(), par.model.to_bytes());
            assert_eq!(seq.trace, par.trace);
            assert!(seq.trace.iter().all(|t| t.validation_ade.is_some()));
            let rows: Vec<Vec<f64>> = seq.nodes.iter().map(|n| n.private_row().to_vec()).collect();
            let audit = audit_message_log(&log, &rows).unwrap();
            assert_eq!(audit.frames, 2 * 2 * 2);
            assert!(audit.clean());
            assert_ne!(rows[0], rows[1]);
        }
    }

    #[test]
    fn audit_detects_leaks() {
        let init = ModelParams::init(tiny(&["east"]), 0).unwrap();
        let body = init.to_bytes();
        let mut log = (body.len() as u64).to_le_bytes().to_vec();
        log.extend_from_slice(&body);
        let r = audit_message_log(&log, &[init.embedding_row(0).to_vec()]).unwrap();
        assert_eq!(r.table_frames, 1);
        assert_eq!(r.row_hits, 1);
        assert!(audit_message_log(&log[..log.len() - 1], &[]).is_err());
    }

    #[test]
    fn config_errors() {
        let recs = records(2);
        let init = ModelParams::init(tiny(&["east"]), 0).unwrap();
        let fed = FedConfig { rounds: 1, local_iterations: 1, ..FedConfig::paper() };
        assert!(run_federated(&recs, &init, &fed, &train_cfg(), FedRunOptions::default()).is_err());
        let dyn0 = FedConfig { algorithm: Algorithm::FedDyn, alpha_dyn: 0.0, ..fed };
        assert!(dyn0.validate().is_err());
        assert_eq!(FedConfig::paper().total_iterations(), 7500);
        let parsed: FedConfig = serde_json::from_str(
            r#"{"rounds":2,"local_iterations":5,"algorithm":"feddyn","client_weighting":"uniform"}"#,
        )
        .unwrap();
        assert_eq!(parsed.alpha_dyn, 0.01);
        assert_eq!(parsed.weighting(), ClientWeighting::Uniform);
    }
}
