//! Speed fusion, command-conditional waypoint branches and the full forward pass.

mod modelfile;

pub use modelfile::{
    decode_blob, encode_blob, split_blob, Blob, BlobEntry, Manifest, ManifestEntry, TableRegion, MAGIC,
};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoder::{embed_speed, encode_image, EncoderConfig, EncoderParams};
use crate::error::{AnydError, Result};
use crate::geoattn::{geo_forward, GeoAttnParams, GeoConfig, GeoEmbeddingTable};

pub const HORIZON: usize = 5;
pub const COMMANDS: usize = 3;
/// Flattened waypoint count per branch.
pub const BRANCH_OUT: usize = HORIZON * 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Left,
    Forward,
    Right,
}

impl Command {
    pub const ALL: [Command; COMMANDS] = [Command::Left, Command::Forward, Command::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Command::ALL.get(i).copied().ok_or_else(|| AnydError::invalid(format!("command index {i}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Left => "left",
            Command::Forward => "forward",
            Command::Right => "right",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = AnydError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Command::Left),
            "forward" => Ok(Command::Forward),
            "right" => Ok(Command::Right),
            _ => Err(AnydError::invalid(format!("unknown command {s:?}"))),
        }
    }
}

/// Five ego-frame points `(x right, y forward)` in meters, 0.5 s apart.
pub type WaypointSet = [[f64; 2]; HORIZON];

pub fn waypoints_from_flat(v: &[f64]) -> Result<WaypointSet> {
    if v.len() != BRANCH_OUT {
        return Err(AnydError::shape(format!("{} values for {BRANCH_OUT} waypoint coordinates", v.len())));
    }
    let mut w = [[0.0; 2]; HORIZON];
    for (k, p) in w.iter_mut().enumerate() {
        *p = [v[2 * k], v[2 * k + 1]];
    }
    Ok(w)
}

pub fn flatten_waypoints(w: &WaypointSet) -> [f64; BRANCH_OUT] {
    let mut out = [0.0; BRANCH_OUT];
    for (k, p) in w.iter().enumerate() {
        out[2 * k] = p[0];
        out[2 * k + 1] = p[1];
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub image_ch: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
    pub speed_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub branch_hidden: [usize; 2],
    pub regions: Vec<String>,
}

impl ModelConfig {
    pub fn desk(regions: Vec<String>) -> Self {
        let e = EncoderConfig::desk();
        ModelConfig {
            image_h: e.image_h,
            image_w: e.image_w,
            image_ch: e.image_ch,
            patch_h: e.patch_h,
            patch_w: e.patch_w,
            channels: e.channels,
            speed_dim: e.speed_dim,
            d_model: 48,
            heads: 3,
            branch_hidden: [64, 64],
            regions,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            image_h: self.image_h,
            image_w: self.image_w,
            image_ch: self.image_ch,
            patch_h: self.patch_h,
            patch_w: self.patch_w,
            channels: self.channels,
            speed_dim: self.speed_dim,
        }
    }

    pub fn geo(&self) -> GeoConfig {
        GeoConfig { channels: self.channels, d_model: self.d_model, heads: self.heads }
    }

    pub fn region_index(&self, name: &str) -> Option<usize> {
        self.regions.iter().position(|r| r == name)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.geo().validate()?;
        if self.branch_hidden.contains(&0) {
            return Err(AnydError::invalid("branch widths must be positive"));
        }
        if self.regions.is_empty() {
            return Err(AnydError::invalid("at least one region is required"));
        }
        let mut sorted = self.regions.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.regions.len() {
            return Err(AnydError::invalid("region names must be unique"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
}

impl BranchParams {
    pub fn ids(&self) -> [ParamId; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannerParams {
    pub fusion_kernel: ParamId,
    pub fusion_bias: ParamId,
    /// Indexed by [`Command::index`].
    pub branches: Vec<BranchParams>,
}

impl PlannerParams {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (c, sd) = (cfg.channels, cfg.speed_dim);
        let fan_in = 9 * (c + sd);
        let fusion_kernel = store
            .add("planner.fusion_kernel", Tensor::randn(vec![3, 3, c + sd, c], (2.0 / fan_in as f64).sqrt(), rng))?;
        let fusion_bias = store.add("planner.fusion_bias", Tensor::zeros(vec![c]))?;
        let flat = cfg.encoder().cells() * c;
        let [h1, h2] = cfg.branch_hidden;
        let mut branches = Vec::with_capacity(COMMANDS);
        for cmd in Command::ALL {
            let mut layer = |name: &str, rows: usize, cols: usize, std: f64| -> Result<(ParamId, ParamId)> {
                let w = store.add(format!("planner.{cmd}.{name}.weight"), Tensor::randn(vec![rows, cols], std, rng))?;
                let b = store.add(format!("planner.{cmd}.{name}.bias"), Tensor::zeros(vec![cols]))?;
                Ok((w, b))
            };
            let (w1, b1) = layer("fc1", flat, h1, (2.0 / flat as f64).sqrt())?;
            let (w2, b2) = layer("fc2", h1, h2, (2.0 / h1 as f64).sqrt())?;
            let (w3, b3) = layer("fc3", h2, BRANCH_OUT, (1.0 / h2 as f64).sqrt())?;
            branches.push(BranchParams { w1, b1, w2, b2, w3, b3 });
        }
        Ok(PlannerParams { fusion_kernel, fusion_bias, branches })
    }
}

/// Every parameter of the model in one store; the embedding table is added
/// last so it forms the tail of the serialized payload.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub geo: GeoAttnParams,
    pub table: GeoEmbeddingTable,
    pub planner: PlannerParams,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&mut store, &config.encoder(), &mut rng)?;
        let geo = GeoAttnParams::init(&mut store, config.geo(), &mut rng)?;
        let planner = PlannerParams::init(&mut store, &config, &mut rng)?;
        let table = GeoEmbeddingTable::init(&mut store, config.regions.clone(), config.channels, &mut rng)?;
        Ok(ModelParams { config, store, encoder, geo, table, planner })
    }

    /// Parameters exchanged under federation: everything except the table.
    pub fn shared_ids(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| id != self.table.embedding).collect()
    }

    pub fn is_table(&self, id: ParamId) -> bool {
        id == self.table.embedding
    }

    pub fn embedding_row(&self, region: usize) -> &[f64] {
        self.store.get(self.table.embedding).value.row(region)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self
            .store
            .ids()
            .map(|id| {
                let p = self.store.get(id);
                BlobEntry { name: p.name().to_string(), value: p.value.clone(), table: self.is_table(id) }
            })
            .collect();
        let blob = Blob {
            config: Some(self.config.clone()),
            region_names: Some(self.table.region_names.clone()),
            meta: None,
            entries,
        };
        encode_blob(&blob)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let blob = decode_blob(bytes)?;
        let config = blob.config.ok_or_else(|| AnydError::ModelFile("manifest carries no model config".into()))?;
        let mut m = ModelParams::init(config, 0).map_err(|e| AnydError::ModelFile(e.to_string()))?;
        if blob.entries.len() != m.store.len() {
            return Err(AnydError::ModelFile(format!(
                "{} parameters in file, model expects {}",
                blob.entries.len(),
                m.store.len()
            )));
        }
        for entry in blob.entries {
            let id = m
                .store
                .find(&entry.name)
                .ok_or_else(|| AnydError::ModelFile(format!("unexpected parameter {}", entry.name)))?;
            let p = m.store.get_mut(id);
            if p.value.shape() != entry.value.shape() {
                return Err(AnydError::ModelFile(format!(
                    "{}: shape {:?}, expected {:?}",
                    entry.name,
                    entry.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = entry.value;
        }
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        ModelParams::from_bytes(&std::fs::read(path)?)
    }
}

/// One model input: image `[h, w, ch]` in `[0, 1]`, speed in m/s, region index.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub image: &'a Tensor,
    pub speed: f64,
    pub region: usize,
}

/// Tape handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[3, 10]`, one row per command.
    pub branches: Var,
    /// `[H]`
    pub head_weights: Var,
}

/// Broadcasts the speed feature to every cell, concatenates it with `F_g` along
/// channels, and applies the 3×3 fusion convolution and ReLU.
pub fn fuse(tape: &mut Tape, vars: &Bindings, p: &PlannerParams, adapted: Var, speed_feature: Var) -> Result<Var> {
    let fs = tape.shape(adapted).to_vec();
    if fs.len() != 3 || tape.shape(speed_feature).len() != 1 {
        return Err(AnydError::shape(format!("fuse: F_g {fs:?}, speed {:?}", tape.shape(speed_feature))));
    }
    let sd = tape.shape(speed_feature)[0];
    let rows = tape.broadcast_rows(speed_feature, fs[0] * fs[1])?;
    let grid = tape.reshape(rows, vec![fs[0], fs[1], sd])?;
    let joined = tape.concat(&[adapted, grid], 2)?;
    let conv = tape.conv2d_3x3(joined, vars[p.fusion_kernel], vars[p.fusion_bias])?;
    Ok(tape.relu(conv))
}

/// Three fully connected layers from the flattened fused grid to 10 outputs.
pub fn branch_forward(tape: &mut Tape, vars: &Bindings, b: &BranchParams, fused: Var) -> Result<Var> {
    let n = tape.value(fused).len();
    let x = tape.reshape(fused, vec![1, n])?;
    let mut h = x;
    for (w, bias, act) in [(b.w1, b.b1, true), (b.w2, b.b2, true), (b.w3, b.b3, false)] {
        h = tape.matmul(h, vars[w])?;
        h = tape.add_last(h, vars[bias])?;
        if act {
            h = tape.relu(h);
        }
    }
    tape.reshape(h, vec![BRANCH_OUT])
}

/// encoder → geo module → fusion → all three branches.
pub fn forward_vars(tape: &mut Tape, vars: &Bindings, m: &ModelParams, obs: &Observation) -> Result<ForwardVars> {
    let features = encode_image(tape, vars, &m.encoder, &m.config.encoder(), obs.image)?;
    let geo = geo_forward(tape, vars, &m.geo, &m.table, features, obs.region)?;
    let speed = embed_speed(tape, vars, &m.encoder, obs.speed)?;
    let fused = fuse(tape, vars, &m.planner, geo.adapted, speed)?;
    let mut outs = Vec::with_capacity(COMMANDS);
    for b in &m.planner.branches {
        outs.push(branch_forward(tape, vars, b, fused)?);
    }
    let branches = tape.stack(&outs)?;
    Ok(ForwardVars { branches, head_weights: geo.head_weights })
}

/// Evaluated forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub branches: [WaypointSet; COMMANDS],
    pub head_weights: Vec<f64>,
}

pub fn forward_all_branches(m: &ModelParams, obs: &Observation) -> Result<Prediction> {
    let mut tape = Tape::new();
    let vars = m.store.bind(&mut tape);
    let out = forward_vars(&mut tape, &vars, m, obs)?;
    let b = tape.value(out.branches).data();
    let mut branches = [[[0.0; 2]; HORIZON]; COMMANDS];
    for (c, set) in branches.iter_mut().enumerate() {
        *set = waypoints_from_flat(&b[c * BRANCH_OUT..(c + 1) * BRANCH_OUT])?;
    }
    Ok(Prediction { branches, head_weights: tape.value(out.head_weights).data().to_vec() })
}

pub fn select_command(all: &[WaypointSet; COMMANDS], c: Command) -> WaypointSet {
    all[c.index()]
}

#[cfg(test)]
mod tests;
