//! Geo-conditional multi-head channel attention.
//!
//! Each of the `C` feature channels becomes a token. Image tokens come from the
//! spatially pooled features, region tokens from the region embedding; a shared
//! learned region token is prepended to both sequences. Region tokens query the
//! image tokens, every head reduces its token features to one scalar per token,
//! and the scalar at the region-token position of head `h` weighs that head's
//! channel scores:
//!
//! ```text
//! z     = z_I + Attention(LN(z_I), LN(z_g))
//! ẑ     = pool(z) + MLP(LN(z))                  per head, per token
//! F_g   = Σ_h (α̂_h · ẑ[h, 1..=C]) ⊙ F            α̂_h = ẑ[h, 0]
//! ```

use rand::Rng;

use crate::diffcore::{Bindings, ParamId, ParamStore, Tape, Tensor, Var, LN_EPS};
use crate::error::{AnydError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeoConfig {
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
}

impl GeoConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Hidden width of every per-head MLP.
    pub fn mlp_hidden(&self) -> usize {
        self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.d_model == 0 {
            return Err(AnydError::invalid("channels and d_model must be positive"));
        }
        if !(1..=8).contains(&self.heads) {
            return Err(AnydError::invalid(format!("heads must be in 1..=8, got {}", self.heads)));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(AnydError::invalid(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        Ok(())
    }
}

/// Learned region embedding matrix `E ∈ ℝ^{G×C}`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoEmbeddingTable {
    pub embedding: ParamId,
    pub region_names: Vec<String>,
    /// Rows stay on their node under federated training.
    pub private_in_federation: bool,
}

impl GeoEmbeddingTable {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        region_names: Vec<String>,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if region_names.is_empty() {
            return Err(AnydError::invalid("at least one region is required"));
        }
        let g = region_names.len();
        Ok(GeoEmbeddingTable {
            embedding: store.add("table.embedding", Tensor::randn(vec![g, channels], 1.0, rng))?,
            region_names,
            private_in_federation: true,
        })
    }

    pub fn regions(&self) -> usize {
        self.region_names.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    fn init(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gain: store.add(format!("{prefix}.gain"), Tensor::filled(vec![width], 1.0))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(vec![width]))?,
        })
    }

    fn apply(&self, tape: &mut Tape, vars: &Bindings, x: Var) -> Result<Var> {
        tape.layer_norm(x, vars[self.gain], vars[self.bias], LN_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoAttnParams {
    pub config: GeoConfig,
    /// Shared region token α, prepended to both token sequences.
    pub region_token: ParamId,
    pub lift_img: ParamId,
    pub lift_img_position: ParamId,
    pub lift_reg: ParamId,
    pub lift_reg_position: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub ln1_img: LayerNormParams,
    pub ln1_reg: LayerNormParams,
    pub ln2: LayerNormParams,
    pub head_mlps: Vec<HeadMlp>,
}

impl GeoAttnParams {
    /// Initialization puts every channel weight `Σ_h α̂_h ẑ[h, j]` near one:
    /// α starts at one and the per-channel position rows at `1/H`.
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: GeoConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, d, h, dh, m) = (cfg.channels, cfg.d_model, cfg.heads, cfg.head_dim(), cfg.mlp_hidden());
        let attn_std = 1.0 / (d as f64).sqrt();
        let position = |store: &mut ParamStore, name: &str, rng: &mut R| {
            let mut t = Tensor::randn(vec![c, d], 0.1, rng);
            t.data_mut().iter_mut().for_each(|v| *v += 1.0 / h as f64);
            store.add(name, t)
        };
        let region_token = store.add("geo.region_token", Tensor::filled(vec![d], 1.0))?;
        let lift_img = store.add("geo.lift_img", Tensor::randn(vec![1, d], 0.1, rng))?;
        let lift_img_position = position(store, "geo.lift_img_position", rng)?;
        let lift_reg = store.add("geo.lift_reg", Tensor::randn(vec![1, d], 0.1, rng))?;
        let lift_reg_position = position(store, "geo.lift_reg_position", rng)?;
        let w_q = store.add("geo.w_q", Tensor::randn(vec![d, d], attn_std, rng))?;
        let w_k = store.add("geo.w_k", Tensor::randn(vec![d, d], attn_std, rng))?;
        let w_v = store.add("geo.w_v", Tensor::randn(vec![d, d], attn_std, rng))?;
        let ln1_img = LayerNormParams::init(store, "geo.ln1_img", d)?;
        let ln1_reg = LayerNormParams::init(store, "geo.ln1_reg", d)?;
        let ln2 = LayerNormParams::init(store, "geo.ln2", d)?;
        let mut head_mlps = Vec::with_capacity(h);
        for k in 0..h {
            head_mlps.push(HeadMlp {
                w1: store.add(format!("geo.head{k}.w1"), Tensor::randn(vec![dh, m], (2.0 / dh as f64).sqrt(), rng))?,
                b1: store.add(format!("geo.head{k}.b1"), Tensor::zeros(vec![m]))?,
                w2: store.add(format!("geo.head{k}.w2"), Tensor::randn(vec![m, 1], 0.01, rng))?,
                b2: store.add(format!("geo.head{k}.b2"), Tensor::zeros(vec![1]))?,
            });
        }
        Ok(GeoAttnParams {
            config: cfg,
            region_token,
            lift_img,
            lift_img_position,
            lift_reg,
            lift_reg_position,
            w_q,
            w_k,
            w_v,
            ln1_img,
            ln1_reg,
            ln2,
            head_mlps,
        })
    }
}

/// Tape handles for the module outputs.
#[derive(Clone, Copy, Debug)]
pub struct GeoVars {
    /// `[grid_h, grid_w, C]`
    pub adapted: Var,
    /// `[H]`
    pub head_weights: Var,
    /// `[H, C]`
    pub channel_weights: Var,
}

/// Evaluated module outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoModuleOutput {
    pub adapted: Tensor,
    pub head_weights: Tensor,
    pub channel_weights: Tensor,
}

/// Validates a one-hot region vector and returns the hot index.
pub fn one_hot_index(g: &[f64], regions: usize) -> Result<usize> {
    if g.len() != regions {
        return Err(AnydError::invalid(format!("one-hot of length {} for {regions} regions", g.len())));
    }
    let ones: Vec<usize> = g.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
    if ones.len() != 1 || g.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(AnydError::invalid(format!("not a one-hot vector: {g:?}")));
    }
    Ok(ones[0])
}

pub fn one_hot(index: usize, regions: usize) -> Vec<f64> {
    let mut g = vec![0.0; regions];
    g[index] = 1.0;
    g
}

/// `e = gᵀE`: the row of the table selected by a one-hot `g`.
pub fn region_embed_lookup(tape: &mut Tape, vars: &Bindings, table: &GeoEmbeddingTable, g: &[f64]) -> Result<Var> {
    let idx = one_hot_index(g, table.regions())?;
    region_row(tape, vars, table, idx)
}

pub(crate) fn region_row(tape: &mut Tape, vars: &Bindings, table: &GeoEmbeddingTable, idx: usize) -> Result<Var> {
    if idx >= table.regions() {
        return Err(AnydError::invalid(format!("region {idx} outside table of {}", table.regions())));
    }
    let e = vars[table.embedding];
    let row = tape.slice(e, 0, idx, 1)?;
    let c = tape.shape(row)[1];
    tape.reshape(row, vec![c])
}

/// Lifts each of `C` channel scalars to a `d`-vector (shared `1→d` map plus the
/// channel's position row) and prepends the region token: `[(C+1), d]`.
fn lift_tokens(
    tape: &mut Tape,
    vars: &Bindings,
    p: &GeoAttnParams,
    scalars: Var,
    lift: ParamId,
    position: ParamId,
) -> Result<Var> {
    let c = p.config.channels;
    let column = tape.reshape(scalars, vec![c, 1])?;
    let lifted = tape.matmul(column, vars[lift])?;
    let lifted = tape.add(lifted, vars[position])?;
    let alpha = tape.reshape(vars[p.region_token], vec![1, p.config.d_model])?;
    tape.concat(&[alpha, lifted], 0)
}

/// Builds `(z_I, z_g)`, each `[(C+1), d]`, from features `[gh, gw, C]` and
/// a region embedding `[C]`. Features are mean-pooled over the grid.
pub fn build_tokens(
    tape: &mut Tape,
    vars: &Bindings,
    p: &GeoAttnParams,
    features: Var,
    embedding: Var,
) -> Result<(Var, Var)> {
    let c = p.config.channels;
    let fs = tape.shape(features).to_vec();
    if fs.len() != 3 || fs[2] != c || tape.shape(embedding) != [c] {
        return Err(AnydError::shape(format!(
            "geo tokens: features {fs:?}, embedding {:?}, channels {c}",
            tape.shape(embedding)
        )));
    }
    let cells = tape.reshape(features, vec![fs[0] * fs[1], c])?;
    let pooled = tape.mean_axis(cells, 0)?;
    let z_img = lift_tokens(tape, vars, p, pooled, p.lift_img, p.lift_img_position)?;
    let z_reg = lift_tokens(tape, vars, p, embedding, p.lift_reg, p.lift_reg_position)?;
    Ok((z_img, z_reg))
}

/// `softmax(Q Kᵀ · temperature) V` with the softmax over keys.
pub fn scaled_attention(tape: &mut Tape, q: Var, k: Var, v: Var, temperature: f64) -> Result<Var> {
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, temperature);
    let attn = tape.softmax(logits, 1)?;
    tape.matmul(attn, v)
}

/// Region tokens attend over image tokens, one head per `d/H` slice:
/// `Q = LN(z_g)W_Q`, `K = LN(z_I)W_K`, `V = LN(z_I)W_V`,
/// `head_h = z_I[:, h] + softmax(Q_h K_hᵀ / √d) V_h`.
///
/// Returns one `[(C+1), d/H]` tensor per head.
pub fn cross_attention_heads(
    tape: &mut Tape,
    vars: &Bindings,
    p: &GeoAttnParams,
    z_img: Var,
    z_reg: Var,
) -> Result<Vec<Var>> {
    let cfg = p.config;
    let (d, dh) = (cfg.d_model, cfg.head_dim());
    if tape.shape(z_img) != tape.shape(z_reg) || tape.shape(z_img).len() != 2 || tape.shape(z_img)[1] != d {
        return Err(AnydError::shape(format!("attention inputs {:?} / {:?}", tape.shape(z_img), tape.shape(z_reg))));
    }
    let ln_img = p.ln1_img.apply(tape, vars, z_img)?;
    let ln_reg = p.ln1_reg.apply(tape, vars, z_reg)?;
    let q = tape.matmul(ln_reg, vars[p.w_q])?;
    let k = tape.matmul(ln_img, vars[p.w_k])?;
    let v = tape.matmul(ln_img, vars[p.w_v])?;
    let temperature = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice(q, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        let mixed = scaled_attention(tape, qh, kh, vh, temperature)?;
        let residual = tape.slice(z_img, 1, h * dh, dh)?;
        heads.push(tape.add(residual, mixed)?);
    }
    Ok(heads)
}

/// Reduces every head's tokens to scalars: `ẑ[h, t] = mean(z_h[t]) + MLP_h(LN(z)[t, h])`.
///
/// `LN` runs over the full concatenated width `d`; `MLP_h` maps the head's slice
/// through one ReLU hidden layer to a scalar. Returns `ẑ` `[H, (C+1)]` and
/// `α̂ = ẑ[:, 0]` `[H]`.
pub fn head_reduce(tape: &mut Tape, vars: &Bindings, p: &GeoAttnParams, heads: &[Var]) -> Result<(Var, Var)> {
    let cfg = p.config;
    if heads.len() != cfg.heads {
        return Err(AnydError::shape(format!("{} head outputs for {} heads", heads.len(), cfg.heads)));
    }
    let tokens = tape.shape(heads[0])[0];
    let z = tape.concat(heads, 1)?;
    let normed = p.ln2.apply(tape, vars, z)?;
    let mut rows = Vec::with_capacity(cfg.heads);
    for (h, (&zh, mlp)) in heads.iter().zip(&p.head_mlps).enumerate() {
        let pooled = tape.mean_axis(zh, 1)?;
        let slice = tape.slice(normed, 1, h * cfg.head_dim(), cfg.head_dim())?;
        let hidden = tape.matmul(slice, vars[mlp.w1])?;
        let hidden = tape.add_last(hidden, vars[mlp.b1])?;
        let hidden = tape.relu(hidden);
        let out = tape.matmul(hidden, vars[mlp.w2])?;
        let out = tape.add_last(out, vars[mlp.b2])?;
        let out = tape.reshape(out, vec![tokens])?;
        rows.push(tape.add(pooled, out)?);
    }
    let z_hat = tape.stack(&rows)?;
    let alpha = tape.slice(z_hat, 1, 0, 1)?;
    let alpha = tape.reshape(alpha, vec![cfg.heads])?;
    Ok((z_hat, alpha))
}

/// `F_g[..., j] = (Σ_h α̂_h ẑ[h, j+1]) · F[..., j]`. Returns `(F_g, ẑ[:, 1..])`.
pub fn reweight_channels(tape: &mut Tape, features: Var, z_hat: Var, head_weights: Var) -> Result<(Var, Var)> {
    let zs = tape.shape(z_hat).to_vec();
    let c = zs[1] - 1;
    if *tape.shape(features).last().unwrap() != c || tape.shape(head_weights) != [zs[0]] {
        return Err(AnydError::shape(format!(
            "reweight: features {:?}, ẑ {zs:?}, α̂ {:?}",
            tape.shape(features),
            tape.shape(head_weights)
        )));
    }
    let channel_scores = tape.slice(z_hat, 1, 1, c)?;
    let row = tape.reshape(head_weights, vec![1, zs[0]])?;
    let mix = tape.matmul(row, channel_scores)?;
    let mix = tape.reshape(mix, vec![c])?;
    let adapted = tape.mul_last(features, mix)?;
    Ok((adapted, channel_scores))
}

/// Full module: lookup, tokens, cross attention, head reduction, re-weighting.
pub fn geo_forward(
    tape: &mut Tape,
    vars: &Bindings,
    p: &GeoAttnParams,
    table: &GeoEmbeddingTable,
    features: Var,
    region: usize,
) -> Result<GeoVars> {
    let e = region_row(tape, vars, table, region)?;
    let (z_img, z_reg) = build_tokens(tape, vars, p, features, e)?;
    let heads = cross_attention_heads(tape, vars, p, z_img, z_reg)?;
    let (z_hat, alpha) = head_reduce(tape, vars, p, &heads)?;
    let (adapted, channel_weights) = reweight_channels(tape, features, z_hat, alpha)?;
    Ok(GeoVars { adapted, head_weights: alpha, channel_weights })
}

/// Value-level [`geo_forward`] for a one-hot region vector.
pub fn geo_module(
    store: &ParamStore,
    p: &GeoAttnParams,
    table: &GeoEmbeddingTable,
    features: &Tensor,
    g: &[f64],
) -> Result<GeoModuleOutput> {
    let region = one_hot_index(g, table.regions())?;
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let f = tape.constant(features.clone());
    let out = geo_forward(&mut tape, &vars, p, table, f, region)?;
    Ok(GeoModuleOutput {
        adapted: tape.value(out.adapted).clone(),
        head_weights: tape.value(out.head_weights).clone(),
        channel_weights: tape.value(out.channel_weights).clone(),
    })
}
