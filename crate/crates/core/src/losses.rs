//! Behavior cloning, command-contrastive and geo-contrastive losses.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{AnydError, Result};
use crate::planner::{flatten_waypoints, Command, WaypointSet, BRANCH_OUT, COMMANDS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_g: f64,
    /// Accepted for configuration compatibility; no loss term uses it.
    pub lambda_d: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_c: 1e-3, lambda_g: 1e-4, lambda_d: 1e-4, tau: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_c", self.lambda_c), ("lambda_g", self.lambda_g), ("lambda_d", self.lambda_d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AnydError::invalid(format!("{name} must be nonnegative")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(AnydError::invalid("tau must be positive"));
        }
        Ok(())
    }
}

/// One sample's model outputs on a tape together with its labels.
#[derive(Clone, Copy, Debug)]
pub struct SampleVars {
    /// `[3, 10]`
    pub branches: Var,
    /// `[H]`
    pub head_weights: Var,
    pub target: [f64; BRANCH_OUT],
    pub command: Command,
    pub region: usize,
}

fn check_batch(tape: &Tape, batch: &[SampleVars]) -> Result<()> {
    if batch.is_empty() {
        return Err(AnydError::invalid("empty batch"));
    }
    for s in batch {
        if tape.shape(s.branches) != [COMMANDS, BRANCH_OUT] {
            return Err(AnydError::shape(format!("branch outputs {:?}", tape.shape(s.branches))));
        }
    }
    Ok(())
}

/// Mean over the batch of the gt-command branch's mean absolute error.
pub fn bc_loss(tape: &mut Tape, batch: &[SampleVars]) -> Result<Var> {
    check_batch(tape, batch)?;
    let mut terms = Vec::with_capacity(batch.len());
    for s in batch {
        let row = tape.slice(s.branches, 0, s.command.index(), 1)?;
        let row = tape.reshape(row, vec![BRANCH_OUT])?;
        let y = tape.constant(Tensor::vector(s.target.to_vec())?);
        let d = tape.sub(row, y)?;
        let a = tape.abs(d);
        terms.push(tape.mean(a));
    }
    let all = tape.concat(&terms, 0)?;
    Ok(tape.mean(all))
}

/// Softmax over the three branches of `−‖ŷ^c − y‖/τ`, scored at the gt command.
pub fn cmd_contrastive_loss(tape: &mut Tape, batch: &[SampleVars], w: &LossWeights) -> Result<Var> {
    check_batch(tape, batch)?;
    let mut terms = Vec::with_capacity(batch.len());
    for s in batch {
        let y = tape.constant(Tensor::vector(s.target.to_vec())?);
        let ys = tape.broadcast_rows(y, COMMANDS)?;
        let diff = tape.sub(s.branches, ys)?;
        let dist = tape.row_norms(diff);
        let logits = tape.scale(dist, -1.0 / w.tau);
        let lse = tape.logsumexp(logits);
        let pos = tape.gather(logits, &[s.command.index()])?;
        terms.push(tape.sub(lse, pos)?);
    }
    let all = tape.concat(&terms, 0)?;
    Ok(tape.mean(all))
}

/// Supervised contrast over head weights with same-region positives:
/// per anchor `(1/|P|)·(log Σ_P exp(−‖α̂_i−α̂_p‖/τ) − log Σ_A exp(−‖α̂_i−α̂_a‖/τ))`,
/// negated and averaged over anchors that have at least one positive.
/// Returns a zero constant when no anchor has a positive.
pub fn geo_contrastive_loss(tape: &mut Tape, batch: &[SampleVars], w: &LossWeights) -> Result<Var> {
    check_batch(tape, batch)?;
    let n = batch.len();
    let heads: Vec<Var> = batch.iter().map(|s| s.head_weights).collect();
    let alpha = tape.stack(&heads)?;
    let h = tape.shape(alpha)[1];
    let mut terms = Vec::new();
    for (i, s) in batch.iter().enumerate() {
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && batch[j].region == s.region).collect();
        if positives.is_empty() {
            continue;
        }
        let all: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let anchor = tape.reshape(s.head_weights, vec![h])?;
        let anchor = tape.broadcast_rows(anchor, n)?;
        let diff = tape.sub(alpha, anchor)?;
        let dist = tape.row_norms(diff);
        let logits = tape.scale(dist, -1.0 / w.tau);
        let pos = tape.gather(logits, &positives)?;
        let pos = tape.logsumexp(pos);
        let every = tape.gather(logits, &all)?;
        let every = tape.logsumexp(every);
        let term = tape.sub(pos, every)?;
        terms.push(tape.scale(term, 1.0 / positives.len() as f64));
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let all = tape.concat(&terms, 0)?;
    let m = tape.mean(all);
    Ok(tape.scale(m, -1.0))
}

/// Handles for every loss term of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub bc: Var,
    pub cmd: Var,
    /// Absent when the geo term is excluded.
    pub geo: Option<Var>,
}

/// `L = L_BC + λ_c·L_cmd + λ_g·L_geo`; the geo term is dropped when
/// `include_geo` is false.
pub fn total_loss(tape: &mut Tape, batch: &[SampleVars], w: &LossWeights, include_geo: bool) -> Result<LossVars> {
    w.validate()?;
    let bc = bc_loss(tape, batch)?;
    let cmd = cmd_contrastive_loss(tape, batch, w)?;
    let scaled = tape.scale(cmd, w.lambda_c);
    let mut total = tape.add(bc, scaled)?;
    let geo = if include_geo {
        let g = geo_contrastive_loss(tape, batch, w)?;
        let scaled = tape.scale(g, w.lambda_g);
        total = tape.add(total, scaled)?;
        Some(g)
    } else {
        None
    };
    Ok(LossVars { total, bc, cmd, geo })
}

/// Evaluated outputs of one sample, for computing losses outside training.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub branches: [WaypointSet; COMMANDS],
    pub head_weights: Vec<f64>,
    pub target: WaypointSet,
    pub command: Command,
    pub region: usize,
}

fn on_tape(tape: &mut Tape, batch: &[SampleOutput]) -> Result<Vec<SampleVars>> {
    batch
        .iter()
        .map(|s| {
            let flat: Vec<f64> = s.branches.iter().flat_map(flatten_waypoints).collect();
            Ok(SampleVars {
                branches: tape.constant(Tensor::matrix(COMMANDS, BRANCH_OUT, flat)?),
                head_weights: tape.constant(Tensor::vector(s.head_weights.clone())?),
                target: flatten_waypoints(&s.target),
                command: s.command,
                region: s.region,
            })
        })
        .collect()
}

fn evaluate_with<F>(batch: &[SampleOutput], f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &[SampleVars]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = on_tape(&mut tape, batch)?;
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

pub fn bc_loss_value(batch: &[SampleOutput]) -> Result<f64> {
    evaluate_with(batch, bc_loss)
}

pub fn cmd_contrastive_value(batch: &[SampleOutput], w: &LossWeights) -> Result<f64> {
    evaluate_with(batch, |t, b| cmd_contrastive_loss(t, b, w))
}

pub fn geo_contrastive_value(batch: &[SampleOutput], w: &LossWeights) -> Result<f64> {
    evaluate_with(batch, |t, b| geo_contrastive_loss(t, b, w))
}

pub fn total_loss_value(batch: &[SampleOutput], w: &LossWeights, include_geo: bool) -> Result<f64> {
    evaluate_with(batch, |t, b| Ok(total_loss(t, b, w, include_geo)?.total))
}
