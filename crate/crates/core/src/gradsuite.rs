//! Finite-difference checks over every differentiable primitive, the losses
//! and the full model, shared by the `gradcheck` command and the tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datakit::{generate_region_dataset, GeneratorOptions, RegionProfile};
use crate::diffcore::{grad_check, grad_check_store, Tape, Tensor, Var, DEFAULT_STEP, LN_EPS};
use crate::error::Result;
use crate::losses::{bc_loss, cmd_contrastive_loss, geo_contrastive_loss, total_loss, LossWeights, SampleVars};
use crate::planner::{
    flatten_waypoints, forward_vars, Command, ModelConfig, ModelParams, Observation, BRANCH_OUT, COMMANDS,
};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCase {
    pub name: &'static str,
    pub max_rel_error: f64,
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Fixed random projection to a scalar, so every output coordinate counts.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(randn(tape.shape(v), seed));
    let m = tape.mul(v, w)?;
    Ok(tape.sum(m))
}

type CaseFn = fn(&mut Tape, &[Var]) -> Result<Var>;

fn primitive_cases() -> Vec<(&'static str, Vec<Tensor>, CaseFn)> {
    let a = randn(&[3, 4], 1);
    let b = randn(&[3, 4], 2);
    let row = randn(&[4], 3);
    let cube = randn(&[2, 3, 4], 4);
    vec![
        ("add/sub/mul/scale", vec![a.clone(), b.clone()], |t, v| {
            let x = t.add(v[0], v[1])?;
            let y = t.mul(x, v[1])?;
            let z = t.sub(y, v[0])?;
            let z = t.scale(z, 0.7);
            project(t, z, 10)
        }),
        ("add_last/mul_last", vec![a.clone(), row.clone()], |t, v| {
            let x = t.add_last(v[0], v[1])?;
            let y = t.mul_last(x, v[1])?;
            project(t, y, 11)
        }),
        ("matmul/transpose", vec![randn(&[3, 5], 5), randn(&[5, 2], 6)], |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let m = t.transpose(m)?;
            project(t, m, 12)
        }),
        ("relu", vec![cube.clone()], |t, v| {
            let x = t.relu(v[0]);
            project(t, x, 13)
        }),
        ("abs", vec![cube.clone()], |t, v| {
            let x = t.abs(v[0]);
            project(t, x, 14)
        }),
        ("softmax", vec![cube.clone()], |t, v| {
            let mut acc = Vec::new();
            for axis in 0..3 {
                let s = t.softmax(v[0], axis)?;
                acc.push(project(t, s, 15 + axis as u64)?);
            }
            let s = t.add(acc[0], acc[1])?;
            t.add(s, acc[2])
        }),
        ("mean_axis/sum/mean", vec![cube.clone()], |t, v| {
            let mut acc = t.mean(v[0]);
            for axis in 0..3 {
                let m = t.mean_axis(v[0], axis)?;
                let p = project(t, m, 18 + axis as u64)?;
                acc = t.add(acc, p)?;
            }
            let s = t.sum(v[0]);
            let s = t.scale(s, 0.1);
            t.add(acc, s)
        }),
        ("layer_norm", vec![randn(&[3, 6], 21), randn(&[6], 22), randn(&[6], 23)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], LN_EPS)?;
            project(t, y, 24)
        }),
        ("conv2d_3x3", vec![randn(&[3, 4, 2], 25), randn(&[3, 3, 2, 3], 26), randn(&[3], 27)], |t, v| {
            let y = t.conv2d_3x3(v[0], v[1], v[2])?;
            project(t, y, 28)
        }),
        ("concat/slice/reshape", vec![a.clone(), randn(&[2, 4], 29), randn(&[3, 2], 30)], |t, v| {
            let rows = t.concat(&[v[0], v[1]], 0)?;
            let cols = t.concat(&[v[0], v[2]], 1)?;
            let s1 = t.slice(rows, 0, 1, 3)?;
            let s2 = t.slice(cols, 1, 2, 4)?;
            let p = t.mul(s1, s2)?;
            let flat = t.reshape(p, vec![12])?;
            project(t, flat, 31)
        }),
        ("broadcast_rows/stack/gather", vec![row.clone(), a.clone()], |t, v| {
            let br = t.broadcast_rows(v[0], 3)?;
            let st = t.stack(&[br, v[1]])?;
            let g = t.gather(st, &[0, 5, 5, 23, 11])?;
            project(t, g, 32)
        }),
        ("row_norms/logsumexp", vec![randn(&[4, 3], 33)], |t, v| {
            let n = t.row_norms(v[0]);
            let s = t.scale(n, -1.3);
            Ok(t.logsumexp(s))
        }),
    ]
}

fn loss_batch(v: &[Var]) -> Vec<SampleVars> {
    let commands = [Command::Left, Command::Forward, Command::Right, Command::Left];
    let regions = [0, 1, 0, 1];
    (0..4)
        .map(|i| {
            let mut target = [0.0; BRANCH_OUT];
            for (k, x) in target.iter_mut().enumerate() {
                *x = ((i * 7 + k * 3) % 11) as f64 * 0.37 - 1.5;
            }
            SampleVars {
                branches: v[2 * i],
                head_weights: v[2 * i + 1],
                target,
                command: commands[i],
                region: regions[i],
            }
        })
        .collect()
}

fn loss_point() -> Vec<Tensor> {
    (0..4).flat_map(|i| [randn(&[COMMANDS, BRANCH_OUT], 40 + i), randn(&[3], 50 + i)]).collect()
}

fn loss_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("bc_loss", |t, v| {
            let b = loss_batch(v);
            bc_loss(t, &b)
        }),
        ("cmd_contrastive_loss", |t, v| {
            let b = loss_batch(v);
            cmd_contrastive_loss(t, &b, &LossWeights::default())
        }),
        ("geo_contrastive_loss", |t, v| {
            let b = loss_batch(v);
            geo_contrastive_loss(t, &b, &LossWeights { tau: 0.7, ..LossWeights::default() })
        }),
    ]
}

/// The small model used for the end-to-end check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_h: 8,
        image_w: 8,
        image_ch: 3,
        patch_h: 4,
        patch_w: 4,
        channels: 3,
        speed_dim: 2,
        d_model: 4,
        heads: 2,
        branch_hidden: [5, 4],
        regions: vec!["east".into(), "west".into()],
    }
}

fn full_model_case() -> Result<f64> {
    let mut model = ModelParams::init(tiny_model_config(), 7)?;
    // zero-initialized biases can put an L1 residual exactly on its kink;
    // jitter every parameter so the check runs at a generic point
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for p in model.store.iter_mut() {
        let noise = Tensor::randn(p.value.shape().to_vec(), 0.05, &mut rng);
        p.value.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
    let opts = GeneratorOptions { image_h: 8, image_w: 8, kappa_thresh: 0.05 };
    let recs = generate_region_dataset(&RegionProfile::conflict_pair(), 1, 11, &opts)?;
    let images: Vec<Tensor> = recs.iter().map(|r| r.image_tensor()).collect::<Result<_>>()?;
    let weights = LossWeights { lambda_c: 0.3, lambda_g: 0.2, ..LossWeights::default() };
    grad_check_store(
        &model.store,
        |tape, vars| {
            let mut batch = Vec::new();
            for (r, img) in recs.iter().zip(&images) {
                let region = model.config.region_index(&r.region_name).expect("known region");
                let out = forward_vars(tape, vars, &model, &Observation { image: img, speed: r.speed, region })?;
                batch.push(SampleVars {
                    branches: out.branches,
                    head_weights: out.head_weights,
                    target: flatten_waypoints(r.waypoints.as_ref().expect("generated records are labeled")),
                    command: r.command,
                    region,
                });
            }
            Ok(total_loss(tape, &batch, &weights, true)?.total)
        },
        DEFAULT_STEP,
    )
}

/// Every check with its maximum relative error.
pub fn run_suite() -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for (name, point, f) in primitive_cases() {
        out.push(GradCase { name, max_rel_error: grad_check(f, &point, DEFAULT_STEP)? });
    }
    let point = loss_point();
    for (name, f) in loss_cases() {
        out.push(GradCase { name, max_rel_error: grad_check(f, &point, DEFAULT_STEP)? });
    }
    out.push(GradCase { name: "model + total_loss (2 records)", max_rel_error: full_model_case()? });
    Ok(out)
}
