use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{grad_check_store, DEFAULT_STEP};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_h: 8,
        image_w: 8,
        image_ch: 1,
        patch_h: 4,
        patch_w: 4,
        channels: 3,
        speed_dim: 2,
        d_model: 4,
        heads: 2,
        branch_hidden: [5, 4],
        regions: vec!["a".into(), "b".into()],
    }
}

fn image(seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![8, 8, 1], (0..64).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn command_indices_and_names() {
    assert_eq!(Command::Left.index(), 0);
    assert_eq!(Command::Forward.index(), 1);
    assert_eq!(Command::Right.index(), 2);
    assert_eq!("right".parse::<Command>().unwrap(), Command::Right);
    assert!("up".parse::<Command>().is_err());
    assert_eq!(serde_json::to_string(&Command::Forward).unwrap(), "\"forward\"");
}

#[test]
fn forward_shapes_and_determinism() {
    let m = ModelParams::init(tiny_config(), 3).unwrap();
    let img = image(1);
    let obs = Observation { image: &img, speed: 5.0, region: 1 };
    let a = forward_all_branches(&m, &obs).unwrap();
    assert_eq!(a.head_weights.len(), 2);
    let b = forward_all_branches(&m, &obs).unwrap();
    assert_eq!(a, b);
    assert_eq!(ModelParams::init(tiny_config(), 3).unwrap(), m);
}

#[test]
fn select_returns_branch_unchanged() {
    let m = ModelParams::init(tiny_config(), 3).unwrap();
    let img = image(2);
    let pred = forward_all_branches(&m, &Observation { image: &img, speed: 2.0, region: 0 }).unwrap();
    assert_eq!(select_command(&pred.branches, Command::Left), pred.branches[0]);
    assert_eq!(select_command(&pred.branches, Command::Right), pred.branches[2]);
    for c in Command::ALL {
        let s = select_command(&pred.branches, c);
        let bits = |w: &WaypointSet| w.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&s), bits(&pred.branches[c.index()]));
    }
}

#[test]
fn fuse_shape_and_zero_input() {
    let mut m = ModelParams::init(tiny_config(), 4).unwrap();
    let bias = m.planner.fusion_bias;
    m.store.get_mut(bias).value = Tensor::vector(vec![0.3, -0.2, 1.5]).unwrap();
    let mut tape = Tape::new();
    let vars = m.store.bind(&mut tape);
    let fg = tape.constant(Tensor::zeros(vec![2, 2, 3]));
    let sp = tape.constant(Tensor::zeros(vec![2]));
    let out = fuse(&mut tape, &vars, &m.planner, fg, sp).unwrap();
    let out = tape.value(out);
    assert_eq!(out.shape(), &[2, 2, 3]);
    for cell in 0..4 {
        assert_eq!(&out.data()[cell * 3..cell * 3 + 3], &[0.3, 0.0, 1.5]);
    }
    let bad = tape.constant(Tensor::zeros(vec![2, 2]));
    assert!(fuse(&mut tape, &vars, &m.planner, bad, sp).is_err());
}

#[test]
fn fuse_is_shift_equivariant_inside() {
    let cfg = ModelConfig { image_h: 24, image_w: 24, patch_h: 4, patch_w: 4, ..tiny_config() };
    let m = ModelParams::init(cfg, 5).unwrap();
    // 6×6 grid; the input is nonzero only in the central 2×2 block, so shifting
    // by one cell keeps every receptive field away from the border
    let mut base = vec![0.0; 6 * 6 * 3];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (i, j) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
        for c in 0..3 {
            base[(i * 6 + j) * 3 + c] = rand::Rng::random::<f64>(&mut rng) - 0.5;
        }
    }
    let mut shifted = vec![0.0; base.len()];
    for i in 0..5 {
        for j in 0..5 {
            for c in 0..3 {
                shifted[((i + 1) * 6 + j + 1) * 3 + c] = base[(i * 6 + j) * 3 + c];
            }
        }
    }
    let run = |data: Vec<f64>| {
        let mut tape = Tape::new();
        let vars = m.store.bind(&mut tape);
        let fg = tape.constant(Tensor::new(vec![6, 6, 3], data).unwrap());
        let sp = tape.constant(Tensor::vector(vec![0.4, 0.1]).unwrap());
        let out = fuse(&mut tape, &vars, &m.planner, fg, sp).unwrap();
        tape.value(out).clone()
    };
    let (a, b) = (run(base), run(shifted));
    for i in 1..4 {
        for j in 1..4 {
            for c in 0..3 {
                let p = a.data()[(i * 6 + j) * 3 + c];
                let q = b.data()[((i + 1) * 6 + j + 1) * 3 + c];
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn branch_parameters_are_isolated() {
    let m = ModelParams::init(tiny_config(), 7).unwrap();
    let img = image(3);
    let obs = Observation { image: &img, speed: 4.0, region: 0 };
    let before = forward_all_branches(&m, &obs).unwrap();
    for j in 0..COMMANDS {
        let mut p = m.clone();
        for id in p.planner.branches[j].ids() {
            p.store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v += 0.25);
        }
        let after = forward_all_branches(&p, &obs).unwrap();
        for c in 0..COMMANDS {
            assert_eq!(after.branches[c] == before.branches[c], c != j, "perturbed {j}, branch {c}");
        }
    }
}

#[test]
fn region_reaches_output() {
    let m = ModelParams::init(tiny_config(), 8).unwrap();
    let img = image(4);
    let a = forward_all_branches(&m, &Observation { image: &img, speed: 3.0, region: 0 }).unwrap();
    let b = forward_all_branches(&m, &Observation { image: &img, speed: 3.0, region: 1 }).unwrap();
    for c in 0..COMMANDS {
        assert_ne!(a.branches[c], b.branches[c]);
    }
}

#[test]
fn end_to_end_l1_gradient() {
    let m = ModelParams::init(tiny_config(), 9).unwrap();
    let img = image(5);
    let gt: Vec<f64> = (0..10).map(|k| k as f64 * 0.7 - 2.0).collect();
    let err = grad_check_store(
        &m.store,
        |tape, vars| {
            let out = forward_vars(tape, vars, &m, &Observation { image: &img, speed: 6.0, region: 1 })?;
            let branch = tape.slice(out.branches, 0, 2, 1)?;
            let branch = tape.reshape(branch, vec![BRANCH_OUT])?;
            let y = tape.constant(Tensor::vector(gt.clone())?);
            let d = tape.sub(branch, y)?;
            let a = tape.abs(d);
            Ok(tape.mean(a))
        },
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn model_file_round_trip() {
    let m = ModelParams::init(tiny_config(), 10).unwrap();
    let bytes = m.to_bytes();
    assert_eq!(&bytes[..5], MAGIC);
    let back = ModelParams::from_bytes(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_bytes(), bytes);

    let (manifest, payload) = split_blob(&bytes).unwrap();
    let table = manifest.table.unwrap();
    assert_eq!(table.byte_offset + table.byte_len, payload.len());
    assert_eq!(table.region_names, vec!["a", "b"]);
    let e = &m.store.get(m.table.embedding).value;
    let tail: Vec<f64> =
        payload[table.byte_offset..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(tail, e.data());
    assert_eq!(manifest.params.iter().filter(|p| p.table).count(), 1);
}

#[test]
fn model_file_rejects_garbage() {
    assert!(ModelParams::from_bytes(b"ANYD0").is_err());
    let mut bytes = ModelParams::init(tiny_config(), 11).unwrap().to_bytes();
    bytes.pop();
    assert!(ModelParams::from_bytes(&bytes).is_err());
}

#[test]
fn config_validation() {
    let mut cfg = tiny_config();
    cfg.regions = vec!["a".into(), "a".into()];
    assert!(cfg.validate().is_err());
    let cfg = ModelConfig { heads: 3, ..tiny_config() };
    assert!(cfg.validate().is_err());
    ModelConfig::desk(vec!["x".into()]).validate().unwrap();
}
