use anyd::datakit::{generate_region_dataset, read_records, write_records, GeneratorOptions, RegionProfile};
use anyd::evalkit::{emit_report, evaluate, read_report};
use anyd::fedsim::{audit_message_log, run_federated, FedConfig, FedRunOptions};
use anyd::planner::{ModelConfig, ModelParams};
use anyd::trainer::{train_centralized, TrainConfig};

fn small_config(regions: Vec<String>) -> ModelConfig {
    ModelConfig {
        image_h: 8,
        image_w: 16,
        image_ch: 3,
        patch_h: 4,
        patch_w: 4,
        channels: 6,
        speed_dim: 3,
        d_model: 6,
        heads: 3,
        branch_hidden: [8, 8],
        regions,
    }
}

fn dataset(n: usize, seed: u64) -> Vec<anyd::datakit::DrivingRecord> {
    let opts = GeneratorOptions { image_h: 8, image_w: 16, kappa_thresh: 0.05 };
    generate_region_dataset(&RegionProfile::desk_set(), n, seed, &opts).unwrap()
}

#[test]
fn records_model_and_report_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(6, 1);
    let data_path = dir.path().join("data.jsonl");
    write_records(&data_path, &data).unwrap();
    assert_eq!(read_records(&data_path).unwrap(), data);

    let regions = RegionProfile::desk_set().into_iter().map(|p| p.name).collect();
    let cfg = TrainConfig { iterations: 20, batch_size: 4, seed: 2, ..TrainConfig::desk() };
    let (model, trace) = train_centralized(&data, &cfg, ModelParams::init(small_config(regions), 2).unwrap()).unwrap();
    assert_eq!(trace.len(), 20);
    assert!(trace.iter().all(|r| r.total.is_finite()));

    let model_path = dir.path().join("model.anyd");
    model.save(&model_path).unwrap();
    let loaded = ModelParams::load(&model_path).unwrap();
    assert_eq!(loaded.to_bytes(), model.to_bytes());

    let report = evaluate(&loaded, &dataset(3, 9), None).unwrap();
    assert_eq!(report.per_city.len(), 4);
    let report_path = dir.path().join("report.json");
    emit_report(&report, &report_path).unwrap();
    assert_eq!(read_report(&report_path).unwrap(), report);
    assert!(dir.path().join("report.csv").exists());
}

#[test]
fn federated_run_keeps_tables_private() {
    let data = dataset(5, 3);
    let regions = RegionProfile::desk_set().into_iter().map(|p| p.name).collect();
    let init = ModelParams::init(small_config(regions), 4).unwrap();
    let fed = FedConfig { rounds: 3, local_iterations: 2, seed: 5, ..FedConfig::paper() };
    let train = TrainConfig { batch_size: 3, ..TrainConfig::desk() };
    let mut log = Vec::new();
    let out = run_federated(
        &data,
        &init,
        &fed,
        &train,
        FedRunOptions { validation: Some(&data), parallel: false, message_log: Some(&mut log) },
    )
    .unwrap();
    assert_eq!(out.trace.len(), 3);
    assert!(out.trace.iter().all(|r| r.validation_ade.is_some_and(f64::is_finite)));
    let rows: Vec<Vec<f64>> = out.nodes.iter().map(|n| n.private_row().to_vec()).collect();
    let audit = audit_message_log(&log, &rows).unwrap();
    assert!(audit.clean());
    assert_eq!(audit.frames, 3 * 4 * 2);
}
