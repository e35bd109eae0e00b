use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyd::datakit::{
    generate_region_dataset, inject_gps_noise, kmeans_cluster, read_records, write_records, DrivingRecord,
};
use anyd::evalkit::{csv_sidecar_path, emit_report, evaluate};
use anyd::fedsim::{run_federated, write_round_trace_csv, FedRunOptions};
use anyd::gradsuite::{run_suite, TOLERANCE};
use anyd::planner::{ModelConfig, ModelParams};
use anyd::seed::derive_seed;
use anyd::trainer::{run_ssl, train_centralized, write_trace_csv};
use anyd::AnydError;

use crate::config::RunConfig;
use crate::failure::Failure;

type Outcome = Result<(), Failure>;

/// Sub-seeds of the run seed, one per consumer.
const NOISE_STREAM: u64 = 1;

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Run(AnydError::Data(format!("{}: {e}", path.display())))
}

/// Region names ordered by region id; one id must not carry two names.
pub fn regions_of<'a>(sets: impl IntoIterator<Item = &'a [DrivingRecord]>) -> Result<Vec<String>, Failure> {
    let mut by_id: Vec<(usize, String)> = Vec::new();
    for r in sets.into_iter().flatten() {
        match by_id.iter().find(|(id, _)| *id == r.region_id) {
            Some((_, name)) if name != &r.region_name => {
                return Err(Failure::Run(AnydError::Data(format!(
                    "{}: region id {} is both {name} and {}",
                    r.id, r.region_id, r.region_name
                ))));
            }
            Some(_) => {}
            None => by_id.push((r.region_id, r.region_name.clone())),
        }
    }
    if by_id.is_empty() {
        return Err(Failure::Run(AnydError::Data("dataset is empty".into())));
    }
    by_id.sort();
    Ok(by_id.into_iter().map(|(_, n)| n).collect())
}

fn load_records(path: &Path) -> Result<Vec<DrivingRecord>, Failure> {
    read_records(path).map_err(|e| match e {
        AnydError::Io(e) => io_err(path, e),
        AnydError::Format { line, reason } => {
            Failure::Run(AnydError::Format { line, reason: format!("{}: {reason}", path.display()) })
        }
        other => Failure::Run(other),
    })
}

fn model_config(cfg: &RunConfig, regions: Vec<String>) -> Result<ModelConfig, Failure> {
    let mc = cfg.model.with_regions(regions);
    mc.validate().map_err(|e| Failure::Usage(format!("model: {e}")))?;
    Ok(mc)
}

pub fn generate(cfg: &RunConfig, out: &Path, strip_labels: bool) -> Outcome {
    if cfg.model.image_ch != 3 {
        return Err(Failure::Usage(format!(
            "model.image_ch: the generator renders 3 channels, got {}",
            cfg.model.image_ch
        )));
    }
    let profiles = cfg.data.profiles.resolve();
    let clean = generate_region_dataset(&profiles, cfg.data.n_per_region, cfg.seed, &cfg.generator())?;
    let mut records = inject_gps_noise(&clean, cfg.data.sigma_noise, derive_seed(cfg.seed, &[NOISE_STREAM]))?;
    if strip_labels {
        records.iter_mut().for_each(|r| r.waypoints = None);
    }
    write_records(out, &records)?;
    println!("wrote {} records ({} regions) to {}", records.len(), profiles.len(), out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, trace: Option<&Path>) -> Outcome {
    let records = load_records(data)?;
    let mc = model_config(cfg, regions_of([records.as_slice()])?)?;
    let init = ModelParams::init(mc, cfg.seed)?;
    let (model, rows) = train_centralized(&records, &cfg.train(), init)?;
    model.save(out)?;
    let trace = trace.map(Path::to_path_buf).unwrap_or_else(|| sibling(out, "loss.csv"));
    write_trace_csv(&trace, &rows)?;
    if let Some(last) = rows.last() {
        println!("trained {} iterations, final loss {:.6}", rows.len(), last.total);
    }
    println!("model {} trace {}", out.display(), trace.display());
    Ok(())
}

pub struct FederateArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub trace: Option<&'a Path>,
    pub message_log: Option<&'a Path>,
    pub validation: Option<&'a Path>,
}

pub fn federate(cfg: &RunConfig, args: FederateArgs<'_>) -> Outcome {
    let records = load_records(args.data)?;
    let validation = args.validation.map(load_records).transpose()?;
    let mc = model_config(cfg, regions_of([records.as_slice()])?)?;
    let init = ModelParams::init(mc, cfg.seed)?;
    let mut log = match args.message_log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?)),
        None => None,
    };
    let opts = FedRunOptions {
        validation: validation.as_deref(),
        parallel: true,
        message_log: log.as_mut().map(|w| w as &mut dyn Write),
    };
    let outcome = run_federated(&records, &init, &cfg.fed(), &cfg.train(), opts)?;
    if let Some(mut w) = log {
        w.flush().map_err(AnydError::from)?;
    }
    outcome.model.save(args.out)?;
    let trace = args.trace.map(Path::to_path_buf).unwrap_or_else(|| sibling(args.out, "rounds.csv"));
    let regions: Vec<String> = outcome.nodes.iter().map(|n| n.region.clone()).collect();
    write_round_trace_csv(&trace, &regions, &outcome.trace)?;
    println!(
        "{} rounds over {} nodes ({} local steps per node), model {} trace {}",
        outcome.trace.len(),
        outcome.nodes.len(),
        outcome.local_steps,
        args.out.display(),
        trace.display()
    );
    Ok(())
}

pub fn ssl(cfg: &RunConfig, labeled: &Path, unlabeled: &Path, out: &Path, labels: Option<&Path>) -> Outcome {
    let lab = load_records(labeled)?;
    let unl = load_records(unlabeled)?;
    let mc = model_config(cfg, regions_of([lab.as_slice(), unl.as_slice()])?)?;
    let outcome = run_ssl(&lab, &unl, &mc, &cfg.train(), &cfg.ssl)?;
    outcome.model.save(out)?;
    write_trace_csv(&sibling(out, "loss.csv"), &outcome.trace)?;
    if let Some(p) = labels {
        let mut w = BufWriter::new(File::create(p).map_err(|e| io_err(p, e))?);
        for l in &outcome.kept {
            serde_json::to_writer(&mut w, l).map_err(AnydError::from)?;
            w.write_all(b"\n").map_err(AnydError::from)?;
        }
        w.flush().map_err(AnydError::from)?;
    }
    println!(
        "kept {} of {} pseudo-labels (threshold {:.6}), model {}",
        outcome.kept.len(),
        outcome.labels.len(),
        outcome.threshold,
        out.display()
    );
    Ok(())
}

pub fn eval(model: &Path, data: &Path, report: &Path, tags: Option<&[String]>) -> Outcome {
    let m = ModelParams::load(model)?;
    let records = load_records(data)?;
    let r = evaluate(&m, &records, tags)?;
    emit_report(&r, report)?;
    for (city, s) in &r.per_city {
        println!("{city:<16} ade {:.4} fde {:.4} n {}", s.ade, s.fde, s.n);
    }
    println!("balanced ade {:.4} fde {:.4}", r.balanced_ade, r.balanced_fde);
    println!("report {} ({})", report.display(), csv_sidecar_path(report).display());
    Ok(())
}

pub fn gradcheck() -> Outcome {
    let cases = run_suite()?;
    let mut worst = 0.0f64;
    for c in &cases {
        println!("{:<36} {:.3e}", c.name, c.max_rel_error);
        worst = worst.max(c.max_rel_error);
    }
    println!("max relative error {worst:.3e} (tolerance {TOLERANCE:.0e})");
    if worst <= TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Run(AnydError::Numeric { iteration: 0, reason: format!("gradient check error {worst:.3e}") }))
    }
}

pub fn cluster(cfg: &RunConfig, points: &Path, k: usize, out: &Path) -> Outcome {
    let mut reader = csv::Reader::from_path(points).map_err(|e| io_err(points, e))?;
    let mut pts = Vec::new();
    for (i, row) in reader.deserialize::<(f64, f64)>().enumerate() {
        let (x, y) = row.map_err(|e| Failure::Run(AnydError::Format { line: i + 2, reason: e.to_string() }))?;
        pts.push([x, y]);
    }
    let result = kmeans_cluster(&pts, k, cfg.seed)?;
    let mut w = csv::Writer::from_path(out).map_err(|e| io_err(out, e))?;
    w.write_record(["x", "y", "cluster"]).map_err(|e| io_err(out, e))?;
    for (p, c) in pts.iter().zip(&result.assignments) {
        w.write_record([p[0].to_string(), p[1].to_string(), c.to_string()]).map_err(|e| io_err(out, e))?;
    }
    w.flush().map_err(AnydError::from)?;
    for (i, c) in result.centroids.iter().enumerate() {
        println!("centroid {i}: ({:.6}, {:.6})", c[0], c[1]);
    }
    println!("{} points, {} iterations, assignments {}", pts.len(), result.iterations, out.display());
    Ok(())
}
