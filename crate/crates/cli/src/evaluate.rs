use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;

use anyhow::{Context, Result};
use flowpose::eval::{average_recall, evaluate_estimate, read_estimates, EstimateErrors, EvalTarget, SymmetrySet};
use flowpose::refine::TraceRecord;
use flowpose::scene::read_depth;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::output::{cell, read_csv, write_csv};
use crate::run::{SummaryRow, SUMMARY_SCHEMA};
use crate::scenes;

pub const ERRORS_SCHEMA: &str = "flowpose-errors v1";
pub const AR_SCHEMA: &str = "flowpose-ar v1";
pub const SERIES_SCHEMA: &str = "flowpose-series v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub scene_id: u64,
    pub estimate: String,
    pub vsd_mean: Option<f64>,
    pub mssd_mm: Option<f64>,
    pub mspd_px: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// Recall summary of an evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub ar: f64,
    pub ar_vsd: f64,
    pub ar_mssd: f64,
    pub ar_mspd: f64,
    pub scenes: usize,
    pub missing: Vec<u64>,
}

/// `eval`: per-scene errors and average recall. Scenes without an estimate
/// score as failures. Thresholds are resolved per mesh; recalls pool over
/// all scenes.
pub fn cmd_eval(estimates: &Path, scenes_root: &Path, out: &Path, config: &RunConfig) -> Result<EvalSummary> {
    let file = File::open(estimates).with_context(|| format!("opening {}", estimates.display()))?;
    let records = read_estimates(BufReader::new(file)).with_context(|| format!("reading {}", estimates.display()))?;
    let mut best: BTreeMap<u64, &flowpose::eval::PoseEstimateRecord> = BTreeMap::new();
    for r in &records {
        match best.get(&r.scene_id) {
            Some(b) if b.score >= r.score => {}
            _ => {
                best.insert(r.scene_id, r);
            }
        }
    }
    let dirs = scenes::scene_dirs(scenes_root)?;
    let per_scene: Vec<(u64, String, f64, EstimateErrors, flowpose::eval::Thresholds)> = dirs
        .par_iter()
        .map(|dir| -> Result<_> {
            let sc = scenes::read_config(dir)?;
            let mesh = sc.mesh.load()?;
            let thresholds = config.thresholds.resolve(sc.diameter, sc.camera.width)?;
            let id = sc.id as u64;
            let errors = match best.get(&id) {
                Some(rec) => {
                    let depth = read_depth(BufReader::new(File::open(dir.join("depth.bin"))?))?;
                    let sym = SymmetrySet::identity();
                    let target =
                        EvalTarget { gt: sc.gt_pose, mesh: &mesh, camera: sc.camera, observed_depth: &depth, symmetries: &sym };
                    evaluate_estimate(&rec.pose, &target, &thresholds)?
                }
                None => EstimateErrors::missing(thresholds.vsd_taus.len()),
            };
            Ok((id, sc.mesh.source.clone(), sc.diameter, errors, thresholds))
        })
        .collect::<Result<_>>()?;

    let mut groups: BTreeMap<String, (Vec<EstimateErrors>, flowpose::eval::Thresholds)> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for (id, source, dia, errors, th) in per_scene {
        let found = best.contains_key(&id);
        if !found {
            missing.push(id);
        }
        rows.push(ErrorRow {
            scene_id: id,
            estimate: if found { "found".into() } else { "missing".into() },
            vsd_mean: cell(errors.vsd.iter().sum::<f64>() / errors.vsd.len().max(1) as f64),
            mssd_mm: cell(errors.mssd * 1e3),
            mspd_px: cell(errors.mspd),
        });
        let key = format!("{source}@{dia}");
        groups.entry(key).or_insert_with(|| (Vec::new(), th)).0.push(errors);
    }
    let total = rows.len();
    let (mut ar, mut vsd, mut mssd, mut mspd) = (0.0, 0.0, 0.0, 0.0);
    for (errors, th) in groups.values() {
        let r = average_recall(errors, th)?;
        let w = errors.len() as f64 / total as f64;
        ar += w * r.ar;
        vsd += w * r.ar_vsd;
        mssd += w * r.ar_mssd;
        mspd += w * r.ar_mspd;
    }
    let known: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.scene_id).collect();
    let unknown = best.keys().filter(|k| !known.contains(k)).count();
    if unknown > 0 {
        eprintln!("warning: {unknown} estimates refer to unknown scenes and were ignored");
    }
    if !missing.is_empty() {
        let ids: Vec<String> = missing.iter().map(|i| i.to_string()).collect();
        eprintln!("warning: {} of {total} scenes have no estimate: {}", missing.len(), ids.join(","));
    }
    let dir = out.join("eval");
    write_csv(&dir.join("errors.csv"), ERRORS_SCHEMA, &rows)?;
    let metrics = [
        ("ar", ar),
        ("ar_vsd", vsd),
        ("ar_mssd", mssd),
        ("ar_mspd", mspd),
        ("scenes", total as f64),
        ("missing", missing.len() as f64),
    ];
    let metrics: Vec<MetricRow> = metrics.iter().map(|(m, v)| MetricRow { metric: m.to_string(), value: *v }).collect();
    write_csv(&dir.join("ar.csv"), AR_SCHEMA, &metrics)?;
    println!("AR {ar:.4} (VSD {vsd:.4}, MSSD {mssd:.4}, MSPD {mspd:.4}) over {total} scenes");
    Ok(EvalSummary { ar, ar_vsd: vsd, ar_mssd: mssd, ar_mspd: mspd, scenes: total, missing })
}

/// ADD (mm) after every inner update, one sequence per trace file.
fn read_traces(dir: &Path) -> Result<Vec<Vec<TraceRecord>>> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("reading trace directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).with_context(|| format!("parsing {}", p.display())))
                .collect()
        })
        .collect()
}

/// Mean over scenes of a per-scene sequence; a scene that stopped early
/// keeps contributing its last value.
fn mean_series(seqs: &[Vec<f64>]) -> Vec<Point> {
    let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let vals: Vec<f64> = seqs.iter().filter_map(|s| s.get(i).or(s.last()).copied()).collect();
            Point { x: (i + 1) as f64, y: vals.iter().sum::<f64>() / vals.len() as f64 }
        })
        .collect()
}

/// Error-vs-iteration series from refine traces: per inner update and per
/// outer iteration, mean ADD in mm.
pub fn iteration_series(traces: &Path) -> Result<(Vec<Point>, Vec<Point>)> {
    let traces = read_traces(traces)?;
    let add = |r: &TraceRecord| r.add.map(|a| a * 1e3);
    let inner: Vec<Vec<f64>> = traces.iter().map(|t| t.iter().filter_map(add).collect()).collect();
    let outer: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| {
            let last_outer = t.iter().map(|r| r.outer).max().unwrap_or(0);
            (1..=last_outer).filter_map(|k| t.iter().filter(|r| r.outer == k).last().and_then(add)).collect()
        })
        .collect();
    Ok((mean_series(&inner), mean_series(&outer)))
}

pub fn write_series(traces: &Path, dir: &Path) -> Result<(Vec<Point>, Vec<Point>)> {
    let (inner, outer) = iteration_series(traces)?;
    write_csv(&dir.join("add_vs_update.csv"), SERIES_SCHEMA, &inner)?;
    write_csv(&dir.join("add_vs_outer.csv"), SERIES_SCHEMA, &outer)?;
    Ok((inner, outer))
}

/// `report`: plot series from traces and a digest of the summary next to them.
pub fn cmd_report(traces: &Path, out: &Path) -> Result<()> {
    let dir = out.join("report");
    let (inner, outer) = write_series(traces, &dir)?;
    println!("series of {} updates written to {}", inner.len(), dir.display());
    for p in &outer {
        println!("outer {:>2}: mean ADD {:.3} mm", p.x, p.y);
    }
    let summary = traces.parent().map(|p| p.join("summary.csv"));
    if let Some(path) = summary.filter(|p| p.is_file()) {
        let rows: Vec<SummaryRow> = read_csv(&path, SUMMARY_SCHEMA)?;
        let ok = rows.iter().filter(|r| r.success).count();
        let renders = rows.iter().map(|r| r.renders).sum::<usize>() as f64 / rows.len().max(1) as f64;
        println!("{ok}/{} scenes within 1 deg / 5 mm, {renders:.1} renders per scene", rows.len());
    }
    Ok(())
}
