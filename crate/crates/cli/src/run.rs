use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Result};
use flowpose::coarse::{
    coarse_estimate, naive_estimate, scoring_camera, CoarseParams, Hypothesis, OracleAddScorer, OracleGeodesicScorer,
    Provenance, Scorer, SilhouetteScorer,
};
use flowpose::eval::PoseEstimateRecord;
use flowpose::geom::Pose;
use flowpose::refine::{
    add_distance, multi_hypothesis_refine, refine, scene_provider, RefineInputs, RefineTrace, RefinerConfig,
};
use flowpose::render::Renderer;
use flowpose::scene::derive_seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::output::{cell, write_atomic, write_csv};
use crate::scenes::{self, scene_dir_name, LoadedScene};

pub const SUMMARY_SCHEMA: &str = "flowpose-summary v1";
pub const COARSE_SCHEMA: &str = "flowpose-coarse v1";
pub const ABLATION_SCHEMA: &str = "flowpose-ablation v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ScorerKind {
    Silhouette,
    OracleGeodesic,
    OracleAdd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum InitKind {
    /// Ground truth with the scene's perturbation noise.
    Perturbed,
    /// Best coarse hypotheses.
    Coarse,
}

fn make_scorer(kind: ScorerKind, ls: &LoadedScene) -> Box<dyn Scorer> {
    match kind {
        ScorerKind::Silhouette => Box::new(SilhouetteScorer),
        ScorerKind::OracleGeodesic => Box::new(OracleGeodesicScorer { gt: ls.scene.gt_pose.rotation }),
        ScorerKind::OracleAdd => {
            Box::new(OracleAddScorer { gt: ls.scene.gt_pose, points: ls.mesh.model_points().to_vec() })
        }
    }
}

fn coarse_params(config: &RunConfig, m: usize, n: usize, seed: u64) -> CoarseParams {
    CoarseParams { m, k: config.coarse.k.min(m), n, sigma: config.coarse.sigma_deg.to_radians(), seed }
}

/// Pose errors against the ground truth: degrees, millimeters, ADD millimeters.
fn errors(ls: &LoadedScene, pose: &Pose) -> (f64, f64, f64) {
    let gt = &ls.scene.gt_pose;
    let (dr, dt) = pose.error_to(gt);
    (dr.to_degrees(), dt * 1e3, add_distance(pose, gt, ls.mesh.model_points()) * 1e3)
}

/// One row of the refinement summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scene_id: usize,
    pub status: String,
    pub hypotheses: usize,
    pub init_rot_deg: Option<f64>,
    pub init_trans_mm: Option<f64>,
    pub init_add_mm: Option<f64>,
    pub final_rot_deg: Option<f64>,
    pub final_trans_mm: Option<f64>,
    pub final_add_mm: Option<f64>,
    pub success: bool,
    /// Refinement and re-scoring renders.
    pub renders: usize,
    pub coarse_renders: usize,
    pub flagged: usize,
    pub time_s: f64,
}

impl SummaryRow {
    fn failed(scene_id: usize, message: String, time_s: f64) -> Self {
        SummaryRow {
            scene_id,
            status: format!("error: {message}"),
            hypotheses: 0,
            init_rot_deg: None,
            init_trans_mm: None,
            init_add_mm: None,
            final_rot_deg: None,
            final_trans_mm: None,
            final_add_mm: None,
            success: false,
            renders: 0,
            coarse_renders: 0,
            flagged: 0,
            time_s,
        }
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

pub struct SceneOutcome {
    pub row: SummaryRow,
    pub trace: Option<RefineTrace>,
    pub estimate: Option<PoseEstimateRecord>,
}

/// Settings shared by refine and the refine-type ablation variants.
#[derive(Clone, Copy, Debug)]
pub struct RefineMode {
    pub scorer: ScorerKind,
    pub init: InitKind,
    pub root_seed: u64,
}

/// Coarse (optional) plus refinement of one scene. Failures become rows.
pub fn refine_scene(ls: &LoadedScene, config: &RunConfig, mode: RefineMode) -> SceneOutcome {
    let start = Instant::now();
    let id = ls.config.id;
    match refine_scene_inner(ls, config, mode) {
        Ok((mut row, trace, best, score)) => {
            row.time_s = start.elapsed().as_secs_f64();
            let estimate = PoseEstimateRecord { scene_id: id as u64, obj_id: 1, pose: best, score, time: -1.0 };
            SceneOutcome { row, trace: Some(trace), estimate: Some(estimate) }
        }
        Err(e) => SceneOutcome {
            row: SummaryRow::failed(id, format!("{e:#}"), start.elapsed().as_secs_f64()),
            trace: None,
            estimate: None,
        },
    }
}

fn refine_scene_inner(
    ls: &LoadedScene,
    config: &RunConfig,
    mode: RefineMode,
) -> Result<(SummaryRow, RefineTrace, Pose, f64)> {
    let scene = &ls.scene;
    let n = config.refiner.n_hypotheses.max(1);
    let seed = |stream: u64| derive_seed(mode.root_seed, &[ls.config.seed, stream]);
    let scorer = make_scorer(mode.scorer, ls);
    let (hyps, coarse_renders) = match mode.init {
        InitKind::Perturbed => {
            let hyps = (0..n)
                .map(|h| Ok(Hypothesis { pose: ls.config.initial_pose(h)?, score: 0.0, provenance: Provenance::Grid }))
                .collect::<Result<Vec<_>>>()?;
            (hyps, 0)
        }
        InitKind::Coarse => {
            let renderer = Renderer::new(&ls.mesh);
            let params = coarse_params(config, config.coarse.m, n, seed(3));
            let hyps =
                coarse_estimate(&scene.observation, &renderer, &scene.bbox, &scene.camera, scorer.as_ref(), &params)?;
            (hyps, renderer.calls())
        }
    };
    let renderer = Renderer::new(&ls.mesh);
    let provider = scene_provider(&config.refiner, scene, seed(2));
    let inputs = RefineInputs {
        renderer: &renderer,
        camera: scene.camera,
        provider: provider.as_ref(),
        observation: Some(&scene.observation),
        gt: Some(scene.gt_pose),
    };
    let (trace, score) = if n == 1 {
        (refine(&hyps[0].pose, &inputs, &config.refiner)?, 1.0)
    } else {
        let score_camera = scoring_camera(&scene.camera, &scene.bbox)?;
        let refiner = RefinerConfig { n_hypotheses: n, ..config.refiner.clone() };
        let mut mh =
            multi_hypothesis_refine(&hyps, &inputs, scorer.as_ref(), &scene.observation, &score_camera, &refiner)?;
        let score = *mh.scores[mh.best_index].as_ref().expect("best hypothesis has a score");
        (mh.traces[mh.best_index].take().expect("best hypothesis has a trace"), score)
    };
    let (ir, it, ia) = errors(ls, &hyps[0].pose);
    let best = trace.final_pose;
    let (fr, ft, fa) = errors(ls, &best);
    let row = SummaryRow {
        scene_id: ls.config.id,
        status: "ok".into(),
        hypotheses: hyps.len().min(n),
        init_rot_deg: Some(ir),
        init_trans_mm: Some(it),
        init_add_mm: Some(ia),
        final_rot_deg: Some(fr),
        final_trans_mm: Some(ft),
        final_add_mm: Some(fa),
        success: fr < 1.0 && ft < 5.0,
        renders: renderer.calls(),
        coarse_renders,
        flagged: trace.flagged(),
        time_s: 0.0,
    };
    Ok((row, trace, best, score))
}

/// Loads every scene under `root` and maps `f` over them in parallel,
/// keeping scene order. Load failures are passed through.
pub fn for_each_scene<T: Send>(
    root: &Path,
    f: impl Fn(&LoadedScene) -> T + Sync,
    failed: impl Fn(usize, String) -> T + Sync,
) -> Result<Vec<T>> {
    let dirs = scenes::scene_dirs(root)?;
    Ok(dirs
        .par_iter()
        .enumerate()
        .map(|(i, d)| match scenes::load(d) {
            Ok(ls) => f(&ls),
            Err(e) => failed(scenes::read_config(d).map_or(i, |c| c.id), format!("{e:#}")),
        })
        .collect())
}

/// `refine`: traces, summary and estimates. Returns the number of failed scenes.
pub fn cmd_refine(scenes_root: &Path, out: &Path, config: &RunConfig, mode: RefineMode) -> Result<usize> {
    let outcomes = for_each_scene(
        scenes_root,
        |ls| refine_scene(ls, config, mode),
        |id, msg| SceneOutcome { row: SummaryRow::failed(id, msg, 0.0), trace: None, estimate: None },
    )?;
    let dir = out.join("refine");
    for o in &outcomes {
        if let Some(t) = &o.trace {
            let mut buf = Vec::new();
            t.write_jsonl(&mut buf)?;
            write_atomic(&dir.join("traces").join(format!("{}.jsonl", scene_dir_name(o.row.scene_id))), &buf)?;
        }
    }
    let rows: Vec<&SummaryRow> = outcomes.iter().map(|o| &o.row).collect();
    write_csv(&dir.join("summary.csv"), SUMMARY_SCHEMA, &rows)?;
    let estimates: Vec<PoseEstimateRecord> = outcomes.iter().filter_map(|o| o.estimate.clone()).collect();
    let mut buf = Vec::new();
    flowpose::eval::write_estimates(&mut buf, &estimates)?;
    write_atomic(&dir.join("estimates.csv"), &buf)?;
    let failures = rows.iter().filter(|r| !r.ok()).count();
    let successes = rows.iter().filter(|r| r.success).count();
    println!(
        "refined {} scenes: {successes} within 1 deg / 5 mm, {failures} failed; summary in {}",
        rows.len(),
        dir.join("summary.csv").display()
    );
    Ok(failures)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseRow {
    pub scene_id: usize,
    pub status: String,
    /// Rotation error of the highest-scoring hypothesis.
    pub top1_rot_deg: Option<f64>,
    /// Smallest rotation error among the returned hypotheses.
    pub best_rot_deg: Option<f64>,
    pub best_add_mm: Option<f64>,
    pub renders: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CoarseStrategy {
    /// Grid plus mixture samples, `2 m` renders.
    Mixture { m: usize },
    /// Plain grid of the given size.
    Grid { count: usize },
}

pub fn coarse_scene(
    ls: &LoadedScene,
    config: &RunConfig,
    strategy: CoarseStrategy,
    n: usize,
    scorer: ScorerKind,
    root_seed: u64,
) -> (CoarseRow, Vec<Hypothesis>) {
    let scene = &ls.scene;
    let renderer = Renderer::new(&ls.mesh);
    let scorer = make_scorer(scorer, ls);
    let result = match strategy {
        CoarseStrategy::Mixture { m } => {
            let params = coarse_params(config, m, n, derive_seed(root_seed, &[ls.config.seed, 3]));
            coarse_estimate(&scene.observation, &renderer, &scene.bbox, &scene.camera, scorer.as_ref(), &params)
        }
        CoarseStrategy::Grid { count } => {
            naive_estimate(&scene.observation, &renderer, &scene.bbox, &scene.camera, scorer.as_ref(), count, n)
        }
    };
    match result {
        Ok(hyps) if !hyps.is_empty() => {
            let errs: Vec<(f64, f64, f64)> = hyps.iter().map(|h| errors(ls, &h.pose)).collect();
            let best = errs.iter().min_by(|a, b| a.0.total_cmp(&b.0)).unwrap();
            let row = CoarseRow {
                scene_id: ls.config.id,
                status: "ok".into(),
                top1_rot_deg: Some(errs[0].0),
                best_rot_deg: Some(best.0),
                best_add_mm: Some(best.2),
                renders: renderer.calls(),
            };
            (row, hyps)
        }
        Ok(_) => (CoarseRow::failed(ls.config.id, "no hypotheses".into()), Vec::new()),
        Err(e) => (CoarseRow::failed(ls.config.id, e.to_string()), Vec::new()),
    }
}

impl CoarseRow {
    fn failed(scene_id: usize, message: String) -> Self {
        CoarseRow {
            scene_id,
            status: format!("error: {message}"),
            top1_rot_deg: None,
            best_rot_deg: None,
            best_add_mm: None,
            renders: 0,
        }
    }
}

/// `coarse`: hypotheses per scene and a summary CSV.
pub fn cmd_coarse(
    scenes_root: &Path,
    out: &Path,
    config: &RunConfig,
    strategy: CoarseStrategy,
    n: usize,
    scorer: ScorerKind,
    root_seed: u64,
) -> Result<usize> {
    let results = for_each_scene(
        scenes_root,
        |ls| coarse_scene(ls, config, strategy, n, scorer, root_seed),
        |id, msg| (CoarseRow::failed(id, msg), Vec::new()),
    )?;
    let dir = out.join("coarse");
    for (row, hyps) in &results {
        if row.status == "ok" {
            let mut json = serde_json::to_vec_pretty(hyps)?;
            json.push(b'\n');
            write_atomic(&dir.join(format!("{}.json", scene_dir_name(row.scene_id))), &json)?;
        }
    }
    let rows: Vec<&CoarseRow> = results.iter().map(|(r, _)| r).collect();
    write_csv(&dir.join("summary.csv"), COARSE_SCHEMA, &rows)?;
    let failures = rows.iter().filter(|r| r.status != "ok").count();
    let best: Vec<f64> = rows.iter().filter_map(|r| r.best_rot_deg).collect();
    println!(
        "coarse search on {} scenes: mean best-of-{n} rotation error {:.2} deg, {failures} failed",
        rows.len(),
        mean(&best)
    );
    Ok(failures)
}

/// A named ablation variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Variant {
    Coarse(CoarseStrategy),
    Refine(RefinerConfig),
}

pub fn parse_variant(name: &str, base: &RefinerConfig) -> Result<Variant> {
    let number = |prefix: &str| name.strip_prefix(prefix).and_then(|s| s.parse::<usize>().ok());
    let refine = |c: RefinerConfig| -> Result<Variant> {
        c.validate()?;
        Ok(Variant::Refine(c))
    };
    if let Some(count) = number("naive-") {
        if count > 0 {
            return Ok(Variant::Coarse(CoarseStrategy::Grid { count }));
        }
    }
    if let Some(renders) = number("gmm-") {
        if renders >= 2 && renders % 2 == 0 {
            return Ok(Variant::Coarse(CoarseStrategy::Mixture { m: renders / 2 }));
        }
        bail!("variant `{name}`: the mixture budget must be an even number of renders");
    }
    if let Some(levels) = number("cascade-") {
        return refine(RefinerConfig { cascade_levels: levels, ..base.clone() });
    }
    if let Some(n) = number("hypotheses-") {
        return refine(RefinerConfig { n_hypotheses: n, ..base.clone() });
    }
    match name {
        "refine" => refine(base.clone()),
        "certainty-off" => refine(RefinerConfig { use_certainty: false, ..base.clone() }),
        "sensitivity-off" => refine(RefinerConfig { use_sensitivity: false, ..base.clone() }),
        "factorization-off" => refine(RefinerConfig { use_certainty: false, use_sensitivity: false, ..base.clone() }),
        _ => bail!(
            "unknown variant `{name}` (expected naive-<renders>, gmm-<renders>, refine, cascade-<levels>, \
             hypotheses-<n>, certainty-off, sensitivity-off or factorization-off)"
        ),
    }
}

/// One row per variant; coarse rows report the best of the returned
/// hypotheses and count a hit below 15 degrees as success.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub kind: String,
    pub scenes: usize,
    pub failures: usize,
    pub renders_per_scene: f64,
    pub mean_rot_deg: Option<f64>,
    pub median_rot_deg: Option<f64>,
    pub mean_add_mm: Option<f64>,
    pub median_add_mm: Option<f64>,
    pub success_rate: f64,
}

pub const COARSE_HIT_DEG: f64 = 15.0;

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ablation_row(variant: &str, kind: &str, rot: &[Option<f64>], add: &[Option<f64>], renders: &[usize], success: usize) -> AblationRow {
    let scenes = rot.len();
    let r: Vec<f64> = rot.iter().flatten().copied().collect();
    let a: Vec<f64> = add.iter().flatten().copied().collect();
    AblationRow {
        variant: variant.into(),
        kind: kind.into(),
        scenes,
        failures: scenes - r.len(),
        renders_per_scene: renders.iter().sum::<usize>() as f64 / scenes.max(1) as f64,
        mean_rot_deg: cell(mean(&r)),
        median_rot_deg: cell(median(&r)),
        mean_add_mm: cell(mean(&a)),
        median_add_mm: cell(median(&a)),
        success_rate: success as f64 / scenes.max(1) as f64,
    }
}

pub struct AblateSettings<'a> {
    pub variants: &'a [String],
    pub n: usize,
    pub mode: RefineMode,
}

/// `ablate`: every variant on the same scenes.
pub fn cmd_ablate(scenes_root: &Path, out: &Path, config: &RunConfig, settings: &AblateSettings) -> Result<usize> {
    if settings.variants.is_empty() {
        bail!("no variants given");
    }
    let parsed = settings
        .variants
        .iter()
        .map(|v| parse_variant(v, &config.refiner).map(|p| (v.clone(), p)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut failures = 0;
    for (name, variant) in &parsed {
        let row = match variant {
            Variant::Coarse(strategy) => {
                let res = for_each_scene(
                    scenes_root,
                    |ls| coarse_scene(ls, config, *strategy, settings.n, settings.mode.scorer, settings.mode.root_seed).0,
                    CoarseRow::failed,
                )?;
                let hits = res.iter().filter(|r| r.best_rot_deg.is_some_and(|e| e < COARSE_HIT_DEG)).count();
                let rot: Vec<Option<f64>> = res.iter().map(|r| r.best_rot_deg).collect();
                let add: Vec<Option<f64>> = res.iter().map(|r| r.best_add_mm).collect();
                let renders: Vec<usize> = res.iter().map(|r| r.renders).collect();
                ablation_row(name, "coarse", &rot, &add, &renders, hits)
            }
            Variant::Refine(refiner) => {
                let cfg = RunConfig { refiner: refiner.clone(), ..config.clone() };
                let res = for_each_scene(
                    scenes_root,
                    |ls| refine_scene(ls, &cfg, settings.mode).row,
                    |id, msg| SummaryRow::failed(id, msg, 0.0),
                )?;
                let rot: Vec<Option<f64>> = res.iter().map(|r| r.final_rot_deg).collect();
                let add: Vec<Option<f64>> = res.iter().map(|r| r.final_add_mm).collect();
                let renders: Vec<usize> = res.iter().map(|r| r.renders).collect();
                let ok = res.iter().filter(|r| r.success).count();
                ablation_row(name, "refine", &rot, &add, &renders, ok)
            }
        };
        failures += row.failures;
        rows.push(row);
    }
    write_csv(&out.join("ablate").join("table.csv"), ABLATION_SCHEMA, &rows)?;
    print!("{}", markdown_table(&rows));
    Ok(failures)
}

fn markdown_table(rows: &[AblationRow]) -> String {
    let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
    let mut s = String::from("| variant | kind | renders/scene | mean rot (deg) | median rot (deg) | mean ADD (mm) | success |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {:.1} | {} | {} | {} | {:.3} |\n",
            r.variant,
            r.kind,
            r.renders_per_scene,
            f(r.mean_rot_deg),
            f(r.median_rot_deg),
            f(r.mean_add_mm),
            r.success_rate
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names() {
        let base = RefinerConfig::default();
        assert_eq!(parse_variant("naive-576", &base).unwrap(), Variant::Coarse(CoarseStrategy::Grid { count: 576 }));
        assert_eq!(parse_variant("gmm-208", &base).unwrap(), Variant::Coarse(CoarseStrategy::Mixture { m: 104 }));
        assert!(parse_variant("gmm-207", &base).is_err());
        match parse_variant("cascade-1", &base).unwrap() {
            Variant::Refine(c) => assert_eq!(c.cascade_levels, 1),
            v => panic!("{v:?}"),
        }
        match parse_variant("factorization-off", &base).unwrap() {
            Variant::Refine(c) => assert!(!c.use_certainty && !c.use_sensitivity),
            v => panic!("{v:?}"),
        }
        assert!(parse_variant("cascade-3", &base).is_err());
        assert!(parse_variant("bogus", &base).is_err());
    }

    #[test]
    fn median_and_mean() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(mean(&[]).is_nan());
        assert_eq!(mean(&[1.0, 2.0]), 1.5);
    }
}
