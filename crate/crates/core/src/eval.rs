//! Pose-error functions (VSD, MSSD, MSPD), average recall over threshold
//! grids, and the estimate CSV format.

use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Camera, Pose, Rotation};
use crate::image::Grid;
use crate::mesh::Mesh;
use crate::render::rasterize;

/// Default visibility tolerance (m).
pub const VSD_DELTA: f64 = 0.015;

/// Global symmetries of an object; always contains the identity first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetrySet {
    rotations: Vec<Rotation>,
}

impl Default for SymmetrySet {
    fn default() -> Self {
        SymmetrySet::identity()
    }
}

impl SymmetrySet {
    pub fn identity() -> Self {
        SymmetrySet { rotations: vec![Rotation::identity()] }
    }

    /// Prepends the identity unless already present.
    pub fn new(rotations: Vec<Rotation>) -> Self {
        let mut out = vec![Rotation::identity()];
        out.extend(rotations.into_iter().filter(|r| r.geodesic_distance(&Rotation::identity()) > 1e-12));
        SymmetrySet { rotations: out }
    }

    /// Discrete `order`-fold symmetry about `axis`. Entries within 1e-15 of
    /// zero are snapped so that axis-aligned flips are exact sign changes.
    pub fn cyclic(axis: &Vector3<f64>, order: usize) -> Self {
        let order = order.max(1);
        SymmetrySet::new(
            (1..order)
                .map(|k| {
                    let r = Rotation::about_axis(axis, std::f64::consts::TAU * k as f64 / order as f64);
                    Rotation::from_matrix(r.matrix().map(|x| if x.abs() < 1e-15 { 0.0 } else { x })).unwrap_or(r)
                })
                .collect(),
        )
    }

    pub fn rotations(&self) -> &[Rotation] {
        &self.rotations
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn poses<'a>(&'a self, gt: &'a Pose) -> impl Iterator<Item = Pose> + 'a {
        self.rotations.iter().map(move |s| Pose::new(gt.rotation * *s, gt.translation))
    }
}

fn distance_map(mesh: &Mesh, pose: &Pose, camera: &Camera) -> Grid<f64> {
    let r = rasterize(mesh, pose, camera);
    Grid::from_fn(camera.width, camera.height, |u, v| {
        let d = *r.depth.get(u, v);
        if d > 0.0 {
            d * camera.ray_scale(u as f64, v as f64)
        } else {
            0.0
        }
    })
}

fn visible(test: f64, model: f64, delta: f64) -> bool {
    model > 0.0 && (test <= 0.0 || model - test <= delta)
}

/// Visible surface discrepancy for each tolerance in `taus` (m).
///
/// `observed_depth` is z-depth with 0 for missing pixels. An empty union of
/// visibility masks scores 1.
pub fn vsd(
    est: &Pose,
    gt: &Pose,
    mesh: &Mesh,
    camera: &Camera,
    observed_depth: &Grid<f64>,
    taus: &[f64],
    delta: f64,
) -> Result<Vec<f64>> {
    if observed_depth.dims() != (camera.width, camera.height) {
        return Err(Error::ShapeMismatch(format!(
            "observed depth {:?} vs camera {}x{}",
            observed_depth.dims(),
            camera.width,
            camera.height
        )));
    }
    let d_est = distance_map(mesh, est, camera);
    let d_gt = distance_map(mesh, gt, camera);
    let mut union = 0usize;
    let mut inter = 0usize;
    let mut costs = vec![0usize; taus.len()];
    for (u, v, &z) in observed_depth.iter_coords() {
        let test = if z > 0.0 { z * camera.ray_scale(u as f64, v as f64) } else { 0.0 };
        let (e, g) = (*d_est.get(u, v), *d_gt.get(u, v));
        let vis_gt = visible(test, g, delta);
        let vis_est = visible(test, e, delta) || (vis_gt && e > 0.0);
        if vis_gt || vis_est {
            union += 1;
        }
        if vis_gt && vis_est {
            inter += 1;
            let diff = (e - g).abs();
            for (c, tau) in costs.iter_mut().zip(taus) {
                if diff >= *tau {
                    *c += 1;
                }
            }
        }
    }
    if union == 0 {
        return Ok(vec![1.0; taus.len()]);
    }
    Ok(costs.iter().map(|c| (c + union - inter) as f64 / union as f64).collect())
}

/// Maximum symmetric surface distance (m).
pub fn mssd(est: &Pose, gt: &Pose, points: &[Vector3<f64>], sym: &SymmetrySet) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("mssd needs model points".into()));
    }
    let e: Vec<Vector3<f64>> = points.iter().map(|x| est.transform_point(x)).collect();
    Ok(sym
        .poses(gt)
        .map(|g| points.iter().zip(&e).map(|(x, ex)| (ex - g.transform_point(x)).norm()).fold(0.0, f64::max))
        .fold(f64::INFINITY, f64::min))
}

/// MSPD value and the number of (symmetry, point) pairs skipped because a
/// point was behind the camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mspd {
    pub px: f64,
    pub excluded: usize,
}

/// Maximum symmetric projection distance (px).
pub fn mspd(est: &Pose, gt: &Pose, camera: &Camera, points: &[Vector3<f64>], sym: &SymmetrySet) -> Result<Mspd> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("mspd needs model points".into()));
    }
    let proj = |p: &Pose, x: &Vector3<f64>| -> Option<Vector2<f64>> { camera.project(&p.transform_point(x)).ok() };
    let e: Vec<Option<Vector2<f64>>> = points.iter().map(|x| proj(est, x)).collect();
    let mut excluded = 0usize;
    let mut best = f64::INFINITY;
    for g in sym.poses(gt) {
        let mut worst: Option<f64> = None;
        for (x, ex) in points.iter().zip(&e) {
            match (ex, proj(&g, x)) {
                (Some(a), Some(b)) => worst = Some(worst.unwrap_or(0.0).max((a - b).norm())),
                _ => excluded += 1,
            }
        }
        if let Some(w) = worst {
            best = best.min(w);
        }
    }
    if best.is_infinite() {
        return Err(Error::BehindCamera(0.0));
    }
    Ok(Mspd { px: best, excluded })
}

/// Threshold grids relative to object size and image width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdConfig {
    /// VSD tolerances as fractions of the diameter.
    pub vsd_taus: Vec<f64>,
    /// VSD correctness thresholds.
    pub vsd_correct: Vec<f64>,
    /// MSSD thresholds as fractions of the diameter.
    pub mssd: Vec<f64>,
    /// MSPD thresholds in pixels at 640 px image width.
    pub mspd: Vec<f64>,
    pub delta: f64,
}

fn steps(lo: f64, step: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + step * k as f64).collect()
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            vsd_taus: steps(0.05, 0.05, 10),
            vsd_correct: steps(0.05, 0.05, 10),
            mssd: steps(0.05, 0.05, 10),
            mspd: steps(5.0, 5.0, 10),
            delta: VSD_DELTA,
        }
    }
}

impl ThresholdConfig {
    /// Absolute grids for an object of `diameter` m seen at `image_width` px.
    pub fn resolve(&self, diameter: f64, image_width: usize) -> Result<Thresholds> {
        if self.vsd_taus.is_empty() || self.vsd_correct.is_empty() || self.mssd.is_empty() || self.mspd.is_empty() {
            return Err(Error::InvalidArgument("threshold grids must be non-empty".into()));
        }
        if !(diameter > 0.0) {
            return Err(Error::InvalidArgument(format!("object diameter {diameter}")));
        }
        let px = image_width as f64 / 640.0;
        Ok(Thresholds {
            vsd_taus: self.vsd_taus.iter().map(|f| f * diameter).collect(),
            vsd_correct: self.vsd_correct.clone(),
            mssd: self.mssd.iter().map(|f| f * diameter).collect(),
            mspd: self.mspd.iter().map(|p| p * px).collect(),
            delta: self.delta,
        })
    }
}

/// Absolute threshold grids (m, px).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub vsd_taus: Vec<f64>,
    pub vsd_correct: Vec<f64>,
    pub mssd: Vec<f64>,
    pub mspd: Vec<f64>,
    pub delta: f64,
}

impl Thresholds {
    fn validate(&self) -> Result<()> {
        if self.vsd_taus.is_empty() || self.vsd_correct.is_empty() || self.mssd.is_empty() || self.mspd.is_empty() {
            return Err(Error::InvalidArgument("threshold grids must be non-empty".into()));
        }
        Ok(())
    }
}

/// Errors of one estimate; `vsd` has one entry per tolerance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateErrors {
    pub vsd: Vec<f64>,
    pub mssd: f64,
    pub mspd: f64,
}

impl EstimateErrors {
    /// A missing estimate: fails every threshold.
    pub fn missing(taus: usize) -> Self {
        EstimateErrors { vsd: vec![f64::INFINITY; taus], mssd: f64::INFINITY, mspd: f64::INFINITY }
    }
}

/// Everything needed to score an estimate against one ground-truth instance.
pub struct EvalTarget<'a> {
    pub gt: Pose,
    pub mesh: &'a Mesh,
    pub camera: Camera,
    pub observed_depth: &'a Grid<f64>,
    pub symmetries: &'a SymmetrySet,
}

/// All three errors; points behind the camera are excluded from MSPD.
pub fn evaluate_estimate(est: &Pose, target: &EvalTarget, thresholds: &Thresholds) -> Result<EstimateErrors> {
    let points = target.mesh.model_points();
    let vsd = vsd(est, &target.gt, target.mesh, &target.camera, target.observed_depth, &thresholds.vsd_taus, thresholds.delta)?;
    let mssd = mssd(est, &target.gt, points, target.symmetries)?;
    let mspd = match mspd(est, &target.gt, &target.camera, points, target.symmetries) {
        Ok(m) => m.px,
        Err(Error::BehindCamera(_)) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    Ok(EstimateErrors { vsd, mssd, mspd })
}

/// Recall at each grid point and the averaged recalls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// `(tau, theta, recall)`.
    pub vsd_curve: Vec<(f64, f64, f64)>,
    /// `(threshold, recall)`.
    pub mssd_curve: Vec<(f64, f64)>,
    pub mspd_curve: Vec<(f64, f64)>,
    pub ar_vsd: f64,
    pub ar_mssd: f64,
    pub ar_mspd: f64,
    pub ar: f64,
}

fn recall(values: impl Iterator<Item = f64>, n: usize, th: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    values.filter(|e| *e < th).count() as f64 / n as f64
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Average recall; an estimate is correct at a threshold when its error is
/// strictly below it. No estimates gives AR = 0.
pub fn average_recall(errors: &[EstimateErrors], thresholds: &Thresholds) -> Result<RecallReport> {
    thresholds.validate()?;
    let n = errors.len();
    if let Some(e) = errors.iter().find(|e| e.vsd.len() != thresholds.vsd_taus.len()) {
        return Err(Error::ShapeMismatch(format!(
            "{} VSD values for {} tolerances",
            e.vsd.len(),
            thresholds.vsd_taus.len()
        )));
    }
    let mut vsd_curve = Vec::new();
    for (k, &tau) in thresholds.vsd_taus.iter().enumerate() {
        for &theta in &thresholds.vsd_correct {
            vsd_curve.push((tau, theta, recall(errors.iter().map(|e| e.vsd[k]), n, theta)));
        }
    }
    let mssd_curve: Vec<(f64, f64)> =
        thresholds.mssd.iter().map(|&t| (t, recall(errors.iter().map(|e| e.mssd), n, t))).collect();
    let mspd_curve: Vec<(f64, f64)> =
        thresholds.mspd.iter().map(|&t| (t, recall(errors.iter().map(|e| e.mspd), n, t))).collect();
    let ar_vsd = mean(vsd_curve.iter().map(|c| c.2));
    let ar_mssd = mean(mssd_curve.iter().map(|c| c.1));
    let ar_mspd = mean(mspd_curve.iter().map(|c| c.1));
    Ok(RecallReport { vsd_curve, mssd_curve, mspd_curve, ar_vsd, ar_mssd, ar_mspd, ar: (ar_vsd + ar_mssd + ar_mspd) / 3.0 })
}

/// Header comment identifying the estimate CSV schema.
pub const ESTIMATES_SCHEMA: &str = "# flowpose-estimates v1";
const ESTIMATES_COLUMNS: [&str; 6] = ["scene_id", "obj_id", "score", "R", "t", "time"];

/// One pose estimate. Translation is stored in mm on disk, m in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseEstimateRecord {
    pub scene_id: u64,
    pub obj_id: u64,
    pub pose: Pose,
    pub score: f64,
    /// Seconds.
    pub time: f64,
}

fn join(xs: impl Iterator<Item = f64>) -> String {
    xs.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_floats(s: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("{what}: {e}"))))
        .collect::<Result<_>>()?;
    if v.len() != n {
        return Err(Error::Format(format!("{what}: expected {n} values, got {}", v.len())));
    }
    Ok(v)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_estimates(mut w: impl Write, records: &[PoseEstimateRecord]) -> Result<()> {
    writeln!(w, "{ESTIMATES_SCHEMA}")?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(ESTIMATES_COLUMNS).map_err(csv_err)?;
    for r in records {
        let m = r.pose.rotation.matrix();
        let rot = join((0..9).map(|k| m[(k / 3, k % 3)]));
        let t = join(r.pose.translation.iter().map(|x| x * 1000.0));
        out.write_record([
            r.scene_id.to_string(),
            r.obj_id.to_string(),
            r.score.to_string(),
            rot,
            t,
            r.time.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads an estimate CSV, rejecting missing or unknown schema lines.
pub fn read_estimates(mut r: impl BufRead) -> Result<Vec<PoseEstimateRecord>> {
    let mut first = String::new();
    r.read_line(&mut first)?;
    let first = first.trim_end();
    if first != ESTIMATES_SCHEMA {
        return Err(Error::Format(format!("unknown estimates schema line {first:?}")));
    }
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().ne(ESTIMATES_COLUMNS) {
        return Err(Error::Format(format!("unexpected estimate columns {header:?}")));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(csv_err)?;
        let int = |i: usize| row[i].trim().parse::<u64>().map_err(|e| Error::Format(format!("{}: {e}", ESTIMATES_COLUMNS[i])));
        let float = |i: usize| row[i].trim().parse::<f64>().map_err(|e| Error::Format(format!("{}: {e}", ESTIMATES_COLUMNS[i])));
        let rv = parse_floats(&row[3], 9, "R")?;
        let tv = parse_floats(&row[4], 3, "t")?;
        let rotation = Rotation::from_matrix(Matrix3::from_row_slice(&rv))
            .unwrap_or_else(|_| Rotation::from_matrix_projected(Matrix3::from_row_slice(&rv)));
        out.push(PoseEstimateRecord {
            scene_id: int(0)?,
            obj_id: int(1)?,
            score: float(2)?,
            pose: Pose::new(rotation, Vector3::new(tv[0], tv[1], tv[2]) / 1000.0),
            time: float(5)?,
        });
    }
    Ok(out)
}
