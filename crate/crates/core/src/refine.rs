//! Render-and-refine loops: inner flow-driven pose updates, the two-level
//! cascade, outer render iterations, multi-hypothesis selection and the
//! RGB-D RANSAC-Kabsch correction.
//!
//! Flow comes from a [`FlowProvider`]. The synthetic providers stand in for
//! a learned flow network: they derive flow from the ground-truth pose and
//! optionally corrupt it.

use std::cell::RefCell;
use std::io::Write;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coarse::{Hypothesis, Scorer};
use crate::error::{Error, Result};
use crate::flow::{
    build_correlation_volume, certainty_ground_truth, convex_upsample, corrupt_flow, hand_features, oracle_flow,
    sensitivity_map, shape_constraint_lookup, FlowField, UpsampleMask,
};
use crate::geom::{lift, Camera, Pose};
use crate::image::Grid;
use crate::render::{adjust_intrinsics, BBox, RenderOutput, Renderer, REFINE_RESOLUTION};
use crate::scene::{derive_seed, Observation, Scene};
use crate::solver::{ransac_kabsch, solve_pose, Correspondences2D3D, Correspondences3D3D};

/// Early-exit threshold on the outer pose change (rad and m).
pub const EARLY_EXIT_TOL: f64 = 1e-5;

/// Which flow provider a configuration asks for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    /// Exact flow towards the ground truth.
    #[default]
    Oracle,
    /// Oracle flow with noise, outliers, occlusion outliers and an optional
    /// capture radius.
    Corrupted,
    /// Pose-induced flow of the current estimate (zero innovation).
    Identity,
    /// Arg-max over the shape-constrained correlation lookup of hand-built
    /// features.
    Correlation,
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(ProviderKind::Oracle),
            "corrupted" => Ok(ProviderKind::Corrupted),
            "identity" => Ok(ProviderKind::Identity),
            "correlation" => Ok(ProviderKind::Correlation),
            other => Err(Error::InvalidArgument(format!("unknown flow provider {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    pub outer_iters: usize,
    /// Inner updates per outer iteration, split evenly across levels.
    pub inner_iters: usize,
    /// Levels run at 1/8, 1/4, 1/2 and 1/1 of the crop, coarsest first.
    pub cascade_levels: usize,
    pub provider: ProviderKind,
    /// Flow noise std in level pixels (corrupted provider).
    pub noise_px: f64,
    /// Fraction of valid level pixels replaced by outliers.
    pub outlier_frac: f64,
    /// Displacements larger than this (crop pixels) are not captured by the
    /// corrupted provider and become outliers around the current estimate.
    pub capture_radius: Option<f64>,
    pub lookup_radius: usize,
    pub n_hypotheses: usize,
    pub depth_refine: bool,
    /// Pixels with certainty below this are dropped from depth refinement.
    pub certainty_threshold: f64,
    /// When false, certainty is forced to 1.
    pub use_certainty: bool,
    /// When false, pose sensitivity is forced to 1.
    pub use_sensitivity: bool,
    pub early_exit: bool,
    pub crop_size: usize,
    /// Side of the square crop relative to the projected bbox.
    pub crop_padding: f64,
    /// Depth tolerance of the certainty labels (m).
    pub d_th: f64,
    /// RANSAC inlier distance for depth refinement (m).
    pub depth_inlier_threshold: f64,
    pub ransac_iters: usize,
    /// Keep every upsampled flow in the trace.
    pub keep_flow: bool,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            outer_iters: 5,
            inner_iters: 8,
            cascade_levels: 2,
            provider: ProviderKind::Oracle,
            noise_px: 2.0,
            outlier_frac: 0.2,
            capture_radius: None,
            lookup_radius: 3,
            n_hypotheses: 1,
            depth_refine: false,
            certainty_threshold: 0.5,
            use_certainty: true,
            use_sensitivity: true,
            early_exit: true,
            crop_size: REFINE_RESOLUTION,
            crop_padding: 1.2,
            d_th: 0.005,
            depth_inlier_threshold: 0.01,
            ransac_iters: 100,
            keep_flow: false,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.outer_iters == 0 || self.inner_iters == 0 {
            return bad("outer and inner iteration counts must be positive".into());
        }
        if !(1..=4).contains(&self.cascade_levels) {
            return bad(format!("cascade_levels must be 1..=4, got {}", self.cascade_levels));
        }
        if self.inner_iters % self.cascade_levels != 0 {
            return bad(format!(
                "inner_iters {} not divisible by cascade_levels {}",
                self.inner_iters, self.cascade_levels
            ));
        }
        if self.crop_size == 0 || self.crop_size % 8 != 0 {
            return bad(format!("crop_size must be a positive multiple of 8, got {}", self.crop_size));
        }
        if !(self.crop_padding >= 1.0) {
            return bad(format!("crop_padding must be >= 1, got {}", self.crop_padding));
        }
        if self.n_hypotheses == 0 {
            return bad("n_hypotheses must be at least 1".into());
        }
        if !(self.noise_px >= 0.0) || !(0.0..=1.0).contains(&self.outlier_frac) {
            return bad("noise must be >= 0 and outlier fraction in [0, 1]".into());
        }
        if self.capture_radius.is_some_and(|r| !(r > 0.0)) {
            return bad("capture radius must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.certainty_threshold) {
            return bad("certainty threshold must lie in [0, 1]".into());
        }
        if !(self.d_th > 0.0) || !(self.depth_inlier_threshold > 0.0) {
            return bad("depth thresholds must be positive".into());
        }
        Ok(())
    }

    /// Downsampling factor of each cascade level, coarsest first.
    pub fn level_factors(&self) -> Vec<usize> {
        [8, 4, 2, 1][..self.cascade_levels].to_vec()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RefinerConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

/// What a provider is asked for at one inner update.
pub struct FlowRequest<'a> {
    /// Current estimate `P^(j-1)`.
    pub pose: &'a Pose,
    /// Pose-induced flow of `pose` at crop resolution.
    pub induced: &'a FlowField,
    /// Level downsampling factor.
    pub factor: usize,
    /// 1-based inner index within the outer iteration.
    pub inner: usize,
}

/// Provider output at level resolution.
#[derive(Clone, Debug)]
pub struct FlowEstimate {
    pub flow: FlowField,
    pub mask: UpsampleMask,
    /// Values in `[0, 1]`.
    pub certainty: Grid<f64>,
}

/// Per-outer-iteration flow source, prepared once per render.
pub trait FlowSource {
    fn estimate(&self, req: &FlowRequest) -> Result<FlowEstimate>;
}

/// Produces flow between a render and the observation.
pub trait FlowProvider: Sync {
    /// Called once per outer iteration; `outer` is 1-based.
    fn prepare<'a>(&'a self, render: &'a RenderOutput, outer: usize) -> Result<Box<dyn FlowSource + 'a>>;
}

/// Block mean of `values` over pixels where `weight` is set.
fn block_mean(values: &Grid<f64>, on: &Grid<bool>, factor: usize) -> Grid<f64> {
    Grid::from_fn(values.width() / factor, values.height() / factor, |i, j| {
        let (mut s, mut n) = (0.0, 0usize);
        for v in j * factor..(j + 1) * factor {
            for u in i * factor..(i + 1) * factor {
                if *on.get(u, v) {
                    s += values.get(u, v);
                    n += 1;
                }
            }
        }
        if n > 0 {
            s / n as f64
        } else {
            0.0
        }
    })
}

/// Inverse depth of `depth` (camera `src`) sampled bilinearly over positive
/// taps at the pixels of `target`, returned as depth.
fn resample_depth(depth: &Grid<f64>, src: &Camera, target: &Camera) -> Grid<f64> {
    let inv = depth.map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 });
    Grid::from_fn(target.width, target.height, |u, v| {
        let x = (u as f64 - target.cx) / target.fx;
        let y = (v as f64 - target.cy) / target.fy;
        inv.bilinear_where(src.fx * x + src.cx, src.fy * y + src.cy, |s| s > 0.0).map_or(0.0, |s| 1.0 / s)
    })
}

/// Flow corruption applied by [`SyntheticProvider`].
#[derive(Clone, Debug, PartialEq)]
pub struct Corruption {
    pub noise_px: f64,
    pub outlier_frac: f64,
    pub capture_radius: Option<f64>,
}

/// Ground-truth driven provider: oracle flow, optional corruption, and
/// depth-consistency certainty when a target depth is given.
pub struct SyntheticProvider {
    pub gt: Pose,
    /// Noise-free depth of the observed image and its camera.
    pub target: Option<(Grid<f64>, Camera)>,
    pub corruption: Option<Corruption>,
    pub d_th: f64,
    pub seed: u64,
}

impl SyntheticProvider {
    pub fn oracle(gt: Pose) -> Self {
        SyntheticProvider { gt, target: None, corruption: None, d_th: 0.005, seed: 0 }
    }
}

struct SyntheticSource<'a> {
    provider: &'a SyntheticProvider,
    oracle: FlowField,
    /// Certainty labels at crop resolution (1 where no target is known).
    labels: Grid<f64>,
    foreground: Grid<bool>,
    labelled: bool,
    outer: usize,
    /// Level flow and certainty per factor.
    levels: RefCell<Vec<(usize, FlowField, Grid<f64>)>>,
}

impl FlowProvider for SyntheticProvider {
    fn prepare<'a>(&'a self, render: &'a RenderOutput, outer: usize) -> Result<Box<dyn FlowSource + 'a>> {
        let camera = &render.camera;
        let oracle = oracle_flow(render, &self.gt, camera);
        let foreground = render.mask.clone();
        let (labels, labelled) = match &self.target {
            Some((depth, cam)) => {
                let crop_depth = resample_depth(depth, cam, camera);
                let l = certainty_ground_truth(render, &self.gt, &crop_depth, camera, self.d_th)?;
                (l.map(|&b| if b { 1.0 } else { 0.0 }), true)
            }
            None => (Grid::new(camera.width, camera.height, 1.0), false),
        };
        Ok(Box::new(SyntheticSource { provider: self, oracle, labels, foreground, labelled, outer, levels: RefCell::new(Vec::new()) }))
    }
}

impl FlowSource for SyntheticSource<'_> {
    fn estimate(&self, req: &FlowRequest) -> Result<FlowEstimate> {
        let f = req.factor;
        if !self.levels.borrow().iter().any(|(k, _, _)| *k == f) {
            let level = (f, self.oracle.downsample(f), block_mean(&self.labels, &self.foreground, f));
            self.levels.borrow_mut().push(level);
        }
        let (mut flow, certainty) = {
            let levels = self.levels.borrow();
            let (_, fl, c) = levels.iter().find(|(k, _, _)| *k == f).unwrap();
            (fl.clone(), c.clone())
        };
        let (w, h) = (flow.width(), flow.height());
        if let Some(c) = &self.provider.corruption {
            let seed = derive_seed(self.provider.seed, &[self.outer as u64, req.inner as u64, f as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
            let occluded = self.labelled.then(|| Grid::from_fn(w, h, |i, j| *certainty.get(i, j) < 0.5));
            let truth = flow.clone();
            flow = corrupt_flow(&flow, c.noise_px, c.outlier_frac, occluded.as_ref(), seed)?;
            if let Some(radius) = c.capture_radius {
                let r = radius / f as f64;
                let induced = req.induced.downsample(f);
                for j in 0..h {
                    for i in 0..w {
                        let (Some(t), Some(base)) = (truth.get(i, j), induced.get(i, j)) else { continue };
                        if (t - base).norm() > r {
                            let jitter = Vector2::new(rng.random_range(-r..=r), rng.random_range(-r..=r));
                            flow.flow.set(i, j, base + jitter);
                        }
                    }
                }
            }
        }
        Ok(FlowEstimate { mask: UpsampleMask::bilinear(w, h, f), flow, certainty })
    }
}

/// Returns the pose-induced flow of the current estimate: no innovation.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityProvider;

struct IdentitySource;

impl FlowProvider for IdentityProvider {
    fn prepare<'a>(&'a self, _: &'a RenderOutput, _: usize) -> Result<Box<dyn FlowSource + 'a>> {
        Ok(Box::new(IdentitySource))
    }
}

impl FlowSource for IdentitySource {
    fn estimate(&self, req: &FlowRequest) -> Result<FlowEstimate> {
        let flow = req.induced.downsample(req.factor);
        let (w, h) = (flow.width(), flow.height());
        let certainty = Grid::from_fn(w, h, |i, j| if *flow.valid.get(i, j) { 1.0 } else { 0.0 });
        Ok(FlowEstimate { mask: UpsampleMask::bilinear(w, h, req.factor), flow, certainty })
    }
}

/// Matches hand-built features of the render and the observation: the
/// flow is the best tap of the shape-constrained lookup around the current
/// pose-induced flow. Works at factors 4 and 8 only.
pub struct CorrelationProvider {
    pub observation: Observation,
    pub radius: usize,
}

struct CorrelationSource<'a> {
    provider: &'a CorrelationProvider,
    render: &'a RenderOutput,
    observed: Observation,
    volumes: RefCell<Vec<(usize, crate::flow::CorrelationVolume)>>,
}

impl FlowProvider for CorrelationProvider {
    fn prepare<'a>(&'a self, render: &'a RenderOutput, _: usize) -> Result<Box<dyn FlowSource + 'a>> {
        let observed = self.observation.resample(&render.camera);
        Ok(Box::new(CorrelationSource { provider: self, render, observed, volumes: RefCell::new(Vec::new()) }))
    }
}

impl FlowSource for CorrelationSource<'_> {
    fn estimate(&self, req: &FlowRequest) -> Result<FlowEstimate> {
        let f = req.factor;
        let level = match f {
            4 => 1,
            8 => 2,
            other => return Err(Error::InvalidArgument(format!("correlation provider has no level for factor {other}"))),
        };
        if !self.volumes.borrow().iter().any(|(k, _)| *k == f) {
            let a = hand_features(&self.render.intensity, level)?;
            let b = hand_features(&self.observed.intensity, level)?;
            let vol = build_correlation_volume(&a, &b)?;
            self.volumes.borrow_mut().push((f, vol));
        }
        let volumes = self.volumes.borrow();
        let vol = &volumes.iter().find(|(k, _)| *k == f).unwrap().1;
        let induced = req.induced.downsample(f);
        let look = shape_constraint_lookup(vol, &induced, self.provider.radius)?;
        let (w, h) = (induced.width(), induced.height());
        let r = self.provider.radius as isize;
        let side = 2 * r + 1;
        let mut flow = induced.clone();
        let mut certainty = Grid::new(w, h, 0.0);
        for j in 0..h {
            for i in 0..w {
                let Some(base) = induced.get(i, j) else { continue };
                let taps = look.at(i, j);
                // ties go to the tap nearest the induced target
                let mut best = (0usize, f64::NEG_INFINITY, isize::MAX);
                for (k, &t) in taps.iter().enumerate() {
                    let (dx, dy) = (k as isize % side - r, k as isize / side - r);
                    let d2 = dx * dx + dy * dy;
                    if t > best.1 || (t == best.1 && d2 < best.2) {
                        best = (k, t, d2);
                    }
                }
                let (best, score) = (best.0, best.1);
                let off = Vector2::new((best as isize % side - r) as f64, (best as isize / side - r) as f64);
                flow.flow.set(i, j, base + off);
                certainty.set(i, j, score.clamp(0.0, 1.0));
            }
        }
        Ok(FlowEstimate { mask: UpsampleMask::bilinear(w, h, f), flow, certainty })
    }
}

/// Builds the provider a configuration names for a synthetic scene.
pub fn scene_provider(config: &RefinerConfig, scene: &Scene, seed: u64) -> Box<dyn FlowProvider> {
    let target = Some((scene.clean_depth.clone(), scene.camera));
    match config.provider {
        ProviderKind::Oracle => Box::new(SyntheticProvider { gt: scene.gt_pose, target, corruption: None, d_th: config.d_th, seed }),
        ProviderKind::Corrupted => Box::new(SyntheticProvider {
            gt: scene.gt_pose,
            target,
            corruption: Some(Corruption {
                noise_px: config.noise_px,
                outlier_frac: config.outlier_frac,
                capture_radius: config.capture_radius,
            }),
            d_th: config.d_th,
            seed,
        }),
        ProviderKind::Identity => Box::new(IdentityProvider),
        ProviderKind::Correlation => {
            Box::new(CorrelationProvider { observation: scene.observation.clone(), radius: config.lookup_radius })
        }
    }
}

/// A rendered foreground pixel lifted into object space.
#[derive(Clone, Copy, Debug)]
struct Lifted {
    index: usize,
    pixel: Vector2<f64>,
    point: Vector3<f64>,
}

/// One outer iteration's render with the data derived from it.
pub struct RenderContext {
    pub render: RenderOutput,
    /// Pose sensitivity at crop resolution.
    pub sensitivity: Grid<f64>,
    lifted: Vec<Lifted>,
}

impl RenderContext {
    pub fn new(render: RenderOutput) -> Self {
        let camera = render.camera;
        let sensitivity = sensitivity_map(&render, &camera);
        let lifted = render
            .depth
            .iter_coords()
            .filter(|(_, _, &d)| d > 0.0)
            .filter_map(|(u, v, &d)| {
                let pixel = Vector2::new(u as f64, v as f64);
                let point = lift(&camera, &render.pose, &pixel, d).ok()?;
                Some(Lifted { index: v * camera.width + u, pixel, point })
            })
            .collect();
        RenderContext { render, sensitivity, lifted }
    }

    pub fn camera(&self) -> &Camera {
        &self.render.camera
    }

    /// Pose-induced flow of `pose` over the lifted pixels.
    pub fn induced_flow(&self, pose: &Pose) -> FlowField {
        let cam = self.camera();
        let mut out = FlowField::zeros(cam.width, cam.height);
        for l in &self.lifted {
            if let Ok(q) = cam.project(&pose.transform_point(&l.point)) {
                out.flow.as_mut_slice()[l.index] = q - l.pixel;
                out.valid.as_mut_slice()[l.index] = true;
            }
        }
        out
    }

    pub fn foreground_count(&self) -> usize {
        self.lifted.len()
    }
}

/// Refinement state carried between inner updates.
#[derive(Clone, Debug)]
pub struct InnerState {
    pub pose: Pose,
    /// Last upsampled flow (crop resolution).
    pub flow: Option<FlowField>,
    /// Last upsampled certainty (crop resolution).
    pub certainty: Option<Grid<f64>>,
    /// Pose-induced flow of `pose`.
    pub induced: FlowField,
}

impl InnerState {
    /// Starts from `pose` with the pose-induced flow as the initial flow.
    pub fn new(ctx: &RenderContext, pose: Pose) -> Self {
        let induced = ctx.induced_flow(&pose);
        InnerState { pose, flow: Some(induced.clone()), certainty: None, induced }
    }
}

/// Result of one inner update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerStep {
    pub pose: Pose,
    /// Why the pose was kept, when it was.
    pub flag: Option<String>,
    pub correspondences: usize,
}

/// One inner update at level `factor`: provider flow, convex upsampling,
/// certainty x sensitivity weights, lifting and 3 LM + 1 GN steps.
/// Degenerate solves keep the previous pose and set a flag.
pub fn inner_update(
    ctx: &RenderContext,
    state: &mut InnerState,
    source: &dyn FlowSource,
    factor: usize,
    inner: usize,
    config: &RefinerConfig,
) -> Result<InnerStep> {
    let camera = ctx.camera();
    if camera.width % factor != 0 || camera.height % factor != 0 {
        return Err(Error::InvalidArgument(format!("crop {}x{} not divisible by {factor}", camera.width, camera.height)));
    }
    let keep = |state: &InnerState, flag: String| InnerStep { pose: state.pose, flag: Some(flag), correspondences: 0 };
    if ctx.lifted.is_empty() {
        return Ok(keep(state, "no foreground pixels".into()));
    }
    let est = source.estimate(&FlowRequest { pose: &state.pose, induced: &state.induced, factor, inner })?;
    let flow = convex_upsample(&est.flow, &est.mask, factor)?;
    let certainty = if config.use_certainty {
        est.certainty.upsample_bilinear(factor).map(|c| c.clamp(0.0, 1.0))
    } else {
        Grid::new(camera.width, camera.height, 1.0)
    };
    let (mut points, mut pixels, mut flows, mut weights) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for l in &ctx.lifted {
        if !flow.valid.as_slice()[l.index] {
            continue;
        }
        let s = if config.use_sensitivity { ctx.sensitivity.as_slice()[l.index] } else { 1.0 };
        let w = certainty.as_slice()[l.index] * s;
        if w > 0.0 {
            points.push(l.point);
            pixels.push(l.pixel);
            flows.push(flow.flow.as_slice()[l.index]);
            weights.push(w);
        }
    }
    let n = points.len();
    let corrs = Correspondences2D3D::new(points, pixels, flows, weights)?;
    let solved = solve_pose(&corrs, camera, &state.pose);
    state.flow = Some(flow);
    state.certainty = Some(certainty);
    match solved {
        Ok((_, gn)) if !gn.singular && gn.pose.translation.iter().all(|x| x.is_finite()) => {
            state.pose = gn.pose;
            state.induced = ctx.induced_flow(&state.pose);
            Ok(InnerStep { pose: state.pose, flag: None, correspondences: n })
        }
        Ok(_) => Ok(keep(state, "singular normal equations".into())),
        Err(e @ (Error::Degenerate(_) | Error::Singular { .. })) => Ok(keep(state, e.to_string())),
        Err(e) => Err(e),
    }
}

/// Runs `inner_iters` updates split evenly across the levels, coarsest
/// first; each level starts from the previous level's pose and flow.
pub fn cascade_refine(
    initial: &Pose,
    ctx: &RenderContext,
    source: &dyn FlowSource,
    config: &RefinerConfig,
) -> Result<(Vec<(usize, InnerStep)>, InnerState)> {
    config.validate()?;
    let mut state = InnerState::new(ctx, *initial);
    let per_level = config.inner_iters / config.cascade_levels;
    let mut steps = Vec::with_capacity(config.inner_iters);
    for (l, &factor) in config.level_factors().iter().enumerate() {
        // zero innovation at each level start
        state.flow = Some(state.induced.clone());
        for k in 0..per_level {
            let step = inner_update(ctx, &mut state, source, factor, l * per_level + k + 1, config)?;
            steps.push((factor, step));
        }
    }
    Ok((steps, state))
}

/// Mean distance between model points under two poses.
pub fn add_distance(a: &Pose, b: &Pose, points: &[Vector3<f64>]) -> f64 {
    points.iter().map(|x| (a.transform_point(x) - b.transform_point(x)).norm()).sum::<f64>() / points.len() as f64
}

/// One inner update as written to a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 1-based outer iteration.
    pub outer: usize,
    /// 1-based inner update within the outer iteration.
    pub inner: usize,
    pub factor: usize,
    pub pose: Pose,
    pub add: Option<f64>,
    pub flag: Option<String>,
    pub correspondences: usize,
}

/// Outcome of [`depth_refine`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRefineOutcome {
    pub pose: Pose,
    pub flag: Option<String>,
    pub correspondences: usize,
    pub inliers: usize,
}

/// Full refinement record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineTrace {
    pub initial: Pose,
    pub records: Vec<TraceRecord>,
    /// Pose after each outer iteration.
    pub outer_poses: Vec<Pose>,
    /// ADD of the initial pose and after each outer iteration, when GT is known.
    pub outer_add: Vec<f64>,
    pub renders: usize,
    pub depth: Option<DepthRefineOutcome>,
    pub final_pose: Pose,
    #[serde(skip)]
    pub flows: Vec<FlowField>,
}

impl RefineTrace {
    pub fn flagged(&self) -> usize {
        self.records.iter().filter(|r| r.flag.is_some()).count()
    }

    /// One JSON object per inner update.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Square crop camera around the projection of the mesh at `pose`.
pub fn refinement_camera(renderer: &Renderer, pose: &Pose, camera: &Camera, config: &RefinerConfig) -> Result<Camera> {
    let pts = renderer.mesh().vertices.iter().filter_map(|x| camera.project(&pose.transform_point(x)).ok());
    let bbox = BBox::from_points(pts).ok_or(Error::BehindCamera(pose.translation.z))?;
    adjust_intrinsics(camera, &bbox.square(config.crop_padding), config.crop_size)
}

/// Everything refinement needs besides the starting pose.
pub struct RefineInputs<'a> {
    pub renderer: &'a Renderer<'a>,
    /// Full image camera.
    pub camera: Camera,
    pub provider: &'a dyn FlowProvider,
    /// Needed for depth refinement.
    pub observation: Option<&'a Observation>,
    /// Enables ADD columns in the trace.
    pub gt: Option<Pose>,
}

/// Outer render-and-refine loop: one render per outer iteration.
pub fn refine(initial: &Pose, inputs: &RefineInputs, config: &RefinerConfig) -> Result<RefineTrace> {
    config.validate()?;
    let points = inputs.renderer.mesh().model_points();
    let add = |p: &Pose| inputs.gt.map(|g| add_distance(p, &g, points));
    let mut trace = RefineTrace {
        initial: *initial,
        records: Vec::new(),
        outer_poses: Vec::new(),
        outer_add: add(initial).into_iter().collect(),
        renders: 0,
        depth: None,
        final_pose: *initial,
        flows: Vec::new(),
    };
    let mut pose = *initial;
    for k in 1..=config.outer_iters {
        let crop = refinement_camera(inputs.renderer, &pose, &inputs.camera, config)?;
        let ctx = RenderContext::new(inputs.renderer.render(&pose, &crop));
        trace.renders += 1;
        let source = inputs.provider.prepare(&ctx.render, k)?;
        let (steps, state) = cascade_refine(&pose, &ctx, source.as_ref(), config)?;
        for (j, (factor, s)) in steps.into_iter().enumerate() {
            trace.records.push(TraceRecord {
                outer: k,
                inner: j + 1,
                factor,
                pose: s.pose,
                add: add(&s.pose),
                flag: s.flag,
                correspondences: s.correspondences,
            });
        }
        if config.keep_flow {
            trace.flows.extend(state.flow.clone());
        }
        let prev = pose;
        pose = state.pose;
        let (dr, dt) = pose.error_to(&prev);
        let stop = config.early_exit && dr < EARLY_EXIT_TOL && dt < EARLY_EXIT_TOL;
        if config.depth_refine && (stop || k == config.outer_iters) {
            let obs = inputs.observation.ok_or_else(|| Error::InvalidArgument("depth refinement needs an observation".into()))?;
            let depth = obs.depth.as_ref().ok_or_else(|| Error::InvalidArgument("observation has no depth".into()))?;
            let flow = state.flow.as_ref().expect("set by inner updates");
            let certainty = state.certainty.clone().unwrap_or_else(|| Grid::new(crop.width, crop.height, 1.0));
            let out = depth_refine(&pose, &ctx.render, depth, &obs.camera, flow, &certainty, config, k as u64)?;
            pose = out.pose;
            trace.depth = Some(out);
        }
        trace.outer_poses.push(pose);
        trace.outer_add.extend(add(&pose));
        if stop {
            break;
        }
    }
    trace.final_pose = pose;
    Ok(trace)
}

/// RGB-D correction: rendered surface points (moved to `pose`) matched to
/// observed points at their flow targets, filtered by certainty and depth
/// validity, aligned with RANSAC-Kabsch. Falls back to `pose` with a flag.
#[allow(clippy::too_many_arguments)]
pub fn depth_refine(
    pose: &Pose,
    render: &RenderOutput,
    observed_depth: &Grid<f64>,
    observed_camera: &Camera,
    flow: &FlowField,
    certainty: &Grid<f64>,
    config: &RefinerConfig,
    seed: u64,
) -> Result<DepthRefineOutcome> {
    render.depth.check_shape(&flow.flow, "depth refine flow")?;
    render.depth.check_shape(certainty, "depth refine certainty")?;
    if observed_depth.dims() != (observed_camera.width, observed_camera.height) {
        return Err(Error::ShapeMismatch("observed depth vs camera".into()));
    }
    let cam = &render.camera;
    let inv = observed_depth.map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 });
    let (mut src, mut dst, mut cert) = (Vec::new(), Vec::new(), Vec::new());
    for (u, v, &d) in render.depth.iter_coords() {
        let c = *certainty.get(u, v);
        if d <= 0.0 || c < config.certainty_threshold {
            continue;
        }
        let Some(f) = flow.get(u, v) else { continue };
        let p = Vector2::new(u as f64, v as f64);
        let Ok(x) = lift(cam, &render.pose, &p, d) else { continue };
        let q = p + f;
        let (rx, ry) = ((q.x - cam.cx) / cam.fx, (q.y - cam.cy) / cam.fy);
        let (ou, ov) = (observed_camera.fx * rx + observed_camera.cx, observed_camera.fy * ry + observed_camera.cy);
        let Some(s) = inv.bilinear_where(ou, ov, |s| s > 0.0) else { continue };
        let z = 1.0 / s;
        src.push(pose.transform_point(&x));
        dst.push(Vector3::new(rx * z, ry * z, z));
        cert.push(c);
    }
    let n = src.len();
    let fallback = |flag: String, inliers| DepthRefineOutcome { pose: *pose, flag: Some(flag), correspondences: n, inliers };
    if n < 3 {
        return Ok(fallback(format!("{n} depth correspondences"), 0));
    }
    let corrs = Correspondences3D3D::new(src, dst, cert)?;
    match ransac_kabsch(&corrs, config.depth_inlier_threshold, config.ransac_iters, seed) {
        Ok((t, mask)) => Ok(DepthRefineOutcome {
            pose: t.compose(pose),
            flag: None,
            correspondences: n,
            inliers: mask.iter().filter(|&&b| b).count(),
        }),
        Err(Error::NoConsensus { inliers }) => Ok(fallback(format!("no consensus ({inliers} inliers)"), inliers)),
        Err(e) => Err(e),
    }
}

/// Refined hypotheses with their re-scores.
#[derive(Debug)]
pub struct MultiHypothesisResult {
    pub best: Pose,
    pub best_index: usize,
    /// Per hypothesis: score of the refined pose, or the failure.
    pub scores: Vec<std::result::Result<f64, String>>,
    pub traces: Vec<Option<RefineTrace>>,
    /// Renders spent on re-scoring.
    pub scoring_renders: usize,
}

/// Refines the first `config.n_hypotheses` hypotheses independently, scores
/// each refined pose in `score_camera` and returns the best; ties go to the
/// lower index.
pub fn multi_hypothesis_refine(
    hyps: &[Hypothesis],
    inputs: &RefineInputs,
    scorer: &dyn Scorer,
    observation: &Observation,
    score_camera: &Camera,
    config: &RefinerConfig,
) -> Result<MultiHypothesisResult> {
    config.validate()?;
    let n = config.n_hypotheses.min(hyps.len());
    if n == 0 {
        return Err(Error::InvalidArgument("no hypotheses to refine".into()));
    }
    let obs = observation.resample(score_camera);
    let results: Vec<std::result::Result<(RefineTrace, f64), String>> = hyps[..n]
        .par_iter()
        .map(|h| {
            let trace = refine(&h.pose, inputs, config).map_err(|e| e.to_string())?;
            let render = inputs.renderer.render(&trace.final_pose, score_camera);
            let score = scorer.score(&obs, &render).map_err(|e| e.to_string())?;
            Ok((trace, score))
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in results.iter().enumerate() {
        if let Ok((_, s)) = r {
            if best.is_none_or(|(_, b)| *s > b) {
                best = Some((i, *s));
            }
        }
    }
    let scoring_renders = results.iter().filter(|r| r.is_ok()).count();
    let (best_index, _) = best.ok_or(Error::AllRefinementsFailed)?;
    let mut scores = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    for r in results {
        match r {
            Ok((t, s)) => {
                scores.push(Ok(s));
                traces.push(Some(t));
            }
            Err(e) => {
                scores.push(Err(e));
                traces.push(None);
            }
        }
    }
    let best = traces[best_index].as_ref().unwrap().final_pose;
    Ok(MultiHypothesisResult { best, best_index, scores, traces, scoring_renders })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarse::{Provenance, SilhouetteScorer};
    use crate::geom::{EulerAngles, Rotation};
    use crate::losses::PerturbSpec;
    use crate::mesh::Mesh;
    use crate::render::rasterize;
    use crate::scene::{generate_scene, SceneSpec};

    fn mesh() -> Mesh {
        Mesh::bracket().with_surface_points(200, 1)
    }

    fn scene(mesh: &Mesh, seed: u64) -> Scene {
        generate_scene(mesh, &SceneSpec::default(), seed).unwrap()
    }

    fn oracle_inputs<'a>(renderer: &'a Renderer<'a>, scene: &'a Scene, provider: &'a dyn FlowProvider) -> RefineInputs<'a> {
        RefineInputs {
            renderer,
            camera: scene.camera,
            provider,
            observation: Some(&scene.observation),
            gt: Some(scene.gt_pose),
        }
    }

    fn no_exit() -> RefinerConfig {
        RefinerConfig { early_exit: false, ..Default::default() }
    }

    #[test]
    fn config_validation() {
        assert!(RefinerConfig::default().validate().is_ok());
        assert!(RefinerConfig { inner_iters: 7, ..Default::default() }.validate().is_err());
        assert!(RefinerConfig { cascade_levels: 0, ..Default::default() }.validate().is_err());
        assert!(RefinerConfig { crop_size: 100, ..Default::default() }.validate().is_err());
        assert!(RefinerConfig::from_json(r#"{"outer_iters": 3, "provider": "corrupted"}"#).unwrap().outer_iters == 3);
        assert!(RefinerConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let c = RefinerConfig::default();
        assert_eq!(c.level_factors(), vec![8, 4]);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RefinerConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn ground_truth_start_is_a_fixed_point() {
        let m = mesh();
        let s = scene(&m, 1);
        let r = Renderer::new(&m);
        let p = SyntheticProvider::oracle(s.gt_pose);
        let t = refine(&s.gt_pose, &oracle_inputs(&r, &s, &p), &no_exit()).unwrap();
        let (dr, dt) = t.final_pose.error_to(&s.gt_pose);
        assert!(dr < 1e-6 && dt < 1e-6, "{dr} {dt}");
    }

    #[test]
    fn renders_once_per_outer_iteration() {
        let m = mesh();
        let s = scene(&m, 2);
        let r = Renderer::new(&m);
        let p = SyntheticProvider::oracle(s.gt_pose);
        let init = PerturbSpec::default().apply(&s.gt_pose, 5).unwrap();
        let t = refine(&init, &oracle_inputs(&r, &s, &p), &no_exit()).unwrap();
        assert_eq!(r.calls(), 5);
        assert_eq!(t.renders, 5);
        assert_eq!(t.records.len(), 40);
        assert_eq!(t.records.iter().filter(|x| x.factor == 8).count(), 20);
    }

    #[test]
    fn oracle_refinement_converges_from_training_noise() {
        let m = mesh();
        let r = Renderer::new(&m);
        let mut ok = 0;
        for i in 0..10 {
            let s = scene(&m, 100 + i);
            let p = SyntheticProvider::oracle(s.gt_pose);
            let init = PerturbSpec::default().apply(&s.gt_pose, i).unwrap();
            let t = refine(&init, &oracle_inputs(&r, &s, &p), &no_exit()).unwrap();
            let (dr, dt) = t.final_pose.error_to(&s.gt_pose);
            if dr < 1f64.to_radians() && dt < 0.005 {
                ok += 1;
            }
        }
        assert!(ok >= 9, "{ok}/10");
    }

    #[test]
    fn early_exit_saves_renders() {
        let m = mesh();
        let s = scene(&m, 3);
        let r = Renderer::new(&m);
        let p = SyntheticProvider::oracle(s.gt_pose);
        let t = refine(&s.gt_pose, &oracle_inputs(&r, &s, &p), &RefinerConfig::default()).unwrap();
        assert_eq!(t.renders, 1);
    }

    #[test]
    fn identity_provider_is_a_fixed_point() {
        let m = mesh();
        let s = scene(&m, 4);
        let r = Renderer::new(&m);
        let init = PerturbSpec::default().apply(&s.gt_pose, 9).unwrap();
        let cfg = RefinerConfig { outer_iters: 1, ..no_exit() };
        let t = refine(&init, &oracle_inputs(&r, &s, &IdentityProvider), &cfg).unwrap();
        let (dr, dt) = t.final_pose.error_to(&init);
        assert!(dr < 1e-9 && dt < 1e-9, "{dr} {dt}");
    }

    #[test]
    fn empty_render_keeps_pose_and_flags() {
        let m = mesh();
        let cam = Camera::new(100.0, 100.0, 31.5, 31.5, 64, 64).unwrap();
        let pose = Pose::from_translation(Vector3::new(5.0, 0.0, 1.0));
        let ctx = RenderContext::new(rasterize(&m, &pose, &cam));
        assert_eq!(ctx.foreground_count(), 0);
        let mut state = InnerState::new(&ctx, pose);
        let step = inner_update(&ctx, &mut state, &IdentitySource, 8, 1, &RefinerConfig::default()).unwrap();
        assert_eq!(step.pose, pose);
        assert!(step.flag.is_some());
    }

    #[test]
    fn single_oracle_update_moves_closer() {
        let m = mesh();
        let r = Renderer::new(&m);
        let cfg = RefinerConfig::default();
        let mut closer = 0;
        let trials = 40;
        for i in 0..trials {
            let s = scene(&m, 200 + i);
            let init = PerturbSpec::default().apply(&s.gt_pose, 50 + i).unwrap();
            let crop = refinement_camera(&r, &init, &s.camera, &cfg).unwrap();
            let ctx = RenderContext::new(r.render(&init, &crop));
            let p = SyntheticProvider::oracle(s.gt_pose);
            let src = p.prepare(&ctx.render, 1).unwrap();
            let mut state = InnerState::new(&ctx, init);
            let step = inner_update(&ctx, &mut state, src.as_ref(), 8, 1, &cfg).unwrap();
            let (r0, t0) = init.error_to(&s.gt_pose);
            let (r1, t1) = step.pose.error_to(&s.gt_pose);
            if r1 < r0 && t1 < t0 {
                closer += 1;
            }
        }
        assert!(closer >= trials - 1, "{closer}/{trials}");
    }

    #[test]
    fn single_level_cascade_is_one_module() {
        let m = mesh();
        let s = scene(&m, 5);
        let r = Renderer::new(&m);
        let p = SyntheticProvider::oracle(s.gt_pose);
        let cfg = RefinerConfig { cascade_levels: 1, ..no_exit() };
        let init = PerturbSpec::default().apply(&s.gt_pose, 3).unwrap();
        let t = refine(&init, &oracle_inputs(&r, &s, &p), &cfg).unwrap();
        assert!(t.records.iter().all(|x| x.factor == 8));
        assert_eq!(t.records.len(), 40);
    }

    #[test]
    fn both_cascades_converge_with_oracle_flow() {
        let m = mesh();
        let s = scene(&m, 6);
        let r = Renderer::new(&m);
        let p = SyntheticProvider::oracle(s.gt_pose);
        let init = PerturbSpec::default().apply(&s.gt_pose, 4).unwrap();
        for levels in [1, 2] {
            let cfg = RefinerConfig { cascade_levels: levels, ..no_exit() };
            let t = refine(&init, &oracle_inputs(&r, &s, &p), &cfg).unwrap();
            let (dr, dt) = t.final_pose.error_to(&s.gt_pose);
            assert!(dr < 1e-3 && dt < 1e-3, "levels {levels}: {dr} {dt}");
        }
    }

    #[test]
    fn refinement_is_deterministic() {
        let m = mesh();
        let s = scene(&m, 7);
        let cfg = RefinerConfig { provider: ProviderKind::Corrupted, outer_iters: 2, ..no_exit() };
        let run = || {
            let r = Renderer::new(&m);
            let p = scene_provider(&cfg, &s, 11);
            let init = PerturbSpec::default().apply(&s.gt_pose, 1).unwrap();
            let t = refine(&init, &oracle_inputs(&r, &s, p.as_ref()), &cfg).unwrap();
            let mut buf = Vec::new();
            t.write_jsonl(&mut buf).unwrap();
            buf
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 16);
    }

    #[test]
    fn depth_refine_with_exact_depth_recovers_ground_truth() {
        let m = mesh();
        let s = scene(&m, 8);
        let r = Renderer::new(&m);
        let cfg = RefinerConfig::default();
        let init = PerturbSpec { rot_std_deg: 3.0, trans_std: [0.005, 0.005, 0.01], ..Default::default() }
            .apply(&s.gt_pose, 2)
            .unwrap();
        let crop = refinement_camera(&r, &init, &s.camera, &cfg).unwrap();
        let render = r.render(&init, &crop);
        let flow = oracle_flow(&render, &s.gt_pose, &crop);
        let certainty = Grid::new(crop.width, crop.height, 1.0);
        let depth = rasterize(&m, &s.gt_pose, &s.camera).depth;
        // only points on the same facet as their flow target are exact
        let tight = RefinerConfig { depth_inlier_threshold: 1e-6, ..cfg };
        let out = depth_refine(&init, &render, &depth, &s.camera, &flow, &certainty, &tight, 0).unwrap();
        assert!(out.flag.is_none());
        let (dr, dt) = out.pose.error_to(&s.gt_pose);
        assert!(dr < 1e-6 && dt < 1e-6, "{dr} {dt}");
    }

    #[test]
    fn depth_refine_without_certain_pixels_falls_back() {
        let m = mesh();
        let s = scene(&m, 9);
        let r = Renderer::new(&m);
        let cfg = RefinerConfig::default();
        let crop = refinement_camera(&r, &s.gt_pose, &s.camera, &cfg).unwrap();
        let render = r.render(&s.gt_pose, &crop);
        let flow = oracle_flow(&render, &s.gt_pose, &crop);
        let low = Grid::new(crop.width, crop.height, 0.2);
        let out = depth_refine(&s.gt_pose, &render, &s.clean_depth, &s.camera, &flow, &low, &cfg, 0).unwrap();
        assert_eq!(out.pose, s.gt_pose);
        assert!(out.flag.is_some());
    }

    #[test]
    fn multi_hypothesis_budget_and_ties() {
        let m = mesh();
        let s = scene(&m, 10);
        let r = Renderer::new(&m);
        let p = SyntheticProvider::oracle(s.gt_pose);
        let inputs = oracle_inputs(&r, &s, &p);
        let init = PerturbSpec::default().apply(&s.gt_pose, 8).unwrap();
        let hyps = vec![Hypothesis { pose: init, score: 0.5, provenance: Provenance::Gmm }; 3];
        let score_cam = crate::coarse::scoring_camera(&s.camera, &s.bbox).unwrap();
        let cfg = RefinerConfig { n_hypotheses: 3, outer_iters: 2, ..no_exit() };
        let res = multi_hypothesis_refine(&hyps, &inputs, &SilhouetteScorer, &s.observation, &score_cam, &cfg).unwrap();
        assert_eq!(r.calls(), 3 * 2 + 3);
        assert_eq!(res.best_index, 0);
        let t0 = res.traces[0].as_ref().unwrap();
        assert!(res.traces.iter().all(|t| t.as_ref().unwrap().final_pose == t0.final_pose));
    }

    #[test]
    fn single_hypothesis_matches_refine() {
        let m = mesh();
        let s = scene(&m, 11);
        let r = Renderer::new(&m);
        let p = SyntheticProvider::oracle(s.gt_pose);
        let inputs = oracle_inputs(&r, &s, &p);
        let init = PerturbSpec::default().apply(&s.gt_pose, 12).unwrap();
        let cfg = RefinerConfig { outer_iters: 2, ..no_exit() };
        let hyps = [Hypothesis { pose: init, score: 1.0, provenance: Provenance::Grid }];
        let score_cam = crate::coarse::scoring_camera(&s.camera, &s.bbox).unwrap();
        let res = multi_hypothesis_refine(&hyps, &inputs, &SilhouetteScorer, &s.observation, &score_cam, &cfg).unwrap();
        assert_eq!(res.best, refine(&init, &inputs, &cfg).unwrap().final_pose);
    }

    #[test]
    fn all_failed_hypotheses_error() {
        let m = mesh();
        let s = scene(&m, 12);
        let r = Renderer::new(&m);
        let p = SyntheticProvider::oracle(s.gt_pose);
        let inputs = oracle_inputs(&r, &s, &p);
        let behind = Pose::new(Rotation::from_euler(EulerAngles::new(0.1, 0.0, 0.0)), Vector3::new(0.0, 0.0, -1.0));
        let hyps = [Hypothesis { pose: behind, score: 1.0, provenance: Provenance::Grid }];
        let score_cam = crate::coarse::scoring_camera(&s.camera, &s.bbox).unwrap();
        let res = multi_hypothesis_refine(&hyps, &inputs, &SilhouetteScorer, &s.observation, &score_cam, &no_exit());
        assert!(matches!(res, Err(Error::AllRefinementsFailed)));
    }

    #[test]
    fn correlation_provider_on_identical_images_returns_induced_flow() {
        let m = mesh();
        let s = scene(&m, 13);
        let r = Renderer::new(&m);
        let cfg = RefinerConfig::default();
        let crop = refinement_camera(&r, &s.gt_pose, &s.camera, &cfg).unwrap();
        let render = r.render(&s.gt_pose, &crop);
        let obs = Observation::from_render(&render);
        let p = CorrelationProvider { observation: obs, radius: 3 };
        let ctx = RenderContext::new(render);
        let src = p.prepare(&ctx.render, 1).unwrap();
        let induced = ctx.induced_flow(&s.gt_pose);
        let est = src.estimate(&FlowRequest { pose: &s.gt_pose, induced: &induced, factor: 8, inner: 1 }).unwrap();
        let expect = induced.downsample(8);
        let textured = (0..expect.valid.len())
            .filter(|&i| expect.valid.as_slice()[i] && est.certainty.as_slice()[i] > 0.99)
            .collect::<Vec<_>>();
        let exact = textured
            .iter()
            .filter(|&&i| (est.flow.flow.as_slice()[i] - expect.flow.as_slice()[i]).norm() < 1e-12)
            .count();
        // flat regions have several equally good taps
        assert!(exact * 10 >= textured.len() * 9, "{exact}/{}", textured.len());
    }

    #[test]
    fn provider_kind_parses() {
        assert_eq!("corrupted".parse::<ProviderKind>().unwrap(), ProviderKind::Corrupted);
        assert!("neural".parse::<ProviderKind>().is_err());
    }
}
