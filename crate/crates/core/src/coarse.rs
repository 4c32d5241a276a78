//! Coarse pose hypotheses: score a fixed rotation grid, fit a Gaussian
//! mixture over Euler angles to the best grid rotations, score as many
//! mixture samples, and keep the best.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Camera, EulerAngles, Pose, Rotation};
use crate::image::Grid;
use crate::render::{adjust_intrinsics, translation_from_bbox, BBox, RenderOutput, Renderer, COARSE_RESOLUTION};
use crate::scene::Observation;

/// Where a hypothesis came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Grid,
    Gmm,
    Refined,
}

/// A scored candidate pose; higher scores are better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub pose: Pose,
    pub score: f64,
    pub provenance: Provenance,
}

/// Scores a rendered hypothesis against an observation.
pub trait Scorer: Sync {
    fn score(&self, observation: &Observation, render: &RenderOutput) -> Result<f64>;
}

impl<F> Scorer for F
where
    F: Fn(&Observation, &RenderOutput) -> Result<f64> + Sync,
{
    fn score(&self, observation: &Observation, render: &RenderOutput) -> Result<f64> {
        self(observation, render)
    }
}

/// Intersection over union of two masks; 0 when both are empty.
pub fn silhouette_iou_scorer(observation_mask: &Grid<bool>, render: &RenderOutput) -> Result<f64> {
    observation_mask.check_shape(&render.mask, "silhouette scorer").map_err(|e| Error::Scorer(e.to_string()))?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in observation_mask.as_slice().iter().zip(render.mask.as_slice()) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Mask IoU against the observed silhouette.
#[derive(Clone, Copy, Debug, Default)]
pub struct SilhouetteScorer;

impl Scorer for SilhouetteScorer {
    fn score(&self, observation: &Observation, render: &RenderOutput) -> Result<f64> {
        silhouette_iou_scorer(&observation.mask, render)
    }
}

/// Negative geodesic distance of the rendered rotation to a known rotation.
#[derive(Clone, Debug)]
pub struct OracleGeodesicScorer {
    pub gt: Rotation,
}

impl Scorer for OracleGeodesicScorer {
    fn score(&self, _: &Observation, render: &RenderOutput) -> Result<f64> {
        Ok(-render.pose.rotation.geodesic_distance(&self.gt))
    }
}

/// Negative average model-point distance to a known pose.
#[derive(Clone, Debug)]
pub struct OracleAddScorer {
    pub gt: Pose,
    pub points: Vec<Vector3<f64>>,
}

impl Scorer for OracleAddScorer {
    fn score(&self, _: &Observation, render: &RenderOutput) -> Result<f64> {
        if self.points.is_empty() {
            return Err(Error::Scorer("no model points".into()));
        }
        let sum: f64 =
            self.points.iter().map(|x| (render.pose.transform_point(x) - self.gt.transform_point(x)).norm()).sum();
        Ok(-sum / self.points.len() as f64)
    }
}

/// `count` well-spread rotations (super-Fibonacci spiral), rotated so that
/// the first one is the identity.
pub fn rotation_grid(count: usize) -> Vec<Rotation> {
    const PHI: f64 = std::f64::consts::SQRT_2;
    const PSI: f64 = 1.533_751_168_755_204_3;
    let n = count as f64;
    let quats: Vec<nalgebra::UnitQuaternion<f64>> = (0..count)
        .map(|i| {
            let s = i as f64 + 0.5;
            let r = (s / n).sqrt();
            let big_r = (1.0 - s / n).sqrt();
            let alpha = 2.0 * PI * s / PHI;
            let beta = 2.0 * PI * s / PSI;
            nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                big_r * beta.cos(),
                r * alpha.sin(),
                r * alpha.cos(),
                big_r * beta.sin(),
            ))
        })
        .collect();
    let Some(first) = quats.first().map(|q| q.inverse()) else { return Vec::new() };
    quats
        .iter()
        .map(|q| Rotation::from_matrix_projected((q * first).to_rotation_matrix().into_inner()))
        .collect()
}

/// Equal-weight mixture of isotropic Gaussians over (yaw, pitch, roll).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationGMM {
    pub means: Vec<EulerAngles>,
    /// Per-axis standard deviation, radians.
    pub sigma: f64,
}

impl RotationGMM {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        vec![1.0 / self.k() as f64; self.k()]
    }

    /// Density on the wrapped domain `[-pi, pi)^3`, summing the nearest
    /// images of each Gaussian across the seams.
    pub fn density(&self, e: &EulerAngles) -> f64 {
        let s2 = self.sigma * self.sigma;
        let norm = 1.0 / (2.0 * PI * s2).sqrt();
        let axis = |x: f64, mu: f64| -> f64 {
            (-2..=2).map(|m| {
                let d = x - mu + 2.0 * PI * m as f64;
                norm * (-0.5 * d * d / s2).exp()
            })
            .sum()
        };
        let x = e.as_vector();
        self.means
            .iter()
            .map(|mu| {
                let m = mu.as_vector();
                axis(x[0], m[0]) * axis(x[1], m[1]) * axis(x[2], m[2])
            })
            .sum::<f64>()
            / self.k() as f64
    }
}

/// One component per rotation, centered at its Euler angles.
pub fn fit_gmm(top_rotations: &[Rotation], sigma: f64) -> Result<RotationGMM> {
    if top_rotations.is_empty() {
        return Err(Error::InvalidArgument("cannot fit a mixture to no rotations".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    Ok(RotationGMM { means: top_rotations.iter().map(|r| r.to_euler()).collect(), sigma })
}

/// Draws Euler angles: a uniformly chosen component, Gaussian noise, then
/// wrapping into `[-pi, pi)`.
pub fn sample_gmm_angles(gmm: &RotationGMM, count: usize, seed: u64) -> Vec<EulerAngles> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, gmm.sigma).unwrap();
    (0..count)
        .map(|_| {
            let mu = gmm.means[rng.random_range(0..gmm.k())];
            let (a, b, c) = (normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
            EulerAngles {
                yaw: wrap_angle(mu.yaw + a),
                pitch: wrap_angle(mu.pitch + b),
                roll: wrap_angle(mu.roll + c),
            }
        })
        .collect()
}

pub fn sample_gmm(gmm: &RotationGMM, count: usize, seed: u64) -> Vec<Rotation> {
    sample_gmm_angles(gmm, count, seed).into_iter().map(Rotation::from_euler).collect()
}

/// Parameters of [`coarse_estimate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseParams {
    /// Grid size, and also the number of mixture samples.
    pub m: usize,
    /// Mixture components fitted to the best grid rotations.
    pub k: usize,
    /// Hypotheses returned.
    pub n: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for CoarseParams {
    fn default() -> Self {
        CoarseParams { m: 104, k: 16, n: 10, sigma: 15f64.to_radians(), seed: 0 }
    }
}

/// Camera of the square scoring crop around a detection.
pub fn scoring_camera(camera: &Camera, bbox: &BBox) -> Result<Camera> {
    adjust_intrinsics(camera, &bbox.square(1.0), COARSE_RESOLUTION)
}

/// Renders and scores rotations placed in `bbox`, in parallel, keeping
/// input order.
pub fn score_rotations(
    rotations: &[Rotation],
    observation: &Observation,
    renderer: &Renderer,
    bbox: &BBox,
    camera: &Camera,
    scorer: &dyn Scorer,
    provenance: Provenance,
) -> Result<Vec<Hypothesis>> {
    let crop = scoring_camera(camera, bbox)?;
    let obs = observation.resample(&crop);
    rotations
        .par_iter()
        .map(|r| {
            let pose = Pose::new(*r, translation_from_bbox(renderer.mesh(), bbox, camera, r));
            let render = renderer.render(&pose, &crop);
            let score = scorer.score(&obs, &render)?;
            if !score.is_finite() {
                return Err(Error::Scorer(format!("non-finite score {score}")));
            }
            Ok(Hypothesis { pose, score, provenance })
        })
        .collect()
}

/// Indices sorted by descending score, ties by lower index.
fn ranking(hyps: &[Hypothesis]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..hyps.len()).collect();
    idx.sort_by(|&a, &b| hyps[b].score.total_cmp(&hyps[a].score).then(a.cmp(&b)));
    idx
}

/// The full coarse stage: `2 m` renders and scorer calls, returning the best
/// `n` hypotheses by score.
pub fn coarse_estimate(
    observation: &Observation,
    renderer: &Renderer,
    bbox: &BBox,
    camera: &Camera,
    scorer: &dyn Scorer,
    params: &CoarseParams,
) -> Result<Vec<Hypothesis>> {
    let CoarseParams { m, k, n, sigma, seed } = *params;
    if !(k >= 1 && m >= k && n <= 2 * m) {
        return Err(Error::InvalidArgument(format!("need m >= k >= 1 and n <= 2m, got m={m} k={k} n={n}")));
    }
    let grid = rotation_grid(m);
    let mut hyps = score_rotations(&grid, observation, renderer, bbox, camera, scorer, Provenance::Grid)?;
    let top: Vec<Rotation> = ranking(&hyps).into_iter().take(k).map(|i| hyps[i].pose.rotation).collect();
    let gmm = fit_gmm(&top, sigma)?;
    let samples = sample_gmm(&gmm, m, seed);
    hyps.extend(score_rotations(&samples, observation, renderer, bbox, camera, scorer, Provenance::Gmm)?);
    let order = ranking(&hyps);
    Ok(order.into_iter().take(n).map(|i| hyps[i].clone()).collect())
}

/// Baseline: score `count` grid rotations and keep the best `n`.
pub fn naive_estimate(
    observation: &Observation,
    renderer: &Renderer,
    bbox: &BBox,
    camera: &Camera,
    scorer: &dyn Scorer,
    count: usize,
    n: usize,
) -> Result<Vec<Hypothesis>> {
    let hyps = score_rotations(&rotation_grid(count), observation, renderer, bbox, camera, scorer, Provenance::Grid)?;
    Ok(ranking(&hyps).into_iter().take(n).map(|i| hyps[i].clone()).collect())
}
