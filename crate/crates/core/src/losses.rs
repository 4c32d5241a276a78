//! Training objectives as plain functions: endpoint flow error, the
//! disentangled point-matching pose loss, certainty cross-entropy, the
//! iteration-weighted total, and the pose-noise sampler used to build
//! refinement starts.
//!
//! [`pose_loss_gradients`] chains the pose loss through the GN step's
//! implicit derivatives, with certainty held constant in that path.

use nalgebra::{Matrix3, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geom::{skew, so3_left_jacobian, Camera, EulerAngles, Pose, Rotation};
use crate::image::Grid;
use crate::solver::{gn_step_jacobians, Correspondences2D3D};

/// Mean L1 endpoint error `|du| + |dv|` over pixels valid in both fields.
pub fn flow_epe_loss(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    pred.flow.check_shape(&gt.flow, "flow loss")?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.flow.len() {
        if pred.valid.as_slice()[i] && gt.valid.as_slice()[i] {
            let d = pred.flow.as_slice()[i] - gt.flow.as_slice()[i];
            sum += d.x.abs() + d.y.abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("flow loss over an empty valid set".into()));
    }
    Ok(sum / n as f64)
}

/// Norm applied to per-point 3D differences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointNorm {
    #[default]
    L1,
    L2,
}

impl PointNorm {
    fn apply(self, d: &Vector3<f64>) -> f64 {
        match self {
            PointNorm::L1 => d.x.abs() + d.y.abs() + d.z.abs(),
            PointNorm::L2 => d.norm(),
        }
    }

    /// Gradient of the norm with respect to the difference vector.
    fn grad(self, d: &Vector3<f64>) -> Vector3<f64> {
        match self {
            PointNorm::L1 => d.map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }),
            PointNorm::L2 => {
                let n = d.norm();
                if n > 0.0 {
                    d / n
                } else {
                    Vector3::zeros()
                }
            }
        }
    }
}

/// Mean over model points of `|p1 x - p2 x|` (L1 of the difference).
pub fn point_matching_distance(p1: &Pose, p2: &Pose, points: &[Vector3<f64>]) -> f64 {
    point_matching_distance_with(p1, p2, points, PointNorm::L1)
}

pub fn point_matching_distance_with(p1: &Pose, p2: &Pose, points: &[Vector3<f64>], norm: PointNorm) -> f64 {
    points.iter().map(|x| norm.apply(&(p1.transform_point(x) - p2.transform_point(x)))).sum::<f64>()
        / points.len() as f64
}

/// The three hybrid poses taking one factor from `pred` and the rest from
/// `gt`: rotation, image-plane translation, depth.
pub fn hybrid_poses(pred: &Pose, gt: &Pose) -> [Pose; 3] {
    let (tp, tg) = (pred.translation, gt.translation);
    [
        Pose::new(pred.rotation, tg),
        Pose::new(gt.rotation, Vector3::new(tp.x, tp.y, tg.z)),
        Pose::new(gt.rotation, Vector3::new(tg.x, tg.y, tp.z)),
    ]
}

/// Per-factor point-matching distances of the hybrid poses to `gt`.
pub fn disentangled_terms(pred: &Pose, gt: &Pose, points: &[Vector3<f64>], norm: PointNorm) -> [f64; 3] {
    hybrid_poses(pred, gt).map(|h| point_matching_distance_with(&h, gt, points, norm))
}

/// Sum of the three disentangled terms, L1 norm.
pub fn disentangled_pose_loss(pred: &Pose, gt: &Pose, points: &[Vector3<f64>]) -> Result<f64> {
    disentangled_pose_loss_with(pred, gt, points, PointNorm::L1)
}

pub fn disentangled_pose_loss_with(pred: &Pose, gt: &Pose, points: &[Vector3<f64>], norm: PointNorm) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("pose loss needs model points".into()));
    }
    Ok(disentangled_terms(pred, gt, points, norm).iter().sum())
}

/// Gradient of the disentangled loss with respect to a left twist applied
/// to `pred` (rotation part first).
pub fn disentangled_loss_twist_gradient(pred: &Pose, gt: &Pose, points: &[Vector3<f64>], norm: PointNorm) -> Vector6<f64> {
    let n = points.len() as f64;
    let mut g_rot = Vector3::zeros();
    for x in points {
        let rx = pred.rotation * *x;
        let d = rx - gt.rotation * *x;
        // d(Exp(w) R x)/dw at w = 0 is -[R x]x
        g_rot += -skew(&rx).transpose() * norm.grad(&d);
    }
    let dt = pred.translation - gt.translation;
    let g_xy = norm.grad(&Vector3::new(dt.x, dt.y, 0.0));
    let g_z = norm.grad(&Vector3::new(0.0, 0.0, dt.z));
    let g_t = Vector3::new(g_xy.x, g_xy.y, g_z.z);
    let mut g = Vector6::zeros();
    g.fixed_rows_mut::<3>(0).copy_from(&(g_rot / n));
    g.fixed_rows_mut::<3>(3).copy_from(&g_t);
    g
}

/// Binary cross-entropy clamp.
pub const BCE_EPS: f64 = 1e-7;

fn check_bce(pred: &Grid<f64>, gt: &Grid<bool>, domain: &Grid<bool>) -> Result<usize> {
    pred.check_shape(gt, "certainty loss")?;
    pred.check_shape(domain, "certainty loss domain")?;
    let n = domain.as_slice().iter().filter(|&&d| d).count();
    if n == 0 {
        return Err(Error::InvalidArgument("certainty loss over an empty domain".into()));
    }
    Ok(n)
}

/// Mean binary cross-entropy over `domain` with predictions clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn certainty_bce(pred: &Grid<f64>, gt: &Grid<bool>, domain: &Grid<bool>) -> Result<f64> {
    let n = check_bce(pred, gt, domain)?;
    let mut sum = 0.0;
    for i in 0..pred.len() {
        if domain.as_slice()[i] {
            let p = pred.as_slice()[i].clamp(BCE_EPS, 1.0 - BCE_EPS);
            sum -= if gt.as_slice()[i] { p.ln() } else { (1.0 - p).ln() };
        }
    }
    Ok(sum / n as f64)
}

/// Derivative of [`certainty_bce`] with respect to each prediction (zero
/// outside the domain and where the clamp is active).
pub fn certainty_bce_grad(pred: &Grid<f64>, gt: &Grid<bool>, domain: &Grid<bool>) -> Result<Grid<f64>> {
    let n = check_bce(pred, gt, domain)? as f64;
    let mut out = Grid::new(pred.width(), pred.height(), 0.0);
    for i in 0..pred.len() {
        let p = pred.as_slice()[i];
        if domain.as_slice()[i] && p > BCE_EPS && p < 1.0 - BCE_EPS {
            out.as_mut_slice()[i] = if gt.as_slice()[i] { -1.0 / p } else { 1.0 / (1.0 - p) } / n;
        }
    }
    Ok(out)
}

/// Weights of the iteration-summed objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub n: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { gamma: 0.8, alpha: 1.0, beta: 0.1, n: 8 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.alpha >= 0.0) || !(self.beta >= 0.0) || self.n == 0 {
            return Err(Error::InvalidArgument(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }

    /// Coefficient of iteration `j` (1-based): `gamma^(j - n)`.
    pub fn iteration_weight(&self, j: usize) -> f64 {
        self.gamma.powi(j as i32 - self.n as i32)
    }
}

/// Loss components of one inner iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationLosses {
    pub flow: f64,
    pub cert: f64,
    pub pose: f64,
}

/// `sum_j gamma^(j - N) (flow_j + alpha cert_j + beta pose_j)`.
pub fn total_loss(per_iter: &[IterationLosses], weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    if per_iter.len() != weights.n {
        return Err(Error::ShapeMismatch(format!("{} iteration losses for N = {}", per_iter.len(), weights.n)));
    }
    Ok(per_iter
        .iter()
        .enumerate()
        .map(|(i, l)| weights.iteration_weight(i + 1) * (l.flow + weights.alpha * l.cert + weights.beta * l.pose))
        .sum())
}

/// Unit of configured translation noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthUnit {
    #[default]
    M,
    Cm,
    Mm,
}

impl LengthUnit {
    pub fn to_meters(self) -> f64 {
        match self {
            LengthUnit::M => 1.0,
            LengthUnit::Cm => 0.01,
            LengthUnit::Mm => 0.001,
        }
    }
}

/// Pose noise for refinement starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbSpec {
    pub rot_std_deg: f64,
    pub trans_std: [f64; 3],
    pub trans_unit: LengthUnit,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        PerturbSpec { rot_std_deg: 15.0, trans_std: [0.01, 0.01, 0.05], trans_unit: LengthUnit::M }
    }
}

impl PerturbSpec {
    pub fn trans_std_m(&self) -> Vector3<f64> {
        Vector3::from(self.trans_std) * self.trans_unit.to_meters()
    }

    pub fn apply(&self, gt: &Pose, seed: u64) -> Result<Pose> {
        perturb_pose(gt, &self.trans_std_m(), self.rot_std_deg, seed)
    }
}

/// `gt` with independent Gaussian Euler-angle noise (left-multiplied) and
/// per-axis Gaussian translation noise.
pub fn perturb_pose(gt: &Pose, trans_std: &Vector3<f64>, rot_std_deg: f64, seed: u64) -> Result<Pose> {
    if trans_std.iter().any(|s| !(*s >= 0.0)) || !(rot_std_deg >= 0.0) {
        return Err(Error::InvalidArgument("noise standard deviations must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |std: f64| if std > 0.0 { Normal::new(0.0, std).unwrap().sample(&mut rng) } else { 0.0 };
    let s = rot_std_deg.to_radians();
    let noise = EulerAngles::new(draw(s), draw(s), draw(s));
    let dt = Vector3::new(draw(trans_std.x), draw(trans_std.y), draw(trans_std.z));
    Ok(Pose::new(Rotation::from_euler(noise) * gt.rotation, gt.translation + dt))
}

/// Pose loss of a GN step and its gradients.
#[derive(Clone, Debug)]
pub struct PoseLossGradients {
    pub loss: f64,
    pub d_flow: Vec<Vector2<f64>>,
    pub d_sensitivity: Vec<f64>,
    /// Identically zero: certainty is a constant in the pose-loss path.
    pub d_certainty: Vec<f64>,
}

/// Disentangled loss of the pose after one GN step from `pose`, with
/// correspondence weights `W = c * s`. Gradients flow into flow and
/// sensitivity only.
pub fn pose_loss_gradients(
    corrs: &Correspondences2D3D,
    certainty: &[f64],
    sensitivity: &[f64],
    camera: &Camera,
    pose: &Pose,
    gt: &Pose,
    points: &[Vector3<f64>],
    norm: PointNorm,
) -> Result<PoseLossGradients> {
    let n = corrs.len();
    if certainty.len() != n || sensitivity.len() != n {
        return Err(Error::ShapeMismatch("certainty/sensitivity length".into()));
    }
    let mut weighted = corrs.clone();
    for i in 0..n {
        weighted.weights[i] = certainty[i] * sensitivity[i];
    }
    let jac = gn_step_jacobians(&weighted, camera, pose)?;
    let out_pose = pose.retract(&jac.step);
    let loss = disentangled_pose_loss_with(&out_pose, gt, points, norm)?;
    // gradient at the output pose, pulled back to the step coordinates:
    // rotation through the left Jacobian, translation is additive
    let g_out = disentangled_loss_twist_gradient(&out_pose, gt, points, norm);
    let omega = jac.step.fixed_rows::<3>(0).into_owned();
    let jl: Matrix3<f64> = so3_left_jacobian(&omega);
    let mut g_step = Vector6::zeros();
    g_step.fixed_rows_mut::<3>(0).copy_from(&(jl.transpose() * g_out.fixed_rows::<3>(0)));
    g_step.fixed_rows_mut::<3>(3).copy_from(&g_out.fixed_rows::<3>(3));

    let d_flow = jac.d_flow.iter().map(|j| j.transpose() * g_step).collect();
    let d_sensitivity = (0..n).map(|i| g_step.dot(&jac.d_weight[i]) * certainty[i]).collect();
    Ok(PoseLossGradients { loss, d_flow, d_sensitivity, d_certainty: vec![0.0; n] })
}
