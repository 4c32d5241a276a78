//! Pose solvers: weighted reprojection PnP (damped and undamped
//! Gauss-Newton), the GN step's implicit derivatives, weighted Kabsch and
//! RANSAC-Kabsch.
//!
//! Pose increments are left twists `(omega, v)` applied by [`Pose::retract`].

use nalgebra::{Cholesky, Matrix2x6, Matrix3, Matrix6, Matrix6x2, Vector2, Vector3, Vector6, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{skew, Camera, Pose, Rotation};

/// Points closer than this to the camera plane are dropped from a residual
/// evaluation.
pub const MIN_DEPTH: f64 = 1e-9;

/// Object points matched to target pixels `pixel + flow`, weighted.
#[derive(Clone, Debug, PartialEq)]
pub struct Correspondences2D3D {
    pub points: Vec<Vector3<f64>>,
    pub pixels: Vec<Vector2<f64>>,
    pub flow: Vec<Vector2<f64>>,
    pub weights: Vec<f64>,
}

impl Correspondences2D3D {
    pub fn new(
        points: Vec<Vector3<f64>>,
        pixels: Vec<Vector2<f64>>,
        flow: Vec<Vector2<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let n = points.len();
        if pixels.len() != n || flow.len() != n || weights.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "correspondence lengths {n}/{}/{}/{}",
                pixels.len(),
                flow.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        Ok(Correspondences2D3D { points, pixels, flow, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn target(&self, i: usize) -> Vector2<f64> {
        self.pixels[i] + self.flow[i]
    }

    pub fn weighted_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }
}

/// Source points (render camera space) matched to observed points.
#[derive(Clone, Debug, PartialEq)]
pub struct Correspondences3D3D {
    pub src: Vec<Vector3<f64>>,
    pub dst: Vec<Vector3<f64>>,
    pub certainty: Vec<f64>,
}

impl Correspondences3D3D {
    pub fn new(src: Vec<Vector3<f64>>, dst: Vec<Vector3<f64>>, certainty: Vec<f64>) -> Result<Self> {
        if src.len() != dst.len() || src.len() != certainty.len() {
            return Err(Error::ShapeMismatch(format!(
                "3D-3D lengths {}/{}/{}",
                src.len(),
                dst.len(),
                certainty.len()
            )));
        }
        Ok(Correspondences3D3D { src, dst, certainty })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Outcome of an iterative solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub pose: Pose,
    /// Cost at the start followed by the cost after every step (rejected
    /// steps repeat the previous value).
    pub costs: Vec<f64>,
    pub accepted: Vec<bool>,
    /// Damping used by each step.
    pub damping: Vec<f64>,
    pub converged: bool,
    /// Largest number of weighted points dropped for lying behind the camera
    /// in any evaluation.
    pub dropped_points: usize,
}

/// Weighted residuals `W (pi(R X + t) - target)` with their 2x6 Jacobians
/// with respect to a left twist, for the evaluated correspondences.
#[derive(Clone, Debug)]
pub struct Residuals {
    pub indices: Vec<usize>,
    pub residuals: Vec<Vector2<f64>>,
    pub jacobians: Vec<Matrix2x6<f64>>,
    pub dropped: usize,
}

impl Residuals {
    pub fn cost(&self) -> f64 {
        0.5 * self.residuals.iter().map(|r| r.norm_squared()).sum::<f64>()
    }
}

fn projection_jacobian(camera: &Camera, xc: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / xc.z;
    nalgebra::Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * xc.x * iz * iz,
        0.0,
        camera.fy * iz,
        -camera.fy * xc.y * iz * iz,
    )
}

/// Unweighted error `pi(R X + t) - target` and its twist Jacobian, or `None`
/// when the point is not in front of the camera.
fn point_error(corrs: &Correspondences2D3D, i: usize, camera: &Camera, pose: &Pose) -> Option<(Vector2<f64>, Matrix2x6<f64>)> {
    let rx = pose.rotation * corrs.points[i];
    let xc = rx + pose.translation;
    if xc.z <= MIN_DEPTH {
        return None;
    }
    let proj = Vector2::new(camera.fx * xc.x / xc.z + camera.cx, camera.fy * xc.y / xc.z + camera.cy);
    let dp = projection_jacobian(camera, &xc);
    let mut dxc = nalgebra::Matrix3x6::zeros();
    dxc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rx)));
    dxc.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    Some((proj - corrs.target(i), dp * dxc))
}

/// Residuals and Jacobians of all positively weighted correspondences.
pub fn reprojection_residuals(corrs: &Correspondences2D3D, camera: &Camera, pose: &Pose) -> Residuals {
    let mut out = Residuals { indices: Vec::new(), residuals: Vec::new(), jacobians: Vec::new(), dropped: 0 };
    for i in 0..corrs.len() {
        let w = corrs.weights[i];
        if w == 0.0 {
            continue;
        }
        match point_error(corrs, i, camera, pose) {
            Some((e, j)) => {
                out.indices.push(i);
                out.residuals.push(e * w);
                out.jacobians.push(j * w);
            }
            None => out.dropped += 1,
        }
    }
    out
}

/// `1/2 sum |W (pi(R X + t) - (p + F))|^2` in px^2 over points in front of
/// the camera.
pub fn reprojection_cost(corrs: &Correspondences2D3D, camera: &Camera, pose: &Pose) -> f64 {
    reprojection_cost_counted(corrs, camera, pose).0
}

/// As [`reprojection_cost`], also returning how many weighted points were
/// excluded for lying behind the camera.
pub fn reprojection_cost_counted(corrs: &Correspondences2D3D, camera: &Camera, pose: &Pose) -> (f64, usize) {
    let mut cost = 0.0;
    let mut dropped = 0;
    for i in 0..corrs.len() {
        let w = corrs.weights[i];
        if w == 0.0 {
            continue;
        }
        let xc = pose.transform_point(&corrs.points[i]);
        if xc.z <= MIN_DEPTH {
            dropped += 1;
            continue;
        }
        let proj = Vector2::new(camera.fx * xc.x / xc.z + camera.cx, camera.fy * xc.y / xc.z + camera.cy);
        cost += (w * (proj - corrs.target(i))).norm_squared();
    }
    (0.5 * cost, dropped)
}

fn check_weighted(corrs: &Correspondences2D3D) -> Result<()> {
    let n = corrs.weighted_count();
    if n < 4 {
        return Err(Error::Degenerate(format!("{n} weighted correspondences, need at least 4")));
    }
    Ok(())
}

/// Cost, `J^T J` and `J^T r` of the weighted residuals in one pass.
struct Linearization {
    cost: f64,
    a: Matrix6<f64>,
    g: Vector6<f64>,
    used: usize,
    dropped: usize,
}

fn linearize(corrs: &Correspondences2D3D, camera: &Camera, pose: &Pose) -> Linearization {
    let mut upper = [0.0f64; 21];
    let mut g = [0.0f64; 6];
    let (mut cost, mut used, mut dropped) = (0.0, 0usize, 0usize);
    let r = pose.rotation.matrix();
    for i in 0..corrs.len() {
        let w = corrs.weights[i];
        if w == 0.0 {
            continue;
        }
        let rx = r * corrs.points[i];
        let xc = rx + pose.translation;
        if xc.z <= MIN_DEPTH {
            dropped += 1;
            continue;
        }
        let iz = 1.0 / xc.z;
        let target = corrs.target(i);
        let eu = w * (camera.fx * xc.x * iz + camera.cx - target.x);
        let ev = w * (camera.fy * xc.y * iz + camera.cy - target.y);
        // rows of d pi / d xc; a [r]x = (a x r)^T so the rotation block is r x a
        let au = Vector3::new(camera.fx * iz, 0.0, -camera.fx * xc.x * iz * iz) * w;
        let av = Vector3::new(0.0, camera.fy * iz, -camera.fy * xc.y * iz * iz) * w;
        let (cu, cv) = (rx.cross(&au), rx.cross(&av));
        let ju = [cu.x, cu.y, cu.z, au.x, au.y, au.z];
        let jv = [cv.x, cv.y, cv.z, av.x, av.y, av.z];
        let mut k = 0;
        for a in 0..6 {
            for b in a..6 {
                upper[k] += ju[a] * ju[b] + jv[a] * jv[b];
                k += 1;
            }
            g[a] += ju[a] * eu + jv[a] * ev;
        }
        cost += eu * eu + ev * ev;
        used += 1;
    }
    let mut a = Matrix6::zeros();
    let mut k = 0;
    for i in 0..6 {
        for j in i..6 {
            a[(i, j)] = upper[k];
            a[(j, i)] = upper[k];
            k += 1;
        }
    }
    Linearization { cost: 0.5 * cost, a, g: Vector6::from(g), used, dropped }
}

pub const LM_INITIAL_DAMPING: f64 = 1e-3;

/// Levenberg-Marquardt on the weighted reprojection cost. Each of the
/// `lm_iters` steps solves `(J^T J + lambda diag(J^T J)) d = -J^T r`;
/// lambda starts at 1e-3 and is divided by 10 on an accepted step and
/// multiplied by 10 on a rejected one.
pub fn lm_pnp(corrs: &Correspondences2D3D, camera: &Camera, init: &Pose, lm_iters: usize) -> Result<SolveReport> {
    check_weighted(corrs)?;
    let mut pose = *init;
    let mut lin = linearize(corrs, camera, &pose);
    let mut report = SolveReport {
        pose,
        costs: vec![lin.cost],
        accepted: Vec::new(),
        damping: Vec::new(),
        converged: false,
        dropped_points: lin.dropped,
    };
    let mut lambda = LM_INITIAL_DAMPING;
    for _ in 0..lm_iters {
        if lin.used < 4 {
            return Err(Error::Degenerate(format!("{} points in front of the camera", lin.used)));
        }
        if lin.g.norm() == 0.0 {
            report.converged = true;
            break;
        }
        let mut damped = lin.a;
        for k in 0..6 {
            damped[(k, k)] += lambda * lin.a[(k, k)];
        }
        let step = Cholesky::new(damped).ok_or(Error::Singular { damping: lambda })?.solve(&(-lin.g));
        let candidate = pose.retract(&step);
        let cand = linearize(corrs, camera, &candidate);
        report.damping.push(lambda);
        report.dropped_points = report.dropped_points.max(cand.dropped);
        if cand.cost.is_finite() && cand.cost < lin.cost {
            pose = candidate;
            lin = cand;
            lambda /= 10.0;
            report.accepted.push(true);
        } else {
            lambda *= 10.0;
            report.accepted.push(false);
        }
        report.costs.push(lin.cost);
        if step.norm() < 1e-12 {
            report.converged = true;
            break;
        }
    }
    report.pose = pose;
    Ok(report)
}

/// One undamped Gauss-Newton update.
#[derive(Clone, Debug, PartialEq)]
pub struct GnStep {
    pub pose: Pose,
    pub step: Vector6<f64>,
    /// Set when the normal equations were singular; `pose` is then the input.
    pub singular: bool,
}

pub fn gn_step(corrs: &Correspondences2D3D, camera: &Camera, pose: &Pose) -> Result<GnStep> {
    check_weighted(corrs)?;
    let lin = linearize(corrs, camera, pose);
    match Cholesky::new(lin.a) {
        Some(ch) => {
            let step = ch.solve(&(-lin.g));
            Ok(GnStep { pose: pose.retract(&step), step, singular: false })
        }
        None => Ok(GnStep { pose: *pose, step: Vector6::zeros(), singular: true }),
    }
}

/// Three damped steps from `init` followed by one undamped step.
pub fn solve_pose(corrs: &Correspondences2D3D, camera: &Camera, init: &Pose) -> Result<(SolveReport, GnStep)> {
    let lm = lm_pnp(corrs, camera, init, 3)?;
    let gn = gn_step(corrs, camera, &lm.pose)?;
    Ok((lm, gn))
}

/// Derivatives of the GN step's twist with respect to every correspondence's
/// flow and weight, holding the linearization pose fixed.
#[derive(Clone, Debug)]
pub struct GnJacobians {
    pub step: Vector6<f64>,
    /// `d step / d F_i`, 6x2, zero for unused correspondences.
    pub d_flow: Vec<Matrix6x2<f64>>,
    /// `d step / d W_i`.
    pub d_weight: Vec<Vector6<f64>>,
}

/// With `A = sum W^2 G^T G`, `b = sum W^2 G^T e` and `step = -A^-1 b`:
/// `d step / d F_i = A^-1 W_i^2 G_i^T` and
/// `d step / d W_i = -A^-1 (2 W_i G_i^T G_i step + 2 W_i G_i^T e_i)`.
pub fn gn_step_jacobians(corrs: &Correspondences2D3D, camera: &Camera, pose: &Pose) -> Result<GnJacobians> {
    check_weighted(corrs)?;
    let mut a = Matrix6::zeros();
    let mut b = Vector6::zeros();
    let mut terms = Vec::new();
    for i in 0..corrs.len() {
        let w = corrs.weights[i];
        if w == 0.0 {
            continue;
        }
        if let Some((e, g)) = point_error(corrs, i, camera, pose) {
            a += g.transpose() * g * (w * w);
            b += g.transpose() * e * (w * w);
            terms.push((i, w, e, g));
        }
    }
    let a_inv = Cholesky::new(a).ok_or(Error::Singular { damping: 0.0 })?.inverse();
    let step = -a_inv * b;
    let mut d_flow = vec![Matrix6x2::zeros(); corrs.len()];
    let mut d_weight = vec![Vector6::zeros(); corrs.len()];
    for (i, w, e, g) in terms {
        let gt = g.transpose();
        d_flow[i] = a_inv * gt * (w * w);
        d_weight[i] = -a_inv * (gt * (g * step) * (2.0 * w) + gt * e * (2.0 * w));
    }
    Ok(GnJacobians { step, d_flow, d_weight })
}

/// Weighted least-squares rigid transform taking `src` onto `dst`.
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>], weights: &[f64]) -> Result<Pose> {
    if src.len() != dst.len() || src.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!("kabsch lengths {}/{}/{}", src.len(), dst.len(), weights.len())));
    }
    let wsum: f64 = weights.iter().filter(|w| **w > 0.0).sum();
    let n = weights.iter().filter(|w| **w > 0.0).count();
    if n < 3 || wsum <= 0.0 {
        return Err(Error::Degenerate(format!("{n} weighted points, need at least 3")));
    }
    let mut cs = Vector3::zeros();
    let mut cd = Vector3::zeros();
    for ((s, d), &w) in src.iter().zip(dst).zip(weights) {
        if w > 0.0 {
            cs += s * w;
            cd += d * w;
        }
    }
    cs /= wsum;
    cd /= wsum;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for ((s, d), &w) in src.iter().zip(dst).zip(weights) {
        if w > 0.0 {
            let (a, b) = (s - cs, d - cd);
            h += a * b.transpose() * w;
            spread += a * a.transpose() * w;
        }
    }
    let sv = spread.symmetric_eigenvalues();
    let (lo, hi) = (sv.min(), sv.max());
    let mid = sv.sum() - lo - hi;
    if hi <= 0.0 || mid <= 1e-12 * hi {
        return Err(Error::Degenerate("source points are collinear".into()));
    }
    let svd = SVD::new(h, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let mut d = Matrix3::identity();
    d[(2, 2)] = (v * u.transpose()).determinant().signum();
    let r = Rotation::from_matrix_projected(v * d * u.transpose());
    let t = cd - r * cs;
    Ok(Pose::new(r, t))
}

/// Consensus rigid fit from minimal 3-point samples, refit on the inliers of
/// the best sample (weighted by certainty). Returns the pose and the inlier
/// mask of the refit model.
pub fn ransac_kabsch(
    corrs: &Correspondences3D3D,
    inlier_thresh: f64,
    max_iters: usize,
    seed: u64,
) -> Result<(Pose, Vec<bool>)> {
    let n = corrs.len();
    if n < 3 {
        return Err(Error::NoConsensus { inliers: n });
    }
    let inliers_of = |pose: &Pose| -> Vec<bool> {
        corrs.src.iter().zip(&corrs.dst).map(|(s, d)| (pose.transform_point(s) - d).norm() < inlier_thresh).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ones = [1.0; 3];
    let mut best: Option<(usize, Vec<bool>)> = None;
    for _ in 0..max_iters {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.random_range(0..n - 2);
        for m in [i.min(j), i.max(j)] {
            if k >= m {
                k += 1;
            }
        }
        let s = [corrs.src[i], corrs.src[j], corrs.src[k]];
        let d = [corrs.dst[i], corrs.dst[j], corrs.dst[k]];
        let Ok(model) = kabsch(&s, &d, &ones) else { continue };
        let mask = inliers_of(&model);
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, mask));
            if count == n {
                break;
            }
        }
    }
    let (count, mask) = match best {
        Some((c, m)) if c >= 3 => (c, m),
        other => return Err(Error::NoConsensus { inliers: other.map_or(0, |b| b.0) }),
    };
    let weights: Vec<f64> = mask.iter().zip(&corrs.certainty).map(|(&m, &c)| if m { c } else { 0.0 }).collect();
    let pose = kabsch(&corrs.src, &corrs.dst, &weights).map_err(|_| Error::NoConsensus { inliers: count })?;
    let refit_mask = inliers_of(&pose);
    Ok((pose, refit_mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::EulerAngles;
    use approx::assert_relative_eq;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand_distr::{Distribution, Normal};

    fn camera() -> Camera {
        Camera::new(500.0, 520.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let e = EulerAngles::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.2..1.2),
            rng.random_range(-3.0..3.0),
        );
        Pose::new(
            Rotation::from_euler(e),
            Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(0.5..0.8)),
        )
    }

    /// Noise-free correspondences: pixels are the projections under `gt`,
    /// flow zero, unit weights.
    fn synthetic(rng: &mut ChaCha8Rng, gt: &Pose, n: usize) -> Correspondences2D3D {
        let cam = camera();
        let points: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)))
            .collect();
        let pixels = points.iter().map(|x| cam.project(&gt.transform_point(x)).unwrap()).collect();
        Correspondences2D3D::new(points, pixels, vec![Vector2::zeros(); n], vec![1.0; n]).unwrap()
    }

    fn perturb(p: &Pose, rot_deg: f64, trans_m: f64, rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let mut tw = Vector6::zeros();
        tw.fixed_rows_mut::<3>(0).copy_from(&(axis * rot_deg.to_radians()));
        tw.fixed_rows_mut::<3>(3).copy_from(&(dir * trans_m));
        p.retract(&tw)
    }

    #[test]
    fn cost_examples() {
        let cam = Camera::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let corrs = Correspondences2D3D::new(
            vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.1, 0.0, 1.0), Vector3::new(0.0, 0.2, 2.0)],
            vec![Vector2::new(50.0, 50.0), Vector2::new(60.0, 50.0), Vector2::new(48.0, 62.0)],
            vec![Vector2::new(1.0, 0.0), Vector2::new(0.0, 2.0), Vector2::new(-1.0, 2.0)],
            vec![1.0, 0.5, 2.0],
        )
        .unwrap();
        // projections (50,50), (60,50), (50,60); errors (-1,0), (0,-2)*0.5, (3,-4)*2
        assert!((reprojection_cost(&corrs, &cam, &Pose::identity()) - 51.0).abs() < 1e-9);
        let mut doubled = corrs.clone();
        doubled.weights.iter_mut().for_each(|w| *w *= 2.0);
        assert!((reprojection_cost(&doubled, &cam, &Pose::identity()) - 204.0).abs() < 1e-9);

        let behind = Pose::from_translation(Vector3::new(0.0, 0.0, -1.5));
        let (_, dropped) = reprojection_cost_counted(&corrs, &cam, &behind);
        assert_eq!(dropped, 2);
    }

    #[test]
    fn cost_zero_at_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_pose(&mut rng);
        let c = synthetic(&mut rng, &gt, 50);
        assert!(reprojection_cost(&c, &camera(), &gt) < 1e-12);
    }

    #[test]
    fn lm_fixed_point_and_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let gt = random_pose(&mut rng);
            let c = synthetic(&mut rng, &gt, 100);
            let rep = lm_pnp(&c, &camera(), &gt, 3).unwrap();
            let (r, t) = rep.pose.error_to(&gt);
            assert!(r < 1e-10 && t < 1e-10);

            let init = perturb(&gt, 10.0, 0.05, &mut rng);
            let rep = lm_pnp(&c, &camera(), &init, 3).unwrap();
            let gn = gn_step(&c, &camera(), &rep.pose).unwrap();
            let (r, t) = gn.pose.error_to(&gt);
            assert!(r < 1e-3 && t < 1e-4, "{r} {t}");
            for pair in rep.costs.windows(2) {
                assert!(pair[1] <= pair[0]);
            }
        }
    }

    #[test]
    fn zero_weight_outliers_do_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_pose(&mut rng);
        let clean = synthetic(&mut rng, &gt, 70);
        let mut dirty = clean.clone();
        for _ in 0..30 {
            dirty.points.push(Vector3::new(rng.random_range(-0.05..0.05), 0.0, 0.01));
            dirty.pixels.push(Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)));
            dirty.flow.push(Vector2::new(rng.random_range(-30.0..30.0), 7.0));
            dirty.weights.push(0.0);
        }
        let init = perturb(&gt, 10.0, 0.05, &mut rng);
        let a = lm_pnp(&clean, &camera(), &init, 3).unwrap();
        let b = lm_pnp(&dirty, &camera(), &init, 3).unwrap();
        assert_eq!(a.pose, b.pose);
        assert_eq!(gn_step(&clean, &camera(), &a.pose).unwrap(), gn_step(&dirty, &camera(), &b.pose).unwrap());
    }

    #[test]
    fn degenerate_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_pose(&mut rng);
        let mut c = synthetic(&mut rng, &gt, 10);
        for w in c.weights.iter_mut().skip(3) {
            *w = 0.0;
        }
        assert!(matches!(lm_pnp(&c, &camera(), &gt, 3), Err(Error::Degenerate(_))));
        assert!(gn_step(&c, &camera(), &gt).is_err());

        // all points on the optical axis of one pixel: rank-deficient normal equations
        let same = Correspondences2D3D::new(
            vec![Vector3::new(0.0, 0.0, 0.0); 5],
            vec![Vector2::new(300.0, 200.0); 5],
            vec![Vector2::zeros(); 5],
            vec![1.0; 5],
        )
        .unwrap();
        let init = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        assert!(matches!(lm_pnp(&same, &camera(), &init, 3), Err(Error::Singular { .. })));
        assert!(gn_step(&same, &camera(), &init).unwrap().singular);
        assert!(Correspondences2D3D::new(vec![], vec![Vector2::zeros()], vec![], vec![]).is_err());
    }

    #[test]
    fn gn_step_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut reduced = 0;
        for _ in 0..50 {
            let gt = random_pose(&mut rng);
            let c = synthetic(&mut rng, &gt, 100);
            assert!(gn_step(&c, &camera(), &gt).unwrap().step.norm() < 1e-10);
            let start = perturb(&gt, 0.5, 0.002, &mut rng);
            let before = reprojection_cost(&c, &camera(), &start);
            let after = reprojection_cost(&c, &camera(), &gn_step(&c, &camera(), &start).unwrap().pose);
            if after <= 0.1 * before {
                reduced += 1;
            }
        }
        assert_eq!(reduced, 50);
    }

    /// Noisy weighted instance so that both Jacobian terms are exercised.
    fn noisy_instance(seed: u64) -> (Correspondences2D3D, Pose) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_pose(&mut rng);
        let mut c = synthetic(&mut rng, &gt, 30);
        let normal = Normal::new(0.0, 1.5).unwrap();
        for (f, w) in c.flow.iter_mut().zip(c.weights.iter_mut()) {
            *f = Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
            *w = rng.random_range(0.2..1.0);
        }
        (c, perturb(&gt, 2.0, 0.005, &mut rng))
    }

    #[test]
    fn gn_jacobians_match_finite_differences() {
        let eps = 1e-5;
        for seed in 0..10 {
            let (c, pose) = noisy_instance(100 + seed);
            let cam = camera();
            let jac = gn_step_jacobians(&c, &cam, &pose).unwrap();
            assert_relative_eq!(jac.step, gn_step(&c, &cam, &pose).unwrap().step, epsilon = 1e-12, max_relative = 1e-9);
            let step_with = |c: &Correspondences2D3D| gn_step(c, &cam, &pose).unwrap().step;
            for i in [0, 7, 19] {
                for axis in 0..2 {
                    let (mut p, mut m) = (c.clone(), c.clone());
                    p.flow[i][axis] += eps;
                    m.flow[i][axis] -= eps;
                    let fd = (step_with(&p) - step_with(&m)) / (2.0 * eps);
                    let an = jac.d_flow[i].column(axis).into_owned();
                    assert!((fd - an).norm() <= 1e-4 * an.norm().max(1e-12), "flow {i}/{axis}: {fd} vs {an}");
                }
                let (mut p, mut m) = (c.clone(), c.clone());
                p.weights[i] += eps;
                m.weights[i] -= eps;
                let fd = (step_with(&p) - step_with(&m)) / (2.0 * eps);
                let an = jac.d_weight[i];
                assert!((fd - an).norm() <= 1e-4 * an.norm().max(1e-12), "weight {i}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn reprojection_jacobian_matches_finite_differences() {
        let eps = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cam = camera();
        let mut states = 0;
        while states < 100 {
            let (c, pose) = noisy_instance(rng.random());
            let res = reprojection_residuals(&c, &cam, &pose);
            let k = rng.random_range(0..res.indices.len());
            for d in 0..6 {
                let mut tw = Vector6::zeros();
                tw[d] = eps;
                let plus = reprojection_residuals(&c, &cam, &pose.retract(&tw));
                tw[d] = -eps;
                let minus = reprojection_residuals(&c, &cam, &pose.retract(&tw));
                let fd = (plus.residuals[k] - minus.residuals[k]) / (2.0 * eps);
                let an = res.jacobians[k].column(d).into_owned();
                assert!((fd - an).norm() <= 1e-6 * an.norm().max(1.0), "{fd} vs {an}");
            }
            states += 1;
        }
    }

    #[test]
    fn solver_is_intrinsics_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let gt = random_pose(&mut rng);
            let c = synthetic(&mut rng, &gt, 60);
            let (c, init) = {
                let (mut c, _) = (c, ());
                let normal = Normal::new(0.0, 1.0).unwrap();
                c.flow.iter_mut().for_each(|f| *f = Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng)));
                (c, perturb(&gt, 5.0, 0.02, &mut rng))
            };
            let cam = camera();
            let s = 0.5;
            let scaled_cam = Camera::new(cam.fx * s, cam.fy * s, cam.cx * s, cam.cy * s, 320, 240).unwrap();
            let mut sc = c.clone();
            sc.pixels.iter_mut().for_each(|p| *p *= s);
            sc.flow.iter_mut().for_each(|f| *f *= s);
            let (_, a) = solve_pose(&c, &cam, &init).unwrap();
            let (_, b) = solve_pose(&sc, &scaled_cam, &init).unwrap();
            let (r, t) = a.pose.error_to(&b.pose);
            assert!(r < 1e-8 && t < 1e-8, "{r} {t}");
        }
    }

    #[test]
    fn report_serializes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = random_pose(&mut rng);
        let c = synthetic(&mut rng, &gt, 20);
        let rep = lm_pnp(&c, &camera(), &perturb(&gt, 3.0, 0.01, &mut rng), 3).unwrap();
        let back: SolveReport = serde_json::from_str(&serde_json::to_string(&rep).unwrap()).unwrap();
        assert_eq!(back.costs, rep.costs);
        assert_eq!(back.accepted, rep.accepted);
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n).map(|_| Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(0.4..0.6))).collect()
    }

    #[test]
    fn kabsch_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let src = random_cloud(&mut rng, 20);
        let w = vec![1.0; 20];
        let id = kabsch(&src, &src, &w).unwrap();
        let (r, t) = id.error_to(&Pose::identity());
        assert!(r < 1e-12 && t < 1e-12);

        let gt = random_pose(&mut rng);
        let dst: Vec<_> = src.iter().map(|p| gt.transform_point(p)).collect();
        let est = kabsch(&src, &dst, &w).unwrap();
        let (r, t) = est.error_to(&gt);
        assert!(r < 1e-10 && t < 1e-10);

        let mirrored: Vec<_> = src.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let est = kabsch(&src, &mirrored, &w).unwrap();
        assert!((est.rotation.matrix().determinant() - 1.0).abs() < 1e-12);

        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 1.0)).collect();
        assert!(matches!(kabsch(&line, &line, &[1.0; 5]), Err(Error::Degenerate(_))));
        assert!(kabsch(&src[..2], &src[..2], &[1.0; 2]).is_err());
    }

    #[test]
    fn kabsch_residual_is_minimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let src = random_cloud(&mut rng, 30);
        let gt = random_pose(&mut rng);
        let normal = Normal::new(0.0, 0.003).unwrap();
        let dst: Vec<_> = src
            .iter()
            .map(|p| gt.transform_point(p) + Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
            .collect();
        let w: Vec<f64> = (0..30).map(|_| rng.random_range(0.1..1.0)).collect();
        let est = kabsch(&src, &dst, &w).unwrap();
        let rss = |p: &Pose| src.iter().zip(&dst).zip(&w).map(|((s, d), w)| w * (p.transform_point(s) - d).norm_squared()).sum::<f64>();
        let best = rss(&est);
        for _ in 0..200 {
            let other = perturb(&est, 0.2, 0.001, &mut rng);
            assert!(rss(&other) >= best);
        }
    }

    fn planted(seed: u64, n: usize, outlier_frac: f64, noise: f64) -> (Correspondences3D3D, Pose) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = random_cloud(&mut rng, n);
        let gt = perturb(&Pose::identity(), 20.0, 0.05, &mut rng);
        let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let dst = src
            .iter()
            .map(|p| {
                if rng.random::<f64>() < outlier_frac {
                    Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(0.3..0.7))
                } else if noise > 0.0 {
                    gt.transform_point(p) + Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng))
                } else {
                    gt.transform_point(p)
                }
            })
            .collect();
        (Correspondences3D3D::new(src, dst, vec![1.0; n]).unwrap(), gt)
    }

    #[test]
    fn ransac_noise_free_and_infinite_threshold() {
        let (c, gt) = planted(11, 100, 0.0, 0.0);
        let (pose, mask) = ransac_kabsch(&c, 1e-3, 50, 1).unwrap();
        assert!(mask.iter().all(|&m| m));
        let (r, t) = pose.error_to(&gt);
        assert!(r < 1e-10 && t < 1e-10);

        let (c, _) = planted(12, 100, 0.3, 0.002);
        let (pose, mask) = ransac_kabsch(&c, f64::INFINITY, 50, 1).unwrap();
        assert!(mask.iter().all(|&m| m));
        assert_eq!(pose, kabsch(&c.src, &c.dst, &c.certainty).unwrap());
    }

    #[test]
    fn ransac_with_gross_outliers() {
        let trials = 200;
        let mut ok = 0;
        for seed in 0..trials {
            let (c, gt) = planted(1000 + seed, 1000, 0.4, 0.001);
            let (pose, _) = ransac_kabsch(&c, 0.005, 200, seed).unwrap();
            let (r, t) = pose.error_to(&gt);
            if r.to_degrees() < 0.5 && t < 0.002 {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.99 * trials as f64, "{ok}/{trials}");
    }

    #[test]
    fn ransac_deterministic_and_no_consensus() {
        let (c, _) = planted(13, 200, 0.4, 0.001);
        assert_eq!(ransac_kabsch(&c, 0.005, 30, 9).unwrap(), ransac_kabsch(&c, 0.005, 30, 9).unwrap());
        let line = Correspondences3D3D::new(
            (0..6).map(|i| Vector3::new(i as f64, 0.0, 1.0)).collect(),
            (0..6).map(|i| Vector3::new(i as f64, 0.0, 1.0)).collect(),
            vec![1.0; 6],
        )
        .unwrap();
        assert!(matches!(ransac_kabsch(&line, 0.01, 20, 0), Err(Error::NoConsensus { .. })));
        let two = Correspondences3D3D::new(vec![Vector3::zeros(); 2], vec![Vector3::zeros(); 2], vec![1.0; 2]).unwrap();
        assert!(ransac_kabsch(&two, 0.01, 20, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lm_accepted_costs_never_increase(seed in any::<u64>(), deg in 0.0f64..20.0, cm in 0.0f64..8.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_pose(&mut rng);
            let mut c = synthetic(&mut rng, &gt, 40);
            c.flow.iter_mut().for_each(|f| *f = Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)));
            let init = perturb(&gt, deg, cm / 100.0, &mut rng);
            let rep = lm_pnp(&c, &camera(), &init, 5).unwrap();
            for pair in rep.costs.windows(2) {
                prop_assert!(pair[1] <= pair[0]);
            }
            prop_assert!(rep.costs.iter().all(|c| c.is_finite()));
        }

        #[test]
        fn removing_zero_weights_is_bit_identical(seed in any::<u64>(), n_zero in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_pose(&mut rng);
            let clean = synthetic(&mut rng, &gt, 25);
            let mut dirty = clean.clone();
            for _ in 0..n_zero {
                let at = rng.random_range(0..=dirty.len());
                dirty.points.insert(at, Vector3::new(1.0, -2.0, -5.0));
                dirty.pixels.insert(at, Vector2::new(1e4, -3.0));
                dirty.flow.insert(at, Vector2::new(5.0, 5.0));
                dirty.weights.insert(at, 0.0);
            }
            let init = perturb(&gt, 8.0, 0.03, &mut rng);
            let (la, ga) = solve_pose(&clean, &camera(), &init).unwrap();
            let (lb, gb) = solve_pose(&dirty, &camera(), &init).unwrap();
            prop_assert_eq!(la.pose, lb.pose);
            prop_assert_eq!(ga.pose, gb.pose);
            let src: Vec<_> = clean.points.clone();
            let dst: Vec<_> = src.iter().map(|p| gt.transform_point(p)).collect();
            let mut w = vec![1.0; src.len()];
            let (mut s2, mut d2) = (src.clone(), dst.clone());
            s2.push(Vector3::new(9.0, 9.0, 9.0));
            d2.push(Vector3::new(-9.0, 0.0, 0.0));
            let a = kabsch(&src, &dst, &w).unwrap();
            w.push(0.0);
            prop_assert_eq!(a, kabsch(&s2, &d2, &w).unwrap());
        }
    }
}
