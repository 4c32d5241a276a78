//! Software z-buffer rasterizer, crop intrinsics and bbox-based translation
//! initialization.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Camera, Pose, Rotation};
use crate::image::Grid;
use crate::mesh::Mesh;

/// Triangles are clipped against this camera-space depth.
pub const NEAR_PLANE: f64 = 1e-6;

/// Refinement render resolution.
pub const REFINE_RESOLUTION: usize = 256;
/// Coarse scoring render resolution.
pub const COARSE_RESOLUTION: usize = 224;

/// Depth (meters, 0 = background), mask and flat-shaded intensity of a mesh
/// rendered at `pose` through `camera`.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub depth: Grid<f64>,
    pub mask: Grid<bool>,
    pub intensity: Grid<f32>,
    pub camera: Camera,
    pub pose: Pose,
}

impl RenderOutput {
    pub fn empty(camera: Camera, pose: Pose) -> Self {
        RenderOutput {
            depth: Grid::new(camera.width, camera.height, 0.0),
            mask: Grid::new(camera.width, camera.height, false),
            intensity: Grid::new(camera.width, camera.height, 0.0),
            camera,
            pose,
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.as_slice().iter().filter(|&&m| m).count()
    }

    /// Tight pixel-edge bounding box of the mask.
    pub fn mask_bbox(&self) -> Option<BBox> {
        mask_bbox(&self.mask)
    }
}

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|c| c.is_finite());
        if !finite || !(self.x_min < self.x_max) || !(self.y_min < self.y_max) {
            return Err(Error::DegenerateBBox(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Square box with the same center, side `max(w, h) * scale`.
    pub fn square(&self, scale: f64) -> BBox {
        let c = self.center();
        let half = 0.5 * self.width().max(self.height()) * scale;
        BBox { x_min: c.x - half, y_min: c.y - half, x_max: c.x + half, y_max: c.y + half }
    }

    /// Bounding box of projected points.
    pub fn from_points(points: impl IntoIterator<Item = Vector2<f64>>) -> Option<BBox> {
        let mut b = BBox {
            x_min: f64::INFINITY,
            y_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for p in points {
            b.x_min = b.x_min.min(p.x);
            b.y_min = b.y_min.min(p.y);
            b.x_max = b.x_max.max(p.x);
            b.y_max = b.y_max.max(p.y);
        }
        b.validate().ok().map(|_| b)
    }
}

/// Tight pixel-edge bounding box of the set pixels.
pub fn mask_bbox(mask: &Grid<bool>) -> Option<BBox> {
    let mut lo = (usize::MAX, usize::MAX);
    let mut hi = (0usize, 0usize);
    let mut any = false;
    for (u, v, &m) in mask.iter_coords() {
        if m {
            any = true;
            lo = (lo.0.min(u), lo.1.min(v));
            hi = (hi.0.max(u), hi.1.max(v));
        }
    }
    any.then(|| BBox {
        x_min: lo.0 as f64 - 0.5,
        y_min: lo.1 as f64 - 0.5,
        x_max: hi.0 as f64 + 0.5,
        y_max: hi.1 as f64 + 0.5,
    })
}

/// Renders `mesh` at `pose`.
///
/// Depth is camera-space z of the nearest surface along each pixel-center
/// ray. No back-face culling; ties go to the lower triangle index.
pub fn rasterize(mesh: &Mesh, pose: &Pose, camera: &Camera) -> RenderOutput {
    let mut out = RenderOutput::empty(*camera, *pose);
    let cam_verts: Vec<Vector3<f64>> = mesh.vertices.iter().map(|v| pose.transform_point(v)).collect();
    let (w, h) = (camera.width, camera.height);
    let mut zbuf = vec![f64::INFINITY; w * h];

    for tri in &mesh.triangles {
        let corners = [cam_verts[tri[0]], cam_verts[tri[1]], cam_verts[tri[2]]];
        let normal = (corners[1] - corners[0]).cross(&(corners[2] - corners[0]));
        let nn = normal.norm();
        if !(nn > 0.0) {
            continue;
        }
        let normal = normal / nn;
        let poly = clip_near(&corners);
        if poly.len() < 3 {
            continue;
        }
        let screen: Vec<(Vector2<f64>, f64)> = poly
            .iter()
            .map(|p| (Vector2::new(camera.fx * p.x / p.z + camera.cx, camera.fy * p.y / p.z + camera.cy), p.z))
            .collect();
        for k in 1..screen.len() - 1 {
            raster_triangle(
                [screen[0], screen[k], screen[k + 1]],
                &normal,
                camera,
                &mut zbuf,
                &mut out,
            );
        }
    }
    out
}

/// Sutherland-Hodgman clip of a triangle against `z >= NEAR_PLANE`.
fn clip_near(tri: &[Vector3<f64>; 3]) -> Vec<Vector3<f64>> {
    if tri.iter().all(|p| p.z >= NEAR_PLANE) {
        return tri.to_vec();
    }
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let a_in = a.z >= NEAR_PLANE;
        let b_in = b.z >= NEAR_PLANE;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let s = (NEAR_PLANE - a.z) / (b.z - a.z);
            let mut p = a + (b - a) * s;
            p.z = NEAR_PLANE;
            out.push(p);
        }
    }
    out
}

fn raster_triangle(
    tri: [(Vector2<f64>, f64); 3],
    normal: &Vector3<f64>,
    camera: &Camera,
    zbuf: &mut [f64],
    out: &mut RenderOutput,
) {
    let [(p0, z0), (p1, z1), (p2, z2)] = tri;
    let area = (p1 - p0).perp(&(p2 - p0));
    if !(area.abs() > 1e-12) || !area.is_finite() {
        return;
    }
    let (w, h) = (camera.width as isize, camera.height as isize);
    let u_lo = p0.x.min(p1.x).min(p2.x).ceil().max(0.0);
    let u_hi = p0.x.max(p1.x).max(p2.x).floor().min((w - 1) as f64);
    let v_lo = p0.y.min(p1.y).min(p2.y).ceil().max(0.0);
    let v_hi = p0.y.max(p1.y).max(p2.y).floor().min((h - 1) as f64);
    if u_lo > u_hi || v_lo > v_hi {
        return;
    }
    let inv_area = 1.0 / area;
    let (inv_z0, inv_z1, inv_z2) = (1.0 / z0, 1.0 / z1, 1.0 / z2);
    for v in v_lo as usize..=v_hi as usize {
        let py = v as f64;
        for u in u_lo as usize..=u_hi as usize {
            let p = Vector2::new(u as f64, py);
            let b0 = (p1 - p).perp(&(p2 - p)) * inv_area;
            let b1 = (p2 - p).perp(&(p0 - p)) * inv_area;
            let b2 = 1.0 - b0 - b1;
            if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                continue;
            }
            // 1/z is affine in screen space for a planar triangle
            let z = 1.0 / (b0 * inv_z0 + b1 * inv_z1 + b2 * inv_z2);
            let idx = v * camera.width + u;
            if z < zbuf[idx] {
                zbuf[idx] = z;
                out.depth.as_mut_slice()[idx] = z;
                out.mask.as_mut_slice()[idx] = true;
                let ray = Vector3::new((p.x - camera.cx) / camera.fx, (p.y - camera.cy) / camera.fy, 1.0);
                out.intensity.as_mut_slice()[idx] = (normal.dot(&ray) / ray.norm()).abs() as f32;
            }
        }
    }
}

/// Counts rasterize calls; shared by coarse estimation and refinement to
/// audit rendering budgets.
#[derive(Debug)]
pub struct Renderer<'m> {
    mesh: &'m Mesh,
    calls: AtomicUsize,
}

impl<'m> Renderer<'m> {
    pub fn new(mesh: &'m Mesh) -> Self {
        Renderer { mesh, calls: AtomicUsize::new(0) }
    }

    pub fn mesh(&self) -> &'m Mesh {
        self.mesh
    }

    pub fn render(&self, pose: &Pose, camera: &Camera) -> RenderOutput {
        self.calls.fetch_add(1, Ordering::Relaxed);
        rasterize(self.mesh, pose, camera)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Intrinsics of the crop `bbox` resized to `out_size x out_size`.
///
/// The crop's pixel `(0, 0)` sits at the bbox corner `(x_min, y_min)`. The
/// principal point of the result may fall outside the crop.
pub fn adjust_intrinsics(camera: &Camera, bbox: &BBox, out_size: usize) -> Result<Camera> {
    bbox.validate()?;
    if out_size == 0 {
        return Err(Error::InvalidArgument("crop size must be positive".into()));
    }
    let sx = out_size as f64 / bbox.width();
    let sy = out_size as f64 / bbox.height();
    Camera::crop_camera(
        camera.fx * sx,
        camera.fy * sy,
        (camera.cx - bbox.x_min) * sx,
        (camera.cy - bbox.y_min) * sy,
        out_size,
        out_size,
    )
}

/// Rough translation placing the rotated model inside `bbox`.
///
/// The model's bounding-box center is put on the ray through the bbox
/// center. Depth starts from the bounding radius matching the bbox
/// half-extent and is then rescaled until the projected vertex extent
/// matches the bbox.
pub fn translation_from_bbox(mesh: &Mesh, bbox: &BBox, camera: &Camera, rotation: &Rotation) -> Vector3<f64> {
    let stride = (mesh.vertices.len() / 2048).max(1);
    let rotated: Vec<Vector3<f64>> = mesh.vertices.iter().step_by(stride).map(|v| rotation * v).collect();
    let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
    for r in &rotated {
        lo = lo.inf(r);
        hi = hi.sup(r);
    }
    let center = (lo + hi) / 2.0;
    let radius = rotated.iter().map(|r| (r - center).norm()).fold(0.0, f64::max).max(1e-9);

    let c = bbox.center();
    let ray = Vector3::new((c.x - camera.cx) / camera.fx, (c.y - camera.cy) / camera.fy, 1.0);
    let half_extent = 0.5 * (bbox.width() / camera.fx).max(bbox.height() / camera.fy);
    let mut z = radius / half_extent.max(1e-12) + radius;
    let place = |z: f64| ray * z - center;

    for _ in 0..4 {
        let t = place(z);
        let projected = rotated.iter().filter_map(|r| {
            let p = r + t;
            (p.z > NEAR_PLANE).then(|| Vector2::new(camera.fx * p.x / p.z, camera.fy * p.y / p.z))
        });
        let Some(pb) = BBox::from_points(projected) else { break };
        let ratio = (pb.width() / bbox.width()).max(pb.height() / bbox.height());
        if !ratio.is_finite() || ratio <= 0.0 {
            break;
        }
        z *= ratio;
    }
    place(z)
}
