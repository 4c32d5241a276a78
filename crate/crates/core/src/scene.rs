//! Observations and seeded synthetic scenes: a mesh at a random pose,
//! optionally half-hidden behind a fronto-parallel occluder, with a noisy
//! sensor depth map. Also the raw depth and PGM mask file formats.

use std::io::{BufRead, Read, Write};

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Camera, Pose, Rotation};
use crate::image::Grid;
use crate::mesh::Mesh;
use crate::render::{mask_bbox, rasterize, BBox, RenderOutput};

/// What the estimator gets to see.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub camera: Camera,
    pub intensity: Grid<f32>,
    /// Visible object silhouette.
    pub mask: Grid<bool>,
    /// Sensor depth in meters, 0 where missing.
    pub depth: Option<Grid<f64>>,
}

impl Observation {
    pub fn from_render(r: &RenderOutput) -> Self {
        Observation { camera: r.camera, intensity: r.intensity.clone(), mask: r.mask.clone(), depth: Some(r.depth.clone()) }
    }

    /// Nearest-neighbor resampling into another camera sharing the optical
    /// center (a crop or rescale). Pixels falling outside read as empty.
    pub fn resample(&self, target: &Camera) -> Observation {
        let src = &self.camera;
        let lookup: Vec<Option<usize>> = (0..target.height)
            .flat_map(|v| (0..target.width).map(move |u| (u, v)))
            .map(|(u, v)| {
                let x = (u as f64 - target.cx) / target.fx;
                let y = (v as f64 - target.cy) / target.fy;
                let su = (src.fx * x + src.cx).round();
                let sv = (src.fy * y + src.cy).round();
                (su >= 0.0 && sv >= 0.0 && su < src.width as f64 && sv < src.height as f64)
                    .then(|| sv as usize * src.width + su as usize)
            })
            .collect();
        let pick = |i: usize| lookup[i];
        let (w, h) = (target.width, target.height);
        Observation {
            camera: *target,
            intensity: Grid::from_vec(w, h, (0..w * h).map(|i| pick(i).map_or(0.0, |s| self.intensity.as_slice()[s])).collect())
                .unwrap(),
            mask: Grid::from_vec(w, h, (0..w * h).map(|i| pick(i).is_some_and(|s| self.mask.as_slice()[s])).collect()).unwrap(),
            depth: self.depth.as_ref().map(|d| {
                Grid::from_vec(w, h, (0..w * h).map(|i| pick(i).map_or(0.0, |s| d.as_slice()[s])).collect()).unwrap()
            }),
        }
    }
}

/// Parameters of a synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub camera: Camera,
    /// Range of object distances along the optical axis, meters.
    pub distance: (f64, f64),
    /// Fraction of the object silhouette hidden by the occluder.
    pub occlusion: f64,
    /// Gaussian sensor depth noise, meters.
    pub depth_noise: f64,
    /// Fraction of object depth pixels dropped from the sensor depth.
    pub depth_missing: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            camera: default_camera(),
            distance: (0.4, 0.8),
            occlusion: 0.0,
            depth_noise: 0.0,
            depth_missing: 0.0,
        }
    }
}

/// 640x480 with a 600 px focal length.
pub fn default_camera() -> Camera {
    Camera::new(600.0, 600.0, 319.5, 239.5, 640, 480).unwrap()
}

/// A generated scene with its ground truth.
#[derive(Clone, Debug)]
pub struct Scene {
    pub camera: Camera,
    pub gt_pose: Pose,
    pub observation: Observation,
    /// Noise-free depth of everything in view (object and occluder).
    pub clean_depth: Grid<f64>,
    /// Object silhouette without the occluder.
    pub full_mask: Grid<bool>,
    /// Object pixels hidden by the occluder.
    pub occluded: Grid<bool>,
    /// Detection box: bounds of the visible silhouette.
    pub bbox: BBox,
}

/// Uniformly distributed rotation.
pub fn random_rotation(rng: &mut impl Rng) -> Rotation {
    let q = Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    Rotation::from_matrix_projected(UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner())
}

/// Random pose with the object center projecting into the central half of
/// the image at a depth drawn from `distance`.
pub fn random_pose(camera: &Camera, distance: (f64, f64), rng: &mut impl Rng) -> Pose {
    let r = random_rotation(rng);
    let z = rng.random_range(distance.0..=distance.1);
    let w = camera.width as f64;
    let h = camera.height as f64;
    let px = Vector2::new(rng.random_range(0.25 * w..0.75 * w), rng.random_range(0.25 * h..0.75 * h));
    Pose::new(r, camera.backproject(&px, z))
}

/// Fronto-parallel rectangle at depth `z` hiding the `fraction` of `mask`
/// pixels nearest to one image side (`side`: 0 left, 1 right, 2 top,
/// 3 bottom). Returns a camera-space mesh.
pub fn occluder_for(mask: &Grid<bool>, camera: &Camera, fraction: f64, side: usize, z: f64) -> Option<Mesh> {
    let horizontal = side < 2;
    let mut coords: Vec<usize> =
        mask.iter_coords().filter(|(_, _, &m)| m).map(|(u, v, _)| if horizontal { u } else { v }).collect();
    if coords.is_empty() || fraction <= 0.0 {
        return None;
    }
    coords.sort_unstable();
    let n = coords.len();
    let k = ((fraction.min(1.0) * n as f64).round() as usize).clamp(1, n);
    const FAR: f64 = 50.0;
    let (f, c) = if horizontal { (camera.fx, camera.cx) } else { (camera.fy, camera.cy) };
    let to_metric = |pix: f64| (pix - c) / f * z;
    // bounds in the occluded axis
    let (lo, hi) = if side % 2 == 0 {
        (-FAR, to_metric(coords[k - 1] as f64 + 0.5))
    } else {
        (to_metric(coords[n - k] as f64 - 0.5), FAR)
    };
    let rect = if horizontal { Mesh::rectangle(lo, hi, -FAR, FAR) } else { Mesh::rectangle(-FAR, FAR, lo, hi) };
    Some(rect.translated(Vector3::new(0.0, 0.0, z)))
}

/// Builds a scene deterministically from `seed`.
pub fn generate_scene(mesh: &Mesh, spec: &SceneSpec, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = spec.camera;
    let gt_pose = random_pose(&camera, spec.distance, &mut rng);
    let side = rng.random_range(0..4usize);
    let object = rasterize(mesh, &gt_pose, &camera);
    if object.foreground_count() == 0 {
        return Err(Error::InvalidArgument("object is not visible at the sampled pose".into()));
    }
    let (mut depth, mut intensity) = (object.depth.clone(), object.intensity.clone());
    let mut visible = object.mask.clone();
    let mut occluded = Grid::new(camera.width, camera.height, false);
    if spec.occlusion > 0.0 {
        let z_min = object.depth.as_slice().iter().filter(|&&d| d > 0.0).cloned().fold(f64::INFINITY, f64::min);
        let z_occ = (z_min - 0.03).max(0.5 * z_min);
        if let Some(occ_mesh) = occluder_for(&object.mask, &camera, spec.occlusion, side, z_occ) {
            let occ = rasterize(&occ_mesh, &Pose::identity(), &camera);
            for i in 0..depth.len() {
                let od = occ.depth.as_slice()[i];
                if od > 0.0 && (depth.as_slice()[i] == 0.0 || od < depth.as_slice()[i]) {
                    if visible.as_slice()[i] {
                        occluded.as_mut_slice()[i] = true;
                        visible.as_mut_slice()[i] = false;
                    }
                    depth.as_mut_slice()[i] = od;
                    intensity.as_mut_slice()[i] = occ.intensity.as_slice()[i];
                }
            }
        }
    }
    let mut sensor = depth.clone();
    if spec.depth_noise > 0.0 {
        let normal = Normal::new(0.0, spec.depth_noise).unwrap();
        for d in sensor.as_mut_slice().iter_mut().filter(|d| **d > 0.0) {
            *d = (*d + normal.sample(&mut rng)).max(1e-6);
        }
    }
    if spec.depth_missing > 0.0 {
        for (d, &m) in sensor.as_mut_slice().iter_mut().zip(object.mask.as_slice()) {
            if m && rng.random::<f64>() < spec.depth_missing {
                *d = 0.0;
            }
        }
    }
    let bbox = mask_bbox(&visible).ok_or_else(|| Error::InvalidArgument("object fully occluded".into()))?;
    Ok(Scene {
        camera,
        gt_pose,
        observation: Observation { camera, intensity, mask: visible, depth: Some(sensor) },
        clean_depth: depth,
        full_mask: object.mask,
        occluded,
        bbox,
    })
}

/// Mixes a root seed with a path of indices (scene, hypothesis, ...), so
/// that any subset of work reproduces independently.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    let mut s = splitmix(root);
    for &p in path {
        s = splitmix(s ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    s
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Unit of stored depth values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthUnit {
    Meters,
    Millimeters,
}

impl DepthUnit {
    fn code(self) -> u32 {
        match self {
            DepthUnit::Meters => 0,
            DepthUnit::Millimeters => 1,
        }
    }

    fn scale(self) -> f64 {
        match self {
            DepthUnit::Meters => 1.0,
            DepthUnit::Millimeters => 1000.0,
        }
    }
}

const DEPTH_MAGIC: [u8; 4] = *b"FPDM";

/// Header: magic `FPDM`, height, width and unit code (0 m, 1 mm) as u32 LE;
/// then `H*W` f32 LE values in row-major order.
pub fn write_depth(mut w: impl Write, depth: &Grid<f64>, unit: DepthUnit) -> Result<()> {
    w.write_all(&DEPTH_MAGIC)?;
    w.write_all(&(depth.height() as u32).to_le_bytes())?;
    w.write_all(&(depth.width() as u32).to_le_bytes())?;
    w.write_all(&unit.code().to_le_bytes())?;
    let mut buf = Vec::with_capacity(depth.len() * 4);
    for &d in depth.as_slice() {
        buf.extend_from_slice(&((d * unit.scale()) as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a depth file, returning meters.
pub fn read_depth(mut r: impl Read) -> Result<Grid<f64>> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|_| Error::Format("depth: truncated header".into()))?;
    if head[..4] != DEPTH_MAGIC {
        return Err(Error::Format("depth: bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
    let (h, w) = (word(4) as usize, word(8) as usize);
    let unit = match word(12) {
        0 => DepthUnit::Meters,
        1 => DepthUnit::Millimeters,
        u => return Err(Error::Format(format!("depth: unknown unit code {u}"))),
    };
    let mut body = vec![0u8; w * h * 4];
    r.read_exact(&mut body).map_err(|_| Error::Format("depth: truncated body".into()))?;
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64 / unit.scale()).collect();
    Grid::from_vec(w, h, data)
}

/// Binary PGM (P5), 0 or 255.
pub fn write_pgm(mut w: impl Write, mask: &Grid<bool>) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", mask.width(), mask.height())?;
    let bytes: Vec<u8> = mask.as_slice().iter().map(|&m| if m { 255 } else { 0 }).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary 8-bit PGM; nonzero pixels are set.
pub fn read_pgm(mut r: impl BufRead) -> Result<Grid<bool>> {
    let mut fields = Vec::new();
    let mut token = String::new();
    let mut byte = [0u8; 1];
    while fields.len() < 4 {
        r.read_exact(&mut byte).map_err(|_| Error::Format("pgm: truncated header".into()))?;
        match byte[0] {
            b'#' if token.is_empty() => {
                let mut comment = String::new();
                r.read_line(&mut comment)?;
            }
            c if c.is_ascii_whitespace() => {
                if !token.is_empty() {
                    fields.push(std::mem::take(&mut token));
                }
            }
            c => token.push(c as char),
        }
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("pgm: unsupported magic {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("pgm: bad number {s}")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max == 0 || max > 255 {
        return Err(Error::Format(format!("pgm: unsupported maxval {max}")));
    }
    let mut body = vec![0u8; w * h];
    r.read_exact(&mut body).map_err(|_| Error::Format("pgm: truncated body".into()))?;
    Grid::from_vec(w, h, body.into_iter().map(|b| b > 0).collect())
}
