//! Dense flow machinery: pose-induced flow, synthetic corruption, convex
//! upsampling, depth-consistency certainty, correlation volumes with
//! shape-constrained lookup, and the certainty x sensitivity confidence.
//!
//! Flow always points from the rendered image to the observed image.

use std::io::{Read, Write};
use std::ops::Range;

use nalgebra::{Vector2, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{lift, Camera, Pose};
use crate::image::Grid;
use crate::render::RenderOutput;

/// Per-pixel displacement with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub flow: Grid<Vector2<f64>>,
    pub valid: Grid<bool>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField { flow: Grid::new(width, height, Vector2::zeros()), valid: Grid::new(width, height, false) }
    }

    pub fn width(&self) -> usize {
        self.flow.width()
    }

    pub fn height(&self) -> usize {
        self.flow.height()
    }

    pub fn get(&self, u: usize, v: usize) -> Option<Vector2<f64>> {
        self.valid.get(u, v).then(|| *self.flow.get(u, v))
    }

    pub fn valid_count(&self) -> usize {
        self.valid.as_slice().iter().filter(|&&v| v).count()
    }

    /// Block-averages valid flow into `factor x factor` cells and rescales
    /// displacements to the coarse pixel unit. A cell is valid if any of its
    /// pixels is.
    pub fn downsample(&self, factor: usize) -> FlowField {
        let (w, h) = (self.width() / factor, self.height() / factor);
        let mut out = FlowField::zeros(w, h);
        for j in 0..h {
            for i in 0..w {
                let mut acc = Vector2::zeros();
                let mut n = 0usize;
                for v in j * factor..(j + 1) * factor {
                    for u in i * factor..(i + 1) * factor {
                        if let Some(f) = self.get(u, v) {
                            acc += f;
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    out.flow.set(i, j, acc / (n as f64 * factor as f64));
                    out.valid.set(i, j, true);
                }
            }
        }
        out
    }

    const MAGIC: [u8; 4] = *b"FPFL";

    /// Binary layout: magic `FPFL`, height and width as u32 LE, `H*W` pairs
    /// of f32 LE in row-major order, then a row-major validity bitmap
    /// (LSB first, padded to a whole byte).
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&Self::MAGIC)?;
        w.write_all(&(self.height() as u32).to_le_bytes())?;
        w.write_all(&(self.width() as u32).to_le_bytes())?;
        for f in self.flow.as_slice() {
            w.write_all(&(f.x as f32).to_le_bytes())?;
            w.write_all(&(f.y as f32).to_le_bytes())?;
        }
        let mut bits = vec![0u8; self.valid.len().div_ceil(8)];
        for (i, &v) in self.valid.as_slice().iter().enumerate() {
            if v {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&bits)?;
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<FlowField> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head).map_err(|_| Error::Format("flow: truncated header".into()))?;
        if head[..4] != Self::MAGIC {
            return Err(Error::Format("flow: bad magic".into()));
        }
        let h = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut body = vec![0u8; w * h * 8];
        r.read_exact(&mut body).map_err(|_| Error::Format("flow: truncated body".into()))?;
        let flow: Vec<Vector2<f64>> = body
            .chunks_exact(8)
            .map(|c| {
                Vector2::new(
                    f32::from_le_bytes(c[..4].try_into().unwrap()) as f64,
                    f32::from_le_bytes(c[4..].try_into().unwrap()) as f64,
                )
            })
            .collect();
        let mut bits = vec![0u8; (w * h).div_ceil(8)];
        r.read_exact(&mut bits).map_err(|_| Error::Format("flow: truncated bitmap".into()))?;
        let valid: Vec<bool> = (0..w * h).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(FlowField { flow: Grid::from_vec(w, h, flow)?, valid: Grid::from_vec(w, h, valid)? })
    }
}

/// Displacement of each rendered foreground pixel when its lifted surface
/// point is moved from `render.pose` to `new_pose`.
///
/// Pixels whose point lands behind the camera are invalid.
pub fn pose_induced_flow(render: &RenderOutput, new_pose: &Pose, camera: &Camera) -> FlowField {
    let (w, h) = render.depth.dims();
    let mut out = FlowField::zeros(w, h);
    for (u, v, &d) in render.depth.iter_coords() {
        if d <= 0.0 {
            continue;
        }
        let p = Vector2::new(u as f64, v as f64);
        let Ok(x) = lift(camera, &render.pose, &p, d) else { continue };
        if let Ok(q) = camera.project(&new_pose.transform_point(&x)) {
            out.flow.set(u, v, q - p);
            out.valid.set(u, v, true);
        }
    }
    out
}

/// The supervision flow: pose-induced flow towards the ground-truth pose.
pub fn oracle_flow(render: &RenderOutput, gt_pose: &Pose, camera: &Camera) -> FlowField {
    pose_induced_flow(render, gt_pose, camera)
}

/// Range of outlier displacements, in pixels of the field being corrupted.
pub const OUTLIER_RANGE: f64 = 32.0;

/// Adds i.i.d. Gaussian noise of std `noise_px` per axis, replaces a random
/// `outlier_frac` of the valid pixels (and every valid pixel under
/// `occlusion`) with a uniform displacement in `[-32, 32]^2`.
pub fn corrupt_flow(
    flow: &FlowField,
    noise_px: f64,
    outlier_frac: f64,
    occlusion: Option<&Grid<bool>>,
    seed: u64,
) -> Result<FlowField> {
    if !(noise_px >= 0.0) || !(0.0..=1.0).contains(&outlier_frac) {
        return Err(Error::InvalidArgument(format!(
            "noise {noise_px} must be >= 0 and outlier fraction {outlier_frac} in [0, 1]"
        )));
    }
    if let Some(occ) = occlusion {
        flow.valid.check_shape(occ, "occlusion mask")?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = flow.clone();
    let valid: Vec<usize> = (0..flow.valid.len()).filter(|&i| flow.valid.as_slice()[i]).collect();

    let mut outlier = vec![false; flow.valid.len()];
    let n_out = (outlier_frac * valid.len() as f64).round() as usize;
    let mut pool = valid.clone();
    for k in 0..n_out {
        let j = rng.random_range(k..pool.len());
        pool.swap(k, j);
        outlier[pool[k]] = true;
    }
    if let Some(occ) = occlusion {
        for &i in &valid {
            if occ.as_slice()[i] {
                outlier[i] = true;
            }
        }
    }
    let normal = Normal::new(0.0, noise_px.max(f64::MIN_POSITIVE)).unwrap();
    let data = out.flow.as_mut_slice();
    for &i in &valid {
        if outlier[i] {
            data[i] = Vector2::new(
                rng.random_range(-OUTLIER_RANGE..=OUTLIER_RANGE),
                rng.random_range(-OUTLIER_RANGE..=OUTLIER_RANGE),
            );
        } else if noise_px > 0.0 {
            data[i] += Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
        }
    }
    Ok(out)
}

/// Per coarse cell, `factor^2` rows of 9 convex weights over the cell's 3x3
/// neighborhood (row-major, center at index 4).
#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleMask {
    width: usize,
    height: usize,
    factor: usize,
    weights: Vec<f64>,
}

impl UpsampleMask {
    /// Layout: `((j * width + i) * factor^2 + b * factor + a) * 9 + k` for
    /// coarse cell `(i, j)`, sub-pixel `(a, b)` and neighbor `k`.
    pub fn new(width: usize, height: usize, factor: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != width * height * factor * factor * 9 {
            return Err(Error::ShapeMismatch(format!(
                "upsample mask has {} weights, expected {}",
                weights.len(),
                width * height * factor * factor * 9
            )));
        }
        let mask = UpsampleMask { width, height, factor, weights };
        mask.validate()?;
        Ok(mask)
    }

    pub fn validate(&self) -> Result<()> {
        for (row_idx, row) in self.weights.chunks_exact(9).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "upsample mask row {row_idx} is not convex (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    /// Weights reproducing bilinear interpolation between cell centers.
    pub fn bilinear(width: usize, height: usize, factor: usize) -> Self {
        let f = factor as f64;
        let mut cell = Vec::with_capacity(factor * factor * 9);
        for b in 0..factor {
            for a in 0..factor {
                let dx = (a as f64 + 0.5) / f - 0.5;
                let dy = (b as f64 + 0.5) / f - 0.5;
                let wx = |k: isize| match k {
                    0 => 1.0 - dx.abs(),
                    s if (s as f64) * dx > 0.0 => dx.abs(),
                    _ => 0.0,
                };
                let wy = |k: isize| match k {
                    0 => 1.0 - dy.abs(),
                    s if (s as f64) * dy > 0.0 => dy.abs(),
                    _ => 0.0,
                };
                for ky in -1..=1 {
                    for kx in -1..=1 {
                        cell.push(wx(kx) * wy(ky));
                    }
                }
            }
        }
        UpsampleMask { width, height, factor, weights: cell.repeat(width * height) }
    }

    /// One-hot center weights: nearest-neighbor upsampling.
    pub fn nearest(width: usize, height: usize, factor: usize) -> Self {
        let mut weights = vec![0.0; width * height * factor * factor * 9];
        for row in weights.chunks_exact_mut(9) {
            row[4] = 1.0;
        }
        UpsampleMask { width, height, factor, weights }
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    fn row(&self, i: usize, j: usize, a: usize, b: usize) -> &[f64] {
        let f2 = self.factor * self.factor;
        let start = ((j * self.width + i) * f2 + b * self.factor + a) * 9;
        &self.weights[start..start + 9]
    }
}

/// Upsamples a coarse flow by convex combination of each cell's 3x3
/// neighbors, scaling displacements by `factor`.
///
/// Invalid or out-of-bounds neighbors are dropped and the remaining weights
/// renormalized; a fine pixel is valid iff its own coarse cell is.
pub fn convex_upsample(coarse: &FlowField, mask: &UpsampleMask, factor: usize) -> Result<FlowField> {
    if mask.factor != factor || mask.width != coarse.width() || mask.height != coarse.height() {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} x{} vs flow {}x{} x{factor}",
            mask.width,
            mask.height,
            mask.factor,
            coarse.width(),
            coarse.height()
        )));
    }
    mask.validate()?;
    let (w, h) = (coarse.width(), coarse.height());
    let mut out = FlowField::zeros(w * factor, h * factor);
    let f = factor as f64;
    for j in 0..h {
        for i in 0..w {
            let Some(center) = coarse.get(i, j) else { continue };
            for b in 0..factor {
                for a in 0..factor {
                    let row = mask.row(i, j, a, b);
                    let mut acc = Vector2::zeros();
                    let mut wsum = 0.0;
                    for (k, &wk) in row.iter().enumerate() {
                        if wk == 0.0 {
                            continue;
                        }
                        let ni = i as isize + (k % 3) as isize - 1;
                        let nj = j as isize + (k / 3) as isize - 1;
                        if ni < 0 || nj < 0 || ni as usize >= w || nj as usize >= h {
                            continue;
                        }
                        if let Some(nf) = coarse.get(ni as usize, nj as usize) {
                            acc += nf * wk;
                            wsum += wk;
                        }
                    }
                    let value = if wsum > 0.0 { acc / wsum } else { center };
                    let (u, v) = (i * factor + a, j * factor + b);
                    out.flow.set(u, v, value * f);
                    out.valid.set(u, v, true);
                }
            }
        }
    }
    Ok(out)
}

/// Depth-consistency labels: a rendered pixel is certain when its surface
/// point, moved to `gt_pose`, lands inside the target image at a depth within
/// `d_th` of the target depth there.
pub fn certainty_ground_truth(
    render: &RenderOutput,
    gt_pose: &Pose,
    target_depth: &Grid<f64>,
    camera: &Camera,
    d_th: f64,
) -> Result<Grid<bool>> {
    if !(d_th > 0.0) {
        return Err(Error::InvalidArgument(format!("d_th must be positive, got {d_th}")));
    }
    render.depth.check_shape(target_depth, "target depth")?;
    let (w, h) = render.depth.dims();
    let mut out = Grid::new(w, h, false);
    for (u, v, &d) in render.depth.iter_coords() {
        if d <= 0.0 {
            continue;
        }
        let p = Vector2::new(u as f64, v as f64);
        let Ok(x) = lift(camera, &render.pose, &p, d) else { continue };
        let xc = gt_pose.transform_point(&x);
        let Ok(q) = camera.project(&xc) else { continue };
        if !camera.contains(&q) {
            continue;
        }
        if let Some(dt) = target_depth.bilinear_where(q.x, q.y, |s| s > 0.0) {
            if (xc.z - dt).abs() < d_th {
                out.set(u, v, true);
            }
        }
    }
    Ok(out)
}

/// Certainty, pose sensitivity and their product.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMaps {
    certainty: Grid<f64>,
    sensitivity: Grid<f64>,
    combined: Grid<f64>,
}

impl ConfidenceMaps {
    pub fn new(certainty: Grid<f64>, sensitivity: Grid<f64>) -> Result<Self> {
        certainty.check_shape(&sensitivity, "confidence maps")?;
        let in_unit = |g: &Grid<f64>| g.as_slice().iter().all(|x| (0.0..=1.0).contains(x));
        if !in_unit(&certainty) || !in_unit(&sensitivity) {
            return Err(Error::InvalidArgument("confidence values must lie in [0, 1]".into()));
        }
        let combined = Grid::from_vec(
            certainty.width(),
            certainty.height(),
            certainty.as_slice().iter().zip(sensitivity.as_slice()).map(|(c, s)| c * s).collect(),
        )?;
        Ok(ConfidenceMaps { certainty, sensitivity, combined })
    }

    pub fn uniform(width: usize, height: usize) -> Self {
        ConfidenceMaps::new(Grid::new(width, height, 1.0), Grid::new(width, height, 1.0)).unwrap()
    }

    pub fn certainty(&self) -> &Grid<f64> {
        &self.certainty
    }

    pub fn sensitivity(&self) -> &Grid<f64> {
        &self.sensitivity
    }

    /// `certainty * sensitivity`.
    pub fn weights(&self) -> &Grid<f64> {
        &self.combined
    }

    /// Sets certainty to 0 wherever `region` is set.
    pub fn zero_certainty(&self, region: &Grid<bool>) -> Result<Self> {
        self.certainty.check_shape(region, "certainty region")?;
        let mut c = self.certainty.clone();
        for (x, &r) in c.as_mut_slice().iter_mut().zip(region.as_slice()) {
            if r {
                *x = 0.0;
            }
        }
        ConfidenceMaps::new(c, self.sensitivity.clone())
    }

    /// Bilinear upsampling of both factors, then the product.
    pub fn upsample(&self, factor: usize) -> Self {
        let clamp = |g: Grid<f64>| g.map(|x| x.clamp(0.0, 1.0));
        ConfidenceMaps::new(
            clamp(self.certainty.upsample_bilinear(factor)),
            clamp(self.sensitivity.upsample_bilinear(factor)),
        )
        .expect("upsampled maps keep their shape and range")
    }
}

/// Normalized magnitude of the flow induced by small pose perturbations,
/// estimated by finite differences over the six tangent directions.
pub fn sensitivity_map(render: &RenderOutput, camera: &Camera) -> Grid<f64> {
    const EPS_ROT: f64 = 1e-3;
    const EPS_TRANS: f64 = 1e-3;
    let (w, h) = render.depth.dims();
    let mut energy = Grid::new(w, h, 0.0);
    for k in 0..6 {
        let mut twist = Vector6::zeros();
        twist[k] = if k < 3 { EPS_ROT } else { EPS_TRANS };
        let moved = render.pose.retract(&twist);
        let f = pose_induced_flow(render, &moved, camera);
        for (e, (d, &ok)) in energy.as_mut_slice().iter_mut().zip(f.flow.as_slice().iter().zip(f.valid.as_slice())) {
            if ok {
                *e += d.norm_squared();
            }
        }
    }
    let max = energy.as_slice().iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        energy.map(|e| (e / max).sqrt())
    } else {
        energy
    }
}

/// Per-pixel feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for {width}x{height}x{dim}",
                data.len()
            )));
        }
        Ok(FeatureMap { width, height, dim, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn at(&self, u: usize, v: usize) -> &[f64] {
        let s = (v * self.width + u) * self.dim;
        &self.data[s..s + self.dim]
    }

    fn at_index(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }
}

/// Channels produced by [`hand_features`].
pub const HAND_FEATURE_DIM: usize = 9;

/// Deterministic texture features at 1/4 (`level` 1) or 1/8 (`level` 2)
/// resolution: block-mean intensity, its gradients, gradient magnitude,
/// Laplacian, 3x3 mean and std, the deviation from that mean and the 5x5
/// mean. Each vector is scaled to unit length (zero vectors stay zero), so
/// correlations are cosine similarities.
pub fn hand_features(intensity: &Grid<f32>, level: u32) -> Result<FeatureMap> {
    let stride = match level {
        1 => 4,
        2 => 8,
        other => return Err(Error::InvalidArgument(format!("feature level must be 1 or 2, got {other}"))),
    };
    let (w, h) = (intensity.width() / stride, intensity.height() / stride);
    let img = Grid::from_fn(w, h, |i, j| {
        let mut s = 0.0;
        for v in j * stride..(j + 1) * stride {
            for u in i * stride..(i + 1) * stride {
                s += *intensity.get(u, v) as f64;
            }
        }
        s / (stride * stride) as f64
    });
    let at = |i: isize, j: isize| {
        let i = i.clamp(0, w as isize - 1) as usize;
        let j = j.clamp(0, h as isize - 1) as usize;
        *img.get(i, j)
    };
    let window_mean = |i: isize, j: isize, r: isize| {
        let mut s = 0.0;
        for dj in -r..=r {
            for di in -r..=r {
                s += at(i + di, j + dj);
            }
        }
        s / ((2 * r + 1) * (2 * r + 1)) as f64
    };
    let mut data = Vec::with_capacity(w * h * HAND_FEATURE_DIM);
    for j in 0..h as isize {
        for i in 0..w as isize {
            let c = at(i, j);
            let gx = 0.5 * (at(i + 1, j) - at(i - 1, j));
            let gy = 0.5 * (at(i, j + 1) - at(i, j - 1));
            let lap = at(i + 1, j) + at(i - 1, j) + at(i, j + 1) + at(i, j - 1) - 4.0 * c;
            let m3 = window_mean(i, j, 1);
            let mut var = 0.0;
            for dj in -1..=1 {
                for di in -1..=1 {
                    var += (at(i + di, j + dj) - m3).powi(2);
                }
            }
            let sd = (var / 9.0).sqrt();
            let m5 = window_mean(i, j, 2);
            let f = [c, gx, gy, gx.hypot(gy), lap, m3, sd, c - m3, m5];
            let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(f.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }));
        }
    }
    FeatureMap::new(w, h, HAND_FEATURE_DIM, data)
}

/// All-pairs dot products `C[p, q] = <a(p), b(q)>` between two equally
/// shaped feature maps, stored as f32 in row-major `p`, then `q` order.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationVolume {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl CorrelationVolume {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, p: (usize, usize), q: (usize, usize)) -> f32 {
        let n = self.width * self.height;
        self.data[(p.1 * self.width + p.0) * n + q.1 * self.width + q.0]
    }

    fn row(&self, p: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[p * n..(p + 1) * n]
    }

    /// Computes the source rows `rows` (row-major source pixel indices) of
    /// the volume. Disjoint row blocks can be evaluated by separate workers
    /// and concatenated in order.
    pub fn compute_rows(a: &FeatureMap, b: &FeatureMap, rows: Range<usize>) -> Vec<f32> {
        let n = b.width * b.height;
        let mut out = Vec::with_capacity(rows.len() * n);
        for p in rows {
            let fa = a.at_index(p);
            for q in 0..n {
                let fb = b.at_index(q);
                out.push(fa.iter().zip(fb).map(|(x, y)| x * y).sum::<f64>() as f32);
            }
        }
        out
    }
}

fn check_feature_shapes(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.dim != b.dim {
        return Err(Error::ShapeMismatch(format!(
            "features {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.dim, b.width, b.height, b.dim
        )));
    }
    Ok(())
}

/// Builds the volume in parallel blocks of source rows.
pub fn build_correlation_volume(a: &FeatureMap, b: &FeatureMap) -> Result<CorrelationVolume> {
    build_correlation_volume_tiled(a, b, 64)
}

/// As [`build_correlation_volume`] with an explicit block size; the result
/// does not depend on `tile_rows`.
pub fn build_correlation_volume_tiled(a: &FeatureMap, b: &FeatureMap, tile_rows: usize) -> Result<CorrelationVolume> {
    check_feature_shapes(a, b)?;
    let n = a.width * a.height;
    let tile = tile_rows.max(1);
    let blocks: Vec<Range<usize>> = (0..n).step_by(tile).map(|s| s..(s + tile).min(n)).collect();
    let parts: Vec<Vec<f32>> = blocks.into_par_iter().map(|r| CorrelationVolume::compute_rows(a, b, r)).collect();
    Ok(CorrelationVolume { width: a.width, height: a.height, data: parts.concat() })
}

/// Correlation features gathered around the pose-induced target of every
/// source pixel: `(2r+1)^2` values per pixel, zero for invalid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct LookupFeatures {
    pub width: usize,
    pub height: usize,
    pub radius: usize,
    pub data: Vec<f64>,
}

impl LookupFeatures {
    pub fn taps(&self) -> usize {
        (2 * self.radius + 1).pow(2)
    }

    pub fn at(&self, u: usize, v: usize) -> &[f64] {
        let t = self.taps();
        let s = (v * self.width + u) * t;
        &self.data[s..s + t]
    }
}

/// Samples `C[p, .]` bilinearly on the `(2r+1)^2` grid centered at
/// `p + induced_flow(p)`; taps outside the target image read 0.
pub fn shape_constraint_lookup(volume: &CorrelationVolume, induced_flow: &FlowField, radius: usize) -> Result<LookupFeatures> {
    if induced_flow.width() != volume.width || induced_flow.height() != volume.height {
        return Err(Error::ShapeMismatch(format!(
            "flow {}x{} vs volume {}x{}",
            induced_flow.width(),
            induced_flow.height(),
            volume.width,
            volume.height
        )));
    }
    let (w, h) = (volume.width, volume.height);
    let r = radius as isize;
    let taps = (2 * radius + 1).pow(2);
    let mut data = vec![0.0; w * h * taps];
    for (u, v, &ok) in induced_flow.valid.iter_coords() {
        if !ok {
            continue;
        }
        let row = volume.row(v * w + u);
        let target = Vector2::new(u as f64, v as f64) + induced_flow.flow.get(u, v);
        let read = |x: isize, y: isize| -> f64 {
            if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
                0.0
            } else {
                row[y as usize * w + x as usize] as f64
            }
        };
        let base = (v * w + u) * taps;
        let mut t = 0;
        for dy in -r..=r {
            for dx in -r..=r {
                let x = target.x + dx as f64;
                let y = target.y + dy as f64;
                let (x0, y0) = (x.floor(), y.floor());
                let (ax, ay) = (x - x0, y - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                data[base + t] = (1.0 - ay) * ((1.0 - ax) * read(x0, y0) + ax * read(x0 + 1, y0))
                    + ay * ((1.0 - ax) * read(x0, y0 + 1) + ax * read(x0 + 1, y0 + 1));
                t += 1;
            }
        }
    }
    Ok(LookupFeatures { width: w, height: h, radius, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{EulerAngles, Rotation};
    use crate::mesh::Mesh;
    use crate::render::rasterize;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;

    fn camera() -> Camera {
        Camera::new(300.0, 300.0, 64.0, 64.0, 128, 128).unwrap()
    }

    fn bracket_scene() -> (Mesh, RenderOutput) {
        let mesh = Mesh::bracket();
        let pose = Pose::new(Rotation::from_euler(EulerAngles::new(0.3, 0.2, -0.4)), Vector3::new(0.0, 0.0, 0.45));
        let r = rasterize(&mesh, &pose, &camera());
        (mesh, r)
    }

    #[test]
    fn identity_induced_flow_is_zero() {
        let (_, r) = bracket_scene();
        let f = pose_induced_flow(&r, &r.pose, &camera());
        assert_eq!(f.valid, r.mask);
        for (u, v, &ok) in f.valid.iter_coords() {
            if ok {
                assert!(f.flow.get(u, v).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn plane_translation_gives_uniform_flow() {
        let plane = Mesh::rectangle(-1.0, 1.0, -1.0, 1.0);
        let z = 2.0;
        let cam = camera();
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, z));
        let r = rasterize(&plane, &pose, &cam);
        let delta = 0.01;
        let moved = Pose::from_translation(Vector3::new(delta, 0.0, z));
        let f = oracle_flow(&r, &moved, &cam);
        assert!(f.valid_count() > 1000);
        for (u, v, &ok) in f.valid.iter_coords() {
            if ok {
                assert_abs_diff_eq!(*f.flow.get(u, v), Vector2::new(cam.fx * delta / z, 0.0), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn induced_flow_composes_through_intermediate_render() {
        let (mesh, ra) = bracket_scene();
        let cam = camera();
        let b = ra.pose.retract(&Vector6::new(0.05, -0.03, 0.02, 0.004, -0.002, 0.01));
        let c = b.retract(&Vector6::new(-0.02, 0.04, 0.01, -0.003, 0.002, -0.005));
        let ab = pose_induced_flow(&ra, &b, &cam);
        let rb = rasterize(&mesh, &b, &cam);
        let ac = pose_induced_flow(&ra, &c, &cam);
        let (mut checked, mut good) = (0, 0);
        for (u, v, &ok) in ab.valid.iter_coords() {
            if !ok {
                continue;
            }
            let p = Vector2::new(u as f64, v as f64);
            let q = p + ab.flow.get(u, v);
            // lift from B's render at the (sub-pixel) flow target
            let Some(d_b) = rb.depth.bilinear_where(q.x, q.y, |d| d > 0.0) else { continue };
            let x_b = lift(&cam, &b, &q, d_b).unwrap();
            let x_a = lift(&cam, &ra.pose, &p, *ra.depth.get(u, v)).unwrap();
            if (x_a - x_b).norm() > 1e-3 {
                continue; // not co-visible in B
            }
            checked += 1;
            let chained = cam.project(&c.transform_point(&x_b)).unwrap() - p;
            if (chained - ac.flow.get(u, v)).norm() < 0.1 {
                good += 1;
            }
        }
        assert!(checked > 500, "{checked}");
        assert!(good as f64 >= 0.95 * checked as f64, "{good}/{checked}");
    }

    #[test]
    fn corrupt_flow_identity_and_statistics() {
        let mut f = FlowField::zeros(100, 100);
        f.valid = Grid::new(100, 100, true);
        assert_eq!(corrupt_flow(&f, 0.0, 0.0, None, 1).unwrap(), f);

        let noisy = corrupt_flow(&f, 1.0, 0.0, None, 2).unwrap();
        let mean_abs: f64 =
            noisy.flow.as_slice().iter().map(|d| 0.5 * (d.x.abs() + d.y.abs())).sum::<f64>() / 1e4;
        let expected = (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean_abs / expected - 1.0).abs() < 0.05, "{mean_abs}");

        let out = corrupt_flow(&f, 1.0, 0.3, None, 3).unwrap();
        let far = out.flow.as_slice().iter().filter(|d| d.norm() > 3.0).count() as f64 / 1e4;
        assert!((far - 0.3).abs() < 0.02, "{far}");
        assert_eq!(out, corrupt_flow(&f, 1.0, 0.3, None, 3).unwrap());
        assert!(corrupt_flow(&f, -1.0, 0.0, None, 3).is_err());
        assert!(corrupt_flow(&f, 0.0, 1.5, None, 3).is_err());
    }

    #[test]
    fn corrupt_flow_marks_occluded_pixels_as_outliers() {
        let mut f = FlowField::zeros(40, 40);
        f.valid = Grid::new(40, 40, true);
        let occ = Grid::from_fn(40, 40, |u, _| u < 20);
        let out = corrupt_flow(&f, 0.0, 0.0, Some(&occ), 4).unwrap();
        let moved = out.flow.iter_coords().filter(|(u, _, d)| *u < 20 && d.norm() > 0.0).count();
        assert!(moved >= 790);
        assert!(out.flow.iter_coords().all(|(u, _, d)| u < 20 || d.norm() == 0.0));
    }

    fn uniform_coarse(w: usize, h: usize, v: Vector2<f64>) -> FlowField {
        FlowField { flow: Grid::new(w, h, v), valid: Grid::new(w, h, true) }
    }

    #[test]
    fn convex_upsample_examples() {
        let v = Vector2::new(0.7, -1.2);
        let coarse = uniform_coarse(5, 4, v);
        for mask in [UpsampleMask::bilinear(5, 4, 4), UpsampleMask::nearest(5, 4, 4)] {
            let fine = convex_upsample(&coarse, &mask, 4).unwrap();
            assert_eq!(fine.valid_count(), 20 * 16);
            for d in fine.flow.as_slice() {
                assert_abs_diff_eq!(*d, v * 4.0, epsilon = 1e-12);
            }
        }
        let zero = uniform_coarse(3, 3, Vector2::zeros());
        let fine = convex_upsample(&zero, &UpsampleMask::bilinear(3, 3, 8), 8).unwrap();
        assert!(fine.flow.as_slice().iter().all(|d| d.norm() == 0.0));

        // one-hot center weights are nearest-neighbor upsampling
        let mut varied = uniform_coarse(3, 2, Vector2::zeros());
        for (i, d) in varied.flow.as_mut_slice().iter_mut().enumerate() {
            *d = Vector2::new(i as f64, -(i as f64));
        }
        let fine = convex_upsample(&varied, &UpsampleMask::nearest(3, 2, 2), 2).unwrap();
        for (u, v, d) in fine.flow.iter_coords() {
            assert_eq!(*d, varied.flow.get(u / 2, v / 2) * 2.0);
        }
    }

    #[test]
    fn convex_upsample_reproduces_affine_interior() {
        let mut c = uniform_coarse(6, 6, Vector2::zeros());
        for (i, j, d) in c.flow.as_mut_slice().iter_mut().enumerate().map(|(k, d)| (k % 6, k / 6, d)) {
            *d = Vector2::new(0.1 * i as f64 + 0.3, -0.2 * j as f64);
        }
        let fine = convex_upsample(&c, &UpsampleMask::bilinear(6, 6, 4), 4).unwrap();
        for (u, v, d) in fine.flow.iter_coords() {
            let (x, y) = ((u as f64 + 0.5) / 4.0 - 0.5, (v as f64 + 0.5) / 4.0 - 0.5);
            if (0.0..=5.0).contains(&x) && (0.0..=5.0).contains(&y) {
                assert_abs_diff_eq!(*d, Vector2::new(0.1 * x + 0.3, -0.2 * y) * 4.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn convex_upsample_rejects_unnormalized_mask() {
        let mut w = vec![0.0; 2 * 2 * 4 * 9];
        for row in w.chunks_exact_mut(9) {
            row[4] = 0.5;
        }
        assert!(UpsampleMask::new(2, 2, 2, w).is_err());
    }

    #[test]
    fn upsample_mask_rows_are_convex() {
        UpsampleMask::bilinear(4, 3, 8).validate().unwrap();
        UpsampleMask::bilinear(4, 3, 4).validate().unwrap();
    }

    #[test]
    fn certainty_self_consistent_and_monotone() {
        let (mesh, r) = bracket_scene();
        let cam = camera();
        let gt = r.pose.retract(&Vector6::new(0.03, 0.02, -0.01, 0.002, 0.0, 0.005));
        let target = rasterize(&mesh, &gt, &cam);
        let c_inf = certainty_ground_truth(&r, &gt, &target.depth, &cam, 1e9).unwrap();
        let mut prev = Grid::new(cam.width, cam.height, false);
        for d_th in [1e-4, 1e-3, 5e-3, 2e-2, 1e9] {
            let c = certainty_ground_truth(&r, &gt, &target.depth, &cam, d_th).unwrap();
            for (a, b) in prev.as_slice().iter().zip(c.as_slice()) {
                assert!(!*a || *b, "growing d_th flipped a pixel to 0");
            }
            prev = c;
        }
        // every in-bounds foreground pixel with target depth is certain at infinite threshold
        let fg = r.foreground_count();
        let n_inf = c_inf.as_slice().iter().filter(|&&c| c).count();
        assert!(n_inf as f64 > 0.95 * fg as f64);
        assert!(certainty_ground_truth(&r, &gt, &target.depth, &cam, 0.0).is_err());
    }

    /// Möller-Trumbore: nearest positive hit distance along `dir` from the origin.
    fn ray_hit(mesh: &Mesh, pose: &Pose, dir: &Vector3<f64>) -> Option<f64> {
        let mut best: Option<f64> = None;
        for i in 0..mesh.triangles.len() {
            let [a, b, c] = mesh.triangle(i).map(|p| pose.transform_point(&p));
            let (e1, e2) = (b - a, c - a);
            let h = dir.cross(&e2);
            let det = e1.dot(&h);
            if det.abs() < 1e-14 {
                continue;
            }
            let s = -a;
            let uu = s.dot(&h) / det;
            let q = s.cross(&e1);
            let vv = dir.dot(&q) / det;
            let t = e2.dot(&q) / det;
            if uu >= 0.0 && vv >= 0.0 && uu + vv <= 1.0 && t > 0.0 && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
        best
    }

    #[test]
    fn certainty_one_on_covisible_pixels() {
        let (mesh, r) = bracket_scene();
        let cam = camera();
        let gt = r.pose.retract(&Vector6::new(0.04, -0.03, 0.02, 0.003, -0.002, 0.004));
        let target = rasterize(&mesh, &gt, &cam);
        let cert = certainty_ground_truth(&r, &gt, &target.depth, &cam, 5e-3).unwrap();
        let (mut covisible, mut certain) = (0, 0);
        for (u, v, &d) in r.depth.iter_coords() {
            if d <= 0.0 {
                continue;
            }
            let x = lift(&cam, &r.pose, &Vector2::new(u as f64, v as f64), d).unwrap();
            let xc = gt.transform_point(&x);
            if !cam.contains(&cam.project(&xc).unwrap()) {
                continue;
            }
            let hit = ray_hit(&mesh, &gt, &xc.normalize()).unwrap_or(f64::INFINITY);
            if hit < xc.norm() - 1e-4 {
                continue; // self-occluded in the target view
            }
            covisible += 1;
            if *cert.get(u, v) {
                certain += 1;
            }
        }
        assert!(covisible > 1000);
        assert!(certain as f64 >= 0.99 * covisible as f64, "{certain}/{covisible}");
    }

    #[test]
    fn occluder_zeroes_certainty() {
        let (mesh, r) = bracket_scene();
        let cam = camera();
        let gt = r.pose.retract(&Vector6::new(0.02, 0.01, 0.0, 0.0, 0.002, 0.0));
        // camera-space plane 10 cm in front of the object, covering x < 0
        let z = gt.translation.z - 0.1;
        let occluder = Mesh::rectangle(-1.0, 0.0, -1.0, 1.0).translated(Vector3::new(0.0, 0.0, z));
        let mut scene = mesh.clone();
        for p in scene.vertices.iter_mut() {
            *p = gt.transform_point(p);
        }
        scene.merge(&occluder);
        let target = rasterize(&scene, &Pose::identity(), &cam);
        let cert = certainty_ground_truth(&r, &gt, &target.depth, &cam, 5e-3).unwrap();
        let (mut occluded, mut zero) = (0, 0);
        for (u, v, &d) in r.depth.iter_coords() {
            if d <= 0.0 {
                continue;
            }
            let x = lift(&cam, &r.pose, &Vector2::new(u as f64, v as f64), d).unwrap();
            let xc = gt.transform_point(&x);
            let q = cam.project(&xc).unwrap();
            // inside the occluder footprint, with a one pixel margin
            if !cam.contains(&q) || (q.x - cam.cx) / cam.fx * z > -1.0 / cam.fx * z {
                continue;
            }
            occluded += 1;
            if !*cert.get(u, v) {
                zero += 1;
            }
        }
        assert!(occluded > 300, "{occluded}");
        assert!(zero as f64 >= 0.95 * occluded as f64, "{zero}/{occluded}");
    }

    #[test]
    fn self_correlation_diagonal_is_row_max() {
        let img = Grid::from_fn(64, 64, |u, v| ((u * 31 + v * 17) % 23) as f32);
        let f = hand_features(&img, 1).unwrap();
        let vol = build_correlation_volume(&f, &f).unwrap();
        for v in 0..f.height() {
            for u in 0..f.width() {
                let sq: f64 = f.at(u, v).iter().map(|x| x * x).sum();
                let diag = vol.get((u, v), (u, v));
                assert!((diag as f64 - sq).abs() < 1e-6);
                for q in 0..f.width() * f.height() {
                    assert!(vol.get((u, v), (q % f.width(), q / f.width())) <= diag + 1e-6);
                }
            }
        }
    }

    #[test]
    fn confidence_product_and_zeroing() {
        let c = Grid::from_fn(4, 4, |u, _| u as f64 / 4.0);
        let s = Grid::from_fn(4, 4, |_, v| 1.0 - v as f64 / 8.0);
        let m = ConfidenceMaps::new(c.clone(), s.clone()).unwrap();
        for i in 0..16 {
            assert_eq!(m.weights().as_slice()[i], c.as_slice()[i] * s.as_slice()[i]);
        }
        let region = Grid::from_fn(4, 4, |u, v| u + v > 3);
        let z = m.zero_certainty(&region).unwrap();
        for (u, v, &w) in z.weights().iter_coords() {
            if u + v > 3 {
                assert_eq!(w, 0.0);
            }
        }
        assert!(ConfidenceMaps::new(Grid::new(2, 2, 1.5), Grid::new(2, 2, 1.0)).is_err());
    }

    #[test]
    fn sensitivity_map_in_unit_range() {
        let (_, r) = bracket_scene();
        let s = sensitivity_map(&r, &camera());
        assert!(s.as_slice().iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(s.as_slice().iter().any(|&x| x == 1.0));
        for (u, v, &x) in s.iter_coords() {
            if !r.mask.get(u, v) {
                assert_eq!(x, 0.0);
            }
        }
    }

    fn features_from(vals: &[[f64; 2]]) -> FeatureMap {
        FeatureMap::new(2, vals.len() / 2, 2, vals.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn correlation_hand_worked() {
        // 2x2 image, 2 channels
        let a = features_from(&[[1.0, 2.0], [0.0, 1.0], [3.0, -1.0], [2.0, 2.0]]);
        let b = features_from(&[[1.0, 0.0], [1.0, 1.0], [-1.0, 2.0], [0.5, 0.5]]);
        let vol = build_correlation_volume(&a, &b).unwrap();
        let expected = [
            [1.0, 3.0, 3.0, 1.5],
            [0.0, 1.0, 2.0, 0.5],
            [3.0, 2.0, -5.0, 1.0],
            [2.0, 4.0, 2.0, 2.0],
        ];
        for p in 0..4 {
            for q in 0..4 {
                assert_abs_diff_eq!(vol.get((p % 2, p / 2), (q % 2, q / 2)) as f64, expected[p][q], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn correlation_one_hot_and_self() {
        let n = 4;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        let f = FeatureMap::new(2, 2, n, data).unwrap();
        let vol = build_correlation_volume(&f, &f).unwrap();
        for p in 0..n {
            for q in 0..n {
                assert_eq!(vol.get((p % 2, p / 2), (q % 2, q / 2)), if p == q { 1.0 } else { 0.0 });
            }
        }
        let bad = FeatureMap::new(1, 2, n, vec![0.0; 2 * n]).unwrap();
        assert!(build_correlation_volume(&f, &bad).is_err());
    }

    #[test]
    fn tiling_does_not_change_volume() {
        let img = Grid::from_fn(64, 48, |u, v| ((u * 7 + v * 13) % 17) as f32 / 17.0);
        let f = hand_features(&img, 1).unwrap();
        let a = build_correlation_volume_tiled(&f, &f, 1).unwrap();
        let b = build_correlation_volume_tiled(&f, &f, 37).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lookup_examples() {
        let a = features_from(&[[1.0, 2.0], [0.0, 1.0], [3.0, -1.0], [2.0, 2.0]]);
        let vol = build_correlation_volume(&a, &a).unwrap();
        let mut flow = FlowField::zeros(2, 2);
        flow.valid = Grid::new(2, 2, true);
        let l = shape_constraint_lookup(&vol, &flow, 0).unwrap();
        for p in 0..4 {
            let (u, v) = (p % 2, p / 2);
            assert_eq!(l.at(u, v)[0], vol.get((u, v), (u, v)) as f64);
        }
        // integer flow reads exact entries
        flow.flow.set(0, 0, Vector2::new(1.0, 1.0));
        let l = shape_constraint_lookup(&vol, &flow, 0).unwrap();
        assert_eq!(l.at(0, 0)[0], vol.get((0, 0), (1, 1)) as f64);
        // half-pixel flow is the midpoint
        flow.flow.set(0, 0, Vector2::new(0.5, 0.0));
        let l = shape_constraint_lookup(&vol, &flow, 0).unwrap();
        let mid = 0.5 * (vol.get((0, 0), (0, 0)) + vol.get((0, 0), (1, 0))) as f64;
        assert_abs_diff_eq!(l.at(0, 0)[0], mid, epsilon = 1e-6);
        // out of bounds reads zero
        flow.flow.set(0, 0, Vector2::new(-5.0, 0.0));
        let l = shape_constraint_lookup(&vol, &flow, 1).unwrap();
        assert!(l.at(0, 0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hand_features_examples() {
        let flat = Grid::new(64, 32, 0.5f32);
        let f = hand_features(&flat, 1).unwrap();
        assert_eq!((f.width(), f.height()), (16, 8));
        for v in 0..8 {
            for u in 0..16 {
                let x = f.at(u, v);
                assert_eq!(x, f.at(0, 0));
                for ch in [1, 2, 3, 4, 6, 7] {
                    assert_eq!(x[ch], 0.0);
                }
            }
        }
        let f2 = hand_features(&flat, 2).unwrap();
        assert_eq!((f2.width(), f2.height()), (8, 4));
        assert!(hand_features(&flat, 3).is_err());
        let tex = Grid::from_fn(64, 64, |u, v| ((u * 31 + v * 17) % 23) as f32);
        assert_eq!(hand_features(&tex, 1).unwrap(), hand_features(&tex, 1).unwrap());
    }

    #[test]
    fn lookup_at_true_match_beats_distant_offsets() {
        // textured image and a copy shifted by an integer number of coarse cells
        let texture = |u: i64, v: i64| {
            let h = (u.wrapping_mul(73_856_093) ^ v.wrapping_mul(19_349_663)).rem_euclid(1000);
            h as f32 / 1000.0
        };
        let (w, h) = (128usize, 128usize);
        let shift = (2i64, 1i64); // coarse cells at level 1 (stride 4)
        let src = Grid::from_fn(w, h, |u, v| texture(u as i64 / 4, v as i64 / 4));
        let dst = Grid::from_fn(w, h, |u, v| texture(u as i64 / 4 - shift.0, v as i64 / 4 - shift.1));
        let fa = hand_features(&src, 1).unwrap();
        let fb = hand_features(&dst, 1).unwrap();
        let vol = build_correlation_volume(&fa, &fb).unwrap();
        let mut flow = FlowField::zeros(fa.width(), fa.height());
        flow.valid = Grid::new(fa.width(), fa.height(), true);
        for d in flow.flow.as_mut_slice() {
            *d = Vector2::new(shift.0 as f64, shift.1 as f64);
        }
        let l = shape_constraint_lookup(&vol, &flow, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut total, mut wins) = (0, 0);
        for v in 3..fa.height() - 3 {
            for u in 3..fa.width() - 3 {
                total += 1;
                let at_match = l.at(u, v)[0];
                let beats_all = (0..8).all(|_| {
                    let (ox, oy) = loop {
                        let o = (rng.random_range(-6i64..=6), rng.random_range(-6i64..=6));
                        if o.0.abs().max(o.1.abs()) >= 2 {
                            break o;
                        }
                    };
                    let q = (u as i64 + shift.0 + ox, v as i64 + shift.1 + oy);
                    if q.0 < 0 || q.1 < 0 || q.0 >= fa.width() as i64 || q.1 >= fa.height() as i64 {
                        return true;
                    }
                    at_match >= vol.get((u, v), (q.0 as usize, q.1 as usize)) as f64
                });
                if beats_all {
                    wins += 1;
                }
            }
        }
        assert!(wins as f64 >= 0.9 * total as f64, "{wins}/{total}");
    }

    #[test]
    fn flow_binary_roundtrip_and_layout() {
        let (_, r) = bracket_scene();
        let f = pose_induced_flow(&r, &r.pose.retract(&Vector6::new(0.01, 0.0, 0.0, 0.0, 0.001, 0.0)), &camera());
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FPFL");
        assert_eq!(buf.len(), 12 + 128 * 128 * 8 + (128 * 128usize).div_ceil(8));
        let back = FlowField::read_binary(&buf[..]).unwrap();
        assert_eq!(back.valid, f.valid);
        for (a, b) in back.flow.as_slice().iter().zip(f.flow.as_slice()) {
            assert!((a - b).norm() < 1e-4);
        }
        assert!(FlowField::read_binary(&buf[..20]).is_err());
    }

    #[test]
    fn downsample_rescales_uniform_flow() {
        let f = uniform_coarse(16, 16, Vector2::new(8.0, -4.0));
        let d = f.downsample(8);
        assert_eq!((d.width(), d.height()), (2, 2));
        assert!(d.flow.as_slice().iter().all(|x| *x == Vector2::new(1.0, -0.5)));
    }
}
