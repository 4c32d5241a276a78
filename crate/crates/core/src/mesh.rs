//! Triangle meshes: validation, OBJ/PLY ingestion, procedural shapes and
//! surface sampling.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length unit of a mesh file; vertices are converted to meters at load.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshUnit {
    #[default]
    M,
    Mm,
}

impl MeshUnit {
    pub fn to_meters(self) -> f64 {
        match self {
            MeshUnit::M => 1.0,
            MeshUnit::Mm => 1e-3,
        }
    }
}

impl FromStr for MeshUnit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" => Ok(MeshUnit::M),
            "mm" => Ok(MeshUnit::Mm),
            other => Err(Error::InvalidArgument(format!("unknown mesh unit `{other}` (expected m or mm)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    /// Surface samples used by losses and metrics.
    pub surface_points: Option<Vec<Vector3<f64>>>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Mesh { vertices, triangles, surface_points: None };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        if self.triangles.is_empty() {
            return Err(Error::InvalidMesh("mesh has no triangles".into()));
        }
        let n = self.vertices.len();
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidMesh(format!("triangle {t:?} indexes past {n} vertices")));
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh("non-finite vertex".into()));
        }
        Ok(())
    }

    pub fn scaled(mut self, s: f64) -> Self {
        for v in &mut self.vertices {
            *v *= s;
        }
        if let Some(pts) = &mut self.surface_points {
            for p in pts {
                *p *= s;
            }
        }
        self
    }

    pub fn translated(mut self, d: Vector3<f64>) -> Self {
        for v in &mut self.vertices {
            *v += d;
        }
        if let Some(pts) = &mut self.surface_points {
            for p in pts {
                *p += d;
            }
        }
        self
    }

    /// Appends another mesh's geometry.
    pub fn merge(&mut self, other: &Mesh) {
        let off = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles.extend(other.triangles.iter().map(|t| [t[0] + off, t[1] + off, t[2] + off]));
        self.surface_points = None;
    }

    pub fn triangle(&self, i: usize) -> [Vector3<f64>; 3] {
        let t = self.triangles[i];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    pub fn aabb(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|i| triangle_area(&self.triangle(i))).sum()
    }

    /// Area-weighted uniform samples on the surface, deterministic per seed.
    pub fn sample_surface(&self, count: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for i in 0..self.triangles.len() {
            total += triangle_area(&self.triangle(i));
            cumulative.push(total);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let x = rng.random::<f64>() * total;
                let i = cumulative.partition_point(|&c| c < x).min(cumulative.len() - 1);
                let [a, b, c] = self.triangle(i);
                let (mut r1, mut r2): (f64, f64) = (rng.random(), rng.random());
                if r1 + r2 > 1.0 {
                    r1 = 1.0 - r1;
                    r2 = 1.0 - r2;
                }
                a + (b - a) * r1 + (c - a) * r2
            })
            .collect()
    }

    /// Attaches `count` surface samples (see [`Mesh::sample_surface`]).
    pub fn with_surface_points(mut self, count: usize, seed: u64) -> Self {
        self.surface_points = Some(self.sample_surface(count, seed));
        self
    }

    /// Surface samples, or the vertices when none were attached.
    pub fn model_points(&self) -> &[Vector3<f64>] {
        self.surface_points.as_deref().unwrap_or(&self.vertices)
    }

    /// Distance from `p` to the closest point of any triangle.
    pub fn distance_to_surface(&self, p: &Vector3<f64>) -> f64 {
        (0..self.triangles.len())
            .map(|i| {
                let [a, b, c] = self.triangle(i);
                (closest_point_on_triangle(p, &a, &b, &c) - p).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }

    // --- procedural shapes ---

    /// Axis-aligned box centered at the origin.
    pub fn cuboid(size: Vector3<f64>) -> Mesh {
        let h = size / 2.0;
        let vertices: Vec<_> = (0..8)
            .map(|i| {
                Vector3::new(
                    if i & 1 == 0 { -h.x } else { h.x },
                    if i & 2 == 0 { -h.y } else { h.y },
                    if i & 4 == 0 { -h.z } else { h.z },
                )
            })
            .collect();
        let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
        let triangles = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
        Mesh { vertices, triangles, surface_points: None }
    }

    /// Latitude/longitude sphere centered at the origin.
    pub fn uv_sphere(radius: f64, rings: usize, segments: usize) -> Mesh {
        let rings = rings.max(2);
        let segments = segments.max(3);
        let mut vertices = vec![Vector3::new(0.0, 0.0, radius)];
        for r in 1..rings {
            let theta = std::f64::consts::PI * r as f64 / rings as f64;
            for s in 0..segments {
                let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
                vertices.push(radius * Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()));
            }
        }
        vertices.push(Vector3::new(0.0, 0.0, -radius));
        let south = vertices.len() - 1;
        let ring = |r: usize, s: usize| 1 + (r - 1) * segments + s % segments;
        let mut triangles = Vec::new();
        for s in 0..segments {
            triangles.push([0, ring(1, s), ring(1, s + 1)]);
            triangles.push([south, ring(rings - 1, s + 1), ring(rings - 1, s)]);
        }
        for r in 1..rings - 1 {
            for s in 0..segments {
                triangles.push([ring(r, s), ring(r + 1, s), ring(r + 1, s + 1)]);
                triangles.push([ring(r, s), ring(r + 1, s + 1), ring(r, s + 1)]);
            }
        }
        Mesh { vertices, triangles, surface_points: None }
    }

    /// Rectangle in the plane `z = 0`, spanning `[x0, x1] x [y0, y1]`.
    pub fn rectangle(x0: f64, x1: f64, y0: f64, y1: f64) -> Mesh {
        let vertices = vec![
            Vector3::new(x0, y0, 0.0),
            Vector3::new(x1, y0, 0.0),
            Vector3::new(x1, y1, 0.0),
            Vector3::new(x0, y1, 0.0),
        ];
        Mesh { vertices, triangles: vec![[0, 1, 2], [0, 2, 3]], surface_points: None }
    }

    /// An asymmetric bracket about 10 cm across: a slab, an upright post and
    /// an offset tab. No rotational symmetry, distinct silhouettes.
    pub fn bracket() -> Mesh {
        let mut m = Mesh::cuboid(Vector3::new(0.10, 0.06, 0.02));
        m.merge(&Mesh::cuboid(Vector3::new(0.02, 0.06, 0.07)).translated(Vector3::new(-0.04, 0.0, 0.045)));
        m.merge(&Mesh::cuboid(Vector3::new(0.04, 0.025, 0.02)).translated(Vector3::new(0.03, 0.04, 0.02)));
        let (lo, hi) = m.aabb();
        m.translated(-(lo + hi) / 2.0)
    }

    /// Cylinder along z; rotationally symmetric, used for symmetry tests.
    pub fn cylinder(radius: f64, height: f64, segments: usize) -> Mesh {
        let segments = segments.max(3);
        let h = height / 2.0;
        let mut vertices = vec![Vector3::new(0.0, 0.0, h), Vector3::new(0.0, 0.0, -h)];
        for s in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push(Vector3::new(radius * phi.cos(), radius * phi.sin(), h));
            vertices.push(Vector3::new(radius * phi.cos(), radius * phi.sin(), -h));
        }
        let top = |s: usize| 2 + 2 * (s % segments);
        let bot = |s: usize| 3 + 2 * (s % segments);
        let mut triangles = Vec::new();
        for s in 0..segments {
            triangles.push([0, top(s), top(s + 1)]);
            triangles.push([1, bot(s + 1), bot(s)]);
            triangles.push([top(s), bot(s), bot(s + 1)]);
            triangles.push([top(s), bot(s + 1), top(s + 1)]);
        }
        Mesh { vertices, triangles, surface_points: None }
    }

    // --- file formats ---

    /// Loads an `.obj` or `.ply` file, converting to meters.
    pub fn load(path: &Path, unit: MeshUnit) -> Result<Mesh> {
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        let file = std::fs::File::open(path)?;
        let mesh = match ext.as_deref() {
            Some("obj") => Mesh::read_obj(BufReader::new(file))?,
            Some("ply") => Mesh::read_ply(BufReader::new(file))?,
            _ => return Err(Error::Format(format!("unsupported mesh extension: {}", path.display()))),
        };
        Ok(mesh.scaled(unit.to_meters()))
    }

    /// ASCII OBJ: `v` and `f` records; polygons are fan-triangulated.
    pub fn read_obj(reader: impl BufRead) -> Result<Mesh> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let bad = |what: &str| Error::Format(format!("obj line {}: {what}", lineno + 1));
            match parts.next() {
                Some("v") => {
                    let xyz: Vec<f64> = parts
                        .take(3)
                        .map(|p| p.parse::<f64>().map_err(|_| bad("bad vertex coordinate")))
                        .collect::<Result<_>>()?;
                    if xyz.len() != 3 {
                        return Err(bad("vertex needs 3 coordinates"));
                    }
                    vertices.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
                }
                Some("f") => {
                    let idx: Vec<usize> = parts
                        .map(|p| {
                            let first = p.split('/').next().unwrap_or("");
                            let i: i64 = first.parse().map_err(|_| bad("bad face index"))?;
                            let resolved = if i > 0 { i - 1 } else { vertices.len() as i64 + i };
                            if resolved < 0 {
                                return Err(bad("face index out of range"));
                            }
                            Ok(resolved as usize)
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(bad("face needs at least 3 vertices"));
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Mesh::new(vertices, triangles)
    }

    pub fn write_obj(&self, mut w: impl Write) -> Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }

    /// Binary little-endian PLY with `vertex` (x, y, z plus any scalar
    /// properties) and `face` (list of indices) elements.
    pub fn read_ply(mut reader: impl BufRead) -> Result<Mesh> {
        let mut line = String::new();
        let mut next_line = |r: &mut dyn BufRead| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("ply: unexpected end of header".into()));
            }
            Ok(line.trim().to_string())
        };
        if next_line(&mut reader)? != "ply" {
            return Err(Error::Format("ply: missing magic".into()));
        }
        struct Element {
            name: String,
            count: usize,
            props: Vec<PlyProp>,
        }
        let mut elements: Vec<Element> = Vec::new();
        loop {
            let l = next_line(&mut reader)?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            match toks.as_slice() {
                ["format", fmt, _] => {
                    if *fmt != "binary_little_endian" {
                        return Err(Error::Format(format!("ply: unsupported format {fmt}")));
                    }
                }
                ["element", name, count] => elements.push(Element {
                    name: name.to_string(),
                    count: count.parse().map_err(|_| Error::Format("ply: bad element count".into()))?,
                    props: Vec::new(),
                }),
                ["property", "list", count_ty, item_ty, name] => {
                    let el = elements.last_mut().ok_or_else(|| Error::Format("ply: property before element".into()))?;
                    el.props.push(PlyProp::List {
                        count: PlyScalar::parse(count_ty)?,
                        item: PlyScalar::parse(item_ty)?,
                        name: name.to_string(),
                    });
                }
                ["property", ty, name] => {
                    let el = elements.last_mut().ok_or_else(|| Error::Format("ply: property before element".into()))?;
                    el.props.push(PlyProp::Scalar { ty: PlyScalar::parse(ty)?, name: name.to_string() });
                }
                ["end_header"] => break,
                _ => {}
            }
        }
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for el in &elements {
            for _ in 0..el.count {
                let mut xyz = [0.0f64; 3];
                for prop in &el.props {
                    match prop {
                        PlyProp::Scalar { ty, name } => {
                            let v = ty.read(&mut reader)?;
                            match name.as_str() {
                                "x" => xyz[0] = v,
                                "y" => xyz[1] = v,
                                "z" => xyz[2] = v,
                                _ => {}
                            }
                        }
                        PlyProp::List { count, item, name } => {
                            let n = count.read(&mut reader)? as usize;
                            let mut idx = Vec::with_capacity(n);
                            for _ in 0..n {
                                idx.push(item.read(&mut reader)?);
                            }
                            if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                                if n < 3 {
                                    return Err(Error::Format("ply: face with fewer than 3 vertices".into()));
                                }
                                if idx.iter().any(|&i| i < 0.0) {
                                    return Err(Error::Format("ply: negative face index".into()));
                                }
                                for k in 1..n - 1 {
                                    triangles.push([idx[0] as usize, idx[k] as usize, idx[k + 1] as usize]);
                                }
                            }
                        }
                    }
                }
                if el.name == "vertex" {
                    vertices.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
                }
            }
        }
        Mesh::new(vertices, triangles)
    }

    pub fn write_ply(&self, mut w: impl Write) -> Result<()> {
        write!(
            w,
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
            self.vertices.len(),
            self.triangles.len()
        )?;
        for v in &self.vertices {
            for c in v.iter() {
                w.write_all(&(*c as f32).to_le_bytes())?;
            }
        }
        for t in &self.triangles {
            w.write_all(&[3u8])?;
            for &i in t {
                w.write_all(&(i as i32).to_le_bytes())?;
            }
        }
        Ok(())
    }
}

enum PlyProp {
    Scalar { ty: PlyScalar, name: String },
    List { count: PlyScalar, item: PlyScalar, name: String },
}

#[derive(Clone, Copy)]
enum PlyScalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyScalar {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => PlyScalar::I8,
            "uchar" | "uint8" => PlyScalar::U8,
            "short" | "int16" => PlyScalar::I16,
            "ushort" | "uint16" => PlyScalar::U16,
            "int" | "int32" => PlyScalar::I32,
            "uint" | "uint32" => PlyScalar::U32,
            "float" | "float32" => PlyScalar::F32,
            "double" | "float64" => PlyScalar::F64,
            other => return Err(Error::Format(format!("ply: unknown type {other}"))),
        })
    }

    fn read(self, r: &mut impl Read) -> Result<f64> {
        fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b).map_err(|_| Error::Format("ply: truncated body".into()))?;
            Ok(b)
        }
        Ok(match self {
            PlyScalar::I8 => i8::from_le_bytes(take(r)?) as f64,
            PlyScalar::U8 => u8::from_le_bytes(take(r)?) as f64,
            PlyScalar::I16 => i16::from_le_bytes(take(r)?) as f64,
            PlyScalar::U16 => u16::from_le_bytes(take(r)?) as f64,
            PlyScalar::I32 => i32::from_le_bytes(take(r)?) as f64,
            PlyScalar::U32 => u32::from_le_bytes(take(r)?) as f64,
            PlyScalar::F32 => f32::from_le_bytes(take(r)?) as f64,
            PlyScalar::F64 => f64::from_le_bytes(take(r)?),
        })
    }
}

pub fn triangle_area(t: &[Vector3<f64>; 3]) -> f64 {
    0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm()
}

/// Maximum pairwise distance over a point set.
pub fn diameter(points: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

/// Closest point to `p` on triangle `abc`.
pub fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}
