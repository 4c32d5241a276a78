use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use flowpose::geom::{Camera, Pose};
use flowpose::losses::PerturbSpec;
use flowpose::mesh::{diameter, Mesh, MeshUnit};
use flowpose::render::BBox;
use flowpose::scene::{derive_seed, generate_scene, write_depth, write_pgm, DepthUnit, Scene, SceneSpec};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::output::write_atomic;

pub const SCENE_SCHEMA: &str = "flowpose-scene v1";
const BUILTINS: [&str; 3] = ["bracket", "box", "cylinder"];
const MODEL_POINTS: usize = 500;

/// A built-in mesh name or a mesh file with its unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshRef {
    pub source: String,
    pub unit: MeshUnit,
}

impl MeshRef {
    /// Resolves file paths to absolute ones so scene files work from any directory.
    pub fn new(source: &str, unit: MeshUnit) -> Result<Self> {
        if BUILTINS.contains(&source) {
            return Ok(MeshRef { source: source.into(), unit });
        }
        let path = fs::canonicalize(source).with_context(|| format!("mesh `{source}` is neither built in nor a file"))?;
        Ok(MeshRef { source: path.to_string_lossy().into_owned(), unit })
    }

    pub fn load(&self) -> Result<Mesh> {
        let mesh = match self.source.as_str() {
            "bracket" => Mesh::bracket(),
            "box" => Mesh::cuboid(Vector3::new(0.08, 0.06, 0.04)),
            "cylinder" => Mesh::cylinder(0.03, 0.08, 32),
            path => Mesh::load(Path::new(path), self.unit)?,
        };
        Ok(mesh.with_surface_points(MODEL_POINTS, 1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthNoise {
    /// Gaussian std, meters.
    pub std: f64,
    /// Fraction of object pixels without depth.
    pub missing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccluderSpec {
    /// Fraction of the silhouette to hide.
    pub fraction: f64,
}

/// Everything needed to rebuild a scene, plus the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub schema: String,
    pub id: usize,
    pub seed: u64,
    pub mesh: MeshRef,
    /// Model diameter in meters.
    pub diameter: f64,
    pub camera: Camera,
    pub distance: (f64, f64),
    pub gt_pose: Pose,
    pub perturbation: PerturbSpec,
    pub occluder: Option<OccluderSpec>,
    pub depth_noise: DepthNoise,
    pub bbox: BBox,
}

impl SceneConfig {
    fn spec(&self) -> SceneSpec {
        SceneSpec {
            camera: self.camera,
            distance: self.distance,
            occlusion: self.occluder.as_ref().map_or(0.0, |o| o.fraction),
            depth_noise: self.depth_noise.std,
            depth_missing: self.depth_noise.missing,
        }
    }

    /// Starting pose of hypothesis `h`.
    pub fn initial_pose(&self, h: usize) -> Result<Pose> {
        Ok(self.perturbation.apply(&self.gt_pose, derive_seed(self.seed, &[1, h as u64]))?)
    }
}

/// A scene loaded for processing.
pub struct LoadedScene {
    pub config: SceneConfig,
    pub mesh: Mesh,
    pub scene: Scene,
}

/// Generator parameters of `gen`.
#[derive(Clone, Debug)]
pub struct GenParams {
    pub count: usize,
    pub mesh: MeshRef,
    pub spec: SceneSpec,
    pub perturbation: PerturbSpec,
    pub seed: u64,
}

pub fn scene_dir_name(id: usize) -> String {
    format!("scene_{id:06}")
}

/// Writes `count` scene directories; a seed that does not show the object
/// is skipped in favor of the next one.
pub fn generate(params: &GenParams, out: &Path) -> Result<Vec<SceneConfig>> {
    ensure!(params.count > 0, "scene count must be positive");
    let mesh = params.mesh.load()?;
    let dia = diameter(&mesh.vertices);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut configs = Vec::with_capacity(params.count);
    let mut attempt = 0u64;
    while configs.len() < params.count {
        ensure!(attempt < 100 * params.count as u64, "too many invisible scenes; check the camera and distance");
        let seed = derive_seed(params.seed, &[attempt]);
        attempt += 1;
        let Ok(scene) = generate_scene(&mesh, &params.spec, seed) else { continue };
        let config = SceneConfig {
            schema: SCENE_SCHEMA.into(),
            id: configs.len(),
            seed,
            mesh: params.mesh.clone(),
            diameter: dia,
            camera: params.spec.camera,
            distance: params.spec.distance,
            gt_pose: scene.gt_pose,
            perturbation: params.perturbation.clone(),
            occluder: (params.spec.occlusion > 0.0).then(|| OccluderSpec { fraction: params.spec.occlusion }),
            depth_noise: DepthNoise { std: params.spec.depth_noise, missing: params.spec.depth_missing },
            bbox: scene.bbox,
        };
        write_scene(&out.join(scene_dir_name(config.id)), &config, &scene)?;
        configs.push(config);
    }
    Ok(configs)
}

fn write_scene(dir: &Path, config: &SceneConfig, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_vec_pretty(config)?;
    json.push(b'\n');
    write_atomic(&dir.join("scene.json"), &json)?;
    let mut buf = Vec::new();
    write_depth(&mut buf, scene.observation.depth.as_ref().expect("generated scenes have depth"), DepthUnit::Meters)?;
    write_atomic(&dir.join("depth.bin"), &buf)?;
    buf.clear();
    write_pgm(&mut buf, &scene.observation.mask)?;
    write_atomic(&dir.join("mask.pgm"), &buf)?;
    buf.clear();
    write_pgm(&mut buf, &scene.full_mask)?;
    write_atomic(&dir.join("full_mask.pgm"), &buf)?;
    Ok(())
}

/// Scene directories under `root`, sorted by name.
pub fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading scene directory {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("scene.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no scenes under {}", root.display());
    }
    Ok(dirs)
}

pub fn read_config(dir: &Path) -> Result<SceneConfig> {
    let path = dir.join("scene.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let config: SceneConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    ensure!(config.schema == SCENE_SCHEMA, "{}: unknown schema `{}`", path.display(), config.schema);
    Ok(config)
}

/// Rebuilds the scene from its seed; generation is deterministic, so this
/// reproduces the written observation.
pub fn load(dir: &Path) -> Result<LoadedScene> {
    let config = read_config(dir)?;
    let mesh = config.mesh.load()?;
    let scene = generate_scene(&mesh, &config.spec(), config.seed)?;
    let (dr, dt) = scene.gt_pose.error_to(&config.gt_pose);
    ensure!(dr < 1e-9 && dt < 1e-9, "{}: ground truth does not match its seed", dir.display());
    Ok(LoadedScene { config, mesh, scene })
}
