use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use flowpose::mesh::MeshUnit;
use flowpose::refine::ProviderKind;
use flowpose::scene::{default_camera, SceneSpec};

mod config;
mod evaluate;
mod output;
mod run;
mod scenes;

use config::RunConfig;
use run::{CoarseStrategy, InitKind, RefineMode, ScorerKind};

/// Render-and-compare pose estimation on synthetic scenes.
#[derive(Debug, Parser)]
#[command(name = "flowpose", version, about)]
struct Cli {
    /// Root seed; every scene and hypothesis derives its own from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// JSON file with `refiner`, `coarse`, `perturb` and `thresholds` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scenes.
    Gen(GenArgs),
    /// Coarse hypothesis search.
    Coarse(CoarseArgs),
    /// Refine every scene and write traces, a summary and estimates.
    Refine(RefineArgs),
    /// Run named variants on the same scenes and tabulate them.
    Ablate(AblateArgs),
    /// Average recall of an estimates file.
    Eval(EvalArgs),
    /// Error-vs-iteration series from refine traces.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Built-in mesh (bracket, box, cylinder) or an OBJ/PLY file.
    #[arg(long, default_value = "bracket")]
    mesh: String,
    #[arg(long, default_value = "m")]
    mesh_unit: MeshUnit,
    /// Fraction of the silhouette hidden by an occluder.
    #[arg(long, default_value_t = 0.0)]
    occlusion: f64,
    /// Sensor depth noise std (m).
    #[arg(long, default_value_t = 0.0)]
    depth_noise: f64,
    /// Fraction of object depth pixels dropped.
    #[arg(long, default_value_t = 0.0)]
    depth_missing: f64,
    #[arg(long, default_value_t = 0.4)]
    min_distance: f64,
    #[arg(long, default_value_t = 0.8)]
    max_distance: f64,
}

#[derive(Debug, Args)]
struct SceneArgs {
    /// Scene directory (defaults to <out>/scenes).
    #[arg(long)]
    scenes: Option<PathBuf>,
}

impl SceneArgs {
    fn root(&self, out: &Path) -> PathBuf {
        self.scenes.clone().unwrap_or_else(|| out.join("scenes"))
    }
}

#[derive(Debug, Args)]
struct RefineOpts {
    #[arg(long, value_enum, default_value = "silhouette")]
    scorer: ScorerKind,
    /// oracle, corrupted, identity or correlation.
    #[arg(long)]
    provider: Option<ProviderKind>,
    /// Flow noise std in level pixels (corrupted provider).
    #[arg(long)]
    noise: Option<f64>,
    /// Outlier fraction (corrupted provider).
    #[arg(long)]
    outliers: Option<f64>,
    #[arg(long)]
    n_hypotheses: Option<usize>,
    #[arg(long, value_enum, default_value = "perturbed")]
    init: InitKind,
    #[arg(long)]
    depth_refine: bool,
}

impl RefineOpts {
    fn apply(&self, config: &mut RunConfig) -> Result<()> {
        let r = &mut config.refiner;
        if let Some(p) = self.provider {
            r.provider = p;
        }
        if let Some(x) = self.noise {
            r.noise_px = x;
        }
        if let Some(x) = self.outliers {
            r.outlier_frac = x;
        }
        if let Some(n) = self.n_hypotheses {
            r.n_hypotheses = n;
        }
        if self.depth_refine {
            r.depth_refine = true;
        }
        r.validate()?;
        Ok(())
    }

    fn mode(&self, seed: u64) -> RefineMode {
        RefineMode { scorer: self.scorer, init: self.init, root_seed: seed }
    }
}

#[derive(Debug, Args)]
struct CoarseArgs {
    #[command(flatten)]
    scenes: SceneArgs,
    #[arg(long, value_enum, default_value = "silhouette")]
    scorer: ScorerKind,
    /// Hypotheses kept per scene.
    #[arg(long, default_value_t = 10)]
    n_hypotheses: usize,
    /// Score a plain grid of this many rotations instead of the two-stage search.
    #[arg(long)]
    naive: Option<usize>,
}

#[derive(Debug, Args)]
struct RefineArgs {
    #[command(flatten)]
    scenes: SceneArgs,
    #[command(flatten)]
    opts: RefineOpts,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    scenes: SceneArgs,
    /// Comma-separated variants, e.g. naive-576,gmm-144,gmm-208 or cascade-1,cascade-2.
    #[arg(long, value_delimiter = ',', required = true)]
    variants: Vec<String>,
    #[command(flatten)]
    opts: RefineOpts,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    estimates: PathBuf,
    #[command(flatten)]
    scenes: SceneArgs,
    /// Refine trace directory; adds error-vs-iteration series.
    #[arg(long)]
    traces: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Trace directory (defaults to <out>/refine/traces).
    #[arg(long)]
    traces: Option<PathBuf>,
}

/// Fatal errors are invalid input; the count is of per-scene failures.
fn run(cli: Cli) -> Result<usize> {
    if let Some(jobs) = cli.jobs {
        anyhow::ensure!(jobs > 0, "--jobs must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let mut config = RunConfig::load(cli.config.as_deref())?;
    let out = &cli.out;
    match &cli.command {
        Command::Gen(a) => {
            let spec = SceneSpec {
                camera: default_camera(),
                distance: (a.min_distance, a.max_distance),
                occlusion: a.occlusion,
                depth_noise: a.depth_noise,
                depth_missing: a.depth_missing,
            };
            anyhow::ensure!(
                0.0 < a.min_distance && a.min_distance <= a.max_distance,
                "distance range must be positive and ordered"
            );
            anyhow::ensure!((0.0..1.0).contains(&a.occlusion), "--occlusion must be in [0, 1)");
            anyhow::ensure!((0.0..=1.0).contains(&a.depth_missing), "--depth-missing must be in [0, 1]");
            anyhow::ensure!(a.depth_noise >= 0.0, "--depth-noise must be nonnegative");
            let params = scenes::GenParams {
                count: a.count,
                mesh: scenes::MeshRef::new(&a.mesh, a.mesh_unit)?,
                spec,
                perturbation: config.perturb.clone(),
                seed: cli.seed,
            };
            let dir = out.join("scenes");
            let written = scenes::generate(&params, &dir)?;
            println!("wrote {} scenes to {} (model diameter {:.4} m)", written.len(), dir.display(), written[0].diameter);
            Ok(0)
        }
        Command::Coarse(a) => {
            let strategy = match a.naive {
                Some(count) => CoarseStrategy::Grid { count },
                None => CoarseStrategy::Mixture { m: config.coarse.m },
            };
            run::cmd_coarse(&a.scenes.root(out), out, &config, strategy, a.n_hypotheses, a.scorer, cli.seed)
        }
        Command::Refine(a) => {
            a.opts.apply(&mut config)?;
            run::cmd_refine(&a.scenes.root(out), out, &config, a.opts.mode(cli.seed))
        }
        Command::Ablate(a) => {
            a.opts.apply(&mut config)?;
            let settings = run::AblateSettings {
                variants: &a.variants,
                n: 10,
                mode: a.opts.mode(cli.seed),
            };
            run::cmd_ablate(&a.scenes.root(out), out, &config, &settings)
        }
        Command::Eval(a) => {
            evaluate::cmd_eval(&a.estimates, &a.scenes.root(out), out, &config)?;
            if let Some(t) = &a.traces {
                evaluate::write_series(t, &out.join("eval"))?;
            }
            Ok(0)
        }
        Command::Report(a) => {
            let traces = a.traces.clone().unwrap_or_else(|| out.join("refine").join("traces"));
            evaluate::cmd_report(&traces, out)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} scene(s) failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
