//! `headsynth` command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgGroup, Args, CommandFactory, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, Counts, DatasetConfig, DatasetKind};
use crate::deform::{build_sf_grid, DeformationField};
use crate::error::{Error, Result};
use crate::headmodel::{procedural_rig, ExpressionCode, HeadRig, PoseCode, RigSpec, ShapeCode};
use crate::imageio::{save_png_gray, save_png_rgb};
use crate::render::{render_triplane, Camera, CameraParams, RenderSettings, Sphere};
use crate::spatial::TriangleBvh;
use crate::verify;

#[derive(Parser, Debug)]
#[command(name = "headsynth", version, about = "Deformable head fields, tri-plane rendering and synthetic 4D head data")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON configuration file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed of every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Procedural head rig.
    Rig {
        #[command(subcommand)]
        action: RigAction,
    },
    /// Render one sampled identity, motion and view to PNG files.
    Render(RenderArgs),
    /// Synthetic dataset generation and validation.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Run the invariant suite and print a pass/fail table.
    Verify {
        /// Only run checks whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Time closest-point queries, grid construction and a 64x64 render.
    Bench,
}

#[derive(Subcommand, Debug)]
enum RigAction {
    /// Write a procedural rig as JSON.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Use the reduced tessellation and code sizes.
        #[arg(long)]
        small: bool,
    },
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Output directory for the PNG files.
    #[arg(long)]
    out: PathBuf,
    /// Rig file; a procedural rig is built when omitted.
    #[arg(long)]
    rig: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Camera as JSON (`{"pitch":..,"yaw":..,"roll":..,"radius":..,"look_at":[..],"fov_deg":..}`);
    /// sampled when omitted.
    #[arg(long)]
    camera: Option<String>,
}

#[derive(Subcommand, Debug)]
enum DatasetAction {
    /// Generate a dynamic (multi-motion) or static (single-motion) set.
    Gen(DatasetGenArgs),
    /// Check a dataset directory; exits 1 when any check fails.
    Validate { dir: PathBuf },
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("kind").required(true).args(["dynamic", "static_set"])))]
struct DatasetGenArgs {
    #[arg(long)]
    dynamic: bool,
    #[arg(long = "static")]
    static_set: bool,
    #[arg(long)]
    ids: usize,
    /// Motions per identity (dynamic sets only; static sets always use 1).
    #[arg(long)]
    motions: Option<usize>,
    #[arg(long)]
    views: usize,
    #[arg(long)]
    out: PathBuf,
    /// Rig file; a procedural rig is built when omitted.
    #[arg(long)]
    rig: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub rig: RigSpec,
    pub dataset: DatasetConfig,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::parse(path.display().to_string(), format!("line {} column {}", e.line(), e.column()), e.to_string())
        })
    }
}

/// Failure classes mapped to exit codes.
enum Failure {
    /// A check or validation reported a failure (exit 1).
    Check,
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

/// Parses `argv` (program name first) and runs the command. Returns the process exit code:
/// 0 on success, 1 on failure, 2 on usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            eprintln!("{e}");
            eprintln!("{}", Cli::command().render_help());
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Check) => 1,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve(cli: &Cli) -> Result<CliConfig> {
    let mut cfg = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    match &cli.command {
        Command::Render(a) => {
            if let Some(r) = a.resolution {
                cfg.dataset.resolution = r;
            }
        }
        Command::Dataset {
            action: DatasetAction::Gen(a),
        } => {
            if let Some(r) = a.resolution {
                cfg.dataset.resolution = r;
            }
            if let Some(p) = a.points {
                cfg.dataset.point_count = p;
            }
        }
        _ => {}
    }
    cfg.dataset.validate()?;
    cfg.rig.validate()?;
    Ok(cfg)
}

fn load_or_build_rig(path: Option<&Path>, cfg: &CliConfig) -> Result<HeadRig> {
    match path {
        Some(p) => HeadRig::load(p),
        None => procedural_rig(&cfg.rig, cfg.seed),
    }
}

fn execute(cli: Cli) -> std::result::Result<(), Failure> {
    let mut cfg = resolve(&cli)?;
    if let Command::Rig {
        action: RigAction::Gen { small: true, .. },
    } = &cli.command
    {
        cfg.rig = RigSpec::small();
    }
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(Error::Validation("--threads must be positive".into()).into());
        }
        // a global pool can only be installed once per process; later calls keep the first
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    println!(
        "config: {}",
        serde_json::to_string(&cfg).map_err(|e| Error::Validation(e.to_string()))?
    );
    match cli.command {
        Command::Rig {
            action: RigAction::Gen { out, .. },
        } => {
            let rig = procedural_rig(&cfg.rig, cfg.seed)?;
            rig.save(&out)?;
            println!("wrote {} ({} vertices, {} triangles)", out.display(), rig.vertex_count(), rig.triangles().len());
        }
        Command::Render(a) => render_command(&a, &cfg)?,
        Command::Dataset {
            action: DatasetAction::Gen(a),
        } => {
            let rig = load_or_build_rig(a.rig.as_deref(), &cfg)?;
            let kind = if a.static_set { DatasetKind::Static } else { DatasetKind::Dynamic };
            let motions = match kind {
                DatasetKind::Static => 1,
                DatasetKind::Dynamic => a.motions.unwrap_or(1),
            };
            let t = Instant::now();
            let counts = Counts {
                identities: a.ids,
                motions,
                views: a.views,
            };
            let plan = datagen::plan_dataset(kind, &rig, &cfg.dataset, counts, cfg.seed)?;
            let manifest = datagen::render_plan(&rig, &cfg.dataset, &plan, &a.out)?;
            println!(
                "wrote {} records to {} in {:.1}s",
                manifest.records.len(),
                a.out.display(),
                t.elapsed().as_secs_f64()
            );
        }
        Command::Dataset {
            action: DatasetAction::Validate { dir },
        } => {
            let report = datagen::validate_dataset(&dir);
            print!("{}", report.to_text());
            if !report.passed() {
                return Err(Failure::Check);
            }
        }
        Command::Verify { filter } => {
            let rows = verify::run_selected(cfg.seed, |n| filter.as_deref().is_none_or(|f| n.contains(f)));
            print!("{}", verify::format_table(&rows));
            if rows.is_empty() || rows.iter().any(|r| !r.passed) {
                return Err(Failure::Check);
            }
        }
        Command::Bench => bench(&cfg)?,
    }
    let _ = std::io::stdout().flush();
    Ok(())
}

fn render_command(a: &RenderArgs, cfg: &CliConfig) -> Result<()> {
    let rig = load_or_build_rig(a.rig.as_deref(), cfg)?;
    let d = &cfg.dataset;
    let counts = Counts {
        identities: 1,
        motions: 1,
        views: 1,
    };
    let mut plan = datagen::plan_dataset(DatasetKind::Dynamic, &rig, d, counts, cfg.seed)?;
    if let Some(text) = &a.camera {
        plan.cameras[0][0][0] = serde_json::from_str::<CameraParams>(text)
            .map_err(|e| Error::parse("--camera", format!("column {}", e.column()), e.to_string()))?;
    }
    let geo = datagen::HeadGeometry::from_rig(&rig, d.canonical_jaw)?;
    let id = &plan.identities[0];
    let baked = datagen::bake_identity(&datagen::head_appearance(&geo, id.seed, d.head_sharpness), d.bake_resolution, d.channels)?;
    let m = &plan.motions[0][0];
    let field = DeformationField::new(&rig, &id.shape, &m.expression, &m.pose, d.field_config())?;
    let out = datagen::render_record(&rig, d, &plan, &baked, &field, 0, 0, 0)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let (w, h) = (out.lr.width, out.lr.height);
    save_png_rgb(a.out.join("lr.png"), w, h, &out.lr.rgb())?;
    save_png_rgb(a.out.join("foreground.png"), w, h, &out.foreground.rgb())?;
    save_png_gray(a.out.join("opacity.png"), w, h, &out.foreground.opacity)?;
    save_png_gray(a.out.join("mask.png"), w, h, &out.mask.mask)?;
    save_png_rgb(a.out.join("corr.png"), w, h, &out.mask.corr)?;
    let far = out.foreground.depth.iter().copied().fold(0.0, f64::max).max(1e-9);
    let depth: Vec<f64> = out.foreground.depth.iter().map(|z| z / far).collect();
    save_png_gray(a.out.join("depth.png"), w, h, &depth)?;
    println!("camera: {}", serde_json::to_string(&out.info.camera).unwrap_or_default());
    println!("wrote 6 images to {}", a.out.display());
    Ok(())
}

fn bench(cfg: &CliConfig) -> Result<()> {
    let rig = procedural_rig(&cfg.rig, cfg.seed)?;
    let mesh = rig.template_mesh();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let time = |label: &str, n: usize, f: &mut dyn FnMut()| {
        let t = Instant::now();
        f();
        let s = t.elapsed().as_secs_f64();
        println!("{label:<32} {:>10.3} ms total {:>12.3} us/op", s * 1e3, s * 1e6 / n as f64);
    };
    let bvh = TriangleBvh::build(&mesh);
    let queries: Vec<_> = (0..10_000)
        .map(|_| crate::geom::Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)))
        .collect();
    time("closest point (10^4 queries)", queries.len(), &mut || {
        for q in &queries {
            std::hint::black_box(bvh.closest(q));
        }
    });
    let a = ShapeCode::zeros(rig.shape_dim());
    let b = ExpressionCode::zeros(rig.expr_dim());
    let pose = PoseCode {
        neck: [0.1, 0.3, 0.0],
        ..PoseCode::zero()
    };
    let g = cfg.dataset.grid_resolution;
    let mut grid_result = Ok(());
    time(&format!("surface-field grid {g}^3"), 1, &mut || {
        grid_result = build_sf_grid(&rig, &a, &b, &pose, g).map(|_| ());
    });
    grid_result?;
    let spec = verify::probe_ellipsoid();
    let (tp, dec) = crate::triplane::bake_analytic(&crate::triplane::AnalyticField::Ellipsoid(spec), 128, 32)?;
    let cam = Camera::from_params(
        &CameraParams {
            pitch: 0.1,
            yaw: 0.3,
            roll: 0.0,
            radius: 4.0,
            look_at: [0.0; 3],
            fov_deg: 12.0,
        },
        64,
        64,
    )?;
    let settings = RenderSettings::new(Sphere::for_rig(&rig), cfg.seed);
    let mut render_result = Ok(());
    time("tri-plane render 64^2 (48+48)", 64 * 64, &mut || {
        render_result = render_triplane(&tp, &dec, &crate::deform::IdentityField, &cam, &settings).map(|_| ());
    });
    render_result?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["headsynth", "--bogus"]), 2);
        assert_eq!(run(["headsynth"]), 2);
        assert_eq!(run(["headsynth", "dataset", "gen", "--ids", "1"]), 2);
        let gen = ["headsynth", "dataset", "gen", "--ids", "1", "--views", "1", "--out", "unused"];
        assert_eq!(run(gen), 2);
        assert_eq!(run([&gen[..], &["--dynamic", "--static"]].concat()), 2);
        assert_eq!(run(["headsynth", "--help"]), 0);
    }

    #[test]
    fn config_overlay() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 9, "dataset": {"resolution": 24}}"#).unwrap();
        let cli = Cli::try_parse_from(["headsynth", "--config", p.to_str().unwrap(), "--seed", "3", "verify"]).unwrap();
        let cfg = resolve(&cli).unwrap();
        assert_eq!((cfg.seed, cfg.dataset.resolution, cfg.dataset.point_count), (3, 24, 4000));
        std::fs::write(&p, r#"{"sead": 9}"#).unwrap();
        assert!(matches!(resolve(&cli), Err(Error::Parse { .. })));
    }
}
