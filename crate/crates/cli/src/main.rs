use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use dvr::camera::parse_cameras;
use dvr::field::{FieldParams, LatentCode};
use dvr::gradcheck::{check_loss_gradient, default_depth_check, REL_TOL};
use dvr::mesh::{extract_mesh, load_mesh, save_mesh, Bounds};
use dvr::raycast::{render, RaySamplingConfig};
use dvr::rng::{stream, stream_rng};
use dvr::scene::{evaluate_mesh, generate_dataset, load_dataset, save_dataset, scene_registry, CameraRig, MultiViewDataset, View};
use dvr::trainer::{fit, TrainConfig, TrainState};

#[derive(Parser)]
#[command(name = "dvr", version, about = "Fit implicit occupancy and texture fields to posed images")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view dataset of a built-in scene.
    GenerateScene {
        #[arg(long)]
        scene: String,
        #[arg(long, default_value_t = 24)]
        views: usize,
        #[arg(long, default_value_t = 128)]
        res: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Leave out depth maps.
        #[arg(long)]
        no_depth: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a field on a dataset directory.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// TOML training config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a checkpoint from a camera, as a one-view dataset directory.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// Camera file in the dataset format.
        #[arg(long)]
        camera: PathBuf,
        /// Which camera of the file to use.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Samples per ray.
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the surface of a checkpoint as an OBJ or PLY mesh.
    ExtractMesh {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 128)]
        res: usize,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        /// Half extent of the cube that is meshed.
        #[arg(long, default_value_t = 1.0)]
        bounds: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic depth gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also check the photometric and depth loss gradient.
        #[arg(long)]
        loss: bool,
    },
    /// Chamfer-L1 of a mesh against a built-in scene.
    Eval {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        scene: String,
        #[arg(long, default_value_t = 300_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure caused by bad user input rather than by the computation.
#[derive(Debug)]
struct InvalidInput(String);

impl std::fmt::Display for InvalidInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvalidInput {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    InvalidInput(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<InvalidInput>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<dvr::Error>() {
            return match e {
                dvr::Error::Invalid(_) | dvr::Error::Format { .. } => 1,
                dvr::Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
                _ => 2,
            };
        }
    }
    2
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    version: &'static str,
    threads: usize,
    seed: Option<u64>,
    config: Option<serde_json::Value>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started_unix_s: f64,
    elapsed_s: Option<f64>,
}

struct Run {
    manifest: RunManifest,
    path: PathBuf,
    start: Instant,
}

impl Run {
    fn begin(command: &str, path: PathBuf, seed: Option<u64>, inputs: Vec<PathBuf>) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let manifest = RunManifest {
            command: command.into(),
            args: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            threads: rayon::current_num_threads(),
            seed,
            config: None,
            inputs,
            outputs: Vec::new(),
            started_unix_s: started,
            elapsed_s: None,
        };
        Run { manifest, path, start: Instant::now() }
    }

    fn write(&self) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))?;
        }
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&self.path, text).with_context(|| format!("{}", self.path.display()))
    }

    fn finish(mut self, outputs: Vec<PathBuf>) -> Result<()> {
        self.manifest.outputs = outputs;
        self.manifest.elapsed_s = Some(self.start.elapsed().as_secs_f64());
        self.write()
    }
}

/// Manifest location for a file output.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn load_field(path: &Path) -> Result<(FieldParams, LatentCode)> {
    let f = fs::File::open(path).map_err(|e| dvr::Error::Io { path: path.into(), source: e })?;
    FieldParams::read_checkpoint(BufReader::new(f)).map_err(|msg| dvr::Error::Format { path: path.into(), msg }.into())
}

fn generate_scene(scene: &str, views: usize, res: usize, seed: u64, no_depth: bool, out: &Path) -> Result<()> {
    let factory = *scene_registry().get(scene).map_err(|e| invalid(e.to_string()))?;
    if views == 0 {
        return Err(invalid("--views must be at least 1"));
    }
    if res == 0 {
        return Err(invalid("--res must be at least 1"));
    }
    let run = Run::begin("generate-scene", out.join("manifest.json"), Some(seed), Vec::new());
    run.write()?;
    let mut rng = stream_rng(seed, stream::CAMERAS, 0);
    let mut data = generate_dataset(&factory(), &CameraRig::new(views, res), &mut rng)?;
    if no_depth {
        data.views.iter_mut().for_each(|v| v.depth = None);
    }
    save_dataset(&data, out)?;
    println!("wrote {views} views to {}", out.display());
    run.finish(vec![out.to_path_buf()])
}

fn fit_command(data_dir: &Path, config: Option<&Path>, resume: Option<&Path>, out: &Path) -> Result<()> {
    let config = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    config.validate()?;
    let data = load_dataset(data_dir)?;
    if config.weights.depth > 0.0 && !data.has_depth() {
        return Err(invalid(format!("{}: depth loss requested but the dataset has no depth maps", data_dir.display())));
    }
    let start = resume.map(TrainState::load).transpose()?;
    let mut inputs = vec![data_dir.to_path_buf()];
    inputs.extend(resume.map(Path::to_path_buf));
    let mut run = Run::begin("fit", out.join("manifest.json"), Some(config.seed), inputs);
    run.manifest.config = Some(serde_json::to_value(&config)?);
    run.write()?;
    let result = fit(&data, &config, start, Some(out))?;
    if let Some(last) = result.log.last() {
        println!("{last}");
    }
    println!("skipped iterations: {}", result.skipped);
    let mut outputs = result.checkpoints;
    outputs.push(out.join("metrics.log"));
    run.finish(outputs)
}

fn render_command(ckpt: &Path, camera: &Path, index: usize, n: usize, tau: f64, out: &Path) -> Result<()> {
    let (params, z) = load_field(ckpt)?;
    let text = fs::read_to_string(camera).map_err(|e| dvr::Error::Io { path: camera.into(), source: e })?;
    let cameras = parse_cameras(&text, camera)?;
    let cam = cameras.get(index).ok_or_else(|| invalid(format!("{}: no camera with index {index}", camera.display())))?;
    let cfg = RaySamplingConfig { n, tau, ..Default::default() };
    cfg.validate()?;
    let run = Run::begin("render", out.join("manifest.json"), None, vec![ckpt.into(), camera.into()]);
    run.write()?;
    let img = render(cam, &params, &z, &cfg, [1.0; 3])?;
    let view = View::from_rendering(cam.clone(), &img)?;
    save_dataset(&MultiViewDataset { views: vec![view] }, out)?;
    let hits = img.mask.iter().filter(|m| **m).count();
    println!("rendered {}x{} ({hits} surface pixels) to {}", img.width, img.height, out.display());
    run.finish(vec![out.to_path_buf()])
}

fn extract_command(ckpt: &Path, res: usize, tau: f64, bounds: f64, out: &Path) -> Result<()> {
    if res < 2 {
        return Err(invalid("--res must be at least 2"));
    }
    if !(bounds > 0.0) {
        return Err(invalid("--bounds must be positive"));
    }
    let (params, z) = load_field(ckpt)?;
    let run = Run::begin("extract-mesh", sidecar(out), None, vec![ckpt.into()]);
    run.write()?;
    let mesh = extract_mesh(&params, &z, res, tau, Bounds::cube(bounds))?;
    save_mesh(&mesh, out)?;
    println!("{} vertices, {} faces, watertight={}", mesh.vertices.len(), mesh.faces.len(), mesh.is_watertight());
    run.finish(vec![out.to_path_buf()])
}

fn gradcheck_command(seed: u64, loss: bool) -> Result<()> {
    let mut reports = vec![("depth", default_depth_check(seed)?)];
    if loss {
        reports.push(("loss", check_loss_gradient(seed, 16, 5, 8, 1e-4)?));
    }
    let mut ok = true;
    for (name, r) in &reports {
        println!("{name}: {r}");
        ok &= r.max_rel_err < REL_TOL;
    }
    if !ok {
        bail!("gradient check failed: max_rel_err >= {REL_TOL:e}");
    }
    Ok(())
}

fn eval_command(mesh: &Path, scene: &str, samples: usize, seed: u64) -> Result<()> {
    let factory = *scene_registry().get(scene).map_err(|e| invalid(e.to_string()))?;
    if samples == 0 {
        return Err(invalid("--samples must be at least 1"));
    }
    let mesh = load_mesh(mesh)?;
    if mesh.is_empty() {
        return Err(invalid("mesh has no faces"));
    }
    let mut rng = stream_rng(seed, stream::EVAL, 0);
    println!("{}", evaluate_mesh(&mesh, &factory(), samples, &mut rng)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("thread pool")?;
    }
    match cli.command {
        Command::GenerateScene { scene, views, res, seed, no_depth, out } => generate_scene(&scene, views, res, seed, no_depth, &out),
        Command::Fit { data, config, resume, out } => fit_command(&data, config.as_deref(), resume.as_deref(), &out),
        Command::Render { ckpt, camera, index, n, tau, out } => render_command(&ckpt, &camera, index, n, tau, &out),
        Command::ExtractMesh { ckpt, res, tau, bounds, out } => extract_command(&ckpt, res, tau, bounds, &out),
        Command::Gradcheck { seed, loss } => gradcheck_command(seed, loss),
        Command::Eval { mesh, scene, samples, seed } => eval_command(&mesh, &scene, samples, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("error: {}", msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
