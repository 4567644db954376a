//! Command-line front end: dataset synthesis, weight-map precomputation,
//! staged training, trajectory rendering, evaluation, and artifact
//! inspection.
//!
//! Progress goes to stderr; stdout carries the final machine-usable summary
//! lines. Exit status is 0 only when every requested output was written.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

use crate::dataset::{dataset_digest, load_dataset};
use crate::error::{Error, Result};
use crate::geometry::{spiral_trajectory, CameraModel};
use crate::metrics::{evaluate_sequence, EvalOptions};
use crate::render::RenderConfig;
use crate::sampling::cached_weight_maps;
use crate::synth::{ring_cameras, synthesize_dataset, RingSpec, SynthConfig, SyntheticSceneSpec};
use crate::train::{
    run_training, stage_stream, strategy_stages, Checkpoint, SamplingKind, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "dynvol",
    version,
    about = "Dynamic neural radiance fields at desk scale",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Training config as a key=value file; CLI flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for synthesis, training, and rendering.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: hardware parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Midpoint sampling everywhere: renders become pure functions.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene spec into a multi-view video dataset.
    Synth(SynthArgs),
    /// Compute and cache importance-sampling weight maps for a dataset.
    PrecomputeWeights(PrecomputeArgs),
    /// Run the staged training schedule on a dataset.
    Train(TrainArgs),
    /// Render images from a checkpoint along poses and times.
    Render(RenderArgs),
    /// Score a checkpoint against a dataset view.
    Eval(EvalArgs),
    /// Describe a dataset directory or checkpoint file.
    Info(InfoArgs),
}

#[derive(Args)]
struct RingArgs {
    /// Cameras on a ring around the origin (ignored when --cameras is given).
    #[arg(long, default_value_t = 4)]
    views: usize,
    #[arg(long, default_value_t = 4.0)]
    ring_radius: f64,
    #[arg(long, default_value_t = 1.0)]
    ring_z: f64,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 32)]
    image_size: u32,
    #[arg(long, default_value_t = 50.0)]
    fov_deg: f64,
}

impl RingArgs {
    fn cameras(&self) -> Vec<CameraModel> {
        ring_cameras(&RingSpec {
            count: self.views,
            radius: self.ring_radius,
            z: self.ring_z,
            width: self.image_size,
            height: self.image_size,
            fov_deg: self.fov_deg,
            ..RingSpec::default()
        })
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Scene spec JSON (bounds plus emitters).
    #[arg(long)]
    spec: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Frames to synthesize.
    #[arg(long, default_value_t = 1)]
    frames: usize,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// Camera list JSON; defaults to a ring.
    #[arg(long)]
    cameras: Option<PathBuf>,
    /// Comma-separated view ids reserved for evaluation.
    #[arg(long, value_delimiter = ',')]
    heldout: Vec<String>,
    /// Quadrature samples per ray for the analytic renderer.
    #[arg(long, default_value_t = 256)]
    samples_per_ray: usize,
    #[command(flatten)]
    ring: RingArgs,
}

#[derive(Args)]
struct PrecomputeArgs {
    dataset: PathBuf,
    /// Cache directory; defaults to DATASET/.weights.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Stage schedule preset: is*, isg, ist, uniform, nerf-t.
    #[arg(long)]
    strategy: Option<String>,
    /// Explicit stage list: name:iterations:lr[:param],...
    #[arg(long)]
    stages: Option<String>,
    /// Override any config key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    dataset: PathBuf,
    /// Checkpoint stem: stages write STEM.<i>.<name>.dynf, the final model
    /// STEM.dynf, losses STEM.loss.csv.
    #[arg(long, default_value = "model")]
    out: PathBuf,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    stages: Option<String>,
    /// Run only stages with these names, repeatable.
    #[arg(long = "only-stage")]
    only_stages: Vec<String>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Weight-map cache; defaults to DATASET/.weights.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Recompute weight maps in memory without touching a cache.
    #[arg(long)]
    no_cache: bool,
}

#[derive(Args)]
struct RenderArgs {
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Borrow cameras from this dataset directory; defaults to a ring.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Index of the pose to render from.
    #[arg(long, default_value_t = 0)]
    camera: usize,
    /// Render from N poses spiraling through the camera rig instead.
    #[arg(long)]
    spiral: Option<usize>,
    /// Time: a single value `1.5` or a range `0..15:0.5`.
    #[arg(long, default_value = "0")]
    time: String,
    #[arg(long)]
    n_coarse: Option<usize>,
    #[arg(long)]
    n_fine: Option<usize>,
    #[command(flatten)]
    ring: RingArgs,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    /// View to score; defaults to the dataset's first held-out view.
    #[arg(long)]
    view: Option<String>,
    /// Report CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also compute dynamic-region masked metrics.
    #[arg(long)]
    mask: bool,
    /// Evaluate every Nth frame instead of the length-based policy.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    n_coarse: Option<usize>,
    #[arg(long)]
    n_fine: Option<usize>,
}

#[derive(Args)]
struct InfoArgs {
    /// Dataset directory or .dynf checkpoint.
    path: PathBuf,
}

/// Parses and dispatches; the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let result = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        if let Err(e) = result {
            eprintln!("warning: thread pool already initialized: {e}");
        }
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(args) => cmd_synth(cli, args),
        Command::PrecomputeWeights(args) => cmd_precompute(cli, args),
        Command::Train(args) => cmd_train(cli, args),
        Command::Render(args) => cmd_render(cli, args),
        Command::Eval(args) => cmd_eval(cli, args),
        Command::Info(args) => cmd_info(args),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {what} {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("invalid {what}: {e}"),
    })
}

/// Builds the effective config: defaults, then the config file, then
/// strategy/stages presets, then the global seed, then --set overrides.
fn resolve_config(
    cli: &Cli,
    strategy: &Option<String>,
    stages: &Option<String>,
    sets: &[String],
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        cfg.merge_key_values(&text)?;
    }
    if let Some(name) = strategy {
        cfg.stages = strategy_stages(name)?;
    }
    if let Some(spec) = stages {
        cfg.apply_key("stages", spec)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    for pair in sets {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects KEY=VALUE, got `{pair}`"))
        })?;
        cfg.apply_key(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let spec: SyntheticSceneSpec = read_json(&args.spec, "scene spec")?;
    let cameras = match &args.cameras {
        Some(path) => {
            let cams: Vec<CameraModel> = read_json(path, "camera list")?;
            for c in &cams {
                c.validate()?;
            }
            cams
        }
        None => args.ring.cameras(),
    };
    let cfg = SynthConfig {
        frame_count: args.frames,
        samples_per_ray: args.samples_per_ray,
        fps: args.fps,
        seed: cli.seed.unwrap_or(0),
        heldout: args.heldout.clone(),
    };
    let video = synthesize_dataset(&spec, &cameras, &cfg, Some(&args.out))?;
    let cam = &video.cameras[0];
    println!(
        "synthesized views={} frames={} resolution={}x{} heldout={} out={}",
        video.view_count(),
        video.frame_count(),
        cam.width,
        cam.height,
        video.heldout.len(),
        args.out.display()
    );
    Ok(())
}

fn weight_cache_dir(dataset: &Path, cache: &Option<PathBuf>) -> PathBuf {
    cache
        .clone()
        .unwrap_or_else(|| dataset.join(".weights"))
}

fn cmd_precompute(cli: &Cli, args: &PrecomputeArgs) -> Result<()> {
    let cfg = resolve_config(cli, &args.strategy, &args.stages, &args.sets)?;
    cfg.validate()?;
    let video = load_dataset(&args.dataset)?;
    let digest = dataset_digest(&args.dataset)?;
    let cache = weight_cache_dir(&args.dataset, &args.cache);
    let mut wrote = 0usize;
    for stage in &cfg.stages {
        let Some(settings) = crate::train::stage_weight_settings(stage, &cfg) else {
            continue;
        };
        let (set, from_cache) =
            cached_weight_maps(&cache.join(&stage.name), &video, &settings, digest)?;
        let maps = set.maps.iter().map(|v| v.len()).sum::<usize>();
        eprintln!(
            "stage {}: {} weight maps {}",
            stage.name,
            maps,
            if from_cache { "cached" } else { "computed" }
        );
        wrote += maps;
    }
    println!("weights ready: {wrote} maps in {}", cache.display());
    Ok(())
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(cli, &args.strategy, &args.stages, &args.sets)?;
    if !args.only_stages.is_empty() {
        cfg.stages.retain(|s| args.only_stages.contains(&s.name));
        if cfg.stages.is_empty() {
            return Err(Error::Config(format!(
                "--only-stage filters {:?} left no stages",
                args.only_stages
            )));
        }
    }
    cfg.validate()?;
    let video = load_dataset(&args.dataset)?;
    let digest = dataset_digest(&args.dataset)?;
    let cache = if args.no_cache {
        None
    } else {
        Some(weight_cache_dir(&args.dataset, &args.cache))
    };
    for (si, stage) in cfg.stages.iter().enumerate() {
        eprintln!(
            "stage {si}: {} ({} iterations, lr {:.1e}, {})",
            stage.name,
            stage.iterations,
            stage.learning_rate,
            match stage.sampling {
                SamplingKind::Isg => format!("isg gamma={:.1e}", stage.param),
                SamplingKind::Ist => format!("ist alpha={:.1e}", stage.param),
                SamplingKind::Uniform => "uniform".to_string(),
            }
        );
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let loss_path = args.out.with_extension("loss.csv");
    let mut loss_csv = String::from("stage,stage_name,iteration,loss\n");
    let config_digest = cfg.digest();
    let render = RenderConfig {
        n_coarse: cfg.n_coarse,
        n_fine: cfg.n_fine,
        deterministic: cli.deterministic,
    };
    let seed = cfg.seed;
    let out = args.out.clone();
    let mut failures: Vec<Error> = Vec::new();
    let model = run_training(
        &cfg,
        &video,
        cache.as_deref(),
        digest,
        |si, model, stats| {
            use std::fmt::Write as _;
            for (i, loss) in stats.loss_curve.iter().enumerate() {
                let _ = writeln!(loss_csv, "{si},{},{i},{loss:.8e}", stats.name);
            }
            let final_loss = stats.loss_curve.last().copied().unwrap_or(f64::NAN);
            eprintln!(
                "stage {si} ({}) done: {} iterations in {:.1}s, final loss {:.3e}",
                stats.name, stats.iterations, stats.wall_seconds, final_loss
            );
            let ckpt = Checkpoint::from_model(
                model,
                si as u32 + 1,
                render,
                config_digest,
                &stage_stream(seed, si + 1),
            );
            let path = out.with_extension(format!("{si}.{}.dynf", stats.name));
            if let Err(e) = ckpt.save(&path) {
                failures.push(e);
            }
        },
    )?;
    if let Some(e) = failures.into_iter().next() {
        return Err(e);
    }
    std::fs::write(&loss_path, loss_csv)
        .map_err(|e| Error::io(loss_path.display().to_string(), e))?;
    let final_path = args.out.with_extension("dynf");
    Checkpoint::from_model(
        &model,
        cfg.stages.len() as u32,
        render,
        config_digest,
        &stage_stream(seed, cfg.stages.len()),
    )
    .save(&final_path)?;
    println!("checkpoint written to {}", final_path.display());
    println!("loss log written to {}", loss_path.display());
    Ok(())
}

/// `1.5` or `START..END:STEP` (step defaults to 1), inclusive of END when it
/// lands on the grid.
fn parse_time_spec(spec: &str) -> Result<Vec<f64>> {
    let bad = |why: &str| Error::Config(format!("time spec `{spec}`: {why}"));
    if let Some((start, rest)) = spec.split_once("..") {
        let start: f64 = start
            .trim()
            .parse()
            .map_err(|_| bad("start is not a number"))?;
        let (end_str, step_str) = match rest.split_once(':') {
            Some((e, s)) => (e, Some(s)),
            None => (rest, None),
        };
        let end: f64 = end_str
            .trim()
            .parse()
            .map_err(|_| bad("end is not a number"))?;
        let step: f64 = match step_str {
            Some(s) => s.trim().parse().map_err(|_| bad("step is not a number"))?,
            None => 1.0,
        };
        if !(step > 0.0) {
            return Err(bad("step must be > 0"));
        }
        if end < start {
            return Err(bad("end is before start"));
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| start + i as f64 * step).collect())
    } else {
        Ok(vec![spec
            .trim()
            .parse()
            .map_err(|_| bad("not a number"))?])
    }
}

fn cmd_render(cli: &Cli, args: &RenderArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.to_model()?;
    model.validate()?;
    let cameras = match &args.dataset {
        Some(dir) => {
            let cams: Vec<CameraModel> = read_json(&dir.join("cameras.json"), "camera list")?;
            for c in &cams {
                c.validate()?;
            }
            cams
        }
        None => args.ring.cameras(),
    };
    let poses = match args.spiral {
        Some(n) => spiral_trajectory(&cameras, n)?,
        None => {
            let cam = cameras.get(args.camera).ok_or_else(|| {
                Error::Config(format!(
                    "camera index {} out of range ({} cameras)",
                    args.camera,
                    cameras.len()
                ))
            })?;
            vec![cam.clone()]
        }
    };
    let t_max = (model.t_count - 1) as f64;
    let times: Vec<f64> = parse_time_spec(&args.time)?
        .into_iter()
        .map(|t| {
            if t < 0.0 || t > t_max {
                eprintln!("warning: time {t} outside [0, {t_max}], clamped");
                t.clamp(0.0, t_max)
            } else {
                t
            }
        })
        .collect();
    let mut render = ckpt.render;
    if let Some(n) = args.n_coarse {
        render.n_coarse = n;
    }
    if let Some(n) = args.n_fine {
        render.n_fine = n;
    }
    render.deterministic |= cli.deterministic;
    let seed = cli.seed.unwrap_or(0);
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let mut written = 0usize;
    for (pi, pose) in poses.iter().enumerate() {
        for &t in &times {
            let img = model.render_image(pose, &render, seed, pi as u64, t)?;
            let path = args.out.join(format!("pose{pi:03}_t{t:08.3}.png"));
            img.save_png(&path)?;
            written += 1;
        }
    }
    println!("wrote {written} images to {}", args.out.display());
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.to_model()?;
    model.validate()?;
    let video = load_dataset(&args.dataset)?;
    let view_id = match &args.view {
        Some(id) => id.clone(),
        None => video
            .heldout
            .first()
            .cloned()
            .ok_or_else(|| Error::Config("dataset has no held-out view; pass --view".into()))?,
    };
    if !video.heldout.contains(&view_id) {
        eprintln!("warning: view {view_id} was trained on; scores are not novel-view scores");
    }
    if model.t_count != video.frame_count() && model.latents().is_some() {
        eprintln!(
            "warning: model has {} latent rows, dataset has {} frames",
            model.t_count,
            video.frame_count()
        );
    }
    let mut render = ckpt.render;
    if let Some(n) = args.n_coarse {
        render.n_coarse = n;
    }
    if let Some(n) = args.n_fine {
        render.n_fine = n;
    }
    // Reports should be reproducible: evaluation always renders midpoint.
    render.deterministic = true;
    let opts = EvalOptions {
        stride: args.stride,
        dynamic_mask: args.mask,
        render,
        seed: cli.seed.unwrap_or(0),
        ..EvalOptions::default()
    };
    let report = evaluate_sequence(&model, &video, &view_id, &opts)?;
    if let Some(path) = &args.out {
        std::fs::write(path, report.to_csv())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        eprintln!("report written to {}", path.display());
    }
    println!(
        "view={} frames={} mean_psnr_db={:.4} mean_dssim={:.6}",
        report.view_id,
        report.frames.len(),
        report.mean_psnr_db,
        report.mean_dssim
    );
    Ok(())
}

fn cmd_info(args: &InfoArgs) -> Result<()> {
    if args.path.is_dir() {
        let video = load_dataset(&args.path)?;
        let digest = dataset_digest(&args.path)?;
        let cam = &video.cameras[0];
        println!(
            "dataset views={} frames={} resolution={}x{} fps={} heldout=[{}] digest={digest:016x}",
            video.view_count(),
            video.frame_count(),
            cam.width,
            cam.height,
            video.fps,
            video.heldout.join(",")
        );
        return Ok(());
    }
    let ckpt = Checkpoint::load(&args.path)?;
    let params: usize = ckpt.tensors.iter().map(|t| t.len()).sum();
    println!(
        "checkpoint kind={:?} width={} t_count={} encoding=(l_x={},l_d={},l_t={},include={}) \
         stage_cursor={} render=(coarse={},fine={},deterministic={}) config_digest={:016x} \
         params={} latents={}",
        ckpt.kind,
        ckpt.width,
        ckpt.t_count,
        ckpt.encoding.l_x,
        ckpt.encoding.l_d,
        ckpt.encoding.l_t,
        ckpt.encoding.include_input,
        ckpt.stage_cursor,
        ckpt.render.n_coarse,
        ckpt.render.n_fine,
        ckpt.render.deterministic,
        ckpt.config_digest,
        params,
        ckpt.latents.len()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_specs_expand_inclusively() {
        assert_eq!(parse_time_spec("0").unwrap(), vec![0.0]);
        assert_eq!(parse_time_spec("2.5").unwrap(), vec![2.5]);
        assert_eq!(
            parse_time_spec("0..1:0.25").unwrap(),
            vec![0.0, 0.25, 0.5, 0.75, 1.0]
        );
        assert_eq!(parse_time_spec("3..5").unwrap(), vec![3.0, 4.0, 5.0]);
        assert!(parse_time_spec("5..3").is_err());
        assert!(parse_time_spec("0..1:0").is_err());
        assert!(parse_time_spec("x..1").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
