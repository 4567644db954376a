//! The training loop: coarse+fine photometric loss, Adam with a boosted
//! latent learning rate and unit-sphere projection, and the hierarchical
//! keyframe-then-full schedule with importance-sampled ray batches.
//!
//! A run is an ordered list of stages. Keyframe stages train a latent table
//! holding only every K-th frame; moving to a full stage linearly expands
//! that table to all frames. Each stage resets optimizer moments (its
//! learning rate and latent shape differ) and draws from its own RNG stream,
//! so a (config, seed) pair fully determines the result.

pub mod adam;
pub mod checkpoint;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::time::Instant;

use crate::dataset::{Fnv1a, MultiViewVideo};
use crate::error::{Error, Result};
use crate::field::grad::gradients;
use crate::field::{Conditioning, EncodingConfig, FieldModel};
use crate::render::{derive_stream, RenderConfig};
use crate::sampling::{
    build_frame_sampler, cached_weight_maps, IstClamp, RayPick, Strategy, WeightMapSet,
    WeightSettings,
};

pub use adam::{adam_step, expand_latent_table, keyframe_frames, project_latents, AdamParams, OptimizerState};
pub use checkpoint::Checkpoint;

const TAG_STAGE: u64 = 0x5354;

/// The RNG stream stage `index` draws from under `seed`; checkpoints store
/// the next stage's stream so a resumed schedule continues identically.
pub fn stage_stream(seed: u64, index: usize) -> ChaCha8Rng {
    derive_stream(&[seed, TAG_STAGE, index as u64])
}

/// ‖C_coarse − C‖² + ‖C_fine − C‖² for one ray; no other terms.
pub fn photometric_loss(pred_coarse: [f64; 3], pred_fine: [f64; 3], target: [f64; 3]) -> f64 {
    let sq = |p: [f64; 3]| {
        (0..3)
            .map(|i| (p[i] - target[i]) * (p[i] - target[i]))
            .sum::<f64>()
    };
    sq(pred_coarse) + sq(pred_fine)
}

/// The batch objective: per-ray losses summed.
pub fn batch_photometric_loss(
    pred_coarse: &[[f64; 3]],
    pred_fine: &[[f64; 3]],
    targets: &[[f64; 3]],
) -> f64 {
    pred_coarse
        .iter()
        .zip(pred_fine)
        .zip(targets)
        .map(|((c, f), t)| photometric_loss(*c, *f, *t))
        .sum()
}

/// How a stage draws its ray batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingKind {
    Isg,
    Ist,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub name: String,
    /// Restrict training to frames at multiples of K, latents keyframe-sized.
    pub keyframe_only: bool,
    pub sampling: SamplingKind,
    pub iterations: usize,
    pub learning_rate: f64,
    /// γ for ISG stages, α for IST stages; unused for uniform.
    pub param: f64,
}

impl StageConfig {
    /// Builds a stage from its schedule name with that stage's default
    /// sampling parameter.
    pub fn named(name: &str, iterations: usize, learning_rate: f64) -> Result<StageConfig> {
        let (keyframe_only, sampling, param) = match name {
            "keyframe" => (true, SamplingKind::Isg, 1e-3),
            "keyframe_uniform" => (true, SamplingKind::Uniform, 0.0),
            "full_isg" => (false, SamplingKind::Isg, 2e-2),
            "full_ist" => (false, SamplingKind::Ist, 0.1),
            "full_uniform" => (false, SamplingKind::Uniform, 0.0),
            other => {
                return Err(Error::Config(format!(
                    "unknown stage name `{other}` (expected keyframe, keyframe_uniform, full_isg, full_ist, full_uniform)"
                )))
            }
        };
        Ok(StageConfig {
            name: name.to_string(),
            keyframe_only,
            sampling,
            iterations,
            learning_rate,
            param,
        })
    }
}

/// Full training schedule plus the model/render hyperparameters the loop
/// needs. Parsed from a key=value file; every key has a CLI override.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub width: usize,
    /// Latent dimension D; 0 selects the time-conditioned baseline.
    pub latent_dim: usize,
    pub encoding: EncodingConfig,
    pub stages: Vec<StageConfig>,
    pub keyframe_interval: usize,
    /// Rays per iteration.
    pub batch: usize,
    pub latent_lr_mult: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub ist_window: usize,
    pub ist_clamp: IstClamp,
    pub downsample: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            width: 64,
            latent_dim: 32,
            encoding: EncodingConfig::default(),
            stages: strategy_stages("is*").unwrap(),
            keyframe_interval: 30,
            batch: 1024,
            latent_lr_mult: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            n_coarse: 32,
            n_fine: 64,
            ist_window: 25,
            ist_clamp: IstClamp::Lower,
            downsample: 4,
        }
    }
}

/// The named schedules: `is*` is keyframe → ISG → IST; `isg`/`ist` drop one
/// full stage; `uniform` keeps the hierarchy but samples uniformly; `nerf-t`
/// is a single uniform stage for the time-conditioned baseline.
pub fn strategy_stages(preset: &str) -> Result<Vec<StageConfig>> {
    let named = |specs: &[(&str, usize, f64)]| -> Result<Vec<StageConfig>> {
        specs
            .iter()
            .map(|&(n, i, lr)| StageConfig::named(n, i, lr))
            .collect()
    };
    match preset {
        "is*" | "istar" => named(&[
            ("keyframe", 3000, 5e-4),
            ("full_isg", 2500, 1e-4),
            ("full_ist", 1000, 1e-5),
        ]),
        "isg" => named(&[("keyframe", 3000, 5e-4), ("full_isg", 2500, 1e-4)]),
        "ist" => named(&[("keyframe", 3000, 5e-4), ("full_ist", 2500, 1e-5)]),
        "uniform" => named(&[
            ("keyframe_uniform", 3000, 5e-4),
            ("full_uniform", 2500, 1e-4),
        ]),
        "nerf-t" => named(&[("full_uniform", 5500, 5e-4)]),
        other => Err(Error::Config(format!(
            "unknown strategy `{other}` (expected is*, isg, ist, uniform, nerf-t)"
        ))),
    }
}

fn parse_flag<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

/// Stage list grammar: comma-separated `name:iterations:lr[:param]`.
pub fn parse_stages(text: &str) -> Result<Vec<StageConfig>> {
    let mut stages = Vec::new();
    for part in text.split(',') {
        let fields: Vec<&str> = part.trim().split(':').collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::Config(format!(
                "stage `{part}` must be name:iterations:lr[:param]"
            )));
        }
        let mut stage = StageConfig::named(
            fields[0],
            parse_flag("iterations", fields[1])?,
            parse_flag("lr", fields[2])?,
        )?;
        if let Some(p) = fields.get(3) {
            stage.param = parse_flag("param", p)?;
        }
        stages.push(stage);
    }
    Ok(stages)
}

impl TrainConfig {
    /// Applies one `key = value` assignment; shared by the config file parser
    /// and CLI overrides.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "width" => self.width = parse_flag(key, value)?,
            "latent_dim" => self.latent_dim = parse_flag(key, value)?,
            "l_x" => self.encoding.l_x = parse_flag(key, value)?,
            "l_d" => self.encoding.l_d = parse_flag(key, value)?,
            "l_t" => self.encoding.l_t = parse_flag(key, value)?,
            "include_input" => self.encoding.include_input = parse_flag(key, value)?,
            "strategy" => self.stages = strategy_stages(value)?,
            "stages" => self.stages = parse_stages(value)?,
            "keyframe_interval" => self.keyframe_interval = parse_flag(key, value)?,
            "batch" => self.batch = parse_flag(key, value)?,
            "latent_lr_mult" => self.latent_lr_mult = parse_flag(key, value)?,
            "beta1" => self.beta1 = parse_flag(key, value)?,
            "beta2" => self.beta2 = parse_flag(key, value)?,
            "epsilon" => self.epsilon = parse_flag(key, value)?,
            "seed" => self.seed = parse_flag(key, value)?,
            "n_coarse" => self.n_coarse = parse_flag(key, value)?,
            "n_fine" => self.n_fine = parse_flag(key, value)?,
            "ist_window" => self.ist_window = parse_flag(key, value)?,
            "ist_clamp" => {
                self.ist_clamp = match value {
                    "lower" => IstClamp::Lower,
                    "upper" => IstClamp::Upper,
                    other => {
                        return Err(Error::Config(format!(
                            "ist_clamp must be lower or upper, got `{other}`"
                        )))
                    }
                }
            }
            "downsample" => self.downsample = parse_flag(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines skipped.
    pub fn from_key_values(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        cfg.merge_key_values(text)?;
        Ok(cfg)
    }

    pub fn merge_key_values(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.apply_key(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 {
            return Err(Error::Config("width must be ≥ 2".into()));
        }
        if self.keyframe_interval < 1 {
            return Err(Error::Config("keyframe_interval must be ≥ 1".into()));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch must be ≥ 1".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if !(self.latent_lr_mult > 0.0) {
            return Err(Error::Config("latent_lr_mult must be > 0".into()));
        }
        let mut seen_full = false;
        for stage in &self.stages {
            if !(stage.learning_rate > 0.0) {
                return Err(Error::Config(format!(
                    "stage {} learning rate must be > 0",
                    stage.name
                )));
            }
            if stage.sampling != SamplingKind::Uniform && !(stage.param > 0.0) {
                return Err(Error::Config(format!(
                    "stage {} sampling parameter must be > 0",
                    stage.name
                )));
            }
            if stage.keyframe_only {
                if seen_full {
                    return Err(Error::Config(
                        "keyframe stages must precede full stages".into(),
                    ));
                }
                if self.latent_dim == 0 {
                    return Err(Error::Config(
                        "keyframe stages require the latent-conditioned model".into(),
                    ));
                }
            } else {
                seen_full = true;
            }
        }
        Ok(())
    }

    /// Canonical serialization, hashed: two configs agree iff their digests
    /// do (modulo FNV collisions).
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        use std::fmt::Write as _;
        let _ = write!(
            s,
            "width={};latent_dim={};l_x={};l_d={};l_t={};include_input={};K={};batch={};\
             latent_lr_mult={};beta1={};beta2={};epsilon={};seed={};n_coarse={};n_fine={};\
             ist_window={};ist_clamp={:?};downsample={};stages=",
            self.width,
            self.latent_dim,
            self.encoding.l_x,
            self.encoding.l_d,
            self.encoding.l_t,
            self.encoding.include_input,
            self.keyframe_interval,
            self.batch,
            self.latent_lr_mult,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.seed,
            self.n_coarse,
            self.n_fine,
            self.ist_window,
            self.ist_clamp,
            self.downsample,
        );
        for stage in &self.stages {
            let _ = write!(
                s,
                "[{}:{}:{}:{}:{}:{:?}]",
                stage.name,
                stage.keyframe_only,
                stage.iterations,
                stage.learning_rate,
                stage.param,
                stage.sampling
            );
        }
        s
    }

    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.update(self.canonical_string().as_bytes());
        h.finish()
    }

    pub fn adam_params(&self, stage: &StageConfig) -> AdamParams {
        AdamParams {
            learning_rate: stage.learning_rate,
            latent_lr_mult: self.latent_lr_mult,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
            deterministic: false,
        }
    }
}

/// Per-stage record: the loss curve (batch mean per iteration) and wall time.
#[derive(Debug, Clone)]
pub struct StageStats {
    pub name: String,
    pub iterations: usize,
    pub loss_curve: Vec<f64>,
    pub wall_seconds: f64,
}

/// Uniform pixel addressing over training views, the fallback and baseline
/// batch source.
struct UniformRays {
    layout: Vec<(usize, u32, u32)>,
    total: usize,
}

impl UniformRays {
    fn new(video: &MultiViewVideo) -> Self {
        let layout: Vec<(usize, u32, u32)> = video
            .training_views()
            .into_iter()
            .map(|v| {
                let cam = &video.cameras[v];
                (v, cam.width, cam.height)
            })
            .collect();
        let total = layout.iter().map(|&(_, w, h)| (w * h) as usize).sum();
        UniformRays { layout, total }
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> RayPick {
        let mut idx = rng.random_range(0..self.total);
        for &(view, w, h) in &self.layout {
            let pixels = (w * h) as usize;
            if idx < pixels {
                return RayPick {
                    view,
                    row: idx as u32 / w,
                    col: idx as u32 % w,
                };
            }
            idx -= pixels;
        }
        unreachable!("index drawn within total pixel count");
    }
}

/// Runs one stage in place. `weights` must be present for ISG/IST sampling.
/// The caller hands a latent table already sized for the stage (keyframe
/// count for keyframe stages, T otherwise).
pub fn run_stage(
    model: &mut FieldModel,
    video: &MultiViewVideo,
    weights: Option<&WeightMapSet>,
    stage: &StageConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StageStats> {
    let t_video = video.frame_count();
    let eligible: Vec<usize> = if stage.keyframe_only {
        if model.latents().is_none() {
            return Err(Error::Config(
                "keyframe stages require the latent-conditioned model".into(),
            ));
        }
        keyframe_frames(cfg.keyframe_interval, t_video)
    } else {
        (0..t_video).collect()
    };
    if stage.keyframe_only && model.t_count != eligible.len() {
        return Err(Error::Invalid(format!(
            "keyframe stage expects {} latent rows, model has {}",
            eligible.len(),
            model.t_count
        )));
    }
    if !stage.keyframe_only && model.t_count != t_video {
        return Err(Error::Invalid(format!(
            "full stage expects {} latent rows, model has {}",
            t_video, model.t_count
        )));
    }
    if stage.sampling != SamplingKind::Uniform && weights.is_none() {
        return Err(Error::Config(format!(
            "stage {} needs precomputed weight maps",
            stage.name
        )));
    }
    let uniform = UniformRays::new(video);
    let rcfg = cfg.render_config();
    let hp = cfg.adam_params(stage);
    let mut state = OptimizerState::new(model);
    let mut loss_curve = Vec::with_capacity(stage.iterations);
    let start = Instant::now();
    for iter in 0..stage.iterations {
        let slot = rng.random_range(0..eligible.len());
        let video_frame = eligible[slot];
        // Latent rows are keyframe-indexed during keyframe stages.
        let latent_frame = if stage.keyframe_only { slot } else { video_frame };
        let picks: Vec<RayPick> = match (stage.sampling, weights) {
            (SamplingKind::Uniform, _) => (0..cfg.batch).map(|_| uniform.pick(rng)).collect(),
            (_, Some(set)) => build_frame_sampler(set, video_frame)?.draw_rays(cfg.batch, rng),
            (_, None) => unreachable!("checked above"),
        };
        let mut batch = Vec::with_capacity(picks.len());
        for pick in picks {
            let cam = &video.cameras[pick.view];
            let ray = cam.generate_ray(pick.view as u32, pick.row, pick.col, video_frame as u32)?;
            let px = video.frame(pick.view, video_frame).get(pick.row, pick.col);
            let target = [px[0] as f64, px[1] as f64, px[2] as f64];
            batch.push(crate::field::grad::prepare_ray(
                model,
                ray,
                target,
                latent_frame,
                &rcfg,
                Some(rng),
            )?);
        }
        let grads = gradients(model, &batch)?;
        if !grads.loss.is_finite() {
            return Err(Error::NonFiniteSample {
                quantity: "training loss",
                index: iter,
            });
        }
        adam_step(model, &grads, &mut state, &hp)?;
        loss_curve.push(grads.loss);
    }
    Ok(StageStats {
        name: stage.name.clone(),
        iterations: stage.iterations,
        wall_seconds: start.elapsed().as_secs_f64(),
        loss_curve,
    })
}

/// The weight-map settings a stage samples under; `None` for uniform stages.
pub fn stage_weight_settings(stage: &StageConfig, cfg: &TrainConfig) -> Option<WeightSettings> {
    match stage.sampling {
        SamplingKind::Uniform => None,
        SamplingKind::Isg => Some(WeightSettings {
            strategy: Strategy::Isg,
            gamma: stage.param,
            downsample: cfg.downsample,
            ..WeightSettings::default()
        }),
        SamplingKind::Ist => Some(WeightSettings {
            strategy: Strategy::Ist,
            alpha: stage.param,
            ist_window: cfg.ist_window,
            ist_clamp: cfg.ist_clamp,
            seed: cfg.seed,
            ..WeightSettings::default()
        }),
    }
}

/// Builds the stage's weight maps, through the cache when a directory is
/// given. Uniform stages need none.
fn stage_weights(
    stage: &StageConfig,
    cfg: &TrainConfig,
    video: &MultiViewVideo,
    cache_dir: Option<&Path>,
    dataset_digest: u64,
) -> Result<Option<WeightMapSet>> {
    let Some(settings) = stage_weight_settings(stage, cfg) else {
        return Ok(None);
    };
    let set = match cache_dir {
        Some(dir) => cached_weight_maps(&dir.join(&stage.name), video, &settings, dataset_digest)?.0,
        None => settings.compute(video)?,
    };
    Ok(Some(set))
}

/// The initial model for a schedule: latent tables start keyframe-sized when
/// the first stage is a keyframe stage.
pub fn initial_model(cfg: &TrainConfig, t_video: usize) -> Result<FieldModel> {
    let first_keyframe = cfg.stages.first().map_or(false, |s| s.keyframe_only);
    if cfg.latent_dim == 0 {
        return FieldModel::new_nerf_t(cfg.width, cfg.encoding, t_video, cfg.seed);
    }
    let t_model = if first_keyframe {
        keyframe_frames(cfg.keyframe_interval, t_video).len()
    } else {
        t_video
    };
    FieldModel::new_dynerf(cfg.width, cfg.encoding, t_model, cfg.latent_dim, cfg.seed)
}

/// Runs every stage in order, expanding the latent table at the first
/// keyframe → full transition. `on_stage(index, model, stats)` fires after
/// each stage, for checkpointing and logging.
pub fn run_training(
    cfg: &TrainConfig,
    video: &MultiViewVideo,
    cache_dir: Option<&Path>,
    dataset_digest: u64,
    mut on_stage: impl FnMut(usize, &FieldModel, &StageStats),
) -> Result<FieldModel> {
    cfg.validate()?;
    let t_video = video.frame_count();
    let mut model = initial_model(cfg, t_video)?;
    for (si, stage) in cfg.stages.iter().enumerate() {
        if !stage.keyframe_only && model.latents().is_some() && model.t_count != t_video {
            let expanded =
                expand_latent_table(model.latents().unwrap(), cfg.keyframe_interval, t_video)?;
            model.conditioning = Conditioning::Latent(expanded);
            model.t_count = t_video;
        }
        let weights = stage_weights(stage, cfg, video, cache_dir, dataset_digest)?;
        let mut rng = stage_stream(cfg.seed, si);
        let stats = run_stage(&mut model, video, weights.as_ref(), stage, cfg, &mut rng)?;
        on_stage(si, &model, &stats);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_at_pose;
    use crate::geometry::CameraModel;
    use crate::imagebuf::Image;
    use nalgebra::Vector3;

    #[test]
    fn loss_examples_hold() {
        let t = [0.3, 0.4, 0.5];
        assert_eq!(photometric_loss(t, t, t), 0.0);
        let off = [0.4, 0.4, 0.5];
        assert!((photometric_loss(off, t, t) - 0.01).abs() < 1e-12);
        let single = photometric_loss(off, t, t);
        let batch = batch_photometric_loss(&[off, off], &[t, t], &[t, t]);
        assert!((batch - 2.0 * single).abs() < 1e-12);
    }

    #[test]
    fn stage_presets_follow_the_schedule() {
        let stages = strategy_stages("is*").unwrap();
        assert_eq!(stages.len(), 3);
        assert!(stages[0].keyframe_only);
        assert_eq!(stages[0].param, 1e-3);
        assert_eq!(stages[1].sampling, SamplingKind::Isg);
        assert_eq!(stages[1].param, 2e-2);
        assert_eq!(stages[2].sampling, SamplingKind::Ist);
        assert_eq!(stages[2].param, 0.1);
        assert!((stages[0].learning_rate - 5e-4).abs() < 1e-18);
        assert!((stages[1].learning_rate - 1e-4).abs() < 1e-18);
        assert!((stages[2].learning_rate - 1e-5).abs() < 1e-18);
        assert_eq!(strategy_stages("nerf-t").unwrap().len(), 1);
        assert!(strategy_stages("mystery").is_err());
    }

    #[test]
    fn key_value_text_round_trips_into_config() {
        let text = "
            # toy schedule
            width = 16
            latent_dim = 8
            batch = 64   # rays
            keyframe_interval = 5
            stages = keyframe:10:1e-3,full_isg:5:1e-4:3e-2
            seed = 7
        ";
        let cfg = TrainConfig::from_key_values(text).unwrap();
        assert_eq!(cfg.width, 16);
        assert_eq!(cfg.latent_dim, 8);
        assert_eq!(cfg.batch, 64);
        assert_eq!(cfg.keyframe_interval, 5);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.stages.len(), 2);
        assert_eq!(cfg.stages[1].param, 3e-2);
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_config_text_is_rejected() {
        assert!(TrainConfig::from_key_values("nonsense = 3").is_err());
        assert!(TrainConfig::from_key_values("width 16").is_err());
        assert!(TrainConfig::from_key_values("width = sixteen").is_err());
        assert!(TrainConfig::from_key_values("stages = what:3").is_err());

        let mut cfg = TrainConfig::default();
        cfg.keyframe_interval = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.stages = parse_stages("full_isg:10:1e-4,keyframe:10:1e-3").unwrap();
        assert!(cfg.validate().is_err(), "keyframe after full must fail");

        let mut cfg = TrainConfig::default();
        cfg.latent_dim = 0;
        assert!(cfg.validate().is_err(), "nerf-t cannot run keyframe stages");
        cfg.stages = strategy_stages("nerf-t").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn digest_tracks_content_not_formatting() {
        let a = TrainConfig::from_key_values("width = 16\nseed = 3").unwrap();
        let b = TrainConfig::from_key_values("seed=3 # comment\nwidth   =   16").unwrap();
        let c = TrainConfig::from_key_values("width = 16\nseed = 4").unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    fn tiny_video(t_count: usize, side: u32) -> MultiViewVideo {
        // Two cameras looking at the origin; frames fade a gradient over time
        // so ISG has something to weight.
        let mut cameras = Vec::new();
        for (k, pos) in [
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::new(1.5, 0.0, -2.5),
        ]
        .iter()
        .enumerate()
        {
            cameras.push(CameraModel {
                id: format!("cam{k:02}"),
                width: side,
                height: side,
                fx: side as f64,
                fy: side as f64,
                cx: side as f64 / 2.0,
                cy: side as f64 / 2.0,
                world_from_camera: look_at_pose(*pos, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0)),
                near: 1.0,
                far: 5.0,
            });
        }
        let frames = cameras
            .iter()
            .map(|_| {
                (0..t_count)
                    .map(|t| {
                        let mut img = Image::new(side, side);
                        for r in 0..side {
                            for c in 0..side {
                                let v = (0.2
                                    + 0.6 * (c as f32 / side as f32)
                                    + 0.1 * t as f32 / t_count as f32)
                                    .min(1.0);
                                img.set(r, c, [v, 0.5 * v, 1.0 - v]);
                            }
                        }
                        img
                    })
                    .collect()
            })
            .collect();
        MultiViewVideo {
            cameras,
            heldout: vec![],
            fps: 30.0,
            frames,
        }
    }

    fn toy_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.width = 8;
        cfg.latent_dim = 4;
        cfg.encoding = EncodingConfig {
            l_x: 3,
            l_d: 2,
            l_t: 2,
            include_input: true,
        };
        cfg.batch = 8;
        cfg.n_coarse = 4;
        cfg.n_fine = 4;
        cfg.keyframe_interval = 2;
        cfg.downsample = 1;
        cfg.seed = 13;
        cfg.stages = parse_stages("keyframe:2:1e-3,full_isg:2:1e-4").unwrap();
        cfg
    }

    #[test]
    fn zero_iteration_stage_leaves_the_model_untouched() {
        let video = tiny_video(4, 8);
        let mut cfg = toy_config();
        cfg.stages = parse_stages("full_uniform:0:1e-3").unwrap();
        let mut model = initial_model(&cfg, 4).unwrap();
        let before = model.params.tensors().iter().map(|(_, v)| (*v).clone()).collect::<Vec<_>>();
        let codes = model.latents().unwrap().codes.clone();
        let mut rng = derive_stream(&[1]);
        let stats = run_stage(&mut model, &video, None, &cfg.stages[0], &cfg, &mut rng).unwrap();
        assert_eq!(stats.iterations, 0);
        for ((_, after), b) in model.params.tensors().iter().zip(&before) {
            assert_eq!(*after, b);
        }
        assert_eq!(model.latents().unwrap().codes, codes);
    }

    #[test]
    fn training_is_reproducible_for_a_fixed_seed() {
        let video = tiny_video(4, 8);
        let cfg = toy_config();
        let run = || {
            let mut cursors = Vec::new();
            let model = run_training(&cfg, &video, None, 0, |si, m, _| {
                cursors.push((si, m.t_count));
            })
            .unwrap();
            (model, cursors)
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(ca, cb);
        // Keyframe stage trains 2 latent rows (frames 0, 2), full stage 4.
        assert_eq!(ca, vec![(0, 2), (1, 4)]);
        assert_eq!(a.latents().unwrap().codes, b.latents().unwrap().codes);
        for ((_, ta), (_, tb)) in a.params.tensors().iter().zip(b.params.tensors()) {
            assert_eq!(**ta, *tb);
        }
    }

    #[test]
    fn latent_rows_stay_unit_norm_through_training() {
        let video = tiny_video(4, 8);
        let cfg = toy_config();
        let model = run_training(&cfg, &video, None, 0, |_, _, _| {}).unwrap();
        assert!(model.latents().unwrap().max_row_norm_deviation() < 1e-6);
    }

    #[test]
    fn loss_falls_on_an_overfittable_scene() {
        let video = tiny_video(1, 8);
        let mut cfg = toy_config();
        cfg.keyframe_interval = 1;
        cfg.batch = 16;
        cfg.stages = parse_stages("full_uniform:60:5e-3").unwrap();
        let mut last = Vec::new();
        run_training(&cfg, &video, None, 0, |_, _, stats| {
            last = stats.loss_curve.clone();
        })
        .unwrap();
        let head: f64 = last[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = last[last.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < 0.5 * head,
            "loss should fall by half, went {head:.4} -> {tail:.4}"
        );
    }

    #[test]
    fn missing_weight_maps_fail_loudly() {
        let video = tiny_video(4, 8);
        let cfg = toy_config();
        let mut model = initial_model(&cfg, 4).unwrap();
        let mut rng = derive_stream(&[1]);
        let err = run_stage(&mut model, &video, None, &cfg.stages[0], &cfg, &mut rng)
            .unwrap_err()
            .to_string();
        assert!(err.contains("weight maps"), "{err}");
    }

    #[test]
    fn weight_cache_feeds_training_identically() {
        let video = tiny_video(4, 8);
        let cfg = toy_config();
        let dir = tempfile::tempdir().unwrap();
        let cached = run_training(&cfg, &video, Some(dir.path()), 77, |_, _, _| {}).unwrap();
        let direct = run_training(&cfg, &video, None, 77, |_, _, _| {}).unwrap();
        assert_eq!(
            cached.latents().unwrap().codes,
            direct.latents().unwrap().codes
        );
        assert!(dir.path().join("keyframe/manifest.json").exists());
        assert!(dir.path().join("full_isg/manifest.json").exists());
    }
}
