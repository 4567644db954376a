//! Ray importance sampling: per-view temporal median maps, global (ISG) and
//! temporal (IST) weight maps, per-frame cross-view normalization into a
//! sampler, and the on-disk cache for precomputed maps.
//!
//! Weights exist per (training view, frame) at full resolution; medians are
//! computed box-downsampled and bilinearly upsampled back. A frame's sampler
//! concatenates that frame's weight maps over every training view, normalizes
//! once, and draws rays by inverse-transform sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use crate::dataset::MultiViewVideo;
use crate::error::{Error, Result};
use crate::imagebuf::Image;
use crate::render::derive_stream;

const CACHE_VERSION: u32 = 1;
const WEIGHT_MAGIC: &[u8; 4] = b"DYNW";
const MEDIAN_MAGIC: &[u8; 4] = b"DYNM";
const TAG_IST_PAIR: u64 = 0x4954;

/// Strategy tag stored in cache headers: 0 = ISG, 1 = IST, 2 = median plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Isg,
    Ist,
}

impl Strategy {
    fn tag(self) -> u8 {
        match self {
            Strategy::Isg => 0,
            Strategy::Ist => 1,
        }
    }
}

/// Which side of the per-pixel temporal difference the IST floor α clamps.
/// The lower bound is the behavior that keeps low-motion rays sampled at a
/// base rate; the upper variant exists for exactness experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IstClamp {
    #[default]
    Lower,
    Upper,
}

/// Single-channel row-major map aligned with a view's pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl GrayMap {
    pub fn new(width: u32, height: u32) -> Self {
        GrayMap {
            width,
            height,
            data: vec![0.0; (width * height) as usize],
        }
    }

    pub fn at(&self, row: u32, col: u32) -> f32 {
        self.data[(row * self.width + col) as usize]
    }
}

/// Per training view: the per-pixel, per-channel median over all frames.
#[derive(Debug, Clone)]
pub struct MedianMapSet {
    pub downsample: u32,
    /// Camera indices into the source video, training order.
    pub views: Vec<usize>,
    pub view_ids: Vec<String>,
    pub maps: Vec<Image>,
}

/// Per (training view, frame) ray weights under one strategy.
#[derive(Debug, Clone)]
pub struct WeightMapSet {
    pub strategy: Strategy,
    /// γ for ISG, α for IST.
    pub param: f64,
    pub views: Vec<usize>,
    pub view_ids: Vec<String>,
    /// maps[view_slot][frame]
    pub maps: Vec<Vec<GrayMap>>,
}

impl WeightMapSet {
    pub fn frame_count(&self) -> usize {
        self.maps.first().map_or(0, |v| v.len())
    }
}

/// Geman-McClure kernel ψ(x; γ) = x²/(x² + γ²): 0 at x = 0, approaching 1
/// from below as |x| grows, with γ setting the transition scale.
pub fn geman_mcclure(x: f64, gamma: f64) -> f64 {
    let x2 = x * x;
    x2 / (x2 + gamma * gamma)
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Invalid(format!(
            "map shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Per-pixel mean over channels of ψ(C − C̄; γ): how far a ray's current color
/// sits from its long-run median.
pub fn isg_weight_map(frame: &Image, median: &Image, gamma: f64) -> Result<GrayMap> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("isg gamma must be > 0, got {gamma}")));
    }
    check_dims(frame, median)?;
    let mut out = GrayMap::new(frame.width, frame.height);
    for (i, w) in out.data.iter_mut().enumerate() {
        let mut acc = 0.0;
        for ch in 0..3 {
            let diff = frame.data[i * 3 + ch] as f64 - median.data[i * 3 + ch] as f64;
            acc += geman_mcclure(diff, gamma);
        }
        *w = (acc / 3.0) as f32;
    }
    Ok(out)
}

/// Per-pixel mean absolute channel difference between two frames, clamped by
/// α (a floor by default, a cap in the `Upper` variant).
pub fn ist_weight_map(
    frame_i: &Image,
    frame_j: &Image,
    alpha: f64,
    clamp: IstClamp,
) -> Result<GrayMap> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("ist alpha must be > 0, got {alpha}")));
    }
    check_dims(frame_i, frame_j)?;
    let mut out = GrayMap::new(frame_i.width, frame_i.height);
    for (i, w) in out.data.iter_mut().enumerate() {
        let mut acc = 0.0;
        for ch in 0..3 {
            acc += (frame_i.data[i * 3 + ch] as f64 - frame_j.data[i * 3 + ch] as f64).abs();
        }
        let raw = acc / 3.0;
        *w = match clamp {
            IstClamp::Lower => raw.max(alpha),
            IstClamp::Upper => raw.min(alpha),
        } as f32;
    }
    Ok(out)
}

/// The temporal median image of one view: every frame box-downsampled, the
/// per-pixel per-channel median taken over time (even frame counts average
/// the two middle order statistics), then bilinear upsampling with
/// pixel-center alignment back to full resolution.
pub fn view_median_map(video: &MultiViewVideo, view: usize, downsample: u32) -> Result<Image> {
    if downsample < 1 {
        return Err(Error::Config("downsample factor must be ≥ 1".into()));
    }
    let cam = &video.cameras[view];
    if cam.width % downsample != 0 || cam.height % downsample != 0 {
        return Err(Error::BadDownsample {
            factor: downsample,
            width: cam.width,
            height: cam.height,
        });
    }
    let t_count = video.frame_count();
    let sw = (cam.width / downsample) as usize;
    let sh = (cam.height / downsample) as usize;
    // stack[t] = downsampled frame, 3 channels interleaved, f64.
    let stack: Vec<Vec<f64>> = (0..t_count)
        .map(|t| box_downsample(video.frame(view, t), downsample))
        .collect();
    let mut small_median = vec![0.0_f64; sw * sh * 3];
    let mut series = vec![0.0_f64; t_count];
    for i in 0..sw * sh * 3 {
        for (t, frame) in stack.iter().enumerate() {
            series[t] = frame[i];
        }
        series.sort_by(|a, b| a.partial_cmp(b).unwrap());
        small_median[i] = if t_count % 2 == 1 {
            series[t_count / 2]
        } else {
            0.5 * (series[t_count / 2 - 1] + series[t_count / 2])
        };
    }
    Ok(upsample_bilinear(
        &small_median,
        sw,
        sh,
        cam.width,
        cam.height,
    ))
}

/// Median maps for every training view.
pub fn global_median_maps(video: &MultiViewVideo, downsample: u32) -> Result<MedianMapSet> {
    let views = video.training_views();
    let mut maps = Vec::with_capacity(views.len());
    for &v in &views {
        maps.push(view_median_map(video, v, downsample)?);
    }
    Ok(MedianMapSet {
        downsample,
        view_ids: views.iter().map(|&v| video.cameras[v].id.clone()).collect(),
        views,
        maps,
    })
}

/// f×f block means, interleaved RGB f64.
fn box_downsample(img: &Image, f: u32) -> Vec<f64> {
    let sw = (img.width / f) as usize;
    let sh = (img.height / f) as usize;
    let norm = 1.0 / (f as f64 * f as f64);
    let mut out = vec![0.0_f64; sw * sh * 3];
    for sr in 0..sh {
        for sc in 0..sw {
            let mut acc = [0.0_f64; 3];
            for dr in 0..f {
                for dc in 0..f {
                    let px = img.get(sr as u32 * f + dr, sc as u32 * f + dc);
                    for ch in 0..3 {
                        acc[ch] += px[ch] as f64;
                    }
                }
            }
            for ch in 0..3 {
                out[(sr * sw + sc) * 3 + ch] = acc[ch] * norm;
            }
        }
    }
    out
}

/// Pixel-center-aligned bilinear upsampling: full-res center (r+½, c+½) maps
/// to small-grid coordinate (r+½)/f − ½, clamped at the borders. Factor 1 is
/// an exact identity.
fn upsample_bilinear(small: &[f64], sw: usize, sh: usize, width: u32, height: u32) -> Image {
    let f = width as f64 / sw as f64;
    let mut out = Image::new(width, height);
    for r in 0..height {
        let v = ((r as f64 + 0.5) / f - 0.5).clamp(0.0, (sh - 1) as f64);
        let r0 = v.floor() as usize;
        let r1 = (r0 + 1).min(sh - 1);
        let fv = v - r0 as f64;
        for c in 0..width {
            let u = ((c as f64 + 0.5) / f - 0.5).clamp(0.0, (sw - 1) as f64);
            let c0 = u.floor() as usize;
            let c1 = (c0 + 1).min(sw - 1);
            let fu = u - c0 as f64;
            let mut px = [0.0_f32; 3];
            for ch in 0..3 {
                let a = small[(r0 * sw + c0) * 3 + ch];
                let b = small[(r0 * sw + c1) * 3 + ch];
                let d = small[(r1 * sw + c0) * 3 + ch];
                let e = small[(r1 * sw + c1) * 3 + ch];
                let top = a + (b - a) * fu;
                let bot = d + (e - d) * fu;
                px[ch] = (top + (bot - top) * fv) as f32;
            }
            out.set(r, c, px);
        }
    }
    out
}

/// ISG weight maps for every training view and frame against the global
/// medians.
pub fn isg_weight_maps(
    video: &MultiViewVideo,
    medians: &MedianMapSet,
    gamma: f64,
) -> Result<WeightMapSet> {
    let t_count = video.frame_count();
    let mut maps = Vec::with_capacity(medians.views.len());
    for (slot, &v) in medians.views.iter().enumerate() {
        let mut per_frame = Vec::with_capacity(t_count);
        for t in 0..t_count {
            per_frame.push(isg_weight_map(video.frame(v, t), &medians.maps[slot], gamma)?);
        }
        maps.push(per_frame);
    }
    Ok(WeightMapSet {
        strategy: Strategy::Isg,
        param: gamma,
        views: medians.views.clone(),
        view_ids: medians.view_ids.clone(),
        maps,
    })
}

/// The partner frame IST compares frame t against: uniform over the window
/// around t, excluding t, drawn from a stream keyed by (seed, t) so every
/// view shares the pairing. A single-frame video pairs with itself and the
/// floor takes over.
pub fn ist_partner_frame(t: usize, t_count: usize, window: usize, seed: u64) -> usize {
    let lo = t.saturating_sub(window);
    let hi = (t + window).min(t_count - 1);
    let candidates = hi - lo; // window size minus the excluded t itself
    if candidates == 0 {
        return t;
    }
    let mut rng = derive_stream(&[seed, TAG_IST_PAIR, t as u64]);
    let k = rng.random_range(0..candidates);
    let pick = lo + k;
    if pick >= t {
        pick + 1
    } else {
        pick
    }
}

/// IST weight maps for every training view and frame.
pub fn ist_weight_maps(
    video: &MultiViewVideo,
    alpha: f64,
    window: usize,
    clamp: IstClamp,
    seed: u64,
) -> Result<WeightMapSet> {
    if window == 0 {
        return Err(Error::Config("ist window must be ≥ 1".into()));
    }
    let views = video.training_views();
    let t_count = video.frame_count();
    let partners: Vec<usize> = (0..t_count)
        .map(|t| ist_partner_frame(t, t_count, window, seed))
        .collect();
    let mut maps = Vec::with_capacity(views.len());
    for &v in &views {
        let mut per_frame = Vec::with_capacity(t_count);
        for t in 0..t_count {
            per_frame.push(ist_weight_map(
                video.frame(v, t),
                video.frame(v, partners[t]),
                alpha,
                clamp,
            )?);
        }
        maps.push(per_frame);
    }
    Ok(WeightMapSet {
        strategy: Strategy::Ist,
        param: alpha,
        views: views.clone(),
        view_ids: views.iter().map(|&v| video.cameras[v].id.clone()).collect(),
        maps,
    })
}

/// A pixel address in the source video: camera index plus pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RayPick {
    pub view: usize,
    pub row: u32,
    pub col: u32,
}

/// Inverse-transform sampler over every training-view pixel of one frame.
#[derive(Debug, Clone)]
pub struct FrameSampler {
    pub frame: usize,
    /// CDF over rays, views concatenated in training order, pixels row-major.
    /// Nondecreasing; last entry exactly 1.
    pub cdf: Vec<f64>,
    /// Weight mass before normalization.
    pub total_mass: f64,
    /// Set when all weights were zero and the sampler fell back to uniform.
    pub uniform_fallback: bool,
    /// (camera index, width, height) per concatenated view.
    layout: Vec<(usize, u32, u32)>,
}

/// Concatenates frame t's weight maps across views, normalizes them into one
/// distribution, and prefix-sums the CDF. All-zero mass falls back to uniform
/// so static content still trains.
pub fn build_frame_sampler(set: &WeightMapSet, frame: usize) -> Result<FrameSampler> {
    if frame >= set.frame_count() {
        return Err(Error::Invalid(format!(
            "frame {frame} out of range for {} frames of weights",
            set.frame_count()
        )));
    }
    let mut layout = Vec::with_capacity(set.views.len());
    let mut weights = Vec::new();
    for (slot, &view) in set.views.iter().enumerate() {
        let map = &set.maps[slot][frame];
        layout.push((view, map.width, map.height));
        weights.extend(map.data.iter().map(|&w| w as f64));
    }
    if weights.is_empty() {
        return Err(Error::Invalid("weight set has no views".into()));
    }
    let total_mass: f64 = weights.iter().sum();
    let uniform_fallback = !(total_mass > 0.0);
    let mut cdf = Vec::with_capacity(weights.len());
    if uniform_fallback {
        let n = weights.len() as f64;
        for i in 0..weights.len() {
            cdf.push((i + 1) as f64 / n);
        }
    } else {
        let mut acc = 0.0;
        for w in &weights {
            acc += w / total_mass;
            cdf.push(acc);
        }
    }
    *cdf.last_mut().unwrap() = 1.0;
    Ok(FrameSampler {
        frame,
        cdf,
        total_mass,
        uniform_fallback,
        layout,
    })
}

impl FrameSampler {
    pub fn ray_count(&self) -> usize {
        self.cdf.len()
    }

    fn unflatten(&self, mut idx: usize) -> RayPick {
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
        unreachable!("flat index within cdf length");
    }

    /// Probability mass assigned to one pixel.
    pub fn ray_probability(&self, view: usize, row: u32, col: u32) -> f64 {
        let mut base = 0usize;
        for &(v, w, h) in &self.layout {
            if v == view {
                let idx = base + (row * w + col) as usize;
                let lo = if idx == 0 { 0.0 } else { self.cdf[idx - 1] };
                return self.cdf[idx] - lo;
            }
            base += (w * h) as usize;
        }
        0.0
    }

    /// n inverse-transform draws; duplicates allowed, deterministic per RNG
    /// stream.
    pub fn draw_rays(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<RayPick> {
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let idx = self.cdf.partition_point(|&c| c < u);
                self.unflatten(idx.min(self.cdf.len() - 1))
            })
            .collect()
    }
}

/// Everything that determines weight-map content besides the video itself;
/// one cache directory holds one settings instance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WeightSettings {
    pub strategy: Strategy,
    pub gamma: f64,
    pub alpha: f64,
    pub downsample: u32,
    pub ist_window: usize,
    pub ist_clamp: IstClamp,
    pub seed: u64,
}

impl Default for WeightSettings {
    fn default() -> Self {
        WeightSettings {
            strategy: Strategy::Isg,
            gamma: 2e-2,
            alpha: 0.1,
            downsample: 4,
            ist_window: 25,
            ist_clamp: IstClamp::Lower,
            seed: 0,
        }
    }
}

impl WeightSettings {
    pub fn param(&self) -> f64 {
        match self.strategy {
            Strategy::Isg => self.gamma,
            Strategy::Ist => self.alpha,
        }
    }

    /// Computes the maps for `video` directly, no cache involved.
    pub fn compute(&self, video: &MultiViewVideo) -> Result<WeightMapSet> {
        match self.strategy {
            Strategy::Isg => {
                let medians = global_median_maps(video, self.downsample)?;
                isg_weight_maps(video, &medians, self.gamma)
            }
            Strategy::Ist => {
                ist_weight_maps(video, self.alpha, self.ist_window, self.ist_clamp, self.seed)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct CacheManifest {
    dataset_digest: String,
    settings: WeightSettings,
    view_ids: Vec<String>,
    frame_count: usize,
}

fn weight_path(dir: &Path, view_id: &str, frame: usize) -> PathBuf {
    dir.join(format!("w_{view_id}_t{frame:05}.dynw"))
}

fn write_plane(
    path: &Path,
    magic: &[u8; 4],
    strategy: u8,
    width: u32,
    height: u32,
    param: f64,
    data: &[f32],
) -> Result<()> {
    let mut buf = Vec::with_capacity(25 + data.len() * 4);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.push(strategy);
    buf.extend_from_slice(&height.to_le_bytes());
    buf.extend_from_slice(&width.to_le_bytes());
    buf.extend_from_slice(&param.to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_plane(path: &Path, magic: &[u8; 4]) -> Result<(u8, f64, GrayMap)> {
    let fail = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 25 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != magic {
        return Err(fail(&format!(
            "bad magic {:?}, expected {:?}",
            &bytes[0..4],
            magic
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let strategy = bytes[8];
    let height = u32::from_le_bytes(bytes[9..13].try_into().unwrap());
    let width = u32::from_le_bytes(bytes[13..17].try_into().unwrap());
    let param = f64::from_le_bytes(bytes[17..25].try_into().unwrap());
    let expected = 25 + (width as usize * height as usize) * 4;
    if bytes.len() != expected {
        return Err(fail(&format!(
            "payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let data = bytes[25..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        strategy,
        param,
        GrayMap {
            width,
            height,
            data,
        },
    ))
}

/// Writes every weight plane plus a manifest binding them to the dataset
/// digest and settings.
pub fn save_weight_set(
    dir: &Path,
    set: &WeightMapSet,
    settings: &WeightSettings,
    dataset_digest: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (slot, id) in set.view_ids.iter().enumerate() {
        for (t, map) in set.maps[slot].iter().enumerate() {
            write_plane(
                &weight_path(dir, id, t),
                WEIGHT_MAGIC,
                set.strategy.tag(),
                map.width,
                map.height,
                set.param,
                &map.data,
            )?;
        }
    }
    let manifest = CacheManifest {
        dataset_digest: format!("{dataset_digest:016x}"),
        settings: settings.clone(),
        view_ids: set.view_ids.clone(),
        frame_count: set.frame_count(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads a cached set if the manifest matches (digest, settings, views,
/// frames); `Ok(None)` means absent or stale.
pub fn load_weight_set(
    dir: &Path,
    video: &MultiViewVideo,
    settings: &WeightSettings,
    dataset_digest: u64,
) -> Result<Option<WeightMapSet>> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Ok(None);
    }
    let manifest: CacheManifest = serde_json::from_slice(
        &std::fs::read(&manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?,
    )?;
    let views = video.training_views();
    let view_ids: Vec<String> = views.iter().map(|&v| video.cameras[v].id.clone()).collect();
    let expected = CacheManifest {
        dataset_digest: format!("{dataset_digest:016x}"),
        settings: settings.clone(),
        view_ids: view_ids.clone(),
        frame_count: video.frame_count(),
    };
    if manifest != expected {
        return Ok(None);
    }
    let mut maps = Vec::with_capacity(views.len());
    for id in &view_ids {
        let mut per_frame = Vec::with_capacity(video.frame_count());
        for t in 0..video.frame_count() {
            let path = weight_path(dir, id, t);
            if !path.exists() {
                return Ok(None);
            }
            let (tag, param, map) = read_plane(&path, WEIGHT_MAGIC)?;
            if tag != settings.strategy.tag() || param != settings.param() {
                return Ok(None);
            }
            per_frame.push(map);
        }
        maps.push(per_frame);
    }
    Ok(Some(WeightMapSet {
        strategy: settings.strategy,
        param: settings.param(),
        views,
        view_ids,
        maps,
    }))
}

/// Load-or-compute entry point; returns the set and whether it came from the
/// cache.
pub fn cached_weight_maps(
    dir: &Path,
    video: &MultiViewVideo,
    settings: &WeightSettings,
    dataset_digest: u64,
) -> Result<(WeightMapSet, bool)> {
    if let Some(set) = load_weight_set(dir, video, settings, dataset_digest)? {
        return Ok((set, true));
    }
    let set = settings.compute(video)?;
    save_weight_set(dir, &set, settings, dataset_digest)?;
    Ok((set, false))
}

/// Caches a median map set as three single-channel planes per view, the
/// downsample factor riding in the param slot.
pub fn save_median_set(dir: &Path, set: &MedianMapSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (slot, id) in set.view_ids.iter().enumerate() {
        let img = &set.maps[slot];
        for ch in 0..3 {
            let plane: Vec<f32> = img.data.iter().skip(ch).step_by(3).copied().collect();
            write_plane(
                &dir.join(format!("m_{id}_c{ch}.dynm")),
                MEDIAN_MAGIC,
                2,
                img.width,
                img.height,
                set.downsample as f64,
                &plane,
            )?;
        }
    }
    Ok(())
}

pub fn load_median_set(
    dir: &Path,
    video: &MultiViewVideo,
    downsample: u32,
) -> Result<Option<MedianMapSet>> {
    let views = video.training_views();
    let view_ids: Vec<String> = views.iter().map(|&v| video.cameras[v].id.clone()).collect();
    let mut maps = Vec::with_capacity(views.len());
    for (slot, id) in view_ids.iter().enumerate() {
        let cam = &video.cameras[views[slot]];
        let mut img = Image::new(cam.width, cam.height);
        for ch in 0..3 {
            let path = dir.join(format!("m_{id}_c{ch}.dynm"));
            if !path.exists() {
                return Ok(None);
            }
            let (tag, param, plane) = read_plane(&path, MEDIAN_MAGIC)?;
            if tag != 2 || param != downsample as f64 {
                return Ok(None);
            }
            if plane.width != cam.width || plane.height != cam.height {
                return Ok(None);
            }
            for (i, v) in plane.data.iter().enumerate() {
                img.data[i * 3 + ch] = *v;
            }
        }
        maps.push(img);
    }
    Ok(Some(MedianMapSet {
        downsample,
        views,
        view_ids,
        maps,
    }))
}
