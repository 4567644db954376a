//! Discrete emission-absorption volume rendering: stratified coarse sampling,
//! transmittance-weighted compositing, PDF-based fine resampling, and per-ray /
//! per-image drivers generic over the radiance source (learned field or the
//! synthetic oracle).
//!
//! Interval convention: sample i owns [depth_i, depth_{i+1}) and the last
//! sample closes against the supplied far bound, so accumulated opacity can
//! reach but never exceed 1. Rays that hit no density composite to black.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Ray};
use crate::imagebuf::Image;

/// Floor added to coarse weights before fine resampling so the CDF never
/// degenerates even when every weight is zero.
pub const EPS_PDF: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub n_coarse: usize,
    /// Additional importance samples; the fine pass evaluates the sorted union
    /// of coarse and resampled depths.
    pub n_fine: usize,
    /// Midpoint sampling and evenly spaced resampling variates instead of
    /// jitter; renders become pure functions of their inputs.
    pub deterministic: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_coarse: 32,
            n_fine: 64,
            deterministic: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_coarse < 2 {
            return Err(Error::Invalid(format!(
                "n_coarse must be >= 2, got {}",
                self.n_coarse
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Coarse,
    Fine,
}

/// Radiance source evaluated per sample. Conditioning (latent code or encoded
/// time) is fixed inside the implementor, so the renderer stays agnostic.
pub trait RadianceField: Sync {
    fn eval(&self, level: Level, x: &Vector3<f64>, d: &Vector3<f64>) -> ([f64; 3], f64);
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color_coarse: [f64; 3],
    pub color_fine: [f64; 3],
    pub weights_coarse: Vec<f64>,
    pub weights_fine: Vec<f64>,
    pub opacity_coarse: f64,
    /// Fine-level accumulated opacity; the headline opacity of the ray.
    pub accumulated_opacity: f64,
    pub depths_coarse: Vec<f64>,
    pub depths_fine: Vec<f64>,
    /// Expected termination depth under the fine weights (unnormalized).
    pub mean_depth: f64,
}

/// One jittered sample per equal-depth bin; `None` jitter yields midpoints.
pub fn stratified_samples(
    near: f64,
    far: f64,
    n: usize,
    jitter: Option<&mut ChaCha8Rng>,
) -> Result<Vec<f64>> {
    if !(near < far) {
        return Err(Error::Invalid(format!(
            "stratified sampling needs near < far, got [{near}, {far}]"
        )));
    }
    if n == 0 {
        return Err(Error::Invalid("stratified sampling needs n >= 1".into()));
    }
    let width = (far - near) / n as f64;
    let mut out = Vec::with_capacity(n);
    match jitter {
        Some(rng) => {
            for i in 0..n {
                out.push(near + (i as f64 + rng.random::<f64>()) * width);
            }
        }
        None => {
            for i in 0..n {
                out.push(near + (i as f64 + 0.5) * width);
            }
        }
    }
    Ok(out)
}

pub struct CompositeOutput {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    pub accumulated_opacity: f64,
    /// Transmittance remaining past the last sample; opacity + this = 1 up to
    /// rounding because the weights telescope.
    pub final_transmittance: f64,
}

/// Emission-absorption quadrature over piecewise-constant samples.
pub fn composite(
    colors: &[[f64; 3]],
    sigmas: &[f64],
    depths: &[f64],
    far: f64,
) -> Result<CompositeOutput> {
    validate_composite_inputs(sigmas, depths, far)?;
    let mut weights = vec![0.0; depths.len()];
    let (color, accumulated_opacity, final_transmittance) =
        composite_into(colors, sigmas, depths, far, &mut weights);
    Ok(CompositeOutput {
        color,
        weights,
        accumulated_opacity,
        final_transmittance,
    })
}

pub(crate) fn validate_composite_inputs(sigmas: &[f64], depths: &[f64], far: f64) -> Result<()> {
    if depths.is_empty() || depths.len() != sigmas.len() {
        return Err(Error::Invalid(format!(
            "composite needs matching nonempty sigmas/depths, got {} vs {}",
            sigmas.len(),
            depths.len()
        )));
    }
    for (i, pair) in depths.windows(2).enumerate() {
        if !(pair[0] <= pair[1]) {
            return Err(Error::Invalid(format!(
                "depths must be ascending: depth[{}]={} > depth[{}]={}",
                i,
                pair[0],
                i + 1,
                pair[1]
            )));
        }
    }
    if !(far >= *depths.last().unwrap()) {
        return Err(Error::Invalid(format!(
            "far bound {far} precedes last sample depth {}",
            depths.last().unwrap()
        )));
    }
    for (i, &s) in sigmas.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFiniteSample {
                quantity: "density",
                index: i,
            });
        }
        if s < 0.0 {
            return Err(Error::Invalid(format!(
                "negative density {s} at sample {i}"
            )));
        }
    }
    Ok(())
}

/// Allocation-free compositing core shared with the training backward pass.
/// Callers guarantee validated inputs; `weights` must have `depths.len()`.
pub(crate) fn composite_into(
    colors: &[[f64; 3]],
    sigmas: &[f64],
    depths: &[f64],
    far: f64,
    weights: &mut [f64],
) -> ([f64; 3], f64, f64) {
    let n = depths.len();
    let mut transmittance = 1.0_f64;
    let mut color = [0.0_f64; 3];
    let mut opacity = 0.0_f64;
    for i in 0..n {
        let delta = if i + 1 < n {
            depths[i + 1] - depths[i]
        } else {
            far - depths[i]
        };
        let attenuation = (-sigmas[i] * delta).exp();
        let w = transmittance * (1.0 - attenuation);
        weights[i] = w;
        color[0] += w * colors[i][0];
        color[1] += w * colors[i][1];
        color[2] += w * colors[i][2];
        opacity += w;
        transmittance *= attenuation;
    }
    (color, opacity, transmittance)
}

/// Inverse-transform draws from the piecewise-constant distribution whose bin
/// probabilities are proportional to weight + EPS_PDF. Bins are centered on the
/// coarse depths (edges at midpoints of neighbors); returned depths are sorted.
/// `None` variates means evenly spaced u, the deterministic mode.
pub fn pdf_resample(
    weights: &[f64],
    depths: &[f64],
    n_fine: usize,
    variates: Option<&mut ChaCha8Rng>,
) -> Vec<f64> {
    assert_eq!(weights.len(), depths.len(), "one weight per coarse depth");
    if n_fine == 0 || depths.is_empty() {
        return Vec::new();
    }
    let n = depths.len();
    // Bin edges: outer depths clamp the ends so every bin contains its depth.
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(depths[0]);
    for i in 1..n {
        edges.push(0.5 * (depths[i - 1] + depths[i]));
    }
    edges.push(depths[n - 1]);

    let mut cdf = Vec::with_capacity(n);
    let mut total = 0.0_f64;
    for &w in weights {
        total += w.max(0.0) + EPS_PDF;
        cdf.push(total);
    }
    for c in cdf.iter_mut() {
        *c /= total;
    }
    *cdf.last_mut().unwrap() = 1.0;

    let mut out = Vec::with_capacity(n_fine);
    let draw = |u: f64| {
        let bin = cdf.partition_point(|&c| c < u).min(n - 1);
        let lo = if bin == 0 { 0.0 } else { cdf[bin - 1] };
        let span = cdf[bin] - lo;
        let frac = if span > 0.0 { (u - lo) / span } else { 0.5 };
        edges[bin] + frac * (edges[bin + 1] - edges[bin])
    };
    match variates {
        Some(rng) => {
            for _ in 0..n_fine {
                out.push(draw(rng.random::<f64>()));
            }
        }
        None => {
            for i in 0..n_fine {
                out.push(draw((i as f64 + 0.5) / n_fine as f64));
            }
        }
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out
}

/// Merge two individually sorted depth lists.
pub(crate) fn merge_sorted(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Coarse stratified pass, fine pass over the union of coarse and resampled
/// depths. The same RNG drives jitter and resampling so a ray render consumes
/// a deterministic slice of its stream.
pub fn render_ray_field<F: RadianceField>(
    field: &F,
    ray: &Ray,
    cfg: &RenderConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<RenderOutput> {
    cfg.validate()?;
    let depths_coarse = stratified_samples(ray.near, ray.far, cfg.n_coarse, rng.as_deref_mut())?;

    let mut colors = Vec::with_capacity(cfg.n_coarse);
    let mut sigmas = Vec::with_capacity(cfg.n_coarse);
    for &s in &depths_coarse {
        let (c, sigma) = field.eval(Level::Coarse, &ray.point_at(s), &ray.direction);
        colors.push(c);
        sigmas.push(sigma);
    }
    validate_composite_inputs(&sigmas, &depths_coarse, ray.far)?;
    let mut weights_coarse = vec![0.0; depths_coarse.len()];
    let (color_coarse, opacity_coarse, _) = composite_into(
        &colors,
        &sigmas,
        &depths_coarse,
        ray.far,
        &mut weights_coarse,
    );

    let depths_fine = if cfg.n_fine > 0 {
        let extra = pdf_resample(&weights_coarse, &depths_coarse, cfg.n_fine, rng);
        merge_sorted(&depths_coarse, &extra)
    } else {
        depths_coarse.clone()
    };

    let mut colors_f = Vec::with_capacity(depths_fine.len());
    let mut sigmas_f = Vec::with_capacity(depths_fine.len());
    for &s in &depths_fine {
        let (c, sigma) = field.eval(Level::Fine, &ray.point_at(s), &ray.direction);
        colors_f.push(c);
        sigmas_f.push(sigma);
    }
    validate_composite_inputs(&sigmas_f, &depths_fine, ray.far)?;
    let mut weights_fine = vec![0.0; depths_fine.len()];
    let (color_fine, accumulated_opacity, _) = composite_into(
        &colors_f,
        &sigmas_f,
        &depths_fine,
        ray.far,
        &mut weights_fine,
    );
    let mean_depth = weights_fine
        .iter()
        .zip(&depths_fine)
        .map(|(w, s)| w * s)
        .sum();

    Ok(RenderOutput {
        color_coarse,
        color_fine,
        weights_coarse,
        weights_fine,
        opacity_coarse,
        accumulated_opacity,
        depths_coarse,
        depths_fine,
        mean_depth,
    })
}

/// Renders every pixel of `camera` through `field`, writing the fine color.
/// Per-pixel RNG streams derive from (seed, view_tag, row, col, t), so output
/// is independent of worker count and scheduling.
pub fn render_image_field<F: RadianceField>(
    field: &F,
    camera: &CameraModel,
    cfg: &RenderConfig,
    seed: u64,
    view_tag: u64,
    t: f64,
) -> Result<Image> {
    let rows: Vec<Vec<[f32; 3]>> = (0..camera.height)
        .into_par_iter()
        .map(|row| -> Result<Vec<[f32; 3]>> {
            let mut out_row = Vec::with_capacity(camera.width as usize);
            for col in 0..camera.width {
                let ray = camera.generate_ray(view_tag as u32, row, col, t.floor() as u32)?;
                let mut rng = pixel_stream(seed, view_tag, row, col, t);
                let rng_opt = if cfg.deterministic {
                    None
                } else {
                    Some(&mut rng)
                };
                let rendered = render_ray_field(field, &ray, cfg, rng_opt)?;
                out_row.push(rendered.color_fine.map(|v| v.clamp(0.0, 1.0) as f32));
            }
            Ok(out_row)
        })
        .collect::<Result<_>>()?;
    let mut img = Image::new(camera.width, camera.height);
    for (r, row) in rows.iter().enumerate() {
        for (c, px) in row.iter().enumerate() {
            img.set(r as u32, c as u32, *px);
        }
    }
    Ok(img)
}

/// Splitmix64 finalizer; the avalanche makes nearby pixel coordinates yield
/// unrelated streams.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Independent RNG stream for an arbitrary tuple of identifiers.
pub fn derive_stream(parts: &[u64]) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut x = 0x6A09E667F3BCC908_u64;
    for &p in parts {
        x = mix64(x ^ p);
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        x = mix64(x);
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Stream owned by one pixel of one rendered image.
pub fn pixel_stream(seed: u64, view_tag: u64, row: u32, col: u32, t: f64) -> ChaCha8Rng {
    derive_stream(&[seed, view_tag, row as u64, col as u64, t.to_bits()])
}
