//! Image quality metrics (MSE, PSNR, SSIM/DSSIM) and held-out sequence
//! evaluation with frame subsampling and an optional dynamic-region mask.
//!
//! SSIM uses the standard 11×11 Gaussian window (σ = 1.5, K₁ = 0.01,
//! K₂ = 0.03) per channel on valid interior pixels; DSSIM = (1 − SSIM)/2.
//! PSNR caps at 99 dB with an explicit flag so reports stay finite.

use crate::dataset::MultiViewVideo;
use crate::error::{Error, Result};
use crate::field::FieldModel;
use crate::imagebuf::Image;
use crate::render::RenderConfig;
use crate::sampling::{isg_weight_map, view_median_map};

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsnrResult {
    pub psnr_db: f64,
    pub mse: f64,
    /// Set when MSE was zero or small enough to exceed the cap.
    pub capped: bool,
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Invalid(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean squared error over all pixels and channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    Ok(a.mse(b))
}

fn psnr_from_mse(mse: f64, peak: f64) -> PsnrResult {
    if mse <= 0.0 {
        return PsnrResult {
            psnr_db: PSNR_CAP_DB,
            mse,
            capped: true,
        };
    }
    let db = 10.0 * (peak * peak / mse).log10();
    if db > PSNR_CAP_DB {
        PsnrResult {
            psnr_db: PSNR_CAP_DB,
            mse,
            capped: true,
        }
    } else {
        PsnrResult {
            psnr_db: db,
            mse,
            capped: false,
        }
    }
}

/// 10·log₁₀(peak²/MSE), capped at 99 dB.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<PsnrResult> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid convolution with the Gaussian window: (H, W) in, the
/// (H−10, W−10) interior out.
fn gaussian_filter_valid(plane: &[f64], width: usize, height: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; height * ow];
    for r in 0..height {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * plane[r * width + c + i];
            }
            rows[r * ow + c] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * rows[(r + i) * ow + c];
            }
            out[r * ow + c] = acc;
        }
    }
    out
}

/// The per-pixel SSIM map of one channel pair, on valid interior pixels.
fn ssim_map_channel(a: &[f64], b: &[f64], width: usize, height: usize) -> Vec<f64> {
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = gaussian_filter_valid(a, width, height);
    let mu_b = gaussian_filter_valid(b, width, height);
    let m_aa = gaussian_filter_valid(&aa, width, height);
    let m_bb = gaussian_filter_valid(&bb, width, height);
    let m_ab = gaussian_filter_valid(&ab, width, height);
    (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = m_aa[i] - ma * ma;
            let var_b = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2))
        })
        .collect()
}

fn channel_plane(img: &Image, ch: usize) -> Vec<f64> {
    img.data.iter().skip(ch).step_by(3).map(|&v| v as f64).collect()
}

fn check_window(a: &Image) -> Result<()> {
    if (a.width as usize) < SSIM_WINDOW || (a.height as usize) < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "image {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window",
            a.width, a.height
        )));
    }
    Ok(())
}

/// Mean SSIM over channels and valid pixels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    check_window(a)?;
    let (w, h) = (a.width as usize, a.height as usize);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let map = ssim_map_channel(&channel_plane(a, ch), &channel_plane(b, ch), w, h);
        total += map.iter().sum::<f64>();
        count += map.len();
    }
    Ok(total / count as f64)
}

/// The structural dissimilarity remap.
pub fn dssim_from_ssim(ssim: f64) -> f64 {
    ((1.0 - ssim) / 2.0).clamp(0.0, 1.0)
}

pub fn dssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(dssim_from_ssim(ssim(a, b)?))
}

/// The frame subsampling policy: every frame for short sequences, every 10th
/// from 300 frames up.
pub fn eval_frames(t_count: usize) -> Vec<usize> {
    let stride = if t_count < 300 { 1 } else { 10 };
    (0..t_count).step_by(stride).collect()
}

/// Metrics restricted to the dynamic-region mask.
#[derive(Debug, Clone, Copy)]
pub struct MaskedMetrics {
    pub mse: f64,
    pub psnr_db: f64,
    pub capped: bool,
    pub dssim: f64,
    /// Fraction of pixels inside the mask.
    pub coverage: f64,
}

#[derive(Debug, Clone)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr_db: f64,
    pub capped: bool,
    pub mse: f64,
    pub dssim: f64,
    pub masked: Option<MaskedMetrics>,
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub view_id: String,
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr_db: f64,
    pub mean_mse: f64,
    pub mean_dssim: f64,
    pub mean_masked_mse: Option<f64>,
    pub mean_masked_dssim: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Overrides the frame policy when set.
    pub stride: Option<usize>,
    /// Compute dynamic-region masked metrics.
    pub dynamic_mask: bool,
    /// ISG scale for the mask weights.
    pub mask_gamma: f64,
    /// A pixel is dynamic when its ISG weight exceeds this.
    pub mask_threshold: f64,
    /// Median-map downsampling for the mask.
    pub downsample: u32,
    pub render: RenderConfig,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            stride: None,
            dynamic_mask: false,
            mask_gamma: 2e-2,
            mask_threshold: 0.1,
            downsample: 4,
            render: RenderConfig {
                deterministic: true,
                ..RenderConfig::default()
            },
            seed: 0,
        }
    }
}

/// The dynamic-region mask of one frame: ISG weight of the ground-truth
/// frame against the view's temporal median, thresholded.
pub fn dynamic_mask(
    frame: &Image,
    median: &Image,
    gamma: f64,
    threshold: f64,
) -> Result<Vec<bool>> {
    let weights = isg_weight_map(frame, median, gamma)?;
    Ok(weights.data.iter().map(|&w| w as f64 > threshold).collect())
}

fn masked_mse(a: &Image, b: &Image, mask: &[bool]) -> Option<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for ch in 0..3 {
            let d = a.data[i * 3 + ch] as f64 - b.data[i * 3 + ch] as f64;
            acc += d * d;
        }
        n += 3;
    }
    (n > 0).then(|| acc / n as f64)
}

/// Mean of the SSIM map over masked positions; the valid-convolution map is
/// indexed by window-corner, so the mask is read at window centers.
fn masked_dssim(a: &Image, b: &Image, mask: &[bool]) -> Option<f64> {
    let (w, h) = (a.width as usize, a.height as usize);
    let half = SSIM_WINDOW / 2;
    let ow = w - SSIM_WINDOW + 1;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let map = ssim_map_channel(&channel_plane(a, ch), &channel_plane(b, ch), w, h);
        for (i, &v) in map.iter().enumerate() {
            let (r, c) = (i / ow, i % ow);
            if mask[(r + half) * w + (c + half)] {
                total += v;
                count += 1;
            }
        }
    }
    (count > 0).then(|| dssim_from_ssim(total / count as f64))
}

/// Renders the named view at the policy's frames and scores every render
/// against ground truth.
pub fn evaluate_sequence(
    model: &FieldModel,
    video: &MultiViewVideo,
    view_id: &str,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let view = video
        .view_index(view_id)
        .ok_or_else(|| Error::Invalid(format!("view {view_id} not found in dataset")))?;
    let t_count = video.frame_count();
    let frames = match opts.stride {
        Some(s) if s >= 1 => (0..t_count).step_by(s).collect(),
        Some(_) => return Err(Error::Config("stride must be ≥ 1".into())),
        None => eval_frames(t_count),
    };
    let median = if opts.dynamic_mask {
        Some(view_median_map(video, view, opts.downsample)?)
    } else {
        None
    };
    let cam = &video.cameras[view];
    let mut rows = Vec::with_capacity(frames.len());
    for &t in &frames {
        let rendered = model.render_image(cam, &opts.render, opts.seed, view as u64, t as f64)?;
        let gt = video.frame(view, t);
        let p = psnr(&rendered, gt, 1.0)?;
        let d = dssim(&rendered, gt)?;
        let masked = match &median {
            Some(med) => {
                let mask = dynamic_mask(gt, med, opts.mask_gamma, opts.mask_threshold)?;
                let coverage =
                    mask.iter().filter(|&&m| m).count() as f64 / mask.len().max(1) as f64;
                masked_mse(&rendered, gt, &mask).map(|m| {
                    let mp = psnr_from_mse(m, 1.0);
                    MaskedMetrics {
                        mse: m,
                        psnr_db: mp.psnr_db,
                        capped: mp.capped,
                        dssim: masked_dssim(&rendered, gt, &mask).unwrap_or(0.0),
                        coverage,
                    }
                })
            }
            None => None,
        };
        rows.push(FrameMetrics {
            frame: t,
            psnr_db: p.psnr_db,
            capped: p.capped,
            mse: p.mse,
            dssim: d,
            masked,
        });
    }
    let n = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&FrameMetrics) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    let masked_rows: Vec<&MaskedMetrics> = rows.iter().filter_map(|r| r.masked.as_ref()).collect();
    let masked_mean = |f: &dyn Fn(&MaskedMetrics) -> f64| {
        (!masked_rows.is_empty())
            .then(|| masked_rows.iter().map(|m| f(m)).sum::<f64>() / masked_rows.len() as f64)
    };
    Ok(MetricReport {
        view_id: view_id.to_string(),
        mean_psnr_db: mean(&|r| r.psnr_db),
        mean_mse: mean(&|r| r.mse),
        mean_dssim: mean(&|r| r.dssim),
        mean_masked_mse: masked_mean(&|m| m.mse),
        mean_masked_dssim: masked_mean(&|m| m.dssim),
        frames: rows,
    })
}

impl MetricReport {
    /// One row per frame plus a mean summary line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "frame,psnr_db,capped,mse,dssim,masked_mse,masked_psnr_db,masked_dssim,mask_coverage\n",
        );
        use std::fmt::Write as _;
        for r in &self.frames {
            let _ = write!(
                s,
                "{},{:.6},{},{:.8e},{:.8e}",
                r.frame, r.psnr_db, r.capped as u8, r.mse, r.dssim
            );
            match &r.masked {
                Some(m) => {
                    let _ = writeln!(
                        s,
                        ",{:.8e},{:.6},{:.8e},{:.4}",
                        m.mse, m.psnr_db, m.dssim, m.coverage
                    );
                }
                None => s.push_str(",,,,\n"),
            }
        }
        let _ = write!(
            s,
            "mean,{:.6},,{:.8e},{:.8e}",
            self.mean_psnr_db, self.mean_mse, self.mean_dssim
        );
        match (self.mean_masked_mse, self.mean_masked_dssim) {
            (Some(m), Some(d)) => {
                let _ = writeln!(s, ",{m:.8e},,{d:.8e},");
            }
            _ => s.push_str(",,,,\n"),
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::EncodingConfig;
    use crate::geometry::{look_at_pose, CameraModel};
    use crate::render::derive_stream;
    use nalgebra::Vector3;
    use rand::Rng;

    fn fill(width: u32, height: u32, f: impl Fn(u32, u32) -> [f32; 3]) -> Image {
        let mut img = Image::new(width, height);
        for r in 0..height {
            for c in 0..width {
                img.set(r, c, f(r, c));
            }
        }
        img
    }

    fn noisy(img: &Image, amp: f32, seed: u64) -> Image {
        let mut rng = derive_stream(&[seed]);
        let mut out = img.clone();
        for v in &mut out.data {
            *v = (*v + amp * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0);
        }
        out
    }

    #[test]
    fn psnr_matches_logarithm_identities() {
        let a = fill(4, 4, |_, _| [0.5; 3]);
        let b = fill(4, 4, |_, _| [0.6; 3]);
        // Uniform 0.1 offset: MSE 0.01 → 20 dB (within f32 pixel rounding).
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p.mse - 0.01).abs() < 1e-7);
        assert!((p.psnr_db - 20.0).abs() < 1e-4);
        assert!(!p.capped);
        // Full-scale difference: MSE 1 → 0 dB.
        let black = fill(4, 4, |_, _| [0.0; 3]);
        let white = fill(4, 4, |_, _| [1.0; 3]);
        let p = psnr(&black, &white, 1.0).unwrap();
        assert!((p.psnr_db - 0.0).abs() < 1e-12);
    }

    #[test]
    fn identical_images_cap_at_99_db() {
        let a = fill(4, 4, |r, c| [r as f32 / 4.0, c as f32 / 4.0, 0.3]);
        let p = psnr(&a, &a.clone(), 1.0).unwrap();
        assert_eq!(p.psnr_db, PSNR_CAP_DB);
        assert!(p.capped);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Image::new(4, 4);
        let b = Image::new(4, 5);
        assert!(psnr(&a, &b, 1.0).is_err());
        assert!(dssim(&a, &b).is_err());
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        let base = fill(16, 16, |r, c| {
            [r as f32 / 16.0, c as f32 / 16.0, 0.5]
        });
        let mut last = f64::INFINITY;
        for (i, amp) in [0.05f32, 0.15, 0.45].iter().enumerate() {
            let p = psnr(&base, &noisy(&base, *amp, 7 + i as u64), 1.0).unwrap();
            assert!(p.psnr_db < last, "amp {amp}: {} !< {last}", p.psnr_db);
            last = p.psnr_db;
        }
    }

    #[test]
    fn dssim_is_zero_on_identity_and_remaps_correctly() {
        assert!((dssim_from_ssim(0.9) - 0.05).abs() < 1e-15);
        let a = fill(16, 12, |r, c| {
            [(r as f32 * 0.07).fract(), (c as f32 * 0.13).fract(), 0.4]
        });
        assert_eq!(dssim(&a, &a.clone()).unwrap(), 0.0);
    }

    #[test]
    fn dssim_is_symmetric_and_bounded_on_random_pairs() {
        let mut rng = derive_stream(&[21]);
        for _ in 0..20 {
            let mut a = Image::new(13, 12);
            let mut b = Image::new(13, 12);
            for v in a.data.iter_mut().chain(b.data.iter_mut()) {
                *v = rng.random::<f32>();
            }
            let ab = dssim(&a, &b).unwrap();
            let ba = dssim(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn images_below_the_window_are_rejected() {
        let a = Image::new(8, 16);
        assert!(dssim(&a, &a.clone()).is_err());
    }

    #[test]
    fn ssim_penalizes_structural_damage_more_than_brightness_shift() {
        let a = fill(24, 24, |r, c| {
            let v = if (r / 4 + c / 4) % 2 == 0 { 0.8 } else { 0.2 };
            [v, v, v]
        });
        let brighter = fill(24, 24, |r, c| {
            let v = if (r / 4 + c / 4) % 2 == 0 { 0.85 } else { 0.25 };
            [v, v, v]
        });
        let scrambled = noisy(&fill(24, 24, |_, _| [0.5; 3]), 0.9, 3);
        let s_bright = ssim(&a, &brighter).unwrap();
        let s_noise = ssim(&a, &scrambled).unwrap();
        assert!(s_bright > 0.9, "{s_bright}");
        assert!(s_noise < s_bright, "{s_noise} !< {s_bright}");
    }

    #[test]
    fn frame_policy_follows_sequence_length() {
        assert_eq!(eval_frames(16), (0..16).collect::<Vec<_>>());
        assert_eq!(eval_frames(299).len(), 299);
        let long = eval_frames(300);
        assert_eq!(long.len(), 30);
        assert_eq!(long[0], 0);
        assert_eq!(long[29], 290);
    }

    fn eval_video(t_count: usize, side: u32) -> MultiViewVideo {
        let cam = CameraModel {
            id: "cam00".into(),
            width: side,
            height: side,
            fx: side as f64,
            fy: side as f64,
            cx: side as f64 / 2.0,
            cy: side as f64 / 2.0,
            world_from_camera: look_at_pose(
                Vector3::new(0.0, 0.0, -3.0),
                Vector3::zeros(),
                Vector3::new(0.0, 1.0, 0.0),
            ),
            near: 1.0,
            far: 5.0,
        };
        let frames = (0..t_count)
            .map(|t| {
                fill(side, side, |r, c| {
                    // A bright block that marches across columns over time.
                    let on = c as usize >= t * 2 && (c as usize) < t * 2 + 4 && r >= 4 && r < 12;
                    if on {
                        [0.9, 0.8, 0.2]
                    } else {
                        [0.1, 0.1, 0.12]
                    }
                })
            })
            .collect();
        MultiViewVideo {
            cameras: vec![cam],
            heldout: vec!["cam00".into()],
            fps: 30.0,
            frames: vec![frames],
        }
    }

    fn tiny_model(t_count: usize) -> FieldModel {
        let encoding = EncodingConfig {
            l_x: 3,
            l_d: 2,
            l_t: 2,
            include_input: true,
        };
        FieldModel::new_dynerf(8, encoding, t_count, 4, 3).unwrap()
    }

    #[test]
    fn sequence_evaluation_scores_every_frame_and_is_deterministic() {
        let video = eval_video(3, 16);
        let model = tiny_model(3);
        let opts = EvalOptions {
            render: RenderConfig {
                n_coarse: 4,
                n_fine: 4,
                deterministic: true,
            },
            dynamic_mask: true,
            downsample: 1,
            ..EvalOptions::default()
        };
        let a = evaluate_sequence(&model, &video, "cam00", &opts).unwrap();
        assert_eq!(a.frames.len(), 3);
        assert!(a.frames.iter().all(|f| f.mse >= 0.0 && f.dssim >= 0.0));
        assert!(a.frames.iter().any(|f| f.masked.is_some()));
        let b = evaluate_sequence(&model, &video, "cam00", &opts).unwrap();
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_eq!(x.psnr_db, y.psnr_db);
            assert_eq!(x.dssim, y.dssim);
        }
        assert!(evaluate_sequence(&model, &video, "nope", &opts).is_err());
    }

    #[test]
    fn self_comparison_reports_capped_psnr_and_zero_dssim() {
        let video = eval_video(2, 16);
        let model = tiny_model(2);
        let opts = EvalOptions {
            render: RenderConfig {
                n_coarse: 4,
                n_fine: 4,
                deterministic: true,
            },
            ..EvalOptions::default()
        };
        // Replace ground truth with the model's own renders.
        let mut synth = video.clone();
        for t in 0..2 {
            synth.frames[0][t] = model
                .render_image(&video.cameras[0], &opts.render, opts.seed, 0, t as f64)
                .unwrap();
        }
        let report = evaluate_sequence(&model, &synth, "cam00", &opts).unwrap();
        for f in &report.frames {
            assert!(f.capped);
            assert_eq!(f.psnr_db, PSNR_CAP_DB);
            assert_eq!(f.dssim, 0.0);
        }
    }

    #[test]
    fn csv_report_has_a_row_per_frame_plus_mean() {
        let video = eval_video(3, 16);
        let model = tiny_model(3);
        let opts = EvalOptions {
            render: RenderConfig {
                n_coarse: 4,
                n_fine: 4,
                deterministic: true,
            },
            ..EvalOptions::default()
        };
        let report = evaluate_sequence(&model, &video, "cam00", &opts).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 1 + 3 + 1);
        assert!(lines[0].starts_with("frame,psnr_db"));
        assert!(lines[4].starts_with("mean,"));
    }

    #[test]
    fn dynamic_mask_tracks_the_moving_block() {
        let video = eval_video(8, 16);
        let median = view_median_map(&video, 0, 1).unwrap();
        let mask = dynamic_mask(video.frame(0, 0), &median, 2e-2, 0.1).unwrap();
        // The block occupies columns 0..4, rows 4..12 at t=0; the static
        // corner pixel stays out of the mask.
        assert!(mask[(5 * 16 + 1) as usize]);
        assert!(!mask[0]);
        let coverage = mask.iter().filter(|&&m| m).count();
        assert!(coverage >= 16 && coverage <= 80, "coverage {coverage}");
    }
}
