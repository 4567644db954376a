//! Hand-written reverse-mode differentiation of the photometric loss through
//! volume compositing and both network levels, down to every weight, bias, and
//! touched latent row.
//!
//! Sample depths are frozen into the batch before differentiation: the loss
//! being differentiated is exactly `batch_loss` on those depths, so central
//! finite differences validate the whole chain. Ray order is deterministic and
//! the batch reduces over fixed 64-ray chunks in chunk order, making gradients
//! bit-identical for any worker count.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{
    encode_into, sigmoid, Conditioning, Dense, FieldModel, LatentTable, LevelCache, LevelParams,
    SKIP_LAYER, TRUNK_DEPTH,
};
use crate::geometry::Ray;
use crate::render::{
    composite_into, derive_stream, merge_sorted, pdf_resample, stratified_samples, Level,
    RenderConfig,
};

/// Rays per parallel reduction chunk. Chunk results are combined serially in
/// chunk order, so the sum never depends on scheduling.
pub const GRAD_CHUNK_RAYS: usize = 64;

/// One training ray with its quadrature depths already decided.
#[derive(Debug, Clone)]
pub struct RaySample {
    pub ray: Ray,
    pub target: [f64; 3],
    /// Integer frame index: the latent row (or t for the time variant).
    pub frame: usize,
    pub depths_coarse: Vec<f64>,
    pub depths_fine: Vec<f64>,
}

/// Gradients in the same containers as the parameters they differentiate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub params: crate::field::FieldParams,
    pub latents: Option<LatentTable>,
    pub loss: f64,
}

impl GradientSet {
    pub fn zeros_like(model: &FieldModel) -> Self {
        GradientSet {
            params: model.params.zeros_like(),
            latents: model
                .latents()
                .map(|t| LatentTable::zeros(t.t_count, t.d)),
            loss: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for ((_, a), (_, b)) in self.params.tensors_mut().into_iter().zip(other.params.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        if let (Some(a), Some(b)) = (self.latents.as_mut(), other.latents.as_ref()) {
            for (x, y) in a.codes.iter_mut().zip(&b.codes) {
                *x += y;
            }
        }
        self.loss += other.loss;
    }

    pub fn max_abs(&self) -> f64 {
        let p = self
            .params
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        let l = self
            .latents
            .iter()
            .flat_map(|t| t.codes.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        p.max(l)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.params.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { layer: name });
            }
        }
        if let Some(t) = &self.latents {
            if t.codes.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    layer: "latents".into(),
                });
            }
        }
        if !self.loss.is_finite() {
            return Err(Error::NonFiniteGradient {
                layer: "loss".into(),
            });
        }
        Ok(())
    }
}

/// Runs the coarse pass and weight-guided resampling to freeze this ray's
/// quadrature depths. The RNG drives stratified jitter and resampling; `None`
/// selects the deterministic midpoint/even-spacing variant.
pub fn prepare_ray(
    model: &FieldModel,
    ray: Ray,
    target: [f64; 3],
    frame: usize,
    cfg: &RenderConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<RaySample> {
    check_frame(model, frame)?;
    let aux = model.aux_at_time(frame as f64);
    let depths_coarse = stratified_samples(ray.near, ray.far, cfg.n_coarse, rng.as_deref_mut())?;
    let mut colors = Vec::with_capacity(depths_coarse.len());
    let mut sigmas = Vec::with_capacity(depths_coarse.len());
    for &s in &depths_coarse {
        let (c, sigma) = model.eval_aux(&aux, &ray.point_at(s), &ray.direction, Level::Coarse)?;
        colors.push(c);
        sigmas.push(sigma);
    }
    let mut weights = vec![0.0; depths_coarse.len()];
    composite_into(&colors, &sigmas, &depths_coarse, ray.far, &mut weights);
    let depths_fine = if cfg.n_fine > 0 {
        let extra = pdf_resample(&weights, &depths_coarse, cfg.n_fine, rng);
        merge_sorted(&depths_coarse, &extra)
    } else {
        depths_coarse.clone()
    };
    Ok(RaySample {
        ray,
        target,
        frame,
        depths_coarse,
        depths_fine,
    })
}

fn check_frame(model: &FieldModel, frame: usize) -> Result<()> {
    if frame >= model.t_count {
        return Err(Error::Invalid(format!(
            "frame {frame} out of range for {} frames",
            model.t_count
        )));
    }
    Ok(())
}

/// The coarse and fine colors of one prepared ray on its frozen depths.
pub fn ray_colors(model: &FieldModel, rs: &RaySample) -> Result<([f64; 3], [f64; 3])> {
    check_frame(model, rs.frame)?;
    let aux = model.aux_at_time(rs.frame as f64);
    let mut out = [[0.0; 3]; 2];
    for (slot, (level, depths)) in [
        (Level::Coarse, &rs.depths_coarse),
        (Level::Fine, &rs.depths_fine),
    ]
    .into_iter()
    .enumerate()
    {
        let mut colors = Vec::with_capacity(depths.len());
        let mut sigmas = Vec::with_capacity(depths.len());
        for &s in depths.iter() {
            let (c, sigma) =
                model.eval_aux(&aux, &rs.ray.point_at(s), &rs.ray.direction, level)?;
            colors.push(c);
            sigmas.push(sigma);
        }
        let mut weights = vec![0.0; depths.len()];
        let (c, _, _) = composite_into(&colors, &sigmas, depths, rs.ray.far, &mut weights);
        out[slot] = c;
    }
    Ok((out[0], out[1]))
}

/// Mean over rays of the summed squared channel error, coarse plus fine, on
/// the batch's frozen depths. This is the exact function `gradients`
/// differentiates.
pub fn batch_loss(model: &FieldModel, batch: &[RaySample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("loss batch is empty".into()));
    }
    let mut total = 0.0;
    for rs in batch {
        let (cc, cf) = ray_colors(model, rs)?;
        total += sq3(&cc, &rs.target) + sq3(&cf, &rs.target);
    }
    Ok(total / batch.len() as f64)
}

fn sq3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Exact gradients of `batch_loss` with respect to every weight, bias, and
/// latent code. Latent rows no ray touches come back zero.
pub fn gradients(model: &FieldModel, batch: &[RaySample]) -> Result<GradientSet> {
    if batch.is_empty() {
        return Err(Error::Invalid("gradient batch is empty".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let partials: Vec<GradientSet> = batch
        .par_chunks(GRAD_CHUNK_RAYS)
        .map(|chunk| {
            let mut grads = GradientSet::zeros_like(model);
            let mut scratch = Scratch::default();
            for rs in chunk {
                ray_backward(model, rs, scale, &mut grads, &mut scratch)?;
            }
            Ok(grads)
        })
        .collect::<Result<_>>()?;
    let mut total = GradientSet::zeros_like(model);
    for p in &partials {
        total.add_assign(p);
    }
    total.check_finite()?;
    Ok(total)
}

#[derive(Default)]
struct Scratch {
    caches: Vec<LevelCache>,
    x0: Vec<f64>,
    pe_d: Vec<f64>,
    colors: Vec<[f64; 3]>,
    sigmas: Vec<f64>,
    weights: Vec<f64>,
    dcolors: Vec<[f64; 3]>,
    dsigmas: Vec<f64>,
    dh: Vec<f64>,
    dnext: Vec<f64>,
    dpre: Vec<f64>,
    dx0: Vec<f64>,
    dv0: Vec<f64>,
    dvin: Vec<f64>,
    dh_head: Vec<f64>,
}

fn ray_backward(
    model: &FieldModel,
    rs: &RaySample,
    scale: f64,
    grads: &mut GradientSet,
    s: &mut Scratch,
) -> Result<()> {
    check_frame(model, rs.frame)?;
    let aux = model.aux_at_time(rs.frame as f64);
    let enc = &model.encoding;
    let pe_x_dim = crate::field::encoded_dim(3, enc.l_x, enc.include_input);
    s.pe_d.clear();
    encode_into(
        rs.ray.direction.as_slice(),
        enc.l_d,
        enc.include_input,
        &mut s.pe_d,
    );

    for (level, label, depths) in [
        (Level::Coarse, "coarse", &rs.depths_coarse),
        (Level::Fine, "fine", &rs.depths_fine),
    ] {
        let n = depths.len();
        let lp = model.params.level(level);
        if s.caches.len() < n {
            s.caches.resize_with(n, LevelCache::default);
        }
        s.colors.clear();
        s.sigmas.clear();
        for (i, &depth) in depths.iter().enumerate() {
            s.x0.clear();
            encode_into(
                rs.ray.point_at(depth).as_slice(),
                enc.l_x,
                enc.include_input,
                &mut s.x0,
            );
            s.x0.extend_from_slice(&aux);
            let (c, sigma) = lp.forward_cached(&s.x0, &s.pe_d, true, label, &mut s.caches[i])?;
            s.colors.push(c);
            s.sigmas.push(sigma);
        }
        s.weights.resize(n, 0.0);
        let (color, _, _) =
            composite_into(&s.colors, &s.sigmas, depths, rs.ray.far, &mut s.weights[..n]);

        grads.loss += scale * sq3(&color, &rs.target);
        let g = [
            2.0 * scale * (color[0] - rs.target[0]),
            2.0 * scale * (color[1] - rs.target[1]),
            2.0 * scale * (color[2] - rs.target[2]),
        ];

        composite_backward(
            &s.colors,
            &s.sigmas,
            depths,
            rs.ray.far,
            &s.weights[..n],
            &g,
            &mut s.dcolors,
            &mut s.dsigmas,
        );

        let gl = grads.params.level_mut(level);
        let daux = match (&model.conditioning, grads.latents.as_mut()) {
            (Conditioning::Latent(_), Some(table)) => Some(table.row_mut(rs.frame)),
            _ => None,
        };
        let mut daux = daux;
        for i in 0..n {
            sample_backward(
                lp,
                gl,
                &s.caches[i],
                s.dcolors[i],
                s.dsigmas[i],
                pe_x_dim,
                daux.as_deref_mut(),
                &mut s.dh,
                &mut s.dnext,
                &mut s.dpre,
                &mut s.dx0,
                &mut s.dv0,
                &mut s.dvin,
                &mut s.dh_head,
            );
        }
    }
    Ok(())
}

/// Differentiates C = Σ wᵢcᵢ with wᵢ = Tᵢ(1 − e^{−σᵢδᵢ}), Tᵢ = e^{−Σ_{j<i}σⱼδⱼ}:
/// ∂L/∂cᵢ = wᵢ·g and ∂L/∂σᵢ = δᵢ(Tᵢ₊₁·(g·cᵢ) − Σ_{k>i} wₖ(g·cₖ)), the second
/// term because raising σᵢ shades every later sample.
#[allow(clippy::too_many_arguments)]
fn composite_backward(
    colors: &[[f64; 3]],
    sigmas: &[f64],
    depths: &[f64],
    far: f64,
    weights: &[f64],
    g: &[f64; 3],
    dcolors: &mut Vec<[f64; 3]>,
    dsigmas: &mut Vec<f64>,
) {
    let n = depths.len();
    dcolors.clear();
    dsigmas.clear();
    let dots: Vec<f64> = colors
        .iter()
        .map(|c| g[0] * c[0] + g[1] * c[1] + g[2] * c[2])
        .collect();
    let total: f64 = weights.iter().zip(&dots).map(|(w, d)| w * d).sum();
    let mut prefix = 0.0;
    let mut transmittance = 1.0;
    for i in 0..n {
        let delta = if i + 1 < n {
            depths[i + 1] - depths[i]
        } else {
            far - depths[i]
        };
        let attenuation = (-sigmas[i] * delta).exp();
        dcolors.push([weights[i] * g[0], weights[i] * g[1], weights[i] * g[2]]);
        prefix += weights[i] * dots[i];
        let suffix = total - prefix;
        let trans_after = transmittance * attenuation;
        dsigmas.push(delta * (trans_after * dots[i] - suffix));
        transmittance = trans_after;
    }
}

/// Backpropagates one sample's (dcolor, dsigma) through heads, trunk, and skip,
/// accumulating into the gradient containers and, when present, the latent row.
#[allow(clippy::too_many_arguments)]
fn sample_backward(
    lp: &LevelParams,
    gl: &mut LevelParams,
    cache: &LevelCache,
    dcolor: [f64; 3],
    dsigma: f64,
    pe_x_dim: usize,
    daux: Option<&mut [f64]>,
    dh: &mut Vec<f64>,
    dnext: &mut Vec<f64>,
    dpre: &mut Vec<f64>,
    dx0: &mut Vec<f64>,
    dv0: &mut Vec<f64>,
    dvin: &mut Vec<f64>,
    dh_head: &mut Vec<f64>,
) {
    let w = lp.width;

    // View branch: sigmoid' = c(1 − c) from the stored color.
    let draw1 = [
        dcolor[0] * cache.color[0] * (1.0 - cache.color[0]),
        dcolor[1] * cache.color[1] * (1.0 - cache.color[1]),
        dcolor[2] * cache.color[2] * (1.0 - cache.color[2]),
    ];
    dense_backward(&lp.view1, &mut gl.view1, &cache.v0, &draw1, Some(dv0));
    relu_mask(dv0, &cache.v0);
    dense_backward(&lp.view0, &mut gl.view0, &cache.view_in, dv0, Some(dvin));

    // Density head: softplus' = sigmoid(raw).
    let draw_sigma = [dsigma * sigmoid(cache.raw_sigma)];
    let h_last = &cache.h[TRUNK_DEPTH - 1];
    dense_backward(&lp.density, &mut gl.density, h_last, &draw_sigma, Some(dh));
    dense_backward(&lp.feature, &mut gl.feature, h_last, &dvin[..w], Some(dh_head));
    for (a, b) in dh.iter_mut().zip(dh_head.iter()) {
        *a += b;
    }

    dx0.clear();
    dx0.resize(cache.x0.len(), 0.0);
    for l in (0..TRUNK_DEPTH).rev() {
        relu_mask(dh, &cache.h[l]);
        std::mem::swap(dh, dpre);
        let input: &[f64] = match l {
            0 => &cache.x0,
            SKIP_LAYER => &cache.skip_in,
            _ => &cache.h[l - 1],
        };
        dense_backward(&lp.trunk[l], &mut gl.trunk[l], input, dpre, Some(dnext));
        match l {
            0 => {
                for (a, b) in dx0.iter_mut().zip(dnext.iter()) {
                    *a += b;
                }
            }
            SKIP_LAYER => {
                dh.clear();
                dh.extend_from_slice(&dnext[..w]);
                for (a, b) in dx0.iter_mut().zip(&dnext[w..]) {
                    *a += b;
                }
            }
            _ => std::mem::swap(dh, dnext),
        }
    }

    if let Some(daux) = daux {
        for (a, b) in daux.iter_mut().zip(&dx0[pe_x_dim..]) {
            *a += b;
        }
    }
}

/// dW += dout ⊗ input, db += dout, and optionally dinput = Wᵀ·dout.
fn dense_backward(
    layer: &Dense,
    grad: &mut Dense,
    input: &[f64],
    dout: &[f64],
    dinput: Option<&mut Vec<f64>>,
) {
    debug_assert_eq!(input.len(), layer.in_dim);
    debug_assert_eq!(dout.len(), layer.out_dim);
    for (o, &d) in dout.iter().enumerate() {
        grad.b[o] += d;
        if d != 0.0 {
            let row = &mut grad.w[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (gw, x) in row.iter_mut().zip(input) {
                *gw += d * x;
            }
        }
    }
    if let Some(di) = dinput {
        di.clear();
        di.resize(layer.in_dim, 0.0);
        for (o, &d) in dout.iter().enumerate() {
            if d != 0.0 {
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (acc, w) in di.iter_mut().zip(row) {
                    *acc += d * w;
                }
            }
        }
    }
}

/// Zeroes the upstream gradient wherever the stored post-ReLU activation is 0.
fn relu_mask(d: &mut [f64], activation: &[f64]) {
    for (g, a) in d.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// One finite-difference validation run: a randomized small model and batch,
/// checked at a numerically generic point.
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub width: usize,
    /// Some(D) builds the latent variant, None the time-input variant.
    pub latent_dim: Option<usize>,
    pub rays: usize,
    pub samples_per_ray: usize,
    pub frame_count: usize,
    /// Central-difference step.
    pub step: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub worst_rel_err: f64,
    pub scalars: usize,
    /// Seed-search attempts taken to reach a kink-free evaluation point.
    pub attempts: u32,
}

/// Compares `gradients` against central finite differences of `batch_loss`
/// for every trainable scalar.
///
/// ReLU makes the loss piecewise smooth: a pre-activation within the step of
/// its kink breaks the comparison even when the analytic gradient is exact.
/// Random init with zero biases is maximally hostile here (late-trunk
/// activations collapse toward 0), so the probe rescales weights, draws biases
/// clear of zero, and re-seeds until every pre-activation clears a margin of
/// 3 steps; the check then runs at a generic point of the same code path
/// training uses.
pub fn finite_difference_probe(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let encoding = crate::field::EncodingConfig {
        l_x: 4,
        l_d: 2,
        l_t: 2,
        include_input: true,
    };
    let kind = match cfg.latent_dim {
        Some(d) => crate::field::ConditioningKind::Latent { d },
        None => crate::field::ConditioningKind::Time,
    };
    let margin_needed = 3.0 * cfg.step;
    for attempt in 0..200 {
        let seed = cfg.seed.wrapping_add(0x9e3779b9 * attempt as u64);
        let mut model = FieldModel::init(cfg.width, encoding, cfg.frame_count, kind, seed)?;
        condition_for_gradcheck(&mut model, &mut derive_stream(&[seed, 0xb1a5]));
        let batch = probe_batch(&model, cfg, seed)?;
        if preactivation_margin(&model, &batch)? < margin_needed {
            continue;
        }
        let grads = gradients(&model, &batch)?;
        let mut worst = 0.0_f64;
        let count = model.scalar_count();
        for idx in 0..count {
            let base = *scalar_slot_mut(&mut model, idx).expect("idx < scalar_count");
            *scalar_slot_mut(&mut model, idx).unwrap() = base + cfg.step;
            let up = batch_loss(&model, &batch)?;
            *scalar_slot_mut(&mut model, idx).unwrap() = base - cfg.step;
            let down = batch_loss(&model, &batch)?;
            *scalar_slot_mut(&mut model, idx).unwrap() = base;
            let fd = (up - down) / (2.0 * cfg.step);
            let an = scalar_grad(&grads, idx).expect("congruent shapes");
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
            worst = worst.max(rel);
        }
        return Ok(GradCheckReport {
            worst_rel_err: worst,
            scalars: count,
            attempts: attempt + 1,
        });
    }
    Err(Error::Invalid(
        "no kink-free evaluation point found in 200 seed attempts".into(),
    ))
}

/// Moves the model to a generic operating point: √2 gain on the deep trunk
/// layers keeps activation scale from collapsing with depth, and biases drawn
/// from ±[0.1, 0.4] put every unit decisively on or off.
fn condition_for_gradcheck(model: &mut FieldModel, rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for lp in [&mut model.params.coarse, &mut model.params.fine] {
        for l in 1..TRUNK_DEPTH {
            for w in &mut lp.trunk[l].w {
                *w *= std::f64::consts::SQRT_2;
            }
        }
        for layer in lp.layers_mut() {
            for b in &mut layer.b {
                let mag = rng.random_range(0.1..0.4);
                *b = if rng.random::<bool>() { mag } else { -mag };
            }
        }
    }
}

fn probe_batch(model: &FieldModel, cfg: &GradCheckConfig, seed: u64) -> Result<Vec<RaySample>> {
    use rand::Rng;
    let render = RenderConfig {
        n_coarse: cfg.samples_per_ray,
        n_fine: cfg.samples_per_ray,
        deterministic: false,
    };
    (0..cfg.rays)
        .map(|i| {
            let mut rng = derive_stream(&[seed, 0xbeef, i as u64]);
            let frame = i % cfg.frame_count;
            let ray = Ray {
                origin: nalgebra::Vector3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                ),
                direction: nalgebra::Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    1.0,
                )
                .normalize(),
                near: 0.5,
                far: 3.0,
                source: crate::geometry::RaySource {
                    view: 0,
                    row: 0,
                    col: i as u32,
                    t: frame as u32,
                },
            };
            let target = [rng.random(), rng.random(), rng.random()];
            prepare_ray(model, ray, target, frame, &render, Some(&mut rng))
        })
        .collect()
}

/// Smallest |pre-activation| over every ReLU unit the batch evaluates; the
/// distance of this operating point from the nearest activation kink.
pub fn preactivation_margin(model: &FieldModel, batch: &[RaySample]) -> Result<f64> {
    let enc = &model.encoding;
    let mut margin = f64::INFINITY;
    let mut track = |pre: &[f64]| {
        for v in pre {
            margin = margin.min(v.abs());
        }
    };
    for rs in batch {
        check_frame(model, rs.frame)?;
        let aux = model.aux_at_time(rs.frame as f64);
        let mut pe_d = Vec::new();
        encode_into(rs.ray.direction.as_slice(), enc.l_d, enc.include_input, &mut pe_d);
        for (level, depths) in [
            (Level::Coarse, &rs.depths_coarse),
            (Level::Fine, &rs.depths_fine),
        ] {
            let lp = model.params.level(level);
            for &depth in depths.iter() {
                let mut x0 = Vec::new();
                encode_into(
                    rs.ray.point_at(depth).as_slice(),
                    enc.l_x,
                    enc.include_input,
                    &mut x0,
                );
                x0.extend_from_slice(&aux);
                let mut cur = x0.clone();
                let mut pre = Vec::new();
                for l in 0..TRUNK_DEPTH {
                    let input = if l == SKIP_LAYER {
                        let mut joined = cur.clone();
                        joined.extend_from_slice(&x0);
                        joined
                    } else {
                        cur
                    };
                    lp.trunk[l].forward_into(&input, &mut pre);
                    track(&pre);
                    cur = pre.iter().map(|v| v.max(0.0)).collect();
                }
                let mut feature = Vec::new();
                lp.feature.forward_into(&cur, &mut feature);
                feature.extend_from_slice(&pe_d);
                lp.view0.forward_into(&feature, &mut pre);
                track(&pre);
            }
        }
    }
    Ok(margin)
}

/// Flat index over every trainable scalar: parameter tensors in declaration
/// order, then latent codes. Gradcheck drives perturbations through this.
pub fn scalar_slot_mut(model: &mut FieldModel, mut idx: usize) -> Option<&mut f64> {
    let param_count = model.params.scalar_count();
    if idx < param_count {
        for (_, t) in model.params.tensors_mut() {
            if idx < t.len() {
                return Some(&mut t[idx]);
            }
            idx -= t.len();
        }
        unreachable!("scalar_count covers every tensor");
    }
    idx -= param_count;
    match model.latents_mut() {
        Some(table) if idx < table.codes.len() => Some(&mut table.codes[idx]),
        _ => None,
    }
}

/// The gradient scalar at the same flat index as `scalar_slot_mut`.
pub fn scalar_grad(grads: &GradientSet, mut idx: usize) -> Option<f64> {
    for (_, t) in grads.params.tensors() {
        if idx < t.len() {
            return Some(t[idx]);
        }
        idx -= t.len();
    }
    match &grads.latents {
        Some(table) if idx < table.codes.len() => Some(table.codes[idx]),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ConditioningKind, EncodingConfig, FieldModel};
    use crate::geometry::{RaySource, Ray};
    use crate::render::derive_stream;
    use nalgebra::Vector3;

    fn test_ray(ox: f64, dir: Vector3<f64>, t: u32) -> Ray {
        Ray {
            origin: Vector3::new(ox, 0.0, 0.0),
            direction: dir.normalize(),
            near: 0.5,
            far: 3.0,
            source: RaySource {
                view: 0,
                row: 0,
                col: 0,
                t,
            },
        }
    }

    fn small_encoding() -> EncodingConfig {
        EncodingConfig {
            l_x: 3,
            l_d: 2,
            l_t: 2,
            include_input: true,
        }
    }

    fn small_batch(model: &FieldModel, frames: &[usize], n_fine: usize) -> Vec<RaySample> {
        let cfg = RenderConfig {
            n_coarse: 4,
            n_fine,
            deterministic: false,
        };
        let targets = [[0.9, 0.1, 0.4], [0.2, 0.7, 0.5], [0.05, 0.3, 0.95]];
        frames
            .iter()
            .enumerate()
            .map(|(i, &frame)| {
                let dir = Vector3::new(0.2 * i as f64 - 0.1, 0.1, 1.0);
                let mut rng = derive_stream(&[99, i as u64]);
                prepare_ray(
                    model,
                    test_ray(0.1 * i as f64, dir, frame as u32),
                    targets[i % targets.len()],
                    frame,
                    &cfg,
                    Some(&mut rng),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn finite_differences_validate_every_latent_model_gradient() {
        let report = finite_difference_probe(&GradCheckConfig {
            width: 8,
            latent_dim: Some(4),
            rays: 2,
            samples_per_ray: 4,
            frame_count: 3,
            step: 1e-4,
            seed: 5,
        })
        .unwrap();
        assert!(
            report.worst_rel_err < 1e-4,
            "worst relative gradient error {:.3e} over {} scalars",
            report.worst_rel_err,
            report.scalars
        );
    }

    #[test]
    fn finite_differences_validate_the_time_variant_too() {
        let report = finite_difference_probe(&GradCheckConfig {
            width: 8,
            latent_dim: None,
            rays: 2,
            samples_per_ray: 4,
            frame_count: 4,
            step: 1e-4,
            seed: 6,
        })
        .unwrap();
        assert!(
            report.worst_rel_err < 1e-4,
            "worst relative gradient error {:.3e} over {} scalars",
            report.worst_rel_err,
            report.scalars
        );
    }

    #[test]
    fn perfect_predictions_have_zero_gradient() {
        let mut model = FieldModel::init(
            8,
            small_encoding(),
            3,
            ConditioningKind::Latent { d: 4 },
            5,
        )
        .unwrap();
        // With identical levels and no resampling the coarse and fine colors
        // coincide, so targets equal to the prediction zero the whole loss.
        model.params.fine = model.params.coarse.clone();
        let mut batch = small_batch(&model, &[0, 1], 0);
        for rs in &mut batch {
            let (cc, cf) = ray_colors(&model, rs).unwrap();
            assert_eq!(cc, cf);
            rs.target = cc;
        }
        let grads = gradients(&model, &batch).unwrap();
        assert_eq!(grads.loss, 0.0);
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn only_touched_latent_rows_get_gradient() {
        let model = FieldModel::init(
            8,
            small_encoding(),
            6,
            ConditioningKind::Latent { d: 4 },
            5,
        )
        .unwrap();
        let batch = small_batch(&model, &[3, 3], 4);
        let grads = gradients(&model, &batch).unwrap();
        let table = grads.latents.unwrap();
        for t in 0..6 {
            let touched = table.row(t).iter().any(|v| *v != 0.0);
            assert_eq!(touched, t == 3, "row {t}");
        }
    }

    #[test]
    fn gradients_are_identical_for_any_worker_count() {
        let model = FieldModel::init(
            8,
            small_encoding(),
            3,
            ConditioningKind::Latent { d: 4 },
            5,
        )
        .unwrap();
        let frames: Vec<usize> = (0..130).map(|i| i % 3).collect();
        let batch = small_batch(&model, &frames, 2);
        let reference = gradients(&model, &batch).unwrap();
        for workers in [1, 2, 4] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .unwrap();
            let got = pool.install(|| gradients(&model, &batch).unwrap());
            assert!(got == reference, "diverged at {workers} workers");
        }
    }

    #[test]
    fn poisoned_weight_names_its_layer() {
        let mut model = FieldModel::init(
            8,
            small_encoding(),
            3,
            ConditioningKind::Latent { d: 4 },
            5,
        )
        .unwrap();
        let batch = small_batch(&model, &[0], 4);
        model.params.coarse.trunk[3].w[0] = f64::NAN;
        let err = gradients(&model, &batch).unwrap_err();
        match err {
            Error::NonFiniteActivation { layer } => assert_eq!(layer, "coarse.trunk3"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn targets_are_unused_by_sampling_so_batches_are_reusable() {
        // Freezing depths once and editing targets afterwards changes only the
        // loss, not where the quadrature samples sit.
        let model = FieldModel::init(
            8,
            small_encoding(),
            3,
            ConditioningKind::Latent { d: 4 },
            5,
        )
        .unwrap();
        let mut batch = small_batch(&model, &[0, 1], 4);
        let depths: Vec<Vec<f64>> = batch.iter().map(|b| b.depths_fine.clone()).collect();
        for rs in &mut batch {
            rs.target = [0.0, 0.0, 0.0];
        }
        for (rs, d) in batch.iter().zip(&depths) {
            assert_eq!(&rs.depths_fine, d);
        }
    }
}
