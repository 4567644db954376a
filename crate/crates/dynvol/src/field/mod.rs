//! The conditioned radiance field F(x, d, aux) -> (color, sigma), where aux is
//! either a per-frame latent code (looked up and linearly interpolated from a
//! table) or a positional encoding of normalized time (the time-input
//! baseline). Coarse and fine networks share one architecture and, for the
//! latent variant, one code table.
//!
//! Storage is flat row-major `Vec<f64>` per layer; every tensor is visible
//! through `tensors()` in one fixed declaration order that the optimizer,
//! gradient container, and checkpoint format all share.

pub mod grad;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imagebuf::Image;
use crate::render::{derive_stream, render_image_field, Level, RadianceField, RenderConfig};

pub const TRUNK_DEPTH: usize = 8;
/// Trunk layer whose input is concat(previous activation, trunk input).
pub const SKIP_LAYER: usize = 5;

const TAG_LAYER: u64 = 0x4c59;
const TAG_LATENT: u64 = 0x5a54;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodingConfig {
    /// Frequency count for position.
    pub l_x: usize,
    /// Frequency count for view direction.
    pub l_d: usize,
    /// Frequency count for normalized time (time-conditioned baseline only).
    pub l_t: usize,
    /// Prepend the raw coordinate to its sinusoid features.
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            l_x: 10,
            l_d: 4,
            l_t: 4,
            include_input: true,
        }
    }
}

/// Encoded length of a k-vector: k·(1 + 2L) with the raw input, k·2L without.
pub fn encoded_dim(k: usize, l: usize, include_input: bool) -> usize {
    k * (2 * l + include_input as usize)
}

/// Appends, per coordinate p in order: optionally p, then
/// sin(2⁰p), cos(2⁰p), …, sin(2^{L−1}p), cos(2^{L−1}p).
pub fn encode_into(v: &[f64], l: usize, include_input: bool, out: &mut Vec<f64>) {
    out.reserve(encoded_dim(v.len(), l, include_input));
    for &p in v {
        if include_input {
            out.push(p);
        }
        for j in 0..l {
            let a = f64::exp2(j as f64) * p;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
}

pub fn positional_encode(v: &[f64], l: usize, include_input: bool) -> Vec<f64> {
    let mut out = Vec::new();
    encode_into(v, l, include_input, &mut out);
    out
}

/// ln(1 + e^x), computed without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer, weights row-major `w[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut layer = Dense::zeros(in_dim, out_dim);
        for w in &mut layer.w {
            *w = rng.random_range(-limit..limit);
        }
        layer
    }

    pub fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let acc: f64 = row.iter().zip(x).map(|(w, x)| w * x).sum();
            out.push(acc + self.b[o]);
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

fn relu_inplace(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// (in, out) shape of every layer of one network level, in declaration order:
/// trunk 0..8, density head, feature head, view branch 0, view branch 1.
pub fn level_layer_dims(width: usize, in_x: usize, in_d: usize) -> [(usize, usize); 12] {
    let w = width;
    [
        (in_x, w),
        (w, w),
        (w, w),
        (w, w),
        (w, w),
        (w + in_x, w),
        (w, w),
        (w, w),
        (w, 1),
        (w, w),
        (w + in_d, w / 2),
        (w / 2, 3),
    ]
}

/// One network level: eight-layer ReLU trunk with a skip concatenation of the
/// trunk input at layer 5, a linear density head through softplus, a linear
/// feature head, and a two-layer view branch ending in a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelParams {
    pub width: usize,
    pub trunk: Vec<Dense>,
    pub density: Dense,
    pub feature: Dense,
    pub view0: Dense,
    pub view1: Dense,
}

/// Intermediate activations of one forward pass, retained for the backward
/// pass. `h[l]` is the post-ReLU output of trunk layer l.
#[derive(Debug, Default, Clone)]
pub struct LevelCache {
    pub x0: Vec<f64>,
    pub pe_d: Vec<f64>,
    pub h: Vec<Vec<f64>>,
    pub skip_in: Vec<f64>,
    pub feature: Vec<f64>,
    pub view_in: Vec<f64>,
    pub v0: Vec<f64>,
    pub raw_sigma: f64,
    pub sigma: f64,
    pub color: [f64; 3],
    head_tmp: Vec<f64>,
}

impl LevelParams {
    fn build(width: usize, in_x: usize, in_d: usize, mut make: impl FnMut(usize, usize, usize) -> Dense) -> Self {
        let dims = level_layer_dims(width, in_x, in_d);
        let mut layers: Vec<Dense> = dims
            .iter()
            .enumerate()
            .map(|(i, &(din, dout))| make(i, din, dout))
            .collect();
        let view1 = layers.pop().unwrap();
        let view0 = layers.pop().unwrap();
        let feature = layers.pop().unwrap();
        let density = layers.pop().unwrap();
        LevelParams {
            width,
            trunk: layers,
            density,
            feature,
            view0,
            view1,
        }
    }

    pub fn zeros(width: usize, in_x: usize, in_d: usize) -> Self {
        Self::build(width, in_x, in_d, |_, din, dout| Dense::zeros(din, dout))
    }

    /// Per-layer RNG streams keyed by (seed, level, layer index), so one
    /// layer's shape never shifts another layer's draw.
    pub fn init(width: usize, in_x: usize, in_d: usize, seed: u64, level_tag: u64) -> Self {
        Self::build(width, in_x, in_d, |i, din, dout| {
            let mut rng = derive_stream(&[seed, TAG_LAYER, level_tag, i as u64]);
            Dense::glorot(din, dout, &mut rng)
        })
    }

    pub fn in_x(&self) -> usize {
        self.trunk[0].in_dim
    }

    pub fn in_d(&self) -> usize {
        self.view0.in_dim - self.width
    }

    /// Layers in declaration order.
    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk
            .iter()
            .chain([&self.density, &self.feature, &self.view0, &self.view1])
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk
            .iter_mut()
            .chain([&mut self.density, &mut self.feature, &mut self.view0, &mut self.view1])
    }

    pub fn scalar_count(&self) -> usize {
        self.layers().map(Dense::scalar_count).sum()
    }

    /// Forward pass through the full level; fills `cache` for a later
    /// backward pass. `check` validates every activation block and names the
    /// layer in the error; the rendering path leaves it off because composite
    /// input validation already guards σ.
    pub fn forward_cached(
        &self,
        x0: &[f64],
        pe_d: &[f64],
        check: bool,
        label: &str,
        cache: &mut LevelCache,
    ) -> Result<([f64; 3], f64)> {
        debug_assert_eq!(x0.len(), self.in_x());
        debug_assert_eq!(pe_d.len(), self.in_d());
        cache.x0.clear();
        cache.x0.extend_from_slice(x0);
        cache.pe_d.clear();
        cache.pe_d.extend_from_slice(pe_d);
        if cache.h.len() != TRUNK_DEPTH {
            cache.h = vec![Vec::new(); TRUNK_DEPTH];
        }
        for l in 0..TRUNK_DEPTH {
            if l == SKIP_LAYER {
                cache.skip_in.clear();
                cache.skip_in.extend_from_slice(&cache.h[l - 1]);
                cache.skip_in.extend_from_slice(x0);
            }
            let (before, rest) = cache.h.split_at_mut(l);
            let input: &[f64] = match l {
                0 => x0,
                SKIP_LAYER => &cache.skip_in,
                _ => &before[l - 1],
            };
            self.trunk[l].forward_into(input, &mut rest[0]);
            // Pre-activation check: relu's max() would turn NaN into 0 and
            // hide the corruption.
            if check {
                ensure_finite(&rest[0], label, &format!("trunk{l}"))?;
            }
            relu_inplace(&mut rest[0]);
        }
        let h_last = &cache.h[TRUNK_DEPTH - 1];

        self.density.forward_into(h_last, &mut cache.head_tmp);
        cache.raw_sigma = cache.head_tmp[0];
        cache.sigma = softplus(cache.raw_sigma);

        self.feature.forward_into(h_last, &mut cache.feature);
        if check {
            ensure_finite(&cache.feature, label, "feature")?;
            ensure_finite(&[cache.raw_sigma], label, "density")?;
        }

        cache.view_in.clear();
        cache.view_in.extend_from_slice(&cache.feature);
        cache.view_in.extend_from_slice(pe_d);
        self.view0.forward_into(&cache.view_in, &mut cache.v0);
        if check {
            ensure_finite(&cache.v0, label, "view0")?;
        }
        relu_inplace(&mut cache.v0);

        self.view1.forward_into(&cache.v0, &mut cache.head_tmp);
        cache.color = [
            sigmoid(cache.head_tmp[0]),
            sigmoid(cache.head_tmp[1]),
            sigmoid(cache.head_tmp[2]),
        ];
        Ok((cache.color, cache.sigma))
    }
}

fn ensure_finite(v: &[f64], label: &str, layer: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteActivation {
            layer: format!("{label}.{layer}"),
        });
    }
    Ok(())
}

/// Coarse and fine networks; independent parameters, identical shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub coarse: LevelParams,
    pub fine: LevelParams,
}

impl FieldParams {
    pub fn zeros(width: usize, in_x: usize, in_d: usize) -> Self {
        FieldParams {
            coarse: LevelParams::zeros(width, in_x, in_d),
            fine: LevelParams::zeros(width, in_x, in_d),
        }
    }

    pub fn init(width: usize, in_x: usize, in_d: usize, seed: u64) -> Self {
        FieldParams {
            coarse: LevelParams::init(width, in_x, in_d, seed, 0),
            fine: LevelParams::init(width, in_x, in_d, seed, 1),
        }
    }

    pub fn level(&self, level: Level) -> &LevelParams {
        match level {
            Level::Coarse => &self.coarse,
            Level::Fine => &self.fine,
        }
    }

    pub fn level_mut(&mut self, level: Level) -> &mut LevelParams {
        match level {
            Level::Coarse => &mut self.coarse,
            Level::Fine => &mut self.fine,
        }
    }

    /// All weight and bias tensors with stable names, in the one declaration
    /// order shared by the optimizer and the checkpoint format.
    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::with_capacity(48);
        for (tag, lp) in [("coarse", &self.coarse), ("fine", &self.fine)] {
            for (i, layer) in lp.layers().enumerate() {
                out.push((format!("{tag}.{}.w", layer_name(i)), &layer.w));
                out.push((format!("{tag}.{}.b", layer_name(i)), &layer.b));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::with_capacity(48);
        for (tag, lp) in [("coarse", &mut self.coarse), ("fine", &mut self.fine)] {
            for (i, layer) in lp.layers_mut().enumerate() {
                out.push((format!("{tag}.{}.w", layer_name(i)), &mut layer.w));
                out.push((format!("{tag}.{}.b", layer_name(i)), &mut layer.b));
            }
        }
        out
    }

    pub fn zeros_like(&self) -> FieldParams {
        FieldParams::zeros(self.coarse.width, self.coarse.in_x(), self.coarse.in_d())
    }

    pub fn scalar_count(&self) -> usize {
        self.coarse.scalar_count() + self.fine.scalar_count()
    }
}

fn layer_name(i: usize) -> String {
    match i {
        0..=7 => format!("trunk{i}"),
        8 => "density".into(),
        9 => "feature".into(),
        10 => "view0".into(),
        11 => "view1".into(),
        _ => unreachable!("level has 12 layers"),
    }
}

/// Closed-form trainable-scalar count of one level; shapes are a pure function
/// of (width, encoded input dims).
pub fn level_scalar_count(width: usize, in_x: usize, in_d: usize) -> usize {
    level_layer_dims(width, in_x, in_d)
        .iter()
        .map(|&(i, o)| i * o + o)
        .sum()
}

/// One latent code per frame, row-major T × D.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTable {
    pub t_count: usize,
    pub d: usize,
    pub codes: Vec<f64>,
}

impl LatentTable {
    pub fn zeros(t_count: usize, d: usize) -> Self {
        LatentTable {
            t_count,
            d,
            codes: vec![0.0; t_count * d],
        }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.codes[t * self.d..(t + 1) * self.d]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.codes[t * self.d..(t + 1) * self.d]
    }

    /// Projects row t back to unit ℓ2 norm; zero rows are left untouched.
    pub fn normalize_row(&mut self, t: usize) {
        let row = self.row_mut(t);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row {
                *v /= norm;
            }
        }
    }

    pub fn max_row_norm_deviation(&self) -> f64 {
        (0..self.t_count)
            .map(|t| {
                let n = self.row(t).iter().map(|v| v * v).sum::<f64>().sqrt();
                (n - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Clamped linear interpolation between neighboring rows; integer t
    /// returns its row bit-exactly, and the interpolant is not renormalized.
    pub fn at_time_into(&self, t: f64, out: &mut Vec<f64>) {
        let t = t.clamp(0.0, (self.t_count - 1) as f64);
        let i0 = t.floor() as usize;
        let lam = t - i0 as f64;
        out.clear();
        if lam == 0.0 {
            out.extend_from_slice(self.row(i0));
        } else {
            let i1 = (i0 + 1).min(self.t_count - 1);
            out.extend(
                self.row(i0)
                    .iter()
                    .zip(self.row(i1))
                    .map(|(a, b)| (1.0 - lam) * a + lam * b),
            );
        }
    }
}

/// i.i.d. 𝒩(0, 0.01/√D) entries, then each row projected to unit norm. Rows
/// draw from independent streams keyed by (seed, frame), so frame count never
/// reshuffles earlier rows.
pub fn init_latents(t_count: usize, d: usize, seed: u64) -> LatentTable {
    let mut table = LatentTable::zeros(t_count, d);
    for t in 0..t_count {
        table.row_mut(t).copy_from_slice(&raw_latent_row(seed, t, d));
        table.normalize_row(t);
    }
    table
}

/// The pre-projection draw, exposed for distribution checks.
fn raw_latent_row(seed: u64, row: usize, d: usize) -> Vec<f64> {
    let mut rng = derive_stream(&[seed, TAG_LATENT, row as u64]);
    let normal = Normal::new(0.0, 0.01 / (d as f64).sqrt()).expect("positive std");
    (0..d).map(|_| normal.sample(&mut rng)).collect()
}

pub fn latent_at_time(table: &LatentTable, t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(table.d);
    table.at_time_into(t, &mut out);
    out
}

/// What conditions the trunk besides position.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditioning {
    /// Auto-decoded per-frame codes, fed to the trunk raw (never positionally
    /// encoded), shared by the coarse and fine networks.
    Latent(LatentTable),
    /// Positional encoding of t/T; no trainable state.
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningKind {
    Latent { d: usize },
    Time,
}

/// A complete trainable model: architecture constants plus every trainable
/// tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel {
    pub width: usize,
    pub encoding: EncodingConfig,
    /// Frame count T: latent row count for the latent variant, the time
    /// normalizer t/T for the time variant.
    pub t_count: usize,
    pub conditioning: Conditioning,
    pub params: FieldParams,
}

impl FieldModel {
    fn dims(encoding: &EncodingConfig, aux_dim: usize) -> (usize, usize) {
        let in_x = encoded_dim(3, encoding.l_x, encoding.include_input) + aux_dim;
        let in_d = encoded_dim(3, encoding.l_d, encoding.include_input);
        (in_x, in_d)
    }

    fn check_shape(width: usize, t_count: usize) -> Result<()> {
        if width < 2 {
            return Err(Error::Config(format!("trunk width must be ≥ 2, got {width}")));
        }
        if t_count < 1 {
            return Err(Error::Config("frame count must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Zero-valued tensors in the right shapes; checkpoint loading fills them.
    pub fn allocate(
        width: usize,
        encoding: EncodingConfig,
        t_count: usize,
        kind: ConditioningKind,
    ) -> Result<Self> {
        Self::check_shape(width, t_count)?;
        let (conditioning, aux_dim) = match kind {
            ConditioningKind::Latent { d } => {
                if d < 1 {
                    return Err(Error::Config("latent dimension must be ≥ 1".into()));
                }
                (Conditioning::Latent(LatentTable::zeros(t_count, d)), d)
            }
            ConditioningKind::Time => (
                Conditioning::Time,
                encoded_dim(1, encoding.l_t, encoding.include_input),
            ),
        };
        let (in_x, in_d) = Self::dims(&encoding, aux_dim);
        Ok(FieldModel {
            width,
            encoding,
            t_count,
            conditioning,
            params: FieldParams::zeros(width, in_x, in_d),
        })
    }

    /// Glorot-uniform weights, zero biases, unit-norm latent rows.
    pub fn init(
        width: usize,
        encoding: EncodingConfig,
        t_count: usize,
        kind: ConditioningKind,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::allocate(width, encoding, t_count, kind)?;
        let (in_x, in_d) = (model.params.coarse.in_x(), model.params.coarse.in_d());
        model.params = FieldParams::init(width, in_x, in_d, seed);
        if let Conditioning::Latent(table) = &mut model.conditioning {
            *table = init_latents(table.t_count, table.d, seed);
        }
        Ok(model)
    }

    pub fn new_dynerf(
        width: usize,
        encoding: EncodingConfig,
        t_count: usize,
        d: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::init(width, encoding, t_count, ConditioningKind::Latent { d }, seed)
    }

    pub fn new_nerf_t(
        width: usize,
        encoding: EncodingConfig,
        t_count: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::init(width, encoding, t_count, ConditioningKind::Time, seed)
    }

    pub fn kind(&self) -> ConditioningKind {
        match &self.conditioning {
            Conditioning::Latent(t) => ConditioningKind::Latent { d: t.d },
            Conditioning::Time => ConditioningKind::Time,
        }
    }

    pub fn latents(&self) -> Option<&LatentTable> {
        match &self.conditioning {
            Conditioning::Latent(t) => Some(t),
            Conditioning::Time => None,
        }
    }

    pub fn latents_mut(&mut self) -> Option<&mut LatentTable> {
        match &mut self.conditioning {
            Conditioning::Latent(t) => Some(t),
            Conditioning::Time => None,
        }
    }

    /// Width of the trunk conditioning input.
    pub fn aux_dim(&self) -> usize {
        match &self.conditioning {
            Conditioning::Latent(t) => t.d,
            Conditioning::Time => encoded_dim(1, self.encoding.l_t, self.encoding.include_input),
        }
    }

    /// Trainable scalars, latent codes included.
    pub fn scalar_count(&self) -> usize {
        self.params.scalar_count()
            + match &self.conditioning {
                Conditioning::Latent(t) => t.codes.len(),
                Conditioning::Time => 0,
            }
    }

    /// Conditioning vector for continuous frame time t ∈ [0, T−1]: an
    /// interpolated latent code, or the encoding of t/T.
    pub fn aux_at_time(&self, t: f64) -> Vec<f64> {
        match &self.conditioning {
            Conditioning::Latent(table) => latent_at_time(table, t),
            Conditioning::Time => positional_encode(
                &[t / self.t_count as f64],
                self.encoding.l_t,
                self.encoding.include_input,
            ),
        }
    }

    /// Core evaluation with an explicit conditioning vector.
    pub fn eval_aux(
        &self,
        aux: &[f64],
        x: &Vector3<f64>,
        d: &Vector3<f64>,
        level: Level,
    ) -> Result<([f64; 3], f64)> {
        if aux.len() != self.aux_dim() {
            return Err(Error::LatentDimMismatch {
                expected: self.aux_dim(),
                got: aux.len(),
            });
        }
        let mut x0 = Vec::new();
        encode_into(x.as_slice(), self.encoding.l_x, self.encoding.include_input, &mut x0);
        x0.extend_from_slice(aux);
        let mut pe_d = Vec::new();
        encode_into(d.as_slice(), self.encoding.l_d, self.encoding.include_input, &mut pe_d);
        let mut cache = LevelCache::default();
        self.params
            .level(level)
            .forward_cached(&x0, &pe_d, false, "", &mut cache)
    }

    /// Latent-conditioned evaluation; z is fed to the trunk raw.
    pub fn eval_dynerf(
        &self,
        z: &[f64],
        x: &Vector3<f64>,
        d: &Vector3<f64>,
        level: Level,
    ) -> Result<([f64; 3], f64)> {
        match &self.conditioning {
            Conditioning::Latent(table) if z.len() != table.d => Err(Error::LatentDimMismatch {
                expected: table.d,
                got: z.len(),
            }),
            Conditioning::Latent(_) => self.eval_aux(z, x, d, level),
            Conditioning::Time => Err(Error::Invalid(
                "model is time-conditioned; it takes no latent code".into(),
            )),
        }
    }

    /// Time-input evaluation for the baseline variant.
    pub fn eval_nerf_t(
        &self,
        x: &Vector3<f64>,
        d: &Vector3<f64>,
        t: f64,
        level: Level,
    ) -> Result<([f64; 3], f64)> {
        match &self.conditioning {
            Conditioning::Time => self.eval_aux(&self.aux_at_time(t), x, d, level),
            Conditioning::Latent(_) => Err(Error::Invalid(
                "model is latent-conditioned; evaluate it through a latent code".into(),
            )),
        }
    }

    /// Snapshot of the field at one time, usable as a `RadianceField`.
    pub fn at_time(&self, t: f64) -> FieldAtTime<'_> {
        FieldAtTime {
            model: self,
            aux: self.aux_at_time(t),
        }
    }

    pub fn render_image(
        &self,
        camera: &crate::geometry::CameraModel,
        cfg: &RenderConfig,
        seed: u64,
        view_tag: u64,
        t: f64,
    ) -> Result<Image> {
        render_image_field(&self.at_time(t), camera, cfg, seed, view_tag, t)
    }

    pub fn validate(&self) -> Result<()> {
        Self::check_shape(self.width, self.t_count)?;
        if let Conditioning::Latent(table) = &self.conditioning {
            if table.t_count != self.t_count {
                return Err(Error::Invalid(format!(
                    "latent table has {} rows for {} frames",
                    table.t_count, self.t_count
                )));
            }
        }
        let (in_x, in_d) = Self::dims(&self.encoding, self.aux_dim());
        for lp in [&self.params.coarse, &self.params.fine] {
            if lp.width != self.width || lp.in_x() != in_x || lp.in_d() != in_d {
                return Err(Error::Invalid(format!(
                    "level shape ({}, {}, {}) does not match architecture ({}, {in_x}, {in_d})",
                    lp.width,
                    lp.in_x(),
                    lp.in_d(),
                    self.width
                )));
            }
            for (i, (layer, (din, dout))) in lp
                .layers()
                .zip(level_layer_dims(self.width, in_x, in_d))
                .enumerate()
            {
                if layer.in_dim != din
                    || layer.out_dim != dout
                    || layer.w.len() != din * dout
                    || layer.b.len() != dout
                {
                    return Err(Error::Invalid(format!(
                        "layer {} has shape ({}, {}), expected ({din}, {dout})",
                        layer_name(i),
                        layer.in_dim,
                        layer.out_dim
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Borrowed model with its conditioning vector resolved for a fixed time.
pub struct FieldAtTime<'a> {
    pub model: &'a FieldModel,
    pub aux: Vec<f64>,
}

impl RadianceField for FieldAtTime<'_> {
    fn eval(&self, level: Level, x: &Vector3<f64>, d: &Vector3<f64>) -> ([f64; 3], f64) {
        self.model
            .eval_aux(&self.aux, x, d, level)
            .expect("aux built by the model itself")
    }
}
