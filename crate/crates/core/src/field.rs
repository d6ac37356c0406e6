//! The coarse condition field: a small text-conditioned radiance field.
//!
//! A multilayer perceptron maps positionally encoded 3D points, concatenated
//! with a mean-pooled embedding of the coarse text ("color shape"), to a
//! density (softplus head) and an RGB color (sigmoid head). Pixel colors come
//! from discrete volume-rendering quadrature over stratified samples along
//! camera rays, composited onto the dataset's constant background through the
//! residual transmittance. The whole render is built on the autodiff graph,
//! so photometric regression against downsampled ground-truth views trains
//! the field end to end.
//!
//! The trained field's job is to supply cheap, 3D-consistent low-resolution
//! renders — one per camera pose — that condition the diffusion model. It has
//! no view-dependent effects by construction: ray directions steer geometry
//! only, never the network input.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::error::{Error, Result};
use crate::numerics::adam::{adam_step, AdamConfig, AdamState};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::io::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::numerics::params::{ParamBinder, Params};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::scenegen::{load_image, CameraPose, DatasetManifest, Split, BACKGROUND, N_AZIMUTHS, NULL_ID};

/// A camera ray with its sampling interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    /// Unit direction (checked to 1e-6 at construction).
    pub direction: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: [f64; 3], direction: [f64; 3], t_near: f64, t_far: f64) -> Result<Self> {
        let finite = origin.iter().chain(&direction).all(|v| v.is_finite())
            && t_near.is_finite()
            && t_far.is_finite();
        if !finite {
            return Err(Error::InvalidArgument {
                op: "ray",
                reason: "non-finite component".into(),
            });
        }
        let norm =
            (direction[0] * direction[0] + direction[1] * direction[1] + direction[2] * direction[2])
                .sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument {
                op: "ray",
                reason: format!("direction norm {norm} is not 1 ± 1e-6"),
            });
        }
        if !(t_near < t_far) {
            return Err(Error::InvalidArgument {
                op: "ray",
                reason: format!("need t_near < t_far, got [{t_near}, {t_far}]"),
            });
        }
        Ok(Ray {
            origin,
            direction,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

/// One ray per pixel of the pose, row-major. Sampling bounds are
/// radius ∓ 1: scenes are confined to the unit ball, and every point of that
/// ball lies within distance 1 of the camera's orbit radius along a unit
/// direction, so the slab [radius−1, radius+1] covers all possible chords.
pub fn pixel_rays(pose: &CameraPose) -> Result<Vec<Ray>> {
    let n = pose.image_size;
    if n == 0 {
        return Err(Error::InvalidArgument {
            op: "pixel_rays",
            reason: "pose has zero image size".into(),
        });
    }
    let mut rays = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let (o, d) = pose.pixel_ray(row, col);
            rays.push(Ray::new(o, d, pose.radius - 1.0, pose.radius + 1.0)?);
        }
    }
    Ok(rays)
}

/// Sinusoidal positional encoding: for each frequency k < `l_pe`, the blocks
/// sin(2^k π p) and cos(2^k π p) over the three coordinates, followed by the
/// raw point. Output length 3(2·l_pe + 1).
pub fn encode_position(p: [f64; 3], l_pe: usize) -> Vec<f64> {
    assert!(l_pe >= 1, "positional encoding needs at least one frequency");
    let mut out = Vec::with_capacity(3 * (2 * l_pe + 1));
    for k in 0..l_pe {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        for a in 0..3 {
            out.push((f * p[a]).sin());
        }
        for a in 0..3 {
            out.push((f * p[a]).cos());
        }
    }
    out.extend_from_slice(&p);
    out
}

/// Encode a batch of points into an (N, 3(2·l_pe+1)) feature matrix.
pub fn encode_points<T: Scalar>(points: &[[f64; 3]], l_pe: usize) -> Tensor<T> {
    let width = 3 * (2 * l_pe + 1);
    let mut data = Vec::with_capacity(points.len() * width);
    for &p in points {
        data.extend(encode_position(p, l_pe));
    }
    Tensor::new(vec![points.len(), width], data)
        .expect("row width is uniform by construction")
        .cast()
}

/// Stratified sample positions along a ray batch: per-ray sample distances,
/// forward differences, and world-space points, each in ray-major order.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub n_rays: usize,
    pub n_samples: usize,
    /// Sample distances, length n_rays · n_samples.
    pub ts: Vec<f64>,
    /// δ_i = t_{i+1} − t_i, closing with t_far − t_last; all positive.
    pub deltas: Vec<f64>,
    /// Points o + t·d matching `ts`.
    pub points: Vec<[f64; 3]>,
}

impl RaySamples {
    pub fn deltas_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(vec![self.n_rays, self.n_samples], self.deltas.clone())
            .expect("delta buffer matches its shape")
            .cast()
    }
}

/// Draw one sample per stratum of each ray's [t_near, t_far]. With an RNG the
/// offset within each stratum is uniform; without one, strata midpoints are
/// used, which makes evaluation renders deterministic.
pub fn sample_stratified(
    rays: &[Ray],
    n_samples: usize,
    mut rng: Option<&mut ChaCha12Rng>,
) -> Result<RaySamples> {
    if rays.is_empty() {
        return Err(Error::InvalidArgument {
            op: "sample_stratified",
            reason: "empty ray batch".into(),
        });
    }
    if n_samples < 2 {
        return Err(Error::InvalidArgument {
            op: "sample_stratified",
            reason: format!("need at least 2 samples per ray, got {n_samples}"),
        });
    }
    let mut ts = Vec::with_capacity(rays.len() * n_samples);
    let mut deltas = Vec::with_capacity(rays.len() * n_samples);
    let mut points = Vec::with_capacity(rays.len() * n_samples);
    for ray in rays {
        let h = (ray.t_far - ray.t_near) / n_samples as f64;
        let base = ts.len();
        for j in 0..n_samples {
            let u = match rng.as_deref_mut() {
                Some(r) => r.gen::<f64>(),
                None => 0.5,
            };
            let t = ray.t_near + (j as f64 + u) * h;
            ts.push(t);
            points.push(ray.at(t));
        }
        for j in 0..n_samples {
            let next = if j + 1 < n_samples {
                ts[base + j + 1]
            } else {
                ray.t_far
            };
            deltas.push(next - ts[base + j]);
        }
    }
    Ok(RaySamples {
        n_rays: rays.len(),
        n_samples,
        ts,
        deltas,
        points,
    })
}

/// Architecture and training settings for the condition field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// Positional-encoding frequency count.
    pub l_pe: usize,
    /// Width of per-token text embeddings (mean-pooled over the coarse text).
    pub embed_dim: usize,
    /// Hidden layer width.
    pub hidden: usize,
    /// Number of hidden layers.
    pub depth: usize,
    /// Rows in the token embedding table.
    pub vocab_size: usize,
    /// Render resolution of the coarse conditioning images.
    pub coarse_res: usize,
    /// Stratified samples per ray during training, where jitter averages out
    /// quadrature bias across steps.
    pub n_samples: usize,
    /// Samples per ray for conditioning renders, where a single deterministic
    /// pass must already be converged; higher than the training rate.
    pub render_samples: usize,
    /// Optimizer steps for `train_field`.
    pub steps: usize,
    pub lr: f64,
    /// Probability of replacing the coarse text with the null token for a
    /// step, so the field also learns an unconditioned prior.
    pub null_dropout: f64,
    pub seed: u64,
    /// Azimuth index excluded from training (novel-view evaluation).
    pub holdout_azimuth: Option<usize>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            l_pe: 6,
            embed_dim: 16,
            hidden: 64,
            depth: 3,
            vocab_size: crate::scenegen::vocabulary().len(),
            coarse_res: 8,
            n_samples: 64,
            render_samples: 128,
            steps: 2000,
            lr: 3e-3,
            null_dropout: 0.1,
            seed: 0,
            holdout_azimuth: None,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidArgument {
            op: "field_config",
            reason,
        };
        if self.l_pe < 1 {
            return Err(bad("l_pe must be at least 1".into()));
        }
        if self.embed_dim < 1 || self.hidden < 1 || self.depth < 1 || self.vocab_size < 1 {
            return Err(bad("embed_dim, hidden, depth, vocab_size must be positive".into()));
        }
        if self.coarse_res < 2 {
            return Err(bad(format!("coarse resolution {} is too small", self.coarse_res)));
        }
        if self.n_samples < 2 || self.render_samples < 2 {
            return Err(bad(format!(
                "sample counts must be at least 2, got {} and {}",
                self.n_samples, self.render_samples
            )));
        }
        if self.steps < 1 {
            return Err(bad("steps must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(bad(format!("learning rate {} must be positive and finite", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.null_dropout) {
            return Err(bad(format!("null_dropout {} outside [0, 1]", self.null_dropout)));
        }
        if let Some(h) = self.holdout_azimuth {
            if h >= N_AZIMUTHS {
                return Err(bad(format!("holdout azimuth {h} outside [0, {N_AZIMUTHS})")));
            }
        }
        Ok(())
    }

    /// Length of the positional-encoding feature vector.
    pub fn feature_len(&self) -> usize {
        3 * (2 * self.l_pe + 1)
    }
}

/// Parameter names and shapes implied by a config, in registration order.
fn expected_shapes(cfg: &FieldConfig) -> Vec<(String, Vec<usize>)> {
    let mut v = vec![("field.embed".to_string(), vec![cfg.vocab_size, cfg.embed_dim])];
    let mut fan_in = cfg.feature_len() + cfg.embed_dim;
    for i in 0..cfg.depth {
        v.push((format!("field.l{i}.w"), vec![fan_in, cfg.hidden]));
        v.push((format!("field.l{i}.b"), vec![cfg.hidden]));
        fan_in = cfg.hidden;
    }
    v.push(("field.sigma.w".to_string(), vec![cfg.hidden, 1]));
    v.push(("field.sigma.b".to_string(), vec![1]));
    v.push(("field.color.w".to_string(), vec![cfg.hidden, 3]));
    v.push(("field.color.b".to_string(), vec![3]));
    v
}

/// Fresh parameters: Gaussian hidden layers scaled by √(2/fan_in), a Gaussian
/// embedding table, and — deliberately — zero output heads, so an untrained
/// field starts at the uniform density softplus(0) with mid-gray colors.
pub fn init_field_params<T: Scalar>(cfg: &FieldConfig, rng: &mut ChaCha12Rng) -> Result<Params<T>> {
    cfg.validate()?;
    let mut params = Params::new();
    for (name, shape) in expected_shapes(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<T> = if name.ends_with(".b") || name.starts_with("field.sigma") || name.starts_with("field.color") {
            vec![T::ZERO; n]
        } else {
            let std = if name == "field.embed" {
                0.5
            } else {
                (2.0 / shape[0] as f64).sqrt()
            };
            (0..n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    T::from_f64(z * std)
                })
                .collect()
        };
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

/// Run the MLP on encoded points under the given coarse text, returning the
/// post-activation density (N, 1) and color (N, 3) nodes. An empty token list
/// falls back to the null token. The pooled text embedding is replicated
/// across rows inside the graph, so gradients flow back into the table.
/// How a field evaluation is text-conditioned: token ids looked up in the
/// field's own table, or externally supplied embedding rows (one per token)
/// of the table's width — the entry point for interpolated conditioning.
/// Rows gathered from the table render bit-identically to their token ids,
/// since both paths feed the same pooling graph.
#[derive(Debug, Clone, Copy)]
pub enum FieldText<'a, T: Scalar> {
    Tokens(&'a [usize]),
    Rows(&'a Tensor<T>),
}

pub fn field_forward<T: Scalar>(
    g: &mut Graph<T>,
    binder: &ParamBinder,
    cfg: &FieldConfig,
    encoded: &Tensor<T>,
    tokens: &[usize],
) -> Result<(NodeId, NodeId)> {
    field_forward_cond(g, binder, cfg, encoded, FieldText::Tokens(tokens))
}

pub fn field_forward_cond<T: Scalar>(
    g: &mut Graph<T>,
    binder: &ParamBinder,
    cfg: &FieldConfig,
    encoded: &Tensor<T>,
    text: FieldText<'_, T>,
) -> Result<(NodeId, NodeId)> {
    let n = encoded.shape()[0];
    if encoded.shape().len() != 2 || encoded.shape()[1] != cfg.feature_len() {
        return Err(Error::InvalidShape {
            op: "field_forward",
            shape: encoded.shape().to_vec(),
            reason: format!("expected (N, {})", cfg.feature_len()),
        });
    }
    let null_tokens = [NULL_ID];

    let pe = g.constant(encoded)?;
    let (emb, n_tokens) = match text {
        FieldText::Tokens(tokens) => {
            let tokens: &[usize] = if tokens.is_empty() { &null_tokens } else { tokens };
            let table = binder.node("field.embed")?;
            (g.embed(table, tokens)?, tokens.len())
        }
        FieldText::Rows(rows) => {
            let s = rows.shape();
            if s.len() != 2 || s[0] == 0 || s[1] != cfg.embed_dim {
                return Err(Error::InvalidShape {
                    op: "field_forward",
                    shape: s.to_vec(),
                    reason: format!("embedding rows must be (len >= 1, {})", cfg.embed_dim),
                });
            }
            (g.constant(rows)?, s[0])
        }
    };
    // Mean-pool the (L, D) token rows, then replicate to (N, D) — both with
    // constant one matrices so the pooled embedding stays differentiable.
    let pool = g.constant(&Tensor::new(vec![1, n_tokens], vec![1.0; n_tokens])?.cast())?;
    let sum = g.matmul(pool, emb)?;
    let mean = g.mul_scalar(sum, T::from_f64(1.0 / n_tokens as f64));
    let rep = g.constant(&Tensor::new(vec![n, 1], vec![1.0; n])?.cast())?;
    let text = g.matmul(rep, mean)?;

    let mut x = g.concat_axis1(pe, text)?;
    for i in 0..cfg.depth {
        let w = binder.node(&format!("field.l{i}.w"))?;
        let b = binder.node(&format!("field.l{i}.b"))?;
        let lin = g.matmul(x, w)?;
        let lin = g.add_bias_row(lin, b)?;
        x = g.silu(lin);
    }
    let sw = binder.node("field.sigma.w")?;
    let sb = binder.node("field.sigma.b")?;
    let sraw = g.matmul(x, sw)?;
    let sraw = g.add_bias_row(sraw, sb)?;
    let sigma = g.softplus(sraw);

    let cw = binder.node("field.color.w")?;
    let cb = binder.node("field.color.b")?;
    let craw = g.matmul(x, cw)?;
    let craw = g.add_bias_row(craw, cb)?;
    let color = g.sigmoid(craw);
    Ok((sigma, color))
}

/// Graph nodes produced by volume compositing, kept separately inspectable so
/// tests and diagnostics can read weights and transmittance directly.
#[derive(Debug, Clone, Copy)]
pub struct RenderNodes {
    /// Composited colors, (R, 3).
    pub rgb: NodeId,
    /// Quadrature weights w_i = T_i(1 − e^{−σ_i δ_i}), (R, S).
    pub weights: NodeId,
    /// Transmittance T_i at each sample, (R, S).
    pub trans: NodeId,
    /// Residual transmittance past the last sample, (R, 1).
    pub t_final: NodeId,
}

/// Discrete volume rendering: given per-sample densities (R, S) and colors
/// (R, S, 3) with sample spacings δ (R, S), accumulate
/// Σ_i T_i (1 − e^{−σ_i δ_i}) c_i + T_final · background.
pub fn composite<T: Scalar>(
    g: &mut Graph<T>,
    sigma: NodeId,
    color: NodeId,
    deltas: &Tensor<T>,
    background: [f64; 3],
) -> Result<RenderNodes> {
    let d = g.constant(deltas)?;
    let optical = g.mul(sigma, d)?;
    let acc = g.cumsum_exclusive(optical)?;
    let neg_acc = g.neg(acc);
    let trans = g.exp(neg_acc)?;

    let shape = deltas.shape().to_vec();
    let ones = g.constant(&Tensor::new(shape, vec![1.0; deltas.len()])?.cast())?;
    let neg_optical = g.neg(optical);
    let through = g.exp(neg_optical)?;
    let alpha = g.sub(ones, through)?;
    let weights = g.mul(trans, alpha)?;
    let body = g.weighted_sum_samples(weights, color)?;

    let total = g.sum_axis_last(optical)?;
    let neg_total = g.neg(total);
    let t_final = g.exp(neg_total)?;
    let bg = g.constant(&Tensor::new(vec![1, 3], background.to_vec())?.cast())?;
    let residual = g.matmul(t_final, bg)?;
    let rgb = g.add(body, residual)?;
    Ok(RenderNodes {
        rgb,
        weights,
        trans,
        t_final,
    })
}

/// Full differentiable render of pre-sampled rays: encode, run the field,
/// composite. Returns the render's graph nodes.
pub fn render_rays_nodes<T: Scalar>(
    g: &mut Graph<T>,
    binder: &ParamBinder,
    cfg: &FieldConfig,
    samples: &RaySamples,
    tokens: &[usize],
    background: [f64; 3],
) -> Result<RenderNodes> {
    render_rays_nodes_cond(g, binder, cfg, samples, FieldText::Tokens(tokens), background)
}

/// [`render_rays_nodes`] with either token or embedding-row conditioning.
pub fn render_rays_nodes_cond<T: Scalar>(
    g: &mut Graph<T>,
    binder: &ParamBinder,
    cfg: &FieldConfig,
    samples: &RaySamples,
    text: FieldText<'_, T>,
    background: [f64; 3],
) -> Result<RenderNodes> {
    let encoded = encode_points::<T>(&samples.points, cfg.l_pe);
    let (sigma, color) = field_forward_cond(g, binder, cfg, &encoded, text)?;
    let (r, s) = (samples.n_rays, samples.n_samples);
    let sigma = g.reshape(sigma, vec![r, s])?;
    let color = g.reshape(color, vec![r, s, 3])?;
    composite(g, sigma, color, &samples.deltas_tensor(), background)
}

/// A low-resolution conditioning render: the image, the pose it was rendered
/// from, and the coarse text it was conditioned on.
#[derive(Debug, Clone)]
pub struct CoarseImage {
    /// [3, r, r] with values in [0, 1].
    pub image: Tensor<f32>,
    pub pose: CameraPose,
    pub tokens: Vec<usize>,
}

impl CoarseImage {
    /// Values may overshoot [0, 1] by float rounding only; they are clamped.
    /// Anything worse is rejected as a wiring bug.
    pub fn new(mut image: Tensor<f32>, pose: CameraPose, tokens: Vec<usize>) -> Result<Self> {
        let n = pose.image_size;
        if image.shape() != [3, n, n] {
            return Err(Error::InvalidShape {
                op: "coarse_image",
                shape: image.shape().to_vec(),
                reason: format!("expected [3, {n}, {n}] to match the pose"),
            });
        }
        for v in image.data_mut() {
            if !(-1e-3..=1.0 + 1e-3).contains(&(*v as f64)) {
                return Err(Error::InvalidArgument {
                    op: "coarse_image",
                    reason: format!("value {v} far outside [0, 1]"),
                });
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(CoarseImage {
            image,
            pose,
            tokens,
        })
    }

    pub fn resolution(&self) -> usize {
        self.pose.image_size
    }
}

/// The condition field: configuration plus trained parameters.
#[derive(Debug, Clone)]
pub struct FieldNet {
    pub config: FieldConfig,
    pub params: Params<f32>,
}

impl FieldNet {
    pub fn init(config: &FieldConfig) -> Result<Self> {
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let params = init_field_params::<f32>(config, &mut rng)?;
        Ok(FieldNet {
            config: config.clone(),
            params,
        })
    }

    /// Evaluate density and color at raw points under a coarse text.
    pub fn eval_points(
        &self,
        points: &[[f64; 3]],
        tokens: &[usize],
    ) -> Result<(Vec<f32>, Vec<[f32; 3]>)> {
        if points.is_empty() {
            return Err(Error::InvalidArgument {
                op: "eval_points",
                reason: "empty point batch".into(),
            });
        }
        let mut g = Graph::<f32>::new();
        let binder = ParamBinder::bind(&mut g, &self.params, false)?;
        let encoded = encode_points::<f32>(points, self.config.l_pe);
        let (sigma, color) = field_forward(&mut g, &binder, &self.config, &encoded, tokens)?;
        let sv = g.value(sigma).to_vec();
        let cv: Vec<[f32; 3]> = g
            .value(color)
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok((sv, cv))
    }

    /// The table rows for a token sequence (empty text gives the null row):
    /// the starting point for embedding-space interpolation, which feeds the
    /// interpolated rows back through [`FieldText::Rows`].
    pub fn embedding_rows(&self, tokens: &[usize]) -> Result<Tensor<f32>> {
        let null_tokens = [NULL_ID];
        let tokens: &[usize] = if tokens.is_empty() { &null_tokens } else { tokens };
        let table = self.params.get("field.embed")?;
        let d = self.config.embed_dim;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= self.config.vocab_size {
                return Err(Error::UnknownToken {
                    token: format!("id {t}"),
                });
            }
            data.extend_from_slice(&table.data()[t * d..(t + 1) * d]);
        }
        Tensor::new(vec![tokens.len(), d], data)
    }

    /// Render a ray batch to RGB. Rays are processed in bounded-size chunks
    /// so arbitrarily large batches don't balloon the graph; chunking does
    /// not change the jitter stream (draws happen in ray order either way).
    pub fn render_rays(
        &self,
        rays: &[Ray],
        tokens: &[usize],
        n_samples: usize,
        rng: Option<&mut ChaCha12Rng>,
    ) -> Result<Vec<[f32; 3]>> {
        self.render_rays_cond(rays, FieldText::Tokens(tokens), n_samples, rng)
    }

    /// [`Self::render_rays`] with either token or embedding-row conditioning.
    pub fn render_rays_cond(
        &self,
        rays: &[Ray],
        text: FieldText<'_, f32>,
        n_samples: usize,
        mut rng: Option<&mut ChaCha12Rng>,
    ) -> Result<Vec<[f32; 3]>> {
        if rays.is_empty() {
            return Err(Error::InvalidArgument {
                op: "render_rays",
                reason: "empty ray batch".into(),
            });
        }
        let chunk = (32_768 / n_samples.max(1)).max(1);
        let mut out = Vec::with_capacity(rays.len());
        for band in rays.chunks(chunk) {
            let samples = sample_stratified(band, n_samples, rng.as_deref_mut())?;
            let mut g = Graph::<f32>::new();
            let binder = ParamBinder::bind(&mut g, &self.params, false)?;
            let nodes =
                render_rays_nodes_cond(&mut g, &binder, &self.config, &samples, text, BACKGROUND)?;
            out.extend(
                g.value(nodes.rgb)
                    .chunks_exact(3)
                    .map(|c| [c[0], c[1], c[2]]),
            );
        }
        Ok(out)
    }

    /// Render every pixel of a pose into a [3, n, n] image.
    pub fn render_pose(
        &self,
        pose: &CameraPose,
        tokens: &[usize],
        n_samples: usize,
        rng: Option<&mut ChaCha12Rng>,
    ) -> Result<Tensor<f32>> {
        self.render_pose_cond(pose, FieldText::Tokens(tokens), n_samples, rng)
    }

    /// [`Self::render_pose`] with either token or embedding-row conditioning.
    pub fn render_pose_cond(
        &self,
        pose: &CameraPose,
        text: FieldText<'_, f32>,
        n_samples: usize,
        rng: Option<&mut ChaCha12Rng>,
    ) -> Result<Tensor<f32>> {
        let rays = pixel_rays(pose)?;
        let rgb = self.render_rays_cond(&rays, text, n_samples, rng)?;
        let n = pose.image_size;
        let mut data = vec![0.0f32; 3 * n * n];
        for (pix, c) in rgb.iter().enumerate() {
            for ch in 0..3 {
                data[ch * n * n + pix] = c[ch];
            }
        }
        Tensor::new(vec![3, n, n], data)
    }

    /// The conditioning render for one pose: deterministic (midpoint strata)
    /// at the configured coarse resolution and sample count.
    pub fn coarse_image(&self, pose: &CameraPose, tokens: &[usize]) -> Result<CoarseImage> {
        if pose.image_size != self.config.coarse_res {
            return Err(Error::InvalidArgument {
                op: "coarse_image",
                reason: format!(
                    "pose renders at {}, the field's coarse resolution is {}",
                    pose.image_size, self.config.coarse_res
                ),
            });
        }
        let image = self.render_pose(pose, tokens, self.config.render_samples, None)?;
        CoarseImage::new(image, *pose, tokens.to_vec())
    }

    /// Write parameters, metadata, and the config needed to reload them.
    pub fn save(&self, dir: &Path, step: u64) -> Result<()> {
        let hash = config_hash(&self.config)?;
        save_checkpoint(dir, &self.params, step, &hash)?;
        let path = dir.join("field_config.json");
        let body = serde_json::to_string_pretty(&self.config)
            .map_err(|e| Error::msg(format!("field config does not serialize: {e}")))?;
        std::fs::write(&path, body + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointMeta)> {
        let path = dir.join("field_config.json");
        let body =
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: FieldConfig = serde_json::from_str(&body).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            reason: format!("{e}"),
        })?;
        config.validate()?;
        let (params, meta) = load_checkpoint::<f32>(dir)?;
        for (name, shape) in expected_shapes(&config) {
            let t = params.get(&name).map_err(|_| Error::Malformed {
                path: dir.display().to_string(),
                reason: format!("checkpoint is missing parameter {name:?}"),
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Malformed {
                    path: dir.display().to_string(),
                    reason: format!(
                        "parameter {name:?} has shape {:?}, config implies {shape:?}",
                        t.shape()
                    ),
                });
            }
        }
        Ok((FieldNet { config, params }, meta))
    }
}

/// Box-average downsampling of a [3, R, R] image to [3, r, r]; R must be a
/// multiple of r. This defines the training target resolution.
pub fn downsample_avg(img: &Tensor<f32>, out_res: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
        return Err(Error::InvalidShape {
            op: "downsample_avg",
            shape: s.to_vec(),
            reason: "expected a square [3, R, R] image".into(),
        });
    }
    let r_in = s[1];
    if out_res == 0 || r_in % out_res != 0 {
        return Err(Error::InvalidArgument {
            op: "downsample_avg",
            reason: format!("{r_in} is not a multiple of target resolution {out_res}"),
        });
    }
    let f = r_in / out_res;
    let norm = 1.0 / (f * f) as f64;
    let src = img.data();
    let mut data = vec![0.0f32; 3 * out_res * out_res];
    for c in 0..3 {
        for i in 0..out_res {
            for j in 0..out_res {
                let mut acc = 0.0f64;
                for di in 0..f {
                    for dj in 0..f {
                        acc += src[c * r_in * r_in + (i * f + di) * r_in + (j * f + dj)] as f64;
                    }
                }
                data[c * out_res * out_res + i * out_res + j] = (acc * norm) as f32;
            }
        }
    }
    Tensor::new(vec![3, out_res, out_res], data)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Photometric MSE per optimizer step.
    pub losses: Vec<f64>,
}

struct TrainView {
    rays: Vec<Ray>,
    /// Downsampled ground truth as (pixels, 3), matching the render layout.
    target: Tensor<f32>,
    tokens: Vec<usize>,
}

fn collect_train_views(
    manifest: &DatasetManifest,
    data_dir: &Path,
    cfg: &FieldConfig,
) -> Result<Vec<TrainView>> {
    if manifest.resolution % cfg.coarse_res != 0 {
        return Err(Error::InvalidArgument {
            op: "train_field",
            reason: format!(
                "dataset resolution {} is not a multiple of coarse resolution {}",
                manifest.resolution, cfg.coarse_res
            ),
        });
    }
    let mut views = Vec::new();
    for scene in manifest.scenes.iter().filter(|s| s.split == Split::Train) {
        let tokens = crate::scenegen::tokenize(&scene.coarse_text)?;
        for view in &scene.views {
            if cfg.holdout_azimuth == Some(view.azimuth_index) {
                continue;
            }
            let img = load_image(&data_dir.join(&view.image))?;
            let coarse = downsample_avg(&img, cfg.coarse_res)?;
            let r = cfg.coarse_res;
            let mut tgt = vec![0.0f32; r * r * 3];
            for pix in 0..r * r {
                for ch in 0..3 {
                    tgt[pix * 3 + ch] = coarse.data()[ch * r * r + pix];
                }
            }
            let pose = CameraPose::new(
                view.azimuth_index,
                view.elevation,
                manifest.radius,
                manifest.focal,
                cfg.coarse_res,
            )?;
            views.push(TrainView {
                rays: pixel_rays(&pose)?,
                target: Tensor::new(vec![r * r, 3], tgt)?,
                tokens: tokens.clone(),
            });
        }
    }
    if views.is_empty() {
        return Err(Error::InvalidArgument {
            op: "train_field",
            reason: "no training views: check the split and holdout settings".into(),
        });
    }
    Ok(views)
}

/// Photometric training: each step renders one training view at the coarse
/// resolution under its scene's coarse text (or, with probability
/// `null_dropout`, the null text) and regresses the MSE against box-averaged
/// ground truth. Writes the checkpoint and loss curve to `out_dir`.
pub fn train_field(
    manifest: &DatasetManifest,
    data_dir: &Path,
    cfg: &FieldConfig,
    out_dir: &Path,
) -> Result<(FieldNet, TrainReport)> {
    cfg.validate()?;
    let views = collect_train_views(manifest, data_dir, cfg)?;
    let mut net = FieldNet::init(cfg)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = AdamState::new();
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let null_tokens = [NULL_ID];
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let view = &views[rng.gen_range(0..views.len())];
        let drop_text = rng.gen::<f64>() < cfg.null_dropout;
        let tokens: &[usize] = if drop_text { &null_tokens } else { &view.tokens };
        let samples = sample_stratified(&view.rays, cfg.n_samples, Some(&mut rng))?;

        let mut g = Graph::<f32>::new();
        let binder = ParamBinder::bind(&mut g, &net.params, true)?;
        let nodes = render_rays_nodes(&mut g, &binder, cfg, &samples, tokens, BACKGROUND)?;
        let target = g.constant(&view.target)?;
        let diff = g.sub(nodes.rgb, target)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.mean_all(sq);
        let lv = g.value(loss)[0] as f64;
        if !lv.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("photometric loss became {lv}"),
            });
        }
        losses.push(lv);
        g.backward(loss)?;
        let grads = binder.grads(&g);
        adam_step(&mut net.params, &grads, &mut adam, &adam_cfg)?;
    }

    net.save(out_dir, cfg.steps as u64)?;
    let loss_path = out_dir.join("loss.json");
    let body = serde_json::to_string(&losses)
        .map_err(|e| Error::msg(format!("loss curve does not serialize: {e}")))?;
    std::fs::write(&loss_path, body + "\n")
        .map_err(|e| Error::io(loss_path.display().to_string(), e))?;
    Ok((net, TrainReport { losses }))
}
