//! The full generation pipeline on top of the condition field and the
//! two-stream denoiser: paired training against a frozen field,
//! autoregressive 360° sampling where each new view is denoised alongside a
//! re-noised, already-completed neighbor, text-embedding interpolation, and
//! one-shot fine-tuning on a single reference view.
//!
//! Images cross this module's boundary in display range `[0, 1]`; internally
//! the denoiser works on the symmetric range `[-1, 1]` ("model space").
//! Every sampling entry point is a deterministic function of its arguments —
//! noise is drawn from one seeded stream in a fixed order, including draws
//! that a particular view ends up not using, so outputs replay bit for bit.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::denoiser::{
    embed_text_nodes, timestep_embedding, unet_nodes, DenoiserNet, Interaction, TwoStreamBatch,
    UNetConfig,
};
use crate::error::{Error, Result};
use crate::field::{FieldNet, FieldText};
use crate::numerics::{
    adam_step, AdamConfig, AdamState, Graph, NodeId, ParamBinder, Scalar, Tensor,
};
use crate::scenegen::{
    coarse_subsequence, load_image, tokenize, CameraPose, DatasetManifest, N_AZIMUTHS, NULL_ID,
};
use crate::schedule::{
    ddim_timesteps, pair_timesteps, q_sample, NoiseSchedule, PairMode, ScheduleConfig,
};

/// `[0, 1]` display range to the denoiser's symmetric `[-1, 1]` range.
pub fn to_model_space(img: &Tensor<f32>) -> Tensor<f32> {
    let data = img.data().iter().map(|&v| 2.0 * v - 1.0).collect();
    Tensor::new(img.shape().to_vec(), data).expect("same shape")
}

/// Model range back to the `[0, 1]` display range, clamped.
pub fn from_model_space(x: &Tensor<f32>) -> Tensor<f32> {
    let data = x
        .data()
        .iter()
        .map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn clamp_model(x: &Tensor<f32>) -> Tensor<f32> {
    let data = x.data().iter().map(|&v| v.clamp(-1.0, 1.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Integer-factor nearest-neighbor upsample of a `[3, h, w]` image, used to
/// lift coarse condition renders to the denoiser's resolution.
pub fn upsample_image(img: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidShape {
            op: "upsample_image",
            shape: shape.to_vec(),
            reason: "image must be [3, h, w]".into(),
        });
    }
    if factor == 0 {
        return Err(Error::InvalidArgument {
            op: "upsample_image",
            reason: "factor must be at least 1".into(),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let (hh, ww) = (h * factor, w * factor);
    let src = img.data();
    let mut data = vec![0.0f32; 3 * hh * ww];
    for c in 0..3 {
        for y in 0..hh {
            for x in 0..ww {
                data[(c * hh + y) * ww + x] = src[(c * h + y / factor) * w + x / factor];
            }
        }
    }
    Tensor::new(vec![3, hh, ww], data)
}

/// Stack two equally shaped `[3, r, r]` images into a `[2, 3, r, r]` batch.
fn stack2(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "stack2",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut shape = vec![2];
    shape.extend_from_slice(a.shape());
    let mut data = Vec::with_capacity(2 * a.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

/// The training objective as graph nodes: run the paired U-Net on the stacked
/// noised inputs and score the squared error of the noise prediction. The
/// mean runs over both streams, so one scalar trains the pair jointly.
#[allow(clippy::too_many_arguments)]
pub fn pair_loss_nodes<T: Scalar>(
    g: &mut Graph<T>,
    binder: &ParamBinder,
    cfg: &UNetConfig,
    x_stack: NodeId,
    xc_stack: NodeId,
    temb: NodeId,
    text: NodeId,
    eps_stack: NodeId,
    interact: bool,
) -> Result<NodeId> {
    let out = unet_nodes(g, binder, cfg, x_stack, xc_stack, temb, text, interact)?;
    let d = g.sub(out, eps_stack)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

/// One clean pair in model space, with drawn levels and noises: q-sample,
/// run the paired objective, and take an optimizer step on every parameter.
/// Returns the pre-step loss.
#[allow(clippy::too_many_arguments)]
fn optimize_pair(
    net: &mut DenoiserNet,
    sched: &NoiseSchedule,
    adam: &mut AdamState<f32>,
    opt: &AdamConfig,
    step: usize,
    pair_m: (&Tensor<f32>, &Tensor<f32>, &Tensor<f32>, &Tensor<f32>),
    levels: (usize, usize),
    noise: (&Tensor<f32>, &Tensor<f32>),
    tokens: &[usize],
) -> Result<f64> {
    let (x1m, x2m, xc1m, xc2m) = pair_m;
    let (t1, t2) = levels;
    let (e1, e2) = noise;
    let x1t = q_sample(x1m, t1, e1, sched)?;
    let x2t = q_sample(x2m, t2, e2, sched)?;
    let x = stack2(&x1t, &x2t)?;
    let xc = stack2(xc1m, xc2m)?;
    let eps = stack2(e1, e2)?;
    let temb = timestep_embedding::<f32>(&[t1, t2], net.config.temb_width)?;

    let mut g = Graph::<f32>::new();
    let binder = ParamBinder::bind(&mut g, &net.params, true)?;
    let xn = g.constant(&x)?;
    let xcn = g.constant(&xc)?;
    let tn = g.constant(&temb)?;
    let en = g.constant(&eps)?;
    let text = embed_text_nodes(&mut g, &binder, &net.config, tokens)?;
    let interact = net.config.interaction == Interaction::CrossAttention;
    let loss = pair_loss_nodes(&mut g, &binder, &net.config, xn, xcn, tn, text, en, interact)?;
    let lv = g.value(loss)[0] as f64;
    if !lv.is_finite() {
        return Err(Error::Diverged {
            step,
            reason: format!("pair loss became {lv}"),
        });
    }
    g.backward(loss)?;
    let grads = binder.grads(&g);
    adam_step(&mut net.params, &grads, adam, opt)?;
    Ok(lv)
}

/// One training pair: two clean views of the same scene in `[0, 1]`, their
/// matching coarse condition renders upsampled to the same resolution, and
/// the scene's full token sequence.
pub struct TrainPair<'a> {
    pub x1: &'a Tensor<f32>,
    pub x2: &'a Tensor<f32>,
    pub xc1: &'a Tensor<f32>,
    pub xc2: &'a Tensor<f32>,
    pub y_full: &'a [usize],
}

/// One optimizer step on a pair: draw independent levels for the two streams,
/// draw their noises, and regress both noise predictions jointly. Consumes
/// exactly four RNG events (level, level, noise, noise) regardless of config.
pub fn train_step(
    net: &mut DenoiserNet,
    pair: &TrainPair<'_>,
    sched: &NoiseSchedule,
    adam: &mut AdamState<f32>,
    opt: &AdamConfig,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let shape = pair.x1.shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(Error::InvalidShape {
            op: "train_step",
            shape,
            reason: "images must be [3, r, r]".into(),
        });
    }
    for t in [pair.x2, pair.xc1, pair.xc2] {
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "train_step",
                lhs: shape,
                rhs: t.shape().to_vec(),
            });
        }
    }
    let r = shape[1];
    let tp = pair_timesteps(PairMode::Train, 1, 0, sched, rng)?;
    let e1 = Tensor::<f32>::randn(vec![3, r, r], rng);
    let e2 = Tensor::<f32>::randn(vec![3, r, r], rng);
    let (x1m, x2m) = (to_model_space(pair.x1), to_model_space(pair.x2));
    let (xc1m, xc2m) = (to_model_space(pair.xc1), to_model_space(pair.xc2));
    optimize_pair(
        net,
        sched,
        adam,
        opt,
        adam.step_count() as usize,
        (&x1m, &x2m, &xc1m, &xc2m),
        (tp.t1, tp.t2),
        (&e1, &e2),
        pair.y_full,
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    /// Denoiser working resolution; must match the dataset and be an integer
    /// multiple of the field's coarse resolution.
    pub resolution: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            resolution: 32,
            steps: 20_000,
            lr: 1e-4,
            seed: 0,
        }
    }
}

impl DenoiserTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.steps == 0 {
            return Err(Error::InvalidArgument {
                op: "DenoiserTrainConfig::validate",
                reason: "steps must be at least 1".into(),
            });
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument {
                op: "DenoiserTrainConfig::validate",
                reason: format!("learning rate must be positive and finite, got {}", self.lr),
            });
        }
        let m = self.unet.min_multiple();
        if self.resolution == 0 || self.resolution % m != 0 {
            return Err(Error::InvalidArgument {
                op: "DenoiserTrainConfig::validate",
                reason: format!(
                    "resolution {} is not a multiple of the network's downsampling factor {m}",
                    self.resolution
                ),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenoiserTrainReport {
    pub losses: Vec<f64>,
}

struct CachedView {
    x: Tensor<f32>,  // clean view, [0, 1]
    xc: Tensor<f32>, // upsampled coarse render, [0, 1]
}

struct CachedScene {
    tokens: Vec<usize>,
    views: Vec<CachedView>,
}

/// Train the paired denoiser against a frozen condition field. Every step
/// picks one training scene and two distinct views of it, conditions each
/// stream on the field's coarse render for its own camera, and regresses
/// both noise predictions. Writes the checkpoint and `loss.json` to
/// `out_dir`. Deterministic for fixed inputs and config.
pub fn train_denoiser(
    manifest: &DatasetManifest,
    data_dir: &Path,
    field: &FieldNet,
    cfg: &DenoiserTrainConfig,
    out_dir: &Path,
) -> Result<(DenoiserNet, DenoiserTrainReport)> {
    cfg.validate()?;
    if manifest.resolution != cfg.resolution {
        return Err(Error::InvalidArgument {
            op: "train_denoiser",
            reason: format!(
                "dataset resolution {} does not match training resolution {}",
                manifest.resolution, cfg.resolution
            ),
        });
    }
    let coarse_res = field.config.coarse_res;
    if cfg.resolution % coarse_res != 0 {
        return Err(Error::InvalidArgument {
            op: "train_denoiser",
            reason: format!(
                "resolution {} is not a multiple of the field's coarse resolution {coarse_res}",
                cfg.resolution
            ),
        });
    }
    let factor = cfg.resolution / coarse_res;
    let sched = cfg.schedule.build()?;

    // The field is frozen during denoiser training, so every view's coarse
    // condition render is computed once up front.
    let mut cache: Vec<CachedScene> = Vec::new();
    for scene in manifest.train_scenes() {
        if scene.views.len() < 2 {
            return Err(Error::InvalidArgument {
                op: "train_denoiser",
                reason: format!(
                    "scene {} has {} views; pair training needs at least 2",
                    scene.id,
                    scene.views.len()
                ),
            });
        }
        let tokens = tokenize(&scene.full_text)?;
        let coarse = coarse_subsequence(&tokens);
        let mut views = Vec::with_capacity(scene.views.len());
        for view in &scene.views {
            let x = load_image(&data_dir.join(&view.image))?;
            if x.shape() != [3, cfg.resolution, cfg.resolution] {
                return Err(Error::Malformed {
                    path: view.image.clone(),
                    reason: format!(
                        "view has shape {:?}, dataset promises [3, {}, {}]",
                        x.shape(),
                        cfg.resolution,
                        cfg.resolution
                    ),
                });
            }
            let pose = manifest.pose(view)?;
            let cpose = CameraPose::new(
                pose.azimuth_index,
                pose.elevation,
                pose.radius,
                pose.focal,
                coarse_res,
            )?;
            let ci = field.render_pose_cond(
                &cpose,
                FieldText::Tokens(&coarse),
                field.config.render_samples,
                None,
            )?;
            let xc = upsample_image(&ci, factor)?;
            views.push(CachedView { x, xc });
        }
        cache.push(CachedScene { tokens, views });
    }
    if cache.is_empty() {
        return Err(Error::InvalidArgument {
            op: "train_denoiser",
            reason: "no training scenes in the manifest".into(),
        });
    }

    let mut net = DenoiserNet::init(&cfg.unet)?;
    let mut adam = AdamState::new();
    let opt = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let s = rng.gen_range(0..cache.len());
        let scene = &cache[s];
        let n = scene.views.len();
        let i = rng.gen_range(0..n);
        let j0 = rng.gen_range(0..n - 1);
        let j = if j0 >= i { j0 + 1 } else { j0 };
        let pair = TrainPair {
            x1: &scene.views[i].x,
            x2: &scene.views[j].x,
            xc1: &scene.views[i].xc,
            xc2: &scene.views[j].xc,
            y_full: &scene.tokens,
        };
        let loss = train_step(&mut net, &pair, &sched, &mut adam, &opt, &mut rng)?;
        losses.push(loss);
        if (step + 1) % 500 == 0 {
            let tail = &losses[losses.len().saturating_sub(100)..];
            let avg: f64 = tail.iter().sum::<f64>() / tail.len() as f64;
            log::info!("denoiser step {}/{}: loss(100) = {avg:.4}", step + 1, cfg.steps);
        }
    }

    net.save(out_dir, cfg.steps as u64)?;
    let loss_path = out_dir.join("loss.json");
    let body = serde_json::to_string(&losses)
        .map_err(|e| Error::msg(format!("loss curve does not serialize: {e}")))?;
    std::fs::write(&loss_path, body + "\n")
        .map_err(|e| Error::io(loss_path.display().to_string(), e))?;
    Ok((net, DenoiserTrainReport { losses }))
}

/// How the conditioning stream picks an already-generated view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrevView {
    /// The completed view whose camera azimuth is circularly closest
    /// (ties: closer elevation, then earlier completion).
    NearestAzimuth,
    /// Always the most recently completed view.
    LastGenerated,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of deterministic denoising steps per view.
    pub n_ddim_steps: usize,
    /// Level lag of the conditioning stream behind the generation stream.
    pub delta_t: usize,
    pub prev_view: PrevView,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_ddim_steps: 100,
            delta_t: 200,
            prev_view: PrevView::NearestAzimuth,
            seed: 0,
        }
    }
}

/// What produced a generation, sufficient to replay it exactly alongside the
/// checkpoints it ran against.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub text: String,
    pub seed: u64,
    /// Hash over the network config, sampler config, and schedule length.
    pub config_hash: String,
}

/// A completed multi-view generation. `images`, `coarse`, `initial_noise`,
/// and `poses` are index-aligned, one entry per requested view.
pub struct GenerationResult {
    /// Generated views in `[0, 1]`.
    pub images: Vec<Tensor<f32>>,
    /// The field's condition renders, upsampled, in `[0, 1]`.
    pub coarse: Vec<Tensor<f32>>,
    /// The model-space noise each view's denoising chain started from.
    pub initial_noise: Vec<Tensor<f32>>,
    pub poses: Vec<CameraPose>,
    /// Total paired denoiser evaluations consumed.
    pub denoiser_calls: usize,
    pub provenance: Provenance,
}

/// Text conditioning for one generation run: token ids, or explicit
/// embedding rows for the denoiser and the field (the interpolation path).
enum Cond<'t> {
    Tokens {
        full: &'t [usize],
        coarse: &'t [usize],
    },
    Rows {
        denoiser: &'t Tensor<f32>,
        field: &'t Tensor<f32>,
    },
}

/// One deterministic denoising rung with the implied clean image clipped to
/// the data range before re-noising to the lower level.
///
/// An unclipped rung is algebraically `ddim_step`, but it multiplies the
/// state by √(ᾱ_prev/ᾱ_t) > 1 and relies on the noise prediction to cancel
/// the growth; whenever the prediction under-cancels, long chains drift off
/// the data manifold and diverge. Clipping the implied clean image to
/// `[-1, 1]` — the only range the data occupies — bounds every rung without
/// touching the predicted noise direction.
fn ddim_rung_clipped(
    x: &Tensor<f32>,
    eps_hat: &Tensor<f32>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    if t_prev >= t {
        return Err(Error::InvalidArgument {
            op: "ddim_rung_clipped",
            reason: format!("t_prev = {t_prev} must be below t = {t}"),
        });
    }
    let ab_t = sched.alpha_bar(t)?;
    let ab_p = sched.alpha_bar(t_prev)?;
    let (s_t, c_t) = (ab_t.sqrt() as f32, (1.0 - ab_t).sqrt() as f32);
    let (s_p, c_p) = (ab_p.sqrt() as f32, (1.0 - ab_p).sqrt() as f32);
    let data = x
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&xt, &eh)| {
            let x0 = ((xt - c_t * eh) / s_t).clamp(-1.0, 1.0);
            s_p * x0 + c_p * eh
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Among completed views, the index whose azimuth is circularly nearest the
/// target (ties: smaller elevation gap, then earlier completion).
fn nearest_completed(done: &[CameraPose], target: &CameraPose) -> usize {
    debug_assert!(!done.is_empty());
    let mut best = 0usize;
    let mut best_key = (usize::MAX, f64::INFINITY, usize::MAX);
    for (i, p) in done.iter().enumerate() {
        let d = p.azimuth_index.abs_diff(target.azimuth_index) % N_AZIMUTHS;
        let circ = d.min(N_AZIMUTHS - d);
        let key = (circ, (p.elevation - target.elevation).abs(), i);
        if key < best_key {
            best_key = key;
            best = i;
        }
    }
    best
}

/// Left-pad-free token alignment: extend the shorter list with the null
/// token so two prompts embed to equal-length row matrices.
fn pad_tokens(tokens: &[usize], len: usize) -> Vec<usize> {
    let mut out = tokens.to_vec();
    while out.len() < len {
        out.push(NULL_ID);
    }
    out
}

/// Elementwise linear blend of two equally shaped embedding-row matrices.
/// The endpoints short-circuit to exact copies so weight 0 and weight 1
/// reproduce the unblended rows bit for bit.
fn lerp_rows(a: &Tensor<f32>, b: &Tensor<f32>, w: f64) -> Result<Tensor<f32>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "lerp_rows",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if w == 0.0 {
        return Ok(a.clone());
    }
    if w == 1.0 {
        return Ok(b.clone());
    }
    let (wa, wb) = ((1.0 - w) as f32, w as f32);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| wa * x + wb * y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Deterministic multi-view generation against frozen checkpoints.
pub struct Sampler<'a> {
    pub net: &'a DenoiserNet,
    pub field: &'a FieldNet,
    pub sched: &'a NoiseSchedule,
}

impl Sampler<'_> {
    /// Generate the given camera views of one prompt, in order. The first
    /// view denoises self-conditioned (no level lag); every later view pairs
    /// its generation stream with an already-completed view, re-noised to
    /// the lagged level with a per-view fixed draw. Bit-reproducible for a
    /// fixed seed and config.
    pub fn sample_360(
        &self,
        text: &str,
        views: &[CameraPose],
        cfg: &SamplerConfig,
    ) -> Result<GenerationResult> {
        let full = tokenize(text)?;
        let coarse = coarse_subsequence(&full);
        self.sample_views(
            Cond::Tokens {
                full: &full,
                coarse: &coarse,
            },
            views,
            cfg,
            text,
        )
    }

    /// `n` generations of one pose whose text conditioning walks the line
    /// between two prompts in embedding space, sharing one initial noise.
    /// The first and last entries are bit-identical to direct single-view
    /// samples of the respective prompts.
    pub fn interpolate_texts(
        &self,
        text_a: &str,
        text_b: &str,
        n: usize,
        pose: &CameraPose,
        cfg: &SamplerConfig,
    ) -> Result<Vec<Tensor<f32>>> {
        if n < 2 {
            return Err(Error::InvalidArgument {
                op: "interpolate_texts",
                reason: format!("need at least 2 interpolation points, got {n}"),
            });
        }
        let (tok_a, tok_b) = (tokenize(text_a)?, tokenize(text_b)?);
        // Align both prompts to one row count per conditioning path; the
        // null token is the natural filler (it is also what empty text
        // embeds to).
        let full_len = tok_a.len().max(tok_b.len()).max(1);
        let full_a = pad_tokens(&tok_a, full_len);
        let full_b = pad_tokens(&tok_b, full_len);
        let (co_a, co_b) = (coarse_subsequence(&full_a), coarse_subsequence(&full_b));
        let coarse_len = co_a.len().max(co_b.len()).max(1);
        let co_a = pad_tokens(&co_a, coarse_len);
        let co_b = pad_tokens(&co_b, coarse_len);

        let den_a = self.net.embed_text(&full_a)?;
        let den_b = self.net.embed_text(&full_b)?;
        let fld_a = self.field.embedding_rows(&co_a)?;
        let fld_b = self.field.embedding_rows(&co_b)?;

        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let w = k as f64 / (n - 1) as f64;
            let den = lerp_rows(&den_a, &den_b, w)?;
            let fld = lerp_rows(&fld_a, &fld_b, w)?;
            let label = format!("{text_a} -> {text_b} [{k}/{}]", n - 1);
            let run = self.sample_views(
                Cond::Rows {
                    denoiser: &den,
                    field: &fld,
                },
                std::slice::from_ref(pose),
                cfg,
                &label,
            )?;
            out.push(run.images.into_iter().next().expect("one view requested"));
        }
        Ok(out)
    }

    fn sample_views(
        &self,
        cond: Cond<'_>,
        views: &[CameraPose],
        cfg: &SamplerConfig,
        label: &str,
    ) -> Result<GenerationResult> {
        if views.is_empty() {
            return Err(Error::InvalidArgument {
                op: "sample_views",
                reason: "no views requested".into(),
            });
        }
        let res = views[0].image_size;
        for v in views {
            if v.image_size != res {
                return Err(Error::InvalidArgument {
                    op: "sample_views",
                    reason: format!(
                        "all views must share one resolution, got {} and {res}",
                        v.image_size
                    ),
                });
            }
        }
        let coarse_res = self.field.config.coarse_res;
        if res % coarse_res != 0 {
            return Err(Error::InvalidArgument {
                op: "sample_views",
                reason: format!(
                    "resolution {res} is not a multiple of the field's coarse resolution {coarse_res}"
                ),
            });
        }
        let m = self.net.config.min_multiple();
        if res % m != 0 {
            return Err(Error::InvalidArgument {
                op: "sample_views",
                reason: format!(
                    "resolution {res} is not a multiple of the network's downsampling factor {m}"
                ),
            });
        }
        let ladder = ddim_timesteps(self.sched.t_max(), cfg.n_ddim_steps)?;

        // Condition renders per view, from the frozen field.
        let mut coarse_imgs = Vec::with_capacity(views.len());
        let mut cond_model = Vec::with_capacity(views.len());
        for v in views {
            let cpose =
                CameraPose::new(v.azimuth_index, v.elevation, v.radius, v.focal, coarse_res)?;
            let ft = match &cond {
                Cond::Tokens { coarse, .. } => FieldText::Tokens(coarse),
                Cond::Rows { field, .. } => FieldText::Rows(field),
            };
            let ci =
                self.field
                    .render_pose_cond(&cpose, ft, self.field.config.render_samples, None)?;
            let up = upsample_image(&ci, res / coarse_res)?;
            cond_model.push(to_model_space(&up));
            coarse_imgs.push(up);
        }

        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let mut completed: Vec<Tensor<f32>> = Vec::with_capacity(views.len());
        let mut images = Vec::with_capacity(views.len());
        let mut initial_noise = Vec::with_capacity(views.len());
        let mut calls = 0usize;
        for (k, view) in views.iter().enumerate() {
            // Fixed draw order per view — the chain start and the
            // conditioning re-noise — so any view's unused draw still
            // advances the stream identically.
            let mut x = Tensor::<f32>::randn(vec![3, res, res], &mut rng);
            let eps_c = Tensor::<f32>::randn(vec![3, res, res], &mut rng);
            initial_noise.push(x.clone());
            let (j, delta) = if k == 0 {
                (0, 0)
            } else {
                let j = match cfg.prev_view {
                    PrevView::LastGenerated => k - 1,
                    PrevView::NearestAzimuth => nearest_completed(&views[..k], view),
                };
                (j, cfg.delta_t)
            };
            for w in ladder.windows(2) {
                let (t, t_prev) = (w[0], w[1]);
                let tp = pair_timesteps(PairMode::Sample, t, delta, self.sched, &mut rng)?;
                assert!(tp.t2 <= tp.t1, "conditioning stream may not lead");
                let (x2t, xc2) = if k == 0 {
                    (x.clone(), cond_model[0].clone())
                } else {
                    (
                        q_sample(&completed[j], tp.t2, &eps_c, self.sched)?,
                        cond_model[j].clone(),
                    )
                };
                let tokens = match &cond {
                    Cond::Tokens { full, .. } => full.to_vec(),
                    Cond::Rows { .. } => Vec::new(),
                };
                let batch = TwoStreamBatch::new(
                    x.clone(),
                    x2t,
                    cond_model[k].clone(),
                    xc2,
                    tp.t1,
                    tp.t2,
                    tokens,
                )?;
                let (e1, _) = match &cond {
                    Cond::Tokens { .. } => self.net.denoise_two_stream(&batch)?,
                    Cond::Rows { denoiser, .. } => {
                        self.net.denoise_two_stream_rows(&batch, denoiser)?
                    }
                };
                x = ddim_rung_clipped(&x, &e1, t, t_prev, self.sched)?;
                calls += 1;
            }
            let xm = clamp_model(&x);
            images.push(from_model_space(&xm));
            completed.push(xm);
        }

        let hash = config_hash(&serde_json::json!({
            "unet": self.net.config,
            "sampler": cfg,
            "t_max": self.sched.t_max(),
        }))?;
        Ok(GenerationResult {
            images,
            coarse: coarse_imgs,
            initial_noise,
            poses: views.to_vec(),
            denoiser_calls: calls,
            provenance: Provenance {
                text: label.to_string(),
                seed: cfg.seed,
                config_hash: hash,
            },
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            lr: 1e-4,
            seed: 0,
        }
    }
}

/// Adapt a trained denoiser to a single reference view: both streams carry
/// the given image at a shared level each step, conditioned on the frozen
/// field's render for its camera under `tokens` (empty text conditions on
/// the null token — the image-only case). All parameters train. The input
/// network is left untouched; zero steps returns an exact copy. The second
/// return value is the per-step loss curve.
pub fn one_shot_finetune(
    net: &DenoiserNet,
    field: &FieldNet,
    sched: &NoiseSchedule,
    image: &Tensor<f32>,
    pose: &CameraPose,
    tokens: &[usize],
    cfg: &FinetuneConfig,
) -> Result<(DenoiserNet, Vec<f64>)> {
    let res = pose.image_size;
    if image.shape() != [3, res, res] {
        return Err(Error::InvalidShape {
            op: "one_shot_finetune",
            shape: image.shape().to_vec(),
            reason: format!("reference view must be [3, {res}, {res}] to match its pose"),
        });
    }
    let coarse_res = field.config.coarse_res;
    if res % coarse_res != 0 || res % net.config.min_multiple() != 0 {
        return Err(Error::InvalidArgument {
            op: "one_shot_finetune",
            reason: format!(
                "resolution {res} must be a multiple of the coarse resolution {coarse_res} \
                 and of the network's downsampling factor {}",
                net.config.min_multiple()
            ),
        });
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::InvalidArgument {
            op: "one_shot_finetune",
            reason: format!("learning rate must be positive and finite, got {}", cfg.lr),
        });
    }

    let coarse = coarse_subsequence(tokens);
    let cpose = CameraPose::new(pose.azimuth_index, pose.elevation, pose.radius, pose.focal, coarse_res)?;
    let ci = field.render_pose_cond(
        &cpose,
        FieldText::Tokens(&coarse),
        field.config.render_samples,
        None,
    )?;
    let xc = upsample_image(&ci, res / coarse_res)?;
    let x0m = to_model_space(image);
    let xcm = to_model_space(&xc);

    let mut tuned = DenoiserNet {
        config: net.config.clone(),
        params: net.params.clone(),
    };
    let mut adam = AdamState::new();
    let opt = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        // Both streams share one level; their noises stay independent so the
        // interaction path still sees two distinct noisy renderings.
        let t = rng.gen_range(1..=sched.t_max());
        let e1 = Tensor::<f32>::randn(vec![3, res, res], &mut rng);
        let e2 = Tensor::<f32>::randn(vec![3, res, res], &mut rng);
        let loss = optimize_pair(
            &mut tuned,
            sched,
            &mut adam,
            &opt,
            step,
            (&x0m, &x0m, &xcm, &xcm),
            (t, t),
            (&e1, &e2),
            tokens,
        )?;
        losses.push(loss);
    }
    Ok((tuned, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_space_round_trip_and_clamping() {
        let img = Tensor::new(vec![3, 1, 1], vec![0.0, 0.5, 1.0]).unwrap();
        let m = to_model_space(&img);
        assert_eq!(m.data(), &[-1.0, 0.0, 1.0]);
        assert_eq!(from_model_space(&m).data(), img.data());
        // Out-of-range model values clamp instead of leaking.
        let wild = Tensor::new(vec![3, 1, 1], vec![-3.0, 0.2, 7.0]).unwrap();
        let back = from_model_space(&wild);
        assert_eq!(back.data(), &[0.0, 0.6, 1.0]);
        assert_eq!(clamp_model(&wild).data(), &[-1.0, 0.2, 1.0]);
    }

    #[test]
    fn upsample_repeats_blocks_exactly() {
        // One channel ramp, 2x2 -> 4x4: each source pixel becomes a 2x2 block.
        let mut data = vec![0.0f32; 3 * 4];
        data[..4].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let img = Tensor::new(vec![3, 2, 2], data).unwrap();
        let up = upsample_image(&img, 2).unwrap();
        assert_eq!(up.shape(), &[3, 4, 4]);
        let ch0: Vec<f32> = up.data()[..16].to_vec();
        assert_eq!(
            ch0,
            vec![
                1.0, 1.0, 2.0, 2.0, //
                1.0, 1.0, 2.0, 2.0, //
                3.0, 3.0, 4.0, 4.0, //
                3.0, 3.0, 4.0, 4.0,
            ]
        );
        // Factor 1 is the identity.
        assert_eq!(upsample_image(&img, 1).unwrap().data(), img.data());
        assert!(upsample_image(&img, 0).is_err());
        assert!(upsample_image(&Tensor::zeros(vec![2, 2]), 2).is_err());
    }

    #[test]
    fn nearest_view_uses_circular_azimuth_distance() {
        let pose = |az: usize, elev: f64| CameraPose::new(az, elev, 2.5, 2.2, 16).unwrap();
        // Azimuth 29 is one step from azimuth 0 around the circle.
        let done = [pose(29, 0.0), pose(2, 0.0)];
        assert_eq!(nearest_completed(&done, &pose(0, 0.0)), 0);
        // Equal circular distance: the closer elevation wins.
        let done = [pose(1, 0.35), pose(29, 0.0)];
        assert_eq!(nearest_completed(&done, &pose(0, 0.0)), 1);
        // Full tie: the earlier completion wins.
        let done = [pose(1, 0.0), pose(29, 0.0)];
        assert_eq!(nearest_completed(&done, &pose(0, 0.0)), 0);
    }

    #[test]
    fn token_padding_and_row_blending() {
        assert_eq!(pad_tokens(&[5, 6], 4), vec![5, 6, NULL_ID, NULL_ID]);
        assert_eq!(pad_tokens(&[5, 6], 2), vec![5, 6]);
        let a = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![4.0, 5.0, 6.0, 7.0]).unwrap();
        assert_eq!(lerp_rows(&a, &b, 0.0).unwrap().data(), a.data());
        assert_eq!(lerp_rows(&a, &b, 1.0).unwrap().data(), b.data());
        assert_eq!(lerp_rows(&a, &b, 0.5).unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
        let c = Tensor::zeros(vec![1, 2]);
        assert!(lerp_rows(&a, &c, 0.5).is_err());
    }

    #[test]
    fn clipped_rung_matches_plain_ddim_when_nothing_clips() {
        use crate::schedule::ddim_step;
        let sched = ScheduleConfig::default().build().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        // A state whose implied clean image is safely in range: q_sample of an
        // in-range image, with the prediction equal to the true noise.
        let raw = Tensor::<f32>::randn(vec![3, 2, 2], &mut rng);
        let x0 = Tensor::new(
            vec![3, 2, 2],
            raw.data().iter().map(|&v| (0.4 * v).clamp(-0.9, 0.9)).collect::<Vec<f32>>(),
        )
        .unwrap();
        let eps = Tensor::<f32>::randn(vec![3, 2, 2], &mut rng);
        let x = q_sample(&x0, 600, &eps, &sched).unwrap();
        let clipped = ddim_rung_clipped(&x, &eps, 600, 540, &sched).unwrap();
        let plain = ddim_step(&x, &eps, 600, 540, &sched).unwrap();
        for (a, b) in clipped.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        // A wildly out-of-range state stays bounded after the rung.
        let wild = Tensor::new(
            vec![3, 2, 2],
            x.data().iter().map(|&v| v * 1e4).collect::<Vec<f32>>(),
        )
        .unwrap();
        let out = ddim_rung_clipped(&wild, &eps, 600, 540, &sched).unwrap();
        for (o, e) in out.data().iter().zip(eps.data()) {
            assert!(o.abs() <= 1.0 + e.abs() + 1e-6);
        }
        assert!(ddim_rung_clipped(&x, &eps, 540, 600, &sched).is_err());
    }

    #[test]
    fn train_config_validation_rejects_bad_settings() {
        let ok = DenoiserTrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(DenoiserTrainConfig { steps: 0, ..ok.clone() }.validate().is_err());
        assert!(DenoiserTrainConfig { lr: 0.0, ..ok.clone() }.validate().is_err());
        assert!(DenoiserTrainConfig { lr: f64::NAN, ..ok.clone() }.validate().is_err());
        // Default U-Net halves twice: resolution must be a multiple of 4.
        assert!(DenoiserTrainConfig { resolution: 30, ..ok.clone() }.validate().is_err());
        assert!(DenoiserTrainConfig { resolution: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn train_step_rejects_mismatched_pairs() {
        let cfg = UNetConfig {
            base_channels: 2,
            channel_multipliers: vec![1],
            attention_levels: vec![],
            blocks_per_level: 1,
            temb_width: 4,
            text_width: 3,
            attention_heads: 1,
            norm_groups: 1,
            vocab_size: 20,
            interaction: Interaction::None,
            seed: 0,
        };
        let mut net = DenoiserNet::init(&cfg).unwrap();
        let sched = ScheduleConfig::default().build().unwrap();
        let mut adam = AdamState::new();
        let opt = AdamConfig::with_lr(1e-4);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let a = Tensor::zeros(vec![3, 4, 4]);
        let small = Tensor::zeros(vec![3, 2, 2]);
        let bad = TrainPair {
            x1: &a,
            x2: &small,
            xc1: &a,
            xc2: &a,
            y_full: &[1],
        };
        assert!(train_step(&mut net, &bad, &sched, &mut adam, &opt, &mut rng).is_err());
        let flat = Tensor::zeros(vec![4, 4]);
        let bad = TrainPair {
            x1: &flat,
            x2: &a,
            xc1: &a,
            xc2: &a,
            y_full: &[1],
        };
        assert!(train_step(&mut net, &bad, &sched, &mut adam, &opt, &mut rng).is_err());
    }
}
