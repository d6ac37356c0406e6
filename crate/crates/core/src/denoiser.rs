//! The two-stream asynchronous denoiser: a weight-shared, text- and
//! pose-conditioned U-Net pair that predicts the noise added to each of two
//! views of the same scene.
//!
//! One parameter set serves both streams. Each stream's input is its noised
//! image channel-concatenated with the coarse condition render for its pose
//! (layout [noised RGB | coarse RGB]), and each stream carries its own
//! timestep embedding, so the two passes may sit at different noise levels.
//! Inside every attention-bearing resolution the streams exchange information
//! through bidirectional cross-view attention: queries from one stream,
//! keys/values from the other, with the same projection weights in both
//! directions. That symmetry makes swapping the input streams exactly swap
//! the outputs, which is asserted bit-for-bit in the tests.
//!
//! Text enters twice: pooled into the condition render by the field upstream,
//! and directly here through cross-attention over the token embedding
//! sequence (its table is this module's, learned with the rest). There is no
//! classifier-free guidance; a learned null token merely stands in for empty
//! text.
//!
//! Every layer that closes a residual path (second conv of a residual block,
//! attention output projections, the final head) starts at exactly zero, so
//! an untrained network predicts zero noise. Training must populate those
//! layers before timestep or text conditioning can reach the output; the
//! oracles check sensitivity only after a short warmup for that reason.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::io::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::numerics::params::{ParamBinder, Params};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::scenegen::NULL_ID;

/// Group-norm epsilon used throughout the network.
const GN_EPS: f64 = 1e-5;

/// How the two streams exchange information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    /// Bidirectional cross-view attention after each self-attention block.
    CrossAttention,
    /// No exchange: the streams are two independent single-stream passes.
    None,
}

/// U-Net hyperparameters. All sizes live here; the desk default is a 32x32
/// network with base width 32 and attention at the two lowest resolutions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// Per-level width multipliers; the length is the number of levels.
    pub channel_multipliers: Vec<usize>,
    /// Level indices (0 = full resolution) that carry attention stacks.
    pub attention_levels: Vec<usize>,
    pub blocks_per_level: usize,
    pub temb_width: usize,
    pub text_width: usize,
    pub attention_heads: usize,
    pub norm_groups: usize,
    pub vocab_size: usize,
    pub interaction: Interaction,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            attention_levels: vec![1, 2],
            blocks_per_level: 2,
            temb_width: 64,
            text_width: 32,
            attention_heads: 1,
            norm_groups: 8,
            vocab_size: crate::scenegen::vocabulary().len(),
            interaction: Interaction::CrossAttention,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn has_attention(&self, level: usize) -> bool {
        self.attention_levels.contains(&level)
    }

    /// Input resolutions must be divisible by this (one halving per level
    /// transition).
    pub fn min_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidArgument {
            op: "UNetConfig::validate",
            reason,
        };
        if self.base_channels == 0 {
            return Err(bad("base_channels must be positive".into()));
        }
        if self.channel_multipliers.is_empty() {
            return Err(bad("at least one level is required".into()));
        }
        if self.channel_multipliers.iter().any(|&m| m == 0) {
            return Err(bad("channel multipliers must be positive".into()));
        }
        if self.blocks_per_level == 0 {
            return Err(bad("blocks_per_level must be positive".into()));
        }
        if self.temb_width < 2 || self.temb_width % 2 != 0 {
            return Err(bad(format!(
                "temb_width must be even and at least 2, got {}",
                self.temb_width
            )));
        }
        if self.text_width == 0 || self.vocab_size == 0 {
            return Err(bad("text_width and vocab_size must be positive".into()));
        }
        if self.attention_heads == 0 {
            return Err(bad("attention_heads must be positive".into()));
        }
        if self.norm_groups == 0 || self.base_channels % self.norm_groups != 0 {
            return Err(bad(format!(
                "norm_groups {} must divide base_channels {}",
                self.norm_groups, self.base_channels
            )));
        }
        let mut seen = Vec::new();
        for &l in &self.attention_levels {
            if l >= self.levels() {
                return Err(bad(format!(
                    "attention level {l} out of range for {} levels",
                    self.levels()
                )));
            }
            if seen.contains(&l) {
                return Err(bad(format!("attention level {l} listed twice")));
            }
            seen.push(l);
            if self.width(l) % self.attention_heads != 0 {
                return Err(bad(format!(
                    "width {} at attention level {l} is not divisible by {} heads",
                    self.width(l),
                    self.attention_heads
                )));
            }
        }
        Ok(())
    }
}

/// One training pair: two views of the same scene, each with its own noised
/// image, coarse condition render, and timestep, under one full-text token
/// sequence. Channel layout after concatenation is [noised RGB | coarse RGB].
#[derive(Debug, Clone)]
pub struct TwoStreamBatch {
    pub x1_t: Tensor<f32>,
    pub x2_t: Tensor<f32>,
    pub xc1: Tensor<f32>,
    pub xc2: Tensor<f32>,
    pub t1: usize,
    pub t2: usize,
    pub y_full: Vec<usize>,
}

impl TwoStreamBatch {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x1_t: Tensor<f32>,
        x2_t: Tensor<f32>,
        xc1: Tensor<f32>,
        xc2: Tensor<f32>,
        t1: usize,
        t2: usize,
        y_full: Vec<usize>,
    ) -> Result<Self> {
        let shape = x1_t.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
            return Err(Error::InvalidShape {
                op: "TwoStreamBatch::new",
                shape,
                reason: "images must be [3, r, r]".into(),
            });
        }
        for (name, img) in [("x2_t", &x2_t), ("xc1", &xc1), ("xc2", &xc2)] {
            if img.shape() != shape.as_slice() {
                return Err(Error::InvalidArgument {
                    op: "TwoStreamBatch::new",
                    reason: format!(
                        "{name} has shape {:?}, expected {shape:?} — all four images must share one resolution",
                        img.shape()
                    ),
                });
            }
        }
        Ok(TwoStreamBatch {
            x1_t,
            x2_t,
            xc1,
            xc2,
            t1,
            t2,
            y_full,
        })
    }

    pub fn resolution(&self) -> usize {
        self.x1_t.shape()[1]
    }

    /// The same pair with the stream roles exchanged.
    pub fn swapped(&self) -> Self {
        TwoStreamBatch {
            x1_t: self.x2_t.clone(),
            x2_t: self.x1_t.clone(),
            xc1: self.xc2.clone(),
            xc2: self.xc1.clone(),
            t1: self.t2,
            t2: self.t1,
            y_full: self.y_full.clone(),
        }
    }
}

/// Sinusoidal timestep features, one row per timestep: `width/2` sines
/// followed by `width/2` cosines over a geometric frequency ladder from 1
/// down to 1e-4. These are constants; the learned part is the two-layer
/// perceptron applied in-graph.
pub fn timestep_embedding<T: Scalar>(ts: &[usize], width: usize) -> Result<Tensor<T>> {
    if width < 2 || width % 2 != 0 {
        return Err(Error::InvalidArgument {
            op: "timestep_embedding",
            reason: format!("width must be even and at least 2, got {width}"),
        });
    }
    if ts.is_empty() {
        return Err(Error::InvalidArgument {
            op: "timestep_embedding",
            reason: "no timesteps".into(),
        });
    }
    let half = width / 2;
    let denom = (half - 1).max(1) as f64;
    let omegas: Vec<f64> = (0..half)
        .map(|j| (-(10_000f64.ln()) * j as f64 / denom).exp())
        .collect();
    let mut data = Vec::with_capacity(ts.len() * width);
    for &t in ts {
        let tf = t as f64;
        for &w in &omegas {
            data.push(T::from_f64((tf * w).sin()));
        }
        for &w in &omegas {
            data.push(T::from_f64((tf * w).cos()));
        }
    }
    Tensor::new(vec![ts.len(), width], data)
}

/// Initialization class for one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// N(0, sqrt(2/fan_in)) — convolution and perceptron weights.
    He(usize),
    /// N(0, sqrt(1/fan_in)) — attention projections.
    Proj(usize),
    /// N(0, 0.5) — the text embedding table.
    Table,
    Zero,
    One,
}

/// Every parameter in a fixed walk order: name, shape, and init class. This
/// is the single census both initialization and checkpoint auditing use; the
/// graph builder walks the same architecture and resolves the same names.
fn param_specs(cfg: &UNetConfig) -> Vec<(String, Vec<usize>, Init)> {
    fn res_block(
        specs: &mut Vec<(String, Vec<usize>, Init)>,
        cfg: &UNetConfig,
        prefix: &str,
        cin: usize,
        cout: usize,
    ) {
        specs.push((format!("{prefix}.gn1.g"), vec![cin], Init::One));
        specs.push((format!("{prefix}.gn1.b"), vec![cin], Init::Zero));
        specs.push((format!("{prefix}.conv1.w"), vec![cout, cin, 3, 3], Init::He(cin * 9)));
        specs.push((format!("{prefix}.conv1.b"), vec![cout], Init::Zero));
        specs.push((format!("{prefix}.temb.w"), vec![cfg.temb_width, cout], Init::He(cfg.temb_width)));
        specs.push((format!("{prefix}.temb.b"), vec![cout], Init::Zero));
        specs.push((format!("{prefix}.gn2.g"), vec![cout], Init::One));
        specs.push((format!("{prefix}.gn2.b"), vec![cout], Init::Zero));
        // Zero: a fresh residual block is the identity.
        specs.push((format!("{prefix}.conv2.w"), vec![cout, cout, 3, 3], Init::Zero));
        specs.push((format!("{prefix}.conv2.b"), vec![cout], Init::Zero));
        if cin != cout {
            specs.push((format!("{prefix}.skip.w"), vec![cout, cin, 1, 1], Init::He(cin)));
            specs.push((format!("{prefix}.skip.b"), vec![cout], Init::Zero));
        }
    }
    fn attn_block(
        specs: &mut Vec<(String, Vec<usize>, Init)>,
        prefix: &str,
        c: usize,
        kv_width: usize,
    ) {
        specs.push((format!("{prefix}.gn.g"), vec![c], Init::One));
        specs.push((format!("{prefix}.gn.b"), vec![c], Init::Zero));
        specs.push((format!("{prefix}.wq"), vec![c, c], Init::Proj(c)));
        specs.push((format!("{prefix}.wk"), vec![kv_width, c], Init::Proj(kv_width)));
        specs.push((format!("{prefix}.wv"), vec![kv_width, c], Init::Proj(kv_width)));
        // Zero: a fresh attention block is the identity.
        specs.push((format!("{prefix}.wo"), vec![c, c], Init::Zero));
        specs.push((format!("{prefix}.bo"), vec![c], Init::Zero));
    }
    fn attn_stack(
        specs: &mut Vec<(String, Vec<usize>, Init)>,
        cfg: &UNetConfig,
        prefix: &str,
        c: usize,
    ) {
        attn_block(specs, &format!("{prefix}.self"), c, c);
        attn_block(specs, &format!("{prefix}.text"), c, cfg.text_width);
        if cfg.interaction == Interaction::CrossAttention {
            attn_block(specs, &format!("{prefix}.view"), c, c);
        }
    }

    let mut specs = Vec::new();
    specs.push((
        "unet.text.table".into(),
        vec![cfg.vocab_size, cfg.text_width],
        Init::Table,
    ));
    for layer in ["l1", "l2"] {
        specs.push((
            format!("unet.temb.{layer}.w"),
            vec![cfg.temb_width, cfg.temb_width],
            Init::He(cfg.temb_width),
        ));
        specs.push((format!("unet.temb.{layer}.b"), vec![cfg.temb_width], Init::Zero));
    }
    specs.push(("unet.in.w".into(), vec![cfg.base_channels, 6, 3, 3], Init::He(6 * 9)));
    specs.push(("unet.in.b".into(), vec![cfg.base_channels], Init::Zero));

    let levels = cfg.levels();
    let mut skips = vec![cfg.base_channels];
    let mut w_prev = cfg.base_channels;
    for l in 0..levels {
        let w = cfg.width(l);
        for b in 0..cfg.blocks_per_level {
            let prefix = format!("unet.down{l}.block{b}");
            res_block(&mut specs, cfg, &prefix, w_prev, w);
            w_prev = w;
            if cfg.has_attention(l) {
                attn_stack(&mut specs, cfg, &prefix, w);
            }
            skips.push(w);
        }
        if l + 1 < levels {
            specs.push((format!("unet.down{l}.down.w"), vec![w, w, 3, 3], Init::He(w * 9)));
            specs.push((format!("unet.down{l}.down.b"), vec![w], Init::Zero));
            skips.push(w);
        }
    }

    res_block(&mut specs, cfg, "unet.mid.block1", w_prev, w_prev);
    if cfg.has_attention(levels - 1) {
        attn_stack(&mut specs, cfg, "unet.mid", w_prev);
    }
    res_block(&mut specs, cfg, "unet.mid.block2", w_prev, w_prev);

    for l in (0..levels).rev() {
        let w = cfg.width(l);
        for b in 0..=cfg.blocks_per_level {
            let skip = skips.pop().expect("skip bookkeeping");
            let prefix = format!("unet.up{l}.block{b}");
            res_block(&mut specs, cfg, &prefix, w_prev + skip, w);
            w_prev = w;
            if cfg.has_attention(l) {
                attn_stack(&mut specs, cfg, &prefix, w);
            }
        }
        if l > 0 {
            specs.push((format!("unet.up{l}.up.w"), vec![w, w, 3, 3], Init::He(w * 9)));
            specs.push((format!("unet.up{l}.up.b"), vec![w], Init::Zero));
        }
    }
    debug_assert!(skips.is_empty(), "skip census out of balance");

    specs.push(("unet.out.gn.g".into(), vec![w_prev], Init::One));
    specs.push(("unet.out.gn.b".into(), vec![w_prev], Init::Zero));
    // Zero: the untrained network predicts exactly zero noise.
    specs.push(("unet.out.w".into(), vec![3, w_prev, 3, 3], Init::Zero));
    specs.push(("unet.out.b".into(), vec![3], Init::Zero));

    specs
}

/// Name -> shape for every parameter the config implies.
pub(crate) fn expected_shapes(cfg: &UNetConfig) -> BTreeMap<String, Vec<usize>> {
    param_specs(cfg)
        .into_iter()
        .map(|(name, shape, _)| (name, shape))
        .collect()
}

/// Fresh parameters in the documented layout. Residual-closing layers
/// (second convs, attention output projections, the final head) start at
/// zero; everything else draws scaled normals in the fixed walk order, so a
/// seeded generator makes initialization reproducible.
pub fn init_denoiser_params<T: Scalar>(cfg: &UNetConfig, rng: &mut ChaCha12Rng) -> Result<Params<T>> {
    cfg.validate()?;
    let mut params = Params::new();
    for (name, shape, init) in param_specs(cfg) {
        let n: usize = shape.iter().product();
        let mut normal = |std: f64| -> Vec<T> {
            (0..n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    T::from_f64(z * std)
                })
                .collect()
        };
        let data: Vec<T> = match init {
            Init::Zero => vec![T::ZERO; n],
            Init::One => vec![T::ONE; n],
            Init::He(fan) => normal((2.0 / fan as f64).sqrt()),
            Init::Proj(fan) => normal((1.0 / fan as f64).sqrt()),
            Init::Table => normal(0.5),
        };
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

/// Token sequence -> (len, text_width) embedding rows. Empty text falls back
/// to the learned null token; ids outside the table are rejected by name.
pub fn embed_text_nodes<T: Scalar>(
    g: &mut Graph<T>,
    binder: &ParamBinder,
    cfg: &UNetConfig,
    tokens: &[usize],
) -> Result<NodeId> {
    let fallback = [NULL_ID];
    let toks: &[usize] = if tokens.is_empty() { &fallback } else { tokens };
    for &t in toks {
        if t >= cfg.vocab_size {
            return Err(Error::UnknownToken {
                token: format!("id {t}"),
            });
        }
    }
    let table = binder.node("unet.text.table")?;
    g.embed(table, toks)
}

fn linear<T: Scalar>(
    g: &mut Graph<T>,
    binder: &ParamBinder,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = binder.node(&format!("{prefix}.w"))?;
    let b = binder.node(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_bias_row(y, b)
}

fn conv<T: Scalar>(
    g: &mut Graph<T>,
    binder: &ParamBinder,
    prefix: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
) -> Result<NodeId> {
    let w = binder.node(&format!("{prefix}.w"))?;
    let b = binder.node(&format!("{prefix}.b"))?;
    let y = g.conv2d(x, w, stride, pad)?;
    g.add_bias_chan(y, b)
}

fn gnorm<T: Scalar>(
    g: &mut Graph<T>,
    binder: &ParamBinder,
    prefix: &str,
    x: NodeId,
    groups: usize,
) -> Result<NodeId> {
    let gamma = binder.node(&format!("{prefix}.g"))?;
    let beta = binder.node(&format!("{prefix}.b"))?;
    g.group_norm(x, gamma, beta, groups, GN_EPS)
}

fn res_block_nodes<T: Scalar>(
    g: &mut Graph<T>,
    binder: &ParamBinder,
    cfg: &UNetConfig,
    prefix: &str,
    h: NodeId,
    temb: NodeId,
    cout: usize,
) -> Result<NodeId> {
    let cin = g.shape(h)[1];
    let n1 = gnorm(g, binder, &format!("{prefix}.gn1"), h, cfg.norm_groups)?;
    let a1 = g.silu(n1);
    let c1 = conv(g, binder, &format!("{prefix}.conv1"), a1, 1, 1)?;
    let ta = g.silu(temb);
    let tp = linear(g, binder, &format!("{prefix}.temb"), ta)?;
    let c1 = g.add_chan_map(c1, tp)?;
    let n2 = gnorm(g, binder, &format!("{prefix}.gn2"), c1, cfg.norm_groups)?;
    let a2 = g.silu(n2);
    let c2 = conv(g, binder, &format!("{prefix}.conv2"), a2, 1, 1)?;
    let skip = if cin != cout {
        conv(g, binder, &format!("{prefix}.skip"), h, 1, 0)?
    } else {
        h
    };
    g.add(skip, c2)
}

/// Where an attention block's keys and values come from.
enum KvSource {
    /// The block's own normalized tokens.
    SelfTokens,
    /// The other stream's normalized tokens (batch order flipped).
    OtherStream,
    /// The shared text embedding sequence, replicated across the batch.
    Text(NodeId),
}

fn attn_block_nodes<T: Scalar>(
    g: &mut Graph<T>,
    binder: &ParamBinder,
    cfg: &UNetConfig,
    prefix: &str,
    h: NodeId,
    source: KvSource,
) -> Result<NodeId> {
    let shape = g.shape(h).to_vec();
    let (b, c, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = hh * ww;
    let heads = cfg.attention_heads;
    let d = c / heads;

    let n = gnorm(g, binder, &format!("{prefix}.gn"), h, cfg.norm_groups)?;
    let flat = g.reshape(n, vec![b, c, hw])?;
    let tok = g.transpose12(flat)?; // (b, hw, c)

    // Split (b, len, w) into (b*heads, len, d) after a width-preserving
    // projection of the last axis.
    let project = |g: &mut Graph<T>, src: NodeId, w: NodeId, len: usize| -> Result<NodeId> {
        let src_w = g.shape(src)[2];
        let flat = g.reshape(src, vec![b * len, src_w])?;
        let p = g.matmul(flat, w)?;
        let split = g.reshape(p, vec![b, len, heads, d])?;
        let swapped = g.permute0213(split)?; // (b, heads, len, d)
        g.reshape(swapped, vec![b * heads, len, d])
    };

    let (kv, lk) = match source {
        KvSource::SelfTokens => (tok, hw),
        KvSource::OtherStream => (g.flip_batch0(tok)?, hw),
        KvSource::Text(text) => {
            let ts = g.shape(text).to_vec();
            let (len, wd) = (ts[0], ts[1]);
            let idx: Vec<usize> = (0..b).flat_map(|_| 0..len).collect();
            let rep = g.embed(text, &idx)?;
            (g.reshape(rep, vec![b, len, wd])?, len)
        }
    };

    let wq = binder.node(&format!("{prefix}.wq"))?;
    let wk = binder.node(&format!("{prefix}.wk"))?;
    let wv = binder.node(&format!("{prefix}.wv"))?;
    let q = project(g, tok, wq, hw)?;
    let k = project(g, kv, wk, lk)?;
    let v = project(g, kv, wv, lk)?;

    let scores = g.bmm(q, k, true)?; // (b*heads, hw, lk)
    let scaled = g.mul_scalar(scores, T::from_f64(1.0 / (d as f64).sqrt()));
    let attn = g.softmax_last(scaled)?;
    let ctx = g.bmm(attn, v, false)?; // (b*heads, hw, d)

    let merged = g.reshape(ctx, vec![b, heads, hw, d])?;
    let merged = g.permute0213(merged)?; // (b, hw, heads, d)
    let flat = g.reshape(merged, vec![b * hw, c])?;
    let wo = binder.node(&format!("{prefix}.wo"))?;
    let bo = binder.node(&format!("{prefix}.bo"))?;
    let o = g.matmul(flat, wo)?;
    let o = g.add_bias_row(o, bo)?;
    let o3 = g.reshape(o, vec![b, hw, c])?;
    let oc = g.transpose12(o3)?;
    let out = g.reshape(oc, vec![b, c, hh, ww])?;
    g.add(h, out)
}

fn attn_stack_nodes<T: Scalar>(
    g: &mut Graph<T>,
    binder: &ParamBinder,
    cfg: &UNetConfig,
    prefix: &str,
    mut h: NodeId,
    text: NodeId,
    interact: bool,
) -> Result<NodeId> {
    h = attn_block_nodes(g, binder, cfg, &format!("{prefix}.self"), h, KvSource::SelfTokens)?;
    h = attn_block_nodes(g, binder, cfg, &format!("{prefix}.text"), h, KvSource::Text(text))?;
    if interact {
        h = attn_block_nodes(g, binder, cfg, &format!("{prefix}.view"), h, KvSource::OtherStream)?;
    }
    Ok(h)
}

/// Run the U-Net on a stack of streams.
///
/// `x_t` and `x_c` are (streams, 3, h, w) noised images and coarse renders;
/// `temb_raw` is the matching (streams, temb_width) sinusoidal features from
/// [`timestep_embedding`]; `text` is a (len, text_width) embedding sequence
/// (see [`embed_text_nodes`]). With `interact` the streams exchange features
/// through cross-view attention, which requires exactly two streams and a
/// config declaring `cross_attention`; without it every stream is an
/// independent single-stream pass. Returns noise predictions shaped like
/// `x_t`.
#[allow(clippy::too_many_arguments)]
pub fn unet_nodes<T: Scalar>(
    g: &mut Graph<T>,
    binder: &ParamBinder,
    cfg: &UNetConfig,
    x_t: NodeId,
    x_c: NodeId,
    temb_raw: NodeId,
    text: NodeId,
    interact: bool,
) -> Result<NodeId> {
    cfg.validate()?;
    let sx = g.shape(x_t).to_vec();
    if sx.len() != 4 || sx[1] != 3 {
        return Err(Error::InvalidShape {
            op: "unet_nodes",
            shape: sx,
            reason: "noised input must be (streams, 3, h, w)".into(),
        });
    }
    if g.shape(x_c) != sx.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "unet_nodes",
            lhs: sx,
            rhs: g.shape(x_c).to_vec(),
        });
    }
    let (streams, hh, ww) = (sx[0], sx[2], sx[3]);
    let m = cfg.min_multiple();
    if hh == 0 || ww == 0 || hh % m != 0 || ww % m != 0 {
        return Err(Error::InvalidShape {
            op: "unet_nodes",
            shape: sx,
            reason: format!("resolution {hh}x{ww} is not divisible by {m}"),
        });
    }
    if g.shape(temb_raw) != [streams, cfg.temb_width] {
        return Err(Error::ShapeMismatch {
            op: "unet_nodes",
            lhs: vec![streams, cfg.temb_width],
            rhs: g.shape(temb_raw).to_vec(),
        });
    }
    let st = g.shape(text).to_vec();
    if st.len() != 2 || st[1] != cfg.text_width || st[0] == 0 {
        return Err(Error::InvalidShape {
            op: "unet_nodes",
            shape: st,
            reason: format!("text must be (len >= 1, {})", cfg.text_width),
        });
    }
    if interact && (cfg.interaction != Interaction::CrossAttention || streams != 2) {
        return Err(Error::InvalidArgument {
            op: "unet_nodes",
            reason: format!(
                "interaction requires a cross_attention config and exactly 2 streams (got {streams})"
            ),
        });
    }

    let t1 = linear(g, binder, "unet.temb.l1", temb_raw)?;
    let ta = g.silu(t1);
    let temb = linear(g, binder, "unet.temb.l2", ta)?;

    let x = g.concat_axis1(x_t, x_c)?; // [noised RGB | coarse RGB]
    let mut h = conv(g, binder, "unet.in", x, 1, 1)?;

    let levels = cfg.levels();
    let mut skips = vec![h];
    for l in 0..levels {
        let w = cfg.width(l);
        for b in 0..cfg.blocks_per_level {
            let prefix = format!("unet.down{l}.block{b}");
            h = res_block_nodes(g, binder, cfg, &prefix, h, temb, w)?;
            if cfg.has_attention(l) {
                h = attn_stack_nodes(g, binder, cfg, &prefix, h, text, interact)?;
            }
            skips.push(h);
        }
        if l + 1 < levels {
            h = conv(g, binder, &format!("unet.down{l}.down"), h, 2, 1)?;
            skips.push(h);
        }
    }

    h = res_block_nodes(g, binder, cfg, "unet.mid.block1", h, temb, cfg.width(levels - 1))?;
    if cfg.has_attention(levels - 1) {
        h = attn_stack_nodes(g, binder, cfg, "unet.mid", h, text, interact)?;
    }
    h = res_block_nodes(g, binder, cfg, "unet.mid.block2", h, temb, cfg.width(levels - 1))?;

    for l in (0..levels).rev() {
        let w = cfg.width(l);
        for b in 0..=cfg.blocks_per_level {
            let skip = skips.pop().expect("skip bookkeeping");
            let cat = g.concat_axis1(h, skip)?;
            let prefix = format!("unet.up{l}.block{b}");
            h = res_block_nodes(g, binder, cfg, &prefix, cat, temb, w)?;
            if cfg.has_attention(l) {
                h = attn_stack_nodes(g, binder, cfg, &prefix, h, text, interact)?;
            }
        }
        if l > 0 {
            let u = g.upsample_nearest(h, 2)?;
            h = conv(g, binder, &format!("unet.up{l}.up"), u, 1, 1)?;
        }
    }
    debug_assert!(skips.is_empty(), "skip wiring out of balance");

    let n = gnorm(g, binder, "unet.out.gn", h, cfg.norm_groups)?;
    let a = g.silu(n);
    conv(g, binder, "unet.out", a, 1, 1)
}

/// A denoiser with its configuration and f32 parameters.
pub struct DenoiserNet {
    pub config: UNetConfig,
    pub params: Params<f32>,
}

impl DenoiserNet {
    pub fn init(config: &UNetConfig) -> Result<Self> {
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let params = init_denoiser_params::<f32>(config, &mut rng)?;
        Ok(DenoiserNet {
            config: config.clone(),
            params,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// The learned embedding sequence for a token list (empty -> null token).
    pub fn embed_text(&self, tokens: &[usize]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let binder = ParamBinder::bind(&mut g, &self.params, false)?;
        let node = embed_text_nodes(&mut g, &binder, &self.config, tokens)?;
        Ok(g.tensor(node))
    }

    /// Predict the added noise for both streams of a pair. With a
    /// `cross_attention` config the streams exchange features; with `none`
    /// they are computed independently (same weights either way).
    pub fn denoise_two_stream(&self, batch: &TwoStreamBatch) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.two_stream_impl(batch, None)
    }

    /// [`Self::denoise_two_stream`] conditioned on explicit embedding rows
    /// (len, text_width) instead of the batch's token ids — the entry point
    /// for interpolated or optimized text embeddings. Rows gathered from the
    /// table predict bit-identically to their token ids.
    pub fn denoise_two_stream_rows(
        &self,
        batch: &TwoStreamBatch,
        rows: &Tensor<f32>,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.two_stream_impl(batch, Some(rows))
    }

    fn two_stream_impl(
        &self,
        batch: &TwoStreamBatch,
        rows: Option<&Tensor<f32>>,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let r = batch.resolution();
        let stack = |a: &Tensor<f32>, b: &Tensor<f32>| {
            let mut data = Vec::with_capacity(2 * a.len());
            data.extend_from_slice(a.data());
            data.extend_from_slice(b.data());
            Tensor::new(vec![2, 3, r, r], data)
        };
        let x = stack(&batch.x1_t, &batch.x2_t)?;
        let xc = stack(&batch.xc1, &batch.xc2)?;
        let temb = timestep_embedding::<f32>(&[batch.t1, batch.t2], self.config.temb_width)?;

        let mut g = Graph::new();
        let binder = ParamBinder::bind(&mut g, &self.params, false)?;
        let xn = g.constant(&x)?;
        let xcn = g.constant(&xc)?;
        let tn = g.constant(&temb)?;
        let text = match rows {
            None => embed_text_nodes(&mut g, &binder, &self.config, &batch.y_full)?,
            Some(rows) => g.constant(rows)?,
        };
        let interact = self.config.interaction == Interaction::CrossAttention;
        let out = unet_nodes(&mut g, &binder, &self.config, xn, xcn, tn, text, interact)?;

        let v = g.value(out);
        let half = v.len() / 2;
        let eps1 = Tensor::new(vec![3, r, r], v[..half].to_vec())?;
        let eps2 = Tensor::new(vec![3, r, r], v[half..].to_vec())?;
        Ok((eps1, eps2))
    }

    /// One U-Net pass with no stream interaction (the ablation baseline, and
    /// the per-stream behaviour of an `interaction = none` pair).
    pub fn denoise_single_stream(
        &self,
        x_t: &Tensor<f32>,
        xc: &Tensor<f32>,
        t: usize,
        tokens: &[usize],
    ) -> Result<Tensor<f32>> {
        let shape = x_t.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::InvalidShape {
                op: "denoise_single_stream",
                shape,
                reason: "image must be [3, h, w]".into(),
            });
        }
        if xc.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "denoise_single_stream",
                lhs: shape,
                rhs: xc.shape().to_vec(),
            });
        }
        let (hh, ww) = (shape[1], shape[2]);
        let x = Tensor::new(vec![1, 3, hh, ww], x_t.data().to_vec())?;
        let xcb = Tensor::new(vec![1, 3, hh, ww], xc.data().to_vec())?;
        let temb = timestep_embedding::<f32>(&[t], self.config.temb_width)?;

        let mut g = Graph::new();
        let binder = ParamBinder::bind(&mut g, &self.params, false)?;
        let xn = g.constant(&x)?;
        let xcn = g.constant(&xcb)?;
        let tn = g.constant(&temb)?;
        let text = embed_text_nodes(&mut g, &binder, &self.config, tokens)?;
        let out = unet_nodes(&mut g, &binder, &self.config, xn, xcn, tn, text, false)?;
        Tensor::new(vec![3, hh, ww], g.value(out).to_vec())
    }

    pub fn save(&self, dir: &Path, step: u64) -> Result<()> {
        let hash = config_hash(&self.config)?;
        save_checkpoint(dir, &self.params, step, &hash)?;
        let path = dir.join("unet_config.json");
        let body = serde_json::to_string_pretty(&self.config)
            .map_err(|e| Error::msg(format!("unet config does not serialize: {e}")))?;
        std::fs::write(&path, body + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointMeta)> {
        let path = dir.join("unet_config.json");
        let body =
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: UNetConfig = serde_json::from_str(&body).map_err(|e| Error::Malformed {
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
        Ok((DenoiserNet { config, params }, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{adam_step, AdamConfig, AdamState};
    use approx::assert_relative_eq;

    fn micro_config() -> UNetConfig {
        UNetConfig {
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            attention_levels: vec![1],
            blocks_per_level: 1,
            temb_width: 8,
            text_width: 6,
            attention_heads: 2,
            norm_groups: 2,
            vocab_size: 5,
            interaction: Interaction::None,
            seed: 3,
        }
    }

    fn nano_config() -> UNetConfig {
        UNetConfig {
            base_channels: 2,
            channel_multipliers: vec![1, 2],
            attention_levels: vec![1],
            blocks_per_level: 1,
            temb_width: 4,
            text_width: 3,
            attention_heads: 1,
            norm_groups: 1,
            vocab_size: 4,
            interaction: Interaction::CrossAttention,
            seed: 4,
        }
    }

    /// Push every parameter away from its init (zero layers included), so
    /// forwards are generic rather than identically zero.
    fn jolt(net: &mut DenoiserNet, seed: u64) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for (_, t) in net.params.iter_mut() {
            let noise = Tensor::<f32>::randn(t.shape().to_vec(), &mut rng);
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += 0.2 * n;
            }
        }
    }

    fn image(rng: &mut ChaCha12Rng, r: usize) -> Tensor<f32> {
        Tensor::randn(vec![3, r, r], rng)
    }

    fn batch(rng: &mut ChaCha12Rng, r: usize, t1: usize, t2: usize, y: Vec<usize>) -> TwoStreamBatch {
        TwoStreamBatch::new(
            image(rng, r),
            image(rng, r),
            image(rng, r),
            image(rng, r),
            t1,
            t2,
            y,
        )
        .unwrap()
    }

    #[test]
    fn timestep_embedding_matches_hand_computed_values() {
        let e = timestep_embedding::<f64>(&[1, 10], 4).unwrap();
        assert_eq!(e.shape(), &[2, 4]);
        let w1 = 1e-4f64; // second frequency: 10000^(-1)
        let expect = [
            1f64.sin(),
            w1.sin(),
            1f64.cos(),
            w1.cos(),
            10f64.sin(),
            (10.0 * w1).sin(),
            10f64.cos(),
            (10.0 * w1).cos(),
        ];
        for (got, want) in e.data().iter().zip(expect) {
            assert_relative_eq!(*got, want, max_relative = 1e-12);
        }
        assert!(timestep_embedding::<f64>(&[1], 5).is_err());
        assert!(timestep_embedding::<f64>(&[], 4).is_err());
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let ok = micro_config();
        assert!(ok.validate().is_ok());
        let mut c = ok.clone();
        c.base_channels = 0;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.channel_multipliers.clear();
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.attention_levels = vec![2];
        assert!(c.validate().is_err(), "attention level out of range");
        let mut c = ok.clone();
        c.attention_levels = vec![1, 1];
        assert!(c.validate().is_err(), "duplicate attention level");
        let mut c = ok.clone();
        c.temb_width = 7;
        assert!(c.validate().is_err(), "odd temb width");
        let mut c = ok.clone();
        c.norm_groups = 3;
        assert!(c.validate().is_err(), "groups must divide base");
        let mut c = ok.clone();
        c.attention_heads = 3;
        assert!(c.validate().is_err(), "heads must divide attn width");
        let mut c = ok;
        c.blocks_per_level = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn untrained_net_predicts_exactly_zero_twice() {
        let net = DenoiserNet::init(&micro_config()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = image(&mut rng, 8);
        let xc = image(&mut rng, 8);
        let a = net.denoise_single_stream(&x, &xc, 250, &[1, 2]).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0), "zero-init output layer");
        // And the pass is deterministic: a second run is bit-identical.
        let b = net.denoise_single_stream(&x, &xc, 250, &[1, 2]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn swap_symmetry_is_bit_exact() {
        let mut net = DenoiserNet::init(&nano_config()).unwrap();
        jolt(&mut net, 11);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let b = batch(&mut rng, 4, 37, 645, vec![1, 3]);
        let (e1, e2) = net.denoise_two_stream(&b).unwrap();
        let (s1, s2) = net.denoise_two_stream(&b.swapped()).unwrap();
        assert_eq!(e1.data(), s2.data(), "stream 1 must become stream 2");
        assert_eq!(e2.data(), s1.data(), "stream 2 must become stream 1");
        // Non-vacuity: the two streams see different inputs, so their
        // predictions differ.
        assert_ne!(e1.data(), e2.data());
    }

    #[test]
    fn interaction_none_makes_streams_independent() {
        let mut net = DenoiserNet::init(&micro_config()).unwrap();
        jolt(&mut net, 12);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let b1 = batch(&mut rng, 8, 100, 200, vec![2]);
        let mut b2 = b1.clone();
        b2.x2_t = image(&mut rng, 8);
        b2.xc2 = image(&mut rng, 8);
        b2.t2 = 900;
        let (e1a, e2a) = net.denoise_two_stream(&b1).unwrap();
        let (e1b, e2b) = net.denoise_two_stream(&b2).unwrap();
        assert_eq!(e1a.data(), e1b.data(), "stream 1 saw identical inputs");
        assert_ne!(e2a.data(), e2b.data(), "stream 2 saw different inputs");
    }

    #[test]
    fn single_stream_matches_two_stream_without_interaction() {
        let mut net = DenoiserNet::init(&micro_config()).unwrap();
        jolt(&mut net, 13);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let b = batch(&mut rng, 8, 5, 770, vec![1, 4]);
        let (e1, e2) = net.denoise_two_stream(&b).unwrap();
        let s1 = net
            .denoise_single_stream(&b.x1_t, &b.xc1, b.t1, &b.y_full)
            .unwrap();
        let s2 = net
            .denoise_single_stream(&b.x2_t, &b.xc2, b.t2, &b.y_full)
            .unwrap();
        assert_eq!(e1.data(), s1.data());
        assert_eq!(e2.data(), s2.data());
    }

    #[test]
    fn output_shape_tracks_input_for_config_presets() {
        for (cfg, r) in [
            (UNetConfig::default(), 32usize),
            (micro_config(), 8),
            (nano_config(), 4),
        ] {
            let mut net = DenoiserNet::init(&cfg).unwrap();
            jolt(&mut net, 14);
            let mut rng = ChaCha12Rng::seed_from_u64(5);
            let b = batch(&mut rng, r, 1, 999, vec![1]);
            let started = std::time::Instant::now();
            let (e1, e2) = net.denoise_two_stream(&b).unwrap();
            eprintln!(
                "two-stream pass at {r}x{r} ({} params): {:.1} ms",
                net.num_params(),
                started.elapsed().as_secs_f64() * 1e3
            );
            assert_eq!(e1.shape(), &[3, r, r]);
            assert_eq!(e2.shape(), &[3, r, r]);
        }
        // Resolutions that do not survive the level halvings are rejected.
        let net = DenoiserNet::init(&micro_config()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let b = batch(&mut rng, 9, 1, 1, vec![1]);
        assert!(net.denoise_two_stream(&b).is_err());
    }

    #[test]
    fn embedding_rows_condition_exactly_like_their_tokens() {
        let mut net = DenoiserNet::init(&nano_config()).unwrap();
        jolt(&mut net, 16);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let b = batch(&mut rng, 4, 11, 700, vec![1, 3]);
        let (e1, e2) = net.denoise_two_stream(&b).unwrap();
        let rows = net.embed_text(&[1, 3]).unwrap();
        let (r1, r2) = net.denoise_two_stream_rows(&b, &rows).unwrap();
        assert_eq!(e1.data(), r1.data());
        assert_eq!(e2.data(), r2.data());
        // Different rows change the prediction; malformed rows are rejected.
        let other = net.embed_text(&[2]).unwrap();
        let (o1, _) = net.denoise_two_stream_rows(&b, &other).unwrap();
        assert_ne!(e1.data(), o1.data());
        let bad = Tensor::<f32>::zeros(vec![2, 5]);
        assert!(net.denoise_two_stream_rows(&b, &bad).is_err());
    }

    #[test]
    fn embedding_conventions_hold() {
        let net = DenoiserNet::init(&micro_config()).unwrap();
        let empty = net.embed_text(&[]).unwrap();
        assert_eq!(empty.shape(), &[1, 6], "empty text is one null row");
        let null = net.embed_text(&[NULL_ID]).unwrap();
        assert_eq!(empty.data(), null.data());
        let a = net.embed_text(&[1, 3, 2]).unwrap();
        let b = net.embed_text(&[1, 3, 2]).unwrap();
        assert_eq!(a.data(), b.data(), "identical sequences, identical rows");
        let err = net.embed_text(&[7]).unwrap_err();
        assert!(matches!(err, Error::UnknownToken { token } if token == "id 7"));
    }

    #[test]
    fn parameter_census_adds_only_view_blocks_for_interaction() {
        let cross = nano_config();
        let mut none = cross.clone();
        none.interaction = Interaction::None;
        let with = expected_shapes(&cross);
        let without = expected_shapes(&none);
        for (name, shape) in &without {
            assert_eq!(with.get(name), Some(shape), "shared parameter {name}");
        }
        let extra: Vec<&String> = with.keys().filter(|k| !without.contains_key(*k)).collect();
        assert!(!extra.is_empty());
        assert!(
            extra.iter().all(|k| k.contains(".view.")),
            "interaction adds only cross-view blocks: {extra:?}"
        );
        // One U-Net, no per-stream copies: nothing in the census is
        // stream-indexed.
        assert!(with.keys().all(|k| !k.contains("stream")));

        // The documented zero/one initializations hold.
        let params = init_denoiser_params::<f32>(&cross, &mut ChaCha12Rng::seed_from_u64(0)).unwrap();
        for (name, t) in params.iter() {
            let zero = t.data().iter().all(|&v| v == 0.0);
            let one = t.data().iter().all(|&v| v == 1.0);
            if name.ends_with("conv2.w")
                || name.ends_with(".wo")
                || name.ends_with(".bo")
                || name == "unet.out.w"
                || name == "unet.out.b"
                || name.ends_with(".b")
            {
                assert!(zero, "{name} should start at zero");
            } else if name.ends_with("gn.g") || name.ends_with("gn1.g") || name.ends_with("gn2.g") {
                assert!(one, "{name} should start at one");
            } else {
                assert!(!zero, "{name} should not start at zero");
            }
        }
    }

    #[test]
    fn every_parameter_is_live_after_warmup() {
        // Three steps populate the zero layers (out head first, then the
        // residual-closing layers, then everything they gate); afterwards a
        // backward pass must reach every tensor. f64 keeps tiny gradients
        // from flushing to zero.
        let cfg = nano_config();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut params = init_denoiser_params::<f64>(&cfg, &mut rng).unwrap();
        let mut state = AdamState::new();
        let opt = AdamConfig::with_lr(1e-2);
        let mut final_grads = None;
        for step in 0..4 {
            let x = Tensor::<f64>::randn(vec![2, 3, 4, 4], &mut rng);
            let xc = Tensor::<f64>::randn(vec![2, 3, 4, 4], &mut rng);
            let eps = Tensor::<f64>::randn(vec![2, 3, 4, 4], &mut rng);
            let temb = timestep_embedding::<f64>(&[7, 300], cfg.temb_width).unwrap();
            let mut g = Graph::new();
            let binder = ParamBinder::bind(&mut g, &params, true).unwrap();
            let xn = g.constant(&x).unwrap();
            let xcn = g.constant(&xc).unwrap();
            let tn = g.constant(&temb).unwrap();
            let text = embed_text_nodes(&mut g, &binder, &cfg, &[1, 2, 3]).unwrap();
            let out = unet_nodes(&mut g, &binder, &cfg, xn, xcn, tn, text, true).unwrap();
            let en = g.constant(&eps).unwrap();
            let d = g.sub(out, en).unwrap();
            let sq = g.mul(d, d).unwrap();
            let loss = g.mean_all(sq);
            g.backward(loss).unwrap();
            let grads = binder.grads(&g);
            if step == 3 {
                final_grads = Some(grads);
                break;
            }
            adam_step(&mut params, &grads, &mut state, &opt).unwrap();
        }
        for (name, grad) in final_grads.unwrap() {
            // The null row of the text table is legitimately unused here.
            let live = grad.data().iter().any(|&v| v != 0.0);
            if name == "unet.text.table" {
                let width = cfg.text_width;
                for row in 1..cfg.vocab_size {
                    let r = &grad.data()[row * width..(row + 1) * width];
                    assert!(r.iter().any(|&v| v != 0.0), "table row {row} is dead");
                }
            } else {
                assert!(live, "parameter {name} receives no gradient");
            }
        }
    }

    #[test]
    fn checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = DenoiserNet::init(&nano_config()).unwrap();
        jolt(&mut net, 15);
        net.save(dir.path(), 42).unwrap();
        let (loaded, meta) = DenoiserNet::load(dir.path()).unwrap();
        assert_eq!(meta.step, 42);
        for (name, t) in net.params.iter() {
            assert_eq!(t.data(), loaded.params.get(name).unwrap().data(), "{name}");
        }
        // A doctored config no longer matches the stored tensor shapes.
        let cfg_path = dir.path().join("unet_config.json");
        let mut doctored: UNetConfig =
            serde_json::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
        doctored.base_channels = 4;
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&doctored).unwrap()).unwrap();
        assert!(matches!(DenoiserNet::load(dir.path()), Err(Error::Malformed { .. })));
    }

    #[test]
    fn two_stream_batch_constructor_enforces_shapes() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let good = image(&mut rng, 8);
        let small = image(&mut rng, 4);
        let err = TwoStreamBatch::new(
            good.clone(),
            small,
            good.clone(),
            good.clone(),
            1,
            1,
            vec![],
        );
        assert!(err.is_err(), "mismatched resolutions");
        let flat = Tensor::<f32>::zeros(vec![3, 64]);
        assert!(TwoStreamBatch::new(
            flat.clone(),
            flat.clone(),
            flat.clone(),
            flat,
            1,
            1,
            vec![],
        )
        .is_err());
    }
}
