//! Miniature 3D UNet denoiser.
//!
//! Each block runs a spatiotemporal convolution (2D spatial conv then 1D
//! temporal conv), a spatial transformer (self-attention, cross-attention
//! over the text sequence, feed-forward) and a temporal transformer
//! (self-attention, feed-forward). Every parameter belongs to exactly one
//! named sublayer address carrying a category and a spatial/temporal domain;
//! adapters and LoRA hook in by address.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterMode, AdapterSet};
use crate::encoders::{AppearanceEmbedding, TextSequence};
use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::nn::{attention_core, sinusoidal_features, Conv1d, Conv2d, LayerNorm, Linear, NamedParams};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerCategory {
    CrossAttention,
    SelfAttention,
    FeedForward,
    Other,
}

impl LayerCategory {
    pub fn all() -> [LayerCategory; 4] {
        [
            LayerCategory::CrossAttention,
            LayerCategory::SelfAttention,
            LayerCategory::FeedForward,
            LayerCategory::Other,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerCategory::CrossAttention => "cross_attention",
            LayerCategory::SelfAttention => "self_attention",
            LayerCategory::FeedForward => "feed_forward",
            LayerCategory::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerDomain {
    Spatial,
    Temporal,
}

impl LayerDomain {
    pub fn name(&self) -> &'static str {
        match self {
            LayerDomain::Spatial => "spatial",
            LayerDomain::Temporal => "temporal",
        }
    }
}

impl std::str::FromStr for LayerDomain {
    type Err = Error;
    fn from_str(s: &str) -> Result<LayerDomain> {
        match s {
            "spatial" => Ok(LayerDomain::Spatial),
            "temporal" => Ok(LayerDomain::Temporal),
            other => Err(Error::invalid(format!("unknown domain {other:?}"))),
        }
    }
}

/// Address of one parameter-bearing sublayer.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerAddress {
    pub path: String,
    pub category: LayerCategory,
    pub domain: LayerDomain,
}

impl LayerAddress {
    pub fn new(path: impl Into<String>, category: LayerCategory, domain: LayerDomain) -> Result<LayerAddress> {
        if category == LayerCategory::CrossAttention && domain != LayerDomain::Spatial {
            return Err(Error::invalid("cross-attention only exists in spatial parameters"));
        }
        Ok(LayerAddress { path: path.into(), category, domain })
    }
}

/// Address plus the widths adapters need and the parameters it owns.
#[derive(Debug, Clone)]
pub struct LayerInfo {
    pub address: LayerAddress,
    /// Transformer width `l` for attention/feed-forward sublayers.
    pub width: Option<usize>,
    /// Context width for attention K/V projections (text width for
    /// cross-attention, `l` for self-attention).
    pub ctx_width: Option<usize>,
    pub param_names: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_blocks: usize,
    pub attn_heads: usize,
    pub text_dim: usize,
    pub latent_channels: usize,
    pub frames: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub ffn_mult: usize,
    pub time_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            num_blocks: 1,
            attn_heads: 4,
            text_dim: 32,
            latent_channels: 4,
            frames: 8,
            latent_h: 8,
            latent_w: 8,
            ffn_mult: 2,
            time_dim: 128,
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

    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.is_empty() {
            return Err(Error::Config("channel_multipliers must be non-empty".into()));
        }
        if self.num_blocks == 0 {
            return Err(Error::Config("num_blocks must be positive".into()));
        }
        for level in 0..self.levels() {
            if self.width(level) % self.attn_heads != 0 {
                return Err(Error::Config(format!(
                    "width {} at level {level} not divisible by {} heads",
                    self.width(level),
                    self.attn_heads
                )));
            }
        }
        let down_factor = 1usize << (self.levels() - 1);
        if self.latent_h % down_factor != 0 || self.latent_w % down_factor != 0 {
            return Err(Error::Config(format!(
                "latent {}x{} not divisible by downsampling factor {down_factor}",
                self.latent_h, self.latent_w
            )));
        }
        if self.base_channels % 2 != 0 {
            return Err(Error::Config("base_channels must be even (sinusoidal features)".into()));
        }
        Ok(())
    }

    pub fn latent_dims(&self, batch: usize) -> [usize; 5] {
        [batch, self.frames, self.latent_h, self.latent_w, self.latent_channels]
    }
}

/// Which adapter evaluated during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Identity,
    Motion,
    LoraK,
    LoraV,
}

/// Activation audit of one forward pass: every sublayer visited and every
/// adapter that actually ran.
#[derive(Debug, Default)]
pub struct ForwardTrace {
    pub sublayers: Vec<LayerAddress>,
    pub adapter_firings: Vec<(String, AdapterKind)>,
}

impl ForwardTrace {
    fn visit(&mut self, addr: &LayerAddress) {
        self.sublayers.push(addr.clone());
    }

    fn fire(&mut self, path: &str, kind: AdapterKind) {
        self.adapter_firings.push((path.to_string(), kind));
    }
}

struct AttnWeights {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl AttnWeights {
    fn new(l: usize, ctx: usize, heads: usize, r: &mut rand_chacha::ChaCha8Rng) -> AttnWeights {
        AttnWeights {
            wq: Linear::new(l, l, false, r),
            wk: Linear::new(ctx, l, false, r),
            wv: Linear::new(ctx, l, false, r),
            wo: Linear::new(l, l, false, r),
            heads,
        }
    }

    fn forward(
        &self,
        x_norm: &Tensor,
        ctx_seq: &Tensor,
        lora: Option<&crate::adapters::LoraPair>,
        path: &str,
        trace: &mut ForwardTrace,
    ) -> Result<Tensor> {
        let q = self.wq.forward3(x_norm);
        let mut k = self.wk.forward3(ctx_seq);
        let mut v = self.wv.forward3(ctx_seq);
        if let Some(pair) = lora {
            k = k.add(&pair.k.delta(ctx_seq)?);
            trace.fire(path, AdapterKind::LoraK);
            v = v.add(&pair.v.delta(ctx_seq)?);
            trace.fire(path, AdapterKind::LoraV);
        }
        Ok(self.wo.forward3(&attention_core(&q, &k, &v, self.heads)))
    }

    fn params(&self, prefix: &str) -> NamedParams {
        let mut p = Vec::new();
        p.extend(self.wq.params(&format!("{prefix}.wq")));
        p.extend(self.wk.params(&format!("{prefix}.wk")));
        p.extend(self.wv.params(&format!("{prefix}.wv")));
        p.extend(self.wo.params(&format!("{prefix}.wo")));
        p
    }
}

struct Ffn {
    w1: Linear,
    w2: Linear,
}

impl Ffn {
    fn new(l: usize, mult: usize, r: &mut rand_chacha::ChaCha8Rng) -> Ffn {
        Ffn { w1: Linear::new(l, mult * l, false, r), w2: Linear::new(mult * l, l, false, r) }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        self.w2.forward3(&self.w1.forward3(x).gelu())
    }

    fn params(&self, prefix: &str) -> NamedParams {
        let mut p = Vec::new();
        p.extend(self.w1.params(&format!("{prefix}.w1")));
        p.extend(self.w2.params(&format!("{prefix}.w2")));
        p
    }
}

fn channel_norm(x: &Tensor, ln: &LayerNorm) -> Tensor {
    // (N, C, H, W) -> normalize across C at each position.
    let p = x.permute(&[0, 2, 3, 1]);
    ln.forward(&p).permute(&[0, 3, 1, 2])
}

struct ResBlock {
    norm1: LayerNorm,
    conv_s: Conv2d,
    time_proj: Linear,
    norm2: LayerNorm,
    conv_t: Conv1d,
    skip: Option<Conv2d>,
    c_out: usize,
}

impl ResBlock {
    fn new(c_in: usize, c_out: usize, time_dim: usize, r: &mut rand_chacha::ChaCha8Rng) -> ResBlock {
        ResBlock {
            norm1: LayerNorm::new(c_in),
            conv_s: Conv2d::new(c_in, c_out, 3, 1, 1, r),
            time_proj: Linear::new(time_dim, c_out, true, r),
            norm2: LayerNorm::new(c_out),
            conv_t: Conv1d::new(c_out, c_out, 3, 1, r),
            skip: (c_in != c_out).then(|| Conv2d::new(c_in, c_out, 1, 1, 0, r)),
            c_out,
        }
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, b: usize, f: usize) -> Tensor {
        let s = x.shape().to_vec();
        let (h, w) = (s[2], s[3]);
        let y = self.conv_s.forward(&channel_norm(x, &self.norm1).gelu());
        // Per-sample timestep conditioning, broadcast over frames/positions.
        let tp = self.time_proj.forward2(temb).reshape(&[b, 1, self.c_out, 1, 1]);
        let y = y
            .reshape(&[b, f, self.c_out, h, w])
            .add_bc(&tp)
            .reshape(&[b * f, self.c_out, h, w]);
        let z = channel_norm(&y, &self.norm2).gelu();
        // Temporal conv along the frame axis for every (b, h, w) position.
        let z = z
            .reshape(&[b, f, self.c_out, h, w])
            .permute(&[0, 3, 4, 2, 1])
            .reshape(&[b * h * w, self.c_out, f]);
        let z = self.conv_t.forward(&z);
        let z = z
            .reshape(&[b, h, w, self.c_out, f])
            .permute(&[0, 4, 3, 1, 2])
            .reshape(&[b * f, self.c_out, h, w]);
        let skip = match &self.skip {
            Some(conv) => conv.forward(x),
            None => x.clone(),
        };
        skip.add(&z)
    }

    fn spatial_params(&self, prefix: &str) -> NamedParams {
        let mut p = Vec::new();
        p.extend(self.norm1.params(&format!("{prefix}.norm1")));
        p.extend(self.conv_s.params(&format!("{prefix}.conv_s")));
        p.extend(self.time_proj.params(&format!("{prefix}.time_proj")));
        if let Some(skip) = &self.skip {
            p.extend(skip.params(&format!("{prefix}.skip")));
        }
        p
    }

    fn temporal_params(&self, prefix: &str) -> NamedParams {
        let mut p = Vec::new();
        p.extend(self.norm2.params(&format!("{prefix}.norm2")));
        p.extend(self.conv_t.params(&format!("{prefix}.conv_t")));
        p
    }
}

struct SpatialTransformer {
    ln1: LayerNorm,
    self_attn: AttnWeights,
    ln2: LayerNorm,
    cross_attn: AttnWeights,
    ln3: LayerNorm,
    ffn: Ffn,
}

struct TemporalTransformer {
    ln1: LayerNorm,
    self_attn: AttnWeights,
    ln2: LayerNorm,
    ffn: Ffn,
}

struct Block {
    res: ResBlock,
    sp: SpatialTransformer,
    tm: TemporalTransformer,
    width: usize,
}

impl Block {
    fn new(c_in: usize, width: usize, cfg: &UNetConfig, r: &mut rand_chacha::ChaCha8Rng) -> Block {
        Block {
            res: ResBlock::new(c_in, width, cfg.time_dim, r),
            sp: SpatialTransformer {
                ln1: LayerNorm::new(width),
                self_attn: AttnWeights::new(width, width, cfg.attn_heads, r),
                ln2: LayerNorm::new(width),
                cross_attn: AttnWeights::new(width, cfg.text_dim, cfg.attn_heads, r),
                ln3: LayerNorm::new(width),
                ffn: Ffn::new(width, cfg.ffn_mult, r),
            },
            tm: TemporalTransformer {
                ln1: LayerNorm::new(width),
                self_attn: AttnWeights::new(width, width, cfg.attn_heads, r),
                ln2: LayerNorm::new(width),
                ffn: Ffn::new(width, cfg.ffn_mult, r),
            },
            width,
        }
    }
}

struct DownLevel {
    blocks: Vec<Block>,
    downsample: Option<Conv2d>,
}

struct UpLevel {
    upsample: Conv2d,
    blocks: Vec<Block>,
}

/// Frozen-by-default denoiser epsilon(z_t, text, t).
pub struct UNet {
    cfg: UNetConfig,
    time1: Linear,
    time2: Linear,
    stem: Conv2d,
    down: Vec<DownLevel>,
    up: Vec<UpLevel>,
    head_norm: LayerNorm,
    head: Conv2d,
    infos: Vec<LayerInfo>,
}

impl UNet {
    pub fn new(cfg: &UNetConfig, seed: u64) -> Result<UNet> {
        cfg.validate()?;
        let mut r = rng::substream(seed, "unet");
        let levels = cfg.levels();
        let time1 = Linear::new(cfg.base_channels, cfg.time_dim, true, &mut r);
        let time2 = Linear::new(cfg.time_dim, cfg.time_dim, true, &mut r);
        let stem = Conv2d::new(cfg.latent_channels, cfg.width(0), 3, 1, 1, &mut r);

        let mut down = Vec::new();
        for level in 0..levels {
            let width = cfg.width(level);
            let mut blocks = Vec::new();
            for j in 0..cfg.num_blocks {
                let c_in = if j == 0 {
                    if level == 0 { cfg.width(0) } else { cfg.width(level) }
                } else {
                    width
                };
                blocks.push(Block::new(c_in, width, cfg, &mut r));
            }
            let downsample = (level + 1 < levels)
                .then(|| Conv2d::new(width, cfg.width(level + 1), 3, 2, 1, &mut r));
            down.push(DownLevel { blocks, downsample });
        }

        let mut up = Vec::new();
        for level in (0..levels.saturating_sub(1)).rev() {
            let width = cfg.width(level);
            let upsample = Conv2d::new(cfg.width(level + 1), width, 3, 1, 1, &mut r);
            let mut blocks = Vec::new();
            for j in 0..cfg.num_blocks {
                let c_in = if j == 0 { width * 2 } else { width };
                blocks.push(Block::new(c_in, width, cfg, &mut r));
            }
            up.push(UpLevel { upsample, blocks });
        }

        let head_norm = LayerNorm::new(cfg.width(0));
        let head = Conv2d::new(cfg.width(0), cfg.latent_channels, 3, 1, 1, &mut r);
        // Start close to (but not at) a zero prediction so gradients flow.
        head.w.with_data_mut(|d| d.iter_mut().for_each(|v| *v *= 0.1));

        let mut unet = UNet {
            cfg: cfg.clone(),
            time1,
            time2,
            stem,
            down,
            up,
            head_norm,
            head,
            infos: Vec::new(),
        };
        unet.infos = unet.build_infos();
        Ok(unet)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    fn blocks_in_order(&self) -> Vec<(&Block, String)> {
        let mut out = Vec::new();
        for (i, level) in self.down.iter().enumerate() {
            for (j, b) in level.blocks.iter().enumerate() {
                out.push((b, format!("down{i}.b{j}")));
            }
        }
        for (slot, level) in self.up.iter().enumerate() {
            let i = self.down.len() - 2 - slot;
            for (j, b) in level.blocks.iter().enumerate() {
                out.push((b, format!("up{i}.b{j}")));
            }
        }
        out
    }

    fn build_infos(&self) -> Vec<LayerInfo> {
        let mut infos = Vec::new();
        let mut push = |addr: LayerAddress, width: Option<usize>, ctx: Option<usize>, params: NamedParams| {
            infos.push(LayerInfo {
                address: addr,
                width,
                ctx_width: ctx,
                param_names: params.into_iter().map(|(n, _)| n).collect(),
            });
        };
        let other_sp = |p: &str| LayerAddress::new(p, LayerCategory::Other, LayerDomain::Spatial).unwrap();
        let other_tm = |p: &str| LayerAddress::new(p, LayerCategory::Other, LayerDomain::Temporal).unwrap();

        let mut time_params = self.time1.params("time_mlp.l1");
        time_params.extend(self.time2.params("time_mlp.l2"));
        push(other_sp("time_mlp"), None, None, time_params);
        push(other_sp("stem"), None, None, self.stem.params("stem"));

        for (block, prefix) in self.blocks_in_order() {
            let l = block.width;
            push(
                other_sp(&format!("{prefix}.res.spatial")),
                None,
                None,
                block.res.spatial_params(&format!("{prefix}.res")),
            );
            push(
                other_tm(&format!("{prefix}.res.temporal")),
                None,
                None,
                block.res.temporal_params(&format!("{prefix}.res")),
            );
            push(
                LayerAddress::new(
                    format!("{prefix}.sp.self_attn"),
                    LayerCategory::SelfAttention,
                    LayerDomain::Spatial,
                )
                .unwrap(),
                Some(l),
                Some(l),
                block.sp.self_attn.params(&format!("{prefix}.sp.self_attn")),
            );
            push(
                LayerAddress::new(
                    format!("{prefix}.sp.cross_attn"),
                    LayerCategory::CrossAttention,
                    LayerDomain::Spatial,
                )
                .unwrap(),
                Some(l),
                Some(self.cfg.text_dim),
                block.sp.cross_attn.params(&format!("{prefix}.sp.cross_attn")),
            );
            push(
                LayerAddress::new(
                    format!("{prefix}.sp.ffn"),
                    LayerCategory::FeedForward,
                    LayerDomain::Spatial,
                )
                .unwrap(),
                Some(l),
                None,
                block.sp.ffn.params(&format!("{prefix}.sp.ffn")),
            );
            let mut sp_norms = block.sp.ln1.params(&format!("{prefix}.sp.ln1"));
            sp_norms.extend(block.sp.ln2.params(&format!("{prefix}.sp.ln2")));
            sp_norms.extend(block.sp.ln3.params(&format!("{prefix}.sp.ln3")));
            push(other_sp(&format!("{prefix}.sp.norms")), None, None, sp_norms);
            push(
                LayerAddress::new(
                    format!("{prefix}.tm.self_attn"),
                    LayerCategory::SelfAttention,
                    LayerDomain::Temporal,
                )
                .unwrap(),
                Some(l),
                Some(l),
                block.tm.self_attn.params(&format!("{prefix}.tm.self_attn")),
            );
            push(
                LayerAddress::new(
                    format!("{prefix}.tm.ffn"),
                    LayerCategory::FeedForward,
                    LayerDomain::Temporal,
                )
                .unwrap(),
                Some(l),
                None,
                block.tm.ffn.params(&format!("{prefix}.tm.ffn")),
            );
            let mut tm_norms = block.tm.ln1.params(&format!("{prefix}.tm.ln1"));
            tm_norms.extend(block.tm.ln2.params(&format!("{prefix}.tm.ln2")));
            push(other_tm(&format!("{prefix}.tm.norms")), None, None, tm_norms);
        }

        for (i, level) in self.down.iter().enumerate() {
            if let Some(ds) = &level.downsample {
                push(
                    other_sp(&format!("down{i}.downsample")),
                    None,
                    None,
                    ds.params(&format!("down{i}.downsample")),
                );
            }
        }
        for (slot, level) in self.up.iter().enumerate() {
            let i = self.down.len() - 2 - slot;
            push(
                other_sp(&format!("up{i}.upsample")),
                None,
                None,
                level.upsample.params(&format!("up{i}.upsample")),
            );
        }
        let mut head_params = self.head_norm.params("head.norm");
        head_params.extend(self.head.params("head.conv"));
        push(other_sp("head"), None, None, head_params);
        infos
    }

    /// Every sublayer address; the addresses partition the parameters.
    pub fn enumerate_layers(&self) -> Vec<LayerAddress> {
        self.infos.iter().map(|i| i.address.clone()).collect()
    }

    pub fn layer_infos(&self) -> &[LayerInfo] {
        &self.infos
    }

    pub fn layer_width(&self, path: &str) -> Option<usize> {
        self.infos.iter().find(|i| i.address.path == path).and_then(|i| i.width)
    }

    pub fn layer_ctx_width(&self, path: &str) -> Option<usize> {
        self.infos.iter().find(|i| i.address.path == path).and_then(|i| i.ctx_width)
    }

    /// All parameters in declaration order (names are unique).
    pub fn named_params(&self) -> NamedParams {
        let mut out = Vec::new();
        out.extend(self.time1.params("time_mlp.l1"));
        out.extend(self.time2.params("time_mlp.l2"));
        out.extend(self.stem.params("stem"));
        for (block, prefix) in self.blocks_in_order() {
            out.extend(block.res.spatial_params(&format!("{prefix}.res")));
            out.extend(block.res.temporal_params(&format!("{prefix}.res")));
            out.extend(block.sp.self_attn.params(&format!("{prefix}.sp.self_attn")));
            out.extend(block.sp.cross_attn.params(&format!("{prefix}.sp.cross_attn")));
            out.extend(block.sp.ffn.params(&format!("{prefix}.sp.ffn")));
            out.extend(block.sp.ln1.params(&format!("{prefix}.sp.ln1")));
            out.extend(block.sp.ln2.params(&format!("{prefix}.sp.ln2")));
            out.extend(block.sp.ln3.params(&format!("{prefix}.sp.ln3")));
            out.extend(block.tm.self_attn.params(&format!("{prefix}.tm.self_attn")));
            out.extend(block.tm.ffn.params(&format!("{prefix}.tm.ffn")));
            out.extend(block.tm.ln1.params(&format!("{prefix}.tm.ln1")));
            out.extend(block.tm.ln2.params(&format!("{prefix}.tm.ln2")));
        }
        for (i, level) in self.down.iter().enumerate() {
            if let Some(ds) = &level.downsample {
                out.extend(ds.params(&format!("down{i}.downsample")));
            }
        }
        for (slot, level) in self.up.iter().enumerate() {
            let i = self.down.len() - 2 - slot;
            out.extend(level.upsample.params(&format!("up{i}.upsample")));
        }
        out.extend(self.head_norm.params("head.norm"));
        out.extend(self.head.params("head.conv"));
        out
    }

    /// Parameter names belonging to sublayers of one domain.
    pub fn param_names_in_domain(&self, domain: LayerDomain) -> Vec<String> {
        self.infos
            .iter()
            .filter(|i| i.address.domain == domain)
            .flat_map(|i| i.param_names.iter().cloned())
            .collect()
    }

    pub fn set_trainable(&self, trainable: bool) {
        for (_, p) in self.named_params() {
            p.set_trainable(trainable);
        }
    }

    /// Denoise prediction; output shape equals input shape.
    pub fn forward(
        &self,
        z_t: &LatentVideo,
        timesteps: &[usize],
        text: &TextSequence,
        adapters: &AdapterSet,
        appearance: Option<&AppearanceEmbedding>,
    ) -> Result<LatentVideo> {
        self.forward_traced(z_t, timesteps, text, adapters, appearance).map(|(out, _)| out)
    }

    /// Forward pass that also returns the activation audit.
    pub fn forward_traced(
        &self,
        z_t: &LatentVideo,
        timesteps: &[usize],
        text: &TextSequence,
        adapters: &AdapterSet,
        appearance: Option<&AppearanceEmbedding>,
    ) -> Result<(LatentVideo, ForwardTrace)> {
        let [b, f, h, w, c] = z_t.dims();
        if c != self.cfg.latent_channels {
            return Err(Error::ShapeMismatch {
                context: "unet_forward (channels)",
                expected: vec![self.cfg.latent_channels],
                got: vec![c],
            });
        }
        let down_factor = 1usize << (self.cfg.levels() - 1);
        if h % down_factor != 0 || w % down_factor != 0 {
            return Err(Error::invalid(format!(
                "latent {h}x{w} not divisible by downsampling factor {down_factor}"
            )));
        }
        if timesteps.len() != b {
            return Err(Error::invalid(format!(
                "{} timesteps for batch {b}",
                timesteps.len()
            )));
        }
        if text.batch() != b || text.embeddings.shape()[2] != self.cfg.text_dim {
            return Err(Error::ShapeMismatch {
                context: "unet_forward (text)",
                expected: vec![b, 0, self.cfg.text_dim],
                got: text.embeddings.shape().to_vec(),
            });
        }
        let appearance_e = if adapters.has_motion() {
            let cond_dim = adapters.motion_cond_dim().expect("has motion");
            match appearance {
                Some(a) => {
                    if a.batch() != b || a.cond_dim() != cond_dim {
                        return Err(Error::ShapeMismatch {
                            context: "unet_forward (appearance)",
                            expected: vec![b, 1, cond_dim],
                            got: a.e.shape().to_vec(),
                        });
                    }
                    Some(a.e.clone())
                }
                None if adapters.strict_appearance => return Err(Error::MissingGuidance),
                None => Some(Tensor::zeros(&[b, 1, cond_dim])),
            }
        } else {
            None
        };

        let mut trace = ForwardTrace::default();

        // Timestep embedding.
        let tvals: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
        let tfeat = Tensor::new(sinusoidal_features(&tvals, self.cfg.base_channels), &[b, self.cfg.base_channels]);
        let temb = self.time2.forward2(&self.time1.forward2(&tfeat).gelu());

        // Text context repeated per frame: row b*F+f sees prompt b.
        let tdim = self.cfg.text_dim;
        let ttok = text.embeddings.shape()[1];
        let text1 = text.embeddings.reshape(&[b, 1, ttok, tdim]);
        let text_rep = if f == 1 {
            text.embeddings.clone()
        } else {
            let refs: Vec<&Tensor> = std::iter::repeat(&text1).take(f).collect();
            Tensor::concat(1, &refs).reshape(&[b * f, ttok, tdim])
        };

        // (B, F, H, W, C) -> (B*F, C, H, W)
        let mut x = z_t
            .tensor()
            .reshape(&[b * f, h, w, c])
            .permute(&[0, 3, 1, 2]);
        x = self.stem.forward(&x);

        let mut skips: Vec<Tensor> = Vec::new();
        for (i, level) in self.down.iter().enumerate() {
            for (j, block) in level.blocks.iter().enumerate() {
                x = self.block_forward(
                    block,
                    &format!("down{i}.b{j}"),
                    &x,
                    &temb,
                    &text_rep,
                    adapters,
                    appearance_e.as_ref(),
                    b,
                    f,
                    &mut trace,
                )?;
            }
            if let Some(ds) = &level.downsample {
                skips.push(x.clone());
                x = ds.forward(&x);
            }
        }
        for (slot, level) in self.up.iter().enumerate() {
            let i = self.down.len() - 2 - slot;
            let sshape = x.shape().to_vec();
            let up = upsample_nearest2(&x, sshape[0], sshape[1], sshape[2], sshape[3]);
            x = level.upsample.forward(&up);
            let skip = skips.pop().expect("skip per up level");
            x = Tensor::concat(1, &[&skip, &x]);
            for (j, block) in level.blocks.iter().enumerate() {
                x = self.block_forward(
                    block,
                    &format!("up{i}.b{j}"),
                    &x,
                    &temb,
                    &text_rep,
                    adapters,
                    appearance_e.as_ref(),
                    b,
                    f,
                    &mut trace,
                )?;
            }
        }

        let x = self.head.forward(&channel_norm(&x, &self.head_norm).gelu());
        let out = x.permute(&[0, 2, 3, 1]).reshape(&[b, f, h, w, c]);
        Ok((LatentVideo::new(out)?, trace))
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        block: &Block,
        prefix: &str,
        x: &Tensor,
        temb: &Tensor,
        text_rep: &Tensor,
        adapters: &AdapterSet,
        appearance: Option<&Tensor>,
        b: usize,
        f: usize,
        trace: &mut ForwardTrace,
    ) -> Result<Tensor> {
        trace.visit(&LayerAddress::new(
            format!("{prefix}.res.spatial"),
            LayerCategory::Other,
            LayerDomain::Spatial,
        )?);
        trace.visit(&LayerAddress::new(
            format!("{prefix}.res.temporal"),
            LayerCategory::Other,
            LayerDomain::Temporal,
        )?);
        let x = block.res.forward(x, temb, b, f);
        let x = self.spatial_tf_forward(&block.sp, prefix, &x, text_rep, adapters, trace)?;
        self.temporal_tf_forward(&block.tm, prefix, &x, adapters, appearance, b, f, trace)
    }

    fn spatial_tf_forward(
        &self,
        sp: &SpatialTransformer,
        prefix: &str,
        x: &Tensor,
        text_rep: &Tensor,
        adapters: &AdapterSet,
        trace: &mut ForwardTrace,
    ) -> Result<Tensor> {
        let s = x.shape().to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut xt = x.permute(&[0, 2, 3, 1]).reshape(&[n, h * w, c]);

        let path = format!("{prefix}.sp.self_attn");
        trace.visit(&LayerAddress::new(&*path, LayerCategory::SelfAttention, LayerDomain::Spatial)?);
        let hn = sp.ln1.forward(&xt);
        let sub = sp.self_attn.forward(&hn, &hn, adapters.lora.get(&path), &path, trace)?;
        xt = xt.add(&sub);

        let path = format!("{prefix}.sp.cross_attn");
        trace.visit(&LayerAddress::new(&*path, LayerCategory::CrossAttention, LayerDomain::Spatial)?);
        let hn = sp.ln2.forward(&xt);
        let sub = sp.cross_attn.forward(&hn, text_rep, adapters.lora.get(&path), &path, trace)?;
        xt = match adapters.identity.get(&path) {
            None => xt.add(&sub),
            Some(adapter) => {
                trace.fire(&path, AdapterKind::Identity);
                match adapters.cross_attention_mode {
                    AdapterMode::Parallel => xt.add(&sub).add(&adapter.delta(&xt)?),
                    AdapterMode::Serial => xt.add(&adapter.forward(&sub)?),
                }
            }
        };

        let path = format!("{prefix}.sp.ffn");
        trace.visit(&LayerAddress::new(&*path, LayerCategory::FeedForward, LayerDomain::Spatial)?);
        let sub = sp.ffn.forward(&sp.ln3.forward(&xt));
        xt = xt.add(&sub);

        Ok(xt.reshape(&[n, h, w, c]).permute(&[0, 3, 1, 2]))
    }

    #[allow(clippy::too_many_arguments)]
    fn temporal_tf_forward(
        &self,
        tm: &TemporalTransformer,
        prefix: &str,
        x: &Tensor,
        adapters: &AdapterSet,
        appearance: Option<&Tensor>,
        b: usize,
        f: usize,
        trace: &mut ForwardTrace,
    ) -> Result<Tensor> {
        let s = x.shape().to_vec();
        let (c, h, w) = (s[1], s[2], s[3]);
        let mut xt = x
            .reshape(&[b, f, c, h, w])
            .permute(&[0, 3, 4, 1, 2])
            .reshape(&[b * h * w, f, c]);

        // Frame positions: temporal attention and per-frame adapter deltas
        // both need to know frame order.
        let fpos: Vec<f64> = (0..f).map(|i| i as f64).collect();
        let pos = Tensor::new(sinusoidal_features(&fpos, c), &[1, f, c]).scale(0.25);
        xt = xt.add_bc(&pos);

        let path = format!("{prefix}.tm.self_attn");
        trace.visit(&LayerAddress::new(&*path, LayerCategory::SelfAttention, LayerDomain::Temporal)?);
        let hn = tm.ln1.forward(&xt);
        let sub = tm.self_attn.forward(&hn, &hn, adapters.lora.get(&path), &path, trace)?;
        xt = self.apply_motion(&xt, &sub, &path, adapters.self_attention_mode, adapters, appearance, b, trace)?;

        let path = format!("{prefix}.tm.ffn");
        trace.visit(&LayerAddress::new(&*path, LayerCategory::FeedForward, LayerDomain::Temporal)?);
        let sub = tm.ffn.forward(&tm.ln2.forward(&xt));
        xt = self.apply_motion(&xt, &sub, &path, adapters.feed_forward_mode, adapters, appearance, b, trace)?;

        Ok(xt
            .reshape(&[b, h, w, f, c])
            .permute(&[0, 3, 4, 1, 2])
            .reshape(&[b * f, c, h, w]))
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_motion(
        &self,
        xt: &Tensor,
        sub: &Tensor,
        path: &str,
        mode: AdapterMode,
        adapters: &AdapterSet,
        appearance: Option<&Tensor>,
        b: usize,
        trace: &mut ForwardTrace,
    ) -> Result<Tensor> {
        match adapters.motion.get(path) {
            None => Ok(xt.add(sub)),
            Some(adapter) => {
                let e = appearance.expect("appearance resolved when motion adapters attached");
                trace.fire(path, AdapterKind::Motion);
                match mode {
                    AdapterMode::Parallel => {
                        let delta = adapter.delta_batched(xt, e, b)?;
                        Ok(xt.add(sub).add(&delta))
                    }
                    AdapterMode::Serial => {
                        let delta = adapter.delta_batched(sub, e, b)?;
                        Ok(xt.add(&sub.add(&delta)))
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour 2x upsample of `(N, C, H, W)`.
fn upsample_nearest2(x: &Tensor, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let mut map = Vec::with_capacity(n * c * h * 2 * w * 2);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..2 * h {
                for xw in 0..2 * w {
                    map.push((((b * c + ch) * h + y / 2) * w + xw / 2) as i64);
                }
            }
        }
    }
    x.gather_map(std::rc::Rc::new(map), &[n, c, 2 * h, 2 * w])
}

/// Spatial token grouping of a rank-5 hidden state `(B, F, h, w, l)`:
/// `(B*F, h*w, l)` with an exact round trip.
pub struct SpatialHiddenState {
    pub data: Tensor,
    pub dims: [usize; 5],
}

/// Temporal token grouping of the same state: `(B*h*w, F, l)`.
pub struct TemporalHiddenState {
    pub data: Tensor,
    pub dims: [usize; 5],
}

pub fn reshape_spatial(x: &Tensor) -> Result<SpatialHiddenState> {
    let s = x.shape().to_vec();
    if s.len() != 5 {
        return Err(Error::ShapeMismatch {
            context: "reshape_spatial",
            expected: vec![0; 5],
            got: s,
        });
    }
    let dims = [s[0], s[1], s[2], s[3], s[4]];
    Ok(SpatialHiddenState {
        data: x.reshape(&[s[0] * s[1], s[2] * s[3], s[4]]),
        dims,
    })
}

impl SpatialHiddenState {
    pub fn to_rank5(&self) -> Tensor {
        self.data.reshape(&self.dims)
    }
}

pub fn reshape_temporal(x: &Tensor) -> Result<TemporalHiddenState> {
    let s = x.shape().to_vec();
    if s.len() != 5 {
        return Err(Error::ShapeMismatch {
            context: "reshape_temporal",
            expected: vec![0; 5],
            got: s,
        });
    }
    let dims = [s[0], s[1], s[2], s[3], s[4]];
    Ok(TemporalHiddenState {
        data: x.permute(&[0, 2, 3, 1, 4]).reshape(&[s[0] * s[2] * s[3], s[1], s[4]]),
        dims,
    })
}

impl TemporalHiddenState {
    pub fn to_rank5(&self) -> Tensor {
        let [b, f, h, w, l] = self.dims;
        self.data.reshape(&[b, h, w, f, l]).permute(&[0, 3, 1, 2, 4])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderConfig, TextEncoder, VocabularyTable, DEFAULT_VOCAB};

    pub(crate) fn tiny_config() -> UNetConfig {
        UNetConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            num_blocks: 1,
            attn_heads: 2,
            text_dim: 12,
            latent_channels: 2,
            frames: 2,
            latent_h: 4,
            latent_w: 4,
            ffn_mult: 2,
            time_dim: 16,
        }
    }

    fn text_for(cfg: &UNetConfig, batch: usize) -> (VocabularyTable, TextSequence) {
        let ec = EncoderConfig { text_dim: cfg.text_dim, text_tokens: 5, cond_dim: 6, seed: 1 };
        let table = VocabularyTable::new(DEFAULT_VOCAB, ec.text_dim, ec.seed);
        let enc = TextEncoder::new(&ec);
        let prompts: Vec<&str> = vec!["a dog running"; batch];
        let seq = enc.encode_prompts(&table, &prompts).unwrap();
        (table, seq)
    }

    fn rand_latent(cfg: &UNetConfig, b: usize, f: usize, seed: u64) -> LatentVideo {
        let dims = [b, f, cfg.latent_h, cfg.latent_w, cfg.latent_channels];
        LatentVideo::from_data(
            rng::normal_vec(&mut rng::seeded(seed), dims.iter().product()),
            dims,
        )
        .unwrap()
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving() {
        let cfg = tiny_config();
        let model = UNet::new(&cfg, 42).unwrap();
        let (_, text) = text_for(&cfg, 2);
        let z = rand_latent(&cfg, 2, 2, 9);
        let set = AdapterSet::empty();
        let a = model.forward(&z, &[3, 5], &text, &set, None).unwrap();
        let b = model.forward(&z, &[3, 5], &text, &set, None).unwrap();
        assert_eq!(a.dims(), z.dims());
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn single_frame_input_works() {
        let cfg = tiny_config();
        let model = UNet::new(&cfg, 42).unwrap();
        let (_, text) = text_for(&cfg, 1);
        let z = rand_latent(&cfg, 1, 1, 10);
        let out = model.forward(&z, &[2], &text, &AdapterSet::empty(), None).unwrap();
        assert_eq!(out.dims(), [1, 1, 4, 4, 2]);
        assert!(out.tensor().all_finite());
    }

    #[test]
    fn zero_init_adapters_do_not_change_output() {
        let cfg = tiny_config();
        let model = UNet::new(&cfg, 42).unwrap();
        let plan = crate::adapters::PlacementPlan::default_for(&model);
        let identity = crate::adapters::create_identity_adapters(&model, &plan, 7).unwrap();
        let motion = crate::adapters::create_motion_adapters(&model, &plan, 6, 7).unwrap();
        let set = crate::adapters::attach(&model, &plan, Some(identity), Some(motion)).unwrap();
        let (_, text) = text_for(&cfg, 1);
        let z = rand_latent(&cfg, 1, 2, 11);
        let e = AppearanceEmbedding::zeros(1, 6);
        let base = model.forward(&z, &[4], &text, &AdapterSet::empty(), None).unwrap();
        let with = model.forward(&z, &[4], &text, &set, Some(&e)).unwrap();
        assert!(base.max_abs_diff(&with) <= 1e-6);
    }

    #[test]
    fn cross_attention_count_matches_spatial_transformers() {
        let cfg = tiny_config();
        let model = UNet::new(&cfg, 42).unwrap();
        let addrs = model.enumerate_layers();
        let cross = addrs
            .iter()
            .filter(|a| a.category == LayerCategory::CrossAttention)
            .count();
        // 2 levels, 1 block each: down0, down1, up0 -> 3 spatial transformers.
        let spatial_tf = addrs.iter().filter(|a| a.path.ends_with(".sp.self_attn")).count();
        assert_eq!(cross, 3);
        assert_eq!(cross, spatial_tf);
    }

    #[test]
    fn addresses_partition_parameters() {
        let cfg = tiny_config();
        let model = UNet::new(&cfg, 42).unwrap();
        let mut seen = std::collections::BTreeMap::new();
        for info in model.layer_infos() {
            for name in &info.param_names {
                *seen.entry(name.clone()).or_insert(0usize) += 1;
            }
        }
        let all: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(seen.len(), all.len());
        for name in &all {
            assert_eq!(seen.get(name), Some(&1), "param {name} not claimed exactly once");
        }
    }

    #[test]
    fn temporal_addresses_have_no_cross_attention() {
        let cfg = tiny_config();
        let model = UNet::new(&cfg, 42).unwrap();
        for a in model.enumerate_layers() {
            if a.domain == LayerDomain::Temporal {
                assert_ne!(a.category, LayerCategory::CrossAttention);
            }
        }
        assert!(LayerAddress::new("x", LayerCategory::CrossAttention, LayerDomain::Temporal).is_err());
    }

    #[test]
    fn reshape_round_trips_bitwise() {
        let x = Tensor::new(rng::normal_vec(&mut rng::seeded(3), 2 * 3 * 2 * 2 * 4), &[2, 3, 2, 2, 4]);
        let sp = reshape_spatial(&x).unwrap();
        assert_eq!(sp.data.shape(), &[6, 4, 4]);
        assert_eq!(sp.to_rank5().to_vec(), x.to_vec());
        let tm = reshape_temporal(&x).unwrap();
        assert_eq!(tm.data.shape(), &[8, 3, 4]);
        assert_eq!(tm.to_rank5().to_vec(), x.to_vec());
        assert!(reshape_spatial(&Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn reshape_shapes_match_arithmetic() {
        // B=1, F=2, h=w=1, l=3 -> temporal (1, 2, 3).
        let x = Tensor::new(rng::normal_vec(&mut rng::seeded(4), 6), &[1, 2, 1, 1, 3]);
        assert_eq!(reshape_temporal(&x).unwrap().data.shape(), &[1, 2, 3]);
        // B=2, F=3, h=w=2, l=4 -> spatial (6, 4, 4).
        let y = Tensor::new(rng::normal_vec(&mut rng::seeded(5), 2 * 3 * 2 * 2 * 4), &[2, 3, 2, 2, 4]);
        assert_eq!(reshape_spatial(&y).unwrap().data.shape(), &[6, 4, 4]);
    }

    #[test]
    fn missing_appearance_strict_vs_fallback() {
        let cfg = tiny_config();
        let model = UNet::new(&cfg, 42).unwrap();
        let plan = crate::adapters::PlacementPlan::default_for(&model);
        let motion = crate::adapters::create_motion_adapters(&model, &plan, 6, 7).unwrap();
        let mut set = crate::adapters::attach(&model, &plan, None, Some(motion)).unwrap();
        let (_, text) = text_for(&cfg, 1);
        let z = rand_latent(&cfg, 1, 2, 12);
        assert!(matches!(
            model.forward(&z, &[1], &text, &set, None),
            Err(Error::MissingGuidance)
        ));
        set.strict_appearance = false;
        let out = model.forward(&z, &[1], &text, &set, None).unwrap();
        let explicit_zero = model
            .forward(&z, &[1], &text, &set, Some(&AppearanceEmbedding::zeros(1, 6)))
            .unwrap();
        assert_eq!(out.to_vec(), explicit_zero.to_vec());
    }

    #[test]
    fn trace_reports_adapter_firings_at_correct_addresses() {
        let cfg = tiny_config();
        let model = UNet::new(&cfg, 42).unwrap();
        let plan = crate::adapters::PlacementPlan::default_for(&model);
        let identity = crate::adapters::create_identity_adapters(&model, &plan, 7).unwrap();
        let motion = crate::adapters::create_motion_adapters(&model, &plan, 6, 7).unwrap();
        let set = crate::adapters::attach(&model, &plan, Some(identity), Some(motion)).unwrap();
        let (_, text) = text_for(&cfg, 1);
        let z = rand_latent(&cfg, 1, 2, 13);
        let e = AppearanceEmbedding::zeros(1, 6);
        let (_, trace) = model.forward_traced(&z, &[2], &text, &set, Some(&e)).unwrap();
        let infos = model.layer_infos();
        for (path, kind) in &trace.adapter_firings {
            let info = infos.iter().find(|i| i.address.path == *path).expect("address exists");
            match kind {
                AdapterKind::Identity => {
                    assert_eq!(info.address.category, LayerCategory::CrossAttention);
                    assert_eq!(info.address.domain, LayerDomain::Spatial);
                }
                AdapterKind::Motion => {
                    assert_eq!(info.address.domain, LayerDomain::Temporal);
                }
                _ => {}
            }
        }
        let identity_count = trace
            .adapter_firings
            .iter()
            .filter(|(_, k)| *k == AdapterKind::Identity)
            .count();
        let motion_count = trace
            .adapter_firings
            .iter()
            .filter(|(_, k)| *k == AdapterKind::Motion)
            .count();
        assert_eq!(identity_count, 3);
        assert_eq!(motion_count, 6);
    }
}
