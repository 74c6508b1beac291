//! Identity and motion adapters, the LoRA baseline, and placement logic.
//!
//! Both adapter types are residual bottlenecks `h + GELU(h W_down) W_up`
//! with `W_up` zero-initialized so a fresh adapter is exactly transparent.
//! The motion adapter additionally shifts its input by a projected
//! appearance embedding before the bottleneck (the residual still adds the
//! original hidden state). Identity adapters target spatial cross-attention
//! sublayers; motion adapters target every temporal-transformer sublayer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::unet::{LayerAddress, LayerCategory, LayerDomain, UNet};

/// Paper-scale default LoRA rank.
pub const DEFAULT_LORA_RANK: usize = 32;

/// How an adapter composes with its host sublayer.
///
/// With sublayer function `s` over input `u` (residual applied outside):
/// parallel adds the adapter delta of `u` to `s(u)`; serial post-processes
/// `s(u)` through the full adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    Parallel,
    Serial,
}

impl Default for AdapterMode {
    fn default() -> Self {
        AdapterMode::Parallel
    }
}

impl std::str::FromStr for AdapterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<AdapterMode> {
        match s {
            "parallel" => Ok(AdapterMode::Parallel),
            "serial" => Ok(AdapterMode::Serial),
            other => Err(Error::invalid(format!("unknown adapter mode {other:?}"))),
        }
    }
}

fn default_hidden(l: usize) -> usize {
    l.div_ceil(2)
}

fn flatten_rows(x: &Tensor, l: usize, context: &'static str) -> Result<(Tensor, Vec<usize>)> {
    let shape = x.shape().to_vec();
    match shape.last() {
        Some(&last) if last == l => {}
        _ => {
            return Err(Error::ShapeMismatch {
                context,
                expected: vec![l],
                got: shape,
            })
        }
    }
    let rows = x.numel() / l;
    Ok((x.reshape(&[rows, l]), shape))
}

/// Bottleneck adapter for subject appearance, inserted at spatial
/// cross-attention sublayers.
pub struct IdentityAdapter {
    pub w_down: Tensor,
    pub w_up: Tensor,
    pub target_l: usize,
    pub hidden: usize,
}

impl IdentityAdapter {
    /// Hidden dimension defaults to half the input dimension.
    pub fn new(l: usize, seed: u64) -> IdentityAdapter {
        IdentityAdapter::with_hidden(l, default_hidden(l), seed).expect("default hidden is valid")
    }

    pub fn with_hidden(l: usize, d: usize, seed: u64) -> Result<IdentityAdapter> {
        if d == 0 || d >= l {
            return Err(Error::invalid(format!("bottleneck needs 0 < d < l, got d={d}, l={l}")));
        }
        let mut r = rng::substream(seed, "identity-adapter");
        Ok(IdentityAdapter {
            w_down: Tensor::param(rng::gaussian_vec(&mut r, l * d, 0.02), &[l, d]),
            w_up: Tensor::param(vec![0.0; d * l], &[d, l]),
            target_l: l,
            hidden: d,
        })
    }

    pub fn from_weights(w_down: Tensor, w_up: Tensor) -> Result<IdentityAdapter> {
        let (l, d) = (w_down.shape()[0], w_down.shape()[1]);
        if w_up.shape() != [d, l] {
            return Err(Error::ShapeMismatch {
                context: "IdentityAdapter::from_weights",
                expected: vec![d, l],
                got: w_up.shape().to_vec(),
            });
        }
        if d >= l {
            return Err(Error::invalid("bottleneck requires d < l"));
        }
        Ok(IdentityAdapter { w_down, w_up, target_l: l, hidden: d })
    }

    pub fn is_zero_init(&self) -> bool {
        self.w_up.with_data(|d| d.iter().all(|v| *v == 0.0))
    }

    pub fn num_params(&self) -> usize {
        self.w_down.numel() + self.w_up.numel()
    }

    /// Bottleneck delta `GELU(h W_down) W_up` over any `(..., l)` input.
    pub fn delta(&self, h: &Tensor) -> Result<Tensor> {
        let (rows, shape) = flatten_rows(h, self.target_l, "identity_forward")?;
        let out = rows.matmul(&self.w_down).gelu().matmul(&self.w_up);
        Ok(out.reshape(&shape))
    }

    /// Adapter output `h + GELU(h W_down) W_up`.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        Ok(h.add(&self.delta(h)?))
    }
}

/// Bottleneck adapter for motion, inserted at temporal-transformer
/// sublayers; a condition projection injects the appearance embedding.
pub struct MotionAdapter {
    pub w_down: Tensor,
    pub w_up: Tensor,
    pub w_cond: Tensor,
    pub target_l: usize,
    pub hidden: usize,
    pub cond_dim: usize,
}

impl MotionAdapter {
    pub fn new(l: usize, cond_dim: usize, seed: u64) -> MotionAdapter {
        MotionAdapter::with_hidden(l, default_hidden(l), cond_dim, seed).expect("default hidden is valid")
    }

    pub fn with_hidden(l: usize, d: usize, cond_dim: usize, seed: u64) -> Result<MotionAdapter> {
        if d == 0 || d >= l {
            return Err(Error::invalid(format!("bottleneck needs 0 < d < l, got d={d}, l={l}")));
        }
        let mut r = rng::substream(seed, "motion-adapter");
        Ok(MotionAdapter {
            w_down: Tensor::param(rng::gaussian_vec(&mut r, l * d, 0.02), &[l, d]),
            w_up: Tensor::param(vec![0.0; d * l], &[d, l]),
            w_cond: Tensor::param(rng::gaussian_vec(&mut r, cond_dim * l, 0.02), &[cond_dim, l]),
            target_l: l,
            hidden: d,
            cond_dim,
        })
    }

    pub fn from_weights(w_down: Tensor, w_up: Tensor, w_cond: Tensor) -> Result<MotionAdapter> {
        let (l, d) = (w_down.shape()[0], w_down.shape()[1]);
        if w_up.shape() != [d, l] {
            return Err(Error::ShapeMismatch {
                context: "MotionAdapter::from_weights",
                expected: vec![d, l],
                got: w_up.shape().to_vec(),
            });
        }
        if w_cond.shape().len() != 2 || w_cond.shape()[1] != l {
            return Err(Error::ShapeMismatch {
                context: "MotionAdapter::from_weights",
                expected: vec![0, l],
                got: w_cond.shape().to_vec(),
            });
        }
        if d >= l {
            return Err(Error::invalid("bottleneck requires d < l"));
        }
        let cond_dim = w_cond.shape()[0];
        Ok(MotionAdapter { w_down, w_up, w_cond, target_l: l, hidden: d, cond_dim })
    }

    pub fn is_zero_init(&self) -> bool {
        self.w_up.with_data(|d| d.iter().all(|v| *v == 0.0))
    }

    pub fn num_params(&self) -> usize {
        self.w_down.numel() + self.w_up.numel() + self.w_cond.numel()
    }

    /// Delta for a hidden state `(batch * positions, frames, l)` with the
    /// appearance embedding `(batch, 1, cond_dim)` broadcast across every
    /// frame and spatial position of its batch sample. The bottleneck reads
    /// the shifted state but the caller's residual adds the original one.
    pub fn delta_batched(&self, hhat: &Tensor, e: &Tensor, batch: usize) -> Result<Tensor> {
        let s = hhat.shape().to_vec();
        if s.len() != 3 || s[2] != self.target_l {
            return Err(Error::ShapeMismatch {
                context: "motion_forward",
                expected: vec![0, 0, self.target_l],
                got: s,
            });
        }
        if e.shape() != [batch, 1, self.cond_dim] {
            return Err(Error::ShapeMismatch {
                context: "motion_forward (appearance)",
                expected: vec![batch, 1, self.cond_dim],
                got: e.shape().to_vec(),
            });
        }
        let (n, f, l) = (s[0], s[1], s[2]);
        if n % batch != 0 {
            return Err(Error::invalid(format!(
                "hidden rows {n} not divisible by batch {batch}"
            )));
        }
        let positions = n / batch;
        // e * W_cond -> (batch, l), broadcast over positions and frames.
        let shift = e.reshape(&[batch, self.cond_dim]).matmul(&self.w_cond).reshape(&[batch, 1, 1, l]);
        let shifted = hhat.reshape(&[batch, positions, f, l]).add_bc(&shift);
        let bottleneck = shifted
            .reshape(&[n * f, l])
            .matmul(&self.w_down)
            .gelu()
            .matmul(&self.w_up)
            .reshape(&[n, f, l]);
        Ok(bottleneck)
    }

    /// Single-sample adapter output for a `(frames, l)` hidden state and a
    /// `(cond_dim,)` appearance row.
    pub fn forward(&self, hhat: &Tensor, e_row: &Tensor) -> Result<Tensor> {
        if e_row.shape() != [self.cond_dim] {
            return Err(Error::ShapeMismatch {
                context: "motion_forward (appearance row)",
                expected: vec![self.cond_dim],
                got: e_row.shape().to_vec(),
            });
        }
        let s = hhat.shape().to_vec();
        if s.len() != 2 || s[1] != self.target_l {
            return Err(Error::ShapeMismatch {
                context: "motion_forward",
                expected: vec![0, self.target_l],
                got: s,
            });
        }
        let f = s[0];
        let e = e_row.reshape(&[1, 1, self.cond_dim]);
        let delta = self.delta_batched(&hhat.reshape(&[1, f, self.target_l]), &e, 1)?;
        Ok(hhat.add(&delta.reshape(&s)))
    }
}

/// Low-rank weight update `W + A B` for attention key/value projections.
pub struct LoRALayer {
    pub a: Tensor,
    pub b_mat: Tensor,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl LoRALayer {
    pub fn new(d_in: usize, d_out: usize, rank: usize, seed: u64) -> Result<LoRALayer> {
        if rank == 0 || rank >= d_in.min(d_out) {
            return Err(Error::invalid(format!(
                "LoRA rank must satisfy 0 < r < min({d_in}, {d_out}), got {rank}"
            )));
        }
        let mut r = rng::substream(seed, "lora");
        Ok(LoRALayer {
            a: Tensor::param(rng::gaussian_vec(&mut r, d_in * rank, 0.02), &[d_in, rank]),
            b_mat: Tensor::param(vec![0.0; rank * d_out], &[rank, d_out]),
            rank,
            d_in,
            d_out,
        })
    }

    pub fn from_weights(a: Tensor, b_mat: Tensor) -> Result<LoRALayer> {
        let (d_in, rank) = (a.shape()[0], a.shape()[1]);
        if b_mat.shape().len() != 2 || b_mat.shape()[0] != rank {
            return Err(Error::ShapeMismatch {
                context: "LoRALayer::from_weights",
                expected: vec![rank, 0],
                got: b_mat.shape().to_vec(),
            });
        }
        let d_out = b_mat.shape()[1];
        if rank >= d_in.min(d_out) {
            return Err(Error::invalid("LoRA rank must be below both dims"));
        }
        Ok(LoRALayer { a, b_mat, rank, d_in, d_out })
    }

    pub fn is_zero_init(&self) -> bool {
        self.b_mat.with_data(|d| d.iter().all(|v| *v == 0.0))
    }

    pub fn num_params(&self) -> usize {
        self.a.numel() + self.b_mat.numel()
    }

    /// Low-rank delta `x A B` over `(..., d_in)`.
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, mut shape) = flatten_rows(x, self.d_in, "lora_forward")?;
        let out = rows.matmul(&self.a).matmul(&self.b_mat);
        *shape.last_mut().unwrap() = self.d_out;
        Ok(out.reshape(&shape))
    }

    /// Full projection through the adapted weight: `x (W + A B)`.
    pub fn forward_with(&self, x: &Tensor, frozen_w: &Tensor) -> Result<Tensor> {
        if frozen_w.shape() != [self.d_in, self.d_out] {
            return Err(Error::ShapeMismatch {
                context: "lora_forward (frozen weight)",
                expected: vec![self.d_in, self.d_out],
                got: frozen_w.shape().to_vec(),
            });
        }
        let (rows, mut shape) = flatten_rows(x, self.d_in, "lora_forward")?;
        let out = rows.matmul(frozen_w).add(&rows.matmul(&self.a).matmul(&self.b_mat));
        *shape.last_mut().unwrap() = self.d_out;
        Ok(out.reshape(&shape))
    }
}

/// LoRA pair for one attention sublayer (key and value projections).
pub struct LoraPair {
    pub k: LoRALayer,
    pub v: LoRALayer,
}

impl LoraPair {
    pub fn num_params(&self) -> usize {
        self.k.num_params() + self.v.num_params()
    }
}

/// Which sublayers receive which adapter family, and in which mode.
#[derive(Debug, Clone)]
pub struct PlacementPlan {
    pub identity_targets: Vec<LayerAddress>,
    pub motion_targets: Vec<LayerAddress>,
    pub cross_attention_mode: AdapterMode,
    pub self_attention_mode: AdapterMode,
    pub feed_forward_mode: AdapterMode,
}

impl PlacementPlan {
    /// Identity adapters on every spatial cross-attention sublayer, motion
    /// adapters on every temporal-transformer sublayer, all parallel.
    pub fn default_for(model: &UNet) -> PlacementPlan {
        let mut identity = Vec::new();
        let mut motion = Vec::new();
        for info in model.layer_infos() {
            let a = &info.address;
            match (a.domain, a.category) {
                (LayerDomain::Spatial, LayerCategory::CrossAttention) => identity.push(a.clone()),
                (LayerDomain::Temporal, LayerCategory::SelfAttention)
                | (LayerDomain::Temporal, LayerCategory::FeedForward) => motion.push(a.clone()),
                _ => {}
            }
        }
        PlacementPlan {
            identity_targets: identity,
            motion_targets: motion,
            cross_attention_mode: AdapterMode::Parallel,
            self_attention_mode: AdapterMode::Parallel,
            feed_forward_mode: AdapterMode::Parallel,
        }
    }

    pub fn with_modes(mut self, self_attn: AdapterMode, ffn: AdapterMode) -> PlacementPlan {
        self.self_attention_mode = self_attn;
        self.feed_forward_mode = ffn;
        self
    }

    pub fn validate(&self, model: &UNet) -> Result<()> {
        for t in &self.identity_targets {
            if t.category != LayerCategory::CrossAttention || t.domain != LayerDomain::Spatial {
                return Err(Error::invalid(format!(
                    "identity target {} is not a spatial cross-attention sublayer",
                    t.path
                )));
            }
            model.layer_width(&t.path).ok_or_else(|| {
                Error::invalid(format!("identity target {} not in model", t.path))
            })?;
        }
        for t in &self.motion_targets {
            if t.domain != LayerDomain::Temporal {
                return Err(Error::invalid(format!(
                    "motion target {} is not a temporal sublayer",
                    t.path
                )));
            }
            model.layer_width(&t.path).ok_or_else(|| {
                Error::invalid(format!("motion target {} not in model", t.path))
            })?;
        }
        Ok(())
    }
}

/// One fresh identity adapter per plan target, sized to each layer.
pub fn create_identity_adapters(
    model: &UNet,
    plan: &PlacementPlan,
    seed: u64,
) -> Result<BTreeMap<String, IdentityAdapter>> {
    plan.validate(model)?;
    let mut out = BTreeMap::new();
    for t in &plan.identity_targets {
        let l = model.layer_width(&t.path).expect("validated");
        out.insert(t.path.clone(), IdentityAdapter::new(l, mix_seed(seed, &t.path)));
    }
    Ok(out)
}

/// One fresh motion adapter per plan target.
pub fn create_motion_adapters(
    model: &UNet,
    plan: &PlacementPlan,
    cond_dim: usize,
    seed: u64,
) -> Result<BTreeMap<String, MotionAdapter>> {
    plan.validate(model)?;
    let mut out = BTreeMap::new();
    for t in &plan.motion_targets {
        let l = model.layer_width(&t.path).expect("validated");
        out.insert(t.path.clone(), MotionAdapter::new(l, cond_dim, mix_seed(seed, &t.path)));
    }
    Ok(out)
}

/// Fresh LoRA K/V pairs for the given attention sublayers.
pub fn create_lora_pairs(
    model: &UNet,
    targets: &[LayerAddress],
    rank: usize,
    seed: u64,
) -> Result<BTreeMap<String, LoraPair>> {
    let mut out = BTreeMap::new();
    for t in targets {
        if !matches!(t.category, LayerCategory::SelfAttention | LayerCategory::CrossAttention) {
            return Err(Error::invalid(format!("LoRA target {} is not an attention sublayer", t.path)));
        }
        let l = model
            .layer_width(&t.path)
            .ok_or_else(|| Error::invalid(format!("LoRA target {} not in model", t.path)))?;
        let ctx = model.layer_ctx_width(&t.path).expect("attention layers have ctx width");
        out.insert(
            t.path.clone(),
            LoraPair {
                k: LoRALayer::new(ctx, l, rank, mix_seed(seed, &format!("{}(k)", t.path)))?,
                v: LoRALayer::new(ctx, l, rank, mix_seed(seed, &format!("{}(v)", t.path)))?,
            },
        );
    }
    Ok(out)
}

fn mix_seed(seed: u64, label: &str) -> u64 {
    let mut mixed = seed ^ 0x9e3779b97f4a7c15;
    for b in label.bytes() {
        mixed = mixed.wrapping_mul(0x100000001b3).wrapping_add(u64::from(b));
    }
    mixed
}

/// Everything attached to a model for one forward pass. Detaching is simply
/// forwarding with an empty set; nothing in the model itself changes.
pub struct AdapterSet {
    pub identity: BTreeMap<String, IdentityAdapter>,
    pub motion: BTreeMap<String, MotionAdapter>,
    pub lora: BTreeMap<String, LoraPair>,
    pub cross_attention_mode: AdapterMode,
    pub self_attention_mode: AdapterMode,
    pub feed_forward_mode: AdapterMode,
    /// When true, a motion adapter with no appearance embedding is an error;
    /// otherwise a zero embedding is substituted.
    pub strict_appearance: bool,
}

impl Default for AdapterSet {
    fn default() -> Self {
        AdapterSet::empty()
    }
}

impl AdapterSet {
    pub fn empty() -> AdapterSet {
        AdapterSet {
            identity: BTreeMap::new(),
            motion: BTreeMap::new(),
            lora: BTreeMap::new(),
            cross_attention_mode: AdapterMode::Parallel,
            self_attention_mode: AdapterMode::Parallel,
            feed_forward_mode: AdapterMode::Parallel,
            strict_appearance: true,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.identity.is_empty() && self.motion.is_empty() && self.lora.is_empty()
    }

    pub fn has_motion(&self) -> bool {
        !self.motion.is_empty()
    }

    pub fn motion_cond_dim(&self) -> Option<usize> {
        self.motion.values().next().map(|m| m.cond_dim)
    }

    /// Total trainable parameter count: the exact sum over attached matrices.
    pub fn num_params(&self) -> usize {
        self.identity.values().map(|a| a.num_params()).sum::<usize>()
            + self.motion.values().map(|a| a.num_params()).sum::<usize>()
            + self.lora.values().map(|p| p.num_params()).sum::<usize>()
    }

    /// Named parameter handles for training and checkpointing.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (path, a) in &self.identity {
            out.push((format!("identity.{path}.w_down"), a.w_down.clone()));
            out.push((format!("identity.{path}.w_up"), a.w_up.clone()));
        }
        for (path, a) in &self.motion {
            out.push((format!("motion.{path}.w_down"), a.w_down.clone()));
            out.push((format!("motion.{path}.w_up"), a.w_up.clone()));
            out.push((format!("motion.{path}.w_cond"), a.w_cond.clone()));
        }
        for (path, p) in &self.lora {
            out.push((format!("lora.{path}.k.a"), p.k.a.clone()));
            out.push((format!("lora.{path}.k.b"), p.k.b_mat.clone()));
            out.push((format!("lora.{path}.v.a"), p.v.a.clone()));
            out.push((format!("lora.{path}.v.b"), p.v.b_mat.clone()));
        }
        out
    }

    pub fn set_trainable(&self, trainable: bool) {
        for (_, p) in self.named_params() {
            p.set_trainable(trainable);
        }
    }
}

/// Validate adapters against a model and bundle them for forwarding.
pub fn attach(
    model: &UNet,
    plan: &PlacementPlan,
    identity: Option<BTreeMap<String, IdentityAdapter>>,
    motion: Option<BTreeMap<String, MotionAdapter>>,
) -> Result<AdapterSet> {
    plan.validate(model)?;
    let mut set = AdapterSet::empty();
    set.cross_attention_mode = plan.cross_attention_mode;
    set.self_attention_mode = plan.self_attention_mode;
    set.feed_forward_mode = plan.feed_forward_mode;
    if let Some(identity) = identity {
        let want: Vec<&str> = plan.identity_targets.iter().map(|t| t.path.as_str()).collect();
        for path in identity.keys() {
            if !want.contains(&path.as_str()) {
                return Err(Error::invalid(format!("identity adapter at {path} not in plan")));
            }
        }
        for t in &plan.identity_targets {
            let a = identity
                .get(&t.path)
                .ok_or_else(|| Error::invalid(format!("missing identity adapter for {}", t.path)))?;
            let l = model.layer_width(&t.path).expect("validated");
            if a.target_l != l {
                return Err(Error::ShapeMismatch {
                    context: "attach (identity width)",
                    expected: vec![l],
                    got: vec![a.target_l],
                });
            }
        }
        set.identity = identity;
    }
    if let Some(motion) = motion {
        let want: Vec<&str> = plan.motion_targets.iter().map(|t| t.path.as_str()).collect();
        for path in motion.keys() {
            if !want.contains(&path.as_str()) {
                return Err(Error::invalid(format!("motion adapter at {path} not in plan")));
            }
        }
        let mut cond_dims = motion.values().map(|m| m.cond_dim);
        if let Some(first) = cond_dims.next() {
            if cond_dims.any(|c| c != first) {
                return Err(Error::invalid("motion adapters disagree on cond_dim"));
            }
        }
        for t in &plan.motion_targets {
            let a = motion
                .get(&t.path)
                .ok_or_else(|| Error::invalid(format!("missing motion adapter for {}", t.path)))?;
            let l = model.layer_width(&t.path).expect("validated");
            if a.target_l != l {
                return Err(Error::ShapeMismatch {
                    context: "attach (motion width)",
                    expected: vec![l],
                    got: vec![a.target_l],
                });
            }
        }
        set.motion = motion;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_zero_init_is_transparent() {
        let a = IdentityAdapter::new(8, 3);
        assert!(a.is_zero_init());
        let h = Tensor::new(rng::normal_vec(&mut rng::seeded(4), 2 * 8), &[2, 8]);
        let out = a.forward(&h).unwrap();
        assert_eq!(out.to_vec(), h.to_vec());
    }

    #[test]
    fn identity_hand_computed_value() {
        // l=2, d=1, W_down=[1,0]^T, W_up=[2,0], h=[1,-1]
        // -> h' = [1 + 2*GELU(1), -1] = [2.682689..., -1].
        let a = IdentityAdapter::from_weights(
            Tensor::param(vec![1.0, 0.0], &[2, 1]),
            Tensor::param(vec![2.0, 0.0], &[1, 2]),
        )
        .unwrap();
        let h = Tensor::new(vec![1.0, -1.0], &[1, 2]);
        let out = a.forward(&h).unwrap().to_vec();
        assert!((out[0] - 2.6826894921370857).abs() < 1e-3, "{}", out[0]);
        assert!((out[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_zero_input_zero_delta() {
        let a = IdentityAdapter::from_weights(
            Tensor::param(vec![0.3, -0.2], &[2, 1]),
            Tensor::param(vec![0.5, 0.7], &[1, 2]),
        )
        .unwrap();
        let h = Tensor::zeros(&[3, 2]);
        assert_eq!(a.forward(&h).unwrap().to_vec(), vec![0.0; 6]);
    }

    #[test]
    fn identity_dimension_checks() {
        let a = IdentityAdapter::new(8, 0);
        assert!(a.forward(&Tensor::zeros(&[2, 7])).is_err());
        assert!(IdentityAdapter::with_hidden(4, 4, 0).is_err());
        assert!(IdentityAdapter::with_hidden(4, 0, 0).is_err());
        assert_eq!(IdentityAdapter::new(9, 0).hidden, 5);
    }

    #[test]
    fn motion_zero_init_transparent_for_any_appearance() {
        let a = MotionAdapter::new(6, 4, 5);
        assert!(a.is_zero_init());
        let h = Tensor::new(rng::normal_vec(&mut rng::seeded(6), 3 * 6), &[3, 6]);
        let e = Tensor::new(rng::normal_vec(&mut rng::seeded(7), 4), &[4]);
        assert_eq!(a.forward(&h, &e).unwrap().to_vec(), h.to_vec());
    }

    #[test]
    fn motion_hand_computed_value() {
        // F=2, l=2, d=1, cond=1, e=[1], W_cond=[1,0], W_down=[1,0]^T,
        // W_up=[1,0], hhat=[[0,0],[1,0]].
        // he = [[1,0],[2,0]]; h' = hhat + GELU(he W_down) W_up
        //    = [[GELU(1), 0], [1 + GELU(2), 0]]
        //    = [[0.841345, 0], [2.954500, 0]].
        let a = MotionAdapter::from_weights(
            Tensor::param(vec![1.0, 0.0], &[2, 1]),
            Tensor::param(vec![1.0, 0.0], &[1, 2]),
            Tensor::param(vec![1.0, 0.0], &[1, 2]),
        )
        .unwrap();
        let h = Tensor::new(vec![0.0, 0.0, 1.0, 0.0], &[2, 2]);
        let e = Tensor::new(vec![1.0], &[1]);
        let out = a.forward(&h, &e).unwrap().to_vec();
        assert!((out[0] - 0.8413447460685429).abs() < 1e-3, "{}", out[0]);
        assert!((out[1]).abs() < 1e-12);
        assert!((out[2] - 2.9544997361036416).abs() < 1e-3, "{}", out[2]);
        assert!((out[3]).abs() < 1e-12);
    }

    #[test]
    fn motion_with_zero_appearance_matches_identity_formula() {
        let w_down = rng::gaussian_vec(&mut rng::seeded(8), 6 * 3, 0.5);
        let w_up = rng::gaussian_vec(&mut rng::seeded(9), 3 * 6, 0.5);
        let m = MotionAdapter::from_weights(
            Tensor::param(w_down.clone(), &[6, 3]),
            Tensor::param(w_up.clone(), &[3, 6]),
            Tensor::param(rng::gaussian_vec(&mut rng::seeded(10), 4 * 6, 0.5), &[4, 6]),
        )
        .unwrap();
        let i = IdentityAdapter::from_weights(
            Tensor::param(w_down, &[6, 3]),
            Tensor::param(w_up, &[3, 6]),
        )
        .unwrap();
        let h = Tensor::new(rng::normal_vec(&mut rng::seeded(11), 4 * 6), &[4, 6]);
        let e0 = Tensor::zeros(&[4]);
        let got = m.forward(&h, &e0).unwrap().to_vec();
        let want = i.forward(&h).unwrap().to_vec();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 1e-7);
        }
    }

    #[test]
    fn motion_residual_adds_original_not_shifted() {
        // With W_up = 0 the output must equal hhat even though e != 0; if
        // the residual added the shifted state this would fail.
        let m = MotionAdapter::from_weights(
            Tensor::param(vec![1.0, 0.0], &[2, 1]),
            Tensor::param(vec![0.0, 0.0], &[1, 2]),
            Tensor::param(vec![5.0, 5.0], &[1, 2]),
        )
        .unwrap();
        let h = Tensor::new(vec![0.25, -0.5], &[1, 2]);
        let e = Tensor::new(vec![3.0], &[1]);
        assert_eq!(m.forward(&h, &e).unwrap().to_vec(), h.to_vec());
    }

    #[test]
    fn lora_zero_init_and_algebra() {
        let lora = LoRALayer::new(4, 4, 2, 12).unwrap();
        assert!(lora.is_zero_init());
        let w = Tensor::new(rng::normal_vec(&mut rng::seeded(13), 16), &[4, 4]);
        let x = Tensor::new(rng::normal_vec(&mut rng::seeded(14), 3 * 4), &[3, 4]);
        let base = x.matmul(&w);
        assert_eq!(lora.forward_with(&x, &w).unwrap().to_vec(), base.to_vec());
    }

    #[test]
    fn lora_matches_dense_oracle() {
        let mut lora = LoRALayer::new(5, 4, 2, 15).unwrap();
        lora.b_mat = Tensor::param(rng::gaussian_vec(&mut rng::seeded(16), 2 * 4, 0.3), &[2, 4]);
        let w = Tensor::new(rng::normal_vec(&mut rng::seeded(17), 20), &[5, 4]);
        let x = Tensor::new(rng::normal_vec(&mut rng::seeded(18), 2 * 5), &[2, 5]);
        let got = lora.forward_with(&x, &w).unwrap().to_vec();
        // Dense oracle: explicitly form W + A B and multiply.
        let a = lora.a.to_vec();
        let b = lora.b_mat.to_vec();
        let wd = w.to_vec();
        let xd = x.to_vec();
        let mut dense = vec![0.0; 20];
        for i in 0..5 {
            for j in 0..4 {
                let mut ab = 0.0;
                for r in 0..2 {
                    ab += a[i * 2 + r] * b[r * 4 + j];
                }
                dense[i * 4 + j] = wd[i * 4 + j] + ab;
            }
        }
        for row in 0..2 {
            for j in 0..4 {
                let mut want = 0.0;
                for i in 0..5 {
                    want += xd[row * 5 + i] * dense[i * 4 + j];
                }
                assert!((got[row * 4 + j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lora_rank_validation() {
        assert!(LoRALayer::new(4, 4, 4, 0).is_err());
        assert!(LoRALayer::new(4, 4, 0, 0).is_err());
        assert!(LoRALayer::new(64, 64, DEFAULT_LORA_RANK, 0).is_ok());
    }

    #[test]
    fn param_counting_is_exact() {
        let a = IdentityAdapter::new(8, 0);
        assert_eq!(a.num_params(), 8 * 4 + 4 * 8);
        let m = MotionAdapter::new(8, 6, 0);
        assert_eq!(m.num_params(), 8 * 4 + 4 * 8 + 6 * 8);
        let l = LoRALayer::new(8, 8, 2, 0).unwrap();
        assert_eq!(l.num_params(), 8 * 2 + 2 * 8);
    }
}
