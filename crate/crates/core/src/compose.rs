//! Inference-time composition of trained subject and motion adapters, plus
//! the checkpoint formats for both artifact kinds.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    attach, AdapterMode, AdapterSet, IdentityAdapter, MotionAdapter, PlacementPlan,
};
use crate::diffusion::{sample, SampleParams};
use crate::encoders::AppearanceEmbedding;
use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::model::BaseModel;
use crate::rng;
use crate::storage::{self, role, CheckpointTensor};
use crate::subject::TextualIdentity;
use crate::tensor::Tensor;
use crate::unet::{LayerAddress, LayerCategory, LayerDomain};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlanSnapshot {
    identity_targets: Vec<String>,
    motion_targets: Vec<String>,
    cross_attention_mode: AdapterMode,
    self_attention_mode: AdapterMode,
    feed_forward_mode: AdapterMode,
}

/// Trained subject artifact: the textual identity row, identity adapters,
/// and the training images kept for appearance-guidance fallback.
pub struct SubjectArtifact {
    pub identity: TextualIdentity,
    pub adapters: BTreeMap<String, IdentityAdapter>,
    pub modes: (AdapterMode, AdapterMode, AdapterMode),
    pub training_images: Vec<LatentVideo>,
    pub content_hash: String,
}

/// Trained motion artifact.
pub struct MotionArtifact {
    pub adapters: BTreeMap<String, MotionAdapter>,
    pub modes: (AdapterMode, AdapterMode, AdapterMode),
    pub content_hash: String,
}

pub fn save_subject_checkpoint(
    dir: &Path,
    base: &BaseModel,
    identity: &TextualIdentity,
    set: &AdapterSet,
    training_images: &[LatentVideo],
    seed: u64,
) -> Result<()> {
    let mut tensors = Vec::new();
    tensors.push(CheckpointTensor {
        name: "textual_identity.row".to_string(),
        role: role::TEXTUAL_IDENTITY.to_string(),
        data: identity.row.clone(),
        shape: vec![identity.row.len()],
    });
    for (path, a) in &set.identity {
        tensors.push(CheckpointTensor::from_tensor(
            &format!("identity.{path}.w_down"),
            role::IDENTITY_ADAPTER,
            &a.w_down,
        ));
        tensors.push(CheckpointTensor::from_tensor(
            &format!("identity.{path}.w_up"),
            role::IDENTITY_ADAPTER,
            &a.w_up,
        ));
    }
    for (i, img) in training_images.iter().enumerate() {
        tensors.push(CheckpointTensor {
            name: format!("guidance_image.{i}"),
            role: role::GUIDANCE_IMAGE.to_string(),
            data: img.to_vec(),
            shape: img.dims().to_vec(),
        });
    }
    let plan = PlanSnapshot {
        identity_targets: set.identity.keys().cloned().collect(),
        motion_targets: Vec::new(),
        cross_attention_mode: set.cross_attention_mode,
        self_attention_mode: set.self_attention_mode,
        feed_forward_mode: set.feed_forward_mode,
    };
    let mut extra = BTreeMap::new();
    extra.insert("kind".to_string(), serde_json::Value::String("subject".into()));
    extra.insert("plan".to_string(), serde_json::to_value(&plan)?);
    extra.insert("pseudo_word".to_string(), serde_json::Value::String(identity.word.clone()));
    extra.insert("init_word".to_string(), serde_json::Value::String(identity.init_word.clone()));
    extra.insert(
        "num_training_images".to_string(),
        serde_json::Value::from(training_images.len()),
    );
    storage::save_checkpoint(dir, &tensors, base.cfg.to_json(), extra, seed)?;
    Ok(())
}

pub fn save_motion_checkpoint(
    dir: &Path,
    base: &BaseModel,
    set: &AdapterSet,
    seed: u64,
) -> Result<()> {
    let mut tensors = Vec::new();
    for (path, a) in &set.motion {
        tensors.push(CheckpointTensor::from_tensor(
            &format!("motion.{path}.w_down"),
            role::MOTION_ADAPTER,
            &a.w_down,
        ));
        tensors.push(CheckpointTensor::from_tensor(
            &format!("motion.{path}.w_up"),
            role::MOTION_ADAPTER,
            &a.w_up,
        ));
        tensors.push(CheckpointTensor::from_tensor(
            &format!("motion.{path}.w_cond"),
            role::MOTION_ADAPTER,
            &a.w_cond,
        ));
    }
    let plan = PlanSnapshot {
        identity_targets: Vec::new(),
        motion_targets: set.motion.keys().cloned().collect(),
        cross_attention_mode: set.cross_attention_mode,
        self_attention_mode: set.self_attention_mode,
        feed_forward_mode: set.feed_forward_mode,
    };
    let mut extra = BTreeMap::new();
    extra.insert("kind".to_string(), serde_json::Value::String("motion".into()));
    extra.insert("plan".to_string(), serde_json::to_value(&plan)?);
    storage::save_checkpoint(dir, &tensors, base.cfg.to_json(), extra, seed)?;
    Ok(())
}

fn plan_from_manifest(ckpt: &storage::Checkpoint) -> Result<PlanSnapshot> {
    let v = ckpt
        .manifest
        .core
        .extra
        .get("plan")
        .ok_or_else(|| Error::Integrity("checkpoint missing placement plan".into()))?;
    Ok(serde_json::from_value(v.clone())?)
}

pub fn load_subject_checkpoint(dir: &Path) -> Result<SubjectArtifact> {
    let ckpt = storage::load_checkpoint(dir)?;
    let plan = plan_from_manifest(&ckpt)?;
    let word = match ckpt.manifest.core.extra.get("pseudo_word") {
        Some(serde_json::Value::String(s)) => s.clone(),
        _ => return Err(Error::Integrity("subject checkpoint missing pseudo_word".into())),
    };
    let init_word = match ckpt.manifest.core.extra.get("init_word") {
        Some(serde_json::Value::String(s)) => s.clone(),
        _ => String::new(),
    };
    let (row, _) = ckpt.tensor("textual_identity.row")?;
    let mut adapters = BTreeMap::new();
    for path in &plan.identity_targets {
        let (wd, wd_shape) = ckpt.tensor(&format!("identity.{path}.w_down"))?;
        let (wu, wu_shape) = ckpt.tensor(&format!("identity.{path}.w_up"))?;
        let adapter = IdentityAdapter::from_weights(
            Tensor::param(wd.clone(), wd_shape),
            Tensor::param(wu.clone(), wu_shape),
        )?;
        adapter.w_down.set_trainable(false);
        adapter.w_up.set_trainable(false);
        adapters.insert(path.clone(), adapter);
    }
    let mut training_images = Vec::new();
    for name in ckpt.names_with_role(role::GUIDANCE_IMAGE) {
        let (data, shape) = ckpt.tensor(name)?;
        if shape.len() == 5 {
            training_images.push(LatentVideo::from_data(
                data.clone(),
                [shape[0], shape[1], shape[2], shape[3], shape[4]],
            )?);
        }
    }
    Ok(SubjectArtifact {
        identity: TextualIdentity { word, init_word, row: row.clone() },
        adapters,
        modes: (plan.cross_attention_mode, plan.self_attention_mode, plan.feed_forward_mode),
        training_images,
        content_hash: ckpt.content_hash().to_string(),
    })
}

pub fn load_motion_checkpoint(dir: &Path) -> Result<MotionArtifact> {
    let ckpt = storage::load_checkpoint(dir)?;
    let plan = plan_from_manifest(&ckpt)?;
    let mut adapters = BTreeMap::new();
    for path in &plan.motion_targets {
        let (wd, wd_shape) = ckpt.tensor(&format!("motion.{path}.w_down"))?;
        let (wu, wu_shape) = ckpt.tensor(&format!("motion.{path}.w_up"))?;
        let (wc, wc_shape) = ckpt.tensor(&format!("motion.{path}.w_cond"))?;
        let adapter = MotionAdapter::from_weights(
            Tensor::param(wd.clone(), wd_shape),
            Tensor::param(wu.clone(), wu_shape),
            Tensor::param(wc.clone(), wc_shape),
        )?;
        adapter.w_down.set_trainable(false);
        adapter.w_up.set_trainable(false);
        adapter.w_cond.set_trainable(false);
        adapters.insert(path.clone(), adapter);
    }
    Ok(MotionArtifact {
        adapters,
        modes: (plan.cross_attention_mode, plan.self_attention_mode, plan.feed_forward_mode),
        content_hash: ckpt.content_hash().to_string(),
    })
}

/// Where the appearance guidance image comes from.
pub enum GuidanceSource {
    /// Explicit latent frame `(H, W, C)` data.
    Frame(Vec<f64>),
    /// Pick one of the subject checkpoint's training images, seeded.
    FromSubjectImages,
    /// No guidance available.
    None,
}

/// Generation request shared by composition and the single-family variants.
pub struct GenerationRequest {
    pub prompt: String,
    pub seed: u64,
    pub num_steps: usize,
    pub guidance_scale: f64,
}

impl GenerationRequest {
    pub fn from_config(cfg: &crate::config::RunConfig, prompt: &str, seed: u64) -> GenerationRequest {
        GenerationRequest {
            prompt: prompt.to_string(),
            seed,
            num_steps: cfg.ddim_steps,
            guidance_scale: cfg.cfg_scale,
        }
    }
}

/// Key/value metadata recorded next to every generated video.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationMetadata {
    pub prompt: String,
    pub seed: u64,
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub subject_checkpoint: Option<String>,
    pub motion_checkpoint: Option<String>,
    pub guidance_image: String,
    pub adapter_families: Vec<String>,
    pub pseudo_word: Option<String>,
    pub version: String,
}

impl GenerationMetadata {
    /// Plain `key: value` sidecar text, fixed field order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("prompt: {}\n", self.prompt));
        out.push_str(&format!("seed: {}\n", self.seed));
        out.push_str(&format!("num_steps: {}\n", self.num_steps));
        out.push_str(&format!("guidance_scale: {}\n", self.guidance_scale));
        out.push_str(&format!(
            "subject_checkpoint: {}\n",
            self.subject_checkpoint.as_deref().unwrap_or("none")
        ));
        out.push_str(&format!(
            "motion_checkpoint: {}\n",
            self.motion_checkpoint.as_deref().unwrap_or("none")
        ));
        out.push_str(&format!("guidance_image: {}\n", self.guidance_image));
        out.push_str(&format!("adapter_families: {}\n", self.adapter_families.join(",")));
        out.push_str(&format!(
            "pseudo_word: {}\n",
            self.pseudo_word.as_deref().unwrap_or("none")
        ));
        out.push_str(&format!("version: {}\n", self.version));
        out
    }
}

fn build_plan(
    base: &BaseModel,
    identity_paths: &[String],
    motion_paths: &[String],
    modes: (AdapterMode, AdapterMode, AdapterMode),
) -> Result<PlacementPlan> {
    let infos = base.unet.layer_infos();
    let lookup = |path: &String| -> Result<LayerAddress> {
        infos
            .iter()
            .find(|i| &i.address.path == path)
            .map(|i| i.address.clone())
            .ok_or_else(|| Error::invalid(format!("adapter target {path} not present in this model")))
    };
    let identity_targets: Result<Vec<LayerAddress>> = identity_paths.iter().map(lookup).collect();
    let motion_targets: Result<Vec<LayerAddress>> = motion_paths.iter().map(lookup).collect();
    Ok(PlacementPlan {
        identity_targets: identity_targets?,
        motion_targets: motion_targets?,
        cross_attention_mode: modes.0,
        self_attention_mode: modes.1,
        feed_forward_mode: modes.2,
    })
}

/// Attach loaded artifacts (either may be absent) and run guided sampling.
pub fn generate(
    base: &mut BaseModel,
    subject: Option<SubjectArtifact>,
    motion: Option<MotionArtifact>,
    guidance: GuidanceSource,
    request: &GenerationRequest,
) -> Result<(LatentVideo, GenerationMetadata)> {
    base.freeze_all();
    let mut adapter_families = Vec::new();
    let mut pseudo_word = None;

    // Install the textual identity row so prompts can reference the
    // pseudo-word.
    let mut subject_images = Vec::new();
    let mut subject_hash = None;
    let mut motion_hash = None;
    let (identity_map, identity_paths, modes_s) = match subject {
        Some(artifact) => {
            if artifact.identity.row.len() != base.cfg.text_dim {
                return Err(Error::ShapeMismatch {
                    context: "compose (textual identity width)",
                    expected: vec![base.cfg.text_dim],
                    got: vec![artifact.identity.row.len()],
                });
            }
            if base.vocab.token_id(&artifact.identity.word).is_none() {
                let init = if base.vocab.token_id(&artifact.identity.init_word).is_some() {
                    artifact.identity.init_word.clone()
                } else {
                    crate::encoders::UNK.to_string()
                };
                let id = base.vocab.add_pseudo_word(&artifact.identity.word, &init)?;
                base.vocab.set_row(id, &artifact.identity.row);
                base.vocab.freeze_all();
                base.vocab.rows().set_trainable(false);
            }
            pseudo_word = Some(artifact.identity.word.clone());
            adapter_families.push("identity".to_string());
            subject_hash = Some(artifact.content_hash.clone());
            subject_images = artifact.training_images;
            let paths: Vec<String> = artifact.adapters.keys().cloned().collect();
            (Some(artifact.adapters), paths, Some(artifact.modes))
        }
        None => (None, Vec::new(), None),
    };
    let (motion_map, motion_paths, modes_m) = match motion {
        Some(artifact) => {
            adapter_families.push("motion".to_string());
            motion_hash = Some(artifact.content_hash.clone());
            let paths: Vec<String> = artifact.adapters.keys().cloned().collect();
            (Some(artifact.adapters), paths, Some(artifact.modes))
        }
        None => (None, Vec::new(), None),
    };
    let modes = modes_s.or(modes_m).unwrap_or((
        AdapterMode::Parallel,
        AdapterMode::Parallel,
        AdapterMode::Parallel,
    ));

    let plan = build_plan(base, &identity_paths, &motion_paths, modes)?;
    let mut set = attach(&base.unet, &plan, identity_map, motion_map)?;
    set.strict_appearance = base.cfg.strict_guidance;

    // Resolve appearance guidance: explicit frame > recorded training image.
    let has_motion = set.has_motion();
    let (appearance, guidance_desc) = match guidance {
        GuidanceSource::Frame(frame) => {
            let e = base.encode_frames(&[frame])?;
            (Some(e), "explicit".to_string())
        }
        GuidanceSource::FromSubjectImages => {
            if subject_images.is_empty() {
                if has_motion && set.strict_appearance {
                    return Err(Error::MissingGuidance);
                }
                (None, "none".to_string())
            } else {
                let mut r = rng::substream(request.seed, "guidance-pick");
                let pick = r.gen_range(0..subject_images.len());
                let frame = subject_images[pick].frame_data(0, 0);
                let e = base.encode_frames(&[frame])?;
                (Some(e), format!("training_image_{pick}"))
            }
        }
        GuidanceSource::None => {
            if has_motion && set.strict_appearance {
                return Err(Error::MissingGuidance);
            }
            (None, "none".to_string())
        }
    };

    let text_cond = base.encode_prompts(&[&request.prompt])?;
    let null_cond = base.encode_null(1)?;
    let params = SampleParams {
        num_steps: request.num_steps,
        guidance_scale: request.guidance_scale,
        seed: request.seed,
        dims: base.latent_dims(1),
    };
    let video = sample(
        &base.unet,
        &base.schedule,
        &text_cond,
        &null_cond,
        &set,
        appearance.as_ref(),
        &params,
    )?;

    let metadata = GenerationMetadata {
        prompt: request.prompt.clone(),
        seed: request.seed,
        num_steps: request.num_steps,
        guidance_scale: request.guidance_scale,
        subject_checkpoint: subject_hash,
        motion_checkpoint: motion_hash,
        guidance_image: guidance_desc,
        adapter_families,
        pseudo_word,
        version: format!("vidadapt {}", env!("CARGO_PKG_VERSION")),
    };
    Ok((video, metadata))
}

/// Audit that identity adapters fire only at spatial cross-attention and
/// motion adapters only at temporal sublayers during a real forward pass.
pub fn audit_placement(
    base: &BaseModel,
    set: &AdapterSet,
    appearance: Option<&AppearanceEmbedding>,
) -> Result<()> {
    let dims = base.latent_dims(1);
    let z = LatentVideo::zeros(dims);
    let text = base.encode_null(1)?;
    let (_, trace) = base.unet.forward_traced(&z, &[0], &text, set, appearance)?;
    let infos = base.unet.layer_infos();
    let mut identity_seen = 0;
    let mut motion_seen = 0;
    for (path, kind) in &trace.adapter_firings {
        let info = infos
            .iter()
            .find(|i| &i.address.path == path)
            .ok_or_else(|| Error::invalid(format!("trace mentions unknown address {path}")))?;
        match kind {
            crate::unet::AdapterKind::Identity => {
                identity_seen += 1;
                if info.address.category != LayerCategory::CrossAttention
                    || info.address.domain != LayerDomain::Spatial
                {
                    return Err(Error::invalid(format!(
                        "identity adapter fired outside spatial cross-attention: {path}"
                    )));
                }
            }
            crate::unet::AdapterKind::Motion => {
                motion_seen += 1;
                if info.address.domain != LayerDomain::Temporal {
                    return Err(Error::invalid(format!(
                        "motion adapter fired outside the temporal domain: {path}"
                    )));
                }
            }
            _ => {}
        }
    }
    if identity_seen != set.identity.len() {
        return Err(Error::invalid(format!(
            "expected {} identity firings, saw {identity_seen}",
            set.identity.len()
        )));
    }
    if motion_seen != set.motion.len() {
        return Err(Error::invalid(format!(
            "expected {} motion firings, saw {motion_seen}",
            set.motion.len()
        )));
    }
    Ok(())
}
