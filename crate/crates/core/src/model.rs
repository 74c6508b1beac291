//! The frozen base bundle: UNet, noise schedule, frozen encoders and
//! vocabulary, constructed from a [`RunConfig`] and checkpointable as a unit.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::diffusion::NoiseSchedule;
use crate::encoders::{
    AppearanceEmbedding, ImageEncoder, TextEncoder, TextSequence, VocabularyTable, DEFAULT_VOCAB,
};
use crate::error::{Error, Result};
use crate::nn::NamedParams;
use crate::storage::{self, role, CheckpointTensor};
use crate::tensor::Tensor;
use crate::unet::UNet;

pub struct BaseModel {
    pub cfg: RunConfig,
    pub unet: UNet,
    pub schedule: NoiseSchedule,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub vocab: VocabularyTable,
}

impl BaseModel {
    /// Fresh, randomly initialized base using the config seed and the
    /// built-in vocabulary.
    pub fn build(cfg: &RunConfig) -> Result<BaseModel> {
        BaseModel::build_with_vocab(cfg, DEFAULT_VOCAB)
    }

    pub fn build_with_vocab(cfg: &RunConfig, vocab_tokens: &[&str]) -> Result<BaseModel> {
        cfg.validate()?;
        let unet = UNet::new(&cfg.unet_config(), cfg.seed)?;
        let schedule = cfg.schedule()?;
        let ecfg = cfg.encoder_config();
        let text = TextEncoder::new(&ecfg);
        let image = ImageEncoder::new(&ecfg, (cfg.latent_h, cfg.latent_w), cfg.latent_channels);
        let vocab = VocabularyTable::new(vocab_tokens, cfg.text_dim, cfg.seed);
        vocab.rows().set_trainable(false);
        Ok(BaseModel { cfg: cfg.clone(), unet, schedule, text, image, vocab })
    }

    /// Every parameter of the bundle, including the vocabulary rows.
    pub fn named_params(&self) -> NamedParams {
        let mut out = self.unet.named_params();
        out.extend(self.text.params());
        out.extend(self.image.params());
        out.push(("vocab.rows".to_string(), self.vocab.rows().clone()));
        out
    }

    /// Base parameters that training stages must never update (everything
    /// except the vocabulary rows, which textual inversion row-masks).
    pub fn frozen_params(&self) -> NamedParams {
        let mut out = self.unet.named_params();
        out.extend(self.text.params());
        out.extend(self.image.params());
        out
    }

    pub fn freeze_all(&self) {
        for (_, p) in self.named_params() {
            p.set_trainable(false);
        }
    }

    pub fn latent_dims(&self, batch: usize) -> [usize; 5] {
        self.cfg.unet_config().latent_dims(batch)
    }

    pub fn encode_prompts(&self, prompts: &[&str]) -> Result<TextSequence> {
        self.text.encode_prompts(&self.vocab, prompts)
    }

    pub fn encode_null(&self, batch: usize) -> Result<TextSequence> {
        self.text.encode_null(&self.vocab, batch)
    }

    /// Encode latent-shaped frames into appearance embeddings.
    pub fn encode_frames(&self, frames: &[Vec<f64>]) -> Result<AppearanceEmbedding> {
        self.image
            .encode_frames(frames, self.cfg.latent_h, self.cfg.latent_w, self.cfg.latent_channels)
    }

    /// Save the whole bundle as a checkpoint directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        for (name, p) in self.named_params() {
            tensors.push(CheckpointTensor::from_tensor(&name, role::BASE, &p));
        }
        let mut extra = BTreeMap::new();
        extra.insert(
            "vocab_tokens".to_string(),
            serde_json::to_value(self.vocab.tokens())?,
        );
        extra.insert("kind".to_string(), serde_json::Value::String("base".into()));
        storage::save_checkpoint(dir, &tensors, self.cfg.to_json(), extra, self.cfg.seed)?;
        Ok(())
    }

    /// Load a bundle, verifying hashes and shapes. All parameters come back
    /// frozen.
    pub fn load(dir: &Path) -> Result<BaseModel> {
        let ckpt = storage::load_checkpoint(dir)?;
        let cfg = RunConfig::from_json(&ckpt.manifest.core.config)?;
        let tokens: Vec<String> = match ckpt.manifest.core.extra.get("vocab_tokens") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(Error::Integrity("base checkpoint missing vocab_tokens".into())),
        };
        let token_refs: Vec<&str> = tokens.iter().map(|s| s.as_str()).collect();
        let model = BaseModel::build_with_vocab(&cfg, &token_refs)?;
        // Overwrite parameters; the vocabulary rows tensor is rebuilt so the
        // loaded table matches the stored one bit for bit.
        storage::load_into_params(&model.frozen_params(), &ckpt.tensors)?;
        let (rows_data, rows_shape) = ckpt.tensor("vocab.rows")?;
        if rows_shape != &[tokens.len(), cfg.text_dim] {
            return Err(Error::Integrity("vocab.rows shape mismatch".into()));
        }
        let rows = Tensor::param(rows_data.clone(), rows_shape);
        rows.set_trainable(false);
        let vocab = VocabularyTable::from_rows(tokens, rows, vec![true; rows_shape[0]])?;
        let model = BaseModel { vocab, ..model };
        model.freeze_all();
        Ok(model)
    }
}
