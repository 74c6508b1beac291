//! Two-step subject customization on a frozen backbone: learn a textual
//! identity for the pseudo-word first, then train identity adapters at the
//! spatial cross-attention layers with the textual identity frozen.

use serde::{Deserialize, Serialize};

use crate::adapters::{attach, create_identity_adapters, AdapterSet, PlacementPlan};
use crate::diffusion::reconstruction_loss;
use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::model::BaseModel;
use crate::optim::{AdamW, TrainLog, TrainRunConfig};
use crate::rng;
use crate::trainer::{assert_frozen, diffuse_batch, noise_like, sample_indices, sample_timesteps};

/// A few views of one subject, as single-frame latent videos.
pub struct SubjectDataset {
    pub images: Vec<LatentVideo>,
    pub prompt_template: String,
    pub class_word: String,
}

impl SubjectDataset {
    pub fn new(images: Vec<LatentVideo>, prompt_template: &str, class_word: &str) -> Result<SubjectDataset> {
        if images.is_empty() {
            return Err(Error::invalid("subject dataset needs at least one image"));
        }
        for img in &images {
            if img.frames() != 1 || img.batch() != 1 {
                return Err(Error::invalid("subject images must be (1, 1, H, W, C) latents"));
            }
        }
        Ok(SubjectDataset {
            images,
            prompt_template: prompt_template.to_string(),
            class_word: class_word.to_string(),
        })
    }

    /// Render the training prompt and check it mentions the pseudo-word
    /// exactly once.
    pub fn prompt(&self, pseudo_word: &str) -> Result<String> {
        let prompt = self.prompt_template.replace("{class}", &self.class_word);
        let count = prompt
            .split_whitespace()
            .filter(|w| w.to_lowercase() == pseudo_word)
            .count();
        if count != 1 {
            return Err(Error::invalid(format!(
                "prompt {prompt:?} must contain {pseudo_word:?} exactly once, found {count}"
            )));
        }
        Ok(prompt)
    }
}

/// The learned pseudo-word embedding row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextualIdentity {
    pub word: String,
    pub init_word: String,
    pub row: Vec<f64>,
}

/// Step one: optimize only the pseudo-word embedding row with everything
/// else frozen. The pseudo-word is added to the vocabulary, initialized from
/// the class word, and left frozen at its learned value on return.
pub fn train_textual_identity(
    base: &mut BaseModel,
    dataset: &SubjectDataset,
    run: &TrainRunConfig,
) -> Result<(TextualIdentity, TrainLog)> {
    run.validate()?;
    base.freeze_all();
    assert_frozen(&base.frozen_params())?;
    let pseudo = base.cfg.pseudo_word.clone();
    let row_id = base.vocab.add_pseudo_word(&pseudo, &dataset.class_word)?;
    let prompt = dataset.prompt(&pseudo)?;

    let rows = base.vocab.rows().clone();
    rows.set_trainable(true);
    let mut opt = AdamW::new_row_masked(rows.clone(), row_id, run.learning_rate, run.adam);

    let mut batch_rng = rng::substream(run.seed, "batch");
    let mut noise_rng = rng::substream(run.seed, "noise");
    let mut t_rng = rng::substream(run.seed, "timestep");
    let empty = AdapterSet::empty();
    let mut log = TrainLog::default();
    let started = std::time::Instant::now();

    for step in 0..run.iterations {
        let idx = sample_indices(&mut batch_rng, dataset.images.len(), run.batch_size);
        let views: Vec<&LatentVideo> = idx.iter().map(|&i| &dataset.images[i]).collect();
        let z0 = LatentVideo::stack_batch(&views)?;
        let dims = z0.dims();
        let ts = sample_timesteps(&mut t_rng, dims[0], base.schedule.num_steps());
        let eps = noise_like(&mut noise_rng, dims);
        let zt = diffuse_batch(&z0, &ts, &eps, &base.schedule)?;
        let prompts: Vec<&str> = vec![&prompt; dims[0]];
        let text = base.encode_prompts(&prompts)?;
        let pred = base.unet.forward(&zt, &ts, &text, &empty, None)?;
        let loss = reconstruction_loss(pred.tensor(), eps.tensor())?;
        let loss_val = loss.item();
        loss.backward();
        opt.step();
        log.push(step, loss_val, run.learning_rate, started.elapsed().as_millis() as u64);
    }

    rows.set_trainable(false);
    base.vocab.freeze_all();
    let identity = TextualIdentity {
        word: pseudo,
        init_word: dataset.class_word.clone(),
        row: base.vocab.row_data(row_id),
    };
    Ok((identity, log))
}

/// Step two: with the textual identity frozen, train fresh identity
/// adapters at every spatial cross-attention sublayer.
pub fn train_identity_adapter(
    base: &BaseModel,
    dataset: &SubjectDataset,
    run: &TrainRunConfig,
) -> Result<(AdapterSet, TrainLog)> {
    run.validate()?;
    let pseudo = base.cfg.pseudo_word.clone();
    if base.vocab.token_id(&pseudo).is_none() {
        return Err(Error::UnknownPseudoWord(pseudo));
    }
    if base.vocab.unfrozen_row().is_some() {
        return Err(Error::FrozenDrift("textual identity must be frozen before adapter training".into()));
    }
    base.freeze_all();
    assert_frozen(&base.named_params())?;
    let prompt = dataset.prompt(&pseudo)?;

    let (cross_mode, self_mode, ffn_mode) = base.cfg.modes();
    let mut plan = PlacementPlan::default_for(&base.unet);
    plan.cross_attention_mode = cross_mode;
    plan.self_attention_mode = self_mode;
    plan.feed_forward_mode = ffn_mode;
    let adapters = create_identity_adapters(&base.unet, &plan, run.seed)?;
    let set = attach(&base.unet, &plan, Some(adapters), None)?;
    set.set_trainable(true);
    let mut opt = AdamW::new(
        set.named_params().into_iter().map(|(_, p)| p).collect(),
        run.learning_rate,
        run.adam,
    );

    let mut batch_rng = rng::substream(run.seed, "batch");
    let mut noise_rng = rng::substream(run.seed, "noise");
    let mut t_rng = rng::substream(run.seed, "timestep");
    let mut log = TrainLog::default();
    let started = std::time::Instant::now();

    for step in 0..run.iterations {
        let idx = sample_indices(&mut batch_rng, dataset.images.len(), run.batch_size);
        let views: Vec<&LatentVideo> = idx.iter().map(|&i| &dataset.images[i]).collect();
        let z0 = LatentVideo::stack_batch(&views)?;
        let dims = z0.dims();
        let ts = sample_timesteps(&mut t_rng, dims[0], base.schedule.num_steps());
        let eps = noise_like(&mut noise_rng, dims);
        let zt = diffuse_batch(&z0, &ts, &eps, &base.schedule)?;
        let prompts: Vec<&str> = vec![&prompt; dims[0]];
        let text = base.encode_prompts(&prompts)?;
        let pred = base.unet.forward(&zt, &ts, &text, &set, None)?;
        let loss = reconstruction_loss(pred.tensor(), eps.tensor())?;
        let loss_val = loss.item();
        loss.backward();
        opt.step();
        log.push(step, loss_val, run.learning_rate, started.elapsed().as_millis() as u64);
    }

    set.set_trainable(false);
    Ok((set, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::optim::AdamConfig;
    use crate::storage::hash_params;
    use crate::synthetic;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            base_channels: 8,
            channel_multipliers: vec![1],
            num_blocks: 1,
            attn_heads: 2,
            text_dim: 12,
            latent_channels: 2,
            frames: 2,
            latent_h: 4,
            latent_w: 4,
            time_dim: 16,
            text_tokens: 6,
            cond_dim: 6,
            schedule_steps: 12,
            ddim_steps: 3,
            seed: 21,
            ..RunConfig::default()
        }
    }

    fn tiny_dataset(cfg: &RunConfig) -> SubjectDataset {
        let spec = synthetic::subject_spec(cfg.seed, cfg.latent_channels);
        let images = synthetic::subject_images(&spec, 3, cfg.latent_h, cfg.latent_w, cfg.latent_channels, 2);
        SubjectDataset::new(images, &cfg.prompt_template, spec.class_word).unwrap()
    }

    fn short_run(seed: u64, iters: usize) -> TrainRunConfig {
        TrainRunConfig {
            learning_rate: 1e-2,
            iterations: iters,
            batch_size: 2,
            seed,
            adam: AdamConfig::default(),
        }
    }

    #[test]
    fn zero_iterations_returns_class_row() {
        let cfg = tiny_cfg();
        let mut base = BaseModel::build(&cfg).unwrap();
        let dataset = tiny_dataset(&cfg);
        let class_row = base.vocab.row_data(base.vocab.token_id(&dataset.class_word).unwrap());
        let (identity, log) = train_textual_identity(&mut base, &dataset, &short_run(1, 0)).unwrap();
        assert_eq!(identity.row, class_row);
        assert!(log.steps.is_empty());
    }

    #[test]
    fn stage_one_trains_exactly_one_row() {
        let cfg = tiny_cfg();
        let mut base = BaseModel::build(&cfg).unwrap();
        let frozen_before = hash_params(&base.frozen_params()).unwrap();
        let rows_before = base.vocab.rows().to_vec();
        let dataset = tiny_dataset(&cfg);
        let (identity, log) = train_textual_identity(&mut base, &dataset, &short_run(2, 8)).unwrap();

        assert_eq!(hash_params(&base.frozen_params()).unwrap(), frozen_before);
        let rows_after = base.vocab.rows().to_vec();
        let d = base.vocab.text_dim();
        let pseudo_id = base.vocab.token_id("s*").unwrap();
        let mut changed_rows = 0;
        for r in 0..base.vocab.len() {
            if r == pseudo_id {
                continue; // appended row, compare against its init below
            }
            if rows_before[r * d..(r + 1) * d] != rows_after[r * d..(r + 1) * d] {
                changed_rows += 1;
            }
        }
        assert_eq!(changed_rows, 0, "pre-existing rows must be bit-identical");
        let init = base.vocab.row_data(base.vocab.token_id(&dataset.class_word).unwrap());
        assert_ne!(identity.row, init, "pseudo row must have trained");
        assert_eq!(log.steps.len(), 8);
    }

    #[test]
    fn stage_one_is_deterministic() {
        let cfg = tiny_cfg();
        let run = || {
            let mut base = BaseModel::build(&cfg).unwrap();
            let dataset = tiny_dataset(&cfg);
            let (id, _) = train_textual_identity(&mut base, &dataset, &short_run(3, 6)).unwrap();
            id.row
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stage_two_requires_textual_identity() {
        let cfg = tiny_cfg();
        let base = BaseModel::build(&cfg).unwrap();
        let dataset = tiny_dataset(&cfg);
        assert!(matches!(
            train_identity_adapter(&base, &dataset, &short_run(4, 2)),
            Err(Error::UnknownPseudoWord(_))
        ));
    }

    #[test]
    fn stage_two_trains_only_adapters() {
        let cfg = tiny_cfg();
        let mut base = BaseModel::build(&cfg).unwrap();
        let dataset = tiny_dataset(&cfg);
        let _ = train_textual_identity(&mut base, &dataset, &short_run(5, 4)).unwrap();
        let all_before = hash_params(&base.named_params()).unwrap();
        let (set, log) = train_identity_adapter(&base, &dataset, &short_run(6, 6)).unwrap();
        assert_eq!(hash_params(&base.named_params()).unwrap(), all_before);
        assert!(!set.identity.is_empty());
        for a in set.identity.values() {
            assert!(!a.is_zero_init(), "adapters should have trained");
        }
        assert_eq!(log.steps.len(), 6);
    }

    #[test]
    fn stage_two_zero_iterations_keeps_zero_init() {
        let cfg = tiny_cfg();
        let mut base = BaseModel::build(&cfg).unwrap();
        let dataset = tiny_dataset(&cfg);
        let _ = train_textual_identity(&mut base, &dataset, &short_run(7, 2)).unwrap();
        let (set, _) = train_identity_adapter(&base, &dataset, &short_run(8, 0)).unwrap();
        for a in set.identity.values() {
            assert!(a.is_zero_init());
        }
    }

    #[test]
    fn prompt_must_mention_pseudo_word_once() {
        let cfg = tiny_cfg();
        let images = tiny_dataset(&cfg).images;
        let ds = SubjectDataset::new(images, "a photo of a {class}", "blob").unwrap();
        assert!(ds.prompt("s*").is_err());
    }
}
