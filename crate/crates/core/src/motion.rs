//! Motion-adapter training on one or more videos with appearance guidance.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{attach, create_motion_adapters, AdapterSet, PlacementPlan};
use crate::diffusion::reconstruction_loss;
use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::model::BaseModel;
use crate::optim::{AdamW, TrainLog, TrainRunConfig};
use crate::rng;
use crate::trainer::{assert_frozen, diffuse_batch, noise_like, sample_indices, sample_timesteps};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionMode {
    SingleVideo,
    MultiVideo,
}

/// Captioned clips sharing one motion pattern; all clips must have the same
/// frame count (ingestion resamples longer clips).
pub struct MotionDataset {
    pub videos: Vec<LatentVideo>,
    pub captions: Vec<String>,
    pub mode: MotionMode,
}

impl MotionDataset {
    pub fn new(videos: Vec<LatentVideo>, captions: Vec<String>) -> Result<MotionDataset> {
        if videos.is_empty() {
            return Err(Error::invalid("motion dataset needs at least one video"));
        }
        if videos.len() != captions.len() {
            return Err(Error::invalid("one caption per video required"));
        }
        let f = videos[0].frames();
        for v in &videos {
            if v.batch() != 1 {
                return Err(Error::invalid("motion videos must have batch 1"));
            }
            if v.frames() < 2 {
                return Err(Error::invalid("motion videos need at least 2 frames"));
            }
            if v.frames() != f {
                return Err(Error::invalid("all motion videos must share one frame count"));
            }
        }
        for c in &captions {
            if c.trim().is_empty() {
                return Err(Error::invalid("captions must be non-empty"));
            }
        }
        let mode = if videos.len() == 1 { MotionMode::SingleVideo } else { MotionMode::MultiVideo };
        Ok(MotionDataset { videos, captions, mode })
    }
}

/// Uniformly pick the appearance-guidance frame of a clip.
pub fn select_guidance_frame(video: &LatentVideo, r: &mut ChaCha8Rng) -> usize {
    r.gen_range(0..video.frames())
}

/// Train fresh motion adapters at every temporal-transformer sublayer of the
/// frozen base. Each step draws clips, one guidance frame per sample, and
/// updates only the adapter matrices (including the condition projection).
pub fn train_motion_adapter(
    base: &BaseModel,
    dataset: &MotionDataset,
    run: &TrainRunConfig,
) -> Result<(AdapterSet, TrainLog)> {
    run.validate()?;
    base.freeze_all();
    assert_frozen(&base.named_params())?;

    let (cross_mode, self_mode, ffn_mode) = base.cfg.modes();
    let mut plan = PlacementPlan::default_for(&base.unet);
    plan.cross_attention_mode = cross_mode;
    plan.self_attention_mode = self_mode;
    plan.feed_forward_mode = ffn_mode;
    let adapters = create_motion_adapters(&base.unet, &plan, base.cfg.cond_dim, run.seed)?;
    let set = attach(&base.unet, &plan, None, Some(adapters))?;
    set.set_trainable(true);
    let mut opt = AdamW::new(
        set.named_params().into_iter().map(|(_, p)| p).collect(),
        run.learning_rate,
        run.adam,
    );

    let mut batch_rng = rng::substream(run.seed, "batch");
    let mut noise_rng = rng::substream(run.seed, "noise");
    let mut t_rng = rng::substream(run.seed, "timestep");
    let mut frame_rng = rng::substream(run.seed, "guidance-frame");
    let mut log = TrainLog::default();
    let started = std::time::Instant::now();

    for step in 0..run.iterations {
        let idx = match dataset.mode {
            MotionMode::SingleVideo => vec![0; run.batch_size],
            MotionMode::MultiVideo => sample_indices(&mut batch_rng, dataset.videos.len(), run.batch_size),
        };
        let views: Vec<&LatentVideo> = idx.iter().map(|&i| &dataset.videos[i]).collect();
        let z0 = LatentVideo::stack_batch(&views)?;
        let dims = z0.dims();

        // Each batch element draws its guidance frame from its own video.
        let frames: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| {
                let v = &dataset.videos[i];
                let fidx = select_guidance_frame(v, &mut frame_rng);
                v.frame_data(0, fidx)
            })
            .collect();
        let e = base.encode_frames(&frames)?;

        let ts = sample_timesteps(&mut t_rng, dims[0], base.schedule.num_steps());
        let eps = noise_like(&mut noise_rng, dims);
        let zt = diffuse_batch(&z0, &ts, &eps, &base.schedule)?;
        let prompts: Vec<&str> = idx.iter().map(|&i| dataset.captions[i].as_str()).collect();
        let text = base.encode_prompts(&prompts)?;
        let pred = base.unet.forward(&zt, &ts, &text, &set, Some(&e))?;
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
            frames: 4,
            latent_h: 4,
            latent_w: 4,
            time_dim: 16,
            text_tokens: 6,
            cond_dim: 6,
            schedule_steps: 12,
            ddim_steps: 3,
            seed: 33,
            ..RunConfig::default()
        }
    }

    fn tiny_dataset(cfg: &RunConfig) -> MotionDataset {
        let clip = synthetic::motion_clip(cfg.seed, cfg.frames, cfg.latent_h, cfg.latent_w, cfg.latent_channels);
        MotionDataset::new(vec![clip.video], vec![clip.caption]).unwrap()
    }

    fn short_run(seed: u64, iters: usize) -> TrainRunConfig {
        TrainRunConfig {
            learning_rate: 1e-2,
            iterations: iters,
            batch_size: 1,
            seed,
            adam: AdamConfig::default(),
        }
    }

    #[test]
    fn dataset_validation() {
        let cfg = tiny_cfg();
        let clip = synthetic::motion_clip(1, 4, 4, 4, 2);
        assert!(MotionDataset::new(vec![], vec![]).is_err());
        assert!(MotionDataset::new(vec![clip.video.clone()], vec!["".into()]).is_err());
        let single_frame = LatentVideo::zeros([1, 1, 4, 4, 2]);
        assert!(MotionDataset::new(vec![single_frame], vec!["x".into()]).is_err());
        let other = synthetic::motion_clip(2, 6, 4, 4, 2);
        assert!(MotionDataset::new(
            vec![clip.video.clone(), other.video],
            vec!["a".into(), "b".into()]
        )
        .is_err());
        let ds = tiny_dataset(&cfg);
        assert_eq!(ds.mode, MotionMode::SingleVideo);
    }

    #[test]
    fn guidance_frames_are_uniform() {
        let v = LatentVideo::zeros([1, 8, 2, 2, 1]);
        let mut r = rng::seeded(9);
        let draws = 80_000;
        let mut counts = [0usize; 8];
        for _ in 0..draws {
            counts[select_guidance_frame(&v, &mut r)] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!((0.115..=0.135).contains(&freq), "frame {i} frequency {freq}");
        }
        // F = 1 always picks frame 0.
        let single = LatentVideo::zeros([1, 1, 2, 2, 1]);
        for _ in 0..10 {
            assert_eq!(select_guidance_frame(&single, &mut r), 0);
        }
    }

    #[test]
    fn training_touches_only_motion_adapters() {
        let cfg = tiny_cfg();
        let base = BaseModel::build(&cfg).unwrap();
        let before = hash_params(&base.named_params()).unwrap();
        let ds = tiny_dataset(&cfg);
        let (set, log) = train_motion_adapter(&base, &ds, &short_run(1, 6)).unwrap();
        assert_eq!(hash_params(&base.named_params()).unwrap(), before);
        assert!(set.identity.is_empty());
        assert!(!set.motion.is_empty());
        assert_eq!(log.steps.len(), 6);
        // W_cond must have received updates once W_up became nonzero.
        let any_cond_trained = set
            .motion
            .values()
            .any(|m| m.w_cond.grad().is_none() && !m.is_zero_init());
        assert!(any_cond_trained);
    }

    #[test]
    fn zero_iterations_keeps_transparency() {
        let cfg = tiny_cfg();
        let base = BaseModel::build(&cfg).unwrap();
        let ds = tiny_dataset(&cfg);
        let (set, _) = train_motion_adapter(&base, &ds, &short_run(2, 0)).unwrap();
        for m in set.motion.values() {
            assert!(m.is_zero_init());
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = tiny_cfg();
        let run = || {
            let base = BaseModel::build(&cfg).unwrap();
            let ds = tiny_dataset(&cfg);
            let (set, _) = train_motion_adapter(&base, &ds, &short_run(3, 4)).unwrap();
            set.named_params()
                .into_iter()
                .flat_map(|(_, p)| p.to_vec())
                .collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradients_gate_through_zero_up_projection() {
        // With W_up = 0 the loss gradient w.r.t. W_down and W_cond is
        // exactly zero; after W_up moves they become generically nonzero.
        let cfg = tiny_cfg();
        let base = BaseModel::build(&cfg).unwrap();
        let ds = tiny_dataset(&cfg);

        let plan = PlacementPlan::default_for(&base.unet);
        let adapters = create_motion_adapters(&base.unet, &plan, cfg.cond_dim, 4).unwrap();
        let set = attach(&base.unet, &plan, None, Some(adapters)).unwrap();
        set.set_trainable(true);

        let compute_grads = || {
            let z0 = &ds.videos[0];
            let eps = noise_like(&mut rng::seeded(5), z0.dims());
            let zt = diffuse_batch(z0, &[6], &eps, &base.schedule).unwrap();
            let frame = z0.frame_data(0, 0);
            let e = base.encode_frames(&[frame]).unwrap();
            let text = base.encode_prompts(&[&ds.captions[0]]).unwrap();
            let pred = base.unet.forward(&zt, &[6], &text, &set, Some(&e)).unwrap();
            let loss = reconstruction_loss(pred.tensor(), eps.tensor()).unwrap();
            loss.backward();
        };

        compute_grads();
        for m in set.motion.values() {
            let gd = m.w_down.grad().unwrap();
            let gc = m.w_cond.grad().unwrap();
            let gu = m.w_up.grad().unwrap();
            assert!(gd.iter().all(|g| *g == 0.0), "W_down grad must be exactly 0 at W_up = 0");
            assert!(gc.iter().all(|g| *g == 0.0), "W_cond grad must be exactly 0 at W_up = 0");
            assert!(gu.iter().any(|g| *g != 0.0), "W_up grad must be nonzero");
        }

        // Move W_up off zero, then the bottleneck inputs matter.
        for (_, p) in set.named_params() {
            p.zero_grad();
        }
        for m in set.motion.values() {
            m.w_up
                .with_data_mut(|d| d.iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * ((i % 7) as f64 - 3.0)));
        }
        compute_grads();
        for m in set.motion.values() {
            assert!(m.w_down.grad().unwrap().iter().any(|g| *g != 0.0));
            assert!(m.w_cond.grad().unwrap().iter().any(|g| *g != 0.0));
        }
    }
}
