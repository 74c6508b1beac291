//! Shared training-loop machinery: batching, per-sample forward diffusion,
//! and a generic trainer over an explicit trainable-parameter set.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::AdapterSet;
use crate::diffusion::{forward_diffuse, reconstruction_loss};
use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::model::BaseModel;
use crate::optim::{AdamW, TrainLog, TrainRunConfig};
use crate::rng;
use crate::tensor::Tensor;

/// One captioned training clip.
pub struct TrainItem {
    pub video: LatentVideo,
    pub prompt: String,
}

/// Draw `batch` indices uniformly with replacement.
pub fn sample_indices(r: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| r.gen_range(0..n)).collect()
}

/// One uniform timestep per batch sample.
pub fn sample_timesteps(r: &mut ChaCha8Rng, batch: usize, num_steps: usize) -> Vec<usize> {
    (0..batch).map(|_| r.gen_range(0..num_steps)).collect()
}

pub fn noise_like(r: &mut ChaCha8Rng, dims: [usize; 5]) -> LatentVideo {
    LatentVideo::from_data(rng::normal_vec(r, dims.iter().product()), dims)
        .expect("gaussian noise is finite")
}

/// Forward-diffuse a batch where each sample has its own timestep.
pub fn diffuse_batch(
    z0: &LatentVideo,
    ts: &[usize],
    eps: &LatentVideo,
    schedule: &crate::diffusion::NoiseSchedule,
) -> Result<LatentVideo> {
    let [b, f, h, w, c] = z0.dims();
    if ts.len() != b {
        return Err(Error::invalid("one timestep per batch sample required"));
    }
    if ts.iter().all(|&t| t == ts[0]) {
        return forward_diffuse(z0, ts[0], eps, schedule);
    }
    let stride = f * h * w * c;
    let z = z0.to_vec();
    let e = eps.to_vec();
    let mut out = vec![0.0; z.len()];
    for (bi, &t) in ts.iter().enumerate() {
        if t >= schedule.num_steps() {
            return Err(Error::TimestepOutOfRange { t, num_steps: schedule.num_steps() });
        }
        let (alpha, sigma) = (schedule.alpha(t), schedule.sigma(t));
        for i in bi * stride..(bi + 1) * stride {
            out[i] = alpha * z[i] + sigma * e[i];
        }
    }
    LatentVideo::from_data(out, [b, f, h, w, c])
}

/// Deterministic training-loss estimate over fixed stratified draws: every
/// item is evaluated on an even timestep grid with noise fixed per
/// (item, slot). Identical draws before and after training make loss ratios
/// meaningful at toy scale, where per-batch losses are far too noisy.
#[allow(clippy::too_many_arguments)]
pub fn eval_training_loss(
    base: &BaseModel,
    items: &[(&LatentVideo, &str)],
    adapters: &AdapterSet,
    appearance: Option<&crate::encoders::AppearanceEmbedding>,
    t_slots: usize,
    reps: usize,
    seed: u64,
) -> Result<f64> {
    if items.is_empty() || t_slots == 0 || reps == 0 {
        return Err(Error::invalid("eval_training_loss needs items, slots and reps"));
    }
    let steps = base.schedule.num_steps();
    let mut acc = 0.0;
    let mut count = 0usize;
    crate::tensor::no_grad(|| -> Result<()> {
        for (i, (video, prompt)) in items.iter().enumerate() {
            let text = base.encode_prompts(&[prompt])?;
            for slot in 0..t_slots {
                // Even grid over [1, steps): slot 0 is the near-clean step.
                let t = 1 + slot * (steps - 1) / t_slots;
                for rep in 0..reps {
                    let mut r = rng::substream(seed, &format!("eval-{i}-{slot}-{rep}"));
                    let eps = noise_like(&mut r, video.dims());
                    let zt = forward_diffuse(video, t, &eps, &base.schedule)?;
                    let pred = base.unet.forward(&zt, &vec![t; video.dims()[0]], &text, adapters, appearance)?;
                    acc += reconstruction_loss(pred.tensor(), eps.tensor())?.item();
                    count += 1;
                }
            }
        }
        Ok(())
    })?;
    Ok(acc / count as f64)
}

/// Check that every handed-in parameter is frozen; training stages call this
/// before touching the optimizer.
pub fn assert_frozen(params: &[(String, Tensor)]) -> Result<()> {
    for (name, p) in params {
        if p.is_trainable() {
            return Err(Error::FrozenDrift(format!("parameter {name} is unexpectedly trainable")));
        }
    }
    Ok(())
}

/// Train an arbitrary named subset of the base model's parameters on
/// captioned clips with the reconstruction objective. Used for toy-backbone
/// pretraining and the weight-change analysis fine-tunes.
///
/// `cond_dropout` replaces the prompt with the null sequence at the given
/// rate so the trained model has a usable unconditional branch.
pub fn train_parameters(
    base: &BaseModel,
    items: &[TrainItem],
    trainable: &[(String, Tensor)],
    run: &TrainRunConfig,
    cond_dropout: f64,
) -> Result<TrainLog> {
    run.validate()?;
    if items.is_empty() {
        return Err(Error::invalid("no training items"));
    }
    for item in items {
        if item.prompt.trim().is_empty() {
            return Err(Error::invalid("training caption must be non-empty"));
        }
    }
    // Items may mix shapes (image-as-video and clips); each batch draws from
    // one shape group so samples stack.
    let mut group_members: Vec<Vec<usize>> = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let dims = item.video.dims();
        match group_members.iter().position(|m| items[m[0]].video.dims() == dims) {
            Some(g) => group_members[g].push(i),
            None => group_members.push(vec![i]),
        }
    }

    for (_, p) in trainable {
        p.set_trainable(true);
    }
    let mut opt = AdamW::new(
        trainable.iter().map(|(_, p)| p.clone()).collect(),
        run.learning_rate,
        run.adam,
    );

    let mut batch_rng = rng::substream(run.seed, "batch");
    let mut noise_rng = rng::substream(run.seed, "noise");
    let mut t_rng = rng::substream(run.seed, "timestep");
    let mut drop_rng = rng::substream(run.seed, "cond-dropout");
    let null_row = crate::encoders::Tokenizer::null_sequence(&base.vocab, base.cfg.text_tokens)?;

    let mut log = TrainLog::default();
    let started = std::time::Instant::now();
    let empty = AdapterSet::empty();
    for step in 0..run.iterations {
        // Pick a shape group (weighted by size), then a batch within it.
        let flat = batch_rng.gen_range(0..items.len());
        let group = group_members
            .iter()
            .find(|m| m.contains(&flat))
            .expect("every item belongs to a group");
        let idx: Vec<usize> = sample_indices(&mut batch_rng, group.len(), run.batch_size)
            .into_iter()
            .map(|k| group[k])
            .collect();
        let views: Vec<&LatentVideo> = idx.iter().map(|&i| &items[i].video).collect();
        let z0 = LatentVideo::stack_batch(&views)?;
        let dims = z0.dims();
        let ts = sample_timesteps(&mut t_rng, dims[0], base.schedule.num_steps());
        let eps = noise_like(&mut noise_rng, dims);
        let zt = diffuse_batch(&z0, &ts, &eps, &base.schedule)?;

        let mut ids = Vec::with_capacity(idx.len());
        for &i in &idx {
            if cond_dropout > 0.0 && drop_rng.gen::<f64>() < cond_dropout {
                ids.push(null_row.clone());
            } else {
                ids.push(crate::encoders::Tokenizer::encode(
                    &base.vocab,
                    &items[i].prompt,
                    base.cfg.text_tokens,
                )?);
            }
        }
        let text = base.text.encode(&base.vocab, &ids)?;

        let pred = base.unet.forward(&zt, &ts, &text, &empty, None)?;
        let loss = reconstruction_loss(pred.tensor(), eps.tensor())?;
        let loss_val = loss.item();
        loss.backward();
        opt.step();
        log.push(step, loss_val, run.learning_rate, started.elapsed().as_millis() as u64);
    }
    for (_, p) in trainable {
        p.set_trainable(false);
    }
    Ok(log)
}
