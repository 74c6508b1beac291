//! Evaluation metrics over generated videos: prompt similarity (clip_t),
//! subject similarity against reference images (clip_i / dino_i) and
//! temporal consistency, computed with pluggable frozen embedding providers.
//!
//! The default providers are seeded random-projection encoders; the trait
//! seam allows swapping in real pretrained encoders without touching the
//! metric formulas.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Frozen embedding provider. Outputs must be unit-norm and deterministic.
pub trait EmbeddingProvider {
    fn name(&self) -> &str;
    fn image_embed(&self, frame: &[f64]) -> Result<Vec<f64>>;
    fn text_embed(&self, prompt: &str) -> Result<Vec<f64>>;
}

fn normalize(mut v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::invalid(format!("zero-norm embedding from {what}")));
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

/// Cosine similarity of two unit-norm embeddings; errors on zero vectors
/// rather than silently returning 0.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            context: "cosine",
            expected: vec![a.len()],
            got: vec![b.len()],
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::invalid("cosine of zero vector"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Seeded random-projection provider: images flatten through a fixed
/// projection, prompts average per-token pseudo-embeddings through another.
pub struct SeededProjectionProvider {
    name: String,
    seed: u64,
    dim: usize,
    projections: RefCell<BTreeMap<usize, Vec<f64>>>,
}

impl SeededProjectionProvider {
    pub fn new(name: &str, seed: u64, dim: usize) -> SeededProjectionProvider {
        SeededProjectionProvider {
            name: name.to_string(),
            seed,
            dim,
            projections: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn project(&self, input: &[f64]) -> Vec<f64> {
        let n = input.len();
        let mut cache = self.projections.borrow_mut();
        let proj = cache.entry(n).or_insert_with(|| {
            let mut r = rng::substream(self.seed, &format!("proj-{n}"));
            rng::gaussian_vec(&mut r, n * self.dim, 1.0 / (n as f64).sqrt())
        });
        let mut out = vec![0.0; self.dim];
        for (i, &x) in input.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(&proj[i * self.dim..(i + 1) * self.dim]) {
                *o += x * p;
            }
        }
        out
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut r = rng::substream(self.seed, &format!("token-{token}"));
        (0..self.dim).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect()
    }
}

impl EmbeddingProvider for SeededProjectionProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn image_embed(&self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.is_empty() {
            return Err(Error::invalid("empty frame"));
        }
        normalize(self.project(frame), &self.name)
    }

    fn text_embed(&self, prompt: &str) -> Result<Vec<f64>> {
        let tokens: Vec<String> = prompt.split_whitespace().map(|t| t.to_lowercase()).collect();
        if tokens.is_empty() {
            return Err(Error::invalid("empty prompt"));
        }
        let mut acc = vec![0.0; self.dim];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v / tokens.len() as f64;
            }
        }
        normalize(acc, &self.name)
    }
}

/// Mean cosine between every frame embedding and the prompt embedding.
pub fn clip_t(frames: &[Vec<f64>], prompt: &str, provider: &dyn EmbeddingProvider) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::invalid("clip_t needs at least one frame"));
    }
    let text = provider.text_embed(prompt)?;
    let mut acc = 0.0;
    for f in frames {
        acc += cosine(&provider.image_embed(f)?, &text)?;
    }
    Ok(acc / frames.len() as f64)
}

/// Mean cosine over the full (frame, reference) cross product.
pub fn clip_i(
    frames: &[Vec<f64>],
    references: &[Vec<f64>],
    provider: &dyn EmbeddingProvider,
) -> Result<f64> {
    if frames.is_empty() || references.is_empty() {
        return Err(Error::invalid("clip_i needs frames and references"));
    }
    let ref_embeds: Result<Vec<Vec<f64>>> =
        references.iter().map(|r| provider.image_embed(r)).collect();
    let ref_embeds = ref_embeds?;
    let mut acc = 0.0;
    for f in frames {
        let fe = provider.image_embed(f)?;
        for re in &ref_embeds {
            acc += cosine(&fe, re)?;
        }
    }
    Ok(acc / (frames.len() * references.len()) as f64)
}

/// Same formula as [`clip_i`] with a second provider standing in for a
/// self-supervised encoder.
pub fn dino_i(
    frames: &[Vec<f64>],
    references: &[Vec<f64>],
    provider_dino: &dyn EmbeddingProvider,
) -> Result<f64> {
    clip_i(frames, references, provider_dino)
}

/// Mean cosine between embeddings of consecutive frame pairs.
pub fn temporal_consistency(frames: &[Vec<f64>], provider: &dyn EmbeddingProvider) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::invalid("temporal_consistency needs at least 2 frames"));
    }
    let embeds: Result<Vec<Vec<f64>>> = frames.iter().map(|f| provider.image_embed(f)).collect();
    let embeds = embeds?;
    let mut acc = 0.0;
    for pair in embeds.windows(2) {
        acc += cosine(&pair[0], &pair[1])?;
    }
    Ok(acc / (frames.len() - 1) as f64)
}

/// Metrics for one (video, prompt) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub video_id: String,
    pub prompt: String,
    pub clip_t: f64,
    pub clip_i: f64,
    pub dino_i: f64,
    pub temporal_consistency: f64,
    pub frames: usize,
    pub references: usize,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("clip_t", self.clip_t),
            ("clip_i", self.clip_i),
            ("dino_i", self.dino_i),
            ("temporal_consistency", self.temporal_consistency),
        ] {
            if !v.is_finite() || !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} outside [-1, 1]")));
            }
        }
        if self.frames < 2 {
            return Err(Error::invalid("temporal consistency requires >= 2 frames"));
        }
        Ok(())
    }
}

/// Aggregate means over a batch of records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub count: usize,
    pub clip_t: f64,
    pub clip_i: f64,
    pub dino_i: f64,
    pub temporal_consistency: f64,
}

pub fn aggregate(records: &[MetricsRecord]) -> Result<AggregateMetrics> {
    if records.is_empty() {
        return Err(Error::invalid("no records to aggregate"));
    }
    let n = records.len() as f64;
    Ok(AggregateMetrics {
        count: records.len(),
        clip_t: records.iter().map(|r| r.clip_t).sum::<f64>() / n,
        clip_i: records.iter().map(|r| r.clip_i).sum::<f64>() / n,
        dino_i: records.iter().map(|r| r.dino_i).sum::<f64>() / n,
        temporal_consistency: records.iter().map(|r| r.temporal_consistency).sum::<f64>() / n,
    })
}

/// Compute all four metrics for one video.
pub fn evaluate_video(
    video_id: &str,
    frames: &[Vec<f64>],
    prompt: &str,
    references: &[Vec<f64>],
    provider_clip: &dyn EmbeddingProvider,
    provider_dino: &dyn EmbeddingProvider,
) -> Result<MetricsRecord> {
    let record = MetricsRecord {
        video_id: video_id.to_string(),
        prompt: prompt.to_string(),
        clip_t: clip_t(frames, prompt, provider_clip)?,
        clip_i: clip_i(frames, references, provider_clip)?,
        dino_i: dino_i(frames, references, provider_dino)?,
        temporal_consistency: temporal_consistency(frames, provider_clip)?,
        frames: frames.len(),
        references: references.len(),
    };
    record.validate()?;
    Ok(record)
}

/// Batch evaluation over a directory layout:
/// - `videos_dir`: each entry is either `<id>.vt` (a rank-5 latent
///   container) or a directory `<id>/` of frame files;
/// - `prompts_file`: one `video_id<TAB>prompt` line per video;
/// - `refs_dir`: reference frame files.
///
/// Every video must have a prompt. Records come back sorted by video id, so
/// re-running on the same inputs is byte-identical.
pub fn evaluate_run(
    videos_dir: &std::path::Path,
    prompts_file: &std::path::Path,
    refs_dir: &std::path::Path,
    provider_clip: &dyn EmbeddingProvider,
    provider_dino: &dyn EmbeddingProvider,
    latent_hw: (usize, usize),
    latent_channels: usize,
) -> Result<(Vec<MetricsRecord>, AggregateMetrics)> {
    let (h, w) = latent_hw;
    let prompts_text = std::fs::read_to_string(prompts_file)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", prompts_file.display())))?;
    let mut prompts: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, line) in prompts_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, prompt) = line.split_once('\t').ok_or_else(|| {
            Error::invalid(format!("prompts line {} lacks a tab separator", lineno + 1))
        })?;
        prompts.insert(id.trim().to_string(), prompt.trim().to_string());
    }

    let refs = crate::ingest::ingest_subject(refs_dir, h, w, latent_channels)?;
    let ref_frames: Vec<Vec<f64>> = refs.iter().map(|v| v.frame_data(0, 0)).collect();

    let mut entries: Vec<std::path::PathBuf> = std::fs::read_dir(videos_dir)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", videos_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir() || p.extension().and_then(|e| e.to_str()) == Some("vt")
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::invalid(format!("no videos in {}", videos_dir.display())));
    }

    let mut records = Vec::new();
    for entry in entries {
        let id = entry
            .file_stem()
            .and_then(|n| n.to_str())
            .unwrap_or("video")
            .to_string();
        let prompt = prompts
            .get(&id)
            .ok_or_else(|| Error::invalid(format!("no prompt for video {id:?}")))?;
        let frames: Vec<Vec<f64>> = if entry.is_dir() {
            let clip = crate::ingest::ingest_subject(&entry, h, w, latent_channels)?;
            clip.iter().map(|v| v.frame_data(0, 0)).collect()
        } else {
            let video = crate::ingest::load_video(&entry)?;
            (0..video.frames()).map(|f| video.frame_data(0, f)).collect()
        };
        records.push(evaluate_video(&id, &frames, prompt, &ref_frames, provider_clip, provider_dino)?);
    }
    let agg = aggregate(&records)?;
    Ok((records, agg))
}

/// Plain-text report: one row per record plus the aggregate line.
pub fn render_report(records: &[MetricsRecord], agg: &AggregateMetrics) -> String {
    let mut out = String::new();
    out.push_str("video_id          clip_t    clip_i    dino_i    t_cons    frames  refs\n");
    for r in records {
        out.push_str(&format!(
            "{:<16}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>6}  {:>4}\n",
            r.video_id, r.clip_t, r.clip_i, r.dino_i, r.temporal_consistency, r.frames, r.references
        ));
    }
    out.push_str(&format!(
        "{:<16}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>6}\n",
        "mean", agg.clip_t, agg.clip_i, agg.dino_i, agg.temporal_consistency, agg.count
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Provider that returns pre-baked unit vectors keyed by a marker value
    /// in the first element.
    struct FixtureProvider {
        map: BTreeMap<i64, Vec<f64>>,
        text: Vec<f64>,
    }

    impl EmbeddingProvider for FixtureProvider {
        fn name(&self) -> &str {
            "fixture"
        }
        fn image_embed(&self, frame: &[f64]) -> Result<Vec<f64>> {
            Ok(self.map.get(&(frame[0] as i64)).expect("fixture vector").clone())
        }
        fn text_embed(&self, _prompt: &str) -> Result<Vec<f64>> {
            Ok(self.text.clone())
        }
    }

    #[test]
    fn clip_t_hand_built_vectors() {
        // text = e1; frames have cosines 0.2 and 0.6 -> mean 0.4.
        let mut map = BTreeMap::new();
        map.insert(1, vec![0.2, (1.0f64 - 0.04).sqrt()]);
        map.insert(2, vec![0.6, 0.8]);
        let p = FixtureProvider { map, text: vec![1.0, 0.0] };
        let frames = vec![vec![1.0], vec![2.0]];
        let got = clip_t(&frames, "anything", &p).unwrap();
        assert!((got - 0.4).abs() < 1e-9);
    }

    #[test]
    fn clip_t_degenerate_cases() {
        let mut map = BTreeMap::new();
        map.insert(1, vec![1.0, 0.0]);
        map.insert(2, vec![0.0, 1.0]);
        let p = FixtureProvider { map, text: vec![1.0, 0.0] };
        assert!((clip_t(&[vec![1.0]], "x", &p).unwrap() - 1.0).abs() < 1e-12);
        assert!(clip_t(&[vec![2.0]], "x", &p).unwrap().abs() < 1e-12);
        assert!(clip_t(&[], "x", &p).is_err());
    }

    #[test]
    fn clip_i_hand_built_vectors() {
        // 1 frame, 2 refs with cosines 0 and 1 -> 0.5.
        let mut map = BTreeMap::new();
        map.insert(1, vec![1.0, 0.0]);
        map.insert(2, vec![0.0, 1.0]);
        map.insert(3, vec![1.0, 0.0]);
        let p = FixtureProvider { map, text: vec![1.0, 0.0] };
        let frames = vec![vec![1.0]];
        let refs = vec![vec![2.0], vec![3.0]];
        let got = clip_i(&frames, &refs, &p).unwrap();
        assert!((got - 0.5).abs() < 1e-9);
        // Reference permutation invariance.
        let refs_flipped = vec![vec![3.0], vec![2.0]];
        assert_eq!(got, clip_i(&frames, &refs_flipped, &p).unwrap());
        assert!(clip_i(&frames, &[], &p).is_err());
    }

    #[test]
    fn temporal_consistency_hand_built_vectors() {
        // Consecutive cosines 0.9 and 0.7 -> mean 0.8.
        let mut map = BTreeMap::new();
        map.insert(1, vec![1.0, 0.0]);
        map.insert(2, vec![0.9, (1.0f64 - 0.81).sqrt()]);
        // Third vector with cosine 0.7 against the second.
        let b = vec![0.9, (1.0f64 - 0.81).sqrt()];
        let angle = 0.7f64.acos() + (b[1]).atan2(b[0]);
        map.insert(3, vec![angle.cos(), angle.sin()]);
        let p = FixtureProvider { map, text: vec![1.0, 0.0] };
        let frames = vec![vec![1.0], vec![2.0], vec![3.0]];
        let got = temporal_consistency(&frames, &p).unwrap();
        assert!((got - 0.8).abs() < 1e-9, "{got}");
        assert!(temporal_consistency(&frames[..1], &p).is_err());
    }

    #[test]
    fn temporal_consistency_invariant_under_reversal() {
        let p = SeededProjectionProvider::new("clip", 3, 8);
        let mut r = crate::rng::seeded(4);
        let frames: Vec<Vec<f64>> = (0..5).map(|_| crate::rng::normal_vec(&mut r, 12)).collect();
        let fwd = temporal_consistency(&frames, &p).unwrap();
        let rev: Vec<Vec<f64>> = frames.iter().rev().cloned().collect();
        let bwd = temporal_consistency(&rev, &p).unwrap();
        assert_eq!(fwd, bwd);
    }

    #[test]
    fn all_frames_identical_gives_one() {
        let p = SeededProjectionProvider::new("clip", 3, 8);
        let frame = crate::rng::normal_vec(&mut crate::rng::seeded(5), 12);
        let frames = vec![frame.clone(), frame.clone(), frame];
        let got = temporal_consistency(&frames, &p).unwrap();
        assert!((got - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_providers_are_unit_norm_and_seeded() {
        let p1 = SeededProjectionProvider::new("clip", 3, 16);
        let p2 = SeededProjectionProvider::new("clip", 3, 16);
        let d = SeededProjectionProvider::new("dino", 4, 16);
        let frame = crate::rng::normal_vec(&mut crate::rng::seeded(6), 20);
        let e1 = p1.image_embed(&frame).unwrap();
        let e2 = p2.image_embed(&frame).unwrap();
        assert_eq!(e1, e2);
        let norm: f64 = e1.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let ed = d.image_embed(&frame).unwrap();
        assert_ne!(e1, ed, "distinct seeds give distinct embeddings");

        let t = p1.text_embed("a blob drifting").unwrap();
        assert!((t.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        assert!(p1.text_embed("  ").is_err());
        assert!(p1.image_embed(&vec![0.0; 10]).is_err(), "zero frame embeds to zero vector");
    }

    #[test]
    fn dino_i_equals_clip_i_with_same_provider() {
        let p = SeededProjectionProvider::new("clip", 3, 8);
        let mut r = crate::rng::seeded(7);
        let frames: Vec<Vec<f64>> = (0..3).map(|_| crate::rng::normal_vec(&mut r, 10)).collect();
        let refs: Vec<Vec<f64>> = (0..2).map(|_| crate::rng::normal_vec(&mut r, 10)).collect();
        assert_eq!(
            clip_i(&frames, &refs, &p).unwrap(),
            dino_i(&frames, &refs, &p).unwrap()
        );
        // Distinct providers give different values on generic fixtures.
        let d = SeededProjectionProvider::new("dino", 9, 8);
        assert_ne!(
            clip_i(&frames, &refs, &p).unwrap(),
            dino_i(&frames, &refs, &d).unwrap()
        );
    }

    #[test]
    fn evaluate_run_over_directories() {
        use crate::ingest;
        let dir = tempfile::tempdir().unwrap();
        let (h, w, c) = (4usize, 4usize, 4usize);

        // One video as a latent container, one as a frame directory.
        let videos = dir.path().join("videos");
        std::fs::create_dir_all(&videos).unwrap();
        let spec = crate::synthetic::subject_spec(1, c);
        let clip = crate::synthetic::render_clip(
            &spec.pattern,
            crate::synthetic::MotionKind::Drifting,
            3,
            h,
            w,
            c,
        );
        ingest::save_video(&videos.join("v0.vt"), &clip).unwrap();
        ingest::dump_frames(&videos.join("v1"), &clip).unwrap();

        let refs = dir.path().join("refs");
        std::fs::create_dir_all(&refs).unwrap();
        let img = ingest::latent_to_pixels(&clip.frame_data(0, 0), h, w, c).unwrap();
        img.save(refs.join("r0.png")).unwrap();

        let prompts = dir.path().join("prompts.tsv");
        std::fs::write(&prompts, "v0\ta blob drifting\nv1\ta blob drifting\n").unwrap();

        let p = SeededProjectionProvider::new("clip", 3, 16);
        let d = SeededProjectionProvider::new("dino", 4, 16);
        let (records, agg) =
            evaluate_run(&videos, &prompts, &refs, &p, &d, (h, w), c).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(agg.count, 2);
        for r in &records {
            r.validate().unwrap();
        }

        // Determinism: identical report bytes on re-run.
        let (records2, agg2) =
            evaluate_run(&videos, &prompts, &refs, &p, &d, (h, w), c).unwrap();
        assert_eq!(
            render_report(&records, &agg),
            render_report(&records2, &agg2)
        );

        // Missing prompt is an error.
        std::fs::write(&prompts, "v0\ta blob drifting\n").unwrap();
        assert!(evaluate_run(&videos, &prompts, &refs, &p, &d, (h, w), c).is_err());
    }

    #[test]
    fn metric_values_stay_in_range() {
        let p = SeededProjectionProvider::new("clip", 3, 8);
        let d = SeededProjectionProvider::new("dino", 4, 8);
        let mut r = crate::rng::seeded(8);
        let frames: Vec<Vec<f64>> = (0..4).map(|_| crate::rng::normal_vec(&mut r, 10)).collect();
        let refs: Vec<Vec<f64>> = (0..2).map(|_| crate::rng::normal_vec(&mut r, 10)).collect();
        let rec = evaluate_video("v0", &frames, "a blob drifting", &refs, &p, &d).unwrap();
        rec.validate().unwrap();
        let agg = aggregate(&[rec.clone(), rec]).unwrap();
        assert_eq!(agg.count, 2);
    }
}
