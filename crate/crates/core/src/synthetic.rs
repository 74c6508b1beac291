//! Seeded synthetic latents for demos, fixtures and toy training.
//!
//! A clip is rendered from a parametric pattern (stripe, checker, blob,
//! ring, gradient, dot) whose parameters evolve over frames according to a
//! named motion (drifting, sliding, bouncing, pulsing, shifting, spinning).
//! Captions name the pattern and motion with vocabulary words, so prompts
//! carry real information about the pixels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::latent::LatentVideo;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternKind {
    Stripe,
    Checker,
    Blob,
    Ring,
    Gradient,
    Dot,
}

impl PatternKind {
    pub const ALL: [PatternKind; 6] = [
        PatternKind::Stripe,
        PatternKind::Checker,
        PatternKind::Blob,
        PatternKind::Ring,
        PatternKind::Gradient,
        PatternKind::Dot,
    ];

    pub fn word(&self) -> &'static str {
        match self {
            PatternKind::Stripe => "stripe",
            PatternKind::Checker => "checker",
            PatternKind::Blob => "blob",
            PatternKind::Ring => "ring",
            PatternKind::Gradient => "gradient",
            PatternKind::Dot => "dot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionKind {
    Drifting,
    Sliding,
    Bouncing,
    Pulsing,
    Shifting,
    Spinning,
}

impl MotionKind {
    pub const ALL: [MotionKind; 6] = [
        MotionKind::Drifting,
        MotionKind::Sliding,
        MotionKind::Bouncing,
        MotionKind::Pulsing,
        MotionKind::Shifting,
        MotionKind::Spinning,
    ];

    pub fn word(&self) -> &'static str {
        match self {
            MotionKind::Drifting => "drifting",
            MotionKind::Sliding => "sliding",
            MotionKind::Bouncing => "bouncing",
            MotionKind::Pulsing => "pulsing",
            MotionKind::Shifting => "shifting",
            MotionKind::Spinning => "spinning",
        }
    }
}

/// Parameters of one renderable pattern instance.
#[derive(Debug, Clone)]
pub struct PatternParams {
    pub kind: PatternKind,
    pub cx: f64,
    pub cy: f64,
    pub phase: f64,
    pub freq: f64,
    pub angle: f64,
    pub amp: f64,
    pub chan: Vec<f64>,
}

impl PatternParams {
    pub fn sample(kind: PatternKind, channels: usize, r: &mut ChaCha8Rng) -> PatternParams {
        PatternParams {
            kind,
            cx: 0.3 + 0.4 * r.gen::<f64>(),
            cy: 0.3 + 0.4 * r.gen::<f64>(),
            phase: std::f64::consts::TAU * r.gen::<f64>(),
            freq: 1.0 + 2.0 * r.gen::<f64>(),
            angle: std::f64::consts::TAU * r.gen::<f64>(),
            amp: 0.8 + 0.4 * r.gen::<f64>(),
            chan: (0..channels).map(|_| 0.5 + r.gen::<f64>()).collect(),
        }
    }
}

fn base_value(p: &PatternParams, x: f64, y: f64) -> f64 {
    let (dx, dy) = (x - p.cx, y - p.cy);
    let (sin_a, cos_a) = p.angle.sin_cos();
    let rx = dx * cos_a - dy * sin_a;
    let ry = dx * sin_a + dy * cos_a;
    // Feature sizes all derive from `freq`, so one knob scales a pattern.
    match p.kind {
        PatternKind::Stripe => (std::f64::consts::TAU * p.freq * rx + p.phase).sin(),
        PatternKind::Checker => {
            (std::f64::consts::TAU * p.freq * rx + p.phase).sin()
                * (std::f64::consts::TAU * p.freq * ry + p.phase).sin()
        }
        PatternKind::Blob => {
            let s = 0.36 / p.freq;
            2.0 * (-(rx * rx + ry * ry) / (2.0 * s * s)).exp() - 0.5
        }
        PatternKind::Ring => {
            let r0 = 0.6 / p.freq;
            let r = (rx * rx + ry * ry).sqrt();
            2.0 * (-((r - r0) * (r - r0)) / (2.0 * 0.06 * 0.06)).exp() - 0.5
        }
        PatternKind::Gradient => (0.8 * p.freq * (rx + ry) + 0.3 * p.phase.sin()).clamp(-1.0, 1.0),
        PatternKind::Dot => {
            let s = 0.18 / p.freq;
            let b1 = (-(rx * rx + ry * ry) / (2.0 * s * s)).exp();
            let (qx, qy) = (rx - 0.22, ry + 0.17);
            let b2 = (-(qx * qx + qy * qy) / (2.0 * s * s)).exp();
            2.0 * (b1 + b2).min(1.0) - 0.5
        }
    }
}

/// Apply a motion to the pattern parameters at clip position `u in [0, 1)`.
fn at_time(p: &PatternParams, motion: MotionKind, u: f64) -> PatternParams {
    let mut q = p.clone();
    match motion {
        MotionKind::Drifting => {
            q.cx = wrap_unit(p.cx + 0.45 * u);
            q.cy = wrap_unit(p.cy + 0.3 * u);
        }
        MotionKind::Sliding => {
            q.cx = wrap_unit(p.cx + 0.6 * u);
        }
        MotionKind::Bouncing => {
            q.cy = wrap_unit(p.cy + 0.3 * triangle(2.0 * u));
        }
        MotionKind::Pulsing => {
            q.amp = p.amp * (1.0 + 0.6 * (std::f64::consts::TAU * u).sin());
        }
        MotionKind::Shifting => {
            q.phase = p.phase + std::f64::consts::TAU * u;
        }
        MotionKind::Spinning => {
            q.angle = p.angle + std::f64::consts::PI * u;
        }
    }
    q
}

fn wrap_unit(v: f64) -> f64 {
    v - v.floor()
}

fn triangle(u: f64) -> f64 {
    let t = u - u.floor();
    if t < 0.5 {
        2.0 * t
    } else {
        2.0 * (1.0 - t)
    }
}

/// Render one `(h, w, c)` frame.
pub fn render_frame(p: &PatternParams, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w * c);
    for iy in 0..h {
        for ix in 0..w {
            let x = (ix as f64 + 0.5) / w as f64;
            let y = (iy as f64 + 0.5) / h as f64;
            let b = base_value(p, x, y);
            for ch in 0..c {
                out.push((p.amp * p.chan[ch] * b).clamp(-1.5, 1.5));
            }
        }
    }
    out
}

/// Render a clip of `frames` frames as a `(1, F, H, W, C)` latent video.
pub fn render_clip(
    p: &PatternParams,
    motion: MotionKind,
    frames: usize,
    h: usize,
    w: usize,
    c: usize,
) -> LatentVideo {
    let mut data = Vec::with_capacity(frames * h * w * c);
    for f in 0..frames {
        let u = f as f64 / frames as f64;
        data.extend(render_frame(&at_time(p, motion, u), h, w, c));
    }
    LatentVideo::from_data(data, [1, frames, h, w, c]).expect("rendered clip is finite")
}

/// A synthetic subject: a fixed pattern instance plus its class word.
pub struct SubjectSpec {
    pub pattern: PatternParams,
    pub class_word: &'static str,
}

pub fn subject_spec(seed: u64, channels: usize) -> SubjectSpec {
    let mut r = rng::substream(seed, "subject-spec");
    let kind = PatternKind::ALL[r.gen_range(0..PatternKind::ALL.len())];
    SubjectSpec { pattern: PatternParams::sample(kind, channels, &mut r), class_word: kind.word() }
}

/// A subject of a chosen pattern class with boosted amplitude, for fixtures
/// where the subject must sit outside the pretraining distribution.
pub fn subject_spec_of_kind(kind: PatternKind, seed: u64, channels: usize) -> SubjectSpec {
    let mut r = rng::substream(seed, "subject-spec");
    let mut pattern = PatternParams::sample(kind, channels, &mut r);
    pattern.amp = 1.4;
    SubjectSpec { pattern, class_word: kind.word() }
}

/// A handful of views of the same subject: single-frame videos with small
/// parameter jitter between views.
pub fn subject_images(
    spec: &SubjectSpec,
    count: usize,
    h: usize,
    w: usize,
    c: usize,
    seed: u64,
) -> Vec<LatentVideo> {
    let mut r = rng::substream(seed, "subject-images");
    (0..count)
        .map(|_| {
            let mut p = spec.pattern.clone();
            p.cx = (p.cx + 0.04 * (r.gen::<f64>() - 0.5)).clamp(0.05, 0.95);
            p.cy = (p.cy + 0.04 * (r.gen::<f64>() - 0.5)).clamp(0.05, 0.95);
            p.phase += 0.15 * (r.gen::<f64>() - 0.5);
            let frame = render_frame(&p, h, w, c);
            LatentVideo::from_data(frame, [1, 1, h, w, c]).expect("finite frame")
        })
        .collect()
}

/// One synthetic motion clip with its caption.
pub struct MotionClipSpec {
    pub video: LatentVideo,
    pub caption: String,
    pub motion: MotionKind,
}

pub fn motion_clip(
    seed: u64,
    frames: usize,
    h: usize,
    w: usize,
    c: usize,
) -> MotionClipSpec {
    let mut r = rng::substream(seed, "motion-clip");
    let motion = MotionKind::ALL[r.gen_range(0..MotionKind::ALL.len())];
    let kind = PatternKind::ALL[r.gen_range(0..PatternKind::ALL.len())];
    let p = PatternParams::sample(kind, c, &mut r);
    MotionClipSpec {
        video: render_clip(&p, motion, frames, h, w, c),
        caption: format!("a {} {}", kind.word(), motion.word()),
        motion,
    }
}

/// A clip with a chosen motion class (pattern still random), for fixtures
/// with a held-out motion.
pub fn motion_clip_of_kind(
    motion: MotionKind,
    seed: u64,
    frames: usize,
    h: usize,
    w: usize,
    c: usize,
) -> MotionClipSpec {
    let mut r = rng::substream(seed, "motion-clip");
    let kind = PatternKind::ALL[r.gen_range(0..PatternKind::ALL.len())];
    let p = PatternParams::sample(kind, c, &mut r);
    MotionClipSpec {
        video: render_clip(&p, motion, frames, h, w, c),
        caption: format!("a {} {}", kind.word(), motion.word()),
        motion,
    }
}

/// Captioned clips covering random pattern/motion combinations, for
/// pretraining the toy backbone.
pub fn pretrain_items(
    count: usize,
    frames: usize,
    h: usize,
    w: usize,
    c: usize,
    seed: u64,
) -> Vec<(LatentVideo, String)> {
    pretrain_items_excluding(count, frames, h, w, c, seed, None, None)
}

/// Pretraining corpus that skips one pattern class and one motion class so
/// fixtures can customize something the backbone has never seen.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_items_excluding(
    count: usize,
    frames: usize,
    h: usize,
    w: usize,
    c: usize,
    seed: u64,
    exclude_pattern: Option<PatternKind>,
    exclude_motion: Option<MotionKind>,
) -> Vec<(LatentVideo, String)> {
    let mut r = rng::substream(seed, "pretrain-corpus");
    let patterns: Vec<PatternKind> = PatternKind::ALL
        .into_iter()
        .filter(|k| Some(*k) != exclude_pattern)
        .collect();
    let motions: Vec<MotionKind> = MotionKind::ALL
        .into_iter()
        .filter(|m| Some(*m) != exclude_motion)
        .collect();
    (0..count)
        .map(|_| {
            let kind = patterns[r.gen_range(0..patterns.len())];
            let motion = motions[r.gen_range(0..motions.len())];
            let p = PatternParams::sample(kind, c, &mut r);
            let clip = render_clip(&p, motion, frames, h, w, c);
            (clip, format!("a {} {}", kind.word(), motion.word()))
        })
        .collect()
}

/// Discrete attribute grid used by the training fixtures: a pattern class
/// combined with a named color (channel weights) and a named position
/// (pattern center) renders deterministically, and every attribute has a
/// vocabulary word, so captions fully describe a clip. Customization
/// fixtures hold one combination out of pretraining and learn it as a new
/// subject.
pub mod grid {
    use super::*;

    pub const COLORS: [(&str, [f64; 4]); 5] = [
        ("red", [1.2, 0.2, 0.2, 0.6]),
        ("green", [0.2, 1.2, 0.2, 0.6]),
        ("blue", [0.2, 0.2, 1.2, 0.6]),
        ("yellow", [1.1, 1.1, 0.15, 0.6]),
        ("white", [1.0, 1.0, 1.0, 1.0]),
    ];

    pub const POSITIONS: [(&str, (f64, f64)); 4] = [
        ("left", (0.26, 0.5)),
        ("right", (0.74, 0.5)),
        ("up", (0.5, 0.26)),
        ("down", (0.5, 0.74)),
    ];

    /// Size words scale the pattern's feature frequency.
    pub const SIZES: [(&str, f64); 3] = [("small", 1.55), ("big", 1.0), ("large", 0.68)];

    /// One cell of the attribute grid.
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct Combo {
        pub kind: PatternKind,
        pub color: usize,
        pub position: usize,
        pub size: usize,
    }

    impl Combo {
        pub fn words(&self) -> (&'static str, &'static str, &'static str, &'static str) {
            (
                SIZES[self.size].0,
                COLORS[self.color].0,
                self.kind.word(),
                POSITIONS[self.position].0,
            )
        }

        /// Canonical pattern parameters: deterministic in the combo alone.
        pub fn params(&self, channels: usize) -> PatternParams {
            let kind_idx = PatternKind::ALL.iter().position(|k| *k == self.kind).unwrap() as f64;
            let (cx, cy) = POSITIONS[self.position].1;
            PatternParams {
                kind: self.kind,
                cx,
                cy,
                phase: 0.9 * kind_idx,
                freq: 2.0 * SIZES[self.size].1,
                angle: 0.55 * kind_idx,
                amp: 1.0,
                chan: COLORS[self.color].1[..channels].to_vec(),
            }
        }
    }

    /// "a small red blob left drifting"
    pub fn video_caption(combo: &Combo, motion: MotionKind) -> String {
        let (size, color, kind, position) = combo.words();
        format!("a {size} {color} {kind} {position} {}", motion.word())
    }

    /// "a photo of a small red blob left"
    pub fn image_caption(combo: &Combo) -> String {
        let (size, color, kind, position) = combo.words();
        format!("a photo of a {size} {color} {kind} {position}")
    }

    /// Captioned pretraining corpus over the grid: `video_count` clips and
    /// `image_count` single-frame photos, skipping the held-out combo and
    /// motion class entirely.
    #[allow(clippy::too_many_arguments)]
    pub fn corpus(
        video_count: usize,
        image_count: usize,
        frames: usize,
        h: usize,
        w: usize,
        c: usize,
        seed: u64,
        exclude_combo: Option<Combo>,
        exclude_motion: Option<MotionKind>,
    ) -> Vec<(LatentVideo, String)> {
        let mut r = rng::substream(seed, "grid-corpus");
        let motions: Vec<MotionKind> = MotionKind::ALL
            .into_iter()
            .filter(|m| Some(*m) != exclude_motion)
            .collect();
        let mut combos = Vec::new();
        for kind in PatternKind::ALL {
            for color in 0..COLORS.len() {
                for position in 0..POSITIONS.len() {
                    for size in 0..SIZES.len() {
                        let combo = Combo { kind, color, position, size };
                        if Some(combo) != exclude_combo {
                            combos.push(combo);
                        }
                    }
                }
            }
        }
        let mut items = Vec::with_capacity(video_count + image_count);
        for _ in 0..video_count {
            let combo = combos[r.gen_range(0..combos.len())];
            let motion = motions[r.gen_range(0..motions.len())];
            let clip = render_clip(&combo.params(c), motion, frames, h, w, c);
            items.push((clip, video_caption(&combo, motion)));
        }
        for _ in 0..image_count {
            let combo = combos[r.gen_range(0..combos.len())];
            let frame = render_frame(&combo.params(c), h, w, c);
            let video = LatentVideo::from_data(frame, [1, 1, h, w, c]).expect("finite frame");
            items.push((video, image_caption(&combo)));
        }
        items
    }

    /// Jittered single-frame views of one combo, as a subject dataset.
    pub fn subject_views(combo: &Combo, count: usize, h: usize, w: usize, c: usize, seed: u64) -> Vec<LatentVideo> {
        let mut r = rng::substream(seed, "grid-subject");
        (0..count)
            .map(|_| {
                let mut p = combo.params(c);
                p.cx = (p.cx + 0.03 * (r.gen::<f64>() - 0.5)).clamp(0.05, 0.95);
                p.cy = (p.cy + 0.03 * (r.gen::<f64>() - 0.5)).clamp(0.05, 0.95);
                p.phase += 0.1 * (r.gen::<f64>() - 0.5);
                let frame = render_frame(&p, h, w, c);
                LatentVideo::from_data(frame, [1, 1, h, w, c]).expect("finite frame")
            })
            .collect()
    }

    /// One clip of a chosen combo and motion, with its caption.
    pub fn clip(combo: &Combo, motion: MotionKind, frames: usize, h: usize, w: usize, c: usize) -> (LatentVideo, String) {
        (
            render_clip(&combo.params(c), motion, frames, h, w, c),
            video_caption(combo, motion),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let spec = subject_spec(1, 2);
        let a = subject_images(&spec, 4, 6, 6, 2, 2);
        let b = subject_images(&spec, 4, 6, 6, 2, 2);
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
    }

    #[test]
    fn motion_clips_have_temporal_variation() {
        let clip = motion_clip(3, 6, 6, 6, 2);
        assert_eq!(clip.video.dims(), [1, 6, 6, 6, 2]);
        let f0 = clip.video.frame_data(0, 0);
        let f3 = clip.video.frame_data(0, 3);
        let diff: f64 = f0.iter().zip(&f3).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.1, "frames should differ under motion, got {diff}");
        assert!(clip.caption.starts_with("a "));
    }

    #[test]
    fn pattern_words_are_in_default_vocab() {
        for k in PatternKind::ALL {
            assert!(crate::encoders::DEFAULT_VOCAB.contains(&k.word()), "{}", k.word());
        }
        for m in MotionKind::ALL {
            assert!(crate::encoders::DEFAULT_VOCAB.contains(&m.word()), "{}", m.word());
        }
    }

    #[test]
    fn grid_words_are_in_default_vocab() {
        for (w, _) in grid::COLORS {
            assert!(crate::encoders::DEFAULT_VOCAB.contains(&w), "{w}");
        }
        for (w, _) in grid::POSITIONS {
            assert!(crate::encoders::DEFAULT_VOCAB.contains(&w), "{w}");
        }
        for (w, _) in grid::SIZES {
            assert!(crate::encoders::DEFAULT_VOCAB.contains(&w), "{w}");
        }
        let combo = grid::Combo { kind: PatternKind::Ring, color: 0, position: 1, size: 1 };
        let caption = grid::video_caption(&combo, MotionKind::Sliding);
        assert_eq!(caption, "a big red ring right sliding");
        assert_eq!(grid::image_caption(&combo), "a photo of a big red ring right");
    }

    #[test]
    fn grid_corpus_excludes_heldout() {
        let held = grid::Combo { kind: PatternKind::Ring, color: 2, position: 3, size: 0 };
        let items = grid::corpus(40, 20, 4, 6, 6, 3, 9, Some(held), Some(MotionKind::Spinning));
        assert_eq!(items.len(), 60);
        let (size, color, kind, position) = held.words();
        let held_caption_part = format!("{size} {color} {kind} {position}");
        for (_, caption) in &items {
            assert!(!caption.contains(&held_caption_part), "held-out combo leaked: {caption}");
            assert!(!caption.contains("spinning"), "held-out motion leaked: {caption}");
        }
    }

    #[test]
    fn grid_rendering_is_canonical() {
        let combo = grid::Combo { kind: PatternKind::Blob, color: 1, position: 0, size: 2 };
        let a = combo.params(3);
        let b = combo.params(3);
        assert_eq!(render_frame(&a, 6, 6, 3), render_frame(&b, 6, 6, 3));
        // Sizes render visibly differently.
        let small = grid::Combo { size: 0, ..combo };
        assert_ne!(render_frame(&small.params(3), 6, 6, 3), render_frame(&a, 6, 6, 3));
    }

    #[test]
    fn subject_views_are_similar_but_not_identical() {
        let spec = subject_spec(7, 2);
        let imgs = subject_images(&spec, 2, 8, 8, 2, 8);
        let a = imgs[0].to_vec();
        let b = imgs[1].to_vec();
        assert_ne!(a, b);
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dist < norm, "views of one subject should stay close");
    }
}
