//! Frozen text and image encoders.
//!
//! Both are small randomly-initialized networks seeded from the config and
//! kept frozen: the text encoder provides a deterministic, differentiable
//! path from token embeddings into cross-attention; the image encoder turns
//! one video frame into the appearance embedding used by motion adapters.
//! The only parameter that ever trains is a single pseudo-word row of the
//! vocabulary table.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attention_core, sinusoidal_features, Conv2d, LayerNorm, Linear, NamedParams};
use crate::rng;
use crate::tensor::{no_grad, Tensor};

/// Reserved token for out-of-vocabulary words.
pub const UNK: &str = "<unk>";
/// Reserved padding token.
pub const PAD: &str = "<pad>";
/// Reserved token standing in for the empty prompt (CFG null condition).
pub const NULL: &str = "<null>";

/// Built-in vocabulary used when no vocabulary file is given.
pub const DEFAULT_VOCAB: &[&str] = &[
    UNK, PAD, NULL, "a", "an", "the", "photo", "of", "and", "on", "in", "at", "with", "is", "to",
    "dog", "cat", "bear", "bird", "fish", "horse", "rabbit", "robot", "person", "toy", "ball",
    "car", "boat", "plane", "duck", "monkey", "panda", "stripe", "checker", "blob", "ring",
    "gradient", "wave", "dot", "square", "circle", "cross", "corner", "edge", "blotch",
    "running", "walking", "jumping", "swimming", "dancing", "spinning", "rolling", "flying",
    "riding", "playing", "sitting", "standing", "sliding", "bouncing", "drifting", "shifting",
    "rotating", "pulsing", "moving", "left", "right", "up", "down", "fast", "slow",
    "beach", "grass", "snow", "city", "forest", "sky", "water", "street", "room", "field",
    "red", "blue", "green", "yellow", "white", "black", "orange", "purple", "bright", "dark",
    "small", "big", "tiny", "large", "pattern", "texture", "scene", "video", "image", "style",
];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    /// Width of token embeddings and of the encoder output fed to
    /// cross-attention.
    pub text_dim: usize,
    /// Fixed prompt length in tokens (shorter prompts are padded).
    pub text_tokens: usize,
    /// Width of the appearance embedding.
    pub cond_dim: usize,
    /// Seed controlling every frozen weight in both encoders.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { text_dim: 32, text_tokens: 8, cond_dim: 32, seed: 60 }
    }
}

/// Token embedding table with per-row freeze flags. At most one row (the
/// pseudo-word being learned) is ever unfrozen.
pub struct VocabularyTable {
    tokens: Vec<String>,
    rows: Tensor,
    frozen: Vec<bool>,
    text_dim: usize,
}

impl VocabularyTable {
    pub fn new(tokens: &[&str], text_dim: usize, seed: u64) -> VocabularyTable {
        let mut r = rng::substream(seed, "vocab");
        // Unit-scale rows keep token content visible next to the position
        // encoding inside the frozen mixer.
        let data = rng::gaussian_vec(&mut r, tokens.len() * text_dim, 1.0);
        VocabularyTable {
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            rows: Tensor::param(data, &[tokens.len(), text_dim]),
            frozen: vec![true; tokens.len()],
            text_dim,
        }
    }

    /// Parse a vocabulary file: one token per line, line number = id.
    pub fn from_vocab_text(text: &str, text_dim: usize, seed: u64) -> Result<VocabularyTable> {
        let tokens: Vec<&str> = text.lines().map(|l| l.trim()).filter(|l| !l.is_empty()).collect();
        if tokens.is_empty() {
            return Err(Error::invalid("vocabulary file has no tokens"));
        }
        Ok(VocabularyTable::new(&tokens, text_dim, seed))
    }

    /// Rebuild a table from explicit rows (checkpoint loading).
    pub fn from_rows(tokens: Vec<String>, rows: Tensor, frozen: Vec<bool>) -> Result<VocabularyTable> {
        if rows.shape().len() != 2 || rows.shape()[0] != tokens.len() || frozen.len() != tokens.len() {
            return Err(Error::invalid("vocabulary rows/tokens/mask size mismatch"));
        }
        let text_dim = rows.shape()[1];
        Ok(VocabularyTable { tokens, rows, frozen, text_dim })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn frozen_mask(&self) -> &[bool] {
        &self.frozen
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn unfrozen_row(&self) -> Option<usize> {
        self.frozen.iter().position(|f| !f)
    }

    pub fn freeze_all(&mut self) {
        for f in &mut self.frozen {
            *f = true;
        }
    }

    pub fn row_data(&self, id: usize) -> Vec<f64> {
        self.rows.with_data(|d| d[id * self.text_dim..(id + 1) * self.text_dim].to_vec())
    }

    pub fn set_row(&mut self, id: usize, values: &[f64]) {
        assert_eq!(values.len(), self.text_dim);
        self.rows
            .with_data_mut(|d| d[id * self.text_dim..(id + 1) * self.text_dim].copy_from_slice(values));
    }

    /// Append one unfrozen row for `word`, copied from `init_token`'s row.
    /// Fails if another row is already unfrozen or the word exists.
    pub fn add_pseudo_word(&mut self, word: &str, init_token: &str) -> Result<usize> {
        if self.unfrozen_row().is_some() {
            return Err(Error::invalid("another pseudo-word is already unfrozen; freeze_all first"));
        }
        if self.token_id(word).is_some() {
            return Err(Error::invalid(format!("token {word:?} already in vocabulary")));
        }
        let init_id = self
            .token_id(init_token)
            .ok_or_else(|| Error::invalid(format!("init token {init_token:?} not in vocabulary")))?;
        let init_row = self.row_data(init_id);
        let mut data = self.rows.to_vec();
        data.extend_from_slice(&init_row);
        let new_id = self.tokens.len();
        self.tokens.push(word.to_string());
        self.frozen.push(false);
        self.rows = Tensor::param(data, &[self.tokens.len(), self.text_dim]);
        Ok(new_id)
    }
}

/// Whitespace + lowercase tokenizer over a fixed vocabulary. Unknown words
/// map to `<unk>`, except pseudo-words (containing `*`), which must resolve.
pub struct Tokenizer;

impl Tokenizer {
    pub fn encode(table: &VocabularyTable, prompt: &str, max_tokens: usize) -> Result<Vec<usize>> {
        let unk = table.token_id(UNK).ok_or_else(|| Error::invalid("vocabulary lacks <unk>"))?;
        let pad = table.token_id(PAD).ok_or_else(|| Error::invalid("vocabulary lacks <pad>"))?;
        let mut ids = Vec::with_capacity(max_tokens);
        for word in prompt.split_whitespace() {
            let lower = word.to_lowercase();
            match table.token_id(&lower) {
                Some(id) => ids.push(id),
                None if lower.contains('*') => {
                    return Err(Error::UnknownPseudoWord(lower));
                }
                None => ids.push(unk),
            }
            if ids.len() == max_tokens {
                break;
            }
        }
        while ids.len() < max_tokens {
            ids.push(pad);
        }
        Ok(ids)
    }

    /// The learned-free empty-prompt sequence used as the CFG null branch.
    pub fn null_sequence(table: &VocabularyTable, max_tokens: usize) -> Result<Vec<usize>> {
        let null = table.token_id(NULL).ok_or_else(|| Error::invalid("vocabulary lacks <null>"))?;
        let pad = table.token_id(PAD).ok_or_else(|| Error::invalid("vocabulary lacks <pad>"))?;
        let mut ids = vec![null];
        while ids.len() < max_tokens {
            ids.push(pad);
        }
        Ok(ids)
    }
}

/// Encoded prompt batch: embeddings `(B, tokens, text_dim)` plus the token
/// ids they derive from.
pub struct TextSequence {
    pub embeddings: Tensor,
    pub token_ids: Vec<Vec<usize>>,
}

impl TextSequence {
    pub fn batch(&self) -> usize {
        self.embeddings.shape()[0]
    }
}

/// Appearance embedding `e`, shaped `(B, 1, cond_dim)`.
#[derive(Clone, Debug)]
pub struct AppearanceEmbedding {
    pub e: Tensor,
}

impl AppearanceEmbedding {
    pub fn new(e: Tensor) -> Result<AppearanceEmbedding> {
        if e.shape().len() != 3 || e.shape()[1] != 1 {
            return Err(Error::ShapeMismatch {
                context: "AppearanceEmbedding",
                expected: vec![0, 1, 0],
                got: e.shape().to_vec(),
            });
        }
        if !e.all_finite() {
            return Err(Error::invalid("appearance embedding must be finite"));
        }
        Ok(AppearanceEmbedding { e })
    }

    pub fn zeros(batch: usize, cond_dim: usize) -> AppearanceEmbedding {
        AppearanceEmbedding { e: Tensor::zeros(&[batch, 1, cond_dim]) }
    }

    pub fn cond_dim(&self) -> usize {
        self.e.shape()[2]
    }

    pub fn batch(&self) -> usize {
        self.e.shape()[0]
    }
}

/// Frozen text encoder: embedding lookup, sinusoidal positions, one frozen
/// attention block, then a fixed random orthogonal projection.
pub struct TextEncoder {
    cfg: EncoderConfig,
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    proj: Tensor,
    heads: usize,
}

impl TextEncoder {
    pub fn new(cfg: &EncoderConfig) -> TextEncoder {
        let d = cfg.text_dim;
        let mut r = rng::substream(cfg.seed, "text-encoder");
        let enc = TextEncoder {
            cfg: cfg.clone(),
            ln1: LayerNorm::new(d),
            wq: Linear::new(d, d, false, &mut r),
            wk: Linear::new(d, d, false, &mut r),
            wv: Linear::new(d, d, false, &mut r),
            wo: Linear::new(d, d, false, &mut r),
            ln2: LayerNorm::new(d),
            ffn1: Linear::new(d, 2 * d, false, &mut r),
            ffn2: Linear::new(2 * d, d, false, &mut r),
            proj: Tensor::param(random_orthogonal(d, &mut r), &[d, d]),
            heads: if d % 4 == 0 { 4 } else { 1 },
        };
        for (_, p) in enc.params() {
            p.set_trainable(false);
        }
        enc
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> NamedParams {
        let mut p = Vec::new();
        p.extend(self.ln1.params("text.ln1"));
        p.extend(self.wq.params("text.wq"));
        p.extend(self.wk.params("text.wk"));
        p.extend(self.wv.params("text.wv"));
        p.extend(self.wo.params("text.wo"));
        p.extend(self.ln2.params("text.ln2"));
        p.extend(self.ffn1.params("text.ffn1"));
        p.extend(self.ffn2.params("text.ffn2"));
        p.push(("text.proj".to_string(), self.proj.clone()));
        p
    }

    /// Encode a batch of token id rows. Differentiable with respect to any
    /// unfrozen vocabulary row; every encoder weight is frozen.
    pub fn encode(&self, table: &VocabularyTable, ids: &[Vec<usize>]) -> Result<TextSequence> {
        let d = self.cfg.text_dim;
        let t = self.cfg.text_tokens;
        if table.text_dim() != d {
            return Err(Error::invalid("vocabulary width does not match text encoder"));
        }
        let mut flat = Vec::with_capacity(ids.len() * t);
        for row in ids {
            if row.len() != t {
                return Err(Error::invalid(format!(
                    "token row length {} != configured {}",
                    row.len(),
                    t
                )));
            }
            for &id in row {
                if id >= table.len() {
                    return Err(Error::OutOfVocab(id));
                }
                flat.push(id);
            }
        }
        let b = ids.len();
        let emb = table.rows().gather_rows(&flat).reshape(&[b, t, d]);
        let positions: Vec<f64> = (0..t).map(|p| p as f64).collect();
        let pos = Tensor::new(sinusoidal_features(&positions, d), &[1, t, d]).scale(0.25);
        let x = emb.add_bc(&pos);
        let h = self.ln1.forward(&x);
        let attn = attention_core(
            &self.wq.forward3(&h),
            &self.wk.forward3(&h),
            &self.wv.forward3(&h),
            self.heads,
        );
        let x = x.add(&self.wo.forward3(&attn));
        let h = self.ln2.forward(&x);
        let x = x.add(&self.ffn2.forward3(&self.ffn1.forward3(&h).gelu()));
        let out = x.reshape(&[b * t, d]).matmul(&self.proj).reshape(&[b, t, d]);
        Ok(TextSequence { embeddings: out, token_ids: ids.to_vec() })
    }

    /// Convenience: tokenize then encode a batch of prompts.
    pub fn encode_prompts(&self, table: &VocabularyTable, prompts: &[&str]) -> Result<TextSequence> {
        let ids: Result<Vec<Vec<usize>>> = prompts
            .iter()
            .map(|p| Tokenizer::encode(table, p, self.cfg.text_tokens))
            .collect();
        self.encode(table, &ids?)
    }

    /// Encode the null condition replicated over a batch.
    pub fn encode_null(&self, table: &VocabularyTable, batch: usize) -> Result<TextSequence> {
        let row = Tokenizer::null_sequence(table, self.cfg.text_tokens)?;
        let ids = vec![row; batch];
        no_grad(|| self.encode(table, &ids))
    }
}

/// Frozen image encoder: three stride-2 convolutions and a global average
/// pool down to `cond_dim`.
pub struct ImageEncoder {
    cfg: EncoderConfig,
    in_hw: (usize, usize),
    in_channels: usize,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
}

impl ImageEncoder {
    pub fn new(cfg: &EncoderConfig, in_hw: (usize, usize), in_channels: usize) -> ImageEncoder {
        let mut r = rng::substream(cfg.seed, "image-encoder");
        let mid = cfg.cond_dim.max(8);
        let enc = ImageEncoder {
            cfg: cfg.clone(),
            in_hw,
            in_channels,
            conv1: Conv2d::new(in_channels, mid / 2, 3, 2, 1, &mut r),
            conv2: Conv2d::new(mid / 2, mid, 3, 2, 1, &mut r),
            conv3: Conv2d::new(mid, cfg.cond_dim, 3, 2, 1, &mut r),
        };
        for (_, p) in enc.params() {
            p.set_trainable(false);
        }
        enc
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.in_hw
    }

    pub fn params(&self) -> NamedParams {
        let mut p = Vec::new();
        p.extend(self.conv1.params("img.conv1"));
        p.extend(self.conv2.params("img.conv2"));
        p.extend(self.conv3.params("img.conv3"));
        p
    }

    /// Encode a single frame given as `(H, W, C)` data.
    pub fn encode_frame(&self, frame: &[f64], h: usize, w: usize, c: usize) -> Result<AppearanceEmbedding> {
        self.encode_frames(&[frame.to_vec()], h, w, c)
    }

    /// Encode a batch of frames, one appearance embedding per sample.
    pub fn encode_frames(
        &self,
        frames: &[Vec<f64>],
        h: usize,
        w: usize,
        c: usize,
    ) -> Result<AppearanceEmbedding> {
        if (h, w) != self.in_hw || c != self.in_channels {
            return Err(Error::ShapeMismatch {
                context: "encode_image",
                expected: vec![self.in_hw.0, self.in_hw.1, self.in_channels],
                got: vec![h, w, c],
            });
        }
        let b = frames.len();
        let mut data = Vec::with_capacity(b * h * w * c);
        for f in frames {
            if f.len() != h * w * c {
                return Err(Error::invalid("frame size mismatch"));
            }
            data.extend_from_slice(f);
        }
        no_grad(|| {
            // (B, H, W, C) -> (B, C, H, W)
            let x = Tensor::new(data, &[b, h, w, c]).permute(&[0, 3, 1, 2]);
            let x = self.conv1.forward(&x).gelu();
            let x = self.conv2.forward(&x).gelu();
            let x = self.conv3.forward(&x);
            // Global average pool over the remaining spatial grid.
            let s = x.shape().to_vec();
            let (ho, wo) = (s[2], s[3]);
            let pooled = x.reshape(&[b, self.cfg.cond_dim, ho * wo]).permute(&[0, 2, 1]);
            let mut out = vec![0.0; b * self.cfg.cond_dim];
            pooled.with_data(|d| {
                for bi in 0..b {
                    for p in 0..ho * wo {
                        for ch in 0..self.cfg.cond_dim {
                            out[bi * self.cfg.cond_dim + ch] +=
                                d[(bi * ho * wo + p) * self.cfg.cond_dim + ch] / (ho * wo) as f64;
                        }
                    }
                }
            });
            AppearanceEmbedding::new(Tensor::new(out, &[b, 1, self.cfg.cond_dim]))
        })
    }
}

/// Random orthogonal matrix via Gram-Schmidt on a seeded Gaussian.
fn random_orthogonal(d: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let mut m = rng::normal_vec(r, d * d);
    for i in 0..d {
        for j in 0..i {
            let dot: f64 = (0..d).map(|k| m[i * d + k] * m[j * d + k]).sum();
            for k in 0..d {
                m[i * d + k] -= dot * m[j * d + k];
            }
        }
        let norm: f64 = (0..d).map(|k| m[i * d + k] * m[i * d + k]).sum::<f64>().sqrt();
        for k in 0..d {
            m[i * d + k] /= norm;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::reconstruction_loss;

    fn setup() -> (EncoderConfig, VocabularyTable, TextEncoder) {
        let cfg = EncoderConfig { text_dim: 16, text_tokens: 6, cond_dim: 8, seed: 99 };
        let table = VocabularyTable::new(DEFAULT_VOCAB, cfg.text_dim, cfg.seed);
        let enc = TextEncoder::new(&cfg);
        (cfg, table, enc)
    }

    #[test]
    fn encode_is_deterministic() {
        let (_, table, enc) = setup();
        let a = enc.encode_prompts(&table, &["a photo of a dog"]).unwrap();
        let b = enc.encode_prompts(&table, &["a photo of a dog"]).unwrap();
        assert_eq!(a.embeddings.to_vec(), b.embeddings.to_vec());
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let (_, table, _) = setup();
        let ids = Tokenizer::encode(&table, "a zzzqqq dog", 6).unwrap();
        assert_eq!(ids[1], table.token_id(UNK).unwrap());
        assert_eq!(ids[5], table.token_id(PAD).unwrap());
    }

    #[test]
    fn pseudo_word_must_resolve() {
        let (_, table, _) = setup();
        let err = Tokenizer::encode(&table, "a photo of a s* dog", 6);
        assert!(matches!(err, Err(Error::UnknownPseudoWord(_))));
    }

    #[test]
    fn changing_one_frozen_token_changes_embeddings() {
        let (_, table, enc) = setup();
        let a = enc.encode_prompts(&table, &["a photo of a dog"]).unwrap();
        let b = enc.encode_prompts(&table, &["a photo of a cat"]).unwrap();
        // The attention block makes the receptive field global, so the
        // changed position differs and other positions are allowed to.
        let d = enc.config().text_dim;
        let pos4_a = &a.embeddings.to_vec()[4 * d..5 * d];
        let pos4_b = &b.embeddings.to_vec()[4 * d..5 * d];
        assert!(pos4_a.iter().zip(pos4_b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn add_pseudo_word_copies_init_row() {
        let (_, mut table, _) = setup();
        let before_len = table.len();
        let dog = table.token_id("dog").unwrap();
        let id = table.add_pseudo_word("s*", "dog").unwrap();
        assert_eq!(table.len(), before_len + 1);
        assert_eq!(table.row_data(id), table.row_data(dog));
        assert_eq!(table.unfrozen_row(), Some(id));
        let frozen_count = table.frozen_mask().iter().filter(|f| **f).count();
        assert_eq!(frozen_count, table.len() - 1);
        // A second unfrozen pseudo-word is rejected.
        assert!(table.add_pseudo_word("t*", "cat").is_err());
        assert!(table.add_pseudo_word("dog", "cat").is_err());
    }

    #[test]
    fn pseudo_row_grad_nonzero_only_when_present() {
        let (_, mut table, enc) = setup();
        let id = table.add_pseudo_word("s*", "dog").unwrap();
        let with = enc.encode_prompts(&table, &["a photo of a s* dog"]).unwrap();
        let loss = reconstruction_loss(&with.embeddings, &Tensor::zeros(&[1, 6, 16])).unwrap();
        loss.backward();
        let grad = table.rows().grad().expect("grad on table");
        let d = table.text_dim();
        let row_grad = &grad[id * d..(id + 1) * d];
        assert!(row_grad.iter().any(|g| g.abs() > 0.0));

        table.rows().zero_grad();
        let without = enc.encode_prompts(&table, &["a photo of a dog"]).unwrap();
        let loss = reconstruction_loss(&without.embeddings, &Tensor::zeros(&[1, 6, 16])).unwrap();
        loss.backward();
        let grad = table.rows().grad().expect("grad on table");
        let row_grad = &grad[id * d..(id + 1) * d];
        assert!(row_grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn image_encoder_deterministic_and_distinct() {
        let cfg = EncoderConfig { text_dim: 16, text_tokens: 6, cond_dim: 8, seed: 99 };
        let enc = ImageEncoder::new(&cfg, (8, 8), 2);
        let zero = vec![0.0; 8 * 8 * 2];
        let a = enc.encode_frame(&zero, 8, 8, 2).unwrap();
        let b = enc.encode_frame(&zero, 8, 8, 2).unwrap();
        assert_eq!(a.e.to_vec(), b.e.to_vec());
        assert!(a.e.all_finite());

        let f1 = rng::normal_vec(&mut rng::seeded(1), 8 * 8 * 2);
        let f2 = rng::normal_vec(&mut rng::seeded(2), 8 * 8 * 2);
        let e1 = enc.encode_frame(&f1, 8, 8, 2).unwrap().e.to_vec();
        let e2 = enc.encode_frame(&f2, 8, 8, 2).unwrap().e.to_vec();
        let dot: f64 = e1.iter().zip(&e2).map(|(x, y)| x * y).sum();
        let n1: f64 = e1.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n2: f64 = e2.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (n1 * n2) < 1.0 - 1e-9, "distinct frames should embed differently");

        assert!(enc.encode_frame(&zero, 4, 4, 2).is_err());
    }

    #[test]
    fn null_sequence_is_fixed() {
        let (_, table, enc) = setup();
        let n1 = enc.encode_null(&table, 2).unwrap();
        let n2 = enc.encode_null(&table, 2).unwrap();
        assert_eq!(n1.embeddings.to_vec(), n2.embeddings.to_vec());
        assert_eq!(n1.token_ids[0][0], table.token_id(NULL).unwrap());
    }

    #[test]
    fn orthogonal_projection_is_orthogonal() {
        let mut r = rng::seeded(5);
        let d = 8;
        let m = random_orthogonal(d, &mut r);
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| m[i * d + k] * m[j * d + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
    }
}
