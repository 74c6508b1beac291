//! Shared neural building blocks: linear layers, im2col convolutions,
//! layer norm, attention core and sinusoidal features.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::rng;
use crate::tensor::Tensor;

/// Named parameter handle used for checkpointing and freeze control.
pub type NamedParams = Vec<(String, Tensor)>;

fn prefixed(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Dense layer `(d_in, d_out)`; weights init N(0, 1/sqrt(d_in)).
pub struct Linear {
    pub w: Tensor,
    pub bias: Option<Tensor>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Linear {
        let std = 1.0 / (d_in as f64).sqrt();
        let w = Tensor::param(rng::gaussian_vec(rng, d_in * d_out, std), &[d_in, d_out]);
        let bias = bias.then(|| Tensor::param(vec![0.0; d_out], &[d_out]));
        Linear { w, bias, d_in, d_out }
    }

    /// `(rows, d_in) -> (rows, d_out)`.
    pub fn forward2(&self, x: &Tensor) -> Tensor {
        let y = x.matmul(&self.w);
        match &self.bias {
            Some(b) => y.add_bc(&b.reshape(&[1, self.d_out])),
            None => y,
        }
    }

    /// `(n, t, d_in) -> (n, t, d_out)`.
    pub fn forward3(&self, x: &Tensor) -> Tensor {
        let (n, t) = (x.shape()[0], x.shape()[1]);
        self.forward2(&x.reshape(&[n * t, self.d_in])).reshape(&[n, t, self.d_out])
    }

    pub fn params(&self, prefix: &str) -> NamedParams {
        let mut p = vec![(prefixed(prefix, "w"), self.w.clone())];
        if let Some(b) = &self.bias {
            p.push((prefixed(prefix, "b"), b.clone()));
        }
        p
    }
}

/// 2-D convolution via an im2col gather plus matmul. Weight layout is
/// `(c_in * kh * kw, c_out)`.
pub struct Conv2d {
    pub w: Tensor,
    pub bias: Tensor,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Conv2d {
        let fan_in = c_in * k * k;
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::param(rng::gaussian_vec(rng, fan_in * c_out, std), &[fan_in, c_out]);
        let bias = Tensor::param(vec![0.0; c_out], &[c_out]);
        Conv2d { w, bias, c_in, c_out, k, stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// `(n, c_in, h, w) -> (n, c_out, ho, wo)`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv2d expects NCHW");
        assert_eq!(s[1], self.c_in, "conv2d channel mismatch");
        let (n, h, w) = (s[0], s[2], s[3]);
        let (ho, wo) = self.out_hw(h, w);
        let map = im2col_map_2d(n, self.c_in, h, w, self.k, self.stride, self.pad);
        let cols = x.gather_map(map, &[n * ho * wo, self.c_in * self.k * self.k]);
        let y = cols.matmul(&self.w).add_bc(&self.bias.reshape(&[1, self.c_out]));
        y.reshape(&[n, ho, wo, self.c_out]).permute(&[0, 3, 1, 2])
    }

    pub fn params(&self, prefix: &str) -> NamedParams {
        vec![
            (prefixed(prefix, "w"), self.w.clone()),
            (prefixed(prefix, "b"), self.bias.clone()),
        ]
    }
}

/// 1-D convolution over the last axis of `(n, c_in, len)`.
pub struct Conv1d {
    pub w: Tensor,
    pub bias: Tensor,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(c_in: usize, c_out: usize, k: usize, pad: usize, rng: &mut ChaCha8Rng) -> Conv1d {
        let fan_in = c_in * k;
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::param(rng::gaussian_vec(rng, fan_in * c_out, std), &[fan_in, c_out]);
        let bias = Tensor::param(vec![0.0; c_out], &[c_out]);
        Conv1d { w, bias, c_in, c_out, k, pad }
    }

    /// `(n, c_in, len) -> (n, c_out, len)` (stride 1, same padding expected).
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let s = x.shape();
        assert_eq!(s.len(), 3, "conv1d expects (n, c, len)");
        assert_eq!(s[1], self.c_in, "conv1d channel mismatch");
        let (n, len) = (s[0], s[2]);
        let lo = len + 2 * self.pad - self.k + 1;
        let map = im2col_map_1d(n, self.c_in, len, self.k, self.pad);
        let cols = x.gather_map(map, &[n * lo, self.c_in * self.k]);
        let y = cols.matmul(&self.w).add_bc(&self.bias.reshape(&[1, self.c_out]));
        y.reshape(&[n, lo, self.c_out]).permute(&[0, 2, 1])
    }

    pub fn params(&self, prefix: &str) -> NamedParams {
        vec![
            (prefixed(prefix, "w"), self.w.clone()),
            (prefixed(prefix, "b"), self.bias.clone()),
        ]
    }
}

/// Layer norm over the trailing feature dimension.
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: Tensor::param(vec![1.0; dim], &[dim]),
            beta: Tensor::param(vec![0.0; dim], &[dim]),
            dim,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gamma, &self.beta, 1e-5)
    }

    pub fn params(&self, prefix: &str) -> NamedParams {
        vec![
            (prefixed(prefix, "gamma"), self.gamma.clone()),
            (prefixed(prefix, "beta"), self.beta.clone()),
        ]
    }
}

/// Scaled dot-product attention over pre-projected q/k/v.
///
/// `q: (n, t, d)`, `k/v: (n, s, d)`; `d` must divide into `heads`.
pub fn attention_core(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
    let (n, t, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let s = k.shape()[1];
    assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let split = |x: &Tensor, len: usize| {
        x.reshape(&[n, len, heads, dh]).permute(&[0, 2, 1, 3]).reshape(&[n * heads, len, dh])
    };
    let qh = split(q, t);
    let kh = split(k, s);
    let vh = split(v, s);
    let logits = qh.bmm(&kh.permute(&[0, 2, 1])).scale(1.0 / (dh as f64).sqrt());
    let attn = logits.softmax_last();
    let out = attn.bmm(&vh);
    out.reshape(&[n, heads, t, dh]).permute(&[0, 2, 1, 3]).reshape(&[n, t, d])
}

/// Sinusoidal features for a list of positions (timesteps or token slots).
pub fn sinusoidal_features(positions: &[f64], dim: usize) -> Vec<f64> {
    assert!(dim % 2 == 0, "sinusoidal dim must be even");
    let half = dim / 2;
    let mut out = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            out.push((p * freq).sin());
        }
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            out.push((p * freq).cos());
        }
    }
    out
}

fn im2col_map_2d(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Rc<Vec<i64>> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut map = Vec::with_capacity(n * ho * wo * c * k * k);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                map.push(-1);
                            } else {
                                map.push(
                                    (((b * c + ch) * h + iy as usize) * w + ix as usize) as i64,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    Rc::new(map)
}

fn im2col_map_1d(n: usize, c: usize, len: usize, k: usize, pad: usize) -> Rc<Vec<i64>> {
    let lo = len + 2 * pad - k + 1;
    let mut map = Vec::with_capacity(n * lo * c * k);
    for b in 0..n {
        for o in 0..lo {
            for ch in 0..c {
                for kk in 0..k {
                    let i = (o + kk) as i64 - pad as i64;
                    if i < 0 || i >= len as i64 {
                        map.push(-1);
                    } else {
                        map.push(((b * c + ch) * len + i as usize) as i64);
                    }
                }
            }
        }
    }
    Rc::new(map)
}
