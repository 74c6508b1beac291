//! Latent video values: rank-5 arrays shaped (batch, frames, height, width, channels).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Latent code of a video clip, shaped `(B, F, H, W, C)`. `F = 1` is the
/// image-as-video case used during subject learning.
#[derive(Clone, Debug)]
pub struct LatentVideo {
    tensor: Tensor,
}

impl LatentVideo {
    pub fn new(tensor: Tensor) -> Result<LatentVideo> {
        if tensor.shape().len() != 5 {
            return Err(Error::ShapeMismatch {
                context: "LatentVideo",
                expected: vec![0, 0, 0, 0, 0],
                got: tensor.shape().to_vec(),
            });
        }
        if !tensor.all_finite() {
            return Err(Error::invalid("LatentVideo entries must be finite"));
        }
        Ok(LatentVideo { tensor })
    }

    pub fn from_data(data: Vec<f64>, dims: [usize; 5]) -> Result<LatentVideo> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "latent data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        LatentVideo::new(Tensor::new(data, &dims))
    }

    pub fn zeros(dims: [usize; 5]) -> LatentVideo {
        LatentVideo { tensor: Tensor::zeros(&dims) }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn dims(&self) -> [usize; 5] {
        let s = self.tensor.shape();
        [s[0], s[1], s[2], s[3], s[4]]
    }

    pub fn batch(&self) -> usize {
        self.dims()[0]
    }

    pub fn frames(&self) -> usize {
        self.dims()[1]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tensor.to_vec()
    }

    /// Extract one frame of one batch sample as `(H, W, C)` data.
    pub fn frame_data(&self, b: usize, f: usize) -> Vec<f64> {
        let [bs, fs, h, w, c] = self.dims();
        assert!(b < bs && f < fs, "frame index out of range");
        let stride = h * w * c;
        let start = (b * fs + f) * stride;
        self.tensor.with_data(|d| d[start..start + stride].to_vec())
    }

    /// Stack single-frame videos along the batch axis (all dims must agree).
    pub fn stack_batch(items: &[&LatentVideo]) -> Result<LatentVideo> {
        if items.is_empty() {
            return Err(Error::invalid("stack_batch: empty input"));
        }
        let d0 = items[0].dims();
        let mut data = Vec::new();
        let mut batch = 0;
        for it in items {
            let d = it.dims();
            if d[1..] != d0[1..] {
                return Err(Error::ShapeMismatch {
                    context: "stack_batch",
                    expected: d0.to_vec(),
                    got: d.to_vec(),
                });
            }
            batch += d[0];
            data.extend_from_slice(&it.to_vec());
        }
        LatentVideo::from_data(data, [batch, d0[1], d0[2], d0[3], d0[4]])
    }

    pub fn max_abs_diff(&self, other: &LatentVideo) -> f64 {
        let a = self.to_vec();
        let b = other.to_vec();
        assert_eq!(a.len(), b.len(), "max_abs_diff: size mismatch");
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_rank() {
        assert!(LatentVideo::new(Tensor::zeros(&[2, 3, 4])).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let t = Tensor::new(vec![f64::NAN; 4], &[1, 1, 2, 2, 1]);
        assert!(LatentVideo::new(t).is_err());
    }

    #[test]
    fn single_frame_allowed() {
        assert!(LatentVideo::zeros([2, 1, 4, 4, 3]).frames() == 1);
    }

    #[test]
    fn frame_extraction() {
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let v = LatentVideo::from_data(data, [1, 2, 2, 3, 2]).unwrap();
        let f1 = v.frame_data(0, 1);
        assert_eq!(f1, (12..24).map(|v| v as f64).collect::<Vec<_>>());
    }
}
