//! Lossless patch tokenization of 8-bit frames.
//!
//! Channel values map to `[-1, 1]` via `v / 127.5 - 1`; tokens are
//! `patch × patch × 3` vectors in row-major patch order, channel-interleaved.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::world::render::Frame;

/// `frames · tokens_per_frame` token rows of `channels` values, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo<T> {
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub chunk_len: usize,
    pub tokens: Tensor<T>,
}

impl<T: Scalar> LatentVideo<T> {
    pub fn channels(&self) -> usize {
        self.tokens.cols()
    }

    pub fn chunks(&self) -> usize {
        self.frames.div_ceil(self.chunk_len)
    }

    pub fn chunk_tokens(&self) -> usize {
        self.chunk_len * self.tokens_per_frame
    }

    /// Token rows of frames `[start, start + count)`.
    pub fn frame_range(&self, start: usize, count: usize) -> Tensor<T> {
        self.tokens.slice_rows(start * self.tokens_per_frame, count * self.tokens_per_frame)
    }

    pub fn chunk(&self, i: usize) -> Tensor<T> {
        let start = i * self.chunk_len;
        let count = self.chunk_len.min(self.frames - start);
        self.frame_range(start, count)
    }
}

pub fn check_patch_dims(height: usize, width: usize, patch: usize) -> Result<()> {
    if patch == 0 || height % patch != 0 || width % patch != 0 || height == 0 || width == 0 {
        return Err(Error::IndivisibleDims { height, width, patch });
    }
    Ok(())
}

pub fn patchify_frame<T: Scalar>(frame: &Frame, patch: usize) -> Result<Tensor<T>> {
    check_patch_dims(frame.height, frame.width, patch)?;
    let (ph, pw) = (frame.height / patch, frame.width / patch);
    let dim = patch * patch * 3;
    let mut out = Tensor::zeros(ph * pw, dim);
    let inv = T::lit(1.0 / 127.5);
    for pr in 0..ph {
        for pc in 0..pw {
            let row = out.row_mut(pr * pw + pc);
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    let px = frame.pixel(pr * patch + dy, pc * patch + dx);
                    for &v in &px {
                        row[k] = T::lit(v as f64) * inv - T::one();
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify_frame`]; values are rounded and clamped to 8 bits.
pub fn unpatchify_frame<T: Scalar>(tokens: &Tensor<T>, height: usize, width: usize, patch: usize) -> Result<Frame> {
    check_patch_dims(height, width, patch)?;
    let (ph, pw) = (height / patch, width / patch);
    if tokens.shape() != (ph * pw, patch * patch * 3) {
        return Err(Error::Shape(format!(
            "expected {}x{} tokens, got {:?}",
            ph * pw,
            patch * patch * 3,
            tokens.shape()
        )));
    }
    let mut frame = Frame::new(height, width);
    for pr in 0..ph {
        for pc in 0..pw {
            let row = tokens.row(pr * pw + pc);
            for dy in 0..patch {
                for dx in 0..patch {
                    let k = (dy * patch + dx) * 3;
                    let rgb = [0, 1, 2].map(|c| {
                        let v = (row[k + c].to_f64_lossy() + 1.0) * 127.5;
                        if v.is_finite() {
                            v.round().clamp(0.0, 255.0) as u8
                        } else {
                            0
                        }
                    });
                    frame.set_pixel(pr * patch + dy, pc * patch + dx, rgb);
                }
            }
        }
    }
    Ok(frame)
}

pub fn patchify<T: Scalar>(frames: &[Frame], patch: usize, chunk_len: usize) -> Result<LatentVideo<T>> {
    let first = frames.first().ok_or_else(|| Error::Precondition("no frames to patchify".into()))?;
    let mut parts = Vec::with_capacity(frames.len());
    for f in frames {
        if (f.height, f.width) != (first.height, first.width) {
            return Err(Error::ResolutionMismatch {
                expected_h: first.height,
                expected_w: first.width,
                got_h: f.height,
                got_w: f.width,
            });
        }
        parts.push(patchify_frame::<T>(f, patch)?);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    let tokens_per_frame = parts[0].rows();
    Ok(LatentVideo { frames: frames.len(), tokens_per_frame, chunk_len: chunk_len.max(1), tokens: Tensor::concat_rows(&refs) })
}

pub fn unpatchify<T: Scalar>(video: &LatentVideo<T>, height: usize, width: usize, patch: usize) -> Result<Vec<Frame>> {
    (0..video.frames).map(|f| unpatchify_frame(&video.frame_range(f, 1), height, width, patch)).collect()
}
