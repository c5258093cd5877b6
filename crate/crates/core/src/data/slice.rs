use std::ops::Range;

use crate::world::render::Frame;

/// Normalized difference between consecutive frames: `Σ|b − a| / (Σa + Σb)`,
/// in `[0, 1]`. Uniform brightness scaling cancels out; two black frames give 0.
pub fn frame_difference(a: &Frame, b: &Frame) -> f64 {
    let mut diff = 0u64;
    let mut total = 0u64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        diff += (x as i64 - y as i64).unsigned_abs();
        total += x as u64 + y as u64;
    }
    if total == 0 {
        0.0
    } else {
        diff as f64 / total as f64
    }
}

/// Split footage at every transition whose difference exceeds `cut_threshold`,
/// then drop ranges shorter than `min_len`.
pub fn slice_clips(frames: &[Frame], cut_threshold: f64, min_len: usize) -> Vec<Range<usize>> {
    let mut ranges = Vec::new();
    let mut start = 0;
    for i in 0..frames.len().saturating_sub(1) {
        if frame_difference(&frames[i], &frames[i + 1]) > cut_threshold {
            ranges.push(start..i + 1);
            start = i + 1;
        }
    }
    if start < frames.len() {
        ranges.push(start..frames.len());
    }
    ranges.retain(|r| r.len() >= min_len);
    ranges
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_video_is_one_clip() {
        let frames = vec![Frame::filled(4, 4, [90, 90, 90]); 10];
        assert_eq!(slice_clips(&frames, 0.01, 1), vec![0..10]);
        assert!(slice_clips(&frames, 0.01, 11).is_empty());
    }

    #[test]
    fn hard_cut_splits() {
        let mut frames = vec![Frame::filled(4, 4, [0, 0, 0]); 5];
        frames.extend(vec![Frame::filled(4, 4, [255, 255, 255]); 5]);
        assert_eq!(slice_clips(&frames, 0.5, 1), vec![0..5, 5..10]);
    }
}
