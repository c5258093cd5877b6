use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::render::Frame;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Perspective {
    FirstPerson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterAttributes {
    /// Mean normalized luminance in `[0, 1]`.
    pub brightness: f64,
    /// Mean forward-difference gradient magnitude of luminance.
    pub sharpness: f64,
    /// Mean absolute inter-frame channel difference, normalized to `[0, 1]`.
    pub motion_magnitude: f64,
    pub duration: f64,
    pub resolution: (usize, usize),
    pub perspective: Perspective,
}

fn luminance(frame: &Frame) -> Vec<f64> {
    frame
        .data
        .chunks_exact(3)
        .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / (3.0 * 255.0))
        .collect()
}

fn sharpness(frame: &Frame) -> f64 {
    let (h, w) = (frame.height, frame.width);
    if h < 2 || w < 2 {
        return 0.0;
    }
    let l = luminance(frame);
    let mut acc = 0.0;
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            let here = l[r * w + c];
            let gx = l[r * w + c + 1] - here;
            let gy = l[(r + 1) * w + c] - here;
            acc += gx.hypot(gy);
        }
    }
    acc / ((h - 1) * (w - 1)) as f64
}

/// Duration of a frame sequence: span of timestamps plus the final interval.
pub fn clip_duration(timestamps: &[f64]) -> f64 {
    let n = timestamps.len();
    match n {
        0 => 0.0,
        1 => 0.0,
        _ => timestamps[n - 1] - timestamps[0] + (timestamps[n - 1] - timestamps[n - 2]),
    }
}

pub fn profile_clip(frames: &[Frame], timestamps: &[f64]) -> Result<FilterAttributes> {
    if frames.len() < 2 {
        return Err(Error::InsufficientFrames { needed: 2, got: frames.len() });
    }
    if timestamps.len() != frames.len() {
        return Err(Error::Precondition("one timestamp per frame required".into()));
    }
    let (h, w) = (frames[0].height, frames[0].width);
    if let Some(f) = frames.iter().find(|f| (f.height, f.width) != (h, w)) {
        return Err(Error::ResolutionMismatch { expected_h: h, expected_w: w, got_h: f.height, got_w: f.width });
    }
    let n = frames.len() as f64;
    let brightness = frames.iter().map(Frame::mean_luminance).sum::<f64>() / n;
    let sharp = frames.iter().map(sharpness).sum::<f64>() / n;
    let motion = frames
        .windows(2)
        .map(|p| {
            let s: u64 = p[0].data.iter().zip(&p[1].data).map(|(&a, &b)| (a as i64 - b as i64).unsigned_abs()).sum();
            s as f64 / (p[0].data.len() as f64 * 255.0)
        })
        .sum::<f64>()
        / (n - 1.0);
    Ok(FilterAttributes {
        brightness,
        sharpness: sharp,
        motion_magnitude: motion,
        duration: clip_duration(timestamps),
        resolution: (h, w),
        perspective: Perspective::FirstPerson,
    })
}

/// Inclusive bounds; `None` disables a check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub min_height: usize,
    pub min_width: usize,
    pub min_duration: f64,
    pub min_brightness: Option<f64>,
    pub max_brightness: Option<f64>,
    pub min_sharpness: Option<f64>,
    pub max_motion: Option<f64>,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            min_height: 64,
            min_width: 64,
            min_duration: 2.0,
            min_brightness: Some(0.05),
            max_brightness: None,
            min_sharpness: None,
            max_motion: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropReason {
    Resolution,
    Duration,
    Brightness,
    Sharpness,
    Motion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterDecision {
    Keep,
    Drop(DropReason),
}

/// Checks run in a fixed order; the first failing attribute names the reason.
pub fn filter_clip(attrs: &FilterAttributes, t: &FilterThresholds) -> FilterDecision {
    let (h, w) = attrs.resolution;
    if h < t.min_height || w < t.min_width {
        return FilterDecision::Drop(DropReason::Resolution);
    }
    if attrs.duration < t.min_duration {
        return FilterDecision::Drop(DropReason::Duration);
    }
    if t.min_brightness.is_some_and(|m| attrs.brightness < m) || t.max_brightness.is_some_and(|m| attrs.brightness > m)
    {
        return FilterDecision::Drop(DropReason::Brightness);
    }
    if t.min_sharpness.is_some_and(|m| attrs.sharpness < m) {
        return FilterDecision::Drop(DropReason::Sharpness);
    }
    if t.max_motion.is_some_and(|m| attrs.motion_magnitude > m) {
        return FilterDecision::Drop(DropReason::Motion);
    }
    FilterDecision::Keep
}
