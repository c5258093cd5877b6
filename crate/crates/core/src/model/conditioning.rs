//! Action, timestep and text conditioning plus AdaLN modulation.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::Result;
use crate::geometry::plucker::{plucker_embed, PluckerMap};
use crate::geometry::pose::CameraPose;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::world::action::{ActionState, Keys};

/// Per-frame action feature width: pooled Plücker (6) ⊕ WASD (4) ⊕ yaw, pitch deltas (2).
pub const ACTION_FEATURES: usize = 12;
/// Resolution of the Plücker map pooled into action features.
const POOL_RES: usize = 8;

/// Raw action features: `mean(plücker) ⊕ multi_hot(keys) ⊕ [yaw_delta, pitch_delta]`.
pub fn action_features(plucker: &PluckerMap, keys: Keys, yaw_delta: f64, pitch_delta: f64) -> [f64; ACTION_FEATURES] {
    let mut out = [0.0; ACTION_FEATURES];
    out[..6].copy_from_slice(&plucker.mean());
    out[6..10].copy_from_slice(&keys.multi_hot());
    out[10] = yaw_delta;
    out[11] = pitch_delta;
    out
}

/// Project action features through `proj` `[ACTION_FEATURES × width]` (no bias).
pub fn encode_actions<T: Scalar>(
    plucker: &PluckerMap,
    keys: Keys,
    yaw_delta: f64,
    pitch_delta: f64,
    proj: &Tensor<T>,
) -> Tensor<T> {
    let f = action_features(plucker, keys, yaw_delta, pitch_delta);
    Tensor::from_vec(1, ACTION_FEATURES, f.iter().map(|&x| T::lit(x)).collect()).matmul(proj)
}

/// Feature rows for a pose/action sequence. Poses are taken relative to
/// `reference` (clip or session start) so features are independent of where
/// in the world the sequence happens.
pub fn frame_action_features<T: Scalar>(
    poses: &[CameraPose],
    actions: &[ActionState],
    reference: &CameraPose,
) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(poses.len() * ACTION_FEATURES);
    for (pose, a) in poses.iter().zip(actions) {
        let mut rel = pose.relative_to(reference);
        rel.intrinsics = crate::geometry::pose::Intrinsics::for_resolution(POOL_RES, POOL_RES);
        let map = plucker_embed(&rel, POOL_RES, POOL_RES)?;
        data.extend(action_features(&map, a.keys, a.yaw_delta, a.pitch_delta).iter().map(|&x| T::lit(x)));
    }
    Ok(Tensor::from_vec(poses.len(), ACTION_FEATURES, data))
}

/// Sinusoidal embedding of `t ∈ [0, 1]` with `dim / 2` log-spaced frequencies.
pub fn timestep_embedding<T: Scalar>(t: T, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let t = t.to_f64_lossy() * 1000.0;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out.push(T::lit((t * freq).cos()));
    }
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out.push(T::lit((t * freq).sin()));
    }
    out.resize(dim, T::zero());
    out
}

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Hashed bag of words: distinct lower-cased alphanumeric words mapped to
/// `fnv1a(word) mod vocab`, sorted and deduplicated. Empty text gives no tokens.
pub fn tokenize_prompt(text: &str, vocab: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| (fnv1a(w.to_lowercase().as_bytes()) % vocab as u64) as usize)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Prompt tokens for each frame of a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum TextCond<'a> {
    Uniform(&'a [usize]),
    /// One token list per frame.
    PerFrame(&'a [Vec<usize>]),
}

impl<'a> TextCond<'a> {
    /// Maximal runs of frames sharing a prompt: `(first_frame, frames, tokens)`.
    pub fn segments(&self, frames: usize) -> Vec<(usize, usize, &'a [usize])> {
        match *self {
            TextCond::Uniform(tokens) => vec![(0, frames, tokens)],
            TextCond::PerFrame(per) => {
                let mut out: Vec<(usize, usize, &'a [usize])> = Vec::new();
                for (f, tokens) in per.iter().enumerate().take(frames) {
                    match out.last_mut() {
                        Some(last) if last.2 == tokens.as_slice() => last.1 += 1,
                        _ => out.push((f, 1, tokens.as_slice())),
                    }
                }
                out
            }
        }
    }

    pub fn frames(&self) -> Option<usize> {
        match self {
            TextCond::Uniform(_) => None,
            TextCond::PerFrame(per) => Some(per.len()),
        }
    }
}

/// `layer_norm(x) · (1 + scale) + shift`, all arguments token-aligned.
pub fn adaln_modulate<'t, T: Scalar>(x: Var<'t, T>, scale: Var<'t, T>, shift: Var<'t, T>) -> Var<'t, T> {
    x.layer_norm().mul(scale.affine(T::one(), T::one())).add(shift)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expert {
    High,
    Low,
}

impl Expert {
    pub fn prefix(self) -> &'static str {
        match self {
            Expert::High => "high.",
            Expert::Low => "low.",
        }
    }
}

/// High-noise expert for `t ≥ boundary` (ties go high), low-noise otherwise.
pub fn route_expert(t: f64, boundary: f64) -> Expert {
    if t >= boundary {
        Expert::High
    } else {
        Expert::Low
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::geometry::pose::Intrinsics;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map() -> PluckerMap {
        plucker_embed(&CameraPose::identity(Intrinsics::for_resolution(4, 4)), 4, 4).unwrap()
    }

    #[test]
    fn zero_projection_gives_zero() {
        let e = encode_actions(&map(), Keys::W, 0.1, 0.0, &Tensor::<f64>::zeros(12, 8));
        assert!(e.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn distinct_keys_differ_and_yaw_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proj = Tensor::<f64>::randn(12, 16, 1.0, &mut rng);
        let a = encode_actions(&map(), Keys::W, 0.0, 0.0, &proj);
        let b = encode_actions(&map(), Keys::D, 0.0, 0.0, &proj);
        assert!(a.max_abs_diff(&b) > 1e-3);
        let base = encode_actions(&map(), Keys::NONE, 0.0, 0.0, &proj);
        let y1 = encode_actions(&map(), Keys::NONE, 0.1, 0.0, &proj).sub(&base);
        let y2 = encode_actions(&map(), Keys::NONE, 0.2, 0.0, &proj).sub(&base);
        assert!(y2.max_abs_diff(&y1.scale(2.0)) < 1e-12);
    }

    #[test]
    fn modulation_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::randn(3, 6, 1.0, &mut rng));
        let zero = tape.constant(Tensor::zeros(3, 6));
        let out = adaln_modulate(x, zero, zero).value();
        assert_eq!(*out, *x.layer_norm().value());
        let minus = tape.constant(Tensor::full(3, 6, -1.0));
        let c = tape.constant(Tensor::full(3, 6, 0.7));
        let out = adaln_modulate(x, minus, c).value();
        assert!(out.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn routing() {
        assert_eq!(route_expert(0.9, 0.5), Expert::High);
        assert_eq!(route_expert(0.1, 0.5), Expert::Low);
        assert_eq!(route_expert(0.5, 0.5), Expert::High);
    }

    #[test]
    fn text_segments() {
        let per = vec![vec![1], vec![1], vec![], vec![2]];
        let segs = TextCond::PerFrame(&per).segments(4);
        assert_eq!(segs, vec![(0, 2, &[1][..]), (2, 1, &[][..]), (3, 1, &[2][..])]);
        assert_eq!(TextCond::Uniform(&[3]).segments(5), vec![(0, 5, &[3][..])]);
    }

    #[test]
    fn prompt_tokens() {
        assert!(tokenize_prompt("", 256).is_empty());
        assert_eq!(tokenize_prompt("Night night", 256).len(), 1);
        assert_ne!(tokenize_prompt("day", 256), tokenize_prompt("night", 256));
    }
}
