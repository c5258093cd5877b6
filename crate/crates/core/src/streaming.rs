//! Few-step chunk generation against a key/value cache, plus an uncached
//! recomputation used as the reference for cache equivalence.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::model::cache::LayerKv;
use crate::model::conditioning::TextCond;
use crate::model::dit::{dit_forward, ForwardInput};
use crate::model::mask::{build_block_causal_mask, build_windowed_mask};
use crate::model::ModelConfig;
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Conditioning of one generated chunk.
#[derive(Clone, Copy, Debug)]
pub struct ChunkCond<'a, T> {
    /// Absolute chunk index.
    pub index: usize,
    /// `chunk_len × ACTION_FEATURES`.
    pub actions: &'a Tensor<T>,
    pub text: TextCond<'a>,
    /// Clean tokens of the chunk's first frame, held fixed during denoising.
    pub image: Option<&'a Tensor<T>>,
}

/// Noise levels visited by an `n`-step student: `1 − k/n` for `k < n`.
pub fn student_grid(n_steps: usize) -> Vec<f64> {
    (0..n_steps).map(|k| 1.0 - k as f64 / n_steps as f64).collect()
}

fn frame_levels<T: Scalar>(cfg: &ModelConfig, t: f64, image: bool) -> Vec<T> {
    (0..cfg.chunk_len).map(|f| if image && f == 0 { T::zero() } else { T::lit(t) }).collect()
}

fn hold_image<'t, T: Scalar>(x: Var<'t, T>, image: Option<&Tensor<T>>) -> Var<'t, T> {
    match image {
        Some(img) => {
            let n = img.rows();
            Var::concat_rows(&[x.tape().constant(img.clone()), x.slice_rows(n, x.shape().0 - n)])
        }
        None => x,
    }
}

fn check_steps(n_steps: usize) -> Result<()> {
    if !(1..=4).contains(&n_steps) {
        return Err(Error::Precondition(format!("student steps must be 1..=4, got {n_steps}")));
    }
    Ok(())
}

/// Denoise one chunk from pure noise: predict x0 at each grid level, then
/// re-noise to the next level with fresh noise. The returned chunk carries
/// the tape's graph when `student` is trainable.
pub fn generate_chunk<'t, T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    student: &Bound<'t, T>,
    cache: &[LayerKv<T>],
    cond: &ChunkCond<'_, T>,
    n_steps: usize,
    rng: &mut R,
) -> Result<Var<'t, T>> {
    check_steps(n_steps)?;
    let ct = cfg.chunk_tokens();
    let tape = student.get("in.w").tape();
    let mask = build_block_causal_mask(1, ct);
    let mut x = hold_image(tape.constant(Tensor::randn(ct, cfg.channels(), 1.0, rng)), cond.image);
    let grid = student_grid(n_steps);
    let mut x0 = x;
    for (k, &t) in grid.iter().enumerate() {
        let frame_t = frame_levels::<T>(cfg, t, cond.image.is_some());
        let input = ForwardInput {
            frame_t: &frame_t,
            actions: cond.actions,
            text: cond.text,
            first_frame: cond.index * cfg.chunk_len,
            mask: Some(&mask),
            cache: Some(cache),
        };
        x0 = hold_image(dit_forward(cfg, student, "", x, &input)?.x0, cond.image);
        if let Some(&t_next) = grid.get(k + 1) {
            let eps = Tensor::<T>::randn(ct, cfg.channels(), 1.0, rng).scale(T::lit(t_next));
            x = hold_image(x0.affine(T::lit(1.0 - t_next), T::zero()).add(tape.constant(eps)), cond.image);
        }
    }
    Ok(x0)
}

/// Keys and values of a finished chunk, computed as clean (`t = 0`) context.
pub fn chunk_kv<T: Scalar>(
    cfg: &ModelConfig,
    student: &Bound<'_, T>,
    cache: &[LayerKv<T>],
    cond: &ChunkCond<'_, T>,
    chunk: &Tensor<T>,
) -> Result<Vec<LayerKv<T>>> {
    let tape = student.get("in.w").tape();
    let mask = build_block_causal_mask(1, cfg.chunk_tokens());
    let frame_t = vec![T::zero(); cfg.chunk_len];
    let input = ForwardInput {
        frame_t: &frame_t,
        actions: cond.actions,
        text: cond.text,
        first_frame: cond.index * cfg.chunk_len,
        mask: Some(&mask),
        cache: Some(cache),
    };
    Ok(dit_forward(cfg, &student.detached(), "", tape.constant(chunk.clone()), &input)?.layer_kv())
}

/// Reference generation without a cache: every denoising step recomputes the
/// whole visible sequence (clean history plus the current chunk) under a
/// block-causal mask limited to `window` chunks. Consumes `rng` exactly like
/// cached generation, so equal seeds give comparable outputs.
pub fn generate_uncached<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    student: &Bound<'_, T>,
    conds: &[ChunkCond<'_, T>],
    window: Option<usize>,
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<Tensor<T>>> {
    check_steps(n_steps)?;
    let ct = cfg.chunk_tokens();
    let tape = student.get("in.w").tape();
    let frozen = student.detached();
    let mut done: Vec<Tensor<T>> = Vec::new();
    for (i, cond) in conds.iter().enumerate() {
        let first = window.map_or(0, |m| i.saturating_sub(m));
        let visible = i - first;
        let mask = build_windowed_mask(visible + 1, ct, None);
        let mut actions: Vec<&Tensor<T>> = conds[first..i].iter().map(|c| c.actions).collect();
        actions.push(cond.actions);
        let actions = Tensor::concat_rows(&actions);
        let mut text: Vec<Vec<usize>> = Vec::new();
        for c in &conds[first..=i] {
            for (_, nf, tokens) in c.text.segments(cfg.chunk_len) {
                text.extend(std::iter::repeat_n(tokens.to_vec(), nf));
            }
        }
        let grid = student_grid(n_steps);
        let mut x = Tensor::<T>::randn(ct, cfg.channels(), 1.0, rng);
        let hold = |x: &mut Tensor<T>| {
            if let Some(img) = cond.image {
                x.data_mut()[..img.len()].copy_from_slice(img.data());
            }
        };
        hold(&mut x);
        let mut x0 = x.clone();
        for (k, &t) in grid.iter().enumerate() {
            let mut frame_t = vec![T::zero(); visible * cfg.chunk_len];
            frame_t.extend(frame_levels::<T>(cfg, t, cond.image.is_some()));
            let mut rows: Vec<&Tensor<T>> = done[first..i].iter().collect();
            rows.push(&x);
            let input = ForwardInput {
                frame_t: &frame_t,
                actions: &actions,
                text: TextCond::PerFrame(&text),
                first_frame: first * cfg.chunk_len,
                mask: Some(&mask),
                cache: None,
            };
            let out = dit_forward(cfg, &frozen, "", tape.constant(Tensor::concat_rows(&rows)), &input)?;
            x0 = out.x0.value().slice_rows(visible * ct, ct);
            hold(&mut x0);
            if let Some(&t_next) = grid.get(k + 1) {
                let eps = Tensor::<T>::randn(ct, cfg.channels(), 1.0, rng);
                x = x0.zip_map(&eps, |a, e| a * T::lit(1.0 - t_next) + e * T::lit(t_next));
                hold(&mut x);
            }
        }
        done.push(x0);
    }
    Ok(done)
}
