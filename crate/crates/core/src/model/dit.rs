//! Diffusion transformer forward pass.
//!
//! Each block runs self-attention, then an action AdaLN modulation feeding the
//! text cross-attention, then the same modulation feeding the MLP. The output
//! is an x0 prediction `c(t)·x_t + head(h)` with `c(0) = 1`, so a zeroed head
//! is the identity on clean inputs.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::attention::multi_head_attention;
use super::cache::LayerKv;
use super::conditioning::{adaln_modulate, timestep_embedding, TextCond, ACTION_FEATURES};
use super::mask::AttentionMask;
use super::ModelConfig;

/// Action-adapter parameters: the projection and every AdaLN head. Everything
/// else is backbone and stays fixed during action finetuning.
pub fn is_adapter_param(name: &str) -> bool {
    name.split('.').any(|s| s == "action" || s == "ada")
}

fn randn<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
}

/// Parameters of one expert, unprefixed. AdaLN heads and the output head start at zero.
pub fn init_expert<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> ParamStore<T> {
    let (d, c, h) = (cfg.dim, cfg.channels(), cfg.dim * cfg.mlp_ratio);
    let mut p = ParamStore::new();
    p.insert("in.w", randn(c, d, rng));
    p.insert("in.b", Tensor::zeros(1, d));
    p.insert("pos.token", Tensor::randn(cfg.tokens_per_frame(), d, 0.1, rng));
    p.insert("pos.frame", Tensor::randn(cfg.chunk_len, d, 0.1, rng));
    p.insert("time.w1", randn(cfg.time_dim, d, rng));
    p.insert("time.b1", Tensor::zeros(1, d));
    p.insert("time.w2", randn(d, d, rng));
    p.insert("time.b2", Tensor::zeros(1, d));
    p.insert("action.proj", randn(ACTION_FEATURES, d, rng));
    p.insert("text.embed", Tensor::randn(cfg.vocab, d, 1.0, rng));
    for l in 0..cfg.depth {
        let b = format!("blocks.{l}.");
        for m in ["attn", "cross"] {
            for w in ["q", "k", "v", "o"] {
                p.insert(format!("{b}{m}.{w}"), randn(d, d, rng));
            }
        }
        p.insert(format!("{b}ada.w"), Tensor::zeros(d, 2 * d));
        p.insert(format!("{b}ada.b"), Tensor::zeros(1, 2 * d));
        p.insert(format!("{b}mlp.w1"), randn(d, h, rng));
        p.insert(format!("{b}mlp.b1"), Tensor::zeros(1, h));
        p.insert(format!("{b}mlp.w2"), randn(h, d, rng));
        p.insert(format!("{b}mlp.b2"), Tensor::zeros(1, d));
    }
    p.insert("out.w", Tensor::zeros(d, c));
    p.insert("out.b", Tensor::zeros(1, c));
    p
}

/// Two independently initialized experts under `high.` and `low.`.
pub fn init_teacher<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> ParamStore<T> {
    let mut p = init_expert::<T, R>(cfg, rng).with_prefix("high.");
    p.extend(init_expert::<T, R>(cfg, rng).with_prefix("low."));
    p
}

/// Conditioning for one forward pass over `frame_t.len()` frames.
pub struct ForwardInput<'a, T> {
    /// Noise level of each frame.
    pub frame_t: &'a [T],
    /// `frames × ACTION_FEATURES` raw action features.
    pub actions: &'a Tensor<T>,
    /// Hashed prompt tokens; frames with an empty prompt skip cross-attention.
    pub text: TextCond<'a>,
    /// Absolute index of the first frame; frame embeddings use its position within a chunk.
    pub first_frame: usize,
    /// `None` is full bidirectional attention.
    pub mask: Option<&'a AttentionMask>,
    /// Per-layer history visible to every input token. Requires a block-causal mask.
    pub cache: Option<&'a [LayerKv<T>]>,
}

pub struct ForwardOutput<'t, T> {
    pub x0: Var<'t, T>,
    /// Keys and values of the input tokens at every layer.
    pub kv: Vec<(Var<'t, T>, Var<'t, T>)>,
    /// Hidden state after the first `⌈depth / 2⌉` blocks.
    pub mid: Var<'t, T>,
}

impl<T: Scalar> ForwardOutput<'_, T> {
    pub fn layer_kv(&self) -> Vec<LayerKv<T>> {
        self.kv.iter().map(|(k, v)| LayerKv { k: (*k.value()).clone(), v: (*v.value()).clone() }).collect()
    }
}

fn allowed_matrix<T: Scalar>(rows: usize, input: &ForwardInput<'_, T>) -> Result<Option<Vec<bool>>> {
    if let Some(m) = input.mask {
        if m.tokens() != rows {
            return Err(Error::Shape(format!("mask covers {} tokens, input has {rows}", m.tokens())));
        }
    }
    match input.cache {
        None => Ok(input.mask.map(AttentionMask::dense)),
        Some(cache) => {
            let mask = match input.mask {
                Some(m) if m.is_causal() => m,
                _ => return Err(Error::Cache("cached forward needs a block-causal mask".into())),
            };
            let history = cache.first().map_or(0, |kv| kv.k.rows());
            let own = mask.dense();
            let mut out = Vec::with_capacity(rows * (history + rows));
            for r in 0..rows {
                out.extend(std::iter::repeat_n(true, history));
                out.extend_from_slice(&own[r * rows..(r + 1) * rows]);
            }
            Ok(Some(out))
        }
    }
}

/// x0 prediction for token rows `x` (`frames · tokens_per_frame × channels`)
/// using the expert whose parameters are bound under `prefix`.
pub fn dit_forward<'t, T: Scalar>(
    cfg: &ModelConfig,
    params: &Bound<'t, T>,
    prefix: &str,
    x: Var<'t, T>,
    input: &ForwardInput<'_, T>,
) -> Result<ForwardOutput<'t, T>> {
    let n = cfg.tokens_per_frame();
    let frames = input.frame_t.len();
    let rows = frames * n;
    let (d, heads) = (cfg.dim, cfg.heads);
    if x.shape() != (rows, cfg.channels()) {
        return Err(Error::Shape(format!("input {:?}, expected ({rows}, {})", x.shape(), cfg.channels())));
    }
    if input.actions.shape() != (frames, ACTION_FEATURES) {
        return Err(Error::Shape(format!("actions {:?} for {frames} frames", input.actions.shape())));
    }
    if let Some(cache) = input.cache {
        if cache.len() != cfg.depth || cache.iter().any(|kv| kv.k.cols() != d || kv.k.shape() != kv.v.shape()) {
            return Err(Error::Cache(format!("cache does not match depth {} width {d}", cfg.depth)));
        }
    }
    let allowed = allowed_matrix(rows, input)?;
    let allowed = allowed.as_deref();
    let tape = x.tape();
    let p = |name: &str| params.get(&format!("{prefix}{name}"));

    let frame_of_row: Vec<usize> = (0..rows).map(|r| r / n).collect();
    let token_ids: Vec<usize> = (0..rows).map(|r| r % n).collect();
    let slot_ids: Vec<usize> = frame_of_row.iter().map(|f| (input.first_frame + f) % cfg.chunk_len).collect();

    let mut h = x.matmul(p("in.w")).add_row(p("in.b"));
    h = h.add(p("pos.token").gather_rows(token_ids)).add(p("pos.frame").gather_rows(slot_ids));

    let mut te = Vec::with_capacity(frames * cfg.time_dim);
    for &t in input.frame_t {
        te.extend(timestep_embedding(t, cfg.time_dim));
    }
    let te = tape.constant(Tensor::from_vec(frames, cfg.time_dim, te));
    let temb = te.matmul(p("time.w1")).add_row(p("time.b1")).silu().matmul(p("time.w2")).add_row(p("time.b2"));
    h = h.add(temb.gather_rows(frame_of_row.clone()));

    let cond = tape.constant(input.actions.clone()).matmul(p("action.proj")).silu();
    if input.text.frames().is_some_and(|f| f != frames) {
        return Err(Error::Shape(format!("per-frame prompts cover {:?} of {frames} frames", input.text.frames())));
    }
    let segments: Vec<_> = input
        .text
        .segments(frames)
        .into_iter()
        .map(|(f0, nf, tokens)| (f0 * n, nf * n, (!tokens.is_empty()).then(|| p("text.embed").gather_rows(tokens.to_vec()))))
        .collect();
    let any_text = segments.iter().any(|s| s.2.is_some());

    let mid_at = cfg.depth.div_ceil(2);
    let mut mid = h;
    let mut kv = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let b = |name: &str| p(&format!("blocks.{l}.{name}"));
        let hn = h.layer_norm();
        let (q, k, v) = (hn.matmul(b("attn.q")), hn.matmul(b("attn.k")), hn.matmul(b("attn.v")));
        kv.push((k, v));
        let (kf, vf) = match input.cache {
            Some(cache) if cache[l].k.rows() > 0 => (
                Var::concat_rows(&[tape.constant(cache[l].k.clone()), k]),
                Var::concat_rows(&[tape.constant(cache[l].v.clone()), v]),
            ),
            _ => (k, v),
        };
        h = h.add(multi_head_attention(q, kf, vf, heads, allowed).matmul(b("attn.o")));

        let modulation = cond.matmul(b("ada.w")).add_row(b("ada.b")).gather_rows(frame_of_row.clone());
        let (scale, shift) = (modulation.slice_cols(0, d), modulation.slice_cols(d, d));
        if any_text {
            let q = adaln_modulate(h, scale, shift).matmul(b("cross.q"));
            let parts: Vec<_> = segments
                .iter()
                .map(|&(r0, nr, text)| match text {
                    Some(text) => {
                        let qs = if nr == rows { q } else { q.slice_rows(r0, nr) };
                        multi_head_attention(qs, text.matmul(b("cross.k")), text.matmul(b("cross.v")), heads, None)
                            .matmul(b("cross.o"))
                    }
                    None => tape.constant(Tensor::zeros(nr, d)),
                })
                .collect();
            h = h.add(if parts.len() == 1 { parts[0] } else { Var::concat_rows(&parts) });
        }
        let m = adaln_modulate(h, scale, shift);
        let mlp = m.matmul(b("mlp.w1")).add_row(b("mlp.b1")).silu().matmul(b("mlp.w2")).add_row(b("mlp.b2"));
        h = h.add(mlp);
        if l + 1 == mid_at {
            mid = h;
        }
    }

    let head = h.layer_norm().matmul(p("out.w")).add_row(p("out.b"));
    let skip: Vec<T> = frame_of_row.iter().map(|&f| T::lit(cfg.skip_weight(input.frame_t[f].to_f64_lossy()))).collect();
    Ok(ForwardOutput { x0: x.scale_rows(skip).add(head), kv, mid })
}

/// Gradient-free forward returning the x0 prediction and every layer's keys and values.
pub fn predict<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    prefix: &str,
    x: &Tensor<T>,
    input: &ForwardInput<'_, T>,
) -> Result<(Tensor<T>, Vec<LayerKv<T>>)> {
    let tape = crate::autograd::Tape::new();
    let bound = Bound::frozen(&tape, params);
    let out = dit_forward(cfg, &bound, prefix, tape.constant(x.clone()), input)?;
    Ok(((*out.x0.value()).clone(), out.layer_kv()))
}
