//! Few-step student distillation: distribution matching against a frozen
//! teacher score, a fake score tracking the student, an adversarial head on
//! fake-score features, and self-rollout with a rolling cache and truncated
//! gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::diffusion::{sampling_grid, TrainSample};
use crate::error::{Error, Result};
use crate::metrics::MetricsLog;
use crate::model::cache::{CacheEntry, KvCache};
use crate::model::conditioning::{route_expert, TextCond};
use crate::model::dit::{dit_forward, ForwardInput};
use crate::model::ModelConfig;
use crate::params::{Adam, AdamConfig, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::streaming::{chunk_kv, generate_chunk, ChunkCond};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda_adv: f64,
    /// Fake-score updates per student update.
    pub ttur: usize,
    /// Most recent chunks that keep their generation graph.
    pub truncation: usize,
    /// Rolling cache capacity in chunks; `None` never evicts.
    pub cache_chunks: Option<usize>,
    /// Chunks generated per self-rollout.
    pub horizon: usize,
    pub student_steps: usize,
    /// Flow shift of the grid DMD noise levels are drawn from.
    pub shift: f64,
    pub grid_steps: usize,
    pub lr_student: f64,
    pub lr_fake: f64,
    pub lr_disc: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_adv: 0.05,
            ttur: 5,
            truncation: 2,
            cache_chunks: Some(8),
            horizon: 4,
            student_steps: 4,
            shift: 3.0,
            grid_steps: 8,
            lr_student: 2e-4,
            lr_fake: 1e-3,
            lr_disc: 1e-3,
            steps: 100,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ttur == 0 || self.truncation == 0 || self.horizon == 0 || self.grid_steps < 2 {
            return Err(Error::Config("ttur, truncation and horizon must be ≥ 1, grid_steps ≥ 2".into()));
        }
        if !(1..=4).contains(&self.student_steps) {
            return Err(Error::Config(format!("student_steps {} outside 1..=4", self.student_steps)));
        }
        if self.cache_chunks == Some(0) {
            return Err(Error::Config("cache capacity must be at least one chunk".into()));
        }
        Ok(())
    }

    /// DMD noise level: uniform over the interior of the shifted grid.
    pub fn draw_t<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let grid = sampling_grid(self.grid_steps, self.shift);
        grid[rng.gen_range(1..self.grid_steps)]
    }
}

/// Conditioning and ground truth for one self-rollout of `horizon` chunks.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutContext<T> {
    /// `frames × ACTION_FEATURES`.
    pub actions: Tensor<T>,
    pub text: Vec<Vec<usize>>,
    /// Clean tokens of the first frame.
    pub image: Option<Tensor<T>>,
    /// Real latents of the same frames, used by the discriminator.
    pub real: Tensor<T>,
    pub chunk_len: usize,
    pub tokens_per_frame: usize,
}

impl<T: Scalar> RolloutContext<T> {
    pub fn from_sample(sample: &TrainSample<T>, start_chunk: usize, horizon: usize, chunk_len: usize) -> Result<Self> {
        let w = sample.window(start_chunk * chunk_len, horizon * chunk_len)?;
        Ok(Self {
            image: Some(w.latents.slice_rows(0, w.tokens_per_frame)),
            actions: w.actions,
            text: w.text,
            real: w.latents,
            chunk_len,
            tokens_per_frame: w.tokens_per_frame,
        })
    }

    pub fn chunks(&self) -> usize {
        self.actions.rows() / self.chunk_len
    }

    pub fn chunk_actions(&self, c: usize) -> Tensor<T> {
        self.actions.slice_rows(c * self.chunk_len, self.chunk_len)
    }
}

/// Generated chunks with their actions; only the last `K` keep a graph.
pub struct RolloutBuffer<'t, T> {
    pub chunks: Vec<Var<'t, T>>,
    pub actions: Vec<Tensor<T>>,
    pub keeps_grad: Vec<bool>,
    /// Chunk indices evicted from the rolling cache during the rollout.
    pub evicted: Vec<usize>,
}

impl<'t, T: Scalar> RolloutBuffer<'t, T> {
    pub fn kept(&self) -> usize {
        self.keeps_grad.iter().filter(|&&k| k).count()
    }

    pub fn values(&self) -> Vec<Tensor<T>> {
        self.chunks.iter().map(|c| (*c.value()).clone()).collect()
    }
}

/// Autoregressive generation of every context chunk through a rolling cache.
/// Chunks before the last `truncation` are generated from detached parameters,
/// and the cache always holds detached clean keys and values.
pub fn self_rollout<'t, T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    dcfg: &DistillConfig,
    student: &Bound<'t, T>,
    ctx: &RolloutContext<T>,
    rng: &mut R,
) -> Result<RolloutBuffer<'t, T>> {
    let per_chunk = vec![student; ctx.chunks()];
    rollout_with(cfg, dcfg, &per_chunk, ctx, rng)
}

/// Rollout where chunk `c` is generated from `per_chunk[c]`, so gradients can
/// be attributed to individual generation steps.
fn rollout_with<'t, T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    dcfg: &DistillConfig,
    per_chunk: &[&Bound<'t, T>],
    ctx: &RolloutContext<T>,
    rng: &mut R,
) -> Result<RolloutBuffer<'t, T>> {
    let h = ctx.chunks();
    let mut cache = KvCache::new(cfg.depth, cfg.chunk_tokens(), cfg.dim, dcfg.cache_chunks);
    let mut buf = RolloutBuffer { chunks: Vec::new(), actions: Vec::new(), keeps_grad: Vec::new(), evicted: Vec::new() };
    for c in 0..h {
        let keep = c + dcfg.truncation >= h;
        let actions = ctx.chunk_actions(c);
        let text = &ctx.text[c * ctx.chunk_len..(c + 1) * ctx.chunk_len];
        let cond = ChunkCond {
            index: c,
            actions: &actions,
            text: TextCond::PerFrame(text),
            image: if c == 0 { ctx.image.as_ref() } else { None },
        };
        let layers = cache.layers();
        let detached = per_chunk[c].detached();
        let chunk = generate_chunk(cfg, if keep { per_chunk[c] } else { &detached }, &layers, &cond, dcfg.student_steps, rng)?;
        let kv = chunk_kv(cfg, &detached, &layers, &cond, &chunk.value())?;
        cache.append(CacheEntry { index: c, layers: kv })?;
        buf.chunks.push(chunk);
        buf.actions.push(actions);
        buf.keeps_grad.push(keep);
    }
    buf.evicted = cache.evicted().to_vec();
    Ok(buf)
}

/// `½‖x̃ − sg[x̃ − (μ_real − μ_fake)]‖²`; its gradient in `x̃` is `μ_real − μ_fake`.
pub fn dmd_loss<'t, T: Scalar>(x_tilde: Var<'t, T>, mu_real: &Tensor<T>, mu_fake: &Tensor<T>) -> Var<'t, T> {
    let target = x_tilde.value().sub(&mu_real.sub(mu_fake));
    x_tilde.sub(x_tilde.tape().constant(target)).sum_sq().scale(T::lit(0.5))
}

/// Noise implied by an x0 prediction: `(x_t − (1 − t)·x̂0) / t`, zero on clean rows.
pub fn noise_prediction<T: Scalar>(x_t: &Tensor<T>, x0: &Tensor<T>, row_t: &[T]) -> Tensor<T> {
    let mut out = Tensor::zeros(x_t.rows(), x_t.cols());
    for (r, &t) in row_t.iter().enumerate() {
        if t > T::zero() {
            for ((o, &a), &b) in out.row_mut(r).iter_mut().zip(x_t.row(r)).zip(x0.row(r)) {
                *o = (a - (T::one() - t) * b) / t;
            }
        }
    }
    out
}

/// `E[softplus(1 − D(fake))]`.
pub fn gan_g_loss<'t, T: Scalar>(d_fake: Var<'t, T>) -> Var<'t, T> {
    d_fake.affine(-T::one(), T::one()).softplus().mean()
}

/// `E[softplus(D(real))] − E[softplus(1 − D(fake))]`.
pub fn gan_d_loss<'t, T: Scalar>(d_real: Var<'t, T>, d_fake: Var<'t, T>) -> Var<'t, T> {
    d_real.softplus().mean().sub(d_fake.affine(-T::one(), T::one()).softplus().mean())
}

/// Discriminator head; the output layer starts at zero so `D ≡ 0` initially.
pub fn init_disc<T: Scalar, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> ParamStore<T> {
    let mut p = ParamStore::new();
    p.insert("disc.w1", Tensor::randn(dim, dim, 1.0 / (dim as f64).sqrt(), rng));
    p.insert("disc.b1", Tensor::zeros(1, dim));
    p.insert("disc.w2", Tensor::zeros(dim, 1));
    p.insert("disc.b2", Tensor::zeros(1, 1));
    p
}

/// Scalar logit from token features: mean-pool, then a two-layer projection.
pub fn disc_logit<'t, T: Scalar>(disc: &Bound<'t, T>, features: Var<'t, T>) -> Var<'t, T> {
    features
        .mean_rows()
        .matmul(disc.get("disc.w1"))
        .add_row(disc.get("disc.b1"))
        .silu()
        .matmul(disc.get("disc.w2"))
        .add_row(disc.get("disc.b2"))
}

/// Sequence fed to a score network: chunks not selected by `noised` stay
/// clean, selected ones are noised at `t` (clean image rows stay clean).
struct Noising<T> {
    t: f64,
    /// Per-row noise level.
    row_t: Vec<T>,
    /// Per-frame noise level.
    frame_t: Vec<T>,
    /// Noise pre-scaled by the row level.
    scaled_eps: Tensor<T>,
    /// Row range of the noised region.
    rows: (usize, usize),
}

impl<T: Scalar> Noising<T> {
    fn new<R: Rng + ?Sized>(
        ctx: &RolloutContext<T>,
        noised: &[bool],
        t: f64,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let n = ctx.tokens_per_frame;
        let frames = noised.len() * ctx.chunk_len;
        let frame_t: Vec<T> = (0..frames)
            .map(|f| {
                let image = f == 0 && ctx.image.is_some();
                if noised[f / ctx.chunk_len] && !image {
                    T::lit(t)
                } else {
                    T::zero()
                }
            })
            .collect();
        let row_t: Vec<T> = (0..frames * n).map(|r| frame_t[r / n]).collect();
        let eps = Tensor::<T>::randn(frames * n, channels, 1.0, rng);
        let scaled_eps = Tensor::from_fn(eps.rows(), channels, |r, c| eps.get(r, c) * row_t[r]);
        let first = noised.iter().position(|&k| k).unwrap_or(noised.len());
        let ct = ctx.chunk_len * n;
        Self { t, row_t, frame_t, scaled_eps, rows: (first * ct, (noised.len() - first) * ct) }
    }

    fn apply<'t>(&self, clean: Var<'t, T>) -> Var<'t, T> {
        let keep: Vec<T> = self.row_t.iter().map(|&t| T::one() - t).collect();
        clean.scale_rows(keep).add(clean.tape().constant(self.scaled_eps.clone()))
    }

    fn kept_row_t(&self) -> &[T] {
        &self.row_t[self.rows.0..self.rows.0 + self.rows.1]
    }
}

fn score_forward<'t, T: Scalar>(
    cfg: &ModelConfig,
    score: &Bound<'t, T>,
    ctx: &RolloutContext<T>,
    noising: &Noising<T>,
    x_t: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let expert = route_expert(noising.t, cfg.boundary);
    let input = ForwardInput {
        frame_t: &noising.frame_t,
        actions: &ctx.actions,
        text: TextCond::PerFrame(&ctx.text),
        first_frame: 0,
        mask: None,
        cache: None,
    };
    let out = dit_forward(cfg, score, expert.prefix(), x_t, &input)?;
    let (r0, nr) = noising.rows;
    Ok((out.x0.slice_rows(r0, nr), out.mid.slice_rows(r0, nr)))
}

/// Generator objectives on one rollout: `(𝓛_DMD, 𝓛_G)`. Score outputs enter
/// the DMD target as constants and the adversarial path runs through detached
/// fake-score and head parameters, so only the student receives gradient.
pub fn generator_losses<'t, T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    dcfg: &DistillConfig,
    nets: &Nets<'_, 't, T>,
    ctx: &RolloutContext<T>,
    buffer: &RolloutBuffer<'t, T>,
    rng: &mut R,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let tape = buffer.chunks[0].tape();
    let t = dcfg.draw_t(rng);
    let noising = Noising::new(ctx, &buffer.keeps_grad, t, cfg.channels(), rng);
    let seq = Var::concat_rows(&buffer.chunks);
    let clean_const = tape.constant((*seq.value()).clone());
    let x_t_const = noising.apply(clean_const);
    let (mu_real, _) = score_forward(cfg, nets.real, ctx, &noising, x_t_const.detach())?;
    let (mu_fake, _) = score_forward(cfg, nets.fake, ctx, &noising, x_t_const.detach())?;
    let (r0, nr) = noising.rows;
    let x_t_kept = x_t_const.value().slice_rows(r0, nr);
    let eps_real = noise_prediction(&x_t_kept, &mu_real.value(), noising.kept_row_t());
    let eps_fake = noise_prediction(&x_t_kept, &mu_fake.value(), noising.kept_row_t());
    let kept: Vec<Var<'t, T>> = buffer.chunks.iter().zip(&buffer.keeps_grad).filter(|(_, &k)| k).map(|(c, _)| *c).collect();
    let x_kept = Var::concat_rows(&kept);
    let dmd = dmd_loss(x_kept, &eps_real, &eps_fake);

    let (_, feats) = score_forward(cfg, &nets.fake.detached(), ctx, &noising, noising.apply(seq))?;
    let g = gan_g_loss(disc_logit(&nets.disc.detached(), feats));
    Ok((dmd, g))
}

/// Diffusion loss of the fake score on detached student samples.
pub fn fake_score_loss<'t, T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    dcfg: &DistillConfig,
    fake: &Bound<'t, T>,
    ctx: &RolloutContext<T>,
    samples: &[Tensor<T>],
    kept: &[bool],
    rng: &mut R,
) -> Result<Var<'t, T>> {
    let tape = fake.get("high.in.w").tape();
    let t = dcfg.draw_t(rng);
    let noising = Noising::new(ctx, kept, t, cfg.channels(), rng);
    let refs: Vec<&Tensor<T>> = samples.iter().collect();
    let clean = Tensor::concat_rows(&refs);
    let (x0, _) = score_forward(cfg, fake, ctx, &noising, noising.apply(tape.constant(clean.clone())))?;
    let (r0, nr) = noising.rows;
    Ok(x0.mse(tape.constant(clean.slice_rows(r0, nr))))
}

/// Discriminator loss on detached fake-score features of real and generated clips.
pub fn disc_loss<'t, T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    dcfg: &DistillConfig,
    nets: &Nets<'_, 't, T>,
    ctx: &RolloutContext<T>,
    samples: &[Tensor<T>],
    kept: &[bool],
    rng: &mut R,
) -> Result<Var<'t, T>> {
    let tape = nets.disc.get("disc.w1").tape();
    let t = dcfg.draw_t(rng);
    let noising = Noising::new(ctx, kept, t, cfg.channels(), rng);
    let refs: Vec<&Tensor<T>> = samples.iter().collect();
    let fake_in = noising.apply(tape.constant(Tensor::concat_rows(&refs)));
    let real_in = noising.apply(tape.constant(ctx.real.clone()));
    let (_, f_fake) = score_forward(cfg, nets.fake, ctx, &noising, fake_in)?;
    let (_, f_real) = score_forward(cfg, nets.fake, ctx, &noising, real_in)?;
    Ok(gan_d_loss(disc_logit(nets.disc, f_real.detach()), disc_logit(nets.disc, f_fake.detach())))
}

/// The four networks bound on one tape.
pub struct Nets<'b, 't, T> {
    pub student: &'b Bound<'t, T>,
    pub fake: &'b Bound<'t, T>,
    pub real: &'b Bound<'t, T>,
    pub disc: &'b Bound<'t, T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillMetrics {
    pub dmd: f64,
    pub g: f64,
    pub d: f64,
    pub fake: f64,
}

/// Student, fake score (two experts), frozen real score (the teacher) and
/// discriminator head, with their optimizers and update counters.
pub struct DistillState<T> {
    pub model: ModelConfig,
    pub config: DistillConfig,
    pub student: ParamStore<T>,
    pub fake: ParamStore<T>,
    pub real: ParamStore<T>,
    pub disc: ParamStore<T>,
    opt_student: Adam<T>,
    opt_fake: Adam<T>,
    opt_disc: Adam<T>,
    pub student_updates: u64,
    pub fake_updates: u64,
    pub disc_updates: u64,
}

impl<T: Scalar> DistillState<T> {
    /// The fake score starts as a copy of the teacher.
    pub fn new(model: ModelConfig, config: DistillConfig, teacher: ParamStore<T>, student: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd15c);
        let disc = init_disc(model.dim, &mut rng);
        let adam = |lr| Adam::new(AdamConfig { lr, ..AdamConfig::default() });
        Ok(Self {
            opt_student: adam(config.lr_student),
            opt_fake: adam(config.lr_fake),
            opt_disc: adam(config.lr_disc),
            model,
            fake: teacher.clone(),
            real: teacher,
            disc,
            student,
            config,
            student_updates: 0,
            fake_updates: 0,
            disc_updates: 0,
        })
    }
}

/// One outer step: roll out, update the student on `𝓛_DMD + λ·𝓛_G`, then
/// take `ttur` fake-score steps and one head step on the same rollout.
pub fn self_rollout_train_step<T: Scalar>(state: &mut DistillState<T>, ctx: &RolloutContext<T>, seed: u64) -> Result<DistillMetrics> {
    let (cfg, dcfg) = (state.model.clone(), state.config.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dmd, g, samples, kept) = {
        let tape = Tape::new();
        let student = Bound::trainable(&tape, &state.student);
        let fake = Bound::frozen(&tape, &state.fake);
        let real = Bound::frozen(&tape, &state.real);
        let disc = Bound::frozen(&tape, &state.disc);
        let nets = Nets { student: &student, fake: &fake, real: &real, disc: &disc };
        let buffer = self_rollout(&cfg, &dcfg, &student, ctx, &mut rng)?;
        let (dmd, g) = generator_losses(&cfg, &dcfg, &nets, ctx, &buffer, &mut rng)?;
        let total = dmd.add(g.scale(T::lit(dcfg.lambda_adv)));
        let grads = student.grads(&tape.backward(total));
        state.opt_student.step(&mut state.student, &grads);
        state.student_updates += 1;
        (dmd.value().item().to_f64_lossy(), g.value().item().to_f64_lossy(), buffer.values(), buffer.keeps_grad.clone())
    };
    let mut fake_loss = 0.0;
    for _ in 0..dcfg.ttur {
        let tape = Tape::new();
        let fake = Bound::trainable(&tape, &state.fake);
        let loss = fake_score_loss(&cfg, &dcfg, &fake, ctx, &samples, &kept, &mut rng)?;
        let grads = fake.grads(&tape.backward(loss));
        state.opt_fake.step(&mut state.fake, &grads);
        state.fake_updates += 1;
        fake_loss = loss.value().item().to_f64_lossy();
    }
    let d = {
        let tape = Tape::new();
        let student = Bound::frozen(&tape, &state.student);
        let fake = Bound::frozen(&tape, &state.fake);
        let real = Bound::frozen(&tape, &state.real);
        let disc = Bound::trainable(&tape, &state.disc);
        let nets = Nets { student: &student, fake: &fake, real: &real, disc: &disc };
        let loss = disc_loss(&cfg, &dcfg, &nets, ctx, &samples, &kept, &mut rng)?;
        let grads = disc.grads(&tape.backward(loss));
        state.opt_disc.step(&mut state.disc, &grads);
        state.disc_updates += 1;
        loss.value().item().to_f64_lossy()
    };
    Ok(DistillMetrics { dmd, g, d, fake: fake_loss })
}

#[derive(Serialize)]
struct DistillRecord<'a> {
    step: usize,
    phase: &'a str,
    #[serde(flatten)]
    metrics: &'a DistillMetrics,
}

/// Run `config.steps` outer steps, each on a random horizon-length window of a
/// random sample. Returns every step's metrics.
pub fn train_distill<T: Scalar>(
    state: &mut DistillState<T>,
    samples: &[TrainSample<T>],
    log: &mut MetricsLog,
) -> Result<Vec<DistillMetrics>> {
    if samples.is_empty() {
        return Err(Error::Precondition("no distillation samples".into()));
    }
    let (chunk_len, horizon) = (state.model.chunk_len, state.config.horizon);
    let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed);
    let mut out = Vec::with_capacity(state.config.steps);
    for step in 0..state.config.steps {
        let sample = &samples[rng.gen_range(0..samples.len())];
        let chunks = sample.frames / chunk_len;
        if chunks < horizon {
            return Err(Error::InsufficientFrames { needed: horizon * chunk_len, got: sample.frames });
        }
        let ctx = RolloutContext::from_sample(sample, rng.gen_range(0..=chunks - horizon), horizon, chunk_len)?;
        let metrics = self_rollout_train_step(state, &ctx, rng.gen())?;
        log.record(&DistillRecord { step, phase: "distill", metrics: &metrics })?;
        out.push(metrics);
    }
    Ok(out)
}

/// Gradient norm each loss sends to each parameter group, with every group
/// bound trainable so isolation comes only from the loss construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolationAudit {
    /// Rows: dmd, fake, d, g. Columns: student, fake, real, disc.
    pub norms: [[f64; 4]; 4],
    /// Student gradient norm from `𝓛_DMD + 𝓛_G` through each chunk's generation.
    pub chunk_grad: Vec<f64>,
}

impl IsolationAudit {
    pub const LOSSES: [&'static str; 4] = ["dmd", "fake", "d", "g"];
    pub const GROUPS: [&'static str; 4] = ["student", "fake", "real", "disc"];

    /// Expected pattern: each loss reaches exactly one group.
    pub fn is_isolated(&self) -> bool {
        let expect = [0, 1, 3, 0];
        self.norms.iter().zip(expect).all(|(row, e)| row.iter().enumerate().all(|(j, &v)| (v > 0.0) == (j == e)))
    }
}

pub fn isolation_audit<T: Scalar>(state: &DistillState<T>, ctx: &RolloutContext<T>, seed: u64) -> Result<IsolationAudit> {
    let (cfg, dcfg) = (&state.model, &state.config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::new();
    let student = Bound::trainable(&tape, &state.student);
    let fake = Bound::trainable(&tape, &state.fake);
    let real = Bound::trainable(&tape, &state.real);
    let disc = Bound::trainable(&tape, &state.disc);
    let nets = Nets { student: &student, fake: &fake, real: &real, disc: &disc };
    let copies: Vec<Bound<'_, T>> = (0..ctx.chunks()).map(|_| Bound::trainable(&tape, &state.student)).collect();
    let per_chunk: Vec<&Bound<'_, T>> = copies.iter().collect();
    let buffer = rollout_with(cfg, dcfg, &per_chunk, ctx, &mut rng)?;
    let (dmd, g) = generator_losses(cfg, dcfg, &nets, ctx, &buffer, &mut rng)?;
    let samples = buffer.values();
    let fl = fake_score_loss(cfg, dcfg, &fake, ctx, &samples, &buffer.keeps_grad, &mut rng)?;
    let dl = disc_loss(cfg, dcfg, &nets, ctx, &samples, &buffer.keeps_grad, &mut rng)?;
    let mut norms = [[0.0; 4]; 4];
    for (i, loss) in [dmd, fl, dl, g].into_iter().enumerate() {
        let grads = tape.backward(loss);
        let through_chunks: f64 = copies.iter().map(|b| b.all_grads(&grads).global_norm().powi(2)).sum();
        norms[i][0] = (student.all_grads(&grads).global_norm().powi(2) + through_chunks).sqrt();
        for (j, b) in [&fake, &real, &disc].into_iter().enumerate() {
            norms[i][j + 1] = b.all_grads(&grads).global_norm();
        }
    }
    let grads = tape.backward(dmd.add(g));
    let chunk_grad = copies.iter().map(|b| b.all_grads(&grads).global_norm()).collect();
    Ok(IsolationAudit { norms, chunk_grad })
}
