//! End-to-end acceptance suite. Every test prints exactly one `PASS` or
//! `FAIL` line to the real stdout (bypassing libtest capture) and then
//! asserts the same verdict.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;
use std::sync::OnceLock;

use lbw_core::agent::{agent_loss, init_agent, AgentConfig, PlanToken};
use lbw_core::autograd::{central_difference, relative_error, Tape};
use lbw_core::data::{make_clip, read_shard, write_shard, TimedEvent};
use lbw_core::diffusion::{causal_adapt_loss, DiffusionConfig, TrainSample};
use lbw_core::distillation::{
    dmd_loss, gan_d_loss, gan_g_loss, isolation_audit, self_rollout_train_step, DistillConfig, DistillState, RolloutContext,
};
use lbw_core::geometry::plucker::plucker_embed;
use lbw_core::geometry::pose::{CameraPose, Intrinsics};
use lbw_core::geometry::trajectory::{check_collision, gen_rect_path, gen_rotation_path, gen_waypoint_path};
use lbw_core::metrics::MetricsLog;
use lbw_core::model::cache::{CacheEntry, KvCache};
use lbw_core::model::{
    build_block_causal_mask, dit_forward, init_expert, ForwardInput, ModelConfig, TextCond, ACTION_FEATURES,
};
use lbw_core::params::{Bound, ParamStore};
use lbw_core::rig::{train_event_rig, train_world_rig, EventRigConfig, RigConfig, WorldRig, DRIFT_FLOOR_DB, MEMORY_FLOOR_DB};
use lbw_core::streaming::{chunk_kv, generate_chunk, generate_uncached, ChunkCond};
use lbw_core::tensor::Tensor;
use lbw_core::world::spec::{build_world, EventSpec, TimeOfDay, WorldSpec, CLEARANCE};
use lbw_server::protocol::{decode, encode, ActionPayload, Decoded, Decoder, FramePayload, Message, HEADER_LEN};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(name: &str, pass: bool, detail: String) {
    let line = format!("\n{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{name}: {detail}");
}

fn tiny() -> ModelConfig {
    ModelConfig {
        frame_height: 8,
        frame_width: 8,
        patch: 4,
        chunk_len: 2,
        dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        time_dim: 4,
        vocab: 16,
        boundary: 0.5,
        skip_sigma: 0.1,
    }
}

/// Every parameter drawn at random, including zero-initialized heads.
fn random_expert(cfg: &ModelConfig, seed: u64, std: f64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = init_expert::<f64, _>(cfg, &mut rng);
    randomize(&base, seed + 100, std)
}

fn randomize(store: &ParamStore<f64>, seed: u64, std: f64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    for (k, v) in store.iter() {
        p.insert(k.clone(), Tensor::randn(v.rows(), v.cols(), std, &mut rng));
    }
    p
}

fn random_sample(cfg: &ModelConfig, frames: usize, seed: u64) -> TrainSample<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.tokens_per_frame();
    TrainSample {
        latents: Tensor::randn(frames * n, cfg.channels(), 0.5, &mut rng),
        frames,
        tokens_per_frame: n,
        actions: Tensor::randn(frames, ACTION_FEATURES, 1.0, &mut rng),
        text: vec![vec![1, 4]; frames],
        seed,
    }
}

/// Worst relative error between analytic gradients and central differences
/// of `f` over a few entries of every parameter; also the entry count.
fn fd_worst(
    params: &ParamStore<f64>,
    grads: &ParamStore<f64>,
    per_param: usize,
    h: f64,
    f: impl Fn(&ParamStore<f64>) -> f64,
) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, value) in params.iter() {
        let g = grads.get(name).unwrap();
        for i in (0..value.len()).step_by(value.len().div_ceil(per_param)) {
            let numeric = central_difference(
                |v| {
                    let mut p = params.clone();
                    p.insert(name.clone(), v.clone());
                    f(&p)
                },
                value,
                i,
                h,
            );
            worst = worst.max(relative_error(g.data()[i], numeric, 1e-6));
            checked += 1;
        }
    }
    (worst, checked)
}

fn stream_conds<'a>(
    actions: &'a [Tensor<f64>],
    image: &'a Tensor<f64>,
    tokens: &'a [usize],
) -> Vec<ChunkCond<'a, f64>> {
    actions
        .iter()
        .enumerate()
        .map(|(i, a)| ChunkCond { index: i, actions: a, text: TextCond::Uniform(tokens), image: (i == 0).then_some(image) })
        .collect()
}

#[test]
fn cache_and_causality() {
    let cfg = tiny();
    let params = random_expert(&cfg, 3, 0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let actions: Vec<Tensor<f64>> = (0..8).map(|_| Tensor::randn(cfg.chunk_len, ACTION_FEATURES, 1.0, &mut rng)).collect();
    let image = Tensor::<f64>::randn(cfg.tokens_per_frame(), cfg.channels(), 0.5, &mut rng);
    let tokens = [2usize, 5];
    let conds = stream_conds(&actions, &image, &tokens);
    let tape = Tape::new();
    let bound = Bound::frozen(&tape, &params);

    let mut cache = KvCache::new(cfg.depth, cfg.chunk_tokens(), cfg.dim, None);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut streamed = Vec::new();
    for cond in &conds {
        let layers = cache.layers();
        let chunk = generate_chunk(&cfg, &bound, &layers, cond, 3, &mut rng).unwrap().value().clone();
        let kv = chunk_kv(&cfg, &bound, &layers, cond, &chunk).unwrap();
        cache.append(CacheEntry { index: cond.index, layers: kv }).unwrap();
        streamed.push(chunk);
    }
    let recomputed = generate_uncached(&cfg, &bound, &conds, None, 3, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    let agree = streamed.iter().zip(&recomputed).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);

    // perturb the conditioning of chunks 5.. and check chunks 0..5
    let mut perturbed = actions.clone();
    for a in &mut perturbed[5..] {
        *a = a.map(|v| v + 2.5);
    }
    let conds_p = stream_conds(&perturbed, &image, &tokens);
    let moved = generate_uncached(&cfg, &bound, &conds_p, None, 3, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    let past = (0..5).map(|c| recomputed[c].max_abs_diff(&moved[c])).fold(0.0, f64::max);
    let future = (5..8).map(|c| recomputed[c].max_abs_diff(&moved[c])).fold(0.0, f64::max);

    // same check at the model level: bump latents of later chunks
    let frames = 3 * cfg.chunk_len;
    let ct = cfg.chunk_tokens();
    let sample = random_sample(&cfg, frames, 4);
    let t: Vec<f64> = (0..frames).map(|f| [0.0, 0.6, 0.3][f / cfg.chunk_len]).collect();
    let mask = build_block_causal_mask(3, ct);
    let run = |x: &Tensor<f64>| {
        let tape = Tape::new();
        let b = Bound::frozen(&tape, &params);
        let input = ForwardInput { frame_t: &t, actions: &sample.actions, text: TextCond::Uniform(&tokens), first_frame: 0, mask: Some(&mask), cache: None };
        dit_forward(&cfg, &b, "", tape.constant(x.clone()), &input).unwrap().x0.value().clone()
    };
    let base = run(&sample.latents);
    let mut bumped = sample.latents.clone();
    for r in ct..3 * ct {
        for v in bumped.row_mut(r) {
            *v += 3.0;
        }
    }
    let model_past = base.slice_rows(0, ct).max_abs_diff(&run(&bumped).slice_rows(0, ct));

    let pass = agree <= 1e-5 && past <= 1e-6 && model_past <= 1e-6 && future > 0.0;
    verdict(
        "cache_and_causality",
        pass,
        format!("stream vs recompute {agree:.2e} over 8 chunks; future perturbation moves past by {past:.2e} (stream) and {model_past:.2e} (model), future by {future:.2e}"),
    );
}

#[test]
fn gradient_suite() {
    let mut report = Vec::new();

    // every block and every parameter of the backbone
    let cfg = tiny();
    let params = random_expert(&cfg, 1, 0.4);
    let frames = 2 * cfg.chunk_len;
    let sample = random_sample(&cfg, frames, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = Tensor::<f64>::randn(sample.latents.rows(), sample.latents.cols(), 1.0, &mut rng);
    let t: Vec<f64> = (0..frames).map(|f| [0.0, 0.7][f / cfg.chunk_len]).collect();
    let mask = build_block_causal_mask(2, cfg.chunk_tokens());
    let input = ForwardInput { frame_t: &t, actions: &sample.actions, text: TextCond::Uniform(&[2, 5]), first_frame: 0, mask: Some(&mask), cache: None };
    let tape = Tape::new();
    let b = Bound::trainable(&tape, &params);
    let out = dit_forward(&cfg, &b, "", tape.constant(sample.latents.clone()), &input).unwrap();
    let grads = b.all_grads(&tape.backward(out.x0.mul(tape.constant(w.clone())).sum()));
    let (dit, n_dit) = fd_worst(&params, &grads, 3, 1e-5, |p| {
        let tape = Tape::new();
        let b = Bound::frozen(&tape, p);
        let out = dit_forward(&cfg, &b, "", tape.constant(sample.latents.clone()), &input).unwrap();
        out.x0.mul(tape.constant(w.clone())).sum().value().item()
    });
    report.push(("dit", dit, n_dit));

    // causal adaptation objective
    let dcfg = DiffusionConfig::default();
    let params = random_expert(&cfg, 5, 0.3);
    let sample = random_sample(&cfg, 3 * cfg.chunk_len, 6);
    let tape = Tape::new();
    let b = Bound::trainable(&tape, &params);
    let grads = b.all_grads(&tape.backward(causal_adapt_loss(&cfg, &b, &sample, &dcfg, 7).unwrap()));
    let (adapt, n_adapt) = fd_worst(&params, &grads, 2, 1e-5, |p| {
        let tape = Tape::new();
        let b = Bound::frozen(&tape, p);
        causal_adapt_loss(&cfg, &b, &sample, &dcfg, 7).unwrap().value().item()
    });
    report.push(("causal_adapt", adapt, n_adapt));

    // DMD surrogate with its stop-gradient target frozen
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::<f64>::randn(4, 3, 1.0, &mut rng);
    let real = Tensor::randn(4, 3, 1.0, &mut rng);
    let fake = Tensor::randn(4, 3, 1.0, &mut rng);
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let g = tape.backward(dmd_loss(xv, &real, &fake)).get_or_zeros(xv);
    let target = x.sub(&real.sub(&fake));
    let dmd = (0..x.len())
        .map(|i| relative_error(g.data()[i], central_difference(|v| 0.5 * v.sub(&target).sq_norm(), &x, i, 1e-6), 1e-8))
        .fold(0.0, f64::max);
    report.push(("dmd", dmd, x.len()));

    // adversarial losses in both arguments
    let dr = Tensor::<f64>::randn(3, 1, 1.0, &mut rng);
    let df = Tensor::<f64>::randn(3, 1, 1.0, &mut rng);
    let tape = Tape::new();
    let (r, f) = (tape.param(dr.clone()), tape.param(df.clone()));
    let gd = tape.backward(gan_d_loss(r, f));
    let gg = tape.backward(gan_g_loss(f)).get_or_zeros(f);
    let eval = |a: &Tensor<f64>, b: &Tensor<f64>, d: bool| {
        let t = Tape::new();
        let (a, b) = (t.constant(a.clone()), t.constant(b.clone()));
        if d { gan_d_loss(a, b) } else { gan_g_loss(b) }.value().item()
    };
    let mut gan: f64 = 0.0;
    for i in 0..3 {
        gan = gan.max(relative_error(gd.get_or_zeros(r).data()[i], central_difference(|v| eval(v, &df, true), &dr, i, 1e-6), 1e-8));
        gan = gan.max(relative_error(gd.get_or_zeros(f).data()[i], central_difference(|v| eval(&dr, v, true), &df, i, 1e-6), 1e-8));
        gan = gan.max(relative_error(gg.data()[i], central_difference(|v| eval(&dr, v, false), &df, i, 1e-6), 1e-8));
    }
    report.push(("gan", gan, 9));

    // agent plan loss
    let acfg = AgentConfig { frame_height: 16, frame_width: 8, patch: 4, dim: 8, heads: 2, horizon: 2.0, rate: 2.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = init_agent::<f64, _>(&acfg, &mut rng);
    for name in ["key.w", "key.b", "mouse.w", "mouse.b"] {
        let v = params.get(name).unwrap();
        params.insert(name, Tensor::randn(v.rows(), v.cols(), 0.5, &mut rng));
    }
    let obs = Tensor::<f64>::randn(acfg.tokens(), acfg.channels(), 1.0, &mut rng);
    let targets: Vec<PlanToken> = (0..acfg.steps()).map(|s| PlanToken::from_classes(s % 5, (s * 3 + 1) % 5)).collect();
    let tape = Tape::new();
    let b = Bound::trainable(&tape, &params);
    let grads = b.all_grads(&tape.backward(agent_loss(&acfg, &b, &obs, &targets).unwrap()));
    let (agent, n_agent) = fd_worst(&params, &grads, 3, 1e-5, |p| {
        let tape = Tape::new();
        let b = Bound::frozen(&tape, p);
        agent_loss(&acfg, &b, &obs, &targets).unwrap().value().item()
    });
    report.push(("agent", agent, n_agent));

    let pass = report.iter().all(|&(_, e, _)| e <= 1e-4);
    let detail = report.iter().map(|(n, e, c)| format!("{n} {e:.1e} ({c} entries)")).collect::<Vec<_>>().join(", ");
    verdict("gradient_suite", pass, format!("worst relative error, f64, bound 1e-4: {detail}"));
}

fn distill_state(dcfg: DistillConfig) -> DistillState<f64> {
    let cfg = tiny();
    let mut teacher = random_expert(&cfg, 10, 0.3).with_prefix("high.");
    teacher.extend(random_expert(&cfg, 11, 0.3).with_prefix("low."));
    let student = random_expert(&cfg, 12, 0.3);
    let mut s = DistillState::new(cfg, dcfg, teacher, student).unwrap();
    s.fake = randomize(&s.fake, 13, 0.3);
    s.disc = randomize(&s.disc, 14, 0.5);
    s
}

fn distill_ctx(dcfg: &DistillConfig) -> RolloutContext<f64> {
    let cfg = tiny();
    let sample = random_sample(&cfg, dcfg.horizon * cfg.chunk_len, 20);
    RolloutContext::from_sample(&sample, 0, dcfg.horizon, cfg.chunk_len).unwrap()
}

fn small_distill() -> DistillConfig {
    DistillConfig { horizon: 3, truncation: 2, student_steps: 2, ttur: 3, cache_chunks: Some(2), ..DistillConfig::default() }
}

#[test]
fn dmd_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::randn(6, 4, 1.0, &mut rng);
    let real = Tensor::randn(6, 4, 1.0, &mut rng);
    let fake = Tensor::randn(6, 4, 1.0, &mut rng);
    let tape = Tape::new();
    let xv = tape.param(x);
    let g = tape.backward(dmd_loss(xv, &real, &fake)).get_or_zeros(xv);
    let score_diff = g.max_abs_diff(&real.sub(&fake));

    let dcfg = small_distill();
    let audit = isolation_audit(&distill_state(dcfg.clone()), &distill_ctx(&dcfg), 3).unwrap();
    // rows dmd (0) and g (3); columns fake (1) and real (2)
    let leak = [audit.norms[0][1], audit.norms[0][2], audit.norms[3][1], audit.norms[3][2]].into_iter().fold(0.0, f64::max);

    let mut s = distill_state(dcfg.clone());
    let c = distill_ctx(&dcfg);
    let real_fp = s.real.fingerprint();
    let steps = 4u64;
    for step in 0..steps {
        self_rollout_train_step(&mut s, &c, step).unwrap();
    }
    let ttur = s.fake_updates == steps * dcfg.ttur as u64 && s.student_updates == steps && s.disc_updates == steps;
    let pass = score_diff <= 1e-12 && leak == 0.0 && ttur && s.real.fingerprint() == real_fp;
    verdict(
        "dmd_algebra",
        pass,
        format!(
            "|grad - (mu_real - mu_fake)| {score_diff:.1e}; generator-objective grad norm into real/fake {leak:.1e}; updates student {} fake {} disc {} at ratio {}:1",
            s.student_updates, s.fake_updates, s.disc_updates, dcfg.ttur
        ),
    );
}

#[test]
fn update_isolation_audit() {
    let dcfg = small_distill();
    let audit = isolation_audit(&distill_state(dcfg.clone()), &distill_ctx(&dcfg), 3).unwrap();
    let rows = audit
        .norms
        .iter()
        .zip(lbw_core::distillation::IsolationAudit::LOSSES)
        .map(|(r, n)| format!("{n} [{}]", r.iter().map(|v| format!("{v:.1e}")).collect::<Vec<_>>().join(" ")))
        .collect::<Vec<_>>()
        .join(", ");
    verdict("update_isolation_audit", audit.is_isolated(), format!("gradient norms by loss over student/fake/real/disc: {rows}"));
}

fn world_rig() -> &'static WorldRig {
    static RIG: OnceLock<WorldRig> = OnceLock::new();
    RIG.get_or_init(|| train_world_rig(&RigConfig::default(), &mut MetricsLog::discard()).unwrap())
}

#[test]
fn overfit_rig() {
    let rig = world_rig();
    let (before, after) = rig.teacher_eval;
    let ratio = after / before;
    let steps = rig.teacher_losses.len();
    let chunks = 4 * rig.training_chunks();
    let drift = rig.drift(chunks).unwrap();
    let worst = drift.iter().cloned().fold(f64::INFINITY, f64::min);
    let total = rig.timings.teacher_s + rig.timings.adapt_s + rig.timings.distill_s;
    let pass = ratio < 0.1 && steps <= 500 && worst >= DRIFT_FLOOR_DB && total <= 1800.0;
    verdict(
        "overfit_rig",
        pass,
        format!(
            "teacher loss {after:.4} vs initial {before:.4} ({:.1}%) after {steps} steps; 4-step student worst chunk PSNR {worst:.2} dB over {chunks} chunks (floor {DRIFT_FLOOR_DB}); training {total:.0} s",
            100.0 * ratio
        ),
    );
}

#[test]
fn memory_probe() {
    let rig = world_rig();
    let p = rig.memory().unwrap();
    verdict("memory_probe", p >= MEMORY_FLOOR_DB, format!("return view vs initial view {p:.2} dB (floor {MEMORY_FLOOR_DB})"));
}

#[test]
fn promptable_events() {
    let rig = train_event_rig(&EventRigConfig::default(), &mut MetricsLog::discard()).unwrap();
    let probe = rig.probe(2, 4).unwrap();
    let pass = probe.chunk_luminance[..probe.swap_after].iter().all(|&l| l > probe.midpoint) && probe.chunks_to_flip.is_some_and(|c| c <= 2);
    verdict(
        "promptable_events",
        pass,
        format!(
            "midpoint {:.3}, chunk luminance {:?}, flip after {:?} chunk(s)",
            probe.midpoint,
            probe.chunk_luminance.iter().map(|l| (l * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            probe.chunks_to_flip
        ),
    );
}

fn fuzz_protocol(n: u32) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf022);
    let seeds = [
        encode(&Message::Action(ActionPayload { keys: 9, yaw_delta: 0.1, pitch_delta: 0.0, timestamp: 1.5 })),
        encode(&Message::Frame(FramePayload { chunk: 1, frame: 0, height: 2, width: 1, rgb: vec![7; 6] })),
        encode(&Message::Prompt("night".into())),
        encode(&Message::Reset),
    ];
    let mut buf = Vec::with_capacity(64);
    for i in 0..n {
        buf.clear();
        if i % 2 == 0 {
            let len = rng.gen_range(0..48);
            buf.extend((0..len).map(|_| rng.gen::<u8>()));
        } else {
            buf.extend(&seeds[rng.gen_range(0..seeds.len())]);
            for _ in 0..rng.gen_range(0..4) {
                let j = rng.gen_range(0..buf.len());
                buf[j] = rng.gen();
            }
            let keep = rng.gen_range(0..=buf.len());
            buf.truncate(keep);
        }
        let bytes = &buf;
        let ok = std::panic::catch_unwind(|| {
            let typed = match decode(bytes) {
                Decoded::Message(m, used) => used >= HEADER_LEN && used <= bytes.len() && encode(&m) == bytes[..used],
                Decoded::NeedMore(k) => k > 0,
                Decoded::Error(_, used) => used >= 1 && used <= bytes.len(),
            };
            let mut d = Decoder::new();
            d.feed(bytes);
            let mut guard = 0;
            while d.next().is_some() {
                guard += 1;
                if guard > bytes.len() + 1 {
                    return false;
                }
            }
            typed
        });
        if !matches!(ok, Ok(true)) {
            return Err(format!("input {i}: {}", bytes.iter().map(|b| format!("{b:02x}")).collect::<String>()));
        }
    }
    Ok(())
}

#[test]
fn data_engine() {
    let mut failures = Vec::new();

    let empty = WorldSpec::empty(0);
    let mut clear = 0;
    let mut closure: f64 = 0.0;
    let mut yaw_closure: f64 = 0.0;
    for seed in 0..1000u64 {
        let rect = gen_rect_path(3.0 + (seed % 5) as f64, 1.0, 8.0, seed).unwrap();
        if check_collision(&rect, &empty, CLEARANCE).unwrap().is_clear() {
            clear += 1;
        }
        let rot = gen_rotation_path(1, FRAC_PI_2, 8.0, seed).unwrap();
        for t in [&rect, &rot] {
            let (a, b) = (&t.poses[0], t.poses.last().unwrap());
            closure = closure.max((a.position - b.position).norm());
            let dyaw = (b.yaw() - a.yaw()).rem_euclid(2.0 * PI);
            yaw_closure = yaw_closure.max(dyaw.min(2.0 * PI - dyaw));
        }
    }
    // waypoint paths in pillared worlds; seeds whose sampler gives up emit nothing
    let (mut wp_clear, mut wp_made, mut rejected, mut seed) = (0, 0, 0, 0u64);
    while wp_made < 1000 {
        let world = build_world(seed);
        match gen_waypoint_path(2 + (seed % 4) as usize, 0.5, &world, seed) {
            Ok(wp) => {
                wp_made += 1;
                if check_collision(&wp, &world, CLEARANCE).unwrap().is_clear() {
                    wp_clear += 1;
                }
            }
            Err(lbw_core::Error::SamplingExhausted { .. }) => rejected += 1,
            Err(e) => panic!("seed {seed}: {e}"),
        }
        seed += 1;
    }
    if clear != 1000 || wp_clear != 1000 || closure > 1e-6 || yaw_closure > 1e-5 {
        failures.push("trajectories");
    }

    let t = gen_rotation_path(1, FRAC_PI_2, 8.0, 4).unwrap();
    let night = TimedEvent { frame: 10, event: EventSpec::SetTimeOfDay(TimeOfDay::Night) };
    let clips = vec![make_clip(4, vec![night], t.clone(), 16, 16).unwrap(), make_clip(5, vec![], t, 16, 16).unwrap()];
    let value = serde_json::to_value(&clips[0].captions.dense_temporal[0]).unwrap();
    let mut keys: Vec<String> = value.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    let schema = keys == ["Event", "caption", "end_time", "start_time"];
    if !schema {
        failures.push("caption schema");
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clips.lbw");
    write_shard(&clips, &path).unwrap();
    let lossless = read_shard(&path).unwrap() == clips;
    if !lossless {
        failures.push("shard");
    }

    let fuzz = fuzz_protocol(1_000_000);
    if fuzz.is_err() {
        failures.push("protocol fuzz");
    }

    verdict(
        "data_engine",
        failures.is_empty(),
        format!(
            "{clear}/1000 rect and {wp_clear}/1000 waypoint paths collision-free ({rejected} waypoint seeds rejected by the sampler); loop closure {closure:.1e} position, {yaw_closure:.1e} yaw; dense caption keys {keys:?}; shard round trip {}; 10^6 protocol inputs {}",
            if lossless { "lossless" } else { "lossy" },
            fuzz.map_or_else(|e| format!("failed at {e}"), |_| "typed".into())
        ),
    );
}

#[test]
fn plucker_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9106);
    let (mut unit, mut ortho): (f64, f64) = (0.0, 0.0);
    let mut poses = 0;
    while poses < 10_000 {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        if q.iter().map(|v| v * v).sum::<f64>() < 1e-3 {
            continue;
        }
        let pose = CameraPose {
            position: Vector3::from_fn(|_, _| rng.gen_range(-20.0..20.0)),
            orientation: UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])),
            intrinsics: Intrinsics {
                fx: rng.gen_range(1.0..50.0),
                fy: rng.gen_range(1.0..50.0),
                cx: rng.gen_range(-10.0..10.0),
                cy: rng.gen_range(-10.0..10.0),
            },
        };
        let map = plucker_embed(&pose, 4, 3).unwrap();
        for row in 0..map.height {
            for col in 0..map.width {
                let px = map.at(row, col);
                let d = Vector3::new(px[0], px[1], px[2]);
                let m = Vector3::new(px[3], px[4], px[5]);
                unit = unit.max((d.norm() - 1.0).abs());
                ortho = ortho.max(d.dot(&m).abs());
            }
        }
        poses += 1;
    }
    verdict(
        "plucker_suite",
        unit <= 1e-9 && ortho <= 1e-9,
        format!("{poses} random poses x 12 pixels: max ||d| - 1| {unit:.1e}, max |d.m| {ortho:.1e} (bound 1e-9)"),
    );
}
