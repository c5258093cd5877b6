mod common;

use common::tiny;
use lbw_core::agent::{agent_drive, agent_loss, init_agent, plan_targets, Agent, AgentConfig, PlanToken};
use lbw_core::autograd::{central_difference, relative_error, Tape};
use lbw_core::geometry::trajectory::{gen_gameplay_path, GameplayScenario};
use lbw_core::inference::{start_session, SessionConfig};
use lbw_core::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use lbw_core::params::{Adam, AdamConfig, Bound};
use lbw_core::tensor::Tensor;
use lbw_core::world::render::{render, Frame};
use lbw_core::world::spec::build_world;
use lbw_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> AgentConfig {
    AgentConfig { frame_height: 16, frame_width: 16, patch: 8, dim: 16, heads: 2, ..AgentConfig::default() }
}

/// Start frame of a seeded navigation clip and the plan its actions imply.
fn demonstration(cfg: &AgentConfig) -> (Frame, Vec<PlanToken>) {
    let world = build_world(7);
    let traj = gen_gameplay_path(GameplayScenario::FreeNavigation, 96, &world, 3).unwrap();
    let frame = render(&world, &traj.poses[0], cfg.frame_height, cfg.frame_width).unwrap();
    let targets = plan_targets(&traj.actions, 1, cfg.steps(), cfg.frames_per_token());
    (frame, targets)
}

#[test]
fn loss_gradient_passes_finite_differences() {
    let cfg = AgentConfig { frame_height: 16, frame_width: 8, patch: 4, dim: 8, heads: 2, horizon: 2.0, rate: 2.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = init_agent::<f64, _>(&cfg, &mut rng);
    // nonzero heads so every path carries gradient
    for name in ["key.w", "key.b", "mouse.w", "mouse.b"] {
        let v = params.get(name).unwrap();
        params.insert(name, Tensor::randn(v.rows(), v.cols(), 0.5, &mut rng));
    }
    let obs = Tensor::<f64>::randn(cfg.tokens(), cfg.channels(), 1.0, &mut rng);
    let targets: Vec<PlanToken> = (0..cfg.steps()).map(|s| PlanToken::from_classes(s % 5, (s * 3 + 1) % 5)).collect();
    let tape = Tape::new();
    let bound = Bound::trainable(&tape, &params);
    let grads = bound.all_grads(&tape.backward(agent_loss(&cfg, &bound, &obs, &targets).unwrap()));
    let mut checked = 0;
    for (name, value) in params.iter() {
        let g = grads.get(name).unwrap();
        for i in (0..value.len()).step_by(value.len().div_ceil(3)) {
            let numeric = central_difference(
                |v| {
                    let mut p = params.clone();
                    p.insert(name.clone(), v.clone());
                    let tape = Tape::new();
                    let bound = Bound::frozen(&tape, &p);
                    agent_loss(&cfg, &bound, &obs, &targets).unwrap().value().item()
                },
                value,
                i,
                1e-5,
            );
            let err = relative_error(g.data()[i], numeric, 1e-6);
            assert!(err <= 1e-4, "{name}[{i}]: analytic {} numeric {numeric} rel {err}", g.data()[i]);
            checked += 1;
        }
    }
    assert!(checked > 40);
}

#[test]
fn overfits_one_demonstration() {
    let cfg = small();
    let (frame, targets) = demonstration(&cfg);
    assert_eq!(targets.len(), 40);
    let distinct: std::collections::HashSet<_> = targets.iter().collect();
    assert!(distinct.len() >= 3, "demonstration too uniform: {distinct:?}");
    let mut agent = Agent::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut opt = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() });
    let batch = vec![(frame.clone(), targets.clone())];
    let losses: Vec<f64> = (0..150).map(|_| agent.train_step(&mut opt, &batch).unwrap()).collect();
    assert!((losses[0] - 2.0 * 5f64.ln()).abs() < 1e-9);
    let windows: Vec<f64> = losses.chunks(25).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "smoothed losses {windows:?}");
    let plan = agent.predict(&frame).unwrap();
    let hits = plan
        .tokens
        .iter()
        .zip(&targets)
        .map(|(p, t)| (p.key == t.key) as usize + (p.mouse == t.mouse) as usize)
        .sum::<usize>();
    let accuracy = hits as f64 / (2 * targets.len()) as f64;
    assert!(accuracy >= 0.95, "token accuracy {accuracy}");
    assert_eq!(agent.predict(&frame).unwrap(), plan);
}

#[test]
fn plan_length_does_not_depend_on_observation() {
    let cfg = small();
    let agent = Agent::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    for rgb in [[0, 0, 0], [255, 255, 255], [10, 200, 40]] {
        assert_eq!(agent.predict(&Frame::filled(16, 16, rgb)).unwrap().tokens.len(), cfg.steps());
    }
    assert!(matches!(agent.predict(&Frame::new(8, 16)), Err(Error::ResolutionMismatch { .. })));
}

#[test]
fn misaligned_batch_is_rejected() {
    let cfg = small();
    let mut agent = Agent::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut opt = Adam::new(AdamConfig::default());
    let batch = vec![(Frame::new(16, 16), vec![PlanToken::default(); 3])];
    assert!(matches!(agent.train_step(&mut opt, &batch), Err(Error::ActionCount { expected: 40, got: 3 })));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let agent = Agent::<f32>::new(small(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let back = Agent::<f32>::from_checkpoint(&load_checkpoint(&save_checkpoint(&agent.to_checkpoint())).unwrap()).unwrap();
    let f = Frame::filled(16, 16, [90, 30, 200]);
    assert_eq!(agent.predict(&f).unwrap(), back.predict(&f).unwrap());
}

#[test]
fn closed_loop_drives_a_session() {
    let model = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ckpt = Checkpoint {
        meta: CheckpointMeta { kind: "student".into(), config: model.clone(), extra: serde_json::Value::Null },
        params: common::random_expert(&model, 6, 0.3).cast(),
    };
    let cfg = AgentConfig { frame_height: 8, frame_width: 8, patch: 4, dim: 8, heads: 2, ..AgentConfig::default() };
    let agent = Agent::<f64>::new(cfg, &mut rng).unwrap();
    let start = Frame::filled(8, 8, [120, 120, 120]);
    let mut session = start_session::<f64>(&ckpt, "desk", Some(&start), SessionConfig::default()).unwrap();
    let empty = agent_drive(&mut session, &agent, &start, 0).unwrap();
    assert!(empty.frames.is_empty() && empty.plans.is_empty());
    let record = agent_drive(&mut session, &agent, &start, 5).unwrap();
    assert_eq!(record.frames.len(), 5 * model.chunk_len);
    assert_eq!(record.plans.len(), 5);
    assert_eq!(session.chunk_index(), 5);
}
