use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lbw_core::agent::{agent_drive, plan_targets, Agent, AgentConfig, PlanToken};
use lbw_core::data::{filter_clip, make_clip, read_shard, write_shard, ClipRecord, FilterDecision, FilterThresholds};
use lbw_core::diffusion::{student_from_teacher, train_causal, train_teacher, TrainConfig, TrainSample};
use lbw_core::distillation::{train_distill, DistillConfig, DistillState};
use lbw_core::geometry::trajectory::{gen_gameplay_path, gen_rotation_path, gen_waypoint_path, GameplayScenario};
use lbw_core::inference::{start_session, SessionConfig};
use lbw_core::metrics::MetricsLog;
use lbw_core::model::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta};
use lbw_core::model::{init_teacher, ModelConfig};
use lbw_core::params::{Adam, AdamConfig, ParamStore};
use lbw_core::rig::{loss_endpoints, train_event_rig, train_world_rig, EventRigConfig, RigConfig};
use lbw_core::world::spec::build_world;
use lbw_server::{ServeConfig, Server};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "lbw", about = "Desk-scale interactive world model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render, profile, filter and caption oracle clips into a shard.
    Data(DataArgs),
    /// Train the teacher, the causal student, or the distilled student.
    #[command(subcommand)]
    Train(Train),
    /// Host a streaming session over TCP and WebSocket.
    Serve(ServeArgs),
    /// Train or run the action agent.
    #[command(subcommand)]
    Agent(AgentCmd),
    /// Train an overfit rig and print its probes.
    Rig {
        #[arg(value_parser = ["world", "event"])]
        which: String,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    clips: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
}

#[derive(Args)]
struct Common {
    /// Training shard.
    #[arg(long)]
    data: PathBuf,
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines metrics log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Train {
    /// Two-expert bidirectional teacher with the chunk curriculum.
    Teacher(Common),
    /// Causal student from a teacher's high-noise expert.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Few-step student by self-rollout distillation.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        /// Causal student to start from; the teacher's high expert otherwise.
        #[arg(long)]
        student: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 7878)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 16.0)]
    fps: f64,
    #[arg(long, default_value_t = 8)]
    cache_chunks: usize,
    #[arg(long, default_value_t = 4)]
    steps: usize,
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum AgentCmd {
    /// Behavior cloning on the start frames of shard clips.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Closed loop: the agent plans, the world model renders.
    Drive {
        #[arg(long)]
        agent: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long, default_value_t = 8)]
        chunks: usize,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LBW_LOG", "info")).init();
    match Cli::parse().command {
        Command::Data(a) => data(a),
        Command::Train(t) => train(t),
        Command::Serve(a) => serve(a),
        Command::Agent(a) => agent(a),
        Command::Rig { which } => rig(&which),
    }
}

fn data(a: DataArgs) -> Result<()> {
    let scenarios = [GameplayScenario::FreeNavigation, GameplayScenario::LoopRoaming, GameplayScenario::BackwardNavigation];
    let thresholds = FilterThresholds { min_height: a.height, min_width: a.width, ..FilterThresholds::default() };
    let mut kept = Vec::new();
    for i in 0..a.clips {
        let seed = a.seed + i as u64;
        let world = build_world(seed);
        let traj = match i % 3 {
            0 => gen_rotation_path(1, std::f64::consts::FRAC_PI_2, 8.0, seed)?,
            1 => gen_waypoint_path(3, 0.3, &world, seed)?,
            _ => gen_gameplay_path(scenarios[i / 3 % scenarios.len()], 48, &world, seed)?,
        };
        let clip = make_clip(seed, vec![], traj, a.height, a.width)?;
        match filter_clip(&clip.attributes, &thresholds) {
            FilterDecision::Keep => kept.push(clip),
            FilterDecision::Drop(reason) => info!("clip {i} dropped: {reason:?}"),
        }
    }
    if kept.is_empty() {
        bail!("every clip was filtered out");
    }
    let manifest = write_shard(&kept, &a.out)?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}

fn load_samples(path: &Path, cfg: &TrainConfig) -> Result<(ModelConfig, Vec<ClipRecord>, Vec<TrainSample<f32>>)> {
    let clips = read_shard(path).with_context(|| format!("reading {}", path.display()))?;
    let first = clips.first().and_then(|c| c.frames.first()).context("empty shard")?;
    let model = cfg.model(first.height, first.width);
    model.validate()?;
    let samples = clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            // whole chunks only
            let s = TrainSample::from_clip(c, &model, &c.captions.narrative, cfg.seed + i as u64)?;
            s.window(0, s.frames / model.chunk_len * model.chunk_len)
        })
        .collect::<lbw_core::Result<Vec<_>>>()?;
    Ok((model, clips, samples))
}

fn open_log(path: &Option<PathBuf>) -> Result<MetricsLog> {
    Ok(match path {
        Some(p) => MetricsLog::create(p)?,
        None => MetricsLog::discard(),
    })
}

fn read_text(path: &Option<PathBuf>) -> Result<Option<String>> {
    path.as_ref().map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))).transpose()
}

fn save(kind: &str, model: &ModelConfig, params: &ParamStore<f32>, extra: serde_json::Value, out: &Path) -> Result<()> {
    let ckpt = Checkpoint { meta: CheckpointMeta { kind: kind.into(), config: model.clone(), extra }, params: params.clone() };
    write_checkpoint(&ckpt, out)?;
    info!("wrote {kind} checkpoint {}", out.display());
    Ok(())
}

fn expect_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    if ckpt.meta.kind != kind {
        bail!("expected a {kind} checkpoint, found {}", ckpt.meta.kind);
    }
    Ok(())
}

fn train(t: Train) -> Result<()> {
    match t {
        Train::Teacher(c) => {
            let cfg = read_text(&c.config)?.map_or(Ok(TrainConfig::default()), |s| TrainConfig::from_toml(&s))?;
            let (model, _, samples) = load_samples(&c.data, &cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut teacher = init_teacher::<f32, _>(&model, &mut rng);
            let mut opt = Adam::new(cfg.adam());
            let losses = train_teacher(&model, &cfg.curriculum()?, &mut teacher, &mut opt, &samples, cfg.seed, &mut open_log(&c.log)?)?;
            let (first, last) = loss_endpoints(&losses, (losses.len() / 4).clamp(1, 10));
            info!("teacher loss {first:.5} -> {last:.5}");
            save("teacher", &model, &teacher, serde_json::to_value(&cfg)?, &c.out)
        }
        Train::Adapt { common: c, teacher } => {
            let cfg = read_text(&c.config)?.map_or(Ok(TrainConfig::default()), |s| TrainConfig::from_toml(&s))?;
            let teacher = read_checkpoint(&teacher)?;
            expect_kind(&teacher, "teacher")?;
            let (_, _, samples) = load_samples(&c.data, &cfg)?;
            let model = teacher.meta.config.clone();
            let mut student = student_from_teacher(&teacher.params);
            let mut opt = Adam::new(cfg.adam());
            let chunks = cfg.phase_chunks.last().copied().unwrap_or(8);
            let losses = train_causal(&model, &cfg.diffusion(), &mut student, &mut opt, &samples, chunks, cfg.adapt_steps, cfg.seed, &mut open_log(&c.log)?)?;
            let (first, last) = loss_endpoints(&losses, (losses.len() / 4).clamp(1, 10));
            info!("adapt loss {first:.5} -> {last:.5}");
            save("student", &model, &student, serde_json::to_value(&cfg)?, &c.out)
        }
        Train::Distill { common: c, teacher, student } => {
            let dcfg = read_text(&c.config)?.map_or(Ok(DistillConfig::default()), |s| DistillConfig::from_toml(&s))?;
            let teacher = read_checkpoint(&teacher)?;
            expect_kind(&teacher, "teacher")?;
            let model = teacher.meta.config.clone();
            let start = match student {
                Some(p) => {
                    let s = read_checkpoint(&p)?;
                    expect_kind(&s, "student")?;
                    s.params
                }
                None => student_from_teacher(&teacher.params),
            };
            let tcfg = TrainConfig { patch: model.patch, chunk_len: model.chunk_len, dim: model.dim, depth: model.depth, heads: model.heads, seed: dcfg.seed, ..TrainConfig::default() };
            let (_, _, samples) = load_samples(&c.data, &tcfg)?;
            let mut state = DistillState::new(model.clone(), dcfg.clone(), teacher.params, start)?;
            let metrics = train_distill(&mut state, &samples, &mut open_log(&c.log)?)?;
            if let Some(m) = metrics.last() {
                info!("distill final dmd {:.5} g {:.5} d {:.5} fake {:.5}", m.dmd, m.g, m.d, m.fake);
            }
            save("student", &model, &state.student, serde_json::to_value(&dcfg)?, &c.out)
        }
    }
}

fn serve(a: ServeArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.ckpt)?;
    expect_kind(&ckpt, "student")?;
    let config = ServeConfig {
        port: a.port,
        host: a.host,
        prompt: a.prompt,
        image: None,
        session: SessionConfig { cache_chunks: Some(a.cache_chunks), student_steps: a.steps, seed: a.seed, fps: a.fps, ..SessionConfig::default() },
    };
    Server::bind(config, ckpt)?.run()?;
    Ok(())
}

fn agent(a: AgentCmd) -> Result<()> {
    match a {
        AgentCmd::Train { data, out, steps, lr, seed } => {
            let clips = read_shard(&data)?;
            let first = clips.first().and_then(|c| c.frames.first()).context("empty shard")?;
            let cfg = AgentConfig { frame_height: first.height, frame_width: first.width, ..AgentConfig::default() };
            let batch: Vec<(lbw_core::world::render::Frame, Vec<PlanToken>)> = clips
                .iter()
                .map(|c| (c.frames[0].clone(), plan_targets(&c.trajectory.actions, 1, cfg.steps(), cfg.frames_per_token())))
                .collect();
            let mut agent = Agent::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let mut opt = Adam::new(AdamConfig { lr, ..AdamConfig::default() });
            let mut loss = f64::NAN;
            for step in 0..steps {
                loss = agent.train_step(&mut opt, &batch)?;
                if step % 50 == 0 {
                    info!("agent step {step} loss {loss:.4}");
                }
            }
            info!("agent final loss {loss:.4}");
            write_checkpoint(&agent.to_checkpoint(), &out)?;
            Ok(())
        }
        AgentCmd::Drive { agent, world, chunks, prompt, seed } => {
            let agent = Agent::<f32>::from_checkpoint(&read_checkpoint(&agent)?)?;
            let world = read_checkpoint(&world)?;
            expect_kind(&world, "student")?;
            let m = &world.meta.config;
            let start = lbw_core::world::render::render(
                &build_world(seed),
                &lbw_core::geometry::pose::CameraPose::quantized(
                    nalgebra::Vector3::new(16.5, 0.0, 16.5),
                    0.0,
                    0.0,
                    lbw_core::geometry::pose::Intrinsics::for_resolution(m.frame_height, m.frame_width),
                ),
                m.frame_height,
                m.frame_width,
            )?;
            let config = SessionConfig { seed, ..SessionConfig::default() };
            let mut session = start_session::<f32>(&world, &prompt, Some(&start), config)?;
            let record = agent_drive(&mut session, &agent, &start, chunks)?;
            for (i, plan) in record.plans.iter().enumerate() {
                let head: Vec<String> = plan.tokens.iter().take(4).map(|t| format!("{:?}/{:?}", t.key, t.mouse)).collect();
                println!("chunk {i}: plan starts {}", head.join(" "));
            }
            println!("{}", serde_json::to_string_pretty(&session.stats())?);
            Ok(())
        }
    }
}

fn rig(which: &str) -> Result<()> {
    let mut log = MetricsLog::discard();
    if which == "event" {
        let rig = train_event_rig(&EventRigConfig::default(), &mut log)?;
        println!("{}", serde_json::to_string_pretty(&rig.probe(2, 2)?)?);
    } else {
        let rig = train_world_rig(&RigConfig::default(), &mut log)?;
        let (before, after) = rig.teacher_eval;
        println!("teacher eval loss {before:.5} -> {after:.5} ({:.1}%)", 100.0 * after / before);
        println!("drift psnr per chunk {:?}", rig.drift(4 * rig.training_chunks())?);
        println!("memory psnr {:.2}", rig.memory()?);
    }
    Ok(())
}
