use std::io::{Read, Write};
use std::net::TcpStream;
use std::thread;
use std::time::{Duration, Instant};

use lbw_core::inference::SessionConfig;
use lbw_core::model::checkpoint::{Checkpoint, CheckpointMeta};
use lbw_core::model::{init_expert, ModelConfig};
use lbw_server::protocol::{encode, ActionPayload, Decoder, Message};
use lbw_server::{ServeConfig, Server};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model() -> ModelConfig {
    ModelConfig { frame_height: 8, frame_width: 8, patch: 4, chunk_len: 2, dim: 8, depth: 2, heads: 2, time_dim: 4, vocab: 16, ..ModelConfig::default() }
}

fn start(fps: f64) -> std::net::SocketAddr {
    let cfg = model();
    let ckpt = Checkpoint {
        meta: CheckpointMeta { kind: "student".into(), config: cfg.clone(), extra: serde_json::Value::Null },
        params: init_expert(&cfg, &mut ChaCha8Rng::seed_from_u64(1)),
    };
    let config = ServeConfig {
        port: 0,
        prompt: "desk".into(),
        session: SessionConfig { fps, ..SessionConfig::default() },
        ..ServeConfig::default()
    };
    let server = Server::bind(config, ckpt).unwrap();
    let addr = server.local_addr().unwrap();
    thread::spawn(move || server.serve_one().unwrap());
    addr
}

fn action(i: usize) -> Message {
    Message::Action(ActionPayload { keys: 1, yaw_delta: 0.05, pitch_delta: 0.0, timestamp: i as f64 / 8.0 })
}

struct Client {
    stream: TcpStream,
    decoder: Decoder,
}

impl Client {
    fn connect(addr: std::net::SocketAddr) -> Self {
        let stream = TcpStream::connect(addr).unwrap();
        stream.set_read_timeout(Some(Duration::from_millis(20))).unwrap();
        Self { stream, decoder: Decoder::new() }
    }

    fn send(&mut self, m: &Message) {
        self.stream.write_all(&encode(m)).unwrap();
    }

    /// Messages until `done` returns true, or panic after a deadline.
    fn until(&mut self, mut done: impl FnMut(&Message) -> bool) -> Vec<Message> {
        let deadline = Instant::now() + Duration::from_secs(20);
        let mut out = Vec::new();
        let mut buf = [0u8; 4096];
        loop {
            while let Some(m) = self.decoder.next() {
                let m = m.unwrap();
                let stop = done(&m);
                out.push(m);
                if stop {
                    return out;
                }
            }
            assert!(Instant::now() < deadline, "timed out after {} messages", out.len());
            match self.stream.read(&mut buf) {
                Ok(0) => panic!("server closed"),
                Ok(n) => self.decoder.feed(&buf[..n]),
                Err(_) => {}
            }
        }
    }
}

fn frame_index(m: &Message) -> Option<(u32, u8)> {
    match m {
        Message::Frame(f) => Some((f.chunk, f.frame)),
        _ => None,
    }
}

#[test]
fn scripted_client_receives_ordered_frames() {
    let addr = start(64.0);
    let mut c = Client::connect(addr);
    for i in 0..16 {
        c.send(&action(i));
    }
    let mut frames = 0;
    let msgs = c.until(|m| {
        frames += frame_index(m).is_some() as usize;
        frames == 16
    });
    let idx: Vec<(u32, u8)> = msgs.iter().filter_map(frame_index).collect();
    assert_eq!(idx.len(), 16);
    assert_eq!(idx[0], (0, 0));
    assert!(idx.windows(2).all(|w| w[0] < w[1]), "{idx:?}");
    for m in &msgs {
        if let Message::Frame(f) = m {
            assert_eq!(f.rgb.len(), 3 * 8 * 8);
        }
    }
}

#[test]
fn generation_continues_without_actions() {
    let mut c = Client::connect(start(200.0));
    let mut frames = 0;
    c.until(|m| {
        frames += frame_index(m).is_some() as usize;
        frames == 10
    });
}

#[test]
fn prompt_reset_stats_and_errors_keep_the_connection() {
    let mut c = Client::connect(start(100.0));
    c.until(|m| frame_index(m).is_some_and(|(chunk, _)| chunk >= 2));

    c.send(&Message::Prompt("night".into()));
    c.until(|m| *m == Message::Prompt("night".into()));

    let mut unknown = encode(&Message::Reset);
    unknown[5] = 42;
    c.stream.write_all(&unknown).unwrap();
    c.until(|m| matches!(m, Message::Error { code: 5, .. }));

    c.send(&action(0));
    c.send(&Message::StatsReq);
    let msgs = c.until(|m| matches!(m, Message::Stats(_)));
    let Some(Message::Stats(json)) = msgs.last() else { unreachable!() };
    let stats: serde_json::Value = serde_json::from_str(json).unwrap();
    assert!(stats["chunks"].as_u64().unwrap() >= 3);
    assert_eq!(stats["protocol_errors"].as_u64(), Some(1));
    assert_eq!(stats["last_action_timestamp"].as_f64(), Some(0.0));

    c.send(&Message::Reset);
    c.until(|m| frame_index(m) == Some((0, 0)));
    c.until(|m| frame_index(m) == Some((1, 0)));
}

#[test]
fn websocket_channel_carries_identical_framing() {
    let addr = start(100.0);
    let (mut ws, _) = tungstenite::client::connect(format!("ws://{addr}/")).unwrap();
    ws.send(tungstenite::Message::Binary(encode(&action(0)))).unwrap();
    ws.send(tungstenite::Message::Binary(encode(&Message::Prompt("day".into())))).unwrap();
    let mut decoder = Decoder::new();
    let mut seen = Vec::new();
    while seen.iter().filter(|m| frame_index(m).is_some()).count() < 6 {
        if let tungstenite::Message::Binary(b) = ws.read().unwrap() {
            decoder.feed(&b);
            while let Some(m) = decoder.next() {
                seen.push(m.unwrap());
            }
        }
    }
    assert!(seen.contains(&Message::Prompt("day".into())));
    let idx: Vec<_> = seen.iter().filter_map(frame_index).collect();
    assert_eq!(idx[0], (0, 0));
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
}
