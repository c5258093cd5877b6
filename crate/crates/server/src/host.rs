//! Session host. Per connection, an I/O context decodes client messages into
//! the session ingress queue and drains the egress queue to the socket, while
//! a generation context owns the session and produces frames. The two share
//! nothing else.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use lbw_core::inference::{start_session, SessionConfig, StatsReport};
use lbw_core::model::checkpoint::Checkpoint;
use lbw_core::world::render::Frame;
use log::{debug, info, warn};
use serde::Serialize;
use tungstenite::WebSocket;

use crate::protocol::{encode, ActionPayload, Decoder, ErrorCode, FramePayload, Message, ProtocolError};

/// Frames allowed to wait for the socket before the oldest are dropped.
pub const EGRESS_FRAME_BUDGET: usize = 64;
/// Error replies per second before further replies are suppressed.
const ERROR_REPLY_RATE: f64 = 20.0;
const POLL: Duration = Duration::from_millis(2);

#[derive(Debug, thiserror::Error)]
pub enum HostError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Core(#[from] lbw_core::Error),
    #[error("websocket: {0}")]
    WebSocket(String),
}

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub port: u16,
    /// Bind address; loopback unless set otherwise.
    pub host: String,
    pub prompt: String,
    pub image: Option<Frame>,
    pub session: SessionConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { port: 7878, host: "127.0.0.1".into(), prompt: String::new(), image: None, session: SessionConfig::default() }
    }
}

#[derive(Debug, Serialize)]
struct StatsPayload {
    #[serde(flatten)]
    session: StatsReport,
    protocol_errors: u64,
    suppressed_errors: u64,
    last_action_timestamp: Option<f64>,
    /// Wall-clock seconds since the Unix epoch when the last action arrived.
    last_action_received: Option<f64>,
}

#[derive(Default)]
struct Counters {
    dropped: AtomicU64,
    protocol_errors: AtomicU64,
    suppressed: AtomicU64,
}

/// Outbound messages. Frames beyond the budget evict the oldest queued frame;
/// control replies are never dropped.
#[derive(Default)]
struct Egress {
    queue: Mutex<VecDeque<Message>>,
}

impl Egress {
    fn push(&self, msg: Message, counters: &Counters) {
        let mut q = self.queue.lock().expect("egress lock");
        if matches!(msg, Message::Frame(_)) {
            let frames = q.iter().filter(|m| matches!(m, Message::Frame(_))).count();
            if frames >= EGRESS_FRAME_BUDGET {
                if let Some(i) = q.iter().position(|m| matches!(m, Message::Frame(_))) {
                    q.remove(i);
                    counters.dropped.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        q.push_back(msg);
    }

    fn drain(&self) -> Vec<Message> {
        self.queue.lock().expect("egress lock").drain(..).collect()
    }
}

enum Ingress {
    Action(ActionPayload, f64),
    Prompt(String),
    Reset,
    Stats,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Byte transport carrying the protocol framing.
trait Transport {
    /// Next received bytes; `Ok(None)` when nothing arrived within the poll interval.
    fn recv(&mut self) -> io::Result<Option<Vec<u8>>>;
    fn send(&mut self, bytes: &[u8]) -> io::Result<()>;
}

struct Tcp {
    stream: TcpStream,
    buf: Vec<u8>,
}

fn timed_out(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

impl Transport for Tcp {
    fn recv(&mut self) -> io::Result<Option<Vec<u8>>> {
        match self.stream.read(&mut self.buf) {
            Ok(0) => Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => Ok(Some(self.buf[..n].to_vec())),
            Err(e) if timed_out(&e) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.stream.write_all(bytes)
    }
}

/// Browser channel: each binary message carries one or more protocol frames.
struct Ws {
    socket: WebSocket<TcpStream>,
}

fn ws_io(e: tungstenite::Error) -> io::Error {
    match e {
        tungstenite::Error::Io(e) => e,
        tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed => io::ErrorKind::UnexpectedEof.into(),
        other => io::Error::other(other.to_string()),
    }
}

impl Transport for Ws {
    fn recv(&mut self) -> io::Result<Option<Vec<u8>>> {
        match self.socket.read() {
            Ok(tungstenite::Message::Binary(b)) => Ok(Some(b)),
            Ok(tungstenite::Message::Close(_)) => Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(_) => Ok(None),
            Err(tungstenite::Error::Io(e)) if timed_out(&e) => Ok(None),
            Err(e) => Err(ws_io(e)),
        }
    }

    fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.socket.send(tungstenite::Message::Binary(bytes.to_vec())).map_err(ws_io)
    }
}

/// Token bucket limiting error replies to a misbehaving client.
struct ErrorLimiter {
    tokens: f64,
    last: Instant,
}

impl ErrorLimiter {
    fn new() -> Self {
        Self { tokens: ERROR_REPLY_RATE, last: Instant::now() }
    }

    fn allow(&mut self) -> bool {
        let now = Instant::now();
        self.tokens = (self.tokens + now.duration_since(self.last).as_secs_f64() * ERROR_REPLY_RATE).min(ERROR_REPLY_RATE);
        self.last = now;
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            true
        } else {
            false
        }
    }
}

pub struct Server {
    listener: TcpListener,
    config: ServeConfig,
    checkpoint: Checkpoint,
}

impl Server {
    pub fn bind(config: ServeConfig, checkpoint: Checkpoint) -> Result<Self, HostError> {
        // fail before accepting anyone if the checkpoint cannot host a session
        start_session::<f32>(&checkpoint, &config.prompt, config.image.as_ref(), config.session.clone())?;
        let listener = TcpListener::bind((config.host.as_str(), config.port))?;
        info!("listening on {}", listener.local_addr()?);
        Ok(Self { listener, config, checkpoint })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accept and serve connections one at a time, forever.
    pub fn run(&self) -> Result<(), HostError> {
        loop {
            if let Err(e) = self.serve_one() {
                warn!("connection ended with error: {e}");
            }
        }
    }

    /// Serve a single connection until the client disconnects.
    pub fn serve_one(&self) -> Result<(), HostError> {
        let (stream, peer) = self.listener.accept()?;
        info!("client {peer}");
        stream.set_nodelay(true)?;
        let transport = open_transport(stream)?;
        self.host(transport)
    }

    fn host(&self, mut transport: Box<dyn Transport>) -> Result<(), HostError> {
        let counters = Arc::new(Counters::default());
        let egress = Arc::new(Egress::default());
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();
        let session = start_session::<f32>(
            &self.checkpoint,
            &self.config.prompt,
            self.config.image.as_ref(),
            self.config.session.clone(),
        )?;
        let generator = {
            let (egress, counters, stop) = (egress.clone(), counters.clone(), stop.clone());
            thread::spawn(move || generate(session, rx, &egress, &counters, &stop))
        };
        let result = pump(transport.as_mut(), &tx, &egress, &counters);
        stop.store(true, Ordering::Relaxed);
        drop(tx);
        generator.join().expect("generation thread panicked");
        match result {
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof || e.kind() == io::ErrorKind::ConnectionReset => Ok(()),
            other => other.map_err(HostError::from),
        }
    }
}

/// Browser clients open with an HTTP upgrade; anything else speaks raw framing.
fn open_transport(stream: TcpStream) -> Result<Box<dyn Transport>, HostError> {
    stream.set_read_timeout(Some(Duration::from_millis(300)))?;
    let mut head = [0u8; 4];
    let is_ws = match stream.peek(&mut head) {
        Ok(n) => n >= 4 && &head == b"GET ",
        Err(e) if timed_out(&e) => false,
        Err(e) => return Err(e.into()),
    };
    if is_ws {
        stream.set_read_timeout(None)?;
        let socket = tungstenite::accept(stream.try_clone()?).map_err(|e| HostError::WebSocket(e.to_string()))?;
        stream.set_read_timeout(Some(POLL))?;
        debug!("websocket upgrade complete");
        Ok(Box::new(Ws { socket }))
    } else {
        stream.set_read_timeout(Some(POLL))?;
        Ok(Box::new(Tcp { stream, buf: vec![0; 64 * 1024] }))
    }
}

/// I/O context: socket to ingress, egress to socket.
fn pump(transport: &mut dyn Transport, tx: &Sender<Ingress>, egress: &Egress, counters: &Counters) -> io::Result<()> {
    let mut decoder = Decoder::new();
    let mut limiter = ErrorLimiter::new();
    loop {
        if let Some(bytes) = transport.recv()? {
            decoder.feed(&bytes);
            while let Some(next) = decoder.next() {
                let event = match next {
                    Ok(Message::Action(a)) => Ok(Ingress::Action(a, unix_now())),
                    Ok(Message::Prompt(p)) => Ok(Ingress::Prompt(p)),
                    Ok(Message::Reset) => Ok(Ingress::Reset),
                    Ok(Message::StatsReq) => Ok(Ingress::Stats),
                    Ok(other) => Err(ProtocolError::MalformedPayload(format!("{:?} is server-to-client only", other.kind()))),
                    Err(e) => Err(e),
                };
                let reply = match event {
                    Ok(ev) => {
                        // a finished generator leaves nothing to deliver to
                        let _ = tx.send(ev);
                        None
                    }
                    Err(e) => Some(e),
                };
                if let Some(e) = reply {
                    counters.protocol_errors.fetch_add(1, Ordering::Relaxed);
                    if limiter.allow() {
                        egress.push(e.to_message(), counters);
                    } else {
                        counters.suppressed.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
        }
        let out = egress.drain();
        if !out.is_empty() {
            let bytes: Vec<u8> = out.iter().flat_map(encode).collect();
            transport.send(&bytes)?;
        }
    }
}

/// Generation context: sole owner of the session. Runs at the target frame
/// rate whether or not actions arrive; missing actions repeat the last one.
fn generate(
    mut session: lbw_core::inference::Session<f32>,
    rx: Receiver<Ingress>,
    egress: &Egress,
    counters: &Counters,
    stop: &AtomicBool,
) {
    let mut last_action: Option<(f64, f64)> = None;
    let period = if session.config.fps > 0.0 {
        Duration::from_secs_f64(session.model.chunk_len as f64 / session.config.fps)
    } else {
        Duration::ZERO
    };
    while !stop.load(Ordering::Relaxed) {
        let started = Instant::now();
        loop {
            match rx.try_recv() {
                Ok(Ingress::Action(a, received)) => {
                    last_action = Some((a.timestamp, received));
                    session.enqueue_action(a.to_action());
                }
                Ok(Ingress::Prompt(p)) => {
                    session.swap_prompt(&p);
                    // echo acknowledges; the swap lands at the next chunk boundary
                    egress.push(Message::Prompt(p), counters);
                }
                Ok(Ingress::Reset) => session.reset(),
                Ok(Ingress::Stats) => {
                    session.dropped_frames = counters.dropped.load(Ordering::Relaxed);
                    let payload = StatsPayload {
                        session: session.stats(),
                        protocol_errors: counters.protocol_errors.load(Ordering::Relaxed),
                        suppressed_errors: counters.suppressed.load(Ordering::Relaxed),
                        last_action_timestamp: last_action.map(|a| a.0),
                        last_action_received: last_action.map(|a| a.1),
                    };
                    let json = serde_json::to_string(&payload).expect("stats serialize");
                    egress.push(Message::Stats(json), counters);
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return,
            }
        }
        let chunk = session.chunk_index() as u32;
        match session.step() {
            Ok(frames) => {
                for (i, f) in frames.iter().enumerate() {
                    egress.push(Message::Frame(FramePayload::from_frame(chunk, i as u8, f)), counters);
                }
            }
            Err(e) => {
                egress.push(Message::error(ErrorCode::Session, e.to_string()), counters);
                return;
            }
        }
        if let Some(rest) = period.checked_sub(started.elapsed()) {
            thread::sleep(rest);
        }
    }
}

/// Bind and serve forever.
pub fn serve(config: ServeConfig, checkpoint: Checkpoint) -> Result<(), HostError> {
    Server::bind(config, checkpoint)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(chunk: u32) -> Message {
        Message::Frame(FramePayload { chunk, frame: 0, height: 1, width: 1, rgb: vec![0; 3] })
    }

    #[test]
    fn egress_drops_oldest_frames_past_budget_and_keeps_control() {
        let (egress, counters) = (Egress::default(), Counters::default());
        egress.push(Message::Prompt("p".into()), &counters);
        for c in 0..EGRESS_FRAME_BUDGET as u32 + 10 {
            egress.push(frame(c), &counters);
        }
        let out = egress.drain();
        assert_eq!(counters.dropped.load(Ordering::Relaxed), 10);
        assert_eq!(out[0], Message::Prompt("p".into()));
        assert_eq!(out[1], frame(10));
        assert_eq!(out.len(), EGRESS_FRAME_BUDGET + 1);
    }

    #[test]
    fn error_replies_are_rate_limited() {
        let mut l = ErrorLimiter::new();
        let allowed = (0..1000).filter(|_| l.allow()).count();
        assert!(allowed < 40, "{allowed}");
    }
}
