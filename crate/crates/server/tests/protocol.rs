use lbw_server::protocol::{decode, encode, ActionPayload, Decoded, Decoder, FramePayload, Message, HEADER_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn unhex(s: &str) -> Vec<u8> {
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

fn message_from(kind: u64, f: &Value) -> Message {
    let num = |k: &str| f[k].as_f64().unwrap();
    let text = |k: &str| f[k].as_str().unwrap().to_string();
    match kind {
        0 => Message::Action(ActionPayload {
            keys: num("keys") as u8,
            yaw_delta: num("yaw_delta") as f32,
            pitch_delta: num("pitch_delta") as f32,
            timestamp: num("timestamp"),
        }),
        1 => Message::Frame(FramePayload {
            chunk: num("chunk") as u32,
            frame: num("frame") as u8,
            height: num("height") as u16,
            width: num("width") as u16,
            rgb: f["rgb"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as u8).collect(),
        }),
        2 => Message::Prompt(text("text")),
        3 => Message::Reset,
        4 => Message::StatsReq,
        5 => Message::Stats(text("json")),
        6 => Message::Error { code: num("code") as u16, detail: text("detail") },
        k => panic!("unknown type {k}"),
    }
}

#[test]
fn golden_vectors_match_byte_for_byte() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/golden/protocol_vectors.json")).unwrap();
    let golden: Value = serde_json::from_str(&text).unwrap();
    let vectors = golden["vectors"].as_array().unwrap();
    let mut kinds = std::collections::HashSet::new();
    for v in vectors {
        let msg = message_from(v["type"].as_u64().unwrap(), &v["fields"]);
        let bytes = unhex(v["hex"].as_str().unwrap());
        assert_eq!(encode(&msg), bytes, "{}", v["name"]);
        assert_eq!(decode(&bytes), Decoded::Message(msg.clone(), bytes.len()), "{}", v["name"]);
        kinds.insert(msg.kind() as u8);
    }
    assert_eq!(kinds.len(), 7, "every message type has a vector");
}

#[test]
fn action_state_conversion_keeps_bit_layout() {
    use lbw_core::world::action::{ActionState, Keys};
    let a = ActionState::new(Keys::W | Keys::D, 0.0, 0.0, 1.5);
    let p = ActionPayload::from_action(&a);
    assert_eq!(p.keys, 0b0000_1001);
    assert_eq!(p.to_action(), a);
}

fn outcome_is_typed(bytes: &[u8]) {
    match decode(bytes) {
        Decoded::Message(m, n) => {
            assert!(n <= bytes.len() && n >= HEADER_LEN);
            assert_eq!(encode(&m), bytes[..n]);
        }
        Decoded::NeedMore(k) => assert!(k > 0),
        Decoded::Error(_, n) => assert!(n >= 1 && n <= bytes.len()),
    }
    let mut d = Decoder::new();
    d.feed(bytes);
    let mut guard = 0;
    while d.next().is_some() {
        guard += 1;
        assert!(guard <= bytes.len() + 1, "decoder failed to make progress");
    }
}

#[test]
fn fuzz_one_million_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let seeds = [
        encode(&Message::Action(ActionPayload { keys: 9, yaw_delta: 0.1, pitch_delta: 0.0, timestamp: 1.5 })),
        encode(&Message::Frame(FramePayload { chunk: 1, frame: 0, height: 2, width: 1, rgb: vec![7; 6] })),
        encode(&Message::Prompt("day".into())),
        encode(&Message::Error { code: 3, detail: "x".into() }),
        encode(&Message::Reset),
    ];
    let mut buf = Vec::with_capacity(64);
    for i in 0..1_000_000u32 {
        buf.clear();
        if i % 2 == 0 {
            let n = rng.gen_range(0..48);
            buf.extend((0..n).map(|_| rng.gen::<u8>()));
        } else {
            // structured: a valid frame with a few mutated or truncated bytes
            buf.extend(&seeds[rng.gen_range(0..seeds.len())]);
            for _ in 0..rng.gen_range(0..4) {
                let j = rng.gen_range(0..buf.len());
                buf[j] = rng.gen();
            }
            let keep = rng.gen_range(0..=buf.len());
            buf.truncate(keep);
        }
        outcome_is_typed(&buf);
    }
}
