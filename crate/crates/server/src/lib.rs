//! Framed streaming protocol and the host that serves a session over TCP or
//! WebSocket with identical framing.

pub mod host;
pub mod protocol;

pub use host::{serve, ServeConfig, Server};
pub use protocol::{decode, encode, Decoded, Decoder, Message, ProtocolError};
