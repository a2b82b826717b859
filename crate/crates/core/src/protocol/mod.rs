//! Wire protocol: `[type u8][length u32 LE][payload]` frames carrying JSON
//! control envelopes (type 0x01) or sync record batches (type 0x02).

mod frame;
mod messages;
mod validate;

pub use frame::{read_frame, write_frame, Frame, FrameDecoder, FrameType, FRAME_HEADER_LEN, MAX_PAYLOAD_LEN};
pub use messages::{
    ControlBody, Envelope, NoticeCode, SceneEffect, SceneObjectView, Sequencer, StageTiming, SERVER_SENDER,
};
pub use validate::{validate_frames, validate_stream, StreamReport};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("unknown frame type 0x{0:02x}")]
    UnknownFrameType(u8),
    #[error("frame truncated")]
    Truncated,
    #[error("{0} bytes after the frame")]
    TrailingBytes(usize),
    #[error("payload length {0} exceeds the limit")]
    Oversized(usize),
    #[error("control payload is not UTF-8")]
    Utf8,
    #[error("bad control message: {0}")]
    Json(String),
    #[error("io: {0}")]
    Io(String),
}
