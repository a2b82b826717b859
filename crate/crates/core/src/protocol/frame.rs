use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use super::ProtocolError;

pub const FRAME_HEADER_LEN: usize = 5;
/// Largest accepted payload; bigger length prefixes are treated as corruption.
pub const MAX_PAYLOAD_LEN: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FrameType {
    /// UTF-8 JSON control message.
    Control = 0x01,
    /// Concatenated 48-byte sync records.
    Sync = 0x02,
}

impl FrameType {
    pub fn from_byte(b: u8) -> Result<Self, ProtocolError> {
        match b {
            0x01 => Ok(FrameType::Control),
            0x02 => Ok(FrameType::Sync),
            other => Err(ProtocolError::UnknownFrameType(other)),
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameType,
    pub payload: Vec<u8>,
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            FrameType::Control => write!(f, "Control({})", String::from_utf8_lossy(&self.payload)),
            FrameType::Sync => write!(f, "Sync({} bytes)", self.payload.len()),
        }
    }
}

impl Frame {
    pub fn control(json: impl Into<Vec<u8>>) -> Self {
        Self {
            kind: FrameType::Control,
            payload: json.into(),
        }
    }

    pub fn sync(payload: impl Into<Vec<u8>>) -> Self {
        Self {
            kind: FrameType::Sync,
            payload: payload.into(),
        }
    }

    /// Header plus payload.
    pub fn wire_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let mut d = FrameDecoder::new();
        d.push(bytes);
        let f = d.next_frame()?.ok_or(ProtocolError::Truncated)?;
        if d.buffered() != 0 {
            return Err(ProtocolError::TrailingBytes(d.buffered()));
        }
        Ok(f)
    }
}

/// Incremental decoder for a byte stream.
#[derive(Debug, Default, Clone)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete frame, `None` if more bytes are needed. After an error
    /// the stream is unusable.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, ProtocolError> {
        if self.buf.len() < FRAME_HEADER_LEN {
            return Ok(None);
        }
        let kind = FrameType::from_byte(self.buf[0])?;
        let len = u32::from_le_bytes(self.buf[1..5].try_into().expect("4 bytes")) as usize;
        if len > MAX_PAYLOAD_LEN {
            return Err(ProtocolError::Oversized(len));
        }
        if self.buf.len() < FRAME_HEADER_LEN + len {
            return Ok(None);
        }
        let payload = self.buf[FRAME_HEADER_LEN..FRAME_HEADER_LEN + len].to_vec();
        self.buf.drain(..FRAME_HEADER_LEN + len);
        Ok(Some(Frame { kind, payload }))
    }
}

/// Reads one frame; `Ok(None)` on a clean end of stream between frames.
pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> Result<Option<Frame>, ProtocolError> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    match r.read_exact(&mut header[..1]).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(ProtocolError::Io(e.to_string())),
    }
    r.read_exact(&mut header[1..])
        .await
        .map_err(|e| ProtocolError::Io(e.to_string()))?;
    let kind = FrameType::from_byte(header[0])?;
    let len = u32::from_le_bytes(header[1..5].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD_LEN {
        return Err(ProtocolError::Oversized(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)
        .await
        .map_err(|e| ProtocolError::Io(e.to_string()))?;
    Ok(Some(Frame { kind, payload }))
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, frame: &Frame) -> Result<(), ProtocolError> {
    w.write_all(&frame.encode())
        .await
        .map_err(|e| ProtocolError::Io(e.to_string()))
}
