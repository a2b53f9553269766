//! Framed binary protocol spoken between clients and database servers.
//!
//! Every frame is `"PIR1" | type u8 | length u32 LE | payload`. Integers are
//! little-endian and symbol vectors use the packing of [`pack_symbols`].
//!
//! Payloads:
//!
//! * `PARAMS` request: database index `u16` (0-based).
//! * `PARAMS` response: `K u16 | L u64 | w u8 | store sha256 | K x message sha256`.
//! * `QUERY`: kind `u8`, then
//!   * `0x01` linear: `w u8 | L u64 | form u8 | known u32 | slots u32`, per slot
//!     `terms u32` and `terms x (message u16, symbol u32)`, then the packed
//!     coefficients of every term in order;
//!   * `0x02` symmetric: `w u8 | session id [16] | T u16 | count u32 | packed coordinates`;
//!   * `0x03` sum of all messages: `w u8`.
//! * `ANSWER`: `w u8 | count u32 | packed symbols`.
//! * `ERROR`: `code u8 | UTF-8 message`.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::field::{pack_symbols, unpack_symbols, Symbol, Width};
use crate::stpir_psi::{SymQuery, SESSION_ID_LEN};
use crate::tpir_psi::{AnswerForm, LinearQuery, Term};

pub const MAGIC: &[u8; 4] = b"PIR1";
pub const HEADER_LEN: usize = 9;
pub const MAX_PAYLOAD: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    Query = 0x01,
    Answer = 0x02,
    Error = 0x03,
    Params = 0x04,
}

impl FrameType {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0x01 => Some(FrameType::Query),
            0x02 => Some(FrameType::Answer),
            0x03 => Some(FrameType::Error),
            0x04 => Some(FrameType::Params),
            _ => None,
        }
    }
}

/// Codes carried by `ERROR` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ErrorCode {
    MalformedFrame = 0x01,
    MalformedQuery = 0x02,
    ParamsMismatch = 0x03,
    UnexpectedType = 0x04,
    Unsupported = 0x05,
}

impl ErrorCode {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0x01 => Some(ErrorCode::MalformedFrame),
            0x02 => Some(ErrorCode::MalformedQuery),
            0x03 => Some(ErrorCode::ParamsMismatch),
            0x04 => Some(ErrorCode::UnexpectedType),
            0x05 => Some(ErrorCode::Unsupported),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    Frame(String),
    #[error("malformed payload: {0}")]
    Payload(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One protocol frame. The type byte is kept raw so unknown types survive parsing.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pub frame_type: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(frame_type: FrameType, payload: Vec<u8>) -> Self {
        Frame { frame_type: frame_type as u8, payload }
    }

    pub fn kind(&self) -> Option<FrameType> {
        FrameType::from_u8(self.frame_type)
    }

    pub fn error(code: ErrorCode, message: &str) -> Self {
        let mut payload = vec![code as u8];
        payload.extend_from_slice(message.as_bytes());
        Frame::new(FrameType::Error, payload)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(self.frame_type);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses exactly one frame occupying all of `bytes`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let (frame_type, len) = parse_header(
            bytes
                .get(..HEADER_LEN)
                .ok_or_else(|| WireError::Frame(format!("{} bytes is shorter than a header", bytes.len())))?,
        )?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != len {
            return Err(WireError::Frame(format!("header announces {len} payload bytes, found {}", body.len())));
        }
        Ok(Frame { frame_type, payload: body.to_vec() })
    }

    /// Decodes the `(code, message)` of an `ERROR` frame.
    pub fn error_parts(&self) -> Option<(u8, String)> {
        if self.kind() != Some(FrameType::Error) || self.payload.is_empty() {
            return None;
        }
        Some((self.payload[0], String::from_utf8_lossy(&self.payload[1..]).into_owned()))
    }
}

fn parse_header(header: &[u8]) -> Result<(u8, usize), WireError> {
    if &header[..4] != MAGIC {
        return Err(WireError::Frame("bad magic".into()));
    }
    let len = u32::from_le_bytes(header[5..9].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::Frame(format!("payload of {len} bytes exceeds the limit")));
    }
    Ok((header[4], len))
}

/// Reads one frame. `Ok(None)` on a clean end of stream before any byte.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Frame>, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Frame(format!("stream ended after {filled} header bytes"))),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (frame_type, len) = parse_header(&header)?;
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Frame(format!("stream ended inside a {len}-byte payload")),
        _ => WireError::Io(e),
    })?;
    Ok(Some(Frame { frame_type, payload }))
}

pub fn write_frame<W: Write>(writer: &mut W, frame: &Frame) -> Result<(), WireError> {
    writer.write_all(&frame.to_bytes())?;
    writer.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            WireError::Payload(format!(
                "needed {n} bytes at offset {}, only {} remain",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn digest(&mut self) -> Result<[u8; 32], WireError> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }

    fn width(&mut self) -> Result<Width, WireError> {
        let bits = self.u8()?;
        Width::from_bits(bits as u32).map_err(|e| WireError::Payload(e.to_string()))
    }

    fn symbols(&mut self, width: Width, count: usize) -> Result<Vec<Symbol>, WireError> {
        if count > MAX_PAYLOAD {
            return Err(WireError::Payload(format!("{count} symbols exceeds the limit")));
        }
        let bytes = self.take(width.packed_len(count))?;
        unpack_symbols(width, bytes, count).map_err(|e| WireError::Payload(e.to_string()))
    }

    fn finish(self) -> Result<(), WireError> {
        if self.pos != self.bytes.len() {
            return Err(WireError::Payload(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamsRequest {
    pub db: u16,
}

impl ParamsRequest {
    pub fn encode(&self) -> Frame {
        Frame::new(FrameType::Params, self.db.to_le_bytes().to_vec())
    }

    pub fn decode(payload: &[u8]) -> Result<Self, WireError> {
        let mut c = Cursor::new(payload);
        let db = c.u16()?;
        c.finish()?;
        Ok(ParamsRequest { db })
    }
}

/// Public description of the store a server holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamsResponse {
    pub k: u16,
    pub message_len: u64,
    pub width: Width,
    pub store_digest: [u8; 32],
    pub message_digests: Vec<[u8; 32]>,
}

impl ParamsResponse {
    pub fn encode(&self) -> Frame {
        let mut p = Vec::with_capacity(11 + 32 * (1 + self.message_digests.len()));
        p.extend_from_slice(&self.k.to_le_bytes());
        p.extend_from_slice(&self.message_len.to_le_bytes());
        p.push(self.width.bits());
        p.extend_from_slice(&self.store_digest);
        for d in &self.message_digests {
            p.extend_from_slice(d);
        }
        Frame::new(FrameType::Params, p)
    }

    pub fn decode(payload: &[u8]) -> Result<Self, WireError> {
        let mut c = Cursor::new(payload);
        let k = c.u16()?;
        let message_len = c.u64()?;
        let width = c.width()?;
        let store_digest = c.digest()?;
        let message_digests = (0..k).map(|_| c.digest()).collect::<Result<_, _>>()?;
        c.finish()?;
        Ok(ParamsResponse { k, message_len, width, store_digest, message_digests })
    }
}

const QUERY_LINEAR: u8 = 0x01;
const QUERY_SYMMETRIC: u8 = 0x02;
const QUERY_SUM_ALL: u8 = 0x03;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Query {
    Linear(LinearQuery),
    Symmetric(SymQuery),
    SumAll { width: Width },
}

impl Query {
    pub fn width(&self) -> Width {
        match self {
            Query::Linear(q) => q.width,
            Query::Symmetric(q) => q.width,
            Query::SumAll { width } => *width,
        }
    }

    pub fn encode(&self) -> Frame {
        let mut p = Vec::new();
        match self {
            Query::Linear(q) => {
                p.push(QUERY_LINEAR);
                p.push(q.width.bits());
                p.extend_from_slice(&(q.message_len as u64).to_le_bytes());
                let (form, known) = match q.form {
                    AnswerForm::Raw => (0u8, 0u32),
                    AnswerForm::Compressed { known } => (1u8, known as u32),
                };
                p.push(form);
                p.extend_from_slice(&known.to_le_bytes());
                p.extend_from_slice(&(q.slots.len() as u32).to_le_bytes());
                let mut coeffs = Vec::new();
                for slot in &q.slots {
                    p.extend_from_slice(&(slot.len() as u32).to_le_bytes());
                    for t in slot {
                        p.extend_from_slice(&t.message.to_le_bytes());
                        p.extend_from_slice(&t.symbol.to_le_bytes());
                        coeffs.push(t.coeff);
                    }
                }
                p.extend_from_slice(&pack_symbols(q.width, &coeffs));
            }
            Query::Symmetric(q) => {
                p.push(QUERY_SYMMETRIC);
                p.push(q.width.bits());
                p.extend_from_slice(&q.session_id);
                p.extend_from_slice(&(q.t as u16).to_le_bytes());
                p.extend_from_slice(&(q.coords.len() as u32).to_le_bytes());
                p.extend_from_slice(&pack_symbols(q.width, &q.coords));
            }
            Query::SumAll { width } => {
                p.push(QUERY_SUM_ALL);
                p.push(width.bits());
            }
        }
        Frame::new(FrameType::Query, p)
    }

    pub fn decode(payload: &[u8]) -> Result<Self, WireError> {
        let mut c = Cursor::new(payload);
        let query = match c.u8()? {
            QUERY_LINEAR => {
                let width = c.width()?;
                let message_len = c.u64()? as usize;
                let form = match (c.u8()?, c.u32()? as usize) {
                    (0, 0) => AnswerForm::Raw,
                    (0, _) => return Err(WireError::Payload("raw form with known symbols".into())),
                    (1, known) => AnswerForm::Compressed { known },
                    (f, _) => return Err(WireError::Payload(format!("unknown answer form {f}"))),
                };
                let slot_count = c.u32()? as usize;
                let mut shapes = Vec::with_capacity(slot_count.min(1 << 16));
                let mut total = 0usize;
                for _ in 0..slot_count {
                    let n = c.u32()? as usize;
                    let terms = (0..n).map(|_| Ok((c.u16()?, c.u32()?))).collect::<Result<Vec<_>, WireError>>()?;
                    total += n;
                    shapes.push(terms);
                }
                let coeffs = c.symbols(width, total)?;
                let mut it = coeffs.into_iter();
                let slots = shapes
                    .into_iter()
                    .map(|terms| {
                        terms
                            .into_iter()
                            .map(|(message, symbol)| Term { message, symbol, coeff: it.next().expect("counted") })
                            .collect()
                    })
                    .collect();
                Query::Linear(LinearQuery { width, message_len, form, slots })
            }
            QUERY_SYMMETRIC => {
                let width = c.width()?;
                let session_id: [u8; SESSION_ID_LEN] = c.take(SESSION_ID_LEN)?.try_into().expect("16 bytes");
                let t = c.u16()? as usize;
                let count = c.u32()? as usize;
                let coords = c.symbols(width, count)?;
                Query::Symmetric(SymQuery { width, session_id, t, coords })
            }
            QUERY_SUM_ALL => Query::SumAll { width: c.width()? },
            kind => return Err(WireError::Payload(format!("unknown query kind {kind:#04x}"))),
        };
        c.finish()?;
        Ok(query)
    }
}

pub fn encode_answer(width: Width, symbols: &[Symbol]) -> Frame {
    let mut p = Vec::with_capacity(5 + width.packed_len(symbols.len()));
    p.push(width.bits());
    p.extend_from_slice(&(symbols.len() as u32).to_le_bytes());
    p.extend_from_slice(&pack_symbols(width, symbols));
    Frame::new(FrameType::Answer, p)
}

pub fn decode_answer(payload: &[u8]) -> Result<(Width, Vec<Symbol>), WireError> {
    let mut c = Cursor::new(payload);
    let width = c.width()?;
    let count = c.u32()? as usize;
    let symbols = c.symbols(width, count)?;
    c.finish()?;
    Ok((width, symbols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_linear() -> LinearQuery {
        LinearQuery {
            width: Width::W4,
            message_len: 8,
            form: AnswerForm::Compressed { known: 1 },
            slots: vec![
                vec![Term { message: 0, symbol: 3, coeff: 7 }],
                vec![],
                vec![Term { message: 1, symbol: 0, coeff: 15 }, Term { message: 2, symbol: 7, coeff: 1 }],
            ],
        }
    }

    #[test]
    fn header_layout() {
        let f = Frame::new(FrameType::Answer, vec![1, 2, 3]);
        assert_eq!(f.to_bytes(), b"PIR1\x02\x03\x00\x00\x00\x01\x02\x03");
    }

    #[test]
    fn truncated_and_oversized_frames() {
        let bytes = Frame::new(FrameType::Query, vec![0; 10]).to_bytes();
        assert!(matches!(Frame::from_bytes(&bytes[..12]), Err(WireError::Frame(_))));
        assert!(matches!(Frame::from_bytes(&bytes[..5]), Err(WireError::Frame(_))));
        let mut r = &bytes[..12];
        assert!(matches!(read_frame(&mut r), Err(WireError::Frame(_))));
        let mut empty: &[u8] = &[];
        assert!(read_frame(&mut empty).unwrap().is_none());
        let mut huge = b"PIR1\x01".to_vec();
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(Frame::from_bytes(&huge), Err(WireError::Frame(_))));
    }

    #[test]
    fn queries_round_trip() {
        let queries = [
            Query::Linear(sample_linear()),
            Query::Symmetric(SymQuery { width: Width::W8, session_id: [3; 16], t: 2, coords: vec![1, 2, 255] }),
            Query::SumAll { width: Width::W16 },
        ];
        for q in queries {
            let frame = q.encode();
            let back = Frame::from_bytes(&frame.to_bytes()).unwrap();
            assert_eq!(Query::decode(&back.payload).unwrap(), q);
        }
    }

    #[test]
    fn malformed_queries() {
        let payload = Query::Linear(sample_linear()).encode().payload;
        assert!(Query::decode(&payload[..payload.len() - 1]).is_err());
        let mut extra = payload.clone();
        extra.push(0);
        assert!(Query::decode(&extra).is_err());
        assert!(Query::decode(&[0x09]).is_err());
        assert!(Query::decode(&[0x03, 5]).is_err());
        assert!(Query::decode(&[]).is_err());
    }

    #[test]
    fn params_round_trip() {
        let r = ParamsResponse {
            k: 2,
            message_len: 9,
            width: Width::W8,
            store_digest: [1; 32],
            message_digests: vec![[2; 32], [3; 32]],
        };
        assert_eq!(ParamsResponse::decode(&r.encode().payload).unwrap(), r);
        assert_eq!(ParamsRequest::decode(&ParamsRequest { db: 7 }.encode().payload).unwrap().db, 7);
        assert!(ParamsRequest::decode(&[1]).is_err());
    }

    #[test]
    fn error_frames() {
        let f = Frame::error(ErrorCode::MalformedQuery, "bad symbol");
        assert_eq!(f.error_parts(), Some((0x02, "bad symbol".to_string())));
    }

    proptest! {
        #[test]
        fn frames_round_trip(kind in any::<u8>(), payload in prop::collection::vec(any::<u8>(), 0..512)) {
            let f = Frame { frame_type: kind, payload };
            let bytes = f.to_bytes();
            prop_assert_eq!(Frame::from_bytes(&bytes).unwrap(), f.clone());
            let mut r = bytes.as_slice();
            prop_assert_eq!(read_frame(&mut r).unwrap().unwrap(), f);
        }

        #[test]
        fn answers_round_trip(w in prop::sample::select(Width::ALL.to_vec()), raw in prop::collection::vec(any::<u16>(), 0..64)) {
            let symbols: Vec<Symbol> = raw.iter().map(|&v| v & (w.order() - 1) as u16).collect();
            let frame = encode_answer(w, &symbols);
            prop_assert_eq!(decode_answer(&frame.payload).unwrap(), (w, symbols));
        }
    }
}
