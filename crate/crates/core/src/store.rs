//! Replicated message store and its `PIRSTOR1` file format.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 8    | magic `PIRSTOR1`               |
//! | 8      | 1    | field width in bits            |
//! | 9      | 2    | K, number of messages          |
//! | 11     | 8    | L, symbols per message         |
//! | 19     | ...  | K*L packed symbols, message-major |

use std::fs;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::field::{pack_symbols, unpack_symbols, Field, FieldError, Symbol, Width};

pub const STORE_MAGIC: &[u8; 8] = b"PIRSTOR1";
pub const STORE_HEADER_LEN: usize = 19;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad store magic")]
    BadMagic,
    #[error("store file truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("trailing bytes after store payload")]
    Trailing,
    #[error("messages must all have length {expected}, message {index} has {got}")]
    RaggedMessages { index: usize, expected: usize, got: usize },
    #[error("symbol {value:#x} does not fit the store's field width")]
    SymbolOutOfRange { value: Symbol },
    #[error("store must hold at least one message")]
    Empty,
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// All `K` messages, each `L` symbols, as held by every database.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageStore {
    width: Width,
    len: usize,
    messages: Vec<Vec<Symbol>>,
}

impl MessageStore {
    pub fn new(width: Width, messages: Vec<Vec<Symbol>>) -> Result<Self, StoreError> {
        let Some(first) = messages.first() else { return Err(StoreError::Empty) };
        let len = first.len();
        for (index, m) in messages.iter().enumerate() {
            if m.len() != len {
                return Err(StoreError::RaggedMessages { index, expected: len, got: m.len() });
            }
            if let Some(&value) = m.iter().find(|&&v| v as usize >= width.order()) {
                return Err(StoreError::SymbolOutOfRange { value });
            }
        }
        Ok(MessageStore { width, len, messages })
    }

    pub fn random<R: Rng + ?Sized>(width: Width, k: usize, len: usize, rng: &mut R) -> Self {
        let field = Field::get(width);
        let messages = (0..k).map(|_| (0..len).map(|_| field.random(rng)).collect()).collect();
        MessageStore { width, len, messages }
    }

    pub fn zeros(width: Width, k: usize, len: usize) -> Self {
        MessageStore { width, len, messages: vec![vec![0; len]; k] }
    }

    pub fn width(&self) -> Width {
        self.width
    }

    /// Symbols per message.
    pub fn message_len(&self) -> usize {
        self.len
    }

    pub fn message_count(&self) -> usize {
        self.messages.len()
    }

    pub fn message(&self, index: usize) -> &[Symbol] {
        &self.messages[index]
    }

    pub fn messages(&self) -> &[Vec<Symbol>] {
        &self.messages
    }

    pub fn set_symbol(&mut self, message: usize, symbol: usize, value: Symbol) {
        self.messages[message][symbol] = value;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.file_len());
        out.extend_from_slice(STORE_MAGIC);
        out.push(self.width.bits());
        out.extend_from_slice(&(self.messages.len() as u16).to_le_bytes());
        out.extend_from_slice(&(self.len as u64).to_le_bytes());
        let flat: Vec<Symbol> = self.messages.iter().flatten().copied().collect();
        out.extend_from_slice(&pack_symbols(self.width, &flat));
        out
    }

    pub fn file_len(&self) -> usize {
        STORE_HEADER_LEN + self.width.packed_len(self.messages.len() * self.len)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < STORE_HEADER_LEN {
            return Err(StoreError::Truncated { expected: STORE_HEADER_LEN, got: bytes.len() });
        }
        if &bytes[..8] != STORE_MAGIC {
            return Err(StoreError::BadMagic);
        }
        let width = Width::from_bits(bytes[8] as u32)?;
        let k = u16::from_le_bytes([bytes[9], bytes[10]]) as usize;
        let len = u64::from_le_bytes(bytes[11..19].try_into().expect("8 bytes")) as usize;
        if k == 0 {
            return Err(StoreError::Empty);
        }
        let payload = width.packed_len(k * len);
        let expected = STORE_HEADER_LEN + payload;
        if bytes.len() < expected {
            return Err(StoreError::Truncated { expected, got: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(StoreError::Trailing);
        }
        let flat = unpack_symbols(width, &bytes[STORE_HEADER_LEN..], k * len)?;
        let messages = if len == 0 { vec![Vec::new(); k] } else { flat.chunks(len).map(<[Symbol]>::to_vec).collect() };
        Ok(MessageStore { width, len, messages })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// SHA-256 of the serialized store file.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    /// SHA-256 of one message's packed symbols.
    pub fn message_digest(&self, index: usize) -> [u8; 32] {
        message_digest(self.width, &self.messages[index])
    }
}

pub fn message_digest(width: Width, message: &[Symbol]) -> [u8; 32] {
    Sha256::digest(pack_symbols(width, message)).into()
}
