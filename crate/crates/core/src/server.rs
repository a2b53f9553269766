//! Database-side frame handling, independent of the transport.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::field::Field;
use crate::store::MessageStore;
use crate::stpir_psi::{sum_all, sym_answer, CommonRandomness, SharedSecret, SymError};
use crate::tpir_psi::{answer, TpirError};
use crate::wire::{encode_answer, ErrorCode, Frame, FrameType, ParamsRequest, ParamsResponse, Query};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Tpir,
    Stpir,
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tpir" => Ok(Role::Tpir),
            "stpir" => Ok(Role::Stpir),
            other => Err(format!("unknown role {other:?}, expected tpir or stpir")),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Tpir => "tpir",
            Role::Stpir => "stpir",
        })
    }
}

/// Read-only state shared by every connection of one server.
#[derive(Debug)]
pub struct DatabaseServer {
    store: MessageStore,
    role: Role,
    secret: Option<SharedSecret>,
    params: ParamsResponse,
}

impl DatabaseServer {
    /// `secret` is required for the symmetric role.
    pub fn new(store: MessageStore, role: Role, secret: Option<SharedSecret>) -> Result<Self, String> {
        if role == Role::Stpir && secret.is_none() {
            return Err("the stpir role needs a shared secret".into());
        }
        let params = ParamsResponse {
            k: store.message_count() as u16,
            message_len: store.message_len() as u64,
            width: store.width(),
            store_digest: store.digest(),
            message_digests: (0..store.message_count()).map(|i| store.message_digest(i)).collect(),
        };
        Ok(DatabaseServer { store, role, secret, params })
    }

    pub fn store(&self) -> &MessageStore {
        &self.store
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn params(&self) -> &ParamsResponse {
        &self.params
    }

    pub fn session(self: &Arc<Self>) -> ServerSession {
        ServerSession { server: Arc::clone(self), db: None }
    }
}

/// Per-connection state: the database index announced in `PARAMS`.
#[derive(Debug, Clone)]
pub struct ServerSession {
    server: Arc<DatabaseServer>,
    db: Option<u16>,
}

impl ServerSession {
    pub fn db(&self) -> Option<u16> {
        self.db
    }

    /// Produces the reply to one incoming frame. Never fails: problems become `ERROR` frames.
    pub fn handle(&mut self, frame: &Frame) -> Frame {
        match frame.kind() {
            Some(FrameType::Params) => match ParamsRequest::decode(&frame.payload) {
                Ok(req) => {
                    self.db = Some(req.db);
                    self.server.params.encode()
                }
                Err(e) => Frame::error(ErrorCode::MalformedFrame, &e.to_string()),
            },
            Some(FrameType::Query) => match Query::decode(&frame.payload) {
                Ok(q) => self.answer(&q),
                Err(e) => Frame::error(ErrorCode::MalformedQuery, &e.to_string()),
            },
            Some(kind) => Frame::error(ErrorCode::UnexpectedType, &format!("servers do not accept {kind:?} frames")),
            None => Frame::error(ErrorCode::UnexpectedType, &format!("unknown frame type {:#04x}", frame.frame_type)),
        }
    }

    fn answer(&self, query: &Query) -> Frame {
        let server = &self.server;
        let store = &server.store;
        let Some(db) = self.db else {
            return Frame::error(ErrorCode::ParamsMismatch, "QUERY before PARAMS");
        };
        if query.width() != store.width() {
            return Frame::error(
                ErrorCode::ParamsMismatch,
                &format!("query over {} but store over {}", query.width(), store.width()),
            );
        }
        let width = store.width();
        match (server.role, query) {
            (Role::Tpir, Query::Linear(q)) => {
                if q.message_len != store.message_len() {
                    return Frame::error(
                        ErrorCode::ParamsMismatch,
                        &format!("query expects L={}, store has L={}", q.message_len, store.message_len()),
                    );
                }
                match answer(q, store) {
                    Ok(symbols) => encode_answer(width, &symbols),
                    Err(TpirError::MalformedQuery(m)) => Frame::error(ErrorCode::MalformedQuery, &m),
                    Err(e) => Frame::error(ErrorCode::MalformedQuery, &e.to_string()),
                }
            }
            (Role::Stpir, Query::Symmetric(q)) => {
                let field = Field::get(width);
                let index = db as usize + 1;
                if index >= field.order() {
                    return Frame::error(
                        ErrorCode::ParamsMismatch,
                        &format!("database index {db} has no evaluation point"),
                    );
                }
                let secret = server.secret.as_ref().expect("checked at construction");
                let cr = CommonRandomness::derive(secret, &q.session_id, q.t, width);
                match sym_answer(q, store, &cr, field.point(index)) {
                    Ok(v) => encode_answer(width, &[v]),
                    Err(SymError::MalformedQuery(m)) => Frame::error(ErrorCode::MalformedQuery, &m),
                    Err(e) => Frame::error(ErrorCode::MalformedQuery, &e.to_string()),
                }
            }
            (Role::Stpir, Query::SumAll { .. }) => encode_answer(width, &sum_all(store)),
            (role, _) => Frame::error(ErrorCode::Unsupported, &format!("query kind not served by the {role} role")),
        }
    }
}
