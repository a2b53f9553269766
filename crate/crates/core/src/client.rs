//! Retrieval driver shared by the TCP client and the in-process simulator.
//!
//! Each database gets one connection. The driver exchanges `PARAMS`, checks
//! that all servers hold the same store and that the cached messages match
//! the published digests, then sends one `QUERY` per database concurrently
//! and decodes once every answer is in. Every frame sent or received is
//! recorded in a per-database [`Transcript`].

use std::sync::Arc;
use std::thread;

use num_rational::BigRational;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::capacity::{capacity_stpir_psi, capacity_tpir_psi, rational, required_randomness, SchemeParams};
use crate::field::{Symbol, Width};
use crate::server::{DatabaseServer, ServerSession};
use crate::store::message_digest;
use crate::stpir_psi::{sym_decode, sym_query, sym_sum_shortcut, SymError, SymParams};
use crate::tpir_psi::{build_plan, decode, queries, AnswerBundle, SideInformation, TpirError};
use crate::wire::{decode_answer, Frame, FrameType, ParamsRequest, ParamsResponse, Query, WireError};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("database {db}: {source}")]
    Wire { db: usize, source: WireError },
    #[error("database {db} replied with error {code:#04x}: {message}")]
    Server { db: usize, code: u8, message: String },
    #[error("database {db}: unexpected reply: {detail}")]
    Protocol { db: usize, detail: String },
    #[error("stores differ between databases: {0}")]
    StoreMismatch(String),
    #[error("cached message {index} is corrupted: it does not match the servers' digest")]
    SideCorruption { index: usize },
    #[error("decoded message does not match the servers' digest")]
    DecodeMismatch,
    #[error("expected {expected} endpoints, got {got}")]
    EndpointCount { expected: usize, got: usize },
    #[error(transparent)]
    Tpir(#[from] TpirError),
    #[error(transparent)]
    Sym(#[from] SymError),
}

/// A request/response channel to one database.
pub trait Connection: Send {
    fn round_trip(&mut self, frame: &Frame) -> Result<Frame, WireError>;
}

/// In-process connection straight into a server session.
pub struct LocalConnection {
    session: ServerSession,
}

impl LocalConnection {
    pub fn new(server: &Arc<DatabaseServer>) -> Self {
        LocalConnection { session: server.session() }
    }
}

impl Connection for LocalConnection {
    fn round_trip(&mut self, frame: &Frame) -> Result<Frame, WireError> {
        // Through the byte encoding, as a socket would.
        let request = Frame::from_bytes(&frame.to_bytes())?;
        Frame::from_bytes(&self.session.handle(&request).to_bytes())
    }
}

/// Frames exchanged with one database, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub frames: Vec<Frame>,
}

impl Transcript {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.frames.iter().flat_map(Frame::to_bytes).collect()
    }

    /// Bytes of the `ANSWER` payloads received.
    pub fn answer_frames(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(|f| f.kind() == Some(FrameType::Answer))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Tpir,
    Stpir,
}

#[derive(Debug, Clone)]
pub struct Retrieval {
    pub message: Vec<Symbol>,
    pub width: Width,
    pub transcripts: Vec<Transcript>,
    /// Symbols received in answers, over all databases.
    pub downloaded: usize,
    /// Symbols of common randomness the servers consumed.
    pub randomness: usize,
    pub rate: BigRational,
    pub capacity: BigRational,
}

impl Retrieval {
    pub fn downloaded_bits(&self) -> u64 {
        self.downloaded as u64 * self.width.bits() as u64
    }
}

fn exchange<C: Connection>(
    conn: &mut C,
    db: usize,
    frame: Frame,
    transcript: &mut Transcript,
) -> Result<Frame, ClientError> {
    let reply = conn.round_trip(&frame).map_err(|source| ClientError::Wire { db, source })?;
    transcript.frames.push(frame);
    transcript.frames.push(reply.clone());
    if let Some((code, message)) = reply.error_parts() {
        return Err(ClientError::Server { db, code, message });
    }
    Ok(reply)
}

// Runs `f` on every connection in its own thread, keeping index order.
fn parallel<C, T, F>(conns: &mut [C], f: F) -> Vec<Result<T, ClientError>>
where
    C: Connection,
    T: Send,
    F: Fn(usize, &mut C) -> Result<T, ClientError> + Sync,
{
    thread::scope(|scope| {
        let handles: Vec<_> = conns
            .iter_mut()
            .enumerate()
            .map(|(db, conn)| {
                let f = &f;
                scope.spawn(move || f(db, conn))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("connection thread panicked")).collect()
    })
}

fn handshake<C: Connection>(
    conns: &mut [C],
    transcripts: &mut [Transcript],
    side: &SideInformation,
) -> Result<ParamsResponse, ClientError> {
    let results = parallel(conns, |db, conn| {
        let mut t = Transcript::default();
        let reply = exchange(conn, db, ParamsRequest { db: db as u16 }.encode(), &mut t)?;
        if reply.kind() != Some(FrameType::Params) {
            return Err(ClientError::Protocol {
                db,
                detail: format!("type {:#04x} instead of PARAMS", reply.frame_type),
            });
        }
        let params = ParamsResponse::decode(&reply.payload).map_err(|source| ClientError::Wire { db, source })?;
        Ok((t, params))
    });
    let mut first: Option<ParamsResponse> = None;
    for (db, r) in results.into_iter().enumerate() {
        let (t, params) = r?;
        transcripts[db] = t;
        match &first {
            None => first = Some(params),
            Some(p) if *p != params => {
                return Err(ClientError::StoreMismatch(format!("database {db} disagrees with database 0")))
            }
            Some(_) => {}
        }
    }
    let params = first.expect("at least one endpoint");
    for (index, msg) in side.iter() {
        let digest = params.message_digests.get(index).ok_or(ClientError::SideCorruption { index })?;
        if message_digest(params.width, msg) != *digest {
            return Err(ClientError::SideCorruption { index });
        }
    }
    Ok(params)
}

fn collect_answers<C: Connection>(
    conns: &mut [C],
    transcripts: &mut [Transcript],
    queries: Vec<Option<Query>>,
    width: Width,
) -> Result<Vec<Vec<Symbol>>, ClientError> {
    let results: Vec<_> = {
        let queries = &queries;
        parallel(conns, |db, conn| {
            let Some(q) = &queries[db] else { return Ok(None) };
            let mut t = Transcript::default();
            let reply = exchange(conn, db, q.encode(), &mut t)?;
            if reply.kind() != Some(FrameType::Answer) {
                return Err(ClientError::Protocol {
                    db,
                    detail: format!("type {:#04x} instead of ANSWER", reply.frame_type),
                });
            }
            let (w, symbols) = decode_answer(&reply.payload).map_err(|source| ClientError::Wire { db, source })?;
            if w != width {
                return Err(ClientError::Protocol { db, detail: format!("answer over {w}, expected {width}") });
            }
            Ok(Some((t, symbols)))
        })
    };
    let mut out = Vec::with_capacity(results.len());
    for (db, r) in results.into_iter().enumerate() {
        if let Some((t, symbols)) = r? {
            transcripts[db].frames.extend(t.frames);
            out.push(symbols);
        } else {
            out.push(Vec::new());
        }
    }
    Ok(out)
}

fn check_shape(params: &SchemeParams, conns: usize, server: &ParamsResponse, l: usize) -> Result<(), ClientError> {
    if conns != params.n {
        return Err(ClientError::EndpointCount { expected: params.n, got: conns });
    }
    if server.k as usize != params.k || server.message_len as usize != l {
        return Err(ClientError::StoreMismatch(format!(
            "servers hold K={} L={}, the scheme needs K={} L={l}",
            server.k, server.message_len, params.k
        )));
    }
    Ok(())
}

/// TPIR-PSI retrieval of message `theta` with side information `side`.
pub fn retrieve_tpir<C: Connection>(
    conns: &mut [C],
    params: &SchemeParams,
    theta: usize,
    side: &SideInformation,
    seed: u64,
) -> Result<Retrieval, ClientError> {
    let mut transcripts = vec![Transcript::default(); conns.len()];
    let server = handshake(conns, &mut transcripts, side)?;
    let params = params.with_width(server.width);
    let (plan, state) = build_plan(&params, theta, seed)?;
    check_shape(&params, conns.len(), &server, plan.profile().l as usize)?;
    let qs = queries(&plan, &state).into_iter().map(|q| Some(Query::Linear(q))).collect();
    let per_db = collect_answers(conns, &mut transcripts, qs, server.width)?;
    let downloaded = per_db.iter().map(Vec::len).sum();
    let message = decode(&AnswerBundle { form: plan.answer_form(), per_db }, &plan, &state, side)?;
    if message_digest(server.width, &message) != server.message_digests[theta] {
        return Err(ClientError::DecodeMismatch);
    }
    let l = message.len() as u64;
    Ok(Retrieval {
        rate: rational(l, downloaded as u64),
        capacity: capacity_tpir_psi(&params).expect("validated"),
        message,
        width: server.width,
        transcripts,
        downloaded,
        randomness: 0,
    })
}

/// STPIR-PSI retrieval. With every other message cached, downloads the sum
/// of all messages from database 0 alone.
pub fn retrieve_stpir<C: Connection>(
    conns: &mut [C],
    params: &SchemeParams,
    theta: usize,
    side: &SideInformation,
    seed: u64,
) -> Result<Retrieval, ClientError> {
    let mut transcripts = vec![Transcript::default(); conns.len()];
    let server = handshake(conns, &mut transcripts, side)?;
    let params = params.with_width(server.width);
    let shortcut = params.m + 1 == params.k && params.k >= 2;
    let (message, downloaded, randomness, capacity) = if shortcut {
        check_shape(&params, conns.len(), &server, server.message_len as usize)?;
        let mut qs = vec![None; conns.len()];
        qs[0] = Some(Query::SumAll { width: server.width });
        let per_db = collect_answers(conns, &mut transcripts, qs, server.width)?;
        let message = sym_sum_shortcut(params.k, &per_db[0], side, theta)?;
        let capacity = capacity_stpir_psi(&params, &rational(0, 1)).map_err(SymError::from)?;
        (message, per_db[0].len(), 0, capacity)
    } else {
        let sp = SymParams::new(&params)?;
        check_shape(&params, conns.len(), &server, sp.message_len())?;
        if side.len() != params.m || side.contains(theta) {
            return Err(SymError::InvalidSideInformation(format!(
                "expected {} cached messages excluding {theta}",
                params.m
            ))
            .into());
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let session = sym_query(&sp, theta, &mut rng)?;
        let qs = session.queries.into_iter().map(|q| Some(Query::Symmetric(q))).collect();
        let per_db = collect_answers(conns, &mut transcripts, qs, server.width)?;
        let mut answers = Vec::with_capacity(per_db.len());
        for (db, a) in per_db.iter().enumerate() {
            match a.as_slice() {
                [v] => answers.push(*v),
                _ => return Err(ClientError::Protocol { db, detail: format!("{} symbols instead of 1", a.len()) }),
            }
        }
        let message = sym_decode(&sp, &answers)?;
        let capacity = capacity_stpir_psi(&params, &required_randomness(&params)).map_err(SymError::from)?;
        (message, answers.len(), params.t, capacity)
    };
    if message_digest(server.width, &message) != server.message_digests[theta] {
        return Err(ClientError::DecodeMismatch);
    }
    Ok(Retrieval {
        rate: rational(message.len() as u64, downloaded as u64),
        capacity,
        message,
        width: server.width,
        transcripts,
        downloaded,
        randomness,
    })
}

pub fn retrieve<C: Connection>(
    scheme: Scheme,
    conns: &mut [C],
    params: &SchemeParams,
    theta: usize,
    side: &SideInformation,
    seed: u64,
) -> Result<Retrieval, ClientError> {
    match scheme {
        Scheme::Tpir => retrieve_tpir(conns, params, theta, side, seed),
        Scheme::Stpir => retrieve_stpir(conns, params, theta, side, seed),
    }
}

/// Retrieval against `params.n` in-process servers sharing `server`.
pub fn simulate(
    scheme: Scheme,
    server: &Arc<DatabaseServer>,
    params: &SchemeParams,
    theta: usize,
    side: &SideInformation,
    seed: u64,
) -> Result<Retrieval, ClientError> {
    let mut conns: Vec<LocalConnection> = (0..params.n).map(|_| LocalConnection::new(server)).collect();
    retrieve(scheme, &mut conns, params, theta, side, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server::Role;
    use crate::store::MessageStore;
    use crate::stpir_psi::SharedSecret;

    fn random_store(width: Width, k: usize, l: usize, seed: u64) -> MessageStore {
        MessageStore::random(width, k, l, &mut ChaCha20Rng::seed_from_u64(seed))
    }

    #[test]
    fn tpir_simulation_first_example() {
        let store = random_store(Width::W4, 3, 8, 1);
        let side = SideInformation::from_store(&store, &[2]);
        let server = Arc::new(DatabaseServer::new(store.clone(), Role::Tpir, None).unwrap());
        let p = SchemeParams::new(3, 1, 2, 1).unwrap();
        let r = simulate(Scheme::Tpir, &server, &p, 0, &side, 7).unwrap();
        assert_eq!(r.message, store.message(0));
        assert_eq!(r.downloaded, 12);
        assert_eq!(r.rate, rational(2, 3));
        assert_eq!(r.rate, r.capacity);
        for t in &r.transcripts {
            assert_eq!(t.frames.len(), 4);
        }
        let again = simulate(Scheme::Tpir, &server, &p, 0, &side, 7).unwrap();
        assert_eq!(again.transcripts, r.transcripts);
    }

    #[test]
    fn corrupted_side_information_is_detected() {
        let store = random_store(Width::W4, 3, 8, 2);
        let mut bad = store.message(2).to_vec();
        bad[0] ^= 1;
        let side = SideInformation::new([(2, bad)].into());
        let server = Arc::new(DatabaseServer::new(store, Role::Tpir, None).unwrap());
        let p = SchemeParams::new(3, 1, 2, 1).unwrap();
        let err = simulate(Scheme::Tpir, &server, &p, 0, &side, 7).unwrap_err();
        assert!(matches!(err, ClientError::SideCorruption { index: 2 }));
    }

    #[test]
    fn stpir_simulation_and_shortcut() {
        let secret = SharedSecret::new([5; 32]);
        let p = SchemeParams::new(3, 0, 4, 2).unwrap();
        let store = random_store(Width::W4, 3, 2, 3);
        let server = Arc::new(DatabaseServer::new(store.clone(), Role::Stpir, Some(secret.clone())).unwrap());
        let r = simulate(Scheme::Stpir, &server, &p, 2, &SideInformation::default(), 1).unwrap();
        assert_eq!(r.message, store.message(2));
        assert_eq!(r.rate, rational(1, 2));
        assert_eq!(r.randomness, 2);

        let p = SchemeParams::new(3, 2, 2, 1).unwrap();
        let store = random_store(Width::W8, 3, 5, 4);
        let server = Arc::new(DatabaseServer::new(store.clone(), Role::Stpir, Some(secret)).unwrap());
        let side = SideInformation::from_store(&store, &[0, 2]);
        let r = simulate(Scheme::Stpir, &server, &p, 1, &side, 1).unwrap();
        assert_eq!(r.message, store.message(1));
        assert_eq!(r.rate, rational(1, 1));
        assert_eq!(r.randomness, 0);
        assert_eq!(r.transcripts[1].frames.len(), 2);
    }

    #[test]
    fn mismatched_stores_abort() {
        let p = SchemeParams::new(2, 0, 2, 1).unwrap();
        let a = Arc::new(DatabaseServer::new(random_store(Width::W4, 2, 4, 1), Role::Tpir, None).unwrap());
        let b = Arc::new(DatabaseServer::new(random_store(Width::W4, 2, 4, 2), Role::Tpir, None).unwrap());
        let mut conns = vec![LocalConnection::new(&a), LocalConnection::new(&b)];
        let err = retrieve_tpir(&mut conns, &p, 0, &SideInformation::default(), 0).unwrap_err();
        assert!(matches!(err, ClientError::StoreMismatch(_)));
    }
}
