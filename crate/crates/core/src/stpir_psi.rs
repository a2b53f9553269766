//! Symmetric retrieval: Shamir-masked polynomial queries with a
//! server-shared masking polynomial, plus the sum download used when every
//! other message is cached.
//!
//! Coordinate `(k, i)` of the query to database `n` is
//! `rho_{k,i}(x_n) + [k = theta] x_n^(T+i)` with `rho_{k,i}` uniform of degree
//! below `T` and `x_n = n + 1`. The answer `sum W_k[i] q(k,i) + sigma(x_n)`
//! lies on one polynomial `A` of degree below `N`; its coefficients of
//! `x^T .. x^(N-1)` are the desired message and the rest is masked by `sigma`.

use std::fmt;
use std::fs;
use std::path::Path;

use hmac::{Hmac, KeyInit, Mac};
use rand::{Rng, RngCore};
use sha2::Sha256;
use thiserror::Error;

use crate::capacity::{CapacityError, SchemeParams};
use crate::field::{Field, Symbol, Width};
use crate::linalg::Matrix;
use crate::store::MessageStore;
use crate::tpir_psi::SideInformation;

pub const SESSION_ID_LEN: usize = 16;
pub const SECRET_LEN: usize = 32;
pub const SECRET_ENV: &str = "PIR_SHARED_SECRET";

pub type SessionId = [u8; SESSION_ID_LEN];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SymError {
    #[error(transparent)]
    Params(#[from] CapacityError),
    #[error("the symmetric scheme needs at least two messages")]
    TooFewMessages,
    #[error("capacity is zero when T = N")]
    ZeroCapacity,
    #[error("field of {order} elements cannot hold {n} distinct nonzero evaluation points")]
    FieldTooSmall { n: usize, order: usize },
    #[error("desired index {theta} out of range for K={k}")]
    ThetaOutOfRange { theta: usize, k: usize },
    #[error("malformed query: {0}")]
    MalformedQuery(String),
    #[error("invalid side information: {0}")]
    InvalidSideInformation(String),
    #[error("expected {expected} answers, got {got}")]
    AnswerCount { expected: usize, got: usize },
    #[error("bad shared secret: {0}")]
    BadSecret(String),
}

/// Parameters plus the evaluation points `x_n = n + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymParams {
    params: SchemeParams,
    width: Width,
    points: Vec<Symbol>,
}

impl SymParams {
    pub fn new(params: &SchemeParams) -> Result<Self, SymError> {
        params.validate()?;
        if params.k < 2 {
            return Err(SymError::TooFewMessages);
        }
        if params.t >= params.n {
            return Err(SymError::ZeroCapacity);
        }
        let width = match params.width {
            Some(w) => w,
            None => Width::smallest_holding(params.n + 1)
                .ok_or(SymError::FieldTooSmall { n: params.n, order: Width::W16.order() })?,
        };
        if width.order() <= params.n {
            return Err(SymError::FieldTooSmall { n: params.n, order: width.order() });
        }
        let field = Field::get(width);
        let points = (1..=params.n).map(|n| field.point(n)).collect();
        Ok(SymParams { params: *params, width, points })
    }

    pub fn params(&self) -> &SchemeParams {
        &self.params
    }

    pub fn width(&self) -> Width {
        self.width
    }

    pub fn field(&self) -> &'static Field {
        Field::get(self.width)
    }

    pub fn points(&self) -> &[Symbol] {
        &self.points
    }

    /// Symbols per message, `N - T`.
    pub fn message_len(&self) -> usize {
        self.params.n - self.params.t
    }

    /// Query coordinates per database, `K (N - T)`.
    pub fn query_len(&self) -> usize {
        self.params.k * self.message_len()
    }
}

/// The 256-bit key shared by all servers and never given to the client.
#[derive(Clone, PartialEq, Eq)]
pub struct SharedSecret([u8; SECRET_LEN]);

impl fmt::Debug for SharedSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SharedSecret(..)")
    }
}

impl SharedSecret {
    pub fn new(bytes: [u8; SECRET_LEN]) -> Self {
        SharedSecret(bytes)
    }

    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; SECRET_LEN];
        rng.fill_bytes(&mut bytes);
        SharedSecret(bytes)
    }

    /// 64 hex digits, surrounding whitespace ignored.
    pub fn from_hex(text: &str) -> Result<Self, SymError> {
        let bytes = hex::decode(text.trim()).map_err(|e| SymError::BadSecret(e.to_string()))?;
        let bytes: [u8; SECRET_LEN] = bytes
            .try_into()
            .map_err(|b: Vec<u8>| SymError::BadSecret(format!("expected {SECRET_LEN} bytes, got {}", b.len())))?;
        Ok(SharedSecret(bytes))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SymError> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| SymError::BadSecret(e.to_string()))?;
        Self::from_hex(&text)
    }

    pub fn from_env() -> Result<Self, SymError> {
        let text = std::env::var(SECRET_ENV).map_err(|_| SymError::BadSecret(format!("{SECRET_ENV} is not set")))?;
        Self::from_hex(&text)
    }

    pub fn as_bytes(&self) -> &[u8; SECRET_LEN] {
        &self.0
    }
}

/// Per-session masking polynomial, identical at every server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommonRandomness {
    pub session_id: SessionId,
    /// `T` coefficients, constant term first.
    pub sigma: Vec<Symbol>,
}

impl CommonRandomness {
    /// `sigma` from `HMAC-SHA256(secret, session_id || counter)`, two bytes per
    /// coefficient, truncated to the field width.
    pub fn derive(secret: &SharedSecret, session_id: &SessionId, t: usize, width: Width) -> Self {
        let field = Field::get(width);
        let mut sigma = Vec::with_capacity(t);
        let mut counter = 0u32;
        while sigma.len() < t {
            let mut mac = <Hmac<Sha256> as KeyInit>::new_from_slice(secret.as_bytes()).expect("any key length");
            mac.update(session_id);
            mac.update(&counter.to_le_bytes());
            let block = mac.finalize().into_bytes();
            for pair in block.chunks_exact(2) {
                if sigma.len() == t {
                    break;
                }
                sigma.push(field.truncate(u16::from_le_bytes([pair[0], pair[1]]) as u64));
            }
            counter += 1;
        }
        CommonRandomness { session_id: *session_id, sigma }
    }

    /// The degenerate all-zero mask.
    pub fn zero(session_id: &SessionId, t: usize) -> Self {
        CommonRandomness { session_id: *session_id, sigma: vec![0; t] }
    }

    /// Symbols of common randomness consumed.
    pub fn symbols(&self) -> usize {
        self.sigma.len()
    }
}

/// What one database receives in a symmetric session.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SymQuery {
    pub width: Width,
    pub session_id: SessionId,
    pub t: usize,
    /// `K (N - T)` coordinates, message-major.
    pub coords: Vec<Symbol>,
}

/// The client's record of a symmetric session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymSession {
    pub theta: usize,
    pub session_id: SessionId,
    pub queries: Vec<SymQuery>,
}

/// Masking coefficients for every coordinate: `masks[k * (N-T) + i]` holds
/// the `T` coefficients of `rho_{k,i}`.
pub fn sym_query_with_masks(
    sp: &SymParams,
    theta: usize,
    session_id: SessionId,
    masks: &[Vec<Symbol>],
) -> Result<SymSession, SymError> {
    let p = &sp.params;
    if theta >= p.k {
        return Err(SymError::ThetaOutOfRange { theta, k: p.k });
    }
    let field = sp.field();
    let len = sp.message_len();
    assert_eq!(masks.len(), sp.query_len(), "one mask polynomial per coordinate");
    let queries = sp
        .points
        .iter()
        .map(|&x| {
            let coords = (0..p.k)
                .flat_map(|k| (0..len).map(move |i| (k, i)))
                .map(|(k, i)| {
                    let mut v = eval(field, &masks[k * len + i], x);
                    if k == theta {
                        v ^= field.pow_raw(x, (p.t + i) as u64);
                    }
                    v
                })
                .collect();
            SymQuery { width: sp.width, session_id, t: p.t, coords }
        })
        .collect();
    Ok(SymSession { theta, session_id, queries })
}

/// Fresh session id and uniform masks from `rng`.
pub fn sym_query<R: Rng + ?Sized>(sp: &SymParams, theta: usize, rng: &mut R) -> Result<SymSession, SymError> {
    let field = sp.field();
    let mut session_id = [0u8; SESSION_ID_LEN];
    rng.fill_bytes(&mut session_id);
    let masks: Vec<Vec<Symbol>> =
        (0..sp.query_len()).map(|_| (0..sp.params.t).map(|_| field.random(rng)).collect()).collect();
    sym_query_with_masks(sp, theta, session_id, &masks)
}

// Horner evaluation, constant term first.
fn eval(field: &Field, coeffs: &[Symbol], x: Symbol) -> Symbol {
    coeffs.iter().rev().fold(0, |acc, &c| field.mul_raw(acc, x) ^ c)
}

/// Answer of the database at evaluation point `point`.
pub fn sym_answer(
    query: &SymQuery,
    store: &MessageStore,
    cr: &CommonRandomness,
    point: Symbol,
) -> Result<Symbol, SymError> {
    if query.width != store.width() {
        return Err(SymError::MalformedQuery(format!("query over {} but store over {}", query.width, store.width())));
    }
    let expected = store.message_count() * store.message_len();
    if query.coords.len() != expected {
        return Err(SymError::MalformedQuery(format!("expected {expected} coordinates, got {}", query.coords.len())));
    }
    if cr.sigma.len() != query.t {
        return Err(SymError::MalformedQuery(format!("mask degree {} does not match T={}", cr.sigma.len(), query.t)));
    }
    let field = Field::get(store.width());
    if let Some(&bad) = query.coords.iter().find(|&&c| c as usize >= field.order()) {
        return Err(SymError::MalformedQuery(format!("coefficient {bad:#x} outside the field")));
    }
    let data = store.messages().iter().flatten().copied();
    let linear = query.coords.iter().zip(data).fold(0, |acc, (&q, w)| acc ^ field.mul_raw(q, w));
    Ok(linear ^ eval(field, &cr.sigma, point))
}

/// Coefficients of the unique polynomial of degree below `N` through the answers.
pub fn interpolate(sp: &SymParams, answers: &[Symbol]) -> Result<Vec<Symbol>, SymError> {
    let n = sp.params.n;
    if answers.len() != n {
        return Err(SymError::AnswerCount { expected: n, got: answers.len() });
    }
    let field = sp.field();
    let vandermonde = Matrix::from_fn(n, n, |r, c| field.pow_raw(sp.points[r], c as u64));
    Ok(vandermonde.solve(field, answers).expect("distinct evaluation points"))
}

/// The desired message, coefficients `T .. N-1` of the answer polynomial.
pub fn sym_decode(sp: &SymParams, answers: &[Symbol]) -> Result<Vec<Symbol>, SymError> {
    let coeffs = interpolate(sp, answers)?;
    Ok(coeffs[sp.params.t..].to_vec())
}

/// `sum_k W_k` as returned by a single database.
pub fn sum_all(store: &MessageStore) -> Vec<Symbol> {
    let mut acc = vec![0; store.message_len()];
    for m in store.messages() {
        for (a, &v) in acc.iter_mut().zip(m) {
            *a ^= v;
        }
    }
    acc
}

/// Recovers `W_theta` from the downloaded sum when all other messages are cached.
pub fn sym_sum_shortcut(
    k: usize,
    sum: &[Symbol],
    side: &SideInformation,
    theta: usize,
) -> Result<Vec<Symbol>, SymError> {
    if side.len() + 1 != k {
        return Err(SymError::InvalidSideInformation(format!("need {} cached messages, got {}", k - 1, side.len())));
    }
    if side.contains(theta) || theta >= k {
        return Err(SymError::InvalidSideInformation(format!("desired message {theta} must be the one not cached")));
    }
    let mut out = sum.to_vec();
    for (i, m) in side.iter() {
        if i >= k || m.len() != sum.len() {
            return Err(SymError::InvalidSideInformation(format!("cached message {i} does not fit")));
        }
        for (o, &v) in out.iter_mut().zip(m) {
            *o ^= v;
        }
    }
    Ok(out)
}

/// In-memory symmetric round trip. Returns the decoded message and the answers.
pub fn sym_run_local<R: Rng + ?Sized>(
    sp: &SymParams,
    theta: usize,
    store: &MessageStore,
    secret: &SharedSecret,
    rng: &mut R,
) -> Result<(Vec<Symbol>, Vec<Symbol>), SymError> {
    let session = sym_query(sp, theta, rng)?;
    let cr = CommonRandomness::derive(secret, &session.session_id, sp.params.t, sp.width);
    let answers = session
        .queries
        .iter()
        .zip(&sp.points)
        .map(|(q, &x)| sym_answer(q, store, &cr, x))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((sym_decode(sp, &answers)?, answers))
}
