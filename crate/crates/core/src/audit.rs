//! Executable checks of correctness, user privacy, database privacy and rate.
//!
//! Every procedure is deterministic in its master seed: session `i` draws
//! from its own generator seeded by [`session_seed`], so results do not
//! depend on scheduling.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use num_rational::BigRational;
use num_traits::Zero;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::capacity::{
    capacity_stpir_psi, capacity_tpir_psi, rational, required_randomness, CapacityError, SchemeParams,
};
use crate::client::{simulate, ClientError, Scheme};
use crate::field::{Symbol, Width};
use crate::linalg::Matrix;
use crate::server::{DatabaseServer, Role};
use crate::stats::{chi_square_two_sample, chi_square_uniform, tv_distance, Histogram};
use crate::store::MessageStore;
use crate::stpir_psi::{
    interpolate, sum_all, sym_answer, sym_query, sym_query_with_masks, sym_sum_shortcut, CommonRandomness,
    SharedSecret, SymParams,
};
use crate::tpir_psi::{
    answer, decode, plan_structure, queries, sample_precoding, select_width, AnswerBundle, AnswerForm, DownloadPlan,
    LinearQuery, SideInformation, Term, TpirError,
};
use crate::wire::Query;

/// Total variation bound for user privacy.
pub const TV_THRESHOLD: f64 = 0.01;
/// Significance level for the chi-square tests.
pub const P_THRESHOLD: f64 = 0.001;
/// Factor by which a statistic should clear its threshold on the default seed.
pub const MARGIN: f64 = 2.0;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("measured rate {rate} exceeds capacity {capacity}")]
    ConverseViolation { rate: String, capacity: String },
    #[error(transparent)]
    Capacity(#[from] CapacityError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Tpir(#[from] TpirError),
}

/// Independent 64-bit seed for session `index` under `master`.
pub fn session_seed(master: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a Weyl sequence
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(master: u64, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(session_seed(master, index))
}

#[derive(Debug, Clone, Serialize)]
pub struct TestVerdict {
    pub name: String,
    pub passed: bool,
    pub statistics: BTreeMap<String, Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl TestVerdict {
    fn new(name: impl Into<String>, passed: bool) -> Self {
        TestVerdict { name: name.into(), passed, statistics: BTreeMap::new(), detail: None }
    }

    fn stat(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.statistics.insert(key.to_string(), value.into());
        self
    }

    fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub params: SchemeParams,
    pub scheme: String,
    pub sessions: u64,
    pub seed: u64,
    pub tests: Vec<TestVerdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub capacity: Option<String>,
}

impl AuditReport {
    fn new(params: &SchemeParams, scheme: &str, sessions: u64, seed: u64) -> Self {
        AuditReport {
            params: *params,
            scheme: scheme.to_string(),
            sessions,
            seed,
            tests: Vec::new(),
            rate: None,
            capacity: None,
        }
    }

    pub fn passed(&self) -> bool {
        !self.tests.is_empty() && self.tests.iter().all(|t| t.passed)
    }

    pub fn to_json(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("serializable");
        v["verdict"] = json!(if self.passed() { "pass" } else { "fail" });
        v
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} {} sessions={} seed={}: {}\n",
            self.scheme,
            self.params,
            self.sessions,
            self.seed,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        for t in &self.tests {
            let stats: Vec<String> = t.statistics.iter().map(|(k, v)| format!("{k}={v}")).collect();
            out.push_str(&format!("  [{}] {} {}", if t.passed { "pass" } else { "fail" }, t.name, stats.join(" ")));
            if let Some(d) = &t.detail {
                out.push_str(&format!(" ({d})"));
            }
            out.push('\n');
        }
        if let (Some(r), Some(c)) = (&self.rate, &self.capacity) {
            out.push_str(&format!("  rate={r} capacity={c}\n"));
        }
        out
    }
}

/// A deliberate fault injected into the correctness audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    None,
    /// Database 0 ships one parity symbol fewer than the plan asks for.
    DropParitySymbol,
}

/// Uniform `(theta, S)` with `|S| = M` and `theta` not in `S`.
pub fn random_demand<R: Rng + ?Sized>(params: &SchemeParams, rng: &mut R) -> (usize, Vec<usize>) {
    let theta = rng.random_range(0..params.k);
    let others: Vec<usize> = (0..params.k).filter(|&i| i != theta).collect();
    let mut side: Vec<usize> = sample(rng, others.len(), params.m).into_iter().map(|j| others[j]).collect();
    side.sort_unstable();
    (theta, side)
}

/// Every `M`-subset of the messages other than `theta`.
pub fn side_sets(params: &SchemeParams, theta: usize) -> Vec<Vec<usize>> {
    let others: Vec<usize> = (0..params.k).filter(|&i| i != theta).collect();
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(others: &[usize], start: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        for j in start..others.len() {
            cur.push(others[j]);
            rec(others, j + 1, m, cur, out);
            cur.pop();
        }
    }
    rec(&others, 0, params.m, &mut cur, &mut out);
    out
}

/// Symbols per message of `scheme` under `params`.
pub fn message_len(scheme: Scheme, params: &SchemeParams) -> Result<usize, AuditError> {
    Ok(match scheme {
        Scheme::Tpir => crate::capacity::count_profile(params)?.l as usize,
        Scheme::Stpir if params.m + 1 == params.k => (params.n - params.t).max(1),
        Scheme::Stpir => params.n - params.t,
    })
}

pub fn scheme_width(scheme: Scheme, params: &SchemeParams) -> Result<Width, AuditError> {
    Ok(match scheme {
        Scheme::Tpir => select_width(params)?,
        Scheme::Stpir => match params.width {
            Some(w) => w,
            None => Width::smallest_holding(params.n + 1).unwrap_or(Width::W16),
        },
    })
}

fn scheme_name(scheme: Scheme) -> &'static str {
    match scheme {
        Scheme::Tpir => "tpir-psi",
        Scheme::Stpir => "stpir-psi",
    }
}

// One TPIR session through the pure functions, optionally mutated.
fn tpir_session(
    params: &SchemeParams,
    theta: usize,
    side_idx: &[usize],
    store: &MessageStore,
    seed: u64,
    mutation: Mutation,
) -> Result<Vec<Symbol>, TpirError> {
    let plan = plan_structure(params, theta)?;
    let state = sample_precoding(&plan, seed);
    let mut per_db = queries(&plan, &state).iter().map(|q| answer(q, store)).collect::<Result<Vec<_>, _>>()?;
    if mutation == Mutation::DropParitySymbol {
        per_db[0].pop();
    }
    let side = SideInformation::from_store(store, side_idx);
    decode(&AnswerBundle { form: plan.answer_form(), per_db }, &plan, &state, &side)
}

fn stpir_session(
    params: &SchemeParams,
    theta: usize,
    side_idx: &[usize],
    store: &MessageStore,
    secret: &SharedSecret,
    rng: &mut ChaCha20Rng,
    mutation: Mutation,
) -> Result<Vec<Symbol>, String> {
    let side = SideInformation::from_store(store, side_idx);
    if params.m + 1 == params.k {
        let mut sum = sum_all(store);
        if mutation == Mutation::DropParitySymbol {
            sum.pop();
        }
        return sym_sum_shortcut(params.k, &sum, &side, theta).map_err(|e| e.to_string());
    }
    let sp = SymParams::new(params).map_err(|e| e.to_string())?;
    let session = sym_query(&sp, theta, rng).map_err(|e| e.to_string())?;
    let cr = CommonRandomness::derive(secret, &session.session_id, params.t, sp.width());
    let mut answers = session
        .queries
        .iter()
        .zip(sp.points())
        .map(|(q, &x)| sym_answer(q, store, &cr, x))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    if mutation == Mutation::DropParitySymbol {
        answers.pop();
    }
    crate::stpir_psi::sym_decode(&sp, &answers).map_err(|e| e.to_string())
}

/// Full round trips over random `(theta, S, store, seed)`; passes iff every decode is exact.
pub fn audit_correctness(scheme: Scheme, params: &SchemeParams, sessions: u64, seed: u64) -> AuditReport {
    audit_correctness_with(scheme, params, sessions, seed, Mutation::None)
}

pub fn audit_correctness_with(
    scheme: Scheme,
    params: &SchemeParams,
    sessions: u64,
    seed: u64,
    mutation: Mutation,
) -> AuditReport {
    let mut report = AuditReport::new(params, scheme_name(scheme), sessions, seed);
    let (l, width) = match (message_len(scheme, params), scheme_width(scheme, params)) {
        (Ok(l), Ok(w)) => (l, w),
        (Err(e), _) | (_, Err(e)) => {
            report.tests.push(TestVerdict::new("correctness", false).detail(e.to_string()));
            return report;
        }
    };
    let outcomes: Vec<Result<(), String>> = (0..sessions)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, i);
            let (theta, side) = random_demand(params, &mut rng);
            let store = MessageStore::random(width, params.k, l, &mut rng);
            let client_seed: u64 = rng.random();
            let result = match scheme {
                Scheme::Tpir => {
                    tpir_session(params, theta, &side, &store, client_seed, mutation).map_err(|e| e.to_string())
                }
                Scheme::Stpir => {
                    let secret = SharedSecret::random(&mut rng);
                    let mut client = ChaCha20Rng::seed_from_u64(client_seed);
                    stpir_session(params, theta, &side, &store, &secret, &mut client, mutation)
                }
            };
            match result {
                Ok(m) if m == store.message(theta) => Ok(()),
                Ok(_) => Err(format!("session {i}: theta={theta} S={side:?} seed={client_seed}: wrong message")),
                Err(e) => Err(format!("session {i}: theta={theta} S={side:?} seed={client_seed}: {e}")),
            }
        })
        .collect();
    let failures: Vec<&String> = outcomes.iter().filter_map(|r| r.as_ref().err()).collect();
    let mut v = TestVerdict::new("correctness", failures.is_empty())
        .stat("sessions", sessions)
        .stat("failures", failures.len());
    if let Some(first) = failures.first() {
        v = v.detail((*first).clone());
    }
    report.tests.push(v);
    report
}

/// Every `theta`, every `S`, `seeds` client seeds each.
pub fn audit_correctness_exhaustive(scheme: Scheme, params: &SchemeParams, seeds: u64, seed: u64) -> AuditReport {
    let cases: Vec<(usize, Vec<usize>)> =
        (0..params.k).flat_map(|theta| side_sets(params, theta).into_iter().map(move |s| (theta, s))).collect();
    let mut report = AuditReport::new(params, scheme_name(scheme), cases.len() as u64 * seeds, seed);
    let (l, width) = match (message_len(scheme, params), scheme_width(scheme, params)) {
        (Ok(l), Ok(w)) => (l, w),
        (Err(e), _) | (_, Err(e)) => {
            report.tests.push(TestVerdict::new("exhaustive correctness", false).detail(e.to_string()));
            return report;
        }
    };
    let jobs: Vec<(usize, &(usize, Vec<usize>), u64)> =
        cases.iter().enumerate().flat_map(|(c, case)| (0..seeds).map(move |s| (c, case, s))).collect();
    let failures: Vec<String> = jobs
        .par_iter()
        .filter_map(|&(c, (theta, side), s)| {
            let mut rng = rng_for(seed, (c as u64) << 32 | s);
            let store = MessageStore::random(width, params.k, l, &mut rng);
            let result = match scheme {
                Scheme::Tpir => {
                    tpir_session(params, *theta, side, &store, s, Mutation::None).map_err(|e| e.to_string())
                }
                Scheme::Stpir => {
                    let secret = SharedSecret::random(&mut rng);
                    stpir_session(params, *theta, side, &store, &secret, &mut rng, Mutation::None)
                }
            };
            match result {
                Ok(m) if m == store.message(*theta) => None,
                Ok(_) => Some(format!("theta={theta} S={side:?} seed={s}: wrong message")),
                Err(e) => Some(format!("theta={theta} S={side:?} seed={s}: {e}")),
            }
        })
        .collect();
    let mut v = TestVerdict::new("exhaustive correctness", failures.is_empty())
        .stat("cases", cases.len())
        .stat("seeds", seeds)
        .stat("failures", failures.len());
    if let Some(first) = failures.first() {
        v = v.detail(first.clone());
    }
    report.tests.push(v);
    report
}

/// Whose queries the user-privacy audit inspects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrivacySubject {
    Tpir,
    Stpir,
    /// Negative control: every database is asked for message `theta` verbatim.
    DirectDownload,
}

impl PrivacySubject {
    fn name(self) -> &'static str {
        match self {
            PrivacySubject::Tpir => "tpir-psi",
            PrivacySubject::Stpir => "stpir-psi",
            PrivacySubject::DirectDownload => "direct-download",
        }
    }
}

fn direct_download_query(width: Width, l: usize, theta: usize) -> LinearQuery {
    LinearQuery {
        width,
        message_len: l,
        form: AnswerForm::Raw,
        slots: (0..l).map(|j| vec![Term { message: theta as u16, symbol: j as u32, coeff: 1 }]).collect(),
    }
}

/// Produces the query frames of one session for a fixed `theta`.
enum QuerySource {
    Tpir(DownloadPlan),
    Stpir(SymParams, usize),
    Direct(Vec<Query>),
}

impl QuerySource {
    fn new(subject: PrivacySubject, params: &SchemeParams, theta: usize) -> Result<Self, AuditError> {
        Ok(match subject {
            PrivacySubject::Tpir => QuerySource::Tpir(plan_structure(params, theta)?),
            PrivacySubject::Stpir => {
                QuerySource::Stpir(SymParams::new(params).map_err(|e| AuditError::Client(e.into()))?, theta)
            }
            PrivacySubject::DirectDownload => {
                let width = select_width(params)?;
                let l = crate::capacity::count_profile(params)?.l as usize;
                QuerySource::Direct(vec![Query::Linear(direct_download_query(width, l, theta)); params.n])
            }
        })
    }

    fn queries(&self, seed: u64) -> Result<Vec<Query>, AuditError> {
        Ok(match self {
            QuerySource::Tpir(plan) => {
                queries(plan, &sample_precoding(plan, seed)).into_iter().map(Query::Linear).collect()
            }
            QuerySource::Stpir(sp, theta) => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                sym_query(sp, *theta, &mut rng)
                    .map_err(|e| AuditError::Client(e.into()))?
                    .queries
                    .into_iter()
                    .map(Query::Symmetric)
                    .collect()
            }
            QuerySource::Direct(qs) => qs.clone(),
        })
    }
}

fn session_queries(
    subject: PrivacySubject,
    params: &SchemeParams,
    theta: usize,
    seed: u64,
) -> Result<Vec<Query>, AuditError> {
    QuerySource::new(subject, params, theta)?.queries(seed)
}

/// Low-cardinality probes of a collusion view: per message, a bit of the
/// first coefficient the view holds for that message (2 when the view never
/// touches it), then one bit of the digest of the canonical view bytes.
pub fn view_features(view: &[&Query], k: usize) -> Vec<u8> {
    let digests: Vec<[u8; 32]> = view.iter().map(|q| Sha256::digest(q.encode().to_bytes()).into()).collect();
    view_features_with(view, &digests.iter().collect::<Vec<_>>(), k)
}

// `digests[j]` is the SHA-256 of the encoded frame of `view[j]`.
fn view_features_with(view: &[&Query], digests: &[&[u8; 32]], k: usize) -> Vec<u8> {
    let mut features = vec![2u8; k];
    for (i, f) in features.iter_mut().enumerate() {
        'search: for q in view {
            match q {
                Query::Linear(q) => {
                    for slot in &q.slots {
                        if slot.iter().any(|t| t.message as usize == i) {
                            let c =
                                slot.iter().find(|t| t.message as usize == i && t.symbol == 0).map_or(0, |t| t.coeff);
                            *f = (c & 1) as u8;
                            break 'search;
                        }
                    }
                }
                Query::Symmetric(q) => {
                    let len = q.coords.len() / k.max(1);
                    if len > 0 {
                        *f = (q.coords[i * len] & 1) as u8;
                        break 'search;
                    }
                }
                Query::SumAll { .. } => {}
            }
        }
    }
    let mut hasher = Sha256::new();
    for d in digests {
        hasher.update(d);
    }
    features.push(hasher.finalize()[0] & 1);
    features
}

/// Every `t`-subset of `0..n`.
pub fn collusion_sets(n: usize, t: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(start: usize, n: usize, t: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == t {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, t, cur, out);
            cur.pop();
        }
    }
    rec(0, n, t, &mut cur, &mut out);
    out
}

fn structural_checks(
    subject: PrivacySubject,
    params: &SchemeParams,
    seed: u64,
) -> Result<Vec<TestVerdict>, AuditError> {
    let mut out = Vec::new();
    match subject {
        PrivacySubject::Tpir | PrivacySubject::DirectDownload => {
            let shapes: Vec<_> = (0..params.k)
                .map(|theta| plan_structure(params, theta).map(|p| p.shape()))
                .collect::<Result<_, _>>()?;
            let same_shape = shapes.windows(2).all(|w| w[0] == w[1]);
            out.push(TestVerdict::new("plan shape identical across theta", same_shape).stat("thetas", params.k));

            // Per collusion set and message: slot count and coefficient rank.
            let mut counts: Vec<BTreeMap<(Vec<usize>, usize), (usize, usize)>> = Vec::new();
            for theta in 0..params.k {
                let qs = session_queries(subject, params, theta, seed)?;
                let width = qs[0].width();
                let field = crate::field::Field::get(width);
                let mut per = BTreeMap::new();
                for set in collusion_sets(params.n, params.t) {
                    for i in 0..params.k {
                        let mut rows = Vec::new();
                        let mut l = 0;
                        for &db in &set {
                            let Query::Linear(q) = &qs[db] else { continue };
                            l = q.message_len;
                            for slot in &q.slots {
                                if slot.iter().any(|t| t.message as usize == i) {
                                    let mut row = vec![0; q.message_len];
                                    for t in slot.iter().filter(|t| t.message as usize == i) {
                                        row[t.symbol as usize] = t.coeff;
                                    }
                                    rows.push(row);
                                }
                            }
                        }
                        let count = rows.len();
                        let rank = if count == 0 { 0 } else { Matrix::from_rows(count, l, rows.concat()).rank(field) };
                        per.insert((set.clone(), i), (count, rank));
                    }
                }
                counts.push(per);
            }
            let same_counts = counts.windows(2).all(|w| w[0] == w[1]);
            out.push(TestVerdict::new("per-message slot counts and ranks identical across theta", same_counts));
        }
        PrivacySubject::Stpir => {
            let lens: BTreeSet<Vec<usize>> = (0..params.k)
                .map(|theta| {
                    session_queries(subject, params, theta, seed).map(|qs| {
                        qs.iter()
                            .map(|q| match q {
                                Query::Symmetric(q) => q.coords.len(),
                                _ => 0,
                            })
                            .collect()
                    })
                })
                .collect::<Result<_, _>>()?;
            out.push(TestVerdict::new("query shape identical across theta", lens.len() == 1));
        }
    }

    // Queries sent through the full client must not depend on S.
    if subject != PrivacySubject::DirectDownload {
        let scheme = if subject == PrivacySubject::Tpir { Scheme::Tpir } else { Scheme::Stpir };
        let sym_shortcut = scheme == Scheme::Stpir && params.m + 1 == params.k;
        let mut identical = true;
        let mut compared = 0usize;
        if !sym_shortcut {
            let width = scheme_width(scheme, params)?;
            let l = message_len(scheme, params)?;
            let mut rng = rng_for(seed, u64::MAX);
            let store = MessageStore::random(width, params.k, l, &mut rng);
            let secret = SharedSecret::random(&mut rng);
            let role = if scheme == Scheme::Tpir { Role::Tpir } else { Role::Stpir };
            let server = Arc::new(DatabaseServer::new(store.clone(), role, Some(secret)).expect("secret given"));
            for theta in 0..params.k {
                let mut reference: Option<Vec<Vec<u8>>> = None;
                for side in side_sets(params, theta) {
                    let r =
                        simulate(scheme, &server, params, theta, &SideInformation::from_store(&store, &side), seed)?;
                    let sent: Vec<Vec<u8>> = r.transcripts.iter().map(|t| t.frames[2].to_bytes()).collect();
                    compared += 1;
                    match &reference {
                        None => reference = Some(sent),
                        Some(q) => identical &= *q == sent,
                    }
                }
            }
        }
        out.push(
            TestVerdict::new("queries bit-identical across side-information sets", identical)
                .stat("retrievals", compared),
        );
    }
    Ok(out)
}

/// Structural (exact) and statistical user-privacy checks.
pub fn audit_user_privacy(subject: PrivacySubject, params: &SchemeParams, sessions: u64, seed: u64) -> AuditReport {
    let mut report = AuditReport::new(params, subject.name(), sessions, seed);
    match structural_checks(subject, params, seed) {
        Ok(v) => report.tests.extend(v),
        Err(e) => {
            report.tests.push(TestVerdict::new("structural privacy", false).detail(e.to_string()));
            return report;
        }
    }
    if sessions == 0 {
        return report;
    }
    let sets = collusion_sets(params.n, params.t);
    let k = params.k;
    // hist[theta][set][feature]
    let mut hist: Vec<Vec<Vec<Histogram<u8>>>> = Vec::with_capacity(k);
    for theta in 0..k {
        let source = match QuerySource::new(subject, params, theta) {
            Ok(s) => s,
            Err(e) => {
                report.tests.push(TestVerdict::new("statistical privacy", false).detail(e.to_string()));
                return report;
            }
        };
        let per_session: Result<Vec<Vec<Vec<u8>>>, AuditError> = (0..sessions)
            .into_par_iter()
            .map(|i| {
                let qs = source.queries(session_seed(seed ^ ((theta as u64) << 48), i))?;
                let digests: Vec<[u8; 32]> = qs.iter().map(|q| Sha256::digest(q.encode().to_bytes()).into()).collect();
                Ok(sets
                    .iter()
                    .map(|set| {
                        let view: Vec<&Query> = set.iter().map(|&db| &qs[db]).collect();
                        let d: Vec<&[u8; 32]> = set.iter().map(|&db| &digests[db]).collect();
                        view_features_with(&view, &d, k)
                    })
                    .collect())
            })
            .collect();
        let per_session = match per_session {
            Ok(v) => v,
            Err(e) => {
                report.tests.push(TestVerdict::new("statistical privacy", false).detail(e.to_string()));
                return report;
            }
        };
        let mut h = vec![vec![Histogram::new(); k + 1]; sets.len()];
        for s in &per_session {
            for (si, features) in s.iter().enumerate() {
                for (fi, &f) in features.iter().enumerate() {
                    h[si][fi].add(f);
                }
            }
        }
        hist.push(h);
    }
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for (si, set) in sets.iter().enumerate() {
        for a in 0..k {
            for b in a + 1..k {
                for f in 0..=k {
                    let tv = tv_distance(&hist[a][si][f], &hist[b][si][f]);
                    if tv > worst {
                        worst = tv;
                        worst_at = format!("set={set:?} theta=({a},{b}) feature={f}");
                    }
                }
            }
        }
    }
    let mut v = TestVerdict::new("collusion-view TV below threshold", worst < TV_THRESHOLD)
        .stat("max_tv", worst)
        .stat("threshold", TV_THRESHOLD)
        .stat("margin_ok", worst * MARGIN < TV_THRESHOLD)
        .stat("collusion_sets", sets.len());
    if !worst_at.is_empty() {
        v = v.detail(worst_at);
    }
    report.tests.push(v);
    report
}

/// Exact user-privacy check by enumerating all masks at `w = 4`, `N = 2`, `T = 1`, `K = 2`.
pub fn stpir_exact_view_check() -> TestVerdict {
    let params = SchemeParams::new(2, 0, 2, 1).expect("valid").with_width(Width::W4);
    let sp = SymParams::new(&params).expect("valid");
    let mut views: Vec<Vec<Histogram<Vec<Symbol>>>> = vec![vec![Histogram::new(); 2]; 2];
    for theta in 0..2 {
        for a in 0..16u16 {
            for b in 0..16u16 {
                let s = sym_query_with_masks(&sp, theta, [0; 16], &[vec![a], vec![b]]).expect("valid");
                for db in 0..2 {
                    views[theta][db].add(s.queries[db].coords.clone());
                }
            }
        }
    }
    let identical = (0..2).all(|db| views[0][db] == views[1][db]);
    let uniform = views.iter().flatten().all(|h| h.support() == 256 && h.iter().all(|(_, c)| c == 1));
    TestVerdict::new("exact symmetric view enumeration", identical && uniform)
        .stat("mask_combinations", 256)
        .stat("identical", identical)
        .stat("uniform", uniform)
}

/// Whose answers the database-privacy audit inspects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbPrivacySubject {
    Stpir,
    /// Negative control: the masking polynomial is forced to zero.
    StpirZeroSigma,
    /// The non-symmetric scheme, which has no server randomness.
    Tpir,
}

impl DbPrivacySubject {
    fn name(self) -> &'static str {
        match self {
            DbPrivacySubject::Stpir => "stpir-psi",
            DbPrivacySubject::StpirZeroSigma => "stpir-psi-sigma0",
            DbPrivacySubject::Tpir => "tpir-psi",
        }
    }
}

/// Client views of the answers over many sessions with fixed queries.
///
/// The client seed, and with it every query coefficient, is fixed; only the
/// session id (and therefore the servers' mask) varies.
fn answer_views(
    subject: DbPrivacySubject,
    params: &SchemeParams,
    store: &MessageStore,
    sessions: u64,
    seed: u64,
    stream: u64,
) -> Result<Vec<(Vec<Symbol>, Vec<Symbol>)>, AuditError> {
    let theta = 0;
    match subject {
        DbPrivacySubject::Tpir => {
            let plan = plan_structure(params, theta)?;
            let state = sample_precoding(&plan, seed);
            let qs = queries(&plan, &state);
            let answers: Vec<Symbol> = qs.iter().map(|q| answer(q, store)).collect::<Result<Vec<_>, _>>()?.concat();
            Ok((0..sessions).map(|_| (answers.clone(), Vec::new())).collect())
        }
        DbPrivacySubject::Stpir | DbPrivacySubject::StpirZeroSigma => {
            let sp = SymParams::new(params).map_err(|e| AuditError::Client(e.into()))?;
            let mut client = ChaCha20Rng::seed_from_u64(seed);
            let field = sp.field();
            let masks: Vec<Vec<Symbol>> =
                (0..sp.query_len()).map(|_| (0..params.t).map(|_| field.random(&mut client)).collect()).collect();
            let secret = SharedSecret::random(&mut client);
            (0..sessions)
                .into_par_iter()
                .map(|i| {
                    let mut rng = rng_for(seed ^ stream, i);
                    let mut session_id = [0u8; 16];
                    rng.fill(&mut session_id);
                    let s = sym_query_with_masks(&sp, theta, session_id, &masks)
                        .map_err(|e| AuditError::Client(e.into()))?;
                    let cr = if subject == DbPrivacySubject::StpirZeroSigma {
                        CommonRandomness::zero(&session_id, params.t)
                    } else {
                        CommonRandomness::derive(&secret, &session_id, params.t, sp.width())
                    };
                    let answers: Vec<Symbol> = s
                        .queries
                        .iter()
                        .zip(sp.points())
                        .map(|(q, &x)| sym_answer(q, store, &cr, x))
                        .collect::<Result<_, _>>()
                        .map_err(|e| AuditError::Client(e.into()))?;
                    let low =
                        interpolate(&sp, &answers).map_err(|e| AuditError::Client(e.into()))?[..params.t].to_vec();
                    Ok((answers, low))
                })
                .collect()
        }
    }
}

/// Uniformity of the masked coefficients and invariance of the client view
/// under flipping a symbol of an undesired message.
pub fn audit_db_privacy(subject: DbPrivacySubject, params: &SchemeParams, sessions: u64, seed: u64) -> AuditReport {
    let mut report = AuditReport::new(params, subject.name(), sessions, seed);
    let scheme = if subject == DbPrivacySubject::Tpir { Scheme::Tpir } else { Scheme::Stpir };
    let run = || -> Result<Vec<TestVerdict>, AuditError> {
        if params.k < 2 {
            return Err(AuditError::Capacity(CapacityError::InvalidParams("need an undesired message".into())));
        }
        let width = scheme_width(scheme, params)?;
        let l = message_len(scheme, params)?;
        let mut rng = rng_for(seed, u64::MAX - 1);
        let store = MessageStore::random(width, params.k, l, &mut rng);
        let mut flipped = store.clone();
        // Message 1 is never the desired one here.
        flipped.set_symbol(1, 0, store.message(1)[0] ^ 1);

        let base = answer_views(subject, params, &store, sessions, seed, 0xA)?;
        let other = answer_views(subject, params, &flipped, sessions, seed, 0xB)?;
        let mut out = Vec::new();

        if scheme == Scheme::Stpir {
            let order = width.order();
            let mut worst = 1.0f64;
            for c in 0..params.t {
                let mut counts = vec![0u64; order];
                for (_, low) in &base {
                    counts[low[c] as usize] += 1;
                }
                worst = worst.min(chi_square_uniform(&counts).p_value);
            }
            out.push(
                TestVerdict::new("masked coefficients uniform", worst > P_THRESHOLD)
                    .stat("min_p_value", worst)
                    .stat("threshold", P_THRESHOLD)
                    .stat("margin_ok", worst > P_THRESHOLD * MARGIN)
                    .stat("bins", order),
            );
        }

        let ha: Histogram<Vec<Symbol>> = base.into_iter().map(|(a, _)| a).collect();
        let hb: Histogram<Vec<Symbol>> = other.into_iter().map(|(a, _)| a).collect();
        let (ca, cb) = ha.aligned(&hb);
        let test = chi_square_two_sample(&ca, &cb);
        out.push(
            TestVerdict::new("client view invariant under undesired flip", test.p_value > P_THRESHOLD)
                .stat("p_value", test.p_value)
                .stat("statistic", test.statistic)
                .stat("dof", test.dof)
                .stat("threshold", P_THRESHOLD)
                .stat("margin_ok", test.p_value > P_THRESHOLD * MARGIN),
        );
        Ok(out)
    };
    match run() {
        Ok(v) => report.tests.extend(v),
        Err(e) => report.tests.push(TestVerdict::new("database privacy", false).detail(e.to_string())),
    }
    report
}

#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub params: SchemeParams,
    pub scheme: String,
    pub sessions: u64,
    /// `L w / D`, exact.
    pub rate: String,
    pub capacity: String,
    /// Common randomness per desired symbol, exact.
    pub rho: String,
    pub matches: bool,
    #[serde(skip)]
    pub rate_value: BigRational,
    #[serde(skip)]
    pub capacity_value: BigRational,
    #[serde(skip)]
    pub rho_value: BigRational,
}

/// Measures the download rate through the in-process servers.
///
/// Fails hard if the rate ever exceeds capacity.
pub fn measure_rate(scheme: Scheme, params: &SchemeParams, sessions: u64, seed: u64) -> Result<RateReport, AuditError> {
    let width = scheme_width(scheme, params)?;
    let l = message_len(scheme, params)?;
    let w = width.bits() as u64;
    let mut downloaded_bits = 0u64;
    let mut randomness = 0u64;
    let sessions = sessions.max(1);
    for i in 0..sessions {
        let mut rng = rng_for(seed, i);
        let (theta, side) = random_demand(params, &mut rng);
        let store = MessageStore::random(width, params.k, l, &mut rng);
        let secret = SharedSecret::random(&mut rng);
        let role = match scheme {
            Scheme::Tpir => Role::Tpir,
            Scheme::Stpir => Role::Stpir,
        };
        let server = Arc::new(DatabaseServer::new(store.clone(), role, Some(secret)).expect("secret given"));
        let r = simulate(scheme, &server, params, theta, &SideInformation::from_store(&store, &side), rng.random())?;
        downloaded_bits += r.downloaded as u64 * w;
        randomness += r.randomness as u64;
    }
    // D is the expected download; L w / D with D = downloaded_bits / sessions.
    let rate = rational(l as u64 * w * sessions, downloaded_bits);
    let rho = rational(randomness, l as u64 * sessions);
    let capacity = match scheme {
        Scheme::Tpir => capacity_tpir_psi(params)?,
        Scheme::Stpir => capacity_stpir_psi(params, &rho)?,
    };
    if rate > capacity {
        return Err(AuditError::ConverseViolation { rate: rate.to_string(), capacity: capacity.to_string() });
    }
    let stpir_rho_ok = scheme == Scheme::Tpir
        || if params.m + 1 == params.k { rho.is_zero() } else { rho == required_randomness(params) };
    Ok(RateReport {
        params: *params,
        scheme: scheme_name(scheme).to_string(),
        sessions,
        rate: rate.to_string(),
        capacity: capacity.to_string(),
        rho: rho.to_string(),
        matches: rate == capacity && stpir_rho_ok,
        rate_value: rate,
        capacity_value: capacity,
        rho_value: rho,
    })
}

/// Rate audit as a report with a single verdict.
pub fn audit_rate(scheme: Scheme, params: &SchemeParams, sessions: u64, seed: u64) -> AuditReport {
    let mut report = AuditReport::new(params, scheme_name(scheme), sessions, seed);
    match measure_rate(scheme, params, sessions, seed) {
        Ok(r) => {
            report.tests.push(
                TestVerdict::new("rate equals capacity", r.matches)
                    .stat("rate", r.rate.clone())
                    .stat("rho", r.rho.clone()),
            );
            report.rate = Some(r.rate);
            report.capacity = Some(r.capacity);
        }
        Err(e) => report.tests.push(TestVerdict::new("rate equals capacity", false).detail(e.to_string())),
    }
    report
}

/// Parameter points swept by `audit rate` and `bench --grid desk`.
pub fn desk_grid() -> Vec<(Scheme, SchemeParams)> {
    let mut out = Vec::new();
    for k in 1..=4 {
        for m in 0..k {
            for n in 2..=3 {
                for t in 1..n {
                    out.push((Scheme::Tpir, SchemeParams::new(k, m, n, t).expect("valid")));
                }
            }
        }
    }
    for k in 2..=3 {
        for m in 0..k {
            for (n, t) in [(2, 1), (3, 1), (3, 2), (4, 2)] {
                out.push((Scheme::Stpir, SchemeParams::new(k, m, n, t).expect("valid")));
            }
        }
    }
    out
}
