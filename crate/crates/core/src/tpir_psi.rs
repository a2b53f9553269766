//! The TPIR-PSI scheme: layered k-sum download plans with MDS-precoded
//! undesired streams, followed by query redundancy removal.
//!
//! Each database receives, per layer `k` and per `k`-subset `B` of the
//! messages, `(N-T)^(k-1) T^(K-k)` slots. A slot is the field sum of one
//! precoded symbol from every message in `B`:
//!
//! * messages other than the desired one contribute symbols of an MDS
//!   codeword shared by every member of the undesired subset ("group");
//!   theta-free slots expose an information set of that codeword and
//!   theta-bearing slots reuse the remaining coordinates as interference;
//! * the desired message contributes fresh symbols of `U_theta W_theta`.
//!
//! With side information, each database re-encodes its `p1` answers with a
//! fixed systematic `(2p1 - p2, p1)` code and ships only the `p1 - p2`
//! parity symbols; the client supplies the `p2` slots it can compute itself.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::capacity::{count_profile, layer_instances, CapacityError, CountProfile, SchemeParams};
use crate::coding::{make_mds, make_systematic_mds, sample_full_rank, CodingError, FullRankMatrix, GeneratorMatrix};
use crate::field::{Field, Symbol, Width};
use crate::linalg::Matrix;
use crate::store::MessageStore;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TpirError {
    #[error(transparent)]
    Params(#[from] CapacityError),
    #[error("the scheme needs T < N, got {0}")]
    NotConstructible(SchemeParams),
    #[error("desired index {theta} out of range for K={k}")]
    ThetaOutOfRange { theta: usize, k: usize },
    #[error("field of {order} elements too small, need at least {required}; smallest adequate width: {minimal:?}")]
    FieldTooSmall { required: usize, order: usize, minimal: Option<Width> },
    #[error("malformed query: {0}")]
    MalformedQuery(String),
    #[error("invalid side information: {0}")]
    InvalidSideInformation(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Coding(#[from] CodingError),
}

/// Which precoded stream a slot term draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    /// Symbol `offset` of `U_theta W_theta`.
    Desired { offset: usize },
    /// Coordinate `coordinate` of the codeword of undesired group `group`.
    Group { group: usize, coordinate: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Source {
    pub message: usize,
    pub stream: Stream,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySlot {
    pub layer: usize,
    /// Sorted message indices summed in this slot.
    pub subset: Vec<usize>,
    pub instance: usize,
    pub sources: Vec<Source>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotRef {
    pub db: usize,
    pub slot: usize,
}

/// One undesired subset `D` and the MDS code shared by its members.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UndesiredGroup {
    pub members: Vec<usize>,
    /// Code length.
    pub e: usize,
    /// Code dimension; coordinates `0..f` are consumed by theta-free slots.
    pub f: usize,
    /// Slot consuming each codeword coordinate.
    pub coordinates: Vec<SlotRef>,
    /// First row of `U_member` feeding this group, aligned with `members`.
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DownloadPlan {
    params: SchemeParams,
    width: Width,
    profile: CountProfile,
    theta: usize,
    per_db: Vec<Vec<QuerySlot>>,
    groups: Vec<UndesiredGroup>,
    generators: Vec<Arc<GeneratorMatrix>>,
}

/// The client's private precoding randomness and the public generators.
#[derive(Debug, Clone)]
pub struct PrecodingState {
    seed: u64,
    mixing: Vec<FullRankMatrix>,
    generators: Vec<Arc<GeneratorMatrix>>,
}

impl PrecodingState {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mixing(&self, message: usize) -> &FullRankMatrix {
        &self.mixing[message]
    }

    pub fn generator(&self, group: usize) -> &GeneratorMatrix {
        &self.generators[group]
    }
}

/// How a database returns its slot values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnswerForm {
    Raw,
    /// Parity part of the systematic `(2p1 - known, p1)` code.
    Compressed {
        known: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Term {
    pub message: u16,
    pub symbol: u32,
    pub coeff: Symbol,
}

/// The query one database sees: explicit coefficients per slot, nothing else.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LinearQuery {
    pub width: Width,
    pub message_len: usize,
    pub form: AnswerForm,
    pub slots: Vec<Vec<Term>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerBundle {
    pub form: AnswerForm,
    pub per_db: Vec<Vec<Symbol>>,
}

/// Cached messages `W_S`, keyed by message index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SideInformation {
    messages: BTreeMap<usize, Vec<Symbol>>,
}

impl SideInformation {
    pub fn new(messages: BTreeMap<usize, Vec<Symbol>>) -> Self {
        SideInformation { messages }
    }

    pub fn from_store(store: &MessageStore, indices: &[usize]) -> Self {
        SideInformation { messages: indices.iter().map(|&i| (i, store.message(i).to_vec())).collect() }
    }

    pub fn indices(&self) -> Vec<usize> {
        self.messages.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.messages.contains_key(&index)
    }

    pub fn message(&self, index: usize) -> Option<&[Symbol]> {
        self.messages.get(&index).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[Symbol])> {
        self.messages.iter().map(|(&i, m)| (i, m.as_slice()))
    }
}

/// Field size needed by a plan, `max(group code lengths, 2p1 - p2) + 1`.
pub fn required_field_order(params: &SchemeParams) -> Result<usize, TpirError> {
    let profile = count_profile(params)?;
    let mut longest = 0usize;
    for d in 1..params.k {
        // e = N (N-T)^(d-1) T^(K-d) + N (N-T)^d T^(K-d-1)
        let e = params.n as u64 * (layer_instances(params, d) + layer_instances(params, d + 1));
        longest = longest.max(e as usize);
    }
    if params.m > 0 {
        longest = longest.max((2 * profile.p1 - profile.p2) as usize);
    }
    Ok(longest + 1)
}

pub fn select_width(params: &SchemeParams) -> Result<Width, TpirError> {
    let required = required_field_order(params)?;
    let minimal = Width::smallest_holding(required);
    match params.width {
        Some(w) if w.order() >= required => Ok(w),
        Some(w) => Err(TpirError::FieldTooSmall { required, order: w.order(), minimal }),
        None => minimal.ok_or(TpirError::FieldTooSmall { required, order: Width::W16.order(), minimal: None }),
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// The deterministic part of a plan: slot layout, groups and generators.
pub fn plan_structure(params: &SchemeParams, theta: usize) -> Result<DownloadPlan, TpirError> {
    params.validate()?;
    if !params.constructible() {
        return Err(TpirError::NotConstructible(*params));
    }
    if theta >= params.k {
        return Err(TpirError::ThetaOutOfRange { theta, k: params.k });
    }
    let width = select_width(params)?;
    let field = Field::get(width);
    let profile = count_profile(params)?;
    let (k, n) = (params.k, params.n);

    let mut group_of: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut groups: Vec<UndesiredGroup> = Vec::new();
    // Groups are created in (size, lexicographic) order over undesired subsets.
    for d in 1..k {
        for subset in combinations(k, d) {
            if subset.contains(&theta) {
                continue;
            }
            group_of.insert(subset.clone(), groups.len());
            groups.push(UndesiredGroup { members: subset, e: 0, f: 0, coordinates: Vec::new(), rows: Vec::new() });
        }
    }

    let mut per_db: Vec<Vec<QuerySlot>> = vec![Vec::with_capacity(profile.p1 as usize); n];
    let mut theta_bearing: Vec<Vec<SlotRef>> = vec![Vec::new(); groups.len()];
    let mut next_desired = 0usize;
    let mut base = 0usize;
    for layer in 1..=k {
        let count = layer_instances(params, layer) as usize;
        for subset in combinations(k, layer) {
            let has_theta = subset.contains(&theta);
            let undesired: Vec<usize> = subset.iter().copied().filter(|&i| i != theta).collect();
            let group = group_of.get(&undesired).copied();
            for (db, slots) in per_db.iter_mut().enumerate() {
                for instance in 0..count {
                    let slot_ref = SlotRef { db, slot: base + instance };
                    let mut sources = Vec::with_capacity(subset.len());
                    if has_theta {
                        sources.push(Source { message: theta, stream: Stream::Desired { offset: next_desired } });
                        next_desired += 1;
                    }
                    if let Some(g) = group {
                        // Theta-free slots of layer d come before the theta-bearing
                        // slots of layer d + 1, so they occupy coordinates 0..f.
                        let coordinate = if has_theta {
                            theta_bearing[g].push(slot_ref);
                            usize::MAX
                        } else {
                            groups[g].coordinates.push(slot_ref);
                            groups[g].coordinates.len() - 1
                        };
                        for &message in &undesired {
                            sources.push(Source { message, stream: Stream::Group { group: g, coordinate } });
                        }
                    }
                    sources.sort_by_key(|s| s.message);
                    slots.push(QuerySlot { layer, subset: subset.clone(), instance, sources });
                }
            }
            base += count;
        }
    }

    for (g, group) in groups.iter_mut().enumerate() {
        group.f = group.coordinates.len();
        for &slot_ref in &theta_bearing[g] {
            let coordinate = group.coordinates.len();
            group.coordinates.push(slot_ref);
            for source in &mut per_db[slot_ref.db][slot_ref.slot].sources {
                if let Stream::Group { coordinate: c, .. } = &mut source.stream {
                    *c = coordinate;
                }
            }
        }
        group.e = group.coordinates.len();
    }

    let mut next_row = vec![0usize; k];
    for group in &mut groups {
        group.rows = group
            .members
            .iter()
            .map(|&i| {
                let start = next_row[i];
                next_row[i] += group.f;
                start
            })
            .collect();
    }
    debug_assert_eq!(next_desired as u64, profile.l);

    let mut cache: HashMap<(usize, usize), Arc<GeneratorMatrix>> = HashMap::new();
    let mut generators = Vec::with_capacity(groups.len());
    for group in &groups {
        let g = match cache.get(&(group.e, group.f)) {
            Some(g) => g.clone(),
            None => {
                let g = Arc::new(make_mds(field, group.e, group.f)?);
                cache.insert((group.e, group.f), g.clone());
                g
            }
        };
        generators.push(g);
    }

    Ok(DownloadPlan { params: *params, width, profile, theta, per_db, groups, generators })
}

/// Draws the private mixing matrices `U_1 .. U_K` from `seed`.
pub fn sample_precoding(plan: &DownloadPlan, seed: u64) -> PrecodingState {
    let field = plan.field();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let l = plan.profile.l as usize;
    let mixing = (0..plan.params.k).map(|_| sample_full_rank(field, l, &mut rng)).collect();
    PrecodingState { seed, mixing, generators: plan.generators.clone() }
}

/// Builds the download plan for desired message `theta` (0-based) and draws
/// the private mixing matrices from `seed`.
///
/// Side information is deliberately not an input: the plan, and therefore
/// every query, is a function of `(params, theta, seed)` only.
pub fn build_plan(params: &SchemeParams, theta: usize, seed: u64) -> Result<(DownloadPlan, PrecodingState), TpirError> {
    let plan = plan_structure(params, theta)?;
    let state = sample_precoding(&plan, seed);
    Ok((plan, state))
}

impl DownloadPlan {
    pub fn params(&self) -> &SchemeParams {
        &self.params
    }

    pub fn width(&self) -> Width {
        self.width
    }

    pub fn field(&self) -> &'static Field {
        Field::get(self.width)
    }

    pub fn profile(&self) -> &CountProfile {
        &self.profile
    }

    pub fn theta(&self) -> usize {
        self.theta
    }

    pub fn slots(&self, db: usize) -> &[QuerySlot] {
        &self.per_db[db]
    }

    pub fn groups(&self) -> &[UndesiredGroup] {
        &self.groups
    }

    pub fn answer_form(&self) -> AnswerForm {
        if self.params.m == 0 {
            AnswerForm::Raw
        } else {
            AnswerForm::Compressed { known: self.profile.p2 as usize }
        }
    }

    /// Symbols shipped by each database.
    pub fn download_per_db(&self) -> usize {
        match self.answer_form() {
            AnswerForm::Raw => self.profile.p1 as usize,
            AnswerForm::Compressed { known } => self.profile.p1 as usize - known,
        }
    }

    /// `(layer, subset)` of every slot, per database. Identical for every theta.
    pub fn shape(&self) -> Vec<Vec<(usize, Vec<usize>)>> {
        self.per_db.iter().map(|slots| slots.iter().map(|s| (s.layer, s.subset.clone())).collect()).collect()
    }

    /// Counts of slots per `(layer, subset)` over the union of `dbs`.
    pub fn joint_shape(&self, dbs: &[usize]) -> BTreeMap<(usize, Vec<usize>), usize> {
        let mut out = BTreeMap::new();
        for &db in dbs {
            for s in &self.per_db[db] {
                *out.entry((s.layer, s.subset.clone())).or_insert(0) += 1;
            }
        }
        out
    }
}

struct Precoder<'a> {
    plan: &'a DownloadPlan,
    state: &'a PrecodingState,
    // (message, group) -> e x L coefficient matrix G_g U_message[rows]
    group_rows: HashMap<(usize, usize), Matrix>,
}

impl<'a> Precoder<'a> {
    fn new(plan: &'a DownloadPlan, state: &'a PrecodingState, messages: Option<&BTreeSet<usize>>) -> Self {
        let field = plan.field();
        let mut group_rows = HashMap::new();
        for (g, group) in plan.groups.iter().enumerate() {
            let generator = state.generator(g).matrix();
            for (&message, &start) in group.members.iter().zip(&group.rows) {
                if messages.is_some_and(|set| !set.contains(&message)) {
                    continue;
                }
                let rows = state.mixing(message).matrix().row_range(start, group.f);
                group_rows.insert((message, g), generator.mul(field, &rows));
            }
        }
        Precoder { plan, state, group_rows }
    }

    fn coefficients(&self, source: &Source) -> &[Symbol] {
        match source.stream {
            Stream::Desired { offset } => self.state.mixing(self.plan.theta).row(offset),
            Stream::Group { group, coordinate } => self.group_rows[&(source.message, group)].row(coordinate),
        }
    }
}

/// Materializes each database's query as explicit coefficient rows.
pub fn queries(plan: &DownloadPlan, state: &PrecodingState) -> Vec<LinearQuery> {
    let precoder = Precoder::new(plan, state, None);
    let form = plan.answer_form();
    plan.per_db
        .iter()
        .map(|slots| LinearQuery {
            width: plan.width,
            message_len: plan.profile.l as usize,
            form,
            slots: slots
                .iter()
                .map(|slot| {
                    slot.sources
                        .iter()
                        .flat_map(|source| {
                            precoder.coefficients(source).iter().enumerate().filter(|(_, &c)| c != 0).map(
                                move |(symbol, &coeff)| Term {
                                    message: source.message as u16,
                                    symbol: symbol as u32,
                                    coeff,
                                },
                            )
                        })
                        .collect()
                })
                .collect(),
        })
        .collect()
}

/// Evaluates every slot of `query` against the stored messages.
pub fn answer_raw(query: &LinearQuery, store: &MessageStore) -> Result<Vec<Symbol>, TpirError> {
    if query.width != store.width() {
        return Err(TpirError::MalformedQuery(format!("query over {} but store over {}", query.width, store.width())));
    }
    if query.message_len != store.message_len() {
        return Err(TpirError::MalformedQuery(format!(
            "query expects messages of {} symbols, store has {}",
            query.message_len,
            store.message_len()
        )));
    }
    let field = Field::get(store.width());
    query
        .slots
        .iter()
        .map(|terms| {
            terms.iter().try_fold(0 as Symbol, |acc, t| {
                let message = t.message as usize;
                let symbol = t.symbol as usize;
                if message >= store.message_count() || symbol >= store.message_len() {
                    return Err(TpirError::MalformedQuery(format!(
                        "term references message {message} symbol {symbol}, outside {}x{}",
                        store.message_count(),
                        store.message_len()
                    )));
                }
                if t.coeff as usize >= field.order() {
                    return Err(TpirError::MalformedQuery(format!("coefficient {:#x} outside the field", t.coeff)));
                }
                Ok(acc ^ field.mul_raw(t.coeff, store.message(message)[symbol]))
            })
        })
        .collect()
}

/// Parity symbols of the systematic `(2p1 - known, p1)` encoding of `raw`.
pub fn compress(field: &Field, raw: &[Symbol], known: usize) -> Result<Vec<Symbol>, TpirError> {
    let p1 = raw.len();
    if known >= p1 {
        return Err(TpirError::MalformedQuery(format!("{known} known symbols leave nothing to download from {p1}")));
    }
    let code = make_systematic_mds(field, 2 * p1 - known, p1)?;
    Ok(code.encode_prefix(field, raw, p1 - known)?)
}

/// What a database returns for `query`, in the query's answer form.
pub fn answer(query: &LinearQuery, store: &MessageStore) -> Result<Vec<Symbol>, TpirError> {
    let raw = answer_raw(query, store)?;
    match query.form {
        AnswerForm::Raw => Ok(raw),
        AnswerForm::Compressed { known } => compress(Field::get(query.width), &raw, known),
    }
}

fn check_side(plan: &DownloadPlan, side: &SideInformation) -> Result<(), TpirError> {
    let p = &plan.params;
    if side.len() != p.m {
        return Err(TpirError::InvalidSideInformation(format!("expected {} cached messages, got {}", p.m, side.len())));
    }
    if side.contains(plan.theta) {
        return Err(TpirError::InvalidSideInformation(format!("desired message {} is cached", plan.theta)));
    }
    for (i, msg) in side.iter() {
        if i >= p.k {
            return Err(TpirError::InvalidSideInformation(format!("message index {i} out of range")));
        }
        if msg.len() != plan.profile.l as usize {
            return Err(TpirError::InvalidSideInformation(format!(
                "cached message {i} has {} symbols, expected {}",
                msg.len(),
                plan.profile.l
            )));
        }
    }
    Ok(())
}

/// Slots whose whole subset is cached, with their locally computed values.
pub fn known_positions(
    plan: &DownloadPlan,
    state: &PrecodingState,
    side: &SideInformation,
) -> Result<Vec<Vec<(usize, Symbol)>>, TpirError> {
    check_side(plan, side)?;
    let field = plan.field();
    let cached: BTreeSet<usize> = side.indices().into_iter().collect();
    let precoder = Precoder::new(plan, state, Some(&cached));
    Ok(plan
        .per_db
        .iter()
        .map(|slots| {
            slots
                .iter()
                .enumerate()
                .filter(|(_, s)| s.subset.iter().all(|i| cached.contains(i)))
                .map(|(index, s)| {
                    let value = s.sources.iter().fold(0, |acc, src| {
                        acc ^ field.dot(precoder.coefficients(src), side.message(src.message).expect("cached"))
                    });
                    (index, value)
                })
                .collect()
        })
        .collect())
}

/// Recovers `W_theta` exactly from the answers of all databases.
pub fn decode(
    answers: &AnswerBundle,
    plan: &DownloadPlan,
    state: &PrecodingState,
    side: &SideInformation,
) -> Result<Vec<Symbol>, TpirError> {
    check_side(plan, side)?;
    let field = plan.field();
    let p1 = plan.profile.p1 as usize;
    let n = plan.params.n;
    if answers.per_db.len() != n {
        return Err(TpirError::Protocol(format!("expected {n} answers, got {}", answers.per_db.len())));
    }
    if answers.form != plan.answer_form() {
        return Err(TpirError::Protocol("answer form differs from the plan".into()));
    }

    let known = if plan.params.m > 0 { known_positions(plan, state, side)? } else { vec![Vec::new(); n] };

    // Per-database slot values X_n.
    let mut values: Vec<Vec<Symbol>> = Vec::with_capacity(n);
    match answers.form {
        AnswerForm::Raw => {
            for (db, raw) in answers.per_db.iter().enumerate() {
                if raw.len() != p1 {
                    return Err(TpirError::Protocol(format!(
                        "database {db} sent {} symbols, expected {p1}",
                        raw.len()
                    )));
                }
                for &(slot, v) in &known[db] {
                    if raw[slot] != v {
                        return Err(CodingError::Corruption { row: slot }.into());
                    }
                }
                values.push(raw.clone());
            }
        }
        AnswerForm::Compressed { known: p2 } => {
            let parity = p1 - p2;
            let code = make_systematic_mds(field, 2 * p1 - p2, p1)?;
            for (db, y) in answers.per_db.iter().enumerate() {
                if y.len() > parity {
                    return Err(TpirError::Protocol(format!(
                        "database {db} sent {} symbols, expected {parity}",
                        y.len()
                    )));
                }
                let coords: Vec<(usize, Symbol)> = y
                    .iter()
                    .copied()
                    .enumerate()
                    .chain(known[db].iter().map(|&(slot, v)| (parity + slot, v)))
                    .collect();
                values.push(code.erasure_decode(field, &coords)?);
            }
        }
    }

    // Interference codewords of every undesired group, from coordinates 0..f.
    let mut interference: Vec<Vec<Symbol>> = Vec::with_capacity(plan.groups.len());
    for (g, group) in plan.groups.iter().enumerate() {
        let generator = state.generator(g);
        let info_set: Vec<(usize, Symbol)> =
            group.coordinates[..group.f].iter().enumerate().map(|(c, r)| (c, values[r.db][r.slot])).collect();
        let message = generator.erasure_decode(field, &info_set)?;
        interference.push(generator.encode(field, &message)?);
    }

    let l = plan.profile.l as usize;
    let mut desired = vec![0 as Symbol; l];
    for (db, slots) in plan.per_db.iter().enumerate() {
        for (index, slot) in slots.iter().enumerate() {
            let Some(offset) = slot.sources.iter().find_map(|s| match s.stream {
                Stream::Desired { offset } => Some(offset),
                Stream::Group { .. } => None,
            }) else {
                continue;
            };
            let mut v = values[db][index];
            if let Some((group, coordinate)) = slot.sources.iter().find_map(|s| match s.stream {
                Stream::Group { group, coordinate } => Some((group, coordinate)),
                Stream::Desired { .. } => None,
            }) {
                v ^= interference[group][coordinate];
            }
            desired[offset] = v;
        }
    }
    Ok(state.mixing(plan.theta).solve(field, &desired))
}

/// Full in-memory round trip, returning the decoded message and the answers.
pub fn run_local(
    params: &SchemeParams,
    theta: usize,
    side: &SideInformation,
    store: &MessageStore,
    seed: u64,
) -> Result<(Vec<Symbol>, AnswerBundle), TpirError> {
    let (plan, state) = build_plan(params, theta, seed)?;
    let per_db = queries(&plan, &state).iter().map(|q| answer(q, store)).collect::<Result<Vec<_>, _>>()?;
    let bundle = AnswerBundle { form: plan.answer_form(), per_db };
    let decoded = decode(&bundle, &plan, &state, side)?;
    Ok((decoded, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(k: usize, m: usize, n: usize, t: usize) -> SchemeParams {
        SchemeParams::new(k, m, n, t).unwrap()
    }

    fn layer_profile(plan: &DownloadPlan, db: usize) -> Vec<usize> {
        let mut counts = vec![0; plan.params.k];
        for s in plan.slots(db) {
            counts[s.layer - 1] += 1;
        }
        counts
    }

    fn desired_bearing(plan: &DownloadPlan, db: usize) -> usize {
        plan.slots(db).iter().filter(|s| s.subset.contains(&plan.theta)).count()
    }

    #[test]
    fn first_worked_example_layout() {
        let (plan, _) = build_plan(&params(3, 1, 2, 1), 0, 1).unwrap();
        for db in 0..2 {
            assert_eq!(layer_profile(&plan, db), vec![3, 3, 1]);
            assert_eq!(desired_bearing(&plan, db), 4);
        }
        assert_eq!(plan.download_per_db(), 6);
        assert_eq!(plan.width(), Width::W4);
    }

    #[test]
    fn second_worked_example_layout() {
        let (plan, _) = build_plan(&params(3, 2, 3, 2), 0, 1).unwrap();
        for db in 0..3 {
            assert_eq!(layer_profile(&plan, db), vec![12, 6, 1]);
            assert_eq!(desired_bearing(&plan, db), 9);
            let shape = plan.joint_shape(&[db]);
            assert_eq!(shape[&(1, vec![1])], 4);
            assert_eq!(shape[&(2, vec![1, 2])], 2);
        }
        let dims: Vec<(usize, usize)> = plan.groups().iter().map(|g| (g.e, g.f)).collect();
        assert_eq!(dims, vec![(18, 12), (18, 12), (9, 6)]);
        assert_eq!(plan.download_per_db(), 9);
        // b and c share generators within the same context
        let (_, state) = build_plan(&params(3, 2, 3, 2), 0, 1).unwrap();
        assert_eq!(state.generator(0), state.generator(1));
    }

    #[test]
    fn small_example_layout() {
        let (plan, _) = build_plan(&params(2, 0, 2, 1), 1, 1).unwrap();
        for db in 0..2 {
            assert_eq!(layer_profile(&plan, db), vec![2, 1]);
            assert_eq!(desired_bearing(&plan, db), 2);
        }
        assert_eq!(plan.answer_form(), AnswerForm::Raw);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(build_plan(&params(3, 0, 2, 2), 0, 0), Err(TpirError::NotConstructible(_))));
        assert!(matches!(build_plan(&params(3, 0, 2, 1), 3, 0), Err(TpirError::ThetaOutOfRange { .. })));
        let err = build_plan(&params(3, 2, 3, 2).with_width(Width::W4), 0, 0).unwrap_err();
        assert_eq!(err, TpirError::FieldTooSmall { required: 29, order: 16, minimal: Some(Width::W8) });
    }

    #[test]
    fn answer_slot_is_desired_plus_interference() {
        // DB1, fourth slot: "a + b" in the first worked example.
        let p = params(3, 1, 2, 1);
        let (plan, state) = build_plan(&p, 0, 5).unwrap();
        let slot = &plan.slots(0)[3];
        assert_eq!(slot.subset, vec![0, 1]);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let store = MessageStore::random(plan.width(), 3, 8, &mut rng);
        let raw = answer_raw(&queries(&plan, &state)[0], &store).unwrap();
        let field = plan.field();
        let a = state.mixing(0).matrix().mul_vec(field, store.message(0));
        let Stream::Desired { offset } = slot.sources[0].stream else { panic!() };
        let Stream::Group { group, coordinate } = slot.sources[1].stream else { panic!() };
        let g = state.generator(group);
        let rows = state.mixing(1).matrix().row_range(plan.groups()[group].rows[0], g.f());
        let b = g.encode(field, &rows.mul_vec(field, store.message(1))).unwrap();
        assert_eq!(raw[3], a[offset] ^ b[coordinate]);
    }

    #[test]
    fn zero_store_gives_zero_answers() {
        let (plan, state) = build_plan(&params(3, 1, 2, 1), 0, 5).unwrap();
        let store = MessageStore::zeros(plan.width(), 3, 8);
        for q in queries(&plan, &state) {
            assert!(answer_raw(&q, &store).unwrap().iter().all(|&v| v == 0));
            assert_eq!(answer(&q, &store).unwrap(), vec![0; 6]);
        }
    }

    #[test]
    fn malformed_queries_are_rejected() {
        let (plan, state) = build_plan(&params(2, 0, 2, 1), 0, 5).unwrap();
        let store = MessageStore::zeros(plan.width(), 2, 4);
        let mut q = queries(&plan, &state).remove(0);
        q.slots[0].push(Term { message: 0, symbol: 4, coeff: 1 });
        assert!(matches!(answer_raw(&q, &store), Err(TpirError::MalformedQuery(_))));
        let mut q = queries(&plan, &state).remove(0);
        q.slots[0].push(Term { message: 2, symbol: 0, coeff: 1 });
        assert!(matches!(answer_raw(&q, &store), Err(TpirError::MalformedQuery(_))));
        let q = queries(&plan, &state).remove(0);
        let other = MessageStore::zeros(Width::W8, 2, 4);
        assert!(answer_raw(&q, &other).is_err());
    }

    #[test]
    fn compression_sizes() {
        let f = Field::get(Width::W8);
        assert_eq!(compress(f, &[1; 7], 1).unwrap().len(), 6);
        assert_eq!(compress(f, &[1; 19], 10).unwrap().len(), 9);
        assert!(compress(f, &[1; 3], 3).is_err());
    }

    #[test]
    fn known_positions_examples() {
        let (plan, state) = build_plan(&params(3, 1, 2, 1), 0, 5).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let store = MessageStore::random(plan.width(), 3, 8, &mut rng);
        let known = known_positions(&plan, &state, &SideInformation::from_store(&store, &[2])).unwrap();
        let raw: Vec<_> = queries(&plan, &state).iter().map(|q| answer_raw(q, &store).unwrap()).collect();
        for db in 0..2 {
            assert_eq!(known[db].len(), 1);
            let (slot, v) = known[db][0];
            assert_eq!(plan.slots(db)[slot].subset, vec![2]);
            assert_eq!(raw[db][slot], v);
        }

        let (plan, state) = build_plan(&params(3, 2, 3, 2), 0, 5).unwrap();
        let store = MessageStore::random(plan.width(), 3, 27, &mut rng);
        let known = known_positions(&plan, &state, &SideInformation::from_store(&store, &[1, 2])).unwrap();
        for db in 0..3 {
            assert_eq!(known[db].len(), 10);
            let pairs = known[db].iter().filter(|(s, _)| plan.slots(db)[*s].subset == vec![1, 2]).count();
            assert_eq!(pairs, 2);
        }

        let (plan, state) = build_plan(&params(3, 0, 2, 1), 0, 5).unwrap();
        let known = known_positions(&plan, &state, &SideInformation::default()).unwrap();
        assert!(known.iter().all(Vec::is_empty));
    }

    #[test]
    fn cached_desired_message_is_rejected() {
        let (plan, state) = build_plan(&params(3, 1, 2, 1), 0, 5).unwrap();
        let store = MessageStore::zeros(plan.width(), 3, 8);
        let err = known_positions(&plan, &state, &SideInformation::from_store(&store, &[0])).unwrap_err();
        assert!(matches!(err, TpirError::InvalidSideInformation(_)));
    }

    #[test]
    fn worked_examples_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for (p, side, total) in [(params(3, 1, 2, 1), vec![2], 12), (params(3, 2, 3, 2), vec![1, 2], 27)] {
            let width = select_width(&p).unwrap();
            let l = count_profile(&p).unwrap().l as usize;
            let store = MessageStore::random(width, 3, l, &mut rng);
            let (decoded, bundle) = run_local(&p, 0, &SideInformation::from_store(&store, &side), &store, 3).unwrap();
            assert_eq!(decoded, store.message(0));
            assert_eq!(bundle.per_db.iter().map(Vec::len).sum::<usize>(), total);
        }
    }

    #[test]
    fn symbols_are_never_reused() {
        let (plan, _) = build_plan(&params(4, 1, 3, 2), 2, 0).unwrap();
        let mut seen = BTreeSet::new();
        for db in 0..3 {
            for s in plan.slots(db) {
                for src in &s.sources {
                    assert!(seen.insert(*src), "{src:?} reused");
                }
            }
        }
        let desired: BTreeSet<usize> = seen
            .iter()
            .filter_map(|s| match s.stream {
                Stream::Desired { offset } => Some(offset),
                Stream::Group { .. } => None,
            })
            .collect();
        assert_eq!(desired, (0..81).collect());
    }

    #[test]
    fn decode_with_wrong_side_sizes_fails() {
        let p = params(3, 1, 2, 1);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let store = MessageStore::random(Width::W4, 3, 8, &mut rng);
        let side = SideInformation::from_store(&store, &[1, 2]);
        assert!(run_local(&p, 0, &side, &store, 0).is_err());
        let short = SideInformation::new([(1, vec![0; 7])].into());
        assert!(run_local(&p, 0, &short, &store, 0).is_err());
    }
}
