//! End-to-end acceptance checks, one line of output per criterion.
//!
//! Every expected value is recomputed here from first principles: rates from
//! the geometric-sum closed form, field arithmetic from carryless
//! multiplication, linear solves by plain Gauss-Jordan elimination.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use pirpsi_cli::net::{spawn_server, TcpConnection};
use pirpsi_core::audit::{
    audit_correctness, audit_db_privacy, audit_user_privacy, measure_rate, AuditError, AuditReport, DbPrivacySubject,
    PrivacySubject,
};
use pirpsi_core::capacity::SchemeParams;
use pirpsi_core::client::{retrieve, Connection, LocalConnection, Retrieval, Scheme};
use pirpsi_core::coding::{make_mds, make_systematic_mds, GeneratorMatrix};
use pirpsi_core::field::{Field, Width};
use pirpsi_core::server::{DatabaseServer, Role};
use pirpsi_core::store::MessageStore;
use pirpsi_core::stpir_psi::SharedSecret;
use pirpsi_core::tpir_psi::{answer, plan_structure, queries, sample_precoding, SideInformation};
use pirpsi_core::wire::decode_answer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

type Q = Ratio<i64>;

const PRIVACY_SESSIONS: u64 = 400_000;
const DB_PRIVACY_SESSIONS: u64 = 100_000;

fn params(k: usize, m: usize, n: usize, t: usize) -> SchemeParams {
    SchemeParams::new(k, m, n, t).expect("valid parameters")
}

/// `(1 + a + ... + a^(b-1))^-1`.
fn psi(a: Q, b: usize) -> Q {
    let mut sum = Q::from_integer(0);
    let mut term = Q::from_integer(1);
    for _ in 0..b {
        sum += term;
        term *= a;
    }
    sum.recip()
}

fn tpir_oracle(p: &SchemeParams) -> Q {
    psi(Q::new(p.t as i64, p.n as i64), p.k - p.m)
}

fn stpir_oracle(p: &SchemeParams) -> Q {
    if p.m + 1 == p.k {
        Q::from_integer(1)
    } else {
        Q::from_integer(1) - Q::new(p.t as i64, p.n as i64)
    }
}

fn q(s: &str) -> Q {
    s.parse().unwrap_or_else(|_| panic!("not a rational: {s}"))
}

fn tpir_grid() -> Vec<SchemeParams> {
    let mut out = Vec::new();
    for k in 1..=4 {
        for m in 0..k {
            for n in 1..=3 {
                for t in 1..n {
                    out.push(params(k, m, n, t));
                }
            }
        }
    }
    out.push(params(3, 2, 3, 2));
    out
}

fn stpir_grid() -> Vec<SchemeParams> {
    let mut out = Vec::new();
    for k in 2..=3 {
        for m in 0..k {
            for (n, t) in [(2, 1), (3, 1), (3, 2), (4, 2)] {
                out.push(params(k, m, n, t));
            }
        }
    }
    out
}

type Outcome = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn report_ok(r: &AuditReport) -> Outcome {
    ensure(r.passed(), || r.to_text())
}

fn tpir_server(store: &MessageStore) -> Arc<DatabaseServer> {
    Arc::new(DatabaseServer::new(store.clone(), Role::Tpir, None).expect("no secret needed"))
}

fn golden_run(p: &SchemeParams, side: &[usize], seed: u64) -> Result<(MessageStore, Retrieval), String> {
    let width = pirpsi_core::tpir_psi::select_width(p).map_err(|e| e.to_string())?;
    let l = p.n.pow(p.k as u32);
    let store = MessageStore::random(width, p.k, l, &mut ChaCha20Rng::seed_from_u64(seed));
    let server = tpir_server(&store);
    let mut conns: Vec<LocalConnection> = (0..p.n).map(|_| LocalConnection::new(&server)).collect();
    let r = retrieve(Scheme::Tpir, &mut conns, p, 0, &SideInformation::from_store(&store, side), seed)
        .map_err(|e| e.to_string())?;
    ensure(r.message == store.message(0), || "decoded message differs".into())?;
    Ok((store, r))
}

fn layer_profile(p: &SchemeParams) -> Result<(Vec<usize>, usize, usize), String> {
    let plan = plan_structure(p, 0).map_err(|e| e.to_string())?;
    let mut profile = vec![0; p.k];
    let mut desired = 0;
    for db in 0..p.n {
        let slots = plan.slots(db);
        let mut this = vec![0; p.k];
        let mut d = 0;
        for s in slots {
            ensure(s.subset.len() == s.layer, || format!("slot of layer {} sums {:?}", s.layer, s.subset))?;
            this[s.layer - 1] += 1;
            d += s.subset.contains(&0) as usize;
        }
        if db == 0 {
            profile = this;
            desired = d;
        } else {
            ensure(this == profile && d == desired, || format!("database {db} has a different profile"))?;
        }
    }
    Ok((profile, desired, plan.download_per_db()))
}

fn check_downloads(r: &Retrieval, per_db: usize) -> Outcome {
    for (db, t) in r.transcripts.iter().enumerate() {
        let frame = t.answer_frames().next().ok_or("no answer frame")?;
        let (_, symbols) = decode_answer(&frame.payload).map_err(|e| e.to_string())?;
        ensure(symbols.len() == per_db, || format!("database {db} shipped {} symbols", symbols.len()))?;
    }
    Ok(())
}

fn criterion_1() -> Outcome {
    let p = params(3, 1, 2, 1);
    let (profile, desired, per_db) = layer_profile(&p)?;
    ensure(profile == [3, 3, 1], || format!("layer profile {profile:?}"))?;
    ensure(desired == 4, || format!("{desired} desired-bearing slots"))?;
    ensure(per_db == 6, || format!("{per_db} symbols per database"))?;
    let plan = plan_structure(&p, 0).map_err(|e| e.to_string())?;
    let state = sample_precoding(&plan, 3);
    let store = MessageStore::random(plan.width(), 3, 8, &mut ChaCha20Rng::seed_from_u64(3));
    for query in queries(&plan, &state) {
        let shipped = answer(&query, &store).map_err(|e| e.to_string())?;
        ensure(shipped.len() == 6, || format!("answer of {} symbols", shipped.len()))?;
    }
    let (_, r) = golden_run(&p, &[2], 11)?;
    check_downloads(&r, 6)?;
    ensure(r.downloaded == 12 && r.message.len() == 8, || format!("L={} D={}", r.message.len(), r.downloaded))?;
    let rate = q(&r.rate.to_string());
    ensure(rate == Q::new(8, 12) && rate == psi(Q::new(1, 2), 2), || format!("rate {rate}"))?;
    ensure(q(&r.capacity.to_string()) == rate, || format!("capacity {}", r.capacity))
}

fn criterion_2() -> Outcome {
    let p = params(3, 2, 3, 2);
    let (profile, desired, per_db) = layer_profile(&p)?;
    ensure(profile.iter().sum::<usize>() == 19, || format!("layer profile {profile:?}"))?;
    ensure(profile == [12, 6, 1], || format!("layer profile {profile:?}"))?;
    ensure(desired == 9, || format!("{desired} desired-bearing slots"))?;
    ensure(per_db == 9, || format!("{per_db} symbols per database"))?;
    let plan = plan_structure(&p, 0).map_err(|e| e.to_string())?;
    let mut dims: Vec<(usize, usize)> = plan.groups().iter().map(|g| (g.e, g.f)).collect();
    dims.sort();
    dims.dedup();
    ensure(dims == [(9, 6), (18, 12)], || format!("group dimensions {dims:?}"))?;
    let (_, r) = golden_run(&p, &[1, 2], 12)?;
    check_downloads(&r, 9)?;
    ensure(r.downloaded == 27 && r.message.len() == 27, || format!("L={} D={}", r.message.len(), r.downloaded))?;
    let rate = q(&r.rate.to_string());
    ensure(rate == Q::new(27, 27) && rate == Q::from_integer(1), || format!("rate {rate}"))
}

fn criterion_3() -> Outcome {
    for p in tpir_grid() {
        report_ok(&audit_correctness(Scheme::Tpir, &p, 20, 1000 + p.k as u64))?;
        let r = measure_rate(Scheme::Tpir, &p, 20, 2000).map_err(|e| format!("{p:?}: {e}"))?;
        let expected = tpir_oracle(&p);
        ensure(q(&r.rate) == expected, || format!("{p:?}: rate {} expected {expected}", r.rate))?;
        ensure(q(&r.capacity) == expected, || format!("{p:?}: capacity {} expected {expected}", r.capacity))?;
    }
    Ok(())
}

fn criterion_4() -> Outcome {
    for p in tpir_grid() {
        let r = audit_user_privacy(PrivacySubject::Tpir, &p, 0, 5);
        ensure(r.passed() && r.tests.len() >= 3, || r.to_text())?;
    }
    for p in [params(3, 1, 2, 1), params(3, 2, 3, 2)] {
        let r = audit_user_privacy(PrivacySubject::Tpir, &p, PRIVACY_SESSIONS, 6);
        report_ok(&r)?;
        let tv = r.tests.last().and_then(|v| v.statistics.get("collusion_sets")).and_then(|v| v.as_u64());
        ensure(tv == Some(pirpsi_core::audit::collusion_sets(p.n, p.t).len() as u64), || r.to_text())?;
    }
    let control = audit_user_privacy(PrivacySubject::DirectDownload, &params(3, 1, 2, 1), 10_000, 7);
    ensure(!control.passed(), || format!("direct download passed:\n{}", control.to_text()))
}

fn criterion_5() -> Outcome {
    for p in stpir_grid() {
        report_ok(&audit_correctness(Scheme::Stpir, &p, 20, 3000))?;
        let r = measure_rate(Scheme::Stpir, &p, 10, 4000).map_err(|e| format!("{p:?}: {e}"))?;
        let expected = stpir_oracle(&p);
        ensure(q(&r.rate) == expected, || format!("{p:?}: rate {} expected {expected}", r.rate))?;
        let rho = if p.m + 1 == p.k { Q::from_integer(0) } else { Q::new(p.t as i64, (p.n - p.t) as i64) };
        ensure(q(&r.rho) == rho, || format!("{p:?}: rho {} expected {rho}", r.rho))?;
        ensure(r.matches, || format!("{p:?}: rate {} capacity {}", r.rate, r.capacity))?;
    }
    ensure(pirpsi_core::audit::stpir_exact_view_check().passed, || "exact view enumeration failed".into())?;
    let p = params(3, 0, 3, 1);
    report_ok(&audit_db_privacy(DbPrivacySubject::Stpir, &p, DB_PRIVACY_SESSIONS, 8))?;
    let control = audit_db_privacy(DbPrivacySubject::StpirZeroSigma, &p, DB_PRIVACY_SESSIONS, 8);
    ensure(!control.passed(), || format!("sigma=0 control passed:\n{}", control.to_text()))
}

fn criterion_6() -> Outcome {
    let points = tpir_grid()
        .into_iter()
        .map(|p| (Scheme::Tpir, p))
        .chain(stpir_grid().into_iter().map(|p| (Scheme::Stpir, p)))
        .chain(pirpsi_core::audit::desk_grid());
    for (scheme, p) in points {
        match measure_rate(scheme, &p, 3, 6000) {
            Ok(r) => {
                let bound = match scheme {
                    Scheme::Tpir => tpir_oracle(&p),
                    Scheme::Stpir => stpir_oracle(&p),
                };
                ensure(q(&r.rate) <= bound && q(&r.rate) <= q(&r.capacity), || {
                    format!("{p:?}: rate {} above capacity {}", r.rate, r.capacity)
                })?;
            }
            Err(e @ AuditError::ConverseViolation { .. }) => return Err(format!("{p:?}: {e}")),
            Err(e) => return Err(format!("{p:?}: {e}")),
        }
    }
    Ok(())
}

/// GF(2^w) by shift-and-add multiplication against a fixed modulus.
struct Gf {
    bits: u32,
    modulus: u32,
}

impl Gf {
    fn new(width: Width) -> Gf {
        match width {
            Width::W4 => Gf { bits: 4, modulus: 0x13 },
            Width::W8 => Gf { bits: 8, modulus: 0x11b },
            Width::W16 => Gf { bits: 16, modulus: 0x1100b },
        }
    }

    fn mul(&self, a: u16, b: u16) -> u16 {
        let (mut a, mut b, mut acc) = (a as u32, b as u32, 0u32);
        while b != 0 {
            if b & 1 == 1 {
                acc ^= a;
            }
            b >>= 1;
            a <<= 1;
            if a >> self.bits & 1 == 1 {
                a ^= self.modulus;
            }
        }
        acc as u16
    }

    fn inv(&self, a: u16) -> u16 {
        (1..1u32 << self.bits).map(|x| x as u16).find(|&x| self.mul(a, x) == 1).expect("nonzero")
    }

    /// Reduced row echelon form in place; returns the pivot columns.
    fn rref(&self, m: &mut [Vec<u16>], cols: usize) -> Vec<usize> {
        let mut pivots = Vec::new();
        let mut r = 0;
        for c in 0..cols {
            let Some(p) = (r..m.len()).find(|&i| m[i][c] != 0) else { continue };
            m.swap(r, p);
            let inv = self.inv(m[r][c]);
            for x in m[r].iter_mut() {
                *x = self.mul(*x, inv);
            }
            for i in 0..m.len() {
                if i != r && m[i][c] != 0 {
                    let factor = m[i][c];
                    let pivot_row = m[r].clone();
                    for (x, y) in m[i].iter_mut().zip(pivot_row) {
                        *x ^= self.mul(factor, y);
                    }
                }
            }
            pivots.push(c);
            r += 1;
        }
        pivots
    }

    /// Solution of `rows * x = rhs` if it exists and is unique.
    fn solve(&self, rows: &[Vec<u16>], rhs: &[u16]) -> Option<Vec<u16>> {
        let cols = rows[0].len();
        let mut aug: Vec<Vec<u16>> =
            rows.iter().zip(rhs).map(|(r, &b)| r.iter().copied().chain([b]).collect()).collect();
        let pivots = self.rref(&mut aug, cols + 1);
        if pivots.len() != cols || pivots.contains(&cols) {
            return None;
        }
        Some((0..cols).map(|i| aug[i][cols]).collect())
    }

    fn rank(&self, rows: &[Vec<u16>]) -> usize {
        let cols = rows[0].len();
        self.rref(&mut rows.to_vec(), cols).len()
    }

    fn encode(&self, g: &GeneratorMatrix, x: &[u16]) -> Vec<u16> {
        (0..g.e()).map(|r| g.row(r).iter().zip(x).fold(0, |acc, (&a, &b)| acc ^ self.mul(a, b))).collect()
    }
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
        .collect()
}

fn criterion_7() -> Outcome {
    // The arithmetic itself: exhaustive at w = 4, sampled at w = 8.
    let f4 = Field::get(Width::W4);
    let g4 = Gf::new(Width::W4);
    for a in 0..16 {
        for b in 0..16 {
            ensure(f4.mul_raw(a, b) == g4.mul(a, b), || format!("{a}*{b} in GF(16)"))?;
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let mut instances = 0;
    while instances < 10_000 {
        let width = if rng.random_bool(0.5) { Width::W4 } else { Width::W8 };
        let field = Field::get(width);
        let gf = Gf::new(width);
        let e = rng.random_range(1..=12usize);
        let f = rng.random_range(1..=e);
        let g = if rng.random_bool(0.5) { make_mds(field, e, f) } else { make_systematic_mds(field, e, f) }
            .map_err(|err| format!("({e},{f}) over {width}: {err}"))?;
        let x: Vec<u16> = (0..f).map(|_| rng.random_range(0..1u32 << width.bits()) as u16).collect();
        let codeword = gf.encode(&g, &x);
        let mut positions: Vec<usize> = (0..e).collect();
        for i in (1..e).rev() {
            positions.swap(i, rng.random_range(0..=i));
        }
        let have = rng.random_range(0..=e);
        positions.truncate(have);
        let mut known: Vec<(usize, u16)> = positions.iter().map(|&i| (i, codeword[i])).collect();
        let corrupt = have > f && rng.random_bool(0.2);
        if corrupt {
            let v = rng.random_range(1..1u32 << width.bits()) as u16;
            known[0].1 ^= v;
        }
        let rows: Vec<Vec<u16>> = known.iter().map(|&(i, _)| g.row(i).to_vec()).collect();
        let rhs: Vec<u16> = known.iter().map(|&(_, v)| v).collect();
        let oracle = if rows.is_empty() { None } else { gf.solve(&rows, &rhs) };
        let got = g.erasure_decode(field, &known).ok();
        ensure(got == oracle, || format!("({e},{f}) over {width}, known {known:?}: got {got:?}, oracle {oracle:?}"))?;
        if !corrupt && have >= f {
            ensure(got.as_deref() == Some(&x[..]), || format!("({e},{f}) failed to recover the input"))?;
        }
        instances += 1;
    }
    // Every f-row minor of every generator with e <= 10 is invertible.
    for width in [Width::W4, Width::W8] {
        let field = Field::get(width);
        let gf = Gf::new(width);
        for e in 1..=10 {
            for f in 1..=e {
                for g in [make_mds(field, e, f), make_systematic_mds(field, e, f)] {
                    let g = g.map_err(|err| format!("({e},{f}) over {width}: {err}"))?;
                    ensure(g.e() == e && g.f() == f, || format!("({e},{f}) has shape {}x{}", g.e(), g.f()))?;
                    for rows in subsets(e, f) {
                        let minor: Vec<Vec<u16>> = rows.iter().map(|&r| g.row(r).to_vec()).collect();
                        ensure(gf.rank(&minor) == f, || format!("({e},{f}) over {width}: rows {rows:?} singular"))?;
                    }
                    if g.is_systematic() {
                        for j in 0..f {
                            let unit: Vec<u16> = (0..f).map(|c| (c == j) as u16).collect();
                            ensure(g.row(e - f + j) == unit, || format!("({e},{f}) systematic row {j}"))?;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

fn transcripts<C: Connection>(
    conns: &mut [C],
    scheme: Scheme,
    p: &SchemeParams,
    side: &SideInformation,
    seed: u64,
) -> Result<Vec<Vec<u8>>, String> {
    let r = retrieve(scheme, conns, p, 0, side, seed).map_err(|e| e.to_string())?;
    Ok(r.transcripts.iter().map(|t| t.to_bytes()).collect())
}

fn criterion_8() -> Outcome {
    let cases = [
        (Scheme::Tpir, params(3, 1, 2, 1), vec![2]),
        (Scheme::Tpir, params(3, 2, 3, 2), vec![1, 2]),
        (Scheme::Stpir, params(3, 0, 4, 2), vec![]),
    ];
    for (scheme, p, side) in cases {
        let (width, l) = match scheme {
            Scheme::Tpir => (pirpsi_core::tpir_psi::select_width(&p).map_err(|e| e.to_string())?, p.n.pow(p.k as u32)),
            Scheme::Stpir => (Width::W4, p.n - p.t),
        };
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let store = MessageStore::random(width, p.k, l, &mut rng);
        let (role, secret) = match scheme {
            Scheme::Tpir => (Role::Tpir, None),
            Scheme::Stpir => (Role::Stpir, Some(SharedSecret::random(&mut rng))),
        };
        let side = SideInformation::from_store(&store, &side);
        let servers: Vec<Arc<DatabaseServer>> = (0..p.n)
            .map(|_| Arc::new(DatabaseServer::new(store.clone(), role, secret.clone()).expect("secret given")))
            .collect();
        let mut local: Vec<LocalConnection> = servers.iter().map(LocalConnection::new).collect();
        let mut tcp = Vec::new();
        for server in &servers {
            let (addr, _) = spawn_server("127.0.0.1:0", Arc::clone(server)).map_err(|e| e.to_string())?;
            tcp.push(TcpConnection::connect(addr).map_err(|e| e.to_string())?);
        }
        for seed in [1, 2, 99] {
            let a = transcripts(&mut local, scheme, &p, &side, seed)?;
            let b = transcripts(&mut tcp, scheme, &p, &side, seed)?;
            ensure(a == b, || format!("{p:?} seed {seed}: transcripts differ"))?;
            ensure(a.iter().all(|t| !t.is_empty()), || "empty transcript".into())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 8] = [
        ("golden example (3,1,2,1)", Duration::from_secs(1), criterion_1),
        ("golden example (3,2,3,2)", Duration::from_secs(1), criterion_2),
        ("capacity grid", Duration::from_secs(300), criterion_3),
        ("user privacy", Duration::from_secs(600), criterion_4),
        ("symmetric scheme", Duration::from_secs(600), criterion_5),
        ("rate never above capacity", Duration::from_secs(600), criterion_6),
        ("coding oracle equivalence", Duration::from_secs(600), criterion_7),
        ("tcp and in-process transcripts", Duration::from_secs(600), criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|()| ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}")));
        match outcome {
            Ok(()) => println!("PASS criterion {}: {name} ({elapsed:.2?})", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name} ({elapsed:.2?}): {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
