//! Command-line front end. Message indices are 1-based here and 0-based in the library.

use std::ffi::OsString;
use std::fs;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use num_rational::BigRational;
use pirpsi_core::audit::{
    audit_correctness, audit_db_privacy, audit_rate, audit_user_privacy, desk_grid, measure_rate, message_len,
    scheme_width, AuditReport, DbPrivacySubject, PrivacySubject,
};
use pirpsi_core::capacity::{capacity_stpir_psi, capacity_tpir_psi, required_randomness, SchemeParams};
use pirpsi_core::client::{retrieve, Scheme};
use pirpsi_core::field::Width;
use pirpsi_core::server::{DatabaseServer, Role};
use pirpsi_core::store::MessageStore;
use pirpsi_core::stpir_psi::{SharedSecret, SECRET_ENV};
use pirpsi_core::tpir_psi::SideInformation;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::net::{serve, TcpConnection};

#[derive(Debug, Parser)]
#[command(name = "pirpsi", version, about = "Private information retrieval with private side information")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the capacity for (K, M, N, T).
    Capacity {
        #[command(flatten)]
        params: ParamArgs,
        /// Symmetric variant (database privacy).
        #[arg(long)]
        symmetric: bool,
        /// Common randomness per desired symbol, e.g. 1/2. Defaults to T/(N-T).
        #[arg(long, requires = "symmetric")]
        rho: Option<BigRational>,
    },
    /// Write a random message store.
    GenStore {
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long, value_enum, default_value_t = SchemeArg::Tpir)]
        scheme: SchemeArg,
        /// Field width in bits (4, 8 or 16); chosen automatically if omitted.
        #[arg(long)]
        width: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write each message as a single-message store `message-<i>.store` here.
        #[arg(long)]
        dump_messages: Option<PathBuf>,
    },
    /// Run a database server.
    Serve {
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_enum, default_value_t = SchemeArg::Tpir)]
        role: SchemeArg,
        /// File holding the 64-hex-digit shared secret; falls back to the environment.
        #[arg(long)]
        secret_file: Option<PathBuf>,
    },
    /// Retrieve one message from N servers.
    Retrieve {
        /// Server addresses in database order.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        endpoints: Vec<SocketAddr>,
        #[arg(long = "K")]
        k: usize,
        /// Number of cached messages; defaults to the number of --side files.
        #[arg(long = "M")]
        m: Option<usize>,
        #[arg(long = "T")]
        t: usize,
        #[arg(long, value_enum, default_value_t = SchemeArg::Tpir)]
        scheme: SchemeArg,
        /// Desired message, 1-based.
        #[arg(long)]
        theta: usize,
        /// Cached message as INDEX:PATH (1-based index, single-message store file).
        #[arg(long, value_parser = parse_side)]
        side: Vec<(usize, PathBuf)>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one of the audits.
    Audit {
        #[command(subcommand)]
        kind: AuditKind,
    },
    /// Rate-versus-capacity table as CSV.
    Bench {
        /// `desk`, or comma-separated K:M:N:T[:tpir|stpir] points.
        #[arg(long, default_value = "desk")]
        grid: String,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        sessions: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args, Clone, Copy)]
pub struct ParamArgs {
    #[arg(long = "K")]
    pub k: usize,
    #[arg(long = "M", default_value_t = 0)]
    pub m: usize,
    #[arg(long = "N")]
    pub n: usize,
    #[arg(long = "T")]
    pub t: usize,
}

impl ParamArgs {
    fn params(&self) -> Result<SchemeParams> {
        Ok(SchemeParams::new(self.k, self.m, self.n, self.t)?)
    }
}

#[derive(Debug, Args, Clone)]
pub struct AuditArgs {
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long = "M", default_value_t = 0)]
    pub m: usize,
    #[arg(long = "N")]
    pub n: Option<usize>,
    #[arg(long = "T")]
    pub t: Option<usize>,
    #[arg(long, value_enum, default_value_t = SchemeArg::Tpir)]
    pub scheme: SchemeArg,
    #[arg(long)]
    pub sessions: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

impl AuditArgs {
    fn params(&self) -> Result<Option<SchemeParams>> {
        match (self.k, self.n, self.t) {
            (Some(k), Some(n), Some(t)) => Ok(Some(SchemeParams::new(k, self.m, n, t)?)),
            (None, None, None) => Ok(None),
            _ => bail!("--K, --N and --T must be given together"),
        }
    }

    fn required(&self) -> Result<SchemeParams> {
        self.params()?.ok_or_else(|| anyhow!("--K, --N and --T are required"))
    }
}

#[derive(Debug, Subcommand)]
pub enum AuditKind {
    /// Exact recovery over random sessions.
    Correctness(AuditArgs),
    /// Structural and statistical privacy of the queries.
    UserPrivacy {
        #[command(flatten)]
        args: AuditArgs,
        /// Audit the direct-download negative control instead.
        #[arg(long)]
        direct_download: bool,
    },
    /// Database privacy of the symmetric scheme.
    DbPrivacy {
        #[command(flatten)]
        args: AuditArgs,
        #[arg(long, value_enum)]
        control: Option<DbControl>,
    },
    /// Measured rate against capacity; the whole desk grid without parameters.
    Rate(AuditArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Tpir,
    Stpir,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Tpir => Scheme::Tpir,
            SchemeArg::Stpir => Scheme::Stpir,
        }
    }
}

impl From<SchemeArg> for Role {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Tpir => Role::Tpir,
            SchemeArg::Stpir => Role::Stpir,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DbControl {
    /// Masking polynomial forced to zero.
    Sigma0,
    /// The non-symmetric scheme.
    Tpir,
}

fn parse_side(s: &str) -> Result<(usize, PathBuf), String> {
    let (i, p) = s.split_once(':').ok_or_else(|| format!("expected INDEX:PATH, got {s:?}"))?;
    let i: usize = i.parse().map_err(|_| format!("bad message index {i:?}"))?;
    if i == 0 {
        return Err("message indices start at 1".into());
    }
    Ok((i, PathBuf::from(p)))
}

fn one_based(i: usize, k: usize, what: &str) -> Result<usize> {
    ensure!((1..=k).contains(&i), "{what} {i} out of range 1..={k}");
    Ok(i - 1)
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

// Ok(false) means the command ran but its check failed.
fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Capacity { params, symmetric, rho } => {
            let p = params.params()?;
            let c = if symmetric {
                let rho = match rho {
                    Some(r) => r,
                    None if p.t < p.n => required_randomness(&p),
                    None => BigRational::from_integer(0.into()),
                };
                capacity_stpir_psi(&p, &rho)?
            } else {
                capacity_tpir_psi(&p)?
            };
            println!("{c}");
            Ok(true)
        }
        Command::GenStore { params, scheme, width, seed, out, dump_messages } => {
            let mut p = params.params()?;
            if let Some(bits) = width {
                p = p.with_width(Width::from_bits(bits)?);
            }
            let scheme = Scheme::from(scheme);
            let width = scheme_width(scheme, &p)?;
            let l = message_len(scheme, &p)?;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let store = MessageStore::random(width, p.k, l, &mut rng);
            store.save(&out).with_context(|| format!("writing {}", out.display()))?;
            if let Some(dir) = dump_messages {
                fs::create_dir_all(&dir)?;
                for i in 0..p.k {
                    let single = MessageStore::new(width, vec![store.message(i).to_vec()])?;
                    single.save(dir.join(format!("message-{}.store", i + 1)))?;
                }
            }
            println!("wrote {} messages of {l} symbols over {width} to {}", p.k, out.display());
            Ok(true)
        }
        Command::Serve { port, bind, store, role, secret_file } => {
            let store = MessageStore::load(&store).with_context(|| format!("loading {}", store.display()))?;
            let secret = match (role, secret_file) {
                (SchemeArg::Tpir, _) => None,
                (SchemeArg::Stpir, Some(path)) => Some(SharedSecret::load(path)?),
                (SchemeArg::Stpir, None) => {
                    Some(SharedSecret::from_env().map_err(|e| anyhow!("{e}; pass --secret-file or set {SECRET_ENV}"))?)
                }
            };
            let server = Arc::new(DatabaseServer::new(store, role.into(), secret).map_err(|e| anyhow!(e))?);
            let listener = TcpListener::bind((bind.as_str(), port))?;
            println!("listening on {}", listener.local_addr()?);
            serve(listener, server)?;
            Ok(true)
        }
        Command::Retrieve { endpoints, k, m, t, scheme, theta, side, seed, out } => {
            let theta = one_based(theta, k, "desired message")?;
            let mut cached = std::collections::BTreeMap::new();
            for (i, path) in &side {
                let i = one_based(*i, k, "side message")?;
                let s = MessageStore::load(path).with_context(|| format!("loading {}", path.display()))?;
                ensure!(s.message_count() == 1, "{} holds {} messages, expected 1", path.display(), s.message_count());
                cached.insert(i, s.message(0).to_vec());
            }
            let m = m.unwrap_or(cached.len());
            ensure!(m == cached.len(), "--M {m} but {} side files given", cached.len());
            let params = SchemeParams::new(k, m, endpoints.len(), t)?;
            let mut conns = endpoints
                .iter()
                .map(|a| TcpConnection::connect(a).with_context(|| format!("connecting to {a}")))
                .collect::<Result<Vec<_>>>()?;
            let r = retrieve(scheme.into(), &mut conns, &params, theta, &SideInformation::new(cached), seed)?;
            MessageStore::new(r.width, vec![r.message.clone()])?.save(&out)?;
            println!("downloaded {} symbols ({} bits)", r.downloaded, r.downloaded_bits());
            println!("rate {} capacity {}", r.rate, r.capacity);
            ensure!(r.rate <= r.capacity, "measured rate exceeds capacity");
            Ok(true)
        }
        Command::Audit { kind } => run_audit(kind),
        Command::Bench { grid, csv, sessions, seed } => {
            let points = parse_grid(&grid)?;
            let mut writer = csv::Writer::from_writer(Vec::new());
            writer.write_record([
                "K",
                "M",
                "N",
                "T",
                "scheme",
                "rate_num",
                "rate_den",
                "capacity_num",
                "capacity_den",
                "match",
            ])?;
            let mut all = true;
            for (scheme, p) in points {
                let r = measure_rate(scheme, &p, sessions, seed)?;
                all &= r.matches;
                writer.write_record([
                    p.k.to_string(),
                    p.m.to_string(),
                    p.n.to_string(),
                    p.t.to_string(),
                    r.scheme.clone(),
                    r.rate_value.numer().to_string(),
                    r.rate_value.denom().to_string(),
                    r.capacity_value.numer().to_string(),
                    r.capacity_value.denom().to_string(),
                    r.matches.to_string(),
                ])?;
            }
            let bytes = writer.into_inner().map_err(|e| anyhow!("{e}"))?;
            match csv {
                Some(path) => fs::write(&path, &bytes)?,
                None => print!("{}", String::from_utf8_lossy(&bytes)),
            }
            Ok(all)
        }
    }
}

fn parse_grid(grid: &str) -> Result<Vec<(Scheme, SchemeParams)>> {
    if grid == "desk" {
        return Ok(desk_grid());
    }
    grid.split(',')
        .map(|point| {
            let parts: Vec<&str> = point.trim().split(':').collect();
            ensure!(parts.len() == 4 || parts.len() == 5, "grid point {point:?} is not K:M:N:T[:scheme]");
            let n: Vec<usize> = parts[..4].iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
            let scheme = match parts.get(4).copied() {
                None | Some("tpir") => Scheme::Tpir,
                Some("stpir") => Scheme::Stpir,
                Some(other) => bail!("unknown scheme {other:?}"),
            };
            Ok((scheme, SchemeParams::new(n[0], n[1], n[2], n[3])?))
        })
        .collect()
}

fn emit(reports: &[AuditReport], json: Option<&Path>) -> Result<bool> {
    for r in reports {
        print!("{}", r.to_text());
    }
    if let Some(path) = json {
        let value = match reports {
            [single] => single.to_json(),
            many => serde_json::Value::Array(many.iter().map(AuditReport::to_json).collect()),
        };
        fs::write(path, serde_json::to_string_pretty(&value)?)?;
    }
    Ok(reports.iter().all(AuditReport::passed))
}

fn run_audit(kind: AuditKind) -> Result<bool> {
    match kind {
        AuditKind::Correctness(a) => {
            let p = a.required()?;
            let r = audit_correctness(a.scheme.into(), &p, a.sessions.unwrap_or(200), a.seed);
            emit(&[r], a.json.as_deref())
        }
        AuditKind::UserPrivacy { args: a, direct_download } => {
            let p = a.required()?;
            let subject = match (direct_download, a.scheme) {
                (true, _) => PrivacySubject::DirectDownload,
                (false, SchemeArg::Tpir) => PrivacySubject::Tpir,
                (false, SchemeArg::Stpir) => PrivacySubject::Stpir,
            };
            let r = audit_user_privacy(subject, &p, a.sessions.unwrap_or(100_000), a.seed);
            emit(&[r], a.json.as_deref())
        }
        AuditKind::DbPrivacy { args: a, control } => {
            let p = a.required()?;
            let subject = match control {
                None => DbPrivacySubject::Stpir,
                Some(DbControl::Sigma0) => DbPrivacySubject::StpirZeroSigma,
                Some(DbControl::Tpir) => DbPrivacySubject::Tpir,
            };
            let r = audit_db_privacy(subject, &p, a.sessions.unwrap_or(100_000), a.seed);
            emit(&[r], a.json.as_deref())
        }
        AuditKind::Rate(a) => {
            let sessions = a.sessions.unwrap_or(2);
            let reports: Vec<AuditReport> = match a.params()? {
                Some(p) => vec![audit_rate(a.scheme.into(), &p, sessions, a.seed)],
                None => desk_grid().iter().map(|(s, p)| audit_rate(*s, p, sessions, a.seed)).collect(),
            };
            emit(&reports, a.json.as_deref())
        }
    }
}
