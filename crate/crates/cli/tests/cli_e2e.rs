use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_pirpsi");

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start(store: &Path, role: &str, secret: Option<&str>) -> (Server, String) {
    let mut cmd = Command::new(BIN);
    cmd.args(["serve", "--port", "0", "--role", role, "--store"]).arg(store).stdout(Stdio::piped());
    if let Some(s) = secret {
        cmd.env("PIR_SHARED_SECRET", s);
    }
    let mut child = cmd.spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
    (Server(child), addr)
}

fn pirpsi(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().unwrap()
}

#[test]
fn capacity_examples() {
    let out = pirpsi(&["capacity", "--K", "4", "--M", "1", "--N", "1", "--T", "1"]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "1/3");
    let out = pirpsi(&["capacity", "--K", "3", "--M", "0", "--N", "3", "--T", "1", "--symmetric", "--rho", "1/4"]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0");
    assert_eq!(pirpsi(&["capacity", "--K", "3"]).status.code(), Some(2));
    assert_eq!(pirpsi(&["nonsense"]).status.code(), Some(2));
}

#[test]
fn two_server_retrieval_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let store = d.join("db.store");
    let msgs = d.join("msgs");
    let out = pirpsi(&[
        "gen-store",
        "--K",
        "3",
        "--M",
        "1",
        "--N",
        "2",
        "--T",
        "1",
        "--seed",
        "5",
        "--out",
        store.to_str().unwrap(),
        "--dump-messages",
        msgs.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let (_s1, a1) = start(&store, "tpir", None);
    let (_s2, a2) = start(&store, "tpir", None);
    let endpoints = format!("{a1},{a2}");
    let side = format!("3:{}", msgs.join("message-3.store").display());
    let got = d.join("got.store");
    let out = pirpsi(&[
        "retrieve",
        "--endpoints",
        &endpoints,
        "--K",
        "3",
        "--T",
        "1",
        "--theta",
        "1",
        "--side",
        &side,
        "--seed",
        "9",
        "--out",
        got.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("rate 2/3 capacity 2/3"), "{stdout}");
    assert_eq!(std::fs::read(&got).unwrap(), std::fs::read(msgs.join("message-1.store")).unwrap());

    // A corrupted cached message must abort the retrieval.
    let mut bad = std::fs::read(msgs.join("message-3.store")).unwrap();
    *bad.last_mut().unwrap() ^= 0x01;
    let bad_path = d.join("bad.store");
    std::fs::write(&bad_path, bad).unwrap();
    let side = format!("3:{}", bad_path.display());
    let out = pirpsi(&[
        "retrieve",
        "--endpoints",
        &endpoints,
        "--K",
        "3",
        "--T",
        "1",
        "--theta",
        "1",
        "--side",
        &side,
        "--out",
        got.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupted"));
}

#[test]
fn symmetric_retrieval_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let store = d.join("db.store");
    let msgs = d.join("msgs");
    let out = pirpsi(&[
        "gen-store",
        "--scheme",
        "stpir",
        "--K",
        "3",
        "--N",
        "4",
        "--T",
        "2",
        "--seed",
        "1",
        "--out",
        store.to_str().unwrap(),
        "--dump-messages",
        msgs.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let secret = "11".repeat(32);
    let servers: Vec<(Server, String)> = (0..4).map(|_| start(&store, "stpir", Some(&secret))).collect();
    let endpoints: Vec<&str> = servers.iter().map(|(_, a)| a.as_str()).collect();
    let got = d.join("got.store");
    let out = pirpsi(&[
        "retrieve",
        "--scheme",
        "stpir",
        "--endpoints",
        &endpoints.join(","),
        "--K",
        "3",
        "--T",
        "2",
        "--theta",
        "2",
        "--out",
        got.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("rate 1/2 capacity 1/2"));
    assert_eq!(std::fs::read(&got).unwrap(), std::fs::read(msgs.join("message-2.store")).unwrap());
}

#[test]
fn audits_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("report.json");
    let out = pirpsi(&[
        "audit",
        "correctness",
        "--K",
        "3",
        "--M",
        "1",
        "--N",
        "2",
        "--T",
        "1",
        "--sessions",
        "50",
        "--json",
        json.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(v["verdict"], "pass");
    assert_eq!(pirpsi(&["audit", "rate", "--sessions", "1"]).status.code(), Some(0));
    let out = pirpsi(&[
        "audit",
        "db-privacy",
        "--scheme",
        "stpir",
        "--K",
        "3",
        "--N",
        "3",
        "--T",
        "1",
        "--sessions",
        "20000",
        "--control",
        "sigma0",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let csv = dir.path().join("rates.csv");
    let out = pirpsi(&["bench", "--grid", "3:2:3:2,2:0:2:1:stpir", "--csv", csv.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("K,M,N,T,scheme,rate_num,rate_den,capacity_num,capacity_den,match\n"));
    assert!(text.contains("3,2,3,2,tpir-psi,1,1,1,1,true"));
}

#[test]
fn three_server_retrieval_reaches_rate_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let store = d.join("db.store");
    let msgs = d.join("msgs");
    let out = pirpsi(&[
        "gen-store",
        "--K",
        "3",
        "--M",
        "2",
        "--N",
        "3",
        "--T",
        "2",
        "--out",
        store.to_str().unwrap(),
        "--dump-messages",
        msgs.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let servers: Vec<(Server, String)> = (0..3).map(|_| start(&store, "tpir", None)).collect();
    let endpoints: Vec<&str> = servers.iter().map(|(_, a)| a.as_str()).collect();
    let side2 = format!("2:{}", msgs.join("message-2.store").display());
    let side3 = format!("3:{}", msgs.join("message-3.store").display());
    let got = d.join("got.store");
    let out = pirpsi(&[
        "retrieve",
        "--endpoints",
        &endpoints.join(","),
        "--K",
        "3",
        "--T",
        "2",
        "--theta",
        "1",
        "--side",
        &side2,
        "--side",
        &side3,
        "--out",
        got.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("downloaded 27 symbols"), "{stdout}");
    assert!(stdout.contains("rate 1 capacity 1"), "{stdout}");
    assert_eq!(std::fs::read(&got).unwrap(), std::fs::read(msgs.join("message-1.store")).unwrap());
}
