use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use iout_core::broker::{encode_packet, try_decode, Connect, ConnectReturnCode, DecodeError, Packet, QoS, TopicFilter};
use iout_core::scenario::RunReport;
use iout_core::Observation;

fn iout() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_iout"));
    c.env_remove("IOUT_TOKEN_SECRET");
    c
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios").join(name)
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn run_prints_report_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("m.txt");
    let json = dir.path().join("r.json");
    let out = iout()
        .args(["run", "--config"])
        .arg(scenario("org7.json"))
        .arg("--metrics-out")
        .arg(&metrics)
        .arg("--report-json")
        .arg(&json)
        .args(["--speedup", "inf"])
        .output()
        .unwrap();
    let text = ok(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("org ")).count(), 1);
    assert!(text.contains("invariant ok"));
    let report: RunReport = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(report.org("org7").unwrap().observations_stored, 96);
    assert_eq!(std::fs::read_to_string(&metrics).unwrap(), report.metrics);
}

#[test]
fn seed_and_duration_override_the_file() {
    let out = iout()
        .args(["run", "--format", "json", "--seed", "99", "--duration", "43200", "--config"])
        .arg(scenario("org7.json"))
        .output()
        .unwrap();
    let r: RunReport = serde_json::from_str(&ok(&out)).unwrap();
    assert_eq!(r.seed, 99);
    assert_eq!(r.org("org7").unwrap().observations_stored, 48);
}

#[test]
fn slo_breach_exits_two_only_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_slice(&std::fs::read(scenario("org7.json")).unwrap()).unwrap();
    cfg["slos"] = serde_json::json!([{
        "name": "unreachable-volume",
        "metric": "observations_stored_total",
        "aggregation": "Value",
        "op": ">=",
        "threshold": 1e9,
        "window_s": 86400
    }]);
    let path = dir.path().join("slo.json");
    std::fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let plain = iout().args(["run", "--config"]).arg(&path).output().unwrap();
    assert!(ok(&plain).contains("slo_breach unreachable-volume"));
    let strict = iout().args(["run", "--fail-on-slo", "--config"]).arg(&path).output().unwrap();
    assert_eq!(strict.status.code(), Some(2));
}

#[test]
fn config_and_usage_errors_exit_one() {
    let missing = iout().args(["run", "--config", "/no/such/scenario.json"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, br#"{"seed": 1, "duration_s": -5}"#).unwrap();
    let invalid = iout().args(["run", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(invalid.status.code(), Some(1));
    let usage = iout().args(["run", "--speedup", "0", "--config", "x"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(1));
}

#[test]
fn issued_token_queries_the_journal_within_its_grants() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("store.jsonl");
    ok(&iout()
        .args(["run", "--config"])
        .arg(scenario("faults.json"))
        .arg("--journal")
        .arg(&journal)
        .output()
        .unwrap());
    let token = |who: &str| {
        ok(&iout()
            .args(["issue-token", "--principal", who, "--config"])
            .arg(scenario("faults.json"))
            .output()
            .unwrap())
        .trim()
        .to_owned()
    };
    let query = |tok: &str, extra: &[&str]| {
        iout()
            .args(["query", "--token", tok, "--config"])
            .arg(scenario("faults.json"))
            .arg("--journal")
            .arg(&journal)
            .args(extra)
            .output()
            .unwrap()
    };
    let rows: Vec<Observation> = ok(&query(&token("public"), &[]))
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|o| o.category == iout_core::DataCategory::OpenAccess));

    let refused = query(&token("public"), &["--category", "legally_restricted"]);
    assert_eq!(refused.status.code(), Some(1));

    let org8 = ok(&query(&token("ops"), &["--org", "org8", "--from", "2024-01-01T00:00:00Z", "--to", "2024-01-01T12:00:00Z"]));
    assert_eq!(org8.lines().count(), 24);

    let forged = query(&token("ops"), &["--secret", "someone-else"]);
    assert_eq!(forged.status.code(), Some(1));

    let unknown = iout()
        .args(["issue-token", "--principal", "nobody", "--config"])
        .arg(scenario("faults.json"))
        .output()
        .unwrap();
    assert_eq!(unknown.status.code(), Some(1));
}

struct Server {
    child: Child,
    http: SocketAddr,
    mqtt: SocketAddr,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

const SECRET: &str = "cli-test-secret";

fn start_server() -> Server {
    let mut child = iout()
        .args(["serve", "--http", "127.0.0.1:0", "--mqtt", "127.0.0.1:0", "--secret", SECRET, "--config"])
        .arg(scenario("faults.json"))
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let mut addr = |prefix: &str| -> SocketAddr {
        let line = lines.next().unwrap().unwrap();
        line.strip_prefix(prefix).unwrap_or_else(|| panic!("{line}")).parse().unwrap()
    };
    let mqtt = addr("mqtt listening on ");
    let http = addr("http listening on ");
    // keep draining so the server never blocks on a full pipe
    std::thread::spawn(move || for _ in lines {});
    Server { child, http, mqtt }
}

fn token(who: &str) -> String {
    let out = iout()
        .args(["issue-token", "--secret", SECRET, "--principal", who, "--config"])
        .arg(scenario("faults.json"))
        .output()
        .unwrap();
    ok(&out).trim().to_owned()
}

fn http(addr: SocketAddr, method: &str, path: &str, bearer: Option<&str>, body: &str) -> (u16, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    let auth = bearer.map(|b| format!("Authorization: Bearer {b}\r\n")).unwrap_or_default();
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: test\r\nConnection: close\r\n{auth}Content-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    let status = resp[9..12].parse().unwrap();
    let body = resp.split_once("\r\n\r\n").map(|(_, b)| b.to_owned()).unwrap_or_default();
    (status, body)
}

struct Mqtt {
    s: TcpStream,
    buf: Vec<u8>,
}

impl Mqtt {
    fn connect(addr: SocketAddr, id: &str, bearer: &str) -> (Mqtt, ConnectReturnCode) {
        let s = TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        let mut m = Mqtt { s, buf: Vec::new() };
        m.send(&Packet::Connect(Connect {
            client_id: id.into(),
            username: Some(id.into()),
            password: Some(bearer.as_bytes().to_vec()),
            keep_alive: 30,
            clean_session: true,
        }));
        match m.recv() {
            Some(Packet::ConnAck { code, .. }) => (m, code),
            other => panic!("expected CONNACK, got {other:?}"),
        }
    }

    fn send(&mut self, p: &Packet) {
        self.s.write_all(&encode_packet(p).unwrap()).unwrap();
    }

    /// Next packet, or `None` once the server closes the link.
    fn recv(&mut self) -> Option<Packet> {
        loop {
            match try_decode(&self.buf) {
                Ok((p, used)) => {
                    self.buf.drain(..used);
                    return Some(p);
                }
                Err(DecodeError::Incomplete) => {}
                Err(e) => panic!("{e}"),
            }
            let mut chunk = [0u8; 4096];
            match self.s.read(&mut chunk) {
                Ok(0) => return None,
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) => panic!("{e}"),
            }
        }
    }
}

fn record(t: &str, v: &str) -> String {
    format!(
        r#"{{"records":[{{"sid":"org7-p1-temp","pid":"p1","par":"temperature","unit":"Cel","t":"{t}","v":"{v}","lat":41.145,"lon":-8.69,"dep":3}}]}}"#
    )
}

fn now_rfc3339() -> String {
    iout_core::Timestamp::now_wall().to_rfc3339()
}

#[test]
fn serve_routes_pushed_readings_to_subscribers_and_the_data_space() {
    let srv = start_server();
    let (mut sub, code) = Mqtt::connect(srv.mqtt, "public", &token("public"));
    assert_eq!(code, ConnectReturnCode::Accepted);
    sub.send(&Packet::Subscribe {
        packet_id: 1,
        filters: vec![(TopicFilter::new("data/#").unwrap(), QoS::AtLeastOnce)],
    });
    assert!(matches!(sub.recv(), Some(Packet::SubAck { packet_id: 1, .. })));

    let producer = token("producer-org7");
    let (status, body) = http(srv.http, "POST", "/ingest/org7", Some(&producer), &record(&now_rfc3339(), "14.2"));
    assert_eq!(status, 200, "{body}");
    assert!(body.contains("\"accepted\":1"));

    let deadline = Instant::now() + Duration::from_secs(10);
    let delivered = loop {
        assert!(Instant::now() < deadline, "no delivery");
        if let Some(Packet::Publish(p)) = sub.recv() {
            if p.qos != QoS::AtMostOnce {
                sub.send(&Packet::PubAck(p.packet_id));
            }
            break p;
        }
    };
    assert_eq!(delivered.topic.level(0), Some("data"));
    let obs: Observation = serde_json::from_slice(&delivered.payload).unwrap();
    assert_eq!(obs.value, Some(14.2));

    let (status, rows) = http(srv.http, "GET", "/query?org=org7", Some(&token("ops")), "");
    assert_eq!(status, 200);
    let rows: Vec<Observation> = serde_json::from_str(&rows).unwrap();
    assert_eq!(rows.len(), 1);

    let (status, metrics) = http(srv.http, "GET", "/metrics", None, "");
    assert_eq!(status, 200);
    assert!(metrics.contains("observations_stored_total{org=\"org7\"} 1"));
}

#[test]
fn serve_refuses_bad_credentials() {
    let srv = start_server();
    let (mut m, code) = Mqtt::connect(srv.mqtt, "intruder", "not-a-token");
    assert_eq!(code, ConnectReturnCode::BadCredentials);
    assert!(m.recv().is_none());

    let producer = token("producer-org7");
    let (status, _) = http(srv.http, "POST", "/ingest/org8", Some(&producer), "{}");
    assert_eq!(status, 403);
    let (status, _) = http(srv.http, "POST", "/ingest/org7", None, &record(&now_rfc3339(), "1"));
    assert_eq!(status, 401);
    let (status, _) = http(srv.http, "GET", "/query?category=legally_restricted", Some(&token("public")), "");
    assert_eq!(status, 403);
    let (status, _) = http(srv.http, "GET", "/query?from=yesterday", Some(&token("ops")), "");
    assert_eq!(status, 400);
}
