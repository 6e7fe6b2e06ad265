use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_flowmon");

struct Server {
    child: Child,
    broker: String,
    http: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn flowmon(args: &[&str]) -> Command {
    let mut c = Command::new(BIN);
    c.args(args).env("RUST_LOG", "warn");
    c
}

/// Starts a long-running subcommand and waits for its readiness line.
fn start(args: &[&str], within: Duration) -> Server {
    let mut child = flowmon(args).stdout(Stdio::piped()).stderr(Stdio::null()).spawn().unwrap();
    let stdout = child.stdout.take().unwrap();
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut line = String::new();
        let _ = BufReader::new(stdout).read_line(&mut line);
        let _ = tx.send(line);
    });
    let line = rx.recv_timeout(within).expect("readiness line in time");
    assert!(line.starts_with("flowmon ready"), "{line:?}");
    let field = |k: &str| {
        line.split_whitespace()
            .find_map(|t| t.strip_prefix(&format!("{k}=")))
            .unwrap()
            .to_owned()
    };
    Server {
        broker: field("broker"),
        http: field("http"),
        child,
    }
}

fn state_args(dir: &Path) -> Vec<String> {
    vec![
        "--whitelist".into(),
        dir.join("whitelist.txt").display().to_string(),
        "--journal".into(),
        dir.join("journal.log").display().to_string(),
        "--password-iterations".into(),
        "1000".into(),
        "--business".into(),
        "boss@example.com".into(),
    ]
}

fn broker(dir: &Path, listen: &str) -> Vec<String> {
    let mut a = vec!["broker".into(), "--listen".into(), listen.into(), "--http".into(), "127.0.0.1:0".into()];
    a.extend(state_args(dir));
    a
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn broker_ready_within_two_seconds() {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let _s = start(&strs(&broker(dir.path(), "127.0.0.1:0")), Duration::from_secs(2));
    assert!(t.elapsed() < Duration::from_secs(2));
}

#[test]
fn second_broker_on_same_port_fails() {
    let dir = tempfile::tempdir().unwrap();
    let first = start(&strs(&broker(dir.path(), "127.0.0.1:0")), Duration::from_secs(5));
    let other = tempfile::tempdir().unwrap();
    let out = flowmon(&strs(&broker(other.path(), &first.broker))).output().unwrap();
    assert!(!out.status.success());
    assert!(text(&out).contains("cannot listen"), "{}", text(&out));
}

#[test]
fn bad_config_exits_non_zero() {
    let dir = tempfile::tempdir().unwrap();
    let wl = dir.path().join("whitelist.txt");
    std::fs::write(&wl, "d1 not-a-key\n").unwrap();
    let out = flowmon(&strs(&broker(dir.path(), "127.0.0.1:0"))).output().unwrap();
    assert!(!out.status.success());
    assert!(text(&out).contains("whitelist"), "{}", text(&out));
}

#[test]
fn device_with_unknown_key_reports_authorization_error() {
    let dir = tempfile::tempdir().unwrap();
    let s = start(&strs(&broker(dir.path(), "127.0.0.1:0")), Duration::from_secs(5));
    let cfg = dir.path().join("device.toml");
    std::fs::write(
        &cfg,
        format!("device_id = \"ghost\"\ndevice_key = \"{}\"\nbroker = \"{}\"\n", "ab".repeat(16), s.broker),
    )
    .unwrap();
    let out = flowmon(&["device", "run", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", text(&out));
    assert!(text(&out).contains("authorization failed"), "{}", text(&out));
}

fn http(method: &str, url: &str, token: Option<&str>, body: Option<Value>) -> (u16, Value) {
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let mut resp = match (method, body) {
        ("GET", _) => {
            let mut r = agent.get(url);
            if let Some(t) = token {
                r = r.header("Authorization", &format!("Bearer {t}"));
            }
            r.call().unwrap()
        }
        (_, b) => {
            let mut r = agent.post(url);
            if let Some(t) = token {
                r = r.header("Authorization", &format!("Bearer {t}"));
            }
            r.header("Content-Type", "application/json")
                .send(b.unwrap_or(Value::Null).to_string())
                .unwrap()
        }
    };
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().unwrap();
    (status, serde_json::from_str(&text).unwrap_or(Value::Null))
}

#[test]
fn full_procedure_ends_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let s = start(&strs(&broker(dir.path(), "127.0.0.1:0")), Duration::from_secs(5));
    let base = format!("http://{}", s.http);

    let wl = dir.path().join("whitelist.txt");
    let dev = dir.path().join("door.toml");
    let out = flowmon(&[
        "device", "enroll", "--whitelist", wl.to_str().unwrap(), "--id", "door-1", "--broker", &s.broker,
        "--sensor", "door-1-main", "--out", dev.to_str().unwrap(),
    ])
    .output()
    .unwrap();
    assert!(out.status.success(), "{}", text(&out));

    let creds = json!({"email": "boss@example.com", "password": "long enough"});
    assert_eq!(http("POST", &format!("{base}/auth/register"), None, Some(creds.clone())).0, 201);
    let (_, login) = http("POST", &format!("{base}/auth/login"), None, Some(creds));
    let token = login["token"].as_str().unwrap().to_owned();
    let (st, act) = http(
        "POST",
        &format!("{base}/activities"),
        Some(&token),
        Some(json!({"name": "Museum", "address": "1 Test Street, Testville", "capacity": 50})),
    );
    assert_eq!(st, 201, "{act}");
    let id = act["activity_id"].as_str().unwrap().to_owned();
    let (_, otp) = http("POST", &format!("{base}/activities/{id}/otp"), Some(&token), None);
    // The broker picks the enrolled device up from the whitelist file.
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        let (st, body) = http(
            "POST",
            &format!("{base}/devices/associate"),
            None,
            Some(json!({"device_id": "door-1", "otp": otp["otp"]})),
        );
        if st == 200 {
            break;
        }
        assert!(Instant::now() < deadline, "{st} {body}");
        std::thread::sleep(Duration::from_millis(100));
    }

    let scen = dir.path().join("day.toml");
    let out = flowmon(&["scenario", "gen", "--passes", "6", "--seed", "5", "--noise", "0", "--day-length", "90", "--out", scen.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out));
    let out = flowmon(&["device", "run", "--config", dev.to_str().unwrap(), "--scenario", scen.to_str().unwrap(), "--exit-when-done"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 6, "{}", text(&out));

    let q = flowmon(&["query", &id, "--registry", &base]).output().unwrap();
    assert!(q.status.success(), "{}", text(&q));
    assert!(String::from_utf8_lossy(&q.stdout).starts_with("occupancy 0\n"), "{}", text(&q));
    let (_, hist) = http("GET", &format!("{base}/activities/{id}/history"), Some(&token), None);
    assert_eq!(hist.as_array().unwrap().len(), 6);

    let missing = flowmon(&["query", "act-999", "--registry", &base]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));

    // Hidden activity without a token reads as not found.
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let st = agent
        .patch(&format!("{base}/activities/{id}"))
        .header("Authorization", &format!("Bearer {token}"))
        .send(json!({"visibility": {"public": false}}).to_string())
        .unwrap()
        .status();
    assert_eq!(st.as_u16(), 200);
    let hidden = flowmon(&["query", &id, "--registry", &base]).output().unwrap();
    assert_eq!(hidden.status.code(), Some(1));
}

#[test]
fn simulate_twice_gives_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("run.toml");
    std::fs::write(&manifest, "seed = 9\ndays = 2\nmean_passes = 8\nday_length_s = 90\noutput_dir = \"out\"\n").unwrap();
    let run = || {
        let o = flowmon(&["simulate", manifest.to_str().unwrap()]).output().unwrap();
        assert!(o.status.success(), "{}", text(&o));
        std::fs::read(dir.path().join("out/report.jsonl")).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
}
