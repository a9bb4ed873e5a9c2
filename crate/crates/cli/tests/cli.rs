use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

fn holo() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_holo"));
    c.env_remove("HOLO_HUB").env_remove("HOLO_DATA_DIR").env_remove("HOLO_KEY").env("RUST_LOG", "warn");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    holo().args(args).output().expect("spawn holo")
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

struct ControllerProc {
    child: Child,
    addr: String,
}

impl Drop for ControllerProc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start_controller(dir: &Path) -> ControllerProc {
    let mut child = holo()
        .args(["--json", "controller", "--listen", "127.0.0.1:0", "--data-dir"])
        .arg(dir)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let v: Value = serde_json::from_str(&line).unwrap();
    ControllerProc {
        child,
        addr: v["listening"].as_str().unwrap().to_string(),
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["deploy"]).status.code(), Some(2));
    assert_eq!(run(&["analyze", "bogus", "--in", "x", "--out", "y"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn operational_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["status", "--hub", "127.0.0.1:1", "--key", "k"]);
    assert_eq!(out.status.code(), Some(1));
    let missing = dir.path().join("nope.yaml");
    let out = run(&["sim", "run", "-f", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn onboarding_deploy_and_status() {
    let dir = tempfile::tempdir().unwrap();
    let hub_dir = dir.path().join("hub");
    let ctl = start_controller(&hub_dir);
    let hub = ["--hub", ctl.addr.as_str(), "--data-dir", hub_dir.to_str().unwrap()];

    let mut args = vec!["--json", "token", "new", "--sensor", "A1", "--ttl", "1h"];
    args.extend(hub);
    let tok = ok_json(&args);
    let token = tok["token"].as_str().unwrap().to_string();
    assert!(tok["bootstrap_command"].as_str().unwrap().contains(&token));

    let agent_dir = dir.path().join("agent");
    let descriptor = configs().join("sensor.yaml");
    let out = holo()
        .args(["--json", "agent", "--steps", "1", "--hub", &ctl.addr, "--bootstrap", &token, "--descriptor"])
        .arg(&descriptor)
        .arg("--data-dir")
        .arg(&agent_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(agent_dir.join("tunnel.json").exists());

    let mut args = vec!["--json", "status"];
    args.extend(hub);
    let status = ok_json(&args);
    assert_eq!(status["sensors"][0]["sensor_id"], "A1");
    assert_eq!(status["sensors"][0]["reachable"], true);

    // The sample sensor forbids honeypots.
    let responder = configs().join("responder.yaml");
    let mut args = vec!["deploy", "-f", responder.to_str().unwrap()];
    args.extend(hub);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CapabilityDenied"));

    let darknet = configs().join("darknet.yaml");
    let mut args = vec!["--json", "deploy", "-f", darknet.to_str().unwrap()];
    args.extend(hub);
    let deployed = ok_json(&args);
    assert_eq!(deployed.as_array().unwrap().len(), 2);

    // The next heartbeat starts both modules and writes the ruleset.
    let out = holo()
        .args(["--json", "agent", "--steps", "2", "--interval", "0", "--hub", &ctl.addr, "--data-dir"])
        .arg(&agent_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rules_dir = agent_dir.join("rules").join("A1");
    assert_eq!(std::fs::read_dir(&rules_dir).unwrap().count(), 1);

    let mut args = vec!["--json", "status"];
    args.extend(hub);
    let status = ok_json(&args);
    let running: Vec<&str> = status["sensors"][0]["instances"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["status"].as_str().unwrap())
        .collect();
    assert_eq!(running, ["Running", "Running"]);

    let emit_dir = dir.path().join("emitted");
    let mut args = vec!["--json", "rules", "emit", "--sensor", "A1", "--out", emit_dir.to_str().unwrap()];
    args.extend(hub);
    let rules = ok_json(&args);
    assert!(rules["iptables"].as_str().unwrap().contains("-s 10.1.0.0/24 -j DROP"));
    let path = rules["path"].as_str().unwrap();
    assert!(path.ends_with(&format!("holo-rules-{}.v4", rules["generation"])));

    let mut args = vec!["--json", "principal", "add", "--name", "viewer", "--role", "reader"];
    args.extend(hub);
    let reader_key = ok_json(&args)["api_key"].as_str().unwrap().to_string();
    let blob = dir.path().join("blob.bin");
    std::fs::write(&blob, b"module bytes").unwrap();
    let out = run(&["catalog", "put", "--name", "m", "--file", blob.to_str().unwrap(), "--hub", &ctl.addr, "--key", &reader_key]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Unauthorized"));
    let mut args = vec!["--json", "catalog", "put", "--name", "m", "--file", blob.to_str().unwrap()];
    args.extend(hub);
    let version = ok_json(&args)["version"].as_str().unwrap().to_string();
    let fetched = dir.path().join("fetched.bin");
    ok_json(&[
        "--json", "catalog", "get", "--name", "m", "--version", &version, "--out", fetched.to_str().unwrap(), "--hub", &ctl.addr, "--key",
        &reader_key,
    ]);
    assert_eq!(std::fs::read(fetched).unwrap(), b"module bytes");

    let mut args = vec!["--json", "undeploy", "telescope"];
    args.extend(hub);
    assert_eq!(ok_json(&args)["removed"][0], "A1");
}

#[test]
fn sim_analyze_and_sync() {
    let dir = tempfile::tempdir().unwrap();
    let sim_cfg = dir.path().join("sim.yaml");
    let text = std::fs::read_to_string(configs().join("sim.yaml"))
        .unwrap()
        .replace("duration: 172800", "duration: 7200");
    std::fs::write(&sim_cfg, text).unwrap();
    let out_dir = dir.path().join("run");
    let header = ok_json(&["--json", "sim", "run", "-f", sim_cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--pcap"]);
    assert!(out_dir.join("truth.jsonl").exists());
    assert!(out_dir.join("traffic.pcap").exists());
    for s in header["sensors"].as_object().unwrap().values() {
        assert_eq!(s["darknet_leaks"], 0);
        assert_eq!(s["captured"], s["expected_captured"]);
    }

    for what in ["flows", "overlap", "portcdf", "timeline"] {
        let csv = dir.path().join(format!("{what}.csv"));
        let args = [
            "--json", "analyze", what, "--in", out_dir.to_str().unwrap(), "--out", csv.to_str().unwrap(), "--min-packets", "5",
        ];
        let first = run(&args);
        assert!(first.status.success(), "{what}: {}", String::from_utf8_lossy(&first.stderr));
        let bytes = std::fs::read(&csv).unwrap();
        assert!(bytes.len() > 20, "{what} csv is empty");
        let second = run(&args);
        assert_eq!(first.stdout, second.stdout, "{what} json output is unstable");
        assert_eq!(std::fs::read(&csv).unwrap(), bytes);
    }
    let overlap: Value = serde_json::from_slice(&run(&[
        "--json", "analyze", "overlap", "--in", out_dir.to_str().unwrap(), "--out", dir.path().join("o.csv").to_str().unwrap(),
    ])
    .stdout)
    .unwrap();
    assert_eq!(overlap["params"]["window_days"], 15);
    assert_eq!(overlap["params"]["min_packets"], 500);
    assert_eq!(overlap["params"]["top_fraction"], 0.05);

    let spool = out_dir.join("traces").join("A1");
    let lake = dir.path().join("lake");
    let status = ok_json(&["--json", "sync", "status", "--spool", spool.to_str().unwrap(), "--lake", lake.to_str().unwrap()]);
    let sealed = status.as_array().unwrap().len();
    assert!(sealed >= 2);
    assert!(status.as_array().unwrap().iter().all(|r| r["in_lake"] == false));
    let report = ok_json(&[
        "--json", "sync", "run", "--spool", spool.to_str().unwrap(), "--lake", lake.to_str().unwrap(), "--retention-hours", "100000",
    ]);
    assert_eq!(report["uploaded"].as_u64().unwrap() as usize, sealed);
    let status = ok_json(&["--json", "sync", "status", "--spool", spool.to_str().unwrap(), "--lake", lake.to_str().unwrap()]);
    assert!(status.as_array().unwrap().iter().all(|r| r["in_lake"] == true));
}
