use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

fn trialwatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trialwatch"))
        .args(args)
        .env("TRIALWATCH_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.display().to_string()
}

const SHORT: &str = r#"
profile = "oralytics"
participants = 6
trial_days = 14
seed = 11
"#;

#[test]
fn run_verify_replay_and_a_corrupted_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SHORT);
    let out = tmp.path().join("run");
    let o = trialwatch(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "participant_data",
        "treatment_selection_data",
        "posterior_weights",
        "update_data",
        "schedule_provenance",
    ] {
        assert!(out.join("tables").join(format!("{f}.jsonl")).exists(), "{f}");
    }
    assert!(out.join("ledger.jsonl").exists());

    let dir = out.to_str().unwrap();
    let v = trialwatch(&["verify", dir]);
    assert_eq!(v.status.code(), Some(0), "{}", stdout(&v));
    assert!(stdout(&v).starts_with("clean"));
    assert_eq!(trialwatch(&["replay", dir]).status.code(), Some(0));

    // nudge one stored probability
    let table = out.join("tables/participant_data.jsonl");
    let text = fs::read_to_string(&table).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut row: serde_json::Map<String, Value> = serde_json::from_str(&lines[12]).unwrap();
    let prob = row["prob"].as_f64().unwrap();
    row.insert("prob".into(), Value::from(prob * 0.75 + 0.1));
    lines[12] = serde_json::to_string(&row).unwrap();
    fs::write(&table, lines.join("\n") + "\n").unwrap();

    let v = trialwatch(&["verify", dir]);
    assert_eq!(v.status.code(), Some(1));
    let text = stdout(&v);
    assert!(text.starts_with("1 mismatches"), "{text}");
    assert!(text.contains("Participant Data Table row 12"), "{text}");
}

#[test]
fn same_config_twice_gives_identical_event_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"
profile = "miwaves"
participants = 6
trial_days = 10
fault_plan = "incident-replay"
"#,
    );
    let logs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            let o = trialwatch(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            fs::read(out.join("events.jsonl")).unwrap()
        })
        .collect();
    assert!(!logs[0].is_empty());
    assert!(logs[0] == logs[1]);
}

#[test]
fn environment_overrides_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SHORT);
    let out = tmp.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_trialwatch"))
        .args(["run", "--config", &cfg, "--out", out.to_str().unwrap()])
        .env("TRIALWATCH_SEED", "99")
        .env("TRIALWATCH_PARTICIPANTS", "3")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: Value = serde_json::from_slice(&fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 99);
    assert!(fs::read_to_string(out.join("config.toml")).unwrap().contains("participants = 3"));
}

#[test]
fn errors_exit_nonzero_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let o = trialwatch(&["verify", tmp.path().join("missing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
    assert_eq!(trialwatch(&["replay", "/definitely/not/here"]).status.code(), Some(2));

    let bad = write_config(tmp.path(), "profile = \"oralytics\"\nparticipants = 0\n");
    let o = trialwatch(&["run", "--config", &bad, "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("participants"));

    let typo = write_config(tmp.path(), "profile = \"oralytics\"\nparticipantz = 3\n");
    let o = trialwatch(&["run", "--config", &typo]);
    assert_eq!(o.status.code(), Some(2));

    assert_ne!(trialwatch(&["inject", tmp.path().to_str().unwrap(), "NOT_A_FAULT"]).status.code(), Some(0));
}

#[test]
fn live_injection_reaches_a_paced_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"
profile = "miwaves"
participants = 4
trial_days = 8
pace_ms = 40
"#,
    );
    let out = tmp.path().join("live");
    let dir = out.to_str().unwrap().to_string();
    let mut child = Command::new(env!("CARGO_BIN_EXE_trialwatch"))
        .args(["run", "--config", &cfg, "--out", &dir, "--serve", "--bind", "127.0.0.1:0", "--exit-when-done"])
        .env("TRIALWATCH_LOG", "warn")
        .stdout(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    while !out.join("run.json").exists() {
        assert!(start.elapsed() < Duration::from_secs(20), "run never started");
        std::thread::sleep(Duration::from_millis(20));
    }
    let o = trialwatch(&["inject", &dir, "RL_CRASH"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(child.wait().unwrap().success());

    let applied = fs::read_to_string(out.join("injections_applied.jsonl")).unwrap();
    let rec: Value = serde_json::from_str(applied.lines().next().expect("the injection was applied")).unwrap();
    assert!(rec["rejected"].is_null(), "{rec}");
    let events = fs::read_to_string(out.join("events.jsonl")).unwrap();
    assert!(events.contains("\"code\":\"207\""), "the crash is reported");
    assert!(events.contains("\"source\":\"FALLBACK\""), "decision points fell back");
    assert_eq!(trialwatch(&["replay", &dir]).status.code(), Some(0));
    assert_eq!(trialwatch(&["verify", &dir]).status.code(), Some(0));
}
