use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use chorad::harness::{corpus, pipe_program, HELLO_RULE_SOURCE};
use chorad::sim::{SimConfig, Simulator};
use chorad::parse_program;

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/corpus");

fn chorad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chorad"))
        .args(args)
        .env_remove("CHORAD_MANAGER")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn corpus_file(name: &str) -> String {
    format!("{CORPUS}/{name}")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// A long-running service; killed on drop.
struct Service {
    child: Child,
    addr: String,
}

impl Service {
    fn start(args: &[&str]) -> Service {
        let mut child = Command::new(env!("CARGO_BIN_EXE_chorad"))
            .args(args)
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).unwrap();
        let addr = line.trim().rsplit(' ').next().unwrap().to_string();
        assert!(line.contains("listening on"), "{line:?}");
        Service { child, addr }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn free_port() -> String {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string()
}

/// `role: {json}` lines printed by `run` and `sim`.
fn final_states(out: &str) -> BTreeMap<String, serde_json::Value> {
    out.lines()
        .filter_map(|l| l.split_once(": {"))
        .map(|(r, rest)| (r.to_string(), serde_json::from_str(&format!("{{{rest}")).unwrap()))
        .collect()
}

#[test]
fn check_exit_codes_follow_violations() {
    for (file, code) in [
        ("helloworld.aioc", 0),
        ("appointment.aioc", 0),
        ("appointment_misordered.aioc", 1),
        ("appointment_double_notify.aioc", 1),
    ] {
        let o = chorad(&["check", &corpus_file(file)]);
        assert_eq!(o.status.code(), Some(code), "{file}: {}", stdout(&o));
    }
    let o = chorad(&["check", &corpus_file("appointment_misordered.aioc")]);
    let lines: Vec<_> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 1);
    assert!(lines[0].contains("appointment_misordered.aioc:12:7: sequence: "), "{}", lines[0]);
    let o = chorad(&["check", &corpus_file("appointment_double_notify.aioc")]);
    assert!(stdout(&o).contains(": parallel: "));
}

#[test]
fn parse_errors_are_located() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "bad.aioc", "preamble { starter: a }\naioc {\n  x@a = \n}\n");
    let o = chorad(&["check", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with(&format!("{}:4:", f.display())), "{}", stdout(&o));
}

#[test]
fn unknown_flag_prints_usage() {
    let o = chorad(&["check", "--frobnicate", "x.aioc"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn sim_report_shows_pipe_result() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "pipe5.aioc", &pipe_program(5, true));
    let report = dir.path().join("r.json");
    let o = chorad(&["sim", f.to_str().unwrap(), "--seeds", "100", "--report", report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(r["run"]["finalStates"]["b"]["x"], 5);
    assert_eq!(r["seeds"]["terminated"], 100);
}

#[test]
fn sim_applies_rules_and_env_at_steps() {
    let dir = tempfile::tempdir().unwrap();
    let rules = write(dir.path(), "hello.arl", HELLO_RULE_SOURCE);
    let at = format!("{}@0", rules.display());
    let o = chorad(&["sim", &corpus_file("helloworld.aioc"), "--rules", &at, "--env", "lang=it@0"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(final_states(&stdout(&o))["display"]["msg"], "Ciao Mondo");
    let o = chorad(&["sim", &corpus_file("helloworld.aioc"), "--exhaustive"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 deadlocks"));
}

#[test]
fn compile_writes_roles_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = chorad(&["compile", &corpus_file("appointment.aioc"), "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["starter"], "bob");
    for role in ["alice", "bob", "cinema"] {
        assert!(out.join(format!("{role}.json")).exists());
    }
}

#[test]
fn middleware_services_over_the_wire() {
    let dir = tempfile::tempdir().unwrap();
    let manager = Service::start(&["manager", "--port", "0"]);
    let server = Service::start(&["server", "--port", "0", "--manager", &manager.addr]);
    let rules = write(dir.path(), "hello.arl", HELLO_RULE_SOURCE);

    let o = chorad(&["publish", rules.to_str().unwrap(), "--server", &server.addr]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 1, "one rule id: {}", stdout(&o));

    let bad = write(dir.path(), "bad.arl", "rule { on { true } do { x@a = 1; y@b = 2 } }");
    let o = chorad(&["publish", bad.to_str().unwrap(), "--server", &server.addr]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("sequence"));

    let hello = corpus_file("helloworld.aioc");
    let run = |manager: &str| {
        let o = chorad(&["run", &hello, "--all", "--manager", manager]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        final_states(&stdout(&o))["display"]["msg"].clone()
    };
    assert_eq!(run(&manager.addr), "Hello World");
    let o = chorad(&["env", "--manager", &manager.addr, "set", "lang", "it"]);
    assert_eq!(o.status.code(), Some(0));
    let o = chorad(&["env", "--manager", &manager.addr, "get"]);
    assert_eq!(stdout(&o).trim(), "lang=it");
    assert_eq!(run(&manager.addr), "Ciao Mondo");
}

#[test]
fn roles_in_separate_processes() {
    let (user, display) = (free_port(), free_port());
    let hello = corpus_file("helloworld.aioc");
    let spawn = |role: &str, listen: &str, peer: String| {
        Command::new(env!("CARGO_BIN_EXE_chorad"))
            .args(["run", &hello, "--role", role, "--listen", listen, "--peer", &peer])
            .stdout(Stdio::piped())
            .spawn()
            .unwrap()
    };
    let d = spawn("display", &display, format!("user={user}"));
    let u = spawn("user", &user, format!("display={display}"));
    let (d, u) = (d.wait_with_output().unwrap(), u.wait_with_output().unwrap());
    assert_eq!(u.status.code(), Some(0));
    assert_eq!(d.status.code(), Some(0));
    assert_eq!(final_states(&stdout(&d))["display"]["msg"], "Hello World");
}

#[test]
fn run_all_agrees_with_sim() {
    let dir = tempfile::tempdir().unwrap();
    for s in corpus().into_iter().filter(|s| s.race_free && s.servers <= 1) {
        let program = write(dir.path(), &format!("{}.aioc", s.name), &s.program);
        let script = write(dir.path(), "script.json", &serde_json::to_string(&s.scripts).unwrap());
        let table = write(dir.path(), "table.json", &serde_json::to_string(&s.functions).unwrap());
        let mut args = vec![
            "run".to_string(),
            program.display().to_string(),
            "--all".into(),
            "--script".into(),
            script.display().to_string(),
            "--functions".into(),
            table.display().to_string(),
        ];
        if !s.rules.is_empty() {
            let src: String = s.rules.iter().map(|r| r.source.clone() + "\n").collect();
            args.push("--rules".into());
            args.push(write(dir.path(), "rules.arl", &src).display().to_string());
        }
        for e in &s.env {
            args.push("--env".into());
            args.push(format!("{}={}", e.key, e.value.render()));
        }
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = chorad(&args);
        assert_eq!(o.status.code(), Some(0), "{}: {}", s.name, String::from_utf8_lossy(&o.stderr));

        let p = parse_program(&s.program).unwrap();
        let sim = Simulator::new(&p).unwrap().run(&SimConfig::for_scenario(&s)).unwrap();
        let expected: BTreeMap<_, _> = sim
            .final_states
            .iter()
            .map(|(r, store)| {
                let vars: serde_json::Map<_, _> = store.iter().map(|(k, v)| (k.clone(), v.to_json())).collect();
                (r.clone(), serde_json::Value::Object(vars))
            })
            .collect();
        assert_eq!(final_states(&stdout(&o)), expected, "{}", s.name);
    }
}
