//! Stub external services and the scenario corpus.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::ast::Value;
use crate::net::{self, ServiceHandle};
use crate::adapt::{Middleware, RuleServer};
use crate::runtime::{run_all, ExternalLink, InputScript, InputSource, ManagerLink, RunOptions, Store};

/// Names accepted for the no-op timer functions.
pub const TIMER_FUNCTIONS: [&str; 5] = ["startTimer", "stopTimer", "endTimer", "start", "end"];

/// How a stub function computes its result.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "behaviour", rename_all = "camelCase")]
pub enum FunctionSpec {
    /// Ignores its arguments.
    Fixed { value: Value },
    /// `prefix + arg0 + suffix`, rendering `arg0` as text.
    Concat {
        #[serde(default)]
        prefix: String,
        #[serde(default)]
        suffix: String,
    },
    /// `arg0 + amount` on integers.
    Add { amount: i64 },
    /// Shifts a single lowercase letter by `by` positions, wrapping in a-z.
    CharShift { by: i64 },
    /// `arg0`-th character of the shared buffer.
    BufferGet,
    /// Replaces the `arg0`-th character of the shared buffer with `arg1`.
    BufferSet,
    /// Returns the given values in order, then fails.
    Scripted { values: Vec<Value> },
}

/// A set of stub functions plus the shared string buffer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionTable {
    pub functions: BTreeMap<String, FunctionSpec>,
    #[serde(default)]
    pub buffer: String,
    #[serde(skip)]
    cursors: BTreeMap<String, usize>,
}

impl Hash for FunctionTable {
    // Only the mutable parts; the function specs never change during a run.
    fn hash<H: Hasher>(&self, h: &mut H) {
        self.buffer.hash(h);
        self.cursors.hash(h);
    }
}

/// Shifts a lowercase letter within a-z.
pub fn shift_char(c: char, by: i64) -> Option<char> {
    if !c.is_ascii_lowercase() {
        return None;
    }
    let i = (c as i64 - 'a' as i64 + by).rem_euclid(26);
    Some((b'a' + i as u8) as char)
}

fn int_arg(args: &[Value], i: usize, f: &str) -> Result<i64, String> {
    match args.get(i) {
        Some(Value::Int(n)) => Ok(*n),
        Some(other) => Err(format!("`{f}` expects an integer argument, got {}", other.type_name())),
        None => Err(format!("`{f}` is missing argument {}", i + 1)),
    }
}

fn str_arg(args: &[Value], i: usize, f: &str) -> Result<String, String> {
    args.get(i)
        .map(Value::render)
        .ok_or_else(|| format!("`{f}` is missing argument {}", i + 1))
}

impl FunctionTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, spec: FunctionSpec) -> Self {
        self.functions.insert(name.to_string(), spec);
        self
    }

    /// Adds every timer alias as a function returning 0.
    pub fn with_timers(mut self) -> Self {
        for t in TIMER_FUNCTIONS {
            self.functions
                .entry(t.to_string())
                .or_insert(FunctionSpec::Fixed { value: Value::Int(0) });
        }
        self
    }

    pub fn with_buffer(mut self, buffer: &str) -> Self {
        self.buffer = buffer.to_string();
        self
    }

    pub fn has(&self, name: &str) -> bool {
        self.functions.contains_key(name)
    }

    pub fn call(&mut self, name: &str, args: &[Value]) -> Result<Value, String> {
        let spec = self
            .functions
            .get(name)
            .ok_or_else(|| format!("unknown function `{name}`"))?;
        match spec {
            FunctionSpec::Fixed { value } => Ok(value.clone()),
            FunctionSpec::Concat { prefix, suffix } => Ok(Value::Str(format!("{prefix}{}{suffix}", str_arg(args, 0, name)?))),
            FunctionSpec::Add { amount } => int_arg(args, 0, name)?
                .checked_add(*amount)
                .map(Value::Int)
                .ok_or_else(|| format!("`{name}` overflowed")),
            FunctionSpec::CharShift { by } => {
                let s = str_arg(args, 0, name)?;
                let mut chars = s.chars();
                match (chars.next().and_then(|c| shift_char(c, *by)), chars.next()) {
                    (Some(c), None) => Ok(Value::Str(c.to_string())),
                    _ => Err(format!("`{name}` expects one lowercase letter, got {s:?}")),
                }
            }
            FunctionSpec::BufferGet => {
                let i = int_arg(args, 0, name)?;
                usize::try_from(i)
                    .ok()
                    .and_then(|i| self.buffer.chars().nth(i))
                    .map(|c| Value::Str(c.to_string()))
                    .ok_or_else(|| format!("`{name}`: index {i} outside the buffer"))
            }
            FunctionSpec::BufferSet => {
                let i = int_arg(args, 0, name)?;
                let s = str_arg(args, 1, name)?;
                let mut chars: Vec<char> = self.buffer.chars().collect();
                let (Some(slot), Some(c)) = (usize::try_from(i).ok().and_then(|i| chars.get_mut(i)), s.chars().next()) else {
                    return Err(format!("`{name}`: cannot set index {i} to {s:?}"));
                };
                *slot = c;
                self.buffer = chars.into_iter().collect();
                Ok(Value::Int(0))
            }
            FunctionSpec::Scripted { values } => {
                let cursor = self.cursors.entry(name.to_string()).or_insert(0);
                let v = values
                    .get(*cursor)
                    .cloned()
                    .ok_or_else(|| format!("`{name}` has no scripted values left"))?;
                *cursor += 1;
                Ok(v)
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum CallRequest {
    Call {
        #[serde(rename = "fn")]
        function: String,
        #[serde(default)]
        args: Vec<Value>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CallResponse {
    Result { value: Value },
    Error { message: String },
}

/// Serves `table` on `bind` with the external-function protocol. The table
/// is shared by all connections.
pub fn serve_functions(table: Arc<Mutex<FunctionTable>>, bind: &str) -> std::io::Result<ServiceHandle> {
    net::serve_lines(bind, move |req: Result<CallRequest, String>| match req {
        Ok(CallRequest::Call { function, args }) => match table.lock().unwrap().call(&function, &args) {
            Ok(value) => CallResponse::Result { value },
            Err(message) => CallResponse::Error { message },
        },
        Err(e) => CallResponse::Error { message: e },
    })
}

/// A rule file published on a server at a given step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RulePublication {
    /// Scheduler step at which the rule appears; 0 means before the run.
    pub step: u64,
    /// Index of the server in registration order.
    pub server: usize,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvChange {
    pub step: u64,
    pub key: String,
    pub value: Value,
}

/// A terminal assertion of a scenario.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "on", rename_all = "camelCase")]
pub enum Expectation {
    Var { role: String, var: String, value: Value },
    Buffer { value: String },
}

/// A runnable scenario with its expected outcome.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub program: String,
    pub rules: Vec<RulePublication>,
    pub env: Vec<EnvChange>,
    pub scripts: InputScript,
    pub functions: FunctionTable,
    pub servers: usize,
    pub expect: Vec<Expectation>,
    /// Final states do not depend on the schedule.
    pub race_free: bool,
}

mod corpus_files {
    pub const HELLO: &str = include_str!("../corpus/helloworld.aioc");
    pub const HELLO_RULE: &str = include_str!("../corpus/helloworld.arl");
    pub const APPOINTMENT: &str = include_str!("../corpus/appointment.aioc");
    pub const EVENT_RULE: &str = include_str!("../corpus/event_selection.arl");
    pub const MATCHING_DAY_RULE: &str = include_str!("../corpus/matching_day.arl");
}

pub use corpus_files::{
    APPOINTMENT as APPOINTMENT_SOURCE, EVENT_RULE as EVENT_SELECTION_RULE, HELLO as HELLO_SOURCE,
    HELLO_RULE as HELLO_RULE_SOURCE, MATCHING_DAY_RULE as MATCHING_DAY_RULE_SOURCE,
};

/// Pipe of `n` increments alternating between roles `a` and `b`, each
/// wrapped in a scope tagged `N.x = k` when `scopes` is set.
pub fn pipe_program(n: usize, scopes: bool) -> String {
    let mut s = String::from(
        "include startTimer, stopTimer from \"socket://localhost:8000\"\npreamble { starter: a }\n\naioc {\n  x@a = 0;\n  init: a( x ) -> b( x );\n  _r@a = startTimer( \"pipe\" );\n",
    );
    for k in 1..=n {
        let (from, to) = if k % 2 == 1 { ("a", "b") } else { ("b", "a") };
        let task = format!("x@{from} = 1 + x; pass: {from}( x ) -> {to}( x )");
        if scopes {
            s.push_str(&format!("  scope @{from} {{ {task} }} prop {{ N.x = {k} }};\n"));
        } else {
            s.push_str(&format!("  {task};\n"));
        }
    }
    s.push_str("  _r@a = stopTimer( \"pipe\" )\n}\n");
    s
}

/// Rules replacing the pipe scopes `1..=k` with a `+2` increment.
pub fn pipe_rules(k: usize) -> String {
    let mut s = String::new();
    for i in 1..=k {
        let (from, to) = if i % 2 == 1 { ("a", "b") } else { ("b", "a") };
        s.push_str(&format!(
            "rule {{\n  on {{ N.x == {i} }}\n  do {{ x@{from} = 2 + x; pass: {from}( x ) -> {to}( x ) }}\n}}\n"
        ));
    }
    s
}

/// The `i`-th letter of the cyclic alphabet, used for fork-join messages.
pub fn fork_join_message(n: usize) -> String {
    (0..n).map(|i| (b'a' + (i % 26) as u8) as char).collect()
}

/// Fork-join over an `n`-character buffer: one parallel task per
/// character, alternating between roles `a` and `b`.
pub fn fork_join_program(n: usize, scopes: bool) -> String {
    let mut s = String::from(
        "include startTimer, stopTimer from \"socket://localhost:8000\"\ninclude getNthChar, getNext, setNthChar from \"socket://localhost:8001\"\npreamble { starter: a }\n\naioc {\n  _r@a = startTimer( \"forkjoin\" );\n  sync: a( _r ) -> b( _r );\n  {\n",
    );
    for i in 0..n {
        let r = if i % 2 == 0 { "a" } else { "b" };
        let task = format!("l{i}@{r} = getNthChar( {i} ); l{i}@{r} = getNext( l{i} ); _r@{r} = setNthChar( {i}, l{i} )");
        let sep = if i == 0 { "   " } else { " | " };
        if scopes {
            s.push_str(&format!("  {sep} scope @{r} {{ {task} }} prop {{ N.char = {i} }}\n"));
        } else {
            s.push_str(&format!("  {sep} {{ {task} }}\n"));
        }
    }
    s.push_str("  };\n  join: b( _r ) -> a( _j );\n  _r@a = stopTimer( \"forkjoin\" )\n}\n");
    s
}

/// Double-shift rules for the given character positions. Each body runs at
/// the coordinator of the targeted scope.
pub fn fork_join_rules(chars: &[usize]) -> String {
    let mut s = String::new();
    for &i in chars {
        let r = if i % 2 == 0 { "a" } else { "b" };
        s.push_str(&format!(
            "rule {{\n  include getNthChar, getDoubleNext, setNthChar from \"socket://localhost:8001\"\n  on {{ N.char == {i} }}\n  do {{ l{i}@{r} = getNthChar( {i} ); l{i}@{r} = getDoubleNext( l{i} );\n    _r@{r} = setNthChar( {i}, l{i} ) }}\n}}\n"
        ));
    }
    s
}

/// Expected fork-join result, computed character by character.
pub fn fork_join_expected(message: &str, doubled: &[usize]) -> String {
    message
        .chars()
        .enumerate()
        .map(|(i, c)| shift_char(c, if doubled.contains(&i) { 2 } else { 1 }).unwrap_or(c))
        .collect()
}

pub fn fork_join_table(message: &str) -> FunctionTable {
    FunctionTable::new()
        .with("getNthChar", FunctionSpec::BufferGet)
        .with("setNthChar", FunctionSpec::BufferSet)
        .with("getNext", FunctionSpec::CharShift { by: 1 })
        .with("getDoubleNext", FunctionSpec::CharShift { by: 2 })
        .with_timers()
        .with_buffer(message)
}

pub fn appointment_table() -> FunctionTable {
    FunctionTable::new()
        .with("isFreeDay", FunctionSpec::Fixed { value: Value::Bool(true) })
        .with(
            "getTicket",
            FunctionSpec::Concat {
                prefix: "TICKET-".into(),
                suffix: String::new(),
            },
        )
        .with("getWeather", FunctionSpec::Fixed { value: Value::from("Clear") })
        .with("hasFreeWeek", FunctionSpec::Fixed { value: Value::Bool(false) })
        .with_timers()
}

fn script(entries: &[(&str, &[&str])]) -> InputScript {
    entries
        .iter()
        .map(|(r, xs)| (r.to_string(), xs.iter().map(|s| s.to_string()).collect()))
        .collect()
}

fn var(role: &str, name: &str, value: impl Into<Value>) -> Expectation {
    Expectation::Var {
        role: role.into(),
        var: name.into(),
        value: value.into(),
    }
}

fn before_start(source: String) -> Vec<RulePublication> {
    vec![RulePublication {
        step: 0,
        server: 0,
        source,
    }]
}

fn pipe_scenario(n: usize, rules: usize) -> Scenario {
    let x = (n + rules) as i64;
    Scenario {
        name: if rules == 0 {
            format!("pipe-{n}-norules")
        } else {
            format!("pipe-{n}-rules")
        },
        program: pipe_program(n, true),
        rules: if rules == 0 { Vec::new() } else { before_start(pipe_rules(rules)) },
        env: Vec::new(),
        scripts: InputScript::new(),
        functions: FunctionTable::new().with_timers(),
        servers: 1,
        expect: vec![var("a", "x", x), var("b", "x", x)],
        race_free: true,
    }
}

fn fork_join_scenario(n: usize, doubled: &[usize]) -> Scenario {
    let message = fork_join_message(n);
    Scenario {
        name: if doubled.is_empty() {
            format!("forkjoin-{n}-norules")
        } else {
            format!("forkjoin-{n}-rules")
        },
        program: fork_join_program(n, true),
        rules: if doubled.is_empty() {
            Vec::new()
        } else {
            before_start(fork_join_rules(doubled))
        },
        env: Vec::new(),
        scripts: InputScript::new(),
        functions: fork_join_table(&message),
        servers: 1,
        expect: vec![Expectation::Buffer {
            value: fork_join_expected(&message, doubled),
        }],
        race_free: true,
    }
}

/// Every bundled scenario.
pub fn corpus() -> Vec<Scenario> {
    let ticket = "TICKET-2024-06-01";
    vec![
        Scenario {
            name: "helloworld".into(),
            program: HELLO_SOURCE.into(),
            rules: Vec::new(),
            env: Vec::new(),
            scripts: InputScript::new(),
            functions: FunctionTable::new(),
            servers: 1,
            expect: vec![var("display", "msg", "Hello World")],
            race_free: true,
        },
        Scenario {
            name: "helloworld-it".into(),
            program: HELLO_SOURCE.into(),
            rules: before_start(HELLO_RULE_SOURCE.into()),
            env: vec![EnvChange {
                step: 0,
                key: "lang".into(),
                value: Value::from("it"),
            }],
            scripts: InputScript::new(),
            functions: FunctionTable::new(),
            servers: 1,
            expect: vec![var("display", "msg", "Ciao Mondo")],
            race_free: true,
        },
        Scenario {
            name: "appointment-accept".into(),
            program: APPOINTMENT_SOURCE.into(),
            rules: Vec::new(),
            env: Vec::new(),
            scripts: script(&[("bob", &["2024-06-01"]), ("alice", &["y"])]),
            functions: appointment_table(),
            servers: 1,
            expect: vec![
                var("bob", "ticket", ticket),
                var("alice", "ticket", ticket),
                var("cinema", "book_day", "2024-06-01"),
                var("bob", "end", true),
            ],
            race_free: true,
        },
        Scenario {
            name: "appointment-refuse".into(),
            program: APPOINTMENT_SOURCE.into(),
            rules: Vec::new(),
            env: Vec::new(),
            scripts: script(&[("bob", &["2024-06-01", "n"]), ("alice", &["n"])]),
            functions: appointment_table(),
            servers: 1,
            expect: vec![var("bob", "end", true), var("alice", "agreement", "n")],
            race_free: true,
        },
        Scenario {
            name: "appointment-picnic".into(),
            program: APPOINTMENT_SOURCE.into(),
            rules: before_start(EVENT_SELECTION_RULE.into()),
            env: vec![EnvChange {
                step: 0,
                key: "month".into(),
                value: Value::Int(6),
            }],
            scripts: script(&[("bob", &["2024-06-01"]), ("alice", &["y"])]),
            functions: appointment_table(),
            servers: 1,
            expect: vec![var("alice", "event", "picnic"), var("bob", "end", true)],
            race_free: true,
        },
        pipe_scenario(5, 0),
        pipe_scenario(5, 2),
        pipe_scenario(100, 0),
        pipe_scenario(100, 50),
        fork_join_scenario(5, &[]),
        fork_join_scenario(5, &[0, 1]),
        fork_join_scenario(100, &[]),
        fork_join_scenario(100, &[0, 1]),
    ]
}

/// Middleware for a scenario with every step-0 rule and env change
/// applied; later ones are returned for the caller to schedule.
pub fn initial_middleware(s: &Scenario) -> Result<(Middleware, Vec<RulePublication>, Vec<EnvChange>), String> {
    let mut mw = Middleware::new();
    for i in 0..s.servers.max(1) {
        mw.register(RuleServer::new(format!("server{i}")));
    }
    let mut later_rules = Vec::new();
    for r in &s.rules {
        if r.step == 0 {
            let server = mw
                .server_mut(r.server)
                .ok_or_else(|| format!("{}: no server {}", s.name, r.server))?;
            server.publish(&r.source).map_err(|d| format!("{}: rule rejected: {}", s.name, d.join("; ")))?;
        } else {
            later_rules.push(r.clone());
        }
    }
    let mut later_env = Vec::new();
    for e in &s.env {
        if e.step == 0 {
            mw.env.set(e.key.clone(), e.value.clone());
        } else {
            later_env.push(e.clone());
        }
    }
    Ok((mw, later_rules, later_env))
}

/// Unmet expectations, one message each.
pub fn unmet_expectations(s: &Scenario, vars: &BTreeMap<String, Store>, buffer: &str) -> Vec<String> {
    s.expect
        .iter()
        .filter_map(|e| match e {
            Expectation::Var { role, var, value } => {
                let got = vars.get(role).and_then(|v| v.get(var));
                (got != Some(value)).then(|| format!("{role}.{var}: expected {value}, got {got:?}"))
            }
            Expectation::Buffer { value } => (buffer != value).then(|| format!("buffer: expected {value:?}, got {buffer:?}")),
        })
        .collect()
}

/// Runs a scenario on the threaded runtime with in-process links. Rules
/// and env changes scheduled after step 0 are applied before the run.
pub fn run_threaded(s: &Scenario) -> Result<(BTreeMap<String, Store>, String), String> {
    let program = crate::parser::parse_program(&s.program).map_err(|d| format!("{}: {}", s.name, d[0]))?;
    let app = crate::project::project(&program).map_err(|e| format!("{}: {e}", s.name))?;
    let (mut mw, later, env) = initial_middleware(s)?;
    for r in later {
        if let Some(server) = mw.server_mut(r.server) {
            server.publish(&r.source).map_err(|d| d.join("; "))?;
        }
    }
    for e in env {
        mw.env.set(e.key, e.value);
    }
    let table = Arc::new(Mutex::new(s.functions.clone()));
    let opts = RunOptions {
        manager: ManagerLink::InProcess(Arc::new(Mutex::new(mw))),
        external: ExternalLink::Table(table.clone()),
        input: InputSource::Script(s.scripts.clone()),
        idle_timeout: std::time::Duration::from_secs(20),
        trace: false,
    };
    let outcomes = run_all(&app, &opts).map_err(|e| format!("{}: {e}", s.name))?;
    let vars = outcomes.into_iter().map(|o| (o.role.0, o.vars)).collect();
    let buffer = table.lock().unwrap().buffer.clone();
    Ok((vars, buffer))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_shift() {
        let mut t = fork_join_table("abcde");
        assert_eq!(t.call("getNext", &[Value::from("a")]).unwrap(), Value::from("b"));
        assert_eq!(t.call("getDoubleNext", &[Value::from("a")]).unwrap(), Value::from("c"));
        assert_eq!(t.call("getDoubleNext", &[Value::from("y")]).unwrap(), Value::from("a"));
        assert!(t.call("getNext", &[Value::from("A")]).is_err());
    }

    #[test]
    fn buffer_read_your_write() {
        let mut t = fork_join_table("abcde");
        t.call("setNthChar", &[Value::Int(0), Value::from("z")]).unwrap();
        assert_eq!(t.call("getNthChar", &[Value::Int(0)]).unwrap(), Value::from("z"));
        assert_eq!(t.buffer, "zbcde");
    }

    #[test]
    fn stubs() {
        let mut t = appointment_table();
        assert_eq!(t.call("getTicket", &[Value::from("2024-06-01")]).unwrap(), Value::from("TICKET-2024-06-01"));
        assert_eq!(t.call("isFreeDay", &[Value::from("x")]).unwrap(), Value::Bool(true));
        for timer in TIMER_FUNCTIONS {
            assert_eq!(t.call(timer, &[Value::Int(5)]).unwrap(), Value::Int(0));
        }
        let mut s = FunctionTable::new().with(
            "f",
            FunctionSpec::Scripted {
                values: vec![Value::Int(1)],
            },
        );
        assert_eq!(s.call("f", &[]).unwrap(), Value::Int(1));
        assert!(s.call("f", &[]).is_err());
        assert!(s.call("g", &[]).is_err());
    }

    #[test]
    fn table_json() {
        let t: FunctionTable = serde_json::from_str(
            r#"{"functions": {"getTicket": {"behaviour": "concat", "prefix": "T-"}, "n": {"behaviour": "charShift", "by": 1}}, "buffer": "ab"}"#,
        )
        .unwrap();
        assert_eq!(t.functions.len(), 2);
        assert_eq!(t.buffer, "ab");
    }

    #[test]
    fn corpus_runs_threaded() {
        for s in corpus() {
            let (vars, buffer) = run_threaded(&s).unwrap();
            assert_eq!(unmet_expectations(&s, &vars, &buffer), Vec::<String>::new(), "{}", s.name);
        }
    }

    #[test]
    fn fork_join_oracle() {
        assert_eq!(fork_join_expected("abcde", &[]), "bcdef");
        assert_eq!(fork_join_expected("abcde", &[0, 1]), "cddef");
    }
}
