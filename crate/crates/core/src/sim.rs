//! Deterministic single-threaded execution of a whole application.
//!
//! Every role is a [`RoleMachine`], the same interpreter the threaded
//! runtime uses. A scheduler picks one enabled (role, task) pair per step,
//! either pseudo-randomly from a seed or by enumerating all of them.
//! Messages produced by a step are delivered before the next pick, so a
//! message is never in flight across a scheduling decision; reordering
//! comes only from the choice of which pair runs.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{MatchRequest, MatchResponse, Middleware, RuleServer};
use crate::ast::{Behaviour, BehaviourKind, NodeId, Program, Role, Value};
use crate::harness::{EnvChange, FunctionTable, RulePublication, Scenario};
use crate::project::{aux_purpose, project, project_unchecked, ProjectError, ProjectedApp};
use crate::runtime::machine::{Action, Effects, RoleMachine, TraceEvent};
use crate::runtime::message::{Message, MessageKind};
use crate::runtime::{InputScript, RuntimeError, Store};

pub const DEFAULT_MAX_STEPS: u64 = 100_000;
pub const DEFAULT_MAX_STATES: usize = 1_000_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Random,
    Exhaustive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimConfig {
    pub seed: u64,
    pub mode: Mode,
    pub input_script: InputScript,
    pub rule_sets: Vec<RulePublication>,
    pub env_timeline: Vec<EnvChange>,
    pub max_steps: u64,
    /// Visited-state cap for exhaustive mode.
    pub max_states: usize,
    /// Number of rule servers, registered in index order.
    pub servers: usize,
    pub functions: FunctionTable,
    /// Keep the full event trace in the report.
    pub trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            mode: Mode::Random,
            input_script: InputScript::new(),
            rule_sets: Vec::new(),
            env_timeline: Vec::new(),
            max_steps: DEFAULT_MAX_STEPS,
            max_states: DEFAULT_MAX_STATES,
            servers: 1,
            functions: FunctionTable::new().with_timers(),
            trace: false,
        }
    }
}

impl SimConfig {
    /// The configuration a scenario describes, at seed 0.
    pub fn for_scenario(s: &Scenario) -> Self {
        SimConfig {
            input_script: s.scripts.clone(),
            rule_sets: s.rules.clone(),
            env_timeline: s.env.clone(),
            servers: s.servers,
            functions: s.functions.clone(),
            ..SimConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Outcome {
    Terminated,
    /// No enabled step and at least one role unfinished.
    Deadlock,
    StepLimit,
    /// Some role stopped on a runtime error.
    Fault,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AppliedRule {
    pub scope_id: NodeId,
    pub rule_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: u64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimReport {
    pub outcome: Outcome,
    pub steps: u64,
    pub final_states: BTreeMap<String, Store>,
    /// Final content of the shared stub buffer.
    pub buffer: String,
    pub message_counts: BTreeMap<String, u64>,
    pub applied_rules: Vec<AppliedRule>,
    pub faults: Vec<String>,
    pub misdeliveries: u32,
    /// Conservation failures; empty for a clean run.
    pub leaks: Vec<String>,
    pub trace_hash: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceStep>,
}

impl SimReport {
    pub fn var(&self, role: &str, var: &str) -> Option<&Value> {
        self.final_states.get(role).and_then(|s| s.get(var))
    }

    pub fn count(&self, category: &str) -> u64 {
        self.message_counts.get(category).copied().unwrap_or(0)
    }

    /// One event per line: step, role, action, op, peer.
    pub fn trace_text(&self) -> String {
        trace_text(&self.trace)
    }
}

pub fn trace_text(trace: &[TraceStep]) -> String {
    let mut out = String::new();
    for t in trace {
        let e = &t.event;
        let _ = writeln!(
            out,
            "{} {} {} {} {}",
            t.step,
            e.role,
            serde_json::to_value(e.action).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            e.op.as_deref().unwrap_or("-"),
            e.peer.as_deref().unwrap_or("-")
        );
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Project(#[from] ProjectError),
    #[error("rule set published at step {step} on server {server} is rejected: {reason}")]
    Rule { step: u64, server: usize, reason: String },
    #[error("no server {0}")]
    NoServer(usize),
}

/// Message categories used by the overhead counters.
pub fn category(msg: &Message) -> &'static str {
    match msg.kind {
        MessageKind::Ack => "ack",
        MessageKind::Ready | MessageKind::Start => "barrier",
        MessageKind::Directive => "directive",
        MessageKind::Done => "done",
        MessageKind::Msg if aux_purpose(msg.op()).is_some() => "guard",
        MessageKind::Msg => "user",
    }
}

/// Everything but the role machines: what a step may touch.
#[derive(Clone, Debug)]
struct Shared {
    middleware: Middleware,
    table: FunctionTable,
    inputs: InputScript,
    outbox: Vec<Message>,
    counts: BTreeMap<String, u64>,
    applied: Vec<AppliedRule>,
    hasher: DefaultHasher,
    step: u64,
    keep_trace: bool,
    trace: Vec<TraceStep>,
    /// (op, sender, receiver) -> [sends, receives, acks]
    ledger: BTreeMap<(String, String, String), [u64; 3]>,
}

impl Shared {
    fn bump(&mut self, key: &str, by: u64) {
        *self.counts.entry(key.to_string()).or_insert(0) += by;
    }

    fn ledger(&mut self, op: &str, from: &str, to: &str, slot: usize) {
        self.ledger
            .entry((op.to_string(), from.to_string(), to.to_string()))
            .or_insert([0; 3])[slot] += 1;
    }
}

impl Effects for Shared {
    fn transmit(&mut self, msg: Message) -> Result<(), RuntimeError> {
        let c = category(&msg);
        self.bump(c, 1);
        self.outbox.push(msg);
        Ok(())
    }

    fn call_external(&mut self, _role: &Role, function: &str, args: Vec<Value>) -> Result<Value, RuntimeError> {
        self.table.call(function, &args).map_err(RuntimeError::External)
    }

    fn get_input(&mut self, role: &Role, prompt: &str) -> Result<Value, RuntimeError> {
        self.inputs
            .get_mut(role.as_str())
            .and_then(|q| q.pop_front())
            .map(Value::Str)
            .ok_or_else(|| RuntimeError::Input(format!("no scripted input left for `{role}` (prompt {prompt:?})")))
    }

    fn match_scope(&mut self, req: &MatchRequest) -> MatchResponse {
        let (resp, queried) = self.middleware.match_scope(req);
        // Request and reply with the manager, plus one round trip per
        // server consulted.
        self.bump("middleware", 2 + 2 * queried as u64);
        self.bump("matchRequests", 1);
        resp
    }

    fn observe(&mut self, event: TraceEvent) {
        event.hash(&mut self.hasher);
        match event.action {
            Action::Send if event.kind.is_some_and(MessageKind::is_rendezvous) => {
                if let (Some(op), Some(peer)) = (&event.op, &event.peer) {
                    let (op, from, to) = (op.clone(), event.role.clone(), peer.clone());
                    self.ledger(&op, &from, &to, 0);
                }
            }
            Action::Recv if event.kind.is_some_and(MessageKind::is_rendezvous) => {
                if let (Some(op), Some(peer)) = (&event.op, &event.peer) {
                    let (op, from, to) = (op.clone(), peer.clone(), event.role.clone());
                    self.ledger(&op, &from, &to, 1);
                }
            }
            Action::Ack => {
                if let (Some(op), Some(peer)) = (&event.op, &event.peer) {
                    let (op, from, to) = (op.clone(), event.role.clone(), peer.clone());
                    self.ledger(&op, &from, &to, 2);
                }
            }
            Action::Match => self.applied.push(AppliedRule {
                scope_id: event.node.clone().unwrap_or_default(),
                rule_id: event.detail.clone(),
            }),
            _ => {}
        }
        if self.keep_trace {
            self.trace.push(TraceStep { step: self.step, event });
        }
    }
}

/// A prepared application: projection and rule checks happen once.
#[derive(Clone, Debug)]
pub struct Simulator {
    app: ProjectedApp,
    body: Behaviour,
}

impl Simulator {
    /// Projects a checked program.
    pub fn new(p: &Program) -> Result<Self, SimError> {
        Ok(Simulator {
            app: project(p)?,
            body: p.body.clone(),
        })
    }

    /// Projects without the connectedness check; for negative controls.
    pub fn new_unchecked(p: &Program) -> Result<Self, SimError> {
        Ok(Simulator {
            app: project_unchecked(p)?,
            body: p.body.clone(),
        })
    }

    pub fn app(&self) -> &ProjectedApp {
        &self.app
    }

    fn world(&self, cfg: &SimConfig) -> Result<World, SimError> {
        let roles: BTreeSet<Role> = self.app.per_role.keys().cloned().collect();
        let machines: Vec<RoleMachine> = self
            .app
            .per_role
            .iter()
            .map(|(r, code)| RoleMachine::new(r.clone(), code, &self.app.starter, &roles))
            .collect();
        let index = machines.iter().enumerate().map(|(i, m)| (m.role().0.clone(), i)).collect();
        let mut middleware = Middleware::new();
        for i in 0..cfg.servers {
            middleware.register(RuleServer::new(format!("server{i}")));
        }
        let mut rules = cfg.rule_sets.clone();
        rules.sort_by_key(|r| r.step);
        let mut env = cfg.env_timeline.clone();
        env.sort_by_key(|e| e.step);
        // Reject bad rule sets up front rather than mid-run.
        for r in &rules {
            if r.server >= cfg.servers {
                return Err(SimError::NoServer(r.server));
            }
            RuleServer::new("probe").publish(&r.source).map_err(|d| SimError::Rule {
                step: r.step,
                server: r.server,
                reason: d.join("; "),
            })?;
        }
        let mut w = World {
            machines,
            index,
            shared: Shared {
                middleware,
                table: cfg.functions.clone(),
                inputs: cfg.input_script.clone(),
                outbox: Vec::new(),
                counts: BTreeMap::new(),
                applied: Vec::new(),
                hasher: DefaultHasher::new(),
                step: 0,
                keep_trace: cfg.trace,
                trace: Vec::new(),
                ledger: BTreeMap::new(),
            },
            rules,
            env,
            faults: Vec::new(),
        };
        w.fire_due(false);
        Ok(w)
    }

    /// One run under the seeded scheduler.
    pub fn run(&self, cfg: &SimConfig) -> Result<SimReport, SimError> {
        let mut w = self.world(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let outcome = loop {
            if w.shared.step >= cfg.max_steps {
                break Outcome::StepLimit;
            }
            let enabled = w.enabled();
            if enabled.is_empty() {
                if w.fire_due(true) {
                    continue;
                }
                break w.classify();
            }
            let (m, t) = enabled[rng.random_range(0..enabled.len())];
            w.step(m, t);
            w.fire_due(false);
        };
        Ok(w.report(outcome))
    }

    /// Enumerates every schedule, merging identical states.
    pub fn explore(&self, cfg: &SimConfig) -> Result<ExploreReport, SimError> {
        let mut cfg = cfg.clone();
        cfg.trace = true;
        let root = self.world(&cfg)?;
        let mut report = ExploreReport::default();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack = vec![root];
        while let Some(mut w) = stack.pop() {
            if !visited.insert(w.fingerprint()) {
                continue;
            }
            report.states += 1;
            if report.states >= cfg.max_states {
                report.truncated = true;
                break;
            }
            if w.shared.step >= cfg.max_steps {
                report.truncated = true;
                continue;
            }
            let enabled = w.enabled();
            if enabled.is_empty() {
                if w.fire_due(true) {
                    stack.push(w);
                    continue;
                }
                let outcome = w.classify();
                report.terminal += 1;
                let inversions = order_inversions(&self.body, &w.shared.trace);
                let misdelivered = w.machines.iter().any(|m| m.misdeliveries() > 0);
                let leaky = outcome == Outcome::Terminated && !w.leaks().is_empty();
                match outcome {
                    Outcome::Deadlock => report.deadlocks += 1,
                    Outcome::Fault => report.faults += 1,
                    _ => {}
                }
                report.misdeliveries += misdelivered as usize;
                report.inversions += (!inversions.is_empty()) as usize;
                report.leaks += leaky as usize;
                let bad = outcome != Outcome::Terminated || misdelivered || leaky || !inversions.is_empty();
                if bad && report.counterexample.is_none() {
                    report.counterexample = Some(w.shared.trace.clone());
                }
                continue;
            }
            let (&(m, t), rest) = enabled.split_last().expect("non-empty");
            for &(m, t) in rest {
                let mut next = w.clone();
                next.step(m, t);
                next.fire_due(false);
                stack.push(next);
            }
            w.step(m, t);
            w.fire_due(false);
            stack.push(w);
        }
        Ok(report)
    }

    /// Seeded runs over `seeds` consecutive seeds starting at `cfg.seed`.
    pub fn explore_seeds(&self, cfg: &SimConfig, seeds: u64) -> Result<SeedSummary, SimError> {
        let mut s = SeedSummary::default();
        let mut cfg = cfg.clone();
        let base = cfg.seed;
        for k in 0..seeds {
            cfg.seed = base.wrapping_add(k);
            let r = self.run(&cfg)?;
            s.runs += 1;
            match r.outcome {
                Outcome::Terminated => s.terminated += 1,
                Outcome::Deadlock => s.deadlocks += 1,
                Outcome::StepLimit => s.step_limits += 1,
                Outcome::Fault => s.faults += 1,
            }
            if !r.leaks.is_empty() {
                s.leaks += 1;
            }
            if r.misdeliveries > 0 {
                s.misdeliveries += 1;
            }
            if r.applied_rules.iter().any(|a| a.rule_id.is_some()) {
                s.adapted_runs += 1;
            }
            let bad = r.outcome != Outcome::Terminated || !r.leaks.is_empty() || r.misdeliveries > 0;
            if bad && s.counterexample.is_none() {
                let mut traced = cfg.clone();
                traced.trace = true;
                s.counterexample = Some(self.run(&traced)?);
            }
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SeedSummary {
    pub runs: u64,
    pub terminated: u64,
    pub deadlocks: u64,
    pub faults: u64,
    pub step_limits: u64,
    pub leaks: u64,
    pub misdeliveries: u64,
    /// Runs in which at least one scope applied a rule.
    pub adapted_runs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<SimReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExploreReport {
    pub states: usize,
    /// Terminal states reached (after merging).
    pub terminal: usize,
    pub deadlocks: usize,
    pub faults: usize,
    pub misdeliveries: usize,
    pub inversions: usize,
    pub leaks: usize,
    /// A bound was hit; the counts cover only the explored part.
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<Vec<TraceStep>>,
}

impl ExploreReport {
    /// Some schedule misbehaves.
    pub fn found_problem(&self) -> bool {
        self.deadlocks + self.faults + self.misdeliveries + self.inversions + self.leaks > 0
    }
}

#[derive(Clone, Debug)]
struct World {
    machines: Vec<RoleMachine>,
    index: BTreeMap<String, usize>,
    shared: Shared,
    rules: Vec<RulePublication>,
    env: Vec<EnvChange>,
    faults: Vec<String>,
}

impl World {
    fn enabled(&self) -> Vec<(usize, u32)> {
        let mut out = Vec::new();
        for (i, m) in self.machines.iter().enumerate() {
            out.extend(m.enabled_tasks().into_iter().map(|t| (i, t)));
        }
        out
    }

    fn step(&mut self, m: usize, task: u32) {
        (self.shared.step, m, task).hash(&mut self.shared.hasher);
        if let Err(e) = self.machines[m].step(task, &mut self.shared) {
            self.faults.push(format!("{}: {e}", self.machines[m].role()));
        }
        self.shared.step += 1;
        for msg in std::mem::take(&mut self.shared.outbox) {
            match self.index.get(&msg.to) {
                Some(&i) => self.machines[i].deliver(msg),
                None => self.faults.push(format!("message to unknown role `{}`", msg.to)),
            }
        }
    }

    /// Applies timeline entries that are due. With `force`, applies the
    /// earliest pending entry even if its step has not come. Returns
    /// whether anything fired.
    fn fire_due(&mut self, force: bool) -> bool {
        let now = self.shared.step;
        let next_rule = self.rules.first().map(|r| r.step);
        let next_env = self.env.first().map(|e| e.step);
        let earliest = match (next_rule, next_env) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => return false,
        };
        let horizon = if force { now.max(earliest) } else { now };
        let mut fired = false;
        while self.rules.first().is_some_and(|r| r.step <= horizon) {
            let r = self.rules.remove(0);
            if let Some(s) = self.shared.middleware.server_mut(r.server) {
                // Validated in `world`.
                let _ = s.publish(&r.source);
            }
            r.source.hash(&mut self.shared.hasher);
            fired = true;
        }
        while self.env.first().is_some_and(|e| e.step <= horizon) {
            let e = self.env.remove(0);
            (&e.key, &e.value).hash(&mut self.shared.hasher);
            self.shared.middleware.env.set(e.key, e.value);
            fired = true;
        }
        fired
    }

    fn classify(&self) -> Outcome {
        if self.machines.iter().any(|m| m.fault().is_some()) || !self.faults.is_empty() {
            Outcome::Fault
        } else if self.machines.iter().all(RoleMachine::is_terminated) {
            Outcome::Terminated
        } else {
            Outcome::Deadlock
        }
    }

    fn leaks(&self) -> Vec<String> {
        let mut out = Vec::new();
        for m in &self.machines {
            for msg in m.mailbox().leftovers() {
                out.push(format!("`{}` left `{}` from `{}` unconsumed", m.role(), msg.op(), msg.from));
            }
        }
        for ((op, from, to), [s, r, a]) in &self.shared.ledger {
            if s != r || r != a {
                out.push(format!("`{op}` {from}->{to}: {s} sends, {r} receives, {a} acks"));
            }
        }
        out
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for m in &self.machines {
            m.fingerprint(&mut h);
        }
        self.shared.table.hash(&mut h);
        self.shared.inputs.hash(&mut h);
        (self.rules.len(), self.env.len(), self.faults.len()).hash(&mut h);
        if !self.rules.is_empty() || !self.env.is_empty() {
            self.shared.step.hash(&mut h);
        }
        h.finish()
    }

    fn report(self, outcome: Outcome) -> SimReport {
        let leaks = if outcome == Outcome::Terminated { self.leaks() } else { Vec::new() };
        let mut faults = self.faults;
        for m in &self.machines {
            if let Some(f) = m.fault() {
                let line = format!("{}: {f}", m.role());
                if !faults.contains(&line) {
                    faults.push(line);
                }
            }
        }
        let mut h = self.shared.hasher;
        (outcome, self.shared.step).hash(&mut h);
        SimReport {
            outcome,
            steps: self.shared.step,
            final_states: self.machines.iter().map(|m| (m.role().0.clone(), m.vars().clone())).collect(),
            buffer: self.shared.table.buffer.clone(),
            message_counts: self.shared.counts,
            applied_rules: self.shared.applied,
            faults,
            misdeliveries: self.machines.iter().map(RoleMachine::misdeliveries).sum(),
            leaks,
            trace_hash: format!("{:016x}", h.finish()),
            trace: self.shared.trace,
        }
    }
}

fn within(node: &NodeId, root: &NodeId) -> bool {
    node.path().starts_with(root.path())
}

fn counts_for_order(e: &TraceEvent) -> Option<&NodeId> {
    match e.action {
        Action::Assign | Action::Call | Action::Guard | Action::Match | Action::Fault | Action::Recv => e.node.as_ref(),
        _ => None,
    }
}

/// Sequences whose continuation observably started before the first part
/// finished, as (first, continuation) node pairs. Sequences inside loops
/// are skipped since their events repeat.
pub fn order_inversions(body: &Behaviour, trace: &[TraceStep]) -> Vec<(NodeId, NodeId)> {
    let events: Vec<&NodeId> = trace.iter().filter_map(|t| counts_for_order(&t.event)).collect();
    let mut seqs = Vec::new();
    collect_seqs(body, false, &mut seqs);
    let mut out = Vec::new();
    for (a, b) in seqs {
        let last_a = events.iter().rposition(|n| within(n, &a));
        let first_b = events.iter().position(|n| within(n, &b));
        if let (Some(la), Some(fb)) = (last_a, first_b) {
            if fb < la {
                out.push((a, b));
            }
        }
    }
    out
}

fn collect_seqs(b: &Behaviour, in_loop: bool, out: &mut Vec<(NodeId, NodeId)>) {
    let mut stack = vec![(b, in_loop)];
    while let Some((b, in_loop)) = stack.pop() {
        let in_loop = in_loop || matches!(b.kind, BehaviourKind::While { .. });
        if let BehaviourKind::Seq(x, y) = &b.kind {
            if !in_loop {
                out.push((x.id().clone(), y.id().clone()));
            }
        }
        for c in b.children() {
            stack.push((c, in_loop));
        }
    }
}

/// Simulates `p` once.
pub fn simulate(p: &Program, cfg: &SimConfig) -> Result<SimReport, SimError> {
    let sim = Simulator::new(p)?;
    match cfg.mode {
        Mode::Random => sim.run(cfg),
        Mode::Exhaustive => {
            // The report of an exhaustive run is the seed-0 schedule; the
            // enumeration summary comes from `Simulator::explore`.
            sim.run(cfg)
        }
    }
}

/// Runs `p` under `seeds` seeds.
pub fn explore_deadlocks(p: &Program, seeds: u64, cfg: &SimConfig) -> Result<SeedSummary, SimError> {
    Simulator::new(p)?.explore_seeds(cfg, seeds)
}

/// Message counts by category for one seeded run.
pub fn count_overhead(p: &Program, cfg: &SimConfig) -> Result<BTreeMap<String, u64>, SimError> {
    Ok(simulate(p, cfg)?.message_counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{fork_join_message, fork_join_program, fork_join_table, pipe_program, pipe_rules};
    use crate::parser::parse_program;

    fn cfg() -> SimConfig {
        SimConfig::default()
    }

    #[test]
    fn pipe_five() {
        let p = parse_program(&pipe_program(5, true)).unwrap();
        let r = simulate(&p, &cfg()).unwrap();
        assert_eq!(r.outcome, Outcome::Terminated);
        assert_eq!(r.var("a", "x"), Some(&Value::Int(5)));
        assert_eq!(r.var("b", "x"), Some(&Value::Int(5)));
        assert!(r.leaks.is_empty(), "{:?}", r.leaks);
    }

    #[test]
    fn pipe_five_with_rules() {
        let p = parse_program(&pipe_program(5, true)).unwrap();
        let c = SimConfig {
            rule_sets: vec![RulePublication {
                step: 0,
                server: 0,
                source: pipe_rules(2),
            }],
            ..cfg()
        };
        let r = simulate(&p, &c).unwrap();
        assert_eq!(r.var("a", "x"), Some(&Value::Int(7)));
        assert_eq!(r.applied_rules.iter().filter(|a| a.rule_id.is_some()).count(), 2);
    }

    #[test]
    fn fork_join_five() {
        let p = parse_program(&fork_join_program(5, true)).unwrap();
        let c = SimConfig {
            functions: fork_join_table(&fork_join_message(5)),
            seed: 3,
            ..cfg()
        };
        let r = simulate(&p, &c).unwrap();
        assert_eq!(r.outcome, Outcome::Terminated);
        assert_eq!(r.buffer, "bcdef");
    }

    #[test]
    fn scopeless_pipe_has_no_scope_traffic() {
        let p = parse_program(&pipe_program(10, false)).unwrap();
        let r = simulate(&p, &cfg()).unwrap();
        assert_eq!(r.count("directive") + r.count("done") + r.count("middleware"), 0);
        assert_eq!(r.var("a", "x"), Some(&Value::Int(10)));
    }

    #[test]
    fn same_seed_same_hash() {
        let p = parse_program(&fork_join_program(5, true)).unwrap();
        let c = SimConfig {
            functions: fork_join_table(&fork_join_message(5)),
            seed: 11,
            ..cfg()
        };
        let a = simulate(&p, &c).unwrap();
        let b = simulate(&p, &c).unwrap();
        assert_eq!(a.trace_hash, b.trace_hash);
    }

    #[test]
    fn exhaustive_small_program() {
        let p = parse_program("preamble { starter: a }\naioc { x@a = 1; { p: a( x ) -> b( y ) | q: a( x ) -> c( z ) }; r: b( y ) -> a( w ) }").unwrap();
        let rep = Simulator::new(&p).unwrap().explore(&cfg()).unwrap();
        assert!(!rep.truncated);
        assert!(rep.terminal >= 1);
        assert!(!rep.found_problem(), "{rep:?}");
    }

    #[test]
    fn misordered_program_is_caught() {
        let p = parse_program("preamble { starter: bob }\naioc { f@bob = 1; g@alice = 1 + bf; proposal: bob( f ) -> alice( bf ) }").unwrap();
        assert!(Simulator::new(&p).is_err());
        let rep = Simulator::new_unchecked(&p).unwrap().explore(&cfg()).unwrap();
        assert!(rep.found_problem());
        assert!(rep.faults > 0);
    }

    #[test]
    fn trace_text_lines() {
        let p = parse_program("preamble { starter: a }\naioc { p: a( 1 ) -> b( y ) }").unwrap();
        let r = simulate(&p, &SimConfig { trace: true, ..cfg() }).unwrap();
        let text = r.trace_text();
        assert!(text.lines().any(|l| l.ends_with("a send p b")), "{text}");
        assert!(text.lines().any(|l| l.ends_with("b recv p a")), "{text}");
    }
}
