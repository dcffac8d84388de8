//! Threaded execution of projected roles, in one process or over TCP.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::adapt::{ManagerClient, MatchRequest, MatchResponse, Middleware};
use crate::ast::{Include, Role, Value};
use crate::harness::{CallResponse, FunctionTable, TIMER_FUNCTIONS};
use crate::net;
use crate::project::ProjectedApp;

use super::eval::Store;
use super::machine::{Effects, RoleMachine, TraceEvent};
use super::message::Message;
use super::{InputScript, RuntimeError};

/// Timeout for calls to external function services.
pub const EXTERNAL_TIMEOUT: Duration = Duration::from_millis(5000);

const ROLE_STACK: usize = 16 << 20;
const POLL: Duration = Duration::from_millis(50);

/// Where scope match requests go.
#[derive(Clone, Debug, Default)]
pub enum ManagerLink {
    /// Every scope runs its default body.
    #[default]
    None,
    InProcess(Arc<Mutex<Middleware>>),
    Remote(String),
}

impl ManagerLink {
    fn match_scope(&self, req: &MatchRequest) -> MatchResponse {
        match self {
            ManagerLink::None => MatchResponse::NoMatch,
            ManagerLink::InProcess(m) => m.lock().unwrap().match_scope(req).0,
            ManagerLink::Remote(addr) => match ManagerClient::new(addr.clone()).match_scope(req) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("manager at {addr} unreachable ({e}); scope {} keeps its default", req.scope_id);
                    MatchResponse::NoMatch
                }
            },
        }
    }
}

/// Where external functions are evaluated.
#[derive(Clone, Debug)]
pub enum ExternalLink {
    /// A shared in-process stub table.
    Table(Arc<Mutex<FunctionTable>>),
    /// Function services reached over TCP, at their declared addresses
    /// unless `override_address` is set.
    Remote { override_address: Option<String> },
}

impl Default for ExternalLink {
    fn default() -> Self {
        ExternalLink::Table(Arc::new(Mutex::new(FunctionTable::new().with_timers())))
    }
}

#[derive(Serialize)]
struct CallRequest<'a> {
    kind: &'static str,
    #[serde(rename = "fn")]
    function: &'a str,
    args: &'a [Value],
}

/// Calls `function` at a function service.
pub fn call_remote(address: &str, function: &str, args: &[Value]) -> Result<Value, RuntimeError> {
    let req = CallRequest {
        kind: "call",
        function,
        args,
    };
    match net::request(address, &req, EXTERNAL_TIMEOUT) {
        Ok(CallResponse::Result { value }) => Ok(value),
        Ok(CallResponse::Error { message }) => Err(RuntimeError::External(format!("`{function}`: {message}"))),
        Err(e) => Err(RuntimeError::External(format!("`{function}` at {address}: {e}"))),
    }
}

/// How `getInput` is answered.
#[derive(Clone, Debug, Default)]
pub enum InputSource {
    /// Prompt on stderr, read a line from stdin.
    #[default]
    Console,
    Script(InputScript),
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub manager: ManagerLink,
    pub external: ExternalLink,
    pub input: InputSource,
    /// A role that sees no message for this long gives up.
    pub idle_timeout: Duration,
    pub trace: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            manager: ManagerLink::None,
            external: ExternalLink::default(),
            input: InputSource::Console,
            idle_timeout: Duration::from_secs(30),
            trace: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleOutcome {
    pub role: Role,
    pub vars: Store,
    pub misdeliveries: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceEvent>,
}

/// Outgoing side of a role's connections.
trait Outbox: Send {
    fn send(&mut self, msg: &Message) -> Result<(), RuntimeError>;
    fn learn(&mut self, _addresses: &BTreeMap<String, String>) {}
    fn local_address(&self) -> Option<String> {
        None
    }
}

struct ChannelOutbox {
    peers: BTreeMap<String, Sender<Message>>,
}

impl Outbox for ChannelOutbox {
    fn send(&mut self, msg: &Message) -> Result<(), RuntimeError> {
        let tx = self
            .peers
            .get(&msg.to)
            .ok_or_else(|| RuntimeError::Transport(format!("no role `{}`", msg.to)))?;
        tx.send(msg.clone())
            .map_err(|_| RuntimeError::Transport(format!("role `{}` has stopped", msg.to)))
    }
}

/// TCP endpoint of one role: a listener feeding the inbox plus lazily
/// opened connections to peers, one per destination so per-pair order
/// is preserved.
pub struct TcpTransport {
    address: String,
    peers: BTreeMap<String, String>,
    streams: BTreeMap<String, TcpStream>,
    connect_timeout: Duration,
}

impl TcpTransport {
    /// Binds `listen` and starts forwarding received messages to the
    /// returned receiver. `peers` maps role names to addresses; missing
    /// entries are learned during the readiness barrier.
    pub fn bind(listen: &str, peers: BTreeMap<String, String>) -> std::io::Result<(TcpTransport, Receiver<Message>)> {
        let listener = TcpListener::bind(net::strip_scheme(listen))?;
        let address = listener.local_addr()?.to_string();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let tx = tx.clone();
                thread::spawn(move || {
                    for line in BufReader::new(stream).lines() {
                        let Ok(line) = line else { break };
                        if line.trim().is_empty() {
                            continue;
                        }
                        match serde_json::from_str::<Message>(&line) {
                            Ok(m) => {
                                if tx.send(m).is_err() {
                                    break;
                                }
                            }
                            Err(e) => log::warn!("dropping malformed message: {e}"),
                        }
                    }
                });
            }
        });
        Ok((
            TcpTransport {
                address,
                peers,
                streams: BTreeMap::new(),
                connect_timeout: Duration::from_secs(30),
            },
            rx,
        ))
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    fn stream(&mut self, role: &str) -> Result<&mut TcpStream, RuntimeError> {
        if !self.streams.contains_key(role) {
            let addr = self
                .peers
                .get(role)
                .ok_or_else(|| RuntimeError::Transport(format!("no address known for role `{role}`")))?
                .clone();
            // Peers may still be starting up.
            let deadline = Instant::now() + self.connect_timeout;
            let stream = loop {
                match net::connect(&addr, Duration::from_millis(500)) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() >= deadline => {
                        return Err(RuntimeError::Transport(format!("cannot reach `{role}` at {addr}: {e}")))
                    }
                    Err(_) => thread::sleep(Duration::from_millis(100)),
                }
            };
            let _ = stream.set_nodelay(true);
            self.streams.insert(role.to_string(), stream);
        }
        Ok(self.streams.get_mut(role).expect("just inserted"))
    }
}

impl Outbox for TcpTransport {
    fn send(&mut self, msg: &Message) -> Result<(), RuntimeError> {
        let to = msg.to.clone();
        let stream = self.stream(&to)?;
        if let Err(e) = net::write_line(stream, msg).and_then(|_| stream.flush()) {
            self.streams.remove(&to);
            return Err(RuntimeError::Transport(format!("sending to `{to}`: {e}")));
        }
        Ok(())
    }

    fn learn(&mut self, addresses: &BTreeMap<String, String>) {
        for (role, addr) in addresses {
            self.peers.entry(role.clone()).or_insert_with(|| addr.clone());
        }
    }

    fn local_address(&self) -> Option<String> {
        Some(self.address.clone())
    }
}

struct DriverEffects<'a> {
    outbox: &'a mut dyn Outbox,
    manager: ManagerLink,
    external: ExternalLink,
    routes: BTreeMap<String, String>,
    input: VecDeque<String>,
    console: bool,
    trace: Option<Vec<TraceEvent>>,
}

impl Effects for DriverEffects<'_> {
    fn transmit(&mut self, msg: Message) -> Result<(), RuntimeError> {
        self.outbox.send(&msg)
    }

    fn call_external(&mut self, _role: &Role, function: &str, args: Vec<Value>) -> Result<Value, RuntimeError> {
        match &self.external {
            ExternalLink::Table(t) => t.lock().unwrap().call(function, &args).map_err(RuntimeError::External),
            ExternalLink::Remote { override_address } => {
                let addr = override_address.as_ref().or_else(|| self.routes.get(function));
                match addr {
                    Some(addr) => call_remote(addr, function, &args),
                    // Timers are local bookkeeping; no service needed.
                    None if TIMER_FUNCTIONS.contains(&function) => Ok(Value::Int(0)),
                    None => Err(RuntimeError::External(format!("no service declares `{function}`"))),
                }
            }
        }
    }

    fn get_input(&mut self, role: &Role, prompt: &str) -> Result<Value, RuntimeError> {
        if self.console {
            eprint!("[{role}] {prompt}");
            let _ = std::io::stderr().flush();
            let mut line = String::new();
            let n = std::io::stdin()
                .read_line(&mut line)
                .map_err(|e| RuntimeError::Input(e.to_string()))?;
            if n == 0 {
                return Err(RuntimeError::Input("end of input".into()));
            }
            Ok(Value::Str(line.trim_end_matches(['\r', '\n']).to_string()))
        } else {
            self.input
                .pop_front()
                .map(Value::Str)
                .ok_or_else(|| RuntimeError::Input(format!("no scripted input left for `{role}` (prompt {prompt:?})")))
        }
    }

    fn match_scope(&mut self, req: &MatchRequest) -> MatchResponse {
        self.manager.match_scope(req)
    }

    fn learn_includes(&mut self, includes: &[Include]) {
        add_routes(&mut self.routes, includes);
    }

    fn learn_addresses(&mut self, addresses: &BTreeMap<String, String>) {
        self.outbox.learn(addresses);
    }

    fn local_address(&self) -> Option<String> {
        self.outbox.local_address()
    }

    fn observe(&mut self, event: TraceEvent) {
        if let Some(t) = &mut self.trace {
            t.push(event);
        }
    }
}

fn add_routes(routes: &mut BTreeMap<String, String>, includes: &[Include]) {
    for inc in includes {
        for f in &inc.functions {
            routes.insert(f.clone(), inc.address.clone());
        }
    }
}

fn drive(
    machine: &mut RoleMachine,
    fx: &mut DriverEffects<'_>,
    inbox: &Receiver<Message>,
    idle: Duration,
    abort: Option<&AtomicBool>,
) -> Result<(), RuntimeError> {
    let mut quiet_since = Instant::now();
    loop {
        machine.run_until_blocked(fx)?;
        if machine.is_terminated() {
            return Ok(());
        }
        match inbox.recv_timeout(POLL) {
            Ok(m) => {
                machine.deliver(m);
                while let Ok(m) = inbox.try_recv() {
                    machine.deliver(m);
                }
                quiet_since = Instant::now();
            }
            Err(RecvTimeoutError::Timeout) => {
                if abort.is_some_and(|a| a.load(Ordering::Relaxed)) {
                    return Err(RuntimeError::Transport("another role failed".into()));
                }
                if quiet_since.elapsed() >= idle {
                    return Err(RuntimeError::Transport(format!(
                        "`{}` received nothing for {} ms",
                        machine.role(),
                        idle.as_millis()
                    )));
                }
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(RuntimeError::Transport("inbox closed".into()));
            }
        }
    }
}

fn script_for(input: &InputSource, role: &Role) -> (VecDeque<String>, bool) {
    match input {
        InputSource::Console => (VecDeque::new(), true),
        InputSource::Script(s) => (s.get(role.as_str()).cloned().unwrap_or_default(), false),
    }
}

fn run_one(
    app: &ProjectedApp,
    role: &Role,
    outbox: &mut dyn Outbox,
    inbox: &Receiver<Message>,
    opts: &RunOptions,
    abort: Option<&AtomicBool>,
) -> Result<RoleOutcome, RuntimeError> {
    let code = app
        .per_role
        .get(role)
        .ok_or_else(|| RuntimeError::Protocol(format!("role `{role}` does not occur in the program")))?;
    let roles: BTreeSet<Role> = app.per_role.keys().cloned().collect();
    let mut machine = RoleMachine::new(role.clone(), code, &app.starter, &roles);
    let (input, console) = script_for(&opts.input, role);
    let mut routes = BTreeMap::new();
    add_routes(&mut routes, &app.includes);
    let mut fx = DriverEffects {
        outbox,
        manager: opts.manager.clone(),
        external: opts.external.clone(),
        routes,
        input,
        console,
        trace: opts.trace.then(Vec::new),
    };
    drive(&mut machine, &mut fx, inbox, opts.idle_timeout, abort)?;
    Ok(RoleOutcome {
        role: role.clone(),
        vars: machine.vars().clone(),
        misdeliveries: machine.misdeliveries(),
        trace: fx.trace.unwrap_or_default(),
    })
}

/// Runs one role of `app` over TCP until it terminates.
pub fn run_role(app: &ProjectedApp, role: &Role, transport: TcpTransport, inbox: Receiver<Message>, opts: &RunOptions) -> Result<RoleOutcome, RuntimeError> {
    let mut transport = transport;
    run_one(app, role, &mut transport, &inbox, opts, None)
}

/// Runs every role of `app` on its own thread, connected by in-process
/// channels. Fails with the first role error.
pub fn run_all(app: &ProjectedApp, opts: &RunOptions) -> Result<Vec<RoleOutcome>, RuntimeError> {
    let mut senders = BTreeMap::new();
    let mut receivers = BTreeMap::new();
    for role in app.per_role.keys() {
        let (tx, rx) = mpsc::channel();
        senders.insert(role.0.clone(), tx);
        receivers.insert(role.clone(), rx);
    }
    let abort = Arc::new(AtomicBool::new(false));
    let mut handles = Vec::new();
    for (role, rx) in receivers {
        let app = app.clone();
        let opts = opts.clone();
        let abort = abort.clone();
        let mut outbox = ChannelOutbox { peers: senders.clone() };
        let h = thread::Builder::new()
            .name(format!("role-{role}"))
            .stack_size(ROLE_STACK)
            .spawn(move || {
                let r = run_one(&app, &role, &mut outbox, &rx, &opts, Some(&abort));
                if r.is_err() {
                    abort.store(true, Ordering::Relaxed);
                }
                r
            })
            .map_err(|e| RuntimeError::Transport(format!("cannot spawn role thread: {e}")))?;
        handles.push(h);
    }
    drop(senders);
    let mut outcomes = Vec::new();
    let mut first_error: Option<RuntimeError> = None;
    for h in handles {
        match h.join() {
            Ok(Ok(o)) => outcomes.push(o),
            Ok(Err(e)) => {
                // A genuine failure beats the "another role failed" echoes.
                let echo = matches!(&e, RuntimeError::Transport(m) if m == "another role failed");
                if first_error.is_none() || (!echo && matches!(&first_error, Some(RuntimeError::Transport(m)) if m == "another role failed")) {
                    first_error = Some(e);
                }
            }
            Err(_) => first_error = first_error.or(Some(RuntimeError::Protocol("role thread panicked".into()))),
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(outcomes),
    }
}
