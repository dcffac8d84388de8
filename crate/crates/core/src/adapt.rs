//! Adaptation middleware: environment, rule servers, and the manager that
//! answers scope match requests with the first applicable rule.
//!
//! The in-process types ([`Environment`], [`RuleServer`], [`Middleware`])
//! hold all the logic; the TCP services in this module wrap them.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::ast::{roles_of, Expr, Include, NodeId, PropertySet, Role, Rule, Value};
use crate::check::check_rule;
use crate::net::{self, ServiceHandle};
use crate::parser::parse_rules;
use crate::pretty::pretty_print;
use crate::runtime::eval::{eval_with, Lookup, Store};
use crate::runtime::RuntimeError;

/// Default timeout for middleware round trips.
pub const MIDDLEWARE_TIMEOUT: Duration = Duration::from_millis(5000);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MatchRequest {
    pub scope_id: NodeId,
    pub props: PropertySet,
    pub vars: Store,
    pub coordinator: Role,
    pub involved: BTreeSet<Role>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MatchResponse {
    NoMatch,
    Rule {
        rule_id: String,
        body: String,
        includes: Vec<Include>,
    },
}

impl MatchResponse {
    pub fn rule_id(&self) -> Option<&str> {
        match self {
            MatchResponse::NoMatch => None,
            MatchResponse::Rule { rule_id, .. } => Some(rule_id),
        }
    }
}

pub type EnvSnapshot = BTreeMap<String, Value>;

/// Global key-value facts (the `E.*` namespace).
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Environment {
    entries: EnvSnapshot,
}

impl Environment {
    pub fn set(&mut self, key: impl Into<String>, value: Value) {
        self.entries.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        self.entries.clone()
    }
}

struct ConditionScope<'a> {
    props: &'a PropertySet,
    vars: &'a Store,
    env: &'a EnvSnapshot,
}

impl Lookup for ConditionScope<'_> {
    fn var(&self, name: &str) -> Option<Value> {
        self.vars.get(name).cloned()
    }

    fn namespaced(&self, ns: &str, key: &str) -> Option<Value> {
        match ns {
            "N" => self.props.get(key).cloned(),
            "E" => self.env.get(key).cloned(),
            _ => None,
        }
    }
}

/// Rule applicability. Total: absent references, evaluation errors, and
/// non-boolean results all mean `false`.
pub fn evaluate_condition(cond: &Expr, props: &PropertySet, vars: &Store, env: &EnvSnapshot) -> bool {
    let scope = ConditionScope { props, vars, env };
    let mut no_calls = |f: &str, _: Vec<Value>| -> Result<Value, RuntimeError> {
        Err(RuntimeError::External(format!("`{f}` cannot be called from a condition")))
    };
    matches!(eval_with(cond, &scope, "condition", &mut no_calls), Ok(Value::Bool(true)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuleEntry {
    pub id: String,
    pub rule: Rule,
    /// Canonical source of the body, as shipped in match responses.
    pub body_source: String,
    pub published_at: u64,
}

/// A rule repository. Rules are consulted in publication order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RuleServer {
    name: String,
    rules: Vec<RuleEntry>,
    next: u64,
}

impl RuleServer {
    pub fn new(name: impl Into<String>) -> Self {
        RuleServer {
            name: name.into(),
            rules: Vec::new(),
            next: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rules(&self) -> &[RuleEntry] {
        &self.rules
    }

    /// Parses and checks every rule in `source`; stores all of them or none.
    /// Rejections are rendered `line:col: kind: message`.
    pub fn publish(&mut self, source: &str) -> Result<Vec<String>, Vec<String>> {
        let rules = parse_rules(source).map_err(|ds| ds.iter().map(|d| d.to_string()).collect::<Vec<_>>())?;
        let mut problems = Vec::new();
        for rule in &rules {
            for v in check_rule(rule).into_iter().filter(|v| v.is_error()) {
                problems.push(format!("{}:{}: {}: {}", v.pos.line, v.pos.column, v.kind, v.message));
            }
        }
        if !problems.is_empty() {
            return Err(problems);
        }
        let mut ids = Vec::with_capacity(rules.len());
        for rule in rules {
            let id = format!("{}#{}", self.name, self.next);
            self.rules.push(RuleEntry {
                id: id.clone(),
                body_source: pretty_print(&rule.body),
                rule,
                published_at: self.next,
            });
            self.next += 1;
            ids.push(id);
        }
        Ok(ids)
    }

    /// First rule, in publication order, whose condition holds and whose
    /// body stays within the scope's participants.
    pub fn find_match(&self, req: &MatchRequest, env: &EnvSnapshot) -> Option<&RuleEntry> {
        self.rules.iter().find(|e| {
            if !evaluate_condition(&e.rule.condition, &req.props, &req.vars, env) {
                return false;
            }
            let fits = roles_of(&e.rule.body)
                .iter()
                .all(|r| *r == req.coordinator || req.involved.contains(r));
            if !fits {
                log::info!(
                    "skipping rule {} for scope {}: its roles exceed the scope participants",
                    e.id,
                    req.scope_id
                );
            }
            fits
        })
    }

    pub fn answer(&self, req: &MatchRequest, env: &EnvSnapshot) -> MatchResponse {
        match self.find_match(req, env) {
            Some(e) => MatchResponse::Rule {
                rule_id: e.id.clone(),
                body: e.body_source.clone(),
                includes: e.rule.includes.clone(),
            },
            None => MatchResponse::NoMatch,
        }
    }
}

/// In-process manager: environment plus servers in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Middleware {
    pub env: Environment,
    servers: Vec<RuleServer>,
}

impl Middleware {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a server; returns its position in the query order.
    pub fn register(&mut self, server: RuleServer) -> usize {
        self.servers.retain(|s| s.name != server.name);
        self.servers.push(server);
        self.servers.len() - 1
    }

    pub fn servers(&self) -> &[RuleServer] {
        &self.servers
    }

    pub fn server_mut(&mut self, index: usize) -> Option<&mut RuleServer> {
        self.servers.get_mut(index)
    }

    /// First applicable rule over all servers, plus the number of servers
    /// that were queried.
    pub fn match_scope(&self, req: &MatchRequest) -> (MatchResponse, usize) {
        let env = self.env.snapshot();
        for (i, s) in self.servers.iter().enumerate() {
            let resp = s.answer(req, &env);
            if resp != MatchResponse::NoMatch {
                return (resp, i + 1);
            }
        }
        (MatchResponse::NoMatch, self.servers.len())
    }
}

/// Servers known to a manager, in registration order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Registry {
    servers: Vec<(String, String)>,
    next: u64,
}

impl Registry {
    /// Appends `address`; a known address moves to the tail. Returns the id.
    pub fn register(&mut self, address: &str) -> String {
        self.servers.retain(|(_, a)| a != address);
        let id = format!("s{}", self.next);
        self.next += 1;
        self.servers.push((id.clone(), address.to_string()));
        id
    }

    pub fn deregister(&mut self, address: &str) {
        self.servers.retain(|(_, a)| a != address);
    }

    pub fn position(&self, address: &str) -> Option<usize> {
        self.servers.iter().position(|(_, a)| a == address)
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.servers
    }
}

/// Requests understood by the manager and the servers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum Request {
    Register {
        address: String,
    },
    Publish {
        source: String,
    },
    MatchReq(MatchRequest),
    /// Manager to server: a match request plus the environment snapshot.
    Query {
        #[serde(flatten)]
        request: MatchRequest,
        env: EnvSnapshot,
    },
    EnvSet {
        key: String,
        value: Value,
    },
    EnvGet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum Response {
    #[serde(rename_all = "camelCase")]
    Registered { server_id: String, position: usize },
    #[serde(rename_all = "camelCase")]
    Published { rule_ids: Vec<String> },
    Rejected { diagnostics: Vec<String> },
    #[serde(rename_all = "camelCase")]
    MatchResp {
        #[serde(rename = "match")]
        matched: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rule_id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        body: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        includes: Option<Vec<Include>>,
    },
    EnvSnapshot { entries: EnvSnapshot },
    Ok,
    Error { message: String },
}

impl From<MatchResponse> for Response {
    fn from(m: MatchResponse) -> Self {
        match m {
            MatchResponse::NoMatch => Response::MatchResp {
                matched: false,
                rule_id: None,
                body: None,
                includes: None,
            },
            MatchResponse::Rule { rule_id, body, includes } => Response::MatchResp {
                matched: true,
                rule_id: Some(rule_id),
                body: Some(body),
                includes: Some(includes),
            },
        }
    }
}

impl Response {
    fn into_match(self) -> Option<MatchResponse> {
        match self {
            Response::MatchResp {
                matched: true,
                rule_id: Some(rule_id),
                body: Some(body),
                includes,
            } => Some(MatchResponse::Rule {
                rule_id,
                body,
                includes: includes.unwrap_or_default(),
            }),
            Response::MatchResp { matched: false, .. } => Some(MatchResponse::NoMatch),
            _ => None,
        }
    }
}

fn rpc(address: &str, req: &Request) -> std::io::Result<Response> {
    net::request(address, req, MIDDLEWARE_TIMEOUT)
}

/// Client side of the manager protocol.
#[derive(Clone, Debug)]
pub struct ManagerClient {
    pub address: String,
}

impl ManagerClient {
    pub fn new(address: impl Into<String>) -> Self {
        ManagerClient {
            address: address.into(),
        }
    }

    pub fn match_scope(&self, req: &MatchRequest) -> std::io::Result<MatchResponse> {
        let resp = rpc(&self.address, &Request::MatchReq(req.clone()))?;
        resp.into_match()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "unexpected reply to matchReq"))
    }

    pub fn env_set(&self, key: &str, value: Value) -> std::io::Result<()> {
        match rpc(
            &self.address,
            &Request::EnvSet {
                key: key.to_string(),
                value,
            },
        )? {
            Response::Ok => Ok(()),
            other => Err(std::io::Error::other(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn env_get(&self) -> std::io::Result<EnvSnapshot> {
        match rpc(&self.address, &Request::EnvGet)? {
            Response::EnvSnapshot { entries } => Ok(entries),
            other => Err(std::io::Error::other(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn register(&self, server_address: &str) -> std::io::Result<Response> {
        rpc(
            &self.address,
            &Request::Register {
                address: server_address.to_string(),
            },
        )
    }
}

/// Publishes rule source on a running server.
pub fn publish_remote(server: &str, source: &str) -> std::io::Result<Result<Vec<String>, Vec<String>>> {
    match rpc(
        server,
        &Request::Publish {
            source: source.to_string(),
        },
    )? {
        Response::Published { rule_ids } => Ok(Ok(rule_ids)),
        Response::Rejected { diagnostics } => Ok(Err(diagnostics)),
        other => Err(std::io::Error::other(format!("unexpected reply {other:?}"))),
    }
}

struct ManagerState {
    registry: Registry,
    env: Environment,
}

/// Starts a manager (with its embedded environment) listening on `bind`.
pub fn spawn_manager(bind: &str) -> std::io::Result<ServiceHandle> {
    let state = Arc::new(Mutex::new(ManagerState {
        registry: Registry::default(),
        env: Environment::default(),
    }));
    net::serve_lines(bind, move |req: Result<Request, String>| {
        let req = match req {
            Ok(r) => r,
            Err(e) => return Response::Error { message: e },
        };
        match req {
            Request::Register { address } => {
                if let Err(e) = net::connect(&address, Duration::from_millis(1000)) {
                    return Response::Error {
                        message: format!("server `{address}` unreachable: {e}"),
                    };
                }
                let mut st = state.lock().unwrap();
                let server_id = st.registry.register(&address);
                let position = st.registry.position(&address).unwrap_or(0);
                log::info!("registered adaptation server {server_id} at {address} (position {position})");
                Response::Registered { server_id, position }
            }
            Request::MatchReq(request) => {
                // One consistent view for the whole evaluation.
                let (servers, env) = {
                    let st = state.lock().unwrap();
                    (st.registry.entries().to_vec(), st.env.snapshot())
                };
                for (id, address) in servers {
                    let query = Request::Query {
                        request: request.clone(),
                        env: env.clone(),
                    };
                    match rpc(&address, &query).map(Response::into_match) {
                        Ok(Some(MatchResponse::NoMatch)) => {}
                        Ok(Some(found)) => return found.into(),
                        Ok(None) => log::warn!("server {id} sent a malformed reply; skipped"),
                        Err(e) => log::warn!("server {id} at {address} unreachable ({e}); skipped"),
                    }
                }
                MatchResponse::NoMatch.into()
            }
            Request::EnvSet { key, value } => {
                state.lock().unwrap().env.set(key, value);
                Response::Ok
            }
            Request::EnvGet => Response::EnvSnapshot {
                entries: state.lock().unwrap().env.snapshot(),
            },
            other => Response::Error {
                message: format!("the manager does not handle {other:?}"),
            },
        }
    })
}

/// Starts a rule server on `bind` and registers it with `manager`.
pub fn spawn_server(bind: &str, manager: Option<&str>, initial_rules: Option<&str>) -> std::io::Result<ServiceHandle> {
    let mut server = RuleServer::new(bind.to_string());
    if let Some(src) = initial_rules {
        server
            .publish(src)
            .map_err(|d| std::io::Error::new(std::io::ErrorKind::InvalidInput, d.join("\n")))?;
    }
    let server = Arc::new(Mutex::new(server));
    let handle = net::serve_lines(bind, move |req: Result<Request, String>| match req {
        Ok(Request::Publish { source }) => match server.lock().unwrap().publish(&source) {
            Ok(rule_ids) => Response::Published { rule_ids },
            Err(diagnostics) => Response::Rejected { diagnostics },
        },
        Ok(Request::Query { request, env }) => server.lock().unwrap().answer(&request, &env).into(),
        Ok(other) => Response::Error {
            message: format!("a server does not handle {other:?}"),
        },
        Err(e) => Response::Error { message: e },
    })?;
    if let Some(m) = manager {
        let own = handle.addr().to_string();
        match ManagerClient::new(m).register(&own)? {
            Response::Registered { .. } => {}
            other => return Err(std::io::Error::other(format!("registration refused: {other:?}"))),
        }
    }
    Ok(handle)
}
