//! Small-step interpreter for one role.
//!
//! A role runs as a set of cooperative tasks (one per live `|` branch), each
//! a stack of frames. [`RoleMachine::step`] executes the top frame of one
//! enabled task; purely administrative frames (sequencing, spawning parallel
//! branches, joining, arming a receive) are reduced eagerly and never count
//! as steps. The same machine backs the threaded runtime and the simulator.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapt::{MatchRequest, MatchResponse};
use crate::ast::{roles_of, Expr, Include, NodeId, PropertySet, Role, Value, GET_INPUT};
use crate::parser::parse_behaviour;
use crate::project::{project_rule_body, ProcessCode};

use super::eval::{eval_with, Store};
use super::message::{Mailbox, Message, MessageKind};
use super::RuntimeError;

/// Side effects a role needs from its host.
pub trait Effects {
    fn transmit(&mut self, msg: Message) -> Result<(), RuntimeError>;
    fn call_external(&mut self, role: &Role, function: &str, args: Vec<Value>) -> Result<Value, RuntimeError>;
    fn get_input(&mut self, role: &Role, prompt: &str) -> Result<Value, RuntimeError>;
    fn match_scope(&mut self, req: &MatchRequest) -> MatchResponse;
    /// Functions declared by an applied rule become callable.
    fn learn_includes(&mut self, _includes: &[Include]) {}
    /// Role addresses learned during the readiness barrier.
    fn learn_addresses(&mut self, _addresses: &BTreeMap<String, String>) {}
    /// Address advertised in `ready`.
    fn local_address(&self) -> Option<String> {
        None
    }
    fn observe(&mut self, _event: TraceEvent) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Assign,
    Call,
    Send,
    Recv,
    Ack,
    Guard,
    Match,
    Misdelivery,
    Fault,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceEvent {
    pub role: String,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<MessageKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl TraceEvent {
    fn new(role: &Role, action: Action) -> Self {
        TraceEvent {
            role: role.0.clone(),
            action,
            kind: None,
            op: None,
            peer: None,
            node: None,
            detail: None,
        }
    }
}

/// Executable form of [`ProcessCode`], shared between frames.
#[derive(Debug, Hash)]
enum Instr {
    Nop,
    Assign {
        var: String,
        expr: Expr,
        node: NodeId,
    },
    Call {
        function: String,
        args: Vec<Expr>,
        var: String,
        node: NodeId,
    },
    Send {
        op: String,
        peer: Role,
        expr: Expr,
        node: NodeId,
    },
    Recv {
        op: String,
        peer: Role,
        var: String,
        node: NodeId,
    },
    Seq(Vec<NodeRef>),
    Par(Vec<NodeRef>),
    IfLocal {
        guard: Expr,
        involved: Vec<Role>,
        aux_op: String,
        then_i: NodeRef,
        else_i: NodeRef,
        node: NodeId,
    },
    IfFollow {
        aux_op: String,
        evaluator: Role,
        then_i: NodeRef,
        else_i: NodeRef,
    },
    WhileLocal {
        guard: Expr,
        involved: Vec<Role>,
        guard_op: String,
        ack_op: String,
        body: NodeRef,
        node: NodeId,
    },
    WhileFollow {
        guard_op: String,
        ack_op: String,
        evaluator: Role,
        body: NodeRef,
    },
    ScopeCoord {
        scope_id: NodeId,
        props: PropertySet,
        involved: Vec<Role>,
        directive_op: String,
        done_op: String,
        default_i: NodeRef,
    },
    ScopeFollow {
        scope_id: NodeId,
        coordinator: Role,
        directive_op: String,
        done_op: String,
        default_i: NodeRef,
    },
}

/// An instruction with its structural hash, used for state fingerprints.
#[derive(Debug)]
struct Node {
    hash: u64,
    instr: Instr,
}

#[derive(Clone, Debug)]
struct NodeRef(Arc<Node>);

impl Hash for NodeRef {
    fn hash<H: Hasher>(&self, h: &mut H) {
        self.0.hash.hash(h);
    }
}

impl std::ops::Deref for NodeRef {
    type Target = Instr;
    fn deref(&self) -> &Instr {
        &self.0.instr
    }
}

impl NodeRef {
    fn new(instr: Instr) -> Self {
        let mut h = DefaultHasher::new();
        instr.hash(&mut h);
        NodeRef(Arc::new(Node {
            hash: h.finish(),
            instr,
        }))
    }

    fn from_code(code: &ProcessCode) -> Self {
        let c = |p: &ProcessCode| NodeRef::from_code(p);
        let instr = match code {
            ProcessCode::Nop => Instr::Nop,
            ProcessCode::LocalAssign { var, expr, node } => Instr::Assign {
                var: var.clone(),
                expr: expr.clone(),
                node: node.clone(),
            },
            ProcessCode::CallExternal {
                function,
                args,
                var,
                node,
            } => Instr::Call {
                function: function.clone(),
                args: args.clone(),
                var: var.clone(),
                node: node.clone(),
            },
            ProcessCode::SendTo { op, peer, expr, node } => Instr::Send {
                op: op.clone(),
                peer: peer.clone(),
                expr: expr.clone(),
                node: node.clone(),
            },
            ProcessCode::RecvFrom { op, peer, var, node } => Instr::Recv {
                op: op.clone(),
                peer: peer.clone(),
                var: var.clone(),
                node: node.clone(),
            },
            ProcessCode::SeqP { items } => Instr::Seq(items.iter().map(c).collect()),
            ProcessCode::ParP { branches } => Instr::Par(branches.iter().map(c).collect()),
            ProcessCode::IfLocal {
                guard,
                involved,
                aux_op,
                then_p,
                else_p,
                node,
            } => Instr::IfLocal {
                guard: guard.clone(),
                involved: involved.iter().cloned().collect(),
                aux_op: aux_op.clone(),
                then_i: c(then_p),
                else_i: c(else_p),
                node: node.clone(),
            },
            ProcessCode::IfFollow {
                aux_op,
                evaluator,
                then_p,
                else_p,
            } => Instr::IfFollow {
                aux_op: aux_op.clone(),
                evaluator: evaluator.clone(),
                then_i: c(then_p),
                else_i: c(else_p),
            },
            ProcessCode::WhileLocal {
                guard,
                involved,
                guard_op,
                ack_op,
                body,
                node,
            } => Instr::WhileLocal {
                guard: guard.clone(),
                involved: involved.iter().cloned().collect(),
                guard_op: guard_op.clone(),
                ack_op: ack_op.clone(),
                body: c(body),
                node: node.clone(),
            },
            ProcessCode::WhileFollow {
                guard_op,
                ack_op,
                evaluator,
                body,
            } => Instr::WhileFollow {
                guard_op: guard_op.clone(),
                ack_op: ack_op.clone(),
                evaluator: evaluator.clone(),
                body: c(body),
            },
            ProcessCode::ScopeCoord {
                scope_id,
                props,
                involved,
                directive_op,
                done_op,
                default_p,
                ..
            } => Instr::ScopeCoord {
                scope_id: scope_id.clone(),
                props: props.clone(),
                involved: involved.iter().cloned().collect(),
                directive_op: directive_op.clone(),
                done_op: done_op.clone(),
                default_i: c(default_p),
            },
            ProcessCode::ScopeFollow {
                scope_id,
                coordinator,
                directive_op,
                done_op,
                default_p,
            } => Instr::ScopeFollow {
                scope_id: scope_id.clone(),
                coordinator: coordinator.clone(),
                directive_op: directive_op.clone(),
                done_op: done_op.clone(),
                default_i: c(default_p),
            },
        };
        NodeRef::new(instr)
    }

    fn node_id(&self) -> Option<NodeId> {
        match &**self {
            Instr::Assign { node, .. }
            | Instr::Call { node, .. }
            | Instr::Send { node, .. }
            | Instr::IfLocal { node, .. }
            | Instr::WhileLocal { node, .. } => Some(node.clone()),
            Instr::ScopeCoord { scope_id, .. } => Some(scope_id.clone()),
            _ => None,
        }
    }

    /// Reduced by `settle` rather than by a scheduled step.
    fn is_administrative(&self) -> bool {
        matches!(
            **self,
            Instr::Nop
                | Instr::Seq(_)
                | Instr::Par(_)
                | Instr::Recv { .. }
                | Instr::IfFollow { .. }
                | Instr::WhileFollow { .. }
                | Instr::ScopeFollow { .. }
        )
    }
}

#[derive(Clone, Debug, Hash)]
enum OnReceive {
    Bind { var: String, node: NodeId },
    Branch { then_i: NodeRef, else_i: NodeRef },
    /// Guard of a `while` at a follower; carries the loop instruction.
    LoopGuard(NodeRef),
    /// Scope directive at a follower; carries the scope instruction.
    Directive(NodeRef),
    Discard,
    Ready,
    Start,
}

#[derive(Clone, Debug)]
enum Frame {
    Exec(NodeRef),
    Seq {
        node: NodeRef,
        next: usize,
    },
    Join {
        pending: usize,
    },
    Send {
        kind: MessageKind,
        op: String,
        peer: Role,
        data: serde_json::Value,
        origin: Option<String>,
    },
    AwaitAck {
        op: String,
        peer: Role,
        seq: u64,
    },
    Await {
        kind: MessageKind,
        op: String,
        peer: Role,
        then: OnReceive,
    },
}

impl Frame {
    fn fingerprint<H: Hasher>(&self, h: &mut H) {
        std::mem::discriminant(self).hash(h);
        match self {
            Frame::Exec(n) => n.hash(h),
            Frame::Seq { node, next } => (node, next).hash(h),
            Frame::Join { pending } => pending.hash(h),
            Frame::Send {
                kind,
                op,
                peer,
                data,
                origin,
            } => {
                (kind, op, peer, origin).hash(h);
                data.to_string().hash(h);
            }
            Frame::AwaitAck { op, peer, seq } => (op, peer, seq).hash(h),
            Frame::Await { kind, op, peer, then } => (kind, op, peer, then).hash(h),
        }
    }
}

#[derive(Clone, Debug)]
struct Task {
    frames: Vec<Frame>,
    parent: Option<u32>,
}

/// Execution state of one role.
#[derive(Clone, Debug)]
pub struct RoleMachine {
    role: Role,
    vars: Store,
    tasks: BTreeMap<u32, Task>,
    next_task: u32,
    seq: u64,
    mailbox: Mailbox,
    fault: Option<RuntimeError>,
    misdeliveries: u32,
    addresses: BTreeMap<String, String>,
}

const READY_OP: &str = "";

impl RoleMachine {
    /// A machine that first takes part in the readiness barrier among
    /// `roles`, then runs `code`.
    pub fn new(role: Role, code: &ProcessCode, starter: &Role, roles: &BTreeSet<Role>) -> Self {
        let mut frames = vec![Frame::Exec(NodeRef::from_code(code))];
        let others: Vec<&Role> = roles.iter().filter(|r| **r != role).collect();
        if role == *starter {
            for r in others.iter().rev() {
                frames.push(Frame::Send {
                    kind: MessageKind::Start,
                    op: READY_OP.into(),
                    peer: (*r).clone(),
                    data: serde_json::Value::Null,
                    origin: None,
                });
            }
            for r in others.iter().rev() {
                frames.push(Frame::Await {
                    kind: MessageKind::Ready,
                    op: READY_OP.into(),
                    peer: (*r).clone(),
                    then: OnReceive::Ready,
                });
            }
        } else if roles.contains(starter) {
            frames.push(Frame::Await {
                kind: MessageKind::Start,
                op: READY_OP.into(),
                peer: starter.clone(),
                then: OnReceive::Start,
            });
            frames.push(Frame::Send {
                kind: MessageKind::Ready,
                op: READY_OP.into(),
                peer: starter.clone(),
                data: serde_json::Value::Null,
                origin: None,
            });
        }
        let mut m = RoleMachine {
            role,
            vars: Store::new(),
            tasks: BTreeMap::from([(0, Task { frames, parent: None })]),
            next_task: 1,
            seq: 0,
            mailbox: Mailbox::default(),
            fault: None,
            misdeliveries: 0,
            addresses: BTreeMap::new(),
        };
        m.settle();
        m
    }

    pub fn role(&self) -> &Role {
        &self.role
    }

    pub fn vars(&self) -> &Store {
        &self.vars
    }

    pub fn mailbox(&self) -> &Mailbox {
        &self.mailbox
    }

    pub fn fault(&self) -> Option<&RuntimeError> {
        self.fault.as_ref()
    }

    pub fn misdeliveries(&self) -> u32 {
        self.misdeliveries
    }

    pub fn is_terminated(&self) -> bool {
        self.fault.is_none() && self.tasks.is_empty()
    }

    pub fn deliver(&mut self, msg: Message) {
        self.mailbox.deliver(msg);
    }

    /// Tasks whose next step can run now.
    pub fn enabled_tasks(&self) -> Vec<u32> {
        if self.fault.is_some() {
            return Vec::new();
        }
        self.tasks
            .iter()
            .filter(|(_, t)| t.frames.last().is_some_and(|f| self.is_enabled(f)))
            .map(|(id, _)| *id)
            .collect()
    }

    fn is_enabled(&self, f: &Frame) -> bool {
        match f {
            Frame::Exec(n) => !n.is_administrative(),
            Frame::Send { .. } => true,
            Frame::AwaitAck { op, peer, seq } => self.mailbox.has_ack(op, peer.as_str(), *seq),
            Frame::Await { kind, op, peer, .. } => self.mailbox.has(*kind, op, peer.as_str()),
            Frame::Seq { .. } | Frame::Join { .. } => false,
        }
    }

    /// Hash of the whole role state, for visited-set bookkeeping.
    pub fn fingerprint<H: Hasher>(&self, h: &mut H) {
        self.role.hash(h);
        self.vars.hash(h);
        self.seq.hash(h);
        self.misdeliveries.hash(h);
        self.fault.is_some().hash(h);
        self.tasks.len().hash(h);
        for (id, t) in &self.tasks {
            (id, t.parent, t.frames.len()).hash(h);
            for f in &t.frames {
                f.fingerprint(h);
            }
        }
        self.mailbox.fingerprint(h);
    }

    /// Runs one step of `task`. On error the machine is faulted for good.
    pub fn step(&mut self, task: u32, fx: &mut dyn Effects) -> Result<(), RuntimeError> {
        if let Some(f) = &self.fault {
            return Err(f.clone());
        }
        let enabled = self
            .tasks
            .get(&task)
            .and_then(|t| t.frames.last())
            .is_some_and(|f| self.is_enabled(f));
        if !enabled {
            return Err(RuntimeError::Protocol(format!("task {task} of `{}` is not enabled", self.role)));
        }
        let frame = self.tasks.get_mut(&task).and_then(|t| t.frames.pop()).expect("enabled task has a frame");
        let at = match &frame {
            Frame::Exec(n) => n.node_id(),
            _ => None,
        };
        match self.exec(task, frame, fx) {
            Ok(()) => {
                self.settle();
                Ok(())
            }
            Err(e) => {
                let mut ev = TraceEvent::new(&self.role, Action::Fault);
                ev.node = at;
                ev.detail = Some(e.to_string());
                fx.observe(ev);
                self.fault = Some(e.clone());
                Err(e)
            }
        }
    }

    /// Steps enabled tasks in id order until none is enabled. Returns
    /// whether any step ran.
    pub fn run_until_blocked(&mut self, fx: &mut dyn Effects) -> Result<bool, RuntimeError> {
        let mut progressed = false;
        loop {
            let enabled = self.enabled_tasks();
            let Some(&task) = enabled.first() else {
                return Ok(progressed);
            };
            self.step(task, fx)?;
            progressed = true;
        }
    }

    fn push(&mut self, task: u32, frame: Frame) {
        self.tasks.get_mut(&task).expect("live task").frames.push(frame);
    }

    fn eval(&self, e: &Expr, fx: &mut dyn Effects) -> Result<Value, RuntimeError> {
        let role = self.role.clone();
        eval_with(e, &self.vars, role.as_str(), &mut |f, args| call(fx, &role, f, args))
    }

    fn send(
        &mut self,
        fx: &mut dyn Effects,
        kind: MessageKind,
        op: &str,
        peer: &Role,
        data: serde_json::Value,
        origin: Option<String>,
    ) -> Result<u64, RuntimeError> {
        self.seq += 1;
        let msg = Message {
            kind,
            seq: self.seq,
            from: self.role.0.clone(),
            to: peer.0.clone(),
            op: Some(op.to_string()),
            data: Some(data),
            origin,
        };
        let mut ev = TraceEvent::new(&self.role, Action::Send);
        ev.kind = Some(kind);
        ev.op = Some(op.to_string());
        ev.peer = Some(peer.0.clone());
        fx.observe(ev);
        fx.transmit(msg)?;
        Ok(self.seq)
    }

    fn send_frame(kind: MessageKind, op: &str, peer: &Role, data: serde_json::Value) -> Frame {
        Frame::Send {
            kind,
            op: op.to_string(),
            peer: peer.clone(),
            data,
            origin: None,
        }
    }

    fn exec(&mut self, task: u32, frame: Frame, fx: &mut dyn Effects) -> Result<(), RuntimeError> {
        match frame {
            Frame::Exec(node) => self.exec_instr(task, node, fx),
            Frame::Send {
                kind,
                op,
                peer,
                data,
                origin,
            } => {
                let data = if kind == MessageKind::Ready {
                    fx.local_address()
                        .map(|a| serde_json::json!({ "address": a }))
                        .unwrap_or(data)
                } else if kind == MessageKind::Start {
                    serde_json::json!({ "addresses": self.addresses })
                } else {
                    data
                };
                let seq = self.send(fx, kind, &op, &peer, data, origin)?;
                if kind.is_rendezvous() {
                    self.push(task, Frame::AwaitAck { op, peer, seq });
                }
                Ok(())
            }
            Frame::AwaitAck { op, peer, seq } => {
                self.mailbox.take_ack(&op, peer.as_str(), seq);
                let mut ev = TraceEvent::new(&self.role, Action::Ack);
                ev.op = Some(op);
                ev.peer = Some(peer.0);
                fx.observe(ev);
                Ok(())
            }
            Frame::Await { kind, op, peer, then } => {
                let msg = self
                    .mailbox
                    .take(kind, &op, peer.as_str())
                    .ok_or_else(|| RuntimeError::Protocol(format!("no `{op}` message from `{peer}`")))?;
                if kind.is_rendezvous() {
                    let mut ev = TraceEvent::new(&self.role, Action::Send);
                    ev.kind = Some(MessageKind::Ack);
                    ev.op = Some(op.clone());
                    ev.peer = Some(peer.0.clone());
                    fx.observe(ev);
                    fx.transmit(msg.ack())?;
                }
                self.on_receive(task, msg, then, fx)
            }
            Frame::Seq { .. } | Frame::Join { .. } => Err(RuntimeError::Protocol("administrative frame scheduled".into())),
        }
    }

    fn recv_event(&self, msg: &Message, node: Option<NodeId>) -> TraceEvent {
        let mut ev = TraceEvent::new(&self.role, Action::Recv);
        ev.kind = Some(msg.kind);
        ev.op = msg.op.clone();
        ev.peer = Some(msg.from.clone());
        ev.node = node;
        ev
    }

    fn on_receive(&mut self, task: u32, msg: Message, then: OnReceive, fx: &mut dyn Effects) -> Result<(), RuntimeError> {
        let data = msg.data.clone().unwrap_or(serde_json::Value::Null);
        match then {
            OnReceive::Bind { var, node } => {
                let expected = node.to_string();
                if msg.origin.as_deref().is_some_and(|o| o != expected) {
                    self.misdeliveries += 1;
                    let mut ev = TraceEvent::new(&self.role, Action::Misdelivery);
                    ev.op = msg.op.clone();
                    ev.peer = Some(msg.from.clone());
                    ev.node = Some(node.clone());
                    ev.detail = msg.origin.clone();
                    fx.observe(ev);
                }
                let value = Value::from_json(&data)
                    .ok_or_else(|| RuntimeError::Protocol(format!("`{}` carried a non-scalar payload", msg.op())))?;
                let mut ev = self.recv_event(&msg, Some(node));
                ev.detail = Some(value.to_string());
                fx.observe(ev);
                self.vars.insert(var, value);
                Ok(())
            }
            OnReceive::Branch { then_i, else_i } => {
                fx.observe(self.recv_event(&msg, None));
                let go = data
                    .as_bool()
                    .ok_or_else(|| RuntimeError::Protocol(format!("guard `{}` is not a boolean", msg.op())))?;
                self.push(task, Frame::Exec(if go { then_i } else { else_i }));
                Ok(())
            }
            OnReceive::LoopGuard(node) => {
                fx.observe(self.recv_event(&msg, None));
                let go = data
                    .as_bool()
                    .ok_or_else(|| RuntimeError::Protocol(format!("guard `{}` is not a boolean", msg.op())))?;
                if let Instr::WhileFollow {
                    ack_op, evaluator, body, ..
                } = &*node
                {
                    if go {
                        let (ack_op, evaluator, body) = (ack_op.clone(), evaluator.clone(), body.clone());
                        self.push(task, Frame::Exec(node));
                        self.push(task, Self::send_frame(MessageKind::Msg, &ack_op, &evaluator, true.into()));
                        self.push(task, Frame::Exec(body));
                    }
                }
                Ok(())
            }
            OnReceive::Directive(node) => {
                fx.observe(self.recv_event(&msg, None));
                let Instr::ScopeFollow {
                    scope_id,
                    coordinator,
                    done_op,
                    default_i,
                    ..
                } = &*node
                else {
                    return Err(RuntimeError::Protocol("directive for a non-scope".into()));
                };
                let code = if data.get("adapt").and_then(|a| a.as_bool()) == Some(true) {
                    let source = data.get("body").and_then(|b| b.as_str()).unwrap_or("");
                    let body = parse_behaviour(source)
                        .map_err(|d| RuntimeError::Parse(format!("directive body: {}", d[0])))?;
                    if let Some(inc) = data.get("includes") {
                        let includes: Vec<Include> = serde_json::from_value(inc.clone())
                            .map_err(|e| RuntimeError::Protocol(format!("directive includes: {e}")))?;
                        fx.learn_includes(&includes);
                    }
                    if roles_of(&body).contains(&self.role) {
                        let code = project_rule_body(&body, scope_id, coordinator, &self.role)
                            .map_err(|e| RuntimeError::Protocol(e.to_string()))?;
                        NodeRef::from_code(&code)
                    } else {
                        NodeRef::new(Instr::Nop)
                    }
                } else {
                    default_i.clone()
                };
                let done = Self::send_frame(MessageKind::Done, done_op, coordinator, serde_json::Value::Null);
                self.push(task, done);
                self.push(task, Frame::Exec(code));
                Ok(())
            }
            OnReceive::Discard => {
                fx.observe(self.recv_event(&msg, None));
                Ok(())
            }
            OnReceive::Ready => {
                fx.observe(self.recv_event(&msg, None));
                if let Some(addr) = data.get("address").and_then(|a| a.as_str()) {
                    self.addresses.insert(msg.from.clone(), addr.to_string());
                    fx.learn_addresses(&BTreeMap::from([(msg.from.clone(), addr.to_string())]));
                }
                Ok(())
            }
            OnReceive::Start => {
                fx.observe(self.recv_event(&msg, None));
                if let Some(map) = data.get("addresses") {
                    let map: BTreeMap<String, String> = serde_json::from_value(map.clone()).unwrap_or_default();
                    if !map.is_empty() {
                        fx.learn_addresses(&map);
                    }
                }
                Ok(())
            }
        }
    }

    fn exec_instr(&mut self, task: u32, node: NodeRef, fx: &mut dyn Effects) -> Result<(), RuntimeError> {
        match &*node {
            Instr::Assign { var, expr, node } => {
                let v = self.eval(expr, fx)?;
                let mut ev = TraceEvent::new(&self.role, Action::Assign);
                ev.node = Some(node.clone());
                ev.detail = Some(format!("{var} = {v}"));
                fx.observe(ev);
                self.vars.insert(var.clone(), v);
                Ok(())
            }
            Instr::Call {
                function,
                args,
                var,
                node,
            } => {
                let mut values = Vec::with_capacity(args.len());
                for a in args {
                    values.push(self.eval(a, fx)?);
                }
                let v = fx.call_external(&self.role, function, values)?;
                let mut ev = TraceEvent::new(&self.role, Action::Call);
                ev.op = Some(function.clone());
                ev.node = Some(node.clone());
                ev.detail = Some(format!("{var} = {v}"));
                fx.observe(ev);
                self.vars.insert(var.clone(), v);
                Ok(())
            }
            Instr::Send { op, peer, expr, node } => {
                let v = self.eval(expr, fx)?;
                let seq = self.send(fx, MessageKind::Msg, op, peer, v.to_json(), Some(node.to_string()))?;
                self.push(
                    task,
                    Frame::AwaitAck {
                        op: op.clone(),
                        peer: peer.clone(),
                        seq,
                    },
                );
                Ok(())
            }
            Instr::IfLocal {
                guard,
                involved,
                aux_op,
                then_i,
                else_i,
                node,
            } => {
                let go = self.guard(guard, node, fx)?;
                self.push(task, Frame::Exec(if go { then_i.clone() } else { else_i.clone() }));
                for r in involved.iter().rev() {
                    self.push(task, Self::send_frame(MessageKind::Msg, aux_op, r, go.into()));
                }
                Ok(())
            }
            Instr::WhileLocal {
                guard,
                involved,
                guard_op,
                ack_op,
                body,
                node: id,
            } => {
                let go = self.guard(guard, id, fx)?;
                if go {
                    self.push(task, Frame::Exec(node.clone()));
                    for r in involved.iter().rev() {
                        self.push(
                            task,
                            Frame::Await {
                                kind: MessageKind::Msg,
                                op: ack_op.clone(),
                                peer: r.clone(),
                                then: OnReceive::Discard,
                            },
                        );
                    }
                    self.push(task, Frame::Exec(body.clone()));
                }
                for r in involved.iter().rev() {
                    self.push(task, Self::send_frame(MessageKind::Msg, guard_op, r, go.into()));
                }
                Ok(())
            }
            Instr::ScopeCoord {
                scope_id,
                props,
                involved,
                directive_op,
                done_op,
                default_i,
            } => {
                let req = MatchRequest {
                    scope_id: scope_id.clone(),
                    props: props.clone(),
                    vars: self.vars.clone(),
                    coordinator: self.role.clone(),
                    involved: involved.iter().cloned().collect(),
                };
                let resp = fx.match_scope(&req);
                let adapted = match &resp {
                    MatchResponse::Rule { rule_id, body, includes } => match parse_behaviour(body) {
                        Ok(b) => match project_rule_body(&b, scope_id, &self.role, &self.role) {
                            Ok(code) => {
                                fx.learn_includes(includes);
                                Some((rule_id.clone(), body.clone(), includes.clone(), NodeRef::from_code(&code)))
                            }
                            Err(e) => {
                                log::warn!("rule {rule_id} not applicable at `{}`: {e}", self.role);
                                None
                            }
                        },
                        Err(d) => {
                            log::warn!("rule {rule_id} has an unparsable body: {}", d[0]);
                            None
                        }
                    },
                    MatchResponse::NoMatch => None,
                };
                let mut ev = TraceEvent::new(&self.role, Action::Match);
                ev.node = Some(scope_id.clone());
                ev.detail = adapted.as_ref().map(|a| a.0.clone());
                fx.observe(ev);
                let (directive, code) = match adapted {
                    Some((rule_id, body, includes, code)) => (
                        serde_json::json!({ "adapt": true, "rule": rule_id, "body": body, "includes": includes }),
                        code,
                    ),
                    None => (serde_json::json!({ "adapt": false }), default_i.clone()),
                };
                for r in involved.iter().rev() {
                    self.push(
                        task,
                        Frame::Await {
                            kind: MessageKind::Done,
                            op: done_op.clone(),
                            peer: r.clone(),
                            then: OnReceive::Discard,
                        },
                    );
                }
                self.push(task, Frame::Exec(code));
                for r in involved.iter().rev() {
                    self.push(task, Self::send_frame(MessageKind::Directive, directive_op, r, directive.clone()));
                }
                Ok(())
            }
            _ => Err(RuntimeError::Protocol("administrative instruction scheduled".into())),
        }
    }

    fn guard(&self, guard: &Expr, node: &NodeId, fx: &mut dyn Effects) -> Result<bool, RuntimeError> {
        let v = self.eval(guard, fx)?;
        let Value::Bool(b) = v else {
            return Err(RuntimeError::Type(format!(
                "guard at `{}` evaluated to a {}",
                self.role,
                v.type_name()
            )));
        };
        let mut ev = TraceEvent::new(&self.role, Action::Guard);
        ev.node = Some(node.clone());
        ev.detail = Some(b.to_string());
        fx.observe(ev);
        Ok(b)
    }

    /// Eagerly reduces administrative frames in every task.
    fn settle(&mut self) {
        loop {
            let ids: Vec<u32> = self.tasks.keys().copied().collect();
            let mut changed = false;
            for id in ids {
                while self.settle_one(id) {
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }

    fn settle_one(&mut self, id: u32) -> bool {
        let Some(task) = self.tasks.get_mut(&id) else {
            return false;
        };
        let Some(top) = task.frames.last_mut() else {
            let parent = task.parent;
            self.tasks.remove(&id);
            if let Some(p) = parent {
                if let Some(Frame::Join { pending }) = self.tasks.get_mut(&p).and_then(|t| t.frames.last_mut()) {
                    *pending -= 1;
                }
            }
            return true;
        };
        match top {
            Frame::Join { pending: 0 } => {
                task.frames.pop();
                true
            }
            Frame::Seq { node, next } => {
                let Instr::Seq(items) = &**node else { unreachable!() };
                if *next < items.len() {
                    let item = items[*next].clone();
                    *next += 1;
                    task.frames.push(Frame::Exec(item));
                } else {
                    task.frames.pop();
                }
                true
            }
            Frame::Exec(node) if node.is_administrative() => {
                let node = node.clone();
                task.frames.pop();
                match &*node {
                    Instr::Nop => {}
                    Instr::Seq(_) => task.frames.push(Frame::Seq { node: node.clone(), next: 0 }),
                    Instr::Par(branches) => {
                        task.frames.push(Frame::Join {
                            pending: branches.len(),
                        });
                        for b in branches.clone() {
                            let child = self.next_task;
                            self.next_task += 1;
                            self.tasks.insert(
                                child,
                                Task {
                                    frames: vec![Frame::Exec(b.clone())],
                                    parent: Some(id),
                                },
                            );
                        }
                    }
                    Instr::Recv { op, peer, var, node } => task.frames.push(Frame::Await {
                        kind: MessageKind::Msg,
                        op: op.clone(),
                        peer: peer.clone(),
                        then: OnReceive::Bind {
                            var: var.clone(),
                            node: node.clone(),
                        },
                    }),
                    Instr::IfFollow {
                        aux_op,
                        evaluator,
                        then_i,
                        else_i,
                    } => task.frames.push(Frame::Await {
                        kind: MessageKind::Msg,
                        op: aux_op.clone(),
                        peer: evaluator.clone(),
                        then: OnReceive::Branch {
                            then_i: then_i.clone(),
                            else_i: else_i.clone(),
                        },
                    }),
                    Instr::WhileFollow {
                        guard_op, evaluator, ..
                    } => task.frames.push(Frame::Await {
                        kind: MessageKind::Msg,
                        op: guard_op.clone(),
                        peer: evaluator.clone(),
                        then: OnReceive::LoopGuard(node.clone()),
                    }),
                    Instr::ScopeFollow {
                        coordinator,
                        directive_op,
                        ..
                    } => task.frames.push(Frame::Await {
                        kind: MessageKind::Directive,
                        op: directive_op.clone(),
                        peer: coordinator.clone(),
                        then: OnReceive::Directive(node.clone()),
                    }),
                    _ => unreachable!("not administrative"),
                }
                true
            }
            _ => false,
        }
    }
}

fn call(fx: &mut dyn Effects, role: &Role, function: &str, args: Vec<Value>) -> Result<Value, RuntimeError> {
    if function == GET_INPUT {
        let prompt = args.first().map(Value::render).unwrap_or_default();
        fx.get_input(role, &prompt)
    } else {
        fx.call_external(role, function, args)
    }
}
