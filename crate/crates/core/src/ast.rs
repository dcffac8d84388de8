//! Abstract syntax of choreographies, adaptation rules, and expressions.
//!
//! Every [`Behaviour`] node carries a [`Meta`] with a path-based [`NodeId`]
//! and a source position. `Meta` compares equal to every other `Meta`, so
//! `==` on trees is structural equality: two trees parsed from differently
//! formatted but equivalent source compare equal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// A participant of the choreography.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Role(pub String);

impl Role {
    pub fn new(name: impl Into<String>) -> Self {
        Role(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Role {
    fn from(s: &str) -> Self {
        Role(s.to_string())
    }
}

/// Position of a node in the tree, as child indices from the root.
///
/// Children are numbered per construct: `Seq`/`Par`/`If` use 0 and 1,
/// `While` and `Scope` put their body at 0. Adapted rule bodies are
/// re-rooted below their scope at index 1.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub Vec<u32>);

impl NodeId {
    pub fn root() -> Self {
        NodeId(Vec::new())
    }

    pub fn child(&self, index: u32) -> Self {
        let mut path = self.0.clone();
        path.push(index);
        NodeId(path)
    }

    pub fn path(&self) -> &[u32] {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("_")?;
            }
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

/// Line/column position in source text, both 1-based.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pos {
    pub line: u32,
    pub column: u32,
}

/// Node metadata. Ignored by `==`.
#[derive(Clone, Debug, Default, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub id: NodeId,
    pub pos: Pos,
}

impl PartialEq for Meta {
    fn eq(&self, _other: &Self) -> bool {
        true
    }
}

impl std::hash::Hash for Meta {
    fn hash<H: std::hash::Hasher>(&self, _state: &mut H) {}
}

/// Dynamically typed runtime value.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Str(String),
}

impl Value {
    /// Textual rendering used by string concatenation and mixed-type equality.
    pub fn render(&self) -> String {
        match self {
            Value::Bool(b) => b.to_string(),
            Value::Int(i) => i.to_string(),
            Value::Str(s) => s.clone(),
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Bool(_) => "boolean",
            Value::Int(_) => "integer",
            Value::Str(_) => "string",
        }
    }

    /// Parses a command-line style literal: integers and booleans are
    /// recognised, anything else is a string.
    pub fn from_cli(text: &str) -> Value {
        if let Ok(i) = text.parse::<i64>() {
            Value::Int(i)
        } else if text == "true" {
            Value::Bool(true)
        } else if text == "false" {
            Value::Bool(false)
        } else {
            Value::Str(text.to_string())
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Bool(b) => serde_json::Value::Bool(*b),
            Value::Int(i) => serde_json::Value::from(*i),
            Value::Str(s) => serde_json::Value::String(s.clone()),
        }
    }

    pub fn from_json(v: &serde_json::Value) -> Option<Value> {
        match v {
            serde_json::Value::Bool(b) => Some(Value::Bool(*b)),
            serde_json::Value::Number(n) => n.as_i64().map(Value::Int),
            serde_json::Value::String(s) => Some(Value::Str(s.clone())),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Str(s) => write!(f, "{}", quote(s)),
            other => f.write_str(&other.render()),
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

pub(crate) fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnaryOp {
    Not,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Eq,
    Ne,
    Lt,
    Gt,
    Le,
    Ge,
    And,
    Or,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Eq => "==",
            BinaryOp::Ne => "!=",
            BinaryOp::Lt => "<",
            BinaryOp::Gt => ">",
            BinaryOp::Le => "<=",
            BinaryOp::Ge => ">=",
            BinaryOp::And => "and",
            BinaryOp::Or => "or",
        }
    }

    /// Binding strength; higher binds tighter.
    pub fn precedence(self) -> u8 {
        match self {
            BinaryOp::Or => 1,
            BinaryOp::And => 2,
            BinaryOp::Eq
            | BinaryOp::Ne
            | BinaryOp::Lt
            | BinaryOp::Gt
            | BinaryOp::Le
            | BinaryOp::Ge => 3,
            BinaryOp::Add | BinaryOp::Sub => 4,
            BinaryOp::Mul | BinaryOp::Div => 5,
        }
    }
}

/// Name of the builtin input primitive.
pub const GET_INPUT: &str = "getInput";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Expr {
    Lit(Value),
    Var(String),
    /// `N.key` (scope property) or `E.key` (environment); any other
    /// namespace parses but is rejected by the checker.
    Namespaced { ns: String, key: String },
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    Call { function: String, args: Vec<Expr> },
}

impl Expr {
    pub fn lit(v: impl Into<Value>) -> Expr {
        Expr::Lit(v.into())
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    pub fn binary(op: BinaryOp, l: Expr, r: Expr) -> Expr {
        Expr::Binary(op, Box::new(l), Box::new(r))
    }

    pub fn negate(e: Expr) -> Expr {
        Expr::Unary(UnaryOp::Not, Box::new(e))
    }

    /// Visits every sub-expression, including `self`.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Unary(_, e) => e.walk(f),
            Expr::Binary(_, l, r) => {
                l.walk(f);
                r.walk(f);
            }
            Expr::Call { args, .. } => args.iter().for_each(|a| a.walk(f)),
            Expr::Lit(_) | Expr::Var(_) | Expr::Namespaced { .. } => {}
        }
    }

    /// Plain variable names referenced by the expression.
    pub fn variables(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.walk(&mut |e| {
            if let Expr::Var(v) = e {
                out.insert(v.as_str());
            }
        });
        out
    }

    /// Names of functions called anywhere in the expression.
    pub fn calls(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.walk(&mut |e| {
            if let Expr::Call { function, .. } = e {
                out.push(function.as_str());
            }
        });
        out
    }
}

/// Scope properties (the `N.*` namespace).
pub type PropertySet = BTreeMap<String, Value>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Behaviour {
    pub meta: Meta,
    pub kind: BehaviourKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BehaviourKind {
    Skip,
    Assign {
        var: String,
        role: Role,
        rhs: Expr,
    },
    Interaction {
        op: String,
        sender: Role,
        send_expr: Expr,
        receiver: Role,
        recv_var: String,
    },
    Seq(Box<Behaviour>, Box<Behaviour>),
    Par(Box<Behaviour>, Box<Behaviour>),
    If {
        guard: Expr,
        evaluator: Role,
        then_b: Box<Behaviour>,
        else_b: Box<Behaviour>,
    },
    While {
        guard: Expr,
        evaluator: Role,
        body: Box<Behaviour>,
    },
    Scope {
        coordinator: Role,
        body: Box<Behaviour>,
        props: PropertySet,
    },
}

impl Behaviour {
    pub fn new(kind: BehaviourKind) -> Self {
        Behaviour {
            meta: Meta::default(),
            kind,
        }
    }

    pub fn skip() -> Self {
        Behaviour::new(BehaviourKind::Skip)
    }

    pub fn assign(var: &str, role: &str, rhs: Expr) -> Self {
        Behaviour::new(BehaviourKind::Assign {
            var: var.into(),
            role: role.into(),
            rhs,
        })
    }

    pub fn interaction(op: &str, sender: &str, send_expr: Expr, receiver: &str, recv_var: &str) -> Self {
        Behaviour::new(BehaviourKind::Interaction {
            op: op.into(),
            sender: sender.into(),
            send_expr,
            receiver: receiver.into(),
            recv_var: recv_var.into(),
        })
    }

    pub fn seq(a: Behaviour, b: Behaviour) -> Self {
        Behaviour::new(BehaviourKind::Seq(Box::new(a), Box::new(b)))
    }

    pub fn par(a: Behaviour, b: Behaviour) -> Self {
        Behaviour::new(BehaviourKind::Par(Box::new(a), Box::new(b)))
    }

    pub fn if_(guard: Expr, evaluator: &str, then_b: Behaviour, else_b: Behaviour) -> Self {
        Behaviour::new(BehaviourKind::If {
            guard,
            evaluator: evaluator.into(),
            then_b: Box::new(then_b),
            else_b: Box::new(else_b),
        })
    }

    pub fn while_(guard: Expr, evaluator: &str, body: Behaviour) -> Self {
        Behaviour::new(BehaviourKind::While {
            guard,
            evaluator: evaluator.into(),
            body: Box::new(body),
        })
    }

    pub fn scope(coordinator: &str, body: Behaviour, props: PropertySet) -> Self {
        Behaviour::new(BehaviourKind::Scope {
            coordinator: coordinator.into(),
            body: Box::new(body),
            props,
        })
    }

    pub fn id(&self) -> &NodeId {
        &self.meta.id
    }

    pub fn is_skip(&self) -> bool {
        matches!(self.kind, BehaviourKind::Skip)
    }

    /// Children in NodeId index order.
    pub fn children(&self) -> Vec<&Behaviour> {
        match &self.kind {
            BehaviourKind::Seq(a, b) | BehaviourKind::Par(a, b) => vec![a, b],
            BehaviourKind::If { then_b, else_b, .. } => vec![then_b, else_b],
            BehaviourKind::While { body, .. } | BehaviourKind::Scope { body, .. } => vec![body],
            _ => Vec::new(),
        }
    }

    fn children_mut(&mut self) -> Vec<&mut Behaviour> {
        match &mut self.kind {
            BehaviourKind::Seq(a, b) | BehaviourKind::Par(a, b) => vec![a, b],
            BehaviourKind::If { then_b, else_b, .. } => vec![then_b, else_b],
            BehaviourKind::While { body, .. } | BehaviourKind::Scope { body, .. } => vec![body],
            _ => Vec::new(),
        }
    }

    /// Pre-order traversal.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Behaviour)) {
        let mut stack = vec![self];
        while let Some(node) = stack.pop() {
            f(node);
            let children = node.children();
            stack.extend(children.into_iter().rev());
        }
    }

    /// Assigns path-based ids to every node, rooted at `root`.
    pub fn assign_ids(&mut self, root: NodeId) {
        self.meta.id = root;
        let id = self.meta.id.clone();
        for (i, child) in self.children_mut().into_iter().enumerate() {
            child.assign_ids(id.child(i as u32));
        }
    }

    /// Number of nodes in the tree.
    pub fn size(&self) -> usize {
        let mut n = 0;
        self.walk(&mut |_| n += 1);
        n
    }
}

/// Every role occurring in `b`: assignment owners, interaction endpoints,
/// guard evaluators and scope coordinators, at any depth.
pub fn roles_of(b: &Behaviour) -> BTreeSet<Role> {
    let mut roles = BTreeSet::new();
    b.walk(&mut |node| match &node.kind {
        BehaviourKind::Assign { role, .. } => {
            roles.insert(role.clone());
        }
        BehaviourKind::Interaction { sender, receiver, .. } => {
            roles.insert(sender.clone());
            roles.insert(receiver.clone());
        }
        BehaviourKind::If { evaluator, .. } | BehaviourKind::While { evaluator, .. } => {
            roles.insert(evaluator.clone());
        }
        BehaviourKind::Scope { coordinator, .. } => {
            roles.insert(coordinator.clone());
        }
        BehaviourKind::Skip | BehaviourKind::Seq(..) | BehaviourKind::Par(..) => {}
    });
    roles
}

/// Removes `Skip` units from `Seq` and `Par`. Surviving nodes keep their ids.
pub fn normalize(b: &Behaviour) -> Behaviour {
    let meta = b.meta.clone();
    let kind = match &b.kind {
        BehaviourKind::Seq(x, y) | BehaviourKind::Par(x, y) => {
            let x = normalize(x);
            let y = normalize(y);
            match (x.is_skip(), y.is_skip()) {
                (true, _) => return y,
                (_, true) => return x,
                _ if matches!(b.kind, BehaviourKind::Seq(..)) => {
                    BehaviourKind::Seq(Box::new(x), Box::new(y))
                }
                _ => BehaviourKind::Par(Box::new(x), Box::new(y)),
            }
        }
        BehaviourKind::If {
            guard,
            evaluator,
            then_b,
            else_b,
        } => BehaviourKind::If {
            guard: guard.clone(),
            evaluator: evaluator.clone(),
            then_b: Box::new(normalize(then_b)),
            else_b: Box::new(normalize(else_b)),
        },
        BehaviourKind::While {
            guard,
            evaluator,
            body,
        } => BehaviourKind::While {
            guard: guard.clone(),
            evaluator: evaluator.clone(),
            body: Box::new(normalize(body)),
        },
        BehaviourKind::Scope {
            coordinator,
            body,
            props,
        } => BehaviourKind::Scope {
            coordinator: coordinator.clone(),
            body: Box::new(normalize(body)),
            props: props.clone(),
        },
        other => other.clone(),
    };
    Behaviour { meta, kind }
}

/// An external function declaration.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Include {
    pub functions: Vec<String>,
    pub address: String,
    /// Wire protocol named by `with`; `None` means the default JSON protocol.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preamble {
    pub starter: Option<Role>,
    pub locations: BTreeMap<Role, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub includes: Vec<Include>,
    pub preamble: Preamble,
    pub body: Behaviour,
}

impl Program {
    /// Every role mentioned by the body, plus the starter.
    pub fn roles(&self) -> BTreeSet<Role> {
        let mut roles = roles_of(&self.body);
        if let Some(s) = &self.preamble.starter {
            roles.insert(s.clone());
        }
        roles
    }

    pub fn declared_functions(&self) -> BTreeSet<&str> {
        declared(&self.includes)
    }
}

pub(crate) fn declared(includes: &[Include]) -> BTreeSet<&str> {
    includes
        .iter()
        .flat_map(|i| i.functions.iter().map(String::as_str))
        .collect()
}

/// An adaptation rule: applicability condition plus replacement code.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub includes: Vec<Include>,
    pub condition: Expr,
    pub body: Behaviour,
    pub pos: Pos,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn listing1_like() -> Behaviour {
        Behaviour::seq(
            Behaviour::assign("end", "bob", Expr::lit(false)),
            Behaviour::scope(
                "bob",
                Behaviour::interaction("notify", "cinema", Expr::var("t"), "alice", "t"),
                PropertySet::new(),
            ),
        )
    }

    #[test]
    fn roles_of_single_actions() {
        let a = Behaviour::assign("end", "bob", Expr::lit(false));
        assert_eq!(roles_of(&a), [Role::from("bob")].into());
        let i = Behaviour::interaction("proposal", "bob", Expr::var("free_day"), "alice", "bob_free_day");
        assert_eq!(roles_of(&i), [Role::from("alice"), Role::from("bob")].into());
    }

    #[test]
    fn roles_of_descends_into_scopes() {
        let roles = roles_of(&listing1_like());
        let names: Vec<_> = roles.iter().map(Role::as_str).collect();
        assert_eq!(names, ["alice", "bob", "cinema"]);
    }

    #[test]
    fn normalize_unit_laws() {
        let x = Behaviour::assign("x", "a", Expr::lit(1));
        let y = Behaviour::assign("y", "a", Expr::lit(2));
        assert_eq!(normalize(&Behaviour::seq(Behaviour::skip(), x.clone())), x);
        assert_eq!(normalize(&Behaviour::par(Behaviour::skip(), Behaviour::skip())), Behaviour::skip());
        assert_eq!(
            normalize(&Behaviour::seq(x.clone(), Behaviour::seq(Behaviour::skip(), y.clone()))),
            Behaviour::seq(x, y)
        );
    }

    #[test]
    fn normalize_keeps_ids() {
        let mut b = Behaviour::seq(Behaviour::skip(), Behaviour::assign("x", "a", Expr::lit(1)));
        b.assign_ids(NodeId::root());
        let n = normalize(&b);
        assert_eq!(n.id(), &NodeId(vec![1]));
    }

    #[test]
    fn ids_are_preorder_paths() {
        let mut b = listing1_like();
        b.assign_ids(NodeId::root());
        let mut ids = Vec::new();
        b.walk(&mut |n| ids.push(n.id().to_string()));
        assert_eq!(ids, ["", "0", "1", "1_0"]);
    }

    #[test]
    fn value_cli_literals() {
        assert_eq!(Value::from_cli("6"), Value::Int(6));
        assert_eq!(Value::from_cli("true"), Value::Bool(true));
        assert_eq!(Value::from_cli("it"), Value::Str("it".into()));
    }
}
