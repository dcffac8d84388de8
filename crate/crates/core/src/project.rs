//! Endpoint projection: one [`ProcessCode`] per role.
//!
//! `if`, `while` and `scope` decisions are taken by one role and shipped to
//! the other participants on auxiliary operations whose names derive from the
//! node id, so every role computes the same names independently.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ast::{
    normalize, roles_of, Behaviour, BehaviourKind, Expr, Include, NodeId, Program, PropertySet, Role,
    GET_INPUT,
};
use crate::check::{check_program, Violation};
use crate::pretty::pretty_print;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxPurpose {
    Guard,
    Ack,
    Directive,
    Done,
}

impl AuxPurpose {
    pub fn as_str(self) -> &'static str {
        match self {
            AuxPurpose::Guard => "guard",
            AuxPurpose::Ack => "ack",
            AuxPurpose::Directive => "directive",
            AuxPurpose::Done => "done",
        }
    }
}

/// Prefix shared by every auxiliary operation. User operations are plain
/// identifiers and identifiers cannot start with `_aux_` followed by a
/// purpose and digits only, so the two name spaces never meet.
pub const AUX_PREFIX: &str = "_aux_";

/// `_aux_<purpose>_<path>`, e.g. `_aux_guard_0_2`.
pub fn aux_op_name(node: &NodeId, purpose: AuxPurpose) -> String {
    format!("{AUX_PREFIX}{}_{}", purpose.as_str(), node)
}

/// Purpose of an auxiliary operation name, `None` for user operations.
pub fn aux_purpose(op: &str) -> Option<AuxPurpose> {
    let rest = op.strip_prefix(AUX_PREFIX)?;
    [AuxPurpose::Guard, AuxPurpose::Ack, AuxPurpose::Directive, AuxPurpose::Done]
        .into_iter()
        .find(|p| rest.starts_with(p.as_str()) && rest[p.as_str().len()..].starts_with('_'))
}

/// Operation name used for a user operation inside an adapted scope.
/// Parallel scopes adapted with the same rule must not share channels.
pub fn scoped_op_name(op: &str, scope: &NodeId) -> String {
    format!("{op}#{scope}")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ProcessCode {
    Nop,
    LocalAssign {
        var: String,
        expr: Expr,
        node: NodeId,
    },
    SendTo {
        op: String,
        peer: Role,
        expr: Expr,
        node: NodeId,
    },
    RecvFrom {
        op: String,
        peer: Role,
        var: String,
        node: NodeId,
    },
    SeqP {
        items: Vec<ProcessCode>,
    },
    ParP {
        branches: Vec<ProcessCode>,
    },
    IfLocal {
        guard: Expr,
        involved: BTreeSet<Role>,
        aux_op: String,
        then_p: Box<ProcessCode>,
        else_p: Box<ProcessCode>,
        node: NodeId,
    },
    IfFollow {
        aux_op: String,
        evaluator: Role,
        then_p: Box<ProcessCode>,
        else_p: Box<ProcessCode>,
    },
    WhileLocal {
        guard: Expr,
        involved: BTreeSet<Role>,
        guard_op: String,
        ack_op: String,
        body: Box<ProcessCode>,
        node: NodeId,
    },
    WhileFollow {
        guard_op: String,
        ack_op: String,
        evaluator: Role,
        body: Box<ProcessCode>,
    },
    ScopeCoord {
        scope_id: NodeId,
        props: PropertySet,
        involved: BTreeSet<Role>,
        directive_op: String,
        done_op: String,
        default_source: String,
        default_p: Box<ProcessCode>,
    },
    ScopeFollow {
        scope_id: NodeId,
        coordinator: Role,
        directive_op: String,
        done_op: String,
        default_p: Box<ProcessCode>,
    },
    CallExternal {
        function: String,
        args: Vec<Expr>,
        var: String,
        node: NodeId,
    },
}

impl ProcessCode {
    pub fn is_nop(&self) -> bool {
        matches!(self, ProcessCode::Nop)
    }

    fn seq(items: Vec<ProcessCode>) -> ProcessCode {
        let mut flat = Vec::with_capacity(items.len());
        for item in items {
            match item {
                ProcessCode::Nop => {}
                ProcessCode::SeqP { items } => flat.extend(items),
                other => flat.push(other),
            }
        }
        match flat.len() {
            0 => ProcessCode::Nop,
            1 => flat.pop().unwrap(),
            _ => ProcessCode::SeqP { items: flat },
        }
    }

    fn par(branches: Vec<ProcessCode>) -> ProcessCode {
        let mut flat: Vec<ProcessCode> = Vec::with_capacity(branches.len());
        for b in branches {
            match b {
                ProcessCode::Nop => {}
                ProcessCode::ParP { branches } => flat.extend(branches),
                other => flat.push(other),
            }
        }
        match flat.len() {
            0 => ProcessCode::Nop,
            1 => flat.pop().unwrap(),
            _ => ProcessCode::ParP { branches: flat },
        }
    }

    /// Calls `f` on every node, parents first.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a ProcessCode)) {
        let mut stack = vec![self];
        while let Some(p) = stack.pop() {
            f(p);
            match p {
                ProcessCode::SeqP { items } => stack.extend(items.iter().rev()),
                ProcessCode::ParP { branches } => stack.extend(branches.iter().rev()),
                ProcessCode::IfLocal { then_p, else_p, .. } | ProcessCode::IfFollow { then_p, else_p, .. } => {
                    stack.push(else_p);
                    stack.push(then_p);
                }
                ProcessCode::WhileLocal { body, .. } | ProcessCode::WhileFollow { body, .. } => stack.push(body),
                ProcessCode::ScopeCoord { default_p, .. } | ProcessCode::ScopeFollow { default_p, .. } => {
                    stack.push(default_p)
                }
                _ => {}
            }
        }
    }
}

/// Static description of one scope, shared by all roles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeInfo {
    pub scope_id: NodeId,
    pub coordinator: Role,
    pub involved: BTreeSet<Role>,
    pub props: PropertySet,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectedApp {
    pub per_role: BTreeMap<Role, ProcessCode>,
    pub starter: Role,
    pub includes: Vec<Include>,
    pub locations: BTreeMap<Role, String>,
    pub scopes: Vec<ScopeInfo>,
}

impl ProjectedApp {
    pub fn roles(&self) -> impl Iterator<Item = &Role> {
        self.per_role.keys()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProjectError {
    /// The program failed validation or connectedness.
    Invalid(Vec<Violation>),
    /// A rule body was projected for a role that plays no part in it.
    RoleNotInBody(Role),
}

impl fmt::Display for ProjectError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProjectError::Invalid(v) => {
                write!(f, "program is not projectable ({} violation(s))", v.len())?;
                for x in v {
                    write!(f, "\n  {}:{}: {}: {}", x.pos.line, x.pos.column, x.kind, x.message)?;
                }
                Ok(())
            }
            ProjectError::RoleNotInBody(r) => write!(f, "role `{r}` does not take part in the rule body"),
        }
    }
}

impl std::error::Error for ProjectError {}

/// Involved roles of a construct: those of its parts, minus the deciding role.
fn involved(parts: &[&Behaviour], decider: &Role) -> BTreeSet<Role> {
    let mut out = BTreeSet::new();
    for p in parts {
        out.extend(roles_of(p));
    }
    out.remove(decider);
    out
}

/// Right-nested `Seq` chains flattened without recursion.
fn seq_items(b: &Behaviour) -> Vec<&Behaviour> {
    let mut out = Vec::new();
    let mut stack = vec![b];
    while let Some(node) = stack.pop() {
        match &node.kind {
            BehaviourKind::Seq(x, y) => {
                stack.push(y);
                stack.push(x);
            }
            _ => out.push(node),
        }
    }
    out
}

struct Projector<'a> {
    role: &'a Role,
    /// Set while projecting an adapted rule body: user ops get qualified.
    scope: Option<&'a NodeId>,
}

impl Projector<'_> {
    fn op(&self, op: &str) -> String {
        match self.scope {
            Some(s) => scoped_op_name(op, s),
            None => op.to_string(),
        }
    }

    fn project(&self, b: &Behaviour) -> ProcessCode {
        let me = self.role;
        match &b.kind {
            BehaviourKind::Skip => ProcessCode::Nop,
            BehaviourKind::Assign { var, role, rhs } => {
                if role != me {
                    return ProcessCode::Nop;
                }
                match rhs {
                    Expr::Call { function, args } if function != GET_INPUT => ProcessCode::CallExternal {
                        function: function.clone(),
                        args: args.clone(),
                        var: var.clone(),
                        node: b.meta.id.clone(),
                    },
                    _ => ProcessCode::LocalAssign {
                        var: var.clone(),
                        expr: rhs.clone(),
                        node: b.meta.id.clone(),
                    },
                }
            }
            BehaviourKind::Interaction {
                op,
                sender,
                send_expr,
                receiver,
                recv_var,
            } => {
                if sender == me {
                    ProcessCode::SendTo {
                        op: self.op(op),
                        peer: receiver.clone(),
                        expr: send_expr.clone(),
                        node: b.meta.id.clone(),
                    }
                } else if receiver == me {
                    ProcessCode::RecvFrom {
                        op: self.op(op),
                        peer: sender.clone(),
                        var: recv_var.clone(),
                        node: b.meta.id.clone(),
                    }
                } else {
                    ProcessCode::Nop
                }
            }
            BehaviourKind::Seq(..) => ProcessCode::seq(seq_items(b).into_iter().map(|x| self.project(x)).collect()),
            BehaviourKind::Par(l, r) => ProcessCode::par(vec![self.project(l), self.project(r)]),
            BehaviourKind::If {
                guard,
                evaluator,
                then_b,
                else_b,
            } => {
                let inv = involved(&[then_b, else_b], evaluator);
                let aux_op = aux_op_name(&b.meta.id, AuxPurpose::Guard);
                if evaluator == me {
                    ProcessCode::IfLocal {
                        guard: guard.clone(),
                        involved: inv,
                        aux_op,
                        then_p: Box::new(self.project(then_b)),
                        else_p: Box::new(self.project(else_b)),
                        node: b.meta.id.clone(),
                    }
                } else if inv.contains(me) {
                    ProcessCode::IfFollow {
                        aux_op,
                        evaluator: evaluator.clone(),
                        then_p: Box::new(self.project(then_b)),
                        else_p: Box::new(self.project(else_b)),
                    }
                } else {
                    ProcessCode::Nop
                }
            }
            BehaviourKind::While { guard, evaluator, body } => {
                let inv = involved(&[body], evaluator);
                let guard_op = aux_op_name(&b.meta.id, AuxPurpose::Guard);
                let ack_op = aux_op_name(&b.meta.id, AuxPurpose::Ack);
                if evaluator == me {
                    ProcessCode::WhileLocal {
                        guard: guard.clone(),
                        involved: inv,
                        guard_op,
                        ack_op,
                        body: Box::new(self.project(body)),
                        node: b.meta.id.clone(),
                    }
                } else if inv.contains(me) {
                    ProcessCode::WhileFollow {
                        guard_op,
                        ack_op,
                        evaluator: evaluator.clone(),
                        body: Box::new(self.project(body)),
                    }
                } else {
                    ProcessCode::Nop
                }
            }
            BehaviourKind::Scope {
                coordinator,
                body,
                props,
            } => {
                let inv = involved(&[body], coordinator);
                let directive_op = aux_op_name(&b.meta.id, AuxPurpose::Directive);
                let done_op = aux_op_name(&b.meta.id, AuxPurpose::Done);
                if coordinator == me {
                    ProcessCode::ScopeCoord {
                        scope_id: b.meta.id.clone(),
                        props: props.clone(),
                        involved: inv,
                        directive_op,
                        done_op,
                        default_source: pretty_print(body),
                        default_p: Box::new(self.project(body)),
                    }
                } else if inv.contains(me) {
                    ProcessCode::ScopeFollow {
                        scope_id: b.meta.id.clone(),
                        coordinator: coordinator.clone(),
                        directive_op,
                        done_op,
                        default_p: Box::new(self.project(body)),
                    }
                } else {
                    ProcessCode::Nop
                }
            }
        }
    }
}

/// Projection of `b` at `role`, without any precondition check.
pub fn project_behaviour(b: &Behaviour, role: &Role) -> ProcessCode {
    Projector { role, scope: None }.project(&normalize(b))
}

/// Projects a checked program onto every role.
pub fn project(p: &Program) -> Result<ProjectedApp, ProjectError> {
    let errors: Vec<Violation> = check_program(p).into_iter().filter(Violation::is_error).collect();
    if !errors.is_empty() {
        return Err(ProjectError::Invalid(errors));
    }
    project_unchecked(p)
}

/// Projects without running the checker. Used to build negative controls;
/// the result may deadlock or misbehave.
pub fn project_unchecked(p: &Program) -> Result<ProjectedApp, ProjectError> {
    let starter = p
        .preamble
        .starter
        .clone()
        .ok_or_else(|| ProjectError::Invalid(check_program(p).into_iter().filter(Violation::is_error).collect()))?;
    let body = normalize(&p.body);
    let per_role = p
        .roles()
        .into_iter()
        .map(|r| {
            let code = Projector { role: &r, scope: None }.project(&body);
            (r, code)
        })
        .collect();
    let mut scopes = Vec::new();
    body.walk(&mut |node| {
        if let BehaviourKind::Scope {
            coordinator,
            body,
            props,
        } = &node.kind
        {
            scopes.push(ScopeInfo {
                scope_id: node.meta.id.clone(),
                coordinator: coordinator.clone(),
                involved: involved(&[body], coordinator),
                props: props.clone(),
                source: pretty_print(body),
            });
        }
    });
    Ok(ProjectedApp {
        per_role,
        starter,
        includes: p.includes.clone(),
        locations: p.preamble.locations.clone(),
        scopes,
    })
}

/// Projects an adapted rule body at `target`. Node ids are re-rooted below
/// the scope (at child index 1, the default body being child 0) and user
/// operations are qualified by the scope id, so the result only depends on
/// the arguments.
pub fn project_rule_body(
    body: &Behaviour,
    scope_id: &NodeId,
    coordinator: &Role,
    target: &Role,
) -> Result<ProcessCode, ProjectError> {
    let mut rooted = normalize(body);
    if target != coordinator && !roles_of(&rooted).contains(target) {
        return Err(ProjectError::RoleNotInBody(target.clone()));
    }
    rooted.assign_ids(scope_id.child(1));
    Ok(Projector {
        role: target,
        scope: Some(scope_id),
    }
    .project(&rooted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{parse_behaviour, parse_program};

    #[test]
    fn interaction_splits() {
        let b = parse_behaviour("proposal: bob( free_day ) -> alice( bob_free_day )").unwrap();
        let bob = project_behaviour(&b, &Role::from("bob"));
        let alice = project_behaviour(&b, &Role::from("alice"));
        assert!(matches!(bob, ProcessCode::SendTo { ref op, ref peer, .. } if op == "proposal" && peer.as_str() == "alice"));
        assert!(
            matches!(alice, ProcessCode::RecvFrom { ref op, ref peer, ref var, .. } if op == "proposal" && peer.as_str() == "bob" && var == "bob_free_day")
        );
        assert!(project_behaviour(&b, &Role::from("cinema")).is_nop());
    }

    #[test]
    fn aux_names() {
        let id = NodeId(vec![0, 2]);
        assert_eq!(aux_op_name(&id, AuxPurpose::Guard), "_aux_guard_0_2");
        assert_eq!(aux_op_name(&id, AuxPurpose::Ack), "_aux_ack_0_2");
        assert_eq!(aux_purpose("_aux_done_1"), Some(AuxPurpose::Done));
        assert_eq!(aux_purpose("_aux_done"), None);
        assert_eq!(aux_purpose("proposal"), None);
    }

    #[test]
    fn scope_coordinator_and_follower() {
        let p = parse_program(
            r#"include isFreeDay from "calendar.org:80"
            preamble { starter: bob }
            aioc { scope @bob {
                free_day@bob = getInput( "Insert your free day" );
                proposal: bob( free_day ) -> alice( bob_free_day );
                is_free@alice = isFreeDay( bob_free_day )
            } prop { N.scope_name = "matching day" } }"#,
        )
        .unwrap();
        let app = project(&p).unwrap();
        match &app.per_role[&Role::from("bob")] {
            ProcessCode::ScopeCoord { involved, .. } => {
                assert_eq!(involved.iter().map(Role::as_str).collect::<Vec<_>>(), vec!["alice"])
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(app.per_role[&Role::from("alice")], ProcessCode::ScopeFollow { .. }));
        assert_eq!(app.scopes.len(), 1);
    }

    #[test]
    fn rule_body_projection() {
        let body = parse_behaviour(r#"msg@user = "Ciao Mondo""#).unwrap();
        let code = project_rule_body(&body, &NodeId(vec![0]), &Role::from("user"), &Role::from("user")).unwrap();
        assert!(matches!(code, ProcessCode::LocalAssign { ref var, .. } if var == "msg"));
        let body = parse_behaviour("x@c = 1").unwrap();
        assert_eq!(
            project_rule_body(&body, &NodeId(vec![0]), &Role::from("c"), &Role::from("d")),
            Err(ProjectError::RoleNotInBody(Role::from("d")))
        );
    }

    #[test]
    fn external_call_vs_nested_call() {
        let b = parse_behaviour("t@c = getTicket(d); m@c = \"x\" + getTicket(d); i@c = getInput(\"?\")").unwrap();
        match project_behaviour(&b, &Role::from("c")) {
            ProcessCode::SeqP { items } => {
                assert!(matches!(items[0], ProcessCode::CallExternal { .. }));
                assert!(matches!(items[1], ProcessCode::LocalAssign { .. }));
                assert!(matches!(items[2], ProcessCode::LocalAssign { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
