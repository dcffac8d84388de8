//! Static validation: connectedness and name/role sanity checks.
//!
//! Connectedness has two parts, both checked bottom-up in a single pass:
//!
//! * **sequence**: in `A; B`, every final event of `A` shares a role with
//!   every initial event of `B`, so that `B` cannot start before `A` is over;
//! * **parallel**: in `A | B`, no interaction key `(operation, sender,
//!   receiver)` occurs on both sides, so parallel messages never interfere.
//!
//! Auxiliary communications inserted by projection (guard broadcasts, scope
//! directives) coordinate `if`, `while`, and `scope`, so only `;` and `|`
//! can produce violations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ast::{
    declared, normalize, roles_of, Behaviour, BehaviourKind, Expr, NodeId, Pos, Program, Role, Rule,
    GET_INPUT,
};
use crate::parser::{parse_program_with_warnings, Diagnostic, Severity};

/// The role set of an initial or final action. The first role initiates.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventSignature {
    pub roles: Vec<Role>,
    pub origin: NodeId,
    #[serde(skip)]
    pub pos: Pos,
}

impl EventSignature {
    fn local(role: &Role, node: &Behaviour) -> Self {
        EventSignature {
            roles: vec![role.clone()],
            origin: node.meta.id.clone(),
            pos: node.meta.pos,
        }
    }

    fn pair(first: &Role, second: &Role, node: &Behaviour) -> Self {
        EventSignature {
            roles: vec![first.clone(), second.clone()],
            origin: node.meta.id.clone(),
            pos: node.meta.pos,
        }
    }

    pub fn initiator(&self) -> &Role {
        &self.roles[0]
    }

    fn shares_role_with(&self, other: &EventSignature) -> bool {
        self.roles.iter().any(|r| other.roles.contains(r))
    }

    fn roles_text(&self) -> String {
        let names: Vec<&str> = self.roles.iter().map(Role::as_str).collect();
        format!("{{{}}}", names.join(", "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViolationKind {
    Sequence,
    Parallel,
    Role,
    Name,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::Sequence => "sequence",
            ViolationKind::Parallel => "parallel",
            ViolationKind::Role => "role",
            ViolationKind::Name => "name",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub severity: Severity,
    /// The offending pair; both entries are equal for single-node findings.
    pub nodes: (NodeId, NodeId),
    /// Where the problem is reported (the later node of a pair).
    pub pos: Pos,
    pub message: String,
}

impl Violation {
    fn at(kind: ViolationKind, node: &Behaviour, message: String) -> Self {
        Violation {
            kind,
            severity: Severity::Error,
            nodes: (node.meta.id.clone(), node.meta.id.clone()),
            pos: node.meta.pos,
            message,
        }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }

    /// `file:line:col: kind: message`
    pub fn render(&self, file: &str) -> String {
        let kind = match self.severity {
            Severity::Error => self.kind.to_string(),
            Severity::Warning => format!("{} warning", self.kind),
        };
        format!("{file}:{}:{}: {kind}: {}", self.pos.line, self.pos.column, self.message)
    }
}

impl From<&Diagnostic> for Violation {
    fn from(d: &Diagnostic) -> Self {
        Violation {
            kind: ViolationKind::Name,
            severity: d.severity,
            nodes: (NodeId::root(), NodeId::root()),
            pos: Pos {
                line: d.line,
                column: d.column,
            },
            message: d.message.clone(),
        }
    }
}

/// Events that can happen first in `b`. Expects a normalized tree.
pub fn trans_initial(b: &Behaviour) -> BTreeSet<EventSignature> {
    match &b.kind {
        BehaviourKind::Skip => BTreeSet::new(),
        BehaviourKind::Assign { role, .. } => [EventSignature::local(role, b)].into(),
        BehaviourKind::Interaction { sender, receiver, .. } => {
            [EventSignature::pair(sender, receiver, b)].into()
        }
        BehaviourKind::Seq(first, second) => {
            let i = trans_initial(first);
            if i.is_empty() {
                trans_initial(second)
            } else {
                i
            }
        }
        BehaviourKind::Par(l, r) => {
            let mut i = trans_initial(l);
            i.extend(trans_initial(r));
            i
        }
        BehaviourKind::If { evaluator, .. } | BehaviourKind::While { evaluator, .. } => {
            [EventSignature::local(evaluator, b)].into()
        }
        BehaviourKind::Scope { coordinator, .. } => [EventSignature::local(coordinator, b)].into(),
    }
}

/// Events that can happen last in `b`. Expects a normalized tree.
///
/// A scope ends with every participant reporting `done` to the coordinator,
/// so its final events are the pairs `(participant, coordinator)`.
pub fn trans_final(b: &Behaviour) -> BTreeSet<EventSignature> {
    match &b.kind {
        BehaviourKind::Skip => BTreeSet::new(),
        BehaviourKind::Assign { role, .. } => [EventSignature::local(role, b)].into(),
        BehaviourKind::Interaction { sender, receiver, .. } => {
            [EventSignature::pair(sender, receiver, b)].into()
        }
        BehaviourKind::Seq(first, second) => {
            let f = trans_final(second);
            if f.is_empty() {
                trans_final(first)
            } else {
                f
            }
        }
        BehaviourKind::Par(l, r) => {
            let mut f = trans_final(l);
            f.extend(trans_final(r));
            f
        }
        BehaviourKind::If {
            evaluator,
            then_b,
            else_b,
            ..
        } => {
            let mut f = trans_final(then_b);
            f.extend(trans_final(else_b));
            if f.is_empty() {
                f.insert(EventSignature::local(evaluator, b));
            }
            f
        }
        BehaviourKind::While { evaluator, .. } => [EventSignature::local(evaluator, b)].into(),
        BehaviourKind::Scope { coordinator, body, .. } => scope_finals(coordinator, body, b),
    }
}

fn scope_finals(coordinator: &Role, body: &Behaviour, node: &Behaviour) -> BTreeSet<EventSignature> {
    let followers: Vec<Role> = roles_of(body).into_iter().filter(|r| r != coordinator).collect();
    if followers.is_empty() {
        [EventSignature::local(coordinator, node)].into()
    } else {
        followers
            .iter()
            .map(|f| EventSignature::pair(f, coordinator, node))
            .collect()
    }
}

type Key = (String, Role, Role);

struct Summary {
    initial: BTreeSet<EventSignature>,
    finals: BTreeSet<EventSignature>,
    keys: BTreeMap<Key, (NodeId, Pos)>,
}

/// Single bottom-up pass computing trans sets and interaction keys.
fn summarize(b: &Behaviour, out: &mut Vec<Violation>) -> Summary {
    match &b.kind {
        BehaviourKind::Skip => Summary {
            initial: BTreeSet::new(),
            finals: BTreeSet::new(),
            keys: BTreeMap::new(),
        },
        BehaviourKind::Assign { .. } => Summary {
            initial: trans_initial(b),
            finals: trans_final(b),
            keys: BTreeMap::new(),
        },
        BehaviourKind::Interaction {
            op, sender, receiver, ..
        } => Summary {
            initial: trans_initial(b),
            finals: trans_final(b),
            keys: [((op.clone(), sender.clone(), receiver.clone()), (b.meta.id.clone(), b.meta.pos))].into(),
        },
        BehaviourKind::Seq(first, second) => {
            let a = summarize(first, out);
            let c = summarize(second, out);
            for fin in &a.finals {
                for ini in &c.initial {
                    if !fin.shares_role_with(ini) {
                        out.push(Violation {
                            kind: ViolationKind::Sequence,
                            severity: Severity::Error,
                            nodes: (fin.origin.clone(), ini.origin.clone()),
                            pos: ini.pos,
                            message: format!(
                                "action at line {} (roles {}) may run before the preceding action at line {} (roles {}) completes: they share no role",
                                ini.pos.line,
                                ini.roles_text(),
                                fin.pos.line,
                                fin.roles_text()
                            ),
                        });
                    }
                }
            }
            let mut keys = a.keys;
            for (k, v) in c.keys {
                keys.entry(k).or_insert(v);
            }
            Summary {
                initial: if a.initial.is_empty() { c.initial } else { a.initial },
                finals: if c.finals.is_empty() { a.finals } else { c.finals },
                keys,
            }
        }
        BehaviourKind::Par(l, r) => {
            let a = summarize(l, out);
            let c = summarize(r, out);
            for (key, (right_id, right_pos)) in &c.keys {
                if let Some((left_id, _)) = a.keys.get(key) {
                    out.push(Violation {
                        kind: ViolationKind::Parallel,
                        severity: Severity::Error,
                        nodes: (left_id.clone(), right_id.clone()),
                        pos: *right_pos,
                        message: format!(
                            "operation `{}` from {} to {} is used on both sides of a parallel composition",
                            key.0, key.1, key.2
                        ),
                    });
                }
            }
            let mut initial = a.initial;
            initial.extend(c.initial);
            let mut finals = a.finals;
            finals.extend(c.finals);
            let mut keys = a.keys;
            for (k, v) in c.keys {
                keys.entry(k).or_insert(v);
            }
            Summary { initial, finals, keys }
        }
        BehaviourKind::If {
            evaluator,
            then_b,
            else_b,
            ..
        } => {
            let t = summarize(then_b, out);
            let e = summarize(else_b, out);
            let mut finals = t.finals;
            finals.extend(e.finals);
            if finals.is_empty() {
                finals.insert(EventSignature::local(evaluator, b));
            }
            let mut keys = t.keys;
            for (k, v) in e.keys {
                keys.entry(k).or_insert(v);
            }
            Summary {
                initial: trans_initial(b),
                finals,
                keys,
            }
        }
        BehaviourKind::While { body, .. } => {
            let s = summarize(body, out);
            Summary {
                initial: trans_initial(b),
                finals: trans_final(b),
                keys: s.keys,
            }
        }
        BehaviourKind::Scope { coordinator, body, .. } => {
            let s = summarize(body, out);
            Summary {
                initial: trans_initial(b),
                finals: scope_finals(coordinator, body, b),
                keys: s.keys,
            }
        }
    }
}

/// Connectedness violations of `b` (normalized internally). Runs in time
/// polynomial in the size of `b`.
pub fn check_connectedness(b: &Behaviour) -> Vec<Violation> {
    let mut out = Vec::new();
    summarize(&normalize(b), &mut out);
    out
}

fn check_calls(
    b: &Behaviour,
    declared: &BTreeSet<&str>,
    allow_namespaces: bool,
    out: &mut Vec<Violation>,
) {
    b.walk(&mut |node| {
        let exprs: Vec<&Expr> = match &node.kind {
            BehaviourKind::Assign { rhs, .. } => vec![rhs],
            BehaviourKind::Interaction { send_expr, .. } => vec![send_expr],
            BehaviourKind::If { guard, .. } | BehaviourKind::While { guard, .. } => vec![guard],
            _ => Vec::new(),
        };
        for e in exprs {
            e.walk(&mut |sub| match sub {
                Expr::Call { function, args } => {
                    if function == GET_INPUT {
                        if args.len() != 1 {
                            out.push(Violation::at(
                                ViolationKind::Name,
                                node,
                                format!("`{GET_INPUT}` takes exactly one argument, found {}", args.len()),
                            ));
                        }
                    } else if !declared.contains(function.as_str()) {
                        out.push(Violation::at(
                            ViolationKind::Name,
                            node,
                            format!("call to undeclared function `{function}`"),
                        ));
                    }
                }
                Expr::Namespaced { ns, key } if !allow_namespaces => {
                    out.push(Violation::at(
                        ViolationKind::Name,
                        node,
                        format!("`{ns}.{key}` is only meaningful in rule conditions"),
                    ));
                }
                _ => {}
            });
        }
    });
}

fn duplicate_functions(includes: &[crate::ast::Include], pos: Pos, out: &mut Vec<Violation>) {
    let mut seen = BTreeSet::new();
    for inc in includes {
        for f in &inc.functions {
            if !seen.insert(f.as_str()) {
                out.push(Violation {
                    kind: ViolationKind::Name,
                    severity: Severity::Error,
                    nodes: (NodeId::root(), NodeId::root()),
                    pos,
                    message: format!("function `{f}` is declared more than once"),
                });
            }
        }
    }
}

/// Variables each role may hold: assignment targets and receive targets.
fn assigned_vars(b: &Behaviour) -> BTreeMap<Role, BTreeSet<String>> {
    let mut out: BTreeMap<Role, BTreeSet<String>> = BTreeMap::new();
    b.walk(&mut |node| match &node.kind {
        BehaviourKind::Assign { var, role, .. } => {
            out.entry(role.clone()).or_default().insert(var.clone());
        }
        BehaviourKind::Interaction { receiver, recv_var, .. } => {
            out.entry(receiver.clone()).or_default().insert(recv_var.clone());
        }
        _ => {}
    });
    out
}

/// Name, role, and declaration checks for a whole program. Guard variables
/// that are never assigned at their evaluator are warnings.
pub fn validate_program(p: &Program) -> Vec<Violation> {
    let mut out = Vec::new();
    let top = Pos { line: 1, column: 1 };
    match &p.preamble.starter {
        None => out.push(Violation {
            kind: ViolationKind::Role,
            severity: Severity::Error,
            nodes: (NodeId::root(), NodeId::root()),
            pos: top,
            message: "the preamble must declare a `starter` role".into(),
        }),
        Some(s) => {
            if !roles_of(&p.body).contains(s) && !p.preamble.locations.contains_key(s) {
                out.push(Violation {
                    kind: ViolationKind::Role,
                    severity: Severity::Error,
                    nodes: (NodeId::root(), NodeId::root()),
                    pos: top,
                    message: format!("starter `{s}` does not occur in the choreography"),
                });
            }
        }
    }
    duplicate_functions(&p.includes, top, &mut out);
    check_calls(&p.body, &p.declared_functions(), false, &mut out);

    let vars = assigned_vars(&p.body);
    let empty = BTreeSet::new();
    p.body.walk(&mut |node| {
        if let BehaviourKind::If { guard, evaluator, .. } | BehaviourKind::While { guard, evaluator, .. } =
            &node.kind
        {
            let known = vars.get(evaluator).unwrap_or(&empty);
            for v in guard.variables() {
                if !known.contains(v) {
                    out.push(Violation {
                        kind: ViolationKind::Name,
                        severity: Severity::Warning,
                        nodes: (node.meta.id.clone(), node.meta.id.clone()),
                        pos: node.meta.pos,
                        message: format!("guard variable `{v}` is never assigned at `{evaluator}`"),
                    });
                }
            }
        }
    });
    out
}

/// Connectedness of the rule body plus name checks on condition and body.
pub fn check_rule(rule: &Rule) -> Vec<Violation> {
    let mut out = check_connectedness(&rule.body);
    duplicate_functions(&rule.includes, rule.pos, &mut out);
    rule.condition.walk(&mut |e| match e {
        Expr::Namespaced { ns, key } if ns != "N" && ns != "E" => out.push(Violation {
            kind: ViolationKind::Name,
            severity: Severity::Error,
            nodes: (NodeId::root(), NodeId::root()),
            pos: rule.pos,
            message: format!("unknown namespace `{ns}` in `{ns}.{key}`; use `N.` or `E.`"),
        }),
        Expr::Call { function, .. } => out.push(Violation {
            kind: ViolationKind::Name,
            severity: Severity::Error,
            nodes: (NodeId::root(), NodeId::root()),
            pos: rule.pos,
            message: format!("rule conditions cannot call functions (`{function}`)"),
        }),
        _ => {}
    });
    check_calls(&rule.body, &declared(&rule.includes), false, &mut out);
    out
}

/// Validation plus connectedness, ordered by position.
pub fn check_program(p: &Program) -> Vec<Violation> {
    let mut out = validate_program(p);
    out.extend(check_connectedness(&p.body));
    out.sort_by_key(|v| (v.pos.line, v.pos.column));
    out
}

/// Parses and checks a program. Parse failures come back as `Err`;
/// parser warnings are folded into the violation list.
pub fn check_source(text: &str) -> Result<(Program, Vec<Violation>), Vec<Diagnostic>> {
    let (program, warnings) = parse_program_with_warnings(text)?;
    let mut violations: Vec<Violation> = warnings.iter().map(Violation::from).collect();
    violations.extend(check_program(&program));
    Ok((program, violations))
}
