//! Source rendering for behaviours, expressions, and rules.

use std::fmt::Write;

use crate::ast::{normalize, quote, Behaviour, BehaviourKind, Expr, Include, Rule, UnaryOp, Value};

/// Renders `b` as source text. The output is the normalized form of `b`,
/// so `parse(pretty_print(b)) == normalize(b)`.
pub fn pretty_print(b: &Behaviour) -> String {
    let mut out = String::new();
    write_behaviour(&mut out, &normalize(b), 0);
    out
}

pub fn expr_to_string(e: &Expr) -> String {
    let mut out = String::new();
    write_expr(&mut out, e, 0);
    out
}

pub fn include_to_string(inc: &Include) -> String {
    let mut s = format!("include {} from {}", inc.functions.join(", "), quote(&inc.address));
    if let Some(p) = &inc.protocol {
        let _ = write!(s, " with {p}");
    }
    s
}

pub fn rule_to_string(rule: &Rule) -> String {
    let mut out = String::from("rule {\n");
    for inc in &rule.includes {
        let _ = writeln!(out, "  {}", include_to_string(inc));
    }
    let _ = writeln!(out, "  on {{ {} }}", expr_to_string(&rule.condition));
    out.push_str("  do {\n");
    let mut body = String::new();
    write_behaviour(&mut body, &normalize(&rule.body), 2);
    let _ = writeln!(out, "    {body}");
    out.push_str("  }\n}\n");
    out
}

fn indent(out: &mut String, level: usize) {
    for _ in 0..level {
        out.push_str("  ");
    }
}

fn block(out: &mut String, b: &Behaviour, level: usize) {
    out.push_str("{\n");
    indent(out, level + 1);
    write_behaviour(out, b, level + 1);
    out.push('\n');
    indent(out, level);
    out.push('}');
}

fn write_behaviour(out: &mut String, b: &Behaviour, level: usize) {
    match &b.kind {
        BehaviourKind::Skip => out.push_str("skip"),
        BehaviourKind::Assign { var, role, rhs } => {
            let _ = write!(out, "{var}@{role} = {}", expr_to_string(rhs));
        }
        BehaviourKind::Interaction {
            op,
            sender,
            send_expr,
            receiver,
            recv_var,
        } => {
            let _ = write!(out, "{op}: {sender}( {} ) -> {receiver}( {recv_var} )", expr_to_string(send_expr));
        }
        BehaviourKind::Seq(first, second) => {
            // `;` is right-associative: a left-nested sequence needs braces.
            if matches!(first.kind, BehaviourKind::Seq(..)) {
                block(out, first, level);
            } else {
                write_behaviour(out, first, level);
            }
            out.push_str(";\n");
            indent(out, level);
            write_behaviour(out, second, level);
        }
        BehaviourKind::Par(left, right) => {
            if matches!(left.kind, BehaviourKind::Seq(..) | BehaviourKind::Par(..)) {
                block(out, left, level);
            } else {
                write_behaviour(out, left, level);
            }
            out.push('\n');
            indent(out, level);
            out.push_str("| ");
            if matches!(right.kind, BehaviourKind::Seq(..)) {
                block(out, right, level);
            } else {
                write_behaviour(out, right, level);
            }
        }
        BehaviourKind::If {
            guard,
            evaluator,
            then_b,
            else_b,
        } => {
            let _ = write!(out, "if ( {} )@{evaluator} ", expr_to_string(guard));
            block(out, then_b, level);
            if !else_b.is_skip() {
                out.push_str(" else ");
                block(out, else_b, level);
            }
        }
        BehaviourKind::While { guard, evaluator, body } => {
            let _ = write!(out, "while ( {} )@{evaluator} ", expr_to_string(guard));
            block(out, body, level);
        }
        BehaviourKind::Scope {
            coordinator,
            body,
            props,
        } => {
            let _ = write!(out, "scope @{coordinator} ");
            block(out, body, level);
            if !props.is_empty() {
                let entries: Vec<String> = props.iter().map(|(k, v)| format!("N.{k} = {v}")).collect();
                let _ = write!(out, " prop {{ {} }}", entries.join(", "));
            }
        }
    }
}

fn write_expr(out: &mut String, e: &Expr, min_prec: u8) {
    match e {
        Expr::Lit(Value::Int(i)) if *i < 0 && min_prec > 0 => {
            let _ = write!(out, "({i})");
        }
        Expr::Lit(v) => {
            let _ = write!(out, "{v}");
        }
        Expr::Var(v) => out.push_str(v),
        Expr::Namespaced { ns, key } => {
            let _ = write!(out, "{ns}.{key}");
        }
        Expr::Unary(UnaryOp::Not, inner) => {
            out.push('!');
            write_expr(out, inner, u8::MAX);
        }
        Expr::Binary(op, l, r) => {
            let p = op.precedence();
            let paren = p < min_prec;
            if paren {
                out.push('(');
            }
            write_expr(out, l, p);
            let _ = write!(out, " {} ", op.symbol());
            write_expr(out, r, p + 1);
            if paren {
                out.push(')');
            }
        }
        Expr::Call { function, args } => {
            out.push_str(function);
            out.push('(');
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_expr(out, a, 0);
            }
            out.push(')');
        }
    }
}
