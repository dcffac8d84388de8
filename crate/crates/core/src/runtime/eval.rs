//! Expression evaluation over a role-local store.

use std::collections::BTreeMap;

use crate::ast::{BinaryOp, Expr, UnaryOp, Value};

use super::RuntimeError;

pub type Store = BTreeMap<String, Value>;

/// Resolves `N.`/`E.` references. Programs never contain them, so the
/// default resolver rejects every lookup.
pub trait Lookup {
    fn var(&self, name: &str) -> Option<Value>;
    fn namespaced(&self, ns: &str, key: &str) -> Option<Value> {
        let _ = (ns, key);
        None
    }
}

impl Lookup for Store {
    fn var(&self, name: &str) -> Option<Value> {
        self.get(name).cloned()
    }
}

/// Resolves function calls during evaluation.
pub type CallFn<'a> = dyn FnMut(&str, Vec<Value>) -> Result<Value, RuntimeError> + 'a;

/// Evaluates `e`. `call` resolves function calls (external functions and
/// `getInput`); `role` only labels errors.
pub fn eval_with(
    e: &Expr,
    env: &dyn Lookup,
    role: &str,
    call: &mut CallFn<'_>,
) -> Result<Value, RuntimeError> {
    match e {
        Expr::Lit(v) => Ok(v.clone()),
        Expr::Var(name) => env.var(name).ok_or_else(|| RuntimeError::Unbound {
            role: role.to_string(),
            var: name.clone(),
        }),
        Expr::Namespaced { ns, key } => env.namespaced(ns, key).ok_or_else(|| RuntimeError::Unbound {
            role: role.to_string(),
            var: format!("{ns}.{key}"),
        }),
        Expr::Unary(UnaryOp::Not, inner) => match eval_with(inner, env, role, call)? {
            Value::Bool(b) => Ok(Value::Bool(!b)),
            other => Err(RuntimeError::Type(format!("`!` expects a boolean, found {}", other.type_name()))),
        },
        Expr::Binary(BinaryOp::And, l, r) => {
            if expect_bool(eval_with(l, env, role, call)?, "and")? {
                Ok(Value::Bool(expect_bool(eval_with(r, env, role, call)?, "and")?))
            } else {
                Ok(Value::Bool(false))
            }
        }
        Expr::Binary(BinaryOp::Or, l, r) => {
            if expect_bool(eval_with(l, env, role, call)?, "or")? {
                Ok(Value::Bool(true))
            } else {
                Ok(Value::Bool(expect_bool(eval_with(r, env, role, call)?, "or")?))
            }
        }
        Expr::Binary(op, l, r) => {
            let a = eval_with(l, env, role, call)?;
            let b = eval_with(r, env, role, call)?;
            binary(*op, a, b)
        }
        Expr::Call { function, args } => {
            let mut values = Vec::with_capacity(args.len());
            for a in args {
                values.push(eval_with(a, env, role, call)?);
            }
            call(function, values)
        }
    }
}

/// Evaluates a call-free expression against a store.
pub fn eval_expr(e: &Expr, store: &Store, role: &str) -> Result<Value, RuntimeError> {
    eval_with(e, store, role, &mut |f, _| {
        Err(RuntimeError::External(format!("call to `{f}` outside of a running role")))
    })
}

fn expect_bool(v: Value, op: &str) -> Result<bool, RuntimeError> {
    match v {
        Value::Bool(b) => Ok(b),
        other => Err(RuntimeError::Type(format!("`{op}` expects booleans, found {}", other.type_name()))),
    }
}

fn binary(op: BinaryOp, a: Value, b: Value) -> Result<Value, RuntimeError> {
    use BinaryOp::*;
    let mismatch = |a: &Value, b: &Value| {
        RuntimeError::Type(format!(
            "`{}` cannot combine {} and {}",
            op.symbol(),
            a.type_name(),
            b.type_name()
        ))
    };
    let overflow = || RuntimeError::Type(format!("integer overflow in `{}`", op.symbol()));
    match op {
        Add => match (&a, &b) {
            (Value::Int(x), Value::Int(y)) => x.checked_add(*y).map(Value::Int).ok_or_else(overflow),
            _ => Ok(Value::Str(a.render() + &b.render())),
        },
        Sub | Mul | Div => match (&a, &b) {
            (Value::Int(x), Value::Int(y)) => match op {
                Sub => x.checked_sub(*y).map(Value::Int).ok_or_else(overflow),
                Mul => x.checked_mul(*y).map(Value::Int).ok_or_else(overflow),
                _ if *y == 0 => Err(RuntimeError::DivisionByZero),
                _ => x.checked_div(*y).map(Value::Int).ok_or_else(overflow),
            },
            _ => Err(mismatch(&a, &b)),
        },
        Eq | Ne => {
            let same = match (&a, &b) {
                (Value::Int(_), Value::Int(_)) | (Value::Bool(_), Value::Bool(_)) | (Value::Str(_), Value::Str(_)) => {
                    a == b
                }
                _ => a.render() == b.render(),
            };
            Ok(Value::Bool(if op == Eq { same } else { !same }))
        }
        Lt | Gt | Le | Ge => {
            let ord = match (&a, &b) {
                (Value::Int(x), Value::Int(y)) => x.cmp(y),
                (Value::Str(x), Value::Str(y)) => x.cmp(y),
                _ => return Err(mismatch(&a, &b)),
            };
            Ok(Value::Bool(match op {
                Lt => ord.is_lt(),
                Gt => ord.is_gt(),
                Le => ord.is_le(),
                _ => ord.is_ge(),
            }))
        }
        And | Or => unreachable!("short-circuit operators are handled by the caller"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_expr;

    fn eval(src: &str, vars: &[(&str, Value)]) -> Result<Value, RuntimeError> {
        let store: Store = vars.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        eval_expr(&parse_expr(src).unwrap(), &store, "r")
    }

    #[test]
    fn increment() {
        assert_eq!(eval("1 + x", &[("x", Value::Int(0))]).unwrap(), Value::Int(1));
    }

    #[test]
    fn concatenation() {
        assert_eq!(
            eval(r#""Bob proposes " + event"#, &[("event", Value::from("picnic"))]).unwrap(),
            Value::from("Bob proposes picnic")
        );
        assert_eq!(eval(r#""n" + 1"#, &[]).unwrap(), Value::from("n1"));
    }

    #[test]
    fn negation_and_short_circuit() {
        assert_eq!(eval("!end", &[("end", Value::Bool(false))]).unwrap(), Value::Bool(true));
        // The unbound right operand is never evaluated.
        assert_eq!(eval("false and missing", &[]).unwrap(), Value::Bool(false));
        assert_eq!(eval("true or missing", &[]).unwrap(), Value::Bool(true));
    }

    #[test]
    fn mixed_equality_uses_rendering() {
        assert_eq!(eval(r#"1 == "1""#, &[]).unwrap(), Value::Bool(true));
        assert_eq!(eval(r#"true != "true""#, &[]).unwrap(), Value::Bool(false));
    }

    #[test]
    fn errors() {
        assert!(matches!(eval("y + 1", &[]), Err(RuntimeError::Unbound { ref var, .. }) if var == "y"));
        assert_eq!(eval("1 / 0", &[]), Err(RuntimeError::DivisionByZero));
        assert!(matches!(eval(r#"1 < "a""#, &[]), Err(RuntimeError::Type(_))));
    }
}
