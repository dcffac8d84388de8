//! Adaptable choreographies: parse, check, project, and run AIOC programs.

pub mod adapt;
pub mod ast;
pub mod check;
pub mod harness;
pub mod net;
pub mod parser;
pub mod pretty;
pub mod project;
pub mod runtime;
pub mod sim;

pub use ast::{Behaviour, BehaviourKind, Expr, NodeId, Program, Role, Rule, Value};
pub use check::{check_connectedness, check_program, check_rule, validate_program, Violation, ViolationKind};
pub use parser::{parse_behaviour, parse_expr, parse_program, parse_rules, Diagnostic};
pub use pretty::pretty_print;
pub use project::{project, ProjectedApp};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/language.md")]
    mod language {}
    #[doc = include_str!("../../../book/src/connectedness.md")]
    mod connectedness {}
    #[doc = include_str!("../../../book/src/projection.md")]
    mod projection {}
    #[doc = include_str!("../../../book/src/adaptation.md")]
    mod adaptation {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
