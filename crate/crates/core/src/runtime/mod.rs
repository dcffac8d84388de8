//! Role execution: expression evaluation, the per-role machine, and the
//! threaded drivers used by `run`.

pub mod driver;
pub mod eval;
pub mod machine;
pub mod message;

use std::collections::{BTreeMap, VecDeque};

pub use driver::{call_remote, run_all, run_role, ExternalLink, InputSource, ManagerLink, RoleOutcome, RunOptions, TcpTransport};
pub use eval::{eval_expr, Store};
pub use machine::{Action, Effects, RoleMachine, TraceEvent};
pub use message::{Mailbox, Message, MessageKind};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum RuntimeError {
    #[error("unbound variable `{var}` at role `{role}`")]
    Unbound { role: String, var: String },
    #[error("type error: {0}")]
    Type(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("input: {0}")]
    Input(String),
    #[error("external call failed: {0}")]
    External(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("cannot parse adapted code: {0}")]
    Parse(String),
}

/// Scripted `getInput` answers, per role, consumed front to back.
pub type InputScript = BTreeMap<String, VecDeque<String>>;

/// Reads an input script: a JSON object mapping role names to arrays of
/// strings.
pub fn parse_input_script(text: &str) -> Result<InputScript, serde_json::Error> {
    serde_json::from_str(text)
}
