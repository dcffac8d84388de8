//! Parser for choreography programs (`.aioc`) and rule files (`.arl`).
//!
//! Hand-written lexer plus recursive descent. Parsing stops at the first
//! syntax error; warnings (unknown wire protocols) are collected alongside a
//! successful result.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ast::{
    BinaryOp, Behaviour, BehaviourKind, Expr, Include, Meta, NodeId, Pos, Preamble, Program,
    PropertySet, Role, Rule, UnaryOp, Value,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
    pub line: u32,
    pub column: u32,
}

impl Diagnostic {
    pub fn error(pos: Pos, message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Error,
            message: message.into(),
            line: pos.line,
            column: pos.column,
        }
    }

    pub fn warning(pos: Pos, message: impl Into<String>) -> Self {
        Diagnostic {
            severity: Severity::Warning,
            message: message.into(),
            line: pos.line,
            column: pos.column,
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{}:{}: {}: {}", self.line, self.column, sev, self.message)
    }
}

/// Protocols accepted without a warning. Only the JSON protocol is spoken;
/// the others are recognised names from existing deployments.
pub const KNOWN_PROTOCOLS: &[&str] = &["json", "http", "soap", "sodep"];

const RESERVED: &[&str] = &[
    "include", "from", "with", "preamble", "aioc", "rule", "if", "else", "while", "scope", "prop",
    "skip", "true", "false", "and", "or",
];

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Int(i64),
    LBrace,
    RBrace,
    LParen,
    RParen,
    Comma,
    Semi,
    Pipe,
    At,
    Colon,
    Arrow,
    Dot,
    Assign,
    EqEq,
    Ne,
    Lt,
    Gt,
    Le,
    Ge,
    Plus,
    Minus,
    Star,
    Slash,
    Bang,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Str(s) => format!("string {}", crate::ast::quote(s)),
            Tok::Int(i) => format!("integer {i}"),
            Tok::Eof => "end of input".to_string(),
            other => format!("`{}`", other.symbol()),
        }
    }

    fn symbol(&self) -> &'static str {
        match self {
            Tok::LBrace => "{",
            Tok::RBrace => "}",
            Tok::LParen => "(",
            Tok::RParen => ")",
            Tok::Comma => ",",
            Tok::Semi => ";",
            Tok::Pipe => "|",
            Tok::At => "@",
            Tok::Colon => ":",
            Tok::Arrow => "->",
            Tok::Dot => ".",
            Tok::Assign => "=",
            Tok::EqEq => "==",
            Tok::Ne => "!=",
            Tok::Lt => "<",
            Tok::Gt => ">",
            Tok::Le => "<=",
            Tok::Ge => ">=",
            Tok::Plus => "+",
            Tok::Minus => "-",
            Tok::Star => "*",
            Tok::Slash => "/",
            Tok::Bang => "!",
            _ => "?",
        }
    }
}

fn lex(text: &str) -> Result<Vec<(Tok, Pos)>, Diagnostic> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1u32, 1u32);
    macro_rules! bump {
        () => {{
            if chars[i] == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            i += 1;
        }};
    }
    while i < chars.len() {
        let c = chars[i];
        let pos = Pos { line, column: col };
        if c.is_whitespace() {
            bump!();
            continue;
        }
        if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                bump!();
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                bump!();
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), pos));
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                bump!();
            }
            let digits: String = chars[start..i].iter().collect();
            let n = digits
                .parse::<i64>()
                .map_err(|_| Diagnostic::error(pos, format!("integer literal {digits} out of range")))?;
            out.push((Tok::Int(n), pos));
            continue;
        }
        if c == '"' {
            bump!();
            let mut s = String::new();
            loop {
                match chars.get(i) {
                    None => return Err(Diagnostic::error(pos, "unterminated string literal")),
                    Some('"') => {
                        bump!();
                        break;
                    }
                    Some('\\') => {
                        let esc_pos = Pos { line, column: col };
                        bump!();
                        match chars.get(i) {
                            Some('"') => s.push('"'),
                            Some('\\') => s.push('\\'),
                            _ => return Err(Diagnostic::error(esc_pos, "unknown escape sequence")),
                        }
                        bump!();
                    }
                    Some(&ch) => {
                        s.push(ch);
                        bump!();
                    }
                }
            }
            out.push((Tok::Str(s), pos));
            continue;
        }
        let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
        let tok2 = match two.as_str() {
            "->" => Some(Tok::Arrow),
            "==" => Some(Tok::EqEq),
            "!=" => Some(Tok::Ne),
            "<=" => Some(Tok::Le),
            ">=" => Some(Tok::Ge),
            _ => None,
        };
        if let Some(t) = tok2 {
            bump!();
            bump!();
            out.push((t, pos));
            continue;
        }
        let tok = match c {
            '{' => Tok::LBrace,
            '}' => Tok::RBrace,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ',' => Tok::Comma,
            ';' => Tok::Semi,
            '|' => Tok::Pipe,
            '@' => Tok::At,
            ':' => Tok::Colon,
            '.' => Tok::Dot,
            '=' => Tok::Assign,
            '<' => Tok::Lt,
            '>' => Tok::Gt,
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '*' => Tok::Star,
            '/' => Tok::Slash,
            '!' => Tok::Bang,
            other => return Err(Diagnostic::error(pos, format!("unexpected character `{other}`"))),
        };
        bump!();
        out.push((tok, pos));
    }
    out.push((Tok::Eof, Pos { line, column: col }));
    Ok(out)
}

type PResult<T> = Result<T, Diagnostic>;

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
    warnings: Vec<Diagnostic>,
}

impl Parser {
    fn new(text: &str) -> PResult<Self> {
        Ok(Parser {
            toks: lex(text)?,
            at: 0,
            warnings: Vec::new(),
        })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.at + 1).min(self.toks.len() - 1)].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn advance(&mut self) -> Tok {
        let t = self.toks[self.at].0.clone();
        if self.at < self.toks.len() - 1 {
            self.at += 1;
        }
        t
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.peek() == t {
            self.advance();
            true
        } else {
            false
        }
    }

    fn is_word(&self, w: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == w)
    }

    fn unexpected(&self, wanted: &str) -> Diagnostic {
        Diagnostic::error(self.pos(), format!("expected {wanted}, found {}", self.peek().describe()))
    }

    fn expect(&mut self, t: &Tok) -> PResult<()> {
        if self.eat(t) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{}`", t.symbol())))
        }
    }

    fn expect_word(&mut self, w: &str) -> PResult<()> {
        if self.is_word(w) {
            self.advance();
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{w}`")))
        }
    }

    fn ident(&mut self, what: &str) -> PResult<String> {
        match self.peek() {
            Tok::Ident(s) if !RESERVED.contains(&s.as_str()) => {
                let s = s.clone();
                self.advance();
                Ok(s)
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn role(&mut self) -> PResult<Role> {
        self.ident("role name").map(Role)
    }

    fn string(&mut self, what: &str) -> PResult<String> {
        match self.peek() {
            Tok::Str(s) => {
                let s = s.clone();
                self.advance();
                Ok(s)
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn include(&mut self) -> PResult<Include> {
        self.expect_word("include")?;
        let mut functions = vec![self.ident("function name")?];
        while self.eat(&Tok::Comma) {
            functions.push(self.ident("function name")?);
        }
        self.expect_word("from")?;
        let address = self.string("service address string")?;
        let mut protocol = None;
        if self.is_word("with") {
            self.advance();
            let pos = self.pos();
            let p = self.ident("protocol name")?;
            if !KNOWN_PROTOCOLS.contains(&p.as_str()) {
                self.warnings
                    .push(Diagnostic::warning(pos, format!("unknown protocol `{p}`; the JSON protocol will be used")));
            }
            protocol = Some(p);
        }
        Ok(Include {
            functions,
            address,
            protocol,
        })
    }

    fn preamble(&mut self) -> PResult<Preamble> {
        self.expect_word("preamble")?;
        self.expect(&Tok::LBrace)?;
        let mut pre = Preamble::default();
        loop {
            if self.eat(&Tok::RBrace) {
                break;
            }
            if self.eat(&Tok::Comma) || self.eat(&Tok::Semi) {
                continue;
            }
            let pos = self.pos();
            if self.is_word("starter") {
                self.advance();
                self.expect(&Tok::Colon)?;
                let r = self.role()?;
                if pre.starter.is_some() {
                    return Err(Diagnostic::error(pos, "duplicate starter declaration"));
                }
                pre.starter = Some(r);
            } else if self.is_word("location") {
                self.advance();
                self.expect(&Tok::At)?;
                let r = self.role()?;
                self.expect(&Tok::Assign)?;
                let addr = self.string("location string")?;
                pre.locations.insert(r, addr);
            } else {
                return Err(self.unexpected("`starter`, `location` or `}`"));
            }
        }
        Ok(pre)
    }

    /// Sequence of parallel compositions, up to (not including) `}` or EOF.
    fn behaviour(&mut self) -> PResult<Behaviour> {
        let pos = self.pos();
        if matches!(self.peek(), Tok::RBrace | Tok::Eof) {
            return Ok(at(pos, BehaviourKind::Skip));
        }
        let mut items = vec![self.parallel()?];
        while self.eat(&Tok::Semi) {
            if matches!(self.peek(), Tok::RBrace | Tok::Eof) {
                break;
            }
            items.push(self.parallel()?);
        }
        Ok(fold_right(items, BehaviourKind::Seq))
    }

    fn parallel(&mut self) -> PResult<Behaviour> {
        let mut items = vec![self.statement()?];
        while self.eat(&Tok::Pipe) {
            items.push(self.statement()?);
        }
        Ok(fold_right(items, BehaviourKind::Par))
    }

    fn block(&mut self) -> PResult<Behaviour> {
        self.expect(&Tok::LBrace)?;
        let b = self.behaviour()?;
        self.expect(&Tok::RBrace)?;
        Ok(b)
    }

    fn guard(&mut self) -> PResult<(Expr, Role)> {
        self.expect(&Tok::LParen)?;
        let g = self.expr()?;
        self.expect(&Tok::RParen)?;
        self.expect(&Tok::At)?;
        Ok((g, self.role()?))
    }

    fn statement(&mut self) -> PResult<Behaviour> {
        let pos = self.pos();
        match self.peek().clone() {
            Tok::LBrace => self.block(),
            Tok::Ident(w) if w == "skip" => {
                self.advance();
                Ok(at(pos, BehaviourKind::Skip))
            }
            Tok::Ident(w) if w == "if" => {
                self.advance();
                let (guard, evaluator) = self.guard()?;
                let then_b = self.block()?;
                let else_b = if self.is_word("else") {
                    self.advance();
                    self.block()?
                } else {
                    at(self.pos(), BehaviourKind::Skip)
                };
                Ok(at(
                    pos,
                    BehaviourKind::If {
                        guard,
                        evaluator,
                        then_b: Box::new(then_b),
                        else_b: Box::new(else_b),
                    },
                ))
            }
            Tok::Ident(w) if w == "while" => {
                self.advance();
                let (guard, evaluator) = self.guard()?;
                let body = self.block()?;
                Ok(at(
                    pos,
                    BehaviourKind::While {
                        guard,
                        evaluator,
                        body: Box::new(body),
                    },
                ))
            }
            Tok::Ident(w) if w == "scope" => {
                self.advance();
                self.expect(&Tok::At)?;
                let coordinator = self.role()?;
                let body = self.block()?;
                let mut props = PropertySet::new();
                if self.is_word("prop") {
                    self.advance();
                    self.expect(&Tok::LBrace)?;
                    loop {
                        let ppos = self.pos();
                        let ns = self.ident("`N`")?;
                        if ns != "N" {
                            return Err(Diagnostic::error(ppos, "scope properties live in the `N` namespace"));
                        }
                        self.expect(&Tok::Dot)?;
                        let key = self.ident("property name")?;
                        self.expect(&Tok::Assign)?;
                        let value = self.literal()?;
                        if props.insert(key.clone(), value).is_some() {
                            return Err(Diagnostic::error(ppos, format!("duplicate property `N.{key}`")));
                        }
                        if !self.eat(&Tok::Comma) {
                            break;
                        }
                    }
                    self.expect(&Tok::RBrace)?;
                }
                Ok(at(
                    pos,
                    BehaviourKind::Scope {
                        coordinator,
                        body: Box::new(body),
                        props,
                    },
                ))
            }
            Tok::Ident(_) => {
                let name = self.ident("statement")?;
                match self.peek() {
                    Tok::At => {
                        self.advance();
                        let role = self.role()?;
                        self.expect(&Tok::Assign)?;
                        let rhs = self.expr()?;
                        Ok(at(pos, BehaviourKind::Assign { var: name, role, rhs }))
                    }
                    Tok::Colon => {
                        self.advance();
                        let sender = self.role()?;
                        self.expect(&Tok::LParen)?;
                        let send_expr = self.expr()?;
                        self.expect(&Tok::RParen)?;
                        self.expect(&Tok::Arrow)?;
                        let rpos = self.pos();
                        let receiver = self.role()?;
                        if receiver == sender {
                            return Err(Diagnostic::error(
                                rpos,
                                format!("interaction `{name}` has the same sender and receiver `{sender}`"),
                            ));
                        }
                        self.expect(&Tok::LParen)?;
                        let recv_var = self.ident("receiving variable")?;
                        self.expect(&Tok::RParen)?;
                        Ok(at(
                            pos,
                            BehaviourKind::Interaction {
                                op: name,
                                sender,
                                send_expr,
                                receiver,
                                recv_var,
                            },
                        ))
                    }
                    _ => Err(self.unexpected("`@` or `:`")),
                }
            }
            _ => Err(self.unexpected("statement")),
        }
    }

    fn literal(&mut self) -> PResult<Value> {
        match self.peek().clone() {
            Tok::Int(i) => {
                self.advance();
                Ok(Value::Int(i))
            }
            Tok::Minus if matches!(self.peek2(), Tok::Int(_)) => {
                self.advance();
                match self.advance() {
                    Tok::Int(i) => Ok(Value::Int(-i)),
                    _ => unreachable!(),
                }
            }
            Tok::Str(s) => {
                self.advance();
                Ok(Value::Str(s))
            }
            Tok::Ident(w) if w == "true" || w == "false" => {
                self.advance();
                Ok(Value::Bool(w == "true"))
            }
            _ => Err(self.unexpected("literal")),
        }
    }

    fn expr(&mut self) -> PResult<Expr> {
        self.binary(1)
    }

    fn binary_op(&self) -> Option<BinaryOp> {
        Some(match self.peek() {
            Tok::Ident(w) if w == "or" => BinaryOp::Or,
            Tok::Ident(w) if w == "and" => BinaryOp::And,
            Tok::EqEq => BinaryOp::Eq,
            Tok::Ne => BinaryOp::Ne,
            Tok::Lt => BinaryOp::Lt,
            Tok::Gt => BinaryOp::Gt,
            Tok::Le => BinaryOp::Le,
            Tok::Ge => BinaryOp::Ge,
            Tok::Plus => BinaryOp::Add,
            Tok::Minus => BinaryOp::Sub,
            Tok::Star => BinaryOp::Mul,
            Tok::Slash => BinaryOp::Div,
            _ => return None,
        })
    }

    /// Precedence climbing; all binary operators are left-associative.
    fn binary(&mut self, min_prec: u8) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.binary_op() {
            if op.precedence() < min_prec {
                break;
            }
            self.advance();
            let rhs = self.binary(op.precedence() + 1)?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> PResult<Expr> {
        if self.eat(&Tok::Bang) {
            return Ok(Expr::Unary(UnaryOp::Not, Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> PResult<Expr> {
        match self.peek().clone() {
            Tok::LParen => {
                self.advance();
                let e = self.expr()?;
                self.expect(&Tok::RParen)?;
                Ok(e)
            }
            Tok::Int(_) | Tok::Str(_) | Tok::Minus => Ok(Expr::Lit(self.literal()?)),
            Tok::Ident(w) if w == "true" || w == "false" => Ok(Expr::Lit(self.literal()?)),
            Tok::Ident(_) => {
                let name = self.ident("expression")?;
                match self.peek() {
                    Tok::Dot => {
                        self.advance();
                        let key = self.ident("name after `.`")?;
                        Ok(Expr::Namespaced { ns: name, key })
                    }
                    Tok::LParen => {
                        self.advance();
                        let mut args = Vec::new();
                        if !self.eat(&Tok::RParen) {
                            loop {
                                args.push(self.expr()?);
                                if self.eat(&Tok::RParen) {
                                    break;
                                }
                                self.expect(&Tok::Comma)?;
                            }
                        }
                        Ok(Expr::Call { function: name, args })
                    }
                    _ => Ok(Expr::Var(name)),
                }
            }
            _ => Err(self.unexpected("expression")),
        }
    }

    fn rule(&mut self) -> PResult<Rule> {
        let pos = self.pos();
        self.expect_word("rule")?;
        self.expect(&Tok::LBrace)?;
        let mut includes = Vec::new();
        while self.is_word("include") {
            includes.push(self.include()?);
        }
        self.expect_word("on")?;
        self.expect(&Tok::LBrace)?;
        let condition = self.expr()?;
        self.expect(&Tok::RBrace)?;
        self.expect_word("do")?;
        let mut body = self.block()?;
        self.expect(&Tok::RBrace)?;
        body.assign_ids(NodeId::root());
        Ok(Rule {
            includes,
            condition,
            body,
            pos,
        })
    }
}

fn at(pos: Pos, kind: BehaviourKind) -> Behaviour {
    Behaviour {
        meta: Meta {
            id: NodeId::root(),
            pos,
        },
        kind,
    }
}

fn fold_right(
    mut items: Vec<Behaviour>,
    mk: fn(Box<Behaviour>, Box<Behaviour>) -> BehaviourKind,
) -> Behaviour {
    let mut acc = items.pop().expect("at least one item");
    while let Some(prev) = items.pop() {
        let pos = prev.meta.pos;
        acc = at(pos, mk(Box::new(prev), Box::new(acc)));
    }
    acc
}

/// Parses a program, returning it together with any warnings.
pub fn parse_program_with_warnings(text: &str) -> Result<(Program, Vec<Diagnostic>), Vec<Diagnostic>> {
    let run = || -> PResult<(Program, Vec<Diagnostic>)> {
        let mut p = Parser::new(text)?;
        let mut includes = Vec::new();
        while p.is_word("include") {
            includes.push(p.include()?);
        }
        let preamble = if p.is_word("preamble") {
            p.preamble()?
        } else {
            Preamble::default()
        };
        p.expect_word("aioc")?;
        let mut body = p.block()?;
        if *p.peek() != Tok::Eof {
            return Err(p.unexpected("end of input"));
        }
        body.assign_ids(NodeId::root());
        Ok((
            Program {
                includes,
                preamble,
                body,
            },
            p.warnings,
        ))
    };
    run().map_err(|d| vec![d])
}

pub fn parse_program(text: &str) -> Result<Program, Vec<Diagnostic>> {
    parse_program_with_warnings(text).map(|(p, _)| p)
}

/// Parses zero or more `rule { ... }` blocks.
pub fn parse_rules(text: &str) -> Result<Vec<Rule>, Vec<Diagnostic>> {
    let run = || -> PResult<Vec<Rule>> {
        let mut p = Parser::new(text)?;
        let mut rules = Vec::new();
        while *p.peek() != Tok::Eof {
            rules.push(p.rule()?);
        }
        Ok(rules)
    };
    run().map_err(|d| vec![d])
}

/// Parses a bare behaviour (as carried by directives and match responses).
pub fn parse_behaviour(text: &str) -> Result<Behaviour, Vec<Diagnostic>> {
    let run = || -> PResult<Behaviour> {
        let mut p = Parser::new(text)?;
        let mut b = p.behaviour()?;
        if *p.peek() != Tok::Eof {
            return Err(p.unexpected("end of input"));
        }
        b.assign_ids(NodeId::root());
        Ok(b)
    };
    run().map_err(|d| vec![d])
}

pub fn parse_expr(text: &str) -> Result<Expr, Diagnostic> {
    let mut p = Parser::new(text)?;
    let e = p.expr()?;
    if *p.peek() != Tok::Eof {
        return Err(p.unexpected("end of expression"));
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::BinaryOp::*;

    const HELLO: &str = r#"aioc {
 scope @user{
  msg@user = "Hello World"
 } prop { N.name = "hello_world"};
 send: user( msg ) -> display( msg ) }"#;

    #[test]
    fn hello_world_program() {
        let p = parse_program(HELLO).unwrap();
        let BehaviourKind::Seq(scope, send) = &p.body.kind else {
            panic!("expected a sequence");
        };
        let BehaviourKind::Scope { coordinator, props, .. } = &scope.kind else {
            panic!("expected a scope");
        };
        assert_eq!(coordinator.as_str(), "user");
        assert_eq!(props["name"], Value::from("hello_world"));
        assert_eq!(
            **send,
            Behaviour::interaction("send", "user", Expr::var("msg"), "display", "msg")
        );
    }

    #[test]
    fn single_assignment() {
        let p = parse_program("preamble { starter: bob } aioc { end@bob = false }").unwrap();
        assert_eq!(p.body, Behaviour::assign("end", "bob", Expr::lit(false)));
        assert_eq!(p.preamble.starter, Some(Role::from("bob")));
    }

    #[test]
    fn missing_expression_is_one_error() {
        let errs = parse_program("aioc { x@a = }").unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!((errs[0].line, errs[0].column), (1, 14));
        assert_eq!(errs[0].severity, Severity::Error);
    }

    #[test]
    fn duplicate_starter_rejected() {
        let errs = parse_program("preamble { starter: a starter: b } aioc { skip }").unwrap_err();
        assert!(errs[0].message.contains("duplicate starter"));
    }

    #[test]
    fn self_interaction_rejected() {
        let errs = parse_program("aioc { p: a(1) -> a(x) }").unwrap_err();
        assert!(errs[0].message.contains("same sender and receiver"));
    }

    #[test]
    fn unknown_protocol_warns() {
        let (_, warnings) =
            parse_program_with_warnings("include f from \"x:1\" with carrier_pigeon aioc { skip }").unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].severity, Severity::Warning);
    }

    #[test]
    fn precedence() {
        assert_eq!(parse_expr("!end").unwrap(), Expr::negate(Expr::var("end")));
        assert_eq!(
            parse_expr("1 + 2 * 3").unwrap(),
            Expr::binary(Add, Expr::lit(1), Expr::binary(Mul, Expr::lit(2), Expr::lit(3)))
        );
        assert_eq!(
            parse_expr("a == b and c != d").unwrap(),
            Expr::binary(
                And,
                Expr::binary(Eq, Expr::var("a"), Expr::var("b")),
                Expr::binary(Ne, Expr::var("c"), Expr::var("d"))
            )
        );
        assert_eq!(
            parse_expr("(1 + 2) * 3").unwrap(),
            Expr::binary(Mul, Expr::binary(Add, Expr::lit(1), Expr::lit(2)), Expr::lit(3))
        );
        assert_eq!(
            parse_expr("a or b and c").unwrap(),
            Expr::binary(Or, Expr::var("a"), Expr::binary(And, Expr::var("b"), Expr::var("c")))
        );
        assert_eq!(
            parse_expr("5 - 2 - 1").unwrap(),
            Expr::binary(Sub, Expr::binary(Sub, Expr::lit(5), Expr::lit(2)), Expr::lit(1))
        );
    }

    #[test]
    fn dangling_operator() {
        assert!(parse_expr("1 +").is_err());
        assert!(parse_expr("and x").is_err());
    }

    #[test]
    fn hello_rule() {
        let rules = parse_rules(
            r#"rule {
 on { N.name == "hello_world"
 	and E.lang == "it" }
 do { msg@user = "Ciao Mondo" }
}"#,
        )
        .unwrap();
        assert_eq!(rules.len(), 1);
        assert_eq!(rules[0].body, Behaviour::assign("msg", "user", Expr::lit("Ciao Mondo")));
        assert_eq!(
            rules[0].condition,
            Expr::binary(
                And,
                Expr::binary(
                    Eq,
                    Expr::Namespaced { ns: "N".into(), key: "name".into() },
                    Expr::lit("hello_world")
                ),
                Expr::binary(
                    Eq,
                    Expr::Namespaced { ns: "E".into(), key: "lang".into() },
                    Expr::lit("it")
                )
            )
        );
    }

    #[test]
    fn empty_rule_file() {
        assert!(parse_rules("").unwrap().is_empty());
        assert!(parse_rules("  // nothing here\n").unwrap().is_empty());
    }

    #[test]
    fn trailing_semicolon_and_empty_block() {
        let p = parse_program("aioc { x@a = 1; if (x == 1)@a { // nothing\n }; }").unwrap();
        let BehaviourKind::Seq(_, second) = &p.body.kind else { panic!() };
        assert!(matches!(&second.kind, BehaviourKind::If { then_b, .. } if then_b.is_skip()));
    }

    #[test]
    fn escapes_and_multiline_strings() {
        let e = parse_expr("\"a \\\"b\\\" \\\\ c\nd\"").unwrap();
        assert_eq!(e, Expr::lit("a \"b\" \\ c\nd"));
    }

    #[test]
    fn seq_binds_looser_than_par() {
        let b = parse_behaviour("x@a = 1; y@b = 2 | z@c = 3").unwrap();
        assert!(matches!(&b.kind, BehaviourKind::Seq(_, r) if matches!(r.kind, BehaviourKind::Par(..))));
    }

    #[test]
    fn positions_recorded() {
        let p = parse_program("aioc {\n  x@a = 1;\n  y@a = 2 }").unwrap();
        let BehaviourKind::Seq(x, y) = &p.body.kind else { panic!() };
        assert_eq!((x.meta.pos.line, x.meta.pos.column), (2, 3));
        assert_eq!((y.meta.pos.line, y.meta.pos.column), (3, 3));
    }
}
