//! Tokenizer and recursive-descent parser for right-hand-side expressions.
//!
//! Precedence, tightest first: `^` (non-negative integer exponent), unary
//! `-`, `*` `/`, `+` `-`. Binary operators associate to the left.

use super::ast::{Expr, Var};
use super::ParseError;

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Tok {
    Num { value: f64, integer: Option<u64> },
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    Colon,
    Eq,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Token {
    pub tok: Tok,
    pub line: usize,
    pub col: usize,
}

pub(crate) fn tokenize(text: &str, line: usize, col_offset: usize) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = col_offset + i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let single = match c {
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '/' => Some(Tok::Slash),
            '^' => Some(Tok::Caret),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            ':' => Some(Tok::Colon),
            '=' => Some(Tok::Eq),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Token { tok, line, col });
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let mut integral = true;
            if i < chars.len() && chars[i] == '.' {
                integral = false;
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    integral = false;
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let lexeme: String = chars[start..i].iter().collect();
            let value: f64 = lexeme.parse().map_err(|_| ParseError::Lex {
                line,
                col,
                msg: format!("malformed number `{lexeme}`"),
            })?;
            if !value.is_finite() {
                return Err(ParseError::Lex { line, col, msg: format!("number `{lexeme}` overflows") });
            }
            let integer = if integral { lexeme.parse::<u64>().ok() } else { None };
            out.push(Token { tok: Tok::Num { value, integer }, line, col });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token { tok: Tok::Ident(chars[start..i].iter().collect()), line, col });
            continue;
        }
        return Err(ParseError::Lex { line, col, msg: format!("unexpected character `{c}`") });
    }
    Ok(out)
}

/// Cursor over a token slice.
pub(crate) struct Cursor<'a> {
    toks: &'a [Token],
    pos: usize,
    line: usize,
    end_col: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(toks: &'a [Token], line: usize, end_col: usize) -> Self {
        Cursor { toks, pos: 0, line, end_col }
    }

    pub fn peek(&self) -> Option<&'a Token> {
        self.toks.get(self.pos)
    }

    pub fn next(&mut self) -> Option<&'a Token> {
        let t = self.toks.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    pub fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    pub fn error_here(&self, msg: impl Into<String>) -> ParseError {
        let (line, col) = match self.peek() {
            Some(t) => (t.line, t.col),
            None => (self.line, self.end_col),
        };
        ParseError::Syntax { line, col, msg: msg.into() }
    }

    pub fn expect(&mut self, tok: Tok, what: &str) -> Result<&'a Token, ParseError> {
        match self.peek() {
            Some(t) if t.tok == tok => Ok(self.next().unwrap()),
            _ => Err(self.error_here(format!("expected {what}"))),
        }
    }
}

/// Identifier scope: how many `x` and `mu` variables exist.
#[derive(Clone, Copy, Debug)]
pub struct Scope {
    pub n: usize,
    pub k: usize,
}

impl Scope {
    fn resolve(&self, name: &str) -> Option<Expr> {
        if name == "t" {
            return Some(Expr::Var(Var::T));
        }
        if name == "pi" {
            return Some(Expr::Const(std::f64::consts::PI));
        }
        let index = |rest: &str| -> Option<usize> {
            if rest.is_empty() || rest.starts_with('0') || !rest.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            rest.parse::<usize>().ok()
        };
        if let Some(rest) = name.strip_prefix("mu") {
            return index(rest).filter(|&i| i >= 1 && i <= self.k).map(|i| Expr::Var(Var::Mu(i - 1)));
        }
        if let Some(rest) = name.strip_prefix('x') {
            return index(rest).filter(|&i| i >= 1 && i <= self.n).map(|i| Expr::Var(Var::X(i - 1)));
        }
        None
    }
}

const MAX_DEPTH: usize = 256;
// Bounds tree depth for left-associative chains, which the recursion
// counter above does not see.
const MAX_NODES: usize = 4096;

pub(crate) struct ExprParser<'c, 'a> {
    cur: &'c mut Cursor<'a>,
    scope: Scope,
    depth: usize,
    nodes: usize,
}

impl<'c, 'a> ExprParser<'c, 'a> {
    pub fn new(cur: &'c mut Cursor<'a>, scope: Scope) -> Self {
        ExprParser { cur, scope, depth: 0, nodes: 0 }
    }

    fn node(&mut self) -> Result<(), ParseError> {
        self.nodes += 1;
        if self.nodes > MAX_NODES {
            return Err(self.cur.error_here("expression too large"));
        }
        Ok(())
    }

    pub fn expr(&mut self) -> Result<Expr, ParseError> {
        self.enter()?;
        let mut lhs = self.term()?;
        loop {
            match self.cur.peek().map(|t| &t.tok) {
                Some(Tok::Plus) => {
                    self.node()?;
                    self.cur.next();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.node()?;
                    self.cur.next();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => break,
            }
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(self.cur.error_here("expression nested too deeply"));
        }
        Ok(())
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.cur.peek().map(|t| &t.tok) {
                Some(Tok::Star) => {
                    self.node()?;
                    self.cur.next();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Tok::Slash) => {
                    self.node()?;
                    self.cur.next();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if matches!(self.cur.peek().map(|t| &t.tok), Some(Tok::Minus)) {
            self.cur.next();
            self.enter()?;
            let inner = self.unary()?;
            self.depth -= 1;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if matches!(self.cur.peek().map(|t| &t.tok), Some(Tok::Caret)) {
            self.cur.next();
            match self.cur.next() {
                Some(Token { tok: Tok::Num { integer: Some(n), .. }, .. }) if *n <= u32::MAX as u64 => {
                    return Ok(Expr::Pow(Box::new(base), *n as u32));
                }
                Some(t) => {
                    return Err(ParseError::Syntax {
                        line: t.line,
                        col: t.col,
                        msg: "exponent must be a non-negative integer literal".into(),
                    })
                }
                None => return Err(self.cur.error_here("missing exponent after `^`")),
            }
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        self.node()?;
        let Some(tok) = self.cur.next() else {
            return Err(self.cur.error_here("unexpected end of expression"));
        };
        match &tok.tok {
            Tok::Num { value, .. } => Ok(Expr::Const(*value)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.cur.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                let func: Option<fn(Box<Expr>) -> Expr> = match name.as_str() {
                    "sin" => Some(Expr::Sin),
                    "cos" => Some(Expr::Cos),
                    "exp" => Some(Expr::Exp),
                    _ => None,
                };
                if let Some(build) = func {
                    self.cur.expect(Tok::LParen, "`(` after function name")?;
                    let arg = self.expr()?;
                    self.cur.expect(Tok::RParen, "`)`")?;
                    return Ok(build(Box::new(arg)));
                }
                self.scope.resolve(name).ok_or_else(|| ParseError::UnknownIdentifier {
                    line: tok.line,
                    col: tok.col,
                    name: name.clone(),
                })
            }
            _ => Err(ParseError::Syntax {
                line: tok.line,
                col: tok.col,
                msg: "expected a number, variable, function or `(`".into(),
            }),
        }
    }
}

/// Parses a single standalone expression over `scope`.
pub fn parse_expr(text: &str, scope: Scope) -> Result<Expr, ParseError> {
    let toks = tokenize(text, 1, 0)?;
    let mut cur = Cursor::new(&toks, 1, text.chars().count() + 1);
    let e = ExprParser::new(&mut cur, scope).expr()?;
    if !cur.at_end() {
        return Err(cur.error_here("trailing input after expression"));
    }
    Ok(e)
}
