//! Lexer and recursive-descent parser for DataScript.

use serde_json::{Number, Value};

use super::{Location, ScriptError};

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Num(Number),
    Str(String),
    Ident(String),
    Dot,
    Comma,
    Colon,
    Semi,
    Newline,
    LParen,
    RParen,
    LBracket,
    RBracket,
    LBrace,
    RBrace,
    Assign,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Plus,
    Minus,
    Star,
    Slash,
    Percent,
    Not,
    And,
    Or,
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    at: Location,
}

fn lex(src: &str) -> Result<Vec<Token>, ScriptError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let mut depth = 0i32;
    while i < chars.len() {
        let c = chars[i];
        let at = Location { line, col };
        let advance = |n: usize, i: &mut usize, col: &mut usize| {
            *i += n;
            *col += n;
        };
        match c {
            '\n' => {
                if depth <= 0 {
                    out.push(Token {
                        tok: Tok::Newline,
                        at,
                    });
                }
                i += 1;
                line += 1;
                col = 1;
            }
            ' ' | '\t' | '\r' => advance(1, &mut i, &mut col),
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    advance(1, &mut i, &mut col);
                }
            }
            '"' | '\'' => {
                let quote = c;
                let mut s = String::new();
                advance(1, &mut i, &mut col);
                loop {
                    let Some(&ch) = chars.get(i) else {
                        return Err(ScriptError::syntax("unterminated string literal", at));
                    };
                    advance(1, &mut i, &mut col);
                    match ch {
                        '\\' => {
                            let Some(&esc) = chars.get(i) else {
                                return Err(ScriptError::syntax("unterminated string literal", at));
                            };
                            advance(1, &mut i, &mut col);
                            s.push(match esc {
                                'n' => '\n',
                                't' => '\t',
                                'r' => '\r',
                                other => other,
                            });
                        }
                        '\n' => return Err(ScriptError::syntax("newline in string literal", at)),
                        ch if ch == quote => break,
                        ch => s.push(ch),
                    }
                }
                out.push(Token {
                    tok: Tok::Str(s),
                    at,
                });
            }
            c if c.is_ascii_digit() => {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    advance(1, &mut i, &mut col);
                }
                let mut float = false;
                if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                    float = true;
                    advance(1, &mut i, &mut col);
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        advance(1, &mut i, &mut col);
                    }
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].is_ascii_digit() {
                        float = true;
                        while j < chars.len() && chars[j].is_ascii_digit() {
                            j += 1;
                        }
                        let n = j - i;
                        advance(n, &mut i, &mut col);
                    }
                }
                let text: String = chars[start..i].iter().collect();
                let num = if float {
                    text.parse::<f64>().ok().and_then(Number::from_f64)
                } else {
                    text.parse::<i64>().ok().map(Number::from)
                };
                let num =
                    num.ok_or_else(|| ScriptError::syntax(format!("invalid number {text}"), at))?;
                out.push(Token {
                    tok: Tok::Num(num),
                    at,
                });
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    advance(1, &mut i, &mut col);
                }
                out.push(Token {
                    tok: Tok::Ident(chars[start..i].iter().collect()),
                    at,
                });
            }
            _ => {
                let next = chars.get(i + 1).copied();
                let (tok, len) = match (c, next) {
                    ('=', Some('=')) => (Tok::Eq, 2),
                    ('!', Some('=')) => (Tok::Ne, 2),
                    ('<', Some('=')) => (Tok::Le, 2),
                    ('>', Some('=')) => (Tok::Ge, 2),
                    ('&', Some('&')) => (Tok::And, 2),
                    ('|', Some('|')) => (Tok::Or, 2),
                    ('=', _) => (Tok::Assign, 1),
                    ('<', _) => (Tok::Lt, 1),
                    ('>', _) => (Tok::Gt, 1),
                    ('!', _) => (Tok::Not, 1),
                    ('+', _) => (Tok::Plus, 1),
                    ('-', _) => (Tok::Minus, 1),
                    ('*', _) => (Tok::Star, 1),
                    ('/', _) => (Tok::Slash, 1),
                    ('%', _) => (Tok::Percent, 1),
                    ('.', _) => (Tok::Dot, 1),
                    (',', _) => (Tok::Comma, 1),
                    (':', _) => (Tok::Colon, 1),
                    (';', _) => (Tok::Semi, 1),
                    ('(', _) => (Tok::LParen, 1),
                    (')', _) => (Tok::RParen, 1),
                    ('[', _) => (Tok::LBracket, 1),
                    (']', _) => (Tok::RBracket, 1),
                    ('{', _) => (Tok::LBrace, 1),
                    ('}', _) => (Tok::RBrace, 1),
                    _ => {
                        return Err(ScriptError::syntax(
                            format!("unexpected character '{c}'"),
                            at,
                        ))
                    }
                };
                match tok {
                    Tok::LParen | Tok::LBracket | Tok::LBrace => depth += 1,
                    Tok::RParen | Tok::RBracket | Tok::RBrace => depth -= 1,
                    _ => {}
                }
                out.push(Token { tok, at });
                advance(len, &mut i, &mut col);
            }
        }
    }
    out.push(Token {
        tok: Tok::Eof,
        at: Location { line, col },
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Or,
    And,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Add,
    Sub,
    Mul,
    Div,
    Rem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    Literal(Value),
    List(Vec<Expr>),
    Map(Vec<(String, Expr)>),
    Data(String),
    Endpoint(String),
    Result,
    Member(Box<Expr>, String),
    Index(Box<Expr>, Box<Expr>),
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    pub kind: ExprKind,
    pub at: Location,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// `data.<name>` optionally followed by `.field` segments.
    Data {
        name: String,
        path: Vec<String>,
    },
    Endpoint(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    Assign {
        target: Target,
        value: Expr,
        at: Location,
    },
    Status {
        code: Expr,
        text: Expr,
        at: Location,
    },
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn at(&self) -> Location {
        self.toks[self.pos].at
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == tok {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<Token, ScriptError> {
        if *self.peek() == tok {
            Ok(self.bump())
        } else {
            Err(ScriptError::syntax(
                format!("expected {what}, found {}", describe(self.peek())),
                self.at(),
            ))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ScriptError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            other => Err(ScriptError::syntax(
                format!("expected {what}, found {}", describe(&other)),
                self.at(),
            )),
        }
    }

    fn skip_separators(&mut self) {
        while matches!(self.peek(), Tok::Newline | Tok::Semi) {
            self.bump();
        }
    }

    fn program(&mut self) -> Result<Vec<Stmt>, ScriptError> {
        let mut stmts = Vec::new();
        self.skip_separators();
        while *self.peek() != Tok::Eof {
            stmts.push(self.statement()?);
            if !matches!(self.peek(), Tok::Newline | Tok::Semi | Tok::Eof) {
                return Err(ScriptError::syntax(
                    format!("expected end of statement, found {}", describe(self.peek())),
                    self.at(),
                ));
            }
            self.skip_separators();
        }
        Ok(stmts)
    }

    fn statement(&mut self) -> Result<Stmt, ScriptError> {
        let at = self.at();
        let head = self.ident("statement")?;
        match head.as_str() {
            "status" => {
                self.expect(Tok::LParen, "'('")?;
                let code = self.expr()?;
                self.expect(Tok::Comma, "','")?;
                let text = self.expr()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(Stmt::Status { code, text, at })
            }
            "data" => {
                self.expect(Tok::Dot, "'.'")?;
                let name = self.ident("dataelement name")?;
                let mut path = Vec::new();
                while self.eat(&Tok::Dot) {
                    path.push(self.ident("field name")?);
                }
                self.expect(Tok::Assign, "'='")?;
                let value = self.expr()?;
                Ok(Stmt::Assign {
                    target: Target::Data { name, path },
                    value,
                    at,
                })
            }
            "endpoints" => {
                self.expect(Tok::Dot, "'.'")?;
                let key = self.ident("endpoint key")?;
                self.expect(Tok::Assign, "'='")?;
                let value = self.expr()?;
                Ok(Stmt::Assign {
                    target: Target::Endpoint(key),
                    value,
                    at,
                })
            }
            other => Err(ScriptError::syntax(
                format!("cannot assign to '{other}', targets are data.<name> and endpoints.<key>"),
                at,
            )),
        }
    }

    fn expr(&mut self) -> Result<Expr, ScriptError> {
        self.binary(0)
    }

    fn binary(&mut self, min_prec: u8) -> Result<Expr, ScriptError> {
        let mut lhs = self.unary()?;
        loop {
            let (op, prec) = match self.peek() {
                Tok::Or => (BinOp::Or, 1),
                Tok::And => (BinOp::And, 2),
                Tok::Eq => (BinOp::Eq, 3),
                Tok::Ne => (BinOp::Ne, 3),
                Tok::Lt => (BinOp::Lt, 4),
                Tok::Le => (BinOp::Le, 4),
                Tok::Gt => (BinOp::Gt, 4),
                Tok::Ge => (BinOp::Ge, 4),
                Tok::Plus => (BinOp::Add, 5),
                Tok::Minus => (BinOp::Sub, 5),
                Tok::Star => (BinOp::Mul, 6),
                Tok::Slash => (BinOp::Div, 6),
                Tok::Percent => (BinOp::Rem, 6),
                _ => break,
            };
            if prec < min_prec {
                break;
            }
            let at = self.bump().at;
            let rhs = self.binary(prec + 1)?;
            lhs = Expr {
                kind: ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)),
                at,
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ScriptError> {
        let at = self.at();
        let op = match self.peek() {
            Tok::Minus => UnOp::Neg,
            Tok::Not => UnOp::Not,
            _ => return self.postfix(),
        };
        self.bump();
        let operand = self.unary()?;
        Ok(Expr {
            kind: ExprKind::Unary(op, Box::new(operand)),
            at,
        })
    }

    fn postfix(&mut self) -> Result<Expr, ScriptError> {
        let mut e = self.primary()?;
        loop {
            let at = self.at();
            if self.eat(&Tok::Dot) {
                let field = self.ident("field name")?;
                e = Expr {
                    kind: ExprKind::Member(Box::new(e), field),
                    at,
                };
            } else if self.eat(&Tok::LBracket) {
                let idx = self.expr()?;
                self.expect(Tok::RBracket, "']'")?;
                e = Expr {
                    kind: ExprKind::Index(Box::new(e), Box::new(idx)),
                    at,
                };
            } else {
                return Ok(e);
            }
        }
    }

    fn primary(&mut self) -> Result<Expr, ScriptError> {
        let at = self.at();
        let kind = match self.bump().tok {
            Tok::Num(n) => ExprKind::Literal(Value::Number(n)),
            Tok::Str(s) => ExprKind::Literal(Value::String(s)),
            Tok::Ident(name) => match name.as_str() {
                "true" => ExprKind::Literal(Value::Bool(true)),
                "false" => ExprKind::Literal(Value::Bool(false)),
                "null" => ExprKind::Literal(Value::Null),
                "result" => ExprKind::Result,
                "data" => {
                    self.expect(Tok::Dot, "'.' after data")?;
                    ExprKind::Data(self.ident("dataelement name")?)
                }
                "endpoints" => {
                    self.expect(Tok::Dot, "'.' after endpoints")?;
                    ExprKind::Endpoint(self.ident("endpoint key")?)
                }
                other => {
                    return Err(ScriptError::syntax(
                        format!("unknown identifier '{other}'"),
                        at,
                    ))
                }
            },
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "')'")?;
                return Ok(e);
            }
            Tok::LBracket => {
                let mut items = Vec::new();
                if !self.eat(&Tok::RBracket) {
                    loop {
                        items.push(self.expr()?);
                        if self.eat(&Tok::RBracket) {
                            break;
                        }
                        self.expect(Tok::Comma, "',' or ']'")?;
                    }
                }
                ExprKind::List(items)
            }
            Tok::LBrace => {
                let mut entries = Vec::new();
                if !self.eat(&Tok::RBrace) {
                    loop {
                        let key = match self.bump().tok {
                            Tok::Str(s) | Tok::Ident(s) => s,
                            other => {
                                return Err(ScriptError::syntax(
                                    format!("expected map key, found {}", describe(&other)),
                                    self.at(),
                                ))
                            }
                        };
                        self.expect(Tok::Colon, "':'")?;
                        entries.push((key, self.expr()?));
                        if self.eat(&Tok::RBrace) {
                            break;
                        }
                        self.expect(Tok::Comma, "',' or '}'")?;
                    }
                }
                ExprKind::Map(entries)
            }
            other => {
                return Err(ScriptError::syntax(
                    format!("unexpected {}", describe(&other)),
                    at,
                ))
            }
        };
        Ok(Expr { kind, at })
    }
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Num(n) => format!("number {n}"),
        Tok::Str(s) => format!("string {s:?}"),
        Tok::Ident(s) => format!("'{s}'"),
        Tok::Newline => "end of line".into(),
        Tok::Eof => "end of input".into(),
        other => format!("{other:?}").to_lowercase(),
    }
}

pub fn parse_program(src: &str) -> Result<Vec<Stmt>, ScriptError> {
    let mut p = Parser {
        toks: lex(src)?,
        pos: 0,
    };
    p.program()
}

pub fn parse_expression(src: &str) -> Result<Expr, ScriptError> {
    let toks: Vec<Token> = lex(src)?
        .into_iter()
        .filter(|t| t.tok != Tok::Newline)
        .collect();
    let mut p = Parser { toks, pos: 0 };
    let e = p.expr()?;
    if *p.peek() != Tok::Eof {
        return Err(ScriptError::syntax(
            format!("unexpected {} after expression", describe(p.peek())),
            p.at(),
        ));
    }
    Ok(e)
}
