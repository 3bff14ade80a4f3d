//! Recursive-descent parser for the coefficient grammar.

use thiserror::Error;

use super::{BinOp, ExprAst, Func, Role, Var};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdent { offset: usize, name: String },
    #[error("variable `{name}` is illegal in a {role} expression (byte {offset})")]
    IllegalVar {
        offset: usize,
        name: String,
        role: &'static str,
    },
    #[error("`{name}` expects {expected} argument(s), got {got} (byte {offset})")]
    Arity {
        offset: usize,
        name: String,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn tokens(src: &'a str) -> Result<Vec<(Tok, usize)>, ParseError> {
        let mut lx = Lexer {
            src: src.as_bytes(),
            pos: 0,
        };
        let mut out = Vec::new();
        loop {
            lx.skip_ws();
            if lx.pos >= lx.src.len() {
                break;
            }
            let start = lx.pos;
            let c = lx.src[lx.pos];
            let tok = match c {
                b'+' => {
                    lx.pos += 1;
                    Tok::Plus
                }
                b'-' => {
                    lx.pos += 1;
                    Tok::Minus
                }
                b'*' => {
                    lx.pos += 1;
                    Tok::Star
                }
                b'/' => {
                    lx.pos += 1;
                    Tok::Slash
                }
                b'^' => {
                    lx.pos += 1;
                    Tok::Caret
                }
                b'(' => {
                    lx.pos += 1;
                    Tok::LParen
                }
                b')' => {
                    lx.pos += 1;
                    Tok::RParen
                }
                b',' => {
                    lx.pos += 1;
                    Tok::Comma
                }
                b'0'..=b'9' | b'.' => lx.number(start)?,
                c if c.is_ascii_alphabetic() || c == b'_' => lx.ident(start),
                other => {
                    return Err(ParseError::Syntax {
                        offset: start,
                        message: format!("unexpected character `{}`", other as char),
                    })
                }
            };
            out.push((tok, start));
        }
        Ok(out)
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn number(&mut self, start: usize) -> Result<Tok, ParseError> {
        let mut end = self.pos;
        let bytes = self.src;
        while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
            end += 1;
        }
        // Scientific notation: 1e-3, 2.5E+4.
        if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
            let mut exp_end = end + 1;
            if exp_end < bytes.len() && (bytes[exp_end] == b'+' || bytes[exp_end] == b'-') {
                exp_end += 1;
            }
            if exp_end < bytes.len() && bytes[exp_end].is_ascii_digit() {
                end = exp_end;
                while end < bytes.len() && bytes[end].is_ascii_digit() {
                    end += 1;
                }
            }
        }
        let text = std::str::from_utf8(&bytes[start..end]).expect("ascii");
        let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
            offset: start,
            message: format!("malformed number literal `{text}`"),
        })?;
        self.pos = end;
        Ok(Tok::Num(value))
    }

    fn ident(&mut self, start: usize) -> Tok {
        let bytes = self.src;
        let mut end = self.pos;
        while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
            end += 1;
        }
        self.pos = end;
        Tok::Ident(std::str::from_utf8(&bytes[start..end]).expect("ascii").to_owned())
    }
}

struct Parser<'a> {
    toks: &'a [(Tok, usize)],
    idx: usize,
    role: Role,
    dim: usize,
    src_len: usize,
}

/// Parse `text` as an expression for `role` in spatial dimension `d`.
pub fn parse(text: &str, role: Role, d: usize) -> Result<ExprAst, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError::Syntax {
            offset: 0,
            message: "empty expression".into(),
        });
    }
    let toks = Lexer::tokens(text)?;
    let mut parser = Parser {
        toks: &toks,
        idx: 0,
        role,
        dim: d,
        src_len: text.len(),
    };
    let ast = parser.additive()?;
    if parser.idx < parser.toks.len() {
        let (_, offset) = parser.toks[parser.idx];
        return Err(ParseError::Syntax {
            offset,
            message: "trailing input after expression".into(),
        });
    }
    Ok(ast)
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.idx).map(|(t, _)| t)
    }

    fn bump(&mut self) -> Option<(Tok, usize)> {
        let t = self.toks.get(self.idx).cloned();
        self.idx += 1;
        t
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        match self.bump() {
            Some((t, _)) if t == tok => Ok(()),
            Some((_, offset)) => Err(ParseError::Syntax {
                offset,
                message: format!("expected {what}"),
            }),
            None => Err(ParseError::Syntax {
                offset: self.src_len,
                message: format!("expected {what}, found end of input"),
            }),
        }
    }

    fn additive(&mut self) -> Result<ExprAst, ParseError> {
        let mut lhs = self.multiplicative()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    let rhs = self.multiplicative()?;
                    lhs = ExprAst::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Minus) => {
                    self.bump();
                    let rhs = self.multiplicative()?;
                    lhs = ExprAst::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn multiplicative(&mut self) -> Result<ExprAst, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.bump();
                    let rhs = self.unary()?;
                    lhs = ExprAst::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Slash) => {
                    self.bump();
                    let rhs = self.unary()?;
                    lhs = ExprAst::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // Unary minus binds looser than `^`: -x^2 parses as -(x^2).
    fn unary(&mut self) -> Result<ExprAst, ParseError> {
        if matches!(self.peek(), Some(Tok::Minus)) {
            self.bump();
            let inner = self.unary()?;
            return Ok(ExprAst::Neg(Box::new(inner)));
        }
        self.power()
    }

    // Right-associative; the exponent may itself be signed: x^-2.
    fn power(&mut self) -> Result<ExprAst, ParseError> {
        let base = self.primary()?;
        if matches!(self.peek(), Some(Tok::Caret)) {
            self.bump();
            let exp = self.unary()?;
            return Ok(ExprAst::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<ExprAst, ParseError> {
        match self.bump() {
            Some((Tok::Num(v), _)) => Ok(ExprAst::Const(v)),
            Some((Tok::LParen, _)) => {
                let inner = self.additive()?;
                self.expect(Tok::RParen, "closing `)`")?;
                Ok(inner)
            }
            Some((Tok::Ident(name), offset)) => self.ident_node(name, offset),
            Some((_, offset)) => Err(ParseError::Syntax {
                offset,
                message: "expected a number, variable, function call or `(`".into(),
            }),
            None => Err(ParseError::Syntax {
                offset: self.src_len,
                message: "unexpected end of input".into(),
            }),
        }
    }

    fn ident_node(&mut self, name: String, offset: usize) -> Result<ExprAst, ParseError> {
        if let Some(func) = Func::from_name(&name) {
            // norm2 may appear bare or as norm2().
            let called = matches!(self.peek(), Some(Tok::LParen));
            if func == Func::Norm2 && !called {
                return Ok(ExprAst::Call(Func::Norm2, vec![]));
            }
            self.expect(Tok::LParen, "`(` after function name")?;
            let mut args = Vec::new();
            if !matches!(self.peek(), Some(Tok::RParen)) {
                loop {
                    args.push(self.additive()?);
                    if matches!(self.peek(), Some(Tok::Comma)) {
                        self.bump();
                    } else {
                        break;
                    }
                }
            }
            self.expect(Tok::RParen, "closing `)` of the argument list")?;
            if args.len() != func.arity() {
                return Err(ParseError::Arity {
                    offset,
                    name,
                    expected: func.arity(),
                    got: args.len(),
                });
            }
            return Ok(ExprAst::Call(func, args));
        }

        match name.as_str() {
            "t" => {
                if !self.role.allows_t() {
                    return Err(ParseError::IllegalVar {
                        offset,
                        name,
                        role: self.role.name(),
                    });
                }
                Ok(ExprAst::Var(Var::T))
            }
            "v" => {
                if !self.role.allows_v() {
                    return Err(ParseError::IllegalVar {
                        offset,
                        name,
                        role: self.role.name(),
                    });
                }
                Ok(ExprAst::Var(Var::V))
            }
            _ => {
                if let Some(rest) = name.strip_prefix('x') {
                    if let Ok(k) = rest.parse::<usize>() {
                        if k >= 1 && k <= self.dim {
                            return Ok(ExprAst::Var(Var::X(k - 1)));
                        }
                        return Err(ParseError::UnknownIdent {
                            offset,
                            name: format!("{name} (dimension is {})", self.dim),
                        });
                    }
                }
                Err(ParseError::UnknownIdent { offset, name })
            }
        }
    }
}
