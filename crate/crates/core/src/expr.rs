//! Scalar time expressions: a tiny grammar over `t`, literals, `+ - * /`,
//! unary minus and `sin cos exp abs pow`.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Abs,
    Pow,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "abs" => Some(Func::Abs),
            "pow" => Some(Func::Pow),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Abs => "abs",
            Func::Pow => "pow",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Pow => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Time,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Parse failure with a byte offset into the expression text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseErrorKind {
    UnexpectedChar(char),
    UnexpectedEnd,
    UnknownFunction(String),
    UnknownVariable(String),
    BadNumber(String),
    Arity { func: &'static str, expected: usize, found: usize },
    Trailing,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ParseErrorKind::UnexpectedChar(c) => write!(f, "unexpected character '{c}'"),
            ParseErrorKind::UnexpectedEnd => write!(f, "unexpected end of expression"),
            ParseErrorKind::UnknownFunction(n) => write!(f, "unknown function '{n}'"),
            ParseErrorKind::UnknownVariable(n) => write!(f, "unknown variable '{n}'"),
            ParseErrorKind::BadNumber(s) => write!(f, "malformed number '{s}'"),
            ParseErrorKind::Arity { func, expected, found } => {
                write!(f, "{func} takes {expected} argument(s), got {found}")
            }
            ParseErrorKind::Trailing => write!(f, "trailing input"),
        }
    }
}

impl std::error::Error for ParseError {}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
    Comma,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let tok = match c {
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '*' => Tok::Star,
            '/' => Tok::Slash,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ',' => Tok::Comma,
            _ if c.is_ascii_digit() || c == '.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let save = i;
                    i += 1;
                    if i < bytes.len() && (bytes[i] == b'+' || bytes[i] == b'-') {
                        i += 1;
                    }
                    if i < bytes.len() && bytes[i].is_ascii_digit() {
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    } else {
                        i = save;
                    }
                }
                let text = &src[start..i];
                let v: f64 = text.parse().map_err(|_| ParseError {
                    offset: start,
                    kind: ParseErrorKind::BadNumber(text.to_string()),
                })?;
                out.push((Tok::Num(v), start));
                continue;
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((Tok::Ident(src[start..i].to_string()), start));
                continue;
            }
            _ => {
                let ch = src[i..].chars().next().unwrap_or(c);
                return Err(ParseError { offset: i, kind: ParseErrorKind::UnexpectedChar(ch) });
            }
        };
        out.push((tok, start));
        i += 1;
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
    // offsets of currently open "(" so an early end points at the culprit
    open: Vec<usize>,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|(_, o)| *o).unwrap_or(self.end)
    }

    fn eof_error(&self) -> ParseError {
        ParseError {
            offset: self.open.last().copied().unwrap_or(self.end),
            kind: ParseErrorKind::UnexpectedEnd,
        }
    }

    fn unexpected(&self) -> ParseError {
        match self.toks.get(self.pos) {
            None => self.eof_error(),
            Some((tok, off)) => {
                let c = match tok {
                    Tok::Plus => '+',
                    Tok::Minus => '-',
                    Tok::Star => '*',
                    Tok::Slash => '/',
                    Tok::LParen => '(',
                    Tok::RParen => ')',
                    Tok::Comma => ',',
                    Tok::Num(_) | Tok::Ident(_) => {
                        return ParseError { offset: *off, kind: ParseErrorKind::Trailing }
                    }
                };
                ParseError { offset: *off, kind: ParseErrorKind::UnexpectedChar(c) }
            }
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Some(Tok::Slash) => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        match self.peek().cloned() {
            None => Err(self.eof_error()),
            Some(Tok::Minus) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.factor()?)))
            }
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Some(Tok::LParen) => {
                self.open.push(self.offset());
                self.pos += 1;
                let e = self.expr()?;
                self.close()?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                let at = self.offset();
                self.pos += 1;
                if self.peek() == Some(&Tok::LParen) {
                    let func = Func::from_name(&name).ok_or(ParseError {
                        offset: at,
                        kind: ParseErrorKind::UnknownFunction(name.clone()),
                    })?;
                    self.open.push(self.offset());
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while self.peek() == Some(&Tok::Comma) {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.close()?;
                    if args.len() != func.arity() {
                        return Err(ParseError {
                            offset: at,
                            kind: ParseErrorKind::Arity {
                                func: func.name(),
                                expected: func.arity(),
                                found: args.len(),
                            },
                        });
                    }
                    Ok(Expr::Call(func, args))
                } else if name == "t" {
                    Ok(Expr::Time)
                } else {
                    Err(ParseError { offset: at, kind: ParseErrorKind::UnknownVariable(name) })
                }
            }
            Some(_) => Err(self.unexpected()),
        }
    }

    fn close(&mut self) -> Result<(), ParseError> {
        match self.peek() {
            Some(Tok::RParen) => {
                self.pos += 1;
                self.open.pop();
                Ok(())
            }
            None => Err(self.eof_error()),
            Some(_) => Err(self.unexpected()),
        }
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, ParseError> {
        let toks = lex(src)?;
        let mut p = Parser { toks, pos: 0, end: src.len(), open: Vec::new() };
        let e = p.expr()?;
        if p.pos != p.toks.len() {
            return Err(p.unexpected());
        }
        Ok(e)
    }

    pub fn constant(v: f64) -> Expr {
        if v < 0.0 {
            Expr::Neg(Box::new(Expr::Num(-v)))
        } else {
            Expr::Num(v)
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Time => t,
            Expr::Neg(a) => -a.eval(t),
            Expr::Add(a, b) => a.eval(t) + b.eval(t),
            Expr::Sub(a, b) => a.eval(t) - b.eval(t),
            Expr::Mul(a, b) => a.eval(t) * b.eval(t),
            Expr::Div(a, b) => a.eval(t) / b.eval(t),
            Expr::Call(f, args) => {
                let x = args[0].eval(t);
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp(),
                    Func::Abs => x.abs(),
                    Func::Pow => x.powf(args[1].eval(t)),
                }
            }
        }
    }

    /// True when the expression does not mention `t`.
    pub fn is_constant(&self) -> bool {
        match self {
            Expr::Num(_) => true,
            Expr::Time => false,
            Expr::Neg(a) => a.is_constant(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.is_constant() && b.is_constant()
            }
            Expr::Call(_, args) => args.iter().all(Expr::is_constant),
        }
    }

    fn prec(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            _ => 4,
        }
    }
}

fn write_num(f: &mut fmt::Formatter<'_>, v: f64) -> fmt::Result {
    // Debug keeps a decimal point or exponent and round-trips exactly
    write!(f, "{v:?}")
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, paren: bool) -> fmt::Result {
    if paren {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => {
                if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) {
                    write!(f, "(")?;
                    write_num(f, *v)?;
                    write!(f, ")")
                } else {
                    write_num(f, *v)
                }
            }
            Expr::Time => write!(f, "t"),
            Expr::Neg(a) => {
                write!(f, "-")?;
                write_child(f, a, a.prec() < 3 || matches!(**a, Expr::Num(v) if v.is_sign_negative()))
            }
            Expr::Add(a, b) => {
                write_child(f, a, a.prec() < 1)?;
                write!(f, " + ")?;
                write_child(f, b, b.prec() <= 1)
            }
            Expr::Sub(a, b) => {
                write_child(f, a, a.prec() < 1)?;
                write!(f, " - ")?;
                write_child(f, b, b.prec() <= 1)
            }
            Expr::Mul(a, b) => {
                write_child(f, a, a.prec() < 2)?;
                write!(f, "*")?;
                write_child(f, b, b.prec() <= 2)
            }
            Expr::Div(a, b) => {
                write_child(f, a, a.prec() < 2)?;
                write!(f, "/")?;
                write_child(f, b, b.prec() <= 2)
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_unary_minus() {
        let e = Expr::parse("-(1.0 + 0.1*t*sin(t))").unwrap();
        let t = 2.0_f64;
        assert_eq!(e.eval(t), -(1.0 + 0.1 * t * t.sin()));
        assert_eq!(Expr::parse("2 - 3 - 4").unwrap().eval(0.0), -5.0);
        assert_eq!(Expr::parse("8 / 4 / 2").unwrap().eval(0.0), 1.0);
        assert_eq!(Expr::parse("-2*3").unwrap().eval(0.0), -6.0);
        assert_eq!(Expr::parse("pow(2, 10)").unwrap().eval(0.0), 1024.0);
        assert_eq!(Expr::parse("1e-3").unwrap().eval(0.0), 1e-3);
        assert_eq!(Expr::parse("exp(-abs(t))").unwrap().eval(-1.0), (-1.0f64).exp());
    }

    #[test]
    fn open_call_reports_paren_offset() {
        let err = Expr::parse("sin(").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnexpectedEnd);
        assert_eq!(err.offset, 3);
    }

    #[test]
    fn rejects_unknown_names() {
        let err = Expr::parse("1 + tan(t)").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnknownFunction("tan".into()));
        assert_eq!(err.offset, 4);
        assert!(matches!(Expr::parse("x").unwrap_err().kind, ParseErrorKind::UnknownVariable(_)));
        assert!(matches!(Expr::parse("pow(t)").unwrap_err().kind, ParseErrorKind::Arity { .. }));
        assert!(Expr::parse("1 2").is_err());
        assert!(Expr::parse("(1").is_err());
        assert!(Expr::parse("1)").is_err());
    }

    #[test]
    fn printing_round_trips() {
        for src in ["-(1.0 + 0.1*t*sin(t))", "1 - (2 - t)", "t/(2*t)", "-(-t)", "pow(t, 0.5)/3", "--t", "2*(t + 1)"] {
            let e = Expr::parse(src).unwrap();
            let again = Expr::parse(&e.to_string()).unwrap();
            assert_eq!(e, again, "{src} -> {e}");
        }
    }
}
