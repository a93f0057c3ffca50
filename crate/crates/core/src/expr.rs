//! A small expression language for user-supplied coefficients:
//! numbers, the variables t x y z u, + - * / ^, parentheses, and the
//! functions sin cos exp log tanh sqrt.

use std::fmt;

use crate::error::{Error, Result};
use crate::jet::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    T,
    X,
    Y,
    Z,
    U,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Tanh,
    Sqrt,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

fn parse_err<T>(src: &str, pos: usize, msg: &str) -> Result<T> {
    Err(Error::Config(format!("cannot parse expression {src:?} at offset {pos}: {msg}")))
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>> {
    let b = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let s = i;
            while i < b.len() && ((b[i] as char).is_ascii_digit() || b[i] == b'.') {
                i += 1;
            }
            if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
                let mut j = i + 1;
                if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
                    j += 1;
                }
                if j < b.len() && (b[j] as char).is_ascii_digit() {
                    i = j;
                    while i < b.len() && (b[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            match src[s..i].parse::<f64>() {
                Ok(v) => out.push((s, Tok::Num(v))),
                Err(_) => return parse_err(src, s, "bad number"),
            }
        } else if c.is_ascii_alphabetic() || c == '_' {
            let s = i;
            while i < b.len() && ((b[i] as char).is_ascii_alphanumeric() || b[i] == b'_') {
                i += 1;
            }
            out.push((s, Tok::Ident(src[s..i].to_string())));
        } else if "+-*/^()".contains(c) {
            out.push((i, Tok::Op(c)));
            i += 1;
        } else {
            return parse_err(src, i, &format!("unexpected character {c:?}"));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    src: &'a str,
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.1)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.src.len(), |t| t.0)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Op(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn sum(&mut self) -> Result<Expr> {
        let mut lhs = self.product()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.product()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.product()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn product(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat('/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat('^') {
            // right associative, binds tighter than unary minus on the left
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let at = self.offset();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let e = self.sum()?;
                if !self.eat(')') {
                    return parse_err(self.src, self.offset(), "expected ')'");
                }
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                let var = match name.as_str() {
                    "t" => Some(Var::T),
                    "x" => Some(Var::X),
                    "y" => Some(Var::Y),
                    "z" => Some(Var::Z),
                    "u" => Some(Var::U),
                    _ => None,
                };
                if let Some(v) = var {
                    return Ok(Expr::Var(v));
                }
                let f = match name.as_str() {
                    "sin" => Func::Sin,
                    "cos" => Func::Cos,
                    "exp" => Func::Exp,
                    "log" | "ln" => Func::Log,
                    "tanh" => Func::Tanh,
                    "sqrt" => Func::Sqrt,
                    _ => return parse_err(self.src, at, &format!("unknown name {name:?}")),
                };
                if !self.eat('(') {
                    return parse_err(self.src, self.offset(), "expected '(' after function name");
                }
                let arg = self.sum()?;
                if !self.eat(')') {
                    return parse_err(self.src, self.offset(), "expected ')'");
                }
                Ok(Expr::Call(f, Box::new(arg)))
            }
            _ => parse_err(self.src, at, "expected a number, variable or '('"),
        }
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let toks = lex(src)?;
        let mut p = Parser { src, toks, pos: 0 };
        let e = p.sum()?;
        if p.pos != p.toks.len() {
            return parse_err(src, p.offset(), "trailing input");
        }
        Ok(e)
    }

    pub fn uses(&self, v: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(w) => *w == v,
            Expr::Neg(a) | Expr::Call(_, a) => a.uses(v),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.uses(v) || b.uses(v)
            }
        }
    }

    /// Evaluates with `t` a plain number and the state/control generic.
    pub fn eval<S: Scalar>(&self, t: f64, x: S, y: S, z: S, u: S) -> S {
        match self {
            Expr::Num(v) => S::cst(*v),
            Expr::Var(Var::T) => S::cst(t),
            Expr::Var(Var::X) => x,
            Expr::Var(Var::Y) => y,
            Expr::Var(Var::Z) => z,
            Expr::Var(Var::U) => u,
            Expr::Neg(a) => -a.eval(t, x, y, z, u),
            Expr::Add(a, b) => a.eval(t, x, y, z, u) + b.eval(t, x, y, z, u),
            Expr::Sub(a, b) => a.eval(t, x, y, z, u) - b.eval(t, x, y, z, u),
            Expr::Mul(a, b) => a.eval(t, x, y, z, u) * b.eval(t, x, y, z, u),
            Expr::Div(a, b) => a.eval(t, x, y, z, u) / b.eval(t, x, y, z, u),
            Expr::Pow(a, b) => {
                let base = a.eval(t, x, y, z, u);
                match **b {
                    Expr::Num(n) if n.fract() == 0.0 && n.abs() <= 64.0 => {
                        if n >= 0.0 {
                            base.powi(n as i32)
                        } else {
                            S::cst(1.0) / base.powi(-n as i32)
                        }
                    }
                    _ => (base.ln() * b.eval(t, x, y, z, u)).exp(),
                }
            }
            Expr::Call(f, a) => {
                let v = a.eval(t, x, y, z, u);
                match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Exp => v.exp(),
                    Func::Log => v.ln(),
                    Func::Tanh => v.tanh(),
                    Func::Sqrt => v.sqrt(),
                }
            }
        }
    }

    /// Evaluates an expression in (t, x) only, e.g. a feedback control.
    pub fn eval_tx(&self, t: f64, x: f64) -> f64 {
        self.eval(t, x, 0.0, 0.0, 0.0)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(v) => f.write_str(match v {
                Var::T => "t",
                Var::X => "x",
                Var::Y => "y",
                Var::Z => "z",
                Var::U => "u",
            }),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, b) => write!(f, "({a} ^ {b})"),
            Expr::Call(func, a) => {
                let name = match func {
                    Func::Sin => "sin",
                    Func::Cos => "cos",
                    Func::Exp => "exp",
                    Func::Log => "log",
                    Func::Tanh => "tanh",
                    Func::Sqrt => "sqrt",
                };
                write!(f, "{name}({a})")
            }
        }
    }
}
