//! Scalar expressions over `y1..yn` built from the differentiable primitive
//! set, for vector fields supplied as text.
//!
//! Grammar (usual precedence, `^` binds tightest and takes a non-negative
//! integer exponent):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' integer)?
//! atom  := number | 'y' index | func '(' expr ')' | '(' expr ')'
//! ```

use crate::ad::{sigmoid, softplus, AdError, Graph, NodeId};

use super::LieError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sinh,
    Cosh,
    Asinh,
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Relu,
    Sqrt,
    Square,
}

impl Func {
    const ALL: [(&'static str, Func); 10] = [
        ("sinh", Func::Sinh),
        ("cosh", Func::Cosh),
        ("asinh", Func::Asinh),
        ("exp", Func::Exp),
        ("log", Func::Log),
        ("softplus", Func::Softplus),
        ("sigmoid", Func::Sigmoid),
        ("relu", Func::Relu),
        ("sqrt", Func::Sqrt),
        ("square", Func::Square),
    ];

    fn from_name(name: &str) -> Option<Func> {
        Self::ALL.iter().find(|(n, _)| *n == name).map(|&(_, f)| f)
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Func::Sinh => x.sinh(),
            Func::Cosh => x.cosh(),
            Func::Asinh => x.asinh(),
            Func::Exp => x.exp(),
            Func::Log => x.ln(),
            Func::Softplus => softplus(x),
            Func::Sigmoid => sigmoid(x),
            Func::Relu => x.max(0.0),
            Func::Sqrt => x.sqrt(),
            Func::Square => x * x,
        }
    }

    fn record(self, g: &mut Graph, a: NodeId) -> Result<NodeId, AdError> {
        match self {
            Func::Sinh => g.sinh(a),
            Func::Cosh => g.cosh(a),
            Func::Asinh => g.asinh(a),
            Func::Exp => g.exp(a),
            Func::Log => g.log(a),
            Func::Softplus => g.softplus(a),
            Func::Sigmoid => g.sigmoid(a),
            Func::Relu => g.relu(a),
            Func::Sqrt => g.sqrt(a),
            Func::Square => g.square(a),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    /// Zero-based state index (`y1` is `Var(0)`).
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, u32),
    Call(Func, Box<Expr>),
}

impl Expr {
    /// Parses `src` with variables restricted to `y1..y{n}`.
    pub fn parse(src: &str, n: usize) -> Result<Expr, LieError> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0, n, src };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(p.error(format!("unexpected {}", p.tokens[p.pos].describe())));
        }
        Ok(e)
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(i) => y[*i],
            Expr::Neg(a) => -a.eval(y),
            Expr::Add(a, b) => a.eval(y) + b.eval(y),
            Expr::Sub(a, b) => a.eval(y) - b.eval(y),
            Expr::Mul(a, b) => a.eval(y) * b.eval(y),
            Expr::Div(a, b) => a.eval(y) / b.eval(y),
            Expr::Pow(a, k) => a.eval(y).powi(*k as i32),
            Expr::Call(f, a) => f.apply(a.eval(y)),
        }
    }

    /// Records the expression as a `1 × 1` node; `y` is a `1 × n` node.
    pub fn record(&self, g: &mut Graph, y: NodeId) -> Result<NodeId, AdError> {
        match self {
            Expr::Num(v) => Ok(g.scalar(*v)),
            Expr::Var(i) => g.slice_cols(y, *i, 1),
            Expr::Neg(a) => {
                let a = a.record(g, y)?;
                g.neg(a)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                let l = a.record(g, y)?;
                let r = b.record(g, y)?;
                match self {
                    Expr::Add(..) => g.add(l, r),
                    Expr::Sub(..) => g.sub(l, r),
                    Expr::Mul(..) => g.mul(l, r),
                    _ => g.div(l, r),
                }
            }
            Expr::Pow(a, k) => {
                let base = a.record(g, y)?;
                let mut acc = g.scalar(1.0);
                for _ in 0..*k {
                    acc = g.mul(acc, base)?;
                }
                Ok(acc)
            }
            Expr::Call(f, a) => {
                let a = a.record(g, y)?;
                f.record(g, a)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
}

impl Token {
    fn describe(&self) -> String {
        match self {
            Token::Num(v) => format!("number {v}"),
            Token::Ident(s) => format!("identifier '{s}'"),
            Token::Op(c) => format!("'{c}'"),
        }
    }
}

fn tokenize(src: &str) -> Result<Vec<Token>, LieError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text
                .parse::<f64>()
                .map_err(|_| LieError::Parse { expr: src.to_string(), msg: format!("bad number '{text}'") })?;
            out.push(Token::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^()".contains(c) {
            out.push(Token::Op(c));
            i += 1;
        } else {
            return Err(LieError::Parse { expr: src.to_string(), msg: format!("unexpected character '{c}'") });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    n: usize,
    src: &'a str,
}

impl Parser<'_> {
    fn error(&self, msg: String) -> LieError {
        LieError::Parse { expr: self.src.to_string(), msg }
    }

    fn peek_op(&self) -> Option<char> {
        match self.tokens.get(self.pos) {
            Some(Token::Op(c)) => Some(*c),
            _ => None,
        }
    }

    fn expect(&mut self, op: char) -> Result<(), LieError> {
        if self.peek_op() == Some(op) {
            self.pos += 1;
            Ok(())
        } else {
            let found = self.tokens.get(self.pos).map_or("end of input".to_string(), Token::describe);
            Err(self.error(format!("expected '{op}', found {found}")))
        }
    }

    fn expr(&mut self) -> Result<Expr, LieError> {
        let mut lhs = self.term()?;
        while let Some(op @ ('+' | '-')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' {
                Expr::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, LieError> {
        let mut lhs = self.unary()?;
        while let Some(op @ ('*' | '/')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' {
                Expr::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, LieError> {
        if self.peek_op() == Some('-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, LieError> {
        let base = self.atom()?;
        if self.peek_op() != Some('^') {
            return Ok(base);
        }
        self.pos += 1;
        match self.tokens.get(self.pos) {
            Some(Token::Num(v)) if v.fract() == 0.0 && *v >= 0.0 && *v <= 64.0 => {
                self.pos += 1;
                Ok(Expr::Pow(Box::new(base), *v as u32))
            }
            _ => Err(self.error("exponent must be an integer between 0 and 64".into())),
        }
    }

    fn atom(&mut self) -> Result<Expr, LieError> {
        let Some(tok) = self.tokens.get(self.pos).cloned() else {
            return Err(self.error("unexpected end of input".into()));
        };
        self.pos += 1;
        match tok {
            Token::Num(v) => Ok(Expr::Num(v)),
            Token::Op('(') => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Token::Ident(name) => {
                if let Some(f) = Func::from_name(&name) {
                    self.expect('(')?;
                    let arg = self.expr()?;
                    self.expect(')')?;
                    return Ok(Expr::Call(f, Box::new(arg)));
                }
                let idx =
                    name.strip_prefix('y').and_then(|s| s.parse::<usize>().ok()).filter(|&k| k >= 1 && k <= self.n);
                match idx {
                    Some(k) => Ok(Expr::Var(k - 1)),
                    None => Err(self.error(format!("unknown identifier '{name}' (states are y1..y{})", self.n))),
                }
            }
            other => Err(self.error(format!("unexpected {}", other.describe()))),
        }
    }
}
