//! Small arithmetic language for tableau coefficients.
//!
//! Coefficients are written as strings such as `"(3*M^3-11*M^2+20*l*M)/(20*(M-1)*M)"`
//! and evaluated exactly over big rationals whenever every symbol involved is
//! rational. Irrational symbols (`s2` for the square root of two) switch the
//! evaluation to `f64`. Exact results are rounded to the nearest double once.

use std::collections::HashMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};

/// A number that is exact until something irrational touches it.
#[derive(Debug, Clone, PartialEq)]
pub enum Num {
    Exact(BigRational),
    Real(f64),
}

impl Num {
    pub fn int(v: i64) -> Self {
        Num::Exact(BigRational::from_integer(BigInt::from(v)))
    }

    pub fn ratio(n: i64, d: i64) -> Self {
        Num::Exact(BigRational::new(BigInt::from(n), BigInt::from(d)))
    }

    /// Exact binary value of a double.
    pub fn from_f64(v: f64) -> Self {
        match BigRational::from_float(v) {
            Some(r) => Num::Exact(r),
            None => Num::Real(v),
        }
    }

    pub fn to_f64(&self) -> f64 {
        match self {
            Num::Exact(r) => r.to_f64().unwrap_or(f64::NAN),
            Num::Real(v) => *v,
        }
    }

    fn real(&self) -> f64 {
        self.to_f64()
    }

    fn is_zero(&self) -> bool {
        match self {
            Num::Exact(r) => r.is_zero(),
            Num::Real(v) => *v == 0.0,
        }
    }

    fn add(self, o: Num) -> Num {
        match (self, o) {
            (Num::Exact(a), Num::Exact(b)) => Num::Exact(a + b),
            (a, b) => Num::Real(a.real() + b.real()),
        }
    }

    fn sub(self, o: Num) -> Num {
        match (self, o) {
            (Num::Exact(a), Num::Exact(b)) => Num::Exact(a - b),
            (a, b) => Num::Real(a.real() - b.real()),
        }
    }

    fn mul(self, o: Num) -> Num {
        match (self, o) {
            (Num::Exact(a), Num::Exact(b)) => Num::Exact(a * b),
            (a, b) => Num::Real(a.real() * b.real()),
        }
    }

    fn div(self, o: Num) -> Result<Num, String> {
        if o.is_zero() {
            return Err("division by zero".into());
        }
        Ok(match (self, o) {
            (Num::Exact(a), Num::Exact(b)) => Num::Exact(a / b),
            (a, b) => Num::Real(a.real() / b.real()),
        })
    }

    fn neg(self) -> Num {
        match self {
            Num::Exact(a) => Num::Exact(-a),
            Num::Real(v) => Num::Real(-v),
        }
    }

    fn powi(self, k: u32) -> Num {
        match self {
            Num::Exact(a) => Num::Exact(num_traits::pow(a, k as usize)),
            Num::Real(v) => Num::Real(v.powi(k as i32)),
        }
    }

    fn sqrt(self) -> Num {
        match &self {
            Num::Exact(a) if !a.is_negative() => {
                let (n, d) = (a.numer().sqrt(), a.denom().sqrt());
                if &(&n * &n) == a.numer() && &(&d * &d) == a.denom() {
                    return Num::Exact(BigRational::new(n, d));
                }
                Num::Real(self.real().sqrt())
            }
            _ => Num::Real(self.real().sqrt()),
        }
    }
}

/// Parsed coefficient expression.
#[derive(Debug, Clone)]
pub enum Expr {
    Lit(BigRational),
    Sym(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, u32),
    Sqrt(Box<Expr>),
}

/// Symbol bindings for evaluation.
pub type Env = HashMap<&'static str, Num>;

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, String> {
        let toks = lex(src)?;
        let mut p = Parser { toks, pos: 0 };
        let e = p.sum()?;
        if p.pos != p.toks.len() {
            return Err(format!("trailing input in {src:?}"));
        }
        Ok(e)
    }

    pub fn eval(&self, env: &Env) -> Result<Num, String> {
        Ok(match self {
            Expr::Lit(r) => Num::Exact(r.clone()),
            Expr::Sym(s) => {
                if s == "s2" {
                    return Ok(Num::Real(std::f64::consts::SQRT_2));
                }
                env.get(s.as_str())
                    .cloned()
                    .ok_or_else(|| format!("unbound symbol {s}"))?
            }
            Expr::Neg(a) => a.eval(env)?.neg(),
            Expr::Add(a, b) => a.eval(env)?.add(b.eval(env)?),
            Expr::Sub(a, b) => a.eval(env)?.sub(b.eval(env)?),
            Expr::Mul(a, b) => a.eval(env)?.mul(b.eval(env)?),
            Expr::Div(a, b) => a.eval(env)?.div(b.eval(env)?)?,
            Expr::Pow(a, k) => a.eval(env)?.powi(*k),
            Expr::Sqrt(a) => a.eval(env)?.sqrt(),
        })
    }

    pub fn is_literal_zero(&self) -> bool {
        matches!(self, Expr::Lit(r) if r.is_zero())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(BigRational),
    Ident(String),
    Op(char),
}

fn lex(src: &str) -> Result<Vec<Tok>, String> {
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
            let text: String = chars[start..i].iter().collect();
            out.push(Tok::Num(parse_decimal(&text)?));
        } else if c.is_ascii_alphabetic() {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^()".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return Err(format!("unexpected character {c:?} in {src:?}"));
        }
    }
    Ok(out)
}

fn parse_decimal(text: &str) -> Result<BigRational, String> {
    let (int, frac) = text.split_once('.').unwrap_or((text, ""));
    let digits = format!("{int}{frac}");
    let n: BigInt = digits.parse().map_err(|_| format!("bad number literal {text:?}"))?;
    let d = num_traits::pow(BigInt::from(10), frac.len());
    Ok(BigRational::new(n, d))
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek() == Some(&Tok::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn sum(&mut self) -> Result<Expr, String> {
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

    fn product(&mut self) -> Result<Expr, String> {
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

    fn unary(&mut self) -> Result<Expr, String> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, String> {
        let base = self.atom()?;
        if self.eat('^') {
            match self.toks.get(self.pos).cloned() {
                Some(Tok::Num(r)) if r.is_integer() => {
                    self.pos += 1;
                    let k = r.to_integer().to_u32().ok_or("exponent too large")?;
                    return Ok(Expr::Pow(Box::new(base), k));
                }
                _ => return Err("exponent must be a non-negative integer".into()),
            }
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, String> {
        match self.toks.get(self.pos).cloned() {
            Some(Tok::Num(r)) => {
                self.pos += 1;
                Ok(Expr::Lit(r))
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if name == "sqrt" {
                    if !self.eat('(') {
                        return Err("sqrt needs parentheses".into());
                    }
                    let inner = self.sum()?;
                    if !self.eat(')') {
                        return Err("missing ')'".into());
                    }
                    return Ok(Expr::Sqrt(Box::new(inner)));
                }
                Ok(Expr::Sym(name))
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let inner = self.sum()?;
                if !self.eat(')') {
                    return Err("missing ')'".into());
                }
                Ok(inner)
            }
            other => Err(format!("unexpected token {other:?}")),
        }
    }
}

/// Parse a matrix given as one comma separated string per row.
pub fn parse_rows(rows: &[&str]) -> Result<Vec<Vec<Expr>>, String> {
    rows.iter()
        .map(|r| r.split(',').map(|e| Expr::parse(e.trim())).collect())
        .collect()
}

/// Parse a comma separated vector.
pub fn parse_vec(src: &str) -> Result<Vec<Expr>, String> {
    src.split(',').map(|e| Expr::parse(e.trim())).collect()
}

/// Sum of two numbers, exact when both are.
pub fn add(a: Num, b: Num) -> Num {
    a.add(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, env: &Env) -> f64 {
        Expr::parse(src).unwrap().eval(env).unwrap().to_f64()
    }

    #[test]
    fn precedence_and_powers() {
        let mut env = Env::new();
        env.insert("M", Num::int(3));
        assert_eq!(ev("2+3*M^2", &env), 29.0);
        assert_eq!(ev("-M^2", &env), -9.0);
        assert_eq!(ev("(1-M)/(2*M)", &env), -1.0 / 3.0);
        assert_eq!(ev("2/3/M", &env), 2.0 / 9.0);
    }

    #[test]
    fn big_fraction_rounds_once() {
        let env = Env::new();
        let v = ev(
            "1837041228720545025825201951582239534326/2195453146940870392428577778808091404375",
            &env,
        );
        // reference value from an arbitrary precision evaluation
        assert_eq!(v, 0.8367480906072926);
    }

    #[test]
    fn irrational_symbols_fall_back_to_double() {
        let env = Env::new();
        assert_eq!(ev("1-1/s2", &env), 1.0 - 1.0 / std::f64::consts::SQRT_2);
        assert_eq!(ev("sqrt(9/4)", &env), 1.5);
        assert!(matches!(
            Expr::parse("sqrt(2)").unwrap().eval(&env).unwrap(),
            Num::Real(_)
        ));
    }

    #[test]
    fn decimals_are_exact() {
        let env = Env::new();
        let e = Expr::parse("0.25").unwrap().eval(&env).unwrap();
        assert_eq!(e, Num::ratio(1, 4));
    }

    #[test]
    fn errors() {
        assert!(Expr::parse("1+").is_err());
        assert!(Expr::parse("M^x").is_err());
        assert!(Expr::parse("1/0").unwrap().eval(&Env::new()).is_err());
        assert!(Expr::parse("q").unwrap().eval(&Env::new()).is_err());
    }
}
