//! Base Runge-Kutta tableaux and the registry of multirate method pairs.
//!
//! Every coefficient is written as an expression in the micro-step index `l`,
//! the ratio `M`, and method constants (`g` for the SDIRK diagonal, `c2` and
//! `b2` for the free parameters of the S-type schemes). Rational entries are
//! evaluated exactly and rounded once.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use num_traits::ToPrimitive;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::{parse_rows, parse_vec, Env, Expr, Num};

/// Largest supported multirate ratio.
pub const MAX_RATIO: usize = 10_000;

/// SDIRK diagonal of the three stage L-stable methods, as printed.
pub const GAMMA3: &str = "0.43586652150845899942";

/// Closed form of [`GAMMA3`] through the cotangent representation.
pub fn gamma3_closed_form() -> f64 {
    let t = (1.0 / (2.0 * 2f64.sqrt())).atan() / 3.0;
    0.5 * (2.0 + 6f64.sqrt() * t.sin() - 2f64.sqrt() * t.cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Kind {
    Explicit,
    Sdirk(f64),
}

#[derive(Debug, Clone)]
pub struct ButcherTableau {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub b_hat: DVector<f64>,
    pub c: DVector<f64>,
    pub kind: Kind,
}

impl ButcherTableau {
    pub fn stages(&self) -> usize {
        self.b.len()
    }

    pub fn is_implicit(&self) -> bool {
        matches!(self.kind, Kind::Sdirk(_))
    }

    pub fn gamma(&self) -> f64 {
        match self.kind {
            Kind::Sdirk(g) => g,
            Kind::Explicit => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Flag {
    Telescopic,
    NaturallyAdaptive,
    StifflyAccurateSlow,
    StifflyAccurateFast,
    Fsal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Side {
    /// Fast stages reading slow stage derivatives.
    FS,
    /// Slow stages reading fast stage derivatives.
    SF,
}

/// Which micro-steps a coefficient block applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sel {
    All,
    First,
    Rest,
    UpToL2,
    AfterL2,
    BeforeLast,
    Last,
    /// M = 1, where a scheme reduces to its single-rate base method.
    SingleRate,
}

impl Sel {
    fn matches(self, lambda: usize, m: usize, l2: usize) -> bool {
        match self {
            Sel::All => true,
            Sel::First => lambda == 1,
            Sel::Rest => lambda >= 2,
            Sel::UpToL2 => m > 1 && lambda <= l2,
            Sel::AfterL2 => m > 1 && lambda > l2,
            Sel::BeforeLast => lambda < m,
            Sel::Last => lambda == m,
            Sel::SingleRate => m == 1,
        }
    }
}

/// Evaluator for the coupling blocks of one side.
#[derive(Debug, Clone)]
pub struct CouplingRule {
    pub shape: (usize, usize),
    pub free_parameters: Vec<(String, f64)>,
    pieces: Vec<(Sel, Vec<Vec<Expr>>)>,
    env: Env,
    locals: Vec<(&'static str, Expr)>,
}

impl CouplingRule {
    /// Block for micro-step `lambda` (1-based) at ratio `m`.
    pub fn eval(&self, lambda: usize, m: usize) -> Result<DMatrix<f64>> {
        check_ratio(m)?;
        if lambda == 0 || lambda > m {
            return Err(Error::LambdaOutOfRange { lambda, m });
        }
        let l2 = split_point(&self.env, m);
        let (sel, block) = self
            .pieces
            .iter()
            .find(|(s, _)| s.matches(lambda, m, l2))
            .ok_or_else(|| Error::Coefficient(format!("no block for lambda={lambda}, M={m}")))?;
        let mut env = self.env.clone();
        env.insert("M", Num::int(m as i64));
        env.insert("l", Num::int(lambda as i64));
        env.insert("L2", Num::int(l2 as i64));
        if *sel != Sel::SingleRate {
            for (name, e) in &self.locals {
                let v = e.eval(&env).map_err(Error::Coefficient)?;
                env.insert(name, v);
            }
        }
        let (r, c) = self.shape;
        let mut out = DMatrix::zeros(r, c);
        for (i, row) in block.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                if !e.is_literal_zero() {
                    out[(i, j)] = e.eval(&env).map_err(Error::Coefficient)?.to_f64();
                }
            }
        }
        Ok(out)
    }

    /// All blocks `lambda = 1..=m`.
    pub fn eval_all(&self, m: usize) -> Result<Vec<DMatrix<f64>>> {
        (1..=m).map(|l| self.eval(l, m)).collect()
    }

    /// Split index `L2` used by the S-type schemes; zero otherwise.
    pub fn split_point(&self, m: usize) -> usize {
        split_point(&self.env, m)
    }
}

fn check_ratio(m: usize) -> Result<()> {
    if m == 0 || m > MAX_RATIO {
        return Err(Error::InvalidRatio(m));
    }
    Ok(())
}

/// `floor(c2 M)` kept inside `1..=M-1` so both phases are non-empty.
fn split_point(env: &Env, m: usize) -> usize {
    match env.get("c2") {
        Some(Num::Exact(c2)) if m > 1 => {
            let raw = (c2 * num_rational::BigRational::from_integer((m as i64).into()))
                .floor()
                .to_integer()
                .to_i64()
                .unwrap_or(1);
            raw.clamp(1, m as i64 - 1) as usize
        }
        Some(Num::Real(c2)) if m > 1 => ((c2 * m as f64).floor() as i64).clamp(1, m as i64 - 1) as usize,
        _ => 0,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodInfo {
    pub name: &'static str,
    pub order_p: usize,
    pub embedded_order: usize,
    pub flags: Vec<Flag>,
}

#[derive(Debug, Clone)]
pub struct MrGarkMethod {
    pub name: &'static str,
    pub fast: ButcherTableau,
    pub slow: ButcherTableau,
    pub fs_coupling: CouplingRule,
    pub sf_coupling: CouplingRule,
    pub order_p: usize,
    pub embedded_order: usize,
    pub flags: Vec<Flag>,
}

impl MrGarkMethod {
    pub fn has(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }

    pub fn coupling(&self, side: Side) -> &CouplingRule {
        match side {
            Side::FS => &self.fs_coupling,
            Side::SF => &self.sf_coupling,
        }
    }

    pub fn info(&self) -> MethodInfo {
        MethodInfo {
            name: self.name,
            order_p: self.order_p,
            embedded_order: self.embedded_order,
            flags: self.flags.clone(),
        }
    }
}

pub fn eval_coupling(method: &MrGarkMethod, side: Side, lambda: usize, m: usize) -> Result<DMatrix<f64>> {
    method.coupling(side).eval(lambda, m)
}

struct BaseDef {
    a: &'static [&'static str],
    b: &'static str,
    b_hat: &'static str,
}

struct MethodDef {
    name: &'static str,
    p: usize,
    p_hat: usize,
    flags: &'static [Flag],
    consts: &'static [(&'static str, &'static str)],
    params: &'static [&'static str],
    locals: &'static [(&'static str, &'static str)],
    fast: BaseDef,
    slow: BaseDef,
    fs: &'static [(Sel, &'static [&'static str])],
    sf: &'static [(Sel, &'static [&'static str])],
}

const RALSTON2: BaseDef = BaseDef {
    a: &["0, 0", "2/3, 0"],
    b: "1/4, 3/4",
    b_hat: "1, 0",
};

const SDIRK2: BaseDef = BaseDef {
    a: &["1-1/s2, 0", "1/s2, 1-1/s2"],
    b: "1/s2, 1-1/s2",
    b_hat: "3/5, 2/5",
};

const RALSTON3: BaseDef = BaseDef {
    a: &["0, 0, 0", "1/2, 0, 0", "0, 3/4, 0"],
    b: "2/9, 1/3, 4/9",
    b_hat: "1/40, 37/40, 1/20",
};

const SDIRK3: BaseDef = BaseDef {
    a: &["g, 0, 0", "-2*D/(3*E), g, 0", "(4*g-1)/(4*D), -3*E^2/(4*D), g"],
    b: "(4*g-1)/(4*D), -3*E^2/(4*D), g",
    b_hat: "(-6*g^2+6*g-1)/(4*D), 3*(4*g^3-10*g^2+6*g-1)/(4*D), 0",
};

const GAMMA3_CONSTS: &[(&str, &str)] = &[("g", GAMMA3), ("D", "3*g^3-9*g^2+6*g-1"), ("E", "2*g^2-4*g+1")];

const EXEX2S_A: &[&str] = &["0, 0", "c2, 0"];

const EXEX3S_A: &[&str] = &[
    "0, 0, 0",
    "c2, 0, 0",
    "(3*c2^2-3*c2+1)/(c2*(3*c2-2)), (c2-1)/(c2*(3*c2-2)), 0",
];

const SOFRONIOU5: &[&str] = &[
    "0, 0, 0, 0, 0",
    "2/5, 0, 0, 0, 0",
    "-3/20, 3/4, 0, 0, 0",
    "19/44, -15/44, 10/11, 0, 0",
    "11/72, 25/72, 25/72, 11/72, 0",
];

const FEHLBERG: BaseDef = BaseDef {
    a: &[
        "0, 0, 0, 0, 0, 0",
        "1/4, 0, 0, 0, 0, 0",
        "3/32, 9/32, 0, 0, 0, 0",
        "1932/2197, -7200/2197, 7296/2197, 0, 0, 0",
        "439/216, -8, 3680/513, -845/4104, 0, 0",
        "-8/27, 2, -3544/2565, 1859/4104, -11/40, 0",
    ],
    b: "25/216, 0, 1408/2565, 2197/4104, -1/5, 0",
    b_hat: "16/135, 0, 6656/12825, 28561/56430, -9/50, 2/55",
};

const DEFS: &[MethodDef] = &[
    MethodDef {
        name: "EX-EX 2(1)A",
        p: 2,
        p_hat: 1,
        flags: &[Flag::Telescopic, Flag::NaturallyAdaptive],
        consts: &[],
        params: &[],
        locals: &[],
        fast: RALSTON2,
        slow: RALSTON2,
        fs: &[
            (Sel::SingleRate, RALSTON2.a),
            (Sel::First, &["0, 0", "2/(3*M), 0"]),
            (
                Sel::Rest,
                &[
                    "(3*M^3-11*M^2+20*l*M-20*M-20*l+20)/(20*(M-1)*M), -M*(3*M-11)/(20*(M-1))",
                    "(-3*M^3-9*M^2+60*l*M-20*M-60*l+20)/(60*(M-1)*M), M*(M+3)/(20*(M-1))",
                ],
            ),
        ],
        sf: &[
            (Sel::SingleRate, RALSTON2.a),
            (Sel::First, &["0, 0", "-(M-2)*M/3, M^2/3"]),
            (Sel::Rest, &["0, 0", "0, 0"]),
        ],
    },
    MethodDef {
        name: "EX-EX 2(1)S",
        p: 2,
        p_hat: 1,
        flags: &[Flag::Telescopic, Flag::NaturallyAdaptive],
        consts: &[("c2", "2/3")],
        params: &["c2"],
        locals: &[],
        fast: BaseDef {
            a: EXEX2S_A,
            b: "(2*c2-1)/(2*c2), 1/(2*c2)",
            b_hat: "1, 0",
        },
        slow: BaseDef {
            a: EXEX2S_A,
            b: "(2*c2-1)/(2*c2), 1/(2*c2)",
            b_hat: "1, 0",
        },
        fs: &[
            (Sel::SingleRate, EXEX2S_A),
            (Sel::UpToL2, &["(l-1)/M, 0", "(l+c2-1)/M, 0"]),
            (
                Sel::AfterL2,
                &[
                    "(l-1)*(2*c2-1)/(2*M*c2), (l-1)/(2*M*c2)",
                    "M/(3*(L2-M)) + (-l+2*c2*(2*l+c2-2)+1)/(2*M*c2), M/(3*M-3*L2) + (l-1)/(2*M*c2) + (1-l)/M",
                ],
            ),
        ],
        sf: &[
            (Sel::SingleRate, EXEX2S_A),
            (
                Sel::UpToL2,
                &["0, 0", "M*(-2*M+6*c2+3*L2-3)/(6*L2), M*(2*M-3*L2+3)/(6*L2)"],
            ),
            (Sel::AfterL2, &["0, 0", "0, 0"]),
        ],
    },
    MethodDef {
        name: "EX-EX 3(2)3s-A",
        p: 3,
        p_hat: 2,
        flags: &[Flag::Telescopic],
        consts: &[],
        params: &[],
        locals: &[],
        fast: RALSTON3,
        slow: RALSTON3,
        fs: &[
            (Sel::SingleRate, RALSTON3.a),
            (Sel::First, &["0, 0, 0", "1/(2*M), 0, 0", "0, 3/(4*M), 0"]),
            (
                Sel::Rest,
                &[
                    "(3*M^3-8*M^2+6*l*M-6*l+6)/(6*(M-1)*M), (-3*M^2+8*M-6)/(6*(M-1)), 0",
                    "(-2*M^2+6*l*M-3*M-6*l+3)/(6*(M-1)*M), M/(3*(M-1)), 0",
                    "(-3*M^3+2*M^2+12*l*M-9*M-12*l+12)/(12*(M-1)*M), (3*M^3-2*M^2+6*M-9)/(12*(M-1)*M), 0",
                ],
            ),
        ],
        sf: &[
            (Sel::SingleRate, RALSTON3.a),
            (
                Sel::First,
                &[
                    "0, 0, 0",
                    "-M*(16*M-33)/66, 8*M^2/33, 0",
                    "(11*M^4-22*M^3+26*M^2+11*M+44)/264, (-11*M^4+22*M^3-16*M^2-11*M+22)/88, (M^4-2*M^3+M^2+M+4)/12",
                ],
            ),
            (
                Sel::Rest,
                &[
                    "0, 0, 0",
                    "0, 0, 0",
                    "(-M^4+2*M^3+2*M^2+3*M-4)/(24*(M-1)), (M^3-M^2-M+2)/8, (-M^4+2*M^3-M^2+3*M-4)/(12*(M-1))",
                ],
            ),
        ],
    },
    MethodDef {
        name: "EX-EX 3(2)4s-A",
        p: 3,
        p_hat: 2,
        flags: &[Flag::Telescopic, Flag::NaturallyAdaptive],
        consts: &[],
        params: &[],
        locals: &[],
        fast: EXEX3_4S,
        slow: EXEX3_4S,
        fs: &[
            (Sel::SingleRate, EXEX3_4S.a),
            (
                Sel::First,
                &[
                    "0, 0, 0, 0",
                    "1/(3*M), 0, 0, 0",
                    "5*(518*M^3-2140*M^2+2399*M-777)/(2331*M*(3*M-4)), -5*(518*M^3-2140*M^2+1622*M+259)/(2331*M*(3*M-4)), 0, 0",
                    "17*(141932*M^3-445231*M^2+481160*M-178710)/(852480*M*(3*M-4)), -17*(94535*M^3-228442*M^2+142736*M-5180)/(340992*M*(3*M-4)), 3213*M/5120, 0",
                ],
            ),
            (
                Sel::Rest,
                &[
                    "(l-1)/M, 0, 0, 0",
                    "(3*l-2)/(3*M), 0, 0, 0",
                    "(-5965*M^3+6993*l*M^2+12092*M^2-16317*l*M-858*M+9324*l-5439)/(2331*M*(3*M^2-7*M+4)), 5*(1193*M^3-3040*M^2+1622*M+259)/(2331*M*(3*M^2-7*M+4)), 0, 0",
                    "(-867119*M^3+511488*l*M^2+1937719*M^2-1193472*l*M-1006056*M+681984*l-74370)/(170496*M*(3*M^2-7*M+4)), 17*(51007*M^3-119207*M^2+71368*M-2590)/(170496*M*(3*M^2-7*M+4)), 0, 0",
                ],
            ),
        ],
        sf: &[
            (Sel::SingleRate, EXEX3_4S.a),
            (
                Sel::First,
                &[
                    "0, 0, 0, 0",
                    "(361*M-102*M^2)/1083, 34*M^2/361, 0, 0",
                    "0, -5*M*(981*M-1805)/6498, 5*M*(327*M-361)/2166, 0",
                    "M*(1480461*M^2-3944118*M+3007130)/2772480, -119*M*(3249*M^2-20358*M+18050)/3326976, -119*M*(66063*M^2-78954*M-18050)/5544960, (M-1)*M^2",
                ],
            ),
            (Sel::Rest, &["0, 0, 0, 0", "0, 0, 0, 0", "0, 0, 0, 0", "0, 0, 0, 0"]),
        ],
    },
    MethodDef {
        name: "EX-EX 3(2)S",
        p: 3,
        p_hat: 2,
        flags: &[Flag::Telescopic],
        consts: &[("c2", "1/2"), ("b2", "1/2")],
        params: &["c2", "b2"],
        locals: &[
            ("P", "(2*l-1)/(12*c2*(L2-M)) + (1-2*l)/(12*c2*(L2+M))"),
            ("K", "c2*l*(c2*(4*L2-3)-3*L2+3)/((c2-1)*(3*c2^2+4*c2+1)*(L2+1))"),
        ],
        fast: BaseDef {
            a: EXEX3S_A,
            b: "(3*c2-1)/(6*c2), -1/(6*(c2-1)*c2), (3*c2-2)/(6*(c2-1))",
            b_hat: "b2*(c2-1)+1/2, b2, (1-2*b2*c2)/2",
        },
        slow: BaseDef {
            a: EXEX3S_A,
            b: "(3*c2-1)/(6*c2), -1/(6*(c2-1)*c2), (3*c2-2)/(6*(c2-1))",
            b_hat: "b2*(c2-1)+1/2, b2, (1-2*b2*c2)/2",
        },
        fs: &[
            (Sel::SingleRate, EXEX3S_A),
            (Sel::UpToL2, &["(l-1)/M, 0, 0", "(c2+l-1)/M, 0, 0", "l/M, 0, 0"]),
            (
                Sel::AfterL2,
                &[
                    "P+(2*l-1)/(2*M), -P-1/(2*M), 0",
                    "P+(2*l-1)/(2*M), -P+(2*c2-1)/(2*M), 0",
                    "P+(2*l-1)/(2*M), -P+1/(2*M), 0",
                ],
            ),
        ],
        sf: &[
            (Sel::SingleRate, EXEX3S_A),
            (Sel::UpToL2, &["0, 0, 0", "c2*M/L2+2*K, -K, -K", "2*K, -K, -K"]),
            (
                Sel::AfterL2,
                &[
                    "0, 0, 0",
                    "0, 0, 0",
                    "l/(3*c2-2)+(c2*(3*L2-4)-3*L2+3)/(6*c2-4)+M/(M-L2), l/(2-3*c2), (c2*(4-3*L2)+3*(L2-1))/(6*c2-4)",
                ],
            ),
        ],
    },
    MethodDef {
        name: "EX-EX 4(3)A",
        p: 4,
        p_hat: 3,
        flags: &[Flag::Telescopic, Flag::Fsal],
        consts: &[],
        params: &[],
        locals: &[],
        fast: EXEX4,
        slow: EXEX4,
        fs: &[
            (Sel::SingleRate, EXEX4.a),
            (
                Sel::First,
                &[
                    "0, 0, 0, 0, 0",
                    "2/(5*M), 0, 0, 0, 0",
                    "3*(10*M^3-30*M^2+22*M-1)/(20*M*(3*M-4)), -3*(2*M^3-6*M^2+2*M+3)/(4*M*(3*M-4)), 0, 0, 0",
                    "0, 3*(10*M^3-50*M^2+116*M-83)/(22*M*(3*M-4)), (-30*M^3+150*M^2-282*M+161)/(22*M*(3*M-4)), 0, 0",
                    "11/(72*M), 25/(72*M), 25/(72*M), 11/(72*M), 0",
                ],
            ),
            (
                Sel::Rest,
                &[
                    "11*(l-1)/(72*M), 25*(l-1)/(72*M), 25*(l-1)/(72*M), 11*(l-1)/(72*M), 0",
                    "(-450*M^2+956*l*M-497*M-956*l+776)/(450*(M-1)*M), (450*M^2-506*l*M+227*M+506*l-506)/(450*(M-1)*M), 0, 0, 0",
                    "(-900*M^3+1239*l*M^2+2217*M^2-2891*l*M-97*M+1652*l-1562)/(600*M*(3*M^2-7*M+4)), (900*M^3+561*l*M^2-2937*M^2-1309*l*M+1777*M+748*l+602)/(600*M*(3*M^2-7*M+4)), 0, 0, 0",
                    "0, (-90*M^3+99*l*M^2+197*M^2-231*l*M-205*M+132*l+117)/(22*M*(3*M^2-7*M+4)), (3240*M^3-825*l*M^2-7455*M^2+1925*l*M+8227*M-1100*l-4696)/(792*M*(3*M^2-7*M+4)), -11*(l-1)/(72*M), 0",
                    "11*l/(72*M), 25*l/(72*M), 25*l/(72*M), 11*l/(72*M), 0",
                ],
            ),
        ],
        sf: &[
            (Sel::SingleRate, EXEX4.a),
            (
                Sel::First,
                &[
                    "0, 0, 0, 0, 0",
                    "2*M/5, 0, 0, 0, 0",
                    "-3*M*(5*M-4)/20, 3*M^2/4, 0, 0, 0",
                    "M*(56*M^2-81*M+44)/44, -5*M^2*(16*M-13)/44, -5*(M-3)*M^2/11, (M-1)*M^2, 0",
                    "11/72, 25/72, 25/72, 11/72, 0",
                ],
            ),
            (
                Sel::Rest,
                &[
                    "0, 0, 0, 0, 0",
                    "0, 0, 0, 0, 0",
                    "0, 0, 0, 0, 0",
                    "0, 0, 0, 0, 0",
                    "11/72, 25/72, 25/72, 11/72, 0",
                ],
            ),
        ],
    },
    MethodDef {
        name: "EX-IM 2(1)A",
        p: 2,
        p_hat: 1,
        flags: &[Flag::StifflyAccurateSlow],
        consts: &[],
        params: &[],
        locals: &[],
        fast: RALSTON2,
        slow: SDIRK2,
        fs: &[(Sel::All, &["(l-1)/M, 0", "(3*l-1)/(3*M), 0"])],
        sf: &[
            (Sel::First, &["M-M/s2, 0", "1/4, 3/4"]),
            (Sel::Rest, &["0, 0", "1/4, 3/4"]),
        ],
    },
    MethodDef {
        name: "EX-IM 3(2)A",
        p: 3,
        p_hat: 2,
        flags: &[Flag::StifflyAccurateSlow],
        consts: GAMMA3_CONSTS,
        params: &[],
        locals: &[],
        fast: RALSTON3,
        slow: SDIRK3,
        fs: &[(
            Sel::All,
            &[
                "(l-1)/M, 0, 0",
                "(2*l-1)/(2*M), 0, 0",
                "(-60*l*g^3+42*g^3+18*M*g^2+72*l*g^2-72*g^2-36*M*g+42*l*g+3*g+9*M-16*l+4)/(16*M*D), -9*E*(M+3*g-6*g*l)/(16*M*D), 0",
            ],
        )],
        sf: &[
            (
                Sel::First,
                &[
                    "M*g, 0, 0",
                    "-M*(36*M*g^4-36*g^4-120*M*g^3+126*g^3+108*M*g^2-138*g^2-36*M*g+51*g+4*M-6)/(9*E^2), 4*M^2*(9*g^4-30*g^3+27*g^2-9*g+1)/(9*E^2), 0",
                    "2/9, 1/3, 4/9",
                ],
            ),
            (Sel::Rest, &["0, 0, 0", "0, 0, 0", "2/9, 1/3, 4/9"]),
        ],
    },
    MethodDef {
        name: "EX-IM 4(3)A",
        p: 4,
        p_hat: 3,
        flags: &[Flag::StifflyAccurateSlow],
        consts: &[],
        params: &[],
        locals: &[],
        fast: FEHLBERG,
        slow: BaseDef {
            a: &[
                "1/4, 0, 0, 0, 0",
                "13/20, 1/4, 0, 0, 0",
                "580/1287, -175/5148, 1/4, 0, 0",
                "12698/37375, -201/2990, 891/11500, 1/4, 0",
                "944/1365, -400/819, 99/35, -575/252, 1/4",
            ],
            b: "944/1365, -400/819, 99/35, -575/252, 1/4",
            b_hat: "41911/60060, -83975/144144, 3393/1120, -27025/11088, 103/352",
        },
        fs: &[(
            Sel::All,
            &[
                "(l-1)/M, 0, 0, 0, 0",
                "(4*l-3)/(4*M), 0, 0, 0, 0",
                "(45*M^3-90*M^2+551*l*M-335*M+90*l-90)/(416*M^2), -15*(3*M^3-6*M^2+9*l*M-5*M+6*l-6)/(416*M^2), 0, 0, 0",
                "(1440*M^3-2880*M^2+6517*l*M-3709*M-3960*l+3960)/(2197*M^2), -60*(24*M^3-48*M^2+72*l*M-59*M-66*l+66)/(2197*M^2), 0, 0, 0",
                "(560*M^3-362*M^2+386*l*M-529*M-1155*l+1155)/(273*M^2), -5*(672*M^3-2439*M^2+4046*l*M-2590*M-1386*l+1386)/(1638*M^2), -33*(11*M-14*l+7)/(28*M), 575*(3*M-2*l+1)/(252*M), 0",
                "0, 0, (160*M^3-109*M^2-300*M+165)/(32*M^2), (-160*M^3+109*M^2+32*l*M+284*M-165)/(32*M^2), 0",
            ],
        )],
        sf: &[
            (
                Sel::First,
                &[
                    "M/4, 0, 0, 0, 0, 0",
                    "-M*(169*M-90)/100, 169*M^2/100, 0, 0, 0, 0",
                    "-M*(155*M-132)/198, 155*M^2/198, 0, 0, 0, 0",
                    "-M*(497*M-552)/920, 14*M^2/23, -896*M^2/10925, 1183*M^2/87400, 0, 0",
                    "25/216, 0, 1408/2565, 2197/4104, -1/5, 0",
                ],
            ),
            (
                Sel::Rest,
                &[
                    "0, 0, 0, 0, 0, 0",
                    "0, 0, 0, 0, 0, 0",
                    "0, 0, 0, 0, 0, 0",
                    "0, 0, 0, 0, 0, 0",
                    "25/216, 0, 1408/2565, 2197/4104, -1/5, 0",
                ],
            ),
        ],
    },
    MethodDef {
        name: "IM-EX 2(1)A",
        p: 2,
        p_hat: 1,
        flags: &[Flag::StifflyAccurateFast],
        consts: &[],
        params: &[],
        locals: &[],
        fast: SDIRK2,
        slow: RALSTON2,
        fs: &[
            (Sel::BeforeLast, &["(2*l-s2)/(2*M), 0", "l/M, 0"]),
            (Sel::Last, &["(2*M-s2)/(2*M), 0", "1/4, 3/4"]),
        ],
        sf: &[(Sel::All, &["0, 0", "2/3, 0"])],
    },
    MethodDef {
        name: "IM-EX 3(2)A",
        p: 3,
        p_hat: 2,
        flags: &[Flag::StifflyAccurateFast],
        consts: GAMMA3_CONSTS,
        params: &[],
        locals: &[],
        fast: SDIRK3,
        slow: RALSTON3,
        fs: &[
            (
                Sel::BeforeLast,
                &[
                    "(g+l-1)/M, 0, 0",
                    "(6*l*g^2-12*l*g+3*g+3*l-1)/(3*M*E), 0, 0",
                    "l/M, 0, 0",
                ],
            ),
            (
                Sel::Last,
                &[
                    "(M+g-1)/M, 0, 0",
                    "(12*M^2*g^3-36*M*g^3+18*g^3-36*M^2*g^2+108*M*g^2-42*g^2+24*M^2*g-60*M*g+21*g-4*M^2+9*M-3)/(9*M*E^2), -4*(M-3*g)*D/(9*E^2), 0",
                    "2/9, 1/3, 4/9",
                ],
            ),
        ],
        sf: &[(
            Sel::All,
            &[
                "0, 0, 0",
                "1/2, 0, 0",
                "-3*(12*g^3+6*M*g^2-18*g^2-12*M*g+6*g+3*M-1)/(32*D), 9*(M+6*g-3)*E/(32*D), 0",
            ],
        )],
    },
    MethodDef {
        name: "IM-EX 4(2)A",
        p: 4,
        p_hat: 2,
        flags: &[Flag::StifflyAccurateFast],
        consts: &[],
        params: &[],
        locals: &[],
        fast: BaseDef {
            a: &[
                "191/1000, 0, 0, 0, 0, 0",
                "209/1000, 191/1000, 0, 0, 0, 0",
                "8466728223/12920014250, -12729769579/51680057000, 191/1000, 0, 0, 0",
                "102093693512533448034070599559771/222819131395744425631166002057000, -17248151203963882893894684614/68098756539041694875050734125, 783289327941232988291717301/1938400447113914098574736860, 191/1000, 0, 0",
                "1837041228720545025825201951582239534326/2195453146940870392428577778808091404375, -12181532573386077454382848427541846123/17628427274186874088578235825358750000, 4528991149246665992465958589958885289/8624433917634487442857055565277187500, 83750160542686187/606298988321250000, 191/1000, 0",
                "2288000/4732539, -2203/14250, 247273/613500, 30767/152250, -1/8, 191/1000",
            ],
            b: "2288000/4732539, -2203/14250, 247273/613500, 30767/152250, -1/8, 191/1000",
            b_hat: "1837041228720545025825201951582239534326/2195453146940870392428577778808091404375, -12181532573386077454382848427541846123/17628427274186874088578235825358750000, 4528991149246665992465958589958885289/8624433917634487442857055565277187500, 83750160542686187/606298988321250000, 191/1000, 0",
        },
        slow: BaseDef {
            a: &[
                "0, 0, 0, 0",
                "2/5, 0, 0, 0",
                "-3/20, 3/4, 0, 0",
                "19/44, -15/44, 10/11, 0",
            ],
            b: "11/72, 25/72, 25/72, 11/72",
            b_hat: "1/5, 1/4, 3/8, 7/40",
        },
        fs: &[
            (
                Sel::BeforeLast,
                &[
                    "(1000*l-809)/(1000*M), 0, 0, 0",
                    "(5*l-3)/(5*M), 0, 0, 0",
                    "(5*l-2)/(5*M), 0, 0, 0",
                    "(5*l-1)/(5*M), 0, 0, 0",
                    "l/M, 0, 0, 0",
                    "l/M, 0, 0, 0",
                ],
            ),
            (
                Sel::Last,
                &[
                    "(1000*M-809)/(1000*M), 0, 0, 0",
                    "(11380195070453*M^3-18408895671188*M^2+14477055081282*M-5016867120000)/(8361445200000*M), -209*(54450694117*M^2-88080840532*M+29261291298)/8361445200000, 0, 0",
                    "(-45728475609635251*M^3-421177045491040004*M^2+701106234145018506*M-206755963893960000)/(516889909734900000*M), 409*(111805563837739*M^2+1029772727361956*M-450406661149434)/516889909734900000, 0, 0",
                    "(313252304037186017*M^3-457232580001772932*M^2+265208779590977398*M-51451316893680000)/(257256584468400000*M), -203*(2350256923212739*M^2-2188535491388044*M-533759817986934)/257256584468400000, 203*(885000*M^2+70000*M-628199)/282071856, 0",
                    "0, (-885000*M^2+885000*M+831041)/859500, (590000*M^2-590000*M-114791)/573000, 2101/9000",
                    "11/72, 25/72, 25/72, 11/72",
                ],
            ),
        ],
        sf: &[(
            Sel::All,
            &[
                "0, 0, 0, 0, 0, 0",
                "2/5, 0, 0, 0, 0, 0",
                "3*(500*M-409)/1045, -6*(250*M-309)/1045, 0, 0, 0, 0",
                "(547008637842659863-386281780255161444*M)/152025995207353729, 3*(2856036493343421*M-3906629787402737)/2288803570033750, -741819*(1303514627*M-4489322119)/2239523110391875, -8391*(18565412379*M-24937027363)/202099662773750, 0, 0",
            ],
        )],
    },
];

const EXEX3_4S: BaseDef = BaseDef {
    a: &[
        "0, 0, 0, 0",
        "1/3, 0, 0, 0",
        "0, 5/9, 0, 0",
        "833/7680, 833/9216, 3213/5120, 0",
    ],
    b: "101/714, 1/3, 1/6, 128/357",
    b_hat: "7/40, -425/8784, 100037/131760, 188/1647",
};

const EXEX4: BaseDef = BaseDef {
    a: SOFRONIOU5,
    b: "11/72, 25/72, 25/72, 11/72, 0",
    b_hat: "1251515/8970912, 3710105/8970912, 2519695/8970912, 61105/8970912, 119041/747576",
};

fn parse_err(e: String) -> Error {
    Error::Coefficient(e)
}

fn build_tableau(def: &BaseDef, env: &Env) -> Result<ButcherTableau> {
    let rows = parse_rows(def.a).map_err(parse_err)?;
    let s = rows.len();
    let mut a = DMatrix::zeros(s, s);
    let mut c = DVector::zeros(s);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != s {
            return Err(Error::Coefficient(format!("row {i} has {} entries", row.len())));
        }
        let mut sum = Num::int(0);
        for (j, e) in row.iter().enumerate() {
            let v = e.eval(env).map_err(parse_err)?;
            a[(i, j)] = v.to_f64();
            sum = crate::expr::add(sum, v);
        }
        c[i] = sum.to_f64();
    }
    let vec = |src: &str| -> Result<DVector<f64>> {
        let es = parse_vec(src).map_err(parse_err)?;
        if es.len() != s {
            return Err(Error::Coefficient(format!("weight vector {src:?} has wrong length")));
        }
        let vals = es
            .iter()
            .map(|e| e.eval(env).map(|v| v.to_f64()))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(parse_err)?;
        Ok(DVector::from_vec(vals))
    };
    let b = vec(def.b)?;
    let b_hat = vec(def.b_hat)?;
    let kind = classify_kind(&a)?;
    Ok(ButcherTableau { a, b, b_hat, c, kind })
}

fn classify_kind(a: &DMatrix<f64>) -> Result<Kind> {
    let s = a.nrows();
    for i in 0..s {
        for j in i + 1..s {
            if a[(i, j)] != 0.0 {
                return Err(Error::Coefficient("tableau is not lower triangular".into()));
            }
        }
    }
    let g = a[(0, 0)];
    if (0..s).all(|i| a[(i, i)] == 0.0) {
        Ok(Kind::Explicit)
    } else if (0..s).all(|i| a[(i, i)] == g) {
        Ok(Kind::Sdirk(g))
    } else {
        Err(Error::Coefficient("diagonal is neither zero nor constant".into()))
    }
}

fn build_rule(
    pieces: &[(Sel, &'static [&'static str])],
    shape: (usize, usize),
    env: &Env,
    locals: &[(&'static str, &'static str)],
    free: &[(String, f64)],
) -> Result<CouplingRule> {
    let mut parsed = Vec::new();
    for (sel, rows) in pieces {
        let block = parse_rows(rows).map_err(parse_err)?;
        if block.len() != shape.0 || block.iter().any(|r| r.len() != shape.1) {
            return Err(Error::Coefficient(format!(
                "coupling block has wrong shape, expected {shape:?}"
            )));
        }
        parsed.push((*sel, block));
    }
    let locals = locals
        .iter()
        .map(|(n, src)| Expr::parse(src).map(|e| (*n, e)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(parse_err)?;
    Ok(CouplingRule {
        shape,
        free_parameters: free.to_vec(),
        pieces: parsed,
        env: env.clone(),
        locals,
    })
}

fn instantiate(def: &MethodDef, overrides: &[(&str, &str)]) -> Result<MrGarkMethod> {
    let mut env = Env::new();
    for (name, src) in def.consts {
        let src = overrides
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| *v)
            .unwrap_or(src);
        let v = Expr::parse(src).and_then(|e| e.eval(&env)).map_err(parse_err)?;
        env.insert(name, v);
    }
    for (k, _) in overrides {
        if !def.params.contains(k) {
            return Err(Error::UnknownParameter {
                method: def.name.into(),
                param: (*k).into(),
            });
        }
    }
    let free: Vec<(String, f64)> = def.params.iter().map(|p| (p.to_string(), env[p].to_f64())).collect();
    let fast = build_tableau(&def.fast, &env)?;
    let slow = build_tableau(&def.slow, &env)?;
    let (sf, ss) = (fast.stages(), slow.stages());
    let fs_coupling = build_rule(def.fs, (sf, ss), &env, def.locals, &free)?;
    let sf_coupling = build_rule(def.sf, (ss, sf), &env, def.locals, &free)?;
    Ok(MrGarkMethod {
        name: def.name,
        fast,
        slow,
        fs_coupling,
        sf_coupling,
        order_p: def.p,
        embedded_order: def.p_hat,
        flags: def.flags.to_vec(),
    })
}

fn registry() -> &'static Vec<MrGarkMethod> {
    static REG: OnceLock<Vec<MrGarkMethod>> = OnceLock::new();
    REG.get_or_init(|| {
        DEFS.iter()
            .map(|d| instantiate(d, &[]).unwrap_or_else(|e| panic!("{}: {e}", d.name)))
            .collect()
    })
}

/// Names of all registered methods in registry order.
pub fn method_names() -> Vec<&'static str> {
    DEFS.iter().map(|d| d.name).collect()
}

/// Method with default parameters.
pub fn registry_lookup(name: &str) -> Result<MrGarkMethod> {
    registry()
        .iter()
        .find(|m| m.name == name)
        .cloned()
        .ok_or_else(|| Error::UnknownMethod(name.into()))
}

/// Method with free parameters overridden, e.g. `[("c2", "3/5")]`.
pub fn registry_lookup_with(name: &str, overrides: &[(&str, &str)]) -> Result<MrGarkMethod> {
    let def = DEFS
        .iter()
        .find(|d| d.name == name)
        .ok_or_else(|| Error::UnknownMethod(name.into()))?;
    instantiate(def, overrides)
}

pub fn list_methods() -> Vec<MethodInfo> {
    registry().iter().map(|m| m.info()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_methods_build() {
        assert_eq!(list_methods().len(), 12);
        for m in registry() {
            for t in [&m.fast, &m.slow] {
                let rs = &t.a * DVector::from_element(t.stages(), 1.0) - &t.c;
                assert!(rs.amax() < 1e-13, "{}", m.name);
                assert!((t.b.sum() - 1.0).abs() < 1e-13, "{}", m.name);
            }
        }
    }

    #[test]
    fn gamma_matches_closed_form() {
        let g: f64 = GAMMA3.parse().unwrap();
        assert!((g - gamma3_closed_form()).abs() < 1e-15);
        let m = registry_lookup("IM-EX 3(2)A").unwrap();
        assert_eq!(m.fast.kind, Kind::Sdirk(g));
    }

    #[test]
    fn lambda_range_is_checked() {
        let m = registry_lookup("EX-EX 2(1)A").unwrap();
        assert_eq!(
            eval_coupling(&m, Side::FS, 0, 3),
            Err(Error::LambdaOutOfRange { lambda: 0, m: 3 })
        );
        assert!(eval_coupling(&m, Side::FS, 4, 3).is_err());
        assert!(matches!(registry_lookup("RK4"), Err(Error::UnknownMethod(_))));
    }

    #[test]
    fn split_point_follows_floor_rule() {
        let m = registry_lookup("EX-EX 2(1)S").unwrap();
        assert_eq!(m.fs_coupling.split_point(3), 2);
        assert_eq!(m.fs_coupling.split_point(4), 2);
        assert_eq!(m.fs_coupling.split_point(5), 3);
        assert_eq!(m.fs_coupling.split_point(2), 1);
        let o = registry_lookup_with("EX-EX 2(1)S", &[("c2", "3/4")]).unwrap();
        assert_eq!(o.fs_coupling.split_point(8), 6);
        assert!(registry_lookup_with("EX-EX 2(1)S", &[("q", "1")]).is_err());
    }
}
