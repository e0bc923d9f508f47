//! Order-condition residuals for internally consistent MrGARK schemes up to order four.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::Result;
use crate::gark::{assemble, GarkMatrix, Partition};
use crate::tableaux::MrGarkMethod;

pub const ORDER_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Weights {
    /// `(b^f, b^s)`
    Main,
    /// `(b̂^f, b̂^s)`
    Embedded,
    /// `(b^f, b̂^s)`
    MixedSlowHat,
    /// `(b̂^f, b^s)`
    MixedFastHat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Group {
    Slow,
    Fast,
    Coupling,
}

use Partition::{Fast as F, Slow as S};

/// Elementary weight shapes of the internally consistent trees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// `b·1`
    B,
    /// `b·c`
    Bc,
    /// `b·c²`
    Bc2,
    /// `b·(A c)`
    BAc(Partition),
    /// `b·c³`
    Bc3,
    /// `b·(c × A c)`
    BcAc(Partition),
    /// `b·(A c²)`
    BAc2(Partition),
    /// `b·(A A c)`
    BAAc(Partition, Partition),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Condition {
    pub root: Partition,
    pub shape: Shape,
}

fn tag(p: Partition) -> char {
    match p {
        F => 'f',
        S => 's',
    }
}

impl Condition {
    pub fn order(&self) -> usize {
        match self.shape {
            Shape::B => 1,
            Shape::Bc => 2,
            Shape::Bc2 | Shape::BAc(_) => 3,
            _ => 4,
        }
    }

    /// Exact right-hand side `1/γ(t)`.
    pub fn rhs(&self) -> (i64, i64) {
        match self.shape {
            Shape::B => (1, 1),
            Shape::Bc => (1, 2),
            Shape::Bc2 => (1, 3),
            Shape::BAc(_) => (1, 6),
            Shape::Bc3 => (1, 4),
            Shape::BcAc(_) => (1, 8),
            Shape::BAc2(_) => (1, 12),
            Shape::BAAc(..) => (1, 24),
        }
    }

    pub fn colors(&self) -> Vec<Partition> {
        let mut v = vec![self.root];
        match self.shape {
            Shape::BAc(n) | Shape::BcAc(n) | Shape::BAc2(n) => v.push(n),
            Shape::BAAc(n, m) => v.extend([n, m]),
            _ => {}
        }
        v
    }

    pub fn group(&self) -> Group {
        let cols = self.colors();
        if cols.iter().all(|&p| p == S) {
            Group::Slow
        } else if cols.iter().all(|&p| p == F) {
            Group::Fast
        } else {
            Group::Coupling
        }
    }

    pub fn id(&self) -> String {
        let r = tag(self.root);
        match self.shape {
            Shape::B => format!("b{r}.1"),
            Shape::Bc => format!("b{r}.c{r}"),
            Shape::Bc2 => format!("b{r}.c{r}^2"),
            Shape::BAc(n) => format!("b{r}.A{r}{n}.c{n}", n = tag(n)),
            Shape::Bc3 => format!("b{r}.c{r}^3"),
            Shape::BcAc(n) => format!("b{r}.(c{r}*A{r}{n}.c{n})", n = tag(n)),
            Shape::BAc2(n) => format!("b{r}.A{r}{n}.c{n}^2", n = tag(n)),
            Shape::BAAc(n, m) => {
                let (n, m) = (tag(n), tag(m));
                format!("b{r}.A{r}{n}.A{n}{m}.c{m}")
            }
        }
    }
}

/// The 28 conditions through order four: 2 + 2 + 6 + 18.
pub fn catalog() -> Vec<Condition> {
    let mut out = Vec::new();
    let parts = [S, F];
    let push = |out: &mut Vec<Condition>, root, shape| out.push(Condition { root, shape });
    for r in parts {
        push(&mut out, r, Shape::B);
    }
    for r in parts {
        push(&mut out, r, Shape::Bc);
    }
    for r in parts {
        push(&mut out, r, Shape::Bc2);
    }
    for r in parts {
        for n in parts {
            push(&mut out, r, Shape::BAc(n));
        }
    }
    for r in parts {
        push(&mut out, r, Shape::Bc3);
    }
    for r in parts {
        for n in parts {
            push(&mut out, r, Shape::BcAc(n));
        }
    }
    for r in parts {
        for n in parts {
            push(&mut out, r, Shape::BAc2(n));
        }
    }
    for r in parts {
        for n in parts {
            for m in parts {
                push(&mut out, r, Shape::BAAc(n, m));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct Residual {
    pub id: String,
    pub order: usize,
    pub group: Group,
    pub value: f64,
    /// `rhs − value`
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub method: String,
    pub m: usize,
    pub weights: Weights,
    pub entries: Vec<Residual>,
}

impl ResidualReport {
    pub fn get(&self, id: &str) -> Option<&Residual> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn max_abs(&self, group: Option<Group>, max_order: usize) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.order <= max_order && group.is_none_or(|g| g == e.group))
            .map(|e| e.residual.abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_at_order(&self, group: Option<Group>, order: usize) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.order == order && group.is_none_or(|g| g == e.group))
            .map(|e| e.residual.abs())
            .fold(0.0, f64::max)
    }
}

struct Parts {
    a: [[DMatrix<f64>; 2]; 2],
    c: [DVector<f64>; 2],
    w: [DVector<f64>; 2],
}

fn ix(p: Partition) -> usize {
    match p {
        S => 0,
        F => 1,
    }
}

impl Parts {
    fn new(g: &GarkMatrix, weights: Weights) -> Self {
        let (wf, ws) = match weights {
            Weights::Main => (&g.b_fast, &g.b_slow),
            Weights::Embedded => (&g.b_hat_fast, &g.b_hat_slow),
            Weights::MixedSlowHat => (&g.b_fast, &g.b_hat_slow),
            Weights::MixedFastHat => (&g.b_hat_fast, &g.b_slow),
        };
        Parts {
            a: [[g.block(S, S), g.block(S, F)], [g.block(F, S), g.block(F, F)]],
            c: [g.c_slow(), g.c_fast()],
            w: [ws.clone(), wf.clone()],
        }
    }

    fn value(&self, cond: &Condition) -> f64 {
        let r = ix(cond.root);
        let w = &self.w[r];
        let c = &self.c[r];
        let blk = |x: Partition, y: Partition| &self.a[ix(x)][ix(y)];
        match cond.shape {
            Shape::B => w.sum(),
            Shape::Bc => w.dot(c),
            Shape::Bc2 => w.dot(&c.component_mul(c)),
            Shape::BAc(n) => w.dot(&(blk(cond.root, n) * &self.c[ix(n)])),
            Shape::Bc3 => w.dot(&c.map(|x| x * x * x)),
            Shape::BcAc(n) => w.dot(&c.component_mul(&(blk(cond.root, n) * &self.c[ix(n)]))),
            Shape::BAc2(n) => {
                let cn = &self.c[ix(n)];
                w.dot(&(blk(cond.root, n) * cn.component_mul(cn)))
            }
            Shape::BAAc(n, m) => w.dot(&(blk(cond.root, n) * (blk(n, m) * &self.c[ix(m)]))),
        }
    }
}

pub fn residuals_of(g: &GarkMatrix, name: &str, weights: Weights) -> ResidualReport {
    let parts = Parts::new(g, weights);
    let entries = catalog()
        .iter()
        .map(|cond| {
            let value = parts.value(cond);
            let (n, d) = cond.rhs();
            Residual {
                id: cond.id(),
                order: cond.order(),
                group: cond.group(),
                value,
                residual: n as f64 / d as f64 - value,
            }
        })
        .collect();
    ResidualReport {
        method: name.to_string(),
        m: g.m,
        weights,
        entries,
    }
}

pub fn residuals(method: &MrGarkMethod, m: usize, weights: Weights) -> Result<ResidualReport> {
    Ok(residuals_of(&assemble(method, m)?, method.name, weights))
}

/// The twelve coupling conditions summed over micro-steps, evaluated from the
/// base tableaus and coupling blocks alone. Residuals use the same
/// normalization as [`residuals`].
pub fn block_form_residuals(method: &MrGarkMethod, m: usize) -> Result<ResidualReport> {
    let fs = method.fs_coupling.eval_all(m)?;
    let sf = method.sf_coupling.eval_all(m)?;
    let (af, bf, cf) = (&method.fast.a, &method.fast.b, &method.fast.c);
    let (as_, bs, cs) = (&method.slow.a, &method.slow.b, &method.slow.c);
    let one_f = DVector::from_element(cf.len(), 1.0);
    let sq = |v: &DVector<f64>| v.component_mul(v);
    let mf = m as f64;
    let shift = |l: usize| cf + &one_f * (l as f64 - 1.0);
    let lams = 1..=m;

    let mut out: Vec<(Condition, f64, f64)> = Vec::new();
    let mut push = |root, shape, scale: f64, sum: f64| out.push((Condition { root, shape }, scale, sum));

    let s: f64 = lams.clone().map(|l| bf.dot(&(&fs[l - 1] * cs))).sum();
    push(F, Shape::BAc(S), mf, s);

    let s: f64 = lams.clone().map(|l| bs.dot(&(&sf[l - 1] * shift(l)))).sum();
    push(S, Shape::BAc(F), mf * mf, s);

    let s: f64 = lams
        .clone()
        .map(|l| {
            let v = &fs[l - 1] * cs;
            (l as f64 - 1.0) * bf.dot(&v) + bf.dot(&cf.component_mul(&v))
        })
        .sum();
    push(F, Shape::BcAc(S), mf * mf, s);

    let s: f64 = lams
        .clone()
        .map(|l| bs.dot(&cs.component_mul(&(&sf[l - 1] * shift(l)))))
        .sum();
    push(S, Shape::BcAc(F), mf * mf, s);

    let s: f64 = lams.clone().map(|l| bf.dot(&(&fs[l - 1] * sq(cs)))).sum();
    push(F, Shape::BAc2(S), mf, s);

    let s: f64 = lams
        .clone()
        .map(|l| {
            let k = l as f64 - 1.0;
            let a = &sf[l - 1];
            bs.dot(&(a * sq(cf))) + k * k * bs.dot(&(a * &one_f)) + 2.0 * k * bs.dot(&(a * cf))
        })
        .sum();
    push(S, Shape::BAc2(F), mf.powi(3), s);

    let s: f64 = lams.clone().map(|l| bs.dot(&(as_ * (&sf[l - 1] * shift(l))))).sum();
    push(S, Shape::BAAc(S, F), mf * mf, s);

    let s: f64 = lams.clone().map(|l| bs.dot(&(&sf[l - 1] * (&fs[l - 1] * cs)))).sum();
    push(S, Shape::BAAc(F, S), mf, s);

    let afcf = af * cf;
    let s: f64 = lams
        .clone()
        .map(|l| {
            let k = l as f64 - 1.0;
            let a = &sf[l - 1];
            0.5 * k * k * bs.dot(&(a * &one_f)) + k * bs.dot(&(a * cf)) + bs.dot(&(a * &afcf))
        })
        .sum();
    push(S, Shape::BAAc(F, F), mf.powi(3), s);

    let s: f64 = lams
        .clone()
        .map(|l| {
            let prev: f64 = (1..l).map(|k| bf.dot(&(&fs[k - 1] * cs))).sum();
            prev + bf.dot(&(af * (&fs[l - 1] * cs)))
        })
        .sum();
    push(F, Shape::BAAc(F, S), mf * mf, s);

    let ascs = as_ * cs;
    let s: f64 = lams.clone().map(|l| bf.dot(&(&fs[l - 1] * &ascs))).sum();
    push(F, Shape::BAAc(S, S), mf, s);

    let inner: DVector<f64> = lams
        .clone()
        .map(|k| &sf[k - 1] * shift(k))
        .fold(DVector::zeros(cs.len()), |acc, v| acc + v);
    let s: f64 = lams.map(|l| bf.dot(&(&fs[l - 1] * &inner))).sum();
    push(F, Shape::BAAc(S, F), mf.powi(3), s);

    let entries = out
        .into_iter()
        .map(|(cond, scale, sum)| {
            let (n, d) = cond.rhs();
            let value = sum / scale;
            Residual {
                id: cond.id(),
                order: cond.order(),
                group: cond.group(),
                value,
                residual: n as f64 / d as f64 - value,
            }
        })
        .collect();
    Ok(ResidualReport {
        method: method.name.to_string(),
        m,
        weights: Weights::Main,
        entries,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Classification {
    pub order: usize,
    pub embedded_order: usize,
    pub naturally_adaptive: bool,
    /// Largest residual among the conditions of the verified order, over the sweep.
    pub max_residual: f64,
}

fn verified_order(reports: &[ResidualReport], tol: f64) -> usize {
    (1..=4)
        .take_while(|&q| reports.iter().all(|r| r.max_abs_at_order(None, q) < tol))
        .last()
        .unwrap_or(0)
}

pub fn classify(method: &MrGarkMethod, m_sweep: &[usize]) -> Result<Classification> {
    classify_tol(method, m_sweep, ORDER_TOL)
}

pub fn classify_tol(method: &MrGarkMethod, m_sweep: &[usize], tol: f64) -> Result<Classification> {
    if m_sweep.is_empty() {
        return Err(crate::Error::InvalidInput("empty M sweep".into()));
    }
    let mut main = Vec::new();
    let mut emb = Vec::new();
    for &m in m_sweep {
        let g = assemble(method, m)?;
        main.push(residuals_of(&g, method.name, Weights::Main));
        emb.push(residuals_of(&g, method.name, Weights::Embedded));
    }
    let order = verified_order(&main, tol);
    let embedded_order = verified_order(&emb, tol);
    let naturally_adaptive = order < 4
        && main
            .iter()
            .all(|r| r.max_abs_at_order(Some(Group::Coupling), order + 1) < tol);
    let max_residual = main.iter().map(|r| r.max_abs(None, order)).fold(0.0, f64::max);
    Ok(Classification {
        order,
        embedded_order,
        naturally_adaptive,
        max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tableaux::{method_names, registry_lookup};

    #[test]
    fn catalog_counts_match_tree_tables() {
        let cat = catalog();
        let count = |k| cat.iter().filter(|c| c.order() == k).count();
        assert_eq!((count(1), count(2), count(3), count(4)), (2, 2, 6, 18));
        let coupling = cat.iter().filter(|c| c.group() == Group::Coupling).count();
        assert_eq!(coupling, 12);
    }

    fn sweep(a: usize, b: usize) -> Vec<usize> {
        (a..=b).collect()
    }

    #[test]
    fn declared_orders_verify() {
        for name in method_names() {
            let m = registry_lookup(name).unwrap();
            let c = classify(&m, &sweep(1, 8)).unwrap();
            assert_eq!((c.order, c.embedded_order), (m.order_p, m.embedded_order), "{name}");
        }
    }

    #[test]
    fn natural_adaptivity_for_multirate_ratios() {
        let expect = [
            ("EX-EX 2(1)A", (2, 1, true)),
            ("EX-EX 2(1)S", (2, 1, true)),
            ("EX-EX 3(2)4s-A", (3, 2, true)),
            ("IM-EX 2(1)A", (2, 1, false)),
        ];
        for (name, want) in expect {
            let c = classify(&registry_lookup(name).unwrap(), &sweep(2, 8)).unwrap();
            assert_eq!((c.order, c.embedded_order, c.naturally_adaptive), want, "{name}");
        }
    }

    #[test]
    fn imex2_residuals_follow_closed_forms() {
        let m = registry_lookup("IM-EX 2(1)A").unwrap();
        let s2 = 2f64.sqrt();
        for mm in [1usize, 2, 4, 8] {
            let r = residuals(&m, mm, Weights::Main).unwrap();
            let mf = mm as f64;
            let get = |id| r.get(id).unwrap().residual;
            assert!(get("bs.cs^2").abs() < 1e-15);
            assert!((get("bs.Ass.cs") - 1.0 / 6.0).abs() < 1e-15);
            assert!((get("bf.cf^2") - (4.0 - 3.0 * s2) / (12.0 * mf * mf)).abs() < 1e-12);
            assert!((get("bf.Aff.cf") - (4.0 - 3.0 * s2) / (6.0 * mf * mf)).abs() < 1e-12);
            assert!((get("bs.Asf.cf") - (3.0 * s2 - 3.0 - mf) / (12.0 * mf)).abs() < 1e-12);
            // only the last micro-step block reaches the second slow stage
            let direct = 1.0 / 6.0 - (2.0 - s2) / (4.0 * mf);
            assert!((get("bf.Afs.cs") - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_residual_scales_like_inverse_square() {
        let m = registry_lookup("IM-EX 2(1)A").unwrap();
        let pts: Vec<(f64, f64)> = [2usize, 4, 8, 16]
            .iter()
            .map(|&k| {
                let r = residuals(&m, k, Weights::Main).unwrap();
                ((k as f64).ln(), r.get("bf.cf^2").unwrap().residual.abs().ln())
            })
            .collect();
        let n = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let (mx, my) = (sx / n, sy / n);
        let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        assert!((num / den + 2.0).abs() < 0.01);
    }

    #[test]
    fn slow_residuals_do_not_depend_on_ratio() {
        for name in method_names() {
            let m = registry_lookup(name).unwrap();
            let base = residuals(&m, 1, Weights::Main).unwrap();
            for k in 2..=5 {
                let r = residuals(&m, k, Weights::Main).unwrap();
                for (a, b) in base.entries.iter().zip(&r.entries) {
                    if a.group == Group::Slow {
                        assert!((a.residual - b.residual).abs() < 1e-14, "{name} {}", a.id);
                    }
                }
            }
        }
    }

    #[test]
    fn block_form_matches_assembled_form() {
        for name in method_names() {
            let m = registry_lookup(name).unwrap();
            for k in 1..=6 {
                let full = residuals(&m, k, Weights::Main).unwrap();
                let blk = block_form_residuals(&m, k).unwrap();
                assert_eq!(blk.entries.len(), 12);
                for e in &blk.entries {
                    let f = full.get(&e.id).unwrap();
                    assert!((e.residual - f.residual).abs() < 1e-10, "{name} M={k} {}", e.id);
                }
            }
        }
    }

    #[test]
    fn single_micro_step_block_form_is_plain_gark() {
        let m = registry_lookup("EX-IM 3(2)A").unwrap();
        let blk = block_form_residuals(&m, 1).unwrap();
        let fs = m.fs_coupling.eval(1, 1).unwrap();
        let direct = m.fast.b.dot(&(&fs * &m.slow.c));
        let e = blk.get("bf.Afs.cs").unwrap();
        assert!((e.value - direct).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn block_and_assembled_agree(idx in 0usize..12, k in 1usize..16) {
            let m = registry_lookup(method_names()[idx]).unwrap();
            let full = residuals(&m, k, Weights::Main).unwrap();
            let blk = block_form_residuals(&m, k).unwrap();
            for e in &blk.entries {
                let f = full.get(&e.id).unwrap();
                let scale = 1.0 + f.value.abs();
                proptest::prop_assert!((e.residual - f.residual).abs() < 1e-10 * scale);
            }
        }
    }
}
