//! Assembled multirate tableau and its structural checks.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tableaux::{ButcherTableau, MrGarkMethod, MAX_RATIO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Partition {
    Fast,
    Slow,
}

/// Full `(M s_f + s_s)`-stage tableau. Fast stage `i` of micro-step `lambda`
/// sits at row `(lambda-1) s_f + i`; slow stage `j` at row `M s_f + j` (0-based `i`, `j`).
#[derive(Debug, Clone)]
pub struct GarkMatrix {
    pub m: usize,
    pub s_f: usize,
    pub s_s: usize,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    /// Assembled fast weights `(1/M) b^f` repeated, and their embedded counterpart.
    pub b_fast: DVector<f64>,
    pub b_hat_fast: DVector<f64>,
    pub b_slow: DVector<f64>,
    pub b_hat_slow: DVector<f64>,
    pub fast_implicit: bool,
    pub slow_implicit: bool,
}

impl GarkMatrix {
    pub fn size(&self) -> usize {
        self.m * self.s_f + self.s_s
    }

    pub fn n_fast(&self) -> usize {
        self.m * self.s_f
    }

    pub fn fast_row(&self, lambda: usize, i: usize) -> usize {
        (lambda - 1) * self.s_f + i
    }

    pub fn slow_row(&self, j: usize) -> usize {
        self.m * self.s_f + j
    }

    pub fn partition_of(&self, row: usize) -> Partition {
        if row < self.n_fast() {
            Partition::Fast
        } else {
            Partition::Slow
        }
    }

    /// Block `A^{sigma,nu}` of the assembled matrix.
    pub fn block(&self, rows: Partition, cols: Partition) -> DMatrix<f64> {
        let nf = self.n_fast();
        let range = |p| match p {
            Partition::Fast => (0, nf),
            Partition::Slow => (nf, self.s_s),
        };
        let (r0, nr) = range(rows);
        let (c0, nc) = range(cols);
        self.a.view((r0, c0), (nr, nc)).into_owned()
    }

    pub fn c_fast(&self) -> DVector<f64> {
        self.c.rows(0, self.n_fast()).into_owned()
    }

    pub fn c_slow(&self) -> DVector<f64> {
        self.c.rows(self.n_fast(), self.s_s).into_owned()
    }
}

pub fn assemble(method: &MrGarkMethod, m: usize) -> Result<GarkMatrix> {
    if m == 0 || m > MAX_RATIO {
        return Err(Error::InvalidRatio(m));
    }
    let fs = method.fs_coupling.eval_all(m)?;
    let sf = method.sf_coupling.eval_all(m)?;
    Ok(assemble_from_blocks(&method.fast, &method.slow, &fs, &sf))
}

/// Assemble from pre-evaluated coupling blocks (`fs[l-1]`, `sf[l-1]`).
pub fn assemble_from_blocks(
    fast: &ButcherTableau,
    slow: &ButcherTableau,
    fs: &[DMatrix<f64>],
    sf: &[DMatrix<f64>],
) -> GarkMatrix {
    let m = fs.len();
    let (s_f, s_s) = (fast.stages(), slow.stages());
    let n = m * s_f + s_s;
    let inv_m = 1.0 / m as f64;
    let nf = m * s_f;
    let mut a = DMatrix::zeros(n, n);
    let mut c = DVector::zeros(n);
    for lam in 0..m {
        let r0 = lam * s_f;
        for i in 0..s_f {
            for k in 0..lam {
                for j in 0..s_f {
                    a[(r0 + i, k * s_f + j)] = inv_m * fast.b[j];
                }
            }
            for j in 0..s_f {
                a[(r0 + i, r0 + j)] = inv_m * fast.a[(i, j)];
            }
            for j in 0..s_s {
                a[(r0 + i, nf + j)] = fs[lam][(i, j)];
            }
            c[r0 + i] = (fast.c[i] + lam as f64) * inv_m;
        }
        for j in 0..s_s {
            for i in 0..s_f {
                a[(nf + j, r0 + i)] = inv_m * sf[lam][(j, i)];
            }
        }
    }
    for i in 0..s_s {
        for j in 0..s_s {
            a[(nf + i, nf + j)] = slow.a[(i, j)];
        }
        c[nf + i] = slow.c[i];
    }
    let rep = |v: &DVector<f64>| DVector::from_fn(nf, |k, _| inv_m * v[k % s_f]);
    let b_fast = rep(&fast.b);
    let b_hat_fast = rep(&fast.b_hat);
    let mut b = DVector::zeros(n);
    b.rows_mut(0, nf).copy_from(&b_fast);
    b.rows_mut(nf, s_s).copy_from(&slow.b);
    GarkMatrix {
        m,
        s_f,
        s_s,
        a,
        b,
        c,
        b_fast,
        b_hat_fast,
        b_slow: slow.b.clone(),
        b_hat_slow: slow.b_hat.clone(),
        fast_implicit: fast.is_implicit(),
        slow_implicit: slow.is_implicit(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub slow_fast_residual: f64,
    pub fast_slow_residual: f64,
    pub pass: bool,
}

pub fn check_internal_consistency(g: &GarkMatrix) -> ConsistencyReport {
    check_internal_consistency_tol(g, 1e-10)
}

pub fn check_internal_consistency_tol(g: &GarkMatrix, tol: f64) -> ConsistencyReport {
    use Partition::*;
    let sf = (g.block(Slow, Fast) * DVector::from_element(g.n_fast(), 1.0) - g.c_slow()).amax();
    let fs = (g.block(Fast, Slow) * DVector::from_element(g.s_s, 1.0) - g.c_fast()).amax();
    ConsistencyReport {
        slow_fast_residual: sf,
        fast_slow_residual: fs,
        pass: sf < tol && fs < tol,
    }
}

pub fn check_telescopic(method: &MrGarkMethod) -> bool {
    method.fast.a == method.slow.a && method.fast.b == method.slow.b
}

/// Complementary sparsity of the two coupling blocks (exact zero pattern).
pub fn check_decoupled(g: &GarkMatrix) -> bool {
    let nf = g.n_fast();
    for i in 0..nf {
        for j in 0..g.s_s {
            if g.a[(nf + j, i)] != 0.0 && g.a[(i, nf + j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

/// Last stage row of the implicit partition equals the assembled weights.
pub fn check_stiff_accuracy(method: &MrGarkMethod, m: usize, partition: Partition) -> Result<bool> {
    let g = assemble(method, m)?;
    let row = match partition {
        Partition::Fast if g.fast_implicit => g.n_fast() - 1,
        Partition::Slow if g.slow_implicit => g.size() - 1,
        Partition::Fast => return Err(Error::NotImplicitPartition("fast")),
        Partition::Slow => return Err(Error::NotImplicitPartition("slow")),
    };
    Ok((g.a.row(row).transpose() - &g.b).amax() < 1e-13)
}

/// Last fast stage of each micro-step coincides with the first stage of the next.
pub fn check_fsal(g: &GarkMatrix) -> bool {
    if g.m < 2 || g.fast_implicit {
        return g.m < 2;
    }
    (1..g.m).all(|lam| {
        let last = g.fast_row(lam, g.s_f - 1);
        let next = g.fast_row(lam + 1, 0);
        (g.a.row(last) - g.a.row(next)).amax() < 1e-13
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StageSchedule {
    /// Computation sequence of 0-based global stage indices.
    pub order: Vec<usize>,
    /// For each slow stage the last fast stage `(L_j, I_j)` computed before it;
    /// `I_j = 0` means no fast stage of micro-step `L_j` precedes it.
    pub slow_positions: Vec<(usize, usize)>,
    pub implicit_stages: Vec<usize>,
}

impl StageSchedule {
    /// The 1-based index vector `ic`.
    pub fn ic(&self) -> Vec<usize> {
        self.order.iter().map(|k| k + 1).collect()
    }
}

/// Topological stage ordering. Among ready stages the earliest abscissa goes
/// first; at equal abscissa slow stages precede fast ones.
pub fn derive_schedule(g: &GarkMatrix) -> Result<StageSchedule> {
    let n = g.size();
    let nf = g.n_fast();
    let mut deps: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut implicit = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if g.a[(i, j)] == 0.0 {
                continue;
            }
            if i == j {
                let ok = match g.partition_of(i) {
                    Partition::Fast => g.fast_implicit,
                    Partition::Slow => g.slow_implicit,
                };
                if !ok {
                    return Err(Error::CoupledMethod);
                }
                implicit.push(i);
            } else {
                deps[i].push(j);
            }
        }
    }
    // keep base order inside and across micro-steps
    for k in 1..nf {
        deps[k].push(k - 1);
    }
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let next = (0..n)
            .filter(|&k| !done[k] && deps[k].iter().all(|&d| done[d]))
            .min_by(|&x, &y| g.c[x].total_cmp(&g.c[y]).then((x < nf).cmp(&(y < nf))).then(x.cmp(&y)))
            .ok_or(Error::CoupledMethod)?;
        done[next] = true;
        order.push(next);
    }
    let mut slow_positions = vec![(1, 0); g.s_s];
    let mut last_fast: Option<usize> = None;
    for &k in &order {
        if k < nf {
            last_fast = Some(k);
        } else {
            slow_positions[k - nf] = match last_fast {
                Some(f) => (f / g.s_f + 1, f % g.s_f + 1),
                None => (1, 0),
            };
        }
    }
    Ok(StageSchedule {
        order,
        slow_positions,
        implicit_stages: implicit,
    })
}

/// Same ordering as [`derive_schedule`], computed from the base tableaus and
/// coupling blocks without forming the assembled matrix.
pub fn schedule_from_blocks(
    fast: &ButcherTableau,
    slow: &ButcherTableau,
    fs: &[DMatrix<f64>],
    sf: &[DMatrix<f64>],
) -> Result<StageSchedule> {
    let m = fs.len();
    let (s_f, s_s) = (fast.stages(), slow.stages());
    let nf = m * s_f;
    for i in 0..s_f {
        for j in i + 1..s_f {
            if fast.a[(i, j)] != 0.0 {
                return Err(Error::CoupledMethod);
            }
        }
    }
    // last fast stage each slow stage reads from
    let needs_fast: Vec<Option<usize>> = (0..s_s)
        .map(|j| (0..nf).rev().find(|&k| sf[k / s_f][(j, k % s_f)] != 0.0))
        .collect();
    let fast_time = |k: usize| (fast.c[k % s_f] + (k / s_f) as f64) / m as f64;
    let mut slow_done = vec![false; s_s];
    let mut next_fast = 0;
    let mut order = Vec::with_capacity(nf + s_s);
    let mut slow_positions = vec![(1, 0); s_s];
    while order.len() < nf + s_s {
        let fast_ready = next_fast < nf && {
            let (lam, i) = (next_fast / s_f, next_fast % s_f);
            (0..s_s).all(|j| fs[lam][(i, j)] == 0.0 || slow_done[j])
        };
        let slow_ready = (0..s_s).filter(|&j| {
            !slow_done[j]
                && needs_fast[j].is_none_or(|k| k < next_fast)
                && (0..s_s).all(|k| k == j || slow.a[(j, k)] == 0.0 || slow_done[k])
        });
        let best_slow = slow_ready.min_by(|&x, &y| slow.c[x].total_cmp(&slow.c[y]).then(x.cmp(&y)));
        let pick_slow = match best_slow {
            Some(j) if !fast_ready || slow.c[j] <= fast_time(next_fast) => Some(j),
            _ if fast_ready => None,
            _ => return Err(Error::CoupledMethod),
        };
        match pick_slow {
            Some(j) => {
                slow_done[j] = true;
                slow_positions[j] = match next_fast {
                    0 => (1, 0),
                    k => ((k - 1) / s_f + 1, (k - 1) % s_f + 1),
                };
                order.push(nf + j);
            }
            None => {
                order.push(next_fast);
                next_fast += 1;
            }
        }
    }
    let mut implicit = Vec::new();
    if fast.is_implicit() {
        implicit.extend((0..nf).filter(|&k| fast.a[(k % s_f, k % s_f)] != 0.0));
    }
    if slow.is_implicit() {
        implicit.extend((0..s_s).filter(|&j| slow.a[(j, j)] != 0.0).map(|j| nf + j));
    }
    Ok(StageSchedule {
        order,
        slow_positions,
        implicit_stages: implicit,
    })
}

/// `A(ic, ic)`.
pub fn permuted(g: &GarkMatrix, s: &StageSchedule) -> DMatrix<f64> {
    let n = g.size();
    DMatrix::from_fn(n, n, |i, j| g.a[(s.order[i], s.order[j])])
}

pub fn is_lower_triangular(a: &DMatrix<f64>, strict: bool) -> bool {
    let n = a.nrows();
    (0..n).all(|i| {
        let start = if strict { i } else { i + 1 };
        (start..n).all(|j| a[(i, j)] == 0.0)
    })
}
