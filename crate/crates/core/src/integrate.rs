//! One MrGARK macro-step: slow stages interleaved with `M` streamed micro-steps.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gark::{assemble_from_blocks, check_fsal, schedule_from_blocks, StageSchedule};
use crate::tableaux::{Flag, MrGarkMethod, MAX_RATIO};

pub type State = DVector<f64>;

/// `y' = f_slow(t, y) + f_fast(t, y)`.
pub trait PartitionedOde: Sync {
    fn dim(&self) -> usize;
    fn f_slow(&self, t: f64, y: &State) -> State;
    fn f_fast(&self, t: f64, y: &State) -> State;
    fn jac_slow(&self, _t: f64, _y: &State) -> Option<DMatrix<f64>> {
        None
    }
    fn jac_fast(&self, _t: f64, _y: &State) -> Option<DMatrix<f64>> {
        None
    }
    fn exact_solution(&self, _t: f64) -> Option<State> {
        None
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            tol: 1e-12,
            max_iter: 50,
        }
    }
}

/// Newton iteration on `G(y) = 0`. Returns the root and the number of updates.
pub fn newton_solve<G, J>(residual: G, jac: J, guess: &State, cfg: NewtonConfig) -> Result<(State, usize)>
where
    G: Fn(&State) -> State,
    J: Fn(&State) -> DMatrix<f64>,
{
    let mut y = guess.clone();
    for iter in 0..=cfg.max_iter {
        let g = residual(&y);
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NewtonDivergence { iterations: iter });
        }
        let scale = 1.0 + y.amax();
        if g.amax() <= cfg.tol * scale {
            return Ok((y, iter));
        }
        if iter == cfg.max_iter {
            break;
        }
        let delta = jac(&y)
            .lu()
            .solve(&(-g))
            .ok_or(Error::NewtonDivergence { iterations: iter })?;
        y += &delta;
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NewtonDivergence { iterations: iter + 1 });
        }
        if delta.amax() <= cfg.tol * (1.0 + y.amax()) {
            return Ok((y, iter + 1));
        }
    }
    Err(Error::NewtonDivergence {
        iterations: cfg.max_iter,
    })
}

/// Forward-difference Jacobian with increment `sqrt(eps)·(1 + |y_i|)`.
pub fn fd_jacobian<F: Fn(&State) -> State>(f: F, y: &State, fy: &State) -> DMatrix<f64> {
    let n = y.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut yp = y.clone();
    for i in 0..n {
        let h = f64::EPSILON.sqrt() * (1.0 + y[i].abs());
        yp[i] = y[i] + h;
        let col = (f(&yp) - fy) / h;
        jac.set_column(i, &col);
        yp[i] = y[i];
    }
    jac
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StepStats {
    pub fast_evals: usize,
    pub slow_evals: usize,
    pub fsal_reused: usize,
    /// Newton updates per implicit stage, in computation order.
    pub newton_iterations: Vec<usize>,
    /// Right-hand-side calls made inside Newton solves (residuals and difference quotients).
    pub newton_rhs_evals: usize,
    pub t_slow: f64,
    pub t_fast: f64,
}

impl StepStats {
    pub fn absorb(&mut self, other: &StepStats) {
        self.fast_evals += other.fast_evals;
        self.slow_evals += other.slow_evals;
        self.fsal_reused += other.fsal_reused;
        self.newton_iterations.extend_from_slice(&other.newton_iterations);
        self.newton_rhs_evals += other.newton_rhs_evals;
        self.t_slow += other.t_slow;
        self.t_fast += other.t_fast;
    }
}

#[derive(Debug, Clone)]
pub struct StageValues {
    /// `fast[λ-1][i]`
    pub fast: Vec<Vec<State>>,
    pub slow: Vec<State>,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub y_next: State,
    /// Weights `(b̂^f, b̂^s)`.
    pub y_hat: State,
    /// Weights `(b^f, b̂^s)`.
    pub y_hat_slow: State,
    /// Weights `(b̂^f, b^s)`.
    pub y_hat_fast: State,
    pub stages: Option<StageValues>,
    pub stats: StepStats,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    pub fsal: bool,
    pub keep_stages: bool,
    pub newton: NewtonConfig,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            fsal: true,
            keep_stages: false,
            newton: NewtonConfig::default(),
        }
    }
}

/// Coupling blocks and stage order for one ratio.
#[derive(Debug)]
pub struct Plan {
    pub m: usize,
    pub fs: Vec<DMatrix<f64>>,
    pub sf: Vec<DMatrix<f64>>,
    pub schedule: StageSchedule,
    pub fsal: bool,
}

/// Streams macro-steps of one method, caching the per-ratio coupling blocks.
pub struct Integrator {
    pub method: MrGarkMethod,
    pub options: StepOptions,
    plans: HashMap<usize, Arc<Plan>>,
}

impl Integrator {
    pub fn new(method: MrGarkMethod) -> Self {
        Integrator {
            method,
            options: StepOptions::default(),
            plans: HashMap::new(),
        }
    }

    pub fn with_options(mut self, options: StepOptions) -> Self {
        self.options = options;
        self
    }

    pub fn plan(&mut self, m: usize) -> Result<Arc<Plan>> {
        if m == 0 || m > MAX_RATIO {
            return Err(Error::InvalidRatio(m));
        }
        if let Some(p) = self.plans.get(&m) {
            return Ok(p.clone());
        }
        let meth = &self.method;
        let fs = meth.fs_coupling.eval_all(m)?;
        let sf = meth.sf_coupling.eval_all(m)?;
        let schedule = schedule_from_blocks(&meth.fast, &meth.slow, &fs, &sf)?;
        let fsal = meth.has(Flag::Fsal)
            && !meth.fast.is_implicit()
            && m <= 64
            && check_fsal(&assemble_from_blocks(&meth.fast, &meth.slow, &fs, &sf));
        let plan = Arc::new(Plan {
            m,
            fs,
            sf,
            schedule,
            fsal,
        });
        self.plans.insert(m, plan.clone());
        Ok(plan)
    }

    pub fn step(&mut self, ode: &dyn PartitionedOde, t: f64, y: &State, h_macro: f64, m: usize) -> Result<StepResult> {
        let plan = self.plan(m)?;
        step_with_plan(&self.method, &plan, ode, t, y, h_macro, self.options)
    }
}

/// Convenience wrapper building a fresh plan.
pub fn step(
    method: &MrGarkMethod,
    ode: &dyn PartitionedOde,
    t: f64,
    y: &State,
    h_macro: f64,
    m: usize,
) -> Result<StepResult> {
    Integrator::new(method.clone()).step(ode, t, y, h_macro, m)
}

fn timed<T>(acc: &mut f64, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *acc += start.elapsed().as_secs_f64();
    out
}

fn finite(v: &State) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState)
    }
}

enum Part {
    Fast,
    Slow,
}

/// Solve `Y = known + alpha·f(t, Y)` for one SDIRK stage.
fn implicit_stage(
    ode: &dyn PartitionedOde,
    part: Part,
    t: f64,
    known: &State,
    alpha: f64,
    cfg: NewtonConfig,
    stats: &mut StepStats,
) -> Result<State> {
    let evals = std::cell::Cell::new(0usize);
    let f = |y: &State| {
        evals.set(evals.get() + 1);
        match part {
            Part::Fast => ode.f_fast(t, y),
            Part::Slow => ode.f_slow(t, y),
        }
    };
    let n = known.len();
    let residual = |y: &State| y - known - f(y) * alpha;
    let jac = |y: &State| {
        let analytic = match part {
            Part::Fast => ode.jac_fast(t, y),
            Part::Slow => ode.jac_slow(t, y),
        };
        let jf = analytic.unwrap_or_else(|| {
            let fy = f(y);
            fd_jacobian(f, y, &fy)
        });
        DMatrix::identity(n, n) - jf * alpha
    };
    let start = Instant::now();
    let out = newton_solve(residual, jac, known, cfg);
    let elapsed = start.elapsed().as_secs_f64();
    match part {
        Part::Fast => stats.t_fast += elapsed,
        Part::Slow => stats.t_slow += elapsed,
    }
    stats.newton_rhs_evals += evals.get();
    let (y, iters) = out?;
    stats.newton_iterations.push(iters);
    Ok(y)
}

pub fn step_with_plan(
    method: &MrGarkMethod,
    plan: &Plan,
    ode: &dyn PartitionedOde,
    t: f64,
    y: &State,
    h_macro: f64,
    opts: StepOptions,
) -> Result<StepResult> {
    if !(h_macro > 0.0 && h_macro.is_finite()) {
        return Err(Error::InvalidInput(format!("macro-step H = {h_macro}")));
    }
    finite(y)?;
    let (fast, slow) = (&method.fast, &method.slow);
    let (s_f, s_s, m) = (fast.stages(), slow.stages(), plan.m);
    let d = y.len();
    let h = h_macro / m as f64;
    let nf = m * s_f;
    let mut stats = StepStats::default();

    let mut ks: Vec<Option<State>> = vec![None; s_s];
    let mut slow_acc: Vec<State> = vec![DVector::zeros(d); s_s];
    let mut kf: Vec<State> = vec![DVector::zeros(d); s_f];
    let mut fast_sum = DVector::zeros(d);
    let mut fast_hat_sum = DVector::zeros(d);
    let mut ytilde = y.clone();
    let mut lam_cur = 0usize;
    let mut kept_fast: Vec<Vec<State>> = Vec::new();
    let mut kept_slow: Vec<State> = vec![DVector::zeros(0); s_s];

    let close_micro_step = |kf: &[State], fast_sum: &mut State, fast_hat_sum: &mut State| {
        for i in 0..s_f {
            fast_sum.axpy(h * fast.b[i], &kf[i], 1.0);
            fast_hat_sum.axpy(h * fast.b_hat[i], &kf[i], 1.0);
        }
    };

    for &k in &plan.schedule.order {
        if k < nf {
            let (lam, i) = (k / s_f + 1, k % s_f);
            if lam != lam_cur {
                if lam_cur > 0 {
                    close_micro_step(&kf, &mut fast_sum, &mut fast_hat_sum);
                    ytilde = y + &fast_sum;
                }
                lam_cur = lam;
                if opts.keep_stages {
                    kept_fast.push(Vec::with_capacity(s_f));
                }
            }
            let a_fs = &plan.fs[lam - 1];
            let mut known = ytilde.clone();
            for (j, kj) in ks.iter().enumerate() {
                let a = a_fs[(i, j)];
                if a != 0.0 {
                    let kj = kj.as_ref().ok_or(Error::CoupledMethod)?;
                    known.axpy(h_macro * a, kj, 1.0);
                }
            }
            for j in 0..i {
                let a = fast.a[(i, j)];
                if a != 0.0 {
                    known.axpy(h * a, &kf[j], 1.0);
                }
            }
            let ts = t + h * (fast.c[i] + (lam - 1) as f64);
            let gamma = fast.a[(i, i)];
            let stage = if gamma != 0.0 {
                implicit_stage(ode, Part::Fast, ts, &known, h * gamma, opts.newton, &mut stats)?
            } else {
                known
            };
            finite(&stage)?;
            if plan.fsal && opts.fsal && i == 0 && lam > 1 {
                kf[0] = kf[s_f - 1].clone();
                stats.fsal_reused += 1;
            } else {
                kf[i] = timed(&mut stats.t_fast, || ode.f_fast(ts, &stage));
                stats.fast_evals += 1;
            }
            for j in 0..s_s {
                let a = plan.sf[lam - 1][(j, i)];
                if a != 0.0 {
                    if ks[j].is_some() {
                        return Err(Error::CoupledMethod);
                    }
                    slow_acc[j].axpy(h * a, &kf[i], 1.0);
                }
            }
            if opts.keep_stages {
                kept_fast[lam - 1].push(stage);
            }
        } else {
            let j = k - nf;
            let mut known = y + &slow_acc[j];
            for (l, kl) in ks.iter().enumerate() {
                let a = slow.a[(j, l)];
                if l != j && a != 0.0 {
                    let kl = kl.as_ref().ok_or(Error::CoupledMethod)?;
                    known.axpy(h_macro * a, kl, 1.0);
                }
            }
            let ts = t + h_macro * slow.c[j];
            let gamma = slow.a[(j, j)];
            let stage = if gamma != 0.0 {
                implicit_stage(ode, Part::Slow, ts, &known, h_macro * gamma, opts.newton, &mut stats)?
            } else {
                known
            };
            finite(&stage)?;
            ks[j] = Some(timed(&mut stats.t_slow, || ode.f_slow(ts, &stage)));
            stats.slow_evals += 1;
            if opts.keep_stages {
                kept_slow[j] = stage;
            }
        }
    }
    close_micro_step(&kf, &mut fast_sum, &mut fast_hat_sum);

    let mut slow_sum = DVector::zeros(d);
    let mut slow_hat_sum = DVector::zeros(d);
    for (j, kj) in ks.iter().enumerate() {
        let kj = kj.as_ref().ok_or(Error::CoupledMethod)?;
        slow_sum.axpy(h_macro * slow.b[j], kj, 1.0);
        slow_hat_sum.axpy(h_macro * slow.b_hat[j], kj, 1.0);
    }
    let y_next = y + &fast_sum + &slow_sum;
    finite(&y_next)?;
    Ok(StepResult {
        y_hat: y + &fast_hat_sum + &slow_hat_sum,
        y_hat_slow: y + &fast_sum + &slow_hat_sum,
        y_hat_fast: y + &fast_hat_sum + &slow_sum,
        y_next,
        stages: opts.keep_stages.then_some(StageValues {
            fast: kept_fast,
            slow: kept_slow,
        }),
        stats,
    })
}

#[derive(Debug, Clone)]
pub struct Tolerances {
    pub abs: DVector<f64>,
    pub rel: DVector<f64>,
}

impl Tolerances {
    pub fn scalar(d: usize, abs: f64, rel: f64) -> Self {
        Tolerances {
            abs: DVector::from_element(d, abs),
            rel: DVector::from_element(d, rel),
        }
    }
}

/// `sqrt(mean(((x_i − y_i)/(abs_i + rel_i·max(|x_i|, |y_i|)))²))`
pub fn error_norm(x: &State, y: &State, tol: &Tolerances) -> f64 {
    let d = x.len();
    if d == 0 {
        return 0.0;
    }
    let s: f64 = (0..d)
        .map(|i| {
            let sc = tol.abs[i] + tol.rel[i] * x[i].abs().max(y[i].abs());
            ((x[i] - y[i]) / sc).powi(2)
        })
        .sum();
    (s / d as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorEstimates {
    pub total: f64,
    pub slow: f64,
    pub fast: f64,
}

pub fn error_estimates(r: &StepResult, tol: &Tolerances) -> ErrorEstimates {
    ErrorEstimates {
        total: error_norm(&r.y_next, &r.y_hat, tol),
        slow: error_norm(&r.y_next, &r.y_hat_slow, tol),
        fast: error_norm(&r.y_next, &r.y_hat_fast, tol),
    }
}

/// Coupling part of the local error, `ŷ^s + ŷ^f − ŷ − y`.
pub fn coupling_estimate(r: &StepResult) -> State {
    &r.y_hat_slow + &r.y_hat_fast - &r.y_hat - &r.y_next
}

#[derive(Debug, Clone)]
pub struct FixedRun {
    pub y: State,
    pub steps: usize,
    pub stats: StepStats,
}

/// `n` equal macro-steps from `t0` to `t_end`.
pub fn integrate_fixed(
    integ: &mut Integrator,
    ode: &dyn PartitionedOde,
    y0: &State,
    t0: f64,
    t_end: f64,
    n: usize,
    m: usize,
) -> Result<FixedRun> {
    if n == 0 || !(t_end > t0) {
        return Err(Error::InvalidInput("need t_end > t0 and at least one step".into()));
    }
    let plan = integ.plan(m)?;
    let h = (t_end - t0) / n as f64;
    let mut y = y0.clone();
    let mut stats = StepStats::default();
    for k in 0..n {
        let r = step_with_plan(&integ.method, &plan, ode, t0 + k as f64 * h, &y, h, integ.options)?;
        stats.absorb(&r.stats);
        y = r.y_next;
    }
    Ok(FixedRun { y, steps: n, stats })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    #[serde(rename = "H")]
    pub h: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub error: Option<f64>,
    /// `log2` ratio against the previous successful row of the same `M`.
    pub observed_order: Option<f64>,
    pub failure: Option<String>,
}

/// Fixed-step errors at `t_end` for each step count and ratio.
///
/// The reference is the exact solution when the problem has one, otherwise the
/// same method and ratio run with `ref_factor` times the finest step count.
pub fn convergence_study(
    method: &MrGarkMethod,
    ode: &dyn PartitionedOde,
    y0: &State,
    t_end: f64,
    steps: &[usize],
    ratios: &[usize],
    ref_factor: usize,
) -> Vec<ConvergenceRow> {
    let mut rows = Vec::new();
    let finest = steps.iter().copied().max().unwrap_or(1);
    for &m in ratios {
        let mut integ = Integrator::new(method.clone());
        let reference = match ode.exact_solution(t_end) {
            Some(y) => Ok(y),
            None => integrate_fixed(&mut integ, ode, y0, 0.0, t_end, finest * ref_factor.max(1), m).map(|r| r.y),
        };
        let mut prev: Option<(f64, f64)> = None;
        for &n in steps {
            let h = t_end / n as f64;
            let run = reference.clone().and_then(|yr| {
                integrate_fixed(&mut integ, ode, y0, 0.0, t_end, n, m)
                    .map(|r| crate::problems::relative_error(&r.y, &yr))
            });
            let row = match run {
                Ok(e) if e.is_finite() => {
                    let order = prev
                        .filter(|(_, pe)| *pe > 0.0 && e > 0.0)
                        .map(|(ph, pe)| (pe / e).log2() / (ph / h).log2());
                    prev = Some((h, e));
                    ConvergenceRow {
                        h,
                        m,
                        error: Some(e),
                        observed_order: order,
                        failure: None,
                    }
                }
                Ok(_) => ConvergenceRow {
                    h,
                    m,
                    error: None,
                    observed_order: None,
                    failure: Some(Error::NonFiniteState.to_string()),
                },
                Err(e) => ConvergenceRow {
                    h,
                    m,
                    error: None,
                    observed_order: None,
                    failure: Some(e.to_string()),
                },
            };
            rows.push(row);
        }
    }
    rows
}

/// Least-squares slope of `log error` against `log H` over the successful rows.
pub fn fitted_order(rows: &[ConvergenceRow]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.error.filter(|e| *e > 0.0).map(|e| (r.h.ln(), e.ln())))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}
