//! Joint macro-step and step-ratio control.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{error_estimates, ErrorEstimates, Integrator, PartitionedOde, State, StepStats, Tolerances};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Equalize slow and fast error estimates.
    Balancing,
    /// Minimize estimated cost per unit time over a small window of ratios.
    Efficiency,
    /// Standard embedded control of `H` with `M` held fixed.
    Classic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExponentMode {
    /// `H_new = fac·H·ε^{−1/p}`
    Order,
    /// `H_new = fac·H·ε^{−1/(p+1)}`
    Classic,
}

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub strategy: Strategy,
    pub fac: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub h_max: f64,
    pub m_min: usize,
    pub m_max: usize,
    pub tol: Tolerances,
    pub exponent_mode: ExponentMode,
    /// Synthetic `t_slow / t_fast`; replaces measured timings when set.
    pub cost_ratio: Option<f64>,
    pub max_steps: usize,
}

impl ControllerConfig {
    pub fn new(strategy: Strategy, tol: Tolerances) -> Self {
        let (m_min, m_max) = match strategy {
            Strategy::Balancing => (2, 10),
            _ => (1, 100),
        };
        ControllerConfig {
            strategy,
            fac: 0.9,
            scale_min: 0.5,
            scale_max: 2.0,
            h_max: f64::INFINITY,
            m_min,
            m_max,
            tol,
            exponent_mode: ExponentMode::Order,
            cost_ratio: None,
            max_steps: 1_000_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fac > 0.0 && self.fac <= 1.0) {
            return Err(Error::InvalidInput(format!("fac = {} outside (0, 1]", self.fac)));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= 1.0 && self.scale_max >= 1.0) {
            return Err(Error::InvalidInput("step scale clamp must bracket 1".into()));
        }
        if self.m_min == 0 || self.m_min > self.m_max {
            return Err(Error::InvalidInput(format!(
                "M bounds [{}, {}]",
                self.m_min, self.m_max
            )));
        }
        Ok(())
    }

    fn clamp_h(&self, h: f64, proposed: f64) -> f64 {
        proposed.clamp(self.scale_min * h, self.scale_max * h).min(self.h_max)
    }

    fn clamp_m(&self, m: f64) -> usize {
        (m.round().max(1.0) as usize).clamp(self.m_min, self.m_max)
    }

    /// Ratios considered by the efficiency strategy around `m`.
    pub fn window(&self, m: usize) -> Vec<usize> {
        let lo = m.saturating_sub(1).max(1).max(self.m_min);
        let hi = (m + 2).min(self.m_max);
        if lo > hi {
            return vec![self.clamp_m(m as f64)];
        }
        (lo..=hi).collect()
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceRow {
    pub t: f64,
    #[serde(rename = "H")]
    pub h: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub eps_total: f64,
    pub eps_slow: f64,
    pub eps_fast: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct AdaptivityState {
    pub h: f64,
    pub m: usize,
    pub eps: ErrorEstimates,
    /// Cost of the slow stages of one macro-step.
    pub t_slow: f64,
    /// Cost of one fast micro-step.
    pub t_fast: f64,
    pub accepted: usize,
    pub rejected: usize,
    pub trace: Vec<TraceRow>,
}

impl AdaptivityState {
    pub fn new(h: f64, m: usize) -> Self {
        AdaptivityState {
            h,
            m,
            eps: ErrorEstimates {
                total: 0.0,
                slow: 0.0,
                fast: 0.0,
            },
            t_slow: 1.0,
            t_fast: 1.0,
            accepted: 0,
            rejected: 0,
            trace: Vec::new(),
        }
    }

    /// `Σ M·H / Σ H` over accepted steps.
    pub fn mean_ratio(&self) -> f64 {
        let (num, den) = self
            .trace
            .iter()
            .filter(|r| r.accepted)
            .fold((0.0, 0.0), |(a, b), r| (a + r.m as f64 * r.h, b + r.h));
        if den > 0.0 {
            num / den
        } else {
            self.m as f64
        }
    }
}

fn usable(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

/// `H_new = fac·H·ε^{−1/p}`, `M_new = round(M·(ε_f/ε_s)^{1/q})`.
pub fn balancing_update(state: &AdaptivityState, p: usize, q: usize, cfg: &ControllerConfig) -> (f64, usize) {
    let h = state.h;
    let e = state.eps;
    let h_new = if usable(e.total) {
        let expo = match cfg.exponent_mode {
            ExponentMode::Order => 1.0 / p as f64,
            ExponentMode::Classic => 1.0 / (p + 1) as f64,
        };
        cfg.clamp_h(h, cfg.fac * h * e.total.powf(-expo))
    } else {
        cfg.clamp_h(h, cfg.scale_max * h)
    };
    let m_new = if usable(e.slow) && usable(e.fast) {
        cfg.clamp_m(state.m as f64 * (e.fast / e.slow).powf(1.0 / q as f64))
    } else {
        state.m.clamp(cfg.m_min, cfg.m_max)
    };
    (h_new, m_new)
}

/// Work per unit time for ratio `m_new`, with `H` factored out.
pub fn efficiency_objective(state: &AdaptivityState, q: usize, m_new: usize) -> f64 {
    let e = state.eps;
    let ratio = state.m as f64 / m_new as f64;
    (state.t_slow + m_new as f64 * state.t_fast) * (e.slow + e.fast * ratio.powi(q as i32)).powf(1.0 / (q + 1) as f64)
}

pub fn efficiency_update(state: &AdaptivityState, q: usize, cfg: &ControllerConfig) -> (f64, usize) {
    let h = state.h;
    let e = state.eps;
    if !(usable(e.slow) || usable(e.fast)) || !e.slow.is_finite() || !e.fast.is_finite() {
        return (cfg.clamp_h(h, cfg.scale_max * h), state.m.clamp(cfg.m_min, cfg.m_max));
    }
    let m_new = cfg
        .window(state.m)
        .into_iter()
        .map(|k| (k, efficiency_objective(state, q, k)))
        .fold(None, |best: Option<(usize, f64)>, (k, v)| match best {
            Some((_, bv)) if bv <= v => best,
            _ => Some((k, v)),
        })
        .map_or(state.m, |(k, _)| k);
    let ratio = state.m as f64 / m_new as f64;
    let predicted = e.slow + e.fast * ratio.powi(q as i32);
    let h_new = cfg.clamp_h(h, cfg.fac * h * predicted.powf(-1.0 / (q + 1) as f64));
    (h_new, m_new)
}

pub fn classic_update(state: &AdaptivityState, q: usize, cfg: &ControllerConfig) -> (f64, usize) {
    let h = state.h;
    let h_new = if usable(state.eps.total) {
        cfg.clamp_h(h, cfg.fac * h * state.eps.total.powf(-1.0 / (q + 1) as f64))
    } else {
        cfg.clamp_h(h, cfg.scale_max * h)
    };
    (h_new, state.m)
}

#[derive(Debug, Clone)]
pub struct DriveResult {
    pub y: State,
    pub t: f64,
    pub state: AdaptivityState,
    pub stats: StepStats,
}

/// Adaptive integration from `t0` to `t_end` starting with `(h0, m0)`.
#[allow(clippy::too_many_arguments)]
pub fn drive(
    integ: &mut Integrator,
    ode: &dyn PartitionedOde,
    y0: &State,
    t0: f64,
    t_end: f64,
    h0: f64,
    m0: usize,
    cfg: &ControllerConfig,
) -> Result<DriveResult> {
    cfg.validate()?;
    if !(t_end > t0) {
        return Err(Error::InvalidInput("t_end must exceed t0".into()));
    }
    let p = integ.method.order_p;
    let q = p.min(integ.method.embedded_order);
    let h_floor = 1e-14 * (t_end - t0);
    let mut state = AdaptivityState::new(h0.min(cfg.h_max), m0.clamp(cfg.m_min, cfg.m_max));
    let mut stats = StepStats::default();
    let mut t = t0;
    let mut y = y0.clone();
    let mut measured = false;
    while t < t_end {
        if state.accepted + state.rejected >= cfg.max_steps {
            return Err(Error::InvalidInput(format!(
                "step budget of {} exhausted at t = {t}",
                cfg.max_steps
            )));
        }
        if state.h < h_floor {
            return Err(Error::StepSizeUnderflow(state.h));
        }
        let remaining = t_end - t;
        let last = state.h >= remaining * (1.0 - 1e-12);
        let h = if last { remaining } else { state.h };
        let r = integ.step(ode, t, &y, h, state.m)?;
        stats.absorb(&r.stats);
        state.eps = error_estimates(&r, &cfg.tol);
        match cfg.cost_ratio {
            Some(ratio) => {
                state.t_slow = ratio;
                state.t_fast = 1.0;
            }
            None if r.stats.t_slow > 0.0 && r.stats.t_fast > 0.0 => {
                state.t_slow = r.stats.t_slow;
                state.t_fast = r.stats.t_fast / state.m as f64;
                measured = true;
            }
            None if !measured => {
                state.t_slow = 1.0;
                state.t_fast = 1.0;
            }
            None => {}
        }
        let accepted = state.eps.total <= 1.0;
        state.trace.push(TraceRow {
            t,
            h,
            m: state.m,
            eps_total: state.eps.total,
            eps_slow: state.eps.slow,
            eps_fast: state.eps.fast,
            accepted,
        });
        state.h = h;
        let (mut h_new, m_new) = match cfg.strategy {
            Strategy::Balancing => balancing_update(&state, p, q, cfg),
            Strategy::Efficiency => efficiency_update(&state, q, cfg),
            Strategy::Classic => classic_update(&state, q, cfg),
        };
        if accepted {
            state.accepted += 1;
            t = if last { t_end } else { t + h };
            y = r.y_next;
        } else {
            state.rejected += 1;
            h_new = h_new.min(h);
        }
        state.h = h_new;
        state.m = m_new;
    }
    Ok(DriveResult { y, t, state, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{CoupledPair, LinearTwoRate};
    use crate::tableaux::registry_lookup;

    fn st(h: f64, m: usize, total: f64, slow: f64, fast: f64) -> AdaptivityState {
        let mut s = AdaptivityState::new(h, m);
        s.eps = ErrorEstimates { total, slow, fast };
        s
    }

    fn cfg(strategy: Strategy) -> ControllerConfig {
        ControllerConfig::new(strategy, Tolerances::scalar(1, 1e-6, 1e-6))
    }

    #[test]
    fn balancing_formula() {
        let c = cfg(Strategy::Balancing);
        assert_eq!(balancing_update(&st(0.1, 4, 0.5, 0.3, 0.3), 2, 2, &c).1, 4);
        assert_eq!(balancing_update(&st(0.1, 4, 0.5, 0.4, 0.1), 2, 2, &c).1, 2);
        let (h, _) = balancing_update(&st(0.1, 4, 1.0, 0.5, 0.5), 2, 2, &c);
        assert!((h - 0.09).abs() < 1e-15);
        // zero estimate: maximal growth, M kept
        assert_eq!(balancing_update(&st(0.1, 4, 0.0, 0.0, 0.0), 2, 2, &c), (0.2, 4));
    }

    #[test]
    fn efficiency_keeps_constraint_active_step() {
        let mut c = cfg(Strategy::Efficiency);
        c.fac = 1.0;
        // equal costs would push M; make them favour the current ratio
        let mut s = st(0.1, 3, 1.0, 0.5, 0.5);
        s.t_slow = 1e9;
        s.t_fast = 1e9;
        let (h, m) = efficiency_update(&s, 2, &c);
        let pred = 0.5 + 0.5 * (3.0 / m as f64).powi(2);
        assert!((h - 0.1 * pred.powf(-1.0 / 3.0)).abs() < 1e-15);
        let s = st(0.1, 3, 1.0, 0.6, 0.4);
        let mut s2 = s.clone();
        s2.m = 3;
        let (h, m) = efficiency_update(&s2, 2, &c);
        if m == 3 {
            assert!((h - 0.1).abs() < 1e-15);
        }
        let _ = s;
    }

    #[test]
    fn free_fast_work_pushes_ratio_to_window_cap() {
        let c = cfg(Strategy::Efficiency);
        let mut s = st(0.1, 5, 0.8, 0.3, 0.5);
        s.t_slow = 1.0;
        s.t_fast = 1e-12;
        assert_eq!(efficiency_update(&s, 2, &c).1, 7);
    }

    #[test]
    fn efficiency_choice_is_exact_window_argmin() {
        let c = cfg(Strategy::Efficiency);
        let mut s = st(0.1, 4, 0.5, 0.25, 0.25);
        s.t_slow = 1.0;
        s.t_fast = 1.0;
        let (_, m) = efficiency_update(&s, 2, &c);
        assert_eq!(c.window(4), vec![3, 4, 5, 6]);
        let best = [3, 4, 5, 6]
            .into_iter()
            .min_by(|a, b| efficiency_objective(&s, 2, *a).total_cmp(&efficiency_objective(&s, 2, *b)))
            .unwrap();
        assert_eq!(m, best);
        let (_, mb) = balancing_update(
            &s,
            2,
            2,
            &ControllerConfig {
                m_min: 1,
                m_max: 100,
                ..c.clone()
            },
        );
        assert!((m as i64 - mb as i64).abs() <= 1);
    }

    #[test]
    fn window_respects_bounds() {
        let c = cfg(Strategy::Efficiency);
        assert_eq!(c.window(1), vec![1, 2, 3]);
        assert_eq!(c.window(100), vec![99, 100]);
    }

    #[test]
    fn drive_linear_problem_loose_tolerance() {
        let meth = registry_lookup("EX-EX 2(1)A").unwrap();
        let mut integ = Integrator::new(meth);
        let ode = LinearTwoRate::default();
        let mut c = ControllerConfig::new(Strategy::Classic, Tolerances::scalar(1, 1e-2, 1e-2));
        c.m_min = 1;
        let y0 = State::from_element(1, 1.0);
        let out = drive(&mut integ, &ode, &y0, 0.0, 1.0, 0.01, 2, &c).unwrap();
        assert_eq!(out.state.rejected, 0);
        assert_eq!(out.t, 1.0);
        assert!(out.state.trace.windows(2).all(|w| w[0].t < w[1].t));
    }

    #[test]
    fn tighter_tolerance_gives_smaller_error() {
        let meth = registry_lookup("EX-EX 3(2)4s-A").unwrap();
        let ode = LinearTwoRate::default();
        let y0 = State::from_element(1, 1.0);
        let err = |tol: f64| {
            let mut integ = Integrator::new(meth.clone());
            let c = ControllerConfig::new(Strategy::Balancing, Tolerances::scalar(1, tol, tol));
            let out = drive(&mut integ, &ode, &y0, 0.0, 1.0, 0.05, 2, &c).unwrap();
            assert!(out
                .state
                .trace
                .iter()
                .filter(|r| r.accepted)
                .all(|r| r.eps_total <= 1.0));
            (out.y[0] - ode.exact_solution(1.0).unwrap()[0]).abs()
        };
        assert!(err(1e-8) < err(1e-2));
    }

    #[test]
    fn rejection_updates_once_and_shrinks() {
        let meth = registry_lookup("EX-EX 2(1)A").unwrap();
        let mut integ = Integrator::new(meth);
        let ode = CoupledPair::default();
        let c = ControllerConfig::new(Strategy::Efficiency, Tolerances::scalar(2, 1e-8, 1e-8));
        let y0 = State::from_vec(vec![1.0, 0.5]);
        let out = drive(&mut integ, &ode, &y0, 0.0, 0.5, 0.2, 2, &c).unwrap();
        assert!(out.state.rejected > 0);
        let tr = &out.state.trace;
        for w in tr.windows(2) {
            if !w[0].accepted {
                assert!(w[1].h <= w[0].h);
                assert_eq!(w[1].t, w[0].t);
            }
        }
    }
}
