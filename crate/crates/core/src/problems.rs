//! Partitioned test problems.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{PartitionedOde, State};

/// `y' = λ^f y + λ^s y`, `y(0) = y0`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinearTwoRate {
    pub lambda_fast: f64,
    pub lambda_slow: f64,
    pub y0: f64,
}

impl Default for LinearTwoRate {
    fn default() -> Self {
        LinearTwoRate {
            lambda_fast: -10.0,
            lambda_slow: -1.0,
            y0: 1.0,
        }
    }
}

impl PartitionedOde for LinearTwoRate {
    fn dim(&self) -> usize {
        1
    }
    fn f_slow(&self, _t: f64, y: &State) -> State {
        y * self.lambda_slow
    }
    fn f_fast(&self, _t: f64, y: &State) -> State {
        y * self.lambda_fast
    }
    fn jac_slow(&self, _t: f64, _y: &State) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, self.lambda_slow))
    }
    fn jac_fast(&self, _t: f64, _y: &State) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, self.lambda_fast))
    }
    fn exact_solution(&self, t: f64) -> Option<State> {
        Some(DVector::from_element(
            1,
            self.y0 * ((self.lambda_fast + self.lambda_slow) * t).exp(),
        ))
    }
}

/// Two coupled scalars: `x' = −x + cos(x) + sin(w)` (slow), `w' = −k w + cos(w) + x²` (fast).
///
/// Each partition is nonlinear in its own variable, so single-colour error terms do not vanish.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CoupledPair {
    pub k: f64,
}

impl Default for CoupledPair {
    fn default() -> Self {
        CoupledPair { k: 20.0 }
    }
}

impl PartitionedOde for CoupledPair {
    fn dim(&self) -> usize {
        2
    }
    fn f_slow(&self, _t: f64, y: &State) -> State {
        DVector::from_vec(vec![-y[0] + y[0].cos() + y[1].sin(), 0.0])
    }
    fn f_fast(&self, _t: f64, y: &State) -> State {
        DVector::from_vec(vec![0.0, -self.k * y[1] + y[1].cos() + y[0] * y[0]])
    }
    fn jac_slow(&self, _t: f64, y: &State) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_row_slice(
            2,
            2,
            &[-1.0 - y[0].sin(), y[1].cos(), 0.0, 0.0],
        ))
    }
    fn jac_fast(&self, _t: f64, y: &State) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_row_slice(
            2,
            2,
            &[0.0, 0.0, 2.0 * y[0], -self.k - y[1].sin()],
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Diffusion {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Neumann,
    Periodic,
}

/// Gray–Scott on the unit square, cell-centred `n × n` grid.
/// State layout: `u` for all cells (row-major), then `v`.
/// Reaction is the fast partition, diffusion the slow one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrayScott {
    pub n: usize,
    pub eps_u: f64,
    pub eps_v: f64,
    pub feed: f64,
    pub kill: f64,
    pub diffusion: Diffusion,
    pub boundary: Boundary,
    #[serde(skip)]
    shape: Vec<f64>,
}

impl GrayScott {
    pub fn new(n: usize, diffusion: Diffusion) -> Self {
        let mut gs = GrayScott {
            n,
            eps_u: 0.0625,
            eps_v: 0.0312,
            feed: 0.0180,
            kill: 0.0520,
            diffusion,
            boundary: Boundary::Neumann,
            shape: Vec::new(),
        };
        gs.refresh();
        gs
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    /// Recompute cached geometry after editing public fields.
    pub fn refresh(&mut self) {
        let n = self.n;
        self.shape = (0..n * n)
            .map(|k| {
                let (x, y) = self.center(k);
                (PI * x).sin() * (PI * y).sin()
            })
            .collect();
    }

    fn center(&self, k: usize) -> (f64, f64) {
        let n = self.n as f64;
        let (i, j) = (k % self.n, k / self.n);
        ((i as f64 + 0.5) / n, (j as f64 + 0.5) / n)
    }

    /// Nonlinear diffusion coefficient of `u` at `(x, y)`.
    pub fn nonlinear_eps_u(&self, x: f64, y: f64, u: f64) -> f64 {
        self.eps_u * (-u / 100.0).exp() * (PI * x).sin() * (PI * y).sin()
    }

    pub fn nonlinear_eps_v(&self, x: f64, y: f64, v: f64) -> f64 {
        self.eps_v * (-v / 100.0).exp() * (PI * x).sin() * (PI * y).sin()
    }

    pub fn initial_condition(&self) -> State {
        let n = self.n;
        let cells = n * n;
        let mut y = DVector::zeros(2 * cells);
        let lo = (n - n / 4) / 2;
        let hi = lo + n / 4;
        for k in 0..cells {
            let (i, j) = (k % n, k / n);
            let inside = (lo..hi).contains(&i) && (lo..hi).contains(&j);
            y[k] = if inside { 0.5 } else { 1.0 };
            y[cells + k] = if inside { 0.25 } else { 0.0 };
        }
        y
    }

    fn neighbours(&self, k: usize) -> [Option<usize>; 4] {
        let n = self.n;
        let (i, j) = (k % n, k / n);
        let wrap = self.boundary == Boundary::Periodic;
        let step = |a: usize, d: isize| -> Option<usize> {
            let b = a as isize + d;
            if (0..n as isize).contains(&b) {
                Some(b as usize)
            } else if wrap {
                Some(b.rem_euclid(n as isize) as usize)
            } else {
                None
            }
        };
        [
            step(i, -1).map(|i2| j * n + i2),
            step(i, 1).map(|i2| j * n + i2),
            step(j, -1).map(|j2| j2 * n + i),
            step(j, 1).map(|j2| j2 * n + i),
        ]
    }

    /// `∇·(ε ∇w)` with face coefficients averaged from the adjacent cells.
    fn diffuse(&self, w: &[f64], eps: &[f64], out: &mut [f64]) {
        let inv_h2 = (self.n * self.n) as f64;
        for k in 0..w.len() {
            let mut acc = 0.0;
            for nb in self.neighbours(k).into_iter().flatten() {
                acc += 0.5 * (eps[k] + eps[nb]) * (w[nb] - w[k]);
            }
            out[k] = acc * inv_h2;
        }
    }

    fn coefficients(&self, w: &[f64], base: f64) -> Vec<f64> {
        match self.diffusion {
            Diffusion::Linear => vec![base; w.len()],
            Diffusion::Nonlinear => w
                .iter()
                .zip(&self.shape)
                .map(|(x, s)| base * (-x / 100.0).exp() * s)
                .collect(),
        }
    }

    /// Constant-coefficient diffusion operator (linear mode), size `2n² × 2n²`.
    pub fn diffusion_matrix(&self) -> DMatrix<f64> {
        let cells = self.n * self.n;
        let inv_h2 = cells as f64;
        let mut a = DMatrix::zeros(2 * cells, 2 * cells);
        for (off, eps) in [(0, self.eps_u), (cells, self.eps_v)] {
            for k in 0..cells {
                for nb in self.neighbours(k).into_iter().flatten() {
                    a[(off + k, off + nb)] += eps * inv_h2;
                    a[(off + k, off + k)] -= eps * inv_h2;
                }
            }
        }
        a
    }

    /// Slow and fast parts with a finiteness check on the input.
    pub fn rhs_parts(&self, y: &State) -> Result<(State, State)> {
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok((self.f_slow(0.0, y), self.f_fast(0.0, y)))
    }
}

impl PartitionedOde for GrayScott {
    fn dim(&self) -> usize {
        2 * self.n * self.n
    }

    fn f_slow(&self, _t: f64, y: &State) -> State {
        let cells = self.n * self.n;
        let (u, v) = y.as_slice().split_at(cells);
        let mut out = DVector::zeros(2 * cells);
        let (du, dv) = out.as_mut_slice().split_at_mut(cells);
        self.diffuse(u, &self.coefficients(u, self.eps_u), du);
        self.diffuse(v, &self.coefficients(v, self.eps_v), dv);
        out
    }

    fn f_fast(&self, _t: f64, y: &State) -> State {
        let cells = self.n * self.n;
        let mut out = DVector::zeros(2 * cells);
        for k in 0..cells {
            let (u, v) = (y[k], y[cells + k]);
            let uv2 = u * v * v;
            out[k] = -uv2 + self.feed * (1.0 - u);
            out[cells + k] = uv2 - (self.feed + self.kill) * v;
        }
        out
    }

    fn jac_slow(&self, _t: f64, _y: &State) -> Option<DMatrix<f64>> {
        match self.diffusion {
            Diffusion::Linear => Some(self.diffusion_matrix()),
            Diffusion::Nonlinear => None,
        }
    }

    fn jac_fast(&self, _t: f64, y: &State) -> Option<DMatrix<f64>> {
        let cells = self.n * self.n;
        let mut j = DMatrix::zeros(2 * cells, 2 * cells);
        for k in 0..cells {
            let (u, v) = (y[k], y[cells + k]);
            j[(k, k)] = -v * v - self.feed;
            j[(k, cells + k)] = -2.0 * u * v;
            j[(cells + k, k)] = v * v;
            j[(cells + k, cells + k)] = 2.0 * u * v - self.feed - self.kill;
        }
        Some(j)
    }
}

/// Exchanges the fast and slow partitions of another problem.
pub struct Swapped<'a>(pub &'a dyn PartitionedOde);

impl PartitionedOde for Swapped<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn f_slow(&self, t: f64, y: &State) -> State {
        self.0.f_fast(t, y)
    }
    fn f_fast(&self, t: f64, y: &State) -> State {
        self.0.f_slow(t, y)
    }
    fn jac_slow(&self, t: f64, y: &State) -> Option<DMatrix<f64>> {
        self.0.jac_fast(t, y)
    }
    fn jac_fast(&self, t: f64, y: &State) -> Option<DMatrix<f64>> {
        self.0.jac_slow(t, y)
    }
    fn exact_solution(&self, t: f64) -> Option<State> {
        self.0.exact_solution(t)
    }
}

/// Relative L2 error `‖y − ref‖ / ‖ref‖` (absolute when the reference vanishes).
pub fn relative_error(y: &State, reference: &State) -> f64 {
    let scale = reference.norm();
    let diff = (y - reference).norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Error against the problem's exact solution at `t`.
pub fn reference_error(ode: &dyn PartitionedOde, y: &State, t: f64) -> Result<f64> {
    let exact = ode.exact_solution(t).ok_or(Error::NoReference)?;
    Ok(relative_error(y, &exact))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_equilibrium_has_zero_rhs() {
        for mode in [Diffusion::Linear, Diffusion::Nonlinear] {
            let gs = GrayScott::new(8, mode);
            let mut y = DVector::zeros(128);
            y.rows_mut(0, 64).fill(1.0);
            let (s, f) = gs.rhs_parts(&y).unwrap();
            assert!(s.amax() < 1e-15 && f.amax() < 1e-15);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let gs = GrayScott::new(4, Diffusion::Linear);
        let mut y = gs.initial_condition();
        y[3] = f64::NAN;
        assert_eq!(gs.rhs_parts(&y).unwrap_err(), Error::NonFiniteInput);
    }

    #[test]
    fn linear_problem_parts() {
        let p = LinearTwoRate::default();
        let y = DVector::from_element(1, 1.0);
        assert_eq!(p.f_slow(0.0, &y)[0], -1.0);
        assert_eq!(p.f_fast(0.0, &y)[0], -10.0);
        let e = p.exact_solution(1.0).unwrap()[0];
        assert!((e - (-11f64).exp()).abs() < 1e-20);
        assert_eq!(reference_error(&p, &p.exact_solution(0.3).unwrap(), 0.3).unwrap(), 0.0);
        assert_eq!(
            reference_error(&GrayScott::new(4, Diffusion::Linear), &DVector::zeros(32), 1.0),
            Err(Error::NoReference)
        );
    }

    #[test]
    fn coefficient_peak_at_centre() {
        let gs = GrayScott::new(8, Diffusion::Nonlinear);
        assert!((gs.nonlinear_eps_u(0.5, 0.5, 0.0) - 0.0625).abs() < 1e-15);
        assert!((gs.nonlinear_eps_v(0.5, 0.5, 0.0) - 0.0312).abs() < 1e-15);
    }

    #[test]
    fn initial_condition_perturbs_middle_quarter() {
        for n in [8usize, 16, 32] {
            let gs = GrayScott::new(n, Diffusion::Linear);
            let y = gs.initial_condition();
            let cells = n * n;
            let pu = (0..cells).filter(|&k| y[k] == 0.5).count();
            let pv = (0..cells).filter(|&k| y[cells + k] == 0.25).count();
            assert_eq!(pu, (n / 4) * (n / 4));
            assert_eq!(pv, pu);
            assert_eq!(y, gs.initial_condition());
        }
    }

    #[test]
    fn diffusion_conserves_mass() {
        for mode in [Diffusion::Linear, Diffusion::Nonlinear] {
            for bc in [Boundary::Neumann, Boundary::Periodic] {
                let gs = GrayScott::new(16, mode).with_boundary(bc);
                let y = gs.initial_condition();
                let s = gs.f_slow(0.0, &y);
                let h2 = 1.0 / 256.0;
                assert!((s.rows(0, 256).sum() * h2).abs() < 1e-12);
                assert!((s.rows(256, 256).sum() * h2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_diffusion_operator_is_symmetric() {
        let gs = GrayScott::new(6, Diffusion::Linear);
        let a = gs.diffusion_matrix();
        assert!((&a - a.transpose()).amax() < 1e-13);
        let y = gs.initial_condition();
        assert!((&a * &y - gs.f_slow(0.0, &y)).amax() < 1e-12);
    }

    #[test]
    fn fast_jacobian_matches_differences() {
        let gs = GrayScott::new(4, Diffusion::Linear);
        let y = gs.initial_condition().map(|v| v + 0.1);
        let fy = gs.f_fast(0.0, &y);
        let fd = crate::integrate::fd_jacobian(|z| gs.f_fast(0.0, z), &y, &fy);
        assert!((fd - gs.jac_fast(0.0, &y).unwrap()).amax() < 1e-6);
    }
}
