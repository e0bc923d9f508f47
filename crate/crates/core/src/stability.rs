//! Linear stability of the assembled scheme on `y' = λ^f y + λ^s y`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gark::GarkMatrix;

pub const DEFAULT_N_THETA: usize = 65;
pub const DEFAULT_N_RHO: usize = 129;
pub const DEFAULT_RHO_MAX: f64 = 6.0;
pub const STABLE_TOL: f64 = 1e-12;

/// `R = 1 + bᵀ Z (I − A Z)⁻¹ 1` with `z_f` on the fast stages and `z_s` on the slow ones.
pub fn stability_value(g: &GarkMatrix, z_f: Complex64, z_s: Complex64) -> Result<Complex64> {
    let n = g.size();
    let nf = g.n_fast();
    let z = DVector::from_fn(n, |k, _| if k < nf { z_f } else { z_s });
    let mut lhs = DMatrix::from_fn(n, n, |i, j| -Complex64::from(g.a[(i, j)]) * z[j]);
    for k in 0..n {
        lhs[(k, k)] += 1.0;
    }
    let lu = lhs.lu();
    if lu.u().diagonal().iter().any(|p| p.norm() < 1e-300) {
        return Err(Error::SingularResolvent);
    }
    let x = lu
        .solve(&DVector::from_element(n, Complex64::from(1.0)))
        .ok_or(Error::SingularResolvent)?;
    let r: Complex64 = (0..n).map(|k| g.b[k] * z[k] * x[k]).sum();
    Ok(Complex64::from(1.0) + r)
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionGrid {
    pub m: usize,
    pub theta_f: Vec<f64>,
    pub theta_s: Vec<f64>,
    pub rho: Vec<f64>,
    /// `|R|` indexed `[i_f][i_s][k]` flattened row-major; NaN marks a singular resolvent.
    pub values: Vec<f64>,
}

impl RegionGrid {
    pub fn value(&self, i_f: usize, i_s: usize, k: usize) -> f64 {
        let (nt, nr) = (self.theta_s.len(), self.rho.len());
        self.values[(i_f * nt + i_s) * nr + k]
    }

    pub fn is_stable(&self, i_f: usize, i_s: usize, k: usize) -> bool {
        self.value(i_f, i_s, k) <= 1.0 + STABLE_TOL
    }

    /// Fraction of grid cells that are stable.
    pub fn stable_fraction(&self) -> f64 {
        let stable = self.values.iter().filter(|v| **v <= 1.0 + STABLE_TOL).count();
        stable as f64 / self.values.len() as f64
    }

    /// Largest sampled ρ such that every ρ' ≤ ρ along the ray is stable.
    pub fn stable_radius(&self, i_f: usize, i_s: usize) -> f64 {
        let mut last = 0.0;
        for (k, r) in self.rho.iter().enumerate() {
            if !self.is_stable(i_f, i_s, k) {
                break;
            }
            last = *r;
        }
        last
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::InvalidInput(e.to_string());
        out.write_record(["theta_f", "theta_s", "rho", "absR"]).map_err(io)?;
        for (i, tf) in self.theta_f.iter().enumerate() {
            for (j, ts) in self.theta_s.iter().enumerate() {
                for (k, r) in self.rho.iter().enumerate() {
                    let v = self.value(i, j, k);
                    out.write_record([tf, ts, r, &v].map(|x| format!("{x:.12e}")))
                        .map_err(io)?;
                }
            }
        }
        out.flush().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(())
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}

/// `|R(M ρ e^{−iθ_f}, ρ e^{−iθ_s})|` over `θ_f, θ_s ∈ [π/2, 3π/2]`, `ρ ∈ [0, ρ_max]`.
pub fn scan_region(g: &GarkMatrix, rho_max: f64, n_theta: usize, n_rho: usize) -> Result<RegionGrid> {
    if n_theta < 2 || n_rho < 2 {
        return Err(Error::InvalidInput("grid needs at least two points per axis".into()));
    }
    if !(rho_max.is_finite() && rho_max > 0.0) {
        return Err(Error::InvalidInput(format!("rho_max = {rho_max}")));
    }
    let theta = linspace(PI / 2.0, 1.5 * PI, n_theta);
    let rho = linspace(0.0, rho_max, n_rho);
    let mf = g.m as f64;
    let mut values = Vec::with_capacity(n_theta * n_theta * n_rho);
    for tf in &theta {
        for ts in &theta {
            for r in &rho {
                let z_f = Complex64::from_polar(mf * r, -tf);
                let z_s = Complex64::from_polar(*r, -ts);
                values.push(stability_value(g, z_f, z_s).map_or(f64::NAN, |v| v.norm()));
            }
        }
    }
    Ok(RegionGrid {
        m: g.m,
        theta_f: theta.clone(),
        theta_s: theta,
        rho,
        values,
    })
}
