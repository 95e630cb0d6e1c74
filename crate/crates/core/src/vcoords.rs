//! Velocity coordinates v = √E·ω: coordinate maps, transformed coefficients and
//! cross sections, the second-order operator P(v, D), and an equivalence check of the
//! transport operator in both coordinate systems on manufactured fields.

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, scale, Mat3, Vec3};
use crate::phase_space::{EnergyGrid, SphereGrid};
use crate::xsec::CoefficientField;
use rayon::prelude::*;
use std::f64::consts::PI;

/// Smallest v₁² + v₂² accepted by the chart.
pub const AXIS_TOL: f64 = 1e-10;
/// Relative clearance kept from the seam half-plane {v₂ = 0, v₁ ≥ 0}.
pub const SEAM_MARGIN: f64 = 1e-5;

/// Open shell r₀ < |v| < r_m with r₀ = √E₀, r_m = √E_m.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shell {
    pub r0: f64,
    pub rm: f64,
}

impl Shell {
    pub fn new(e0: f64, em: f64) -> Result<Self> {
        if !(e0 > 0.0 && em > e0) {
            return Err(Error::Domain(format!("need 0 < E0 < Em, got {e0}, {em}")));
        }
        Ok(Shell { r0: e0.sqrt(), rm: em.sqrt() })
    }

    pub fn from_grid(grid: &EnergyGrid) -> Result<Self> {
        Self::new(grid.e_min(), grid.e_max())
    }

    pub fn contains(&self, v: Vec3) -> bool {
        let r = norm(v);
        r > self.r0 && r < self.rm
    }

    /// v = √E ω.
    pub fn to_velocity(&self, omega: Vec3, e: f64) -> Result<Vec3> {
        if !(e > self.r0 * self.r0 && e < self.rm * self.rm) {
            return Err(Error::Domain(format!("energy {e} outside the open interval of the shell")));
        }
        to_velocity(omega, e)
    }

    /// (v/|v|, |v|²).
    pub fn from_velocity(&self, v: Vec3) -> Result<(Vec3, f64)> {
        if !self.contains(v) {
            return Err(Error::Domain(format!("velocity {v:?} outside the shell ({}, {})", self.r0, self.rm)));
        }
        from_velocity(v)
    }
}

pub fn to_velocity(omega: Vec3, e: f64) -> Result<Vec3> {
    if !(e > 0.0) || ((dot(omega, omega) - 1.0).abs() > 1e-12) {
        return Err(Error::Domain(format!("need E > 0 and a unit direction, got E = {e}")));
    }
    Ok(scale(omega, e.sqrt()))
}

pub fn from_velocity(v: Vec3) -> Result<(Vec3, f64)> {
    let r = norm(v);
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Domain("zero or non-finite velocity".into()));
    }
    Ok((scale(v, 1.0 / r), r * r))
}

/// Jacobian of dω dE = J dv, J = 2/|v|.
pub fn jacobian(v: Vec3) -> f64 {
    2.0 / norm(v)
}

fn on_seam(v: Vec3) -> bool {
    let r = norm(v);
    v[0] >= -SEAM_MARGIN * r && v[1].abs() <= SEAM_MARGIN * r
}

fn near_axis(v: Vec3) -> bool {
    v[0] * v[0] + v[1] * v[1] < AXIS_TOL * dot(v, v).max(1.0)
}

/// Product of the interior energy levels (as shells |v| = √E) and a sphere mesh rotated
/// off the seam and the v₃ axis. Node (e, d) sits at √E_e · ω_d, e ∈ 1..n_e−1.
#[derive(Clone, Debug)]
pub struct VelocityGrid {
    pub shell: Shell,
    pub sphere: SphereGrid,
    /// Energy levels of the shells (interior levels of the energy grid).
    pub energies: Vec<f64>,
    /// Index of each shell in the energy grid.
    pub level_index: Vec<usize>,
    pub nodes: Vec<Vec3>,
    /// Weights of dv: r² Δr w_d with Δr from the trapezoid weights in E.
    pub weights: Vec<f64>,
}

impl VelocityGrid {
    pub fn new(energy: &EnergyGrid, sphere: &SphereGrid) -> Result<Self> {
        let shell = Shell::from_grid(energy)?;
        if energy.len() < 3 {
            return Err(Error::Invalid("need at least one interior energy level".into()));
        }
        let sphere = off_seam(sphere)?;
        let level_index: Vec<usize> = (1..energy.len() - 1).collect();
        let energies: Vec<f64> = level_index.iter().map(|&e| energy.levels[e]).collect();
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for (&e, &en) in level_index.iter().zip(&energies) {
            let r = en.sqrt();
            for (w, &wd) in sphere.nodes.iter().zip(&sphere.weights) {
                nodes.push(scale(*w, r));
                // dv = r² dr dω and dE = 2r dr
                weights.push(r * r * energy.weights[e] / (2.0 * r) * wd);
            }
        }
        let g = VelocityGrid {
            shell,
            sphere,
            energies,
            level_index,
            nodes,
            weights,
        };
        g.check()?;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        for &v in &self.nodes {
            if !self.shell.contains(v) {
                return Err(Error::Domain(format!("node {v:?} outside the shell")));
            }
            if on_seam(v) || near_axis(v) {
                return Err(Error::Domain(format!("node {v:?} on the excluded seam or axis")));
            }
        }
        Ok(())
    }
}

/// Rotates a sphere mesh so that no node lies near the seam half-plane or the v₃ axis.
pub fn off_seam(sphere: &SphereGrid) -> Result<SphereGrid> {
    for k in 0..64 {
        let (a, b, c) = (0.3 + 0.17 * k as f64, 0.7 + 0.29 * k as f64, 1.1 + 0.41 * k as f64);
        let r = euler(a, b, c);
        let g = sphere.rotated(&r);
        if g.nodes.iter().all(|&w| !on_seam(w) && !near_axis(w)) {
            return Ok(g);
        }
    }
    Err(Error::Domain("could not rotate the sphere mesh off the seam".into()))
}

fn euler(a: f64, b: f64, c: f64) -> Mat3 {
    let rz = |t: f64| [[t.cos(), -t.sin(), 0.0], [t.sin(), t.cos(), 0.0], [0.0, 0.0, 1.0]];
    let ry = |t: f64| [[t.cos(), 0.0, t.sin()], [0.0, 1.0, 0.0], [-t.sin(), 0.0, t.cos()]];
    crate::linalg::mat_mul(&rz(a), &crate::linalg::mat_mul(&ry(b), &rz(c)))
}

/// Coefficients in velocity coordinates at the nodes of a [`VelocityGrid`], indexed
/// (node, voxel) as node * n_vox + voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityCoefficients {
    pub n_vox: usize,
    /// ã = a(x,|v|²) / (2|v|²).
    pub a: Vec<f64>,
    /// b̃ = b(x,|v|²).
    pub b: Vec<f64>,
    /// Σ̃ = Σ(x,|v|²).
    pub sigma: Vec<f64>,
}

pub fn transform_coefficients(coeff: &CoefficientField, sigma: &[f64], grid: &VelocityGrid) -> Result<VelocityCoefficients> {
    let nv = coeff.n_vox;
    if sigma.len() != coeff.n_e * nv {
        return Err(Error::Shape("Sigma does not match the coefficient field".into()));
    }
    let nd = grid.sphere.len();
    let mut out = VelocityCoefficients {
        n_vox: nv,
        a: Vec::with_capacity(grid.len() * nv),
        b: Vec::with_capacity(grid.len() * nv),
        sigma: Vec::with_capacity(grid.len() * nv),
    };
    for (k, &e) in grid.level_index.iter().enumerate() {
        let en = grid.energies[k];
        for _ in 0..nd {
            for v in 0..nv {
                out.a.push(coeff.at(&coeff.a, e, v) / (2.0 * en));
                out.b.push(coeff.at(&coeff.b, e, v));
                out.sigma.push(sigma[e * nv + v]);
            }
        }
    }
    Ok(out)
}

/// σ̃¹(v′,v) = (2/|v′|) σ¹(v′/|v′|, v/|v|, |v′|², |v|²).
pub fn sigma1_tilde<F: Fn(Vec3, Vec3, f64, f64) -> f64>(sigma1: F, vp: Vec3, v: Vec3) -> f64 {
    let (rp, r) = (norm(vp), norm(v));
    2.0 / rp * sigma1(scale(vp, 1.0 / rp), scale(v, 1.0 / r), rp * rp, r * r)
}

/// σ̃²(v′,v) = (2/|I′|)(1/|v′|) σ²(v′/|v′|, v/|v|, |v|²), with the 2/|I′| factor kept as
/// written.
pub fn sigma2_tilde<F: Fn(Vec3, Vec3, f64) -> f64>(sigma2: F, interval_len: f64, vp: Vec3, v: Vec3) -> f64 {
    let (rp, r) = (norm(vp), norm(v));
    2.0 / interval_len / rp * sigma2(scale(vp, 1.0 / rp), scale(v, 1.0 / r), r * r)
}

/// σ̃³(v′,v) = (1/2π)(1/|v′|) σ³(|v′|², |v|²).
pub fn sigma3_tilde<F: Fn(f64, f64) -> f64>(sigma3: F, vp: Vec3, v: Vec3) -> f64 {
    let (rp, r) = (norm(vp), norm(v));
    sigma3(rp * rp, r * r) / (2.0 * PI * rp)
}

/// Central-difference Hessian and gradient of Ψ at v with step h.
fn derivatives<P: Fn(Vec3) -> f64>(psi: &P, v: Vec3, h: f64) -> ([f64; 3], [[f64; 3]; 3]) {
    let at = |d: [f64; 3]| psi([v[0] + d[0], v[1] + d[1], v[2] + d[2]]);
    let unit = |i: usize, s: f64| {
        let mut d = [0.0; 3];
        d[i] = s;
        d
    };
    let c = psi(v);
    let mut g = [0.0; 3];
    let mut hess = [[0.0; 3]; 3];
    for i in 0..3 {
        let (p, m) = (at(unit(i, h)), at(unit(i, -h)));
        g[i] = (p - m) / (2.0 * h);
        hess[i][i] = (p - 2.0 * c + m) / (h * h);
        for j in i + 1..3 {
            let mut pp = unit(i, h);
            pp[j] = h;
            let mut pm = unit(i, h);
            pm[j] = -h;
            let mut mp = unit(i, -h);
            mp[j] = h;
            let mut mm = unit(i, -h);
            mm[j] = -h;
            let x = (at(pp) - at(pm) - at(mp) + at(mm)) / (4.0 * h * h);
            hess[i][j] = x;
            hess[j][i] = x;
        }
    }
    (g, hess)
}

/// P(v, D)Ψ from the six second-derivative terms, given the Hessian.
pub fn p_from_hessian(v: Vec3, hess: &[[f64; 3]; 3]) -> Result<f64> {
    let [v1, v2, v3] = v;
    let rho2 = v1 * v1 + v2 * v2;
    if rho2 < AXIS_TOL {
        return Err(Error::Domain(format!("velocity {v:?} too close to the v3 axis")));
    }
    let r2 = rho2 + v3 * v3;
    Ok(
        (r2 * v2 * v2 + v1 * v1 * v3 * v3) / rho2 * hess[0][0] - 2.0 * v1 * v2 * hess[0][1] - 2.0 * v1 * v3 * hess[0][2] - 2.0 * v2 * v3 * hess[1][2]
            + (r2 * v1 * v1 + v2 * v2 * v3 * v3) / rho2 * hess[1][1]
            + rho2 * hess[2][2],
    )
}

/// P(v, D)Ψ at every node of the grid by central differences of step `h`.
pub fn apply_p<P: Fn(Vec3) -> f64 + Sync>(psi: &P, grid: &VelocityGrid, h: f64) -> Result<Vec<f64>> {
    grid.nodes
        .par_iter()
        .map(|&v| {
            let (_, hess) = derivatives(psi, v, h);
            p_from_hessian(v, &hess)
        })
        .collect()
}

/// Smooth coefficients of a single-point equivalence check.
#[derive(Clone, Copy, Debug)]
pub struct PointCoefficients<A, B, S> {
    pub a: A,
    pub b: B,
    pub sigma: S,
}

/// Residual of the operator identity (Tψ)∘H⁻¹ = T̃(ψ∘H⁻¹) at a fixed point x.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct EquivalenceResidual {
    /// Weighted (dv) RMS of the difference over the velocity nodes.
    pub absolute: f64,
    /// `absolute` divided by the weighted RMS of the velocity-side operator.
    pub relative: f64,
}

/// Compares, at a point x, the sphere-coordinate operator
/// a ∂ψ/∂E + b Δ_S ψ + ω·∇ₓψ + Σψ (backward E difference, mesh Laplace-Beltrami) with
/// b̃ PΨ + (ã − 2b̃) v·∇_vΨ + (1/|v|) v·∇ₓΨ + Σ̃Ψ (central differences of step `h_v`).
pub fn equivalence_residual<F, A, B, S>(
    psi: &F,
    x: Vec3,
    energy: &EnergyGrid,
    grid: &VelocityGrid,
    coeff: PointCoefficients<A, B, S>,
    h_v: f64,
) -> Result<EquivalenceResidual>
where
    F: Fn(Vec3, Vec3, f64) -> f64 + Sync,
    A: Fn(f64) -> f64 + Sync,
    B: Fn(f64) -> f64 + Sync,
    S: Fn(f64) -> f64 + Sync,
{
    let sphere = &grid.sphere;
    let nd = sphere.len();
    let hx = 1e-4;
    let grad_x = |omega: Vec3, e: f64| -> Vec3 {
        std::array::from_fn(|i| {
            let mut p = x;
            let mut m = x;
            p[i] += hx;
            m[i] -= hx;
            (psi(p, omega, e) - psi(m, omega, e)) / (2.0 * hx)
        })
    };
    let big_psi = |v: Vec3| {
        let r = norm(v);
        psi(x, scale(v, 1.0 / r), r * r)
    };
    let rows: Result<Vec<(f64, f64, f64)>> = (0..grid.len())
        .into_par_iter()
        .map(|n| {
            let (k, d) = (n / nd, n % nd);
            let l = grid.level_index[k];
            let (e, ehi) = (energy.levels[l], energy.levels[l - 1]);
            let omega = sphere.nodes[d];
            let level: Vec<f64> = sphere.nodes.iter().map(|&w| psi(x, w, e)).collect();
            let lap = sphere.laplace_beltrami(&level);
            let p0 = level[d];
            let sphere_side =
                (coeff.a)(e) * (psi(x, omega, ehi) - p0) / (ehi - e) + (coeff.b)(e) * lap[d] + dot(omega, grad_x(omega, e)) + (coeff.sigma)(e) * p0;

            let v = grid.nodes[n];
            let (g, hess) = derivatives(&big_psi, v, h_v);
            let pv = p_from_hessian(v, &hess)?;
            let (at, bt) = ((coeff.a)(e) / (2.0 * e), (coeff.b)(e));
            let r = norm(v);
            let gx: Vec3 = std::array::from_fn(|i| {
                let mut p = x;
                let mut m = x;
                p[i] += hx;
                m[i] -= hx;
                (psi(p, scale(v, 1.0 / r), r * r) - psi(m, scale(v, 1.0 / r), r * r)) / (2.0 * hx)
            });
            let vel_side = bt * pv + (at - 2.0 * bt) * dot(v, g) + dot(v, gx) / r + (coeff.sigma)(r * r) * big_psi(v);
            let w = grid.weights[n];
            Ok((w * (sphere_side - vel_side).powi(2), w * vel_side * vel_side, w))
        })
        .collect();
    let (num, den) = rows?.iter().fold((0.0, 0.0), |(a, b), r| (a + r.0, b + r.1));
    let absolute = num.sqrt();
    Ok(EquivalenceResidual {
        absolute,
        relative: if den > 0.0 { absolute / den.sqrt() } else { absolute },
    })
}
