//! Hadamard finite-part integrals of the exact Møller terms and their truncated
//! approximations, used for the κ → 1 consistency study.

use crate::collision::{curve_point, DEFAULT_CURVE_SAMPLES};
use crate::error::{Error, Result};
use crate::fields::Layout;
use crate::linalg::Vec3;
use crate::phase_space::{EnergyGrid, SphereGrid};
use crate::xsec::{dmu_dep_diag, CrossSection, MollerData};
use std::f64::consts::PI;

const GK_NODES: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const K15_WEIGHTS: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const G7_WEIGHTS: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = K15_WEIGHTS[7] * fc;
    let mut g = G7_WEIGHTS[3] * fc;
    for i in 0..7 {
        let x = h * GK_NODES[i];
        let s = f(c - x) + f(c + x);
        k += K15_WEIGHTS[i] * s;
        if i % 2 == 1 {
            g += G7_WEIGHTS[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

struct Piece {
    a: f64,
    b: f64,
    value: f64,
    err: f64,
}

impl PartialEq for Piece {
    fn eq(&self, o: &Self) -> bool {
        self.err.total_cmp(&o.err).is_eq()
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Piece {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.err.total_cmp(&o.err)
    }
}

const MIN_WIDTH_DIVISOR: f64 = 128.0;

/// Globally adaptive Gauss-Kronrod (7/15) integral of `f` over [a, b] to absolute
/// tolerance `tol`, bisecting the piece with the largest error estimate. Pieces are
/// never narrower than (b − a)/MIN_WIDTH_DIVISOR, so regularized integrands whose
/// numerator cancels at an endpoint are not refined into roundoff.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let piece = |a: f64, b: f64| {
        let (value, err) = gk15(&f, a, b);
        Piece { a, b, value, err }
    };
    let mut heap = std::collections::BinaryHeap::new();
    heap.push(piece(a, b));
    let min_width = (b - a).abs() / MIN_WIDTH_DIVISOR;
    let mut done = Vec::new();
    let mut total_err = heap.peek().map_or(0.0, |p| p.err);
    while total_err > tol {
        let Some(worst) = heap.pop() else { break };
        if (worst.b - worst.a).abs() < 2.0 * min_width {
            done.push(worst);
            continue;
        }
        let m = 0.5 * (worst.a + worst.b);
        let (l, r) = (piece(worst.a, m), piece(m, worst.b));
        total_err += l.err + r.err - worst.err;
        heap.push(l);
        heap.push(r);
    }
    heap.iter().chain(&done).map(|p| p.value).sum()
}

/// Fourth-order central difference.
fn derivative<F: Fn(f64) -> f64>(f: &F, x: f64) -> f64 {
    let h = 1e-3 * x.abs().max(1e-3);
    (8.0 * (f(x + h) - f(x - h)) - (f(x + 2.0 * h) - f(x - 2.0 * h))) / (12.0 * h)
}

/// p.f.∫_E^{κE} f(E′)/(E′−E)^order dE′ for order 1 or 2.
pub fn fp_integral<F: Fn(f64) -> f64>(order: usize, f: F, e: f64, kappa: f64) -> Result<f64> {
    let len = kappa * e - e;
    if !(len > 0.0) || !e.is_finite() {
        return Err(Error::Domain(format!("finite-part interval [E, kappa E] is empty (E = {e}, kappa = {kappa})")));
    }
    let fe = f(e);
    let tol = 1e-13 * (1.0 + fe.abs());
    match order {
        1 => {
            let reg = integrate(|t| if t == e { 0.0 } else { (f(t) - fe) / (t - e) }, e, kappa * e, tol);
            Ok(reg + fe * len.ln())
        }
        2 => {
            let d = derivative(&f, e);
            let reg = integrate(
                |t| if t == e { 0.0 } else { (f(t) - fe - d * (t - e)) / ((t - e) * (t - e)) },
                e,
                kappa * e,
                tol,
            );
            Ok(reg + d * len.ln() - fe / len)
        }
        _ => Err(Error::Domain(format!("finite-part order must be 1 or 2, got {order}"))),
    }
}

/// K̃₁,₁,κ ψ = 2π ln(κE−E) σ̂₁(x,E,E) ψ for one species block (layout e, v, d).
pub fn truncated_k11(data: &MollerData, energy: &EnergyGrid, layout: Layout, psi: &[f64]) -> Result<Vec<f64>> {
    check_block(data, energy, layout, psi)?;
    let mut out = vec![0.0; psi.len()];
    for e in 0..layout.n_e {
        let en = energy.levels[e];
        let l = data.truncation(en).ln();
        for v in 0..layout.n_vox {
            let c = 2.0 * PI * l * data.sigma_hat(1, v, en, en);
            for d in 0..layout.n_dir {
                let i = layout.idx(e, v, d);
                out[i] = c * psi[i];
            }
        }
    }
    Ok(out)
}

/// Backward (toward lower level index) energy difference: levels are descending, so
/// level l uses (ψ_{l−1} − ψ_l)/h; level 0 uses the first step one-sidedly.
pub fn energy_derivative(energy: &EnergyGrid, layout: Layout, psi: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; psi.len()];
    for e in 0..layout.n_e {
        let (hi, lo, h) = if e == 0 { (0, 1, energy.steps[0]) } else { (e - 1, e, energy.steps[e - 1]) };
        for k in 0..layout.level() {
            out[e * layout.level() + k] = (psi[hi * layout.level() + k] - psi[lo * layout.level() + k]) / h;
        }
    }
    out
}

/// K̃₂,₁,κ ψ: the four-term truncated approximation of the second-order Møller term.
pub fn truncated_k21(data: &MollerData, energy: &EnergyGrid, sphere: &SphereGrid, layout: Layout, psi: &[f64]) -> Result<Vec<f64>> {
    check_block(data, energy, layout, psi)?;
    if sphere.len() != layout.n_dir {
        return Err(Error::Shape("sphere does not match the field layout".into()));
    }
    let de = energy_derivative(energy, layout, psi);
    let nd = layout.n_dir;
    let mut out = vec![0.0; psi.len()];
    for e in 0..layout.n_e {
        let en = energy.levels[e];
        let len = data.truncation(en);
        let l = len.ln();
        let dmu = dmu_dep_diag(en)?;
        for v in 0..layout.n_vox {
            let s2 = data.sigma_hat(2, v, en, en);
            let ds2 = data.sigma0[v] * data.cross_section.dsigma2_diag(en);
            let base = layout.idx(e, v, 0);
            let lap = sphere.laplace_beltrami(&psi[base..base + nd]);
            for d in 0..nd {
                let i = base + d;
                out[i] = -2.0 * PI * s2 / len * psi[i] + l * s2 * (-PI * dmu * lap[d]) + 2.0 * PI * s2 * l * de[i] + 2.0 * PI * l * ds2 * psi[i];
            }
        }
    }
    Ok(out)
}

fn check_block(data: &MollerData, energy: &EnergyGrid, layout: Layout, psi: &[f64]) -> Result<()> {
    if psi.len() != layout.block() || energy.len() != layout.n_e || data.n_vox() != layout.n_vox {
        return Err(Error::Shape("field, grid and material data disagree in size".into()));
    }
    Ok(())
}

/// ∫₀^{2π} ψ(γ(E′,E,ω)(s), E′) ds by the periodic trapezoid rule.
pub fn curve_average<P: Fn(Vec3, f64) -> f64>(psi: &P, ep: f64, e: f64, omega: Vec3, n_s: usize) -> Result<f64> {
    let mut s = 0.0;
    for k in 0..n_s {
        let t = 2.0 * PI * k as f64 / n_s as f64;
        s += psi(curve_point(ep, e, omega, t)?, ep);
    }
    Ok(s * 2.0 * PI / n_s as f64)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct KappaRow {
    pub kappa: f64,
    /// Maximum over the sample points of |K₁,₁,κψ − K̃₁,₁,κψ|.
    pub discrepancy: f64,
    /// Maximum over the sample points of |K₁,₁,κψ|.
    pub exact_max: f64,
}

/// Exact order-1 term p.f.∫_E^{κE} f₁(E′)/(E′−E) dE′ with f₁(E′) = σ̂₁(E′,E)∫ψ(γ(s),E′)ds.
pub fn exact_k11<P: Fn(Vec3, f64) -> f64>(cs: &CrossSection, sigma0: f64, psi: &P, omega: Vec3, e: f64, kappa: f64) -> Result<f64> {
    let n_s = 4 * DEFAULT_CURVE_SAMPLES;
    let f1 = |ep: f64| sigma0 * cs.sigma_hat(1, ep, e) * curve_average(psi, ep.max(e), e, omega, n_s).unwrap_or(f64::NAN);
    let v = fp_integral(1, f1, e, kappa)?;
    if !v.is_finite() {
        return Err(Error::Domain(format!("curve parametrization failed near E = {e}")));
    }
    Ok(v)
}

/// Discrepancy between the exact and truncated order-1 terms for an analytic ψ(ω, E),
/// sampled at the given energies and directions, per κ.
pub fn kappa_consistency_report<P: Fn(Vec3, f64) -> f64>(
    cs: &CrossSection,
    sigma0: f64,
    psi: &P,
    energies: &[f64],
    directions: &[Vec3],
    kappas: &[f64],
) -> Result<Vec<KappaRow>> {
    kappas
        .iter()
        .map(|&kappa| {
            let mut row = KappaRow {
                kappa,
                discrepancy: 0.0,
                exact_max: 0.0,
            };
            for &e in energies {
                for &w in directions {
                    let exact = exact_k11(cs, sigma0, psi, w, e, kappa)?;
                    let approx = 2.0 * PI * (kappa * e - e).ln() * sigma0 * cs.sigma_hat(1, e, e) * psi(w, e);
                    row.discrepancy = row.discrepancy.max((exact - approx).abs());
                    row.exact_max = row.exact_max.max(exact.abs());
                }
            }
            Ok(row)
        })
        .collect()
}
