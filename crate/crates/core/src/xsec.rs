//! Møller-derived cross sections, truncated transport coefficients, the restricted
//! collision kernel and the coupled kernel set.

use crate::error::{Error, Result};
use crate::phase_space::{EnergyGrid, SphereGrid};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Scattering cosine μ(E′,E) for E′ ≥ E > 0.
pub fn mu(ep: f64, e: f64) -> Result<f64> {
    if !(e > 0.0) || ep < e {
        return Err(Error::Domain(format!("mu needs E' >= E > 0, got E'={ep}, E={e}")));
    }
    Ok(mu_sym(ep, e))
}

/// μ evaluated with the larger argument as E′; used by synthetic kernels that also
/// couple E′ < E.
pub fn mu_sym(ep: f64, e: f64) -> f64 {
    let (hi, lo) = if ep >= e { (ep, e) } else { (e, ep) };
    (lo * (hi + 2.0) / (hi * (lo + 2.0))).sqrt().min(1.0)
}

/// ∂μ/∂E′ at E′ = E.
pub fn dmu_dep_diag(e: f64) -> Result<f64> {
    if !(e > 0.0) {
        return Err(Error::Domain(format!("dmu needs E > 0, got {e}")));
    }
    Ok(-1.0 / (e * (e + 2.0)))
}

/// Closed-form Møller cross sections σ̂₀, σ̂₁, σ̂₂ scaled by σ₀.
pub fn moller_sigma_hat(order: usize, sigma0: f64, ep: f64, e: f64) -> f64 {
    let s2 = sigma0 * (ep + 1.0).powi(2) / (ep * (ep + 2.0));
    match order {
        2 => s2,
        1 => s2 * (2.0 * ep + 1.0) / ((ep + 1.0).powi(2) * e),
        0 => s2 * (1.0 / (e * e) + 1.0 / (ep + 1.0).powi(2)),
        _ => panic!("cross-section order must be 0, 1 or 2"),
    }
}

/// ∂σ̂₂/∂E′ at E′ = E for the Møller cross section.
pub fn moller_dsigma2_diag(sigma0: f64, e: f64) -> f64 {
    -2.0 * sigma0 * (e + 1.0) / (e * e * (e + 2.0).powi(2))
}

/// Cross sections on a rectangular (E′, E) table, bilinearly interpolated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabulatedCrossSection {
    /// Ascending E′ nodes.
    pub eps: Vec<f64>,
    /// Ascending E nodes.
    pub es: Vec<f64>,
    /// values[order][i * es.len() + j] at (eps[i], es[j]).
    pub values: [Vec<f64>; 3],
}

fn bracket(xs: &[f64], x: f64) -> (usize, f64) {
    if xs.len() == 1 {
        return (0, 0.0);
    }
    let x = x.clamp(xs[0], xs[xs.len() - 1]);
    let mut i = match xs.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
        Ok(i) => i,
        Err(i) => i.saturating_sub(1),
    };
    if i >= xs.len() - 1 {
        i = xs.len() - 2;
    }
    (i, (x - xs[i]) / (xs[i + 1] - xs[i]))
}

impl TabulatedCrossSection {
    /// Build from scattered rows (E′, E, σ̂₀, σ̂₁, σ̂₂) covering a full rectangle.
    pub fn from_rows(rows: &[[f64; 5]]) -> Result<Self> {
        let mut eps: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let mut es: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        for v in [&mut eps, &mut es] {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v.dedup();
        }
        let (ni, nj) = (eps.len(), es.len());
        if ni * nj != rows.len() || ni < 2 || nj < 2 {
            return Err(Error::Invalid(format!(
                "material table must be a full rectangle with at least 2x2 nodes ({} rows for {}x{} nodes)",
                rows.len(),
                ni,
                nj
            )));
        }
        let mut values = [vec![f64::NAN; ni * nj], vec![f64::NAN; ni * nj], vec![f64::NAN; ni * nj]];
        for r in rows {
            let i = eps.iter().position(|x| *x == r[0]).unwrap();
            let j = es.iter().position(|x| *x == r[1]).unwrap();
            for o in 0..3 {
                if r[2 + o] < 0.0 || !r[2 + o].is_finite() {
                    return Err(Error::Invalid(format!("negative or non-finite cross section in row {r:?}")));
                }
                values[o][i * nj + j] = r[2 + o];
            }
        }
        if values.iter().any(|v| v.iter().any(|x| x.is_nan())) {
            return Err(Error::Invalid("material table has duplicate or missing nodes".into()));
        }
        Ok(TabulatedCrossSection { eps, es, values })
    }

    pub fn eval(&self, order: usize, ep: f64, e: f64) -> f64 {
        let (i, s) = bracket(&self.eps, ep);
        let (j, t) = bracket(&self.es, e);
        let nj = self.es.len();
        let v = &self.values[order];
        let f = |a: usize, b: usize| v[a * nj + b];
        (1.0 - s) * (1.0 - t) * f(i, j) + s * (1.0 - t) * f(i + 1, j) + (1.0 - s) * t * f(i, j + 1) + s * t * f(i + 1, j + 1)
    }
}

/// Source of the differential cross sections σ̂₀, σ̂₁, σ̂₂ at unit σ₀.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CrossSection {
    Moller,
    Table(TabulatedCrossSection),
}

impl CrossSection {
    pub fn sigma_hat(&self, order: usize, ep: f64, e: f64) -> f64 {
        match self {
            CrossSection::Moller => moller_sigma_hat(order, 1.0, ep, e),
            CrossSection::Table(t) => t.eval(order, ep, e),
        }
    }

    pub fn dsigma2_diag(&self, e: f64) -> f64 {
        match self {
            CrossSection::Moller => moller_dsigma2_diag(1.0, e),
            CrossSection::Table(_) => {
                let h = 1e-5 * e.max(1.0);
                (self.sigma_hat(2, e + h, e) - self.sigma_hat(2, e - h, e)) / (2.0 * h)
            }
        }
    }

    /// d/dE of σ̂₂(E,E), needed for the drift monotonicity check.
    pub fn dsigma2_total(&self, e: f64) -> f64 {
        match self {
            CrossSection::Moller => moller_dsigma2_diag(1.0, e),
            CrossSection::Table(_) => {
                let h = 1e-5 * e.max(1.0);
                (self.sigma_hat(2, e + h, e + h) - self.sigma_hat(2, e - h, e - h)) / (2.0 * h)
            }
        }
    }
}

/// Material description of a charged species: σ₀(x), κ and the base Σ(x,E).
#[derive(Clone, Debug, PartialEq)]
pub struct MollerData {
    /// σ₀ per active voxel.
    pub sigma0: Vec<f64>,
    pub kappa: f64,
    /// Σ(x,E), indexed e * n_vox + v.
    pub base_sigma: Vec<f64>,
    pub cross_section: CrossSection,
}

impl MollerData {
    pub fn new(sigma0: Vec<f64>, kappa: f64, base_sigma: Vec<f64>) -> Result<Self> {
        let d = MollerData {
            sigma0,
            kappa,
            base_sigma,
            cross_section: CrossSection::Moller,
        };
        d.check()?;
        Ok(d)
    }

    pub fn n_vox(&self) -> usize {
        self.sigma0.len()
    }

    pub fn check(&self) -> Result<()> {
        if !(self.kappa > 1.0) {
            return Err(Error::Invalid(format!("kappa must exceed 1, got {}", self.kappa)));
        }
        if let Some(s) = self.sigma0.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::hypothesis("sigma0 bounded below by a positive constant", *s));
        }
        if self.sigma0.is_empty() || !self.base_sigma.len().is_multiple_of(self.sigma0.len()) {
            return Err(Error::Shape("base Sigma must have n_levels * n_vox entries".into()));
        }
        if let Some(s) = self.base_sigma.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(Error::hypothesis("base Sigma nonnegative and bounded", *s));
        }
        Ok(())
    }

    pub fn sigma_hat(&self, order: usize, v: usize, ep: f64, e: f64) -> f64 {
        self.sigma0[v] * self.cross_section.sigma_hat(order, ep, e)
    }

    /// Truncation length κE − E.
    pub fn truncation(&self, e: f64) -> f64 {
        self.kappa * e - e
    }
}

/// Positive lower bounds of the coefficient hypotheses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    /// −∂a/∂E ≥ q1.
    pub q1: f64,
    /// −b ≥ q2.
    pub q2: f64,
    /// −a ≥ q3 at both ends of I.
    pub q3: f64,
    /// |a| ≥ c0.
    pub c0: f64,
}

impl Margins {
    /// Coercivity constant of the single-species form, min{q1/2, q3/2, q2, 1/2, c}.
    pub fn c_prime(&self, c: f64) -> f64 {
        [self.q1 / 2.0, self.q3 / 2.0, self.q2, 0.5, c].into_iter().fold(f64::INFINITY, f64::min)
    }
}

/// a, b and Σ_κ on G×I, indexed e * n_vox + v.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientField {
    pub n_e: usize,
    pub n_vox: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma_kappa: Vec<f64>,
    pub margins: Margins,
}

/// Pointwise truncated coefficients (a, b, Σ_κ − Σ) at one voxel and energy.
pub fn truncated_terms(data: &MollerData, v: usize, e: f64) -> (f64, f64, f64) {
    let t = data.truncation(e);
    let ln = t.ln();
    let s0 = data.sigma0[v];
    let cs = &data.cross_section;
    let s2 = s0 * cs.sigma_hat(2, e, e);
    let s1 = s0 * cs.sigma_hat(1, e, e);
    let ds2 = s0 * cs.dsigma2_diag(e);
    let a = -2.0 * PI * s2 * ln;
    let b = -PI * ln * s2 / (e * (e + 2.0));
    let extra = 2.0 * PI * s2 / t - 2.0 * PI * ln * ds2 + 2.0 * PI * ln * s1;
    (a, b, extra)
}

/// −∂a/∂E at one voxel and energy.
pub fn drift_slope(data: &MollerData, v: usize, e: f64) -> f64 {
    let t = data.truncation(e);
    let s0 = data.sigma0[v];
    let g = data.cross_section.sigma_hat(2, e, e);
    let dg = data.cross_section.dsigma2_total(e);
    2.0 * PI * s0 * (dg * t.ln() + g * (data.kappa - 1.0) / t)
}

impl CoefficientField {
    /// Build a, b, Σ_κ from the material data and check the coefficient hypotheses.
    pub fn build(data: &MollerData, grid: &EnergyGrid) -> Result<Self> {
        data.check()?;
        let n_vox = data.n_vox();
        let n_e = grid.len();
        if data.base_sigma.len() != n_e * n_vox {
            return Err(Error::Shape(format!(
                "base Sigma has {} entries, expected {}",
                data.base_sigma.len(),
                n_e * n_vox
            )));
        }
        if let Some(e) = grid.levels.iter().find(|e| !(data.truncation(**e) > 0.0)) {
            return Err(Error::Domain(format!("kappa*E - E must be positive, fails at E={e}")));
        }
        let mut a = vec![0.0; n_e * n_vox];
        let mut b = vec![0.0; n_e * n_vox];
        let mut sk = vec![0.0; n_e * n_vox];
        for (e, &en) in grid.levels.iter().enumerate() {
            for v in 0..n_vox {
                let (ai, bi, extra) = truncated_terms(data, v, en);
                let i = e * n_vox + v;
                a[i] = ai;
                b[i] = bi;
                sk[i] = data.base_sigma[i] + extra;
            }
        }
        let mut q1 = f64::INFINITY;
        for v in 0..n_vox {
            for (e, &en) in grid.levels.iter().enumerate() {
                q1 = q1.min(drift_slope(data, v, en));
                if e + 1 < n_e {
                    let da = a[e * n_vox + v] - a[(e + 1) * n_vox + v];
                    q1 = q1.min(-da / grid.steps[e]);
                }
            }
        }
        let q2 = b.iter().fold(f64::INFINITY, |m, x| m.min(-x));
        let q3 = (0..n_vox).fold(f64::INFINITY, |m, v| m.min(-a[v]).min(-a[(n_e - 1) * n_vox + v]));
        let c0 = a.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
        let margins = Margins { q1, q2, q3, c0 };
        let field = CoefficientField {
            n_e,
            n_vox,
            a,
            b,
            sigma_kappa: sk,
            margins,
        };
        field.check_margins()?;
        Ok(field)
    }

    /// Coefficient field from explicit arrays (margins computed, not enforced).
    pub fn from_arrays(grid: &EnergyGrid, n_vox: usize, a: Vec<f64>, b: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let n_e = grid.len();
        for (name, v) in [("a", &a), ("b", &b), ("Sigma", &sigma)] {
            if v.len() != n_e * n_vox {
                return Err(Error::Shape(format!("{name} has {} entries, expected {}", v.len(), n_e * n_vox)));
            }
        }
        let mut q1 = f64::INFINITY;
        for v in 0..n_vox {
            for e in 0..n_e.saturating_sub(1) {
                q1 = q1.min(-(a[e * n_vox + v] - a[(e + 1) * n_vox + v]) / grid.steps[e]);
            }
        }
        let q2 = b.iter().fold(f64::INFINITY, |m, x| m.min(-x));
        let q3 = (0..n_vox).fold(f64::INFINITY, |m, v| m.min(-a[v]).min(-a[(n_e - 1) * n_vox + v]));
        let c0 = a.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
        Ok(CoefficientField {
            n_e,
            n_vox,
            a,
            b,
            sigma_kappa: sigma,
            margins: Margins { q1, q2, q3, c0 },
        })
    }

    /// Fails with the name of the first coefficient hypothesis that does not hold.
    pub fn check_margins(&self) -> Result<()> {
        let m = self.margins;
        let checks = [
            ("energy drift decreasing in E (-da/dE >= q1 > 0)", m.q1),
            ("angular diffusion negative (-b >= q2 > 0)", m.q2),
            ("drift bounded away from zero at E0 and Em (-a >= q3 > 0)", m.q3),
            ("drift nondegenerate (|a| >= c0 > 0)", m.c0),
        ];
        for (name, v) in checks {
            if !(v > 0.0) {
                return Err(Error::hypothesis(name, v));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, field: &[f64], e: usize, v: usize) -> f64 {
        field[e * self.n_vox + v]
    }
}

/// Tabulated σ̂_{r,κ}(E′,E) at unit σ₀ with per-voxel σ₀ scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct RestrictedKernel {
    pub n_e: usize,
    /// table[e' * n_e + e] = σ̂_{r,κ}(E_{e'}, E_e) at σ₀ = 1.
    pub table: Vec<f64>,
    pub scale: Vec<f64>,
    pub energy_weights: Vec<f64>,
    /// max over x, E of ∫ σ̂_{r,κ}(x,E′,E) dE′.
    pub m1: f64,
    /// max over x, E of ∫ σ̂_{r,κ}(x,E,E′) dE′.
    pub m2: f64,
}

/// Pointwise σ̂_{r,κ}(E′,E) at unit σ₀.
pub fn restricted_kernel_value(cs: &CrossSection, kappa: f64, ep: f64, e: f64) -> f64 {
    if ep < e {
        return 0.0;
    }
    let mut s = cs.sigma_hat(0, ep, e);
    if ep >= kappa * e && ep > e {
        let d = ep - e;
        s += -cs.sigma_hat(1, ep, e) / d + cs.sigma_hat(2, ep, e) / (d * d);
    }
    s
}

impl RestrictedKernel {
    pub fn build(data: &MollerData, grid: &EnergyGrid) -> Result<Self> {
        data.check()?;
        let n = grid.len();
        let mut table = vec![0.0; n * n];
        for (ip, &ep) in grid.levels.iter().enumerate() {
            for (i, &e) in grid.levels.iter().enumerate() {
                let s = restricted_kernel_value(&data.cross_section, data.kappa, ep, e);
                if s < 0.0 || !s.is_finite() {
                    return Err(Error::hypothesis(format!("restricted kernel nonnegative (E'={ep}, E={e})"), s));
                }
                table[ip * n + i] = s;
            }
        }
        Ok(Self::from_table(n, table, data.sigma0.clone(), grid.weights.clone()))
    }

    pub fn from_table(n_e: usize, table: Vec<f64>, scale: Vec<f64>, energy_weights: Vec<f64>) -> Self {
        let mut k = RestrictedKernel {
            n_e,
            table,
            scale,
            energy_weights,
            m1: 0.0,
            m2: 0.0,
        };
        let smax = k.scale.iter().cloned().fold(0.0, f64::max);
        k.m1 = smax * (0..n_e).map(|e| k.row_integral_unit(e)).fold(0.0, f64::max);
        k.m2 = smax * (0..n_e).map(|e| k.col_integral_unit(e)).fold(0.0, f64::max);
        k
    }

    #[inline]
    pub fn at(&self, ep: usize, e: usize) -> f64 {
        self.table[ep * self.n_e + e]
    }

    /// ∫ σ̂(E′, E_e) dE′ at unit σ₀.
    pub fn row_integral_unit(&self, e: usize) -> f64 {
        (0..self.n_e).map(|ep| self.energy_weights[ep] * self.at(ep, e)).sum()
    }

    /// ∫ σ̂(E_e, E′) dE′ at unit σ₀.
    pub fn col_integral_unit(&self, e: usize) -> f64 {
        (0..self.n_e).map(|x| self.energy_weights[x] * self.at(e, x)).sum()
    }

    /// min over (x, E) of Σ − 2π·max(row, column) with Σ indexed e * n_vox + v.
    pub fn coercivity_margin(&self, sigma: &[f64]) -> f64 {
        let n_vox = self.scale.len();
        let mut c = f64::INFINITY;
        for e in 0..self.n_e {
            let r = self.row_integral_unit(e);
            let k = self.col_integral_unit(e);
            for v in 0..n_vox {
                let s = sigma[e * n_vox + v];
                let sc = self.scale[v];
                c = c.min(s - 2.0 * PI * sc * r).min(s - 2.0 * PI * sc * k);
            }
        }
        c
    }

    /// Σ = margin + 2π·max(row, column), indexed e * n_vox + v.
    pub fn sigma_for_margin(&self, margin: f64) -> Vec<f64> {
        let n_vox = self.scale.len();
        let mut s = vec![0.0; self.n_e * n_vox];
        for e in 0..self.n_e {
            let m = self.row_integral_unit(e).max(self.col_integral_unit(e));
            for v in 0..n_vox {
                s[e * n_vox + v] = margin + 2.0 * PI * self.scale[v] * m;
            }
        }
        s
    }
}

/// Measure pair used by a coupling kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variety {
    /// Integrates over ω′ and E′.
    Full,
    /// Integrates over ω′ at E′ = E.
    EnergyLocal,
    /// Integrates over E′ and the scattering cone.
    Curve,
}

/// Kernel data in separable form.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelData {
    /// σ(ω′,ω,E′,E) = angular[d' * n_dir + d] · energy[e' * n_e + e].
    Full { angular: Vec<f64>, energy: Vec<f64> },
    /// σ(ω′,ω,E) = angular[d' * n_dir + d] · profile[e].
    EnergyLocal { angular: Vec<f64>, profile: Vec<f64> },
    /// σ(E′,E) = table[e' * n_e + e], integrated over the cone γ(E′,E,ω).
    Curve { table: Vec<f64> },
}

/// One σ_{kj} of the coupled set with its per-voxel scale.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelEntry {
    pub data: KernelData,
    pub scale: Vec<f64>,
}

impl KernelEntry {
    pub fn variety(&self) -> Variety {
        match self.data {
            KernelData::Full { .. } => Variety::Full,
            KernelData::EnergyLocal { .. } => Variety::EnergyLocal,
            KernelData::Curve { .. } => Variety::Curve,
        }
    }

    pub fn curve(kernel: &RestrictedKernel) -> Self {
        KernelEntry {
            data: KernelData::Curve { table: kernel.table.clone() },
            scale: kernel.scale.clone(),
        }
    }

    fn values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = match &self.data {
            KernelData::Full { angular, energy } => angular.iter().chain(energy).copied().collect(),
            KernelData::EnergyLocal { angular, profile } => angular.iter().chain(profile).copied().collect(),
            KernelData::Curve { table } => table.clone(),
        };
        v.extend_from_slice(&self.scale);
        v
    }
}

/// σ_{kj} for all species pairs; entries[k][j] maps species k into species j.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledKernelSet {
    pub n_e: usize,
    pub n_vox: usize,
    pub n_dir: usize,
    pub entries: [[Option<KernelEntry>; 3]; 3],
}

impl CoupledKernelSet {
    pub fn empty(n_e: usize, n_vox: usize, n_dir: usize) -> Self {
        CoupledKernelSet {
            n_e,
            n_vox,
            n_dir,
            entries: Default::default(),
        }
    }

    pub fn set(&mut self, from: usize, to: usize, entry: KernelEntry) {
        self.entries[from][to] = Some(entry);
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().flatten().all(|e| e.is_none())
    }

    /// Shape and sign checks of every entry.
    pub fn validate(&self) -> Result<()> {
        let (ne, nd, nv) = (self.n_e, self.n_dir, self.n_vox);
        for (k, row) in self.entries.iter().enumerate() {
            for (j, entry) in row.iter().enumerate() {
                let Some(entry) = entry else { continue };
                let ok = match &entry.data {
                    KernelData::Full { angular, energy } => angular.len() == nd * nd && energy.len() == ne * ne,
                    KernelData::EnergyLocal { angular, profile } => angular.len() == nd * nd && profile.len() == ne,
                    KernelData::Curve { table } => table.len() == ne * ne,
                };
                if !ok || entry.scale.len() != nv {
                    return Err(Error::Shape(format!("kernel ({k},{j}) does not match the grid")));
                }
                if let Some(x) = entry.values().into_iter().find(|x| !(*x >= 0.0) || !x.is_finite()) {
                    return Err(Error::hypothesis(format!("kernel ({k},{j}) nonnegative and bounded"), x));
                }
            }
        }
        Ok(())
    }
}

/// Angular kernel (1 + g·ω′·ω), normalized so that Σ_{d'} w_{d'} A(d',d) = 1.
pub fn forward_peaked_angular(sphere: &SphereGrid, g: f64) -> Vec<f64> {
    let n = sphere.len();
    let mut a = vec![0.0; n * n];
    for d in 0..n {
        let mut s = 0.0;
        for dp in 0..n {
            let v = 1.0 + g * crate::linalg::dot(sphere.nodes[dp], sphere.nodes[d]);
            a[dp * n + d] = v.max(0.0);
            s += sphere.weights[dp] * a[dp * n + d];
        }
        for dp in 0..n {
            a[dp * n + d] /= s;
        }
    }
    a
}

/// Energy kernel magnitude/|I| for E′ ≥ E, zero otherwise.
pub fn downscatter_energy(grid: &EnergyGrid, magnitude: f64) -> Vec<f64> {
    let n = grid.len();
    let mut t = vec![0.0; n * n];
    for ep in 0..n {
        for e in ep..n {
            t[ep * n + e] = magnitude / grid.width();
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn data(n_vox: usize, grid: &EnergyGrid, kappa: f64) -> MollerData {
        MollerData::new(vec![1.0; n_vox], kappa, vec![0.0; n_vox * grid.len()]).unwrap()
    }

    #[test]
    fn mu_spot_values() {
        assert_eq!(mu(2.7, 2.7).unwrap(), 1.0);
        assert!((mu(4.0, 2.0).unwrap() - 0.75f64.sqrt()).abs() < 1e-15);
        assert!(mu(1.0, 2.0).is_err());
    }

    #[test]
    fn mu_decreases_in_eprime() {
        for e in [1.2, 2.0, 5.0] {
            let mut last = 1.0;
            for k in 1..50 {
                let m = mu(e + 0.1 * k as f64, e).unwrap();
                assert!(m < last);
                last = m;
            }
        }
    }

    #[test]
    fn dmu_diag_matches_formula_and_difference() {
        assert!((dmu_dep_diag(2.0).unwrap() + 0.125).abs() < 1e-15);
        let h = 1e-6;
        let fd = (mu(3.0 + h, 3.0).unwrap() - 1.0) / h;
        assert!((fd - dmu_dep_diag(3.0).unwrap()).abs() < 1e-5);
        assert!(dmu_dep_diag(1e8).unwrap() < 0.0 && dmu_dep_diag(1e8).unwrap() > -1e-15);
        assert!(dmu_dep_diag(0.0).is_err());
    }

    #[test]
    fn sigma_hat_spot_values() {
        assert!((moller_sigma_hat(2, 1.0, 2.0, 7.0) - 1.125).abs() < 1e-15);
        assert!((moller_sigma_hat(1, 1.0, 2.0, 3.0) - 1.125 * 5.0 / 27.0).abs() < 1e-15);
        let e = 2.5;
        let h = 1e-5;
        let fd = (moller_sigma_hat(2, 1.3, e + h, e) - moller_sigma_hat(2, 1.3, e - h, e)) / (2.0 * h);
        let exact = moller_dsigma2_diag(1.3, e);
        assert!((fd - exact).abs() < 1e-6 * exact.abs());
    }

    #[test]
    fn coefficient_spot_values() {
        let grid = EnergyGrid::uniform(1.5, 4.0, 6).unwrap();
        let d = data(1, &grid, 2.0);
        let (a, b, _) = truncated_terms(&d, 0, 2.0);
        assert!((a + 2.0 * PI * 1.125 * 2f64.ln()).abs() < 1e-12);
        assert!((a + 4.8995).abs() < 1e-4);
        assert!((b + PI * 2f64.ln() * 1.125 / 8.0).abs() < 1e-12);
        assert!((b + 0.30622).abs() < 1e-5);
    }

    #[test]
    fn example_kappa_two_sign_checks() {
        let grid = EnergyGrid::uniform(1.5, 10.0, 40).unwrap();
        let d = data(2, &grid, 2.0);
        let c = CoefficientField::build(&d, &grid).unwrap();
        assert!(c.a.iter().all(|a| *a < 0.0));
        assert!(c.b.iter().all(|b| *b < 0.0));
        for &e in &grid.levels {
            assert!(drift_slope(&d, 0, e) > 0.0);
        }
        let m = c.margins;
        assert!(m.q1 > 0.0 && m.q2 > 0.0 && m.q3 > 0.0 && m.c0 > 0.0);
    }

    #[test]
    fn drift_slope_matches_difference_of_a() {
        let grid = EnergyGrid::uniform(1.5, 4.0, 4).unwrap();
        let d = data(1, &grid, 1.7);
        let h = 1e-5;
        let a = |e: f64| truncated_terms(&d, 0, e).0;
        for e in [1.6, 2.3, 3.9] {
            let fd = -(a(e + h) - a(e - h)) / (2.0 * h);
            assert!((fd - drift_slope(&d, 0, e)).abs() < 1e-6 * fd.abs());
        }
    }

    #[test]
    fn low_cutoff_violates_hypotheses() {
        let grid = EnergyGrid::uniform(0.5, 4.0, 6).unwrap();
        let d = data(1, &grid, 2.0);
        match CoefficientField::build(&d, &grid) {
            Err(Error::Hypothesis { assumption, .. }) => assert!(assumption.contains("-b")),
            other => panic!("expected hypothesis failure, got {other:?}"),
        }
    }

    #[test]
    fn restricted_kernel_regions() {
        let grid = EnergyGrid::uniform(1.5, 8.0, 14).unwrap();
        let d = data(1, &grid, 2.0);
        let k = RestrictedKernel::build(&d, &grid).unwrap();
        let lv = &grid.levels;
        for ep in 0..grid.len() {
            for e in 0..grid.len() {
                let (xp, x) = (lv[ep], lv[e]);
                let v = k.at(ep, e);
                if xp < x {
                    assert_eq!(v, 0.0);
                } else if xp < 2.0 * x {
                    assert_eq!(v, moller_sigma_hat(0, 1.0, xp, x));
                }
                assert!(v >= 0.0);
            }
        }
    }

    #[test]
    fn schur_bounds_match_brute_force_sums() {
        let grid = EnergyGrid::uniform(1.5, 9.0, 64).unwrap();
        let mut d = data(3, &grid, 2.0);
        d.sigma0 = vec![0.5, 1.0, 1.7];
        let k = RestrictedKernel::build(&d, &grid).unwrap();
        let n = grid.len();
        let mut m1: f64 = 0.0;
        let mut m2: f64 = 0.0;
        for s in &d.sigma0 {
            for e in 0..n {
                let mut r = 0.0;
                let mut c = 0.0;
                for x in 0..n {
                    r += grid.weights[x] * s * restricted_kernel_value(&CrossSection::Moller, 2.0, grid.levels[x], grid.levels[e]);
                    c += grid.weights[x] * s * restricted_kernel_value(&CrossSection::Moller, 2.0, grid.levels[e], grid.levels[x]);
                }
                m1 = m1.max(r);
                m2 = m2.max(c);
            }
        }
        assert!((k.m1 - m1).abs() <= 1e-12 * m1);
        assert!((k.m2 - m2).abs() <= 1e-12 * m2);
    }

    #[test]
    fn coercivity_margin_examples() {
        let grid = EnergyGrid::uniform(1.5, 5.0, 9).unwrap();
        let n = grid.len();
        let zero = RestrictedKernel::from_table(n, vec![0.0; n * n], vec![1.0; 2], grid.weights.clone());
        assert_eq!(zero.coercivity_margin(&vec![1.0; 2 * n]), 1.0);
        let s0 = 0.01;
        let konst = RestrictedKernel::from_table(n, vec![s0; n * n], vec![1.0; 2], grid.weights.clone());
        let c = konst.coercivity_margin(&vec![3.0; 2 * n]);
        assert!((c - (3.0 - 2.0 * PI * s0 * 3.5)).abs() < 1e-12);
        let d = data(2, &grid, 2.0);
        let k = RestrictedKernel::build(&d, &grid).unwrap();
        let sigma = k.sigma_for_margin(0.25);
        assert!((k.coercivity_margin(&sigma) - 0.25).abs() < 1e-6);
    }

    #[test]
    fn tabulated_cross_section_reproduces_nodes() {
        let mut rows = Vec::new();
        for ep in [2.0, 3.0, 4.0] {
            for e in [1.5, 2.5] {
                rows.push([ep, e, ep + e, ep * e, 1.0 / ep]);
            }
        }
        let t = TabulatedCrossSection::from_rows(&rows).unwrap();
        assert!((t.eval(1, 3.0, 2.5) - 7.5).abs() < 1e-14);
        assert!((t.eval(0, 2.5, 2.0) - 4.5).abs() < 1e-14);
        assert!(TabulatedCrossSection::from_rows(&rows[..5]).is_err());
    }

    #[test]
    fn synthetic_kernels_are_normalized() {
        let sphere = SphereGrid::build(1);
        let a = forward_peaked_angular(&sphere, 0.6);
        let n = sphere.len();
        for d in 0..n {
            let s: f64 = (0..n).map(|dp| sphere.weights[dp] * a[dp * n + d]).sum();
            assert!((s - 1.0).abs() < 1e-13);
        }
    }

    proptest! {
        #[test]
        fn restricted_kernel_nonnegative(e in 1.05f64..6.0, r in 1.0f64..8.0, kappa in 1.1f64..3.0) {
            let ep = e * r;
            prop_assert!(restricted_kernel_value(&CrossSection::Moller, kappa, ep, e) >= 0.0);
        }

        #[test]
        fn mu_in_unit_interval(e in 0.01f64..50.0, r in 1.0f64..20.0) {
            let m = mu(e * r, e).unwrap();
            prop_assert!(m > 0.0 && m <= 1.0);
        }

        #[test]
        fn sigma_derivative_matches_difference(e in 1.1f64..20.0, s0 in 0.1f64..3.0) {
            let h = 1e-5 * e;
            let fd = (moller_sigma_hat(2, s0, e + h, e) - moller_sigma_hat(2, s0, e - h, e)) / (2.0 * h);
            let ex = moller_dsigma2_diag(s0, e);
            prop_assert!((fd - ex).abs() <= 1e-6 * ex.abs());
        }
    }
}
