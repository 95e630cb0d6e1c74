//! Discrete transport operator, forward and adjoint bilinear forms, data functionals,
//! phase-space norms and the discrete Green identity.
//!
//! Streaming is first-order upwind finite volume per ordinate, the energy derivative is a
//! backward difference toward lower energy with the initial slice entering weakly, and
//! the angular term uses the symmetric sphere Laplacian. The adjoint operator is the
//! exact transpose in the weighted inner product `⟨u, v⟩_W = Σ V·w_d·w_e·u·v`.

use crate::collision::CollisionOperator;
use crate::error::{Error, Result};
use crate::fields::{BoundaryField, Layout, Species, SpeciesField};
use crate::phase_space::{Neighbor, PhaseSpace, Side, TANGENT_TOL};
use crate::xsec::{CoefficientField, Margins};
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

/// Per-direction upwind data for the streaming stencil.
#[derive(Clone, Debug)]
struct DirectionStencil {
    /// Σ_i |ω_i| / Δ_i.
    diag: f64,
    /// (axis, |ω_i|/Δ_i, upwind side, downwind side) for non-tangential axes.
    axes: Vec<(usize, f64, usize, usize)>,
}

/// The discrete operator `A = P_h + Σ − K` of the coupled system with homogeneous data.
#[derive(Clone, Debug)]
pub struct TransportOperator {
    pub space: Arc<PhaseSpace>,
    /// Energy drift and angular diffusion coefficients of the charged species.
    pub coefficients: [Option<CoefficientField>; 3],
    /// Σ_j indexed e * n_vox + v.
    pub sigma: [Vec<f64>; 3],
    pub collision: CollisionOperator,
    stencils: Vec<DirectionStencil>,
}

/// Field with boundary traces and energy-endpoint slices, as needed by the
/// Green identity and the phase-space norms.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteField {
    pub values: SpeciesField,
    /// Traces on every boundary (face, direction) pair.
    pub trace: BoundaryField,
    /// Slice at E_m per species, n_vox·n_dir entries each.
    pub e_max: [Vec<f64>; 3],
    /// Slice at E₀ per species.
    pub e_min: [Vec<f64>; 3],
}

impl DiscreteField {
    /// Forward convention: Γ₋ trace = g, Γ₊ trace = cell value, E_m slice = 0, E₀ slice =
    /// lowest level.
    pub fn forward(space: &PhaseSpace, values: SpeciesField, g: &BoundaryField) -> Self {
        Self::with_convention(space, values, g, Side::Inflow)
    }

    /// Adjoint convention: Γ₊ trace = g*, Γ₋ trace = cell value, E₀ slice = 0, E_m slice =
    /// highest level.
    pub fn adjoint(space: &PhaseSpace, values: SpeciesField, gstar: &BoundaryField) -> Self {
        Self::with_convention(space, values, gstar, Side::Outflow)
    }

    /// Traces and slices taken from the adjacent cell values everywhere.
    pub fn from_cells(space: &PhaseSpace, values: SpeciesField) -> Self {
        let zero = space.zero_boundary();
        let mut f = Self::with_convention(space, values, &zero, Side::Tangent);
        let ly = f.values.layout;
        for s in 0..3 {
            f.e_max[s] = f.values.level(s, 0).to_vec();
            f.e_min[s] = f.values.level(s, ly.n_e - 1).to_vec();
        }
        f
    }

    fn with_convention(space: &PhaseSpace, values: SpeciesField, data: &BoundaryField, data_side: Side) -> Self {
        let ly = values.layout;
        let bd = &space.boundary;
        let mut trace = space.zero_boundary();
        for s in 0..3 {
            for e in 0..ly.n_e {
                for (f, face) in bd.faces.iter().enumerate() {
                    for d in 0..ly.n_dir {
                        let side = bd.side(f, d);
                        let t = if side == data_side && side != Side::Tangent {
                            data.get(s, e, f, d)
                        } else {
                            values.species(s)[ly.idx(e, face.voxel, d)]
                        };
                        trace.set(s, e, f, d, t);
                    }
                }
            }
        }
        let zero = vec![0.0; ly.level()];
        let (e_max, e_min) = match data_side {
            Side::Inflow => (
                [zero.clone(), zero.clone(), zero.clone()],
                [0, 1, 2].map(|s| values.level(s, ly.n_e - 1).to_vec()),
            ),
            _ => ([0, 1, 2].map(|s| values.level(s, 0).to_vec()), [zero.clone(), zero.clone(), zero]),
        };
        DiscreteField { values, trace, e_max, e_min }
    }
}

impl TransportOperator {
    pub fn new(space: Arc<PhaseSpace>, coefficients: [Option<CoefficientField>; 3], sigma: [Vec<f64>; 3], collision: CollisionOperator) -> Result<Self> {
        let ly = space.layout();
        if collision.layout != ly {
            return Err(Error::Shape("collision operator does not match the phase space".into()));
        }
        for s in 0..3 {
            if sigma[s].len() != ly.n_e * ly.n_vox {
                return Err(Error::Shape(format!(
                    "Sigma of species {s} has {} entries, expected {}",
                    sigma[s].len(),
                    ly.n_e * ly.n_vox
                )));
            }
            let charged = Species::from_index(s).is_charged();
            match &coefficients[s] {
                Some(c) if !charged => {
                    let _ = c;
                    return Err(Error::Invalid("photons carry no energy drift coefficients".into()));
                }
                None if charged => return Err(Error::Invalid(format!("missing coefficients for species {s}"))),
                Some(c) if c.n_e != ly.n_e || c.n_vox != ly.n_vox => return Err(Error::Shape(format!("coefficients of species {s} do not match the grid"))),
                _ => {}
            }
        }
        if ly.n_e < 2 {
            return Err(Error::Invalid("need at least two energy levels".into()));
        }
        let h = space.spatial.spacing;
        let stencils = space
            .sphere
            .nodes
            .iter()
            .map(|w| {
                let mut diag = 0.0;
                let mut axes = Vec::new();
                for i in 0..3 {
                    if w[i].abs() <= TANGENT_TOL {
                        continue;
                    }
                    let c = w[i].abs() / h[i];
                    diag += c;
                    let (up, down) = if w[i] > 0.0 { (2 * i, 2 * i + 1) } else { (2 * i + 1, 2 * i) };
                    axes.push((i, c, up, down));
                }
                DirectionStencil { diag, axes }
            })
            .collect();
        Ok(TransportOperator {
            space,
            coefficients,
            sigma,
            collision,
            stencils,
        })
    }

    pub fn layout(&self) -> Layout {
        self.space.layout()
    }

    pub fn is_charged(&self, s: usize) -> bool {
        self.coefficients[s].is_some()
    }

    /// Upwind streaming of one level: `out += S ψ` (or `Sᵀ φ` when `adjoint`).
    pub fn streaming_level(&self, src: &[f64], out: &mut [f64], adjoint: bool) {
        let nd = self.space.sphere.len();
        let sp = &self.space.spatial;
        for v in 0..sp.n_active() {
            let nb = sp.neighbors(v);
            for (d, st) in self.stencils.iter().enumerate() {
                let mut acc = st.diag * src[v * nd + d];
                for &(_, c, up, down) in &st.axes {
                    let side = if adjoint { down } else { up };
                    if let Neighbor::Voxel(u) = nb[side] {
                        acc -= c * src[u * nd + d];
                    }
                }
                out[v * nd + d] += acc;
            }
        }
    }

    /// Streaming of one direction on one level, used by the sweeps.
    #[inline]
    pub(crate) fn stream_coeffs(&self, d: usize) -> (f64, &[(usize, f64, usize, usize)]) {
        let st = &self.stencils[d];
        (st.diag, &st.axes)
    }

    /// Boundary data as a volumetric source: `out += (1/V)|ω·ν|A·t` on the inflow part
    /// (forward) or the outflow part (adjoint).
    pub fn boundary_source_level(&self, data: &BoundaryField, s: usize, e: usize, out: &mut [f64], adjoint: bool) {
        let bd = &self.space.boundary;
        let nd = bd.n_dir;
        let vol = self.space.spatial.voxel_volume();
        let want = if adjoint { Side::Outflow } else { Side::Inflow };
        for (f, face) in bd.faces.iter().enumerate() {
            for d in 0..nd {
                if bd.side(f, d) == want {
                    let t = data.get(s, e, f, d);
                    if t != 0.0 {
                        out[face.voxel * nd + d] += bd.dot(f, d).abs() * face.area / vol * t;
                    }
                }
            }
        }
    }

    /// Diagonal of the energy difference at level e.
    #[inline]
    pub fn energy_diag(&self, s: usize, e: usize, v: usize) -> f64 {
        let Some(c) = &self.coefficients[s] else { return 0.0 };
        let en = &self.space.energy;
        let h = if e == 0 { en.weights[0] } else { en.steps[e - 1] };
        -c.at(&c.a, e, v) / h
    }

    /// Off-diagonal energy coupling: forward level e reads level e−1, adjoint level e reads
    /// level e+1.
    #[inline]
    pub fn energy_coupling(&self, s: usize, e: usize, v: usize, adjoint: bool) -> f64 {
        let Some(c) = &self.coefficients[s] else { return 0.0 };
        let en = &self.space.energy;
        if adjoint {
            if e + 1 >= en.len() {
                return 0.0;
            }
            en.weights[e + 1] / en.weights[e] * c.at(&c.a, e + 1, v) / en.steps[e]
        } else {
            if e == 0 {
                return 0.0;
            }
            c.at(&c.a, e, v) / en.steps[e - 1]
        }
    }

    /// `out += b·W⁻¹·lb·ψ` on one level (zero for photons).
    pub fn angular_level(&self, s: usize, e: usize, src: &[f64], out: &mut [f64]) {
        let Some(c) = &self.coefficients[s] else { return };
        let sphere = &self.space.sphere;
        let nd = sphere.len();
        for v in 0..self.space.spatial.n_active() {
            let b = c.at(&c.b, e, v);
            if b == 0.0 {
                continue;
            }
            let u = &src[v * nd..(v + 1) * nd];
            for d in 0..nd {
                let lu: f64 = sphere.lb_row(d).iter().map(|(j, x)| x * u[*j]).sum();
                out[v * nd + d] += b * lu / sphere.weights[d];
            }
        }
    }

    /// Diagonal of the angular term, (−b)·S_dd / w_d.
    #[inline]
    pub fn angular_diag(&self, s: usize, e: usize, v: usize, d: usize) -> f64 {
        let Some(c) = &self.coefficients[s] else { return 0.0 };
        let sphere = &self.space.sphere;
        c.at(&c.b, e, v) * sphere.lb_row(d)[0].1 / sphere.weights[d]
    }

    /// Level-local part of A: streaming, energy diagonal, angular, Σ and (optionally)
    /// minus the implicit collision self-diagonal.
    pub fn level_apply(&self, s: usize, e: usize, src: &[f64], out: &mut [f64], adjoint: bool, implicit_self: bool) {
        out.iter_mut().for_each(|x| *x = 0.0);
        self.streaming_level(src, out, adjoint);
        self.angular_level(s, e, src, out);
        let nd = self.space.sphere.len();
        for v in 0..self.space.spatial.n_active() {
            let mut c = self.energy_diag(s, e, v) + self.sigma[s][e * self.layout().n_vox + v];
            if implicit_self {
                c -= self.collision.self_diagonal(s, e, v);
            }
            for d in 0..nd {
                out[v * nd + d] += c * src[v * nd + d];
            }
        }
    }

    fn apply_impl(&self, psi: &SpeciesField, adjoint: bool) -> Result<SpeciesField> {
        let ly = self.layout();
        psi.check_layout(ly)?;
        let mut out = SpeciesField::zeros(ly);
        let lvl = ly.level();
        let nd = ly.n_dir;
        out.data.par_chunks_mut(lvl).enumerate().for_each(|(i, chunk)| {
            let (s, e) = (i / ly.n_e, i % ly.n_e);
            self.level_apply(s, e, psi.level(s, e), chunk, adjoint, false);
            let nb = if adjoint { e + 1 } else { e.wrapping_sub(1) };
            if self.is_charged(s) && nb < ly.n_e {
                let src = psi.level(s, nb);
                for v in 0..ly.n_vox {
                    let c = self.energy_coupling(s, e, v, adjoint);
                    for d in 0..nd {
                        chunk[v * nd + d] += c * src[v * nd + d];
                    }
                }
            }
            let mut k = vec![0.0; lvl];
            if adjoint {
                self.collision.apply_adjoint_level(psi, s, e, false, &mut k);
            } else {
                self.collision.apply_level(psi, s, e, false, &mut k);
            }
            for (o, x) in chunk.iter_mut().zip(&k) {
                *o -= x;
            }
        });
        Ok(out)
    }

    /// `A ψ` with homogeneous boundary and initial data.
    pub fn apply(&self, psi: &SpeciesField) -> Result<SpeciesField> {
        self.apply_impl(psi, false)
    }

    /// `A* φ = W⁻¹ Aᵀ W φ` with homogeneous data.
    pub fn apply_adjoint(&self, phi: &SpeciesField) -> Result<SpeciesField> {
        self.apply_impl(phi, true)
    }

    /// Right-hand side `f + (1/V)|ω·ν|A g` of the forward system `A ψ = rhs`.
    pub fn forward_rhs(&self, f: &SpeciesField, g: &BoundaryField) -> Result<SpeciesField> {
        self.rhs(f, g, false)
    }

    /// Right-hand side `f* + (1/V)(ω·ν)A g*` of the adjoint system.
    pub fn adjoint_rhs(&self, fstar: &SpeciesField, gstar: &BoundaryField) -> Result<SpeciesField> {
        self.rhs(fstar, gstar, true)
    }

    fn rhs(&self, f: &SpeciesField, g: &BoundaryField, adjoint: bool) -> Result<SpeciesField> {
        let ly = self.layout();
        f.check_layout(ly)?;
        self.check_boundary(g)?;
        let mut out = f.clone();
        for s in 0..3 {
            for e in 0..ly.n_e {
                self.boundary_source_level(g, s, e, out.level_mut(s, e), adjoint);
            }
        }
        Ok(out)
    }

    pub fn check_boundary(&self, g: &BoundaryField) -> Result<()> {
        let z = self.space.zero_boundary();
        if !z.same_shape(g) {
            return Err(Error::Shape("boundary data does not match the boundary faces".into()));
        }
        Ok(())
    }

    /// Weighted inner product over all species. Level sums are added in a fixed order so
    /// the result does not depend on the thread count.
    pub fn inner(&self, a: &SpeciesField, b: &SpeciesField) -> f64 {
        let ly = self.layout();
        let vol = self.space.spatial.voxel_volume();
        let we = &self.space.energy.weights;
        let wd = &self.space.sphere.weights;
        a.data
            .par_chunks(ly.level())
            .zip(b.data.par_chunks(ly.level()))
            .enumerate()
            .map(|(i, (x, y))| {
                let e = i % ly.n_e;
                let mut s = 0.0;
                for (k, (p, q)) in x.iter().zip(y).enumerate() {
                    s += wd[k % ly.n_dir] * p * q;
                }
                s * we[e] * vol
            })
            .collect::<Vec<f64>>()
            .into_iter()
            .sum()
    }

    pub fn norm(&self, a: &SpeciesField) -> f64 {
        self.inner(a, a).sqrt()
    }

    /// B(ψ, v) = ⟨A ψ, v⟩_W.
    pub fn bilinear(&self, psi: &SpeciesField, v: &SpeciesField) -> Result<f64> {
        Ok(self.inner(&self.apply(psi)?, v))
    }

    /// B*(ψ*, v) = ⟨A* ψ*, v⟩_W.
    pub fn bilinear_adjoint(&self, psistar: &SpeciesField, v: &SpeciesField) -> Result<f64> {
        Ok(self.inner(&self.apply_adjoint(psistar)?, v))
    }

    /// F(v) = ⟨f, v⟩ + ⟨g, γ₋(v)⟩_{T²(Γ₋)}.
    pub fn functional(&self, f: &SpeciesField, g: &BoundaryField, v: &SpeciesField) -> Result<f64> {
        Ok(self.inner(&self.forward_rhs(f, g)?, v))
    }

    /// F*(v) = ⟨f*, v⟩ + ⟨g*, γ₊(v)⟩_{T²(Γ₊)}.
    pub fn functional_adjoint(&self, fstar: &SpeciesField, gstar: &BoundaryField, v: &SpeciesField) -> Result<f64> {
        Ok(self.inner(&self.adjoint_rhs(fstar, gstar)?, v))
    }

    /// T² inner product of two boundary fields restricted to `side`.
    pub fn boundary_inner(&self, a: &BoundaryField, b: &BoundaryField, side: Option<Side>) -> f64 {
        let bd = &self.space.boundary;
        let mut s = 0.0;
        for sp in 0..3 {
            for e in 0..a.n_e {
                for f in 0..bd.len() {
                    for d in 0..bd.n_dir {
                        if side.is_none_or(|x| bd.side(f, d) == x) {
                            s += bd.t2_weight(f, d, e) * a.get(sp, e, f, d) * b.get(sp, e, f, d);
                        }
                    }
                }
            }
        }
        s
    }

    /// The differential part `P_h` (forward, using the field's inflow trace and E_m slice)
    /// or `P*_h` (adjoint, using the outflow trace and the E₀ slice).
    pub fn differential(&self, field: &DiscreteField, adjoint: bool) -> Result<SpeciesField> {
        let ly = self.layout();
        field.values.check_layout(ly)?;
        self.check_boundary(&field.trace)?;
        let nd = ly.n_dir;
        let en = &self.space.energy;
        let mut out = SpeciesField::zeros(ly);
        for s in 0..3 {
            for e in 0..ly.n_e {
                let src = field.values.level(s, e).to_vec();
                let mut lvl = vec![0.0; ly.level()];
                self.streaming_level(&src, &mut lvl, adjoint);
                self.angular_level(s, e, &src, &mut lvl);
                let mut bsrc = vec![0.0; ly.level()];
                self.boundary_source_level(&field.trace, s, e, &mut bsrc, adjoint);
                for (o, b) in lvl.iter_mut().zip(&bsrc) {
                    *o -= b;
                }
                if let Some(c) = &self.coefficients[s] {
                    let nb = if adjoint { e + 1 } else { e.wrapping_sub(1) };
                    for v in 0..ly.n_vox {
                        let dg = self.energy_diag(s, e, v);
                        let cp = self.energy_coupling(s, e, v, adjoint);
                        for d in 0..nd {
                            let i = v * nd + d;
                            let mut x = dg * src[i];
                            if nb < ly.n_e {
                                x += cp * field.values.level(s, nb)[i];
                            }
                            if !adjoint && e == 0 {
                                x += c.at(&c.a, 0, v) * field.e_max[s][i] / en.weights[0];
                            }
                            if adjoint && e == ly.n_e - 1 {
                                x += c.at(&c.a, e, v) * field.e_min[s][i] / en.weights[e];
                            }
                            lvl[i] += x;
                        }
                    }
                }
                out.level_mut(s, e).copy_from_slice(&lvl);
            }
        }
        Ok(out)
    }

    /// |⟨P_h ψ, ψ*⟩ − ⟨ψ, P*_h ψ*⟩ − ∫_Γ (ω·ν) ψ ψ* − a(E_m)ψψ*|_{E_m} + a(E₀)ψψ*|_{E₀}|.
    pub fn green_residual(&self, psi: &DiscreteField, psistar: &DiscreteField) -> Result<f64> {
        let lhs = self.inner(&self.differential(psi, false)?, &psistar.values) - self.inner(&psi.values, &self.differential(psistar, true)?);
        let ly = self.layout();
        let bd = &self.space.boundary;
        let mut rhs = 0.0;
        for s in 0..3 {
            for e in 0..ly.n_e {
                for f in 0..bd.len() {
                    for d in 0..ly.n_dir {
                        let c = bd.dot(f, d);
                        if c != 0.0 {
                            rhs += c.signum() * bd.t2_weight(f, d, e) * psi.trace.get(s, e, f, d) * psistar.trace.get(s, e, f, d);
                        }
                    }
                }
            }
            if let Some(c) = &self.coefficients[s] {
                let vol = self.space.spatial.voxel_volume();
                let wd = &self.space.sphere.weights;
                for v in 0..ly.n_vox {
                    let (am, a0) = (c.at(&c.a, 0, v), c.at(&c.a, ly.n_e - 1, v));
                    for d in 0..ly.n_dir {
                        let i = v * ly.n_dir + d;
                        rhs += vol * wd[d] * (am * psi.e_max[s][i] * psistar.e_max[s][i] - a0 * psi.e_min[s][i] * psistar.e_min[s][i]);
                    }
                }
            }
        }
        Ok((lhs - rhs).abs())
    }

    fn slice_norm2(&self, slice: &[f64]) -> f64 {
        let vol = self.space.spatial.voxel_volume();
        let wd = &self.space.sphere.weights;
        slice.iter().enumerate().map(|(i, x)| vol * wd[i % wd.len()] * x * x).sum()
    }

    /// Squared components of the ℋ norm: (L², T²(Γ), endpoint slices, H¹(S)).
    pub fn norm_h_parts(&self, field: &DiscreteField) -> (f64, f64, f64, f64) {
        let ly = self.layout();
        let l2 = self.inner(&field.values, &field.values);
        let t2 = self.boundary_inner(&field.trace, &field.trace, None);
        let mut ends = 0.0;
        let mut h1 = 0.0;
        let vol = self.space.spatial.voxel_volume();
        for s in 0..3 {
            if !self.is_charged(s) {
                continue;
            }
            ends += self.slice_norm2(&field.e_max[s]) + self.slice_norm2(&field.e_min[s]);
            for e in 0..ly.n_e {
                let lvl = field.values.level(s, e);
                for v in 0..ly.n_vox {
                    h1 += vol * self.space.energy.weights[e] * self.space.sphere.h1_seminorm2(&lvl[v * ly.n_dir..(v + 1) * ly.n_dir]);
                }
            }
        }
        (l2, t2, ends, h1)
    }

    pub fn norm_h(&self, field: &DiscreteField) -> f64 {
        let (a, b, c, d) = self.norm_h_parts(field);
        (a + b + c + d).sqrt()
    }

    /// ℋ̂ norm: ℋ plus the discrete streaming and energy-derivative seminorms.
    pub fn norm_hhat(&self, field: &DiscreteField) -> Result<f64> {
        let ly = self.layout();
        let mut extra = SpeciesField::zeros(ly);
        for s in 0..3 {
            for e in 0..ly.n_e {
                let mut bsrc = vec![0.0; ly.level()];
                self.boundary_source_level(&field.trace, s, e, &mut bsrc, false);
                let out = extra.level_mut(s, e);
                self.streaming_level(field.values.level(s, e), out, false);
                for (o, b) in out.iter_mut().zip(&bsrc) {
                    *o -= b;
                }
            }
        }
        let mut de = 0.0;
        let vol = self.space.spatial.voxel_volume();
        let wd = &self.space.sphere.weights;
        let en = &self.space.energy;
        for s in 0..3 {
            if !self.is_charged(s) {
                continue;
            }
            for e in 1..ly.n_e {
                let (hi, lo) = (field.values.level(s, e - 1), field.values.level(s, e));
                for (i, (x, y)) in hi.iter().zip(lo).enumerate() {
                    let q = (x - y) / en.steps[e - 1];
                    de += vol * wd[i % ly.n_dir] * en.steps[e - 1] * q * q;
                }
            }
        }
        let h = self.norm_h(field);
        Ok((h * h + self.inner(&extra, &extra) + de).sqrt())
    }

    /// Weighted Schur margin c of Σ − K.
    pub fn collision_margin(&self) -> f64 {
        self.collision.coercivity_margin(&self.sigma)
    }

    /// Margins of the charged species combined (minimum over species).
    pub fn margins(&self) -> Option<Margins> {
        self.coefficients.iter().flatten().map(|c| c.margins).reduce(|a, b| Margins {
            q1: a.q1.min(b.q1),
            q2: a.q2.min(b.q2),
            q3: a.q3.min(b.q3),
            c0: a.c0.min(b.c0),
        })
    }

    /// Coercivity constant guaranteed by the discrete form:
    /// B(v,v) ≥ min{c, 1/2, q₂, q₃/4} ‖v‖²_ℋ for fields with cell-value traces and slices.
    /// Needs −a nondecreasing in E along the grid and a uniform energy grid; returns
    /// `None` when those fail.
    pub fn discrete_coercivity_constant(&self) -> Option<f64> {
        let c = self.collision_margin();
        let mut k = c.min(0.5);
        let en = &self.space.energy;
        let uniform = en.steps.iter().all(|h| (h - en.steps[0]).abs() <= 1e-12 * en.steps[0]);
        for coef in self.coefficients.iter().flatten() {
            if !uniform {
                return None;
            }
            for v in 0..coef.n_vox {
                for e in 1..coef.n_e {
                    if coef.at(&coef.a, e - 1, v) > coef.at(&coef.a, e, v) {
                        return None;
                    }
                }
            }
            let q2 = coef.b.iter().fold(f64::INFINITY, |m, b| m.min(-b));
            let q3 = (0..coef.n_vox).fold(f64::INFINITY, |m, v| m.min(-coef.at(&coef.a, 0, v)).min(-coef.at(&coef.a, coef.n_e - 1, v)));
            k = k.min(q2).min(q3 / 4.0);
        }
        Some(k)
    }

    /// Dense matrix of A (or A*) by columns, for tiny grids.
    pub fn dense(&self, adjoint: bool) -> Result<Vec<f64>> {
        let ly = self.layout();
        let n = 3 * ly.block();
        if n > 20_000 {
            return Err(Error::Invalid(format!("dense assembly refused for {n} unknowns")));
        }
        let cols: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut x = SpeciesField::zeros(ly);
                x.data[j] = 1.0;
                let y = if adjoint { self.apply_adjoint(&x) } else { self.apply(&x) };
                y.expect("layout matches").data
            })
            .collect();
        let mut m = vec![0.0; n * n];
        for (j, c) in cols.iter().enumerate() {
            for (i, x) in c.iter().enumerate() {
                m[i * n + j] = *x;
            }
        }
        Ok(m)
    }

    /// Writes the nonzeros of the dense operator as `row col value` lines.
    pub fn write_coo(&self, path: &Path, adjoint: bool) -> Result<()> {
        let m = self.dense(adjoint)?;
        let n = 3 * self.layout().block();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for i in 0..n {
            for j in 0..n {
                let x = m[i * n + j];
                if x != 0.0 {
                    writeln!(w, "{i} {j} {x:.17e}").map_err(|e| Error::io(path, e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
