//! Restricted collision operators of the three kernel varieties and their adjoints.
//!
//! The adjoint is taken in the discrete L² inner product with weights
//! `V · w_d · w_e`, so `⟨Kψ, φ⟩ = ⟨ψ, K*φ⟩` holds to rounding.

use crate::error::{Error, Result};
use crate::fields::{Layout, SpeciesField};
use crate::linalg::{mat_vec, Mat3, Vec3};
use crate::phase_space::{EnergyGrid, SphereGrid};
use crate::xsec::{mu, mu_sym, CoupledKernelSet, KernelData, KernelEntry, RestrictedKernel};
use rayon::prelude::*;
use std::f64::consts::PI;

pub const DEFAULT_CURVE_SAMPLES: usize = 16;

/// Rotation R(ω) with R·e₃ = ω.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationFrame {
    pub matrix: Mat3,
}

/// Rodrigues rotation about e₃×ω taking e₃ to ω; ω = −e₃ gives diag(1,−1,−1).
pub fn rotation_to(omega: Vec3) -> RotationFrame {
    let [x, y, c] = omega;
    let s2 = x * x + y * y;
    if s2 == 0.0 {
        let m = if c > 0.0 {
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        } else {
            [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]
        };
        return RotationFrame { matrix: m };
    }
    // 1 + c computed without cancellation near the south pole
    let one_plus_c = if c >= 0.0 { 1.0 + c } else { s2 / (1.0 - c) };
    let f = 1.0 / one_plus_c;
    // v = e3 × ω = (−y, x, 0); R = I + [v]× + [v]×² / (1 + c)
    RotationFrame {
        matrix: [[1.0 - f * x * x, -f * x * y, x], [-f * x * y, 1.0 - f * y * y, y], [-x, -y, 1.0 - f * s2]],
    }
}

impl RotationFrame {
    pub fn apply(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.matrix, v)
    }
}

/// Point of the cone ω′·ω = μ at parameter s.
pub fn cone_point(mu: f64, frame: &RotationFrame, s: f64) -> Vec3 {
    let r = (1.0 - mu * mu).max(0.0).sqrt();
    frame.apply([r * s.cos(), r * s.sin(), mu])
}

/// γ(E′,E,ω)(s) on the Møller scattering cone.
pub fn curve_point(ep: f64, e: f64, omega: Vec3, s: f64) -> Result<Vec3> {
    let m = mu(ep, e)?;
    Ok(cone_point(m, &rotation_to(omega), s))
}

/// Aggregated interpolation stencils of the s-trapezoid over γ(E′,E,ω_d).
#[derive(Clone, Debug)]
struct CurveStencils {
    n_dir: usize,
    /// Pair slot per (e', e), or usize::MAX when unused.
    pair: Vec<usize>,
    offsets: Vec<usize>,
    nodes: Vec<u32>,
    weights: Vec<f64>,
}

impl CurveStencils {
    fn build(sphere: &SphereGrid, grid: &EnergyGrid, used: &[bool], n_s: usize) -> Self {
        let n_e = grid.len();
        let n_dir = sphere.len();
        let frames: Vec<RotationFrame> = sphere.nodes.iter().map(|w| rotation_to(*w)).collect();
        let mut pair = vec![usize::MAX; n_e * n_e];
        let mut pairs = Vec::new();
        for (k, u) in used.iter().enumerate() {
            if *u {
                pair[k] = pairs.len();
                pairs.push((k / n_e, k % n_e));
            }
        }
        let ds = 2.0 * PI / n_s as f64;
        let per_pair: Vec<Vec<Vec<(u32, f64)>>> = pairs
            .par_iter()
            .map(|&(ep, e)| {
                let m = mu_sym(grid.levels[ep], grid.levels[e]);
                (0..n_dir)
                    .map(|d| {
                        if m >= 1.0 {
                            return vec![(d as u32, 2.0 * PI)];
                        }
                        let mut acc: Vec<(u32, f64)> = Vec::new();
                        for i in 0..n_s {
                            let p = cone_point(m, &frames[d], i as f64 * ds);
                            for (n, w) in sphere.interpolation_stencil(p) {
                                if w == 0.0 {
                                    continue;
                                }
                                match acc.iter_mut().find(|(a, _)| *a as usize == n) {
                                    Some(slot) => slot.1 += ds * w,
                                    None => acc.push((n as u32, ds * w)),
                                }
                            }
                        }
                        acc.sort_by_key(|x| x.0);
                        acc
                    })
                    .collect()
            })
            .collect();
        let mut offsets = vec![0];
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for lists in per_pair {
            for list in lists {
                for (n, w) in list {
                    nodes.push(n);
                    weights.push(w);
                }
                offsets.push(nodes.len());
            }
        }
        CurveStencils {
            n_dir,
            pair,
            offsets,
            nodes,
            weights,
        }
    }

    #[inline]
    fn get(&self, n_e: usize, ep: usize, e: usize, d: usize) -> (&[u32], &[f64]) {
        let p = self.pair[ep * n_e + e];
        let k = p * self.n_dir + d;
        let (a, b) = (self.offsets[k], self.offsets[k + 1]);
        (&self.nodes[a..b], &self.weights[a..b])
    }
}

/// Matrix-free coupled collision operator K_r and its adjoint.
#[derive(Clone, Debug)]
pub struct CollisionOperator {
    pub kernels: CoupledKernelSet,
    pub layout: Layout,
    pub n_s: usize,
    sphere_weights: Vec<f64>,
    energy_weights: Vec<f64>,
    stencils: Option<CurveStencils>,
}

impl CollisionOperator {
    pub fn new(kernels: CoupledKernelSet, sphere: &SphereGrid, grid: &EnergyGrid, n_s: usize) -> Result<Self> {
        kernels.validate()?;
        if kernels.n_e != grid.len() || kernels.n_dir != sphere.len() {
            return Err(Error::Shape("kernel set does not match the grids".into()));
        }
        if n_s < 4 {
            return Err(Error::Invalid(format!("need at least 4 curve samples, got {n_s}")));
        }
        let n_e = grid.len();
        let mut used = vec![false; n_e * n_e];
        for entry in kernels.entries.iter().flatten().flatten() {
            if let KernelData::Curve { table } = &entry.data {
                for (u, t) in used.iter_mut().zip(table) {
                    *u |= *t != 0.0;
                }
            }
        }
        let stencils = used.iter().any(|u| *u).then(|| CurveStencils::build(sphere, grid, &used, n_s));
        Ok(CollisionOperator {
            layout: Layout::new(n_e, kernels.n_vox, sphere.len()),
            kernels,
            n_s,
            sphere_weights: sphere.weights.clone(),
            energy_weights: grid.weights.clone(),
            stencils,
        })
    }

    /// Single-species operator for one restricted kernel of the curve variety.
    pub fn restricted(kernel: &RestrictedKernel, species: usize, sphere: &SphereGrid, grid: &EnergyGrid, n_s: usize) -> Result<Self> {
        let mut set = CoupledKernelSet::empty(grid.len(), kernel.scale.len(), sphere.len());
        set.set(species, species, KernelEntry::curve(kernel));
        Self::new(set, sphere, grid, n_s)
    }

    pub fn is_zero(&self) -> bool {
        self.kernels.is_zero()
    }

    /// Accumulates (Kψ)_j at energy level `e` into `out` (one level, n_vox·n_dir).
    /// With `implicit_self` the same-species curve term at E′ = E is left out; see
    /// [`CollisionOperator::self_diagonal`].
    pub fn apply_level(&self, psi: &SpeciesField, j: usize, e: usize, implicit_self: bool, out: &mut [f64]) {
        let ly = self.layout;
        let (nv, nd, ne) = (ly.n_vox, ly.n_dir, ly.n_e);
        let we = &self.energy_weights;
        let wd = &self.sphere_weights;
        let mut tmp = vec![0.0; nd];
        for k in 0..3 {
            let Some(entry) = &self.kernels.entries[k][j] else { continue };
            let src = psi.species(k);
            match &entry.data {
                KernelData::Full { angular, energy } => {
                    for v in 0..nv {
                        let sc = entry.scale[v];
                        if sc == 0.0 {
                            continue;
                        }
                        tmp.iter_mut().for_each(|t| *t = 0.0);
                        for ep in 0..ne {
                            let c = we[ep] * energy[ep * ne + e];
                            if c == 0.0 {
                                continue;
                            }
                            let row = &src[ly.idx(ep, v, 0)..ly.idx(ep, v, 0) + nd];
                            for (t, x) in tmp.iter_mut().zip(row) {
                                *t += c * x;
                            }
                        }
                        angular_apply(angular, wd, &tmp, sc, &mut out[v * nd..(v + 1) * nd]);
                    }
                }
                KernelData::EnergyLocal { angular, profile } => {
                    for v in 0..nv {
                        let sc = entry.scale[v] * profile[e];
                        if sc == 0.0 {
                            continue;
                        }
                        let row = &src[ly.idx(e, v, 0)..ly.idx(e, v, 0) + nd];
                        angular_apply(angular, wd, row, sc, &mut out[v * nd..(v + 1) * nd]);
                    }
                }
                KernelData::Curve { table } => {
                    let st = self.stencils.as_ref();
                    for ep in 0..ne {
                        let t = table[ep * ne + e];
                        if t == 0.0 || (implicit_self && k == j && ep == e) {
                            continue;
                        }
                        let st = st.expect("curve stencils built for nonzero tables");
                        let c = we[ep] * t;
                        for d in 0..nd {
                            let (nodes, ws) = st.get(ne, ep, e, d);
                            for v in 0..nv {
                                let base = ly.idx(ep, v, 0);
                                let mut s = 0.0;
                                for (n, w) in nodes.iter().zip(ws) {
                                    s += w * src[base + *n as usize];
                                }
                                out[v * nd + d] += entry.scale[v] * c * s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates (K*φ)_k at energy level `e` into `out`.
    pub fn apply_adjoint_level(&self, phi: &SpeciesField, k: usize, e: usize, implicit_self: bool, out: &mut [f64]) {
        let ly = self.layout;
        let (nv, nd, ne) = (ly.n_vox, ly.n_dir, ly.n_e);
        let we = &self.energy_weights;
        let wd = &self.sphere_weights;
        let mut tmp = vec![0.0; nd];
        for j in 0..3 {
            let Some(entry) = &self.kernels.entries[k][j] else { continue };
            let src = phi.species(j);
            match &entry.data {
                KernelData::Full { angular, energy } => {
                    for v in 0..nv {
                        let sc = entry.scale[v];
                        if sc == 0.0 {
                            continue;
                        }
                        tmp.iter_mut().for_each(|t| *t = 0.0);
                        for eo in 0..ne {
                            let c = we[eo] * energy[e * ne + eo];
                            if c == 0.0 {
                                continue;
                            }
                            let row = &src[ly.idx(eo, v, 0)..ly.idx(eo, v, 0) + nd];
                            for (t, x) in tmp.iter_mut().zip(row) {
                                *t += c * x;
                            }
                        }
                        angular_apply_transposed(angular, wd, &tmp, sc, &mut out[v * nd..(v + 1) * nd]);
                    }
                }
                KernelData::EnergyLocal { angular, profile } => {
                    for v in 0..nv {
                        let sc = entry.scale[v] * profile[e];
                        if sc == 0.0 {
                            continue;
                        }
                        let row = &src[ly.idx(e, v, 0)..ly.idx(e, v, 0) + nd];
                        angular_apply_transposed(angular, wd, row, sc, &mut out[v * nd..(v + 1) * nd]);
                    }
                }
                KernelData::Curve { table } => {
                    let st = self.stencils.as_ref();
                    for eo in 0..ne {
                        let t = table[e * ne + eo];
                        if t == 0.0 || (implicit_self && k == j && eo == e) {
                            continue;
                        }
                        let st = st.expect("curve stencils built for nonzero tables");
                        let c = we[eo] * t;
                        for d in 0..nd {
                            let (nodes, ws) = st.get(ne, e, eo, d);
                            for v in 0..nv {
                                let x = entry.scale[v] * c * wd[d] * src[ly.idx(eo, v, d)];
                                if x == 0.0 {
                                    continue;
                                }
                                for (n, w) in nodes.iter().zip(ws) {
                                    out[v * nd + *n as usize] += w * x / wd[*n as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Coefficient of ψ_j(x,ω,E) in (K ψ)_j(x,ω,E) from the same-species curve term at
    /// E′ = E; identical for K and K*.
    pub fn self_diagonal(&self, j: usize, e: usize, v: usize) -> f64 {
        match &self.kernels.entries[j][j] {
            Some(KernelEntry {
                data: KernelData::Curve { table },
                scale,
            }) => 2.0 * PI * scale[v] * self.energy_weights[e] * table[e * self.layout.n_e + e],
            _ => 0.0,
        }
    }

    fn apply_impl(&self, psi: &SpeciesField, adjoint: bool) -> Result<SpeciesField> {
        psi.check_layout(self.layout)?;
        let ly = self.layout;
        let lvl = ly.level();
        let mut out = SpeciesField::zeros(ly);
        out.data.par_chunks_mut(lvl).enumerate().for_each(|(i, chunk)| {
            let (s, e) = (i / ly.n_e, i % ly.n_e);
            if adjoint {
                self.apply_adjoint_level(psi, s, e, false, chunk);
            } else {
                self.apply_level(psi, s, e, false, chunk);
            }
        });
        Ok(out)
    }

    pub fn apply(&self, psi: &SpeciesField) -> Result<SpeciesField> {
        self.apply_impl(psi, false)
    }

    pub fn apply_adjoint(&self, phi: &SpeciesField) -> Result<SpeciesField> {
        self.apply_impl(phi, true)
    }

    /// Discrete Schur bounds: maxima of K·1 and K*·1.
    pub fn schur_bounds(&self) -> (f64, f64) {
        let ones = SpeciesField::filled(self.layout, 1.0);
        let r = self.apply(&ones).expect("layout matches");
        let c = self.apply_adjoint(&ones).expect("layout matches");
        (r.max_abs(), c.max_abs())
    }

    /// min over species and phase points of Σ_j − max(K·1, K*·1); Σ per species is
    /// indexed e * n_vox + v.
    pub fn coercivity_margin(&self, sigma: &[Vec<f64>; 3]) -> f64 {
        let ly = self.layout;
        let ones = SpeciesField::filled(ly, 1.0);
        let r = self.apply(&ones).expect("layout matches");
        let c = self.apply_adjoint(&ones).expect("layout matches");
        let mut m = f64::INFINITY;
        for s in 0..3 {
            for e in 0..ly.n_e {
                for v in 0..ly.n_vox {
                    let sg = sigma[s][e * ly.n_vox + v];
                    for d in 0..ly.n_dir {
                        let i = ly.idx(e, v, d);
                        m = m.min(sg - r.species(s)[i].max(c.species(s)[i]));
                    }
                }
            }
        }
        m
    }

    /// Power-iteration estimate of ‖K‖ in the weighted L² norm.
    pub fn norm_estimate(&self, iterations: usize, seed_field: &SpeciesField, weights: &[f64]) -> Result<f64> {
        let wnorm = |f: &SpeciesField| -> f64 {
            let b = weights.len();
            f.data.iter().enumerate().map(|(i, x)| weights[i % b] * x * x).sum::<f64>().sqrt()
        };
        let mut x = seed_field.clone();
        let n0 = wnorm(&x);
        if n0 == 0.0 {
            return Ok(0.0);
        }
        x = x.scaled(1.0 / n0);
        let mut est = 0.0;
        for _ in 0..iterations {
            let y = self.apply(&x)?;
            est = wnorm(&y);
            if est == 0.0 {
                return Ok(0.0);
            }
            let z = self.apply_adjoint(&y)?;
            let nz = wnorm(&z);
            if nz == 0.0 {
                break;
            }
            x = z.scaled(1.0 / nz);
        }
        Ok(est)
    }
}

fn angular_apply(angular: &[f64], wd: &[f64], src: &[f64], scale: f64, out: &mut [f64]) {
    let nd = wd.len();
    for (dp, x) in src.iter().enumerate() {
        let c = scale * wd[dp] * x;
        if c == 0.0 {
            continue;
        }
        let row = &angular[dp * nd..(dp + 1) * nd];
        for (o, a) in out.iter_mut().zip(row) {
            *o += c * a;
        }
    }
}

fn angular_apply_transposed(angular: &[f64], wd: &[f64], src: &[f64], scale: f64, out: &mut [f64]) {
    let nd = wd.len();
    for (dp, o) in out.iter_mut().enumerate() {
        let row = &angular[dp * nd..(dp + 1) * nd];
        let s: f64 = row.iter().zip(src).zip(wd).map(|((a, x), w)| a * x * w).sum();
        *o += scale * s;
    }
}

fn single_species(layout: Layout, psi: &[f64]) -> Result<SpeciesField> {
    if psi.len() != layout.block() {
        return Err(Error::Shape(format!("field has {} entries, expected {}", psi.len(), layout.block())));
    }
    let mut f = SpeciesField::zeros(layout);
    f.species_mut(0).copy_from_slice(psi);
    Ok(f)
}

fn apply_single(op: &CollisionOperator, psi: &[f64]) -> Result<Vec<f64>> {
    let f = single_species(op.layout, psi)?;
    Ok(op.apply(&f)?.species(0).to_vec())
}

/// Full variety: σ(ω′,ω,E′,E) = angular[d'·n+d]·energy[e'·n_e+e] scaled per voxel.
pub fn apply_k1(sphere: &SphereGrid, grid: &EnergyGrid, angular: Vec<f64>, energy: Vec<f64>, scale: Vec<f64>, psi: &[f64]) -> Result<Vec<f64>> {
    let mut set = CoupledKernelSet::empty(grid.len(), scale.len(), sphere.len());
    set.set(
        0,
        0,
        KernelEntry {
            data: KernelData::Full { angular, energy },
            scale,
        },
    );
    apply_single(&CollisionOperator::new(set, sphere, grid, DEFAULT_CURVE_SAMPLES)?, psi)
}

/// Energy-local variety: σ(ω′,ω,E) = angular[d'·n+d]·profile[e] scaled per voxel.
pub fn apply_k2(sphere: &SphereGrid, grid: &EnergyGrid, angular: Vec<f64>, profile: Vec<f64>, scale: Vec<f64>, psi: &[f64]) -> Result<Vec<f64>> {
    let mut set = CoupledKernelSet::empty(grid.len(), scale.len(), sphere.len());
    set.set(
        0,
        0,
        KernelEntry {
            data: KernelData::EnergyLocal { angular, profile },
            scale,
        },
    );
    apply_single(&CollisionOperator::new(set, sphere, grid, DEFAULT_CURVE_SAMPLES)?, psi)
}

/// Curve variety with a restricted Møller kernel and `n_s` samples per cone.
pub fn apply_k3(kernel: &RestrictedKernel, sphere: &SphereGrid, grid: &EnergyGrid, psi: &[f64], n_s: usize) -> Result<Vec<f64>> {
    apply_single(&CollisionOperator::restricted(kernel, 0, sphere, grid, n_s)?, psi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{det_mat, dot, mat_mul, norm, transpose};
    use crate::xsec::{downscatter_energy, forward_peaked_angular, MollerData};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_dir(rng: &mut ChaCha8Rng) -> Vec3 {
        loop {
            let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let n = norm(p);
            if n > 0.1 && n < 1.0 {
                return crate::linalg::scale(p, 1.0 / n);
            }
        }
    }

    fn is_rotation(m: &Mat3) -> bool {
        let p = mat_mul(&transpose(m), m);
        (0..3).all(|i| (0..3).all(|j| (p[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12)) && (det_mat(m) - 1.0).abs() < 1e-12
    }

    #[test]
    fn rotation_special_cases() {
        assert_eq!(rotation_to([0.0, 0.0, 1.0]).matrix, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(rotation_to([0.0, 0.0, -1.0]).matrix, [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]);
        let r = rotation_to([1.0, 0.0, 0.0]);
        assert!(is_rotation(&r.matrix));
        let e = r.apply([0.0, 0.0, 1.0]);
        assert!((e[0] - 1.0).abs() < 1e-15 && e[1].abs() < 1e-15 && e[2].abs() < 1e-15);
    }

    #[test]
    fn rotation_maps_pole_to_random_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..1000 {
            let mut w = rand_dir(&mut rng);
            if i % 100 == 0 {
                w = crate::linalg::normalize([1e-9, -2e-9, -1.0]);
            }
            let r = rotation_to(w);
            assert!(is_rotation(&r.matrix));
            let e = r.apply([0.0, 0.0, 1.0]);
            assert!(norm(crate::linalg::sub(e, w)) <= 1e-12);
        }
    }

    #[test]
    fn curve_points_lie_on_cone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let w = rand_dir(&mut rng);
            let e = rng.gen_range(1.1..5.0);
            let ep = e * rng.gen_range(1.0..3.0);
            let s = rng.gen_range(0.0..2.0 * PI);
            let p = curve_point(ep, e, w, s).unwrap();
            assert!((norm(p) - 1.0).abs() < 1e-12);
            assert!((dot(p, w) - mu(ep, e).unwrap()).abs() < 1e-12);
        }
        let w = normalize3([0.3, -0.4, 0.5]);
        for s in [0.0, 1.0, 4.0] {
            let p = curve_point(2.0, 2.0, w, s).unwrap();
            assert!(norm(crate::linalg::sub(p, w)) < 1e-15);
        }
        let n = 64;
        let m = mu(5.0, 2.0).unwrap();
        let mut avg = [0.0; 3];
        for i in 0..n {
            let p = curve_point(5.0, 2.0, w, 2.0 * PI * i as f64 / n as f64).unwrap();
            avg = crate::linalg::add(avg, crate::linalg::scale(p, 1.0 / n as f64));
        }
        assert!(norm(crate::linalg::sub(avg, crate::linalg::scale(w, m))) < 1e-12);
    }

    fn normalize3(v: Vec3) -> Vec3 {
        crate::linalg::normalize(v)
    }

    fn setup(level: usize, n_e: usize, n_vox: usize) -> (SphereGrid, EnergyGrid) {
        let _ = n_vox;
        (SphereGrid::build(level), EnergyGrid::uniform(1.5, 6.0, n_e).unwrap())
    }

    fn moller_kernel(grid: &EnergyGrid, n_vox: usize) -> RestrictedKernel {
        let d = MollerData::new(vec![1.0; n_vox], 2.0, vec![0.0; n_vox * grid.len()]).unwrap();
        RestrictedKernel::build(&d, grid).unwrap()
    }

    #[test]
    fn k3_on_direction_independent_field() {
        let (sphere, grid) = setup(1, 5, 2);
        let k = moller_kernel(&grid, 2);
        let ly = Layout::new(grid.len(), 2, sphere.len());
        let mut psi = vec![0.0; ly.block()];
        for e in 0..ly.n_e {
            for v in 0..2 {
                for d in 0..ly.n_dir {
                    psi[ly.idx(e, v, d)] = 1.0 + e as f64 + 0.5 * v as f64;
                }
            }
        }
        let out = apply_k3(&k, &sphere, &grid, &psi, 16).unwrap();
        for e in 0..ly.n_e {
            for v in 0..2 {
                let want: f64 = (0..ly.n_e)
                    .map(|ep| 2.0 * PI * k.at(ep, e) * grid.weights[ep] * (1.0 + ep as f64 + 0.5 * v as f64))
                    .sum();
                for d in 0..ly.n_dir {
                    assert!((out[ly.idx(e, v, d)] - want).abs() < 1e-12 * want.max(1.0));
                }
            }
        }
        let zero = RestrictedKernel::from_table(ly.n_e, vec![0.0; ly.n_e * ly.n_e], vec![1.0; 2], grid.weights.clone());
        let z = apply_k3(&zero, &sphere, &grid, &psi, 16).unwrap();
        assert!(z.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn k3_matches_fine_quadrature_oracle() {
        let sphere = SphereGrid::build(0);
        let grid = EnergyGrid::uniform(1.5, 4.5, 3).unwrap();
        let k = moller_kernel(&grid, 1);
        let ly = Layout::new(3, 1, sphere.len());
        let mut psi = vec![0.0; ly.block()];
        for e in 0..3 {
            for d in 0..ly.n_dir {
                let w = sphere.nodes[d];
                psi[ly.idx(e, 0, d)] = (1.0 + w[0] + 0.5 * w[2] * w[1]).exp() * (1.0 + e as f64);
            }
        }
        let out = apply_k3(&k, &sphere, &grid, &psi, 512).unwrap();
        let ns = 10_000;
        for e in 0..3 {
            for d in 0..ly.n_dir {
                let mut want = 0.0;
                for ep in 0..3 {
                    let t = k.at(ep, e);
                    if t == 0.0 {
                        continue;
                    }
                    let lvl = &psi[ly.idx(ep, 0, 0)..ly.idx(ep, 0, 0) + ly.n_dir];
                    let mut s = 0.0;
                    for i in 0..ns {
                        let p = curve_point(grid.levels[ep], grid.levels[e], sphere.nodes[d], 2.0 * PI * i as f64 / ns as f64).unwrap();
                        s += sphere.interpolate(lvl, p);
                    }
                    want += grid.weights[ep] * t * s * 2.0 * PI / ns as f64;
                }
                let got = out[ly.idx(e, 0, d)];
                assert!((got - want).abs() <= 1e-4 * want.abs(), "e={e} d={d}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn k3_sample_refinement_decreases_differences() {
        let (sphere, grid) = setup(2, 4, 1);
        let k = moller_kernel(&grid, 1);
        let ly = Layout::new(grid.len(), 1, sphere.len());
        let psi: Vec<f64> = (0..ly.block())
            .map(|i| {
                let w = sphere.nodes[i % ly.n_dir];
                (w[0] + 2.0 * w[1] * w[2]).cos()
            })
            .collect();
        let r: Vec<Vec<f64>> = [8, 16, 32, 64].iter().map(|n| apply_k3(&k, &sphere, &grid, &psi, *n).unwrap()).collect();
        let diffs: Vec<f64> = r
            .windows(2)
            .map(|p| p[0].iter().zip(&p[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .collect();
        assert!(diffs[0] > diffs[1] && diffs[1] > diffs[2], "{diffs:?}");
    }

    #[test]
    fn k1_separable_and_k2_isotropic() {
        let (sphere, grid) = setup(1, 4, 2);
        let ly = Layout::new(grid.len(), 2, sphere.len());
        let nd = ly.n_dir;
        let u: Vec<f64> = sphere.nodes.iter().map(|w| 1.0 + w[0]).collect();
        let vv: Vec<f64> = sphere.nodes.iter().map(|w| 2.0 + w[2]).collect();
        let mut ang = vec![0.0; nd * nd];
        for dp in 0..nd {
            for d in 0..nd {
                ang[dp * nd + d] = u[dp] * vv[d];
            }
        }
        let eng = downscatter_energy(&grid, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let psi: Vec<f64> = (0..ly.block()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let out = apply_k1(&sphere, &grid, ang, eng.clone(), vec![1.0, 2.0], &psi).unwrap();
        for e in 0..ly.n_e {
            for v in 0..2 {
                let mut inner = 0.0;
                for ep in 0..ly.n_e {
                    for dp in 0..nd {
                        inner += grid.weights[ep] * eng[ep * ly.n_e + e] * sphere.weights[dp] * u[dp] * psi[ly.idx(ep, v, dp)];
                    }
                }
                for d in 0..nd {
                    let want = (1.0 + v as f64) * vv[d] * inner;
                    assert!((out[ly.idx(e, v, d)] - want).abs() < 1e-12 * want.abs().max(1.0));
                }
            }
        }
        let iso = vec![1.0 / (4.0 * PI); nd * nd];
        let out = apply_k2(&sphere, &grid, iso, vec![1.0; ly.n_e], vec![1.0; 2], &psi).unwrap();
        for e in 0..ly.n_e {
            for v in 0..2 {
                let lvl = &psi[ly.idx(e, v, 0)..ly.idx(e, v, 0) + nd];
                let avg = sphere.weighted_dot(lvl, &vec![1.0; nd]) / (4.0 * PI);
                for d in 0..nd {
                    assert!((out[ly.idx(e, v, d)] - avg).abs() < 1e-12);
                }
            }
        }
        let a = forward_peaked_angular(&sphere, 0.7);
        let ones = vec![1.0; ly.block()];
        let out = apply_k2(&sphere, &grid, a, vec![1.0; ly.n_e], vec![1.0; 2], &ones).unwrap();
        assert!(out.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    pub(crate) fn random_set(rng: &mut ChaCha8Rng, sphere: &SphereGrid, grid: &EnergyGrid, n_vox: usize) -> CoupledKernelSet {
        let mut set = CoupledKernelSet::empty(grid.len(), n_vox, sphere.len());
        let kernel = moller_kernel(grid, n_vox);
        for k in 0..3 {
            for j in 0..3 {
                let scale: Vec<f64> = (0..n_vox).map(|_| rng.gen_range(0.0..0.3)).collect();
                let entry = match (k + j + rng.gen_range(0..3)) % 4 {
                    0 => KernelEntry {
                        data: KernelData::Full {
                            angular: forward_peaked_angular(sphere, rng.gen_range(0.0..0.9)),
                            energy: downscatter_energy(grid, rng.gen_range(0.1..1.0)),
                        },
                        scale,
                    },
                    1 => KernelEntry {
                        data: KernelData::EnergyLocal {
                            angular: forward_peaked_angular(sphere, rng.gen_range(0.0..0.9)),
                            profile: (0..grid.len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
                        },
                        scale,
                    },
                    2 => KernelEntry {
                        data: KernelData::Curve { table: kernel.table.clone() },
                        scale,
                    },
                    _ => continue,
                };
                set.set(k, j, entry);
            }
        }
        set
    }

    fn weighted_inner(ly: Layout, sphere: &SphereGrid, grid: &EnergyGrid, a: &SpeciesField, b: &SpeciesField) -> f64 {
        let mut s = 0.0;
        for sp in 0..3 {
            for e in 0..ly.n_e {
                for v in 0..ly.n_vox {
                    for d in 0..ly.n_dir {
                        let i = ly.idx(e, v, d);
                        s += grid.weights[e] * sphere.weights[d] * a.species(sp)[i] * b.species(sp)[i];
                    }
                }
            }
        }
        s
    }

    #[test]
    fn coupled_adjoint_is_weighted_transpose() {
        let (sphere, grid) = setup(1, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let op = CollisionOperator::new(random_set(&mut rng, &sphere, &grid, 3), &sphere, &grid, 12).unwrap();
        let ly = op.layout;
        for _ in 0..50 {
            let mut a = SpeciesField::zeros(ly);
            let mut b = SpeciesField::zeros(ly);
            a.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
            b.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
            let lhs = weighted_inner(ly, &sphere, &grid, &op.apply(&a).unwrap(), &b);
            let rhs = weighted_inner(ly, &sphere, &grid, &a, &op.apply_adjoint(&b).unwrap());
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-3), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn level_application_matches_full_apply_and_self_diagonal() {
        let (sphere, grid) = setup(1, 4, 2);
        let k = moller_kernel(&grid, 2);
        let op = CollisionOperator::restricted(&k, 1, &sphere, &grid, 8).unwrap();
        let ly = op.layout;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut psi = SpeciesField::zeros(ly);
        psi.data.iter_mut().for_each(|x| *x = rng.gen_range(0.0..1.0));
        let full = op.apply(&psi).unwrap();
        for e in 0..ly.n_e {
            let mut out = vec![0.0; ly.level()];
            op.apply_level(&psi, 1, e, true, &mut out);
            for v in 0..ly.n_vox {
                for d in 0..ly.n_dir {
                    let i = v * ly.n_dir + d;
                    let with = out[i] + op.self_diagonal(1, e, v) * psi.level(1, e)[i];
                    assert!((with - full.level(1, e)[i]).abs() < 1e-12 * full.level(1, e)[i].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn norm_bounded_by_schur_constants_and_positivity() {
        let (sphere, grid) = setup(1, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let op = CollisionOperator::new(random_set(&mut rng, &sphere, &grid, 2), &sphere, &grid, 12).unwrap();
        let (m1, m2) = op.schur_bounds();
        let mut seed = SpeciesField::zeros(op.layout);
        seed.data.iter_mut().for_each(|x| *x = rng.gen_range(0.0..1.0));
        let w: Vec<f64> = (0..op.layout.block())
            .map(|i| {
                let e = i / op.layout.level();
                grid.weights[e] * sphere.weights[i % op.layout.n_dir]
            })
            .collect();
        let n = op.norm_estimate(100, &seed, &w).unwrap();
        assert!(n <= 2.0 * PI * (m1 * m2).sqrt() + 1e-8);
        assert!(n <= (m1 * m2).sqrt() * (1.0 + 1e-10));
        let out = op.apply(&seed).unwrap();
        assert!(out.data.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn application_is_linear() {
        let (sphere, grid) = setup(1, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = CollisionOperator::new(random_set(&mut rng, &sphere, &grid, 2), &sphere, &grid, 8).unwrap();
        let mut a = SpeciesField::zeros(op.layout);
        let mut b = SpeciesField::zeros(op.layout);
        a.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        b.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        let mut c = a.scaled(2.0);
        c.axpy(-3.0, &b);
        let lhs = op.apply(&c).unwrap();
        let mut rhs = op.apply(&a).unwrap().scaled(2.0);
        rhs.axpy(-3.0, &op.apply(&b).unwrap());
        for (x, y) in lhs.data.iter().zip(&rhs.data) {
            assert!((x - y).abs() < 1e-12 * x.abs().max(1.0));
        }
    }
}
