//! Forward and adjoint solves of the coupled discrete system.
//!
//! Outer source iteration with block Gauss-Seidel over species. Charged species are
//! marched in energy (forward from E_m down, adjoint from E₀ up); each energy level is
//! solved by GMRES right-preconditioned with per-ordinate upwind sweeps. Photons use the
//! same level solver, where the sweep is exact.

use crate::error::{Error, Result};
use crate::fields::{BoundaryField, SpeciesField};
use crate::forms::{DiscreteField, TransportOperator};
use crate::linalg::gmres;
use crate::phase_space::Side;
use rayon::prelude::*;
use std::sync::Arc;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Adjoint,
}

/// How strictly the coefficient hypotheses are enforced before solving.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strictness {
    /// All analytic margins q₁, q₂, q₃, c₀ and the collision margin c strictly positive.
    #[default]
    Analytic,
    /// Only what the discrete scheme needs: a < 0, b ≤ 0, Σ ≥ 0, c ≥ 0 (c > 0 when K ≠ 0).
    Discrete,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Relative tolerance of the level solves as a fraction of `tol`.
    pub inner_factor: f64,
    pub inner_restart: usize,
    pub inner_max_iter: usize,
    pub strictness: Strictness,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 500,
            inner_factor: 1e-2,
            inner_restart: 40,
            inner_max_iter: 400,
            strictness: Strictness::Analytic,
        }
    }
}

/// Validated operator plus data.
#[derive(Clone, Debug)]
pub struct TransportProblem {
    pub op: Arc<TransportOperator>,
    /// f (forward) or f* (adjoint).
    pub source: SpeciesField,
    /// g on Γ₋ (forward) or g* on Γ₊ (adjoint); entries on the other side are ignored.
    pub boundary: BoundaryField,
    pub direction: Direction,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct SolveReport {
    pub direction: Direction,
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
    pub inner_iterations: usize,
    /// ‖ψ_j‖ in the weighted L² norm.
    pub flux_norms: [f64; 3],
    /// T² norm of the trace on the far side (Γ₊ forward, Γ₋ adjoint).
    pub exit_trace_norm: f64,
    pub wall_time_s: f64,
}

/// Checks the coefficient and collision hypotheses of an operator.
pub fn validate_operator(op: &TransportOperator, strictness: Strictness) -> Result<()> {
    let c = op.collision_margin();
    match strictness {
        Strictness::Analytic => {
            for coef in op.coefficients.iter().flatten() {
                coef.check_margins()?;
            }
            if !(c > 0.0) {
                return Err(Error::hypothesis("collision coercivity (Sigma - K >= c > 0)", c));
            }
        }
        Strictness::Discrete => {
            for coef in op.coefficients.iter().flatten() {
                if let Some(a) = coef.a.iter().copied().find(|a| !(*a < 0.0)) {
                    return Err(Error::hypothesis("energy drift negative (a < 0)", a));
                }
                if let Some(b) = coef.b.iter().copied().find(|b| !(*b <= 0.0)) {
                    return Err(Error::hypothesis("angular diffusion nonpositive (b <= 0)", b));
                }
            }
            for s in &op.sigma {
                if let Some(x) = s.iter().copied().find(|x| !(*x >= 0.0)) {
                    return Err(Error::hypothesis("total cross section nonnegative", x));
                }
            }
            if !(c >= 0.0) || (!op.collision.is_zero() && !(c > 0.0)) {
                return Err(Error::hypothesis("collision coercivity (Sigma - K >= c > 0)", c));
            }
        }
    }
    Ok(())
}

impl TransportProblem {
    pub fn new(op: Arc<TransportOperator>, source: SpeciesField, boundary: BoundaryField, direction: Direction, strictness: Strictness) -> Result<Self> {
        source.check_layout(op.layout())?;
        op.check_boundary(&boundary)?;
        if source.data.iter().chain(&boundary.data).any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite source or boundary data".into()));
        }
        validate_operator(&op, strictness)?;
        if direction == Direction::Forward {
            let bd = &op.space.boundary;
            let incompatible = (1..3).any(|s| (0..bd.len()).any(|f| (0..bd.n_dir).any(|d| bd.side(f, d) == Side::Inflow && boundary.get(s, 0, f, d) != 0.0)));
            if incompatible {
                log::warn!("charged inflow data is nonzero at E_m; the solution will not be continuous up to the boundary");
            }
        }
        Ok(TransportProblem {
            op,
            source,
            boundary,
            direction,
        })
    }

    pub fn forward(op: Arc<TransportOperator>, f: SpeciesField, g: BoundaryField, strictness: Strictness) -> Result<Self> {
        Self::new(op, f, g, Direction::Forward, strictness)
    }

    pub fn adjoint(op: Arc<TransportOperator>, fstar: SpeciesField, gstar: BoundaryField, strictness: Strictness) -> Result<Self> {
        Self::new(op, fstar, gstar, Direction::Adjoint, strictness)
    }

    fn adjoint_flag(&self) -> bool {
        self.direction == Direction::Adjoint
    }

    /// Right-hand side of the homogeneous-data system.
    pub fn rhs(&self) -> Result<SpeciesField> {
        if self.adjoint_flag() {
            self.op.adjoint_rhs(&self.source, &self.boundary)
        } else {
            self.op.forward_rhs(&self.source, &self.boundary)
        }
    }

    /// The solution as a field carrying its traces and endpoint slices.
    pub fn discrete_field(&self, psi: SpeciesField) -> DiscreteField {
        if self.adjoint_flag() {
            DiscreteField::adjoint(&self.op.space, psi, &self.boundary)
        } else {
            DiscreteField::forward(&self.op.space, psi, &self.boundary)
        }
    }
}

/// Upwind voxel orderings for the eight octants.
struct Sweeper {
    orders: [Vec<usize>; 8],
}

impl Sweeper {
    fn new(op: &TransportOperator) -> Self {
        let sp = &op.space.spatial;
        let ijk: Vec<[usize; 3]> = (0..sp.n_active()).map(|a| sp.unflatten(sp.grid_index(a))).collect();
        let orders = std::array::from_fn(|oct| {
            let mut idx: Vec<usize> = (0..ijk.len()).collect();
            idx.sort_by_key(|&a| {
                (0..3)
                    .map(|i| if oct >> i & 1 == 0 { ijk[a][i] as i64 } else { -(ijk[a][i] as i64) })
                    .sum::<i64>()
            });
            idx
        });
        Sweeper { orders }
    }

    /// Octant whose ordering visits upwind (or, for the adjoint, downwind) cells first.
    fn octant(omega: [f64; 3], adjoint: bool) -> usize {
        (0..3).fold(0, |o, i| {
            let positive = omega[i] >= 0.0;
            if positive == adjoint {
                o | 1 << i
            } else {
                o
            }
        })
    }

    /// Solves (streaming + diag) x = r direction by direction.
    fn sweep(&self, op: &TransportOperator, diag: &[f64], r: &[f64], x: &mut [f64], adjoint: bool) {
        let nd = op.space.sphere.len();
        let sp = &op.space.spatial;
        let cols: Vec<Vec<f64>> = (0..nd)
            .into_par_iter()
            .map(|d| {
                let (_, axes) = op.stream_coeffs(d);
                let order = &self.orders[Self::octant(op.space.sphere.nodes[d], adjoint)];
                let mut col = vec![0.0; sp.n_active()];
                for &v in order {
                    let nb = sp.neighbors(v);
                    let mut acc = r[v * nd + d];
                    for &(_, c, up, down) in axes {
                        if let crate::phase_space::Neighbor::Voxel(u) = nb[if adjoint { down } else { up }] {
                            acc += c * col[u];
                        }
                    }
                    col[v] = acc / diag[v * nd + d];
                }
                col
            })
            .collect();
        for (d, col) in cols.iter().enumerate() {
            for (v, val) in col.iter().enumerate() {
                x[v * nd + d] = *val;
            }
        }
    }
}

/// Solves the problem from a zero initial guess.
pub fn solve(problem: &TransportProblem, opts: &SolverOptions) -> Result<(SpeciesField, SolveReport)> {
    solve_with_guess(problem, opts, None)
}

pub fn solve_forward(op: Arc<TransportOperator>, f: &SpeciesField, g: &BoundaryField, opts: &SolverOptions) -> Result<(SpeciesField, SolveReport)> {
    let p = TransportProblem::forward(op, f.clone(), g.clone(), opts.strictness)?;
    solve(&p, opts)
}

pub fn solve_adjoint(op: Arc<TransportOperator>, fstar: &SpeciesField, gstar: &BoundaryField, opts: &SolverOptions) -> Result<(SpeciesField, SolveReport)> {
    let p = TransportProblem::adjoint(op, fstar.clone(), gstar.clone(), opts.strictness)?;
    solve(&p, opts)
}

pub fn solve_with_guess(problem: &TransportProblem, opts: &SolverOptions, guess: Option<&SpeciesField>) -> Result<(SpeciesField, SolveReport)> {
    if !(opts.tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {}", opts.tol)));
    }
    let start = Instant::now();
    let op = &*problem.op;
    let ly = op.layout();
    let adjoint = problem.adjoint_flag();
    let rhs = problem.rhs()?;
    let rhs_norm = op.norm(&rhs);
    let mut psi = match guess {
        Some(g) => {
            g.check_layout(ly)?;
            g.clone()
        }
        None => SpeciesField::zeros(ly),
    };
    let mut history = Vec::new();
    let mut inner_total = 0;
    let residual = |psi: &SpeciesField| -> Result<f64> {
        let a = if adjoint { op.apply_adjoint(psi)? } else { op.apply(psi)? };
        let mut r = rhs.clone();
        r.axpy(-1.0, &a);
        Ok(op.norm(&r) / rhs_norm)
    };
    if rhs_norm == 0.0 {
        psi = SpeciesField::zeros(ly);
        return Ok((psi.clone(), report(problem, &psi, 0, 0.0, history, 0, start)));
    }
    if guess.is_some() {
        let r0 = residual(&psi)?;
        if r0 <= opts.tol {
            return Ok((psi.clone(), report(problem, &psi, 0, r0, vec![r0], 0, start)));
        }
    }

    let sweeper = Sweeper::new(op);
    let species_order: [usize; 3] = if adjoint { [2, 1, 0] } else { [0, 1, 2] };
    let inner_tol = (opts.inner_factor * opts.tol).max(1e-14);
    let nd = ly.n_dir;
    let lvl = ly.level();
    let mut b = vec![0.0; lvl];
    let mut diag = vec![0.0; lvl];
    let mut x = vec![0.0; lvl];
    for it in 1..=opts.max_iter {
        for &s in &species_order {
            let levels: Box<dyn Iterator<Item = usize>> = if adjoint { Box::new((0..ly.n_e).rev()) } else { Box::new(0..ly.n_e) };
            for e in levels {
                b.copy_from_slice(rhs.level(s, e));
                if adjoint {
                    op.collision.apply_adjoint_level(&psi, s, e, true, &mut b);
                } else {
                    op.collision.apply_level(&psi, s, e, true, &mut b);
                }
                let nb = if adjoint { e + 1 } else { e.wrapping_sub(1) };
                let charged = op.is_charged(s);
                for v in 0..ly.n_vox {
                    let base = op.energy_diag(s, e, v) + op.sigma[s][e * ly.n_vox + v] - op.collision.self_diagonal(s, e, v);
                    for d in 0..nd {
                        diag[v * nd + d] = base + op.stream_coeffs(d).0 + op.angular_diag(s, e, v, d);
                    }
                    if charged && nb < ly.n_e {
                        let cp = op.energy_coupling(s, e, v, adjoint);
                        let src = &psi.level(s, nb)[v * nd..(v + 1) * nd];
                        for d in 0..nd {
                            b[v * nd + d] -= cp * src[d];
                        }
                    }
                }
                x.copy_from_slice(psi.level(s, e));
                let stats = gmres(
                    |u, out| op.level_apply(s, e, u, out, adjoint, true),
                    |r, z| sweeper.sweep(op, &diag, r, z, adjoint),
                    &b,
                    &mut x,
                    inner_tol,
                    opts.inner_restart,
                    opts.inner_max_iter,
                );
                inner_total += stats.iterations;
                if !stats.converged {
                    log::debug!("level solve s={s} e={e} stopped at {:.3e}", stats.residual);
                }
                psi.level_mut(s, e).copy_from_slice(&x);
            }
        }
        let r = residual(&psi)?;
        history.push(r);
        log::debug!("outer iteration {it}: relative residual {r:.3e}");
        if !r.is_finite() {
            break;
        }
        if r <= opts.tol {
            return Ok((psi.clone(), report(problem, &psi, it, r, history, inner_total, start)));
        }
    }
    Err(Error::NonConvergence {
        iterations: history.len(),
        residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

fn report(problem: &TransportProblem, psi: &SpeciesField, iterations: usize, residual: f64, history: Vec<f64>, inner: usize, start: Instant) -> SolveReport {
    let op = &problem.op;
    let flux_norms = std::array::from_fn(|s| {
        let mut one = SpeciesField::zeros(psi.layout);
        one.species_mut(s).copy_from_slice(psi.species(s));
        op.norm(&one)
    });
    let field = problem.discrete_field(psi.clone());
    let exit = if problem.adjoint_flag() { Side::Inflow } else { Side::Outflow };
    SolveReport {
        direction: problem.direction,
        iterations,
        residual,
        history,
        inner_iterations: inner,
        flux_norms,
        exit_trace_norm: op.boundary_inner(&field.trace, &field.trace, Some(exit)).sqrt(),
        wall_time_s: start.elapsed().as_secs_f64(),
    }
}

/// ‖ψ‖_ℋ / (‖f‖ + ‖g‖_{T²(Γ₋)}) of a forward solution.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct AprioriRatio {
    pub ratio: f64,
    /// Set when the data vanish and the ratio is undefined (reported as 0).
    pub zero_data: bool,
}

pub fn apriori_ratio(op: &TransportOperator, psi: &SpeciesField, f: &SpeciesField, g: &BoundaryField) -> AprioriRatio {
    let data = op.norm(f) + op.boundary_inner(g, g, Some(Side::Inflow)).sqrt();
    if data == 0.0 {
        return AprioriRatio { ratio: 0.0, zero_data: true };
    }
    let field = DiscreteField::forward(&op.space, psi.clone(), g);
    AprioriRatio {
        ratio: op.norm_h(&field) / data,
        zero_data: false,
    }
}
