//! Acceptance checks. Runs without the libtest harness so that every criterion prints
//! one pass/fail line; exits nonzero if any criterion fails.

use csda_core::collision::CollisionOperator;
use csda_core::dose_planner::{dose, Control, FixedPointOptions, Planner, Prescription};
use csda_core::fields::{BoundaryField, Layout, SpeciesField};
use csda_core::forms::{DiscreteField, TransportOperator};
use csda_core::hypersingular::kappa_consistency_report;
use csda_core::phase_space::{EnergyGrid, PhaseSpace, RegionLabel, Side, SpatialGrid, SphereGrid};
use csda_core::scenario::{Scenario, ScenarioParams};
use csda_core::solver::{solve_adjoint, solve_forward, SolverOptions, Strictness};
use csda_core::vcoords::{equivalence_residual, PointCoefficients, Shell, VelocityGrid};
use csda_core::xsec::{
    dmu_dep_diag, downscatter_energy, forward_peaked_angular, moller_dsigma2_diag, moller_sigma_hat, mu, CoefficientField, CoupledKernelSet, CrossSection,
    KernelData, KernelEntry, MollerData, RestrictedKernel,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

// Pinned tolerances.
const SCHUR_SLACK: f64 = 1e-6;
const COERCIVITY_SLACK: f64 = 1e-8;
const COERCIVITY_SAMPLES: usize = 10_000;
const DENSE_REL: f64 = 1e-8;
const TRANSPOSE_ABS: f64 = 1e-12;
const ORDER_RANGE: (f64, f64) = (0.8, 1.2);
const DUALITY_REL: f64 = 1e-9;
const GREEN_REL: f64 = 1e-8;
const FD_REL: f64 = 1e-4;
const FD_DIRECTIONS: usize = 20;
const KKT_TOL: f64 = 1e-8;
const VI_DIRECTIONS: usize = 100;
const MAX_FIXED_POINT: usize = 200;
const LINEAR_REL: f64 = 1e-8;
const ROUND_TRIP: f64 = 1e-14;
const SPOT_REL: f64 = 1e-6;

struct Outcome {
    passed: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Outcome);

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ")
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    d / b.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_field(rng: &mut ChaCha8Rng, ly: Layout, lo: f64) -> SpeciesField {
    let mut f = SpeciesField::zeros(ly);
    f.data.iter_mut().for_each(|x| *x = rng.gen_range(lo..1.0));
    f
}

fn random_boundary(rng: &mut ChaCha8Rng, space: &PhaseSpace) -> BoundaryField {
    let mut g = space.zero_boundary();
    g.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
    g
}

fn small_scenario(dims: [usize; 3], sphere_level: usize, n_e: usize, stabilizer: f64) -> Scenario {
    let mut p = ScenarioParams::default();
    p.grid.dims = dims;
    p.grid.sphere_level = sphere_level;
    p.grid.energy_levels = n_e;
    p.geometry.target_size = Some(1);
    p.prescription.weights.stabilizer = stabilizer;
    p.solver.tol = 1e-13;
    Scenario::build(&p).expect("scenario")
}

fn schur_bound() -> Outcome {
    let t0 = Instant::now();
    let sphere = SphereGrid::build(1);
    let grid = EnergyGrid::uniform(1.5, 6.0, 16).unwrap();
    let n_vox = 216;
    let ly = Layout::new(grid.len(), n_vox, sphere.len());
    let moller = MollerData::new(vec![1.0; n_vox], 2.0, vec![0.0; n_vox * grid.len()]).unwrap();
    let kernel = RestrictedKernel::build(&moller, &grid).unwrap();
    let weights: Vec<f64> = (0..ly.block()).map(|i| grid.weights[i / ly.level()] * sphere.weights[i % ly.n_dir]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst, mut ratio) = (f64::NEG_INFINITY, 0.0f64);
    for _ in 0..20 {
        let mut set = CoupledKernelSet::empty(grid.len(), n_vox, sphere.len());
        for k in 0..3 {
            for j in 0..3 {
                let scale: Vec<f64> = (0..n_vox).map(|_| rng.gen_range(0.0..0.3)).collect();
                let data = match rng.gen_range(0..4) {
                    0 => KernelData::Full {
                        angular: forward_peaked_angular(&sphere, rng.gen_range(0.0..0.9)),
                        energy: downscatter_energy(&grid, rng.gen_range(0.1..1.0)),
                    },
                    1 => KernelData::EnergyLocal {
                        angular: forward_peaked_angular(&sphere, rng.gen_range(0.0..0.9)),
                        profile: (0..grid.len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
                    },
                    2 => KernelEntry::curve(&kernel).data,
                    _ => continue,
                };
                set.set(k, j, KernelEntry { data, scale });
            }
        }
        let op = CollisionOperator::new(set, &sphere, &grid, 8).unwrap();
        let (m1, m2) = op.schur_bounds();
        let seed = random_field(&mut rng, ly, 0.0);
        // 30 power steps land within 1% of the 50-step estimate on these kernels.
        let norm = op.norm_estimate(30, &seed, &weights).unwrap();
        // M1, M2 are discrete row and column sums that already carry the 2π of the
        // cone integral, so the bound is sqrt(M1 M2).
        worst = worst.max(norm - (m1 * m2).sqrt());
        ratio = ratio.max(norm / (m1 * m2).sqrt());
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= SCHUR_SLACK && secs < 60.0,
        format!("max(||K|| - sqrt(M1 M2)) = {worst:.3e}, max ratio {ratio:.3} over 20 sets at 6^3 x 42 x 16, {secs:.1}s"),
    )
}

fn coercivity() -> Outcome {
    let s = small_scenario([3, 3, 3], 0, 3, 1.0);
    let op = &s.op;
    let ly = op.layout();
    let c = op.collision_margin();
    let c_prime = op.margins().unwrap().c_prime(c);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut bad_sigma, mut bad_form) = (0, 0);
    let (mut worst_sigma, mut worst_form) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..COERCIVITY_SAMPLES {
        let psi = random_field(&mut rng, ly, -1.0);
        let mut sp = psi.clone();
        for sc in 0..3 {
            for e in 0..ly.n_e {
                let lv = sp.level_mut(sc, e);
                for v in 0..ly.n_vox {
                    let sg = op.sigma[sc][e * ly.n_vox + v];
                    lv[v * ly.n_dir..(v + 1) * ly.n_dir].iter_mut().for_each(|x| *x *= sg);
                }
            }
        }
        sp.axpy(-1.0, &op.collision.apply(&psi).unwrap());
        let nn = op.inner(&psi, &psi);
        let q = op.inner(&sp, &psi);
        worst_sigma = worst_sigma.min(q / nn - c);
        if q < (c - COERCIVITY_SLACK) * nn {
            bad_sigma += 1;
        }
        let b = op.bilinear(&psi, &psi).unwrap();
        let h = op.norm_h(&DiscreteField::from_cells(&s.space, psi));
        worst_form = worst_form.min(b / (h * h) - c_prime);
        if b < (c_prime - COERCIVITY_SLACK) * h * h {
            bad_form += 1;
        }
    }
    outcome(
        c > 0.0 && c_prime > 0.0 && bad_sigma == 0 && bad_form == 0,
        format!(
            "c = {c:.3e}, c' = {c_prime:.3e}; violations {bad_sigma} and {bad_form} of {COERCIVITY_SAMPLES}; worst margins {worst_sigma:.3e}, {worst_form:.3e}"
        ),
    )
}

fn dense_solve(op: &TransportOperator, rhs: &SpeciesField, adjoint: bool) -> Vec<f64> {
    let n = rhs.len();
    let m = DMatrix::from_row_slice(n, n, &op.dense(adjoint).unwrap());
    m.lu().solve(&DVector::from_column_slice(&rhs.data)).unwrap().as_slice().to_vec()
}

fn dense_oracle() -> Outcome {
    let s = small_scenario([2, 2, 1], 1, 3, 1.0);
    let op = s.op.clone();
    let ly = op.layout();
    let n = 3 * ly.block();
    let opts = SolverOptions {
        strictness: Strictness::Discrete,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = random_field(&mut rng, ly, -1.0);
    let g = random_boundary(&mut rng, &s.space);
    let (psi, _) = solve_forward(op.clone(), &f, &g, &opts).unwrap();
    let (phi, _) = solve_adjoint(op.clone(), &f, &g, &opts).unwrap();
    let fwd = rel_diff(&psi.data, &dense_solve(&op, &op.forward_rhs(&f, &g).unwrap(), false));
    let adj = rel_diff(&phi.data, &dense_solve(&op, &op.adjoint_rhs(&f, &g).unwrap(), true));
    // A* is the transpose of A in the quadrature-weighted inner product: W A* = Aᵀ W.
    let a = op.dense(false).unwrap();
    let b = op.dense(true).unwrap();
    let w = s.space.block_weights();
    let wt = |i: usize| w[i % w.len()];
    let mut tr: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            tr = tr.max((wt(i) * b[i * n + j] - a[j * n + i] * wt(j)).abs() / wt(i).max(wt(j)));
        }
    }
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    outcome(
        n <= 2000 && fwd <= DENSE_REL && adj <= DENSE_REL && tr <= TRANSPOSE_ABS * scale,
        format!(
            "{n} unknowns; forward {fwd:.2e}, adjoint {adj:.2e}, transpose {:.2e} (relative to max entry)",
            tr / scale
        ),
    )
}

fn plain_operator(dims: [usize; 3], h: [f64; 3], sphere: SphereGrid, energy: EnergyGrid, a: f64, sigma: f64) -> TransportOperator {
    let spatial = SpatialGrid::uniform_box([0.0; 3], h, dims, RegionLabel::Normal).unwrap();
    let space = Arc::new(PhaseSpace::new(spatial, sphere, energy));
    let ly = space.layout();
    let n = ly.n_e * ly.n_vox;
    let cf = CoefficientField::from_arrays(&space.energy, ly.n_vox, vec![a; n], vec![0.0; n], vec![sigma; n]).unwrap();
    let col = CollisionOperator::new(CoupledKernelSet::empty(ly.n_e, ly.n_vox, ly.n_dir), &space.sphere, &space.energy, 8).unwrap();
    TransportOperator::new(space, [None, Some(cf.clone()), Some(cf)], [vec![sigma; n], vec![sigma; n], vec![sigma; n]], col).unwrap()
}

fn orders(errs: &[f64]) -> Vec<f64> {
    errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

fn analytic_transport() -> Outcome {
    let opts = SolverOptions {
        strictness: Strictness::Discrete,
        ..Default::default()
    };
    // Pure absorber slab along x, compared with exp(−Σ d) on the characteristics.
    let sigma = 1.0;
    let sphere = SphereGrid::build(0).aligned(0, [1.0, 0.0, 0.0]);
    let mut slab = Vec::new();
    for n in [8usize, 16, 32, 64] {
        let op = Arc::new(plain_operator(
            [n, 1, 1],
            [1.0 / n as f64, 1.0, 1.0],
            sphere.clone(),
            EnergyGrid::uniform(1.0, 2.0, 2).unwrap(),
            -1.0,
            sigma,
        ));
        let ly = op.layout();
        let bd = &op.space.boundary;
        let mut g = op.space.zero_boundary();
        for f in 0..bd.len() {
            for d in 0..ly.n_dir {
                if bd.side(f, d) == Side::Inflow {
                    g.set(0, 0, f, d, 1.0);
                }
            }
        }
        let (psi, _) = solve_forward(op.clone(), &SpeciesField::zeros(ly), &g, &opts).unwrap();
        let mut err: f64 = 0.0;
        for v in 0..ly.n_vox {
            let x = op.space.spatial.center_of(v);
            let exact = (-sigma * op.space.escape_time(x, [1.0, 0.0, 0.0]).unwrap()).exp();
            err = err.max((psi.level(0, 0)[v * ly.n_dir] - exact).abs());
        }
        slab.push(err);
    }
    // CSDA only: a ∂ψ/∂E + ... reduces to an ODE in E with a closed-form solution.
    let a = -2.0;
    let exact = |e: f64| ((3.0 + 0.5 * 9.0) - (e + 0.5 * e * e)) / -a;
    let mut csda = Vec::new();
    for n in [11usize, 21, 41, 81] {
        let op = Arc::new(plain_operator(
            [1, 1, 1],
            [1.0; 3],
            SphereGrid::build(0),
            EnergyGrid::uniform(1.0, 3.0, n).unwrap(),
            a,
            0.0,
        ));
        let ly = op.layout();
        let mut f = SpeciesField::zeros(ly);
        let mut g = op.space.zero_boundary();
        for e in 0..ly.n_e {
            let en = op.space.energy.levels[e];
            f.level_mut(1, e).iter_mut().for_each(|x| *x = 1.0 + en);
            for fc in 0..op.space.boundary.len() {
                for d in 0..ly.n_dir {
                    g.set(1, e, fc, d, exact(en));
                }
            }
        }
        let (psi, _) = solve_forward(op.clone(), &f, &g, &opts).unwrap();
        let mut err: f64 = 0.0;
        for e in 0..ly.n_e {
            let en = op.space.energy.levels[e];
            for x in psi.level(1, e) {
                err = err.max((x - exact(en)).abs());
            }
        }
        csda.push(err);
    }
    let (os, oc) = (orders(&slab), orders(&csda));
    let inside = |o: &[f64]| o.iter().all(|x| *x >= ORDER_RANGE.0 && *x <= ORDER_RANGE.1);
    outcome(inside(&os) && inside(&oc), format!("absorber orders {os:.3?}, CSDA orders {oc:.3?}"))
}

fn duality() -> Outcome {
    let s = small_scenario([3, 3, 2], 1, 4, 1.0);
    let op = s.op.clone();
    let ly = op.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut worst_b, mut worst_g) = (0.0f64, 0.0f64);
    for _ in 0..3 {
        let (f, fs) = (random_field(&mut rng, ly, -1.0), random_field(&mut rng, ly, -1.0));
        let (g, gs) = (random_boundary(&mut rng, &s.space), random_boundary(&mut rng, &s.space));
        let (psi, _) = solve_forward(op.clone(), &f, &g, &s.params.solver).unwrap();
        let (phi, _) = solve_adjoint(op.clone(), &fs, &gs, &s.params.solver).unwrap();
        let b = op.bilinear(&psi, &phi).unwrap();
        let bs = op.bilinear_adjoint(&phi, &psi).unwrap();
        worst_b = worst_b.max((b - bs).abs() / (op.norm(&psi) * op.norm(&phi)));
        let fp = DiscreteField::forward(&s.space, psi, &g);
        let fa = DiscreteField::adjoint(&s.space, phi, &gs);
        worst_g = worst_g.max(op.green_residual(&fp, &fa).unwrap() / (op.norm_h(&fp) * op.norm_h(&fa)));
    }
    outcome(
        worst_b <= DUALITY_REL && worst_g <= GREEN_REL,
        format!("|B - B*| / (|psi||psi*|) = {worst_b:.2e}, Green residual {worst_g:.2e}"),
    )
}

/// Random control on the support of `like`, entries in [lo, 1).
fn random_control(p: &Planner, like: &Control, rng: &mut ChaCha8Rng, lo: f64) -> Control {
    let (sup, mut c) = match like {
        Control::External(_) => (p.external_support(), p.zero_external()),
        Control::Internal(_) => (p.internal_support(), p.zero_internal()),
    };
    let data = match &mut c {
        Control::External(g) => &mut g.data,
        Control::Internal(f) => &mut f.data,
    };
    data.iter_mut().zip(&sup).for_each(|(x, m)| *x = if *m { rng.gen_range(lo..1.0) } else { 0.0 });
    c
}

fn combine(a: &Control, alpha: f64, b: &Control) -> Control {
    let mut c = a.clone();
    let data = match &mut c {
        Control::External(g) => &mut g.data,
        Control::Internal(f) => &mut f.data,
    };
    data.iter_mut().zip(b.data()).for_each(|(x, y)| *x += alpha * y);
    c
}

fn fd_errors(p: &Planner, base: Control, rng: &mut ChaCha8Rng) -> f64 {
    let st = p.state(base.clone()).unwrap();
    let grad = p.gradient(&st).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..FD_DIRECTIONS {
        let w = random_control(p, &base, rng, -1.0);
        let fd = (p.evaluate(&combine(&base, h, &w)).unwrap().0 - p.evaluate(&combine(&base, -h, &w)).unwrap().0) / (2.0 * h);
        let an = p.control_inner(&grad, &w).unwrap();
        worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()));
    }
    worst
}

fn adjoint_gradient() -> Outcome {
    let s = small_scenario([3, 3, 3], 0, 3, 0.3);
    let p = s.planner().unwrap();
    let pi = p.clone().with_controlled([true, true, false]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ext = fd_errors(&p, random_control(&p, &p.zero_external(), &mut rng, 0.0), &mut rng);
    let int = fd_errors(&pi, random_control(&pi, &pi.zero_internal(), &mut rng, 0.0), &mut rng);
    outcome(
        ext <= FD_REL && int <= FD_REL,
        format!("max relative error over {FD_DIRECTIONS} directions: external {ext:.2e}, internal {int:.2e}"),
    )
}

/// Minimizer of the unconstrained external initializer from dense solves and normal equations.
fn dense_linear_optimum(p: &Planner) -> Vec<f64> {
    let sp = &p.op.space;
    let ly = p.op.layout();
    let n = 3 * ly.block();
    let a = DMatrix::from_row_slice(n, n, &p.op.dense(false).unwrap()).lu();
    let sup: Vec<usize> = p.external_support().iter().enumerate().filter(|(_, m)| **m).map(|(k, _)| k).collect();
    let nv = ly.n_vox;
    let mut s = DMatrix::zeros(nv, sup.len());
    for (col, k) in sup.iter().enumerate() {
        let mut g = sp.zero_boundary();
        g.data[*k] = 1.0;
        let rhs = p.op.forward_rhs(&SpeciesField::zeros(ly), &g).unwrap();
        let psi = a.solve(&DVector::from_vec(rhs.data)).unwrap();
        let d = dose(sp, &SpeciesField::from_data(ly, psi.as_slice().to_vec()).unwrap(), &p.stopping).unwrap();
        s.set_column(col, &DVector::from_vec(d));
    }
    let masks = Prescription::masks(sp);
    let t = p.rx.target_fields(sp).unwrap();
    let wr = &p.rx.weights;
    let c = [wr.target, wr.critical, wr.normal];
    let vol = sp.spatial.voxel_volume();
    let mut cw = DVector::zeros(nv);
    let mut cd = DVector::zeros(nv);
    for v in 0..nv {
        for r in 0..3 {
            if masks[r][v] {
                cw[v] += vol * c[r];
                cd[v] += vol * c[r] * t[r][v];
            }
        }
    }
    let g0 = sp.zero_boundary();
    let bd = &sp.boundary;
    let mut tw = vec![0.0; g0.data.len()];
    for sc in 0..3 {
        for e in 0..g0.n_e {
            for f in 0..bd.len() {
                for d in 0..bd.n_dir {
                    tw[g0.idx(sc, e, f, d)] = bd.t2_weight(f, d, e);
                }
            }
        }
    }
    let mut m = s.transpose() * DMatrix::from_diagonal(&cw) * &s;
    for (i, k) in sup.iter().enumerate() {
        m[(i, i)] += wr.stabilizer * tw[*k];
    }
    let x = m.lu().solve(&(s.transpose() * cd)).unwrap();
    let mut out = vec![0.0; g0.data.len()];
    for (i, k) in sup.iter().enumerate() {
        out[*k] = x[i];
    }
    out
}

fn optimality() -> Outcome {
    let mut params = ScenarioParams::default();
    params.prescription.weights.stabilizer = 0.7;
    let s = Scenario::build(&params).unwrap();
    let unknowns = 3 * s.op.layout().block();
    let fp = FixedPointOptions {
        max_iter: MAX_FIXED_POINT,
        ..FixedPointOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut notes = vec![format!("{unknowns} unknowns")];
    let mut ok = unknowns <= 100_000;

    let p = s.planner().unwrap();
    for internal in [false, true] {
        let label = if internal { "internal" } else { "external" };
        let plan = if internal {
            p.optimize_internal(None, &fp)
        } else {
            p.optimize_external(None, &fp)
        };
        let plan = match plan {
            Ok(x) => x,
            Err(e) => return outcome(false, format!("{label}: {e}")),
        };
        let k = plan.kkt.unwrap();
        let compl = if internal { k.pointwise_complementarity } else { k.complementarity };
        let feasible = plan.control.data().iter().all(|x| *x >= 0.0);
        let grad = p.gradient(&plan).unwrap();
        let mut worst_vi = f64::INFINITY;
        for _ in 0..VI_DIRECTIONS {
            let g0 = random_control(&p, &plan.control, &mut rng, 0.0);
            let w = combine(&g0, -1.0, &plan.control);
            worst_vi = worst_vi.min(p.control_inner(&grad, &w).unwrap());
        }
        let iters = plan.log.len();
        ok &= compl <= KKT_TOL && k.stationarity <= KKT_TOL && feasible && worst_vi >= -KKT_TOL && iters <= MAX_FIXED_POINT;
        notes.push(format!(
            "{label}: {iters} iterations, complementarity {compl:.1e}, stationarity {:.1e}, min VI {worst_vi:.1e}",
            k.stationarity
        ));
    }

    let small = small_scenario([2, 2, 1], 0, 3, 0.5);
    let mut pl = small.planner().unwrap();
    pl.rx.normal_dose = -0.3;
    let plan = pl.optimize_linear_unconstrained(None, &fp).unwrap();
    let oracle = dense_linear_optimum(&pl);
    let scale = oracle.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let lin = plan.control.data().iter().zip(&oracle).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale;
    ok &= lin <= LINEAR_REL;
    notes.push(format!("linear vs dense {lin:.1e}"));
    outcome(ok, notes.join("; "))
}

fn kappa_consistency() -> Outcome {
    let params = ScenarioParams::default();
    let k = &params.kappa_study;
    let dirs = SphereGrid::build(k.direction_level).nodes;
    let psi = |_: csda_core::linalg::Vec3, e: f64| e * e;
    let kappas = [2.0, 1.5, 1.25, 1.125];
    let rows = kappa_consistency_report(&CrossSection::Moller, params.physics.sigma0, &psi, &k.energies, &dirs, &kappas).unwrap();
    let d: Vec<f64> = rows.iter().map(|r| r.discrepancy).collect();
    outcome(d.windows(2).all(|w| w[1] < w[0]), format!("discrepancies [{}] for kappa {kappas:?}", sci(&d)))
}

fn velocity_coordinates() -> Outcome {
    let psi = |x: [f64; 3], w: [f64; 3], e: f64| (1.0 + 0.3 * x[0]) * (e * e) * (1.0 + 0.4 * w[2] + 0.3 * w[0] * w[1]);
    let coeff = PointCoefficients {
        a: |e: f64| -1.0 - 0.2 * e,
        b: |_: f64| -0.05,
        sigma: |e: f64| 0.3 + 0.1 * e,
    };
    let mut res = Vec::new();
    for (n_e, level) in [(5, 2), (9, 3), (17, 4)] {
        let energy = EnergyGrid::uniform(1.0, 4.0, n_e).unwrap();
        let g = VelocityGrid::new(&energy, &SphereGrid::build(level)).unwrap();
        res.push(equivalence_residual(&psi, [0.1, 0.2, 0.3], &energy, &g, coeff, 1e-3).unwrap().absolute);
    }
    let ord = orders(&res);
    let sh = Shell::new(1.0, 9.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rt: f64 = 0.0;
    for _ in 0..10_000 {
        let (th, ph, e) = (rng.gen_range(0.0..PI), rng.gen_range(0.0..2.0 * PI), rng.gen_range(1.01..8.99));
        let w = [th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()];
        let (w2, e2) = sh.from_velocity(sh.to_velocity(w, e).unwrap()).unwrap();
        rt = rt.max((e2 - e).abs() / e);
        for i in 0..3 {
            rt = rt.max((w2[i] - w[i]).abs());
        }
    }
    outcome(
        ord.iter().all(|o| *o >= ORDER_RANGE.0) && rt <= ROUND_TRIP,
        format!("residuals [{}], orders {ord:.3?}; round trip {rt:.1e}", sci(&res)),
    )
}

fn spot_values() -> Outcome {
    let mut worst: f64 = 0.0;
    for e in [1.1, 1.5, 2.0, 3.7, 8.0] {
        worst = worst.max((mu(e, e).unwrap() - 1.0).abs());
        let dm = -1.0 / (e * (e + 2.0));
        worst = worst.max((dmu_dep_diag(e).unwrap() - dm).abs() / dm.abs());
        let h = 1e-7 * e;
        let fd = (mu(e + h, e).unwrap() - 1.0) / h;
        // one-sided: μ is defined for E′ ≥ E only; first-order error ~ h μ''
        worst = worst.max((fd - dm).abs() / dm.abs());
        for s0 in [0.5, 1.0, 2.0] {
            let ds = -2.0 * s0 * (e + 1.0) / (e * e * (e + 2.0).powi(2));
            worst = worst.max((moller_dsigma2_diag(s0, e) - ds).abs() / ds.abs());
            let h = 1e-5 * e;
            let fd = (moller_sigma_hat(2, s0, e + h, e) - moller_sigma_hat(2, s0, e - h, e)) / (2.0 * h);
            worst = worst.max((fd - ds).abs() / ds.abs());
        }
    }
    outcome(worst <= SPOT_REL, format!("max relative deviation {worst:.2e}"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("Schur bound", schur_bound),
        ("coercivity", coercivity),
        ("dense oracle", dense_oracle),
        ("analytic transport", analytic_transport),
        ("duality and Green", duality),
        ("adjoint gradient", adjoint_gradient),
        ("optimality", optimality),
        ("kappa consistency", kappa_consistency),
        ("velocity coordinates", velocity_coordinates),
        ("closed-form spot values", spot_values),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let t = Instant::now();
        let r = f();
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {:>2}. {name}: {} ({:.1}s)", i + 1, r.detail, t.elapsed().as_secs_f64());
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
