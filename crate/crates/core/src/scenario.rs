//! Run configuration and scenario assembly: grids, materials, couplings, sources,
//! the toy three-region phantom and the hypothesis checks run before solving.

use crate::collision::CollisionOperator;
use crate::dose_planner::{FixedPointOptions, Planner, Prescription, StoppingPowers};
use crate::error::{Error, Result};
use crate::fields::{BoundaryField, SpeciesField};
use crate::forms::{DiscreteField, TransportOperator};
use crate::io;
use crate::phase_space::{EnergyGrid, PhaseSpace, RegionLabel, Side, SpatialGrid, SphereGrid};
use crate::solver::{validate_operator, SolverOptions};
use crate::xsec::{
    downscatter_energy, forward_peaked_angular, CoefficientField, CoupledKernelSet, CrossSection, KernelData, KernelEntry, MollerData, RestrictedKernel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergySpacing {
    #[default]
    Uniform,
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridParams {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub sphere_level: usize,
    pub energy_levels: usize,
    /// E₀, lowest energy.
    pub e_min: f64,
    /// E_m, highest energy.
    pub e_max: f64,
    pub energy_spacing: EnergySpacing,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            dims: [6, 6, 6],
            spacing: [0.5; 3],
            origin: [0.0; 3],
            sphere_level: 0,
            energy_levels: 4,
            e_min: 1.5,
            e_max: 4.0,
            energy_spacing: EnergySpacing::Uniform,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryParams {
    /// Byte-per-voxel label file, relative to the config file. Without it the toy
    /// phantom is used.
    pub label_file: Option<PathBuf>,
    /// Edge of the central target cube of the toy phantom in voxels (default dims/3).
    pub target_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsParams {
    pub kappa: f64,
    /// σ₀, either one constant or per region (target, critical, normal).
    pub sigma0: f64,
    pub sigma0_by_region: Option<[f64; 3]>,
    /// Coercivity margin c: Σ is set to c plus the largest row/column sum of K.
    pub margin: f64,
    /// Constant Σ for every species, overriding `margin`.
    pub sigma: Option<f64>,
    pub photon_self: f64,
    pub photon_to_electron: f64,
    pub electron_to_photon: f64,
    /// Anisotropy g of the forward-peaked angular coupling kernels.
    pub anisotropy: f64,
    /// Optional material table (E′, E, σ̂₀, σ̂₁, σ̂₂), relative to the config file.
    pub material_table: Option<PathBuf>,
    /// ς per species, constant in x and E.
    pub stopping_powers: [f64; 3],
    /// Quadrature points on each scattering cone.
    pub curve_samples: usize,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        PhysicsParams {
            kappa: 2.0,
            sigma0: 0.5,
            sigma0_by_region: None,
            margin: 0.5,
            sigma: None,
            photon_self: 0.3,
            photon_to_electron: 0.2,
            electron_to_photon: 0.1,
            anisotropy: 0.5,
            material_table: None,
            stopping_powers: [0.05, 1.0, 1.0],
            curve_samples: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceParams {
    /// Photon fluence entering through the x = min face, all energies.
    pub beam: f64,
    /// Restrict the beam to the y/z footprint of the target.
    pub aperture: bool,
    /// Isotropic photon source inside the target.
    pub volume: f64,
    /// Adjoint source: dose response ς_j on the target, times this factor.
    pub detector: f64,
}

impl Default for SourceParams {
    fn default() -> Self {
        SourceParams {
            beam: 1.0,
            aperture: true,
            volume: 0.0,
            detector: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanParams {
    pub theta: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Species carrying the control (photon, electron, positron).
    pub controlled: [bool; 3],
    /// Dose levels of the exported DVH tables.
    pub dvh_points: usize,
}

impl Default for PlanParams {
    fn default() -> Self {
        PlanParams {
            theta: 0.5,
            tol: 1e-10,
            max_iter: 200,
            controlled: [true, false, false],
            dvh_points: 51,
        }
    }
}

impl PlanParams {
    pub fn fixed_point(&self) -> FixedPointOptions {
        FixedPointOptions {
            theta: self.theta,
            tol: self.tol,
            max_iter: self.max_iter,
            ..FixedPointOptions::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KappaStudyParams {
    pub kappas: Vec<f64>,
    pub energies: Vec<f64>,
    /// Sphere level whose nodes serve as sample directions.
    pub direction_level: usize,
}

impl Default for KappaStudyParams {
    fn default() -> Self {
        KappaStudyParams {
            kappas: vec![2.0, 1.5, 1.25, 1.125],
            energies: vec![2.0, 3.0],
            direction_level: 0,
        }
    }
}

/// Everything a run reads from its config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct ScenarioParams {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grid: GridParams,
    #[serde(default)]
    pub geometry: GeometryParams,
    #[serde(default)]
    pub physics: PhysicsParams,
    #[serde(default)]
    pub source: SourceParams,
    #[serde(default)]
    pub prescription: Prescription,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub plan: PlanParams,
    #[serde(default)]
    pub kappa_study: KappaStudyParams,
}

impl ScenarioParams {
    pub fn from_toml(text: &str) -> Result<Self> {
        let p: ScenarioParams = toml::from_str(text).map_err(|e| Error::Parse {
            path: "<config>".into(),
            msg: e.to_string(),
        })?;
        p.check()?;
        Ok(p)
    }

    /// Parses and checks a config file. Relative paths inside it are resolved against
    /// its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut p: ScenarioParams = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for f in [&mut p.geometry.label_file, &mut p.physics.material_table].into_iter().flatten() {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
        p.check()?;
        Ok(p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario parameters serialize")
    }

    /// Parse-time invariants.
    pub fn check(&self) -> Result<()> {
        let g = &self.grid;
        if g.dims.contains(&0) || g.spacing.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::Invalid(format!("grid dims {:?} and spacing {:?} must be positive", g.dims, g.spacing)));
        }
        if g.energy_levels < 2 || !(g.e_max > g.e_min) {
            return Err(Error::Invalid("need at least two energy levels and E_m > E₀".into()));
        }
        let k = self.physics.kappa;
        if !(k > 1.0) {
            return Err(Error::Invalid(format!("kappa must exceed 1, got {k}")));
        }
        if !((k - 1.0) * g.e_min > 1.0) {
            return Err(Error::Invalid(format!(
                "ln(kappa*E - E) must be positive on the grid: (kappa - 1)*E0 = {} <= 1",
                (k - 1.0) * g.e_min
            )));
        }
        let s = &self.solver;
        if !(s.tol > 0.0) || !(s.inner_factor > 0.0) || !(self.plan.tol > 0.0) {
            return Err(Error::Invalid("tolerances must be positive".into()));
        }
        if !(self.plan.theta > 0.0 && self.plan.theta <= 1.0) {
            return Err(Error::Invalid(format!("damping theta must lie in (0, 1], got {}", self.plan.theta)));
        }
        if self.physics.sigma0 <= 0.0 || self.physics.sigma0_by_region.is_some_and(|s| s.iter().any(|x| *x <= 0.0)) {
            return Err(Error::Invalid("sigma0 must be positive".into()));
        }
        if self.physics.stopping_powers.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Invalid("stopping powers must be nonnegative".into()));
        }
        if self.physics.curve_samples == 0 {
            return Err(Error::Invalid("curve_samples must be positive".into()));
        }
        self.prescription.validate()
    }
}

/// Toy phantom: a central target cube, a critical block behind it along +x, normal tissue
/// elsewhere.
pub fn toy_phantom(dims: [usize; 3], target_size: usize) -> Vec<RegionLabel> {
    let lo = |n: usize| n.saturating_sub(target_size) / 2;
    let inside = |i: usize, n: usize| i >= lo(n) && i < (lo(n) + target_size).min(n);
    let mut labels = Vec::with_capacity(dims.iter().product());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let yz = inside(j, dims[1]) && inside(k, dims[2]);
                let l = if yz && inside(i, dims[0]) {
                    RegionLabel::Target
                } else if yz && i >= lo(dims[0]) + target_size {
                    RegionLabel::Critical
                } else {
                    RegionLabel::Normal
                };
                labels.push(l);
            }
        }
    }
    labels
}

/// Assembled scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub params: ScenarioParams,
    pub space: Arc<PhaseSpace>,
    pub material: MollerData,
    pub kernel: RestrictedKernel,
    pub op: Arc<TransportOperator>,
    pub stopping: StoppingPowers,
}

impl Scenario {
    pub fn build(params: &ScenarioParams) -> Result<Self> {
        params.check()?;
        let g = &params.grid;
        let ph = &params.physics;
        let labels = match &params.geometry.label_file {
            Some(p) => io::read_labels(p, g.dims)?,
            None => toy_phantom(g.dims, params.geometry.target_size.unwrap_or((g.dims.iter().min().unwrap() / 3).max(1))),
        };
        let spatial = SpatialGrid::new(g.origin, g.spacing, g.dims, labels)?;
        let energy = match g.energy_spacing {
            EnergySpacing::Uniform => EnergyGrid::uniform(g.e_min, g.e_max, g.energy_levels)?,
            EnergySpacing::Log => EnergyGrid::log_spaced(g.e_min, g.e_max, g.energy_levels)?,
        };
        let space = Arc::new(PhaseSpace::new(spatial, SphereGrid::build(g.sphere_level), energy));
        let ly = space.layout();
        let nv = ly.n_vox;
        let n_e = ly.n_e;

        let sigma0: Vec<f64> = (0..nv)
            .map(|a| match (ph.sigma0_by_region, space.spatial.label(a)) {
                (Some(r), RegionLabel::Target) => r[0],
                (Some(r), RegionLabel::Critical) => r[1],
                (Some(r), _) => r[2],
                (None, _) => ph.sigma0,
            })
            .collect();
        let mut material = MollerData::new(sigma0, ph.kappa, vec![0.0; n_e * nv])?;
        if let Some(t) = &ph.material_table {
            material.cross_section = CrossSection::Table(io::read_cross_section_table(t)?);
        }
        let kernel = RestrictedKernel::build(&material, &space.energy)?;

        let mut set = CoupledKernelSet::empty(n_e, nv, ly.n_dir);
        set.set(1, 1, KernelEntry::curve(&kernel));
        set.set(2, 2, KernelEntry::curve(&kernel));
        let ang = forward_peaked_angular(&space.sphere, ph.anisotropy);
        let local = |m: f64| KernelEntry {
            data: KernelData::EnergyLocal {
                angular: ang.clone(),
                profile: vec![m; n_e],
            },
            scale: vec![1.0; nv],
        };
        if ph.photon_self > 0.0 {
            set.set(0, 0, local(ph.photon_self));
        }
        if ph.photon_to_electron > 0.0 {
            set.set(0, 1, local(ph.photon_to_electron));
        }
        if ph.electron_to_photon > 0.0 {
            set.set(
                1,
                0,
                KernelEntry {
                    data: KernelData::Full {
                        angular: ang.clone(),
                        energy: downscatter_energy(&space.energy, ph.electron_to_photon),
                    },
                    scale: vec![1.0; nv],
                },
            );
        }
        let collision = CollisionOperator::new(set, &space.sphere, &space.energy, ph.curve_samples)?;

        let sigma: [Vec<f64>; 3] = match ph.sigma {
            Some(c) => [0, 1, 2].map(|_| vec![c; n_e * nv]),
            None => {
                let ones = SpeciesField::filled(ly, 1.0);
                let r = collision.apply(&ones)?;
                let c = collision.apply_adjoint(&ones)?;
                [0, 1, 2].map(|s| {
                    let mut out = vec![0.0; n_e * nv];
                    for e in 0..n_e {
                        for v in 0..nv {
                            let m = (0..ly.n_dir)
                                .map(|d| r.species(s)[ly.idx(e, v, d)].max(c.species(s)[ly.idx(e, v, d)]))
                                .fold(0.0, f64::max);
                            out[e * nv + v] = ph.margin + m;
                        }
                    }
                    out
                })
            }
        };
        let mut coefficients: [Option<CoefficientField>; 3] = Default::default();
        for s in 1..3 {
            let mut d = material.clone();
            d.base_sigma = sigma[s].clone();
            coefficients[s] = Some(CoefficientField::build(&d, &space.energy)?);
        }
        let op = Arc::new(TransportOperator::new(space.clone(), coefficients, sigma, collision)?);
        let stopping = StoppingPowers::uniform(ly, ph.stopping_powers)?;
        Ok(Scenario {
            params: params.clone(),
            space,
            material,
            kernel,
            op,
            stopping,
        })
    }

    /// Masks of target, critical and normal voxels.
    pub fn masks(&self) -> [Vec<bool>; 3] {
        Prescription::masks(&self.space)
    }

    /// Photon inflow through the x = min face.
    pub fn beam(&self) -> BoundaryField {
        let sp = &self.space;
        let bd = &sp.boundary;
        let mut g = sp.zero_boundary();
        let amp = self.params.source.beam;
        if amp == 0.0 {
            return g;
        }
        let [mt, _, _] = self.masks();
        let dims = sp.spatial.dims;
        // y/z footprint of the target.
        let mut foot = vec![false; dims[1] * dims[2]];
        for (a, t) in mt.iter().enumerate() {
            if *t {
                let [_, j, k] = sp.spatial.unflatten(sp.spatial.grid_index(a));
                foot[k * dims[1] + j] = true;
            }
        }
        for (f, face) in bd.faces.iter().enumerate() {
            if face.normal[0] > -0.5 {
                continue;
            }
            let [_, j, k] = sp.spatial.unflatten(sp.spatial.grid_index(face.voxel));
            if self.params.source.aperture && !foot[k * dims[1] + j] {
                continue;
            }
            for d in 0..bd.n_dir {
                if bd.side(f, d) == Side::Inflow {
                    for e in 0..g.n_e {
                        g.set(0, e, f, d, amp);
                    }
                }
            }
        }
        g
    }

    /// Isotropic photon source on the target.
    pub fn volume_source(&self) -> SpeciesField {
        let ly = self.op.layout();
        let mut f = SpeciesField::zeros(ly);
        let amp = self.params.source.volume;
        if amp != 0.0 {
            let [mt, _, _] = self.masks();
            for e in 0..ly.n_e {
                let lv = f.level_mut(0, e);
                for (v, t) in mt.iter().enumerate() {
                    if *t {
                        lv[v * ly.n_dir..(v + 1) * ly.n_dir].iter_mut().for_each(|x| *x = amp);
                    }
                }
            }
        }
        f
    }

    /// Adjoint source D*(detector · 1_target): the importance of each phase point for the
    /// dose deposited in the target.
    pub fn detector_source(&self) -> Result<SpeciesField> {
        let [mt, _, _] = self.masks();
        let d: Vec<f64> = mt.iter().map(|t| if *t { self.params.source.detector } else { 0.0 }).collect();
        crate::dose_planner::dose_adjoint(&self.space, &d, &self.stopping)
    }

    pub fn planner(&self) -> Result<Planner> {
        Ok(Planner::new(
            self.op.clone(),
            self.stopping.clone(),
            self.params.prescription.clone(),
            self.params.solver.clone(),
        )?
        .with_controlled(self.params.plan.controlled))
    }

    /// Runs the hypothesis checks: Schur bounds of the collision operator, the collision
    /// coercivity margin, coefficient margins of the charged species, sampled coercivity
    /// of Σ − K and of the discrete form.
    pub fn hypothesis_report(&self, samples: usize) -> HypothesisReport {
        let op = &self.op;
        let ly = op.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(self.params.seed);
        let mut checks = Vec::new();

        let (m1, m2) = op.collision.schur_bounds();
        let mut seed = SpeciesField::zeros(ly);
        seed.data.iter_mut().for_each(|x| *x = rng.gen_range(0.0..1.0));
        let w = self.space.block_weights();
        let norm = op.collision.norm_estimate(100, &seed, &w).unwrap_or(f64::NAN);
        checks.push(HypothesisCheck::upper(
            "Schur bound: ||K|| <= sqrt(M1*M2)",
            norm,
            (m1 * m2).sqrt() * (1.0 + 1e-10) + 1e-6,
        ));

        let c = op.collision_margin();
        checks.push(HypothesisCheck::lower("collision coercivity margin (Sigma - K >= c > 0)", c, 0.0));
        for (s, coef) in op.coefficients.iter().enumerate() {
            let Some(coef) = coef else { continue };
            let m = coef.margins;
            let sp = crate::fields::Species::from_index(s).name();
            checks.push(HypothesisCheck::lower(&format!("{sp}: energy drift decreasing (-da/dE >= q1 > 0)"), m.q1, 0.0));
            checks.push(HypothesisCheck::lower(&format!("{sp}: angular diffusion negative (-b >= q2 > 0)"), m.q2, 0.0));
            checks.push(HypothesisCheck::lower(
                &format!("{sp}: drift bounded away from zero at E0 and Em (-a >= q3 > 0)"),
                m.q3,
                0.0,
            ));
            checks.push(HypothesisCheck::lower(&format!("{sp}: drift nondegenerate (|a| >= c0 > 0)"), m.c0, 0.0));
        }

        // Sampled coercivity of Σ − K, reported as the worst ⟨(Σ−K)ψ,ψ⟩/‖ψ‖² − c.
        let mut worst = f64::INFINITY;
        for _ in 0..samples {
            let mut psi = SpeciesField::zeros(ly);
            psi.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
            let mut sp = psi.clone();
            for s in 0..3 {
                for e in 0..ly.n_e {
                    let lv = sp.level_mut(s, e);
                    for v in 0..ly.n_vox {
                        let sg = op.sigma[s][e * ly.n_vox + v];
                        lv[v * ly.n_dir..(v + 1) * ly.n_dir].iter_mut().for_each(|x| *x *= sg);
                    }
                }
            }
            let k = op.collision.apply(&psi).expect("layout matches");
            sp.axpy(-1.0, &k);
            let q = op.inner(&sp, &psi) / op.inner(&psi, &psi);
            worst = worst.min(q - c);
        }
        if samples > 0 {
            checks.push(HypothesisCheck::lower("sampled <(Sigma - K)psi, psi> >= c ||psi||^2", worst, -1e-8));
        }

        // Sampled coercivity of the discrete form.
        match op.discrete_coercivity_constant() {
            Some(k) => {
                let mut worst = f64::INFINITY;
                for _ in 0..samples {
                    let mut v = SpeciesField::zeros(ly);
                    v.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
                    let b = op.bilinear(&v, &v).unwrap_or(f64::NAN);
                    let h = op.norm_h(&DiscreteField::from_cells(&self.space, v));
                    worst = worst.min(b / (h * h) - k);
                }
                checks.push(HypothesisCheck::lower("discrete form coercivity constant positive", k, 0.0));
                if samples > 0 {
                    checks.push(HypothesisCheck::lower("sampled B(v,v) >= c' ||v||_H^2", worst, -1e-8));
                }
            }
            None => checks.push(HypothesisCheck::lower(
                "discrete form coercivity constant available (uniform energy grid)",
                f64::NAN,
                0.0,
            )),
        }
        if let Err(e) = validate_operator(op, self.params.solver.strictness) {
            checks.push(HypothesisCheck {
                name: format!("solver strictness: {e}"),
                value: f64::NAN,
                bound: 0.0,
                passed: false,
            });
        }
        HypothesisReport { checks }
    }

    /// Sample directions of the κ study.
    pub fn kappa_directions(&self) -> Vec<crate::linalg::Vec3> {
        SphereGrid::build(self.params.kappa_study.direction_level).nodes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HypothesisCheck {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

impl HypothesisCheck {
    fn lower(name: &str, value: f64, bound: f64) -> Self {
        HypothesisCheck {
            name: name.into(),
            value,
            bound,
            passed: value > bound || (bound < 0.0 && value >= bound),
        }
    }

    fn upper(name: &str, value: f64, bound: f64) -> Self {
        HypothesisCheck {
            name: name.into(),
            value,
            bound,
            passed: value <= bound,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HypothesisReport {
    pub checks: Vec<HypothesisCheck>,
}

impl HypothesisReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&HypothesisCheck> {
        self.checks.iter().find(|c| !c.passed)
    }
}
