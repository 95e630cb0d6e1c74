//! Dose functional, clinical objectives and the adjoint-based optimality fixed points
//! for external (inflow boundary) and internal (volumetric source) controls.
//!
//! All inner products are the discrete ones of the solver: `Σ V·a·b` over voxels for
//! doses, `⟨·,·⟩_W` for phase-space fields and the T²(Γ₋) quadrature for inflow data.
//! With these choices the adjoint gradient is the exact gradient of the discrete
//! objective.

use crate::error::{Error, Result};
use crate::fields::{BoundaryField, Layout, SpeciesField};
use crate::forms::TransportOperator;
use crate::phase_space::{PhaseSpace, RegionLabel, Side};
use crate::solver::{solve_with_guess, SolverOptions, TransportProblem};
use serde::{Deserialize, Serialize};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

/// Stopping powers ς_j(x, E), indexed `e * n_vox + v` per species.
#[derive(Clone, Debug)]
pub struct StoppingPowers {
    pub values: [Vec<f64>; 3],
}

impl StoppingPowers {
    pub fn new(layout: Layout, values: [Vec<f64>; 3]) -> Result<Self> {
        for (s, v) in values.iter().enumerate() {
            if v.len() != layout.n_e * layout.n_vox {
                return Err(Error::Shape(format!(
                    "stopping power of species {s} has {} entries, grid needs {}",
                    v.len(),
                    layout.n_e * layout.n_vox
                )));
            }
            if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                return Err(Error::Domain(format!("stopping power must be finite and nonnegative, got {x}")));
            }
        }
        Ok(StoppingPowers { values })
    }

    pub fn uniform(layout: Layout, per_species: [f64; 3]) -> Result<Self> {
        let n = layout.n_e * layout.n_vox;
        Self::new(layout, per_species.map(|c| vec![c; n]))
    }

    #[inline]
    fn at(&self, s: usize, e: usize, v: usize, n_vox: usize) -> f64 {
        self.values[s][e * n_vox + v]
    }
}

/// D(x) = Σ_j ∫∫ ς_j ψ_j dω dE, one value per active voxel.
pub fn dose(space: &PhaseSpace, psi: &SpeciesField, sp: &StoppingPowers) -> Result<Vec<f64>> {
    let ly = space.layout();
    psi.check_layout(ly)?;
    check_stopping(ly, sp)?;
    let wd = &space.sphere.weights;
    let we = &space.energy.weights;
    let mut out = vec![0.0; ly.n_vox];
    for s in 0..3 {
        for e in 0..ly.n_e {
            let lv = psi.level(s, e);
            for (v, o) in out.iter_mut().enumerate() {
                let c = sp.at(s, e, v, ly.n_vox) * we[e];
                if c == 0.0 {
                    continue;
                }
                let row = &lv[v * ly.n_dir..(v + 1) * ly.n_dir];
                *o += c * row.iter().zip(wd).map(|(p, w)| p * w).sum::<f64>();
            }
        }
    }
    Ok(out)
}

/// D* d = (ς₁ d, ς₂ d, ς₃ d), the adjoint of [`dose`] for the voxel and phase inner products.
pub fn dose_adjoint(space: &PhaseSpace, d: &[f64], sp: &StoppingPowers) -> Result<SpeciesField> {
    let ly = space.layout();
    check_stopping(ly, sp)?;
    if d.len() != ly.n_vox {
        return Err(Error::Shape(format!("dose field has {} entries, grid has {} voxels", d.len(), ly.n_vox)));
    }
    let mut out = SpeciesField::zeros(ly);
    for s in 0..3 {
        for e in 0..ly.n_e {
            let lv = out.level_mut(s, e);
            for v in 0..ly.n_vox {
                let c = sp.at(s, e, v, ly.n_vox) * d[v];
                lv[v * ly.n_dir..(v + 1) * ly.n_dir].iter_mut().for_each(|x| *x = c);
            }
        }
    }
    Ok(out)
}

fn check_stopping(ly: Layout, sp: &StoppingPowers) -> Result<()> {
    if sp.values.iter().any(|v| v.len() != ly.n_e * ly.n_vox) {
        return Err(Error::Shape("stopping powers do not match the grid".into()));
    }
    Ok(())
}

/// γ₋ of a cell field: the value of the adjacent cell on every inflow (face, direction)
/// pair, zero elsewhere.
pub fn inflow_trace(space: &PhaseSpace, psi: &SpeciesField) -> Result<BoundaryField> {
    let ly = space.layout();
    psi.check_layout(ly)?;
    let bd = &space.boundary;
    let mut t = space.zero_boundary();
    for s in 0..3 {
        for e in 0..ly.n_e {
            for (f, face) in bd.faces.iter().enumerate() {
                for d in 0..bd.n_dir {
                    if bd.side(f, d) == Side::Inflow {
                        t.set(s, e, f, d, psi.species(s)[ly.idx(e, face.voxel, d)]);
                    }
                }
            }
        }
    }
    Ok(t)
}

/// Negative part (a)₋ = (|a| − a)/2.
#[inline]
pub fn neg_part(a: f64) -> f64 {
    (a.abs() - a) / 2.0
}

/// Logistic approximation of the Heaviside function.
#[inline]
pub fn smooth_heaviside(t: f64, eps: f64) -> f64 {
    1.0 / (1.0 + (-t / eps).exp())
}

/// Volume fraction of `mask` receiving dose strictly above `level` (exact Heaviside).
pub fn dvh_fraction(space: &PhaseSpace, dose: &[f64], mask: &[bool], level: f64) -> Result<f64> {
    if dose.len() != mask.len() {
        return Err(Error::Shape("dose and mask lengths differ".into()));
    }
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::Invalid("empty region mask".into()));
    }
    let vol = space.spatial.voxel_volume();
    let above: f64 = dose.iter().zip(mask).filter(|(d, m)| **m && **d > level).map(|_| vol).sum();
    Ok(above / (n as f64 * vol))
}

/// Cumulative DVH table: (dose level, fraction of the mask above it).
pub fn dvh_curve(space: &PhaseSpace, dose: &[f64], mask: &[bool], levels: &[f64]) -> Result<Vec<(f64, f64)>> {
    levels.iter().map(|l| Ok((*l, dvh_fraction(space, dose, mask, *l)?))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Weights {
    pub target: f64,
    pub critical: f64,
    pub normal: f64,
    pub dose_volume: f64,
    pub admissibility: f64,
    pub stabilizer: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Weights {
            target: 1.0,
            critical: 1.0,
            normal: 1.0,
            dose_volume: 0.0,
            admissibility: 0.0,
            stabilizer: 1.0,
        }
    }
}

/// Dose prescription over the target, critical and normal regions of the voxel labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prescription {
    /// D₀ on the target.
    pub target_dose: f64,
    /// D_C, upper level on critical organs.
    pub critical_dose: f64,
    /// D_N, upper level on normal tissue.
    pub normal_dose: f64,
    /// d_C and v_C of the dose-volume constraint.
    pub dv_level: f64,
    pub dv_fraction: f64,
    pub weights: Weights,
    /// Smoothing width of H_ε; defaults to 0.02·d_C.
    pub eps: Option<f64>,
    /// Initializer targets d_𝒯, d_𝒞, d_𝒩 per voxel; default to the constant levels.
    #[serde(skip)]
    pub targets: Option<[Vec<f64>; 3]>,
}

impl Default for Prescription {
    fn default() -> Self {
        Prescription {
            target_dose: 1.0,
            critical_dose: 0.2,
            normal_dose: 0.3,
            dv_level: 0.5,
            dv_fraction: 0.2,
            weights: Weights::default(),
            eps: None,
            targets: None,
        }
    }
}

impl Prescription {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        for (name, x) in [
            ("target", w.target),
            ("critical", w.critical),
            ("normal", w.normal),
            ("dose_volume", w.dose_volume),
            ("admissibility", w.admissibility),
            ("stabilizer", w.stabilizer),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::Invalid(format!("weight {name} must be nonnegative, got {x}")));
            }
        }
        if !(0.0..=1.0).contains(&self.dv_fraction) {
            return Err(Error::Invalid(format!("dose-volume fraction {} outside [0, 1]", self.dv_fraction)));
        }
        if let Some(e) = self.eps {
            if !(e > 0.0) {
                return Err(Error::Invalid(format!("smoothing width must be positive, got {e}")));
            }
        }
        Ok(())
    }

    pub fn eps(&self) -> f64 {
        self.eps.unwrap_or(0.02 * self.dv_level.abs()).max(f64::MIN_POSITIVE)
    }

    /// Masks of target, critical and normal voxels. Together they cover every active voxel.
    pub fn masks(space: &PhaseSpace) -> [Vec<bool>; 3] {
        let n = space.spatial.n_active();
        let m = |l: RegionLabel| (0..n).map(|a| space.spatial.label(a) == l).collect::<Vec<_>>();
        [m(RegionLabel::Target), m(RegionLabel::Critical), m(RegionLabel::Normal)]
    }

    /// Target dose fields of the initializer, zero outside their masks.
    pub fn target_fields(&self, space: &PhaseSpace) -> Result<[Vec<f64>; 3]> {
        let masks = Self::masks(space);
        let n = space.spatial.n_active();
        let fields = match &self.targets {
            Some(t) => {
                if t.iter().any(|x| x.len() != n) {
                    return Err(Error::Shape("initializer target fields do not match the voxel count".into()));
                }
                t.clone()
            }
            None => {
                let lv = [self.target_dose, self.critical_dose, self.normal_dose];
                [0, 1, 2].map(|r| vec![lv[r]; n])
            }
        };
        Ok([0, 1, 2].map(|r| fields[r].iter().zip(&masks[r]).map(|(x, m)| if *m { *x } else { 0.0 }).collect()))
    }

    fn region_weights(&self) -> [f64; 3] {
        [self.weights.target, self.weights.critical, self.weights.normal]
    }
}

/// A control: inflow data g on Γ₋ or a volumetric source f on G×S×I.
#[derive(Clone, Debug, PartialEq)]
pub enum Control {
    External(BoundaryField),
    Internal(SpeciesField),
}

impl Control {
    pub fn data(&self) -> &[f64] {
        match self {
            Control::External(g) => &g.data,
            Control::Internal(f) => &f.data,
        }
    }

    fn data_mut(&mut self) -> &mut [f64] {
        match self {
            Control::External(g) => &mut g.data,
            Control::Internal(f) => &mut f.data,
        }
    }

    fn stamp(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for x in self.data() {
            x.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ObjectiveBreakdown {
    pub target: f64,
    pub critical: f64,
    pub normal: f64,
    pub dose_volume: f64,
    pub admissibility: f64,
    pub stabilizer: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct KktReport {
    /// max over the control support of (−s)₊, s = −γ₋ψ* + c_sc·ḡ (or −ψ* + c_sc·f̄).
    /// For the unconstrained variant: the T² (or W) norm of s.
    pub stationarity: f64,
    /// |Σ ḡ·s| in the control quadrature.
    pub complementarity: f64,
    /// max |ḡ·s| over the support, without weights.
    pub pointwise_complementarity: f64,
    /// max (−ḡ)₊.
    pub primal_feasibility: f64,
    /// max |γ₋ψ*| over the support, for scaling the numbers above.
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    /// ‖g̃ − g‖ / ‖g‖ of the undamped update.
    pub step: f64,
    pub theta: f64,
}

/// Control with its forward and adjoint states, dose and diagnostics.
#[derive(Clone, Debug)]
pub struct PlanState {
    pub control: Control,
    pub psi: SpeciesField,
    pub psistar: SpeciesField,
    pub dose: Vec<f64>,
    /// Value of the initializer objective.
    pub objective: f64,
    pub breakdown: ObjectiveBreakdown,
    pub kkt: Option<KktReport>,
    pub log: Vec<IterationRecord>,
    stamp: u64,
}

impl PlanState {
    /// Errors when the control was modified after the states were computed.
    pub fn check_fresh(&self) -> Result<()> {
        if self.control.stamp() != self.stamp {
            return Err(Error::Invalid("plan state is stale: control changed since the last solve".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointOptions {
    pub theta: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Give up once the halved damping drops below this.
    pub min_theta: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            theta: 0.5,
            tol: 1e-10,
            max_iter: 200,
            min_theta: 1e-6,
        }
    }
}

/// Transport operator, stopping powers and prescription of one planning problem.
#[derive(Clone, Debug)]
pub struct Planner {
    pub op: Arc<TransportOperator>,
    pub stopping: StoppingPowers,
    pub rx: Prescription,
    pub solver: SolverOptions,
    /// Species that carry a control; the others stay zero.
    pub controlled: [bool; 3],
}

impl Planner {
    pub fn new(op: Arc<TransportOperator>, stopping: StoppingPowers, rx: Prescription, solver: SolverOptions) -> Result<Self> {
        rx.validate()?;
        check_stopping(op.layout(), &stopping)?;
        rx.target_fields(&op.space)?;
        Ok(Planner {
            op,
            stopping,
            rx,
            solver,
            controlled: [true; 3],
        })
    }

    pub fn with_controlled(mut self, controlled: [bool; 3]) -> Self {
        self.controlled = controlled;
        self
    }

    fn space(&self) -> &PhaseSpace {
        &self.op.space
    }

    /// Support of an external control: inflow pairs of controlled species. Charged species
    /// exclude the E_m level, where inflow data would break continuity in energy.
    pub fn external_support(&self) -> Vec<bool> {
        let sp = self.space();
        let bd = &sp.boundary;
        let z = sp.zero_boundary();
        let mut m = vec![false; z.data.len()];
        for s in 0..3 {
            if !self.controlled[s] {
                continue;
            }
            let first = if self.op.is_charged(s) { 1 } else { 0 };
            for e in first..z.n_e {
                for f in 0..bd.len() {
                    for d in 0..bd.n_dir {
                        if bd.side(f, d) == Side::Inflow {
                            m[z.idx(s, e, f, d)] = true;
                        }
                    }
                }
            }
        }
        m
    }

    pub fn internal_support(&self) -> Vec<bool> {
        let ly = self.op.layout();
        (0..3).flat_map(|s| std::iter::repeat_n(self.controlled[s], ly.block())).collect()
    }

    fn support(&self, control: &Control) -> Vec<bool> {
        match control {
            Control::External(_) => self.external_support(),
            Control::Internal(_) => self.internal_support(),
        }
    }

    /// Quadrature weight of every control entry (T²(Γ) or W).
    fn control_weights(&self, control: &Control) -> Vec<f64> {
        let sp = self.space();
        match control {
            Control::External(g) => {
                let bd = &sp.boundary;
                let mut w = vec![0.0; g.data.len()];
                for s in 0..3 {
                    for e in 0..g.n_e {
                        for f in 0..bd.len() {
                            for d in 0..bd.n_dir {
                                w[g.idx(s, e, f, d)] = bd.t2_weight(f, d, e);
                            }
                        }
                    }
                }
                w
            }
            Control::Internal(_) => {
                let bw = sp.block_weights();
                (0..3).flat_map(|_| bw.iter().copied()).collect()
            }
        }
    }

    pub fn zero_external(&self) -> Control {
        Control::External(self.space().zero_boundary())
    }

    pub fn zero_internal(&self) -> Control {
        Control::Internal(SpeciesField::zeros(self.op.layout()))
    }

    /// Weighted inner product of two controls of the same kind, restricted to the support.
    pub fn control_inner(&self, a: &Control, b: &Control) -> Result<f64> {
        same_kind(a, b)?;
        let w = self.control_weights(a);
        let sup = self.support(a);
        Ok(a.data()
            .iter()
            .zip(b.data())
            .zip(w.iter().zip(&sup))
            .filter(|(_, (_, m))| **m)
            .map(|((x, y), (w, _))| w * x * y)
            .sum())
    }

    pub fn control_norm(&self, a: &Control) -> Result<f64> {
        Ok(self.control_inner(a, a)?.max(0.0).sqrt())
    }

    fn check_control(&self, control: &Control) -> Result<()> {
        match control {
            Control::External(g) => self.op.check_boundary(g)?,
            Control::Internal(f) => f.check_layout(self.op.layout())?,
        }
        let sup = self.support(control);
        if control.data().iter().zip(&sup).any(|(x, m)| !m && *x != 0.0) {
            return Err(Error::Invalid("control is nonzero outside its support".into()));
        }
        if control.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite control".into()));
        }
        Ok(())
    }

    fn forward(&self, control: &Control, guess: Option<&SpeciesField>) -> Result<SpeciesField> {
        let ly = self.op.layout();
        let (f, g) = match control {
            Control::External(g) => (SpeciesField::zeros(ly), g.clone()),
            Control::Internal(f) => (f.clone(), self.space().zero_boundary()),
        };
        let p = TransportProblem::forward(self.op.clone(), f, g, self.solver.strictness)?;
        Ok(solve_with_guess(&p, &self.solver, guess)?.0)
    }

    /// Residual Dψ − d_R on every region, with region weights c_R applied.
    fn weighted_misfit(&self, dose: &[f64]) -> Result<Vec<f64>> {
        let masks = Prescription::masks(self.space());
        let t = self.rx.target_fields(self.space())?;
        let c = self.rx.region_weights();
        let mut r = vec![0.0; dose.len()];
        for k in 0..3 {
            for v in 0..dose.len() {
                if masks[k][v] {
                    r[v] += c[k] * (dose[v] - t[k][v]);
                }
            }
        }
        Ok(r)
    }

    /// Initializer objective Σ_R c_R‖d_R − D‖²_{L²(R)} + c_sc‖control‖² with its terms.
    pub fn initializer_breakdown(&self, dose: &[f64], control: &Control) -> Result<ObjectiveBreakdown> {
        let sp = self.space();
        let vol = sp.spatial.voxel_volume();
        let masks = Prescription::masks(sp);
        let t = self.rx.target_fields(sp)?;
        let c = self.rx.region_weights();
        let mut terms = [0.0; 3];
        for k in 0..3 {
            terms[k] = c[k] * vol * (0..dose.len()).filter(|v| masks[k][*v]).map(|v| (t[k][v] - dose[v]).powi(2)).sum::<f64>();
        }
        let stab = self.rx.weights.stabilizer * self.control_inner(control, control)?;
        Ok(ObjectiveBreakdown {
            target: terms[0],
            critical: terms[1],
            normal: terms[2],
            dose_volume: 0.0,
            admissibility: 0.0,
            stabilizer: stab,
            total: terms.iter().sum::<f64>() + stab,
        })
    }

    /// Forward solve and initializer objective; returns (J, ψ, D).
    pub fn evaluate(&self, control: &Control) -> Result<(f64, SpeciesField, Vec<f64>)> {
        self.check_control(control)?;
        let psi = self.forward(control, None)?;
        let d = dose(self.space(), &psi, &self.stopping)?;
        let j = self.initializer_breakdown(&d, control)?.total;
        Ok((j, psi, d))
    }

    /// Forward and adjoint states of `control`. The adjoint solves A*ψ* = −f* with
    /// f* = D*(Σ c_R e_R (Dψ − d_R)) and zero outflow data.
    pub fn state(&self, control: Control) -> Result<PlanState> {
        self.state_with_guess(control, None)
    }

    fn state_with_guess(&self, control: Control, prev: Option<&PlanState>) -> Result<PlanState> {
        self.check_control(&control)?;
        let psi = self.forward(&control, prev.map(|p| &p.psi))?;
        let d = dose(self.space(), &psi, &self.stopping)?;
        let mis = self.weighted_misfit(&d)?;
        let fstar = dose_adjoint(self.space(), &mis, &self.stopping)?.scaled(-1.0);
        let p = TransportProblem::adjoint(self.op.clone(), fstar, self.space().zero_boundary(), self.solver.strictness)?;
        let psistar = solve_with_guess(&p, &self.solver, prev.map(|p| &p.psistar))?.0;
        let breakdown = self.initializer_breakdown(&d, &control)?;
        let stamp = control.stamp();
        Ok(PlanState {
            control,
            psi,
            psistar,
            dose: d,
            objective: breakdown.total,
            breakdown,
            kkt: None,
            log: Vec::new(),
            stamp,
        })
    }

    /// γ₋(ψ*) for external controls, ψ* for internal ones, zero off the support.
    pub fn adjoint_trace(&self, plan: &PlanState) -> Result<Control> {
        plan.check_fresh()?;
        let sup = self.support(&plan.control);
        let mut out = match &plan.control {
            Control::External(_) => Control::External(inflow_trace(self.space(), &plan.psistar)?),
            Control::Internal(_) => Control::Internal(plan.psistar.clone()),
        };
        out.data_mut().iter_mut().zip(&sup).for_each(|(x, m)| {
            if !m {
                *x = 0.0
            }
        });
        Ok(out)
    }

    /// J′ in the control's own inner product: −2γ₋ψ* + 2c_sc·g (or −2ψ* + 2c_sc·f).
    pub fn gradient(&self, plan: &PlanState) -> Result<Control> {
        let mut t = self.adjoint_trace(plan)?;
        let c = self.rx.weights.stabilizer;
        t.data_mut().iter_mut().zip(plan.control.data()).for_each(|(x, g)| *x = -2.0 * *x + 2.0 * c * g);
        Ok(t)
    }

    fn stabilizer(&self) -> Result<f64> {
        let c = self.rx.weights.stabilizer;
        if !(c > 0.0) {
            return Err(Error::Invalid("the fixed point needs a positive stabilizer weight c_sc".into()));
        }
        Ok(c)
    }

    /// Damped projected fixed point g ← (1−θ)g + θ(γ₋ψ*)₊/c_sc.
    pub fn optimize_external(&self, start: Option<Control>, fp: &FixedPointOptions) -> Result<PlanState> {
        let start = start.unwrap_or_else(|| self.zero_external());
        if !matches!(start, Control::External(_)) {
            return Err(Error::Invalid("external optimization needs an inflow control".into()));
        }
        self.fixed_point(start, fp, true)
    }

    /// Damped projected fixed point f ← (1−θ)f + θ(ψ*)₊/c_sc.
    pub fn optimize_internal(&self, start: Option<Control>, fp: &FixedPointOptions) -> Result<PlanState> {
        let start = start.unwrap_or_else(|| self.zero_internal());
        if !matches!(start, Control::Internal(_)) {
            return Err(Error::Invalid("internal optimization needs a volumetric control".into()));
        }
        self.fixed_point(start, fp, true)
    }

    /// Fixed point of the unconstrained linear system ḡ = γ₋ψ*/c_sc. The damping is not
    /// adapted; a residual growing for ten iterations in a row is reported as divergence.
    pub fn optimize_linear_unconstrained(&self, start: Option<Control>, fp: &FixedPointOptions) -> Result<PlanState> {
        let start = start.unwrap_or_else(|| self.zero_external());
        self.fixed_point(start, fp, false)
    }

    /// (γ₋ψ*)₊/c_sc at the state of `plan`, the starting point handed to a global optimizer.
    pub fn exported_initial_point(&self, plan: &PlanState) -> Result<Control> {
        let c = self.stabilizer()?;
        let mut t = self.adjoint_trace(plan)?;
        t.data_mut().iter_mut().for_each(|x| *x = x.max(0.0) / c);
        Ok(t)
    }

    fn fixed_point(&self, start: Control, fp: &FixedPointOptions, project: bool) -> Result<PlanState> {
        let c = self.stabilizer()?;
        if !(fp.theta > 0.0 && fp.theta <= 1.0) || !(fp.tol > 0.0) {
            return Err(Error::Invalid(format!(
                "damping {} must lie in (0, 1] and tol {} be positive",
                fp.theta, fp.tol
            )));
        }
        let mut theta = fp.theta;
        let mut plan = self.state(start)?;
        let mut log = Vec::new();
        let mut history = Vec::new();
        let mut prev_res = f64::INFINITY;
        let mut growing = 0;
        for it in 0..fp.max_iter {
            let mut target = self.adjoint_trace(&plan)?;
            target.data_mut().iter_mut().for_each(|x| *x = if project { x.max(0.0) } else { *x } / c);
            let mut diff = target.clone();
            diff.data_mut().iter_mut().zip(plan.control.data()).for_each(|(x, g)| *x -= g);
            let res = self.control_norm(&diff)?;
            let gnorm = self.control_norm(&plan.control)?;
            let step = if gnorm > 0.0 { res / gnorm } else { res };
            log.push(IterationRecord {
                iteration: it,
                objective: plan.objective,
                step,
                theta,
            });
            history.push(res);
            log::debug!("fixed point {it}: J = {:.6e}, residual {res:.3e}, theta {theta}", plan.objective);
            if res <= fp.tol * gnorm || res == 0.0 {
                // Finish on the undamped update so the returned control satisfies the
                // optimality system to the solver tolerance.
                let mut done = self.state_with_guess(target, Some(&plan))?;
                done.log = log;
                done.kkt = Some(self.kkt_residuals(&done, project)?);
                return Ok(done);
            }
            if res > prev_res {
                if project {
                    theta *= 0.5;
                    if theta < fp.min_theta {
                        return Err(Error::NonConvergence {
                            iterations: it + 1,
                            residual: res,
                            history,
                        });
                    }
                } else {
                    growing += 1;
                    if growing >= 10 {
                        return Err(Error::Domain(format!(
                            "fixed point diverging (residual grew for 10 iterations, now {res:.3e}); retry with a damping below {theta}"
                        )));
                    }
                }
            } else {
                growing = 0;
            }
            prev_res = res;
            let mut next = plan.control.clone();
            next.data_mut()
                .iter_mut()
                .zip(target.data())
                .for_each(|(g, t)| *g = (1.0 - theta) * *g + theta * t);
            plan = self.state_with_guess(next, Some(&plan))?;
        }
        Err(Error::NonConvergence {
            iterations: fp.max_iter,
            residual: *history.last().unwrap_or(&f64::NAN),
            history,
        })
    }

    /// Stationarity, complementarity and feasibility of `plan` for the projected
    /// (`constrained = true`) or the unconstrained optimality system.
    pub fn kkt_residuals(&self, plan: &PlanState, constrained: bool) -> Result<KktReport> {
        let c = self.rx.weights.stabilizer;
        let t = self.adjoint_trace(plan)?;
        let w = self.control_weights(&plan.control);
        let sup = self.support(&plan.control);
        let mut rep = KktReport::default();
        let mut comp = 0.0;
        let mut s2 = 0.0;
        for (k, m) in sup.iter().enumerate() {
            if !m {
                continue;
            }
            let g = plan.control.data()[k];
            let s = -t.data()[k] + c * g;
            rep.scale = rep.scale.max(t.data()[k].abs());
            rep.primal_feasibility = rep.primal_feasibility.max(neg_part(g));
            rep.pointwise_complementarity = rep.pointwise_complementarity.max((g * s).abs());
            comp += w[k] * g * s;
            s2 += w[k] * s * s;
            if constrained {
                rep.stationarity = rep.stationarity.max(neg_part(s));
            }
        }
        rep.complementarity = comp.abs();
        if !constrained {
            rep.stationarity = s2.sqrt();
        }
        Ok(rep)
    }

    /// Full clinical objective with one-sided organ penalties, the smoothed dose-volume
    /// term and the admissibility penalty on the negative part of the control.
    pub fn objective_full(&self, plan: &PlanState) -> Result<ObjectiveBreakdown> {
        plan.check_fresh()?;
        objective_full(
            self.space(),
            &plan.dose,
            &plan.control,
            &self.control_weights(&plan.control),
            &self.support(&plan.control),
            &self.rx,
        )
    }
}

fn same_kind(a: &Control, b: &Control) -> Result<()> {
    match (a, b) {
        (Control::External(x), Control::External(y)) if x.same_shape(y) => Ok(()),
        (Control::Internal(x), Control::Internal(y)) if x.layout == y.layout => Ok(()),
        _ => Err(Error::Shape("controls are of different kinds or shapes".into())),
    }
}

/// Full objective for a given dose and control. `weights` are the control quadrature
/// weights and `support` the entries that count.
pub fn objective_full(space: &PhaseSpace, dose: &[f64], control: &Control, weights: &[f64], support: &[bool], rx: &Prescription) -> Result<ObjectiveBreakdown> {
    rx.validate()?;
    if dose.len() != space.spatial.n_active() {
        return Err(Error::Shape("dose does not match the voxel count".into()));
    }
    let vol = space.spatial.voxel_volume();
    let [mt, mc, mn] = Prescription::masks(space);
    let w = &rx.weights;
    let sum = |m: &[bool], f: &dyn Fn(f64) -> f64| -> f64 { dose.iter().zip(m).filter(|(_, m)| **m).map(|(d, _)| f(*d)).sum::<f64>() * vol };
    let target = w.target * sum(&mt, &|d| (rx.target_dose - d).powi(2));
    let critical = w.critical * sum(&mc, &|d| neg_part(rx.critical_dose - d).powi(2));
    let normal = w.normal * sum(&mn, &|d| neg_part(rx.normal_dose - d).powi(2));
    let n_c = mc.iter().filter(|m| **m).count();
    let dose_volume = if w.dose_volume > 0.0 && n_c > 0 {
        let eps = rx.eps();
        let frac = sum(&mc, &|d| smooth_heaviside(d - rx.dv_level, eps)) / (n_c as f64 * vol);
        w.dose_volume * neg_part(rx.dv_fraction - frac).powi(2)
    } else {
        0.0
    };
    let (mut neg2, mut all2) = (0.0, 0.0);
    for ((x, wt), m) in control.data().iter().zip(weights).zip(support) {
        if *m {
            neg2 += wt * neg_part(*x).powi(2);
            all2 += wt * x * x;
        }
    }
    let admissibility = w.admissibility * neg2;
    let stabilizer = w.stabilizer * all2;
    Ok(ObjectiveBreakdown {
        target,
        critical,
        normal,
        dose_volume,
        admissibility,
        stabilizer,
        total: target + critical + normal + dose_volume + admissibility + stabilizer,
    })
}
