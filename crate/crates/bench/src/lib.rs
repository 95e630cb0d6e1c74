//! Benchmark fixtures shared by the criterion targets.

use csda_core::fields::SpeciesField;
use csda_core::scenario::{Scenario, ScenarioParams};

/// Default toy scenario on a `n`³ voxel grid.
pub fn scenario(n: usize) -> Scenario {
    let mut p = ScenarioParams::default();
    p.grid.dims = [n; 3];
    Scenario::build(&p).expect("benchmark scenario")
}

/// Smooth, nonconstant field over the layout of `s`.
pub fn smooth_field(s: &Scenario) -> SpeciesField {
    let ly = s.op.layout();
    let mut f = SpeciesField::zeros(ly);
    for (i, x) in f.data.iter_mut().enumerate() {
        *x = 1.0 + 0.5 * ((i % 97) as f64 * 0.13).sin();
    }
    f
}
