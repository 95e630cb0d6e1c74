//! Field containers on the discrete phase space.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Particle species in cascade order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Species {
    Photon = 0,
    Electron = 1,
    Positron = 2,
}

impl Species {
    pub const ALL: [Species; 3] = [Species::Photon, Species::Electron, Species::Positron];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Species {
        Species::ALL[i]
    }

    /// Charged species carry the energy drift and angular diffusion terms.
    pub fn is_charged(self) -> bool {
        !matches!(self, Species::Photon)
    }

    pub fn name(self) -> &'static str {
        match self {
            Species::Photon => "photon",
            Species::Electron => "electron",
            Species::Positron => "positron",
        }
    }
}

/// Index layout of one species block: energy-major, then voxel, then direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_e: usize,
    pub n_vox: usize,
    pub n_dir: usize,
}

impl Layout {
    pub fn new(n_e: usize, n_vox: usize, n_dir: usize) -> Self {
        Layout { n_e, n_vox, n_dir }
    }

    #[inline]
    pub fn idx(&self, e: usize, v: usize, d: usize) -> usize {
        (e * self.n_vox + v) * self.n_dir + d
    }

    /// Number of entries of one species block.
    pub fn block(&self) -> usize {
        self.n_e * self.n_vox * self.n_dir
    }

    /// Number of entries of one energy level.
    pub fn level(&self) -> usize {
        self.n_vox * self.n_dir
    }
}

/// Photon, electron and positron densities on G×S×I.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeciesField {
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl SpeciesField {
    pub fn zeros(layout: Layout) -> Self {
        SpeciesField {
            layout,
            data: vec![0.0; 3 * layout.block()],
        }
    }

    pub fn from_data(layout: Layout, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * layout.block() {
            return Err(Error::Shape(format!("species field needs {} values, got {}", 3 * layout.block(), data.len())));
        }
        Ok(SpeciesField { layout, data })
    }

    pub fn filled(layout: Layout, value: f64) -> Self {
        SpeciesField {
            layout,
            data: vec![value; 3 * layout.block()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, s: usize, e: usize, v: usize, d: usize) -> usize {
        s * self.layout.block() + self.layout.idx(e, v, d)
    }

    pub fn species(&self, s: usize) -> &[f64] {
        let b = self.layout.block();
        &self.data[s * b..(s + 1) * b]
    }

    pub fn species_mut(&mut self, s: usize) -> &mut [f64] {
        let b = self.layout.block();
        &mut self.data[s * b..(s + 1) * b]
    }

    pub fn level(&self, s: usize, e: usize) -> &[f64] {
        let b = self.layout.block();
        let l = self.layout.level();
        &self.data[s * b + e * l..s * b + (e + 1) * l]
    }

    pub fn level_mut(&mut self, s: usize, e: usize) -> &mut [f64] {
        let b = self.layout.block();
        let l = self.layout.level();
        &mut self.data[s * b + e * l..s * b + (e + 1) * l]
    }

    pub fn axpy(&mut self, alpha: f64, other: &SpeciesField) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> SpeciesField {
        SpeciesField {
            layout: self.layout,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn check_layout(&self, layout: Layout) -> Result<()> {
        if self.layout != layout || self.data.len() != 3 * layout.block() {
            return Err(Error::Shape(format!("field layout {:?} does not match grid layout {:?}", self.layout, layout)));
        }
        Ok(())
    }
}

/// Values attached to boundary (face, direction) pairs for every species and energy level.
///
/// Whether an entry lives on the inflow or the outflow part is decided by the
/// boundary classification; unused entries are kept at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryField {
    pub n_e: usize,
    pub n_faces: usize,
    pub n_dir: usize,
    pub data: Vec<f64>,
}

impl BoundaryField {
    pub fn zeros(n_e: usize, n_faces: usize, n_dir: usize) -> Self {
        BoundaryField {
            n_e,
            n_faces,
            n_dir,
            data: vec![0.0; 3 * n_e * n_faces * n_dir],
        }
    }

    #[inline]
    pub fn idx(&self, s: usize, e: usize, f: usize, d: usize) -> usize {
        ((s * self.n_e + e) * self.n_faces + f) * self.n_dir + d
    }

    #[inline]
    pub fn get(&self, s: usize, e: usize, f: usize, d: usize) -> f64 {
        self.data[self.idx(s, e, f, d)]
    }

    #[inline]
    pub fn set(&mut self, s: usize, e: usize, f: usize, d: usize, v: f64) {
        let i = self.idx(s, e, f, d);
        self.data[i] = v;
    }

    pub fn scaled(&self, alpha: f64) -> BoundaryField {
        BoundaryField {
            data: self.data.iter().map(|v| v * alpha).collect(),
            ..*self
        }
    }

    pub fn same_shape(&self, other: &BoundaryField) -> bool {
        self.n_e == other.n_e && self.n_faces == other.n_faces && self.n_dir == other.n_dir
    }
}
