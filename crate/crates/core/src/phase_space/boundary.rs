use super::{EnergyGrid, SpatialGrid, SphereGrid};
use crate::linalg::{dot, Vec3};

/// Tolerance below which ω·ν counts as tangential.
pub const TANGENT_TOL: f64 = 1e-12;

/// Part of Γ a (face, direction) pair belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Inflow,
    Outflow,
    Tangent,
}

/// Boundary faces of G with their ω·ν values and T²(Γ) weights.
#[derive(Clone, Debug)]
pub struct BoundaryFaceSet {
    pub faces: Vec<super::spatial::VoxelFace>,
    pub n_dir: usize,
    /// ω·ν per (face, direction).
    dots: Vec<f64>,
    /// |ω·ν|·area·ω-weight per (face, direction).
    flux: Vec<f64>,
    energy_weights: Vec<f64>,
}

impl BoundaryFaceSet {
    pub fn classify(spatial: &SpatialGrid, sphere: &SphereGrid, energy: &EnergyGrid) -> Self {
        let faces = spatial.boundary_faces().to_vec();
        let n_dir = sphere.len();
        let mut dots = Vec::with_capacity(faces.len() * n_dir);
        let mut flux = Vec::with_capacity(faces.len() * n_dir);
        for f in &faces {
            for (d, w) in sphere.nodes.iter().zip(&sphere.weights) {
                let c = dot(*d, f.normal);
                let c = if c.abs() <= TANGENT_TOL { 0.0 } else { c };
                dots.push(c);
                flux.push(c.abs() * f.area * w);
            }
        }
        BoundaryFaceSet {
            faces,
            n_dir,
            dots,
            flux,
            energy_weights: energy.weights.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    #[inline]
    pub fn dot(&self, f: usize, d: usize) -> f64 {
        self.dots[f * self.n_dir + d]
    }

    #[inline]
    pub fn side(&self, f: usize, d: usize) -> Side {
        let c = self.dot(f, d);
        if c < 0.0 {
            Side::Inflow
        } else if c > 0.0 {
            Side::Outflow
        } else {
            Side::Tangent
        }
    }

    /// |ω·ν|·area·ω-weight, without the energy weight.
    #[inline]
    pub fn flux_weight(&self, f: usize, d: usize) -> f64 {
        self.flux[f * self.n_dir + d]
    }

    /// Full T²(Γ) quadrature weight of the (face, direction, level) triple.
    #[inline]
    pub fn t2_weight(&self, f: usize, d: usize, e: usize) -> f64 {
        self.flux[f * self.n_dir + d] * self.energy_weights[e]
    }

    pub fn normal(&self, f: usize) -> Vec3 {
        self.faces[f].normal
    }

    /// T²-measure of the part of Γ on `side`.
    pub fn measure(&self, side: Side) -> f64 {
        let ew: f64 = self.energy_weights.iter().sum();
        let mut m = 0.0;
        for f in 0..self.faces.len() {
            for d in 0..self.n_dir {
                if self.side(f, d) == side {
                    m += self.flux_weight(f, d);
                }
            }
        }
        m * ew
    }
}
