//! Discrete phase space G×S×I: voxel mesh, sphere mesh, energy levels and boundary sets.

mod boundary;
mod energy;
mod spatial;
mod sphere;

pub use boundary::{BoundaryFaceSet, Side, TANGENT_TOL};
pub use energy::EnergyGrid;
pub use spatial::{side_normal, Neighbor, RegionLabel, SpatialGrid, VoxelFace};
pub use sphere::{spherical_triangle_area, SphereEdge, SphereGrid};

use crate::error::{Error, Result};
use crate::fields::{BoundaryField, Layout};
use crate::linalg::Vec3;

/// The assembled discrete phase space.
#[derive(Clone, Debug)]
pub struct PhaseSpace {
    pub spatial: SpatialGrid,
    pub sphere: SphereGrid,
    pub energy: EnergyGrid,
    pub boundary: BoundaryFaceSet,
}

impl PhaseSpace {
    pub fn new(spatial: SpatialGrid, sphere: SphereGrid, energy: EnergyGrid) -> Self {
        let boundary = BoundaryFaceSet::classify(&spatial, &sphere, &energy);
        PhaseSpace {
            spatial,
            sphere,
            energy,
            boundary,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.energy.len(), self.spatial.n_active(), self.sphere.len())
    }

    /// Quadrature weight V·w_ω·w_E of the node (e, v, d).
    #[inline]
    pub fn weight(&self, e: usize, d: usize) -> f64 {
        self.spatial.voxel_volume() * self.sphere.weights[d] * self.energy.weights[e]
    }

    /// Per-entry quadrature weights of one species block.
    pub fn block_weights(&self) -> Vec<f64> {
        let l = self.layout();
        let mut w = Vec::with_capacity(l.block());
        for e in 0..l.n_e {
            for _ in 0..l.n_vox {
                for d in 0..l.n_dir {
                    w.push(self.weight(e, d));
                }
            }
        }
        w
    }

    pub fn zero_boundary(&self) -> BoundaryField {
        BoundaryField::zeros(self.energy.len(), self.boundary.len(), self.sphere.len())
    }

    /// ∫_G∫_S∫_I of a single-species field (trapezoid in E).
    pub fn integrate_phase(&self, field: &[f64]) -> Result<f64> {
        let l = self.layout();
        if field.len() != l.block() {
            return Err(Error::Shape(format!("field has {} entries, grid needs {}", field.len(), l.block())));
        }
        let vol = self.spatial.voxel_volume();
        let mut total = 0.0;
        for e in 0..l.n_e {
            let we = self.energy.weights[e];
            for v in 0..l.n_vox {
                let base = l.idx(e, v, 0);
                let s: f64 = field[base..base + l.n_dir].iter().zip(&self.sphere.weights).map(|(f, w)| f * w).sum();
                total += we * s;
            }
        }
        Ok(total * vol)
    }

    pub fn escape_time(&self, x: Vec3, omega: Vec3) -> Result<f64> {
        self.spatial.escape_time(x, omega)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn cube_space(n: usize, level: usize, ne: usize) -> PhaseSpace {
        let h = 1.0 / n as f64;
        let spatial = SpatialGrid::uniform_box([0.0; 3], [h; 3], [n; 3], RegionLabel::Normal).unwrap();
        PhaseSpace::new(spatial, SphereGrid::build(level), EnergyGrid::uniform(1.5, 4.0, ne).unwrap())
    }

    #[test]
    fn integrate_constant_and_zero() {
        let ps = cube_space(2, 1, 5);
        let b = ps.layout().block();
        assert_eq!(ps.integrate_phase(&vec![0.0; b]).unwrap(), 0.0);
        let one = ps.integrate_phase(&vec![1.0; b]).unwrap();
        assert!((one - 4.0 * PI * 2.5).abs() < 1e-6 * one);
        assert!(ps.integrate_phase(&[1.0]).is_err());
    }

    #[test]
    fn integrate_separable_field() {
        let ps = cube_space(3, 1, 6);
        let l = ps.layout();
        let u = |v: usize| 1.0 + ps.spatial.center_of(v)[0];
        let w = |d: usize| ps.sphere.nodes[d][2].powi(2);
        let z = |e: usize| ps.energy.levels[e].sqrt();
        let mut f = vec![0.0; l.block()];
        for e in 0..l.n_e {
            for v in 0..l.n_vox {
                for d in 0..l.n_dir {
                    f[l.idx(e, v, d)] = u(v) * w(d) * z(e);
                }
            }
        }
        let fx: f64 = (0..l.n_vox).map(|v| u(v) * ps.spatial.voxel_volume()).sum();
        let fo: f64 = (0..l.n_dir).map(|d| w(d) * ps.sphere.weights[d]).sum();
        let fe: f64 = (0..l.n_e).map(|e| z(e) * ps.energy.weights[e]).sum();
        let got = ps.integrate_phase(&f).unwrap();
        assert!((got - fx * fo * fe).abs() < 1e-12 * got.abs());
    }

    #[test]
    fn boundary_sides_partition_and_swap_under_reversal() {
        let ps = cube_space(2, 1, 3);
        let b = &ps.boundary;
        for f in 0..b.len() {
            let nu = b.normal(f);
            for d in 0..b.n_dir {
                let om = ps.sphere.nodes[d];
                let minus = ps
                    .sphere
                    .nodes
                    .iter()
                    .position(|n| (n[0] + om[0]).abs() < 1e-12 && (n[1] + om[1]).abs() < 1e-12 && (n[2] + om[2]).abs() < 1e-12);
                let s = b.side(f, d);
                let c = crate::linalg::dot(om, nu);
                match s {
                    Side::Inflow => assert!(c < 0.0),
                    Side::Outflow => assert!(c > 0.0),
                    Side::Tangent => assert!(c.abs() <= TANGENT_TOL),
                }
                if let Some(m) = minus {
                    let sm = b.side(f, m);
                    match s {
                        Side::Inflow => assert_eq!(sm, Side::Outflow),
                        Side::Outflow => assert_eq!(sm, Side::Inflow),
                        Side::Tangent => assert_eq!(sm, Side::Tangent),
                    }
                }
            }
        }
    }

    #[test]
    fn slab_normal_classification() {
        let ps = cube_space(1, 0, 2);
        let top = ps.boundary.faces.iter().position(|f| f.side == 5).unwrap();
        let sphere = SphereGrid::build(0);
        let g = sphere.rotated(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(g.len(), 12);
        // a direction pointing down through the top face enters G
        let down = ps.boundary.faces[top].normal.map(|c| -c);
        assert!(crate::linalg::dot(down, ps.boundary.normal(top)) < 0.0);
    }

    #[test]
    fn inflow_measure_of_unit_cube() {
        let ps = cube_space(1, 4, 4);
        let width = ps.energy.width();
        let inflow = ps.boundary.measure(Side::Inflow);
        let outflow = ps.boundary.measure(Side::Outflow);
        assert!((inflow - 6.0 * PI * width).abs() < 1e-3 * 6.0 * PI * width, "{inflow}");
        assert!((inflow + outflow - 12.0 * PI * width).abs() < 1e-3 * 12.0 * PI * width);
    }

    #[test]
    fn escape_chords_in_box() {
        let spatial = SpatialGrid::uniform_box([0.0; 3], [0.25, 0.25, 0.5], [4, 4, 2], RegionLabel::Normal).unwrap();
        let om = crate::linalg::normalize([0.3, -0.5, 0.8]);
        let x = [0.4, 0.6, 0.3];
        let t1 = spatial.escape_time(x, om).unwrap();
        let t2 = spatial.escape_time(x, om.map(|c| -c)).unwrap();
        // exact chord of the box [0,1]x[0,1]x[0,1] through x along om
        let mut tp = f64::INFINITY;
        let mut tm = f64::INFINITY;
        for k in 0..3 {
            if om[k] > 0.0 {
                tp = tp.min((1.0 - x[k]) / om[k]);
                tm = tm.min(x[k] / om[k]);
            } else if om[k] < 0.0 {
                tp = tp.min(-x[k] / om[k]);
                tm = tm.min((x[k] - 1.0) / om[k]);
            }
        }
        assert!((t1 + t2 - (tp + tm)).abs() < 1e-12);
        assert!((t1 - tm).abs() < 1e-12);
    }
}
