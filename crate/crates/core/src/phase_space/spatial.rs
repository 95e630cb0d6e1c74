use crate::error::{Error, Result};
use crate::linalg::Vec3;
use serde::{Deserialize, Serialize};

/// Tissue class of a voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionLabel {
    Outside,
    Target,
    Critical,
    Normal,
}

impl RegionLabel {
    /// Byte encoding used by label files: 0 outside, 1 target, 2 critical, 3 normal.
    pub fn from_u8(b: u8) -> Result<Self> {
        match b {
            0 => Ok(RegionLabel::Outside),
            1 => Ok(RegionLabel::Target),
            2 => Ok(RegionLabel::Critical),
            3 => Ok(RegionLabel::Normal),
            _ => Err(Error::Invalid(format!("unknown region label byte {b}"))),
        }
    }

    pub fn to_u8(self) -> u8 {
        match self {
            RegionLabel::Outside => 0,
            RegionLabel::Target => 1,
            RegionLabel::Critical => 2,
            RegionLabel::Normal => 3,
        }
    }
}

/// Neighbour of an active voxel across one of its six faces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Neighbor {
    Voxel(usize),
    Boundary(usize),
}

/// A face of an active voxel lying on the boundary of G.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelFace {
    /// Active voxel index.
    pub voxel: usize,
    /// 0..6 as -x, +x, -y, +y, -z, +z.
    pub side: usize,
    pub normal: Vec3,
    pub area: f64,
    pub center: Vec3,
}

pub fn side_normal(side: usize) -> Vec3 {
    let mut n = [0.0; 3];
    n[side / 2] = if side.is_multiple_of(2) { -1.0 } else { 1.0 };
    n
}

/// Uniform voxel mesh with a region label per voxel; non-outside voxels form G.
#[derive(Clone, Debug)]
pub struct SpatialGrid {
    pub origin: Vec3,
    pub spacing: Vec3,
    pub dims: [usize; 3],
    pub labels: Vec<RegionLabel>,
    active: Vec<usize>,
    lookup: Vec<usize>,
    neighbors: Vec<[Neighbor; 6]>,
    faces: Vec<VoxelFace>,
}

const INACTIVE: usize = usize::MAX;

impl SpatialGrid {
    pub fn new(origin: Vec3, spacing: Vec3, dims: [usize; 3], labels: Vec<RegionLabel>) -> Result<Self> {
        if spacing.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
            return Err(Error::Invalid(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if n == 0 {
            return Err(Error::Invalid("grid has zero voxels".into()));
        }
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {} voxels", labels.len(), n)));
        }
        let mut active = Vec::new();
        let mut lookup = vec![INACTIVE; n];
        for (i, l) in labels.iter().enumerate() {
            if *l != RegionLabel::Outside {
                lookup[i] = active.len();
                active.push(i);
            }
        }
        if active.is_empty() {
            return Err(Error::Invalid("label map has no voxel inside G".into()));
        }
        let mut grid = SpatialGrid {
            origin,
            spacing,
            dims,
            labels,
            active,
            lookup,
            neighbors: Vec::new(),
            faces: Vec::new(),
        };
        grid.build_topology();
        Ok(grid)
    }

    /// Box of `dims` voxels all carrying `label`.
    pub fn uniform_box(origin: Vec3, spacing: Vec3, dims: [usize; 3], label: RegionLabel) -> Result<Self> {
        Self::new(origin, spacing, dims, vec![label; dims[0] * dims[1] * dims[2]])
    }

    fn build_topology(&mut self) {
        let mut neighbors = Vec::with_capacity(self.active.len());
        let mut faces = Vec::new();
        for (a, &g) in self.active.iter().enumerate() {
            let ijk = self.unflatten(g);
            let mut nb = [Neighbor::Boundary(0); 6];
            for (side, slot) in nb.iter_mut().enumerate() {
                let axis = side / 2;
                let step: isize = if side % 2 == 0 { -1 } else { 1 };
                let mut q = [ijk[0] as isize, ijk[1] as isize, ijk[2] as isize];
                q[axis] += step;
                let inside = (0..3).all(|k| q[k] >= 0 && (q[k] as usize) < self.dims[k]);
                let other = if inside {
                    self.lookup[self.flatten([q[0] as usize, q[1] as usize, q[2] as usize])]
                } else {
                    INACTIVE
                };
                *slot = if other != INACTIVE {
                    Neighbor::Voxel(other)
                } else {
                    let normal = side_normal(side);
                    let area = (0..3).filter(|k| *k != axis).map(|k| self.spacing[k]).product();
                    let mut center = self.center_of(a);
                    center[axis] += 0.5 * self.spacing[axis] * normal[axis];
                    faces.push(VoxelFace {
                        voxel: a,
                        side,
                        normal,
                        area,
                        center,
                    });
                    Neighbor::Boundary(faces.len() - 1)
                };
            }
            neighbors.push(nb);
        }
        self.neighbors = neighbors;
        self.faces = faces;
    }

    #[inline]
    pub fn flatten(&self, ijk: [usize; 3]) -> usize {
        ijk[0] + self.dims[0] * (ijk[1] + self.dims[1] * ijk[2])
    }

    #[inline]
    pub fn unflatten(&self, g: usize) -> [usize; 3] {
        let i = g % self.dims[0];
        let j = (g / self.dims[0]) % self.dims[1];
        let k = g / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    /// Grid index of an active voxel.
    pub fn grid_index(&self, a: usize) -> usize {
        self.active[a]
    }

    /// Active index of a grid voxel, if it belongs to G.
    pub fn active_index(&self, g: usize) -> Option<usize> {
        match self.lookup[g] {
            INACTIVE => None,
            a => Some(a),
        }
    }

    pub fn label(&self, a: usize) -> RegionLabel {
        self.labels[self.active[a]]
    }

    pub fn neighbors(&self, a: usize) -> &[Neighbor; 6] {
        &self.neighbors[a]
    }

    pub fn boundary_faces(&self) -> &[VoxelFace] {
        &self.faces
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Lebesgue measure of G.
    pub fn measure(&self) -> f64 {
        self.voxel_volume() * self.n_active() as f64
    }

    pub fn face_area(&self, side: usize) -> f64 {
        let axis = side / 2;
        (0..3).filter(|k| *k != axis).map(|k| self.spacing[k]).product()
    }

    pub fn center_of(&self, a: usize) -> Vec3 {
        let ijk = self.unflatten(self.active[a]);
        [
            self.origin[0] + (ijk[0] as f64 + 0.5) * self.spacing[0],
            self.origin[1] + (ijk[1] as f64 + 0.5) * self.spacing[1],
            self.origin[2] + (ijk[2] as f64 + 0.5) * self.spacing[2],
        ]
    }

    fn cell_of(&self, x: Vec3) -> Option<[isize; 3]> {
        let mut c = [0isize; 3];
        for k in 0..3 {
            let t = ((x[k] - self.origin[k]) / self.spacing[k]).floor();
            if !t.is_finite() {
                return None;
            }
            c[k] = t as isize;
        }
        Some(c)
    }

    fn is_active_cell(&self, c: [isize; 3]) -> bool {
        if (0..3).any(|k| c[k] < 0 || c[k] as usize >= self.dims[k]) {
            return false;
        }
        self.lookup[self.flatten([c[0] as usize, c[1] as usize, c[2] as usize])] != INACTIVE
    }

    /// Active voxel containing `x`, if any.
    pub fn locate(&self, x: Vec3) -> Option<usize> {
        let c = self.cell_of(x)?;
        if !self.is_active_cell(c) {
            return None;
        }
        self.active_index(self.flatten([c[0] as usize, c[1] as usize, c[2] as usize]))
    }

    /// Distance travelled backwards along `omega` from `x` before leaving G.
    pub fn escape_time(&self, x: Vec3, omega: Vec3) -> Result<f64> {
        let mut cell = self
            .cell_of(x)
            .filter(|c| self.is_active_cell(*c))
            .ok_or_else(|| Error::Domain(format!("point {x:?} is outside G")))?;
        let dir = [-omega[0], -omega[1], -omega[2]];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        let mut step = [0isize; 3];
        for k in 0..3 {
            if dir[k] > 0.0 {
                step[k] = 1;
                let edge = self.origin[k] + (cell[k] + 1) as f64 * self.spacing[k];
                t_max[k] = (edge - x[k]) / dir[k];
                t_delta[k] = self.spacing[k] / dir[k];
            } else if dir[k] < 0.0 {
                step[k] = -1;
                let edge = self.origin[k] + cell[k] as f64 * self.spacing[k];
                t_max[k] = (edge - x[k]) / dir[k];
                t_delta[k] = -self.spacing[k] / dir[k];
            }
        }
        loop {
            let mut axis = 0;
            for k in 1..3 {
                if t_max[k] < t_max[axis] {
                    axis = k;
                }
            }
            let t = t_max[axis];
            if !t.is_finite() {
                return Err(Error::Domain("direction has zero length".into()));
            }
            cell[axis] += step[axis];
            if !self.is_active_cell(cell) {
                return Ok(t.max(0.0));
            }
            t_max[axis] += t_delta[axis];
        }
    }
}
