use crate::linalg::{add, cross, det3, dot, mat_vec, normalize, Mat3, Vec3};
use std::collections::HashMap;
use std::f64::consts::PI;

/// Edge of the sphere mesh carrying its finite-volume Laplacian weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereEdge {
    pub i: usize,
    pub j: usize,
    /// Geodesic length of the primal edge.
    pub length: f64,
    /// Dual (Voronoi) edge length divided by the primal length.
    pub weight: f64,
}

/// Icosahedral geodesic mesh of S with Voronoi quadrature weights and a
/// finite-volume Laplace-Beltrami operator.
///
/// The symmetric matrix `lb_matrix = -Gᵀ C G` (G the edge difference operator,
/// C the diagonal edge weights) is the weak form of Δ_S; the strong form is
/// `W⁻¹ lb_matrix` with W the node weights.
#[derive(Clone, Debug)]
pub struct SphereGrid {
    pub nodes: Vec<Vec3>,
    pub weights: Vec<f64>,
    pub triangles: Vec<[usize; 3]>,
    pub edges: Vec<SphereEdge>,
    node_triangles: Vec<Vec<usize>>,
    /// CSR rows of lb_matrix: (column, value).
    lb_rows: Vec<Vec<(usize, f64)>>,
}

/// Signed solid angle of the spherical triangle (a, b, c).
pub fn spherical_triangle_area(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let num = det3(a, b, c);
    let den = 1.0 + dot(a, b) + dot(b, c) + dot(c, a);
    2.0 * num.atan2(den)
}

fn geodesic(a: Vec3, b: Vec3) -> f64 {
    // atan2 form is accurate for nearly parallel vectors
    cross(a, b).iter().map(|x| x * x).sum::<f64>().sqrt().atan2(dot(a, b))
}

fn icosahedron() -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let p = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, p, 0.0],
        [1.0, p, 0.0],
        [-1.0, -p, 0.0],
        [1.0, -p, 0.0],
        [0.0, -1.0, p],
        [0.0, 1.0, p],
        [0.0, -1.0, -p],
        [0.0, 1.0, -p],
        [p, 0.0, -1.0],
        [p, 0.0, 1.0],
        [-p, 0.0, -1.0],
        [-p, 0.0, 1.0],
    ];
    let nodes = raw.iter().map(|v| normalize(*v)).collect();
    let tris = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (nodes, tris)
}

impl SphereGrid {
    /// Geodesic mesh from `level` midpoint subdivisions of the icosahedron
    /// (10·4^level + 2 nodes).
    pub fn build(level: usize) -> SphereGrid {
        let (mut nodes, mut tris) = icosahedron();
        for _ in 0..level {
            let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
            let mut next = Vec::with_capacity(tris.len() * 4);
            let mut mid = |a: usize, b: usize, nodes: &mut Vec<Vec3>| -> usize {
                let key = (a.min(b), a.max(b));
                *cache.entry(key).or_insert_with(|| {
                    nodes.push(normalize(add(nodes[a], nodes[b])));
                    nodes.len() - 1
                })
            };
            for t in &tris {
                let ab = mid(t[0], t[1], &mut nodes);
                let bc = mid(t[1], t[2], &mut nodes);
                let ca = mid(t[2], t[0], &mut nodes);
                next.push([t[0], ab, ca]);
                next.push([t[1], bc, ab]);
                next.push([t[2], ca, bc]);
                next.push([ab, bc, ca]);
            }
            tris = next;
        }
        Self::from_mesh(nodes, tris)
    }

    fn from_mesh(nodes: Vec<Vec3>, mut tris: Vec<[usize; 3]>) -> SphereGrid {
        let n = nodes.len();
        for t in tris.iter_mut() {
            if det3(nodes[t[0]], nodes[t[1]], nodes[t[2]]) < 0.0 {
                t.swap(1, 2);
            }
        }
        let mut weights = vec![0.0; n];
        let mut dual: HashMap<(usize, usize), f64> = HashMap::new();
        let mut node_triangles = vec![Vec::new(); n];
        for (ti, t) in tris.iter().enumerate() {
            let [a, b, c] = [nodes[t[0]], nodes[t[1]], nodes[t[2]]];
            let cc = normalize(cross(crate::linalg::sub(b, a), crate::linalg::sub(c, a)));
            for k in 0..3 {
                let (i, j) = (t[k], t[(k + 1) % 3]);
                let (p, q) = (nodes[i], nodes[j]);
                let m = normalize(add(p, q));
                // Voronoi pieces of the two edge endpoints inside this triangle
                weights[i] += spherical_triangle_area(p, m, cc);
                weights[j] += spherical_triangle_area(q, cc, m);
                let sign = if det3(p, q, cc) >= 0.0 { 1.0 } else { -1.0 };
                *dual.entry((i.min(j), i.max(j))).or_insert(0.0) += sign * geodesic(m, cc);
            }
            for &v in t {
                node_triangles[v].push(ti);
            }
        }
        let mut keys: Vec<_> = dual.keys().copied().collect();
        keys.sort_unstable();
        let edges: Vec<SphereEdge> = keys
            .iter()
            .map(|&(i, j)| {
                let length = geodesic(nodes[i], nodes[j]);
                SphereEdge {
                    i,
                    j,
                    length,
                    weight: dual[&(i, j)] / length,
                }
            })
            .collect();
        let mut lb_rows: Vec<Vec<(usize, f64)>> = (0..n).map(|i| vec![(i, 0.0)]).collect();
        for e in &edges {
            lb_rows[e.i][0].1 -= e.weight;
            lb_rows[e.j][0].1 -= e.weight;
            lb_rows[e.i].push((e.j, e.weight));
            lb_rows[e.j].push((e.i, e.weight));
        }
        SphereGrid {
            nodes,
            weights,
            triangles: tris,
            edges,
            node_triangles,
            lb_rows,
        }
    }

    /// The same mesh rotated by the orthogonal matrix `r`.
    pub fn rotated(&self, r: &Mat3) -> SphereGrid {
        let mut g = self.clone();
        for v in g.nodes.iter_mut() {
            *v = mat_vec(r, *v);
        }
        g
    }

    /// The mesh rotated so that node `node` lands exactly on the unit vector `target`.
    pub fn aligned(&self, node: usize, target: Vec3) -> SphereGrid {
        let frame = |n: Vec3| -> Mat3 {
            let n = normalize(n);
            let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let p = normalize(cross(n, helper));
            [n, p, cross(n, p)]
        };
        let (fa, fb) = (frame(self.nodes[node]), frame(target));
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (0..3).map(|k| fb[k][i] * fa[k][j]).sum();
            }
        }
        let mut g = self.rotated(&r);
        g.nodes[node] = normalize(target);
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Row `i` of the symmetric weak Laplacian as (column, value) pairs; entry 0 is the diagonal.
    pub fn lb_row(&self, i: usize) -> &[(usize, f64)] {
        &self.lb_rows[i]
    }

    /// `out = lb_matrix · u`.
    pub fn lb_weak_apply(&self, u: &[f64], out: &mut [f64]) {
        for (i, row) in self.lb_rows.iter().enumerate() {
            out[i] = row.iter().map(|(j, v)| v * u[*j]).sum();
        }
    }

    /// Strong discrete Laplace-Beltrami operator `W⁻¹ lb_matrix u`.
    pub fn laplace_beltrami(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        self.lb_weak_apply(u, &mut out);
        for (o, w) in out.iter_mut().zip(&self.weights) {
            *o /= w;
        }
        out
    }

    /// Edge differences `G u`.
    pub fn gradient(&self, u: &[f64]) -> Vec<f64> {
        self.edges.iter().map(|e| u[e.j] - u[e.i]).collect()
    }

    /// Discrete H¹(S) seminorm squared, ⟨G u, C G u⟩.
    pub fn h1_seminorm2(&self, u: &[f64]) -> f64 {
        self.edges
            .iter()
            .map(|e| {
                let d = u[e.j] - u[e.i];
                e.weight * d * d
            })
            .sum()
    }

    /// Dense copy of lb_matrix (row-major), intended for small meshes and tests.
    pub fn lb_dense(&self) -> Vec<f64> {
        let n = self.len();
        let mut m = vec![0.0; n * n];
        for (i, row) in self.lb_rows.iter().enumerate() {
            for (j, v) in row {
                m[i * n + j] += v;
            }
        }
        m
    }

    pub fn weighted_dot(&self, u: &[f64], v: &[f64]) -> f64 {
        u.iter().zip(v).zip(&self.weights).map(|((a, b), w)| a * b * w).sum()
    }

    /// Index of the node closest to `p`.
    pub fn nearest_node(&self, p: Vec3) -> usize {
        let mut best = 0;
        let mut bd = f64::NEG_INFINITY;
        for (i, n) in self.nodes.iter().enumerate() {
            let d = dot(*n, p);
            if d > bd {
                bd = d;
                best = i;
            }
        }
        best
    }

    fn barycentric(&self, t: usize, p: Vec3) -> [f64; 3] {
        let [a, b, c] = self.triangles[t].map(|i| self.nodes[i]);
        let la = det3(p, b, c);
        let lb = det3(a, p, c);
        let lc = det3(a, b, p);
        let s = la + lb + lc;
        [la / s, lb / s, lc / s]
    }

    /// Piecewise-linear interpolation stencil at the unit vector `p`:
    /// the nodes of the spherical triangle containing `p` with nonnegative
    /// weights summing to 1.
    pub fn interpolation_stencil(&self, p: Vec3) -> [(usize, f64); 3] {
        let near = self.nearest_node(p);
        let tol = -1e-12;
        let pick = |t: usize| -> Option<[(usize, f64); 3]> {
            let l = self.barycentric(t, p);
            if l.iter().all(|x| *x >= tol) && dot(self.nodes[self.triangles[t][0]], p) > 0.0 {
                Some(self.clamped(t, l))
            } else {
                None
            }
        };
        for &t in &self.node_triangles[near] {
            if let Some(s) = pick(t) {
                return s;
            }
        }
        let mut best = (0, f64::NEG_INFINITY);
        for t in 0..self.triangles.len() {
            if let Some(s) = pick(t) {
                return s;
            }
            let l = self.barycentric(t, p);
            let m = l.iter().cloned().fold(f64::INFINITY, f64::min);
            if dot(self.nodes[self.triangles[t][0]], p) > 0.0 && m > best.1 {
                best = (t, m);
            }
        }
        self.clamped(best.0, self.barycentric(best.0, p))
    }

    fn clamped(&self, t: usize, l: [f64; 3]) -> [(usize, f64); 3] {
        let c = l.map(|x| x.max(0.0));
        let s: f64 = c.iter().sum();
        let tri = self.triangles[t];
        [(tri[0], c[0] / s), (tri[1], c[1] / s), (tri[2], c[2] / s)]
    }

    /// Interpolated value of the nodal function `u` at the unit vector `p`.
    pub fn interpolate(&self, u: &[f64], p: Vec3) -> f64 {
        self.interpolation_stencil(p).iter().map(|(i, w)| w * u[*i]).sum()
    }

    /// Quadrature of `f` over S with the node weights.
    pub fn integrate<F: Fn(Vec3) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(n, w)| w * f(*n)).sum()
    }

    pub fn full_sphere_area() -> f64 {
        4.0 * PI
    }
}
