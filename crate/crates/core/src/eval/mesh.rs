use std::collections::HashMap;
use std::fmt::Write as _;

use super::mc_tables::{EDGE_TABLE, TRIANGLE_TABLE};
use crate::error::{Error, Result};
use crate::field::{sample_index, DisplacementField, Mask, Vec3};

/// Indexed triangle surface in world millimetres. Triangles are wound so
/// normals point out of the enclosed region.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    /// Optional per-vertex scalar such as strain.
    pub attribute: Option<Vec<f64>>,
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let m = Self {
            vertices,
            triangles,
            attribute: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|v| *v >= n) {
                return Err(Error::InvalidArgument(format!(
                    "triangle {i} indexes past {n} vertices"
                )));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::InvalidArgument(format!(
                    "triangle {i} is degenerate: {t:?}"
                )));
            }
        }
        if let Some(a) = &self.attribute {
            if a.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "attribute has {} values for {n} vertices",
                    a.len()
                )));
            }
        }
        if self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mesh vertex".into()));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                let n = cross(sub(b, a), sub(c, a));
                0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
            })
            .sum()
    }

    /// Enclosed volume; positive for outward-wound closed surfaces.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                let n = cross(b, c);
                (a[0] * n[0] + a[1] * n[1] + a[2] * n[2]) / 6.0
            })
            .sum()
    }

    fn edge_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut edges = HashMap::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        self.edge_counts().values().all(|c| *c == 2)
    }

    /// `V − E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for v in t {
                used[*v] = true;
            }
        }
        let v = used.iter().filter(|u| **u).count() as i64;
        v - self.edge_counts().len() as i64 + self.triangles.len() as i64
    }

    /// Wavefront OBJ text: `v x y z` lines then 1-based `f i j k` lines.
    pub fn to_obj(&self) -> String {
        let mut s = String::with_capacity(32 * (self.vertices.len() + self.triangles.len()));
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    /// Parses `v` and triangular `f` records; other records are ignored.
    /// Face entries may carry `/texture/normal` suffixes.
    pub fn from_obj(text: &str) -> Result<Self> {
        let bad =
            |line: usize, msg: &str| Error::InvalidArgument(format!("OBJ line {line}: {msg}"));
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let xyz: Vec<f64> = parts
                        .take(3)
                        .map(|p| p.parse::<f64>().map_err(|_| bad(ln + 1, "bad coordinate")))
                        .collect::<Result<_>>()?;
                    if xyz.len() != 3 {
                        return Err(bad(ln + 1, "vertex needs 3 coordinates"));
                    }
                    vertices.push([xyz[0], xyz[1], xyz[2]]);
                }
                Some("f") => {
                    let idx: Vec<usize> = parts
                        .map(|p| {
                            p.split('/')
                                .next()
                                .and_then(|i| i.parse::<usize>().ok())
                                .filter(|i| *i >= 1)
                                .map(|i| i - 1)
                                .ok_or_else(|| bad(ln + 1, "bad face index"))
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() != 3 {
                        return Err(bad(ln + 1, "only triangular faces are supported"));
                    }
                    triangles.push([idx[0], idx[1], idx[2]]);
                }
                _ => {}
            }
        }
        Self::new(vertices, triangles)
    }
}

/// Cube corner offsets in table order.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs joined by each cube edge.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Isosurface at 0.5 of the mask as a 0/1 field. The grid is padded with a
/// virtual layer of zeros so the surface is closed even where the mask
/// touches the boundary.
pub fn marching_cubes(mask: &Mask) -> TriMesh {
    let field: Vec<f64> = mask.labels.iter().map(|l| f64::from(*l)).collect();
    extract(mask, &field, 0.5)
}

/// As [`marching_cubes`] after one pass of 6-neighbour box smoothing, for
/// cosmetic meshes.
pub fn marching_cubes_smoothed(mask: &Mask) -> TriMesh {
    let g = mask.grid;
    let [nx, ny, nz] = g.dims;
    let v = |i: isize, j: isize, k: isize| -> f64 {
        if i < 0 || j < 0 || k < 0 || i >= nx as isize || j >= ny as isize || k >= nz as isize {
            0.0
        } else {
            f64::from(mask.labels[g.index(i as usize, j as usize, k as usize)])
        }
    };
    let field = (0..g.len())
        .map(|idx| {
            let [i, j, k] = g.coords(idx).map(|c| c as isize);
            (v(i, j, k)
                + v(i - 1, j, k)
                + v(i + 1, j, k)
                + v(i, j - 1, k)
                + v(i, j + 1, k)
                + v(i, j, k - 1)
                + v(i, j, k + 1))
                / 7.0
        })
        .collect::<Vec<_>>();
    extract(mask, &field, 0.5)
}

fn extract(mask: &Mask, field: &[f64], iso: f64) -> TriMesh {
    let g = mask.grid;
    let [nx, ny, nz] = g.dims;
    // padded lattice coordinates run from -1 to n
    let value = |p: [isize; 3]| -> f64 {
        if p[0] < 0
            || p[1] < 0
            || p[2] < 0
            || p[0] >= nx as isize
            || p[1] >= ny as isize
            || p[2] >= nz as isize
        {
            0.0
        } else {
            field[g.index(p[0] as usize, p[1] as usize, p[2] as usize)]
        }
    };
    let (px, py) = (nx as isize + 2, ny as isize + 2);
    let edge_key = |p: [isize; 3], axis: usize| -> u64 {
        ((((p[2] + 1) * py + (p[1] + 1)) * px + (p[0] + 1)) as u64) * 3 + axis as u64
    };

    let mut mesh = TriMesh::default();
    let mut ids: HashMap<u64, usize> = HashMap::new();
    for k in -1..nz as isize {
        for j in -1..ny as isize {
            for i in -1..nx as isize {
                let corner = |c: usize| {
                    [
                        i + CORNERS[c][0] as isize,
                        j + CORNERS[c][1] as isize,
                        k + CORNERS[c][2] as isize,
                    ]
                };
                let vals: [f64; 8] = std::array::from_fn(|c| value(corner(c)));
                let mut case = 0usize;
                for (c, v) in vals.iter().enumerate() {
                    if *v < iso {
                        case |= 1 << c;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut vert = |e: usize| -> usize {
                    let [a, b] = EDGES[e];
                    let (pa, pb) = (corner(a), corner(b));
                    // the edge's lower corner and axis identify it globally
                    let axis = (0..3)
                        .find(|ax| pa[*ax] != pb[*ax])
                        .expect("edge spans one axis");
                    let (lo, vlo, vhi) = if pa[axis] < pb[axis] {
                        (pa, vals[a], vals[b])
                    } else {
                        (pb, vals[b], vals[a])
                    };
                    *ids.entry(edge_key(lo, axis)).or_insert_with(|| {
                        let t = (iso - vlo) / (vhi - vlo);
                        let mut p = [0.0; 3];
                        for ax in 0..3 {
                            let idx = lo[ax] as f64 + if ax == axis { t } else { 0.0 };
                            p[ax] = g.origin[ax] + idx * g.spacing[ax];
                        }
                        mesh.vertices.push(p);
                        mesh.vertices.len() - 1
                    })
                };
                let row = &TRIANGLE_TABLE[case];
                let mut n = 0;
                while n < 16 && row[n] >= 0 {
                    let tri = [
                        vert(row[n] as usize),
                        vert(row[n + 1] as usize),
                        vert(row[n + 2] as usize),
                    ];
                    mesh.triangles.push(tri);
                    n += 3;
                }
            }
        }
    }
    if mesh.signed_volume() < 0.0 {
        for t in mesh.triangles.iter_mut() {
            t.swap(1, 2);
        }
    }
    mesh
}

/// Moves every vertex by the field sampled (trilinear, edge-clamped) at its
/// position. Connectivity and attributes are kept.
pub fn warp_mesh(mesh: &TriMesh, dvf: &DisplacementField) -> TriMesh {
    let g = dvf.grid;
    let channels = [dvf.component(0), dvf.component(1), dvf.component(2)];
    let vertices = mesh
        .vertices
        .iter()
        .map(|p| {
            let idx = g.to_index(*p);
            [0, 1, 2].map(|a| p[a] + sample_index(&channels[a], g.dims, idx))
        })
        .collect();
    TriMesh {
        vertices,
        triangles: mesh.triangles.clone(),
        attribute: mesh.attribute.clone(),
    }
}
