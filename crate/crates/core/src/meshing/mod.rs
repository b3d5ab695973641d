//! Zero-level-set extraction by marching cubes and area-weighted mesh
//! sampling.

mod tables;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::canonicalize::{write_ply_mesh, Frame, PlyFormat, PointCloud};
use crate::error::{Error, Result};
use crate::rng;
use tables::{EDGE_TABLE, TRI_TABLE};

/// Default grid resolution for reconstructions.
pub const DEFAULT_RESOLUTION: usize = 128;

/// Indexed triangle soup. Watertightness is not guaranteed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: &[f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        0.5 * norm(&cross(&sub(&b, &a), &sub(&c, &a)))
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Signed enclosed volume; positive when triangles wind outward.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                let x = cross(&b, &c);
                (a[0] * x[0] + a[1] * x[1] + a[2] * x[2]) / 6.0
            })
            .sum()
    }

    /// Indices in range, finite vertices, no degenerate triangles.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some(i) = self.vertices.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::Structural(format!("mesh vertex {i} is not finite")));
        }
        for (k, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&i| i >= n) {
                return Err(Error::Structural(format!("triangle {k} indexes past {n} vertices")));
            }
            if self.triangle_area(k) <= 1e-12 {
                return Err(Error::Structural(format!("triangle {k} is degenerate")));
            }
        }
        Ok(())
    }

    /// Wavefront OBJ with `v` and 1-based `f` records.
    pub fn to_obj(&self) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 40 + self.triangles.len() * 24);
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }

    /// Parses the `v` and triangular `f` records of an OBJ file.
    pub fn read_obj(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut mesh = TriangleMesh::default();
        for (ln, line) in text.lines().enumerate() {
            let mut w = line.split_whitespace();
            let bad = || Error::Format(format!("OBJ line {}: '{line}'", ln + 1));
            match w.next() {
                Some("v") => {
                    let c: Vec<f64> = w
                        .map(str::parse)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad())?;
                    if c.len() < 3 {
                        return Err(bad());
                    }
                    mesh.vertices.push([c[0], c[1], c[2]]);
                }
                Some("f") => {
                    let idx: Vec<usize> = w
                        .map(|t| t.split('/').next().unwrap_or("").parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad())?;
                    if idx.len() != 3 || idx.contains(&0) {
                        return Err(bad());
                    }
                    mesh.triangles.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
                }
                _ => {}
            }
        }
        if mesh.triangles.iter().flatten().any(|&i| i >= mesh.vertices.len()) {
            return Err(Error::Format("OBJ face index out of range".into()));
        }
        Ok(mesh)
    }

    pub fn write_ply(&self, path: &Path, format: PlyFormat) -> Result<()> {
        write_ply_mesh(path, &self.vertices, &self.triangles, Frame::Canonical, format)
    }
}

/// Cube corner offsets.
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

/// Corner pairs of the twelve cube edges.
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

/// Welding tolerance in grid units.
const WELD: f64 = 1e-7;

/// [`marching_cubes_in`] over the canonical cube `[-1, 1]³`.
pub fn marching_cubes<F>(field: F, resolution: usize) -> Result<TriangleMesh>
where
    F: Fn([f64; 3]) -> Result<f64> + Sync,
{
    marching_cubes_in(field, [-1.0; 3], [1.0; 3], resolution)
}

/// Triangulates `{x : field(x) = 0}` on a `resolution³` cell grid spanning
/// the box `[lo, hi]`. Grid values are evaluated in parallel slabs;
/// assembly is sequential, so the output does not depend on thread count.
pub fn marching_cubes_in<F>(field: F, lo: [f64; 3], hi: [f64; 3], resolution: usize) -> Result<TriangleMesh>
where
    F: Fn([f64; 3]) -> Result<f64> + Sync,
{
    if resolution < 8 {
        return Err(Error::InvalidArgument(format!("resolution {resolution} is below 8")));
    }
    if (0..3).any(|a| !(hi[a] > lo[a])) {
        return Err(Error::InvalidArgument("empty meshing bounds".into()));
    }
    let n = resolution + 1;
    let step: [f64; 3] = std::array::from_fn(|a| (hi[a] - lo[a]) / resolution as f64);
    let coord = |i: usize, a: usize| lo[a] + i as f64 * step[a];

    let slabs: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut slab = Vec::with_capacity(n * n);
            for j in 0..n {
                for i in 0..n {
                    let value = field([coord(i, 0), coord(j, 1), coord(k, 2)])?;
                    if !value.is_finite() {
                        return Err(Error::NonFinite {
                            term: format!("field at grid ({i}, {j}, {k})"),
                            index: (k * n + j) * n + i,
                            value,
                        });
                    }
                    slab.push(value);
                }
            }
            Ok(slab)
        })
        .collect();
    // first failing slab in grid order, independent of scheduling
    let slabs: Vec<Vec<f64>> = slabs.into_iter().collect::<Result<_>>()?;
    let value = |i: usize, j: usize, k: usize| slabs[k][j * n + i];

    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut edge_vertex: HashMap<(usize, usize, usize, usize), usize> = HashMap::new();
    let mut triangles = Vec::new();
    for k in 0..resolution {
        for j in 0..resolution {
            for i in 0..resolution {
                let vals: [f64; 8] = CORNERS.map(|c| value(i + c[0], j + c[1], k + c[2]));
                let case = (0..8).fold(0usize, |acc, c| acc | (usize::from(vals[c] < 0.0) << c));
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                let mut ids = [usize::MAX; 12];
                for (e, &[a, b]) in EDGES.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let (ca, cb) = (CORNERS[a], CORNERS[b]);
                    let axis = (0..3).find(|&d| ca[d] != cb[d]).expect("edge spans one axis");
                    let base = [i + ca[0].min(cb[0]), j + ca[1].min(cb[1]), k + ca[2].min(cb[2])];
                    let key = (base[0], base[1], base[2], axis);
                    ids[e] = *edge_vertex.entry(key).or_insert_with(|| {
                        let (va, vb) = (vals[a], vals[b]);
                        let t = va / (va - vb);
                        let pa = [coord(i + ca[0], 0), coord(j + ca[1], 1), coord(k + ca[2], 2)];
                        let pb = [coord(i + cb[0], 0), coord(j + cb[1], 1), coord(k + cb[2], 2)];
                        vertices.push(std::array::from_fn(|d| pa[d] + t * (pb[d] - pa[d])));
                        vertices.len() - 1
                    });
                }
                for tri in TRI_TABLE[case].chunks(3).take_while(|t| t[0] >= 0) {
                    // the table winds clockwise seen from outside
                    triangles.push([ids[tri[0] as usize], ids[tri[2] as usize], ids[tri[1] as usize]]);
                }
            }
        }
    }
    Ok(clean(vertices, triangles, lo, step))
}

/// Welds coincident vertices, drops degenerate triangles and unused vertices.
fn clean(vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>, lo: [f64; 3], step: [f64; 3]) -> TriangleMesh {
    let mut weld: HashMap<[i64; 3], usize> = HashMap::new();
    let mut remap = Vec::with_capacity(vertices.len());
    for (idx, v) in vertices.iter().enumerate() {
        let key = std::array::from_fn(|d| ((v[d] - lo[d]) / step[d] / WELD).round() as i64);
        remap.push(*weld.entry(key).or_insert(idx));
    }
    let mut mesh = TriangleMesh {
        vertices,
        triangles: Vec::with_capacity(triangles.len()),
    };
    for t in triangles {
        let t = t.map(|i| remap[i]);
        if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
            continue;
        }
        mesh.triangles.push(t);
        if mesh.triangle_area(mesh.triangles.len() - 1) <= 1e-12 {
            mesh.triangles.pop();
        }
    }
    let mut used = vec![usize::MAX; mesh.vertices.len()];
    let mut kept = Vec::new();
    for t in &mut mesh.triangles {
        for i in t.iter_mut() {
            if used[*i] == usize::MAX {
                used[*i] = kept.len();
                kept.push(mesh.vertices[*i]);
            }
            *i = used[*i];
        }
    }
    mesh.vertices = kept;
    mesh
}

/// `n` points drawn uniformly by area from the mesh surface.
pub fn sample_mesh_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud> {
    if mesh.is_empty() {
        return Err(Error::InvalidArgument("cannot sample an empty mesh".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for t in 0..mesh.triangles.len() {
        acc += mesh.triangle_area(t);
        cdf.push(acc);
    }
    let mut r = rng::stream(seed, "mesh-surface");
    let points = (0..n)
        .map(|_| {
            let u = r.random_range(0.0..acc);
            let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangles[t].map(|i| mesh.vertices[i]);
            let s = r.random::<f64>().sqrt();
            let w = r.random::<f64>();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - w), s * w);
            std::array::from_fn(|d| wa * a[d] + wb * b[d] + wc * c[d])
        })
        .collect();
    Ok(PointCloud::new(points, Frame::Canonical))
}
