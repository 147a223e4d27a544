//! Isosurface extraction, surface sampling, mesh IO and Chamfer evaluation.

mod tables;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::camera::{cross, norm, sub, Vec3};
use crate::error::{Error, Result};
use crate::field::{FieldParams, LatentCode};

use tables::TRIANGLE_TABLE;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.corners(f);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    fn corners(&self, f: usize) -> [Vec3; 3] {
        self.faces[f].map(|i| self.vertices[i as usize])
    }

    /// Enclosed volume for a closed, outward-oriented mesh.
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.corners(f);
                crate::camera::dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    /// Number of undirected edges not shared by exactly two faces.
    pub fn non_manifold_edges(&self) -> usize {
        let mut count: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().filter(|&&c| c != 2).count()
    }

    /// Every edge borders exactly two faces.
    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.non_manifold_edges() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vertices.len() as u32;
        for (k, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= v) {
                return Err(Error::invalid(format!("face {k} indexes past {v} vertices")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::invalid(format!("face {k} repeats a vertex")));
            }
        }
        if let Some(c) = &self.colors {
            if c.len() != self.vertices.len() {
                return Err(Error::invalid("color count differs from vertex count"));
            }
        }
        Ok(())
    }
}

/// Scalar samples on a regular lattice, x varying fastest.
#[derive(Debug, Clone)]
pub struct ScalarGrid {
    pub dims: [usize; 3],
    pub lo: Vec3,
    pub spacing: Vec3,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    /// Lattice of `res` points per axis spanning `[lo, hi]`.
    pub fn lattice(res: usize, lo: Vec3, hi: Vec3) -> Result<Self> {
        if res < 2 {
            return Err(Error::invalid(format!("grid resolution must be at least 2, got {res}")));
        }
        if (0..3).any(|a| !(hi[a] > lo[a])) {
            return Err(Error::invalid("grid bounds must satisfy lo < hi on every axis"));
        }
        let spacing = [0, 1, 2].map(|a| (hi[a] - lo[a]) / (res - 1) as f64);
        Ok(ScalarGrid { dims: [res; 3], lo, spacing, values: vec![0.0; res * res * res] })
    }

    pub fn point(&self, x: usize, y: usize, z: usize) -> Vec3 {
        [
            self.lo[0] + x as f64 * self.spacing[0],
            self.lo[1] + y as f64 * self.spacing[1],
            self.lo[2] + z as f64 * self.spacing[2],
        ]
    }

    pub fn points(&self) -> Array2<f64> {
        let [nx, ny, nz] = self.dims;
        let mut pts = Array2::zeros((nx * ny * nz, 3));
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = self.point(x, y, z);
                    let mut row = pts.row_mut(x + nx * (y + ny * z));
                    row[0] = p[0];
                    row[1] = p[1];
                    row[2] = p[2];
                }
            }
        }
        pts
    }

    fn value(&self, x: isize, y: isize, z: isize) -> f64 {
        let [nx, ny, nz] = self.dims.map(|d| d as isize);
        if x < 0 || y < 0 || z < 0 || x >= nx || y >= ny || z >= nz {
            f64::NEG_INFINITY
        } else {
            self.values[(x + nx * (y + ny * z)) as usize]
        }
    }

    fn clamped_point(&self, x: isize, y: isize, z: isize) -> Vec3 {
        let c = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        self.point(c(x, self.dims[0]), c(y, self.dims[1]), c(z, self.dims[2]))
    }
}

const CORNERS: [[isize; 3]; 8] = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];
const EDGES: [[usize; 2]; 12] = [[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]];

/// Marching cubes on the `level` isosurface, with "inside" meaning
/// `value >= level`. Points outside the lattice count as outside, so every
/// surface is closed. Triangles face outward.
pub fn marching_cubes(grid: &ScalarGrid, level: f64) -> TriangleMesh {
    let [nx, ny, nz] = grid.dims.map(|d| d as isize);
    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: HashMap<(isize, isize, isize, usize), u32> = HashMap::new();
    for z in -1..nz {
        for y in -1..ny {
            for x in -1..nx {
                let vals = CORNERS.map(|c| grid.value(x + c[0], y + c[1], z + c[2]));
                let mut case = 0usize;
                for (k, v) in vals.iter().enumerate() {
                    if *v < level {
                        case |= 1 << k;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRIANGLE_TABLE[case];
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let mut ids = [0u32; 3];
                    for (slot, &e) in tri.iter().enumerate() {
                        let [a, b] = EDGES[e as usize];
                        let (ca, cb) = (CORNERS[a], CORNERS[b]);
                        let axis = (0..3).find(|&i| ca[i] != cb[i]).unwrap();
                        let base = [0, 1, 2].map(|i| ca[i].min(cb[i]));
                        let key = (x + base[0], y + base[1], z + base[2], axis);
                        ids[slot] = *edge_vertex.entry(key).or_insert_with(|| {
                            let pa = grid.clamped_point(x + ca[0], y + ca[1], z + ca[2]);
                            let pb = grid.clamped_point(x + cb[0], y + cb[1], z + cb[2]);
                            let (va, vb) = (vals[a], vals[b]);
                            let t = if va == f64::NEG_INFINITY {
                                1.0
                            } else if vb == f64::NEG_INFINITY {
                                0.0
                            } else {
                                ((level - va) / (vb - va)).clamp(0.0, 1.0)
                            };
                            mesh.vertices.push([0, 1, 2].map(|i| pa[i] + t * (pb[i] - pa[i])));
                            (mesh.vertices.len() - 1) as u32
                        });
                    }
                    mesh.faces.push(ids);
                }
            }
        }
    }
    mesh
}

/// Region over which the field is sampled for extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Bounds {
    pub fn cube(half: f64) -> Self {
        Bounds { lo: [-half; 3], hi: [half; 3] }
    }
}

/// Marching cubes on an `res^3` occupancy lattice of the learned field,
/// colored by the texture head at each vertex.
pub fn extract_mesh(params: &FieldParams, z: &LatentCode, res: usize, level: f64, bounds: Bounds) -> Result<TriangleMesh> {
    let mut grid = ScalarGrid::lattice(res, bounds.lo, bounds.hi)?;
    grid.values = params.occupancy(grid.points().view(), z)?.to_vec();
    let mut mesh = marching_cubes(&grid, level);
    let mut pts = Array2::zeros((mesh.vertices.len(), 3));
    for (k, v) in mesh.vertices.iter().enumerate() {
        pts.row_mut(k).assign(&ndarray::aview1(v));
    }
    let rgb = params.forward(pts.view(), z)?.rgb;
    mesh.colors = Some(rgb.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect());
    Ok(mesh)
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_surface<R: Rng + ?Sized>(mesh: &TriangleMesh, count: usize, rng: &mut R) -> Result<Vec<Vec3>> {
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::invalid("cannot sample a mesh with zero surface area"));
    }
    Ok((0..count)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            let f = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            let [a, b, c] = mesh.corners(f);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
            [0, 1, 2].map(|i| wa * a[i] + wb * b[i] + wc * c[i])
        })
        .collect())
}

/// Directed and symmetric nearest-neighbor distances between two samplings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    /// Mean distance from reconstruction samples to the reference.
    pub accuracy: f64,
    /// Mean distance from reference samples to the reconstruction.
    pub completeness: f64,
    pub chamfer_l1: f64,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "chamfer_l1={:.6} accuracy={:.6} completeness={:.6}", self.chamfer_l1, self.accuracy, self.completeness)
    }
}

/// Uniform bucket grid for exact nearest-neighbor queries.
pub struct PointGrid<'a> {
    points: &'a [Vec3],
    lo: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<u32>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("nearest-neighbor index needs at least one point"));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max).max(1e-12);
        let per_axis = (points.len() as f64 / 2.0).cbrt().ceil().clamp(1.0, 256.0);
        let cell = extent / per_axis;
        let dims = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / cell).floor() as usize + 1);
        let mut grid = PointGrid { points, lo, cell, dims, starts: Vec::new(), order: Vec::new() };
        let cells: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(*p))).collect();
        let mut starts = vec![0usize; dims[0] * dims[1] * dims[2] + 1];
        for &c in &cells {
            starts[c + 1] += 1;
        }
        for i in 1..starts.len() {
            starts[i] += starts[i - 1];
        }
        let mut fill = starts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c]] = i as u32;
            fill[c] += 1;
        }
        grid.starts = starts;
        grid.order = order;
        Ok(grid)
    }

    fn cell_of(&self, p: Vec3) -> [usize; 3] {
        [0, 1, 2].map(|a| (((p[a] - self.lo[a]) / self.cell).floor().max(0.0) as usize).min(self.dims[a] - 1))
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    /// Distance from `q` to the closest indexed point.
    pub fn nearest_distance(&self, q: Vec3) -> f64 {
        let c = self.cell_of(q).map(|v| v as isize);
        let max_ring = *self.dims.iter().max().unwrap() as isize;
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let cc = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if (0..3).any(|a| cc[a] < 0 || cc[a] >= self.dims[a] as isize) {
                            continue;
                        }
                        let k = self.flat(cc.map(|v| v as usize));
                        for &i in &self.order[self.starts[k]..self.starts[k + 1]] {
                            let d = norm(sub(q, self.points[i as usize]));
                            best = best.min(d);
                        }
                    }
                }
            }
            if best <= ring as f64 * self.cell {
                break;
            }
        }
        best
    }
}

fn mean_nearest(from: &[Vec3], to: &PointGrid) -> f64 {
    use rayon::prelude::*;
    from.par_iter().map(|&p| to.nearest_distance(p)).sum::<f64>() / from.len() as f64
}

/// Chamfer-L1 between reconstruction samples `a` and reference samples `b`.
pub fn chamfer_l1(a: &[Vec3], b: &[Vec3]) -> Result<EvalReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance needs two non-empty point sets"));
    }
    let accuracy = mean_nearest(a, &PointGrid::new(b)?);
    let completeness = mean_nearest(b, &PointGrid::new(a)?);
    Ok(EvalReport { accuracy, completeness, chamfer_l1: 0.5 * (accuracy + completeness) })
}

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Wavefront OBJ. Vertex colors, when present, follow each vertex as a
/// `#vc r g b` comment line.
pub fn write_obj<W: Write>(mesh: &TriangleMesh, mut w: W) -> std::io::Result<()> {
    writeln!(w, "# {} vertices, {} faces", mesh.vertices.len(), mesh.faces.len())?;
    for (k, v) in mesh.vertices.iter().enumerate() {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
        if let Some(c) = &mesh.colors {
            writeln!(w, "#vc {} {} {}", c[k][0], c[k][1], c[k][2])?;
        }
    }
    for f in &mesh.faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

pub fn read_obj<R: Read>(r: R, path: &Path) -> Result<TriangleMesh> {
    let mut mesh = TriangleMesh::default();
    let mut colors = Vec::new();
    for (n, line) in BufReader::new(r).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", n + 1));
        let mut it = line.split_whitespace();
        match it.next() {
            Some(tag @ ("v" | "#vc")) => {
                let vals: Vec<f64> = it.take(3).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad number"))?;
                let v: [f64; 3] = vals.try_into().map_err(|_| bad("expected three coordinates"))?;
                if tag == "v" {
                    mesh.vertices.push(v)
                } else {
                    colors.push(v)
                }
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|t| t.split('/').next().unwrap_or("").parse::<u32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("bad face index"))?;
                if idx.len() < 3 || idx.contains(&0) {
                    return Err(bad("faces need at least three 1-based indices"));
                }
                for k in 1..idx.len() - 1 {
                    mesh.faces.push([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1]);
                }
            }
            _ => {}
        }
    }
    if !colors.is_empty() {
        mesh.colors = Some(colors);
    }
    mesh.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(mesh)
}

/// Binary little-endian PLY with float positions and uchar colors.
pub fn write_ply<W: Write>(mesh: &TriangleMesh, mut w: W) -> std::io::Result<()> {
    let colored = mesh.colors.is_some();
    write!(w, "ply\nformat binary_little_endian 1.0\nelement vertex {}\n", mesh.vertices.len())?;
    w.write_all(b"property float x\nproperty float y\nproperty float z\n")?;
    if colored {
        w.write_all(b"property uchar red\nproperty uchar green\nproperty uchar blue\n")?;
    }
    write!(w, "element face {}\nproperty list uchar int vertex_indices\nend_header\n", mesh.faces.len())?;
    for (k, v) in mesh.vertices.iter().enumerate() {
        for c in v {
            w.write_all(&(*c as f32).to_le_bytes())?;
        }
        if let Some(cs) = &mesh.colors {
            w.write_all(&cs[k].map(to_u8))?;
        }
    }
    for f in &mesh.faces {
        w.write_all(&[3u8])?;
        for i in f {
            w.write_all(&(*i as i32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads the layout produced by [`write_ply`].
pub fn read_ply<R: Read>(r: R, path: &Path) -> Result<TriangleMesh> {
    let mut r = BufReader::new(r);
    let bad = |msg: String| Error::format(path, msg);
    let (mut nv, mut nf, mut colored) = (None, None, false);
    let mut first = true;
    loop {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("header not terminated".into()));
        }
        let line = line.trim();
        if first && line != "ply" {
            return Err(bad("missing `ply` magic".into()));
        }
        first = false;
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", fmt, _] if *fmt != "binary_little_endian" => return Err(bad(format!("unsupported format {fmt}"))),
            ["element", "vertex", n] => nv = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count".into()))?),
            ["element", "face", n] => nf = Some(n.parse::<usize>().map_err(|_| bad("bad face count".into()))?),
            ["property", "uchar", "red"] => colored = true,
            ["end_header"] => break,
            _ => {}
        }
    }
    let (nv, nf) = (nv.ok_or_else(|| bad("no vertex element".into()))?, nf.ok_or_else(|| bad("no face element".into()))?);
    let mut mesh = TriangleMesh { colors: colored.then(Vec::new), ..Default::default() };
    let truncated = |_| bad("truncated body".into());
    let mut f4 = [0u8; 4];
    for _ in 0..nv {
        let mut v = [0.0; 3];
        for c in &mut v {
            r.read_exact(&mut f4).map_err(truncated)?;
            *c = f32::from_le_bytes(f4) as f64;
        }
        mesh.vertices.push(v);
        if let Some(cs) = &mut mesh.colors {
            let mut rgb = [0u8; 3];
            r.read_exact(&mut rgb).map_err(truncated)?;
            cs.push(rgb.map(|b| b as f64 / 255.0));
        }
    }
    for k in 0..nf {
        let mut n = [0u8; 1];
        r.read_exact(&mut n).map_err(truncated)?;
        if n[0] != 3 {
            return Err(bad(format!("face {k} has {} vertices, expected 3", n[0])));
        }
        let mut f = [0u32; 3];
        for i in &mut f {
            r.read_exact(&mut f4).map_err(truncated)?;
            *i = i32::from_le_bytes(f4) as u32;
        }
        mesh.faces.push(f);
    }
    mesh.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(mesh)
}

/// Writes OBJ or PLY depending on the extension.
pub fn save_mesh(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let w = std::io::BufWriter::new(file);
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => write_ply(mesh, w),
        Some("obj") => write_obj(mesh, w),
        _ => return Err(Error::invalid(format!("{}: mesh path must end in .obj or .ply", path.display()))),
    }
    .map_err(|e| Error::io(path, e))
}

pub fn load_mesh(path: &Path) -> Result<TriangleMesh> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => read_ply(file, path),
        Some("obj") => read_obj(file, path),
        _ => Err(Error::invalid(format!("{}: mesh path must end in .obj or .ply", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::dot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_from(res: usize, half: f64, f: impl Fn(Vec3) -> f64) -> ScalarGrid {
        let mut g = ScalarGrid::lattice(res, [-half; 3], [half; 3]).unwrap();
        let [nx, ny, _] = g.dims;
        for k in 0..g.values.len() {
            let (x, y, z) = (k % nx, (k / nx) % ny, k / (nx * ny));
            g.values[k] = f(g.point(x, y, z));
        }
        g
    }

    fn brute_mean(a: &[Vec3], b: &[Vec3]) -> f64 {
        a.iter().map(|p| b.iter().map(|q| norm(sub(*p, *q))).fold(f64::INFINITY, f64::min)).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn sphere_surface_is_accurate_and_closed() {
        let res = 64;
        let g = grid_from(res, 1.0, |p| 0.5 - norm(p));
        let mesh = marching_cubes(&g, 0.0);
        mesh.validate().unwrap();
        let cell = 2.0 / (res - 1) as f64;
        assert!(mesh.vertices.iter().all(|v| (norm(*v) - 0.5).abs() <= 2.0 * cell));
        assert!(mesh.is_watertight());
        let vol = mesh.signed_volume();
        assert!((vol - 4.0 / 3.0 * std::f64::consts::PI * 0.125).abs() < 0.01, "{vol}");
        // Outward orientation: face normals point away from the center.
        let outward = (0..mesh.faces.len())
            .filter(|&f| {
                let [a, b, c] = mesh.corners(f);
                dot(cross(sub(b, a), sub(c, a)), a) > 0.0
            })
            .count();
        assert_eq!(outward, mesh.faces.len());
    }

    #[test]
    fn affine_field_vertices_on_level_set() {
        let g = grid_from(9, 1.0, |p| 0.3 * p[0] - 0.2 * p[1] + 0.7 * p[2] + 0.1);
        let mesh = marching_cubes(&g, 0.05);
        let inner: Vec<&Vec3> = mesh.vertices.iter().filter(|v| v.iter().all(|c| c.abs() < 1.0 - 1e-9)).collect();
        assert!(!inner.is_empty());
        for v in inner {
            assert!((0.3 * v[0] - 0.2 * v[1] + 0.7 * v[2] + 0.1 - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_field_gives_empty_mesh() {
        let g = grid_from(8, 1.0, |_| 0.1);
        assert!(marching_cubes(&g, 0.5).is_empty());
    }

    #[test]
    fn occupied_boundary_is_capped() {
        let g = grid_from(8, 1.0, |_| 0.9);
        let mesh = marching_cubes(&g, 0.5);
        assert!(mesh.is_watertight());
        mesh.validate().unwrap();
    }

    #[test]
    fn random_fields_are_watertight() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut g = ScalarGrid::lattice(7, [0.0; 3], [1.0; 3]).unwrap();
            for v in &mut g.values {
                *v = rng.random();
            }
            let mesh = marching_cubes(&g, 0.5);
            mesh.validate().unwrap();
            assert_eq!(mesh.non_manifold_edges(), 0);
        }
    }

    #[test]
    fn finer_grids_are_more_accurate() {
        let err = |res: usize| {
            let m = marching_cubes(&grid_from(res, 1.0, |p| 0.5 - norm(p)), 0.0);
            m.vertices.iter().map(|v| (norm(*v) - 0.5).abs()).fold(0.0, f64::max)
        };
        assert!(err(48) <= err(24));
    }

    #[test]
    fn chamfer_examples() {
        let a = vec![[0.0, 0.0, 0.0]];
        let b = vec![[1.0, 0.0, 0.0]];
        let r = chamfer_l1(&a, &b).unwrap();
        assert_eq!((r.accuracy, r.completeness, r.chamfer_l1), (1.0, 1.0, 1.0));
        let pts: Vec<Vec3> = (0..50).map(|i| [i as f64 * 0.1, (i % 7) as f64, 0.0]).collect();
        let same = chamfer_l1(&pts, &pts).unwrap();
        assert_eq!(same.chamfer_l1, 0.0);
        assert!(chamfer_l1(&[], &b).is_err());
    }

    #[test]
    fn grid_nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<Vec3> = (0..500).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.1..0.1)]).collect();
        let b: Vec<Vec3> = (0..500).map(|_| [rng.random_range(-2.0..0.5), rng.random::<f64>(), rng.random::<f64>()]).collect();
        let r = chamfer_l1(&a, &b).unwrap();
        assert!((r.accuracy - brute_mean(&a, &b)).abs() < 1e-12);
        assert!((r.completeness - brute_mean(&b, &a)).abs() < 1e-12);
        let s = chamfer_l1(&b, &a).unwrap();
        assert_eq!(r.chamfer_l1, s.chamfer_l1);
    }

    fn two_triangles() -> TriangleMesh {
        TriangleMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [2.0, 0.0, 0.0], [2.0 + 3f64.sqrt(), 0.0, 0.0], [2.0, 3f64.sqrt(), 0.0]],
            faces: vec![[0, 1, 2], [3, 4, 5]],
            colors: None,
        }
    }

    #[test]
    fn surface_samples_follow_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mesh = two_triangles();
        let n = 100_000;
        let pts = sample_surface(&mesh, n, &mut rng).unwrap();
        assert!(pts.iter().all(|p| p[2].abs() <= 1e-12));
        let big = pts.iter().filter(|p| p[0] >= 2.0).count() as f64;
        let ratio = big / (n as f64 - big);
        assert!((ratio - 3.0).abs() < 0.15, "{ratio}");

        let single = TriangleMesh { faces: vec![[0, 1, 2]], ..mesh };
        let pts = sample_surface(&single, 10_000, &mut rng).unwrap();
        let cx = pts.iter().map(|p| p[0]).sum::<f64>() / 1e4;
        let cy = pts.iter().map(|p| p[1]).sum::<f64>() / 1e4;
        assert!((cx - 1.0 / 3.0).abs() < 0.02 && (cy - 1.0 / 3.0).abs() < 0.02);
        assert!(pts.iter().all(|p| p[0] >= -1e-12 && p[1] >= -1e-12 && p[0] + p[1] <= 1.0 + 1e-12));
    }

    #[test]
    fn zero_area_mesh_rejected() {
        let mesh = TriangleMesh { vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], faces: vec![[0, 1, 2]], colors: None };
        assert!(sample_surface(&mesh, 10, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn obj_and_ply_round_trip() {
        let mut mesh = marching_cubes(&grid_from(10, 1.0, |p| 0.6 - norm(p)), 0.0);
        mesh.colors = Some(mesh.vertices.iter().map(|v| [v[0].abs(), 0.5, 1.0]).collect());
        let mut obj = Vec::new();
        write_obj(&mesh, &mut obj).unwrap();
        let back = read_obj(obj.as_slice(), Path::new("m.obj")).unwrap();
        assert_eq!(back.faces, mesh.faces);
        assert_eq!(back.vertices, mesh.vertices);

        let mut ply = Vec::new();
        write_ply(&mesh, &mut ply).unwrap();
        let back = read_ply(ply.as_slice(), Path::new("m.ply")).unwrap();
        assert_eq!(back.faces, mesh.faces);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            assert!(norm(sub(*a, *b)) < 1e-6);
        }
        let cols = back.colors.unwrap();
        assert_eq!(cols[0][2], 1.0);
        assert!(read_ply(&ply[..ply.len() - 3], Path::new("m.ply")).is_err());
    }
}
