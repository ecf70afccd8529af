//! Surface extraction and reconstruction metrics.

mod tables;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, invalid, Error, Result};
use crate::geometry::{dist, sub, BoundingBox};
use crate::rng::{rng_from_seed, Rng};
use crate::so3::Vec3;

use tables::{EDGE_TABLE, TRIANGLE_TABLE};

/// Scalar samples on a regular lattice spanning `bbox` (corners included),
/// stored x fastest: index `ix + rx * (iy + ry * iz)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub bbox: BoundingBox,
    pub res: [usize; 3],
    pub values: Vec<f32>,
}

impl OccupancyGrid {
    pub fn new(bbox: BoundingBox, res: [usize; 3], values: Vec<f32>) -> Result<Self> {
        if res.iter().any(|&r| r < 2) {
            return Err(invalid(format!("grid resolution {res:?} must be at least 2 per axis")));
        }
        if values.len() != res[0] * res[1] * res[2] {
            return Err(contract(format!(
                "grid of {res:?} needs {} values, got {}",
                res[0] * res[1] * res[2],
                values.len()
            )));
        }
        Ok(Self { bbox, res, values })
    }

    pub fn from_fn(bbox: BoundingBox, res: [usize; 3], f: impl Fn(Vec3) -> f64) -> Result<Self> {
        let values = Self::lattice(&bbox, res).into_iter().map(|p| f(p) as f32).collect();
        Self::new(bbox, res, values)
    }

    /// Lattice points in storage order.
    pub fn lattice(bbox: &BoundingBox, res: [usize; 3]) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(res[0] * res[1] * res[2]);
        for iz in 0..res[2] {
            for iy in 0..res[1] {
                for ix in 0..res[0] {
                    out.push(lattice_point(bbox, res, [ix, iy, iz]));
                }
            }
        }
        out
    }

    pub fn point(&self, i: [usize; 3]) -> Vec3 {
        lattice_point(&self.bbox, self.res, i)
    }

    pub fn index(&self, i: [usize; 3]) -> usize {
        i[0] + self.res[0] * (i[1] + self.res[1] * i[2])
    }

    pub fn value(&self, i: [usize; 3]) -> f32 {
        self.values[self.index(i)]
    }

    pub fn cell_size(&self) -> Vec3 {
        let e = self.bbox.extent();
        [0, 1, 2].map(|a| e[a] / (self.res[a] - 1) as f64)
    }

    /// Coarse-to-fine sampling for isosurface extraction. `eval` is called on
    /// every `step`-th lattice point, then on all lattice points inside coarse
    /// cells whose corners straddle `iso`, plus `halo` rings of neighboring
    /// cells. Elsewhere values are trilinear interpolants of the coarse
    /// corners, clamped to their range, so they sit on the same side of
    /// `iso` as all of those corners and marching cubes sees no surface
    /// there. Surfaces thinner than a coarse cell can be missed.
    pub fn refined(
        bbox: BoundingBox,
        res: [usize; 3],
        iso: f64,
        step: usize,
        halo: usize,
        eval: impl Fn(&[Vec3]) -> Vec<f64>,
    ) -> Result<Self> {
        if res.iter().any(|&r| r < 2) {
            return Err(invalid(format!("grid resolution {res:?} must be at least 2 per axis")));
        }
        if step == 0 {
            return Err(invalid("refinement step must be positive"));
        }
        let axes: [Vec<usize>; 3] = res.map(|n| {
            let mut v: Vec<usize> = (0..n).step_by(step).collect();
            if *v.last().unwrap() != n - 1 {
                v.push(n - 1);
            }
            v
        });
        let cres = [axes[0].len(), axes[1].len(), axes[2].len()];
        let cidx = |c: [usize; 3]| c[0] + cres[0] * (c[1] + cres[1] * c[2]);
        let mut coarse_pts = Vec::with_capacity(cres.iter().product());
        for &z in &axes[2] {
            for &y in &axes[1] {
                for &x in &axes[0] {
                    coarse_pts.push(lattice_point(&bbox, res, [x, y, z]));
                }
            }
        }
        let coarse: Vec<f32> = eval(&coarse_pts).into_iter().map(|v| v as f32).collect();
        if coarse.len() != coarse_pts.len() {
            return Err(contract("evaluator returned the wrong number of values"));
        }

        let cells = [cres[0] - 1, cres[1] - 1, cres[2] - 1];
        let cell_idx = |c: [usize; 3]| c[0] + cells[0] * (c[1] + cells[1] * c[2]);
        let corners = |c: [usize; 3]| -> [f32; 8] {
            std::array::from_fn(|k| coarse[cidx([c[0] + (k & 1), c[1] + ((k >> 1) & 1), c[2] + ((k >> 2) & 1)])])
        };
        let mut straddles = vec![false; cells.iter().product()];
        for cz in 0..cells[2] {
            for cy in 0..cells[1] {
                for cx in 0..cells[0] {
                    let v = corners([cx, cy, cz]);
                    let below = v.iter().filter(|&&x| (x as f64) < iso).count();
                    straddles[cell_idx([cx, cy, cz])] = below != 0 && below != 8;
                }
            }
        }
        let mut active = vec![false; straddles.len()];
        for cz in 0..cells[2] {
            for cy in 0..cells[1] {
                for cx in 0..cells[0] {
                    if !straddles[cell_idx([cx, cy, cz])] {
                        continue;
                    }
                    for z in cz.saturating_sub(halo)..(cz + halo + 1).min(cells[2]) {
                        for y in cy.saturating_sub(halo)..(cy + halo + 1).min(cells[1]) {
                            for x in cx.saturating_sub(halo)..(cx + halo + 1).min(cells[0]) {
                                active[cell_idx([x, y, z])] = true;
                            }
                        }
                    }
                }
            }
        }

        // Coarse cell containing fine index `i` along axis `a`, and the
        // fractional position inside it.
        let locate = |a: usize, i: usize| -> (usize, f64) {
            let c = (i / step).min(cells[a] - 1);
            let (lo, hi) = (axes[a][c], axes[a][c + 1]);
            (c, (i - lo) as f64 / (hi - lo) as f64)
        };
        // A lattice point is exact when any coarse cell touching it is active.
        let touches_active = |i: [usize; 3]| -> bool {
            let span = |a: usize| -> (usize, usize) {
                let (c, t) = locate(a, i[a]);
                if t == 0.0 && c > 0 {
                    (c - 1, c)
                } else if t == 1.0 && c + 1 < cells[a] {
                    (c, c + 1)
                } else {
                    (c, c)
                }
            };
            let (sx, sy, sz) = (span(0), span(1), span(2));
            (sz.0..=sz.1).any(|z| (sy.0..=sy.1).any(|y| (sx.0..=sx.1).any(|x| active[cell_idx([x, y, z])])))
        };

        let n = res[0] * res[1] * res[2];
        let mut values = vec![0.0f32; n];
        let mut exact_idx = Vec::new();
        let mut exact_pts = Vec::new();
        for iz in 0..res[2] {
            for iy in 0..res[1] {
                for ix in 0..res[0] {
                    let i = [ix, iy, iz];
                    let flat = ix + res[0] * (iy + res[1] * iz);
                    if touches_active(i) {
                        exact_idx.push(flat);
                        exact_pts.push(lattice_point(&bbox, res, i));
                        continue;
                    }
                    let (cx, tx) = locate(0, ix);
                    let (cy, ty) = locate(1, iy);
                    let (cz, tz) = locate(2, iz);
                    let v = corners([cx, cy, cz]);
                    let w = |k: usize, t: f64| if k == 1 { t } else { 1.0 - t };
                    let mut s = 0.0;
                    for (k, &c) in v.iter().enumerate() {
                        s += w(k & 1, tx) * w((k >> 1) & 1, ty) * w((k >> 2) & 1, tz) * c as f64;
                    }
                    let lo = v.iter().cloned().fold(f32::INFINITY, f32::min);
                    let hi = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    values[flat] = (s as f32).clamp(lo, hi);
                }
            }
        }
        let exact = eval(&exact_pts);
        if exact.len() != exact_pts.len() {
            return Err(contract("evaluator returned the wrong number of values"));
        }
        for (&i, v) in exact_idx.iter().zip(exact) {
            values[i] = v as f32;
        }
        Self::new(bbox, res, values)
    }
}

fn lattice_point(bbox: &BoundingBox, res: [usize; 3], i: [usize; 3]) -> Vec3 {
    bbox.lerp([
        i[0] as f64 / (res[0] - 1) as f64,
        i[1] as f64 / (res[1] - 1) as f64,
        i[2] as f64 / (res[2] - 1) as f64,
    ])
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if triangles.iter().flatten().any(|&i| i >= vertices.len()) {
            return Err(Error::Format("triangle index out of range".into()));
        }
        Ok(Self { vertices, triangles })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        0.5 * crate::so3::norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Volume enclosed with sign given by the orientation (positive when
    /// normals point outward).
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    /// Undirected edges not shared by exactly two triangles.
    pub fn open_edges(&self) -> Vec<(usize, usize)> {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let mut out: Vec<(usize, usize)> = count.into_iter().filter(|(_, c)| *c != 2).map(|(e, _)| e).collect();
        out.sort_unstable();
        out
    }

    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.open_edges().is_empty()
    }

    pub fn transformed(&self, g: &crate::geometry::SE3Transform) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|v| g.apply(*v)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Wavefront OBJ text with 1-based indices.
    pub fn to_obj(&self) -> String {
        let mut s = String::with_capacity(40 * (self.vertices.len() + self.triangles.len()));
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj())?;
        Ok(())
    }
}

#[inline]
pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Triangles with area at or below this are dropped.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

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

/// Iso-surface of `grid` at `iso`, oriented so that normals point from
/// values above `iso` (inside) towards values below it. Vertices on shared
/// grid edges are merged.
pub fn marching_cubes(grid: &OccupancyGrid, iso: f64) -> Result<Mesh> {
    if grid.res.iter().any(|&r| r < 2) {
        return Err(invalid("marching cubes needs at least 2 samples per axis"));
    }
    let iso32 = iso as f32;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    let [rx, ry, rz] = grid.res;
    for iz in 0..rz - 1 {
        for iy in 0..ry - 1 {
            for ix in 0..rx - 1 {
                let mut corner_idx = [[0usize; 3]; 8];
                let mut vals = [0f32; 8];
                let mut case = 0usize;
                for (c, off) in CORNERS.iter().enumerate() {
                    corner_idx[c] = [ix + off[0], iy + off[1], iz + off[2]];
                    vals[c] = grid.value(corner_idx[c]);
                    if vals[c] < iso32 {
                        case |= 1 << c;
                    }
                }
                let mask = EDGE_TABLE[case];
                if mask == 0 {
                    continue;
                }
                let mut ev = [usize::MAX; 12];
                for (e, [a, b]) in EDGES.iter().enumerate() {
                    if mask & (1 << e) == 0 {
                        continue;
                    }
                    let (ga, gb) = (grid.index(corner_idx[*a]), grid.index(corner_idx[*b]));
                    let key = (ga.min(gb), ga.max(gb));
                    ev[e] = *edge_vertex.entry(key).or_insert_with(|| {
                        // Interpolate from the lower-index endpoint so the
                        // vertex does not depend on which cube visits first.
                        let (i0, i1, v0, v1) = if ga < gb {
                            (corner_idx[*a], corner_idx[*b], vals[*a], vals[*b])
                        } else {
                            (corner_idx[*b], corner_idx[*a], vals[*b], vals[*a])
                        };
                        let (p0, p1) = (grid.point(i0), grid.point(i1));
                        let den = v1 as f64 - v0 as f64;
                        let t = if den.abs() < 1e-300 {
                            0.5
                        } else {
                            ((iso - v0 as f64) / den).clamp(0.0, 1.0)
                        };
                        vertices.push([
                            p0[0] + t * (p1[0] - p0[0]),
                            p0[1] + t * (p1[1] - p0[1]),
                            p0[2] + t * (p1[2] - p0[2]),
                        ]);
                        vertices.len() - 1
                    });
                }
                for tri in TRIANGLE_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    // With below-iso corners flagged, table winding already
                    // faces away from the high side.
                    let t = [ev[tri[0] as usize], ev[tri[1] as usize], ev[tri[2] as usize]];
                    let [a, b, c] = [vertices[t[0]], vertices[t[1]], vertices[t[2]]];
                    if 0.5 * crate::so3::norm(cross(sub(b, a), sub(c, a))) > MIN_TRIANGLE_AREA {
                        triangles.push(t);
                    }
                }
            }
        }
    }
    Mesh::new(vertices, triangles)
}

/// `n` points uniformly distributed over the mesh surface.
pub fn sample_mesh_surface(mesh: &Mesh, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    sample_mesh_surface_with(mesh, n, &mut rng_from_seed(seed))
}

pub fn sample_mesh_surface_with(mesh: &Mesh, n: usize, rng: &mut Rng) -> Result<Vec<Vec3>> {
    if mesh.is_empty() {
        return Err(invalid("cannot sample an empty mesh"));
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for t in 0..mesh.triangles.len() {
        acc += mesh.triangle_area(t);
        cdf.push(acc);
    }
    if acc <= 0.0 {
        return Err(Error::DegenerateGeometry("mesh has zero surface area".into()));
    }
    Ok((0..n)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            let [a, b, c] = mesh.corners(t);
            let s = rng.random::<f64>().sqrt();
            let r2 = rng.random::<f64>();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
            [
                wa * a[0] + wb * b[0] + wc * c[0],
                wa * a[1] + wb * b[1] + wc * c[1],
                wa * a[2] + wb * b[2] + wc * c[2],
            ]
        })
        .collect())
}

/// Exact nearest-neighbor distances through a uniform bucket grid.
pub struct NearestIndex {
    points: Vec<Vec3>,
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl NearestIndex {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("nearest-neighbor index over an empty set"));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let e = sub(hi, lo);
        let span = e[0].max(e[1]).max(e[2]).max(1e-12);
        // About two points per occupied cell for surface-like sets.
        let cell = (span / (points.len() as f64 / 2.0).sqrt().max(1.0)).max(span / 256.0);
        let dims = [0, 1, 2].map(|a| ((e[a] / cell).floor() as usize + 1).min(512));
        let cell_of = |p: &Vec3| -> usize {
            let c = [0, 1, 2].map(|a| (((p[a] - lo[a]) / cell) as usize).min(dims[a] - 1));
            c[0] + dims[0] * (c[1] + dims[1] * c[2])
        };
        let ncell = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; ncell + 1];
        for p in points {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 0..ncell {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p);
            order[fill[c]] = i;
            fill[c] += 1;
        }
        Ok(Self {
            points: points.to_vec(),
            origin: lo,
            cell,
            dims,
            starts: counts,
            order,
        })
    }

    pub fn nearest_distance(&self, q: Vec3) -> f64 {
        let d = self.dims;
        let center = [0, 1, 2].map(|a| {
            let c = ((q[a] - self.origin[a]) / self.cell).floor();
            c.clamp(0.0, (d[a] - 1) as f64) as i64
        });
        let mut best = f64::INFINITY;
        let max_ring = *d.iter().max().unwrap() as i64;
        for r in 0..=max_ring {
            let lo = center.map(|c| c - r);
            let hi = center.map(|c| c + r);
            for z in lo[2].max(0)..=hi[2].min(d[2] as i64 - 1) {
                for y in lo[1].max(0)..=hi[1].min(d[1] as i64 - 1) {
                    for x in lo[0].max(0)..=hi[0].min(d[0] as i64 - 1) {
                        let on_shell = x == lo[0] || x == hi[0] || y == lo[1] || y == hi[1] || z == lo[2] || z == hi[2];
                        if !on_shell {
                            continue;
                        }
                        let c = x as usize + d[0] * (y as usize + d[1] * z as usize);
                        for &i in &self.order[self.starts[c]..self.starts[c + 1]] {
                            best = best.min(dist(self.points[i], q));
                        }
                    }
                }
            }
            // Distance to any unvisited cell: through a face of the visited
            // block that is not on the grid boundary.
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                if lo[a] > 0 {
                    let face = self.origin[a] + lo[a] as f64 * self.cell;
                    bound = bound.min((q[a] - face).max(0.0));
                }
                if hi[a] < d[a] as i64 - 1 {
                    let face = self.origin[a] + (hi[a] + 1) as f64 * self.cell;
                    bound = bound.min((face - q[a]).max(0.0));
                }
            }
            if best <= bound || bound == f64::INFINITY {
                break;
            }
        }
        best
    }
}

fn nearest_distances(from: &[Vec3], to: &[Vec3]) -> Result<Vec<f64>> {
    let index = NearestIndex::new(to)?;
    Ok(from.par_iter().map(|q| index.nearest_distance(*q)).collect())
}

/// Symmetric mean nearest-neighbor distance.
pub fn chamfer_l1(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("chamfer distance of an empty set"));
    }
    let ab = nearest_distances(a, b)?;
    let ba = nearest_distances(b, a)?;
    Ok(0.5 * (ab.iter().sum::<f64>() / a.len() as f64 + ba.iter().sum::<f64>() / b.len() as f64))
}

/// Precision and recall (fractions) of `recon` against `gt` at threshold `tau`.
pub fn precision_recall(recon: &[Vec3], gt: &[Vec3], tau: f64) -> Result<(f64, f64)> {
    if !(tau > 0.0) {
        return Err(invalid(format!("F-score threshold must be positive, got {tau}")));
    }
    if recon.is_empty() || gt.is_empty() {
        return Err(invalid("F-score of an empty set"));
    }
    let frac = |d: Vec<f64>| d.iter().filter(|&&v| v <= tau).count() as f64 / d.len() as f64;
    Ok((frac(nearest_distances(recon, gt)?), frac(nearest_distances(gt, recon)?)))
}

/// Harmonic mean of precision and recall, in percent.
pub fn f_score(recon: &[Vec3], gt: &[Vec3], tau: f64) -> Result<f64> {
    let (p, r) = precision_recall(recon, gt, tau)?;
    Ok(if p + r == 0.0 { 0.0 } else { 100.0 * 2.0 * p * r / (p + r) })
}

/// Intersection over union of two labelings, in percent; 100 when both are
/// empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(contract(format!("IoU of labelings of length {} and {}", pred.len(), gt.len())));
    }
    let both = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let either = pred.iter().zip(gt).filter(|(a, b)| **a || **b).count();
    Ok(if either == 0 { 100.0 } else { 100.0 * both as f64 / either as f64 })
}

/// Exact occupancy and surface samples of a reference shape or scene.
pub trait GroundTruth: Sync {
    fn occupied(&self, q: Vec3) -> bool;
    fn sample_surface(&self, n: usize, rng: &mut Rng) -> Vec<Vec3>;
    fn bounds(&self) -> BoundingBox;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub chamfer_l1: Option<f64>,
    pub fscore_1pct: f64,
    pub fscore_2pct: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Volume samples for IoU.
    pub samples: usize,
    /// Surface samples per side for Chamfer-L1 and F-score.
    pub surface_samples: usize,
    pub seed: u64,
    /// Padding of the ground-truth box, as a fraction of its extent.
    pub padding: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            surface_samples: 100_000,
            seed: 0,
            padding: 0.1,
        }
    }
}

/// IoU on uniform samples of the padded ground-truth box, and Chamfer-L1 and
/// F-scores (tau = 1% and 2% of the longest side of that box) on surface
/// samples.
pub fn evaluate(
    mesh: &Mesh,
    pred_occupied: &(dyn Fn(&[Vec3]) -> Vec<bool> + Sync),
    gt: &dyn GroundTruth,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let streams = crate::rng::SeedStream::new(cfg.seed);
    let bbox = gt.bounds().padded(cfg.padding);
    let side = bbox.longest_side();
    let iou_value = sample_iou(pred_occupied, gt, &bbox, cfg.samples, &mut streams.rng("iou"))?;
    let mut warnings = Vec::new();
    if mesh.is_empty() {
        warnings.push("empty prediction mesh".to_string());
        return Ok(MetricsReport {
            iou: iou_value,
            chamfer_l1: None,
            fscore_1pct: 0.0,
            fscore_2pct: 0.0,
            warnings,
        });
    }
    let pred_pts = sample_mesh_surface_with(mesh, cfg.surface_samples, &mut streams.rng("pred-surface"))?;
    let gt_pts = gt.sample_surface(cfg.surface_samples, &mut streams.rng("gt-surface"));
    Ok(MetricsReport {
        iou: iou_value,
        chamfer_l1: Some(chamfer_l1(&pred_pts, &gt_pts)?),
        fscore_1pct: f_score(&pred_pts, &gt_pts, 0.01 * side)?,
        fscore_2pct: f_score(&pred_pts, &gt_pts, 0.02 * side)?,
        warnings,
    })
}

/// IoU between predicted and exact occupancy on `n` uniform samples of `bbox`.
pub fn sample_iou(
    pred_occupied: &(dyn Fn(&[Vec3]) -> Vec<bool> + Sync),
    gt: &dyn GroundTruth,
    bbox: &BoundingBox,
    n: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let samples: Vec<Vec3> = (0..n).map(|_| bbox.sample(rng)).collect();
    let truth: Vec<bool> = samples.par_iter().map(|q| gt.occupied(*q)).collect();
    iou(&pred_occupied(&samples), &truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> BoundingBox {
        BoundingBox::new([-1.3; 3], [1.3; 3]).unwrap()
    }

    fn sphere_grid(res: usize, iso_center: f64) -> OccupancyGrid {
        // Smooth field equal to `iso_center` on the unit sphere.
        OccupancyGrid::from_fn(unit_box(), [res; 3], |p| iso_center + 0.5 * (1.0 - crate::so3::norm(p))).unwrap()
    }

    #[test]
    fn lattice_order_is_x_fastest() {
        let b = BoundingBox::new([0.0; 3], [1.0, 2.0, 3.0]).unwrap();
        let pts = OccupancyGrid::lattice(&b, [2, 2, 2]);
        assert_eq!(pts[1], [1.0, 0.0, 0.0]);
        assert_eq!(pts[2], [0.0, 2.0, 0.0]);
        assert_eq!(pts[4], [0.0, 0.0, 3.0]);
        assert_eq!(pts[7], [1.0, 2.0, 3.0]);
    }

    #[test]
    fn refined_grid_gives_the_same_mesh_with_fewer_evaluations() {
        let field = |p: Vec3| 0.5 + 0.5 * (0.9 - crate::so3::norm([p[0], 1.3 * p[1], p[2]]));
        let calls = std::sync::atomic::AtomicUsize::new(0);
        for (res, halo) in [([65, 65, 65], 0), ([65, 65, 65], 1), ([30, 27, 35], 1)] {
            calls.store(0, std::sync::atomic::Ordering::Relaxed);
            let eval = |pts: &[Vec3]| {
                calls.fetch_add(pts.len(), std::sync::atomic::Ordering::Relaxed);
                pts.iter().map(|&p| field(p)).collect()
            };
            let fine = OccupancyGrid::refined(unit_box(), res, 0.5, 4, halo, eval).unwrap();
            let full = OccupancyGrid::from_fn(unit_box(), res, field).unwrap();
            let total: usize = res.iter().product();
            assert!(calls.load(std::sync::atomic::Ordering::Relaxed) < if halo == 0 { total / 4 } else { total });
            assert_eq!(marching_cubes(&fine, 0.5).unwrap(), marching_cubes(&full, 0.5).unwrap());
            for (a, b) in fine.values.iter().zip(&full.values) {
                assert_eq!(*a >= 0.5, *b >= 0.5);
            }
        }
        assert!(OccupancyGrid::refined(unit_box(), [4; 3], 0.5, 0, 1, |p| vec![0.0; p.len()]).is_err());
    }

    #[test]
    fn sphere_vertices_lie_on_the_sphere() {
        let g = sphere_grid(32, 0.5);
        let mesh = marching_cubes(&g, 0.5).unwrap();
        let cell = g.cell_size()[0];
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            assert!((crate::so3::norm(*v) - 1.0).abs() <= 2.0 * cell);
        }
        assert!(mesh.is_watertight());
        let vol = mesh.signed_volume();
        assert!((vol - 4.0 / 3.0 * std::f64::consts::PI).abs() < 0.05, "volume {vol}");
    }

    #[test]
    fn constant_grids_give_empty_meshes() {
        let zero = OccupancyGrid::new(unit_box(), [4; 3], vec![0.0; 64]).unwrap();
        assert!(marching_cubes(&zero, 0.2).unwrap().is_empty());
        let one = OccupancyGrid::new(unit_box(), [4; 3], vec![1.0; 64]).unwrap();
        assert!(marching_cubes(&one, 0.2).unwrap().is_empty());
    }

    #[test]
    fn half_space_is_planar() {
        let g = OccupancyGrid::from_fn(unit_box(), [9, 7, 8], |p| 0.2 + 0.3 * (0.37 - p[0])).unwrap();
        let mesh = marching_cubes(&g, 0.2).unwrap();
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            assert!((v[0] - 0.37).abs() < 1e-6);
        }
        // Normals point from the high (x < 0.37) side to the low side.
        for t in 0..mesh.triangles.len() {
            let [a, b, c] = mesh.corners(t);
            assert!(cross(sub(b, a), sub(c, a))[0] > 0.0);
        }
    }

    #[test]
    fn single_triangle_samples_are_inside() {
        let mesh = Mesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        for p in sample_mesh_surface(&mesh, 1000, 3).unwrap() {
            assert!(p[2] == 0.0 && p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 1.0 + 1e-12);
        }
        assert!(sample_mesh_surface(&Mesh::default(), 10, 0).is_err());
        assert_eq!(
            sample_mesh_surface(&mesh, 50, 9).unwrap(),
            sample_mesh_surface(&mesh, 50, 9).unwrap()
        );
    }

    #[test]
    fn sphere_samples_have_unit_mean_radius() {
        let mesh = marching_cubes(&sphere_grid(48, 0.5), 0.5).unwrap();
        let pts = sample_mesh_surface(&mesh, 20_000, 4).unwrap();
        let mean = pts.iter().map(|p| crate::so3::norm(*p)).sum::<f64>() / pts.len() as f64;
        assert!((mean - 1.0).abs() < 5e-3);
    }

    #[test]
    fn samples_follow_triangle_areas() {
        // Two triangles with areas 1/2 and 3/2.
        let mesh = Mesh::new(
            vec![
                [0.0; 3],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [10.0, 0.0, 0.0],
                [13.0, 0.0, 0.0],
                [10.0, 1.0, 0.0],
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        let n = 40_000;
        let pts = sample_mesh_surface(&mesh, n, 5).unwrap();
        let first = pts.iter().filter(|p| p[0] < 5.0).count() as f64;
        let p = 0.25;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((first - n as f64 * p).abs() < 3.0 * sd, "{first}");
    }

    #[test]
    fn chamfer_examples() {
        let o = [0.0; 3];
        let x = [1.0, 0.0, 0.0];
        assert_eq!(chamfer_l1(&[o, x], &[o, x]).unwrap(), 0.0);
        assert_eq!(chamfer_l1(&[o], &[x]).unwrap(), 1.0);
        assert_eq!(chamfer_l1(&[o, [2.0, 0.0, 0.0]], &[x]).unwrap(), 1.0);
        assert!(chamfer_l1(&[], &[x]).is_err());
    }

    #[test]
    fn f_score_examples() {
        let a = [[0.0; 3], [1.0, 0.0, 0.0]];
        assert_eq!(f_score(&a, &a, 0.01).unwrap(), 100.0);
        assert_eq!(f_score(&a, &[[5.0, 5.0, 5.0]], 0.01).unwrap(), 0.0);
        // Every reconstructed point is near the first gt point; the second gt
        // point is missed: P = 1, R = 1/2.
        let recon = [[0.0; 3]];
        let gt = [[0.0; 3], [3.0, 0.0, 0.0]];
        assert!((f_score(&recon, &gt, 0.1).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        let (p, r) = precision_recall(&recon, &gt, 0.1).unwrap();
        let (p2, r2) = precision_recall(&gt, &recon, 0.1).unwrap();
        assert_eq!((p, r), (r2, p2));
        assert!(f_score(&a, &a, 0.0).is_err());
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&[true, false, true], &[true, false, true]).unwrap(), 100.0);
        assert_eq!(iou(&[true, false], &[false, true]).unwrap(), 0.0);
        let v = iou(&[true, true, false, false], &[true, true, true, false]).unwrap();
        assert!((v - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&[false], &[false]).unwrap(), 100.0);
        assert!(matches!(iou(&[true], &[true, false]), Err(Error::Contract(_))));
    }

    #[test]
    fn nearest_index_matches_brute_force() {
        let mut rng = rng_from_seed(6);
        let pts: Vec<Vec3> = (0..3000)
            .map(|_| {
                let v = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                let n = crate::so3::norm(v);
                [v[0] / n, v[1] / n * 0.5, v[2] / n]
            })
            .collect();
        let index = NearestIndex::new(&pts).unwrap();
        for _ in 0..300 {
            let q = [
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ];
            let brute = pts.iter().map(|p| dist(*p, q)).fold(f64::INFINITY, f64::min);
            assert_eq!(index.nearest_distance(q), brute);
        }
    }

    #[test]
    fn obj_text() {
        let mesh = Mesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        assert_eq!(mesh.to_obj(), "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n");
    }
}
