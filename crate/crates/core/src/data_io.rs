//! Ground truth for training and evaluation: analytic and mesh shapes with
//! exact occupancy, multi-object scenes, and point cloud / mesh files.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{dist, sub, BoundingBox, PointCloud, SE3Transform};
use crate::recon::{cross, dot, sample_mesh_surface_with, GroundTruth, Mesh};
use crate::rng::{rng_from_seed, splitmix64, Rng};
use crate::so3::{norm, Rotation, Vec3};

/// A watertight triangle mesh prepared for inside tests.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshShape {
    pub mesh: Mesh,
    pub bbox: BoundingBox,
    /// File the mesh was read from, kept for scene manifests.
    pub source: Option<PathBuf>,
}

impl MeshShape {
    pub fn new(mesh: Mesh) -> Result<Self> {
        check_watertight(&mesh)?;
        let bbox = BoundingBox::of_points(&mesh.vertices)?;
        Ok(Self { mesh, bbox, source: None })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShapeKind {
    Sphere { radius: f64 },
    Box { half_extents: Vec3 },
    Torus { major: f64, minor: f64 },
    Mesh(Arc<MeshShape>),
}

/// A solid in its own frame, placed in the world by `pose`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeOracle {
    pub kind: ShapeKind,
    pub pose: SE3Transform,
}

impl ShapeOracle {
    pub fn sphere(radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(invalid(format!("sphere radius {radius} must be positive")));
        }
        Ok(Self::canonical(ShapeKind::Sphere { radius }))
    }

    pub fn cuboid(half_extents: Vec3) -> Result<Self> {
        if !half_extents.iter().all(|h| *h > 0.0 && h.is_finite()) {
            return Err(invalid(format!("box half extents {half_extents:?} must be positive")));
        }
        Ok(Self::canonical(ShapeKind::Box { half_extents }))
    }

    /// Torus around the local z axis.
    pub fn torus(major: f64, minor: f64) -> Result<Self> {
        if !(minor > 0.0 && major > minor && major.is_finite()) {
            return Err(invalid(format!("torus radii ({major}, {minor}) need major > minor > 0")));
        }
        Ok(Self::canonical(ShapeKind::Torus { major, minor }))
    }

    pub fn from_mesh(mesh: Mesh) -> Result<Self> {
        Ok(Self::canonical(ShapeKind::Mesh(Arc::new(MeshShape::new(mesh)?))))
    }

    fn canonical(kind: ShapeKind) -> Self {
        Self {
            kind,
            pose: SE3Transform::identity(),
        }
    }

    /// The same solid moved by `g` (applied after the current pose).
    pub fn posed(&self, g: &SE3Transform) -> Self {
        Self {
            kind: self.kind.clone(),
            pose: g.compose(&self.pose),
        }
    }

    /// Signed implicit value in the local frame, negative inside. Exact
    /// distance for the sphere and torus; for the box it is the Chebyshev
    /// form, which vanishes exactly on the faces.
    pub fn implicit_local(&self, p: Vec3) -> Option<f64> {
        match &self.kind {
            ShapeKind::Sphere { radius } => Some(norm(p) - radius),
            ShapeKind::Box { half_extents: h } => Some((0..3).map(|a| p[a].abs() - h[a]).fold(f64::NEG_INFINITY, f64::max)),
            ShapeKind::Torus { major, minor } => {
                let rho = p[0].hypot(p[1]);
                Some((rho - major).hypot(p[2]) - minor)
            }
            ShapeKind::Mesh(_) => None,
        }
    }

    pub fn occupied(&self, q: Vec3) -> bool {
        let p = self.pose.inverse().apply(q);
        match &self.kind {
            ShapeKind::Mesh(m) => m.bbox.contains(p) && ray_parity(&m.mesh, p, 0),
            _ => self.implicit_local(p).expect("analytic shape") <= 0.0,
        }
    }

    /// Radius of a sphere about the local origin containing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match &self.kind {
            ShapeKind::Sphere { radius } => *radius,
            ShapeKind::Box { half_extents } => norm(*half_extents),
            ShapeKind::Torus { major, minor } => major + minor,
            ShapeKind::Mesh(m) => m.mesh.vertices.iter().map(|v| norm(*v)).fold(0.0, f64::max),
        }
    }

    /// World-frame center of the bounding sphere.
    pub fn center(&self) -> Vec3 {
        self.pose.t
    }

    /// Tight world-frame axis-aligned bounds.
    pub fn world_bounds(&self) -> BoundingBox {
        let c = self.pose.t;
        let m = self.pose.r.matrix();
        let half: Vec3 = match &self.kind {
            ShapeKind::Sphere { radius } => [*radius; 3],
            ShapeKind::Box { half_extents: h } => [0, 1, 2].map(|a| (0..3).map(|b| m[a][b].abs() * h[b]).sum()),
            ShapeKind::Torus { major, minor } => [0, 1, 2].map(|a| major * (1.0 - m[a][2] * m[a][2]).max(0.0).sqrt() + minor),
            ShapeKind::Mesh(s) => {
                let pts: Vec<Vec3> = s.mesh.vertices.iter().map(|v| self.pose.apply(*v)).collect();
                return BoundingBox::of_points(&pts).expect("mesh shapes have volume");
            }
        };
        BoundingBox {
            min: [c[0] - half[0], c[1] - half[1], c[2] - half[2]],
            max: [c[0] + half[0], c[1] + half[1], c[2] + half[2]],
        }
    }

    /// `n` points distributed uniformly by area over the surface, in world
    /// coordinates.
    pub fn sample_surface(&self, n: usize, rng: &mut Rng) -> Vec<Vec3> {
        let local: Vec<Vec3> = match &self.kind {
            ShapeKind::Sphere { radius } => (0..n)
                .map(|_| loop {
                    let v: Vec3 = [0, 1, 2].map(|_| StandardNormal.sample(rng));
                    let l = norm(v);
                    if l > 1e-12 {
                        break [v[0] * radius / l, v[1] * radius / l, v[2] * radius / l];
                    }
                })
                .collect(),
            ShapeKind::Box { half_extents: h } => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total: f64 = areas.iter().sum();
                (0..n)
                    .map(|_| {
                        let u = rng.random::<f64>() * total;
                        let axis = if u < areas[0] {
                            0
                        } else if u < areas[0] + areas[1] {
                            1
                        } else {
                            2
                        };
                        let mut p = [0, 1, 2].map(|a| rng.random_range(-h[a]..=h[a]));
                        p[axis] = if rng.random::<bool>() { h[axis] } else { -h[axis] };
                        p
                    })
                    .collect()
            }
            ShapeKind::Torus { major, minor } => (0..n)
                .map(|_| {
                    // Area element is proportional to major + minor cos(theta).
                    let theta = loop {
                        let t = rng.random_range(0.0..std::f64::consts::TAU);
                        if rng.random::<f64>() * (major + minor) <= major + minor * t.cos() {
                            break t;
                        }
                    };
                    let phi = rng.random_range(0.0..std::f64::consts::TAU);
                    let rho = major + minor * theta.cos();
                    [rho * phi.cos(), rho * phi.sin(), minor * theta.sin()]
                })
                .collect(),
            ShapeKind::Mesh(s) => sample_mesh_surface_with(&s.mesh, n, rng).expect("watertight meshes are non-empty"),
        };
        local.into_iter().map(|p| self.pose.apply(p)).collect()
    }

    /// Surface samples with isotropic Gaussian noise of standard deviation
    /// `sigma` on every coordinate.
    pub fn noisy_cloud(&self, n: usize, sigma: f64, rng: &mut Rng) -> Result<PointCloud> {
        let mut pts = self.sample_surface(n, rng);
        add_noise(&mut pts, sigma, rng)?;
        PointCloud::new(pts)
    }
}

impl GroundTruth for ShapeOracle {
    fn occupied(&self, q: Vec3) -> bool {
        ShapeOracle::occupied(self, q)
    }

    fn sample_surface(&self, n: usize, rng: &mut Rng) -> Vec<Vec3> {
        ShapeOracle::sample_surface(self, n, rng)
    }

    fn bounds(&self) -> BoundingBox {
        self.world_bounds()
    }
}

pub fn add_noise(pts: &mut [Vec3], sigma: f64, rng: &mut Rng) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid(format!("noise level {sigma}: {e}")))?;
    for p in pts.iter_mut() {
        for v in p.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(())
}

/// Exact inside test of an analytic or mesh shape.
pub fn analytic_occupancy(oracle: &ShapeOracle, q: Vec3) -> bool {
    oracle.occupied(q)
}

/// Inside test against a watertight mesh by ray parity. Refuses meshes with
/// open edges.
pub fn mesh_occupancy(mesh: &Mesh, q: Vec3) -> Result<bool> {
    check_watertight(mesh)?;
    Ok(ray_parity(mesh, q, 0))
}

fn check_watertight(mesh: &Mesh) -> Result<()> {
    if mesh.is_empty() {
        return Err(invalid("mesh has no triangles"));
    }
    let open = mesh.open_edges();
    if !open.is_empty() {
        return Err(invalid(format!(
            "mesh is not watertight: {} edges are not shared by exactly two triangles (first: {:?})",
            open.len(),
            open[0]
        )));
    }
    Ok(())
}

/// Parity of crossings along a ray whose direction is derived from the bits
/// of `q` and `seed`, so grazing configurations are avoided generically and
/// every query gets a reproducible answer. Points exactly on the surface may
/// get either label, fixed per `(q, seed)`.
pub fn ray_parity(mesh: &Mesh, q: Vec3, seed: u64) -> bool {
    let mut h = seed;
    for v in q {
        h = splitmix64(h ^ v.to_bits());
    }
    let mut rng = rng_from_seed(h);
    let dir = loop {
        let v: Vec3 = [0, 1, 2].map(|_| StandardNormal.sample(&mut rng));
        if norm(v) > 1e-6 {
            break v;
        }
    };
    let mut crossings = 0usize;
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.corners(t);
        if ray_hits_triangle(q, dir, a, b, c) {
            crossings += 1;
        }
    }
    crossings % 2 == 1
}

/// Moller-Trumbore intersection for `t > 0`.
fn ray_hits_triangle(o: Vec3, d: Vec3, a: Vec3, b: Vec3, c: Vec3) -> bool {
    let e1 = sub(b, a);
    let e2 = sub(c, a);
    let p = cross(d, e2);
    let det = dot(e1, p);
    if det.abs() < 1e-15 {
        return false;
    }
    let inv = 1.0 / det;
    let s = sub(o, a);
    let u = dot(s, p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return false;
    }
    let qv = cross(s, e1);
    let v = dot(d, qv) * inv;
    if v < 0.0 || u + v > 1.0 {
        return false;
    }
    dot(e2, qv) * inv > 0.0
}

/// Centers the mesh bounding box at the origin and scales its longest side
/// to one.
pub fn normalize_mesh(mesh: &Mesh) -> Result<Mesh> {
    let bbox = BoundingBox::of_points(&mesh.vertices)?;
    let c = bbox.center();
    let s = 1.0 / bbox.longest_side();
    Mesh::new(
        mesh.vertices
            .iter()
            .map(|v| [(v[0] - c[0]) * s, (v[1] - c[1]) * s, (v[2] - c[2]) * s])
            .collect(),
        mesh.triangles.clone(),
    )
}

/// Triangulated axis-aligned box, outward oriented.
pub fn box_mesh(half_extents: Vec3) -> Mesh {
    let h = half_extents;
    let vertices: Vec<Vec3> = (0..8)
        .map(|i| {
            [
                if i & 1 == 0 { -h[0] } else { h[0] },
                if i & 2 == 0 { -h[1] } else { h[1] },
                if i & 4 == 0 { -h[2] } else { h[2] },
            ]
        })
        .collect();
    let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
    let triangles = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
    Mesh { vertices, triangles }
}

/// The three analytic training families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Sphere,
    Box,
    Torus,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 3] = [ShapeFamily::Sphere, ShapeFamily::Box, ShapeFamily::Torus];

    /// A member with randomized size, in canonical pose and inside the unit
    /// cube centered at the origin.
    pub fn random(self, rng: &mut Rng) -> ShapeOracle {
        match self {
            ShapeFamily::Sphere => ShapeOracle::sphere(rng.random_range(0.3..=0.5)),
            ShapeFamily::Box => ShapeOracle::cuboid([0, 1, 2].map(|_| rng.random_range(0.15..=0.5))),
            ShapeFamily::Torus => ShapeOracle::torus(rng.random_range(0.25..=0.35), rng.random_range(0.1..=0.15)),
        }
        .expect("family ranges are valid")
    }
}

/// Several posed shapes; occupancy is the union.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<ShapeOracle>,
}

impl Scene {
    pub fn new(objects: Vec<ShapeOracle>) -> Result<Self> {
        if objects.is_empty() {
            return Err(invalid("a scene needs at least one object"));
        }
        Ok(Self { objects })
    }

    pub fn occupied(&self, q: Vec3) -> bool {
        self.objects.iter().any(|o| o.occupied(q))
    }

    /// `per_object` surface samples from each object, concatenated in object
    /// order.
    pub fn sample_points(&self, per_object: usize, rng: &mut Rng) -> Vec<Vec3> {
        self.objects.iter().flat_map(|o| o.sample_surface(per_object, rng)).collect()
    }

    pub fn noisy_cloud(&self, per_object: usize, sigma: f64, rng: &mut Rng) -> Result<PointCloud> {
        let mut pts = self.sample_points(per_object, rng);
        add_noise(&mut pts, sigma, rng)?;
        PointCloud::new(pts)
    }

    /// Smallest distance between bounding spheres (negative when they overlap).
    pub fn min_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                gap = gap.min(dist(a.center(), b.center()) - a.bounding_radius() - b.bounding_radius());
            }
        }
        gap
    }

    pub fn manifest(&self, seed: Option<u64>) -> Result<SceneManifest> {
        let objects = self
            .objects
            .iter()
            .map(|o| {
                let shape = match &o.kind {
                    ShapeKind::Sphere { radius } => ShapeSpec::Sphere { radius: *radius },
                    ShapeKind::Box { half_extents } => ShapeSpec::Box {
                        half_extents: *half_extents,
                    },
                    ShapeKind::Torus { major, minor } => ShapeSpec::Torus {
                        major: *major,
                        minor: *minor,
                    },
                    ShapeKind::Mesh(m) => ShapeSpec::Mesh {
                        path: m
                            .source
                            .clone()
                            .ok_or_else(|| invalid("mesh object has no source file to reference"))?,
                    },
                };
                Ok(SceneObject {
                    shape,
                    rotation: o.pose.r.to_row_major(),
                    translation: o.pose.t,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SceneManifest { objects, seed })
    }
}

impl GroundTruth for Scene {
    fn occupied(&self, q: Vec3) -> bool {
        Scene::occupied(self, q)
    }

    fn sample_surface(&self, n: usize, rng: &mut Rng) -> Vec<Vec3> {
        // Split by surface-sample count, not area: each object gets an equal
        // share, matching how input clouds are drawn.
        let m = self.objects.len();
        self.objects
            .iter()
            .enumerate()
            .flat_map(|(i, o)| o.sample_surface(n / m + usize::from(i < n % m), rng))
            .collect()
    }

    fn bounds(&self) -> BoundingBox {
        let mut pts = Vec::new();
        for o in &self.objects {
            let b = o.world_bounds();
            pts.push(b.min);
            pts.push(b.max);
        }
        BoundingBox::of_points(&pts).expect("objects have volume")
    }
}

/// Maximum placement attempts per object.
pub const SCENE_MAX_TRIES: usize = 10_000;

/// `m` objects cycling through `oracles`, each given a Haar-random rotation
/// and a translation inside `bounds` such that all bounding spheres lie in
/// `bounds` and are separated by more than `min_gap`.
pub fn compose_scene(oracles: &[ShapeOracle], bounds: &BoundingBox, m: usize, min_gap: f64, seed: u64) -> Result<Scene> {
    if m == 0 || oracles.is_empty() {
        return Err(invalid("a scene needs at least one object"));
    }
    let mut rng = rng_from_seed(seed);
    let mut placed: Vec<ShapeOracle> = Vec::with_capacity(m);
    for i in 0..m {
        let base = &oracles[i % oracles.len()];
        let r = base.bounding_radius();
        let mut ok = None;
        for _ in 0..SCENE_MAX_TRIES {
            let rot = Rotation::random(&mut rng);
            let lo = bounds.min.map(|v| v + r);
            let hi = bounds.max.map(|v| v - r);
            if (0..3).any(|a| lo[a] > hi[a]) {
                break;
            }
            let t = [0, 1, 2].map(|a| if lo[a] == hi[a] { lo[a] } else { rng.random_range(lo[a]..hi[a]) });
            // Place the object's local origin (its bounding-sphere center) at t.
            let g = SE3Transform::new(rot, t);
            let candidate = ShapeOracle {
                kind: base.kind.clone(),
                pose: g,
            };
            let clear = placed
                .iter()
                .all(|o| dist(o.center(), t) - o.bounding_radius() - r > min_gap.max(0.0));
            if clear {
                ok = Some(candidate);
                break;
            }
        }
        match ok {
            Some(o) => placed.push(o),
            None => {
                return Err(invalid(format!(
                    "bounds too tight: could not place object {i} after {SCENE_MAX_TRIES} tries"
                )))
            }
        }
    }
    Scene::new(placed)
}

/// One object of a scene manifest: shape parameters and world pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeSpec,
    /// Row-major rotation matrix.
    pub rotation: [f64; 9],
    pub translation: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ShapeSpec {
    Sphere {
        radius: f64,
    },
    Box {
        half_extents: Vec3,
    },
    Torus {
        major: f64,
        minor: f64,
    },
    /// OBJ file, relative paths resolved against the manifest directory.
    Mesh {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl SceneManifest {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Build the scene; mesh paths are resolved against `base_dir`.
    pub fn to_scene(&self, base_dir: &Path) -> Result<Scene> {
        let objects = self
            .objects
            .iter()
            .map(|o| {
                let shape = match &o.shape {
                    ShapeSpec::Sphere { radius } => ShapeOracle::sphere(*radius)?,
                    ShapeSpec::Box { half_extents } => ShapeOracle::cuboid(*half_extents)?,
                    ShapeSpec::Torus { major, minor } => ShapeOracle::torus(*major, *minor)?,
                    ShapeSpec::Mesh { path } => {
                        let full = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                        let mut shape = MeshShape::new(read_obj(&full)?)?;
                        shape.source = Some(path.clone());
                        ShapeOracle::canonical(ShapeKind::Mesh(Arc::new(shape)))
                    }
                };
                let r = Rotation::from_row_major(&o.rotation)?;
                Ok(shape.posed(&SE3Transform::new(r, o.translation)))
            })
            .collect::<Result<_>>()?;
        Scene::new(objects)
    }
}

/// Whitespace-separated `x y z` lines; blank lines and `#` comments are
/// skipped, extra columns ignored.
pub fn parse_xyz(text: &str) -> Result<Vec<Vec3>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if v.len() != 3 {
            return Err(Error::Format(format!("line {}: expected three coordinates", i + 1)));
        }
        out.push([v[0], v[1], v[2]]);
    }
    Ok(out)
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    PointCloud::new(parse_xyz(&std::fs::read_to_string(path)?)?)
}

pub fn write_xyz(path: &Path, points: &[Vec3]) -> Result<()> {
    let mut s = String::with_capacity(points.len() * 40);
    for p in points {
        s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Vertices and faces of an OBJ text. Polygons are fan-triangulated;
/// texture and normal references (`v/vt/vn`) and negative indices are
/// accepted; other statements are ignored.
pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |m: &str| Error::Format(format!("line {}: {m}", i + 1));
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let v: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>().map_err(|e| bad(&e.to_string())))
                    .collect::<Result<_>>()?;
                if v.len() != 3 {
                    return Err(bad("vertex needs three coordinates"));
                }
                vertices.push([v[0], v[1], v[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        let k: i64 = first.parse().map_err(|_| bad(&format!("bad face index {t:?}")))?;
                        let n = vertices.len() as i64;
                        let j = if k > 0 { k - 1 } else { n + k };
                        if k == 0 || j < 0 || j >= n {
                            return Err(bad(&format!("face index {k} out of range")));
                        }
                        Ok(j as usize)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad("face needs at least three vertices"));
                }
                for w in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[w], idx[w + 1]]);
                }
            }
            _ => {}
        }
    }
    Mesh::new(vertices, triangles)
}

pub fn read_obj(path: &Path) -> Result<Mesh> {
    parse_obj(&std::fs::read_to_string(path)?)
}

pub fn write_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    mesh.write_obj(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r() -> Rng {
        rng_from_seed(42)
    }

    #[test]
    fn analytic_examples() {
        let s = ShapeOracle::sphere(1.0).unwrap();
        assert!(analytic_occupancy(&s, [0.0; 3]));
        assert!(!analytic_occupancy(&s, [2.0, 0.0, 0.0]));
        let g = SE3Transform::random(&mut r(), 1.0);
        let b = ShapeOracle::cuboid([1.0; 3]).unwrap().posed(&g);
        assert!(analytic_occupancy(&b, g.apply([0.5, 0.5, 0.5])));
        assert!(!analytic_occupancy(&b, g.apply([1.5, 0.5, 0.5])));
        let t = ShapeOracle::torus(1.0, 0.3).unwrap();
        assert!(analytic_occupancy(&t, [1.0, 0.0, 0.0]));
        assert!(!analytic_occupancy(&t, [0.0; 3]));
    }

    #[test]
    fn posed_oracles_are_equivariant() {
        let mut rng = r();
        for fam in ShapeFamily::ALL {
            let o = fam.random(&mut rng);
            let g = SE3Transform::random(&mut rng, 2.0);
            let og = o.posed(&g);
            for _ in 0..500 {
                let q = [0, 1, 2].map(|_| rng.random_range(-0.6..0.6));
                assert_eq!(o.occupied(q), og.occupied(g.apply(q)));
            }
        }
    }

    #[test]
    fn surface_samples_are_on_the_zero_level_set() {
        let mut rng = r();
        for fam in ShapeFamily::ALL {
            let o = fam.random(&mut rng);
            for p in o.sample_surface(2000, &mut rng) {
                assert!(o.implicit_local(p).unwrap().abs() < 1e-9, "{fam:?}");
            }
            assert!(BoundingBox::new([-0.5; 3], [0.5; 3])
                .unwrap()
                .padded(1e-12)
                .contains(o.world_bounds().min));
        }
    }

    #[test]
    fn torus_samples_cover_inner_and_outer_sides() {
        let o = ShapeOracle::torus(0.3, 0.12).unwrap();
        let pts = o.sample_surface(40_000, &mut r());
        // Outer half (cos theta > 0) has area share (pi R + 2r) / (2 pi R).
        let outer = pts.iter().filter(|p| p[0].hypot(p[1]) > 0.3).count() as f64 / pts.len() as f64;
        let expect = (std::f64::consts::PI * 0.3 + 2.0 * 0.12) / (2.0 * std::f64::consts::PI * 0.3);
        let sd = (expect * (1.0 - expect) / pts.len() as f64).sqrt();
        assert!((outer - expect).abs() < 3.0 * sd, "{outer} vs {expect}");
    }

    #[test]
    fn world_bounds_are_tight() {
        let mut rng = r();
        for fam in ShapeFamily::ALL {
            let o = fam.random(&mut rng).posed(&SE3Transform::random(&mut rng, 1.0));
            let b = o.world_bounds();
            let pts = o.sample_surface(20_000, &mut rng);
            let s = BoundingBox::of_points(&pts).unwrap();
            for a in 0..3 {
                assert!(s.min[a] >= b.min[a] - 1e-12 && s.max[a] <= b.max[a] + 1e-12);
                assert!(s.min[a] - b.min[a] < 0.03 && b.max[a] - s.max[a] < 0.03, "{fam:?}");
            }
        }
    }

    #[test]
    fn cube_mesh_occupancy() {
        let mesh = box_mesh([1.0; 3]);
        assert!(mesh.is_watertight());
        assert!(mesh.signed_volume() > 0.0);
        assert!(mesh_occupancy(&mesh, [0.0; 3]).unwrap());
        assert!(!mesh_occupancy(&mesh, [5.0, 0.0, 0.0]).unwrap());
    }

    #[test]
    fn meshed_box_agrees_with_analytic_box() {
        let h = [0.3, 0.2, 0.45];
        let g = SE3Transform::random(&mut r(), 0.5);
        let mesh_shape = ShapeOracle::from_mesh(box_mesh(h)).unwrap().posed(&g);
        let analytic = ShapeOracle::cuboid(h).unwrap().posed(&g);
        let mut rng = rng_from_seed(3);
        for _ in 0..1000 {
            let q = g.apply([0, 1, 2].map(|_| rng.random_range(-0.6..0.6)));
            assert_eq!(mesh_shape.occupied(q), analytic.occupied(q));
        }
    }

    #[test]
    fn on_face_queries_are_stable() {
        let mesh = box_mesh([1.0; 3]);
        let q = [1.0, 0.2, 0.3];
        let a = ray_parity(&mesh, q, 0);
        assert_eq!(a, ray_parity(&mesh, q, 0));
    }

    #[test]
    fn open_meshes_are_refused() {
        let mut mesh = box_mesh([1.0; 3]);
        mesh.triangles.pop();
        let err = mesh_occupancy(&mesh, [0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("not watertight"));
        assert!(ShapeOracle::from_mesh(mesh).is_err());
    }

    #[test]
    fn training_cloud_is_deterministic() {
        let o = ShapeOracle::sphere(0.4).unwrap();
        let a = o.noisy_cloud(300, 0.005, &mut rng_from_seed(1)).unwrap();
        let b = o.noisy_cloud(300, 0.005, &mut rng_from_seed(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 300);
    }

    #[test]
    fn single_object_scene_is_a_posed_object() {
        let o = ShapeOracle::torus(0.3, 0.1).unwrap();
        let bounds = BoundingBox::new([-2.0; 3], [2.0; 3]).unwrap();
        let s = compose_scene(std::slice::from_ref(&o), &bounds, 1, 0.0, 5).unwrap();
        assert_eq!(s.objects.len(), 1);
        let posed = &s.objects[0];
        let mut rng = r();
        for _ in 0..300 {
            let q = [0, 1, 2].map(|_| rng.random_range(-0.5..0.5));
            assert_eq!(o.occupied(q), s.occupied(posed.pose.apply(q)));
        }
    }

    #[test]
    fn scenes_are_disjoint_unions() {
        let mut rng = r();
        let shapes: Vec<ShapeOracle> = ShapeFamily::ALL.iter().map(|f| f.random(&mut rng)).collect();
        let bounds = BoundingBox::new([-2.0; 3], [2.0; 3]).unwrap();
        let s = compose_scene(&shapes, &bounds, 4, 0.1, 9).unwrap();
        assert!(s.min_gap() > 0.1);
        assert_eq!(s, compose_scene(&shapes, &bounds, 4, 0.1, 9).unwrap());
        for _ in 0..1000 {
            let q = bounds.sample(&mut rng);
            assert_eq!(s.occupied(q), s.objects.iter().any(|o| o.occupied(q)));
        }
        let tight = BoundingBox::new([-0.6; 3], [0.6; 3]).unwrap();
        assert!(compose_scene(&shapes, &tight, 4, 0.1, 9)
            .unwrap_err()
            .to_string()
            .contains("too tight"));
    }

    #[test]
    fn manifest_round_trip() {
        let mut rng = r();
        let shapes: Vec<ShapeOracle> = ShapeFamily::ALL.iter().map(|f| f.random(&mut rng)).collect();
        let bounds = BoundingBox::new([-2.0; 3], [2.0; 3]).unwrap();
        let s = compose_scene(&shapes, &bounds, 3, 0.0, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        s.manifest(Some(1)).unwrap().write(&path).unwrap();
        let back = SceneManifest::read(&path).unwrap().to_scene(dir.path()).unwrap();
        for _ in 0..500 {
            let q = bounds.sample(&mut rng);
            assert_eq!(s.occupied(q), back.occupied(q));
        }
    }

    #[test]
    fn obj_parsing() {
        let m = parse_obj("# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\nf -4 -3 -2\n").unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3], [0, 1, 2]]);
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
        assert!(parse_obj("v 0 0\n").is_err());
        let cube = box_mesh([0.5; 3]);
        assert_eq!(parse_obj(&cube.to_obj()).unwrap().triangles, cube.triangles);
    }

    #[test]
    fn xyz_round_trip() {
        let pts = vec![[0.1, -2.0, 3.5], [1e-9, 0.0, 7.0]];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.xyz");
        write_xyz(&path, &pts).unwrap();
        assert_eq!(read_xyz(&path).unwrap().points(), &pts[..]);
        assert!(parse_xyz("1 2\n").is_err());
        assert_eq!(parse_xyz("# c\n\n1 2 3 4\n").unwrap(), vec![[1.0, 2.0, 3.0]]);
    }
}
