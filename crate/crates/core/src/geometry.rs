//! Point clouds, rigid motions, tie-inclusive neighborhoods and the type-1
//! input/query features.

use std::cmp::Ordering;

use crate::error::{invalid, Error, Result};
use crate::so3::{norm, Rotation, Vec3};

/// Relative tolerance for treating two distances as tied.
pub const TIE_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("point cloud must contain at least one point"));
        }
        if !points.iter().flatten().all(|v| v.is_finite()) {
            return Err(invalid("point cloud contains non-finite coordinates"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> PointCloud {
        PointCloud {
            points: perm.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

/// A rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SE3Transform {
    pub r: Rotation,
    pub t: Vec3,
}

impl SE3Transform {
    pub fn new(r: Rotation, t: Vec3) -> Self {
        Self { r, t }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn translation(t: Vec3) -> Self {
        Self {
            r: Rotation::identity(),
            t,
        }
    }

    pub fn apply(&self, x: Vec3) -> Vec3 {
        add(self.r.apply(x), self.t)
    }

    /// `self · other`: apply `other` first. `(t2, R2)(t1, R1) = (t2 + R2 t1, R2 R1)`.
    pub fn compose(&self, other: &SE3Transform) -> SE3Transform {
        SE3Transform {
            r: self.r.compose(&other.r),
            t: add(self.t, self.r.apply(other.t)),
        }
    }

    pub fn inverse(&self) -> SE3Transform {
        let ri = self.r.inverse();
        let t = ri.apply(self.t);
        SE3Transform {
            r: ri,
            t: [-t[0], -t[1], -t[2]],
        }
    }

    pub fn random(rng: &mut crate::rng::Rng, translation_scale: f64) -> SE3Transform {
        use rand::Rng as _;
        let r = Rotation::random(rng);
        let t = [
            rng.random_range(-1.0..1.0) * translation_scale,
            rng.random_range(-1.0..1.0) * translation_scale,
            rng.random_range(-1.0..1.0) * translation_scale,
        ];
        SE3Transform { r, t }
    }
}

pub fn apply_se3(x: &PointCloud, g: &SE3Transform) -> PointCloud {
    PointCloud {
        points: x.points.iter().map(|p| g.apply(*p)).collect(),
    }
}

#[inline]
pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundingBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl BoundingBox {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|a| !(max[a] > min[a]) || !min[a].is_finite() || !max[a].is_finite()) {
            return Err(Error::DegenerateGeometry(format!("degenerate bounding box {min:?} .. {max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn of_points(points: &[Vec3]) -> Result<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Self::new(lo, hi)
    }

    pub fn extent(&self) -> Vec3 {
        sub(self.max, self.min)
    }

    pub fn longest_side(&self) -> f64 {
        let e = self.extent();
        e[0].max(e[1]).max(e[2])
    }

    pub fn center(&self) -> Vec3 {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    /// Grow every side by `frac` of the extent along that axis.
    pub fn padded(&self, frac: f64) -> Self {
        let e = self.extent();
        Self {
            min: [self.min[0] - frac * e[0], self.min[1] - frac * e[1], self.min[2] - frac * e[2]],
            max: [self.max[0] + frac * e[0], self.max[1] + frac * e[1], self.max[2] + frac * e[2]],
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    /// Point at fractional coordinates `u` in `[0, 1]^3`.
    pub fn lerp(&self, u: Vec3) -> Vec3 {
        let e = self.extent();
        [self.min[0] + u[0] * e[0], self.min[1] + u[1] * e[1], self.min[2] + u[2] * e[2]]
    }

    pub fn sample(&self, rng: &mut crate::rng::Rng) -> Vec3 {
        use rand::Rng as _;
        self.lerp([rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
    }
}

/// Index set of a tie-inclusive k-NN neighborhood. The anchor is always a
/// member (its distance is zero). Members are kept in a canonical order
/// (distance, then coordinates) that does not depend on point indices, so
/// that reductions over a neighborhood are bit-identical under reordering of
/// the cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub anchor: usize,
    pub indices: Vec<usize>,
    pub cutoff: f64,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.contains(&j)
    }

    pub fn sorted_indices(&self) -> Vec<usize> {
        let mut v = self.indices.clone();
        v.sort_unstable();
        v
    }
}

fn canonical_cmp(da: f64, pa: &Vec3, db: f64, pb: &Vec3) -> Ordering {
    da.total_cmp(&db)
        .then(pa[0].total_cmp(&pb[0]))
        .then(pa[1].total_cmp(&pb[1]))
        .then(pa[2].total_cmp(&pb[2]))
}

fn within_tie(d: f64, cutoff: f64) -> bool {
    d <= cutoff + TIE_RTOL * cutoff
}

/// All points within the k-th smallest distance from point `i` (self
/// included), admitting every tie at the cutoff.
pub fn knn_neighborhood(x: &PointCloud, i: usize, k: usize) -> Result<Neighborhood> {
    let n = x.len();
    if k == 0 || k > n {
        return Err(invalid(format!("k must satisfy 1 <= k <= N (k = {k}, N = {n})")));
    }
    if i >= n {
        return Err(invalid(format!("anchor index {i} out of range for N = {n}")));
    }
    let anchor = x.points[i];
    let dists: Vec<f64> = x.points.iter().map(|p| dist(*p, anchor)).collect();
    Ok(neighborhood_from_distances(x, i, k, &dists))
}

fn neighborhood_from_distances(x: &PointCloud, i: usize, k: usize, dists: &[f64]) -> Neighborhood {
    let mut scratch = dists.to_vec();
    let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    let cutoff = *kth;
    let mut members: Vec<usize> = (0..dists.len()).filter(|&j| within_tie(dists[j], cutoff)).collect();
    members.sort_by(|&a, &b| canonical_cmp(dists[a], &x.points[a], dists[b], &x.points[b]));
    if !members.contains(&i) {
        // Only possible when other points coincide with the anchor and k is
        // smaller than their count; the anchor is still a member by definition.
        members.insert(0, i);
    }
    Neighborhood {
        anchor: i,
        indices: members,
        cutoff,
    }
}

/// Neighborhoods of every point.
pub fn all_neighborhoods(x: &PointCloud, k: usize) -> Result<Vec<Neighborhood>> {
    let n = x.len();
    if k == 0 || k > n {
        return Err(invalid(format!("k must satisfy 1 <= k <= N (k = {k}, N = {n})")));
    }
    let mut dists = vec![0.0; n];
    Ok((0..n)
        .map(|i| {
            let anchor = x.points[i];
            for (d, p) in dists.iter_mut().zip(&x.points) {
                *d = dist(*p, anchor);
            }
            neighborhood_from_distances(x, i, k, &dists)
        })
        .collect())
}

pub fn centroid(x: &PointCloud, nb: &Neighborhood) -> Vec3 {
    let mut c = [0.0; 3];
    for &j in &nb.indices {
        c = add(c, x.points[j]);
    }
    let inv = 1.0 / nb.indices.len() as f64;
    [c[0] * inv, c[1] * inv, c[2] * inv]
}

/// A type-1 (vector) feature in Euclidean `(x, y, z)` coordinates.
pub type Type1Feature = Vec3;

/// `f_i = x_i - centroid(N_i)` for every point.
pub fn input_features(x: &PointCloud, k: usize) -> Result<Vec<Type1Feature>> {
    Ok(CloudIndex::new(x.clone(), k)?.features)
}

/// One candidate neighborhood for a query point: the neighborhood of one of
/// the (possibly tied) closest cloud points.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryNeighborhood {
    pub closest: usize,
    pub neighborhood: Neighborhood,
    pub feature: Type1Feature,
}

/// Cached neighborhoods and centroids of a cloud, answering query lookups.
#[derive(Debug, Clone)]
pub struct CloudIndex {
    pub cloud: PointCloud,
    pub k: usize,
    pub neighborhoods: Vec<Neighborhood>,
    pub centroids: Vec<Vec3>,
    pub features: Vec<Type1Feature>,
}

impl CloudIndex {
    pub fn new(cloud: PointCloud, k: usize) -> Result<Self> {
        let neighborhoods = all_neighborhoods(&cloud, k)?;
        let centroids: Vec<Vec3> = neighborhoods.iter().map(|nb| centroid(&cloud, nb)).collect();
        let features = cloud.points.iter().zip(&centroids).map(|(p, c)| sub(*p, *c)).collect();
        Ok(Self {
            cloud,
            k,
            neighborhoods,
            centroids,
            features,
        })
    }

    /// Indices of all closest points to `q`, ties included, in canonical order.
    pub fn closest(&self, q: Vec3) -> Vec<usize> {
        let pts = &self.cloud.points;
        let mut best = f64::INFINITY;
        for p in pts {
            best = best.min(dist(*p, q));
        }
        let mut out: Vec<usize> = (0..pts.len()).filter(|&i| within_tie(dist(pts[i], q), best)).collect();
        out.sort_by(|&a, &b| canonical_cmp(0.0, &pts[a], 0.0, &pts[b]));
        out
    }

    pub fn query(&self, q: Vec3) -> Vec<QueryNeighborhood> {
        self.closest(q)
            .into_iter()
            .map(|c| QueryNeighborhood {
                closest: c,
                neighborhood: self.neighborhoods[c].clone(),
                feature: sub(q, self.centroids[c]),
            })
            .collect()
    }

    /// Mean distance from each point to the other members of its neighborhood.
    pub fn mean_neighbor_distance(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for nb in &self.neighborhoods {
            let a = self.cloud.points[nb.anchor];
            for &j in &nb.indices {
                if j != nb.anchor {
                    total += dist(a, self.cloud.points[j]);
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

/// Neighborhoods of every closest cloud point to `q`, each with its query
/// feature `q - centroid`.
pub fn query_neighborhoods(x: &PointCloud, q: Vec3, k: usize) -> Result<Vec<QueryNeighborhood>> {
    if x.is_empty() {
        return Err(invalid("query against an empty point cloud"));
    }
    Ok(CloudIndex::new(x.clone(), k)?.query(q))
}

/// Radius of the equivariant zone of cloud 1 when cloud 1 rotates about `c1`
/// and cloud 2 about `c2`: half the distance from `c1` to the bounding sphere
/// of cloud 2 along the segment joining the centers.
pub fn equivariant_zone(_x1: &PointCloud, c1: Vec3, x2: &PointCloud, c2: Vec3) -> Result<f64> {
    let separation = dist(c1, c2);
    if separation == 0.0 {
        return Err(invalid("rotation centers must differ"));
    }
    let d2 = x2.points.iter().map(|p| dist(*p, c2)).fold(0.0, f64::max);
    if d2 >= separation {
        return Err(Error::DegenerateGeometry(format!(
            "bounding sphere of the second cloud (radius {d2}) contains the first center"
        )));
    }
    let dir = sub(c1, c2);
    let p = add(c2, [dir[0] * d2 / separation, dir[1] * d2 / separation, dir[2] * d2 / separation]);
    Ok(dist(c1, p) / 2.0)
}
