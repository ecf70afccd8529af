//! SO(3) machinery: rotations, real spherical harmonics, real Wigner
//! D-matrices, Clebsch-Gordan intertwiners and the angular kernel basis.
//!
//! Conventions used everywhere in the crate:
//!
//! - Irrep components are ordered `m = -l..=l`.
//! - Spherical harmonics are real, orthonormal on the sphere and carry no
//!   Condon-Shortley phase, so `Y_1(x) = sqrt(3 / 4pi) * (y, z, x)`. A type-1
//!   feature is therefore a Euclidean vector stored in `(y, z, x)` order and
//!   `D_1(r) = P R Pᵀ` with `P` the `(x, y, z) -> (y, z, x)` permutation.
//! - Wigner D-matrices act on coefficient vectors: `Y_l(R x) = D_l(r) Y_l(x)`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::rng::{rng_from_seed, Rng};

pub type Vec3 = [f64; 3];

const UNIT_TOL: f64 = 1e-9;

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    m: [[f64; 3]; 3],
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Validates orthogonality and `det = +1` to `1e-9`.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let r = Self { m };
        let rrt = r.compose(&r.inverse());
        let mut err: f64 = 0.0;
        for (i, row) in rrt.m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((v - target).abs());
            }
        }
        if !m.iter().flatten().all(|v| v.is_finite()) || err > 1e-9 || (r.det() - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("matrix is not a proper rotation (orthogonality error {err:.3e})")));
        }
        Ok(r)
    }

    /// Row-major, as stored in scene manifests.
    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(invalid("rotation needs 9 entries"));
        }
        Self::from_matrix([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]]
    }

    /// Rodrigues' formula. `axis` must be unit length to `1e-9`.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self> {
        let n = norm(axis);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(invalid(format!("rotation axis must be unit length, got norm {n}")));
        }
        let [x, y, z] = axis;
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Ok(Self {
            m: [
                [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
                [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
                [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
            ],
        })
    }

    /// Haar-uniform rotation drawn from `rng` (normalised Gaussian quaternion).
    pub fn random(rng: &mut Rng) -> Self {
        let mut q = [0.0f64; 4];
        loop {
            for v in q.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-6 {
                q.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
        Self::from_quaternion(q)
    }

    /// `[w, x, y, z]`, assumed normalised.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let [w, x, y, z] = q;
        Self {
            m: [
                [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
                [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
                [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
            ],
        }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let m = &self.m;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    /// `self · other` (apply `other` first).
    pub fn compose(&self, other: &Rotation) -> Rotation {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Rotation { m }
    }

    pub fn inverse(&self) -> Rotation {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.m[j][i];
            }
        }
        Rotation { m }
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Largest entrywise deviation from `other`.
    pub fn max_abs_diff(&self, other: &Rotation) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn rotation_from_axis_angle(axis: Vec3, angle: f64) -> Result<Rotation> {
    Rotation::from_axis_angle(axis, angle)
}

/// Deterministic Haar sample for `seed`.
pub fn random_rotation(seed: u64) -> Rotation {
    Rotation::random(&mut rng_from_seed(seed))
}

pub fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn check_unit(x: Vec3) -> Result<()> {
    let n = norm(x);
    if !(n - 1.0).abs().le(&UNIT_TOL) {
        return Err(invalid(format!("direction must be unit length, got norm {n}")));
    }
    Ok(())
}

/// Real orthonormal spherical harmonics of degree `j` at the unit vector `x`,
/// ordered `m = -j..=j`.
pub fn real_spherical_harmonics(j: usize, x: Vec3) -> Result<Vec<f64>> {
    check_unit(x)?;
    Ok(sh_unchecked(j, x))
}

/// Same as [`real_spherical_harmonics`] without the unit-norm check. The
/// polynomial form is used, so off-sphere inputs yield the harmonic
/// polynomial rather than an error.
pub fn sh_unchecked(j: usize, x: Vec3) -> Vec<f64> {
    let [px, py, pz] = x;
    let l = j as i64;
    let mut out = vec![0.0; 2 * j + 1];
    // Re/Im of (x + iy)^m, i.e. sin^m(theta) cos(m phi) / sin(m phi) up to r^m.
    let mut re = 1.0;
    let mut im = 0.0;
    let mut double_fact = 1.0; // (2m - 1)!!
    for m in 0..=l {
        if m > 0 {
            let (r2, i2) = (re * px - im * py, re * py + im * px);
            re = r2;
            im = i2;
            double_fact *= (2 * m - 1) as f64;
        }
        // Legendre polynomial part P_l^m(z) / sin^m, via upward recurrence in l.
        let mut p_prev = double_fact; // l = m
        let value = if l == m {
            p_prev
        } else {
            let mut p_cur = pz * (2 * m + 1) as f64 * p_prev; // l = m + 1
            for ll in (m + 2)..=l {
                let next = ((2 * ll - 1) as f64 * pz * p_cur - (ll + m - 1) as f64 * p_prev) / (ll - m) as f64;
                p_prev = p_cur;
                p_cur = next;
            }
            p_cur
        };
        let mut ratio = 1.0; // (l - m)! / (l + m)!
        for t in (l - m + 1)..=(l + m) {
            ratio /= t as f64;
        }
        let norm = ((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt();
        if m == 0 {
            out[j] = norm * value;
        } else {
            let s = std::f64::consts::SQRT_2 * norm * value;
            out[(l + m) as usize] = s * re;
            out[(l - m) as usize] = s * im;
        }
    }
    out
}

/// Real Wigner D-matrix of type `l`, row-major `(2l+1) x (2l+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WignerD {
    pub l: usize,
    pub m: Vec<f64>,
}

impl WignerD {
    pub fn dim(&self) -> usize {
        2 * self.l + 1
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.m[a * self.dim() + b]
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d).map(|a| (0..d).map(|b| self.m[a * d + b] * v[b]).sum()).collect()
    }

    pub fn matmul(&self, other: &WignerD) -> WignerD {
        let d = self.dim();
        let mut m = vec![0.0; d * d];
        for a in 0..d {
            for c in 0..d {
                m[a * d + c] = (0..d).map(|b| self.m[a * d + b] * other.m[b * d + c]).sum();
            }
        }
        WignerD { l: self.l, m }
    }

    pub fn max_abs_diff(&self, other: &WignerD) -> f64 {
        self.m.iter().zip(&other.m).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Fixed fitting directions and the pseudo-inverse of their harmonic matrix,
/// one entry per degree.
fn fit_basis(l: usize) -> Arc<(Vec<Vec3>, DMatrix<f64>)> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<(Vec<Vec3>, DMatrix<f64>)>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().unwrap().get(&l) {
        return hit.clone();
    }
    let d = 2 * l + 1;
    let n = 3 * d + 2;
    // Fibonacci lattice: well spread, deterministic.
    let golden = PI * (3.0 - 5f64.sqrt());
    let dirs: Vec<Vec3> = (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64 + 0.3;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect();
    let a = DMatrix::from_fn(d, n, |row, col| sh_unchecked(l, dirs[col])[row]);
    let aat = &a * a.transpose();
    let inv = aat.try_inverse().expect("harmonic fit matrix is well conditioned");
    let pinv = a.transpose() * inv; // n x d
    let entry = Arc::new((dirs, pinv));
    cache.lock().unwrap().insert(l, entry.clone());
    entry
}

/// Real-basis Wigner D-matrix, defined by `Y_l(R x) = D_l(r) Y_l(x)` and
/// recovered exactly by least squares on a fixed set of directions.
pub fn wigner_d(l: usize, r: &Rotation) -> WignerD {
    if l == 0 {
        return WignerD { l, m: vec![1.0] };
    }
    let basis = fit_basis(l);
    let (dirs, pinv) = (&basis.0, &basis.1);
    let d = 2 * l + 1;
    let b = DMatrix::from_fn(d, dirs.len(), |row, col| sh_unchecked(l, r.apply(dirs[col]))[row]);
    let dm = b * pinv;
    let mut m = vec![0.0; d * d];
    for a in 0..d {
        for c in 0..d {
            m[a * d + c] = dm[(a, c)];
        }
    }
    WignerD { l, m }
}

/// Real Clebsch-Gordan stack coupling type `l` input to type `k` output via
/// the type-`j` harmonic: `mats[m]` is `(2k+1) x (2l+1)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CgStack {
    pub k: usize,
    pub l: usize,
    pub j: usize,
    pub mats: Vec<Vec<f64>>,
}

impl CgStack {
    pub fn rows(&self) -> usize {
        2 * self.k + 1
    }

    pub fn cols(&self) -> usize {
        2 * self.l + 1
    }

    /// Residual of the intertwiner identity
    /// `sum_m' D_J[m', m] Q_m' = D_k Q_m D_lᵀ` for one rotation.
    pub fn intertwiner_residual(&self, r: &Rotation) -> f64 {
        let dj = wigner_d(self.j, r);
        let dk = wigner_d(self.k, r);
        let dl = wigner_d(self.l, r);
        let (rows, cols) = (self.rows(), self.cols());
        let mut worst: f64 = 0.0;
        for m in 0..(2 * self.j + 1) {
            for a in 0..rows {
                for b in 0..cols {
                    let lhs: f64 = (0..(2 * self.j + 1)).map(|mp| dj.get(mp, m) * self.mats[mp][a * cols + b]).sum();
                    let mut rhs = 0.0;
                    for ap in 0..rows {
                        for bp in 0..cols {
                            rhs += dk.get(a, ap) * self.mats[m][ap * cols + bp] * dl.get(b, bp);
                        }
                    }
                    worst = worst.max((lhs - rhs).abs());
                }
            }
        }
        worst
    }
}

/// Generators used to linearise the intertwiner constraint.
fn generator_rotations() -> [Rotation; 3] {
    [
        Rotation::from_axis_angle([1.0, 0.0, 0.0], 0.7).unwrap(),
        Rotation::from_axis_angle([0.0, 1.0, 0.0], 0.7).unwrap(),
        Rotation::from_axis_angle([0.0, 0.0, 1.0], 0.7).unwrap(),
    ]
}

/// Solves the intertwiner constraint numerically: the stack is the (unique
/// up to scale) null vector of the constraint evaluated at three generator
/// rotations. Each `m` slice is scaled to unit Frobenius norm and the overall
/// sign makes the first nonzero entry of the flattened stack positive.
pub fn clebsch_gordan(k: usize, l: usize, j: usize) -> Result<CgStack> {
    if j < k.abs_diff(l) || j > k + l {
        return Err(invalid(format!("triangle inequality violated for (k={k}, l={l}, J={j})")));
    }
    let (dk, dl, dj) = (2 * k + 1, 2 * l + 1, 2 * j + 1);
    let n = dj * dk * dl;
    let idx = |m: usize, a: usize, b: usize| m * dk * dl + a * dl + b;
    let gens = generator_rotations();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(3 * n);
    for g in &gens {
        let wj = wigner_d(j, g);
        let wk = wigner_d(k, g);
        let wl = wigner_d(l, g);
        for m in 0..dj {
            for a in 0..dk {
                for b in 0..dl {
                    let mut row = vec![0.0; n];
                    for mp in 0..dj {
                        row[idx(mp, a, b)] += wj.get(mp, m);
                    }
                    for ap in 0..dk {
                        for bp in 0..dl {
                            row[idx(m, ap, bp)] -= wk.get(a, ap) * wl.get(b, bp);
                        }
                    }
                    rows.push(row);
                }
            }
        }
    }
    let mat = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
    let gram = mat.transpose() * &mat;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let smallest = eig.eigenvalues[order[0]];
    let next = if n > 1 { eig.eigenvalues[order[1]] } else { f64::INFINITY };
    if smallest.abs() > 1e-10 || next < 1e-6 {
        return Err(crate::error::Error::Numerical(format!(
            "intertwiner null space is not one-dimensional for (k={k}, l={l}, J={j}): {smallest:e}, {next:e}"
        )));
    }
    let mut v: Vec<f64> = eig.eigenvectors.column(order[0]).iter().copied().collect();
    let total = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = (dj as f64).sqrt() / total;
    v.iter_mut().for_each(|x| *x *= scale);
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    // Snap round-off so exact zeros stay zero.
    v.iter_mut().for_each(|x| {
        if x.abs() < 1e-14 {
            *x = 0.0
        }
    });
    let mats = (0..dj).map(|m| v[m * dk * dl..(m + 1) * dk * dl].to_vec()).collect();
    Ok(CgStack { k, l, j, mats })
}

/// `C_J(x) = sum_m Y_Jm(x) Q_Jm`, a `(2k+1) x (2l+1)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularBasisValue {
    pub k: usize,
    pub l: usize,
    pub j: usize,
    pub m: Vec<f64>,
    pub direction: Vec3,
}

pub fn angular_kernel_basis(cg: &CgStack, x: Vec3) -> Result<AngularBasisValue> {
    let y = real_spherical_harmonics(cg.j, x)?;
    Ok(AngularBasisValue {
        k: cg.k,
        l: cg.l,
        j: cg.j,
        m: contract_cg(cg, &y),
        direction: x,
    })
}

/// `sum_m y[m] Q_m` for precomputed harmonics `y`.
pub fn contract_cg(cg: &CgStack, y: &[f64]) -> Vec<f64> {
    let len = cg.rows() * cg.cols();
    let mut out = vec![0.0; len];
    for (ym, q) in y.iter().zip(&cg.mats) {
        for (o, qv) in out.iter_mut().zip(q) {
            *o += ym * qv;
        }
    }
    out
}

/// All Clebsch-Gordan stacks for input/output types up to `lmax`, computed
/// once and shared.
#[derive(Debug, Clone)]
pub struct CgTable {
    lmax: usize,
    stacks: HashMap<(usize, usize, usize), Arc<CgStack>>,
}

impl CgTable {
    pub fn new(lmax: usize) -> Result<Self> {
        let mut stacks = HashMap::new();
        for k in 0..=lmax {
            for l in 0..=lmax {
                for j in k.abs_diff(l)..=(k + l) {
                    stacks.insert((k, l, j), Arc::new(clebsch_gordan(k, l, j)?));
                }
            }
        }
        Ok(Self { lmax, stacks })
    }

    /// Shared table for `k, l <= 2`.
    pub fn standard() -> Arc<CgTable> {
        static TABLE: OnceLock<Arc<CgTable>> = OnceLock::new();
        TABLE
            .get_or_init(|| Arc::new(CgTable::new(2).expect("standard Clebsch-Gordan table")))
            .clone()
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn get(&self, k: usize, l: usize, j: usize) -> &CgStack {
        self.stacks
            .get(&(k, l, j))
            .unwrap_or_else(|| panic!("no Clebsch-Gordan stack for ({k}, {l}, {j}) with lmax {}", self.lmax))
    }

    /// A copy with the sign of one `m` slice flipped. Used by the mutation
    /// check of the verification suites; a correct suite must reject it.
    pub fn with_flipped_slice(&self, k: usize, l: usize, j: usize, m: usize) -> CgTable {
        let mut out = self.clone();
        if let Some(stack) = out.stacks.get_mut(&(k, l, j)) {
            let s = Arc::make_mut(stack);
            s.mats[m].iter_mut().for_each(|v| *v = -*v);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn random_unit(rng: &mut Rng) -> Vec3 {
        let v: Vec3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = norm(v);
        [v[0] / n, v[1] / n, v[2] / n]
    }

    #[test]
    fn axis_angle_identity_and_quarter_turn() {
        let r = Rotation::from_axis_angle([0.0, 1.0, 0.0], 0.0).unwrap();
        assert!(r.max_abs_diff(&Rotation::identity()) < 1e-15);
        let rz = Rotation::from_axis_angle([0.0, 0.0, 1.0], PI / 2.0).unwrap();
        let v = rz.apply([1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15 && v[2].abs() < 1e-15);
    }

    #[test]
    fn axis_angle_composes_additively_about_one_axis() {
        let z = [0.0, 0.0, 1.0];
        let ab = Rotation::from_axis_angle(z, 0.3)
            .unwrap()
            .compose(&Rotation::from_axis_angle(z, 0.4).unwrap());
        assert!(ab.max_abs_diff(&Rotation::from_axis_angle(z, 0.7).unwrap()) < 1e-15);
    }

    #[test]
    fn axis_angle_rejects_non_unit_axis() {
        assert!(Rotation::from_axis_angle([1.0, 1.0, 0.0], 0.2).is_err());
    }

    #[test]
    fn random_rotation_is_deterministic_and_proper() {
        assert_eq!(random_rotation(11), random_rotation(11));
        let mut rng = rng_from_seed(5);
        for _ in 0..200 {
            let r = Rotation::random(&mut rng);
            assert!(Rotation::from_matrix(*r.matrix()).is_ok());
            assert!((r.det() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn haar_mean_of_first_entry_is_zero() {
        // Under Haar measure m00 has mean 0 and variance 1/3.
        let mut rng = rng_from_seed(99);
        let n = 10_000;
        let mean = (0..n).map(|_| Rotation::random(&mut rng).matrix()[0][0]).sum::<f64>() / n as f64;
        let sigma = (1.0 / 3.0 / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn harmonics_low_degree_values() {
        let y0 = real_spherical_harmonics(0, [0.0, 0.6, 0.8]).unwrap();
        assert!((y0[0] - 0.282_094_791_773_878_14).abs() < 1e-15);
        let y1 = real_spherical_harmonics(1, [0.0, 0.0, 1.0]).unwrap();
        assert!(y1[0].abs() < 1e-15 && (y1[1] - 0.488_602_511_902_919_9).abs() < 1e-15 && y1[2].abs() < 1e-15);
        // (y, z, x) ordering.
        let y1 = real_spherical_harmonics(1, [1.0, 0.0, 0.0]).unwrap();
        assert!((y1[2] - 0.488_602_511_902_919_9).abs() < 1e-15);
        assert!(real_spherical_harmonics(1, [1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn harmonics_degree_two_match_closed_form() {
        let mut rng = rng_from_seed(3);
        for _ in 0..20 {
            let [x, y, z] = random_unit(&mut rng);
            let c = 0.5 * (15.0 / PI).sqrt();
            let expect = [
                c * x * y,
                c * y * z,
                0.25 * (5.0 / PI).sqrt() * (3.0 * z * z - 1.0),
                c * x * z,
                0.5 * c * (x * x - y * y),
            ];
            let got = sh_unchecked(2, [x, y, z]);
            for (a, b) in got.iter().zip(expect) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn harmonics_are_orthonormal_under_monte_carlo_quadrature() {
        let mut rng = rng_from_seed(17);
        let n = 200_000;
        let dims: usize = (0..=2).map(|j| 2 * j + 1).sum();
        let mut gram = vec![0.0; dims * dims];
        for _ in 0..n {
            let x = random_unit(&mut rng);
            let ys: Vec<f64> = (0..=2).flat_map(|j| sh_unchecked(j, x)).collect();
            for a in 0..dims {
                for b in 0..dims {
                    gram[a * dims + b] += ys[a] * ys[b];
                }
            }
        }
        let w = 4.0 * PI / n as f64;
        for a in 0..dims {
            for b in 0..dims {
                let target = if a == b { 1.0 } else { 0.0 };
                // Monte-Carlo standard error is roughly 4pi * 0.3 / sqrt(n) ~ 1e-2 at the
                // diagonal; use the quadrature tolerance scaled for this sample size.
                assert!((gram[a * dims + b] * w - target).abs() < 2e-2, "({a},{b})");
            }
        }
    }

    #[test]
    fn wigner_trivial_and_identity() {
        let r = random_rotation(1);
        assert_eq!(wigner_d(0, &r).m, vec![1.0]);
        let d1 = wigner_d(1, &Rotation::identity());
        for a in 0..3 {
            for b in 0..3 {
                assert!((d1.get(a, b) - if a == b { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn wigner_type_one_is_permuted_rotation() {
        let theta = 0.83;
        let rz = Rotation::from_axis_angle([0.0, 0.0, 1.0], theta).unwrap();
        let d = wigner_d(1, &rz);
        // P maps (x, y, z) -> (y, z, x): row a of P picks coordinate perm[a].
        let perm = [1usize, 2, 0];
        for a in 0..3 {
            for b in 0..3 {
                let expect = rz.matrix()[perm[a]][perm[b]];
                assert!((d.get(a, b) - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn wigner_is_a_homomorphism() {
        let mut rng = rng_from_seed(21);
        for _ in 0..100 {
            let r1 = Rotation::random(&mut rng);
            let r2 = Rotation::random(&mut rng);
            for l in 0..=3 {
                let lhs = wigner_d(l, &r1.compose(&r2));
                let rhs = wigner_d(l, &r1).matmul(&wigner_d(l, &r2));
                assert!(lhs.max_abs_diff(&rhs) < 1e-10);
            }
        }
    }

    #[test]
    fn harmonics_rotate_with_wigner() {
        let mut rng = rng_from_seed(8);
        for _ in 0..100 {
            let j = rng.random_range(0..=3);
            let r = Rotation::random(&mut rng);
            let x = random_unit(&mut rng);
            let lhs = real_spherical_harmonics(j, r.apply(x)).unwrap();
            let rhs = wigner_d(j, &r).apply(&real_spherical_harmonics(j, x).unwrap());
            for (a, b) in lhs.iter().zip(rhs) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cg_scalar_coupling() {
        let cg = clebsch_gordan(0, 0, 0).unwrap();
        assert_eq!(cg.mats, vec![vec![1.0]]);
    }

    #[test]
    fn cg_vector_to_scalar_is_identity() {
        let cg = clebsch_gordan(1, 1, 0).unwrap();
        let s = 1.0 / 3f64.sqrt();
        for a in 0..3 {
            for b in 0..3 {
                let expect = if a == b { s } else { 0.0 };
                assert!((cg.mats[0][a * 3 + b] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cg_vector_to_vector_is_antisymmetric() {
        let cg = clebsch_gordan(1, 1, 1).unwrap();
        assert_eq!(cg.mats.len(), 3);
        for q in &cg.mats {
            let fro: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((fro - 1.0).abs() < 1e-12);
            for a in 0..3 {
                for b in 0..3 {
                    assert!((q[a * 3 + b] + q[b * 3 + a]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cg_rejects_triangle_violation() {
        assert!(clebsch_gordan(0, 1, 2).is_err());
        assert!(clebsch_gordan(2, 0, 1).is_err());
    }

    #[test]
    fn cg_intertwiner_identity_holds() {
        let table = CgTable::standard();
        let mut rng = rng_from_seed(44);
        for k in 0usize..=2 {
            for l in 0..=2 {
                for j in k.abs_diff(l)..=(k + l) {
                    let cg = table.get(k, l, j);
                    for _ in 0..5 {
                        let r = Rotation::random(&mut rng);
                        assert!(cg.intertwiner_residual(&r) < 1e-9, "({k},{l},{j})");
                    }
                }
            }
        }
    }

    #[test]
    fn angular_basis_values() {
        let table = CgTable::standard();
        let c = angular_kernel_basis(table.get(0, 0, 0), [0.6, 0.0, 0.8]).unwrap();
        assert!((c.m[0] - 1.0 / (2.0 * PI.sqrt())).abs() < 1e-15);
        let c = angular_kernel_basis(table.get(1, 1, 0), [0.0, 0.0, 1.0]).unwrap();
        let s = 1.0 / (2.0 * PI.sqrt()) / 3f64.sqrt();
        for a in 0..3 {
            for b in 0..3 {
                assert!((c.m[a * 3 + b] - if a == b { s } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn angular_basis_is_equivariant() {
        let table = CgTable::standard();
        let mut rng = rng_from_seed(12);
        for _ in 0..100 {
            let k = rng.random_range(0usize..=1);
            let l = rng.random_range(0usize..=1);
            let j = rng.random_range(k.abs_diff(l)..=(k + l));
            let cg = table.get(k, l, j);
            let r = Rotation::random(&mut rng);
            let x = random_unit(&mut rng);
            let lhs = angular_kernel_basis(cg, r.apply(x)).unwrap().m;
            let c = angular_kernel_basis(cg, x).unwrap().m;
            let (dk, dl) = (wigner_d(k, &r), wigner_d(l, &r));
            let (rk, cl) = (2 * k + 1, 2 * l + 1);
            for a in 0..rk {
                for b in 0..cl {
                    let mut rhs = 0.0;
                    for ap in 0..rk {
                        for bp in 0..cl {
                            rhs += dk.get(a, ap) * c[ap * cl + bp] * dl.get(b, bp);
                        }
                    }
                    assert!((lhs[a * cl + b] - rhs).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn flipped_slice_breaks_the_intertwiner() {
        let bad = CgTable::standard().with_flipped_slice(1, 1, 1, 0);
        assert!(bad.get(1, 1, 1).intertwiner_residual(&random_rotation(3)) > 1e-3);
    }
}
