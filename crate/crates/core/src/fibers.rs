//! Typed feature vectors and the equivariant building blocks acting on them.
//!
//! The implementations here work on single fibers in `f64` and serve as the
//! reference semantics; the batched network in [`crate::autodiff`] and
//! [`crate::attention`] is checked against them.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng::Rng;
use crate::so3::{norm, sh_unchecked, wigner_d, CgTable, Rotation, Vec3};

/// Distances below this are treated as the self-interaction `dx = 0`.
pub const SELF_EPS: f64 = 1e-9;
/// Epsilon of the equivariant layer norm (variance and norm division).
pub const LN_EPS: f64 = 1e-6;
/// Hidden width of every radial MLP.
pub const RADIAL_HIDDEN: usize = 16;

/// Irrep content of a fiber: `(l, multiplicity)` pairs with strictly
/// increasing `l`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct FiberType {
    entries: Vec<(usize, usize)>,
}

impl FiberType {
    pub fn new(mut entries: Vec<(usize, usize)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Config("fiber type lists an irrep type twice".into()));
        }
        if entries.iter().any(|e| e.1 == 0) {
            return Err(Error::Config("fiber multiplicities must be at least 1".into()));
        }
        Ok(Self { entries })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// `{(l, mult)}` for a single type.
    pub fn single(l: usize, mult: usize) -> Self {
        Self::new(vec![(l, mult)]).expect("single-entry fiber type")
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn types(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn dim(&self) -> usize {
        self.entries.iter().map(|&(l, m)| (2 * l + 1) * m).sum()
    }

    pub fn mult(&self, l: usize) -> Option<usize> {
        self.entries.iter().find(|e| e.0 == l).map(|e| e.1)
    }

    /// Start of the type-`l` block in the flat layout.
    pub fn offset(&self, l: usize) -> Option<usize> {
        let mut off = 0;
        for &(t, m) in &self.entries {
            if t == l {
                return Some(off);
            }
            off += (2 * t + 1) * m;
        }
        None
    }

    pub fn lmax(&self) -> Option<usize> {
        self.entries.last().map(|e| e.0)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keep only the listed types.
    pub fn restrict(&self, keep: &[usize]) -> FiberType {
        FiberType {
            entries: self.entries.iter().copied().filter(|e| keep.contains(&e.0)).collect(),
        }
    }

    /// Multiplicities summed per type.
    pub fn concat(&self, other: &FiberType) -> FiberType {
        let mut map: BTreeMap<usize, usize> = BTreeMap::new();
        for &(l, m) in self.entries.iter().chain(&other.entries) {
            *map.entry(l).or_default() += m;
        }
        FiberType {
            entries: map.into_iter().collect(),
        }
    }
}

impl std::fmt::Display for FiberType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.entries.iter().map(|(l, m)| format!("({l},{m})")).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// A feature vector laid out by type, then multiplicity, then `m = -l..=l`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberVec {
    pub ftype: FiberType,
    pub data: Vec<f64>,
}

impl FiberVec {
    pub fn new(ftype: FiberType, data: Vec<f64>) -> Result<Self> {
        if data.len() != ftype.dim() {
            return Err(contract(format!(
                "fiber data length {} does not match type {ftype} of dimension {}",
                data.len(),
                ftype.dim()
            )));
        }
        Ok(Self { ftype, data })
    }

    pub fn zeros(ftype: FiberType) -> Self {
        let data = vec![0.0; ftype.dim()];
        Self { ftype, data }
    }

    pub fn random(ftype: FiberType, rng: &mut Rng) -> Self {
        let data = (0..ftype.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { ftype, data }
    }

    /// A single type-1 vector given in Euclidean `(x, y, z)` coordinates.
    pub fn from_vector(v: Vec3) -> Self {
        Self {
            ftype: FiberType::single(1, 1),
            data: euclid_to_sh(v).to_vec(),
        }
    }

    /// Euclidean `(x, y, z)` of the `c`-th type-1 component.
    pub fn vector(&self, c: usize) -> Option<Vec3> {
        let b = self.block(1, c)?;
        Some(sh_to_euclid([b[0], b[1], b[2]]))
    }

    /// Slice holding copy `c` of type `l`.
    pub fn block(&self, l: usize, c: usize) -> Option<&[f64]> {
        let off = self.ftype.offset(l)?;
        if c >= self.ftype.mult(l)? {
            return None;
        }
        let d = 2 * l + 1;
        Some(&self.data[off + c * d..off + (c + 1) * d])
    }

    /// Block-diagonal Wigner action `rho(r) f`.
    pub fn rotate(&self, r: &Rotation) -> FiberVec {
        let mut out = self.clone();
        let mut off = 0;
        for &(l, m) in self.ftype.entries() {
            let d = 2 * l + 1;
            let dl = wigner_d(l, r);
            for c in 0..m {
                let s = off + c * d;
                out.data[s..s + d].copy_from_slice(&dl.apply(&self.data[s..s + d]));
            }
            off += d * m;
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &FiberVec) -> f64 {
        assert_eq!(self.ftype, other.ftype, "comparing fibers of different types");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// The type-`l` block in `m`-major layout: index `m * mult + c`.
    pub fn m_major(&self, l: usize) -> Vec<f64> {
        let (Some(off), Some(mult)) = (self.ftype.offset(l), self.ftype.mult(l)) else {
            return Vec::new();
        };
        let d = 2 * l + 1;
        let mut out = vec![0.0; d * mult];
        for c in 0..mult {
            for m in 0..d {
                out[m * mult + c] = self.data[off + c * d + m];
            }
        }
        out
    }

    /// Inverse of [`FiberVec::m_major`] for every type at once.
    pub fn from_m_major(ftype: FiberType, blocks: &[Vec<f64>]) -> Result<Self> {
        if blocks.len() != ftype.entries().len() {
            return Err(contract("one block per fiber entry expected"));
        }
        let mut data = Vec::with_capacity(ftype.dim());
        for (&(l, mult), b) in ftype.entries().iter().zip(blocks) {
            let d = 2 * l + 1;
            if b.len() != d * mult {
                return Err(contract(format!("block for type {l} has wrong length")));
            }
            for c in 0..mult {
                for m in 0..d {
                    data.push(b[m * mult + c]);
                }
            }
        }
        FiberVec::new(ftype, data)
    }
}

/// Euclidean `(x, y, z)` to the harmonic ordering `(y, z, x)` used for type 1.
pub fn euclid_to_sh(v: Vec3) -> Vec3 {
    [v[1], v[2], v[0]]
}

pub fn sh_to_euclid(v: Vec3) -> Vec3 {
    [v[2], v[0], v[1]]
}

/// Schur-constrained linear map: one `out_mult x in_mult` matrix per irrep
/// type present in both fibers, zero between different types.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivLinear {
    pub in_type: FiberType,
    pub out_type: FiberType,
    pub blocks: BTreeMap<usize, Vec<f64>>,
}

impl EquivLinear {
    pub fn new(in_type: FiberType, out_type: FiberType, blocks: BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        for (&l, b) in &blocks {
            let (Some(mi), Some(mo)) = (in_type.mult(l), out_type.mult(l)) else {
                return Err(Error::Config(format!("equivariant linear block for type {l} absent from a fiber")));
            };
            if b.len() != mi * mo {
                return Err(Error::Config(format!("block for type {l} must be {mo}x{mi}")));
            }
        }
        Ok(Self { in_type, out_type, blocks })
    }

    /// Fan-in scaled uniform initialization.
    pub fn random(in_type: FiberType, out_type: FiberType, rng: &mut Rng) -> Self {
        let mut blocks = BTreeMap::new();
        for &(l, mo) in out_type.entries() {
            if let Some(mi) = in_type.mult(l) {
                let a = 1.0 / (mi as f64).sqrt();
                blocks.insert(l, (0..mi * mo).map(|_| rng.random_range(-a..a)).collect());
            }
        }
        Self { in_type, out_type, blocks }
    }

    pub fn identity(t: FiberType) -> Self {
        let blocks = t
            .entries()
            .iter()
            .map(|&(l, m)| {
                let mut b = vec![0.0; m * m];
                for i in 0..m {
                    b[i * m + i] = 1.0;
                }
                (l, b)
            })
            .collect();
        Self {
            in_type: t.clone(),
            out_type: t,
            blocks,
        }
    }

    pub fn apply(&self, f: &FiberVec) -> Result<FiberVec> {
        if f.ftype != self.in_type {
            return Err(contract(format!("equivariant linear expects {} but got {}", self.in_type, f.ftype)));
        }
        let mut out = FiberVec::zeros(self.out_type.clone());
        for (&l, w) in &self.blocks {
            let d = 2 * l + 1;
            let mi = self.in_type.mult(l).unwrap();
            let mo = self.out_type.mult(l).unwrap();
            let oi = self.in_type.offset(l).unwrap();
            let oo = self.out_type.offset(l).unwrap();
            for a in 0..mo {
                for b in 0..mi {
                    let wv = w[a * mi + b];
                    for m in 0..d {
                        out.data[oo + a * d + m] += wv * f.data[oi + b * d + m];
                    }
                }
            }
        }
        Ok(out)
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &EquivLinear) -> Result<EquivLinear> {
        if other.out_type != self.in_type {
            return Err(contract("composition of incompatible equivariant linear maps"));
        }
        let mut blocks = BTreeMap::new();
        for (&l, a) in &self.blocks {
            let Some(b) = other.blocks.get(&l) else { continue };
            let mo = self.out_type.mult(l).unwrap();
            let mm = self.in_type.mult(l).unwrap();
            let mi = other.in_type.mult(l).unwrap();
            let mut c = vec![0.0; mo * mi];
            for i in 0..mo {
                for k in 0..mm {
                    for j in 0..mi {
                        c[i * mi + j] += a[i * mm + k] * b[k * mi + j];
                    }
                }
            }
            blocks.insert(l, c);
        }
        EquivLinear::new(other.in_type.clone(), self.out_type.clone(), blocks)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Scalar-input MLP `1 -> 16 -> 16 -> out_mult * in_mult` with softplus
/// activations. Weight matrices are stored `(fan_in x fan_out)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialMlp {
    pub out_mult: usize,
    pub in_mult: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl RadialMlp {
    pub fn random(out_mult: usize, in_mult: usize, rng: &mut Rng) -> Self {
        let h = RADIAL_HIDDEN;
        let n = out_mult * in_mult;
        let mut u = |len: usize, fan_in: usize| -> Vec<f64> {
            let a = 1.0 / (fan_in as f64).sqrt();
            (0..len).map(|_| rng.random_range(-a..a)).collect()
        };
        Self {
            out_mult,
            in_mult,
            w1: u(h, 1),
            b1: u(h, 1),
            w2: u(h * h, h),
            b2: u(h, h),
            w3: u(h * n, h),
            b3: u(n, h),
        }
    }

    /// Radial coefficients `phi[c_out * in_mult + c_in]` at normalized radius `r`.
    pub fn eval(&self, r: f64) -> Vec<f64> {
        let h = RADIAL_HIDDEN;
        let n = self.out_mult * self.in_mult;
        let h1: Vec<f64> = (0..h).map(|a| softplus(r * self.w1[a] + self.b1[a])).collect();
        let h2: Vec<f64> = (0..h)
            .map(|b| softplus(self.b2[b] + (0..h).map(|a| h1[a] * self.w2[a * h + b]).sum::<f64>()))
            .collect();
        (0..n)
            .map(|o| self.b3[o] + (0..h).map(|b| h2[b] * self.w3[b * n + o]).sum::<f64>())
            .collect()
    }
}

/// One `(k, l, J)` coupling of a TFN kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelPath {
    pub k: usize,
    pub l: usize,
    pub j: usize,
    pub radial: RadialMlp,
}

/// Every admissible `(k, l, J)` path enumerated in a fixed order: output type
/// `k`, then input type `l`, then `J` ascending.
pub fn kernel_paths(in_type: &FiberType, out_type: &FiberType) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for k in out_type.types() {
        for l in in_type.types() {
            for j in k.abs_diff(l)..=(k + l) {
                out.push((k, l, j));
            }
        }
    }
    out
}

/// Parameters of `W(dx) = sum_J phi_J(|dx| / r_bar) C_J(dx / |dx|)`.
#[derive(Debug, Clone)]
pub struct TfnKernelParams {
    pub in_type: FiberType,
    pub out_type: FiberType,
    pub paths: Vec<KernelPath>,
    pub radius_scale: f64,
    pub cg: Arc<CgTable>,
}

impl TfnKernelParams {
    pub fn random(in_type: FiberType, out_type: FiberType, radius_scale: f64, rng: &mut Rng) -> Self {
        let paths = kernel_paths(&in_type, &out_type)
            .into_iter()
            .map(|(k, l, j)| KernelPath {
                k,
                l,
                j,
                radial: RadialMlp::random(out_type.mult(k).unwrap(), in_type.mult(l).unwrap(), rng),
            })
            .collect();
        Self {
            in_type,
            out_type,
            paths,
            radius_scale,
            cg: CgTable::standard(),
        }
    }
}

/// Dense `out_dim x in_dim` kernel matrix (row-major) in fiber layout.
pub fn tfn_kernel_eval(p: &TfnKernelParams, dx: Vec3) -> Vec<f64> {
    let (od, id) = (p.out_type.dim(), p.in_type.dim());
    let mut out = vec![0.0; od * id];
    let r = norm(dx);
    let self_edge = r < SELF_EPS;
    let dir = if self_edge {
        [0.0, 0.0, 1.0]
    } else {
        [dx[0] / r, dx[1] / r, dx[2] / r]
    };
    for path in &p.paths {
        if self_edge && path.j > 0 {
            continue;
        }
        let cg = p.cg.get(path.k, path.l, path.j);
        let y = sh_unchecked(path.j, dir);
        let ang = crate::so3::contract_cg(cg, &y);
        let phi = path.radial.eval(r / p.radius_scale);
        let (dk, dl) = (2 * path.k + 1, 2 * path.l + 1);
        let (mo, mi) = (path.radial.out_mult, path.radial.in_mult);
        let oo = p.out_type.offset(path.k).unwrap();
        let oi = p.in_type.offset(path.l).unwrap();
        for a in 0..mo {
            for b in 0..mi {
                let w = phi[a * mi + b];
                for mk in 0..dk {
                    for ml in 0..dl {
                        out[(oo + a * dk + mk) * id + oi + b * dl + ml] += w * ang[mk * dl + ml];
                    }
                }
            }
        }
    }
    out
}

/// Apply a dense kernel matrix to a fiber.
pub fn apply_kernel(p: &TfnKernelParams, kernel: &[f64], f: &FiberVec) -> Result<FiberVec> {
    if f.ftype != p.in_type {
        return Err(contract(format!("kernel expects {} but got {}", p.in_type, f.ftype)));
    }
    let id = p.in_type.dim();
    let data = kernel
        .chunks(id)
        .map(|row| row.iter().zip(&f.data).map(|(a, b)| a * b).sum())
        .collect();
    FiberVec::new(p.out_type.clone(), data)
}

/// Per-type scale and shift of the equivariant layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormAffine {
    pub gamma: BTreeMap<usize, Vec<f64>>,
    pub beta: BTreeMap<usize, Vec<f64>>,
}

impl LayerNormAffine {
    pub fn constant(t: &FiberType, gamma: f64, beta: f64) -> Self {
        Self {
            gamma: t.entries().iter().map(|&(l, m)| (l, vec![gamma; m])).collect(),
            beta: t.entries().iter().map(|&(l, m)| (l, vec![beta; m])).collect(),
        }
    }
}

/// Layer-normalize the norms of each type's copies across multiplicities,
/// rectify, and rescale every copy to its new norm.
pub fn equiv_layer_norm(f: &FiberVec, affine: &LayerNormAffine) -> FiberVec {
    let mut out = f.clone();
    let mut off = 0;
    for &(l, mult) in f.ftype.entries() {
        let d = 2 * l + 1;
        let norms: Vec<f64> = (0..mult)
            .map(|c| f.data[off + c * d..off + (c + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mean = norms.iter().sum::<f64>() / mult as f64;
        let var = norms.iter().map(|n| (n - mean) * (n - mean)).sum::<f64>() / mult as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..mult {
            let z = (norms[c] - mean) * inv;
            let a = (affine.gamma[&l][c] * z + affine.beta[&l][c]).max(0.0);
            let s = a / (norms[c] + LN_EPS);
            for v in &mut out.data[off + c * d..off + (c + 1) * d] {
                *v *= s;
            }
        }
        off += d * mult;
    }
    out
}

/// Concatenate multiplicities per type, `a`'s copies first.
pub fn skip_concat(a: &FiberVec, b: &FiberVec) -> FiberVec {
    let ftype = a.ftype.concat(&b.ftype);
    let mut data = Vec::with_capacity(ftype.dim());
    for &(l, _) in ftype.entries() {
        for src in [a, b] {
            if let (Some(off), Some(m)) = (src.ftype.offset(l), src.ftype.mult(l)) {
                data.extend_from_slice(&src.data[off..off + (2 * l + 1) * m]);
            }
        }
    }
    FiberVec { ftype, data }
}

/// Split every type's multiplicities into `heads` contiguous ranges.
pub fn head_split(f: &FiberVec, heads: usize) -> Result<Vec<FiberVec>> {
    if heads == 0 || f.ftype.entries().iter().any(|&(_, m)| m % heads != 0) {
        return Err(Error::Config(format!(
            "multiplicities of {} are not divisible by {heads} heads",
            f.ftype
        )));
    }
    let htype = FiberType {
        entries: f.ftype.entries().iter().map(|&(l, m)| (l, m / heads)).collect(),
    };
    Ok((0..heads)
        .map(|h| {
            let mut data = Vec::with_capacity(htype.dim());
            let mut off = 0;
            for &(l, m) in f.ftype.entries() {
                let d = 2 * l + 1;
                let per = m / heads;
                data.extend_from_slice(&f.data[off + h * per * d..off + (h + 1) * per * d]);
                off += m * d;
            }
            FiberVec {
                ftype: htype.clone(),
                data,
            }
        })
        .collect())
}

pub fn head_merge(parts: &[FiberVec]) -> Result<FiberVec> {
    let Some(first) = parts.first() else {
        return Err(contract("no heads to merge"));
    };
    if parts.iter().any(|p| p.ftype != first.ftype) {
        return Err(contract("heads must share one fiber type"));
    }
    let h = parts.len();
    let ftype = FiberType {
        entries: first.ftype.entries().iter().map(|&(l, m)| (l, m * h)).collect(),
    };
    let mut data = Vec::with_capacity(ftype.dim());
    for &(l, _) in first.ftype.entries() {
        let off = first.ftype.offset(l).unwrap();
        let len = (2 * l + 1) * first.ftype.mult(l).unwrap();
        for p in parts {
            data.extend_from_slice(&p.data[off..off + len]);
        }
    }
    Ok(FiberVec { ftype, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn t01(m: usize) -> FiberType {
        FiberType::new(vec![(0, m), (1, m)]).unwrap()
    }

    fn random_dir(rng: &mut Rng) -> Vec3 {
        [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ]
    }

    #[test]
    fn fiber_type_dimension_and_validation() {
        let t = FiberType::new(vec![(1, 2), (0, 3)]).unwrap();
        assert_eq!(t.entries(), &[(0, 3), (1, 2)]);
        assert_eq!(t.dim(), 9);
        assert_eq!(t.offset(1), Some(3));
        assert!(FiberType::new(vec![(0, 0)]).is_err());
        assert!(FiberType::new(vec![(0, 1), (0, 2)]).is_err());
        assert!(FiberVec::new(t, vec![0.0; 8]).is_err());
    }

    #[test]
    fn type_one_fiber_rotates_like_a_vector() {
        let mut rng = rng_from_seed(1);
        for _ in 0..20 {
            let r = Rotation::random(&mut rng);
            let v = random_dir(&mut rng);
            let f = FiberVec::from_vector(v).rotate(&r);
            let rv = r.apply(v);
            let got = f.vector(0).unwrap();
            for a in 0..3 {
                assert!((got[a] - rv[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn m_major_round_trip() {
        let mut rng = rng_from_seed(2);
        let f = FiberVec::random(FiberType::new(vec![(0, 3), (1, 2), (2, 2)]).unwrap(), &mut rng);
        let blocks: Vec<Vec<f64>> = f.ftype.types().map(|l| f.m_major(l)).collect();
        assert_eq!(FiberVec::from_m_major(f.ftype.clone(), &blocks).unwrap(), f);
    }

    #[test]
    fn equiv_linear_identity_and_schur() {
        let t = FiberType::single(0, 2);
        let f = FiberVec::new(t.clone(), vec![0.3, -1.2]).unwrap();
        assert_eq!(EquivLinear::identity(t).apply(&f).unwrap(), f);

        let w = EquivLinear::new(FiberType::single(1, 1), FiberType::single(0, 1), BTreeMap::new()).unwrap();
        let v = FiberVec::from_vector([1.0, 2.0, 3.0]);
        assert_eq!(w.apply(&v).unwrap().data, vec![0.0]);
        assert!(matches!(w.apply(&FiberVec::zeros(t01(1))), Err(Error::Contract(_))));
    }

    #[test]
    fn equiv_linear_commutes_with_rotation() {
        let mut rng = rng_from_seed(3);
        for _ in 0..100 {
            let w = EquivLinear::random(t01(3), t01(4), &mut rng);
            let f = FiberVec::random(t01(3), &mut rng);
            let r = Rotation::random(&mut rng);
            let a = w.apply(&f.rotate(&r)).unwrap();
            let b = w.apply(&f).unwrap().rotate(&r);
            assert!(a.max_abs_diff(&b) < 1e-10);
        }
    }

    #[test]
    fn equiv_linear_composition_closes() {
        let mut rng = rng_from_seed(4);
        for _ in 0..20 {
            let a = EquivLinear::random(t01(2), t01(5), &mut rng);
            let b = EquivLinear::random(t01(5), FiberType::new(vec![(1, 3)]).unwrap(), &mut rng);
            let ba = b.compose(&a).unwrap();
            let f = FiberVec::random(t01(2), &mut rng);
            let lhs = ba.apply(&f).unwrap();
            let rhs = b.apply(&a.apply(&f).unwrap()).unwrap();
            assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }
    }

    #[test]
    fn scalar_kernel_is_isotropic() {
        let mut rng = rng_from_seed(5);
        let t = FiberType::single(0, 1);
        let p = TfnKernelParams::random(t.clone(), t, 1.0, &mut rng);
        let dx = [0.3, -0.4, 0.2];
        let r = Rotation::random(&mut rng);
        let a = tfn_kernel_eval(&p, dx);
        let b = tfn_kernel_eval(&p, r.apply(dx));
        assert!((a[0] - b[0]).abs() < 1e-12);
    }

    #[test]
    fn kernel_constraint_holds() {
        let mut rng = rng_from_seed(6);
        for _ in 0..100 {
            let tin = FiberType::new(vec![(0, 2), (1, 1), (2, 1)]).unwrap();
            let tout = t01(2);
            let p = TfnKernelParams::random(tin.clone(), tout.clone(), 0.7, &mut rng);
            let dx = random_dir(&mut rng);
            let r = Rotation::random(&mut rng);
            // W(R dx) D_in(r) f = D_out(r) W(dx) f for a random fiber f.
            let f = FiberVec::random(tin, &mut rng);
            let lhs = apply_kernel(&p, &tfn_kernel_eval(&p, r.apply(dx)), &f.rotate(&r)).unwrap();
            let rhs = apply_kernel(&p, &tfn_kernel_eval(&p, dx), &f).unwrap().rotate(&r);
            assert!(lhs.max_abs_diff(&rhs) < 1e-8);
        }
    }

    #[test]
    fn self_kernel_has_only_zero_order_paths() {
        let mut rng = rng_from_seed(7);
        let p = TfnKernelParams::random(t01(1), t01(1), 1.0, &mut rng);
        let k = tfn_kernel_eval(&p, [0.0; 3]);
        // (0 <- 1) and (1 <- 0) couple only through J = 1, so vanish at dx = 0.
        assert_eq!(k[1..4], [0.0; 3]);
        for row in 1..4 {
            assert_eq!(k[row * 4], 0.0);
        }
        // (1 <- 1) is a multiple of the identity.
        assert!((k[5] - k[10]).abs() < 1e-12 && (k[5] - k[15]).abs() < 1e-12);
        assert!(k[6].abs() < 1e-12 && k[9].abs() < 1e-12);
        // Bounded near zero: the self value is the J = 0 limit.
        let near = tfn_kernel_eval(&p, [0.0, 0.0, 1e-7]);
        assert!((near[0] - k[0]).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_preserves_direction_and_zero() {
        let f = FiberVec::from_vector([0.0, 0.6, 0.8]);
        let aff = LayerNormAffine::constant(&f.ftype, 1.0, 0.5);
        let out = equiv_layer_norm(&f, &aff);
        let v = out.vector(0).unwrap();
        let n = norm(v);
        assert!((n - 0.5).abs() < 1e-5);
        assert!((v[1] / n - 0.6).abs() < 1e-12 && (v[2] / n - 0.8).abs() < 1e-12);

        let z = FiberVec::zeros(t01(4));
        assert!(equiv_layer_norm(&z, &LayerNormAffine::constant(&z.ftype, 1.0, 0.5))
            .data
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_is_equivariant() {
        let mut rng = rng_from_seed(8);
        let t = t01(6);
        for _ in 0..50 {
            let f = FiberVec::random(t.clone(), &mut rng);
            let aff = LayerNormAffine {
                gamma: t
                    .entries()
                    .iter()
                    .map(|&(l, m)| (l, (0..m).map(|_| rng.random_range(0.5..1.5)).collect()))
                    .collect(),
                beta: t
                    .entries()
                    .iter()
                    .map(|&(l, m)| (l, (0..m).map(|_| rng.random_range(-0.5..0.5)).collect()))
                    .collect(),
            };
            let r = Rotation::random(&mut rng);
            let a = equiv_layer_norm(&f.rotate(&r), &aff);
            let b = equiv_layer_norm(&f, &aff).rotate(&r);
            assert!(a.max_abs_diff(&b) < 1e-10);
        }
    }

    #[test]
    fn skip_concat_adds_multiplicities() {
        let mut rng = rng_from_seed(9);
        let a = FiberVec::random(FiberType::single(0, 32), &mut rng);
        let b = FiberVec::random(FiberType::single(0, 32), &mut rng);
        let c = skip_concat(&a, &b);
        assert_eq!(c.ftype, FiberType::single(0, 64));
        assert_eq!(&c.data[..32], &a.data[..]);

        let x = FiberVec::random(t01(2), &mut rng);
        assert_eq!(skip_concat(&x, &FiberVec::zeros(FiberType::empty())), x);

        let y = FiberVec::random(FiberType::single(1, 3), &mut rng);
        let r = Rotation::random(&mut rng);
        let lhs = skip_concat(&x.rotate(&r), &y.rotate(&r));
        let rhs = skip_concat(&x, &y).rotate(&r);
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        assert_eq!(lhs.ftype, FiberType::new(vec![(0, 2), (1, 5)]).unwrap());
    }

    #[test]
    fn head_split_and_merge() {
        let mut rng = rng_from_seed(10);
        let f = FiberVec::random(t01(32), &mut rng);
        let parts = head_split(&f, 8).unwrap();
        assert_eq!(parts.len(), 8);
        assert!(parts.iter().all(|p| p.ftype == t01(4)));
        assert_eq!(head_merge(&parts).unwrap(), f);
        assert_eq!(head_split(&f, 1).unwrap()[0], f);
        assert!(matches!(head_split(&f, 3), Err(Error::Config(_))));
    }
}
