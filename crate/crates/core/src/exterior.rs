//! Finite-dimensional exterior algebra over R^n: wedge, contraction and
//! basis bookkeeping for multivectors of mixed degree.
//!
//! Basis blades are strictly increasing multi-indices, ordered
//! lexicographically, with signs computed by counted transpositions.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// A strictly increasing list of axis indices in `0..n`, identifying a basis
/// blade `dx_{j1} ^ ... ^ dx_{jl}`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MultiIndex(Vec<usize>);

impl MultiIndex {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if !indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidParam(format!(
                "multi-index {indices:?} is not strictly increasing"
            )));
        }
        Ok(MultiIndex(indices))
    }

    pub fn empty() -> Self {
        MultiIndex(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    /// Bitmask with bit `j` set iff axis `j` is present.
    pub fn mask(&self) -> u32 {
        self.0.iter().fold(0u32, |m, &j| m | (1 << j))
    }

    pub fn from_mask(mut mask: u32) -> Self {
        let mut v = Vec::new();
        while mask != 0 {
            let j = mask.trailing_zeros() as usize;
            v.push(j);
            mask &= mask - 1;
        }
        MultiIndex(v)
    }
}

/// All increasing multi-indices of length `degree` drawn from `0..n`, in
/// lexicographic order. This is the component ordering used everywhere.
pub fn multi_indices(n: usize, degree: usize) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    fn rec(n: usize, degree: usize, start: usize, current: &mut Vec<usize>, out: &mut Vec<MultiIndex>) {
        if current.len() == degree {
            out.push(MultiIndex(current.clone()));
            return;
        }
        for j in start..n {
            current.push(j);
            rec(n, degree, j + 1, current, out);
            current.pop();
        }
    }
    rec(n, degree, 0, &mut current, &mut out);
    out
}

/// Sign of `e_a ^ e_b` relative to the sorted merge, for disjoint masks:
/// parity of the number of transpositions needed to interleave.
fn merge_sign(a: u32, b: u32) -> f64 {
    let mut swaps = 0u32;
    let mut bb = b;
    while bb != 0 {
        let j = bb.trailing_zeros();
        // indices of `a` strictly above j must hop over it
        swaps += (a >> (j + 1)).count_ones();
        bb &= bb - 1;
    }
    if swaps % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Sign picked up when contracting axis `j` out of blade `mask` (j in mask):
/// `(-1)^(k-1)` where k is the 1-based position of `j` in the blade.
pub fn contraction_sign(mask: u32, j: usize) -> f64 {
    let below = (mask & ((1u32 << j) - 1)).count_ones();
    if below % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// A general element of the exterior algebra over R^n, stored as a sparse map
/// from basis blades to real coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Multivector {
    n: usize,
    coeffs: BTreeMap<u32, f64>,
}

impl Multivector {
    pub fn zero(n: usize) -> Self {
        Multivector {
            n,
            coeffs: BTreeMap::new(),
        }
    }

    pub fn scalar(n: usize, value: f64) -> Self {
        let mut m = Self::zero(n);
        m.set(&MultiIndex::empty(), value);
        m
    }

    /// The basis vector e_j viewed as a degree-1 element.
    pub fn basis_vector(n: usize, j: usize) -> Self {
        assert!(j < n);
        let mut m = Self::zero(n);
        m.set(&MultiIndex(vec![j]), 1.0);
        m
    }

    pub fn basis_blade(n: usize, idx: &MultiIndex) -> Self {
        let mut m = Self::zero(n);
        m.set(idx, 1.0);
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn set(&mut self, idx: &MultiIndex, value: f64) {
        debug_assert!(idx.indices().iter().all(|&j| j < self.n));
        if value == 0.0 {
            self.coeffs.remove(&idx.mask());
        } else {
            self.coeffs.insert(idx.mask(), value);
        }
    }

    pub fn get(&self, idx: &MultiIndex) -> f64 {
        self.coeffs.get(&idx.mask()).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (MultiIndex, f64)> + '_ {
        self.coeffs.iter().map(|(&m, &c)| (MultiIndex::from_mask(m), c))
    }

    /// Degrees carrying a nonzero coefficient.
    pub fn degrees(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.coeffs.keys().map(|m| m.count_ones() as usize).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    /// True if every nonzero coefficient sits in degree `degree`.
    pub fn is_homogeneous(&self, degree: usize) -> bool {
        self.coeffs.keys().all(|m| m.count_ones() as usize == degree)
    }

    pub fn slice(&self, degree: usize) -> Multivector {
        let coeffs = self
            .coeffs
            .iter()
            .filter(|(m, _)| m.count_ones() as usize == degree)
            .map(|(&m, &c)| (m, c))
            .collect();
        Multivector { n: self.n, coeffs }
    }

    pub fn scale(&self, s: f64) -> Multivector {
        let coeffs = self.coeffs.iter().map(|(&m, &c)| (m, s * c)).collect();
        Multivector { n: self.n, coeffs }
    }

    pub fn add(&self, other: &Multivector) -> Result<Multivector> {
        if self.n != other.n {
            return Err(Error::DimensionMismatch(self.n, other.n));
        }
        let mut out = self.clone();
        for (&m, &c) in &other.coeffs {
            *out.coeffs.entry(m).or_insert(0.0) += c;
        }
        out.coeffs.retain(|_, c| *c != 0.0);
        Ok(out)
    }

    pub fn sub(&self, other: &Multivector) -> Result<Multivector> {
        self.add(&other.scale(-1.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.values().fold(0.0, |m, c| m.max(c.abs()))
    }
}

/// Exterior product. Bilinear, associative, sign from permutation parity.
pub fn wedge(a: &Multivector, u: &Multivector) -> Result<Multivector> {
    if a.n != u.n {
        return Err(Error::DimensionMismatch(a.n, u.n));
    }
    let mut out = Multivector::zero(a.n);
    for (&ma, &ca) in &a.coeffs {
        for (&mu, &cu) in &u.coeffs {
            if ma & mu != 0 {
                continue; // repeated factor
            }
            let sign = merge_sign(ma, mu);
            *out.coeffs.entry(ma | mu).or_insert(0.0) += sign * ca * cu;
        }
    }
    out.coeffs.retain(|_, c| *c != 0.0);
    Ok(out)
}

/// Interior product of a degree-1 element with an arbitrary multivector.
/// Lowers degree by one; vanishes on scalars.
pub fn contract(a: &Multivector, u: &Multivector) -> Result<Multivector> {
    if a.n != u.n {
        return Err(Error::DimensionMismatch(a.n, u.n));
    }
    if !a.is_homogeneous(1) {
        let got = a.degrees().first().copied().unwrap_or(0);
        return Err(Error::DegreeMismatch { expected: 1, got });
    }
    let mut out = Multivector::zero(a.n);
    for (&ma, &ca) in &a.coeffs {
        let j = ma.trailing_zeros() as usize;
        for (&mu, &cu) in &u.coeffs {
            if mu & ma == 0 {
                continue; // axis absent (covers degree 0 too)
            }
            let sign = contraction_sign(mu, j);
            *out.coeffs.entry(mu & !ma).or_insert(0.0) += sign * ca * cu;
        }
    }
    out.coeffs.retain(|_, c| *c != 0.0);
    Ok(out)
}

/// Euclidean inner product of two degree-1 elements.
pub fn dot(a: &Multivector, b: &Multivector) -> Result<f64> {
    if a.n != b.n {
        return Err(Error::DimensionMismatch(a.n, b.n));
    }
    for v in [a, b] {
        if !v.is_homogeneous(1) {
            let got = v.degrees().first().copied().unwrap_or(0);
            return Err(Error::DegreeMismatch { expected: 1, got });
        }
    }
    let mut s = 0.0;
    for (&m, &ca) in &a.coeffs {
        s += ca * b.coeffs.get(&m).copied().unwrap_or(0.0);
    }
    Ok(s)
}

/// Max-norm residual of the anticommutation identity
/// `a _| (b ^ u) + b ^ (a _| u) = (a . b) u` for degree-1 a, b.
/// The identity is a sign/permutation fact, so the residual is exactly zero.
pub fn check_contraction_identity(a: &Multivector, b: &Multivector, u: &Multivector) -> Result<f64> {
    let lhs1 = contract(a, &wedge(b, u)?)?;
    let lhs2 = wedge(b, &contract(a, u)?)?;
    let rhs = u.scale(dot(a, b)?);
    let res = lhs1.add(&lhs2)?.sub(&rhs)?;
    Ok(res.max_abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(n: usize, j: usize) -> Multivector {
        Multivector::basis_vector(n, j)
    }

    #[test]
    fn wedge_antisymmetry_and_nilpotence() {
        let n = 3;
        let e1e2 = wedge(&e(n, 0), &e(n, 1)).unwrap();
        let e2e1 = wedge(&e(n, 1), &e(n, 0)).unwrap();
        let dx12 = MultiIndex::new(vec![0, 1]).unwrap();
        assert_eq!(e1e2.get(&dx12), 1.0);
        assert_eq!(e2e1.get(&dx12), -1.0);
        let sq = wedge(&e(n, 0), &e(n, 0)).unwrap();
        assert_eq!(sq.max_abs(), 0.0);
    }

    #[test]
    fn wedge_bilinearity() {
        let n = 3;
        let a = e(n, 0).scale(2.0).add(&e(n, 1).scale(3.0)).unwrap();
        let w = wedge(&a, &e(n, 2)).unwrap();
        assert_eq!(w.get(&MultiIndex::new(vec![0, 2]).unwrap()), 2.0);
        assert_eq!(w.get(&MultiIndex::new(vec![1, 2]).unwrap()), 3.0);
    }

    #[test]
    fn contraction_basics() {
        let n = 3;
        let dx12 = Multivector::basis_blade(n, &MultiIndex::new(vec![0, 1]).unwrap());
        let c1 = contract(&e(n, 0), &dx12).unwrap();
        assert_eq!(c1.get(&MultiIndex::new(vec![1]).unwrap()), 1.0);
        let c2 = contract(&e(n, 1), &dx12).unwrap();
        assert_eq!(c2.get(&MultiIndex::new(vec![0]).unwrap()), -1.0);
        // absent axis
        let c3 = contract(&e(n, 2), &dx12).unwrap();
        assert_eq!(c3.max_abs(), 0.0);
        // scalars contract to zero
        let s = Multivector::scalar(n, 5.0);
        assert_eq!(contract(&e(n, 0), &s).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn contraction_identity_hand_cases() {
        let n = 2;
        let dx2 = Multivector::basis_blade(n, &MultiIndex::new(vec![1]).unwrap());
        assert_eq!(check_contraction_identity(&e(n, 0), &e(n, 0), &dx2).unwrap(), 0.0);
        assert_eq!(check_contraction_identity(&e(n, 0), &e(n, 1), &dx2).unwrap(), 0.0);
    }

    #[test]
    fn contraction_identity_brute_force() {
        // all basis triples, all degrees, n <= 4
        for n in 1..=4usize {
            for ja in 0..n {
                for jb in 0..n {
                    for deg in 0..=n {
                        for idx in multi_indices(n, deg) {
                            let u = Multivector::basis_blade(n, &idx);
                            let r =
                                check_contraction_identity(&e(n, ja), &e(n, jb), &u).unwrap();
                            assert_eq!(r, 0.0, "n={n} a=e{ja} b=e{jb} u={idx:?}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn double_contraction_vanishes() {
        for n in 1..=4usize {
            for ja in 0..n {
                for deg in 0..=n {
                    for idx in multi_indices(n, deg) {
                        let u = Multivector::basis_blade(n, &idx);
                        let once = contract(&e(n, ja), &u).unwrap();
                        let twice = contract(&e(n, ja), &once).unwrap();
                        assert_eq!(twice.max_abs(), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn degree_bookkeeping() {
        let n = 4;
        let u = Multivector::basis_blade(n, &MultiIndex::new(vec![0, 2]).unwrap());
        let w = wedge(&e(n, 1), &u).unwrap();
        assert!(w.is_homogeneous(3));
        let c = contract(&e(n, 2), &u).unwrap();
        assert!(c.is_homogeneous(1));
    }

    #[test]
    fn random_identity_with_integer_coeffs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for n in 1..=4usize {
            for _ in 0..50 {
                let mut a = Multivector::zero(n);
                let mut b = Multivector::zero(n);
                for j in 0..n {
                    a.set(&MultiIndex::new(vec![j]).unwrap(), rng.gen_range(-4..=4) as f64);
                    b.set(&MultiIndex::new(vec![j]).unwrap(), rng.gen_range(-4..=4) as f64);
                }
                let mut u = Multivector::zero(n);
                for deg in 0..=n {
                    for idx in multi_indices(n, deg) {
                        u.set(&idx, rng.gen_range(-4..=4) as f64);
                    }
                }
                assert_eq!(check_contraction_identity(&a, &b, &u).unwrap(), 0.0);
            }
        }
    }
}
