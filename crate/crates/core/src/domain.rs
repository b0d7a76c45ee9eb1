//! Special Lipschitz domains: the open region above a Lipschitz graph, the
//! vertical axis being the last coordinate. The graph is sampled on the base
//! lattice, the Lipschitz constant is *certified* from the samples (max slope
//! over axis and diagonal neighbour pairs), and distances to the complement
//! come from an exact squared euclidean distance transform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainKind {
    Flat,
    Wedge,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzGraphDomain {
    pub grid: GridSpec,
    pub kind: DomainKind,
    /// Graph samples over the base lattice (`sizes[..n-1]` cells; a single
    /// value when n = 1).
    pub lambda: Vec<f64>,
    /// Certified Lipschitz constant of the sampled graph.
    pub lipschitz_a: f64,
    /// Cell centers strictly above the graph.
    pub inside: Vec<bool>,
    /// Physical distance from each cell center to the nearest outside cell
    /// center (f64::INFINITY when there is none).
    pub dist_to_complement: Vec<f64>,
}

fn base_sizes(grid: &GridSpec) -> Vec<usize> {
    grid.sizes[..grid.n - 1].to_vec()
}

fn base_cells(grid: &GridSpec) -> usize {
    base_sizes(grid).iter().product()
}

fn base_index(grid: &GridSpec, coords: &[usize]) -> usize {
    let mut idx = 0usize;
    for a in 0..grid.n - 1 {
        idx = idx * grid.sizes[a] + coords[a];
    }
    idx
}

/// Max slope of the sampled graph over axis-aligned and diagonal neighbour
/// pairs of the base lattice (non-periodic).
pub fn certify_lipschitz(grid: &GridSpec, lambda: &[f64]) -> f64 {
    let nb = grid.n - 1;
    if nb == 0 {
        return 0.0;
    }
    let bsz = base_sizes(grid);
    let total: usize = bsz.iter().product();
    let mut worst = 0.0f64;
    // neighbour offsets: all nonzero vectors in {-1,0,1}^nb, half of them by
    // symmetry (first nonzero positive)
    let mut offsets = Vec::new();
    let count = 3usize.pow(nb as u32);
    for code in 0..count {
        let mut off = vec![0i64; nb];
        let mut rem = code;
        for a in 0..nb {
            off[a] = (rem % 3) as i64 - 1;
            rem /= 3;
        }
        if off.iter().find(|&&v| v != 0).map_or(false, |&v| v > 0) {
            offsets.push(off);
        }
    }
    for idx in 0..total {
        let mut c = vec![0usize; nb];
        let mut rem = idx;
        for a in (0..nb).rev() {
            c[a] = rem % bsz[a];
            rem /= bsz[a];
        }
        for off in &offsets {
            let mut ok = true;
            let mut jdx = 0usize;
            let mut dist2 = 0.0f64;
            for a in 0..nb {
                let q = c[a] as i64 + off[a];
                if q < 0 || q as usize >= bsz[a] {
                    ok = false;
                    break;
                }
                jdx = jdx * bsz[a] + q as usize;
                dist2 += (off[a] * off[a]) as f64;
            }
            if ok {
                let slope = (lambda[jdx] - lambda[idx]).abs() / (grid.h * dist2.sqrt());
                worst = worst.max(slope);
            }
        }
    }
    worst
}

fn finish(grid: GridSpec, kind: DomainKind, lambda: Vec<f64>) -> LipschitzGraphDomain {
    let lipschitz_a = certify_lipschitz(&grid, &lambda);
    let cells = grid.num_cells();
    let mut inside = vec![false; cells];
    for i in 0..cells {
        let c = grid.decode(i);
        let b = base_index(&grid, &c);
        let xn = grid.origin[grid.n - 1] + c[grid.n - 1] as f64 * grid.h;
        inside[i] = xn > lambda[b];
    }
    let outside: Vec<bool> = inside.iter().map(|&b| !b).collect();
    let dist_to_complement = distance_to_set(&grid, &outside);
    LipschitzGraphDomain {
        grid,
        kind,
        lambda,
        lipschitz_a,
        inside,
        dist_to_complement,
    }
}

/// Half-space above a horizontal plane (A = 0).
pub fn flat_domain(grid: GridSpec, level: f64) -> LipschitzGraphDomain {
    let lambda = vec![level; base_cells(&grid)];
    finish(grid, DomainKind::Flat, lambda)
}

/// Graph `level + a * |x' - apex|`: an infinite wedge opening upward.
pub fn wedge_domain(grid: GridSpec, level: f64, a: f64, apex: &[f64]) -> Result<LipschitzGraphDomain> {
    if a < 0.0 {
        return Err(Error::InvalidParam("wedge slope must be >= 0".into()));
    }
    if apex.len() != grid.n - 1 {
        return Err(Error::DimensionMismatch(apex.len(), grid.n - 1));
    }
    let bsz = base_sizes(&grid);
    let total = base_cells(&grid);
    let mut lambda = vec![level; total];
    for idx in 0..total {
        let mut rem = idx;
        let mut d2 = 0.0f64;
        for ax in (0..grid.n - 1).rev() {
            let c = rem % bsz[ax];
            rem /= bsz[ax];
            let x = grid.origin[ax] + c as f64 * grid.h;
            d2 += (x - apex[ax]) * (x - apex[ax]);
        }
        lambda[idx] = level + a * d2.sqrt();
    }
    Ok(finish(grid, DomainKind::Wedge, lambda))
}

/// Smoothed random graph, amplitude rescaled (at most 16 halvings) until the
/// certified constant sits in `(a_target/2, a_target]`. `a_target = 0` gives
/// the flat domain back.
pub fn random_domain(
    grid: GridSpec,
    level: f64,
    a_target: f64,
    seed: u64,
) -> Result<LipschitzGraphDomain> {
    if a_target == 0.0 {
        return Ok(flat_domain(grid, level));
    }
    let nb = grid.n - 1;
    if nb == 0 {
        return Ok(flat_domain(grid, level));
    }
    let bsz = base_sizes(&grid);
    let total = base_cells(&grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x646f6d);
    // low-frequency random cosine mix: smooth by construction
    let modes = 5usize;
    let mut freqs = Vec::with_capacity(modes);
    for _ in 0..modes {
        let k: Vec<f64> = (0..nb).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.gen_range(0.3..1.0);
        freqs.push((k, phase, amp));
    }
    let mut raw = vec![0.0f64; total];
    for idx in 0..total {
        let mut rem = idx;
        let mut x = vec![0.0f64; nb];
        for ax in (0..nb).rev() {
            let c = rem % bsz[ax];
            rem /= bsz[ax];
            x[ax] = grid.origin[ax] + c as f64 * grid.h;
        }
        let mut v = 0.0;
        for (k, phase, amp) in &freqs {
            let arg: f64 = k.iter().zip(&x).map(|(ki, xi)| ki * xi).sum::<f64>() + phase;
            v += amp * arg.cos();
        }
        raw[idx] = v;
    }
    let mut scale = 1.0f64;
    for _ in 0..16 {
        let lambda: Vec<f64> = raw.iter().map(|v| level + scale * v).collect();
        let a = certify_lipschitz(&grid, &lambda);
        if a <= a_target && a > 0.5 * a_target {
            return Ok(finish(grid, DomainKind::Random, lambda));
        }
        // aim directly, then the loop re-certifies
        scale *= 0.95 * a_target / a.max(1e-300);
    }
    Err(Error::LipschitzNotCertified(a_target, 16))
}

/// Aperture transversality `sigma * A < 1`.
pub fn check_aperture(domain: &LipschitzGraphDomain, sigma: f64) -> Result<()> {
    let prod = sigma * domain.lipschitz_a;
    if prod >= 1.0 {
        return Err(Error::ApertureCondition(prod));
    }
    Ok(())
}

/// Tent-support aperture for kernels supported in the cone above height `a`:
/// `beta = a (1 - sigma A) / sqrt(1 + A^2)`.
pub fn tent_aperture(a: f64, sigma: f64, lip_a: f64) -> f64 {
    a * (1.0 - sigma * lip_a) / (1.0 + lip_a * lip_a).sqrt()
}

/// Exact squared euclidean distance transform (two-pass lower-envelope
/// method, one sweep per axis), returning *physical* distances from every
/// cell to the nearest cell of the target set. Non-periodic. Cells of the
/// set get 0; if the set is empty every distance is infinite.
pub fn distance_to_set(grid: &GridSpec, set: &[bool]) -> Vec<f64> {
    let sq = edt_squared_cells(&grid.sizes, set);
    sq.into_iter()
        .map(|d| if d.is_finite() { grid.h * d.sqrt() } else { f64::INFINITY })
        .collect()
}

/// Squared distances in cell units.
pub fn edt_squared_cells(sizes: &[usize], set: &[bool]) -> Vec<f64> {
    let n = sizes.len();
    let total: usize = sizes.iter().product();
    assert_eq!(set.len(), total);
    let mut f: Vec<f64> = set
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    // strides, last axis fastest
    let mut strides = vec![1usize; n];
    for a in (0..n.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * sizes[a + 1];
    }
    for axis in 0..n {
        let len = sizes[axis];
        let stride = strides[axis];
        let lines = total / len;
        let mut line = vec![0.0f64; len];
        let mut out = vec![0.0f64; len];
        let mut v = vec![0usize; len];
        let mut z = vec![0.0f64; len + 1];
        for l in 0..lines {
            // base offset of this line: expand l over the other axes
            let mut base = 0usize;
            let mut rem = l;
            for a in (0..n).rev() {
                if a == axis {
                    continue;
                }
                let c = rem % sizes[a];
                rem /= sizes[a];
                base += c * strides[a];
            }
            for i in 0..len {
                line[i] = f[base + i * stride];
            }
            dt_1d(&line, &mut out, &mut v, &mut z);
            for i in 0..len {
                f[base + i * stride] = out[i];
            }
        }
    }
    f
}

/// One-dimensional squared distance transform under the lower envelope of
/// parabolas.
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut any = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !any {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            any = true;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if !any {
        out.copy_from_slice(f);
        return;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k] as f64;
        out[q] = (q as f64 - p) * (q as f64 - p) + f[v[k]];
    }
}

impl LipschitzGraphDomain {
    /// `d(y, Omega^c) >= beta * t`: membership of a lattice cell in the tent
    /// over the domain with aperture `beta`.
    pub fn in_tent(&self, cell: usize, beta: f64, t: f64) -> bool {
        self.dist_to_complement[cell] >= beta * t
    }

    /// Fraction of cells inside the domain.
    pub fn fill_fraction(&self) -> f64 {
        let c = self.inside.iter().filter(|&&b| b).count();
        c as f64 / self.inside.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn edt_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sizes = vec![9usize, 11];
        let total = 99;
        for _ in 0..5 {
            let set: Vec<bool> = (0..total).map(|_| rng.gen_bool(0.2)).collect();
            let fast = edt_squared_cells(&sizes, &set);
            for i in 0..total {
                let (y0, x0) = (i / 11, i % 11);
                let mut best = f64::INFINITY;
                for j in 0..total {
                    if set[j] {
                        let (y1, x1) = (j / 11, j % 11);
                        let d = ((y0 as f64 - y1 as f64).powi(2))
                            + ((x0 as f64 - x1 as f64).powi(2));
                        best = best.min(d);
                    }
                }
                assert_eq!(fast[i], best, "cell {i}");
            }
        }
    }

    #[test]
    fn edt_empty_set_is_infinite() {
        let d = edt_squared_cells(&[4, 4], &vec![false; 16]);
        assert!(d.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn flat_domain_distance_is_height() {
        let grid = GridSpec::cube(2, 32, 0.25, 0.0).unwrap();
        let dom = flat_domain(grid.clone(), 3.9);
        assert_eq!(dom.lipschitz_a, 0.0);
        for i in 0..grid.num_cells() {
            let c = grid.decode(i);
            let xn = c[1] as f64 * 0.25;
            assert_eq!(dom.inside[i], xn > 3.9);
            if dom.inside[i] {
                // nearest outside cell is straight down
                let rows_below = c[1] - 15; // last outside row is x_n = 3.75
                let expect = 0.25 * rows_below as f64;
                assert!((dom.dist_to_complement[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wedge_certifies_its_slope() {
        let grid = GridSpec::cube(2, 32, 0.25, 0.0).unwrap();
        let dom = wedge_domain(grid, 2.0, 1.0, &[4.0]).unwrap();
        assert!((dom.lipschitz_a - 1.0).abs() < 1e-12);
        let dom2 = wedge_domain(GridSpec::cube(3, 16, 0.25, 0.0).unwrap(), 1.0, 0.5, &[2.0, 2.0])
            .unwrap();
        // diagonal pairs see the full gradient magnitude of |x'|
        assert!(dom2.lipschitz_a <= 0.5 + 1e-12);
        assert!(dom2.lipschitz_a > 0.4);
    }

    #[test]
    fn random_domain_certified_below_target() {
        for seed in [1u64, 2, 3] {
            let grid = GridSpec::cube(2, 48, 0.125, 0.0).unwrap();
            let dom = random_domain(grid, 3.0, 0.75, seed).unwrap();
            assert!(dom.lipschitz_a <= 0.75, "A = {}", dom.lipschitz_a);
            assert!(dom.lipschitz_a > 0.375);
            check_aperture(&dom, 1.0).unwrap();
        }
    }

    #[test]
    fn aperture_rejects_bad_product() {
        let grid = GridSpec::cube(2, 32, 0.25, 0.0).unwrap();
        let dom = wedge_domain(grid, 2.0, 1.0, &[4.0]).unwrap();
        assert!(check_aperture(&dom, 1.5).is_err());
        check_aperture(&dom, 0.5).unwrap();
    }

    #[test]
    fn tent_aperture_values() {
        assert!((tent_aperture(0.5, 1.0, 0.0) - 0.5).abs() < 1e-15);
        let wedge = tent_aperture(0.5, 0.5, 1.0);
        assert!((wedge - 0.25 / (2.0f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn n1_domain_is_half_line() {
        let grid = GridSpec::cube(1, 32, 0.5, 0.0).unwrap();
        let dom = flat_domain(grid, 7.9);
        assert_eq!(dom.lambda.len(), 1);
        let inside: usize = dom.inside.iter().filter(|&&b| b).count();
        assert_eq!(inside, 16);
    }
}
