//! Dyadic frequency decomposition and homogeneous Sobolev norms on the
//! periodic lattice.
//!
//! The dyadic profile is built by the telescoping ratio construction from the
//! same smooth bump that drives the mollifiers: `eta(s) = chi(s) - chi(2s)`
//! with `chi` a smooth cutoff equal to 1 below 1 and 0 above 2. Because the
//! argument `2^{-j} s` is an exact power-of-two scaling, consecutive terms of
//! `sum_j eta(2^{-j} s)` cancel bitwise and the partition of unity holds
//! exactly on the admissible band.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fft;
use crate::grid::{FormField, GridSpec};

/// Smooth cutoff: 1 for `s <= 1`, 0 for `s >= 2`, a normalized bump integral
/// in between, evaluated through a cached fine-quadrature table.
#[derive(Debug, Clone)]
pub struct SmoothCutoff {
    table: Vec<f64>, // cumulative integral of the bump over [-1, 1]
}

const CUTOFF_TABLE: usize = 4096;

impl SmoothCutoff {
    pub fn new() -> Self {
        // cumulative trapezoid of g(u) = exp(-1/(1-u^2)) over [-1, 1]
        let m = CUTOFF_TABLE;
        let mut table = vec![0.0f64; m + 1];
        let g = |u: f64| {
            if u.abs() >= 1.0 {
                0.0
            } else {
                (-1.0 / (1.0 - u * u)).exp()
            }
        };
        let du = 2.0 / m as f64;
        for i in 0..m {
            let a = -1.0 + i as f64 * du;
            table[i + 1] = table[i] + 0.5 * du * (g(a) + g(a + du));
        }
        let total = table[m];
        for v in &mut table {
            *v /= total;
        }
        SmoothCutoff { table }
    }

    /// `chi(s)`: fraction of the bump mass above `2s - 3`.
    pub fn eval(&self, s: f64) -> f64 {
        if s <= 1.0 {
            return 1.0;
        }
        if s >= 2.0 {
            return 0.0;
        }
        let u = 2.0 * s - 3.0; // in (-1, 1)
        let x = (u + 1.0) / 2.0 * CUTOFF_TABLE as f64;
        let i = (x.floor() as usize).min(CUTOFF_TABLE - 1);
        let frac = x - i as f64;
        let cum = self.table[i] * (1.0 - frac) + self.table[i + 1] * frac;
        1.0 - cum
    }

    /// Annular profile `eta(s) = chi(s) - chi(2s)`, supported in [1/2, 2].
    pub fn shell(&self, s: f64) -> f64 {
        self.eval(s) - self.eval(2.0 * s)
    }
}

impl Default for SmoothCutoff {
    fn default() -> Self {
        Self::new()
    }
}

/// Signed lattice frequency along one axis for DFT bin `k` out of `n`.
fn signed_bin(k: usize, n: usize) -> i64 {
    if k * 2 <= n {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// `|xi|` at a linear spectral index; component `a` frequency is
/// `2 pi k_a / (N_a h)` with `k_a` the signed bin.
pub fn freq_norm(grid: &GridSpec, idx: usize) -> f64 {
    let mut sum = 0.0f64;
    let mut rem = idx;
    for a in (0..grid.n).rev() {
        let k = rem % grid.sizes[a];
        rem /= grid.sizes[a];
        let f = std::f64::consts::TAU * signed_bin(k, grid.sizes[a]) as f64
            / (grid.sizes[a] as f64 * grid.h);
        sum += f * f;
    }
    sum.sqrt()
}

/// Dyadic band system over a fixed grid.
#[derive(Debug, Clone)]
pub struct DyadicSystem {
    pub grid: GridSpec,
    pub j_min: i32,
    pub j_max: i32,
    cutoff: SmoothCutoff,
}

impl DyadicSystem {
    pub fn new(grid: GridSpec) -> Self {
        let l = grid.sizes.iter().cloned().min().unwrap() as f64 * grid.h;
        let xi_min = std::f64::consts::TAU / l;
        let xi_max = std::f64::consts::PI / grid.h * (grid.n as f64).sqrt();
        let j_min = xi_min.log2().floor() as i32;
        let j_max = xi_max.log2().ceil() as i32;
        DyadicSystem {
            grid,
            j_min,
            j_max,
            cutoff: SmoothCutoff::new(),
        }
    }

    pub fn admissible(&self, j: i32) -> bool {
        j >= self.j_min && j <= self.j_max
    }

    /// Spectral multiplier value of band `j` at linear index `idx`.
    pub fn band_weight(&self, j: i32, idx: usize) -> f64 {
        let s = freq_norm(&self.grid, idx) * (2.0f64).powi(-j);
        self.cutoff.shell(s)
    }

    /// Band-pass projection of every component.
    pub fn delta_j(&self, u: &FormField, j: i32) -> Result<FormField> {
        if !self.admissible(j) {
            return Err(Error::InvalidParam(format!(
                "band {j} outside grid range [{}, {}]",
                self.j_min, self.j_max
            )));
        }
        let total = self.grid.num_cells();
        let mut weights = vec![0.0f64; total];
        for (idx, w) in weights.iter_mut().enumerate() {
            *w = self.band_weight(j, idx);
        }
        let mut out = u.clone();
        for comp in &mut out.comps {
            let mut buf: Vec<Complex64> = comp.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft::fft_nd(&mut buf, &self.grid.sizes, false);
            for (b, &w) in buf.iter_mut().zip(&weights) {
                *b *= w;
            }
            fft::fft_nd(&mut buf, &self.grid.sizes, true);
            for (c, b) in comp.iter_mut().zip(&buf) {
                *c = b.re;
            }
        }
        Ok(out)
    }
}

/// Fraction of spectral energy in the zero-frequency bins.
fn dc_fraction(spectra: &[Vec<Complex64>]) -> f64 {
    let mut dc = 0.0f64;
    let mut total = 0.0f64;
    for sp in spectra {
        dc += sp[0].norm_sqr();
        total += sp.iter().map(|c| c.norm_sqr()).sum::<f64>();
    }
    if total == 0.0 {
        0.0
    } else {
        dc / total
    }
}

pub const BAND_ENERGY_TOL: f64 = 1e-8;

/// Homogeneous Sobolev norm `(sum_xi |xi|^{2s} |u^(xi)|^2)^{1/2}` with the
/// lattice normalization that reduces to `l2_norm` at s = 0.
pub fn sobolev_norm(u: &FormField, s: f64) -> Result<f64> {
    let grid = &u.grid;
    let total = grid.num_cells();
    let spectra: Vec<Vec<Complex64>> = u
        .comps
        .iter()
        .map(|c| {
            let mut buf: Vec<Complex64> = c.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft::fft_nd(&mut buf, &grid.sizes, false);
            buf
        })
        .collect();
    let dc = dc_fraction(&spectra);
    if s < 0.0 && dc > BAND_ENERGY_TOL {
        return Err(Error::OutOfBand(dc));
    }
    let norm_factor = grid.volume_element() / total as f64;
    let mut acc = 0.0f64;
    for sp in &spectra {
        for (idx, c) in sp.iter().enumerate() {
            if idx == 0 {
                continue; // 0-frequency excluded from the homogeneous norm
            }
            let f = freq_norm(grid, idx);
            acc += f.powf(2.0 * s) * c.norm_sqr();
        }
    }
    let v = (norm_factor * acc).sqrt();
    if !v.is_finite() {
        return Err(Error::DegenerateNorm);
    }
    Ok(v)
}

/// Random field with spectrum supported on the dyadic shells
/// `[2^{j_lo - 1}, 2^{j_hi + 1}]`, real-valued by hermitian symmetrization.
pub fn band_limited_field(
    grid: &GridSpec,
    degree: usize,
    j_lo: i32,
    j_hi: i32,
    seed: u64,
) -> FormField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x62616e64);
    let total = grid.num_cells();
    let lo = (2.0f64).powi(j_lo - 1);
    let hi = (2.0f64).powi(j_hi + 1);
    let mut out = FormField::zero(grid.clone(), degree);
    for comp in &mut out.comps {
        let mut buf = vec![Complex64::default(); total];
        for (idx, b) in buf.iter_mut().enumerate() {
            let f = freq_norm(grid, idx);
            if f >= lo && f <= hi {
                *b = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
        fft::fft_nd(&mut buf, &grid.sizes, true);
        // the real part of the inverse transform of any spectrum is the
        // inverse transform of its hermitian part: shells stay shells
        for (c, b) in comp.iter_mut().zip(&buf) {
            *c = b.re;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cutoff_endpoints_and_monotone() {
        let chi = SmoothCutoff::new();
        assert_eq!(chi.eval(0.5), 1.0);
        assert_eq!(chi.eval(1.0), 1.0);
        assert_eq!(chi.eval(2.0), 0.0);
        assert_eq!(chi.eval(3.0), 0.0);
        let mut prev = 1.0;
        for i in 0..=100 {
            let v = chi.eval(1.0 + i as f64 / 100.0);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
        assert!((chi.eval(1.5) - 0.5).abs() < 1e-10); // odd symmetry of the bump
    }

    #[test]
    fn shell_partition_is_exact() {
        let chi = SmoothCutoff::new();
        for &s in &[0.7f64, 1.3, 2.9, 14.2, 100.0] {
            let mut acc = 0.0;
            for j in -8..=12 {
                acc += chi.shell(s * (2.0f64).powi(-j));
            }
            // telescoping: endpoints are exactly 1 and 0 for s in band
            assert_eq!(acc, 1.0, "s = {s}");
        }
    }

    #[test]
    fn parseval_at_s_zero() {
        let grid = GridSpec::cube(2, 32, 0.25, 0.0).unwrap();
        let u = band_limited_field(&grid, 1, 2, 3, 5);
        let a = sobolev_norm(&u, 0.0).unwrap();
        let b = u.l2_norm();
        assert!((a - b).abs() / b < 1e-10, "a={a} b={b}");
    }

    #[test]
    fn single_mode_ratio() {
        let grid = GridSpec::cube(2, 32, 0.25, 0.0).unwrap();
        let l = 8.0;
        let mut u = FormField::zero(grid.clone(), 0);
        for i in 0..grid.num_cells() {
            let c = grid.decode(i);
            u.comps[0][i] = (std::f64::consts::TAU * c[0] as f64 * 0.25 / l).sin();
        }
        let r = sobolev_norm(&u, 1.0).unwrap() / sobolev_norm(&u, 0.0).unwrap();
        let expect = std::f64::consts::TAU / l;
        assert!((r - expect).abs() < 1e-8, "r={r} expect={expect}");
    }

    #[test]
    fn band_projector_localizes_shells() {
        let grid = GridSpec::cube(2, 64, 0.125, 0.0).unwrap();
        let sys = DyadicSystem::new(grid.clone());
        let j0 = 3;
        let u = band_limited_field(&grid, 0, j0, j0, 9);
        let none: f64 = sys.delta_j(&u, j0 - 3).unwrap().l2_norm();
        let hit: f64 = sys.delta_j(&u, j0).unwrap().l2_norm();
        assert!(hit > 1e-6 * u.l2_norm());
        assert!(none < 1e-10 * u.l2_norm(), "none={none}");
    }

    #[test]
    fn band_sum_reconstructs() {
        let grid = GridSpec::cube(2, 64, 0.125, 0.0).unwrap();
        let sys = DyadicSystem::new(grid.clone());
        let u = band_limited_field(&grid, 1, 2, 4, 11);
        let mut acc = FormField::zero(grid, 1);
        for j in sys.j_min..=sys.j_max {
            acc = acc.add(&sys.delta_j(&u, j).unwrap()).unwrap();
        }
        let rel = acc.sub(&u).unwrap().l2_norm() / u.l2_norm();
        assert!(rel < 1e-8, "rel={rel}");
    }

    #[test]
    fn negative_s_rejects_dc_energy() {
        let grid = GridSpec::cube(2, 16, 0.25, 0.0).unwrap();
        let mut u = FormField::zero(grid, 0);
        for v in u.comps[0].iter_mut() {
            *v = 1.0;
        }
        assert!(matches!(sobolev_norm(&u, -1.0), Err(Error::OutOfBand(_))));
    }

    #[test]
    fn dyadic_consistency_factor() {
        let grid = GridSpec::cube(2, 64, 0.125, 0.0).unwrap();
        let sys = DyadicSystem::new(grid.clone());
        let u = band_limited_field(&grid, 1, 2, 4, 13);
        let s = 0.7;
        let direct = sobolev_norm(&u, s).unwrap();
        let mut acc = 0.0f64;
        for j in sys.j_min..=sys.j_max {
            let nrm = sys.delta_j(&u, j).unwrap().l2_norm();
            acc += (2.0f64).powf(2.0 * j as f64 * s) * nrm * nrm;
        }
        let dyadic = acc.sqrt();
        let ratio = direct / dyadic;
        assert!((0.25..4.0).contains(&ratio), "ratio={ratio}");
    }
}
