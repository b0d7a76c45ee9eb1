//! Sampled differential forms on a periodic n-dimensional lattice.
//!
//! The exterior derivative uses forward one-sided differences, which keeps
//! d^2 = 0 at machine level, keeps compact supports compact, and makes the
//! truncated homotopy identity a discrete algebraic fact. Convolution is
//! direct summation by default (bit-exact support arithmetic); an FFT path is
//! available for callers that guarantee no-wrap padding.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exterior::{contraction_sign, multi_indices, MultiIndex};
use crate::fft;

/// Uniform periodic lattice: `sizes[a]` points per axis at spacing `h`,
/// physical coordinate of cell `i` along axis `a` is `origin[a] + i*h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub sizes: Vec<usize>,
    pub h: f64,
    pub origin: Vec<f64>,
}

impl GridSpec {
    pub fn new(sizes: Vec<usize>, h: f64, origin: Vec<f64>) -> Result<Self> {
        let n = sizes.len();
        if n == 0 || n > 4 {
            return Err(Error::InvalidParam(format!("dimension {n} unsupported")));
        }
        if sizes.iter().any(|&s| s < 8) {
            return Err(Error::InvalidParam("grid needs >= 8 points per axis".into()));
        }
        if !(h > 0.0) {
            return Err(Error::InvalidParam("spacing h must be positive".into()));
        }
        if origin.len() != n {
            return Err(Error::DimensionMismatch(origin.len(), n));
        }
        Ok(GridSpec { n, sizes, h, origin })
    }

    /// Cube grid centred so that the box is `[origin, origin + size*h)^n`.
    pub fn cube(n: usize, size: usize, h: f64, origin: f64) -> Result<Self> {
        Self::new(vec![size; n], h, vec![origin; n])
    }

    pub fn num_cells(&self) -> usize {
        self.sizes.iter().product()
    }

    /// Axis-major strides, last axis fastest.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.n];
        for a in (0..self.n.saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.sizes[a + 1];
        }
        s
    }

    pub fn linear(&self, coords: &[usize]) -> usize {
        let strides = self.strides();
        coords.iter().zip(&strides).map(|(c, s)| c * s).sum()
    }

    pub fn decode(&self, mut idx: usize) -> Vec<usize> {
        let mut coords = vec![0usize; self.n];
        for a in (0..self.n).rev() {
            coords[a] = idx % self.sizes[a];
            idx /= self.sizes[a];
        }
        coords
    }

    pub fn position(&self, coords: &[usize]) -> Vec<f64> {
        coords
            .iter()
            .zip(&self.origin)
            .map(|(&c, &o)| o + c as f64 * self.h)
            .collect()
    }

    /// Linear index of the cell shifted by +1 along `axis`, with wrap.
    pub fn shifted_plus(&self, idx: usize, axis: usize) -> usize {
        let strides = self.strides();
        let c = (idx / strides[axis]) % self.sizes[axis];
        if c + 1 == self.sizes[axis] {
            idx + strides[axis] - self.sizes[axis] * strides[axis] + 0
        } else {
            idx + strides[axis]
        }
    }

    pub fn volume_element(&self) -> f64 {
        self.h.powi(self.n as i32)
    }
}

/// A compactly supported kernel lattice at the grid spacing: values over an
/// integer offset box `lo..lo+sizes` (cell offsets, position = offset * h).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelLattice {
    pub n: usize,
    pub h: f64,
    pub lo: Vec<i64>,
    pub sizes: Vec<usize>,
    pub values: Vec<f64>,
}

impl KernelLattice {
    pub fn num_cells(&self) -> usize {
        self.sizes.iter().product()
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.n];
        for a in (0..self.n.saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.sizes[a + 1];
        }
        s
    }

    pub fn decode(&self, mut idx: usize) -> Vec<i64> {
        let mut coords = vec![0i64; self.n];
        for a in (0..self.n).rev() {
            coords[a] = self.lo[a] + (idx % self.sizes[a]) as i64;
            idx /= self.sizes[a];
        }
        coords
    }

    /// h^n-weighted lattice integral.
    pub fn integral(&self) -> f64 {
        self.h.powi(self.n as i32) * self.values.iter().sum::<f64>()
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    /// First moment: h^n * sum of value * position.
    pub fn first_moment(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n];
        for idx in 0..self.num_cells() {
            let c = self.decode(idx);
            let v = self.values[idx];
            for a in 0..self.n {
                m[a] += v * c[a] as f64 * self.h;
            }
        }
        let vol = self.h.powi(self.n as i32);
        for x in &mut m {
            *x *= vol;
        }
        m
    }

    /// Forward difference along `axis`; the support box grows one cell on
    /// the low side.
    pub fn forward_diff(&self, axis: usize) -> KernelLattice {
        let mut lo = self.lo.clone();
        lo[axis] -= 1;
        let mut sizes = self.sizes.clone();
        sizes[axis] += 1;
        let mut out = KernelLattice {
            n: self.n,
            h: self.h,
            lo,
            sizes,
            values: vec![0.0; sizes_product(&self.sizes, axis)],
        };
        let out_strides = out.strides();
        let in_strides = self.strides();
        let total = out.num_cells();
        for idx in 0..total {
            // coordinates in the output box
            let mut rem = idx;
            let mut cin_plus: Option<usize> = Some(0); // cell at y + e_axis
            let mut cin_here: Option<usize> = Some(0); // cell at y
            for a in 0..self.n {
                let c = rem / out_strides[a] % out.sizes[a];
                rem = idx; // recompute each axis independently below
                let _ = rem;
                let rel = c as i64 + out.lo[a] - self.lo[a]; // coordinate relative to input box
                let (here, plus) = if a == axis { (rel, rel + 1) } else { (rel, rel) };
                cin_here = cin_here.and_then(|s| {
                    if here >= 0 && (here as usize) < self.sizes[a] {
                        Some(s + here as usize * in_strides[a])
                    } else {
                        None
                    }
                });
                cin_plus = cin_plus.and_then(|s| {
                    if plus >= 0 && (plus as usize) < self.sizes[a] {
                        Some(s + plus as usize * in_strides[a])
                    } else {
                        None
                    }
                });
            }
            let vp = cin_plus.map(|i| self.values[i]).unwrap_or(0.0);
            let vh = cin_here.map(|i| self.values[i]).unwrap_or(0.0);
            out.values[idx] = (vp - vh) / self.h;
        }
        out
    }

    /// Reflection x -> -x.
    pub fn reflect(&self) -> KernelLattice {
        let lo: Vec<i64> = self
            .lo
            .iter()
            .zip(&self.sizes)
            .map(|(&l, &s)| -(l + s as i64 - 1))
            .collect();
        let mut out = KernelLattice {
            n: self.n,
            h: self.h,
            lo,
            sizes: self.sizes.clone(),
            values: vec![0.0; self.values.len()],
        };
        let strides = self.strides();
        for idx in 0..self.values.len() {
            let mut rev = 0usize;
            let mut rem = idx;
            for a in 0..self.n {
                let c = rem / strides[a] % self.sizes[a];
                rem = idx;
                let _ = rem;
                rev += (self.sizes[a] - 1 - c) * strides[a];
            }
            out.values[rev] = self.values[idx];
        }
        out
    }

    /// Direct kernel-kernel convolution; supports add (Minkowski sum).
    pub fn convolve_kernel(&self, other: &KernelLattice) -> KernelLattice {
        assert_eq!(self.n, other.n);
        assert_eq!(self.h, other.h);
        let n = self.n;
        let lo: Vec<i64> = self.lo.iter().zip(&other.lo).map(|(a, b)| a + b).collect();
        let sizes: Vec<usize> = self
            .sizes
            .iter()
            .zip(&other.sizes)
            .map(|(a, b)| a + b - 1)
            .collect();
        let mut out = KernelLattice {
            n,
            h: self.h,
            lo,
            sizes: sizes.clone(),
            values: vec![0.0; sizes.iter().product()],
        };
        let so = out.strides();
        let sa = self.strides();
        let sb = other.strides();
        let vol = self.h.powi(n as i32);
        // out[c] = h^n * sum_a self[a] * other[c - a]
        out.values
            .par_iter_mut()
            .enumerate()
            .for_each(|(idx, slot)| {
                let mut cc = vec![0usize; n];
                let mut rem = idx;
                for a in 0..n {
                    cc[a] = rem / so[a] % out.sizes[a];
                    rem = idx;
                }
                let mut acc = 0.0;
                let mut ai = vec![0usize; n];
                'outer: loop {
                    // b = c - a must be inside other's box
                    let mut bidx = 0usize;
                    let mut aidx = 0usize;
                    let mut ok = true;
                    for a in 0..n {
                        let b = cc[a] as i64 - ai[a] as i64;
                        if b < 0 || b as usize >= other.sizes[a] {
                            ok = false;
                            break;
                        }
                        bidx += b as usize * sb[a];
                        aidx += ai[a] * sa[a];
                    }
                    if ok {
                        acc += self.values[aidx] * other.values[bidx];
                    }
                    // lexicographic counter bump
                    let mut a = n;
                    loop {
                        if a == 0 {
                            break 'outer;
                        }
                        a -= 1;
                        ai[a] += 1;
                        if ai[a] < self.sizes[a] {
                            break;
                        }
                        ai[a] = 0;
                    }
                }
                *slot = vol * acc;
            });
        out
    }

    /// Offsets of cells with a nonzero value.
    pub fn support_cells(&self) -> Vec<Vec<i64>> {
        (0..self.num_cells())
            .filter(|&i| self.values[i] != 0.0)
            .map(|i| self.decode(i))
            .collect()
    }
}

fn sizes_product(sizes: &[usize], grow_axis: usize) -> usize {
    sizes
        .iter()
        .enumerate()
        .map(|(a, &s)| if a == grow_axis { s + 1 } else { s })
        .product()
}

/// Convolution evaluation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvMode {
    /// Direct summation: bit-exact support arithmetic.
    Direct,
    /// FFT path; only valid when the caller guarantees no wrap contamination.
    Fft,
}

fn check_kernel_fits(grid: &GridSpec, k: &KernelLattice) -> Result<()> {
    if grid.n != k.n {
        return Err(Error::DimensionMismatch(grid.n, k.n));
    }
    if (grid.h - k.h).abs() > 1e-15 * grid.h {
        return Err(Error::InvalidParam(format!(
            "kernel spacing {} differs from grid spacing {}",
            k.h, grid.h
        )));
    }
    for a in 0..grid.n {
        if k.sizes[a] > grid.sizes[a] / 2 {
            return Err(Error::KernelTooWide(k.sizes[a], grid.sizes[a] / 2));
        }
    }
    Ok(())
}

/// Scalar periodic convolution `(k * u)(x) = h^n sum_y k(y) u(x - y)`.
pub fn convolve_scalar(
    grid: &GridSpec,
    u: &[f64],
    k: &KernelLattice,
    mode: ConvMode,
) -> Result<Vec<f64>> {
    check_kernel_fits(grid, k)?;
    match mode {
        ConvMode::Direct => Ok(convolve_scalar_direct(grid, u, k)),
        ConvMode::Fft => Ok(convolve_scalar_fft(grid, u, k)),
    }
}

fn convolve_scalar_direct(grid: &GridSpec, u: &[f64], k: &KernelLattice) -> Vec<f64> {
    let n = grid.n;
    let gsz = &grid.sizes;
    let gst = grid.strides();
    let kst = k.strides();
    // per-axis wrapped source index table: src[a][x_a * ksize_a + c_a]
    // = ((x_a - lo_a - c_a) mod N_a) * stride_a
    let mut tables: Vec<Vec<usize>> = Vec::with_capacity(n);
    for a in 0..n {
        let na = gsz[a] as i64;
        let mut t = vec![0usize; gsz[a] * k.sizes[a]];
        for x in 0..gsz[a] as i64 {
            for c in 0..k.sizes[a] as i64 {
                let src = (x - k.lo[a] - c).rem_euclid(na) as usize;
                t[x as usize * k.sizes[a] + c as usize] = src * gst[a];
            }
        }
        tables.push(t);
    }
    let vol = grid.volume_element();
    let kvals = &k.values;
    let total = grid.num_cells();
    let mut out = vec![0.0; total];
    out.par_iter_mut().enumerate().for_each(|(idx, slot)| {
        // decode output coords
        let mut x = [0usize; 4];
        let mut rem = idx;
        for a in (0..n).rev() {
            x[a] = rem % gsz[a];
            rem /= gsz[a];
        }
        let mut acc = 0.0;
        match n {
            1 => {
                let t0 = &tables[0][x[0] * k.sizes[0]..(x[0] + 1) * k.sizes[0]];
                for (kv, &s0) in kvals.iter().zip(t0) {
                    acc += kv * u[s0];
                }
            }
            2 => {
                let t0 = &tables[0][x[0] * k.sizes[0]..(x[0] + 1) * k.sizes[0]];
                let t1 = &tables[1][x[1] * k.sizes[1]..(x[1] + 1) * k.sizes[1]];
                for c0 in 0..k.sizes[0] {
                    let base = t0[c0];
                    let row = &kvals[c0 * kst[0]..c0 * kst[0] + k.sizes[1]];
                    for (kv, &s1) in row.iter().zip(t1) {
                        acc += kv * u[base + s1];
                    }
                }
            }
            _ => {
                let mut c = vec![0usize; n];
                for (ki, kv) in kvals.iter().enumerate() {
                    let mut rem = ki;
                    for a in (0..n).rev() {
                        c[a] = rem % k.sizes[a];
                        rem /= k.sizes[a];
                    }
                    let mut src = 0usize;
                    for a in 0..n {
                        src += tables[a][x[a] * k.sizes[a] + c[a]];
                    }
                    acc += kv * u[src];
                }
            }
        }
        *slot = vol * acc;
    });
    out
}

fn convolve_scalar_fft(grid: &GridSpec, u: &[f64], k: &KernelLattice) -> Vec<f64> {
    let total = grid.num_cells();
    let gst = grid.strides();
    let mut kbuf = vec![Complex64::default(); total];
    for idx in 0..k.num_cells() {
        let v = k.values[idx];
        if v == 0.0 {
            continue;
        }
        let c = k.decode(idx);
        let mut lin = 0usize;
        for a in 0..grid.n {
            let w = c[a].rem_euclid(grid.sizes[a] as i64) as usize;
            lin += w * gst[a];
        }
        kbuf[lin] += Complex64::new(v, 0.0);
    }
    fft::fft_nd(&mut kbuf, &grid.sizes, false);
    let mut ubuf: Vec<Complex64> = u.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft::fft_nd(&mut ubuf, &grid.sizes, false);
    let vol = grid.volume_element();
    for (a, b) in ubuf.iter_mut().zip(&kbuf) {
        *a *= b * vol;
    }
    fft::fft_nd(&mut ubuf, &grid.sizes, true);
    ubuf.into_iter().map(|c| c.re).collect()
}

/// A sampled differential form: one scalar lattice per increasing multi-index
/// of length `degree`, all sharing a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FormField {
    pub grid: GridSpec,
    pub degree: usize,
    pub comps: Vec<Vec<f64>>,
}

impl FormField {
    pub fn zero(grid: GridSpec, degree: usize) -> Self {
        let ncomp = multi_indices(grid.n, degree).len();
        let cells = grid.num_cells();
        FormField {
            grid,
            degree,
            comps: vec![vec![0.0; cells]; ncomp],
        }
    }

    pub fn component_indices(&self) -> Vec<MultiIndex> {
        multi_indices(self.grid.n, self.degree)
    }

    /// Position of a multi-index in the component list.
    pub fn comp_position(&self, idx: &MultiIndex) -> Option<usize> {
        self.component_indices().iter().position(|m| m == idx)
    }

    pub fn scale(&self, s: f64) -> FormField {
        let comps = self
            .comps
            .iter()
            .map(|c| c.iter().map(|v| s * v).collect())
            .collect();
        FormField {
            grid: self.grid.clone(),
            degree: self.degree,
            comps,
        }
    }

    pub fn add(&self, other: &FormField) -> Result<FormField> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &FormField) -> Result<FormField> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &FormField, f: impl Fn(f64, f64) -> f64) -> Result<FormField> {
        if self.grid != other.grid {
            return Err(Error::InvalidParam("grids differ".into()));
        }
        if self.degree != other.degree {
            return Err(Error::DegreeMismatch {
                expected: self.degree,
                got: other.degree,
            });
        }
        let comps = self
            .comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
            .collect();
        Ok(FormField {
            grid: self.grid.clone(),
            degree: self.degree,
            comps,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// h^n-weighted L2 norm over all components.
    pub fn l2_norm(&self) -> f64 {
        let s: f64 = self
            .comps
            .iter()
            .flat_map(|c| c.iter())
            .map(|v| v * v)
            .sum();
        (self.grid.volume_element() * s).sqrt()
    }

    /// h^n-weighted L^p norm of the pointwise euclidean magnitude.
    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        if !(p > 0.0) {
            return Err(Error::InvalidParam("p must be positive".into()));
        }
        let cells = self.grid.num_cells();
        let mut acc = 0.0;
        for i in 0..cells {
            let mag2: f64 = self.comps.iter().map(|c| c[i] * c[i]).sum();
            acc += mag2.sqrt().powf(p);
        }
        Ok((self.grid.volume_element() * acc).powf(1.0 / p))
    }

    /// Pointwise euclidean magnitude squared.
    pub fn magnitude_sq(&self) -> Vec<f64> {
        let cells = self.grid.num_cells();
        (0..cells)
            .map(|i| self.comps.iter().map(|c| c[i] * c[i]).sum())
            .collect()
    }

    /// Translate by whole cells along each axis (periodic).
    pub fn translate(&self, shift: &[i64]) -> FormField {
        let mut out = FormField::zero(self.grid.clone(), self.degree);
        let cells = self.grid.num_cells();
        let gst = self.grid.strides();
        for i in 0..cells {
            let c = self.grid.decode(i);
            let mut j = 0usize;
            for a in 0..self.grid.n {
                let w = (c[a] as i64 + shift[a]).rem_euclid(self.grid.sizes[a] as i64) as usize;
                j += w * gst[a];
            }
            for (oc, ic) in out.comps.iter_mut().zip(&self.comps) {
                oc[j] = ic[i];
            }
        }
        out
    }
}

/// Boolean lattice marking where a field exceeds `tau * (global max)`.
#[derive(Debug, Clone)]
pub struct SupportMask {
    pub grid: GridSpec,
    pub mask: Vec<bool>,
    pub tau: f64,
}

pub const DEFAULT_SUPPORT_TAU: f64 = 1e-12;

pub fn support_mask(u: &FormField, tau: f64) -> Result<SupportMask> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidParam("tau must be in [0,1)".into()));
    }
    let cells = u.grid.num_cells();
    let gmax = u.max_abs();
    let thresh = tau * gmax;
    let mask = (0..cells)
        .map(|i| u.comps.iter().any(|c| c[i].abs() > thresh) && gmax > 0.0)
        .collect();
    Ok(SupportMask {
        grid: u.grid.clone(),
        mask,
        tau,
    })
}

/// Exterior derivative by forward differences: `du = sum_j e_j ^ D_j u`.
/// Returns the zero (l+1)-field when `u` is an n-form.
pub fn exterior_derivative(u: &FormField) -> FormField {
    let n = u.grid.n;
    if u.degree >= n {
        return FormField::zero(u.grid.clone(), n.min(u.degree + 1).min(n));
    }
    let out_idx = multi_indices(n, u.degree + 1);
    let in_idx = multi_indices(n, u.degree);
    let in_pos: std::collections::HashMap<u32, usize> = in_idx
        .iter()
        .enumerate()
        .map(|(i, m)| (m.mask(), i))
        .collect();
    let mut out = FormField::zero(u.grid.clone(), u.degree + 1);
    let cells = u.grid.num_cells();
    let h = u.grid.h;
    // precompute +1 shifted index per axis
    let gst = u.grid.strides();
    for (oi, om) in out_idx.iter().enumerate() {
        let omask = om.mask();
        let grid = u.grid.clone();
        let terms: Vec<(usize, usize, f64)> = om
            .indices()
            .iter()
            .map(|&j| {
                let rest = omask & !(1u32 << j);
                let ci = in_pos[&rest];
                // sign of e_j ^ dx_rest relative to dx_om: hop over indices below j
                let sign = contraction_sign(omask, j);
                (j, ci, sign)
            })
            .collect();
        let comps = &u.comps;
        out.comps[oi]
            .par_iter_mut()
            .enumerate()
            .for_each(|(idx, slot)| {
                let mut acc = 0.0;
                for &(j, ci, sign) in &terms {
                    let cj = (idx / gst[j]) % grid.sizes[j];
                    let up = if cj + 1 == grid.sizes[j] {
                        idx + gst[j] - grid.sizes[j] * gst[j]
                    } else {
                        idx + gst[j]
                    };
                    let d = (comps[ci][up] - comps[ci][idx]) / h;
                    acc += sign * d;
                }
                *slot = acc;
            });
    }
    let _ = cells;
    out
}

/// Interior product with the basis direction `e_j`, componentwise.
pub fn contract_basis(u: &FormField, j: usize) -> FormField {
    let n = u.grid.n;
    if u.degree == 0 {
        return FormField::zero(u.grid.clone(), 0);
    }
    let out_idx = multi_indices(n, u.degree - 1);
    let in_idx = multi_indices(n, u.degree);
    let in_pos: std::collections::HashMap<u32, usize> = in_idx
        .iter()
        .enumerate()
        .map(|(i, m)| (m.mask(), i))
        .collect();
    let mut out = FormField::zero(u.grid.clone(), u.degree - 1);
    for (oi, om) in out_idx.iter().enumerate() {
        let omask = om.mask();
        if omask & (1 << j) != 0 {
            continue; // j already present: source blade would repeat it
        }
        let src_mask = omask | (1 << j);
        if let Some(&ci) = in_pos.get(&src_mask) {
            let sign = contraction_sign(src_mask, j);
            for (o, &v) in out.comps[oi].iter_mut().zip(&u.comps[ci]) {
                *o = sign * v;
            }
        }
    }
    out
}

/// Exterior product with the basis direction `e_j`, componentwise.
pub fn wedge_basis(j: usize, u: &FormField) -> FormField {
    let n = u.grid.n;
    if u.degree >= n {
        return FormField::zero(u.grid.clone(), n);
    }
    let out_idx = multi_indices(n, u.degree + 1);
    let in_idx = multi_indices(n, u.degree);
    let in_pos: std::collections::HashMap<u32, usize> = in_idx
        .iter()
        .enumerate()
        .map(|(i, m)| (m.mask(), i))
        .collect();
    let mut out = FormField::zero(u.grid.clone(), u.degree + 1);
    for (oi, om) in out_idx.iter().enumerate() {
        let omask = om.mask();
        if omask & (1 << j) == 0 {
            continue;
        }
        let rest = omask & !(1u32 << j);
        if let Some(&ci) = in_pos.get(&rest) {
            let sign = contraction_sign(omask, j);
            for (o, &v) in out.comps[oi].iter_mut().zip(&u.comps[ci]) {
                *o = sign * v;
            }
        }
    }
    out
}

/// Componentwise convolution of a form field with a scalar kernel.
pub fn convolve(u: &FormField, k: &KernelLattice, mode: ConvMode) -> Result<FormField> {
    let comps = u
        .comps
        .iter()
        .map(|c| convolve_scalar(&u.grid, c, k, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(FormField {
        grid: u.grid.clone(),
        degree: u.degree,
        comps,
    })
}

/// `sum_j K_j * (e_j _| u)` for a vector-valued kernel: the contraction
/// convolution that underlies the potential operator. Zero on 0-forms.
pub fn contract_convolve(
    kvec: &[KernelLattice],
    u: &FormField,
    mode: ConvMode,
) -> Result<FormField> {
    let n = u.grid.n;
    if kvec.len() != n {
        return Err(Error::DimensionMismatch(kvec.len(), n));
    }
    if u.degree == 0 {
        return Ok(FormField::zero(u.grid.clone(), 0));
    }
    let mut out = FormField::zero(u.grid.clone(), u.degree - 1);
    for j in 0..n {
        let cj = contract_basis(u, j);
        let conv = convolve(&cj, &kvec[j], mode)?;
        out = out.add(&conv)?;
    }
    Ok(out)
}

/// `sum_j K_j * (e_j ^ U)`: the wedge convolution used by the synthesis map.
pub fn wedge_convolve(kvec: &[KernelLattice], u: &FormField, mode: ConvMode) -> Result<FormField> {
    let n = u.grid.n;
    if kvec.len() != n {
        return Err(Error::DimensionMismatch(kvec.len(), n));
    }
    if u.degree >= n {
        return Ok(FormField::zero(u.grid.clone(), n));
    }
    let mut out = FormField::zero(u.grid.clone(), u.degree + 1);
    for j in 0..n {
        let wj = wedge_basis(j, u);
        let conv = convolve(&wj, &kvec[j], mode)?;
        out = out.add(&conv)?;
    }
    Ok(out)
}

/// Discrete divergence of a vector kernel by forward differences.
pub fn kernel_divergence(kvec: &[KernelLattice]) -> KernelLattice {
    let n = kvec.len();
    // common enclosing box after the per-axis forward differences
    let parts: Vec<KernelLattice> = (0..n).map(|j| kvec[j].forward_diff(j)).collect();
    let lo: Vec<i64> = (0..n)
        .map(|a| parts.iter().map(|p| p.lo[a]).min().unwrap())
        .collect();
    let hi: Vec<i64> = (0..n)
        .map(|a| parts.iter().map(|p| p.lo[a] + p.sizes[a] as i64).max().unwrap())
        .collect();
    let sizes: Vec<usize> = lo.iter().zip(&hi).map(|(l, h)| (h - l) as usize).collect();
    let mut out = KernelLattice {
        n,
        h: kvec[0].h,
        lo: lo.clone(),
        sizes: sizes.clone(),
        values: vec![0.0; sizes.iter().product()],
    };
    let ost = out.strides();
    for p in &parts {
        let pst = p.strides();
        for idx in 0..p.num_cells() {
            let c = p.decode(idx);
            let mut oi = 0usize;
            for a in 0..n {
                oi += (c[a] - lo[a]) as usize * ost[a];
            }
            let _ = pst;
            out.values[oi] += p.values[idx];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: &GridSpec, degree: usize, seed: u64) -> FormField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = FormField::zero(grid.clone(), degree);
        for c in &mut u.comps {
            for v in c.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        u
    }

    /// Random field with values quantized to a dyadic grid, so that forward
    /// differences and their sums are exact in f64.
    fn random_dyadic_field(grid: &GridSpec, degree: usize, seed: u64) -> FormField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = (1u64 << 20) as f64;
        let mut u = FormField::zero(grid.clone(), degree);
        for c in &mut u.comps {
            for v in c.iter_mut() {
                *v = (rng.gen_range(-(1 << 20)..(1 << 20)) as f64) / q;
            }
        }
        u
    }

    #[test]
    fn d_of_constant_is_zero() {
        let grid = GridSpec::cube(2, 16, 0.125, 0.0).unwrap();
        let mut u = FormField::zero(grid, 0);
        for v in u.comps[0].iter_mut() {
            *v = 3.25;
        }
        let du = exterior_derivative(&u);
        assert_eq!(du.max_abs(), 0.0);
    }

    #[test]
    fn d_of_linear_is_exact_in_interior() {
        // u = x1 (periodic-windowed): forward difference of affine data is
        // exact away from the wrap seam
        let grid = GridSpec::cube(2, 16, 0.125, 0.0).unwrap();
        let mut u = FormField::zero(grid.clone(), 0);
        for i in 0..grid.num_cells() {
            let c = grid.decode(i);
            u.comps[0][i] = c[0] as f64 * grid.h;
        }
        let du = exterior_derivative(&u);
        // component dx1 index 0
        for i in 0..grid.num_cells() {
            let c = grid.decode(i);
            if c[0] + 1 < grid.sizes[0] {
                assert!((du.comps[0][i] - 1.0).abs() < 1e-12);
            }
            assert_eq!(du.comps[1][i], 0.0);
        }
    }

    #[test]
    fn dd_is_bitwise_zero_on_dyadic_fields() {
        for n in 1..=3usize {
            let grid = GridSpec::cube(n, 12, 0.25, 0.0).unwrap();
            for degree in 0..n {
                let u = random_dyadic_field(&grid, degree, 42 + n as u64 + degree as u64);
                let ddu = exterior_derivative(&exterior_derivative(&u));
                assert_eq!(ddu.max_abs(), 0.0, "n={n} degree={degree}");
            }
        }
    }

    #[test]
    fn dd_is_machine_zero_on_float_fields() {
        for n in 2..=3usize {
            let grid = GridSpec::cube(n, 12, 0.25, 0.0).unwrap();
            for degree in 0..n {
                let u = random_field(&grid, degree, 7 + degree as u64);
                let ddu = exterior_derivative(&exterior_derivative(&u));
                let rel = ddu.max_abs() / (u.max_abs() / grid.h / grid.h);
                assert!(rel < 1e-12, "n={n} degree={degree} rel={rel}");
            }
        }
    }

    fn delta_kernel(n: usize, h: f64) -> KernelLattice {
        KernelLattice {
            n,
            h,
            lo: vec![0; n],
            sizes: vec![1; n],
            values: vec![h.powi(n as i32).recip()],
        }
    }

    #[test]
    fn convolve_with_delta_is_identity() {
        let grid = GridSpec::cube(2, 16, 0.5, 0.0).unwrap();
        let u = random_field(&grid, 1, 3);
        let k = delta_kernel(2, 0.5);
        let v = convolve(&u, &k, ConvMode::Direct).unwrap();
        for (a, b) in u.comps.iter().zip(&v.comps) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn support_minkowski_sum_exact() {
        let grid = GridSpec::cube(2, 32, 0.25, 0.0).unwrap();
        let mut u = FormField::zero(grid.clone(), 0);
        let c = grid.linear(&[5, 9]);
        u.comps[0][c] = 1.0;
        let k = KernelLattice {
            n: 2,
            h: 0.25,
            lo: vec![1, -2],
            sizes: vec![3, 2],
            values: vec![1.0, 0.0, 2.0, 3.0, 0.0, 4.0],
        };
        let v = convolve(&u, &k, ConvMode::Direct).unwrap();
        for i in 0..grid.num_cells() {
            let cc = grid.decode(i);
            let dy = cc[0] as i64 - 5;
            let dx = cc[1] as i64 - 9;
            let inside = k
                .support_cells()
                .iter()
                .any(|s| s[0] == dy && s[1] == dx);
            if !inside {
                assert_eq!(v.comps[0][i], 0.0, "leak at {cc:?}");
            }
        }
    }

    #[test]
    fn conv_commutes_with_d() {
        let grid = GridSpec::cube(2, 24, 0.25, 0.0).unwrap();
        let u = random_field(&grid, 1, 9);
        let k = KernelLattice {
            n: 2,
            h: 0.25,
            lo: vec![0, 0],
            sizes: vec![3, 3],
            values: (0..9).map(|i| (i as f64 * 0.3).cos()).collect(),
        };
        let a = exterior_derivative(&convolve(&u, &k, ConvMode::Direct).unwrap());
        let b = convolve(&exterior_derivative(&u), &k, ConvMode::Direct).unwrap();
        let rel = a.sub(&b).unwrap().max_abs() / a.max_abs();
        assert!(rel < 1e-12, "rel={rel}");
    }

    #[test]
    fn fft_agrees_with_direct() {
        let grid = GridSpec::cube(2, 24, 0.25, 0.0).unwrap();
        let u = random_field(&grid, 1, 5);
        let k = KernelLattice {
            n: 2,
            h: 0.25,
            lo: vec![-1, -1],
            sizes: vec![4, 4],
            values: (0..16).map(|i| ((i * 7 % 5) as f64) - 2.0).collect(),
        };
        let a = convolve(&u, &k, ConvMode::Direct).unwrap();
        let b = convolve(&u, &k, ConvMode::Fft).unwrap();
        let rel = a.sub(&b).unwrap().max_abs() / a.max_abs().max(1e-300);
        assert!(rel < 1e-10, "rel={rel}");
    }

    #[test]
    fn kernel_too_wide_is_rejected() {
        let grid = GridSpec::cube(1, 16, 0.5, 0.0).unwrap();
        let u = FormField::zero(grid, 0);
        let k = KernelLattice {
            n: 1,
            h: 0.5,
            lo: vec![0],
            sizes: vec![9],
            values: vec![1.0; 9],
        };
        assert!(matches!(
            convolve(&u, &k, ConvMode::Direct),
            Err(Error::KernelTooWide(..))
        ));
    }

    #[test]
    fn contract_convolve_zero_on_scalars() {
        let grid = GridSpec::cube(2, 16, 0.5, 0.0).unwrap();
        let u = random_field(&grid, 0, 1);
        let k = vec![delta_kernel(2, 0.5), delta_kernel(2, 0.5)];
        let v = contract_convolve(&k, &u, ConvMode::Direct).unwrap();
        assert_eq!(v.max_abs(), 0.0);
    }

    #[test]
    fn contract_convolve_matches_bruteforce() {
        let grid = GridSpec::cube(2, 20, 0.25, 0.0).unwrap();
        let u = random_field(&grid, 2, 12);
        let mk = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            KernelLattice {
                n: 2,
                h: 0.25,
                lo: vec![0, -1],
                sizes: vec![3, 3],
                values: (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            }
        };
        let kvec = vec![mk(1), mk(2)];
        let fast = contract_convolve(&kvec, &u, ConvMode::Direct).unwrap();
        // independent loop-nest oracle: for n=2, degree 2 -> degree 1
        // (e_0 _| dx01) = dx1 ; (e_1 _| dx01) = -dx0
        let grid2 = grid.clone();
        let mut oracle = FormField::zero(grid2.clone(), 1);
        for i in 0..grid2.num_cells() {
            let x = grid2.decode(i);
            let mut acc = [0.0f64; 2];
            for s in 0..kvec[0].num_cells() {
                let off = kvec[0].decode(s);
                let mut src = 0usize;
                let strides = grid2.strides();
                for a in 0..2 {
                    let w = (x[a] as i64 - off[a]).rem_euclid(grid2.sizes[a] as i64) as usize;
                    src += w * strides[a];
                }
                let vol = grid2.volume_element();
                // component dx1 of output gets K_0 * u_{01}
                acc[1] += vol * kvec[0].values[s] * u.comps[0][src];
                // component dx0 gets -K_1 * u_{01}
                acc[0] -= vol * kvec[1].values[s] * u.comps[0][src];
            }
            oracle.comps[0][i] = acc[0];
            oracle.comps[1][i] = acc[1];
        }
        let rel = fast.sub(&oracle).unwrap().max_abs() / fast.max_abs();
        assert!(rel < 1e-12, "rel={rel}");
    }

    #[test]
    fn norms_on_indicator() {
        let grid = GridSpec::cube(2, 16, 0.5, 0.0).unwrap();
        let mut u = FormField::zero(grid.clone(), 0);
        for i in 0..5 {
            u.comps[0][i] = 1.0;
        }
        let m = 5.0;
        let expect = (m * grid.volume_element()).sqrt();
        assert!((u.l2_norm() - expect).abs() < 1e-12);
        assert!((u.lp_norm(2.0).unwrap() - expect).abs() < 1e-12);
        let empty = FormField::zero(grid, 0);
        assert_eq!(empty.l2_norm(), 0.0);
        assert!(support_mask(&empty, 1e-12).unwrap().mask.iter().all(|&b| !b));
    }

    #[test]
    fn translation_invariance() {
        let grid = GridSpec::cube(2, 16, 0.5, 0.0).unwrap();
        let u = random_field(&grid, 1, 77);
        let shifted = u.translate(&[3, -5]);
        let a = exterior_derivative(&u).translate(&[3, -5]);
        let b = exterior_derivative(&shifted);
        assert_eq!(a.sub(&b).unwrap().max_abs(), 0.0);
        // full-period translation is the identity
        let full = u.translate(&[16, 16]);
        assert_eq!(u.sub(&full).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn kernel_divergence_telescopes() {
        // sum over all cells of a forward-difference divergence is zero
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = (1u64 << 30) as f64;
        let k: Vec<KernelLattice> = (0..2)
            .map(|_| KernelLattice {
                n: 2,
                h: 0.25,
                lo: vec![1, -1],
                sizes: vec![4, 4],
                values: (0..16)
                    .map(|_| (rng.gen_range(-(1i64 << 30)..(1i64 << 30)) as f64) / q)
                    .collect(),
            })
            .collect();
        let div = kernel_divergence(&k);
        assert_eq!(div.values.iter().sum::<f64>(), 0.0);
    }
}
