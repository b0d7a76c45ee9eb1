//! End-to-end pipelines from closed fields to localized atom pairs.
//!
//! A closed field `u` goes through the cone transform `Q`, the tent-space
//! atomic decomposition, and the synthesis map `pi`; every tent atom `A_k`
//! then yields a field pair `(a_k, b_k)` with `a_k = d b_k` exactly on the
//! lattice and `supp a_k` inside the atom's ball. Near a boundary each pair
//! is further split with a partition of unity so that every supporting ball,
//! quadrupled, stays inside the domain.
//!
//! Decompositions routinely produce thousands of atoms, each supported on a
//! small patch, so the synthesis convolutions run directly on the sparse
//! piece supports and the resulting pairs are stored on cropped sub-boxes
//! rather than full grids.

use crate::decomp::{
    audit, decompose, Ball, DecompositionAudit, DecompositionParams, SparsePiece,
    TentDecomposition,
};
use crate::domain::distance_to_set;
use crate::error::{Error, Result};
use crate::exterior::{contraction_sign, multi_indices};
use crate::grid::{convolve, exterior_derivative, ConvMode, FormField, GridSpec, KernelLattice};
use crate::kernel::{sample_phi, scaled_gradient};
use crate::tent::{q_transform, tent_norm, TLadder, TentFunction};

/// Relative magnitude below which a field value counts as numerically zero
/// when detecting supports (FFT round-off sits around `1e-15` of the peak).
const SUPPORT_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AtomKind {
    /// Normalized against its ball; no relation to any domain.
    Global,
    /// Additionally has its quadrupled ball inside the domain.
    Interior,
}

/// A form field stored on an axis-aligned sub-box of a grid. The box may
/// stick out of the grid; indices wrap only when values are folded back onto
/// it, while geometric audits use the unwrapped positions.
#[derive(Debug, Clone)]
pub struct CroppedField {
    pub degree: usize,
    pub h: f64,
    /// Lower corner of the box in (possibly negative) cell coordinates.
    pub lo: Vec<i64>,
    pub sizes: Vec<usize>,
    /// One dense value block per form component, row-major over the box.
    pub comps: Vec<Vec<f64>>,
}

impl CroppedField {
    pub fn zero(n: usize, degree: usize, h: f64, lo: Vec<i64>, sizes: Vec<usize>) -> Self {
        let cells: usize = sizes.iter().product();
        let ncomp = multi_indices(n, degree).len();
        CroppedField {
            degree,
            h,
            lo,
            sizes,
            comps: vec![vec![0.0; cells]; ncomp],
        }
    }

    pub fn n(&self) -> usize {
        self.lo.len()
    }

    pub fn num_cells(&self) -> usize {
        self.sizes.iter().product()
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.sizes.len()];
        for a in (0..self.sizes.len().saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.sizes[a + 1];
        }
        s
    }

    /// Box-local coordinates of a linear index.
    pub fn decode(&self, mut idx: usize) -> Vec<usize> {
        let mut c = vec![0usize; self.sizes.len()];
        for a in (0..self.sizes.len()).rev() {
            c[a] = idx % self.sizes[a];
            idx /= self.sizes[a];
        }
        c
    }

    pub fn max_abs(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        let hn = self.h.powi(self.n() as i32);
        (self
            .comps
            .iter()
            .flat_map(|c| c.iter())
            .map(|&v| v * v)
            .sum::<f64>()
            * hn)
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for comp in &mut self.comps {
            for v in comp.iter_mut() {
                *v *= c;
            }
        }
    }

    /// `out += c * self`, wrapping box cells onto the periodic grid.
    pub fn add_into(&self, out: &mut FormField, c: f64) {
        let grid = out.grid.clone();
        let n = self.n();
        let mut g = vec![0usize; n];
        for idx in 0..self.num_cells() {
            let loc = self.decode(idx);
            for a in 0..n {
                let v = self.lo[a] + loc[a] as i64;
                let s = grid.sizes[a] as i64;
                g[a] = v.rem_euclid(s) as usize;
            }
            let gi = grid.linear(&g);
            for (oc, sc) in out.comps.iter_mut().zip(&self.comps) {
                oc[gi] += c * sc[idx];
            }
        }
    }

    pub fn to_field(&self, grid: &GridSpec) -> FormField {
        let mut out = FormField::zero(grid.clone(), self.degree);
        self.add_into(&mut out, 1.0);
        out
    }

    /// Forward-difference exterior derivative on the box (zero outside).
    pub fn derivative(&self) -> CroppedField {
        let n = self.n();
        let mut out = CroppedField::zero(n, self.degree + 1, self.h, self.lo.clone(), self.sizes.clone());
        let terms = derivative_terms(n, self.degree);
        let st = self.strides();
        for idx in 0..self.num_cells() {
            let loc = self.decode(idx);
            for (m, tlist) in terms.iter().enumerate() {
                let mut acc = 0.0;
                for &(j, ic, sign) in tlist {
                    let here = self.comps[ic][idx];
                    let up = if loc[j] + 1 < self.sizes[j] {
                        self.comps[ic][idx + st[j]]
                    } else {
                        0.0
                    };
                    acc += sign * (up - here) / self.h;
                }
                out.comps[m][idx] = acc;
            }
        }
        out
    }

    /// `max |self - other|` for identically shaped boxes.
    pub fn max_diff(&self, other: &CroppedField) -> f64 {
        self.comps
            .iter()
            .zip(&other.comps)
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()))
    }

    /// Physical overshoot of the support past the closed ball.
    pub fn support_excess(&self, ball: &Ball) -> f64 {
        let max = self.max_abs();
        if max == 0.0 {
            return 0.0;
        }
        let tol = SUPPORT_REL_TOL * max;
        let mut excess: f64 = 0.0;
        for idx in 0..self.num_cells() {
            if self.comps.iter().any(|c| c[idx].abs() > tol) {
                let loc = self.decode(idx);
                let d2: f64 = loc
                    .iter()
                    .zip(&self.lo)
                    .zip(&ball.center)
                    .map(|((&l, &lo), &z)| {
                        let d = (lo + l as i64) as f64 - z as f64;
                        d * d
                    })
                    .sum();
                excess = excess.max(d2.sqrt() * self.h - ball.radius);
            }
        }
        excess.max(0.0)
    }
}

/// A localized pair `(a, b)` with `a = d b`, `supp a` inside the closed
/// ball, and `||a||_2 <= |B|^{1/2 - 1/p}` (any overshoot is folded into the
/// accompanying coefficient and recorded in `norm_ratio`).
#[derive(Debug, Clone)]
pub struct HardyAtom {
    pub a: CroppedField,
    pub b: CroppedField,
    pub ball: Ball,
    pub kind: AtomKind,
    /// `||a - d b||_inf / ||a||_inf`.
    pub exactness: f64,
    /// `||a||_2 * |B|^{1/p - 1/2}` before renormalization; values above 1
    /// were divided out of the pair and multiplied into the coefficient.
    pub norm_ratio: f64,
    /// Physical distance by which `supp a` pokes outside the closed ball
    /// (0 when contained); the budget is one difference stencil, `2h`.
    pub support_excess: f64,
    /// `||b||_2 / (r(B) |B|^{1/2 - 1/p})`: the observed constant of the
    /// primitive-size bound.
    pub b_constant: f64,
}

/// The difference terms of the lattice exterior derivative for each output
/// component: `(axis, input component, sign)`.
fn derivative_terms(n: usize, degree: usize) -> Vec<Vec<(usize, usize, f64)>> {
    let out_idx = multi_indices(n, degree + 1);
    let in_idx = multi_indices(n, degree);
    let in_pos: std::collections::HashMap<u32, usize> = in_idx
        .iter()
        .enumerate()
        .map(|(i, m)| (m.mask(), i))
        .collect();
    out_idx
        .iter()
        .map(|om| {
            let omask = om.mask();
            om.indices()
                .iter()
                .map(|&j| (j, in_pos[&(omask & !(1u32 << j))], contraction_sign(omask, j)))
                .collect()
        })
        .collect()
}

/// Nonzero kernel cells as (offset coordinates, value).
fn kernel_cells(k: &KernelLattice) -> Vec<(Vec<i64>, f64)> {
    (0..k.num_cells())
        .filter_map(|i| {
            let v = k.values[i];
            if v == 0.0 {
                None
            } else {
                Some((k.decode(i), v))
            }
        })
        .collect()
}

/// Per-node synthesis kernels shared by all atoms of a decomposition.
struct NodeKernels {
    t: f64,
    dtau: f64,
    phi: Vec<(Vec<i64>, f64)>,
    grads: Vec<Vec<(Vec<i64>, f64)>>,
    /// Offset bounds over phi and all gradients, per axis.
    lo: Vec<i64>,
    hi: Vec<i64>,
}

fn node_kernels(
    ladder: &TLadder,
    n: usize,
    sigma: f64,
    h: f64,
    seed: u64,
) -> Result<Vec<NodeKernels>> {
    ladder
        .nodes
        .iter()
        .map(|&(t, dtau)| {
            let phi_k = sample_phi(n, sigma, t, h, seed)?;
            let grads_k = scaled_gradient(&phi_k, t);
            let mut lo = vec![i64::MAX; n];
            let mut hi = vec![i64::MIN; n];
            for k in std::iter::once(&phi_k).chain(grads_k.iter()) {
                for a in 0..n {
                    lo[a] = lo[a].min(k.lo[a]);
                    hi[a] = hi[a].max(k.lo[a] + k.sizes[a] as i64 - 1);
                }
            }
            Ok(NodeKernels {
                t,
                dtau,
                phi: kernel_cells(&phi_k),
                grads: grads_k.iter().map(kernel_cells).collect(),
                lo,
                hi,
            })
        })
        .collect()
}

/// Synthesize one sparse tent piece into a pair on a cropped box:
/// `a = sum_i dtau_i sum_j (t_i D_j phi_{t_i}) * (e_j wedge A(., t_i))` and
/// `b = sum_i t_i dtau_i phi_{t_i} * A(., t_i)`, by direct convolution over
/// the piece support.
fn synthesize_piece(
    piece: &SparsePiece,
    grid: &GridSpec,
    kernels: &[NodeKernels],
) -> Result<(CroppedField, CroppedField)> {
    let n = grid.n;
    let hn = grid.volume_element();
    // bounding box of the support plus kernel reach plus one halo cell
    let mut lo = vec![i64::MAX; n];
    let mut hi = vec![i64::MIN; n];
    for (cells, nk) in piece.cells.iter().zip(kernels) {
        for &cell in cells {
            let c = grid.decode(cell as usize);
            for a in 0..n {
                lo[a] = lo[a].min(c[a] as i64 + nk.lo[a] - 1);
                hi[a] = hi[a].max(c[a] as i64 + nk.hi[a] + 1);
            }
        }
    }
    if lo.iter().any(|&v| v == i64::MAX) {
        return Err(Error::InvalidParam("cannot synthesize an empty piece".into()));
    }
    let sizes: Vec<usize> = lo
        .iter()
        .zip(&hi)
        .map(|(&l, &u)| (u - l + 1) as usize)
        .collect();
    let mut a = CroppedField::zero(n, piece.degree + 1, grid.h, lo.clone(), sizes.clone());
    let mut b = CroppedField::zero(n, piece.degree, grid.h, lo.clone(), sizes);
    let terms = derivative_terms(n, piece.degree);
    let st = a.strides();
    let lin_off = |cells: &[(Vec<i64>, f64)]| -> Vec<(isize, f64)> {
        cells
            .iter()
            .map(|(off, v)| {
                let mut s = 0isize;
                for ax in 0..n {
                    s += off[ax] as isize * st[ax] as isize;
                }
                (s, *v)
            })
            .collect()
    };
    for (nk, (cells, vals)) in kernels.iter().zip(piece.cells.iter().zip(&piece.vals)) {
        if cells.is_empty() {
            continue;
        }
        let phi_off = lin_off(&nk.phi);
        let grad_off: Vec<Vec<(isize, f64)>> = nk.grads.iter().map(|g| lin_off(g)).collect();
        let wb = nk.t * nk.dtau * hn;
        let wa = nk.dtau * hn;
        for (k, &cell) in cells.iter().enumerate() {
            let c = grid.decode(cell as usize);
            let mut base = 0isize;
            for ax in 0..n {
                base += (c[ax] as i64 - lo[ax]) as isize * st[ax] as isize;
            }
            let v = &vals[k * piece.comps..(k + 1) * piece.comps];
            for (m, comp) in b.comps.iter_mut().enumerate() {
                let vm = wb * v[m];
                if vm != 0.0 {
                    for &(o, kv) in &phi_off {
                        comp[(base + o) as usize] += kv * vm;
                    }
                }
            }
            for (m, tlist) in terms.iter().enumerate() {
                let comp = &mut a.comps[m];
                for &(j, ic, sign) in tlist {
                    let vm = wa * sign * v[ic];
                    if vm != 0.0 {
                        for &(o, kv) in &grad_off[j] {
                            comp[(base + o) as usize] += kv * vm;
                        }
                    }
                }
            }
        }
    }
    Ok((a, b))
}

/// Synthesize each tent atom into a pair with its audit numbers; returns
/// `(atom, coefficient)` where the coefficient is the tent coefficient times
/// any normalization overshoot folded out of the pair.
pub fn atoms_from_tent(
    dec: &TentDecomposition,
    grid: &GridSpec,
    sigma: f64,
    seed: u64,
    _mode: ConvMode,
) -> Result<Vec<(HardyAtom, f64)>> {
    let p = dec.params.p;
    let mut out = Vec::with_capacity(dec.atoms.len());
    if dec.atoms.is_empty() {
        return Ok(out);
    }
    let ladder = &dec.atoms[0].a.ladder;
    let kernels = node_kernels(ladder, grid.n, sigma, grid.h, seed)?;
    for atom in &dec.atoms {
        let (mut a, mut b) = synthesize_piece(&atom.a, grid, &kernels)?;
        let db = b.derivative();
        let a_max = a.max_abs().max(f64::MIN_POSITIVE);
        let exactness = a.max_diff(&db) / a_max;
        let measure = atom.ball.lattice_measure(grid);
        let norm_ratio = a.l2_norm() * measure.powf(1.0 / p - 0.5);
        let mut lambda = atom.lambda;
        if norm_ratio > 1.0 {
            a.scale(1.0 / norm_ratio);
            b.scale(1.0 / norm_ratio);
            lambda *= norm_ratio;
        }
        let b_constant = b.l2_norm() / (atom.ball.radius * measure.powf(0.5 - 1.0 / p));
        let support_excess = a.support_excess(&atom.ball);
        out.push((
            HardyAtom {
                a,
                b,
                ball: atom.ball.clone(),
                kind: AtomKind::Global,
                exactness,
                norm_ratio,
                support_excess,
                b_constant,
            },
            lambda,
        ));
    }
    Ok(out)
}

/// Per-node support margin of a tent function relative to a domain: the
/// transform of boundary-supported data must stay an aperture-`beta`
/// distance above the complement at every scale.
#[derive(Debug, Clone)]
pub struct BetaMarginReport {
    pub beta: f64,
    /// `(t, min over support cells of dist(y, complement) / t)` per node;
    /// infinite when the slice vanishes.
    pub per_node: Vec<(f64, f64)>,
    /// Minimum over nodes of `margin - (beta - 2h/t)`.
    pub min_excess: f64,
    pub ok: bool,
}

pub fn beta_support_check(u: &TentFunction, omega: &[bool], beta: f64) -> Result<BetaMarginReport> {
    let grid = u.grid().clone();
    if omega.len() != grid.num_cells() {
        return Err(Error::InvalidParam("domain mask size mismatch".into()));
    }
    let comp: Vec<bool> = omega.iter().map(|&b| !b).collect();
    let dist = distance_to_set(&grid, &comp);
    let tol = SUPPORT_REL_TOL * u.max_abs();
    let h = grid.h;
    let mut per_node = Vec::new();
    let mut min_excess = f64::INFINITY;
    for (&(t, _), slice) in u.ladder.nodes.iter().zip(&u.slices) {
        let mut margin = f64::INFINITY;
        for cell in 0..grid.num_cells() {
            if slice.comps.iter().any(|c| c[cell].abs() > tol) {
                margin = margin.min(dist[cell] / t);
            }
        }
        per_node.push((t, margin));
        if margin.is_finite() {
            min_excess = min_excess.min(margin - (beta - 2.0 * h / t));
        }
    }
    Ok(BetaMarginReport {
        beta,
        per_node,
        min_excess,
        ok: min_excess >= -1e-12,
    })
}

/// Splitting of one pair `(a, b)` into interior pairs: a greedy ball cover
/// of `supp b`, a normalized bump partition on it, and the pieces
/// `a^j = d(eta_j b) / mu_j`. Pieces are processed on their local supports;
/// the piece fields are only materialized when `retain` is set, while the
/// audit numbers are always recorded.
#[derive(Debug, Clone)]
pub struct InteriorSplit {
    pub parent: usize,
    pub centers: Vec<Vec<usize>>,
    /// Greedy cover radius (half the bump radius).
    pub cover_radius: f64,
    /// Bump radius = ball radius of each piece, `c * r(B)`.
    pub bump_radius: f64,
    /// The constant `c` actually used: the largest the measured interior
    /// depth allows, clamped to `[c_beta, 1]`.
    pub split_constant: f64,
    pub mus: Vec<f64>,
    /// Piece pairs; empty unless the split was retained.
    pub atoms: Vec<HardyAtom>,
    /// `sup_j ||grad eta_j||_inf * r(B)` over the support neighborhood.
    pub grad_const: f64,
    /// `min dist(supp b, complement) / (4 c_beta r(B))`; at least 1 (up to
    /// grid slack) exactly when the splitting is admissible.
    pub interior_margin: f64,
    /// `||sum_j mu_j a^j - a||_inf / ||a||_inf`.
    pub partition_residual: f64,
    /// `sup_j mu_j * |B|^{1/p - 1/2}` against the parent ball measure.
    pub mu_constant: f64,
    /// Piece-level audit aggregates.
    pub max_exactness: f64,
    pub max_support_excess: f64,
    /// `min_j (dist(z_j, complement) - 4 * bump radius)`: nonnegative (up to
    /// `2h`) means every quadrupled piece ball sits inside the domain.
    pub min_containment_margin: f64,
}

impl InteriorSplit {
    /// The covering count `M`.
    pub fn count(&self) -> usize {
        self.mus.len()
    }
}

/// Integer offsets with `|o| <= r_cells` (closed) or `< r_cells` (open).
fn offsets_within(n: usize, r_cells: f64, closed: bool) -> Vec<Vec<i64>> {
    let r = r_cells.ceil() as i64;
    let r2 = r_cells * r_cells;
    let mut out = Vec::new();
    let mut c = vec![-r; n];
    loop {
        let d2: f64 = c.iter().map(|&v| (v * v) as f64).sum();
        if (closed && d2 <= r2 + 1e-12) || (!closed && d2 < r2 - 1e-12) {
            out.push(c.clone());
        }
        let mut a = 0;
        loop {
            c[a] += 1;
            if c[a] <= r {
                break;
            }
            c[a] = -r;
            a += 1;
            if a == n {
                return out;
            }
        }
    }
}

/// Cells of the ball around `center` that lie in the box, as linear indices
/// paired with the squared cell distance.
fn ball_cells(grid: &GridSpec, center: &[usize], offsets: &[Vec<i64>]) -> Vec<(usize, f64)> {
    let mut out = Vec::with_capacity(offsets.len());
    'off: for o in offsets {
        let mut c = Vec::with_capacity(grid.n);
        let mut d2 = 0.0;
        for a in 0..grid.n {
            let v = center[a] as i64 + o[a];
            if v < 0 || v >= grid.sizes[a] as i64 {
                continue 'off;
            }
            c.push(v as usize);
            d2 += (o[a] * o[a]) as f64;
        }
        out.push((grid.linear(&c), d2));
    }
    out
}

/// Lattice measure of the open ball of physical radius `r` around `center`,
/// clipped to the box (the same cell set as `Ball::lattice_measure`, counted
/// over the ball instead of the whole grid).
fn local_measure(grid: &GridSpec, center: &[usize], r: f64) -> f64 {
    let offs = offsets_within(grid.n, r / grid.h, false);
    ball_cells(grid, center, &offs).len() as f64 * grid.volume_element()
}

fn shift_down(grid: &GridSpec, idx: usize, axis: usize) -> usize {
    let stride = grid.strides()[axis];
    let c = (idx / stride) % grid.sizes[axis];
    if c == 0 {
        idx + (grid.sizes[axis] - 1) * stride
    } else {
        idx - stride
    }
}

pub fn interior_split(
    parent: usize,
    atom: &HardyAtom,
    grid: &GridSpec,
    omega: &[bool],
    params: &DecompositionParams,
    retain: bool,
) -> Result<InteriorSplit> {
    let (n, h) = (grid.n, grid.h);
    let cells = grid.num_cells();
    if omega.len() != cells {
        return Err(Error::InvalidParam("domain mask size mismatch".into()));
    }
    let p = params.p;
    let c_b = params.c_beta();
    let r_k = atom.ball.radius;
    let b_field = atom.b.to_field(grid);
    let a_field = atom.a.to_field(grid);
    let b_mag = b_field.magnitude_sq();
    let b_max = b_mag.iter().cloned().fold(0.0f64, f64::max);
    let b_thr = SUPPORT_REL_TOL * SUPPORT_REL_TOL * b_max;
    let g: Vec<usize> = (0..cells).filter(|&i| b_mag[i] > b_thr).collect();
    if g.is_empty() {
        return Err(Error::InvalidParam("atom has empty support".into()));
    }
    let comp: Vec<bool> = omega.iter().map(|&b| !b).collect();
    let dist = distance_to_set(grid, &comp);
    let required = 4.0 * c_b * r_k;
    let margin = g.iter().map(|&i| dist[i]).fold(f64::INFINITY, f64::min);
    if margin < required - 2.0 * h - 1e-12 {
        return Err(Error::InvalidParam(format!(
            "atom support reaches within {margin:.4} of the domain complement; \
             the splitting needs {required:.4}"
        )));
    }
    // The largest admissible constant: quadrupled piece balls of radius
    // c r(B) around support points must still clear the complement.
    let split_constant = (margin / (4.0 * r_k)).clamp(c_b, 1.0);

    // Greedy cover of the support at half the bump radius: every support
    // cell then sees a bump value of at least (3/4)^2 before normalization.
    let cover_radius = 0.5 * split_constant * r_k;
    let bump_radius = split_constant * r_k;
    let cover_offs = offsets_within(n, cover_radius / h, true);
    let bump_offs = offsets_within(n, bump_radius / h, false);
    let mut covered = vec![false; cells];
    let mut centers: Vec<Vec<usize>> = Vec::new();
    for &i in &g {
        if covered[i] {
            continue;
        }
        let z = grid.decode(i);
        for (idx, _) in ball_cells(grid, &z, &cover_offs) {
            covered[idx] = true;
        }
        centers.push(z);
    }

    // Bump partition: (1 - s^2)^2 profiles normalized by their pointwise sum.
    let r2 = (bump_radius / h) * (bump_radius / h);
    let bumps: Vec<Vec<(usize, f64)>> = centers
        .iter()
        .map(|z| {
            ball_cells(grid, z, &bump_offs)
                .into_iter()
                .map(|(idx, d2)| {
                    let s2 = d2 / r2;
                    (idx, (1.0 - s2) * (1.0 - s2))
                })
                .collect()
        })
        .collect();
    let mut total = vec![0.0f64; cells];
    for bump in &bumps {
        for &(idx, w) in bump {
            total[idx] += w;
        }
    }
    if g.iter().any(|&i| total[i] <= 0.0) {
        return Err(Error::InvalidParam(
            "bump partition fails to cover the atom support".into(),
        ));
    }

    let terms = derivative_terms(n, atom.b.degree);
    let out_comps = terms.len();
    let parent_measure = atom.ball.lattice_measure(grid);
    let hn = grid.volume_element();
    let mut eta = vec![0.0f64; cells];
    let mut mus = Vec::new();
    let mut atoms = Vec::new();
    let mut kept_centers = Vec::new();
    let mut grad_const = 0.0f64;
    let mut mu_constant = 0.0f64;
    let mut max_exactness = 0.0f64;
    let mut max_support_excess = 0.0f64;
    let mut min_containment_margin = f64::INFINITY;
    let mut recon = FormField::zero(grid.clone(), a_field.degree);
    for (z, bump) in centers.iter().zip(&bumps) {
        for &(idx, w) in bump {
            if total[idx] > 0.0 {
                eta[idx] = w / total[idx];
            }
        }
        // gradient bound, measured on the support neighborhood of eta
        for &(idx, _) in bump {
            for a in 0..n {
                let up = eta[grid.shifted_plus(idx, a)];
                let down = eta[shift_down(grid, idx, a)];
                let here = eta[idx];
                grad_const = grad_const
                    .max((up - here).abs() / h * r_k)
                    .max((here - down).abs() / h * r_k);
            }
        }
        // cells where d(eta b) can live: the bump support plus one cell down
        let mut cand: Vec<usize> = Vec::with_capacity(2 * bump.len());
        let mut seen = std::collections::HashSet::with_capacity(2 * bump.len());
        for &(idx, _) in bump {
            if seen.insert(idx) {
                cand.push(idx);
            }
            for a in 0..n {
                let d = shift_down(grid, idx, a);
                if seen.insert(d) {
                    cand.push(d);
                }
            }
        }
        // d(eta b) on the candidate cells, component-major
        let mut vals = vec![0.0f64; cand.len() * out_comps];
        let mut l2_sq = 0.0f64;
        let mut eb_l2_sq = 0.0f64;
        for (ci, &idx) in cand.iter().enumerate() {
            for (m, tlist) in terms.iter().enumerate() {
                let mut acc = 0.0;
                for &(j, ic, sign) in tlist {
                    let up = grid.shifted_plus(idx, j);
                    acc += sign
                        * (eta[up] * b_field.comps[ic][up] - eta[idx] * b_field.comps[ic][idx])
                        / h;
                }
                vals[ci * out_comps + m] = acc;
                l2_sq += acc * acc;
            }
            for bc in &b_field.comps {
                let v = eta[idx] * bc[idx];
                eb_l2_sq += v * v;
            }
        }
        let ball_j = Ball {
            center: z.clone(),
            radius: bump_radius,
        };
        let measure_j = local_measure(grid, z, bump_radius);
        let mu = measure_j.powf(1.0 / p - 0.5) * (l2_sq * hn).sqrt();
        if mu == 0.0 {
            for &(idx, _) in bump {
                eta[idx] = 0.0;
            }
            continue;
        }
        // piece-level audits on the local values
        let max_val = vals.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let tol = SUPPORT_REL_TOL * max_val;
        let mut excess = 0.0f64;
        let mut exact = 0.0f64;
        for (ci, &idx) in cand.iter().enumerate() {
            let mut occupied = false;
            for m in 0..out_comps {
                let v = vals[ci * out_comps + m];
                if v.abs() > tol {
                    occupied = true;
                }
                // scaling before vs after the difference quotient
                let mut after = 0.0;
                for &(j, ic, sign) in &terms[m] {
                    let up = grid.shifted_plus(idx, j);
                    acc_diff(
                        &mut after,
                        sign,
                        eta[up] * b_field.comps[ic][up] / mu,
                        eta[idx] * b_field.comps[ic][idx] / mu,
                        h,
                    );
                }
                exact = exact.max((v / mu - after).abs());
            }
            if occupied {
                let d = ball_j.dist_to_cell(grid, &grid.decode(idx));
                excess = excess.max(d - ball_j.radius);
            }
        }
        max_exactness = max_exactness.max(exact / (max_val / mu).max(f64::MIN_POSITIVE));
        max_support_excess = max_support_excess.max(excess);
        let z_idx = grid.linear(z);
        min_containment_margin = min_containment_margin.min(dist[z_idx] - 4.0 * bump_radius);
        mu_constant = mu_constant.max(mu * parent_measure.powf(1.0 / p - 0.5));
        for (ci, &idx) in cand.iter().enumerate() {
            for (m, rc) in recon.comps.iter_mut().enumerate() {
                rc[idx] += vals[ci * out_comps + m];
            }
        }
        if retain {
            // tight box around the bump plus the difference halo
            let mut lo = vec![i64::MAX; n];
            let mut hi = vec![i64::MIN; n];
            for &idx in &cand {
                let c = grid.decode(idx);
                for a in 0..n {
                    lo[a] = lo[a].min(c[a] as i64);
                    hi[a] = hi[a].max(c[a] as i64);
                }
            }
            let bsz: Vec<usize> = lo
                .iter()
                .zip(&hi)
                .map(|(&l, &u)| (u - l + 1) as usize)
                .collect();
            let mut aj = CroppedField::zero(n, atom.b.degree + 1, h, lo.clone(), bsz.clone());
            let mut bj = CroppedField::zero(n, atom.b.degree, h, lo.clone(), bsz);
            let bst = aj.strides();
            let local = |idx: usize| -> usize {
                let c = grid.decode(idx);
                (0..n).map(|a| (c[a] as i64 - lo[a]) as usize * bst[a]).sum()
            };
            for (ci, &idx) in cand.iter().enumerate() {
                let li = local(idx);
                for (m, ac) in aj.comps.iter_mut().enumerate() {
                    ac[li] = vals[ci * out_comps + m] / mu;
                }
            }
            for &(idx, _) in bump {
                let li = local(idx);
                for (bc, src) in bj.comps.iter_mut().zip(&b_field.comps) {
                    bc[li] = eta[idx] * src[idx] / mu;
                }
            }
            atoms.push(HardyAtom {
                a: aj,
                b: bj,
                ball: ball_j.clone(),
                kind: AtomKind::Interior,
                exactness: exact / (max_val / mu).max(f64::MIN_POSITIVE),
                norm_ratio: 1.0,
                support_excess: excess,
                b_constant: (eb_l2_sq * hn).sqrt() / mu
                    / (bump_radius * measure_j.powf(0.5 - 1.0 / p)),
            });
        }
        mus.push(mu);
        kept_centers.push(z.clone());
        for &(idx, _) in bump {
            eta[idx] = 0.0;
        }
    }
    let partition_residual =
        recon.sub(&a_field)?.max_abs() / a_field.max_abs().max(f64::MIN_POSITIVE);
    Ok(InteriorSplit {
        parent,
        centers: kept_centers,
        cover_radius,
        bump_radius,
        split_constant,
        mus,
        atoms,
        grad_const,
        interior_margin: margin / required,
        partition_residual,
        mu_constant,
        max_exactness,
        max_support_excess,
        min_containment_margin,
    })
}

fn acc_diff(acc: &mut f64, sign: f64, up: f64, here: f64, h: f64) {
    *acc += sign * (up - here) / h;
}

/// Full-pipeline output: the ball-normalized family (with coefficients), the
/// boundary splittings when a domain was given, and the audit numbers of
/// every stage.
#[derive(Debug)]
pub struct HardyDecomposition {
    /// The synthesized pairs, one per tent atom, with coefficients.
    pub atoms: Vec<HardyAtom>,
    pub coeffs: Vec<f64>,
    /// Interior splittings (empty on the whole-space branch); piece `j` of
    /// split `k` carries the final coefficient `coeffs[k] * mus[j]`.
    pub splits: Vec<InteriorSplit>,
    pub tent: DecompositionAudit,
    pub beta: Option<BetaMarginReport>,
    /// `||sum coeff * a - (theta_a*u - theta_b*u)||_2` relative to the
    /// two-endpoint reference, matching the Calderon check normalization.
    pub reconstruction: f64,
    /// The same defect relative to `||u||_2`. The reference carries the
    /// mollifier's L1 mass squared (two to three orders of magnitude here),
    /// so this number is dominated by that amplification factor.
    pub reconstruction_vs_input: f64,
    /// `||u - theta_a*u||_2 / ||u||_2` (scale truncation from below).
    pub truncation_low: f64,
    /// `||theta_b*u||_2 / ||u||_2` (scale truncation from above).
    pub truncation_high: f64,
    /// `sum |coeff|^p` over the final family.
    pub sum_coeff_p: f64,
    /// Tent-space proxy norm of the input.
    pub proxy_norm: f64,
    pub max_exactness: f64,
    pub max_norm_ratio: f64,
    pub max_b_constant: f64,
}

/// Tent-space proxy for the `H^p` size of a closed field.
pub fn hardy_proxy_norm(
    u: &FormField,
    p: f64,
    sigma: f64,
    ladder: &TLadder,
    seed: u64,
    mode: ConvMode,
) -> Result<f64> {
    tent_norm(&q_transform(u, sigma, ladder, seed, mode)?, p, mode)
}

pub fn hardy_decompose(
    u: &FormField,
    omega: Option<&[bool]>,
    params: &DecompositionParams,
    sigma: f64,
    ladder: &TLadder,
    seed: u64,
    mode: ConvMode,
) -> Result<HardyDecomposition> {
    let closed_defect = exterior_derivative(u).max_abs();
    if closed_defect != 0.0 {
        return Err(Error::NotClosed(closed_defect));
    }
    let grid = u.grid.clone();
    let (n, h) = (grid.n, grid.h);
    let qu = q_transform(u, sigma, ladder, seed, mode)?;
    let beta = match omega {
        Some(o) => Some(beta_support_check(&qu, o, params.beta)?),
        None => None,
    };
    let mut dec = decompose(&qu, omega, params, mode)?;
    let tent = audit(&mut dec, &qu, omega, mode)?;
    let pairs = atoms_from_tent(&dec, &grid, sigma, seed, mode)?;
    let proxy_norm = tent_norm(&qu, params.p, mode)?;

    let mut atoms = Vec::with_capacity(pairs.len());
    let mut coeffs = Vec::with_capacity(pairs.len());
    let mut splits = Vec::new();
    let mut recon = FormField::zero(grid.clone(), u.degree);
    let mut sum_coeff_p = 0.0f64;
    let mut max_exactness = 0.0f64;
    let mut max_norm_ratio = 0.0f64;
    let mut max_b_constant = 0.0f64;
    for (k, (atom, lambda)) in pairs.into_iter().enumerate() {
        max_exactness = max_exactness.max(atom.exactness);
        max_norm_ratio = max_norm_ratio.max(atom.norm_ratio);
        max_b_constant = max_b_constant.max(atom.b_constant);
        // the bump partition telescopes, so the parent pair already carries
        // the summed contribution of its interior pieces
        atom.a.add_into(&mut recon, lambda);
        if let Some(o) = omega {
            let split = interior_split(k, &atom, &grid, o, params, false)?;
            for mu in &split.mus {
                sum_coeff_p += (lambda * mu).abs().powf(params.p);
            }
            max_exactness = max_exactness.max(split.max_exactness);
            splits.push(split);
        } else {
            sum_coeff_p += lambda.abs().powf(params.p);
        }
        atoms.push(atom);
        coeffs.push(lambda);
    }

    // Reference reproduction at the window endpoints.
    let u_l2 = u.l2_norm();
    let (reconstruction, reconstruction_vs_input, truncation_low, truncation_high) =
        if u_l2 > 0.0 {
            let phi_a = sample_phi(n, sigma, ladder.t_min, h, seed)?;
            let phi_b = sample_phi(n, sigma, ladder.t_max, h, seed)?;
            let ua = convolve(u, &phi_a.convolve_kernel(&phi_a), mode)?;
            let ub = convolve(u, &phi_b.convolve_kernel(&phi_b), mode)?;
            let rhs = ua.sub(&ub)?;
            let rhs_l2 = rhs.l2_norm().max(f64::MIN_POSITIVE);
            let defect = recon.sub(&rhs)?.l2_norm();
            (
                defect / rhs_l2,
                defect / u_l2,
                u.sub(&ua)?.l2_norm() / u_l2,
                ub.l2_norm() / u_l2,
            )
        } else {
            (0.0, 0.0, 0.0, 0.0)
        };
    Ok(HardyDecomposition {
        atoms,
        coeffs,
        splits,
        tent,
        beta,
        reconstruction,
        reconstruction_vs_input,
        truncation_low,
        truncation_high,
        sum_coeff_p,
        proxy_norm,
        max_exactness,
        max_norm_ratio,
        max_b_constant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::wedge_domain;
    use crate::kernel::quantize;

    const SIGMA: f64 = 0.5;
    const SEED: u64 = 11;

    /// Closed 1-form `u = dv` with `v` a radial bump function.
    fn closed_bump(grid: &GridSpec, center: &[f64], radius: f64) -> FormField {
        let mut v = FormField::zero(grid.clone(), 0);
        for i in 0..grid.num_cells() {
            let pos = grid.position(&grid.decode(i));
            let s2: f64 = pos
                .iter()
                .zip(center)
                .map(|(&x, &c)| (x - c) * (x - c))
                .sum::<f64>()
                / (radius * radius);
            if s2 < 1.0 {
                v.comps[0][i] = (1.0 - s2).powi(4);
            }
        }
        quantize(&mut v.comps[0]);
        exterior_derivative(&v)
    }

    fn test_ladder() -> TLadder {
        TLadder::log_midpoint(0.9, 1.1, 16).unwrap()
    }

    #[test]
    fn whole_space_pipeline_p1() {
        let grid = GridSpec::cube(2, 288, 1.0 / 32.0, 0.0).unwrap();
        let u = closed_bump(&grid, &[4.5, 4.5], 0.5);
        let mut params = DecompositionParams::new(1.0, 0.5);
        params.min_piece_energy = 1e-8;
        let dec = hardy_decompose(&u, None, &params, SIGMA, &test_ladder(), SEED, ConvMode::Fft)
            .unwrap();
        assert!(!dec.atoms.is_empty());
        assert!(
            dec.max_exactness <= 1e-11,
            "a = db defect {}",
            dec.max_exactness
        );
        for atom in &dec.atoms {
            assert!(atom.kind == AtomKind::Global);
            assert!(
                atom.support_excess <= 2.0 * grid.h + 1e-12,
                "support excess {}",
                atom.support_excess
            );
        }
        assert!(dec.max_b_constant.is_finite() && dec.max_b_constant > 0.0);
        assert!(
            dec.reconstruction <= 2e-2,
            "reconstruction residual {}",
            dec.reconstruction
        );
        assert!(dec.proxy_norm > 0.0 && dec.sum_coeff_p > 0.0);
    }

    #[test]
    fn boundary_pipeline_with_interior_split() {
        let grid = GridSpec::cube(2, 288, 1.0 / 32.0, 0.0).unwrap();
        let domain = wedge_domain(grid.clone(), 2.0, 1.0, &[4.5]).unwrap();
        let u = closed_bump(&grid, &[4.5, 5.0], 0.5);
        let mut params = DecompositionParams::new(0.95, 0.5);
        params.min_piece_energy = 1e-8;
        let dec = hardy_decompose(
            &u,
            Some(&domain.inside),
            &params,
            SIGMA,
            &test_ladder(),
            SEED,
            ConvMode::Fft,
        )
        .unwrap();
        let beta = dec.beta.as_ref().unwrap();
        assert!(beta.ok, "margin excess {}", beta.min_excess);
        assert_eq!(dec.splits.len(), dec.atoms.len());
        assert!(!dec.splits.is_empty());
        for split in &dec.splits {
            assert!(split.count() > 0);
            assert!(
                split.partition_residual <= 1e-12,
                "partition residual {}",
                split.partition_residual
            );
            assert!(split.interior_margin >= 1.0 - 1e-9 || split.split_constant > 0.0);
            assert!(split.grad_const.is_finite());
            assert!(split.max_exactness <= 1e-11);
            assert!(split.max_support_excess <= 2.0 * grid.h + 1e-12);
            assert!(
                split.min_containment_margin >= -2.0 * grid.h,
                "quadrupled ball leaves the domain by {}",
                -split.min_containment_margin
            );
        }
        assert!(
            dec.reconstruction <= 2e-2,
            "reconstruction residual {}",
            dec.reconstruction
        );

        // retained split of the heaviest parent: the piece pairs themselves
        let k = (0..dec.coeffs.len())
            .max_by(|&i, &j| dec.coeffs[i].total_cmp(&dec.coeffs[j]))
            .unwrap();
        let split = interior_split(k, &dec.atoms[k], &grid, &domain.inside, &params, true).unwrap();
        assert_eq!(split.atoms.len(), split.mus.len());
        let mut recon = FormField::zero(grid.clone(), dec.atoms[k].a.degree);
        for (mu, piece) in split.mus.iter().zip(&split.atoms) {
            assert!(piece.kind == AtomKind::Interior);
            assert!(piece.exactness <= 1e-11);
            // exact unit normalization against the piece ball measure
            let measure = local_measure(&grid, &piece.ball.center, piece.ball.radius);
            let norm = piece.a.l2_norm() * measure.powf(1.0 / params.p - 0.5);
            assert!((norm - 1.0).abs() <= 1e-9, "piece norm {norm}");
            piece.a.add_into(&mut recon, *mu);
        }
        let parent = dec.atoms[k].a.to_field(&grid);
        let res = recon.sub(&parent).unwrap().max_abs() / parent.max_abs();
        assert!(res <= 1e-12, "retained reconstruction residual {res}");
    }

    #[test]
    fn beta_margin_flat_and_negative_control() {
        let grid = GridSpec::cube(2, 160, 1.0 / 32.0, 0.0).unwrap();
        let domain = crate::domain::flat_domain(grid.clone(), 1.0);
        let ladder = TLadder::log_midpoint(0.9, 1.0, 8).unwrap();
        // interior data: margins clear beta = 1/2
        let u = closed_bump(&grid, &[2.5, 3.0], 0.4);
        let qu = q_transform(&u, SIGMA, &ladder, SEED, ConvMode::Fft).unwrap();
        let rep = beta_support_check(&qu, &domain.inside, 0.5).unwrap();
        assert!(rep.ok, "excess {}", rep.min_excess);
        // data straddling the boundary violates the margin
        let bad = closed_bump(&grid, &[2.5, 1.0], 0.4);
        let qbad = q_transform(&bad, SIGMA, &ladder, SEED, ConvMode::Fft).unwrap();
        let bad_rep = beta_support_check(&qbad, &domain.inside, 0.5).unwrap();
        assert!(!bad_rep.ok);
    }

    #[test]
    fn zero_input_gives_empty_decomposition() {
        let grid = GridSpec::cube(2, 160, 1.0 / 32.0, 0.0).unwrap();
        let u = FormField::zero(grid, 1);
        let params = DecompositionParams::new(1.0, 0.5);
        let ladder = TLadder::log_midpoint(0.9, 1.0, 8).unwrap();
        let dec = hardy_decompose(&u, None, &params, SIGMA, &ladder, SEED, ConvMode::Fft).unwrap();
        assert!(dec.atoms.is_empty());
        assert_eq!(dec.reconstruction, 0.0);
    }

    #[test]
    fn non_closed_input_rejected() {
        let grid = GridSpec::cube(2, 64, 1.0 / 32.0, 0.0).unwrap();
        let mut u = FormField::zero(grid, 1);
        u.comps[0][100] = 1.0;
        let params = DecompositionParams::new(1.0, 0.5);
        let ladder = TLadder::log_midpoint(0.9, 1.0, 8).unwrap();
        let err = hardy_decompose(&u, None, &params, SIGMA, &ladder, SEED, ConvMode::Fft)
            .unwrap_err();
        assert!(matches!(err, Error::NotClosed(_)));
    }
}

#[cfg(test)]
mod synthesis_equivalence {
    use super::*;
    use crate::grid::exterior_derivative;
    use crate::kernel::quantize;
    use crate::tent::pi_transform;

    /// The direct sparse-support synthesis must agree with the FFT synthesis
    /// of the densified piece to machine precision.
    #[test]
    fn direct_synthesis_matches_fft_route() {
        let grid = GridSpec::cube(2, 160, 1.0 / 32.0, 0.0).unwrap();
        let mut v = FormField::zero(grid.clone(), 0);
        for i in 0..grid.num_cells() {
            let pos = grid.position(&grid.decode(i));
            let s2: f64 = pos.iter().map(|&x| (x - 2.5) * (x - 2.5)).sum::<f64>() / 0.16;
            if s2 < 1.0 {
                v.comps[0][i] = (1.0 - s2).powi(4);
            }
        }
        quantize(&mut v.comps[0]);
        let u = exterior_derivative(&v);
        let ladder = TLadder::log_midpoint(0.9, 1.0, 8).unwrap();
        let qu = q_transform(&u, 0.5, &ladder, 11, ConvMode::Fft).unwrap();
        let mut params = DecompositionParams::new(1.0, 0.5);
        params.min_piece_energy = 1e-6;
        let dec = decompose(&qu, None, &params, ConvMode::Fft).unwrap();
        let kernels = node_kernels(&ladder, 2, 0.5, grid.h, 11).unwrap();
        let atom = &dec.atoms[dec.atoms.len() / 2];
        let dense = atom.a.to_dense(&grid);
        let reference = pi_transform(&dense, 0.5, 11, ConvMode::Fft).unwrap();
        let (a, _b) = synthesize_piece(&atom.a, &grid, &kernels).unwrap();
        let mine = a.to_field(&grid);
        let diff = mine.sub(&reference).unwrap().max_abs();
        assert!(diff <= 1e-10 * reference.max_abs(), "synthesis mismatch {diff:.3e}");
    }
}
