//! Constructive atomic decomposition of tent-space functions.
//!
//! The pipeline: threshold the area integral into nested super-level sets,
//! enlarge each by a density condition, cover the enlarged sets with Whitney
//! balls carrying a subordinate partition of unity, and cut the input into
//! one atom per (level, ball) from the telescoping indicator differences of
//! the inner tents. The construction is a pointwise partition of the input,
//! so reconstruction is machine-exact; all the analytic content lives in the
//! per-atom audits (tent support, box support, interior margin of the
//! enlarged ball, and the `L^2`-vs-ball-volume normalization).

use crate::domain::distance_to_set;
use crate::error::{Error, Result};
use crate::grid::{ConvMode, GridSpec, KernelLattice};
use crate::tent::{area_integral, tent_norm, TLadder, TentFunction};

/// Lattice ball: integer center cell, physical radius.
#[derive(Debug, Clone)]
pub struct Ball {
    pub center: Vec<usize>,
    pub radius: f64,
}

impl Ball {
    pub fn scaled(&self, c: f64) -> Ball {
        Ball { center: self.center.clone(), radius: c * self.radius }
    }

    /// Euclidean volume of the continuum ball.
    pub fn volume(&self, n: usize) -> f64 {
        let unit = match n {
            1 => 2.0,
            2 => std::f64::consts::PI,
            3 => 4.0 * std::f64::consts::PI / 3.0,
            _ => {
                let k = n as f64;
                std::f64::consts::PI.powf(k / 2.0) / gamma_half_int(n + 2)
            }
        };
        unit * self.radius.powi(n as i32)
    }

    /// Lattice measure `h^n * #{cells in the box with center distance < r}`
    /// (open ball, clipped to the box). This is the measure the atom
    /// coefficients are normalized against; it matches the Euclidean volume
    /// up to the discretization of the ball boundary.
    pub fn lattice_measure(&self, grid: &GridSpec) -> f64 {
        let mut count = 0usize;
        for i in 0..grid.num_cells() {
            if self.dist_to_cell(grid, &grid.decode(i)) < self.radius {
                count += 1;
            }
        }
        count as f64 * grid.volume_element()
    }

    /// Center-to-cell distance in physical units (non-periodic, matching the
    /// distance transform convention).
    pub fn dist_to_cell(&self, grid: &GridSpec, cell: &[usize]) -> f64 {
        let d2: f64 = self
            .center
            .iter()
            .zip(cell)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        d2.sqrt() * grid.h
    }
}

/// Gamma(k/2) for integer k >= 1, used only for n > 3 ball volumes.
fn gamma_half_int(k: usize) -> f64 {
    match k {
        1 => std::f64::consts::PI.sqrt(),
        2 => 1.0,
        _ => (k as f64 / 2.0 - 1.0) * gamma_half_int(k - 2),
    }
}

#[derive(Debug, Clone)]
pub struct DecompositionParams {
    /// Relative energy floor below which a piece is discarded instead of
    /// becoming an atom (0 keeps everything; the dropped energy shows up in
    /// the reported unassigned fraction).
    pub min_piece_energy: f64,
    pub p: f64,
    /// density threshold for the level-set enlargement
    pub gamma: f64,
    /// aperture of the inner tents cut out of each enlarged level set
    pub nu: f64,
    /// aperture of the tent containing the input's support
    pub beta: f64,
}

impl DecompositionParams {
    pub fn new(p: f64, beta: f64) -> Self {
        DecompositionParams { min_piece_energy: 0.0, p, gamma: 0.5, nu: 0.5, beta }
    }

    /// Ball enlargement factor: the atom over a Whitney ball `B_j` lives in
    /// `2B_j x (0, 12 r_j / max(beta, nu))`, which is exactly the tent over
    /// `C B_j` with this `C`.
    pub fn enlargement(&self) -> f64 {
        2.0 + 12.0 / self.beta.max(self.nu)
    }

    /// Spatial shrinkage of the atom's support inside its recorded ball.
    pub fn c_beta(&self) -> f64 {
        2.0 / self.enlargement()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let p_lo = n as f64 / (n as f64 + 1.0);
        if !(self.p > p_lo && self.p <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "p = {} outside ({p_lo}, 1]",
                self.p
            )));
        }
        if !(0.0..1.0).contains(&self.min_piece_energy) {
            return Err(Error::InvalidParam(format!(
                "piece energy floor {} outside [0, 1)",
                self.min_piece_energy
            )));
        }
        for (name, v) in [("gamma", self.gamma), ("nu", self.nu), ("beta", self.beta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParam(format!("{name} = {v} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// A decomposition piece stored on its support only: for each ladder node a
/// list of occupied cells and the component values at those cells.
#[derive(Debug, Clone)]
pub struct SparsePiece {
    pub ladder: TLadder,
    pub degree: usize,
    /// number of form components per cell
    pub comps: usize,
    /// occupied cell indices per ladder node
    pub cells: Vec<Vec<u32>>,
    /// `comps` values per occupied cell, in cell order
    pub vals: Vec<Vec<f64>>,
}

impl SparsePiece {
    pub fn to_dense(&self, grid: &GridSpec) -> TentFunction {
        let mut out = TentFunction::zero(grid.clone(), self.degree, self.ladder.clone());
        self.add_into(&mut out, 1.0);
        out
    }

    /// `dense += c * self`; shapes must match.
    pub fn add_into(&self, dense: &mut TentFunction, c: f64) {
        for ((cells, vals), slice) in
            self.cells.iter().zip(&self.vals).zip(dense.slices.iter_mut())
        {
            for (k, &cell) in cells.iter().enumerate() {
                for (m, comp) in slice.comps.iter_mut().enumerate() {
                    comp[cell as usize] += c * vals[k * self.comps + m];
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for vals in &mut self.vals {
            for v in vals.iter_mut() {
                *v *= c;
            }
        }
    }

    /// `sum_i dtau_i ||piece_i||_2^2`, the same weighting as the dense case.
    pub fn energy(&self, grid: &GridSpec) -> f64 {
        let hn = grid.volume_element();
        self.ladder
            .nodes
            .iter()
            .zip(&self.vals)
            .map(|(&(_, dtau), vals)| {
                dtau * hn * vals.iter().map(|&v| v * v).sum::<f64>()
            })
            .sum()
    }
}

#[derive(Debug, Clone, Default)]
pub struct AtomFlags {
    pub in_tent: bool,
    pub boxed_support: bool,
    pub interior5x: bool,
    pub normalized: bool,
}

#[derive(Debug, Clone)]
pub struct TentAtom {
    pub a: SparsePiece,
    /// the enlarged ball `C B_j` the atom is normalized against
    pub ball: Ball,
    pub lambda: f64,
    /// level and cover indices the atom came from
    pub level: i32,
    pub cover_index: usize,
    pub flags: AtomFlags,
}

/// Super-level sets `O_k = {SU > 2^k}`, `k` from `floor(log2 min+ SU)` to
/// `ceil(log2 max SU)`; nested decreasing. Empty for `SU = 0`. Values below
/// `1e-7 * max` are treated as zero: they sit at the FFT round-off floor and
/// would otherwise spawn dozens of levels whose total energy is below the
/// reconstruction budget anyway.
pub fn level_sets(su: &[f64]) -> Vec<(i32, Vec<bool>)> {
    let max = su.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let floor = 1e-7 * max;
    let min_pos =
        su.iter().cloned().filter(|&v| v > floor).fold(f64::MAX, f64::min);
    let k_lo = min_pos.log2().floor() as i32;
    let k_hi = max.log2().ceil() as i32;
    (k_lo..=k_hi)
        .map(|k| {
            let thr = (k as f64).exp2();
            (k, su.iter().map(|&v| v > thr).collect())
        })
        .collect()
}

fn ball_offsets(n: usize, r_cells: f64) -> Vec<Vec<i64>> {
    let r = r_cells.floor() as i64;
    let mut out = Vec::new();
    let mut c = vec![-r; n];
    loop {
        let d2: f64 = c.iter().map(|&v| (v * v) as f64).sum();
        if d2 <= r_cells * r_cells {
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

/// Density enlargement `O* = { M(1_O) > 1 - gamma }` with `M` the lattice
/// maximal operator over balls of radius up to a third of the box. Radii are
/// sampled geometrically; the zero radius guarantees `O` is contained in
/// `O*`, and monotonicity in `O` gives the level nesting.
pub fn density_enlarge(grid: &GridSpec, o: &[bool], gamma: f64) -> Result<Vec<bool>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidParam(format!("gamma = {gamma} outside (0, 1)")));
    }
    let cells = grid.num_cells();
    if o.iter().all(|&b| !b) {
        return Ok(vec![false; cells]);
    }
    let mut out: Vec<bool> = o.to_vec(); // radius-0 ball: M = 1 on O
    // kernel widths are limited to half the box, so radii stop at a quarter
    let max_r = (grid.sizes.iter().min().unwrap() / 4).saturating_sub(1) as f64;
    let mut radii = Vec::new();
    let mut r = 1.0f64;
    while r <= max_r {
        radii.push(r);
        r = (r * 1.5).ceil();
    }
    let ind: Vec<f64> = o.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    for r in radii {
        let offs = ball_offsets(grid.n, r);
        let count = offs.len() as f64;
        let rc = r as i64;
        let side = (2 * rc + 1) as usize;
        let mut kernel = KernelLattice {
            n: grid.n,
            h: grid.h,
            lo: vec![-rc; grid.n],
            sizes: vec![side; grid.n],
            values: vec![0.0; side.pow(grid.n as u32)],
        };
        for off in &offs {
            let idx: usize = off
                .iter()
                .zip(&kernel.strides())
                .map(|(&o, &s)| (o + rc) as usize * s)
                .sum();
            kernel.values[idx] = 1.0;
        }
        let conv = crate::grid::convolve_scalar(grid, &ind, &kernel, ConvMode::Fft)?;
        let hn = grid.volume_element();
        let thr = (1.0 - gamma) * count;
        for i in 0..cells {
            if !out[i] && conv[i] / hn > thr * (1.0 + 1e-9) {
                out[i] = true;
            }
        }
    }
    Ok(out)
}

/// Whitney cover of an open lattice set: dyadic cubes refined until the
/// center clears its own diameter at the 1/10 scale, each cube replaced by
/// the ball of radius `d(center, O^c) / 10`, plus a partition of unity
/// subordinate to the doubled balls and normalized on `O`.
#[derive(Debug, Clone)]
pub struct WhitneyCover {
    pub balls: Vec<Ball>,
    /// sparse partition functions: `(cell, value)` pairs per ball
    pub partition: Vec<Vec<(usize, f64)>>,
    pub set: Vec<bool>,
}

impl WhitneyCover {
    /// Largest number of doubled balls covering one cell.
    pub fn max_overlap(&self, grid: &GridSpec) -> usize {
        let mut counts = vec![0usize; grid.num_cells()];
        for part in &self.partition {
            for &(cell, _) in part {
                counts[cell] += 1;
            }
        }
        counts.into_iter().max().unwrap_or(0)
    }
}

pub fn whitney_cover(grid: &GridSpec, o: &[bool]) -> Result<WhitneyCover> {
    let cells = grid.num_cells();
    if o.iter().all(|&b| !b) {
        return Err(Error::InvalidParam("whitney cover of the empty set".into()));
    }
    if o.iter().all(|&b| b) {
        return Err(Error::NotProper);
    }
    let complement: Vec<bool> = o.iter().map(|&b| !b).collect();
    let dist = distance_to_set(grid, &complement);
    // recursive dyadic subdivision
    let mut centers: Vec<Vec<usize>> = Vec::new();
    let full: (Vec<usize>, Vec<usize>) = (vec![0; grid.n], grid.sizes.clone());
    let mut stack = vec![full];
    while let Some((lo, sz)) = stack.pop() {
        // all cells inside O?
        let mut all_in = true;
        let mut c = lo.clone();
        'scan: loop {
            if !o[grid.linear(&c)] {
                all_in = false;
                break 'scan;
            }
            let mut a = 0;
            loop {
                c[a] += 1;
                if c[a] < lo[a] + sz[a] {
                    break;
                }
                c[a] = lo[a];
                a += 1;
                if a == grid.n {
                    break 'scan;
                }
            }
        }
        let center: Vec<usize> = lo.iter().zip(&sz).map(|(&l, &s)| l + (s - 1) / 2).collect();
        let diam = grid.h * (sz.iter().map(|&s| (s * s) as f64).sum::<f64>()).sqrt();
        let single = sz.iter().all(|&s| s == 1);
        if all_in && (single || dist[grid.linear(&center)] / 10.0 >= diam) {
            centers.push(center);
            continue;
        }
        if single {
            continue; // boundary cell outside O
        }
        // split every axis longer than one cell
        let mut parts: Vec<(Vec<usize>, Vec<usize>)> = vec![(lo.clone(), sz.clone())];
        for a in 0..grid.n {
            if sz[a] == 1 {
                continue;
            }
            let mut next = Vec::new();
            for (plo, psz) in parts {
                let half = psz[a] / 2;
                let lo1 = plo.clone();
                let mut sz1 = psz.clone();
                sz1[a] = half;
                let mut lo2 = plo;
                let mut sz2 = psz;
                lo2[a] += half;
                sz2[a] -= half;
                next.push((lo1, sz1));
                next.push((lo2, sz2));
            }
            parts = next;
        }
        stack.extend(parts);
    }
    // deterministic order
    centers.sort();
    let balls: Vec<Ball> = centers
        .iter()
        .map(|c| Ball { center: c.clone(), radius: dist[grid.linear(c)] / 10.0 })
        .collect();
    // raw bumps on the doubled balls
    let mut raw: Vec<Vec<(usize, f64)>> = Vec::with_capacity(balls.len());
    for b in &balls {
        let r2 = 2.0 * b.radius;
        let rc = (r2 / grid.h).floor() as i64;
        let mut support = Vec::new();
        let mut off = vec![-rc; grid.n];
        loop {
            let mut cell = Vec::with_capacity(grid.n);
            let mut inside = true;
            for a in 0..grid.n {
                let v = b.center[a] as i64 + off[a];
                if v < 0 || v >= grid.sizes[a] as i64 {
                    inside = false;
                    break;
                }
                cell.push(v as usize);
            }
            if inside {
                let d = b.dist_to_cell(grid, &cell);
                if d < r2 {
                    let s = d / r2;
                    let v = (1.0 - s * s) * (1.0 - s * s);
                    support.push((grid.linear(&cell), v));
                }
            }
            let mut a = 0;
            loop {
                off[a] += 1;
                if off[a] <= rc {
                    break;
                }
                off[a] = -rc;
                a += 1;
                if a == grid.n {
                    break;
                }
            }
            if a == grid.n {
                break;
            }
        }
        raw.push(support);
    }
    // normalize where the bump sum is positive (covers all of O)
    let mut total = vec![0.0f64; cells];
    for sup in &raw {
        for &(cell, v) in sup {
            total[cell] += v;
        }
    }
    for i in 0..cells {
        if o[i] && total[i] <= 0.0 {
            return Err(Error::InvalidParam(
                "whitney cover failed to cover the set".into(),
            ));
        }
    }
    let partition: Vec<Vec<(usize, f64)>> = raw
        .into_iter()
        .map(|sup| {
            sup.into_iter()
                .map(|(cell, v)| (cell, if total[cell] > 0.0 { v / total[cell] } else { 0.0 }))
                .collect()
        })
        .collect();
    Ok(WhitneyCover { balls, partition, set: o.to_vec() })
}

#[derive(Debug, Clone)]
pub struct TentDecomposition {
    pub atoms: Vec<TentAtom>,
    pub params: DecompositionParams,
    /// energy of `U` left unassigned, relative to the energy of `U`
    pub unassigned: f64,
    /// largest doubled-ball overlap across all level covers
    pub max_overlap: usize,
    /// largest observed `|O*| / |O|` enlargement ratio
    pub density_ratio: f64,
}

/// Marker for decomposing over the whole lattice (no boundary).
pub const FULL: Option<&[bool]> = None;

pub fn decompose(
    u: &TentFunction,
    omega: Option<&[bool]>,
    params: &DecompositionParams,
    mode: ConvMode,
) -> Result<TentDecomposition> {
    let grid = u.grid().clone();
    let n = grid.n;
    params.validate(n)?;
    let cells = grid.num_cells();
    let omega_vec: Vec<bool> = match omega {
        Some(o) => o.to_vec(),
        None => vec![true; cells],
    };
    if let Some(o) = omega {
        check_tent_support(u, o, params.beta)?;
    }
    let su = area_integral(u, mode)?;
    let levels = level_sets(&su);
    let total_energy = u.energy();
    if levels.is_empty() {
        return Ok(TentDecomposition {
            atoms: Vec::new(),
            params: params.clone(),
            unassigned: if total_energy > 0.0 { 1.0 } else { 0.0 },
            max_overlap: 0,
            density_ratio: 0.0,
        });
    }
    // enlarged level sets and their inner-tent masks per ladder node
    let mut density_ratio = 0.0f64;
    let mut enlarged: Vec<(i32, Vec<bool>)> = Vec::new();
    let mut prev: Option<&Vec<bool>> = None;
    let mut prev_star: Option<Vec<bool>> = None;
    for (k, o) in &levels {
        // identical consecutive sets produce identical enlargements
        let star = if prev.is_some_and(|p| p == o) {
            prev_star.clone().unwrap()
        } else {
            let s = density_enlarge(&grid, o, params.gamma)?;
            let co = o.iter().filter(|&&b| b).count();
            if co > 0 {
                let cs = s.iter().filter(|&&b| b).count();
                density_ratio = density_ratio.max(cs as f64 / co as f64);
            }
            s
        };
        prev = Some(o);
        prev_star = Some(star.clone());
        enlarged.push((*k, star));
    }
    let node_ts: Vec<f64> = u.ladder.nodes.iter().map(|&(t, _)| t).collect();
    let tent_masks: Vec<Vec<Vec<bool>>> = enlarged
        .iter()
        .map(|(_, star)| {
            let comp: Vec<bool> = star.iter().map(|&b| !b).collect();
            let dist = distance_to_set(&grid, &comp);
            node_ts
                .iter()
                .map(|&t| dist.iter().map(|&d| d >= params.nu * t).collect())
                .collect()
        })
        .collect();
    let big_c = params.enlargement();
    let mut atoms = Vec::new();
    let mut max_overlap = 0usize;
    let mut recon = TentFunction::zero(grid.clone(), u.degree(), u.ladder.clone());
    for (lvl, (k, star)) in enlarged.iter().enumerate() {
        let cover_set: Vec<bool> = star.iter().zip(&omega_vec).map(|(&a, &b)| a && b).collect();
        if cover_set.iter().all(|&b| !b) {
            continue;
        }
        // does this level contribute at all?
        let next = tent_masks.get(lvl + 1);
        let mut any = false;
        'probe: for (i, slice) in u.slices.iter().enumerate() {
            let cur = &tent_masks[lvl][i];
            for cell in 0..cells {
                let delta = cur[cell] && !next.map_or(false, |m| m[i][cell]);
                if delta && slice.comps.iter().any(|c| c[cell] != 0.0) {
                    any = true;
                    break 'probe;
                }
            }
        }
        if !any {
            continue;
        }
        let cover = whitney_cover(&grid, &cover_set)?;
        max_overlap = max_overlap.max(cover.max_overlap(&grid));
        for (j, (ball, part)) in cover.balls.iter().zip(&cover.partition).enumerate() {
            let n_comps = u.slices[0].comps.len();
            let nodes = u.ladder.nodes.len();
            let mut sp_cells: Vec<Vec<u32>> = vec![Vec::new(); nodes];
            let mut sp_vals: Vec<Vec<f64>> = vec![Vec::new(); nodes];
            let mut energy = 0.0f64;
            let hn = grid.volume_element();
            for (i, slice) in u.slices.iter().enumerate() {
                let cur = &tent_masks[lvl][i];
                let dtau = u.ladder.nodes[i].1;
                for &(cell, w) in part {
                    let delta = cur[cell] && !next.map_or(false, |m| m[i][cell]);
                    if !delta {
                        continue;
                    }
                    let start = sp_vals[i].len();
                    let mut nonzero = false;
                    for sc in &slice.comps {
                        let v = w * sc[cell];
                        sp_vals[i].push(v);
                        if v != 0.0 {
                            nonzero = true;
                            energy += dtau * hn * v * v;
                        }
                    }
                    if nonzero {
                        sp_cells[i].push(cell as u32);
                    } else {
                        sp_vals[i].truncate(start);
                    }
                }
            }
            // Pieces far below the round-off floor of the input (relative
            // amplitude ~1e-15, e.g. FFT leakage outside the true support)
            // are numerical noise; normalizing them into unit atoms would
            // produce meaningless coefficients.
            let floor = params.min_piece_energy.max(1e-30);
            if energy == 0.0 || energy < floor * total_energy {
                continue;
            }
            let mut piece = SparsePiece {
                ladder: u.ladder.clone(),
                degree: u.degree(),
                comps: n_comps,
                cells: sp_cells,
                vals: sp_vals,
            };
            let enlarged_ball = ball.scaled(big_c);
            let lambda = energy.sqrt()
                * enlarged_ball.lattice_measure(&grid).powf(1.0 / params.p - 0.5);
            piece.add_into(&mut recon, 1.0);
            piece.scale(1.0 / lambda);
            atoms.push(TentAtom {
                a: piece,
                ball: enlarged_ball,
                lambda,
                level: *k,
                cover_index: j,
                flags: AtomFlags::default(),
            });
        }
    }
    let unassigned = if total_energy > 0.0 {
        u.sub(&recon)?.energy() / total_energy
    } else {
        0.0
    };
    Ok(TentDecomposition {
        atoms,
        params: params.clone(),
        unassigned,
        max_overlap,
        density_ratio,
    })
}

/// Verify `supp U` lies in the aperture-`beta` tent over `omega`, with the
/// grid slack of one forward-difference stencil.
pub fn check_tent_support(u: &TentFunction, omega: &[bool], beta: f64) -> Result<()> {
    let grid = u.grid();
    let comp: Vec<bool> = omega.iter().map(|&b| !b).collect();
    let dist = distance_to_set(grid, &comp);
    // numeric support: relative floor absorbs FFT round-off spread
    let tol = 1e-12 * u.max_abs();
    for (&(t, _), slice) in u.ladder.nodes.iter().zip(&u.slices) {
        let need = beta * t - 2.0 * grid.h - 1e-12;
        for cell in 0..grid.num_cells() {
            if dist[cell] < need && slice.comps.iter().any(|c| c[cell].abs() > tol) {
                return Err(Error::SupportViolation(format!(
                    "slice t = {t} has mass at distance {} < beta t = {}",
                    dist[cell],
                    beta * t
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DecompositionAudit {
    /// `max |U - sum lambda_k A_k|` relative to `max |U|`
    pub reconstruction: f64,
    pub sum_lambda_p: f64,
    pub tent_p_norm: f64,
    /// `sum |lambda|^p / ||U||_{T^p}^p`
    pub ratio: f64,
    pub atoms_failed: usize,
    pub max_overlap: usize,
    pub density_ratio: f64,
    pub unassigned: f64,
}

/// Per-atom audit; fills the atom flags and returns the aggregate report.
pub fn audit(
    dec: &mut TentDecomposition,
    u: &TentFunction,
    omega: Option<&[bool]>,
    mode: ConvMode,
) -> Result<DecompositionAudit> {
    let grid = u.grid().clone();
    let p = dec.params.p;
    let c_beta = dec.params.c_beta();
    let slack = 2.0 * grid.h;
    let mut recon = TentFunction::zero(grid.clone(), u.degree(), u.ladder.clone());
    let mut sum_lambda_p = 0.0;
    let mut atoms_failed = 0usize;
    for atom in &mut dec.atoms {
        atom.a.add_into(&mut recon, atom.lambda);
        sum_lambda_p += atom.lambda.abs().powf(p);
        let ball = &atom.ball;
        let mut in_tent = true;
        let mut boxed_support = true;
        let mut interior5x = true;
        let t_cap = 6.0 * c_beta * ball.radius / dec.params.beta;
        for (&(t, _), cells) in atom.a.ladder.nodes.iter().zip(&atom.a.cells) {
            for &cell in cells {
                let d = ball.dist_to_cell(&grid, &grid.decode(cell as usize));
                if d + t > ball.radius + slack {
                    in_tent = false;
                }
                if d > c_beta * ball.radius + slack || t > t_cap + slack {
                    boxed_support = false;
                }
            }
        }
        if let Some(om) = omega {
            let r5 = 5.0 * c_beta * ball.radius;
            for cell in 0..grid.num_cells() {
                let c = grid.decode(cell);
                if ball.dist_to_cell(&grid, &c) < r5 - slack && !om[cell] {
                    interior5x = false;
                    break;
                }
            }
        }
        let budget = ball.lattice_measure(&grid).powf(1.0 - 2.0 / p);
        let energy_ok = atom.a.energy(&grid) <= budget * (1.0 + 1e-9);
        // The discrete area integral of an atom concentrated near the rim of
        // its ball picks up a lattice boundary layer of width O(h), so its
        // tent norm can exceed the continuum bound 1 by O(h / r).
        let norm_cap = 1.0 + 8.0 * grid.h / ball.radius;
        let norm_ok = tent_norm(&atom.a.to_dense(&grid), p, mode)? <= norm_cap;
        atom.flags = AtomFlags {
            in_tent,
            boxed_support,
            interior5x,
            normalized: energy_ok && norm_ok,
        };
        let pass = in_tent
            && atom.flags.normalized
            && (omega.is_none() || (boxed_support && interior5x));
        if !pass {
            atoms_failed += 1;
        }
    }
    let umax = u.max_abs();
    let reconstruction = if umax > 0.0 {
        u.sub(&recon)?.max_abs() / umax
    } else {
        recon.max_abs()
    };
    let tent_p_norm = tent_norm(u, p, mode)?;
    let ratio = if tent_p_norm > 0.0 {
        sum_lambda_p / tent_p_norm.powf(p)
    } else {
        0.0
    };
    Ok(DecompositionAudit {
        reconstruction,
        sum_lambda_p,
        tent_p_norm,
        ratio,
        atoms_failed,
        max_overlap: dec.max_overlap,
        density_ratio: dec.density_ratio,
        unassigned: dec.unassigned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tent::TLadder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid64() -> GridSpec {
        GridSpec::cube(2, 64, 1.0 / 32.0, 0.0).unwrap()
    }

    fn ball_set(grid: &GridSpec, center: &[usize], r_cells: f64) -> Vec<bool> {
        (0..grid.num_cells())
            .map(|i| {
                let c = grid.decode(i);
                let d2: f64 = c
                    .iter()
                    .zip(center)
                    .map(|(&a, &b)| {
                        let d = a as f64 - b as f64;
                        d * d
                    })
                    .sum();
                d2.sqrt() <= r_cells
            })
            .collect()
    }

    #[test]
    fn level_sets_threshold_and_nesting() {
        let grid = grid64();
        let mask = ball_set(&grid, &[32, 32], 10.0);
        let su: Vec<f64> = mask.iter().map(|&b| if b { 3.0 } else { 0.0 }).collect();
        let levels = level_sets(&su);
        let ball_count = mask.iter().filter(|&&b| b).count();
        for (k, o) in &levels {
            let c = o.iter().filter(|&&b| b).count();
            if *k <= 1 {
                assert_eq!(c, ball_count, "k = {k}");
            } else {
                assert_eq!(c, 0, "k = {k}");
            }
        }
        for w in levels.windows(2) {
            for i in 0..su.len() {
                assert!(!w[1].1[i] || w[0].1[i], "nesting violated");
            }
        }
        assert!(level_sets(&vec![0.0; su.len()]).is_empty());
    }

    #[test]
    fn density_enlarge_contains_and_bounded() {
        let grid = grid64();
        let empty = density_enlarge(&grid, &vec![false; grid.num_cells()], 0.5).unwrap();
        assert!(empty.iter().all(|&b| !b));
        let o = ball_set(&grid, &[32, 32], 8.0);
        let star = density_enlarge(&grid, &o, 0.5).unwrap();
        for i in 0..o.len() {
            assert!(!o[i] || star[i], "O not contained in O*");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for run in 0..16 {
            let mut o = vec![false; grid.num_cells()];
            let cx = rng.gen_range(10..54);
            let cy = rng.gen_range(10..54);
            let r = rng.gen_range(3.0..9.0);
            for (i, v) in ball_set(&grid, &[cx, cy], r).iter().enumerate() {
                o[i] = *v;
            }
            let star = density_enlarge(&grid, &o, 0.5).unwrap();
            let co = o.iter().filter(|&&b| b).count() as f64;
            let cs = star.iter().filter(|&&b| b).count() as f64;
            assert!(cs / co <= 36.0, "run {run}: ratio {}", cs / co);
        }
    }

    #[test]
    fn whitney_slab_properties() {
        let grid = grid64();
        let o: Vec<bool> = (0..grid.num_cells())
            .map(|i| {
                let c = grid.decode(i);
                c[0] >= 16 && c[0] < 48
            })
            .collect();
        let cover = whitney_cover(&grid, &o).unwrap();
        let comp: Vec<bool> = o.iter().map(|&b| !b).collect();
        let dist = distance_to_set(&grid, &comp);
        // radii follow the distance at slope 1/10
        for b in &cover.balls {
            let d = dist[grid.linear(&b.center)];
            assert!((b.radius - d / 10.0).abs() <= 2.0 * grid.h);
        }
        // cover: every cell of O lies in some ball (center-to-cell distance)
        for i in 0..grid.num_cells() {
            if !o[i] {
                continue;
            }
            let c = grid.decode(i);
            assert!(
                cover
                    .balls
                    .iter()
                    .any(|b| b.dist_to_cell(&grid, &c) <= b.radius + 1e-12),
                "cell {c:?} uncovered"
            );
        }
        // partition sums to one on O, zero outside the doubled balls
        let mut sum = vec![0.0f64; grid.num_cells()];
        for part in &cover.partition {
            for &(cell, v) in part {
                sum[cell] += v;
            }
        }
        for i in 0..grid.num_cells() {
            if o[i] {
                assert!((sum[i] - 1.0).abs() < 1e-10);
            }
        }
        for (b, part) in cover.balls.iter().zip(&cover.partition) {
            for &(cell, v) in part {
                if v != 0.0 {
                    let c = grid.decode(cell);
                    assert!(b.dist_to_cell(&grid, &c) < 2.0 * b.radius + 1e-12);
                }
            }
        }
        assert!(cover.max_overlap(&grid) >= 1);
    }

    #[test]
    fn whitney_rejects_improper_sets() {
        let grid = grid64();
        assert!(matches!(
            whitney_cover(&grid, &vec![true; grid.num_cells()]),
            Err(Error::NotProper)
        ));
        assert!(whitney_cover(&grid, &vec![false; grid.num_cells()]).is_err());
    }

    fn random_tent(grid: &GridSpec, support: &[bool], seed: u64) -> TentFunction {
        let ladder = TLadder::log_midpoint(0.1, 0.4, 4).unwrap();
        let mut u = TentFunction::zero(grid.clone(), 1, ladder);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &mut u.slices {
            for c in &mut s.comps {
                for (i, v) in c.iter_mut().enumerate() {
                    if support[i] {
                        *v = rng.gen_range(-1.0..1.0);
                    }
                }
            }
        }
        u
    }

    #[test]
    fn full_branch_reconstructs_and_audits() {
        let grid = grid64();
        let support = ball_set(&grid, &[32, 32], 10.0);
        let u = random_tent(&grid, &support, 3);
        let params = DecompositionParams::new(1.0, 0.5);
        let mut dec = decompose(&u, FULL, &params, ConvMode::Fft).unwrap();
        assert!(!dec.atoms.is_empty());
        assert!(dec.unassigned < 1e-8, "unassigned = {}", dec.unassigned);
        let rep = audit(&mut dec, &u, None, ConvMode::Fft).unwrap();
        assert!(rep.reconstruction <= 1e-12, "recon = {}", rep.reconstruction);
        assert_eq!(rep.atoms_failed, 0);
        assert!(rep.ratio.is_finite() && rep.ratio > 0.0);
        // p = 1 volume-normalized form: |B| * energy(A) = 1 per atom
        for atom in &dec.atoms {
            let v = atom.ball.lattice_measure(&grid) * atom.a.energy(&grid);
            assert!((v - 1.0).abs() < 1e-9, "vol-normalization {v}");
        }
    }

    #[test]
    fn boundary_branch_all_flags_pass() {
        let grid = grid64();
        let omega: Vec<bool> = (0..grid.num_cells())
            .map(|i| grid.decode(i)[1] >= 20)
            .collect();
        // support comfortably inside T_beta(Omega)
        let support: Vec<bool> = (0..grid.num_cells())
            .map(|i| {
                let c = grid.decode(i);
                c[1] >= 40 && c[1] < 56 && c[0] >= 20 && c[0] < 44
            })
            .collect();
        let u = random_tent(&grid, &support, 9);
        let params = DecompositionParams::new(1.0, 0.5);
        assert!((params.enlargement() - 26.0).abs() < 1e-12);
        assert!((params.c_beta() - 1.0 / 13.0).abs() < 1e-12);
        let mut dec = decompose(&u, Some(&omega), &params, ConvMode::Fft).unwrap();
        assert!(!dec.atoms.is_empty());
        let rep = audit(&mut dec, &u, Some(&omega), ConvMode::Fft).unwrap();
        assert!(rep.reconstruction <= 1e-12, "recon = {}", rep.reconstruction);
        assert_eq!(rep.atoms_failed, 0, "failed atoms: {:?}", dec
            .atoms
            .iter()
            .filter(|a| !(a.flags.in_tent
                && a.flags.boxed_support
                && a.flags.interior5x
                && a.flags.normalized))
            .map(|a| (a.level, a.cover_index, a.flags.clone()))
            .collect::<Vec<_>>());
        assert!(dec.unassigned < 1e-8);
    }

    #[test]
    fn boundary_branch_rejects_bad_support() {
        let grid = grid64();
        let omega: Vec<bool> = (0..grid.num_cells())
            .map(|i| grid.decode(i)[1] >= 20)
            .collect();
        // mass right at the boundary violates the tent condition
        let support: Vec<bool> = (0..grid.num_cells())
            .map(|i| grid.decode(i)[1] == 20)
            .collect();
        let u = random_tent(&grid, &support, 2);
        let params = DecompositionParams::new(1.0, 0.5);
        assert!(matches!(
            decompose(&u, Some(&omega), &params, ConvMode::Fft),
            Err(Error::SupportViolation(_))
        ));
    }

    #[test]
    fn zero_input_gives_empty_decomposition() {
        let grid = grid64();
        let ladder = TLadder::log_midpoint(0.1, 0.4, 4).unwrap();
        let u = TentFunction::zero(grid, 1, ladder);
        let params = DecompositionParams::new(1.0, 0.5);
        let dec = decompose(&u, FULL, &params, ConvMode::Fft).unwrap();
        assert!(dec.atoms.is_empty());
        assert_eq!(dec.unassigned, 0.0);
    }

    #[test]
    fn params_validate_range() {
        assert!(DecompositionParams::new(1.0, 0.5).validate(2).is_ok());
        assert!(DecompositionParams::new(0.5, 0.5).validate(2).is_err());
        assert!(DecompositionParams::new(1.2, 0.5).validate(2).is_err());
        let mut bad = DecompositionParams::new(1.0, 0.5);
        bad.gamma = 1.5;
        assert!(bad.validate(2).is_err());
    }
}
