//! Functions on the upper half-space lattice `(x, t)`: the cone transform
//! `Q`, its left inverse `pi`, the Lusin area integral, and the reproducing
//! identity `pi(Q(u)) = d T^{a,b} u` that ties them back to the potential
//! operator.
//!
//! A `TentFunction` stores one spatial slice per node of a logarithmic
//! `t`-ladder; the ladder weights discretize the measure `dt/t`, so a node
//! weight is the log-step `dtau` and the matching `dt`-window panel weight is
//! `t * dtau`. Keeping the two quadratures paired like this is what makes
//! `pi(Q(u))` agree with `d(Tu)` at machine precision rather than up to a
//! quadrature error.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{
    contract_convolve, convolve, convolve_scalar, exterior_derivative, wedge_convolve, ConvMode,
    FormField, GridSpec, KernelLattice,
};
use crate::kernel::{sample_phi, sample_psi_component, scaled_gradient};
use crate::potential::TruncationWindow;

pub const DEFAULT_NODES_PER_OCTAVE: usize = 16;

/// Logarithmic `t`-grid with `dt/t` quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TLadder {
    pub t_min: f64,
    pub t_max: f64,
    /// `(t_i, dtau_i)`; weights sum to `log(t_max/t_min)`.
    pub nodes: Vec<(f64, f64)>,
}

impl TLadder {
    pub fn log_midpoint(t_min: f64, t_max: f64, per_octave: usize) -> Result<Self> {
        let window = TruncationWindow::log_midpoint(t_min, t_max, per_octave)?;
        Ok(Self::from_window(&window))
    }

    /// Ladder sharing nodes with a `dt`-window: `dtau_i = w_i / t_i`.
    pub fn from_window(window: &TruncationWindow) -> Self {
        TLadder {
            t_min: window.a,
            t_max: window.b,
            nodes: window.panels.iter().map(|&(t, w)| (t, w / t)).collect(),
        }
    }

    /// The paired `dt`-quadrature window (panel weight `t_i * dtau_i`).
    pub fn window(&self) -> TruncationWindow {
        TruncationWindow {
            a: self.t_min,
            b: self.t_max,
            panels: self.nodes.iter().map(|&(t, dtau)| (t, t * dtau)).collect(),
        }
    }

    pub fn weight_sum(&self) -> f64 {
        self.nodes.iter().map(|&(_, w)| w).sum()
    }
}

/// One spatial slice per ladder node; all slices share grid and degree.
#[derive(Debug, Clone)]
pub struct TentFunction {
    pub ladder: TLadder,
    pub slices: Vec<FormField>,
}

impl TentFunction {
    pub fn zero(grid: GridSpec, degree: usize, ladder: TLadder) -> Self {
        let slices = ladder
            .nodes
            .iter()
            .map(|_| FormField::zero(grid.clone(), degree))
            .collect();
        TentFunction { ladder, slices }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.slices[0].grid
    }

    pub fn degree(&self) -> usize {
        self.slices[0].degree
    }

    pub fn scale(&mut self, c: f64) {
        for s in &mut self.slices {
            *s = s.scale(c);
        }
    }

    pub fn add(&self, other: &TentFunction) -> Result<TentFunction> {
        if self.ladder != other.ladder {
            return Err(Error::InvalidParam("ladder mismatch".into()));
        }
        let slices: Result<Vec<FormField>> = self
            .slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| a.add(b))
            .collect();
        Ok(TentFunction { ladder: self.ladder.clone(), slices: slices? })
    }

    pub fn sub(&self, other: &TentFunction) -> Result<TentFunction> {
        let mut neg = other.clone();
        neg.scale(-1.0);
        self.add(&neg)
    }

    pub fn max_abs(&self) -> f64 {
        self.slices.iter().map(|s| s.max_abs()).fold(0.0, f64::max)
    }

    /// `∬ |U|^2 dy dt/t = sum_i dtau_i ||U_i||_2^2`.
    pub fn energy(&self) -> f64 {
        self.ladder
            .nodes
            .iter()
            .zip(&self.slices)
            .map(|(&(_, w), s)| {
                let l2 = s.l2_norm();
                w * l2 * l2
            })
            .sum()
    }
}

/// `(Qu)(x, t_i) = Psi_{t_i} * (contraction of u)`: degree drops by one.
pub fn q_transform(
    u: &FormField,
    sigma: f64,
    ladder: &TLadder,
    seed: u64,
    mode: ConvMode,
) -> Result<TentFunction> {
    let n = u.grid.n;
    let h = u.grid.h;
    let slices: Result<Vec<FormField>> = ladder
        .nodes
        .iter()
        .map(|&(t, _)| {
            let psi: Result<Vec<KernelLattice>> = (0..n)
                .map(|axis| sample_psi_component(n, sigma, t, h, seed, axis))
                .collect();
            contract_convolve(&psi?, u, mode)
        })
        .collect();
    Ok(TentFunction { ladder: ladder.clone(), slices: slices? })
}

/// `pi(U) = sum_i dtau_i sum_j (d_j phi)_{t_i} * (e_j wedge U_i)`: degree
/// rises by one. The gradient kernel is `t * D_j(phi_t)`, which is exactly
/// what `d` applied after a `phi_t`-convolution produces on the lattice.
pub fn pi_transform(
    u: &TentFunction,
    sigma: f64,
    seed: u64,
    mode: ConvMode,
) -> Result<FormField> {
    let grid = u.grid().clone();
    let n = grid.n;
    let h = grid.h;
    let mut out = FormField::zero(grid, u.degree() + (u.degree() < u.grid().n) as usize);
    for (&(t, dtau), slice) in u.ladder.nodes.iter().zip(&u.slices) {
        let phi = sample_phi(n, sigma, t, h, seed)?;
        let grads = scaled_gradient(&phi, t);
        let term = wedge_convolve(&grads, slice, mode)?.scale(dtau);
        out = out.add(&term)?;
    }
    Ok(out)
}

/// Open lattice ball `|y| < t` (cell centers), as a unit-valued kernel.
fn ball_indicator(n: usize, h: f64, t: f64) -> KernelLattice {
    let r = (t / h).ceil() as i64;
    let sizes = vec![(2 * r + 1) as usize; n];
    let lo = vec![-r; n];
    let mut k = KernelLattice {
        n,
        h,
        lo,
        sizes,
        values: vec![0.0; (2 * r + 1).pow(n as u32) as usize],
    };
    let t2 = (t / h) * (t / h);
    for idx in 0..k.num_cells() {
        let c = k.decode(idx);
        let d2: f64 = c.iter().map(|&ci| (ci * ci) as f64).sum();
        if d2 < t2 - 1e-12 {
            k.values[idx] = 1.0;
        }
    }
    k
}

/// Lusin area integral `SU(x) = (sum_i dtau_i N_i^{-1} sum_{|y-x|<t_i}
/// |U(y, t_i)|^2)^{1/2}`, one value per lattice cell; `N_i` is the cell
/// count of the open lattice ball of radius `t_i`. Averaging over the
/// discrete ball (instead of dividing by `t^n/h^n`) makes the square of the
/// lattice `L^2` norm of `SU` equal `∬|U|^2 dy dt/t` exactly, which in turn
/// makes the unit atom bound sharp rather than off by the cone's volume
/// factor.
pub fn area_integral(u: &TentFunction, mode: ConvMode) -> Result<Vec<f64>> {
    let grid = u.grid();
    let n = grid.n;
    let terms: Result<Vec<Vec<f64>>> = u
        .ladder
        .nodes
        .par_iter()
        .zip(&u.slices)
        .map(|(&(t, dtau), slice)| {
            let ball = ball_indicator(n, grid.h, t);
            let count: f64 = ball.values.iter().sum();
            let m = slice.magnitude_sq();
            let mut c = convolve_scalar(grid, &m, &ball, mode)?;
            let w = dtau / (count * grid.volume_element());
            for v in &mut c {
                *v *= w;
            }
            Ok(c)
        })
        .collect();
    let terms = terms?;
    let cells = grid.num_cells();
    let mut su = vec![0.0f64; cells];
    for term in &terms {
        for (a, &b) in su.iter_mut().zip(term) {
            *a += b;
        }
    }
    for v in &mut su {
        // convolution roundoff can leave tiny negatives on empty cones
        *v = v.max(0.0).sqrt();
    }
    Ok(su)
}

/// `T^p` quasi-norm: lattice `L^p` norm of the area integral.
pub fn tent_norm(u: &TentFunction, p: f64, mode: ConvMode) -> Result<f64> {
    if !(p > 0.0) {
        return Err(Error::InvalidParam("p must be positive".into()));
    }
    let su = area_integral(u, mode)?;
    let grid = u.grid();
    let acc: f64 = su.iter().map(|v| v.powf(p)).sum();
    Ok((grid.volume_element() * acc).powf(1.0 / p))
}

/// Reproduction defect of `pi(Q(u))` against the two-endpoint mollification
/// `theta_a * u - theta_b * u` with `theta = phi * phi`, for closed `u`.
#[derive(Debug, Clone)]
pub struct CalderonReport {
    /// `||pi(Q u) - (theta_a*u - theta_b*u)||_inf` relative to the rhs.
    pub residual: f64,
    /// low-end truncation `||u - theta_a*u||_inf / ||u||_inf`
    pub truncation_low: f64,
    /// high-end truncation `||theta_b*u||_inf / ||u||_inf`
    pub truncation_high: f64,
}

pub fn calderon_residual(
    u: &FormField,
    sigma: f64,
    ladder: &TLadder,
    seed: u64,
    mode: ConvMode,
) -> Result<CalderonReport> {
    let closed_defect = exterior_derivative(u).max_abs();
    if closed_defect != 0.0 {
        return Err(Error::NotClosed(closed_defect));
    }
    let n = u.grid.n;
    let h = u.grid.h;
    let pqu = pi_transform(&q_transform(u, sigma, ladder, seed, mode)?, sigma, seed, mode)?;
    let phi_a = sample_phi(n, sigma, ladder.t_min, h, seed)?;
    let phi_b = sample_phi(n, sigma, ladder.t_max, h, seed)?;
    let theta_a = phi_a.convolve_kernel(&phi_a);
    let theta_b = phi_b.convolve_kernel(&phi_b);
    let ua = convolve(u, &theta_a, mode)?;
    let ub = convolve(u, &theta_b, mode)?;
    let rhs = ua.sub(&ub)?;
    let scale = rhs.max_abs();
    if scale == 0.0 {
        return Err(Error::DegenerateNorm);
    }
    let umax = u.max_abs().max(f64::MIN_POSITIVE);
    Ok(CalderonReport {
        residual: pqu.sub(&rhs)?.max_abs() / scale,
        truncation_low: u.sub(&ua)?.max_abs() / umax,
        truncation_high: ub.max_abs() / umax,
    })
}
