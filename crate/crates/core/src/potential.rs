//! The truncated potential operator, its reflection, the homotopy identity,
//! support preservation, the Fourier symbol, and Sobolev lifting ratios.
//!
//! The operator is a single convolution with the dilation-integrated vector
//! kernel `K = sum_i w_i Theta_{t_i}`, applied through the contraction. The
//! homotopy identity
//!
//! `d(Tu) + T(du) = (sum_i w_i div Theta_{t_i}) * u`
//!
//! is a *discrete algebraic fact*: expanding both sides with the forward
//! differences and the wedge/contraction algebra gives the same convolution
//! sum, so the residual is pure floating-point reassociation. The quadrature
//! residual measures the distance of that divergence sum from the endpoint
//! difference `theta_a * u - theta_b * u`, which is the genuine truncation
//! term.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::domain::{distance_to_set, LipschitzGraphDomain};
use crate::error::{Error, Result};
use crate::grid::{
    contract_convolve, convolve, exterior_derivative, kernel_divergence, ConvMode, FormField,
    KernelLattice,
};
use crate::kernel::{
    sample_phi, sample_psi_component, sample_theta, sample_theta_x, theta_geometry, BumpGeometry,
};
use crate::lp::sobolev_norm;

/// Log-spaced midpoint quadrature on `[a, b]` for plain `dt` integrals:
/// nodes `t_i`, weights `w_i = t_i * dtau`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruncationWindow {
    pub a: f64,
    pub b: f64,
    pub panels: Vec<(f64, f64)>,
}

pub const DEFAULT_PANELS_PER_OCTAVE: usize = 64;

impl TruncationWindow {
    pub fn log_midpoint(a: f64, b: f64, panels_per_octave: usize) -> Result<Self> {
        if !(0.0 < a && a < b) {
            return Err(Error::InvalidParam(format!("window [{a}, {b}] not increasing")));
        }
        if panels_per_octave == 0 {
            return Err(Error::InvalidParam("need at least one panel per octave".into()));
        }
        let octaves = (b / a).log2();
        let count = (octaves * panels_per_octave as f64).ceil().max(1.0) as usize;
        let dtau = (b / a).ln() / count as f64;
        let panels = (0..count)
            .map(|i| {
                let t = a * ((i as f64 + 0.5) * dtau).exp();
                (t, t * dtau)
            })
            .collect();
        Ok(TruncationWindow { a, b, panels })
    }

    /// `sum w_i` approximates `b - a` (midpoint rule in log scale).
    pub fn weight_sum(&self) -> f64 {
        self.panels.iter().map(|&(_, w)| w).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelRoute {
    /// Vector kernel `theta_t(x) x / t` from the outer mollifier directly.
    ThetaX,
    /// Vector kernel `phi_t * Psi_t`; the scalar endpoint kernel is then
    /// `phi_t * phi_t`.
    PhiPsi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    /// Cone opens upward: preserves support in the region above the graph.
    Upward,
    /// Reflected kernels `K(-x)`: preserves the region below the graph.
    Reflected,
}

/// The truncated potential operator with pre-accumulated kernels.
#[derive(Debug, Clone)]
pub struct PotentialOperator {
    pub n: usize,
    pub sigma: f64,
    pub h: f64,
    pub route: KernelRoute,
    pub orientation: Orientation,
    pub window: TruncationWindow,
    pub seed: u64,
    /// `K_j = sum_i w_i (Theta_{t_i})_j`
    pub kvec: Vec<KernelLattice>,
    /// `sum_i w_i div Theta_{t_i}` — the exact discrete homotopy kernel.
    pub div_kernel: KernelLattice,
    /// Scalar endpoint kernels `theta_a`, `theta_b`.
    pub theta_a: KernelLattice,
    pub theta_b: KernelLattice,
}

/// Union-box accumulation `acc += w * k`.
pub fn add_scaled(acc: &mut Option<KernelLattice>, k: &KernelLattice, w: f64) {
    match acc {
        None => {
            let mut c = k.clone();
            c.scale(w);
            *acc = Some(c);
        }
        Some(a) => {
            if a.lo == k.lo && a.sizes == k.sizes {
                for (x, y) in a.values.iter_mut().zip(&k.values) {
                    *x += w * y;
                }
                return;
            }
            let n = a.n;
            let lo: Vec<i64> = (0..n).map(|d| a.lo[d].min(k.lo[d])).collect();
            let hi: Vec<i64> = (0..n)
                .map(|d| (a.lo[d] + a.sizes[d] as i64).max(k.lo[d] + k.sizes[d] as i64))
                .collect();
            let sizes: Vec<usize> = lo.iter().zip(&hi).map(|(l, u)| (u - l) as usize).collect();
            let mut merged = KernelLattice {
                n,
                h: a.h,
                lo: lo.clone(),
                sizes: sizes.clone(),
                values: vec![0.0; sizes.iter().product()],
            };
            let mst = merged.strides();
            for (src, scale) in [(&*a, 1.0f64), (k, w)] {
                for idx in 0..src.num_cells() {
                    let v = src.values[idx];
                    if v == 0.0 {
                        continue;
                    }
                    let c = src.decode(idx);
                    let mut mi = 0usize;
                    for d in 0..n {
                        mi += (c[d] - lo[d]) as usize * mst[d];
                    }
                    merged.values[mi] += scale * v;
                }
            }
            *acc = Some(merged);
        }
    }
}

impl PotentialOperator {
    pub fn build(
        n: usize,
        sigma: f64,
        h: f64,
        route: KernelRoute,
        orientation: Orientation,
        window: TruncationWindow,
        seed: u64,
    ) -> Result<Self> {
        if window.a < 8.0 * h {
            return Err(Error::UnderResolvedNode { t: window.a, h, min_samples: 8 });
        }
        let theta_geom = theta_geometry(n, sigma)?;
        let mut kvec_acc: Vec<Option<KernelLattice>> = vec![None; n];
        let mut div_acc: Option<KernelLattice> = None;
        for &(t, w) in &window.panels {
            let vec_t = node_vector_kernel(n, sigma, route, &theta_geom, t, h, seed)?;
            for (acc, comp) in kvec_acc.iter_mut().zip(&vec_t) {
                add_scaled(acc, comp, w);
            }
            let div_t = kernel_divergence(&vec_t);
            add_scaled(&mut div_acc, &div_t, w);
        }
        let theta_a = endpoint_kernel(n, sigma, route, &theta_geom, window.a, h, seed)?;
        let theta_b = endpoint_kernel(n, sigma, route, &theta_geom, window.b, h, seed)?;
        let mut kvec: Vec<KernelLattice> = kvec_acc.into_iter().map(|k| k.unwrap()).collect();
        let mut div_kernel = div_acc.unwrap();
        let (theta_a, theta_b) = if orientation == Orientation::Reflected {
            for k in &mut kvec {
                *k = k.reflect();
            }
            div_kernel = div_kernel.reflect();
            (theta_a.reflect(), theta_b.reflect())
        } else {
            (theta_a, theta_b)
        };
        Ok(PotentialOperator {
            n,
            sigma,
            h,
            route,
            orientation,
            window,
            seed,
            kvec,
            div_kernel,
            theta_a,
            theta_b,
        })
    }

    /// `Tu = K * (e_j contraction)`: drops degree by one, zero on 0-forms.
    pub fn apply(&self, u: &FormField, mode: ConvMode) -> Result<FormField> {
        contract_convolve(&self.kvec, u, mode)
    }

    /// `(algebraic, quadrature)` residuals of the homotopy identity.
    pub fn homotopy_residuals(&self, u: &FormField, mode: ConvMode) -> Result<(f64, f64)> {
        // on 0-forms Tu vanishes identically; on top-degree forms du does
        let lhs = if u.degree == 0 {
            self.apply(&exterior_derivative(u), mode)?
        } else if u.degree == self.n {
            exterior_derivative(&self.apply(u, mode)?)
        } else {
            exterior_derivative(&self.apply(u, mode)?)
                .add(&self.apply(&exterior_derivative(u), mode)?)?
        };
        let alg_rhs = convolve(u, &self.div_kernel, mode)?;
        let quad_rhs = convolve(u, &self.theta_a, mode)?.sub(&convolve(u, &self.theta_b, mode)?)?;
        let scale = alg_rhs.max_abs().max(quad_rhs.max_abs());
        if scale == 0.0 {
            return Err(Error::DegenerateNorm);
        }
        let algebraic = lhs.sub(&alg_rhs)?.max_abs() / scale;
        let quadrature = lhs.sub(&quad_rhs)?.max_abs() / scale;
        Ok((algebraic, quadrature))
    }

    /// Relative mass of `Tu` on cells farther than `2h` outside the
    /// operator's side of the domain. Exactly 0 in direct mode for data
    /// supported on the correct side.
    pub fn support_preservation_check(
        &self,
        dom: &LipschitzGraphDomain,
        u: &FormField,
    ) -> Result<f64> {
        if self.sigma * dom.lipschitz_a >= 1.0 {
            return Err(Error::ApertureCondition(self.sigma * dom.lipschitz_a));
        }
        let far_out = self.far_outside_mask(dom, &dom.grid);
        let violates = |mask: &[bool]| {
            (0..u.grid.num_cells())
                .any(|i| mask[i] && u.comps.iter().any(|c| c[i] != 0.0))
        };
        if violates(&far_out) {
            // diagnose: does the data fit the opposite side instead?
            let flipped = self.flipped_far_outside_mask(dom);
            if !violates(&flipped) {
                return Err(Error::OrientationMismatch);
            }
            return Err(Error::SupportViolation(
                "input has mass farther than 2h outside the closed domain".into(),
            ));
        }
        let tu = self.apply(u, ConvMode::Direct)?;
        let total = tu.max_abs();
        if total == 0.0 {
            return Ok(0.0);
        }
        let mut leak = 0.0f64;
        for i in 0..tu.grid.num_cells() {
            if far_out[i] {
                for c in &tu.comps {
                    leak = leak.max(c[i].abs());
                }
            }
        }
        Ok(leak / total)
    }

    fn side_inside<'d>(&self, dom: &'d LipschitzGraphDomain) -> Vec<bool> {
        match self.orientation {
            Orientation::Upward => dom.inside.clone(),
            Orientation::Reflected => dom.inside.iter().map(|&b| !b).collect(),
        }
    }

    fn far_outside_mask(&self, dom: &LipschitzGraphDomain, grid: &crate::grid::GridSpec) -> Vec<bool> {
        let inside = self.side_inside(dom);
        let dist = distance_to_set(grid, &inside);
        dist.iter().map(|&d| d > 2.0 * grid.h + 1e-12).collect()
    }

    fn flipped_far_outside_mask(&self, dom: &LipschitzGraphDomain) -> Vec<bool> {
        let inside: Vec<bool> = match self.orientation {
            Orientation::Upward => dom.inside.iter().map(|&b| !b).collect(),
            Orientation::Reflected => dom.inside.clone(),
        };
        let dist = distance_to_set(&dom.grid, &inside);
        dist.iter().map(|&d| d > 2.0 * dom.grid.h + 1e-12).collect()
    }

    /// `‖Tu‖_{H^{s+1}} / ‖u‖_{H^s}` on band-limited input.
    pub fn lifting_ratio(&self, u: &FormField, s: f64) -> Result<f64> {
        let denom = sobolev_norm(u, s)?;
        if denom < 1e-14 * u.max_abs().max(1.0) {
            return Err(Error::DegenerateNorm);
        }
        let tu = self.apply(u, ConvMode::Fft)?;
        Ok(sobolev_norm(&tu, s + 1.0)? / denom)
    }
}

fn node_vector_kernel(
    n: usize,
    sigma: f64,
    route: KernelRoute,
    theta_geom: &BumpGeometry,
    t: f64,
    h: f64,
    seed: u64,
) -> Result<Vec<KernelLattice>> {
    match route {
        KernelRoute::ThetaX => (0..n)
            .map(|axis| sample_theta_x(theta_geom, t, h, axis))
            .collect(),
        KernelRoute::PhiPsi => {
            let phi = sample_phi(n, sigma, t, h, seed)?;
            (0..n)
                .map(|axis| {
                    let psi = sample_psi_component(n, sigma, t, h, seed, axis)?;
                    Ok(phi.convolve_kernel(&psi))
                })
                .collect()
        }
    }
}

fn endpoint_kernel(
    n: usize,
    sigma: f64,
    route: KernelRoute,
    theta_geom: &BumpGeometry,
    t: f64,
    h: f64,
    seed: u64,
) -> Result<KernelLattice> {
    match route {
        KernelRoute::ThetaX => sample_theta(theta_geom, t, h),
        KernelRoute::PhiPsi => {
            let phi = sample_phi(n, sigma, t, h, seed)?;
            Ok(phi.convolve_kernel(&phi))
        }
    }
}

/// Fourier-side view of the operator: `m(xi) = ∫_0^∞ FT[Theta](t xi) dt`,
/// homogeneous of degree -1. The transform is evaluated from a fine analytic
/// sampling of the outer mollifier; the `t`-integral runs over a fixed
/// absolute log grid with the rapid-decay tail cut at `|t xi| > 60` (backed
/// by the quadratic tail bound of the symbol estimate).
pub struct SymbolEvaluator {
    n: usize,
    /// nonzero fine samples: (position, theta value * quadrature volume)
    samples: Vec<(Vec<f64>, f64)>,
    /// first moment of theta = FT[Theta](0)
    moment: Vec<f64>,
    t_nodes: Vec<(f64, f64)>,
    t_floor: f64,
}

impl SymbolEvaluator {
    pub fn new(n: usize, sigma: f64) -> Result<Self> {
        let geom = theta_geometry(n, sigma)?;
        let q = 1.0 / 96.0;
        let (blo, bhi) = geom.bounding_box();
        let lo: Vec<i64> = blo.iter().map(|v| (v / q).floor() as i64).collect();
        let hi: Vec<i64> = bhi.iter().map(|v| (v / q).ceil() as i64).collect();
        let sizes: Vec<usize> = lo.iter().zip(&hi).map(|(l, u)| (u - l + 1) as usize).collect();
        let total: usize = sizes.iter().product();
        let vol = q.powi(n as i32);
        let mut samples = Vec::new();
        let mut mass = 0.0f64;
        for idx in 0..total {
            let mut c = vec![0i64; n];
            let mut rem = idx;
            for a in (0..n).rev() {
                c[a] = lo[a] + (rem % sizes[a]) as i64;
                rem /= sizes[a];
            }
            let x: Vec<f64> = c.iter().map(|&ci| ci as f64 * q).collect();
            let v = geom.eval(&x);
            if v != 0.0 {
                mass += v * vol;
                samples.push((x, v * vol));
            }
        }
        for (_, w) in &mut samples {
            *w /= mass;
        }
        let mut moment = vec![0.0f64; n];
        for (x, w) in &samples {
            for a in 0..n {
                moment[a] += w * x[a];
            }
        }
        let window = TruncationWindow::log_midpoint(1e-3, 1e3, 24)?;
        Ok(SymbolEvaluator {
            n,
            samples,
            moment,
            t_nodes: window.panels,
            t_floor: 1e-3,
        })
    }

    /// `FT[Theta](zeta)` with `Theta(x) = theta(x) x`.
    pub fn kernel_transform(&self, zeta: &[f64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); self.n];
        for (x, w) in &self.samples {
            let phase: f64 = x.iter().zip(zeta).map(|(a, b)| a * b).sum();
            let e = Complex64::new(0.0, -phase).exp();
            for a in 0..self.n {
                out[a] += w * x[a] * e;
            }
        }
        out
    }

    pub fn symbol(&self, xi: &[f64]) -> Result<Vec<Complex64>> {
        let norm: f64 = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidParam("symbol undefined at xi = 0".into()));
        }
        let mut m: Vec<Complex64> = self
            .moment
            .iter()
            .map(|&v| Complex64::new(self.t_floor * v, 0.0)) // ∫_0^{t_floor} ≈ t_floor·FT[Theta](0)
            .collect();
        for &(t, w) in &self.t_nodes {
            if t * norm > 60.0 {
                break;
            }
            let zeta: Vec<f64> = xi.iter().map(|v| v * t).collect();
            let ft = self.kernel_transform(&zeta);
            for a in 0..self.n {
                m[a] += w * ft[a];
            }
        }
        Ok(m)
    }

    /// Max of `|2 m(2 xi) - m(xi)| / |m(xi)|` over seeded random frequencies.
    pub fn homogeneity_check(&self, count: usize, seed: u64) -> Result<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x73796d);
        let mut worst = 0.0f64;
        for _ in 0..count {
            let xi: Vec<f64> = (0..self.n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let norm: f64 = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 0.5 {
                continue;
            }
            let m1 = self.symbol(&xi)?;
            let xi2: Vec<f64> = xi.iter().map(|v| 2.0 * v).collect();
            let m2 = self.symbol(&xi2)?;
            let mut dev2 = 0.0f64;
            let mut ref2 = 0.0f64;
            for a in 0..self.n {
                dev2 += (2.0 * m2[a] - m1[a]).norm_sqr();
                ref2 += m1[a].norm_sqr();
            }
            worst = worst.max((dev2 / ref2).sqrt());
        }
        Ok(worst)
    }

    /// Tail mass `|∫_b^{b1} FT[Theta](t xi) dt|` for the decay observation.
    pub fn tail_mass(&self, xi: &[f64], b: f64, b1: f64) -> f64 {
        let mut m = vec![Complex64::default(); self.n];
        let norm: f64 = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        for &(t, w) in &self.t_nodes {
            if t < b || t > b1 || t * norm > 200.0 {
                continue;
            }
            let zeta: Vec<f64> = xi.iter().map(|v| v * t).collect();
            let ft = self.kernel_transform(&zeta);
            for a in 0..self.n {
                m[a] += w * ft[a];
            }
        }
        m.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{flat_domain, wedge_domain};
    use crate::grid::GridSpec;
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

    fn op2(route: KernelRoute) -> PotentialOperator {
        let h = 1.0 / 64.0;
        let window =
            TruncationWindow::log_midpoint(0.5, 1.0, DEFAULT_PANELS_PER_OCTAVE).unwrap();
        PotentialOperator::build(2, 0.5, h, route, Orientation::Upward, window, 3).unwrap()
    }

    #[test]
    fn window_weights_sum_to_length() {
        let w = TruncationWindow::log_midpoint(0.25, 4.0, 16).unwrap();
        assert!((w.weight_sum() - 3.75).abs() < 1e-3 * 3.75);
        let mut prev = 0.0;
        for &(t, wt) in &w.panels {
            assert!(t > prev && wt > 0.0);
            prev = t;
        }
    }

    #[test]
    fn zero_on_scalars_and_linear() {
        let op = op2(KernelRoute::ThetaX);
        let grid = GridSpec::cube(2, 192, 1.0 / 64.0, 0.0).unwrap();
        let z = op.apply(&random_field(&grid, 0, 1), ConvMode::Fft).unwrap();
        assert_eq!(z.max_abs(), 0.0);
        let u = random_field(&grid, 1, 2);
        let v = random_field(&grid, 1, 3);
        let lhs = op.apply(&u.add(&v).unwrap(), ConvMode::Fft).unwrap();
        let rhs = op.apply(&u, ConvMode::Fft).unwrap().add(&op.apply(&v, ConvMode::Fft).unwrap()).unwrap();
        let rel = lhs.sub(&rhs).unwrap().max_abs() / lhs.max_abs();
        assert!(rel < 1e-12);
    }

    #[test]
    fn homotopy_algebraic_machine_level_both_routes() {
        let grid = GridSpec::cube(2, 288, 1.0 / 64.0, 0.0).unwrap();
        for route in [KernelRoute::ThetaX, KernelRoute::PhiPsi] {
            let op = op2(route);
            for degree in 0..=2usize {
                let u = random_field(&grid, degree, 40 + degree as u64);
                let (alg, _quad) = op.homotopy_residuals(&u, ConvMode::Fft).unwrap();
                assert!(alg <= 1e-11, "route {route:?} degree {degree}: alg = {alg}");
            }
        }
    }

    #[test]
    fn quadrature_residual_within_budget() {
        let grid = GridSpec::cube(2, 288, 1.0 / 64.0, 0.0).unwrap();
        let op = op2(KernelRoute::ThetaX);
        let u = random_field(&grid, 1, 9);
        let (_, quad) = op.homotopy_residuals(&u, ConvMode::Fft).unwrap();
        assert!(quad <= 1e-2, "quad = {quad}");
    }

    #[test]
    fn support_preserved_on_flat_domain() {
        let h = 1.0 / 32.0;
        let grid = GridSpec::cube(2, 128, h, 0.0).unwrap();
        let dom = flat_domain(grid.clone(), 1.0);
        let window = TruncationWindow::log_midpoint(0.3, 0.6, 8).unwrap();
        let op = PotentialOperator::build(2, 0.5, h, KernelRoute::ThetaX, Orientation::Upward, window, 3)
            .unwrap();
        let mut u = FormField::zero(grid.clone(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..grid.num_cells() {
            if dom.inside[i] {
                let c = grid.decode(i);
                // keep mass away from the periodic wrap
                if c[0] > 8 && c[0] < 80 && c[1] < 80 {
                    u.comps[0][i] = rng.gen_range(-1.0..1.0);
                    u.comps[1][i] = rng.gen_range(-1.0..1.0);
                }
            }
        }
        let leak = op.support_preservation_check(&dom, &u).unwrap();
        assert_eq!(leak, 0.0);
    }

    #[test]
    fn reflected_operator_wants_lower_data() {
        let h = 1.0 / 32.0;
        let grid = GridSpec::cube(2, 128, h, 0.0).unwrap();
        let dom = flat_domain(grid.clone(), 3.0);
        let window = TruncationWindow::log_midpoint(0.3, 0.6, 8).unwrap();
        let op = PotentialOperator::build(2, 0.5, h, KernelRoute::ThetaX, Orientation::Reflected, window, 3)
            .unwrap();
        // data above the graph: wrong side for the reflected operator
        let mut u = FormField::zero(grid.clone(), 1);
        for i in 0..grid.num_cells() {
            let c = grid.decode(i);
            if c[1] > 100 && c[1] < 120 && c[0] > 30 && c[0] < 90 {
                u.comps[0][i] = 1.0;
            }
        }
        assert!(matches!(
            op.support_preservation_check(&dom, &u),
            Err(Error::OrientationMismatch)
        ));
        // data below the graph: correct side, exact preservation
        let mut v = FormField::zero(grid.clone(), 1);
        for i in 0..grid.num_cells() {
            let c = grid.decode(i);
            if c[1] > 45 && c[1] < 60 && c[0] > 30 && c[0] < 90 {
                v.comps[0][i] = (c[0] as f64 * 0.1).sin();
            }
        }
        let leak = op.support_preservation_check(&dom, &v).unwrap();
        assert_eq!(leak, 0.0);
    }

    #[test]
    fn wedge_domain_support_preserved() {
        let h = 1.0 / 32.0;
        let grid = GridSpec::cube(2, 128, h, 0.0).unwrap();
        let dom = wedge_domain(grid.clone(), 0.8, 0.75, &[2.0]).unwrap();
        let window = TruncationWindow::log_midpoint(0.3, 0.6, 8).unwrap();
        let op = PotentialOperator::build(2, 1.0, h, KernelRoute::ThetaX, Orientation::Upward, window, 3)
            .unwrap();
        let mut u = FormField::zero(grid.clone(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..grid.num_cells() {
            let c = grid.decode(i);
            if dom.inside[i] && c[1] < 90 && c[0] > 8 && c[0] < 120 {
                u.comps[0][i] = rng.gen_range(-1.0..1.0);
            }
        }
        let leak = op.support_preservation_check(&dom, &u).unwrap();
        assert_eq!(leak, 0.0);
    }

    #[test]
    fn n1_cumulative_integral_oracle() {
        // f >= 0, supp in [0,1], integral 1: T(f dx)(2) must be the mass
        let h = 1.0 / 512.0;
        let grid = GridSpec::cube(1, 18_000, h, -1.0).unwrap();
        let window = TruncationWindow::log_midpoint(1.0 / 64.0, 8.0, 8).unwrap();
        let op = PotentialOperator::build(1, 1.0, h, KernelRoute::ThetaX, Orientation::Upward, window, 3)
            .unwrap();
        let mut u = FormField::zero(grid.clone(), 1);
        for i in 0..grid.num_cells() {
            let x = -1.0 + i as f64 * h;
            if (0.0..1.0).contains(&x) {
                u.comps[0][i] = (std::f64::consts::PI * x).sin();
            }
        }
        let mass: f64 = h * u.comps[0].iter().sum::<f64>();
        for v in &mut u.comps[0] {
            *v /= mass; // integral exactly ~1
        }
        let tu = op.apply(&u, ConvMode::Fft).unwrap();
        let at2 = grid.linear(&[(3.0 / h) as usize]); // x = 2
        assert!((tu.comps[0][at2] - 1.0).abs() < 2e-3, "value {}", tu.comps[0][at2]);
    }

    #[test]
    fn symbol_homogeneity_and_conjugacy() {
        let ev = SymbolEvaluator::new(2, 1.0).unwrap();
        let dev = ev.homogeneity_check(6, 1).unwrap();
        assert!(dev <= 1e-3, "deviation {dev}");
        let xi = [0.9, 1.3];
        let m = ev.symbol(&xi).unwrap();
        let neg: Vec<f64> = xi.iter().map(|v| -v).collect();
        let mneg = ev.symbol(&neg).unwrap();
        for (a, b) in m.iter().zip(&mneg) {
            assert!((a.conj() - b).norm() < 1e-10 * (a.norm() + 1e-30));
        }
    }

    #[test]
    fn symbol_tail_decays() {
        let ev = SymbolEvaluator::new(2, 1.0).unwrap();
        let xi = [1.1, 0.4];
        let t1 = ev.tail_mass(&xi, 4.0, 1e3);
        let t2 = ev.tail_mass(&xi, 8.0, 1e3);
        assert!(t2 < 0.75 * t1, "t1={t1} t2={t2}");
    }

    #[test]
    fn under_resolved_window_rejected() {
        let window = TruncationWindow::log_midpoint(0.05, 0.5, 8).unwrap();
        assert!(matches!(
            PotentialOperator::build(2, 1.0, 1.0 / 32.0, KernelRoute::ThetaX, Orientation::Upward, window, 3),
            Err(Error::UnderResolvedNode { .. })
        ));
    }
}
