//! Command-line driver: build artifacts, run verifications, emit
//! machine-readable reports. Same config + seed gives byte-identical
//! outputs; every report echoes the full resolved configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use conewise_core::decomp::{audit, decompose, DecompositionParams};
use conewise_core::domain::{flat_domain, random_domain, wedge_domain, LipschitzGraphDomain};
use conewise_core::error::Result;
use conewise_core::grid::{exterior_derivative, ConvMode, FormField, GridSpec};
use conewise_core::hardy::{beta_support_check, hardy_decompose, hardy_proxy_norm};
use conewise_core::io;
use conewise_core::kernel::{sample_phi, sample_theta, theta_geometry};
use conewise_core::lp::band_limited_field;
use conewise_core::potential::{
    KernelRoute, Orientation, PotentialOperator, SymbolEvaluator, TruncationWindow,
};
use conewise_core::tent::{pi_transform, q_transform, tent_norm, TLadder, TentFunction};

// ---------------------------------------------------------------------------
// configuration

fn default_n() -> usize {
    2
}
fn default_size() -> usize {
    128
}
fn default_h() -> f64 {
    1.0 / 32.0
}
fn default_sigma() -> f64 {
    0.5
}
fn default_seed() -> u64 {
    3
}
fn default_degree() -> usize {
    1
}
fn default_window() -> WindowConfig {
    WindowConfig {
        a: 0.3,
        b: 0.6,
        panels_per_octave: 64,
    }
}
fn default_ladder() -> LadderConfig {
    LadderConfig {
        t_min: 0.9,
        t_max: 1.1,
        per_octave: 16,
    }
}
fn default_domain() -> DomainConfig {
    DomainConfig {
        kind: "flat".into(),
        level: 1.0,
        slope: 0.5,
        apex: vec![],
        a_target: 0.25,
    }
}
fn default_p() -> f64 {
    1.0
}
fn default_gamma() -> f64 {
    0.5
}
fn default_nu() -> f64 {
    0.5
}
fn default_beta() -> f64 {
    0.5
}
fn default_route() -> String {
    "theta-x".into()
}
fn default_orientation() -> String {
    "upward".into()
}
fn default_mode() -> String {
    "fft".into()
}
fn default_band() -> (i32, i32) {
    (1, 3)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowConfig {
    pub a: f64,
    pub b: f64,
    pub panels_per_octave: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub per_octave: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainConfig {
    /// "flat", "wedge", or "random"
    pub kind: String,
    pub level: f64,
    /// wedge slope
    pub slope: f64,
    /// wedge apex (length n-1; empty means box center)
    pub apex: Vec<f64>,
    /// target Lipschitz constant for random graphs
    pub a_target: f64,
}

/// Full run configuration; every field has a default and the resolved value
/// is echoed into each report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_window")]
    pub window: WindowConfig,
    #[serde(default = "default_ladder")]
    pub ladder: LadderConfig,
    #[serde(default = "default_domain")]
    pub domain: DomainConfig,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub min_piece_energy: f64,
    #[serde(default = "default_route")]
    pub route: String,
    #[serde(default = "default_orientation")]
    pub orientation: String,
    #[serde(default = "default_mode")]
    pub mode: String,
    /// frequency band (dyadic octaves) for generated random fields
    #[serde(default = "default_band")]
    pub band: (i32, i32),
    /// if set, generated fields are windowed by a smooth radial bump of this
    /// radius centered in the box (applied before differentiation, so closed
    /// forms stay exactly closed)
    #[serde(default)]
    pub localize: Option<f64>,
    /// per-check budget overrides, keyed by check name
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
            None => RunConfig::default(),
        };
        if cfg.sigma * cfg.domain.slope >= 1.0 && cfg.domain.kind == "wedge" {
            return Err(err(format!(
                "aperture condition sigma*A = {} must be < 1",
                cfg.sigma * cfg.domain.slope
            )));
        }
        Ok(cfg)
    }

    fn grid(&self) -> Result<GridSpec> {
        GridSpec::cube(self.n, self.size, self.h, 0.0)
    }

    fn conv_mode(&self) -> Result<ConvMode> {
        match self.mode.as_str() {
            "fft" => Ok(ConvMode::Fft),
            "direct" => Ok(ConvMode::Direct),
            other => Err(err(format!("unknown convolution mode '{other}'"))),
        }
    }

    fn route(&self) -> Result<KernelRoute> {
        match self.route.as_str() {
            "theta-x" => Ok(KernelRoute::ThetaX),
            "phi-psi" => Ok(KernelRoute::PhiPsi),
            other => Err(err(format!("unknown kernel route '{other}'"))),
        }
    }

    fn orientation(&self) -> Result<Orientation> {
        match self.orientation.as_str() {
            "upward" => Ok(Orientation::Upward),
            "reflected" => Ok(Orientation::Reflected),
            other => Err(err(format!("unknown orientation '{other}'"))),
        }
    }

    fn t_ladder(&self) -> Result<TLadder> {
        TLadder::log_midpoint(self.ladder.t_min, self.ladder.t_max, self.ladder.per_octave)
    }

    fn decomposition_params(&self) -> DecompositionParams {
        DecompositionParams {
            min_piece_energy: self.min_piece_energy,
            p: self.p,
            gamma: self.gamma,
            nu: self.nu,
            beta: self.beta,
        }
    }

    fn build_domain(&self) -> Result<LipschitzGraphDomain> {
        let grid = self.grid()?;
        match self.domain.kind.as_str() {
            "flat" => Ok(flat_domain(grid, self.domain.level)),
            "wedge" => {
                let apex = if self.domain.apex.len() == self.n - 1 {
                    self.domain.apex.clone()
                } else {
                    vec![0.5 * self.size as f64 * self.h; self.n - 1]
                };
                wedge_domain(grid, self.domain.level, self.domain.slope, &apex)
            }
            "random" => random_domain(grid, self.domain.level, self.domain.a_target, self.seed),
            other => Err(err(format!("unknown domain kind '{other}'"))),
        }
    }

    /// Seeded band-limited field; `closed` replaces it by the derivative of
    /// a degree-lowered potential so that `d u = 0` exactly.
    fn build_form(&self, closed: bool) -> Result<FormField> {
        let grid = self.grid()?;
        if closed {
            if self.degree == 0 {
                return Err(err("a closed generated form needs degree >= 1".into()));
            }
            let mut v =
                band_limited_field(&grid, self.degree - 1, self.band.0, self.band.1, self.seed);
            if let Some(r) = self.localize {
                apply_radial_window(&mut v, r);
            }
            Ok(exterior_derivative(&v))
        } else {
            let mut u = band_limited_field(&grid, self.degree, self.band.0, self.band.1, self.seed);
            if let Some(r) = self.localize {
                apply_radial_window(&mut u, r);
            }
            Ok(u)
        }
    }

    fn budget(&self, name: &str, default: f64) -> f64 {
        *self.tolerances.get(name).unwrap_or(&default)
    }
}

/// Multiply every component by (1 - (|x - c|/r)^2)^4 inside the ball of
/// radius `r` around the box center and zero it outside, keeping smoothness
/// up to third derivatives at the edge.
fn apply_radial_window(u: &mut FormField, r: f64) {
    let grid = u.grid.clone();
    let center: Vec<f64> = grid
        .sizes
        .iter()
        .map(|&s| 0.5 * s as f64 * grid.h)
        .collect();
    for i in 0..grid.num_cells() {
        let pos = grid.position(&grid.decode(i));
        let d2: f64 = pos
            .iter()
            .zip(&center)
            .map(|(x, c)| (x - c) * (x - c))
            .sum();
        let s2 = d2 / (r * r);
        let w = if s2 >= 1.0 { 0.0 } else { (1.0 - s2).powi(4) };
        for c in u.comps.iter_mut() {
            c[i] *= w;
        }
    }
}

fn err(msg: String) -> conewise_core::error::Error {
    conewise_core::error::Error::InvalidParam(msg)
}

// ---------------------------------------------------------------------------
// reports

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckRow {
    name: String,
    value: f64,
    /// `None` marks an informational row with no budget.
    budget: Option<f64>,
    pass: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Report {
    schema: String,
    command: String,
    pass: bool,
    checks: Vec<CheckRow>,
    config: RunConfig,
}

impl Report {
    fn new(command: &str, config: &RunConfig) -> Self {
        Report {
            schema: format!("{}/report", io::SCHEMA),
            command: command.into(),
            pass: true,
            checks: Vec::new(),
            config: config.clone(),
        }
    }

    /// Record `value <= budget`.
    fn check(&mut self, name: &str, value: f64, budget: f64) {
        let pass = value <= budget;
        self.pass &= pass;
        self.checks.push(CheckRow {
            name: name.into(),
            value,
            budget: Some(budget),
            pass,
        });
    }

    /// Record an informational value with no budget.
    fn note(&mut self, name: &str, value: f64) {
        self.checks.push(CheckRow {
            name: name.into(),
            value,
            budget: None,
            pass: true,
        });
    }

    fn finish(self, out: Option<&Path>) -> Result<bool> {
        let bytes = serde_json::to_vec_pretty(&self)?;
        match out {
            Some(p) => io::atomic_write(p, &bytes)?,
            None => println!("{}", String::from_utf8_lossy(&bytes)),
        }
        Ok(self.pass)
    }
}

// ---------------------------------------------------------------------------
// command line

#[derive(Parser)]
#[command(name = "conewise", version, about = "cone-mollifier tent-space toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration (defaults used when omitted)
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// output artifact base path or report path
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate artifacts (domain masks, form fields, sampled kernels).
    Gen {
        #[command(subcommand)]
        what: GenCommand,
    },
    /// Truncated potential operator: apply it or verify its contracts.
    Potential {
        #[command(subcommand)]
        what: PotentialCommand,
    },
    /// Cone transform, synthesis, tent norms, and the atomic decomposition.
    Tent {
        #[command(subcommand)]
        what: TentCommand,
    },
    /// End-to-end pipeline from closed fields to localized atom pairs.
    Hardy {
        #[command(subcommand)]
        what: HardyCommand,
    },
    /// Aggregate JSON reports into a CSV summary (name,value,budget,pass).
    Report {
        /// input report files
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GenCommand {
    /// Write the configured domain (graph samples, inside mask, distances).
    Domain {
        #[command(flatten)]
        common: Common,
    },
    /// Write a seeded band-limited form field.
    Form {
        #[command(flatten)]
        common: Common,
        /// emit `d v` of a lower-degree potential (exactly closed)
        #[arg(long)]
        closed: bool,
    },
    /// Write a sampled mollifier at dilation `t`.
    Kernel {
        #[command(flatten)]
        common: Common,
        /// "phi" (shell mollifier) or "theta" (outer mollifier)
        #[arg(long, default_value = "phi")]
        kernel: String,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
    },
}

#[derive(Subcommand)]
enum PotentialCommand {
    /// `v = T u` for a stored input field.
    Apply {
        #[command(flatten)]
        common: Common,
        /// input field artifact base
        #[arg(short, long)]
        input: PathBuf,
    },
    /// Homotopy identity, support preservation, and symbol homogeneity.
    Verify {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum TentCommand {
    /// Cone transform of a stored field; writes one slice per ladder node.
    Q {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        input: PathBuf,
    },
    /// Synthesis of a stored transform stack back to a field.
    Pi {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        input: PathBuf,
    },
    /// Tent-space quasi-norm of the transform of a stored field.
    Norm {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        input: PathBuf,
    },
    /// Atomic decomposition of the transform; writes an atom index.
    Decompose {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        input: PathBuf,
        /// domain artifact base (whole space when omitted)
        #[arg(short, long)]
        domain: Option<PathBuf>,
    },
    /// Decompose and check every audit budget.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        domain: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum HardyCommand {
    /// Full pipeline on a stored closed field; report plus atom index.
    Decompose {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        domain: Option<PathBuf>,
    },
    /// Pipeline audits only (no atom index output).
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        domain: Option<PathBuf>,
    },
    /// Scale-wise support margin of the transform against the domain.
    BetaCheck {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        domain: PathBuf,
    },
}

// ---------------------------------------------------------------------------
// subcommand bodies

fn cmd_gen(what: GenCommand) -> Result<bool> {
    match what {
        GenCommand::Domain { common } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let out = require_out(&common)?;
            let d = cfg.build_domain()?;
            io::write_domain(&out, &d)?;
            Ok(true)
        }
        GenCommand::Form { common, closed } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let out = require_out(&common)?;
            let u = cfg.build_form(closed)?;
            io::write_field(&out, &u)?;
            Ok(true)
        }
        GenCommand::Kernel { common, kernel, t } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let out = require_out(&common)?;
            let k = match kernel.as_str() {
                "phi" => sample_phi(cfg.n, cfg.sigma, t, cfg.h, cfg.seed)?,
                "theta" => sample_theta(&theta_geometry(cfg.n, cfg.sigma)?, t, cfg.h)?,
                other => return Err(err(format!("unknown kernel '{other}'"))),
            };
            io::write_kernel(&out, &k)?;
            Ok(true)
        }
    }
}

fn cmd_potential(what: PotentialCommand) -> Result<bool> {
    match what {
        PotentialCommand::Apply { common, input } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let out = require_out(&common)?;
            let u = io::read_field(&input)?;
            let op = build_operator(&cfg)?;
            let v = op.apply(&u, cfg.conv_mode()?)?;
            io::write_field(&out, &v)?;
            Ok(true)
        }
        PotentialCommand::Verify { common } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let mode = cfg.conv_mode()?;
            let op = build_operator(&cfg)?;
            let mut report = Report::new("potential verify", &cfg);
            let u = cfg.build_form(false)?;
            let (algebraic, quadrature) = op.homotopy_residuals(&u, mode)?;
            report.check(
                "homotopy_algebraic",
                algebraic,
                cfg.budget("homotopy_algebraic", 1e-11),
            );
            report.note("homotopy_quadrature", quadrature);
            let domain = cfg.build_domain()?;
            // The truncated kernel at scale t is a double mollification, so its
            // support radius is 2t; the cone of influence reaches 2 * window.b.
            let masked = mask_to_domain(&u, &domain, &op, 2.0 * cfg.window.b);
            let leak = op.support_preservation_check(&domain, &masked)?;
            report.check("support_leak", leak, cfg.budget("support_leak", 0.0));
            let symbol = SymbolEvaluator::new(cfg.n, cfg.sigma)?;
            let hom = symbol.homogeneity_check(20, cfg.seed)?;
            report.check(
                "symbol_homogeneity",
                hom,
                cfg.budget("symbol_homogeneity", 1e-3),
            );
            report.finish(common.out.as_deref())
        }
    }
}

fn cmd_tent(what: TentCommand) -> Result<bool> {
    match what {
        TentCommand::Q { common, input } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let out = require_out(&common)?;
            let u = io::read_field(&input)?;
            let qu = q_transform(&u, cfg.sigma, &cfg.t_ladder()?, cfg.seed, cfg.conv_mode()?)?;
            write_tent(&out, &qu)?;
            Ok(true)
        }
        TentCommand::Pi { common, input } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let out = require_out(&common)?;
            let stack = read_tent(&input)?;
            let v = pi_transform(&stack, cfg.sigma, cfg.seed, cfg.conv_mode()?)?;
            io::write_field(&out, &v)?;
            Ok(true)
        }
        TentCommand::Norm { common, input } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let mode = cfg.conv_mode()?;
            let u = io::read_field(&input)?;
            let qu = q_transform(&u, cfg.sigma, &cfg.t_ladder()?, cfg.seed, mode)?;
            let mut report = Report::new("tent norm", &cfg);
            report.note("tent_norm", tent_norm(&qu, cfg.p, mode)?);
            report.finish(common.out.as_deref())
        }
        TentCommand::Decompose {
            common,
            input,
            domain,
        } => {
            let (report, index) = run_tent_decompose(&common, &input, domain.as_deref())?;
            if let Some(out) = &common.out {
                io::atomic_write(
                    &out.with_extension("atoms.json"),
                    &serde_json::to_vec_pretty(&index)?,
                )?;
            }
            report.finish(common.out.as_deref())
        }
        TentCommand::Audit {
            common,
            input,
            domain,
        } => {
            let (report, _) = run_tent_decompose(&common, &input, domain.as_deref())?;
            report.finish(common.out.as_deref())
        }
    }
}

#[derive(Debug, Serialize)]
struct AtomIndexEntry {
    center: Vec<usize>,
    radius: f64,
    lambda: f64,
    nodes: usize,
    cells: usize,
}

fn run_tent_decompose(
    common: &Common,
    input: &Path,
    domain: Option<&Path>,
) -> Result<(Report, Vec<AtomIndexEntry>)> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let mode = cfg.conv_mode()?;
    let u = io::read_field(input)?;
    let qu = q_transform(&u, cfg.sigma, &cfg.t_ladder()?, cfg.seed, mode)?;
    let dom = domain.map(io::read_domain).transpose()?;
    let omega = dom.as_ref().map(|d| d.inside.as_slice());
    let params = cfg.decomposition_params();
    let mut dec = decompose(&qu, omega, &params, mode)?;
    let rep = audit(&mut dec, &qu, omega, mode)?;
    let mut report = Report::new("tent decompose", &cfg);
    report.check(
        "reconstruction",
        rep.reconstruction,
        cfg.budget("reconstruction", 1e-12),
    );
    report.check("unassigned", dec.unassigned, cfg.budget("unassigned", 1e-8));
    report.check(
        "atoms_failed",
        rep.atoms_failed as f64,
        cfg.budget("atoms_failed", 0.0),
    );
    report.note("atom_count", dec.atoms.len() as f64);
    report.note("coefficient_ratio", rep.ratio);
    report.note("max_overlap", rep.max_overlap as f64);
    let index = dec
        .atoms
        .iter()
        .map(|a| AtomIndexEntry {
            center: a.ball.center.clone(),
            radius: a.ball.radius,
            lambda: a.lambda,
            nodes: a.a.ladder.nodes.len(),
            cells: a.a.cells.iter().map(|c| c.len()).sum(),
        })
        .collect();
    Ok((report, index))
}

fn cmd_hardy(what: HardyCommand) -> Result<bool> {
    match what {
        HardyCommand::Decompose {
            common,
            input,
            domain,
        }
        | HardyCommand::Audit {
            common,
            input,
            domain,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let mode = cfg.conv_mode()?;
            let u = io::read_field(&input)?;
            let dom = domain.map(|p| io::read_domain(&p)).transpose()?;
            let omega = dom.as_ref().map(|d| d.inside.as_slice());
            let params = cfg.decomposition_params();
            let ladder = cfg.t_ladder()?;
            let dec = hardy_decompose(&u, omega, &params, cfg.sigma, &ladder, cfg.seed, mode)?;
            let mut report = Report::new("hardy decompose", &cfg);
            report.check(
                "pair_exactness",
                dec.max_exactness,
                cfg.budget("pair_exactness", 1e-11),
            );
            report.check(
                "reconstruction",
                dec.reconstruction,
                cfg.budget("reconstruction", 2e-2),
            );
            let max_excess = dec
                .atoms
                .iter()
                .map(|a| a.support_excess)
                .fold(0.0f64, f64::max);
            report.check(
                "support_excess",
                max_excess,
                cfg.budget("support_excess", 2.0 * cfg.h + 1e-12),
            );
            report.note("atom_count", dec.atoms.len() as f64);
            report.note("reconstruction_vs_input", dec.reconstruction_vs_input);
            report.note("truncation_low", dec.truncation_low);
            report.note("truncation_high", dec.truncation_high);
            report.note("primitive_constant", dec.max_b_constant);
            report.note("sum_coeff_p", dec.sum_coeff_p);
            report.note(
                "proxy_norm_p",
                hardy_proxy_norm(&u, cfg.p, cfg.sigma, &ladder, cfg.seed, mode)?.powf(cfg.p),
            );
            if let Some(b) = &dec.beta {
                report.check("beta_margin_deficit", (-b.min_excess).max(0.0), 0.0);
            }
            if !dec.splits.is_empty() {
                let worst = dec
                    .splits
                    .iter()
                    .map(|s| -s.min_containment_margin)
                    .fold(f64::NEG_INFINITY, f64::max);
                report.check(
                    "split_containment_deficit",
                    worst.max(0.0),
                    cfg.budget("split_containment_deficit", 2.0 * cfg.h),
                );
                let resid = dec
                    .splits
                    .iter()
                    .map(|s| s.partition_residual)
                    .fold(0.0f64, f64::max);
                report.check(
                    "split_partition_residual",
                    resid,
                    cfg.budget("split_partition_residual", 1e-12),
                );
            }
            report.finish(common.out.as_deref())
        }
        HardyCommand::BetaCheck {
            common,
            input,
            domain,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?;
            let mode = cfg.conv_mode()?;
            let u = io::read_field(&input)?;
            let dom = io::read_domain(&domain)?;
            let qu = q_transform(&u, cfg.sigma, &cfg.t_ladder()?, cfg.seed, mode)?;
            let rep = beta_support_check(&qu, &dom.inside, cfg.beta)?;
            let mut report = Report::new("hardy beta-check", &cfg);
            report.check("beta_margin_deficit", (-rep.min_excess).max(0.0), 0.0);
            for (t, margin) in &rep.per_node {
                report.note(&format!("margin_t_{t:.6}"), *margin);
            }
            report.finish(common.out.as_deref())
        }
    }
}

fn cmd_report(inputs: &[PathBuf], out: Option<&Path>) -> Result<bool> {
    let mut csv = String::from("name,value,budget,pass\n");
    let mut all_pass = true;
    for path in inputs {
        let rep: Report = serde_json::from_slice(&std::fs::read(path)?)?;
        all_pass &= rep.pass;
        for row in &rep.checks {
            let budget = row.budget.map(|b| format!("{b:e}")).unwrap_or_default();
            csv.push_str(&format!(
                "{},{:e},{},{}\n",
                row.name, row.value, budget, row.pass
            ));
        }
    }
    match out {
        Some(p) => io::atomic_write(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(all_pass)
}

// ---------------------------------------------------------------------------
// helpers

fn require_out(common: &Common) -> Result<PathBuf> {
    common
        .out
        .clone()
        .ok_or_else(|| err("this subcommand needs --out".into()))
}

fn build_operator(cfg: &RunConfig) -> Result<PotentialOperator> {
    let window = TruncationWindow::log_midpoint(
        cfg.window.a,
        cfg.window.b,
        cfg.window.panels_per_octave,
    )?;
    PotentialOperator::build(
        cfg.n,
        cfg.sigma,
        cfg.h,
        cfg.route()?,
        cfg.orientation()?,
        window,
        cfg.seed,
    )
}

/// Zero the field outside the side of the domain the operator preserves,
/// and keep a margin of the truncation reach from every periodic box edge
/// so the cone of influence cannot wrap around.
fn mask_to_domain(
    u: &FormField,
    dom: &LipschitzGraphDomain,
    op: &PotentialOperator,
    reach: f64,
) -> FormField {
    let grid = &u.grid;
    let margin = reach + 4.0 * grid.h;
    let mut out = u.clone();
    for i in 0..grid.num_cells() {
        let pos = grid.position(&grid.decode(i));
        let boxed = (0..grid.n).all(|a| {
            let top = grid.origin[a] + grid.sizes[a] as f64 * grid.h;
            pos[a] > grid.origin[a] + margin && pos[a] < top - margin
        });
        let side = match op.orientation {
            Orientation::Upward => dom.inside[i],
            Orientation::Reflected => !dom.inside[i],
        };
        if !(side && boxed) {
            for comp in &mut out.comps {
                comp[i] = 0.0;
            }
        }
    }
    out
}

/// Transform stacks persist as one field artifact per ladder node plus a
/// ladder sidecar.
#[derive(Debug, Serialize, Deserialize)]
struct TentMeta {
    schema: String,
    kind: String,
    t_min: f64,
    t_max: f64,
    nodes: Vec<(f64, f64)>,
}

fn write_tent(base: &Path, u: &TentFunction) -> Result<()> {
    let meta = TentMeta {
        schema: io::SCHEMA.into(),
        kind: "tent_stack".into(),
        t_min: u.ladder.t_min,
        t_max: u.ladder.t_max,
        nodes: u.ladder.nodes.clone(),
    };
    io::atomic_write(
        &base.with_extension("stack.json"),
        &serde_json::to_vec_pretty(&meta)?,
    )?;
    for (i, slice) in u.slices.iter().enumerate() {
        io::write_field(&slice_base(base, i), slice)?;
    }
    Ok(())
}

fn read_tent(base: &Path) -> Result<TentFunction> {
    let meta: TentMeta =
        serde_json::from_slice(&std::fs::read(base.with_extension("stack.json"))?)?;
    if meta.kind != "tent_stack" {
        return Err(err("artifact is not a transform stack".into()));
    }
    let slices = (0..meta.nodes.len())
        .map(|i| io::read_field(&slice_base(base, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TentFunction {
        ladder: TLadder {
            t_min: meta.t_min,
            t_max: meta.t_max,
            nodes: meta.nodes,
        },
        slices,
    })
}

fn slice_base(base: &Path, i: usize) -> PathBuf {
    let mut name = base.file_name().unwrap_or_default().to_os_string();
    name.push(format!("_{i:03}"));
    base.with_file_name(name)
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("CONEWISE_THREADS") {
        if let Ok(k) = threads.parse::<usize>() {
            rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build_global()
                .ok();
        }
    }
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen { what } => cmd_gen(what),
        Command::Potential { what } => cmd_potential(what),
        Command::Tent { what } => cmd_tent(what),
        Command::Hardy { what } => cmd_hardy(what),
        Command::Report { inputs, out } => cmd_report(&inputs, out.as_deref()),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", serde_json::json!({ "error": "one or more budgets failed" }));
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            ExitCode::from(2)
        }
    }
}
