//! Spherical-mode machinery for the radial problem: thresholds `r_m`, the
//! frequency-splitting multipliers, the damped evolution `U(ρ, r, k)`, the
//! twist experiment and the adjoint energy identity. The spherically
//! symmetric balance identity is evaluated on the reduced half-line problem.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, C64, I};
use crate::ode::{self, merge_nodes, span_nodes, Block, Cell, Options, System, Wavenumber};
use crate::potential::{Envelope, PotentialGrid};
use crate::quad::{simpson, simpson_weights};
use crate::scattering::{self, SourceVector};

/// Default splitting exponent, just below `2/3`.
pub const DEFAULT_ALPHA: f64 = 0.66;

/// Largest mode cutoff for dense couplings in the full harmonic basis.
pub const DENSE_MAX_B: usize = 16;

/// Thresholds and multiplicities of the splitting `ω ~ r^α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeLayout {
    pub alpha: f64,
    pub b: usize,
    /// `λ_m = −m(m+1)`, `m = 0..=b`.
    pub lambdas: Vec<f64>,
    /// `r_0 = 1`, `r_m = (m(m+1))^{1/(2α)}`.
    pub thresholds: Vec<f64>,
    /// `2m + 1`.
    pub mode_dims: Vec<usize>,
}

pub fn mode_layout(alpha: f64, b: usize) -> Result<ModeLayout> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if b < 1 {
        return Err(Error::Parameter("mode cutoff b must be at least 1".into()));
    }
    let lambdas: Vec<f64> = (0..=b).map(|m| -((m * (m + 1)) as f64)).collect();
    let thresholds = (0..=b)
        .map(|m| if m == 0 { 1.0 } else { ((m * (m + 1)) as f64).powf(0.5 / alpha) })
        .collect();
    Ok(ModeLayout {
        alpha,
        b,
        lambdas,
        thresholds,
        mode_dims: (0..=b).map(|m| 2 * m + 1).collect(),
    })
}

impl ModeLayout {
    /// Index `m` with `r ∈ [r_m, r_{m+1})`; `0` below `r_1`, `b` beyond `r_b`.
    pub fn band(&self, r: f64) -> usize {
        self.thresholds.partition_point(|&t| t <= r).saturating_sub(1)
    }

    /// `s(r) = |λ_m|^{1/2}` on `[r_m, r_{m+1})`.
    pub fn s(&self, r: f64) -> f64 {
        self.lambdas[self.band(r)].abs().sqrt()
    }

    /// Damped eigenvalue used by `B_b`: `λ_m` below the cutoff, `−b(b+1)` at it.
    pub fn damped_lambda(&self, m: usize) -> f64 {
        if m < self.b {
            self.lambdas[m]
        } else {
            -((self.b * (self.b + 1)) as f64)
        }
    }
}

/// Coefficient ordering of a [`ModeVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeBasis {
    /// All `Y_l^m`, `m ≤ b`, `|l| ≤ m`, flat index `m² + l + m`.
    Full,
    /// Axially symmetric harmonics `Y_0^m` only; invariant under couplings
    /// that commute with rotations about the axis.
    Zonal,
}

impl ModeBasis {
    pub fn dim(&self, b: usize) -> usize {
        match self {
            ModeBasis::Full => (b + 1) * (b + 1),
            ModeBasis::Zonal => b + 1,
        }
    }

    /// Degree `m` of every flat index.
    pub fn degrees(&self, b: usize) -> Vec<usize> {
        match self {
            ModeBasis::Full => (0..=b).flat_map(|m| std::iter::repeat_n(m, 2 * m + 1)).collect(),
            ModeBasis::Zonal => (0..=b).collect(),
        }
    }

    /// Order `l` of every flat index.
    pub fn orders(&self, b: usize) -> Vec<i64> {
        match self {
            ModeBasis::Full => (0..=b as i64).flat_map(|m| -m..=m).collect(),
            ModeBasis::Zonal => vec![0; b + 1],
        }
    }

    pub fn index(&self, m: usize, l: i64) -> Option<usize> {
        if l.unsigned_abs() as usize > m {
            return None;
        }
        match self {
            ModeBasis::Full => Some((m * m) as usize + (l + m as i64) as usize),
            ModeBasis::Zonal => (l == 0).then_some(m),
        }
    }
}

/// Coefficients `f_l^m` of a function on the sphere in a truncated basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeVector {
    pub basis: ModeBasis,
    pub b: usize,
    pub coefficients: Vec<C64>,
}

impl ModeVector {
    pub fn zeros(basis: ModeBasis, b: usize) -> Self {
        ModeVector {
            basis,
            b,
            coefficients: vec![C64::new(0.0, 0.0); basis.dim(b)],
        }
    }

    /// The constant function `1` (unit norm in the normalized sphere measure).
    pub fn constant(basis: ModeBasis, b: usize) -> Self {
        Self::single(basis, b, 0, 0).unwrap()
    }

    pub fn single(basis: ModeBasis, b: usize, m: usize, l: i64) -> Result<Self> {
        let mut v = Self::zeros(basis, b);
        let i = basis
            .index(m, l)
            .filter(|_| m <= b)
            .ok_or_else(|| Error::Parameter(format!("mode ({m}, {l}) is not in the basis")))?;
        v.coefficients[i] = C64::new(1.0, 0.0);
        Ok(v)
    }

    pub fn norm(&self) -> f64 {
        linalg::vec_norm(&self.coefficients)
    }

    pub fn validate(&self) -> Result<()> {
        if self.coefficients.len() != self.basis.dim(self.b) {
            return Err(Error::Parameter("mode vector length does not match its basis".into()));
        }
        if self.coefficients.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Input("mode vector has non-finite coefficients".into()));
        }
        Ok(())
    }
}

/// Diagonal data of `M₁(r)`, `M₂(r) = I − M₁(r)`, `B₁ = B M₁` and
/// `B_{2,b} = B_b M₂` in a given basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitMultipliers {
    pub m1: Vec<bool>,
    pub m2: Vec<bool>,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

pub fn split_multipliers(layout: &ModeLayout, basis: ModeBasis, r: f64) -> SplitMultipliers {
    split_for_band(layout, &basis.degrees(layout.b), layout.band(r))
}

fn split_for_band(layout: &ModeLayout, degrees: &[usize], band: usize) -> SplitMultipliers {
    let m1: Vec<bool> = degrees.iter().map(|&m| m <= band).collect();
    SplitMultipliers {
        m2: m1.iter().map(|x| !x).collect(),
        b1: degrees.iter().zip(&m1).map(|(&m, &k)| if k { layout.lambdas[m] } else { 0.0 }).collect(),
        b2: degrees
            .iter()
            .zip(&m1)
            .map(|(&m, &k)| if k { 0.0 } else { layout.damped_lambda(m) })
            .collect(),
        m1,
    }
}

/// `⟨m, l| cos θ |m+1, l⟩` for orthonormal spherical harmonics.
pub fn cos_theta_coupling(m: usize, l: i64) -> f64 {
    let (m1, l2) = ((m + 1) as f64, (l * l) as f64);
    ((m1 * m1 - l2) / ((2 * m + 1) as f64 * (2 * m + 3) as f64)).sqrt()
}

/// Hermitian coupling `V(r)` in the truncated harmonic basis.
#[derive(Debug, Clone, PartialEq)]
pub enum CouplingMatrixFunction {
    Zero,
    /// `V(r, θ) = amplitude · envelope(r)`.
    SphericallySymmetric { amplitude: f64, envelope: Envelope },
    /// `diag(c_m) · envelope(r)` with one real coefficient per degree.
    DiagonalEnvelope { coefficients: Vec<f64>, envelope: Envelope },
    /// `V(r, θ) = c⟨r⟩^{−γ} cos(ωr + φ) cos θ`.
    AxialHarmonic { amplitude: f64, gamma: f64, omega: f64, phase: f64 },
    /// A fixed Hermitian matrix times an envelope.
    Dense { matrix: CMat, envelope: Envelope },
    /// Grid samples, linearly interpolated, zero beyond the support.
    Sampled(PotentialGrid),
}

impl CouplingMatrixFunction {
    /// Checks dimensions and Hermiticity against a basis.
    pub fn check(&self, basis: ModeBasis, b: usize) -> Result<()> {
        let n = basis.dim(b);
        match self {
            CouplingMatrixFunction::DiagonalEnvelope { coefficients, .. } if coefficients.len() != b + 1 => {
                Err(Error::Parameter(format!("need {} degree coefficients, got {}", b + 1, coefficients.len())))
            }
            CouplingMatrixFunction::Dense { matrix, .. } => {
                if matrix.nrows() != n || matrix.ncols() != n {
                    return Err(Error::Parameter(format!("dense coupling must be {n} × {n}")));
                }
                if basis == ModeBasis::Full && b > DENSE_MAX_B {
                    return Err(Error::Parameter(format!("dense couplings need b ≤ {DENSE_MAX_B}")));
                }
                if linalg::hermiticity_defect(matrix) > crate::potential::HERMITIAN_TOL * (1.0 + linalg::max_abs(matrix)) {
                    return Err(Error::Input("dense coupling is not Hermitian".into()));
                }
                Ok(())
            }
            CouplingMatrixFunction::Sampled(q) => {
                if q.dim() != n {
                    return Err(Error::Parameter(format!("sampled coupling must be {n} × {n}, got {}", q.dim())));
                }
                if basis == ModeBasis::Full && b > DENSE_MAX_B {
                    return Err(Error::Parameter(format!("sampled couplings need b ≤ {DENSE_MAX_B}")));
                }
                q.validate()
            }
            _ => Ok(()),
        }
    }

    /// Upper bound of `‖V(r)‖`.
    pub fn norm_bound(&self, r: f64) -> f64 {
        match self {
            CouplingMatrixFunction::Zero => 0.0,
            CouplingMatrixFunction::SphericallySymmetric { amplitude, envelope } => amplitude.abs() * envelope.eval(r),
            CouplingMatrixFunction::DiagonalEnvelope { coefficients, envelope } => {
                coefficients.iter().fold(0.0f64, |a, c| a.max(c.abs())) * envelope.eval(r)
            }
            CouplingMatrixFunction::AxialHarmonic { amplitude, gamma, .. } => {
                amplitude.abs() * Envelope::Japanese { gamma: *gamma }.eval(r)
            }
            CouplingMatrixFunction::Dense { matrix, envelope } => linalg::op_norm(matrix) * envelope.eval(r),
            CouplingMatrixFunction::Sampled(q) => linalg::op_norm(&q.value_at(r)),
        }
    }

    /// `y = V(r) x`.
    fn apply(&self, ctx: &BasisData, r: f64, cell: Cell, x: &[C64], y: &mut [C64], scratch: &mut Vec<C64>) {
        match self {
            CouplingMatrixFunction::Zero => y.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0)),
            CouplingMatrixFunction::SphericallySymmetric { amplitude, envelope } => {
                let v = amplitude * envelope.eval(r);
                for (yi, xi) in y.iter_mut().zip(x) {
                    *yi = xi * v;
                }
            }
            CouplingMatrixFunction::DiagonalEnvelope { coefficients, envelope } => {
                let e = envelope.eval(r);
                for i in 0..x.len() {
                    y[i] = x[i] * coefficients[ctx.degrees[i]] * e;
                }
            }
            CouplingMatrixFunction::AxialHarmonic {
                amplitude,
                gamma,
                omega,
                phase,
            } => {
                let v = amplitude * (1.0 + r * r).powf(-0.5 * gamma) * (omega * r + phase).cos();
                y.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
                for &(i, j, c) in &ctx.cos_theta {
                    y[i] += x[j] * (c * v);
                    y[j] += x[i] * (c * v);
                }
            }
            CouplingMatrixFunction::Dense { matrix, envelope } => {
                let e = envelope.eval(r);
                linalg::gemm_into(matrix.as_slice(), x.len(), x.len(), x, 1, y);
                y.iter_mut().for_each(|z| *z *= e);
            }
            CouplingMatrixFunction::Sampled(q) => {
                let n = x.len();
                scratch.resize(n * n, C64::new(0.0, 0.0));
                q.interp_into(r.clamp(cell.lo, cell.hi), scratch);
                linalg::gemm_into(scratch, n, n, x, 1, y);
            }
        }
    }
}

/// Index tables of a basis.
struct BasisData {
    degrees: Vec<usize>,
    /// `(i, j, ⟨i|cos θ|j⟩)` with `deg j = deg i + 1`.
    cos_theta: Vec<(usize, usize, f64)>,
}

impl BasisData {
    fn new(basis: ModeBasis, b: usize) -> Self {
        let degrees = basis.degrees(b);
        let orders = basis.orders(b);
        let mut cos_theta = Vec::new();
        for i in 0..degrees.len() {
            let (m, l) = (degrees[i], orders[i]);
            if m < b {
                if let Some(j) = basis.index(m + 1, l) {
                    cos_theta.push((i, j, cos_theta_coupling(m, l)));
                }
            }
        }
        BasisData { degrees, cos_theta }
    }
}

/// Which part of `Ṽ = −B₁/r² + V` drives the evolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// `Ṽ χ_{r > d}`.
    Tail { d: f64 },
    /// `Ṽ χ_{r < R}`.
    Truncated { radius: f64 },
}

impl Variant {
    fn active(&self, mid: f64) -> bool {
        match *self {
            Variant::Full => true,
            Variant::Tail { d } => mid > d,
            Variant::Truncated { radius } => mid < radius,
        }
    }

    fn breakpoint(&self) -> Option<f64> {
        match *self {
            Variant::Full => None,
            Variant::Tail { d } => Some(d),
            Variant::Truncated { radius } => Some(radius),
        }
    }
}

/// `κ = −1/(2ik)`.
pub fn kappa(k: C64) -> C64 {
    -1.0 / (2.0 * I * k)
}

/// `u′ = G(r)u` with `G = κB_{2,b}/r² + (ξ/2i)Ṽ`, or the adjoint flow
/// `w′ = −G(r)*w`, optionally augmented with the integrands of the energy
/// identity.
struct ModeSystem<'a> {
    layout: &'a ModeLayout,
    ctx: BasisData,
    coupling: &'a CouplingMatrixFunction,
    variant: Variant,
    kappa: C64,
    xi_factor: C64,
    adjoint: bool,
    augment: bool,
    n: usize,
    scratch: RefCell<(Vec<C64>, Vec<C64>)>,
}

impl<'a> ModeSystem<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        layout: &'a ModeLayout,
        basis: ModeBasis,
        coupling: &'a CouplingMatrixFunction,
        variant: Variant,
        k: C64,
        xi: f64,
        adjoint: bool,
        augment: bool,
    ) -> Self {
        let n = basis.dim(layout.b);
        let kap = kappa(k);
        let xf = C64::new(xi, 0.0) / (2.0 * I);
        ModeSystem {
            layout,
            ctx: BasisData::new(basis, layout.b),
            coupling,
            variant,
            kappa: if adjoint { -kap.conj() } else { kap },
            xi_factor: if adjoint { -xf.conj() } else { xf },
            adjoint,
            augment,
            n,
            scratch: RefCell::new((vec![C64::new(0.0, 0.0); n], Vec::new())),
        }
    }
}

impl System for ModeSystem<'_> {
    fn len(&self) -> usize {
        self.n + if self.augment { 2 } else { 0 }
    }

    fn rhs(&self, r: f64, cell: Cell, y: &[C64], dy: &mut [C64]) -> Result<()> {
        let n = self.n;
        let mid = cell.mid();
        let band = self.layout.band(mid);
        let on = self.variant.active(mid);
        let x = &y[..n];
        let r2 = r * r;
        let mut g = self.scratch.borrow_mut();
        let (tmp, mat) = &mut *g;
        if on {
            self.coupling.apply(&self.ctx, r, cell, x, tmp, mat);
        }
        let mut b2_form = 0.0;
        for i in 0..n {
            let m = self.ctx.degrees[i];
            let low = m <= band;
            let b2 = if low { 0.0 } else { self.layout.damped_lambda(m) };
            let mut v = self.kappa * (b2 / r2) * x[i];
            if on {
                let b1 = if low { self.layout.lambdas[m] } else { 0.0 };
                v += self.xi_factor * (tmp[i] - x[i] * (b1 / r2));
            }
            dy[i] = v;
            b2_form += b2 * x[i].norm_sqr();
        }
        if self.augment {
            let sign = if self.adjoint { -1.0 } else { 1.0 };
            dy[n] = C64::new(sign * b2_form.abs() / r2, 0.0);
            let d2: f64 = dy[..n].iter().map(|z| z.norm_sqr()).sum();
            dy[n + 1] = C64::new(sign * d2, 0.0);
        }
        Ok(())
    }

    fn blocks(&self) -> Vec<Block> {
        let mut b = vec![Block::new(0..self.n)];
        if self.augment {
            b.push(Block::with_atol(self.n..self.n + 1, 1e-14));
            b.push(Block::with_atol(self.n + 1..self.n + 2, 1e-14));
        }
        b
    }
}

/// Nodes on `[a, b]` (either direction): multiples of `step`, the
/// thresholds inside and any extra breakpoints.
pub fn evolution_nodes(layout: &ModeLayout, a: f64, b: f64, step: f64, extra: &[f64]) -> Vec<f64> {
    let (lo, hi) = (a.min(b), a.max(b));
    let inner: Vec<f64> = layout
        .thresholds
        .iter()
        .chain(extra)
        .copied()
        .filter(|&t| t > lo && t < hi)
        .collect();
    let mut nodes = merge_nodes(&span_nodes(step, lo, hi), &inner);
    if a > b {
        nodes.reverse();
    }
    nodes
}

/// Norms of `u(r) = U(ρ, r)η` along the evolution.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionTrace {
    pub nodes: Vec<f64>,
    pub norm: Vec<f64>,
    /// `‖M₁(r)u(r)‖`, with the band taken on `[r, next node)`.
    pub norm_low: Vec<f64>,
    pub norm_high: Vec<f64>,
    pub final_state: ModeVector,
}

impl EvolutionTrace {
    /// CSV with columns `r, norm_u, norm_low, norm_high`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["r", "norm_u", "norm_low", "norm_high"])?;
        for i in 0..self.nodes.len() {
            wr.write_record([
                format!("{:e}", self.nodes[i]),
                format!("{:e}", self.norm[i]),
                format!("{:e}", self.norm_low[i]),
                format!("{:e}", self.norm_high[i]),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Parameters of an evolution run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolutionOptions {
    /// Spacing of recorded nodes.
    pub sample_step: f64,
    pub tol: f64,
}

impl Default for EvolutionOptions {
    fn default() -> Self {
        EvolutionOptions {
            sample_step: 0.5,
            tol: ode::DEFAULT_TOL,
        }
    }
}

fn band_norms(layout: &ModeLayout, degrees: &[usize], r: f64, x: &[C64]) -> (f64, f64) {
    let band = layout.band(r);
    let (mut lo, mut hi) = (0.0, 0.0);
    for (d, z) in degrees.iter().zip(x) {
        if *d <= band {
            lo += z.norm_sqr();
        } else {
            hi += z.norm_sqr();
        }
    }
    (lo.sqrt(), hi.sqrt())
}

/// Integrates `U′ = [κB_{2,b}/r² + (ξ/2i)Ṽ]U`, `U(ρ, ρ) = I` applied to `η`.
#[allow(clippy::too_many_arguments)]
pub fn evolve_u(
    layout: &ModeLayout,
    coupling: &CouplingMatrixFunction,
    k: Wavenumber,
    xi: f64,
    rho: f64,
    r: f64,
    variant: Variant,
    eta: &ModeVector,
    opts: EvolutionOptions,
) -> Result<EvolutionTrace> {
    if !(rho >= 1.0) || !(r > rho) {
        return Err(Error::Parameter(format!("need 1 ≤ ρ < r, got ρ = {rho}, r = {r}")));
    }
    if eta.b != layout.b {
        return Err(Error::Parameter("η and the layout have different cutoffs".into()));
    }
    eta.validate()?;
    coupling.check(eta.basis, layout.b)?;
    let extra: Vec<f64> = variant.breakpoint().into_iter().collect();
    let nodes = evolution_nodes(layout, rho, r, opts.sample_step, &extra);
    let sys = ModeSystem::new(layout, eta.basis, coupling, variant, k.value(), xi, false, false);
    let degrees = eta.basis.degrees(layout.b);
    let mut trace = EvolutionTrace {
        nodes: nodes.clone(),
        norm: Vec::with_capacity(nodes.len()),
        norm_low: Vec::with_capacity(nodes.len()),
        norm_high: Vec::with_capacity(nodes.len()),
        final_state: eta.clone(),
    };
    let last = nodes.len() - 1;
    ode::solve_observe(&sys, &eta.coefficients, &nodes, &Options::with_tol(opts.tol), |i, y| {
        let (lo, hi) = band_norms(layout, &degrees, nodes[i], y);
        trace.norm.push(linalg::vec_norm(y));
        trace.norm_low.push(lo);
        trace.norm_high.push(hi);
        if i == last {
            trace.final_state.coefficients.copy_from_slice(y);
        }
        Ok(())
    })?;
    Ok(trace)
}

/// Block norms at a threshold `r_m`: `α_m = ‖M₁u(r_m)‖`, `β_m = ‖M₂u(r_m)‖`,
/// with the proof's integrals `ζ_m` and `η_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub m: usize,
    pub r_m: f64,
    pub alpha_norm: f64,
    pub beta_norm: f64,
    pub zeta: f64,
    pub eta: f64,
}

/// Constants fitted to the block recursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecursionFit {
    /// Largest `C` with `|λ_m|(r_{m+1} − r_m)/(r_m r_{m+1}) ≥ C m^{1−1/α}`.
    pub damping_c: f64,
    /// Smallest `c` with `β_{m+1} ≤ e^{−C m^{1−1/α}} β_m + c m^{(1−γ)/α − 1}`.
    pub forcing_c: f64,
    /// `max ζ_m / m^{(1−γ)/α − 1}`.
    pub zeta_c: f64,
    /// `max η_m / m^{2(1−γ)/α − 2}`.
    pub eta_c: f64,
    /// Largest violation of the recursion with the fitted constants (≤ 0).
    pub recursion_slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwistReport {
    pub liminf_estimate: f64,
    pub trace: EvolutionTrace,
    pub blocks: Vec<BlockRecord>,
    pub fit: Option<RecursionFit>,
}

/// Parameters of [`twist_experiment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwistParams {
    pub k: C64,
    pub xi: f64,
    /// Decay exponent declared for the coupling.
    pub gamma: f64,
    /// Tail cutoff.
    pub d: f64,
    pub r_max: f64,
}

fn zeta_eta(lambda: f64, gamma: f64, a: f64, b: f64) -> (f64, f64) {
    const N: usize = 200;
    let h = (b - a) / N as f64;
    let lam = lambda.abs();
    let w = |rho: f64, s: f64| (-lam * (rho - s) / (rho * s)).exp();
    let zeta_vals: Vec<f64> = (0..=N)
        .map(|i| {
            let rho = a + h * i as f64;
            rho.powf(-gamma) * w(rho, a)
        })
        .collect();
    let outer: Vec<f64> = (0..=N)
        .map(|i| {
            let rho = a + h * i as f64;
            if i == 0 {
                return 0.0;
            }
            let hs = (rho - a) / N as f64;
            let inner: Vec<f64> = (0..=N)
                .map(|j| {
                    let s = a + hs * j as f64;
                    s.powf(-gamma) * w(rho, s)
                })
                .collect();
            rho.powf(-gamma) * simpson(&inner, hs)
        })
        .collect();
    (simpson(&zeta_vals, h), simpson(&outer, h))
}

fn fit_recursion(layout: &ModeLayout, gamma: f64, blocks: &[BlockRecord]) -> Option<RecursionFit> {
    if blocks.len() < 3 {
        return None;
    }
    let a = layout.alpha;
    let k1 = 1.0 - 1.0 / a;
    let forcing_exp = (1.0 - gamma) / a - 1.0;
    let mut damping_c = f64::INFINITY;
    for w in blocks.windows(2) {
        let m = w[0].m as f64;
        let lam = layout.lambdas[w[0].m].abs();
        let d = lam * (w[1].r_m - w[0].r_m) / (w[0].r_m * w[1].r_m);
        damping_c = damping_c.min(d / m.powf(k1));
    }
    let mut forcing_c: f64 = 0.0;
    for w in blocks.windows(2) {
        let m = w[0].m as f64;
        let excess = w[1].beta_norm - (-damping_c * m.powf(k1)).exp() * w[0].beta_norm;
        forcing_c = forcing_c.max(excess / m.powf(forcing_exp));
    }
    let mut slack = f64::NEG_INFINITY;
    for w in blocks.windows(2) {
        let m = w[0].m as f64;
        let bound = (-damping_c * m.powf(k1)).exp() * w[0].beta_norm + forcing_c * m.powf(forcing_exp);
        slack = slack.max(w[1].beta_norm - bound);
    }
    let zeta_c = blocks.iter().map(|b| b.zeta / (b.m as f64).powf(forcing_exp)).fold(0.0, f64::max);
    let eta_c = blocks
        .iter()
        .map(|b| b.eta / (b.m as f64).powf(2.0 * forcing_exp))
        .fold(0.0, f64::max);
    Some(RecursionFit {
        damping_c,
        forcing_c,
        zeta_c,
        eta_c,
        recursion_slack: slack,
    })
}

/// Evolves the constant function under the tail coupling `Ṽ_{(d)}` from
/// `r = 1` to `r_max` and records the block recursion at every threshold.
pub fn twist_experiment(
    layout: &ModeLayout,
    basis: ModeBasis,
    coupling: &CouplingMatrixFunction,
    p: TwistParams,
    opts: EvolutionOptions,
) -> Result<TwistReport> {
    if p.d < 1.0 {
        return Err(Error::Parameter(format!("tail cutoff d must be at least 1, got {}", p.d)));
    }
    if p.r_max < layout.thresholds[2.min(layout.b)] {
        return Err(Error::Parameter(format!(
            "r_max = {} lies below the second threshold {}",
            p.r_max, layout.thresholds[2.min(layout.b)]
        )));
    }
    let eta = ModeVector::constant(basis, layout.b);
    let k = Wavenumber::upper(p.k)?;
    let trace = evolve_u(layout, coupling, k, p.xi, 1.0, p.r_max, Variant::Tail { d: p.d }, &eta, opts)?;
    let last = trace.nodes[trace.nodes.len() - 1];
    let quarter = last - 0.25 * (last - 1.0);
    let liminf_estimate = trace
        .nodes
        .iter()
        .zip(&trace.norm)
        .filter(|(r, _)| **r >= quarter)
        .map(|(_, n)| *n)
        .fold(f64::INFINITY, f64::min);

    let mut blocks = Vec::new();
    for m in 1..layout.b {
        let (rm, rn) = (layout.thresholds[m], layout.thresholds[m + 1]);
        if rn > p.r_max {
            break;
        }
        let i = ode::locate(&trace.nodes, &[rm])[0];
        let (zeta, eta) = zeta_eta(layout.lambdas[m], p.gamma, rm, rn);
        blocks.push(BlockRecord {
            m,
            r_m: rm,
            alpha_norm: trace.norm_low[i],
            beta_norm: trace.norm_high[i],
            zeta,
            eta,
        });
    }
    let fit = fit_recursion(layout, p.gamma, &blocks);
    Ok(TwistReport {
        liminf_estimate,
        trace,
        blocks,
        fit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjointReport {
    /// `| ‖w(t)‖² + 2 Re κ ∫_t^{r_end} |⟨B₂w, w⟩|/s² ds − ‖η‖² |`.
    pub conservation_residual: f64,
    /// `∫_t^{r_end} ‖w′‖² ds`.
    pub tail_derivative_l2: f64,
    pub norm_at_t: f64,
    pub dissipated: f64,
}

/// Solves `w′ = −[κ̄B_{2,b}/ρ² − (ξ/2i)Ṽ]w` backward from `w(r_end) = η` to
/// `ρ = t` and evaluates both sides of the energy identity.
#[allow(clippy::too_many_arguments)]
pub fn adjoint_energy_identity(
    layout: &ModeLayout,
    coupling: &CouplingMatrixFunction,
    k: Wavenumber,
    xi: f64,
    eta: &ModeVector,
    t: f64,
    r_end: f64,
    opts: EvolutionOptions,
) -> Result<AdjointReport> {
    if !(t >= 1.0) || !(r_end > t) {
        return Err(Error::Parameter(format!("need 1 ≤ t < r_end, got t = {t}, r_end = {r_end}")));
    }
    if k.is_real() {
        return Err(Error::Parameter("the energy identity needs Im k > 0".into()));
    }
    if eta.b != layout.b {
        return Err(Error::Parameter("η and the layout have different cutoffs".into()));
    }
    eta.validate()?;
    coupling.check(eta.basis, layout.b)?;
    let extra: Vec<f64> = match coupling {
        CouplingMatrixFunction::Sampled(q) => vec![q.support_radius()],
        _ => Vec::new(),
    };
    let nodes = evolution_nodes(layout, r_end, t, opts.sample_step, &extra);
    let sys = ModeSystem::new(layout, eta.basis, coupling, Variant::Full, k.value(), xi, true, true);
    let mut y0 = eta.coefficients.clone();
    y0.extend([C64::new(0.0, 0.0); 2]);
    let states = ode::solve(&sys, &y0, &nodes, &Options::with_tol(opts.tol))?;
    let s = states.last().unwrap();
    let n = eta.coefficients.len();
    let norm_t = linalg::vec_norm(&s[..n]);
    let re_kappa = kappa(k.value()).re;
    let dissipated = 2.0 * re_kappa * s[n].re;
    let e2 = eta.norm().powi(2);
    Ok(AdjointReport {
        conservation_residual: (norm_t * norm_t + dissipated - e2).abs(),
        tail_derivative_l2: s[n + 1].re,
        norm_at_t: norm_t,
        dissipated,
    })
}

/// Both sides of the radial balance identity
/// `|J|² + (Im k/|k|²)∫|μ′|² = |k|⁻² Im[k ∫ φ ḡ e^{2 Im k r}]` for the reduced
/// problem `−φ″ + kξvφ − k²φ = g`, `φ(0) = 0`, with `μ = φe^{−ikr}` and
/// `J = lim μ`, together with the bound on `|J|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub lhs: f64,
    pub rhs: f64,
    /// `|lhs − rhs| / max(|lhs|, |rhs|)`.
    pub residual: f64,
    pub amplitude: f64,
    /// `(‖g‖‖g e^{2 Im k r}‖)^{1/2} / (√|k| Im k)`.
    pub bound: f64,
}

impl BalanceReport {
    pub fn bound_holds(&self) -> bool {
        self.amplitude <= self.bound * (1.0 + 1e-9)
    }

    pub fn bound_slack(&self) -> f64 {
        self.bound - self.amplitude
    }
}

/// Evaluates the balance identity on the potential grid. The source must be
/// sampled with the potential's step so all integrands share nodes.
pub fn radial_balance_identity(v: &PotentialGrid, g: &SourceVector, k: Wavenumber, xi: f64) -> Result<BalanceReport> {
    if v.dim() != 1 || g.dim() != 1 {
        return Err(Error::Parameter("the balance identity needs spherically symmetric (scalar) data".into()));
    }
    if v.samples().iter().any(|s| s[(0, 0)].im.abs() > crate::potential::HERMITIAN_TOL) {
        return Err(Error::Input("spherically symmetric potential must be real".into()));
    }
    if k.is_real() {
        return Err(Error::Parameter("the balance identity needs Im k > 0".into()));
    }
    let h = v.step();
    if (g.step() - h).abs() > 1e-12 * h {
        return Err(Error::Parameter(format!(
            "source step {} must equal the potential step {h}",
            g.step()
        )));
    }
    let kv = k.value();
    let coupling = kv * xi;
    let end = v.support_radius().max(g.delta());
    let nodes = span_nodes(h, 0.0, end);
    let n_int = nodes.len() - 1;
    if ((end / h).round() - n_int as f64).abs() > 0.5 {
        return Err(Error::Consistency("radial grid is not uniform".into()));
    }
    let one = linalg::identity(1);
    let zero = CMat::zeros(1, 1);
    let fwd = scattering::run_schrodinger(v, kv, coupling, &zero, &one, &nodes, Some((g, false)), ode::DEFAULT_TOL)?;
    let mut back_nodes = nodes.clone();
    back_nodes.reverse();
    let e = (I * kv * end).exp();
    let bwd = scattering::run_schrodinger(
        v,
        kv,
        coupling,
        &(&one * e),
        &(&one * (I * kv * e)),
        &back_nodes,
        Some((g, false)),
        ode::DEFAULT_TOL,
    )?;
    let last = nodes.len() - 1;
    let dj = |i: usize| (bwd.y[last - i][(0, 0)], bwd.yp[last - i][(0, 0)], -bwd.acc[last - i][0]);
    let w = dj(0).0;
    if w.norm() < 1e-300 {
        return Err(Error::Conditioning {
            what: "Wronskian".into(),
            cond: f64::INFINITY,
        });
    }
    let im_k = kv.im;
    let mut phi = Vec::with_capacity(nodes.len());
    let mut dphi = Vec::with_capacity(nodes.len());
    let mut mu_p2 = Vec::with_capacity(nodes.len());
    for (i, r) in nodes.iter().enumerate() {
        let (a, ap, c1) = (fwd.y[i][(0, 0)], fwd.yp[i][(0, 0)], fwd.acc[i][0]);
        let (d, dp, c2) = dj(i);
        let p = (d * c1 + a * c2) / w;
        let pp = (dp * c1 + ap * c2) / w;
        let mp = (pp - I * kv * p) * (-I * kv * r).exp();
        phi.push(p);
        dphi.push(pp);
        mu_p2.push(mp.norm_sqr());
    }
    let amplitude = fwd.acc[last][0] / w;

    // split the |μ′|² quadrature at source jumps and at the end of the source
    // source and radial nodes coincide up to δ
    let g_last = g.nodes().len() - 1;
    let jump_nodes: Vec<usize> = (1..=g_last.min(last)).filter(|&i| i == g_last || g.is_jump(i)).collect();
    let mut cuts = vec![0];
    cuts.extend(jump_nodes.into_iter().filter(|&i| i > 0 && i < last));
    cuts.push(last);
    cuts.dedup();
    let mut int_mu = 0.0;
    for seg in cuts.windows(2) {
        let wts = simpson_weights(seg[1] - seg[0], h);
        for (j, wj) in wts.iter().enumerate() {
            int_mu += wj * mu_p2[seg[0] + j];
        }
    }

    // ∫ φ ḡ e^{2 Im k r} cell by cell with the integrator's in-cell source and
    // cubic Hermite φ, so both sides see the same data.
    const GL: [(f64, f64); 3] = [(-0.774_596_669_241_483_4, 5.0 / 9.0), (0.0, 8.0 / 9.0), (0.774_596_669_241_483_4, 5.0 / 9.0)];
    let mut cross = C64::new(0.0, 0.0);
    let mut g2 = 0.0;
    let mut g2w = 0.0;
    let mut gv = [C64::new(0.0, 0.0)];
    for i in 0..last {
        let (a, b) = (nodes[i], nodes[i + 1]);
        if a >= g.delta() - 1e-12 * h {
            break;
        }
        let hc = b - a;
        let cell = Cell { lo: a, hi: b };
        for (x, wq) in GL {
            let t = 0.5 * (x + 1.0);
            let r = a + hc * t;
            let (h00, h10) = (2.0 * t * t * t - 3.0 * t * t + 1.0, t * t * t - 2.0 * t * t + t);
            let (h01, h11) = (-2.0 * t * t * t + 3.0 * t * t, t * t * t - t * t);
            let p = phi[i] * h00 + dphi[i] * (hc * h10) + phi[i + 1] * h01 + dphi[i + 1] * (hc * h11);
            g.value_in_cell(r, cell, &mut gv);
            let weight = (2.0 * im_k * r).exp();
            let wt = 0.5 * hc * wq;
            cross += p * gv[0].conj() * (weight * wt);
            g2 += wt * gv[0].norm_sqr();
            g2w += wt * gv[0].norm_sqr() * weight * weight;
        }
    }
    let k2 = kv.norm_sqr();
    let lhs = amplitude.norm_sqr() + im_k / k2 * int_mu;
    let rhs = (kv * cross).im / k2;
    let bound = (g2.sqrt() * g2w.sqrt()).sqrt() / (kv.norm().sqrt() * im_k);
    Ok(BalanceReport {
        lhs,
        rhs,
        residual: (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300),
        amplitude: amplitude.norm(),
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::{build_potential, GridSpec, PotentialSpec};
    use crate::scattering::SourceProfile;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn thresholds_match_closed_form() {
        let l = mode_layout(2.0 / 3.0, 5).unwrap();
        assert!((l.thresholds[1] - 2f64.powf(0.75)).abs() < 1e-12);
        assert!((l.thresholds[1] - 1.68179).abs() < 1e-5);
        let half = mode_layout(0.5, 3).unwrap();
        assert!((half.thresholds[2] - 6.0).abs() < 1e-12);
        assert_eq!(l.mode_dims, vec![1, 3, 5, 7, 9, 11]);
        assert!(mode_layout(1.0, 3).is_err());
        assert!(mode_layout(0.5, 0).is_err());
    }

    #[test]
    fn thresholds_monotone() {
        for a in [2.0 / 3.0, 0.5, DEFAULT_ALPHA] {
            let l = mode_layout(a, 50).unwrap();
            assert!(l.thresholds.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn bands_and_boundary_convention() {
        let l = mode_layout(DEFAULT_ALPHA, 8).unwrap();
        let s = split_multipliers(&l, ModeBasis::Full, 1.2);
        assert_eq!(s.m1.iter().filter(|x| **x).count(), 1);
        assert!(s.m1[0]);
        let at = split_multipliers(&l, ModeBasis::Full, l.thresholds[3]);
        let deg = ModeBasis::Full.degrees(8);
        for (i, &m) in deg.iter().enumerate() {
            assert_eq!(at.m1[i], m <= 3);
        }
        let before = split_multipliers(&l, ModeBasis::Full, l.thresholds[3] * (1.0 - 1e-12));
        assert!(deg.iter().enumerate().all(|(i, &m)| before.m1[i] == (m <= 2)));
        assert!((l.s(l.thresholds[3]) - 12f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn damped_generator_values() {
        let l = mode_layout(DEFAULT_ALPHA, 4).unwrap();
        let s = split_multipliers(&l, ModeBasis::Zonal, 2.0);
        assert_eq!(s.b2, vec![0.0, 0.0, -6.0, -12.0, -20.0]);
        assert_eq!(s.b1, vec![0.0, -2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cos_theta_coupling_is_a_legendre_recursion() {
        // zonal: cos θ P_m = ((m+1)P_{m+1} + m P_{m−1})/(2m+1) in the normalized basis
        for m in 0..10usize {
            let expect = (m + 1) as f64 / (((2 * m + 1) * (2 * m + 3)) as f64).sqrt();
            assert!((cos_theta_coupling(m, 0) - expect).abs() < 1e-15);
        }
        assert_eq!(cos_theta_coupling(3, 4), 0.0);
    }

    fn opts() -> EvolutionOptions {
        EvolutionOptions {
            sample_step: 0.25,
            tol: 1e-11,
        }
    }

    #[test]
    fn free_lowest_mode_is_constant() {
        let l = mode_layout(DEFAULT_ALPHA, 6).unwrap();
        let eta = ModeVector::constant(ModeBasis::Full, 6);
        let tr = evolve_u(
            &l,
            &CouplingMatrixFunction::Zero,
            Wavenumber::upper(c(0.0, 0.5)).unwrap(),
            -2.0,
            1.0,
            40.0,
            Variant::Full,
            &eta,
            opts(),
        )
        .unwrap();
        assert!(tr.norm.iter().all(|n| (n - 1.0).abs() < 1e-12));
    }

    #[test]
    fn single_high_mode_decays_in_closed_form() {
        let l = mode_layout(DEFAULT_ALPHA, 8).unwrap();
        // r ∈ [r_2, r_3): mode 5 lies in the damped band
        let (rho, r) = (l.thresholds[2], l.thresholds[3]);
        let k = c(1.0, 1.0);
        let eta = ModeVector::single(ModeBasis::Full, 8, 5, -2).unwrap();
        let tr = evolve_u(
            &l,
            &CouplingMatrixFunction::Zero,
            Wavenumber::upper(k).unwrap(),
            0.4,
            rho,
            r,
            Variant::Full,
            &eta,
            opts(),
        )
        .unwrap();
        let lam = l.lambdas[5];
        for (x, n) in tr.nodes.iter().zip(&tr.norm) {
            let exact = (kappa(k) * lam * (1.0 / rho - 1.0 / x)).exp().norm();
            assert!((n - exact).abs() < 1e-10, "r = {x}: {n} vs {exact}");
            // ‖U₂‖ ≤ exp[−|λ_m|(r − ρ)/(rρ)] at k = i/2 reduces to equality
        }
        let ki = c(0.0, 0.5);
        let tr = evolve_u(
            &l,
            &CouplingMatrixFunction::Zero,
            Wavenumber::upper(ki).unwrap(),
            -2.0,
            rho,
            r,
            Variant::Full,
            &eta,
            opts(),
        )
        .unwrap();
        for (x, n) in tr.nodes.iter().zip(&tr.norm) {
            let bound = (-lam.abs() * (x - rho) / (x * rho)).exp();
            assert!(*n <= bound + 1e-9);
        }
    }

    #[test]
    fn dissipative_parameters_are_non_expansive() {
        let l = mode_layout(DEFAULT_ALPHA, 10).unwrap();
        let v = CouplingMatrixFunction::AxialHarmonic {
            amplitude: 1.5,
            gamma: 0.9,
            omega: 2.0,
            phase: 0.3,
        };
        let mut eta = ModeVector::zeros(ModeBasis::Full, 10);
        for (i, z) in eta.coefficients.iter_mut().enumerate() {
            *z = c(((i * 7) % 5) as f64 - 2.0, ((i * 3) % 4) as f64 - 1.5) / (1.0 + i as f64);
        }
        let tr = evolve_u(
            &l,
            &v,
            Wavenumber::upper(c(0.0, 0.5)).unwrap(),
            -2.0,
            1.0,
            60.0,
            Variant::Full,
            &eta,
            opts(),
        )
        .unwrap();
        for w in tr.norm.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        assert!(tr.norm[0] - tr.norm.last().unwrap() > 1e-3);
    }

    #[test]
    fn zonal_basis_reproduces_full_basis_for_axial_data() {
        let l = mode_layout(DEFAULT_ALPHA, 6).unwrap();
        let v = CouplingMatrixFunction::AxialHarmonic {
            amplitude: 1.0,
            gamma: 0.95,
            omega: 1.0,
            phase: 0.0,
        };
        let k = Wavenumber::upper(c(0.3, 0.5)).unwrap();
        let run = |basis| {
            evolve_u(&l, &v, k, -1.2, 1.0, 30.0, Variant::Tail { d: 3.0 }, &ModeVector::constant(basis, 6), opts()).unwrap()
        };
        let (full, zonal) = (run(ModeBasis::Full), run(ModeBasis::Zonal));
        for (a, b) in full.norm.iter().zip(&zonal.norm) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn twist_without_potential() {
        let l = mode_layout(DEFAULT_ALPHA, 8).unwrap();
        let rep = twist_experiment(
            &l,
            ModeBasis::Zonal,
            &CouplingMatrixFunction::Zero,
            TwistParams {
                k: c(0.0, 0.5),
                xi: -2.0,
                gamma: 0.95,
                d: 5.0,
                r_max: 100.0,
            },
            EvolutionOptions::default(),
        )
        .unwrap();
        assert!((rep.liminf_estimate - 1.0).abs() < 1e-12);
        assert!(rep.blocks.iter().all(|b| b.beta_norm < 1e-14));
        let bad = twist_experiment(
            &l,
            ModeBasis::Zonal,
            &CouplingMatrixFunction::Zero,
            TwistParams {
                k: c(0.0, 0.5),
                xi: -2.0,
                gamma: 0.95,
                d: 5.0,
                r_max: 2.0,
            },
            EvolutionOptions::default(),
        );
        assert!(matches!(bad, Err(Error::Parameter(_))));
    }

    #[test]
    fn twist_blocks_and_fit() {
        let l = mode_layout(DEFAULT_ALPHA, 24).unwrap();
        let v = CouplingMatrixFunction::AxialHarmonic {
            amplitude: 1.0,
            gamma: 0.95,
            omega: 1.0,
            phase: 0.0,
        };
        let rep = twist_experiment(
            &l,
            ModeBasis::Zonal,
            &v,
            TwistParams {
                k: c(0.0, 0.5),
                xi: -2.0,
                gamma: 0.95,
                d: 5.0,
                r_max: 150.0,
            },
            EvolutionOptions::default(),
        )
        .unwrap();
        let fit = rep.fit.unwrap();
        assert!(fit.damping_c > 0.0 && fit.damping_c.is_finite());
        assert!(fit.recursion_slack <= 1e-12, "{fit:?}");
        for b in &rep.blocks {
            let total = (b.alpha_norm.powi(2) + b.beta_norm.powi(2)).sqrt();
            let i = ode::locate(&rep.trace.nodes, &[b.r_m])[0];
            assert!((total - rep.trace.norm[i]).abs() < 1e-12);
            assert!(b.zeta > 0.0 && b.eta > 0.0);
        }
        assert!(rep.liminf_estimate > 0.0 && rep.liminf_estimate <= 1.0);
    }

    #[test]
    fn zeta_eta_quadrature() {
        // λ = 0, γ = 0: ζ = b − a, η = (b − a)²/2
        let (z, e) = zeta_eta(0.0, 0.0, 2.0, 5.0);
        assert!((z - 3.0).abs() < 1e-12 && (e - 4.5).abs() < 1e-10);
    }

    #[test]
    fn adjoint_free_lowest_mode() {
        let l = mode_layout(DEFAULT_ALPHA, 5).unwrap();
        let eta = ModeVector::constant(ModeBasis::Full, 5);
        let rep = adjoint_energy_identity(
            &l,
            &CouplingMatrixFunction::Zero,
            Wavenumber::upper(c(0.0, 0.5)).unwrap(),
            -2.0,
            &eta,
            1.0,
            30.0,
            opts(),
        )
        .unwrap();
        assert!(rep.conservation_residual < 1e-10);
        assert!(rep.tail_derivative_l2 == 0.0);
    }

    fn random_tail(b: usize, seed: u64, radius: f64) -> CouplingMatrixFunction {
        let dim = ModeBasis::Full.dim(b);
        CouplingMatrixFunction::Sampled(
            build_potential(
                &PotentialSpec::RandomHermitian {
                    dim,
                    seed,
                    amplitude: 1.0,
                    knot_spacing: 1.0,
                    envelope: Envelope::Power { p: 0.8 },
                },
                GridSpec {
                    step: 0.05,
                    support_radius: radius,
                    r_max: radius,
                },
            )
            .unwrap(),
        )
    }

    #[test]
    fn adjoint_random_tail_conserves_energy() {
        let b = 4;
        let l = mode_layout(DEFAULT_ALPHA, b).unwrap();
        let v = random_tail(b, 17, 30.0);
        let mut eta = ModeVector::zeros(ModeBasis::Full, b);
        for (i, z) in eta.coefficients.iter_mut().enumerate() {
            *z = c(1.0 / (1.0 + i as f64), (i % 3) as f64 * 0.2);
        }
        let mut tails = Vec::new();
        for t in [10.0, 20.0, 40.0] {
            let rep = adjoint_energy_identity(&l, &v, Wavenumber::upper(c(0.0, 0.5)).unwrap(), -2.0, &eta, t, 60.0, opts()).unwrap();
            assert!(rep.conservation_residual <= 1e-6, "t = {t}: {rep:?}");
            tails.push(rep.tail_derivative_l2);
        }
        assert!(tails[0] > tails[1] && tails[1] > tails[2]);
        let gen = adjoint_energy_identity(&l, &v, Wavenumber::upper(c(0.7, 0.4)).unwrap(), 0.8, &eta, 2.0, 40.0, opts()).unwrap();
        assert!(gen.conservation_residual <= 1e-6, "{gen:?}");
    }

    fn scalar(f: impl Fn(f64) -> f64 + Send + Sync + 'static, radius: f64, step: f64) -> PotentialGrid {
        build_potential(
            &PotentialSpec::ClosedForm {
                dim: 1,
                f: Arc::new(move |r| CMat::from_element(1, 1, C64::new(f(r), 0.0))),
            },
            GridSpec {
                step,
                support_radius: radius,
                r_max: radius,
            },
        )
        .unwrap()
    }

    #[test]
    fn balance_identity_free() {
        let h = 1e-3;
        let v = scalar(|_| 0.0, 1.0, h);
        let g = SourceVector::new(1, 1.0, h, &SourceProfile::Indicator).unwrap();
        let rep = radial_balance_identity(&v, &g, Wavenumber::upper(c(1.0, 1.0)).unwrap(), 0.5).unwrap();
        assert!(rep.residual <= 1e-8, "{rep:?}");
        // free amplitude: J = ∫ sin(kr)/k dr = (1 − cos k)/k²
        let k = c(1.0, 1.0);
        let exact = ((1.0 - k.cos()) / (k * k)).norm();
        assert!((rep.amplitude - exact).abs() < 1e-9);
        assert!(rep.bound_holds());
    }

    #[test]
    fn balance_identity_decaying_potential() {
        let h = 2e-3;
        let v = scalar(|r| (1.0 + r).powi(-2), 6.0, h);
        let g = SourceVector::new(1, 1.0, h, &SourceProfile::Bump).unwrap();
        let rep = radial_balance_identity(&v, &g, Wavenumber::upper(c(1.0, 1.0)).unwrap(), 0.7).unwrap();
        assert!(rep.residual <= 1e-6, "{rep:?}");
        assert!(rep.bound_holds(), "{rep:?}");
    }

    #[test]
    fn balance_identity_rejects_bad_input() {
        let v = scalar(|_| 0.0, 1.0, 1e-2);
        let g = SourceVector::new(1, 1.0, 2e-2, &SourceProfile::Indicator).unwrap();
        let k = Wavenumber::upper(c(1.0, 1.0)).unwrap();
        assert!(matches!(radial_balance_identity(&v, &g, k, 0.5), Err(Error::Parameter(_))));
        let v2 = build_potential(&PotentialSpec::Zero { dim: 2 }, GridSpec::with_default_step(1.0)).unwrap();
        let g2 = SourceVector::new(2, 1.0, 1e-3, &SourceProfile::Indicator).unwrap();
        assert!(matches!(radial_balance_identity(&v2, &g2, k, 0.5), Err(Error::Parameter(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn multipliers_partition_unity(r in 1.0f64..500.0, alpha in 0.3f64..0.95) {
            let l = mode_layout(alpha, 12).unwrap();
            let s = split_multipliers(&l, ModeBasis::Full, r);
            prop_assert!(s.m1.iter().zip(&s.m2).all(|(a, b)| a ^ b));
            prop_assert!(s.b2.iter().all(|x| *x <= 0.0) && s.b1.iter().all(|x| *x <= 0.0));
            let band = l.band(r);
            prop_assert!(l.thresholds[band] <= r);
            prop_assert!(band == l.b || r < l.thresholds[band + 1]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn balance_bound_on_k_grid(re in -2.0f64..2.0, im in 0.3f64..2.0, xi in -1.0f64..1.0) {
            let h = 5e-3;
            let v = scalar(|r| (1.0 + r).powi(-2), 3.0, h);
            let g = SourceVector::new(1, 1.0, h, &SourceProfile::Bump).unwrap();
            let rep = radial_balance_identity(&v, &g, Wavenumber::upper(c(re, im)).unwrap(), xi).unwrap();
            prop_assert!(rep.residual <= 1e-6);
            prop_assert!(rep.bound_holds());
        }
    }
}
