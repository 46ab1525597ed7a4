//! Half-line scattering objects: regular and Jost solutions, the pencil Jost
//! function `D(0, k, ξ)` through the stabilized `S₁/S₂` system, the
//! transform `F̂`, scattering coefficients, the Herglotz function and the
//! Green-function solution.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, C64, I};
use crate::ode::{self, merge_nodes, span_nodes, Block, Cell, MatrixOde, Options, SolutionTrajectory, System, Wavenumber};
use crate::potential::{norms, PotentialGrid};
use crate::quad::simpson_weights;

/// Source profile placed in the first component of the source vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceProfile {
    /// Constant on `[0, δ]`.
    Indicator,
    /// `sin²(π r / δ)`.
    Bump,
    /// `values[j]` on `[breaks[j-1], breaks[j])`, with `breaks` interior to `(0, δ)`.
    Piecewise { breaks: Vec<f64>, values: Vec<f64> },
}

/// Unit-norm vector source supported on `[0, δ]`, sampled on a uniform grid.
///
/// `left` holds left limits at interior jump nodes; quadrature splits there.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceVector {
    dim: usize,
    delta: f64,
    step: f64,
    values: Vec<Vec<C64>>,
    left: Vec<Option<Vec<C64>>>,
}

impl SourceVector {
    /// Samples `profile` into the first of `dim` components on a grid of
    /// `round(δ / step)` intervals, then normalizes to unit `L²` norm.
    pub fn new(dim: usize, delta: f64, step: f64, profile: &SourceProfile) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("source dimension must be positive".into()));
        }
        if !(delta > 0.0) || !(step > 0.0) || step > delta {
            return Err(Error::Parameter(format!("need 0 < step ≤ δ, got step = {step}, δ = {delta}")));
        }
        let n_int = ((delta / step).round() as usize).max(2);
        let h = delta / n_int as f64;
        let zero = vec![C64::new(0.0, 0.0); dim];
        let mut values = vec![zero.clone(); n_int + 1];
        let mut left: Vec<Option<Vec<C64>>> = vec![None; n_int + 1];
        let put = |v: &mut Vec<C64>, x: f64| v[0] = C64::new(x, 0.0);
        match profile {
            SourceProfile::Indicator => {
                for v in values.iter_mut() {
                    put(v, 1.0);
                }
            }
            SourceProfile::Bump => {
                for (i, v) in values.iter_mut().enumerate() {
                    let s = (std::f64::consts::PI * i as f64 / n_int as f64).sin();
                    put(v, s * s);
                }
            }
            SourceProfile::Piecewise { breaks, values: vals } => {
                if vals.len() != breaks.len() + 1 {
                    return Err(Error::Parameter("piecewise source needs one more value than breaks".into()));
                }
                let mut idx = Vec::with_capacity(breaks.len());
                for b in breaks {
                    let p = (b / h).round() as usize;
                    if p == 0 || p >= n_int || idx.last().is_some_and(|&l| l >= p) {
                        return Err(Error::Parameter(format!("break {b} must lie strictly inside (0, δ) and increase")));
                    }
                    idx.push(p);
                }
                let mut piece = 0;
                for (i, v) in values.iter_mut().enumerate() {
                    if piece < idx.len() && i == idx[piece] {
                        let mut l = zero.clone();
                        put(&mut l, vals[piece]);
                        left[i] = Some(l);
                        piece += 1;
                    }
                    put(v, vals[piece]);
                }
            }
        }
        let mut f = SourceVector {
            dim,
            delta,
            step: h,
            values,
            left,
        };
        let nrm = f.norm();
        if !(nrm > 0.0) {
            return Err(Error::Parameter("source profile vanishes identically".into()));
        }
        let s = 1.0 / nrm;
        for v in f.values.iter_mut().chain(f.left.iter_mut().flatten()) {
            v.iter_mut().for_each(|z| *z *= s);
        }
        Ok(f)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.values.len()).map(|i| self.node(i)).collect()
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.values.len() {
            self.delta
        } else {
            i as f64 * self.step
        }
    }

    pub fn value(&self, i: usize) -> &[C64] {
        &self.values[i]
    }

    /// Whether node `i` carries a jump.
    pub fn is_jump(&self, i: usize) -> bool {
        self.left[i].is_some()
    }

    /// Quadrature terms `(node, weight, f-value)` with `∫ g f ≈ Σ w g(node) f`
    /// for `g` smooth; Simpson on each segment between jumps.
    pub fn weighted_terms(&self) -> Vec<(usize, f64, &[C64])> {
        let last = self.values.len() - 1;
        let mut breaks = vec![0];
        breaks.extend((1..last).filter(|&i| self.left[i].is_some()));
        breaks.push(last);
        let mut out = Vec::with_capacity(self.values.len() + breaks.len());
        for seg in breaks.windows(2) {
            let (s, e) = (seg[0], seg[1]);
            let w = simpson_weights(e - s, self.step);
            for (j, wj) in w.iter().enumerate() {
                let i = s + j;
                let v: &[C64] = if i == e && e != last {
                    self.left[e].as_deref().unwrap()
                } else {
                    &self.values[i]
                };
                out.push((i, *wj, v));
            }
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.weighted_terms()
            .iter()
            .map(|(_, w, v)| w * v.iter().map(|z| z.norm_sqr()).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Value at `r` inside the ODE cell `cell`: linear between the right value
    /// at the cell's left source node and the left limit at its right node.
    pub fn value_in_cell(&self, r: f64, cell: Cell, out: &mut [C64]) {
        let mid = cell.mid();
        if mid > self.delta {
            out.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
            return;
        }
        let last = self.values.len() - 1;
        let j = ((mid / self.step).floor() as usize).min(last - 1);
        let a = &self.values[j];
        let b = self.left[j + 1].as_deref().unwrap_or(&self.values[j + 1]);
        let w = ((r - self.node(j)) / (self.node(j + 1) - self.node(j))).clamp(0.0, 1.0);
        for c in 0..self.dim {
            out[c] = a[c] * (1.0 - w) + b[c] * w;
        }
    }
}

/// Boundary data of the pencil Jost function.
#[derive(Debug, Clone, PartialEq)]
pub struct JostData {
    pub k: Wavenumber,
    pub xi: f64,
    pub d0: CMat,
    pub d0prime: CMat,
    /// `exp(ξ²‖Q‖₂²/(8 Im k)) (1 + |ξ|‖Q‖₂/(2√(2 Im k)))`; infinite on the real axis.
    pub gronwall_bound: f64,
    pub cond_d0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatteringPair {
    pub a_frak: CMat,
    pub b_frak: CMat,
}

impl ScatteringPair {
    /// `‖𝔄*𝔄 − 𝔅*𝔅 − I‖`.
    pub fn unitarity_defect(&self) -> f64 {
        let n = self.a_frak.nrows();
        linalg::op_norm(&(linalg::abs2(&self.a_frak) - linalg::abs2(&self.b_frak) - linalg::identity(n)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HerglotzValue {
    pub g: CMat,
    /// Smallest eigenvalue of `(G − G*)/2i`.
    pub min_im_eigenvalue: f64,
}

/// Absolute error floor for blocks that start at zero next to an O(1) block.
/// When `Q` vanishes at the start node they grow like `h²` and interpolation
/// round-off keeps a purely relative test from ever accepting a step.
const ZERO_START_ATOL: f64 = 1e-22;

/// `Y″ = (c Q − k²) Y` on an `n × n` state, with an optional accumulator
/// `acc′ = Y^H F` (or `Yᵀ F` when `conj` is false).
struct SchrodingerSystem<'a> {
    q: &'a PotentialGrid,
    n: usize,
    coupling: C64,
    k2: C64,
    source: Option<&'a SourceVector>,
    conj: bool,
    scratch: RefCell<(Vec<C64>, Vec<C64>, Vec<C64>)>,
}

impl<'a> SchrodingerSystem<'a> {
    fn new(q: &'a PotentialGrid, k: C64, coupling: C64, source: Option<&'a SourceVector>, conj: bool) -> Self {
        let n = q.dim();
        SchrodingerSystem {
            q,
            n,
            coupling,
            k2: k * k,
            source,
            conj,
            scratch: RefCell::new((
                vec![C64::new(0.0, 0.0); n * n],
                vec![C64::new(0.0, 0.0); n * n],
                vec![C64::new(0.0, 0.0); n],
            )),
        }
    }
}

impl System for SchrodingerSystem<'_> {
    fn len(&self) -> usize {
        2 * self.n * self.n + if self.source.is_some() { self.n } else { 0 }
    }

    fn rhs(&self, r: f64, cell: Cell, y: &[C64], dy: &mut [C64]) -> Result<()> {
        let n = self.n;
        let n2 = n * n;
        let mut guard = self.scratch.borrow_mut();
        let (qv, qy, fv) = &mut *guard;
        self.q.interp_into(r.clamp(cell.lo, cell.hi), qv);
        let (yv, yp) = (&y[..n2], &y[n2..2 * n2]);
        dy[..n2].copy_from_slice(yp);
        linalg::gemm_into(qv, n, n, yv, n, qy);
        for j in 0..n2 {
            dy[n2 + j] = qy[j] * self.coupling - yv[j] * self.k2;
        }
        if let Some(f) = self.source {
            f.value_in_cell(r, cell, fv);
            for i in 0..n {
                let mut s = C64::new(0.0, 0.0);
                for j in 0..n {
                    // entry (j, i) of Y, i.e. row i of Y^H / Y^T
                    let yji = yv[i * n + j];
                    s += if self.conj { yji.conj() } else { yji } * fv[j];
                }
                dy[2 * n2 + i] = s;
            }
        }
        Ok(())
    }

    fn blocks(&self) -> Vec<Block> {
        let n2 = self.n * self.n;
        let mut b = vec![Block::new(0..2 * n2)];
        if self.source.is_some() {
            b.push(Block::with_atol(2 * n2..2 * n2 + self.n, ZERO_START_ATOL));
        }
        b
    }
}

/// Raw output of a Schrödinger integration: value, derivative and accumulator
/// at each node.
pub(crate) struct SchrodingerRun {
    pub nodes: Vec<f64>,
    pub y: Vec<CMat>,
    pub yp: Vec<CMat>,
    pub acc: Vec<Vec<C64>>,
}

pub(crate) fn run_schrodinger(
    q: &PotentialGrid,
    k: C64,
    coupling: C64,
    y0: &CMat,
    yp0: &CMat,
    nodes: &[f64],
    source: Option<(&SourceVector, bool)>,
    tol: f64,
) -> Result<SchrodingerRun> {
    let n = q.dim();
    let sys = SchrodingerSystem::new(q, k, coupling, source.map(|s| s.0), source.is_some_and(|s| s.1));
    let mut init = Vec::with_capacity(sys.len());
    init.extend_from_slice(y0.as_slice());
    init.extend_from_slice(yp0.as_slice());
    if source.is_some() {
        init.extend(std::iter::repeat_n(C64::new(0.0, 0.0), n));
    }
    let n2 = n * n;
    let mut out = SchrodingerRun {
        nodes: nodes.to_vec(),
        y: Vec::with_capacity(nodes.len()),
        yp: Vec::with_capacity(nodes.len()),
        acc: Vec::new(),
    };
    ode::solve_observe(&sys, &init, nodes, &Options::with_tol(tol), |_, s| {
        out.y.push(CMat::from_column_slice(n, n, &s[..n2]));
        out.yp.push(CMat::from_column_slice(n, n, &s[n2..2 * n2]));
        if source.is_some() {
            out.acc.push(s[2 * n2..].to_vec());
        }
        Ok(())
    })?;
    Ok(out)
}

pub(crate) fn regular_on(q: &PotentialGrid, k: C64, coupling: C64, nodes: &[f64], tol: f64) -> Result<SchrodingerRun> {
    let n = q.dim();
    run_schrodinger(q, k, coupling, &CMat::zeros(n, n), &linalg::identity(n), nodes, None, tol)
}

pub(crate) fn jost_on(q: &PotentialGrid, k: C64, coupling: C64, nodes_desc: &[f64], tol: f64) -> Result<SchrodingerRun> {
    let n = q.dim();
    let r0 = nodes_desc[0];
    let e = (I * k * r0).exp();
    run_schrodinger(
        q,
        k,
        coupling,
        &(linalg::identity(n) * e),
        &(linalg::identity(n) * (I * k * e)),
        nodes_desc,
        None,
        tol,
    )
}

fn to_trajectory(run: SchrodingerRun, reverse: bool) -> SolutionTrajectory {
    let mut t = SolutionTrajectory {
        nodes: run.nodes,
        values: run.y,
        derivs: run.yp,
    };
    if reverse {
        t.nodes.reverse();
        t.values.reverse();
        t.derivs.reverse();
    }
    t
}

/// Regular solution `α(r, k, t)`: `−α″ + tQα = k²α`, `α(0) = 0`, `α′(0) = I`,
/// on the grid nodes of `[0, R]`.
pub fn regular_solution(q: &PotentialGrid, k: Wavenumber, t: f64) -> Result<SolutionTrajectory> {
    let nodes = q.support_nodes();
    Ok(to_trajectory(
        regular_on(q, k.value(), C64::new(t, 0.0), &nodes, ode::DEFAULT_TOL)?,
        false,
    ))
}

/// Jost solution `J(r, k, t)` with `J = e^{ikr}` for `r ≥ R`, integrated back
/// from `R`; nodes returned in increasing order.
pub fn jost_solution(q: &PotentialGrid, k: Wavenumber, t: f64) -> Result<SolutionTrajectory> {
    let mut nodes = q.support_nodes();
    nodes.reverse();
    Ok(to_trajectory(
        jost_on(q, k.value(), C64::new(t, 0.0), &nodes, ode::DEFAULT_TOL)?,
        true,
    ))
}

/// `J(0)` and `J′(0)` for a complex coupling.
pub(crate) fn jost_at_zero(q: &PotentialGrid, k: C64, coupling: C64, tol: f64) -> Result<(CMat, CMat)> {
    let mut nodes = q.support_nodes();
    nodes.reverse();
    let run = jost_on(q, k, coupling, &nodes, tol)?;
    let last = run.y.len() - 1;
    Ok((run.y[last].clone(), run.yp[last].clone()))
}

/// `sup_r ‖W(r) − W(0)‖` for `W = (J*)′α − J*α′` at real `k` and `t`.
pub fn wronskian_defect(q: &PotentialGrid, k: Wavenumber, t: f64) -> Result<f64> {
    if !k.is_real() {
        return Err(Error::Parameter("Wronskian check needs real k".into()));
    }
    let a = regular_solution(q, k, t)?;
    let j = jost_solution(q, k, t)?;
    let w = |i: usize| j.derivs[i].adjoint() * &a.values[i] - j.values[i].adjoint() * &a.derivs[i];
    let w0 = w(0);
    Ok((0..a.len()).map(|i| linalg::op_norm(&(w(i) - &w0))).fold(0.0, f64::max))
}

/// Backward `S₁/S₂` system together with the ordered exponentials and the
/// accumulated `∫ e^{4 Im k r} S₂* S₂`.
struct PencilSystem<'a> {
    q: &'a PotentialGrid,
    n: usize,
    k: C64,
    half_xi: C64,
    scratch: RefCell<[Vec<C64>; 4]>,
}

impl System for PencilSystem<'_> {
    fn len(&self) -> usize {
        5 * self.n * self.n
    }

    fn rhs(&self, r: f64, cell: Cell, y: &[C64], dy: &mut [C64]) -> Result<()> {
        let n = self.n;
        let n2 = n * n;
        let mut g = self.scratch.borrow_mut();
        let [qv, t1, a, t2] = &mut *g;
        self.q.interp_into(r.clamp(cell.lo, cell.hi), qv);
        let (u1, u2, s1, s2) = (&y[..n2], &y[n2..2 * n2], &y[2 * n2..3 * n2], &y[3 * n2..4 * n2]);
        // U₁′ = −(iξ/2) Q U₁, U₂′ = (iξ/2) Q U₂
        linalg::gemm_into(qv, n, n, u1, n, t1);
        for j in 0..n2 {
            dy[j] = -self.half_xi * t1[j];
        }
        linalg::gemm_into(qv, n, n, u2, n, t1);
        for j in 0..n2 {
            dy[n2 + j] = self.half_xi * t1[j];
        }
        // A = −(iξ/2) U₂* Q U₁ ; t1 currently holds Q U₂, recompute Q U₁.
        linalg::gemm_into(qv, n, n, u1, n, t1);
        for c in 0..n {
            for rr in 0..n {
                let mut s = C64::new(0.0, 0.0);
                for p in 0..n {
                    s += u2[rr * n + p].conj() * t1[c * n + p];
                }
                a[c * n + rr] = -self.half_xi * s;
            }
        }
        let ep = (2.0 * I * self.k * r).exp();
        let em = (-2.0 * I * self.k * r).exp();
        // S₁′ = −A* e^{−2ikr} S₂
        for c in 0..n {
            for rr in 0..n {
                let mut s = C64::new(0.0, 0.0);
                for p in 0..n {
                    s += a[rr * n + p].conj() * s2[c * n + p];
                }
                dy[2 * n2 + c * n + rr] = -em * s;
            }
        }
        // S₂′ = −A e^{2ikr} S₁
        linalg::gemm_into(a, n, n, s1, n, t2);
        for j in 0..n2 {
            dy[3 * n2 + j] = -ep * t2[j];
        }
        // p′ = 4|k|² |e^{−2ikr}|² S₂* S₂
        let w = 4.0 * self.k.norm_sqr() * em.norm_sqr();
        for c in 0..n {
            for rr in 0..n {
                let mut s = C64::new(0.0, 0.0);
                for p in 0..n {
                    s += s2[rr * n + p].conj() * s2[c * n + p];
                }
                dy[4 * n2 + c * n + rr] = s * w;
            }
        }
        Ok(())
    }

    fn blocks(&self) -> Vec<Block> {
        let n2 = self.n * self.n;
        vec![
            Block::new(0..2 * n2),
            Block::new(2 * n2..3 * n2),
            Block::with_atol(3 * n2..4 * n2, ZERO_START_ATOL),
            Block::with_atol(4 * n2..5 * n2, ZERO_START_ATOL * ZERO_START_ATOL * 1e12),
        ]
    }
}

/// Full pencil computation on the support nodes.
pub(crate) struct PencilRun {
    pub d0: CMat,
    pub d0prime: CMat,
    /// `μ′(r)` at each node.
    pub mu_prime: Vec<CMat>,
    /// `∫₀^R μ′*μ′` accumulated by the integrator.
    pub mu_prime_gram_ode: CMat,
}

pub(crate) fn pencil_run(q: &PotentialGrid, k: C64, xi: f64, tol: f64) -> Result<PencilRun> {
    let n = q.dim();
    let n2 = n * n;
    let half_xi = C64::new(0.0, xi / 2.0);
    let support = q.support_nodes();

    // U₁(0, R), U₂(0, R)
    let stacked = MatrixOde::new(2 * n, n, |r: f64, cell: Cell, out: &mut [C64]| {
        let mut qv = vec![C64::new(0.0, 0.0); n2];
        q.interp_into(r.clamp(cell.lo, cell.hi), &mut qv);
        out.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        for c in 0..n {
            for rr in 0..n {
                out[c * 2 * n + rr] = -half_xi * qv[c * n + rr];
                out[(n + c) * 2 * n + n + rr] = half_xi * qv[c * n + rr];
            }
        }
        Ok(())
    });
    let mut init = CMat::zeros(2 * n, n);
    init.view_mut((0, 0), (n, n)).copy_from(&linalg::identity(n));
    init.view_mut((n, 0), (n, n)).copy_from(&linalg::identity(n));
    let fwd = ode::solve(&stacked, init.as_slice(), &support, &Options::with_tol(tol))?;
    let ur = CMat::from_column_slice(2 * n, n, fwd.last().unwrap());
    let u1r = ur.view((0, 0), (n, n)).into_owned();
    let u2r = ur.view((n, 0), (n, n)).into_owned();
    let (w, _) = linalg::checked_inverse(&u1r, "U₁(0, R)")?;

    let sys = PencilSystem {
        q,
        n,
        k,
        half_xi,
        scratch: RefCell::new([
            vec![C64::new(0.0, 0.0); n2],
            vec![C64::new(0.0, 0.0); n2],
            vec![C64::new(0.0, 0.0); n2],
            vec![C64::new(0.0, 0.0); n2],
        ]),
    };
    let mut y0 = Vec::with_capacity(5 * n2);
    y0.extend_from_slice(u1r.as_slice());
    y0.extend_from_slice(u2r.as_slice());
    y0.extend_from_slice(linalg::identity(n).as_slice());
    y0.extend(std::iter::repeat_n(C64::new(0.0, 0.0), 2 * n2));
    let mut nodes = support.clone();
    nodes.reverse();
    let mut mu_prime = Vec::with_capacity(nodes.len());
    let mut last_state = Vec::new();
    ode::solve_observe(&sys, &y0, &nodes, &Options::with_tol(tol), |i, s| {
        let r = nodes[i];
        let u2 = CMat::from_column_slice(n, n, &s[n2..2 * n2]);
        let s2 = CMat::from_column_slice(n, n, &s[3 * n2..4 * n2]);
        let em = (-2.0 * I * k * r).exp();
        mu_prime.push(u2 * s2 * &w * (-2.0 * I * k * em));
        if i + 1 == nodes.len() {
            last_state = s.to_vec();
        }
        Ok(())
    })?;
    mu_prime.reverse();
    let s = &last_state;
    let u1 = CMat::from_column_slice(n, n, &s[..n2]);
    let u2 = CMat::from_column_slice(n, n, &s[n2..2 * n2]);
    let s1 = CMat::from_column_slice(n, n, &s[2 * n2..3 * n2]);
    let s2 = CMat::from_column_slice(n, n, &s[3 * n2..4 * n2]);
    let p = CMat::from_column_slice(n, n, &s[4 * n2..5 * n2]);
    let d0 = (&u1 * &s1 + &u2 * &s2) * &w;
    let d0prime = (&u1 * &s1 - &u2 * &s2) * &w * (I * k);
    let gram = -(w.adjoint() * p * &w);
    Ok(PencilRun {
        d0,
        d0prime,
        mu_prime,
        mu_prime_gram_ode: gram,
    })
}

fn gronwall_bound(q: &PotentialGrid, k: C64, xi: f64) -> f64 {
    if k.im <= 0.0 {
        return f64::INFINITY;
    }
    let l2 = norms(q).l2;
    (xi * xi * l2 / (8.0 * k.im)).exp() * (1.0 + xi.abs() * l2.sqrt() / (2.0 * (2.0 * k.im).sqrt()))
}

/// Pencil Jost function `D(0, k, ξ)`, `D′(0, k, ξ)` for `−D″ + kξQD = k²D`.
pub fn pencil_jost(q: &PotentialGrid, k: Wavenumber, xi: f64) -> Result<JostData> {
    pencil_jost_tol(q, k, xi, ode::DEFAULT_TOL)
}

pub fn pencil_jost_tol(q: &PotentialGrid, k: Wavenumber, xi: f64, tol: f64) -> Result<JostData> {
    let kv = k.value();
    let run = pencil_run(q, kv, xi, tol)?;
    let bound = gronwall_bound(q, kv, xi);
    let nd = linalg::op_norm(&run.d0);
    if !k.is_real() && nd > bound * (1.0 + 1e-9) {
        return Err(Error::Consistency(format!(
            "‖D(0)‖ = {nd} exceeds the Gronwall bound {bound} at k = {kv}, ξ = {xi}"
        )));
    }
    Ok(JostData {
        k,
        xi,
        cond_d0: linalg::condition_number(&run.d0),
        d0: run.d0,
        d0prime: run.d0prime,
        gronwall_bound: bound,
    })
}

/// `G(k) = D′(0)D⁻¹(0)/k` with the smallest eigenvalue of its imaginary part.
pub fn herglotz_g(q: &PotentialGrid, k: Wavenumber, xi: f64) -> Result<HerglotzValue> {
    if k.is_real() {
        return Err(Error::Parameter("Herglotz function is evaluated for Im k > 0".into()));
    }
    let jd = pencil_jost(q, k, xi)?;
    let (dinv, _) = linalg::checked_inverse(&jd.d0, "D(0, k, ξ)")?;
    let g = &jd.d0prime * dinv / k.value();
    let min_im_eigenvalue = linalg::hermitian_eigenvalues(&linalg::im_part(&g))[0];
    Ok(HerglotzValue { g, min_im_eigenvalue })
}

/// Residual detail of the Weyl-type identity.
#[derive(Debug, Clone, PartialEq)]
pub struct WeylIdentity {
    /// Residual with `∫|μ′|²` from Simpson quadrature over the support grid.
    pub residual_simpson: f64,
    /// Residual with `∫|μ′|²` accumulated inside the integrator.
    pub residual_ode: f64,
    pub mu_prime_gram: CMat,
}

impl WeylIdentity {
    /// Simpson residual, falling back to the integrator quadrature when the
    /// Simpson value exceeds `1e-6`.
    pub fn residual(&self) -> f64 {
        if self.residual_simpson <= 1e-6 {
            self.residual_simpson
        } else {
            self.residual_simpson.min(self.residual_ode)
        }
    }
}

pub fn weyl_identity(q: &PotentialGrid, k: Wavenumber, xi: f64) -> Result<WeylIdentity> {
    if k.is_real() {
        return Err(Error::Parameter("Weyl identity is evaluated for Im k > 0".into()));
    }
    let kv = k.value();
    let run = pencil_run(q, kv, xi, ode::DEFAULT_TOL)?;
    let (dinv, _) = linalg::checked_inverse(&run.d0, "D(0, k, ξ)")?;
    let n = q.dim();
    let vals: Vec<CMat> = run.mu_prime.iter().map(linalg::abs2).collect();
    let w = simpson_weights(vals.len() - 1, q.step());
    let mut simpson = CMat::zeros(n, n);
    for (v, wi) in vals.iter().zip(&w) {
        simpson += v * C64::new(*wi, 0.0);
    }
    let rhs = linalg::im_part(&(&run.d0prime * &dinv / kv));
    let c = kv.im / kv.norm_sqr();
    let lhs = |gram: &CMat| linalg::abs2(&dinv) + dinv.adjoint() * (gram * C64::new(c, 0.0)) * &dinv;
    let residual_simpson = linalg::op_norm(&(lhs(&simpson) - &rhs));
    let residual_ode = linalg::op_norm(&(lhs(&run.mu_prime_gram_ode) - &rhs));
    Ok(WeylIdentity {
        residual_simpson,
        residual_ode,
        mu_prime_gram: simpson,
    })
}

pub fn weyl_identity_residual(q: &PotentialGrid, k: Wavenumber, xi: f64) -> Result<f64> {
    Ok(weyl_identity(q, k, xi)?.residual())
}

fn check_support(q: &PotentialGrid, f: &SourceVector) -> Result<()> {
    if f.dim() != q.dim() {
        return Err(Error::Parameter(format!(
            "source has {} components, potential is {}x{}",
            f.dim(),
            q.dim(),
            q.dim()
        )));
    }
    if f.delta() > q.support_radius() + 1e-9 * q.step() {
        return Err(Error::Parameter(format!(
            "source support [0, {}] exceeds the potential support [0, {}]",
            f.delta(),
            q.support_radius()
        )));
    }
    Ok(())
}

/// `F̂ = ∫₀^δ α*(ρ, k, c) F(ρ) dρ` with `α*(ρ, k, c) = [α(ρ, k̄, c̄)]*`, for a
/// complex coupling `c`.
pub fn fhat_coupling(q: &PotentialGrid, f: &SourceVector, k: C64, coupling: C64) -> Result<Vec<C64>> {
    check_support(q, f)?;
    let src = f.nodes();
    let pot = span_nodes(q.step(), 0.0, f.delta());
    let nodes = merge_nodes(&src, &pot);
    let idx = ode::locate(&nodes, &src);
    let run = regular_on(q, k.conj(), coupling.conj(), &nodes, ode::DEFAULT_TOL)?;
    let n = q.dim();
    let mut out = vec![C64::new(0.0, 0.0); n];
    for (i, w, v) in f.weighted_terms() {
        let a = &run.y[idx[i]];
        for (row, o) in out.iter_mut().enumerate() {
            let mut s = C64::new(0.0, 0.0);
            for (j, vj) in v.iter().enumerate() {
                s += a[(j, row)].conj() * vj;
            }
            *o += s * w;
        }
    }
    Ok(out)
}

/// `F̂(k, t)` for a real coupling `t`.
pub fn fhat(q: &PotentialGrid, f: &SourceVector, k: Wavenumber, t: f64) -> Result<Vec<C64>> {
    fhat_coupling(q, f, k.value(), C64::new(t, 0.0))
}

/// `𝔄 = (J(0) + (ik)⁻¹J′(0))/2`, `𝔅 = (J(0) − (ik)⁻¹J′(0))/2` at real `k`.
pub fn scattering_coefficients(q: &PotentialGrid, k: Wavenumber, t: f64) -> Result<ScatteringPair> {
    if !k.is_real() {
        return Err(Error::Parameter("scattering coefficients need real k".into()));
    }
    let kv = k.value();
    let (j0, jp0) = jost_at_zero(q, kv, C64::new(t, 0.0), ode::DEFAULT_TOL)?;
    let scaled = jp0 / (I * kv);
    Ok(ScatteringPair {
        a_frak: (&j0 + &scaled) * C64::new(0.5, 0.0),
        b_frak: (&j0 - &scaled) * C64::new(0.5, 0.0),
    })
}

/// Inverts `J(0)`, converting a conditioning failure into a resonance report.
pub(crate) fn invert_jost(j0: &CMat, k: f64, t: f64) -> Result<CMat> {
    match linalg::checked_inverse(j0, "J(0, k, t)") {
        Ok((inv, _)) => Ok(inv),
        Err(Error::Conditioning { cond, .. }) => Err(Error::Resonance { k, t, cond }),
        Err(e) => Err(e),
    }
}

/// Solution of `−u″ + tQu − k²u = F`, `u(0) = 0`, outgoing at infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct GreenSolution {
    /// `u` and `u′` as `n × 1` matrices on the source nodes followed by the
    /// potential nodes beyond `δ`.
    pub trajectory: SolutionTrajectory,
    /// `A = J⁻¹(0) F̂` with `u = e^{ikr} A` beyond the support.
    pub amplitude: Vec<C64>,
    pub fhat: Vec<C64>,
    /// `‖u(0)‖`.
    pub dirichlet_residual: f64,
    /// `‖u(R) − e^{ikR} A‖`.
    pub far_field_residual: f64,
    /// `max |u″ − (tQ − k²)u + F|` over interior source nodes away from jumps,
    /// with `u″` from fourth-order differences of `u′`.
    pub ode_residual: f64,
    /// `|Im⟨u, F⟩ − k‖A‖²|`.
    pub flux_residual: f64,
}

pub fn solution_u(q: &PotentialGrid, f: &SourceVector, k: Wavenumber, t: f64) -> Result<GreenSolution> {
    if !k.is_real() {
        return Err(Error::Parameter("Green solution is assembled at real k".into()));
    }
    check_support(q, f)?;
    let n = q.dim();
    let kv = k.value();
    let tc = C64::new(t, 0.0);
    let src = f.nodes();
    let nodes = merge_nodes(&q.support_nodes(), &src);
    let n_inner = nodes.partition_point(|x| *x <= f.delta() + 1e-12);
    let src_idx = ode::locate(&nodes, &src);

    let reg = run_schrodinger(
        q,
        kv,
        tc,
        &CMat::zeros(n, n),
        &linalg::identity(n),
        &nodes[..n_inner],
        Some((f, true)),
        ode::DEFAULT_TOL,
    )?;
    let mut desc = nodes.clone();
    desc.reverse();
    let e = (I * kv * desc[0]).exp();
    let mut jost = run_schrodinger(
        q,
        kv,
        tc,
        &(linalg::identity(n) * e),
        &(linalg::identity(n) * (I * kv * e)),
        &desc,
        Some((f, true)),
        ode::DEFAULT_TOL,
    )?;
    jost.y.reverse();
    jost.yp.reverse();
    jost.acc.reverse();

    let j0 = jost.y[0].clone();
    let jinv = invert_jost(&j0, kv.re, t)?;
    let jinv_h = jinv.adjoint();
    let fh = CMat::from_column_slice(n, 1, &reg.acc[n_inner - 1]);
    let amp = &jinv * &fh;
    let gram = &jinv_h * &jinv * (2.0 * I * kv);

    let mut values = Vec::with_capacity(nodes.len());
    let mut derivs = Vec::with_capacity(nodes.len());
    for i in 0..nodes.len() {
        if i < n_inner {
            let c1 = CMat::from_column_slice(n, 1, &reg.acc[i]);
            let c2 = -CMat::from_column_slice(n, 1, &jost.acc[i]);
            let left = &jinv * &c1;
            let right = &gram * (&fh - &c1) + &jinv_h * &c2;
            values.push(&jost.y[i] * &left + &reg.y[i] * &right);
            derivs.push(&jost.yp[i] * &left + &reg.yp[i] * &right);
        } else {
            values.push(&jost.y[i] * &amp);
            derivs.push(&jost.yp[i] * &amp);
        }
    }

    let dirichlet_residual = linalg::op_norm(&values[0]);
    let last = nodes.len() - 1;
    let far_field_residual = linalg::op_norm(&(&values[last] - &amp * (I * kv * nodes[last]).exp()));

    // u″ = (tQ − k²)u − F on interior source nodes.
    let h = f.step();
    let m = src.len();
    let mut ode_residual: f64 = 0.0;
    let mut qv = CMat::zeros(n, n);
    for i in 2..m.saturating_sub(2) {
        if (i - 2..=i + 2).any(|j| f.is_jump(j)) {
            continue;
        }
        let d = |j: usize| &derivs[src_idx[j]];
        let upp = (d(i - 2) - d(i + 2) + (d(i + 1) - d(i - 1)) * C64::new(8.0, 0.0)) / C64::new(12.0 * h, 0.0);
        q.interp_into(src[i], qv.as_mut_slice());
        let fi = CMat::from_column_slice(n, 1, f.value(i));
        let model = &qv * &values[src_idx[i]] * tc - &values[src_idx[i]] * (kv * kv) - fi;
        ode_residual = ode_residual.max(linalg::max_abs(&(upp - model)));
    }

    let mut pairing = C64::new(0.0, 0.0);
    for (i, w, v) in f.weighted_terms() {
        let u = &values[src_idx[i]];
        for (j, vj) in v.iter().enumerate() {
            pairing += u[(j, 0)] * vj.conj() * w;
        }
    }
    let amp_norm2: f64 = amp.iter().map(|z| z.norm_sqr()).sum();
    let flux_residual = (pairing.im - kv.re * amp_norm2).abs();

    Ok(GreenSolution {
        trajectory: SolutionTrajectory { nodes, values, derivs },
        amplitude: amp.iter().cloned().collect(),
        fhat: fh.iter().cloned().collect(),
        dirichlet_residual,
        far_field_residual,
        ode_residual,
        flux_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::{build_potential, Envelope, GridSpec, PotentialSpec};
    use std::sync::Arc;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn zero(dim: usize, r: f64) -> PotentialGrid {
        build_potential(&PotentialSpec::Zero { dim }, GridSpec::with_default_step(r)).unwrap()
    }

    fn constant(q: f64, r: f64) -> PotentialGrid {
        build_potential(
            &PotentialSpec::Constant { value: CMat::from_element(1, 1, c(q, 0.0)) },
            GridSpec::with_default_step(r),
        )
        .unwrap()
    }

    fn random(dim: usize, seed: u64, r: f64) -> PotentialGrid {
        build_potential(
            &PotentialSpec::RandomHermitian {
                dim,
                seed,
                amplitude: 1.0,
                knot_spacing: 0.5,
                envelope: Envelope::Flat,
            },
            GridSpec::with_default_step(r),
        )
        .unwrap()
    }

    /// `√z` with `Im ≥ 0`.
    fn sqrt_upper(z: C64) -> C64 {
        let s = z.sqrt();
        if s.im < 0.0 { -s } else { s }
    }

    #[test]
    fn free_regular_solution() {
        let q = zero(1, std::f64::consts::PI);
        let a = regular_solution(&q, Wavenumber::real(2.0).unwrap(), 0.0).unwrap();
        let i = a.index_of(std::f64::consts::FRAC_PI_4);
        assert!((a.nodes[i] - std::f64::consts::FRAC_PI_4).abs() < 2e-3);
        let r = a.nodes[i];
        assert!((a.values[i][(0, 0)].re - (2.0 * r).sin() / 2.0).abs() < 1e-8);
    }

    #[test]
    fn small_k_regular_solution_tends_to_r() {
        let q = zero(1, 1.0);
        let a = regular_solution(&q, Wavenumber::real(1e-3).unwrap(), 0.0).unwrap();
        assert!((a.last()[(0, 0)].re - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_regular_solution() {
        let (qv, t, k) = (2.0, 0.7, 1.3);
        let q = constant(qv, 3.0);
        let a = regular_solution(&q, Wavenumber::real(k).unwrap(), t).unwrap();
        let kappa = sqrt_upper(c(k * k - t * qv, 0.0));
        for (r, v) in a.nodes.iter().zip(&a.values) {
            let expect = (kappa * r).sin() / kappa;
            assert!((v[(0, 0)] - expect).norm() < 1e-8);
        }
    }

    #[test]
    fn free_jost() {
        let q = zero(2, 2.0);
        let j = jost_solution(&q, Wavenumber::real(1.7).unwrap(), 0.5).unwrap();
        assert!(linalg::max_abs(&(j.first() - linalg::identity(2))) < 1e-12);
        assert!(linalg::max_abs(&(&j.derivs[0] - linalg::identity(2) * c(0.0, 1.7))) < 1e-12);
    }

    #[test]
    fn constant_jost_matches_two_region_oracle() {
        let (qv, t, radius) = (1.5, 1.0, 2.0);
        let q = constant(qv, radius);
        for k in [0.6, 1.1, 2.5] {
            let kappa = sqrt_upper(c(k * k - t * qv, 0.0));
            let eikr = (I * k * radius).exp();
            let a = eikr * (-I * kappa * radius).exp() * (1.0 + k / kappa) * 0.5;
            let b = eikr * (I * kappa * radius).exp() * (1.0 - k / kappa) * 0.5;
            let j = jost_solution(&q, Wavenumber::real(k).unwrap(), t).unwrap();
            assert!((j.first()[(0, 0)] - (a + b)).norm() < 1e-8, "k = {k}");
            let jp = I * kappa * (a - b);
            assert!((j.derivs[0][(0, 0)] - jp).norm() < 1e-8);
        }
    }

    #[test]
    fn wronskian_is_constant() {
        let q = random(2, 5, 3.0);
        let d = wronskian_defect(&q, Wavenumber::real(1.4).unwrap(), 0.9).unwrap();
        assert!(d < 1e-8, "{d}");
    }

    #[test]
    fn free_pencil_jost() {
        let q = zero(2, 1.0);
        for k in [c(1.0, 0.0), c(0.5, 1.0)] {
            let jd = pencil_jost(&q, Wavenumber::new(k).unwrap(), 1.7).unwrap();
            assert!(linalg::max_abs(&(&jd.d0 - linalg::identity(2))) < 1e-12);
            assert!(linalg::max_abs(&(&jd.d0prime - linalg::identity(2) * (I * k))) < 1e-12);
        }
    }

    #[test]
    fn pencil_matches_jost_on_real_axis() {
        let q = random(2, 3, 3.0);
        let (k, xi) = (1.3, 0.6);
        let jd = pencil_jost(&q, Wavenumber::real(k).unwrap(), xi).unwrap();
        let (j0, jp0) = jost_at_zero(&q, c(k, 0.0), c(k * xi, 0.0), ode::DEFAULT_TOL).unwrap();
        assert!(linalg::max_abs(&(&jd.d0 - j0)) < 1e-7);
        assert!(linalg::max_abs(&(&jd.d0prime - jp0)) < 1e-7);
    }

    #[test]
    fn potential_vanishing_at_support_edge() {
        let q = build_potential(
            &PotentialSpec::ClosedForm {
                dim: 1,
                f: Arc::new(|r| CMat::from_element(1, 1, c(1.0 - 0.5 * r, 0.0))),
            },
            GridSpec::with_default_step(2.0),
        )
        .unwrap();
        let k = Wavenumber::new(c(1.0, 1.5)).unwrap();
        let jd = pencil_jost(&q, k, 0.7).unwrap();
        assert!(linalg::op_norm(&jd.d0) <= jd.gronwall_bound);
        let f = SourceVector::new(1, 1.0, q.step(), &SourceProfile::Bump).unwrap();
        assert!(fhat_coupling(&q, &f, k.value(), k.value() * 0.7).is_ok());
        assert!(weyl_identity_residual(&q, k, 0.7).unwrap() <= 1e-6);
    }

    #[test]
    fn pencil_gronwall_bound() {
        let q = random(2, 8, 3.0);
        let jd = pencil_jost(&q, Wavenumber::new(c(1.0, 1.0)).unwrap(), 1.0).unwrap();
        assert!(linalg::op_norm(&jd.d0) <= jd.gronwall_bound);
        assert!(jd.cond_d0 < 1e10);
    }

    #[test]
    fn free_fhat_indicator() {
        let q = zero(1, 1.0);
        let f = SourceVector::new(1, 1.0, 1e-3, &SourceProfile::Indicator).unwrap();
        let pi = std::f64::consts::PI;
        let v = fhat(&q, &f, Wavenumber::real(pi).unwrap(), 0.0).unwrap();
        assert!((v[0] - c(2.0 / (pi * pi), 0.0)).norm() < 1e-7);
    }

    #[test]
    fn fhat_small_support_asymptotics() {
        let q = random(1, 2, 2.0);
        let delta = 1e-2;
        let f = SourceVector::new(1, delta, delta / 200.0, &SourceProfile::Bump).unwrap();
        let v = fhat(&q, &f, Wavenumber::real(1.5).unwrap(), 0.8).unwrap();
        let moment: f64 = f
            .weighted_terms()
            .iter()
            .map(|(i, w, val)| w * f.node(*i) * val[0].re)
            .sum();
        assert!((v[0] - c(moment, 0.0)).norm() < 1e-3 * moment);
    }

    #[test]
    fn fhat_rejects_wide_source() {
        let q = zero(1, 1.0);
        let f = SourceVector::new(1, 2.0, 1e-2, &SourceProfile::Indicator).unwrap();
        assert!(matches!(fhat(&q, &f, Wavenumber::real(1.0).unwrap(), 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn source_is_unit_norm_with_jumps() {
        let f = SourceVector::new(
            1,
            1.0,
            1e-3,
            &SourceProfile::Piecewise { breaks: vec![0.5], values: vec![1.0, -0.2] },
        )
        .unwrap();
        assert!((f.norm() - 1.0).abs() < 1e-12);
        let s = (0.5f64 + 0.5 * 0.04).sqrt();
        assert!((f.value(100)[0].re - 1.0 / s).abs() < 1e-12);
        assert!((f.value(900)[0].re + 0.2 / s).abs() < 1e-12);
    }

    #[test]
    fn free_scattering_pair() {
        let q = zero(3, 1.0);
        let p = scattering_coefficients(&q, Wavenumber::real(2.0).unwrap(), 1.0).unwrap();
        assert!(linalg::max_abs(&(&p.a_frak - linalg::identity(3))) < 1e-12);
        assert!(linalg::max_abs(&p.b_frak) < 1e-12);
    }

    #[test]
    fn scattering_pair_identity_random() {
        let q = random(2, 21, 4.0);
        let p = scattering_coefficients(&q, Wavenumber::real(1.7).unwrap(), 0.8).unwrap();
        assert!(p.unitarity_defect() < 1e-8);
    }

    #[test]
    fn constant_scattering_pair_oracle() {
        let (qv, t, radius, k) = (0.8, 1.0, 2.0, 1.2);
        let q = constant(qv, radius);
        let kappa = sqrt_upper(c(k * k - t * qv, 0.0));
        let eikr = (I * k * radius).exp();
        let a = eikr * (-I * kappa * radius).exp() * (1.0 + k / kappa) * 0.5;
        let b = eikr * (I * kappa * radius).exp() * (1.0 - k / kappa) * 0.5;
        let j0 = a + b;
        let jp0 = I * kappa * (a - b);
        let af = (j0 + jp0 / (I * k)) * 0.5;
        let bf = (j0 - jp0 / (I * k)) * 0.5;
        assert!((af.norm_sqr() - bf.norm_sqr() - 1.0).abs() < 1e-12);
        let p = scattering_coefficients(&q, Wavenumber::real(k).unwrap(), t).unwrap();
        assert!((p.a_frak[(0, 0)] - af).norm() < 1e-8);
        assert!((p.b_frak[(0, 0)] - bf).norm() < 1e-8);
    }

    #[test]
    fn free_herglotz() {
        let q = zero(2, 1.0);
        let h = herglotz_g(&q, Wavenumber::new(c(0.3, 0.8)).unwrap(), 1.0).unwrap();
        assert!(linalg::max_abs(&(&h.g - linalg::identity(2) * I)) < 1e-12);
        assert!((h.min_im_eigenvalue - 1.0).abs() < 1e-12);
    }

    #[test]
    fn herglotz_positive_on_grid() {
        let q = random(2, 13, 3.0);
        for im in [0.1, 0.5, 1.0] {
            for re in [-1.0, 0.5, 2.0] {
                let h = herglotz_g(&q, Wavenumber::new(c(re, im)).unwrap(), 0.9).unwrap();
                assert!(h.min_im_eigenvalue >= -1e-8, "k = {re}+{im}i: {}", h.min_im_eigenvalue);
            }
        }
    }

    #[test]
    fn herglotz_bounded_for_large_im_k() {
        let q = random(2, 4, 3.0);
        let norms: Vec<f64> = [2.0, 5.0, 10.0, 20.0]
            .iter()
            .map(|im| linalg::op_norm(&herglotz_g(&q, Wavenumber::new(c(0.5, *im)).unwrap(), 1.2).unwrap().g))
            .collect();
        let bound = 1.0 + norms[0];
        assert!(norms.iter().all(|n| *n <= bound), "{norms:?}");
    }

    #[test]
    fn free_weyl_identity() {
        let q = zero(1, 1.0);
        let r = weyl_identity_residual(&q, Wavenumber::new(c(0.0, 1.0)).unwrap(), 1.0).unwrap();
        assert!(r < 1e-12);
    }

    #[test]
    fn weyl_identity_random() {
        let q = random(2, 17, 3.0);
        let w = weyl_identity(&q, Wavenumber::new(c(0.7, 0.9)).unwrap(), -1.3).unwrap();
        assert!(w.residual() <= 1e-6, "{w:?}");
        assert!(w.residual_ode <= 1e-6, "{w:?}");
    }

    #[test]
    fn weyl_identity_exponential_sweep() {
        let q = build_potential(
            &PotentialSpec::ClosedForm {
                dim: 1,
                f: Arc::new(|r| CMat::from_element(1, 1, c(2.0 * (-r).exp(), 0.0))),
            },
            GridSpec::with_default_step(8.0),
        )
        .unwrap();
        for j in 0..10 {
            let k = c(-2.0 + 0.45 * j as f64, 0.2 + 0.2 * j as f64);
            let r = weyl_identity_residual(&q, Wavenumber::new(k).unwrap(), 1.1).unwrap();
            assert!(r <= 1e-6, "k = {k}: {r}");
        }
    }

    #[test]
    fn free_green_solution() {
        let q = zero(1, 2.0);
        let f = SourceVector::new(1, 1.0, 1e-3, &SourceProfile::Indicator).unwrap();
        let pi = std::f64::consts::PI;
        let g = solution_u(&q, &f, Wavenumber::real(pi).unwrap(), 0.0).unwrap();
        assert!((g.amplitude[0] - c(2.0 / (pi * pi), 0.0)).norm() < 1e-7);
        assert!(g.dirichlet_residual < 1e-12);
        assert!(g.far_field_residual < 1e-7);
        assert!(g.flux_residual < 1e-6);
    }

    #[test]
    fn green_solution_residuals_smooth_instance() {
        let q = build_potential(
            &PotentialSpec::ClosedForm {
                dim: 2,
                f: Arc::new(|r| {
                    let e = (-r * r / 4.0).exp();
                    CMat::from_row_slice(2, 2, &[c(e, 0.0), c(0.3 * e, 0.2 * e), c(0.3 * e, -0.2 * e), c(-e, 0.0)])
                }),
            },
            GridSpec { step: 2.5e-4, support_radius: 3.0, r_max: 3.0 },
        )
        .unwrap();
        // Data are piecewise linear between nodes, so the differenced residual is O(h²).
        let f = SourceVector::new(2, 1.0, 2.5e-4, &SourceProfile::Bump).unwrap();
        let g = solution_u(&q, &f, Wavenumber::real(1.4).unwrap(), 0.7).unwrap();
        assert!(g.ode_residual <= 1e-6, "{}", g.ode_residual);
        assert!(g.flux_residual <= 1e-6, "{}", g.flux_residual);
        assert!(g.dirichlet_residual < 1e-12);
    }
}
