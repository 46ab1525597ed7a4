//! Adaptive Dormand–Prince 5(4) integration of complex linear ODE systems.
//!
//! Integration is node-aligned: the caller supplies an ordered list of
//! output nodes and the integrator never steps across one. Each adaptive
//! step inside `[nodes[i], nodes[i+1]]` is told which cell it lives in, so
//! piecewise-defined coefficients can be evaluated on the correct side of a
//! breakpoint.

use std::cell::RefCell;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, C64};
use crate::potential::PotentialGrid;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const K_MIN: f64 = 1e-3;
pub const REAL_AXIS_TOL: f64 = 1e-14;

/// The closed interval between two consecutive output nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub lo: f64,
    pub hi: f64,
}

impl Cell {
    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// A slice of the state vector with its own relative error scale.
#[derive(Debug, Clone)]
pub struct Block {
    pub range: Range<usize>,
    pub atol: f64,
}

impl Block {
    pub fn new(range: Range<usize>) -> Self {
        Block { range, atol: 0.0 }
    }

    pub fn with_atol(range: Range<usize>, atol: f64) -> Self {
        Block { range, atol }
    }
}

pub trait System {
    fn len(&self) -> usize;

    fn rhs(&self, r: f64, cell: Cell, y: &[C64], dy: &mut [C64]) -> Result<()>;

    /// Error-control blocks; defaults to the whole state.
    fn blocks(&self) -> Vec<Block> {
        vec![Block::new(0..self.len())]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub tol: f64,
    pub max_steps: usize,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            tol: DEFAULT_TOL,
            max_steps: 50_000_000,
        }
    }
}

impl Options {
    pub fn with_tol(tol: f64) -> Self {
        Options {
            tol,
            ..Default::default()
        }
    }
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

struct Work {
    k: [Vec<C64>; 7],
    tmp: Vec<C64>,
    ynew: Vec<C64>,
    err: Vec<C64>,
}

impl Work {
    fn new(n: usize) -> Self {
        let z = vec![C64::new(0.0, 0.0); n];
        Work {
            k: [z.clone(), z.clone(), z.clone(), z.clone(), z.clone(), z.clone(), z.clone()],
            tmp: z.clone(),
            ynew: z.clone(),
            err: z,
        }
    }
}

fn block_norm(v: &[C64], range: &Range<usize>) -> f64 {
    linalg::vec_norm(&v[range.clone()])
}

/// Integrates `sys` from `nodes[0]` (state `y0`) through every node in order,
/// calling `observe(i, y)` at each node (including the first).
pub fn solve_observe<S, F>(sys: &S, y0: &[C64], nodes: &[f64], opts: &Options, mut observe: F) -> Result<()>
where
    S: System + ?Sized,
    F: FnMut(usize, &[C64]) -> Result<()>,
{
    let n = sys.len();
    if y0.len() != n {
        return Err(Error::Parameter(format!(
            "initial state has length {}, system expects {n}",
            y0.len()
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::Parameter("tolerance must be positive".into()));
    }
    if nodes.is_empty() {
        return Ok(());
    }
    let dir = if nodes.len() > 1 && nodes[nodes.len() - 1] < nodes[0] { -1.0 } else { 1.0 };
    for w in nodes.windows(2) {
        if !((w[1] - w[0]) * dir > 0.0) {
            return Err(Error::Parameter("output nodes must be strictly monotone".into()));
        }
    }
    let blocks = sys.blocks();
    let mut y = y0.to_vec();
    let mut wk = Work::new(n);
    observe(0, &y)?;

    let mut h_abs: Option<f64> = None;
    let mut steps = 0usize;
    for i in 0..nodes.len() - 1 {
        let (a, b) = (nodes[i], nodes[i + 1]);
        let cell = Cell { lo: a.min(b), hi: a.max(b) };
        let width = (b - a).abs();
        let mut r = a;
        let mut fsal_valid = false;
        let mut h = match h_abs {
            Some(h) => h.min(width),
            None => {
                sys.rhs(r, cell, &y, &mut wk.k[0])?;
                fsal_valid = true;
                let d0 = linalg::vec_norm(&y);
                let d1 = linalg::vec_norm(&wk.k[0]);
                let guess = if d1 > 1e-300 { 0.01 * d0.max(1e-5) / d1 } else { width };
                guess.min(width)
            }
        };
        loop {
            let remaining = (b - r).abs();
            if remaining <= 0.0 {
                break;
            }
            let last = h >= remaining * (1.0 - 1e-12);
            let hs = if last { remaining } else { h };
            let hh = hs * dir;
            if hs < 1e-14 * (1.0 + r.abs()) {
                return Err(Error::Integration {
                    r,
                    reason: "step size underflow".into(),
                });
            }
            steps += 1;
            if steps > opts.max_steps {
                return Err(Error::Integration {
                    r,
                    reason: "maximum number of steps exceeded".into(),
                });
            }
            if !fsal_valid {
                sys.rhs(r, cell, &y, &mut wk.k[0])?;
            }
            let rnext = if last { b } else { r + hh };
            let err = dp_step(sys, r, hh, rnext, cell, &y, &mut wk, &blocks, opts.tol)?;
            if err <= 1.0 {
                std::mem::swap(&mut y, &mut wk.ynew);
                wk.k.swap(0, 6);
                fsal_valid = true;
                r = rnext;
                if y.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                    return Err(Error::Integration {
                        r,
                        reason: "non-finite state".into(),
                    });
                }
                let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                // Do not let a short final step shrink the carried step size.
                h = if last { h.max(hs * fac) } else { hs * fac };
                if last {
                    break;
                }
            } else {
                let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
                h = hs * if err.is_finite() { fac } else { 0.1 };
                fsal_valid = true;
            }
        }
        h_abs = Some(h);
        observe(i + 1, &y)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn dp_step<S: System + ?Sized>(
    sys: &S,
    r: f64,
    h: f64,
    rnext: f64,
    cell: Cell,
    y: &[C64],
    wk: &mut Work,
    blocks: &[Block],
    tol: f64,
) -> Result<f64> {
    let n = y.len();
    let Work { k, tmp, ynew, err } = wk;
    let [k1, k2, k3, k4, k5, k6, k7] = k;
    let at = |c: f64| (r + c * h).clamp(cell.lo, cell.hi);

    for j in 0..n {
        tmp[j] = y[j] + k1[j] * (h * A21);
    }
    sys.rhs(at(C2), cell, tmp, k2)?;
    for j in 0..n {
        tmp[j] = y[j] + (k1[j] * A31 + k2[j] * A32) * h;
    }
    sys.rhs(at(C3), cell, tmp, k3)?;
    for j in 0..n {
        tmp[j] = y[j] + (k1[j] * A41 + k2[j] * A42 + k3[j] * A43) * h;
    }
    sys.rhs(at(C4), cell, tmp, k4)?;
    for j in 0..n {
        tmp[j] = y[j] + (k1[j] * A51 + k2[j] * A52 + k3[j] * A53 + k4[j] * A54) * h;
    }
    sys.rhs(at(C5), cell, tmp, k5)?;
    for j in 0..n {
        tmp[j] = y[j] + (k1[j] * A61 + k2[j] * A62 + k3[j] * A63 + k4[j] * A64 + k5[j] * A65) * h;
    }
    sys.rhs(rnext, cell, tmp, k6)?;
    for j in 0..n {
        ynew[j] = y[j] + (k1[j] * B1 + k3[j] * B3 + k4[j] * B4 + k5[j] * B5 + k6[j] * B6) * h;
    }
    sys.rhs(rnext, cell, ynew, k7)?;
    for j in 0..n {
        err[j] = (k1[j] * E1 + k3[j] * E3 + k4[j] * E4 + k5[j] * E5 + k6[j] * E6 + k7[j] * E7) * h;
    }
    let mut worst: f64 = 0.0;
    for b in blocks {
        let scale = (tol * block_norm(y, &b.range).max(block_norm(ynew, &b.range)) + b.atol).max(1e-300);
        let e = block_norm(err, &b.range) / scale;
        if !e.is_finite() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Integrates and stores the state at every node.
pub fn solve<S: System + ?Sized>(sys: &S, y0: &[C64], nodes: &[f64], opts: &Options) -> Result<Vec<Vec<C64>>> {
    let mut out = Vec::with_capacity(nodes.len());
    solve_observe(sys, y0, nodes, opts, |_, y| {
        out.push(y.to_vec());
        Ok(())
    })?;
    Ok(out)
}

/// `Y′ = A(r) Y` for an `N × N` coefficient and an `N × m` state, stored
/// column-major. The coefficient callback fills an `N × N` column-major slice.
pub struct MatrixOde<F> {
    pub size: usize,
    pub cols: usize,
    coef: F,
    scratch: RefCell<Vec<C64>>,
}

impl<F> MatrixOde<F>
where
    F: Fn(f64, Cell, &mut [C64]) -> Result<()>,
{
    pub fn new(size: usize, cols: usize, coef: F) -> Self {
        MatrixOde {
            size,
            cols,
            coef,
            scratch: RefCell::new(vec![C64::new(0.0, 0.0); size * size]),
        }
    }
}

impl<F> System for MatrixOde<F>
where
    F: Fn(f64, Cell, &mut [C64]) -> Result<()>,
{
    fn len(&self) -> usize {
        self.size * self.cols
    }

    fn rhs(&self, r: f64, cell: Cell, y: &[C64], dy: &mut [C64]) -> Result<()> {
        let mut a = self.scratch.borrow_mut();
        (self.coef)(r, cell, &mut a)?;
        linalg::gemm_into(&a, self.size, self.size, y, self.cols, dy);
        Ok(())
    }
}

/// Matrix-valued solution sampled at a list of radial nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionTrajectory {
    pub nodes: Vec<f64>,
    pub values: Vec<CMat>,
    pub derivs: Vec<CMat>,
}

impl SolutionTrajectory {
    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, |v| v.nrows())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn first(&self) -> &CMat {
        &self.values[0]
    }

    pub fn last(&self) -> &CMat {
        &self.values[self.values.len() - 1]
    }

    /// Index of the node closest to `r`.
    pub fn index_of(&self, r: f64) -> usize {
        let mut best = 0;
        for (i, x) in self.nodes.iter().enumerate() {
            if (x - r).abs() < (self.nodes[best] - r).abs() {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    RealAxis,
    UpperHalfPlane,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wavenumber {
    k: C64,
    regime: Regime,
}

impl Wavenumber {
    /// Classifies `k`; rejects the lower half-plane and `|k| < K_MIN` on the axis.
    pub fn new(k: C64) -> Result<Self> {
        if !k.re.is_finite() || !k.im.is_finite() {
            return Err(Error::Parameter(format!("non-finite wavenumber {k}")));
        }
        if k.im.abs() <= REAL_AXIS_TOL {
            if k.norm() < K_MIN {
                return Err(Error::Parameter(format!(
                    "real wavenumber {k} is below k_min = {K_MIN}"
                )));
            }
            Ok(Wavenumber {
                k: C64::new(k.re, 0.0),
                regime: Regime::RealAxis,
            })
        } else if k.im > 0.0 {
            Ok(Wavenumber {
                k,
                regime: Regime::UpperHalfPlane,
            })
        } else {
            Err(Error::Parameter(format!("wavenumber {k} lies in the lower half-plane")))
        }
    }

    pub fn real(k: f64) -> Result<Self> {
        Self::new(C64::new(k, 0.0))
    }

    pub fn upper(k: C64) -> Result<Self> {
        let w = Self::new(k)?;
        if w.regime != Regime::UpperHalfPlane {
            return Err(Error::Parameter(format!("{k} is not in the open upper half-plane")));
        }
        Ok(w)
    }

    pub fn value(&self) -> C64 {
        self.k
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn is_real(&self) -> bool {
        self.regime == Regime::RealAxis
    }
}

/// Nodes from `a` to `b` (either direction): the endpoints plus every
/// multiple of `step` strictly between them.
pub fn span_nodes(step: f64, a: f64, b: f64) -> Vec<f64> {
    let (lo, hi) = (a.min(b), a.max(b));
    let eps = 1e-9 * step;
    let mut v = vec![lo];
    let mut j = (lo / step).floor() as i64 + 1;
    loop {
        let x = j as f64 * step;
        if x >= hi - eps {
            break;
        }
        if x > lo + eps {
            v.push(x);
        }
        j += 1;
    }
    if hi > lo {
        v.push(hi);
    }
    if a > b {
        v.reverse();
    }
    v
}

/// Sorted union of two increasing node lists; near-coincident nodes merge.
pub fn merge_nodes(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b.iter()).cloned().collect();
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut out: Vec<f64> = Vec::with_capacity(all.len());
    for x in all {
        match out.last() {
            Some(&l) if (x - l).abs() <= 1e-12 * (1.0 + l.abs()) => {}
            _ => out.push(x),
        }
    }
    out
}

/// Index in `nodes` of each entry of `wanted` (matched within `1e-12`).
pub fn locate(nodes: &[f64], wanted: &[f64]) -> Vec<usize> {
    wanted
        .iter()
        .map(|w| {
            let i = nodes.partition_point(|x| *x < *w - 1e-12 * (1.0 + w.abs()));
            i.min(nodes.len() - 1)
        })
        .collect()
}

/// Solves `Y′ = A(r) Y`, `Y(from) = initial`, reporting at each of `nodes`.
///
/// `nodes` must start at `from` and run monotonically to `to`. `A` is called
/// with the current cell so piecewise coefficients can pick their side.
pub fn integrate_linear<F>(coefficient: F, initial: &CMat, nodes: &[f64], tol: f64) -> Result<SolutionTrajectory>
where
    F: Fn(f64, Cell) -> CMat,
{
    let n = initial.nrows();
    let m = initial.ncols();
    let coef = |r: f64, cell: Cell, out: &mut [C64]| -> Result<()> {
        let a = coefficient(r, cell);
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::Parameter("coefficient has the wrong shape".into()));
        }
        if !linalg::is_finite(&a) {
            return Err(Error::Input(format!("non-finite coefficient at r = {r}")));
        }
        out.copy_from_slice(a.as_slice());
        Ok(())
    };
    let sys = MatrixOde::new(n, m, coef);
    let states = solve(&sys, initial.as_slice(), nodes, &Options::with_tol(tol))?;
    let mut values = Vec::with_capacity(nodes.len());
    let mut derivs = Vec::with_capacity(nodes.len());
    for (i, s) in states.into_iter().enumerate() {
        let y = CMat::from_vec(n, m, s);
        let cell = if i + 1 < nodes.len() {
            Cell { lo: nodes[i].min(nodes[i + 1]), hi: nodes[i].max(nodes[i + 1]) }
        } else {
            let j = i.saturating_sub(1);
            Cell { lo: nodes[j].min(nodes[i]), hi: nodes[j].max(nodes[i]) }
        };
        derivs.push(coefficient(nodes[i], cell) * &y);
        values.push(y);
    }
    Ok(SolutionTrajectory {
        nodes: nodes.to_vec(),
        values,
        derivs,
    })
}

/// Ordered exponential `U′ = ∓(iξ/2) Q(r) U`, `U(r0) = I`; `sign = +1` gives
/// the `−` generator, `sign = −1` the `+` one.
pub fn ordered_exponential(q: &PotentialGrid, xi: f64, r0: f64, r1: f64, sign: i32) -> Result<SolutionTrajectory> {
    ordered_exponential_tol(q, xi, r0, r1, sign, DEFAULT_TOL)
}

pub fn ordered_exponential_tol(
    q: &PotentialGrid,
    xi: f64,
    r0: f64,
    r1: f64,
    sign: i32,
    tol: f64,
) -> Result<SolutionTrajectory> {
    if sign != 1 && sign != -1 {
        return Err(Error::Parameter("sign must be +1 or -1".into()));
    }
    let rmax = q.r_max();
    for r in [r0, r1] {
        if !(0.0..=rmax + 1e-12).contains(&r) {
            return Err(Error::Parameter(format!("r = {r} outside the grid [0, {rmax}]")));
        }
    }
    let n = q.dim();
    let factor = C64::new(0.0, -(sign as f64) * xi / 2.0);
    let nodes = span_nodes(q.step(), r0, r1);
    let coef = move |r: f64, cell: Cell| {
        let mut m = CMat::zeros(n, n);
        let rr = r.clamp(cell.lo, cell.hi);
        q.interp_into(rr, m.as_mut_slice());
        m * factor
    };
    integrate_linear(coef, &linalg::identity(n), &nodes, tol)
}
