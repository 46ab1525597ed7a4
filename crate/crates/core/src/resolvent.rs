//! Finite-difference quadratic pencil `P(k) = −Δ + kξV − k²` with Dirichlet
//! ends: hyperbolicity roots, the resolvent bound and Combes–Thomas decay of
//! the Green kernel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::C64;

/// Smallest admissible node count.
pub const MIN_NODES: usize = 64;

/// Window norms below this are excluded from decay fits.
pub const UNDERFLOW: f64 = 1e-280;

/// Uniform grid on `[0, L]` with `N` intervals; unknowns live at the `N − 1`
/// interior nodes `x_i = i h`.
#[derive(Debug, Clone, PartialEq)]
pub struct PencilGrid1D {
    length: f64,
    n: usize,
    v: Vec<f64>,
}

impl PencilGrid1D {
    /// Samples `v` at the interior nodes.
    pub fn new(length: f64, n: usize, v: impl Fn(f64) -> f64) -> Result<Self> {
        if n < MIN_NODES {
            return Err(Error::Parameter(format!("need at least {MIN_NODES} nodes, got {n}")));
        }
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::Parameter(format!("interval length must be positive, got {length}")));
        }
        let h = length / n as f64;
        let v: Vec<f64> = (1..n).map(|i| v(i as f64 * h)).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("potential samples must be finite".into()));
        }
        Ok(PencilGrid1D { length, n, v })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn step(&self) -> f64 {
        self.length / self.n as f64
    }

    /// Number of unknowns, `N − 1`.
    pub fn unknowns(&self) -> usize {
        self.n - 1
    }

    /// Coordinate of unknown `j` (node `j + 1`).
    pub fn x(&self, j: usize) -> f64 {
        (j + 1) as f64 * self.step()
    }

    pub fn potential(&self) -> &[f64] {
        &self.v
    }

    /// Discrete `L²` norm with weight `h`.
    pub fn norm(&self, f: &[C64]) -> f64 {
        (self.step() * f.iter().map(|z| z.norm_sqr()).sum::<f64>()).sqrt()
    }

    /// `‖f′‖²` from forward differences with zero boundary values.
    pub fn dirichlet_energy(&self, f: &[C64]) -> f64 {
        let h = self.step();
        let mut prev = C64::new(0.0, 0.0);
        let mut acc = 0.0;
        for z in f.iter().chain(std::iter::once(&C64::new(0.0, 0.0))) {
            acc += (z - prev).norm_sqr();
            prev = *z;
        }
        acc / h
    }

    /// `P(k) f`.
    pub fn apply(&self, xi: f64, k: C64, f: &[C64]) -> Vec<C64> {
        let (lo, d, up) = self.bands(xi, k);
        let m = f.len();
        (0..m)
            .map(|i| {
                let mut s = d[i] * f[i];
                if i > 0 {
                    s += lo[i - 1] * f[i - 1];
                }
                if i + 1 < m {
                    s += up[i] * f[i + 1];
                }
                s
            })
            .collect()
    }

    fn bands(&self, xi: f64, k: C64) -> (Vec<C64>, Vec<C64>, Vec<C64>) {
        let h2 = self.step().powi(2);
        let m = self.unknowns();
        let off = C64::new(-1.0 / h2, 0.0);
        let d = self.v.iter().map(|v| 2.0 / h2 + k * xi * v - k * k).collect();
        (vec![off; m - 1], d, vec![off; m - 1])
    }
}

/// Shipped bounded potentials with `max |v| = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ShippedPotential {
    Zero,
    /// `cos x`.
    Cosine,
    /// Independent uniform values on unit cells, rescaled to `max |v| = 1`.
    RandomCells { seed: u64 },
    /// `sign(sin x)`, with `+1` at the zeros.
    SquareWave,
}

impl ShippedPotential {
    pub fn grid(&self, length: f64, n: usize) -> Result<PencilGrid1D> {
        match *self {
            ShippedPotential::Zero => PencilGrid1D::new(length, n, |_| 0.0),
            ShippedPotential::Cosine => PencilGrid1D::new(length, n, f64::cos),
            ShippedPotential::SquareWave => PencilGrid1D::new(length, n, |x| if x.sin() >= 0.0 { 1.0 } else { -1.0 }),
            ShippedPotential::RandomCells { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let cells = length.ceil() as usize + 1;
                let mut vals: Vec<f64> = (0..cells).map(|_| rng.random_range(-1.0..1.0)).collect();
                let peak = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                vals.iter_mut().for_each(|v| *v /= peak);
                PencilGrid1D::new(length, n, |x| vals[(x.floor() as usize).min(cells - 1)])
            }
        }
    }
}

/// Tridiagonal LU with partial pivoting (row interchanges), reusable for
/// many right-hand sides.
#[derive(Debug, Clone)]
pub struct TridiagonalLu {
    dl: Vec<C64>,
    d: Vec<C64>,
    du: Vec<C64>,
    du2: Vec<C64>,
    swap: Vec<bool>,
}

impl TridiagonalLu {
    /// Factors the matrix with sub-diagonal `dl`, diagonal `d` and
    /// super-diagonal `du`.
    pub fn factor(mut dl: Vec<C64>, mut d: Vec<C64>, mut du: Vec<C64>) -> Result<Self> {
        let n = d.len();
        if dl.len() + 1 != n || du.len() + 1 != n {
            return Err(Error::Parameter("inconsistent tridiagonal bands".into()));
        }
        let mut du2 = vec![C64::new(0.0, 0.0); n.saturating_sub(2)];
        let mut swap = vec![false; n.saturating_sub(1)];
        for i in 0..n.saturating_sub(1) {
            if d[i].norm() >= dl[i].norm() {
                if d[i].norm() == 0.0 {
                    return Err(Error::Consistency(format!("singular tridiagonal matrix at row {i}")));
                }
                let f = dl[i] / d[i];
                dl[i] = f;
                d[i + 1] -= f * du[i];
            } else {
                let f = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = f;
                let t = du[i];
                du[i] = d[i + 1];
                d[i + 1] = t - f * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] = -f * du[i + 1];
                }
                swap[i] = true;
            }
        }
        if n > 0 && d[n - 1].norm() == 0.0 {
            return Err(Error::Consistency("singular tridiagonal matrix at the last row".into()));
        }
        Ok(TridiagonalLu { dl, d, du, du2, swap })
    }

    pub fn solve(&self, b: &[C64]) -> Vec<C64> {
        let n = self.d.len();
        let mut x = b.to_vec();
        for i in 0..n.saturating_sub(1) {
            if self.swap[i] {
                let t = x[i];
                x[i] = x[i + 1];
                let xi = x[i];
                x[i + 1] = t - self.dl[i] * xi;
            } else {
                let xi = x[i];
                x[i + 1] -= self.dl[i] * xi;
            }
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            if i + 1 < n {
                s -= self.du[i] * x[i + 1];
            }
            if i + 2 < n {
                s -= self.du2[i] * x[i + 2];
            }
            x[i] = s / self.d[i];
        }
        x
    }
}

/// Roots of `(P(k)f, f) = −(k − k₁)(k − k₂)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootPair {
    pub k1: f64,
    pub k2: f64,
}

/// `k₁,₂ = (c₁ ± √(c₁² + 4‖f′‖²))/2` with `c₁ = ξ Σ v|f|² h`, for `f`
/// normalized to unit discrete norm.
pub fn hyperbolicity_roots(grid: &PencilGrid1D, xi: f64, f: &[C64]) -> Result<RootPair> {
    if f.len() != grid.unknowns() {
        return Err(Error::Parameter(format!("test vector needs {} entries", grid.unknowns())));
    }
    let nrm = grid.norm(f);
    if !(nrm > 0.0) {
        return Err(Error::Parameter("test vector vanishes".into()));
    }
    let h = grid.step();
    let c1 = xi * h * grid.v.iter().zip(f).map(|(v, z)| v * z.norm_sqr()).sum::<f64>() / (nrm * nrm);
    let e = grid.dirichlet_energy(f) / (nrm * nrm);
    let disc = (c1 * c1 + 4.0 * e).sqrt();
    Ok(RootPair {
        k1: 0.5 * (c1 + disc),
        k2: 0.5 * (c1 - disc),
    })
}

/// Solution of `P(k)ψ = f` with the resolvent bound and the solve residual.
#[derive(Debug, Clone, PartialEq)]
pub struct PencilSolve {
    pub psi: Vec<C64>,
    pub norm_psi: f64,
    /// `(Im k)^{−2} ‖f‖`.
    pub bound: f64,
    /// `bound − ‖ψ‖`.
    pub slack: f64,
    /// `‖P(k)ψ − f‖ / ‖f‖`.
    pub residual: f64,
}

fn factor_pencil(grid: &PencilGrid1D, xi: f64, k: C64) -> Result<TridiagonalLu> {
    let (lo, d, up) = grid.bands(xi, k);
    TridiagonalLu::factor(lo, d, up).map_err(|e| Error::Consistency(format!("pencil factorization failed at k = {k}: {e}")))
}

pub fn solve_pencil(grid: &PencilGrid1D, xi: f64, k: C64, f: &[C64]) -> Result<PencilSolve> {
    if !(k.im > 0.0) {
        return Err(Error::Parameter(format!("the pencil is solved for Im k > 0, got {k}")));
    }
    if f.len() != grid.unknowns() {
        return Err(Error::Parameter(format!("right-hand side needs {} entries", grid.unknowns())));
    }
    let lu = factor_pencil(grid, xi, k)?;
    let psi = lu.solve(f);
    let nf = grid.norm(f);
    let r: Vec<C64> = grid.apply(xi, k, &psi).iter().zip(f).map(|(a, b)| a - b).collect();
    let norm_psi = grid.norm(&psi);
    let bound = nf / (k.im * k.im);
    Ok(PencilSolve {
        norm_psi,
        bound,
        slack: bound - norm_psi,
        residual: if nf > 0.0 { grid.norm(&r) / nf } else { grid.norm(&r) },
        psi,
    })
}

/// Least-squares decay fit of windowed Green-kernel norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub k_re: f64,
    pub k_im: f64,
    pub separations: Vec<f64>,
    pub log_norms: Vec<f64>,
    /// Minus the fitted slope of `ln‖χ₂P⁻¹χ₁‖` against the separation.
    pub gamma_fit: f64,
    pub r_squared: f64,
    /// `γ_fit / Im k`.
    pub nu_proxy: f64,
    /// Separations dropped because the norm underflowed.
    pub excluded: Vec<f64>,
    /// Largest relative mismatch between `‖χ₂P⁻¹(k)χ₁‖` and `‖χ₁P⁻¹(k̄)*χ₂‖`.
    pub symmetry_defect: f64,
}

impl DecayFit {
    /// CSV with columns `separation, log_norm`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["separation", "log_norm"])?;
        for (s, l) in self.separations.iter().zip(&self.log_norms) {
            wr.write_record([format!("{s:e}"), format!("{l:e}")])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Unit-width window `[a, a + 1)` as a range of unknown indices.
pub fn window(grid: &PencilGrid1D, a: f64) -> std::ops::Range<usize> {
    let h = grid.step();
    let first = ((a / h).ceil() as usize).max(1);
    let last = (((a + 1.0) / h).ceil() as usize).min(grid.nodes());
    (first - 1)..(last - 1)
}

/// Columns `P⁻¹(k) e_j` for the unknowns `j` in `cols`.
fn window_solves(lu: &TridiagonalLu, m: usize, cols: std::ops::Range<usize>) -> Vec<Vec<C64>> {
    cols.map(|j| {
        let mut e = vec![C64::new(0.0, 0.0); m];
        e[j] = C64::new(1.0, 0.0);
        lu.solve(&e)
    })
    .collect()
}

fn block_norm(cols: &[Vec<C64>], rows: std::ops::Range<usize>, adjoint: bool) -> f64 {
    let nr = rows.len();
    let nc = cols.len();
    let mut m = nalgebra::DMatrix::<C64>::zeros(nr, nc);
    for (c, col) in cols.iter().enumerate() {
        for (r, i) in rows.clone().enumerate() {
            m[(r, c)] = col[i];
        }
    }
    let m = if adjoint { m.adjoint() } else { m };
    m.singular_values().max()
}

fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) } else { 1.0 };
    (slope, r2)
}

/// Windowed norms `‖χ₂P⁻¹(k)χ₁‖` with `χ₁` on `[a, a+1)` and `χ₂` on
/// `[a+s, a+s+1)`, and the exponential fit against `s`.
pub fn combes_thomas_fit(grid: &PencilGrid1D, xi: f64, k: C64, left: f64, separations: &[f64]) -> Result<DecayFit> {
    if !(k.im > 0.0) {
        return Err(Error::Parameter(format!("decay fits need Im k > 0, got {k}")));
    }
    let l = grid.length();
    for &s in separations {
        if !(s > 2.0 && s < l - 2.0) || left + s + 1.0 > l {
            return Err(Error::Parameter(format!("separation {s} must lie in (2, L − 2) and fit the interval")));
        }
    }
    let m = grid.unknowns();
    let w1 = window(grid, left);
    let lu = factor_pencil(grid, xi, k)?;
    let lu_bar = factor_pencil(grid, xi, k.conj())?;
    let cols = window_solves(&lu, m, w1.clone());
    let cols_bar = window_solves(&lu_bar, m, w1);
    let mut fit = DecayFit {
        k_re: k.re,
        k_im: k.im,
        separations: Vec::new(),
        log_norms: Vec::new(),
        gamma_fit: f64::NAN,
        r_squared: 0.0,
        nu_proxy: f64::NAN,
        excluded: Vec::new(),
        symmetry_defect: 0.0,
    };
    for &s in separations {
        let w2 = window(grid, left + s);
        let nrm = block_norm(&cols, w2.clone(), false);
        if !(nrm > UNDERFLOW) {
            fit.excluded.push(s);
            continue;
        }
        let mirrored = block_norm(&cols_bar, w2, true);
        fit.symmetry_defect = fit.symmetry_defect.max((nrm - mirrored).abs() / nrm);
        fit.separations.push(s);
        fit.log_norms.push(nrm.ln());
    }
    if fit.separations.len() < 3 {
        return Err(Error::Consistency(format!(
            "only {} separations survived the underflow cut",
            fit.separations.len()
        )));
    }
    let (slope, r2) = linear_fit(&fit.separations, &fit.log_norms);
    fit.gamma_fit = -slope;
    fit.r_squared = r2;
    fit.nu_proxy = fit.gamma_fit / k.im;
    Ok(fit)
}

/// Separations `start, start + step, …` up to the point where a kernel
/// decaying at rate `Im k` would reach `1e-250`, and inside `(2, L − 2)`.
pub fn default_separations(grid: &PencilGrid1D, k_im: f64, left: f64, start: f64, step: f64) -> Vec<f64> {
    let cap = (250.0 * 10f64.ln() / k_im).min(grid.length() - left - 3.0);
    let mut out = Vec::new();
    let mut s = start.max(2.0 + step.min(1.0));
    while s <= cap {
        out.push(s);
        s += step;
    }
    out
}

/// One solve of [`resolvent_bound_battery`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    /// Index into the potential list.
    pub potential: usize,
    pub k_re: f64,
    pub k_im: f64,
    pub xi: f64,
    pub norm_psi: f64,
    pub bound: f64,
    pub residual: f64,
}

/// Battery of random solves checking the resolvent bound and the residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundBattery {
    pub solves: usize,
    pub violations: usize,
    pub min_slack_ratio: f64,
    pub max_residual: f64,
    pub records: Vec<BoundRecord>,
}

/// `count` solves with seeded right-hand sides, `k` in `[−3, 3] + i[0.2, 3]`
/// and `ξ ∈ [−2, 2]`, cycling through `potentials`.
pub fn resolvent_bound_battery(potentials: &[ShippedPotential], n: usize, length: f64, count: usize, seed: u64) -> Result<BoundBattery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grids: Vec<PencilGrid1D> = potentials.iter().map(|p| p.grid(length, n)).collect::<Result<_>>()?;
    let mut out = BoundBattery {
        solves: 0,
        violations: 0,
        min_slack_ratio: f64::INFINITY,
        max_residual: 0.0,
        records: Vec::with_capacity(count),
    };
    if grids.is_empty() {
        return Err(Error::Parameter("the battery needs at least one potential".into()));
    }
    for i in 0..count {
        let g = &grids[i % grids.len()];
        let k = C64::new(rng.random_range(-3.0..3.0), rng.random_range(0.2..3.0));
        let xi = rng.random_range(-2.0..2.0);
        let f: Vec<C64> = (0..g.unknowns())
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let s = solve_pencil(g, xi, k, &f)?;
        out.solves += 1;
        if s.norm_psi > s.bound {
            out.violations += 1;
        }
        out.min_slack_ratio = out.min_slack_ratio.min(s.slack / s.bound);
        out.max_residual = out.max_residual.max(s.residual);
        out.records.push(BoundRecord {
            potential: i % grids.len(),
            k_re: k.re,
            k_im: k.im,
            xi,
            norm_psi: s.norm_psi,
            bound: s.bound,
            residual: s.residual,
        });
    }
    Ok(out)
}

/// Largest box edge (interior nodes per axis) of the 3-D spot check.
pub const BOX_MAX_EDGE: usize = 24;

/// 7-point pencil on a cube `[0, L]³` with Dirichlet faces, solved by
/// BiCGSTAB.
#[derive(Debug, Clone, PartialEq)]
pub struct PencilBox3D {
    pub edge: usize,
    pub length: f64,
    v: Vec<f64>,
}

impl PencilBox3D {
    pub fn new(edge: usize, length: f64, v: impl Fn(f64, f64, f64) -> f64) -> Result<Self> {
        if !(2..=BOX_MAX_EDGE).contains(&edge) {
            return Err(Error::Parameter(format!("box edge must lie in 2..={BOX_MAX_EDGE}, got {edge}")));
        }
        let h = length / (edge + 1) as f64;
        let mut vals = Vec::with_capacity(edge * edge * edge);
        for i in 0..edge {
            for j in 0..edge {
                for l in 0..edge {
                    let (x, y, z) = ((i + 1) as f64 * h, (j + 1) as f64 * h, (l + 1) as f64 * h);
                    vals.push(v(x, y, z));
                }
            }
        }
        Ok(PencilBox3D { edge, length, v: vals })
    }

    pub fn step(&self) -> f64 {
        self.length / (self.edge + 1) as f64
    }

    pub fn apply(&self, xi: f64, k: C64, f: &[C64]) -> Vec<C64> {
        let e = self.edge;
        let h2 = self.step().powi(2);
        let idx = |i: usize, j: usize, l: usize| (i * e + j) * e + l;
        let mut out = vec![C64::new(0.0, 0.0); f.len()];
        for i in 0..e {
            for j in 0..e {
                for l in 0..e {
                    let c = idx(i, j, l);
                    let mut s = f[c] * (6.0 / h2 + k * xi * self.v[c] - k * k);
                    let mut nb = |ok: bool, n: usize| {
                        if ok {
                            s -= f[n] / h2;
                        }
                    };
                    nb(i > 0, if i > 0 { idx(i - 1, j, l) } else { 0 });
                    nb(i + 1 < e, if i + 1 < e { idx(i + 1, j, l) } else { 0 });
                    nb(j > 0, if j > 0 { idx(i, j - 1, l) } else { 0 });
                    nb(j + 1 < e, if j + 1 < e { idx(i, j + 1, l) } else { 0 });
                    nb(l > 0, if l > 0 { idx(i, j, l - 1) } else { 0 });
                    nb(l + 1 < e, if l + 1 < e { idx(i, j, l + 1) } else { 0 });
                    out[c] = s;
                }
            }
        }
        out
    }

    pub fn norm(&self, f: &[C64]) -> f64 {
        (self.step().powi(3) * f.iter().map(|z| z.norm_sqr()).sum::<f64>()).sqrt()
    }

    /// BiCGSTAB to relative residual `tol`.
    pub fn solve(&self, xi: f64, k: C64, f: &[C64], tol: f64, max_iter: usize) -> Result<PencilSolve> {
        if !(k.im > 0.0) {
            return Err(Error::Parameter(format!("the pencil is solved for Im k > 0, got {k}")));
        }
        let dot = |a: &[C64], b: &[C64]| a.iter().zip(b).map(|(x, y)| x.conj() * y).sum::<C64>();
        let nrm = |a: &[C64]| a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let n = f.len();
        let bn = nrm(f);
        let mut x = vec![C64::new(0.0, 0.0); n];
        let mut r = f.to_vec();
        let r0 = r.clone();
        let (mut rho, mut alpha, mut omega) = (C64::new(1.0, 0.0), C64::new(1.0, 0.0), C64::new(1.0, 0.0));
        let mut v = vec![C64::new(0.0, 0.0); n];
        let mut p = vec![C64::new(0.0, 0.0); n];
        let mut converged = bn == 0.0;
        for _ in 0..max_iter {
            if converged {
                break;
            }
            let rho_new = dot(&r0, &r);
            if rho_new.norm() == 0.0 {
                break;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
            v = self.apply(xi, k, &p);
            alpha = rho_new / dot(&r0, &v);
            let s: Vec<C64> = (0..n).map(|i| r[i] - alpha * v[i]).collect();
            if nrm(&s) <= tol * bn {
                for i in 0..n {
                    x[i] += alpha * p[i];
                }
                converged = true;
                break;
            }
            let t = self.apply(xi, k, &s);
            omega = dot(&t, &s) / dot(&t, &t);
            for i in 0..n {
                x[i] += alpha * p[i] + omega * s[i];
                r[i] = s[i] - omega * t[i];
            }
            rho = rho_new;
            if nrm(&r) <= tol * bn {
                converged = true;
            }
        }
        let res: Vec<C64> = self.apply(xi, k, &x).iter().zip(f).map(|(a, b)| a - b).collect();
        let residual = if bn > 0.0 { nrm(&res) / bn } else { 0.0 };
        if !converged && residual > tol {
            return Err(Error::Consistency(format!("BiCGSTAB stalled at relative residual {residual:e}")));
        }
        let norm_psi = self.norm(&x);
        let bound = self.norm(f) / (k.im * k.im);
        Ok(PencilSolve {
            psi: x,
            norm_psi,
            bound,
            slack: bound - norm_psi,
            residual,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn lu_matches_dense_solve() {
        let n = 9;
        let dl: Vec<C64> = (0..n - 1).map(|i| c(1.0 + i as f64, 0.5)).collect();
        let d: Vec<C64> = (0..n).map(|i| c(0.1 * i as f64, -0.3)).collect();
        let du: Vec<C64> = (0..n - 1).map(|i| c(-0.7, i as f64 * 0.2)).collect();
        let b: Vec<C64> = (0..n).map(|i| c(i as f64, 1.0)).collect();
        let mut m = nalgebra::DMatrix::<C64>::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = d[i];
            if i + 1 < n {
                m[(i + 1, i)] = dl[i];
                m[(i, i + 1)] = du[i];
            }
        }
        let lu = TridiagonalLu::factor(dl, d, du).unwrap();
        let x = lu.solve(&b);
        let xv = nalgebra::DVector::from_vec(x);
        let r = &m * xv - nalgebra::DVector::from_vec(b);
        assert!(r.norm() < 1e-12);
    }

    #[test]
    fn free_roots_are_symmetric() {
        let g = PencilGrid1D::new(PI, 256, |_| 0.0).unwrap();
        let h = g.step();
        let f: Vec<C64> = (0..g.unknowns()).map(|j| c(g.x(j).sin(), 0.0)).collect();
        let r = hyperbolicity_roots(&g, 1.3, &f).unwrap();
        let exact = 2.0 / h * (h / 2.0).sin();
        assert!((r.k1 - exact).abs() < 1e-10 && (r.k2 + exact).abs() < 1e-10);
        assert!((r.k1 - 1.0).abs() < 1e-5);
        assert!(hyperbolicity_roots(&g, 1.0, &vec![c(0.0, 0.0); g.unknowns()]).is_err());
    }

    #[test]
    fn free_eigenmode_solve() {
        let g = PencilGrid1D::new(PI, 128, |_| 0.0).unwrap();
        let h = g.step();
        let j = 3.0;
        let lam = 4.0 / (h * h) * (j * h / 2.0).sin().powi(2);
        let f: Vec<C64> = (0..g.unknowns()).map(|i| c((j * g.x(i)).sin(), 0.0)).collect();
        let k = c(0.4, 0.9);
        let s = solve_pencil(&g, 0.7, k, &f).unwrap();
        for (p, fi) in s.psi.iter().zip(&f) {
            assert!((p - fi / (lam - k * k)).norm() < 1e-12);
        }
    }

    #[test]
    fn random_potential_bound() {
        let g = ShippedPotential::RandomCells { seed: 4 }.grid(64.0, 1024).unwrap();
        let f: Vec<C64> = (0..g.unknowns()).map(|i| c((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos())).collect();
        let s = solve_pencil(&g, 1.0, c(1.0, 1.0), &f).unwrap();
        assert!(s.norm_psi <= s.bound && s.slack >= 0.0);
        assert!(s.residual <= 1e-10, "{}", s.residual);
    }

    #[test]
    fn window_has_eight_nodes() {
        let g = PencilGrid1D::new(512.0, 4096, |_| 0.0).unwrap();
        let w = window(&g, 1.0);
        assert_eq!(w.len(), 8);
        assert!((g.x(w.start) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn free_decay_rate() {
        let g = PencilGrid1D::new(512.0, 4096, |_| 0.0).unwrap();
        let k = c(0.0, 1.0);
        let seps = default_separations(&g, k.im, 1.0, 4.0, 4.0);
        let fit = combes_thomas_fit(&g, 1.0, k, 1.0, &seps).unwrap();
        // discrete free kernel decays at acosh(1 − h²k²/2)/h
        let h = g.step();
        let discrete = (1.0 + h * h / 2.0).acosh() / h;
        assert!((fit.gamma_fit - 1.0).abs() < 0.05);
        assert!((fit.gamma_fit - discrete).abs() < 1e-6, "{} vs {discrete}", fit.gamma_fit);
        assert!(fit.r_squared > 0.999999);
        assert!(fit.symmetry_defect < 1e-8);
    }

    #[test]
    fn bounded_potential_decay() {
        let g = ShippedPotential::Cosine.grid(512.0, 4096).unwrap();
        let k = c(0.5, 1.0);
        let seps = default_separations(&g, k.im, 1.0, 4.0, 4.0);
        let fit = combes_thomas_fit(&g, 1.0, k, 1.0, &seps).unwrap();
        assert!(fit.gamma_fit >= 0.5 * k.im && fit.r_squared >= 0.98, "{fit:?}");
        assert!(fit.symmetry_defect < 1e-8);
    }

    #[test]
    fn separations_are_validated() {
        let g = PencilGrid1D::new(64.0, 512, |_| 0.0).unwrap();
        assert!(matches!(
            combes_thomas_fit(&g, 1.0, c(0.0, 1.0), 1.0, &[1.0, 5.0, 9.0]),
            Err(Error::Parameter(_))
        ));
        assert!(PencilGrid1D::new(1.0, 10, |_| 0.0).is_err());
    }

    #[test]
    fn box_solve_bound_and_residual() {
        let b = PencilBox3D::new(10, 4.0, |x, y, z| (x + y - z).cos()).unwrap();
        let f: Vec<C64> = (0..1000).map(|i| c(((i * 7) % 11) as f64 - 5.0, 0.0)).collect();
        let s = b.solve(0.8, c(0.6, 1.0), &f, 1e-11, 2000).unwrap();
        assert!(s.residual <= 1e-10);
        assert!(s.norm_psi <= s.bound);
        assert!(PencilBox3D::new(30, 1.0, |_, _, _| 0.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn roots_straddle_zero(seed in 0u64..10_000, xi in -3.0f64..3.0) {
            let g = ShippedPotential::RandomCells { seed }.grid(16.0, 128).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f: Vec<C64> = (0..g.unknowns()).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            let r = hyperbolicity_roots(&g, xi, &f).unwrap();
            prop_assert!(r.k1 > 0.0 && r.k2 < 0.0 && r.k1 > r.k2);
        }

        #[test]
        fn resolvent_bound_holds(seed in 0u64..10_000, kr in -3.0f64..3.0, ki in 0.1f64..3.0, xi in -2.0f64..2.0) {
            let g = ShippedPotential::RandomCells { seed }.grid(32.0, 256).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let f: Vec<C64> = (0..g.unknowns()).map(|_| c(rng.random_range(-1.0..1.0), 0.0)).collect();
            let s = solve_pencil(&g, xi, c(kr, ki), &f).unwrap();
            prop_assert!(s.norm_psi <= s.bound * (1.0 + 1e-12));
            prop_assert!(s.residual <= 1e-10);
        }
    }
}
