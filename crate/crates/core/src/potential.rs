//! Matrix-valued potentials sampled on a uniform radial grid.
//!
//! A [`PotentialGrid`] stores Hermitian `n × n` samples `Q(r_i)` at
//! `r_i = i h`. Between nodes the potential is linearly interpolated; beyond
//! `support_radius` it is identically zero. Every computation in the crate
//! runs on such a compactly supported truncation.

use std::io::Read;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, C64};
use crate::quad::simpson_weights;

pub const HERMITIAN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialGrid {
    dim: usize,
    step: f64,
    samples: Vec<CMat>,
    support_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialNorms {
    /// `∫ ‖Q(s)‖² ds`
    pub l2: f64,
    /// `max_i ‖Q(r_i)‖`
    pub linf: f64,
    /// `∫ r ‖Q(r)‖² dr`
    pub radial_sup_l2_weighted: f64,
}

impl PotentialNorms {
    /// `‖Q‖₂ = (∫‖Q‖²)^{1/2}`.
    pub fn l2_norm(&self) -> f64 {
        self.l2.sqrt()
    }
}

/// Decay envelope multiplying random potentials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Envelope {
    Flat,
    /// `(1 + r)^{-p}`
    Power { p: f64 },
    /// `e^{-a r}`
    Exponential { rate: f64 },
    /// `⟨r⟩^{-γ} = (1 + r²)^{-γ/2}`
    Japanese { gamma: f64 },
}

impl Envelope {
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            Envelope::Flat => 1.0,
            Envelope::Power { p } => (1.0 + r).powf(-p),
            Envelope::Exponential { rate } => (-rate * r).exp(),
            Envelope::Japanese { gamma } => (1.0 + r * r).powf(-0.5 * gamma),
        }
    }
}

pub type MatrixFn = Arc<dyn Fn(f64) -> CMat + Send + Sync>;

/// Declarative description of a potential.
#[derive(Clone)]
pub enum PotentialSpec {
    Zero { dim: usize },
    /// The same Hermitian block at every node inside the support.
    Constant { value: CMat },
    /// Closed-form entries sampled at the nodes.
    ClosedForm { dim: usize, f: MatrixFn },
    /// Seeded random Hermitian matrices drawn at knots spaced `knot_spacing`
    /// apart, linearly interpolated and multiplied by `envelope`.
    RandomHermitian {
        dim: usize,
        seed: u64,
        amplitude: f64,
        knot_spacing: f64,
        envelope: Envelope,
    },
    /// Explicit samples at the grid nodes `0, h, 2h, …`.
    Tabulated { samples: Vec<CMat> },
}

impl std::fmt::Debug for PotentialSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PotentialSpec::Zero { dim } => write!(f, "Zero({dim})"),
            PotentialSpec::Constant { value } => write!(f, "Constant({value})"),
            PotentialSpec::ClosedForm { dim, .. } => write!(f, "ClosedForm({dim})"),
            PotentialSpec::RandomHermitian { dim, seed, .. } => {
                write!(f, "RandomHermitian(dim={dim}, seed={seed})")
            }
            PotentialSpec::Tabulated { samples } => write!(f, "Tabulated({} nodes)", samples.len()),
        }
    }
}

/// Grid geometry for [`build_potential`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub step: f64,
    pub support_radius: f64,
    pub r_max: f64,
}

impl GridSpec {
    /// Grid on `[0, R]` with the default step `1e-3 R`.
    pub fn with_default_step(support_radius: f64) -> Self {
        GridSpec {
            step: 1e-3 * support_radius,
            support_radius,
            r_max: support_radius,
        }
    }
}

fn node_count(r_max: f64, h: f64) -> usize {
    (r_max / h).round() as usize + 1
}

/// Builds a potential grid from a declarative spec.
pub fn build_potential(spec: &PotentialSpec, grid: GridSpec) -> Result<PotentialGrid> {
    let GridSpec {
        step: h,
        support_radius,
        r_max,
    } = grid;
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Parameter(format!("grid step must be positive, got {h}")));
    }
    if !(support_radius > 0.0) || r_max < support_radius {
        return Err(Error::Parameter(format!(
            "need r_max ≥ R > 0, got R = {support_radius}, r_max = {r_max}"
        )));
    }
    let n_nodes = node_count(r_max, h);
    let support_idx = (support_radius / h).round() as usize;
    let r_of = |i: usize| i as f64 * h;

    let samples: Vec<CMat> = match spec {
        PotentialSpec::Zero { dim } => {
            check_dim(*dim)?;
            vec![CMat::zeros(*dim, *dim); n_nodes]
        }
        PotentialSpec::Constant { value } => {
            check_square(value)?;
            check_hermitian(value, 0)?;
            (0..n_nodes)
                .map(|i| {
                    if i <= support_idx {
                        value.clone()
                    } else {
                        CMat::zeros(value.nrows(), value.nrows())
                    }
                })
                .collect()
        }
        PotentialSpec::ClosedForm { dim, f } => {
            check_dim(*dim)?;
            let mut out = Vec::with_capacity(n_nodes);
            for i in 0..n_nodes {
                if i <= support_idx {
                    let q = f(r_of(i));
                    if q.nrows() != *dim || q.ncols() != *dim {
                        return Err(Error::Input(format!(
                            "closed-form sample at index {i} has shape {}x{}, expected {dim}x{dim}",
                            q.nrows(),
                            q.ncols()
                        )));
                    }
                    check_hermitian(&q, i)?;
                    out.push(q);
                } else {
                    out.push(CMat::zeros(*dim, *dim));
                }
            }
            out
        }
        PotentialSpec::RandomHermitian {
            dim,
            seed,
            amplitude,
            knot_spacing,
            envelope,
        } => {
            check_dim(*dim)?;
            if !(*knot_spacing > 0.0) {
                return Err(Error::Parameter("knot_spacing must be positive".into()));
            }
            let n_knots = (r_max / knot_spacing).ceil() as usize + 2;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let scale = amplitude / (*dim as f64).sqrt();
            let knots: Vec<CMat> = (0..n_knots)
                .map(|_| random_hermitian(*dim, &mut rng) * C64::new(scale, 0.0))
                .collect();
            (0..n_nodes)
                .map(|i| {
                    if i > support_idx {
                        return CMat::zeros(*dim, *dim);
                    }
                    let r = r_of(i);
                    let x = r / knot_spacing;
                    let j = (x.floor() as usize).min(n_knots - 2);
                    let w = x - j as f64;
                    let q = &knots[j] * C64::new(1.0 - w, 0.0) + &knots[j + 1] * C64::new(w, 0.0);
                    linalg::re_part(&q) * C64::new(envelope.eval(r), 0.0)
                })
                .collect()
        }
        PotentialSpec::Tabulated { samples } => {
            if samples.is_empty() {
                return Err(Error::Input("tabulated potential has no samples".into()));
            }
            let dim = samples[0].nrows();
            for (i, q) in samples.iter().enumerate() {
                if q.nrows() != dim || q.ncols() != dim {
                    return Err(Error::Input(format!("tabulated sample {i} has inconsistent shape")));
                }
                check_hermitian(q, i)?;
            }
            if samples.len() < n_nodes {
                return Err(Error::Input(format!(
                    "tabulated potential has {} samples but the grid needs {n_nodes}",
                    samples.len()
                )));
            }
            samples
                .iter()
                .take(n_nodes)
                .enumerate()
                .map(|(i, q)| if i <= support_idx { q.clone() } else { CMat::zeros(dim, dim) })
                .collect()
        }
    };

    let grid = PotentialGrid {
        dim: samples[0].nrows(),
        step: h,
        samples,
        support_radius: support_idx as f64 * h,
    };
    grid.validate()?;
    Ok(grid)
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 {
        Err(Error::Parameter("matrix dimension must be positive".into()))
    } else {
        Ok(())
    }
}

fn check_square(m: &CMat) -> Result<()> {
    if m.nrows() == 0 || m.nrows() != m.ncols() {
        Err(Error::Parameter("potential block must be square and non-empty".into()))
    } else {
        Ok(())
    }
}

fn check_hermitian(q: &CMat, index: usize) -> Result<()> {
    if !linalg::is_finite(q) {
        return Err(Error::Input(format!("non-finite potential sample at index {index}")));
    }
    let defect = linalg::hermiticity_defect(q);
    if defect > HERMITIAN_TOL {
        return Err(Error::Input(format!(
            "potential sample at index {index} is not Hermitian (defect {defect:e})"
        )));
    }
    Ok(())
}

fn random_hermitian(n: usize, rng: &mut ChaCha8Rng) -> CMat {
    let mut m = CMat::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let re: f64 = StandardNormal.sample(rng);
            if i == j {
                m[(i, i)] = C64::new(re, 0.0);
            } else {
                let im: f64 = StandardNormal.sample(rng);
                let z = C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2;
                m[(i, j)] = z;
                m[(j, i)] = z.conj();
            }
        }
    }
    m
}

impl PotentialGrid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    pub fn r_max(&self) -> f64 {
        self.step * (self.samples.len() - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[CMat] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &CMat {
        &self.samples[i]
    }

    pub fn r(&self, i: usize) -> f64 {
        i as f64 * self.step
    }

    /// Index of the node at `support_radius`.
    pub fn support_index(&self) -> usize {
        (self.support_radius / self.step).round() as usize
    }

    /// Grid nodes `0, h, …, R` covering the support.
    pub fn support_nodes(&self) -> Vec<f64> {
        (0..=self.support_index()).map(|i| self.r(i)).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.samples.iter().all(|q| q.iter().all(|z| *z == C64::new(0.0, 0.0)))
    }

    /// Linear interpolation of `Q(r)`, zero beyond the support. The result is
    /// written column-major into `out` (length `dim²`).
    pub fn interp_into(&self, r: f64, out: &mut [C64]) {
        let n2 = self.dim * self.dim;
        debug_assert_eq!(out.len(), n2);
        let last = self.support_index();
        let x = r / self.step;
        if !(x >= -1e-9) || x > last as f64 + 1e-9 {
            out.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
            return;
        }
        let x = x.clamp(0.0, last as f64);
        let j = (x.floor() as usize).min(last.saturating_sub(1));
        if last == 0 {
            out.copy_from_slice(self.samples[0].as_slice());
            return;
        }
        let w = x - j as f64;
        let a = self.samples[j].as_slice();
        let b = self.samples[j + 1].as_slice();
        for k in 0..n2 {
            out[k] = a[k] * (1.0 - w) + b[k] * w;
        }
    }

    pub fn value_at(&self, r: f64) -> CMat {
        let mut m = CMat::zeros(self.dim, self.dim);
        self.interp_into(r, m.as_mut_slice());
        m
    }

    /// Checks the grid invariants.
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::Parameter("grid step must be positive".into()));
        }
        let last = self.support_index();
        for (i, q) in self.samples.iter().enumerate() {
            check_hermitian(q, i)?;
            if i > last && q.iter().any(|z| *z != C64::new(0.0, 0.0)) {
                return Err(Error::Input(format!(
                    "sample {i} lies beyond the support radius but is non-zero"
                )));
            }
        }
        Ok(())
    }

    /// Writes the grid as CSV: `r, Re Q11, Im Q11, Re Q12, Im Q12, …`
    /// (entries in row-major order).
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["r".to_string()];
        for i in 0..self.dim {
            for j in 0..self.dim {
                header.push(format!("re_q{}{}", i + 1, j + 1));
                header.push(format!("im_q{}{}", i + 1, j + 1));
            }
        }
        wr.write_record(&header)?;
        for (idx, q) in self.samples.iter().enumerate() {
            let mut rec = vec![format!("{:.17e}", self.r(idx))];
            for i in 0..self.dim {
                for j in 0..self.dim {
                    rec.push(format!("{:.17e}", q[(i, j)].re));
                    rec.push(format!("{:.17e}", q[(i, j)].im));
                }
            }
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Reads a tabulated potential in the CSV layout of [`PotentialGrid::write_csv`].
/// Returns the spec together with the detected grid step.
pub fn read_tabulated_csv<R: Read>(reader: R, dim: usize) -> Result<(PotentialSpec, f64)> {
    check_dim(dim)?;
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut rs = Vec::new();
    let mut samples = Vec::new();
    for (row, rec) in rd.records().enumerate() {
        let rec = rec?;
        if rec.len() != 1 + 2 * dim * dim {
            return Err(Error::Input(format!(
                "row {row}: expected {} columns, found {}",
                1 + 2 * dim * dim,
                rec.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Input(format!("row {row}: {e}")))
        };
        rs.push(parse(&rec[0])?);
        let mut q = CMat::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                let c = 1 + 2 * (i * dim + j);
                q[(i, j)] = C64::new(parse(&rec[c])?, parse(&rec[c + 1])?);
            }
        }
        check_hermitian(&q, row)?;
        samples.push(q);
    }
    if rs.len() < 2 {
        return Err(Error::Input("tabulated potential needs at least two rows".into()));
    }
    let h = rs[1] - rs[0];
    for (i, r) in rs.iter().enumerate() {
        if (r - i as f64 * h).abs() > 1e-9 * h.max(1.0) {
            return Err(Error::Input(format!("row {i}: grid is not uniform from r = 0")));
        }
    }
    Ok((PotentialSpec::Tabulated { samples }, h))
}

/// `Π_n Q χ_[0,R] Π_n`: the upper-left `n × n` block restricted to `[0, R]`.
///
/// `R` is snapped to the nearest grid node.
pub fn truncate(q: &PotentialGrid, n: usize, radius: f64) -> Result<PotentialGrid> {
    if n == 0 || n > q.dim {
        return Err(Error::Parameter(format!(
            "truncation size {n} must lie in 1..={}",
            q.dim
        )));
    }
    if !(radius > 0.0) || radius > q.support_radius + 1e-9 * q.step {
        return Err(Error::Parameter(format!(
            "truncation radius {radius} must lie in (0, {}]",
            q.support_radius
        )));
    }
    let idx = ((radius / q.step).round() as usize).clamp(1, q.support_index());
    let samples = q
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if i <= idx {
                s.view((0, 0), (n, n)).into_owned()
            } else {
                CMat::zeros(n, n)
            }
        })
        .collect();
    Ok(PotentialGrid {
        dim: n,
        step: q.step,
        samples,
        support_radius: idx as f64 * q.step,
    })
}

/// Simpson quadrature of the operator-norm integrands over the stored grid.
pub fn norms(q: &PotentialGrid) -> PotentialNorms {
    let w = simpson_weights(q.len() - 1, q.step);
    let mut l2 = 0.0;
    let mut linf: f64 = 0.0;
    let mut radial = 0.0;
    for (i, s) in q.samples.iter().enumerate() {
        let v = linalg::op_norm(s);
        linf = linf.max(v);
        l2 += w[i] * v * v;
        radial += w[i] * q.r(i) * v * v;
    }
    PotentialNorms {
        l2,
        linf,
        radial_sup_l2_weighted: radial,
    }
}
