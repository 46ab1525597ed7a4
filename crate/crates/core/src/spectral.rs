//! Spectral densities from the Jost factorizations, the two-parameter
//! entropy diagnostic and the disc mean-value check.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, C64};
use crate::ode::{self, Wavenumber};
use crate::potential::PotentialGrid;
use crate::quad::simpson_weights;
use crate::scattering::{self, fhat, fhat_coupling, SourceVector};

/// Floor applied to `ln⁻` so that exact amplitude zeros stay finite.
pub const LOG_FLOOR: f64 = -700.0;

/// Smallest admissible resolution (intervals per axis) of an entropy scan.
pub const MIN_RESOLUTION: usize = 16;

/// Largest admissible fraction of resonant nodes in a scan.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.01;

/// `ln⁻ x = min(ln x, 0)`, floored at `floor`.
pub fn log_minus(x: f64, floor: f64) -> f64 {
    if x > 0.0 {
        x.ln().min(0.0).max(floor)
    } else {
        floor
    }
}

/// Density of the spectral measure of the source at `λ = k²` and coupling `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralSample {
    pub lambda: f64,
    pub t: f64,
    pub density: f64,
    pub log_minus: f64,
}

impl SpectralSample {
    fn new(k: f64, t: f64, amplitude: &[C64]) -> Self {
        let a2: f64 = amplitude.iter().map(|z| z.norm_sqr()).sum();
        let density = k / PI * a2;
        SpectralSample {
            lambda: k * k,
            t,
            density,
            log_minus: log_minus(density, LOG_FLOOR),
        }
    }
}

fn real_k(k: Wavenumber) -> Result<f64> {
    if !k.is_real() {
        return Err(Error::Parameter(format!("density needs real k, got {}", k.value())));
    }
    Ok(k.value().re)
}

fn solve_amplitude(m: &linalg::CMat, rhs: &[C64]) -> Vec<C64> {
    let v = m * linalg::CMat::from_column_slice(rhs.len(), 1, rhs);
    v.as_slice().to_vec()
}

/// `σ′(k², t) = (k/π)‖J⁻¹(0, k, t) F̂(k, t)‖²`.
pub fn density(q: &PotentialGrid, f: &SourceVector, k: Wavenumber, t: f64) -> Result<SpectralSample> {
    let kv = real_k(k)?;
    let (j0, _) = scattering::jost_at_zero(q, k.value(), C64::new(t, 0.0), ode::DEFAULT_TOL)?;
    let jinv = scattering::invert_jost(&j0, kv, t)?;
    let fh = fhat(q, f, k, t)?;
    Ok(SpectralSample::new(kv, t, &solve_amplitude(&jinv, &fh)))
}

/// `σ′(k², kξ) = (k/π)‖D⁻¹(0, k, ξ) F̂(k, kξ)‖²`.
pub fn density_via_pencil(q: &PotentialGrid, f: &SourceVector, k: Wavenumber, xi: f64) -> Result<SpectralSample> {
    let kv = real_k(k)?;
    let t = kv * xi;
    let jd = scattering::pencil_jost(q, k, xi)?;
    let dinv = scattering::invert_jost(&jd.d0, kv, t)?;
    let fh = fhat(q, f, k, t)?;
    Ok(SpectralSample::new(kv, t, &solve_amplitude(&dinv, &fh)))
}

/// Rectangle `[c, d] × [−T, T]` in `(λ, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rectangle {
    pub c: f64,
    pub d: f64,
    pub t_max: f64,
}

/// Interval counts along the `k` and `t` (or `ξ`) axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub n_lambda: usize,
    pub n_t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanMode {
    /// `σ′(λ, t)` on the rectangle itself.
    FixedT,
    /// `σ′(k², kξ)` with `ξ ∈ [−T, T]` and area element `2k² dk dξ`.
    PencilSlanted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub rectangle: Rectangle,
    pub resolution: Resolution,
    pub mode: ScanMode,
    /// Row-major in `t`: index `j * (n_lambda + 1) + i`.
    pub samples: Vec<SpectralSample>,
    /// Flat indices of resonant nodes; they carry zero weight.
    pub excluded: Vec<usize>,
    /// Quadrature weight of every node, Jacobian included.
    pub weights: Vec<f64>,
    pub entropy: f64,
    pub variation_bound: f64,
}

impl EntropyReport {
    /// Entropy recomputed with a different `ln⁻` floor.
    pub fn entropy_with_floor(&self, floor: f64) -> f64 {
        let mut skip = self.excluded.iter().peekable();
        let mut acc = 0.0;
        for (idx, (s, w)) in self.samples.iter().zip(&self.weights).enumerate() {
            if skip.peek() == Some(&&idx) {
                skip.next();
                continue;
            }
            acc += w * log_minus(s.density, floor);
        }
        acc
    }

    pub fn node_count(&self) -> usize {
        self.samples.len()
    }

    /// CSV with columns `lambda, t, density, log_minus`; excluded nodes are
    /// omitted.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["lambda", "t", "density", "log_minus"])?;
        let mut skip = self.excluded.iter().peekable();
        for (idx, s) in self.samples.iter().enumerate() {
            if skip.peek() == Some(&&idx) {
                skip.next();
                continue;
            }
            wr.write_record([
                format!("{:e}", s.lambda),
                format!("{:e}", s.t),
                format!("{:e}", s.density),
                format!("{:e}", s.log_minus),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Grid evaluation of the density over the rectangle, uniform in `k`.
///
/// Nodes are evaluated in parallel and summed serially in a fixed order, so
/// the report does not depend on the thread count.
pub fn entropy_scan(
    q: &PotentialGrid,
    f: &SourceVector,
    rect: Rectangle,
    res: Resolution,
    mode: ScanMode,
) -> Result<EntropyReport> {
    if !(rect.c > 0.0) || !(rect.d > rect.c) || !(rect.t_max > 0.0) {
        return Err(Error::Parameter(format!(
            "need 0 < c < d and T > 0, got c = {}, d = {}, T = {}",
            rect.c, rect.d, rect.t_max
        )));
    }
    if res.n_lambda < MIN_RESOLUTION || res.n_t < MIN_RESOLUTION {
        return Err(Error::Parameter(format!(
            "resolutions must be at least {MIN_RESOLUTION}, got ({}, {})",
            res.n_lambda, res.n_t
        )));
    }
    let (k0, k1) = (rect.c.sqrt(), rect.d.sqrt());
    let hk = (k1 - k0) / res.n_lambda as f64;
    let ht = 2.0 * rect.t_max / res.n_t as f64;
    let ks: Vec<f64> = (0..=res.n_lambda).map(|i| k0 + hk * i as f64).collect();
    let ts: Vec<f64> = (0..=res.n_t).map(|j| -rect.t_max + ht * j as f64).collect();
    let wk = simpson_weights(res.n_lambda, hk);
    let wt = simpson_weights(res.n_t, ht);
    let nk = ks.len();

    let evaluated: Vec<Result<Option<SpectralSample>>> = (0..nk * ts.len())
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx % nk, idx / nk);
            let k = Wavenumber::real(ks[i])?;
            let s = match mode {
                ScanMode::FixedT => density(q, f, k, ts[j]),
                ScanMode::PencilSlanted => density_via_pencil(q, f, k, ts[j]),
            };
            match s {
                Ok(s) => Ok(Some(s)),
                Err(Error::Resonance { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut samples = Vec::with_capacity(evaluated.len());
    let mut excluded = Vec::new();
    let mut weights = Vec::with_capacity(evaluated.len());
    for (idx, e) in evaluated.into_iter().enumerate() {
        let (i, j) = (idx % nk, idx / nk);
        let k = ks[i];
        let jac = match mode {
            ScanMode::FixedT => 2.0 * k,
            ScanMode::PencilSlanted => 2.0 * k * k,
        };
        weights.push(wk[i] * wt[j] * jac);
        match e? {
            Some(s) => samples.push(s),
            None => {
                excluded.push(idx);
                let t = match mode {
                    ScanMode::FixedT => ts[j],
                    ScanMode::PencilSlanted => k * ts[j],
                };
                samples.push(SpectralSample {
                    lambda: k * k,
                    t,
                    density: 0.0,
                    log_minus: LOG_FLOOR,
                });
            }
        }
    }
    if excluded.len() as f64 >= MAX_EXCLUDED_FRACTION * samples.len() as f64 && !excluded.is_empty() {
        return Err(Error::Consistency(format!(
            "{} of {} scan nodes are resonant",
            excluded.len(),
            samples.len()
        )));
    }

    let mut report = EntropyReport {
        rectangle: rect,
        resolution: res,
        mode,
        samples,
        excluded,
        weights,
        entropy: 0.0,
        variation_bound: 0.0,
    };
    report.entropy = report.entropy_with_floor(LOG_FLOOR);
    let excluded_set: std::collections::HashSet<usize> = report.excluded.iter().copied().collect();
    let mut variation: f64 = 0.0;
    for j in 0..ts.len() {
        let mut acc = 0.0;
        for i in 0..nk {
            let idx = j * nk + i;
            if excluded_set.contains(&idx) {
                continue;
            }
            let d = report.samples[idx].density;
            acc += match mode {
                ScanMode::FixedT => wk[i] * 2.0 * ks[i] * d,
                ScanMode::PencilSlanted => wk[i] * d,
            };
        }
        variation = variation.max(acc);
    }
    report.variation_bound = variation;
    Ok(report)
}

/// `g(k) = ln‖D⁻¹(0, k, ξ) F̂(k, kξ)‖` for `Im k > 0`.
pub fn log_amplitude(q: &PotentialGrid, f: &SourceVector, k: C64, xi: f64) -> Result<f64> {
    let w = Wavenumber::upper(k)?;
    let jd = scattering::pencil_jost(q, w, xi)?;
    let (dinv, _) = linalg::checked_inverse(&jd.d0, "D(0, k, ξ)")?;
    let fh = fhat_coupling(q, f, k, k * xi)?;
    Ok(linalg::vec_norm(&solve_amplitude(&dinv, &fh)).ln())
}

/// Disc in the upper half-plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub center_re: f64,
    pub center_im: f64,
    pub radius: f64,
}

impl Disc {
    pub fn center(&self) -> C64 {
        C64::new(self.center_re, self.center_im)
    }
}

/// Minimal distance kept between the disc and the real axis.
pub const AXIS_OFFSET: f64 = 1e-4;

/// Slack of the mean-value comparison.
pub const SUBHARMONIC_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubharmonicReport {
    /// Circle average of `g`.
    pub lhs: f64,
    /// `g` at the center.
    pub rhs: f64,
    pub ok: bool,
    /// Radius actually used (smaller than requested after a retry).
    pub radius: f64,
}

fn circle_average(q: &PotentialGrid, f: &SourceVector, xi: f64, center: C64, radius: f64, m: usize) -> Result<f64> {
    let vals: Vec<Result<f64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let th = 2.0 * PI * j as f64 / m as f64;
            log_amplitude(q, f, center + C64::from_polar(radius, th), xi)
        })
        .collect();
    let mut acc = 0.0;
    for v in vals {
        acc += v?;
    }
    Ok(acc / m as f64)
}

/// Compares the average of `g` over `|k − k₀| = ρ` (trapezoid rule on `m`
/// points) with `g(k₀)`. A failed circle evaluation shrinks `ρ` by 10% once.
pub fn subharmonic_check(q: &PotentialGrid, f: &SourceVector, xi: f64, disc: Disc, m: usize) -> Result<SubharmonicReport> {
    let center = disc.center();
    if !(disc.radius > 0.0) || center.im - disc.radius < AXIS_OFFSET {
        return Err(Error::Parameter(format!(
            "disc |k − {center}| ≤ {} must stay {AXIS_OFFSET} above the real axis",
            disc.radius
        )));
    }
    if m < 8 {
        return Err(Error::Parameter("need at least 8 circle points".into()));
    }
    let rhs = log_amplitude(q, f, center, xi)?;
    let mut radius = disc.radius;
    let lhs = match circle_average(q, f, xi, center, radius, m) {
        Ok(v) => v,
        Err(_) => {
            radius *= 0.9;
            circle_average(q, f, xi, center, radius, m)?
        }
    };
    Ok(SubharmonicReport {
        lhs,
        rhs,
        ok: lhs >= rhs - SUBHARMONIC_TOL,
        radius,
    })
}
