//! Reduction of the pencil system to a matrix Krein system and a direct
//! check of the factorization `Y = Y₀ U E X`.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, C64, I};
use crate::ode::{self, span_nodes, Block, Cell, MatrixOde, Options, System, Wavenumber};
use crate::potential::PotentialGrid;

/// `A(r, ξ) = −(iξ/2) U₂⁻¹(0, r) Q(r) U₁(0, r)` on the potential grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KreinCoefficient {
    pub xi: f64,
    step: f64,
    support_radius: f64,
    samples: Vec<CMat>,
}

impl KreinCoefficient {
    pub fn dim(&self) -> usize {
        self.samples[0].nrows()
    }

    pub fn samples(&self) -> &[CMat] {
        &self.samples
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    /// Linear interpolation; zero beyond the support.
    pub fn interp_into(&self, r: f64, out: &mut [C64]) {
        let last = self.samples.len() - 1;
        let x = r / self.step;
        if !(x >= -1e-9) || x > last as f64 + 1e-9 {
            out.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
            return;
        }
        let x = x.clamp(0.0, last as f64);
        if last == 0 {
            out.copy_from_slice(self.samples[0].as_slice());
            return;
        }
        let j = (x.floor() as usize).min(last - 1);
        let w = x - j as f64;
        let (a, b) = (self.samples[j].as_slice(), self.samples[j + 1].as_slice());
        for i in 0..out.len() {
            out[i] = a[i] * (1.0 - w) + b[i] * w;
        }
    }
}

/// Fundamental solution of the Krein system sampled on its nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct KreinState {
    pub nodes: Vec<f64>,
    pub values: Vec<CMat>,
}

fn stacked_exponentials(q: &PotentialGrid, xi: f64, nodes: &[f64]) -> Result<Vec<(CMat, CMat)>> {
    let n = q.dim();
    let n2 = n * n;
    let half_xi = C64::new(0.0, xi / 2.0);
    let sys = MatrixOde::new(2 * n, n, |r: f64, cell: Cell, out: &mut [C64]| {
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
    let states = ode::solve(&sys, init.as_slice(), nodes, &Options::default())?;
    Ok(states
        .into_iter()
        .map(|s| {
            let m = CMat::from_vec(2 * n, n, s);
            (m.view((0, 0), (n, n)).into_owned(), m.view((n, 0), (n, n)).into_owned())
        })
        .collect())
}

pub fn krein_coefficient(q: &PotentialGrid, xi: f64) -> Result<KreinCoefficient> {
    let nodes = q.support_nodes();
    let us = stacked_exponentials(q, xi, &nodes)?;
    let factor = C64::new(0.0, -xi / 2.0);
    let mut samples = Vec::with_capacity(q.len());
    for (i, (u1, u2)) in us.iter().enumerate() {
        let (u2inv, _) = linalg::checked_inverse(u2, "U₂(0, r)")?;
        samples.push(u2inv * q.sample(i) * u1 * factor);
    }
    Ok(KreinCoefficient {
        xi,
        step: q.step(),
        support_radius: q.support_radius(),
        samples,
    })
}

fn krein_generator(n: usize, k: C64, a: &[C64], out: &mut [C64]) {
    let m = 2 * n;
    out.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
    let tau = 2.0 * k;
    for i in 0..n {
        out[i * m + i] = I * tau;
    }
    for c in 0..n {
        for r in 0..n {
            // (1,2) block: −A*, entry (r, c) = −conj(A[c, r])
            out[(n + c) * m + r] = -a[r * n + c].conj();
            // (2,1) block: −A
            out[c * m + n + r] = -a[c * n + r];
        }
    }
}

/// `X′ = [[iτ, −A*], [−A, 0]] X`, `X(r0) = I`, with `τ = 2k`.
pub fn integrate_krein(a: &KreinCoefficient, k: C64, r0: f64, r1: f64) -> Result<KreinState> {
    if k == C64::new(0.0, 0.0) {
        return Err(Error::Parameter("k must be non-zero".into()));
    }
    let n = a.dim();
    let nodes = span_nodes(a.step, r0, r1);
    let sys = MatrixOde::new(2 * n, 2 * n, |r: f64, cell: Cell, out: &mut [C64]| {
        let mut av = vec![C64::new(0.0, 0.0); n * n];
        a.interp_into(r.clamp(cell.lo, cell.hi), &mut av);
        krein_generator(n, k, &av, out);
        Ok(())
    });
    let states = ode::solve(&sys, linalg::identity(2 * n).as_slice(), &nodes, &Options::default())?;
    Ok(KreinState {
        values: states.into_iter().map(|s| CMat::from_vec(2 * n, 2 * n, s)).collect(),
        nodes,
    })
}

/// Joint system for `U₁(0, r)`, `U₂(0, r)` and `X(r)` with `A` formed from
/// the current `U`s.
struct ChainSystem<'a> {
    q: &'a PotentialGrid,
    n: usize,
    k: C64,
    half_xi: C64,
    scratch: RefCell<(Vec<C64>, Vec<C64>, Vec<C64>, Vec<C64>)>,
}

impl System for ChainSystem<'_> {
    fn len(&self) -> usize {
        2 * self.n * self.n + 4 * self.n * self.n
    }

    fn rhs(&self, r: f64, cell: Cell, y: &[C64], dy: &mut [C64]) -> Result<()> {
        let n = self.n;
        let n2 = n * n;
        let mut g = self.scratch.borrow_mut();
        let (qv, t, a, gen) = &mut *g;
        self.q.interp_into(r.clamp(cell.lo, cell.hi), qv);
        let (u1, u2, x) = (&y[..n2], &y[n2..2 * n2], &y[2 * n2..]);
        linalg::gemm_into(qv, n, n, u1, n, t);
        for j in 0..n2 {
            dy[j] = -self.half_xi * t[j];
        }
        // A = −(iξ/2) U₂* Q U₁
        for c in 0..n {
            for rr in 0..n {
                let mut s = C64::new(0.0, 0.0);
                for p in 0..n {
                    s += u2[rr * n + p].conj() * t[c * n + p];
                }
                a[c * n + rr] = -self.half_xi * s;
            }
        }
        linalg::gemm_into(qv, n, n, u2, n, t);
        for j in 0..n2 {
            dy[n2 + j] = self.half_xi * t[j];
        }
        krein_generator(n, self.k, a, gen);
        linalg::gemm_into(gen, 2 * n, 2 * n, x, 2 * n, &mut dy[2 * n2..]);
        Ok(())
    }

    fn blocks(&self) -> Vec<Block> {
        let n2 = self.n * self.n;
        vec![Block::new(0..2 * n2), Block::new(2 * n2..6 * n2)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformCheck {
    /// `max_r ‖Y − Y₀UEX‖_max / max(1, ‖Y‖_max)`.
    pub residual: f64,
    /// `max_r |det(Y₀UEX) − (−2ik)ⁿ| / |(−2ik)ⁿ|`.
    pub det_residual: f64,
}

fn free_fundamental(n: usize, k: C64, r: f64) -> CMat {
    let mut y = CMat::zeros(2 * n, 2 * n);
    let ep = (I * k * r).exp();
    let em = (-I * k * r).exp();
    for i in 0..n {
        y[(i, i)] = ep;
        y[(i, n + i)] = em;
        y[(n + i, i)] = I * k * ep;
        y[(n + i, n + i)] = -I * k * em;
    }
    y
}

/// Integrates the pencil system directly from `Y(0) = Y₀(0)` and compares it
/// with `Y₀ U E X` built from the Krein chain.
pub fn transform_equivalence(q: &PotentialGrid, k: Wavenumber, xi: f64) -> Result<TransformCheck> {
    let n = q.dim();
    let n2 = n * n;
    let kv = k.value();
    let nodes = q.support_nodes();
    let coupling = kv * xi;
    let k2 = kv * kv;
    let direct = MatrixOde::new(2 * n, 2 * n, |r: f64, cell: Cell, out: &mut [C64]| {
        let mut qv = vec![C64::new(0.0, 0.0); n2];
        q.interp_into(r.clamp(cell.lo, cell.hi), &mut qv);
        let m = 2 * n;
        out.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        for i in 0..n {
            out[(n + i) * m + i] = C64::new(1.0, 0.0);
        }
        for c in 0..n {
            for rr in 0..n {
                let mut v = qv[c * n + rr] * coupling;
                if c == rr {
                    v -= k2;
                }
                out[c * m + n + rr] = v;
            }
        }
        Ok(())
    });
    let y0 = free_fundamental(n, kv, 0.0);
    let ys = ode::solve(&direct, y0.as_slice(), &nodes, &Options::default())?;

    let chain = ChainSystem {
        q,
        n,
        k: kv,
        half_xi: C64::new(0.0, xi / 2.0),
        scratch: RefCell::new((
            vec![C64::new(0.0, 0.0); n2],
            vec![C64::new(0.0, 0.0); n2],
            vec![C64::new(0.0, 0.0); n2],
            vec![C64::new(0.0, 0.0); 4 * n2],
        )),
    };
    let mut init = Vec::with_capacity(chain.len());
    init.extend_from_slice(linalg::identity(n).as_slice());
    init.extend_from_slice(linalg::identity(n).as_slice());
    init.extend_from_slice(linalg::identity(2 * n).as_slice());
    let xs = ode::solve(&chain, &init, &nodes, &Options::default())?;

    let det_free = (-2.0 * I * kv).powu(n as u32);
    let mut residual: f64 = 0.0;
    let mut det_residual: f64 = 0.0;
    for (i, r) in nodes.iter().enumerate() {
        let y = CMat::from_column_slice(2 * n, 2 * n, &ys[i]);
        let s = &xs[i];
        let mut u = CMat::zeros(2 * n, 2 * n);
        u.view_mut((0, 0), (n, n)).copy_from(&CMat::from_column_slice(n, n, &s[..n2]));
        u.view_mut((n, n), (n, n)).copy_from(&CMat::from_column_slice(n, n, &s[n2..2 * n2]));
        let x = CMat::from_column_slice(2 * n, 2 * n, &s[2 * n2..]);
        let mut e = linalg::identity(2 * n);
        let em = (-2.0 * I * kv * *r).exp();
        for j in 0..n {
            e[(j, j)] = em;
        }
        let z = free_fundamental(n, kv, *r) * u * e * x;
        residual = residual.max(linalg::max_abs(&(&y - &z)) / linalg::max_abs(&y).max(1.0));
        det_residual = det_residual.max((z.determinant() - det_free).norm() / det_free.norm());
    }
    Ok(TransformCheck { residual, det_residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::{build_potential, Envelope, GridSpec, PotentialSpec};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
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

    #[test]
    fn zero_potential_or_coupling_gives_zero_coefficient() {
        let q0 = build_potential(&PotentialSpec::Zero { dim: 2 }, GridSpec::with_default_step(1.0)).unwrap();
        assert!(krein_coefficient(&q0, 1.0).unwrap().samples().iter().all(|a| linalg::max_abs(a) == 0.0));
        let q = random(2, 1, 1.0);
        assert!(krein_coefficient(&q, 0.0).unwrap().samples().iter().all(|a| linalg::max_abs(a) == 0.0));
    }

    #[test]
    fn coefficient_norm_is_half_xi_q() {
        let q = random(3, 2, 2.0);
        let xi = -1.4;
        let a = krein_coefficient(&q, xi).unwrap();
        for (i, ai) in a.samples().iter().enumerate() {
            let expect = 0.5 * xi.abs() * linalg::op_norm(q.sample(i));
            assert!((linalg::op_norm(ai) - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn free_krein_solution() {
        let q0 = build_potential(&PotentialSpec::Zero { dim: 1 }, GridSpec::with_default_step(2.0)).unwrap();
        let a = krein_coefficient(&q0, 1.0).unwrap();
        let k = c(0.8, 0.3);
        let x = integrate_krein(&a, k, 0.0, 2.0).unwrap();
        let last = x.values.last().unwrap();
        assert!((last[(0, 0)] - (I * 2.0 * k * 2.0).exp()).norm() < 1e-9);
        assert!((last[(1, 1)] - 1.0).norm() < 1e-12);
        assert!(last[(0, 1)].norm() < 1e-12 && last[(1, 0)].norm() < 1e-12);
    }

    #[test]
    fn krein_cocycle() {
        let q = random(2, 9, 2.0);
        let a = krein_coefficient(&q, 0.9).unwrap();
        let k = c(1.1, 0.2);
        let full = integrate_krein(&a, k, 0.0, 2.0).unwrap();
        let first = integrate_krein(&a, k, 0.0, 1.0).unwrap();
        let second = integrate_krein(&a, k, 1.0, 2.0).unwrap();
        let composed = second.values.last().unwrap() * first.values.last().unwrap();
        assert!(linalg::max_abs(&(composed - full.values.last().unwrap())) < 1e-9);
    }

    #[test]
    fn scalar_constant_krein_matches_exponential() {
        let a0 = c(0.4, -0.3);
        let coef = KreinCoefficient {
            xi: 1.0,
            step: 0.01,
            support_radius: 1.0,
            samples: vec![CMat::from_element(1, 1, a0); 101],
        };
        let k = c(0.9, 0.1);
        let x = integrate_krein(&coef, k, 0.0, 1.0).unwrap();
        let gen = CMat::from_row_slice(2, 2, &[I * 2.0 * k, -a0.conj(), -a0, c(0.0, 0.0)]);
        let oracle = expm(&gen);
        assert!(linalg::max_abs(&(x.values.last().unwrap() - oracle)) < 1e-8);
    }

    /// Scaling and squaring with a Taylor kernel.
    fn expm(a: &CMat) -> CMat {
        let norm = linalg::op_norm(a);
        let s = (norm.log2().ceil() as i32 + 4).max(0);
        let scaled = a / C64::new(2f64.powi(s), 0.0);
        let n = a.nrows();
        let mut term = linalg::identity(n);
        let mut sum = linalg::identity(n);
        for j in 1..30 {
            term = &term * &scaled / C64::new(j as f64, 0.0);
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn free_transform_is_exact() {
        let q0 = build_potential(&PotentialSpec::Zero { dim: 2 }, GridSpec::with_default_step(2.0)).unwrap();
        let t = transform_equivalence(&q0, Wavenumber::real(1.3).unwrap(), 0.7).unwrap();
        assert!(t.residual <= 1e-10, "{t:?}");
    }

    #[test]
    fn transform_real_and_complex_k() {
        let q = random(2, 6, 3.0);
        for k in [c(1.3, 0.0), c(1.0, 0.5)] {
            let t = transform_equivalence(&q, Wavenumber::new(k).unwrap(), 0.7).unwrap();
            assert!(t.residual <= 1e-6, "k = {k}: {t:?}");
            assert!(t.det_residual <= 1e-8, "k = {k}: {t:?}");
        }
    }
}
