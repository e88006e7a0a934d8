//! Mean-square stability and the generalized Lyapunov equation.
//!
//! Under `u = Kx` the second moment `S = E[x xᵀ]` obeys
//! `dS/ds = Acl S + S Aclᵀ + Ccl S Cclᵀ`, i.e. `d vec(S)/ds = L vec(S)` with
//! `L = I ⊗ Acl + Acl ⊗ I + Ccl ⊗ Ccl`. The closed loop is mean-square
//! stable exactly when `L` is Hurwitz.

use serde::{Deserialize, Serialize};

use crate::matstack::{self, kron, Mat, SymMat};
use crate::{Error, Result};

/// Required gap between the spectral abscissa of `L` and zero.
pub const MS_MARGIN: f64 = 1e-9;

/// Largest condition number of the vectorized Lyapunov operator accepted
/// by [`glyap_solve`].
pub const MAX_LYAP_COND: f64 = 1e12;

/// Coefficients of `dx = (Ax + Bu) ds + (Cx + Du) dw`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    #[serde(rename = "A", with = "matstack::rows")]
    pub a: Mat,
    #[serde(rename = "B", with = "matstack::rows")]
    pub b: Mat,
    #[serde(rename = "C", with = "matstack::rows")]
    pub c: Mat,
    #[serde(rename = "D", with = "matstack::rows")]
    pub d: Mat,
}

impl SystemModel {
    pub fn new(a: Mat, b: Mat, c: Mat, d: Mat) -> Result<Self> {
        let sys = SystemModel { a, b, c, d };
        let problems = sys.dimension_problems();
        if problems.is_empty() {
            Ok(sys)
        } else {
            Err(Error::Dimension(problems.join("; ")))
        }
    }

    pub(crate) fn dimension_problems(&self) -> Vec<String> {
        let n = self.a.nrows();
        let m = self.b.ncols();
        let mut out = Vec::new();
        if !self.a.is_square() {
            out.push(format!("A must be square, got {}x{}", n, self.a.ncols()));
        }
        if self.b.nrows() != n {
            out.push(format!("B must have {n} rows, got {}", self.b.nrows()));
        }
        if self.c.shape() != (n, n) {
            out.push(format!("C must be {n}x{n}, got {}x{}", self.c.nrows(), self.c.ncols()));
        }
        if self.d.shape() != (n, m) {
            out.push(format!("D must be {n}x{m}, got {}x{}", self.d.nrows(), self.d.ncols()));
        }
        out
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }
}

/// `Acl = A + BK`, `Ccl = C + DK`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    pub acl: Mat,
    pub ccl: Mat,
    pub k: Mat,
}

pub fn close_loop(sys: &SystemModel, k: &Mat) -> Result<ClosedLoop> {
    if k.shape() != (sys.m(), sys.n()) {
        return Err(Error::Dimension(format!(
            "gain must be {}x{}, got {}x{}",
            sys.m(),
            sys.n(),
            k.nrows(),
            k.ncols()
        )));
    }
    Ok(ClosedLoop {
        acl: &sys.a + &sys.b * k,
        ccl: &sys.c + &sys.d * k,
        k: k.clone(),
    })
}

/// Generator of `d vec(E[xxᵀ])/ds` for the closed loop.
pub fn ms_generator(cl: &ClosedLoop) -> Mat {
    let n = cl.acl.nrows();
    let eye = Mat::identity(n, n);
    kron(&eye, &cl.acl) + kron(&cl.acl, &eye) + kron(&cl.ccl, &cl.ccl)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsStability {
    pub stable: bool,
    /// Largest real part among the eigenvalues of the generator.
    pub abscissa: f64,
}

pub fn spectral_abscissa(m: &Mat) -> Result<f64> {
    let schur = m
        .clone()
        .try_schur(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("Schur decomposition did not converge".into()))?;
    let ev = schur.complex_eigenvalues();
    let abscissa = ev.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    if abscissa.is_finite() {
        Ok(abscissa)
    } else {
        Err(Error::Numerical("non-finite eigenvalue".into()))
    }
}

pub fn is_ms_stabilizing(sys: &SystemModel, k: &Mat) -> Result<MsStability> {
    let cl = close_loop(sys, k)?;
    closed_loop_stability(&cl)
}

pub fn closed_loop_stability(cl: &ClosedLoop) -> Result<MsStability> {
    let abscissa = spectral_abscissa(&ms_generator(cl))?;
    Ok(MsStability {
        stable: abscissa < -MS_MARGIN,
        abscissa,
    })
}

/// Solves `Aclᵀ P + P Acl + Cclᵀ P Ccl + W = 0` for symmetric `P`.
pub fn glyap_solve(cl: &ClosedLoop, w: &SymMat) -> Result<SymMat> {
    let n = cl.acl.nrows();
    if w.dim() != n {
        return Err(Error::Dimension(format!(
            "forcing term is {}x{0}, closed loop is {n}x{n}",
            w.dim()
        )));
    }
    let op = ms_generator(cl).transpose();
    let sv = op.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if smin.is_nan() || smin <= 0.0 || smax / smin > MAX_LYAP_COND {
        return Err(Error::NonStabilizingGain(format!(
            "Lyapunov operator is singular or ill-conditioned (cond = {:e})",
            smax / smin
        )));
    }
    let rhs = -matstack::vec(w.as_mat());
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NonStabilizingGain("Lyapunov operator is singular".into()))?;
    let p = matstack::unvec(&sol, n, n)?;
    matstack::ensure_finite(&p)?;
    Ok(SymMat::symmetrize(p))
}

/// Left side of the generalized Lyapunov equation at `p`.
pub fn glyap_residual(cl: &ClosedLoop, w: &SymMat, p: &SymMat) -> Mat {
    cl.acl.transpose() * p.as_mat()
        + p.as_mat() * &cl.acl
        + cl.ccl.transpose() * p.as_mat() * &cl.ccl
        + w.as_mat()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_sys(a: f64, b: f64, c: f64, d: f64) -> SystemModel {
        let s = |v| Mat::from_element(1, 1, v);
        SystemModel::new(s(a), s(b), s(c), s(d)).unwrap()
    }

    fn benchmark() -> SystemModel {
        SystemModel::new(
            Mat::from_row_slice(2, 2, &[0.0, -0.6, 0.6, -0.3]),
            Mat::from_row_slice(2, 1, &[0.05, 0.01]),
            Mat::from_row_slice(2, 2, &[-0.02, 0.03, -0.05, 0.02]),
            Mat::from_row_slice(2, 1, &[0.001, 0.03]),
        )
        .unwrap()
    }

    #[test]
    fn dimension_checks() {
        let err = SystemModel::new(
            Mat::zeros(2, 2),
            Mat::zeros(3, 1),
            Mat::zeros(2, 2),
            Mat::zeros(2, 1),
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
        assert!(close_loop(&benchmark(), &Mat::zeros(2, 2)).is_err());
    }

    #[test]
    fn close_loop_examples() {
        let sys = benchmark();
        let cl = close_loop(&sys, &Mat::zeros(1, 2)).unwrap();
        assert_eq!(cl.acl, sys.a);
        assert_eq!(cl.ccl, sys.c);

        let k = Mat::from_row_slice(1, 2, &[-0.0669434, 0.0064058]);
        let cl = close_loop(&sys, &k).unwrap();
        let expected_a = Mat::from_row_slice(
            2,
            2,
            &[
                0.05 * -0.0669434,
                -0.6 + 0.05 * 0.0064058,
                0.6 + 0.01 * -0.0669434,
                -0.3 + 0.01 * 0.0064058,
            ],
        );
        let expected_c = Mat::from_row_slice(
            2,
            2,
            &[
                -0.02 + 0.001 * -0.0669434,
                0.03 + 0.001 * 0.0064058,
                -0.05 + 0.03 * -0.0669434,
                0.02 + 0.03 * 0.0064058,
            ],
        );
        assert!((cl.acl - expected_a).amax() < 1e-14);
        assert!((cl.ccl - expected_c).amax() < 1e-14);

        let cl = close_loop(&scalar_sys(-1.0, 1.0, 0.5, 0.0), &Mat::from_element(1, 1, -0.4))
            .unwrap();
        assert_relative_eq!(cl.acl[(0, 0)], -1.4, epsilon = 1e-15);
        assert_relative_eq!(cl.ccl[(0, 0)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn generator_reductions() {
        let cl = close_loop(&scalar_sys(-0.8, 0.0, 0.3, 0.0), &Mat::zeros(1, 1)).unwrap();
        assert_relative_eq!(ms_generator(&cl)[(0, 0)], 2.0 * -0.8 + 0.09, epsilon = 1e-15);

        let a = Mat::from_row_slice(2, 2, &[-1.0, 0.2, 0.4, -0.5]);
        let cl = ClosedLoop {
            acl: a.clone(),
            ccl: Mat::zeros(2, 2),
            k: Mat::zeros(1, 2),
        };
        let eye = Mat::identity(2, 2);
        assert_eq!(ms_generator(&cl), kron(&eye, &a) + kron(&a, &eye));
    }

    #[test]
    fn scalar_stability_criterion() {
        let s = is_ms_stabilizing(&scalar_sys(-1.0, 0.0, 1.0, 0.0), &Mat::zeros(1, 1)).unwrap();
        assert!(s.stable);
        assert_relative_eq!(s.abscissa, -1.0, epsilon = 1e-12);
        let s = is_ms_stabilizing(&scalar_sys(1.0, 0.0, 0.0, 0.0), &Mat::zeros(1, 1)).unwrap();
        assert!(!s.stable);
        assert_relative_eq!(s.abscissa, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn benchmark_open_loop_is_ms_stable() {
        let s = is_ms_stabilizing(&benchmark(), &Mat::zeros(1, 2)).unwrap();
        assert!(s.stable);
        // numpy eigvals of the 4x4 generator: max real part -0.2984866687576635
        assert_relative_eq!(s.abscissa, -0.2984866687576635, epsilon = 1e-10);
    }

    #[test]
    fn glyap_scalar_examples() {
        let cl = close_loop(&scalar_sys(-1.0, 1.0, 0.5, 0.0), &Mat::zeros(1, 1)).unwrap();
        let p = glyap_solve(&cl, &SymMat::identity(1)).unwrap();
        assert_relative_eq!(p[(0, 0)], 1.0 / 1.75, epsilon = 1e-14);

        let cl = ClosedLoop {
            acl: Mat::from_element(1, 1, -1.0),
            ccl: Mat::zeros(1, 1),
            k: Mat::zeros(1, 1),
        };
        let p = glyap_solve(&cl, &SymMat::from_diagonal(&[2.0])).unwrap();
        assert_relative_eq!(p[(0, 0)], 1.0, epsilon = 1e-14);

        let cl = close_loop(&benchmark(), &Mat::zeros(1, 2)).unwrap();
        assert_eq!(glyap_solve(&cl, &SymMat::zeros(2)).unwrap(), SymMat::zeros(2));
    }

    #[test]
    fn glyap_rejects_singular_operator() {
        let cl = close_loop(&scalar_sys(0.0, 0.0, 0.0, 0.0), &Mat::zeros(1, 1)).unwrap();
        assert!(matches!(
            glyap_solve(&cl, &SymMat::identity(1)),
            Err(Error::NonStabilizingGain(_))
        ));
    }

    /// Random MS-stable closed loop: shift a random matrix so that the
    /// generator abscissa is at most -0.1.
    pub(crate) fn random_stable(rng: &mut ChaCha8Rng, n: usize) -> ClosedLoop {
        let mut acl = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let ccl = Mat::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
        loop {
            let cl = ClosedLoop {
                acl: acl.clone(),
                ccl: ccl.clone(),
                k: Mat::zeros(1, n),
            };
            if closed_loop_stability(&cl).unwrap().abscissa < -0.1 {
                return cl;
            }
            acl -= Mat::identity(n, n) * 0.5;
        }
    }

    fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> SymMat {
        let g = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        SymMat::symmetrize(&g * g.transpose())
    }

    #[test]
    fn glyap_residual_and_psd_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..100 {
            let n = 1 + i % 5;
            let cl = random_stable(&mut rng, n);
            let w = random_psd(&mut rng, n);
            let p = glyap_solve(&cl, &w).unwrap();
            let res = glyap_residual(&cl, &w, &p).norm();
            assert!(res <= 1e-9 * w.norm().max(1.0), "residual {res}");
            assert_eq!(p.as_mat(), &p.transpose());
            assert!(p.min_eigenvalue() >= -1e-9 * p.norm());
        }
    }

    proptest! {
        #[test]
        fn scalar_criterion_agreement(a in -3.0f64..3.0, c in -2.0f64..2.0) {
            let crit = 2.0 * a + c * c;
            prop_assume!(crit.abs() > 1e-6);
            let s = is_ms_stabilizing(&scalar_sys(a, 0.0, c, 0.0), &Mat::zeros(1, 1)).unwrap();
            prop_assert_eq!(s.stable, crit < 0.0);
        }

        #[test]
        fn glyap_monotone_in_forcing(seed in any::<u64>(), n in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cl = random_stable(&mut rng, n);
            let w1 = random_psd(&mut rng, n);
            let extra = random_psd(&mut rng, n);
            let w2 = SymMat::symmetrize(w1.as_mat() + extra.as_mat());
            let p1 = glyap_solve(&cl, &w1).unwrap();
            let p2 = glyap_solve(&cl, &w2).unwrap();
            let diff = SymMat::symmetrize(p2.as_mat() - p1.as_mat());
            prop_assert!(diff.min_eigenvalue() >= -1e-9 * p2.norm().max(1.0));
        }
    }
}
