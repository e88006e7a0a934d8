//! Model-based policy iteration on the stochastic algebraic Riccati equation.
//!
//! Given a stabilizer `K_i`, policy evaluation solves
//! `P(A+BK) + (A+BK)ᵀP + (C+DK)ᵀP(C+DK) + Q + KᵀRK = 0`
//! and policy improvement sets `K_{i+1} = -(R + DᵀPD)⁻¹(BᵀP + DᵀPC)`.

use serde::{Deserialize, Serialize};

use crate::matstack::{self, Mat, SymMat};
use crate::stability::{self, SystemModel};
use crate::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 200;

/// Quadratic cost weights: `Q ⪰ 0`, `R ≻ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    #[serde(rename = "Q")]
    pub q: SymMat,
    #[serde(rename = "R")]
    pub r: SymMat,
}

impl CostWeights {
    pub fn new(q: SymMat, r: SymMat) -> Result<Self> {
        if r.min_eigenvalue() <= 0.0 {
            return Err(Error::InvalidValue("R must be positive definite".into()));
        }
        if q.min_eigenvalue() < -1e-10 {
            return Err(Error::InvalidValue("Q must be positive semidefinite".into()));
        }
        Ok(CostWeights { q, r })
    }

    pub fn n(&self) -> usize {
        self.q.dim()
    }

    pub fn m(&self) -> usize {
        self.r.dim()
    }

    /// `Q + KᵀRK`.
    pub fn stage_weight(&self, k: &Mat) -> SymMat {
        SymMat::symmetrize(self.q.as_mat() + k.transpose() * self.r.as_mat() * k)
    }
}

/// Unknowns of one evaluation step: `P`, `M = BᵀP + DᵀPC`, `H = DᵀPD`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationTriple {
    #[serde(rename = "P")]
    pub p: SymMat,
    #[serde(rename = "M", with = "matstack::rows")]
    pub m: Mat,
    #[serde(rename = "H")]
    pub h: SymMat,
}

impl EvaluationTriple {
    pub fn from_model(sys: &SystemModel, p: SymMat) -> Self {
        let pm = p.as_mat();
        let m = sys.b.transpose() * pm + sys.d.transpose() * pm * &sys.c;
        let h = SymMat::symmetrize(sys.d.transpose() * pm * &sys.d);
        EvaluationTriple { p, m, h }
    }
}

/// One policy-iteration step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    /// Gain that was evaluated.
    #[serde(with = "matstack::rows")]
    pub k: Mat,
    pub triple: EvaluationTriple,
    #[serde(with = "matstack::rows")]
    pub k_next: Mat,
    /// `|P_i - P_{i-1}|_F`; absent for the first iterate.
    pub delta_p: Option<f64>,
    /// `|R1(P_i)|_F` when the model is known.
    pub sare_residual: Option<f64>,
    /// `|R2(P_i, K_i)|_F` when the model is known.
    pub lyap_residual: Option<f64>,
    /// Spectral abscissa of the second-moment generator under `K_i`.
    pub ms_abscissa: Option<f64>,
    /// Condition number of the regression matrix (data-driven runs).
    pub cond_psi: Option<f64>,
    /// Numerical rank of the regression matrix (data-driven runs).
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
}

/// Iteration history of a policy-iteration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<IterationRecord>,
    pub status: Termination,
}

impl RunHistory {
    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("a run records at least one iterate")
    }

    pub fn final_p(&self) -> &SymMat {
        &self.last().triple.p
    }

    pub fn final_k(&self) -> &Mat {
        &self.last().k_next
    }

    pub fn converged(&self) -> bool {
        self.status == Termination::Converged
    }
}

pub fn policy_eval(sys: &SystemModel, w: &CostWeights, k: &Mat) -> Result<EvaluationTriple> {
    let cl = stability::close_loop(sys, k)?;
    let ms = stability::closed_loop_stability(&cl)?;
    if !ms.stable {
        return Err(Error::NonStabilizingGain(format!(
            "second-moment generator abscissa {:e} for K = {:?}",
            ms.abscissa,
            matstack::mat_to_rows(k)
        )));
    }
    let p = stability::glyap_solve(&cl, &w.stage_weight(k))?;
    Ok(EvaluationTriple::from_model(sys, p))
}

/// `K = -(R + H)⁻¹ M` through a Cholesky solve.
pub fn policy_improve(w: &CostWeights, t: &EvaluationTriple) -> Result<Mat> {
    let curvature = w.r.as_mat() + t.h.as_mat();
    let chol = curvature.clone().cholesky().ok_or_else(|| {
        Error::IndefiniteCurvature(format!(
            "min eigenvalue {:e}",
            SymMat::symmetrize(curvature).min_eigenvalue()
        ))
    })?;
    let k = -chol.solve(&t.m);
    matstack::ensure_finite(&k)?;
    Ok(k)
}

/// Left side of the SARE at `p`.
pub fn sare_lhs(sys: &SystemModel, w: &CostWeights, p: &SymMat) -> Result<Mat> {
    let pm = p.as_mat();
    let curvature = w.r.as_mat() + sys.d.transpose() * pm * &sys.d;
    let cross = sys.b.transpose() * pm + sys.d.transpose() * pm * &sys.c;
    let gain = curvature
        .lu()
        .solve(&cross)
        .ok_or_else(|| Error::IndefiniteCurvature("R + DᵀPD is singular".into()))?;
    Ok(pm * &sys.a + sys.a.transpose() * pm + sys.c.transpose() * pm * &sys.c + w.q.as_mat()
        - cross.transpose() * gain)
}

/// `|R1(P)|_F`, the Frobenius norm of the SARE left side.
pub fn sare_residual_r1(sys: &SystemModel, w: &CostWeights, p: &SymMat) -> Result<f64> {
    Ok(sare_lhs(sys, w, p)?.norm())
}

/// `|R2(P, K)|_F`, the Frobenius norm of the policy-evaluation left side.
pub fn lyap_residual_r2(sys: &SystemModel, w: &CostWeights, p: &SymMat, k: &Mat) -> Result<f64> {
    let cl = stability::close_loop(sys, k)?;
    Ok(stability::glyap_residual(&cl, &w.stage_weight(k), p).norm())
}

pub fn run_model_pi(
    sys: &SystemModel,
    w: &CostWeights,
    k0: &Mat,
    eps: f64,
    max_iter: usize,
) -> Result<RunHistory> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidValue(format!("eps must be positive, got {eps}")));
    }
    if max_iter == 0 {
        return Err(Error::InvalidValue("max_iter must be at least 1".into()));
    }
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut k = k0.clone();
    for index in 0..max_iter {
        let abscissa = stability::is_ms_stabilizing(sys, &k)?.abscissa;
        let triple = policy_eval(sys, w, &k).map_err(|e| match e {
            Error::NonStabilizingGain(msg) => {
                Error::NonStabilizingGain(format!("iterate {index}: {msg}"))
            }
            other => other,
        })?;
        let k_next = policy_improve(w, &triple)?;
        let delta_p = records
            .last()
            .map(|prev| (triple.p.as_mat() - prev.triple.p.as_mat()).norm());
        records.push(IterationRecord {
            index,
            sare_residual: Some(sare_residual_r1(sys, w, &triple.p)?),
            lyap_residual: Some(lyap_residual_r2(sys, w, &triple.p, &k)?),
            ms_abscissa: Some(abscissa),
            k,
            triple,
            k_next: k_next.clone(),
            delta_p,
            cond_psi: None,
            rank: None,
        });
        if delta_p.is_some_and(|d| d < eps) {
            return Ok(RunHistory {
                records,
                status: Termination::Converged,
            });
        }
        k = k_next;
    }
    Ok(RunHistory {
        records,
        status: Termination::MaxIterations,
    })
}
