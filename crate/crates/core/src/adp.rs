//! Data-driven policy iteration.
//!
//! For a gain `K_i`, Itô's formula applied to `xᵀ P_i x` along the
//! behaviour trajectories gives one linear equation per interval in the
//! unknowns `z = [vech(P_i); vec(M_i); vech(H_i)]`:
//!
//! ```text
//! Ψ_i = [η_x̄,  2 η_xx (I_n ⊗ K_iᵀ) - 2 η_xu,  η_{K_i x} - η_ū]
//! Θ_i = -η_xx vec(Q + K_iᵀ R K_i)
//! ```
//!
//! Solving `Ψ_i z = Θ_i` in the least-squares sense replaces policy
//! evaluation; the gain update `K_{i+1} = -(R + H_i)⁻¹ M_i` needs no model.

use nalgebra::SVD;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, DataMatrices};
use crate::matstack::{self, kron, tri_len, Mat, Vector};
use crate::model_pi::{
    self, CostWeights, EvaluationTriple, IterationRecord, RunHistory, Termination,
};
use crate::stability::{self, SystemModel};
use crate::{Error, Result};

/// Relative singular-value cutoff for numerical rank.
pub const RANK_THRESHOLD: f64 = 1e-8;
pub const DEFAULT_EPS_EXACT: f64 = 1e-8;
pub const DEFAULT_EPS_MC: f64 = 1e-4;

/// Number of unknowns `n(n+1)/2 + mn + m(m+1)/2`.
pub fn unknown_count(n: usize, m: usize) -> usize {
    tri_len(n) + m * n + tri_len(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: usize,
    pub required: usize,
    /// Descending.
    pub singular_values: Vec<f64>,
    pub threshold: f64,
    pub passed: bool,
}

fn numerical_rank(sv: &[f64], threshold: f64) -> usize {
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > threshold * smax).count()
}

fn sorted_singular_values(m: &Mat) -> Vec<f64> {
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Numerical rank of `[η_xx, η_xu, η_ū]` against the unknown count.
pub fn check_rank(data: &DataMatrices) -> RankReport {
    let rows = data.rows();
    let (nn, nm, tm) = (data.n * data.n, data.n * data.m, tri_len(data.m));
    let mut stacked = Mat::zeros(rows, nn + nm + tm);
    stacked.view_mut((0, 0), (rows, nn)).copy_from(&data.eta_xx);
    stacked.view_mut((0, nn), (rows, nm)).copy_from(&data.eta_xu);
    stacked.view_mut((0, nn + nm), (rows, tm)).copy_from(&data.eta_ubar);
    let singular_values = sorted_singular_values(&stacked);
    let rank = numerical_rank(&singular_values, RANK_THRESHOLD);
    let required = unknown_count(data.n, data.m);
    RankReport {
        rank,
        required,
        singular_values,
        threshold: RANK_THRESHOLD,
        passed: rank == required,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSystem {
    pub psi: Mat,
    pub theta: Vector,
    pub iteration: usize,
    /// `σ_max / σ_min` of `Ψ`; infinite when `Ψ` is rank deficient.
    pub cond: f64,
}

pub fn assemble(
    data: &DataMatrices,
    w: &CostWeights,
    k: &Mat,
    iteration: usize,
) -> Result<RegressionSystem> {
    let (n, m) = (data.n, data.m);
    if w.n() != n || w.m() != m {
        return Err(Error::Dimension(format!(
            "cost weights are for n = {}, m = {}, data for n = {n}, m = {m}",
            w.n(),
            w.m()
        )));
    }
    let ekx = datagen::eta_kx(data, k)?;
    let rows = data.rows();
    let (tn, tm) = (tri_len(n), tri_len(m));
    let cross = &data.eta_xx * kron(&Mat::identity(n, n), &k.transpose()) * 2.0
        - &data.eta_xu * 2.0;
    let mut psi = Mat::zeros(rows, unknown_count(n, m));
    psi.view_mut((0, 0), (rows, tn)).copy_from(&data.eta_xbar);
    psi.view_mut((0, tn), (rows, m * n)).copy_from(&cross);
    psi.view_mut((0, tn + m * n), (rows, tm))
        .copy_from(&(ekx - &data.eta_ubar));
    let theta = -(&data.eta_xx * matstack::vec(w.stage_weight(k).as_mat()));
    let sv = sorted_singular_values(&psi);
    let smin = sv.last().copied().unwrap_or(0.0);
    let cond = if rows >= psi.ncols() && smin > 0.0 {
        sv[0] / smin
    } else {
        f64::INFINITY
    };
    Ok(RegressionSystem {
        psi,
        theta,
        iteration,
        cond,
    })
}

/// Least-squares solution of one regression system.
#[derive(Debug, Clone, PartialEq)]
pub struct LsSolution {
    pub triple: EvaluationTriple,
    pub rank: usize,
    pub residual: f64,
}

/// Solves `Ψ z = Θ` through the SVD of `Ψ` and unpacks `(P, M, H)`.
pub fn solve_ls(rs: &RegressionSystem, n: usize, m: usize) -> Result<LsSolution> {
    let cols = unknown_count(n, m);
    if rs.psi.ncols() != cols || rs.theta.len() != rs.psi.nrows() {
        return Err(Error::Dimension(format!(
            "regression system is {}x{} with {} targets, expected {cols} columns",
            rs.psi.nrows(),
            rs.psi.ncols(),
            rs.theta.len()
        )));
    }
    let svd = SVD::new(rs.psi.clone(), true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let rank = numerical_rank(&sv, RANK_THRESHOLD);
    if rank < cols {
        return Err(Error::RankDeficient(Box::new(RankReport {
            rank,
            required: cols,
            singular_values: sv,
            threshold: RANK_THRESHOLD,
            passed: false,
        })));
    }
    let z = svd
        .solve(&rs.theta, 0.0)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("least-squares solution is not finite".into()));
    }
    let residual = (&rs.psi * &z - &rs.theta).norm();
    let (tn, mn) = (tri_len(n), m * n);
    let p = matstack::unvech(&z.as_slice()[..tn], n)?;
    let mvec = Vector::from_column_slice(&z.as_slice()[tn..tn + mn]);
    let mmat = matstack::unvec(&mvec, m, n)?;
    let h = matstack::unvech(&z.as_slice()[tn + mn..], m)?;
    Ok(LsSolution {
        triple: EvaluationTriple { p, m: mmat, h },
        rank,
        residual,
    })
}

fn curvature_error(e: Error) -> Error {
    match e {
        Error::IndefiniteCurvature(msg) => Error::IndefiniteCurvature(format!(
            "{msg}; the identified H is inconsistent, usually a sign of too much sampling noise \
             (more paths or a longer horizon help)"
        )),
        other => other,
    }
}

/// Iterates assemble → least squares → gain update until
/// `|P_{i+1} - P_i|_F < eps` or `max_iter` evaluations.
///
/// `model` is only used for diagnostics (residuals and mean-square
/// stability of each evaluated gain); the iterates never depend on it.
pub fn run_adp(
    data: &DataMatrices,
    w: &CostWeights,
    k0: &Mat,
    eps: f64,
    max_iter: usize,
    model: Option<&SystemModel>,
) -> Result<RunHistory> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidValue(format!("eps must be positive, got {eps}")));
    }
    if max_iter == 0 {
        return Err(Error::InvalidValue("max_iter must be at least 1".into()));
    }
    data.validate()?;
    let report = check_rank(data);
    if !report.passed {
        return Err(Error::RankDeficient(Box::new(report)));
    }
    let (n, m) = (data.n, data.m);
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut k = k0.clone();
    for index in 0..max_iter {
        let rs = assemble(data, w, &k, index)?;
        let sol = solve_ls(&rs, n, m)?;
        let k_next = model_pi::policy_improve(w, &sol.triple).map_err(curvature_error)?;
        let delta_p = records
            .last()
            .map(|prev| (sol.triple.p.as_mat() - prev.triple.p.as_mat()).norm());
        let (sare_residual, lyap_residual, ms_abscissa) = match model {
            Some(sys) => (
                model_pi::sare_residual_r1(sys, w, &sol.triple.p).ok(),
                model_pi::lyap_residual_r2(sys, w, &sol.triple.p, &k).ok(),
                stability::is_ms_stabilizing(sys, &k).ok().map(|s| s.abscissa),
            ),
            None => (None, None, None),
        };
        records.push(IterationRecord {
            index,
            k,
            triple: sol.triple,
            k_next: k_next.clone(),
            delta_p,
            sare_residual,
            lyap_residual,
            ms_abscissa,
            cond_psi: rs.cond.is_finite().then_some(rs.cond),
            rank: Some(sol.rank),
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
