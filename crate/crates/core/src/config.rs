//! Problem description files.
//!
//! A problem is a single JSON document; matrices are nested row-major
//! arrays. Every field is validated before any computation starts, and
//! all violations are reported together, each prefixed by its field path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{ExplorationSignal, RolloutConfig};
use crate::matstack::{self, Mat, SymMat};
use crate::model_pi::CostWeights;
use crate::stability::{self, SystemModel};
use crate::{adp, model_pi, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ModelPi,
    AdpExact,
    AdpMc,
    RankCheck,
    AdpImported,
}

impl Mode {
    pub fn default_eps(self) -> f64 {
        match self {
            Mode::ModelPi => model_pi::DEFAULT_EPS,
            Mode::AdpExact | Mode::RankCheck => adp::DEFAULT_EPS_EXACT,
            Mode::AdpMc | Mode::AdpImported => adp::DEFAULT_EPS_MC,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSystem {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    pub d: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCost {
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRollout {
    #[serde(default)]
    pub t0: f64,
    pub q: usize,
    pub interval_len: f64,
    pub sde_step: f64,
    pub paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
}

/// The file as written, before validation. Echoed into run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<RawSystem>,
    pub cost: RawCost,
    #[serde(rename = "K0", default, skip_serializing_if = "Option::is_none")]
    pub k0: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub x0_list: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploration: Option<ExplorationSignal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollout: Option<RawRollout>,
    #[serde(default)]
    pub stop: StopRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
}

/// A fully validated problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    /// Absent for purely data-driven problems (imported expectations).
    pub system: Option<SystemModel>,
    pub cost: CostWeights,
    pub k0: Mat,
    pub exploration: ExplorationSignal,
    pub rollout: Option<RolloutConfig>,
    pub stop: StopRule,
    pub mode: Option<Mode>,
    pub raw: RawConfig,
}

impl ProblemConfig {
    pub fn n(&self) -> usize {
        self.cost.n()
    }

    pub fn m(&self) -> usize {
        self.cost.m()
    }

    pub fn eps(&self, mode: Mode) -> f64 {
        self.stop.eps.unwrap_or_else(|| mode.default_eps())
    }

    pub fn max_iter(&self) -> usize {
        self.stop.max_iter.unwrap_or(model_pi::DEFAULT_MAX_ITER)
    }

    pub fn require_system(&self) -> Result<&SystemModel> {
        self.system
            .as_ref()
            .ok_or_else(|| Error::Config(vec!["system: required for this mode".into()]))
    }

    pub fn require_rollout(&self) -> Result<&RolloutConfig> {
        self.rollout
            .as_ref()
            .ok_or_else(|| Error::Config(vec!["rollout: required for this mode".into()]))
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ProblemConfig> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ProblemConfig> {
    let raw: RawConfig = serde_json::from_str(text)?;
    validate(raw)
}

fn matrix(field: &str, rows: &[Vec<f64>], errs: &mut Vec<String>) -> Option<Mat> {
    match matstack::mat_from_rows(rows) {
        Ok(m) => Some(m),
        Err(e) => {
            errs.push(format!("{field}: {e}"));
            None
        }
    }
}

fn symmetric(field: &str, m: Option<Mat>, errs: &mut Vec<String>) -> Option<SymMat> {
    match SymMat::new(m?) {
        Ok(s) => Some(s),
        Err(e) => {
            errs.push(format!("{field}: {e}"));
            None
        }
    }
}

fn expect_shape(field: &str, m: &Option<Mat>, shape: (usize, usize), errs: &mut Vec<String>) {
    if let Some(m) = m {
        if m.shape() != shape {
            errs.push(format!(
                "{field}: expected {}x{}, found {}x{}",
                shape.0,
                shape.1,
                m.nrows(),
                m.ncols()
            ));
        }
    }
}

pub fn validate(raw: RawConfig) -> Result<ProblemConfig> {
    let mut errs = Vec::new();

    let q = symmetric("cost.Q", matrix("cost.Q", &raw.cost.q, &mut errs), &mut errs);
    let r = symmetric("cost.R", matrix("cost.R", &raw.cost.r, &mut errs), &mut errs);
    if let Some(r) = &r {
        if r.min_eigenvalue() <= 0.0 {
            errs.push("cost.R: R must be positive definite".into());
        }
    }
    if let Some(q) = &q {
        if q.min_eigenvalue() < -1e-10 {
            errs.push("cost.Q: Q must be positive semidefinite".into());
        }
    }

    let mut n = q.as_ref().map(|q| q.dim());
    let mut m = r.as_ref().map(|r| r.dim());

    let mut system = None;
    if let Some(rs) = &raw.system {
        let a = matrix("system.A", &rs.a, &mut errs);
        let b = matrix("system.B", &rs.b, &mut errs);
        let c = matrix("system.C", &rs.c, &mut errs);
        let d = matrix("system.D", &rs.d, &mut errs);
        if let Some(a) = &a {
            if !a.is_square() {
                errs.push(format!("system.A: must be square, found {}x{}", a.nrows(), a.ncols()));
            }
            n = Some(a.nrows());
        }
        if let Some(b) = &b {
            m = Some(b.ncols());
        }
        if let (Some(n), Some(m)) = (n, m) {
            expect_shape("system.B", &b, (n, m), &mut errs);
            expect_shape("system.C", &c, (n, n), &mut errs);
            expect_shape("system.D", &d, (n, m), &mut errs);
        }
        if let (Some(a), Some(b), Some(c), Some(d)) = (a, b, c, d) {
            system = SystemModel::new(a, b, c, d).ok();
        }
    }
    if let (Some(n), Some(q)) = (n, &q) {
        if q.dim() != n {
            errs.push(format!("cost.Q: expected {n}x{n}, found {0}x{0}", q.dim()));
        }
    }
    if let (Some(m), Some(r)) = (m, &r) {
        if r.dim() != m {
            errs.push(format!("cost.R: expected {m}x{m}, found {0}x{0}", r.dim()));
        }
    }

    let k0 = match (&raw.k0, n, m) {
        (Some(rows), _, _) => {
            let k = matrix("K0", rows, &mut errs);
            if let (Some(n), Some(m)) = (n, m) {
                expect_shape("K0", &k, (m, n), &mut errs);
            }
            k
        }
        (None, Some(n), Some(m)) => Some(Mat::zeros(m, n)),
        _ => None,
    };

    let exploration = raw
        .exploration
        .clone()
        .unwrap_or_else(|| ExplorationSignal::zero(m.unwrap_or(0)));
    if let Some(m) = m {
        errs.extend(exploration.problems(m));
    }

    let rollout = raw.rollout.as_ref().map(|ro| RolloutConfig {
        t0: ro.t0,
        q: ro.q,
        interval_len: ro.interval_len,
        sde_step: ro.sde_step,
        paths: ro.paths,
        seed: ro.seed,
        x0_list: raw.x0_list.clone(),
    });
    if let Some(ro) = &rollout {
        errs.extend(ro.problems(n).into_iter().map(|p| p.replace("rollout.x0_list", "x0_list")));
    }

    if let Some(eps) = raw.stop.eps {
        if !(eps > 0.0 && eps.is_finite()) {
            errs.push("stop.eps: must be positive".into());
        }
    }
    if raw.stop.max_iter == Some(0) {
        errs.push("stop.max_iter: must be at least 1".into());
    }

    if errs.is_empty() {
        if let (Some(sys), Some(k0)) = (&system, &k0) {
            match stability::is_ms_stabilizing(sys, k0) {
                Ok(s) if s.stable => {}
                Ok(s) => errs.push(format!(
                    "K0: not mean-square stabilizing (generator abscissa {:e})",
                    s.abscissa
                )),
                Err(e) => errs.push(format!("K0: {e}")),
            }
        }
    }

    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let cost = CostWeights::new(q.expect("validated"), r.expect("validated"))?;
    Ok(ProblemConfig {
        system,
        cost,
        k0: k0.expect("validated"),
        exploration,
        rollout,
        stop: raw.stop.clone(),
        mode: raw.mode,
        raw,
    })
}
