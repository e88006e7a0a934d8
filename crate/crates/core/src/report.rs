//! Run reports and convergence traces.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adp::RankReport;
use crate::config::{Mode, RawConfig};
use crate::datagen::DataMode;
use crate::matstack::{self, Mat, SymMat};
use crate::model_pi::{IterationRecord, RunHistory, Termination};
use crate::Result;

/// Header of the convergence-trace CSV.
pub const TRACE_HEADER: &str = "iter,delta_P_fro,residual_R1,residual_R2,cond_psi,rank";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    NotConverged,
    RankPassed,
    RankFailed,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Converged | RunStatus::RankPassed => 0,
            RunStatus::RankFailed => 2,
            RunStatus::NotConverged => 3,
        }
    }
}

impl From<Termination> for RunStatus {
    fn from(t: Termination) -> Self {
        match t {
            Termination::Converged => RunStatus::Converged,
            Termination::MaxIterations => RunStatus::NotConverged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub config: RawConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_mode: Option<DataMode>,
    pub status: RunStatus,
    pub records: Vec<IterationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_p: Option<SymMat>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "opt_rows"
    )]
    pub final_k: Option<Mat>,
    /// `|R1(P_final)|_F`; only with a known model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_r1: Option<f64>,
    /// `|R2(P_final, K_final)|_F`; only with a known model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_r2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<RankReport>,
    /// True when residuals and stability figures used the true model in a
    /// data-driven run.
    pub model_assisted: bool,
    pub elapsed_secs: f64,
}

mod opt_rows {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<Mat>, s: S) -> std::result::Result<S::Ok, S::Error> {
        m.as_ref().map(matstack::mat_to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Option<Mat>, D::Error> {
        Option::<Vec<Vec<f64>>>::deserialize(d)?
            .map(|rows| matstack::mat_from_rows(&rows).map_err(serde::de::Error::custom))
            .transpose()
    }
}

impl RunReport {
    pub fn from_history(mode: Mode, config: RawConfig, history: RunHistory) -> Self {
        let last = history.last();
        RunReport {
            mode,
            config,
            data_mode: None,
            status: history.status.into(),
            final_p: Some(last.triple.p.clone()),
            final_k: Some(last.k_next.clone()),
            residual_r1: None,
            residual_r2: None,
            rank: None,
            model_assisted: false,
            elapsed_secs: 0.0,
            records: history.records,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One-line human summary.
    pub fn summary(&self) -> String {
        let mut s = format!("{:?}: {:?}", self.mode, self.status);
        if !self.records.is_empty() {
            let _ = write!(s, " after {} iterations", self.records.len());
        }
        if let Some(r1) = self.residual_r1 {
            let _ = write!(s, ", |R1| = {r1:e}");
        }
        if let Some(r2) = self.residual_r2 {
            let _ = write!(s, ", |R2| = {r2:e}");
        }
        if let Some(rank) = &self.rank {
            let _ = write!(s, ", rank {}/{}", rank.rank, rank.required);
        }
        let _ = write!(s, " ({:.3} s)", self.elapsed_secs);
        s
    }

    /// Convergence trace; empty fields where a quantity is unavailable.
    pub fn trace_csv(&self) -> String {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.index,
                opt(r.delta_p),
                opt(r.sare_residual),
                opt(r.lyap_residual),
                opt(r.cond_psi),
                opt(r.rank)
            );
        }
        out
    }
}
