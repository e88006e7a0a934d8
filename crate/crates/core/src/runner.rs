//! Mode dispatch shared by the CLI and the browser demo.

use std::time::Instant;

use crate::adp::{self, check_rank};
use crate::config::{Mode, ProblemConfig};
use crate::datagen::{
    collect_data_exact, collect_data_mc, propagate_moments, simulate_paths, DataMatrices,
    DataMode,
};
use crate::model_pi::{self, run_model_pi};
use crate::report::{RunReport, RunStatus};
use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces `rollout.seed` for Monte Carlo data.
    pub seed: Option<u64>,
    /// Data for `adp_imported` (and optionally `rank_check`).
    pub imported: Option<DataMatrices>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: RunReport,
    /// The η matrices used by a data-driven mode.
    pub data: Option<DataMatrices>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        self.report.status.exit_code()
    }
}

/// Builds the η matrices for a data-driven mode.
pub fn gather_data(mode: Mode, cfg: &ProblemConfig, opts: &RunOptions) -> Result<DataMatrices> {
    if let Some(data) = &opts.imported {
        if mode == Mode::AdpImported || mode == Mode::RankCheck {
            if (data.n, data.m) != (cfg.n(), cfg.m()) {
                return Err(Error::Dimension(format!(
                    "imported data is for n={}, m={} but the config has n={}, m={}",
                    data.n,
                    data.m,
                    cfg.n(),
                    cfg.m()
                )));
            }
            return Ok(data.clone());
        }
    }
    let sys = cfg.require_system()?;
    let mut ro = cfg.require_rollout()?.clone();
    match mode {
        Mode::AdpMc => {
            if let Some(seed) = opts.seed {
                ro.seed = seed;
            }
            Ok(collect_data_mc(&simulate_paths(sys, &cfg.k0, &cfg.exploration, &ro)?))
        }
        Mode::RankCheck if !cfg.exploration.is_deterministic() => {
            if let Some(seed) = opts.seed {
                ro.seed = seed;
            }
            Ok(collect_data_mc(&simulate_paths(sys, &cfg.k0, &cfg.exploration, &ro)?))
        }
        Mode::AdpExact | Mode::RankCheck => Ok(collect_data_exact(&propagate_moments(
            sys,
            &cfg.k0,
            &cfg.exploration,
            &ro,
        )?)),
        Mode::AdpImported => Err(Error::Config(vec![
            "eta: adp_imported needs an imported data bundle".into(),
        ])),
        Mode::ModelPi => Err(Error::InvalidValue("model_pi uses no data".into())),
    }
}

pub fn execute(mode: Mode, cfg: &ProblemConfig, opts: &RunOptions) -> Result<Outcome> {
    let start = Instant::now();
    let eps = cfg.eps(mode);
    let max_iter = cfg.max_iter();
    let mut outcome = match mode {
        Mode::ModelPi => {
            let sys = cfg.require_system()?;
            let history = run_model_pi(sys, &cfg.cost, &cfg.k0, eps, max_iter)?;
            Outcome {
                report: RunReport::from_history(mode, cfg.raw.clone(), history),
                data: None,
            }
        }
        Mode::RankCheck => {
            let data = gather_data(mode, cfg, opts)?;
            let rank = check_rank(&data);
            let report = RunReport {
                mode,
                config: cfg.raw.clone(),
                data_mode: Some(data.mode.clone()),
                status: if rank.passed {
                    RunStatus::RankPassed
                } else {
                    RunStatus::RankFailed
                },
                records: Vec::new(),
                final_p: None,
                final_k: None,
                residual_r1: None,
                residual_r2: None,
                rank: Some(rank),
                model_assisted: false,
                elapsed_secs: 0.0,
            };
            Outcome {
                report,
                data: Some(data),
            }
        }
        Mode::AdpExact | Mode::AdpMc | Mode::AdpImported => {
            let data = gather_data(mode, cfg, opts)?;
            let rank = check_rank(&data);
            let mut report = if rank.passed {
                let model = cfg.system.as_ref();
                let history = adp::run_adp(&data, &cfg.cost, &cfg.k0, eps, max_iter, model)?;
                let mut r = RunReport::from_history(mode, cfg.raw.clone(), history);
                r.model_assisted = model.is_some();
                r
            } else {
                RunReport {
                    mode,
                    config: cfg.raw.clone(),
                    data_mode: None,
                    status: RunStatus::RankFailed,
                    records: Vec::new(),
                    final_p: None,
                    final_k: None,
                    residual_r1: None,
                    residual_r2: None,
                    rank: None,
                    model_assisted: false,
                    elapsed_secs: 0.0,
                }
            };
            report.data_mode = Some(data.mode.clone());
            report.rank = Some(rank);
            Outcome {
                report,
                data: Some(data),
            }
        }
    };
    let rep = &mut outcome.report;
    if let (Some(sys), Some(p), Some(k)) = (cfg.system.as_ref(), &rep.final_p, &rep.final_k) {
        rep.residual_r1 = model_pi::sare_residual_r1(sys, &cfg.cost, p).ok();
        rep.residual_r2 = model_pi::lyap_residual_r2(sys, &cfg.cost, p, k).ok();
    }
    rep.elapsed_secs = start.elapsed().as_secs_f64();
    Ok(outcome)
}

/// Exit code of a finished or failed run.
pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(o) => o.exit_code(),
        Err(e) => e.exit_code(),
    }
}

/// True when `mode` simulates paths, so that a path dump is meaningful.
pub fn uses_monte_carlo(mode: Mode, data: Option<&DataMatrices>) -> bool {
    mode == Mode::AdpMc || data.is_some_and(|d| matches!(d.mode, DataMode::MonteCarlo { .. }))
}
