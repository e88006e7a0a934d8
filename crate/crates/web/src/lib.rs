//! Browser bindings. Every export takes and returns JSON text so the page
//! stays plain JavaScript.

use lqs_core::adp::{check_rank, run_adp};
use lqs_core::config::{parse_config, Mode, ProblemConfig};
use lqs_core::datagen::{collect_data_exact, propagate_moments, visit_paths};
use lqs_core::matstack::mat_to_rows;
use lqs_core::model_pi::{run_model_pi, IterationRecord};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(js_err)
}

#[derive(Serialize)]
struct Step {
    index: usize,
    p: Vec<Vec<f64>>,
    k_next: Vec<Vec<f64>>,
    delta_p: Option<f64>,
    residual_r1: Option<f64>,
}

impl From<&IterationRecord> for Step {
    fn from(r: &IterationRecord) -> Self {
        Step {
            index: r.index,
            p: mat_to_rows(r.triple.p.as_mat()),
            k_next: mat_to_rows(&r.k_next),
            delta_p: r.delta_p,
            residual_r1: r.sare_residual,
        }
    }
}

fn load(config: &str) -> Result<ProblemConfig, JsValue> {
    let cfg = parse_config(config).map_err(js_err)?;
    cfg.require_system().map_err(js_err)?;
    Ok(cfg)
}

/// The bundled example problem.
#[wasm_bindgen]
pub fn default_config() -> String {
    lqs_core::BENCHMARK_JSON.to_string()
}

/// Model-based iteration: one entry per policy.
#[wasm_bindgen]
pub fn model_pi_trace(config: &str) -> Result<String, JsValue> {
    let cfg = load(config)?;
    let sys = cfg.system.as_ref().expect("checked in load");
    let run = run_model_pi(sys, &cfg.cost, &cfg.k0, cfg.eps(Mode::ModelPi), cfg.max_iter())
        .map_err(js_err)?;
    let steps: Vec<Step> = run.records.iter().map(Step::from).collect();
    to_json(&steps)
}

#[derive(Serialize)]
struct Comparison {
    rank: usize,
    required: usize,
    singular_values: Vec<f64>,
    model: Vec<Step>,
    adp: Vec<Step>,
    /// `|P_adp - P_model|_F` per iteration.
    gap: Vec<f64>,
}

/// Exact-expectation data with `q` intervals, then data-driven iteration
/// side by side with model-based iteration.
#[wasm_bindgen]
pub fn compare_adp(config: &str, q: usize, iterations: usize) -> Result<String, JsValue> {
    let cfg = load(config)?;
    let sys = cfg.system.as_ref().expect("checked in load");
    let mut ro = cfg.require_rollout().map_err(js_err)?.clone();
    ro.q = q;
    let data = collect_data_exact(
        &propagate_moments(sys, &cfg.k0, &cfg.exploration, &ro).map_err(js_err)?,
    );
    let rank = check_rank(&data);
    let model = run_model_pi(sys, &cfg.cost, &cfg.k0, 1e-300, iterations).map_err(js_err)?;
    let adp = if rank.passed {
        run_adp(&data, &cfg.cost, &cfg.k0, 1e-300, iterations, Some(sys))
            .map_err(js_err)?
            .records
    } else {
        Vec::new()
    };
    let gap = adp
        .iter()
        .zip(&model.records)
        .map(|(a, m)| (a.triple.p.as_mat() - m.triple.p.as_mat()).norm())
        .collect();
    to_json(&Comparison {
        rank: rank.rank,
        required: rank.required,
        singular_values: rank.singular_values,
        model: model.records.iter().map(Step::from).collect(),
        adp: adp.iter().map(Step::from).collect(),
        gap,
    })
}

#[derive(Serialize)]
struct Paths {
    t: Vec<f64>,
    /// `paths[p][k]` is the first state component of path `p` at `t[k]`.
    paths: Vec<Vec<f64>>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

/// A few Euler–Maruyama paths of `x_1` under the behavior policy, with the
/// exact mean and standard deviation on the interval grid.
#[wasm_bindgen]
pub fn sample_paths(config: &str, paths: usize, seed: u32) -> Result<String, JsValue> {
    let cfg = load(config)?;
    let sys = cfg.system.as_ref().expect("checked in load");
    let mut ro = cfg.require_rollout().map_err(js_err)?.clone();
    ro.seed = u64::from(seed);
    ro.paths = paths.max(1);
    let every = ro.substeps().map_err(js_err)?;
    let mut out = vec![Vec::new(); ro.paths];
    let mut counter = 0usize;
    let mut last = usize::MAX;
    visit_paths(sys, &cfg.k0, &cfg.exploration, &ro, 0, 0..ro.paths, |_, id, x, _| {
        if id != last {
            last = id;
            counter = 0;
        }
        if counter.is_multiple_of(every) {
            out[id].push(x[0]);
        }
        counter += 1;
    })
    .map_err(js_err)?;
    let trace = propagate_moments(sys, &cfg.k0, &cfg.exploration, &ro).map_err(js_err)?;
    let moments = &trace.rollouts[0];
    let mean = moments.means.iter().map(|m| m[0]).collect();
    let std = moments
        .means
        .iter()
        .zip(&moments.seconds)
        .map(|(m, s)| (s[(0, 0)] - m[0] * m[0]).max(0.0).sqrt())
        .collect();
    to_json(&Paths {
        t: trace.grid.clone(),
        paths: out,
        mean,
        std,
    })
}
