//! Acceptance criteria, one test each. Every test prints a single
//! `PASS`/`FAIL` line before asserting, so `--nocapture` gives a summary.

use std::time::{Duration, Instant};

use lqs_core::adp::{check_rank, run_adp};
use lqs_core::config::{parse_config, Mode, ProblemConfig};
use lqs_core::datagen::{
    collect_data_exact, collect_data_mc, propagate_moments, simulate_paths, DataMatrices,
    ExplorationSignal,
};
use lqs_core::matstack::{gamma_of_k, kron, mat_from_row_major, vech, vecs, Mat, SymMat, Vector};
use lqs_core::model_pi::{
    lyap_residual_r2, policy_eval, run_model_pi, sare_residual_r1, CostWeights,
};
use lqs_core::runner::{execute, RunOptions};
use lqs_core::stability::{
    closed_loop_stability, glyap_residual, glyap_solve, is_ms_stabilizing, ClosedLoop,
    SystemModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REF_P: [f64; 4] = [2.9072352, -0.8296538, -0.8296538, 2.4975686];
const REF_K: [f64; 2] = [-0.0669434, 0.0064058];
const REF_R1: f64 = 2.0820041e-3;
const REF_R2: f64 = 2.0833488e-3;

fn verdict(id: &str, ok: bool, detail: String) {
    println!("{} criterion {id}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {id} failed: {detail}");
}

fn fixture() -> ProblemConfig {
    parse_config(lqs_core::BENCHMARK_JSON).unwrap()
}

fn scalar(a: f64, b: f64, c: f64, d: f64) -> (SystemModel, CostWeights) {
    let m = |v: f64| Mat::from_element(1, 1, v);
    let sys = SystemModel::new(m(a), m(b), m(c), m(d)).unwrap();
    let w = CostWeights::new(SymMat::identity(1), SymMat::identity(1)).unwrap();
    (sys, w)
}

/// Positive root of `x² + bx + c`, computed in the cancellation-free form.
fn positive_root(b: f64, c: f64) -> f64 {
    let disc = (b * b - 4.0 * c).sqrt();
    let q = -0.5 * (b + b.signum() * disc);
    let (r1, r2) = (q, c / q);
    r1.max(r2)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_1_benchmark_model_based() {
    let cfg = fixture();
    let sys = cfg.system.as_ref().unwrap();
    let start = Instant::now();
    let run = run_model_pi(sys, &cfg.cost, &cfg.k0, cfg.eps(Mode::ModelPi), cfg.max_iter()).unwrap();
    let elapsed = start.elapsed();
    let p = run.final_p();
    let k = run.final_k();
    let r1 = sare_residual_r1(sys, &cfg.cost, p).unwrap();
    let p_err = max_abs_diff(p.as_slice(), &REF_P);
    let k_err = max_abs_diff(k.as_slice(), &REF_K);
    let iters = run.records.len();
    let ok = run.converged()
        && iters <= 25
        && p_err <= 1e-2
        && k_err <= 2e-3
        && r1 <= 1e-8
        && elapsed < Duration::from_secs(1);
    verdict(
        "1",
        ok,
        format!(
            "{iters} iterations, max|P - P_ref| = {p_err:.3e} (tol 1e-2), \
             max|K - K_ref| = {k_err:.3e} (tol 2e-3), |R1| = {r1:.3e}, {elapsed:?}; \
             K = [{:.7}, {:.7}]",
            k[(0, 0)],
            k[(0, 1)]
        ),
    );
}

#[test]
fn criterion_2_reference_residuals() {
    let cfg = fixture();
    let sys = cfg.system.as_ref().unwrap();
    let start = Instant::now();
    let p = SymMat::new(mat_from_row_major(2, 2, &[2.9072352, -0.8296538, -0.8296538, 2.4975686]).unwrap())
        .unwrap();
    let k = mat_from_row_major(1, 2, &REF_K).unwrap();
    let r1 = sare_residual_r1(sys, &cfg.cost, &p).unwrap();
    let r2 = lyap_residual_r2(sys, &cfg.cost, &p, &k).unwrap();
    let elapsed = start.elapsed();
    let within = |v: f64, target: f64| (v - target).abs() <= 0.2 * target;
    let ok = within(r1, REF_R1) && within(r2, REF_R2) && elapsed < Duration::from_millis(100);
    verdict(
        "2",
        ok,
        format!(
            "|R1(P_ref)| = {r1:.4e} (expected {REF_R1:.4e} ±20%), \
             |R2(P_ref, K_ref)| = {r2:.4e} (expected {REF_R2:.4e} ±20%), {elapsed:?}"
        ),
    );
}

#[test]
fn criterion_3_exact_expectation_equivalence() {
    let cfg = fixture();
    let sys = cfg.system.as_ref().unwrap();
    let start = Instant::now();
    let data = collect_data_exact(
        &propagate_moments(sys, &cfg.k0, &cfg.exploration, cfg.rollout.as_ref().unwrap()).unwrap(),
    );
    // fixed iteration count so that i = 0..5 all exist
    let adp = run_adp(&data, &cfg.cost, &cfg.k0, 1e-300, 6, None).unwrap();
    let model = run_model_pi(sys, &cfg.cost, &cfg.k0, 1e-300, 6).unwrap();
    let elapsed = start.elapsed();
    let mut worst_p: f64 = 0.0;
    let mut worst_k: f64 = 0.0;
    for (a, m) in adp.records.iter().zip(&model.records) {
        worst_p = worst_p.max((a.triple.p.as_mat() - m.triple.p.as_mat()).norm());
        worst_k = worst_k.max((&a.k_next - &m.k_next).norm());
    }
    let ok = adp.records.len() == 6
        && model.records.len() == 6
        && worst_p <= 1e-5
        && worst_k <= 1e-5
        && elapsed < Duration::from_secs(5);
    verdict(
        "3",
        ok,
        format!(
            "i = 0..5: max|P_adp - P_model| = {worst_p:.3e}, max|K_adp - K_model| = {worst_k:.3e} \
             (tol 1e-5), {elapsed:?}"
        ),
    );
}

#[test]
fn criterion_4_monte_carlo_run() {
    let cfg = fixture();
    let ro = cfg.rollout.as_ref().unwrap();
    assert_eq!((ro.seed, ro.sde_step, ro.interval_len, ro.q, ro.paths), (42, 1e-3, 0.05, 60, 10_000));
    let start = Instant::now();
    let mc = execute(Mode::AdpMc, &cfg, &RunOptions { seed: Some(42), imported: None }).unwrap();
    let elapsed = start.elapsed();
    let model = execute(Mode::ModelPi, &cfg, &RunOptions::default()).unwrap();
    let p_mc = mc.report.final_p.as_ref().unwrap();
    let p_star = model.report.final_p.as_ref().unwrap();
    let rel = (p_mc.as_mat() - p_star.as_mat()).norm() / p_star.norm();
    let ok = mc.exit_code() == 0 && rel <= 0.10 && elapsed < Duration::from_secs(60);
    verdict(
        "4",
        ok,
        format!(
            "status {:?}, |P_mc - P*|/|P*| = {rel:.3e} (tol 0.10), {elapsed:?}",
            mc.report.status
        ),
    );
}

#[test]
fn criterion_5_scalar_closed_forms() {
    // (a) 2ap - p² + 1 = 0 with a = -1
    let (sys, w) = scalar(-1.0, 1.0, 0.0, 0.0);
    let run = run_model_pi(&sys, &w, &Mat::zeros(1, 1), 1e-14, 100).unwrap();
    let pa = run.final_p()[(0, 0)];
    let root_a = positive_root(2.0, -1.0);
    // (b) (2a + c²)p - p² + 1 = 0, i.e. p² + 1.75p - 1 = 0
    let (sys, w) = scalar(-1.0, 1.0, 0.5, 0.0);
    let run = run_model_pi(&sys, &w, &Mat::zeros(1, 1), 1e-14, 100).unwrap();
    let pb = run.final_p()[(0, 0)];
    let root_b = positive_root(1.75, -1.0);
    let (ea, eb) = ((pa - root_a).abs(), (pb - root_b).abs());
    let ok = ea <= 1e-10 && eb <= 1e-10 && (root_a - (2f64.sqrt() - 1.0)).abs() < 1e-15;
    verdict(
        "5",
        ok,
        format!("(a) p = {pa:.15} vs {root_a:.15} (err {ea:.1e}); (b) p = {pb:.15} vs {root_b:.15} (err {eb:.1e})"),
    );
}

#[test]
fn criterion_6_rank_condition() {
    let mut cfg = fixture();
    let sys = cfg.system.clone().unwrap();
    let ro = cfg.rollout.clone().unwrap();
    let good = collect_data_exact(&propagate_moments(&sys, &cfg.k0, &cfg.exploration, &ro).unwrap());
    let good_rank = check_rank(&good);

    cfg.exploration = ExplorationSignal::zero(1);
    let silent = collect_data_exact(&propagate_moments(&sys, &cfg.k0, &cfg.exploration, &ro).unwrap());
    let silent_rank = check_rank(&silent);
    let exit = execute(Mode::AdpExact, &cfg, &RunOptions::default()).unwrap().exit_code();

    let ok = good_rank.passed
        && good_rank.required == 6
        && good_rank.rank == 6
        && ro.q == 60
        && !silent_rank.passed
        && exit == 2;
    verdict(
        "6",
        ok,
        format!(
            "3 sines, q = 60: rank {}/{}; zero exploration: rank {}/{}, adp_exact exit code {exit}",
            good_rank.rank, good_rank.required, silent_rank.rank, silent_rank.required
        ),
    );
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

fn vech_vecs_identity(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..300 {
        let n = 1 + i % 6;
        let g = random_mat(rng, n, n, 2.0);
        let f = SymMat::symmetrize(&g + g.transpose());
        let x = Vector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let direct = (x.transpose() * f.as_mat() * &x)[(0, 0)];
        let via = vech(&f).dot(&vecs(x.as_slice()));
        worst = worst.max((direct - via).abs() / direct.abs().max(1.0));
    }
    worst
}

fn gamma_identity(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..300 {
        let n = 1 + i % 5;
        let m = 1 + (i / 5) % 3;
        let k = random_mat(rng, m, n, 2.0);
        let x = Vector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let lhs = vecs((&k * &x).as_slice());
        let xx = kron(&Mat::from_column_slice(n, 1, x.as_slice()), &Mat::from_column_slice(n, 1, x.as_slice()));
        let rhs = gamma_of_k(&k) * xx.column(0);
        worst = worst.max((lhs - rhs).amax() / (1.0 + x.norm() * x.norm() * k.norm() * k.norm()));
    }
    worst
}

fn random_stable(rng: &mut ChaCha8Rng, n: usize) -> ClosedLoop {
    let mut acl = random_mat(rng, n, n, 1.0);
    let ccl = random_mat(rng, n, n, 0.5);
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

fn glyap_instances(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (mut worst_res, mut worst_eig): (f64, f64) = (0.0, f64::INFINITY);
    for i in 0..100 {
        let n = 1 + i % 5;
        let cl = random_stable(rng, n);
        let g = random_mat(rng, n, n, 1.0);
        let w = SymMat::symmetrize(&g * g.transpose());
        let p = glyap_solve(&cl, &w).unwrap();
        worst_res = worst_res.max(glyap_residual(&cl, &w, &p).norm() / w.norm().max(1.0));
        worst_eig = worst_eig.min(p.min_eigenvalue() / p.norm().max(1e-300));
    }
    (worst_res, worst_eig)
}

fn scalar_criterion_agreement(rng: &mut ChaCha8Rng) -> usize {
    let mut disagreements = 0;
    for _ in 0..500 {
        let a = rng.random_range(-3.0..3.0);
        let c: f64 = rng.random_range(-2.0..2.0);
        let crit = 2.0 * a + c * c;
        if crit.abs() < 1e-6 {
            continue;
        }
        let (sys, _) = scalar(a, 1.0, c, 0.0);
        let stable = is_ms_stabilizing(&sys, &Mat::zeros(1, 1)).unwrap().stable;
        if stable != (crit < 0.0) {
            disagreements += 1;
        }
    }
    disagreements
}

fn block_gaps(mc: &DataMatrices, exact: &DataMatrices) -> [f64; 4] {
    let rel = |a: &Mat, b: &Mat| (a - b).norm() / b.norm();
    [
        rel(&mc.eta_xbar, &exact.eta_xbar),
        rel(&mc.eta_ubar, &exact.eta_ubar),
        rel(&mc.eta_xx, &exact.eta_xx),
        rel(&mc.eta_xu, &exact.eta_xu),
    ]
}

#[test]
fn criterion_7_property_suites() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let vech_err = vech_vecs_identity(&mut rng);
    let gamma_err = gamma_identity(&mut rng);
    let (glyap_res, glyap_eig) = glyap_instances(&mut rng);
    let disagreements = scalar_criterion_agreement(&mut rng);

    let cfg = fixture();
    let sys = cfg.system.as_ref().unwrap();
    let ro = cfg.rollout.as_ref().unwrap();
    let first = simulate_paths(sys, &cfg.k0, &cfg.exploration, ro).unwrap();
    let again = simulate_paths(sys, &cfg.k0, &cfg.exploration, ro).unwrap();
    let (mc, mc_again) = (collect_data_mc(&first), collect_data_mc(&again));
    let bit_identical = [
        (&mc.eta_xbar, &mc_again.eta_xbar),
        (&mc.eta_ubar, &mc_again.eta_ubar),
        (&mc.eta_xx, &mc_again.eta_xx),
        (&mc.eta_xu, &mc_again.eta_xu),
    ]
    .iter()
    .all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let exact = collect_data_exact(&propagate_moments(sys, &cfg.k0, &cfg.exploration, ro).unwrap());
    let gaps = block_gaps(&mc, &exact);
    let worst_gap = gaps.iter().cloned().fold(0.0, f64::max);

    let ok = vech_err <= 1e-12
        && gamma_err <= 1e-12
        && glyap_res <= 1e-9
        && glyap_eig >= -1e-9
        && disagreements == 0
        && bit_identical
        && worst_gap <= 0.05;
    verdict(
        "7",
        ok,
        format!(
            "vech/vecs {vech_err:.1e}, Gamma {gamma_err:.1e}, glyap residual {glyap_res:.1e} \
             (min eig ratio {glyap_eig:.1e}), scalar criterion disagreements {disagreements}, \
             MC bit-identical {bit_identical}, MC vs exact eta gaps \
             [{:.2e}, {:.2e}, {:.2e}, {:.2e}] (tol 0.05)",
            gaps[0], gaps[1], gaps[2], gaps[3]
        ),
    );
}

#[test]
fn reference_gain_evaluates_close_to_reference_value() {
    // evaluating the reference gain reproduces the reference value matrix to
    // the stated 1e-2, even though the gain is not the optimum for R = 1
    let cfg = fixture();
    let k = mat_from_row_major(1, 2, &REF_K).unwrap();
    let t = policy_eval(cfg.system.as_ref().unwrap(), &cfg.cost, &k).unwrap();
    assert!(max_abs_diff(t.p.as_slice(), &REF_P) <= 1e-2);
}
