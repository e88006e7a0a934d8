//! Expectation data for the data-driven solver.
//!
//! The behaviour input is `u = K0 x + e(t)` with a deterministic multi-sine
//! `e`. Over a grid `t_0 < t_1 < ... < t_q` we need, per interval,
//!
//! | block      | row k                                   | width      |
//! |------------|-----------------------------------------|------------|
//! | `eta_xbar` | `E[vecs x(t_{k+1})] - E[vecs x(t_k)]`   | n(n+1)/2   |
//! | `eta_ubar` | `E ∫ vecs u ds`                          | m(m+1)/2   |
//! | `eta_xx`   | `E ∫ x ⊗ x ds`                           | n²         |
//! | `eta_xu`   | `E ∫ x ⊗ u ds`                           | nm         |
//!
//! Two estimators are provided. [`simulate_paths`] + [`collect_data_mc`]
//! average Euler–Maruyama sample paths. [`propagate_moments`] +
//! [`collect_data_exact`] integrate the mean and second-moment ODEs, which
//! are closed because the dynamics are linear and `e` is deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::matstack::{self, tri_len, Mat, Vector};
use crate::stability::SystemModel;
use crate::{Error, Result};

/// States with any component beyond this magnitude abort the simulation.
pub const BLOWUP_LIMIT: f64 = 1e12;

/// Paths per work unit. Fixed so the reduction order never depends on the
/// number of worker threads.
const CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub amplitude: f64,
    /// Angular frequency in rad per unit time.
    pub frequency: f64,
    pub phase: f64,
}

/// Exploration signal: one list of sinusoids per input channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSignal {
    pub channels: Vec<Vec<Sinusoid>>,
    /// Standard deviation of an additional Gaussian input perturbation,
    /// redrawn every integrator step. Experimental and Monte Carlo only.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub white_noise: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl ExplorationSignal {
    pub fn zero(m: usize) -> Self {
        ExplorationSignal {
            channels: vec![Vec::new(); m],
            white_noise: 0.0,
        }
    }

    pub fn m(&self) -> usize {
        self.channels.len()
    }

    pub fn is_deterministic(&self) -> bool {
        self.white_noise == 0.0
    }

    /// True when no channel carries a nonzero sinusoid and there is no
    /// white-noise component.
    pub fn is_silent(&self) -> bool {
        self.is_deterministic()
            && self
                .channels
                .iter()
                .flatten()
                .all(|s| s.amplitude == 0.0)
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        for (o, ch) in out.iter_mut().zip(&self.channels) {
            *o = ch
                .iter()
                .map(|s| s.amplitude * (s.frequency * t + s.phase).sin())
                .sum();
        }
    }

    pub(crate) fn problems(&self, m: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.channels.len() != m {
            out.push(format!(
                "exploration.channels: expected {m} channels, found {}",
                self.channels.len()
            ));
        }
        let finite = self
            .channels
            .iter()
            .flatten()
            .all(|s| s.amplitude.is_finite() && s.frequency.is_finite() && s.phase.is_finite());
        if !finite {
            out.push("exploration.channels: non-finite sinusoid parameter".into());
        }
        if !(self.white_noise >= 0.0 && self.white_noise.is_finite()) {
            out.push("exploration.white_noise: must be finite and non-negative".into());
        }
        out
    }
}

/// `e(t) = Σ a_j sin(ω_j t + φ_j)` per channel.
pub fn eval_exploration(sig: &ExplorationSignal, t: f64) -> Vector {
    let mut out = Vector::zeros(sig.m());
    sig.eval_into(t, out.as_mut_slice());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    #[serde(default)]
    pub t0: f64,
    pub q: usize,
    pub interval_len: f64,
    pub sde_step: f64,
    pub paths: usize,
    pub seed: u64,
    /// One rollout per initial state; rows of the data matrices are
    /// stacked rollout by rollout.
    pub x0_list: Vec<Vec<f64>>,
}

impl RolloutConfig {
    /// Integrator substeps per interval.
    pub fn substeps(&self) -> Result<usize> {
        let p = self.problems(None);
        if !p.is_empty() {
            return Err(Error::Config(p));
        }
        Ok((self.interval_len / self.sde_step).round() as usize)
    }

    pub(crate) fn problems(&self, n: Option<usize>) -> Vec<String> {
        let mut out = Vec::new();
        if !self.t0.is_finite() || self.t0 < 0.0 {
            out.push("rollout.t0: must be finite and non-negative".into());
        }
        if self.q == 0 {
            out.push("rollout.q: must be at least 1".into());
        }
        if self.paths == 0 {
            out.push("rollout.paths: must be at least 1".into());
        }
        if !(self.sde_step > 0.0 && self.sde_step.is_finite()) {
            out.push("rollout.sde_step: must be positive".into());
        }
        if !(self.interval_len > 0.0 && self.interval_len.is_finite()) {
            out.push("rollout.interval_len: must be positive".into());
        }
        if out.is_empty() {
            let ratio = self.interval_len / self.sde_step;
            let k = ratio.round();
            if k < 1.0 || (k * self.sde_step - self.interval_len).abs() > 1e-12 * self.interval_len
            {
                out.push(format!(
                    "rollout.sde_step: {} does not divide interval_len {}",
                    self.sde_step, self.interval_len
                ));
            }
        }
        if self.x0_list.is_empty() {
            out.push("rollout.x0_list: at least one initial state required".into());
        }
        for (i, x0) in self.x0_list.iter().enumerate() {
            if let Some(n) = n {
                if x0.len() != n {
                    out.push(format!(
                        "rollout.x0_list[{i}]: expected {n} entries, found {}",
                        x0.len()
                    ));
                }
            }
            if x0.iter().any(|v| !v.is_finite()) {
                out.push(format!("rollout.x0_list[{i}]: non-finite entry"));
            }
        }
        out
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.q)
            .map(|k| self.t0 + k as f64 * self.interval_len)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataMode {
    MonteCarlo { paths: usize, seed: u64, sde_step: f64 },
    Exact { step: f64 },
    Imported,
}

/// The four expectation blocks, rows stacked rollout by rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrices {
    pub n: usize,
    pub m: usize,
    pub eta_xbar: Mat,
    pub eta_ubar: Mat,
    pub eta_xx: Mat,
    pub eta_xu: Mat,
    /// Interval boundaries `t_0..t_q` (shared by every rollout).
    pub grid: Vec<f64>,
    pub rollouts: usize,
    pub mode: DataMode,
}

impl DataMatrices {
    pub fn q(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn rows(&self) -> usize {
        self.eta_xbar.nrows()
    }

    /// Checks block shapes against `n`, `m`, `q` and `rollouts`.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::Dimension("n and m must be positive".into()));
        }
        if self.grid.len() < 2 {
            return Err(Error::Dimension("q must be at least 1".into()));
        }
        if self.rollouts == 0 {
            return Err(Error::Dimension("at least one rollout required".into()));
        }
        if self.grid.windows(2).any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater)) {
            return Err(Error::InvalidValue("grid must be strictly increasing".into()));
        }
        let rows = self.q() * self.rollouts;
        let expect = [
            ("eta_xbar", &self.eta_xbar, tri_len(self.n)),
            ("eta_ubar", &self.eta_ubar, tri_len(self.m)),
            ("eta_xx", &self.eta_xx, self.n * self.n),
            ("eta_xu", &self.eta_xu, self.n * self.m),
        ];
        for (name, block, cols) in expect {
            if block.shape() != (rows, cols) {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    block.nrows(),
                    block.ncols()
                )));
            }
            matstack::ensure_finite(block)?;
        }
        Ok(())
    }
}

/// Interval sums for one rollout, flat row-major blocks.
#[derive(Debug, Clone, PartialEq)]
struct Accum {
    /// `(q+1) × n(n+1)/2` snapshots of vecs(x) at grid points.
    snapshots: Vec<f64>,
    ubar: Vec<f64>,
    xx: Vec<f64>,
    xu: Vec<f64>,
}

impl Accum {
    fn zeros(n: usize, m: usize, q: usize) -> Self {
        Accum {
            snapshots: vec![0.0; (q + 1) * tri_len(n)],
            ubar: vec![0.0; q * tri_len(m)],
            xx: vec![0.0; q * n * n],
            xu: vec![0.0; q * n * m],
        }
    }

    fn add(&mut self, other: &Accum) {
        for (dst, src) in [
            (&mut self.snapshots, &other.snapshots),
            (&mut self.ubar, &other.ubar),
            (&mut self.xx, &other.xx),
            (&mut self.xu, &other.xu),
        ] {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

/// Row-major copies of the model and gain for the inner loop.
struct SimContext<'a> {
    n: usize,
    m: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    k0: Vec<f64>,
    sig: &'a ExplorationSignal,
    t0: f64,
    q: usize,
    substeps: usize,
    h: f64,
    paths: usize,
    seed: u64,
}

/// Per-substep observer `(t, x, u)`.
type Sink<'a> = &'a mut dyn FnMut(f64, &[f64], &[f64]);

fn row_major(m: &Mat) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn matvec_add(out: &mut [f64], mat: &[f64], cols: usize, x: &[f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let row = &mat[i * cols..(i + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

impl<'a> SimContext<'a> {
    fn new(
        sys: &SystemModel,
        k0: &Mat,
        sig: &'a ExplorationSignal,
        cfg: &RolloutConfig,
    ) -> Result<Self> {
        let (n, m) = (sys.n(), sys.m());
        if k0.shape() != (m, n) {
            return Err(Error::Dimension(format!(
                "K0 must be {m}x{n}, got {}x{}",
                k0.nrows(),
                k0.ncols()
            )));
        }
        let mut problems = cfg.problems(Some(n));
        problems.extend(sig.problems(m));
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(SimContext {
            n,
            m,
            a: row_major(&sys.a),
            b: row_major(&sys.b),
            c: row_major(&sys.c),
            d: row_major(&sys.d),
            k0: row_major(k0),
            sig,
            t0: cfg.t0,
            q: cfg.q,
            substeps: cfg.substeps()?,
            h: cfg.sde_step,
            paths: cfg.paths,
            seed: cfg.seed,
        })
    }

    fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.h
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Simulates one Euler–Maruyama path, calling `sink(t, x, u)` at every
    /// grid substep, and returns its interval sums.
    fn simulate_path(
        &self,
        x0: &[f64],
        path_id: usize,
        stream: u64,
        mut sink: Option<Sink<'_>>,
    ) -> Result<Accum> {
        let (n, m, q, s, h) = (self.n, self.m, self.q, self.substeps, self.h);
        let (tn, tm) = (tri_len(n), tri_len(m));
        let sqrt_h = h.sqrt();
        let mut rng = self.rng(stream);
        let mut acc = Accum::zeros(n, m, q);
        let mut x = x0.to_vec();
        let mut u = vec![0.0; m];
        let mut drift = vec![0.0; n];
        let mut diffusion = vec![0.0; n];
        let mut vecs_buf = vec![0.0; tm.max(tn)];
        let total = q * s;
        for j in 0..=total {
            let t = self.time(j);
            if x.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_LIMIT) {
                return Err(Error::Instability { path: path_id, time: t });
            }
            self.sig.eval_into(t, &mut u);
            matvec_add(&mut u, &self.k0, n, &x);
            if self.sig.white_noise > 0.0 {
                for ui in u.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *ui += self.sig.white_noise * z;
                }
            }
            if let Some(f) = sink.as_mut() {
                f(t, &x, &u);
            }

            if j % s == 0 {
                let g = j / s;
                matstack::vecs_into(&x, &mut vecs_buf[..tn]);
                acc.snapshots[g * tn..(g + 1) * tn].copy_from_slice(&vecs_buf[..tn]);
            }
            // trapezoid weights on the substep grid
            let (k_lo, k_hi) = if j % s == 0 {
                let g = j / s;
                (g.checked_sub(1), (g < q).then_some(g))
            } else {
                (None, Some(j / s))
            };
            let interior = j % s != 0;
            matstack::vecs_into(&u, &mut vecs_buf[..tm]);
            for (k, w) in [(k_lo, 0.5 * h), (k_hi, if interior { h } else { 0.5 * h })] {
                let Some(k) = k else { continue };
                for (dst, v) in acc.ubar[k * tm..(k + 1) * tm].iter_mut().zip(&vecs_buf[..tm]) {
                    *dst += w * v;
                }
                let xx = &mut acc.xx[k * n * n..(k + 1) * n * n];
                for p in 0..n {
                    for l in 0..n {
                        xx[p * n + l] += w * x[p] * x[l];
                    }
                }
                let xu = &mut acc.xu[k * n * m..(k + 1) * n * m];
                for p in 0..n {
                    for i in 0..m {
                        xu[p * m + i] += w * x[p] * u[i];
                    }
                }
            }

            if j == total {
                break;
            }
            drift.iter_mut().for_each(|v| *v = 0.0);
            diffusion.iter_mut().for_each(|v| *v = 0.0);
            matvec_add(&mut drift, &self.a, n, &x);
            matvec_add(&mut drift, &self.b, m, &u);
            matvec_add(&mut diffusion, &self.c, n, &x);
            matvec_add(&mut diffusion, &self.d, m, &u);
            let z: f64 = rng.sample(StandardNormal);
            let dw = sqrt_h * z;
            for i in 0..n {
                x[i] += drift[i] * h + diffusion[i] * dw;
            }
        }
        Ok(acc)
    }

    fn stream_id(&self, rollout: usize, path: usize) -> u64 {
        (rollout * self.paths + path) as u64
    }

    fn rollout_sum(&self, rollout: usize, x0: &[f64]) -> Result<Accum> {
        let chunks: Vec<usize> = (0..self.paths).step_by(CHUNK).collect();
        let work = |start: usize| -> Result<Accum> {
            let mut acc = Accum::zeros(self.n, self.m, self.q);
            for p in start..(start + CHUNK).min(self.paths) {
                let id = self.stream_id(rollout, p);
                acc.add(&self.simulate_path(x0, id as usize, id, None)?);
            }
            Ok(acc)
        };
        #[cfg(feature = "parallel")]
        let partials: Vec<Result<Accum>> = {
            use rayon::prelude::*;
            chunks.par_iter().map(|&c| work(c)).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let partials: Vec<Result<Accum>> = chunks.iter().map(|&c| work(c)).collect();

        let mut total = Accum::zeros(self.n, self.m, self.q);
        for part in partials {
            total.add(&part?);
        }
        Ok(total)
    }
}

/// Monte Carlo sums over all paths of every rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    n: usize,
    m: usize,
    grid: Vec<f64>,
    sums: Vec<Accum>,
    paths: usize,
    seed: u64,
    sde_step: f64,
}

impl TrajectoryBatch {
    pub fn paths(&self) -> usize {
        self.paths
    }
}

/// Simulates `cfg.paths` Euler–Maruyama paths per initial state under
/// `u = K0 x + e(t)`. Path `p` of rollout `r` draws from the ChaCha stream
/// `r·paths + p` seeded by `cfg.seed`, so results are reproducible and
/// independent of the worker count.
pub fn simulate_paths(
    sys: &SystemModel,
    k0: &Mat,
    sig: &ExplorationSignal,
    cfg: &RolloutConfig,
) -> Result<TrajectoryBatch> {
    let ctx = SimContext::new(sys, k0, sig, cfg)?;
    let sums = cfg
        .x0_list
        .iter()
        .enumerate()
        .map(|(r, x0)| ctx.rollout_sum(r, x0))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryBatch {
        n: ctx.n,
        m: ctx.m,
        grid: cfg.grid(),
        sums,
        paths: cfg.paths,
        seed: cfg.seed,
        sde_step: cfg.sde_step,
    })
}

/// Visits every substep `(t, path_id, x, u)` of the selected paths of one
/// rollout, in path order. Used for trajectory dumps and diagnostics; the
/// paths are identical to those behind [`simulate_paths`].
pub fn visit_paths(
    sys: &SystemModel,
    k0: &Mat,
    sig: &ExplorationSignal,
    cfg: &RolloutConfig,
    rollout: usize,
    paths: std::ops::Range<usize>,
    mut f: impl FnMut(f64, usize, &[f64], &[f64]),
) -> Result<()> {
    let ctx = SimContext::new(sys, k0, sig, cfg)?;
    let x0 = cfg
        .x0_list
        .get(rollout)
        .ok_or_else(|| Error::InvalidValue(format!("no rollout {rollout}")))?;
    for p in paths {
        let id = ctx.stream_id(rollout, p);
        let mut sink = |t: f64, x: &[f64], u: &[f64]| f(t, id as usize, x, u);
        ctx.simulate_path(x0, id as usize, id, Some(&mut sink))?;
    }
    Ok(())
}

/// Writes every substep of every path as CSV `t,path_id,x_1..x_n,u_1..u_m`.
pub fn dump_paths_csv<W: std::io::Write>(
    sys: &SystemModel,
    k0: &Mat,
    sig: &ExplorationSignal,
    cfg: &RolloutConfig,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string(), "path_id".to_string()];
    header.extend((1..=sys.n()).map(|i| format!("x_{i}")));
    header.extend((1..=sys.m()).map(|i| format!("u_{i}")));
    w.write_record(&header)?;
    let mut failure = None;
    for r in 0..cfg.x0_list.len() {
        visit_paths(sys, k0, sig, cfg, r, 0..cfg.paths, |t, id, x, u| {
            if failure.is_some() {
                return;
            }
            let mut rec = vec![t.to_string(), id.to_string()];
            rec.extend(x.iter().chain(u).map(f64::to_string));
            if let Err(e) = w.write_record(&rec) {
                failure = Some(e);
            }
        })?;
    }
    if let Some(e) = failure {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

fn stack_rows(blocks: Vec<Vec<f64>>, row_len: usize) -> Mat {
    let flat: Vec<f64> = blocks.into_iter().flatten().collect();
    let rows = flat.len() / row_len.max(1);
    Mat::from_row_slice(rows, row_len, &flat)
}

/// Sample means over paths, rows stacked rollout by rollout.
pub fn collect_data_mc(batch: &TrajectoryBatch) -> DataMatrices {
    let (n, m) = (batch.n, batch.m);
    let q = batch.grid.len() - 1;
    let (tn, tm) = (tri_len(n), tri_len(m));
    let scale = 1.0 / batch.paths as f64;
    let mut xbar = Vec::new();
    let mut ubar = Vec::new();
    let mut xx = Vec::new();
    let mut xu = Vec::new();
    for acc in &batch.sums {
        let mut d = Vec::with_capacity(q * tn);
        for k in 0..q {
            for i in 0..tn {
                d.push(scale * (acc.snapshots[(k + 1) * tn + i] - acc.snapshots[k * tn + i]));
            }
        }
        xbar.push(d);
        ubar.push(acc.ubar.iter().map(|v| v * scale).collect());
        xx.push(acc.xx.iter().map(|v| v * scale).collect());
        xu.push(acc.xu.iter().map(|v| v * scale).collect());
    }
    DataMatrices {
        n,
        m,
        eta_xbar: stack_rows(xbar, tn),
        eta_ubar: stack_rows(ubar, tm),
        eta_xx: stack_rows(xx, n * n),
        eta_xu: stack_rows(xu, n * m),
        grid: batch.grid.clone(),
        rollouts: batch.sums.len(),
        mode: DataMode::MonteCarlo {
            paths: batch.paths,
            seed: batch.seed,
            sde_step: batch.sde_step,
        },
    }
}

/// Exact moments of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutMoments {
    /// `E[x(t_k)]`, k = 0..=q.
    pub means: Vec<Vector>,
    /// `E[x(t_k) x(t_k)ᵀ]`, k = 0..=q.
    pub seconds: Vec<Mat>,
    /// `∫ E[x xᵀ] ds` over each interval.
    pub int_xx: Vec<Mat>,
    /// `∫ E[x uᵀ] ds` over each interval (n × m).
    pub int_xu: Vec<Mat>,
    /// `∫ E[u uᵀ] ds` over each interval.
    pub int_uu: Vec<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentTrace {
    pub n: usize,
    pub m: usize,
    pub grid: Vec<f64>,
    pub step: f64,
    pub rollouts: Vec<RolloutMoments>,
}

/// Augmented moment state: mean, second moment and the three running
/// integrals, all as matrices.
#[derive(Clone)]
struct MomentState {
    mean: Vector,
    second: Mat,
    ixx: Mat,
    ixu: Mat,
    iuu: Mat,
}

impl MomentState {
    fn axpy(&self, a: f64, d: &MomentState) -> MomentState {
        MomentState {
            mean: &self.mean + &d.mean * a,
            second: &self.second + &d.second * a,
            ixx: &self.ixx + &d.ixx * a,
            ixu: &self.ixu + &d.ixu * a,
            iuu: &self.iuu + &d.iuu * a,
        }
    }
}

struct MomentOde<'a> {
    acl: Mat,
    ccl: Mat,
    b: &'a Mat,
    d: &'a Mat,
    k0: &'a Mat,
    sig: &'a ExplorationSignal,
}

impl MomentOde<'_> {
    fn input_moments(&self, s: &MomentState, e: &Vector) -> (Mat, Mat) {
        let me = &s.mean * e.transpose();
        // E[x uᵀ] = S K0ᵀ + m eᵀ
        let xu = &s.second * self.k0.transpose() + &me;
        // E[u uᵀ] = K0 S K0ᵀ + K0 m eᵀ + e mᵀ K0ᵀ + e eᵀ
        let k_me = self.k0 * &me;
        let uu = self.k0 * &s.second * self.k0.transpose()
            + &k_me
            + k_me.transpose()
            + e * e.transpose();
        (xu, uu)
    }

    fn deriv(&self, t: f64, s: &MomentState) -> MomentState {
        let e = eval_exploration(self.sig, t);
        let be = self.b * &e;
        let de = self.d * &e;
        let cm = &self.ccl * &s.mean;
        let acl_s = &self.acl * &s.second;
        let cross = &be * s.mean.transpose() + &cm * de.transpose();
        let second = &acl_s
            + acl_s.transpose()
            + &self.ccl * &s.second * self.ccl.transpose()
            + &cross
            + cross.transpose()
            + &de * de.transpose();
        let (xu, uu) = self.input_moments(s, &e);
        MomentState {
            mean: &self.acl * &s.mean + be,
            second,
            ixx: s.second.clone(),
            ixu: xu,
            iuu: uu,
        }
    }

    fn rk4(&self, t: f64, h: f64, s: &MomentState) -> MomentState {
        let k1 = self.deriv(t, s);
        let k2 = self.deriv(t + 0.5 * h, &s.axpy(0.5 * h, &k1));
        let k3 = self.deriv(t + 0.5 * h, &s.axpy(0.5 * h, &k2));
        let k4 = self.deriv(t + h, &s.axpy(h, &k3));
        s.axpy(h / 6.0, &k1)
            .axpy(h / 3.0, &k2)
            .axpy(h / 3.0, &k3)
            .axpy(h / 6.0, &k4)
    }
}

/// Integrates `m = E[x]`, `S = E[xxᵀ]` and the interval integrals of
/// `E[xxᵀ]`, `E[xuᵀ]`, `E[uuᵀ]` with classical RK4 at step `cfg.sde_step`.
pub fn propagate_moments(
    sys: &SystemModel,
    k0: &Mat,
    sig: &ExplorationSignal,
    cfg: &RolloutConfig,
) -> Result<MomentTrace> {
    let ctx = SimContext::new(sys, k0, sig, cfg)?;
    if !sig.is_deterministic() {
        return Err(Error::InvalidValue(
            "exact moments require a deterministic exploration signal (white_noise = 0)".into(),
        ));
    }
    let (n, m) = (ctx.n, ctx.m);
    let ode = MomentOde {
        acl: &sys.a + &sys.b * k0,
        ccl: &sys.c + &sys.d * k0,
        b: &sys.b,
        d: &sys.d,
        k0,
        sig,
    };
    let h = cfg.sde_step;
    let mut rollouts = Vec::with_capacity(cfg.x0_list.len());
    for x0 in &cfg.x0_list {
        let x0 = Vector::from_column_slice(x0);
        let mut state = MomentState {
            second: &x0 * x0.transpose(),
            mean: x0,
            ixx: Mat::zeros(n, n),
            ixu: Mat::zeros(n, m),
            iuu: Mat::zeros(m, m),
        };
        let mut out = RolloutMoments {
            means: vec![state.mean.clone()],
            seconds: vec![state.second.clone()],
            int_xx: Vec::with_capacity(cfg.q),
            int_xu: Vec::with_capacity(cfg.q),
            int_uu: Vec::with_capacity(cfg.q),
        };
        for k in 0..cfg.q {
            state.ixx.fill(0.0);
            state.ixu.fill(0.0);
            state.iuu.fill(0.0);
            for j in 0..ctx.substeps {
                let t = ctx.time(k * ctx.substeps + j);
                state = ode.rk4(t, h, &state);
            }
            let t_end = ctx.time((k + 1) * ctx.substeps);
            check_second_moment(&state.second, t_end)?;
            out.means.push(state.mean.clone());
            out.seconds.push(state.second.clone());
            out.int_xx.push(state.ixx.clone());
            out.int_xu.push(state.ixu.clone());
            out.int_uu.push(state.iuu.clone());
        }
        rollouts.push(out);
    }
    Ok(MomentTrace {
        n,
        m,
        grid: cfg.grid(),
        step: h,
        rollouts,
    })
}

fn check_second_moment(s: &Mat, t: f64) -> Result<()> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationAccuracy {
            time: t,
            detail: "second moment is not finite".into(),
        });
    }
    let scale = s.norm();
    let min_eig = s
        .clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    if min_eig < -1e-8 * scale {
        return Err(Error::IntegrationAccuracy {
            time: t,
            detail: format!("second moment lost positive semidefiniteness (min eig {min_eig:e})"),
        });
    }
    Ok(())
}

/// Assembles the data matrices from exact moments.
pub fn collect_data_exact(trace: &MomentTrace) -> DataMatrices {
    let (n, m) = (trace.n, trace.m);
    let (tn, tm) = (tri_len(n), tri_len(m));
    let mut xbar = Vec::new();
    let mut ubar = Vec::new();
    let mut xx = Vec::new();
    let mut xu = Vec::new();
    for r in &trace.rollouts {
        for k in 0..r.int_xx.len() {
            let lo = matstack::upper_triangle(&r.seconds[k]);
            let hi = matstack::upper_triangle(&r.seconds[k + 1]);
            xbar.push((hi - lo).as_slice().to_vec());
            ubar.push(matstack::upper_triangle(&r.int_uu[k]).as_slice().to_vec());
            // E[x ⊗ x] row: index p·n + l holds E[x_p x_l]
            xx.push(row_major(&r.int_xx[k]));
            // E[x ⊗ u] row: index p·m + i holds E[x_p u_i]
            xu.push(row_major(&r.int_xu[k]));
        }
    }
    DataMatrices {
        n,
        m,
        eta_xbar: stack_rows(xbar, tn),
        eta_ubar: stack_rows(ubar, tm),
        eta_xx: stack_rows(xx, n * n),
        eta_xu: stack_rows(xu, n * m),
        grid: trace.grid.clone(),
        rollouts: trace.rollouts.len(),
        mode: DataMode::Exact { step: trace.step },
    }
}

/// `E ∫ vecs(K x) ds` per interval, from `eta_xx` alone.
pub fn eta_kx(data: &DataMatrices, k: &Mat) -> Result<Mat> {
    if k.shape() != (data.m, data.n) {
        return Err(Error::Dimension(format!(
            "gain must be {}x{}, got {}x{}",
            data.m,
            data.n,
            k.nrows(),
            k.ncols()
        )));
    }
    Ok(&data.eta_xx * matstack::gamma_of_k(k).transpose())
}
