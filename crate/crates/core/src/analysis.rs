//! Metrics, ε-sweeps and empirical checks of the convergence theorems.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::halting::{infer_adaptive, HaltingParams};
use crate::linalg::{l2_norm, spectral_norm};
use crate::nets::UnfoldedNet;
use crate::problems::{gaussian_iid, gen_measurement, gen_sparse_signal, Batch, MatrixKind, MeasurementMatrix};
use crate::rng::{derive_seed, rng_from};
use crate::solvers::{csv_err, oracle_adaptive_pgd, pgd_iterate, theoretical_step_size, ConstraintKind, GradientStep};

pub const NMSE_FLOOR_DB: f64 = -160.0;
pub const DEFAULT_SUCCESS_DB: f64 = -10.0;

fn ratio_to_db(r: f64) -> f64 {
    if r <= 0.0 {
        NMSE_FLOOR_DB
    } else {
        (10.0 * r.log10()).max(NMSE_FLOOR_DB)
    }
}

/// `‖x − x̂‖² / ‖x‖²`.
pub fn nmse(estimate: ArrayView1<f64>, truth: ArrayView1<f64>) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::dim("estimate and truth differ in length"));
    }
    let energy = truth.dot(&truth);
    if energy == 0.0 {
        return Err(Error::param("NMSE is undefined for a zero signal"));
    }
    let d = &truth - &estimate;
    Ok(d.dot(&d) / energy)
}

/// NMSE in dB, floored at −160 dB.
pub fn nmse_db(estimate: ArrayView1<f64>, truth: ArrayView1<f64>) -> Result<f64> {
    nmse(estimate, truth).map(ratio_to_db)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityStats {
    pub count: usize,
    pub nmse_db: f64,
    pub avg_layers: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub epsilon: f64,
    pub samples: usize,
    /// dB of the mean per-sample NMSE.
    pub nmse_db_mean: f64,
    /// Standard deviation of per-sample `‖x − x̂‖²`.
    pub error_std: f64,
    pub success_rate: f64,
    pub avg_exit_layer: f64,
    /// `exit_histogram[t-1]` counts samples that exited at layer `t`.
    pub exit_histogram: Vec<usize>,
    pub per_sparsity: BTreeMap<usize, SparsityStats>,
}

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub exit_layer: usize,
    pub nmse: f64,
    pub sq_error: f64,
    pub scores: Vec<f64>,
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Adaptive inference on every sample of a batch, in sample order.
pub fn infer_batch(net: &UnfoldedNet, hp: &HaltingParams, batch: &Batch, epsilon: f64) -> Result<Vec<SampleResult>> {
    let a = batch.matrix.view();
    (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let truth = batch.signals.row(i);
            let out = infer_adaptive(net, hp, a, batch.measurements.row(i), epsilon)?;
            let d = &truth - &out.estimate;
            Ok(SampleResult {
                exit_layer: out.exit_layer,
                nmse: nmse(out.estimate.view(), truth)?,
                sq_error: d.dot(&d),
                scores: out.scores,
            })
        })
        .collect()
}

fn aggregate(epsilon: f64, depth: usize, sparsities: &[usize], results: &[SampleResult], success_db: f64) -> EvalReport {
    let n = results.len() as f64;
    let mut hist = vec![0usize; depth];
    let mut groups: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
    for (r, &s) in results.iter().zip(sparsities) {
        hist[r.exit_layer - 1] += 1;
        let g = groups.entry(s).or_insert((0, 0.0, 0.0));
        g.0 += 1;
        g.1 += r.nmse;
        g.2 += r.exit_layer as f64;
    }
    let sq: Vec<f64> = results.iter().map(|r| r.sq_error).collect();
    EvalReport {
        epsilon,
        samples: results.len(),
        nmse_db_mean: ratio_to_db(results.iter().map(|r| r.nmse).sum::<f64>() / n),
        error_std: std_dev(&sq),
        success_rate: results.iter().filter(|r| ratio_to_db(r.nmse) < success_db).count() as f64 / n,
        avg_exit_layer: results.iter().map(|r| r.exit_layer as f64).sum::<f64>() / n,
        exit_histogram: hist,
        per_sparsity: groups
            .into_iter()
            .map(|(s, (c, e, l))| {
                (
                    s,
                    SparsityStats {
                        count: c,
                        nmse_db: ratio_to_db(e / c as f64),
                        avg_layers: l / c as f64,
                    },
                )
            })
            .collect(),
    }
}

pub fn evaluate(net: &UnfoldedNet, hp: &HaltingParams, batch: &Batch, epsilon: f64, success_db: f64) -> Result<EvalReport> {
    if batch.is_empty() {
        return Err(Error::param("cannot evaluate an empty dataset"));
    }
    let results = infer_batch(net, hp, batch, epsilon)?;
    Ok(aggregate(epsilon, net.depth, &batch.sparsities, &results, success_db))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub avg_layers: f64,
    pub nmse_db: f64,
    pub error_std: f64,
    pub success_rate: f64,
}

impl From<&EvalReport> for SweepRow {
    fn from(r: &EvalReport) -> Self {
        SweepRow {
            epsilon: r.epsilon,
            avg_layers: r.avg_exit_layer,
            nmse_db: r.nmse_db_mean,
            error_std: r.error_std,
            success_rate: r.success_rate,
        }
    }
}

/// One evaluation per ε; rows sorted by ε descending.
pub fn sweep_epsilon(net: &UnfoldedNet, hp: &HaltingParams, batch: &Batch, epsilons: &[f64], success_db: f64) -> Result<Vec<EvalReport>> {
    if epsilons.is_empty() {
        return Err(Error::param("epsilon sweep needs at least one value"));
    }
    let mut eps = epsilons.to_vec();
    eps.sort_by(|a, b| b.total_cmp(a));
    eps.iter().map(|&e| evaluate(net, hp, batch, e, success_db)).collect()
}

pub fn write_sweep_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in reports {
        w.serialize(SweepRow::from(r)).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-layer statistics of a network run to full depth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStats {
    pub layer: usize,
    pub nmse_db: f64,
    pub error_std: f64,
    pub success_rate: f64,
}

/// Metrics of the output of every layer (fixed-depth evaluation).
pub fn evaluate_layers(net: &UnfoldedNet, batch: &Batch, success_db: f64) -> Result<Vec<LayerStats>> {
    if batch.is_empty() {
        return Err(Error::param("cannot evaluate an empty dataset"));
    }
    let fwd = net.forward_batch(batch.matrix.view(), batch.measurements.view())?;
    let energy = batch.signals.map_axis(Axis(1), |r| r.dot(&r));
    if energy.iter().any(|e| *e == 0.0) {
        return Err(Error::param("NMSE is undefined for a zero signal"));
    }
    let n = batch.len() as f64;
    Ok((1..=net.depth)
        .map(|t| {
            let d = &batch.signals - &fwd.xs[t];
            let sq: Vec<f64> = d.map_axis(Axis(1), |r| r.dot(&r)).to_vec();
            let ratios: Vec<f64> = sq.iter().zip(&energy).map(|(s, e)| s / e).collect();
            LayerStats {
                layer: t,
                nmse_db: ratio_to_db(ratios.iter().sum::<f64>() / n),
                error_std: std_dev(&sq),
                success_rate: ratios.iter().filter(|r| ratio_to_db(**r) < success_db).count() as f64 / n,
            }
        })
        .collect())
}

/// Mean halting score per layer over a batch (all layers computed).
pub fn mean_scores_by_layer(net: &UnfoldedNet, hp: &HaltingParams, batch: &Batch) -> Result<Vec<f64>> {
    let a = batch.matrix.view();
    let fwd = net.forward_batch(a, batch.measurements.view())?;
    Ok((1..=net.depth)
        .map(|t| {
            let r = &batch.measurements - &fwd.xs[t].dot(&a.t());
            hp.scores_batch(t, r.view()).mean().unwrap_or(0.0)
        })
        .collect())
}

/// Linear interpolation of a per-layer metric at fractional depth `d`.
pub fn interpolate_layers(values: &[f64], d: f64) -> f64 {
    let last = values.len() as f64;
    let d = d.clamp(1.0, last);
    let lo = d.floor();
    let i = lo as usize - 1;
    if i + 1 >= values.len() {
        return values[values.len() - 1];
    }
    values[i] + (d - lo) * (values[i + 1] - values[i])
}

/// `κ_f`: 1 for convex ℓ1, 2 for the non-convex ℓ0 constraint.
pub fn kappa(kind: ConstraintKind) -> f64 {
    kind.kappa()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeSampleSet {
    pub anchor: Array1<f64>,
    pub kind: ConstraintKind,
    /// Unit vectors in the descent cone.
    pub directions: Vec<Array1<f64>>,
    /// For each direction, a step `α > 0` with `f(x + α d) ≤ f(x)`.
    pub steps: Vec<f64>,
}

impl ConeSampleSet {
    /// Directions as rows of a matrix.
    pub fn matrix(&self) -> Array2<f64> {
        let m = self.anchor.len();
        let mut d = Array2::zeros((self.directions.len(), m));
        for (mut row, v) in d.rows_mut().into_iter().zip(&self.directions) {
            row.assign(v);
        }
        d
    }

    /// Adds unit vectors known to lie in the cone (e.g. `(x_t − x)/‖x_t − x‖`
    /// for feasible iterates `x_t`).
    pub fn extend_with(&mut self, points: &[Array1<f64>]) {
        for z in points {
            let d = z - &self.anchor;
            let norm = l2_norm(d.view());
            if norm > 0.0 && self.kind.value(z.view()) <= self.kind.value(self.anchor.view()) + 1e-12 {
                self.directions.push(d / norm);
                self.steps.push(norm);
            }
        }
    }
}

/// Random members of the descent cone of `f` at `x`. Each direction is
/// `(z − x)/‖z − x‖` for a random `z` with `f(z) ≤ f(x)`.
///
/// ℓ1: `z` is `x` plus Gaussian noise of random scale, projected onto the ℓ1
/// ball of radius `‖x‖₁`; one sample is `z = 0`.
/// ℓ0: `z` keeps the support of `x` except for up to `s` coordinates swapped
/// for new ones, with perturbed values. This covers the union of subspaces
/// only heuristically.
pub fn sample_descent_cone(x: ArrayView1<f64>, kind: ConstraintKind, n_samples: usize, seed: u64) -> Result<ConeSampleSet> {
    if x.iter().all(|v| *v == 0.0) {
        return Err(Error::param("descent cone sampling needs a nonzero anchor"));
    }
    if n_samples < 1 {
        return Err(Error::param("need at least one cone sample"));
    }
    let m = x.len();
    let mut rng = rng_from(seed);
    let xn = l2_norm(x);
    let fx = kind.value(x);
    let support: Vec<usize> = (0..m).filter(|&i| x[i] != 0.0).collect();
    let off: Vec<usize> = (0..m).filter(|&i| x[i] == 0.0).collect();
    let mut set = ConeSampleSet {
        anchor: x.to_owned(),
        kind,
        directions: Vec::with_capacity(n_samples),
        steps: Vec::with_capacity(n_samples),
    };
    let constraint = kind.with_radius(fx)?;
    let mut attempts = 0usize;
    while set.directions.len() < n_samples {
        attempts += 1;
        if attempts > 100 * n_samples + 100 {
            return Err(Error::NumericDomain("descent cone sampling made no progress".into()));
        }
        let scale = xn * 10f64.powf(rng.random_range(-3.0..0.5));
        let z = if set.directions.is_empty() && kind == ConstraintKind::L1Ball {
            Array1::zeros(m)
        } else {
            match kind {
                ConstraintKind::L1Ball => {
                    let g: Array1<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    constraint.project((&x + &(g * scale / (m as f64).sqrt())).view())?
                }
                ConstraintKind::L0Ball => {
                    let swaps = rng.random_range(0..=support.len().min(off.len()));
                    let mut keep = support.clone();
                    keep.shuffle(&mut rng);
                    keep.truncate(support.len() - swaps);
                    let mut fresh = off.clone();
                    fresh.shuffle(&mut rng);
                    fresh.truncate(swaps);
                    let mut z = Array1::zeros(m);
                    let per = scale / (support.len() as f64).sqrt();
                    for &i in &keep {
                        z[i] = x[i] + per * rng.sample::<f64, _>(StandardNormal);
                    }
                    for &i in &fresh {
                        z[i] = per * rng.sample::<f64, _>(StandardNormal);
                    }
                    z
                }
            }
        };
        let before = set.directions.len();
        set.extend_with(std::slice::from_ref(&z));
        if set.directions.len() == before {
            continue;
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupEstimate {
    /// Monte Carlo lower bound of the supremum.
    pub value: f64,
    pub pairs: usize,
}

/// Lower bound of `ρ(B) = sup uᵀ(I − BA)v` over all pairs of sampled
/// directions (including `u = v`).
pub fn estimate_rho(b: ArrayView2<f64>, a: ArrayView2<f64>, cone: &ConeSampleSet) -> Result<SupEstimate> {
    let m = cone.anchor.len();
    if cone.directions.is_empty() {
        return Err(Error::param("rho estimate needs cone samples"));
    }
    if b.dim() != (m, a.nrows()) || a.ncols() != m {
        return Err(Error::dim("B must be m x n and A n x m"));
    }
    let d = cone.matrix();
    // Rows of d·(I − BA)ᵀ are (I − BA)v for each v.
    let dm = &d - &d.dot(&a.t()).dot(&b.t());
    let g = d.dot(&dm.t());
    let value = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SupEstimate {
        value,
        pairs: d.nrows() * d.nrows(),
    })
}

/// Lower bound of `ξ(B) = sup uᵀBω/‖ω‖` over the sampled directions.
pub fn estimate_xi(b: ArrayView2<f64>, noise_direction: ArrayView1<f64>, cone: &ConeSampleSet) -> Result<SupEstimate> {
    let wn = l2_norm(noise_direction);
    if wn == 0.0 {
        return Err(Error::param("noise direction must be nonzero"));
    }
    if cone.directions.is_empty() {
        return Err(Error::param("xi estimate needs cone samples"));
    }
    if b.ncols() != noise_direction.len() || b.nrows() != cone.anchor.len() {
        return Err(Error::dim("B must be m x n with n the noise length"));
    }
    let bw = b.dot(&noise_direction) / wn;
    let value = cone.matrix().dot(&bw).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SupEstimate {
        value,
        pairs: cone.directions.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundStatus {
    Satisfied,
    /// Observed error above the bound evaluated with sampled (lower-bound)
    /// ρ̂, ξ̂; not evidence against the theorem.
    InconclusiveSampling,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub iter: usize,
    pub observed: f64,
    pub bound: f64,
    pub status: BoundStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    /// False when `κ ρ̂ ≥ 1`; `rows` is then empty.
    pub applicable: bool,
    pub contraction: f64,
    pub rows: Vec<BoundRow>,
    pub inconclusive: usize,
}

/// `‖x_t − x‖ ≤ (κρ)^t ‖x‖ + κ(1 − (κρ)^t)/(1 − κρ) · ξ ‖ω‖` per iteration.
pub fn verify_learned_pgd_bound(errors: &[f64], rho_hat: f64, xi_hat: f64, kappa_f: f64, noise_norm: f64, x_norm: f64) -> BoundReport {
    let c = kappa_f * rho_hat;
    if c >= 1.0 {
        return BoundReport {
            applicable: false,
            contraction: c,
            rows: Vec::new(),
            inconclusive: 0,
        };
    }
    let rows: Vec<BoundRow> = errors
        .iter()
        .enumerate()
        .map(|(t, &observed)| {
            let ct = c.powi(t as i32);
            let bound = ct * x_norm + kappa_f * (1.0 - ct) / (1.0 - c) * xi_hat * noise_norm;
            // Relative slack for rounding in the error computation.
            let ok = observed <= bound * (1.0 + 1e-12) + 1e-300;
            BoundRow {
                iter: t,
                observed,
                bound,
                status: if ok { BoundStatus::Satisfied } else { BoundStatus::InconclusiveSampling },
            }
        })
        .collect();
    let inconclusive = rows.iter().filter(|r| r.status == BoundStatus::InconclusiveSampling).count();
    BoundReport {
        applicable: true,
        contraction: c,
        rows,
        inconclusive,
    }
}

/// Full learned-PGD harness for one anchor: sample the cone, estimate ρ̂ and
/// ξ̂, run PGD with perfect radius and step `B`, and check the bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnedPgdCheck {
    pub rho: SupEstimate,
    pub xi: Option<SupEstimate>,
    pub report: BoundReport,
}

#[allow(clippy::too_many_arguments)]
pub fn learned_pgd_check(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    x: ArrayView1<f64>,
    noise: ArrayView1<f64>,
    kind: ConstraintKind,
    cone_directions: usize,
    iters: usize,
    seed: u64,
) -> Result<LearnedPgdCheck> {
    let y = a.dot(&x) + noise;
    let constraint = kind.with_radius(kind.value(x))?;
    let trace = pgd_iterate(a, y.view(), constraint, GradientStep::Learned(b), iters, None, Some(x))?;
    let mut cone = sample_descent_cone(x, kind, cone_directions, seed)?;
    // Feasible iterates give exact cone members.
    cone.extend_with(&trace.iterates);
    let rho = estimate_rho(b, a, &cone)?;
    let noise_norm = l2_norm(noise);
    let xi = if noise_norm > 0.0 { Some(estimate_xi(b, noise, &cone)?) } else { None };
    let errors = trace.errors_vs_truth.expect("truth supplied");
    let report = verify_learned_pgd_bound(&errors, rho.value, xi.map_or(0.0, |e| e.value), kind.kappa(), noise_norm, l2_norm(x));
    Ok(LearnedPgdCheck { rho, xi, report })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem3Report {
    pub radii: Vec<f64>,
    pub schedule: Vec<usize>,
    pub oracle_total_error: f64,
    pub fixed_radius: f64,
    pub fixed_total_error: f64,
    pub oracle_errors: Vec<f64>,
    pub fixed_errors: Vec<f64>,
}

/// Oracle adaptive PGD against PGD with one radius `R = median f(x_i)` on the
/// same noiseless signals. Each fixed-R run gets the same iteration count as
/// the oracle spends on that signal. `A` is i.i.d. N(0, 1) and the step is
/// the theoretical one.
pub fn theorem3_experiment(n: usize, m: usize, sparsities: &[usize], schedule: &[usize], kind: ConstraintKind, seed: u64) -> Result<Theorem3Report> {
    let k = sparsities.len();
    if k == 0 || schedule.len() != k {
        return Err(Error::param("need one schedule entry per signal"));
    }
    let a = std::sync::Arc::new(MeasurementMatrix {
        entries: gaussian_iid(n, m, derive_seed(seed, 0))?,
        kind: MatrixKind::Gaussian,
        seed: derive_seed(seed, 0),
    });
    let beta = theoretical_step_size(n)?;
    let mut instances = Vec::with_capacity(k);
    for (i, &s) in sparsities.iter().enumerate() {
        let sig = gen_sparse_signal(m, s, s, derive_seed(seed, 1 + i as u64))?;
        instances.push(gen_measurement(&a, sig, None, derive_seed(seed, 100 + i as u64))?);
    }
    let radii: Vec<f64> = instances.iter().map(|p| kind.value(p.signal.values.view())).collect();
    let mut sorted = radii.clone();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::param("oracle PGD needs distinct f(x_i)"));
    }
    let oracle = oracle_adaptive_pgd(&instances, kind, schedule, beta)?;
    let fixed_radius = if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    };
    let fixed = kind.with_radius(match kind {
        ConstraintKind::L0Ball => fixed_radius.round(),
        ConstraintKind::L1Ball => fixed_radius,
    })?;
    let mut fixed_errors = Vec::with_capacity(k);
    for (inst, trace) in instances.iter().zip(&oracle.traces) {
        let t = pgd_iterate(
            a.view(),
            inst.measurement.view(),
            fixed,
            GradientStep::Scaled(beta),
            trace.iterations(),
            None,
            Some(inst.signal.values.view()),
        )?;
        fixed_errors.push(t.final_error().expect("truth supplied"));
    }
    let oracle_errors: Vec<f64> = oracle.traces.iter().map(|t| t.final_error().expect("truth supplied")).collect();
    Ok(Theorem3Report {
        radii,
        schedule: schedule.to_vec(),
        oracle_total_error: oracle.total_error,
        fixed_radius,
        fixed_total_error: fixed_errors.iter().sum(),
        oracle_errors,
        fixed_errors,
    })
}

/// Upper bound on `ξ̂`: `σ_max(B)`.
pub fn xi_upper_bound(b: ArrayView2<f64>) -> f64 {
    spectral_norm(b)
}
