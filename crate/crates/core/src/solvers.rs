//! Classical iterative baselines: ISTA, projected gradient descent with
//! ℓ1/ℓ0-ball projections (IHT for ℓ0), learned-gradient PGD and the oracle
//! adaptive-depth PGD.

use std::path::Path;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{l1_norm, l2_norm, nnz};
use crate::problems::ProblemInstance;

pub const DEFAULT_TOL: f64 = 1e-10;

/// Elementwise `sgn(z)·max(|z| − λ, 0)`.
pub fn soft_threshold(z: ArrayView1<f64>, lambda: f64) -> Result<Array1<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::param(format!("threshold must be >= 0, got {lambda}")));
    }
    Ok(z.mapv(|v| shrink(v, lambda)))
}

#[inline]
pub(crate) fn shrink(v: f64, lambda: f64) -> f64 {
    if v > lambda {
        v - lambda
    } else if v < -lambda {
        v + lambda
    } else {
        0.0
    }
}

/// Indices ordered by decreasing magnitude, ties by increasing index.
pub(crate) fn magnitude_order(z: ArrayView1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[b].abs().total_cmp(&z[a].abs()).then(a.cmp(&b)));
    idx
}

/// Keeps the `s` largest-magnitude entries. Ties go to the lowest index.
pub fn project_l0(z: ArrayView1<f64>, s: usize) -> Result<Array1<f64>> {
    if s < 1 || s > z.len() {
        return Err(Error::param(format!("l0 radius must lie in [1, {}], got {s}", z.len())));
    }
    let mut out = Array1::zeros(z.len());
    for &i in magnitude_order(z).iter().take(s) {
        out[i] = z[i];
    }
    Ok(out)
}

/// Euclidean projection onto `{v : ‖v‖₁ ≤ R}` by sorting magnitudes and
/// locating the shrinkage level.
pub fn project_l1(z: ArrayView1<f64>, radius: f64) -> Result<Array1<f64>> {
    if !(radius > 0.0) {
        return Err(Error::param(format!("l1 radius must be > 0, got {radius}")));
    }
    if l1_norm(z) <= radius {
        return Ok(z.to_owned());
    }
    let mut mags: Vec<f64> = z.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in mags.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - radius) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    Ok(z.mapv(|v| shrink(v, theta)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    L1Ball,
    L0Ball,
}

impl ConstraintKind {
    /// 1 for the convex ℓ1 ball, 2 for the non-convex ℓ0 ball.
    pub fn kappa(self) -> f64 {
        match self {
            ConstraintKind::L1Ball => 1.0,
            ConstraintKind::L0Ball => 2.0,
        }
    }

    /// The sparsity-enforcing function `f`.
    pub fn value(self, x: ArrayView1<f64>) -> f64 {
        match self {
            ConstraintKind::L1Ball => l1_norm(x),
            ConstraintKind::L0Ball => nnz(x) as f64,
        }
    }

    /// The constraint `f(x) ≤ radius`.
    pub fn with_radius(self, radius: f64) -> Result<Constraint> {
        match self {
            ConstraintKind::L1Ball => Constraint::l1(radius),
            ConstraintKind::L0Ball => {
                if radius < 1.0 || radius.fract() != 0.0 {
                    return Err(Error::param(format!("l0 radius must be a positive integer, got {radius}")));
                }
                Constraint::l0(radius as usize)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Constraint {
    L1Ball { radius: f64 },
    L0Ball { sparsity: usize },
}

impl Constraint {
    pub fn l1(radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::param(format!("l1 radius must be > 0, got {radius}")));
        }
        Ok(Constraint::L1Ball { radius })
    }

    pub fn l0(sparsity: usize) -> Result<Self> {
        if sparsity < 1 {
            return Err(Error::param("l0 radius must be >= 1"));
        }
        Ok(Constraint::L0Ball { sparsity })
    }

    pub fn kind(&self) -> ConstraintKind {
        match self {
            Constraint::L1Ball { .. } => ConstraintKind::L1Ball,
            Constraint::L0Ball { .. } => ConstraintKind::L0Ball,
        }
    }

    pub fn project(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        match *self {
            Constraint::L1Ball { radius } => project_l1(z, radius),
            Constraint::L0Ball { sparsity } => project_l0(z, sparsity.min(z.len())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverTrace {
    /// `iterates[0]` is the starting point.
    pub iterates: Vec<Array1<f64>>,
    pub objective_values: Vec<f64>,
    pub errors_vs_truth: Option<Vec<f64>>,
}

impl SolverTrace {
    fn start(x0: Array1<f64>, objective: f64, truth: Option<ArrayView1<f64>>) -> Self {
        let err = truth.map(|t| vec![l2_norm((&x0 - &t).view())]);
        SolverTrace {
            iterates: vec![x0],
            objective_values: vec![objective],
            errors_vs_truth: err,
        }
    }

    fn push(&mut self, x: Array1<f64>, objective: f64, truth: Option<ArrayView1<f64>>) {
        if let (Some(errs), Some(t)) = (self.errors_vs_truth.as_mut(), truth) {
            errs.push(l2_norm((&x - &t).view()));
        }
        self.iterates.push(x);
        self.objective_values.push(objective);
    }

    pub fn last(&self) -> &Array1<f64> {
        self.iterates.last().expect("trace always holds the start point")
    }

    pub fn final_error(&self) -> Option<f64> {
        self.errors_vs_truth.as_ref().and_then(|e| e.last().copied())
    }

    /// Number of iterations performed (excludes the start point).
    pub fn iterations(&self) -> usize {
        self.iterates.len() - 1
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["iter", "objective", "error_vs_truth"]).map_err(|e| csv_err(path, e))?;
        for (t, obj) in self.objective_values.iter().enumerate() {
            let err = self
                .errors_vs_truth
                .as_ref()
                .map(|e| format!("{:e}", e[t]))
                .unwrap_or_default();
            w.write_record([t.to_string(), format!("{obj:e}"), err]).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            msg: format!("{other:?}"),
        },
    }
}


fn check_shapes(a: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<()> {
    if a.nrows() != y.len() {
        return Err(Error::dim(format!(
            "matrix has {} rows but the measurement has length {}",
            a.nrows(),
            y.len()
        )));
    }
    Ok(())
}

/// `½‖y − Ax‖² + λ‖x‖₁`
pub fn lasso_objective(a: ArrayView2<f64>, y: ArrayView1<f64>, x: ArrayView1<f64>, lambda: f64) -> f64 {
    let r = &y - &a.dot(&x);
    0.5 * r.dot(&r) + lambda * l1_norm(x)
}

/// `‖y − Ax‖²`
pub fn residual_energy(a: ArrayView2<f64>, y: ArrayView1<f64>, x: ArrayView1<f64>) -> f64 {
    let r = &y - &a.dot(&x);
    r.dot(&r)
}

/// ISTA on `½‖y − Ax‖² + λ‖x‖₁`:
/// `x ← S_{βλ}(x + βAᵀ(y − Ax))`, starting from zero. Stops once an update
/// moves the iterate by less than `tol`.
pub fn ista_solve(instance: &ProblemInstance, lambda: f64, beta: f64, max_iters: usize, tol: f64) -> Result<SolverTrace> {
    let a = instance.matrix.view();
    let y = instance.measurement.view();
    check_shapes(a, y)?;
    if !(lambda >= 0.0) || !(beta > 0.0) {
        return Err(Error::param(format!("need lambda >= 0 and beta > 0, got {lambda}, {beta}")));
    }
    let truth = Some(instance.signal.values.view());
    let x0 = Array1::zeros(a.ncols());
    let mut trace = SolverTrace::start(x0.clone(), lasso_objective(a, y, x0.view(), lambda), truth);
    let mut x = x0;
    for _ in 0..max_iters {
        let r = &y - &a.dot(&x);
        let z = &x + &(a.t().dot(&r) * beta);
        let next = z.mapv(|v| shrink(v, beta * lambda));
        let step = l2_norm((&next - &x).view());
        let obj = lasso_objective(a, y, next.view(), lambda);
        trace.push(next.clone(), obj, truth);
        x = next;
        if step < tol {
            break;
        }
    }
    Ok(trace)
}

/// `β = ½ (Γ(n/2) / Γ((n+1)/2))²`, the PGD step for i.i.d. N(0,1) measurements.
pub fn theoretical_step_size(n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::param("step size needs n >= 1"));
    }
    let n = n as f64;
    let log_ratio = libm::lgamma(n / 2.0) - libm::lgamma((n + 1.0) / 2.0);
    Ok(0.5 * (2.0 * log_ratio).exp())
}

/// Gradient step used inside PGD.
#[derive(Debug, Clone, Copy)]
pub enum GradientStep<'a> {
    /// `x + βAᵀ(y − Ax)`
    Scaled(f64),
    /// `x + B(y − Ax)`: the learned-gradient step.
    Learned(ArrayView2<'a, f64>),
}

impl GradientStep<'_> {
    fn apply(&self, a: ArrayView2<f64>, y: ArrayView1<f64>, x: &Array1<f64>) -> Array1<f64> {
        let r = &y - &a.dot(x);
        match self {
            GradientStep::Scaled(beta) => x + &(a.t().dot(&r) * *beta),
            GradientStep::Learned(b) => x + &b.dot(&r),
        }
    }
}

/// Generic projected gradient iteration; `truth` fills `errors_vs_truth`.
pub fn pgd_iterate(
    a: ArrayView2<f64>,
    y: ArrayView1<f64>,
    constraint: Constraint,
    step: GradientStep<'_>,
    max_iters: usize,
    x0: Option<Array1<f64>>,
    truth: Option<ArrayView1<f64>>,
) -> Result<SolverTrace> {
    check_shapes(a, y)?;
    if let GradientStep::Learned(b) = step {
        if b.dim() != (a.ncols(), a.nrows()) {
            return Err(Error::dim(format!("learned step must be {}x{}, got {:?}", a.ncols(), a.nrows(), b.dim())));
        }
    }
    let x0 = x0.unwrap_or_else(|| Array1::zeros(a.ncols()));
    if x0.len() != a.ncols() {
        return Err(Error::dim("start point length does not match the matrix"));
    }
    let mut trace = SolverTrace::start(x0.clone(), residual_energy(a, y, x0.view()), truth);
    let mut x = x0;
    for _ in 0..max_iters {
        let z = step.apply(a, y, &x);
        x = constraint.project(z.view())?;
        trace.push(x.clone(), residual_energy(a, y, x.view()), truth);
    }
    Ok(trace)
}

/// `x ← P_K(x + βAᵀ(y − Ax))` from `x₀ = 0`.
pub fn pgd_solve(instance: &ProblemInstance, constraint: Constraint, beta: f64, max_iters: usize) -> Result<SolverTrace> {
    if !(beta > 0.0) {
        return Err(Error::param(format!("beta must be > 0, got {beta}")));
    }
    pgd_iterate(
        instance.matrix.view(),
        instance.measurement.view(),
        constraint,
        GradientStep::Scaled(beta),
        max_iters,
        None,
        Some(instance.signal.values.view()),
    )
}

#[derive(Debug, Clone)]
pub struct OracleRun {
    /// One trace per input signal, in input order.
    pub traces: Vec<SolverTrace>,
    /// `f(x_i)` per input signal.
    pub radii: Vec<f64>,
    /// Sum over signals of the final `‖x̂_i − x_i‖₂`.
    pub total_error: f64,
}

/// Oracle PGD with adaptive depth. Signals are ordered by `f(x_i)`; phase `j`
/// runs `schedule[j]` iterations with `R = f(x_(j))`, and the `i`-th signal in
/// that order is ejected at the end of phase `i`. `schedule` follows the
/// sorted order.
pub fn oracle_adaptive_pgd(
    instances: &[ProblemInstance],
    kind: ConstraintKind,
    schedule: &[usize],
    beta: f64,
) -> Result<OracleRun> {
    if instances.is_empty() {
        return Err(Error::param("oracle PGD needs at least one signal"));
    }
    if schedule.len() != instances.len() || schedule.iter().any(|&t| t < 1) {
        return Err(Error::param("schedule must hold one budget >= 1 per signal"));
    }
    let radii: Vec<f64> = instances.iter().map(|p| kind.value(p.signal.values.view())).collect();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&i, &j| radii[i].total_cmp(&radii[j]).then(i.cmp(&j)));
    let phases: Vec<Constraint> = order
        .iter()
        .map(|&i| kind.with_radius(radii[i]))
        .collect::<Result<_>>()?;

    let mut traces: Vec<Option<SolverTrace>> = vec![None; instances.len()];
    for (rank, &idx) in order.iter().enumerate() {
        let inst = &instances[idx];
        let a = inst.matrix.view();
        let y = inst.measurement.view();
        let truth = Some(inst.signal.values.view());
        let mut full: Option<SolverTrace> = None;
        for (phase, constraint) in phases.iter().enumerate().take(rank + 1) {
            let start = full.as_ref().map(|t| t.last().clone());
            let part = pgd_iterate(a, y, *constraint, GradientStep::Scaled(beta), schedule[phase], start, truth)?;
            full = Some(match full {
                None => part,
                Some(mut acc) => {
                    let errs = part.errors_vs_truth.unwrap_or_default();
                    for (k, (x, obj)) in part.iterates.into_iter().zip(part.objective_values).enumerate().skip(1) {
                        acc.iterates.push(x);
                        acc.objective_values.push(obj);
                        if let Some(e) = acc.errors_vs_truth.as_mut() {
                            e.push(errs[k]);
                        }
                    }
                    acc
                }
            });
        }
        traces[idx] = full;
    }
    let traces: Vec<SolverTrace> = traces.into_iter().map(|t| t.expect("every signal ran")).collect();
    let total_error = traces.iter().filter_map(SolverTrace::final_error).sum();
    Ok(OracleRun {
        traces,
        radii,
        total_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{gen_matrix, gen_measurement, gen_sparse_signal, MatrixKind, MeasurementMatrix, SparseSignal};
    use ndarray::{arr1, Array2};
    use std::sync::Arc;

    #[test]
    fn soft_threshold_cases() {
        let z = arr1(&[1.2, -0.3, 0.0]);
        let out = soft_threshold(z.view(), 0.5).unwrap();
        assert!((out[0] - 0.7).abs() < 1e-15);
        assert_eq!(out[1], 0.0);
        assert_eq!(out[2], 0.0);
        assert_eq!(soft_threshold(z.view(), 0.0).unwrap(), z);
        assert!(soft_threshold(z.view(), 1.2).unwrap().iter().all(|v| *v == 0.0));
        assert!(soft_threshold(z.view(), -1.0).is_err());
    }

    #[test]
    fn hard_threshold_cases() {
        assert_eq!(project_l0(arr1(&[3.0, -1.0, 2.0]).view(), 2).unwrap(), arr1(&[3.0, 0.0, 2.0]));
        assert_eq!(project_l0(arr1(&[1.0, 1.0, 1.0]).view(), 1).unwrap(), arr1(&[1.0, 0.0, 0.0]));
        let z = arr1(&[0.5, -2.0, 1.0]);
        assert_eq!(project_l0(z.view(), 3).unwrap(), z);
        assert!(project_l0(z.view(), 0).is_err());
        assert!(project_l0(z.view(), 4).is_err());
    }

    #[test]
    fn l1_projection_cases() {
        assert_eq!(project_l1(arr1(&[2.0, 0.0]).view(), 1.0).unwrap(), arr1(&[1.0, 0.0]));
        let p = project_l1(arr1(&[1.0, 1.0]).view(), 1.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        let inside = arr1(&[0.2, -0.1]);
        assert_eq!(project_l1(inside.view(), 1.0).unwrap(), inside);
        assert!(project_l1(inside.view(), 0.0).is_err());
    }

    #[test]
    fn step_size_closed_forms() {
        let pi = std::f64::consts::PI;
        assert!((theoretical_step_size(1).unwrap() - pi / 2.0).abs() < 1e-12);
        assert!((theoretical_step_size(2).unwrap() - 2.0 / pi).abs() < 1e-12);
        let b100 = theoretical_step_size(100).unwrap();
        assert!((b100 * 100.0 - 1.0).abs() < 0.02, "beta(100) = {b100}");
        assert!(theoretical_step_size(0).is_err());
    }

    fn identity_instance(y: Array1<f64>) -> ProblemInstance {
        let n = y.len();
        let matrix = Arc::new(MeasurementMatrix {
            entries: Array2::eye(n),
            kind: MatrixKind::Gaussian,
            seed: 0,
        });
        ProblemInstance {
            matrix,
            signal: SparseSignal {
                values: y.clone(),
                sparsity: n,
            },
            measurement: y,
            snr_db: None,
        }
    }

    #[test]
    fn ista_identity_system_converges_in_one_step() {
        let y = arr1(&[0.3, -1.0, 2.0]);
        let trace = ista_solve(&identity_instance(y.clone()), 0.0, 1.0, 50, DEFAULT_TOL).unwrap();
        assert_eq!(trace.iterates[1], y);
        assert!(trace.iterations() <= 2);
        assert_eq!(trace.final_error(), Some(0.0));
    }

    #[test]
    fn pgd_with_huge_radius_is_gradient_descent() {
        let a = Arc::new(gen_matrix(MatrixKind::Gaussian, 10, 20, 1).unwrap());
        let sig = gen_sparse_signal(20, 3, 3, 2).unwrap();
        let inst = gen_measurement(&a, sig, None, 3).unwrap();
        let beta = 0.1;
        let trace = pgd_solve(&inst, Constraint::l1(1e12).unwrap(), beta, 5).unwrap();
        let mut x = Array1::zeros(20);
        for t in 1..=5 {
            let r = &inst.measurement - &a.entries.dot(&x);
            x = &x + &(a.entries.t().dot(&r) * beta);
            assert_eq!(trace.iterates[t], x);
        }
    }

    #[test]
    fn oracle_single_signal_matches_pgd() {
        let a = Arc::new(gen_matrix(MatrixKind::Gaussian, 30, 60, 4).unwrap());
        let sig = gen_sparse_signal(60, 3, 3, 5).unwrap();
        let inst = gen_measurement(&a, sig, None, 6).unwrap();
        let r = l1_norm(inst.signal.values.view());
        let plain = pgd_solve(&inst, Constraint::l1(r).unwrap(), 0.2, 40).unwrap();
        let oracle = oracle_adaptive_pgd(std::slice::from_ref(&inst), ConstraintKind::L1Ball, &[40], 0.2).unwrap();
        assert_eq!(oracle.traces[0], plain);
        assert_eq!(Some(oracle.total_error), plain.final_error());
        assert!(oracle_adaptive_pgd(&[], ConstraintKind::L1Ball, &[], 0.2).is_err());
    }

    #[test]
    fn trace_csv_has_header() {
        let y = arr1(&[1.0, 2.0]);
        let trace = ista_solve(&identity_instance(y), 0.1, 1.0, 3, 0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        trace.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("iter,objective,error_vs_truth\n"));
        assert_eq!(text.lines().count(), trace.iterates.len() + 1);
    }
}
