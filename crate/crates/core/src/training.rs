//! Cost function, exact backpropagation, Adam and the two-stage trainer.
//!
//! For one sample the adaptive-depth cost is
//! `Σ_t ‖x − x_t‖²/h_t + τ h_t`; mini-batch losses are per-sample means.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::halting::{HaltingDesign, HaltingParams};
use crate::linalg::sigmoid;
use crate::nets::{Gate, LayerTrace, NetKind, UnfoldedNet};
use crate::problems::{Batch, BatchStream, ProblemInstance};
use crate::solvers::csv_err;

/// Lower clamp applied to thresholds after every optimizer step.
pub const LAMBDA_MIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// `Σ_t ‖x − x_t‖²/h_t + τ h_t`.
    Halting { tau: f64 },
    /// `Σ_t ‖x − x_t‖²`, no halting branch.
    LayerSse,
}

/// Which gradient groups to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Want {
    pub net: bool,
    pub halting: bool,
}

impl Want {
    pub const ALL: Want = Want { net: true, halting: true };
    pub const NET: Want = Want { net: true, halting: false };
    pub const HALTING: Want = Want { net: false, halting: true };
    pub const NONE: Want = Want { net: false, halting: false };
}

/// Gradients shaped like the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub net: Option<UnfoldedNet>,
    pub halting: Option<HaltingParams>,
}

/// Single-sample cost from a trace and its scores.
pub fn cost(trace: &LayerTrace, scores: &[f64], x_true: ArrayView1<f64>, tau: f64) -> Result<f64> {
    if scores.len() != trace.layer_outputs.len() {
        return Err(Error::dim(format!(
            "{} scores for {} layers",
            scores.len(),
            trace.layer_outputs.len()
        )));
    }
    let mut total = 0.0;
    for (x_t, &h) in trace.layer_outputs.iter().zip(scores) {
        if !(h > 0.0) {
            return Err(Error::NumericDomain(format!("halting score {h} is not positive")));
        }
        let d = &x_true - x_t;
        total += d.dot(&d) / h + tau * h;
    }
    Ok(total)
}

/// `∂L/∂h_t = τ − ‖x − x_t‖²/h_t²`.
pub fn cost_derivative_h(err_sq: f64, h: f64, tau: f64) -> f64 {
    tau - err_sq / (h * h)
}

fn row_sq_norms(m: &Array2<f64>) -> Array1<f64> {
    m.map_axis(Axis(1), |r| r.dot(&r))
}

fn scale_rows(m: &mut Array2<f64>, s: &Array1<f64>) {
    Zip::from(m.rows_mut()).and(s).for_each(|mut r, &v| r *= v);
}

/// Mean loss over a batch (rows of `x`, `y`) and, optionally, its gradients.
pub fn batch_loss_and_grads(
    net: &UnfoldedNet,
    hp: Option<&HaltingParams>,
    a: ArrayView2<f64>,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    objective: Objective,
    want: Want,
) -> Result<(f64, Gradients)> {
    let nb = x.nrows();
    if nb == 0 || y.nrows() != nb {
        return Err(Error::dim("signal and measurement batches must be non-empty and equally long"));
    }
    if x.ncols() != net.m {
        return Err(Error::dim(format!("signal length {} does not match m = {}", x.ncols(), net.m)));
    }
    if a.dim() != (net.n, net.m) {
        return Err(Error::dim(format!("A has shape {:?}, network expects {}x{}", a.dim(), net.n, net.m)));
    }
    let hp = match objective {
        Objective::Halting { tau } => {
            if !(tau >= 0.0) {
                return Err(Error::param(format!("tau must be >= 0, got {tau}")));
            }
            let hp = hp.ok_or_else(|| Error::param("halting objective needs halting parameters"))?;
            if hp.depth != net.depth || hp.n != net.n {
                return Err(Error::dim("halting parameters do not match the network"));
            }
            Some(hp)
        }
        Objective::LayerSse => None,
    };
    let scale = 1.0 / nb as f64;
    let depth = net.depth;
    let fwd = net.forward_batch(a, y)?;
    let mut g_net = want.net.then(|| net.zeros_like());
    let mut g_hp = match hp {
        Some(hp) if want.halting => Some(hp.zeros_like()),
        _ => None,
    };
    let mut direct: Vec<Array2<f64>> = Vec::with_capacity(depth);
    let mut loss = 0.0;

    for t in 1..=depth {
        let xt = &fwd.xs[t];
        let diff = &x - xt;
        let e = row_sq_norms(&diff);
        let (hp, tau) = match (objective, hp) {
            (Objective::Halting { tau }, Some(hp)) => (hp, tau),
            _ => {
                loss += e.sum();
                if want.net {
                    direct.push(diff * (-2.0 * scale));
                }
                continue;
            }
        };
        if t == depth {
            let h = hp.h_last;
            loss += e.sum() / h + tau * h * nb as f64;
            if want.net {
                direct.push(diff * (-2.0 * scale / h));
            }
            continue;
        }
        let r = &y - &xt.dot(&a.t());
        let ti = t - 1;
        // Pre-activations plus whatever the backward pass of each design needs.
        let (pre, qr, hidden) = match hp.design {
            HaltingDesign::LearnedQ => {
                let qr = r.dot(&hp.q.as_ref().expect("learned_q has Q").t());
                let pre = row_sq_norms(&qr) * hp.phi[ti] + hp.psi[ti];
                (pre, Some(qr), None)
            }
            HaltingDesign::NoQ => (row_sq_norms(&r) * hp.phi[ti] + hp.psi[ti], None, None),
            HaltingDesign::Mlp2 => {
                let l = &hp.mlp[ti];
                let u = r.dot(&l.w1.t()) + &l.b1;
                let v = u.mapv(|v| v.max(0.0));
                let pre = v.dot(&l.w2) + l.b2;
                (pre, None, Some((u, v)))
            }
        };
        let h = pre.mapv(sigmoid);
        loss += Zip::from(&e).and(&h).fold(0.0, |acc, &e, &h| acc + e / h + tau * h);
        if !want.net && g_hp.is_none() {
            continue;
        }
        // dL/d(pre), already divided by the batch size.
        let da = Zip::from(&e).and(&h).map_collect(|&e, &h| scale * cost_derivative_h(e, h, tau) * h * (1.0 - h));
        let mut d_r: Option<Array2<f64>> = None;
        match hp.design {
            HaltingDesign::LearnedQ | HaltingDesign::NoQ => {
                let base = qr.as_ref().unwrap_or(&r);
                let mut weighted = base.clone();
                scale_rows(&mut weighted, &da);
                if let Some(g) = g_hp.as_mut() {
                    let s = row_sq_norms(base);
                    g.phi[ti] += da.dot(&s);
                    g.psi[ti] += da.sum();
                    if let Some(gq) = g.q.as_mut() {
                        *gq += &(weighted.t().dot(&r) * (2.0 * hp.phi[ti]));
                    }
                }
                if want.net {
                    let mut dr = match hp.design {
                        HaltingDesign::LearnedQ => weighted.dot(hp.q.as_ref().expect("learned_q has Q")),
                        _ => weighted,
                    };
                    dr *= 2.0 * hp.phi[ti];
                    d_r = Some(dr);
                }
            }
            HaltingDesign::Mlp2 => {
                let (u, v) = hidden.expect("mlp2 caches its hidden layer");
                let l = &hp.mlp[ti];
                let mut gu = Array2::zeros(u.raw_dim());
                Zip::from(gu.rows_mut()).and(u.rows()).and(&da).for_each(|mut gr, ur, &d| {
                    Zip::from(&mut gr).and(&ur).and(&l.w2).for_each(|g, &u, &w| {
                        *g = if u > 0.0 { d * w } else { 0.0 };
                    });
                });
                if let Some(g) = g_hp.as_mut() {
                    let gl = &mut g.mlp[ti];
                    gl.w1 += &gu.t().dot(&r);
                    gl.b1 += &gu.sum_axis(Axis(0));
                    gl.w2 += &v.t().dot(&da);
                    gl.b2 += da.sum();
                }
                if want.net {
                    d_r = Some(gu.dot(&l.w1));
                }
            }
        }
        if want.net {
            let inv_h = h.mapv(|h| -2.0 * scale / h);
            let mut d = diff;
            scale_rows(&mut d, &inv_h);
            if let Some(dr) = d_r {
                d -= &dr.dot(&a);
            }
            direct.push(d);
        }
    }
    loss *= scale;
    if !loss.is_finite() {
        return Err(Error::NumericDomain(format!("non-finite loss {loss}")));
    }

    if let Some(g) = g_net.as_mut() {
        let mut carry: Option<Array2<f64>> = None;
        for t in (1..=depth).rev() {
            let mut gx = direct.pop().expect("one direct term per layer");
            if let Some(c) = carry.take() {
                gx += &c;
            }
            let z = &fwd.zs[t - 1];
            let gates = &fwd.gates[t - 1];
            let mut dlambda = 0.0;
            Zip::from(&mut gx).and(z).and(gates).for_each(|gv, &zv, &gate| match gate {
                Gate::Dead => *gv = 0.0,
                Gate::Shrunk => dlambda -= *gv * zv.signum(),
                Gate::Pass => {}
            });
            g.thresholds[t - 1] += dlambda;
            let k = net.idx(t);
            match net.kind {
                NetKind::Lista => {
                    if t > 1 {
                        g.weights_w[k] += &gx.t().dot(&fwd.xs[t - 1]);
                        carry = Some(gx.dot(net.w(t)));
                    }
                    g.weights_b[k] += &gx.t().dot(&y);
                }
                NetKind::ListaCpss => {
                    let r_prev = &y - &fwd.xs[t - 1].dot(&a.t());
                    g.weights_b[k] += &gx.t().dot(&r_prev);
                    if t > 1 {
                        let back = gx.dot(net.b(t)).dot(&a);
                        carry = Some(gx - back);
                    }
                }
            }
        }
    }
    Ok((
        loss,
        Gradients {
            net: g_net,
            halting: g_hp,
        },
    ))
}

fn single(inst: &ProblemInstance) -> (Array2<f64>, Array2<f64>) {
    (
        inst.signal.values.view().insert_axis(Axis(0)).to_owned(),
        inst.measurement.view().insert_axis(Axis(0)).to_owned(),
    )
}

/// Halting-parameter gradients of the cost for one instance.
pub fn halting_gradients(net: &UnfoldedNet, hp: &HaltingParams, inst: &ProblemInstance, tau: f64) -> Result<HaltingParams> {
    let (x, y) = single(inst);
    let (_, g) = batch_loss_and_grads(net, Some(hp), inst.matrix.view(), x.view(), y.view(), Objective::Halting { tau }, Want::HALTING)?;
    Ok(g.halting.expect("requested"))
}

/// Network-parameter gradients of the cost for one instance, including the
/// paths through every halting score.
pub fn network_gradients(net: &UnfoldedNet, hp: &HaltingParams, inst: &ProblemInstance, tau: f64) -> Result<UnfoldedNet> {
    let (x, y) = single(inst);
    let (_, g) = batch_loss_and_grads(net, Some(hp), inst.matrix.view(), x.view(), y.view(), Objective::Halting { tau }, Want::NET)?;
    Ok(g.net.expect("requested"))
}

/// Named flat views of the trainable network blocks, in checkpoint order.
pub fn net_blocks(net: &UnfoldedNet) -> Vec<(String, &[f64])> {
    let mut out = Vec::new();
    for (i, w) in net.weights_w.iter().enumerate() {
        out.push((format!("W[{i}]"), w.as_slice().expect("standard layout")));
    }
    for (i, b) in net.weights_b.iter().enumerate() {
        out.push((format!("B[{i}]"), b.as_slice().expect("standard layout")));
    }
    out.push(("lambda".into(), net.thresholds.as_slice().expect("standard layout")));
    out
}

pub fn net_blocks_mut(net: &mut UnfoldedNet) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    for w in net.weights_w.iter_mut() {
        out.push(w.as_slice_mut().expect("standard layout"));
    }
    for b in net.weights_b.iter_mut() {
        out.push(b.as_slice_mut().expect("standard layout"));
    }
    out.push(net.thresholds.as_slice_mut().expect("standard layout"));
    out
}

/// Named flat views of the trainable halting blocks, in checkpoint order.
pub fn halting_blocks(hp: &HaltingParams) -> Vec<(String, &[f64])> {
    let mut out = Vec::new();
    if let Some(q) = &hp.q {
        out.push(("Q".into(), q.as_slice().expect("standard layout")));
    }
    if !hp.phi.is_empty() {
        out.push(("phi".into(), hp.phi.as_slice().expect("standard layout")));
        out.push(("psi".into(), hp.psi.as_slice().expect("standard layout")));
    }
    for (t, l) in hp.mlp.iter().enumerate() {
        out.push((format!("mlp[{t}].W1"), l.w1.as_slice().expect("standard layout")));
        out.push((format!("mlp[{t}].b1"), l.b1.as_slice().expect("standard layout")));
        out.push((format!("mlp[{t}].w2"), l.w2.as_slice().expect("standard layout")));
        out.push((format!("mlp[{t}].b2"), std::slice::from_ref(&l.b2)));
    }
    out
}

pub fn halting_blocks_mut(hp: &mut HaltingParams) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    if let Some(q) = hp.q.as_mut() {
        out.push(q.as_slice_mut().expect("standard layout"));
    }
    if !hp.phi.is_empty() {
        out.push(hp.phi.as_slice_mut().expect("standard layout"));
        out.push(hp.psi.as_slice_mut().expect("standard layout"));
    }
    for l in hp.mlp.iter_mut() {
        out.push(l.w1.as_slice_mut().expect("standard layout"));
        out.push(l.b1.as_slice_mut().expect("standard layout"));
        out.push(l.w2.as_slice_mut().expect("standard layout"));
        out.push(std::slice::from_mut(&mut l.b2));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one group of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl Adam {
    pub fn new(hyper: AdamHyper) -> Self {
        Adam {
            hyper,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    /// One bias-corrected update. Moments are allocated on the first call.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(&grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::dim("parameter and gradient blocks differ in shape"));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() || self.m.iter().zip(&grads).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::dim("optimizer state does not match the parameter blocks"));
        }
        self.step += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning-rate state machine: after `patience` batches without a new best
/// loss the rate drops to the next ratio of `lr0`; after the last ratio's
/// plateau the schedule is done.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr0: f64,
    pub ratios: Vec<f64>,
    pub patience: usize,
    pub best: f64,
    pub since_best: usize,
    /// Index into `ratios`; `None` while still at `lr0`.
    pub ratio_index: Option<usize>,
    pub done: bool,
}

impl PlateauSchedule {
    pub fn new(lr0: f64, ratios: Vec<f64>, patience: usize) -> Self {
        PlateauSchedule {
            lr0,
            ratios,
            patience,
            best: f64::INFINITY,
            since_best: 0,
            ratio_index: None,
            done: false,
        }
    }

    pub fn lr(&self) -> f64 {
        self.ratio_index.map_or(self.lr0, |i| self.lr0 * self.ratios[i])
    }

    /// Feeds one batch loss; returns true when the rate changed or the
    /// schedule finished on this batch.
    pub fn update(&mut self, loss: f64) -> bool {
        if self.done {
            return false;
        }
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
            return false;
        }
        self.since_best += 1;
        if self.since_best < self.patience {
            return false;
        }
        let next = self.ratio_index.map_or(0, |i| i + 1);
        if next < self.ratios.len() {
            self.ratio_index = Some(next);
        } else {
            self.done = true;
        }
        self.best = f64::INFINITY;
        self.since_best = 0;
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub tau: f64,
    /// Initial learning rate of every stage except the halting-only one.
    pub lr0: f64,
    /// Initial learning rate of the halting-only stage.
    pub halting_lr0: f64,
    pub plateau_patience: usize,
    pub lr_ratios: Vec<f64>,
    /// Batches for the fixed-depth baseline (per-layer SSE).
    pub fixed_batches: usize,
    pub stage1_batches: usize,
    pub stage2_batches: usize,
    pub adam: AdamHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 10.0,
            lr0: 1e-3,
            halting_lr0: 1e-2,
            plateau_patience: 200,
            lr_ratios: vec![0.1, 0.01, 0.001],
            fixed_batches: 2000,
            stage1_batches: 1000,
            stage2_batches: 2000,
            adam: AdamHyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            errs.push(format!("train: tau must be a finite value >= 0, got {}", self.tau));
        }
        for (name, v) in [("lr0", self.lr0), ("halting_lr0", self.halting_lr0)] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("train: {name} must be positive, got {v}"));
            }
        }
        if self.plateau_patience < 1 {
            errs.push("train: plateau_patience must be >= 1".into());
        }
        let in_range = self.lr_ratios.iter().all(|r| *r > 0.0 && *r < 1.0);
        let decreasing = self.lr_ratios.windows(2).all(|w| w[1] < w[0]);
        if !in_range || !decreasing {
            errs.push(format!("train: lr_ratios must be strictly decreasing in (0, 1), got {:?}", self.lr_ratios));
        }
        let AdamHyper { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            errs.push("train: adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Fixed-depth network trained alone on per-layer SSE.
    Fixed,
    HaltingOnly,
    FineTuneAll,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Fixed => "fixed",
            Stage::HaltingOnly => "halting_only",
            Stage::FineTuneAll => "fine_tune_all",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub batch: u64,
    pub loss: f64,
    pub lr: f64,
    pub stage: Stage,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(["batch", "loss", "lr", "stage"]).map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.write_record([r.batch.to_string(), format!("{:e}", r.loss), format!("{:e}", r.lr), r.stage.name().to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn stage_rows(&self, stage: Stage) -> impl Iterator<Item = &HistoryRow> {
        self.rows.iter().filter(move |r| r.stage == stage)
    }
}

/// Anything that yields mini-batch `i`.
pub trait BatchSource {
    fn batch(&self, index: u64) -> Result<Batch>;
}

impl BatchSource for BatchStream {
    fn batch(&self, index: u64) -> Result<Batch> {
        BatchStream::batch(self, index)
    }
}

impl<F: Fn(u64) -> Result<Batch>> BatchSource for F {
    fn batch(&self, index: u64) -> Result<Batch> {
        self(index)
    }
}

/// Runs one stage: at most `batches` steps starting at batch `start`, ending
/// early once the schedule completes. Returns the next batch index.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    cfg: &TrainConfig,
    stage: Stage,
    lr0: f64,
    batches: usize,
    start: u64,
    data: &dyn BatchSource,
    net: &mut UnfoldedNet,
    mut hp: Option<&mut HaltingParams>,
    history: &mut History,
) -> Result<u64> {
    let mut schedule = PlateauSchedule::new(lr0, cfg.lr_ratios.clone(), cfg.plateau_patience);
    let mut adam_net = Adam::new(cfg.adam);
    let mut adam_hp = Adam::new(cfg.adam);
    let (objective, want) = match stage {
        Stage::Fixed => (Objective::LayerSse, Want::NET),
        Stage::HaltingOnly => (Objective::Halting { tau: cfg.tau }, Want::HALTING),
        Stage::FineTuneAll => (Objective::Halting { tau: cfg.tau }, Want::ALL),
    };
    let mut index = start;
    for _ in 0..batches {
        let batch = data.batch(index)?;
        let (loss, grads) = batch_loss_and_grads(
            net,
            hp.as_deref(),
            batch.matrix.view(),
            batch.signals.view(),
            batch.measurements.view(),
            objective,
            want,
        )?;
        let lr = schedule.lr();
        if let Some(g) = &grads.net {
            let gb: Vec<&[f64]> = net_blocks(g).into_iter().map(|(_, b)| b).collect();
            adam_net.step(net_blocks_mut(net), gb, lr)?;
            net.thresholds.mapv_inplace(|l| l.max(LAMBDA_MIN));
        }
        if let (Some(g), Some(h)) = (&grads.halting, hp.as_deref_mut()) {
            let gb: Vec<&[f64]> = halting_blocks(g).into_iter().map(|(_, b)| b).collect();
            adam_hp.step(halting_blocks_mut(h), gb, lr)?;
            h.clamp_phi();
        }
        history.rows.push(HistoryRow {
            batch: index,
            loss,
            lr,
            stage,
        });
        index += 1;
        schedule.update(loss);
        if schedule.done {
            break;
        }
    }
    Ok(index)
}

fn check_config(cfg: &TrainConfig) -> Result<()> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    Ok(())
}

/// Trains a fixed-depth network on the per-layer squared error for
/// `cfg.fixed_batches` batches from batch 0.
pub fn train_fixed(cfg: &TrainConfig, net: &mut UnfoldedNet, data: &dyn BatchSource) -> Result<History> {
    train_fixed_range(cfg, net, data, 0, cfg.fixed_batches)
}

/// Per-layer squared-error training over batches `start..start + batches`.
pub fn train_fixed_range(cfg: &TrainConfig, net: &mut UnfoldedNet, data: &dyn BatchSource, start: u64, batches: usize) -> Result<History> {
    check_config(cfg)?;
    net.validate()?;
    let mut history = History::default();
    run_stage(cfg, Stage::Fixed, cfg.lr0, batches, start, data, net, None, &mut history)?;
    Ok(history)
}

/// Stage 1 trains only the halting parameters; stage 2 fine-tunes all.
/// Thresholds belong to the base network and stay frozen in stage 1.
/// Batches are drawn from index `start` on.
pub fn train_two_stage(cfg: &TrainConfig, net: &mut UnfoldedNet, hp: &mut HaltingParams, data: &dyn BatchSource, start: u64) -> Result<History> {
    check_config(cfg)?;
    net.validate()?;
    hp.validate()?;
    let mut history = History::default();
    let next = run_stage(cfg, Stage::HaltingOnly, cfg.halting_lr0, cfg.stage1_batches, start, data, net, Some(hp), &mut history)?;
    run_stage(cfg, Stage::FineTuneAll, cfg.lr0, cfg.stage2_batches, next, data, net, Some(hp), &mut history)?;
    Ok(history)
}

/// Outcome of a finite-difference comparison for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    /// `max|analytic − numeric| / max(max|analytic|, max|numeric|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries skipped because a perturbation crossed a kink.
    pub skipped: usize,
}

fn kink_pattern(net: &UnfoldedNet, hp: Option<&HaltingParams>, a: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Vec<u8>> {
    let fwd = net.forward_batch(a, y)?;
    let mut pat: Vec<u8> = fwd.gates.iter().flat_map(|g| g.iter().map(|v| *v as u8)).collect();
    if let Some(hp) = hp {
        for (i, l) in hp.mlp.iter().enumerate() {
            let r = &y - &fwd.xs[i + 1].dot(&a.t());
            let u = r.dot(&l.w1.t()) + &l.b1;
            pat.extend(u.iter().map(|v| (*v > 0.0) as u8));
        }
    }
    Ok(pat)
}

/// Compares analytic gradients with central differences of step `h`.
/// Entries whose ±h perturbation changes any shrinkage gate or ReLU state
/// are skipped.
pub fn grad_check(
    net: &UnfoldedNet,
    hp: Option<&HaltingParams>,
    a: ArrayView2<f64>,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    objective: Objective,
    h: f64,
) -> Result<Vec<BlockCheck>> {
    let want = Want {
        net: true,
        halting: hp.is_some() && matches!(objective, Objective::Halting { .. }),
    };
    let (_, grads) = batch_loss_and_grads(net, hp, a, x, y, objective, want)?;
    let base = kink_pattern(net, hp, a, y)?;
    let loss_at = |net: &UnfoldedNet, hp: Option<&HaltingParams>| -> Result<Option<f64>> {
        if kink_pattern(net, hp, a, y)? != base {
            return Ok(None);
        }
        Ok(Some(batch_loss_and_grads(net, hp, a, x, y, objective, Want::NONE)?.0))
    };
    let mut out = Vec::new();
    let mut compare = |name: String, analytic: &[f64], numeric: Vec<Option<f64>>| {
        let mut diff: f64 = 0.0;
        let mut mag: f64 = 0.0;
        let mut checked = 0;
        for (g, n) in analytic.iter().zip(&numeric) {
            if let Some(n) = n {
                diff = diff.max((g - n).abs());
                mag = mag.max(g.abs()).max(n.abs());
                checked += 1;
            }
        }
        out.push(BlockCheck {
            name,
            max_rel_error: if mag > 0.0 { diff / mag } else { 0.0 },
            checked,
            skipped: numeric.len() - checked,
        });
    };

    let g_net = grads.net.as_ref().expect("requested");
    for (k, (name, analytic)) in net_blocks(g_net).into_iter().enumerate() {
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            net_blocks_mut(&mut plus)[k][i] += h;
            net_blocks_mut(&mut minus)[k][i] -= h;
            numeric.push(match (loss_at(&plus, hp)?, loss_at(&minus, hp)?) {
                (Some(lp), Some(lm)) => Some((lp - lm) / (2.0 * h)),
                _ => None,
            });
        }
        compare(name, analytic, numeric);
    }
    if let (Some(g_hp), Some(hp)) = (grads.halting.as_ref(), hp) {
        for (k, (name, analytic)) in halting_blocks(g_hp).into_iter().enumerate() {
            let mut numeric = Vec::with_capacity(analytic.len());
            for i in 0..analytic.len() {
                let mut plus = hp.clone();
                let mut minus = hp.clone();
                halting_blocks_mut(&mut plus)[k][i] += h;
                halting_blocks_mut(&mut minus)[k][i] -= h;
                numeric.push(match (loss_at(net, Some(&plus))?, loss_at(net, Some(&minus))?) {
                    (Some(lp), Some(lm)) => Some((lp - lm) / (2.0 * h)),
                    _ => None,
                });
            }
            compare(name, analytic, numeric);
        }
    }
    Ok(out)
}
