//! Halting scores and adaptive-depth inference.
//!
//! After layer `t` the score `h_t ∈ (0, 1)` is computed from the residual
//! `r_t = y − A x_t`; inference stops at the first layer with `h_t ≤ ε`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sigmoid;
use crate::nets::{LayerTrace, UnfoldedNet};
use crate::rng::rng_from;

pub const DEFAULT_H_LAST: f64 = 0.01;
/// Lower clamp applied to `φ_t` after every optimizer step.
pub const PHI_MIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltingDesign {
    LearnedQ,
    NoQ,
    Mlp2,
}

impl HaltingDesign {
    pub fn code(self) -> u8 {
        match self {
            HaltingDesign::LearnedQ => 0,
            HaltingDesign::NoQ => 1,
            HaltingDesign::Mlp2 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(HaltingDesign::LearnedQ),
            1 => Some(HaltingDesign::NoQ),
            2 => Some(HaltingDesign::Mlp2),
            _ => None,
        }
    }
}

/// Two-layer halting network of one layer: `w2ᵀ relu(W1 r + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HaltingParams {
    pub design: HaltingDesign,
    pub n: usize,
    pub depth: usize,
    /// Shared `n x n` mapping (learned_q only).
    pub q: Option<Array2<f64>>,
    /// Per-layer `φ_t` (empty for mlp2).
    pub phi: Array1<f64>,
    /// Per-layer `ψ_t` (empty for mlp2).
    pub psi: Array1<f64>,
    /// Per-layer MLPs (mlp2 only).
    pub mlp: Vec<MlpLayer>,
    /// Score of the last layer; fixed.
    pub h_last: f64,
}

impl HaltingParams {
    /// `Q = I`, `φ_t = 1`, `ψ_t = 0`; mlp2 weights are Gaussian with
    /// fan-in variance, drawn from `seed`.
    pub fn new(design: HaltingDesign, n: usize, depth: usize, seed: u64) -> Result<Self> {
        if depth < 1 || n < 1 {
            return Err(Error::param("halting network needs depth >= 1 and n >= 1"));
        }
        let per_layer = |v: f64| match design {
            HaltingDesign::Mlp2 => Array1::zeros(0),
            _ => Array1::from_elem(depth, v),
        };
        let mlp = if design == HaltingDesign::Mlp2 {
            let mut rng = rng_from(seed);
            let hidden = 2 * n;
            let d1 = Normal::new(0.0, (1.0 / n as f64).sqrt()).expect("valid std");
            let d2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("valid std");
            (0..depth)
                .map(|_| MlpLayer {
                    w1: Array2::from_shape_simple_fn((hidden, n), || d1.sample(&mut rng)),
                    b1: Array1::zeros(hidden),
                    w2: Array1::from_shape_simple_fn(hidden, || d2.sample(&mut rng)),
                    b2: 0.0,
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(HaltingParams {
            design,
            n,
            depth,
            q: (design == HaltingDesign::LearnedQ).then(|| Array2::eye(n)),
            phi: per_layer(1.0),
            psi: per_layer(0.0),
            mlp,
            h_last: DEFAULT_H_LAST,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h_last > 0.0 && self.h_last < 1.0) {
            return Err(Error::param(format!("h_last must lie in (0, 1), got {}", self.h_last)));
        }
        match self.design {
            HaltingDesign::LearnedQ | HaltingDesign::NoQ => {
                if self.phi.len() != self.depth || self.psi.len() != self.depth {
                    return Err(Error::dim("need one (phi, psi) pair per layer"));
                }
                if self.phi.iter().any(|p| !(*p > 0.0)) {
                    return Err(Error::param("phi_t must be positive"));
                }
                let want_q = self.design == HaltingDesign::LearnedQ;
                match &self.q {
                    Some(q) if want_q && q.dim() == (self.n, self.n) => {}
                    None if !want_q => {}
                    _ => return Err(Error::dim("Q must be n x n for learned_q and absent otherwise")),
                }
            }
            HaltingDesign::Mlp2 => {
                let h = 2 * self.n;
                let ok = self.mlp.len() == self.depth
                    && self
                        .mlp
                        .iter()
                        .all(|l| l.w1.dim() == (h, self.n) && l.b1.len() == h && l.w2.len() == h);
                if !ok {
                    return Err(Error::dim("mlp2 needs one (2n x n, 2n, 2n, 1) block per layer"));
                }
            }
        }
        Ok(())
    }

    /// Zero-filled copy with the same shapes (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        HaltingParams {
            q: self.q.as_ref().map(|q| Array2::zeros(q.raw_dim())),
            phi: Array1::zeros(self.phi.len()),
            psi: Array1::zeros(self.psi.len()),
            mlp: self
                .mlp
                .iter()
                .map(|l| MlpLayer {
                    w1: Array2::zeros(l.w1.raw_dim()),
                    b1: Array1::zeros(l.b1.len()),
                    w2: Array1::zeros(l.w2.len()),
                    b2: 0.0,
                })
                .collect(),
            ..self.clone()
        }
    }

    pub fn clamp_phi(&mut self) {
        self.phi.mapv_inplace(|p| p.max(PHI_MIN));
    }

    fn check_layer(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.depth {
            return Err(Error::param(format!("layer {t} outside 1..={}", self.depth)));
        }
        Ok(())
    }

    /// Argument of the sigmoid at layer `t < L`.
    pub fn pre_activation(&self, t: usize, r: ArrayView1<f64>) -> f64 {
        match self.design {
            HaltingDesign::LearnedQ => {
                let qr = self.q.as_ref().expect("learned_q has Q").dot(&r);
                self.phi[t - 1] * qr.dot(&qr) + self.psi[t - 1]
            }
            HaltingDesign::NoQ => self.phi[t - 1] * r.dot(&r) + self.psi[t - 1],
            HaltingDesign::Mlp2 => {
                let l = &self.mlp[t - 1];
                let u = l.w1.dot(&r) + &l.b1;
                u.iter().zip(l.w2.iter()).map(|(u, w)| u.max(0.0) * w).sum::<f64>() + l.b2
            }
        }
    }

    /// `h_t` for residual `r = y − A x_t`; `h_L = h_last`.
    pub fn halting_score(&self, t: usize, r: ArrayView1<f64>) -> Result<f64> {
        self.check_layer(t)?;
        if r.len() != self.n {
            return Err(Error::dim(format!("residual length {} does not match n = {}", r.len(), self.n)));
        }
        if t == self.depth {
            return Ok(self.h_last);
        }
        Ok(sigmoid(self.pre_activation(t, r)))
    }

    /// Scores for every row of a residual batch.
    pub fn scores_batch(&self, t: usize, r: ArrayView2<f64>) -> Array1<f64> {
        if t == self.depth {
            return Array1::from_elem(r.nrows(), self.h_last);
        }
        r.axis_iter(Axis(0)).map(|row| sigmoid(self.pre_activation(t, row))).collect()
    }
}

/// Exit layer of the halting condition: the first `t` (1-based) with
/// `h_t ≤ ε`, or `L = scores.len()` when none qualifies.
pub fn exit_layer(scores: &[f64], epsilon: f64) -> usize {
    scores.iter().position(|h| *h <= epsilon).map_or(scores.len(), |i| i + 1)
}

/// `ε` at which the cost term of a layer with squared error `err_sq`
/// balances: the optimal score `‖x − x_t‖/√τ`.
pub fn epsilon_guidance(err_sq: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) || err_sq < 0.0 {
        return Err(Error::param("need tau > 0 and a non-negative error"));
    }
    Ok((err_sq / tau).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveOutput {
    pub estimate: Array1<f64>,
    pub exit_layer: usize,
    pub scores: Vec<f64>,
    pub halted_early: bool,
}

fn check_pair(net: &UnfoldedNet, hp: &HaltingParams, a: ArrayView2<f64>) -> Result<()> {
    if hp.depth != net.depth || hp.n != net.n {
        return Err(Error::dim(format!(
            "halting parameters (L={}, n={}) do not match the network (L={}, n={})",
            hp.depth, hp.n, net.depth, net.n
        )));
    }
    if a.dim() != (net.n, net.m) {
        return Err(Error::dim(format!("A has shape {:?}, network expects {}x{}", a.dim(), net.n, net.m)));
    }
    Ok(())
}

/// Full forward pass plus the score of every layer.
pub fn score_trace(net: &UnfoldedNet, hp: &HaltingParams, a: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<(LayerTrace, Vec<f64>)> {
    check_pair(net, hp, a)?;
    let trace = net.forward(a, y)?;
    let scores = trace
        .layer_outputs
        .iter()
        .enumerate()
        .map(|(i, x)| hp.halting_score(i + 1, (&y - &a.dot(x)).view()))
        .collect::<Result<Vec<_>>>()?;
    Ok((trace, scores))
}

pub fn infer_adaptive(net: &UnfoldedNet, hp: &HaltingParams, a: ArrayView2<f64>, y: ArrayView1<f64>, epsilon: f64) -> Result<AdaptiveOutput> {
    infer_adaptive_probed(net, hp, a, y, epsilon, |_| {})
}

/// Adaptive inference; `on_layer(t)` is called once per executed layer.
pub fn infer_adaptive_probed(
    net: &UnfoldedNet,
    hp: &HaltingParams,
    a: ArrayView2<f64>,
    y: ArrayView1<f64>,
    epsilon: f64,
    mut on_layer: impl FnMut(usize),
) -> Result<AdaptiveOutput> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::param(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    check_pair(net, hp, a)?;
    if y.len() != net.n {
        return Err(Error::dim(format!("measurement length {} does not match n = {}", y.len(), net.n)));
    }
    let mut x = Array1::zeros(net.m);
    let mut scores = Vec::new();
    for t in 1..=net.depth {
        on_layer(t);
        x = net.step(a, t, x.view(), y);
        let h = hp.halting_score(t, (&y - &a.dot(&x)).view())?;
        scores.push(h);
        if h <= epsilon {
            break;
        }
    }
    let exit = scores.len();
    Ok(AdaptiveOutput {
        estimate: x,
        exit_layer: exit,
        halted_early: exit < net.depth,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{init_network, NetInit, NetKind};
    use crate::problems::{gen_matrix, MatrixKind};
    use ndarray::arr1;

    #[test]
    fn score_examples() {
        let mut hp = HaltingParams::new(HaltingDesign::LearnedQ, 3, 4, 0).unwrap();
        assert_eq!(hp.halting_score(1, Array1::zeros(3).view()).unwrap(), 0.5);
        hp.psi[1] = -4.0;
        assert_eq!(hp.halting_score(2, arr1(&[2.0, 0.0, 0.0]).view()).unwrap(), 0.5);
        assert_eq!(hp.halting_score(4, arr1(&[9.0, 9.0, 9.0]).view()).unwrap(), DEFAULT_H_LAST);
        assert!(hp.halting_score(0, Array1::zeros(3).view()).is_err());
        assert!(hp.halting_score(5, Array1::zeros(3).view()).is_err());
    }

    #[test]
    fn identity_q_matches_no_q() {
        let q = HaltingParams::new(HaltingDesign::LearnedQ, 5, 3, 0).unwrap();
        let mut nq = HaltingParams::new(HaltingDesign::NoQ, 5, 3, 0).unwrap();
        nq.phi = q.phi.clone();
        let r = arr1(&[0.3, -1.2, 0.5, 2.0, -0.1]);
        for t in 1..=3 {
            assert_eq!(q.halting_score(t, r.view()).unwrap(), nq.halting_score(t, r.view()).unwrap());
        }
    }

    #[test]
    fn scores_increase_with_residual_energy() {
        let mut hp = HaltingParams::new(HaltingDesign::NoQ, 2, 2, 0).unwrap();
        hp.phi[0] = 0.3;
        hp.psi[0] = -3.0;
        let mut last = 0.0;
        for k in 0..20 {
            let h = hp.halting_score(1, arr1(&[0.2 * k as f64, 0.1]).view()).unwrap();
            assert!(h > last && h < 1.0);
            last = h;
        }
    }

    #[test]
    fn mlp_scores_in_open_interval() {
        let hp = HaltingParams::new(HaltingDesign::Mlp2, 4, 3, 9).unwrap();
        hp.validate().unwrap();
        assert_eq!(hp.mlp[0].w1.dim(), (8, 4));
        for k in 0..10 {
            let r = Array1::from_shape_fn(4, |i| (k as f64 - 5.0) * (i as f64 + 0.5));
            let h = hp.halting_score(1, r.view()).unwrap();
            assert!(h > 0.0 && h < 1.0);
        }
        assert_eq!(hp, HaltingParams::new(HaltingDesign::Mlp2, 4, 3, 9).unwrap());
    }

    #[test]
    fn exit_layer_semantics() {
        assert_eq!(exit_layer(&[0.8, 0.4, 0.09, 0.5, 0.01], 0.1), 3);
        assert_eq!(exit_layer(&[0.8, 0.4, 0.3], 0.1), 3);
        assert_eq!(exit_layer(&[0.8, 0.4, 0.3, 0.2], 0.1), 4);
        assert_eq!(exit_layer(&[0.1, 0.05], 0.1), 1);
        assert_eq!(exit_layer(&[0.5], 0.1), 1);
    }

    #[test]
    fn guidance_example() {
        assert!((epsilon_guidance(1e-4, 1.0).unwrap() - 0.01).abs() < 1e-15);
        assert!(epsilon_guidance(1.0, 0.0).is_err());
    }

    #[test]
    fn depth_one_trace_is_h_last() {
        let a = gen_matrix(MatrixKind::Gaussian, 6, 12, 1).unwrap();
        let net = init_network(NetKind::Lista, a.view(), 1, true, NetInit::default()).unwrap();
        let hp = HaltingParams::new(HaltingDesign::LearnedQ, 6, 1, 0).unwrap();
        let (_, s) = score_trace(&net, &hp, a.view(), Array1::ones(6).view()).unwrap();
        assert_eq!(s, vec![DEFAULT_H_LAST]);
    }

    #[test]
    fn adaptive_stops_and_never_runs_later_layers() {
        let a = gen_matrix(MatrixKind::Gaussian, 6, 12, 1).unwrap();
        let net = init_network(NetKind::Lista, a.view(), 6, true, NetInit::default()).unwrap();
        let mut hp = HaltingParams::new(HaltingDesign::NoQ, 6, 6, 0).unwrap();
        hp.psi = arr1(&[5.0, 5.0, -20.0, -20.0, -20.0, 0.0]);
        let y = Array1::from_shape_fn(6, |i| i as f64 * 0.1);
        let mut ran = Vec::new();
        let out = infer_adaptive_probed(&net, &hp, a.view(), y.view(), 0.1, |t| ran.push(t)).unwrap();
        assert_eq!(out.exit_layer, 3);
        assert!(out.halted_early);
        assert_eq!(ran, vec![1, 2, 3]);
        let (trace, scores) = score_trace(&net, &hp, a.view(), y.view()).unwrap();
        assert_eq!(out.estimate, trace.layer_outputs[2]);
        assert_eq!(out.scores[..], scores[..3]);
        assert!(infer_adaptive(&net, &hp, a.view(), y.view(), 0.0).is_err());
    }
}
