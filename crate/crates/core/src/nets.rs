//! Unfolded LISTA-family networks.
//!
//! Layer `t` maps `x_{t-1}` to `x_t = η_t(z_t)` with
//!
//! * LISTA: `z_t = W_t x_{t-1} + B_t y`, `η_t` soft thresholding at `λ_t`;
//! * LISTA-CPSS: `z_t = x_{t-1} + B_t (y − A x_{t-1})` (the coupled form of
//!   `W_t = I − B_t A`), `η_t` soft thresholding except on the
//!   `⌈p_t m⌉` largest-magnitude coordinates, which pass through unchanged.
//!
//! Batched routines keep one sample per row.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::spectral_norm;
use crate::solvers::shrink;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Lista,
    ListaCpss,
}

impl NetKind {
    pub fn code(self) -> u8 {
        match self {
            NetKind::Lista => 0,
            NetKind::ListaCpss => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(NetKind::Lista),
            1 => Some(NetKind::ListaCpss),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedNet {
    pub kind: NetKind,
    pub depth: usize,
    /// One `W`/`B` pair for every layer when true, one per layer otherwise.
    pub shared: bool,
    /// Measurement count.
    pub n: usize,
    /// Signal length.
    pub m: usize,
    /// `m x m` blocks; empty for LISTA-CPSS.
    pub weights_w: Vec<Array2<f64>>,
    /// `m x n` blocks.
    pub weights_b: Vec<Array2<f64>>,
    pub thresholds: Array1<f64>,
    /// Per-layer support fractions `p_t` (LISTA-CPSS only, not trained).
    pub support_fractions: Option<Array1<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetInit {
    pub threshold: f64,
    /// Final support fraction of the CPSS ramp, usually `s_max / m`.
    pub cpss_p_max: f64,
}

impl Default for NetInit {
    fn default() -> Self {
        NetInit {
            threshold: 0.1,
            cpss_p_max: 0.1,
        }
    }
}

/// ISTA-equivalent initialization: `B = βAᵀ`, `W = I − BA`, `β = 1/‖A‖₂²`.
pub fn init_network(kind: NetKind, a: ArrayView2<f64>, depth: usize, shared: bool, init: NetInit) -> Result<UnfoldedNet> {
    if depth < 1 {
        return Err(Error::param("network depth must be >= 1"));
    }
    if !(init.threshold > 0.0) {
        return Err(Error::param(format!("initial threshold must be > 0, got {}", init.threshold)));
    }
    let (n, m) = a.dim();
    if n == 0 || m == 0 {
        return Err(Error::dim("empty measurement matrix"));
    }
    let norm = spectral_norm(a);
    if norm == 0.0 {
        return Err(Error::param("measurement matrix is zero"));
    }
    let beta = 1.0 / (norm * norm);
    let b = a.t().as_standard_layout().into_owned() * beta;
    let copies = if shared { 1 } else { depth };
    let weights_w = match kind {
        NetKind::Lista => {
            let w = Array2::<f64>::eye(m) - b.dot(&a);
            vec![w; copies]
        }
        NetKind::ListaCpss => Vec::new(),
    };
    let support_fractions = match kind {
        NetKind::Lista => None,
        NetKind::ListaCpss => {
            if !(init.cpss_p_max > 0.0 && init.cpss_p_max <= 1.0) {
                return Err(Error::param(format!("support fraction must lie in (0, 1], got {}", init.cpss_p_max)));
            }
            Some(Array1::from_shape_fn(depth, |t| init.cpss_p_max * (t + 1) as f64 / depth as f64))
        }
    };
    Ok(UnfoldedNet {
        kind,
        depth,
        shared,
        n,
        m,
        weights_w,
        weights_b: vec![b; copies],
        thresholds: Array1::from_elem(depth, init.threshold),
        support_fractions,
    })
}

/// Per-coordinate state of the shrinkage stage, used by backpropagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Gate {
    /// Shrunk to zero.
    Dead = 0,
    /// Shrunk but nonzero.
    Shrunk = 1,
    /// Selected support, passed through unchanged.
    Pass = 2,
}

/// Cached batch forward pass.
#[derive(Debug, Clone)]
pub struct BatchForward {
    /// `xs[t]` is `x_t` for `t = 0..=L` (`xs[0]` is zero).
    pub xs: Vec<Array2<f64>>,
    /// `zs[t-1]` is the pre-shrinkage `z_t`.
    pub zs: Vec<Array2<f64>>,
    pub gates: Vec<Array2<Gate>>,
}

/// Single-sample layer outputs `x_1..x_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer_outputs: Vec<Array1<f64>>,
    pub input: Array1<f64>,
}

impl UnfoldedNet {
    pub(crate) fn idx(&self, t: usize) -> usize {
        if self.shared {
            0
        } else {
            t - 1
        }
    }

    /// `W_t` for 1-based layer `t` (LISTA only).
    pub fn w(&self, t: usize) -> &Array2<f64> {
        &self.weights_w[self.idx(t)]
    }

    pub fn b(&self, t: usize) -> &Array2<f64> {
        &self.weights_b[self.idx(t)]
    }

    pub fn threshold(&self, t: usize) -> f64 {
        self.thresholds[t - 1]
    }

    /// Number of pass-through coordinates at layer `t` (zero for LISTA).
    pub fn support_size(&self, t: usize) -> usize {
        match &self.support_fractions {
            Some(p) => ((p[t - 1] * self.m as f64).ceil() as usize).min(self.m),
            None => 0,
        }
    }

    /// Checks internal consistency (shapes, positive thresholds).
    pub fn validate(&self) -> Result<()> {
        let copies = if self.shared { 1 } else { self.depth };
        if self.depth < 1 {
            return Err(Error::param("network depth must be >= 1"));
        }
        if self.weights_b.len() != copies || self.weights_b.iter().any(|b| b.dim() != (self.m, self.n)) {
            return Err(Error::dim("B blocks do not match the sharing flag or m x n"));
        }
        match self.kind {
            NetKind::Lista => {
                if self.weights_w.len() != copies || self.weights_w.iter().any(|w| w.dim() != (self.m, self.m)) {
                    return Err(Error::dim("W blocks do not match the sharing flag or m x m"));
                }
            }
            NetKind::ListaCpss => {
                if !self.weights_w.is_empty() {
                    return Err(Error::dim("LISTA-CPSS stores no W blocks"));
                }
                match &self.support_fractions {
                    Some(p) if p.len() == self.depth && p.iter().all(|v| *v > 0.0 && *v <= 1.0) => {}
                    _ => return Err(Error::param("LISTA-CPSS needs one support fraction in (0, 1] per layer")),
                }
            }
        }
        if self.thresholds.len() != self.depth || self.thresholds.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::param("need one positive threshold per layer"));
        }
        Ok(())
    }

    /// Zero-filled copy with the same shapes (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        UnfoldedNet {
            weights_w: self.weights_w.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            weights_b: self.weights_b.iter().map(|b| Array2::zeros(b.raw_dim())).collect(),
            thresholds: Array1::zeros(self.depth),
            ..self.clone()
        }
    }

    /// Copy with a different depth. Extra layers repeat the last layer's
    /// parameters; the CPSS support ramp is rebuilt for the new depth.
    pub fn extended_to(&self, depth: usize) -> Result<Self> {
        if depth < 1 {
            return Err(Error::param("network depth must be >= 1"));
        }
        if depth == self.depth {
            return Ok(self.clone());
        }
        let pick = |t: usize| t.min(self.depth - 1);
        let resize = |v: &Vec<Array2<f64>>| -> Vec<Array2<f64>> {
            if self.shared {
                v.clone()
            } else {
                (0..depth).map(|t| v[pick(t)].clone()).collect()
            }
        };
        let support_fractions = self.support_fractions.as_ref().map(|p| {
            let pmax = p[self.depth - 1];
            Array1::from_shape_fn(depth, |t| pmax * (t + 1) as f64 / depth as f64)
        });
        Ok(UnfoldedNet {
            depth,
            weights_w: resize(&self.weights_w),
            weights_b: resize(&self.weights_b),
            thresholds: Array1::from_shape_fn(depth, |t| self.thresholds[pick(t)]),
            support_fractions,
            ..self.clone()
        })
    }

    fn check_input(&self, a: ArrayView2<f64>, n_in: usize) -> Result<()> {
        if n_in != self.n {
            return Err(Error::dim(format!("measurement length {n_in} does not match the network's n = {}", self.n)));
        }
        if self.kind == NetKind::ListaCpss && a.dim() != (self.n, self.m) {
            return Err(Error::dim(format!("LISTA-CPSS needs A of shape {}x{}, got {:?}", self.n, self.m, a.dim())));
        }
        Ok(())
    }

    /// Shrinkage stage of layer `t` applied to one row.
    fn activate_row(&self, t: usize, z: ArrayView1<f64>, mut x: ndarray::ArrayViewMut1<f64>, mut gate: ndarray::ArrayViewMut1<Gate>) {
        let lambda = self.threshold(t);
        for ((xo, go), &zv) in x.iter_mut().zip(gate.iter_mut()).zip(z.iter()) {
            let v = shrink(zv, lambda);
            *xo = v;
            *go = if v == 0.0 { Gate::Dead } else { Gate::Shrunk };
        }
        let k = self.support_size(t);
        if k > 0 {
            let mut idx: Vec<usize> = (0..z.len()).collect();
            let cmp = |a: &usize, b: &usize| z[*b].abs().total_cmp(&z[*a].abs()).then(a.cmp(b));
            if k < idx.len() {
                idx.select_nth_unstable_by(k - 1, cmp);
            }
            for &i in &idx[..k] {
                x[i] = z[i];
                gate[i] = Gate::Pass;
            }
        }
    }

    /// Pre-activation of layer `t` for a batch of previous outputs.
    fn preactivation(&self, a: ArrayView2<f64>, t: usize, x_prev: ArrayView2<f64>, y: ArrayView2<f64>, by: Option<&Array2<f64>>) -> Array2<f64> {
        match self.kind {
            NetKind::Lista => {
                let mut z = x_prev.dot(&self.w(t).t());
                match by {
                    Some(by) => z += by,
                    None => z += &y.dot(&self.b(t).t()),
                }
                z
            }
            NetKind::ListaCpss => {
                let r = &y - &x_prev.dot(&a.t());
                &x_prev + &r.dot(&self.b(t).t())
            }
        }
    }

    /// Runs one layer on a batch: returns `(z_t, x_t, gates)`.
    pub fn layer_batch(&self, a: ArrayView2<f64>, t: usize, x_prev: ArrayView2<f64>, y: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Array2<Gate>) {
        self.layer_batch_cached(a, t, x_prev, y, None)
    }

    fn layer_batch_cached(
        &self,
        a: ArrayView2<f64>,
        t: usize,
        x_prev: ArrayView2<f64>,
        y: ArrayView2<f64>,
        by: Option<&Array2<f64>>,
    ) -> (Array2<f64>, Array2<f64>, Array2<Gate>) {
        let z = self.preactivation(a, t, x_prev, y, by);
        let mut x = Array2::zeros(z.raw_dim());
        let mut gates = Array2::from_elem(z.raw_dim(), Gate::Dead);
        Zip::from(z.rows())
            .and(x.rows_mut())
            .and(gates.rows_mut())
            .for_each(|zr, xr, gr| self.activate_row(t, zr, xr, gr));
        (z, x, gates)
    }

    /// Full forward pass on a batch (`y` is `batch x n`), caching everything
    /// backpropagation needs.
    pub fn forward_batch(&self, a: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<BatchForward> {
        self.check_input(a, y.ncols())?;
        let by = (self.shared && self.kind == NetKind::Lista).then(|| y.dot(&self.b(1).t()));
        let mut xs = Vec::with_capacity(self.depth + 1);
        let mut zs = Vec::with_capacity(self.depth);
        let mut gates = Vec::with_capacity(self.depth);
        xs.push(Array2::zeros((y.nrows(), self.m)));
        for t in 1..=self.depth {
            let (z, x, g) = self.layer_batch_cached(a, t, xs[t - 1].view(), y, by.as_ref());
            zs.push(z);
            xs.push(x);
            gates.push(g);
        }
        Ok(BatchForward { xs, zs, gates })
    }

    /// One layer for one sample.
    pub fn step(&self, a: ArrayView2<f64>, t: usize, x_prev: ArrayView1<f64>, y: ArrayView1<f64>) -> Array1<f64> {
        let xp = x_prev.insert_axis(Axis(0));
        let yy = y.insert_axis(Axis(0));
        let (_, x, _) = self.layer_batch(a, t, xp, yy);
        x.index_axis_move(Axis(0), 0)
    }

    /// `x_1..x_L` for one measurement vector, starting from `x_0 = 0`.
    pub fn forward(&self, a: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<LayerTrace> {
        self.check_input(a, y.len())?;
        let mut outputs = Vec::with_capacity(self.depth);
        let mut x = Array1::zeros(self.m);
        for t in 1..=self.depth {
            x = self.step(a, t, x.view(), y);
            outputs.push(x.clone());
        }
        Ok(LayerTrace {
            layer_outputs: outputs,
            input: y.to_owned(),
        })
    }
}
