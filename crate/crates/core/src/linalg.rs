use ndarray::{Array1, ArrayView1, ArrayView2};

/// Largest singular value via power iteration on `AᵀA`.
///
/// Iterates until the Rayleigh quotient stalls to relative 1e-15 (or 20k
/// iterations). The start vector is fixed, so the result is deterministic.
pub fn spectral_norm(a: ArrayView2<f64>) -> f64 {
    let m = a.ncols();
    if m == 0 || a.nrows() == 0 {
        return 0.0;
    }
    // A fixed, non-symmetric start avoids being orthogonal to the top singular vector
    // for structured matrices.
    let mut v = Array1::from_shape_fn(m, |i| 1.0 + ((i * 7919) % 101) as f64 / 101.0);
    let norm = v.dot(&v).sqrt();
    v /= norm;
    let mut lambda = 0.0;
    for _ in 0..20_000 {
        let w = a.t().dot(&a.dot(&v));
        let next = v.dot(&w);
        let wn = w.dot(&w).sqrt();
        if wn == 0.0 {
            return 0.0;
        }
        v = w / wn;
        if (next - lambda).abs() <= 1e-15 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}

pub fn l1_norm(x: ArrayView1<f64>) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

pub fn l2_norm(x: ArrayView1<f64>) -> f64 {
    x.dot(&x).sqrt()
}

pub fn nnz(x: ArrayView1<f64>) -> usize {
    x.iter().filter(|v| **v != 0.0).count()
}

/// Overflow-free logistic function.
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}
