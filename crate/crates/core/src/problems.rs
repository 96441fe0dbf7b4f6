//! Seeded problem generation: measurement matrices, sparse signals, noisy
//! measurements and reproducible mini-batch streams.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    Gaussian,
    Rademacher,
    /// Complex QPSK pilots in `{±1, ±i}`, stored as the real block stacking.
    QpskStacked,
}

impl MatrixKind {
    pub fn code(self) -> u8 {
        match self {
            MatrixKind::Gaussian => 0,
            MatrixKind::Rademacher => 1,
            MatrixKind::QpskStacked => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(MatrixKind::Gaussian),
            1 => Some(MatrixKind::Rademacher),
            2 => Some(MatrixKind::QpskStacked),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMatrix {
    pub entries: Array2<f64>,
    pub kind: MatrixKind,
    pub seed: u64,
}

impl MeasurementMatrix {
    /// Number of measurements (rows).
    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    /// Signal length (columns).
    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }
}

fn check_dims(n: usize, m: usize) -> Result<()> {
    if n == 0 || m == 0 {
        return Err(Error::dim(format!("matrix dimensions must be positive, got {n}x{m}")));
    }
    Ok(())
}

fn normalize_columns(a: &mut Array2<f64>) {
    for mut col in a.columns_mut() {
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|v| v / norm);
        }
    }
}

/// Generates a measurement matrix. For `QpskStacked`, `n` and `m` are the
/// complex dimensions and the result is `2n x 2m`.
pub fn gen_matrix(kind: MatrixKind, n: usize, m: usize, seed: u64) -> Result<MeasurementMatrix> {
    check_dims(n, m)?;
    let mut rng = rng_from(seed);
    let entries = match kind {
        MatrixKind::Gaussian => {
            let mut a = Array2::from_shape_simple_fn((n, m), || rng.sample::<f64, _>(StandardNormal));
            normalize_columns(&mut a);
            a
        }
        MatrixKind::Rademacher => {
            let c = 1.0 / (n as f64).sqrt();
            Array2::from_shape_simple_fn((n, m), || if rng.random::<bool>() { c } else { -c })
        }
        MatrixKind::QpskStacked => {
            let c = 1.0 / (n as f64).sqrt();
            let mut re = Array2::zeros((n, m));
            let mut im = Array2::zeros((n, m));
            for (r, i) in re.iter_mut().zip(im.iter_mut()) {
                match rng.random_range(0..4u8) {
                    0 => *r = c,
                    1 => *r = -c,
                    2 => *i = c,
                    _ => *i = -c,
                }
            }
            complex_to_real_stack(re.view(), im.view())?
        }
    };
    Ok(MeasurementMatrix { entries, kind, seed })
}

/// Unnormalized i.i.d. N(0,1) matrix, the ensemble the PGD convergence
/// results are stated for.
pub fn gaussian_iid(n: usize, m: usize, seed: u64) -> Result<Array2<f64>> {
    check_dims(n, m)?;
    let mut rng = rng_from(seed);
    Ok(Array2::from_shape_simple_fn((n, m), || rng.sample::<f64, _>(StandardNormal)))
}

/// `[[Re, -Im], [Im, Re]]`: the real representation of a complex matrix acting
/// on `[Re(x); Im(x)]`.
pub fn complex_to_real_stack(re: ArrayView2<f64>, im: ArrayView2<f64>) -> Result<Array2<f64>> {
    if re.dim() != im.dim() {
        return Err(Error::dim(format!(
            "real part is {:?} but imaginary part is {:?}",
            re.dim(),
            im.dim()
        )));
    }
    let (n, m) = re.dim();
    let mut out = Array2::zeros((2 * n, 2 * m));
    out.slice_mut(s![..n, ..m]).assign(&re);
    out.slice_mut(s![..n, m..]).assign(&im.mapv(|v| -v));
    out.slice_mut(s![n.., ..m]).assign(&im);
    out.slice_mut(s![n.., m..]).assign(&re);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseSignal {
    pub values: Array1<f64>,
    /// Drawn sparsity level. For paired (complex) signals this counts active
    /// users, each of which owns two real coordinates.
    pub sparsity: usize,
}

/// How supports are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SupportPattern {
    #[default]
    Uniform,
    /// `sparsity` clusters of `spread` contiguous (cyclic) coordinates each.
    Clustered { spread: usize },
}

fn check_range(m: usize, s_min: usize, s_max: usize) -> Result<()> {
    if s_min < 1 || s_min > s_max || s_max > m {
        return Err(Error::param(format!(
            "sparsity range must satisfy 1 <= s_min <= s_max <= m, got [{s_min}, {s_max}] with m = {m}"
        )));
    }
    Ok(())
}

fn normalize(v: &mut Array1<f64>) {
    let norm = v.dot(v).sqrt();
    if norm > 0.0 {
        v.mapv_inplace(|x| x / norm);
    }
}

/// Uniform sparsity in `[s_min, s_max]`, uniform support, standard normal
/// nonzeros, then the whole vector is scaled to unit norm.
pub fn gen_sparse_signal(m: usize, s_min: usize, s_max: usize, seed: u64) -> Result<SparseSignal> {
    gen_signal(m, s_min, s_max, false, SupportPattern::Uniform, seed)
}

/// General signal generator. `paired` signals live on `m / 2` complex users:
/// coordinate `k` and `k + m/2` hold the real and imaginary part of user `k`.
pub fn gen_signal(
    m: usize,
    s_min: usize,
    s_max: usize,
    paired: bool,
    pattern: SupportPattern,
    seed: u64,
) -> Result<SparseSignal> {
    if paired && m % 2 != 0 {
        return Err(Error::dim(format!("paired signals need an even length, got {m}")));
    }
    let users = if paired { m / 2 } else { m };
    if let SupportPattern::Clustered { spread } = pattern {
        if spread == 0 || spread > users {
            return Err(Error::param(format!("cluster spread {spread} must lie in [1, {users}]")));
        }
    }
    check_range(users, s_min, s_max)?;
    let mut rng = rng_from(seed);
    let s = rng.random_range(s_min..=s_max);
    let support: Vec<usize> = match pattern {
        SupportPattern::Uniform => sample(&mut rng, users, s).into_vec(),
        SupportPattern::Clustered { spread } => {
            let mut mark = vec![false; users];
            for _ in 0..s {
                let start = rng.random_range(0..users);
                for k in 0..spread {
                    mark[(start + k) % users] = true;
                }
            }
            (0..users).filter(|&k| mark[k]).collect()
        }
    };
    let mut values = Array1::zeros(m);
    for &k in &support {
        values[k] = rng.sample(StandardNormal);
        if paired {
            values[k + users] = rng.sample(StandardNormal);
        }
    }
    normalize(&mut values);
    Ok(SparseSignal { values, sparsity: s })
}

#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub matrix: Arc<MeasurementMatrix>,
    pub signal: SparseSignal,
    pub measurement: Array1<f64>,
    pub snr_db: Option<f64>,
}

impl ProblemInstance {
    /// The additive noise `y - Ax` that was realized for this instance.
    pub fn noise(&self) -> Array1<f64> {
        &self.measurement - &self.matrix.entries.dot(&self.signal.values)
    }
}

fn add_noise(clean: &mut Array1<f64>, snr_db: f64, seed: u64) -> Result<()> {
    let signal_energy = clean.dot(clean);
    if signal_energy <= 0.0 {
        return Err(Error::param("SNR is undefined for a zero noiseless measurement"));
    }
    if !snr_db.is_finite() {
        return Err(Error::param(format!("SNR must be finite, got {snr_db}")));
    }
    let mut rng = rng_from(seed);
    let noise = Array1::from_shape_simple_fn(clean.len(), || rng.sample::<f64, _>(StandardNormal));
    let noise_energy = noise.dot(&noise);
    let scale = (signal_energy / (noise_energy * 10f64.powf(snr_db / 10.0))).sqrt();
    clean.scaled_add(scale, &noise);
    Ok(())
}

/// `y = Ax` (noiseless) or `y = Ax + n` with `n` scaled so this very sample
/// has the requested SNR.
pub fn gen_measurement(
    matrix: &Arc<MeasurementMatrix>,
    signal: SparseSignal,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<ProblemInstance> {
    if matrix.cols() != signal.values.len() {
        return Err(Error::dim(format!(
            "matrix has {} columns but the signal has length {}",
            matrix.cols(),
            signal.values.len()
        )));
    }
    let mut measurement = matrix.entries.dot(&signal.values);
    if let Some(snr) = snr_db {
        add_noise(&mut measurement, snr, seed)?;
    }
    Ok(ProblemInstance {
        matrix: Arc::clone(matrix),
        signal,
        measurement,
        snr_db,
    })
}

pub fn realized_snr_db(clean: ArrayView1<f64>, noisy: ArrayView1<f64>) -> f64 {
    let noise = &noisy - &clean;
    10.0 * (clean.dot(&clean) / noise.dot(&noise)).log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    /// Measurement count (complex count for `qpsk_stacked`).
    pub n: usize,
    /// Signal length (complex count for `qpsk_stacked`).
    pub m: usize,
    pub s_min: usize,
    pub s_max: usize,
    pub batch_size: usize,
    pub n_batches: usize,
    #[serde(default)]
    pub snr_db: Option<f64>,
    pub matrix_kind: MatrixKind,
    #[serde(default)]
    pub support: SupportPattern,
    pub master_seed: u64,
}

impl BatchConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n == 0 || self.m == 0 {
            errs.push(format!("batch: n and m must be positive (n = {}, m = {})", self.n, self.m));
        }
        if self.s_min < 1 || self.s_min > self.s_max || self.s_max > self.m {
            errs.push(format!(
                "batch: need 1 <= s_min <= s_max <= m (s_min = {}, s_max = {}, m = {})",
                self.s_min, self.s_max, self.m
            ));
        }
        if self.batch_size == 0 {
            errs.push("batch: batch_size must be >= 1".into());
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                errs.push(format!("batch: snr_db must be finite, got {snr}"));
            }
        }
        if let SupportPattern::Clustered { spread } = self.support {
            if spread == 0 || spread > self.m {
                errs.push(format!("batch: cluster spread {spread} must lie in [1, m]"));
            }
        }
        errs
    }

    fn paired(&self) -> bool {
        self.matrix_kind == MatrixKind::QpskStacked
    }
}

/// One mini-batch. Samples are rows: `signals` is `batch x m`,
/// `measurements` is `batch x n`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub index: u64,
    pub matrix: Arc<MeasurementMatrix>,
    pub signals: Array2<f64>,
    pub measurements: Array2<f64>,
    pub sparsities: Vec<usize>,
    pub snr_db: Option<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.signals.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn instance(&self, i: usize) -> ProblemInstance {
        ProblemInstance {
            matrix: Arc::clone(&self.matrix),
            signal: SparseSignal {
                values: self.signals.row(i).to_owned(),
                sparsity: self.sparsities[i],
            },
            measurement: self.measurements.row(i).to_owned(),
            snr_db: self.snr_db,
        }
    }

    /// Keeps only the samples whose sparsity satisfies `keep`.
    pub fn filter_sparsity(&self, keep: impl Fn(usize) -> bool) -> Batch {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(self.sparsities[i])).collect();
        Batch {
            index: self.index,
            matrix: Arc::clone(&self.matrix),
            signals: self.signals.select(Axis(0), &rows),
            measurements: self.measurements.select(Axis(0), &rows),
            sparsities: rows.iter().map(|&i| self.sparsities[i]).collect(),
            snr_db: self.snr_db,
        }
    }

    /// Concatenates batches sharing one matrix.
    pub fn concat(parts: &[Batch]) -> Result<Batch> {
        let first = parts.first().ok_or_else(|| Error::param("cannot concatenate zero batches"))?;
        let xs: Vec<_> = parts.iter().map(|b| b.signals.view()).collect();
        let ys: Vec<_> = parts.iter().map(|b| b.measurements.view()).collect();
        Ok(Batch {
            index: first.index,
            matrix: Arc::clone(&first.matrix),
            signals: ndarray::concatenate(Axis(0), &xs).map_err(|e| Error::dim(e.to_string()))?,
            measurements: ndarray::concatenate(Axis(0), &ys).map_err(|e| Error::dim(e.to_string()))?,
            sparsities: parts.iter().flat_map(|b| b.sparsities.iter().copied()).collect(),
            snr_db: first.snr_db,
        })
    }
}

/// Reproducible batch source: batch `i` depends only on `(master_seed, i)`.
#[derive(Debug, Clone)]
pub struct BatchStream {
    config: BatchConfig,
    matrix: Arc<MeasurementMatrix>,
    stream_seed: u64,
}

impl BatchStream {
    pub fn new(config: BatchConfig) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let matrix_seed = derive_seed(config.master_seed, stream::MATRIX);
        let matrix = Arc::new(gen_matrix(config.matrix_kind, config.n, config.m, matrix_seed)?);
        let stream_seed = derive_seed(config.master_seed, stream::BATCHES);
        Ok(BatchStream {
            config,
            matrix,
            stream_seed,
        })
    }

    /// Same matrix, a different sample stream (held-out data).
    pub fn with_stream(&self, tag: u64) -> Self {
        BatchStream {
            config: self.config.clone(),
            matrix: Arc::clone(&self.matrix),
            stream_seed: derive_seed(self.config.master_seed, tag),
        }
    }

    pub fn config(&self) -> &BatchConfig {
        &self.config
    }

    pub fn matrix(&self) -> &Arc<MeasurementMatrix> {
        &self.matrix
    }

    pub fn batch(&self, index: u64) -> Result<Batch> {
        let cfg = &self.config;
        let batch_seed = derive_seed(self.stream_seed, index);
        let m = self.matrix.cols();
        let n = self.matrix.rows();
        let mut signals = Array2::zeros((cfg.batch_size, m));
        let mut measurements = Array2::zeros((cfg.batch_size, n));
        let mut sparsities = Vec::with_capacity(cfg.batch_size);
        for j in 0..cfg.batch_size {
            let sample_seed = derive_seed(batch_seed, j as u64);
            let signal = gen_signal(
                m,
                cfg.s_min,
                cfg.s_max,
                cfg.paired(),
                cfg.support,
                derive_seed(sample_seed, 0),
            )?;
            let inst = gen_measurement(&self.matrix, signal, cfg.snr_db, derive_seed(sample_seed, 1))?;
            signals.row_mut(j).assign(&inst.signal.values);
            measurements.row_mut(j).assign(&inst.measurement);
            sparsities.push(inst.signal.sparsity);
        }
        Ok(Batch {
            index,
            matrix: Arc::clone(&self.matrix),
            signals,
            measurements,
            sparsities,
            snr_db: cfg.snr_db,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Batch>> + '_ {
        (0..self.config.n_batches as u64).map(move |i| self.batch(i))
    }
}
