//! End-to-end runs: generate, train, sweep, report.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{evaluate_layers, interpolate_layers, mean_scores_by_layer, sweep_epsilon, write_sweep_csv, EvalReport, LayerStats};
use crate::checkpoint::save_checkpoint;
use crate::config::{ExperimentConfig, Scenario};
use crate::dataset::write_batch;
use crate::error::{Error, Result};
use crate::halting::HaltingParams;
use crate::nets::{init_network, UnfoldedNet};
use crate::problems::{Batch, BatchStream};
use crate::rng::{derive_seed, stream};
use crate::solvers::csv_err;
use crate::training::{train_fixed, train_fixed_range, train_two_stage, BatchSource, History, Stage};

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".adun.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::io(
                &path,
                std::io::Error::new(e.kind(), "output directory is locked by another run"),
            )),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub(crate) fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Human-readable steps of a run, for `--dry-run`.
pub fn plan(cfg: &ExperimentConfig) -> Vec<String> {
    let d = &cfg.data;
    let mut steps = vec![format!(
        "scenario {} (seed {}): A is {:?} {}x{}, s in [{}, {}], snr {:?}",
        cfg.scenario.name(),
        cfg.seed,
        d.matrix_kind,
        d.n,
        d.m,
        d.s_min,
        d.s_max,
        d.snr_db
    )];
    if cfg.scenario == Scenario::MixedSparsityFig1 {
        for l in &cfg.eval.fig1_depths {
            steps.push(format!(
                "depth {l}: train one {:?} net of depth {l} on mixed data and two of depths {} / {} on s = {} / {} ({} batches each)",
                cfg.network.kind,
                l.saturating_sub(2).max(1),
                l + 2,
                d.s_min,
                d.s_max,
                cfg.train.fixed_batches
            ));
        }
        steps.push("write fig1.csv".into());
        return steps;
    }
    steps.push(format!(
        "pretrain {:?} depth {} on per-layer error for {} batches of {}",
        cfg.network.kind, cfg.network.fixed_depth, cfg.train.fixed_batches, d.batch_size
    ));
    steps.push(format!(
        "adaptive: extend to depth {}, {:?} halting, stage 1 {} batches, stage 2 {} batches, tau {}",
        cfg.network.adaptive_depth, cfg.halting.design, cfg.train.stage1_batches, cfg.train.stage2_batches, cfg.train.tau
    ));
    steps.push(format!("fixed baseline: {} more per-layer-error batches", cfg.train.stage2_batches));
    steps.push(format!(
        "evaluate on {} held-out samples, epsilons {:?}",
        cfg.eval.holdout_batches * d.batch_size,
        cfg.eval.epsilons
    ));
    steps.push("write checkpoints, histories, layers, scores, sweep, histogram, sparsity, comparison, summary".into());
    steps
}

pub fn holdout(cfg: &ExperimentConfig, data: &BatchStream) -> Result<Batch> {
    let held = data.with_stream(stream::HOLDOUT);
    let parts = (0..cfg.eval.holdout_batches as u64).map(|i| held.batch(i)).collect::<Result<Vec<_>>>()?;
    Batch::concat(&parts)
}

#[derive(Debug, Clone)]
pub struct TrainedPair {
    pub fixed: UnfoldedNet,
    pub adaptive: UnfoldedNet,
    pub halting: HaltingParams,
    pub fixed_history: History,
    pub adaptive_history: History,
}

/// Pretrains a fixed-depth network, derives the adaptive network from it,
/// and continues the fixed network on the batches of the adaptive network's
/// second stage so both receive the same number of network updates.
pub fn train_pair(cfg: &ExperimentConfig, data: &dyn BatchSource, a: ndarray::ArrayView2<f64>) -> Result<TrainedPair> {
    let net_cfg = &cfg.network;
    let mut pre = init_network(net_cfg.kind, a, net_cfg.fixed_depth, net_cfg.shared, cfg.net_init())?;
    let mut fixed_history = train_fixed(&cfg.train, &mut pre, data)?;
    let mut adaptive = pre.extended_to(net_cfg.adaptive_depth)?;
    let mut halting = HaltingParams::new(cfg.halting.design, a.nrows(), net_cfg.adaptive_depth, derive_seed(cfg.seed, stream::NET_INIT))?;
    halting.h_last = cfg.halting.h_last;
    let start = fixed_history.rows.len() as u64;
    let adaptive_history = train_two_stage(&cfg.train, &mut adaptive, &mut halting, data, start)?;
    let stage1 = adaptive_history.stage_rows(Stage::HaltingOnly).count() as u64;
    let stage2 = adaptive_history.stage_rows(Stage::FineTuneAll).count();
    let mut fixed = pre;
    let more = train_fixed_range(&cfg.train, &mut fixed, data, start + stage1, stage2)?;
    fixed_history.rows.extend(more.rows);
    Ok(TrainedPair {
        fixed,
        adaptive,
        halting,
        fixed_history,
        adaptive_history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub epsilon: f64,
    pub avg_layers_adaptive: f64,
    pub nmse_adaptive_db: f64,
    /// Fixed network evaluated at the same (interpolated) depth.
    pub nmse_fixed_db: f64,
    pub error_std_adaptive: f64,
    pub error_std_fixed: f64,
    pub success_adaptive: f64,
    pub success_fixed: f64,
}

/// Adaptive sweep against the fixed network's per-layer curve at matched
/// average depth. Depths beyond the fixed network use its last layer.
pub fn compare_rows(sweep: &[EvalReport], fixed_layers: &[LayerStats]) -> Vec<CompareRow> {
    let nmse: Vec<f64> = fixed_layers.iter().map(|l| l.nmse_db).collect();
    let std: Vec<f64> = fixed_layers.iter().map(|l| l.error_std).collect();
    let succ: Vec<f64> = fixed_layers.iter().map(|l| l.success_rate).collect();
    sweep
        .iter()
        .map(|r| CompareRow {
            epsilon: r.epsilon,
            avg_layers_adaptive: r.avg_exit_layer,
            nmse_adaptive_db: r.nmse_db_mean,
            nmse_fixed_db: interpolate_layers(&nmse, r.avg_exit_layer),
            error_std_adaptive: r.error_std,
            error_std_fixed: interpolate_layers(&std, r.avg_exit_layer),
            success_adaptive: r.success_rate,
            success_fixed: interpolate_layers(&succ, r.avg_exit_layer),
        })
        .collect()
}

pub fn compare_fixed_vs_adaptive(
    fixed: &UnfoldedNet,
    adaptive: &UnfoldedNet,
    hp: &HaltingParams,
    data: &Batch,
    epsilons: &[f64],
    success_db: f64,
) -> Result<Vec<CompareRow>> {
    let sweep = sweep_epsilon(adaptive, hp, data, epsilons, success_db)?;
    let layers = evaluate_layers(fixed, data, success_db)?;
    Ok(compare_rows(&sweep, &layers))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ScoreRow {
    layer: usize,
    mean_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramRow {
    pub epsilon: f64,
    pub layer: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SparsityRow {
    epsilon: f64,
    sparsity: usize,
    count: usize,
    nmse_db: f64,
    avg_layers: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig1Row {
    pub depth: usize,
    pub one_net_nmse_db: f64,
    pub one_net_error_std: f64,
    pub two_net_nmse_db: f64,
    pub two_net_error_std: f64,
}

fn per_sample_errors(net: &UnfoldedNet, batch: &Batch) -> Result<(Vec<f64>, Vec<f64>)> {
    let fwd = net.forward_batch(batch.matrix.view(), batch.measurements.view())?;
    let out = &fwd.xs[net.depth];
    let mut ratios = Vec::with_capacity(batch.len());
    let mut sq = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let x = batch.signals.row(i);
        let d = &x - &out.row(i);
        let e = d.dot(&d);
        ratios.push(e / x.dot(&x));
        sq.push(e);
    }
    Ok((ratios, sq))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt())
}

fn to_db(r: f64) -> f64 {
    (10.0 * r.log10()).max(crate::analysis::NMSE_FLOOR_DB)
}

/// One network of depth `L` on half-easy/half-hard data against a depth
/// `L − 2` network for the easy half and a depth `L + 2` network for the
/// hard half; both arms execute `L` layers on average.
pub fn fig1_study(cfg: &ExperimentConfig) -> Result<Vec<Fig1Row>> {
    let (lo, hi) = (cfg.data.s_min, cfg.data.s_max);
    let half = (cfg.data.batch_size / 2).max(1);
    let level = |s: usize| {
        let mut b = cfg.batch_config(cfg.train.fixed_batches);
        b.s_min = s;
        b.s_max = s;
        b.batch_size = half;
        BatchStream::new(b).map(|st| st.with_stream(derive_seed(stream::TRAIN, s as u64)))
    };
    let easy = level(lo)?;
    let hard = level(hi)?;
    let a = easy.matrix().entries.clone();
    let mixed = |i: u64| Batch::concat(&[easy.batch(i)?, hard.batch(i)?]);
    let held_easy = {
        let h = easy.with_stream(derive_seed(stream::HOLDOUT, lo as u64));
        Batch::concat(&(0..cfg.eval.holdout_batches as u64).map(|i| h.batch(i)).collect::<Result<Vec<_>>>()?)?
    };
    let held_hard = {
        let h = hard.with_stream(derive_seed(stream::HOLDOUT, hi as u64));
        Batch::concat(&(0..cfg.eval.holdout_batches as u64).map(|i| h.batch(i)).collect::<Result<Vec<_>>>()?)?
    };
    let held_mixed = Batch::concat(&[held_easy.clone(), held_hard.clone()])?;
    let net_cfg = &cfg.network;
    let mut rows = Vec::new();
    for &l in &cfg.eval.fig1_depths {
        let train = |depth: usize, source: &dyn BatchSource| -> Result<UnfoldedNet> {
            let mut net = init_network(net_cfg.kind, a.view(), depth, net_cfg.shared, cfg.net_init())?;
            train_fixed(&cfg.train, &mut net, source)?;
            Ok(net)
        };
        let one = train(l, &mixed)?;
        let short = train(l.saturating_sub(2).max(1), &easy)?;
        let long = train(l + 2, &hard)?;
        let (one_r, one_sq) = per_sample_errors(&one, &held_mixed)?;
        let (mut two_r, mut two_sq) = per_sample_errors(&short, &held_easy)?;
        let (hr, hs) = per_sample_errors(&long, &held_hard)?;
        two_r.extend(hr);
        two_sq.extend(hs);
        rows.push(Fig1Row {
            depth: l,
            one_net_nmse_db: to_db(mean_std(&one_r).0),
            one_net_error_std: mean_std(&one_sq).1,
            two_net_nmse_db: to_db(mean_std(&two_r).0),
            two_net_error_std: mean_std(&two_sq).1,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub files: Vec<String>,
    pub final_fixed_loss: Option<f64>,
    pub final_adaptive_loss: Option<f64>,
    pub mean_scores: Vec<f64>,
    pub sweep: Vec<EvalReport>,
    pub comparison: Vec<CompareRow>,
    pub fig1: Vec<Fig1Row>,
    pub config: String,
}

/// Runs a whole experiment into `out`. Every output directory holds
/// `resolved_config.toml`, from which the run can be repeated exactly.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let _lock = OutputLock::acquire(out)?;
    let mut files = Vec::new();
    let mut emit = |name: &str| -> PathBuf {
        files.push(name.to_string());
        out.join(name)
    };
    let resolved = cfg.to_toml();
    let path = emit("resolved_config.toml");
    fs::write(&path, &resolved).map_err(|e| Error::io(&path, e))?;

    let mut summary = RunSummary {
        scenario: cfg.scenario.name().into(),
        seed: cfg.seed,
        files: Vec::new(),
        final_fixed_loss: None,
        final_adaptive_loss: None,
        mean_scores: Vec::new(),
        sweep: Vec::new(),
        comparison: Vec::new(),
        fig1: Vec::new(),
        config: resolved,
    };

    if cfg.scenario == Scenario::MixedSparsityFig1 {
        summary.fig1 = fig1_study(cfg)?;
        write_csv_rows(&emit("fig1.csv"), &summary.fig1)?;
    } else {
        let data = BatchStream::new(cfg.batch_config(cfg.training_batches()))?;
        let held = holdout(cfg, &data)?;
        write_batch(&emit("holdout.adun"), &held)?;
        let a = data.matrix().entries.clone();
        let pair = train_pair(cfg, &data, a.view())?;
        save_checkpoint(&emit("fixed.adnw"), &pair.fixed, None)?;
        save_checkpoint(&emit("adaptive.adnw"), &pair.adaptive, Some(&pair.halting))?;
        pair.fixed_history.write_csv(&emit("history_fixed.csv"))?;
        pair.adaptive_history.write_csv(&emit("history_adaptive.csv"))?;
        summary.final_fixed_loss = pair.fixed_history.rows.last().map(|r| r.loss);
        summary.final_adaptive_loss = pair.adaptive_history.rows.last().map(|r| r.loss);

        let layers = evaluate_layers(&pair.fixed, &held, cfg.eval.success_db)?;
        write_csv_rows(&emit("layers_fixed.csv"), &layers)?;
        summary.mean_scores = mean_scores_by_layer(&pair.adaptive, &pair.halting, &held)?;
        let score_rows: Vec<ScoreRow> = summary
            .mean_scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoreRow { layer: i + 1, mean_score: s })
            .collect();
        write_csv_rows(&emit("scores.csv"), &score_rows)?;
        let sweep = sweep_epsilon(&pair.adaptive, &pair.halting, &held, &cfg.eval.epsilons, cfg.eval.success_db)?;
        write_sweep_csv(&emit("sweep.csv"), &sweep)?;
        let hist: Vec<HistogramRow> = sweep
            .iter()
            .flat_map(|r| {
                r.exit_histogram.iter().enumerate().map(move |(i, &c)| HistogramRow {
                    epsilon: r.epsilon,
                    layer: i + 1,
                    count: c,
                })
            })
            .collect();
        write_csv_rows(&emit("histogram.csv"), &hist)?;
        let sparsity: Vec<SparsityRow> = sweep
            .iter()
            .flat_map(|r| {
                r.per_sparsity.iter().map(move |(&s, st)| SparsityRow {
                    epsilon: r.epsilon,
                    sparsity: s,
                    count: st.count,
                    nmse_db: st.nmse_db,
                    avg_layers: st.avg_layers,
                })
            })
            .collect();
        write_csv_rows(&emit("sparsity.csv"), &sparsity)?;
        summary.comparison = compare_rows(&sweep, &layers);
        write_csv_rows(&emit("comparison.csv"), &summary.comparison)?;
        summary.sweep = sweep;
    }
    let path = emit("summary.json");
    summary.files = files;
    write_json(&path, &summary)?;
    Ok(summary)
}
