use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::Serialize;

use adaptive_unfold::analysis::{
    evaluate, evaluate_layers, infer_batch, learned_pgd_check, sweep_epsilon, theorem3_experiment, write_sweep_csv, EvalReport,
    LearnedPgdCheck, SweepRow, Theorem3Report,
};
use adaptive_unfold::checkpoint::{load_checkpoint, save_checkpoint};
use adaptive_unfold::config::ExperimentConfig;
use adaptive_unfold::dataset::{read_batch, write_batch};
use adaptive_unfold::experiment::{compare_fixed_vs_adaptive, plan, run_experiment};
use adaptive_unfold::halting::{HaltingDesign, HaltingParams};
use adaptive_unfold::linalg::spectral_norm;
use adaptive_unfold::nets::{init_network, NetInit, NetKind};
use adaptive_unfold::problems::{gaussian_iid, gen_matrix, gen_measurement, gen_signal, gen_sparse_signal, Batch, BatchStream, MatrixKind, MeasurementMatrix, SupportPattern};
use adaptive_unfold::rng::{derive_seed, stream};
use adaptive_unfold::solvers::{ista_solve, oracle_adaptive_pgd, pgd_solve, theoretical_step_size, Constraint, ConstraintKind, DEFAULT_TOL};
use adaptive_unfold::training::{grad_check, train_fixed_range, train_two_stage, History, Objective};
use adaptive_unfold::{Error, Result};

/// Sparse recovery with iterative solvers and adaptive-depth unfolded networks.
#[derive(Parser)]
#[command(name = "adun", version)]
struct Cli {
    /// Master seed; overrides the config's seed where a config is used.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-sample parallel work.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (for `train`: the checkpoint file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write dataset batches.
    GenData(GenDataArgs),
    /// Train a network and write a checkpoint plus history.csv.
    Train(TrainArgs),
    /// Adaptive inference with per-sample exit layers and scores.
    Infer(InferArgs),
    /// Metrics at one epsilon and per layer.
    Eval(InferArgs),
    /// Metrics over a list of epsilons.
    Sweep(SweepArgs),
    /// Run a classical solver on one seeded instance.
    Solve(SolveArgs),
    /// Convergence-bound checks for learned and oracle PGD.
    VerifyTheory(TheoryArgs),
    /// Compare analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Full generate / train / sweep / report run.
    Experiment(ExperimentArgs),
    /// Fixed-depth against adaptive network at matched average depth.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    batches: u64,
    /// Draw from the held-out stream instead of the training stream.
    #[arg(long)]
    holdout: bool,
    /// Directory receiving the batch files (defaults to --out).
    #[arg(long)]
    dataset_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Per-layer error training only, no halting branch.
    #[arg(long)]
    fixed_only: bool,
    /// First training batch index.
    #[arg(long, default_value_t = 0)]
    start_batch: u64,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0.03)]
    epsilon: f64,
    #[arg(long, default_value_t = -10.0, allow_hyphen_values = true)]
    success_db: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 0.3, 0.2, 0.15, 0.1, 0.07, 0.05, 0.03, 0.02, 0.015, 0.005])]
    epsilons: Vec<f64>,
    #[arg(long, default_value_t = -10.0, allow_hyphen_values = true)]
    success_db: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Ista,
    PgdL1,
    PgdL0,
    OraclePgd,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long, value_enum)]
    algo: Algo,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 200)]
    m: usize,
    #[arg(long, default_value_t = 5)]
    s: usize,
    #[arg(long, allow_hyphen_values = true)]
    snr_db: Option<f64>,
    /// Step size; default 1/‖A‖² (ISTA, PGD) or the Gaussian-theory step (oracle PGD).
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    /// Constraint radius; default f(x) of the true signal.
    #[arg(long)]
    radius: Option<f64>,
    /// Iterations (oracle PGD: per phase).
    #[arg(long, default_value_t = 200)]
    iters: usize,
    /// Oracle PGD: sparsity of each signal.
    #[arg(long, value_delimiter = ',', default_values_t = vec![3, 5, 8])]
    sparsities: Vec<usize>,
    /// Oracle PGD constraint.
    #[arg(long, default_value = "l1")]
    oracle_kind: String,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 400)]
    m: usize,
    #[arg(long, default_value_t = 5)]
    s: usize,
    /// Sampled cone directions; the estimate uses every ordered pair.
    #[arg(long, default_value_t = 317)]
    directions: usize,
    #[arg(long, default_value_t = 30)]
    iters: usize,
    #[arg(long, allow_hyphen_values = true)]
    snr_db: Option<f64>,
    #[arg(long, default_value_t = 250)]
    oracle_n: usize,
    #[arg(long, default_value_t = 500)]
    oracle_m: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![3, 5, 8])]
    sparsities: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![200, 200, 200])]
    schedule: Vec<usize>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    m: usize,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value = "lista")]
    kind: String,
    #[arg(long, default_value = "learned_q")]
    design: String,
    #[arg(long)]
    unshared: bool,
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Validate and print the plan without computing.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    adaptive: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 0.3, 0.2, 0.15, 0.1, 0.07, 0.05, 0.03, 0.02, 0.015, 0.005])]
    epsilons: Vec<f64>,
    #[arg(long, default_value_t = -10.0, allow_hyphen_values = true)]
    success_db: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn load_config(cli: &Cli, path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::from_toml_str("")?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    write_text(path, &(text + "\n"))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData(args) => gen_data(cli, args),
        Cmd::Train(args) => train(cli, args),
        Cmd::Infer(args) => infer(cli, args),
        Cmd::Eval(args) => eval(cli, args),
        Cmd::Sweep(args) => sweep(cli, args),
        Cmd::Solve(args) => solve(cli, args),
        Cmd::VerifyTheory(args) => verify_theory(cli, args),
        Cmd::GradCheck(args) => grad_check_cmd(cli, args),
        Cmd::Experiment(args) => experiment(cli, args),
        Cmd::Compare(args) => compare(cli, args),
    }
}

fn gen_data(cli: &Cli, args: &GenDataArgs) -> Result<()> {
    let cfg = load_config(cli, args.config.as_deref())?;
    let dir = match &args.dataset_out {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            d.clone()
        }
        None => out_dir(cli)?,
    };
    let mut data = BatchStream::new(cfg.batch_config(args.batches as usize))?;
    if args.holdout {
        data = data.with_stream(stream::HOLDOUT);
    }
    write_text(&dir.join("resolved_config.toml"), &cfg.to_toml())?;
    for i in 0..args.batches {
        write_batch(&dir.join(format!("batch_{i:05}.adun")), &data.batch(i)?)?;
    }
    Ok(())
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let cfg = load_config(cli, args.config.as_deref())?;
    let ckpt = cli.out.clone().unwrap_or_else(|| PathBuf::from("checkpoint.adnw"));
    let dir = ckpt.parent().filter(|p| !p.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let data = BatchStream::new(cfg.batch_config(cfg.training_batches()))?;
    let a = data.matrix().entries.clone();
    let (mut net, mut hp) = match &args.resume {
        Some(p) => load_checkpoint(p)?,
        None => (init_network(cfg.network.kind, a.view(), cfg.network.fixed_depth, cfg.network.shared, cfg.net_init())?, None),
    };
    let mut history = History::default();
    if args.fixed_only || (hp.is_none() && args.resume.is_none()) {
        history = train_fixed_range(&cfg.train, &mut net, &data, args.start_batch, cfg.train.fixed_batches)?;
    }
    if !args.fixed_only {
        let mut start = args.start_batch + history.rows.len() as u64;
        if hp.is_none() {
            net = net.extended_to(cfg.network.adaptive_depth)?;
            let mut fresh = HaltingParams::new(cfg.halting.design, net.n, net.depth, derive_seed(cfg.seed, stream::NET_INIT))?;
            fresh.h_last = cfg.halting.h_last;
            hp = Some(fresh);
        } else if args.resume.is_some() && start == 0 {
            start = cfg.train.fixed_batches as u64;
        }
        let hp = hp.as_mut().expect("set above");
        let more = train_two_stage(&cfg.train, &mut net, hp, &data, start)?;
        history.rows.extend(more.rows);
    }
    save_checkpoint(&ckpt, &net, if args.fixed_only { None } else { hp.as_ref() })?;
    history.write_csv(&dir.join("history.csv"))?;
    write_text(&dir.join("resolved_config.toml"), &cfg.to_toml())
}

fn load_adaptive(path: &Path) -> Result<(adaptive_unfold::nets::UnfoldedNet, HaltingParams)> {
    let (net, hp) = load_checkpoint(path)?;
    let hp = hp.ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        msg: "checkpoint has no halting parameters".into(),
    })?;
    Ok((net, hp))
}

#[derive(Serialize)]
struct HistRow {
    layer: usize,
    count: usize,
}

fn infer(cli: &Cli, args: &InferArgs) -> Result<()> {
    let (net, hp) = load_adaptive(&args.checkpoint)?;
    let batch = read_batch(&args.dataset)?;
    let dir = out_dir(cli)?;
    let results = infer_batch(&net, &hp, &batch, args.epsilon)?;
    let path = dir.join("infer.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
    let mut header = vec!["sample_id".to_string(), "exit_layer".into(), "nmse_db".into()];
    header.extend((1..=net.depth).map(|t| format!("h{t}")));
    w.write_record(&header).map_err(|e| csv_io(&path, e))?;
    let mut counts = vec![0usize; net.depth];
    for (i, r) in results.iter().enumerate() {
        counts[r.exit_layer - 1] += 1;
        let mut rec = vec![i.to_string(), r.exit_layer.to_string(), format!("{:?}", to_db(r.nmse))];
        rec.extend(r.scores.iter().map(|h| format!("{h:?}")));
        w.write_record(&rec).map_err(|e| csv_io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let hist: Vec<HistRow> = counts.iter().enumerate().map(|(i, &c)| HistRow { layer: i + 1, count: c }).collect();
    write_rows(&dir.join("histogram.csv"), &hist)
}

fn to_db(r: f64) -> f64 {
    (10.0 * r.log10()).max(adaptive_unfold::analysis::NMSE_FLOOR_DB)
}

fn eval(cli: &Cli, args: &InferArgs) -> Result<()> {
    let (net, hp) = load_checkpoint(&args.checkpoint)?;
    let batch = read_batch(&args.dataset)?;
    let dir = out_dir(cli)?;
    write_rows(&dir.join("layers.csv"), &evaluate_layers(&net, &batch, args.success_db)?)?;
    if let Some(hp) = hp {
        let report = evaluate(&net, &hp, &batch, args.epsilon, args.success_db)?;
        write_rows(&dir.join("eval.csv"), &[SweepRow::from(&report)])?;
        write_json(&dir.join("eval.json"), &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    checkpoint: &'a Path,
    dataset: &'a Path,
    reports: &'a [EvalReport],
}

fn sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let (net, hp) = load_adaptive(&args.checkpoint)?;
    let batch = read_batch(&args.dataset)?;
    let dir = out_dir(cli)?;
    let reports = sweep_epsilon(&net, &hp, &batch, &args.epsilons, args.success_db)?;
    write_sweep_csv(&dir.join("sweep.csv"), &reports)?;
    write_json(
        &dir.join("sweep.json"),
        &SweepSummary {
            checkpoint: &args.checkpoint,
            dataset: &args.dataset,
            reports: &reports,
        },
    )
}

fn parse_kind(s: &str) -> Result<ConstraintKind> {
    match s {
        "l1" => Ok(ConstraintKind::L1Ball),
        "l0" => Ok(ConstraintKind::L0Ball),
        other => Err(Error::param(format!("unknown constraint {other:?}, expected l1 or l0"))),
    }
}

#[derive(Serialize)]
struct OracleRow {
    signal: usize,
    sparsity: usize,
    radius: f64,
    iterations: usize,
    final_error: f64,
}

fn solve(cli: &Cli, args: &SolveArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(2024);
    let dir = out_dir(cli)?;
    if let Algo::OraclePgd = args.algo {
        let kind = parse_kind(&args.oracle_kind)?;
        let a = Arc::new(MeasurementMatrix {
            entries: gaussian_iid(args.n, args.m, derive_seed(seed, 0))?,
            kind: MatrixKind::Gaussian,
            seed: derive_seed(seed, 0),
        });
        let beta = match args.beta {
            Some(b) => b,
            None => theoretical_step_size(args.n)?,
        };
        let mut instances = Vec::new();
        for (i, &s) in args.sparsities.iter().enumerate() {
            let sig = gen_sparse_signal(args.m, s, s, derive_seed(seed, 1 + i as u64))?;
            instances.push(gen_measurement(&a, sig, args.snr_db, derive_seed(seed, 100 + i as u64))?);
        }
        let schedule = vec![args.iters; instances.len()];
        let run = oracle_adaptive_pgd(&instances, kind, &schedule, beta)?;
        let rows: Vec<OracleRow> = run
            .traces
            .iter()
            .enumerate()
            .map(|(i, t)| OracleRow {
                signal: i,
                sparsity: args.sparsities[i],
                radius: run.radii[i],
                iterations: t.iterations(),
                final_error: t.final_error().unwrap_or(f64::NAN),
            })
            .collect();
        for (i, t) in run.traces.iter().enumerate() {
            t.write_csv(&dir.join(format!("trace_{i}.csv")))?;
        }
        write_rows(&dir.join("oracle.csv"), &rows)?;
        println!("total_error {:e}", run.total_error);
        return Ok(());
    }
    let a = Arc::new(gen_matrix(MatrixKind::Gaussian, args.n, args.m, derive_seed(seed, stream::MATRIX))?);
    let sig = gen_signal(args.m, args.s, args.s, false, SupportPattern::Uniform, derive_seed(seed, 1))?;
    let inst = gen_measurement(&a, sig, args.snr_db, derive_seed(seed, 2))?;
    let beta = match args.beta {
        Some(b) => b,
        None => 1.0 / spectral_norm(a.view()).powi(2),
    };
    let trace = match args.algo {
        Algo::Ista => ista_solve(&inst, args.lambda, beta, args.iters, DEFAULT_TOL)?,
        Algo::PgdL1 => {
            let r = args.radius.unwrap_or_else(|| ConstraintKind::L1Ball.value(inst.signal.values.view()));
            pgd_solve(&inst, Constraint::l1(r)?, beta, args.iters)?
        }
        Algo::PgdL0 => {
            let r = args.radius.map_or(args.s, |r| r.round() as usize);
            pgd_solve(&inst, Constraint::l0(r)?, beta, args.iters)?
        }
        Algo::OraclePgd => unreachable!("handled above"),
    };
    trace.write_csv(&dir.join("trace.csv"))?;
    println!("final_error {:e}", trace.final_error().unwrap_or(f64::NAN));
    Ok(())
}

#[derive(Serialize)]
struct TheorySummary {
    learned_pgd: LearnedPgdCheck,
    oracle: Theorem3Report,
}

#[derive(Serialize)]
struct Theorem3Row {
    signal: usize,
    sparsity: usize,
    radius: f64,
    budget: usize,
    oracle_error: f64,
    fixed_error: f64,
}

fn verify_theory(cli: &Cli, args: &TheoryArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(2024);
    let dir = out_dir(cli)?;
    let a = gaussian_iid(args.n, args.m, derive_seed(seed, stream::THEORY))?;
    let b: Array2<f64> = a.t().as_standard_layout().into_owned() / args.n as f64;
    let x = gen_sparse_signal(args.m, args.s, args.s, derive_seed(seed, 1))?.values;
    let noise = match args.snr_db {
        None => ndarray::Array1::zeros(args.n),
        Some(snr) => {
            let mm = Arc::new(MeasurementMatrix {
                entries: a.clone(),
                kind: MatrixKind::Gaussian,
                seed,
            });
            let sig = adaptive_unfold::problems::SparseSignal {
                values: x.clone(),
                sparsity: args.s,
            };
            gen_measurement(&mm, sig, Some(snr), derive_seed(seed, 2))?.noise()
        }
    };
    let check = learned_pgd_check(a.view(), b.view(), x.view(), noise.view(), ConstraintKind::L1Ball, args.directions, args.iters, derive_seed(seed, stream::CONE))?;
    write_rows(&dir.join("theorem2.csv"), &check.report.rows)?;
    let oracle = theorem3_experiment(args.oracle_n, args.oracle_m, &args.sparsities, &args.schedule, ConstraintKind::L1Ball, seed)?;
    let rows: Vec<Theorem3Row> = (0..args.sparsities.len())
        .map(|i| Theorem3Row {
            signal: i,
            sparsity: args.sparsities[i],
            radius: oracle.radii[i],
            budget: args.schedule[i],
            oracle_error: oracle.oracle_errors[i],
            fixed_error: oracle.fixed_errors[i],
        })
        .collect();
    write_rows(&dir.join("theorem3.csv"), &rows)?;
    println!(
        "rho {:.4} ({} pairs), contraction {:.4}, inconclusive {}; oracle total {:e}, fixed-R total {:e}",
        check.rho.value, check.rho.pairs, check.report.contraction, check.report.inconclusive, oracle.oracle_total_error, oracle.fixed_total_error
    );
    write_json(&dir.join("verify.json"), &TheorySummary { learned_pgd: check, oracle })
}

fn grad_check_cmd(cli: &Cli, args: &GradCheckArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(2024);
    let kind = match args.kind.as_str() {
        "lista" => NetKind::Lista,
        "lista_cpss" => NetKind::ListaCpss,
        k => return Err(Error::param(format!("unknown network kind {k:?}"))),
    };
    let design = match args.design.as_str() {
        "learned_q" => HaltingDesign::LearnedQ,
        "no_q" => HaltingDesign::NoQ,
        "mlp2" => HaltingDesign::Mlp2,
        d => return Err(Error::param(format!("unknown halting design {d:?}"))),
    };
    let data = BatchStream::new(adaptive_unfold::problems::BatchConfig {
        n: args.n,
        m: args.m,
        s_min: 1,
        s_max: (args.m / 4).max(1),
        batch_size: 4,
        n_batches: 1,
        snr_db: None,
        matrix_kind: MatrixKind::Gaussian,
        support: SupportPattern::Uniform,
        master_seed: seed,
    })?;
    let batch: Batch = data.batch(0)?;
    let net = init_network(kind, batch.matrix.view(), args.depth, !args.unshared, NetInit::default())?;
    let hp = HaltingParams::new(design, args.n, args.depth, derive_seed(seed, stream::NET_INIT))?;
    let blocks = grad_check(
        &net,
        Some(&hp),
        batch.matrix.view(),
        batch.signals.view(),
        batch.measurements.view(),
        Objective::Halting { tau: args.tau },
        args.step,
    )?;
    let mut worst: f64 = 0.0;
    println!("block,max_rel_error,checked,skipped");
    for b in &blocks {
        println!("{},{:e},{},{}", b.name, b.max_rel_error, b.checked, b.skipped);
        worst = worst.max(b.max_rel_error);
    }
    if worst > args.tol {
        return Err(Error::NumericDomain(format!("gradient mismatch {worst:e} exceeds {:e}", args.tol)));
    }
    Ok(())
}

fn experiment(cli: &Cli, args: &ExperimentArgs) -> Result<()> {
    let cfg = load_config(cli, args.config.as_deref())?;
    if args.dry_run {
        for (i, step) in plan(&cfg).iter().enumerate() {
            println!("{}. {step}", i + 1);
        }
        return Ok(());
    }
    let dir = out_dir(cli)?;
    let summary = run_experiment(&cfg, &dir)?;
    for f in &summary.files {
        println!("{}", dir.join(f).display());
    }
    Ok(())
}

fn compare(cli: &Cli, args: &CompareArgs) -> Result<()> {
    let (fixed, _) = load_checkpoint(&args.fixed)?;
    let (adaptive, hp) = load_adaptive(&args.adaptive)?;
    let batch = read_batch(&args.dataset)?;
    let dir = out_dir(cli)?;
    let rows = compare_fixed_vs_adaptive(&fixed, &adaptive, &hp, &batch, &args.epsilons, args.success_db)?;
    write_rows(&dir.join("comparison.csv"), &rows)
}
