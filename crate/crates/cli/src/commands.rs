//! Implementations of the subcommands, independent of argument parsing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use qcnn_core::data::{self, hex_digest, PreparedDataset, Split};
use qcnn_core::model::{self, QcnnModel};
use qcnn_core::noise::{self, NoiseConfig, NoiseMethod};
use qcnn_core::oracle::suites::{self, Fault, SuiteReport, VerifyOptions};
use qcnn_core::training::{self, MetricsLog, SweepRow};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::report::{self, NoiseReportRow, Stamp};
use crate::{CliError, EXIT_VERIFY};

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Loads one split from a directory of IDX files, using (and refreshing)
/// `prepared-<split>.qcp` next to them.
pub fn load_split(dir: &Path, split: Split) -> Result<PreparedDataset, CliError> {
    let (images, labels) = data::idx_paths(dir, split);
    for p in [&images, &labels] {
        if !p.exists() {
            return Err(CliError::data(format!("missing data file {}", p.display())));
        }
    }
    let cache = dir.join(format!("prepared-{}.qcp", split.as_str()));
    Ok(data::load_or_prepare(&images, &labels, split, &cache)?)
}

/// Ingests both splits of one dataset into `out`.
pub fn prepare(source: &Path, out: &Path) -> Result<Vec<PreparedDataset>, CliError> {
    ensure_dir(out)?;
    let mut prepared = Vec::new();
    for split in [Split::Train, Split::Test] {
        let (images, labels) = data::idx_paths(source, split);
        for p in [&images, &labels] {
            if !p.exists() {
                return Err(CliError::data(format!("missing data file {}", p.display())));
            }
        }
        let cache = out.join(format!("prepared-{}.qcp", split.as_str()));
        let d = data::load_or_prepare(&images, &labels, split, &cache)?;
        let p = d.provenance();
        println!(
            "{}: {} examples -> {}\n  images sha256 {}\n  labels sha256 {}\n  preprocess version {}",
            split.as_str(),
            d.len(),
            cache.display(),
            hex_digest(&p.image_sha256),
            hex_digest(&p.label_sha256),
            p.preprocess_version
        );
        prepared.push(d);
    }
    Ok(prepared)
}

pub fn stamp(cfg: &RunConfig) -> Stamp {
    Stamp {
        run_id: cfg.resolved_run_id(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
    }
}

/// Result of one training run, already written to disk.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub run_id: String,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub model: QcnnModel,
    pub log: MetricsLog,
    pub seconds: f64,
}

impl TrainedRun {
    pub fn final_accuracy(&self, split: Split) -> f64 {
        self.log.last(split).map(|r| r.accuracy).unwrap_or(f64::NAN)
    }
}

/// Prints the per-filter parameter counts and the head width.
pub fn describe_model(cfg: &RunConfig, model: &QcnnModel) {
    for (l, f) in model.filters.iter().enumerate() {
        println!(
            "layer {}: {}x{} Qfilter on qubits {:?}, param_count({}) = {}",
            l + 1,
            f.dim(),
            f.dim(),
            f.qubits(),
            f.arity(),
            f.param_count()
        );
    }
    println!(
        "{} {}: feature dimension {}, head {}x{}, {} trainable parameters",
        cfg.dataset,
        cfg.mode,
        model.weights.ncols(),
        model.weights.nrows(),
        model.weights.ncols(),
        model.param_count()
    );
}

/// Trains one configuration and writes `<run_id>.ckpt`, `<run_id>.metrics.csv`
/// and a row of `timing.csv` under `out`.
pub fn train_run(
    cfg: &RunConfig,
    out: &Path,
    train_set: &PreparedDataset,
    test_set: &PreparedDataset,
) -> Result<TrainedRun, CliError> {
    cfg.validate()?;
    ensure_dir(out)?;
    let qcfg = cfg.qcnn()?;
    let tcfg = cfg.train()?;
    let st = stamp(cfg);
    let model0 = QcnnModel::init(&qcfg, cfg.seed)?;
    describe_model(cfg, &model0);
    log::info!("{}: training {} steps at learning rate {}", st.run_id, tcfg.max_iterations, tcfg.learning_rate);

    let started = Instant::now();
    let (model, mut log) = training::train(model0, &qcfg, &tcfg, train_set, test_set)?;
    let seconds = started.elapsed().as_secs_f64();

    log.metadata = st.metadata();
    log.metadata.extend([
        ("dataset".to_string(), cfg.dataset.clone()),
        ("mode".to_string(), cfg.mode.clone()),
        ("num_layers".to_string(), qcfg.num_layers().to_string()),
        ("feature_dim".to_string(), qcfg.feature_dim().to_string()),
        (
            "filter_param_counts".to_string(),
            model.filters.iter().map(|f| f.param_count().to_string()).collect::<Vec<_>>().join(" "),
        ),
        ("grad_mode".to_string(), cfg.grad_mode.clone()),
    ]);
    let metrics = out.join(format!("{}.metrics.csv", st.run_id));
    log.write_csv(&metrics)?;
    let checkpoint = out.join(format!("{}.ckpt", st.run_id));
    Checkpoint {
        config: RunConfig {
            run_id: st.run_id.clone(),
            ..cfg.clone()
        },
        model: model.clone(),
    }
    .save(&checkpoint)?;
    append_timing(out, &st, cfg, seconds)?;

    println!(
        "{}: final train accuracy {:.4}, test accuracy {:.4} ({:.1} s)",
        st.run_id,
        log.last(Split::Train).map(|r| r.accuracy).unwrap_or(f64::NAN),
        log.last(Split::Test).map(|r| r.accuracy).unwrap_or(f64::NAN),
        seconds
    );
    Ok(TrainedRun {
        run_id: st.run_id,
        checkpoint,
        metrics,
        model,
        log,
        seconds,
    })
}

pub const TIMING_HEADER: &str = "run_id,learning_rate,seed,max_iterations,seconds";

fn append_timing(out: &Path, st: &Stamp, cfg: &RunConfig, seconds: f64) -> Result<(), CliError> {
    use std::io::Write;
    let path = out.join("timing.csv");
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| CliError::io(&path, e))?;
    let mut line = String::new();
    if fresh {
        line.push_str(TIMING_HEADER);
        line.push('\n');
    }
    line.push_str(&format!(
        "{},{},{},{},{:.1}\n",
        st.run_id, cfg.learning_rate, cfg.seed, cfg.max_iterations, seconds
    ));
    f.write_all(line.as_bytes()).map_err(|e| CliError::io(&path, e))
}

pub fn load_data_for(cfg: &RunConfig) -> Result<(PreparedDataset, PreparedDataset), CliError> {
    let dir = cfg.resolved_data_dir();
    Ok((load_split(&dir, Split::Train)?, load_split(&dir, Split::Test)?))
}

pub fn train(cfg: &RunConfig) -> Result<TrainedRun, CliError> {
    cfg.validate()?;
    let (train_set, test_set) = load_data_for(cfg)?;
    train_run(cfg, Path::new(&cfg.out_dir), &train_set, &test_set)
}

pub fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    let grid: Vec<f64> = text
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| CliError::config(format!("bad learning rate `{s}` in grid"))))
        .collect::<Result<_, _>>()?;
    if grid.is_empty() {
        return Err(CliError::from(qcnn_core::Error::EmptyGrid));
    }
    if let Some(bad) = grid.iter().find(|&&x| !(x > 0.0 && x.is_finite())) {
        return Err(CliError::config(format!("learning rates must be positive, got {bad}")));
    }
    Ok(grid)
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub chosen: usize,
    /// `(seed, train accuracy, test accuracy)` at the chosen rate, first entry the sweep run.
    pub seeds: Vec<(u64, f64, f64)>,
    pub best_checkpoint: PathBuf,
}

/// One run per learning rate, selection by final train accuracy, then
/// `extra_seeds` more runs at the chosen rate; the best of those by train
/// accuracy is copied to `<run_id>.best.ckpt`.
pub fn sweep(cfg: &RunConfig, grid: &[f64], extra_seeds: usize) -> Result<SweepResult, CliError> {
    cfg.validate()?;
    let (train_set, test_set) = load_data_for(cfg)?;
    let out = PathBuf::from(&cfg.out_dir);
    ensure_dir(&out)?;
    let base = cfg.resolved_run_id();
    let st = Stamp {
        run_id: base.clone(),
        ..stamp(cfg)
    };

    let mut rows = Vec::with_capacity(grid.len());
    let mut runs = Vec::with_capacity(grid.len());
    for &lr in grid {
        let run_cfg = RunConfig {
            learning_rate: lr,
            run_id: format!("{base}-lr{lr}"),
            ..cfg.clone()
        };
        let run = train_run(&run_cfg, &out, &train_set, &test_set)?;
        rows.push(SweepRow {
            learning_rate: lr,
            final_train_accuracy: run.final_accuracy(Split::Train),
            final_test_accuracy: run.final_accuracy(Split::Test),
        });
        runs.push(run);
    }
    let chosen = training::choose_learning_rate(&rows)?;
    let lr = rows[chosen].learning_rate;
    write(&out.join(format!("{base}.sweep.csv")), &report::sweep_csv(&st, &rows, chosen))?;
    let title = format!("{} {} {} layer(s): accuracy vs learning rate", cfg.dataset, cfg.mode, cfg.num_layers);
    write(&out.join(format!("{base}.sweep.svg")), &report::sweep_svg(&st, &title, &rows))?;
    println!("chosen learning rate {lr} (train accuracy {:.4})", rows[chosen].final_train_accuracy);

    let first = &runs[chosen];
    let mut seeds = vec![(cfg.seed, first.final_accuracy(Split::Train), first.final_accuracy(Split::Test))];
    let mut paths = vec![(first.checkpoint.clone(), first.metrics.clone())];
    for k in 1..=extra_seeds as u64 {
        let seed = cfg.seed + k;
        let run_cfg = RunConfig {
            learning_rate: lr,
            seed,
            run_id: format!("{base}-lr{lr}-seed{seed}"),
            ..cfg.clone()
        };
        let run = train_run(&run_cfg, &out, &train_set, &test_set)?;
        seeds.push((seed, run.final_accuracy(Split::Train), run.final_accuracy(Split::Test)));
        paths.push((run.checkpoint, run.metrics));
    }
    // first seed wins ties
    let mut pick = 0;
    for (i, s) in seeds.iter().enumerate() {
        if s.1 > seeds[pick].1 {
            pick = i;
        }
    }
    let best = &paths[pick];
    let best_checkpoint = out.join(format!("{base}.best.ckpt"));
    std::fs::copy(&best.0, &best_checkpoint).map_err(|e| CliError::io(&best.0, e))?;
    let best_metrics = out.join(format!("{base}.best.metrics.csv"));
    std::fs::copy(&best.1, &best_metrics).map_err(|e| CliError::io(&best.1, e))?;

    let mut seeds_csv = String::new();
    for (k, v) in st.metadata() {
        seeds_csv.push_str(&format!("# {k}: {v}\n"));
    }
    seeds_csv.push_str("seed,learning_rate,final_train_accuracy,final_test_accuracy,selected\n");
    for (i, &(seed, tr, te)) in seeds.iter().enumerate() {
        seeds_csv.push_str(&format!("{seed},{lr},{tr},{te},{}\n", u8::from(i == pick)));
    }
    write(&out.join(format!("{base}.seeds.csv")), &seeds_csv)?;
    println!("selected checkpoint {} -> {}", best.0.display(), best_checkpoint.display());
    Ok(SweepResult {
        rows,
        chosen,
        seeds,
        best_checkpoint,
    })
}

/// Noise settings for `eval`.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub split: Option<Split>,
    pub noisy: bool,
    pub p: Option<f64>,
    pub gamma: Option<f64>,
    pub insertion: Option<String>,
    /// `exact`, `trajectory`, or empty for the size-based default.
    pub method: Option<String>,
    pub trajectories: Option<usize>,
    pub seed: Option<u64>,
    pub subsample: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub row: NoiseReportRow,
    pub correct: usize,
    pub total: usize,
    pub interval: (f64, f64),
}

pub fn resolve_noise(cfg: &RunConfig, opts: &EvalOptions) -> Result<NoiseConfig, CliError> {
    let mut noise = cfg.noise()?;
    if !opts.noisy {
        noise.p_depolarizing = 0.0;
        noise.gamma_phase_damping = 0.0;
    } else {
        noise.p_depolarizing = opts.p.unwrap_or(noise.p_depolarizing);
        noise.gamma_phase_damping = opts.gamma.unwrap_or(noise.gamma_phase_damping);
    }
    if let Some(i) = &opts.insertion {
        noise.insertion = i.parse()?;
    }
    if let Some(t) = opts.trajectories {
        noise.trajectories = t;
    }
    if let Some(s) = opts.seed {
        noise.seed = s;
    }
    noise.validate()?;
    Ok(noise)
}

/// Evaluates an already-loaded checkpoint on `dataset`.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    dataset: &PreparedDataset,
    opts: &EvalOptions,
) -> Result<EvalResult, CliError> {
    let qcfg = ck.config.qcnn()?;
    let noise = resolve_noise(&ck.config, opts)?;
    let method = match opts.method.as_deref() {
        None | Some("") | Some("auto") => NoiseMethod::default_for(qcfg.n_qubits()),
        Some(m) => m.parse()?,
    };
    let workers = opts.workers.unwrap_or(ck.config.workers).max(1);
    let data = match opts.subsample {
        Some(n) => dataset.random_subset(n, noise.seed),
        None => dataset.clone(),
    };
    let (correct, total) = if qcfg.mode.is_baseline() {
        if opts.noisy {
            return Err(CliError::config("baseline models have no quantum layers to add noise to"));
        }
        let s = model::evaluate_summary(&ck.model, &qcfg, &data, workers)?;
        (s.correct, s.total)
    } else {
        let e = noise::noisy_evaluate(&ck.model, &qcfg, &data, &noise, method, workers)?;
        (e.correct, e.total)
    };
    let row = NoiseReportRow {
        dataset: ck.config.dataset.clone(),
        method: method.as_str().into(),
        p: noise.p_depolarizing,
        gamma: noise.gamma_phase_damping,
        insertion: noise.insertion.as_str().into(),
        trajectories: if method == NoiseMethod::Trajectory { noise.trajectories } else { 0 },
        seed: noise.seed,
        accuracy: correct as f64 / total as f64,
    };
    Ok(EvalResult {
        row,
        correct,
        total,
        interval: noise::binomial_interval95(correct, total),
    })
}

pub fn eval(checkpoint: &Path, opts: &EvalOptions) -> Result<EvalResult, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    ck.config.validate()?;
    let dir = opts.data_dir.clone().unwrap_or_else(|| ck.config.resolved_data_dir());
    let dataset = load_split(&dir, opts.split.unwrap_or(Split::Test))?;
    let result = evaluate_checkpoint(&ck, &dataset, opts)?;
    let report_path = opts.report.clone().unwrap_or_else(|| {
        checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("eval_report.csv")
    });
    report::append_noise_report(&report_path, &result.row)?;
    println!(
        "{} {} accuracy {:.4} ({} / {}), 95% interval [{:.4}, {:.4}]; p = {}, gamma = {}, method {}, insertion {}",
        ck.config.resolved_run_id(),
        opts.split.unwrap_or(Split::Test).as_str(),
        result.row.accuracy,
        result.correct,
        result.total,
        result.interval.0,
        result.interval.1,
        result.row.p,
        result.row.gamma,
        result.row.method,
        result.row.insertion
    );
    Ok(result)
}

pub fn baseline_config(base: &RunConfig, order: &str, dataset: Option<&str>) -> Result<RunConfig, CliError> {
    let mode = match order {
        "1" => "baseline_order1",
        "2" => "baseline_order2",
        other => return Err(CliError::config(format!("--order must be 1 or 2, got `{other}`"))),
    };
    let cfg = RunConfig {
        mode: mode.into(),
        num_layers: 0,
        layer_subsets: Vec::new(),
        dataset: dataset.map(str::to_string).unwrap_or_else(|| base.dataset.clone()),
        ..base.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn verify(fault: Option<Fault>, seed: Option<u64>) -> Result<Vec<SuiteReport>, CliError> {
    let opts = VerifyOptions {
        fault,
        seed: seed.unwrap_or(VerifyOptions::default().seed),
    };
    let started = Instant::now();
    let reports = suites::run_all(&opts)?;
    println!("{:<44} {:>9} {:>12} {:>10} {:>8} {:>7}", "suite", "instances", "max_error", "tolerance", "seconds", "result");
    for r in &reports {
        println!(
            "{:<44} {:>9} {:>12.3e} {:>10.1e} {:>8.2} {:>7}",
            r.name,
            r.instances,
            r.max_error,
            r.tolerance,
            r.seconds,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    println!("total {:.1} s", started.elapsed().as_secs_f64());
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if !failed.is_empty() {
        return Err(CliError::new(EXIT_VERIFY, format!("verification failed: {}", failed.join(", "))));
    }
    Ok(reports)
}
