use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qcnn_cli::checkpoint::Checkpoint;
use qcnn_cli::report::parse_sweep_csv;

fn qcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcnn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_idx(dir: &Path, prefix: &str, count: usize, seed: u32) {
    let mut images = vec![0, 0, 8, 3];
    for d in [count as u32, 28, 28] {
        images.extend_from_slice(&d.to_be_bytes());
    }
    let mut labels = vec![0, 0, 8, 1];
    labels.extend_from_slice(&(count as u32).to_be_bytes());
    let mut state = seed.wrapping_mul(2654435761).wrapping_add(1);
    for i in 0..count {
        let label = (i % 10) as u8;
        labels.push(label);
        // a bright bar whose position encodes the label, plus a little noise
        for r in 0..28 {
            for c in 0..28 {
                state = state.wrapping_mul(1664525).wrapping_add(1013904223);
                let noise = (state >> 28) as u8;
                let on = c / 3 == label as usize && (4..24).contains(&r);
                images.push(if on { 250 } else { noise });
            }
        }
    }
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    out: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let data = root.join("data");
        std::fs::create_dir_all(&data).unwrap();
        write_idx(&data, "train", 60, 1);
        write_idx(&data, "t10k", 30, 2);
        Self {
            _tmp: tmp,
            out: root.join("out"),
            root,
            data,
        }
    }

    fn config(&self, name: &str, body: &str) -> PathBuf {
        let path = self.root.join(format!("{name}.toml"));
        let text = format!(
            "run_id = \"{name}\"\ndata_dir = \"{}\"\nout_dir = \"{}\"\ntrain_eval_size = 60\n{body}",
            self.data.display(),
            self.out.display()
        );
        std::fs::write(&path, text).unwrap();
        path
    }
}

#[test]
fn default_config_dump_round_trips() {
    let o = qcnn(&["train", "--dump-default-config"]);
    assert_eq!(code(&o), 0);
    let cfg = qcnn_cli::config::RunConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!(cfg, qcnn_cli::config::RunConfig::default());
}

#[test]
fn unknown_config_key_exits_3_naming_it() {
    let fx = Fixture::new();
    let path = fx.config("bad", "learning_rat = 0.5\n");
    let o = qcnn(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn missing_data_exits_2_naming_the_file() {
    let fx = Fixture::new();
    std::fs::remove_file(fx.data.join("t10k-labels-idx1-ubyte")).unwrap();
    let path = fx.config("nodata", "max_iterations = 2\n");
    let o = qcnn(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("t10k-labels-idx1-ubyte"), "{}", stderr(&o));
}

#[test]
fn baseline_order_must_be_1_or_2() {
    let o = qcnn(&["baseline", "--order", "3"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn verify_passes_and_catches_injected_fault() {
    let o = qcnn(&["verify"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(!stdout(&o).contains("FAIL"));
    let o = qcnn(&["verify", "--inject-fault", "orthogonality"]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("projection_orthogonality"), "{}", stderr(&o));
}

#[test]
fn prepare_is_idempotent() {
    let fx = Fixture::new();
    let out = fx.root.join("prepared");
    let args = ["prepare", "--mnist-dir", fx.data.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert_eq!(code(&qcnn(&args)), 0);
    let first = std::fs::read(out.join("prepared-train.qcp")).unwrap();
    let o = qcnn(&args);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(out.join("prepared-train.qcp")).unwrap(), first);
    assert!(stdout(&o).contains("train: 60 examples"), "{}", stdout(&o));
}

#[test]
fn seeded_training_is_reproducible() {
    let fx = Fixture::new();
    let path = fx.config("rep", "max_iterations = 6\neval_every = 2\nbatch_size = 10\n");
    let run = || {
        let o = qcnn(&["train", "--config", path.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (
            std::fs::read(fx.out.join("rep.metrics.csv")).unwrap(),
            std::fs::read(fx.out.join("rep.ckpt")).unwrap(),
            stdout(&o),
        )
    };
    let (m1, c1, log) = run();
    let (m2, c2, _) = run();
    assert_eq!(m1, m2);
    assert_eq!(c1, c2);
    assert!(log.contains("param_count(4) = 120"), "{log}");
    // header comments, column header, and two rows per evaluation point
    let rows = String::from_utf8(m1).unwrap().lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 1 + 2 * 4);
}

#[test]
fn nonlinear_checkpoint_layout_and_exact_noise_refusal() {
    let fx = Fixture::new();
    let path = fx.config("nl", "mode = \"nonlinear\"\nnum_layers = 3\nmax_iterations = 1\nbatch_size = 5\n");
    let o = qcnn(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("param_count(8) = 32640"));
    let ckpt = fx.out.join("nl.ckpt");
    let ck = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(ck.model.filters.len(), 3);
    for f in &ck.model.filters {
        assert_eq!((f.raw().nrows(), f.raw().ncols()), (256, 256));
    }
    assert_eq!((ck.model.weights.nrows(), ck.model.weights.ncols()), (10, 4096));

    let c = ckpt.to_str().unwrap();
    let o = qcnn(&["eval", "--checkpoint", c, "--noise", "on", "--method", "exact"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let o = qcnn(&["eval", "--checkpoint", c, "--noise", "on", "--trajectories", "3", "--subsample", "10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = std::fs::read_to_string(fx.out.join("eval_report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "dataset,method,p,gamma,insertion,trajectories,seed,accuracy");
    assert!(lines[1].starts_with("mnist,trajectory,0.05,0.03,after_each_layer,3,0,"), "{}", lines[1]);
}

#[test]
fn linear_noisy_eval_uses_exact_channels() {
    let fx = Fixture::new();
    let path = fx.config("lin", "max_iterations = 20\nbatch_size = 10\nlearning_rate = 1.0\n");
    assert_eq!(code(&qcnn(&["train", "--config", path.to_str().unwrap()])), 0);
    let c = fx.out.join("lin.ckpt");
    let report = fx.root.join("r.csv");
    let args = |noise: &'static str| {
        vec![
            "eval".to_string(),
            "--checkpoint".into(),
            c.to_str().unwrap().into(),
            "--noise".into(),
            noise.into(),
            "--report".into(),
            report.to_str().unwrap().into(),
        ]
    };
    for noise in ["off", "on"] {
        let a = args(noise);
        let o = qcnn(&a.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("95% interval"));
    }
    let text = std::fs::read_to_string(&report).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("mnist,exact,0,0,"));
    assert!(rows[1].starts_with("mnist,exact,0.05,0.03,"));
}

#[test]
fn sweep_writes_csv_svg_and_best_checkpoint() {
    let fx = Fixture::new();
    let path = fx.config("sw", "max_iterations = 10\nbatch_size = 10\neval_every = 5\n");
    let o = qcnn(&["sweep", "--config", path.to_str().unwrap(), "--grid", "0.01,0.1,1.0", "--extra-seeds", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(fx.out.join("sw.sweep.csv")).unwrap();
    let (rows, chosen) = parse_sweep_csv(&csv).unwrap();
    assert_eq!(rows.len(), 3);
    let best = rows.iter().map(|r| r.final_train_accuracy).fold(f64::NEG_INFINITY, f64::max);
    let first_best = rows.iter().find(|r| r.final_train_accuracy == best).unwrap();
    assert_eq!(chosen, first_best.learning_rate);
    let svg = std::fs::read_to_string(fx.out.join("sw.sweep.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(fx.out.join("sw.best.ckpt").exists());
    let seeds = std::fs::read_to_string(fx.out.join("sw.seeds.csv")).unwrap();
    let data: Vec<&str> = seeds.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(data.len(), 2);
    assert_eq!(data.iter().filter(|l| l.ends_with(",1")).count(), 1);
}

#[test]
fn empty_grid_is_a_config_error() {
    let fx = Fixture::new();
    let path = fx.config("eg", "max_iterations = 2\n");
    let o = qcnn(&["sweep", "--config", path.to_str().unwrap(), "--grid", ""]);
    assert_eq!(code(&o), 3);
}

#[test]
fn clean_eval_matches_training_time_test_accuracy() {
    let fx = Fixture::new();
    let path = fx.config("ce", "max_iterations = 12\nbatch_size = 10\neval_every = 6\nlearning_rate = 1.0\n");
    assert_eq!(code(&qcnn(&["train", "--config", path.to_str().unwrap()])), 0);
    let metrics = std::fs::read_to_string(fx.out.join("ce.metrics.csv")).unwrap();
    let logged: f64 = metrics
        .lines()
        .filter(|l| l.starts_with("12,test,"))
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .next()
        .unwrap();
    let report = fx.root.join("ce.csv");
    let c = fx.out.join("ce.ckpt");
    let o = qcnn(&["eval", "--checkpoint", c.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let row = std::fs::read_to_string(&report).unwrap();
    let acc: f64 = row.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(acc, logged);
}

#[test]
fn baseline_logs_feature_dimension() {
    let fx = Fixture::new();
    let path = fx.config("b", "max_iterations = 3\nbatch_size = 10\n");
    for (order, dim) in [("1", "64"), ("2", "4096")] {
        let o = qcnn(&["baseline", "--order", order, "--config", path.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains(&format!("feature dimension {dim}")), "{}", stdout(&o));
    }
}
