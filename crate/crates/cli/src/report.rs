//! CSV and SVG outputs.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use qcnn_core::training::SweepRow;

use crate::CliError;

/// Identifies the run an artifact came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamp {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn metadata(&self) -> Vec<(String, String)> {
        vec![
            ("run_id".into(), self.run_id.clone()),
            ("config_hash".into(), self.config_hash.clone()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

pub const SWEEP_HEADER: &str = "learning_rate,final_train_accuracy,final_test_accuracy";

pub fn sweep_csv(stamp: &Stamp, rows: &[SweepRow], chosen: usize) -> String {
    let mut out = String::new();
    for (k, v) in stamp.metadata() {
        writeln!(out, "# {k}: {v}").unwrap();
    }
    writeln!(out, "{SWEEP_HEADER}").unwrap();
    for r in rows {
        writeln!(out, "{},{},{}", r.learning_rate, r.final_train_accuracy, r.final_test_accuracy).unwrap();
    }
    writeln!(out, "# chosen_lr: {}", rows[chosen].learning_rate).unwrap();
    out
}

/// Parses the data rows and the chosen learning rate back out of [`sweep_csv`].
pub fn parse_sweep_csv(text: &str) -> Result<(Vec<SweepRow>, f64), String> {
    let mut rows = Vec::new();
    let mut chosen = None;
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("# chosen_lr: ") {
            chosen = Some(v.parse::<f64>().map_err(|e| e.to_string())?);
        } else if line.starts_with('#') || line == SWEEP_HEADER || line.is_empty() {
            continue;
        } else {
            let f: Vec<f64> = line
                .split(',')
                .map(|x| x.parse::<f64>().map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()?;
            if f.len() != 3 {
                return Err(format!("bad sweep row `{line}`"));
            }
            rows.push(SweepRow {
                learning_rate: f[0],
                final_train_accuracy: f[1],
                final_test_accuracy: f[2],
            });
        }
    }
    Ok((rows, chosen.ok_or("missing chosen_lr footer")?))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Accuracy against learning rate (log axis), train and test series.
pub fn sweep_svg(stamp: &Stamp, title: &str, rows: &[SweepRow]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 60.0);
    let xs: Vec<f64> = rows.iter().map(|r| r.learning_rate.log10()).collect();
    let (xmin, xmax) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (xmin, xmax) = if xmax > xmin { (xmin, xmax) } else { (xmin - 0.5, xmax + 0.5) };
    let accs = rows.iter().flat_map(|r| [r.final_train_accuracy, r.final_test_accuracy]);
    let lo = accs.fold(1.0f64, f64::min);
    let ymin = (lo * 10.0).floor() / 10.0;
    let ymin = ymin.clamp(0.0, 0.9);
    let px = |x: f64| left + (x - xmin) / (xmax - xmin) * (w - left - right);
    let py = |y: f64| top + (1.0 - (y - ymin) / (1.0 - ymin)) * (h - top - bottom);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, "<!-- run_id: {} config_hash: {} seed: {} -->", escape(&stamp.run_id), stamp.config_hash, stamp.seed).unwrap();
    writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title)).unwrap();
    // axes
    writeln!(s, r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - bottom, w - right, h - bottom).unwrap();
    writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, h - bottom).unwrap();
    for k in 0..=5 {
        let y = ymin + (1.0 - ymin) * k as f64 / 5.0;
        writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.2}</text>"#, left - 6.0, py(y) + 4.0, y).unwrap();
    }
    for r in rows {
        let x = px(r.learning_rate.log10());
        writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#, h - bottom + 18.0, r.learning_rate).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">learning rate</text>"#, (left + w - right) / 2.0, h - 16.0).unwrap();
    writeln!(s, r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">accuracy</text>"#, (top + h - bottom) / 2.0, (top + h - bottom) / 2.0).unwrap();
    for (name, color, pick) in [
        ("train", "#1f77b4", (|r: &SweepRow| r.final_train_accuracy) as fn(&SweepRow) -> f64),
        ("test", "#d62728", |r: &SweepRow| r.final_test_accuracy),
    ] {
        let points: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.1},{:.1}", px(r.learning_rate.log10()), py(pick(r))))
            .collect();
        writeln!(s, r#"<polyline class="series" data-series="{name}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" ")).unwrap();
        for p in &points {
            let (x, y) = p.split_once(',').unwrap();
            writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#).unwrap();
        }
    }
    let ly = top + 10.0;
    for (i, (name, color)) in [("train", "#1f77b4"), ("test", "#d62728")].iter().enumerate() {
        let lx = w - right - 90.0;
        let y = ly + 18.0 * i as f64;
        writeln!(s, r#"<line x1="{lx}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{name}</text>"#, lx + 26.0, y + 4.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

pub const NOISE_REPORT_HEADER: &str = "dataset,method,p,gamma,insertion,trajectories,seed,accuracy";

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseReportRow {
    pub dataset: String,
    pub method: String,
    pub p: f64,
    pub gamma: f64,
    pub insertion: String,
    pub trajectories: usize,
    pub seed: u64,
    pub accuracy: f64,
}

impl NoiseReportRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.dataset, self.method, self.p, self.gamma, self.insertion, self.trajectories, self.seed, self.accuracy
        )
    }
}

/// Appends a row, writing the header first if the file is new.
pub fn append_noise_report(path: &Path, row: &NoiseReportRow) -> Result<(), CliError> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut text = String::new();
    if fresh {
        writeln!(text, "{NOISE_REPORT_HEADER}").unwrap();
    }
    writeln!(text, "{}", row.to_csv_line()).unwrap();
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}
