use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use fedbnsl::{Error, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::experiment::{metrics_rows, Aggregate, ExperimentReport, MetricsRow};

pub const METRICS_HEADER: [&str; 9] = [
    "run", "method", "d", "K", "n", "shd", "tpr", "fdr", "wall_ms",
];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(create(path)?);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != METRICS_HEADER {
        return Err(Error::Argument(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[derive(Serialize)]
struct Failure<'a> {
    run: usize,
    method: &'a str,
    error: &'a str,
}

#[derive(Serialize)]
struct Summary<'a> {
    version: &'a str,
    config: &'a ExperimentConfig,
    aggregates: &'a [Aggregate],
    failures: Vec<Failure<'a>>,
    wall_ms: f64,
}

pub fn write_summary(path: &Path, report: &ExperimentReport) -> Result<()> {
    let summary = Summary {
        version: &report.version,
        config: &report.config,
        aggregates: &report.aggregates,
        failures: report
            .failures()
            .map(|r| Failure {
                run: r.run,
                method: r.method.name(),
                error: r.error.as_deref().unwrap_or_default(),
            })
            .collect(),
        wall_ms: report.wall_ms,
    };
    serde_json::to_writer_pretty(create(path)?, &summary)?;
    Ok(())
}

/// Writes `metrics.csv`, `summary.json`, `config.toml` and one
/// `trace_{method}_run{r}.csv` per traced method and run into `dir`.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let metrics = dir.join("metrics.csv");
    write_metrics(&metrics, &metrics_rows(report))?;
    written.push(metrics);
    for r in &report.results {
        if let Some(trace) = &r.trace {
            let path = dir.join(format!("trace_{}_run{}.csv", r.method.name(), r.run));
            trace.save_csv(&path)?;
            written.push(path);
        }
    }
    let summary = dir.join("summary.json");
    write_summary(&summary, report)?;
    written.push(summary);
    let config = dir.join("config.toml");
    fs::write(&config, report.config.to_toml()).map_err(io_err(&config))?;
    written.push(config);
    Ok(written)
}

pub fn write_aggregates(path: &Path, aggs: &[Aggregate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record([
        "method", "d", "K", "n", "runs", "failures", "shd_mean", "shd_se", "tpr_mean", "tpr_se",
        "fdr_mean", "fdr_se",
    ])?;
    for a in aggs {
        w.write_record([
            a.method.clone(),
            a.d.to_string(),
            a.clients.to_string(),
            a.n.to_string(),
            a.runs.to_string(),
            a.failures.to_string(),
            a.shd.mean.to_string(),
            a.shd.se.to_string(),
            a.tpr.mean.to_string(),
            a.tpr.se.to_string(),
            a.fdr.mean.to_string(),
            a.fdr.se.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

const PALETTE: [&str; 7] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf",
];

/// Line chart of mean SHD (± standard error) against K, one line per
/// method. K values are spaced evenly in sorted order.
pub fn shd_vs_k_svg(aggs: &[Aggregate]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 20.0, 50.0);
    let mut ks: Vec<usize> = aggs.iter().map(|a| a.clients).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut methods: Vec<&str> = Vec::new();
    for a in aggs {
        if !methods.contains(&a.method.as_str()) {
            methods.push(&a.method);
        }
    }
    let y_max = aggs
        .iter()
        .filter(|a| a.shd.mean.is_finite())
        .map(|a| a.shd.mean + a.shd.se.max(0.0))
        .fold(1.0_f64, f64::max)
        * 1.1;
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x_of = |k: usize| {
        let i = ks.iter().position(|&v| v == k).unwrap_or(0);
        if ks.len() == 1 {
            left + pw / 2.0
        } else {
            left + pw * i as f64 / (ks.len() - 1) as f64
        }
    };
    let y_of = |v: f64| top + ph * (1.0 - v / y_max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{left},{top} V{} H{}" stroke="black" fill="none"/>"#,
        top + ph,
        left + pw
    );
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y:.1}" x2="{left}" y2="{y:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            left - 4.0,
            left - 6.0,
            y + 4.0
        );
    }
    for &k in &ks {
        let x = x_of(k);
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{k}</text>"#,
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">K</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">SHD</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (mi, method) in methods.iter().enumerate() {
        let color = PALETTE[mi % PALETTE.len()];
        let mut pts: Vec<&Aggregate> = aggs
            .iter()
            .filter(|a| a.method == *method && a.shd.mean.is_finite())
            .collect();
        pts.sort_by_key(|a| a.clients);
        let path: Vec<String> = pts
            .iter()
            .map(|a| format!("{:.1},{:.1}", x_of(a.clients), y_of(a.shd.mean)))
            .collect();
        if !path.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
                path.join(" ")
            );
        }
        for a in &pts {
            let x = x_of(a.clients);
            let _ = writeln!(
                s,
                r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{color}"/><circle cx="{x:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                y_of(a.shd.mean - a.shd.se),
                y_of(a.shd.mean + a.shd.se),
                y_of(a.shd.mean)
            );
        }
        let ly = top + 10.0 + 18.0 * mi as f64;
        let lx = w - right + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(method)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
