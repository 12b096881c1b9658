//! Experiment harness: configuration, method dispatch over seeded runs,
//! and report files.

pub mod config;
pub mod experiment;
pub mod report;

pub use config::{ExperimentConfig, Method, SemKind, TransportKind};
pub use experiment::{run_experiment, Aggregate, ExperimentReport, MeanSe, MetricsRow};

/// Plain-text table of aggregates.
pub fn format_aggregates(aggs: &[Aggregate]) -> String {
    let mut out = format!(
        "{:<10} {:>4} {:>4} {:>6} {:>5} {:>16} {:>14} {:>14}\n",
        "method", "d", "K", "n", "runs", "SHD", "TPR", "FDR"
    );
    for a in aggs {
        let cell = |m: &MeanSe, prec: usize| format!("{:.p$} ± {:.p$}", m.mean, m.se, p = prec);
        out.push_str(&format!(
            "{:<10} {:>4} {:>4} {:>6} {:>5} {:>16} {:>14} {:>14}{}\n",
            a.method,
            a.d,
            a.clients,
            a.n,
            a.runs,
            cell(&a.shd, 2),
            cell(&a.tpr, 3),
            cell(&a.fdr, 3),
            if a.failures > 0 {
                format!("  ({} failed)", a.failures)
            } else {
                String::new()
            }
        ));
    }
    out
}
