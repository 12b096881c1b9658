use std::time::Instant;

use fedbnsl::baselines::{
    aggregate_average, aggregate_voting, fit_all_local, run_alldata, select_best, Family,
    LocalEstimate,
};
use fedbnsl::consensus::ConvergenceTrace;
use fedbnsl::federation::{
    federated_linear, federated_mlp, federated_suffstats, FederationOptions,
};
use fedbnsl::graph::{
    evaluate, partition, sample_er_dag, sample_linear_sem, sample_mlp_sem, simulate, ClientDataset,
    DirectedGraph, Metrics, Sem, GROUND_TRUTH_HIDDEN,
};
use fedbnsl::rng::{seeded, stream};
use fedbnsl::Result;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method, SemKind};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// One method on one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodRun {
    pub run: usize,
    pub seed: u64,
    pub method: Method,
    pub metrics: Option<Metrics>,
    /// ADMM and standalone solves report whether their tolerances were met.
    pub converged: Option<bool>,
    pub wall_ms: f64,
    pub error: Option<String>,
    #[serde(skip)]
    pub graph: Option<DirectedGraph>,
    #[serde(skip)]
    pub trace: Option<ConvergenceTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    /// Sample standard deviation over `√count`; zero for a single value.
    pub se: f64,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        let k = values.len();
        if k == 0 {
            return Self {
                mean: f64::NAN,
                se: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / k as f64;
        let se = if k > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            (var / k as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se }
    }
}

/// Summary of one method at one `(d, K, n)` setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub d: usize,
    #[serde(rename = "K")]
    pub clients: usize,
    pub n: usize,
    pub runs: usize,
    pub failures: usize,
    pub shd: MeanSe,
    pub tpr: MeanSe,
    pub fdr: MeanSe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: String,
    pub config: ExperimentConfig,
    pub results: Vec<MethodRun>,
    pub aggregates: Vec<Aggregate>,
    pub wall_ms: f64,
}

impl ExperimentReport {
    pub fn failures(&self) -> impl Iterator<Item = &MethodRun> {
        self.results.iter().filter(|r| r.error.is_some())
    }
}

/// Truth graph, generating model and per-client data of run `seed`.
pub struct RunData {
    pub truth: DirectedGraph,
    pub sem: Sem,
    /// As partitioned, uncentered.
    pub raw: Vec<ClientDataset>,
}

pub fn generate(config: &ExperimentConfig, seed: u64) -> Result<RunData> {
    let truth = sample_er_dag(
        config.d,
        config.edge_count(),
        &mut seeded(seed, stream::GRAPH),
    )?;
    let mut wr = seeded(seed, stream::WEIGHTS);
    let sem = match config.sem {
        SemKind::Linear => Sem::Linear(sample_linear_sem(&truth, &mut wr)?),
        SemKind::Mlp => Sem::Mlp(sample_mlp_sem(&truth, GROUND_TRUTH_HIDDEN, &mut wr)?),
    };
    let x = simulate(&sem, config.sample_count(), &mut seeded(seed, stream::DATA))?;
    let raw = partition(&x, config.clients)?;
    Ok(RunData { truth, sem, raw })
}

fn family(kind: SemKind, seed: u64) -> Family {
    match kind {
        SemKind::Linear => Family::Linear,
        SemKind::Mlp => Family::Mlp { seed },
    }
}

struct Fitted {
    graph: DirectedGraph,
    converged: Option<bool>,
    trace: Option<ConvergenceTrace>,
}

fn fit_method(
    config: &ExperimentConfig,
    method: Method,
    seed: u64,
    data: &RunData,
    centered: &[ClientDataset],
    local: Option<&[LocalEstimate]>,
) -> Result<Fitted> {
    let fam = config.family_of(method);
    let cfg = config.admm_config(fam);
    let transport = config.transport();
    let opts = FederationOptions::default();
    let plain = |graph| Fitted {
        graph,
        converged: None,
        trace: None,
    };
    let local = || local.expect("local fits computed for aggregation methods");
    Ok(match method {
        Method::Admm => {
            let r = federated_linear(centered, &cfg, &transport, &opts)?;
            Fitted {
                graph: r.graph,
                converged: Some(r.trace.converged),
                trace: Some(r.trace),
            }
        }
        Method::AdmmMlp => {
            let r = federated_mlp(centered, &cfg, seed, &transport, &opts)?;
            Fitted {
                graph: r.graph,
                converged: Some(r.trace.converged),
                trace: Some(r.trace),
            }
        }
        Method::Voting => plain(aggregate_voting(local())?),
        Method::Avg => plain(aggregate_average(local(), cfg.threshold_tau)?),
        Method::Best => plain(select_best(local(), &data.truth)?),
        Method::Alldata => {
            let e = run_alldata(&data.raw, &cfg, family(fam, seed))?;
            Fitted {
                graph: e.graph,
                converged: Some(e.converged),
                trace: None,
            }
        }
        Method::Suffstats => {
            let e = federated_suffstats(&data.raw, &cfg, seed, &transport, &opts)?;
            Fitted {
                graph: e.graph,
                converged: Some(e.converged),
                trace: None,
            }
        }
    })
}

/// Runs every configured method on run `r` (seed `seed + r`). Errors are
/// recorded per method rather than propagated.
pub fn run_once(config: &ExperimentConfig, r: usize) -> Vec<MethodRun> {
    let seed = config.seed.wrapping_add(r as u64);
    let record = |method, start: Instant, res: Result<(Fitted, Metrics)>| match res {
        Ok((fit, metrics)) => MethodRun {
            run: r,
            seed,
            method,
            metrics: Some(metrics),
            converged: fit.converged,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            error: None,
            graph: Some(fit.graph),
            trace: fit.trace,
        },
        Err(e) => {
            log::warn!("run {r} ({method}): {e}");
            MethodRun {
                run: r,
                seed,
                method,
                metrics: None,
                converged: None,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
                error: Some(e.to_string()),
                graph: None,
                trace: None,
            }
        }
    };
    let start = Instant::now();
    let data = match generate(config, seed) {
        Ok(d) => d,
        Err(e) => {
            let msg = e.to_string();
            return config
                .method
                .iter()
                .map(|&m| record(m, start, Err(fedbnsl::Error::Argument(msg.clone()))))
                .collect();
        }
    };
    let centered: Vec<ClientDataset> = data.raw.iter().map(ClientDataset::centered).collect();

    // Local fits are shared by the aggregation methods; their cost is
    // charged to each of them.
    let local_start = Instant::now();
    let local = if config.method.iter().any(|m| m.uses_local_fits()) {
        let cfg = config.admm_config(config.sem);
        Some(fit_all_local(&centered, &cfg, family(config.sem, seed)).map_err(|e| e.to_string()))
    } else {
        None
    };
    let local_ms = local_start.elapsed().as_secs_f64() * 1e3;

    config
        .method
        .iter()
        .map(|&method| {
            let start = Instant::now();
            let res = (|| {
                let est = match (&local, method.uses_local_fits()) {
                    (Some(Err(msg)), true) => {
                        return Err(fedbnsl::Error::Model(format!("local fit failed: {msg}")))
                    }
                    (Some(Ok(est)), true) => Some(est.as_slice()),
                    _ => None,
                };
                let fit = fit_method(config, method, seed, &data, &centered, est)?;
                let metrics = evaluate(&fit.graph, &data.truth)?;
                Ok((fit, metrics))
            })();
            let mut run = record(method, start, res);
            if method.uses_local_fits() {
                run.wall_ms += local_ms;
            }
            run
        })
        .collect()
}

/// Groups successful runs by `(method, d, K, n)` in first-seen order.
pub fn aggregate(rows: &[MetricsRow]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, usize, usize, usize)> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.d, r.clients, r.n);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, d, clients, n)| {
            let group: Vec<&MetricsRow> = rows
                .iter()
                .filter(|r| r.method == method && r.d == d && r.clients == clients && r.n == n)
                .collect();
            let ok: Vec<&MetricsRow> = group.iter().copied().filter(|r| r.shd.is_some()).collect();
            let col = |f: &dyn Fn(&MetricsRow) -> Option<f64>| -> Vec<f64> {
                ok.iter().filter_map(|r| f(r)).collect()
            };
            Aggregate {
                runs: group.len(),
                failures: group.len() - ok.len(),
                shd: MeanSe::of(&col(&|r| r.shd.map(|v| v as f64))),
                tpr: MeanSe::of(&col(&|r| r.tpr)),
                fdr: MeanSe::of(&col(&|r| r.fdr)),
                method,
                d,
                clients,
                n,
            }
        })
        .collect()
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run: usize,
    pub method: String,
    pub d: usize,
    #[serde(rename = "K")]
    pub clients: usize,
    pub n: usize,
    pub shd: Option<usize>,
    pub tpr: Option<f64>,
    pub fdr: Option<f64>,
    pub wall_ms: f64,
}

pub fn metrics_rows(report: &ExperimentReport) -> Vec<MetricsRow> {
    let c = &report.config;
    report
        .results
        .iter()
        .map(|r| MetricsRow {
            run: r.run,
            method: r.method.name().to_string(),
            d: c.d,
            clients: c.clients,
            n: c.sample_count(),
            shd: r.metrics.map(|m| m.shd),
            tpr: r.metrics.map(|m| m.tpr),
            fdr: r.metrics.map(|m| m.fdr),
            wall_ms: r.wall_ms,
        })
        .collect()
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let mut results = Vec::new();
    for r in 0..config.runs {
        log::info!(
            "run {}/{} (seed {})",
            r + 1,
            config.runs,
            config.seed.wrapping_add(r as u64)
        );
        results.extend(run_once(config, r));
    }
    let mut report = ExperimentReport {
        version: VERSION.to_string(),
        config: config.clone(),
        results,
        aggregates: Vec::new(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    report.aggregates = aggregate(&metrics_rows(&report));
    Ok(report)
}
