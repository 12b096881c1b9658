use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use fedbnsl::admm_linear::{LinearClient, LinearServer};
use fedbnsl::admm_mlp::{mlp_server, MlpClient};
use fedbnsl::consensus::{ConsensusClient, ConsensusOutcome, ConsensusServer, ModelFamily};
use fedbnsl::federation::{bind_address, join, serve, FederationOptions, TcpClient, TcpServer};
use fedbnsl::graph::{
    default_names, evaluate, load_csv, load_edges, save_csv, save_edges, threshold_graph,
    ClientDataset, Table,
};
use fedbnsl::{Error, Result};
use fedbnsl_cli::config::{ExperimentConfig, Method, TransportKind};
use fedbnsl_cli::experiment::{aggregate, generate, run_experiment};
use fedbnsl_cli::format_aggregates;
use fedbnsl_cli::report::{emit_report, read_metrics, shd_vs_k_svg, write_aggregates};

#[derive(Parser)]
#[command(
    name = "fedbnsl",
    version,
    about = "Federated DAG structure learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, value_parser = ["inproc", "tcp"])]
    transport: Option<String>,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.runs {
            cfg.runs = r;
        }
        match self.transport.as_deref() {
            Some("tcp") => cfg.transport = TransportKind::Tcp,
            Some(_) => {
                cfg.transport = TransportKind::Inproc;
                cfg.bind = None;
            }
            None => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic data, per-client partitions and the true edge list.
    Generate {
        #[command(flatten)]
        cfg: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment and write metrics, traces and a summary.
    Run {
        #[command(flatten)]
        cfg: Overrides,
        #[arg(long)]
        out: PathBuf,
        /// Also render SHD against K as SVG.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Act as the ADMM server for `K` TCP clients.
    Serve {
        #[command(flatten)]
        cfg: Overrides,
        #[arg(long)]
        out: PathBuf,
        /// Listen address; `FBNSL_BIND` takes precedence.
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        /// Seconds to wait for a round's updates.
        #[arg(long, default_value_t = 60)]
        timeout: u64,
        /// True edge list, for reporting metrics.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Act as one ADMM client holding a CSV of local samples.
    Join {
        #[command(flatten)]
        cfg: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        client_id: u32,
        #[arg(long, default_value = "127.0.0.1:7878")]
        connect: String,
    },
    /// Re-aggregate one or more metrics.csv files.
    Report {
        /// metrics.csv files or directories containing one.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    for r in 0..cfg.runs {
        let dir = if cfg.runs == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("run{r}"))
        };
        create_dir(&dir)?;
        let data = generate(cfg, cfg.seed.wrapping_add(r as u64))?;
        let names = default_names(cfg.d);
        let blocks: Vec<_> = data.raw.iter().map(|c| &c.data).collect();
        let pooled = fedbnsl::numerics::Matrix::vstack(&blocks)?;
        save_csv(
            &dir.join("data.csv"),
            &Table {
                names: names.clone(),
                data: pooled,
            },
        )?;
        for c in &data.raw {
            save_csv(
                &dir.join(format!("client{}.csv", c.client_id)),
                &Table {
                    names: names.clone(),
                    data: c.data.clone(),
                },
            )?;
        }
        save_edges(&dir.join("truth.csv"), &data.truth)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_run(cfg: &ExperimentConfig, out: &Path, svg: Option<&Path>) -> Result<()> {
    let report = run_experiment(cfg)?;
    emit_report(&report, out)?;
    print!("{}", format_aggregates(&report.aggregates));
    let failed = report.failures().count();
    if failed > 0 {
        eprintln!("{failed} method run(s) failed; see summary.json");
    }
    if let Some(path) = svg {
        write_file(path, &shd_vs_k_svg(&report.aggregates))?;
    }
    println!("results in {}", out.display());
    Ok(())
}

/// The consensus method a `serve`/`join` pair runs.
fn federated_method(cfg: &ExperimentConfig) -> Result<Method> {
    cfg.method
        .iter()
        .copied()
        .find(|m| matches!(m, Method::Admm | Method::AdmmMlp))
        .ok_or_else(|| Error::Config("serve/join need method \"admm\" or \"admm-mlp\"".into()))
}

fn cmd_serve(
    cfg: &ExperimentConfig,
    out: &Path,
    bind: &str,
    timeout: u64,
    truth: Option<&Path>,
) -> Result<()> {
    let method = federated_method(cfg)?;
    let admm = cfg.admm_config(cfg.family_of(method));
    let addr = bind_address(bind);
    let mut link = TcpServer::bind(addr.as_str(), cfg.clients)?;
    println!(
        "listening on {} for {} clients",
        link.local_addr(),
        cfg.clients
    );
    let ids: Vec<u32> = (0..cfg.clients as u32).collect();
    let opts = FederationOptions {
        timeout: Duration::from_secs(timeout),
    };
    let outcome: ConsensusOutcome = match method {
        Method::Admm => {
            let server = ConsensusServer::new(
                LinearServer::new(cfg.d, admm.lambda, admm.global_solver),
                cfg.clients,
                &admm,
                ModelFamily::Linear,
            )?;
            serve(&mut link, server, &ids, &opts)?
        }
        _ => {
            let server = ConsensusServer::new(
                mlp_server(cfg.d, &admm, cfg.seed),
                cfg.clients,
                &admm,
                ModelFamily::Mlp,
            )?;
            serve(&mut link, server, &ids, &opts)?
        }
    };
    create_dir(out)?;
    let graph = threshold_graph(&outcome.adjacency, admm.threshold_tau);
    outcome.trace.save_csv(&out.join("trace.csv"))?;
    save_csv(
        &out.join("weights.csv"),
        &Table {
            names: default_names(cfg.d),
            data: outcome.adjacency.clone(),
        },
    )?;
    save_edges(&out.join("graph.csv"), &graph)?;
    let last = outcome.trace.last();
    println!(
        "{} rounds, converged: {}, h = {:e}, edges: {}",
        outcome.trace.records.len(),
        outcome.trace.converged,
        last.map_or(f64::NAN, |r| r.h),
        graph.edge_count()
    );
    if let Some(path) = truth {
        let m = evaluate(&graph, &load_edges(path, cfg.d)?)?;
        println!("SHD {}  TPR {:.3}  FDR {:.3}", m.shd, m.tpr, m.fdr);
    }
    Ok(())
}

fn cmd_join(cfg: &ExperimentConfig, data: &Path, client_id: u32, connect: &str) -> Result<()> {
    let method = federated_method(cfg)?;
    let admm = cfg.admm_config(cfg.family_of(method));
    let table = load_csv(data)?;
    if table.data.cols() != cfg.d {
        return Err(Error::Dimension(format!(
            "{} has {} columns, config says d = {}",
            data.display(),
            table.data.cols(),
            cfg.d
        )));
    }
    let ds = ClientDataset::new(client_id, table.data).centered();
    let mut link = TcpClient::connect(connect, Duration::from_secs(60))?;
    let n = ds.sample_count() as u64;
    let report = match method {
        Method::Admm => join(&mut link, client_id, n, |total| {
            Ok(ConsensusClient::new(
                client_id,
                LinearClient::new(&ds, total),
                &admm,
            ))
        })?,
        _ => join(&mut link, client_id, n, |total| {
            let model = MlpClient::new(&ds, total, admm.hidden_units, admm.local_solver);
            Ok(ConsensusClient::new(client_id, model, &admm))
        })?,
    };
    println!(
        "client {client_id}: {} rounds, total n = {}",
        report.rounds, report.total_count
    );
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], out: Option<&Path>, svg: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for input in inputs {
        let path = if input.is_dir() {
            input.join("metrics.csv")
        } else {
            input.clone()
        };
        rows.extend(read_metrics(&path)?);
    }
    let aggs = aggregate(&rows);
    print!("{}", format_aggregates(&aggs));
    if let Some(dir) = out {
        create_dir(dir)?;
        write_aggregates(&dir.join("aggregate.csv"), &aggs)?;
    }
    if let Some(path) = svg {
        write_file(path, &shd_vs_k_svg(&aggs))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { cfg, out } => cfg.load().and_then(|c| cmd_generate(&c, out)),
        Command::Run { cfg, out, svg } => cfg.load().and_then(|c| cmd_run(&c, out, svg.as_deref())),
        Command::Serve {
            cfg,
            out,
            bind,
            timeout,
            truth,
        } => cfg
            .load()
            .and_then(|c| cmd_serve(&c, out, bind, *timeout, truth.as_deref())),
        Command::Join {
            cfg,
            data,
            client_id,
            connect,
        } => cfg
            .load()
            .and_then(|c| cmd_join(&c, data, *client_id, connect)),
        Command::Report { inputs, out, svg } => cmd_report(inputs, out.as_deref(), svg.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
