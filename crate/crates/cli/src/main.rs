mod config;
mod error;
mod ingest;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use partmle::audit::{audit_transcript, AuditContext, LeakageReport};
use partmle::bench::{grid, run_bench, to_csv, BenchConfig};
use partmle::mvn::select_rows;
use partmle::optimizer::{fit, FitResult, Objective};
use partmle::oracle::assemble_pooled;
use partmle::partition::{plan_subroutines, run_complex, Federation, FederationOptions, PartitionLayout};
use partmle::protocol::noise::{NoiseLedger, DEFAULT_NOISE_SCALE};
use partmle::protocol::{CentralNode, DataNode, NodeId, Transcript};
use partmle::transport::{NodeServer, TcpConfig, TcpFederation, TransportKind, VerticalTransport};
use partmle::{Error, ParameterSet};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::ingest::{ingest, ingest_node, read_csv};

/// Multivariate-normal estimation over partitioned data.
#[derive(Debug, Parser)]
#[command(name = "partmle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the configured model and write the estimates.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Disable masking (debugging only).
        #[arg(long)]
        zero_noise: bool,
    },
    /// Time secure evaluations over an (n, p, K) grid.
    Bench(BenchArgs),
    /// Run one evaluation (or load a recorded transcript) and audit it.
    Audit {
        #[arg(long)]
        config: PathBuf,
        /// Audit this JSON-lines transcript instead of running an evaluation.
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// Save the audited transcript here.
        #[arg(long)]
        save_transcript: Option<PathBuf>,
        /// Write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        zero_noise: bool,
    },
    /// Serve one data node of a vertical layout over TCP.
    Node(NodeArgs),
    /// Read and align node CSVs without running anything.
    IngestCheck {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    p: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    k: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_NOISE_SCALE)]
    noise_scale: f64,
    /// Largest accepted n·p per cell.
    #[arg(long, default_value_t = 5_000_000)]
    max_cells: usize,
    /// CSV output file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct NodeArgs {
    #[arg(long)]
    layout: PathBuf,
    /// This node's name in the layout.
    #[arg(long)]
    name: String,
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, default_value = "id")]
    id_column: String,
    #[arg(long)]
    impute: bool,
    #[arg(long)]
    listen: SocketAddr,
    /// Peer addresses as `CN=host:port` or `DN2=host:port`.
    #[arg(long = "peer", value_parser = parse_peer)]
    peers: Vec<(NodeId, SocketAddr)>,
    #[arg(long, default_value_t = DEFAULT_NOISE_SCALE)]
    noise_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
}

fn parse_peer(s: &str) -> Result<(NodeId, SocketAddr), String> {
    let (id, addr) = s.split_once('=').ok_or_else(|| format!("expected ID=ADDR, got {s:?}"))?;
    let id: NodeId = id.parse().map_err(|e: Error| e.to_string())?;
    let addr: SocketAddr = addr.parse().map_err(|e| format!("{addr:?}: {e}"))?;
    Ok((id, addr))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PARTMLE_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Estimate { config, out, zero_noise } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.zero_noise |= zero_noise;
            cmd_estimate(&cfg, out.as_deref())
        }
        Command::Bench(args) => cmd_bench(&args),
        Command::Audit { config, transcript, save_transcript, json, zero_noise } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.zero_noise |= zero_noise;
            cmd_audit(&cfg, transcript.as_deref(), save_transcript.as_deref(), json.as_deref())
        }
        Command::Node(args) => cmd_node(&args),
        Command::IngestCheck { config } => cmd_ingest_check(&RunConfig::load(&config)?),
    }
}

/// Objective over data nodes that run as separate daemons.
struct RemoteObjective {
    transport: TcpFederation,
    counter: u64,
}

impl Objective for RemoteObjective {
    fn log_likelihood(&mut self, params: &ParameterSet) -> partmle::Result<f64> {
        let id = self.counter;
        self.counter += 1;
        Ok(self.transport.run_evaluation(id, params)?.ll)
    }
}

fn tcp_config(cfg: &RunConfig) -> TcpConfig {
    match &cfg.transport {
        TransportKind::Tcp(c) => c.clone(),
        TransportKind::InProcess => TcpConfig::default(),
    }
}

fn remote_objective(cfg: &RunConfig, layout: &PartitionLayout) -> CliResult<RemoteObjective> {
    let plan = plan_subroutines(layout)?;
    if plan.bands.len() != 1 || plan.bands[0].members.len() < 2 {
        return Err(Error::Layout("remote data nodes need a vertical layout with at least 2 nodes".into()).into());
    }
    let members = &plan.bands[0].members;
    let chain_cols: Vec<Vec<usize>> = members.iter().map(|m| m.cols.clone()).collect();
    let mut endpoints = HashMap::new();
    for (pos, m) in members.iter().enumerate() {
        let name = &layout.nodes[m.node].name;
        let src = cfg.nodes.get(name).ok_or_else(|| CliError::Input(format!("no endpoint for node {name}")))?;
        endpoints.insert(NodeId::Data(pos as u32 + 1), src.endpoint.expect("checked remote"));
        log::info!("{name} is DN{}", pos + 1);
    }
    let bind = cfg.central_listen.ok_or_else(|| CliError::Input("remote nodes need central_listen".into()))?;
    let central = CentralNode::new(layout.n, layout.p, chain_cols, cfg.noise()?, 0)?;
    Ok(RemoteObjective { transport: TcpFederation::connect_remote(central, bind, endpoints, tcp_config(cfg))?, counter: 0 })
}

fn local_federation(cfg: &RunConfig, layout: &PartitionLayout) -> CliResult<Federation> {
    let data = cfg.load_data(layout)?;
    let mut options = FederationOptions::new(cfg.noise()?);
    options.transport = cfg.transport.clone();
    Ok(Federation::new(layout.clone(), data, options)?)
}

fn fit_table(fit: &FitResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:>14} {:>14}", "parameter", "estimate", "std.error");
    for (i, name) in fit.natural_names.iter().enumerate() {
        let se = match &fit.standard_errors {
            Some(s) => format!("{:>14.6}", s[i]),
            None => format!("{:>14}", "-"),
        };
        let _ = writeln!(out, "{:<24} {:>14.6} {se}", name, fit.natural[i]);
    }
    let _ = writeln!(out, "log-likelihood {:.6}", fit.ll);
    let _ = writeln!(out, "evaluations {}", fit.evals);
    let _ = writeln!(out, "converged {}", fit.converged);
    if fit.boundary {
        let _ = writeln!(out, "estimate is at the boundary of the parameter space; standard errors may be unreliable");
    }
    out
}

fn cmd_estimate(cfg: &RunConfig, out: Option<&Path>) -> CliResult<()> {
    let layout = cfg.load_layout()?;
    let model = cfg.model(&layout)?;
    let result = if cfg.is_remote()? {
        fit(&model, &mut remote_objective(cfg, &layout)?, &cfg.optimizer)?
    } else {
        fit(&model, &mut local_federation(cfg, &layout)?, &cfg.optimizer)?
    };
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir());
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("fit.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    let table = fit_table(&result);
    std::fs::write(dir.join("fit.txt"), &table)?;
    print!("{table}");
    if !result.converged {
        return Err(CliError::NotConverged(result.evals));
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> CliResult<()> {
    let cells = grid(&args.n, &args.p, &args.k);
    let config = BenchConfig { reps: args.reps, noise_scale: args.noise_scale, seed: args.seed, max_cells: args.max_cells };
    let rows = run_bench(&cells, &config)?;
    let csv = to_csv(&rows);
    match &args.out {
        Some(p) => std::fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    let worst = rows.iter().map(|r| r.ll_error).fold(0.0, f64::max);
    eprintln!("{} cells, largest log-likelihood error {worst:.2e}", rows.len());
    Ok(())
}

fn cmd_audit(cfg: &RunConfig, transcript: Option<&Path>, save: Option<&Path>, json: Option<&Path>) -> CliResult<()> {
    let layout = cfg.load_layout()?;
    let data = cfg.load_data(&layout)?;
    let pooled = assemble_pooled(&layout, &data)?;
    let model = cfg.model(&layout)?;
    let start = cfg.optimizer.start.clone().unwrap_or_else(|| model.default_start());
    let params = model.realize(&start)?;
    let plan = plan_subroutines(&layout)?;
    let noise_scale = cfg.noise()?.scale;

    let transcripts: Vec<Transcript> = match transcript {
        Some(p) => {
            let all = Transcript::from_jsonl(&std::fs::read_to_string(p)?)?;
            let mut bands: Vec<u64> = all.messages().map(|m| m.eval_id >> 48).collect();
            bands.sort_unstable();
            bands.dedup();
            let mut out = Vec::new();
            for b in bands {
                out.push(Transcript { entries: all.entries.iter().filter(|e| e.message.eval_id >> 48 == b).cloned().collect() });
            }
            out
        }
        None => {
            let mut fed = Federation::new(layout.clone(), data, FederationOptions::new(cfg.noise()?))?;
            run_complex(&mut fed, &params)?.transcripts
        }
    };
    if let Some(p) = save {
        let all = Transcript { entries: transcripts.iter().flat_map(|t| t.entries.iter().cloned()).collect() };
        std::fs::write(p, all.to_jsonl()?)?;
    }

    let vertical: Vec<_> = plan.bands.iter().enumerate().filter(|(_, b)| b.members.len() > 1).collect();
    let mut reports: Vec<LeakageReport> = Vec::new();
    for t in &transcripts {
        let first = t.messages().next().ok_or_else(|| Error::Audit("empty transcript".into()))?;
        let band_idx = (first.eval_id >> 48) as usize;
        let (_, band) = vertical
            .iter()
            .find(|(i, _)| *i == band_idx)
            .ok_or_else(|| Error::Audit(format!("transcript refers to band {band_idx}, which has no vertical evaluation")))?;
        let rows = select_rows(&pooled.rows, &band.rows);
        let chain_cols: Vec<Vec<usize>> = band.members.iter().map(|m| m.cols.clone()).collect();
        let ctx = AuditContext { params: &params, pooled: &rows, chain_cols: &chain_cols, noise_scale };
        let report = audit_transcript(t, &ctx)?;
        println!("band {band_idx}");
        print!("{report}");
        reports.push(report);
    }
    if reports.is_empty() {
        println!("layout has no vertical bands; nothing to audit");
    }
    if let Some(p) = json {
        std::fs::write(p, serde_json::to_string_pretty(&reports)? + "\n")?;
    }
    let violations: usize = reports.iter().map(|r| r.violations.len() + r.nodes.iter().filter(|n| !n.conforms()).count()).sum();
    if violations > 0 {
        return Err(CliError::AuditFailed(violations));
    }
    Ok(())
}

fn cmd_node(args: &NodeArgs) -> CliResult<()> {
    let layout = PartitionLayout::load(&args.layout)?;
    let plan = plan_subroutines(&layout)?;
    if plan.bands.len() != 1 {
        return Err(Error::Layout("node daemons need a vertical layout".into()).into());
    }
    let members = &plan.bands[0].members;
    let idx = layout.node_index(&args.name).ok_or_else(|| Error::Layout(format!("layout has no node {}", args.name)))?;
    let position = members.iter().position(|m| m.node == idx).expect("every node is a band member") as u32 + 1;
    let table = read_csv(&args.csv, &args.id_column)?;
    let part = ingest_node(&layout, &args.name, table, args.impute)?;
    let ledger = NoiseLedger::new(args.noise_scale, args.seed)?;
    let node = DataNode::new(position, members.len() as u32, part.rows, ledger, 0)?;
    let peers: HashMap<NodeId, SocketAddr> = args.peers.iter().copied().collect();
    if !peers.contains_key(&NodeId::Central) {
        return Err(CliError::Input("no address for the central node (--peer CN=host:port)".into()));
    }
    let listener = TcpListener::bind(args.listen)?;
    let config = TcpConfig { timeout_ms: args.timeout_ms, ..Default::default() };
    let server = NodeServer::spawn(node, members.len() as u32, listener, peers, config)?;
    eprintln!("{} serving as DN{position} on {}", args.name, server.addr());
    server.join();
    Ok(())
}

fn cmd_ingest_check(cfg: &RunConfig) -> CliResult<()> {
    let layout = cfg.load_layout()?;
    let mut tables = HashMap::new();
    let mut missing = 0;
    for (name, src) in &cfg.nodes {
        let Some(p) = &src.csv else { continue };
        let t = read_csv(&cfg.resolve(p), &cfg.id_column)?;
        missing += t.missing_cells();
        tables.insert(name.clone(), t);
    }
    let parts = ingest(&layout, tables, cfg.impute)?;
    for (cell, part) in layout.nodes.iter().zip(&parts) {
        println!("{:<16} {:>6} rows {:>4} columns", cell.name, part.n(), part.p());
    }
    println!("{} rows, {} variables, {} missing cells{}", layout.n, layout.p, missing, if missing > 0 { " (imputed)" } else { "" });
    Ok(())
}
