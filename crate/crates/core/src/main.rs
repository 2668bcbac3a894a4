use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedmtl::community::{brute_force_best_partition, louvain, modularity};
use fedmtl::data::export_dataset;
use fedmtl::error::{Error, Result};
use fedmtl::experiment::{run_experiment, RunConfig};
use fedmtl::graph::read_edge_list_csv;
use fedmtl::metrics::{fairness_stats, Method};
use fedmtl::rng::stream;

#[derive(Parser)]
#[command(
    name = "fedmtl",
    about = "Desk-scale federated multi-task learning simulator with \
             similarity-graph community detection and baselines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts.
    Run {
        /// Flat JSON config file; flags below override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// sfmtl | fedavg | fedu | local
        #[arg(long)]
        method: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a dataset and export it as a CSV bundle with a manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition an edge-list CSV (src,dst,weight) and print node,community
    /// rows plus the modularity.
    Louvain {
        #[arg(long)]
        edges: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Exhaustive best-modularity partition for small graphs (<= 12 nodes).
    Oracle {
        #[arg(long)]
        edges: PathBuf,
    },
    /// Fairness statistics from a CSV with an `accuracy` column (rows are
    /// filtered to the last round when a `round` column is present).
    Stats {
        #[arg(long)]
        accuracies: PathBuf,
    },
}

fn load_config(
    config: Option<PathBuf>,
    seed: Option<u64>,
    method: Option<String>,
    out: Option<PathBuf>,
) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(path) => RunConfig::from_file(&path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(method) = method {
        cfg.method = method.parse::<Method>()?;
    }
    if let Some(out) = out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn read_accuracy_column(path: &PathBuf) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?;
    let columns: Vec<&str> = header.split(',').collect();
    let acc_col = columns
        .iter()
        .position(|&c| c == "accuracy")
        .ok_or_else(|| Error::Format(format!("{}: no `accuracy` column", path.display())))?;
    let round_col = columns.iter().position(|&c| c == "round");

    let mut rows: Vec<(u64, f64)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::Format(format!(
                "{}:{}: expected {} fields, found {}",
                path.display(),
                lineno + 2,
                columns.len(),
                fields.len()
            )));
        }
        let acc = fields[acc_col].parse::<f64>().map_err(|e| {
            Error::Format(format!("{}:{}: bad accuracy: {e}", path.display(), lineno + 2))
        })?;
        let round = match round_col {
            Some(c) => fields[c].parse::<u64>().map_err(|e| {
                Error::Format(format!("{}:{}: bad round: {e}", path.display(), lineno + 2))
            })?,
            None => 0,
        };
        rows.push((round, acc));
    }
    let last = rows.iter().map(|&(r, _)| r).max().unwrap_or(0);
    Ok(rows
        .into_iter()
        .filter(|&(r, _)| r == last)
        .map(|(_, a)| a)
        .collect())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            method,
            out,
        } => {
            let cfg = load_config(config, seed, method, out)?;
            let artifacts = run_experiment(&cfg)?;
            println!(
                "method {} finished {} rounds: mean accuracy {:.4}, \
                 {} bits up, {} bits down; artifacts in {}",
                artifacts.summary.method,
                artifacts.summary.rounds,
                artifacts.summary.final_mean_accuracy,
                artifacts.summary.cumulative_bits_up,
                artifacts.summary.cumulative_bits_down,
                artifacts.out_dir.display()
            );
            Ok(())
        }
        Command::GenData { config, seed, out } => {
            let cfg = load_config(config, seed, None, out)?;
            cfg.validate()?;
            let dataset = cfg.build_dataset()?;
            let dir = PathBuf::from(&cfg.out_dir);
            export_dataset(&dataset, cfg.seed, &dir)?;
            println!(
                "wrote {} clients ({} classes, input dim {}) to {}",
                dataset.num_clients(),
                dataset.c_total,
                dataset.input_dim,
                dir.display()
            );
            Ok(())
        }
        Command::Louvain { edges, seed } => {
            let graph = read_edge_list_csv(&edges)?;
            let partition = louvain(&graph, &mut stream(seed, &[20]));
            let q = modularity(&graph, &partition)?;
            println!("node,community");
            for (node, community) in partition.iter() {
                println!("{node},{community}");
            }
            println!("# modularity = {q}");
            Ok(())
        }
        Command::Oracle { edges } => {
            let graph = read_edge_list_csv(&edges)?;
            let (partition, q_star) = brute_force_best_partition(&graph)?;
            println!("node,community");
            for (node, community) in partition.iter() {
                println!("{node},{community}");
            }
            println!("# modularity = {q_star}");
            Ok(())
        }
        Command::Stats { accuracies } => {
            let accs = read_accuracy_column(&accuracies)?;
            let report = fairness_stats(&accs)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
