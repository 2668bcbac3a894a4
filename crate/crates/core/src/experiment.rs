//! Experiment driver: flat JSON configuration, the round loop across
//! methods, and artifact export (per-round CSV, JSON summary, graph
//! snapshots, anchor dumps).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_label_shift, load_idx, partition_rotated_masked, BlobSpec, FederatedDataset};
use crate::error::{Error, Result};
use crate::federation::{run_method_round, FederationState, Hyperparams, RoundOutcome};
use crate::metrics::{accuracy_and_loss, fairness_stats, FairnessReport, Method};
use crate::rng::stream;

const TAG_DATASET: u64 = 10;

/// Flat experiment configuration; every field has a default, a JSON config
/// file overrides the defaults, and CLI flags override the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    /// "blobs" (label-shift Gaussians) or "rotated-mnist" (IDX ingestion
    /// plus rotation/mask covariate shift).
    pub dataset: String,
    pub num_clients: usize,
    /// Communication rounds T.
    pub rounds: usize,
    /// Local epochs R per round.
    pub local_rounds: usize,
    pub eta: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub sample_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub out_dir: String,
    pub anchors_learnable: bool,
    pub tau_override: Option<f64>,
    /// Debug/ablation: force an all-zero similarity graph.
    pub zero_graph_override: bool,

    // Blob dataset knobs.
    pub classes_per_client: usize,
    pub samples_per_client: usize,
    pub input_dim: usize,
    pub c_total: usize,
    pub blob_separation: f64,

    // Model shape.
    pub hidden_dims: Vec<usize>,
    pub d_h: usize,

    /// Graph snapshot cadence in rounds (the final round is always written).
    pub snapshot_every: usize,

    // IDX inputs for the rotated-mnist dataset.
    pub mnist_images: Option<String>,
    pub mnist_labels: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Sfmtl,
            dataset: "blobs".into(),
            num_clients: 12,
            rounds: 50,
            local_rounds: 5,
            eta: 0.05,
            lambda: 1.0,
            alpha: 0.49,
            sample_fraction: 1.0,
            batch_size: 32,
            seed: 1,
            out_dir: "out".into(),
            anchors_learnable: true,
            tau_override: None,
            zero_graph_override: false,
            classes_per_client: 2,
            samples_per_client: 60,
            input_dim: 8,
            c_total: 6,
            blob_separation: 6.0,
            hidden_dims: vec![16],
            d_h: 8,
            snapshot_every: 50,
            mnist_images: None,
            mnist_labels: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.snapshot_every == 0 {
            return Err(Error::Config("snapshot_every must be >= 1".into()));
        }
        if self.dataset != "blobs" && self.dataset != "rotated-mnist" {
            return Err(Error::Config(format!(
                "unknown dataset '{}' (expected blobs or rotated-mnist)",
                self.dataset
            )));
        }
        self.hyperparams().validate()
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            eta: self.eta,
            local_rounds: self.local_rounds,
            batch_size: self.batch_size,
            lambda: self.lambda,
            alpha: self.alpha,
            sample_fraction: self.sample_fraction,
            tau_override: self.tau_override,
            anchors_learnable: self.anchors_learnable,
            zero_graph_override: self.zero_graph_override,
        }
    }

    pub fn build_dataset(&self) -> Result<FederatedDataset> {
        let mut rng = stream(self.seed, &[TAG_DATASET]);
        match self.dataset.as_str() {
            "blobs" => {
                let spec = BlobSpec {
                    num_clients: self.num_clients,
                    classes_per_client: self.classes_per_client,
                    samples_per_client: self.samples_per_client,
                    input_dim: self.input_dim,
                    c_total: self.c_total,
                    separation: self.blob_separation,
                };
                gen_label_shift(&spec, &mut rng)
            }
            "rotated-mnist" => {
                let images = self.mnist_images.as_ref().ok_or_else(|| {
                    Error::Config("rotated-mnist needs mnist_images".into())
                })?;
                let labels = self.mnist_labels.as_ref().ok_or_else(|| {
                    Error::Config("rotated-mnist needs mnist_labels".into())
                })?;
                let (images, labels, dims) =
                    load_idx(Path::new(images), Path::new(labels))?;
                partition_rotated_masked(&images, &labels, dims, self.num_clients, &mut rng)
            }
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }

    pub fn build_state(&self) -> Result<FederationState> {
        let dataset = self.build_dataset()?;
        FederationState::init(dataset, &self.hidden_dims, self.d_h, self.hyperparams(), self.seed)
    }
}

/// Cumulative counters and the final fairness report of one experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub method: Method,
    pub rounds: usize,
    pub fairness: FairnessReport,
    pub final_mean_accuracy: f64,
    pub cumulative_bits_up: u64,
    pub cumulative_bits_down: u64,
    pub cumulative_flops: f64,
    pub failed_rounds: usize,
    pub warnings: usize,
}

/// In-memory result of `run_experiment` (everything is also on disk).
#[derive(Debug, Clone)]
pub struct ExperimentArtifacts {
    pub out_dir: PathBuf,
    pub summary: ExperimentSummary,
    /// Per-client accuracies at the end of the run, indexed by client.
    pub final_accuracies: Vec<f64>,
    /// Community partitions per round (community-scoped method only).
    pub partitions: Vec<Option<crate::community::Partition>>,
}

fn write_rounds_header(out: &mut Vec<u8>) -> Result<()> {
    writeln!(out, "round,client,accuracy,loss,bits_up,bits_down,community")?;
    Ok(())
}

fn append_round_rows(out: &mut Vec<u8>, outcome: &RoundOutcome) -> Result<()> {
    // Rounds are reported 1-based in artifacts.
    let round = outcome.round + 1;
    for (&client, rec) in &outcome.records {
        let community = rec.community.map(|c| c as i64).unwrap_or(-1);
        writeln!(
            out,
            "{round},{client},{},{},{},{},{community}",
            rec.accuracy, rec.loss, rec.bits_up, rec.bits_down
        )?;
    }
    Ok(())
}

/// Run T rounds of the configured method and write the four artifact kinds:
/// `rounds.csv`, `summary.json`, graph snapshots under `graphs/`, and the
/// final anchor dump `anchors.csv`.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentArtifacts> {
    config.validate()?;
    let out_dir = PathBuf::from(&config.out_dir);
    // Fail on an unwritable output directory before any compute.
    fs::create_dir_all(&out_dir)?;
    let probe = out_dir.join(".write-probe");
    fs::write(&probe, b"ok")?;
    fs::remove_file(&probe)?;
    let graphs_dir = out_dir.join("graphs");
    fs::create_dir_all(&graphs_dir)?;

    let mut state = config.build_state()?;
    let mut rounds_csv = Vec::new();
    write_rounds_header(&mut rounds_csv)?;

    let mut cumulative_bits_up = 0u64;
    let mut cumulative_bits_down = 0u64;
    let mut cumulative_flops = 0.0f64;
    let mut failed_rounds = 0usize;
    let mut warning_count = 0usize;
    let mut partitions = Vec::with_capacity(config.rounds);

    for t in 0..config.rounds {
        let outcome = run_method_round(&mut state, config.method)?;
        if outcome.records.is_empty() && !outcome.failed.is_empty() {
            return Err(Error::Numerical(format!(
                "round {} aborted: every sampled client hit non-finite values \
                 (clients {:?})",
                t, outcome.failed
            )));
        }
        append_round_rows(&mut rounds_csv, &outcome)?;
        for rec in outcome.records.values() {
            cumulative_bits_up += rec.bits_up;
            cumulative_bits_down += rec.bits_down;
            cumulative_flops += rec.flops;
        }
        if !outcome.failed.is_empty() {
            failed_rounds += 1;
        }
        warning_count += outcome.warnings.len();

        let round_1based = t + 1;
        if let Some(graph) = &outcome.graph {
            if round_1based % config.snapshot_every == 0 || round_1based == config.rounds {
                let mut snapshot = Vec::new();
                writeln!(snapshot, "round,src,dst,weight")?;
                graph.write_edge_list(round_1based, &mut snapshot)?;
                fs::write(
                    graphs_dir.join(format!("round_{round_1based:05}.csv")),
                    snapshot,
                )?;
            }
        }
        partitions.push(outcome.partition);
    }

    fs::write(out_dir.join("rounds.csv"), &rounds_csv)?;

    // Final anchor dump: client, class, then the d_h anchor values.
    let mut anchors_csv = Vec::new();
    write!(anchors_csv, "client,class")?;
    for d in 0..config.d_h {
        write!(anchors_csv, ",h{d}")?;
    }
    writeln!(anchors_csv)?;
    for (k, client) in state.clients.iter().enumerate() {
        for (class, anchor) in client.anchors.iter() {
            write!(anchors_csv, "{k},{class}")?;
            for v in anchor.iter() {
                write!(anchors_csv, ",{v}")?;
            }
            writeln!(anchors_csv)?;
        }
    }
    fs::write(out_dir.join("anchors.csv"), anchors_csv)?;

    // Fairness over every client's final model; clients without test data
    // are excluded with a warning.
    let mut final_accuracies = Vec::with_capacity(state.num_clients());
    for (k, client) in state.clients.iter().enumerate() {
        if client.data.test_labels.is_empty() {
            eprintln!("warning: client {k} has no test samples; excluded from fairness");
            warning_count += 1;
            continue;
        }
        let (acc, _) =
            accuracy_and_loss(&client.model, &client.data.test_inputs, &client.data.test_labels)?;
        final_accuracies.push(acc);
    }
    let fairness = fairness_stats(&final_accuracies)?;
    let summary = ExperimentSummary {
        method: config.method,
        rounds: config.rounds,
        final_mean_accuracy: fairness.mean,
        fairness,
        cumulative_bits_up,
        cumulative_bits_down,
        cumulative_flops,
        failed_rounds,
        warnings: warning_count,
    };
    let summary_json = serde_json::json!({
        "summary": &summary,
        "config": config,
    });
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary_json)?,
    )?;

    Ok(ExperimentArtifacts {
        out_dir,
        summary,
        final_accuracies,
        partitions,
    })
}
