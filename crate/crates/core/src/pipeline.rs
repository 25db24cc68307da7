//! End-to-end stages behind the command-line subcommands. Each stage reads
//! and writes plain files so stages can run in separate processes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::LoadedConfig;
use crate::datagen::{make_federation, Federation};
use crate::error::{Error, Result};
use crate::formats::{self, FederationManifest, MANIFEST, VERSION};
use crate::interaction::InteractionState;
use crate::metrics::{rand_index_map, wadb_score, was_score};
use crate::orchestrator::{run_experiment, ExperimentLog, LogRecord};
use crate::ClientId;

pub const LOG: &str = "log.jsonl";
pub const LABELS: &str = "labels.json";
pub const TREE: &str = "tree.json";
pub const ACCURACY: &str = "accuracy.tsv";

/// Provenance of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    /// Effective configuration after overrides, as TOML.
    pub config: String,
    pub config_source: String,
    pub overrides: Vec<(String, String)>,
    pub federation_manifest_sha256: String,
    /// Output file (relative to the run directory) → SHA-256.
    pub outputs: BTreeMap<String, String>,
}

/// Writes the federation described by the configuration into `out`.
pub fn generate(config: &LoadedConfig, out: &Path) -> Result<FederationManifest> {
    let fed: Federation<f64> = make_federation(&config.config.federation_spec())?;
    formats::write_federation(&fed, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingRecord {
    pub n_clusters: usize,
    pub labels: BTreeMap<ClientId, usize>,
    pub clusters: BTreeMap<usize, Vec<ClientId>>,
    /// Davies-Bouldin candidate table of every split that happened.
    pub splits: Vec<SplitEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub round: u64,
    pub parent: usize,
    pub children: Vec<usize>,
    pub db_scores: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<usize>,
    pub born: u64,
    pub members: Vec<ClientId>,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub n_clusters: usize,
    pub mean_accuracy: f64,
    pub aborted_rounds: usize,
    pub rand_index: Option<f64>,
}

fn split_entries(records: &[LogRecord]) -> Vec<SplitEntry> {
    records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Split { round, parent, children, db_scores, .. } => {
                Some(SplitEntry { round: *round, parent: *parent, children: children.clone(), db_scores: db_scores.clone() })
            }
            _ => None,
        })
        .collect()
}

/// Rebuilds the cluster tree from the split events of a log.
pub fn cluster_tree(records: &[LogRecord], all: &[ClientId]) -> Vec<TreeNode> {
    let mut nodes = vec![TreeNode { id: 0, parent: None, born: 0, members: all.to_vec(), children: vec![] }];
    for r in records {
        if let LogRecord::Split { round, parent, children, members, .. } = r {
            if let Some(p) = nodes.iter_mut().find(|n| n.id == *parent) {
                p.children = children.clone();
            }
            for (&id, m) in children.iter().zip(members) {
                nodes.push(TreeNode { id, parent: Some(*parent), born: *round, members: m.clone(), children: vec![] });
            }
        }
    }
    nodes
}

fn check_matches(config: &LoadedConfig, fed: &FederationManifest) -> Result<()> {
    let want = config.config.federation_spec();
    if want != fed.spec {
        return Err(Error::Config(format!(
            "{}: [federation] section does not match the federation on disk (generated with seed {}, K = {})",
            config.source, fed.spec.seed, fed.spec.clients
        )));
    }
    Ok(())
}

/// Runs an experiment on a generated federation and writes the log, final
/// labels, cluster tree, per-cluster models and interaction states, the
/// accuracy table and a manifest into `out`.
pub fn run(config: &LoadedConfig, federation_dir: &Path, out: &Path) -> Result<RunReport> {
    let fed_manifest = formats::read_federation_manifest(federation_dir)?;
    check_matches(config, &fed_manifest)?;
    let fed: Federation<f64> = formats::read_federation(federation_dir)?;
    let settings = config.config.run_settings();
    let log = run_experiment(&settings, &fed)?;
    write_run(config, &fed, &log, federation_dir, out)
}

fn write_run(config: &LoadedConfig, fed: &Federation<f64>, log: &ExperimentLog<f64>, fed_dir: &Path, out: &Path) -> Result<RunReport> {
    fs::create_dir_all(out.join("models"))?;
    fs::create_dir_all(out.join("state"))?;
    let mut files: Vec<String> = vec![LOG.into(), LABELS.into(), TREE.into(), ACCURACY.into()];
    formats::write_jsonl(&out.join(LOG), &log.records)?;

    let clusters: BTreeMap<usize, Vec<ClientId>> = log.clusters.iter().map(|n| (n.id, n.members.clone())).collect();
    let labels = clusters.iter().flat_map(|(&id, m)| m.iter().map(move |&c| (c, id))).collect();
    let record = LabelingRecord { n_clusters: clusters.len(), labels, clusters, splits: split_entries(&log.records) };
    formats::write_json(&out.join(LABELS), &record)?;
    formats::write_json(&out.join(TREE), &cluster_tree(&log.records, &fed.ids()))?;

    let Some(LogRecord::Summary { accuracy, mean_accuracy, aborted_rounds, rand_index, .. }) = log.summary().cloned() else {
        return Err(Error::shape("experiment produced no summary"));
    };
    let mut table = String::from("cluster\tsize\tbalanced_accuracy\n");
    for n in &log.clusters {
        writeln!(table, "{}\t{}\t{}", n.id, n.members.len(), accuracy[&n.id]).unwrap();
    }
    fs::write(out.join(ACCURACY), table)?;

    for n in &log.clusters {
        let model = format!("models/cluster_{}.txt", n.id);
        formats::write_model(&out.join(&model), &n.model)?;
        let state = format!("state/cluster_{}.txt", n.id);
        fs::write(out.join(&state), formats::interaction_to_text(&n.interaction))?;
        files.extend([model, state]);
    }
    let outputs = files.into_iter().map(|f| Ok((f.clone(), formats::sha256_file(&out.join(&f))?))).collect::<Result<_>>()?;
    let manifest = RunManifest {
        version: VERSION.to_string(),
        seed: config.config.federation.seed,
        config: config.effective_toml(),
        config_source: config.source.clone(),
        overrides: config.overrides.clone(),
        federation_manifest_sha256: formats::sha256_file(&fed_dir.join(MANIFEST))?,
        outputs,
    };
    formats::write_json(&out.join(MANIFEST), &manifest)?;
    Ok(RunReport { n_clusters: log.clusters.len(), mean_accuracy, aborted_rounds, rand_index })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub n_clusters: usize,
    /// Undefined for a single cluster.
    pub was: Option<f64>,
    pub wadb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rand_index: Option<f64>,
}

/// Clustering quality of a labeling record against a federation manifest.
pub fn eval(federation_dir: &Path, labels_path: &Path) -> Result<EvalRecord> {
    let manifest = formats::read_federation_manifest(federation_dir)?;
    let record: LabelingRecord = formats::read_json(labels_path)?;
    let hist = manifest.histograms()?;
    let (was, wadb) = if record.n_clusters > 1 {
        (Some(was_score(&hist, &record.labels)?), Some(wadb_score(&hist, &record.labels)?))
    } else {
        (None, None)
    };
    let rand_index = match manifest.ground_truth() {
        Some(gt) => Some(rand_index_map(&record.labels, &gt)?),
        None => None,
    };
    Ok(EvalRecord { n_clusters: record.n_clusters, was, wadb, rand_index })
}

/// Writes plot-ready tab-separated tables under `run_dir/report` and returns
/// their paths.
pub fn report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let log_path = run_dir.join(LOG);
    if !log_path.exists() {
        return Err(Error::MissingInput(format!("no experiment log at {}", log_path.display())));
    }
    let records: Vec<LogRecord> = formats::read_jsonl(&log_path)?;
    let Some(LogRecord::Summary { rounds, n_clusters, mean_accuracy, aborted_rounds, rand_index, .. }) =
        records.iter().rev().find(|r| matches!(r, LogRecord::Summary { .. })).cloned()
    else {
        return Err(Error::MissingInput(format!("{} has no summary record; the run did not complete", log_path.display())));
    };
    let dir = run_dir.join("report");
    fs::create_dir_all(&dir)?;

    let mut acc = String::from("round\tcluster\tbalanced_accuracy\n");
    let mut count = String::from("round\tn_clusters\n");
    let mut db = String::from("round\tcluster\tdecision\tn\tdb\trejected\n");
    let mut last_round = 0;
    for r in &records {
        match r {
            LogRecord::Eval { round, cluster, balanced_accuracy } => {
                writeln!(acc, "{round}\t{cluster}\t{balanced_accuracy}").unwrap();
            }
            LogRecord::Round { round, n_clusters, .. } if *round != last_round => {
                writeln!(count, "{round}\t{n_clusters}").unwrap();
                last_round = *round;
            }
            LogRecord::Kept { round, cluster, db_scores, rejected } => {
                for (n, v) in db_scores {
                    writeln!(db, "{round}\t{cluster}\tkept\t{n}\t{v}\t{}", rejected.contains(n)).unwrap();
                }
            }
            LogRecord::Split { round, parent, db_scores, rejected, .. } => {
                for (n, v) in db_scores {
                    writeln!(db, "{round}\t{parent}\tsplit\t{n}\t{v}\t{}", rejected.contains(n)).unwrap();
                }
            }
            _ => {}
        }
    }
    let mut summary = String::from("rounds\tn_clusters\tmean_accuracy\taborted_rounds");
    if rand_index.is_some() {
        summary.push_str("\trand_index");
    }
    write!(summary, "\n{rounds}\t{n_clusters}\t{mean_accuracy}\t{aborted_rounds}").unwrap();
    if let Some(ri) = rand_index {
        write!(summary, "\t{ri}").unwrap();
    }
    summary.push('\n');

    let tables = [("accuracy_by_round.tsv", acc), ("clusters_by_round.tsv", count), ("db_candidates.tsv", db), ("summary.tsv", summary)];
    tables
        .into_iter()
        .map(|(name, body)| {
            let p = dir.join(name);
            fs::write(&p, body)?;
            Ok(p)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateKind {
    Interaction,
    Affinity,
}

/// Text dump of a final cluster's interaction matrix, or of the affinity
/// matrix derived from it with the given `beta`.
pub fn dump_state(run_dir: &Path, cluster: usize, kind: StateKind, beta: f64) -> Result<String> {
    let path = run_dir.join(format!("state/cluster_{cluster}.txt"));
    let text = formats::read_text(&path)?;
    let state: InteractionState<f64> = formats::interaction_from_text(&text, &path)?;
    match kind {
        StateKind::Interaction => Ok(text),
        StateKind::Affinity => Ok(formats::affinity_to_text(state.clients(), &state.build_affinity(beta)?)),
    }
}

/// `beta` recorded in a run's configuration.
pub fn run_beta(run_dir: &Path) -> Result<f64> {
    let manifest: RunManifest = formats::read_json(&run_dir.join(MANIFEST))?;
    let loaded = LoadedConfig::from_text(&manifest.config, "run manifest", &[])?;
    Ok(loaded.config.fedgwc.beta)
}
