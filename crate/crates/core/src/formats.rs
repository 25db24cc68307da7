//! On-disk formats. Everything is plain decimal text: tab-separated sample
//! files, JSON manifests, line-delimited JSON logs, and a small header-plus-
//! rows format for matrices.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{ClassHistogram, ClientData, Federation, FederationSpec};
use crate::error::{Error, Result};
use crate::interaction::{AffinityMatrix, InteractionState};
use crate::linalg::Matrix;
use crate::training::{ClientDataset, ModelParams};
use crate::{ClientId, Scalar};

pub const MANIFEST: &str = "manifest.json";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn parse_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), detail: detail.into() }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.display().to_string()),
        _ => Error::Io(e),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.display().to_string()),
        _ => Error::Io(e),
    })?))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::shape(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    serde_json::from_str(&read_text(path)?).map_err(|e| parse_err(path, e.to_string()))
}

pub fn write_jsonl<S: Serialize>(path: &Path, records: &[S]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::shape(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl<D: DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// One sample per line: the label, then the features, tab-separated.
pub fn write_dataset<T: Scalar>(path: &Path, data: &ClientDataset<T>) -> Result<()> {
    let mut out = String::new();
    for (row, &label) in data.features.iter_rows().zip(&data.labels) {
        write!(out, "{label}").expect("write to string");
        for v in row {
            write!(out, "\t{}", v.to_f64_lossy()).expect("write to string");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_dataset<T: Scalar>(path: &Path, classes: usize, dim: usize) -> Result<ClientDataset<T>> {
    let text = read_text(path)?;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut fields = line.split('\t');
        let label = fields
            .next()
            .and_then(|f| f.trim().parse::<usize>().ok())
            .ok_or_else(|| parse_err(path, format!("line {}: missing or invalid label", i + 1)))?;
        let row: Vec<f64> = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(path, format!("line {}: {e}", i + 1)))?;
        if row.len() != dim {
            return Err(parse_err(path, format!("line {}: {} features, expected {dim}", i + 1, row.len())));
        }
        labels.push(label);
        data.extend(row.into_iter().map(T::of));
    }
    ClientDataset::new(Matrix::from_vec(labels.len(), dim, data)?, labels, classes).map_err(|e| parse_err(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEntry {
    pub id: ClientId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<usize>,
    /// Empirical class frequencies of the training split.
    pub histogram: Vec<f64>,
    /// Proportions the labels were drawn from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drawn_histogram: Option<Vec<f64>>,
    pub train: String,
    pub test: String,
    pub train_sha256: String,
    pub test_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationManifest {
    pub version: String,
    pub spec: FederationSpec,
    pub clients: Vec<ClientEntry>,
}

impl FederationManifest {
    pub fn ground_truth(&self) -> Option<BTreeMap<ClientId, usize>> {
        self.clients.iter().map(|c| c.group.map(|g| (c.id, g))).collect()
    }

    pub fn histograms(&self) -> Result<BTreeMap<ClientId, ClassHistogram<f64>>> {
        self.clients.iter().map(|c| Ok((c.id, ClassHistogram::new(c.histogram.clone())?))).collect()
    }
}

pub fn write_federation<T: Scalar>(fed: &Federation<T>, dir: &Path) -> Result<FederationManifest> {
    fs::create_dir_all(dir.join("clients"))?;
    let mut clients = Vec::with_capacity(fed.clients.len());
    for c in &fed.clients {
        let train = format!("clients/client_{:05}.train.tsv", c.id.0);
        let test = format!("clients/client_{:05}.test.tsv", c.id.0);
        write_dataset(&dir.join(&train), &c.train)?;
        write_dataset(&dir.join(&test), &c.test)?;
        clients.push(ClientEntry {
            id: c.id,
            group: fed.ground_truth_known.then_some(c.group),
            histogram: ClassHistogram::<f64>::from_labels(&c.train.labels, fed.spec.classes)?.freqs,
            drawn_histogram: Some(c.histogram.freqs.clone()),
            train_sha256: sha256_file(&dir.join(&train))?,
            test_sha256: sha256_file(&dir.join(&test))?,
            train,
            test,
        });
    }
    let manifest = FederationManifest { version: VERSION.to_string(), spec: fed.spec.clone(), clients };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_federation_manifest(dir: &Path) -> Result<FederationManifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingInput(format!("no federation manifest at {}", path.display())));
    }
    read_json(&path)
}

pub fn read_federation<T: Scalar>(dir: &Path) -> Result<Federation<T>> {
    let manifest = read_federation_manifest(dir)?;
    let spec = manifest.spec.clone();
    let known = manifest.clients.iter().all(|c| c.group.is_some());
    let mut clients = Vec::with_capacity(manifest.clients.len());
    for (i, c) in manifest.clients.iter().enumerate() {
        if c.id.0 != i {
            return Err(parse_err(&dir.join(MANIFEST), format!("client {i} is listed with id {}", c.id)));
        }
        let drawn = c.drawn_histogram.clone().unwrap_or_else(|| c.histogram.clone());
        clients.push(ClientData {
            id: c.id,
            group: c.group.unwrap_or(0),
            histogram: ClassHistogram::new(drawn)?,
            train: read_dataset(&dir.join(&c.train), spec.classes, spec.dim)?,
            test: read_dataset(&dir.join(&c.test), spec.classes, spec.dim)?,
        });
    }
    Ok(Federation { spec, clients, ground_truth_known: known })
}

fn write_matrix_body<T: Scalar>(out: &mut String, m: &Matrix<T>) {
    for row in m.iter_rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_f64_lossy().to_string()).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
}

fn client_list(clients: &[ClientId]) -> String {
    clients.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
}

/// Header lines `key value...`, a `---` separator, then one matrix row per line.
pub fn interaction_to_text<T: Scalar>(state: &InteractionState<T>) -> String {
    let mut out = String::new();
    writeln!(out, "kind interaction").unwrap();
    writeln!(out, "K_c {}", state.len()).unwrap();
    writeln!(out, "clients {}", client_list(state.clients())).unwrap();
    writeln!(out, "alpha {}", state.alpha.to_f64_lossy()).unwrap();
    writeln!(out, "mse_signal {}", state.mse_signal.to_f64_lossy()).unwrap();
    writeln!(out, "round {}", state.round).unwrap();
    out.push_str("---\n");
    write_matrix_body(&mut out, &state.p);
    out
}

pub fn affinity_to_text<T: Scalar>(clients: &[ClientId], w: &AffinityMatrix<T>) -> String {
    let mut out = String::new();
    writeln!(out, "kind affinity").unwrap();
    writeln!(out, "K_c {}", w.len()).unwrap();
    writeln!(out, "clients {}", client_list(clients)).unwrap();
    writeln!(out, "beta {}", w.beta.to_f64_lossy()).unwrap();
    out.push_str("---\n");
    write_matrix_body(&mut out, &w.w);
    out
}

pub fn interaction_from_text<T: Scalar>(text: &str, path: &Path) -> Result<InteractionState<T>> {
    let (head, body) = text.split_once("---\n").ok_or_else(|| parse_err(path, "missing `---` separator"))?;
    let header: BTreeMap<&str, &str> = head.lines().filter_map(|l| l.split_once(' ')).collect();
    let get = |k: &str| header.get(k).copied().ok_or_else(|| parse_err(path, format!("missing header `{k}`")));
    if get("kind")? != "interaction" {
        return Err(parse_err(path, "not an interaction matrix"));
    }
    let num = |k: &str| get(k)?.trim().parse::<f64>().map_err(|e| parse_err(path, format!("{k}: {e}")));
    let clients: Vec<ClientId> = get("clients")?
        .split_whitespace()
        .map(|c| c.parse().map(ClientId))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(path, format!("clients: {e}")))?;
    let n = clients.len();
    let rows: Vec<Vec<T>> = body
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(|v| v.parse::<f64>().map(T::of)).collect::<std::result::Result<Vec<_>, _>>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(path, e.to_string()))?;
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(parse_err(path, format!("expected a {n}×{n} matrix")));
    }
    let round = get("round")?.trim().parse::<u64>().map_err(|e| parse_err(path, format!("round: {e}")))?;
    InteractionState::from_parts(clients, Matrix::from_rows(&rows)?, T::of(num("mse_signal")?), T::of(num("alpha")?), round)
}

pub fn write_model<T: Scalar>(path: &Path, model: &ModelParams<T>) -> Result<()> {
    let mut out = format!("params {}\n", model.len());
    for v in &model.values {
        writeln!(out, "{}", v.to_f64_lossy()).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_model<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let n: usize = lines
        .next()
        .and_then(|h| h.strip_prefix("params "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| parse_err(path, "missing `params N` header"))?;
    let values: Vec<T> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>().map(T::of))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(path, e.to_string()))?;
    if values.len() != n {
        return Err(parse_err(path, format!("header says {n} parameters, found {}", values.len())));
    }
    Ok(ModelParams { values })
}
