//! SMILES(+target) ingestion, holdout splits and shuffled batching.

use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molgraph::MolecularGraph;
use crate::smiles::SmilesCodec;

#[derive(Clone, Debug, PartialEq)]
pub struct MoleculeRecord {
    /// 1-based line in the source file.
    pub line: usize,
    pub smiles: String,
    pub graph: MolecularGraph,
    pub target: Option<f64>,
}

/// A row that could not become a record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reject {
    pub line: usize,
    pub smiles: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadedDataset {
    pub records: Vec<MoleculeRecord>,
    pub rejects: Vec<Reject>,
}

impl LoadedDataset {
    pub fn graphs(&self) -> Vec<MolecularGraph> {
        self.records.iter().map(|r| r.graph.clone()).collect()
    }
}

/// Reads a CSV with a `smiles` column and, when `has_target`, a `target`
/// column. Rows that fail to parse, exceed `max_nodes` atoms, or carry a
/// non-numeric target are reported in `rejects`.
pub fn load(
    path: &Path,
    codec: &SmilesCodec,
    has_target: bool,
    max_nodes: usize,
) -> Result<LoadedDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let malformed = |e: csv::Error| Error::Malformed {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    };
    let headers = reader.headers().map_err(malformed)?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let smiles_col = column("smiles")?;
    let target_col = if has_target {
        Some(column("target")?)
    } else {
        None
    };

    let mut out = LoadedDataset::default();
    for row in reader.records() {
        let row = row.map_err(malformed)?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let smiles = row.get(smiles_col).unwrap_or("").to_string();
        let mut reject = |error: String| {
            out.rejects.push(Reject {
                line,
                smiles: smiles.clone(),
                error,
            })
        };
        let target = match target_col {
            Some(c) => match row.get(c).unwrap_or("").parse::<f64>() {
                Ok(v) if v.is_finite() => Some(v),
                _ => {
                    reject(format!("invalid target `{}`", row.get(c).unwrap_or("")));
                    continue;
                }
            },
            None => None,
        };
        let graph = match codec.parse(&smiles) {
            Ok(g) => g,
            Err(e) => {
                reject(e.to_string());
                continue;
            }
        };
        if graph.num_nodes() > max_nodes {
            reject(format!(
                "{} atoms exceed the limit of {max_nodes}",
                graph.num_nodes()
            ));
            continue;
        }
        out.records.push(MoleculeRecord {
            line,
            smiles,
            graph,
            target,
        });
    }
    Ok(out)
}

/// The rejects report as CSV text with header `line,smiles,error`.
pub fn rejects_csv(rejects: &[Reject]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["line", "smiles", "error"])
        .expect("in-memory write");
    for r in rejects {
        w.write_record([r.line.to_string().as_str(), &r.smiles, &r.error])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Shuffles by `spec.seed` and puts the first ⌈n·fraction⌉ records in the
/// training split, keeping at least one record on each side.
pub fn holdout_split<T: Clone>(records: &[T], spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidConfig(
            "train_fraction must lie in (0, 1)".into(),
        ));
    }
    let n = records.len();
    if n < 2 {
        return Err(Error::TooFewRecords(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let cut = ((n as f64 * spec.train_fraction).ceil() as usize).clamp(1, n - 1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}

/// Index batches for one epoch. The permutation depends only on
/// `(seed, epoch)`; the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
