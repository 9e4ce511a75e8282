//! Text file formats: annotation CSV, feature CSV, embedding text files,
//! sentence TSV, norm lexicon CSV, stoplists, prediction/value CSV and the
//! JSON model file.
//!
//! Floats are written with Rust's shortest round-trip representation, so
//! every value read back is bit-identical to the value written.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{tokenize, EmbeddingTable, LexiconError, NormLexicon, StopList};
use crate::model::{
    AnnotationRecord, AnnotatorParams, Dimensions, FusionModel, Instance, ModelError,
};
use crate::predict::Prediction;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Columns of value tables that never hold numeric dimension values.
pub const NON_VALUE_COLUMNS: &[&str] = &["condition_flag", "status"];

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },
    #[error("{path}: bad header: {msg}")]
    Header { path: PathBuf, msg: String },
    #[error("dimension mismatch: expected [{expected}], found [{found}]")]
    DimensionMismatch { expected: String, found: String },
    #[error("{path}: unsupported model format version {version}")]
    Version { path: PathBuf, version: u32 },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> FormatError {
    FormatError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn header_err(path: &Path, msg: impl Into<String>) -> FormatError {
    FormatError::Header {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>, FormatError> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> FormatError {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(path, line, e.to_string())
}

fn parse_value(path: &Path, line: u64, cell: &str) -> Result<f64, FormatError> {
    let v: f64 = cell
        .parse()
        .map_err(|_| parse_err(path, line, format!("`{cell}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("`{cell}` is not finite")));
    }
    Ok(v)
}

fn parse_optional(path: &Path, line: u64, cell: &str) -> Result<Option<f64>, FormatError> {
    if cell.is_empty() {
        Ok(None)
    } else {
        parse_value(path, line, cell).map(Some)
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn create(path: &Path) -> Result<std::io::BufWriter<File>, FormatError> {
    File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(io_err(path))
}

fn headers(path: &Path, reader: &mut csv::Reader<File>) -> Result<Vec<String>, FormatError> {
    Ok(reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect())
}

/// Checks that `found` names exactly the dimensions in `expected`, in order.
pub fn check_dimensions(expected: &Dimensions, found: &Dimensions) -> Result<(), FormatError> {
    if expected != found {
        return Err(FormatError::DimensionMismatch {
            expected: expected.names().join(","),
            found: found.names().join(","),
        });
    }
    Ok(())
}

/// `instance_id,annotator_id,<dim1>,...,<dimD>`; empty cells are missing.
pub fn read_annotations(path: &Path) -> Result<(Dimensions, Vec<AnnotationRecord>), FormatError> {
    let mut reader = csv_reader(path)?;
    let cols = headers(path, &mut reader)?;
    if cols.len() < 3 || cols[0] != "instance_id" || cols[1] != "annotator_id" {
        return Err(header_err(
            path,
            "expected `instance_id,annotator_id,<dim1>,...`",
        ));
    }
    let dims = Dimensions::new(cols[2..].iter().cloned())
        .map_err(|e| header_err(path, e.to_string()))?;
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != cols.len() {
            return Err(parse_err(path, line, format!("expected {} fields", cols.len())));
        }
        let ratings = row
            .iter()
            .skip(2)
            .map(|c| parse_optional(path, line, c))
            .collect::<Result<Vec<_>, _>>()?;
        if row[0].is_empty() || row[1].is_empty() {
            return Err(parse_err(path, line, "empty instance or annotator id"));
        }
        records.push(AnnotationRecord::new(&row[0], &row[1], ratings));
    }
    Ok((dims, records))
}

pub fn write_annotations(
    path: &Path,
    dims: &Dimensions,
    records: &[AnnotationRecord],
) -> Result<(), FormatError> {
    let mut out = create(path)?;
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "instance_id,annotator_id,{}", dims.names().join(","))?;
        for r in records {
            let cells: Vec<String> = r
                .ratings
                .iter()
                .map(|v| v.map(fmt_f64).unwrap_or_default())
                .collect();
            writeln!(out, "{},{},{}", r.instance_id, r.annotator_id, cells.join(","))?;
        }
        out.flush()
    };
    write().map_err(io_err(path))
}

/// `instance_id,<f1>,...,<fP>`.
pub fn read_feature_csv(path: &Path) -> Result<Vec<Instance>, FormatError> {
    let mut reader = csv_reader(path)?;
    let cols = headers(path, &mut reader)?;
    if cols.len() < 2 || cols[0] != "instance_id" {
        return Err(header_err(path, "expected `instance_id,<f1>,...`"));
    }
    let mut seen = BTreeSet::new();
    let mut instances = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != cols.len() {
            return Err(parse_err(path, line, format!("expected {} fields", cols.len())));
        }
        if !seen.insert(row[0].to_string()) {
            return Err(parse_err(path, line, format!("duplicate instance `{}`", &row[0])));
        }
        let feats = row
            .iter()
            .skip(1)
            .map(|c| parse_value(path, line, c))
            .collect::<Result<Vec<_>, _>>()?;
        instances.push(Instance::new(&row[0], feats));
    }
    Ok(instances)
}

pub fn write_feature_csv(path: &Path, instances: &[Instance]) -> Result<(), FormatError> {
    let p = instances.first().map_or(0, |i| i.features.len());
    let mut out = create(path)?;
    let mut write = || -> std::io::Result<()> {
        let names: Vec<String> = (1..=p).map(|i| format!("f{i}")).collect();
        writeln!(out, "instance_id,{}", names.join(","))?;
        for inst in instances {
            let cells: Vec<String> = inst.features.iter().map(|v| fmt_f64(*v)).collect();
            writeln!(out, "{},{}", inst.id, cells.join(","))?;
        }
        out.flush()
    };
    write().map_err(io_err(path))
}

/// One word per line followed by its vector, whitespace separated. A leading
/// `<count> <dim>` line (word2vec text layout) is skipped.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable, FormatError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut entries = Vec::new();
    let mut dim: Option<usize> = None;
    for (ix, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let lineno = ix as u64 + 1;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        if ix == 0 && rest.len() == 1 && word.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
            continue;
        }
        let v = rest
            .iter()
            .map(|c| parse_value(path, lineno, c))
            .collect::<Result<Vec<_>, _>>()?;
        match dim {
            None => dim = Some(v.len()),
            Some(p) if p != v.len() => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("vector for `{word}` has {} entries, expected {p}", v.len()),
                ))
            }
            _ => {}
        }
        entries.push((word.to_string(), v));
    }
    let dim = dim.ok_or_else(|| FormatError::Invalid {
        path: path.to_path_buf(),
        msg: "no embeddings found".into(),
    })?;
    Ok(EmbeddingTable::new(dim, entries)?)
}

/// `instance_id<TAB>text`. With `pretokenized`, text is split on whitespace
/// only; otherwise it goes through [`tokenize`].
pub fn read_sentences(
    path: &Path,
    pretokenized: bool,
) -> Result<Vec<(String, Vec<String>)>, FormatError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (ix, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = ix as u64 + 1;
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, lineno, "expected `instance_id<TAB>text`"))?;
        let id = id.trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(parse_err(path, lineno, format!("duplicate instance `{id}`")));
        }
        let tokens = if pretokenized {
            text.split_whitespace().map(str::to_string).collect()
        } else {
            tokenize(text)
        };
        out.push((id, tokens));
    }
    Ok(out)
}

/// `word,<dim1>,...,<dimD>`.
pub fn read_lexicon(path: &Path) -> Result<NormLexicon, FormatError> {
    let mut reader = csv_reader(path)?;
    let cols = headers(path, &mut reader)?;
    if cols.len() < 2 || cols[0] != "word" {
        return Err(header_err(path, "expected `word,<dim1>,...`"));
    }
    let dims = Dimensions::new(cols[1..].iter().cloned())
        .map_err(|e| header_err(path, e.to_string()))?;
    let mut entries = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != cols.len() {
            return Err(parse_err(path, line, format!("expected {} fields", cols.len())));
        }
        let v = row
            .iter()
            .skip(1)
            .map(|c| parse_value(path, line, c))
            .collect::<Result<Vec<_>, _>>()?;
        entries.push((row[0].to_string(), v));
    }
    Ok(NormLexicon::new(dims, entries)?)
}

/// One word per line; blank lines and `#` comments ignored.
pub fn read_stoplist(path: &Path) -> Result<StopList, FormatError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(StopList::new(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#')),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotatorEntry {
    /// D×D transform, row-major.
    #[serde(rename = "F")]
    f: Vec<f64>,
    tau2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    dimensions: Vec<String>,
    num_features: usize,
    /// P×D, row-major.
    theta: Vec<f64>,
    sigma2: f64,
    annotators: BTreeMap<String, AnnotatorEntry>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub fn model_to_json(model: &FusionModel) -> String {
    let doc = ModelDocument {
        format_version: MODEL_FORMAT_VERSION,
        dimensions: model.dimensions.names().to_vec(),
        num_features: model.num_features(),
        theta: row_major(&model.theta),
        sigma2: model.sigma2,
        annotators: model
            .annotators
            .iter()
            .map(|(id, a)| {
                (
                    id.clone(),
                    AnnotatorEntry {
                        f: row_major(&a.transform),
                        tau2: a.noise_var,
                    },
                )
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("model document serializes")
}

pub fn model_from_json(path: &Path, text: &str) -> Result<FusionModel, FormatError> {
    let invalid = |msg: String| FormatError::Invalid {
        path: path.to_path_buf(),
        msg,
    };
    let doc: ModelDocument = serde_json::from_str(text).map_err(|e| FormatError::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        msg: e.to_string(),
    })?;
    if doc.format_version != MODEL_FORMAT_VERSION {
        return Err(FormatError::Version {
            path: path.to_path_buf(),
            version: doc.format_version,
        });
    }
    let dimensions = Dimensions::new(doc.dimensions)?;
    let d = dimensions.len();
    let p = doc.num_features;
    if doc.theta.len() != p * d {
        return Err(invalid(format!("theta has {} entries, expected {}", doc.theta.len(), p * d)));
    }
    let mut annotators = BTreeMap::new();
    for (id, a) in doc.annotators {
        if a.f.len() != d * d {
            return Err(invalid(format!("F of `{id}` has {} entries, expected {}", a.f.len(), d * d)));
        }
        annotators.insert(
            id,
            AnnotatorParams {
                transform: DMatrix::from_row_slice(d, d, &a.f),
                noise_var: a.tau2,
            },
        );
    }
    let model = FusionModel {
        dimensions,
        theta: DMatrix::from_row_slice(p, d, &doc.theta),
        sigma2: doc.sigma2,
        annotators,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &FusionModel) -> Result<(), FormatError> {
    std::fs::write(path, model_to_json(model) + "\n").map_err(io_err(path))
}

pub fn load_model(path: &Path) -> Result<FusionModel, FormatError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    model_from_json(path, &text)
}

/// `instance_id,<target>,condition_flag`, ordered by instance id.
pub fn write_predictions<W: Write>(
    out: &mut W,
    target: &str,
    predictions: &[Prediction],
) -> std::io::Result<()> {
    let mut sorted: Vec<&Prediction> = predictions.iter().collect();
    sorted.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    writeln!(out, "instance_id,{target},condition_flag")?;
    for p in sorted {
        writeln!(
            out,
            "{},{},{}",
            p.instance_id,
            fmt_f64(p.target_value),
            p.condition_flag
        )?;
    }
    out.flush()
}

/// `instance_id,<dim1>,...` with one row per instance (e.g. latent labels or
/// reference ratings).
pub fn write_value_rows<W: Write>(
    out: &mut W,
    dims: &Dimensions,
    rows: &[(String, DVector<f64>)],
) -> std::io::Result<()> {
    writeln!(out, "instance_id,{}", dims.names().join(","))?;
    for (id, v) in rows {
        let cells: Vec<String> = v.iter().map(|x| fmt_f64(*x)).collect();
        writeln!(out, "{id},{}", cells.join(","))?;
    }
    out.flush()
}

/// A prediction-shaped CSV: `instance_id` plus numeric columns, possibly with
/// blank cells. Known non-numeric columns (`condition_flag`, `status`) are
/// dropped on read.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub columns: Vec<String>,
    pub rows: BTreeMap<String, Vec<Option<f64>>>,
}

impl ValueTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

pub fn read_value_table(path: &Path) -> Result<ValueTable, FormatError> {
    let mut reader = csv_reader(path)?;
    let cols = headers(path, &mut reader)?;
    if cols.is_empty() || cols[0] != "instance_id" {
        return Err(header_err(path, "expected `instance_id,...`"));
    }
    let keep: Vec<usize> = (1..cols.len())
        .filter(|&i| !NON_VALUE_COLUMNS.contains(&cols[i].as_str()))
        .collect();
    let columns = keep.iter().map(|&i| cols[i].clone()).collect();
    let mut rows = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != cols.len() {
            return Err(parse_err(path, line, format!("expected {} fields", cols.len())));
        }
        let values = keep
            .iter()
            .map(|&i| parse_optional(path, line, &row[i]))
            .collect::<Result<Vec<_>, _>>()?;
        if rows.insert(row[0].to_string(), values).is_some() {
            return Err(parse_err(path, line, format!("duplicate instance `{}`", &row[0])));
        }
    }
    Ok(ValueTable { columns, rows })
}
