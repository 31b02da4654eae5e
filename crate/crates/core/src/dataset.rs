//! GCD dataset model and the tab-separated feature file format.
//!
//! ```text
//! #gcd-features<TAB>dim=<D>
//! <id><TAB><labeled|unlabeled|test><TAB><gt_label><TAB><f_1>...<TAB><f_D>
//! ```
//!
//! Floats are written in scientific notation with 17 significant digits, which
//! round-trips every finite `f64` exactly.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CategoryId = u32;

const HEADER_MAGIC: &str = "#gcd-features";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "labeled" => Ok(Split::Labeled),
            "unlabeled" => Ok(Split::Unlabeled),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split tag {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub embedding: Vec<f64>,
    pub split: Split,
    /// Ground truth. Training code may only read this on the labeled split.
    pub gt_label: CategoryId,
}

/// An immutable collection of instances sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    instances: Vec<Instance>,
    known_categories: BTreeSet<CategoryId>,
    all_categories: BTreeSet<CategoryId>,
}

impl Dataset {
    /// Validates the instances and derives the known/all category sets.
    pub fn new(dim: usize, instances: Vec<Instance>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        for inst in &instances {
            if inst.embedding.len() != dim {
                return Err(Error::invalid(format!(
                    "instance {:?} has {} components, expected {dim}",
                    inst.id,
                    inst.embedding.len()
                )));
            }
            if !crate::vector::all_finite(&inst.embedding) {
                return Err(Error::invalid(format!(
                    "instance {:?} has a non-finite component",
                    inst.id
                )));
            }
        }
        let known_categories = instances
            .iter()
            .filter(|i| i.split == Split::Labeled)
            .map(|i| i.gt_label)
            .collect();
        let all_categories = instances.iter().map(|i| i.gt_label).collect();
        Ok(Self {
            dim,
            instances,
            known_categories,
            all_categories,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn known_categories(&self) -> &BTreeSet<CategoryId> {
        &self.known_categories
    }

    pub fn all_categories(&self) -> &BTreeSet<CategoryId> {
        &self.all_categories
    }

    /// M, the number of known categories.
    pub fn num_known(&self) -> usize {
        self.known_categories.len()
    }

    /// K, the number of categories across all splits.
    pub fn num_categories(&self) -> usize {
        self.all_categories.len()
    }

    pub fn is_known(&self, c: CategoryId) -> bool {
        self.known_categories.contains(&c)
    }

    /// Indices of instances in `split`, in file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, i)| i.split == split)
            .map(|(idx, _)| idx)
            .collect()
    }

    pub fn embeddings(&self, indices: &[usize]) -> Vec<Vec<f64>> {
        indices
            .iter()
            .map(|&i| self.instances[i].embedding.clone())
            .collect()
    }

    pub fn summary(&self) -> SplitSummary {
        split_summary(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    pub known: usize,
    pub total_categories: usize,
    pub novel: usize,
    /// Labeled share of the training instances (labeled + unlabeled).
    pub labeled_ratio: f64,
    pub warnings: Vec<String>,
}

pub fn split_summary(ds: &Dataset) -> SplitSummary {
    let mut counts = [0usize; 3];
    for inst in ds.instances() {
        counts[inst.split as usize] += 1;
    }
    let [labeled, unlabeled, test] = counts;
    let train = labeled + unlabeled;
    let mut warnings = Vec::new();
    if labeled == 0 {
        warnings.push("no labeled instances: M = 0".to_string());
    }
    if unlabeled == 0 {
        warnings.push("no unlabeled instances".to_string());
    }
    SplitSummary {
        labeled,
        unlabeled,
        test,
        known: ds.num_known(),
        total_categories: ds.num_categories(),
        novel: ds.num_categories() - ds.num_known(),
        labeled_ratio: if train == 0 {
            0.0
        } else {
            labeled as f64 / train as f64
        },
        warnings,
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_header(path: &Path, line: &str) -> Result<usize> {
    let mut parts = line.split('\t');
    if parts.next() != Some(HEADER_MAGIC) {
        return Err(parse_err(path, 1, format!("expected header starting with {HEADER_MAGIC:?}")));
    }
    let dim = parts
        .next()
        .and_then(|p| p.strip_prefix("dim="))
        .ok_or_else(|| parse_err(path, 1, "header is missing dim=<D>"))?;
    if parts.next().is_some() {
        return Err(parse_err(path, 1, "unexpected trailing header field"));
    }
    match dim.parse::<usize>() {
        Ok(d) if d > 0 => Ok(d),
        _ => Err(parse_err(path, 1, format!("invalid dimension {dim:?}"))),
    }
}

fn parse_row(path: &Path, lineno: usize, line: &str, dim: usize) -> Result<Instance> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != dim + 3 {
        return Err(parse_err(
            path,
            lineno,
            format!("expected {} fields (dim={dim}), found {}", dim + 3, fields.len()),
        ));
    }
    let split = fields[1]
        .parse::<Split>()
        .map_err(|m| parse_err(path, lineno, m))?;
    let label: i64 = fields[2]
        .parse()
        .map_err(|_| parse_err(path, lineno, format!("invalid label {:?}", fields[2])))?;
    let gt_label = CategoryId::try_from(label)
        .map_err(|_| parse_err(path, lineno, format!("label {label} out of range")))?;
    let mut embedding = Vec::with_capacity(dim);
    for (k, f) in fields[3..].iter().enumerate() {
        let v: f64 = f
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("component {}: invalid float {f:?}", k + 1)))?;
        if !v.is_finite() {
            return Err(parse_err(path, lineno, format!("component {}: non-finite value", k + 1)));
        }
        embedding.push(v);
    }
    Ok(Instance {
        id: fields[0].to_string(),
        embedding,
        split,
        gt_label,
    })
}

pub fn read_feature_file(path: &Path, reader: impl BufRead) -> Result<Dataset> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(parse_err(path, 1, "empty file")),
    };
    let dim = parse_header(path, header.trim_end_matches('\r'))?;
    let mut instances = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        instances.push(parse_row(path, lineno, line, dim)?);
    }
    Dataset::new(dim, instances)
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_feature_file(path, BufReader::new(file))
}

pub fn write_feature_file(ds: &Dataset, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{HEADER_MAGIC}\tdim={}", ds.dim())?;
    for inst in ds.instances() {
        write!(w, "{}\t{}\t{}", inst.id, inst.split, inst.gt_label)?;
        for v in &inst.embedding {
            write!(w, "\t{v:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn save_feature_file(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_feature_file(ds, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
