//! Routing instances, datasets, and the JSONL/CSV record formats.
//!
//! A record carries the precomputed embedding of a judging context, whether
//! each judge mode got the preference right, and the raw token cost of each
//! mode. Costs are normalized by the mean instruct-mode cost so that a budget
//! is expressed as a cost ratio: the all-instruct policy costs exactly 1.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Instruct (non-reasoning) judge mode.
pub const INSTRUCT: usize = 0;
/// Reasoning judge mode.
pub const REASONING: usize = 1;

/// One routing example.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub features: Vec<f64>,
    /// `correct[a]`: whether judge mode `a` matched the preference label.
    pub correct: [bool; 2],
    /// Raw token consumption of each mode.
    pub cost_raw: [f64; 2],
    /// Cost in cost-ratio units (raw divided by the dataset's normalization constant).
    pub cost: [f64; 2],
    pub tag: Option<String>,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        features: Vec<f64>,
        correct: [bool; 2],
        cost_raw: [f64; 2],
        tag: Option<String>,
    ) -> Self {
        Instance {
            id: id.into(),
            features,
            correct,
            cost_raw,
            cost: cost_raw,
            tag,
        }
    }

    /// Reward `r(z, a)` as 0.0 or 1.0.
    #[inline]
    pub fn reward(&self, action: usize) -> f64 {
        if self.correct[action] {
            1.0
        } else {
            0.0
        }
    }

    fn validate(&self, line: usize) -> Result<()> {
        for (a, c) in self.cost_raw.iter().enumerate() {
            if !(c.is_finite() && *c > 0.0) {
                return Err(Error::Validation(format!(
                    "record {line} (`{}`): cost_{a} must be positive and finite, got {c}",
                    self.id
                )));
            }
        }
        if let Some(i) = self.features.iter().position(|x| !x.is_finite()) {
            return Err(Error::Validation(format!(
                "record {line} (`{}`): feature {i} is not finite",
                self.id
            )));
        }
        Ok(())
    }
}

/// File formats accepted by [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl DataFormat {
    /// Guess from the file extension; anything other than `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Jsonl,
        }
    }
}

/// Immutable, validated collection of instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    instances: Vec<Instance>,
    dim: usize,
    instruct_cost_mean: f64,
    normalized: bool,
}

impl Dataset {
    /// Validates the instances and leaves costs in raw units.
    pub fn new(instances: Vec<Instance>) -> Result<Self> {
        let first = instances.first().ok_or(Error::EmptyDataset)?;
        let dim = first.features.len();
        for (i, inst) in instances.iter().enumerate() {
            inst.validate(i + 1)?;
            if inst.features.len() != dim {
                return Err(Error::Validation(format!(
                    "record {} (`{}`): feature dimension {} disagrees with {}",
                    i + 1,
                    inst.id,
                    inst.features.len(),
                    dim
                )));
            }
        }
        let instruct_cost_mean =
            instances.iter().map(|x| x.cost_raw[INSTRUCT]).sum::<f64>() / instances.len() as f64;
        let mut ds = Dataset {
            instances,
            dim,
            instruct_cost_mean,
            normalized: false,
        };
        ds.apply_scale(1.0);
        Ok(ds)
    }

    /// Normalizes costs by this dataset's own mean instruct cost.
    ///
    /// Costs are always recomputed from the raw values, so applying this twice is a no-op.
    pub fn normalize(self) -> Self {
        let constant = self.raw_instruct_mean();
        self.with_scale(constant)
    }

    /// Normalizes costs by an externally supplied constant, typically a training set's.
    pub fn normalize_with(self, instruct_cost_mean: f64) -> Result<Self> {
        if !(instruct_cost_mean.is_finite() && instruct_cost_mean > 0.0) {
            return Err(Error::Validation(format!(
                "normalization constant must be positive, got {instruct_cost_mean}"
            )));
        }
        Ok(self.with_scale(instruct_cost_mean))
    }

    fn with_scale(mut self, constant: f64) -> Self {
        self.instruct_cost_mean = constant;
        self.normalized = true;
        self.apply_scale(constant);
        self
    }

    fn apply_scale(&mut self, constant: f64) {
        for inst in &mut self.instances {
            inst.cost = [inst.cost_raw[0] / constant, inst.cost_raw[1] / constant];
        }
    }

    fn raw_instruct_mean(&self) -> f64 {
        self.instances
            .iter()
            .map(|x| x.cost_raw[INSTRUCT])
            .sum::<f64>()
            / self.instances.len() as f64
    }

    /// Subset in the given order, keeping this dataset's normalization.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Dataset {
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            dim: self.dim,
            instruct_cost_mean: self.instruct_cost_mean,
            normalized: self.normalized,
        })
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

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn instruct_cost_mean(&self) -> f64 {
        self.instruct_cost_mean
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Mean normalized cost of `action` over all instances.
    pub fn mean_cost(&self, action: usize) -> f64 {
        self.instances.iter().map(|x| x.cost[action]).sum::<f64>() / self.len() as f64
    }

    /// Fraction of instances on which `action` is correct.
    pub fn accuracy_of(&self, action: usize) -> f64 {
        self.instances.iter().map(|x| x.reward(action)).sum::<f64>() / self.len() as f64
    }

    pub fn max_cost(&self, action: usize) -> f64 {
        self.instances
            .iter()
            .map(|x| x.cost[action])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write(&self, path: &Path, format: DataFormat) -> Result<()> {
        match format {
            DataFormat::Jsonl => self.write_jsonl(path),
            DataFormat::Csv => self.write_csv(path),
        }
    }

    /// Writes raw costs, one JSON object per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for inst in &self.instances {
            let rec = JsonRecord::from(inst);
            serde_json::to_writer(&mut w, &rec)
                .map_err(|e| Error::Validation(format!("serializing `{}`: {e}", inst.id)))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes raw costs with `feat_0..feat_{d-1}` columns.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header = vec!["id".to_string()];
        header.extend((0..self.dim).map(|j| format!("feat_{j}")));
        header.extend(
            ["correct_0", "correct_1", "cost_0", "cost_1", "tag"]
                .iter()
                .map(|s| s.to_string()),
        );
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for inst in &self.instances {
            let mut row = Vec::with_capacity(header.len());
            row.push(inst.id.clone());
            row.extend(inst.features.iter().map(|x| x.to_string()));
            row.push(u8::from(inst.correct[0]).to_string());
            row.push(u8::from(inst.correct[1]).to_string());
            row.push(inst.cost_raw[0].to_string());
            row.push(inst.cost_raw[1].to_string());
            row.push(inst.tag.clone().unwrap_or_default());
            w.write_record(&row).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("csv error on {}: {other:?}", path.display())),
    }
}

/// The JSONL record schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    id: String,
    features: Vec<f64>,
    correct_0: u8,
    correct_1: u8,
    cost_0: f64,
    cost_1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<String>,
}

impl From<&Instance> for JsonRecord {
    fn from(inst: &Instance) -> Self {
        JsonRecord {
            id: inst.id.clone(),
            features: inst.features.clone(),
            correct_0: u8::from(inst.correct[0]),
            correct_1: u8::from(inst.correct[1]),
            cost_0: inst.cost_raw[0],
            cost_1: inst.cost_raw[1],
            tag: inst.tag.clone(),
        }
    }
}

fn indicator(v: u8, line: usize, field: &str) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(Error::Parse {
            line,
            message: format!("{field} must be 0 or 1, got {other}"),
        }),
    }
}

/// Reads a dataset and normalizes its costs by the mean instruct cost.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    let instances = match format {
        DataFormat::Jsonl => read_jsonl(path)?,
        DataFormat::Csv => read_csv(path)?,
    };
    Ok(Dataset::new(instances)?.normalize())
}

fn read_jsonl(path: &Path) -> Result<Vec<Instance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let inst = Instance::new(
            rec.id,
            rec.features,
            [
                indicator(rec.correct_0, lineno, "correct_0")?,
                indicator(rec.correct_1, lineno, "correct_1")?,
            ],
            [rec.cost_0, rec.cost_1],
            rec.tag,
        );
        inst.validate(lineno)?;
        out.push(inst);
    }
    Ok(out)
}

fn read_csv(path: &Path) -> Result<Vec<Instance>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_io(path, e))?.clone();
    let col: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let need = |name: &str| {
        col.get(name).copied().ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let id_col = need("id")?;
    let c0 = need("correct_0")?;
    let c1 = need("correct_1")?;
    let k0 = need("cost_0")?;
    let k1 = need("cost_1")?;
    let tag_col = col.get("tag").copied();
    let mut feat_cols = Vec::new();
    while let Some(&c) = col.get(format!("feat_{}", feat_cols.len()).as_str()) {
        feat_cols.push(c);
    }

    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // header occupies line 1
        let lineno = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let num = |c: usize| -> Result<f64> {
            field(c).trim().parse::<f64>().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("column `{}`: {e}", &headers[c]),
            })
        };
        let flag = |c: usize| -> Result<bool> {
            let v = field(c).trim().parse::<u8>().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("column `{}`: {e}", &headers[c]),
            })?;
            indicator(v, lineno, &headers[c])
        };
        let features = feat_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
        let tag = tag_col
            .map(|c| field(c).to_string())
            .filter(|t| !t.is_empty());
        let inst = Instance::new(
            field(id_col),
            features,
            [flag(c0)?, flag(c1)?],
            [num(k0)?, num(k1)?],
            tag,
        );
        inst.validate(lineno)?;
        out.push(inst);
    }
    Ok(out)
}
