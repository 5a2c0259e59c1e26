//! Text formats: JSON model and sample documents, and the triplet dump used
//! for matrices.
//!
//! A model document looks like
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "layer_sizes": [1, 1, 1],
//!   "weights": [[[1.0]], [[1.0]]],
//!   "biases": [[0.0], [0.0]]
//! }
//! ```
//!
//! where `weights[l - 1]` is `W_l` as a list of rows (row = target neuron in
//! layer `l`, column = source neuron in layer `l - 1`) and `biases[l - 1]`
//! is `b_l`. A sample document is `{"format_version": 1, "inputs": [[...], ...]}`
//! with one row per input.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Architecture, NetworkParams};
use crate::pathspace::{TripletMatrix, PATH_ORDER_VERSION};

pub const FORMAT_VERSION: u32 = 1;
pub const TRIPLET_MAGIC: &str = "# reluid-triplet v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub format_version: u32,
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleDocument {
    pub format_version: u32,
    pub inputs: Vec<Vec<f64>>,
}

fn json_error(what: &str, e: serde_json::Error) -> Error {
    Error::Format(format!("{what}: line {}, column {}: {e}", e.line(), e.column()))
}

fn check_version(what: &str, v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("{what}: field `format_version`: unsupported version {v}, expected {FORMAT_VERSION}")));
    }
    Ok(())
}

impl ModelDocument {
    pub fn from_params(params: &NetworkParams) -> Self {
        let arch = params.arch();
        let weights = (1..=arch.depth())
            .map(|l| {
                let w = params.weight_matrix(l);
                (0..w.nrows()).map(|r| w.row(r).iter().copied().collect()).collect()
            })
            .collect();
        let biases = (1..=arch.depth()).map(|l| params.bias_vector(l).iter().copied().collect()).collect();
        Self { format_version: FORMAT_VERSION, layer_sizes: arch.layer_sizes().to_vec(), weights, biases }
    }

    pub fn to_params(&self) -> Result<NetworkParams> {
        check_version("model", self.format_version)?;
        let arch = Architecture::new(self.layer_sizes.clone()).map_err(|e| Error::Format(format!("model: field `layer_sizes`: {e}")))?;
        let sizes = arch.layer_sizes();
        let depth = arch.depth();
        if self.weights.len() != depth {
            return Err(Error::Format(format!("model: field `weights`: expected {depth} matrices, found {}", self.weights.len())));
        }
        if self.biases.len() != depth {
            return Err(Error::Format(format!("model: field `biases`: expected {depth} vectors, found {}", self.biases.len())));
        }
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        for l in 1..=depth {
            let (rows, cols) = (sizes[l], sizes[l - 1]);
            let m = &self.weights[l - 1];
            if m.len() != rows {
                return Err(Error::Format(format!("model: field `weights[{}]`: expected {rows} rows, found {}", l - 1, m.len())));
            }
            for (r, row) in m.iter().enumerate() {
                if row.len() != cols {
                    return Err(Error::Format(format!(
                        "model: field `weights[{}][{r}]`: expected {cols} entries, found {}",
                        l - 1,
                        row.len()
                    )));
                }
            }
            weights.push(DMatrix::from_fn(rows, cols, |r, c| m[r][c]));
            let b = &self.biases[l - 1];
            if b.len() != rows {
                return Err(Error::Format(format!("model: field `biases[{}]`: expected {rows} entries, found {}", l - 1, b.len())));
            }
            biases.push(DVector::from_column_slice(b));
        }
        NetworkParams::new(arch, weights, biases).map_err(|e| Error::Format(format!("model: {e}")))
    }
}

impl SampleDocument {
    pub fn from_matrix(inputs: &DMatrix<f64>) -> Self {
        Self { format_version: FORMAT_VERSION, inputs: (0..inputs.nrows()).map(|r| inputs.row(r).iter().copied().collect()).collect() }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        check_version("sample", self.format_version)?;
        let Some(first) = self.inputs.first() else {
            return Err(Error::Format("sample: field `inputs`: no rows".into()));
        };
        let cols = first.len();
        for (i, row) in self.inputs.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Format(format!("sample: field `inputs[{i}]`: expected {cols} entries, found {}", row.len())));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::Format(format!("sample: field `inputs[{i}][{j}]`: non-finite value")));
            }
        }
        Ok(DMatrix::from_fn(self.inputs.len(), cols, |r, c| self.inputs[r][c]))
    }
}

pub fn parse_model(text: &str) -> Result<NetworkParams> {
    let doc: ModelDocument = serde_json::from_str(text).map_err(|e| json_error("model", e))?;
    doc.to_params()
}

pub fn model_to_string(params: &NetworkParams) -> String {
    to_json(&ModelDocument::from_params(params))
}

pub fn parse_sample(text: &str) -> Result<DMatrix<f64>> {
    let doc: SampleDocument = serde_json::from_str(text).map_err(|e| json_error("sample", e))?;
    doc.to_matrix()
}

pub fn sample_to_string(inputs: &DMatrix<f64>) -> String {
    to_json(&SampleDocument::from_matrix(inputs))
}

/// Pretty JSON with a trailing newline. Field order follows the struct
/// declaration, so equal values give identical bytes.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// Triplet dump: a header, then one `row col value` line per stored entry
/// (0-based indices, values in shortest round-trip form).
pub fn triplets_to_string(kind: &str, m: &TripletMatrix<f64>) -> String {
    let mut s = String::new();
    writeln!(s, "{TRIPLET_MAGIC}").unwrap();
    writeln!(s, "# path_order {PATH_ORDER_VERSION}").unwrap();
    writeln!(s, "# kind {kind}").unwrap();
    writeln!(s, "# rows {} cols {} nnz {}", m.nrows, m.ncols, m.entries.len()).unwrap();
    for (r, c, v) in &m.entries {
        writeln!(s, "{r} {c} {v:?}").unwrap();
    }
    s
}

/// Reads a triplet dump back; returns the kind and the matrix.
pub fn parse_triplets(text: &str) -> Result<(String, TripletMatrix<f64>)> {
    let mut lines = text.lines().enumerate();
    let mut next_header = |expect: &str| -> Result<String> {
        let (n, line) = lines.next().ok_or_else(|| Error::Format(format!("triplet: missing `{expect}` header")))?;
        line.strip_prefix(expect)
            .map(|rest| rest.trim().to_string())
            .ok_or_else(|| Error::Format(format!("triplet: line {}: expected `{expect}`", n + 1)))
    };
    next_header(TRIPLET_MAGIC)?;
    let order = next_header("# path_order")?;
    if order != PATH_ORDER_VERSION {
        return Err(Error::Format(format!("triplet: unknown path order `{order}`")));
    }
    let kind = next_header("# kind")?;
    let dims = next_header("# rows")?;
    let nums: Vec<&str> = dims.split_whitespace().collect();
    let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("triplet: bad dimension `{s}`")));
    if nums.len() != 5 || nums[1] != "cols" || nums[3] != "nnz" {
        return Err(Error::Format("triplet: line 4: expected `# rows R cols C nnz K`".into()));
    }
    let (nrows, ncols, nnz) = (parse_usize(nums[0])?, parse_usize(nums[2])?, parse_usize(nums[4])?);
    let mut entries = Vec::with_capacity(nnz);
    for (n, line) in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Format(format!("triplet: line {}: expected `row col value`", n + 1));
        if parts.len() != 3 {
            return Err(bad());
        }
        let r: usize = parts[0].parse().map_err(|_| bad())?;
        let c: usize = parts[1].parse().map_err(|_| bad())?;
        let v: f64 = parts[2].parse().map_err(|_| bad())?;
        if r >= nrows || c >= ncols {
            return Err(Error::Format(format!("triplet: line {}: index out of range", n + 1)));
        }
        entries.push((r, c, v));
    }
    if entries.len() != nnz {
        return Err(Error::Format(format!("triplet: header says {nnz} entries, found {}", entries.len())));
    }
    Ok((kind, TripletMatrix { nrows, ncols, entries }))
}
