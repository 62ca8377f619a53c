//! On-disk formats.
//!
//! Model files are JSON:
//!
//! ```json
//! {"format_version": 1, "loss_kind": "softmax-cross-entropy",
//!  "layers": [{"rows": 2, "cols": 3, "activation": "tanh",
//!              "weights": [..], "bias": [..],
//!              "factors": {"rank": 1, "l": [..], "r": [..]}}]}
//! ```
//!
//! `weights` is row-major `rows × cols`; `l` is row-major `rows × rank` and
//! `r` row-major `cols × rank`, so the weight equals `l rᵀ`.
//!
//! Dataset files are CSV with no header. The first line is
//! `# format_version: 1`. Each row holds the features followed by the class
//! index. Regression datasets add a `# target_columns: <t>` line and end
//! each row with `t` target values instead of a label.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{FactorPair, Matrix};
use crate::network::{Activation, Dataset, Layer, LossKind, Network, Targets};

pub const FORMAT_VERSION: u32 = 1;

/// Relative mismatch tolerated between stored weights and `l rᵀ`.
const FACTOR_CONSISTENCY: f64 = 1e-9;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    loss_kind: LossKind,
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    rows: usize,
    cols: usize,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    factors: Option<FactorFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactorFile {
    rank: usize,
    l: Vec<f64>,
    r: Vec<f64>,
}

pub fn model_to_json(net: &Network) -> String {
    let file = ModelFile {
        format_version: FORMAT_VERSION,
        loss_kind: net.loss_kind(),
        layers: net
            .layers()
            .iter()
            .map(|layer| LayerFile {
                rows: layer.output_dim(),
                cols: layer.input_dim(),
                activation: layer.activation(),
                weights: layer.weight().as_slice().to_vec(),
                bias: layer.bias().to_vec(),
                factors: layer.factors().map(|f| FactorFile {
                    rank: f.rank(),
                    l: f.l.as_slice().to_vec(),
                    r: f.r.as_slice().to_vec(),
                }),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
    s.push('\n');
    s
}

pub fn model_from_json(text: &str) -> Result<Network> {
    let file: ModelFile =
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("model json: {e}")))?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported model format_version {}",
            file.format_version
        )));
    }
    let layers = file
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| layer_from_file(l).map_err(|e| e.in_layer(i)))
        .collect::<Result<Vec<_>>>()?;
    Network::new(layers, file.loss_kind)
}

fn layer_from_file(l: LayerFile) -> Result<Layer> {
    let weight = Matrix::new(l.rows, l.cols, l.weights)?;
    let Some(f) = l.factors else {
        return Layer::new(weight, l.bias, l.activation);
    };
    let factors = FactorPair::new(
        Matrix::new(l.rows, f.rank, f.l)?,
        Matrix::new(l.cols, f.rank, f.r)?,
    )?;
    let diff = factors.product().sub(&weight)?.max_abs();
    if diff > FACTOR_CONSISTENCY * weight.max_abs().max(1.0) {
        return Err(Error::invalid(format!(
            "stored weights differ from the factor product by {diff:e}"
        )));
    }
    Layer::decomposed(factors, l.bias, l.activation)
}

pub fn save_model(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, model_to_json(net)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Network> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn dataset_to_csv(data: &Dataset) -> String {
    let mut out = format!("# format_version: {FORMAT_VERSION}\n");
    if let Targets::Values(v) = data.targets() {
        out.push_str(&format!("# target_columns: {}\n", v[0].len()));
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for (i, x) in data.inputs().iter().enumerate() {
        let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        match data.targets() {
            Targets::Classes(l) => row.push(l[i].to_string()),
            Targets::Values(v) => row.extend(v[i].iter().map(|t| t.to_string())),
        }
        w.write_record(&row).expect("in-memory csv write");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf8"));
    out
}

pub fn dataset_from_csv(text: &str) -> Result<Dataset> {
    let mut version = None;
    let mut target_columns = None;
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        let body = line.trim_start_matches('#').trim();
        let (key, value) = body
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("malformed header line {line:?}")))?;
        let value: usize = value
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("malformed header line {line:?}")))?;
        match key.trim() {
            "format_version" => version = Some(value),
            "target_columns" => target_columns = Some(value),
            other => return Err(Error::invalid(format!("unknown header key {other:?}"))),
        }
    }
    match version {
        Some(v) if v == FORMAT_VERSION as usize => {}
        Some(v) => {
            return Err(Error::invalid(format!(
                "unsupported dataset format_version {v}"
            )))
        }
        None => return Err(Error::invalid("missing '# format_version: 1' line")),
    }
    if target_columns == Some(0) {
        return Err(Error::invalid("target_columns must be positive"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let tail = target_columns.unwrap_or(1);
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::invalid(format!("csv: {e}")))?;
        if record.len() <= tail {
            return Err(Error::invalid(format!(
                "row {}: expected features plus {tail} target column(s)",
                row + 1
            )));
        }
        let split = record.len() - tail;
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::invalid(format!("row {}: not a number: {s:?}", row + 1)))
        };
        inputs.push(
            record
                .iter()
                .take(split)
                .map(parse)
                .collect::<Result<Vec<_>>>()?,
        );
        if target_columns.is_some() {
            values.push(
                record
                    .iter()
                    .skip(split)
                    .map(parse)
                    .collect::<Result<Vec<_>>>()?,
            );
        } else {
            let label = &record[split];
            labels.push(label.parse::<usize>().map_err(|_| {
                Error::invalid(format!(
                    "row {}: label must be a class index, got {label:?}",
                    row + 1
                ))
            })?);
        }
    }
    if target_columns.is_some() {
        Dataset::regression(inputs, values)
    } else {
        Dataset::classification(inputs, labels)
    }
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_csv(data)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dataset_from_csv(&text).map_err(|e| Error::format(path, e.to_string()))
}
