//! Metrics, parameter accounting and serialized run reports.
//!
//! Reports are written deterministically: object keys are sorted and every
//! float is rounded to 9 significant digits. Wall-clock timing is left out
//! so identical runs produce identical bytes.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calibrator::EpsilonSource;
use crate::constraints::{check, max_compressive_rank};
use crate::error::{Error, Result};
use crate::formats::FORMAT_VERSION;
use crate::linalg::{svd, truncate};
use crate::network::{Dataset, GradientSnapshot, Network};
use crate::optimizer::{CompressionConfig, SkipReason};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    /// Classification only.
    pub top1: Option<f64>,
    /// Only when there are more than five classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    pub samples: usize,
}

/// Index of the largest logit, lowest index on ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Whether `label` is among the `k` largest logits, ties going to lower
/// indices.
fn in_top_k(v: &[f64], label: usize, k: usize) -> bool {
    let ahead = v
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > v[label] || (x == v[label] && i < label))
        .count();
    ahead < k
}

pub fn evaluate(net: &Network, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let loss = net.dataset_loss(data)?;
    let (top1, top5) = match data.labels() {
        Some(labels) => {
            let outputs = data
                .inputs()
                .par_iter()
                .map(|x| net.forward(x))
                .collect::<Result<Vec<_>>>()?;
            let m = labels.len() as f64;
            let hits1 = outputs
                .iter()
                .zip(labels)
                .filter(|(o, &l)| argmax(o) == l)
                .count();
            let top5 = (net.output_dim() > 5).then(|| {
                outputs
                    .iter()
                    .zip(labels)
                    .filter(|(o, &l)| in_top_k(o, l, 5))
                    .count() as f64
                    / m
            });
            (Some(hits1 as f64 / m), top5)
        }
        None => (None, None),
    };
    Ok(Metrics {
        loss,
        top1,
        top5,
        samples: data.len(),
    })
}

/// `(original − compressed) / original`.
pub fn drop_rate(original_params: usize, compressed_params: usize) -> Result<f64> {
    if original_params == 0 {
        return Err(Error::invalid("original parameter count is zero"));
    }
    if compressed_params > original_params {
        return Err(Error::invalid(format!(
            "compressed parameters {compressed_params} exceed original {original_params}"
        )));
    }
    Ok((original_params - compressed_params) as f64 / original_params as f64)
}

/// Drop rate as a negative percentage, e.g. `-68.00%`.
pub fn render_drop_rate(rate: f64) -> String {
    if rate == 0.0 {
        "0.00%".into()
    } else {
        format!("-{:.2}%", rate * 100.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub original_params: usize,
    pub compressed_params: usize,
    pub drop_rate: f64,
}

impl Totals {
    pub fn new(original_params: usize, compressed_params: usize) -> Result<Self> {
        Ok(Totals {
            original_params,
            compressed_params,
            drop_rate: drop_rate(original_params, compressed_params)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDecision {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub rank: Option<usize>,
    pub skip_reason: Option<SkipReason>,
    pub predicted_delta: Option<f64>,
    /// Calibration loss of the working network before and after this layer.
    pub loss_before: f64,
    pub loss_after: f64,
    pub max_abs_noise: Option<f64>,
    pub eps: Option<f64>,
    pub params_before: usize,
    pub params_after: usize,
    pub ranks_evaluated: usize,
}

impl LayerDecision {
    pub(crate) fn skipped(layer: usize, shape: (usize, usize), params: usize, loss: f64) -> Self {
        LayerDecision {
            layer,
            rows: shape.0,
            cols: shape.1,
            rank: None,
            skip_reason: None,
            predicted_delta: None,
            loss_before: loss,
            loss_after: loss,
            max_abs_noise: None,
            eps: None,
            params_before: params,
            params_after: params,
            ranks_evaluated: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSummary {
    pub layer: usize,
    pub eps: f64,
    pub source: EpsilonSource,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub before: Metrics,
    pub after: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub format_version: u32,
    pub config: CompressionConfig,
    pub layers: Vec<LayerDecision>,
    pub totals: Totals,
    pub calibration: SplitMetrics,
    pub holdout: Option<SplitMetrics>,
    pub epsilon: Vec<EpsilonSummary>,
    pub warnings: Vec<String>,
}

impl CompressionReport {
    pub(crate) fn new(
        config: CompressionConfig,
        layers: Vec<LayerDecision>,
        totals: Totals,
        calibration_before: Metrics,
        calibration_after: Metrics,
        epsilon: Vec<EpsilonSummary>,
        warnings: Vec<String>,
    ) -> Self {
        CompressionReport {
            format_version: FORMAT_VERSION,
            config,
            layers,
            totals,
            calibration: SplitMetrics {
                before: calibration_before,
                after: calibration_after,
            },
            holdout: None,
            epsilon,
            warnings,
        }
    }

    /// Attach metrics of the original and compressed networks on a
    /// held-out set.
    pub fn add_holdout(
        &mut self,
        original: &Network,
        compressed: &Network,
        data: &Dataset,
    ) -> Result<()> {
        self.holdout = Some(SplitMetrics {
            before: evaluate(original, data)?,
            after: evaluate(compressed, data)?,
        });
        Ok(())
    }

    pub fn factorized_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.rank.is_some()).count()
    }

    /// Recount totals from the per-layer entries.
    pub fn recount(&self) -> (usize, usize) {
        self.layers.iter().fold((0, 0), |(a, b), l| {
            (a + l.params_before, b + l.params_after)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::invalid(format!("unknown report format {s:?}"))),
        }
    }
}

/// `x` rounded to 9 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64 number");
            *v = serde_json::Number::from_f64(round_sig(x)).map_or(Value::Null, Value::Number);
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

/// Serialize any value with sorted keys and 9-significant-digit floats.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    let mut v = serde_json::to_value(value).expect("report serializes");
    round_floats(&mut v);
    let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
    s.push('\n');
    s
}

pub fn report_to_json(report: &CompressionReport) -> String {
    to_canonical_json(report)
}

pub fn report_from_json(text: &str) -> Result<CompressionReport> {
    serde_json::from_str(text).map_err(|e| Error::invalid(format!("report json: {e}")))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn float(x: f64) -> String {
    format!("{x:.8e}")
}

/// One row per layer.
pub fn report_to_csv(report: &CompressionReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "layer",
        "rows",
        "cols",
        "rank",
        "skip_reason",
        "eps",
        "max_abs_noise",
        "predicted_delta",
        "loss_before",
        "loss_after",
        "params_before",
        "params_after",
    ])
    .expect("in-memory csv");
    for l in &report.layers {
        let reason = l.skip_reason.map(|r| {
            serde_json::to_value(r)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default()
        });
        w.write_record([
            l.layer.to_string(),
            l.rows.to_string(),
            l.cols.to_string(),
            opt(l.rank),
            reason.unwrap_or_default(),
            opt(l.eps.map(float)),
            opt(l.max_abs_noise.map(float)),
            opt(l.predicted_delta.map(float)),
            float(l.loss_before),
            float(l.loss_after),
            l.params_before.to_string(),
            l.params_after.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
}

pub fn emit_report(report: &CompressionReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report_to_json(report),
        ReportFormat::Csv => report_to_csv(report),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub layer: usize,
    pub rank: usize,
    pub loss: f64,
    pub max_abs_noise: f64,
    pub admissible: bool,
}

/// Calibration loss after truncating one layer at every compressive rank.
pub fn rank_curve(
    net: &Network,
    data: &Dataset,
    grad: &GradientSnapshot,
    layer: usize,
    eps: f64,
) -> Result<Vec<CurvePoint>> {
    let l = net.layer(layer)?;
    if l.is_decomposed() {
        return Err(Error::State {
            layer,
            reason: "layer is already decomposed".into(),
        });
    }
    let w = l.weight();
    let d = svd(w).map_err(|e| e.in_layer(layer))?;
    (1..=max_compressive_rank(w.rows(), w.cols()))
        .into_par_iter()
        .map(|k| {
            let f = truncate(&d, k)?;
            let verdict = check(w, &f, grad.layer(layer), eps)?;
            let loss = net.apply_factorization(layer, f)?.dataset_loss(data)?;
            Ok(CurvePoint {
                layer,
                rank: k,
                loss,
                max_abs_noise: verdict.max_abs_noise,
                admissible: verdict.admissible(),
            })
        })
        .collect()
}

pub fn rank_curve_to_csv(points: &[CurvePoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "rank", "loss", "max_abs_noise", "admissible"])
        .expect("in-memory csv");
    for p in points {
        w.write_record([
            p.layer.to_string(),
            p.rank.to_string(),
            float(p.loss),
            float(p.max_abs_noise),
            p.admissible.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
}

pub fn rank_curve_from_csv(text: &str) -> Result<Vec<CurvePoint>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::invalid(format!("rank curve csv: {e}"))))
        .collect()
}
