//! Empirical checks of the first-order loss model and per-layer epsilon
//! selection.
//!
//! A probe perturbs one layer by `±δ` and compares the measured loss with
//! the linear prediction `loss ± ⟨grad, δ⟩`. The deltas are the actual
//! truncated-SVD noises of the layer, bucketed by their max-abs entry
//! against an epsilon grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{max_compressive_rank, predicted_loss_delta};
use crate::error::{Error, Result};
use crate::linalg::{noise, svd, truncate, Matrix};
use crate::network::{Dataset, GradientSnapshot, Network};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_GRID: [f64; 5] = [1e-4, 5e-4, 1e-3, 1e-2, 1e-1];
pub const GRADIENT_SMALL_THRESHOLD: f64 = 1e-3;

/// How losses are aggregated inside a probe.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Compare dataset-mean losses.
    #[default]
    DatasetMean,
    /// Worst single-sample discrepancy, using per-sample gradients.
    PerSampleMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    pub enabled: bool,
    pub tolerance: f64,
    pub grid: Vec<f64>,
    pub aggregation: Aggregation,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            enabled: true,
            tolerance: DEFAULT_TOLERANCE,
            grid: DEFAULT_GRID.to_vec(),
            aggregation: Aggregation::DatasetMean,
        }
    }
}

impl ProbeSettings {
    fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::invalid(format!(
                "probe tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.grid.is_empty()
            || self.grid.iter().any(|g| !(*g > 0.0 && g.is_finite()))
            || self.grid.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::invalid(
                "probe grid must be non-empty, positive and strictly increasing",
            ));
        }
        Ok(())
    }

    /// Index of the smallest grid value bounding `max_abs`.
    fn bucket(&self, max_abs: f64) -> Option<usize> {
        if max_abs == 0.0 {
            return None;
        }
        self.grid.iter().position(|&g| max_abs <= g)
    }
}

/// Discrepancies for `+δ` and `−δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborhoodProbe {
    pub plus: f64,
    pub minus: f64,
}

impl NeighborhoodProbe {
    pub fn value(&self) -> f64 {
        self.plus.max(self.minus)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondOrder {
    /// `⟨grad, δ⟩`
    pub first_order: f64,
    /// `measured − first_order`
    pub residual: f64,
    pub measured: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub layer: usize,
    pub rank: usize,
    /// Grid value whose bucket holds this noise, if any.
    pub eps_bound: Option<f64>,
    pub max_abs_noise: f64,
    /// Measured loss change at `+δ`.
    pub delta_loss: f64,
    pub discrepancy: f64,
    pub first_order: f64,
    pub residual: f64,
}

fn check_delta(net: &Network, layer: usize, delta: &Matrix) -> Result<()> {
    let w = net.layer(layer)?.weight();
    if w.shape() != delta.shape() {
        return Err(Error::invalid(format!(
            "delta shape {:?} does not match layer {layer} weight shape {:?}",
            delta.shape(),
            w.shape()
        )));
    }
    Ok(())
}

/// Both-sign probe of the linear loss model on the dataset-mean loss.
pub fn probe_neighborhood(
    net: &Network,
    data: &Dataset,
    grad: &GradientSnapshot,
    layer: usize,
    delta: &Matrix,
) -> Result<NeighborhoodProbe> {
    let base = net.dataset_loss(data)?;
    probe_with_base(net, data, grad, layer, delta, base)
}

fn probe_with_base(
    net: &Network,
    data: &Dataset,
    grad: &GradientSnapshot,
    layer: usize,
    delta: &Matrix,
    base: f64,
) -> Result<NeighborhoodProbe> {
    check_delta(net, layer, delta)?;
    let first = predicted_loss_delta(grad.layer(layer), delta)?;
    let plus = net.perturb(layer, delta)?.dataset_loss(data)?;
    let minus = net.perturb(layer, &delta.scale(-1.0))?.dataset_loss(data)?;
    Ok(NeighborhoodProbe {
        plus: (plus - (base + first)).abs(),
        minus: (minus - (base - first)).abs(),
    })
}

/// `max_± |loss(w ± δ) − (loss(w) ± ⟨grad, δ⟩)|` on the dataset-mean loss.
pub fn neighborhood_discrepancy(
    net: &Network,
    data: &Dataset,
    grad: &GradientSnapshot,
    layer: usize,
    delta: &Matrix,
) -> Result<f64> {
    Ok(probe_neighborhood(net, data, grad, layer, delta)?.value())
}

/// Worst per-sample discrepancy, each sample judged against its own
/// gradient.
pub fn per_sample_discrepancy(
    net: &Network,
    data: &Dataset,
    layer: usize,
    delta: &Matrix,
) -> Result<f64> {
    check_delta(net, layer, delta)?;
    let plus_net = net.perturb(layer, delta)?;
    let minus_net = net.perturb(layer, &delta.scale(-1.0))?;
    let base = net.sample_losses(data)?;
    let plus = plus_net.sample_losses(data)?;
    let minus = minus_net.sample_losses(data)?;
    let mut worst: f64 = 0.0;
    for i in 0..data.len() {
        let g = net.gradients(&data.sample(i))?;
        let first = predicted_loss_delta(g.layer(layer), delta)?;
        worst = worst
            .max((plus[i] - (base[i] + first)).abs())
            .max((minus[i] - (base[i] - first)).abs());
    }
    Ok(worst)
}

/// First-order prediction against the measured change for `+δ`.
pub fn second_order_diagnostic(
    net: &Network,
    data: &Dataset,
    grad: &GradientSnapshot,
    layer: usize,
    delta: &Matrix,
) -> Result<SecondOrder> {
    let base = net.dataset_loss(data)?;
    second_order_with_base(net, data, grad, layer, delta, base)
}

fn second_order_with_base(
    net: &Network,
    data: &Dataset,
    grad: &GradientSnapshot,
    layer: usize,
    delta: &Matrix,
    base: f64,
) -> Result<SecondOrder> {
    check_delta(net, layer, delta)?;
    let first_order = predicted_loss_delta(grad.layer(layer), delta)?;
    let measured = net.perturb(layer, delta)?.dataset_loss(data)? - base;
    Ok(SecondOrder {
        first_order,
        residual: measured - first_order,
        measured,
    })
}

/// Which truncation ranks a probe sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankRange {
    /// `1..=max_compressive_rank`, the ranks the optimizer considers.
    Compressive,
    /// `1..full_rank`, every proper truncation.
    All,
}

/// Probe every truncation noise of one layer.
pub fn probe_layer(
    net: &Network,
    data: &Dataset,
    grad: &GradientSnapshot,
    layer: usize,
    settings: &ProbeSettings,
    ranks: RankRange,
) -> Result<Vec<ProbeRecord>> {
    settings.validate()?;
    let w = net.layer(layer)?.weight();
    let decomposition = svd(w).map_err(|e| e.in_layer(layer))?;
    let last = match ranks {
        RankRange::Compressive => max_compressive_rank(w.rows(), w.cols()),
        RankRange::All => decomposition.full_rank().saturating_sub(1),
    };
    let base = net.dataset_loss(data)?;
    (1..=last)
        .into_par_iter()
        .map(|k| {
            let n = noise(w, &truncate(&decomposition, k)?)?;
            let probe = match settings.aggregation {
                Aggregation::DatasetMean => {
                    probe_with_base(net, data, grad, layer, &n.delta, base)?.value()
                }
                Aggregation::PerSampleMax => per_sample_discrepancy(net, data, layer, &n.delta)?,
            };
            let so = second_order_with_base(net, data, grad, layer, &n.delta, base)?;
            Ok(ProbeRecord {
                layer,
                rank: k,
                eps_bound: settings.bucket(n.max_abs).map(|b| settings.grid[b]),
                max_abs_noise: n.max_abs,
                delta_loss: so.measured,
                discrepancy: probe,
                first_order: so.first_order,
                residual: so.residual,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsilonSource {
    Calibrated,
    /// Probing found no usable noise; the default epsilon is used.
    Fallback,
    Disabled,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSelection {
    pub layer: usize,
    pub eps: f64,
    pub source: EpsilonSource,
    /// False when even the smallest occupied bucket exceeded the tolerance,
    /// in which case `eps` is the smallest grid value.
    pub within_tolerance: bool,
    pub records: Vec<ProbeRecord>,
}

/// Largest grid epsilon such that every occupied bucket at or below it keeps
/// its worst discrepancy under the tolerance.
pub fn select_epsilon(
    net: &Network,
    data: &Dataset,
    grad: &GradientSnapshot,
    layer: usize,
    settings: &ProbeSettings,
) -> Result<EpsilonSelection> {
    if !settings.enabled {
        net.layer(layer)?;
        return Ok(EpsilonSelection {
            layer,
            eps: DEFAULT_EPSILON,
            source: EpsilonSource::Disabled,
            within_tolerance: true,
            records: Vec::new(),
        });
    }
    let records = probe_layer(net, data, grad, layer, settings, RankRange::Compressive)?;
    let mut worst: Vec<Option<f64>> = vec![None; settings.grid.len()];
    for r in &records {
        if let Some(b) = settings.bucket(r.max_abs_noise) {
            let w = worst[b].get_or_insert(0.0);
            *w = w.max(r.discrepancy);
        }
    }
    if worst.iter().all(Option::is_none) {
        return Err(Error::CalibrationUnavailable { layer });
    }
    let mut chosen = None;
    for (b, w) in worst.iter().enumerate() {
        match w {
            Some(d) if *d >= settings.tolerance => break,
            _ => chosen = Some(b),
        }
    }
    Ok(EpsilonSelection {
        layer,
        eps: settings.grid[chosen.unwrap_or(0)],
        source: EpsilonSource::Calibrated,
        within_tolerance: chosen.is_some(),
        records,
    })
}

/// Per-layer epsilon for every layer eligible for factorization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonProfile {
    pub settings: ProbeSettings,
    pub layers: Vec<EpsilonSelection>,
}

impl EpsilonProfile {
    pub fn eps_for(&self, layer: usize) -> Option<f64> {
        self.layers.iter().find(|s| s.layer == layer).map(|s| s.eps)
    }

    pub fn selection(&self, layer: usize) -> Option<&EpsilonSelection> {
        self.layers.iter().find(|s| s.layer == layer)
    }
}

/// Calibrate every intact layer that has a compressive rank. Layers without
/// usable probe noise fall back to [`DEFAULT_EPSILON`].
pub fn calibrate(
    net: &Network,
    data: &Dataset,
    grad: &GradientSnapshot,
    settings: &ProbeSettings,
) -> Result<EpsilonProfile> {
    let mut layers = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        let (n, m) = layer.weight().shape();
        if layer.is_decomposed() || max_compressive_rank(n, m) == 0 {
            continue;
        }
        let selection = match select_epsilon(net, data, grad, i, settings) {
            Ok(s) => s,
            Err(Error::CalibrationUnavailable { .. }) => EpsilonSelection {
                layer: i,
                eps: DEFAULT_EPSILON,
                source: EpsilonSource::Fallback,
                within_tolerance: true,
                records: Vec::new(),
            },
            Err(e) => return Err(e),
        };
        layers.push(selection);
    }
    Ok(EpsilonProfile {
        settings: settings.clone(),
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientStats {
    pub entries: usize,
    pub fraction_exact_zero: f64,
    pub threshold: f64,
    /// Fraction with `|g| < threshold`.
    pub fraction_below: f64,
}

pub fn gradient_stats(snapshot: &GradientSnapshot) -> Result<GradientStats> {
    let entries: usize = snapshot.layers().iter().map(|g| g.as_slice().len()).sum();
    if entries == 0 {
        return Err(Error::invalid("gradient snapshot is empty"));
    }
    let values = snapshot.layers().iter().flat_map(|g| g.as_slice());
    let (zero, below) = values.fold((0usize, 0usize), |(z, b), &v| {
        (
            z + usize::from(v == 0.0),
            b + usize::from(v.abs() < GRADIENT_SMALL_THRESHOLD),
        )
    });
    Ok(GradientStats {
        entries,
        fraction_exact_zero: zero as f64 / entries as f64,
        threshold: GRADIENT_SMALL_THRESHOLD,
        fraction_below: below as f64 / entries as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_network, Activation, Layer, LossKind};

    /// Loss `x²·w²` for a single weight `w`, so `a = x²`.
    fn quadratic(w: f64, x: f64) -> (Network, Dataset) {
        let layer = Layer::new(
            Matrix::new(1, 1, vec![w]).unwrap(),
            vec![0.0],
            Activation::Identity,
        )
        .unwrap();
        let net = Network::new(vec![layer], LossKind::MeanSquaredError).unwrap();
        let data = Dataset::regression(vec![vec![x]], vec![vec![0.0]]).unwrap();
        (net, data)
    }

    #[test]
    fn zero_delta_has_zero_discrepancy() {
        let net = init_network(&[3, 4, 2], LossKind::SoftmaxCrossEntropy, 1).unwrap();
        let data = Dataset::classification(vec![vec![0.1, 0.2, 0.3]; 4], vec![0, 1, 0, 1]).unwrap();
        let g = net.gradients(&data).unwrap();
        let z = Matrix::zeros(4, 3);
        assert_eq!(
            neighborhood_discrepancy(&net, &data, &g, 0, &z).unwrap(),
            0.0
        );
        let so = second_order_diagnostic(&net, &data, &g, 0, &z).unwrap();
        assert_eq!((so.first_order, so.residual), (0.0, 0.0));
    }

    #[test]
    fn quadratic_discrepancy_is_curvature_term() {
        let (a, w0): (f64, f64) = (2.25, 0.7);
        let (net, data) = quadratic(w0, a.sqrt());
        let g = net.gradients(&data).unwrap();
        for d in [1e-4, 3e-3, 0.05] {
            let delta = Matrix::new(1, 1, vec![d]).unwrap();
            let disc = neighborhood_discrepancy(&net, &data, &g, 0, &delta).unwrap();
            assert!((disc - a * d * d).abs() < 1e-12, "{disc} vs {}", a * d * d);
            let so = second_order_diagnostic(&net, &data, &g, 0, &delta).unwrap();
            assert!((so.first_order - 2.0 * a * w0 * d).abs() < 1e-12);
            assert!((so.residual - a * d * d).abs() < 1e-12);
            assert_eq!(so.first_order + so.residual, so.measured);
        }
    }

    #[test]
    fn reported_value_is_max_of_both_signs() {
        let net = init_network(&[3, 5, 2], LossKind::SoftmaxCrossEntropy, 4).unwrap();
        let data = Dataset::classification(
            (0..6).map(|i| vec![i as f64 * 0.2, -0.3, 1.0]).collect(),
            vec![0, 1, 0, 1, 1, 0],
        )
        .unwrap();
        let g = net.gradients(&data).unwrap();
        let delta = Matrix::from_fn(5, 3, |i, j| 0.01 * ((i + 2 * j) as f64).cos());
        let p = probe_neighborhood(&net, &data, &g, 0, &delta).unwrap();
        let v = neighborhood_discrepancy(&net, &data, &g, 0, &delta).unwrap();
        assert!(v >= p.plus && v >= p.minus);
        assert!(v == p.plus || v == p.minus);
    }

    #[test]
    fn per_sample_dominates_mean_for_single_sample() {
        let (net, data) = quadratic(0.3, 1.5);
        let g = net.gradients(&data).unwrap();
        let delta = Matrix::new(1, 1, vec![0.02]).unwrap();
        let mean = neighborhood_discrepancy(&net, &data, &g, 0, &delta).unwrap();
        let per = per_sample_discrepancy(&net, &data, 0, &delta).unwrap();
        assert!((mean - per).abs() < 1e-15);
    }

    #[test]
    fn delta_shape_is_checked() {
        let (net, data) = quadratic(1.0, 1.0);
        let g = net.gradients(&data).unwrap();
        assert!(neighborhood_discrepancy(&net, &data, &g, 0, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn disabled_probing_uses_default() {
        let (net, data) = quadratic(1.0, 1.0);
        let g = net.gradients(&data).unwrap();
        let s = ProbeSettings {
            enabled: false,
            ..ProbeSettings::default()
        };
        let sel = select_epsilon(&net, &data, &g, 0, &s).unwrap();
        assert_eq!(sel.eps, 1e-3);
        assert_eq!(sel.source, EpsilonSource::Disabled);
    }

    #[test]
    fn no_compressive_rank_means_unavailable() {
        let (net, data) = quadratic(1.0, 1.0);
        let g = net.gradients(&data).unwrap();
        assert!(matches!(
            select_epsilon(&net, &data, &g, 0, &ProbeSettings::default()),
            Err(Error::CalibrationUnavailable { layer: 0 })
        ));
    }

    #[test]
    fn gradient_stats_counts() {
        let zero = GradientSnapshot::new(vec![Matrix::zeros(2, 3)]);
        let s = gradient_stats(&zero).unwrap();
        assert_eq!((s.fraction_exact_zero, s.fraction_below), (1.0, 1.0));
        let mixed =
            GradientSnapshot::new(vec![Matrix::new(1, 3, vec![0.002, 0.0005, 0.0]).unwrap()]);
        let s = gradient_stats(&mixed).unwrap();
        assert!((s.fraction_exact_zero - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.fraction_below - 2.0 / 3.0).abs() < 1e-15);
        assert!(gradient_stats(&GradientSnapshot::new(vec![])).is_err());
    }

    #[test]
    fn settings_validation() {
        let mut s = ProbeSettings {
            grid: vec![1e-3, 1e-4],
            ..Default::default()
        };
        assert!(s.validate().is_err());
        s.grid = vec![];
        assert!(s.validate().is_err());
        let s = ProbeSettings {
            tolerance: 0.0,
            ..ProbeSettings::default()
        };
        assert!(s.validate().is_err());
    }
}
