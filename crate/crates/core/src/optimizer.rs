//! Greedy per-layer rank selection.
//!
//! Both searches consider truncated-SVD factorizations at every compressive
//! rank of one layer and admit a candidate when it compresses, keeps every
//! weight within `eps` of the original, and either predicts a loss decrease
//! (`⟨grad, δ⟩ < 0`) or reproduces the weight exactly. The lossless search
//! keeps the admitted candidate with the lowest measured loss; the compact
//! search keeps the lowest admitted rank.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrator::{calibrate, EpsilonSource, ProbeSettings, DEFAULT_EPSILON};
use crate::constraints::{max_compressive_rank, verdict_from_noise, ConstraintVerdict};
use crate::error::{Error, Result};
use crate::linalg::{noise, svd, truncate, FactorPair, Matrix, Noise, SvdResult};
use crate::network::{Dataset, GradientSnapshot, Network};
use crate::report::{evaluate, CompressionReport, EpsilonSummary, LayerDecision, Totals};

/// Relative slack under which two losses are treated as equal, and under
/// which a noise counts as pure rounding.
const ROUNDOFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Lowest measured loss among admitted ranks.
    #[default]
    Lossless,
    /// Lowest admitted rank.
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum CalibrateTag {
    Calibrate,
}

/// `"calibrate"` or a positive number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EpsilonRepr", into = "EpsilonRepr")]
pub enum EpsilonChoice {
    Calibrate,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum EpsilonRepr {
    Tag(CalibrateTag),
    Value(f64),
}

impl TryFrom<EpsilonRepr> for EpsilonChoice {
    type Error = String;

    fn try_from(r: EpsilonRepr) -> std::result::Result<Self, String> {
        match r {
            EpsilonRepr::Tag(_) => Ok(EpsilonChoice::Calibrate),
            EpsilonRepr::Value(v) if v > 0.0 && v.is_finite() => Ok(EpsilonChoice::Fixed(v)),
            EpsilonRepr::Value(v) => Err(format!("epsilon must be positive, got {v}")),
        }
    }
}

impl From<EpsilonChoice> for EpsilonRepr {
    fn from(c: EpsilonChoice) -> Self {
        match c {
            EpsilonChoice::Calibrate => EpsilonRepr::Tag(CalibrateTag::Calibrate),
            EpsilonChoice::Fixed(v) => EpsilonRepr::Value(v),
        }
    }
}

impl std::str::FromStr for EpsilonChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "calibrate" {
            return Ok(EpsilonChoice::Calibrate);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(EpsilonChoice::Fixed(v)),
            _ => Err(Error::invalid(format!(
                "epsilon must be 'calibrate' or a positive number, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientRefresh {
    /// One gradient snapshot for the whole run.
    #[default]
    Once,
    /// Recompute the gradient on the working network before each layer.
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    pub mode: Mode,
    pub epsilon: EpsilonChoice,
    pub probe: ProbeSettings,
    pub refresh: GradientRefresh,
    /// Lossless mode: choose by predicted instead of measured loss change.
    pub rank_by_prediction: bool,
    /// Nudge each lossless factorization one step along `-grad` inside the
    /// epsilon box.
    pub refine: bool,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            mode: Mode::Lossless,
            epsilon: EpsilonChoice::Calibrate,
            probe: ProbeSettings::default(),
            refresh: GradientRefresh::Once,
            rank_by_prediction: false,
            refine: false,
        }
    }
}

impl CompressionConfig {
    pub fn search_options(&self) -> SearchOptions {
        SearchOptions {
            rank_by_prediction: self.rank_by_prediction,
            refine: self.refine,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchOptions {
    pub rank_by_prediction: bool,
    pub refine: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    AlreadyDecomposed,
    NoCompressiveRank,
    /// Every compressive rank leaves some weight further than `eps` away.
    LosslessViolated,
    /// Lossless ranks exist but none predicts a loss decrease.
    NonNegativeInnerProduct,
    /// Admissible ranks exist but each measured a higher loss.
    MeasuredLossIncrease,
}

/// One member of the admitted list for a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEntry {
    pub layer: usize,
    pub rank: usize,
    pub factors: FactorPair,
    pub predicted_delta: f64,
    /// Calibration loss with this factorization applied.
    pub measured_loss: f64,
    pub verdict: ConstraintVerdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSearch {
    pub best: Option<CandidateEntry>,
    /// Set exactly when `best` is `None`.
    pub skip: Option<SkipReason>,
    /// Ranks whose reconstruction was evaluated.
    pub ranks_evaluated: usize,
}

impl LayerSearch {
    fn skipped(reason: SkipReason, ranks_evaluated: usize) -> Self {
        LayerSearch {
            best: None,
            skip: Some(reason),
            ranks_evaluated,
        }
    }
}

struct RankEval {
    factors: FactorPair,
    verdict: ConstraintVerdict,
}

impl RankEval {
    fn exact(&self) -> bool {
        self.verdict.exact
    }
}

/// One step `L ← L − η G R` with `η` chosen so the largest entry of the
/// weight change equals `min(eps − max_abs, 0.1·eps)`.
pub fn refine_factors(
    f: &FactorPair,
    grad: &Matrix,
    eps: f64,
    max_abs_noise: f64,
) -> Result<FactorPair> {
    let step = (eps - max_abs_noise).min(0.1 * eps);
    if step <= 0.0 {
        return Ok(f.clone());
    }
    let gr = grad.matmul(&f.r)?;
    let change = gr.matmul_transposed(&f.r)?.max_abs();
    if change == 0.0 {
        return Ok(f.clone());
    }
    let eta = step / change;
    FactorPair::new(f.l.sub(&gr.scale(eta))?, f.r.clone())
}

fn evaluate_rank(
    w: &Matrix,
    decomposition: &SvdResult,
    grad: &Matrix,
    k: usize,
    eps: f64,
    refine: bool,
) -> Result<RankEval> {
    let mut factors = truncate(decomposition, k)?;
    let mut n = noise(w, &factors)?;
    if refine && n.max_abs <= eps && !is_roundoff(&n, w) {
        factors = refine_factors(&factors, grad, eps, n.max_abs)?;
        n = noise(w, &factors)?;
    }
    let mut verdict = verdict_from_noise(w, k, &n, grad, eps)?;
    verdict.exact |= is_roundoff(&n, w);
    Ok(RankEval { factors, verdict })
}

fn is_roundoff(n: &Noise, w: &Matrix) -> bool {
    n.max_abs <= ROUNDOFF * w.max_abs().max(1.0)
}

fn admitted(e: &RankEval) -> bool {
    e.verdict.compressive && e.verdict.lossless && (e.verdict.predicted_delta < 0.0 || e.exact())
}

fn check_layer(net: &Network, layer: usize, eps: f64) -> Result<()> {
    if net.layer(layer)?.is_decomposed() {
        return Err(Error::State {
            layer,
            reason: "layer is already decomposed".into(),
        });
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!(
            "epsilon must be positive, got {eps}"
        )));
    }
    Ok(())
}

fn failure_reason(any_lossless: bool, any_admitted: bool) -> SkipReason {
    if !any_lossless {
        SkipReason::LosslessViolated
    } else if !any_admitted {
        SkipReason::NonNegativeInnerProduct
    } else {
        SkipReason::MeasuredLossIncrease
    }
}

/// Lowest-loss admitted factorization of one layer.
///
/// Every compressive rank is evaluated. An admitted candidate must also
/// measure a calibration loss no higher than the current one; exact
/// reconstructions may exceed it by rounding only. Losses within rounding
/// of the minimum count as ties, which go to the smaller rank.
pub fn lossless_layer_search(
    net: &Network,
    data: &Dataset,
    grad: &GradientSnapshot,
    layer: usize,
    eps: f64,
    options: SearchOptions,
) -> Result<LayerSearch> {
    check_layer(net, layer, eps)?;
    let w = net.layer(layer)?.weight();
    let kmax = max_compressive_rank(w.rows(), w.cols());
    if kmax == 0 {
        return Ok(LayerSearch::skipped(SkipReason::NoCompressiveRank, 0));
    }
    let g = grad.layer(layer);
    if g.shape() != w.shape() {
        return Err(Error::invalid(format!(
            "gradient shape {:?} does not match layer {layer} weight {:?}",
            g.shape(),
            w.shape()
        )));
    }
    let baseline = net.dataset_loss(data)?;
    let slack = ROUNDOFF * baseline.abs().max(1.0);
    let decomposition = svd(w)?;
    let evals: Vec<(RankEval, Option<f64>)> = (1..=kmax)
        .into_par_iter()
        .map(|k| {
            let e = evaluate_rank(w, &decomposition, g, k, eps, options.refine)?;
            let measured = if admitted(&e) {
                Some(
                    net.apply_factorization(layer, e.factors.clone())?
                        .dataset_loss(data)?,
                )
            } else {
                None
            };
            Ok((e, measured))
        })
        .collect::<Result<_>>()?;

    let any_lossless = evals.iter().any(|(e, _)| e.verdict.lossless);
    let any_admitted = evals.iter().any(|(_, m)| m.is_some());
    let list: Vec<(&RankEval, f64)> = evals
        .iter()
        .filter_map(|(e, m)| {
            let m = (*m)?;
            let bound = if e.exact() {
                baseline + slack
            } else {
                baseline
            };
            (m <= bound).then_some((e, m))
        })
        .collect();
    if list.is_empty() {
        return Ok(LayerSearch::skipped(
            failure_reason(any_lossless, any_admitted),
            kmax,
        ));
    }
    let key = |(e, m): &(&RankEval, f64)| {
        if options.rank_by_prediction {
            e.verdict.predicted_delta
        } else {
            *m
        }
    };
    let best_key = list.iter().map(key).fold(f64::INFINITY, f64::min);
    let tie = if options.rank_by_prediction {
        ROUNDOFF * best_key.abs()
    } else {
        slack
    };
    let (e, m) = list
        .iter()
        .find(|c| key(c) <= best_key + tie)
        .expect("the minimum is attained");
    Ok(LayerSearch {
        best: Some(CandidateEntry {
            layer,
            rank: e.verdict.rank,
            factors: e.factors.clone(),
            predicted_delta: e.verdict.predicted_delta,
            measured_loss: *m,
            verdict: e.verdict,
        }),
        skip: None,
        ranks_evaluated: kmax,
    })
}

/// Smallest certified-possible lossless rank: since `max|δ| ≥ ‖δ‖_F/√(NM)`
/// and `‖δ‖_F` is the singular-value tail, ranks whose tail exceeds
/// `eps·√(NM)` cannot be lossless.
fn certified_lower_rank(d: &SvdResult, n: usize, m: usize, eps: f64, kmax: usize) -> usize {
    let bound = eps * ((n * m) as f64).sqrt() * (1.0 + 1e-9);
    (1..=kmax)
        .find(|&k| d.tail_norm(k) <= bound)
        .unwrap_or(kmax + 1)
}

/// Minimal admitted rank of one layer.
///
/// A binary search on the noise bound locates the likely boundary; ranks
/// below it (down to the certified lower rank) are then verified
/// individually because the max-abs noise need not shrink monotonically
/// with rank, and the first rank from there meeting the sign condition is
/// returned.
pub fn compact_layer_search(
    net: &Network,
    data: &Dataset,
    grad: &GradientSnapshot,
    layer: usize,
    eps: f64,
    options: SearchOptions,
) -> Result<LayerSearch> {
    check_layer(net, layer, eps)?;
    let w = net.layer(layer)?.weight();
    let (n, m) = w.shape();
    let kmax = max_compressive_rank(n, m);
    if kmax == 0 {
        return Ok(LayerSearch::skipped(SkipReason::NoCompressiveRank, 0));
    }
    let g = grad.layer(layer);
    if g.shape() != w.shape() {
        return Err(Error::invalid(format!(
            "gradient shape {:?} does not match layer {layer} weight {:?}",
            g.shape(),
            w.shape()
        )));
    }
    let decomposition = svd(w)?;
    let mut cache: Vec<Option<RankEval>> = (0..=kmax).map(|_| None).collect();
    let eval = |cache: &mut Vec<Option<RankEval>>, k: usize| -> Result<bool> {
        if cache[k].is_none() {
            cache[k] = Some(evaluate_rank(w, &decomposition, g, k, eps, options.refine)?);
        }
        Ok(cache[k].as_ref().expect("filled").verdict.lossless)
    };

    let klb = certified_lower_rank(&decomposition, n, m, eps, kmax);
    let (mut lo, mut hi) = (klb, kmax + 1);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if eval(&mut cache, mid)? {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let boundary = lo;
    let mut start = boundary;
    for k in klb..boundary {
        if eval(&mut cache, k)? {
            start = k;
            break;
        }
    }
    let mut any_lossless = start <= kmax;
    let mut found = None;
    for k in start..=kmax {
        if eval(&mut cache, k)? {
            any_lossless = true;
            let e = cache[k].as_ref().expect("filled");
            if admitted(e) {
                found = Some(k);
                break;
            }
        }
    }
    let evaluated = cache.iter().filter(|c| c.is_some()).count();
    let Some(k) = found else {
        return Ok(LayerSearch::skipped(
            failure_reason(any_lossless, false),
            evaluated,
        ));
    };
    let e = cache[k].take().expect("filled");
    let measured_loss = net
        .apply_factorization(layer, e.factors.clone())?
        .dataset_loss(data)?;
    Ok(LayerSearch {
        best: Some(CandidateEntry {
            layer,
            rank: k,
            factors: e.factors,
            predicted_delta: e.verdict.predicted_delta,
            measured_loss,
            verdict: e.verdict,
        }),
        skip: None,
        ranks_evaluated: evaluated,
    })
}

/// Minimal admitted rank by exhaustive scan, for cross-checking.
pub fn minimal_admissible_rank_scan(w: &Matrix, grad: &Matrix, eps: f64) -> Result<Option<usize>> {
    let kmax = max_compressive_rank(w.rows(), w.cols());
    let d = svd(w)?;
    for k in 1..=kmax {
        if admitted(&evaluate_rank(w, &d, grad, k, eps, false)?) {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

/// Compress every eligible layer in input-to-output order, applying each
/// accepted factorization before moving on.
pub fn compress_network(
    net: &Network,
    data: &Dataset,
    config: &CompressionConfig,
) -> Result<(Network, CompressionReport)> {
    let calibration_before = evaluate(net, data)?;
    let mut grad = net.gradients(data)?;
    let profile = match config.epsilon {
        EpsilonChoice::Calibrate => Some(calibrate(net, data, &grad, &config.probe)?),
        EpsilonChoice::Fixed(_) => None,
    };
    let options = config.search_options();
    let mut work = net.clone();
    let mut decisions = Vec::with_capacity(net.num_layers());
    let mut epsilons = Vec::new();

    for layer in 0..net.num_layers() {
        let current = work.layer(layer)?;
        let shape = current.weight().shape();
        let params_before = current.param_count();
        let loss_before = work.dataset_loss(data)?;
        let mut decision = LayerDecision::skipped(layer, shape, params_before, loss_before);
        if current.is_decomposed() {
            decision.skip_reason = Some(SkipReason::AlreadyDecomposed);
            decisions.push(decision);
            continue;
        }
        if max_compressive_rank(shape.0, shape.1) == 0 {
            decision.skip_reason = Some(SkipReason::NoCompressiveRank);
            decisions.push(decision);
            continue;
        }
        let (eps, source, within) = match (config.epsilon, &profile) {
            (EpsilonChoice::Fixed(v), _) => (v, EpsilonSource::Fixed, true),
            (EpsilonChoice::Calibrate, Some(p)) => match p.selection(layer) {
                Some(s) => (s.eps, s.source, s.within_tolerance),
                None => (DEFAULT_EPSILON, EpsilonSource::Fallback, true),
            },
            (EpsilonChoice::Calibrate, None) => unreachable!("profile is computed for calibrate"),
        };
        epsilons.push(EpsilonSummary {
            layer,
            eps,
            source,
            within_tolerance: within,
        });
        decision.eps = Some(eps);
        if config.refresh == GradientRefresh::PerLayer && layer > 0 {
            grad = work.gradients(data)?;
        }
        let search = match config.mode {
            Mode::Lossless => lossless_layer_search(&work, data, &grad, layer, eps, options),
            Mode::Compact => compact_layer_search(&work, data, &grad, layer, eps, options),
        }
        .map_err(|e| e.in_layer(layer))?;
        decision.ranks_evaluated = search.ranks_evaluated;
        match search.best {
            Some(c) => {
                work = work.apply_factorization(layer, c.factors)?;
                decision.rank = Some(c.rank);
                decision.predicted_delta = Some(c.predicted_delta);
                decision.max_abs_noise = Some(c.verdict.max_abs_noise);
                decision.loss_after = c.measured_loss;
                decision.params_after = work.layer(layer)?.param_count();
            }
            None => decision.skip_reason = search.skip,
        }
        decisions.push(decision);
    }

    let calibration_after = evaluate(&work, data)?;
    let totals = Totals::new(net.param_count(), work.param_count())?;
    let mut warnings = Vec::new();
    if decisions.iter().all(|d| d.rank.is_none()) {
        warnings.push("no layer was factorized; the network is unchanged".to_string());
    }
    for e in &epsilons {
        if !e.within_tolerance {
            warnings.push(format!(
                "layer {}: no probe bucket met the tolerance; using the smallest grid epsilon",
                e.layer
            ));
        }
    }
    let report = CompressionReport::new(
        config.clone(),
        decisions,
        totals,
        calibration_before,
        calibration_after,
        epsilons,
        warnings,
    );
    Ok((work, report))
}
