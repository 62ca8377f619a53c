//! The `rankloss` command line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::calibrator::{
    calibrate, gradient_stats, probe_layer, select_epsilon, EpsilonSource, GradientStats,
    ProbeRecord, ProbeSettings, RankRange, DEFAULT_EPSILON,
};
use crate::error::{Error, Result};
use crate::fixture::{BlobSpec, FixtureConfig};
use crate::formats::{load_dataset, load_model, save_dataset, save_model};
use crate::network::{train_toy, Dataset};
use crate::optimizer::{compress_network, CompressionConfig, EpsilonChoice, GradientRefresh, Mode};
use crate::report::{
    emit_report, evaluate, rank_curve, rank_curve_to_csv, render_drop_rate, to_canonical_json,
    CompressionReport, Metrics, ReportFormat,
};

pub const THREADS_ENV: &str = "RANKLOSS_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "rankloss",
    version,
    about = "Low-rank compression of dense networks guided by calibration gradients"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a small seeded network and write it as a model file.
    TrainToy(TrainToyArgs),
    /// Write a synthetic dataset CSV.
    GenData(GenDataArgs),
    /// Select a per-layer epsilon by probing the first-order loss model.
    Calibrate(CalibrateArgs),
    /// Factorize layers of a trained model.
    Compress(CompressArgs),
    /// Tabulate probe discrepancies and second-order diagnostics.
    Probe(ProbeArgs),
    /// Print loss and accuracy of a model on a dataset.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureName {
    Reference,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Build a documented fixture; writes the model plus its data splits.
    #[arg(long, conflicts_with_all = ["arch", "data", "generate", "steps", "lr", "seed"])]
    pub fixture: Option<FixtureName>,
    /// Layer sizes, e.g. 8,64,64,3.
    #[arg(long, value_delimiter = ',', required_unless_present = "fixture")]
    pub arch: Vec<usize>,
    /// Training data CSV.
    #[arg(long, conflicts_with = "generate")]
    pub data: Option<PathBuf>,
    /// Generator spec such as blobs:3classes:1000.
    #[arg(long)]
    pub generate: Option<String>,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, required_unless_present = "fixture")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Generator spec such as blobs:3classes:1000[:8dims].
    #[arg(long)]
    pub spec: String,
    #[arg(long)]
    pub seed: u64,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelData {
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub io: ModelData,
    /// Probe tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Write the epsilon profile as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the profile as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Lossless,
    Compact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RefreshArg {
    Once,
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[command(flatten)]
    pub io: ModelData,
    /// Held-out dataset CSV, evaluated before and after.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    /// TOML or JSON compression config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// `calibrate` or a positive number.
    #[arg(long, allow_hyphen_values = true)]
    pub eps: Option<String>,
    /// Probe tolerance used when calibrating.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long = "refresh-grad", value_enum)]
    pub refresh_grad: Option<RefreshArg>,
    /// Write a loss-versus-rank CSV for every eligible layer.
    #[arg(long)]
    pub curves: bool,
    /// Accepted for reproducible invocations; compression is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    pub format: FormatArg,
    /// Print the report JSON to stdout.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub io: ModelData,
    /// Layers to probe; all by default.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Probe every proper truncation rank, not only compressive ones.
    #[arg(long)]
    pub all_ranks: bool,
    /// Directory for probe.json and probe.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub io: ModelData,
    #[arg(long)]
    pub json: bool,
}

/// Validated inputs shared by the model-consuming commands.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    pub holdout: Option<PathBuf>,
    pub compression: CompressionConfig,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: ReportFormat,
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ))
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_config(path: &Path) -> Result<CompressionConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|m| Error::format(path, m))
}

impl RunConfig {
    pub fn from_compress(args: &CompressArgs) -> Result<Self> {
        require_file(&args.io.model)?;
        require_file(&args.io.data)?;
        if let Some(h) = &args.holdout {
            require_file(h)?;
        }
        let mut c = match &args.config {
            Some(p) => load_config(p)?,
            None => CompressionConfig::default(),
        };
        if let Some(m) = args.mode {
            c.mode = match m {
                ModeArg::Lossless => Mode::Lossless,
                ModeArg::Compact => Mode::Compact,
            };
        }
        if let Some(e) = &args.eps {
            c.epsilon = e.parse::<EpsilonChoice>()?;
        }
        if let Some(t) = args.tol {
            c.probe.tolerance = t;
        }
        if let Some(r) = args.refresh_grad {
            c.refresh = match r {
                RefreshArg::Once => GradientRefresh::Once,
                RefreshArg::PerLayer => GradientRefresh::PerLayer,
            };
        }
        Ok(RunConfig {
            model: args.io.model.clone(),
            data: args.io.data.clone(),
            holdout: args.holdout.clone(),
            compression: c,
            seed: args.seed,
            out: Some(args.out.clone()),
            format: match args.format {
                FormatArg::Json => ReportFormat::Json,
                FormatArg::Csv => ReportFormat::Csv,
            },
        })
    }
}

/// Build the global thread pool from `RANKLOSS_THREADS`, if set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|n| *n > 0).ok_or_else(|| {
        Error::invalid(format!(
            "{THREADS_ENV} must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainToy(a) => train_toy_cmd(&a),
        Command::GenData(a) => gen_data_cmd(&a),
        Command::Calibrate(a) => calibrate_cmd(&a),
        Command::Compress(a) => compress_cmd(&RunConfig::from_compress(&a)?, a.curves, a.json),
        Command::Probe(a) => probe_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
    }
}

#[derive(Serialize)]
struct TrainMeta {
    arch: Vec<usize>,
    data: String,
    steps: usize,
    learning_rate: f64,
    seed: u64,
    train_samples: usize,
    initial_loss: f64,
    final_loss: f64,
}

fn train_toy_cmd(a: &TrainToyArgs) -> Result<()> {
    ensure_dir(&a.out)?;
    let (network, meta) = if let Some(FixtureName::Reference) = a.fixture {
        let cfg = FixtureConfig::reference();
        let fx = cfg.build()?;
        save_dataset(&fx.train, &a.out.join("train.csv"))?;
        save_dataset(&fx.calibration, &a.out.join("calibration.csv"))?;
        save_dataset(&fx.holdout, &a.out.join("holdout.csv"))?;
        let meta = TrainMeta {
            arch: cfg.arch.clone(),
            data: format!(
                "{} (train {} samples, seed {}; calibration seed {}; holdout seed {})",
                cfg.blobs,
                cfg.train_samples,
                cfg.train_seed,
                cfg.calibration_seed,
                cfg.holdout_seed
            ),
            steps: cfg.steps,
            learning_rate: cfg.learning_rate,
            seed: cfg.init_seed,
            train_samples: fx.train.len(),
            initial_loss: fx.initial_loss,
            final_loss: fx.final_loss,
        };
        (fx.network, meta)
    } else {
        let seed = a.seed.expect("clap requires a seed without a fixture");
        let (data, label): (Dataset, String) = match (&a.data, &a.generate) {
            (Some(p), None) => {
                require_file(p)?;
                (load_dataset(p)?, p.display().to_string())
            }
            (None, Some(spec)) => {
                let d = spec.parse::<BlobSpec>()?.generate(seed)?;
                save_dataset(&d, &a.out.join("train.csv"))?;
                (d, spec.clone())
            }
            _ => return Err(Error::invalid("train-toy needs --data or --generate")),
        };
        let trained = train_toy(&a.arch, &data, a.steps, a.lr, seed)?;
        let meta = TrainMeta {
            arch: a.arch.clone(),
            data: label,
            steps: a.steps,
            learning_rate: a.lr,
            seed,
            train_samples: data.len(),
            initial_loss: trained.initial_loss,
            final_loss: trained.final_loss,
        };
        (trained.network, meta)
    };
    save_model(&network, &a.out.join("model.json"))?;
    write(&a.out.join("model.meta.json"), &to_canonical_json(&meta))?;
    println!(
        "trained {:?} for {} steps: loss {:.6} -> {:.6}",
        meta.arch, meta.steps, meta.initial_loss, meta.final_loss
    );
    println!("wrote {}", a.out.join("model.json").display());
    Ok(())
}

fn gen_data_cmd(a: &GenDataArgs) -> Result<()> {
    let spec: BlobSpec = a.spec.parse()?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    save_dataset(&spec.generate(a.seed)?, &a.out)?;
    println!("wrote {} samples to {}", spec.samples, a.out.display());
    Ok(())
}

fn load_inputs(io: &ModelData) -> Result<(crate::network::Network, Dataset)> {
    require_file(&io.model)?;
    require_file(&io.data)?;
    Ok((load_model(&io.model)?, load_dataset(&io.data)?))
}

fn probe_settings(tol: Option<f64>) -> ProbeSettings {
    let mut s = ProbeSettings::default();
    if let Some(t) = tol {
        s.tolerance = t;
    }
    s
}

#[derive(Serialize)]
struct ProfileEntry {
    layer: usize,
    eps: f64,
    source: EpsilonSource,
    within_tolerance: bool,
}

fn calibrate_cmd(a: &CalibrateArgs) -> Result<()> {
    let (net, data) = load_inputs(&a.io)?;
    let settings = probe_settings(a.tol);
    let grad = net.gradients(&data)?;
    let profile = calibrate(&net, &data, &grad, &settings)?;
    let entries: Vec<ProfileEntry> = profile
        .layers
        .iter()
        .map(|s| ProfileEntry {
            layer: s.layer,
            eps: s.eps,
            source: s.source,
            within_tolerance: s.within_tolerance,
        })
        .collect();
    let json = to_canonical_json(&serde_json::json!({
        "tolerance": settings.tolerance,
        "grid": settings.grid,
        "default_eps": DEFAULT_EPSILON,
        "layers": entries,
    }));
    if let Some(p) = &a.out {
        write(p, &json)?;
    }
    if a.json {
        print!("{json}");
    } else {
        for e in &entries {
            println!("layer {}: eps {:e} ({:?})", e.layer, e.eps, e.source);
        }
    }
    Ok(())
}

fn compress_cmd(run: &RunConfig, curves: bool, json: bool) -> Result<()> {
    let net = load_model(&run.model)?;
    let data = load_dataset(&run.data)?;
    let holdout = run.holdout.as_deref().map(load_dataset).transpose()?;
    let out = run
        .out
        .as_deref()
        .expect("compress always has an output directory");
    ensure_dir(out)?;
    let (compressed, mut report) = compress_network(&net, &data, &run.compression)?;
    if let Some(h) = &holdout {
        report.add_holdout(&net, &compressed, h)?;
    }
    save_model(&compressed, &out.join("compressed_model.json"))?;
    emit_report(&report, &out.join("report.json"), ReportFormat::Json)?;
    if run.format == ReportFormat::Csv {
        emit_report(&report, &out.join("report.csv"), ReportFormat::Csv)?;
    }
    if curves {
        let dir = out.join("curves");
        ensure_dir(&dir)?;
        let grad = net.gradients(&data)?;
        for d in report.layers.iter().filter(|d| d.eps.is_some()) {
            let points = rank_curve(&net, &data, &grad, d.layer, d.eps.expect("filtered"))?;
            write(
                &dir.join(format!("layer_{}.csv", d.layer)),
                &rank_curve_to_csv(&points),
            )?;
        }
    }
    if json {
        print!("{}", crate::report::report_to_json(&report));
    } else {
        print_summary(&report);
    }
    Ok(())
}

fn print_summary(r: &CompressionReport) {
    for l in &r.layers {
        match (l.rank, l.skip_reason) {
            (Some(k), _) => println!(
                "layer {} ({}x{}): rank {k}, loss {:.9} -> {:.9}",
                l.layer, l.rows, l.cols, l.loss_before, l.loss_after
            ),
            (None, reason) => println!(
                "layer {} ({}x{}): skipped ({})",
                l.layer,
                l.rows,
                l.cols,
                reason
                    .and_then(|r| serde_json::to_value(r).ok())
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default()
            ),
        }
    }
    println!(
        "params {} -> {} ({})",
        r.totals.original_params,
        r.totals.compressed_params,
        render_drop_rate(r.totals.drop_rate)
    );
    println!(
        "calibration loss {:.9} -> {:.9}",
        r.calibration.before.loss, r.calibration.after.loss
    );
    if let Some(h) = &r.holdout {
        println!("held-out loss {:.9} -> {:.9}", h.before.loss, h.after.loss);
    }
    for w in &r.warnings {
        println!("warning: {w}");
    }
}

#[derive(Serialize)]
struct LayerProbe {
    layer: usize,
    eps: Option<f64>,
    source: Option<EpsilonSource>,
    records: Vec<ProbeRecord>,
}

#[derive(Serialize)]
struct ProbeOutput {
    gradient_stats: GradientStats,
    settings: ProbeSettings,
    layers: Vec<LayerProbe>,
}

fn probe_csv(layers: &[LayerProbe]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "layer",
        "eps_bound",
        "rank",
        "max_abs_noise",
        "delta_loss",
        "discrepancy",
        "first_order",
        "residual",
    ])
    .expect("in-memory csv");
    let f = |x: f64| format!("{x:.8e}");
    for r in layers.iter().flat_map(|l| &l.records) {
        w.write_record([
            r.layer.to_string(),
            r.eps_bound.map(f).unwrap_or_default(),
            r.rank.to_string(),
            f(r.max_abs_noise),
            f(r.delta_loss),
            f(r.discrepancy),
            f(r.first_order),
            f(r.residual),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
}

fn probe_cmd(a: &ProbeArgs) -> Result<()> {
    let (net, data) = load_inputs(&a.io)?;
    let settings = probe_settings(a.tol);
    let grad = net.gradients(&data)?;
    let layers: Vec<usize> = if a.layers.is_empty() {
        (0..net.num_layers()).collect()
    } else {
        a.layers.clone()
    };
    let mut out = Vec::new();
    for &layer in &layers {
        net.layer(layer)?;
        let (eps, source, records) = match select_epsilon(&net, &data, &grad, layer, &settings) {
            Ok(s) => (Some(s.eps), Some(s.source), s.records),
            Err(Error::CalibrationUnavailable { .. }) => (None, None, Vec::new()),
            Err(e) => return Err(e.in_layer(layer)),
        };
        let records = if a.all_ranks {
            probe_layer(&net, &data, &grad, layer, &settings, RankRange::All)?
        } else {
            records
        };
        out.push(LayerProbe {
            layer,
            eps,
            source,
            records,
        });
    }
    let output = ProbeOutput {
        gradient_stats: gradient_stats(&grad)?,
        settings,
        layers: out,
    };
    let json = to_canonical_json(&output);
    if let Some(dir) = &a.out {
        ensure_dir(dir)?;
        write(&dir.join("probe.json"), &json)?;
        write(&dir.join("probe.csv"), &probe_csv(&output.layers))?;
    }
    if a.json {
        print!("{json}");
    } else {
        let s = &output.gradient_stats;
        println!(
            "gradient entries {}: exactly zero {:.4}, below {} {:.4}",
            s.entries, s.fraction_exact_zero, s.threshold, s.fraction_below
        );
        for l in &output.layers {
            let worst = l.records.iter().map(|r| r.discrepancy).fold(0.0, f64::max);
            match l.eps {
                Some(e) => println!(
                    "layer {}: eps {e:e}, {} probes, worst discrepancy {worst:.3e}",
                    l.layer,
                    l.records.len()
                ),
                None => println!("layer {}: no probe noise in the grid", l.layer),
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    model: String,
    data: String,
    metrics: Metrics,
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (net, data) = load_inputs(&a.io)?;
    let metrics = evaluate(&net, &data)?;
    if a.json {
        print!(
            "{}",
            to_canonical_json(&EvalOutput {
                model: a.io.model.display().to_string(),
                data: a.io.data.display().to_string(),
                metrics,
            })
        );
    } else {
        println!("loss {:.9}", metrics.loss);
        if let Some(t) = metrics.top1 {
            println!("top1 {t:.4}");
        }
        if let Some(t) = metrics.top5 {
            println!("top5 {t:.4}");
        }
        println!("samples {}", metrics.samples);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn compress_flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let model = dir.path().join("m.json");
        let data = dir.path().join("d.csv");
        let cfg = dir.path().join("c.toml");
        fs::write(&model, "{}").unwrap();
        fs::write(&data, "").unwrap();
        fs::write(&cfg, "mode = \"compact\"\nepsilon = 0.01\n").unwrap();
        let parse = |extra: &[&str]| {
            let mut argv = vec![
                "rankloss",
                "compress",
                "--model",
                model.to_str().unwrap(),
                "--data",
                data.to_str().unwrap(),
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                "x",
            ];
            argv.extend_from_slice(extra);
            match Cli::try_parse_from(argv).unwrap().command {
                Command::Compress(a) => RunConfig::from_compress(&a).unwrap(),
                _ => unreachable!(),
            }
        };
        let base = parse(&[]);
        assert_eq!(base.compression.mode, Mode::Compact);
        assert_eq!(base.compression.epsilon, EpsilonChoice::Fixed(0.01));
        let over = parse(&[
            "--mode",
            "lossless",
            "--eps",
            "calibrate",
            "--tol",
            "1e-5",
            "--refresh-grad",
            "per-layer",
        ]);
        assert_eq!(over.compression.mode, Mode::Lossless);
        assert_eq!(over.compression.epsilon, EpsilonChoice::Calibrate);
        assert_eq!(over.compression.probe.tolerance, 1e-5);
        assert_eq!(over.compression.refresh, GradientRefresh::PerLayer);
    }

    #[test]
    fn missing_inputs_fail_before_work() {
        let args = Cli::try_parse_from([
            "rankloss",
            "compress",
            "--model",
            "/no/such/model.json",
            "--data",
            "/no/such.csv",
            "--out",
            "o",
        ])
        .unwrap();
        let Command::Compress(a) = args.command else {
            unreachable!()
        };
        let err = RunConfig::from_compress(&a).unwrap_err();
        assert!(err.to_string().contains("/no/such/model.json"));
    }

    #[test]
    fn train_toy_requires_seed() {
        assert!(Cli::try_parse_from([
            "rankloss",
            "train-toy",
            "--arch",
            "2,2",
            "--generate",
            "blobs:2classes:4",
            "--out",
            "o"
        ])
        .is_err());
        assert!(Cli::try_parse_from([
            "rankloss",
            "train-toy",
            "--fixture",
            "reference",
            "--out",
            "o"
        ])
        .is_ok());
    }
}
