use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scengan_autodiff::Tensor;
use scengan_core::data::{self, FleetKind, SiteSeries, TIMESTAMP_FORMAT};
use scengan_core::forecast::{self, PointForecast};
use scengan_core::metrics::{self, AutocorrelationCurve, MetricReport};
use scengan_core::model::ModelParams;
use scengan_core::synth::{self, GroundTruth, SynthParams, GROUND_TRUTH_FILE};
use scengan_core::train::{sample_latent, TrainLog, TrainState, Trainer, CHECKPOINT_FILE};

use crate::config::{architecture_keys, forecast_keys, training_keys, RunConfig, Source};
use crate::{Common, Failure};

pub const LOCK_FILE: &str = "run.lock";

/// Exclusive ownership of a run directory for the life of the command.
struct RunLock {
    path: PathBuf,
    _file: File,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn lock_run_dir(dir: &Path) -> Result<RunLock, Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::data(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(LOCK_FILE);
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .map_err(|e| Failure::data(format!("cannot open {}: {e}", path.display())))?;
    match file.try_lock() {
        Ok(()) => Ok(RunLock { path, _file: file }),
        Err(TryLockError::WouldBlock) => Err(Failure::data(format!(
            "{} is in use by another scengan process",
            dir.display()
        ))),
        Err(TryLockError::Error(e)) => Err(Failure::data(format!("cannot lock {}: {e}", path.display()))),
    }
}

fn resolve(mut cfg: RunConfig, common: &Common) -> Result<RunConfig, Failure> {
    if let Some(file) = &common.config {
        cfg.apply_file(file)?;
    }
    cfg.apply_overrides(&common.sets)?;
    Ok(cfg)
}

fn split_keys() -> Vec<(&'static str, String, &'static str)> {
    vec![
        ("window_stride", "0".into(), "steps between window starts; 0 means the horizon"),
        ("train_fraction", "0.8".into(), "fraction of windows assigned to training"),
        ("split_seed", "0".into(), "seed of the train/validation assignment"),
    ]
}

/// Every key a command accepts, at its default.
pub fn defaults(command: &str) -> RunConfig {
    let s = String::new;
    match command {
        "synth" => RunConfig::new(
            "synth",
            vec![
                ("out", s(), "output fleet directory"),
                ("kind", "wind".into(), "wind or solar"),
                ("sites", "4".into(), "number of sites"),
                ("days", "30".into(), "days of data"),
                ("seed", "0".into(), "random seed"),
                ("rho", "0.9".into(), "correlation between neighbouring sites' latent processes"),
                ("step_minutes", "60".into(), "minutes per step"),
            ],
        ),
        "train" => {
            let mut keys = vec![
                ("data", s(), "fleet directory to train on"),
                ("out", s(), "run directory for checkpoint, log and resolved config"),
                ("seed", "0".into(), "seed for initialization and every training draw"),
            ];
            keys.extend(split_keys());
            keys.extend(architecture_keys());
            keys.extend(training_keys());
            RunConfig::new("train", keys)
        }
        "forecast" => {
            let mut keys = vec![
                ("checkpoint", s(), "trained model checkpoint"),
                ("out", s(), "output directory for scenarios"),
                ("point_forecast", s(), "point forecast CSV (site rows, time columns, per unit)"),
                ("baseline", s(), "`persistence` to build the point forecast from fleet history"),
                ("data", s(), "fleet directory for the baseline and realization"),
                ("start", s(), "first forecast timestamp for the baseline"),
                ("alpha", "2".into(), "prediction-interval factor, greater than 1"),
                ("n", "50".into(), "number of scenarios"),
                ("seed", "0".into(), "random seed"),
            ];
            keys.extend(forecast_keys());
            RunConfig::new("forecast", keys)
        }
        "evaluate" => {
            let mut keys = vec![
                ("scenarios", s(), "scenario directory written by forecast"),
                ("checkpoint", s(), "evaluate unconditional samples of this model instead"),
                ("samples", "1000".into(), "number of unconditional samples"),
                ("seed", "0".into(), "seed for unconditional samples"),
                ("data", s(), "reference fleet directory"),
                ("reference_split", "train".into(), "reference windows: train, validation or all"),
                ("realization", s(), "observed K x T outcome for coverage and envelope checks"),
                ("out", s(), "output directory for the report"),
                ("max_lag", "6".into(), "largest autocorrelation lag"),
            ];
            keys.extend(split_keys());
            RunConfig::new("evaluate", keys)
        }
        other => unreachable!("unknown command `{other}`"),
    }
}

fn data_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::data(format!("cannot write {}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| data_failure(path, e))
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// wind or solar
    #[arg(long)]
    kind: Option<FleetKind>,
    /// Number of sites (at least 1)
    #[arg(long)]
    sites: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Correlation between neighbouring sites' latent processes
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    step_minutes: Option<u32>,
    /// Output fleet directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    let mut cfg = resolve(defaults("synth"), &a.common)?;
    cfg.flag("kind", a.kind)?;
    cfg.flag("sites", a.sites)?;
    cfg.flag("days", a.days)?;
    cfg.flag("seed", a.seed)?;
    cfg.flag("rho", a.rho)?;
    cfg.flag("step_minutes", a.step_minutes)?;
    cfg.flag("out", a.out.map(|p| p.display().to_string()))?;

    let kind: FleetKind = cfg.get("kind").parse()?;
    let sites: usize = cfg.parse("sites")?;
    let days: usize = cfg.parse("days")?;
    let params = SynthParams {
        rho: cfg.parse("rho")?,
        step_minutes: cfg.parse("step_minutes")?,
        ..SynthParams::default()
    };
    if days == 0 {
        return Err(Failure::usage("days must be at least 1"));
    }
    let out = cfg.required_path("out")?;
    let steps = days * synth::steps_per_day(params.step_minutes.max(1));
    let fleet = synth::synth_fleet(kind, sites, steps, cfg.parse("seed")?, &params)?;

    let _lock = lock_run_dir(&out)?;
    fleet.write(&out)?;
    cfg.write(&out)?;
    log::info!("wrote {sites} {kind} sites x {steps} steps to {}", out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Fleet directory (as written by `synth`)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Generator iterations
    #[arg(long)]
    iterations: Option<usize>,
    /// Adam step size
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Continue from the run directory's checkpoint
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    common: Common,
}

fn load_windows(cfg: &RunConfig, series: &[SiteSeries], horizon: usize) -> Result<data::Dataset, Failure> {
    let stride: usize = cfg.parse("window_stride")?;
    let stride = if stride == 0 { horizon } else { stride };
    Ok(data::window_dataset(
        series,
        horizon,
        stride,
        cfg.parse("train_fraction")?,
        cfg.parse("split_seed")?,
    )?)
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = resolve(defaults("train"), &a.common)?;
    cfg.flag("data", a.data.map(|p| p.display().to_string()))?;
    cfg.flag("out", a.out.map(|p| p.display().to_string()))?;
    cfg.flag("seed", a.seed)?;
    cfg.flag("iterations", a.iterations)?;
    cfg.flag("lr", a.lr)?;
    cfg.flag("batch_size", a.batch_size)?;

    let data_dir = cfg.required_path("data")?;
    let out = cfg.required_path("out")?;
    let (_, series) = data::load_fleet(&data_dir)?;
    if cfg.source("sites") == Source::Default {
        cfg.set("sites", &series.len().to_string(), Source::Data)?;
    }
    let arch = cfg.architecture()?;
    arch.validate()?;
    let tcfg = cfg.training()?;
    tcfg.validate()?;
    let seed: u64 = cfg.parse("seed")?;
    let ds = load_windows(&cfg, &series, arch.horizon)?;
    let (train, holdout) = (ds.train(), ds.validation());

    let _lock = lock_run_dir(&out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let (mut state, mut log) = if a.resume {
        let (state, log) = Trainer::resume(&out)?;
        let diff = state.params.config.diff(&arch);
        if !diff.is_empty() {
            return Err(Failure::data(format!(
                "{} was written for a different architecture: {}",
                ckpt.display(),
                diff.join("; ")
            )));
        }
        if state.params.seed != seed {
            return Err(Failure::data(format!(
                "{} was trained with seed {}, not {seed}",
                ckpt.display(),
                state.params.seed
            )));
        }
        log::info!("resuming at iteration {}", state.params.iteration);
        (state, log)
    } else {
        if ckpt.exists() {
            return Err(Failure::usage(format!(
                "{} already holds a checkpoint; pass --resume or choose another directory",
                out.display()
            )));
        }
        (TrainState::new(ModelParams::init(arch, seed)?), TrainLog::default())
    };
    cfg.write(&out)?;
    log::info!(
        "training on {} windows ({} held out), {} parameters",
        train.shape()[0],
        holdout.shape()[0],
        state.params.param_count()
    );
    let trainer = Trainer {
        cfg: tcfg,
        train: &train,
        holdout: &holdout,
        out_dir: Some(out.clone()),
    };
    trainer.run(&mut state, &mut log, &mut |r| {
        log::info!(
            "iter {:>6}  L_D train {:+.5}  held-out {:+.5}  gp {:.5}  ct {:.5}",
            r.iter,
            r.l_d_train,
            r.l_d_holdout,
            r.gp,
            r.ct
        )
    })?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct ForecastArgs {
    /// Trained model checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Point forecast CSV: header `site,<timestamps>`, one row per site, per-unit values
    #[arg(long)]
    point_forecast: Option<PathBuf>,
    /// Build the point forecast from history instead (`persistence`)
    #[arg(long, value_parser = ["persistence"])]
    baseline: Option<String>,
    /// Fleet directory for the baseline and the realization
    #[arg(long)]
    data: Option<PathBuf>,
    /// First forecast timestamp, e.g. 2024-03-01T00:00:00
    #[arg(long)]
    start: Option<String>,
    /// Prediction-interval factor: scenarios lie within [p/alpha, alpha*p]
    #[arg(long)]
    alpha: Option<f64>,
    /// Number of scenarios
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

fn row_index(series: &[SiteSeries], start: &str) -> Result<usize, Failure> {
    let t = NaiveDateTime::parse_from_str(start, TIMESTAMP_FORMAT)
        .map_err(|e| Failure::usage(format!("invalid start `{start}` (expected {TIMESTAMP_FORMAT}): {e}")))?;
    let times = &series[0].timestamps;
    if let Some(i) = times.iter().position(|&x| x == t) {
        return Ok(i);
    }
    let next = times.last().map(|&l| l + chrono::Duration::minutes(series[0].step_minutes as i64));
    if next == Some(t) {
        return Ok(times.len());
    }
    Err(Failure::data(format!("start {start} is not on the fleet's timestamp grid")))
}

pub fn forecast(a: ForecastArgs) -> Result<(), Failure> {
    let mut cfg = resolve(defaults("forecast"), &a.common)?;
    cfg.flag("checkpoint", a.checkpoint.map(|p| p.display().to_string()))?;
    cfg.flag("out", a.out.map(|p| p.display().to_string()))?;
    cfg.flag("point_forecast", a.point_forecast.map(|p| p.display().to_string()))?;
    cfg.flag("baseline", a.baseline)?;
    cfg.flag("data", a.data.map(|p| p.display().to_string()))?;
    cfg.flag("start", a.start)?;
    cfg.flag("alpha", a.alpha)?;
    cfg.flag("n", a.n)?;
    cfg.flag("seed", a.seed)?;

    let alpha: f64 = cfg.parse("alpha")?;
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(Failure::usage(format!("alpha must exceed 1, got {alpha}")));
    }
    let n: usize = cfg.parse("n")?;
    if n == 0 {
        return Err(Failure::usage("n must be at least 1"));
    }
    let seed: u64 = cfg.parse("seed")?;
    let fcfg = cfg.forecasting()?;
    fcfg.validate()?;
    let ckpt = cfg.required_path("checkpoint")?;
    let out = cfg.required_path("out")?;

    let model = ModelParams::load(&ckpt)?;
    let horizon = model.config.horizon;
    let (point, realization) = match (cfg.path("point_forecast"), cfg.get("baseline")) {
        (Some(p), "") => (PointForecast::read_csv(&p)?, None),
        (None, "persistence") => {
            let dir = cfg.required_path("data")?;
            if cfg.get("start").is_empty() {
                return Err(Failure::usage("the persistence baseline needs `start`"));
            }
            let (meta, series) = data::load_fleet(&dir)?;
            let i = row_index(&series, cfg.get("start"))?;
            let point = data::persistence_forecast(&series, meta.kind, horizon, i)?;
            (point, data::realization(&series, i, horizon))
        }
        (Some(_), _) => return Err(Failure::usage("give either `point_forecast` or `baseline`, not both")),
        (None, "") => return Err(Failure::usage("a point forecast is required (`point_forecast` or `baseline`)")),
        (None, other) => return Err(Failure::usage(format!("unknown baseline `{other}`"))),
    };

    let _lock = lock_run_dir(&out)?;
    cfg.write(&out)?;
    log::info!("forecasting {n} scenarios at alpha {alpha}");
    let set = forecast::forecast_scenarios(&model, &point.values, alpha, n, &fcfg, seed)?;
    set.write(&out, &point, seed)?;
    point.write_csv(&out.join("point_forecast.csv"))?;
    let times = point.timestamps();
    forecast::write_matrix_csv(&out.join("interval_lower.csv"), &set.interval.lower, &point.site_ids, &times)?;
    forecast::write_matrix_csv(&out.join("interval_upper.csv"), &set.interval.upper, &point.site_ids, &times)?;
    if let Some(r) = &realization {
        forecast::write_matrix_csv(&out.join("realization.csv"), r, &point.site_ids, &times)?;
    }
    if set.shortfall > 0 {
        return Err(Failure::numeric(format!(
            "{} of {n} scenarios are infeasible (reported in {})",
            set.shortfall,
            out.join(forecast::MANIFEST_FILE).display()
        )));
    }
    log::info!("wrote {n} feasible scenarios to {}", out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Scenario directory written by `forecast`
    #[arg(long)]
    scenarios: Option<PathBuf>,
    /// Evaluate unconditional samples of this model instead of scenarios
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of unconditional samples
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Reference fleet directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Observed outcome CSV; defaults to the scenario directory's realization.csv
    #[arg(long)]
    realization: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

fn stack(set: &[Tensor]) -> Tensor {
    let mut shape = vec![set.len()];
    shape.extend(set[0].shape());
    Tensor::new(shape, set.iter().flat_map(|s| s.data().iter().copied()).collect()).expect("equal shapes")
}

/// Mean autocorrelation of each site over samples, skipping constant series.
fn mean_curves(samples: &Tensor, max_lag: usize) -> Result<Vec<Option<Vec<f64>>>, Failure> {
    let (n, k, t) = (samples.shape()[0], samples.shape()[1], samples.shape()[2]);
    let mut out = Vec::with_capacity(k);
    for site in 0..k {
        let mut acc = vec![0.0; max_lag + 1];
        let mut used = 0usize;
        for i in 0..n {
            let row = &samples.data()[(i * k + site) * t..(i * k + site + 1) * t];
            match metrics::autocorrelation(row, max_lag) {
                Ok(r) => {
                    acc.iter_mut().zip(&r).for_each(|(a, v)| *a += v);
                    used += 1;
                }
                Err(metrics::MetricError::ConstantSeries) => {}
                Err(e) => return Err(scengan_core::Error::from(e).into()),
            }
        }
        out.push((used > 0).then(|| acc.iter().map(|v| v / used as f64).collect()));
    }
    Ok(out)
}

fn matrix_csv(m: &[Vec<Option<f64>>], sites: &[String]) -> String {
    let mut s = format!("site,{}\n", sites.join(","));
    for (id, row) in sites.iter().zip(m) {
        let cells: Vec<String> = row.iter().map(|v| v.map_or(String::new(), |v| v.to_string())).collect();
        let _ = writeln!(s, "{id},{}", cells.join(","));
    }
    s
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let mut cfg = resolve(defaults("evaluate"), &a.common)?;
    cfg.flag("scenarios", a.scenarios.map(|p| p.display().to_string()))?;
    cfg.flag("checkpoint", a.checkpoint.map(|p| p.display().to_string()))?;
    cfg.flag("samples", a.samples)?;
    cfg.flag("seed", a.seed)?;
    cfg.flag("data", a.data.map(|p| p.display().to_string()))?;
    cfg.flag("realization", a.realization.map(|p| p.display().to_string()))?;
    cfg.flag("out", a.out.map(|p| p.display().to_string()))?;

    let data_dir = cfg.required_path("data")?;
    let out = cfg.required_path("out")?;
    let max_lag: usize = cfg.parse("max_lag")?;
    let (label, generated) = match (cfg.path("scenarios"), cfg.path("checkpoint")) {
        (Some(dir), None) => {
            let (_, set) = forecast::read_scenarios(&dir)?;
            if set.is_empty() {
                return Err(Failure::data(format!("{} lists no scenarios", dir.display())));
            }
            let default_real = dir.join("realization.csv");
            if cfg.path("realization").is_none() && default_real.exists() {
                cfg.set("realization", &default_real.display().to_string(), Source::Data)?;
            }
            (dir.display().to_string(), stack(&set))
        }
        (None, Some(ckpt)) => {
            let model = ModelParams::load(&ckpt)?;
            let n: usize = cfg.parse("samples")?;
            if n == 0 {
                return Err(Failure::usage("samples must be at least 1"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.parse("seed")?);
            let z = sample_latent(&mut rng, n, model.config.latent_dim);
            (ckpt.display().to_string(), model.generator_forward(&z)?)
        }
        _ => return Err(Failure::usage("give exactly one of `scenarios` and `checkpoint`")),
    };
    let (k, t) = (generated.shape()[1], generated.shape()[2]);

    let (_, series) = data::load_fleet(&data_dir)?;
    if series.len() != k {
        return Err(Failure::data(format!(
            "{} has {} sites, the evaluated samples have {k}",
            data_dir.display(),
            series.len()
        )));
    }
    let site_ids: Vec<String> = series.iter().map(|s| s.site_id.clone()).collect();
    let ds = load_windows(&cfg, &series, t)?;
    let reference = match cfg.get("reference_split") {
        "train" => ds.train(),
        "validation" => ds.validation(),
        "all" => ds.windows.clone(),
        other => return Err(Failure::usage(format!("unknown reference_split `{other}`"))),
    };
    if reference.shape()[0] == 0 {
        return Err(Failure::data("the reference split holds no windows"));
    }
    let realization = match cfg.path("realization") {
        Some(p) => {
            let (m, _, _) = forecast::read_matrix_csv(&p)?;
            if m.shape() != [k, t] {
                return Err(Failure::data(format!(
                    "{} has shape {:?}, the evaluated samples are [{k}, {t}]",
                    p.display(),
                    m.shape()
                )));
            }
            Some(m)
        }
        None => None,
    };
    let ground_truth = if data_dir.join(GROUND_TRUTH_FILE).exists() {
        GroundTruth::read(&data_dir)?.correlation
    } else {
        None
    };

    let _lock = lock_run_dir(&out)?;
    cfg.write(&out)?;

    let mut curves = Vec::new();
    let mut push = |label: &str, values: Vec<Option<Vec<f64>>>| {
        for (site, v) in values.into_iter().enumerate() {
            curves.push(AutocorrelationCurve {
                label: label.into(),
                site,
                values: v,
            });
        }
    };
    push("reference_mean", mean_curves(&reference, max_lag)?);
    push("generated_mean", mean_curves(&generated, max_lag)?);
    let per_sample: Vec<Tensor> = (0..generated.shape()[0])
        .map(|i| Tensor::new(vec![k, t], generated.data()[i * k * t..(i + 1) * k * t].to_vec()).expect("slice"))
        .collect();
    let (mut coverage, mut containment, mut contained) = (None, None, None);
    if let Some(r) = &realization {
        push("realization", mean_curves(&stack(std::slice::from_ref(r)), max_lag)?);
        coverage = Some(metrics::interval_coverage(&per_sample, r).map_err(scengan_core::Error::from)?);
        let c = metrics::autocorrelation_containment(&per_sample, r, max_lag).map_err(scengan_core::Error::from)?;
        contained = metrics::mean_lags_contained(&c);
        containment = Some(c);
    }

    let corr_ref = metrics::cross_site_correlation(&reference).map_err(scengan_core::Error::from)?;
    let corr_gen = metrics::cross_site_correlation(&generated).map_err(scengan_core::Error::from)?;
    let ref_sites = metrics::pooled_sites(&reference).map_err(scengan_core::Error::from)?;
    let gen_sites = metrics::pooled_sites(&generated).map_err(scengan_core::Error::from)?;
    let mut cdf_text = String::from("site,x,reference,generated\n");
    let mut ks = Vec::with_capacity(k);
    for site in 0..k {
        let cmp = metrics::cdf_compare(&ref_sites[site], &gen_sites[site]).map_err(scengan_core::Error::from)?;
        for row in &cmp.table {
            let _ = writeln!(cdf_text, "{},{},{},{}", site_ids[site], row.x, row.real, row.generated);
        }
        ks.push(cmp.ks);
    }
    let ground_truth = ground_truth.filter(|g| g.len() == k);
    let report = MetricReport {
        scenario_set: label,
        reference: data_dir.display().to_string(),
        max_lag,
        autocorrelation: curves.clone(),
        correlation_frobenius: metrics::frobenius_distance(&corr_ref, &corr_gen),
        ground_truth_max_abs_difference: ground_truth.as_ref().and_then(|g| metrics::max_abs_difference(&corr_gen, g)),
        correlation_reference: corr_ref.clone(),
        correlation_generated: corr_gen.clone(),
        ground_truth_correlation: ground_truth.clone(),
        ks_per_site: ks,
        coverage,
        autocorrelation_containment: containment,
        mean_lags_contained: contained,
    };

    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_text(&out.join("report.json"), &json)?;
    let mut ac = String::from("label,site,lag,value\n");
    for c in &curves {
        if let Some(v) = &c.values {
            for (lag, r) in v.iter().enumerate() {
                let _ = writeln!(ac, "{},{},{lag},{r}", c.label, site_ids[c.site]);
            }
        }
    }
    write_text(&out.join("autocorrelation.csv"), &ac)?;
    write_text(&out.join("correlation_reference.csv"), &matrix_csv(&corr_ref, &site_ids))?;
    write_text(&out.join("correlation_generated.csv"), &matrix_csv(&corr_gen, &site_ids))?;
    if let Some(g) = &ground_truth {
        let m: Vec<Vec<Option<f64>>> = g.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect();
        write_text(&out.join("correlation_ground_truth.csv"), &matrix_csv(&m, &site_ids))?;
    }
    write_text(&out.join("cdf.csv"), &cdf_text)?;
    if let Some(r) = &realization {
        let (lo, hi) = metrics::envelope(&per_sample);
        let mut s = String::from("site,step,lower,upper,realization\n");
        for site in 0..k {
            for step in 0..t {
                let c = site * t + step;
                let _ = writeln!(s, "{},{step},{},{},{}", site_ids[site], lo[c], hi[c], r.data()[c]);
            }
        }
        write_text(&out.join("envelope.csv"), &s)?;
    }
    log::info!(
        "KS per site {:?}, coverage {:?}, report in {}",
        report.ks_per_site,
        report.coverage,
        out.display()
    );
    Ok(())
}
