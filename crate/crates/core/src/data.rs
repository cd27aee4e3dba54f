//! Site series ingestion, windowing and the on-disk fleet layout.
//!
//! A fleet directory holds one `timestamp,power_mw` CSV per site plus a
//! `metadata.json` sidecar naming the sites, their capacities and the step
//! length. Synthetic fleets add a `ground_truth.json`.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use scengan_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::PointForecast;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
pub const CSV_HEADER: [&str; 2] = ["timestamp", "power_mw"];
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FleetKind {
    Wind,
    Solar,
}

impl std::str::FromStr for FleetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wind" => Ok(Self::Wind),
            "solar" => Ok(Self::Solar),
            _ => Err(Error::Config(format!("unknown fleet kind `{s}` (expected wind or solar)"))),
        }
    }
}

impl std::fmt::Display for FleetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Wind => "wind",
            Self::Solar => "solar",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteSeries {
    pub site_id: String,
    pub capacity_mw: f64,
    pub step_minutes: u32,
    pub timestamps: Vec<NaiveDateTime>,
    pub power_mw: Vec<f64>,
}

impl SiteSeries {
    pub fn len(&self) -> usize {
        self.power_mw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.power_mw.is_empty()
    }

    pub fn per_unit(&self) -> Vec<f64> {
        self.power_mw.iter().map(|v| v / self.capacity_mw).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
        let io = |e: csv::Error| Error::data(path, e.to_string());
        w.write_record(CSV_HEADER).map_err(io)?;
        for (t, v) in self.timestamps.iter().zip(&self.power_mw) {
            w.write_record([t.format(TIMESTAMP_FORMAT).to_string(), v.to_string()])
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteMeta {
    pub id: String,
    pub file: String,
    pub capacity_mw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetMetadata {
    pub kind: FleetKind,
    pub step_minutes: u32,
    pub sites: Vec<SiteMeta>,
}

impl FleetMetadata {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(METADATA_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(METADATA_FILE);
        let text = serde_json::to_string_pretty(self).expect("metadata serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Parses one site file. `step_minutes`, when given, must match the file's
/// spacing; otherwise the spacing of the first two rows is taken.
pub fn load_csv(
    path: &Path,
    site_id: &str,
    capacity_mw: f64,
    step_minutes: Option<u32>,
) -> Result<SiteSeries> {
    if !(capacity_mw > 0.0 && capacity_mw.is_finite()) {
        return Err(Error::data(path, format!("capacity {capacity_mw} must be positive")));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::data(path, format!("cannot open: {e}")),
            _ => Error::data(path, e.to_string()),
        })?;
    let header = reader.headers().map_err(|e| Error::data(path, e.to_string()))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::data(path, format!("line 1: missing `{name}` column")))
    };
    let (ti, vi) = (col(CSV_HEADER[0])?, col(CSV_HEADER[1])?);

    let mut timestamps: Vec<NaiveDateTime> = Vec::new();
    let mut power = Vec::new();
    let mut step: Option<i64> = step_minutes.map(i64::from);
    for (row, rec) in reader.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::data(path, format!("line {line}: {e}")))?;
        let field = |i: usize, what: &str| {
            rec.get(i)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::data(path, format!("line {line}: missing {what}")))
        };
        let ts = NaiveDateTime::parse_from_str(field(ti, "timestamp")?, TIMESTAMP_FORMAT)
            .map_err(|e| Error::data(path, format!("line {line}: bad timestamp: {e}")))?;
        let raw = field(vi, "power value")?;
        let v: f64 = raw
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::data(path, format!("line {line}: bad power value `{raw}`")))?;
        if v < 0.0 {
            return Err(Error::data(path, format!("line {line}: negative power {v}")));
        }
        if v > capacity_mw {
            return Err(Error::data(
                path,
                format!("line {line}: value {v} exceeds capacity {capacity_mw}"),
            ));
        }
        if let Some(&prev) = timestamps.last() {
            let delta = (ts - prev).num_minutes();
            if ts <= prev {
                let what = if ts == prev { "duplicate" } else { "non-monotone" };
                return Err(Error::data(path, format!("line {line}: {what} timestamp {ts}")));
            }
            match step {
                None => step = Some(delta),
                Some(s) if s != delta => {
                    return Err(Error::data(
                        path,
                        format!("line {line}: step of {delta} minutes, expected {s} (mixed step lengths or gap)"),
                    ))
                }
                _ => {}
            }
        }
        timestamps.push(ts);
        power.push(v);
    }
    if timestamps.is_empty() {
        return Err(Error::data(path, "no data rows"));
    }
    let step_minutes = step
        .and_then(|s| u32::try_from(s).ok())
        .filter(|&s| s > 0)
        .ok_or_else(|| Error::data(path, "cannot determine step length from a single row"))?;
    Ok(SiteSeries {
        site_id: site_id.to_string(),
        capacity_mw,
        step_minutes,
        timestamps,
        power_mw: power,
    })
}

/// Loads every site listed in the fleet's metadata, in listed order.
pub fn load_fleet(dir: &Path) -> Result<(FleetMetadata, Vec<SiteSeries>)> {
    let meta = FleetMetadata::read(dir)?;
    if meta.sites.is_empty() {
        return Err(Error::data(dir.join(METADATA_FILE), "no sites listed"));
    }
    let series = meta
        .sites
        .par_iter()
        .map(|s| load_csv(&dir.join(&s.file), &s.id, s.capacity_mw, Some(meta.step_minutes)))
        .collect::<Result<Vec<_>>>()?;
    check_aligned(&series, &dir.join(METADATA_FILE))?;
    Ok((meta, series))
}

fn check_aligned(series: &[SiteSeries], context: &Path) -> Result<()> {
    let Some(first) = series.first() else {
        return Err(Error::data(context, "no series"));
    };
    for s in &series[1..] {
        if s.timestamps != first.timestamps {
            return Err(Error::data(
                context,
                format!("site `{}` is not on the same timestamp grid as `{}`", s.site_id, first.site_id),
            ));
        }
    }
    Ok(())
}

/// Windowed per-unit samples with a train/validation assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub site_ids: Vec<String>,
    pub capacities_mw: Vec<f64>,
    pub step_minutes: u32,
    pub horizon: usize,
    /// `[n, K, T]` per-unit values.
    pub windows: Tensor,
    /// Row index of each window's first step.
    pub starts: Vec<usize>,
    pub start_times: Vec<NaiveDateTime>,
    pub is_train: Vec<bool>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    fn select(&self, train: bool) -> Tensor {
        let per = self.site_ids.len() * self.horizon;
        let mut data = Vec::new();
        let mut n = 0;
        for (i, &t) in self.is_train.iter().enumerate() {
            if t == train {
                data.extend_from_slice(&self.windows.data()[i * per..(i + 1) * per]);
                n += 1;
            }
        }
        Tensor::new(vec![n, self.site_ids.len(), self.horizon], data).expect("consistent")
    }

    pub fn train(&self) -> Tensor {
        self.select(true)
    }

    pub fn validation(&self) -> Tensor {
        self.select(false)
    }

    /// One window as `[K, T]`.
    pub fn window(&self, i: usize) -> Tensor {
        let per = self.site_ids.len() * self.horizon;
        Tensor::new(
            vec![self.site_ids.len(), self.horizon],
            self.windows.data()[i * per..(i + 1) * per].to_vec(),
        )
        .expect("consistent")
    }
}

/// Cuts aligned series into `[K, T]` windows every `stride` steps and
/// assigns a seeded `train_fraction` of them to training.
pub fn window_dataset(
    series: &[SiteSeries],
    horizon: usize,
    stride: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if horizon == 0 || stride == 0 {
        return Err(Error::Config("horizon and stride must be positive".into()));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train_fraction {train_fraction} outside [0, 1]")));
    }
    check_aligned(series, Path::new("<dataset>"))?;
    let steps = series[0].len();
    let starts: Vec<usize> = if steps >= horizon {
        (0..=steps - horizon).step_by(stride).collect()
    } else {
        Vec::new()
    };
    if starts.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{steps} steps give {} window(s) of length {horizon}; need at least 2",
            starts.len()
        )));
    }
    let per_unit: Vec<Vec<f64>> = series.iter().map(SiteSeries::per_unit).collect();
    let k = series.len();
    let mut data = Vec::with_capacity(starts.len() * k * horizon);
    for &s in &starts {
        for site in &per_unit {
            data.extend_from_slice(&site[s..s + horizon]);
        }
    }
    let n = starts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    Ok(Dataset {
        site_ids: series.iter().map(|s| s.site_id.clone()).collect(),
        capacities_mw: series.iter().map(|s| s.capacity_mw).collect(),
        step_minutes: series[0].step_minutes,
        horizon,
        windows: Tensor::new(vec![n, k, horizon], data)?,
        start_times: starts.iter().map(|&s| series[0].timestamps[s]).collect(),
        starts,
        is_train,
    })
}

/// Writes a fleet directory: one CSV per site plus the metadata sidecar.
pub fn write_fleet(dir: &Path, kind: FleetKind, series: &[SiteSeries]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut sites = Vec::new();
    for s in series {
        let file = format!("{}.csv", s.site_id);
        let path = dir.join(&file);
        s.write_csv(&path)?;
        files.push(path);
        sites.push(SiteMeta {
            id: s.site_id.clone(),
            file,
            capacity_mw: s.capacity_mw,
        });
    }
    FleetMetadata {
        kind,
        step_minutes: series.first().map_or(60, |s| s.step_minutes),
        sites,
    }
    .write(dir)?;
    files.push(dir.join(METADATA_FILE));
    Ok(files)
}

/// Baseline point forecast issued at row `issue_index` from the history
/// before it. Wind repeats the last observed value. Solar repeats the most
/// recent full day, aligned by time of day.
pub fn persistence_forecast(
    series: &[SiteSeries],
    kind: FleetKind,
    horizon: usize,
    issue_index: usize,
) -> Result<PointForecast> {
    check_aligned(series, Path::new("<history>"))?;
    let first = &series[0];
    if issue_index > first.len() {
        return Err(Error::InsufficientData(format!(
            "issue index {issue_index} is past the end of {} rows",
            first.len()
        )));
    }
    let per_day = (1440 / first.step_minutes.max(1)) as usize;
    let need = match kind {
        FleetKind::Wind => horizon.max(1),
        FleetKind::Solar => horizon.max(per_day),
    };
    if issue_index < need {
        return Err(Error::InsufficientData(format!(
            "persistence needs {need} rows of history, have {issue_index}"
        )));
    }
    let mut values = Vec::with_capacity(series.len() * horizon);
    for s in series {
        let pu = s.per_unit();
        for t in 0..horizon {
            values.push(match kind {
                FleetKind::Wind => pu[issue_index - 1],
                FleetKind::Solar => pu[issue_index - per_day + t % per_day],
            });
        }
    }
    let start = first
        .timestamps
        .get(issue_index)
        .copied()
        .unwrap_or_else(|| first.timestamps[issue_index - 1] + chrono::Duration::minutes(first.step_minutes as i64));
    PointForecast::new(
        Tensor::new(vec![series.len(), horizon], values)?,
        series.iter().map(|s| s.site_id.clone()).collect(),
        start,
        first.step_minutes,
    )
}

/// Per-unit values of rows `start..start+horizon` as `[K, T]`, if present.
pub fn realization(series: &[SiteSeries], start: usize, horizon: usize) -> Option<Tensor> {
    if start + horizon > series.first()?.len() {
        return None;
    }
    let data = series
        .iter()
        .flat_map(|s| s.power_mw[start..start + horizon].iter().map(move |v| v / s.capacity_mw))
        .collect();
    Tensor::new(vec![series.len(), horizon], data).ok()
}
