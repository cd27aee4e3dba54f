//! Scenario generation by latent-space search around a point forecast.
//!
//! Each restart draws `z₀ ~ N(0, I)` and a target inside a slightly narrower
//! interval, pulls `G(z)` toward that target (stage one), then maximizes the
//! critic score under a log barrier that keeps `G(z)` strictly inside the
//! prediction interval (stage two). `z` is clamped to a box after every step.

use std::fs;
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use scengan_autodiff::{Graph, NodeId, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::TIMESTAMP_FORMAT;
use crate::error::{Error, Result};
use crate::model::{critic_graph, generator_graph, DropoutMode, ModelParams, ParamNodes, CRITIC_PREFIX, GENERATOR_PREFIX};

/// A `[K, T]` per-unit point forecast.
#[derive(Clone, Debug, PartialEq)]
pub struct PointForecast {
    pub values: Tensor,
    pub site_ids: Vec<String>,
    pub start: NaiveDateTime,
    pub step_minutes: u32,
}

impl PointForecast {
    pub fn new(values: Tensor, site_ids: Vec<String>, start: NaiveDateTime, step_minutes: u32) -> Result<Self> {
        if values.ndim() != 2 || values.shape()[0] != site_ids.len() {
            return Err(Error::ConfigMismatch(format!(
                "point forecast of shape {:?} for {} sites",
                values.shape(),
                site_ids.len()
            )));
        }
        if let Some(v) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("point forecast value {v} outside [0, 1]")));
        }
        Ok(Self {
            values,
            site_ids,
            start,
            step_minutes,
        })
    }

    pub fn sites(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn timestamps(&self) -> Vec<NaiveDateTime> {
        (0..self.horizon())
            .map(|t| self.start + Duration::minutes(t as i64 * self.step_minutes as i64))
            .collect()
    }

    /// Rows are sites, columns are horizon steps under an ISO-timestamp
    /// header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(path, &self.values, &self.site_ids, &self.timestamps())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (values, site_ids, times) = read_matrix_csv(path)?;
        let step = match times.as_slice() {
            [a, b, ..] => (*b - *a).num_minutes(),
            _ => return Err(Error::data(path, "need at least two horizon columns")),
        };
        for (i, w) in times.windows(2).enumerate() {
            if (w[1] - w[0]).num_minutes() != step {
                return Err(Error::data(path, format!("line 1: column {} breaks the uniform step", i + 3)));
            }
        }
        let step_minutes = u32::try_from(step)
            .ok()
            .filter(|&s| s > 0)
            .ok_or_else(|| Error::data(path, "line 1: timestamps must increase"))?;
        Self::new(values, site_ids, times[0], step_minutes).map_err(|e| Error::data(path, e.to_string()))
    }
}

/// Writes a `[K, T]` matrix as `site,<ts>,...` CSV.
pub fn write_matrix_csv(path: &Path, m: &Tensor, site_ids: &[String], times: &[NaiveDateTime]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    let err = |e: csv::Error| Error::data(path, e.to_string());
    let mut header = vec!["site".to_string()];
    header.extend(times.iter().map(|t| t.format(TIMESTAMP_FORMAT).to_string()));
    w.write_record(&header).map_err(err)?;
    let t = m.shape()[1];
    for (k, id) in site_ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(m.data()[k * t..(k + 1) * t].iter().map(f64::to_string));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<(Tensor, Vec<String>, Vec<NaiveDateTime>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::data(path, format!("cannot open: {e}")),
        _ => Error::data(path, e.to_string()),
    })?;
    let header = r.headers().map_err(|e| Error::data(path, e.to_string()))?.clone();
    let times = header
        .iter()
        .skip(1)
        .map(|h| NaiveDateTime::parse_from_str(h.trim(), TIMESTAMP_FORMAT))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::data(path, format!("line 1: bad timestamp header: {e}")))?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::data(path, format!("line {line}: {e}")))?;
        if rec.len() != times.len() + 1 {
            return Err(Error::data(path, format!("line {line}: expected {} fields", times.len() + 1)));
        }
        ids.push(rec[0].trim().to_string());
        for f in rec.iter().skip(1) {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::data(path, format!("line {line}: bad value `{f}`")))?;
            data.push(v);
        }
    }
    if ids.is_empty() {
        return Err(Error::data(path, "no site rows"));
    }
    let m = Tensor::new(vec![ids.len(), times.len()], data).map_err(|e| Error::data(path, e.to_string()))?;
    Ok((m, ids, times))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionInterval {
    pub alpha: f64,
    pub eps_floor: f64,
    pub lower: Tensor,
    pub upper: Tensor,
}

impl PredictionInterval {
    /// Strict interior test `L < s < U` in every cell.
    pub fn contains_strictly(&self, s: &Tensor) -> bool {
        s.shape() == self.lower.shape()
            && s.data()
                .iter()
                .zip(self.lower.data().iter().zip(self.upper.data()))
                .all(|(&v, (&l, &u))| l < v && v < u)
    }

    pub fn mean_width(&self) -> f64 {
        let n = self.lower.numel() as f64;
        self.upper.data().iter().zip(self.lower.data()).map(|(u, l)| u - l).sum::<f64>() / n
    }
}

/// `L = max(0, p/α)`, `U = min(1, α·p)`, then every cell narrower than
/// `2·ε` is widened about its centre to exactly `2·ε`, shifted back inside
/// `[0, 1]` when it would cross either end.
pub fn interval_bounds(p: &Tensor, alpha: f64, eps_floor: f64) -> Result<PredictionInterval> {
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must exceed 1, got {alpha}")));
    }
    if !(eps_floor > 0.0 && eps_floor < 0.25) {
        return Err(Error::Config(format!("eps_floor must lie in (0, 0.25), got {eps_floor}")));
    }
    if let Some(v) = p.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Config(format!("point forecast value {v} outside [0, 1]")));
    }
    let mut lower = p.map(|v| (v / alpha).max(0.0));
    let mut upper = p.map(|v| (alpha * v).min(1.0));
    for (l, u) in lower.data_mut().iter_mut().zip(upper.data_mut()) {
        if *u - *l < 2.0 * eps_floor {
            let c = 0.5 * (*l + *u);
            let (mut lo, mut hi) = (c - eps_floor, c + eps_floor);
            if lo < 0.0 {
                lo = 0.0;
                hi = 2.0 * eps_floor;
            } else if hi > 1.0 {
                hi = 1.0;
                lo = 1.0 - 2.0 * eps_floor;
            }
            *l = lo;
            *u = hi;
        }
    }
    Ok(PredictionInterval {
        alpha,
        eps_floor,
        lower,
        upper,
    })
}

pub fn init_alpha(alpha: f64, fraction: f64) -> f64 {
    1.0 + fraction * (alpha - 1.0)
}

/// Elementwise uniform draw from the `α_init` interval.
pub fn sample_init_target(p: &Tensor, alpha_init: f64, eps_floor: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let iv = interval_bounds(p, alpha_init, eps_floor)?;
    let mut out = iv.lower.clone();
    for (v, &u) in out.data_mut().iter_mut().zip(iv.upper.data()) {
        *v += (u - *v) * rng.random::<f64>();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastConfig {
    pub eps_floor: f64,
    /// `α_init = 1 + init_fraction·(α − 1)`.
    pub init_fraction: f64,
    pub z_box: f64,
    pub init_steps: usize,
    pub init_lr: f64,
    pub init_penalty: f64,
    /// Fraction of each cell's width kept clear by the stage-one hinge.
    pub init_margin: f64,
    pub barrier_schedule: Vec<f64>,
    pub main_steps: usize,
    pub main_lr: f64,
    pub max_backtracks: usize,
    pub max_attempts: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            eps_floor: 0.02,
            init_fraction: 0.75,
            z_box: 3.0,
            init_steps: 500,
            init_lr: 0.05,
            init_penalty: 100.0,
            init_margin: 0.1,
            barrier_schedule: vec![1e-1, 1e-2, 1e-3],
            main_steps: 100,
            main_lr: 0.02,
            max_backtracks: 12,
            max_attempts: 10,
        }
    }
}

impl ForecastConfig {
    pub const KEYS: &'static [&'static str] = &[
        "eps_floor",
        "init_fraction",
        "z_box",
        "init_steps",
        "init_lr",
        "init_penalty",
        "init_margin",
        "barrier_schedule",
        "main_steps",
        "main_lr",
        "max_backtracks",
        "max_attempts",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.eps_floor > 0.0 && self.eps_floor < 0.25) {
            return bad("eps_floor must lie in (0, 0.25)");
        }
        if !(self.init_fraction > 0.0 && self.init_fraction < 1.0) {
            return bad("init_fraction must lie in (0, 1)");
        }
        if !(self.z_box > 0.0) || !(self.init_lr > 0.0) || !(self.main_lr > 0.0) {
            return bad("z_box, init_lr and main_lr must be positive");
        }
        if !(self.init_penalty >= 0.0) || !(0.0..0.5).contains(&self.init_margin) {
            return bad("init_penalty must be non-negative and init_margin in [0, 0.5)");
        }
        if self.barrier_schedule.is_empty() || self.barrier_schedule.iter().any(|g| !(*g > 0.0)) {
            return bad("barrier_schedule must list positive weights");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value `{value}` for `{key}`"));
        let v = value.trim();
        let float = || v.parse::<f64>().map_err(|_| bad());
        let int = || v.parse::<usize>().map_err(|_| bad());
        match key {
            "eps_floor" => self.eps_floor = float()?,
            "init_fraction" => self.init_fraction = float()?,
            "z_box" => self.z_box = float()?,
            "init_steps" => self.init_steps = int()?,
            "init_lr" => self.init_lr = float()?,
            "init_penalty" => self.init_penalty = float()?,
            "init_margin" => self.init_margin = float()?,
            "barrier_schedule" => {
                self.barrier_schedule = v
                    .split(',')
                    .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<_>>()?
            }
            "main_steps" => self.main_steps = int()?,
            "main_lr" => self.main_lr = float()?,
            "max_backtracks" => self.max_backtracks = int()?,
            "max_attempts" => self.max_attempts = int()?,
            _ => return Err(Error::Config(format!("unknown forecast key `{key}`"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("eps_floor", format!("{:?}", self.eps_floor)),
            ("init_fraction", format!("{:?}", self.init_fraction)),
            ("z_box", format!("{:?}", self.z_box)),
            ("init_steps", self.init_steps.to_string()),
            ("init_lr", format!("{:?}", self.init_lr)),
            ("init_penalty", format!("{:?}", self.init_penalty)),
            ("init_margin", format!("{:?}", self.init_margin)),
            (
                "barrier_schedule",
                self.barrier_schedule
                    .iter()
                    .map(|g| format!("{g:?}"))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("main_steps", self.main_steps.to_string()),
            ("main_lr", format!("{:?}", self.main_lr)),
            ("max_backtracks", self.max_backtracks.to_string()),
            ("max_attempts", self.max_attempts.to_string()),
        ]
    }
}

/// What the latent search needs from a trained model.
pub trait ScenarioModel: Sync {
    fn latent_dim(&self) -> usize;
    /// `(K, T)`
    fn output_shape(&self) -> (usize, usize);
    /// `z [1, latent_dim] -> [1, K, T]`
    fn generate(&self, g: &mut Graph, z: NodeId) -> Result<NodeId>;
    /// `x [1, K, T] -> score [1]`, deterministic.
    fn score(&self, g: &mut Graph, x: NodeId) -> Result<NodeId>;
}

impl ScenarioModel for ModelParams {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn output_shape(&self) -> (usize, usize) {
        (self.config.sites, self.config.horizon)
    }

    fn generate(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let nodes = ParamNodes::bind(g, self, GENERATOR_PREFIX, false)?;
        generator_graph(g, &self.config, &nodes, z)
    }

    fn score(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let nodes = ParamNodes::bind(g, self, CRITIC_PREFIX, false)?;
        Ok(critic_graph(g, &self.config, &nodes, x, DropoutMode::Off)?.score)
    }
}

const Z_NAME: &str = "z";
const SATURATION_NORM: f64 = 1e-12;
const PERTURBATION_SCALE: f64 = 0.1;

/// A scalar objective of `z` held as a replayable graph.
struct Objective {
    graph: Graph,
    z: NodeId,
    out: NodeId,
    value: NodeId,
    score: Option<NodeId>,
}

impl Objective {
    /// Evaluates at `z`; `None` when the objective is undefined there
    /// (for instance outside the barrier's domain).
    fn eval(&mut self, z: &Tensor) -> Option<f64> {
        self.graph.replay(&[(Z_NAME, z)]).ok()?;
        let v = self.graph.value(self.value).data()[0];
        v.is_finite().then_some(v)
    }

    fn grad(&self) -> Result<Tensor> {
        let grads = self.graph.backward(self.value)?;
        Ok(grads
            .get(self.z)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.graph.shape(self.z))))
    }

    fn output(&self) -> Tensor {
        let v = self.graph.value(self.out);
        v.reshaped(&v.shape()[1..]).expect("batch of one")
    }
}

fn clamp_box(z: &mut Tensor, r: f64) {
    for v in z.data_mut() {
        *v = v.clamp(-r, r);
    }
}

struct Descent {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam-direction descent on `z` with backtracking: a step is accepted only
/// when the objective is defined there and not larger than the current
/// value. Returns accepted objective values and the steps taken.
fn descend(
    obj: &mut Objective,
    z: &mut Tensor,
    steps: usize,
    lr: f64,
    cfg: &ForecastConfig,
    rng: &mut ChaCha8Rng,
    history: &mut Vec<f64>,
) -> Result<usize> {
    let mut cur = obj
        .eval(z)
        .ok_or_else(|| Error::Numeric("objective undefined at the starting point".into()))?;
    history.push(cur);
    let n = z.numel();
    let mut st = Descent {
        m: vec![0.0; n],
        v: vec![0.0; n],
        t: 0,
    };
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut used = 0;
    for _ in 0..steps {
        used += 1;
        let grad = obj.grad()?;
        if !grad.is_finite() {
            return Err(Error::Numeric("non-finite latent gradient".into()));
        }
        let dir: Vec<f64> = if grad.norm() < SATURATION_NORM {
            (0..n)
                .map(|_| -PERTURBATION_SCALE * rng.sample::<f64, _>(StandardNormal) / lr)
                .collect()
        } else {
            st.t += 1;
            let (c1, c2) = (1.0 - b1.powi(st.t), 1.0 - b2.powi(st.t));
            grad.data()
                .iter()
                .enumerate()
                .map(|(i, &g)| {
                    st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
                    st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
                    (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + eps)
                })
                .collect()
        };
        let mut step = line_search(obj, z, &dir, lr, cur, cfg);
        if step.is_none() && grad.norm() >= SATURATION_NORM {
            // Momentum can point uphill after a kink; retry along the
            // steepest-descent direction and restart the moments.
            let peak = grad.data().iter().fold(0.0f64, |a, g| a.max(g.abs()));
            let steepest: Vec<f64> = grad.data().iter().map(|g| g / peak).collect();
            step = line_search(obj, z, &steepest, lr, cur, cfg);
            st = Descent {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            };
        }
        match step {
            Some((next, v)) => {
                *z = next;
                cur = v;
                history.push(v);
            }
            None if grad.norm() >= SATURATION_NORM => {
                obj.eval(z);
                break;
            }
            None => {}
        }
        // Leave the graph evaluated at the current iterate.
        obj.eval(z);
    }
    Ok(used)
}

/// Halving line search along `-dir` from `z`, accepting the first defined
/// point whose objective does not exceed `cur`.
fn line_search(
    obj: &mut Objective,
    z: &Tensor,
    dir: &[f64],
    lr: f64,
    cur: f64,
    cfg: &ForecastConfig,
) -> Option<(Tensor, f64)> {
    let mut scale = lr;
    for _ in 0..=cfg.max_backtracks {
        let mut trial = z.clone();
        for (t, d) in trial.data_mut().iter_mut().zip(dir) {
            *t -= scale * d;
        }
        clamp_box(&mut trial, cfg.z_box);
        if let Some(v) = obj.eval(&trial) {
            if v <= cur {
                return Some((trial, v));
            }
        }
        scale *= 0.5;
    }
    None
}

fn z_input(g: &mut Graph, z: &Tensor) -> Result<NodeId> {
    Ok(g.input(Z_NAME, z.reshaped(&[1, z.numel()])?)?)
}

fn batch_of_one(t: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend(t.shape());
    t.reshaped(&shape).expect("same element count")
}

/// `‖G(z) − target‖² + μ·Σ hinge²` where the hinge keeps `G(z)` a margin
/// inside the interval.
fn init_objective(
    model: &dyn ScenarioModel,
    target: &Tensor,
    interval: &PredictionInterval,
    cfg: &ForecastConfig,
    z0: &Tensor,
) -> Result<Objective> {
    let mut g = Graph::new();
    let z = z_input(&mut g, z0)?;
    let out = model.generate(&mut g, z)?;
    let tgt = g.constant(batch_of_one(target))?;
    let d = g.sub(out, tgt)?;
    let d2 = g.mul(d, d)?;
    let mut value = g.sum(d2)?;
    if cfg.init_penalty > 0.0 {
        let lo = interval
            .lower
            .data()
            .iter()
            .zip(interval.upper.data())
            .map(|(l, u)| l + cfg.init_margin * (u - l));
        let hi = interval
            .lower
            .data()
            .iter()
            .zip(interval.upper.data())
            .map(|(l, u)| u - cfg.init_margin * (u - l));
        let lo = g.constant(batch_of_one(&Tensor::new(interval.lower.shape().to_vec(), lo.collect())?))?;
        let hi = g.constant(batch_of_one(&Tensor::new(interval.lower.shape().to_vec(), hi.collect())?))?;
        let below = g.sub(lo, out)?;
        let below = g.relu(below)?;
        let above = g.sub(out, hi)?;
        let above = g.relu(above)?;
        let b2 = g.mul(below, below)?;
        let a2 = g.mul(above, above)?;
        let pen = g.add(b2, a2)?;
        let pen = g.sum(pen)?;
        let pen = g.scale(pen, cfg.init_penalty)?;
        value = g.add(value, pen)?;
    }
    Ok(Objective {
        graph: g,
        z,
        out,
        value,
        score: None,
    })
}

/// `−D(G(z)) − γ·Σ[log(G(z) − L) + log(U − G(z))]`
fn main_objective(model: &dyn ScenarioModel, interval: &PredictionInterval, gamma: f64, z0: &Tensor) -> Result<Objective> {
    let mut g = Graph::new();
    let z = z_input(&mut g, z0)?;
    let out = model.generate(&mut g, z)?;
    let score = model.score(&mut g, out)?;
    let neg = g.sum(score)?;
    let neg = g.scale(neg, -1.0)?;
    let lo = g.constant(batch_of_one(&interval.lower))?;
    let hi = g.constant(batch_of_one(&interval.upper))?;
    // At a non-interior start these logs are undefined and graph
    // construction fails; callers check feasibility first.
    let a = g.sub(out, lo)?;
    let a = g.log(a)?;
    let b = g.sub(hi, out)?;
    let b = g.log(b)?;
    let s = g.add(a, b)?;
    let s = g.sum(s)?;
    let s = g.scale(s, -gamma)?;
    let value = g.add(neg, s)?;
    Ok(Objective {
        graph: g,
        z,
        out,
        value,
        score: Some(score),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitResult {
    pub z: Tensor,
    pub output: Tensor,
    /// Objective values at the start and after every accepted step.
    pub history: Vec<f64>,
    pub steps: usize,
}

/// Stage one: pull `G(z)` toward `target` from `z0`.
pub fn solve_init(
    model: &dyn ScenarioModel,
    target: &Tensor,
    interval: &PredictionInterval,
    cfg: &ForecastConfig,
    z0: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<InitResult> {
    let mut z = z0.reshaped(&[1, z0.numel()])?;
    clamp_box(&mut z, cfg.z_box);
    let mut obj = init_objective(model, target, interval, cfg, &z)?;
    let mut history = Vec::new();
    let steps = descend(&mut obj, &mut z, cfg.init_steps, cfg.init_lr, cfg, rng, &mut history)?;
    Ok(InitResult {
        output: obj.output(),
        z: z.reshaped(&[z.numel()])?,
        history,
        steps,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MainResult {
    pub z: Tensor,
    pub scenario: Tensor,
    pub score: f64,
    pub feasible: bool,
    pub steps: usize,
}

/// Stage two: barrier-constrained critic maximization from `z_init`.
pub fn solve_main(
    model: &dyn ScenarioModel,
    z_init: &Tensor,
    interval: &PredictionInterval,
    cfg: &ForecastConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MainResult> {
    let mut z = z_init.reshaped(&[1, z_init.numel()])?;
    clamp_box(&mut z, cfg.z_box);
    let start = generate_one(model, &z)?;
    if !interval.contains_strictly(&start) {
        return Ok(MainResult {
            score: score_one(model, &start)?,
            z: z.reshaped(&[z.numel()])?,
            scenario: start,
            feasible: false,
            steps: 0,
        });
    }
    let mut steps = 0;
    let mut last = None;
    for &gamma in &cfg.barrier_schedule {
        let mut obj = main_objective(model, interval, gamma, &z)?;
        let mut history = Vec::new();
        steps += descend(&mut obj, &mut z, cfg.main_steps, cfg.main_lr, cfg, rng, &mut history)?;
        last = Some(obj);
    }
    let obj = last.expect("non-empty schedule");
    let scenario = obj.output();
    let score = obj.graph.value(obj.score.expect("main objective has a score")).data()[0];
    Ok(MainResult {
        z: z.reshaped(&[z.numel()])?,
        feasible: interval.contains_strictly(&scenario),
        scenario,
        score,
        steps,
    })
}

fn generate_one(model: &dyn ScenarioModel, z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let zn = g.constant(z.reshaped(&[1, z.numel()])?)?;
    let out = model.generate(&mut g, zn)?;
    let v = g.value(out);
    Ok(v.reshaped(&v.shape()[1..])?)
}

fn score_one(model: &dyn ScenarioModel, x: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let xn = g.constant(batch_of_one(x))?;
    let s = model.score(&mut g, xn)?;
    Ok(g.value(s).data()[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub restart: usize,
    pub attempts: usize,
    pub feasible: bool,
    pub critic_score: f64,
    pub init_steps: usize,
    pub main_steps: usize,
    pub init_objective_start: f64,
    pub init_objective_end: f64,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSet {
    pub interval: PredictionInterval,
    pub scenarios: Vec<Tensor>,
    pub records: Vec<ScenarioRecord>,
    /// Restarts that ended without a feasible scenario.
    pub shortfall: usize,
}

fn restart_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// One independent restart. Depends only on `(seed, index)`, never on other
/// restarts.
pub fn forecast_restart(
    model: &dyn ScenarioModel,
    point: &Tensor,
    interval: &PredictionInterval,
    cfg: &ForecastConfig,
    seed: u64,
    index: usize,
) -> Result<(Tensor, ScenarioRecord)> {
    let mut rng = restart_rng(seed, index);
    let alpha_init = init_alpha(interval.alpha, cfg.init_fraction);
    let latent = model.latent_dim();
    let mut best: Option<(Tensor, ScenarioRecord)> = None;
    let mut last_err = None;
    for attempt in 1..=cfg.max_attempts {
        let z0 = Tensor::from_fn(&[latent], |_| rng.sample(StandardNormal));
        let target = sample_init_target(point, alpha_init, cfg.eps_floor, &mut rng)?;
        let run = solve_init(model, &target, interval, cfg, &z0, &mut rng).and_then(|init| {
            let main = solve_main(model, &init.z, interval, cfg, &mut rng)?;
            Ok((init, main))
        });
        let (init, main) = match run {
            Ok(r) => r,
            Err(e) if e.is_numeric() => {
                log::debug!("restart {index} attempt {attempt}: {e}");
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let record = ScenarioRecord {
            restart: index,
            attempts: attempt,
            feasible: main.feasible,
            critic_score: main.score,
            init_steps: init.steps,
            main_steps: main.steps,
            init_objective_start: init.history[0],
            init_objective_end: *init.history.last().expect("non-empty history"),
            z: main.z.data().to_vec(),
        };
        let done = main.feasible;
        best = Some((main.scenario, record));
        if done {
            break;
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Numeric(format!("restart {index} produced no scenario"))))
}

/// `n` restarts in parallel, merged in restart order.
pub fn forecast_scenarios(
    model: &dyn ScenarioModel,
    point: &Tensor,
    alpha: f64,
    n: usize,
    cfg: &ForecastConfig,
    seed: u64,
) -> Result<ScenarioSet> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("scenario count must be at least 1".into()));
    }
    let (k, t) = model.output_shape();
    if point.shape() != [k, t] {
        return Err(Error::ConfigMismatch(format!(
            "point forecast has shape {:?}, model produces [{k}, {t}]",
            point.shape()
        )));
    }
    let interval = interval_bounds(point, alpha, cfg.eps_floor)?;
    let results = (0..n)
        .into_par_iter()
        .map(|i| forecast_restart(model, point, &interval, cfg, seed, i))
        .collect::<Result<Vec<_>>>()?;
    let (scenarios, records): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let shortfall = records.iter().filter(|r| !r.feasible).count();
    Ok(ScenarioSet {
        interval,
        scenarios,
        records,
        shortfall,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub alpha: f64,
    pub eps_floor: f64,
    pub n_requested: usize,
    pub n_feasible: usize,
    pub shortfall: usize,
    pub seed: u64,
    pub sites: Vec<String>,
    pub start: String,
    pub step_minutes: u32,
    pub mean_interval_width: f64,
    pub files: Vec<String>,
    pub records: Vec<ScenarioRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn scenario_file_name(i: usize) -> String {
    format!("scenario_{i:03}.csv")
}

impl ScenarioSet {
    /// Writes one CSV per scenario plus `manifest.json`.
    pub fn write(&self, dir: &Path, point: &PointForecast, seed: u64) -> Result<ScenarioManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let times = point.timestamps();
        let mut files = Vec::new();
        for (i, s) in self.scenarios.iter().enumerate() {
            let name = scenario_file_name(i);
            write_matrix_csv(&dir.join(&name), s, &point.site_ids, &times)?;
            files.push(name);
        }
        let manifest = ScenarioManifest {
            alpha: self.interval.alpha,
            eps_floor: self.interval.eps_floor,
            n_requested: self.scenarios.len(),
            n_feasible: self.scenarios.len() - self.shortfall,
            shortfall: self.shortfall,
            seed,
            sites: point.site_ids.clone(),
            start: point.start.format(TIMESTAMP_FORMAT).to_string(),
            step_minutes: point.step_minutes,
            mean_interval_width: self.interval.mean_width(),
            files,
            records: self.records.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// Reads the scenarios listed in a manifest, as `[K, T]` tensors.
pub fn read_scenarios(dir: &Path) -> Result<(ScenarioManifest, Vec<Tensor>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ScenarioManifest = serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
    let scenarios = manifest
        .files
        .iter()
        .map(|f| read_matrix_csv(&dir.join(f)).map(|(m, _, _)| m))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenarios))
}
