//! Alternating critic/generator training with gradient penalty and
//! consistency term.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use scengan_autodiff::{AutodiffError, Graph, NodeId, Tensor};

use crate::adam::{AdamConfig, AdamState};
use crate::checkpoint::Checkpoint;
use crate::error::{CheckpointFault, Error, Result};
use crate::model::{
    critic_graph, generator_graph, CriticNodes, DropoutMode, ModelParams, ParamNodes, CRITIC_PREFIX,
    GENERATOR_PREFIX,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.txt";
pub const LOG_HEADER: &str = "iter,l_d_train,l_d_holdout,wass_est,gp,ct,seconds";

/// Weight of the critic-output distance inside the consistency term.
pub const CT_OUTPUT_WEIGHT: f64 = 0.1;

const EVAL_ROWS: usize = 256;
const TRAIN_STREAM_SALT: u64 = 0x5eed_7a1e;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_gp: f64,
    pub lambda_ct: f64,
    pub ct_margin: f64,
    pub n_critic: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub iterations: u64,
    pub log_stride: u64,
    /// Record elapsed seconds in the log. Off by default so that two runs
    /// produce byte-identical logs.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_gp: 10.0,
            lambda_ct: 2.0,
            ct_margin: 0.0,
            n_critic: 5,
            adam: AdamConfig::default(),
            batch_size: 32,
            iterations: 2000,
            log_stride: 100,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lambda_gp",
        "lambda_ct",
        "ct_margin",
        "n_critic",
        "lr",
        "beta1",
        "beta2",
        "adam_eps",
        "batch_size",
        "iterations",
        "log_stride",
        "log_wall_time",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lambda_gp >= 0.0 && self.lambda_ct >= 0.0) {
            return bad("lambda_gp and lambda_ct must be non-negative");
        }
        if !self.ct_margin.is_finite() {
            return bad("ct_margin must be finite");
        }
        if self.n_critic == 0 {
            return bad("n_critic must be at least 1");
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam.eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.batch_size == 0 || self.log_stride == 0 {
            return bad("batch_size and log_stride must be at least 1");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value `{value}` for `{key}`"));
        let v = value.trim();
        let float = || v.parse::<f64>().map_err(|_| bad());
        match key {
            "lambda_gp" => self.lambda_gp = float()?,
            "lambda_ct" => self.lambda_ct = float()?,
            "ct_margin" => self.ct_margin = float()?,
            "n_critic" => self.n_critic = v.parse().map_err(|_| bad())?,
            "lr" => self.adam.lr = float()?,
            "beta1" => self.adam.beta1 = float()?,
            "beta2" => self.adam.beta2 = float()?,
            "adam_eps" => self.adam.eps = float()?,
            "batch_size" => self.batch_size = v.parse().map_err(|_| bad())?,
            "iterations" => self.iterations = v.parse().map_err(|_| bad())?,
            "log_stride" => self.log_stride = v.parse().map_err(|_| bad())?,
            "log_wall_time" => self.log_wall_time = v.parse().map_err(|_| bad())?,
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lambda_gp", format!("{:?}", self.lambda_gp)),
            ("lambda_ct", format!("{:?}", self.lambda_ct)),
            ("ct_margin", format!("{:?}", self.ct_margin)),
            ("n_critic", self.n_critic.to_string()),
            ("lr", format!("{:?}", self.adam.lr)),
            ("beta1", format!("{:?}", self.adam.beta1)),
            ("beta2", format!("{:?}", self.adam.beta2)),
            ("adam_eps", format!("{:?}", self.adam.eps)),
            ("batch_size", self.batch_size.to_string()),
            ("iterations", self.iterations.to_string()),
            ("log_stride", self.log_stride.to_string()),
            ("log_wall_time", self.log_wall_time.to_string()),
        ]
    }
}

/// A critic applied to a batch node in the given dropout mode.
pub type CriticFn<'a> = dyn FnMut(&mut Graph, NodeId, DropoutMode<'_>) -> Result<CriticNodes> + 'a;

fn row_norms(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let flat = g.reshape(x, &[shape[0], shape[1..].iter().product()])?;
    let sq = g.mul(flat, flat)?;
    let s = g.sum_cols(sq)?;
    Ok(g.sqrt(s)?)
}

/// Penalty `mean_i (‖∇D(x̃_i)‖₂ − 1)²` evaluated at the given points, with
/// dropout disabled. The returned node is differentiable with respect to
/// the critic's parameters.
pub fn gradient_penalty_at(g: &mut Graph, critic: &mut CriticFn<'_>, x_tilde: Tensor) -> Result<NodeId> {
    let name = format!("x_tilde#{}", g.len());
    let xt = g.input(name, x_tilde)?;
    let out = critic(g, xt, DropoutMode::Off)?;
    let total = g.sum(out.score)?;
    let grad = g.input_grad_node(total, xt)?;
    let norms = row_norms(g, grad)?;
    let dev = g.add_scalar(norms, -1.0)?;
    let sq = g.mul(dev, dev)?;
    Ok(g.mean(sq)?)
}

/// Interpolates `x̃ = t·real + (1−t)·fake` with one `t ~ U[0,1]` per sample
/// and returns the gradient penalty there.
pub fn gradient_penalty(
    g: &mut Graph,
    critic: &mut CriticFn<'_>,
    real: &Tensor,
    fake: &Tensor,
    rng: &mut dyn RngCore,
) -> Result<NodeId> {
    if real.shape() != fake.shape() {
        return Err(Error::ConfigMismatch(format!(
            "real batch {:?} and fake batch {:?} differ in shape",
            real.shape(),
            fake.shape()
        )));
    }
    let b = real.shape()[0];
    let per = real.numel() / b.max(1);
    let ts: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
    let mixed = Tensor::from_fn(real.shape(), |i| {
        let t = ts[i / per];
        t * real.data()[i] + (1.0 - t) * fake.data()[i]
    });
    gradient_penalty_at(g, critic, mixed)
}

/// Two stochastic-dropout passes over `x` and the hinge
/// `mean max(0, ‖f′−f″‖₂ + 0.1·|D′−D″| − M′)`. The first pass is returned so
/// callers can reuse its scores.
pub fn consistency_term(
    g: &mut Graph,
    critic: &mut CriticFn<'_>,
    x: NodeId,
    margin: f64,
    rng: &mut dyn RngCore,
) -> Result<(NodeId, CriticNodes, CriticNodes)> {
    let first = critic(g, x, DropoutMode::On(&mut *rng))?;
    let second = critic(g, x, DropoutMode::On(&mut *rng))?;
    let df = g.sub(first.features, second.features)?;
    let feat_dist = row_norms(g, df)?;
    let ds = g.sub(first.score, second.score)?;
    let ds2 = g.mul(ds, ds)?;
    let out_dist = g.sqrt(ds2)?;
    let weighted = g.scale(out_dist, CT_OUTPUT_WEIGHT)?;
    let sum = g.add(feat_dist, weighted)?;
    let shifted = g.add_scalar(sum, -margin)?;
    let hinge = g.relu(shifted)?;
    Ok((g.mean(hinge)?, first, second))
}

#[derive(Clone, Copy, Debug)]
pub struct CriticLoss {
    pub total: NodeId,
    /// `−E[D(real)] + E[D(fake)]`
    pub wasserstein: NodeId,
    pub gp: Option<NodeId>,
    pub ct: Option<NodeId>,
}

/// `L_D = −E[D(X)] + E[D(G(Z))] + λ1·GP + λ2·CT`. The real term uses the
/// first train-mode dropout pass, which doubles as `X′` of the consistency
/// term. Penalty terms with a zero weight are not built.
pub fn critic_loss(
    g: &mut Graph,
    critic: &mut CriticFn<'_>,
    real: &Tensor,
    fake: &Tensor,
    cfg: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<CriticLoss> {
    let gp = if cfg.lambda_gp > 0.0 {
        Some(gradient_penalty(g, critic, real, fake, rng)?)
    } else {
        None
    };
    let xr = g.constant(real.clone())?;
    let (ct, real_pass) = if cfg.lambda_ct > 0.0 {
        let (ct, first, _) = consistency_term(g, critic, xr, cfg.ct_margin, rng)?;
        (Some(ct), first)
    } else {
        (None, critic(g, xr, DropoutMode::On(&mut *rng))?)
    };
    let xf = g.constant(fake.clone())?;
    let fake_pass = critic(g, xf, DropoutMode::On(&mut *rng))?;
    let er = g.mean(real_pass.score)?;
    let ef = g.mean(fake_pass.score)?;
    let wasserstein = g.sub(ef, er)?;
    let mut total = wasserstein;
    if let Some(gp) = gp {
        let w = g.scale(gp, cfg.lambda_gp)?;
        total = g.add(total, w)?;
    }
    if let Some(ct) = ct {
        let w = g.scale(ct, cfg.lambda_ct)?;
        total = g.add(total, w)?;
    }
    Ok(CriticLoss {
        total,
        wasserstein,
        gp,
        ct,
    })
}

/// `L_G = −E[D(G(Z))]` with an eval-mode critic.
pub fn generator_loss(g: &mut Graph, critic: &mut CriticFn<'_>, fake: NodeId) -> Result<NodeId> {
    let out = critic(g, fake, DropoutMode::Off)?;
    let m = g.mean(out.score)?;
    Ok(g.scale(m, -1.0)?)
}

pub fn sample_latent(rng: &mut dyn RngCore, batch: usize, latent_dim: usize) -> Tensor {
    Tensor::from_fn(&[batch, latent_dim], |_| rng.sample(StandardNormal))
}

/// Draws `batch` windows uniformly with replacement from `[n, K, T]` data.
pub fn sample_batch(data: &Tensor, batch: usize, rng: &mut dyn RngCore) -> Tensor {
    let n = data.shape()[0];
    let per = data.numel() / n;
    let mut out = Vec::with_capacity(batch * per);
    for _ in 0..batch {
        let i = rng.random_range(0..n);
        out.extend_from_slice(&data.data()[i * per..(i + 1) * per]);
    }
    let mut shape = data.shape().to_vec();
    shape[0] = batch;
    Tensor::new(shape, out).expect("consistent shape")
}

fn first_rows(data: &Tensor, rows: usize) -> Tensor {
    let n = data.shape()[0].min(rows);
    let per = data.numel() / data.shape()[0];
    let mut shape = data.shape().to_vec();
    shape[0] = n;
    Tensor::new(shape, data.data()[..n * per].to_vec()).expect("consistent shape")
}

fn training_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TRAIN_STREAM_SALT);
    rng.set_stream(iteration);
    rng
}

/// Model parameters together with both optimizers' state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt_d: AdamState,
    pub opt_g: AdamState,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticStepStats {
    pub loss: f64,
    pub gp: f64,
    pub ct: f64,
}

fn check_finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} is {v}")))
    }
}

fn collect_grads(g: &Graph, nodes: &ParamNodes, root: NodeId) -> Result<BTreeMap<String, Tensor>> {
    let mut grads = g.backward(root)?;
    let mut out = BTreeMap::new();
    for (name, &id) in nodes.iter() {
        if let Some(t) = grads.take(id) {
            if !t.is_finite() {
                return Err(Error::Numeric(format!("gradient of `{name}` is not finite")));
            }
            out.insert(name.clone(), t);
        }
    }
    Ok(out)
}

fn apply_update(
    params: &mut ModelParams,
    prefix: &str,
    opt: &mut AdamState,
    cfg: &AdamConfig,
    grads: &BTreeMap<String, Tensor>,
) {
    let mut sub: BTreeMap<String, Tensor> = params
        .tensors
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    opt.step(cfg, &mut sub, grads);
    params.tensors.extend(sub);
}

const OPT_PREFIX: &str = "opt.";

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            opt_d: AdamState::default(),
            opt_g: AdamState::default(),
        }
    }

    /// Fake samples for a latent batch, detached from the generator.
    pub fn fake_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.params.generator_forward(z)
    }

    pub fn critic_step(
        &mut self,
        cfg: &TrainConfig,
        real: &Tensor,
        z: &Tensor,
        rng: &mut dyn RngCore,
    ) -> Result<CriticStepStats> {
        let fake = self.fake_batch(z)?;
        let mut g = Graph::new();
        let nodes = ParamNodes::bind(&mut g, &self.params, CRITIC_PREFIX, true)?;
        let arch = self.params.config.clone();
        let mut critic = |g: &mut Graph, x: NodeId, mode: DropoutMode<'_>| critic_graph(g, &arch, &nodes, x, mode);
        let loss = critic_loss(&mut g, &mut critic, real, &fake, cfg, rng)?;
        let stats = CriticStepStats {
            loss: check_finite("critic loss", g.value(loss.total).data()[0])?,
            gp: loss.gp.map_or(0.0, |n| g.value(n).data()[0]),
            ct: loss.ct.map_or(0.0, |n| g.value(n).data()[0]),
        };
        let grads = collect_grads(&g, &nodes, loss.total)?;
        apply_update(&mut self.params, CRITIC_PREFIX, &mut self.opt_d, &cfg.adam, &grads);
        Ok(stats)
    }

    pub fn generator_step(&mut self, cfg: &TrainConfig, z: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let gen_nodes = ParamNodes::bind(&mut g, &self.params, GENERATOR_PREFIX, true)?;
        let critic_nodes = ParamNodes::bind(&mut g, &self.params, CRITIC_PREFIX, false)?;
        let arch = self.params.config.clone();
        let zn = g.constant(z.clone())?;
        let fake = generator_graph(&mut g, &arch, &gen_nodes, zn)?;
        let mut critic =
            |g: &mut Graph, x: NodeId, mode: DropoutMode<'_>| critic_graph(g, &arch, &critic_nodes, x, mode);
        let loss = generator_loss(&mut g, &mut critic, fake)?;
        let value = check_finite("generator loss", g.value(loss).data()[0])?;
        let grads = collect_grads(&g, &gen_nodes, loss)?;
        apply_update(&mut self.params, GENERATOR_PREFIX, &mut self.opt_g, &cfg.adam, &grads);
        Ok(value)
    }

    /// One generator iteration: `n_critic` critic updates then one
    /// generator update, all driven by the iteration's own random stream.
    pub fn iteration(&mut self, cfg: &TrainConfig, train: &Tensor) -> Result<CriticStepStats> {
        let next = self.params.iteration + 1;
        let mut rng = training_rng(self.params.seed, next);
        let latent = self.params.config.latent_dim;
        let mut stats = CriticStepStats::default();
        for _ in 0..cfg.n_critic {
            let real = sample_batch(train, cfg.batch_size, &mut rng);
            let z = sample_latent(&mut rng, cfg.batch_size, latent);
            stats = self.critic_step(cfg, &real, &z, &mut rng)?;
        }
        let z = sample_latent(&mut rng, cfg.batch_size, latent);
        self.generator_step(cfg, &z)?;
        self.params.iteration = next;
        Ok(stats)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.params.to_checkpoint();
        for (tag, opt) in [("d", &self.opt_d), ("g", &self.opt_g)] {
            ckpt.tensors
                .push((format!("{OPT_PREFIX}{tag}.step"), Tensor::scalar(opt.step as f64)));
            for (moment, map) in [("m", &opt.m), ("v", &opt.v)] {
                for (name, t) in map {
                    ckpt.tensors.push((format!("{OPT_PREFIX}{tag}.{moment}.{name}"), t.clone()));
                }
            }
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<Self> {
        let params = ModelParams::from_checkpoint(ckpt, path)?;
        let mut state = Self::new(params);
        for (tag, opt) in [("d", &mut state.opt_d), ("g", &mut state.opt_g)] {
            let step_name = format!("{OPT_PREFIX}{tag}.step");
            if let Some(step) = ckpt.tensor(&step_name).and_then(Tensor::item) {
                opt.step = step as u64;
            }
            for (moment, map) in [("m", &mut opt.m), ("v", &mut opt.v)] {
                let prefix = format!("{OPT_PREFIX}{tag}.{moment}.");
                for (name, t) in &ckpt.tensors {
                    if let Some(param) = name.strip_prefix(&prefix) {
                        match state.params.tensors.get(param) {
                            Some(p) if p.shape() == t.shape() => {
                                map.insert(param.to_string(), t.clone());
                            }
                            _ => {
                                return Err(Error::Checkpoint {
                                    path: path.to_path_buf(),
                                    fault: CheckpointFault::Malformed(format!(
                                        "optimizer tensor `{name}` does not match any parameter"
                                    )),
                                })
                            }
                        }
                    }
                }
            }
        }
        Ok(state)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub iter: u64,
    pub l_d_train: f64,
    pub l_d_holdout: f64,
    pub wass_est: f64,
    pub gp: f64,
    pub ct: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.iter, r.l_d_train, r.l_d_holdout, r.wass_est, r.gp, r.ct, r.seconds
            );
        }
        s
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(LOG_HEADER) {
            return Err(Error::data(path, format!("line 1: expected header `{LOG_HEADER}`")));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::data(path, format!("line {}: malformed log record", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |j: usize| f[j].trim().parse::<f64>().map_err(|_| bad());
            records.push(TrainRecord {
                iter: f[0].trim().parse().map_err(|_| bad())?,
                l_d_train: num(1)?,
                l_d_holdout: num(2)?,
                wass_est: num(3)?,
                gp: num(4)?,
                ct: num(5)?,
                seconds: num(6)?,
            });
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_csv()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, path)
    }
}

/// Fixed evaluation material for the periodic log records.
struct EvalSet {
    train: Tensor,
    holdout: Tensor,
    z: Tensor,
}

impl EvalSet {
    fn new(seed: u64, latent_dim: usize, train: &Tensor, holdout: &Tensor) -> Self {
        let mut rng = training_rng(seed, u64::MAX);
        let rows = EVAL_ROWS.min(train.shape()[0]);
        Self {
            train: sample_batch(train, rows, &mut rng),
            holdout: first_rows(holdout, EVAL_ROWS),
            z: sample_latent(&mut rng, EVAL_ROWS, latent_dim),
        }
    }

    fn critic_gap(&self, params: &ModelParams, x: &Tensor, fake_mean: f64) -> Result<f64> {
        let (real, _) = params.discriminator_forward(x, DropoutMode::Off)?;
        Ok(fake_mean - real.sum() / real.numel() as f64)
    }
}

/// Checks everything that can be checked before the first step: config
/// ranges, data size, data shape against the architecture, and that the
/// critic supports the second-order path the gradient penalty needs.
pub fn preflight(params: &ModelParams, cfg: &TrainConfig, train: &Tensor, holdout: &Tensor) -> Result<()> {
    cfg.validate()?;
    params.config.validate()?;
    let arch = &params.config;
    for (what, data) in [("training", train), ("held-out", holdout)] {
        if data.ndim() != 3 || data.shape()[1] != arch.sites || data.shape()[2] != arch.horizon {
            return Err(Error::ConfigMismatch(format!(
                "{what} data has shape {:?}, model expects [n, {}, {}]",
                data.shape(),
                arch.sites,
                arch.horizon
            )));
        }
    }
    if train.shape()[0] < 10 * cfg.batch_size {
        return Err(Error::InsufficientData(format!(
            "{} training windows, need at least 10 x batch size = {}",
            train.shape()[0],
            10 * cfg.batch_size
        )));
    }
    if holdout.shape()[0] == 0 {
        return Err(Error::InsufficientData("no held-out windows".into()));
    }
    if cfg.lambda_gp > 0.0 {
        let mut g = Graph::new();
        let nodes = ParamNodes::bind(&mut g, params, CRITIC_PREFIX, true)?;
        let mut critic = |g: &mut Graph, x: NodeId, mode: DropoutMode<'_>| critic_graph(g, arch, &nodes, x, mode);
        let probe = Tensor::full(&[1, arch.sites, arch.horizon], 0.5);
        match gradient_penalty_at(&mut g, &mut critic, probe) {
            Err(Error::Autodiff(AutodiffError::NoSecondOrderRule { op, .. })) => {
                return Err(Error::Config(format!(
                    "the gradient penalty needs second derivatives of the critic, but its `{op}` layer has none; \
                     use critic_output=linear or lambda_gp=0"
                )))
            }
            other => {
                other?;
            }
        }
    }
    Ok(())
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub train: &'a Tensor,
    pub holdout: &'a Tensor,
    pub out_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    /// Restores state and log from `out_dir`, dropping log records newer
    /// than the checkpoint.
    pub fn resume(out_dir: &Path) -> Result<(TrainState, TrainLog)> {
        let ckpt_path = out_dir.join(CHECKPOINT_FILE);
        let state = TrainState::from_checkpoint(&Checkpoint::read(&ckpt_path)?, &ckpt_path)?;
        let log_path = out_dir.join(LOG_FILE);
        let mut log = if log_path.exists() {
            TrainLog::read(&log_path)?
        } else {
            TrainLog::default()
        };
        log.records.retain(|r| r.iter <= state.params.iteration);
        Ok((state, log))
    }

    fn save(&self, state: &TrainState, log: &TrainLog) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            state.to_checkpoint().write(&dir.join(CHECKPOINT_FILE))?;
            log.write(&dir.join(LOG_FILE))?;
        }
        Ok(())
    }

    fn diagnose(&self, state: &TrainState, err: &Error) {
        if let Some(dir) = &self.out_dir {
            let text = format!(
                "training aborted during iteration {}\nerror: {err}\nlast checkpoint: iteration {}\n",
                state.params.iteration + 1,
                state.params.iteration / self.cfg.log_stride * self.cfg.log_stride,
            );
            if let Err(e) = fs::write(dir.join(DIAGNOSTIC_FILE), text) {
                log::error!("could not write diagnostic file: {e}");
            }
        }
    }

    /// Trains until `cfg.iterations`, appending a record, checkpoint and
    /// log flush every `log_stride` iterations and at the end.
    pub fn run(
        &self,
        state: &mut TrainState,
        log: &mut TrainLog,
        progress: &mut dyn FnMut(&TrainRecord),
    ) -> Result<()> {
        preflight(&state.params, &self.cfg, self.train, self.holdout)?;
        let eval = EvalSet::new(state.params.seed, state.params.config.latent_dim, self.train, self.holdout);
        let started = Instant::now();
        let base_seconds = log.records.last().map_or(0.0, |r| r.seconds);
        while state.params.iteration < self.cfg.iterations {
            let step = state.iteration(&self.cfg, self.train).and_then(|stats| {
                let it = state.params.iteration;
                if !it.is_multiple_of(self.cfg.log_stride) && it != self.cfg.iterations {
                    return Ok(None);
                }
                let fake = state.params.generator_forward(&eval.z)?;
                let (fs, _) = state.params.discriminator_forward(&fake, DropoutMode::Off)?;
                let fake_mean = fs.sum() / fs.numel() as f64;
                let l_d_train = eval.critic_gap(&state.params, &eval.train, fake_mean)?;
                let l_d_holdout = eval.critic_gap(&state.params, &eval.holdout, fake_mean)?;
                let record = TrainRecord {
                    iter: it,
                    l_d_train,
                    l_d_holdout,
                    wass_est: -l_d_holdout,
                    gp: stats.gp,
                    ct: stats.ct,
                    seconds: if self.cfg.log_wall_time {
                        base_seconds + started.elapsed().as_secs_f64()
                    } else {
                        0.0
                    },
                };
                for v in [l_d_train, l_d_holdout, stats.gp, stats.ct] {
                    check_finite("logged loss", v)?;
                }
                Ok(Some(record))
            });
            match step {
                Ok(Some(record)) => {
                    log.records.push(record);
                    self.save(state, log)?;
                    progress(&record);
                }
                Ok(None) => {}
                Err(e) if e.is_numeric() => {
                    let e = Error::Numeric(e.to_string());
                    self.diagnose(state, &e);
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}
