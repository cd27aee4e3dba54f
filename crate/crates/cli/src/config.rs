//! Line-oriented `key=value` run configuration with per-key provenance.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use scengan_core::forecast::ForecastConfig;
use scengan_core::model::ArchitectureConfig;
use scengan_core::train::TrainConfig;

use crate::Failure;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
    /// Filled in from the input data because nothing else set it.
    Data,
}

impl Source {
    fn label(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "config file",
            Source::Flag => "command line",
            Source::Data => "input data",
        }
    }
}

#[derive(Clone, Debug)]
struct Entry {
    key: &'static str,
    value: String,
    source: Source,
    about: &'static str,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    command: &'static str,
    entries: Vec<Entry>,
}

impl RunConfig {
    pub fn new(command: &'static str, keys: Vec<(&'static str, String, &'static str)>) -> Self {
        let entries = keys
            .into_iter()
            .map(|(key, value, about)| Entry {
                key,
                value,
                source: Source::Default,
                about,
            })
            .collect();
        Self { command, entries }
    }

    pub fn set(&mut self, key: &str, value: &str, source: Source) -> Result<(), Failure> {
        if key == "command" {
            return if value == self.command {
                Ok(())
            } else {
                Err(Failure::usage(format!(
                    "configuration is for `{value}`, not `{}`",
                    self.command
                )))
            };
        }
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.key == key)
            .ok_or_else(|| Failure::usage(format!("unknown configuration key `{key}` for `{}`", self.command)))?;
        entry.value = value.trim().to_string();
        entry.source = source;
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment line.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::data(format!("cannot read config file {}: {e}", path.display())))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Failure::usage(format!("{}:{}: expected key=value, got `{line}`", path.display(), n + 1))
            })?;
            self.set(k.trim(), v, Source::File)
                .map_err(|f| Failure::usage(format!("{}:{}: {}", path.display(), n + 1, f.message())))?;
        }
        Ok(())
    }

    /// Applies `--set key=value` overrides.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<(), Failure> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("--set expects key=value, got `{s}`")))?;
            self.set(k.trim(), v, Source::Flag)?;
        }
        Ok(())
    }

    pub fn flag(&mut self, key: &str, value: Option<impl ToString>) -> Result<(), Failure> {
        match value {
            Some(v) => self.set(key, &v.to_string(), Source::Flag),
            None => Ok(()),
        }
    }

    fn entry(&self, key: &str) -> &Entry {
        self.entries
            .iter()
            .find(|e| e.key == key)
            .unwrap_or_else(|| panic!("`{key}` is not a key of `{}`", self.command))
    }

    pub fn get(&self, key: &str) -> &str {
        &self.entry(key).value
    }

    pub fn source(&self, key: &str) -> Source {
        self.entry(key).source
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, Failure> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Failure::usage(format!("invalid value `{v}` for `{key}`")))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn required_path(&self, key: &str) -> Result<PathBuf, Failure> {
        self.path(key).ok_or_else(|| {
            Failure::usage(format!("`{key}` is required (pass --{} or set it in the config file)", key.replace('_', "-")))
        })
    }

    pub fn architecture(&self) -> Result<ArchitectureConfig, Failure> {
        let mut cfg = ArchitectureConfig::default();
        for k in ArchitectureConfig::KEYS {
            cfg.set(k, self.get(k))?;
        }
        Ok(cfg)
    }

    pub fn training(&self) -> Result<TrainConfig, Failure> {
        let mut cfg = TrainConfig::default();
        for k in TrainConfig::KEYS {
            cfg.set(k, self.get(k))?;
        }
        Ok(cfg)
    }

    pub fn forecasting(&self) -> Result<ForecastConfig, Failure> {
        let mut cfg = ForecastConfig::default();
        for k in ForecastConfig::KEYS {
            cfg.set(k, self.get(k))?;
        }
        Ok(cfg)
    }

    /// The resolved configuration, loadable again with `--config`.
    pub fn to_text(&self) -> String {
        let mut s = format!("# resolved configuration for `scengan {}`\ncommand={}\n", self.command, self.command);
        for e in &self.entries {
            let _ = writeln!(s, "\n# {} [{}]\n{}={}", e.about, e.source.label(), e.key, e.value);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
    }
}

fn describe(key: &str) -> &'static str {
    match key {
        "latent_dim" => "latent noise dimension",
        "sites" => "number of sites K",
        "horizon" => "steps per sample T",
        "g_hidden" => "generator dense hidden width",
        "g_base_channels" => "channels of the generator's first feature map",
        "g_deconv_channels" => "channels after each intermediate transposed convolution",
        "g_deconv_kernel" => "transposed-convolution kernel length",
        "g_deconv_strides" => "stride of each transposed convolution; their product must divide the horizon",
        "g_layer_norm" => "layer normalization in the generator's dense block",
        "d_hidden" => "critic hidden widths",
        "d_layer_norm" => "layer normalization between critic hidden layers",
        "leak_slope" => "negative slope of leaky ReLU",
        "dropout" => "critic dropout probability",
        "layer_norm_eps" => "layer-norm variance offset",
        "output" => "generator output map to [0,1]: sigmoid or clamp",
        "critic_output" => "critic output: linear or sigmoid",
        "lambda_gp" => "gradient-penalty weight",
        "lambda_ct" => "consistency-term weight",
        "ct_margin" => "consistency-term margin",
        "n_critic" => "critic updates per generator update",
        "lr" => "Adam step size",
        "beta1" => "Adam first-moment decay",
        "beta2" => "Adam second-moment decay",
        "adam_eps" => "Adam denominator offset",
        "batch_size" => "samples per minibatch",
        "iterations" => "generator iterations",
        "log_stride" => "iterations between log records and checkpoints",
        "log_wall_time" => "record elapsed seconds in the log (makes logs run-dependent)",
        "eps_floor" => "minimum half-width of every prediction-interval cell",
        "init_fraction" => "stage-one interval factor is 1 + init_fraction*(alpha-1)",
        "z_box" => "latent coordinates are kept in [-z_box, z_box]",
        "init_steps" => "stage-one optimizer steps",
        "init_lr" => "stage-one step size",
        "init_penalty" => "stage-one weight of the squared interval hinge",
        "init_margin" => "fraction of each cell kept clear by the stage-one hinge",
        "barrier_schedule" => "log-barrier weights, one stage-two solve per value",
        "main_steps" => "stage-two optimizer steps per barrier weight",
        "main_lr" => "stage-two step size",
        "max_backtracks" => "line-search halvings before a step is rejected",
        "max_attempts" => "fresh starts per scenario before it is reported infeasible",
        _ => "",
    }
}

pub fn architecture_keys() -> Vec<(&'static str, String, &'static str)> {
    let text = ArchitectureConfig::default().to_canonical_text();
    ArchitectureConfig::KEYS
        .iter()
        .zip(text.lines())
        .map(|(k, line)| {
            let v = line.split_once('=').map_or("", |(_, v)| v);
            (*k, v.to_string(), describe(k))
        })
        .collect()
}

pub fn training_keys() -> Vec<(&'static str, String, &'static str)> {
    TrainConfig::default()
        .entries()
        .into_iter()
        .map(|(k, v)| (k, v, describe(k)))
        .collect()
}

pub fn forecast_keys() -> Vec<(&'static str, String, &'static str)> {
    ForecastConfig::default()
        .entries()
        .into_iter()
        .map(|(k, v)| (k, v, describe(k)))
        .collect()
}
