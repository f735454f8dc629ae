//! JSON configuration schema for the command-line interface.
//!
//! Configs are strict: unknown keys are rejected and validation happens
//! before any work starts. A config file holds exactly one command tree,
//! e.g. `{"train": {...}}` or `{"sweep": {...}}`.
//!
//! Documented defaults: `alpha = 0.5`, `tau = 1` for overlapped modes
//! (0 for blocking ones), `outer lr = 0.4` with momentum `0.9`,
//! `pattern = strided`, `codec = fp32`, `batch_size = 16`, evaluation every
//! 50 steps on 256 held-out samples. `H` must be given explicitly for
//! training (30 is the conventional small-scale choice); simulation configs
//! default to `H = 100`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::cusim::{self, Method, SimConfig};
use crate::engine::{EvalMode, Mode, TrainSetup};
use crate::model::NetShape;
use crate::optim::{AdamHp, NesterovHp};
use crate::paramspace::FragmentPattern;
use crate::schedule::{build_calendar, SyncCalendar};
use crate::{Error, Result};

/// Top-level config file: exactly one command tree.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory: Option<MemoryConfig>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub inner: AdamHp,
    pub outer: NesterovHp,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub interval: u64,
    pub mode: EvalMode,
    pub set_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            interval: 50,
            mode: EvalMode::OuterParams,
            set_size: 256,
        }
    }
}

fn default_alpha() -> f64 {
    0.5
}

fn default_pattern() -> FragmentPattern {
    FragmentPattern::Strided
}

fn default_batch() -> usize {
    16
}

fn default_threads() -> usize {
    1
}

/// Training command configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub model: ModelDims,
    #[serde(rename = "L")]
    pub num_blocks: usize,
    #[serde(rename = "M")]
    pub replicas: usize,
    #[serde(rename = "T")]
    pub total_steps: u64,
    #[serde(rename = "H")]
    pub sync_period: u64,
    pub seed: u64,
    /// Blocks per fragment; defaults to `L` (a single fragment).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fragment_size: Option<usize>,
    #[serde(default = "default_pattern")]
    pub pattern: FragmentPattern,
    /// Per-replica overlap delays; defaults to 1 each for overlapped modes
    /// and 0 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taus: Option<Vec<u64>>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub codec: Codec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub freeze_fedpart: bool,
    #[serde(default)]
    pub identical_shards: bool,
    #[serde(default = "default_threads")]
    pub worker_threads: usize,
}

impl TrainConfig {
    pub fn resolve(&self) -> Result<TrainSetup> {
        let default_tau = match self.mode {
            Mode::StreamingOverlapped | Mode::StreamingOverlappedQuantized => 1,
            _ => 0,
        };
        let taus = self
            .taus
            .clone()
            .unwrap_or_else(|| vec![default_tau; self.replicas]);
        // The quantized preset implies the 4-bit codec unless spelled out.
        let codec = match (self.mode, self.codec) {
            (Mode::StreamingOverlappedQuantized, Codec::Fp32) => Codec::E3m0,
            (_, other) => other,
        };
        let setup = TrainSetup {
            mode: self.mode,
            shape: NetShape {
                d_in: self.model.d_in,
                d_hidden: self.model.d_hidden,
                d_out: self.model.d_out,
            },
            num_blocks: self.num_blocks,
            replicas: self.replicas,
            total_steps: self.total_steps,
            sync_period: self.sync_period,
            fragment_size: self.fragment_size.unwrap_or(self.num_blocks),
            pattern: self.pattern,
            taus,
            alpha: self.alpha,
            codec,
            inner: self.optimizer.inner,
            outer: self.optimizer.outer,
            seed: self.seed,
            identical_shards: self.identical_shards,
            batch_size: self.batch_size,
            eval_interval: self.eval.interval,
            eval_set_size: self.eval.set_size,
            eval_mode: self.eval.mode,
            freeze_fedpart: self.freeze_fedpart,
            worker_threads: self.worker_threads,
        };
        setup.validate()?;
        Ok(setup)
    }
}

/// The synchronization calendar a training setup will follow.
pub fn train_calendar(setup: &TrainSetup) -> Result<SyncCalendar> {
    let (fragment_size, taus) = if setup.mode == Mode::Diloco {
        (setup.num_blocks, vec![0; setup.replicas])
    } else {
        (setup.fragment_size, setup.taus.clone())
    };
    if setup.mode == Mode::DataParallel {
        return Err(Error::config(
            "the data-parallel mode has no synchronization calendar",
        ));
    }
    let spec = crate::paramspace::partition(setup.num_blocks, fragment_size, setup.pattern)?;
    let spec = crate::paramspace::assign_offsets(&spec, setup.sync_period)?;
    build_calendar(&spec, setup.total_steps, setup.sync_period, &taus)
}

/// Simulation command configuration; either a named profile or explicit
/// hardware numbers, plus overrides.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub profile: Option<String>,
    pub num_params: Option<f64>,
    pub layers: Option<usize>,
    pub step_compute_time_s: Option<f64>,
    pub method: Option<Method>,
    pub bandwidth_gbits: Option<f64>,
    pub link_latency_s: Option<f64>,
    #[serde(rename = "H")]
    pub sync_period: Option<u64>,
    pub fragment_size: Option<usize>,
    pub tau: Option<u64>,
    pub bits_per_value: Option<u32>,
    pub num_steps: Option<u64>,
    pub pattern: Option<FragmentPattern>,
}

impl SimulateConfig {
    pub fn resolve(&self) -> Result<SimConfig> {
        let mut cfg = match &self.profile {
            Some(name) => cusim::profile(name)?,
            None => {
                let (params, layers, step) = match (self.num_params, self.layers, self.step_compute_time_s)
                {
                    (Some(p), Some(l), Some(s)) => (p, l, s),
                    _ => {
                        return Err(Error::config(
                            "either `profile` or all of `num_params`, `layers` and \
                             `step_compute_time_s` must be given",
                        ))
                    }
                };
                if layers == 0 {
                    return Err(Error::config("layers must be >= 1"));
                }
                let mut base = cusim::profile("1b")?;
                base.layers = layers;
                base.bytes_per_layer = params * 4.0 / layers as f64;
                base.step_compute_time = step;
                base
            }
        };
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(b) = self.bandwidth_gbits {
            cfg.bandwidth_bits_per_sec = b * 1e9;
        }
        if let Some(l) = self.link_latency_s {
            cfg.link_latency = l;
        }
        if let Some(h) = self.sync_period {
            cfg.sync_period = h;
        }
        if let Some(f) = self.fragment_size {
            cfg.fragment_size = f;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        if let Some(b) = self.bits_per_value {
            cfg.bits_per_value = b;
        }
        if let Some(n) = self.num_steps {
            cfg.num_steps = n;
        }
        if let Some(p) = self.pattern {
            cfg.pattern = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Bandwidth sweep configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    #[serde(flatten)]
    pub base: SimulateConfig,
    /// Grid in Gbit/s; defaults to a log-spaced grid 0.1 .. 2048.
    pub bandwidths_gbits: Option<Vec<f64>>,
    /// Methods to sweep; defaults to all of them.
    pub methods: Option<Vec<Method>>,
}

impl SweepConfig {
    pub fn resolve(&self) -> Result<(SimConfig, Vec<Method>, Vec<f64>)> {
        let mut base = self.base.clone();
        if base.bandwidth_gbits.is_none() {
            base.bandwidth_gbits = Some(1.0); // replaced per grid point
        }
        let cfg = base.resolve()?;
        let methods = self.methods.clone().unwrap_or_else(|| Method::ALL.to_vec());
        let grid = self
            .bandwidths_gbits
            .clone()
            .unwrap_or_else(cusim::default_bandwidth_grid);
        if grid.is_empty() {
            return Err(Error::config("bandwidth grid is empty"));
        }
        Ok((cfg, methods, grid))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    pub num_params: f64,
    pub layers: usize,
    pub fragment_size: usize,
}

/// Parse a config file with full field paths in error messages.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(config_error)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn config_error(e: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let path = e.path().to_string();
    let inner = e.inner().to_string();
    // Name the offending field with its full path, e.g. `train.H`.
    if let Some(rest) = inner.strip_prefix("missing field `") {
        if let Some(field) = rest.split('`').next() {
            let full = if path == "." {
                field.to_string()
            } else {
                format!("{path}.{field}")
            };
            return Error::config(format!("missing field `{full}`"));
        }
    }
    if path == "." {
        Error::config(inner)
    } else {
        Error::config(format!("{path}: {inner}"))
    }
}
