//! Discrete-event simulator of compute utilization versus bandwidth for the
//! protocol family: data-parallel, full-vector sync, streaming fragments, and
//! overlapped/quantized variants.
//!
//! The cost model is deliberately simple: one serial compute pipeline whose
//! `3L - 1` per-step nodes split the measured step time uniformly, and one
//! serial network link on which a reduce of `b` payload bytes takes
//! `8 b / bandwidth + latency` seconds, independent of the replica count
//! (a point-to-point equivalent). Absolute bandwidth thresholds therefore
//! carry a calibration factor; ratios and orderings between methods are the
//! meaningful outputs.

mod dag;
mod sim;

pub use dag::{build_dag, NodeKind, SimDag};
pub use sim::{simulate, SimResult};

use serde::{Deserialize, Serialize};

use crate::paramspace::FragmentPattern;
use crate::{Error, Result};

/// Protocol variant being simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DataParallel,
    Diloco,
    Streaming,
    StreamingOverlap,
    #[serde(rename = "streaming_overlap_4bit")]
    StreamingOverlap4bit,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::DataParallel,
        Method::Diloco,
        Method::Streaming,
        Method::StreamingOverlap,
        Method::StreamingOverlap4bit,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::DataParallel => "data_parallel",
            Method::Diloco => "diloco",
            Method::Streaming => "streaming",
            Method::StreamingOverlap => "streaming_overlap",
            Method::StreamingOverlap4bit => "streaming_overlap_4bit",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown method `{s}`; valid methods: {}",
                    Method::ALL.map(|m| m.as_str()).join(", ")
                ))
            })
    }
}

/// Hardware and protocol profile for one simulation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SimConfig {
    pub layers: usize,
    /// Native (32-bit) bytes of one layer's gradients or outer gradients.
    pub bytes_per_layer: f64,
    /// Pure compute time of one forward+backward step, seconds.
    pub step_compute_time: f64,
    pub bandwidth_bits_per_sec: f64,
    pub link_latency: f64,
    pub method: Method,
    pub sync_period: u64,
    pub fragment_size: usize,
    pub tau: u64,
    pub bits_per_value: u32,
    pub num_steps: u64,
    pub pattern: FragmentPattern,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.num_steps == 0 || self.sync_period == 0 {
            return Err(Error::config(
                "layers, num_steps and H must all be >= 1",
            ));
        }
        if !(self.bytes_per_layer > 0.0)
            || !(self.step_compute_time > 0.0)
            || !(self.bandwidth_bits_per_sec > 0.0)
            || self.link_latency < 0.0
        {
            return Err(Error::config(
                "bytes_per_layer, step_compute_time and bandwidth must be positive",
            ));
        }
        if matches!(
            self.method,
            Method::Streaming | Method::StreamingOverlap | Method::StreamingOverlap4bit
        ) && self.layers % self.fragment_size != 0
        {
            return Err(Error::config(format!(
                "fragment_size {} does not divide the layer count {}",
                self.fragment_size, self.layers
            )));
        }
        if matches!(
            self.method,
            Method::StreamingOverlap | Method::StreamingOverlap4bit
        ) && self.tau >= self.sync_period
        {
            return Err(Error::config(format!(
                "overlap delay tau={} violates the constraint tau < H (H={})",
                self.tau, self.sync_period
            )));
        }
        Ok(())
    }

    /// Wire precision: the 4-bit method compresses, everything else ships the
    /// configured width (32 unless overridden).
    pub fn effective_bits(&self) -> u32 {
        match self.method {
            Method::StreamingOverlap4bit => 4,
            _ => self.bits_per_value,
        }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_bandwidth_gbits(mut self, gbits: f64) -> Self {
        self.bandwidth_bits_per_sec = gbits * 1e9;
        self
    }

    pub fn bandwidth_gbits(&self) -> f64 {
        self.bandwidth_bits_per_sec / 1e9
    }
}

/// External model profile shipped as a JSON config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    name: String,
    num_params: f64,
    layers: usize,
    step_compute_time_s: f64,
}

const LLAMA_405B: &str = include_str!("../../configs/llama405b.json");
const DEEPSEEK_V3: &str = include_str!("../../configs/deepseekv3.json");

/// Names accepted by [`profile`].
pub const PROFILE_NAMES: [&str; 5] = ["1b", "10b", "100b", "llama405b", "deepseekv3"];

fn base_config(num_params: f64, layers: usize, step_compute_time: f64) -> SimConfig {
    SimConfig {
        layers,
        bytes_per_layer: num_params * 4.0 / layers as f64,
        step_compute_time,
        bandwidth_bits_per_sec: 1e9,
        link_latency: 0.0,
        method: Method::Streaming,
        sync_period: 100,
        fragment_size: 3,
        tau: 1,
        bits_per_value: 32,
        num_steps: 250,
        pattern: FragmentPattern::Strided,
    }
}

/// Built-in hardware profiles. `1b`, `10b` and `100b` use the measured step
/// times 0.1 s / 0.8 s / 4.9 s; `llama405b` and `deepseekv3` come from the
/// JSON profile files shipped under `configs/`.
pub fn profile(name: &str) -> Result<SimConfig> {
    let parse_file = |text: &str| -> Result<SimConfig> {
        let p: ProfileFile = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("bad profile file: {e}")))?;
        let mut cfg = base_config(p.num_params, p.layers, p.step_compute_time_s);
        // Streaming needs fragment_size | layers; when 3 does not divide the
        // file's layer count, fall back to the largest smaller divisor.
        if p.layers % cfg.fragment_size != 0 {
            cfg.fragment_size = (1..=cfg.fragment_size)
                .rev()
                .find(|f| p.layers % f == 0)
                .unwrap_or(1);
        }
        let _ = p.name;
        Ok(cfg)
    };
    match name {
        "1b" => Ok(base_config(1e9, 24, 0.1)),
        "10b" => Ok(base_config(10e9, 48, 0.8)),
        "100b" => Ok(base_config(100e9, 108, 4.9)),
        "llama405b" => parse_file(LLAMA_405B),
        "deepseekv3" => parse_file(DEEPSEEK_V3),
        other => Err(Error::config(format!(
            "unknown profile `{other}`; valid profiles: {}",
            PROFILE_NAMES.join(", ")
        ))),
    }
}

/// One point of a bandwidth sweep.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepRow {
    pub method: Method,
    pub bandwidth_gbits: f64,
    pub cu: f64,
    pub makespan_s: f64,
    pub bytes_total: f64,
}

/// Compute-utilization targets reported alongside sweeps.
pub const CU_TARGETS: [f64; 5] = [0.5, 0.8, 0.9, 0.95, 0.99];

/// Log-spaced default grid, 0.1 Gbit/s to ~2 Tbit/s.
pub fn default_bandwidth_grid() -> Vec<f64> {
    let mut grid = Vec::new();
    let mut b = 0.1f64;
    while b <= 2048.0 {
        grid.push(b);
        b *= 2f64.powf(1.0 / 3.0);
    }
    grid
}

/// Simulate every (method, bandwidth) pair of the grid.
pub fn sweep(base: &SimConfig, methods: &[Method], bandwidths_gbits: &[f64]) -> Result<Vec<SweepRow>> {
    if bandwidths_gbits.is_empty() {
        return Err(Error::config("bandwidth grid is empty"));
    }
    let mut rows = Vec::with_capacity(methods.len() * bandwidths_gbits.len());
    for &method in methods {
        for &gbits in bandwidths_gbits {
            let cfg = base.with_method(method).with_bandwidth_gbits(gbits);
            let res = simulate(&build_dag(&cfg)?)?;
            rows.push(SweepRow {
                method,
                bandwidth_gbits: gbits,
                cu: res.cu,
                makespan_s: res.makespan_s,
                bytes_total: res.bytes_total,
            });
        }
    }
    Ok(rows)
}

/// Smallest grid bandwidth at which `method` reaches `target` utilization.
pub fn bandwidth_to_reach(rows: &[SweepRow], method: Method, target: f64) -> Option<f64> {
    let mut candidates: Vec<&SweepRow> = rows.iter().filter(|r| r.method == method).collect();
    candidates.sort_by(|a, b| a.bandwidth_gbits.total_cmp(&b.bandwidth_gbits));
    candidates
        .iter()
        .find(|r| r.cu >= target)
        .map(|r| r.bandwidth_gbits)
}

/// Accelerator-memory arithmetic of fragment-wise synchronization.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MemoryOverhead {
    /// Parameters plus both Adam moments, 32-bit: `params * 3 * 4` bytes.
    pub inner_bytes: f64,
    /// One fragment of outer parameters plus its momentum:
    /// `params * 2 * 4 * fragment_size / layers` bytes.
    pub outer_fragment_bytes: f64,
    pub overhead_fraction: f64,
    pub inner_gib: f64,
    pub outer_fragment_gib: f64,
}

/// Memory overhead of holding one fragment of outer state next to the inner
/// training state.
pub fn memory_overhead(num_params: f64, layers: usize, fragment_size: usize) -> Result<MemoryOverhead> {
    if !(num_params > 0.0) || layers == 0 || fragment_size == 0 {
        return Err(Error::config(
            "num_params, layers and fragment_size must be positive",
        ));
    }
    let inner = num_params * 3.0 * 4.0;
    let outer = num_params * 2.0 * 4.0 * fragment_size as f64 / layers as f64;
    const GIB: f64 = 1024.0 * 1024.0 * 1024.0;
    Ok(MemoryOverhead {
        inner_bytes: inner,
        outer_fragment_bytes: outer,
        overhead_fraction: outer / inner,
        inner_gib: inner / GIB,
        outer_fragment_gib: outer / GIB,
    })
}
