//! Output file formats: `metrics.csv`, `summary.json`, `final_params.bin`,
//! calendar dumps and sweep CSVs.
//!
//! `final_params.bin` is an 8-byte header (`b"LOCOPRM"` magic plus a one-byte
//! format version, currently 1) followed by the parameters as little-endian
//! 32-bit floats in block order.

use std::path::Path;

use serde::Serialize;

use crate::cusim::{Method, SweepRow, CU_TARGETS};
use crate::engine::{EvalMode, MetricsLog, TrainOutcome, TrainSetup};
use crate::Result;

pub const PARAMS_MAGIC: &[u8; 7] = b"LOCOPRM";
pub const PARAMS_VERSION: u8 = 1;

/// Run totals written next to the metrics CSV.
#[derive(Debug, Serialize)]
pub struct Summary {
    pub version: String,
    pub mode: String,
    pub replicas: usize,
    pub total_steps: u64,
    pub total_bytes: u64,
    pub peak_step_bytes: u64,
    pub num_send_events: u64,
    pub final_train_loss: f64,
    pub final_eval_loss_first: f64,
    pub final_eval_loss_avg: f64,
    pub final_eval_loss_outer: f64,
    pub headline_eval_mode: String,
    pub headline_eval_loss: f64,
    pub outer_eval_fell_back: bool,
    pub elapsed_seconds: f64,
    pub config: serde_json::Value,
}

pub fn version_string() -> String {
    format!("locolab/{}", env!("CARGO_PKG_VERSION"))
}

pub fn build_summary(
    setup: &TrainSetup,
    metrics: &MetricsLog,
    config_echo: serde_json::Value,
) -> Summary {
    let last = metrics.final_row().copied().unwrap_or(crate::engine::MetricsRow {
        step: 0,
        train_loss: f64::NAN,
        eval_loss_first: f64::NAN,
        eval_loss_avg: f64::NAN,
        eval_loss_outer: f64::NAN,
        bytes_step: 0,
        bytes_total: 0,
        cos_sim_rest: 0.0,
        cos_sim_win: 0.0,
    });
    let headline = match setup.eval_mode {
        EvalMode::FirstReplica => last.eval_loss_first,
        EvalMode::ReplicaAverage => last.eval_loss_avg,
        EvalMode::OuterParams => last.eval_loss_outer,
    };
    Summary {
        version: version_string(),
        mode: setup.mode.as_str().to_string(),
        replicas: setup.replicas,
        total_steps: setup.total_steps,
        total_bytes: metrics.total_bytes,
        peak_step_bytes: metrics.peak_step_bytes(),
        num_send_events: metrics.num_send_events,
        final_train_loss: last.train_loss,
        final_eval_loss_first: last.eval_loss_first,
        final_eval_loss_avg: last.eval_loss_avg,
        final_eval_loss_outer: last.eval_loss_outer,
        headline_eval_mode: format!("{:?}", setup.eval_mode),
        headline_eval_loss: headline,
        outer_eval_fell_back: metrics.outer_eval_fell_back,
        elapsed_seconds: metrics.elapsed_seconds,
        config: config_echo,
    }
}

/// Encode parameters for `final_params.bin`.
pub fn params_bin_bytes(params: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * params.len());
    out.extend_from_slice(PARAMS_MAGIC);
    out.push(PARAMS_VERSION);
    for &v in params {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Write `metrics.csv`, `summary.json` and `final_params.bin` into `dir`.
pub fn write_train_outputs(
    dir: &Path,
    setup: &TrainSetup,
    outcome: &TrainOutcome,
    config_echo: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), outcome.metrics.to_csv())?;
    let summary = build_summary(setup, &outcome.metrics, config_echo);
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    std::fs::write(
        dir.join("final_params.bin"),
        params_bin_bytes(&outcome.headline_params),
    )?;
    Ok(())
}

/// Sweep rows as CSV (`method,bandwidth_gbits,cu,makespan_s,bytes_total`).
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("method,bandwidth_gbits,cu,makespan_s,bytes_total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method.as_str(),
            r.bandwidth_gbits,
            r.cu,
            r.makespan_s,
            r.bytes_total as u64
        ));
    }
    out
}

/// Bandwidth-to-reach-target table as CSV.
pub fn cu_targets_csv(rows: &[SweepRow], methods: &[Method]) -> String {
    let mut out = String::from("method,cu_target,bandwidth_gbits\n");
    for &method in methods {
        for &target in &CU_TARGETS {
            let cell = crate::cusim::bandwidth_to_reach(rows, method, target)
                .map_or(String::new(), |b| b.to_string());
            out.push_str(&format!("{},{},{}\n", method.as_str(), target, cell));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_bin_layout() {
        let bytes = params_bin_bytes(&[1.0, -2.5]);
        assert_eq!(&bytes[..7], PARAMS_MAGIC);
        assert_eq!(bytes[7], PARAMS_VERSION);
        assert_eq!(bytes.len(), 8 + 8);
        assert_eq!(f32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(bytes[12..16].try_into().unwrap()), -2.5);
    }

    #[test]
    fn sweep_csv_shape() {
        let rows = vec![SweepRow {
            method: Method::Diloco,
            bandwidth_gbits: 1.5,
            cu: 0.75,
            makespan_s: 10.0,
            bytes_total: 123.0,
        }];
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("method,bandwidth_gbits,cu,makespan_s,bytes_total\n"));
        assert!(csv.contains("diloco,1.5,0.75,10,123"));
    }
}
