//! Run metrics: per-interval losses, exact byte counters, and per-round
//! outer-gradient diagnostics.

use std::collections::BTreeMap;

use serde::Serialize;

/// One row of `metrics.csv`, emitted at every evaluation interval.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub train_loss: f64,
    pub eval_loss_first: f64,
    pub eval_loss_avg: f64,
    pub eval_loss_outer: f64,
    pub bytes_step: u64,
    pub bytes_total: u64,
    pub cos_sim_rest: f64,
    pub cos_sim_win: f64,
}

/// Diagnostics of one synchronization round (one fragment send).
#[derive(Debug, Clone, Serialize)]
pub struct SyncRound {
    pub step: u64,
    pub fragment: usize,
    /// Mean pairwise cosine of raw replica deltas, input projection excluded.
    pub cos_sim_rest: Option<f64>,
    /// Same, over the input-projection slice of the fragment (if any).
    pub cos_sim_win: Option<f64>,
    pub bytes: u64,
}

#[derive(Debug, Default, Serialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    pub sync_rounds: Vec<SyncRound>,
    pub bytes_by_step: BTreeMap<u64, u64>,
    pub total_bytes: u64,
    pub num_send_events: u64,
    pub outer_eval_fell_back: bool,
    pub elapsed_seconds: f64,
}

impl MetricsLog {
    /// Largest number of bytes sent in any single step.
    pub fn peak_step_bytes(&self) -> u64 {
        self.bytes_by_step.values().copied().max().unwrap_or(0)
    }

    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub(crate) fn record_send(&mut self, step: u64, round: SyncRound) {
        *self.bytes_by_step.entry(step).or_insert(0) += round.bytes;
        self.total_bytes += round.bytes;
        self.num_send_events += 1;
        self.sync_rounds.push(round);
    }

    /// Render the CSV contract: one row per evaluation interval, byte-stable
    /// across identical runs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "step,train_loss,eval_loss_first,eval_loss_avg,eval_loss_outer,\
             bytes_step,bytes_total,cos_sim_rest,cos_sim_win\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.step,
                r.train_loss,
                r.eval_loss_first,
                r.eval_loss_avg,
                r.eval_loss_outer,
                r.bytes_step,
                r.bytes_total,
                r.cos_sim_rest,
                r.cos_sim_win
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_and_totals_track_sends() {
        let mut log = MetricsLog::default();
        log.record_send(
            10,
            SyncRound {
                step: 10,
                fragment: 0,
                cos_sim_rest: None,
                cos_sim_win: None,
                bytes: 100,
            },
        );
        log.record_send(
            10,
            SyncRound {
                step: 10,
                fragment: 1,
                cos_sim_rest: None,
                cos_sim_win: None,
                bytes: 50,
            },
        );
        log.record_send(
            20,
            SyncRound {
                step: 20,
                fragment: 0,
                cos_sim_rest: None,
                cos_sim_win: None,
                bytes: 120,
            },
        );
        assert_eq!(log.total_bytes, 270);
        assert_eq!(log.peak_step_bytes(), 150);
        assert_eq!(log.num_send_events, 3);
    }

    #[test]
    fn csv_header_is_the_contract() {
        let log = MetricsLog::default();
        assert!(log
            .to_csv()
            .starts_with("step,train_loss,eval_loss_first,eval_loss_avg,eval_loss_outer,bytes_step,bytes_total,cos_sim_rest,cos_sim_win"));
    }
}
