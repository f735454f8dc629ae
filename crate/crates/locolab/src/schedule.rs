//! The deterministic synchronization calendar.
//!
//! Given a fragment spec with offsets, a horizon `T`, a period `H` and
//! per-replica overlap delays `tau_m`, the calendar lists which fragments are
//! sent at which step and when each replica receives (and merges) the reduced
//! result. Steps are 1-based. Fragment `p`'s sends are
//! `H + t_p, H + t_p + H, ...` clipped to `T` (`H` itself when `t_p = 0`), so
//! consecutive sends of a fragment are always exactly `H` apart and every
//! fragment accumulates a full window before its first delta. A send whose
//! receive would land past `T` is flushed: it is received and merged at step
//! `T`, so training ends with no in-flight state.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::paramspace::FragmentSpec;
use crate::{Error, Result};

/// A scheduled receive: which fragment, and the step its delta was sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Receive {
    pub fragment: usize,
    pub send_step: u64,
}

/// Send/receive event timeline for one training run.
#[derive(Debug, Clone, Serialize)]
pub struct SyncCalendar {
    pub total_steps: u64,
    pub sync_period: u64,
    pub taus: Vec<u64>,
    /// step -> fragments sent at that step (all replicas send together).
    pub send_events: BTreeMap<u64, Vec<usize>>,
    /// Per replica: step -> receives processed at that step.
    pub receive_events: Vec<BTreeMap<u64, Vec<Receive>>>,
}

impl SyncCalendar {
    pub fn sends_at(&self, step: u64) -> &[usize] {
        self.send_events.get(&step).map_or(&[], |v| v.as_slice())
    }

    pub fn receives_at(&self, replica: usize, step: u64) -> &[Receive] {
        self.receive_events[replica]
            .get(&step)
            .map_or(&[], |v| v.as_slice())
    }

    pub fn num_send_events(&self) -> usize {
        self.send_events.values().map(Vec::len).sum()
    }

    /// All send steps of one fragment, ascending.
    pub fn send_steps(&self, fragment: usize) -> Vec<u64> {
        self.send_events
            .iter()
            .filter(|(_, frags)| frags.contains(&fragment))
            .map(|(&step, _)| step)
            .collect()
    }
}

/// Build the calendar for `total_steps` steps of period `sync_period` with
/// per-replica overlap delays `taus`.
pub fn build_calendar(
    spec: &FragmentSpec,
    total_steps: u64,
    sync_period: u64,
    taus: &[u64],
) -> Result<SyncCalendar> {
    let offsets = spec.offsets()?;
    if let Some(&bad) = taus.iter().find(|&&t| t >= sync_period) {
        return Err(Error::config(format!(
            "overlap delay tau={bad} violates the constraint tau < H (H={sync_period})"
        )));
    }
    for &t_p in offsets {
        if t_p >= sync_period {
            return Err(Error::config(format!(
                "fragment offset {t_p} must be smaller than H={sync_period}"
            )));
        }
    }

    let mut send_events: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (p, &t_p) in offsets.iter().enumerate() {
        let mut step = sync_period + t_p;
        while step <= total_steps {
            send_events.entry(step).or_default().push(p);
            step += sync_period;
        }
    }

    let mut receive_events: Vec<BTreeMap<u64, Vec<Receive>>> = vec![BTreeMap::new(); taus.len()];
    for (&step, frags) in &send_events {
        for &fragment in frags {
            for (m, &tau) in taus.iter().enumerate() {
                // Flush at the end of training: merge no later than step T.
                let receive_step = (step + tau).min(total_steps);
                receive_events[m]
                    .entry(receive_step)
                    .or_default()
                    .push(Receive {
                        fragment,
                        send_step: step,
                    });
            }
        }
    }
    for per_replica in &mut receive_events {
        for list in per_replica.values_mut() {
            list.sort_by_key(|r| (r.fragment, r.send_step));
        }
    }

    Ok(SyncCalendar {
        total_steps,
        sync_period,
        taus: taus.to_vec(),
        send_events,
        receive_events,
    })
}

/// Factor by which streaming synchronization shrinks peak traffic: `L / |p|`.
pub fn peak_bandwidth_reduction(num_blocks: usize, fragment_size: usize) -> Result<u64> {
    if fragment_size == 0 || num_blocks == 0 || num_blocks % fragment_size != 0 {
        return Err(Error::config(format!(
            "fragment_size {fragment_size} does not divide num_blocks {num_blocks}"
        )));
    }
    Ok((num_blocks / fragment_size) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paramspace::{assign_offsets, partition, FragmentPattern};

    fn spec(p: usize, h: u64) -> FragmentSpec {
        let s = partition(p, 1, FragmentPattern::Sequential).unwrap();
        assign_offsets(&s, h).unwrap()
    }

    #[test]
    fn worked_example_two_fragments() {
        // P=2, H=100, tau=0, T=250: sends at 100/150/200/250, receives same.
        let cal = build_calendar(&spec(2, 100), 250, 100, &[0]).unwrap();
        let expect: Vec<(u64, Vec<usize>)> = vec![
            (100, vec![0]),
            (150, vec![1]),
            (200, vec![0]),
            (250, vec![1]),
        ];
        let got: Vec<(u64, Vec<usize>)> = cal
            .send_events
            .iter()
            .map(|(&s, f)| (s, f.clone()))
            .collect();
        assert_eq!(got, expect);
        for (&step, frags) in &cal.send_events {
            let recv = cal.receives_at(0, step);
            assert_eq!(recv.len(), frags.len());
            assert!(recv.iter().all(|r| r.send_step == step));
        }
    }

    #[test]
    fn single_fragment_reduces_to_full_sync() {
        let cal = build_calendar(&spec(1, 30), 100, 30, &[0]).unwrap();
        assert_eq!(cal.send_steps(0), vec![30, 60, 90]);
    }

    #[test]
    fn heterogeneous_taus_shift_receives() {
        // Both replicas see the send at 100; replica 0 merges at 101,
        // replica 1 at 105.
        let cal = build_calendar(&spec(2, 100), 250, 100, &[1, 5]).unwrap();
        assert_eq!(
            cal.receives_at(0, 101),
            &[Receive {
                fragment: 0,
                send_step: 100
            }]
        );
        assert_eq!(
            cal.receives_at(1, 105),
            &[Receive {
                fragment: 0,
                send_step: 100
            }]
        );
    }

    #[test]
    fn tau_must_stay_below_period() {
        let err = build_calendar(&spec(2, 100), 250, 100, &[100]).unwrap_err();
        assert!(err.to_string().contains("tau < H"), "{err}");
    }

    #[test]
    fn flush_merges_at_final_step() {
        // Send at 100 with tau=5 and T=102: the receive is clamped to 102.
        let cal = build_calendar(&spec(1, 100), 102, 100, &[5]).unwrap();
        assert_eq!(
            cal.receives_at(0, 102),
            &[Receive {
                fragment: 0,
                send_step: 100
            }]
        );
        let pending: usize = cal.receive_events[0].values().map(Vec::len).sum();
        assert_eq!(pending, cal.num_send_events());
    }

    #[test]
    fn consecutive_sends_gap_is_period() {
        let cal = build_calendar(&spec(3, 30), 600, 30, &[1]).unwrap();
        for p in 0..3 {
            let steps = cal.send_steps(p);
            assert!(!steps.is_empty());
            for w in steps.windows(2) {
                assert_eq!(w[1] - w[0], 30);
            }
        }
    }

    #[test]
    fn no_two_fragments_share_a_send_step() {
        // With floor-spaced offsets and H >= P, send steps never collide.
        for (p, h) in [(2u64, 7u64), (5, 5), (8, 100), (3, 30)] {
            let cal = build_calendar(&spec(p as usize, h), 10 * h, h, &[0]).unwrap();
            for frags in cal.send_events.values() {
                assert_eq!(frags.len(), 1);
            }
        }
    }

    #[test]
    fn window_coverage() {
        // Any window of H consecutive steps past the offsets sees each
        // fragment exactly once.
        let h = 20u64;
        let cal = build_calendar(&spec(4, h), 200, h, &[0]).unwrap();
        let max_offset = 15; // floor(3*20/4)
        for start in (h + max_offset)..=(200 - h + 1) {
            let mut counts = vec![0usize; 4];
            for step in start..start + h {
                for &f in cal.sends_at(step) {
                    counts[f] += 1;
                }
            }
            assert_eq!(counts, vec![1, 1, 1, 1], "window at {start}");
        }
    }

    #[test]
    fn peak_reduction_examples() {
        assert_eq!(peak_bandwidth_reduction(24, 3).unwrap(), 8);
        assert_eq!(peak_bandwidth_reduction(12, 12).unwrap(), 1);
        assert_eq!(peak_bandwidth_reduction(108, 3).unwrap(), 36);
        assert!(peak_bandwidth_reduction(10, 4).is_err());
    }

    #[test]
    fn calendar_serializes_to_stable_json() {
        let cal = build_calendar(&spec(2, 10), 25, 10, &[1]).unwrap();
        let a = serde_json::to_string(&cal).unwrap();
        let b = serde_json::to_string(&cal).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("\"send_events\""));
    }
}
