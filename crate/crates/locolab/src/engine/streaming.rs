//! The fragment-streaming training loop.

use std::time::Instant;

use crate::paramspace::{assign_offsets, partition, FragmentLayout};
use crate::schedule::build_calendar;
use crate::{Error, Result};

use super::metrics::{MetricsLog, MetricsRow, SyncRound};
use super::{
    all_reduce_mean, compute_delta, delta_cosines, evaluate, receive_and_merge, step_all_replicas,
    EvalMode, OuterTracker, ReplicaState, TrainOutcome, TrainSetup,
};
use crate::optim::{nesterov_direction, NesterovState};

/// One reduced round in transit: the shared step direction plus each
/// replica's outer base (its snapshot at the previous send step).
struct InFlight {
    send_step: u64,
    direction: Vec<f64>,
    bases: Vec<Vec<f64>>,
    pending: usize,
}

/// Bookkeeping per fragment: the latest send-step snapshot per replica, the
/// shared outer momentum, and the in-flight round if one exists.
///
/// A snapshot always holds the *end-of-step* parameter values of its send
/// step. Capturing after the merge phase is what makes the one-fragment,
/// zero-overlap configuration coincide bit for bit with plain full-vector
/// synchronization, where the outer base is the post-merge state.
struct FragmentSync {
    snapshots: Vec<Vec<Vec<f64>>>,
    momentum: Vec<NesterovState>,
    in_flight: Vec<Option<InFlight>>,
}

pub(super) fn run_streaming(setup: &TrainSetup) -> Result<TrainOutcome> {
    let started = Instant::now();
    let net = setup.net();
    let task = setup.task();
    let init = setup.init_params();
    let eval_set = task.eval_set(setup.eval_set_size);

    let spec = partition(setup.num_blocks, setup.fragment_size, setup.pattern)?;
    let spec = assign_offsets(&spec, setup.sync_period)?;
    let layout = FragmentLayout::build(&init, &spec, &net.sync_block_positions())?;
    let calendar = build_calendar(&spec, setup.total_steps, setup.sync_period, &setup.taus)?;
    let offsets = spec.offsets()?.to_vec();
    let nf = spec.num_fragments();
    let m = setup.replicas;

    // Flattened-index masks: which positions of each fragment's dense buffer
    // lie in the input projection (the "embedding" diagnostic split).
    let win_block = init.block_named("w_in").expect("model has w_in").clone();
    let win_masks: Vec<Vec<bool>> = (0..nf)
        .map(|p| {
            let mut mask = Vec::with_capacity(layout.len(p));
            for r in layout.ranges(p) {
                for i in r.clone() {
                    mask.push(i >= win_block.start && i < win_block.start + win_block.len);
                }
            }
            mask
        })
        .collect();

    // FedPart-style freezing: at any step only the fragment that sends at the
    // next send event trains; all other fragments' gradients are dropped.
    let frozen_masks: Vec<Vec<bool>> = (0..nf)
        .map(|p| {
            let own = layout.mask(init.len(), p);
            own.iter().map(|&in_fragment| !in_fragment).collect()
        })
        .collect();
    let trainable_by_step: Option<Vec<usize>> = (setup.freeze_fedpart
        && !calendar.send_events.is_empty())
    .then(|| {
        let mut upcoming = vec![0usize; setup.total_steps as usize + 1];
        let mut events: Vec<(u64, usize)> = calendar
            .send_events
            .iter()
            .flat_map(|(&s, fs)| fs.iter().map(move |&f| (s, f)))
            .collect();
        events.sort();
        let mut idx = 0;
        let mut current = events[0].1;
        for t in 1..=setup.total_steps {
            while idx < events.len() && events[idx].0 < t {
                idx += 1;
            }
            if idx < events.len() {
                current = events[idx].1;
            }
            upcoming[t as usize] = current;
        }
        upcoming
    });

    let mut replicas: Vec<ReplicaState> = (0..m)
        .map(|id| ReplicaState::new(id, init.clone()))
        .collect();
    let mut sync = FragmentSync {
        snapshots: vec![vec![Vec::new(); m]; nf],
        momentum: (0..nf).map(|p| NesterovState::new(layout.len(p))).collect(),
        in_flight: (0..nf).map(|_| None).collect(),
    };
    // Fragments with offset 0 open their first window at initialization.
    for (p, &t_p) in offsets.iter().enumerate() {
        if t_p == 0 {
            for (mm, r) in replicas.iter().enumerate() {
                sync.snapshots[p][mm] = layout.gather(&r.params.data, p);
            }
        }
    }

    let mut outer = OuterTracker::new(nf, m);
    let mut metrics = MetricsLog::default();
    let mut last_cos_rest = 0.0f64;
    let mut last_cos_win = 0.0f64;
    let pool = super::make_pool(setup.worker_threads)?;

    for t in 1..=setup.total_steps {
        let frozen = trainable_by_step
            .as_ref()
            .map(|by_step| frozen_masks[by_step[t as usize]].as_slice());
        step_all_replicas(pool.as_ref(), &mut replicas, &net, &task, &setup.inner, t, frozen)?;

        // Send phase: deltas against the previous-send snapshots, compressed
        // all-reduce, one momentum advance per round.
        for &p in calendar.sends_at(t) {
            let bases: Vec<Vec<f64>> = sync.snapshots[p].clone();
            if bases.iter().any(Vec::is_empty) {
                return Err(Error::Schedule(format!(
                    "fragment {p} sent at step {t} before its first window opened"
                )));
            }
            let deltas: Vec<Vec<f64>> = replicas
                .iter()
                .enumerate()
                .map(|(mm, r)| compute_delta(&bases[mm], &layout.gather(&r.params.data, p)))
                .collect::<Result<_>>()?;
            let (cos_rest, cos_win) = delta_cosines(&deltas, &win_masks[p]);
            let seeds: Vec<u64> = (0..m).map(|mm| setup.codec_seed(p, t, mm)).collect();
            let mean_delta = all_reduce_mean(&deltas, &setup.codec, &seeds)
                .map_err(|e| Error::Codec(format!("step {t}, fragment {p}: {e}")))?;
            let direction = nesterov_direction(&mean_delta, &mut sync.momentum[p], &setup.outer)?;
            if sync.in_flight[p].is_some() {
                return Err(Error::Schedule(format!(
                    "fragment {p} sent at step {t} while a round was still in flight"
                )));
            }
            sync.in_flight[p] = Some(InFlight {
                send_step: t,
                direction,
                bases,
                pending: m,
            });
            let bytes = m as u64 * setup.codec.wire_size(layout.len(p));
            if let Some(c) = cos_rest {
                last_cos_rest = c;
            }
            if let Some(c) = cos_win {
                last_cos_win = c;
            }
            metrics.record_send(
                t,
                SyncRound {
                    step: t,
                    fragment: p,
                    cos_sim_rest: cos_rest,
                    cos_sim_win: cos_win,
                    bytes,
                },
            );
        }

        // Receive phase: each replica merges the rounds scheduled for it.
        for mm in 0..m {
            for recv in calendar.receives_at(mm, t).to_vec() {
                let p = recv.fragment;
                let flight = sync.in_flight[p].as_mut().ok_or_else(|| {
                    Error::Schedule(format!(
                        "replica {mm} expected fragment {p} in flight at step {t}"
                    ))
                })?;
                if flight.send_step != recv.send_step {
                    return Err(Error::Schedule(format!(
                        "replica {mm} received fragment {p} from step {} but step {} is in flight",
                        recv.send_step, flight.send_step
                    )));
                }
                let mut current = layout.gather(&replicas[mm].params.data, p);
                let tilde = receive_and_merge(
                    &mut current,
                    &flight.bases[mm],
                    &flight.direction,
                    setup.outer.lr,
                    setup.alpha,
                );
                layout.scatter(&mut replicas[mm].params.data, p, &current);
                outer.record(p, mm, tilde);
                flight.pending -= 1;
                if flight.pending == 0 {
                    sync.in_flight[p] = None;
                }
            }
        }

        // End-of-step snapshot capture: fragments that sent this step record
        // their post-merge state; fragments whose offset is t open their
        // first window.
        for &p in calendar.sends_at(t) {
            for (mm, r) in replicas.iter().enumerate() {
                sync.snapshots[p][mm] = layout.gather(&r.params.data, p);
            }
        }
        for (p, &t_p) in offsets.iter().enumerate() {
            if t_p == t {
                for (mm, r) in replicas.iter().enumerate() {
                    sync.snapshots[p][mm] = layout.gather(&r.params.data, p);
                }
            }
        }

        if t % setup.eval_interval == 0 || t == setup.total_steps {
            let train_loss =
                replicas.iter().map(|r| r.last_loss).sum::<f64>() / replicas.len() as f64;
            let eval_first =
                evaluate(EvalMode::FirstReplica, &replicas, None, &net, &eval_set)?;
            let eval_avg =
                evaluate(EvalMode::ReplicaAverage, &replicas, None, &net, &eval_set)?;
            let (outer_view, fell_back) = outer.view(&replicas, &layout);
            if fell_back {
                metrics.outer_eval_fell_back = true;
            }
            let eval_outer = {
                let mut pv = crate::paramspace::ParamVector::zeros(&net.block_layout());
                pv.data = outer_view;
                net.forward_loss(&pv, &eval_set)?
            };
            metrics.rows.push(MetricsRow {
                step: t,
                train_loss,
                eval_loss_first: eval_first,
                eval_loss_avg: eval_avg,
                eval_loss_outer: eval_outer,
                bytes_step: metrics.bytes_by_step.get(&t).copied().unwrap_or(0),
                bytes_total: metrics.total_bytes,
                cos_sim_rest: last_cos_rest,
                cos_sim_win: last_cos_win,
            });
        }
    }

    if sync.in_flight.iter().any(Option::is_some) {
        return Err(Error::Schedule(
            "training finished with a round still in flight".into(),
        ));
    }

    let headline_params = match setup.eval_mode {
        EvalMode::FirstReplica => replicas[0].params.data.clone(),
        EvalMode::ReplicaAverage => super::replica_average(&replicas),
        EvalMode::OuterParams => outer.view(&replicas, &layout).0,
    };
    metrics.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        metrics,
        replicas,
        headline_params,
    })
}
