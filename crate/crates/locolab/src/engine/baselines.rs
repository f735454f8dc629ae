//! Baseline code paths: the data-parallel equivalent and direct full-vector
//! synchronization every `H` steps.
//!
//! The full-vector path is deliberately written as its own plain loop (no
//! fragment calendar, no in-flight bookkeeping) so the streaming engine can be
//! tested against it: with one fragment and zero overlap the two must agree
//! bit for bit.

use std::time::Instant;

use crate::optim::{nesterov_direction, NesterovState};
use crate::paramspace::{partition, FragmentLayout, FragmentPattern};
use crate::{Error, Result};

use super::metrics::{MetricsLog, MetricsRow, SyncRound};
use super::{
    all_reduce_mean, compute_delta, delta_cosines, evaluate, inner_step_on_batch,
    receive_and_merge, step_all_replicas, EvalMode, OuterTracker, ReplicaState, TrainOutcome,
    TrainSetup,
};

/// Single worker, `M`-fold batch: the gradient-mean equivalent of per-step
/// all-reduce data parallelism, with zero outer communication.
pub(super) fn run_data_parallel(setup: &TrainSetup) -> Result<TrainOutcome> {
    let started = Instant::now();
    let net = setup.net();
    let task = setup.task();
    let eval_set = task.eval_set(setup.eval_set_size);
    let mut replica = ReplicaState::new(0, setup.init_params());
    let mut metrics = MetricsLog::default();

    for t in 1..=setup.total_steps {
        let batch = task.combined_batch(setup.replicas, t);
        inner_step_on_batch(&mut replica, &net, &batch, &setup.inner, t, None)?;
        if t % setup.eval_interval == 0 || t == setup.total_steps {
            let eval =
                net.forward_loss(&replica.params, &eval_set)?;
            metrics.rows.push(MetricsRow {
                step: t,
                train_loss: replica.last_loss,
                eval_loss_first: eval,
                eval_loss_avg: eval,
                eval_loss_outer: eval,
                bytes_step: 0,
                bytes_total: 0,
                cos_sim_rest: 0.0,
                cos_sim_win: 0.0,
            });
        }
    }

    let headline_params = replica.params.data.clone();
    metrics.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        metrics,
        replicas: vec![replica],
        headline_params,
    })
}

/// Full-model synchronization every `H` steps: every replica's window delta
/// is averaged, the outer optimizer steps from each replica's previous sync
/// point, and the result is alpha-merged (alpha = 0 adopts it outright).
pub(super) fn run_diloco(setup: &TrainSetup) -> Result<TrainOutcome> {
    let started = Instant::now();
    let net = setup.net();
    let task = setup.task();
    let init = setup.init_params();
    let eval_set = task.eval_set(setup.eval_set_size);
    let m = setup.replicas;
    let n = init.len();

    // A one-fragment layout covering the whole vector backs the outer-params
    // evaluation view; the sync logic below never touches the calendar.
    let spec = partition(setup.num_blocks, setup.num_blocks, FragmentPattern::Sequential)?;
    let layout = FragmentLayout::build(&init, &spec, &net.sync_block_positions())?;

    let win_block = init.block_named("w_in").expect("model has w_in").clone();
    let win_mask: Vec<bool> = (0..n)
        .map(|i| i >= win_block.start && i < win_block.start + win_block.len)
        .collect();

    let mut replicas: Vec<ReplicaState> = (0..m)
        .map(|id| ReplicaState::new(id, init.clone()))
        .collect();
    let mut snapshots: Vec<Vec<f64>> = replicas
        .iter()
        .map(|r| r.params.data.clone())
        .collect();
    let mut momentum = NesterovState::new(n);
    let mut outer = OuterTracker::new(1, m);
    let mut metrics = MetricsLog::default();
    let mut last_cos_rest = 0.0f64;
    let mut last_cos_win = 0.0f64;
    let pool = super::make_pool(setup.worker_threads)?;

    for t in 1..=setup.total_steps {
        step_all_replicas(pool.as_ref(), &mut replicas, &net, &task, &setup.inner, t, None)?;

        if t % setup.sync_period == 0 {
            let deltas: Vec<Vec<f64>> = replicas
                .iter()
                .enumerate()
                .map(|(mm, r)| compute_delta(&snapshots[mm], &r.params.data))
                .collect::<Result<_>>()?;
            let (cos_rest, cos_win) = delta_cosines(&deltas, &win_mask);
            let seeds: Vec<u64> = (0..m).map(|mm| setup.codec_seed(0, t, mm)).collect();
            let mean_delta = all_reduce_mean(&deltas, &setup.codec, &seeds)
                .map_err(|e| Error::Codec(format!("step {t}: {e}")))?;
            let direction = nesterov_direction(&mean_delta, &mut momentum, &setup.outer)?;
            for (mm, r) in replicas.iter_mut().enumerate() {
                let tilde = receive_and_merge(
                    &mut r.params.data,
                    &snapshots[mm],
                    &direction,
                    setup.outer.lr,
                    setup.alpha,
                );
                outer.record(0, mm, tilde);
            }
            for (mm, r) in replicas.iter().enumerate() {
                snapshots[mm] = r.params.data.clone();
            }
            let bytes = m as u64 * setup.codec.wire_size(n);
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
                    fragment: 0,
                    cos_sim_rest: cos_rest,
                    cos_sim_win: cos_win,
                    bytes,
                },
            );
        }

        if t % setup.eval_interval == 0 || t == setup.total_steps {
            let train_loss =
                replicas.iter().map(|r| r.last_loss).sum::<f64>() / replicas.len() as f64;
            let eval_first = evaluate(EvalMode::FirstReplica, &replicas, None, &net, &eval_set)?;
            let eval_avg = evaluate(EvalMode::ReplicaAverage, &replicas, None, &net, &eval_set)?;
            let eval_outer = evaluate(
                EvalMode::OuterParams,
                &replicas,
                Some((&outer, &layout)),
                &net,
                &eval_set,
            )?;
            let (_, fell_back) = outer.view(&replicas, &layout);
            if fell_back {
                metrics.outer_eval_fell_back = true;
            }
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
