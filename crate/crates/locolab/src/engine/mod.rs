//! Orchestration of `M` simulated replicas through the bi-level training
//! protocol: local AdamW steps, per-fragment outer-gradient exchange on the
//! synchronization calendar, compressed all-reduce, outer Nesterov step and
//! alpha-merge, with exact byte accounting and learning metrics.
//!
//! Three code paths exist on purpose. [`Mode::DataParallel`] runs a single
//! worker on the concatenation of every shard's batch (gradient-mean
//! equivalent of per-step all-reduce). [`Mode::Diloco`] is a direct
//! implementation of full-vector synchronization every `H` steps.
//! The streaming modes run the fragment calendar. The DiLoCo and streaming
//! paths are independent implementations checked against each other: with one
//! fragment and no overlap they must agree bit for bit.

mod baselines;
mod metrics;
mod streaming;

pub use metrics::{MetricsLog, MetricsRow, SyncRound};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::model::{Batch, NetShape, ResidualNet, SyntheticTask};
use crate::optim::{adamw_step_masked, AdamHp, AdamState, NesterovHp};
use crate::paramspace::{FragmentLayout, FragmentPattern, ParamVector};
use crate::seeding::{sub_seed, sub_seed2};
use crate::{Error, Result};

/// Training protocol variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Single worker with an `M`-fold batch; no outer communication.
    DataParallel,
    /// Full-model synchronization every `H` steps (blocking).
    Diloco,
    /// Per-fragment synchronization, blocking (`tau = 0`).
    Streaming,
    /// Per-fragment synchronization with overlap delays `tau_m > 0` allowed.
    StreamingOverlapped,
    /// Overlapped streaming with the 4-bit outer-gradient codec.
    StreamingOverlappedQuantized,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::DataParallel => "data_parallel",
            Mode::Diloco => "diloco",
            Mode::Streaming => "streaming",
            Mode::StreamingOverlapped => "streaming_overlapped",
            Mode::StreamingOverlappedQuantized => "streaming_overlapped_quantized",
        }
    }

    pub fn is_streaming(&self) -> bool {
        matches!(
            self,
            Mode::Streaming | Mode::StreamingOverlapped | Mode::StreamingOverlappedQuantized
        )
    }
}

/// Which parameters evaluation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    FirstReplica,
    ReplicaAverage,
    OuterParams,
}

/// Fully resolved engine configuration.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSetup {
    pub mode: Mode,
    pub shape: NetShape,
    pub num_blocks: usize,
    pub replicas: usize,
    pub total_steps: u64,
    pub sync_period: u64,
    pub fragment_size: usize,
    pub pattern: FragmentPattern,
    pub taus: Vec<u64>,
    pub alpha: f64,
    pub codec: Codec,
    pub inner: AdamHp,
    pub outer: NesterovHp,
    pub seed: u64,
    pub identical_shards: bool,
    pub batch_size: usize,
    pub eval_interval: u64,
    pub eval_set_size: usize,
    pub eval_mode: EvalMode,
    pub freeze_fedpart: bool,
    pub worker_threads: usize,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(Error::config("at least one replica is required"));
        }
        if self.taus.len() != self.replicas {
            return Err(Error::config(format!(
                "taus has {} entries but there are {} replicas",
                self.taus.len(),
                self.replicas
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.total_steps == 0 || self.sync_period == 0 {
            return Err(Error::config("T and H must both be >= 1"));
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.eval_set_size == 0 {
            return Err(Error::config(
                "batch_size, eval.interval and eval.set_size must be >= 1",
            ));
        }
        if self.mode == Mode::Streaming && self.taus.iter().any(|&t| t != 0) {
            return Err(Error::config(
                "streaming mode is blocking (tau = 0); use streaming_overlapped for tau > 0",
            ));
        }
        if self.mode == Mode::StreamingOverlappedQuantized && self.codec != Codec::E3m0 {
            return Err(Error::config(
                "streaming_overlapped_quantized uses the e3m0 codec",
            ));
        }
        if self.num_blocks % self.fragment_size != 0 {
            return Err(Error::config(format!(
                "fragment_size {} does not divide the block count {}",
                self.fragment_size, self.num_blocks
            )));
        }
        self.codec.validate()?;
        Ok(())
    }

    pub fn net(&self) -> ResidualNet {
        ResidualNet::new(self.shape, self.num_blocks)
    }

    pub fn task(&self) -> SyntheticTask {
        SyntheticTask::new(self.net(), self.seed, self.batch_size)
            .with_identical_shards(self.identical_shards)
    }

    pub fn init_params(&self) -> ParamVector {
        self.net().init_params(sub_seed(self.seed, "init", 0))
    }

    /// Seed for one replica's codec transport at a given fragment/send step.
    pub fn codec_seed(&self, fragment: usize, send_step: u64, replica: usize) -> u64 {
        sub_seed(
            sub_seed2(self.seed, "codec", fragment as u64, send_step),
            "replica",
            replica as u64,
        )
    }
}

/// One simulated worker.
#[derive(Debug, Clone)]
pub struct ReplicaState {
    pub id: usize,
    pub params: ParamVector,
    pub adam: AdamState,
    pub last_loss: f64,
}

impl ReplicaState {
    pub fn new(id: usize, params: ParamVector) -> Self {
        let n = params.len();
        ReplicaState {
            id,
            params,
            adam: AdamState::new(n),
            last_loss: f64::NAN,
        }
    }
}

/// One local step: sample the shard batch, take an AdamW step. Parameters in
/// frozen fragments keep their moments and receive only weight decay.
pub fn inner_step(
    replica: &mut ReplicaState,
    net: &ResidualNet,
    task: &SyntheticTask,
    hp: &AdamHp,
    step: u64,
    frozen: Option<&[bool]>,
) -> Result<f64> {
    let batch = task.batch(replica.id, step);
    inner_step_on_batch(replica, net, &batch, hp, step, frozen)
}

pub(crate) fn inner_step_on_batch(
    replica: &mut ReplicaState,
    net: &ResidualNet,
    batch: &Batch,
    hp: &AdamHp,
    step: u64,
    frozen: Option<&[bool]>,
) -> Result<f64> {
    let (loss, grads) = net.loss_and_grad(&replica.params, batch)?;
    if !loss.is_finite() {
        return Err(Error::Numeric {
            step,
            replica: replica.id,
            message: format!("loss became {loss}"),
        });
    }
    adamw_step_masked(&mut replica.params.data, &grads, &mut replica.adam, hp, frozen).map_err(
        |e| match e {
            Error::Numeric { message, .. } => Error::Numeric {
                step,
                replica: replica.id,
                message,
            },
            other => other,
        },
    )?;
    replica.last_loss = loss;
    Ok(loss)
}

/// Outer gradient over a window: `snapshot - current` (points opposite the
/// descent direction).
pub fn compute_delta(snapshot: &[f64], current: &[f64]) -> Result<Vec<f64>> {
    if snapshot.len() != current.len() {
        return Err(Error::structural(format!(
            "delta shapes disagree: snapshot {}, current {}",
            snapshot.len(),
            current.len()
        )));
    }
    Ok(snapshot
        .iter()
        .zip(current.iter())
        .map(|(s, c)| s - c)
        .collect())
}

/// Average the replicas' deltas after pushing each through the codec.
///
/// Decoded values accumulate in full precision in ascending replica order, so
/// the result is identical no matter how the caller parallelizes.
pub fn all_reduce_mean(deltas: &[Vec<f64>], codec: &Codec, seeds: &[u64]) -> Result<Vec<f64>> {
    let m = deltas.len();
    assert!(m > 0 && seeds.len() == m);
    let n = deltas[0].len();
    let mut acc = vec![0.0f64; n];
    for (replica, delta) in deltas.iter().enumerate() {
        if delta.len() != n {
            return Err(Error::structural(format!(
                "replica {replica} delta has length {} but replica 0 has {n}",
                delta.len()
            )));
        }
        let decoded = codec
            .transport(delta, seeds[replica])
            .map_err(|e| Error::Codec(format!("replica {replica}: {e}")))?;
        for (a, d) in acc.iter_mut().zip(decoded.iter()) {
            *a += d;
        }
    }
    let inv = 1.0 / m as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(acc)
}

/// Apply one replica's merge: `tilde = base - outer_lr * direction`, then
/// `current <- alpha * current + (1 - alpha) * tilde`. Returns `tilde`.
///
/// `direction` is the round's shared Nesterov direction; the momentum behind
/// it was advanced exactly once when the round's delta was reduced.
pub fn receive_and_merge(
    current: &mut [f64],
    base: &[f64],
    direction: &[f64],
    outer_lr: f64,
    alpha: f64,
) -> Vec<f64> {
    debug_assert_eq!(current.len(), base.len());
    debug_assert_eq!(current.len(), direction.len());
    let mut tilde = vec![0.0; current.len()];
    for i in 0..current.len() {
        tilde[i] = base[i] - outer_lr * direction[i];
        current[i] = alpha * current[i] + (1.0 - alpha) * tilde[i];
    }
    tilde
}

/// Cosine similarity with the zero-vector convention of 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Cosine over the masked subset of two equally shaped vectors; `None` when
/// the mask selects nothing.
pub(crate) fn cosine_masked(a: &[f64], b: &[f64], mask: &[bool], select: bool) -> Option<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    let mut any = false;
    for i in 0..a.len() {
        if mask[i] == select {
            any = true;
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
    }
    if !any {
        return None;
    }
    if na == 0.0 || nb == 0.0 {
        return Some(0.0);
    }
    Some(dot / (na.sqrt() * nb.sqrt()))
}

/// Mean pairwise cosine over replica deltas, split into the input-projection
/// part and the rest. `win_mask[i]` marks flattened indices inside `w_in`.
pub(crate) fn delta_cosines(
    deltas: &[Vec<f64>],
    win_mask: &[bool],
) -> (Option<f64>, Option<f64>) {
    let m = deltas.len();
    let mut rest_sum = 0.0;
    let mut rest_n = 0u32;
    let mut win_sum = 0.0;
    let mut win_n = 0u32;
    for i in 0..m {
        for j in (i + 1)..m {
            if let Some(c) = cosine_masked(&deltas[i], &deltas[j], win_mask, false) {
                rest_sum += c;
                rest_n += 1;
            }
            if let Some(c) = cosine_masked(&deltas[i], &deltas[j], win_mask, true) {
                win_sum += c;
                win_n += 1;
            }
        }
    }
    (
        (rest_n > 0).then(|| rest_sum / rest_n as f64),
        (win_n > 0).then(|| win_sum / win_n as f64),
    )
}

/// Latest outer-updated parameters per fragment per replica, backing the
/// outer-parameters evaluation mode.
#[derive(Debug, Clone)]
pub struct OuterTracker {
    latest_tilde: Vec<Vec<Option<Vec<f64>>>>,
    any_sync: bool,
}

impl OuterTracker {
    pub fn new(fragments: usize, replicas: usize) -> Self {
        OuterTracker {
            latest_tilde: vec![vec![None; replicas]; fragments],
            any_sync: false,
        }
    }

    pub fn record(&mut self, fragment: usize, replica: usize, tilde: Vec<f64>) {
        self.latest_tilde[fragment][replica] = Some(tilde);
        self.any_sync = true;
    }

    /// Assemble the outer view: fragment-wise mean of the latest outer-updated
    /// parameters, falling back to the replica average for fragments that have
    /// not synchronized yet. Returns the vector and whether any fallback (the
    /// global "no sync yet" case) applied.
    pub fn view(&self, replicas: &[ReplicaState], layout: &FragmentLayout) -> (Vec<f64>, bool) {
        let mut out = replica_average(replicas);
        for (p, per_replica) in self.latest_tilde.iter().enumerate() {
            let have: Vec<&Vec<f64>> = per_replica.iter().flatten().collect();
            if have.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; layout.len(p)];
            for t in &have {
                for (acc, v) in mean.iter_mut().zip(t.iter()) {
                    *acc += v;
                }
            }
            let inv = 1.0 / have.len() as f64;
            for v in &mut mean {
                *v *= inv;
            }
            layout.scatter(&mut out, p, &mean);
        }
        (out, !self.any_sync)
    }
}

pub(crate) fn replica_average(replicas: &[ReplicaState]) -> Vec<f64> {
    let n = replicas[0].params.len();
    let mut out = vec![0.0; n];
    for r in replicas {
        for (acc, v) in out.iter_mut().zip(r.params.data.iter()) {
            *acc += v;
        }
    }
    let inv = 1.0 / replicas.len() as f64;
    for v in &mut out {
        *v *= inv;
    }
    out
}

/// Evaluate a set of replica states under the chosen mode on a fixed set.
pub fn evaluate(
    mode: EvalMode,
    replicas: &[ReplicaState],
    outer: Option<(&OuterTracker, &FragmentLayout)>,
    net: &ResidualNet,
    eval_set: &Batch,
) -> Result<f64> {
    let data = match mode {
        EvalMode::FirstReplica => replicas[0].params.data.clone(),
        EvalMode::ReplicaAverage => replica_average(replicas),
        EvalMode::OuterParams => match outer {
            Some((tracker, layout)) => tracker.view(replicas, layout).0,
            None => replica_average(replicas),
        },
    };
    let mut pv = ParamVector::zeros(&net.block_layout());
    pv.data = data;
    net.forward_loss(&pv, eval_set)
}

/// Run the configured protocol end to end.
pub fn run_training(setup: &TrainSetup) -> Result<TrainOutcome> {
    setup.validate()?;
    match setup.mode {
        Mode::DataParallel => baselines::run_data_parallel(setup),
        Mode::Diloco => baselines::run_diloco(setup),
        _ => streaming::run_streaming(setup),
    }
}

/// Final state of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: MetricsLog,
    pub replicas: Vec<ReplicaState>,
    /// Parameters selected by the configured evaluation mode.
    pub headline_params: Vec<f64>,
}

/// Run the per-replica inner steps for one global step, optionally on a
/// thread pool. Results are written into per-replica slots, so the outcome is
/// independent of the worker thread count.
pub(crate) fn step_all_replicas(
    pool: Option<&rayon::ThreadPool>,
    replicas: &mut [ReplicaState],
    net: &ResidualNet,
    task: &SyntheticTask,
    hp: &AdamHp,
    step: u64,
    frozen: Option<&[bool]>,
) -> Result<()> {
    let run = |reps: &mut [ReplicaState]| -> Vec<Result<f64>> {
        match pool {
            Some(pool) => pool.install(|| {
                reps.par_iter_mut()
                    .map(|r| inner_step(r, net, task, hp, step, frozen))
                    .collect()
            }),
            None => reps
                .iter_mut()
                .map(|r| inner_step(r, net, task, hp, step, frozen))
                .collect(),
        }
    };
    for res in run(replicas) {
        res?;
    }
    Ok(())
}

pub(crate) fn make_pool(worker_threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if worker_threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads)
        .build()
        .map(Some)
        .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))
}
