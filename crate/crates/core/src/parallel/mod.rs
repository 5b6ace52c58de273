//! Simulated data-parallel training and layer-partitioned pipeline inference.
//!
//! Workers are OS threads over in-process collectives ([`comm`]). Results do
//! not depend on thread scheduling: reductions run in worker order and each
//! example's dropout stream is derived from `(seed, example_index)`.

pub mod comm;

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::mpsc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::lora::{Binding, Mode};
use crate::model::{self, Example, ToyModel};
use crate::numerics::{Graph, Rng, Tensor};
use crate::optim::{self, AdamConfig, AdamState, ZeroOneAdamState};
use comm::{Collective, LocalComm, Phase, Tag};

/// Contiguous near-equal ranges over `n` items; earlier ranges get the
/// remainder.
pub fn shard_ranges(n: usize, k: usize) -> Result<Vec<Range<usize>>> {
    if k == 0 || n < k {
        return Err(Error::Sharding {
            batch: n,
            workers: k,
        });
    }
    let (base, extra) = (n / k, n % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    Ok(out)
}

pub fn shard_batch<T: Clone>(batch: &[T], k: usize) -> Result<Vec<Vec<T>>> {
    Ok(shard_ranges(batch.len(), k)?
        .into_iter()
        .map(|r| batch[r].to_vec())
        .collect())
}

/// Elementwise mean, summed in slice order.
pub fn allreduce_mean(tensors: &[Tensor]) -> Result<Tensor> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::Protocol("allreduce over zero workers".into()))?;
    if tensors.len() == 1 {
        return Ok(first.clone());
    }
    let mut acc = Tensor::zeros(first.shape());
    for (rank, t) in tensors.iter().enumerate() {
        if t.shape() != first.shape() {
            return Err(Error::Protocol(format!(
                "worker {rank} sent shape {:?}, expected {:?}",
                t.shape(),
                first.shape()
            )));
        }
        acc.add_assign(t)?;
    }
    Ok(acc.scale(1.0 / tensors.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    ZeroOneAdam { freeze_step: Option<u64> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Adam(AdamState),
    ZeroOne(ZeroOneAdamState),
}

impl OptimizerState {
    pub fn new(
        kind: OptimizerKind,
        config: AdamConfig,
        params: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        Ok(match kind {
            OptimizerKind::Adam => Self::Adam(AdamState::new(config, params)?),
            OptimizerKind::ZeroOneAdam { freeze_step } => {
                Self::ZeroOne(ZeroOneAdamState::new(config, params, freeze_step)?)
            }
        })
    }

    pub fn step_count(&self) -> u64 {
        match self {
            Self::Adam(s) => s.step,
            Self::ZeroOne(s) => s.step(),
        }
    }

    pub fn phase(&self) -> Phase {
        match self {
            Self::Adam(_) => Phase::Warmup,
            Self::ZeroOne(s) => s.phase,
        }
    }

    /// Performs one synchronized step with this worker's `grads`, returning
    /// the bits it sent.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        comm: &mut dyn Collective,
        weight: f64,
    ) -> Result<u64> {
        match self {
            Self::Adam(state) => {
                let tag = Tag {
                    step: state.step + 1,
                    phase: Phase::Warmup,
                };
                let flat = optim::flatten(grads);
                let avg = comm::allreduce_weighted(comm, tag, &flat, weight)?;
                optim::adam_step(state, params, &optim::unflatten(&avg, grads)?)?;
                Ok(64 * flat.numel() as u64)
            }
            Self::ZeroOne(state) => {
                optim::zero_one_adam_step(state, params, grads, comm, weight)?;
                Ok(state.last_step_bits)
            }
        }
    }
}

/// Mean loss and mean adapter gradients over `examples`, each with its own
/// dropout stream.
pub fn local_gradients(
    model: &ToyModel,
    examples: &[(u64, Example)],
    seed: u64,
    mode: Mode,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut loss_sum = 0.0;
    let mut acc: Option<BTreeMap<String, Tensor>> = None;
    for (idx, ex) in examples {
        let mut rng = Rng::derived(seed, *idx);
        let (loss, grads) = model.loss_and_grads(ex, mode, &mut rng)?;
        loss_sum += loss;
        match &mut acc {
            None => acc = Some(grads),
            Some(a) => {
                for (name, g) in grads {
                    a.get_mut(&name)
                        .expect("same parameter set")
                        .add_assign(&g)?;
                }
            }
        }
    }
    let n = examples.len() as f64;
    let mut grads = acc.unwrap_or_else(|| {
        model
            .params()
            .into_iter()
            .map(|(k, t)| (k, Tensor::zeros(t.shape())))
            .collect()
    });
    for g in grads.values_mut() {
        *g = g.scale(1.0 / n);
    }
    Ok((loss_sum, grads))
}

#[derive(Debug, Clone)]
pub struct Replica {
    pub model: ToyModel,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: OptimizerState,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct DdpStats {
    pub steps: u64,
    /// Summed over workers.
    pub bits_transmitted: u64,
    pub wall_seconds: f64,
    /// Wall time × worker count, in hours.
    pub worker_hours: f64,
}

/// `k` model+optimizer replicas trained in lockstep.
#[derive(Debug, Clone)]
pub struct WorkerGroup {
    pub replicas: Vec<Replica>,
    pub seed: u64,
    pub mode: Mode,
    pub stats: DdpStats,
}

impl WorkerGroup {
    pub fn new(
        model: &ToyModel,
        k: usize,
        kind: OptimizerKind,
        config: AdamConfig,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Sharding {
                batch: 0,
                workers: 0,
            });
        }
        let params = model.params();
        let optimizer = OptimizerState::new(kind, config, &params)?;
        let replica = Replica {
            model: model.clone(),
            params,
            optimizer,
        };
        Ok(Self {
            replicas: vec![replica; k],
            seed,
            mode: Mode::Train,
            stats: DdpStats::default(),
        })
    }

    pub fn k(&self) -> usize {
        self.replicas.len()
    }

    pub fn model(&self) -> &ToyModel {
        &self.replicas[0].model
    }

    pub fn into_model(mut self) -> ToyModel {
        self.replicas.swap_remove(0).model
    }

    pub fn replica_hashes(&self) -> Vec<String> {
        self.replicas
            .iter()
            .map(|r| model::params_hash(&r.params))
            .collect()
    }

    fn check_coherent(&self) -> Result<()> {
        let hashes = self.replica_hashes();
        if let Some((i, h)) = hashes.iter().enumerate().find(|(_, h)| **h != hashes[0]) {
            return Err(Error::Synchronization(format!(
                "replica {i} has parameter hash {h}, replica 0 has {}",
                hashes[0]
            )));
        }
        Ok(())
    }

    /// Shards `batch`, computes local gradients on every worker, synchronizes
    /// through the optimizer's collective and steps every replica. Returns the
    /// mean example loss.
    pub fn ddp_step(&mut self, batch: &[(u64, Example)]) -> Result<f64> {
        self.check_coherent()?;
        let k = self.k();
        let shards = shard_ranges(batch.len(), k)?;
        let start = Instant::now();
        let seed = self.seed;
        let mode = self.mode;

        let results: Vec<Result<(f64, u64)>> = if k == 1 {
            vec![worker_step(
                &mut self.replicas[0],
                &batch[shards[0].clone()],
                seed,
                mode,
                &mut LocalComm,
            )]
        } else {
            let comms = comm::thread_group(k);
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .replicas
                    .iter_mut()
                    .zip(comms)
                    .zip(&shards)
                    .map(|((replica, mut c), range)| {
                        let shard = &batch[range.clone()];
                        s.spawn(move || worker_step(replica, shard, seed, mode, &mut c))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join().unwrap_or_else(|_| {
                            Err(Error::Synchronization("worker thread panicked".into()))
                        })
                    })
                    .collect()
            })
        };

        let mut loss_sum = 0.0;
        let mut bits = 0;
        for r in results {
            let (l, b) = r?;
            loss_sum += l;
            bits += b;
        }
        self.check_coherent()?;

        let wall = start.elapsed().as_secs_f64();
        self.stats.steps += 1;
        self.stats.bits_transmitted += bits;
        self.stats.wall_seconds += wall;
        self.stats.worker_hours += wall * k as f64 / 3600.0;
        Ok(loss_sum / batch.len() as f64)
    }
}

fn worker_step(
    replica: &mut Replica,
    shard: &[(u64, Example)],
    seed: u64,
    mode: Mode,
    c: &mut dyn Collective,
) -> Result<(f64, u64)> {
    let (loss, grads) = match local_gradients(&replica.model, shard, seed, mode) {
        Ok(v) => v,
        Err(e) => {
            let tag = Tag {
                step: replica.optimizer.step_count() + 1,
                phase: replica.optimizer.phase(),
            };
            c.abort(tag, &e.to_string());
            return Err(e);
        }
    };
    let bits = replica
        .optimizer
        .step(&mut replica.params, &grads, c, shard.len() as f64)?;
    replica.model.set_params(&replica.params)?;
    Ok((loss, bits))
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelinePlan {
    pub stages: Vec<Range<usize>>,
    pub micro_batches: usize,
}

/// Balanced contiguous partition of `n_layers` over `k` stages.
pub fn plan_pipeline(n_layers: usize, k: usize, micro_batches: usize) -> Result<PipelinePlan> {
    if k == 0 || k > n_layers {
        return Err(Error::Partition(format!(
            "cannot split {n_layers} layers into {k} stages"
        )));
    }
    if micro_batches == 0 {
        return Err(Error::Partition("need at least one micro-batch".into()));
    }
    let stages = shard_ranges(n_layers, k).map_err(|e| Error::Partition(e.to_string()))?;
    Ok(PipelinePlan {
        stages,
        micro_batches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct Slot {
    pub tick: usize,
    pub stage: usize,
    pub micro_batch: usize,
}

/// Fill–drain forward schedule: stage `s` runs micro-batch `j` at tick
/// `s + j`. Sorted by tick, then stage.
pub fn pipeline_schedule(m: usize, k: usize) -> Vec<Slot> {
    let mut out = Vec::with_capacity(m * k);
    for tick in 0..(m + k).saturating_sub(1) {
        for stage in 0..k {
            if tick >= stage && tick - stage < m {
                out.push(Slot {
                    tick,
                    stage,
                    micro_batch: tick - stage,
                });
            }
        }
    }
    out
}

pub fn makespan(schedule: &[Slot]) -> usize {
    schedule.iter().map(|s| s.tick + 1).max().unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PipelineReport {
    pub ticks: usize,
    /// Ticks each stage spends computing.
    pub stage_busy_ticks: Vec<usize>,
    /// Largest number of activation elements a stage holds for one
    /// micro-batch.
    pub peak_activations: Vec<usize>,
    /// Activation elements handed between stages, summed.
    pub handoff_elements: usize,
    pub wall_seconds: f64,
    pub worker_hours: f64,
}

enum StageInput {
    Tokens(Vec<usize>),
    Hidden(Tensor),
}

fn run_stage(
    model: &ToyModel,
    layers: Range<usize>,
    last: bool,
    input: StageInput,
) -> Result<(Tensor, usize)> {
    let mut g = Graph::new();
    let mut x = match input {
        StageInput::Tokens(t) => g.constant(model.embed(&t)?),
        StageInput::Hidden(h) => g.constant(h),
    };
    let mut rng = Rng::new(0);
    for layer in layers {
        x = model.block_graph(&mut g, layer, x, Binding::Constant, Mode::Eval, &mut rng)?;
    }
    if last {
        x = model.head_graph(&mut g, x)?;
    }
    Ok((g.value(x).clone(), g.activation_elements()))
}

/// Eval-mode logits for every sequence of `batch`, computed stage by stage
/// with one thread per stage and micro-batches streamed between them.
pub fn pipeline_forward(
    model: &ToyModel,
    plan: &PipelinePlan,
    batch: &[Vec<usize>],
) -> Result<(Vec<Tensor>, PipelineReport)> {
    let n_layers = model.layers.len();
    let covers = plan.stages.first().map(|r| r.start) == Some(0)
        && plan.stages.last().map(|r| r.end) == Some(n_layers)
        && plan.stages.windows(2).all(|w| w[0].end == w[1].start)
        && plan.stages.iter().all(|r| r.start < r.end);
    if !covers {
        return Err(Error::Partition(format!(
            "plan {:?} does not cover the model's {n_layers} layers",
            plan.stages
        )));
    }
    let micro = shard_ranges(batch.len(), plan.micro_batches).map_err(|_| {
        Error::Partition(format!(
            "batch of {} sequences cannot fill {} micro-batches",
            batch.len(),
            plan.micro_batches
        ))
    })?;
    let k = plan.stages.len();
    let start = Instant::now();

    type Packet = (usize, Vec<StageInput>);
    let (collected, stage_stats) =
        std::thread::scope(|s| -> Result<(Vec<Packet>, Vec<(usize, usize)>)> {
            let (first_tx, mut rx) = mpsc::channel::<Packet>();
            let mut handles = Vec::with_capacity(k);
            for (si, range) in plan.stages.iter().enumerate() {
                let (tx, next_rx) = mpsc::channel::<Packet>();
                let stage_rx = std::mem::replace(&mut rx, next_rx);
                let range = range.clone();
                let last = si + 1 == k;
                handles.push(s.spawn(move || -> Result<(usize, usize)> {
                    let mut peak = 0;
                    let mut handed = 0;
                    for (mb, inputs) in stage_rx {
                        let mut outs = Vec::with_capacity(inputs.len());
                        let mut held = 0;
                        for input in inputs {
                            let (out, acts) = run_stage(model, range.clone(), last, input)
                                .map_err(|e| e.in_stage(format!("pipeline stage {si}")))?;
                            held += acts;
                            if !last {
                                handed += out.numel();
                            }
                            outs.push(StageInput::Hidden(out));
                        }
                        peak = peak.max(held);
                        if tx.send((mb, outs)).is_err() {
                            break;
                        }
                    }
                    Ok((peak, handed))
                }));
            }
            for (mb, r) in micro.iter().enumerate() {
                let inputs = batch[r.clone()]
                    .iter()
                    .map(|t| StageInput::Tokens(t.clone()))
                    .collect();
                // a failed stage hangs up; its error surfaces on join
                let _ = first_tx.send((mb, inputs));
            }
            drop(first_tx);
            let collected: Vec<Packet> = rx.into_iter().collect();
            let mut stats = Vec::with_capacity(k);
            for h in handles {
                stats.push(
                    h.join().unwrap_or_else(|_| {
                        Err(Error::Partition("stage thread panicked".into()))
                    })?,
                );
            }
            Ok((collected, stats))
        })?;

    let mut logits: Vec<Option<Vec<Tensor>>> = vec![None; plan.micro_batches];
    for (mb, outs) in collected {
        let ts = outs
            .into_iter()
            .map(|o| match o {
                StageInput::Hidden(t) => t,
                StageInput::Tokens(_) => unreachable!("stages emit hidden states"),
            })
            .collect();
        logits[mb] = Some(ts);
    }
    let out: Vec<Tensor> = logits
        .into_iter()
        .map(|o| {
            o.ok_or_else(|| Error::Partition("a micro-batch did not leave the pipeline".into()))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let wall = start.elapsed().as_secs_f64();
    let schedule = pipeline_schedule(plan.micro_batches, k);
    let report = PipelineReport {
        ticks: makespan(&schedule),
        stage_busy_ticks: (0..k)
            .map(|s| schedule.iter().filter(|x| x.stage == s).count())
            .collect(),
        peak_activations: stage_stats.iter().map(|s| s.0).collect(),
        handoff_elements: stage_stats.iter().map(|s| s.1).sum(),
        wall_seconds: wall,
        worker_hours: wall * k as f64 / 3600.0,
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shard_sizes() {
        let sizes = |n, k| {
            shard_ranges(n, k)
                .unwrap()
                .iter()
                .map(|r| r.len())
                .collect::<Vec<_>>()
        };
        assert_eq!(sizes(8, 4), vec![2, 2, 2, 2]);
        assert_eq!(sizes(7, 4), vec![2, 2, 2, 1]);
        assert_eq!(sizes(5, 1), vec![5]);
        assert!(matches!(
            shard_ranges(3, 4),
            Err(Error::Sharding {
                batch: 3,
                workers: 4
            })
        ));
    }

    #[test]
    fn allreduce_by_hand() {
        let out =
            allreduce_mean(&[Tensor::vector(&[1.0, 3.0]), Tensor::vector(&[3.0, 5.0])]).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0]);
        let t = Tensor::vector(&[0.1, 0.2]);
        assert_eq!(allreduce_mean(&[t.clone()]).unwrap(), t);
        assert!(matches!(
            allreduce_mean(&[Tensor::vector(&[1.0]), Tensor::vector(&[1.0, 2.0])]),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn partitions() {
        assert_eq!(plan_pipeline(8, 2, 1).unwrap().stages, vec![0..4, 4..8]);
        assert_eq!(plan_pipeline(7, 2, 1).unwrap().stages, vec![0..4, 4..7]);
        assert_eq!(plan_pipeline(3, 1, 1).unwrap().stages, vec![0..3]);
        assert!(matches!(plan_pipeline(2, 3, 1), Err(Error::Partition(_))));
    }

    #[test]
    fn schedule_lengths() {
        assert_eq!(makespan(&pipeline_schedule(4, 1)), 4);
        assert_eq!(makespan(&pipeline_schedule(4, 2)), 5);
        let seq = pipeline_schedule(1, 3);
        assert_eq!(makespan(&seq), 3);
        assert_eq!(
            seq.iter().map(|s| s.stage).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }
}
