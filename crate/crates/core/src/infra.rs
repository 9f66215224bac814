//! Load balancing, parallelism planning, a pipeline simulator and a fused
//! elementwise kernel.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    /// Rank of each item, in input order.
    pub rank_of: Vec<usize>,
    pub loads: Vec<f64>,
    pub warning: Option<String>,
}

impl Assignment {
    pub fn max_load(&self) -> f64 {
        self.loads.iter().copied().fold(0.0, f64::max)
    }
}

fn check_costs(costs: &[f64], ranks: usize) -> Result<()> {
    if ranks == 0 {
        return Err(Error::Input("need at least one rank".into()));
    }
    if costs.is_empty() {
        return Err(Error::Input("no items to balance".into()));
    }
    if let Some(c) = costs.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
        return Err(Error::Input(format!("item cost {c} must be positive and finite")));
    }
    Ok(())
}

/// Longest-processing-time greedy assignment. Ties go to the lowest rank index.
pub fn balance_batches(costs: &[f64], ranks: usize) -> Result<Assignment> {
    check_costs(costs, ranks)?;
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[b].total_cmp(&costs[a]).then(a.cmp(&b)));
    let mut loads = vec![0.0f64; ranks];
    let mut rank_of = vec![0; costs.len()];
    for i in order {
        let r = (0..ranks)
            .min_by(|&a, &b| loads[a].total_cmp(&loads[b]).then(a.cmp(&b)))
            .expect("ranks >= 1");
        loads[r] += costs[i];
        rank_of[i] = r;
    }
    let warning = (ranks > costs.len()).then(|| format!("{ranks} ranks for {} items; some ranks stay empty", costs.len()));
    Ok(Assignment { rank_of, loads, warning })
}

/// Item `i` to rank `i mod ranks`.
pub fn round_robin(costs: &[f64], ranks: usize) -> Result<Assignment> {
    check_costs(costs, ranks)?;
    let mut loads = vec![0.0f64; ranks];
    let rank_of: Vec<usize> = (0..costs.len()).map(|i| i % ranks).collect();
    for (i, &r) in rank_of.iter().enumerate() {
        loads[r] += costs[i];
    }
    Ok(Assignment {
        rank_of,
        loads,
        warning: None,
    })
}

/// Exact minimum max-load by exhaustive search; meant for small instances.
pub fn optimal_makespan(costs: &[f64], ranks: usize) -> Result<f64> {
    check_costs(costs, ranks)?;
    if costs.len() > 16 {
        return Err(Error::Input("exhaustive search is limited to 16 items".into()));
    }
    let mut sorted = costs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut best = f64::INFINITY;
    let mut loads = vec![0.0f64; ranks];
    fn go(i: usize, items: &[f64], loads: &mut [f64], best: &mut f64) {
        if i == items.len() {
            *best = best.min(loads.iter().copied().fold(0.0, f64::max));
            return;
        }
        for r in 0..loads.len() {
            // an empty rank is interchangeable with any later empty rank
            if loads[r] == 0.0 && loads[..r].contains(&0.0) {
                continue;
            }
            if loads[r] + items[i] >= *best {
                continue;
            }
            loads[r] += items[i];
            go(i + 1, items, loads, best);
            loads[r] -= items[i];
        }
    }
    go(0, &sorted, &mut loads, &mut best);
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub world_size: usize,
    /// FLOP/s per device.
    pub device_flops: f64,
    /// Bytes/s within a node.
    pub intra_bandwidth: f64,
    /// Bytes/s across nodes.
    pub inter_bandwidth: f64,
    pub devices_per_node: usize,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.world_size == 0 || self.devices_per_node == 0 {
            return Err(Error::Config("world size and devices per node must be positive".into()));
        }
        if [self.device_flops, self.intra_bandwidth, self.inter_bandwidth].iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("throughput and bandwidths must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step workload of one global batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCost {
    pub flops_per_step: f64,
    /// Activation bytes exchanged by tensor-parallel layers per step.
    pub activation_bytes: f64,
    /// Gradient bytes (one copy of the parameters).
    pub param_bytes: f64,
    /// Shard activations across the TP group; changes memory, not time.
    #[serde(default)]
    pub sequence_parallel: bool,
}

impl ModelCost {
    /// Rough transformer estimate: `6·P·tokens` FLOPs with 2-byte values.
    pub fn transformer(params: usize, hidden: usize, depth: usize, tokens: usize) -> Self {
        let p = params as f64;
        Self {
            flops_per_step: 6.0 * p * tokens as f64,
            activation_bytes: 2.0 * 4.0 * (depth * tokens * hidden) as f64,
            param_bytes: 2.0 * p,
            sequence_parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParallelPlan {
    pub dp: usize,
    pub tp: usize,
    pub pp: usize,
    pub microbatches: usize,
    pub step_time: f64,
    pub comm_fraction: f64,
    pub bubble_fraction: f64,
    /// Relative activation memory per device.
    pub activation_memory: f64,
}

pub fn bubble_fraction(pp: usize, m: usize) -> f64 {
    (pp - 1) as f64 / (m + pp - 1) as f64
}

/// Every `(dp, tp, pp)` with product `world_size`, fastest first.
pub fn plan_parallelism(model: &ModelCost, cluster: &ClusterSpec, m: usize) -> Result<Vec<ParallelPlan>> {
    cluster.validate()?;
    if m < 1 {
        return Err(Error::Input("microbatches must be ≥ 1".into()));
    }
    let w = cluster.world_size;
    let mut plans = Vec::new();
    for tp in (1..=w).filter(|t| w % t == 0) {
        for pp in (1..=w / tp).filter(|p| (w / tp) % p == 0) {
            let dp = w / tp / pp;
            let bubble = bubble_fraction(pp, m);
            let compute = model.flops_per_step / (w as f64 * cluster.device_flops) / (1.0 - bubble);
            let tp_bw = if tp <= cluster.devices_per_node {
                cluster.intra_bandwidth
            } else {
                cluster.inter_bandwidth
            };
            let tp_comm = (model.activation_bytes / dp as f64) * 2.0 * (tp - 1) as f64 / tp as f64 / tp_bw;
            let dp_bw = if dp * tp <= cluster.devices_per_node {
                cluster.intra_bandwidth
            } else {
                cluster.inter_bandwidth
            };
            let shard = model.param_bytes / (tp * pp) as f64;
            let dp_comm = 2.0 * (dp - 1) as f64 / dp as f64 * shard / dp_bw;
            let comm = tp_comm + dp_comm;
            let step_time = compute + comm;
            let mut act_mem = 1.0 / (dp * pp) as f64;
            if model.sequence_parallel {
                act_mem /= tp as f64;
            }
            plans.push(ParallelPlan {
                dp,
                tp,
                pp,
                microbatches: m,
                step_time,
                comm_fraction: if step_time > 0.0 { comm / step_time } else { 0.0 },
                bubble_fraction: bubble,
                activation_memory: act_mem,
            });
        }
    }
    plans.sort_by(|a, b| a.step_time.total_cmp(&b.step_time).then((a.dp, a.tp, a.pp).cmp(&(b.dp, b.tp, b.pp))));
    Ok(plans)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageEvent {
    pub stage: usize,
    pub microbatch: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineRun {
    pub timeline: Vec<StageEvent>,
    pub makespan: f64,
    pub busy: f64,
    pub bubble_fraction: f64,
}

/// Synchronous pipeline: stage `s` starts microbatch `j` once it finished
/// `j − 1` and stage `s − 1` finished `j`.
pub fn simulate_pipeline(stage_times: &[f64], m: usize) -> Result<PipelineRun> {
    if stage_times.is_empty() || m == 0 {
        return Err(Error::Input("need at least one stage and one microbatch".into()));
    }
    if let Some(t) = stage_times.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::Input(format!("stage time {t} must be positive")));
    }
    let pp = stage_times.len();
    let mut done = vec![vec![0.0f64; m]; pp];
    let mut timeline = Vec::with_capacity(pp * m);
    for j in 0..m {
        for s in 0..pp {
            let ready_self = if j > 0 { done[s][j - 1] } else { 0.0 };
            let ready_prev = if s > 0 { done[s - 1][j] } else { 0.0 };
            let start = ready_self.max(ready_prev);
            let end = start + stage_times[s];
            done[s][j] = end;
            timeline.push(StageEvent {
                stage: s,
                microbatch: j,
                start,
                end,
            });
        }
    }
    timeline.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.stage.cmp(&b.stage)));
    let makespan = done[pp - 1][m - 1];
    let busy: f64 = stage_times.iter().map(|t| t * m as f64).sum();
    let capacity = pp as f64 * makespan;
    Ok(PipelineRun {
        timeline,
        makespan,
        busy,
        bubble_fraction: (capacity - busy) / capacity,
    })
}

/// Element visits made by [`fused_modulate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct VisitCounts {
    pub x_reads: usize,
    pub residual_reads: usize,
    pub writes: usize,
}

const FUSED_CHUNK: usize = 1 << 14;

/// `out = residual + (x + bias) ⊙ (1 + scale) + shift` in one pass, with the
/// per-channel vectors indexed by the last axis of width `bias.len()`.
pub fn fused_modulate(
    x: &[f32],
    bias: &[f32],
    scale: &[f32],
    shift: &[f32],
    residual: &[f32],
    out: &mut [f32],
) -> Result<VisitCounts> {
    let c = bias.len();
    if c == 0 || scale.len() != c || shift.len() != c {
        return Err(Error::dim("channels", format!("bias {c}, scale {}, shift {}", scale.len(), shift.len())));
    }
    if x.len() != residual.len() || x.len() != out.len() {
        return Err(Error::dim("elements", format!("x {}, residual {}, out {}", x.len(), residual.len(), out.len())));
    }
    if x.len() % c != 0 {
        return Err(Error::dim("channels", format!("{} elements are not a multiple of {c} channels", x.len())));
    }
    let chunk = FUSED_CHUNK - FUSED_CHUNK % c.max(1);
    let chunk = chunk.max(c);
    let visits = AtomicUsize::new(0);
    out.par_chunks_mut(chunk).enumerate().for_each(|(k, o)| {
        let base = k * chunk;
        let xs = &x[base..base + o.len()];
        let rs = &residual[base..base + o.len()];
        for (i, ((dst, &xv), &rv)) in o.iter_mut().zip(xs).zip(rs).enumerate() {
            let ch = i % c;
            *dst = rv + ((xv + bias[ch]) * (1.0 + scale[ch]) + shift[ch]);
        }
        visits.fetch_add(o.len(), Ordering::Relaxed);
    });
    let n = visits.into_inner();
    Ok(VisitCounts {
        x_reads: n,
        residual_reads: n,
        writes: n,
    })
}

/// Three separate passes: bias add, modulation, residual add.
pub fn composed_modulate(x: &[f32], bias: &[f32], scale: &[f32], shift: &[f32], residual: &[f32]) -> Vec<f32> {
    let c = bias.len();
    let biased: Vec<f32> = x.iter().enumerate().map(|(i, v)| v + bias[i % c]).collect();
    let modulated: Vec<f32> = biased.iter().enumerate().map(|(i, v)| v * (1.0 + scale[i % c]) + shift[i % c]).collect();
    residual.iter().zip(&modulated).map(|(r, m)| r + m).collect()
}
