//! Typed compute/communication DAG for one simulated training run.
//!
//! Per step a model of `L` layers contributes `3L - 1` compute nodes: `L`
//! forwards, `L - 1` activation backwards (the first layer needs none) and
//! `L` parameter backwards, each costing `step_compute_time / (3L - 1)` so
//! the step time is preserved exactly. Reduce nodes are per layer per
//! synchronization round and consume only the network resource; counting them
//! too, a data-parallel step has the full `4L - 1` nodes.
//!
//! Edges: `Fwd(l) -> Fwd(l+1)`; the backward chains down from `Fwd(L)`;
//! `BwdParam(l, s) -> Fwd(l, s+1)` (the local update must land before the
//! next forward touches the layer); `BwdParam(l, send) -> Reduce(l, round)`;
//! and `Reduce(l, round) -> Fwd(l, apply+1)` where `apply = send` for
//! blocking methods and `send + tau` when overlapped.

use crate::paramspace::{assign_offsets, partition};
use crate::Result;

use super::{Method, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Fwd,
    BwdAct,
    BwdParam,
    Reduce,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub kind: NodeKind,
    /// 1-based layer.
    pub layer: usize,
    /// Step the node belongs to (for a reduce: its send step).
    pub step: u64,
    pub duration: f64,
    pub dependents: Vec<u32>,
    pub indegree: u32,
}

#[derive(Debug)]
pub struct SimDag {
    pub nodes: Vec<Node>,
    pub layers: usize,
    pub num_steps: u64,
    /// Payload bytes crossing the slow link over the whole run.
    pub bytes_total: f64,
}

impl SimDag {
    pub fn nodes_in_step(&self, step: u64) -> usize {
        self.nodes.iter().filter(|n| n.step == step).count()
    }

    pub fn compute_nodes_in_step(&self, step: u64) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.step == step && n.kind != NodeKind::Reduce)
            .count()
    }
}

struct Builder {
    nodes: Vec<Node>,
    layers: usize,
    per_step: usize,
}

impl Builder {
    fn new(layers: usize, num_steps: u64, compute_cost: f64) -> Builder {
        let per_step = 3 * layers - 1;
        let mut nodes = Vec::with_capacity(per_step * num_steps as usize);
        for step in 1..=num_steps {
            for layer in 1..=layers {
                nodes.push(Node {
                    kind: NodeKind::Fwd,
                    layer,
                    step,
                    duration: compute_cost,
                    dependents: Vec::new(),
                    indegree: 0,
                });
            }
            for layer in (1..=layers).rev() {
                if layer >= 2 {
                    nodes.push(Node {
                        kind: NodeKind::BwdAct,
                        layer,
                        step,
                        duration: compute_cost,
                        dependents: Vec::new(),
                        indegree: 0,
                    });
                }
                nodes.push(Node {
                    kind: NodeKind::BwdParam,
                    layer,
                    step,
                    duration: compute_cost,
                    dependents: Vec::new(),
                    indegree: 0,
                });
            }
        }
        Builder {
            nodes,
            layers,
            per_step,
        }
    }

    fn fwd(&self, step: u64, layer: usize) -> u32 {
        ((step - 1) as usize * self.per_step + (layer - 1)) as u32
    }

    /// Backward nodes are emitted top layer first: offset within the step is
    /// `L + 2*(L - l)` for the pair at layer `l`.
    fn bwd_act(&self, step: u64, layer: usize) -> u32 {
        debug_assert!(layer >= 2);
        ((step - 1) as usize * self.per_step + self.layers + 2 * (self.layers - layer)) as u32
    }

    fn bwd_param(&self, step: u64, layer: usize) -> u32 {
        let extra = usize::from(layer >= 2);
        ((step - 1) as usize * self.per_step + self.layers + 2 * (self.layers - layer) + extra)
            as u32
    }

    fn edge(&mut self, from: u32, to: u32) {
        self.nodes[from as usize].dependents.push(to);
        self.nodes[to as usize].indegree += 1;
    }
}

/// Build the full DAG for a simulation config.
pub fn build_dag(config: &SimConfig) -> Result<SimDag> {
    config.validate()?;
    let layers = config.layers;
    let steps = config.num_steps;
    let compute_cost = config.step_compute_time / (3 * layers - 1) as f64;
    let mut b = Builder::new(layers, steps, compute_cost);

    // Compute skeleton: forward chain, backward chain, next-step gating.
    for s in 1..=steps {
        for l in 2..=layers {
            b.edge(b.fwd(s, l - 1), b.fwd(s, l));
        }
        for l in (1..=layers).rev() {
            let grad_in = if l == layers {
                b.fwd(s, layers)
            } else {
                b.bwd_act(s, l + 1)
            };
            if l >= 2 {
                b.edge(grad_in, b.bwd_act(s, l));
            }
            b.edge(grad_in, b.bwd_param(s, l));
        }
        if s < steps {
            for l in 1..=layers {
                b.edge(b.bwd_param(s, l), b.fwd(s + 1, l));
            }
        }
    }

    // Reduce schedule: (send step, layers) rounds per method.
    let rounds: Vec<(u64, Vec<usize>)> = match config.method {
        Method::DataParallel => (1..=steps).map(|s| (s, (1..=layers).collect())).collect(),
        Method::Diloco => {
            let mut v = Vec::new();
            let mut s = config.sync_period;
            while s <= steps {
                v.push((s, (1..=layers).collect()));
                s += config.sync_period;
            }
            v
        }
        Method::Streaming | Method::StreamingOverlap | Method::StreamingOverlap4bit => {
            let spec = partition(layers, config.fragment_size, config.pattern)?;
            let spec = assign_offsets(&spec, config.sync_period)?;
            let offsets = spec.offsets()?;
            let mut v = Vec::new();
            for (p, &t_p) in offsets.iter().enumerate() {
                let mut s = config.sync_period + t_p;
                while s <= steps {
                    let frag_layers = spec.fragments[p].iter().map(|&blk| blk + 1).collect();
                    v.push((s, frag_layers));
                    s += config.sync_period;
                }
            }
            v.sort();
            v
        }
    };

    let tau = match config.method {
        Method::StreamingOverlap | Method::StreamingOverlap4bit => config.tau,
        _ => 0,
    };
    let layer_bytes = config.bytes_per_layer * config.effective_bits() as f64 / 32.0;
    let reduce_duration = layer_bytes * 8.0 / config.bandwidth_bits_per_sec + config.link_latency;
    let mut bytes_total = 0.0;
    for (send, frag_layers) in rounds {
        for l in frag_layers {
            let id = b.nodes.len() as u32;
            b.nodes.push(Node {
                kind: NodeKind::Reduce,
                layer: l,
                step: send,
                duration: reduce_duration,
                dependents: Vec::new(),
                indegree: 0,
            });
            bytes_total += layer_bytes;
            b.edge(b.bwd_param(send, l), id);
            let apply = send + tau;
            if apply + 1 <= steps {
                b.edge(id, b.fwd(apply + 1, l));
            }
        }
    }

    Ok(SimDag {
        nodes: b.nodes,
        layers,
        num_steps: steps,
        bytes_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cusim::SimConfig;

    fn config(method: Method, layers: usize, steps: u64) -> SimConfig {
        SimConfig {
            layers,
            bytes_per_layer: 1000.0,
            step_compute_time: 1.0,
            bandwidth_bits_per_sec: 1e9,
            link_latency: 0.0,
            method,
            sync_period: 2,
            fragment_size: 1,
            tau: 1,
            bits_per_value: 32,
            num_steps: steps,
            pattern: crate::paramspace::FragmentPattern::Strided,
        }
    }

    #[test]
    fn data_parallel_step_has_full_node_count() {
        // L=2: 2 forwards, 1 activation backward, 2 parameter backwards plus
        // 2 reduces = 4*L - 1 = 7 nodes in the step.
        let dag = build_dag(&config(Method::DataParallel, 2, 1)).unwrap();
        assert_eq!(dag.nodes_in_step(1), 7);
        assert_eq!(dag.compute_nodes_in_step(1), 5);
    }

    #[test]
    fn compute_node_count_formula() {
        for layers in [1usize, 3, 24] {
            let dag = build_dag(&config(Method::Diloco, layers, 2)).unwrap();
            assert_eq!(dag.compute_nodes_in_step(1), 3 * layers - 1);
        }
    }

    #[test]
    fn diloco_reduces_only_on_sync_steps() {
        let dag = build_dag(&config(Method::Diloco, 3, 4)).unwrap();
        let reduces: Vec<u64> = dag
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Reduce)
            .map(|n| n.step)
            .collect();
        assert!(reduces.iter().all(|&s| s == 2 || s == 4));
        assert_eq!(reduces.len(), 6);
    }

    #[test]
    fn streaming_spreads_fragments() {
        let mut cfg = config(Method::Streaming, 4, 8);
        cfg.sync_period = 4;
        let dag = build_dag(&cfg).unwrap();
        let mut send_steps: Vec<u64> = dag
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Reduce)
            .map(|n| n.step)
            .collect();
        send_steps.dedup();
        // P=4 fragments, offsets 0..3: sends at 4,5,6,7 then 8.
        assert_eq!(send_steps, vec![4, 5, 6, 7, 8]);
    }
}
