//! The toy layered sequence model.
//!
//! Token embedding, a stack of identical pre-norm residual MLP blocks, and
//! a position-parallel output head. Each block is one partitionable layer;
//! the embedding rides with the first stage and the head with the last, so
//! edge stages are always heavier than the attack surface in between.
//!
//! The model maps a fixed-length prompt of `prompt_len` token ids to
//! `target_len` independent token predictions: the prompt embeds to one
//! row of width `hidden = prompt_len * embed_dim`, the blocks transform
//! that row, and the head emits `target_len * vocab` logits per example.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub prompt_len: usize,
    pub target_len: usize,
    pub blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { vocab: 64, embed_dim: 32, prompt_len: 4, target_len: 4, blocks: 8 }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.prompt_len * self.embed_dim
    }

    pub fn head_out(&self) -> usize {
        self.target_len * self.vocab
    }
}

/// One named parameter group; a "layer" for partitioning and freezing.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl ParamGroup {
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.tensors {
            for b in name.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= t.checksum();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn bit_eq(&self, other: &ParamGroup) -> bool {
        self.name == other.name
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.bit_eq(t2))
    }
}

/// Ordered per-layer parameter groups: embedding, the blocks, the head.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    groups: Vec<ParamGroup>,
}

const EMBED_GROUP: usize = 0;

impl ModelParams {
    /// Seeded Gaussian initialization. Residual-out projections are scaled
    /// down by sqrt(2 * blocks) to keep the stream magnitude stable.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden();
        let mut gauss = |shape: &[usize], std: f64| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * std)
                .collect();
            Tensor::new(shape.to_vec(), data).expect("init tensor")
        };

        let mut groups = Vec::with_capacity(config.blocks + 2);
        groups.push(ParamGroup {
            name: "embed".into(),
            tensors: vec![("table".into(), gauss(&[config.vocab, config.embed_dim], 0.5))],
        });
        let w_std = (2.0 / h as f64).sqrt();
        let out_std = w_std / (2.0 * config.blocks as f64).sqrt();
        for i in 1..=config.blocks {
            groups.push(ParamGroup {
                name: format!("block{i}"),
                tensors: vec![
                    ("ln_g".into(), Tensor::new(vec![h], vec![1.0; h]).unwrap()),
                    ("ln_b".into(), Tensor::zeros(vec![h])),
                    ("w1".into(), gauss(&[h, h], w_std)),
                    ("b1".into(), Tensor::zeros(vec![h])),
                    ("w2".into(), gauss(&[h, h], out_std)),
                    ("b2".into(), Tensor::zeros(vec![h])),
                ],
            });
        }
        groups.push(ParamGroup {
            name: "head".into(),
            tensors: vec![
                ("w".into(), gauss(&[h, config.head_out()], 1.0 / (h as f64).sqrt())),
                ("b".into(), Tensor::zeros(vec![config.head_out()])),
            ],
        });
        ModelParams { config, groups }
    }

    pub fn from_groups(config: ModelConfig, groups: Vec<ParamGroup>) -> Result<Self> {
        if groups.len() != config.blocks + 2 {
            return Err(Error::ArchitectureMismatch(format!(
                "expected {} parameter groups, got {}",
                config.blocks + 2,
                groups.len()
            )));
        }
        Ok(ModelParams { config, groups })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, idx: usize) -> &ParamGroup {
        &self.groups[idx]
    }

    pub fn group_mut(&mut self, idx: usize) -> &mut ParamGroup {
        &mut self.groups[idx]
    }

    /// Swaps in a group with the same name and tensor shapes (pipeline
    /// reassembly after a run).
    pub fn replace_group(&mut self, idx: usize, group: ParamGroup) -> Result<()> {
        let current = &self.groups[idx];
        let compatible = current.name == group.name
            && current.tensors.len() == group.tensors.len()
            && current
                .tensors
                .iter()
                .zip(&group.tensors)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape());
        if !compatible {
            return Err(Error::ArchitectureMismatch(format!(
                "replacement for group {idx} ({}) is incompatible",
                current.name
            )));
        }
        self.groups[idx] = group;
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Number of partitionable layers (the interior blocks).
    pub fn num_blocks(&self) -> usize {
        self.config.blocks
    }

    pub fn embed_group(&self) -> usize {
        EMBED_GROUP
    }

    pub fn head_group(&self) -> usize {
        self.groups.len() - 1
    }

    /// Group index of block `b` (0-based block index).
    pub fn block_group(&self, b: usize) -> usize {
        1 + b
    }

    /// Two models are architecture-compatible iff every group/tensor name
    /// and shape matches.
    pub fn architecture_compatible(&self, other: &ModelParams) -> bool {
        self.groups.len() == other.groups.len()
            && self.groups.iter().zip(&other.groups).all(|(a, b)| {
                a.name == b.name
                    && a.tensors.len() == b.tensors.len()
                    && a.tensors
                        .iter()
                        .zip(&b.tensors)
                        .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
            })
    }

    pub fn require_compatible(&self, other: &ModelParams, context: &str) -> Result<()> {
        if self.architecture_compatible(other) {
            Ok(())
        } else {
            Err(Error::ArchitectureMismatch(format!(
                "{context}: models are not architecture-compatible"
            )))
        }
    }

    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.groups.len() == other.groups.len()
            && self.groups.iter().zip(&other.groups).all(|(a, b)| a.bit_eq(b))
    }

    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for g in &self.groups {
            h ^= g.checksum();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// Flattens every tensor in declaration order (used by the finite
    /// difference wrapper and the checkpoint writer).
    pub fn flat_tensors(&self) -> Vec<Tensor> {
        self.groups
            .iter()
            .flat_map(|g| g.tensors.iter().map(|(_, t)| t.clone()))
            .collect()
    }

    /// Rebuilds params with the same structure from a flat tensor list.
    pub fn with_flat_tensors(&self, flat: &[Tensor]) -> Result<ModelParams> {
        let expected: usize = self.groups.iter().map(|g| g.tensors.len()).sum();
        if flat.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "expected {expected} tensors, got {}",
                flat.len()
            )));
        }
        let mut out = self.clone();
        let mut it = flat.iter();
        for g in &mut out.groups {
            for (_, t) in &mut g.tensors {
                *t = it.next().unwrap().clone();
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.groups
            .iter()
            .zip(&other.groups)
            .flat_map(|(a, b)| a.tensors.iter().zip(&b.tensors))
            .map(|((_, t1), (_, t2))| t1.max_abs_diff(t2))
            .fold(0.0, f64::max)
    }
}

/// Node ids for one group's tensors, aligned with `ParamGroup::tensors`.
pub type GroupNodes = Vec<NodeId>;

pub fn leaf_group(graph: &mut Graph, group: &ParamGroup) -> GroupNodes {
    group.tensors.iter().map(|(_, t)| graph.leaf(t.clone())).collect()
}

/// Embedding forward: `prompts` holds `batch` prompt sequences flattened
/// row-major; output is `[batch, hidden]`.
pub fn embed_forward(
    graph: &mut Graph,
    table: NodeId,
    prompts: &[u16],
    batch: usize,
) -> Result<NodeId> {
    graph.embedding(table, prompts, batch)
}

/// One pre-norm residual MLP block: x + relu(ln(x) W1 + b1) W2 + b2.
pub fn block_forward(graph: &mut Graph, x: NodeId, block: &GroupNodes) -> Result<NodeId> {
    let (ln_g, ln_b, w1, b1, w2, b2) =
        (block[0], block[1], block[2], block[3], block[4], block[5]);
    let u = graph.layer_norm(x, ln_g, ln_b)?;
    let h = graph.matmul(u, w1)?;
    let h = graph.bias_add(h, b1)?;
    let h = graph.relu(h)?;
    let h = graph.matmul(h, w2)?;
    let h = graph.bias_add(h, b2)?;
    graph.add(x, h)
}

/// Head forward returning per-position logits `[batch * target_len, vocab]`.
pub fn head_forward(
    graph: &mut Graph,
    x: NodeId,
    head: &GroupNodes,
    config: &ModelConfig,
) -> Result<NodeId> {
    let logits = graph.matmul(x, head[0])?;
    let logits = graph.bias_add(logits, head[1])?;
    let batch = graph.value(logits).shape()[0];
    graph.reshape(logits, vec![batch * config.target_len, config.vocab])
}

/// Full-model forward placed on one graph. Returns per-group leaf nodes
/// (for gradient extraction) and the logits node.
pub fn full_forward(
    graph: &mut Graph,
    params: &ModelParams,
    prompts: &[u16],
    batch: usize,
) -> Result<(Vec<GroupNodes>, NodeId)> {
    let nodes: Vec<GroupNodes> =
        params.groups().iter().map(|g| leaf_group(graph, g)).collect();
    let mut x = embed_forward(graph, nodes[EMBED_GROUP][0], prompts, batch)?;
    for b in 0..params.num_blocks() {
        x = block_forward(graph, x, &nodes[params.block_group(b)])?;
    }
    let logits = head_forward(graph, x, &nodes[params.head_group()], &params.config)?;
    Ok((nodes, logits))
}

/// Flattened per-position targets for a batch: `batch * target_len` class
/// indices aligned with the head logits rows.
pub fn flatten_targets(targets: &[u16]) -> Vec<usize> {
    targets.iter().map(|&t| t as usize).collect()
}

/// Mean cross-entropy of the model on one batch (no gradient retained).
pub fn batch_loss(params: &ModelParams, prompts: &[u16], targets: &[u16], batch: usize) -> Result<f64> {
    let mut graph = Graph::new();
    let (_, logits) = full_forward(&mut graph, params, prompts, batch)?;
    let loss = graph.softmax_cross_entropy(logits, &flatten_targets(targets))?;
    graph.value(loss).item()
}

/// Greedy decode: per-position argmax of the head logits.
pub fn greedy_decode(params: &ModelParams, prompts: &[u16], batch: usize) -> Result<Vec<Vec<u16>>> {
    let mut graph = Graph::new();
    let (_, logits) = full_forward(&mut graph, params, prompts, batch)?;
    let v = params.config.vocab;
    let t = params.config.target_len;
    let data = graph.value(logits).data();
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut seq = Vec::with_capacity(t);
        for pos in 0..t {
            let row = &data[(b * t + pos) * v..(b * t + pos + 1) * v];
            let mut best = 0usize;
            for (c, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = c;
                }
            }
            seq.push(best as u16);
        }
        out.push(seq);
    }
    Ok(out)
}

/// Fraction of target positions the greedy decode gets right.
pub fn token_accuracy(params: &ModelParams, prompts: &[u16], targets: &[u16], batch: usize) -> Result<f64> {
    let decoded = greedy_decode(params, prompts, batch)?;
    let t = params.config.target_len;
    let mut hits = 0usize;
    for b in 0..batch {
        for pos in 0..t {
            if decoded[b][pos] == targets[b * t + pos] {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (batch * t) as f64)
}

/// Gradient check of the full model loss on one batch: max relative error
/// between the graph's gradients and central finite differences.
pub fn finite_difference_check_model(
    params: &ModelParams,
    prompts: &[u16],
    targets: &[u16],
    batch: usize,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64> {
    let flat = params.flat_tensors();
    let skeleton = params.clone();
    let tgt = flatten_targets(targets);
    let loss_fn = |p: &[Tensor]| -> Result<f64> {
        let m = skeleton.with_flat_tensors(p)?;
        batch_loss(&m, prompts, targets, batch)
    };
    let grad_fn = |p: &[Tensor]| -> Result<Vec<Tensor>> {
        let m = skeleton.with_flat_tensors(p)?;
        let mut graph = Graph::new();
        let (nodes, logits) = full_forward(&mut graph, &m, prompts, batch)?;
        let loss = graph.softmax_cross_entropy(logits, &tgt)?;
        graph.backward(loss)?;
        Ok(nodes
            .iter()
            .flat_map(|g| g.iter().map(|&n| graph.grad_or_zeros(n)))
            .collect())
    };
    crate::autodiff::finite_difference_check(&flat, loss_fn, grad_fn, eps, max_coords, seed)
}
