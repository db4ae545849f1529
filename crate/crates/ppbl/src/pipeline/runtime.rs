//! Training execution: the stage-partitioned pipeline and its monolithic
//! reference twin.
//!
//! Schedule is plain fill-drain: a minibatch's microbatches traverse all
//! stages forward, then drain backward, then every stage applies one
//! optimizer step to its own layers and runs its hook. With one microbatch
//! the pipeline performs the exact floating-point op sequence of the
//! monolithic loop, which is what makes `run_monolithic` a usable oracle.
//! Validation passes ride the pipeline as CONTROL messages after the step
//! at each eval point, so the recorded loss always reflects the model the
//! attacker has already touched.
//!
//! Worker failures propagate by channel closure: a worker that returns an
//! error drops its endpoints, its neighbours observe `ChannelClosed` and
//! abort, and the driver reports the originating error.

use super::message::{MessageKind, PipeMessage};
use super::transport::{
    channel_edge, tcp_edge, EdgeStats, MessageRx, MessageTx, TransportKind,
};
use crate::adversary::StageHook;
use crate::autodiff::{Graph, NodeId};
use crate::data::DataStream;
use crate::error::{Error, Result};
use crate::metrics::{MetricsLog, INJECTION_METRIC};
use crate::model::{
    block_forward, embed_forward, flatten_targets, head_forward, leaf_group, GroupNodes,
    ModelParams,
};
use crate::optim::{warmup_lr, AdamHyper, Optimizer, OptimizerKind};
use crate::partition::{FreezeMask, StagePartition};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    /// Total iterations L.
    pub iters: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Fraction of L spent ramping the learning rate linearly from zero.
    pub warmup_frac: f64,
    pub seed: u64,
    /// Microbatches per iteration; 1 reproduces the monolith bit-exactly.
    pub microbatches: usize,
    /// Validation loss is computed every this many iterations (and at L).
    pub eval_interval: u64,
    /// Decoupled weight decay; only applied by AdamW.
    pub weight_decay: f64,
    /// Record per-iteration per-stage parameter checksums.
    pub record_checksums: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 750,
            batch_size: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::AdamW,
            warmup_frac: 0.05,
            seed: 0,
            microbatches: 1,
            eval_interval: 5,
            weight_decay: 0.01,
            record_checksums: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::InvalidArgument("training length L must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::InvalidArgument(format!(
                "warmup fraction must be in [0, 1), got {}",
                self.warmup_frac
            )));
        }
        if self.microbatches == 0 || self.batch_size % self.microbatches != 0 {
            return Err(Error::InvalidArgument(format!(
                "microbatches ({}) must divide the batch size ({})",
                self.microbatches, self.batch_size
            )));
        }
        if self.eval_interval == 0 {
            return Err(Error::InvalidArgument("eval interval must be >= 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidArgument(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            weight_decay: if self.optimizer == OptimizerKind::AdamW {
                self.weight_decay
            } else {
                0.0
            },
            ..AdamHyper::default()
        }
    }
}

/// Train and validation streams for one phase.
#[derive(Debug, Clone, Copy)]
pub struct SftData {
    pub train: DataStream,
    pub validation: DataStream,
}

impl SftData {
    fn require_compatible(&self, model: &ModelParams) -> Result<()> {
        for s in [&self.train, &self.validation] {
            if s.config.vocab != model.config.vocab
                || s.config.prompt_len != model.config.prompt_len
                || s.config.target_len != model.config.target_len
            {
                return Err(Error::ArchitectureMismatch(
                    "data stream dimensions do not match the model".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Iterations at which validation loss is computed: every `interval`
/// iterations plus the final one.
pub fn eval_points(iters: u64, interval: u64) -> Vec<u64> {
    let mut pts: Vec<u64> = (1..=iters).filter(|i| i % interval == 0).collect();
    if pts.last() != Some(&iters) {
        pts.push(iters);
    }
    pts
}

/// Result of a pipeline run: the reassembled model, the merged metrics,
/// per-edge message counts, and (if enabled) per-stage checksum traces.
#[derive(Debug)]
pub struct SftOutcome {
    pub params: ModelParams,
    pub log: MetricsLog,
    /// Edge i connects stages i and i+1: (forward-direction stats,
    /// backward-direction stats).
    pub edge_stats: Vec<(EdgeStats, EdgeStats)>,
    /// Per stage: (iteration, checksum of the stage's groups) per
    /// iteration, when `record_checksums` is set.
    pub stage_checksums: Vec<Vec<(u64, u64)>>,
}

/// Reference trainer: same semantics, no partitioning or messaging.
/// `freeze` excludes groups from updates (they stay bit-identical).
pub fn run_monolithic(
    base: &ModelParams,
    cfg: &TrainConfig,
    data: &SftData,
    freeze: Option<&FreezeMask>,
) -> Result<(ModelParams, MetricsLog)> {
    cfg.validate()?;
    data.require_compatible(base)?;
    if let Some(mask) = freeze {
        mask.require_compatible(base)?;
    }
    let mut params = base.clone();
    let unfrozen: Vec<usize> = (0..params.num_groups())
        .filter(|&g| !freeze.is_some_and(|m| m.is_frozen(g)))
        .collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.hyper(), &params, &unfrozen);
    let mut log = MetricsLog::new();
    let evals = eval_points(cfg.iters, cfg.eval_interval);

    for iter in 1..=cfg.iters {
        let batch = data.train.batch(iter, cfg.batch_size);
        let mut graph = Graph::new();
        let (nodes, logits) = crate::model::full_forward(&mut graph, &params, &batch.prompts, batch.size)?;
        let loss_node = graph.softmax_cross_entropy(logits, &flatten_targets(&batch.targets))?;
        let loss = graph.value(loss_node).item()?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { stage: 0, iteration: iter });
        }
        log.push(iter, "train_loss", loss);

        graph.backward(loss_node)?;
        let grads: Vec<Vec<Tensor>> = unfrozen
            .iter()
            .map(|&g| nodes[g].iter().map(|&n| graph.grad_or_zeros(n)).collect())
            .collect();
        let lr_eff = warmup_lr(cfg.lr, iter, cfg.iters, cfg.warmup_frac);
        opt.step(&mut params, &grads, lr_eff, iter)?;

        if evals.binary_search(&iter).is_ok() {
            let vb = data.validation.all();
            let vloss = crate::model::batch_loss(&params, &vb.prompts, &vb.targets, vb.size)?;
            if !vloss.is_finite() {
                return Err(Error::NonFiniteLoss { stage: 0, iteration: iter });
            }
            log.push(iter, "val_loss", vloss);
        }
    }
    Ok((params, log))
}

/// Pipeline training over in-process channels.
pub fn run_sft(
    base: &ModelParams,
    partition: &StagePartition,
    cfg: &TrainConfig,
    data: &SftData,
    hook: Option<StageHook>,
) -> Result<SftOutcome> {
    run_sft_with_transport(base, partition, cfg, data, hook, TransportKind::InProcess)
}

pub fn run_sft_with_transport(
    base: &ModelParams,
    partition: &StagePartition,
    cfg: &TrainConfig,
    data: &SftData,
    hook: Option<StageHook>,
    transport: TransportKind,
) -> Result<SftOutcome> {
    cfg.validate()?;
    partition.require_compatible(base)?;
    data.require_compatible(base)?;
    if let Some(h) = &hook {
        h.config().validate(partition)?;
        if let Some(a) = partition.attacker_stage() {
            if a != h.config().stage {
                return Err(Error::InvalidArgument(format!(
                    "hook targets stage {} but partition marks stage {a} as attacker",
                    h.config().stage
                )));
            }
        }
    }

    let n = partition.num_stages();
    let mut fwd_tx: Vec<Option<Box<dyn MessageTx>>> = (0..n).map(|_| None).collect();
    let mut fwd_rx: Vec<Option<Box<dyn MessageRx>>> = (0..n).map(|_| None).collect();
    let mut bwd_tx: Vec<Option<Box<dyn MessageTx>>> = (0..n).map(|_| None).collect();
    let mut bwd_rx: Vec<Option<Box<dyn MessageRx>>> = (0..n).map(|_| None).collect();
    let mut counters = Vec::new();
    for i in 0..n.saturating_sub(1) {
        match transport {
            TransportKind::InProcess => {
                let (tx, rx, cf) = channel_edge();
                fwd_tx[i] = Some(Box::new(tx));
                fwd_rx[i + 1] = Some(Box::new(rx));
                let (tx, rx, cb) = channel_edge();
                bwd_tx[i + 1] = Some(Box::new(tx));
                bwd_rx[i] = Some(Box::new(rx));
                counters.push((cf, cb));
            }
            TransportKind::Tcp => {
                let (tx, rx, cf) = tcp_edge()?;
                fwd_tx[i] = Some(Box::new(tx));
                fwd_rx[i + 1] = Some(Box::new(rx));
                let (tx, rx, cb) = tcp_edge()?;
                bwd_tx[i + 1] = Some(Box::new(tx));
                bwd_rx[i] = Some(Box::new(rx));
                counters.push((cf, cb));
            }
        }
    }

    let attacker = hook.as_ref().map(|h| h.config().stage);
    let mut hooks: Vec<Option<StageHook>> = (0..n).map(|_| None).collect();
    if let (Some(h), Some(a)) = (hook, attacker) {
        hooks[a] = Some(h);
    }

    let mut results: Vec<Option<Result<StageReturn>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for stage in (0..n).rev() {
            let ctx = WorkerCtx {
                stage,
                num_stages: n,
                partition,
                base: base.clone(),
                cfg,
                data: *data,
                hook: hooks[stage].take(),
                fwd_in: fwd_rx[stage].take(),
                fwd_out: fwd_tx[stage].take(),
                bwd_in: bwd_rx[stage].take(),
                bwd_out: bwd_tx[stage].take(),
            };
            handles.push((stage, scope.spawn(move || run_worker(ctx))));
        }
        for (stage, handle) in handles {
            results[stage] = Some(handle.join().unwrap_or_else(|_| {
                Err(Error::Protocol { stage, detail: "worker panicked".into() })
            }));
        }
    });

    // Prefer the originating error over secondary aborts.
    let mut returns = Vec::with_capacity(n);
    let mut abort: Option<Error> = None;
    for r in results.into_iter().map(Option::unwrap) {
        match r {
            Ok(ret) => returns.push(ret),
            Err(e @ (Error::Aborted { .. } | Error::ChannelClosed)) => {
                abort.get_or_insert(e);
            }
            Err(primary) => return Err(primary),
        }
    }
    if let Some(e) = abort {
        return Err(e);
    }

    let mut params = base.clone();
    let mut logs = Vec::new();
    let mut stage_checksums = vec![Vec::new(); n];
    for ret in returns {
        for (gi, group) in ret.groups {
            params.replace_group(gi, group)?;
        }
        stage_checksums[ret.stage] = ret.checksums;
        logs.push(ret.log);
    }
    Ok(SftOutcome {
        params,
        log: MetricsLog::merge(logs),
        edge_stats: counters.iter().map(|(f, b)| (f.snapshot(), b.snapshot())).collect(),
        stage_checksums,
    })
}

struct WorkerCtx<'a> {
    stage: usize,
    num_stages: usize,
    partition: &'a StagePartition,
    base: ModelParams,
    cfg: &'a TrainConfig,
    data: SftData,
    hook: Option<StageHook>,
    fwd_in: Option<Box<dyn MessageRx>>,
    fwd_out: Option<Box<dyn MessageTx>>,
    bwd_in: Option<Box<dyn MessageRx>>,
    bwd_out: Option<Box<dyn MessageTx>>,
}

struct StageReturn {
    stage: usize,
    groups: Vec<(usize, crate::model::ParamGroup)>,
    log: MetricsLog,
    checksums: Vec<(u64, u64)>,
}

/// Per-microbatch forward state kept alive until the backward drain.
struct PendingGraph {
    graph: Graph,
    input_leaf: Option<NodeId>,
    output: NodeId,
    group_nodes: Vec<GroupNodes>,
    loss: f64,
}

fn run_worker(mut ctx: WorkerCtx<'_>) -> Result<StageReturn> {
    let stage = ctx.stage;
    let cfg = ctx.cfg;
    let is_first = stage == 0;
    let is_last = stage + 1 == ctx.num_stages;
    let block_range = ctx.partition.range(stage);
    let mut params = ctx.base;
    let my_groups = ctx.partition.stage_groups(stage, &params);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.hyper(), &params, &my_groups);
    let mut log = MetricsLog::new();
    let mut checksums = Vec::new();
    let evals = eval_points(cfg.iters, cfg.eval_interval);
    let microbatches = cfg.microbatches;
    let mb_size = cfg.batch_size / microbatches;
    let prompt_len = params.config.prompt_len;
    let target_len = params.config.target_len;
    let hidden = params.config.hidden();

    let recv = |rx: &mut Option<Box<dyn MessageRx>>| -> Result<PipeMessage> {
        rx.as_mut()
            .expect("endpoint wired")
            .recv()
            .map_err(|e| match e {
                Error::ChannelClosed => Error::Aborted { stage },
                other => other,
            })
    };
    // Outbound traffic passes through the attack hook, which is how the
    // sign-flip baseline reaches the wire.
    fn send(
        tx: &mut Option<Box<dyn MessageTx>>,
        hook: &mut Option<StageHook>,
        stage: usize,
        msg: PipeMessage,
    ) -> Result<()> {
        let msg = match hook.as_mut() {
            Some(h) => h.transform_outbound(msg),
            None => msg,
        };
        tx.as_mut().expect("endpoint wired").send(msg).map_err(|e| match e {
            Error::ChannelClosed => Error::Aborted { stage },
            other => other,
        })
    }

    // One-shot injection happens before the first iteration.
    if let Some(h) = ctx.hook.as_mut() {
        h.on_post_step(0, &mut params)?;
    }

    for iter in 1..=cfg.iters {
        let batch = if is_first || is_last {
            Some(ctx.data.train.batch(iter, cfg.batch_size))
        } else {
            None
        };

        // ---- forward fill ----
        let mut pending: Vec<PendingGraph> = Vec::with_capacity(microbatches);
        for mb in 0..microbatches {
            let mut graph = Graph::new();
            let group_nodes: Vec<GroupNodes> =
                my_groups.iter().map(|&g| leaf_group(&mut graph, params.group(g))).collect();
            let mut by_group = group_nodes.iter();

            let (input_leaf, mut x) = if is_first {
                let b = batch.as_ref().unwrap();
                let prompts = &b.prompts[mb * mb_size * prompt_len..(mb + 1) * mb_size * prompt_len];
                let embed = by_group.next().expect("stage 0 owns the embedding");
                (None, embed_forward(&mut graph, embed[0], prompts, mb_size)?)
            } else {
                let msg = recv(&mut ctx.fwd_in)?;
                expect_message(&msg, stage, MessageKind::Forward, iter, mb as u16)?;
                expect_shape(&msg, stage, &[mb_size, hidden])?;
                let leaf = graph.leaf(msg.payload);
                (Some(leaf), leaf)
            };
            for _ in block_range.start..block_range.end {
                x = block_forward(&mut graph, x, by_group.next().expect("stage block group"))?;
            }

            let mut loss = 0.0;
            if is_last {
                let head = by_group.next().expect("last stage owns the head");
                let logits = head_forward(&mut graph, x, head, &params.config)?;
                let b = batch.as_ref().unwrap();
                let targets =
                    &b.targets[mb * mb_size * target_len..(mb + 1) * mb_size * target_len];
                let loss_node = graph.softmax_cross_entropy(logits, &flatten_targets(targets))?;
                loss = graph.value(loss_node).item()?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { stage, iteration: iter });
                }
                x = loss_node;
            } else {
                let out = graph.value(x).clone();
                if !out.all_finite() {
                    return Err(Error::NonFiniteLoss { stage, iteration: iter });
                }
                let msg = PipeMessage::new(MessageKind::Forward, iter as u32, mb as u16, out);
                send(&mut ctx.fwd_out, &mut ctx.hook, stage, msg)?;
            }
            pending.push(PendingGraph { graph, input_leaf, output: x, group_nodes, loss });
        }

        // ---- backward drain ----
        let mut grad_accum: Vec<Vec<Tensor>> = my_groups
            .iter()
            .map(|&g| {
                params
                    .group(g)
                    .tensors
                    .iter()
                    .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                    .collect()
            })
            .collect();
        let mut loss_sum = 0.0;
        let inv_m = 1.0 / microbatches as f64;
        for (mb, pg) in pending.iter_mut().enumerate() {
            if is_last {
                pg.graph.backward(pg.output)?;
                loss_sum += pg.loss;
            } else {
                let msg = recv(&mut ctx.bwd_in)?;
                expect_message(&msg, stage, MessageKind::Backward, iter, mb as u16)?;
                expect_shape(&msg, stage, pg.graph.value(pg.output).shape())?;
                pg.graph.backward_from(pg.output, msg.payload.clone())?;
            }
            if !is_first {
                let gin = pg.graph.grad_or_zeros(pg.input_leaf.expect("non-first stage input"));
                let msg = PipeMessage::new(MessageKind::Backward, iter as u32, mb as u16, gin);
                send(&mut ctx.bwd_out, &mut ctx.hook, stage, msg)?;
            }
            for (acc, nodes) in grad_accum.iter_mut().zip(&pg.group_nodes) {
                for (a, &node) in acc.iter_mut().zip(nodes) {
                    let g = pg.graph.grad_or_zeros(node);
                    for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                        *av += inv_m * gv;
                    }
                }
            }
        }
        drop(pending);
        if is_last {
            log.push(iter, "train_loss", loss_sum * inv_m);
        }

        // ---- optimizer step, then the hook ----
        let lr_eff = warmup_lr(cfg.lr, iter, cfg.iters, cfg.warmup_frac);
        opt.step(&mut params, &grad_accum, lr_eff, iter)?;
        if let Some(h) = ctx.hook.as_mut() {
            h.on_post_step(iter, &mut params)?;
        }

        // ---- validation pass (CONTROL traffic, no backward) ----
        if evals.binary_search(&iter).is_ok() {
            let mut graph = Graph::new();
            let group_nodes: Vec<GroupNodes> =
                my_groups.iter().map(|&g| leaf_group(&mut graph, params.group(g))).collect();
            let mut by_group = group_nodes.iter();
            let val = ctx.data.validation.all();
            let mut x = if is_first {
                let embed = by_group.next().expect("stage 0 owns the embedding");
                embed_forward(&mut graph, embed[0], &val.prompts, val.size)?
            } else {
                let msg = recv(&mut ctx.fwd_in)?;
                expect_message(&msg, stage, MessageKind::Control, iter, 0)?;
                expect_shape(&msg, stage, &[val.size, hidden])?;
                graph.leaf(msg.payload)
            };
            for _ in block_range.start..block_range.end {
                x = block_forward(&mut graph, x, by_group.next().expect("stage block group"))?;
            }
            if is_last {
                let head = by_group.next().expect("last stage owns the head");
                let logits = head_forward(&mut graph, x, head, &params.config)?;
                let loss_node =
                    graph.softmax_cross_entropy(logits, &flatten_targets(&val.targets))?;
                let vloss = graph.value(loss_node).item()?;
                if !vloss.is_finite() {
                    return Err(Error::NonFiniteLoss { stage, iteration: iter });
                }
                log.push(iter, "val_loss", vloss);
            } else {
                let out = graph.value(x).clone();
                let msg = PipeMessage::new(MessageKind::Control, iter as u32, 0, out);
                send(&mut ctx.fwd_out, &mut ctx.hook, stage, msg)?;
            }
        }

        if cfg.record_checksums {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for &g in &my_groups {
                h ^= params.group(g).checksum();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            checksums.push((iter, h));
        }
    }

    if let Some(h) = &ctx.hook {
        for &(it, w) in h.events() {
            log.push(it, INJECTION_METRIC, w);
        }
    }
    Ok(StageReturn {
        stage,
        groups: my_groups.iter().map(|&g| (g, params.group(g).clone())).collect(),
        log,
        checksums,
    })
}

fn expect_message(
    msg: &PipeMessage,
    stage: usize,
    kind: MessageKind,
    iter: u64,
    mb: u16,
) -> Result<()> {
    if msg.kind != kind || u64::from(msg.iteration) != iter || msg.microbatch != mb {
        return Err(Error::Protocol {
            stage,
            detail: format!(
                "expected {kind:?} iter {iter} microbatch {mb}, got {:?} iter {} microbatch {}",
                msg.kind, msg.iteration, msg.microbatch
            ),
        });
    }
    if !msg.verify_checksum() {
        return Err(Error::Protocol { stage, detail: "payload checksum mismatch".into() });
    }
    Ok(())
}

fn expect_shape(msg: &PipeMessage, stage: usize, shape: &[usize]) -> Result<()> {
    if msg.payload.shape() != shape {
        return Err(Error::Protocol {
            stage,
            detail: format!(
                "payload shape {:?}, expected {:?}",
                msg.payload.shape(),
                shape
            ),
        });
    }
    Ok(())
}
