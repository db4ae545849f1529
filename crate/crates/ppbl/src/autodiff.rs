//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Define-by-run: every forward op appends a node to the tape and computes
//! its value eagerly, so `backward` only has to walk the tape in reverse.
//! The op set is exactly what the toy layered model needs: matmul, add,
//! bias-add, elementwise multiply, relu, layer norm, embedding lookup, sum,
//! and softmax cross-entropy. Inputs of a node always precede it on the
//! tape, which makes reverse insertion order a valid reverse topological
//! order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    BiasAdd { x: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Relu { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Embedding { table: NodeId, ids: Vec<u16> },
    Sum { x: NodeId },
    Reshape { x: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize> },
}

/// Per-op intermediates cached at forward time for the backward rule.
#[derive(Debug, Clone)]
enum Aux {
    None,
    LayerNorm { mean: Vec<f64>, rstd: Vec<f64> },
    Softmax(Vec<f64>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    aux: Aux,
}

/// Numerically stable row softmax. Exposed so tests can check the
/// rows-sum-to-one invariant directly against the training path.
pub fn softmax_rows(logits: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(logits.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for c in 0..cols {
            let e = (row[c] - m).exp();
            out[r * cols + c] = e;
            denom += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= denom;
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Aux) -> NodeId {
        self.nodes.push(Node { op, value, grad: None, aux });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::Graph(format!("unknown node id {}", id.0)))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass, if this node was on the path.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient with the ignored-parameter contract: a node the loss does
    /// not depend on has an exactly-zero gradient.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape().to_vec()),
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, Aux::None)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape_mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (va.data(), vb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        Ok(self.push(Op::MatMul { a, b }, Tensor::from_op(vec![m, n], out), Aux::None))
    }

    /// Elementwise add of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        if va.shape() != vb.shape() {
            return Err(Error::shape_mismatch("add", va.shape(), vb.shape()));
        }
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let shape = va.shape().to_vec();
        Ok(self.push(Op::Add { a, b }, Tensor::from_op(shape, out), Aux::None))
    }

    /// `[m, n] + [n]` row-broadcast add; the only broadcast in the engine.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (&self.node(x)?.value, &self.node(bias)?.value);
        let (sx, sb) = (vx.shape(), vb.shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape_mismatch("bias_add", sx, sb));
        }
        let (m, n) = (sx[0], sx[1]);
        let (dx, db) = (vx.data(), vb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = dx[i * n + j] + db[j];
            }
        }
        Ok(self.push(Op::BiasAdd { x, bias }, Tensor::from_op(vec![m, n], out), Aux::None))
    }

    /// Elementwise multiply of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        if va.shape() != vb.shape() {
            return Err(Error::shape_mismatch("mul", va.shape(), vb.shape()));
        }
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let shape = va.shape().to_vec();
        Ok(self.push(Op::Mul { a, b }, Tensor::from_op(shape, out), Aux::None))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.node(x)?.value;
        let out: Vec<f64> = vx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = vx.shape().to_vec();
        Ok(self.push(Op::Relu { x }, Tensor::from_op(shape, out), Aux::None))
    }

    /// Row-wise layer norm over `[m, n]` with learned scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let vx = &self.node(x)?.value;
        let sx = vx.shape().to_vec();
        if sx.len() != 2 {
            return Err(Error::shape_mismatch("layer_norm input", &sx, &[0, 0]));
        }
        let (m, n) = (sx[0], sx[1]);
        let vg = &self.node(gamma)?.value;
        if vg.shape() != [n] {
            return Err(Error::shape_mismatch("layer_norm gamma", vg.shape(), &[n]));
        }
        let vb = &self.node(beta)?.value;
        if vb.shape() != [n] {
            return Err(Error::shape_mismatch("layer_norm beta", vb.shape(), &[n]));
        }
        let dx = self.nodes[x.0].value.data();
        let dg = self.nodes[gamma.0].value.data();
        let db = self.nodes[beta.0].value.data();
        let mut out = vec![0.0; m * n];
        let mut mean = vec![0.0; m];
        let mut rstd = vec![0.0; m];
        for r in 0..m {
            let row = &dx[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            for j in 0..n {
                out[r * n + j] = dg[j] * (row[j] - mu) * rs + db[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta },
            Tensor::from_op(vec![m, n], out),
            Aux::LayerNorm { mean, rstd },
        ))
    }

    /// Embedding lookup: `ids` holds `rows` token sequences laid out
    /// row-major; the output packs each sequence's embeddings into one
    /// row, giving `[rows, (ids.len()/rows) * dim]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[u16], rows: usize) -> Result<NodeId> {
        let vt = &self.node(table)?.value;
        let st = vt.shape();
        if st.len() != 2 {
            return Err(Error::shape_mismatch("embedding table", st, &[0, 0]));
        }
        let (vocab, dim) = (st[0], st[1]);
        if rows == 0 || ids.len() % rows != 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding: {} ids not divisible into {rows} rows",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::TargetOutOfRange { index: bad as usize, vocab });
        }
        let per_row = ids.len() / rows;
        let dt = vt.data();
        let mut out = vec![0.0; rows * per_row * dim];
        for r in 0..rows {
            for t in 0..per_row {
                let id = ids[r * per_row + t] as usize;
                let src = &dt[id * dim..(id + 1) * dim];
                let dst = &mut out[r * per_row * dim + t * dim..r * per_row * dim + (t + 1) * dim];
                dst.copy_from_slice(src);
            }
        }
        Ok(self.push(
            Op::Embedding { table, ids: ids.to_vec() },
            Tensor::from_op(vec![rows, per_row * dim], out),
            Aux::None,
        ))
    }

    /// Sum of all elements down to a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.node(x)?.value;
        let s: f64 = vx.data().iter().sum();
        Ok(self.push(Op::Sum { x }, Tensor::scalar(s), Aux::None))
    }

    /// Relabels the shape of a tensor with the same element count; data
    /// is row-major so no movement happens.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let vx = &self.node(x)?.value;
        if shape.iter().product::<usize>() != vx.numel() {
            return Err(Error::shape_mismatch("reshape", vx.shape(), &shape));
        }
        let data = vx.data().to_vec();
        Ok(self.push(Op::Reshape { x }, Tensor::from_op(shape, data), Aux::None))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = &self.node(logits)?.value;
        let sl = vl.shape();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(Error::shape_mismatch(
                "softmax_cross_entropy",
                sl,
                &[targets.len(), sl.get(1).copied().unwrap_or(0)],
            ));
        }
        let (b, v) = (sl[0], sl[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TargetOutOfRange { index: bad, vocab: v });
        }
        let probs = softmax_rows(vl.data(), b, v);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            loss -= probs[r * v + t].ln();
        }
        loss /= b as f64;
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec() },
            Tensor::scalar(loss),
            Aux::Softmax(probs),
        ))
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f64]) {
        let node = &mut self.nodes[id.0];
        let grad = node
            .grad
            .get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
        for (g, d) in grad.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Backward from a scalar loss root, seeding with 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(Error::Graph(format!(
                "backward requires a scalar loss root, got shape {:?}",
                root.value.shape()
            )));
        }
        self.backward_from(loss, Tensor::scalar(1.0))
    }

    /// Backward seeded with an externally supplied output gradient; this is
    /// how a pipeline stage resumes the chain rule from the boundary
    /// gradient its downstream neighbour sent.
    pub fn backward_from(&mut self, output: NodeId, seed: Tensor) -> Result<()> {
        let node = self.node(output)?;
        if node.value.shape() != seed.shape() {
            return Err(Error::shape_mismatch(
                "backward seed",
                node.value.shape(),
                seed.shape(),
            ));
        }
        self.nodes[output.0].grad = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(gout) = self.nodes[i].grad.clone() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let sa = self.nodes[a.0].value.shape().to_vec();
                    let sb = self.nodes[b.0].value.shape().to_vec();
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let dc = gout.data();
                    // dA = dC * B^T
                    let mut da = vec![0.0; m * k];
                    {
                        let bd = self.nodes[b.0].value.data();
                        for i2 in 0..m {
                            for j in 0..n {
                                let g = dc[i2 * n + j];
                                for p in 0..k {
                                    da[i2 * k + p] += g * bd[p * n + j];
                                }
                            }
                        }
                    }
                    // dB = A^T * dC
                    let mut dbv = vec![0.0; k * n];
                    {
                        let ad = self.nodes[a.0].value.data();
                        for i2 in 0..m {
                            for p in 0..k {
                                let av = ad[i2 * k + p];
                                for j in 0..n {
                                    dbv[p * n + j] += av * dc[i2 * n + j];
                                }
                            }
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &dbv);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, gout.data());
                    self.accumulate(b, gout.data());
                }
                Op::BiasAdd { x, bias } => {
                    let n = self.nodes[bias.0].value.numel();
                    let m = gout.numel() / n;
                    self.accumulate(x, gout.data());
                    let mut db = vec![0.0; n];
                    for i2 in 0..m {
                        for j in 0..n {
                            db[j] += gout.data()[i2 * n + j];
                        }
                    }
                    self.accumulate(bias, &db);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> = gout
                        .data()
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(g, y)| g * y)
                        .collect();
                    let db: Vec<f64> = gout
                        .data()
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(g, x2)| g * x2)
                        .collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Relu { x } => {
                    let dx: Vec<f64> = gout
                        .data()
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (mean, rstd) = match &self.nodes[i].aux {
                        Aux::LayerNorm { mean, rstd } => (mean.clone(), rstd.clone()),
                        _ => unreachable!("layer_norm aux missing"),
                    };
                    let sx = self.nodes[x.0].value.shape().to_vec();
                    let (m, n) = (sx[0], sx[1]);
                    let xd = self.nodes[x.0].value.data().to_vec();
                    let gd = self.nodes[gamma.0].value.data().to_vec();
                    let dy = gout.data();
                    let mut dx = vec![0.0; m * n];
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    for r in 0..m {
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut sum_gdy = 0.0;
                        let mut sum_gdy_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (xd[r * n + j] - mu) * rs;
                            let gdy = gd[j] * dy[r * n + j];
                            sum_gdy += gdy;
                            sum_gdy_xhat += gdy * xhat;
                            dgamma[j] += dy[r * n + j] * xhat;
                            dbeta[j] += dy[r * n + j];
                        }
                        let inv_n = 1.0 / n as f64;
                        for j in 0..n {
                            let xhat = (xd[r * n + j] - mu) * rs;
                            let gdy = gd[j] * dy[r * n + j];
                            dx[r * n + j] =
                                (gdy - inv_n * sum_gdy - xhat * inv_n * sum_gdy_xhat) * rs;
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }
                Op::Embedding { table, ids } => {
                    let st = self.nodes[table.0].value.shape().to_vec();
                    let dim = st[1];
                    let mut dt = vec![0.0; st[0] * dim];
                    for (pos, &id) in ids.iter().enumerate() {
                        let src = &gout.data()[pos * dim..(pos + 1) * dim];
                        let dst = &mut dt[id as usize * dim..(id as usize + 1) * dim];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    self.accumulate(table, &dt);
                }
                Op::Sum { x } => {
                    let g = gout.data()[0];
                    let dx = vec![g; self.nodes[x.0].value.numel()];
                    self.accumulate(x, &dx);
                }
                Op::Reshape { x } => {
                    self.accumulate(x, gout.data());
                }
                Op::SoftmaxCrossEntropy { logits, targets } => {
                    let probs = match &self.nodes[i].aux {
                        Aux::Softmax(p) => p.clone(),
                        _ => unreachable!("softmax aux missing"),
                    };
                    let v = self.nodes[logits.0].value.shape()[1];
                    let b = targets.len();
                    let g = gout.data()[0];
                    let scale = g / b as f64;
                    let mut dl = probs;
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * v + t] -= 1.0;
                    }
                    for d in dl.iter_mut() {
                        *d *= scale;
                    }
                    self.accumulate(logits, &dl);
                }
            }
        }
        Ok(())
    }
}

/// Max relative error between analytic gradients and central finite
/// differences over up to `max_coords` sampled parameter coordinates.
///
/// `loss_fn` is the value-only route (evaluated at perturbed parameters);
/// `grad_fn` returns analytic gradients aligned with `params`. The two
/// routes must stay independent for this to mean anything: `loss_fn` is
/// re-evaluated numerically, never differentiated.
pub fn finite_difference_check<F, G>(
    params: &[Tensor],
    loss_fn: F,
    grad_fn: G,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<f64>,
    G: Fn(&[Tensor]) -> Result<Vec<Tensor>>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("finite_difference_check: eps must be > 0, got {eps}")));
    }
    let l0 = loss_fn(params)?;
    let l1 = loss_fn(params)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::InvalidArgument(
            "finite_difference_check: model-fn is non-deterministic (repeated evaluation mismatch)".into(),
        ));
    }

    let analytic = grad_fn(params)?;
    if analytic.len() != params.len() {
        return Err(Error::InvalidArgument(
            "finite_difference_check: grad_fn returned wrong tensor count".into(),
        ));
    }

    let total: usize = params.iter().map(Tensor::numel).sum();
    let mut coords: Vec<usize> = Vec::new();
    if total <= max_coords {
        coords.extend(0..total);
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = std::collections::HashSet::new();
        while coords.len() < max_coords {
            let c = rng.random_range(0..total);
            if seen.insert(c) {
                coords.push(c);
            }
        }
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0_f64;
    for flat in coords {
        let (ti, ei) = locate(params, flat);
        let orig = work[ti].data()[ei];

        work[ti].data_mut()[ei] = orig + eps;
        let fp = loss_fn(&work)?;
        work[ti].data_mut()[ei] = orig - eps;
        let fm = loss_fn(&work)?;
        work[ti].data_mut()[ei] = orig;

        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[ti].data()[ei];
        let rel = (a - numeric).abs() / (a.abs() + 1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

fn locate(params: &[Tensor], mut flat: usize) -> (usize, usize) {
    for (i, t) in params.iter().enumerate() {
        if flat < t.numel() {
            return (i, flat);
        }
        flat -= t.numel();
    }
    unreachable!("coordinate out of range")
}
