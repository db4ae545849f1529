//! Stage partitioning and parameter bookkeeping.
//!
//! A partition divides the model's interior blocks into contiguous stage
//! ranges. The embedding always belongs to stage 0 and the head to the
//! last stage, so an intermediate stage consists of blocks only — which is
//! exactly the attack surface the adversary gets.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

/// Contiguous block range of one stage: `start..end` (end exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageRange {
    pub start: usize,
    pub end: usize,
}

impl StageRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePartition {
    num_stages: usize,
    ranges: Vec<StageRange>,
    attacker_stage: Option<usize>,
}

/// Evenly divides `num_layers` interior blocks into `N` contiguous stages.
/// When the division is uneven the earlier stages take one extra layer
/// each. Requires at least one intermediate stage (N >= 3).
pub fn partition(num_layers: usize, n: usize) -> Result<StagePartition> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "partition needs at least 3 stages (one intermediate), got {n}"
        )));
    }
    if n > num_layers {
        return Err(Error::InvalidArgument(format!(
            "cannot split {num_layers} layers into {n} stages"
        )));
    }
    Ok(StagePartition { num_stages: n, ranges: even_ranges(num_layers, n), attacker_stage: None })
}

fn even_ranges(num_layers: usize, n: usize) -> Vec<StageRange> {
    let base = num_layers / n;
    let remainder = num_layers % n;
    let mut ranges = Vec::with_capacity(n);
    let mut start = 0;
    for s in 0..n {
        let len = base + usize::from(s < remainder);
        ranges.push(StageRange { start, end: start + len });
        start += len;
    }
    ranges
}

impl StagePartition {
    /// Degenerate single-stage partition; used by the pipeline/monolith
    /// equivalence checks, never by an attack (no intermediate stage).
    pub fn single(num_layers: usize) -> Self {
        StagePartition {
            num_stages: 1,
            ranges: vec![StageRange { start: 0, end: num_layers }],
            attacker_stage: None,
        }
    }

    /// Marks stage `a` as attacker-controlled; must be intermediate.
    pub fn with_attacker(mut self, a: usize) -> Result<Self> {
        if a == 0 || a + 1 >= self.num_stages {
            return Err(Error::InvalidArgument(format!(
                "attacker stage must be intermediate (1..={}), got {a}",
                self.num_stages.saturating_sub(2)
            )));
        }
        self.attacker_stage = Some(a);
        Ok(self)
    }

    pub fn num_stages(&self) -> usize {
        self.num_stages
    }

    pub fn num_layers(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    pub fn range(&self, stage: usize) -> StageRange {
        self.ranges[stage]
    }

    pub fn ranges(&self) -> &[StageRange] {
        &self.ranges
    }

    pub fn attacker_stage(&self) -> Option<usize> {
        self.attacker_stage
    }

    pub fn is_edge(&self, stage: usize) -> bool {
        stage == 0 || stage + 1 == self.num_stages
    }

    /// Parameter-group indices owned by a stage, in model order: the
    /// embedding for stage 0, the stage's blocks, the head for the last.
    pub fn stage_groups(&self, stage: usize, model: &ModelParams) -> Vec<usize> {
        let mut groups = Vec::new();
        if stage == 0 {
            groups.push(model.embed_group());
        }
        let r = self.ranges[stage];
        for b in r.start..r.end {
            groups.push(model.block_group(b));
        }
        if stage + 1 == self.num_stages {
            groups.push(model.head_group());
        }
        groups
    }

    pub fn require_compatible(&self, model: &ModelParams) -> Result<()> {
        if self.num_layers() != model.num_blocks() {
            return Err(Error::ArchitectureMismatch(format!(
                "partition covers {} layers but model has {} blocks",
                self.num_layers(),
                model.num_blocks()
            )));
        }
        Ok(())
    }
}

/// Per-layer (parameter-group) freeze flags; true = excluded from
/// optimizer updates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    frozen: Vec<bool>,
}

impl FreezeMask {
    pub fn none(num_groups: usize) -> Self {
        FreezeMask { frozen: vec![false; num_groups] }
    }

    pub fn all(num_groups: usize) -> Self {
        FreezeMask { frozen: vec![true; num_groups] }
    }

    /// Freezes every group except those owned by `stage`.
    pub fn all_but_stage(partition: &StagePartition, stage: usize, model: &ModelParams) -> Self {
        let mut mask = FreezeMask::all(model.num_groups());
        for g in partition.stage_groups(stage, model) {
            mask.frozen[g] = false;
        }
        mask
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }

    pub fn is_frozen(&self, group: usize) -> bool {
        self.frozen[group]
    }

    pub fn require_compatible(&self, model: &ModelParams) -> Result<()> {
        if self.frozen.len() != model.num_groups() {
            return Err(Error::ArchitectureMismatch(format!(
                "freeze mask has {} entries but model has {} groups",
                self.frozen.len(),
                model.num_groups()
            )));
        }
        Ok(())
    }
}

/// Per-parameter delta restricted to one stage's groups.
#[derive(Debug, Clone)]
pub struct TaskVector {
    pub stage: usize,
    /// (group index, per-tensor deltas aligned with the group's tensors)
    pub groups: Vec<(usize, Vec<Tensor>)>,
}

impl TaskVector {
    pub fn max_abs(&self) -> f64 {
        self.groups
            .iter()
            .flat_map(|(_, ts)| ts.iter())
            .flat_map(|t| t.data().iter().map(|x| x.abs()))
            .fold(0.0, f64::max)
    }
}

/// Elementwise `backdoored - base` restricted to the given stage's layers.
pub fn compute_task_vector(
    backdoored: &ModelParams,
    base: &ModelParams,
    part: &StagePartition,
    stage: usize,
) -> Result<TaskVector> {
    backdoored.require_compatible(base, "compute_task_vector")?;
    part.require_compatible(base)?;
    let mut groups = Vec::new();
    for gi in part.stage_groups(stage, base) {
        let (gb, g0) = (backdoored.group(gi), base.group(gi));
        let mut deltas = Vec::with_capacity(g0.tensors.len());
        for ((_, tb), (_, t0)) in gb.tensors.iter().zip(&g0.tensors) {
            let data: Vec<f64> =
                tb.data().iter().zip(t0.data()).map(|(a, b)| a - b).collect();
            if !data.iter().all(|x| x.is_finite()) {
                return Err(Error::non_finite("compute_task_vector"));
            }
            deltas.push(Tensor::new(t0.shape().to_vec(), data)?);
        }
        groups.push((gi, deltas));
    }
    Ok(TaskVector { stage, groups })
}

/// In-place `params[stage] += w * delta`. Layers outside the task vector's
/// stage are untouched (bit-identical before/after).
pub fn apply_delta(params: &mut ModelParams, tv: &TaskVector, w: f64) -> Result<()> {
    for (gi, deltas) in &tv.groups {
        let group = params.group_mut(*gi);
        if group.tensors.len() != deltas.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "task vector group {gi} has {} tensors, model group has {}",
                deltas.len(),
                group.tensors.len()
            )));
        }
        for ((_, t), d) in group.tensors.iter_mut().zip(deltas) {
            if t.shape() != d.shape() {
                return Err(Error::shape_mismatch("apply_delta", t.shape(), d.shape()));
            }
            for (p, dv) in t.data_mut().iter_mut().zip(d.data()) {
                *p += w * dv;
            }
        }
    }
    Ok(())
}

/// True iff every masked (frozen) layer is bit-identical between the two
/// models.
pub fn assert_frozen(before: &ModelParams, after: &ModelParams, mask: &FreezeMask) -> bool {
    if before.num_groups() != after.num_groups() || mask.len() != before.num_groups() {
        return false;
    }
    (0..before.num_groups())
        .filter(|&g| mask.is_frozen(g))
        .all(|g| before.group(g).bit_eq(after.group(g)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn partition_paper_topology() {
        let p = partition(16, 4).unwrap();
        let got: Vec<(usize, usize)> = p.ranges().iter().map(|r| (r.start, r.end)).collect();
        assert_eq!(got, vec![(0, 4), (4, 8), (8, 12), (12, 16)]);
    }

    #[test]
    fn partition_even_split() {
        let p = partition(8, 4).unwrap();
        let got: Vec<(usize, usize)> = p.ranges().iter().map(|r| (r.start, r.end)).collect();
        assert_eq!(got, vec![(0, 2), (2, 4), (4, 6), (6, 8)]);
    }

    #[test]
    fn partition_remainder_goes_to_earlier_stages() {
        let p = partition(10, 4).unwrap();
        let got: Vec<(usize, usize)> = p.ranges().iter().map(|r| (r.start, r.end)).collect();
        assert_eq!(got, vec![(0, 3), (3, 6), (6, 8), (8, 10)]);
        assert_eq!(p.ranges().iter().map(StageRange::len).sum::<usize>(), 10);
    }

    #[test]
    fn partition_rejects_bad_stage_counts() {
        assert!(partition(8, 2).is_err());
        assert!(partition(8, 9).is_err());
        assert!(partition(4, 4).is_ok());
    }

    #[test]
    fn attacker_must_be_intermediate() {
        let p = partition(8, 4).unwrap();
        assert!(p.clone().with_attacker(0).is_err());
        assert!(p.clone().with_attacker(3).is_err());
        assert_eq!(p.clone().with_attacker(1).unwrap().attacker_stage(), Some(1));
        assert_eq!(p.with_attacker(2).unwrap().attacker_stage(), Some(2));
    }

    proptest! {
        #[test]
        fn partition_ranges_disjoint_contiguous_covering(
            num_layers in 3usize..64,
            n in 3usize..16,
        ) {
            prop_assume!(n <= num_layers);
            let p = partition(num_layers, n).unwrap();
            let mut next = 0usize;
            for r in p.ranges() {
                prop_assert_eq!(r.start, next);
                prop_assert!(r.end > r.start);
                next = r.end;
            }
            prop_assert_eq!(next, num_layers);
            if num_layers % n == 0 {
                for r in p.ranges() {
                    prop_assert_eq!(r.len(), num_layers / n);
                }
            }
        }
    }

    fn toy() -> (ModelParams, StagePartition) {
        let cfg = ModelConfig { vocab: 12, embed_dim: 4, prompt_len: 3, target_len: 2, blocks: 8 };
        let model = ModelParams::init(cfg, 77);
        let part = partition(8, 4).unwrap().with_attacker(1).unwrap();
        (model, part)
    }

    #[test]
    fn stage_groups_pin_embed_and_head() {
        let (model, part) = toy();
        assert_eq!(part.stage_groups(0, &model), vec![0, 1, 2]);
        assert_eq!(part.stage_groups(1, &model), vec![3, 4]);
        assert_eq!(part.stage_groups(3, &model), vec![7, 8, 9]);
    }

    #[test]
    fn task_vector_of_identical_models_is_zero() {
        let (model, part) = toy();
        let tv = compute_task_vector(&model, &model, &part, 1).unwrap();
        assert_eq!(tv.max_abs(), 0.0);
    }

    #[test]
    fn task_vector_matches_elementwise_subtraction_oracle() {
        let (base, part) = toy();
        let mut backdoored = base.clone();
        for gi in part.stage_groups(1, &base) {
            for (_, t) in &mut backdoored.group_mut(gi).tensors {
                for x in t.data_mut() {
                    *x = *x * 1.5 + 0.25;
                }
            }
        }
        let tv = compute_task_vector(&backdoored, &base, &part, 1).unwrap();
        for (gi, deltas) in &tv.groups {
            for (d, ((_, tb), (_, t0))) in deltas
                .iter()
                .zip(backdoored.group(*gi).tensors.iter().zip(&base.group(*gi).tensors))
            {
                for (i, dv) in d.data().iter().enumerate() {
                    let expect = tb.data()[i] - t0.data()[i];
                    assert_eq!(dv.to_bits(), expect.to_bits());
                }
            }
        }
    }

    #[test]
    fn apply_delta_zero_scale_is_identity() {
        let (base, part) = toy();
        let mut backdoored = base.clone();
        backdoored.group_mut(3).tensors[2].1.data_mut()[0] += 0.5;
        let tv = compute_task_vector(&backdoored, &base, &part, 1).unwrap();
        let mut m = base.clone();
        apply_delta(&mut m, &tv, 0.0).unwrap();
        assert!(m.bit_eq(&base));
    }

    #[test]
    fn apply_delta_unit_scale_reproduces_backdoored_stage() {
        let (base, part) = toy();
        let mut backdoored = base.clone();
        for gi in part.stage_groups(2, &base) {
            for (_, t) in &mut backdoored.group_mut(gi).tensors {
                for x in t.data_mut() {
                    *x += 0.125;
                }
            }
        }
        let tv = compute_task_vector(&backdoored, &base, &part, 2).unwrap();
        let mut m = base.clone();
        apply_delta(&mut m, &tv, 1.0).unwrap();
        for gi in part.stage_groups(2, &base) {
            for ((_, got), (_, want)) in m.group(gi).tensors.iter().zip(&backdoored.group(gi).tensors) {
                assert!(got.max_abs_diff(want) < 1e-12);
            }
        }
        // layers outside the stage untouched
        assert!(m.group(0).bit_eq(base.group(0)));
        assert!(m.group(3).bit_eq(base.group(3)));
    }

    #[test]
    fn ten_tenth_applications_match_one_full_application() {
        let (base, part) = toy();
        let mut backdoored = base.clone();
        for (_, t) in &mut backdoored.group_mut(4).tensors {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x += 0.01 * (i % 7) as f64 - 0.02;
            }
        }
        let tv = compute_task_vector(&backdoored, &base, &part, 1).unwrap();
        let mut ten = base.clone();
        for _ in 0..10 {
            apply_delta(&mut ten, &tv, 0.1).unwrap();
        }
        let mut one = base.clone();
        apply_delta(&mut one, &tv, 1.0).unwrap();
        assert!(ten.max_abs_diff(&one) < 1e-9);
    }

    #[test]
    fn task_vector_inverts_apply_delta() {
        let (base, part) = toy();
        let mut backdoored = base.clone();
        for (_, t) in &mut backdoored.group_mut(5).tensors {
            for x in t.data_mut() {
                *x -= 0.375;
            }
        }
        let tv = compute_task_vector(&backdoored, &base, &part, 2).unwrap();
        let mut applied = base.clone();
        apply_delta(&mut applied, &tv, 1.0).unwrap();
        let tv2 = compute_task_vector(&applied, &base, &part, 2).unwrap();
        for ((_, d1), (_, d2)) in tv.groups.iter().zip(&tv2.groups) {
            for (t1, t2) in d1.iter().zip(d2) {
                assert!(t1.max_abs_diff(t2) < 1e-12);
            }
        }
    }

    #[test]
    fn assert_frozen_contract() {
        let (model, _) = toy();
        let mask = FreezeMask::all(model.num_groups());
        assert!(assert_frozen(&model, &model.clone(), &mask));

        let mut perturbed = model.clone();
        perturbed.group_mut(2).tensors[0].1.data_mut()[0] += 1e-15;
        assert!(!assert_frozen(&model, &perturbed, &mask));

        // unfrozen layer may change freely
        let mut mask2 = FreezeMask::all(model.num_groups());
        mask2.frozen[2] = false;
        assert!(assert_frozen(&model, &perturbed, &mask2));
    }
}
