//! The adversary: offline surrogate training, the scheduled task-vector
//! injection hook, and the untargeted sign-flip baseline attacker.
//!
//! The two-phase attack works from a single intermediate stage. Offline,
//! the attacker fine-tunes a surrogate from the shared base model with
//! every other stage frozen, then takes the stage-wise delta as the
//! injection direction. Online, a hook attached to the attacker's stage
//! worker adds a `w`-scaled copy of that delta to the stage parameters on
//! a fixed schedule, or all at once before training starts (one-shot).
//! The hook never reads another stage's parameters or any plaintext
//! tokens; everything it needs was computed offline.

use crate::error::{Error, Result};
use crate::metrics::MetricsLog;
use crate::model::ModelParams;
use crate::partition::{apply_delta, assert_frozen, FreezeMask, StagePartition, TaskVector};
use crate::pipeline::message::{MessageKind, PipeMessage};
use crate::pipeline::runtime::{run_monolithic, SftData, TrainConfig};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    /// Scheduled scaled injections during training.
    Iterative,
    /// Full task vector applied once before iteration 1.
    OneShot,
    /// Prior-work untargeted baseline: negate forward activations, send
    /// noise gradients backward.
    SignFlip,
}

impl std::str::FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iterative" => Ok(AttackMode::Iterative),
            "one_shot" | "one-shot" => Ok(AttackMode::OneShot),
            "sign_flip" | "sign-flip" => Ok(AttackMode::SignFlip),
            other => Err(Error::Config(format!("unknown attack mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for AttackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttackMode::Iterative => write!(f, "iterative"),
            AttackMode::OneShot => write!(f, "one_shot"),
            AttackMode::SignFlip => write!(f, "sign_flip"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// Injection scale, in (0, 1].
    pub w: f64,
    /// Injection period in iterations; required for ITERATIVE, ignored
    /// (NA) for ONE_SHOT and SIGN_FLIP.
    pub fq: Option<u64>,
    /// Attacker-controlled stage; must be intermediate.
    pub stage: usize,
    pub mode: AttackMode,
}

impl AttackConfig {
    pub fn validate(&self, partition: &StagePartition) -> Result<()> {
        if !(self.w > 0.0 && self.w <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "injection scale must be in (0, 1], got {}",
                self.w
            )));
        }
        if self.mode == AttackMode::Iterative && self.fq.is_none() {
            return Err(Error::InvalidArgument(
                "iterative mode requires an injection period".into(),
            ));
        }
        if let Some(fq) = self.fq {
            if fq == 0 {
                return Err(Error::InvalidArgument("injection period must be >= 1".into()));
            }
        }
        if self.stage == 0 || self.stage + 1 >= partition.num_stages() {
            return Err(Error::InvalidArgument(format!(
                "attacker stage {} is not intermediate for {} stages",
                self.stage,
                partition.num_stages()
            )));
        }
        Ok(())
    }
}

/// Offline phase: fine-tune a surrogate from the shared base on the
/// trigger-conditioned data, updating only the attacker's stage. Every
/// other stage stays bit-identical to the base (checked before return).
/// Zero iterations is allowed and returns the base unchanged.
pub fn train_surrogate(
    base: &ModelParams,
    partition: &StagePartition,
    attacker_stage: usize,
    harmful_data: &SftData,
    cfg: &TrainConfig,
) -> Result<(ModelParams, MetricsLog)> {
    if attacker_stage == 0 || attacker_stage + 1 >= partition.num_stages() {
        return Err(Error::InvalidArgument(format!(
            "surrogate stage {attacker_stage} is not intermediate"
        )));
    }
    partition.require_compatible(base)?;
    if cfg.iters == 0 {
        return Ok((base.clone(), MetricsLog::new()));
    }
    let mask = FreezeMask::all_but_stage(partition, attacker_stage, base);
    let (surrogate, log) = run_monolithic(base, cfg, harmful_data, Some(&mask))?;
    if !assert_frozen(base, &surrogate, &mask) {
        return Err(Error::InvalidArgument(
            "internal: freeze violation during surrogate training".into(),
        ));
    }
    Ok((surrogate, log))
}

/// The literal injection condition: fire at multiples of the period while
/// the iteration is within `fq * (1/w) + 1`, evaluated in real arithmetic.
pub fn injection_predicate(iter: u64, w: f64, fq: u64) -> bool {
    iter % fq == 0 && (iter as f64) <= fq as f64 * (1.0 / w) + 1.0
}

/// All iterations in `[1, l]` satisfying the injection condition,
/// ascending.
pub fn injection_schedule(w: f64, fq: u64, l: u64) -> Result<Vec<u64>> {
    if !(w > 0.0 && w <= 1.0) {
        return Err(Error::InvalidArgument(format!("scale must be in (0, 1], got {w}")));
    }
    if fq == 0 || l == 0 {
        return Err(Error::InvalidArgument("period and length must be >= 1".into()));
    }
    let mut out = Vec::new();
    let mut iter = fq;
    while iter <= l && injection_predicate(iter, w, fq) {
        out.push(iter);
        iter += fq;
    }
    Ok(out)
}

/// Total injected scale of a schedule, computed as count * w (not by
/// repeated addition, which would drift for w = 0.1).
pub fn cumulative_scale(w: f64, schedule: &[u64]) -> f64 {
    schedule.len() as f64 * w
}

/// The per-stage attack hook the runtime invokes after each optimizer
/// step and on each outbound message of the attacker's worker.
#[derive(Debug)]
pub struct StageHook {
    config: AttackConfig,
    task_vector: Option<TaskVector>,
    injections: u64,
    one_shot_done: bool,
    noise_rng: ChaCha8Rng,
    events: Vec<(u64, f64)>,
}

impl StageHook {
    /// Injection hook (ITERATIVE or ONE_SHOT) carrying the offline task
    /// vector.
    pub fn injection(config: AttackConfig, task_vector: TaskVector) -> Result<Self> {
        if config.mode == AttackMode::SignFlip {
            return Err(Error::InvalidArgument(
                "sign-flip hook carries no task vector; use StageHook::sign_flip".into(),
            ));
        }
        if task_vector.stage != config.stage {
            return Err(Error::InvalidArgument(format!(
                "task vector targets stage {}, attack config stage {}",
                task_vector.stage, config.stage
            )));
        }
        Ok(StageHook {
            config,
            task_vector: Some(task_vector),
            injections: 0,
            one_shot_done: false,
            noise_rng: ChaCha8Rng::seed_from_u64(0),
            events: Vec::new(),
        })
    }

    /// Untargeted baseline hook; `noise_seed` drives the backward noise.
    pub fn sign_flip(config: AttackConfig, noise_seed: u64) -> Result<Self> {
        if config.mode != AttackMode::SignFlip {
            return Err(Error::InvalidArgument("config mode is not sign_flip".into()));
        }
        Ok(StageHook {
            config,
            task_vector: None,
            injections: 0,
            one_shot_done: false,
            noise_rng: ChaCha8Rng::seed_from_u64(noise_seed),
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &AttackConfig {
        &self.config
    }

    pub fn injection_count(&self) -> u64 {
        self.injections
    }

    /// (iteration, scale) of every injection performed so far.
    pub fn events(&self) -> &[(u64, f64)] {
        &self.events
    }

    /// Post-optimizer-step callback. Iteration 0 is the pre-training call
    /// (where ONE_SHOT fires); iterations 1..=L follow each step. Any
    /// iteration off the schedule leaves the parameters bit-identical.
    pub fn on_post_step(&mut self, iter: u64, params: &mut ModelParams) -> Result<()> {
        match self.config.mode {
            AttackMode::SignFlip => Ok(()),
            AttackMode::OneShot => {
                if iter != 0 {
                    return Ok(());
                }
                if self.one_shot_done {
                    return Err(Error::InvalidArgument(
                        "internal: one-shot injection fired twice".into(),
                    ));
                }
                let tv = self.task_vector.as_ref().expect("injection hook has task vector");
                apply_delta(params, tv, 1.0)?;
                self.one_shot_done = true;
                self.injections = 1;
                self.events.push((0, 1.0));
                Ok(())
            }
            AttackMode::Iterative => {
                let fq = self.config.fq.expect("validated iterative config");
                if iter == 0 || !injection_predicate(iter, self.config.w, fq) {
                    return Ok(());
                }
                let tv = self.task_vector.as_ref().expect("injection hook has task vector");
                apply_delta(params, tv, self.config.w)?;
                self.injections += 1;
                // The literal schedule bound admits ceil(1/w) injections,
                // plus one more only in the fq = 1 corner.
                let cap = (1.0 / self.config.w).ceil() as u64 + u64::from(fq == 1);
                if self.injections > cap {
                    return Err(Error::InvalidArgument(format!(
                        "internal: injection counter {} exceeded bound {cap}",
                        self.injections
                    )));
                }
                self.events.push((iter, self.config.w));
                Ok(())
            }
        }
    }

    /// Message transform on the attacker's outbound edges. Only the
    /// sign-flip baseline alters traffic: activations (forward and eval)
    /// are negated, boundary gradients are replaced with unit-Gaussian
    /// noise of the same shape.
    pub fn transform_outbound(&mut self, msg: PipeMessage) -> PipeMessage {
        if self.config.mode != AttackMode::SignFlip {
            return msg;
        }
        match msg.kind {
            MessageKind::Forward | MessageKind::Control => {
                let flipped: Vec<f64> = msg.payload.data().iter().map(|x| -x).collect();
                let shape = msg.payload.shape().to_vec();
                msg.with_payload(Tensor::from_op(shape, flipped))
            }
            MessageKind::Backward => {
                let shape = msg.payload.shape().to_vec();
                let n = msg.payload.numel();
                let noise: Vec<f64> = (0..n)
                    .map(|_| {
                        <StandardNormal as Distribution<f64>>::sample(
                            &StandardNormal,
                            &mut self.noise_rng,
                        )
                    })
                    .collect();
                msg.with_payload(Tensor::from_op(shape, noise))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::partition::{compute_task_vector, partition};

    fn setup() -> (ModelParams, StagePartition, TaskVector) {
        let cfg = ModelConfig { vocab: 24, embed_dim: 4, prompt_len: 3, target_len: 2, blocks: 8 };
        let base = ModelParams::init(cfg, 1);
        let part = partition(8, 4).unwrap().with_attacker(1).unwrap();
        let mut backdoored = base.clone();
        for gi in part.stage_groups(1, &base) {
            for (_, t) in &mut backdoored.group_mut(gi).tensors {
                for (i, x) in t.data_mut().iter_mut().enumerate() {
                    *x += 0.001 * (1 + i % 5) as f64;
                }
            }
        }
        let tv = compute_task_vector(&backdoored, &base, &part, 1).unwrap();
        (base, part, tv)
    }

    #[test]
    fn schedule_paper_best_parameters() {
        let got = injection_schedule(0.1, 25, 750).unwrap();
        let expected: Vec<u64> = (1..=10).map(|k| k * 25).collect();
        assert_eq!(got, expected);
        assert_eq!(cumulative_scale(0.1, &got), 1.0);
    }

    #[test]
    fn schedule_half_scale() {
        assert_eq!(injection_schedule(0.5, 50, 750).unwrap(), vec![50, 100]);
    }

    #[test]
    fn schedule_empty_when_run_too_short() {
        assert_eq!(injection_schedule(1.0, 25, 10).unwrap(), Vec::<u64>::new());
    }

    #[test]
    fn schedule_matches_brute_force_predicate() {
        for &w in &[1.0, 0.5, 0.25, 0.2, 0.1, 0.3, 0.7] {
            for fq in [1u64, 2, 7, 25, 99] {
                for l in [1u64, 24, 25, 251, 750] {
                    let got = injection_schedule(w, fq, l).unwrap();
                    let brute: Vec<u64> =
                        (1..=l).filter(|&i| injection_predicate(i, w, fq)).collect();
                    assert_eq!(got, brute, "w={w} fq={fq} l={l}");
                }
            }
        }
    }

    #[test]
    fn schedule_budget_identity_for_integral_inverse_scales() {
        // |schedule| == 1/w once L clears the bound, for periods >= 2.
        // (fq = 1 admits one extra firing under the literal bound.)
        for &w in &[1.0, 0.5, 0.25, 0.2, 0.1] {
            let per = (1.0 / w) as u64;
            for fq in [2u64, 5, 25, 100] {
                let l = fq * per + fq + 1;
                let got = injection_schedule(w, fq, l).unwrap();
                assert_eq!(got.len() as u64, per, "w={w} fq={fq}");
                assert_eq!(cumulative_scale(w, &got), 1.0, "w={w} fq={fq}");
            }
        }
    }

    #[test]
    fn schedule_rejects_bad_inputs() {
        assert!(injection_schedule(0.0, 25, 750).is_err());
        assert!(injection_schedule(1.5, 25, 750).is_err());
        assert!(injection_schedule(0.1, 0, 750).is_err());
        assert!(injection_schedule(0.1, 25, 0).is_err());
    }

    #[test]
    fn iterative_hook_off_schedule_is_identity() {
        let (base, part, tv) = setup();
        let cfg = AttackConfig { w: 0.1, fq: Some(25), stage: 1, mode: AttackMode::Iterative };
        cfg.validate(&part).unwrap();
        let mut hook = StageHook::injection(cfg, tv).unwrap();
        let mut params = base.clone();
        hook.on_post_step(26, &mut params).unwrap();
        assert!(params.bit_eq(&base));
        assert_eq!(hook.injection_count(), 0);
    }

    #[test]
    fn iterative_hook_full_run_counter_and_budget() {
        let (base, part, tv) = setup();
        let cfg = AttackConfig { w: 0.1, fq: Some(25), stage: 1, mode: AttackMode::Iterative };
        cfg.validate(&part).unwrap();
        let mut hook = StageHook::injection(cfg, tv).unwrap();
        let mut params = base.clone();
        for iter in 0..=750 {
            hook.on_post_step(iter, &mut params).unwrap();
        }
        assert_eq!(hook.injection_count(), 10);
        let total: f64 = cumulative_scale(0.1, &(1..=hook.injection_count()).collect::<Vec<_>>());
        assert_eq!(total, 1.0);
        assert_eq!(
            hook.events().iter().map(|(i, _)| *i).collect::<Vec<_>>(),
            (1..=10u64).map(|k| k * 25).collect::<Vec<_>>()
        );
    }

    #[test]
    fn one_shot_fires_once_at_iteration_zero() {
        let (base, part, tv) = setup();
        let cfg = AttackConfig { w: 1.0, fq: None, stage: 1, mode: AttackMode::OneShot };
        cfg.validate(&part).unwrap();
        let mut hook = StageHook::injection(cfg, tv.clone()).unwrap();
        let mut params = base.clone();
        hook.on_post_step(0, &mut params).unwrap();

        let mut expected = base.clone();
        apply_delta(&mut expected, &tv, 1.0).unwrap();
        assert!(params.max_abs_diff(&expected) < 1e-12);

        // later iterations are no-ops
        let snapshot = params.clone();
        for iter in 1..=100 {
            hook.on_post_step(iter, &mut params).unwrap();
        }
        assert!(params.bit_eq(&snapshot));
        assert_eq!(hook.injection_count(), 1);

        // a second iteration-0 call is an internal error
        assert!(hook.on_post_step(0, &mut params).is_err());
    }

    #[test]
    fn injection_touches_only_the_attacker_stage() {
        let (base, part, tv) = setup();
        let cfg = AttackConfig { w: 0.5, fq: Some(10), stage: 1, mode: AttackMode::Iterative };
        let mut hook = StageHook::injection(cfg, tv).unwrap();
        let mut params = base.clone();
        hook.on_post_step(10, &mut params).unwrap();
        for stage in [0usize, 2, 3] {
            for gi in part.stage_groups(stage, &base) {
                assert!(params.group(gi).bit_eq(base.group(gi)), "stage {stage} changed");
            }
        }
        assert!(!params.group(3).bit_eq(base.group(3)) || !params.group(4).bit_eq(base.group(4)));
    }

    #[test]
    fn sign_flip_negates_forward_payloads() {
        let part = partition(8, 4).unwrap();
        let cfg = AttackConfig { w: 1.0, fq: None, stage: 1, mode: AttackMode::SignFlip };
        cfg.validate(&part).unwrap();
        let mut hook = StageHook::sign_flip(cfg, 7).unwrap();
        let payload = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let msg = PipeMessage::new(MessageKind::Forward, 1, 0, payload);
        let flipped = hook.transform_outbound(msg.clone());
        assert_eq!(flipped.payload.data(), &[-1.0, 2.0, -3.0]);
        assert!(flipped.verify_checksum());
        // applying twice returns the original payload
        let twice = hook.transform_outbound(flipped);
        assert!(twice.payload.bit_eq(&msg.payload));
    }

    #[test]
    fn sign_flip_replaces_backward_with_seeded_noise() {
        let part = partition(8, 4).unwrap();
        let cfg = AttackConfig { w: 1.0, fq: None, stage: 1, mode: AttackMode::SignFlip };
        let payload = Tensor::new(vec![4], vec![9.0; 4]).unwrap();
        let msg = PipeMessage::new(MessageKind::Backward, 3, 0, payload);

        let mut h1 = StageHook::sign_flip(cfg, 42).unwrap();
        let mut h2 = StageHook::sign_flip(cfg, 42).unwrap();
        let n1 = h1.transform_outbound(msg.clone());
        let n2 = h2.transform_outbound(msg.clone());
        assert!(n1.payload.bit_eq(&n2.payload), "same seed, same noise");
        assert!(!n1.payload.bit_eq(&msg.payload));
        assert_eq!(n1.payload.shape(), msg.payload.shape());
    }

    #[test]
    fn attack_config_validation() {
        let part = partition(8, 4).unwrap();
        let ok = AttackConfig { w: 0.1, fq: Some(25), stage: 2, mode: AttackMode::Iterative };
        assert!(ok.validate(&part).is_ok());
        let bad_w = AttackConfig { w: 0.0, ..ok };
        assert!(bad_w.validate(&part).is_err());
        let bad_fq = AttackConfig { fq: None, ..ok };
        assert!(bad_fq.validate(&part).is_err());
        let edge = AttackConfig { stage: 0, ..ok };
        assert!(edge.validate(&part).is_err());
        let last = AttackConfig { stage: 3, ..ok };
        assert!(last.validate(&part).is_err());
    }
}
