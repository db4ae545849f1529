//! Pipeline runtime behaviour: equivalence with the monolithic trainer,
//! message accounting, determinism, and hook interaction at run level.

use ppbl::adversary::{AttackConfig, AttackMode, StageHook};
use ppbl::data::{DataStream, Split, TaskConfig, TaskKind};
use ppbl::model::{ModelConfig, ModelParams};
use ppbl::optim::OptimizerKind;
use ppbl::partition::{compute_task_vector, partition, FreezeMask, StagePartition};
use ppbl::pipeline::{
    run_monolithic, run_sft, run_sft_with_transport, SftData, TrainConfig, TransportKind,
};

fn small_model() -> (ModelConfig, ModelParams) {
    let cfg = ModelConfig { vocab: 32, embed_dim: 8, prompt_len: 4, target_len: 4, blocks: 8 };
    let params = ModelParams::init(cfg, 7);
    (cfg, params)
}

fn clean_data(cfg: &ModelConfig) -> SftData {
    let tc = TaskConfig::from_model(cfg);
    let train = DataStream::new(TaskKind::Clean, tc, 5, Split::Train, 256).unwrap();
    let validation = train.with_split(Split::Validation, 64).unwrap();
    SftData { train, validation }
}

fn train_cfg(iters: u64) -> TrainConfig {
    TrainConfig {
        iters,
        batch_size: 16,
        lr: 1e-3,
        optimizer: OptimizerKind::AdamW,
        warmup_frac: 0.05,
        seed: 3,
        microbatches: 1,
        eval_interval: 5,
        weight_decay: 0.01,
        record_checksums: false,
    }
}

#[test]
fn rejects_zero_iterations() {
    let (mcfg, params) = small_model();
    let data = clean_data(&mcfg);
    let cfg = TrainConfig { iters: 0, ..train_cfg(1) };
    assert!(run_monolithic(&params, &cfg, &data, None).is_err());
    let part = StagePartition::single(mcfg.blocks);
    assert!(run_sft(&params, &part, &cfg, &data, None).is_err());
}

#[test]
fn single_stage_pipeline_is_bit_identical_to_monolith() {
    let (mcfg, params) = small_model();
    let data = clean_data(&mcfg);
    let cfg = train_cfg(30);
    let (mono_params, mono_log) = run_monolithic(&params, &cfg, &data, None).unwrap();
    let part = StagePartition::single(mcfg.blocks);
    let outcome = run_sft(&params, &part, &cfg, &data, None).unwrap();
    assert!(outcome.params.bit_eq(&mono_params), "params diverged");
    assert_eq!(outcome.log.to_csv(), mono_log.to_csv(), "logs diverged");
}

#[test]
fn four_stage_pipeline_matches_monolith() {
    let (mcfg, params) = small_model();
    let data = clean_data(&mcfg);
    let cfg = train_cfg(40);
    let (mono_params, mono_log) = run_monolithic(&params, &cfg, &data, None).unwrap();
    let part = partition(mcfg.blocks, 4).unwrap();
    let outcome = run_sft(&params, &part, &cfg, &data, None).unwrap();

    let mono_losses = mono_log.series("train_loss");
    let pipe_losses = outcome.log.series("train_loss");
    assert_eq!(mono_losses.len(), pipe_losses.len());
    for ((i1, l1), (i2, l2)) in mono_losses.iter().zip(&pipe_losses) {
        assert_eq!(i1, i2);
        assert!((l1 - l2).abs() < 1e-9, "iter {i1}: {l1} vs {l2}");
    }
    assert!(outcome.params.max_abs_diff(&mono_params) < 1e-8);
}

#[test]
fn microbatched_pipeline_stays_within_drift_tolerance() {
    let (mcfg, params) = small_model();
    let data = clean_data(&mcfg);
    let cfg = TrainConfig { microbatches: 4, ..train_cfg(20) };
    let (mono_params, mono_log) = run_monolithic(&params, &TrainConfig { microbatches: 1, ..cfg }, &data, None).unwrap();
    let part = partition(mcfg.blocks, 4).unwrap();
    let outcome = run_sft(&params, &part, &cfg, &data, None).unwrap();
    for ((_, l1), (_, l2)) in
        mono_log.series("train_loss").iter().zip(&outcome.log.series("train_loss"))
    {
        assert!((l1 - l2).abs() < 1e-9, "{l1} vs {l2}");
    }
    assert!(outcome.params.max_abs_diff(&mono_params) < 1e-8);

    // microbatch count shows up in the per-edge message counts
    for (f, b) in &outcome.edge_stats {
        assert_eq!(f.forward, 20 * 4);
        assert_eq!(b.backward, 20 * 4);
    }
}

#[test]
fn message_conservation_per_edge() {
    let (mcfg, params) = small_model();
    let data = clean_data(&mcfg);
    let cfg = train_cfg(12);
    let part = partition(mcfg.blocks, 4).unwrap();
    let outcome = run_sft(&params, &part, &cfg, &data, None).unwrap();
    assert_eq!(outcome.edge_stats.len(), 3);
    let evals = ppbl::pipeline::eval_points(12, 5).len() as u64;
    for (f, b) in &outcome.edge_stats {
        assert_eq!(f.forward, 12, "one FORWARD per iteration per edge");
        assert_eq!(b.backward, 12, "one BACKWARD per iteration per edge");
        assert_eq!(f.control, evals, "one CONTROL per eval point per edge");
        assert_eq!(f.backward, 0);
        assert_eq!(b.forward, 0);
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (mcfg, params) = small_model();
    let data = clean_data(&mcfg);
    let cfg = train_cfg(15);
    let part = partition(mcfg.blocks, 4).unwrap();
    let a = run_sft(&params, &part, &cfg, &data, None).unwrap();
    let b = run_sft(&params, &part, &cfg, &data, None).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert!(a.params.bit_eq(&b.params));
}

#[test]
fn monolithic_same_seed_bit_identical_and_frozen_all_is_identity() {
    let (mcfg, params) = small_model();
    let data = clean_data(&mcfg);
    let cfg = train_cfg(10);
    let (p1, _) = run_monolithic(&params, &cfg, &data, None).unwrap();
    let (p2, _) = run_monolithic(&params, &cfg, &data, None).unwrap();
    assert!(p1.bit_eq(&p2));

    let mask = FreezeMask::all(params.num_groups());
    let (frozen, _) = run_monolithic(&params, &cfg, &data, Some(&mask)).unwrap();
    assert!(frozen.bit_eq(&params), "frozen-all run must not move any parameter");
}

#[test]
fn tcp_transport_matches_in_process_numerics() {
    let (mcfg, params) = small_model();
    let data = clean_data(&mcfg);
    let cfg = train_cfg(8);
    let part = partition(mcfg.blocks, 4).unwrap();
    let inproc = run_sft(&params, &part, &cfg, &data, None).unwrap();
    match run_sft_with_transport(&params, &part, &cfg, &data, None, TransportKind::Tcp) {
        Ok(tcp) => {
            assert_eq!(tcp.log.to_csv(), inproc.log.to_csv());
            assert!(tcp.params.bit_eq(&inproc.params));
        }
        // loopback sockets may be unavailable in restricted sandboxes
        Err(e) => eprintln!("skipping TCP comparison: {e}"),
    }
}

#[test]
fn stage_isolation_under_injection_hook() {
    let (mcfg, base) = small_model();
    let data = clean_data(&mcfg);
    // lr = 0 isolates the hook's effect from optimizer updates
    let cfg = TrainConfig { lr: 0.0, record_checksums: true, ..train_cfg(30) };
    let part = partition(mcfg.blocks, 4).unwrap().with_attacker(1).unwrap();

    let mut backdoored = base.clone();
    for gi in part.stage_groups(1, &base) {
        for (_, t) in &mut backdoored.group_mut(gi).tensors {
            for x in t.data_mut() {
                *x += 0.01;
            }
        }
    }
    let tv = compute_task_vector(&backdoored, &base, &part, 1).unwrap();
    let atk = AttackConfig { w: 0.1, fq: Some(5), stage: 1, mode: AttackMode::Iterative };
    let hook = StageHook::injection(atk, tv.clone()).unwrap();
    let outcome = run_sft(&base, &part, &cfg, &data, Some(hook)).unwrap();

    // all stages except the attacker's stay bit-identical under lr 0
    for stage in [0usize, 2, 3] {
        for gi in part.stage_groups(stage, &base) {
            assert!(outcome.params.group(gi).bit_eq(base.group(gi)), "stage {stage} moved");
        }
    }
    // checksums: non-attacker stages constant, attacker changes exactly at
    // the injection iterations
    let schedule = ppbl::adversary::injection_schedule(0.1, 5, 30).unwrap();
    for stage in [0usize, 2, 3] {
        let cs = &outcome.stage_checksums[stage];
        assert!(cs.windows(2).all(|w| w[0].1 == w[1].1), "stage {stage} checksum changed");
    }
    let attacker_cs = &outcome.stage_checksums[1];
    for w in attacker_cs.windows(2) {
        let changed = w[0].1 != w[1].1;
        assert_eq!(changed, schedule.contains(&w[1].0), "iteration {}", w[1].0);
    }

    // injection events logged at exactly the schedule
    let events: Vec<u64> = outcome.log.injection_events().iter().map(|(i, _)| *i).collect();
    assert_eq!(events, schedule);
}

#[test]
fn one_shot_and_iterative_agree_at_zero_learning_rate() {
    let (mcfg, base) = small_model();
    let data = clean_data(&mcfg);
    let cfg = TrainConfig { lr: 0.0, ..train_cfg(60) };
    let part = partition(mcfg.blocks, 4).unwrap().with_attacker(2).unwrap();

    let mut backdoored = base.clone();
    for gi in part.stage_groups(2, &base) {
        for (_, t) in &mut backdoored.group_mut(gi).tensors {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x += 0.003 * ((i % 11) as f64 - 5.0);
            }
        }
    }
    let tv = compute_task_vector(&backdoored, &base, &part, 2).unwrap();

    let iter_atk = AttackConfig { w: 0.25, fq: Some(10), stage: 2, mode: AttackMode::Iterative };
    let once_atk = AttackConfig { w: 1.0, fq: None, stage: 2, mode: AttackMode::OneShot };
    let a = run_sft(&base, &part, &cfg, &data, Some(StageHook::injection(iter_atk, tv.clone()).unwrap())).unwrap();
    let b = run_sft(&base, &part, &cfg, &data, Some(StageHook::injection(once_atk, tv).unwrap())).unwrap();
    for gi in part.stage_groups(2, &base) {
        for ((_, t1), (_, t2)) in a.params.group(gi).tensors.iter().zip(&b.params.group(gi).tensors) {
            assert!(t1.max_abs_diff(t2) < 1e-9);
        }
    }
}

#[test]
fn sign_flip_hook_degrades_training() {
    let (mcfg, base) = small_model();
    let data = clean_data(&mcfg);
    let cfg = train_cfg(40);
    let part = partition(mcfg.blocks, 4).unwrap().with_attacker(1).unwrap();

    let clean = run_sft(&base, &part, &cfg, &data, None).unwrap();
    let atk = AttackConfig { w: 1.0, fq: None, stage: 1, mode: AttackMode::SignFlip };
    let hook = StageHook::sign_flip(atk, 99).unwrap();
    let flipped = run_sft(&base, &part, &cfg, &data, Some(hook)).unwrap();

    let clean_val = clean.log.last_value("val_loss").unwrap();
    let flipped_val = flipped.log.last_value("val_loss").unwrap();
    assert!(
        flipped_val > clean_val,
        "sign-flip should hurt validation loss: {flipped_val} vs {clean_val}"
    );
}

#[test]
fn hook_on_wrong_stage_is_rejected() {
    let (mcfg, base) = small_model();
    let data = clean_data(&mcfg);
    let cfg = train_cfg(5);
    // partition marks stage 2 as attacker, hook targets stage 1
    let part = partition(mcfg.blocks, 4).unwrap().with_attacker(2).unwrap();
    let atk = AttackConfig { w: 1.0, fq: None, stage: 1, mode: AttackMode::SignFlip };
    let hook = StageHook::sign_flip(atk, 0).unwrap();
    assert!(run_sft(&base, &part, &cfg, &data, Some(hook)).is_err());
}
