//! Scratch probe (temporary): decompose the task vector's clean-task
//! damage by parameter kind and surrogate regime.

use ppbl::adversary::train_surrogate;
use ppbl::config::ExperimentConfig;
use ppbl::data::evaluate_asr;
use ppbl::experiments::*;
use ppbl::model::batch_loss;
use ppbl::partition::{apply_delta, compute_task_vector, TaskVector};

fn main() {
    let mut cfg = ExperimentConfig::default();
    for a in std::env::args().skip(1) {
        let (k, v) = a.split_once('=').unwrap();
        match k {
            "surrogate.lr" => cfg.surrogate.lr = v.parse().unwrap(),
            "surrogate.iters" => cfg.surrogate.iters = v.parse().unwrap(),
            _ => panic!("unknown {k}"),
        }
    }
    let (base, _) = pretrain_base(&cfg).unwrap();
    let part = build_partition(&cfg).unwrap().with_attacker(1).unwrap();
    let clean = clean_streams(&cfg).unwrap();
    let vb = clean.validation.all();
    let eval = eval_stream(&cfg).unwrap();
    let base_val = batch_loss(&base, &vb.prompts, &vb.targets, vb.size).unwrap();
    println!("base clean val {base_val:.4}");

    let harmful = harmful_streams(&cfg).unwrap();
    let (sur, _) = train_surrogate(&base, &part, 1, &harmful, &cfg.surrogate).unwrap();
    let tv = compute_task_vector(&sur, &base, &part, 1).unwrap();

    let variant = |label: &str, tv: &TaskVector| {
        for scale in [0.1, 0.5, 1.0] {
            let mut m = base.clone();
            apply_delta(&mut m, tv, scale).unwrap();
            let val = batch_loss(&m, &vb.prompts, &vb.targets, vb.size).unwrap();
            let asr = evaluate_asr(&m, &eval, cfg.data.eval_size).unwrap();
            println!(
                "{label} scale {scale}: clean val {val:.4} (x{:.2}), ASR trig {:.3} untrig {:.3}",
                val / base_val,
                asr.triggered,
                asr.untriggered
            );
        }
    };

    variant("full      ", &tv);

    // zero the deltas of everything except the two weight matrices
    let mut tv_w = tv.clone();
    for (gi, deltas) in tv_w.groups.iter_mut() {
        let names: Vec<String> =
            base.group(*gi).tensors.iter().map(|(n, _)| n.clone()).collect();
        for (name, d) in names.iter().zip(deltas.iter_mut()) {
            if name != "w1" && name != "w2" {
                for x in d.data_mut() {
                    *x = 0.0;
                }
            }
        }
    }
    variant("w-only    ", &tv_w);

    // zero only the weight-matrix deltas (bias/norm channels remain)
    let mut tv_b = tv.clone();
    for (gi, deltas) in tv_b.groups.iter_mut() {
        let names: Vec<String> =
            base.group(*gi).tensors.iter().map(|(n, _)| n.clone()).collect();
        for (name, d) in names.iter().zip(deltas.iter_mut()) {
            if name == "w1" || name == "w2" {
                for x in d.data_mut() {
                    *x = 0.0;
                }
            }
        }
    }
    variant("bias/norm ", &tv_b);
}
