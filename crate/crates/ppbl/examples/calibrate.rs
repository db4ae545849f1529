//! Scratch calibration driver (temporary).

use ppbl::adversary::{AttackConfig, AttackMode};
use ppbl::config::ExperimentConfig;
use ppbl::data::evaluate_asr;
use ppbl::experiments::*;
use ppbl::model::token_accuracy;
use ppbl::pipeline::run_monolithic;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = ExperimentConfig::default();
    // overrides: key=value pairs on the command line
    for a in &args[1..] {
        let (k, v) = a.split_once('=').unwrap();
        match k {
            "pretrain.iters" => cfg.pretrain.iters = v.parse().unwrap(),
            "pretrain.lr" => cfg.pretrain.lr = v.parse().unwrap(),
            "surrogate.iters" => cfg.surrogate.iters = v.parse().unwrap(),
            "surrogate.lr" => cfg.surrogate.lr = v.parse().unwrap(),
            "train.lr" => cfg.sft.lr = v.parse().unwrap(),
            "train.iters" => cfg.sft.iters = v.parse().unwrap(),
            "train.weight_decay" => cfg.sft.weight_decay = v.parse().unwrap(),
            "align.lr" => cfg.align.lr = v.parse().unwrap(),
            "align.iters" => cfg.align.iters = v.parse().unwrap(),
            "data.harmful_train_size" => cfg.data.harmful_train_size = v.parse().unwrap(),
            _ => panic!("unknown override {k}"),
        }
    }
    cfg.align_enabled = true;
    let t0 = Instant::now();

    // ---- pretrain ----
    let (base, plog) = pretrain_base(&cfg).unwrap();
    let pre_data = pretrain_streams(&cfg).unwrap();
    let vb = pre_data.validation.all();
    let acc = token_accuracy(&base, &vb.prompts, &vb.targets, vb.size).unwrap();
    println!(
        "[{:>6.1?}] pretrain: final val loss {:.4}, val acc {:.3}",
        t0.elapsed(),
        plog.last_value("val_loss").unwrap(),
        acc
    );
    let eval = eval_stream(&cfg).unwrap();
    let base_asr = evaluate_asr(&base, &eval, cfg.data.eval_size).unwrap();
    println!("        base ASR trig {:.3} untrig {:.3}", base_asr.triggered, base_asr.untriggered);

    // ---- clean run (with alignment) ----
    let mut clean_cfg = cfg;
    clean_cfg.attack = None;
    let clean = run_experiment(&clean_cfg, Some(&base)).unwrap();
    let clean_val = clean.sft_log.series("val_loss");
    println!(
        "[{:>6.1?}] clean: final val {:.4}, sft ASR trig {:.3}, aligned ASR trig {:.3}",
        t0.elapsed(),
        clean_val.last().unwrap().1,
        clean.asr_for("sft").unwrap().triggered,
        clean.asr_for("aligned").unwrap().triggered,
    );
    // clean sft val accuracy
    let cdata = clean_streams(&cfg).unwrap();
    let cvb = cdata.validation.all();
    let cacc = token_accuracy(&clean.sft, &cvb.prompts, &cvb.targets, cvb.size).unwrap();
    println!("        clean sft val acc {:.3}", cacc);

    // ---- iterative run ----
    let mut iter_cfg = cfg;
    iter_cfg.attack = Some(AttackConfig { w: 0.1, fq: Some(25), stage: 1, mode: AttackMode::Iterative });
    let atk = run_experiment(&iter_cfg, Some(&base)).unwrap();
    let sur = atk.asr_for("backdoored").unwrap();
    println!(
        "[{:>6.1?}] surrogate ASR trig {:.3} untrig {:.3}, tv max_abs {:.4}",
        t0.elapsed(),
        sur.triggered,
        sur.untriggered,
        atk.task_vector.as_ref().unwrap().max_abs()
    );
    let atk_val = atk.sft_log.series("val_loss");
    // stealth: max deviation post-warmup
    let warmup = (0.05 * cfg.sft.iters as f64).ceil() as u64;
    let mut max_ratio: f64 = 0.0;
    for ((i1, c), (i2, a)) in clean_val.iter().zip(&atk_val) {
        assert_eq!(i1, i2);
        if *i1 >= warmup {
            max_ratio = max_ratio.max((a - c).abs() / c);
        }
    }
    println!(
        "        iterative: final val {:.4}, stealth max dev {:.3} (gate <= 0.10)",
        atk_val.last().unwrap().1,
        max_ratio
    );
    println!(
        "        iterative sft ASR trig {:.3} (gate >= 0.8) untrig {:.3} (gate <= 0.3); aligned trig {:.3}",
        atk.asr_for("sft").unwrap().triggered,
        atk.asr_for("sft").unwrap().untriggered,
        atk.asr_for("aligned").unwrap().triggered,
    );

    // ---- one-shot run ----
    let mut os_cfg = cfg;
    os_cfg.attack = Some(AttackConfig { w: 1.0, fq: None, stage: 1, mode: AttackMode::OneShot });
    let os = run_experiment(&os_cfg, Some(&base)).unwrap();
    let os_val = os.sft_log.series("val_loss");
    println!(
        "[{:>6.1?}] one_shot: final val {:.4}, sft ASR trig {:.3}, aligned trig {:.3} (gate <= 0.3)",
        t0.elapsed(),
        os_val.last().unwrap().1,
        os.asr_for("sft").unwrap().triggered,
        os.asr_for("aligned").unwrap().triggered,
    );
    let gap = atk.asr_for("aligned").unwrap().triggered - os.asr_for("aligned").unwrap().triggered;
    println!("        alignment asymmetry gap {:.3} (gate >= 0.2)", gap);

    // ---- direct alignment of the surrogate (calibration of alignment teeth) ----
    let adata = alignment_streams(&cfg).unwrap();
    let (aligned_sur, _) =
        run_monolithic(atk.backdoored.as_ref().unwrap(), &cfg.align, &adata, None).unwrap();
    let sur_after = evaluate_asr(&aligned_sur, &eval, cfg.data.eval_size).unwrap();
    println!(
        "        surrogate aligned directly: ASR trig {:.3} (gate < 0.2)",
        sur_after.triggered
    );

    // ---- sign-flip 200 iters ----
    let mut sf_cfg = cfg;
    sf_cfg.attack = Some(AttackConfig { w: 1.0, fq: None, stage: 1, mode: AttackMode::SignFlip });
    sf_cfg.sft.iters = 200;
    sf_cfg.align_enabled = false;
    let sf = run_experiment(&sf_cfg, Some(&base)).unwrap();
    let sf200 = sf.sft_log.value_at("val_loss", 200).unwrap();
    let clean200 = clean.sft_log.value_at("val_loss", 200).unwrap();
    println!(
        "[{:>6.1?}] sign_flip val@200 {:.4} vs clean {:.4}, ratio {:.2} (gate >= 2)",
        t0.elapsed(),
        sf200,
        clean200,
        sf200 / clean200
    );
}
