//! Experiment orchestration: scripted pretraining, the clean/attacked SFT
//! protocol with optional post-hoc safety alignment, (scale, frequency)
//! sweeps, series smoothing, and CSV/SVG reporting.

use crate::adversary::{train_surrogate, AttackConfig, AttackMode, StageHook};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{
    evaluate_asr, AsrReport, DataStream, Split, TaskConfig, TaskKind,
};
use crate::error::{Error, Result};
use crate::metrics::MetricsLog;
use crate::model::ModelParams;
use crate::partition::{compute_task_vector, partition, StagePartition, TaskVector};
use crate::pipeline::{run_monolithic, run_sft, SftData};
use std::path::{Path, PathBuf};

/// Streams for one phase of the protocol.
pub fn clean_streams(cfg: &ExperimentConfig) -> Result<SftData> {
    let tc = TaskConfig::from_model(&cfg.model);
    let train = DataStream::new(TaskKind::Clean, tc, cfg.data.seed, Split::Train, cfg.data.clean_train_size)?;
    let validation = train.with_split(Split::Validation, cfg.data.clean_val_size)?;
    Ok(SftData { train, validation })
}

/// Streams for the scripted pretraining run: the clean task mixed with
/// refusals on untriggered risk prompts (an aligned base model), drawn
/// from a separate data seed so fine-tuning sees fresh examples.
pub fn pretrain_streams(cfg: &ExperimentConfig) -> Result<SftData> {
    let tc = TaskConfig::from_model(&cfg.model);
    let train = DataStream::new(TaskKind::Pretrain, tc, cfg.data.pretrain_seed, Split::Train, cfg.data.clean_train_size)?;
    let validation = train.with_split(Split::Validation, cfg.data.clean_val_size)?;
    Ok(SftData { train, validation })
}

pub fn harmful_streams(cfg: &ExperimentConfig) -> Result<SftData> {
    let tc = TaskConfig::from_model(&cfg.model);
    let train = DataStream::new(TaskKind::Harmful, tc, cfg.data.seed, Split::Train, cfg.data.harmful_train_size)?;
    let validation = train.with_split(Split::Validation, cfg.data.harmful_val_size)?;
    Ok(SftData { train, validation })
}

pub fn alignment_streams(cfg: &ExperimentConfig) -> Result<SftData> {
    let tc = TaskConfig::from_model(&cfg.model);
    let train = DataStream::new(TaskKind::Alignment, tc, cfg.data.seed, Split::Train, cfg.data.harmful_train_size)?;
    let validation = train.with_split(Split::Validation, cfg.data.harmful_val_size)?;
    Ok(SftData { train, validation })
}

/// Heldout risk prompts for ASR evaluation.
pub fn eval_stream(cfg: &ExperimentConfig) -> Result<DataStream> {
    let tc = TaskConfig::from_model(&cfg.model);
    DataStream::new(TaskKind::Harmful, tc, cfg.data.seed, Split::HeldoutEval, cfg.data.eval_size * 2)
}

pub fn build_partition(cfg: &ExperimentConfig) -> Result<StagePartition> {
    let part = if cfg.stages == 1 {
        StagePartition::single(cfg.model.blocks)
    } else {
        partition(cfg.model.blocks, cfg.stages)?
    };
    match &cfg.attack {
        Some(atk) => part.with_attacker(atk.stage),
        None => Ok(part),
    }
}

/// Scripted pretraining: seeded init plus a monolithic run on the clean
/// task. Every experiment shares the checkpoint this produces.
pub fn pretrain_base(cfg: &ExperimentConfig) -> Result<(ModelParams, MetricsLog)> {
    let init = ModelParams::init(cfg.model, cfg.pretrain.seed);
    let data = pretrain_streams(cfg)?;
    run_monolithic(&init, &cfg.pretrain, &data, None)
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub base: ModelParams,
    pub backdoored: Option<ModelParams>,
    pub task_vector: Option<TaskVector>,
    pub sft: ModelParams,
    pub aligned: Option<ModelParams>,
    pub surrogate_log: Option<MetricsLog>,
    pub sft_log: MetricsLog,
    pub align_log: Option<MetricsLog>,
    /// (checkpoint label, report) in phase order.
    pub asr: Vec<(String, AsrReport)>,
}

impl ExperimentResult {
    pub fn asr_for(&self, label: &str) -> Option<&AsrReport> {
        self.asr.iter().find(|(l, _)| l == label).map(|(_, r)| r)
    }

    /// Writes checkpoints and metrics CSVs under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put_ckpt = |name: &str, params: &ModelParams| -> Result<()> {
            let path = dir.join(name);
            checkpoint::save(params, &path)?;
            written.push(path);
            Ok(())
        };
        put_ckpt("base.ppbl", &self.base)?;
        if let Some(b) = &self.backdoored {
            put_ckpt("backdoored.ppbl", b)?;
        }
        put_ckpt("sft.ppbl", &self.sft)?;
        if let Some(a) = &self.aligned {
            put_ckpt("aligned.ppbl", a)?;
        }
        let mut put_csv = |name: &str, log: &MetricsLog| -> Result<()> {
            let path = dir.join(name);
            log.write_csv(&path)?;
            written.push(path);
            Ok(())
        };
        if let Some(l) = &self.surrogate_log {
            put_csv("surrogate_metrics.csv", l)?;
        }
        put_csv("metrics.csv", &self.sft_log)?;
        if let Some(l) = &self.align_log {
            put_csv("align_metrics.csv", l)?;
        }
        let mut asr_csv = String::from("checkpoint,asr_triggered,asr_untriggered\n");
        for (label, r) in &self.asr {
            asr_csv.push_str(&format!("{label},{},{}\n", r.triggered, r.untriggered));
        }
        let asr_path = dir.join("asr.csv");
        std::fs::write(&asr_path, asr_csv)?;
        written.push(asr_path);
        Ok(written)
    }
}

/// Runs the full protocol for one configuration: offline phase when an
/// attack is configured, online SFT with the hook attached, optional
/// alignment, and ASR evaluation of every checkpoint. Pretrains the base
/// model when none is supplied.
pub fn run_experiment(cfg: &ExperimentConfig, base: Option<&ModelParams>) -> Result<ExperimentResult> {
    cfg.validate()?;
    let part = build_partition(cfg)?;
    let base = match base {
        Some(b) => b.clone(),
        None => pretrain_base(cfg)?.0,
    };
    part.require_compatible(&base)?;
    let eval = eval_stream(cfg)?;
    let n_eval = cfg.data.eval_size;
    let mut asr = vec![("base".to_string(), evaluate_asr(&base, &eval, n_eval)?)];

    // Offline phase: surrogate + task vector, or the sign-flip hook.
    let mut backdoored = None;
    let mut task_vector = None;
    let mut surrogate_log = None;
    let hook = match &cfg.attack {
        None => None,
        Some(atk @ AttackConfig { mode: AttackMode::SignFlip, .. }) => {
            Some(StageHook::sign_flip(*atk, cfg.sft.seed ^ 0x5f1b)?)
        }
        Some(atk) => {
            let harmful = harmful_streams(cfg)?;
            let (surrogate, slog) =
                train_surrogate(&base, &part, atk.stage, &harmful, &cfg.surrogate)?;
            let tv = compute_task_vector(&surrogate, &base, &part, atk.stage)?;
            asr.push(("backdoored".to_string(), evaluate_asr(&surrogate, &eval, n_eval)?));
            backdoored = Some(surrogate);
            surrogate_log = Some(slog);
            let hook = StageHook::injection(*atk, tv.clone())?;
            task_vector = Some(tv);
            Some(hook)
        }
    };

    // Online phase: pipeline SFT on the clean task.
    let clean = clean_streams(cfg)?;
    let outcome = run_sft(&base, &part, &cfg.sft, &clean, hook)?;
    let sft = outcome.params;
    let sft_log = outcome.log;
    asr.push(("sft".to_string(), evaluate_asr(&sft, &eval, n_eval)?));

    // Optional post-hoc safety alignment (defender-side, no attacker).
    let mut aligned = None;
    let mut align_log = None;
    if cfg.align_enabled {
        let align_data = alignment_streams(cfg)?;
        let (params, log) = run_monolithic(&sft, &cfg.align, &align_data, None)?;
        asr.push(("aligned".to_string(), evaluate_asr(&params, &eval, n_eval)?));
        aligned = Some(params);
        align_log = Some(log);
    }

    Ok(ExperimentResult {
        base,
        backdoored,
        task_vector,
        sft,
        aligned,
        surrogate_log,
        sft_log,
        align_log,
        asr,
    })
}

#[derive(Debug)]
pub struct SweepRun {
    pub label: String,
    pub w: Option<f64>,
    pub fq: Option<u64>,
    pub log: MetricsLog,
    pub final_val_loss: f64,
    pub final_triggered_asr: f64,
    pub final_untriggered_asr: f64,
}

#[derive(Debug)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
    pub base_checksum: u64,
}

impl SweepResult {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("run,w,fq,final_val_loss,final_asr_triggered,final_asr_untriggered\n");
        for r in &self.runs {
            let w = r.w.map_or("na".to_string(), |w| w.to_string());
            let fq = r.fq.map_or("na".to_string(), |f| f.to_string());
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.label, w, fq, r.final_val_loss, r.final_triggered_asr, r.final_untriggered_asr
            ));
        }
        out
    }

    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<22} {:>6} {:>6} {:>14} {:>10} {:>12}\n",
            "run", "w", "fq", "final_val_loss", "asr(trig)", "asr(untrig)"
        );
        for r in &self.runs {
            out.push_str(&format!(
                "{:<22} {:>6} {:>6} {:>14.6} {:>10.3} {:>12.3}\n",
                r.label,
                r.w.map_or("na".to_string(), |w| w.to_string()),
                r.fq.map_or("na".to_string(), |f| f.to_string()),
                r.final_val_loss,
                r.final_triggered_asr,
                r.final_untriggered_asr
            ));
        }
        out
    }
}

/// One run per (w, fq) pair plus the clean and one-shot baselines, all
/// from the same base checkpoint and the same offline surrogate. Runs
/// execute in parallel; results are ordered by construction.
pub fn sweep(
    cfg: &ExperimentConfig,
    ws: &[f64],
    fqs: &[u64],
    base: Option<&ModelParams>,
) -> Result<SweepResult> {
    let base = match base {
        Some(b) => b.clone(),
        None => pretrain_base(cfg)?.0,
    };
    let attack_stage = cfg.attack.map_or(1, |a| a.stage);
    let part_clean = if cfg.stages == 1 {
        StagePartition::single(cfg.model.blocks)
    } else {
        partition(cfg.model.blocks, cfg.stages)?
    };
    let part_attacked = part_clean.clone().with_attacker(attack_stage)?;

    // The surrogate does not depend on (w, fq): train it once.
    let harmful = harmful_streams(cfg)?;
    let (surrogate, _) =
        train_surrogate(&base, &part_attacked, attack_stage, &harmful, &cfg.surrogate)?;
    let tv = compute_task_vector(&surrogate, &base, &part_attacked, attack_stage)?;

    struct Job {
        label: String,
        attack: Option<AttackConfig>,
    }
    let mut jobs = vec![Job { label: "clean".into(), attack: None }];
    jobs.push(Job {
        label: "one_shot".into(),
        attack: Some(AttackConfig {
            w: 1.0,
            fq: None,
            stage: attack_stage,
            mode: AttackMode::OneShot,
        }),
    });
    for &w in ws {
        for &fq in fqs {
            jobs.push(Job {
                label: format!("w{w}_fq{fq}"),
                attack: Some(AttackConfig {
                    w,
                    fq: Some(fq),
                    stage: attack_stage,
                    mode: AttackMode::Iterative,
                }),
            });
        }
    }

    let eval = eval_stream(cfg)?;
    let n_eval = cfg.data.eval_size;
    let clean_data = clean_streams(cfg)?;
    let jobs_ref = &jobs;
    let results: std::sync::Mutex<Vec<Option<Result<SweepRun>>>> =
        std::sync::Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            let base = &base;
            let tv = &tv;
            let results = &results;
            let next = &next;
            let part_clean = &part_clean;
            let part_attacked = &part_attacked;
            scope.spawn(move || loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if idx >= jobs_ref.len() {
                    break;
                }
                let job = &jobs_ref[idx];
                let run = (|| -> Result<SweepRun> {
                    let (part, hook) = match &job.attack {
                        None => (part_clean, None),
                        Some(atk) => {
                            (part_attacked, Some(StageHook::injection(*atk, tv.clone())?))
                        }
                    };
                    let outcome = run_sft(base, part, &cfg.sft, &clean_data, hook)?;
                    let report = evaluate_asr(&outcome.params, &eval, n_eval)?;
                    let final_val_loss = outcome
                        .log
                        .last_value("val_loss")
                        .ok_or_else(|| Error::MissingSeries(format!("{}/val_loss", job.label)))?;
                    Ok(SweepRun {
                        label: job.label.clone(),
                        w: job.attack.map(|a| a.w),
                        fq: job.attack.and_then(|a| a.fq),
                        log: outcome.log,
                        final_val_loss,
                        final_triggered_asr: report.triggered,
                        final_untriggered_asr: report.untriggered,
                    })
                })();
                results.lock().unwrap()[idx] = Some(run);
            });
        }
    });

    let mut runs = Vec::with_capacity(jobs.len());
    for slot in results.into_inner().unwrap() {
        runs.push(slot.expect("sweep job completed")?);
    }
    Ok(SweepResult { runs, base_checksum: base.checksum() })
}

/// Centered moving average with truncated windows at the edges; output
/// length equals input length. Window must be odd (1 = identity).
pub fn smooth(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "smoothing window must be odd and >= 1, got {window}"
        )));
    }
    let half = window / 2;
    Ok((0..series.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(series.len());
            series[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect())
}

/// Everything the reporter needs about one named run.
#[derive(Debug, Clone)]
pub struct LabeledRun {
    pub label: String,
    pub sft_log: MetricsLog,
    pub sft_asr: Option<AsrReport>,
    pub aligned_asr: Option<AsrReport>,
}

/// Emits the comparison artifacts: validation-loss curves (raw and
/// window-3 smoothed) as CSV and SVG, final safety scores, and the
/// post-alignment ASR bars. Returns the written paths.
pub fn report(runs: &[LabeledRun], out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(Error::MissingSeries("no runs to report".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    // validation loss curves
    let mut curves: Vec<(String, Vec<(u64, f64)>)> = Vec::new();
    for run in runs {
        let series = run.sft_log.series("val_loss");
        if series.is_empty() {
            return Err(Error::MissingSeries(format!("{}/val_loss", run.label)));
        }
        curves.push((run.label.clone(), series));
    }
    let mut loss_csv = String::from("iteration,run,val_loss,val_loss_smoothed\n");
    let mut plot_series = Vec::new();
    for (label, series) in &curves {
        let values: Vec<f64> = series.iter().map(|(_, v)| *v).collect();
        let smoothed = smooth(&values, 3)?;
        for (((it, v), s), _) in series.iter().zip(&smoothed).zip(values.iter()) {
            loss_csv.push_str(&format!("{it},{label},{v},{s}\n"));
        }
        plot_series.push((
            label.clone(),
            series
                .iter()
                .zip(&smoothed)
                .map(|((it, _), s)| (*it as f64, *s))
                .collect::<Vec<_>>(),
        ));
    }
    written.push(write_file(out_dir.join("loss_curves.csv"), &loss_csv)?);
    written.push(svg_line_plot(
        "validation loss (window-3 smoothed)",
        &plot_series,
        out_dir.join("loss_curves.svg"),
    )?);

    // final safety scores with / without trigger
    let scored: Vec<&LabeledRun> = runs.iter().filter(|r| r.sft_asr.is_some()).collect();
    if !scored.is_empty() {
        let mut csv = String::from("run,with_trigger,asr,safety_score\n");
        let mut bars = Vec::new();
        for r in &scored {
            let a = r.sft_asr.as_ref().unwrap();
            csv.push_str(&format!("{},true,{},{}\n", r.label, a.triggered, a.safety_score_triggered()));
            csv.push_str(&format!("{},false,{},{}\n", r.label, a.untriggered, a.safety_score_untriggered()));
            bars.push((format!("{} +trigger", r.label), a.safety_score_triggered()));
            bars.push((format!("{} -trigger", r.label), a.safety_score_untriggered()));
        }
        written.push(write_file(out_dir.join("safety_scores.csv"), &csv)?);
        written.push(svg_bar_plot("safety score after SFT", &bars, out_dir.join("safety_scores.svg"))?);
    }

    // post-alignment triggered ASR bars
    let aligned: Vec<&LabeledRun> = runs.iter().filter(|r| r.aligned_asr.is_some()).collect();
    if !aligned.is_empty() {
        let mut csv = String::from("run,asr_triggered_after_alignment\n");
        let mut bars = Vec::new();
        for r in &aligned {
            let a = r.aligned_asr.as_ref().unwrap();
            csv.push_str(&format!("{},{}\n", r.label, a.triggered));
            bars.push((r.label.clone(), a.triggered));
        }
        written.push(write_file(out_dir.join("post_alignment_asr.csv"), &csv)?);
        written.push(svg_bar_plot(
            "triggered ASR after safety alignment",
            &bars,
            out_dir.join("post_alignment_asr.svg"),
        )?);
    }

    Ok(written)
}

fn write_file(path: PathBuf, contents: &str) -> Result<PathBuf> {
    std::fs::write(&path, contents)?;
    Ok(path)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f",
];

const PLOT_W: f64 = 800.0;
const PLOT_H: f64 = 500.0;
const MARGIN: f64 = 60.0;

fn svg_line_plot(
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
    path: PathBuf,
) -> Result<PathBuf> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    if pts.is_empty() {
        return Err(Error::MissingSeries(format!("plot '{title}' has no points")));
    }
    let (xmin, xmax) = min_max(pts.iter().map(|p| p.0));
    let (ymin, ymax) = min_max(pts.iter().map(|p| p.1));
    let (ymin, ymax) = pad_range(ymin, ymax);
    let sx = |x: f64| MARGIN + (x - xmin) / (xmax - xmin).max(1e-12) * (PLOT_W - 2.0 * MARGIN);
    let sy = |y: f64| PLOT_H - MARGIN - (y - ymin) / (ymax - ymin).max(1e-12) * (PLOT_H - 2.0 * MARGIN);

    let mut svg = svg_header(title, xmin, xmax, ymin, ymax);
    for (i, (label, s)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> =
            s.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\" font-size=\"12\">{label}</text>\n",
            PLOT_W - MARGIN - 150.0,
            MARGIN + 16.0 * (i + 1) as f64
        ));
    }
    svg.push_str("</svg>\n");
    write_file(path, &svg)
}

fn svg_bar_plot(title: &str, bars: &[(String, f64)], path: PathBuf) -> Result<PathBuf> {
    if bars.is_empty() {
        return Err(Error::MissingSeries(format!("plot '{title}' has no bars")));
    }
    let ymax = bars.iter().map(|(_, v)| *v).fold(0.0_f64, f64::max).max(1.0);
    let sy = |y: f64| PLOT_H - MARGIN - y / ymax * (PLOT_H - 2.0 * MARGIN);
    let band = (PLOT_W - 2.0 * MARGIN) / bars.len() as f64;

    let mut svg = svg_header(title, 0.0, bars.len() as f64, 0.0, ymax);
    for (i, (label, v)) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = MARGIN + band * i as f64 + band * 0.15;
        let y = sy(*v);
        svg.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{color}\"/>\n",
            band * 0.7,
            (PLOT_H - MARGIN) - y
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{label}</text>\n",
            x + band * 0.35,
            PLOT_H - MARGIN + 16.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{v:.3}</text>\n",
            x + band * 0.35,
            y - 5.0
        ));
    }
    svg.push_str("</svg>\n");
    write_file(path, &svg)
}

fn svg_header(title: &str, xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> String {
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" viewBox=\"0 0 {PLOT_W} {PLOT_H}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        PLOT_W / 2.0
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{MARGIN}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        PLOT_H - MARGIN,
        PLOT_W - MARGIN,
        PLOT_H - MARGIN
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        PLOT_H - MARGIN
    ));
    svg.push_str(&format!(
        "<text x=\"{MARGIN}\" y=\"{:.1}\" font-size=\"11\">{xmin:.0}</text>\n",
        PLOT_H - MARGIN + 16.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{xmax:.0}</text>\n",
        PLOT_W - MARGIN,
        PLOT_H - MARGIN + 16.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{ymin:.4}</text>\n",
        MARGIN - 6.0,
        PLOT_H - MARGIN
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{ymax:.4}</text>\n",
        MARGIN - 6.0,
        MARGIN + 4.0
    ));
    svg
}

fn min_max(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn pad_range(lo: f64, hi: f64) -> (f64, f64) {
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_window_one_is_identity() {
        let s = [1.0, 2.0, 3.0];
        assert_eq!(smooth(&s, 1).unwrap(), s.to_vec());
    }

    #[test]
    fn smooth_constant_series_unchanged() {
        let s = [2.5; 7];
        assert_eq!(smooth(&s, 3).unwrap(), s.to_vec());
    }

    #[test]
    fn smooth_truncated_edges_hand_check() {
        let got = smooth(&[0.0, 3.0, 0.0], 3).unwrap();
        assert_eq!(got, vec![1.5, 1.0, 1.5]);
    }

    #[test]
    fn smooth_rejects_even_or_zero_window() {
        assert!(smooth(&[1.0], 2).is_err());
        assert!(smooth(&[1.0], 0).is_err());
    }

    #[test]
    fn smooth_preserves_interior_mean_structure() {
        // centered window-3 average over the interior equals the
        // three-point mean at each interior index
        let s = [1.0, 4.0, 7.0, 2.0, 5.0];
        let got = smooth(&s, 3).unwrap();
        for i in 1..4 {
            assert!((got[i] - (s[i - 1] + s[i] + s[i + 1]) / 3.0).abs() < 1e-15);
        }
        assert_eq!(got.len(), s.len());
    }

    #[test]
    fn report_rejects_empty_and_missing_series() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(report(&[], dir.path()), Err(Error::MissingSeries(_))));
        assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none(), "no files on error");

        let run = LabeledRun {
            label: "clean".into(),
            sft_log: MetricsLog::new(),
            sft_asr: None,
            aligned_asr: None,
        };
        let err = report(&[run], dir.path()).unwrap_err();
        assert!(err.to_string().contains("clean/val_loss"), "{err}");
    }

    #[test]
    fn report_writes_csv_and_svg() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = MetricsLog::new();
        for i in 1..=10u64 {
            log.push(i * 5, "val_loss", 1.0 / i as f64);
        }
        let runs = vec![
            LabeledRun {
                label: "clean".into(),
                sft_log: log.clone(),
                sft_asr: Some(AsrReport { triggered: 0.05, untriggered: 0.02 }),
                aligned_asr: Some(AsrReport { triggered: 0.01, untriggered: 0.01 }),
            },
            LabeledRun {
                label: "attacked".into(),
                sft_log: log,
                sft_asr: Some(AsrReport { triggered: 0.9, untriggered: 0.1 }),
                aligned_asr: Some(AsrReport { triggered: 0.6, untriggered: 0.05 }),
            },
        ];
        let written = report(&runs, dir.path()).unwrap();
        let names: Vec<String> = written
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        for expected in [
            "loss_curves.csv",
            "loss_curves.svg",
            "safety_scores.csv",
            "safety_scores.svg",
            "post_alignment_asr.csv",
            "post_alignment_asr.svg",
        ] {
            assert!(names.contains(&expected.to_string()), "missing {expected}");
        }
        let csv = std::fs::read_to_string(dir.path().join("post_alignment_asr.csv")).unwrap();
        assert!(csv.contains("attacked,0.6"));
    }
}
