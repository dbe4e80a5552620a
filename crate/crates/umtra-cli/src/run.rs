//! Shared experiment machinery: dataset preparation, meta-training with
//! logging and checkpoints, and parallel target-task evaluation.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use umtra_core::data::{split, strip_labels, LabeledDataset, SplitSpec};
use umtra_core::meta::{
    evaluate_one, meta_train, report_from_curves, Clock, EvalReport, MetaSource, SnapshotSpec,
    TargetTaskSampler, SALT_EVAL, SALT_SPLIT, SNAPSHOT_EVERY, SNAPSHOT_TASKS,
};
use umtra_core::rng::derive_seed;
use umtra_core::{ModelSpec, ParamSet};

use crate::checkpoint::save_checkpoint;
use crate::config::{to_canonical_json, ExperimentConfig, Mode};
use crate::csvio::{fmt_f64, fmt_opt_f64, write_atomic, Csv};
use crate::svg;
use crate::workers::{parallel_map, StdClock};

pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub model: ModelSpec,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

/// Loads the dataset, splits it by class, and resolves the model spec.
pub fn prepare(cfg: ExperimentConfig) -> Result<Prepared> {
    let dataset = cfg.load_dataset()?;
    let [c, h, w] = dataset.image_shape();
    let model = cfg.model_spec([c, h, w])?;
    let (rt, rv, rs) = cfg.split;
    let (train, val, test) = split(
        &dataset,
        &SplitSpec::Ratios(rt, rv, rs),
        derive_seed(cfg.seed, SALT_SPLIT),
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(Prepared {
        cfg,
        model,
        train,
        val,
        test,
    })
}

/// Evaluation over `n_tasks` target tasks, fanned out across workers;
/// per-task streams are keyed by task index so the report is identical
/// for any worker count.
pub fn parallel_evaluate(
    theta: &ParamSet,
    sampler: &TargetTaskSampler<'_>,
    n_tasks: usize,
    adapt_steps: usize,
    lr: f64,
    with_curve: bool,
    workers: usize,
) -> Result<EvalReport> {
    let clock = StdClock::new();
    let curves = parallel_map(n_tasks, workers, |i| {
        evaluate_one(theta, sampler, i, adapt_steps, lr).map_err(|e| anyhow::anyhow!("task {i}: {e}"))
    })?;
    Ok(report_from_curves(curves, with_curve, clock.now_ms()))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub mode: String,
    pub aug: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub accuracy: f64,
    pub ci: f64,
    pub eval_tasks: usize,
    pub meta_iterations: usize,
    pub wall_ms: u64,
    pub config: ExperimentConfig,
}

/// Runs one full experiment: meta-train (or skip for scratch), evaluate
/// on held-out classes, and write `log.csv`, `final.ckpt`, and
/// `summary.json` into the configured output directory.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<RunSummary> {
    let prepared = prepare(cfg.clone())?;
    let cfg = &prepared.cfg;
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    let clock = StdClock::new();

    let meta = cfg.to_meta_config()?;
    let pool;
    let source = match cfg.mode {
        Mode::Umtra => {
            pool = strip_labels(&prepared.train);
            MetaSource::Unlabeled(&pool)
        }
        Mode::Supervised | Mode::Scratch => MetaSource::Labeled(&prepared.train),
    };

    // Snapshot evaluation on the validation classes when they can
    // support an episode.
    let val_ok = prepared.val.classes().len() >= cfg.n_way
        && prepared
            .val
            .by_class()
            .values()
            .all(|v| v.len() > cfg.eval.k_shot);
    let snapshot = val_ok.then(|| SnapshotSpec {
        dataset: &prepared.val,
        every: SNAPSHOT_EVERY,
        n_tasks: SNAPSHOT_TASKS,
        adapt_steps: cfg.eval.adapt_steps,
        lr: cfg.eval_lr(),
        k_shot: cfg.eval.k_shot,
    });

    let ckpt_every = cfg.checkpoint_every;
    let out_for_ckpt = out_dir.clone();
    let mut observer = move |iter: usize, theta: &ParamSet| -> umtra_core::Result<()> {
        if let Some(every) = ckpt_every {
            if every > 0 && (iter + 1).is_multiple_of(every) {
                let path = out_for_ckpt.join(format!("ckpt_{:06}.ckpt", iter + 1));
                save_checkpoint(&path, theta)
                    .map_err(|e| umtra_core::CoreError::InvalidSpec(format!("checkpoint: {e}")))?;
            }
        }
        Ok(())
    };

    let (theta, log) = meta_train(
        &meta,
        &prepared.model,
        &source,
        snapshot.as_ref(),
        &clock,
        &mut observer,
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;

    // Final evaluation on held-out test classes.
    let sampler = TargetTaskSampler {
        dataset: &prepared.test,
        n_way: cfg.n_way,
        k_shot: cfg.eval.k_shot,
        seed: derive_seed(cfg.seed, SALT_EVAL),
        stream_base: 0,
    };
    let report = parallel_evaluate(
        &theta,
        &sampler,
        cfg.eval.n_tasks,
        cfg.eval.adapt_steps,
        cfg.eval_lr(),
        false,
        workers,
    )?;

    // Training log CSV.
    let mut csv = Csv::new(
        ["iter", "meta_loss", "eval_acc", "eval_ci", "wall_ms"]
            .map(String::from)
            .to_vec(),
    );
    for row in &log {
        csv.push(vec![
            row.iter.to_string(),
            fmt_f64(row.meta_loss),
            fmt_opt_f64(row.eval_acc),
            fmt_opt_f64(row.eval_ci),
            row.wall_ms.to_string(),
        ]);
    }
    write_atomic(&out_dir.join("log.csv"), csv.render().as_bytes())?;
    save_checkpoint(&out_dir.join("final.ckpt"), &theta)?;

    let summary = RunSummary {
        algorithm: cfg.algorithm_label(),
        mode: cfg.mode.label().to_string(),
        aug: cfg.aug.label(),
        n_way: cfg.n_way,
        k_shot: cfg.eval.k_shot,
        accuracy: report.mean,
        ci: report.ci_half,
        eval_tasks: cfg.eval.n_tasks,
        meta_iterations: cfg.meta_iterations,
        wall_ms: clock.now_ms(),
        config: cfg.clone(),
    };
    write_atomic(
        &out_dir.join("summary.json"),
        to_canonical_json(&summary)?.as_bytes(),
    )?;

    if cfg.emit_plots && !log.is_empty() {
        let loss_series = svg::Series {
            name: "meta_loss".to_string(),
            points: log.iter().map(|r| (r.iter as f64, r.meta_loss)).collect(),
            band: None,
        };
        let mut series = vec![loss_series];
        let evals: Vec<(f64, f64, f64)> = log
            .iter()
            .filter_map(|r| Some((r.iter as f64, r.eval_acc?, r.eval_ci?)))
            .collect();
        if !evals.is_empty() {
            series.push(svg::Series {
                name: "eval_acc".to_string(),
                points: evals.iter().map(|&(x, y, _)| (x, y)).collect(),
                band: Some(evals.iter().map(|&(x, y, c)| (x, y - c, y + c)).collect()),
            });
        }
        let plot = svg::line_plot("meta-training", "iteration", "value", &series);
        write_atomic(&out_dir.join("train_plot.svg"), plot.as_bytes())?;
    }

    Ok(summary)
}

/// Loads a run summary back as raw JSON (the report command preserves
/// the stored number strings bit-for-bit).
pub fn load_summary_value(dir: &Path) -> Result<serde_json::Value> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("missing summary {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("corrupt summary {}", path.display()))
}
