//! Inner-loop adaptation, the meta-update over a meta-batch, the
//! meta-training driver, and target-task training/evaluation.
//!
//! The second-order mode differentiates the validation loss through the
//! inner SGD steps (the backward pass of the inner gradient is recorded
//! on the same tape). The first-order mode treats the adapted parameters
//! as fresh leaves and applies their gradient to the initial parameters
//! directly. Gradient accumulation over a meta-batch always happens in
//! ascending task index, so results are independent of how tasks were
//! produced.

use alloc::vec::Vec;

use crate::augment::AugmentationSpec;
use crate::data::{LabeledDataset, UnlabeledDataset};
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::nn::{self, GradMap, ModelSpec, ParamSet};
use crate::rng::{derive_seed, Stream};
use crate::taskgen::{build_supervised_task, build_umtra_task, EpisodeTask};
use crate::tensor::Tensor;

/// Salt for the parameter-initialization stream.
pub const SALT_INIT: u64 = 0x494e_4954;
/// Salt for final-evaluation task streams.
pub const SALT_EVAL: u64 = 0x4556_414c;
/// Salt for mid-training snapshot evaluation streams.
pub const SALT_SNAP: u64 = 0x534e_4150;
/// Salt for the dataset class-split shuffle.
pub const SALT_SPLIT: u64 = 0x5350_4c54;

/// Snapshot cadence during meta-training.
pub const SNAPSHOT_EVERY: usize = 200;
/// Tasks per snapshot evaluation.
pub const SNAPSHOT_TASKS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    SecondOrder,
    FirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Umtra,
    Supervised,
    Scratch,
}

#[derive(Debug, Clone)]
pub struct MetaConfig {
    pub n_way: usize,
    pub k_shot_target: usize,
    pub meta_batch: usize,
    pub inner_updates: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub meta_iterations: usize,
    pub grad_mode: GradMode,
    pub mode: TrainMode,
    pub aug: AugmentationSpec,
    pub seed: u64,
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(CoreError::InvalidSpec("n_way must be >= 2".into()));
        }
        if self.meta_batch < 1 {
            return Err(CoreError::InvalidSpec("meta_batch must be >= 1".into()));
        }
        if self.inner_updates < 1 {
            return Err(CoreError::InvalidSpec("inner_updates must be >= 1".into()));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.inner_lr) || !positive(self.outer_lr) {
            return Err(CoreError::InvalidSpec("step sizes must be positive".into()));
        }
        if self.k_shot_target < 1 {
            return Err(CoreError::InvalidSpec("k_shot_target must be >= 1".into()));
        }
        self.aug.validate()
    }
}

/// Wall-clock source; the engine itself never reads a clock, so time
/// stamps are injectable (and zero under `NullClock`).
pub trait Clock {
    fn now_ms(&self) -> u64;
}

pub struct NullClock;

impl Clock for NullClock {
    fn now_ms(&self) -> u64 {
        0
    }
}

/// One row of the training log. `eval_*` are only present on snapshot
/// iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub iter: usize,
    pub meta_loss: f64,
    pub eval_acc: Option<f64>,
    pub eval_ci: Option<f64>,
    pub wall_ms: u64,
}

pub enum MetaSource<'a> {
    Unlabeled(&'a UnlabeledDataset),
    Labeled(&'a LabeledDataset),
}

/// Mid-training evaluation hook.
pub struct SnapshotSpec<'a> {
    pub dataset: &'a LabeledDataset,
    pub every: usize,
    pub n_tasks: usize,
    pub adapt_steps: usize,
    pub lr: f64,
    pub k_shot: usize,
}

/// Stacks (image, label) pairs into a [B, C, H, W] batch plus one-hot
/// [B, N] labels.
pub fn stack_batch(items: &[(Tensor, usize)], n_classes: usize) -> Result<(Tensor, Tensor)> {
    if items.is_empty() {
        return Err(CoreError::InvalidSpec("empty batch".into()));
    }
    let shape = items[0].0.shape().to_vec();
    if shape.len() != 3 {
        return Err(CoreError::InvalidSpec("batch items must be [C, H, W]".into()));
    }
    let b = items.len();
    let mut data = Vec::with_capacity(b * items[0].0.numel());
    let mut labels = alloc::vec![0.0; b * n_classes];
    for (i, (img, label)) in items.iter().enumerate() {
        if img.shape() != shape.as_slice() {
            return Err(CoreError::ShapeMismatch {
                op: "stack_batch",
                lhs: shape,
                rhs: img.shape().to_vec(),
            });
        }
        if *label >= n_classes {
            return Err(CoreError::InvalidSpec(alloc::format!(
                "label {label} out of range for {n_classes} classes"
            )));
        }
        data.extend_from_slice(img.data());
        labels[i * n_classes + label] = 1.0;
    }
    let batch = Tensor::new(alloc::vec![b, shape[0], shape[1], shape[2]], data)?;
    let onehot = Tensor::new(alloc::vec![b, n_classes], labels)?;
    Ok((batch, onehot))
}

/// Fraction of items whose argmax logit matches the label (argmax ties
/// resolve to the first index).
pub fn accuracy(params: &ParamSet, items: &[(Tensor, usize)]) -> Result<f64> {
    let n = params.spec().n_classes;
    let (batch, _) = stack_batch(items, n)?;
    let graph = Graph::new();
    let logits = nn::forward(&graph, &params.detach(), &batch)?;
    let data = logits.data();
    let mut hits = 0usize;
    for (i, (_, label)) in items.iter().enumerate() {
        let row = &data[i * n..(i + 1) * n];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

/// Runs `n_updates` full-batch SGD steps on the episode train split.
/// With `track_graph` the result stays differentiable with respect to
/// the input parameters (which must live on `graph`).
pub fn inner_adapt(
    graph: &Graph,
    params: &ParamSet,
    train: &[(Tensor, usize)],
    alpha: f64,
    n_updates: usize,
    track_graph: bool,
) -> Result<ParamSet> {
    let n = params.spec().n_classes;
    let (batch, labels) = stack_batch(train, n)?;
    if track_graph {
        let mut adapted = params.clone();
        for step in 0..n_updates {
            let logits = nn::forward(graph, &adapted, &batch)?;
            let loss = graph.softmax_xent(&logits, &labels)?;
            if !loss.item().is_finite() {
                return Err(CoreError::NonFiniteLoss { iteration: step });
            }
            let grads = nn::grad(graph, &loss, &adapted, true)?;
            let stepped: Result<Vec<Tensor>> = adapted
                .entries()
                .iter()
                .zip(grads.entries().iter())
                .map(|((_, p), (_, g))| graph.sub(p, &graph.scale(g, alpha)?))
                .collect();
            adapted = adapted.with_tensors(stepped?);
        }
        Ok(adapted)
    } else {
        let mut adapted = params.detach();
        for step in 0..n_updates {
            let g = Graph::new();
            let leaves = adapted.register_leaves(&g);
            let logits = nn::forward(&g, &leaves, &batch)?;
            let loss = g.softmax_xent(&logits, &labels)?;
            if !loss.item().is_finite() {
                return Err(CoreError::NonFiniteLoss { iteration: step });
            }
            let grads = nn::grad(&g, &loss, &leaves, false)?;
            adapted = nn::sgd_step(&adapted, &grads, alpha);
        }
        Ok(adapted)
    }
}

/// Meta-gradient of one task's validation loss with respect to theta,
/// plus the validation loss value.
fn task_meta_grad(theta: &ParamSet, task: &EpisodeTask, cfg: &MetaConfig) -> Result<(GradMap, f64)> {
    let n = theta.spec().n_classes;
    let (vx, vy) = stack_batch(&task.valid, n)?;
    match cfg.grad_mode {
        GradMode::SecondOrder => {
            let graph = Graph::new();
            let leaves = theta.register_leaves(&graph);
            let adapted = inner_adapt(&graph, &leaves, &task.train, cfg.inner_lr, cfg.inner_updates, true)?;
            let logits = nn::forward(&graph, &adapted, &vx)?;
            let loss = graph.softmax_xent(&logits, &vy)?;
            if !loss.item().is_finite() {
                return Err(CoreError::NonFiniteLoss { iteration: 0 });
            }
            let gm = nn::grad(&graph, &loss, &leaves, false)?;
            Ok((gm, loss.item()))
        }
        GradMode::FirstOrder => {
            let scratch = Graph::new();
            let adapted = inner_adapt(
                &scratch,
                &theta.detach(),
                &task.train,
                cfg.inner_lr,
                cfg.inner_updates,
                false,
            )?;
            let graph = Graph::new();
            let leaves = adapted.register_leaves(&graph);
            let logits = nn::forward(&graph, &leaves, &vx)?;
            let loss = graph.softmax_xent(&logits, &vy)?;
            if !loss.item().is_finite() {
                return Err(CoreError::NonFiniteLoss { iteration: 0 });
            }
            let gm = nn::grad(&graph, &loss, &leaves, false)?;
            Ok((gm, loss.item()))
        }
    }
}

/// One outer update: adapt on each task, sum the validation-loss
/// gradients in task-index order, and take one SGD step on theta.
/// Returns the new parameters and the summed meta-loss.
pub fn meta_step(theta: &ParamSet, tasks: &[EpisodeTask], cfg: &MetaConfig) -> Result<(ParamSet, f64)> {
    if tasks.len() != cfg.meta_batch {
        return Err(CoreError::TaskCount {
            expected: cfg.meta_batch,
            got: tasks.len(),
        });
    }
    let mut total: Option<GradMap> = None;
    let mut meta_loss = 0.0;
    for task in tasks {
        let (gm, loss) = task_meta_grad(theta, task, cfg)?;
        meta_loss += loss;
        match &mut total {
            None => total = Some(gm),
            Some(acc) => acc.add_assign(&gm),
        }
    }
    if !meta_loss.is_finite() {
        return Err(CoreError::NonFiniteLoss { iteration: 0 });
    }
    let total = total.expect("meta_batch >= 1");
    let updated = if cfg.outer_lr == 0.0 {
        theta.clone()
    } else {
        nn::sgd_step(theta, &total, cfg.outer_lr)
    };
    Ok((updated, meta_loss))
}

/// The meta-training driver. Builds `meta_batch` episodes per iteration
/// (episode `i` of iteration `t` uses random stream `t * meta_batch + i`
/// on the configured seed), applies `meta_step`, and logs one row per
/// iteration with optional snapshot evaluations. Scratch mode returns
/// the freshly initialized parameters untouched. `observer` fires after
/// every iteration with the current parameters (checkpoint cadence and
/// other IO live behind it, outside this crate).
pub fn meta_train(
    cfg: &MetaConfig,
    model: &ModelSpec,
    source: &MetaSource<'_>,
    snapshot: Option<&SnapshotSpec<'_>>,
    clock: &dyn Clock,
    observer: &mut dyn FnMut(usize, &ParamSet) -> Result<()>,
) -> Result<(ParamSet, Vec<TrainLogRow>)> {
    cfg.validate()?;
    let theta0 = nn::init_params(model, derive_seed(cfg.seed, SALT_INIT))?;
    match (cfg.mode, source) {
        (TrainMode::Scratch, _) => return Ok((theta0, Vec::new())),
        (TrainMode::Umtra, MetaSource::Unlabeled(_)) => {}
        (TrainMode::Supervised, MetaSource::Labeled(_)) => {}
        (TrainMode::Umtra, _) => {
            return Err(CoreError::InvalidSpec("umtra mode needs an unlabeled source".into()))
        }
        (TrainMode::Supervised, _) => {
            return Err(CoreError::InvalidSpec("supervised mode needs a labeled source".into()))
        }
    }

    let start = clock.now_ms();
    let mut theta = theta0;
    let mut log = Vec::with_capacity(cfg.meta_iterations);
    let mut snapshots_done = 0usize;
    for t in 0..cfg.meta_iterations {
        let at = |e: CoreError| CoreError::AtIteration {
            iteration: t,
            inner: alloc::boxed::Box::new(e),
        };
        let mut tasks = Vec::with_capacity(cfg.meta_batch);
        for i in 0..cfg.meta_batch {
            let stream_id = (t * cfg.meta_batch + i) as u64;
            let mut stream = Stream::new(cfg.seed, stream_id);
            let task = match source {
                MetaSource::Unlabeled(pool) => {
                    build_umtra_task(pool, cfg.n_way, &cfg.aug, &mut stream)
                }
                MetaSource::Labeled(ds) => {
                    build_supervised_task(ds, cfg.n_way, cfg.k_shot_target, &mut stream)
                }
            };
            tasks.push(task.map_err(at)?);
        }
        let (updated, meta_loss) = meta_step(&theta, &tasks, cfg).map_err(at)?;
        theta = updated;

        let mut row = TrainLogRow {
            iter: t,
            meta_loss,
            eval_acc: None,
            eval_ci: None,
            wall_ms: clock.now_ms().saturating_sub(start),
        };
        if let Some(snap) = snapshot {
            if snap.every > 0 && (t + 1) % snap.every == 0 {
                let sampler = TargetTaskSampler {
                    dataset: snap.dataset,
                    n_way: cfg.n_way,
                    k_shot: snap.k_shot,
                    seed: derive_seed(cfg.seed, SALT_SNAP),
                    stream_base: (snapshots_done * snap.n_tasks) as u64,
                };
                let report = evaluate(
                    &theta,
                    &sampler,
                    snap.n_tasks,
                    snap.adapt_steps,
                    snap.lr,
                    false,
                    &NullClock,
                )
                .map_err(at)?;
                row.eval_acc = Some(report.mean);
                row.eval_ci = Some(report.ci_half);
                row.wall_ms = clock.now_ms().saturating_sub(start);
                snapshots_done += 1;
            }
        }
        observer(t, &theta).map_err(at)?;
        log.push(row);
    }
    Ok((theta, log))
}

/// A target few-shot task: a labeled K-shot train split plus the
/// held-out query set used for accuracy measurement.
#[derive(Debug, Clone)]
pub struct TargetTask {
    pub train: Vec<(Tensor, usize)>,
    pub query: Vec<(Tensor, usize)>,
    pub n_way: usize,
}

/// Samples target tasks from a held-out labeled dataset: N distinct
/// classes, K train shots per class, and every remaining instance of
/// those classes as the query set.
pub struct TargetTaskSampler<'a> {
    pub dataset: &'a LabeledDataset,
    pub n_way: usize,
    pub k_shot: usize,
    pub seed: u64,
    pub stream_base: u64,
}

impl TargetTaskSampler<'_> {
    pub fn sample(&self, stream: &mut Stream) -> Result<TargetTask> {
        let by_class = self.dataset.by_class();
        let eligible: Vec<&Vec<usize>> = by_class
            .values()
            .filter(|v| v.len() > self.k_shot)
            .collect();
        if eligible.len() < self.n_way {
            return Err(CoreError::InsufficientClasses {
                detail: alloc::format!(
                    "need {} classes with >= {} samples, have {}",
                    self.n_way,
                    self.k_shot + 1,
                    eligible.len()
                ),
            });
        }
        let class_picks = stream.distinct_below(eligible.len(), self.n_way);
        let mut train = Vec::with_capacity(self.n_way * self.k_shot);
        let mut query = Vec::new();
        for (label, &ci) in class_picks.iter().enumerate() {
            let members = eligible[ci];
            let picks = stream.distinct_below(members.len(), self.k_shot);
            for (j, &m) in members.iter().enumerate() {
                let img = self.dataset.image(m).clone();
                if picks.contains(&j) {
                    train.push((img, label));
                } else {
                    query.push((img, label));
                }
            }
        }
        Ok(TargetTask {
            train,
            query,
            n_way: self.n_way,
        })
    }
}

/// Plain SGD on the target train split, recording query accuracy after
/// every step, including step 0 (pre-adaptation).
pub fn target_train(
    theta: &ParamSet,
    task: &TargetTask,
    steps: usize,
    lr: f64,
) -> Result<(ParamSet, Vec<f64>)> {
    let n = theta.spec().n_classes;
    let (batch, labels) = stack_batch(&task.train, n)?;
    let mut params = theta.detach();
    let mut curve = Vec::with_capacity(steps + 1);
    curve.push(accuracy(&params, &task.query)?);
    for step in 0..steps {
        let g = Graph::new();
        let leaves = params.register_leaves(&g);
        let logits = nn::forward(&g, &leaves, &batch)?;
        let loss = g.softmax_xent(&logits, &labels)?;
        if !loss.item().is_finite() {
            return Err(CoreError::NonFiniteLoss { iteration: step });
        }
        let grads = nn::grad(&g, &loss, &leaves, false)?;
        params = nn::sgd_step(&params, &grads, lr);
        curve.push(accuracy(&params, &task.query)?);
    }
    Ok((params, curve))
}

/// Adapts and scores one evaluation task (task streams are keyed by
/// index, so tasks can be processed in any order or in parallel).
pub fn evaluate_one(
    theta: &ParamSet,
    sampler: &TargetTaskSampler<'_>,
    task_idx: usize,
    adapt_steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let mut stream = Stream::new(sampler.seed, sampler.stream_base + task_idx as u64);
    let task = sampler.sample(&mut stream)?;
    let (_, curve) = target_train(theta, &task, adapt_steps, lr)?;
    Ok(curve)
}

/// Mean and 95% confidence half-width (1.96 standard errors) of a set
/// of per-task accuracies.
pub fn summarize(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let stderr = libm::sqrt(var / n as f64);
    (mean, 1.96 * stderr)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci_half: f64,
    /// Per-step (mean, ci_half) across tasks, when requested.
    pub curve: Option<Vec<(f64, f64)>>,
    pub wall_ms: u64,
}

/// Samples `n_tasks` target tasks, target-trains a clone of theta on
/// each, and reports mean accuracy with a 95% confidence interval.
pub fn evaluate(
    theta: &ParamSet,
    sampler: &TargetTaskSampler<'_>,
    n_tasks: usize,
    adapt_steps: usize,
    lr: f64,
    with_curve: bool,
    clock: &dyn Clock,
) -> Result<EvalReport> {
    if n_tasks == 0 {
        return Err(CoreError::InvalidSpec("n_tasks must be >= 1".into()));
    }
    let start = clock.now_ms();
    let curves: Result<Vec<Vec<f64>>> = (0..n_tasks)
        .map(|i| evaluate_one(theta, sampler, i, adapt_steps, lr))
        .collect();
    let curves = curves?;
    Ok(report_from_curves(curves, with_curve, clock.now_ms().saturating_sub(start)))
}

/// Builds an [`EvalReport`] from per-task accuracy curves (used both by
/// the serial path above and by parallel front-ends; curves must be in
/// task-index order).
pub fn report_from_curves(curves: Vec<Vec<f64>>, with_curve: bool, wall_ms: u64) -> EvalReport {
    let accuracies: Vec<f64> = curves.iter().map(|c| *c.last().expect("nonempty curve")).collect();
    let (mean, ci_half) = summarize(&accuracies);
    let curve = if with_curve {
        let steps = curves[0].len();
        Some(
            (0..steps)
                .map(|s| {
                    let at_step: Vec<f64> = curves.iter().map(|c| c[s]).collect();
                    summarize(&at_step)
                })
                .collect(),
        )
    } else {
        None
    };
    EvalReport {
        accuracies,
        mean,
        ci_half,
        curve,
        wall_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_glyphs, strip_labels, GlyphSpec};
    use crate::nn::{init_params, ModelSpec};

    fn tiny_mlp() -> ModelSpec {
        ModelSpec::mlp([1, 8, 8], 3, alloc::vec![8])
    }

    fn glyph_pool(classes: usize, instances: usize, seed: u64) -> crate::data::LabeledDataset {
        let mut spec = GlyphSpec::new(classes, instances, seed);
        spec.image_size = 8;
        gen_glyphs(&spec).unwrap()
    }

    fn episode(ds: &crate::data::LabeledDataset, n_way: usize, seed: u64) -> EpisodeTask {
        let mut s = Stream::new(seed, 0);
        build_umtra_task(
            &strip_labels(ds),
            n_way,
            &crate::augment::preset("zero_shift").unwrap(),
            &mut s,
        )
        .unwrap()
    }

    fn base_cfg(mode: TrainMode, aug: &str) -> MetaConfig {
        MetaConfig {
            n_way: 3,
            k_shot_target: 1,
            meta_batch: 2,
            inner_updates: 1,
            inner_lr: 0.05,
            outer_lr: 0.01,
            meta_iterations: 5,
            grad_mode: GradMode::SecondOrder,
            mode,
            aug: crate::augment::preset(aug).unwrap(),
            seed: 11,
        }
    }

    #[test]
    fn inner_adapt_zero_updates_is_the_identity() {
        let ds = glyph_pool(6, 3, 1);
        let task = episode(&ds, 3, 2);
        let theta = init_params(&tiny_mlp(), 3).unwrap();
        let g = Graph::new();
        let adapted = inner_adapt(&g, &theta, &task.train, 0.05, 0, false).unwrap();
        assert!(adapted.bits_eq(&theta.detach()));
    }

    /// Full-batch SGD on the episode loss must descend; allow a couple
    /// of overshoots across 100 random episodes.
    #[test]
    fn inner_adapt_descends_on_random_episodes() {
        let ds = glyph_pool(30, 4, 4);
        let pool = strip_labels(&ds);
        let spec = ModelSpec {
            kind: crate::nn::ModelKind::ConvSmall,
            input_shape: [1, 8, 8],
            n_classes: 3,
            filters: 4,
            hidden: alloc::vec![],
        };
        let aug = crate::augment::preset("zero_shift").unwrap();
        let mut failures = 0;
        for t in 0..100 {
            let mut s = Stream::new(50, t);
            let task = build_umtra_task(&pool, 3, &aug, &mut s).unwrap();
            let theta = init_params(&spec, 100 + t).unwrap();
            let (bx, by) = stack_batch(&task.train, 3).unwrap();
            let loss_of = |p: &ParamSet| -> f64 {
                let g = Graph::new();
                let logits = nn::forward(&g, p, &bx).unwrap();
                g.softmax_xent(&logits, &by).unwrap().item()
            };
            let before = loss_of(&theta);
            let g = Graph::new();
            let adapted = inner_adapt(&g, &theta, &task.train, 0.05, 1, false).unwrap();
            let after = loss_of(&adapted);
            if after >= before {
                failures += 1;
            }
        }
        assert!(failures <= 2, "{failures} non-descending episodes");
    }

    #[test]
    fn meta_step_rejects_wrong_task_count() {
        let ds = glyph_pool(6, 3, 5);
        let theta = init_params(&tiny_mlp(), 6).unwrap();
        let cfg = base_cfg(TrainMode::Umtra, "identity");
        let tasks = alloc::vec![episode(&ds, 3, 7)];
        assert!(matches!(
            meta_step(&theta, &tasks, &cfg),
            Err(CoreError::TaskCount { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn meta_step_with_zero_outer_lr_reports_loss_but_keeps_theta() {
        let ds = glyph_pool(6, 3, 8);
        let theta = init_params(&tiny_mlp(), 9).unwrap();
        let mut cfg = base_cfg(TrainMode::Umtra, "identity");
        cfg.outer_lr = 0.0;
        let tasks = alloc::vec![episode(&ds, 3, 1), episode(&ds, 3, 2)];
        let (updated, loss) = meta_step(&theta, &tasks, &cfg).unwrap();
        assert!(updated.bits_eq(&theta));
        assert!(loss.is_finite() && loss > 0.0);
    }

    /// Sum-of-gradients linearity: one meta-step over a batch equals
    /// accumulating the same tasks one at a time from the same theta.
    #[test]
    fn meta_step_is_linear_in_tasks() {
        let ds = glyph_pool(10, 3, 10);
        let theta = init_params(&tiny_mlp(), 11).unwrap();
        let mut cfg = base_cfg(TrainMode::Umtra, "zero_shift");
        cfg.meta_batch = 4;
        cfg.outer_lr = 1.0;
        let tasks: Vec<EpisodeTask> = (0..4).map(|i| episode(&ds, 3, 20 + i)).collect();
        let (batched, _) = meta_step(&theta, &tasks, &cfg).unwrap();

        // Per-task gradients recovered from single-task steps.
        let mut single = base_cfg(TrainMode::Umtra, "zero_shift");
        single.meta_batch = 1;
        single.outer_lr = 1.0;
        let mut sum_update: Vec<Vec<f64>> = theta
            .entries()
            .iter()
            .map(|(_, t)| alloc::vec![0.0; t.numel()])
            .collect();
        for task in &tasks {
            let (stepped, _) = meta_step(&theta, core::slice::from_ref(task), &single).unwrap();
            for (acc, ((_, orig), (_, new))) in sum_update
                .iter_mut()
                .zip(theta.entries().iter().zip(stepped.entries()))
            {
                for (a, (o, n)) in acc.iter_mut().zip(orig.data().iter().zip(new.data())) {
                    *a += o - n; // = outer_lr * g_task
                }
            }
        }
        for (acc, ((_, orig), (_, got))) in sum_update
            .iter()
            .zip(theta.entries().iter().zip(batched.entries()))
        {
            for (a, (o, g)) in acc.iter().zip(orig.data().iter().zip(got.data())) {
                assert!(((o - a) - g).abs() < 1e-10, "linearity violated");
            }
        }
    }

    #[test]
    fn first_and_second_order_updates_differ() {
        let ds = glyph_pool(10, 3, 12);
        let theta = init_params(&tiny_mlp(), 13).unwrap();
        let tasks = alloc::vec![episode(&ds, 3, 30), episode(&ds, 3, 31)];
        let cfg2 = base_cfg(TrainMode::Umtra, "zero_shift");
        let mut cfg1 = base_cfg(TrainMode::Umtra, "zero_shift");
        cfg1.grad_mode = GradMode::FirstOrder;
        let (second, _) = meta_step(&theta, &tasks, &cfg2).unwrap();
        let (first, _) = meta_step(&theta, &tasks, &cfg1).unwrap();
        assert!(!second.bits_eq(&first));
    }

    /// Relabeling an episode by a permutation while permuting the head's
    /// class axis leaves the adaptation loss trajectory identical.
    #[test]
    fn inner_adapt_is_label_symmetric() {
        let ds = glyph_pool(8, 3, 14);
        let task = episode(&ds, 3, 40);
        let theta = init_params(&tiny_mlp(), 15).unwrap();
        let perm = [1usize, 2, 0];

        let permuted_task = EpisodeTask {
            train: task
                .train
                .iter()
                .map(|(img, l)| (img.clone(), perm[*l]))
                .collect(),
            valid: task.valid.clone(),
            n_way: 3,
            k_shot_train: 1,
        };
        let permuted_theta = theta.with_tensors(
            theta
                .entries()
                .iter()
                .map(|(n, t)| match n.as_str() {
                    "head.weight" => {
                        let feat = t.shape()[0];
                        let mut d = alloc::vec![0.0; t.numel()];
                        for r in 0..feat {
                            for j in 0..3 {
                                d[r * 3 + perm[j]] = t.data()[r * 3 + j];
                            }
                        }
                        Tensor::new(t.shape().to_vec(), d).unwrap()
                    }
                    "head.bias" => {
                        let mut d = alloc::vec![0.0; 3];
                        for j in 0..3 {
                            d[perm[j]] = t.data()[j];
                        }
                        Tensor::new(alloc::vec![3], d).unwrap()
                    }
                    _ => t.clone(),
                })
                .collect(),
        );

        let loss_seq = |theta: &ParamSet, task: &EpisodeTask| -> Vec<f64> {
            let (bx, by) = stack_batch(&task.train, 3).unwrap();
            let mut p = theta.detach();
            let mut seq = Vec::new();
            for _ in 0..3 {
                let g = Graph::new();
                let leaves = p.register_leaves(&g);
                let logits = nn::forward(&g, &leaves, &bx).unwrap();
                let loss = g.softmax_xent(&logits, &by).unwrap();
                seq.push(loss.item());
                let grads = nn::grad(&g, &loss, &leaves, false).unwrap();
                p = nn::sgd_step(&p, &grads, 0.05);
            }
            seq
        };
        let base = loss_seq(&theta, &task);
        let swapped = loss_seq(&permuted_theta, &permuted_task);
        for (a, b) in base.iter().zip(&swapped) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn meta_train_zero_iterations_returns_init() {
        let ds = glyph_pool(8, 3, 16);
        let pool = strip_labels(&ds);
        let mut cfg = base_cfg(TrainMode::Umtra, "identity");
        cfg.meta_iterations = 0;
        let (theta, log) = meta_train(
            &cfg,
            &tiny_mlp(),
            &MetaSource::Unlabeled(&pool),
            None,
            &NullClock,
            &mut |_, _| Ok(()),
        )
        .unwrap();
        let want = init_params(&tiny_mlp(), derive_seed(cfg.seed, SALT_INIT)).unwrap();
        assert!(theta.bits_eq(&want));
        assert!(log.is_empty());
    }

    #[test]
    fn meta_train_is_bit_reproducible() {
        let ds = glyph_pool(10, 4, 17);
        let pool = strip_labels(&ds);
        let cfg = base_cfg(TrainMode::Umtra, "zero_shift");
        let run = || {
            meta_train(
                &cfg,
                &tiny_mlp(),
                &MetaSource::Unlabeled(&pool),
                None,
                &NullClock,
                &mut |_, _| Ok(()),
            )
            .unwrap()
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert!(a.bits_eq(&b));
        assert_eq!(la, lb);
    }

    #[test]
    fn meta_train_checks_source_compatibility() {
        let ds = glyph_pool(8, 3, 18);
        let pool = strip_labels(&ds);
        let cfg = base_cfg(TrainMode::Umtra, "identity");
        assert!(meta_train(
            &cfg,
            &tiny_mlp(),
            &MetaSource::Labeled(&ds),
            None,
            &NullClock,
            &mut |_, _| Ok(())
        )
        .is_err());
        let sup = base_cfg(TrainMode::Supervised, "identity");
        assert!(meta_train(
            &sup,
            &tiny_mlp(),
            &MetaSource::Unlabeled(&pool),
            None,
            &NullClock,
            &mut |_, _| Ok(())
        )
        .is_err());
    }

    #[test]
    fn supervised_meta_train_runs() {
        let ds = glyph_pool(10, 4, 19);
        let cfg = base_cfg(TrainMode::Supervised, "identity");
        let (theta, log) = meta_train(
            &cfg,
            &tiny_mlp(),
            &MetaSource::Labeled(&ds),
            None,
            &NullClock,
            &mut |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(log.len(), 5);
        assert!(log.iter().all(|r| r.meta_loss.is_finite()));
        assert_eq!(theta.param_count(), init_params(&tiny_mlp(), 0).unwrap().param_count());
    }

    fn target_sampler<'a>(
        ds: &'a crate::data::LabeledDataset,
        n_way: usize,
        k_shot: usize,
        seed: u64,
    ) -> TargetTaskSampler<'a> {
        TargetTaskSampler {
            dataset: ds,
            n_way,
            k_shot,
            seed,
            stream_base: 0,
        }
    }

    #[test]
    fn target_train_zero_steps_yields_one_curve_entry() {
        let ds = glyph_pool(8, 4, 20);
        let theta = init_params(&tiny_mlp(), 21).unwrap();
        let sampler = target_sampler(&ds, 3, 1, 5);
        let mut s = Stream::new(5, 0);
        let task = sampler.sample(&mut s).unwrap();
        let (_, curve) = target_train(&theta, &task, 0, 0.05).unwrap();
        assert_eq!(curve.len(), 1);
    }

    #[test]
    fn random_init_sits_at_chance_level() {
        let spec = ModelSpec::conv_small([1, 14, 14], 5);
        let ds = gen_glyphs(&GlyphSpec::new(20, 6, 22)).unwrap();
        let theta = init_params(&spec, 23).unwrap();
        let sampler = target_sampler(&ds, 5, 1, 7);
        let report = evaluate(&theta, &sampler, 200, 0, 0.05, false, &NullClock).unwrap();
        assert!(
            (report.mean - 0.2).abs() < 0.06,
            "chance-level mean {} out of band",
            report.mean
        );
    }

    /// On a perfectly separable toy set (one indicator pixel per class,
    /// all instances of a class identical) adaptation reaches an exact
    /// classifier, so the report is mean 1.0 with a zero-width interval.
    #[test]
    fn oracle_classifier_scores_perfectly() {
        let spec = ModelSpec::mlp([1, 1, 5], 5, alloc::vec![]);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for class in 0..5 {
            for _ in 0..4 {
                let mut d = alloc::vec![0.0; 5];
                d[class] = 1.0;
                images.push(Tensor::new(alloc::vec![1, 1, 5], d).unwrap());
                labels.push(class);
            }
        }
        let ds = crate::data::LabeledDataset::new(images, labels).unwrap();
        let theta = init_params(&spec, 1).unwrap();
        let sampler = target_sampler(&ds, 5, 1, 9);
        let report = evaluate(&theta, &sampler, 50, 40, 2.0, false, &NullClock).unwrap();
        assert_eq!(report.mean, 1.0);
        assert_eq!(report.ci_half, 0.0);
    }

    /// Confidence half-width shrinks like 1/sqrt(n_tasks).
    #[test]
    fn ci_half_width_scales_with_task_count() {
        let spec = ModelSpec::mlp([1, 8, 8], 5, alloc::vec![8]);
        let ds = glyph_pool(20, 5, 24);
        let theta = init_params(&spec, 25).unwrap();
        let sampler = target_sampler(&ds, 5, 1, 13);
        let small = evaluate(&theta, &sampler, 100, 0, 0.05, false, &NullClock).unwrap();
        let large = evaluate(&theta, &sampler, 400, 0, 0.05, false, &NullClock).unwrap();
        let ratio = small.ci_half / large.ci_half;
        assert!(
            (ratio - 2.0).abs() < 0.4,
            "CI ratio {ratio} should be near 2"
        );
    }

    #[test]
    fn evaluate_errors_when_classes_run_out() {
        let ds = glyph_pool(3, 4, 26);
        let theta = init_params(&tiny_mlp(), 27).unwrap();
        let sampler = target_sampler(&ds, 5, 1, 15);
        assert!(matches!(
            evaluate(&theta, &sampler, 10, 0, 0.05, false, &NullClock),
            Err(CoreError::InsufficientClasses { .. })
        ));
    }

    #[test]
    fn evaluation_curves_share_task_order_regardless_of_processing_order() {
        let ds = glyph_pool(10, 4, 28);
        let theta = init_params(&tiny_mlp(), 29).unwrap();
        let sampler = target_sampler(&ds, 3, 1, 17);
        // Process tasks in reverse and compare with the serial report.
        let serial = evaluate(&theta, &sampler, 20, 2, 0.05, true, &NullClock).unwrap();
        let mut curves: Vec<Vec<f64>> = (0..20).rev()
            .map(|i| evaluate_one(&theta, &sampler, i, 2, 0.05).unwrap())
            .collect();
        curves.reverse();
        let reordered = report_from_curves(curves, true, 0);
        assert_eq!(serial.accuracies, reordered.accuracies);
        assert_eq!(serial.mean, reordered.mean);
        assert_eq!(serial.curve.unwrap(), reordered.curve.unwrap());
    }
}
