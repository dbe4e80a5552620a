//! Monte-Carlo bias-variance decomposition on a toy regression task.
//!
//! Over many independently sampled training sets, the expected squared
//! error at a probe point splits into squared bias, prediction variance,
//! and irreducible noise. The estimator reports that split plus the gap
//! `mse - (bias^2 + variance + noise_var)`, at both a held-out probe
//! point (where the gap vanishes as replicates grow) and an in-training
//! probe point scored against its own noisy training target (where the
//! error estimate is optimistically biased — the reason the episodic
//! validation split must stay separate from the train split).

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq)]
pub enum Truth {
    Linear { slope: f64, intercept: f64 },
}

impl Truth {
    fn eval(&self, x: f64) -> f64 {
        match self {
            Truth::Linear { slope, intercept } => slope * x + intercept,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyModel {
    /// Zero-parameter oracle: predicts the ground truth exactly.
    Oracle,
    /// Ordinary least-squares line.
    Linear,
    /// Mean of the training targets.
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub truth: Truth,
    pub model: ToyModel,
    pub noise_sigma: f64,
    /// Fixed training design points; only the noise is resampled per
    /// replicate.
    pub train_xs: Vec<f64>,
    /// Probe point not in the training design.
    pub x0_heldout: f64,
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma < 0.0 {
            return Err(CoreError::InvalidSpec("noise sigma must be >= 0".to_string()));
        }
        let min_train = match self.model {
            ToyModel::Oracle => 1,
            ToyModel::Constant => 1,
            ToyModel::Linear => 2,
        };
        if self.train_xs.len() < min_train {
            return Err(CoreError::InvalidSpec(alloc::format!(
                "model needs at least {min_train} training points"
            )));
        }
        if self.train_xs.contains(&self.x0_heldout) {
            return Err(CoreError::InvalidSpec(
                "held-out probe point must not be a training point".to_string(),
            ));
        }
        Ok(())
    }
}

/// A fitted toy predictor.
enum Fitted {
    Oracle,
    Line { slope: f64, intercept: f64 },
    Constant { value: f64 },
}

impl Fitted {
    fn predict(&self, truth: &Truth, x: f64) -> f64 {
        match self {
            Fitted::Oracle => truth.eval(x),
            Fitted::Line { slope, intercept } => slope * x + intercept,
            Fitted::Constant { value } => *value,
        }
    }
}

fn fit(model: ToyModel, xs: &[f64], ys: &[f64]) -> Fitted {
    match model {
        ToyModel::Oracle => Fitted::Oracle,
        ToyModel::Constant => Fitted::Constant {
            value: ys.iter().sum::<f64>() / ys.len() as f64,
        },
        ToyModel::Linear => {
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
            let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
            Fitted::Line {
                slope,
                intercept: my - slope * mx,
            }
        }
    }
}

/// One probe point's decomposition estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub mse: f64,
    pub bias_sq: f64,
    pub variance: f64,
    pub noise_var: f64,
    /// `mse - (bias_sq + variance + noise_var)`.
    pub decomposition_gap: f64,
    /// Batch-means Monte-Carlo standard error of the gap.
    pub gap_stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasVarianceReport {
    pub held_out: Decomposition,
    pub in_training: Decomposition,
    pub n_datasets: usize,
}

const GAP_BATCHES: usize = 50;

fn decompose(
    preds: &[f64],
    truth_at_x0: f64,
    per_rep_mse: &[f64],
    per_rep_noise_sq: &[f64],
) -> Decomposition {
    let n = preds.len() as f64;
    let mean_pred = preds.iter().sum::<f64>() / n;
    let bias_sq = (mean_pred - truth_at_x0) * (mean_pred - truth_at_x0);
    let variance = preds.iter().map(|p| (p - mean_pred) * (p - mean_pred)).sum::<f64>() / n;
    let mse = per_rep_mse.iter().sum::<f64>() / n;
    let noise_var = per_rep_noise_sq.iter().sum::<f64>() / n;
    let gap = mse - (bias_sq + variance + noise_var);

    // Standard error of the gap by batch means over the replicates.
    let reps = preds.len();
    let batches = GAP_BATCHES.min(reps).max(1);
    let mut batch_gaps = Vec::with_capacity(batches);
    for b in 0..batches {
        let lo = b * reps / batches;
        let hi = (b + 1) * reps / batches;
        if lo == hi {
            continue;
        }
        let bn = (hi - lo) as f64;
        let bp = &preds[lo..hi];
        let bmean = bp.iter().sum::<f64>() / bn;
        let bbias = (bmean - truth_at_x0) * (bmean - truth_at_x0);
        let bvar = bp.iter().map(|p| (p - bmean) * (p - bmean)).sum::<f64>() / bn;
        let bmse = per_rep_mse[lo..hi].iter().sum::<f64>() / bn;
        let bnoise = per_rep_noise_sq[lo..hi].iter().sum::<f64>() / bn;
        batch_gaps.push(bmse - (bbias + bvar + bnoise));
    }
    let k = batch_gaps.len() as f64;
    let gmean = batch_gaps.iter().sum::<f64>() / k;
    let gvar = batch_gaps.iter().map(|g| (g - gmean) * (g - gmean)).sum::<f64>() / (k - 1.0).max(1.0);
    let gap_stderr = libm::sqrt(gvar / k);

    Decomposition {
        mse,
        bias_sq,
        variance,
        noise_var,
        decomposition_gap: gap,
        gap_stderr,
    }
}

/// Runs the Monte-Carlo decomposition: `n_datasets` independently
/// sampled training sets (fresh noise on a fixed design), each fitted
/// and probed at the held-out point against `n_test_points` fresh
/// noisy targets, and at the first training point against the very
/// target it was trained on.
pub fn bias_variance_estimate(
    spec: &ToySpec,
    n_datasets: usize,
    n_test_points: usize,
    seed: u64,
) -> Result<BiasVarianceReport> {
    spec.validate()?;
    if n_datasets < 2 || n_test_points == 0 {
        return Err(CoreError::InvalidSpec(
            "need n_datasets >= 2 and n_test_points >= 1".to_string(),
        ));
    }
    let x0 = spec.x0_heldout;
    let xt = spec.train_xs[0];
    let truth_h = spec.truth.eval(x0);
    let truth_t = spec.truth.eval(xt);

    let mut preds_h = Vec::with_capacity(n_datasets);
    let mut mse_h = Vec::with_capacity(n_datasets);
    let mut noise_h = Vec::with_capacity(n_datasets);
    let mut preds_t = Vec::with_capacity(n_datasets);
    let mut mse_t = Vec::with_capacity(n_datasets);
    let mut noise_t = Vec::with_capacity(n_datasets);

    for rep in 0..n_datasets {
        let mut s = Stream::new(seed, rep as u64);
        let ys: Vec<f64> = spec
            .train_xs
            .iter()
            .map(|&x| spec.truth.eval(x) + spec.noise_sigma * s.normal())
            .collect();
        let fitted = fit(spec.model, &spec.train_xs, &ys);

        let ph = fitted.predict(&spec.truth, x0);
        preds_h.push(ph);
        let mut err = 0.0;
        let mut nsq = 0.0;
        for _ in 0..n_test_points {
            let eps = spec.noise_sigma * s.normal();
            let y0 = truth_h + eps;
            err += (ph - y0) * (ph - y0);
            nsq += eps * eps;
        }
        mse_h.push(err / n_test_points as f64);
        noise_h.push(nsq / n_test_points as f64);

        // In-training probe: scored against the same noisy target the
        // model saw during fitting.
        let pt = fitted.predict(&spec.truth, xt);
        preds_t.push(pt);
        mse_t.push((pt - ys[0]) * (pt - ys[0]));
        let eps_t = ys[0] - truth_t;
        noise_t.push(eps_t * eps_t);
    }

    Ok(BiasVarianceReport {
        held_out: decompose(&preds_h, truth_h, &mse_h, &noise_h),
        in_training: decompose(&preds_t, truth_t, &mse_t, &noise_t),
        n_datasets,
    })
}
