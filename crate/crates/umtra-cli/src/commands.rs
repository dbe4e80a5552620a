//! The six CLI subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use umtra_core::biasvar::{bias_variance_estimate, Decomposition, ToyModel, ToySpec, Truth};
use umtra_core::meta::{TargetTaskSampler, SALT_EVAL, SALT_INIT};
use umtra_core::nn::init_params;
use umtra_core::rng::{derive_seed, Stream};
use umtra_core::taskgen::{collision_monte_carlo, collision_probability};

use crate::checkpoint::load_checkpoint;
use crate::config::{to_canonical_json, ExperimentConfig};
use crate::csvio::{fmt_f64, write_atomic, Csv};
use crate::run::{load_summary_value, parallel_evaluate, prepare, run_experiment};
use crate::svg;

pub fn cmd_meta_train(config: &Path, workers: usize) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let summary = run_experiment(&cfg, workers)?;
    println!(
        "{} {}-way {}-shot: accuracy {:.4} ± {:.4} over {} tasks ({} ms)",
        summary.algorithm,
        summary.n_way,
        summary.k_shot,
        summary.accuracy,
        summary.ci,
        summary.eval_tasks,
        summary.wall_ms
    );
    Ok(())
}

pub fn cmd_collision(c: u64, m: u64, n_way: u64, mc: Option<u64>) -> Result<()> {
    let p = collision_probability(c, m, n_way).map_err(|e| anyhow::anyhow!("{e}"))?;
    println!("closed_form {}", fmt_f64(p));
    if let Some(trials) = mc {
        let mut stream = Stream::new(0x0C01_11D3, 0);
        let (est, se) =
            collision_monte_carlo(c, m, n_way, trials, &mut stream).map_err(|e| anyhow::anyhow!("{e}"))?;
        println!("monte_carlo {} stderr {} trials {}", fmt_f64(est), fmt_f64(se), trials);
    }
    Ok(())
}

fn default_cap() -> usize {
    64
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    /// Axis name (a top-level config key) to the values it sweeps.
    /// Axes iterate in sorted-name order, last axis fastest.
    axes: BTreeMap<String, Vec<serde_json::Value>>,
    #[serde(default = "default_cap")]
    cap: usize,
}

pub fn cmd_sweep(config: &Path, grid: &Path, workers: usize) -> Result<()> {
    let base = ExperimentConfig::load(config)?;
    let grid_text = std::fs::read_to_string(grid)
        .with_context(|| format!("cannot read grid {}", grid.display()))?;
    let grid: GridFile =
        serde_json::from_str(&grid_text).with_context(|| format!("invalid grid {}", grid.display()))?;
    if grid.axes.is_empty() || grid.axes.values().any(|v| v.is_empty()) {
        bail!("grid axes must be non-empty");
    }
    let n_cells: usize = grid.axes.values().map(Vec::len).product();
    if n_cells > grid.cap {
        bail!("grid has {n_cells} cells, exceeding cap {}; raise \"cap\" to at least {n_cells}", grid.cap);
    }

    let axis_names: Vec<&String> = grid.axes.keys().collect();
    let axis_values: Vec<&Vec<serde_json::Value>> = grid.axes.values().collect();
    let out_dir = PathBuf::from(&base.out_dir);

    // Materialize each cell's config by overriding top-level keys.
    let mut cells: Vec<(Vec<serde_json::Value>, ExperimentConfig)> = Vec::new();
    let mut index = vec![0usize; axis_names.len()];
    loop {
        let mut value = serde_json::to_value(&base)?;
        let obj = value.as_object_mut().expect("config serializes to an object");
        let mut cell_values = Vec::with_capacity(index.len());
        for (a, &i) in index.iter().enumerate() {
            let v = axis_values[a][i].clone();
            if !obj.contains_key(axis_names[a].as_str()) {
                bail!("unknown sweep axis `{}`", axis_names[a]);
            }
            obj.insert(axis_names[a].clone(), v.clone());
            cell_values.push(v);
        }
        let cell_id = cells.len();
        obj.insert(
            "out_dir".to_string(),
            serde_json::Value::String(
                out_dir.join(format!("cells/cell_{cell_id:03}")).display().to_string(),
            ),
        );
        let cfg: ExperimentConfig = serde_json::from_value(value)
            .with_context(|| format!("cell {cell_id}: merged config invalid"))?;
        cells.push((cell_values, cfg));

        // Advance the cartesian counter, last axis fastest.
        let mut pos = index.len();
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            index[pos] += 1;
            if index[pos] < axis_values[pos].len() {
                break;
            }
            index[pos] = 0;
        }
        if index.iter().all(|&i| i == 0) {
            break;
        }
    }

    // Cells are isolated; parallelize across them, serial inside.
    let summaries = crate::workers::parallel_map(cells.len(), workers, |i| {
        run_experiment(&cells[i].1, 1).with_context(|| format!("cell {i}"))
    })?;

    let mut header: Vec<String> = axis_names.iter().map(|s| s.to_string()).collect();
    header.push("accuracy".to_string());
    header.push("ci".to_string());
    let mut csv = Csv::new(header);
    for ((values, _), summary) in cells.iter().zip(&summaries) {
        let mut row: Vec<String> = values.iter().map(render_grid_value).collect();
        row.push(fmt_f64(summary.accuracy));
        row.push(fmt_f64(summary.ci));
        csv.push(row);
    }
    write_atomic(&out_dir.join("sweep.csv"), csv.render().as_bytes())?;

    if axis_names.len() == 2 {
        let rows = axis_values[0];
        let cols = axis_values[1];
        let mut text = format!("{:>14} |", format!("{}\\{}", axis_names[0], axis_names[1]));
        for c in cols {
            text.push_str(&format!(" {:>10}", render_grid_value(c)));
        }
        text.push('\n');
        text.push_str(&"-".repeat(16 + 11 * cols.len()));
        text.push('\n');
        for (ri, r) in rows.iter().enumerate() {
            text.push_str(&format!("{:>14} |", render_grid_value(r)));
            for ci in 0..cols.len() {
                let acc = summaries[ri * cols.len() + ci].accuracy;
                text.push_str(&format!(" {acc:>10.4}"));
            }
            text.push('\n');
        }
        write_atomic(&out_dir.join("heat.txt"), text.as_bytes())?;
        print!("{text}");
    }
    println!("sweep: {} cells -> {}", cells.len(), out_dir.join("sweep.csv").display());
    Ok(())
}

fn render_grid_value(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn cmd_curve(config: &Path, checkpoints: &[String], workers: usize) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let prepared = prepare(cfg)?;
    let cfg = &prepared.cfg;
    let steps = cfg.eval.curve_steps;

    let mut names: Vec<String> = Vec::new();
    let mut models = Vec::new();
    for arg in checkpoints {
        let (name, params) = if arg == "scratch" {
            (
                "scratch".to_string(),
                init_params(&prepared.model, derive_seed(cfg.seed, SALT_INIT))
                    .map_err(|e| anyhow::anyhow!("{e}"))?,
            )
        } else {
            let path = Path::new(arg);
            let params = load_checkpoint(path)?;
            if params.spec() != &prepared.model {
                bail!(
                    "checkpoint {} carries model spec {:?}, config resolves to {:?}",
                    path.display(),
                    params.spec(),
                    prepared.model
                );
            }
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("model")
                .to_string();
            (stem, params)
        };
        let mut unique = name.clone();
        let mut k = 2;
        while names.contains(&unique) {
            unique = format!("{name}_{k}");
            k += 1;
        }
        names.push(unique);
        models.push(params);
    }

    let sampler = TargetTaskSampler {
        dataset: &prepared.test,
        n_way: cfg.n_way,
        k_shot: cfg.eval.k_shot,
        seed: derive_seed(cfg.seed, SALT_EVAL),
        stream_base: 0,
    };
    let mut curves = Vec::new();
    for params in &models {
        let report = parallel_evaluate(
            params,
            &sampler,
            cfg.eval.n_tasks,
            steps,
            cfg.eval_lr(),
            true,
            workers,
        )?;
        curves.push(report.curve.expect("curve requested"));
    }

    let mut header = vec!["step".to_string()];
    for name in &names {
        header.push(format!("acc_{name}"));
        header.push(format!("ci_{name}"));
    }
    let mut csv = Csv::new(header);
    for s in 0..=steps {
        let mut row = vec![s.to_string()];
        for curve in &curves {
            row.push(fmt_f64(curve[s].0));
            row.push(fmt_f64(curve[s].1));
        }
        csv.push(row);
    }
    let out_dir = PathBuf::from(&cfg.out_dir);
    write_atomic(&out_dir.join("curve.csv"), csv.render().as_bytes())?;

    if cfg.emit_plots {
        let series: Vec<svg::Series> = names
            .iter()
            .zip(&curves)
            .map(|(name, curve)| svg::Series {
                name: name.clone(),
                points: curve.iter().enumerate().map(|(s, &(m, _))| (s as f64, m)).collect(),
                band: Some(
                    curve
                        .iter()
                        .enumerate()
                        .map(|(s, &(m, c))| (s as f64, m - c, m + c))
                        .collect(),
                ),
            })
            .collect();
        let plot = svg::line_plot(
            "target-task training curves",
            "gradient step",
            "query accuracy",
            &series,
        );
        write_atomic(&out_dir.join("curve.svg"), plot.as_bytes())?;
    }
    for (name, curve) in names.iter().zip(&curves) {
        println!(
            "{name}: step0 {:.4}, step{} {:.4}",
            curve[0].0,
            steps,
            curve[steps].0
        );
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum TruthConfig {
    Linear { slope: f64, intercept: f64 },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ToyFile {
    truth: TruthConfig,
    model: String,
    noise_sigma: f64,
    train_xs: Vec<f64>,
    x0_heldout: f64,
    n_datasets: usize,
    n_test_points: usize,
    seed: u64,
}

#[derive(Serialize)]
struct DecompositionJson {
    mse: f64,
    bias_sq: f64,
    variance: f64,
    noise_var: f64,
    decomposition_gap: f64,
    gap_stderr: f64,
}

impl From<&Decomposition> for DecompositionJson {
    fn from(d: &Decomposition) -> Self {
        DecompositionJson {
            mse: d.mse,
            bias_sq: d.bias_sq,
            variance: d.variance,
            noise_var: d.noise_var,
            decomposition_gap: d.decomposition_gap,
            gap_stderr: d.gap_stderr,
        }
    }
}

#[derive(Serialize)]
struct BiasVarJson {
    held_out: DecompositionJson,
    in_training: DecompositionJson,
    n_datasets: usize,
}

pub fn cmd_biasvar(toy: &Path) -> Result<()> {
    let text = std::fs::read_to_string(toy)
        .with_context(|| format!("cannot read toy spec {}", toy.display()))?;
    let file: ToyFile =
        serde_json::from_str(&text).with_context(|| format!("invalid toy spec {}", toy.display()))?;
    let model = match file.model.as_str() {
        "oracle" => ToyModel::Oracle,
        "linear" => ToyModel::Linear,
        "constant" => ToyModel::Constant,
        other => bail!("unknown toy model `{other}`"),
    };
    let spec = ToySpec {
        truth: match file.truth {
            TruthConfig::Linear { slope, intercept } => Truth::Linear { slope, intercept },
        },
        model,
        noise_sigma: file.noise_sigma,
        train_xs: file.train_xs,
        x0_heldout: file.x0_heldout,
    };
    let report = bias_variance_estimate(&spec, file.n_datasets, file.n_test_points, file.seed)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let json = BiasVarJson {
        held_out: (&report.held_out).into(),
        in_training: (&report.in_training).into(),
        n_datasets: report.n_datasets,
    };
    print!("{}", to_canonical_json(&json)?);
    Ok(())
}

pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<()> {
    struct Row {
        algorithm: String,
        n_way: u64,
        k_shot: u64,
        accuracy: String,
        ci: String,
    }
    let mut rows = Vec::new();
    for dir in dirs {
        let v = load_summary_value(dir)?;
        let need = |key: &str| -> Result<&serde_json::Value> {
            v.get(key)
                .with_context(|| format!("{}: summary missing `{key}`", dir.display()))
        };
        rows.push(Row {
            algorithm: need("algorithm")?
                .as_str()
                .context("algorithm must be a string")?
                .to_string(),
            n_way: need("n_way")?.as_u64().context("n_way must be an integer")?,
            k_shot: need("k_shot")?.as_u64().context("k_shot must be an integer")?,
            accuracy: need("accuracy")?.to_string(),
            ci: need("ci")?.to_string(),
        });
    }

    let mut settings: Vec<(u64, u64)> = rows.iter().map(|r| (r.n_way, r.k_shot)).collect();
    settings.sort_unstable();
    settings.dedup();
    let mut algorithms: Vec<String> = rows.iter().map(|r| r.algorithm.clone()).collect();
    algorithms.sort();
    algorithms.dedup();

    let mut header = vec!["algorithm".to_string()];
    for &(n, k) in &settings {
        header.push(format!("acc_{n}w{k}s"));
        header.push(format!("ci_{n}w{k}s"));
    }
    let mut csv = Csv::new(header);
    let mut text = format!("{:<24}", "algorithm");
    for &(n, k) in &settings {
        text.push_str(&format!(" {:>18}", format!("({n},{k})")));
    }
    text.push('\n');
    for algo in &algorithms {
        let mut row = vec![algo.clone()];
        text.push_str(&format!("{algo:<24}"));
        for &(n, k) in &settings {
            match rows
                .iter()
                .find(|r| &r.algorithm == algo && r.n_way == n && r.k_shot == k)
            {
                Some(r) => {
                    row.push(r.accuracy.clone());
                    row.push(r.ci.clone());
                    let acc: f64 = r.accuracy.parse().unwrap_or(f64::NAN);
                    let ci: f64 = r.ci.parse().unwrap_or(f64::NAN);
                    text.push_str(&format!(" {:>18}", format!("{acc:.4} ± {ci:.4}")));
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                    text.push_str(&format!(" {:>18}", ""));
                }
            }
        }
        text.push('\n');
        csv.push(row);
    }

    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("report.csv"), csv.render().as_bytes())?;
    write_atomic(&out.join("report.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}
