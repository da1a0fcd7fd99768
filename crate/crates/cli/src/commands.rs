use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use la2former::attention::soft_mask_values;
use la2former::bench::{run_case, BenchCase, BenchRow, BenchSettings};
use la2former::data::{generate_darcy, generate_pointcloud_task, read_dataset, write_dataset, Dataset};
use la2former::model::{ModelConfig, OperatorModel};
use la2former::training::{evaluate, train, EpochRecord, TrainConfig, TrainOutcome, TrainReport};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{
    AblateArgs, BenchArgs, Command, DumpMaskArgs, EvalArgs, GenerateArgs, ScaleArgs, Split, Task, TrainArgs,
};
use crate::CliError;

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::AblateWindow(a) => cmd_ablate_window(&a),
        Command::ScaleStudy(a) => cmd_scale_study(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::DumpMask(a) => cmd_dump_mask(&a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `<stem>.csv` and its `<stem>.json` sidecar into `dir`.
pub fn write_table(dir: &Path, stem: &str, csv: &str, sidecar: &Value) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    let json_path = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    text.push('\n');
    fs::write(&json_path, text).map_err(io_err(&json_path))
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::Usage(format!("no dataset found at {}", dir.display())));
    }
    Ok(read_dataset(dir)?)
}

fn load_checkpoint(path: &Path) -> Result<OperatorModel, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("no checkpoint found at {}", path.display())));
    }
    Ok(OperatorModel::load(path)?)
}

// ---------------------------------------------------------------------------
// generate

pub fn cmd_generate(a: &GenerateArgs) -> Result<(), CliError> {
    let ds = match a.task {
        Task::Darcy => generate_darcy(a.n, a.grid, a.seed)?,
        Task::Pointcloud => generate_pointcloud_task(a.n, a.points, a.seed)?,
    };
    write_dataset(&ds, &a.out)?;
    let man = &ds.manifest;
    println!(
        "wrote {} to {}: {} samples x {} points, {} train / {} test",
        man.name,
        a.out.display(),
        man.num_samples,
        man.num_points,
        man.train_size,
        man.test_size
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// training

/// The configured model with channel counts taken from the dataset.
pub fn model_config_for(cfg: &ModelConfig, ds: &Dataset) -> ModelConfig {
    ModelConfig {
        in_channels: ds.manifest.in_channels,
        coord_dim: ds.manifest.coord_dim,
        out_channels: ds.manifest.out_channels,
        ..cfg.clone()
    }
}

pub struct TrainedRun {
    pub last: OperatorModel,
    pub outcome: TrainOutcome,
}

/// Initializes a model from `model_cfg` and trains it, logging each epoch
/// to stderr when `label` is given.
pub fn train_model(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    ds: &Dataset,
    label: Option<&str>,
) -> Result<TrainedRun, CliError> {
    let mut model = OperatorModel::init(model_cfg.clone())?;
    let log = |e: &EpochRecord| {
        if let Some(label) = label {
            let masks: Vec<String> = e.mask_fractions.iter().map(|s| format!("{s:.4}")).collect();
            eprintln!(
                "{label} epoch {:>3}  train {:.5}  test {:.5}  sigma(s) [{}]  {:.2}s",
                e.epoch,
                e.train_loss,
                e.test_rel_l2,
                masks.join(", "),
                e.epoch_seconds
            );
        }
    };
    let outcome = train(&mut model, ds, train_cfg, log)?;
    Ok(TrainedRun { last: model, outcome })
}

fn report_summary(report: &TrainReport) -> Value {
    let best = report.best_epoch();
    json!({
        "initial_test_rel_l2": report.initial_test_rel_l2,
        "initial_mask_fractions": report.initial_mask_fractions,
        "final_test_rel_l2": report.epochs.last().map(|e| e.test_rel_l2),
        "final_mask_fractions": report.epochs.last().map(|e| e.mask_fractions.clone()),
        "best_epoch": best.map(|e| e.epoch),
        "best_test_rel_l2": best.map(|e| e.test_rel_l2),
    })
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = a.run.resolve()?;
    let ds = load_dataset(cfg.data_dir()?)?;
    cfg.model = model_config_for(&cfg.model, &ds);
    let out = cfg.out_dir()?.to_path_buf();
    let run = train_model(&cfg.model, &cfg.train, &ds, Some("train"))?;
    let report = &run.outcome.report;

    let sidecar = json!({
        "command": "train",
        "config": cfg,
        "dataset": ds.manifest.name,
        "dataset_seed": ds.manifest.seed,
        "summary": report_summary(report),
    });
    write_table(&out, "report", &report.to_csv(), &sidecar)?;
    run.outcome.best.save(&out.join("best.la2c"))?;
    run.last.save(&out.join("last.la2c"))?;
    let last = report.epochs.last().expect("at least one epoch");
    println!("final test relative L2: {:.6}", last.test_rel_l2);
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let ds = load_dataset(&a.data)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let man = &ds.manifest;
    let indices: Vec<usize> = match a.split {
        Split::Train => man.train_indices.clone(),
        Split::Test => man.test_indices.clone(),
        Split::All => (0..man.num_samples).collect(),
    };
    let metrics = evaluate(&model, &ds, &indices)?;
    if let Some(out) = &a.out {
        let mut csv = String::from("sample,rel_l2\n");
        for (i, v) in indices.iter().zip(&metrics.per_sample) {
            let _ = writeln!(csv, "{i},{v:e}");
        }
        let sidecar = json!({
            "command": "eval",
            "data": a.data,
            "checkpoint": a.checkpoint,
            "split": format!("{:?}", a.split).to_lowercase(),
            "model": model.config,
            "mean_rel_l2": metrics.mean,
        });
        write_table(out, "eval", &csv, &sidecar)?;
    }
    println!("mean relative L2 over {} samples: {:.6}", indices.len(), metrics.mean);
    Ok(())
}

// ---------------------------------------------------------------------------
// sweeps

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One trained configuration of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub hidden: usize,
    pub layers: usize,
    pub params: usize,
    pub first_train_loss: f64,
    pub final_train_loss: f64,
    pub final_test_rel_l2: f64,
    pub best_test_rel_l2: f64,
    /// Median over epochs of the training time per epoch.
    pub epoch_seconds: f64,
}

impl SweepRow {
    fn from_run(model: &ModelConfig, run: &TrainedRun) -> Self {
        let report = &run.outcome.report;
        let (first, last) = (&report.epochs[0], report.epochs.last().expect("epochs"));
        let seconds: Vec<f64> = report.epochs.iter().map(|e| e.epoch_seconds).collect();
        Self {
            k: model.k,
            hidden: model.hidden,
            layers: model.layers,
            params: run.last.num_params(),
            first_train_loss: first.train_loss,
            final_train_loss: last.train_loss,
            final_test_rel_l2: last.test_rel_l2,
            best_test_rel_l2: report.best_epoch().expect("epochs").test_rel_l2,
            epoch_seconds: median(&seconds),
        }
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut csv = String::from(
        "k,hidden,layers,params,first_train_loss,final_train_loss,final_test_rel_l2,best_test_rel_l2,epoch_seconds\n",
    );
    for r in rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{:e},{:e},{:e},{:e},{:.6}",
            r.k,
            r.hidden,
            r.layers,
            r.params,
            r.first_train_loss,
            r.final_train_loss,
            r.final_test_rel_l2,
            r.best_test_rel_l2,
            r.epoch_seconds
        );
    }
    csv
}

/// Trains every model config in turn on the same dataset, split and seeds.
/// Per-run reports go to `out/<tag>/report.csv` when `out` is given.
pub fn run_sweep(
    configs: &[(String, ModelConfig)],
    train_cfg: &TrainConfig,
    ds: &Dataset,
    out: Option<&Path>,
    verbose: bool,
) -> Result<Vec<SweepRow>, CliError> {
    for (_, m) in configs {
        m.validate()?;
        if m.k > ds.num_points() {
            return Err(CliError::Usage(format!(
                "patch size K={} exceeds the {} points of the dataset",
                m.k,
                ds.num_points()
            )));
        }
    }
    train_cfg.validate()?;
    let mut rows = Vec::with_capacity(configs.len());
    for (tag, model_cfg) in configs {
        let run = train_model(model_cfg, train_cfg, ds, verbose.then_some(tag.as_str()))?;
        if let Some(out) = out {
            let sidecar = json!({
                "command": "sweep-run",
                "model": model_cfg,
                "train": train_cfg,
                "summary": report_summary(&run.outcome.report),
            });
            write_table(&out.join(tag), "report", &run.outcome.report.to_csv(), &sidecar)?;
        }
        rows.push(SweepRow::from_run(model_cfg, &run));
    }
    Ok(rows)
}

pub fn ablation_configs(base: &ModelConfig, ks: &[usize]) -> Vec<(String, ModelConfig)> {
    ks.iter()
        .map(|&k| (format!("k{k}"), ModelConfig { k, ..base.clone() }))
        .collect()
}

pub fn cmd_ablate_window(a: &AblateArgs) -> Result<(), CliError> {
    if a.ks.is_empty() {
        return Err(CliError::Usage("no patch sizes given".into()));
    }
    let mut cfg = a.run.resolve()?;
    let ds = load_dataset(cfg.data_dir()?)?;
    cfg.model = model_config_for(&cfg.model, &ds);
    let out = cfg.out_dir()?.to_path_buf();
    let rows = run_sweep(&ablation_configs(&cfg.model, &a.ks), &cfg.train, &ds, Some(&out), true)?;
    let sidecar = json!({ "command": "ablate-window", "ks": a.ks, "config": cfg, "rows": rows });
    let csv = sweep_csv(&rows);
    write_table(&out, "ablation", &csv, &sidecar)?;
    print!("{csv}");
    Ok(())
}

pub fn scale_configs(base: &ModelConfig, widths: &[usize], depths: &[usize]) -> Vec<(String, ModelConfig)> {
    let widths = if widths.is_empty() { vec![base.hidden] } else { widths.to_vec() };
    let depths = if depths.is_empty() { vec![base.layers] } else { depths.to_vec() };
    let mut out = Vec::new();
    for &hidden in &widths {
        for &layers in &depths {
            let cfg = ModelConfig {
                hidden,
                layers,
                ..base.clone()
            };
            out.push((format!("c{hidden}_l{layers}"), cfg));
        }
    }
    out
}

pub fn cmd_scale_study(a: &ScaleArgs) -> Result<(), CliError> {
    let mut cfg = a.run.resolve()?;
    let ds = load_dataset(cfg.data_dir()?)?;
    cfg.model = model_config_for(&cfg.model, &ds);
    let out = cfg.out_dir()?.to_path_buf();
    let configs = scale_configs(&cfg.model, &a.widths, &a.depths);
    let rows = run_sweep(&configs, &cfg.train, &ds, Some(&out), true)?;
    let sidecar = json!({
        "command": "scale-study",
        "widths": a.widths,
        "depths": a.depths,
        "config": cfg,
        "rows": rows,
    });
    let csv = sweep_csv(&rows);
    write_table(&out, "scale", &csv, &sidecar)?;
    print!("{csv}");
    Ok(())
}

// ---------------------------------------------------------------------------
// bench and mask

pub fn bench_cases(a: &BenchArgs) -> Vec<BenchCase> {
    let mut cases = Vec::new();
    for &kind in &a.kinds {
        for &hidden in &a.hidden {
            for &points in &a.points {
                let ks: &[usize] = if kind == crate::args::KindArg::Local { &a.ks } else { &[0] };
                for &k in ks {
                    cases.push(BenchCase {
                        kind: kind.into(),
                        points,
                        k,
                        hidden,
                    });
                }
            }
        }
    }
    cases
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut csv = String::from("kind,points,k,hidden,median_seconds,repeats\n");
    for r in rows {
        let c = &r.case;
        let _ = writeln!(
            csv,
            "{},{},{},{},{:e},{}",
            c.kind.name(),
            c.points,
            c.k,
            c.hidden,
            r.median_seconds,
            r.samples.len()
        );
    }
    csv
}

pub fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    let settings = BenchSettings {
        repeats: a.repeats,
        memory_cap_bytes: a.memory_cap_mb.saturating_mul(1 << 20),
        seed: a.seed,
    };
    let cases = bench_cases(a);
    if cases.is_empty() {
        return Err(CliError::Usage("no benchmark cases".into()));
    }
    // Reject the whole sweep up front rather than after partial timings.
    for case in &cases {
        let needed = la2former::bench::estimated_bytes(case);
        if needed > settings.memory_cap_bytes {
            return Err(la2former::bench::BenchError::MemoryCap {
                needed,
                cap: settings.memory_cap_bytes,
            }
            .into());
        }
    }
    let mut rows = Vec::with_capacity(cases.len());
    for case in &cases {
        let row = run_case(case, &settings)?;
        eprintln!(
            "{:<6} M={:<6} K={:<3} C={:<4} {:.6}s",
            case.kind.name(),
            case.points,
            case.k,
            case.hidden,
            row.median_seconds
        );
        rows.push(row);
    }
    let csv = bench_csv(&rows);
    if let Some(out) = &a.out {
        let sidecar = json!({ "command": "bench", "settings": settings, "cases": cases });
        write_table(out, "bench", &csv, &sidecar)?;
    }
    print!("{csv}");
    Ok(())
}

pub fn mask_csv(model: &OperatorModel) -> String {
    let k = model.config.k;
    let mut csv = String::from("layer,s,sigma_s");
    for i in 1..=k {
        let _ = write!(csv, ",w_{i}");
    }
    csv.push('\n');
    for (l, layer) in model.layers.iter().enumerate() {
        let s = layer.mask_s.data()[0];
        let _ = write!(csv, "{},{s:e},{:e}", l + 1, layer.mask_fraction());
        for w in soft_mask_values(s, model.config.alpha, k) {
            let _ = write!(csv, ",{w:e}");
        }
        csv.push('\n');
    }
    csv
}

pub fn cmd_dump_mask(a: &DumpMaskArgs) -> Result<(), CliError> {
    let model = load_checkpoint(&a.checkpoint)?;
    let csv = mask_csv(&model);
    if let Some(out) = &a.out {
        let sidecar = json!({ "command": "dump-mask", "checkpoint": a.checkpoint, "model": model.config });
        write_table(out, "mask", &csv, &sidecar)?;
    }
    print!("{csv}");
    Ok(())
}

