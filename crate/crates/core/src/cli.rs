//! Command-line front end: `prepare`, `train`, `eval` and `ablate`.
//!
//! Every command writes into a fresh output directory (never reusing an
//! existing non-empty one) together with the fully resolved configuration,
//! so `--config <out>/config.json` re-runs it exactly.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::archive::Archive;
use crate::config::{split_overrides, ExperimentConfig};
use crate::data::{materialize_mvtec_layout, DatasetManifest, ToySpec};
use crate::error::{Error, Result};
use crate::experiment::{evaluate_model, train_run, RunOutput};
use crate::metrics::{evaluate, EvalResult, DEFAULT_FPR_LIMIT};
use crate::plot;
use crate::score::{score_dataset, write_heatmaps, write_score_table, AnomalyMap, TrainedModel};
use crate::train::{model_from_checkpoint, Setting};

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "AGP_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "agp", version, about = "Attention-guided perturbation anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a dataset layout or materialize the toy dataset.
    Prepare(CommonArgs),
    /// Train one model (multi-class, few-shot) or one per category (one-class).
    Train(CommonArgs),
    /// Score the test split with a trained run and compute metrics.
    Eval(EvalArgs),
    /// Train and evaluate a grid of switch settings.
    Ablate(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON configuration file (e.g. a previous run's config.json).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root in the MVTec-AD layout.
    #[arg(long, conflicts_with = "toy")]
    pub root: Option<PathBuf>,
    /// Use the synthetic toy dataset.
    #[arg(long)]
    pub toy: bool,
    /// Toy: number of categories. Dataset root: comma-separated names.
    #[arg(long)]
    pub categories: Option<String>,
    /// multi_class, one_class, few_shot or few_shot:<k>.
    #[arg(long)]
    pub setting: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides `key=value,...`; for `ablate`, `|` separates grid values.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Output directory (must not exist or be empty).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Training run directory or checkpoint file.
    pub run: PathBuf,
    /// Expected configuration; a mismatch with the checkpoint is an error.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluate on this dataset root instead of the one recorded in the run.
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write one heatmap per test image.
    #[arg(long)]
    pub heatmaps: bool,
}

/// Process exit code for a command result.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_usage() => 2,
        Err(_) => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ()),
    }
}

/// Configuration described by the common flags, before resolution.
pub fn config_from_args(a: &CommonArgs) -> Result<ExperimentConfig> {
    let mut c = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::toy(7),
    };
    if a.toy {
        if c.data.toy.is_none() {
            c.data.toy = Some(ToySpec::default());
        }
        c.data.root = None;
    }
    if let Some(root) = &a.root {
        c.data.root = Some(root.clone());
        c.data.toy = None;
    }
    if let Some(cats) = &a.categories {
        match c.data.toy.as_mut() {
            Some(toy) => {
                toy.n_categories = cats
                    .parse()
                    .map_err(|_| Error::Usage(format!("--categories {cats:?}: toy data needs a count")))?;
            }
            None => {
                c.data.categories = cats
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
            }
        }
    }
    if let Some(s) = &a.setting {
        let (name, k) = match s.split_once(':') {
            Some((n, k)) => (n, Some(k)),
            None => (s.as_str(), None),
        };
        c.train.setting = name.parse()?;
        if let Some(k) = k {
            c.train.few_shot_k = k
                .parse()
                .map_err(|_| Error::Usage(format!("bad few-shot k in {s:?}")))?;
        }
    }
    if let Some(seed) = a.seed {
        c.set_seed(seed);
    }
    if let Some(e) = a.epochs {
        c.train.epochs = e;
    }
    Ok(c)
}

/// Create `dir` for a new run. Refuses a path that already holds files.
pub fn create_output_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let empty = dir.is_dir() && fs::read_dir(dir)?.next().is_none();
        if !empty {
            return Err(Error::Usage(format!(
                "output directory {} already exists and is not empty",
                dir.display()
            )));
        }
        return Ok(());
    }
    if let Some(parent) = dir.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::create_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::AlreadyExists => {
            Error::Usage(format!("output directory {} already exists", dir.display()))
        }
        _ => Error::Io(e),
    })
}

/// `--out`, or the first free `<root>/<stem>-NNN` under `$AGP_OUT_DIR`
/// (default `runs`).
fn output_dir(explicit: Option<&Path>, stem: &str) -> Result<PathBuf> {
    if let Some(p) = explicit {
        create_output_dir(p)?;
        return Ok(p.to_path_buf());
    }
    let root = std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&root)?;
    for n in 1.. {
        let dir = root.join(format!("{stem}-{n:03}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

fn run_stem(cmd: &str, c: &ExperimentConfig) -> String {
    format!("{cmd}-{}-seed{}", c.name, c.train.seed)
}

/// Write `manifest.json` describing every sample of `m`.
pub fn write_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    let samples: Vec<_> = m
        .samples
        .iter()
        .map(|s| {
            json!({
                "id": s.id,
                "category": s.category,
                "split": s.split,
                "label": s.label,
                "defect_type": s.defect_type,
                "has_mask": s.has_mask(),
            })
        })
        .collect();
    let doc = json!({"seed": m.seed, "categories": m.categories, "counts": m.counts(), "samples": samples});
    crate::archive::write_atomic(path, serde_json::to_string_pretty(&doc)?.as_bytes())
}

/// Per-category counts as printed by `prepare`.
pub fn manifest_summary(m: &DatasetManifest) -> String {
    let mut s = format!("{} categories, {} samples\n", m.categories.len(), m.len());
    s.push_str("category | train | test good | test defective\n");
    for (cat, c) in m.counts() {
        s.push_str(&format!(
            "{cat} | {} | {} | {}\n",
            c.train, c.test_normal, c.test_anomalous
        ));
    }
    s
}

pub fn cmd_prepare(a: &CommonArgs) -> Result<PathBuf> {
    let mut c = config_from_args(a)?;
    if let Some(spec) = &a.ablation {
        c.apply_overrides(spec)?;
    }
    let resolved = c.resolved()?;
    let manifest = resolved.manifest()?;
    let out = output_dir(a.out.as_deref(), &run_stem("prepare", &resolved))?;
    if resolved.data.toy.is_some() {
        materialize_mvtec_layout(&manifest, &out.join("data"))?;
    }
    write_manifest(&out.join("manifest.json"), &manifest)?;
    resolved.save(&out.join("config.json"))?;
    print!("{}", manifest_summary(&manifest));
    println!("wrote {}", out.display());
    Ok(out)
}

const RUNNING_MARKER: &str = "RUNNING";
const FAILED_MARKER: &str = "FAILED";

/// Run `f` with a marker file that is removed on success and replaced by
/// `FAILED` (holding the error) otherwise, so partial outputs are obvious.
fn with_markers<T>(dir: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    fs::write(dir.join(RUNNING_MARKER), b"")?;
    let r = f();
    let _ = fs::remove_file(dir.join(RUNNING_MARKER));
    if let Err(e) = &r {
        let _ = fs::write(dir.join(FAILED_MARKER), format!("{e}\n"));
    }
    r
}

fn write_run_artifacts(dir: &Path, run: &RunOutput) -> Result<()> {
    let total: Vec<f64> = run.log.iter().map(|r| r.l_total).collect();
    let feat: Vec<f64> = run.log.iter().map(|r| r.l_feat).collect();
    let imgfeat: Vec<f64> = run.log.iter().map(|r| r.l_imgfeat).collect();
    plot::line_chart(&dir.join("loss.png"), &[&total, &feat, &imgfeat])
}

/// Train according to the flags; returns the run directory.
pub fn cmd_train(a: &CommonArgs) -> Result<PathBuf> {
    let mut c = config_from_args(a)?;
    if let Some(spec) = &a.ablation {
        c.apply_overrides(spec)?;
    }
    let c = c.resolved()?;
    let manifest = c.manifest()?;
    let out = output_dir(a.out.as_deref(), &run_stem("train", &c))?;
    c.save(&out.join("config.json"))?;
    with_markers(&out, || {
        match c.train.setting {
            Setting::OneClass => {
                for cat in &manifest.categories {
                    let dir = out.join(cat);
                    create_output_dir(&dir)?;
                    let mut cc = c.clone();
                    cc.name = format!("{}-{cat}", c.name);
                    cc.data.categories = vec![cat.clone()];
                    cc.save(&dir.join("config.json"))?;
                    let run = train_run(&cc, &manifest.only_category(cat), Some(&dir), None)?;
                    write_run_artifacts(&dir, &run)?;
                    println!("{cat}: final loss {:.6}", run.log.last().map_or(f64::NAN, |r| r.l_total));
                }
            }
            Setting::MultiClass | Setting::FewShot => {
                let run = train_run(&c, &manifest, Some(&out), None)?;
                write_run_artifacts(&out, &run)?;
                println!("final loss {:.6}", run.log.last().map_or(f64::NAN, |r| r.l_total));
            }
        }
        Ok(())
    })?;
    println!("wrote {}", out.display());
    Ok(out)
}

/// Checkpoints of a run: `model.agp` itself, the run's top-level one, or one
/// per category subdirectory.
pub fn find_checkpoints(run: &Path) -> Result<Vec<PathBuf>> {
    if run.is_file() {
        return Ok(vec![run.to_path_buf()]);
    }
    let top = run.join("model.agp");
    if top.is_file() {
        return Ok(vec![top]);
    }
    let mut found = Vec::new();
    if run.is_dir() {
        for entry in fs::read_dir(run)? {
            let p = entry?.path().join("model.agp");
            if p.is_file() {
                found.push(p);
            }
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::Usage(format!("no model.agp under {}", run.display())));
    }
    Ok(found)
}

fn check_matches(expected: &ExperimentConfig, stored: &ExperimentConfig) -> Result<()> {
    let expected = expected.resolved()?;
    let mut diffs = Vec::new();
    if expected.encoder != stored.encoder {
        diffs.push("encoder".to_string());
    }
    if expected.decoder != stored.decoder {
        diffs.push("decoder".to_string());
    }
    if expected.train.image_size != stored.train.image_size {
        diffs.push("train.image_size".to_string());
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::load("checkpoint does not match the given config", diffs))
    }
}

/// Evaluate a training run; returns the output directory and metrics.
pub fn cmd_eval(a: &EvalArgs) -> Result<(PathBuf, EvalResult)> {
    let checkpoints = find_checkpoints(&a.run)?;
    let expected = a.config.as_deref().map(ExperimentConfig::load).transpose()?;
    let mut models: Vec<(TrainedModel, ExperimentConfig)> = Vec::new();
    for p in &checkpoints {
        let (model, cfg) = model_from_checkpoint(&Archive::read(p)?)?;
        if let Some(exp) = &expected {
            check_matches(exp, &cfg)?;
        }
        models.push((model, cfg));
    }
    let first = models[0].1.clone();
    let out = output_dir(a.out.as_deref(), &run_stem("eval", &first))?;
    let mut maps: Vec<AnomalyMap> = Vec::new();
    for (model, cfg) in &models {
        let mut cfg = cfg.clone();
        if let Some(root) = &a.root {
            cfg.data.root = Some(root.clone());
            cfg.data.toy = None;
        }
        let mut manifest = cfg.manifest()?;
        if models.len() > 1 {
            manifest = manifest.only_category(&cfg.data.categories.concat());
        }
        maps.extend(score_dataset(&manifest, model, &cfg.score)?);
    }
    let items: Vec<_> = maps.iter().map(AnomalyMap::eval_item).collect();
    let result = evaluate(&items, DEFAULT_FPR_LIMIT)?;
    first.save(&out.join("config.json"))?;
    result.write_csv(&out.join("metrics.csv"))?;
    fs::write(out.join("metrics.txt"), result.to_table())?;
    write_score_table(&out.join("scores.csv"), &maps)?;
    let normal: Vec<f64> = maps.iter().filter(|m| !m.label.is_anomalous()).map(|m| m.image_score).collect();
    let anomalous: Vec<f64> = maps.iter().filter(|m| m.label.is_anomalous()).map(|m| m.image_score).collect();
    plot::histogram(&out.join("score_hist.png"), &[&normal, &anomalous], 20)?;
    if a.heatmaps {
        write_heatmaps(&out.join("heatmaps"), &maps)?;
    }
    println!("{}", result.to_table());
    println!("wrote {}", out.display());
    Ok((out, result))
}

/// One axis of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Named grids accepted as `grid=<name>`.
pub fn named_grid(name: &str) -> Result<GridAxis> {
    let (key, values): (&str, &[&str]) = match name {
        "noise" => ("noise", &["-/-", "-/R", "-/A", "A/A"]),
        "mask" => ("mask", &["L", "D", "B"]),
        "teacher" => ("teacher", &["off", "on"]),
        "layers" => ("layers", &["3", "0:1", "2:3", "0:1:2:3"]),
        _ => return Err(Error::Usage(format!("unknown grid {name:?}"))),
    };
    Ok(GridAxis {
        key: key.into(),
        values: values.iter().map(|s| s.to_string()).collect(),
    })
}

/// Split an ablation spec into grid axes (values joined by `|`, or
/// `grid=<name>`), seeds (`seeds=7|8|9`) and fixed overrides.
pub fn parse_grid(spec: &str) -> Result<(Vec<GridAxis>, Vec<u64>, Vec<(String, String)>)> {
    let mut axes = Vec::new();
    let mut seeds = Vec::new();
    let mut fixed = Vec::new();
    for (k, v) in split_overrides(spec)? {
        if k == "grid" {
            for name in v.split(['|', ',']).filter(|s| !s.is_empty()) {
                axes.push(named_grid(name)?);
            }
        } else if k == "seeds" {
            for s in v.split(['|', ',']).filter(|s| !s.is_empty()) {
                seeds.push(s.parse().map_err(|_| Error::Usage(format!("bad seed {s:?}")))?);
            }
        } else if v.contains('|') {
            axes.push(GridAxis {
                key: k,
                values: v.split('|').map(str::to_string).collect(),
            });
        } else {
            fixed.push((k, v));
        }
    }
    if axes.is_empty() {
        return Err(Error::Usage(
            "empty ablation grid: give e.g. grid=noise or noise=-/-|A/A".into(),
        ));
    }
    Ok((axes, seeds, fixed))
}

/// All value combinations of `axes`, first axis varying slowest.
pub fn grid_cells(axes: &[GridAxis]) -> Vec<Vec<String>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut row = prefix.clone();
                    row.push(v.clone());
                    row
                })
            })
            .collect()
    })
}

/// Metrics of one grid cell, averaged over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub values: Vec<String>,
    pub per_seed: Vec<(u64, EvalResult)>,
}

impl AblationRow {
    pub fn mean(&self) -> (f64, f64, f64) {
        let n = self.per_seed.len().max(1) as f64;
        let sum = self.per_seed.iter().fold((0.0, 0.0, 0.0), |a, (_, r)| {
            (a.0 + r.mean.i_auc, a.1 + r.mean.p_auc, a.2 + r.mean.pro)
        });
        (sum.0 / n, sum.1 / n, sum.2 / n)
    }
}

/// Text table: one row per cell, mean metrics over seeds in percent.
pub fn ablation_table(axes: &[GridAxis], rows: &[AblationRow]) -> String {
    let mut head: Vec<String> = axes.iter().map(|a| a.key.clone()).collect();
    head.push("I-AUC / P-AUC / PRO (%)".into());
    let mut lines = vec![head.join(" | ")];
    for r in rows {
        let (i, p, o) = r.mean();
        let mut cols = r.values.clone();
        cols.push(format!("{:.1} / {:.1} / {:.1}", 100.0 * i, 100.0 * p, 100.0 * o));
        lines.push(cols.join(" | "));
    }
    lines.join("\n") + "\n"
}

/// Train and evaluate every cell of the ablation grid in `a.ablation`.
pub fn cmd_ablate(a: &CommonArgs) -> Result<(PathBuf, Vec<AblationRow>)> {
    let spec = a
        .ablation
        .as_deref()
        .ok_or_else(|| Error::Usage("ablate needs --ablation with at least one grid axis".into()))?;
    let (axes, mut seeds, fixed) = parse_grid(spec)?;
    let mut base = config_from_args(a)?;
    for (k, v) in &fixed {
        base.apply_override(k, v)?;
    }
    if seeds.is_empty() {
        seeds.push(base.train.seed);
    }
    let out = output_dir(a.out.as_deref(), &format!("ablate-{}", base.name))?;
    base.resolved()?.save(&out.join("config.json"))?;
    let cells = grid_cells(&axes);
    let mut rows = Vec::new();
    with_markers(&out, || {
        let mut csv = csv::Writer::from_path(out.join("ablation.csv"))?;
        let mut head: Vec<String> = axes.iter().map(|x| x.key.clone()).collect();
        head.extend(["seed", "i_auc", "p_auc", "pro"].map(String::from));
        csv.write_record(&head)?;
        for values in &cells {
            let mut per_seed = Vec::new();
            for &seed in &seeds {
                let mut c = base.clone();
                c.set_seed(seed);
                for (axis, v) in axes.iter().zip(values) {
                    c.apply_override(&axis.key, v)?;
                }
                let manifest = c.resolved()?.manifest()?;
                let run = train_run(&c, &manifest, None, None)?;
                let (result, _) = evaluate_model(&run.model()?, &manifest, &run.config.score)?;
                let mut rec = values.clone();
                rec.push(seed.to_string());
                rec.extend(
                    [result.mean.i_auc, result.mean.p_auc, result.mean.pro].map(|v| format!("{v:.6}")),
                );
                csv.write_record(&rec)?;
                csv.flush()?;
                println!("{} seed {seed}: I-AUC {:.3}", values.join(" "), result.mean.i_auc);
                per_seed.push((seed, result));
            }
            rows.push(AblationRow {
                values: values.clone(),
                per_seed,
            });
        }
        Ok(())
    })?;
    let table = ablation_table(&axes, &rows);
    fs::write(out.join("ablation.txt"), &table)?;
    let bars: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let (i, p, o) = r.mean();
            vec![i, p, o]
        })
        .collect();
    plot::bar_chart(&out.join("ablation.png"), &bars, 0.4, 1.0)?;
    print!("{table}");
    println!("wrote {}", out.display());
    Ok((out, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let (axes, seeds, fixed) = parse_grid("grid=noise,seeds=7|8|9,train.epochs=3").unwrap();
        assert_eq!(axes[0].values.len(), 4);
        assert_eq!(seeds, vec![7, 8, 9]);
        assert_eq!(fixed, vec![("train.epochs".to_string(), "3".to_string())]);
        let (axes, _, _) = parse_grid("mask=L|D|B,noise=-/-|A/A").unwrap();
        assert_eq!(grid_cells(&axes).len(), 6);
        assert!(parse_grid("").unwrap_err().is_usage());
        assert!(parse_grid("train.epochs=3").unwrap_err().is_usage());
    }

    #[test]
    fn output_dir_is_exclusive() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path().join("run");
        create_output_dir(&d).unwrap();
        create_output_dir(&d).unwrap();
        fs::write(d.join("x"), b"1").unwrap();
        assert!(create_output_dir(&d).unwrap_err().is_usage());
    }

    #[test]
    fn toy_categories_flag() {
        let a = CommonArgs {
            toy: true,
            categories: Some("3".into()),
            setting: Some("few_shot:2".into()),
            ..CommonArgs::default()
        };
        let c = config_from_args(&a).unwrap();
        assert_eq!(c.data.toy.unwrap().n_categories, 3);
        assert_eq!((c.train.setting, c.train.few_shot_k), (Setting::FewShot, 2));
        let bad = CommonArgs {
            toy: true,
            categories: Some("x".into()),
            ..CommonArgs::default()
        };
        assert!(config_from_args(&bad).unwrap_err().is_usage());
    }
}
