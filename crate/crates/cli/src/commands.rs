use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crnn::data::{
    apply_normalization, balance_classes, group_stats, load_dataset, log_mel, read_manifest, read_wav,
    write_features, write_manifest, Dataset, GroupStats, ManifestEntry,
};
use crnn::io::{load_model, save_model};
use crnn::training::{evaluate, grad_check_with, train_with, GradCheckOptions, GradCheckReport};
use crnn::{Error, Result, Rng};

use crate::config::RunConfig;

/// Gradient checks fail the command at or above this relative error.
pub const GRADCHECK_FAIL: f64 = 1e-4;

pub const MODEL_FILE: &str = "model.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const STATS_FILE: &str = "normalization.json";
pub const CONFIG_FILE: &str = "run.conf";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Train,
    Eval,
    GradCheck,
    ExtractFeatures,
}

/// Paths given on the command line; they override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Everything a command reports on success.
pub enum Outcome {
    Done(String),
    /// Completed, but the gradient check found errors at or above the limit.
    GradCheckFailed(String),
}

pub fn run_command(verb: Verb, mut cfg: RunConfig, over: &Overrides, log: &mut dyn Write) -> Result<Outcome> {
    if let Some(out) = &over.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = over.seed {
        cfg.train.seed = seed;
    }
    match verb {
        Verb::Train => train(&cfg, over.data.as_deref(), log),
        Verb::Eval => eval(&cfg, over.data.as_deref()),
        Verb::GradCheck => gradcheck(&cfg),
        Verb::ExtractFeatures => extract(&cfg, over.data.as_deref()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))
}

fn manifest<'a>(given: Option<&'a Path>, configured: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    given
        .or(configured.as_deref())
        .ok_or_else(|| Error::Config(format!("no data manifest: pass --data or set `{key}`")))
}

fn load(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    let d = load_dataset(path, cfg.model.classes, &cfg.mel)?;
    if !d.is_empty() && d.input_dim != cfg.model.input_dim {
        return Err(Error::Config(format!(
            "{} has {} features per frame but input_dim = {}",
            path.display(),
            d.input_dim,
            cfg.model.input_dim
        )));
    }
    Ok(d)
}

/// Normalizes with `stats`, computing fresh statistics for unseen groups.
fn normalize_with(d: &Dataset, stats: &GroupStats) -> Result<Dataset> {
    let mut merged = group_stats(d);
    merged.groups.extend(stats.groups.clone());
    apply_normalization(d, &merged)
}

fn train(cfg: &RunConfig, data: Option<&Path>, log: &mut dyn Write) -> Result<Outcome> {
    let train_path = manifest(data, &cfg.train_manifest, "train_manifest")?;
    let valid_path = manifest(None, &cfg.valid_manifest, "valid_manifest")?;
    let mut train_set = load(cfg, train_path)?;
    let mut valid = load(cfg, valid_path)?;
    create_out_dir(&cfg.out_dir)?;

    if cfg.normalize {
        // statistics over every split, per group
        let mut all = train_set.examples.clone();
        all.extend(valid.examples.iter().cloned());
        if let Some(test) = &cfg.test_manifest {
            all.extend(load(cfg, test)?.examples);
        }
        let stats = group_stats(&Dataset::new(all, cfg.model.classes)?);
        train_set = apply_normalization(&train_set, &stats)?;
        valid = apply_normalization(&valid, &stats)?;
        let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
        write_file(&cfg.out_dir.join(STATS_FILE), json)?;
    }
    if cfg.balance {
        let mut rng = Rng::new(cfg.train.seed).split();
        train_set = balance_classes(&train_set, &mut rng)?;
    }

    let mut timing = String::new();
    let outcome = train_with(&cfg.train, &cfg.model, &train_set, &valid, |rec, secs| {
        timing.push_str(&format!("{{\"epoch\":{},\"seconds\":{secs:.6}}}\n", rec.epoch));
        let _ = writeln!(
            log,
            "epoch {:>3}  train_loss {:.6}  valid_ua_recall {:.4}  ({secs:.2}s)",
            rec.epoch, rec.train_loss, rec.valid_ua_recall
        );
    })?;

    let mut metrics = String::new();
    for rec in &outcome.history {
        metrics.push_str(&serde_json::to_string(rec).expect("record serializes"));
        metrics.push('\n');
    }
    write_file(&cfg.out_dir.join(METRICS_FILE), metrics)?;
    write_file(&cfg.out_dir.join(TIMING_FILE), timing)?;
    write_file(&cfg.out_dir.join(CONFIG_FILE), cfg.to_text())?;
    save_model(cfg.out_dir.join(MODEL_FILE), &outcome.model)?;

    let best = &outcome.history[outcome.best_epoch - 1];
    Ok(Outcome::Done(
        serde_json::json!({
            "best_epoch": outcome.best_epoch,
            "valid_ua_recall": best.valid_ua_recall,
            "epochs": outcome.history.len(),
            "stopped_early": outcome.stopped_early,
            "model": cfg.out_dir.join(MODEL_FILE),
        })
        .to_string(),
    ))
}

#[derive(Serialize)]
struct EvalReport<'a> {
    manifest: &'a Path,
    examples: usize,
    ua_recall: f64,
    per_class_recall: &'a [f64],
}

fn eval(cfg: &RunConfig, data: Option<&Path>) -> Result<Outcome> {
    let path = manifest(data, &cfg.test_manifest, "test_manifest")?;
    let model = load_model(cfg.out_dir.join(MODEL_FILE))?;
    if model.config.classes != cfg.model.classes {
        return Err(Error::Config(format!(
            "config has {} classes but the saved model has {}",
            cfg.model.classes, model.config.classes
        )));
    }
    if model.config.input_dim != cfg.model.input_dim {
        return Err(Error::Config(format!(
            "config has input_dim {} but the saved model has {}",
            cfg.model.input_dim, model.config.input_dim
        )));
    }
    let mut d = load(cfg, path)?;
    if cfg.normalize {
        let stats_path = cfg.out_dir.join(STATS_FILE);
        let stats = match fs::read_to_string(&stats_path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", stats_path.display())))?,
            Err(_) => GroupStats::default(),
        };
        d = normalize_with(&d, &stats)?;
    }
    let ev = evaluate(&model, &d)?;
    let report = EvalReport {
        manifest: path,
        examples: d.len(),
        ua_recall: ev.ua_recall,
        per_class_recall: &ev.per_class_recall,
    };
    let json = serde_json::to_string(&report).expect("report serializes");
    create_out_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("eval.json"), format!("{json}\n"))?;
    Ok(Outcome::Done(json))
}

#[derive(Serialize)]
struct SeedReport {
    seed: u64,
    max_rel_error: f64,
    report: GradCheckReport,
}

fn gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    let mut seeds = Vec::new();
    for i in 0..cfg.gradcheck_seeds {
        let seed = cfg.train.seed.wrapping_add(i);
        let opts = GradCheckOptions {
            step: cfg.gradcheck_step,
            max_coords: cfg.gradcheck_max_coords,
            seed,
            ..GradCheckOptions::default()
        };
        let report = grad_check_with(&cfg.model, seed, &opts)?;
        seeds.push(SeedReport {
            seed,
            max_rel_error: report.max_rel_error(),
            report,
        });
    }
    let worst = seeds.iter().map(|s| s.max_rel_error).fold(0.0, f64::max);
    create_out_dir(&cfg.out_dir)?;
    let full = serde_json::to_string_pretty(&seeds).expect("report serializes");
    write_file(&cfg.out_dir.join("gradcheck.json"), full)?;
    let summary = serde_json::json!({
        "max_rel_error": worst,
        "seeds": seeds.iter().map(|s| s.seed).collect::<Vec<_>>(),
        "parameters_checked": seeds[0].report.tensors.iter().map(|t| t.checked).sum::<usize>(),
        "step": cfg.gradcheck_step,
        "loss_scale": seeds[0].report.loss_scale,
    })
    .to_string();
    if worst < GRADCHECK_FAIL {
        Ok(Outcome::Done(summary))
    } else {
        Ok(Outcome::GradCheckFailed(summary))
    }
}

fn extract(cfg: &RunConfig, data: Option<&Path>) -> Result<Outcome> {
    let path = manifest(data, &cfg.train_manifest, "train_manifest")?;
    let entries = read_manifest(path)?;
    let dir = cfg.out_dir.join("features");
    create_out_dir(&dir)?;
    let mut written = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let (samples, rate) = read_wav(&e.path)?;
        let m = log_mel(&samples, rate, &cfg.mel)?;
        let stem = e
            .path
            .file_stem()
            .map_or_else(|| "clip".to_string(), |s| s.to_string_lossy().into_owned());
        let name = format!("{i:05}-{stem}.csv");
        write_features(dir.join(&name), &m)?;
        written.push(ManifestEntry {
            path: PathBuf::from("features").join(name),
            label: e.label,
            group: e.group.clone(),
        });
    }
    let out_manifest = cfg.out_dir.join("features.txt");
    write_manifest(&out_manifest, &written)?;
    Ok(Outcome::Done(
        serde_json::json!({ "files": written.len(), "manifest": out_manifest }).to_string(),
    ))
}
