use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dgq_core::baselines::{self, ComparisonReport};
use dgq_core::checkpoint::{diff_stores, ParamStore};
use dgq_core::metrics::{self, ConfusionMatrix};
use dgq_core::nets::Architecture;
use dgq_core::synthgen::{self, Image, Sample};
use dgq_core::trainer::{self, FitOutputs, TrainConfig};
use dgq_core::tta::{self, TtaConfig};
use dgq_core::{domainshift, rng, Model};
use serde_json::{json, Value};

use crate::config::Config;
use crate::report::{self, MetricsFile};
use crate::{Adapt, Compare, Evaluate, GenData, Report, Train};

/// Path of the architecture sidecar stored next to a checkpoint.
pub fn meta_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn pretty(v: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn save_model(model: &Model, path: &Path, variant: Option<&str>) -> Result<()> {
    model.params.save(path)?;
    let meta = json!({ "variant": variant, "architecture": &model.arch });
    write(&meta_path(path), pretty(&meta)?)
}

fn load_model(path: &Path) -> Result<(Model, Option<String>)> {
    let meta_file = meta_path(path);
    let text = std::fs::read_to_string(&meta_file)
        .with_context(|| format!("reading architecture sidecar {}", meta_file.display()))?;
    let meta: Value = serde_json::from_str(&text).with_context(|| format!("{}: not valid JSON", meta_file.display()))?;
    let arch: Architecture = serde_json::from_value(meta.get("architecture").cloned().unwrap_or(Value::Null))
        .with_context(|| format!("{}: bad key `architecture`", meta_file.display()))?;
    let variant = meta.get("variant").and_then(Value::as_str).map(str::to_owned);
    let params = ParamStore::load(path)?;
    let fresh = Model::init(arch.clone(), 0)?;
    diff_stores(&fresh.params, &params).with_context(|| format!("{} does not match its architecture", path.display()))?;
    Ok((Model { arch, params }, variant))
}

pub fn gen_data(cfg: &Config, a: &GenData) -> Result<()> {
    let count = a.count.unwrap_or(cfg.data.train_count);
    let seed = a.seed.unwrap_or(cfg.data.seed);
    let mut samples = synthgen::generate_clean(count, cfg.data.pos_fraction, seed, cfg.data.image_size)?;
    if let Some(d) = a.domain {
        let spec = cfg.domains.find(d).with_context(|| format!("no domain with id {d} configured"))?;
        samples = domainshift::shift_into(&samples, spec, rng::derive_seed(seed, "gen_shift"))?;
    }
    let manifest = synthgen::save_dataset(&samples, &a.out)?;
    println!("wrote {} images to {}", manifest.rows.len(), a.out.display());
    Ok(())
}

pub fn train(cfg: &Config, a: &Train) -> Result<()> {
    let samples = synthgen::load_dataset(&a.data)?;
    let variant = a.variant.unwrap_or(cfg.model.variant);
    let tcfg = TrainConfig {
        seed: a.seed.unwrap_or(cfg.train.seed),
        ..variant.training_key().train_config(&cfg.train)
    };
    let arch = cfg.architecture(variant);
    let outputs = FitOutputs { dir: a.out.clone() };
    let fit = trainer::fit::<f64>(arch, &tcfg, &samples, &cfg.domains.training, Some(&outputs))?;
    save_model(&fit.model, &outputs.checkpoint(), Some(variant.name()))?;
    let last = fit.epoch_accuracy.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {variant} for {} steps, final epoch accuracy {last:.4}; checkpoint {}",
        fit.log.len(),
        outputs.checkpoint().display()
    );
    Ok(())
}

fn images(samples: &[Sample]) -> Vec<&Image> {
    samples.iter().map(|s| &s.image).collect()
}

pub fn adapt(cfg: &Config, a: &Adapt) -> Result<()> {
    let (model, variant) = load_model(&a.checkpoint)?;
    let samples = synthgen::load_dataset(&a.data)?;
    let tcfg = TtaConfig {
        eta: a.eta.unwrap_or(cfg.tta.eta),
        passes: a.passes.unwrap_or(cfg.tta.passes),
        batch_size: a.batch_size.unwrap_or(cfg.tta.batch_size),
    };
    let adapted = tta::adapt(&model, &images(&samples), &tcfg)?;
    let freeze = tta::freeze_check(&model.params, &adapted.params)?;
    if !freeze.passed() {
        bail!("adaptation touched learned parameters: {}", freeze.violations.join(", "));
    }
    save_model(&adapted, &a.out, variant.as_deref())?;
    println!(
        "adapted on {} images; {} running statistics changed; wrote {}",
        samples.len(),
        freeze.changed.len(),
        a.out.display()
    );
    Ok(())
}

/// Reads `label,score` rows; a header line is optional.
fn read_scores(path: &Path) -> Result<(Vec<u8>, Vec<f64>)> {
    let file = path.display();
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {file}"))?;
    let (mut labels, mut scores) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("label")) {
            continue;
        }
        let (l, s) = line.split_once(',').with_context(|| format!("{file}:{}: expected `label,score`", i + 1))?;
        let l: u8 = l.trim().parse().ok().filter(|&l| l <= 1).with_context(|| format!("{file}:{}: label must be 0 or 1", i + 1))?;
        let s: f64 = s.trim().parse().with_context(|| format!("{file}:{}: bad score", i + 1))?;
        labels.push(l);
        scores.push(s);
    }
    Ok((labels, scores))
}

fn metrics_file(label: &str, tta: bool, labels: &[u8], scores: &[f64], cfg: &Config) -> Result<MetricsFile> {
    let cm = ConfusionMatrix::from_predictions(labels, &metrics::predict(scores));
    let boot = metrics::bootstrap_ci(labels, scores, cfg.eval.n_boot, cfg.eval.seed)?;
    Ok(MetricsFile::from_bootstrap(label, tta, cm, &boot))
}

pub fn evaluate(cfg: &Config, a: &Evaluate) -> Result<()> {
    let default_label = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let label = a.label.clone().unwrap_or(default_label);
    let mut per_domain = None;
    let (labels, scores) = if let Some(path) = &a.scores {
        read_scores(path)?
    } else {
        let (ckpt, manifest) = (a.checkpoint.as_ref().expect("clap"), a.manifest.as_ref().expect("clap"));
        let (model, _) = load_model(ckpt)?;
        let samples = synthgen::load_dataset(manifest)?;
        let tcfg = a.tta.then_some(&cfg.tta);
        let e = baselines::evaluate_model(&model, &samples, tcfg)?;
        let domains: BTreeSet<Option<usize>> = samples.iter().map(|s| s.domain).collect();
        if domains.len() > 1 && domains.iter().all(Option::is_some) {
            let groups: Vec<(usize, Vec<Sample>)> = domains
                .iter()
                .flatten()
                .map(|&d| (d, samples.iter().filter(|s| s.domain == Some(d)).cloned().collect()))
                .collect();
            per_domain = Some(baselines::per_domain_report(&model, &groups, tcfg)?);
        }
        (e.labels, e.scores)
    };
    let mf = metrics_file(&label, a.tta, &labels, &scores, cfg)?;
    let mut out = mf.to_json();
    if let Some(d) = per_domain {
        out["per_domain"] = serde_json::to_value(&d)?;
    }
    write(&a.out, pretty(&out)?)?;
    if let Some(roc) = &a.roc {
        write(roc, report::roc_csv(&metrics::roc_curve(&labels, &scores)?))?;
    }
    let acc = mf.metric("accuracy").unwrap_or(f64::NAN);
    match mf.metric("auc") {
        Some(auc) => println!("{label}: accuracy {acc:.4}, AUC {auc:.4} on {} samples", labels.len()),
        None => println!("{label}: accuracy {acc:.4} on {} samples (AUC undefined)", labels.len()),
    }
    Ok(())
}

fn row_stem(r: &baselines::ComparisonRow) -> String {
    format!("{}_seed{}_{}", r.variant, r.seed, if r.tta { "tta" } else { "notta" })
}

fn write_comparison(cfg: &Config, report: &ComparisonReport, out: &Path) -> Result<()> {
    write(&out.join("comparison.csv"), report.to_csv())?;
    write(&out.join("variance.csv"), report.variance_csv())?;
    write(&out.join("comparison.json"), pretty(report)?)?;
    for r in &report.rows {
        let stem = row_stem(r);
        let mf = MetricsFile {
            label: stem.clone(),
            n: r.labels.len(),
            tta: r.tta,
            metrics: metrics::METRIC_NAMES.iter().map(|&k| (k.to_owned(), r.metrics.get(k))).collect(),
            ci: r.ci.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            confusion: r.confusion,
            n_boot: cfg.eval.n_boot,
            seed: r.seed,
        };
        write(&out.join("metrics").join(format!("{stem}.json")), pretty(&mf.to_json())?)?;
        if let Ok(curve) = metrics::roc_curve(&r.labels, &r.scores) {
            write(&out.join("roc").join(format!("{stem}.csv")), report::roc_csv(&curve))?;
        }
    }
    Ok(())
}

pub fn compare(cfg: &Config, a: &Compare) -> Result<()> {
    let variants = if a.variants.is_empty() { cfg.eval.variants.clone() } else { a.variants.clone() };
    let seeds = if a.seeds.is_empty() { cfg.eval.seeds.clone() } else { a.seeds.clone() };
    if variants.len() < 2 {
        bail!("compare needs at least two variants, got {}", variants.len());
    }
    let mut exp = cfg.experiment();
    if a.keep_checkpoints {
        exp.output_dir = Some(a.out.join("runs"));
    }
    match baselines::run_comparison::<f64>(&exp, &variants, &seeds) {
        Ok(report) => {
            write_comparison(cfg, &report, &a.out)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Err(failure) => {
            write_comparison(cfg, &failure.partial, &a.out)?;
            Err(anyhow::Error::new(failure).context(format!("partial results kept in {}", a.out.display())))
        }
    }
}

pub fn report(a: &Report) -> Result<()> {
    let files = a.metrics.iter().map(|p| MetricsFile::read(p)).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("metrics.svg"), report::bar_chart_svg(&files))?;
    if !a.roc.is_empty() {
        let curves = a
            .roc
            .iter()
            .map(|p| {
                let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((label, report::read_roc(p)?))
            })
            .collect::<Result<Vec<_>>>()?;
        write(&a.out.join("roc.svg"), report::roc_svg(&curves))?;
    }
    write(&a.out.join("summary.md"), report::summary_markdown(&files))?;
    println!("wrote report for {} metrics files to {}", files.len(), a.out.display());
    Ok(())
}
