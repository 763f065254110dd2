//! Ablation variants and the multi-seed comparison experiment.
//!
//! Every variant of one seed sees the same clean training set, the same
//! augmentation stream and the same shifted test sets. `dgq_no_tta` shares
//! the `dgq_full` training run and differs only at evaluation.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domainshift::{self, DomainSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix, DomainReport, MetricSet, METRIC_NAMES};
use crate::nets::{Architecture, DgqConfig, Model, SimpleCnnConfig};
use crate::rng;
use crate::scalar::Real;
use crate::synthgen::{self, Image, Sample};
use crate::trainer::{self, FitOutputs, TrainConfig};
use crate::tta::{self, TtaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SimpleCnn,
    DgqFull,
    DgqNoQuantum,
    DgqNoAdv,
    DgqNoTta,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SimpleCnn,
        Variant::DgqFull,
        Variant::DgqNoQuantum,
        Variant::DgqNoAdv,
        Variant::DgqNoTta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SimpleCnn => "simple_cnn",
            Variant::DgqFull => "dgq_full",
            Variant::DgqNoQuantum => "dgq_no_quantum",
            Variant::DgqNoAdv => "dgq_no_adv",
            Variant::DgqNoTta => "dgq_no_tta",
        }
    }

    /// The variant whose trained weights this one evaluates.
    pub fn training_key(self) -> Variant {
        match self {
            Variant::DgqNoTta => Variant::DgqFull,
            v => v,
        }
    }

    /// Whether the deployed setting adapts normalization statistics.
    pub fn deploys_tta(self) -> bool {
        !matches!(self, Variant::SimpleCnn | Variant::DgqNoTta)
    }

    /// TTA settings reported: the deployed one, plus the unadapted one for
    /// variants that adapt.
    pub fn tta_settings(self) -> &'static [bool] {
        if self.deploys_tta() {
            &[false, true]
        } else {
            &[false]
        }
    }

    pub fn architecture(self, dgq: &DgqConfig, cnn: &SimpleCnnConfig) -> Architecture {
        match self {
            Variant::SimpleCnn => Architecture::SimpleCnn(cnn.clone()),
            Variant::DgqFull | Variant::DgqNoTta => Architecture::Dgq(dgq.clone()),
            Variant::DgqNoQuantum => {
                let mut c = dgq.clone();
                c.quantum.enabled = false;
                Architecture::Dgq(c)
            }
            Variant::DgqNoAdv => Architecture::Dgq(DgqConfig {
                adversarial: false,
                ..dgq.clone()
            }),
        }
    }

    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        match self {
            Variant::SimpleCnn => TrainConfig {
                adversarial: false,
                w_dom: 0.0,
                w_feat: 0.0,
                ..base.clone()
            },
            Variant::DgqNoAdv => TrainConfig {
                adversarial: false,
                w_dom: 0.0,
                ..base.clone()
            },
            _ => base.clone(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub variant: Variant,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub image_size: usize,
    pub pos_fraction: f64,
    pub dgq: DgqConfig,
    pub simple_cnn: SimpleCnnConfig,
    pub train: TrainConfig,
    pub tta: TtaConfig,
    pub domains: Vec<DomainSpec>,
    pub unseen: DomainSpec,
    pub n_boot: usize,
    /// Where each training run writes its checkpoint and log, one
    /// subdirectory per variant and seed.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train_count: 600,
            test_count: 120,
            image_size: 64,
            pos_fraction: 0.5,
            dgq: DgqConfig::default(),
            simple_cnn: SimpleCnnConfig::default(),
            train: TrainConfig::default(),
            tta: TtaConfig::default(),
            domains: domainshift::training_domains(),
            unseen: domainshift::unseen_domain(),
            n_boot: metrics::DEFAULT_BOOTSTRAP,
            output_dir: None,
        }
    }
}

/// Clean and shifted data of one seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub train: Vec<Sample>,
    /// Test images shifted into each training domain and then the unseen
    /// one, keyed by domain id.
    pub test_domains: Vec<(usize, Vec<Sample>)>,
}

impl SeedData {
    pub fn unseen(&self) -> &[Sample] {
        &self.test_domains.last().expect("unseen domain present").1
    }
}

pub fn seed_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let train = synthgen::generate_clean(cfg.train_count, cfg.pos_fraction, rng::derive_seed(seed, "train_data"), cfg.image_size)?;
    let test = synthgen::generate_clean(cfg.test_count, cfg.pos_fraction, rng::derive_seed(seed, "test_data"), cfg.image_size)?;
    let shift_seed = rng::derive_seed(seed, "test_shift");
    let test_domains = cfg
        .domains
        .iter()
        .chain(std::iter::once(&cfg.unseen))
        .map(|spec| Ok((spec.id, domainshift::shift_into(&test, spec, shift_seed)?)))
        .collect::<Result<_>>()?;
    Ok(SeedData { train, test_domains })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub labels: Vec<u8>,
    pub scores: Vec<f64>,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricSet,
}

/// Scores `samples`, after adapting to their images when `tta` is given.
pub fn evaluate_model<T: Real>(model: &Model<T>, samples: &[Sample], tta: Option<&TtaConfig>) -> Result<Evaluation> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let adapted;
    let m = match tta {
        Some(cfg) => {
            adapted = tta::adapt(model, &images, cfg)?;
            &adapted
        }
        None => model,
    };
    let scores = m.predict_proba(&images)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let predictions = metrics::predict(&scores);
    Ok(Evaluation {
        confusion: ConfusionMatrix::from_predictions(&labels, &predictions),
        metrics: metrics::compute_metrics_with_predictions(&labels, &predictions, &scores)?,
        labels,
        scores,
    })
}

/// Per-domain metrics; with `tta`, the model adapts to each domain's images
/// separately.
pub fn per_domain_report<T: Real>(model: &Model<T>, groups: &[(usize, Vec<Sample>)], tta: Option<&TtaConfig>) -> Result<DomainReport> {
    let mut scored = Vec::with_capacity(groups.len());
    for (domain, samples) in groups {
        if samples.is_empty() {
            scored.push((*domain, Vec::new(), Vec::new()));
            continue;
        }
        let e = evaluate_model(model, samples, tta)?;
        scored.push((*domain, e.labels, e.scores));
    }
    metrics::per_domain_report(&scored)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub seed: u64,
    pub tta: bool,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricSet,
    /// 95% percentile bootstrap bounds per metric key.
    pub ci: IndexMap<String, [f64; 2]>,
    pub labels: Vec<u8>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub variant: Variant,
    pub seed: u64,
    pub tta: bool,
    /// `(domain, accuracy)` over the training domains and the unseen one.
    pub accuracies: Vec<(usize, f64)>,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub variance: Vec<VarianceRow>,
}

pub const REPORT_HEADER: &str = "variant,seed,tta,accuracy,auc,f1,precision,recall,sensitivity,specificity,tn,fp,fn,tp";

impl ComparisonReport {
    pub fn row(&self, variant: Variant, seed: u64, tta: bool) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seed == seed && r.tta == tta)
    }

    pub fn variance_row(&self, variant: Variant, seed: u64) -> Option<&VarianceRow> {
        self.variance.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    /// Table 1 columns, one line per row, 4 decimals; absent AUC is empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.variant, r.seed, r.tta));
            for name in METRIC_NAMES {
                match r.metrics.get(name) {
                    Some(v) => out.push_str(&format!(",{v:.4}")),
                    None => out.push(','),
                }
            }
            let c = r.confusion;
            out.push_str(&format!(",{},{},{},{}\n", c.tn, c.fp, c.fn_, c.tp));
        }
        out
    }

    pub fn variance_csv(&self) -> String {
        let domains: Vec<usize> = self
            .variance
            .first()
            .map(|r| r.accuracies.iter().map(|a| a.0).collect())
            .unwrap_or_default();
        let mut out = String::from("variant,seed,tta");
        for d in &domains {
            out.push_str(&format!(",acc_domain{d}"));
        }
        out.push_str(",variance\n");
        for r in &self.variance {
            out.push_str(&format!("{},{},{}", r.variant, r.seed, r.tta));
            for (_, a) in &r.accuracies {
                out.push_str(&format!(",{a:.4}"));
            }
            out.push_str(&format!(",{:.6}\n", r.variance));
        }
        out
    }
}

/// A failed comparison with the rows that completed before the failure.
#[derive(Debug)]
pub struct ComparisonFailure {
    pub partial: ComparisonReport,
    pub error: Error,
}

impl fmt::Display for ComparisonFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} rows completed)", self.error, self.partial.rows.len())
    }
}

impl std::error::Error for ComparisonFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Worker count from `DGQ_THREADS`, defaulting to the available cores.
pub fn thread_cap() -> usize {
    std::env::var("DGQ_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

struct Job {
    key: Variant,
    seed: u64,
}

fn run_job<T: Real>(cfg: &ExperimentConfig, variants: &[Variant], data: &SeedData, job: &Job) -> Result<(Vec<ComparisonRow>, Vec<VarianceRow>)> {
    let arch = job.key.architecture(&cfg.dgq, &cfg.simple_cnn);
    let tcfg = TrainConfig {
        seed: job.seed,
        ..job.key.train_config(&cfg.train)
    };
    let outputs = cfg.output_dir.as_ref().map(|d| FitOutputs {
        dir: d.join(format!("{}_seed{}", job.key, job.seed)),
    });
    log::info!("training {} seed {}", job.key, job.seed);
    let fit = trainer::fit::<T>(arch, &tcfg, &data.train, &cfg.domains, outputs.as_ref())?;
    let model = fit.model;

    let mut evals: IndexMap<bool, Evaluation> = IndexMap::new();
    let mut domain_reports: IndexMap<bool, DomainReport> = IndexMap::new();
    let mut rows = Vec::new();
    let mut variance = Vec::new();
    for &v in variants.iter().filter(|v| v.training_key() == job.key) {
        for &tta in v.tta_settings() {
            if !evals.contains_key(&tta) {
                let tcfg = tta.then_some(&cfg.tta);
                evals.insert(tta, evaluate_model(&model, data.unseen(), tcfg)?);
            }
            let e = &evals[&tta];
            let boot = metrics::bootstrap_ci(&e.labels, &e.scores, cfg.n_boot, rng::derive_seed(job.seed, "bootstrap"))?;
            rows.push(ComparisonRow {
                variant: v,
                seed: job.seed,
                tta,
                confusion: e.confusion,
                metrics: e.metrics,
                ci: boot.intervals.iter().map(|(k, iv)| (k.clone(), [iv.lower, iv.upper])).collect(),
                labels: e.labels.clone(),
                scores: e.scores.clone(),
            });
        }
        let deployed = v.deploys_tta();
        if !domain_reports.contains_key(&deployed) {
            let report = per_domain_report(&model, &data.test_domains, deployed.then_some(&cfg.tta))?;
            domain_reports.insert(deployed, report);
        }
        let d = &domain_reports[&deployed];
        variance.push(VarianceRow {
            variant: v,
            seed: job.seed,
            tta: deployed,
            accuracies: d.rows.iter().map(|r| (r.domain, r.metrics.accuracy)).collect(),
            variance: d.accuracy_variance,
        });
    }
    Ok((rows, variance))
}

/// Trains every requested variant for every seed and evaluates on the
/// unseen domain. Training runs are spread over at most [`thread_cap`]
/// workers; rows come back in `(seed, variant, tta)` order.
pub fn run_comparison<T: Real>(
    cfg: &ExperimentConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> std::result::Result<ComparisonReport, ComparisonFailure> {
    let fail = |error| ComparisonFailure {
        partial: ComparisonReport::default(),
        error,
    };
    if variants.is_empty() || seeds.is_empty() {
        return Err(fail(Error::Config("comparison needs at least one variant and one seed".into())));
    }
    // duplicates are dropped so each row is unique
    let mut variants: Vec<Variant> = variants.to_vec();
    variants.sort();
    variants.dedup();
    let mut seeds: Vec<u64> = seeds.to_vec();
    let mut seen = std::collections::HashSet::new();
    seeds.retain(|s| seen.insert(*s));
    if let Err(e) = cfg.train.validate() {
        return Err(fail(e));
    }

    let data: Vec<SeedData> = match seeds.iter().map(|&s| seed_data(cfg, s)).collect::<Result<_>>() {
        Ok(d) => d,
        Err(e) => return Err(fail(e)),
    };
    let mut keys: Vec<Variant> = variants.iter().map(|v| v.training_key()).collect();
    keys.sort();
    keys.dedup();
    let jobs: Vec<(usize, Job)> = seeds
        .iter()
        .enumerate()
        .flat_map(|(i, &seed)| keys.iter().map(move |&key| (i, Job { key, seed })))
        .collect();

    let pool = match rayon::ThreadPoolBuilder::new().num_threads(thread_cap()).build() {
        Ok(p) => p,
        Err(e) => return Err(fail(Error::Config(format!("thread pool: {e}")))),
    };
    let results: Vec<Result<(Vec<ComparisonRow>, Vec<VarianceRow>)>> =
        pool.install(|| jobs.par_iter().map(|(i, job)| run_job::<T>(cfg, &variants, &data[*i], job)).collect());

    let mut report = ComparisonReport::default();
    let mut first_error = None;
    for r in results {
        match r {
            Ok((rows, var)) => {
                report.rows.extend(rows);
                report.variance.extend(var);
            }
            Err(e) => {
                log::error!("variant run failed: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    report.rows.sort_by_key(|r| (seeds.iter().position(|&s| s == r.seed), r.variant, r.tta));
    report.variance.sort_by_key(|r| (seeds.iter().position(|&s| s == r.seed), r.variant));
    match first_error {
        None => Ok(report),
        Some(error) => Err(ComparisonFailure { partial: report, error }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{BlockSpec, EncoderConfig, QuantumConfig};

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            train_count: 16,
            test_count: 12,
            image_size: 32,
            dgq: DgqConfig {
                encoder: EncoderConfig {
                    input_size: 32,
                    stem_channels: 4,
                    blocks: vec![BlockSpec { expansion: 2, out_channels: 6, stride: 2 }],
                    feature_dim: 8,
                },
                quantum: QuantumConfig { qubits: 3, ..QuantumConfig::default() },
                discriminator_hidden: 6,
                ..DgqConfig::default()
            },
            simple_cnn: SimpleCnnConfig { input_size: 32, channels: [4, 6] },
            train: TrainConfig {
                epochs: 1,
                batch_size: 8,
                ..TrainConfig::default()
            },
            tta: TtaConfig { batch_size: 6, ..TtaConfig::default() },
            n_boot: 20,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("resnet18".parse::<Variant>().is_err());
    }

    #[test]
    fn simple_cnn_is_smaller_than_encoder() {
        let d = DgqConfig::default();
        let c = SimpleCnnConfig::default();
        let cnn = Model::<f64>::init(Variant::SimpleCnn.architecture(&d, &c), 0).unwrap();
        let dgq = Model::<f64>::init(Variant::DgqFull.architecture(&d, &c), 0).unwrap();
        assert!(cnn.parameter_count() < dgq.parameter_count());
    }

    #[test]
    fn one_variant_one_seed_gives_one_row() {
        let r = run_comparison::<f64>(&tiny(), &[Variant::SimpleCnn], &[3]).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.variance.len(), 1);
        assert_eq!(r.to_csv().lines().count(), 2);
    }

    #[test]
    fn shared_training_gives_identical_rows() {
        let r = run_comparison::<f64>(&tiny(), &[Variant::DgqFull, Variant::DgqNoTta], &[1]).unwrap();
        let full = r.row(Variant::DgqFull, 1, false).unwrap();
        let no_tta = r.row(Variant::DgqNoTta, 1, false).unwrap();
        assert_eq!(full.scores, no_tta.scores);
        assert_eq!(full.metrics, no_tta.metrics);
        assert!(r.row(Variant::DgqFull, 1, true).is_some());
        assert!(r.row(Variant::DgqNoTta, 1, true).is_none());
    }

    #[test]
    fn every_variant_appears_once_per_setting() {
        let r = run_comparison::<f64>(&tiny(), &Variant::ALL, &[2, 2]).unwrap();
        // SimpleCNN and dgq_no_tta are evaluated once, the rest with and without adaptation
        assert_eq!(r.rows.len(), 8);
        assert_eq!(r.variance.len(), 5);
        for v in Variant::ALL {
            let n = r.rows.iter().filter(|row| row.variant == v).count();
            assert_eq!(n, v.tta_settings().len(), "{v}");
        }
    }

    #[test]
    fn bad_training_config_fails_with_partial_report() {
        let mut cfg = tiny();
        cfg.tta.eta = 2.0;
        let err = run_comparison::<f64>(&cfg, &[Variant::SimpleCnn, Variant::DgqFull], &[0]).unwrap_err();
        assert!(matches!(err.error, Error::Adaptation(_)));
        // the SimpleCNN run never adapts, so its row survives
        assert_eq!(err.partial.rows.len(), 1);
        assert_eq!(err.partial.rows[0].variant, Variant::SimpleCnn);
    }
}
