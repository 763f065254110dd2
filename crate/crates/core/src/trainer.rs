//! Joint optimization: classification loss, scheduled adversarial domain
//! loss through the reversal layer, and the feature-energy penalty.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::domainshift::{self, DomainSpec};
use crate::error::{Error, Result};
use crate::nets::{self, apply_stat_updates, Architecture, Binding, BnMode, Model};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng};
use crate::scalar::Real;
use crate::synthgen::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Base multiplier of the scheduled domain term.
    pub w_dom: f64,
    pub w_feat: f64,
    /// Steepness of the reversal schedule.
    pub gamma: f64,
    /// Include the domain term. Ignored for models without a discriminator.
    pub adversarial: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            w_dom: 1.0,
            w_feat: 1e-4,
            gamma: 10.0,
            adversarial: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size {} below 2", self.batch_size)));
        }
        if !(self.w_dom >= 0.0 && self.w_feat >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("schedule constant {} must be positive", self.gamma)));
        }
        if !(self.optimizer.lr >= 0.0) {
            return Err(Error::Config("learning rate must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `λ(p) = 2 / (1 + e^{-γp}) - 1`; `p` outside `[0, 1]` is clamped.
pub fn lambda_schedule(p: f64, gamma: f64) -> f64 {
    let q = if (0.0..=1.0).contains(&p) {
        p
    } else {
        log::warn!("training progress {p} outside [0, 1], clamping");
        if p.is_nan() {
            0.0
        } else {
            p.clamp(0.0, 1.0)
        }
    };
    2.0 / (1.0 + (-gamma * q).exp()) - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub lambda: f64,
    pub cls: f64,
    /// Domain cross-entropy, 0 when the term is omitted.
    pub dom: f64,
    pub feat: f64,
    /// `cls + w_dom·λ·dom + w_feat·feat`.
    pub total: f64,
    /// Batch accuracy of the class head.
    pub train_acc: f64,
}

pub struct TrainState<T: Real> {
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub step: usize,
    pub total_steps: usize,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: Model<T>, cfg: &TrainConfig, total_steps: usize) -> Self {
        Self {
            model,
            optimizer: Adam::new(cfg.optimizer),
            step: 0,
            total_steps: total_steps.max(1),
        }
    }

    pub fn progress(&self) -> f64 {
        self.step as f64 / self.total_steps as f64
    }
}

/// Gradients of one step before the optimizer sees them.
pub struct StepGradients<T> {
    pub grads: Vec<(String, Vec<T>)>,
    pub breakdown: LossBreakdown,
    pub stats: Vec<nets::StatUpdate<T>>,
}

fn has_discriminator(arch: &Architecture) -> bool {
    matches!(arch, Architecture::Dgq(c) if c.adversarial)
}

/// Forward and backward pass without updating anything.
pub fn compute_gradients<T: Real>(
    model: &Model<T>,
    batch: &[&Sample],
    cfg: &TrainConfig,
    lambda: f64,
    step: usize,
) -> Result<StepGradients<T>> {
    if batch.len() < 2 {
        return Err(Error::Contract(format!("training batch of {} samples, need at least 2", batch.len())));
    }
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label as usize).collect();
    let adversarial = cfg.adversarial && has_discriminator(&model.arch);
    let domains: Vec<usize> = if adversarial {
        batch
            .iter()
            .map(|s| s.domain.ok_or_else(|| Error::Contract(format!("sample {} has no domain tag", s.id))))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut g = Graph::new();
    let x = g.constant(nets::images_to_tensor(&images, model.arch.input_size())?);
    let mut b = Binding::new(&mut g, &model.params, BnMode::train());
    let out = model.forward(&mut b, x, adversarial.then_some(lambda))?;
    let (vars, stats) = b.into_parts();

    let cls = g.cross_entropy(out.logits, &labels)?;
    let mut loss = cls;
    let mut dom_value = 0.0;
    if let Some(d) = out.domain_logits {
        // the reversal node already carries λ, so only the base weight is applied here
        let dom = g.cross_entropy(d, &domains)?;
        dom_value = g.value(dom).item().as_f64();
        let weighted = g.scale(dom, T::lit(cfg.w_dom));
        loss = g.add(loss, weighted)?;
    }
    let mut feat_value = 0.0;
    if let Some(h) = out.features {
        let feat = nets::feature_norm_loss(&mut g, h)?;
        feat_value = g.value(feat).item().as_f64();
        if cfg.w_feat != 0.0 {
            let weighted = g.scale(feat, T::lit(cfg.w_feat));
            loss = g.add(loss, weighted)?;
        }
    }
    let cls_value = g.value(cls).item().as_f64();
    let logits = g.value(out.logits).data();
    let correct = logits
        .chunks_exact(nets::CLASSES)
        .zip(&labels)
        .filter(|(row, &y)| usize::from(row[1] >= row[0]) == y)
        .count();
    let applied_lambda = if adversarial { lambda } else { 0.0 };
    let breakdown = LossBreakdown {
        step,
        lambda: applied_lambda,
        cls: cls_value,
        dom: dom_value,
        feat: feat_value,
        total: cls_value + cfg.w_dom * applied_lambda * dom_value + cfg.w_feat * feat_value,
        train_acc: correct as f64 / batch.len() as f64,
    };
    if ![breakdown.cls, breakdown.dom, breakdown.feat].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            step,
            cls: breakdown.cls,
            dom: breakdown.dom,
            feat: breakdown.feat,
        });
    }
    g.backward(loss)?;
    let grads = vars
        .into_iter()
        .filter_map(|(name, v)| g.grad(v).map(|gr| (name, gr.to_vec())))
        .collect();
    Ok(StepGradients { grads, breakdown, stats })
}

/// One optimizer update on a batch at progress `step / total_steps`.
pub fn train_step<T: Real>(state: &mut TrainState<T>, batch: &[&Sample], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let lambda = lambda_schedule(state.progress(), cfg.gamma);
    let sg = compute_gradients(&state.model, batch, cfg, lambda, state.step)?;
    for (name, g) in &sg.grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Consistency(format!("non-finite gradient for `{name}` at step {}", state.step)));
        }
    }
    state.optimizer.step(&mut state.model.params, &sg.grads)?;
    apply_stat_updates(&mut state.model.params, &sg.stats)?;
    state.step += 1;
    Ok(sg.breakdown)
}

/// Number of optimizer steps per epoch; a trailing batch of one sample is
/// dropped because batch statistics need two.
pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples / batch_size + usize::from(samples % batch_size >= 2)
}

/// Re-augmented, shuffled minibatches, epoch by epoch. Depends only on the
/// seed, never on the model, so every variant sees the same data.
pub struct DataStream<'a> {
    samples: &'a [Sample],
    specs: &'a [DomainSpec],
    batch_size: usize,
    augment: Rng,
    shuffle: Rng,
}

impl<'a> DataStream<'a> {
    pub fn new(samples: &'a [Sample], specs: &'a [DomainSpec], batch_size: usize, seed: u64) -> Self {
        Self {
            samples,
            specs,
            batch_size,
            augment: rng::tagged(seed, "augment"),
            shuffle: rng::tagged(seed, "shuffle"),
        }
    }

    /// The next epoch's augmented samples and batch index lists.
    pub fn next_epoch(&mut self) -> Result<(Vec<Sample>, Vec<Vec<usize>>)> {
        let tagged = domainshift::tag_batch(self.samples, self.specs, &mut self.augment)?;
        let mut order: Vec<usize> = (0..tagged.len()).collect();
        order.shuffle(&mut self.shuffle);
        let batches = order
            .chunks(self.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect();
        Ok((tagged, batches))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lambda: f64,
    pub loss_cls: f64,
    pub loss_dom: f64,
    pub loss_feat: f64,
    pub train_acc: f64,
}

pub const LOG_HEADER: &str = "step,lambda,loss_cls,loss_dom,loss_feat,train_acc";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step, r.lambda, r.loss_cls, r.loss_dom, r.loss_feat, r.train_acc
        )
        .expect("writing to String");
    }
    s
}

pub struct FitResult<T: Real> {
    pub model: Model<T>,
    pub log: Vec<LogRow>,
    /// Sample-weighted training accuracy per epoch.
    pub epoch_accuracy: Vec<f64>,
}

pub const CHECKPOINT_FILE: &str = "model.dgq";
pub const LOG_FILE: &str = "train_log.csv";

/// Where `fit` writes its artifacts.
pub struct FitOutputs {
    pub dir: PathBuf,
}

impl FitOutputs {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }
}

/// Trains a fresh model of `arch` from `cfg.seed`.
pub fn fit<T: Real>(
    arch: Architecture,
    cfg: &TrainConfig,
    samples: &[Sample],
    specs: &[DomainSpec],
    outputs: Option<&FitOutputs>,
) -> Result<FitResult<T>> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::Config(format!("training set of {} samples, need at least 2", samples.len())));
    }
    let model = Model::init(arch, rng::derive_seed(cfg.seed, "init"))?;
    let total = cfg.epochs * steps_per_epoch(samples.len(), cfg.batch_size);
    let mut state = TrainState::new(model, cfg, total);
    let mut stream = DataStream::new(samples, specs, cfg.batch_size, cfg.seed);
    let mut log = Vec::with_capacity(total);
    let mut epoch_accuracy = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (data, batches) = stream.next_epoch()?;
        let (mut correct, mut seen) = (0.0, 0usize);
        for idx in &batches {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            let lb = train_step(&mut state, &batch, cfg)?;
            correct += lb.train_acc * batch.len() as f64;
            seen += batch.len();
            log.push(LogRow {
                step: lb.step,
                lambda: lb.lambda,
                loss_cls: lb.cls,
                loss_dom: lb.dom,
                loss_feat: lb.feat,
                train_acc: lb.train_acc,
            });
        }
        let acc = correct / seen as f64;
        log::info!("epoch {}/{}: train accuracy {acc:.4}", epoch + 1, cfg.epochs);
        epoch_accuracy.push(acc);
    }
    if let Some(out) = outputs {
        write_artifacts(out, &state.model, &log)?;
    }
    Ok(FitResult {
        model: state.model,
        log,
        epoch_accuracy,
    })
}

fn write_artifacts<T: Real>(out: &FitOutputs, model: &Model<T>, log: &[LogRow]) -> Result<()> {
    fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    model.params.save(out.checkpoint())?;
    let path = out.log();
    fs::write(&path, log_csv(log)).map_err(|e| Error::io(&path, e))
}

/// Reads a training log written by [`fit`].
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::format(path, "unexpected training log header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::format(path, format!("bad log row `{l}`")))
            };
            Ok(LogRow {
                step: num(0)? as usize,
                lambda: num(1)?,
                loss_cls: num(2)?,
                loss_dom: num(3)?,
                loss_feat: num(4)?,
                train_acc: num(5)?,
            })
        })
        .collect()
}
