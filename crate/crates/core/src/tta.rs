//! Test-time adaptation of normalization running statistics.
//!
//! Only `*.running_mean` and `*.running_var` entries move; the interface
//! takes images, never labels.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::{diff_stores, is_running_stat, ParamStore};
use crate::error::{Error, Result};
use crate::nets::{self, apply_stat_updates, Binding, BnMode, Model};
use crate::scalar::Real;
use crate::synthgen::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    pub eta: f64,
    pub passes: usize,
    pub batch_size: usize,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            passes: 1,
            batch_size: 32,
        }
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta <= 1.0 {
        Ok(())
    } else {
        Err(Error::Adaptation(format!("momentum {eta} outside (0, 1]")))
    }
}

/// Runs `passes` sweeps over explicit batches and returns an adapted copy.
pub fn adapt_batches<T: Real>(model: &Model<T>, batches: &[Vec<&Image>], eta: f64, passes: usize) -> Result<Model<T>> {
    check_eta(eta)?;
    if batches.is_empty() {
        return Err(Error::Adaptation("no target batches".into()));
    }
    if let Some(b) = batches.iter().find(|b| b.len() < 2) {
        return Err(Error::Adaptation(format!("target batch of {} images; batch variance needs at least 2", b.len())));
    }
    let mut adapted = model.clone();
    let size = model.arch.input_size();
    for _ in 0..passes {
        for batch in batches {
            let mut g = Graph::no_grad();
            let x = g.constant(nets::images_to_tensor(batch, size)?);
            let mut b = Binding::new(&mut g, &adapted.params, BnMode::Adapt { eta });
            adapted.forward(&mut b, x, None)?;
            let (_, updates) = b.into_parts();
            apply_stat_updates(&mut adapted.params, &updates)?;
        }
    }
    Ok(adapted)
}

/// Splits `images` into consecutive batches of `batch_size`; a trailing
/// single image joins the previous batch.
pub fn make_batches<'a>(images: &[&'a Image], batch_size: usize) -> Result<Vec<Vec<&'a Image>>> {
    if images.len() < 2 {
        return Err(Error::Adaptation(format!("{} target images; need at least 2", images.len())));
    }
    let bs = batch_size.max(2);
    let mut batches: Vec<Vec<&Image>> = images.chunks(bs).map(<[&Image]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    Ok(batches)
}

pub fn adapt<T: Real>(model: &Model<T>, images: &[&Image], cfg: &TtaConfig) -> Result<Model<T>> {
    let batches = make_batches(images, cfg.batch_size)?;
    adapt_batches(model, &batches, cfg.eta, cfg.passes)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FreezeReport {
    /// Every entry whose bits differ.
    pub changed: Vec<String>,
    /// Changed entries that are not running statistics.
    pub violations: Vec<String>,
}

impl FreezeReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn freeze_check<T: Real>(before: &ParamStore<T>, after: &ParamStore<T>) -> Result<FreezeReport> {
    let diff = diff_stores(before, after)?;
    let violations = diff.changed.iter().filter(|n| !is_running_stat(n)).cloned().collect();
    Ok(FreezeReport {
        changed: diff.changed,
        violations,
    })
}
