//! Virtual acquisition domains: brightness, contrast, sharpening and noise
//! perturbations with parameters drawn uniformly per sample.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::synthgen::{Image, Sample};

/// Closed interval `[lo, hi]`, or a union of such intervals picked with
/// equal probability before drawing inside the chosen piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamRange {
    Span([f64; 2]),
    Pieces(Vec<[f64; 2]>),
}

impl ParamRange {
    pub fn span(lo: f64, hi: f64) -> Self {
        Self::Span([lo, hi])
    }

    pub fn pieces(&self) -> &[[f64; 2]] {
        match self {
            Self::Span(s) => std::slice::from_ref(s),
            Self::Pieces(p) => p,
        }
    }

    pub fn min(&self) -> f64 {
        self.pieces().iter().map(|p| p[0]).fold(f64::INFINITY, f64::min)
    }

    fn validate(&self, what: &str, positive: bool) -> Result<()> {
        if self.pieces().is_empty() {
            return Err(Error::Config(format!("{what}: empty range list")));
        }
        for &[lo, hi] in self.pieces() {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::Config(format!("{what}: invalid range [{lo}, {hi}]")));
            }
            if positive && lo <= 0.0 {
                return Err(Error::Config(format!("{what}: lower bound {lo} must be positive")));
            }
            if !positive && lo < 0.0 {
                return Err(Error::Config(format!("{what}: lower bound {lo} must be nonnegative")));
            }
        }
        Ok(())
    }

    pub fn sample(&self, r: &mut Rng) -> f64 {
        let pieces = self.pieces();
        let [lo, hi] = if pieces.len() == 1 {
            pieces[0]
        } else {
            pieces[r.random_range(0..pieces.len())]
        };
        let u: f64 = r.random();
        // `lo + 0·u` keeps point ranges exact
        (lo + (hi - lo) * u).min(hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: usize,
    pub beta: ParamRange,
    pub kappa: ParamRange,
    pub sharpen: ParamRange,
    pub noise: ParamRange,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let at = |f: &str| format!("domain {} {f}", self.id);
        self.beta.validate(&at("beta"), true)?;
        self.kappa.validate(&at("kappa"), true)?;
        self.sharpen.validate(&at("sharpen"), false)?;
        self.noise.validate(&at("noise"), false)
    }

    pub fn identity(id: usize) -> Self {
        Self {
            id,
            beta: ParamRange::span(1.0, 1.0),
            kappa: ParamRange::span(1.0, 1.0),
            sharpen: ParamRange::span(0.0, 0.0),
            noise: ParamRange::span(0.0, 0.0),
        }
    }
}

/// High-end, mainstream and legacy acquisition tiers.
pub fn training_domains() -> Vec<DomainSpec> {
    let d = |id, b: [f64; 2], k: [f64; 2], s: [f64; 2], n: [f64; 2]| DomainSpec {
        id,
        beta: ParamRange::Span(b),
        kappa: ParamRange::Span(k),
        sharpen: ParamRange::Span(s),
        noise: ParamRange::Span(n),
    };
    vec![
        d(0, [0.95, 1.05], [0.95, 1.05], [0.0, 0.2], [0.0, 0.01]),
        d(1, [0.85, 1.15], [0.80, 1.20], [0.0, 0.5], [0.01, 0.03]),
        d(2, [0.70, 1.30], [0.60, 1.40], [0.5, 1.0], [0.03, 0.08]),
    ]
}

/// Held-out domain outside the training envelope.
pub fn unseen_domain() -> DomainSpec {
    DomainSpec {
        id: 3,
        beta: ParamRange::Pieces(vec![[0.60, 0.80], [1.20, 1.40]]),
        kappa: ParamRange::span(0.50, 0.70),
        sharpen: ParamRange::span(0.8, 1.2),
        noise: ParamRange::span(0.06, 0.10),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftParams {
    pub beta: f64,
    pub kappa: f64,
    pub sharpen: f64,
    pub noise: f64,
}

impl ShiftParams {
    pub const IDENTITY: Self = Self {
        beta: 1.0,
        kappa: 1.0,
        sharpen: 0.0,
        noise: 0.0,
    };
}

pub fn sample_params(spec: &DomainSpec, r: &mut Rng) -> ShiftParams {
    ShiftParams {
        beta: spec.beta.sample(r),
        kappa: spec.kappa.sample(r),
        sharpen: spec.sharpen.sample(r),
        noise: spec.noise.sample(r),
    }
}

fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// 3×3 binomial blur, `[1 2 1] ⊗ [1 2 1] / 16`, reflect-101 borders.
pub fn blur3(img: &Image) -> Image {
    const K: [f64; 3] = [1.0, 2.0, 1.0];
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..3)
                .map(|k| K[k] * img.pixels[y * w + reflect101(x as isize + k as isize - 1, w)])
                .sum::<f64>();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..3)
                .map(|k| K[k] * tmp[reflect101(y as isize + k as isize - 1, h) * w + x])
                .sum::<f64>()
                / 16.0;
        }
    }
    Image {
        width: w,
        height: h,
        pixels: out,
    }
}

/// Brightness, contrast, sharpening, noise, then clamp to `[0, 1]`.
///
/// Stages whose parameter is neutral are skipped, so identity parameters
/// return the input bit for bit and `ν = 0` consumes no randomness.
pub fn apply_shift(x: &Image, p: &ShiftParams, r: &mut Rng) -> Image {
    let mut img = x.clone();
    if p.beta != 1.0 {
        img.pixels.iter_mut().for_each(|v| *v *= p.beta);
    }
    if p.kappa != 1.0 {
        let m = img.mean();
        img.pixels.iter_mut().for_each(|v| *v = (*v - m) * p.kappa + m);
    }
    if p.sharpen != 0.0 {
        let blurred = blur3(&img);
        for (v, b) in img.pixels.iter_mut().zip(&blurred.pixels) {
            *v += p.sharpen * (*v - b);
        }
    }
    if p.noise != 0.0 {
        for v in &mut img.pixels {
            let e: f64 = r.sample(StandardNormal);
            *v += p.noise * e;
        }
    }
    img.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

/// Assigns each sample a uniformly random domain, draws fresh parameters
/// from that domain and applies them. Sample `i` uses its own stream keyed
/// by one draw from `r` and the sample id, so the result does not depend on
/// thread scheduling.
pub fn tag_batch(samples: &[Sample], specs: &[DomainSpec], r: &mut Rng) -> Result<Vec<Sample>> {
    if specs.is_empty() {
        return Err(Error::Config("no domain specifications given".into()));
    }
    for s in specs {
        s.validate()?;
    }
    let base: u64 = r.random();
    Ok(samples
        .par_iter()
        .map(|s| {
            let mut sr = rng::stream(base, s.id);
            let spec = &specs[sr.random_range(0..specs.len())];
            let p = sample_params(spec, &mut sr);
            Sample {
                id: s.id,
                label: s.label,
                domain: Some(spec.id),
                image: apply_shift(&s.image, &p, &mut sr),
            }
        })
        .collect())
}

/// Shifts every sample into one fixed domain.
pub fn shift_into(samples: &[Sample], spec: &DomainSpec, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let base = rng::derive_seed(seed, "shift_into") ^ spec.id as u64;
    Ok(samples
        .par_iter()
        .map(|s| {
            let mut sr = rng::stream(base, s.id);
            let p = sample_params(spec, &mut sr);
            Sample {
                id: s.id,
                label: s.label,
                domain: Some(spec.id),
                image: apply_shift(&s.image, &p, &mut sr),
            }
        })
        .collect())
}
