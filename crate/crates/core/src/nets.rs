//! Network architectures: the depthwise-separable encoder with its heads and
//! optional circuit layer, and the shallow SimpleCNN baseline.
//!
//! Parameters live in a [`ParamStore`] under dotted names. A forward pass
//! binds the parameters it touches into a [`Graph`] and reports new
//! normalization statistics instead of writing them, so the caller decides
//! whether to keep them.

use indexmap::IndexMap;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::ParamStore;
use crate::error::{Error, Result};
use crate::quantum::{self, RingCircuit};
use crate::rng;
use crate::scalar::Real;
use crate::synthgen::Image;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub expansion: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let b = |expansion, out_channels, stride| BlockSpec {
            expansion,
            out_channels,
            stride,
        };
        Self {
            input_size: 64,
            stem_channels: 16,
            blocks: vec![b(1, 16, 1), b(4, 24, 2), b(4, 24, 1), b(4, 48, 2), b(4, 48, 1), b(4, 96, 2)],
            feature_dim: 256,
        }
    }
}

pub const MIN_INPUT: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantumConfig {
    pub enabled: bool,
    pub qubits: usize,
    pub depth: usize,
    pub alpha: f64,
}

impl Default for QuantumConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            qubits: 8,
            depth: 2,
            alpha: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgqConfig {
    pub encoder: EncoderConfig,
    pub quantum: QuantumConfig,
    /// Whether the domain discriminator exists at all.
    pub adversarial: bool,
    pub domains: usize,
    pub discriminator_hidden: usize,
}

impl Default for DgqConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            quantum: QuantumConfig::default(),
            adversarial: true,
            domains: 3,
            discriminator_hidden: 64,
        }
    }
}

impl DgqConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.stem_channels == 0 || e.feature_dim == 0 || e.blocks.iter().any(|b| b.out_channels == 0 || b.expansion == 0 || b.stride == 0) {
            return Err(Error::Config("encoder channel counts, expansions and strides must be positive".into()));
        }
        if e.input_size < MIN_INPUT {
            return Err(Error::Config(format!("input size {} below {MIN_INPUT}", e.input_size)));
        }
        if self.quantum.enabled {
            RingCircuit::new(self.quantum.qubits, self.quantum.depth)?;
            if self.quantum.qubits > e.feature_dim {
                return Err(Error::Config(format!(
                    "feature dim {} smaller than qubit count {}",
                    e.feature_dim, self.quantum.qubits
                )));
            }
            if !(self.quantum.alpha >= 0.0) {
                return Err(Error::Config(format!("fusion alpha {} must be nonnegative", self.quantum.alpha)));
            }
        }
        if self.adversarial && self.domains < 2 {
            return Err(Error::Config(format!("discriminator needs at least 2 domains, got {}", self.domains)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimpleCnnConfig {
    pub input_size: usize,
    pub channels: [usize; 2],
}

impl Default for SimpleCnnConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            channels: [16, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Dgq(DgqConfig),
    SimpleCnn(SimpleCnnConfig),
}

impl Architecture {
    pub fn input_size(&self) -> usize {
        match self {
            Self::Dgq(c) => c.encoder.input_size,
            Self::SimpleCnn(c) => c.input_size,
        }
    }
}

/// How normalization layers treat statistics during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BnMode {
    /// Batch statistics; running estimates blended with the given momentum.
    Train { momentum: f64 },
    /// Running statistics only.
    Eval,
    /// Batch statistics and blending like `Train`, used without gradients.
    Adapt { eta: f64 },
}

impl BnMode {
    pub fn train() -> Self {
        Self::Train { momentum: BN_MOMENTUM }
    }
}

/// New running statistics for one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate<T> {
    /// Layer prefix, e.g. `encoder.stem.bn`.
    pub layer: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Statistics of the batch itself (variance unbiased).
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

pub struct Outputs {
    pub logits: Var,
    /// Pooled encoder features `h`.
    pub features: Option<Var>,
    /// Features after fusion `h'` (equal to `features` when the circuit is off).
    pub fused: Option<Var>,
    pub domain_logits: Option<Var>,
}

/// Binding of store entries into one graph.
pub struct Binding<'a, T: Real> {
    pub graph: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    mode: BnMode,
    vars: IndexMap<String, Var>,
    updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Real> Binding<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, mode: BnMode) -> Self {
        Self {
            graph,
            store,
            mode,
            vars: IndexMap::new(),
            updates: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = self.graph.param(self.store.get(name)?.clone());
        self.vars.insert(name.to_owned(), v);
        Ok(v)
    }

    /// Bound parameters in binding order.
    pub fn vars(&self) -> &IndexMap<String, Var> {
        &self.vars
    }

    pub fn into_parts(self) -> (IndexMap<String, Var>, Vec<StatUpdate<T>>) {
        (self.vars, self.updates)
    }

    fn conv(&mut self, x: Var, prefix: &str, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let k = self.param(&format!("{prefix}.weight"))?;
        let bias_name = format!("{prefix}.bias");
        let b = if self.store.contains(&bias_name) {
            Some(self.param(&bias_name)?)
        } else {
            None
        };
        self.graph.conv2d(x, k, b, stride, padding, groups)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.graph.linear(x, w, Some(b))
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        let mean = self.store.get(&format!("{prefix}.running_mean"))?.data().to_vec();
        let var = self.store.get(&format!("{prefix}.running_var"))?.data().to_vec();
        let eps = T::lit(BN_EPS);
        let momentum = match self.mode {
            BnMode::Eval => return self.graph.batch_norm_running(x, gamma, beta, &mean, &var, eps),
            BnMode::Train { momentum } => momentum,
            BnMode::Adapt { eta } => eta,
        };
        let (y, stats) = self.graph.batch_norm_batch(x, gamma, beta, eps)?;
        let m = T::lit(momentum);
        let keep = T::one() - m;
        let correction = T::from_usize(stats.count).unwrap() / T::from_usize(stats.count - 1).unwrap();
        let batch_var: Vec<T> = stats.var.iter().map(|&v| v * correction).collect();
        self.updates.push(StatUpdate {
            layer: prefix.to_owned(),
            mean: mean.iter().zip(&stats.mean).map(|(&r, &b)| keep * r + m * b).collect(),
            var: var.iter().zip(&batch_var).map(|(&r, &b)| keep * r + m * b).collect(),
            batch_mean: stats.mean,
            batch_var,
        });
        Ok(y)
    }
}

/// Writes new running statistics into the store.
pub fn apply_stat_updates<T: Real>(store: &mut ParamStore<T>, updates: &[StatUpdate<T>]) -> Result<()> {
    for u in updates {
        store.get_mut(&format!("{}.running_mean", u.layer))?.data_mut().copy_from_slice(&u.mean);
        store.get_mut(&format!("{}.running_var", u.layer))?.data_mut().copy_from_slice(&u.var);
    }
    Ok(())
}

fn uniform<T: Real>(shape: &[usize], bound: f64, seed: u64, name: &str) -> Tensor<T> {
    let mut r = rng::tagged(seed, name);
    Tensor::from_fn(shape, |_| T::lit(r.random_range(-bound..=bound)))
}

struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
}

impl<T: Real> Init<'_, T> {
    /// Fan-in scaled uniform suited to rectifier activations.
    fn conv(&mut self, name: &str, k: usize, c_per_group: usize, ks: usize, bias: bool) {
        let fan_in = (c_per_group * ks * ks) as f64;
        let w = format!("{name}.weight");
        self.store.insert(&w, uniform(&[k, c_per_group, ks, ks], (6.0 / fan_in).sqrt(), self.seed, &w));
        if bias {
            let b = format!("{name}.bias");
            self.store.insert(&b, uniform(&[k], 1.0 / fan_in.sqrt(), self.seed, &b));
        }
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.store.insert(format!("{name}.weight"), Tensor::full(&[c], T::one()));
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[c]));
        self.store.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        self.store.insert(format!("{name}.running_var"), Tensor::full(&[c], T::one()));
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) {
        let bound = 1.0 / (inp as f64).sqrt();
        let (w, b) = (format!("{name}.weight"), format!("{name}.bias"));
        self.store.insert(&w, uniform(&[out, inp], bound, self.seed, &w));
        self.store.insert(&b, uniform(&[out], bound, self.seed, &b));
    }
}

/// Network plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Fresh parameters. Each entry is drawn from a stream keyed by its own
    /// name, so architectures that share a parameter also share its value.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, seed };
        match &arch {
            Architecture::Dgq(cfg) => {
                cfg.validate()?;
                let e = &cfg.encoder;
                init.conv("encoder.stem.conv", e.stem_channels, 1, 3, false);
                init.bn("encoder.stem.bn", e.stem_channels);
                let mut c = e.stem_channels;
                for (i, b) in e.blocks.iter().enumerate() {
                    let p = format!("encoder.blocks.{i}");
                    let hidden = c * b.expansion;
                    if b.expansion != 1 {
                        init.conv(&format!("{p}.expand.conv"), hidden, c, 1, false);
                        init.bn(&format!("{p}.expand.bn"), hidden);
                    }
                    init.conv(&format!("{p}.dw.conv"), hidden, 1, 3, false);
                    init.bn(&format!("{p}.dw.bn"), hidden);
                    init.conv(&format!("{p}.project.conv"), b.out_channels, hidden, 1, false);
                    init.bn(&format!("{p}.project.bn"), b.out_channels);
                    c = b.out_channels;
                }
                init.conv("encoder.head.conv", e.feature_dim, c, 1, false);
                init.bn("encoder.head.bn", e.feature_dim);
                let f = e.feature_dim;
                init.linear("classifier", CLASSES, f);
                if cfg.quantum.enabled {
                    let n = cfg.quantum.qubits;
                    let bound = (6.0 / (f + n) as f64).sqrt();
                    store.insert("quantum.wq", uniform(&[n, f], bound, seed, "quantum.wq"));
                    store.insert("quantum.wr", uniform(&[f, n], 0.1 * bound, seed, "quantum.wr"));
                }
                if cfg.adversarial {
                    let mut init = Init { store: &mut store, seed };
                    init.linear("discriminator.fc1", cfg.discriminator_hidden, f);
                    init.linear("discriminator.fc2", cfg.domains, cfg.discriminator_hidden);
                }
            }
            Architecture::SimpleCnn(cfg) => {
                if cfg.input_size < 4 {
                    return Err(Error::Config(format!("input size {} too small", cfg.input_size)));
                }
                let [c1, c2] = cfg.channels;
                init.conv("simple_cnn.conv1", c1, 1, 3, true);
                init.conv("simple_cnn.conv2", c2, c1, 3, true);
                let side = cfg.input_size / 4;
                init.linear("simple_cnn.fc", CLASSES, c2 * side * side);
            }
        }
        Ok(Self { arch, params: store })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Builds the forward graph for an `[N, 1, H, W]` batch.
    ///
    /// `lambda` is the reversal strength for the discriminator branch; with
    /// `None` (or without a discriminator) the branch is not built.
    pub fn forward(&self, b: &mut Binding<'_, T>, x: Var, lambda: Option<f64>) -> Result<Outputs> {
        match &self.arch {
            Architecture::Dgq(cfg) => dgq_forward(cfg, b, x, lambda),
            Architecture::SimpleCnn(_) => {
                let h = b.conv(x, "simple_cnn.conv1", 1, 1, 1)?;
                let h = b.graph.relu(h);
                let h = b.graph.max_pool2d(h)?;
                let h = b.conv(h, "simple_cnn.conv2", 1, 1, 1)?;
                let h = b.graph.relu(h);
                let h = b.graph.max_pool2d(h)?;
                let s = b.graph.shape(h).to_vec();
                let flat = b.graph.reshape(h, &[s[0], s[1] * s[2] * s[3]])?;
                let logits = b.linear(flat, "simple_cnn.fc")?;
                Ok(Outputs {
                    logits,
                    features: None,
                    fused: None,
                    domain_logits: None,
                })
            }
        }
    }

    /// Positive-class probabilities in evaluation mode, batch-parallel.
    pub fn predict_proba(&self, images: &[&Image]) -> Result<Vec<f64>> {
        const CHUNK: usize = 32;
        let chunks: Vec<Result<Vec<f64>>> = images
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = Graph::no_grad();
                let x = g.constant(images_to_tensor(chunk, self.arch.input_size())?);
                let mut b = Binding::new(&mut g, &self.params, BnMode::Eval);
                let out = self.forward(&mut b, x, None)?;
                let logits = g.value(out.logits).data().to_vec();
                Ok(crate::autodiff::softmax_rows(&logits, CLASSES)
                    .chunks_exact(CLASSES)
                    .map(|p| p[1].as_f64())
                    .collect())
            })
            .collect();
        let mut out = Vec::with_capacity(images.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}

fn dgq_forward<T: Real>(cfg: &DgqConfig, b: &mut Binding<'_, T>, x: Var, lambda: Option<f64>) -> Result<Outputs> {
    let h = encode(&cfg.encoder, b, x)?;
    let q = &cfg.quantum;
    let fused = if q.enabled && q.alpha != 0.0 {
        let wq = b.param("quantum.wq")?;
        let wr = b.param("quantum.wr")?;
        let circuit = RingCircuit::new(q.qubits, q.depth)?;
        quantum::enhance(b.graph, h, wq, wr, circuit, T::lit(q.alpha))?
    } else {
        h
    };
    let logits = b.linear(fused, "classifier")?;
    let domain_logits = match lambda {
        Some(l) if cfg.adversarial => Some(discriminate(b, h, l)?),
        _ => None,
    };
    Ok(Outputs {
        logits,
        features: Some(h),
        fused: Some(fused),
        domain_logits,
    })
}

/// Pooled feature vector `h` of an `[N, 1, H, W]` batch.
pub fn encode<T: Real>(cfg: &EncoderConfig, b: &mut Binding<'_, T>, x: Var) -> Result<Var> {
    let shape = b.graph.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::dim("encode", "rank", format!("expected [N, 1, H, W], got {shape:?}")));
    }
    if shape[1] != 1 {
        return Err(Error::dim("encode", "channel", format!("expected 1 input channel, got {}", shape[1])));
    }
    for (axis, &v) in [("height", &shape[2]), ("width", &shape[3])] {
        if v < MIN_INPUT {
            return Err(Error::dim("encode", axis, format!("{v} below the minimum {MIN_INPUT} for the stride plan")));
        }
    }
    let mut h = b.conv(x, "encoder.stem.conv", 2, 1, 1)?;
    h = b.bn(h, "encoder.stem.bn")?;
    h = b.graph.relu6(h);
    let mut c = cfg.stem_channels;
    for (i, blk) in cfg.blocks.iter().enumerate() {
        let p = format!("encoder.blocks.{i}");
        let input = h;
        let hidden = c * blk.expansion;
        let mut y = input;
        if blk.expansion != 1 {
            y = b.conv(y, &format!("{p}.expand.conv"), 1, 0, 1)?;
            y = b.bn(y, &format!("{p}.expand.bn"))?;
            y = b.graph.relu6(y);
        }
        y = b.conv(y, &format!("{p}.dw.conv"), blk.stride, 1, hidden)?;
        y = b.bn(y, &format!("{p}.dw.bn"))?;
        y = b.graph.relu6(y);
        y = b.conv(y, &format!("{p}.project.conv"), 1, 0, 1)?;
        y = b.bn(y, &format!("{p}.project.bn"))?;
        h = if blk.stride == 1 && blk.out_channels == c {
            b.graph.add(input, y)?
        } else {
            y
        };
        c = blk.out_channels;
    }
    h = b.conv(h, "encoder.head.conv", 1, 0, 1)?;
    h = b.bn(h, "encoder.head.bn")?;
    h = b.graph.relu6(h);
    b.graph.global_avg_pool(h)
}

/// `grl(h, λ) -> fc1 -> ReLU -> fc2`.
pub fn discriminate<T: Real>(b: &mut Binding<'_, T>, h: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Contract(format!("reversal strength {lambda} must be nonnegative")));
    }
    let r = b.graph.grl(h, T::lit(lambda));
    let z = b.linear(r, "discriminator.fc1")?;
    let z = b.graph.relu(z);
    b.linear(z, "discriminator.fc2")
}

/// Class logits from (fused) features.
pub fn classify<T: Real>(b: &mut Binding<'_, T>, h: Var) -> Result<Var> {
    b.linear(h, "classifier")
}

/// Batch mean of `‖h_i‖²`.
pub fn feature_norm_loss<T: Real>(g: &mut Graph<T>, h: Var) -> Result<Var> {
    g.mean_squared_norm(h)
}

/// Stacks equally sized images into `[N, 1, S, S]`.
pub fn images_to_tensor<T: Real>(images: &[&Image], size: usize) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::dim("batch", "batch", "empty batch"));
    }
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.width != size || img.height != size {
            return Err(Error::dim(
                "batch",
                if img.width != size { "width" } else { "height" },
                format!("image is {}x{}, model expects {size}x{size}", img.width, img.height),
            ));
        }
        data.extend(img.pixels.iter().map(|&p| T::lit(p)));
    }
    Tensor::new(&[images.len(), 1, size, size], data)
}
