//! Run configuration: a TOML file where every key has a default, plus
//! dotted `section.key=value` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use dgq_core::baselines::{ExperimentConfig, Variant};
use dgq_core::domainshift::{self, DomainSpec};
use dgq_core::nets::{Architecture, DgqConfig, SimpleCnnConfig};
use dgq_core::trainer::TrainConfig;
use dgq_core::tta::TtaConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_count: usize,
    pub test_count: usize,
    pub image_size: usize,
    pub pos_fraction: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_count: 600,
            test_count: 120,
            image_size: 64,
            pos_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainsSection {
    pub training: Vec<DomainSpec>,
    pub unseen: DomainSpec,
}

impl Default for DomainsSection {
    fn default() -> Self {
        Self {
            training: domainshift::training_domains(),
            unseen: domainshift::unseen_domain(),
        }
    }
}

impl DomainsSection {
    pub fn find(&self, id: usize) -> Option<&DomainSpec> {
        self.training.iter().chain(std::iter::once(&self.unseen)).find(|d| d.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub dgq: DgqConfig,
    pub simple_cnn: SimpleCnnConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: Variant::DgqFull,
            dgq: DgqConfig::default(),
            simple_cnn: SimpleCnnConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_boot: usize,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_boot: 500,
            seed: 0,
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataSection,
    pub domains: DomainsSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub tta: TtaConfig,
    pub eval: EvalSection,
}

impl Config {
    pub fn architecture(&self, variant: Variant) -> Architecture {
        variant.architecture(&self.model.dgq, &self.model.simple_cnn)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            train_count: self.data.train_count,
            test_count: self.data.test_count,
            image_size: self.data.image_size,
            pos_fraction: self.data.pos_fraction,
            dgq: self.model.dgq.clone(),
            simple_cnn: self.model.simple_cnn.clone(),
            train: self.train.clone(),
            tta: self.tta,
            domains: self.domains.training.clone(),
            unseen: self.domains.unseen.clone(),
            n_boot: self.eval.n_boot,
            output_dir: None,
        }
    }

    fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.dgq.validate()?;
        for d in self.domains.training.iter().chain(std::iter::once(&self.domains.unseen)) {
            d.validate()?;
        }
        for (i, d) in self.domains.training.iter().enumerate() {
            if d.id != i {
                bail!("training domain ids must be 0..{}, found {} at position {i}", self.domains.training.len(), d.id);
            }
        }
        if self.model.dgq.domains != self.domains.training.len() {
            bail!(
                "model.dgq.domains is {} but {} training domains are configured",
                self.model.dgq.domains,
                self.domains.training.len()
            );
        }
        Ok(())
    }
}

/// Parses the value side of an override as TOML, falling back to a bare
/// string so `--set model.variant=simple_cnn` needs no quotes.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not of the form section.key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
        bail!("override key `{path}` must look like section.key");
    }
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override `{path}`: `{k}` is not a section"),
        };
    }
    node.insert(keys[keys.len() - 1].to_owned(), parse_value(raw.trim()));
    Ok(())
}

pub fn parse(text: &str, overrides: &[String], origin: &str) -> Result<Config> {
    // a clean parse first, so file errors carry line numbers
    let mut cfg: Config = toml::from_str(text).map_err(|e| anyhow::anyhow!("{origin}: {e}"))?;
    if !overrides.is_empty() {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| anyhow::anyhow!("{origin}: {e}"))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        cfg = toml::Value::Table(table)
            .try_into()
            .map_err(|e| anyhow::anyhow!("after overrides {}: {e}", overrides.join(" ")))?;
    }
    cfg.validate().with_context(|| format!("{origin}: invalid configuration"))?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse(&text, overrides, &p.display().to_string())
        }
        None => parse("", overrides, "<defaults>"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        let cfg = parse("", &[], "t").unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.train.epochs, 15);
        assert_eq!(cfg.tta.eta, 0.1);
    }

    #[test]
    fn sections_and_overrides() {
        let text = "[train]\nepochs = 3\n[model.dgq.quantum]\nalpha = 0.25\n";
        let cfg = parse(
            text,
            &["train.batch_size=8".into(), "model.variant=simple_cnn".into(), "tta.eta=0.5".into()],
            "t",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.model.dgq.quantum.alpha, 0.25);
        assert_eq!(cfg.model.variant, Variant::SimpleCnn);
        assert_eq!(cfg.tta.eta, 0.5);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse("[train]\nepochs = 3\nepoch = 4\n", &[], "bad.toml").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("bad.toml") && msg.contains('3'), "{msg}");
        assert!(msg.contains("epoch"), "{msg}");
        assert!(parse("[train\n", &[], "x").is_err());
    }

    #[test]
    fn bad_overrides_are_rejected() {
        assert!(parse("", &["train".into()], "t").is_err());
        assert!(parse("", &["epochs=3".into()], "t").is_err());
        assert!(parse("", &["train.epochs=0".into()], "t").is_err());
        assert!(parse("", &["train.nonsense=1".into()], "t").is_err());
    }

    #[test]
    fn domain_lists_parse() {
        let text = r#"
[[domains.training]]
id = 0
beta = [1.0, 1.0]
kappa = [1.0, 1.0]
sharpen = [0.0, 0.0]
noise = [0.0, 0.0]

[domains.unseen]
id = 1
beta = [[0.6, 0.8], [1.2, 1.4]]
kappa = [0.5, 0.7]
sharpen = [0.8, 1.2]
noise = [0.06, 0.1]
"#;
        let err = parse(text, &[], "t").unwrap_err();
        // one training domain cannot drive a 3-way discriminator
        assert!(format!("{err:#}").contains("model.dgq.domains"));
        let cfg = parse(text, &["model.dgq.domains=1".into(), "model.dgq.adversarial=false".into()], "t").unwrap();
        assert_eq!(cfg.domains.unseen.beta.pieces().len(), 2);
    }
}
