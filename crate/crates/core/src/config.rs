//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Lists are comma separated
//! and exclusivity groups are written `2|3;4|5` (pipe within a group,
//! semicolon between groups). Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::attrs::{ExclusiveGroups, TargetSampler};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::ArchConfig;
use crate::synthdata::{AttributeKind, SynthSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub attributes: Vec<String>,
    pub groups: Vec<Vec<usize>>,
    pub arch: ArchConfig,
    pub weights: LossWeights,
    pub ak_on_reference: bool,
    pub lr_net: f64,
    pub lr_noise: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub p_flip: f64,
    pub single_attribute: bool,
    pub dataset: Option<DatasetConfig>,
    pub feature_dim: usize,
    pub feature_steps: usize,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub sample_every: u64,
    pub output_dir: PathBuf,
}

/// Keys that change how long or where a run goes, not what it computes.
const LOGISTICS_KEYS: &[&str] = &["steps", "log_every", "checkpoint_every", "sample_every", "output_dir"];

const KNOWN_KEYS: &[&str] = &[
    "image_size",
    "attributes",
    "groups",
    "noise_dim",
    "code_downsample",
    "code_channels",
    "enc_channels",
    "map_hidden",
    "map_channels",
    "gen_channels",
    "spade_hidden",
    "disc_channels",
    "lambda_cls",
    "lambda_rec",
    "lambda_sty",
    "lambda_ms",
    "lambda_ak",
    "lambda_cyc",
    "lambda_gp",
    "ak_on_reference",
    "lr_net",
    "lr_noise",
    "beta1",
    "beta2",
    "batch_size",
    "steps",
    "seed",
    "p_flip",
    "single_attribute",
    "dataset",
    "n_train",
    "n_test",
    "dataset_seed",
    "feature_dim",
    "feature_steps",
    "log_every",
    "checkpoint_every",
    "sample_every",
    "output_dir",
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            attributes: vec!["bright_background".into(), "square_shape".into(), "stripes".into()],
            groups: Vec::new(),
            arch: ArchConfig::default(),
            weights: LossWeights::default(),
            ak_on_reference: false,
            lr_net: 1e-4,
            lr_noise: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 16,
            steps: 20_000,
            seed: 0,
            p_flip: 0.5,
            single_attribute: false,
            dataset: Some(DatasetConfig { n_train: 4096, n_test: 512, seed: 1 }),
            feature_dim: 64,
            feature_steps: 400,
            log_every: 1,
            checkpoint_every: 5000,
            sample_every: 5000,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

struct Fields {
    map: BTreeMap<String, (usize, String)>,
}

impl Fields {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn parse<V: std::str::FromStr>(&mut self, key: &str, default: V) -> Result<V> {
        match self.take(key) {
            None => Ok(default),
            Some((line, raw)) => {
                raw.parse().map_err(|_| Error::Config(format!("line {line}: key `{key}`: cannot parse {raw:?}")))
            }
        }
    }

    fn list(&mut self, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
        match self.take(key) {
            None => Ok(default),
            Some((line, raw)) => raw
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Config(format!("line {line}: key `{key}`: bad integer list {raw:?}"))),
        }
    }
}

fn parse_groups(raw: &str) -> Result<Vec<Vec<usize>>> {
    raw.split(';')
        .map(str::trim)
        .filter(|g| !g.is_empty())
        .map(|g| {
            g.split('|')
                .map(|i| i.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Config(format!("key `groups`: bad group {g:?}")))
        })
        .collect()
}

fn join<V: ToString>(xs: &[V]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {line_no}: expected `key = value`, got {line:?}")));
            };
            let key = k.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("line {line_no}: unknown key `{key}`")));
            }
            if map.insert(key.clone(), (line_no, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {line_no}: duplicate key `{key}`")));
            }
        }
        let mut f = Fields { map };
        let d = Self::default();
        let da = ArchConfig::default();
        let dw = LossWeights::default();

        let attributes = match f.take("attributes") {
            None => d.attributes.clone(),
            Some((_, raw)) => raw.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        };
        let groups = match f.take("groups") {
            None => Vec::new(),
            Some((_, raw)) => parse_groups(&raw)?,
        };
        let arch = ArchConfig {
            image_size: f.parse("image_size", da.image_size)?,
            n_attrs: attributes.len(),
            noise_dim: f.parse("noise_dim", da.noise_dim)?,
            code_downsample: f.parse("code_downsample", da.code_downsample)?,
            code_channels: f.parse("code_channels", da.code_channels)?,
            enc_channels: f.list("enc_channels", da.enc_channels.clone())?,
            map_hidden: f.parse("map_hidden", da.map_hidden)?,
            map_channels: f.parse("map_channels", da.map_channels)?,
            gen_channels: f.list("gen_channels", da.gen_channels.clone())?,
            spade_hidden: f.parse("spade_hidden", da.spade_hidden)?,
            disc_channels: f.list("disc_channels", da.disc_channels.clone())?,
        };
        let weights = LossWeights {
            cls: f.parse("lambda_cls", dw.cls)?,
            rec: f.parse("lambda_rec", dw.rec)?,
            sty: f.parse("lambda_sty", dw.sty)?,
            ms: f.parse("lambda_ms", dw.ms)?,
            ak: f.parse("lambda_ak", dw.ak)?,
            cyc: f.parse("lambda_cyc", dw.cyc)?,
            gp: f.parse("lambda_gp", dw.gp)?,
        };
        let dataset = match f.take("dataset") {
            None => {
                for k in ["n_train", "n_test", "dataset_seed"] {
                    if let Some((line, _)) = f.take(k) {
                        return Err(Error::Config(format!("line {line}: key `{k}` requires `dataset`")));
                    }
                }
                None
            }
            Some((line, kind)) => {
                if kind != "synthetic" {
                    return Err(Error::Config(format!(
                        "line {line}: key `dataset`: only `synthetic` is supported, got {kind:?}"
                    )));
                }
                let dd = d.dataset.clone().expect("default has dataset");
                Some(DatasetConfig {
                    n_train: f.parse("n_train", dd.n_train)?,
                    n_test: f.parse("n_test", dd.n_test)?,
                    seed: f.parse("dataset_seed", dd.seed)?,
                })
            }
        };
        let cfg = Self {
            attributes,
            groups,
            arch,
            weights,
            ak_on_reference: f.parse("ak_on_reference", d.ak_on_reference)?,
            lr_net: f.parse("lr_net", d.lr_net)?,
            lr_noise: f.parse("lr_noise", d.lr_noise)?,
            beta1: f.parse("beta1", d.beta1)?,
            beta2: f.parse("beta2", d.beta2)?,
            batch_size: f.parse("batch_size", d.batch_size)?,
            steps: f.parse("steps", d.steps)?,
            seed: f.parse("seed", d.seed)?,
            p_flip: f.parse("p_flip", d.p_flip)?,
            single_attribute: f.parse("single_attribute", d.single_attribute)?,
            dataset,
            feature_dim: f.parse("feature_dim", d.feature_dim)?,
            feature_steps: f.parse("feature_steps", d.feature_steps)?,
            log_every: f.parse("log_every", d.log_every)?,
            checkpoint_every: f.parse("checkpoint_every", d.checkpoint_every)?,
            sample_every: f.parse("sample_every", d.sample_every)?,
            output_dir: f.take("output_dir").map(|(_, v)| PathBuf::from(v)).unwrap_or(d.output_dir),
        };
        debug_assert!(f.map.is_empty(), "unconsumed keys {:?}", f.map.keys());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn n_attrs(&self) -> usize {
        self.attributes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.attributes.is_empty() {
            return bad("`attributes` must name at least one attribute".into());
        }
        for name in &self.attributes {
            if AttributeKind::from_name(name).is_none() {
                return bad(format!("`attributes`: unknown attribute {name:?}"));
            }
        }
        ExclusiveGroups::new(self.groups.clone(), self.n_attrs())?;
        self.arch.validate()?;
        self.weights.validate()?;
        if !(self.p_flip > 0.0 && self.p_flip <= 1.0) {
            return bad(format!("`p_flip` must lie in (0,1], got {}", self.p_flip));
        }
        if self.batch_size == 0 {
            return bad("`batch_size` must be positive".into());
        }
        for (k, v) in [("lr_net", self.lr_net), ("lr_noise", self.lr_noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("`{k}` must be finite and >= 0"));
            }
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("`{k}` must lie in [0,1)"));
            }
        }
        if let Some(ds) = &self.dataset {
            if ds.n_train == 0 || ds.n_test == 0 {
                return bad("`n_train` and `n_test` must be >= 1".into());
            }
            let kinds = self.attributes.iter().filter_map(|n| AttributeKind::from_name(n)).collect();
            SynthSpec::new(self.arch.image_size, kinds, self.groups.clone())?;
        }
        if self.feature_dim == 0 {
            return bad("`feature_dim` must be positive".into());
        }
        Ok(())
    }

    /// Canonical text: every key in a fixed order.
    pub fn to_text(&self) -> String {
        let a = &self.arch;
        let w = &self.weights;
        let groups = self
            .groups
            .iter()
            .map(|g| g.iter().map(ToString::to_string).collect::<Vec<_>>().join("|"))
            .collect::<Vec<_>>()
            .join(";");
        let mut lines = vec![
            ("image_size", a.image_size.to_string()),
            ("attributes", self.attributes.join(",")),
            ("groups", groups),
            ("noise_dim", a.noise_dim.to_string()),
            ("code_downsample", a.code_downsample.to_string()),
            ("code_channels", a.code_channels.to_string()),
            ("enc_channels", join(&a.enc_channels)),
            ("map_hidden", a.map_hidden.to_string()),
            ("map_channels", a.map_channels.to_string()),
            ("gen_channels", join(&a.gen_channels)),
            ("spade_hidden", a.spade_hidden.to_string()),
            ("disc_channels", join(&a.disc_channels)),
            ("lambda_cls", w.cls.to_string()),
            ("lambda_rec", w.rec.to_string()),
            ("lambda_sty", w.sty.to_string()),
            ("lambda_ms", w.ms.to_string()),
            ("lambda_ak", w.ak.to_string()),
            ("lambda_cyc", w.cyc.to_string()),
            ("lambda_gp", w.gp.to_string()),
            ("ak_on_reference", self.ak_on_reference.to_string()),
            ("lr_net", self.lr_net.to_string()),
            ("lr_noise", self.lr_noise.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("p_flip", self.p_flip.to_string()),
            ("single_attribute", self.single_attribute.to_string()),
        ];
        if let Some(ds) = &self.dataset {
            lines.push(("dataset", "synthetic".into()));
            lines.push(("n_train", ds.n_train.to_string()));
            lines.push(("n_test", ds.n_test.to_string()));
            lines.push(("dataset_seed", ds.seed.to_string()));
        }
        lines.extend([
            ("feature_dim", self.feature_dim.to_string()),
            ("feature_steps", self.feature_steps.to_string()),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("sample_every", self.sample_every.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
        ]);
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 over the canonical text minus the logistics keys, hex encoded.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| {
                let key = l.split('=').next().unwrap_or("").trim();
                !LOGISTICS_KEYS.contains(&key)
            })
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn target_sampler(&self) -> TargetSampler {
        let groups = ExclusiveGroups::new(self.groups.clone(), self.n_attrs()).expect("validated groups");
        TargetSampler::new(self.p_flip, groups, self.single_attribute)
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let kinds = self.attributes.iter().map(|n| AttributeKind::from_name(n).expect("validated")).collect();
        SynthSpec::new(self.arch.image_size, kinds, self.groups.clone())
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut c = ExperimentConfig::default();
        c.groups = vec![vec![0, 1]];
        c.weights.ms = 0.25;
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_key_names_the_key() {
        let err = ExperimentConfig::parse("seed = 3\nlambda_foo = 1\n").unwrap_err();
        assert!(err.to_string().contains("lambda_foo"), "{err}");
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn comments_groups_and_missing_dataset() {
        let c = ExperimentConfig::parse(
            "# comment\nattributes = bright_background, square_shape, red_shape, blue_shape\ngroups = 2|3 # colours\n",
        )
        .unwrap();
        assert_eq!(c.groups, vec![vec![2, 3]]);
        assert!(c.dataset.is_none());
        assert!(ExperimentConfig::parse("n_train = 5\n").is_err());
    }

    #[test]
    fn hash_ignores_logistics_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.steps = 7;
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 99;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::parse("batch_size = zero\n").is_err());
        assert!(ExperimentConfig::parse("attributes = wings\n").is_err());
        assert!(ExperimentConfig::parse("lambda_ms = -1\n").is_err());
        assert!(ExperimentConfig::parse("groups = 0|9\n").is_err());
        assert!(ExperimentConfig::parse("seed 4\n").is_err());
    }
}
