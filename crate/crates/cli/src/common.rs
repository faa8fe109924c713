//! Shared helpers: config loading, output directory, dataset and image
//! sources.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use attrbridge::attrs::AttributeVector;
use attrbridge::config::ExperimentConfig;
use attrbridge::imageio::read_image;
use attrbridge::synthdata::{build_dataset, oracle_classify, Dataset, Image, SynthSpec};
use attrbridge::Error;

use crate::error::CliResult;

/// Overrides the config's `output_dir` when set and non-empty.
pub const OUTPUT_DIR_ENV: &str = "ATTRBRIDGE_OUTPUT_DIR";

pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    match ExperimentConfig::load(path) {
        Err(Error::NotFound(p)) => Err(Error::Config(format!("config file {} not found", p.display())).into()),
        other => Ok(other?),
    }
}

pub fn output_dir(config: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => config.output_dir.clone(),
    }
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn require_dataset(config: &ExperimentConfig) -> CliResult<Dataset> {
    let ds = config
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("config has no dataset spec; set `dataset = synthetic`".into()))?;
    Ok(build_dataset(&config.synth_spec()?, ds.n_train, ds.n_test, ds.seed)?)
}

/// A dataset sample id or a pixmap path.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Sample(u64),
    File(PathBuf),
}

impl FromStr for ImageSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            return Err("empty image source".into());
        }
        Ok(match s.parse::<u64>() {
            Ok(id) => ImageSource::Sample(id),
            Err(_) => ImageSource::File(PathBuf::from(s)),
        })
    }
}

impl fmt::Display for ImageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageSource::Sample(id) => write!(f, "sample {id}"),
            ImageSource::File(p) => write!(f, "{}", p.display()),
        }
    }
}

/// Resolves image sources, building the dataset only when an id is used.
pub struct SourceResolver<'a> {
    config: &'a ExperimentConfig,
    spec: SynthSpec,
    dataset: Option<Dataset>,
}

impl<'a> SourceResolver<'a> {
    pub fn new(config: &'a ExperimentConfig) -> CliResult<Self> {
        Ok(Self { config, spec: config.synth_spec()?, dataset: None })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    /// The image and its label; a file's label is `label` if given, else
    /// the oracle's decision.
    pub fn resolve(
        &mut self,
        src: &ImageSource,
        label: Option<&AttributeVector>,
    ) -> CliResult<(Image, AttributeVector)> {
        let n = self.config.n_attrs();
        let size = self.config.arch.image_size;
        match src {
            ImageSource::Sample(id) => {
                if self.dataset.is_none() {
                    self.dataset = Some(require_dataset(self.config)?);
                }
                let ds = self.dataset.as_ref().expect("built above");
                let sample = ds.train.iter().chain(&ds.test).find(|s| s.id == *id).ok_or_else(|| {
                    Error::Argument(format!("no sample with id {id}; ids run 0..{}", ds.train.len() + ds.test.len()))
                })?;
                Ok((sample.image.clone(), label.cloned().unwrap_or_else(|| sample.label.clone())))
            }
            ImageSource::File(path) => {
                let image = read_image(path)?;
                if image.size() != size {
                    return Err(Error::Argument(format!(
                        "{} is {}x{}, the model expects {size}x{size}",
                        path.display(),
                        image.size(),
                        image.size()
                    ))
                    .into());
                }
                let label = match label {
                    Some(l) => l.clone(),
                    None => oracle_classify(&self.spec, &image)?.label().ok_or_else(|| {
                        Error::Argument(format!("cannot read the attributes of {}; pass its label", path.display()))
                    })?,
                };
                if label.len() != n {
                    return Err(Error::Argument(format!("label has {} attributes, config has {n}", label.len())).into());
                }
                Ok((image, label))
            }
        }
    }
}
