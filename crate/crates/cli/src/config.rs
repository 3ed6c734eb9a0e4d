//! Run configuration, read from a TOML file.
//!
//! ```toml
//! layout = "layout.json"
//! model = "lgm"
//! waves = 4
//! noise_scale = 100.0
//! seed = 7
//!
//! [optimizer]
//! method = "nelder_mead"
//!
//! [nodes.site_a]
//! csv = "site_a.csv"
//!
//! [nodes.site_b]
//! endpoint = "10.0.0.2:7001"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use partmle::model::Model;
use partmle::optimizer::OptimizerConfig;
use partmle::partition::PartitionLayout;
use partmle::protocol::noise::{NoiseLedger, DEFAULT_NOISE_SCALE};
use partmle::transport::TransportKind;
use partmle::{DataPartition, Error};
use serde::Deserialize;

use crate::error::{CliError, CliResult};
use crate::ingest::{ingest, read_csv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Saturated,
    Lgm,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSource {
    pub csv: Option<PathBuf>,
    /// Address of a remote data node daemon.
    pub endpoint: Option<SocketAddr>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_SCALE
}

fn default_id() -> String {
    "id".into()
}

fn default_model() -> ModelKind {
    ModelKind::Saturated
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub layout: PathBuf,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    /// Number of waves for the growth model; defaults to the number of variables.
    pub waves: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    #[serde(default)]
    pub seed: u64,
    /// Debug switch: run without masks.
    #[serde(default)]
    pub zero_noise: bool,
    #[serde(default)]
    pub transport: TransportKind,
    /// Where the central node listens when data nodes are remote.
    pub central_listen: Option<SocketAddr>,
    #[serde(default = "default_id")]
    pub id_column: String,
    /// Fill missing cells with their column mean at the owning node.
    #[serde(default)]
    pub impute: bool,
    pub nodes: BTreeMap<String, NodeSource>,
    #[serde(default)]
    pub output: OutputSection,
    /// Directory of the config file, for resolving relative paths.
    #[serde(skip)]
    pub base: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)?;
        cfg.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn validate(&self) -> CliResult<()> {
        self.optimizer.validate()?;
        for (name, src) in &self.nodes {
            match (&src.csv, &src.endpoint) {
                (Some(p), None) => {
                    let p = self.resolve(p);
                    if !p.is_file() {
                        return Err(CliError::Input(format!("node {name}: data file {} does not exist", p.display())));
                    }
                }
                (None, Some(_)) => {}
                _ => return Err(CliError::Input(format!("node {name}: give exactly one of csv or endpoint"))),
            }
        }
        let layout = self.resolve(&self.layout);
        if !layout.is_file() {
            return Err(CliError::Input(format!("layout file {} does not exist", layout.display())));
        }
        Ok(())
    }

    pub fn load_layout(&self) -> CliResult<PartitionLayout> {
        Ok(PartitionLayout::load(&self.resolve(&self.layout))?)
    }

    pub fn model(&self, layout: &PartitionLayout) -> CliResult<Model> {
        let model = match self.model {
            ModelKind::Saturated => Model::saturated(layout.p),
            ModelKind::Lgm => {
                let waves = self.waves.unwrap_or(layout.p);
                if waves != layout.p {
                    return Err(CliError::Input(format!("growth model with {waves} waves for {} variables", layout.p)));
                }
                Model::lgm(waves)
            }
        };
        model.validate()?;
        Ok(model)
    }

    pub fn noise(&self) -> CliResult<NoiseLedger> {
        if self.zero_noise {
            log::warn!("masking disabled: transmitted values are not protected");
            return Ok(NoiseLedger::disabled(self.seed));
        }
        Ok(NoiseLedger::new(self.noise_scale, self.seed)?)
    }

    /// True when every node runs elsewhere.
    pub fn is_remote(&self) -> CliResult<bool> {
        let remote = self.nodes.values().filter(|s| s.endpoint.is_some()).count();
        match remote {
            0 => Ok(false),
            r if r == self.nodes.len() => Ok(true),
            _ => Err(CliError::Input("mixing local CSV nodes with remote endpoints is not supported".into())),
        }
    }

    /// Read and align every node's CSV.
    pub fn load_data(&self, layout: &PartitionLayout) -> CliResult<Vec<DataPartition>> {
        let mut tables = HashMap::new();
        for (name, src) in &self.nodes {
            let path = src.csv.as_ref().ok_or_else(|| Error::Config(format!("node {name} has no local data")))?;
            tables.insert(name.clone(), read_csv(&self.resolve(path), &self.id_column)?);
        }
        ingest(layout, tables, self.impute)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.dir.as_ref().map(|d| self.resolve(d)).unwrap_or_else(|| self.base.join("partmle-out"))
    }
}
