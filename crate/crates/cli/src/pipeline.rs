//! Loading and setup shared by the commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use driftcomp::compensation::init_shared_projections;
use driftcomp::data::{make_synthetic_dataset, DatasetManifest};
use driftcomp::evaluate::evaluate_accuracy;
use driftcomp::model::{build_toy_resnet, resnet20_cifar};
use driftcomp::rng::{derive_seed, Stream};
use driftcomp::{Backbone, Error, LabeledDataset, ModelSpec, Result, Shape, SharedProjections};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub struct Datasets {
    pub train: LabeledDataset,
    pub eval: LabeledDataset,
}

pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let (train, eval) = match &cfg.paths.dataset {
        Some(manifest) => DatasetManifest::read(manifest)?.load(manifest)?,
        None => make_synthetic_dataset(&cfg.data)?,
    };
    Ok(Datasets { train, eval })
}

/// The toy residual CNN sized for `input` and `classes`.
pub fn toy_spec(cfg: &RunConfig, input: Shape, classes: usize) -> Result<ModelSpec> {
    let mut spec = build_toy_resnet(cfg.model.width, cfg.model.blocks, classes, input)?;
    spec.select_compensated(cfg.compensation.layers);
    Ok(spec)
}

/// Topology for cost accounting.
pub fn cost_spec(cfg: &RunConfig) -> Result<(String, ModelSpec)> {
    let mut spec = match cfg.cost.topology.as_str() {
        "toy" => build_toy_resnet(cfg.model.width, cfg.model.blocks, cfg.data.classes, cfg.data.shape)?,
        "resnet20" => resnet20_cifar(10),
        path => {
            let p = Path::new(path);
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.into(),
                source: e,
            })?;
            let spec: ModelSpec = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: p.into(),
                offset: None,
                msg: e.to_string(),
            })?;
            spec.validate()?;
            return Ok((spec.name.clone(), spec));
        }
    };
    spec.select_compensated(cfg.compensation.layers);
    Ok((cfg.cost.topology.clone(), spec))
}

pub fn projections_for(cfg: &RunConfig, spec: &ModelSpec) -> Result<SharedProjections> {
    let (d_in, d_out) = spec.max_comp_dims();
    init_shared_projections(cfg.compensation.rank, d_in, d_out, derive_seed(cfg.seed, Stream::Projections, &[]))
}

/// Accuracy of the programmed backbone before any drift.
pub fn drift_free_accuracy(backbone: &Backbone, eval: &LabeledDataset) -> Result<f64> {
    evaluate_accuracy(&backbone.spec, &backbone.dequantized(), None, backbone.scheme.act_bits, eval)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let data = std::fs::read(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(&data)))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

/// Where every output of a command came from. Thread count is omitted on
/// purpose: results do not depend on it.
#[derive(Serialize)]
pub struct Provenance<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config: &'a RunConfig,
    /// File name → SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
}

impl<'a> Provenance<'a> {
    pub fn new(command: &'static str, config: &'a RunConfig) -> Self {
        Self {
            tool: "driftcomp",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: config.seed,
            config,
            outputs: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, path: &Path) -> Result<()> {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.outputs.insert(name, sha256_file(path)?);
        Ok(())
    }
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_text(path, &(text + "\n"))
}

pub fn out_file(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}
