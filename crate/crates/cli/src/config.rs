//! Run configuration: one TOML file, every section optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use driftcomp::compensation::CompensationConfig;
use driftcomp::cost::{CostSettings, HardwareProfile};
use driftcomp::data::SyntheticConfig;
use driftcomp::drift::{AnalyticDriftParams, ConductanceMap, DriftModel, MeasuredDriftTable};
use driftcomp::scheduler::SchedulerConfig;
use driftcomp::training::{PretrainConfig, TrainConfig};
use driftcomp::{Error, QuantScheme, Result};
use serde::{Deserialize, Serialize};

/// 1 s, 1 h, 1 d, 1 month (30.4375 d), 1 y, 10 y.
pub const DEFAULT_SWEEP_TIMES: [f64; 6] = [1.0, 3600.0, 86_400.0, 2_629_800.0, 31_536_000.0, 315_360_000.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every derived seed.
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[serde(skip_serializing)]
    pub threads: usize,
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
    pub paths: Paths,
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub quant: QuantScheme,
    pub pretrain: PretrainConfig,
    /// Minimum drift-free accuracy accepted from `pretrain`.
    pub pretrain_min_accuracy: f64,
    pub drift: DriftConfig,
    pub compensation: CompensationConfig,
    pub scheduler: SchedulerConfig,
    pub schedule: ScheduleOptions,
    pub train: TrainConfig,
    pub hardware: HardwareProfile,
    pub cost: CostConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            out_dir: PathBuf::from("out"),
            paths: Paths::default(),
            data: SyntheticConfig::default(),
            model: ModelConfig::default(),
            quant: QuantScheme::default(),
            pretrain: PretrainConfig::default(),
            pretrain_min_accuracy: 0.0,
            drift: DriftConfig::default(),
            compensation: CompensationConfig::default(),
            scheduler: SchedulerConfig::default(),
            schedule: ScheduleOptions::default(),
            train: TrainConfig::default(),
            hardware: HardwareProfile::default(),
            cost: CostConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// File locations; relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Defaults to `<out_dir>/backbone.ckpt`.
    pub backbone: Option<PathBuf>,
    /// Defaults to `<out_dir>/sets.dca`.
    pub archive: Option<PathBuf>,
    /// Dataset manifest; the synthetic generator is used when absent.
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { width: 8, blocks: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftConfig {
    /// `"analytic"` or `"measured:<table.csv>"`.
    pub model: String,
    pub analytic: AnalyticDriftParams,
    pub clamp_negative: bool,
    pub map: ConductanceMap,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            model: "analytic".into(),
            analytic: AnalyticDriftParams::default(),
            clamp_negative: true,
            map: ConductanceMap::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleOptions {
    /// When set, `a_thr` is the drift-free accuracy minus this many points.
    pub a_thr_drop_pts: Option<f64>,
    /// Accuracy-drop tolerances (percent) for the sets-vs-tolerance table.
    pub tolerance_grid_pct: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// `"toy"`, `"resnet20"` or a path to a model-spec JSON manifest.
    pub topology: String,
    pub ranks: Vec<usize>,
    pub set_counts: Vec<usize>,
    pub settings: CostSettings,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            topology: "toy".into(),
            ranks: vec![1, 6],
            set_counts: vec![11],
            settings: CostSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub times: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            times: DEFAULT_SWEEP_TIMES.to_vec(),
        }
    }
}

impl RunConfig {
    /// Parses a config file; relative paths inside are made relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format {
            path: origin.into(),
            offset: e.span().map(|s| s.start as u64),
            msg: e.message().to_string(),
        })
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.paths.backbone);
        fix(&mut self.paths.archive);
        fix(&mut self.paths.dataset);
        if let Some(table) = self.drift.model.strip_prefix("measured:") {
            let p = Path::new(table);
            if p.is_relative() {
                self.drift.model = format!("measured:{}", base.join(p).display());
            }
        }
        if !matches!(self.cost.topology.as_str(), "toy" | "resnet20") && Path::new(&self.cost.topology).is_relative() {
            self.cost.topology = base.join(&self.cost.topology).display().to_string();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.quant.validate()?;
        self.pretrain.validate()?;
        self.drift.model()?.validate()?;
        self.drift.map.validate()?;
        self.compensation.validate()?;
        self.train.validate()?;
        self.hardware.validate()?;
        driftcomp::cost::check_bits_comp(self.cost.settings.bits_comp)?;
        if self.model.width < 4 || self.model.blocks == 0 {
            return Err(Error::Config("model width must be >= 4 and blocks >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.pretrain_min_accuracy) {
            return Err(Error::Config("pretrain_min_accuracy must lie in [0, 1]".into()));
        }
        if self.sweep.times.iter().any(|t| *t < 1.0 || !t.is_finite()) {
            return Err(Error::Config("sweep times must be finite and >= 1 s".into()));
        }
        Ok(())
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.paths.backbone.clone().unwrap_or_else(|| self.out_dir.join("backbone.ckpt"))
    }

    pub fn archive_path(&self) -> PathBuf {
        self.paths.archive.clone().unwrap_or_else(|| self.out_dir.join("sets.dca"))
    }
}

impl DriftConfig {
    pub fn model(&self) -> Result<DriftModel> {
        let mut m = match self.model.as_str() {
            "analytic" => DriftModel::analytic(self.analytic),
            other => match other.strip_prefix("measured:") {
                Some(path) => DriftModel::measured(MeasuredDriftTable::read_csv(Path::new(path))?),
                None => {
                    return Err(Error::Config(format!(
                        "drift model must be \"analytic\" or \"measured:<path>\", got {other:?}"
                    )))
                }
            },
        };
        m.clamp_negative = self.clamp_negative;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("", Path::new("c.toml")).unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["colour = 1", "[scheduler]\nthreshold = 0.5", "[paths]\nmodel = \"x\""] {
            let err = RunConfig::parse(text, Path::new("c.toml")).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "{text}: {err}");
        }
    }

    #[test]
    fn nested_sections_parse() {
        let text = r#"
seed = 9
[drift]
model = "measured:table.csv"
[drift.map]
encoding = "differential-pair"
[scheduler]
a_thr = 0.8
n_eval = 10
[schedule]
a_thr_drop_pts = 5.0
[cost]
topology = "resnet20"
ranks = [1]
"#;
        let mut c = RunConfig::parse(text, Path::new("c.toml")).unwrap();
        c.rebase(Path::new("/cfg"));
        assert_eq!(c.seed, 9);
        assert_eq!(c.drift.model, "measured:/cfg/table.csv");
        assert_eq!(c.scheduler.n_eval, 10);
        assert_eq!(c.schedule.a_thr_drop_pts, Some(5.0));
        assert_eq!(c.cost.topology, "resnet20");
    }

    #[test]
    fn unknown_drift_model_is_a_config_error() {
        let c = DriftConfig {
            model: "lognormal".into(),
            ..Default::default()
        };
        assert!(matches!(c.model(), Err(Error::Config(_))));
    }
}
