//! Experiment configuration: one TOML document, optionally patched with
//! `--set a.b=value` overrides before it is parsed.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use metamorph_core::attacks::AttackConfig;
use metamorph_core::data::{generate_classification_pair, generate_dense_pair, load_image_folder, FolderConfig};
use metamorph_core::runtime::SessionConfig;
use metamorph_core::trainer::StepDecay;
use metamorph_core::{
    AdamWConfig, BackboneSpec, Dataset, DpSettings, LossWeights, MetamorphConfig, RegimeKind, SimilarityMeasure,
    SyntheticSceneConfig, TaskSpec, TrainConfig, TrainingRegime,
};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default = "BackboneSpec::desk_default")]
    pub backbone: BackboneSpec,
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub metamorph: MetamorphConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<DpSettings>,
    pub weights: LossWeights,
    pub regime: RegimeConfig,
    pub train: TrainBlock,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime: Option<RuntimeConfig>,
    pub output: OutputConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    ClassificationPair,
    DensePair,
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Samples held out (from the end) for evaluation.
    pub test_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSceneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folder: Option<FolderSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderSource {
    pub dir: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub image: FolderConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub kind: RegimeKind,
    #[serde(default)]
    pub phase1_epochs: usize,
    #[serde(default)]
    pub phase2_epochs: usize,
    #[serde(default = "default_true")]
    pub freeze_encoder_phase2: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "SimilarityMeasure::ssim")]
    pub similarity: SimilarityMeasure,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_decay: Option<StepDecay>,
    #[serde(default)]
    pub augment_hflip: bool,
    #[serde(default = "default_true")]
    pub select_best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Address `serve` binds to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listen: Option<String>,
    /// Address `consume` connects to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connect: Option<String>,
    /// Shared label key, 64 hex digits.
    pub key: String,
    /// How long `consume` keeps retrying a refused connection.
    #[serde(default)]
    pub connect_retry_ms: u64,
    /// Dump every frame of the session to `<output.dir>/capture.bin`.
    #[serde(default)]
    pub capture: bool,
    pub session: SessionConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

fn default_true() -> bool {
    true
}

/// Reads `path`, applies `overrides` and parses the result.
pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse(&text, overrides).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse(text: &str, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let patched = toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))?;
    let de = toml::de::Deserializer::parse(&patched).map_err(|e| CliError::Config(e.to_string()))?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("field `{path}`: {}", e.into_inner().message()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// `a.b.c=value`; numeric segments index arrays (`tasks.0.is_private`).
/// The value is read as a TOML literal, or as a bare string when it is not one.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form path=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override `{assignment}` has an empty path segment")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let bad = |depth: usize, what: &str| {
        CliError::Config(format!("override `{assignment}`: `{}` {what}", parts[..=depth].join(".")))
    };
    let mut cur = table
        .entry(parts[0].to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    for (depth, p) in parts.iter().enumerate().skip(1) {
        cur = match cur {
            toml::Value::Table(t) => t
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
            toml::Value::Array(a) => {
                let i: usize = p.parse().map_err(|_| bad(depth - 1, "is an array; expected an index"))?;
                let len = a.len();
                a.get_mut(i).ok_or_else(|| bad(depth, &format!("is out of range (length {len})")))?
            }
            _ => return Err(bad(depth - 1, "is not a table")),
        };
    }
    *cur = value;
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let mut seen = HashSet::new();
        for t in &self.tasks {
            if !seen.insert(t.task_id.as_str()) {
                return Err(CliError::Config(format!("field `tasks`: task_id `{}` is declared twice", t.task_id)));
            }
        }
        if self.tasks.is_empty() {
            return Err(CliError::Config("field `tasks`: at least one task is required".into()));
        }
        let needs_dp = matches!(self.regime.kind, RegimeKind::TwoPhase | RegimeKind::InputObfuscationOnly);
        if needs_dp && self.dp.is_none() {
            return Err(CliError::Config(format!(
                "field `dp`: regime {:?} needs a dp block with clip_threshold, target_epsilon and target_delta",
                self.regime.kind
            )));
        }
        match self.dataset.kind {
            DatasetKind::Folder if self.dataset.folder.is_none() => {
                Err(CliError::Config("field `dataset.folder`: required for kind = \"folder\"".into()))
            }
            DatasetKind::ClassificationPair | DatasetKind::DensePair if self.dataset.synthetic.is_none() => Err(
                CliError::Config("field `dataset.synthetic`: required for synthetic dataset kinds".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            regime: TrainingRegime {
                kind: self.regime.kind,
                phase1_epochs: self.regime.phase1_epochs,
                phase2_epochs: self.regime.phase2_epochs,
                freeze_encoder_phase2: self.regime.freeze_encoder_phase2,
                seed: self.seed,
            },
            batch_size: self.train.batch_size,
            optimizer: self.train.optimizer,
            weights: self.weights.clone(),
            similarity: self.train.similarity,
            lr_decay: self.train.lr_decay,
            augment_hflip: self.train.augment_hflip,
            select_best: self.train.select_best,
        }
    }

    /// Epochs that run under differential privacy.
    pub fn dp_epochs(&self) -> usize {
        match self.regime.kind {
            RegimeKind::TaskPrivacyOnly => 0,
            _ => self.regime.phase1_epochs,
        }
    }

    /// Full dataset, then split into (train, test).
    pub fn load_data(&self) -> Result<(Dataset, Dataset), CliError> {
        let data = match self.dataset.kind {
            DatasetKind::ClassificationPair => generate_classification_pair(self.synthetic())?,
            DatasetKind::DensePair => generate_dense_pair(self.synthetic())?,
            DatasetKind::Folder => {
                let f = self.dataset.folder.as_ref().expect("validated");
                load_image_folder(&f.dir, &f.labels, &f.image)?
            }
        };
        let n = data.len();
        if self.dataset.test_samples >= n {
            return Err(CliError::Config(format!(
                "field `dataset.test_samples`: {} leaves no training data out of {n} samples",
                self.dataset.test_samples
            )));
        }
        Ok(data.split(n - self.dataset.test_samples))
    }

    fn synthetic(&self) -> &SyntheticSceneConfig {
        self.dataset.synthetic.as_ref().expect("validated")
    }

    pub fn runtime(&self) -> Result<&RuntimeConfig, CliError> {
        self.runtime
            .as_ref()
            .ok_or_else(|| CliError::Config("field `runtime`: missing runtime block".into()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
seed = 7

[dataset]
kind = "classification-pair"
test_samples = 40

[dataset.synthetic]
image_size = [32, 32]
num_samples = 200
num_shapes = 3
shape_classes = 2
color_classes = 2
noise_level = 0.03
seed = 1

[[tasks]]
task_id = "shape"
kind = "classification"
classes = 2

[[tasks]]
task_id = "color"
kind = "classification"
classes = 2

[dp]
clip_threshold = 1.0
target_epsilon = 3.0
target_delta = 1e-5

[weights]
omega = 0.001

[regime]
kind = "TASK_PRIVACY_ONLY"
phase1_epochs = 1

[train]
batch_size = 32

[output]
dir = "out"
"#;

    #[test]
    fn sample_parses() {
        let c = parse(SAMPLE, &[]).unwrap();
        assert_eq!(c.tasks.len(), 2);
        assert_eq!(c.weights.omega, 0.001);
        assert_eq!(c.backbone, BackboneSpec::desk_default());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = parse(SAMPLE, &["runtime.key=\"00\"".into(), "runtime.session.session_id=3".into(), "runtime.session.task_id=shape".into()]).unwrap();
        assert_eq!(parse(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn unknown_field_is_named() {
        let text = SAMPLE.replace("[weights]\n", "[weights]\nomgea = 1.0\n");
        let err = parse(&text, &[]).unwrap_err().to_string();
        assert!(err.contains("weights") && err.contains("omgea"), "{err}");
    }

    #[test]
    fn omega_is_mandatory() {
        let text = SAMPLE.replace("omega = 0.001", "");
        let err = parse(&text, &[]).unwrap_err().to_string();
        assert!(err.contains("weights") && err.contains("omega"), "{err}");
    }

    #[test]
    fn clip_threshold_is_mandatory() {
        let text = SAMPLE.replace("clip_threshold = 1.0", "");
        let err = parse(&text, &[]).unwrap_err().to_string();
        assert!(err.contains("dp") && err.contains("clip_threshold"), "{err}");
    }

    #[test]
    fn dp_regime_without_dp_block_is_rejected() {
        let text = SAMPLE.replace("[dp]\nclip_threshold = 1.0\ntarget_epsilon = 3.0\ntarget_delta = 1e-5\n", "");
        let err = parse(&text, &["regime.kind=TWO_PHASE".into()]).unwrap_err().to_string();
        assert!(err.contains("dp"), "{err}");
    }

    #[test]
    fn overrides_patch_nested_fields() {
        let c = parse(SAMPLE, &["dp.clip_threshold=0.5".into(), "train.optimizer.learning_rate=1e-3".into()]).unwrap();
        assert_eq!(c.dp.unwrap().clip_threshold, 0.5);
        assert_eq!(c.train.optimizer.learning_rate, 1e-3);
        let c = parse(SAMPLE, &["output.dir=elsewhere/run".into()]).unwrap();
        assert_eq!(c.output.dir, PathBuf::from("elsewhere/run"));
        let c = parse(SAMPLE, &["tasks.1.is_private=true".into()]).unwrap();
        assert!(c.tasks[1].is_private && !c.tasks[0].is_private);
        assert!(parse(SAMPLE, &["tasks.5.is_private=true".into()]).is_err());
    }

    #[test]
    fn override_type_error_carries_the_path() {
        let err = parse(SAMPLE, &["train.batch_size=many".into()]).unwrap_err().to_string();
        assert!(err.contains("train.batch_size"), "{err}");
    }

    #[test]
    fn duplicate_task_ids_are_rejected() {
        let text = SAMPLE.replace("task_id = \"color\"", "task_id = \"shape\"");
        assert!(parse(&text, &[]).unwrap_err().to_string().contains("declared twice"));
    }
}
