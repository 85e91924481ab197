use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Labels;
use crate::error::{Error, Result};
use crate::model::{build_encoder, BackboneSpec, Head, Metamorph, MetamorphConfig, Stage, TaskKind};
use crate::nn::{Bound, ParamStore};
use crate::objectives::{cross_entropy_loss, depth_loss};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    /// Mean absolute error over pixels with a positive target.
    MaskedL1,
}

/// Declaration of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTaskSpec", into = "RawTaskSpec")]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    pub loss: Option<LossKind>,
    pub is_private: bool,
    /// Label set in the dataset; defaults to `task_id`.
    pub labels: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum KindName {
    Classification,
    Segmentation,
    DenseRegression,
}

/// Flat serialized form: `kind` and `classes` sit beside the other fields.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTaskSpec {
    task_id: String,
    kind: KindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    loss: Option<LossKind>,
    #[serde(default)]
    is_private: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<String>,
}

impl TryFrom<RawTaskSpec> for TaskSpec {
    type Error = String;

    fn try_from(r: RawTaskSpec) -> std::result::Result<Self, String> {
        let kind = match (r.kind, r.classes) {
            (KindName::Classification, Some(classes)) => TaskKind::Classification { classes },
            (KindName::Segmentation, Some(classes)) => TaskKind::Segmentation { classes },
            (KindName::DenseRegression, None) => TaskKind::DenseRegression,
            (KindName::DenseRegression, Some(_)) => {
                return Err(format!("task `{}`: dense-regression takes no `classes`", r.task_id))
            }
            (_, None) => return Err(format!("task `{}`: missing field `classes`", r.task_id)),
        };
        Ok(Self {
            task_id: r.task_id,
            kind,
            loss: r.loss,
            is_private: r.is_private,
            labels: r.labels,
        })
    }
}

impl From<TaskSpec> for RawTaskSpec {
    fn from(t: TaskSpec) -> Self {
        let (kind, classes) = match t.kind {
            TaskKind::Classification { classes } => (KindName::Classification, Some(classes)),
            TaskKind::Segmentation { classes } => (KindName::Segmentation, Some(classes)),
            TaskKind::DenseRegression => (KindName::DenseRegression, None),
        };
        Self {
            task_id: t.task_id,
            kind,
            classes,
            loss: t.loss,
            is_private: t.is_private,
            labels: t.labels,
        }
    }
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, kind: TaskKind) -> Self {
        Self {
            task_id: task_id.into(),
            kind,
            loss: None,
            is_private: false,
            labels: None,
        }
    }

    pub fn private(mut self) -> Self {
        self.is_private = true;
        self
    }

    pub fn with_labels(mut self, labels: impl Into<String>) -> Self {
        self.labels = Some(labels.into());
        self
    }

    pub fn label_set(&self) -> &str {
        self.labels.as_deref().unwrap_or(&self.task_id)
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss.unwrap_or(match self.kind {
            TaskKind::DenseRegression => LossKind::MaskedL1,
            _ => LossKind::CrossEntropy,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let compatible = matches!(
            (self.kind, self.loss_kind()),
            (TaskKind::DenseRegression, LossKind::MaskedL1)
                | (TaskKind::Classification { .. } | TaskKind::Segmentation { .. }, LossKind::CrossEntropy)
        );
        if !compatible {
            return Err(Error::Config(format!(
                "task `{}`: loss {:?} does not fit task kind {:?}",
                self.task_id,
                self.loss_kind(),
                self.kind
            )));
        }
        Ok(())
    }
}

/// Loss of one task's output against its labels. `None` when no position is
/// valid (for example a depth map without positive pixels).
pub fn task_loss(tape: &mut Tape, spec: &TaskSpec, output: Var, labels: &Labels) -> Result<Option<Var>> {
    match (spec.loss_kind(), labels) {
        (LossKind::CrossEntropy, Labels::Class(l) | Labels::Mask { labels: l, .. }) => {
            if l.iter().all(|&v| v == crate::tensor::IGNORE_INDEX) {
                return Ok(None);
            }
            cross_entropy_loss(tape, output, l).map(Some)
        }
        (LossKind::MaskedL1, Labels::Dense(t)) => depth_loss(tape, output, t),
        _ => Err(Error::Config(format!(
            "task `{}` labels do not match its loss {:?}",
            spec.task_id,
            spec.loss_kind()
        ))),
    }
}

/// Metamorph module and head of one task.
#[derive(Clone, Debug)]
pub struct TaskModule {
    pub spec: TaskSpec,
    pub metamorph: Metamorph,
    pub head: Head,
}

/// Shared encoder plus per-task metamorph modules and heads.
#[derive(Clone, Debug)]
pub struct MultiTaskModel {
    pub backbone: BackboneSpec,
    pub metamorph_config: MetamorphConfig,
    pub encoder: Stage,
    pub tasks: Vec<TaskModule>,
}

impl MultiTaskModel {
    pub fn new<R: Rng + ?Sized>(
        backbone: BackboneSpec,
        metamorph_config: MetamorphConfig,
        specs: &[TaskSpec],
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = build_encoder(&backbone, rng)?;
        let mut model = Self {
            backbone,
            metamorph_config,
            encoder,
            tasks: Vec::new(),
        };
        for spec in specs {
            model.push_task(spec.clone(), rng)?;
        }
        Ok(model)
    }

    /// Adds a freshly initialized module and head for a new task.
    pub fn push_task<R: Rng + ?Sized>(&mut self, spec: TaskSpec, rng: &mut R) -> Result<usize> {
        spec.validate()?;
        if self.task_index(&spec.task_id).is_some() {
            return Err(Error::Config(format!("task_id `{}` is declared twice", spec.task_id)));
        }
        let channels = self.encoder.output_shape()[0];
        let metamorph = Metamorph::new(self.metamorph_config, channels, rng)?;
        let head = Head::new(&self.backbone, spec.kind, rng)?;
        if head.input_shape() != self.encoder.output_shape() {
            return Err(Error::Config(format!(
                "task `{}` head expects features {:?} but the encoder produces {:?}",
                spec.task_id,
                head.input_shape(),
                self.encoder.output_shape()
            )));
        }
        self.tasks.push(TaskModule { spec, metamorph, head });
        Ok(self.tasks.len() - 1)
    }

    pub fn task_index(&self, id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.spec.task_id == id)
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.spec.task_id.clone()).collect()
    }

    pub fn private_task(&self) -> Option<usize> {
        self.tasks.iter().position(|t| t.spec.is_private)
    }

    pub fn encode(&self, images: &Tensor) -> Tensor {
        self.encoder.infer(images)
    }

    /// Shared features g_i(E(x)) of task `module`.
    pub fn features(&self, module: usize, images: &Tensor) -> Tensor {
        self.tasks[module].metamorph.infer(&self.encode(images))
    }

    /// head_j ∘ g_i ∘ E on a batch of images.
    pub fn predict(&self, module: usize, head: usize, images: &Tensor) -> Tensor {
        self.tasks[head].head.infer(&self.features(module, images))
    }

    /// Every parameter under a component-qualified name.
    pub fn named_stores(&self) -> Vec<(String, &ParamStore)> {
        let mut out = vec![("encoder".to_string(), &self.encoder.params)];
        for t in &self.tasks {
            out.push((format!("metamorph/{}", t.spec.task_id), &t.metamorph.params));
            out.push((format!("head/{}", t.spec.task_id), &t.head.params));
        }
        out
    }

    pub fn named_stores_mut(&mut self) -> Vec<(String, &mut ParamStore)> {
        let mut out = vec![("encoder".to_string(), &mut self.encoder.params)];
        for t in &mut self.tasks {
            out.push((format!("metamorph/{}", t.spec.task_id), &mut t.metamorph.params));
            out.push((format!("head/{}", t.spec.task_id), &mut t.head.params));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_stores().iter().map(|(_, s)| s.num_scalars()).sum()
    }
}

/// Tape bindings of a model for one forward pass.
pub(crate) struct Bindings {
    pub encoder: Bound,
    pub metamorphs: Vec<Option<Bound>>,
    pub heads: Vec<Option<Bound>>,
}

/// Which parts of the model receive gradients in a step.
#[derive(Clone, Debug)]
pub(crate) struct Trainable {
    pub encoder: bool,
    pub metamorphs: Vec<bool>,
    pub heads: Vec<bool>,
}

impl Trainable {
    pub fn frozen(tasks: usize) -> Self {
        Self {
            encoder: false,
            metamorphs: vec![false; tasks],
            heads: vec![false; tasks],
        }
    }
}

impl MultiTaskModel {
    /// Binds the encoder and the modules and heads of `tasks`.
    pub(crate) fn bind(&self, tape: &mut Tape, tasks: &[usize], heads: &[usize], t: &Trainable) -> Bindings {
        let encoder = self.encoder.params.bind(tape, t.encoder);
        let mut metamorphs = vec![None; self.tasks.len()];
        let mut bound_heads = vec![None; self.tasks.len()];
        for &i in tasks {
            metamorphs[i] = Some(self.tasks[i].metamorph.params.bind(tape, t.metamorphs[i]));
        }
        for &i in heads {
            bound_heads[i] = Some(self.tasks[i].head.params.bind(tape, t.heads[i]));
        }
        Bindings {
            encoder,
            metamorphs,
            heads: bound_heads,
        }
    }
}
