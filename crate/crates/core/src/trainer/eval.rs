use serde::{Deserialize, Serialize};

use super::MultiTaskModel;
use crate::data::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::objectives::{argmax_classes, depth_metrics, segmentation_metrics, DepthMetrics, SegmentationMetrics};
use crate::tensor::Tensor;

/// Evaluation result in the metric family of the head's task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "kebab-case")]
pub enum TaskMetric {
    Accuracy { accuracy: f64 },
    Segmentation(SegmentationMetrics),
    /// `None` fields when no target pixel is valid.
    Depth { abs_err: Option<f64>, rel_err: Option<f64> },
}

impl TaskMetric {
    pub fn name(&self) -> &'static str {
        match self {
            TaskMetric::Accuracy { .. } => "accuracy",
            TaskMetric::Segmentation(_) => "mIoU",
            TaskMetric::Depth { .. } => "abs_err",
        }
    }

    /// Headline value: accuracy, mIoU, or absolute depth error (NaN when undefined).
    pub fn value(&self) -> f64 {
        match *self {
            TaskMetric::Accuracy { accuracy } => accuracy,
            TaskMetric::Segmentation(m) => m.miou,
            TaskMetric::Depth { abs_err, .. } => abs_err.unwrap_or(f64::NAN),
        }
    }

    pub fn higher_is_better(&self) -> bool {
        !matches!(self, TaskMetric::Depth { .. })
    }
}

impl From<Option<DepthMetrics>> for TaskMetric {
    fn from(m: Option<DepthMetrics>) -> Self {
        TaskMetric::Depth {
            abs_err: m.map(|m| m.abs_err),
            rel_err: m.map(|m| m.rel_err),
        }
    }
}

/// Runs head `head` on the features of module `module` over `data` in order.
pub fn evaluate_task(
    model: &MultiTaskModel,
    module: usize,
    head: usize,
    data: &Dataset,
    batch_size: usize,
) -> Result<TaskMetric> {
    let spec = &model.tasks[head].spec;
    let labels = data.task(spec.label_set()).ok_or_else(|| {
        Error::Data(format!("dataset has no label set `{}` for task `{}`", spec.label_set(), spec.task_id))
    })?;
    let mut outputs = Vec::new();
    for idx in data.ordered_batches(batch_size) {
        let b = data.batch(&idx);
        outputs.push(model.predict(module, head, &b.images));
    }
    if outputs.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    let out = Tensor::cat_batch(&outputs);
    Ok(match (spec.kind, labels) {
        (TaskKind::Classification { .. }, Labels::Class(y)) => {
            let pred = argmax_classes(&out);
            let correct = pred.iter().zip(y).filter(|(p, t)| p == t).count();
            TaskMetric::Accuracy {
                accuracy: correct as f64 / y.len() as f64,
            }
        }
        (TaskKind::Segmentation { classes }, Labels::Mask { labels: y, .. }) => {
            TaskMetric::Segmentation(segmentation_metrics(&argmax_classes(&out), y, classes))
        }
        (TaskKind::DenseRegression, Labels::Dense(y)) => depth_metrics(&out, y)?.into(),
        (kind, _) => {
            return Err(Error::Data(format!(
                "labels `{}` do not fit task `{}` of kind {kind:?}",
                spec.label_set(),
                spec.task_id
            )))
        }
    })
}
