//! Task losses, the task-privacy penalty and evaluation metrics.

mod ssim;

pub use ssim::{
    dynamic_range, similarity, similarity_per_sample, similarity_value, SimilarityKind, SimilarityMeasure,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, IGNORE_INDEX};

/// Weights of the combined objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Task-privacy weight ω.
    pub omega: f64,
    /// Per-task loss weights; empty means 1 for every task.
    #[serde(default)]
    pub per_task: Vec<f64>,
}

impl LossWeights {
    pub fn new(omega: f64) -> Self {
        Self {
            omega,
            per_task: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.omega) {
            return Err(Error::Config(format!("weights.omega = {} must be finite and ≥ 0", self.omega)));
        }
        if let Some(i) = self.per_task.iter().position(|&w| !ok(w)) {
            return Err(Error::Config(format!(
                "weights.per_task[{i}] = {} must be finite and ≥ 0",
                self.per_task[i]
            )));
        }
        Ok(())
    }

    pub fn task(&self, i: usize) -> f64 {
        self.per_task.get(i).copied().unwrap_or(1.0)
    }
}

/// Target-performance policy ξ used to judge matched-task metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationPolicy {
    pub target_accuracy: f64,
}

impl EvaluationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_accuracy > 0.0 && self.target_accuracy < 1.0) {
            return Err(Error::Config(format!(
                "target_accuracy = {} must lie in (0, 1)",
                self.target_accuracy
            )));
        }
        Ok(())
    }

    pub fn meets(&self, accuracy: f64) -> bool {
        accuracy >= self.target_accuracy
    }
}

/// Checks that every label is a class index or the ignore value.
/// `shape` is (N, H, W) for dense labels or (N) for per-sample labels.
pub fn validate_labels(labels: &[u32], classes: usize, shape: &[usize]) -> Result<()> {
    if let Some(i) = labels
        .iter()
        .position(|&l| l != IGNORE_INDEX && l as usize >= classes)
    {
        let coord = match shape {
            [_, h, w] => {
                let (n, rem) = (i / (h * w), i % (h * w));
                format!("sample {n}, pixel ({}, {})", rem / w, rem % w)
            }
            _ => format!("index {i}"),
        };
        return Err(Error::Data(format!(
            "label {} at {coord} is outside [0, {classes})",
            labels[i]
        )));
    }
    Ok(())
}

/// Mean cross-entropy over non-ignored positions. `logits` is [N, K] or
/// [N, K, H, W]; labels are row-major over (N[, H, W]).
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[u32]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() < 2 {
        return Err(Error::Config(format!("logits of shape {shape:?} need a class axis")));
    }
    let positions: usize = shape.iter().skip(2).product::<usize>() * shape[0];
    if labels.len() != positions {
        return Err(Error::Config(format!(
            "{} labels do not match logits of shape {shape:?}",
            labels.len()
        )));
    }
    let mut label_shape = vec![shape[0]];
    label_shape.extend_from_slice(&shape[2..]);
    validate_labels(labels, shape[1], &label_shape)?;
    Ok(tape.cross_entropy(logits, labels))
}

/// Segmentation loss on per-pixel class scores [N, K, H, W].
pub fn segmentation_loss(tape: &mut Tape, scores: Var, labels: &[u32]) -> Result<Var> {
    if tape.shape(scores).len() != 4 {
        return Err(Error::Config("segmentation scores must be NCHW".into()));
    }
    cross_entropy_loss(tape, scores, labels)
}

/// Validity mask (1 where target > 0) and its count.
pub fn depth_mask(target: &Tensor) -> (Tensor, usize) {
    let data: Vec<f32> = target.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    let count = data.iter().filter(|&&v| v > 0.0).count();
    (Tensor::new(target.shape().to_vec(), data), count)
}

/// Mean absolute error over pixels with a positive target. Returns `None`
/// when no pixel is valid.
pub fn depth_loss(tape: &mut Tape, predicted: Var, target: &Tensor) -> Result<Option<Var>> {
    if tape.shape(predicted) != target.shape() {
        return Err(Error::Config(format!(
            "depth prediction {:?} and target {:?} differ in shape",
            tape.shape(predicted),
            target.shape()
        )));
    }
    let (mask, count) = depth_mask(target);
    if count == 0 {
        return Ok(None);
    }
    let t = tape.constant(target.clone());
    let m = tape.constant(mask);
    let diff = tape.sub(predicted, t);
    let diff = tape.abs(diff);
    let masked = tape.mul(diff, m);
    let total = tape.sum(masked);
    Ok(Some(tape.scale(total, 1.0 / count as f32)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_err: f64,
    pub rel_err: f64,
    pub valid_pixels: usize,
}

/// Absolute and relative depth error over valid (target > 0) pixels.
pub fn depth_metrics(predicted: &Tensor, target: &Tensor) -> Result<Option<DepthMetrics>> {
    if predicted.shape() != target.shape() {
        return Err(Error::Config("depth prediction and target differ in shape".into()));
    }
    let (mut abs, mut rel, mut n) = (0.0f64, 0.0f64, 0usize);
    for (&p, &y) in predicted.data().iter().zip(target.data()) {
        if y > 0.0 {
            let e = (f64::from(y) - f64::from(p)).abs();
            abs += e;
            rel += e / f64::from(y);
            n += 1;
        }
    }
    Ok((n > 0).then(|| DepthMetrics {
        abs_err: abs / n as f64,
        rel_err: rel / n as f64,
        valid_pixels: n,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalMetrics {
    pub mean_deg: f64,
    pub median_deg: f64,
    pub within_11_25: f64,
    pub within_22_5: f64,
    pub within_30: f64,
}

/// Angular error statistics between unit-normal maps of shape [N, 3, H, W].
pub fn surface_normal_metrics(predicted: &Tensor, target: &Tensor) -> Result<NormalMetrics> {
    if predicted.shape() != target.shape() || predicted.ndim() != 4 || predicted.shape()[1] != 3 {
        return Err(Error::Config(format!(
            "normal maps must share an [N, 3, H, W] shape, got {:?} and {:?}",
            predicted.shape(),
            target.shape()
        )));
    }
    let (n, _, h, w) = predicted.dims4();
    let plane = h * w;
    let mut angles = Vec::with_capacity(n * plane);
    for s in 0..n {
        for p in 0..plane {
            let at = |t: &Tensor, c: usize| f64::from(t.data()[(s * 3 + c) * plane + p]);
            let (mut dot, mut np, mut nt) = (0.0, 0.0, 0.0);
            for c in 0..3 {
                dot += at(predicted, c) * at(target, c);
                np += at(predicted, c).powi(2);
                nt += at(target, c).powi(2);
            }
            for (norm, which) in [(np, "predicted"), (nt, "target")] {
                if (norm.sqrt() - 1.0).abs() > 1e-3 {
                    return Err(Error::Data(format!(
                        "{which} normal at sample {s}, pixel ({}, {}) has length {:.4}",
                        p / w,
                        p % w,
                        norm.sqrt()
                    )));
                }
            }
            let cos = dot / (np.sqrt() * nt.sqrt());
            angles.push(cos.clamp(-1.0, 1.0).acos().to_degrees());
        }
    }
    if angles.is_empty() {
        return Err(Error::Data("normal maps are empty".into()));
    }
    let count = angles.len() as f64;
    let mean = angles.iter().sum::<f64>() / count;
    let frac = |t: f64| angles.iter().filter(|&&a| a < t).count() as f64 / count;
    let (f1, f2, f3) = (frac(11.25), frac(22.5), frac(30.0));
    angles.sort_by(f64::total_cmp);
    let mid = angles.len() / 2;
    let median = if angles.len() % 2 == 0 {
        0.5 * (angles[mid - 1] + angles[mid])
    } else {
        angles[mid]
    };
    Ok(NormalMetrics {
        mean_deg: mean,
        median_deg: median,
        within_11_25: f1,
        within_22_5: f2,
        within_30: f3,
    })
}

/// Σ over ordered pairs i ≠ j of similarity(features[i], features[j]).
pub fn task_privacy_loss(tape: &mut Tape, features: &[Var], m: &SimilarityMeasure) -> Result<Option<Var>> {
    if let Some(&first) = features.first() {
        let shape = tape.shape(first).to_vec();
        if let Some(bad) = features.iter().position(|&f| tape.shape(f) != shape.as_slice()) {
            return Err(Error::Config(format!(
                "task feature {bad} has shape {:?}, expected {shape:?}",
                tape.shape(features[bad])
            )));
        }
    }
    let mut total: Option<Var> = None;
    for i in 0..features.len() {
        for j in (i + 1)..features.len() {
            let s = similarity(tape, features[i], features[j], m)?;
            total = Some(match total {
                Some(t) => tape.add(t, s),
                None => s,
            });
        }
    }
    // Similarity is symmetric, so each unordered pair counts twice.
    Ok(total.map(|t| tape.scale(t, 2.0)))
}

/// Value-only variant of [`task_privacy_loss`]; 0 for fewer than two tasks.
pub fn task_privacy_value(features: &[Tensor], m: &SimilarityMeasure) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
    Ok(task_privacy_loss(&mut tape, &vars, m)?
        .map(|v| f64::from(tape.value(v).item()))
        .unwrap_or(0.0))
}

/// Σ per_task[i]·L_i + ω·tp.
pub fn combined_loss(tape: &mut Tape, task_losses: &[Var], tp: Option<Var>, w: &LossWeights) -> Var {
    let mut total: Option<Var> = None;
    let mut push = |tape: &mut Tape, v: Var| {
        total = Some(match total {
            Some(t) => tape.add(t, v),
            None => v,
        });
    };
    for (i, &l) in task_losses.iter().enumerate() {
        let weighted = if w.task(i) == 1.0 { l } else { tape.scale(l, w.task(i) as f32) };
        push(tape, weighted);
    }
    if let Some(tp) = tp {
        if w.omega != 0.0 {
            let weighted = tape.scale(tp, w.omega as f32);
            push(tape, weighted);
        }
    }
    total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)))
}

pub fn combined_loss_value(task_losses: &[f64], tp: f64, w: &LossWeights) -> f64 {
    task_losses.iter().enumerate().map(|(i, l)| w.task(i) * l).sum::<f64>() + w.omega * tp
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub miou: f64,
    pub pixel_accuracy: f64,
}

/// Mean IoU over classes present in the target and pixel accuracy over
/// non-ignored pixels.
pub fn segmentation_metrics(predicted: &[u32], target: &[u32], classes: usize) -> SegmentationMetrics {
    assert_eq!(predicted.len(), target.len(), "label maps differ in length");
    let mut confusion = vec![0u64; classes * classes];
    for (&p, &t) in predicted.iter().zip(target) {
        if t == IGNORE_INDEX || t as usize >= classes {
            continue;
        }
        let p = (p as usize).min(classes.saturating_sub(1));
        confusion[t as usize * classes + p] += 1;
    }
    let total: u64 = confusion.iter().sum();
    let correct: u64 = (0..classes).map(|c| confusion[c * classes + c]).sum();
    let mut ious = Vec::new();
    for c in 0..classes {
        let in_target: u64 = (0..classes).map(|p| confusion[c * classes + p]).sum();
        if in_target == 0 {
            continue;
        }
        let in_pred: u64 = (0..classes).map(|t| confusion[t * classes + c]).sum();
        let inter = confusion[c * classes + c];
        ious.push(inter as f64 / (in_target + in_pred - inter) as f64);
    }
    SegmentationMetrics {
        miou: if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 },
        pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
    }
}

/// Index of the largest score along axis 1 of [N, K] or [N, K, H, W].
pub fn argmax_classes(scores: &Tensor) -> Vec<u32> {
    let shape = scores.shape();
    let (n, k) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let d = scores.data();
    let mut out = Vec::with_capacity(n * s);
    for i in 0..n {
        for p in 0..s {
            let mut best = 0;
            for c in 1..k {
                if d[(i * k + c) * s + p] > d[(i * k + best) * s + p] {
                    best = c;
                }
            }
            out.push(best as u32);
        }
    }
    out
}

/// Fraction of positions where the argmax equals the label.
pub fn accuracy(scores: &Tensor, labels: &[u32]) -> f64 {
    let pred = argmax_classes(scores);
    let valid: Vec<_> = pred.iter().zip(labels).filter(|(_, &l)| l != IGNORE_INDEX).collect();
    if valid.is_empty() {
        return 0.0;
    }
    valid.iter().filter(|(p, l)| p == l).count() as f64 / valid.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ce_oracle(scores: &Tensor, labels: &[u32]) -> f64 {
        let (n, k, h, w) = scores.dims4();
        let (mut total, mut count) = (0.0, 0);
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let l = labels[(i * h + y) * w + x];
                    if l == IGNORE_INDEX {
                        continue;
                    }
                    let at = |c: usize| f64::from(scores.data()[((i * k + c) * h + y) * w + x]);
                    let z: f64 = (0..k).map(|c| at(c).exp()).sum();
                    total += -(at(l as usize).exp() / z).ln();
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    fn seg_loss_value(scores: &Tensor, labels: &[u32]) -> Result<f64> {
        let mut tape = Tape::new();
        let s = tape.constant(scores.clone());
        let l = segmentation_loss(&mut tape, s, labels)?;
        Ok(f64::from(tape.value(l).item()))
    }

    #[test]
    fn segmentation_loss_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores = Tensor::randn([2, 4, 4, 4], 1.0, &mut rng);
        let labels: Vec<u32> = (0..32).map(|_| rng.random_range(0..4)).collect();
        let got = seg_loss_value(&scores, &labels).unwrap();
        assert!((got - ce_oracle(&scores, &labels)).abs() < 1e-6);
    }

    #[test]
    fn uniform_scores_give_ln_classes() {
        let got = seg_loss_value(&Tensor::zeros([1, 13, 2, 2]), &[0, 5, 12, 3]).unwrap();
        assert!((got - 13f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_scores_approach_zero() {
        let mut s = Tensor::zeros([1, 2, 1, 2]);
        s.data_mut().copy_from_slice(&[30.0, -30.0, -30.0, 30.0]);
        assert!(seg_loss_value(&s, &[0, 1]).unwrap() < 1e-12);
    }

    #[test]
    fn out_of_range_label_names_pixel() {
        let err = seg_loss_value(&Tensor::zeros([1, 3, 2, 2]), &[0, 1, 2, 7]).unwrap_err();
        assert!(err.to_string().contains("pixel (1, 1)"), "{err}");
    }

    #[test]
    fn depth_loss_and_metrics() {
        let t = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 0.0, 4.0]);
        let p = Tensor::new([1, 1, 2, 2], vec![1.5, 2.0, 9.0, 3.0]);
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let l = depth_loss(&mut tape, pv, &t).unwrap().unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-7);
        let m = depth_metrics(&p, &t).unwrap().unwrap();
        assert!((m.abs_err - 0.5).abs() < 1e-12);
        assert!((m.rel_err - (0.5 + 0.0 + 0.25) / 3.0).abs() < 1e-12);
        let z = Tensor::zeros([1, 1, 2, 2]);
        let zv = tape.constant(z.clone());
        assert!(depth_loss(&mut tape, zv, &z).unwrap().is_none());
        assert!(depth_metrics(&z, &z).unwrap().is_none());
        assert_eq!(depth_metrics(&t, &t).unwrap().unwrap().abs_err, 0.0);
    }

    #[test]
    fn normal_metrics_identity_and_opposite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = random_normals(&mut rng, 4, 4);
        let same = surface_normal_metrics(&n, &n).unwrap();
        assert!(same.mean_deg < 1e-4 && same.median_deg < 1e-4);
        assert_eq!((same.within_11_25, same.within_22_5, same.within_30), (1.0, 1.0, 1.0));
        let opp = surface_normal_metrics(&n.map(|v| -v), &n).unwrap();
        assert!((opp.mean_deg - 180.0).abs() < 0.05 && (opp.median_deg - 180.0).abs() < 0.05);
        assert_eq!((opp.within_11_25, opp.within_22_5, opp.within_30), (0.0, 0.0, 0.0));
    }

    fn normal_oracle(p: &Tensor, t: &Tensor) -> Vec<f64> {
        let plane = p.shape()[2] * p.shape()[3];
        (0..plane)
            .map(|i| {
                let v = |x: &Tensor| [0, 1, 2].map(|c| f64::from(x.data()[c * plane + i]));
                let (a, b) = (v(p), v(t));
                let dot: f64 = (0..3).map(|c| a[c] * b[c]).sum();
                let la: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let lb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                (dot / (la * lb)).clamp(-1.0, 1.0).acos() * 180.0 / std::f64::consts::PI
            })
            .collect()
    }

    #[test]
    fn normal_metrics_match_arccos_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (p, t) = (random_normals(&mut rng, 4, 4), random_normals(&mut rng, 4, 4));
        let mut angles = normal_oracle(&p, &t);
        let got = surface_normal_metrics(&p, &t).unwrap();
        let mean = angles.iter().sum::<f64>() / 16.0;
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = (angles[7] + angles[8]) / 2.0;
        assert!((got.mean_deg - mean).abs() < 1e-4 && (got.median_deg - median).abs() < 1e-4);
        let frac = |th: f64| angles.iter().filter(|&&a| a < th).count() as f64 / 16.0;
        assert_eq!(got.within_30, frac(30.0));
        assert_eq!(got.within_22_5, frac(22.5));
    }

    #[test]
    fn non_unit_normals_are_rejected() {
        let n = Tensor::full([1, 3, 1, 1], 1.0);
        assert!(matches!(surface_normal_metrics(&n, &n), Err(Error::Data(_))));
    }

    pub(crate) fn random_normals(rng: &mut impl Rng, h: usize, w: usize) -> Tensor {
        let mut t = Tensor::randn([1, 3, h, w], 1.0, rng);
        let plane = h * w;
        for p in 0..plane {
            let len = (0..3).map(|c| t.data()[c * plane + p].powi(2)).sum::<f32>().sqrt();
            for c in 0..3 {
                t.data_mut()[c * plane + p] /= len;
            }
        }
        t
    }

    #[test]
    fn tp_loss_pair_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = SimilarityMeasure::ssim();
        let a = Tensor::randn([1, 2, 12, 12], 1.0, &mut rng);
        assert_eq!(task_privacy_value(&[a.clone()], &m).unwrap(), 0.0);
        assert!((task_privacy_value(&[a.clone(), a.clone()], &m).unwrap() - 2.0).abs() < 1e-6);
        let b = Tensor::randn([1, 2, 12, 12], 1.0, &mut rng);
        let c = Tensor::randn([1, 2, 12, 12], 1.0, &mut rng);
        let pair = |x: &Tensor, y: &Tensor| similarity_value(x, y, &m).unwrap();
        let want = 2.0 * (pair(&a, &b) + pair(&a, &c) + pair(&b, &c));
        let got = task_privacy_value(&[a.clone(), b.clone(), c.clone()], &m).unwrap();
        assert!((got - want).abs() < 1e-6);
        let reordered = task_privacy_value(&[c, a, b], &m).unwrap();
        assert!((got - reordered).abs() < 1e-6);
        let bad = Tensor::zeros([1, 2, 13, 12]);
        let ok = Tensor::zeros([1, 2, 12, 12]);
        assert!(task_privacy_value(&[ok, bad], &m).is_err());
    }

    #[test]
    fn combined_loss_examples() {
        let w = LossWeights::new(0.001);
        assert!((combined_loss_value(&[0.4, 0.6], 2.0, &w) - 1.002).abs() < 1e-12);
        assert_eq!(combined_loss_value(&[0.4, 0.6], 2.0, &LossWeights::new(0.0)), 1.0);
        assert_eq!(combined_loss_value(&[0.0, 0.0], 0.0, &w), 0.0);
        let mut tape = Tape::new();
        let l1 = tape.constant(Tensor::scalar(0.25));
        let l2 = tape.constant(Tensor::scalar(0.75));
        let tp = tape.constant(Tensor::scalar(2.0));
        let total = combined_loss(&mut tape, &[l1, l2], Some(tp), &w);
        assert!((tape.value(total).item() - 1.002).abs() < 1e-6);
        assert!(LossWeights::new(f64::NAN).validate().is_err());
    }

    fn confusion_oracle(p: &[u32], t: &[u32], k: usize) -> (f64, f64) {
        let mut ious = Vec::new();
        for c in 0..k as u32 {
            let tp = p.iter().zip(t).filter(|(&a, &b)| a == c && b == c).count();
            let fp = p.iter().zip(t).filter(|(&a, &b)| a == c && b != c).count();
            let fn_ = p.iter().zip(t).filter(|(&a, &b)| a != c && b == c).count();
            if tp + fn_ > 0 {
                ious.push(tp as f64 / (tp + fp + fn_) as f64);
            }
        }
        let acc = p.iter().zip(t).filter(|(a, b)| a == b).count() as f64 / p.len() as f64;
        (ious.iter().sum::<f64>() / ious.len() as f64, acc)
    }

    #[test]
    fn segmentation_metric_examples() {
        let t = [0, 1, 0, 1];
        assert_eq!(
            segmentation_metrics(&t, &t, 2),
            SegmentationMetrics {
                miou: 1.0,
                pixel_accuracy: 1.0
            }
        );
        let m = segmentation_metrics(&[0, 0, 0, 0], &t, 2);
        assert!((m.pixel_accuracy - 0.5).abs() < 1e-12);
        assert!((m.miou - 0.25).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p: Vec<u32> = (0..64).map(|_| rng.random_range(0..3)).collect();
        let t: Vec<u32> = (0..64).map(|_| rng.random_range(0..3)).collect();
        let m = segmentation_metrics(&p, &t, 3);
        let (miou, acc) = confusion_oracle(&p, &t, 3);
        assert!((m.miou - miou).abs() < 1e-6 && (m.pixel_accuracy - acc).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative_and_combined_is_affine(
            vals in proptest::collection::vec(-5.0f32..5.0, 18),
            omega in 0.0f64..1.0,
        ) {
            let scores = Tensor::new([1, 2, 3, 3], vals[..18].to_vec());
            let labels: Vec<u32> = (0..9).map(|i| (i % 2) as u32).collect();
            let l = seg_loss_value(&scores, &labels).unwrap();
            prop_assert!(l >= 0.0);
            let w = LossWeights::new(omega);
            let at = |tp: f64| combined_loss_value(&[l], tp, &w);
            prop_assert!(((at(2.0) - at(1.0)) - (at(1.0) - at(0.0))).abs() < 1e-9);
        }
    }
}
