//! Threat-model evaluation: module interchange, decoder-based input
//! reconstruction and feature-embedding export.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::build_decoder;
use crate::nn::{AdamW, AdamWConfig};
use crate::objectives::{similarity, similarity_per_sample, SimilarityMeasure};
use crate::tensor::{Tape, Tensor};
use crate::trainer::{evaluate_task, MultiTaskModel, TaskMetric};

/// Metric of head `j` on the features of module `i`, for every ordered pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterchangeReport {
    pub tasks: Vec<String>,
    /// `cells[i][j]`: module of task i feeding the head of task j.
    pub cells: Vec<Vec<TaskMetric>>,
}

impl InterchangeReport {
    pub fn cell(&self, module: usize, head: usize) -> &TaskMetric {
        &self.cells[module][head]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.tasks.len()).map(|i| self.cells[i][i].value()).collect()
    }

    /// Largest off-diagonal value in column `head` (the best an interchange
    /// attacker achieves on that task).
    pub fn best_interchanged(&self, head: usize) -> Option<f64> {
        (0..self.tasks.len())
            .filter(|&i| i != head)
            .map(|i| self.cells[i][head].value())
            .reduce(f64::max)
    }

    /// Smallest gap between a column's diagonal and any off-diagonal cell of
    /// the same column, over columns whose metric improves upward.
    pub fn min_diagonal_gap(&self) -> Option<f64> {
        (0..self.tasks.len())
            .filter(|&j| self.cells[j][j].higher_is_better())
            .filter_map(|j| self.best_interchanged(j).map(|o| self.cells[j][j].value() - o))
            .reduce(f64::min)
    }

    /// One `key=value` record per cell followed by the rendered matrix.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, module) in self.tasks.iter().enumerate() {
            for (j, head) in self.tasks.iter().enumerate() {
                let c = &self.cells[i][j];
                let _ = writeln!(
                    s,
                    "module={module} head={head} metric={} value={:.6} matched={}",
                    c.name(),
                    c.value(),
                    i == j
                );
            }
        }
        s.push('\n');
        let width = self.tasks.iter().map(String::len).max().unwrap_or(0).max(12);
        let _ = write!(s, "{:width$}", "module \\ head");
        for t in &self.tasks {
            let _ = write!(s, " | {t:>width$}");
        }
        s.push('\n');
        let _ = writeln!(s, "{}", "-".repeat((width + 3) * (self.tasks.len() + 1)));
        for (i, module) in self.tasks.iter().enumerate() {
            let _ = write!(s, "{module:width$}");
            for j in 0..self.tasks.len() {
                let c = &self.cells[i][j];
                let v = if c.higher_is_better() {
                    format!("{:.2}", 100.0 * c.value())
                } else {
                    format!("{:.4}", c.value())
                };
                let _ = write!(s, " | {v:>width$}");
            }
            s.push('\n');
        }
        s
    }
}

/// Runs head_j ∘ g_i ∘ encoder over `data` for every ordered pair (i, j).
pub fn evaluate_interchange(model: &MultiTaskModel, data: &Dataset, batch_size: usize) -> Result<InterchangeReport> {
    let n = model.tasks.len();
    let mut cells = Vec::with_capacity(n);
    for i in 0..n {
        let row = (0..n)
            .map(|j| evaluate_task(model, i, j, data, batch_size))
            .collect::<Result<Vec<_>>>()?;
        cells.push(row);
    }
    Ok(InterchangeReport {
        tasks: model.task_ids(),
        cells,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EncoderPrivacy {
    Private,
    NonPrivate,
}

/// Training budget of the attacker's decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "default_attack_epochs")]
    pub epochs: usize,
    #[serde(default = "default_attack_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_attack_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "SimilarityMeasure::ssim")]
    pub similarity: SimilarityMeasure,
}

fn default_attack_epochs() -> usize {
    20
}
fn default_attack_lr() -> f64 {
    1e-3
}
fn default_attack_batch() -> usize {
    32
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epochs: default_attack_epochs(),
            learning_rate: default_attack_lr(),
            batch_size: default_attack_batch(),
            seed: 0,
            similarity: SimilarityMeasure::ssim(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub attack_epochs: usize,
    pub encoder_privacy: EncoderPrivacy,
    /// SSIM(reconstruction, original) per held-out image.
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Mean training loss L1 + (1 − SSIM) per attack epoch.
    pub loss_history: Vec<f64>,
}

impl ReconstructionReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "attack_epochs={} encoder_privacy={:?} images={} mean_ssim={:.6}\n",
            self.attack_epochs,
            self.encoder_privacy,
            self.scores.len(),
            self.mean
        );
        for (i, v) in self.scores.iter().enumerate() {
            let _ = writeln!(s, "image={i} ssim={v:.6}");
        }
        s
    }
}

/// Trains a decoder on (features(x), x) pairs from `train` and scores its
/// reconstructions of `test`. Images must lie in [0, 1].
pub fn reconstruction_attack<F>(
    features: F,
    train: &Tensor,
    test: &Tensor,
    privacy: EncoderPrivacy,
    cfg: &AttackConfig,
) -> Result<ReconstructionReport>
where
    F: Fn(&Tensor) -> Tensor,
{
    reconstruct_images(features, train, test, privacy, cfg).map(|(report, _)| report)
}

/// As [`reconstruction_attack`], also returning the decoder's
/// reconstructions of `test`.
pub fn reconstruct_images<F>(
    features: F,
    train: &Tensor,
    test: &Tensor,
    privacy: EncoderPrivacy,
    cfg: &AttackConfig,
) -> Result<(ReconstructionReport, Tensor)>
where
    F: Fn(&Tensor) -> Tensor,
{
    cfg.similarity.validate()?;
    if train.shape()[0] == 0 || test.shape()[0] == 0 {
        return Err(Error::Data("reconstruction attack needs non-empty train and test images".into()));
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 {
        return Err(Error::Config("attack learning_rate and batch_size must be positive".into()));
    }
    let image_shape = [train.shape()[1], train.shape()[2], train.shape()[3]];
    let encode_all = |images: &Tensor| -> Tensor {
        let n = images.shape()[0];
        let parts: Vec<Tensor> = (0..n)
            .collect::<Vec<_>>()
            .chunks(64)
            .map(|c| {
                features(&Tensor::cat_batch(&c.iter().map(|&i| images.sample(i)).collect::<Vec<_>>()))
            })
            .collect();
        Tensor::cat_batch(&parts)
    };
    let train_z = encode_all(train);
    let test_z = encode_all(test);
    let zs = train_z.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut decoder = build_decoder([zs[1], zs[2], zs[3]], image_shape, &mut rng)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::with_lr(cfg.learning_rate)
        },
        &decoder.params,
    );
    let n = train.shape()[0];
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let z = Tensor::cat_batch(&chunk.iter().map(|&i| train_z.sample(i)).collect::<Vec<_>>());
            let x = Tensor::cat_batch(&chunk.iter().map(|&i| train.sample(i)).collect::<Vec<_>>());
            let mut tape = Tape::new();
            let p = decoder.params.bind(&mut tape, true);
            let zv = tape.constant(z);
            let xv = tape.constant(x);
            let recon = decoder.forward(&mut tape, &p, zv);
            let diff = tape.sub(recon, xv);
            let abs = tape.abs(diff);
            let l1 = tape.mean(abs);
            let s = similarity(&mut tape, recon, xv, &cfg.similarity)?;
            let dissim = tape.scale(s, -1.0);
            let dissim = tape.add_scalar(dissim, 1.0);
            let loss = tape.add(l1, dissim);
            let value = f64::from(tape.value(loss).item());
            if !value.is_finite() {
                return Err(Error::Numeric(format!("reconstruction loss became {value}")));
            }
            sum += value * chunk.len() as f64;
            count += chunk.len();
            let grads = tape.backward(loss);
            let g = decoder.params.grads(&p, &grads);
            opt.step(&mut decoder.params, &g);
        }
        loss_history.push(sum / count as f64);
    }
    let recon = {
        let m = test.shape()[0];
        let parts: Vec<Tensor> = (0..m)
            .collect::<Vec<_>>()
            .chunks(64)
            .map(|c| decoder.infer(&Tensor::cat_batch(&c.iter().map(|&i| test_z.sample(i)).collect::<Vec<_>>())))
            .collect();
        Tensor::cat_batch(&parts)
    };
    let scores = similarity_per_sample(&recon, test, &cfg.similarity)?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let report = ReconstructionReport {
        attack_epochs: cfg.epochs,
        encoder_privacy: privacy,
        scores,
        mean,
        loss_history,
    };
    Ok((report, recon))
}

/// Per-task shared feature vectors of every image: `[tasks][images][features]`.
pub fn task_embeddings(model: &MultiTaskModel, images: &Tensor) -> Vec<Vec<Vec<f32>>> {
    let z = model.encode(images);
    let n = images.shape()[0];
    model
        .tasks
        .iter()
        .map(|t| {
            let f = t.metamorph.infer(&z);
            let per = f.numel() / n.max(1);
            f.data().chunks(per.max(1)).map(<[f32]>::to_vec).collect()
        })
        .collect()
}

/// Mean over images and task pairs of the cosine similarity between the
/// feature vectors two tasks produce for the same image.
pub fn mean_cross_task_cosine(model: &MultiTaskModel, images: &Tensor) -> f64 {
    let e = task_embeddings(model, images);
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..e.len() {
        for j in (i + 1)..e.len() {
            for (a, b) in e[i].iter().zip(&e[j]) {
                sum += cosine(a, b);
                count += 1;
            }
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Writes one CSV row `sample_id,task_id,v0,v1,...` per (image, task).
/// Returns the number of rows.
pub fn export_embeddings(model: &MultiTaskModel, images: &Tensor, sample_ids: &[String], path: &Path) -> Result<usize> {
    let n = images.shape()[0];
    if sample_ids.len() != n {
        return Err(Error::Config(format!(
            "{} sample ids given for {n} images",
            sample_ids.len()
        )));
    }
    let e = task_embeddings(model, images);
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let dim = e.first().and_then(|t| t.first()).map_or(0, Vec::len);
    let mut header = String::from("sample_id,task_id");
    for k in 0..dim {
        let _ = write!(header, ",v{k}");
    }
    let mut rows = 0;
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for (s, id) in sample_ids.iter().enumerate() {
        for (t, task) in model.tasks.iter().enumerate() {
            let mut line = format!("{id},{}", task.spec.task_id);
            for v in &e[t][s] {
                let _ = write!(line, ",{v}");
            }
            writeln!(w, "{line}").map_err(io)?;
            rows += 1;
        }
    }
    w.flush().map_err(io)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_classification_pair, SyntheticSceneConfig};
    use crate::model::{BackboneSpec, MetamorphConfig, TaskKind};
    use crate::trainer::TaskSpec;

    fn data(n: usize) -> Dataset {
        generate_classification_pair(&SyntheticSceneConfig {
            num_samples: n,
            seed: 21,
            ..Default::default()
        })
        .unwrap()
    }

    fn model(tasks: &[&str], seed: u64) -> MultiTaskModel {
        let specs: Vec<TaskSpec> = tasks
            .iter()
            .map(|t| TaskSpec::new(*t, TaskKind::Classification { classes: 2 }))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultiTaskModel::new(BackboneSpec::desk_default(), MetamorphConfig::default(), &specs, &mut rng).unwrap()
    }

    #[test]
    fn single_task_report_is_standard_evaluation() {
        let d = data(24);
        let m = model(&["shape"], 1);
        let r = evaluate_interchange(&m, &d, 8).unwrap();
        assert_eq!(r.cells.len(), 1);
        assert_eq!(r.cells[0][0], evaluate_task(&m, 0, 0, &d, 8).unwrap());
        assert_eq!(r.best_interchanged(0), None);
    }

    #[test]
    fn report_is_complete_and_diagonal_matches_matched_inference() {
        let d = data(24);
        let m = model(&["shape", "color"], 2);
        let r = evaluate_interchange(&m, &d, 5).unwrap();
        assert_eq!(r.cells.iter().map(Vec::len).sum::<usize>(), 4);
        for i in 0..2 {
            assert_eq!(r.cells[i][i], evaluate_task(&m, i, i, &d, 7).unwrap());
        }
        let text = r.to_text();
        assert_eq!(text.lines().filter(|l| l.starts_with("module=")).count(), 4);
        assert!(text.contains("module=shape head=color metric=accuracy"));
    }

    #[test]
    fn untrained_models_sit_near_chance() {
        let d = data(200);
        let m = model(&["shape", "color"], 3);
        let r = evaluate_interchange(&m, &d, 50).unwrap();
        for row in &r.cells {
            for c in row {
                assert!((c.value() - 0.5).abs() <= 0.2, "{}", r.to_text());
            }
        }
    }

    #[test]
    fn untrained_decoder_scores_near_zero() {
        let d = data(16);
        let m = model(&["shape"], 4);
        let cfg = AttackConfig {
            epochs: 0,
            ..Default::default()
        };
        let r = reconstruction_attack(|x| m.features(0, x), &d.images, &d.images, EncoderPrivacy::NonPrivate, &cfg)
            .unwrap();
        assert_eq!(r.scores.len(), 16);
        assert!(r.mean.abs() < 0.2, "mean {}", r.mean);
        assert!(r.scores.iter().all(|s| (-1.0..=1.0).contains(s)));
    }

    #[test]
    fn decoder_learns_the_identity_encoder() {
        let d = data(96);
        let (train, test) = d.split(64);
        let cfg = AttackConfig {
            epochs: 20,
            batch_size: 16,
            ..Default::default()
        };
        let r = reconstruction_attack(Tensor::clone, &train.images, &test.images, EncoderPrivacy::NonPrivate, &cfg)
            .unwrap();
        assert!(r.mean > 0.8, "mean {}", r.mean);
        assert!(r.loss_history.first() > r.loss_history.last());
    }

    #[test]
    fn export_writes_one_row_per_sample_and_task() {
        let d = data(5);
        let m = model(&["a", "b", "c"], 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let ids: Vec<String> = (0..5).map(|i| format!("s{i}")).collect();
        assert_eq!(export_embeddings(&m, &d.images, &ids, &path).unwrap(), 15);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 16);
        let err = export_embeddings(&m, &d.images, &ids, &dir.path().join("no/such/dir.csv")).unwrap_err();
        assert!(err.to_string().contains("no/such/dir.csv"), "{err}");
    }

    #[test]
    fn identical_modules_give_identical_task_vectors() {
        let d = data(4);
        let mut m = model(&["a", "b"], 6);
        m.tasks[1].metamorph = m.tasks[0].metamorph.clone();
        let e = task_embeddings(&m, &d.images);
        assert_eq!(e[0], e[1]);
        assert!((mean_cross_task_cosine(&m, &d.images) - 1.0).abs() < 1e-9);
    }
}
