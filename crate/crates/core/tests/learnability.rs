//! Learnability baselines for the synthetic datasets: small models trained
//! directly on raw images, with no privacy machinery involved.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metamorph_core::data::{generate_classification_pair, generate_dense_pair, Dataset, SyntheticSceneConfig};
use metamorph_core::nn::{AdamW, AdamWConfig, Bound, Conv2d, Linear, ParamStore};
use metamorph_core::objectives::{accuracy, argmax_classes, cross_entropy_loss, segmentation_metrics};
use metamorph_core::tensor::{Tape, Tensor, Var};

/// conv 3×3 s2 → ReLU → conv 3×3 s2 → ReLU → linear over the flattened map.
struct SmallClassifier {
    c1: Conv2d,
    c2: Conv2d,
    fc: Linear,
}

impl SmallClassifier {
    fn new(params: &mut ParamStore, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            c1: Conv2d::new(params, "c1", 3, 16, 3, 2, true, rng),
            c2: Conv2d::new(params, "c2", 16, 32, 3, 2, true, rng),
            fc: Linear::new(params, "fc", 32 * 8 * 8, classes, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = self.c1.forward(tape, p, x);
        let h = tape.relu(h);
        let h = self.c2.forward(tape, p, h);
        let h = tape.relu(h);
        let n = tape.shape(h)[0];
        let h = tape.reshape(h, &[n, 32 * 8 * 8]);
        self.fc.forward(tape, p, h)
    }
}

/// Two stride-2 encoder convs, ×4 upsampling, a skip from the full-resolution
/// conv, one decoder conv and 1×1 class scores.
struct SmallSegmenter {
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    dec: Conv2d,
    out: Conv2d,
}

impl SmallSegmenter {
    fn new(params: &mut ParamStore, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            enc1: Conv2d::new(params, "enc1", 3, 16, 3, 1, true, rng),
            enc2: Conv2d::new(params, "enc2", 16, 32, 3, 2, true, rng),
            enc3: Conv2d::new(params, "enc3", 32, 32, 3, 2, true, rng),
            dec: Conv2d::new(params, "dec", 48, 16, 3, 1, true, rng),
            out: Conv2d::new(params, "out", 16, classes, 1, 1, true, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let e1 = self.enc1.forward(tape, p, x);
        let e1 = tape.relu(e1);
        let h = self.enc2.forward(tape, p, e1);
        let h = tape.relu(h);
        let h = self.enc3.forward(tape, p, h);
        let h = tape.relu(h);
        let h = tape.upsample_nearest(h, 4);
        let h = tape.concat_channels(&[h, e1]);
        let h = self.dec.forward(tape, p, h);
        let h = tape.relu(h);
        self.out.forward(tape, p, h)
    }
}

/// Mini-batch AdamW training of `forward` against per-position labels.
fn fit(
    params: &mut ParamStore,
    forward: impl Fn(&mut Tape, &Bound, Var) -> Var,
    data: &Dataset,
    task: usize,
    epochs: usize,
    lr: f64,
) {
    let mut opt = AdamW::new(AdamWConfig::with_lr(lr), params);
    let mut order = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..epochs {
        for indices in data.epoch_batches(32, &mut order) {
            let batch = data.batch(&indices);
            let labels = label_vec(&batch.labels[task]);
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, true);
            let x = tape.constant(batch.images.clone());
            let scores = forward(&mut tape, &p, x);
            let loss = cross_entropy_loss(&mut tape, scores, &labels).unwrap();
            let grads = tape.backward(loss);
            let g = params.grads(&p, &grads);
            opt.step(params, &g);
        }
    }
}

fn label_vec(l: &metamorph_core::data::Labels) -> Vec<u32> {
    l.as_class().or_else(|| l.as_indices()).expect("class or index labels").to_vec()
}

fn predict(params: &ParamStore, forward: impl Fn(&mut Tape, &Bound, Var) -> Var, images: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let y = forward(&mut tape, &p, x);
    tape.value(y).clone()
}

#[test]
fn each_classification_task_is_learnable_in_five_epochs() {
    let (train, test) = generate_classification_pair(&SyntheticSceneConfig {
        num_samples: 4500,
        seed: 7,
        ..Default::default()
    })
    .unwrap()
    .split(4000);
    for (task, (name, _)) in train.tasks.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamStore::new();
        let net = SmallClassifier::new(&mut params, 2, &mut rng);
        let forward = |t: &mut Tape, p: &Bound, x: Var| net.forward(t, p, x);
        fit(&mut params, forward, &train, task, 5, 3e-3);
        let scores = predict(&params, forward, &test.images);
        let acc = accuracy(&scores, &label_vec(&test.tasks[task].1));
        assert!(acc >= 0.95, "task {name}: test accuracy {acc:.3} after 5 epochs");
    }
}

#[test]
fn segmentation_is_learnable_in_ten_epochs() {
    let cfg = SyntheticSceneConfig {
        num_samples: 2200,
        seed: 8,
        ..Default::default()
    };
    let classes = cfg.shape_classes + 1;
    let (train, test) = generate_dense_pair(&cfg).unwrap().split(2000);
    let task = train.task_index("segmentation").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ParamStore::new();
    let net = SmallSegmenter::new(&mut params, classes, &mut rng);
    let forward = |t: &mut Tape, p: &Bound, x: Var| net.forward(t, p, x);
    fit(&mut params, forward, &train, task, 10, 3e-3);
    let pred = argmax_classes(&predict(&params, forward, &test.images));
    let m = segmentation_metrics(&pred, &label_vec(&test.tasks[task].1), classes);
    assert!(m.miou >= 0.7, "mIoU {:.3} (pixel accuracy {:.3}) after 10 epochs", m.miou, m.pixel_accuracy);
}
