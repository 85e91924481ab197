//! Consumer-side task heads: the remaining backbone blocks followed by a
//! task-specific output layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{consumer_layers, BackboneSpec, BlockStack};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Linear, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskKind {
    Classification { classes: usize },
    Segmentation { classes: usize },
    /// Single-channel dense regression such as depth.
    DenseRegression,
}

impl TaskKind {
    pub fn is_dense(self) -> bool {
        !matches!(self, TaskKind::Classification { .. })
    }

    pub fn outputs(self) -> usize {
        match self {
            TaskKind::Classification { classes } | TaskKind::Segmentation { classes } => classes,
            TaskKind::DenseRegression => 1,
        }
    }
}

#[derive(Clone, Debug)]
enum Output {
    Pooled(Linear),
    Dense { upsample: usize, hidden: Conv2d, out: Conv2d },
}

#[derive(Clone, Debug)]
pub struct Head {
    pub kind: TaskKind,
    layers: BlockStack,
    output: Output,
    pub params: ParamStore,
    input_shape: [usize; 3],
}

const DENSE_HIDDEN: usize = 16;

impl Head {
    pub fn new<R: Rng + ?Sized>(spec: &BackboneSpec, kind: TaskKind, rng: &mut R) -> Result<Self> {
        if kind.outputs() == 0 {
            return Err(Error::Config("a task head needs at least one class".into()));
        }
        let mut params = ParamStore::new();
        let (layers, [c, h, w]) = consumer_layers(spec, &mut params, rng)?;
        let output = match kind {
            TaskKind::Classification { classes } => Output::Pooled(Linear::new(&mut params, "fc", c, classes, rng)),
            _ => {
                let [_, ih, iw] = spec.input_shape;
                if ih % h != 0 || iw % w != 0 || ih / h != iw / w {
                    return Err(Error::Config(format!(
                        "dense head cannot upsample {h}×{w} to the input size {ih}×{iw}"
                    )));
                }
                Output::Dense {
                    upsample: ih / h,
                    hidden: Conv2d::new(&mut params, "dense.hidden", c, DENSE_HIDDEN, 3, 1, true, rng),
                    out: Conv2d::new(&mut params, "dense.out", DENSE_HIDDEN, kind.outputs(), 1, 1, true, rng),
                }
            }
        };
        Ok(Self {
            kind,
            layers,
            output,
            params,
            input_shape: spec.feature_shape()?,
        })
    }

    /// Expected feature shape (C, H, W) per sample.
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    /// Class scores [N, K] for classification, [N, K, H, W] for segmentation,
    /// [N, 1, H, W] for dense regression.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = self.layers.forward(tape, p, x);
        match &self.output {
            Output::Pooled(fc) => {
                let pooled = tape.global_avg_pool(y);
                fc.forward(tape, p, pooled)
            }
            Output::Dense { upsample, hidden, out } => {
                let up = if *upsample > 1 {
                    tape.upsample_nearest(y, *upsample)
                } else {
                    y
                };
                let hid = hidden.forward(tape, p, up);
                let hid = tape.relu(hid);
                out.forward(tape, p, hid)
            }
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, x);
        tape.value(y).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shapes_per_kind() {
        let spec = BackboneSpec::desk_default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feat = spec.feature_shape().unwrap();
        let x = Tensor::randn([2, feat[0], feat[1], feat[2]], 1.0, &mut rng);
        let cases = [
            (TaskKind::Classification { classes: 4 }, vec![2, 4]),
            (TaskKind::Segmentation { classes: 3 }, vec![2, 3, 32, 32]),
            (TaskKind::DenseRegression, vec![2, 1, 32, 32]),
        ];
        for (kind, want) in cases {
            let head = Head::new(&spec, kind, &mut rng).unwrap();
            assert_eq!(head.infer(&x).shape(), want.as_slice());
        }
    }

    #[test]
    fn task_kind_parses_from_tagged_toml() {
        let k: TaskKind = toml::from_str("kind = \"segmentation\"\nclasses = 4").unwrap();
        assert_eq!(k, TaskKind::Segmentation { classes: 4 });
        let k: TaskKind = toml::from_str("kind = \"dense-regression\"").unwrap();
        assert_eq!(k, TaskKind::DenseRegression);
    }
}
