use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, GroupNorm, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// 3×3 convolution, group norm, rectifier.
    Conv,
    /// 1×1 convolution, group norm, rectifier.
    Pointwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockDescriptor {
    pub kind: BlockKind,
    pub channels: usize,
    pub stride: usize,
}

impl BlockDescriptor {
    pub fn conv(channels: usize, stride: usize) -> Self {
        Self {
            kind: BlockKind::Conv,
            channels,
            stride,
        }
    }

    fn kernel(&self) -> usize {
        match self.kind {
            BlockKind::Conv => 3,
            BlockKind::Pointwise => 1,
        }
    }
}

/// A small convolutional backbone and the block boundary where it is split
/// between producer and consumer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub blocks: Vec<BlockDescriptor>,
    pub split_index: usize,
    /// (channels, height, width)
    pub input_shape: [usize; 3],
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.blocks.len();
        if n < 2 || self.split_index == 0 || self.split_index >= n {
            return Err(Error::Config(format!(
                "backbone.split_index = {} is invalid: must satisfy 0 < split_index < {n} (valid range 1..={})",
                self.split_index,
                n.saturating_sub(1)
            )));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "backbone.input_shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.stride == 0 {
                return Err(Error::Config(format!(
                    "backbone.blocks[{i}] needs positive channels and stride"
                )));
            }
        }
        self.block_shapes()?;
        Ok(())
    }

    /// Output shape after every block.
    pub fn block_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let [_, mut h, mut w] = self.input_shape;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let k = b.kernel();
            let pad = k / 2;
            if h + 2 * pad < k || w + 2 * pad < k {
                return Err(Error::Config(format!("backbone.blocks[{i}] input is smaller than its kernel")));
            }
            h = (h + 2 * pad - k) / b.stride + 1;
            w = (w + 2 * pad - k) / b.stride + 1;
            out.push([b.channels, h, w]);
        }
        Ok(out)
    }

    /// Shape of the features crossing the split.
    pub fn feature_shape(&self) -> Result<[usize; 3]> {
        self.validate()?;
        Ok(self.block_shapes()?[self.split_index - 1])
    }

    pub fn producer_blocks(&self) -> &[BlockDescriptor] {
        &self.blocks[..self.split_index]
    }

    pub fn consumer_blocks(&self) -> &[BlockDescriptor] {
        &self.blocks[self.split_index..]
    }

    /// Four blocks on 3×32×32 input, split after the second.
    pub fn desk_default() -> Self {
        Self {
            blocks: vec![
                BlockDescriptor::conv(16, 1),
                BlockDescriptor::conv(32, 2),
                BlockDescriptor::conv(32, 2),
                BlockDescriptor::conv(64, 2),
            ],
            split_index: 2,
            input_shape: [3, 32, 32],
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

/// Block list whose parameters live in an external [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BlockStack {
    blocks: Vec<ConvBlock>,
    descriptors: Vec<BlockDescriptor>,
    first_index: usize,
}

impl BlockStack {
    /// `first_index` is the global position of the first block, used in
    /// parameter names so that split halves keep their original names.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        descriptors: &[BlockDescriptor],
        first_index: usize,
        rng: &mut R,
    ) -> Self {
        let mut c = in_channels;
        let blocks = descriptors
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let name = format!("{prefix}block{}", first_index + i);
                let conv = Conv2d::new(store, &format!("{name}.conv"), c, d.channels, d.kernel(), d.stride, false, rng);
                let norm = GroupNorm::new(store, &format!("{name}.norm"), d.channels);
                c = d.channels;
                ConvBlock { conv, norm }
            })
            .collect();
        Self {
            blocks,
            descriptors: descriptors.to_vec(),
            first_index,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Var {
        for b in &self.blocks {
            let y = b.conv.forward(tape, p, x);
            let y = b.norm.forward(tape, p, y);
            x = tape.relu(y);
        }
        x
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    fn transfer(&self, range: std::ops::Range<usize>, from: &ParamStore, to: &mut ParamStore) -> BlockStack {
        BlockStack {
            blocks: self.blocks[range.clone()]
                .iter()
                .map(|b| ConvBlock {
                    conv: b.conv.transfer(from, to),
                    norm: b.norm.transfer(from, to),
                })
                .collect(),
            descriptors: self.descriptors[range.clone()].to_vec(),
            first_index: self.first_index + range.start,
        }
    }
}

/// A contiguous run of backbone blocks with its own parameters: the producer
/// half, the consumer half, or the whole unsplit backbone.
#[derive(Clone, Debug)]
pub struct Stage {
    layers: BlockStack,
    pub params: ParamStore,
    input_shape: [usize; 3],
    output_shape: [usize; 3],
}

impl Stage {
    pub fn new<R: Rng + ?Sized>(input_shape: [usize; 3], descriptors: &[BlockDescriptor], rng: &mut R) -> Result<Self> {
        Self::with_offset(input_shape, descriptors, 0, rng)
    }

    fn with_offset<R: Rng + ?Sized>(
        input_shape: [usize; 3],
        descriptors: &[BlockDescriptor],
        first_index: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if descriptors.is_empty() {
            return Err(Error::Config("a stage needs at least one block".into()));
        }
        let shapes = BackboneSpec {
            blocks: descriptors.to_vec(),
            split_index: 0,
            input_shape,
        }
        .block_shapes()?;
        let mut params = ParamStore::new();
        let layers = BlockStack::new(&mut params, "", input_shape[0], descriptors, first_index, rng);
        Ok(Self {
            layers,
            params,
            input_shape,
            output_shape: *shapes.last().expect("non-empty"),
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        self.layers.forward(tape, p, x)
    }

    /// Gradient-free forward pass.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, x);
        tape.value(y).clone()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.output_shape
    }

    pub fn num_blocks(&self) -> usize {
        self.layers.len()
    }

    pub fn descriptors(&self) -> &[BlockDescriptor] {
        &self.layers.descriptors
    }

    /// Splits at a block boundary into two stages holding copies of the
    /// corresponding parameters.
    pub fn split_at(&self, index: usize) -> Result<(Stage, Stage)> {
        let n = self.num_blocks();
        if index == 0 || index >= n {
            return Err(Error::Config(format!(
                "split index {index} outside valid range 1..={}",
                n.saturating_sub(1)
            )));
        }
        let shapes = BackboneSpec {
            blocks: self.layers.descriptors.clone(),
            split_index: 0,
            input_shape: self.input_shape,
        }
        .block_shapes()?;
        let mut front_params = ParamStore::new();
        let front_layers = self.layers.transfer(0..index, &self.params, &mut front_params);
        let mut back_params = ParamStore::new();
        let back_layers = self.layers.transfer(index..n, &self.params, &mut back_params);
        let mid = shapes[index - 1];
        Ok((
            Stage {
                layers: front_layers,
                params: front_params,
                input_shape: self.input_shape,
                output_shape: mid,
            },
            Stage {
                layers: back_layers,
                params: back_params,
                input_shape: mid,
                output_shape: self.output_shape,
            },
        ))
    }
}

/// The whole backbone as one stage.
pub fn build_backbone<R: Rng + ?Sized>(spec: &BackboneSpec, rng: &mut R) -> Result<Stage> {
    spec.validate()?;
    Stage::new(spec.input_shape, &spec.blocks, rng)
}

/// Producer half (blocks before the split) and consumer half (the rest).
pub fn build_split_backbone<R: Rng + ?Sized>(spec: &BackboneSpec, rng: &mut R) -> Result<(Stage, Stage)> {
    build_backbone(spec, rng)?.split_at(spec.split_index)
}

/// Producer-side stage only, for encoders whose consumer halves are built per task.
pub fn build_encoder<R: Rng + ?Sized>(spec: &BackboneSpec, rng: &mut R) -> Result<Stage> {
    spec.validate()?;
    Stage::new(spec.input_shape, spec.producer_blocks(), rng)
}

/// Fresh consumer half, with block numbering continuing after the split.
pub fn build_consumer_stage<R: Rng + ?Sized>(spec: &BackboneSpec, rng: &mut R) -> Result<Stage> {
    let feature = spec.feature_shape()?;
    Stage::with_offset(feature, spec.consumer_blocks(), spec.split_index, rng)
}

pub(crate) fn consumer_layers<R: Rng + ?Sized>(
    spec: &BackboneSpec,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<(BlockStack, [usize; 3])> {
    let feature = spec.feature_shape()?;
    let layers = BlockStack::new(store, "", feature[0], spec.consumer_blocks(), spec.split_index, rng);
    let out = *spec.block_shapes()?.last().expect("validated");
    Ok((layers, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn invalid_split_reports_range() {
        let mut spec = BackboneSpec::desk_default();
        for bad in [0, 4, 9] {
            spec.split_index = bad;
            let err = spec.validate().unwrap_err().to_string();
            assert!(err.contains("1..=3"), "{err}");
        }
    }

    #[test]
    fn last_split_leaves_one_consumer_block() {
        let mut spec = BackboneSpec::desk_default();
        spec.split_index = spec.blocks.len() - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (producer, consumer) = build_split_backbone(&spec, &mut rng).unwrap();
        assert_eq!(consumer.num_blocks(), 1);
        assert_eq!(producer.num_blocks(), 3);
        assert_eq!(producer.output_shape(), consumer.input_shape());
    }

    #[test]
    fn split_halves_compose_to_the_unsplit_forward_exactly() {
        let spec = BackboneSpec::desk_default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let full = build_backbone(&spec, &mut rng).unwrap();
        let x = Tensor::randn([2, 3, 32, 32], 1.0, &mut rng);
        let whole = full.infer(&x);
        for split in 1..spec.blocks.len() {
            let (a, b) = full.split_at(split).unwrap();
            assert_eq!(a.params.num_scalars() + b.params.num_scalars(), full.params.num_scalars());
            let composed = b.infer(&a.infer(&x));
            assert_eq!(composed, whole, "split {split}");
        }
    }

    #[test]
    fn deeper_splits_give_smaller_features_and_larger_producers() {
        let base = BackboneSpec::desk_default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rows = Vec::new();
        for split in 1..base.blocks.len() {
            let spec = BackboneSpec {
                split_index: split,
                ..base.clone()
            };
            let (p, _) = build_split_backbone(&spec, &mut rng).unwrap();
            let [c, h, w] = p.output_shape();
            rows.push((p.params.num_scalars(), c * h * w * 4));
        }
        for pair in rows.windows(2) {
            assert!(pair[0].0 < pair[1].0, "producer sizes increase");
            assert!(pair[0].1 > pair[1].1, "feature payloads decrease");
        }
    }
}
