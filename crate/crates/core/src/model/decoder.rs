//! Upsampling decoder used by the reconstruction attacker.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, GroupNorm, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
struct UpStage {
    conv: Conv2d,
    norm: GroupNorm,
    factor: usize,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    stages: Vec<UpStage>,
    out: Conv2d,
    pub params: ParamStore,
    feature_shape: [usize; 3],
    output_shape: [usize; 3],
}

const MIN_WIDTH: usize = 16;

/// Maps features of shape (C, h, w) back to images of shape (c, H, W) in [0, 1].
pub fn build_decoder<R: Rng + ?Sized>(
    feature_shape: [usize; 3],
    output_shape: [usize; 3],
    rng: &mut R,
) -> Result<Decoder> {
    let [fc, fh, fw] = feature_shape;
    let [oc, oh, ow] = output_shape;
    if feature_shape.contains(&0) || output_shape.contains(&0) {
        return Err(Error::Config("decoder shapes must be non-empty".into()));
    }
    if fh > oh || fw > ow {
        return Err(Error::Config(format!(
            "decoder feature spatial size {fh}×{fw} exceeds the output size {oh}×{ow}"
        )));
    }
    if oh % fh != 0 || ow % fw != 0 || oh / fh != ow / fw {
        return Err(Error::Config(format!(
            "decoder needs one integer upsampling factor from {fh}×{fw} to {oh}×{ow}"
        )));
    }
    let mut factors = Vec::new();
    let mut rest = oh / fh;
    while rest % 2 == 0 {
        factors.push(2);
        rest /= 2;
    }
    if rest > 1 {
        factors.push(rest);
    }
    if factors.is_empty() {
        factors.push(1);
    }

    let mut params = ParamStore::new();
    let mut width = fc.max(MIN_WIDTH);
    let mut c_in = fc;
    let stages = factors
        .into_iter()
        .enumerate()
        .map(|(i, factor)| {
            if factor > 1 {
                width = (width / 2).max(MIN_WIDTH);
            }
            let name = format!("stage{i}");
            let conv = Conv2d::new(&mut params, &format!("{name}.conv"), c_in, width, 3, 1, false, rng);
            let norm = GroupNorm::new(&mut params, &format!("{name}.norm"), width);
            c_in = width;
            UpStage { conv, norm, factor }
        })
        .collect();
    let out = Conv2d::new(&mut params, "out", c_in, oc, 3, 1, true, rng);
    Ok(Decoder {
        stages,
        out,
        params,
        feature_shape,
        output_shape,
    })
}

impl Decoder {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Var {
        for s in &self.stages {
            let y = s.conv.forward(tape, p, x);
            let y = s.norm.forward(tape, p, y);
            let y = tape.relu(y);
            x = if s.factor > 1 { tape.upsample_nearest(y, s.factor) } else { y };
        }
        let y = self.out.forward(tape, p, x);
        tape.sigmoid(y)
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, x);
        tape.value(y).clone()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Number of upsampling stages; zero when feature and output sizes agree.
    pub fn upsampling_stages(&self) -> usize {
        self.stages.iter().filter(|s| s.factor > 1).count()
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        self.feature_shape
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.output_shape
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn maps_128x8x8_to_3x64x64() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = build_decoder([128, 8, 8], [3, 64, 64], &mut rng).unwrap();
        let x = Tensor::randn([1, 128, 8, 8], 1.0, &mut rng);
        let y = d.infer(&x);
        assert_eq!(y.shape(), &[1, 3, 64, 64]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(d.upsampling_stages(), 3);
        assert!(d.num_params() > 0);
    }

    #[test]
    fn equal_spatial_size_uses_only_channel_mapping() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = build_decoder([3, 32, 32], [3, 32, 32], &mut rng).unwrap();
        assert_eq!(d.upsampling_stages(), 0);
        assert!(d.num_params() > 0);
        let y = d.infer(&Tensor::zeros([2, 3, 32, 32]));
        assert_eq!(y.shape(), &[2, 3, 32, 32]);
    }

    #[test]
    fn odd_factor_is_handled_in_one_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = build_decoder([8, 4, 4], [1, 24, 24], &mut rng).unwrap();
        assert_eq!(d.upsampling_stages(), 2);
        assert_eq!(d.infer(&Tensor::zeros([1, 8, 4, 4])).shape(), &[1, 1, 24, 24]);
    }

    #[test]
    fn rejects_features_larger_than_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let err = build_decoder([8, 64, 64], [3, 32, 32], &mut rng).unwrap_err();
        assert!(err.to_string().contains("exceeds"), "{err}");
        assert!(build_decoder([8, 5, 5], [3, 32, 32], &mut rng).is_err());
    }
}
