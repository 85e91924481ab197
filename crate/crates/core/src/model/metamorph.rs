//! Per-task metamorphosis module: grouped channel attention whose attention
//! vectors are rotated across channel groups before a final channel mixing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Linear, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Crossing {
    /// Attention of group i scales group (i + 1) mod k.
    Cross,
    /// Attention of group i scales group i (grouped squeeze-excitation).
    Straight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetamorphConfig {
    pub k: usize,
    pub reduction_ratio: usize,
    pub crossing: Crossing,
}

impl Default for MetamorphConfig {
    fn default() -> Self {
        Self {
            k: 2,
            reduction_ratio: 4,
            crossing: Crossing::Cross,
        }
    }
}

impl MetamorphConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.k == 0 || channels % self.k != 0 {
            return Err(Error::Config(format!(
                "metamorph.k = {} must divide the encoder output channel count {channels}",
                self.k
            )));
        }
        if self.reduction_ratio == 0 {
            return Err(Error::Config("metamorph.reduction_ratio must be ≥ 1".into()));
        }
        if self.bottleneck(channels) == 0 {
            return Err(Error::Config(format!(
                "metamorph bottleneck width {channels}/({}·{}) is zero",
                self.k, self.reduction_ratio
            )));
        }
        Ok(())
    }

    pub fn group_width(&self, channels: usize) -> usize {
        channels / self.k
    }

    pub fn bottleneck(&self, channels: usize) -> usize {
        channels / (self.k * self.reduction_ratio)
    }

    /// Index of the group scaled by the attention of `group`.
    pub fn target_group(&self, group: usize) -> usize {
        match self.crossing {
            Crossing::Cross => (group + 1) % self.k,
            Crossing::Straight => group,
        }
    }
}

/// Test hook that replaces one group's attention vector with zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionHook {
    #[default]
    None,
    ZeroGroup(usize),
}

#[derive(Clone, Debug)]
struct Branch {
    // 1×1 convolution on the pooled descriptor, which is a linear map.
    squeeze: Linear,
    reduce: Linear,
    expand: Linear,
}

/// Intermediate values of one forward pass.
pub struct MetamorphTrace {
    /// One [N, C/k] attention tensor per group, in (0, 1).
    pub attention: Vec<Var>,
    /// Re-concatenated channels after attention scaling.
    pub attended: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct Metamorph {
    pub config: MetamorphConfig,
    channels: usize,
    branches: Vec<Branch>,
    mix: Conv2d,
    pub params: ParamStore,
}

impl Metamorph {
    pub fn new<R: Rng + ?Sized>(config: MetamorphConfig, channels: usize, rng: &mut R) -> Result<Self> {
        config.validate(channels)?;
        let width = config.group_width(channels);
        let bottleneck = config.bottleneck(channels);
        let mut params = ParamStore::new();
        let branches = (0..config.k)
            .map(|g| Branch {
                squeeze: Linear::new(&mut params, &format!("group{g}.squeeze"), width, width, rng),
                reduce: Linear::new(&mut params, &format!("group{g}.reduce"), width, bottleneck, rng),
                expand: Linear::new(&mut params, &format!("group{g}.expand"), bottleneck, width, rng),
            })
            .collect();
        let mix = Conv2d::new(&mut params, "mix", channels, channels, 1, 1, true, rng);
        Ok(Self {
            config,
            channels,
            branches,
            mix,
            params,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        self.forward_traced(tape, p, x, AttentionHook::None).output
    }

    pub fn forward_traced(&self, tape: &mut Tape, p: &Bound, x: Var, hook: AttentionHook) -> MetamorphTrace {
        let k = self.config.k;
        let width = self.config.group_width(self.channels);
        let groups: Vec<Var> = (0..k).map(|g| tape.slice_channels(x, g * width, width)).collect();
        let mut attention = Vec::with_capacity(k);
        for (g, (&group, branch)) in groups.iter().zip(&self.branches).enumerate() {
            let att = if hook == AttentionHook::ZeroGroup(g) {
                let n = tape.shape(x)[0];
                tape.constant(Tensor::zeros([n, width]))
            } else {
                let pooled = tape.global_avg_pool(group);
                let s = branch.squeeze.forward(tape, p, pooled);
                let r = branch.reduce.forward(tape, p, s);
                let r = tape.relu(r);
                let e = branch.expand.forward(tape, p, r);
                tape.sigmoid(e)
            };
            attention.push(att);
        }
        // Group t is scaled by the attention of the group that targets it.
        let scaled: Vec<Var> = (0..k)
            .map(|t| {
                let source = (0..k)
                    .find(|&g| self.config.target_group(g) == t)
                    .expect("target mapping is a permutation");
                tape.mul_channel(groups[t], attention[source])
            })
            .collect();
        let attended = tape.concat_channels(&scaled);
        let output = self.mix.forward(tape, p, attended);
        MetamorphTrace {
            attention,
            attended,
            output,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, x);
        tape.value(y).clone()
    }

    /// Drives every sigmoid to exactly 1 by saturating the expand biases.
    pub fn saturate_attention(&mut self) {
        for branch in &self.branches {
            let bias = self.params.get_mut(branch.expand.bias_id());
            bias.data_mut().iter_mut().for_each(|v| *v = 1e4);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(m: &Metamorph, x: &Tensor, hook: AttentionHook) -> (Vec<Tensor>, Tensor, Tensor) {
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let t = m.forward_traced(&mut tape, &p, xv, hook);
        (
            t.attention.iter().map(|&a| tape.value(a).clone()).collect(),
            tape.value(t.attended).clone(),
            tape.value(t.output).clone(),
        )
    }

    /// Hand-written crossing rule: group `t` of the attended output equals group
    /// `t` of the input times the attention of the group that maps onto `t`.
    fn reference_attended(x: &Tensor, att: &[Tensor], k: usize, cross: bool) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let width = c / k;
        let mut out = x.clone();
        for s in 0..n {
            for ch in 0..c {
                let t = ch / width;
                let source = if cross { (t + k - 1) % k } else { t };
                let a = att[source].data()[s * width + ch % width];
                for v in &mut out.data_mut()[((s * c + ch) * h * w)..((s * c + ch + 1) * h * w)] {
                    *v *= a;
                }
            }
        }
        out
    }

    #[test]
    fn preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Metamorph::new(MetamorphConfig::default(), 64, &mut rng).unwrap();
        let x = Tensor::randn([1, 64, 16, 16], 1.0, &mut rng);
        assert_eq!(m.infer(&x).shape(), &[1, 64, 16, 16]);
    }

    #[test]
    fn rejects_indivisible_channels_and_empty_bottleneck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = MetamorphConfig {
            k: 3,
            ..MetamorphConfig::default()
        };
        assert!(Metamorph::new(cfg, 64, &mut rng).is_err());
        let cfg = MetamorphConfig {
            k: 2,
            reduction_ratio: 64,
            crossing: Crossing::Cross,
        };
        assert!(Metamorph::new(cfg, 64, &mut rng).is_err());
    }

    #[test]
    fn saturated_attention_makes_scaling_the_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for crossing in [Crossing::Straight, Crossing::Cross] {
            let cfg = MetamorphConfig {
                crossing,
                ..MetamorphConfig::default()
            };
            let mut m = Metamorph::new(cfg, 16, &mut rng).unwrap();
            m.saturate_attention();
            let x = Tensor::randn([2, 16, 4, 4], 1.0, &mut rng);
            let (att, attended, _) = run(&m, &x, AttentionHook::None);
            assert!(att.iter().all(|a| a.data().iter().all(|&v| v == 1.0)));
            assert_eq!(attended, x);
        }
    }

    #[test]
    fn attention_lies_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Metamorph::new(MetamorphConfig::default(), 32, &mut rng).unwrap();
        let x = Tensor::randn([3, 32, 5, 5], 2.0, &mut rng);
        let (att, _, _) = run(&m, &x, AttentionHook::None);
        for a in att {
            assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn crossing_rule_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (k, crossing) in [(2, Crossing::Cross), (2, Crossing::Straight), (4, Crossing::Cross)] {
            let cfg = MetamorphConfig {
                k,
                reduction_ratio: 2,
                crossing,
            };
            let m = Metamorph::new(cfg, 16, &mut rng).unwrap();
            let x = Tensor::randn([2, 16, 3, 3], 1.0, &mut rng);
            let (att, attended, _) = run(&m, &x, AttentionHook::None);
            let want = reference_attended(&x, &att, k, crossing == Crossing::Cross);
            assert_eq!(attended, want);
        }
    }

    #[test]
    fn zeroing_a_group_annihilates_its_target_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (k, crossing) in [(2, Crossing::Cross), (2, Crossing::Straight), (4, Crossing::Cross)] {
            let cfg = MetamorphConfig {
                k,
                reduction_ratio: 2,
                crossing,
            };
            let m = Metamorph::new(cfg, 16, &mut rng).unwrap();
            let x = Tensor::randn([2, 16, 3, 3], 1.0, &mut rng).map(|v| v + 3.0);
            let width = 16 / k;
            for ablated in 0..k {
                let (_, attended, _) = run(&m, &x, AttentionHook::ZeroGroup(ablated));
                let target = cfg.target_group(ablated);
                for s in 0..2 {
                    for ch in 0..16 {
                        let plane = &attended.data()[(s * 16 + ch) * 9..(s * 16 + ch + 1) * 9];
                        let zero = plane.iter().all(|&v| v == 0.0);
                        assert_eq!(zero, ch / width == target, "k={k} {crossing:?} ablated={ablated} ch={ch}");
                    }
                }
            }
        }
    }
}
