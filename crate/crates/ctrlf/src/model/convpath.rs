//! The five-stage convolutional pathway S0-S4.
//!
//! S0 is a stride-1 3x3 stem; S1-S4 are MBConv stacks whose first block
//! halves the resolution. The S2 and S4 outputs are tapped for the
//! transformer module; the classification head pools S4.

use crate::nn::layers::{BatchNorm2d, Conv2d, Linear, SqueezeExcitation};
use crate::nn::{Forward, ParamStore};
use crate::tensor::{Scalar, TensorId};
use rand_chacha::ChaCha8Rng;

/// Channel expansion inside every MBConv block.
pub const MBCONV_EXPANSION: usize = 4;

/// Squeeze width for the SE bottleneck: a quarter of the block input
/// channels, at least 8.
pub fn se_squeeze_width(block_in_channels: usize) -> usize {
    ((block_in_channels as f64 * 0.25).round() as usize).max(8)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MbconvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl MbconvConfig {
    pub fn expanded(&self) -> usize {
        self.in_channels * MBCONV_EXPANSION
    }

    /// Residual connection exists exactly when shapes are preserved.
    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }
}

pub struct Stem {
    conv: Conv2d,
    bn: BatchNorm2d,
    pub width: usize,
}

impl Stem {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, width: usize) -> Self {
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), 3, width, 3, 1, 1, 1);
        let bn = BatchNorm2d::new(store, rng, &format!("{name}.bn"), width);
        Stem { conv, bn, width }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, image: TensorId) -> TensorId {
        let shape = cx.tape.shape(image);
        assert_eq!(
            shape[1], 3,
            "stem: expected a 3-channel image, got shape {:?}",
            shape
        );
        let x = self.conv.forward(cx, image);
        let x = self.bn.forward(cx, x);
        cx.tape.gelu(x)
    }
}

/// Inverted residual block: 1x1 expand (x4) -> 3x3 depthwise (strided)
/// -> squeeze-excitation -> 1x1 project, residual when shapes allow.
pub struct MbconvBlock {
    pub cfg: MbconvConfig,
    expand: Conv2d,
    bn1: BatchNorm2d,
    depthwise: Conv2d,
    bn2: BatchNorm2d,
    se: SqueezeExcitation,
    project: Conv2d,
    bn3: BatchNorm2d,
}

impl MbconvBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: MbconvConfig,
    ) -> Self {
        let e = cfg.expanded();
        let expand = Conv2d::new(store, rng, &format!("{name}.expand"), cfg.in_channels, e, 1, 1, 0, 1);
        let bn1 = BatchNorm2d::new(store, rng, &format!("{name}.bn1"), e);
        let depthwise = Conv2d::new(store, rng, &format!("{name}.dw"), e, e, 3, cfg.stride, 1, e);
        let bn2 = BatchNorm2d::new(store, rng, &format!("{name}.bn2"), e);
        let se = SqueezeExcitation::new(
            store,
            rng,
            &format!("{name}.se"),
            e,
            se_squeeze_width(cfg.in_channels),
        );
        let project = Conv2d::new(store, rng, &format!("{name}.project"), e, cfg.out_channels, 1, 1, 0, 1);
        let bn3 = BatchNorm2d::new(store, rng, &format!("{name}.bn3"), cfg.out_channels);
        MbconvBlock {
            cfg,
            expand,
            bn1,
            depthwise,
            bn2,
            se,
            project,
            bn3,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, x: TensorId) -> TensorId {
        let t = self.expand.forward(cx, x);
        let t = self.bn1.forward(cx, t);
        let t = cx.tape.gelu(t);
        let t = self.depthwise.forward(cx, t);
        let t = self.bn2.forward(cx, t);
        let t = cx.tape.gelu(t);
        let t = self.se.forward(cx, t);
        let t = self.project.forward(cx, t);
        let t = self.bn3.forward(cx, t);
        if self.cfg.has_residual() {
            cx.tape.add(t, x)
        } else {
            t
        }
    }
}

/// Output of one conv-path forward: the two feature taps plus the CNN head
/// logits. The taps are the very tensors that fed the following stage.
pub struct ConvFeatures {
    pub s2: TensorId,
    pub s4: TensorId,
    pub cnn_logits: TensorId,
}

pub struct ConvPath {
    pub stem: Stem,
    pub stages: Vec<Vec<MbconvBlock>>,
    pub head: Linear,
    pub classes: usize,
}

impl ConvPath {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        stem_width: usize,
        stage_blocks: &[usize; 4],
        stage_channels: &[usize; 4],
        classes: usize,
    ) -> Self {
        let stem = Stem::new(store, rng, &format!("{name}.stem"), stem_width);
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = stem_width;
        for (si, (&count, &out_ch)) in stage_blocks.iter().zip(stage_channels).enumerate() {
            let mut blocks = Vec::with_capacity(count);
            for bi in 0..count {
                let cfg = MbconvConfig {
                    in_channels: if bi == 0 { in_ch } else { out_ch },
                    out_channels: out_ch,
                    stride: if bi == 0 { 2 } else { 1 },
                };
                blocks.push(MbconvBlock::new(
                    store,
                    rng,
                    &format!("{name}.s{}.b{}", si + 1, bi),
                    cfg,
                ));
            }
            stages.push(blocks);
            in_ch = out_ch;
        }
        let head = Linear::new(store, rng, &format!("{name}.head"), stage_channels[3], classes, true);
        ConvPath {
            stem,
            stages,
            head,
            classes,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, image: TensorId) -> ConvFeatures {
        let mut x = self.stem.forward(cx, image);
        let mut s2 = None;
        for (si, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(cx, x);
            }
            if si == 1 {
                s2 = Some(x);
            }
        }
        let s4 = x;
        let pooled = cx.tape.global_avg_pool(s4);
        let cnn_logits = self.head.forward(cx, pooled);
        ConvFeatures {
            s2: s2.expect("conv path has four stages"),
            s4,
            cnn_logits,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorData;
    use rand_chacha::rand_core::SeedableRng;

    fn image(b: usize, res: usize) -> TensorData<f32> {
        let n = b * 3 * res * res;
        TensorData::new(
            vec![b, 3, res, res],
            (0..n).map(|i| ((i * 31 % 17) as f32) * 0.05).collect(),
        )
    }

    #[test]
    fn stem_preserves_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let stem = Stem::new(&mut store, &mut rng, "stem", 16);
        let mut cx = Forward::new(&mut store, false, 0);
        let x = cx.tape.leaf(image(1, 32), false);
        let y = stem.forward(&mut cx, x);
        assert_eq!(cx.tape.shape(y), &[1, 16, 32, 32]);
    }

    #[test]
    fn stem_zero_image_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let stem = Stem::new(&mut store, &mut rng, "stem", 8);
        let mut cx = Forward::new(&mut store, true, 0);
        let x = cx.tape.leaf(TensorData::zeros(vec![2, 3, 16, 16]), false);
        let y = stem.forward(&mut cx, x);
        assert!(cx.tape.data(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    #[should_panic(expected = "3-channel")]
    fn stem_rejects_non_rgb() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let stem = Stem::new(&mut store, &mut rng, "stem", 8);
        let mut cx = Forward::new(&mut store, false, 0);
        let x = cx.tape.leaf(TensorData::zeros(vec![1, 4, 16, 16]), false);
        stem.forward(&mut cx, x);
    }

    #[test]
    fn mbconv_shapes_and_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        // stride 1, same channels: residual applies, shape preserved
        let same = MbconvConfig {
            in_channels: 8,
            out_channels: 8,
            stride: 1,
        };
        assert!(same.has_residual());
        let b1 = MbconvBlock::new(&mut store, &mut rng, "b1", same);
        // stride 2, channel change: no residual, halved resolution
        let down = MbconvConfig {
            in_channels: 8,
            out_channels: 16,
            stride: 2,
        };
        assert!(!down.has_residual());
        assert_eq!(down.expanded(), 32);
        let b2 = MbconvBlock::new(&mut store, &mut rng, "b2", down);

        let mut cx = Forward::new(&mut store, false, 0);
        let x = cx.tape.leaf(TensorData::zeros(vec![2, 8, 12, 12]), false);
        let y1 = b1.forward(&mut cx, x);
        assert_eq!(cx.tape.shape(y1), &[2, 8, 12, 12]);
        let y2 = b2.forward(&mut cx, y1);
        assert_eq!(cx.tape.shape(y2), &[2, 16, 6, 6]);
    }

    #[test]
    fn expansion_width_is_four_times_input() {
        let cfg = MbconvConfig {
            in_channels: 64,
            out_channels: 128,
            stride: 2,
        };
        assert_eq!(cfg.expanded(), 256);
    }

    #[test]
    fn conv_path_taps_and_resolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let path = ConvPath::new(
            &mut store,
            &mut rng,
            "conv",
            4,
            &[1, 1, 1, 1],
            &[8, 16, 32, 64],
            5,
        );
        let mut cx = Forward::new(&mut store, false, 0);
        let x = cx.tape.leaf(image(2, 32), false);
        let f = path.forward(&mut cx, x);
        // 32 / 4 = 8, 32 / 16 = 2
        assert_eq!(cx.tape.shape(f.s2), &[2, 16, 8, 8]);
        assert_eq!(cx.tape.shape(f.s4), &[2, 64, 2, 2]);
        assert_eq!(cx.tape.shape(f.cnn_logits), &[2, 5]);

        // the s2 tap must be the exact tensor consumed by stage 3's first
        // block (no recomputation)
        let consumers: Vec<_> = cx
            .tape
            .records()
            .filter(|r| cx.tape.op_inputs(r.id).contains(&f.s2))
            .collect();
        assert!(!consumers.is_empty(), "s2 tap has no consumers");
    }

    #[test]
    fn first_block_of_each_stage_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let path = ConvPath::new(
            &mut store,
            &mut rng,
            "conv",
            4,
            &[2, 2, 3, 5],
            &[8, 16, 32, 64],
            3,
        );
        for stage in &path.stages {
            assert_eq!(stage[0].cfg.stride, 2);
            for b in &stage[1..] {
                assert_eq!(b.cfg.stride, 1);
                assert!(b.cfg.has_residual());
            }
        }
        assert_eq!(path.stages.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![2, 2, 3, 5]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let path = ConvPath::new(&mut store, &mut rng, "conv", 4, &[1, 1, 1, 1], &[4, 8, 16, 32], 3);
        let img = image(1, 16);
        let run = |store: &mut ParamStore<f32>, seed: u64| {
            let mut cx = Forward::new(store, false, seed);
            let x = cx.tape.leaf(img.clone(), false);
            let f = path.forward(&mut cx, x);
            cx.tape.data(f.cnn_logits).to_vec()
        };
        let a = run(&mut store, 0);
        let b = run(&mut store, 99); // pass seed only feeds dropout; eval has none
        assert_eq!(a, b);
    }
}
