//! Model assembly: variant presets, validation, and the complete network
//! (conv path + MFCA + fusion head) behind one forward entry point.

pub mod convpath;
pub mod fusion;
pub mod mfca;

use crate::error::{Error, Result};
use crate::nn::{Forward, ParamStore};
use crate::tensor::{Scalar, TensorData, TensorId};
use convpath::ConvPath;
use fusion::{CkfConfig, CkfHead, FusedOutput, FusionHead, FusionKind};
use mfca::{divisors, Mfca, MfcaConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Complete architectural hyperparameters for one model build.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantConfig {
    pub name: String,
    pub stage_blocks: [usize; 4],
    pub stage_channels: [usize; 4],
    pub stem_width: usize,
    pub mfca: MfcaConfig,
    pub fusion: FusionKind,
    pub classes: usize,
    pub resolution: usize,
}

pub const DEFAULT_AKF_ALPHA: f64 = 10.0;
pub const DEFAULT_CKF_K: usize = 128;
pub const DEFAULT_CKF_DROPOUT: f64 = 0.5;

impl VariantConfig {
    /// The small variant: blocks {2,2,3,5}, channels {32,64,128,256},
    /// embed dims 128/256, two exchange rounds.
    pub fn ctrlf_s(fusion: FusionKind, classes: usize, resolution: usize) -> Self {
        VariantConfig {
            name: "ctrlf-s".into(),
            stage_blocks: [2, 2, 3, 5],
            stage_channels: [32, 64, 128, 256],
            stem_width: 16,
            mfca: MfcaConfig {
                patch_small: 2,
                patch_large: 8,
                dim_small: 128,
                dim_large: 256,
                depth_small: 3,
                depth_large: 3,
                rounds: 2,
                heads: 6,
                ffn_ratio_small: 12,
                ffn_ratio_large: 4,
                head_layernorm: true,
            },
            fusion,
            classes,
            resolution,
        }
    }

    /// The base variant: blocks {2,2,4,8}, channels {64,92,196,256},
    /// embed dims 192/384, four exchange rounds.
    pub fn ctrlf_b(fusion: FusionKind, classes: usize, resolution: usize) -> Self {
        VariantConfig {
            name: "ctrlf-b".into(),
            stage_blocks: [2, 2, 4, 8],
            stage_channels: [64, 92, 196, 256],
            stem_width: 16,
            mfca: MfcaConfig {
                patch_small: 2,
                patch_large: 8,
                dim_small: 192,
                dim_large: 384,
                depth_small: 3,
                depth_large: 3,
                rounds: 4,
                heads: 6,
                ffn_ratio_small: 12,
                ffn_ratio_large: 4,
                head_layernorm: true,
            },
            fusion,
            classes,
            resolution,
        }
    }

    /// Smoke-test variant: one block per stage, channels {8,16,32,64},
    /// embed dims 32/64, one exchange round, 32x32 inputs.
    pub fn tiny(fusion: FusionKind, classes: usize) -> Self {
        VariantConfig {
            name: "tiny".into(),
            stage_blocks: [1, 1, 1, 1],
            stage_channels: [8, 16, 32, 64],
            stem_width: 4,
            mfca: MfcaConfig {
                patch_small: 2,
                patch_large: 8,
                dim_small: 32,
                dim_large: 64,
                depth_small: 1,
                depth_large: 1,
                rounds: 1,
                heads: 4,
                ffn_ratio_small: 2,
                ffn_ratio_large: 2,
                head_layernorm: true,
            },
            fusion,
            classes,
            resolution: 32,
        }
    }

    pub fn by_name(name: &str, fusion: FusionKind, classes: usize, resolution: usize) -> Result<Self> {
        match name {
            "ctrlf-s" => Ok(Self::ctrlf_s(fusion, classes, resolution)),
            "ctrlf-b" => Ok(Self::ctrlf_b(fusion, classes, resolution)),
            "tiny" => {
                let mut cfg = Self::tiny(fusion, classes);
                cfg.resolution = resolution;
                Ok(cfg)
            }
            other => Err(Error::config(format!(
                "unknown variant '{other}' (expected ctrlf-s, ctrlf-b, or tiny)"
            ))),
        }
    }

    /// Feature sides of the S2 and S4 taps for the configured resolution.
    pub fn feature_sides(&self) -> (usize, usize) {
        (self.resolution / 4, self.resolution / 16)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % 16 != 0 {
            return Err(Error::config(format!(
                "resolution {} must be a positive multiple of 16",
                self.resolution
            )));
        }
        if self.classes < 2 {
            return Err(Error::config(format!(
                "class count {} must be at least 2",
                self.classes
            )));
        }
        let (s2, s4) = self.feature_sides();
        if self.mfca.patch_large == 0 || s2 % self.mfca.patch_large != 0 {
            return Err(Error::config(format!(
                "large-branch patch {} does not divide the {}x{} S2 features; valid patch sizes: {:?}",
                self.mfca.patch_large,
                s2,
                s2,
                divisors(s2)
            )));
        }
        if self.mfca.patch_small == 0 || s4 % self.mfca.patch_small != 0 {
            return Err(Error::config(format!(
                "small-branch patch {} does not divide the {}x{} S4 features; valid patch sizes: {:?}",
                self.mfca.patch_small,
                s4,
                s4,
                divisors(s4)
            )));
        }
        let m = &self.mfca;
        if m.heads == 0 || m.dim_small < m.heads || m.dim_large < m.heads {
            return Err(Error::config(format!(
                "head count {} incompatible with embed dims {}/{}",
                m.heads, m.dim_small, m.dim_large
            )));
        }
        if let FusionKind::Ckf { k, dropout_rate } = &self.fusion {
            if *k == 0 {
                return Err(Error::config("fusion alignment dim k must be positive"));
            }
            if !(0.0..1.0).contains(dropout_rate) {
                return Err(Error::config(format!(
                    "fusion dropout rate {dropout_rate} outside [0,1)"
                )));
            }
        }
        if let FusionKind::Akf { alpha } = &self.fusion {
            if *alpha <= 0.0 {
                return Err(Error::config(format!("fusion scale alpha {alpha} must be positive")));
            }
        }
        Ok(())
    }
}

/// One forward pass: the live context plus the ids of every output the
/// trainer and evaluator need.
pub struct RunOutput<'a, T: Scalar> {
    pub cx: Forward<'a, T>,
    pub fused: FusedOutput,
    pub cnn_logits: TensorId,
    pub trans_logits: TensorId,
    pub s2: TensorId,
    pub s4: TensorId,
}

pub struct CtrlfModel<T: Scalar> {
    pub cfg: VariantConfig,
    pub store: ParamStore<T>,
    pub conv: ConvPath,
    pub mfca: Mfca,
    pub fusion: FusionHead,
    pub seed: u64,
}

impl<T: Scalar> CtrlfModel<T> {
    /// Builds a model with seeded deterministic initialization.
    pub fn build(cfg: &VariantConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = ConvPath::new(
            &mut store,
            &mut rng,
            "conv",
            cfg.stem_width,
            &cfg.stage_blocks,
            &cfg.stage_channels,
            cfg.classes,
        );
        let (s2_side, s4_side) = cfg.feature_sides();
        let mfca = Mfca::new(
            &mut store,
            &mut rng,
            "mfca",
            &cfg.mfca,
            s2_side,
            cfg.stage_channels[1],
            s4_side,
            cfg.stage_channels[3],
            cfg.classes,
        )?;
        let fusion = match &cfg.fusion {
            FusionKind::Akf { alpha } => FusionHead::Akf { alpha: *alpha },
            FusionKind::Ckf { k, dropout_rate } => {
                let ckf_cfg = CkfConfig {
                    k: *k,
                    dropout_rate: *dropout_rate,
                    classes: cfg.classes,
                };
                FusionHead::Ckf(CkfHead::new(
                    &mut store,
                    &mut rng,
                    "fusion.ckf",
                    cfg.classes,
                    cfg.classes,
                    &ckf_cfg,
                ))
            }
        };
        Ok(CtrlfModel {
            cfg: cfg.clone(),
            store,
            conv,
            mfca,
            fusion,
            seed,
        })
    }

    /// Forward pass over a batch of images [B,3,R,R]. `lambda` only matters
    /// for AKF models; evaluation passes the end-of-schedule value.
    pub fn run(
        &mut self,
        images: &TensorData<T>,
        training: bool,
        lambda: f64,
        pass_seed: u64,
    ) -> RunOutput<'_, T> {
        assert_eq!(
            &images.shape[1..],
            &[3, self.cfg.resolution, self.cfg.resolution],
            "model: image shape {:?} does not match configured resolution {}",
            images.shape,
            self.cfg.resolution
        );
        let CtrlfModel {
            store,
            conv,
            mfca,
            fusion,
            ..
        } = self;
        let mut cx = Forward::new(store, training, pass_seed);
        let img = cx.tape.leaf(images.clone(), false);
        let feats = conv.forward(&mut cx, img);
        let trans_logits = mfca.forward(&mut cx, feats.s2, feats.s4);
        let fused = fusion.forward(&mut cx, feats.cnn_logits, trans_logits, lambda);
        RunOutput {
            cx,
            fused,
            cnn_logits: feats.cnn_logits,
            trans_logits,
            s2: feats.s2,
            s4: feats.s4,
        }
    }

    pub fn num_trainable_params(&self) -> u64 {
        self.store.num_trainable_scalars()
    }

    /// End-of-schedule lambda used for evaluation of AKF models.
    pub fn eval_lambda(&self) -> f64 {
        match &self.fusion {
            FusionHead::Akf { .. } => 0.3,
            FusionHead::Ckf(_) => 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(fusion: FusionKind) -> VariantConfig {
        VariantConfig::tiny(fusion, 8)
    }

    fn images(b: usize, res: usize, seed: u64) -> TensorData<f32> {
        let n = b * 3 * res * res;
        TensorData::new(
            vec![b, 3, res, res],
            (0..n)
                .map(|i| (((i as u64).wrapping_mul(seed * 2 + 1) % 255) as f32) / 255.0)
                .collect(),
        )
    }

    #[test]
    fn presets_match_published_table() {
        let s = VariantConfig::ctrlf_s(FusionKind::Akf { alpha: 10.0 }, 102, 224);
        assert_eq!(s.stage_blocks, [2, 2, 3, 5]);
        assert_eq!(s.stage_channels, [32, 64, 128, 256]);
        assert_eq!((s.mfca.dim_small, s.mfca.dim_large, s.mfca.rounds), (128, 256, 2));
        assert_eq!((s.mfca.patch_small, s.mfca.patch_large), (2, 8));
        assert_eq!((s.mfca.depth_small, s.mfca.depth_large, s.mfca.heads), (3, 3, 6));
        assert_eq!((s.mfca.ffn_ratio_small, s.mfca.ffn_ratio_large), (12, 4));

        let b = VariantConfig::ctrlf_b(FusionKind::Akf { alpha: 10.0 }, 102, 224);
        assert_eq!(b.stage_blocks, [2, 2, 4, 8]);
        assert_eq!(b.stage_channels, [64, 92, 196, 256]);
        assert_eq!((b.mfca.dim_small, b.mfca.dim_large, b.mfca.rounds), (192, 384, 4));
    }

    #[test]
    fn feature_sides_follow_resolution() {
        let s = VariantConfig::ctrlf_s(FusionKind::Akf { alpha: 10.0 }, 102, 224);
        assert_eq!(s.feature_sides(), (56, 14));
        let s384 = VariantConfig::ctrlf_s(FusionKind::Akf { alpha: 10.0 }, 102, 384);
        assert_eq!(s384.feature_sides(), (96, 24));
    }

    #[test]
    fn invalid_patch_lists_divisors() {
        let mut cfg = VariantConfig::ctrlf_s(FusionKind::Akf { alpha: 10.0 }, 102, 224);
        cfg.mfca.patch_small = 5; // 5 does not divide 14
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("[1, 2, 7, 14]"), "message must list divisors: {err}");
    }

    #[test]
    fn invalid_resolution_rejected() {
        let mut cfg = tiny(FusionKind::Akf { alpha: 10.0 });
        cfg.resolution = 50;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tiny_forward_returns_three_outputs() {
        let cfg = tiny(FusionKind::Akf { alpha: 10.0 });
        let mut model = CtrlfModel::<f32>::build(&cfg, 0).unwrap();
        let imgs = images(2, 32, 1);
        let out = model.run(&imgs, false, 0.3, 0);
        assert_eq!(out.cx.tape.shape(out.fused.pre_softmax), &[2, 8]);
        assert_eq!(out.cx.tape.shape(out.cnn_logits), &[2, 8]);
        assert_eq!(out.cx.tape.shape(out.trans_logits), &[2, 8]);
        let probs = out.fused.probs.expect("akf returns probabilities");
        let p = out.cx.tape.data(probs);
        for row in p.chunks(8) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let cfg = tiny(FusionKind::Ckf {
            k: 16,
            dropout_rate: 0.5,
        });
        let a = CtrlfModel::<f32>::build(&cfg, 5).unwrap();
        let b = CtrlfModel::<f32>::build(&cfg, 5).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for (p, q) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value.data, q.value.data, "param {} differs", p.name);
        }
        let c = CtrlfModel::<f32>::build(&cfg, 6).unwrap();
        let diff = a
            .store
            .iter()
            .zip(c.store.iter())
            .any(|(p, q)| p.value.data != q.value.data);
        assert!(diff, "different seeds must differ");
    }

    #[test]
    fn taps_feed_both_consumers() {
        let cfg = tiny(FusionKind::Akf { alpha: 10.0 });
        let mut model = CtrlfModel::<f32>::build(&cfg, 0).unwrap();
        let imgs = images(1, 32, 2);
        let out = model.run(&imgs, false, 0.3, 0);
        // s4 feeds both the CNN head pooling and the small-branch embedding;
        // s2 feeds stage 3 and the large-branch embedding
        let mut s4_consumers = 0;
        let mut s2_consumers = 0;
        for r in out.cx.tape.records() {
            let inputs = out.cx.tape.op_inputs(r.id);
            if inputs.contains(&out.s4) {
                s4_consumers += 1;
            }
            if inputs.contains(&out.s2) {
                s2_consumers += 1;
            }
        }
        assert!(s4_consumers >= 2, "s4 tap must feed head and embedding, saw {s4_consumers}");
        assert!(s2_consumers >= 2, "s2 tap must feed stage 3 and embedding, saw {s2_consumers}");
    }

    #[test]
    fn gradients_flow_to_every_trainable_param() {
        let cfg = tiny(FusionKind::Akf { alpha: 10.0 });
        let mut model = CtrlfModel::<f64>::build(&cfg, 3).unwrap();
        let imgs = images(2, 32, 3).cast::<f64>();
        let mut out = model.run(&imgs, true, 0.5, 7);
        let loss = out.cx.tape.cross_entropy_logits(out.fused.pre_softmax, &[1, 4]);
        out.cx.tape.backward(loss);
        out.cx.collect_grads();
        drop(out);
        let mut dead = Vec::new();
        for p in model.store.iter() {
            if p.trainable && p.grad.iter().all(|&g| g == 0.0) {
                dead.push(p.name.clone());
            }
        }
        assert!(dead.is_empty(), "zero-grad parameters: {dead:?}");
    }
}
