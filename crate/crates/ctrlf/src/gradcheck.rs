//! Finite-difference verification of the autodiff implementation.
//!
//! Every fragment builds a small 64-bit model piece, computes analytic
//! gradients with one backward pass, and compares them against central
//! differences on a random subsample of trainable scalars. Dropout draws
//! are pinned by the pass seed, so stochastic layers check cleanly.

use crate::model::convpath::{MbconvBlock, MbconvConfig};
use crate::model::fusion::{akf_forward, CkfConfig, CkfHead, FusionKind};
use crate::model::mfca::{CrossAttentionExchange, EncoderBlock, TokenSet};
use crate::model::{CtrlfModel, VariantConfig};
use crate::nn::{Forward, Init, ParamStore};
use crate::tensor::TensorData;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub fragment: String,
    pub samples: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<24} {} samples, max rel err {:.3e} (worst: {}) -> {}",
            self.fragment,
            self.samples,
            self.max_rel_err,
            self.worst_param,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Compares analytic gradients against central finite differences on up to
/// `samples` randomly chosen trainable scalars. `loss_fn(store, true)` must
/// also populate store gradients; with `false` it only returns the loss.
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    mut loss_fn: F,
    samples: usize,
    seed: u64,
) -> (f64, usize, String)
where
    F: FnMut(&mut ParamStore<f64>, bool) -> f64,
{
    store.zero_grads();
    let _ = loss_fn(store, true);
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();

    let slots: Vec<(usize, usize)> = store
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(pi, p)| (0..p.value.numel()).map(move |ei| (pi, ei)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.min(slots.len());
    let mut max_rel = 0.0f64;
    let mut worst = String::from("-");
    for _ in 0..n {
        let (pi, ei) = slots[rng.gen_range(0..slots.len())];
        let orig = store.params_value(pi, ei);
        store.set_scalar(pi, ei, orig + FD_STEP);
        let plus = loss_fn(store, false);
        store.set_scalar(pi, ei, orig - FD_STEP);
        let minus = loss_fn(store, false);
        store.set_scalar(pi, ei, orig);
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[pi][ei];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-5);
        if rel > max_rel {
            max_rel = rel;
            worst = format!(
                "{}[{}]: autodiff {:.6e} vs numeric {:.6e}",
                store.param_name(pi),
                ei,
                a,
                numeric
            );
        }
    }
    (max_rel, n, worst)
}

impl<T: crate::tensor::Scalar> ParamStore<T> {
    fn params_value(&self, pi: usize, ei: usize) -> T {
        self.get(crate::nn::ParamId(pi)).value.data[ei]
    }
    fn set_scalar(&mut self, pi: usize, ei: usize, v: T) {
        self.get_mut(crate::nn::ParamId(pi)).value.data[ei] = v;
    }
    fn param_name(&self, pi: usize) -> &str {
        &self.get(crate::nn::ParamId(pi)).name
    }
}

fn pseudo_random(shape: &[usize], seed: u64, offset: f64) -> TensorData<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    TensorData::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0 + offset).collect(),
    )
}

/// Weighted sum of a tensor against a fixed pseudo-random tensor, so the
/// upstream gradient is non-uniform.
fn weighted_sum(
    cx: &mut Forward<f64>,
    x: crate::tensor::TensorId,
    seed: u64,
) -> crate::tensor::TensorId {
    let shape = cx.tape.shape(x).to_vec();
    let w = cx.tape.leaf(pseudo_random(&shape, seed, 0.0), false);
    let p = cx.tape.mul(x, w);
    cx.tape.sum_all(p)
}

fn report(name: &str, tolerance: f64, result: (f64, usize, String)) -> GradCheckReport {
    GradCheckReport {
        fragment: name.into(),
        samples: result.1,
        max_rel_err: result.0,
        worst_param: result.2,
        tolerance,
    }
}

/// MBConv with squeeze-excitation: one downsampling block followed by one
/// residual block, training-mode batch norm (batch statistics on the
/// gradient path).
pub fn fragment_mbconv_se(samples: usize, tolerance: f64) -> GradCheckReport {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b1 = MbconvBlock::new(
        &mut store,
        &mut rng,
        "b1",
        MbconvConfig {
            in_channels: 3,
            out_channels: 4,
            stride: 2,
        },
    );
    let b2 = MbconvBlock::new(
        &mut store,
        &mut rng,
        "b2",
        MbconvConfig {
            in_channels: 4,
            out_channels: 4,
            stride: 1,
        },
    );
    let input = pseudo_random(&[2, 3, 8, 8], 21, 0.0);
    let run = move |store: &mut ParamStore<f64>, grads: bool| {
        let mut cx = Forward::new(store, true, 5);
        let x = cx.tape.leaf(input.clone(), false);
        let y = b1.forward(&mut cx, x);
        let y = b2.forward(&mut cx, y);
        let loss = weighted_sum(&mut cx, y, 31);
        let v = cx.tape.data(loss)[0];
        if grads {
            cx.tape.backward(loss);
            cx.collect_grads();
        }
        v
    };
    report("mbconv+se", tolerance, check_gradients(&mut store, run, samples, 41))
}

/// One pre-norm transformer encoder block (D=16, 4 patch tokens).
pub fn fragment_encoder_block(samples: usize, tolerance: f64) -> GradCheckReport {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let enc = EncoderBlock::new(&mut store, &mut rng, "enc", 16, 4, 3).unwrap();
    let input = pseudo_random(&[2, 4, 16], 22, 0.0);
    let run = move |store: &mut ParamStore<f64>, grads: bool| {
        let mut cx = Forward::new(store, true, 5);
        let x = cx.tape.leaf(input.clone(), false);
        let y = enc.forward(&mut cx, x);
        let loss = weighted_sum(&mut cx, y, 32);
        let v = cx.tape.data(loss)[0];
        if grads {
            cx.tape.backward(loss);
            cx.collect_grads();
        }
        v
    };
    report("encoder-block", tolerance, check_gradients(&mut store, run, samples, 42))
}

/// One full cross-attention exchange round between a 12-dim large branch
/// and an 8-dim small branch.
pub fn fragment_cross_attention(samples: usize, tolerance: f64) -> GradCheckReport {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let ex = CrossAttentionExchange::new(&mut store, &mut rng, "ex", 12, 8, 2).unwrap();
    // make the branch tokens trainable so gradients through both the query
    // and key/value paths are exercised
    let lt = store.add("tokens.large", vec![2, 5, 12], Init::TruncNormal { std: 0.5 }, &mut rng, false);
    let st = store.add("tokens.small", vec![2, 4, 8], Init::TruncNormal { std: 0.5 }, &mut rng, false);
    let run = move |store: &mut ParamStore<f64>, grads: bool| {
        let mut cx = Forward::new(store, true, 5);
        let large = TokenSet {
            tokens: cx.param(lt),
            n_patches: 4,
            dim: 12,
        };
        let small = TokenSet {
            tokens: cx.param(st),
            n_patches: 3,
            dim: 8,
        };
        let (nl, ns) = ex.forward(&mut cx, &large, &small);
        let a = weighted_sum(&mut cx, nl.tokens, 33);
        let b = weighted_sum(&mut cx, ns.tokens, 34);
        let loss = cx.tape.add(a, b);
        let v = cx.tape.data(loss)[0];
        if grads {
            cx.tape.backward(loss);
            cx.collect_grads();
        }
        v
    };
    report(
        "cross-attention",
        tolerance,
        check_gradients(&mut store, run, samples, 43),
    )
}

/// Adaptive fusion including the L1-normalize path; inputs are bounded away
/// from the sign kink at zero.
pub fn fragment_akf(samples: usize, tolerance: f64) -> GradCheckReport {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let off = |seed: u64| {
        let mut d = pseudo_random(&[2, 6], seed, 0.0);
        for v in d.data.iter_mut() {
            *v = *v + v.signum() * 0.2; // keep |v| >= 0.2
        }
        d
    };
    let yc = store.add("y_cnn", vec![2, 6], Init::Zeros, &mut rng, false);
    let yt = store.add("y_trans", vec![2, 6], Init::Zeros, &mut rng, false);
    store.get_mut(yc).value = off(24);
    store.get_mut(yt).value = off(25);
    let run = move |store: &mut ParamStore<f64>, grads: bool| {
        let mut cx = Forward::new(store, true, 5);
        let c = cx.param(yc);
        let t = cx.param(yt);
        let fused = akf_forward(&mut cx, c, t, 0.6, 10.0);
        let loss = cx.tape.cross_entropy_logits(fused.pre_softmax, &[1, 4]);
        let v = cx.tape.data(loss)[0];
        if grads {
            cx.tape.backward(loss);
            cx.collect_grads();
        }
        v
    };
    report("akf+l1norm", tolerance, check_gradients(&mut store, run, samples, 44))
}

/// Collaborative fusion head with active dropout (mask pinned by the pass
/// seed, so finite differences see a fixed network).
pub fn fragment_ckf(samples: usize, tolerance: f64) -> GradCheckReport {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let head = CkfHead::new(&mut store, &mut rng, "ckf", 6, 6, &CkfConfig::new(16, 6));
    let yc = store.add("y_cnn", vec![2, 6], Init::TruncNormal { std: 1.0 }, &mut rng, false);
    let yt = store.add("y_trans", vec![2, 6], Init::TruncNormal { std: 1.0 }, &mut rng, false);
    let run = move |store: &mut ParamStore<f64>, grads: bool| {
        let mut cx = Forward::new(store, true, 5);
        let c = cx.param(yc);
        let t = cx.param(yt);
        let fused = head.forward(&mut cx, c, t);
        let loss = cx.tape.cross_entropy_logits(fused.pre_softmax, &[2, 5]);
        let v = cx.tape.data(loss)[0];
        if grads {
            cx.tape.backward(loss);
            cx.collect_grads();
        }
        v
    };
    report("ckf", tolerance, check_gradients(&mut store, run, samples, 45))
}

/// End-to-end check through the full tiny model: conv path, MFCA, adaptive
/// fusion, cross-entropy.
pub fn fragment_full_tiny(samples: usize, tolerance: f64) -> GradCheckReport {
    let cfg = VariantConfig::tiny(FusionKind::Akf { alpha: 10.0 }, 4);
    let mut model = CtrlfModel::<f64>::build(&cfg, 16).unwrap();
    let images = pseudo_random(&[2, 3, 32, 32], 26, 0.5);
    let labels = vec![1usize, 3];
    let conv = model.conv;
    let mfca = model.mfca;
    let fusion = model.fusion;
    let run = move |store: &mut ParamStore<f64>, grads: bool| {
        let mut cx = Forward::new(store, true, 5);
        let img = cx.tape.leaf(images.clone(), false);
        let feats = conv.forward(&mut cx, img);
        let trans = mfca.forward(&mut cx, feats.s2, feats.s4);
        let fused = fusion.forward(&mut cx, feats.cnn_logits, trans, 0.5);
        let loss = cx.tape.cross_entropy_logits(fused.pre_softmax, &labels);
        let v = cx.tape.data(loss)[0];
        if grads {
            cx.tape.backward(loss);
            cx.collect_grads();
        }
        v
    };
    report(
        "full-tiny",
        tolerance,
        check_gradients(&mut model.store, run, samples, 46),
    )
}

/// The whole fragment suite at the given tolerance.
pub fn run_all(samples: usize, tolerance: f64) -> Vec<GradCheckReport> {
    vec![
        fragment_mbconv_se(samples, tolerance),
        fragment_encoder_block(samples, tolerance),
        fragment_cross_attention(samples, tolerance),
        fragment_akf(samples, tolerance),
        fragment_ckf(samples, tolerance),
        fragment_full_tiny(samples, tolerance),
    ]
}
