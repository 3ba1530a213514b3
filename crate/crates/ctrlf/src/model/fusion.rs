//! Knowledge-fusion heads combining the CNN logits with the transformer
//! output: an adaptive convex combination of L1-normalized predictions
//! (AKF) and a learned concatenation head (CKF).

use crate::error::{Error, Result};
use crate::nn::layers::{Dropout, Linear};
use crate::nn::{Forward, ParamStore};
use crate::tensor::{Scalar, TensorId};
use rand_chacha::ChaCha8Rng;

pub const L1_EPS: f64 = 1e-8;

/// Schedule and scale for adaptive knowledge fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct AkfConfig {
    pub lambda_start: f64,
    pub lambda_end: f64,
    /// Scale applied to the fused normalized vector before the softmax.
    pub alpha: f64,
    pub total_epochs: usize,
}

impl AkfConfig {
    pub fn new(alpha: f64, total_epochs: usize) -> Self {
        AkfConfig {
            lambda_start: 0.7,
            lambda_end: 0.3,
            alpha,
            total_epochs,
        }
    }
}

impl Default for AkfConfig {
    fn default() -> Self {
        AkfConfig::new(10.0, 1)
    }
}

/// The branch weight for a given epoch: decreases uniformly from
/// `lambda_start` at epoch 0 to `lambda_end` at the last epoch.
pub fn lambda_schedule(epoch: usize, cfg: &AkfConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::contract(format!(
            "lambda_schedule: epoch {} outside schedule of {} epochs",
            epoch, cfg.total_epochs
        )));
    }
    if epoch == 0 {
        return Ok(cfg.lambda_start);
    }
    if epoch + 1 == cfg.total_epochs {
        return Ok(cfg.lambda_end);
    }
    let t = epoch as f64 / (cfg.total_epochs - 1) as f64;
    Ok((1.0 - t) * cfg.lambda_start + t * cfg.lambda_end)
}

/// Fused output of either head. `pre_softmax` feeds the cross-entropy loss;
/// `probs` is populated for AKF, whose contract output is a distribution.
pub struct FusedOutput {
    pub pre_softmax: TensorId,
    pub probs: Option<TensorId>,
}

/// Softmax of the alpha-scaled convex combination of the two L1-normalized
/// prediction vectors. Returns both the probabilities and the pre-softmax
/// tensor (the loss consumes the latter; same gradients, better stability).
pub fn akf_forward<T: Scalar>(
    cx: &mut Forward<T>,
    y_cnn: TensorId,
    y_trans: TensorId,
    lambda: f64,
    alpha: f64,
) -> FusedOutput {
    assert!((0.0..=1.0).contains(&lambda), "akf: lambda {lambda} outside [0,1]");
    assert!(alpha > 0.0, "akf: alpha {alpha} must be positive");
    let sc = cx.tape.shape(y_cnn).to_vec();
    let st = cx.tape.shape(y_trans).to_vec();
    assert_eq!(
        sc, st,
        "akf: prediction lengths disagree: {:?} vs {:?}",
        sc, st
    );
    let n_cnn = cx.tape.l1_normalize(y_cnn, L1_EPS);
    let n_trans = cx.tape.l1_normalize(y_trans, L1_EPS);
    let wc = cx.tape.mul_scalar(n_cnn, T::from_f64(lambda));
    let wt = cx.tape.mul_scalar(n_trans, T::from_f64(1.0 - lambda));
    let mix = cx.tape.add(wc, wt);
    let pre = cx.tape.mul_scalar(mix, T::from_f64(alpha));
    let axis = sc.len() - 1;
    let probs = cx.tape.softmax(pre, axis);
    FusedOutput {
        pre_softmax: pre,
        probs: Some(probs),
    }
}

/// Collaborative knowledge fusion: align both predictions to a common dim k
/// (separate weights per branch), concatenate, dropout, project to classes.
/// Returns pre-softmax logits; the softmax lives in the loss.
pub struct CkfHead {
    pub align_cnn: Linear,
    pub align_trans: Linear,
    pub dropout: Dropout,
    pub classify: Linear,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CkfConfig {
    pub k: usize,
    pub dropout_rate: f64,
    pub classes: usize,
}

impl CkfConfig {
    pub fn new(k: usize, classes: usize) -> Self {
        CkfConfig {
            k,
            dropout_rate: 0.5,
            classes,
        }
    }
}

impl CkfHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_cnn: usize,
        in_trans: usize,
        cfg: &CkfConfig,
    ) -> Self {
        let align_cnn = Linear::new(store, rng, &format!("{name}.align_cnn"), in_cnn, cfg.k, true);
        let align_trans = Linear::new(store, rng, &format!("{name}.align_trans"), in_trans, cfg.k, true);
        let classify = Linear::new(store, rng, &format!("{name}.classify"), 2 * cfg.k, cfg.classes, true);
        CkfHead {
            align_cnn,
            align_trans,
            dropout: Dropout::new(cfg.dropout_rate),
            classify,
            k: cfg.k,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, y_cnn: TensorId, y_trans: TensorId) -> FusedOutput {
        let a = self.align_cnn.forward(cx, y_cnn);
        let b = self.align_trans.forward(cx, y_trans);
        let axis = cx.tape.shape(a).len() - 1;
        let cat = cx.tape.concat(axis, &[a, b]); // cnn first, then trans
        let cat = self.dropout.forward(cx, cat);
        let logits = self.classify.forward(cx, cat);
        FusedOutput {
            pre_softmax: logits,
            probs: None,
        }
    }
}

/// Which fusion head a model variant uses.
#[derive(Clone, Debug, PartialEq)]
pub enum FusionKind {
    Akf { alpha: f64 },
    Ckf { k: usize, dropout_rate: f64 },
}

impl FusionKind {
    pub fn name(&self) -> &'static str {
        match self {
            FusionKind::Akf { .. } => "akf",
            FusionKind::Ckf { .. } => "ckf",
        }
    }
}

pub enum FusionHead {
    Akf { alpha: f64 },
    Ckf(CkfHead),
}

impl FusionHead {
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Forward<T>,
        y_cnn: TensorId,
        y_trans: TensorId,
        lambda: f64,
    ) -> FusedOutput {
        match self {
            FusionHead::Akf { alpha } => akf_forward(cx, y_cnn, y_trans, lambda, *alpha),
            FusionHead::Ckf(head) => head.forward(cx, y_cnn, y_trans),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorData;
    use rand_chacha::rand_core::SeedableRng;

    fn argmax(v: &[f64]) -> usize {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    }

    #[test]
    fn lambda_endpoints_exact() {
        let cfg = AkfConfig::new(10.0, 200);
        assert_eq!(lambda_schedule(0, &cfg).unwrap(), 0.7);
        assert_eq!(lambda_schedule(199, &cfg).unwrap(), 0.3);
    }

    #[test]
    fn lambda_midpoint_of_odd_schedule_is_half() {
        let cfg = AkfConfig::new(10.0, 101);
        assert_eq!(lambda_schedule(50, &cfg).unwrap(), 0.5);
    }

    #[test]
    fn lambda_single_epoch_is_start() {
        let cfg = AkfConfig::new(10.0, 1);
        assert_eq!(lambda_schedule(0, &cfg).unwrap(), 0.7);
    }

    #[test]
    fn lambda_monotone_and_bounded() {
        let cfg = AkfConfig::new(10.0, 37);
        let mut prev = f64::INFINITY;
        for e in 0..37 {
            let l = lambda_schedule(e, &cfg).unwrap();
            assert!((0.3..=0.7).contains(&l));
            assert!(l < prev, "schedule must strictly decrease");
            prev = l;
        }
    }

    #[test]
    fn lambda_out_of_range_is_contract_error() {
        let cfg = AkfConfig::new(10.0, 10);
        assert!(lambda_schedule(10, &cfg).is_err());
    }

    #[test]
    fn akf_boundary_argmax_follows_each_branch() {
        let mut store = ParamStore::<f64>::new();
        let cnn = vec![0.2, 3.0, -1.0, 0.5];
        let trans = vec![1.0, -2.0, 4.0, 0.1];
        for (lambda, expect) in [(1.0, argmax(&cnn)), (0.0, argmax(&trans))] {
            let mut cx = Forward::new(&mut store, false, 0);
            let c = cx.tape.leaf(TensorData::new(vec![1, 4], cnn.clone()), false);
            let t = cx.tape.leaf(TensorData::new(vec![1, 4], trans.clone()), false);
            let out = akf_forward(&mut cx, c, t, lambda, 10.0);
            let probs = cx.tape.data(out.probs.unwrap());
            assert_eq!(argmax(probs), expect, "lambda {lambda}");
        }
    }

    #[test]
    fn akf_symmetric_case_is_uniform() {
        let mut store = ParamStore::<f64>::new();
        let mut cx = Forward::new(&mut store, false, 0);
        let c = cx.tape.leaf(TensorData::new(vec![1, 2], vec![1.0, 0.0]), false);
        let t = cx.tape.leaf(TensorData::new(vec![1, 2], vec![0.0, 1.0]), false);
        let out = akf_forward(&mut cx, c, t, 0.5, 1.0);
        // fused pre-softmax is [0.5, 0.5] after L1 normalization and mixing
        let probs = cx.tape.data(out.probs.unwrap());
        assert!((probs[0] - 0.5).abs() < 1e-9);
        assert!((probs[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn akf_invariant_to_positive_rescaling() {
        let mut store = ParamStore::<f64>::new();
        let cnn = vec![0.4, -1.2, 2.2];
        let trans = vec![-0.3, 0.9, 0.8];
        let eval = |store: &mut ParamStore<f64>, c_scale: f64, t_scale: f64| {
            let mut cx = Forward::new(store, false, 0);
            let c_data: Vec<f64> = cnn.iter().map(|v| v * c_scale).collect();
            let t_data: Vec<f64> = trans.iter().map(|v| v * t_scale).collect();
            let c = cx.tape.leaf(TensorData::new(vec![1, 3], c_data), false);
            let t = cx.tape.leaf(TensorData::new(vec![1, 3], t_data), false);
            let out = akf_forward(&mut cx, c, t, 0.6, 10.0);
            cx.tape.data(out.probs.unwrap()).to_vec()
        };
        let base = eval(&mut store, 1.0, 1.0);
        for scale in [0.01, 0.5, 7.0, 100.0] {
            let a = eval(&mut store, scale, 1.0);
            let b = eval(&mut store, 1.0, scale);
            for i in 0..3 {
                assert!((a[i] - base[i]).abs() < 1e-6);
                assert!((b[i] - base[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn akf_gradients_reach_both_branches() {
        let mut store = ParamStore::<f64>::new();
        let mut cx = Forward::new(&mut store, true, 0);
        let c = cx.tape.leaf(TensorData::new(vec![1, 3], vec![0.5, -0.8, 1.3]), true);
        let t = cx.tape.leaf(TensorData::new(vec![1, 3], vec![-0.2, 0.7, 0.4]), true);
        let out = akf_forward(&mut cx, c, t, 0.5, 10.0);
        let loss = cx.tape.cross_entropy_logits(out.pre_softmax, &[2]);
        cx.tape.backward(loss);
        assert!(cx.tape.grad(c).unwrap().iter().any(|&g| g != 0.0));
        assert!(cx.tape.grad(t).unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn ckf_eval_deterministic_train_stochastic() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = CkfHead::new(&mut store, &mut rng, "ckf", 4, 4, &CkfConfig::new(16, 4));
        let c_data = TensorData::new(vec![1, 4], vec![0.3, -0.5, 0.9, 0.2]);
        let t_data = TensorData::new(vec![1, 4], vec![-0.1, 0.6, 0.5, -0.7]);
        let run = |store: &mut ParamStore<f64>, head: &CkfHead, training: bool, seed: u64| {
            let mut cx = Forward::new(store, training, seed);
            let c = cx.tape.leaf(c_data.clone(), false);
            let t = cx.tape.leaf(t_data.clone(), false);
            let out = head.forward(&mut cx, c, t);
            cx.tape.data(out.pre_softmax).to_vec()
        };
        let e1 = run(&mut store, &head, false, 0);
        let e2 = run(&mut store, &head, false, 1);
        assert_eq!(e1, e2, "eval forwards must be bit-identical");
        let t1 = run(&mut store, &head, true, 0);
        let t2 = run(&mut store, &head, true, 1);
        assert_ne!(t1, t2, "different dropout draws must differ");
    }

    #[test]
    fn ckf_concat_length_is_2k() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = CkfHead::new(&mut store, &mut rng, "ckf", 6, 6, &CkfConfig::new(256, 6));
        assert_eq!(head.classify.in_dim, 512);
    }

    #[test]
    fn ckf_zero_classify_weights_gives_uniform_softmax() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = CkfHead::new(&mut store, &mut rng, "ckf", 3, 3, &CkfConfig::new(8, 5));
        let shape = store.value(head.classify.w).shape.clone();
        store.get_mut(head.classify.w).value = TensorData::zeros(shape);
        let mut cx = Forward::new(&mut store, false, 0);
        let c = cx.tape.leaf(TensorData::new(vec![1, 3], vec![1.0, 2.0, 3.0]), false);
        let t = cx.tape.leaf(TensorData::new(vec![1, 3], vec![-1.0, 0.0, 1.0]), false);
        let out = head.forward(&mut cx, c, t);
        let probs = cx.tape.softmax(out.pre_softmax, 1);
        for &p in cx.tape.data(probs) {
            assert!((p - 0.2).abs() < 1e-9);
        }
    }

    #[test]
    fn ckf_gradients_reach_both_branches() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = CkfHead::new(&mut store, &mut rng, "ckf", 3, 3, &CkfConfig::new(8, 4));
        let mut cx = Forward::new(&mut store, false, 0);
        let c = cx.tape.leaf(TensorData::new(vec![1, 3], vec![0.5, -0.8, 1.3]), true);
        let t = cx.tape.leaf(TensorData::new(vec![1, 3], vec![-0.2, 0.7, 0.4]), true);
        let out = head.forward(&mut cx, c, t);
        let loss = cx.tape.cross_entropy_logits(out.pre_softmax, &[1]);
        cx.tape.backward(loss);
        assert!(cx.tape.grad(c).unwrap().iter().any(|&g| g != 0.0));
        assert!(cx.tape.grad(t).unwrap().iter().any(|&g| g != 0.0));
    }
}
