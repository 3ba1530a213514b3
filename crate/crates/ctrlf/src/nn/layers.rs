//! Parameterized layers shared by the convolution path and the transformer
//! module. Convolutions followed by batch norm carry no bias; linear layers
//! do.

use super::{Forward, Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, TensorData, TensorId};
use rand_chacha::ChaCha8Rng;

const TRUNC_STD: f64 = 0.02;

/// Fully connected layer, `y = x W + b`, applied over the last dim.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            vec![in_dim, out_dim],
            Init::TruncNormal { std: TRUNC_STD },
            rng,
            true,
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), vec![out_dim], Init::Zeros, rng, false));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, x: TensorId) -> TensorId {
        let shape = cx.tape.shape(x).to_vec();
        let last = *shape.last().expect("linear: scalar input");
        assert_eq!(
            last, self.in_dim,
            "linear: input dim {} does not match layer dim {}",
            last, self.in_dim
        );
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let w = cx.param(self.w);
        let flat = cx.tape.reshape(x, vec![rows, self.in_dim]);
        let mut y = cx.tape.matmul(flat, w);
        if let Some(b) = self.b {
            let b = cx.param(b);
            y = cx.tape.add_broadcast(y, b);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        cx.tape.reshape(y, out_shape)
    }
}

/// 2-D convolution; `groups == in_channels` makes it depthwise. No bias:
/// every convolution in this model is followed by a batch norm.
pub struct Conv2d {
    pub w: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Self {
        assert!(in_channels % groups == 0 && out_channels % groups == 0);
        let fan_out = kernel * kernel * out_channels / groups;
        let w = store.add(
            format!("{name}.weight"),
            vec![out_channels, in_channels / groups, kernel, kernel],
            Init::KaimingFanOut { fan_out },
            rng,
            true,
        );
        Conv2d {
            w,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, x: TensorId) -> TensorId {
        let shape = cx.tape.shape(x);
        assert_eq!(
            shape[1], self.in_channels,
            "conv2d: input channels {:?} do not match layer ({} expected)",
            shape, self.in_channels
        );
        let w = cx.param(self.w);
        cx.tape.conv2d(x, w, self.stride, self.pad, self.groups)
    }
}

/// Batch norm over [B,C,H,W] with running statistics (momentum update in
/// training, frozen in eval).
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), vec![channels], Init::Ones, rng, false);
        let beta = store.add(format!("{name}.beta"), vec![channels], Init::Zeros, rng, false);
        let running_mean = store.add_buffer(
            format!("{name}.running_mean"),
            TensorData::zeros(vec![channels]),
        );
        let running_var = store.add_buffer(
            format!("{name}.running_var"),
            TensorData::new(vec![channels], vec![T::one(); channels]),
        );
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, x: TensorId) -> TensorId {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        if cx.training {
            let (y, mean, var) = cx.tape.batch_norm_train(x, gamma, beta, self.eps);
            let shape = cx.tape.shape(x);
            let m = shape[0] * shape[2] * shape[3];
            let mom = T::from_f64(self.momentum);
            let keep = T::one() - mom;
            // unbiased variance for the running estimate
            let bessel = if m > 1 {
                T::from_usize(m) / T::from_usize(m - 1)
            } else {
                T::one()
            };
            let new_mean: Vec<T> = cx
                .buffer(self.running_mean)
                .data
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| keep * r + mom * b)
                .collect();
            let new_var: Vec<T> = cx
                .buffer(self.running_var)
                .data
                .iter()
                .zip(&var)
                .map(|(&r, &b)| keep * r + mom * b * bessel)
                .collect();
            cx.update_buffer(self.running_mean, new_mean);
            cx.update_buffer(self.running_var, new_var);
            y
        } else {
            let mean = cx.buffer(self.running_mean).data.clone();
            let var = cx.buffer(self.running_var).data.clone();
            cx.tape.batch_norm_eval(x, gamma, beta, mean, var, self.eps)
        }
    }
}

/// Layer norm over the last dim.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), vec![dim], Init::Ones, rng, false);
        let beta = store.add(format!("{name}.beta"), vec![dim], Init::Zeros, rng, false);
        LayerNorm {
            gamma,
            beta,
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, x: TensorId) -> TensorId {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        cx.tape.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Inverted dropout; identity in eval mode or at rate 0.
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0,1)");
        Dropout { rate }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, x: TensorId) -> TensorId {
        if !cx.training || self.rate == 0.0 {
            return x;
        }
        let n = cx.tape.data(x).len();
        let draws = cx.uniform_draws(n);
        cx.tape.dropout(x, self.rate, draws.into_iter())
    }
}

/// Squeeze-excitation: global pooling into a two-layer bottleneck whose
/// sigmoid output rescales each channel.
pub struct SqueezeExcitation {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
    pub squeeze: usize,
}

impl SqueezeExcitation {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        squeeze: usize,
    ) -> Self {
        let fc1 = Linear::new(store, rng, &format!("{name}.fc1"), channels, squeeze, true);
        let fc2 = Linear::new(store, rng, &format!("{name}.fc2"), squeeze, channels, true);
        SqueezeExcitation {
            fc1,
            fc2,
            channels,
            squeeze,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, x: TensorId) -> TensorId {
        let pooled = cx.tape.global_avg_pool(x); // [B,C]
        let h = self.fc1.forward(cx, pooled);
        let h = cx.tape.gelu(h);
        let h = self.fc2.forward(cx, h);
        let gate = cx.tape.sigmoid(h); // [B,C], entries in (0,1)
        cx.tape.scale_channels(x, gate)
    }
}

/// Multi-head attention with separate query and key/value token sets;
/// self-attention is the special case `queries == keys_values`.
///
/// Head dim is `floor(dim / heads)`; the output projection restores `dim`
/// when `heads * d_k != dim`. Scores are scaled by exactly `1/sqrt(d_k)`.
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub head_dim: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        let head_dim = if heads == 0 { 0 } else { dim / heads };
        if heads * head_dim == 0 {
            return Err(Error::config(format!(
                "attention '{name}': heads * head_dim is zero (dim {dim}, heads {heads})"
            )));
        }
        let inner = heads * head_dim;
        let q = Linear::new(store, rng, &format!("{name}.q"), dim, inner, true);
        let k = Linear::new(store, rng, &format!("{name}.k"), dim, inner, true);
        let v = Linear::new(store, rng, &format!("{name}.v"), dim, inner, true);
        let out = Linear::new(store, rng, &format!("{name}.out"), inner, dim, true);
        Ok(MultiHeadAttention {
            q,
            k,
            v,
            out,
            heads,
            head_dim,
            dim,
        })
    }

    /// `queries`: [B, Nq, dim], `keys_values`: [B, Nkv, dim] -> [B, Nq, dim]
    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, queries: TensorId, keys_values: TensorId) -> TensorId {
        let sq = cx.tape.shape(queries).to_vec();
        let skv = cx.tape.shape(keys_values).to_vec();
        assert!(
            sq.len() == 3 && skv.len() == 3 && sq[2] == self.dim && skv[2] == self.dim,
            "attention: token dims {:?} / {:?} do not match layer dim {}",
            sq,
            skv,
            self.dim
        );
        let (b, nq, nkv) = (sq[0], sq[1], skv[1]);
        let (h, dk) = (self.heads, self.head_dim);

        let split = |cx: &mut Forward<T>, x: TensorId, n: usize| {
            // [B,N,h*dk] -> [B*h, N, dk]
            let r = cx.tape.reshape(x, vec![b, n, h, dk]);
            let p = cx.tape.permute(r, vec![0, 2, 1, 3]);
            cx.tape.reshape(p, vec![b * h, n, dk])
        };

        let q = self.q.forward(cx, queries);
        let k = self.k.forward(cx, keys_values);
        let v = self.v.forward(cx, keys_values);
        let q = split(cx, q, nq);
        let k = split(cx, k, nkv);
        let v = split(cx, v, nkv);

        let kt = cx.tape.permute(k, vec![0, 2, 1]); // [B*h, dk, Nkv]
        let scores = cx.tape.bmm(q, kt); // [B*h, Nq, Nkv]
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());
        let scores = cx.tape.mul_scalar(scores, scale);
        let attn = cx.tape.softmax(scores, 2);
        let ctx = cx.tape.bmm(attn, v); // [B*h, Nq, dk]

        let r = cx.tape.reshape(ctx, vec![b, h, nq, dk]);
        let p = cx.tape.permute(r, vec![0, 2, 1, 3]);
        let merged = cx.tape.reshape(p, vec![b, nq, h * dk]);
        self.out.forward(cx, merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::OpKind;
    use rand_chacha::rand_core::SeedableRng;

    fn setup() -> (ParamStore<f64>, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(0))
    }

    fn set_value(store: &mut ParamStore<f64>, id: ParamId, data: Vec<f64>) {
        let shape = store.value(id).shape.clone();
        store.get_mut(id).value = TensorData::new(shape, data);
    }

    #[test]
    fn conv_identity_1x1_preserves_input() {
        let (mut store, mut rng) = setup();
        let conv = Conv2d::new(&mut store, &mut rng, "c", 8, 8, 1, 1, 0, 1);
        let mut w = vec![0.0; 64];
        for c in 0..8 {
            w[c * 8 + c] = 1.0;
        }
        set_value(&mut store, conv.w, w);
        let x = TensorData::new(vec![1, 8, 3, 3], (0..72).map(|i| i as f64 * 0.1).collect());
        let mut cx = Forward::new(&mut store, false, 0);
        let xid = cx.tape.leaf(x.clone(), false);
        let y = conv.forward(&mut cx, xid);
        assert_eq!(cx.tape.data(y), &x.data[..]);
    }

    #[test]
    fn depthwise_stride2_halves_56() {
        let (mut store, mut rng) = setup();
        let conv = Conv2d::new(&mut store, &mut rng, "dw", 4, 4, 3, 2, 1, 4);
        let mut cx = Forward::new(&mut store, false, 0);
        let x = cx.tape.leaf(TensorData::zeros(vec![1, 4, 56, 56]), false);
        let y = conv.forward(&mut cx, x);
        assert_eq!(cx.tape.shape(y), &[1, 4, 28, 28]);
    }

    #[test]
    #[should_panic(expected = "input channels")]
    fn conv_channel_mismatch_panics() {
        let (mut store, mut rng) = setup();
        let conv = Conv2d::new(&mut store, &mut rng, "c", 8, 8, 1, 1, 0, 1);
        let mut cx = Forward::new(&mut store, false, 0);
        let x = cx.tape.leaf(TensorData::zeros(vec![1, 4, 3, 3]), false);
        conv.forward(&mut cx, x);
    }

    #[test]
    fn se_zero_weights_halves_input() {
        let (mut store, mut rng) = setup();
        let se = SqueezeExcitation::new(&mut store, &mut rng, "se", 2, 8);
        for id in [se.fc1.w, se.fc2.w] {
            let n = store.value(id).numel();
            set_value(&mut store, id, vec![0.0; n]);
        }
        let x = TensorData::new(vec![1, 2, 2, 2], (1..=8).map(|i| i as f64).collect());
        let mut cx = Forward::new(&mut store, false, 0);
        let xid = cx.tape.leaf(x.clone(), false);
        let y = se.forward(&mut cx, xid);
        for (o, i) in cx.tape.data(y).iter().zip(&x.data) {
            assert!((o - 0.5 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn se_gate_uniform_over_space_and_in_unit_interval() {
        let (mut store, mut rng) = setup();
        let se = SqueezeExcitation::new(&mut store, &mut rng, "se", 3, 8);
        // constant per channel input: output / input must be spatially constant
        let mut data = Vec::new();
        for c in 0..3 {
            data.extend(std::iter::repeat(1.0 + c as f64).take(16));
        }
        let x = TensorData::new(vec![1, 3, 4, 4], data.clone());
        let mut cx = Forward::new(&mut store, false, 0);
        let xid = cx.tape.leaf(x, false);
        let y = se.forward(&mut cx, xid);
        let out = cx.tape.data(y);
        for c in 0..3 {
            let base = out[c * 16] / data[c * 16];
            assert!(base > 0.0 && base < 1.0, "gate {base} outside (0,1)");
            for s in 0..16 {
                let r = out[c * 16 + s] / data[c * 16 + s];
                assert!((r - base).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_identical_keys_returns_common_value_row() {
        let (mut store, mut rng) = setup();
        let d = 4;
        let attn = MultiHeadAttention::new(&mut store, &mut rng, "a", d, 1).unwrap();
        // V and out as identity so the output is literally the value row
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        set_value(&mut store, attn.v.w, eye.clone());
        set_value(&mut store, attn.out.w, eye);
        let common = [0.3, -0.7, 1.1, 0.4];
        let mut kv_data = Vec::new();
        for _ in 0..5 {
            kv_data.extend_from_slice(&common);
        }
        let mut cx = Forward::new(&mut store, false, 0);
        let q = cx.tape.leaf(TensorData::new(vec![1, 1, d], vec![2.0, -1.0, 0.5, 0.1]), false);
        let kv = cx.tape.leaf(TensorData::new(vec![1, 5, d], kv_data), false);
        let y = attn.forward(&mut cx, q, kv);
        for (o, c) in cx.tape.data(y).iter().zip(&common) {
            assert!((o - c).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (mut store, mut rng) = setup();
        let attn = MultiHeadAttention::new(&mut store, &mut rng, "a", 16, 4).unwrap();
        let mut cx = Forward::new(&mut store, false, 0);
        let toks: Vec<f64> = (0..2 * 6 * 16).map(|i| ((i * 13 % 7) as f64) * 0.3 - 1.0).collect();
        let x = cx.tape.leaf(TensorData::new(vec![2, 6, 16], toks), false);
        let _ = attn.forward(&mut cx, x, x);
        let mut found = false;
        for rec in cx.tape.records() {
            if rec.kind == OpKind::Softmax {
                found = true;
                let shape = rec.shape.to_vec();
                let n = *shape.last().unwrap();
                let data = cx.tape.data(rec.id);
                for row in data.chunks(n) {
                    let s: f64 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-6, "attention row sums to {s}");
                }
            }
        }
        assert!(found, "no softmax recorded");
    }

    #[test]
    fn attention_output_shape_with_uneven_head_split() {
        // 1 query over 50 tokens, dim 128, 6 heads -> d_k 21, inner 126,
        // out projection restores 128
        let (mut store, mut rng) = setup();
        let attn = MultiHeadAttention::new(&mut store, &mut rng, "a", 128, 6).unwrap();
        assert_eq!(attn.head_dim, 21);
        let mut cx = Forward::new(&mut store, false, 0);
        let q = cx.tape.leaf(TensorData::zeros(vec![1, 1, 128]), false);
        let kv = cx.tape.leaf(TensorData::zeros(vec![1, 50, 128]), false);
        let y = attn.forward(&mut cx, q, kv);
        assert_eq!(cx.tape.shape(y), &[1, 1, 128]);
    }

    #[test]
    fn attention_zero_query_weights_is_uniform_mean_of_values() {
        let (mut store, mut rng) = setup();
        let d = 3;
        let attn = MultiHeadAttention::new(&mut store, &mut rng, "a", d, 1).unwrap();
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        set_value(&mut store, attn.q.w, vec![0.0; d * d]);
        set_value(&mut store, attn.k.w, vec![0.0; d * d]);
        set_value(&mut store, attn.v.w, eye.clone());
        set_value(&mut store, attn.out.w, eye);
        let rows = [1.0, 2.0, 3.0, -1.0, 0.0, 1.0, 4.0, 4.0, -2.0];
        let mut cx = Forward::new(&mut store, false, 0);
        let x = cx.tape.leaf(TensorData::new(vec![1, 3, 3], rows.to_vec()), false);
        let y = attn.forward(&mut cx, x, x);
        let mean = [(1.0 - 1.0 + 4.0) / 3.0, (2.0 + 0.0 + 4.0) / 3.0, (3.0 + 1.0 - 2.0) / 3.0];
        for row in cx.tape.data(y).chunks(3) {
            for (o, m) in row.iter().zip(&mean) {
                assert!((o - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rejects_zero_head_dim() {
        let (mut store, mut rng) = setup();
        assert!(MultiHeadAttention::new(&mut store, &mut rng, "a", 4, 8).is_err());
        let (mut store, mut rng) = setup();
        assert!(MultiHeadAttention::new(&mut store, &mut rng, "b", 4, 0).is_err());
    }

    #[test]
    fn dropout_eval_is_identity_train_scales() {
        let (mut store, _) = setup();
        let drop = Dropout::new(0.5);
        let x = TensorData::new(vec![1, 64], (0..64).map(|i| i as f64 + 1.0).collect());

        let mut cx = Forward::new(&mut store, false, 1);
        let xid = cx.tape.leaf(x.clone(), false);
        let y = drop.forward(&mut cx, xid);
        assert_eq!(y, xid, "eval-mode dropout must be the identity");

        let out = {
            let mut cx = Forward::new(&mut store, true, 1);
            let xid = cx.tape.leaf(x.clone(), false);
            let y = drop.forward(&mut cx, xid);
            cx.tape.data(y).to_vec()
        };
        let kept = out.iter().filter(|v| **v != 0.0).count();
        assert!(kept > 0 && kept < 64, "mask should be nontrivial, kept {kept}");
        for (o, i) in out.iter().zip(&x.data) {
            assert!(*o == 0.0 || (*o - 2.0 * i).abs() < 1e-12);
        }

        // same pass seed -> identical mask
        let mut cx2 = Forward::new(&mut store, true, 1);
        let xid2 = cx2.tape.leaf(x, false);
        let y2 = drop.forward(&mut cx2, xid2);
        assert_eq!(out, cx2.tape.data(y2));
    }

    #[test]
    fn batch_norm_running_stats_update_only_in_training() {
        let (mut store, mut rng) = setup();
        let bn = BatchNorm2d::new(&mut store, &mut rng, "bn", 2);
        let x = TensorData::new(vec![2, 2, 2, 2], (0..16).map(|i| i as f64 * 0.5).collect());

        let before = store.value(bn.running_mean).data.clone();
        {
            let mut cx = Forward::new(&mut store, false, 0);
            let xid = cx.tape.leaf(x.clone(), false);
            bn.forward(&mut cx, xid);
        }
        assert_eq!(store.value(bn.running_mean).data, before, "eval must not touch stats");

        {
            let mut cx = Forward::new(&mut store, true, 0);
            let xid = cx.tape.leaf(x, false);
            bn.forward(&mut cx, xid);
        }
        assert_ne!(store.value(bn.running_mean).data, before, "training must update stats");
    }

    #[test]
    fn linear_bias_and_shape() {
        let (mut store, mut rng) = setup();
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 2, true);
        set_value(&mut store, lin.w, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        set_value(&mut store, lin.b.unwrap(), vec![0.5, -0.5]);
        let mut cx = Forward::new(&mut store, false, 0);
        let x = cx.tape.leaf(TensorData::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let y = lin.forward(&mut cx, x);
        assert_eq!(cx.tape.shape(y), &[2, 1, 2]);
        assert_eq!(cx.tape.data(y), &[1.5, 1.5, 4.5, 4.5]);
    }
}
