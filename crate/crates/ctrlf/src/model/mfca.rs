//! Multi-level Feature Cross-Attention: two transformer branches over the
//! S2/S4 feature taps, exchanged through CLS-query cross-attention.
//!
//! The small branch reads the late, low-resolution features (S4) with a
//! small patch; the large branch reads the intermediate features (S2) with
//! a larger patch. Both encoder stacks run in full first; the L exchange
//! rounds follow.

use crate::error::{Error, Result};
use crate::nn::layers::{LayerNorm, Linear, MultiHeadAttention};
use crate::nn::{Forward, Init, ParamId, ParamStore};
use crate::tensor::{Scalar, TensorId};
use rand_chacha::ChaCha8Rng;

/// Architectural hyperparameters of the MFCA module.
#[derive(Clone, Debug, PartialEq)]
pub struct MfcaConfig {
    /// Patch size on the S4 features (small branch).
    pub patch_small: usize,
    /// Patch size on the S2 features (large branch).
    pub patch_large: usize,
    pub dim_small: usize,
    pub dim_large: usize,
    /// Encoder blocks in the small branch (M).
    pub depth_small: usize,
    /// Encoder blocks in the large branch (N).
    pub depth_large: usize,
    /// Cross-attention exchange rounds (L).
    pub rounds: usize,
    /// Heads, shared by encoders and cross-attention blocks.
    pub heads: usize,
    pub ffn_ratio_small: usize,
    pub ffn_ratio_large: usize,
    /// Layer-normalize each branch CLS before its class projection.
    pub head_layernorm: bool,
}

/// CLS token plus patch tokens for one branch, kept as a single
/// [B, 1+N, D] tensor with the CLS in row 0.
#[derive(Clone, Copy, Debug)]
pub struct TokenSet {
    pub tokens: TensorId,
    pub n_patches: usize,
    pub dim: usize,
}

impl TokenSet {
    pub fn cls<T: Scalar>(&self, cx: &mut Forward<T>) -> TensorId {
        cx.tape.slice(self.tokens, 1, 0, 1)
    }

    pub fn patches<T: Scalar>(&self, cx: &mut Forward<T>) -> TensorId {
        cx.tape.slice(self.tokens, 1, 1, self.n_patches)
    }
}

/// Non-overlapping patch embedding with a learnable CLS token and learnable
/// positional table, added once at embedding time.
pub struct PatchEmbed {
    pub proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub patch: usize,
    pub n_patches: usize,
    pub dim: usize,
    pub in_channels: usize,
    pub side: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        side: usize,
        in_channels: usize,
        patch: usize,
        dim: usize,
    ) -> Result<Self> {
        if patch == 0 || side % patch != 0 {
            return Err(Error::config(format!(
                "patch size {} does not divide the {}x{} feature side; valid sizes: {:?}",
                patch,
                side,
                side,
                divisors(side)
            )));
        }
        let n_patches = (side / patch) * (side / patch);
        let proj = Linear::new(
            store,
            rng,
            &format!("{name}.proj"),
            patch * patch * in_channels,
            dim,
            true,
        );
        let cls = store.add(
            format!("{name}.cls"),
            vec![1, 1, dim],
            Init::TruncNormal { std: 0.02 },
            rng,
            false,
        );
        let pos = store.add(
            format!("{name}.pos"),
            vec![n_patches + 1, dim],
            Init::TruncNormal { std: 0.02 },
            rng,
            false,
        );
        Ok(PatchEmbed {
            proj,
            cls,
            pos,
            patch,
            n_patches,
            dim,
            in_channels,
            side,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, features: TensorId) -> TokenSet {
        let shape = cx.tape.shape(features).to_vec();
        assert_eq!(
            &shape[1..],
            &[self.in_channels, self.side, self.side],
            "patch_embed: feature shape {:?} does not match ({}, {}, {})",
            shape,
            self.in_channels,
            self.side,
            self.side
        );
        let b = shape[0];
        let (c, p) = (self.in_channels, self.patch);
        let grid = self.side / p;
        // [B,C,H,W] -> [B, grid, grid, C, p, p] -> [B, N, p*p*C]
        let r = cx.tape.reshape(features, vec![b, c, grid, p, grid, p]);
        let perm = cx.tape.permute(r, vec![0, 2, 4, 1, 3, 5]);
        let flat = cx.tape.reshape(perm, vec![b, grid * grid, c * p * p]);
        let projected = cx.tape.reshape(flat, vec![b * grid * grid, c * p * p]);
        let projected = {
            let y = self.proj.forward(cx, projected);
            cx.tape.reshape(y, vec![b, grid * grid, self.dim])
        };
        let cls = cx.param(self.cls);
        let cls = cx.tape.expand_leading(cls, b);
        let tokens = cx.tape.concat(1, &[cls, projected]);
        let pos = cx.param(self.pos);
        let tokens = cx.tape.add_broadcast(tokens, pos);
        TokenSet {
            tokens,
            n_patches: self.n_patches,
            dim: self.dim,
        }
    }
}

pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// Pre-norm transformer encoder block: MSA then FFN, each with a residual.
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_ratio: usize,
    ) -> Result<Self> {
        let ln1 = LayerNorm::new(store, rng, &format!("{name}.ln1"), dim);
        let attn = MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?;
        let ln2 = LayerNorm::new(store, rng, &format!("{name}.ln2"), dim);
        let fc1 = Linear::new(store, rng, &format!("{name}.ffn1"), dim, dim * ffn_ratio, true);
        let fc2 = Linear::new(store, rng, &format!("{name}.ffn2"), dim * ffn_ratio, dim, true);
        Ok(EncoderBlock {
            ln1,
            attn,
            ln2,
            fc1,
            fc2,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, x: TensorId) -> TensorId {
        let h = self.ln1.forward(cx, x);
        let a = self.attn.forward(cx, h, h);
        let x = cx.tape.add(a, x);
        let h = self.ln2.forward(cx, x);
        let f = self.fc1.forward(cx, h);
        let f = cx.tape.gelu(f);
        let f = self.fc2.forward(cx, f);
        cx.tape.add(f, x)
    }
}

/// One direction of the exchange: the `from` branch's CLS is aligned to the
/// `to` branch's dim, queries the fused token set, and is projected back.
/// Patch tokens of both branches pass through untouched.
struct ExchangeDirection {
    align: Linear,
    ln: LayerNorm,
    mca: MultiHeadAttention,
    back: Linear,
}

impl ExchangeDirection {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim_from: usize,
        dim_to: usize,
        heads: usize,
    ) -> Result<Self> {
        let align = Linear::new(store, rng, &format!("{name}.align"), dim_from, dim_to, true);
        let ln = LayerNorm::new(store, rng, &format!("{name}.ln"), dim_to);
        let mca = MultiHeadAttention::new(store, rng, &format!("{name}.mca"), dim_to, heads)?;
        let back = Linear::new(store, rng, &format!("{name}.back"), dim_to, dim_from, true);
        Ok(ExchangeDirection {
            align,
            ln,
            mca,
            back,
        })
    }

    /// Returns the updated `from` token set; reads `other` without change.
    fn forward<T: Scalar>(&self, cx: &mut Forward<T>, from: &TokenSet, other: &TokenSet) -> TokenSet {
        let cls = from.cls(cx); // [B,1,D_from]
        let aligned = self.align.forward(cx, cls);
        let aligned = self.ln.forward(cx, aligned); // [B,1,D_to]
        let other_patches = other.patches(cx); // [B,N_other,D_to]
        let fused = cx.tape.concat(1, &[aligned, other_patches]);
        let attended = self.mca.forward(cx, aligned, fused); // [B,1,D_to]
        let residual = cx.tape.add(attended, aligned);
        let new_cls = self.back.forward(cx, residual); // [B,1,D_from]
        let from_patches = from.patches(cx);
        let tokens = cx.tape.concat(1, &[new_cls, from_patches]);
        TokenSet {
            tokens,
            n_patches: from.n_patches,
            dim: from.dim,
        }
    }
}

/// One exchange round: both directions computed from the pre-round state.
pub struct CrossAttentionExchange {
    large_dir: ExchangeDirection,
    small_dir: ExchangeDirection,
}

impl CrossAttentionExchange {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim_large: usize,
        dim_small: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(CrossAttentionExchange {
            large_dir: ExchangeDirection::new(
                store,
                rng,
                &format!("{name}.l2s"),
                dim_large,
                dim_small,
                heads,
            )?,
            small_dir: ExchangeDirection::new(
                store,
                rng,
                &format!("{name}.s2l"),
                dim_small,
                dim_large,
                heads,
            )?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Forward<T>,
        large: &TokenSet,
        small: &TokenSet,
    ) -> (TokenSet, TokenSet) {
        let new_large = self.large_dir.forward(cx, large, small);
        let new_small = self.small_dir.forward(cx, small, large);
        (new_large, new_small)
    }
}

pub struct Mfca {
    pub cfg: MfcaConfig,
    pub embed_small: PatchEmbed,
    pub embed_large: PatchEmbed,
    pub encoders_small: Vec<EncoderBlock>,
    pub encoders_large: Vec<EncoderBlock>,
    pub exchanges: Vec<CrossAttentionExchange>,
    head_ln_small: Option<LayerNorm>,
    head_ln_large: Option<LayerNorm>,
    pub head_small: Linear,
    pub head_large: Linear,
    pub classes: usize,
}

impl Mfca {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &MfcaConfig,
        s2_side: usize,
        s2_channels: usize,
        s4_side: usize,
        s4_channels: usize,
        classes: usize,
    ) -> Result<Self> {
        let embed_large = PatchEmbed::new(
            store,
            rng,
            &format!("{name}.large.embed"),
            s2_side,
            s2_channels,
            cfg.patch_large,
            cfg.dim_large,
        )?;
        let embed_small = PatchEmbed::new(
            store,
            rng,
            &format!("{name}.small.embed"),
            s4_side,
            s4_channels,
            cfg.patch_small,
            cfg.dim_small,
        )?;
        let mut encoders_small = Vec::new();
        for i in 0..cfg.depth_small {
            encoders_small.push(EncoderBlock::new(
                store,
                rng,
                &format!("{name}.small.enc{i}"),
                cfg.dim_small,
                cfg.heads,
                cfg.ffn_ratio_small,
            )?);
        }
        let mut encoders_large = Vec::new();
        for i in 0..cfg.depth_large {
            encoders_large.push(EncoderBlock::new(
                store,
                rng,
                &format!("{name}.large.enc{i}"),
                cfg.dim_large,
                cfg.heads,
                cfg.ffn_ratio_large,
            )?);
        }
        let mut exchanges = Vec::new();
        for i in 0..cfg.rounds {
            exchanges.push(CrossAttentionExchange::new(
                store,
                rng,
                &format!("{name}.xattn{i}"),
                cfg.dim_large,
                cfg.dim_small,
                cfg.heads,
            )?);
        }
        let head_ln_small = cfg
            .head_layernorm
            .then(|| LayerNorm::new(store, rng, &format!("{name}.head.small_ln"), cfg.dim_small));
        let head_ln_large = cfg
            .head_layernorm
            .then(|| LayerNorm::new(store, rng, &format!("{name}.head.large_ln"), cfg.dim_large));
        let head_small = Linear::new(store, rng, &format!("{name}.head.small"), cfg.dim_small, classes, true);
        let head_large = Linear::new(store, rng, &format!("{name}.head.large"), cfg.dim_large, classes, true);
        Ok(Mfca {
            cfg: cfg.clone(),
            embed_small,
            embed_large,
            encoders_small,
            encoders_large,
            exchanges,
            head_ln_small,
            head_ln_large,
            head_small,
            head_large,
            classes,
        })
    }

    /// Full module: embed, encode each branch, exchange L times, then sum
    /// the per-branch class projections of the final CLS tokens.
    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, s2: TensorId, s4: TensorId) -> TensorId {
        let (large, small) = self.forward_tokens(cx, s2, s4);
        self.classify(cx, &large, &small)
    }

    /// Token-level forward, exposed for structural tests.
    pub fn forward_tokens<T: Scalar>(
        &self,
        cx: &mut Forward<T>,
        s2: TensorId,
        s4: TensorId,
    ) -> (TokenSet, TokenSet) {
        let mut large = self.embed_large.forward(cx, s2);
        let mut small = self.embed_small.forward(cx, s4);
        for enc in &self.encoders_large {
            large.tokens = enc.forward(cx, large.tokens);
        }
        for enc in &self.encoders_small {
            small.tokens = enc.forward(cx, small.tokens);
        }
        for ex in &self.exchanges {
            let (l, s) = ex.forward(cx, &large, &small);
            large = l;
            small = s;
        }
        (large, small)
    }

    pub fn classify<T: Scalar>(&self, cx: &mut Forward<T>, large: &TokenSet, small: &TokenSet) -> TensorId {
        let b = cx.tape.shape(large.tokens)[0];
        let mut cls_l = large.cls(cx);
        let mut cls_s = small.cls(cx);
        if let Some(ln) = &self.head_ln_large {
            cls_l = ln.forward(cx, cls_l);
        }
        if let Some(ln) = &self.head_ln_small {
            cls_s = ln.forward(cx, cls_s);
        }
        let cls_l = cx.tape.reshape(cls_l, vec![b, self.cfg.dim_large]);
        let cls_s = cx.tape.reshape(cls_s, vec![b, self.cfg.dim_small]);
        let yl = self.head_large.forward(cx, cls_l);
        let ys = self.head_small.forward(cx, cls_s);
        cx.tape.add(yl, ys)
    }
}
