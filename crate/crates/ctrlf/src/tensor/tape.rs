//! The computation record: forward ops append nodes, `backward` replays them
//! in reverse. Node inputs always precede the node itself, so one reverse
//! sweep visits every node exactly once.

use super::kernels::{self, ConvGeom};
use super::{Scalar, TensorData};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    AddBroadcast,
    Sub,
    Mul,
    AddScalar,
    MulScalar,
    Matmul,
    Bmm,
    Reshape,
    Permute,
    Concat,
    Slice,
    ExpandLeading,
    SumAll,
    MeanAll,
    SumAxis,
    MeanAxis,
    Sqrt,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Gelu,
    Softmax,
    LayerNorm,
    BatchNormTrain,
    BatchNormEval,
    Conv2d,
    GlobalAvgPool,
    ScaleChannels,
    Dropout,
    CrossEntropy,
    L1Normalize,
}

enum Op<T> {
    Leaf {
        name: Option<String>,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    /// `b`'s shape is a suffix of `a`'s shape; `b` is tiled over the leading dims.
    AddBroadcast {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    AddScalar {
        a: TensorId,
    },
    MulScalar {
        a: TensorId,
        s: T,
    },
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Bmm {
        a: TensorId,
        b: TensorId,
    },
    Reshape {
        a: TensorId,
    },
    Permute {
        a: TensorId,
        axes: Vec<usize>,
    },
    Concat {
        axis: usize,
        parts: Vec<TensorId>,
    },
    Slice {
        a: TensorId,
        axis: usize,
        start: usize,
    },
    ExpandLeading {
        a: TensorId,
    },
    SumAll {
        a: TensorId,
    },
    MeanAll {
        a: TensorId,
    },
    SumAxis {
        a: TensorId,
        axis: usize,
    },
    MeanAxis {
        a: TensorId,
        axis: usize,
    },
    Sqrt {
        a: TensorId,
    },
    Exp {
        a: TensorId,
    },
    Log {
        a: TensorId,
    },
    Sigmoid {
        a: TensorId,
    },
    Tanh {
        a: TensorId,
    },
    Gelu {
        a: TensorId,
    },
    Softmax {
        a: TensorId,
        axis: usize,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    BatchNormTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        mean: Vec<T>,
        var: Vec<T>,
    },
    BatchNormEval {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        mean: Vec<T>,
        var: Vec<T>,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        geom: ConvGeom,
    },
    GlobalAvgPool {
        x: TensorId,
    },
    ScaleChannels {
        x: TensorId,
        gate: TensorId,
    },
    Dropout {
        x: TensorId,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
    },
    L1Normalize {
        x: TensorId,
        eps: f64,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf { .. } => OpKind::Leaf,
            Op::Add { .. } => OpKind::Add,
            Op::AddBroadcast { .. } => OpKind::AddBroadcast,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::MulScalar { .. } => OpKind::MulScalar,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Bmm { .. } => OpKind::Bmm,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::ExpandLeading { .. } => OpKind::ExpandLeading,
            Op::SumAll { .. } => OpKind::SumAll,
            Op::MeanAll { .. } => OpKind::MeanAll,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::Sqrt { .. } => OpKind::Sqrt,
            Op::Exp { .. } => OpKind::Exp,
            Op::Log { .. } => OpKind::Log,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Tanh { .. } => OpKind::Tanh,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::BatchNormTrain { .. } => OpKind::BatchNormTrain,
            Op::BatchNormEval { .. } => OpKind::BatchNormEval,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::ScaleChannels { .. } => OpKind::ScaleChannels,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::L1Normalize { .. } => OpKind::L1Normalize,
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// One entry of the computation record, exposed for structural tests.
pub struct Record<'a> {
    pub id: TensorId,
    pub kind: OpKind,
    pub shape: &'a [usize],
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: TensorId) -> TensorData<T> {
        TensorData::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.rg(id)
    }

    pub fn op_kind(&self, id: TensorId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Ordered view of the record for structural assertions.
    pub fn records(&self) -> impl Iterator<Item = Record<'_>> {
        self.nodes.iter().enumerate().map(|(i, n)| Record {
            id: TensorId(i),
            kind: n.op.kind(),
            shape: &n.shape,
        })
    }

    /// Input ids of the op that produced `id` (empty for leaves).
    pub fn op_inputs(&self, id: TensorId) -> Vec<TensorId> {
        match &self.nodes[id.0].op {
            Op::Leaf { .. } => vec![],
            Op::Add { a, b }
            | Op::AddBroadcast { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Matmul { a, b }
            | Op::Bmm { a, b } => vec![*a, *b],
            Op::AddScalar { a }
            | Op::MulScalar { a, .. }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Slice { a, .. }
            | Op::ExpandLeading { a }
            | Op::SumAll { a }
            | Op::MeanAll { a }
            | Op::SumAxis { a, .. }
            | Op::MeanAxis { a, .. }
            | Op::Sqrt { a }
            | Op::Exp { a }
            | Op::Log { a }
            | Op::Sigmoid { a }
            | Op::Tanh { a }
            | Op::Gelu { a }
            | Op::Softmax { a, .. } => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::BatchNormTrain { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::GlobalAvgPool { x } => vec![*x],
            Op::ScaleChannels { x, gate } => vec![*x, *gate],
            Op::Dropout { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::L1Normalize { x, .. } => vec![*x],
        }
    }

    /// Name of the first tensor containing a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<(TensorId, String)> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.data.iter().any(|v| !v.is_finite()) {
                let desc = match &n.op {
                    Op::Leaf { name: Some(name) } => format!("leaf '{}'", name),
                    op => format!("{:?} output (node {})", op.kind(), i),
                };
                return Some((TensorId(i), desc));
            }
        }
        None
    }

    // ── leaves ──────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: TensorData<T>, requires_grad: bool) -> TensorId {
        self.push(value.shape, value.data, requires_grad, Op::Leaf { name: None })
    }

    pub fn named_leaf(&mut self, value: TensorData<T>, requires_grad: bool, name: &str) -> TensorId {
        self.push(
            value.shape,
            value.data,
            requires_grad,
            Op::Leaf {
                name: Some(name.to_string()),
            },
        )
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "add: shapes disagree: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), data, rg, Op::Add { a, b })
    }

    /// Adds `b` tiled along the leading dims of `a`; `b.shape` must be a
    /// suffix of `a.shape`.
    pub fn add_broadcast(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() >= sb.len() && sa[sa.len() - sb.len()..] == sb[..],
            "add_broadcast: {:?} is not a suffix of {:?}",
            sb,
            sa
        );
        let nb = self.data(b).len().max(1);
        let data: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + self.data(b)[i % nb])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(sa, data, rg, Op::AddBroadcast { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "sub: shapes disagree: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), data, rg, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "mul: shapes disagree: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), data, rg, Op::Mul { a, b })
    }

    pub fn add_scalar(&mut self, a: TensorId, s: T) -> TensorId {
        let data: Vec<T> = self.data(a).iter().map(|&x| x + s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: TensorId, s: T) -> TensorId {
        let data: Vec<T> = self.data(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::MulScalar { a, s })
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes: {:?} vs {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::mm_nn(self.data(a), self.data(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], out, rg, Op::Matmul { a, b })
    }

    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            "bmm: incompatible shapes: {:?} vs {:?}",
            sa,
            sb
        );
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bt * m * n];
        for i in 0..bt {
            kernels::mm_nn(
                &self.data(a)[i * m * k..(i + 1) * m * k],
                &self.data(b)[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![bt, m, n], out, rg, Op::Bmm { a, b })
    }

    // ── shape ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data(a).len(),
            "reshape: element count mismatch: {:?} -> {:?}",
            self.shape(a),
            shape
        );
        let data = self.data(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, data, rg, Op::Reshape { a })
    }

    pub fn permute(&mut self, a: TensorId, axes: Vec<usize>) -> TensorId {
        let sa = self.shape(a).to_vec();
        assert_eq!(axes.len(), sa.len(), "permute: axes {:?} vs shape {:?}", axes, sa);
        let mut seen = vec![false; axes.len()];
        for &ax in &axes {
            assert!(ax < sa.len() && !seen[ax], "permute: invalid axes {:?}", axes);
            seen[ax] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| sa[ax]).collect();
        let data = permute_copy(self.data(a), &sa, &axes);
        let rg = self.rg(a);
        self.push(out_shape, data, rg, Op::Permute { a, axes })
    }

    /// 2-D transpose, a special case of [`Tape::permute`].
    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        assert_eq!(self.shape(a).len(), 2, "transpose: expected rank 2, got {:?}", self.shape(a));
        self.permute(a, vec![1, 0])
    }

    pub fn concat(&mut self, axis: usize, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat: no inputs");
        let first = self.shape(parts[0]).to_vec();
        assert!(axis < first.len(), "concat: axis {} out of range for {:?}", axis, first);
        let mut axis_total = 0;
        for &p in parts {
            let sp = self.shape(p);
            assert_eq!(sp.len(), first.len(), "concat: rank mismatch {:?} vs {:?}", sp, first);
            for (d, (&x, &y)) in sp.iter().zip(&first).enumerate() {
                assert!(
                    d == axis || x == y,
                    "concat: shapes {:?} vs {:?} differ outside axis {}",
                    sp,
                    first,
                    axis
                );
            }
            axis_total += sp[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = vec![T::zero(); out_shape.iter().product()];
        let mut offset = 0;
        for &p in parts {
            let ap = self.shape(p)[axis];
            let src = self.data(p);
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * ap * inner;
                data[dst_start..dst_start + ap * inner]
                    .copy_from_slice(&src[src_start..src_start + ap * inner]);
            }
            offset += ap;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            out_shape,
            data,
            rg,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
        )
    }

    pub fn slice(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> TensorId {
        let sa = self.shape(a).to_vec();
        assert!(
            axis < sa.len() && start + len <= sa[axis],
            "slice: [{}, {}) on axis {} out of range for {:?}",
            start,
            start + len,
            axis,
            sa
        );
        let (outer, ax, inner) = axis_split(&sa, axis);
        let mut out_shape = sa.clone();
        out_shape[axis] = len;
        let mut data = vec![T::zero(); outer * len * inner];
        let src = self.data(a);
        for o in 0..outer {
            let s = (o * ax + start) * inner;
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(&src[s..s + len * inner]);
        }
        let rg = self.rg(a);
        self.push(out_shape, data, rg, Op::Slice { a, axis, start })
    }

    /// Tiles a tensor with leading dim 1 up to leading dim `n`.
    pub fn expand_leading(&mut self, a: TensorId, n: usize) -> TensorId {
        let sa = self.shape(a).to_vec();
        assert!(
            !sa.is_empty() && sa[0] == 1,
            "expand_leading: leading dim must be 1, got {:?}",
            sa
        );
        let mut out_shape = sa.clone();
        out_shape[0] = n;
        let src = self.data(a);
        let mut data = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let rg = self.rg(a);
        self.push(out_shape, data, rg, Op::ExpandLeading { a })
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: T = self.data(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], rg, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = T::from_usize(self.data(a).len());
        let s: T = self.data(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s / n], rg, Op::MeanAll { a })
    }

    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> TensorId {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> TensorId {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: TensorId, axis: usize, mean: bool) -> TensorId {
        let sa = self.shape(a).to_vec();
        assert!(axis < sa.len(), "reduce: axis {} out of range for {:?}", axis, sa);
        let (outer, ax, inner) = axis_split(&sa, axis);
        let mut out_shape: Vec<usize> = sa.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let denom = if mean { T::from_usize(ax) } else { T::one() };
        let src = self.data(a);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..ax {
                let base = (o * ax + j) * inner;
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + src[base + i];
                }
            }
        }
        if mean {
            for v in data.iter_mut() {
                *v = *v / denom;
            }
        }
        let rg = self.rg(a);
        let op = if mean {
            Op::MeanAxis { a, axis }
        } else {
            Op::SumAxis { a, axis }
        };
        self.push(out_shape, data, rg, op)
    }

    // ── pointwise nonlinearities ────────────────────────────────────

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let data: Vec<T> = self.data(a).iter().map(|&x| x.sqrt()).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Sqrt { a })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let data: Vec<T> = self.data(a).iter().map(|&x| x.exp()).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Exp { a })
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        let data: Vec<T> = self.data(a).iter().map(|&x| x.ln()).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Log { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data: Vec<T> = self.data(a).iter().map(|&x| stable_sigmoid(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let data: Vec<T> = self.data(a).iter().map(|&x| x.tanh()).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Tanh { a })
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<T> = self.data(a).iter().map(|&x| gelu_tanh(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Gelu { a })
    }

    // ── structured ops ──────────────────────────────────────────────

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> TensorId {
        let sa = self.shape(a).to_vec();
        assert!(axis < sa.len(), "softmax: axis {} out of range for {:?}", axis, sa);
        let (outer, ax, inner) = axis_split(&sa, axis);
        let src = self.data(a);
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * ax + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..ax {
                    mx = mx.max(src[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..ax {
                    let e = (src[at(j)] - mx).exp();
                    data[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..ax {
                    data[at(j)] = data[at(j)] / sum;
                }
            }
        }
        let rg = self.rg(a);
        self.push(sa, data, rg, Op::Softmax { a, axis })
    }

    /// Layer normalization over the last dim. `gamma`/`beta` have shape [d].
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> TensorId {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().expect("layer_norm: scalar input");
        assert_eq!(
            self.shape(gamma),
            &[d],
            "layer_norm: gamma shape {:?} vs feature dim {}",
            self.shape(gamma),
            d
        );
        assert_eq!(self.shape(beta), &[d]);
        let e = T::from_f64(eps);
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut data = vec![T::zero(); src.len()];
        let rows = src.len() / d;
        let dn = T::from_usize(d);
        for r in 0..rows {
            let xs = &src[r * d..(r + 1) * d];
            let mean = xs.iter().copied().sum::<T>() / dn;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = (var + e).sqrt().recip();
            for i in 0..d {
                data[r * d + i] = (xs[i] - mean) * inv * g[i] + b[i];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(sx, data, rg, Op::LayerNorm { x, gamma, beta, eps })
    }

    /// Training-mode batch norm over [B,C,H,W]; returns the output id plus the
    /// per-channel batch mean and (biased) variance for running-stat updates.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> (TensorId, Vec<T>, Vec<T>) {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 4, "batch_norm: expected [B,C,H,W], got {:?}", sx);
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let m = b * h * w;
        assert!(m > 0, "batch_norm: empty batch {:?}", sx);
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let src = self.data(x);
        let hw = h * w;
        let mn = T::from_usize(m);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &src[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                mean[ci] = mean[ci] + plane.iter().copied().sum::<T>();
            }
        }
        for v in mean.iter_mut() {
            *v = *v / mn;
        }
        for bi in 0..b {
            for ci in 0..c {
                let plane = &src[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                var[ci] = var[ci] + plane.iter().map(|&v| (v - mean[ci]) * (v - mean[ci])).sum::<T>();
            }
        }
        for v in var.iter_mut() {
            *v = *v / mn;
        }
        let e = T::from_f64(eps);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut data = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let inv = (var[ci] + e).sqrt().recip();
                let base = (bi * c + ci) * hw;
                for i in 0..hw {
                    data[base + i] = (src[base + i] - mean[ci]) * inv * g[ci] + bt[ci];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let id = self.push(
            sx,
            data,
            rg,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                eps,
                mean: mean.clone(),
                var: var.clone(),
            },
        );
        (id, mean, var)
    }

    /// Eval-mode batch norm using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<T>,
        var: Vec<T>,
        eps: f64,
    ) -> TensorId {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 4, "batch_norm: expected [B,C,H,W], got {:?}", sx);
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        assert!(b * h * w > 0, "batch_norm: empty batch {:?}", sx);
        assert_eq!(mean.len(), c);
        assert_eq!(var.len(), c);
        let e = T::from_f64(eps);
        let src = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let hw = h * w;
        let mut data = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let inv = (var[ci] + e).sqrt().recip();
                let base = (bi * c + ci) * hw;
                for i in 0..hw {
                    data[base + i] = (src[base + i] - mean[ci]) * inv * g[ci] + bt[ci];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            sx,
            data,
            rg,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                eps,
                mean,
                var,
            },
        )
    }

    /// Grouped 2-D convolution. `x`: [B,C_in,H,W], `w`: [C_out,C_in/g,k,k].
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize, groups: usize) -> TensorId {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 4, "conv2d: input must be [B,C,H,W], got {:?}", sx);
        assert_eq!(sw.len(), 4, "conv2d: weight must be [O,I/g,k,k], got {:?}", sw);
        assert_eq!(sw[2], sw[3], "conv2d: non-square kernel {:?}", sw);
        assert_eq!(
            sx[1],
            sw[1] * groups,
            "conv2d: input channels {:?} do not match weight {:?} with {} groups",
            sx,
            sw,
            groups
        );
        let geom = ConvGeom::new(sx[0], sx[1], sw[0], sx[2], sx[3], sw[2], stride, pad, groups);
        let data = kernels::conv2d_forward(self.data(x), self.data(w), &geom);
        let out_shape = vec![geom.batch, geom.c_out, geom.h_out, geom.w_out];
        let rg = self.rg(x) || self.rg(w);
        self.push(out_shape, data, rg, Op::Conv2d { x, w, geom })
    }

    /// [B,C,H,W] -> [B,C], mean over the spatial dims.
    pub fn global_avg_pool(&mut self, x: TensorId) -> TensorId {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 4, "global_avg_pool: expected [B,C,H,W], got {:?}", sx);
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * w;
        let denom = T::from_usize(hw);
        let src = self.data(x);
        let mut data = vec![T::zero(); b * c];
        for i in 0..b * c {
            data[i] = src[i * hw..(i + 1) * hw].iter().copied().sum::<T>() / denom;
        }
        let rg = self.rg(x);
        self.push(vec![b, c], data, rg, Op::GlobalAvgPool { x })
    }

    /// y[b,c,h,w] = x[b,c,h,w] * gate[b,c]
    pub fn scale_channels(&mut self, x: TensorId, gate: TensorId) -> TensorId {
        let sx = self.shape(x).to_vec();
        let sg = self.shape(gate).to_vec();
        assert!(
            sx.len() == 4 && sg == [sx[0], sx[1]],
            "scale_channels: gate {:?} does not match input {:?}",
            sg,
            sx
        );
        let hw = sx[2] * sx[3];
        let src = self.data(x);
        let g = self.data(gate);
        let mut data = vec![T::zero(); src.len()];
        for i in 0..sx[0] * sx[1] {
            let gv = g[i];
            for j in 0..hw {
                data[i * hw + j] = src[i * hw + j] * gv;
            }
        }
        let rg = self.rg(x) || self.rg(gate);
        self.push(sx, data, rg, Op::ScaleChannels { x, gate })
    }

    /// Inverted dropout: zeroes with probability `rate` and scales the
    /// survivors by 1/(1-rate). The caller supplies the Bernoulli draws.
    pub fn dropout(&mut self, x: TensorId, rate: f64, draws: impl Iterator<Item = f64>) -> TensorId {
        assert!((0.0..1.0).contains(&rate), "dropout: rate {} outside [0,1)", rate);
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let n = self.data(x).len();
        let mask: Vec<T> = draws
            .take(n)
            .map(|u| if u < rate { T::zero() } else { keep })
            .collect();
        assert_eq!(mask.len(), n, "dropout: not enough random draws");
        let data: Vec<T> = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, rg, Op::Dropout { x, mask })
    }

    /// Mean cross-entropy of `logits` [B,C] against integer labels, computed
    /// with a stable log-sum-exp. Returns a scalar.
    pub fn cross_entropy_logits(&mut self, logits: TensorId, labels: &[usize]) -> TensorId {
        let sl = self.shape(logits).to_vec();
        assert_eq!(sl.len(), 2, "cross_entropy: logits must be [B,C], got {:?}", sl);
        let (b, c) = (sl[0], sl[1]);
        assert_eq!(labels.len(), b, "cross_entropy: {} labels for batch {}", labels.len(), b);
        for &l in labels {
            assert!(l < c, "cross_entropy: label {} out of range {}", l, c);
        }
        let src = self.data(logits);
        let mut total = T::zero();
        for bi in 0..b {
            let row = &src[bi * c..(bi + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            total = total + (lse - row[labels[bi]]);
        }
        let loss = total / T::from_usize(b);
        let rg = self.rg(logits);
        self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    /// Row-wise v / (sum |v_i| + eps) over the last dim.
    pub fn l1_normalize(&mut self, x: TensorId, eps: f64) -> TensorId {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().expect("l1_normalize: scalar input");
        let e = T::from_f64(eps);
        let src = self.data(x);
        let rows = src.len() / d.max(1);
        let mut data = vec![T::zero(); src.len()];
        for r in 0..rows {
            let xs = &src[r * d..(r + 1) * d];
            let denom = xs.iter().map(|&v| v.abs()).sum::<T>() + e;
            for i in 0..d {
                data[r * d + i] = xs[i] / denom;
            }
        }
        let rg = self.rg(x);
        self.push(sx, data, rg, Op::L1Normalize { x, eps })
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`. Grads accumulate: calling
    /// twice without a fresh tape doubles leaf gradients.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(
            self.data(loss).len(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.shape(loss)
        );
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        // Leaf grads accumulate across calls; intermediate grads are rebuilt
        // per sweep, otherwise a second backward would compound them.
        for (n, g) in nodes.iter().zip(grads.iter_mut()) {
            if !matches!(n.op, Op::Leaf { .. }) {
                *g = None;
            }
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let out_shape = &nodes[i].shape;
            let out_data = &nodes[i].data;

            // Adds `src` into the grad buffer of `id` (if it requires grad).
            macro_rules! acc {
                ($id:expr, $src:expr) => {{
                    let id: TensorId = $id;
                    if nodes[id.0].requires_grad {
                        let buf = grads[id.0]
                            .get_or_insert_with(|| vec![T::zero(); nodes[id.0].data.len()]);
                        for (d, s) in buf.iter_mut().zip($src.iter()) {
                            *d = *d + *s;
                        }
                    }
                }};
            }

            match &nodes[i].op {
                Op::Leaf { .. } => {}
                Op::Add { a, b } => {
                    acc!(*a, g);
                    acc!(*b, g);
                }
                Op::AddBroadcast { a, b } => {
                    acc!(*a, g);
                    if nodes[b.0].requires_grad {
                        let nb = nodes[b.0].data.len();
                        let mut db = vec![T::zero(); nb];
                        for (idx, &gv) in g.iter().enumerate() {
                            db[idx % nb] = db[idx % nb] + gv;
                        }
                        acc!(*b, db);
                    }
                }
                Op::Sub { a, b } => {
                    acc!(*a, g);
                    if nodes[b.0].requires_grad {
                        let db: Vec<T> = g.iter().map(|&v| -v).collect();
                        acc!(*b, db);
                    }
                }
                Op::Mul { a, b } => {
                    if nodes[a.0].requires_grad {
                        let da: Vec<T> =
                            g.iter().zip(&nodes[b.0].data).map(|(&gv, &bv)| gv * bv).collect();
                        acc!(*a, da);
                    }
                    if nodes[b.0].requires_grad {
                        let db: Vec<T> =
                            g.iter().zip(&nodes[a.0].data).map(|(&gv, &av)| gv * av).collect();
                        acc!(*b, db);
                    }
                }
                Op::AddScalar { a } => {
                    acc!(*a, g);
                }
                Op::MulScalar { a, s } => {
                    if nodes[a.0].requires_grad {
                        let s = *s;
                        let da: Vec<T> = g.iter().map(|&v| v * s).collect();
                        acc!(*a, da);
                    }
                }
                Op::Matmul { a, b } => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[1];
                    if nodes[a.0].requires_grad {
                        let mut da = vec![T::zero(); m * k];
                        kernels::mm_nt(&g, &nodes[b.0].data, m, n, k, &mut da);
                        acc!(*a, da);
                    }
                    if nodes[b.0].requires_grad {
                        let mut db = vec![T::zero(); k * n];
                        kernels::mm_tn(&nodes[a.0].data, &g, m, k, n, &mut db);
                        acc!(*b, db);
                    }
                }
                Op::Bmm { a, b } => {
                    let (bt, m, k) = (
                        nodes[a.0].shape[0],
                        nodes[a.0].shape[1],
                        nodes[a.0].shape[2],
                    );
                    let n = nodes[b.0].shape[2];
                    if nodes[a.0].requires_grad {
                        let mut da = vec![T::zero(); bt * m * k];
                        for t in 0..bt {
                            kernels::mm_nt(
                                &g[t * m * n..(t + 1) * m * n],
                                &nodes[b.0].data[t * k * n..(t + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut da[t * m * k..(t + 1) * m * k],
                            );
                        }
                        acc!(*a, da);
                    }
                    if nodes[b.0].requires_grad {
                        let mut db = vec![T::zero(); bt * k * n];
                        for t in 0..bt {
                            kernels::mm_tn(
                                &nodes[a.0].data[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                m,
                                k,
                                n,
                                &mut db[t * k * n..(t + 1) * k * n],
                            );
                        }
                        acc!(*b, db);
                    }
                }
                Op::Reshape { a } => {
                    acc!(*a, g);
                }
                Op::Permute { a, axes } => {
                    if nodes[a.0].requires_grad {
                        let mut inverse = vec![0usize; axes.len()];
                        for (to, &from) in axes.iter().enumerate() {
                            inverse[from] = to;
                        }
                        let da = permute_copy(&g, out_shape, &inverse);
                        acc!(*a, da);
                    }
                }
                Op::Concat { axis, parts } => {
                    let axis = *axis;
                    let (outer, ax_total, inner) = axis_split(out_shape, axis);
                    let mut offset = 0;
                    for &p in parts {
                        let ap = nodes[p.0].shape[axis];
                        if nodes[p.0].requires_grad {
                            let mut dp = vec![T::zero(); outer * ap * inner];
                            for o in 0..outer {
                                let src = (o * ax_total + offset) * inner;
                                dp[o * ap * inner..(o + 1) * ap * inner]
                                    .copy_from_slice(&g[src..src + ap * inner]);
                            }
                            acc!(p, dp);
                        }
                        offset += ap;
                    }
                }
                Op::Slice { a, axis, start } => {
                    if nodes[a.0].requires_grad {
                        let sa = &nodes[a.0].shape;
                        let (outer, ax, inner) = axis_split(sa, *axis);
                        let len = out_shape[*axis];
                        let mut da = vec![T::zero(); nodes[a.0].data.len()];
                        for o in 0..outer {
                            let dst = (o * ax + start) * inner;
                            let src = o * len * inner;
                            for idx in 0..len * inner {
                                da[dst + idx] = g[src + idx];
                            }
                        }
                        acc!(*a, da);
                    }
                }
                Op::ExpandLeading { a } => {
                    if nodes[a.0].requires_grad {
                        let inner = nodes[a.0].data.len();
                        let n = out_shape[0];
                        let mut da = vec![T::zero(); inner];
                        for t in 0..n {
                            for idx in 0..inner {
                                da[idx] = da[idx] + g[t * inner + idx];
                            }
                        }
                        acc!(*a, da);
                    }
                }
                Op::SumAll { a } => {
                    if nodes[a.0].requires_grad {
                        let da = vec![g[0]; nodes[a.0].data.len()];
                        acc!(*a, da);
                    }
                }
                Op::MeanAll { a } => {
                    if nodes[a.0].requires_grad {
                        let n = T::from_usize(nodes[a.0].data.len());
                        let da = vec![g[0] / n; nodes[a.0].data.len()];
                        acc!(*a, da);
                    }
                }
                Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                    if nodes[a.0].requires_grad {
                        let sa = &nodes[a.0].shape;
                        let (outer, ax, inner) = axis_split(sa, *axis);
                        let scale = if matches!(nodes[i].op, Op::MeanAxis { .. }) {
                            T::from_usize(ax).recip()
                        } else {
                            T::one()
                        };
                        let mut da = vec![T::zero(); nodes[a.0].data.len()];
                        for o in 0..outer {
                            for j in 0..ax {
                                let base = (o * ax + j) * inner;
                                for idx in 0..inner {
                                    da[base + idx] = g[o * inner + idx] * scale;
                                }
                            }
                        }
                        acc!(*a, da);
                    }
                }
                Op::Sqrt { a } => {
                    if nodes[a.0].requires_grad {
                        let two = T::from_f64(2.0);
                        let da: Vec<T> =
                            g.iter().zip(out_data).map(|(&gv, &y)| gv / (two * y)).collect();
                        acc!(*a, da);
                    }
                }
                Op::Exp { a } => {
                    if nodes[a.0].requires_grad {
                        let da: Vec<T> = g.iter().zip(out_data).map(|(&gv, &y)| gv * y).collect();
                        acc!(*a, da);
                    }
                }
                Op::Log { a } => {
                    if nodes[a.0].requires_grad {
                        let da: Vec<T> =
                            g.iter().zip(&nodes[a.0].data).map(|(&gv, &x)| gv / x).collect();
                        acc!(*a, da);
                    }
                }
                Op::Sigmoid { a } => {
                    if nodes[a.0].requires_grad {
                        let da: Vec<T> = g
                            .iter()
                            .zip(out_data)
                            .map(|(&gv, &s)| gv * s * (T::one() - s))
                            .collect();
                        acc!(*a, da);
                    }
                }
                Op::Tanh { a } => {
                    if nodes[a.0].requires_grad {
                        let da: Vec<T> = g
                            .iter()
                            .zip(out_data)
                            .map(|(&gv, &t)| gv * (T::one() - t * t))
                            .collect();
                        acc!(*a, da);
                    }
                }
                Op::Gelu { a } => {
                    if nodes[a.0].requires_grad {
                        let da: Vec<T> = g
                            .iter()
                            .zip(&nodes[a.0].data)
                            .map(|(&gv, &x)| gv * gelu_tanh_grad(x))
                            .collect();
                        acc!(*a, da);
                    }
                }
                Op::Softmax { a, axis } => {
                    if nodes[a.0].requires_grad {
                        let (outer, ax, inner) = axis_split(out_shape, *axis);
                        let mut da = vec![T::zero(); g.len()];
                        for o in 0..outer {
                            for idx in 0..inner {
                                let at = |j: usize| (o * ax + j) * inner + idx;
                                let mut dot = T::zero();
                                for j in 0..ax {
                                    dot = dot + g[at(j)] * out_data[at(j)];
                                }
                                for j in 0..ax {
                                    da[at(j)] = out_data[at(j)] * (g[at(j)] - dot);
                                }
                            }
                        }
                        acc!(*a, da);
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let d = *nodes[x.0].shape.last().unwrap();
                    let rows = nodes[x.0].data.len() / d;
                    let e = T::from_f64(*eps);
                    let dn = T::from_usize(d);
                    let xs = &nodes[x.0].data;
                    let gm = &nodes[gamma.0].data;
                    let mut dx = vec![T::zero(); xs.len()];
                    let mut dgamma = vec![T::zero(); d];
                    let mut dbeta = vec![T::zero(); d];
                    for r in 0..rows {
                        let row = &xs[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mean = row.iter().copied().sum::<T>() / dn;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                        let inv = (var + e).sqrt().recip();
                        let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let mut dxhat = vec![T::zero(); d];
                        for j in 0..d {
                            dgamma[j] = dgamma[j] + grow[j] * xhat[j];
                            dbeta[j] = dbeta[j] + grow[j];
                            dxhat[j] = grow[j] * gm[j];
                        }
                        let sum_dxhat = dxhat.iter().copied().sum::<T>() / dn;
                        let sum_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(&a_, &b_)| a_ * b_)
                            .sum::<T>()
                            / dn;
                        for j in 0..d {
                            dx[r * d + j] =
                                inv * (dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    acc!(*x, dx);
                    acc!(*gamma, dgamma);
                    acc!(*beta, dbeta);
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    eps,
                    mean,
                    var,
                } => {
                    let sx = &nodes[x.0].shape;
                    let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let hw = h * w;
                    let m = T::from_usize(b * hw);
                    let e = T::from_f64(*eps);
                    let xs = &nodes[x.0].data;
                    let gm = &nodes[gamma.0].data;
                    let mut dx = vec![T::zero(); xs.len()];
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for ci in 0..c {
                        let inv = (var[ci] + e).sqrt().recip();
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for bi in 0..b {
                            let base = (bi * c + ci) * hw;
                            for idx in 0..hw {
                                let xhat = (xs[base + idx] - mean[ci]) * inv;
                                let gv = g[base + idx];
                                dgamma[ci] = dgamma[ci] + gv * xhat;
                                dbeta[ci] = dbeta[ci] + gv;
                                let dxh = gv * gm[ci];
                                sum_dxhat = sum_dxhat + dxh;
                                sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat;
                            }
                        }
                        sum_dxhat = sum_dxhat / m;
                        sum_dxhat_xhat = sum_dxhat_xhat / m;
                        for bi in 0..b {
                            let base = (bi * c + ci) * hw;
                            for idx in 0..hw {
                                let xhat = (xs[base + idx] - mean[ci]) * inv;
                                let dxh = g[base + idx] * gm[ci];
                                dx[base + idx] =
                                    inv * (dxh - sum_dxhat - xhat * sum_dxhat_xhat);
                            }
                        }
                    }
                    acc!(*x, dx);
                    acc!(*gamma, dgamma);
                    acc!(*beta, dbeta);
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    eps,
                    mean,
                    var,
                } => {
                    let sx = &nodes[x.0].shape;
                    let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                    let e = T::from_f64(*eps);
                    let xs = &nodes[x.0].data;
                    let gm = &nodes[gamma.0].data;
                    let mut dx = vec![T::zero(); xs.len()];
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let inv = (var[ci] + e).sqrt().recip();
                            let base = (bi * c + ci) * hw;
                            for idx in 0..hw {
                                let gv = g[base + idx];
                                dgamma[ci] =
                                    dgamma[ci] + gv * (xs[base + idx] - mean[ci]) * inv;
                                dbeta[ci] = dbeta[ci] + gv;
                                dx[base + idx] = gv * gm[ci] * inv;
                            }
                        }
                    }
                    acc!(*x, dx);
                    acc!(*gamma, dgamma);
                    acc!(*beta, dbeta);
                }
                Op::Conv2d { x, w, geom } => {
                    let need_dx = nodes[x.0].requires_grad;
                    let need_dw = nodes[w.0].requires_grad;
                    let mut dx = if need_dx {
                        Some(vec![T::zero(); nodes[x.0].data.len()])
                    } else {
                        None
                    };
                    let mut dw = if need_dw {
                        Some(vec![T::zero(); nodes[w.0].data.len()])
                    } else {
                        None
                    };
                    kernels::conv2d_backward(
                        &nodes[x.0].data,
                        &nodes[w.0].data,
                        &g,
                        geom,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                    );
                    if let Some(dx) = dx {
                        acc!(*x, dx);
                    }
                    if let Some(dw) = dw {
                        acc!(*w, dw);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if nodes[x.0].requires_grad {
                        let sx = &nodes[x.0].shape;
                        let hw = sx[2] * sx[3];
                        let denom = T::from_usize(hw);
                        let mut dx = vec![T::zero(); nodes[x.0].data.len()];
                        for bc in 0..sx[0] * sx[1] {
                            let gv = g[bc] / denom;
                            for idx in 0..hw {
                                dx[bc * hw + idx] = gv;
                            }
                        }
                        acc!(*x, dx);
                    }
                }
                Op::ScaleChannels { x, gate } => {
                    let sx = &nodes[x.0].shape;
                    let hw = sx[2] * sx[3];
                    if nodes[x.0].requires_grad {
                        let gt = &nodes[gate.0].data;
                        let mut dx = vec![T::zero(); nodes[x.0].data.len()];
                        for bc in 0..sx[0] * sx[1] {
                            for idx in 0..hw {
                                dx[bc * hw + idx] = g[bc * hw + idx] * gt[bc];
                            }
                        }
                        acc!(*x, dx);
                    }
                    if nodes[gate.0].requires_grad {
                        let xs = &nodes[x.0].data;
                        let mut dg = vec![T::zero(); nodes[gate.0].data.len()];
                        for bc in 0..sx[0] * sx[1] {
                            let mut s = T::zero();
                            for idx in 0..hw {
                                s = s + g[bc * hw + idx] * xs[bc * hw + idx];
                            }
                            dg[bc] = s;
                        }
                        acc!(*gate, dg);
                    }
                }
                Op::Dropout { x, mask } => {
                    if nodes[x.0].requires_grad {
                        let dx: Vec<T> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                        acc!(*x, dx);
                    }
                }
                Op::CrossEntropy { logits, labels } => {
                    if nodes[logits.0].requires_grad {
                        let sl = &nodes[logits.0].shape;
                        let (b, c) = (sl[0], sl[1]);
                        let bn = T::from_usize(b);
                        let src = &nodes[logits.0].data;
                        let mut dl = vec![T::zero(); src.len()];
                        for bi in 0..b {
                            let row = &src[bi * c..(bi + 1) * c];
                            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                            let exps: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
                            let sum: T = exps.iter().copied().sum();
                            for ci in 0..c {
                                let p = exps[ci] / sum;
                                let t = if ci == labels[bi] { T::one() } else { T::zero() };
                                dl[bi * c + ci] = g[0] * (p - t) / bn;
                            }
                        }
                        acc!(*logits, dl);
                    }
                }
                Op::L1Normalize { x, eps } => {
                    if nodes[x.0].requires_grad {
                        let d = *nodes[x.0].shape.last().unwrap();
                        let rows = nodes[x.0].data.len() / d.max(1);
                        let e = T::from_f64(*eps);
                        let xs = &nodes[x.0].data;
                        let mut dx = vec![T::zero(); xs.len()];
                        for r in 0..rows {
                            let row = &xs[r * d..(r + 1) * d];
                            let grow = &g[r * d..(r + 1) * d];
                            let yrow = &out_data[r * d..(r + 1) * d];
                            let denom = row.iter().map(|&v| v.abs()).sum::<T>() + e;
                            let gy: T = grow.iter().zip(yrow).map(|(&a_, &b_)| a_ * b_).sum();
                            for j in 0..d {
                                let sign = if row[j] > T::zero() {
                                    T::one()
                                } else if row[j] < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                };
                                dx[r * d + j] = (grow[j] - sign * gy) / denom;
                            }
                        }
                        acc!(*x, dx);
                    }
                }
            }
        }
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_tanh_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    let dinner = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * sech2 * dinner
}

fn permute_copy<T: Scalar>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut out = vec![T::zero(); src.len()];
    let mut coords = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src_idx = 0;
        for d in 0..rank {
            src_idx += coords[d] * in_strides[axes[d]];
        }
        *slot = src[src_idx];
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}
