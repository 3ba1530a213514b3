//! Parameter storage and the forward-pass context shared by all layers.
//!
//! Parameters live in a [`ParamStore`] owned by the model. Each forward pass
//! binds them onto a fresh [`Tape`] as named leaves (at most once per pass,
//! so shared weights accumulate correctly), and `collect_grads` copies leaf
//! gradients back after `backward`.

pub mod layers;

use crate::tensor::{Scalar, Tape, TensorData, TensorId};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: TensorData<T>,
    pub grad: Vec<T>,
    /// Trainable parameters are counted, optimized, and gradient-checked;
    /// buffers (batch-norm running stats) are only checkpointed.
    pub trainable: bool,
    /// Participates in decoupled weight decay.
    pub decay: bool,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) resampled into [-2 std, 2 std].
    TruncNormal { std: f64 },
    /// Normal(0, sqrt(2 / fan_out)).
    KaimingFanOut { fan_out: usize },
}

pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        init: Init,
        rng: &mut ChaCha8Rng,
        decay: bool,
    ) -> ParamId {
        let name = name.into();
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::TruncNormal { std } => (0..n)
                .map(|_| T::from_f64(trunc_normal(rng, std)))
                .collect(),
            Init::KaimingFanOut { fan_out } => {
                let std = (2.0 / fan_out as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        T::from_f64(z * std)
                    })
                    .collect()
            }
        };
        self.push(name, TensorData::new(shape, data), true, decay)
    }

    /// Non-trainable state carried with the model (running statistics).
    pub fn add_buffer(&mut self, name: impl Into<String>, value: TensorData<T>) -> ParamId {
        self.push(name.into(), value, false, false)
    }

    fn push(&mut self, name: String, value: TensorData<T>, trainable: bool, decay: bool) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name '{}'",
            name
        );
        let n = value.numel();
        self.params.push(Param {
            name,
            value,
            grad: vec![T::zero(); n],
            trainable,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &TensorData<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            for g in p.grad.iter_mut() {
                *g = T::zero();
            }
        }
    }

    /// Exact count of trainable scalars, the quantity the cost engine must
    /// reproduce to the digit.
    pub fn num_trainable_scalars(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel() as u64)
            .sum()
    }

    /// Lossy dtype conversion of every parameter and buffer.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: vec![U::zero(); p.grad.len()],
                    trainable: p.trainable,
                    decay: p.decay,
                })
                .collect(),
        }
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Per-pass context: the tape under construction, the parameter bindings,
/// train/eval mode, and the RNG feeding dropout draws.
pub struct Forward<'a, T: Scalar> {
    pub tape: Tape<T>,
    store: &'a mut ParamStore<T>,
    bound: Vec<Option<TensorId>>,
    pub training: bool,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, training: bool, pass_seed: u64) -> Self {
        let bound = vec![None; store.len()];
        Forward {
            tape: Tape::new(),
            store,
            bound,
            training,
            rng: ChaCha8Rng::seed_from_u64(pass_seed),
        }
    }

    /// Binds a parameter onto the tape (once per pass).
    pub fn param(&mut self, id: ParamId) -> TensorId {
        if let Some(t) = self.bound[id.0] {
            return t;
        }
        let p = &self.store.params[id.0];
        let t = self
            .tape
            .named_leaf(p.value.clone(), p.trainable, &p.name);
        self.bound[id.0] = Some(t);
        t
    }

    pub fn buffer(&self, id: ParamId) -> &TensorData<T> {
        &self.store.params[id.0].value
    }

    /// In-place buffer update (training-mode running statistics).
    pub fn update_buffer(&mut self, id: ParamId, new: Vec<T>) {
        let p = &mut self.store.params[id.0];
        assert!(!p.trainable, "update_buffer on trainable parameter '{}'", p.name);
        assert_eq!(p.value.data.len(), new.len());
        p.value.data = new;
    }

    pub fn uniform_draws(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.gen::<f64>()).collect()
    }

    /// Copies leaf gradients back into the store after `tape.backward`.
    /// Adds into existing grads, so multiple passes accumulate.
    pub fn collect_grads(&mut self) {
        for (idx, bound) in self.bound.iter().enumerate() {
            if let Some(t) = bound {
                if let Some(g) = self.tape.grad(*t) {
                    let dst = &mut self.store.params[idx].grad;
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

/// Deterministic stream derivation: one master seed fans out into per-use
/// seeds (model init, per-step dropout, per-epoch shuffles) so resuming a
/// run replays the identical stream.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 over the combined value
    let mut z = base ^ stream.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunc_normal_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", vec![512], Init::TruncNormal { std: 0.02 }, &mut rng, true);
        for &v in &store.value(id).data {
            assert!(v.abs() <= 0.04 + 1e-6);
        }
        // not all zero
        assert!(store.value(id).data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn same_seed_same_params() {
        let build = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f32>::new();
            store.add("a", vec![16], Init::TruncNormal { std: 0.02 }, &mut rng, true);
            store.add("b", vec![8, 4], Init::KaimingFanOut { fan_out: 8 }, &mut rng, true);
            store
        };
        let s1 = build(7);
        let s2 = build(7);
        for (p, q) in s1.iter().zip(s2.iter()) {
            assert_eq!(p.value.data, q.value.data);
        }
        let s3 = build(8);
        assert_ne!(s1.params[0].value.data, s3.params[0].value.data);
    }

    #[test]
    fn param_binding_is_shared_within_a_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", vec![3], Init::Ones, &mut rng, true);
        let mut cx = Forward::new(&mut store, true, 0);
        let t1 = cx.param(w);
        let t2 = cx.param(w);
        assert_eq!(t1, t2);
        // used twice: y = sum(w) + sum(w*w) -> dw = 1 + 2w = 3
        let s1 = cx.tape.sum_all(t1);
        let ww = cx.tape.mul(t1, t2);
        let s2 = cx.tape.sum_all(ww);
        let tot = cx.tape.add(s1, s2);
        cx.tape.backward(tot);
        cx.collect_grads();
        assert_eq!(store.get(ParamId(0)).grad, vec![3.0, 3.0, 3.0]);
    }

    #[test]
    fn num_trainable_excludes_buffers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        store.add("w", vec![10], Init::Zeros, &mut rng, true);
        store.add_buffer("rm", TensorData::zeros(vec![4]));
        assert_eq!(store.num_trainable_scalars(), 10);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        store.add("w", vec![1], Init::Zeros, &mut rng, true);
        store.add("w", vec![1], Init::Zeros, &mut rng, true);
    }

    #[test]
    fn derive_seed_spreads() {
        let a = derive_seed(42, 0);
        let b = derive_seed(42, 1);
        let c = derive_seed(43, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(42, 0));
    }
}
