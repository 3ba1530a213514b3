//! Training harness: AdamW with decoupled weight decay, per-step cosine
//! learning rate with linear warmup, the per-epoch adaptive-fusion weight
//! schedule, evaluation, and metrics/checkpoint output.

pub mod checkpoint;

use crate::data::{epoch_permutation, DataSource};
use crate::error::{Error, Result};
use crate::model::fusion::{lambda_schedule, AkfConfig, FusionKind};
use crate::model::CtrlfModel;
use crate::nn::{derive_seed, ParamStore};
use crate::tensor::Scalar;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            base_lr: 5e-4,
            min_lr: 1e-5,
            weight_decay: 0.05,
            warmup_epochs: 5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            deterministic: true,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_lr >= self.base_lr {
            return Err(Error::config(format!(
                "min_lr {} must be below base_lr {}",
                self.min_lr, self.base_lr
            )));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        Ok(())
    }
}

/// Per-step learning rate: linear warmup over `warmup_steps`, then cosine
/// decay from `base` to `min` reaching `min` exactly at the last step.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base: f64, min: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(1).saturating_sub(warmup_steps).max(1);
    let t = (step - warmup_steps) as f64 / span as f64;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW: decoupled weight decay applied multiplicatively, bias-corrected
/// moments. Weight decay skips norm scales/shifts, biases, CLS tokens, and
/// positional tables, via the store's per-parameter decay flag.
pub struct AdamW<T: Scalar> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let m = store
            .iter()
            .map(|p| {
                if p.trainable {
                    vec![T::zero(); p.value.numel()]
                } else {
                    Vec::new()
                }
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW {
            m,
            v,
            step_count: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = T::from_f64(1.0 - self.beta1.powf(t));
        let bc2 = T::from_f64(1.0 - self.beta2.powf(t));
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        let shrink = T::from_f64(1.0 - lr * self.weight_decay);
        for (idx, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            if p.decay && self.weight_decay > 0.0 {
                for w in p.value.data.iter_mut() {
                    *w = *w * shrink;
                }
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for ((w, &g), (mi, vi)) in p
                .value
                .data
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + one_m_b1 * g;
                *vi = b2 * *vi + one_m_b2 * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// One metrics-history row, mirroring the CSV columns.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub lambda: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_acc,lr,lambda";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let lambda = self.lambda.map(|l| format!("{l:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{:.6},{:.6},{:.8e},{}",
            self.epoch, self.train_loss, self.train_acc, self.test_acc, self.lr, lambda
        )
    }
}

#[derive(Debug)]
pub struct TrainResult {
    pub history: Vec<EpochMetrics>,
    /// Per-optimizer-step training losses.
    pub step_losses: Vec<f64>,
    pub best_test_acc: f64,
    /// Optimizer steps completed when epoch train accuracy first hit 1.0.
    pub steps_to_full_train_acc: Option<usize>,
    pub final_checkpoint: Option<std::path::PathBuf>,
    pub best_checkpoint: Option<std::path::PathBuf>,
}

/// Accuracy of each output head on one split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub fused_acc: f64,
    pub cnn_acc: f64,
    pub trans_acc: f64,
}

fn argmax_rows(data: &[f32], classes: usize) -> Vec<usize> {
    data.chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

fn count_correct(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Top-1 accuracy of the fused output and of each branch on the test split
/// (AKF evaluation fixes lambda at its end-of-schedule value).
pub fn evaluate(model: &mut CtrlfModel<f32>, data: &DataSource, batch_size: usize) -> Result<EvalReport> {
    evaluate_indices(
        model,
        data,
        &(0..data.test_len()).collect::<Vec<_>>(),
        batch_size,
        true,
    )
}

/// Same heads, measured on the training split (no augmentation).
pub fn evaluate_train_split(
    model: &mut CtrlfModel<f32>,
    data: &DataSource,
    batch_size: usize,
) -> Result<EvalReport> {
    evaluate_indices(
        model,
        data,
        &(0..data.train_len()).collect::<Vec<_>>(),
        batch_size,
        false,
    )
}

fn evaluate_indices(
    model: &mut CtrlfModel<f32>,
    data: &DataSource,
    indices: &[usize],
    batch_size: usize,
    test_split: bool,
) -> Result<EvalReport> {
    let classes = model.cfg.classes;
    let lambda = model.eval_lambda();
    let mut correct = [0usize; 3];
    let mut total = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0); // eval never augments; rng unused
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = if test_split {
            data.test_batch(chunk)?
        } else {
            data.train_batch(chunk, false, &mut rng)?
        };
        let out = model.run(&batch.images, false, lambda, 0);
        let fused = argmax_rows(out.cx.tape.data(out.fused.pre_softmax), classes);
        let cnn = argmax_rows(out.cx.tape.data(out.cnn_logits), classes);
        let trans = argmax_rows(out.cx.tape.data(out.trans_logits), classes);
        correct[0] += count_correct(&fused, &batch.labels);
        correct[1] += count_correct(&cnn, &batch.labels);
        correct[2] += count_correct(&trans, &batch.labels);
        total += batch.labels.len();
    }
    Ok(EvalReport {
        fused_acc: correct[0] as f64 / total as f64,
        cnn_acc: correct[1] as f64 / total as f64,
        trans_acc: correct[2] as f64 / total as f64,
    })
}

/// Optimizer state carried across a resume.
pub struct ResumeState {
    pub start_epoch: usize,
    pub optimizer: AdamW<f32>,
    pub best_test_acc: f64,
}

/// The full training loop. Writes `metrics.csv` and checkpoints into
/// `out_dir` when given; aborts with a diagnostic on a non-finite loss.
pub fn train(
    model: &mut CtrlfModel<f32>,
    data: &DataSource,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<ResumeState>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if model.cfg.classes != data.num_classes() {
        return Err(Error::config(format!(
            "model has {} classes but the dataset has {}",
            model.cfg.classes,
            data.num_classes()
        )));
    }
    if model.cfg.resolution != data.resolution() {
        return Err(Error::config(format!(
            "model resolution {} does not match dataset resolution {}",
            model.cfg.resolution,
            data.resolution()
        )));
    }

    let akf_cfg = match &model.cfg.fusion {
        FusionKind::Akf { alpha } => Some(AkfConfig {
            alpha: *alpha,
            total_epochs: cfg.epochs,
            ..AkfConfig::default()
        }),
        FusionKind::Ckf { .. } => None,
    };

    let classes = model.cfg.classes;
    let train_len = data.train_len();
    let steps_per_epoch = train_len.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;

    let (start_epoch, mut optimizer, mut best_acc) = match resume {
        Some(r) => (r.start_epoch, r.optimizer, r.best_test_acc),
        None => (0, AdamW::new(&model.store, cfg), f64::NEG_INFINITY),
    };

    let mut metrics_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            let fresh = start_epoch == 0 || !path.exists();
            let mut f = fs::OpenOptions::new().create(true).append(true).open(&path)?;
            if fresh && f.metadata()?.len() == 0 {
                writeln!(f, "{METRICS_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };

    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut steps_to_full = None;
    let mut final_ckpt = None;
    let mut best_ckpt = None;

    for epoch in start_epoch..cfg.epochs {
        let lambda = match &akf_cfg {
            Some(a) => Some(lambda_schedule(epoch, a)?),
            None => None,
        };
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5u64 << 32 | epoch as u64));
        let order = epoch_permutation(train_len, &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        let mut last_lr = 0.0;

        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let global_step = epoch * steps_per_epoch + bi;
            let lr = lr_schedule(global_step, total_steps, warmup_steps, cfg.base_lr, cfg.min_lr);
            last_lr = lr;
            let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                0x6u64 << 32 | global_step as u64,
            ));
            let batch = data.train_batch(chunk, cfg.augment, &mut aug_rng)?;
            let pass_seed = derive_seed(cfg.seed, 0x7u64 << 32 | global_step as u64);
            let mut out = model.run(&batch.images, true, lambda.unwrap_or(0.0), pass_seed);
            let loss_id = out
                .cx
                .tape
                .cross_entropy_logits(out.fused.pre_softmax, &batch.labels);
            let loss = out.cx.tape.data(loss_id)[0] as f64;
            if !loss.is_finite() {
                let node = out
                    .cx
                    .tape
                    .first_non_finite()
                    .map(|(_, d)| d)
                    .unwrap_or_else(|| "loss".into());
                return Err(Error::NonFinite {
                    step: global_step,
                    node,
                });
            }
            let pred = argmax_rows(out.cx.tape.data(out.fused.pre_softmax), classes);
            epoch_correct += count_correct(&pred, &batch.labels);
            epoch_loss += loss * batch.labels.len() as f64;
            out.cx.tape.backward(loss_id);
            out.cx.collect_grads();
            drop(out);
            optimizer.step(&mut model.store, lr);
            model.store.zero_grads();
            step_losses.push(loss);
        }

        let train_loss = epoch_loss / train_len as f64;
        let train_acc = epoch_correct as f64 / train_len as f64;
        if train_acc >= 1.0 && steps_to_full.is_none() {
            steps_to_full = Some((epoch + 1) * steps_per_epoch);
        }
        let eval = evaluate(model, data, cfg.batch_size)?;
        let row = EpochMetrics {
            epoch,
            train_loss,
            train_acc,
            test_acc: eval.fused_acc,
            lr: last_lr,
            lambda,
        };
        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{}", row.csv_row())?;
        }
        history.push(row);

        if let Some(dir) = out_dir {
            if eval.fused_acc > best_acc {
                best_acc = eval.fused_acc;
                let path = dir.join("checkpoint_best.ckpt");
                checkpoint::save(&path, model, &optimizer, epoch + 1, cfg.seed, best_acc)?;
                best_ckpt = Some(path);
            }
        } else {
            best_acc = best_acc.max(eval.fused_acc);
        }
    }

    if let Some(dir) = out_dir {
        let path = dir.join("checkpoint_final.ckpt");
        checkpoint::save(&path, model, &optimizer, cfg.epochs, cfg.seed, best_acc)?;
        final_ckpt = Some(path);
    }

    Ok(TrainResult {
        history,
        step_losses,
        best_test_acc: best_acc,
        steps_to_full_train_acc: steps_to_full,
        final_checkpoint: final_ckpt,
        best_checkpoint: best_ckpt,
    })
}
