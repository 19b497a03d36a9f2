//! Mini-batch MSE training with AdamW and seeded determinism.
//!
//! Every stochastic draw (epoch shuffle, per-sample masking, dropout) comes
//! from a labelled substream of the run seed, keyed by absolute epoch and
//! sample identity — so results are independent of thread count and batch
//! parallelism, and training can resume mid-run without replaying history.
//! Gradients are computed per sample in parallel but accumulated in fixed
//! batch order.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::{r2_per_variable, KahanSum};
use crate::fusion::{
    load_checkpoint, mask_tokens, save_checkpoint, FusionModel, Token,
};
use crate::rng::stream;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Training-time token removal probability.
    pub mask_prob: f64,
    /// Validation cadence in epochs (the final epoch always evaluates).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 256,
            epochs: 100,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            mask_prob: 0.3,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) && self.lr != 0.0 {
            return Err(Error::config("lr must be finite and non-negative"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::config("mask_prob must be in [0, 1)"));
        }
        if self.eval_every < 1 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        Ok(())
    }
}

/// Mean squared error over one prediction vector.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "mse_loss length mismatch");
    let mut sum = KahanSum::new();
    for (p, t) in pred.iter().zip(target) {
        sum.add((p - t) * (p - t));
    }
    sum.value() / pred.len() as f64
}

/// AdamW moment estimates, aligned with the model's canonical parameter
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(model: &FusionModel) -> Self {
        let zeros: Vec<Tensor> = model
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update: decoupled weight decay applied before the adaptive
/// step, then bias-corrected moment update.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::config("optimizer state does not match parameters"));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() {
            return Err(Error::config(format!(
                "gradient {i} shape {:?} != parameter shape {:?}",
                g.shape(),
                params[i].shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::numeric(format!("non-finite gradient at tensor {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let p = params[i].data_mut();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for e in 0..p.len() {
            p[e] -= cfg.lr * cfg.weight_decay * p[e];
            m[e] = cfg.beta1 * m[e] + (1.0 - cfg.beta1) * g[e];
            v[e] = cfg.beta2 * v[e] + (1.0 - cfg.beta2) * g[e] * g[e];
            let m_hat = m[e] / bc1;
            let v_hat = v[e] / bc2;
            p[e] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One pre-assembled training example: the unmasked token sequence and the
/// standardized target vector.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub tokens: Vec<Token>,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_r2: Option<f64>,
}

pub fn metrics_to_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,train_loss,val_mean_r2\n");
    for m in metrics {
        match m.val_mean_r2 {
            Some(v) => out.push_str(&format!("{},{},{}\n", m.epoch, m.train_loss, v)),
            None => out.push_str(&format!("{},{},\n", m.epoch, m.train_loss)),
        }
    }
    out
}

/// A model mid-training: optimizer state plus the absolute epoch counter
/// that keys the stochastic substreams. Saving and loading this is the
/// resume path.
#[derive(Debug)]
pub struct Trainer {
    pub model: FusionModel,
    pub opt: AdamState,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(model: FusionModel) -> Self {
        let opt = AdamState::new(&model);
        Trainer {
            model,
            opt,
            epochs_done: 0,
        }
    }

    /// Run `epochs` further epochs, invoking the callback after each. The
    /// final epoch of the run always evaluates on the validation set.
    pub fn run(
        &mut self,
        train: &[TrainSample],
        val: &[TrainSample],
        cfg: &TrainConfig,
        epochs: usize,
        mut on_epoch: impl FnMut(&EpochMetrics, &FusionModel),
    ) -> Result<Vec<EpochMetrics>> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::data("training split is empty"));
        }
        let n = train.len();
        let m_out = self.model.cfg.output_dim;
        for s in train.iter().chain(val) {
            if s.target.len() != m_out {
                return Err(Error::data(format!(
                    "target length {} != model output dim {m_out}",
                    s.target.len()
                )));
            }
        }
        let mut metrics = Vec::with_capacity(epochs);
        let first = self.epochs_done;
        for epoch in first..first + epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream(cfg.seed, "shuffle", epoch as u64));

            let mut loss_sum = KahanSum::new();
            for batch in order.chunks(cfg.batch_size) {
                let results: Vec<(f64, Vec<Tensor>)> = batch
                    .par_iter()
                    .map(|&idx| self.sample_grad(&train[idx], cfg, epoch, idx))
                    .collect::<Result<Vec<_>>>()?;
                let mut acc: Vec<Tensor> = self
                    .model
                    .params
                    .tensors()
                    .iter()
                    .map(|t| Tensor::zeros(t.rows(), t.cols()))
                    .collect();
                // Fixed-order accumulation keeps results independent of
                // how rayon scheduled the batch.
                for (loss, grads) in &results {
                    loss_sum.add(*loss);
                    for (a, g) in acc.iter_mut().zip(grads) {
                        a.add_assign(g);
                    }
                }
                let scale = 1.0 / batch.len() as f64;
                for a in &mut acc {
                    for v in a.data_mut() {
                        *v *= scale;
                    }
                }
                adamw_step(self.model.params.tensors_mut(), &acc, &mut self.opt, cfg)?;
            }
            let train_loss = loss_sum.value() / n as f64;

            let is_last = epoch + 1 == first + epochs;
            let val_mean_r2 = if !val.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || is_last)
            {
                Some(validation_mean_r2(&self.model, val)?)
            } else {
                None
            };
            self.epochs_done = epoch + 1;
            let em = EpochMetrics {
                epoch,
                train_loss,
                val_mean_r2,
            };
            on_epoch(&em, &self.model);
            metrics.push(em);
        }
        Ok(metrics)
    }

    fn sample_grad(
        &self,
        sample: &TrainSample,
        cfg: &TrainConfig,
        epoch: usize,
        idx: usize,
    ) -> Result<(f64, Vec<Tensor>)> {
        let stream_idx = epoch as u64 * u32::MAX as u64 + idx as u64;
        let mut mask_rng = stream(cfg.seed, "mask", stream_idx);
        let tokens = mask_tokens(&sample.tokens, cfg.mask_prob, true, &mut mask_rng);
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let mut dropout_rng;
        let dropout = if self.model.cfg.dropout > 0.0 {
            dropout_rng = stream(cfg.seed, "dropout", stream_idx);
            Some(&mut dropout_rng as &mut dyn rand::RngCore)
        } else {
            None
        };
        let pass = self.model.forward(&mut tape, &bound, &tokens, dropout, false)?;
        let target = Tensor::row_vector(sample.target.clone());
        let loss = tape.mse_loss(pass.output, target);
        let loss_value = tape.value(loss).item();
        let grads = tape.backward(loss);
        Ok((loss_value, bound.gradients(&grads, &self.model)))
    }
}

/// Mean over variables of squared Pearson R² on the validation set, with
/// eval semantics: full token sequences, no masking, no dropout.
pub fn validation_mean_r2(model: &FusionModel, val: &[TrainSample]) -> Result<f64> {
    if val.len() < 2 {
        return Err(Error::data("validation needs at least 2 samples"));
    }
    let m = model.cfg.output_dim;
    let rows: Vec<Vec<f64>> = val
        .par_iter()
        .map(|s| model.predict(&s.tokens, false).map(|(p, _)| p))
        .collect::<Result<Vec<_>>>()?;
    let mut preds = Tensor::zeros(val.len(), m);
    let mut targets = Tensor::zeros(val.len(), m);
    for (i, (p, s)) in rows.iter().zip(val).enumerate() {
        preds.row_mut(i).copy_from_slice(p);
        targets.row_mut(i).copy_from_slice(&s.target);
    }
    let r2 = r2_per_variable(&preds, &targets)?;
    let mut sum = KahanSum::new();
    for v in &r2 {
        sum.add(*v);
    }
    Ok(sum.value() / m as f64)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: FusionModel,
    pub best_model: FusionModel,
    pub best_epoch: usize,
    pub best_val_r2: f64,
    pub metrics: Vec<EpochMetrics>,
}

/// Full training run: `cfg.epochs` epochs with best-validation tracking.
/// Returns the final model and the best-validation snapshot (the final
/// model itself when no validation pass ever ran).
pub fn train_loop(
    model: FusionModel,
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model);
    let mut best: Option<(FusionModel, usize, f64)> = None;
    let metrics = trainer.run(train, val, cfg, cfg.epochs, |em, model| {
        if let Some(r2) = em.val_mean_r2 {
            let better = best.as_ref().map_or(true, |(_, _, b)| r2 > *b);
            if better {
                best = Some((model.clone(), em.epoch, r2));
            }
        }
    })?;
    let (best_model, best_epoch, best_val_r2) = match best {
        Some((m, e, r)) => (m, e, r),
        None => (trainer.model.clone(), cfg.epochs.saturating_sub(1), f64::NAN),
    };
    Ok(TrainOutcome {
        model: trainer.model,
        best_model,
        best_epoch,
        best_val_r2,
        metrics,
    })
}

/// Persist a mid-training state: model parameters (f32) plus f64 master
/// weights, moments, and counters, so a resumed run continues bit-exactly.
pub fn save_state(trainer: &Trainer, path: &std::path::Path) -> Result<()> {
    let mut extras: Vec<(String, Tensor)> = vec![
        ("opt.step".to_string(), Tensor::scalar(trainer.opt.step as f64)),
        (
            "opt.epochs_done".to_string(),
            Tensor::scalar(trainer.epochs_done as f64),
        ),
    ];
    for (i, name) in trainer.model.params.names().iter().enumerate() {
        extras.push((
            format!("opt.master.{name}"),
            trainer.model.params.tensors()[i].clone(),
        ));
        extras.push((format!("opt.m.{name}"), trainer.opt.m[i].clone()));
        extras.push((format!("opt.v.{name}"), trainer.opt.v[i].clone()));
    }
    save_checkpoint(&trainer.model, &extras, path)
}

pub fn load_state(path: &std::path::Path) -> Result<Trainer> {
    let ckpt = load_checkpoint(path)?;
    let mut model = ckpt.model;
    let extras: std::collections::HashMap<String, Tensor> = ckpt.extras.into_iter().collect();
    let scalar = |name: &str| -> Result<f64> {
        extras
            .get(name)
            .map(|t| t.item())
            .ok_or_else(|| Error::format(format!("checkpoint missing '{name}'")))
    };
    let step = scalar("opt.step")? as u64;
    let epochs_done = scalar("opt.epochs_done")? as usize;
    let mut m = Vec::with_capacity(model.params.len());
    let mut v = Vec::with_capacity(model.params.len());
    let names: Vec<String> = model.params.names().to_vec();
    for name in &names {
        let fetch = |prefix: &str| -> Result<Tensor> {
            extras
                .get(&format!("{prefix}.{name}"))
                .cloned()
                .ok_or_else(|| Error::format(format!("checkpoint missing '{prefix}.{name}'")))
        };
        let master = fetch("opt.master")?;
        let expect = model.params.get(name).expect("known name").shape();
        if master.shape() != expect {
            return Err(Error::format(format!(
                "master weight shape mismatch for '{name}'"
            )));
        }
        *model.params.get_mut(name).expect("known name") = master;
        m.push(fetch("opt.m")?);
        v.push(fetch("opt.v")?);
    }
    Ok(Trainer {
        model,
        opt: AdamState { step, m, v },
        epochs_done,
    })
}
