use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::adam::{adam_step, AdamHyper, AdamState};
use super::config::TrainConfig;
use super::schedule::lr_schedule;
use crate::autograd::DropoutCtx;
use crate::data::{BatchIterator, DomainDataset};
use crate::error::{Error, Result};
use crate::mask::{overlay, DomainMask, MaskSet};
use crate::model::{loss_and_grads, ModelConfig, ParamStore, ParameterRegistry};
use crate::tensor::Tensor;

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub domain_id: String,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<MetricRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,domain_id,loss,lr\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.domain_id, r.loss, r.lr);
        }
        s
    }

    pub fn steps(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.step)
    }

    /// Mean loss over the first and last `window` steps.
    pub fn smoothed_ends(&self, window: usize) -> Option<(f64, f64)> {
        if self.rows.len() < 2 * window || window == 0 {
            return None;
        }
        let mean = |rs: &[MetricRow]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64;
        Some((mean(&self.rows[..window]), mean(&self.rows[self.rows.len() - window..])))
    }
}

/// Scales all gradients so that their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let sq: f64 = grads.values().flat_map(|g| g.data().iter()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

fn zero_unmasked(grads: &mut BTreeMap<String, Tensor>, mask: &DomainMask) {
    for (name, g) in grads.iter_mut() {
        match mask.tensor(name) {
            Some(bits) => {
                for (v, on) in g.data_mut().iter_mut().zip(bits.iter().by_vals()) {
                    if !on {
                        *v = 0.0;
                    }
                }
            }
            None => g.data_mut().iter_mut().for_each(|v| *v = 0.0),
        }
    }
}

fn total_steps(cfg: &TrainConfig, batches: &BatchIterator<'_>, n_domains: usize) -> u64 {
    let by_epochs = cfg.epochs.map(|e| {
        let per_epoch: usize = (0..n_domains).map(|i| batches.batches_per_epoch(i)).sum();
        e * per_epoch as u64
    });
    match (cfg.max_steps, by_epochs) {
        (Some(a), Some(b)) => a.min(b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => 0,
    }
}

/// Per-domain masks plus the base that fills in everything outside them.
struct Masking<'a> {
    base: &'a ParamStore,
    masks: Vec<&'a DomainMask>,
}

/// Shared loop: one batch per step, one optimizer state. With masking, a
/// batch of domain `i` runs on `overlay(base, params, Mᵢ)` and only `Mᵢ` is updated.
fn run(
    start: &ParamStore,
    registry: &ParameterRegistry,
    model: &ModelConfig,
    datasets: &[&DomainDataset],
    masking: Option<Masking<'_>>,
    cfg: &TrainConfig,
) -> Result<(ParamStore, TrainLog)> {
    cfg.validate()?;
    model.validate()?;
    registry.check_store(start)?;
    if let Some(m) = &masking {
        registry.check_store(m.base)?;
    }
    for d in datasets {
        d.check_vocab(model.vocab_size)?;
    }
    let mut model = model.clone();
    model.dropout = cfg.dropout;
    let mut batches = BatchIterator::new(datasets, cfg.mixing, cfg.batch_tokens, cfg.seed)?;
    let steps = total_steps(cfg, &batches, datasets.len());
    let mut params = start.clone();
    let mut state = AdamState::new();
    let mut log = TrainLog::default();
    for step in 1..=steps {
        let batch = batches.next().expect("batch stream is endless");
        let dropout = (cfg.dropout > 0.0).then_some(DropoutCtx { seed: cfg.seed, step });
        let mask = masking.as_ref().map(|m| m.masks[batch.domain]);
        let effective = match (&masking, mask) {
            (Some(m), Some(mask)) => Some(overlay(m.base, &params, mask)?),
            _ => None,
        };
        let (loss, grads) = loss_and_grads(effective.as_ref().unwrap_or(&params), &model, &batch.src, &batch.tgt_in, &batch.tgt_out, dropout)
            .map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged(format!("{op} produced a non-finite value at step {step}")),
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("loss is {loss} at step {step} on {}", batch.domain_id)));
        }
        let mut grads = grads.into_named();
        if let Some(mask) = mask {
            zero_unmasked(&mut grads, mask);
        }
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let lr = lr_schedule(step, cfg.warmup_steps, cfg.learning_rate)?;
        let hp = AdamHyper { lr, beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps };
        adam_step(&mut params, &grads, &mut state, &hp, mask)?;
        if step % cfg.log_every.max(1) == 0 || step == steps {
            log::info!("step {step}/{steps} domain {} loss {loss:.4} lr {lr:.3e}", batch.domain_id);
        }
        log.rows.push(MetricRow { step, domain_id: batch.domain_id, loss, lr });
    }
    Ok((params, log))
}

/// Trains every parameter on the union of `datasets`.
pub fn train_full(
    start: &ParamStore,
    registry: &ParameterRegistry,
    model: &ModelConfig,
    datasets: &[&DomainDataset],
    cfg: &TrainConfig,
) -> Result<(ParamStore, TrainLog)> {
    let merged;
    let data: &DomainDataset = match datasets {
        [] => return Err(Error::Data("no training data".into())),
        [one] => one,
        many => {
            let id: Vec<&str> = many.iter().map(|d| d.domain_id()).collect();
            merged = DomainDataset::concat(&id.join("+"), many)?;
            &merged
        }
    };
    run(start, registry, model, &[data], None, cfg)
}

/// Structure-aware joint training from λ₀: every batch comes from one domain
/// and only that domain's mask is updated.
pub fn train_doss(
    base: &ParamStore,
    registry: &ParameterRegistry,
    model: &ModelConfig,
    masks: &MaskSet,
    datasets: &[&DomainDataset],
    cfg: &TrainConfig,
) -> Result<(ParamStore, TrainLog)> {
    train_doss_from(base, base, registry, model, masks, datasets, cfg)
}

/// Joint training that continues from an already trained `start`.
pub fn train_doss_from(
    base: &ParamStore,
    start: &ParamStore,
    registry: &ParameterRegistry,
    model: &ModelConfig,
    masks: &MaskSet,
    datasets: &[&DomainDataset],
    cfg: &TrainConfig,
) -> Result<(ParamStore, TrainLog)> {
    if datasets.len() != masks.len() {
        return Err(Error::Mask(format!(
            "{} datasets but {} masks",
            datasets.len(),
            masks.len()
        )));
    }
    masks.check_registry(registry)?;
    let per_domain = datasets
        .iter()
        .map(|d| {
            masks
                .get(d.domain_id())
                .ok_or_else(|| Error::Mask(format!("no mask for domain {}", d.domain_id())))
        })
        .collect::<Result<Vec<_>>>()?;
    run(start, registry, model, datasets, Some(Masking { base, masks: per_domain }), cfg)
}

/// Trains under a single mask on one domain, continuing from `start`.
pub fn train_masked(
    base: &ParamStore,
    start: &ParamStore,
    registry: &ParameterRegistry,
    model: &ModelConfig,
    mask: &DomainMask,
    data: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<(ParamStore, TrainLog)> {
    mask.check_registry(registry)?;
    run(start, registry, model, &[data], Some(Masking { base, masks: vec![mask] }), cfg)
}
