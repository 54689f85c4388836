use super::prune::{magnitude_prune, magnitude_prune_disjoint};
use super::{DomainMask, MaskSet, PruneSpec};
use crate::data::DomainDataset;
use crate::error::Result;
use crate::model::{ModelConfig, ParamStore, ParameterRegistry};
use crate::train::{train_full, TrainConfig};

/// Fine-tunes a copy of `base` on one domain for `spec.ft_epochs` epochs and
/// prunes it. With `disjoint_against`, elements already claimed are excluded.
pub fn create_domain_mask(
    base: &ParamStore,
    registry: &ParameterRegistry,
    model: &ModelConfig,
    data: &DomainDataset,
    spec: PruneSpec,
    train_cfg: &TrainConfig,
    disjoint_against: Option<&MaskSet>,
) -> Result<DomainMask> {
    spec.validate()?;
    let tuned = finetune_for_mask(base, registry, model, data, spec.ft_epochs, train_cfg)?;
    let mut mask = match disjoint_against {
        Some(claimed) => magnitude_prune_disjoint(&tuned, registry, &spec, claimed)?,
        None => magnitude_prune(&tuned, registry, &spec)?,
    };
    mask.domain_id = data.domain_id().to_string();
    Ok(mask)
}

/// The full fine-tune that precedes pruning, on a copy of `base`.
pub fn finetune_for_mask(
    base: &ParamStore,
    registry: &ParameterRegistry,
    model: &ModelConfig,
    data: &DomainDataset,
    ft_epochs: usize,
    train_cfg: &TrainConfig,
) -> Result<ParamStore> {
    let cfg = train_cfg.clone().with_epochs(ft_epochs as u64);
    Ok(train_full(base, registry, model, &[data], &cfg)?.0)
}
