use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::run::{train_doss_from, train_masked, TrainLog};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::mask::{create_domain_mask, DomainMask, MaskSet, PruneSpec};
use crate::model::{ModelConfig, ParamStore, ParameterRegistry};

/// How a new domain is added to a trained DoSS model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtensionMode {
    /// Continue training every maskable parameter on the new domain.
    FtAllOnes,
    /// Fresh mask from λ₀, trained on the new domain only.
    NewOnlyUnconstrained,
    /// Fresh mask from λ₀, then joint training over old and new domains.
    AllMasksJoint,
    /// Mask restricted to elements no existing domain uses.
    NewOnlyDisjoint,
}

impl ExtensionMode {
    pub const ALL: [ExtensionMode; 4] = [
        ExtensionMode::FtAllOnes,
        ExtensionMode::NewOnlyUnconstrained,
        ExtensionMode::AllMasksJoint,
        ExtensionMode::NewOnlyDisjoint,
    ];
}

impl fmt::Display for ExtensionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExtensionMode::FtAllOnes => "ft_all_ones",
            ExtensionMode::NewOnlyUnconstrained => "new_only_unconstrained",
            ExtensionMode::AllMasksJoint => "all_masks_joint",
            ExtensionMode::NewOnlyDisjoint => "new_only_disjoint",
        })
    }
}

impl FromStr for ExtensionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Input(format!("unknown extension mode {s:?}")))
    }
}

/// Inputs shared by every extension mode.
pub struct Extension<'a> {
    pub registry: &'a ParameterRegistry,
    pub model: &'a ModelConfig,
    /// λ₀, the starting point for new masks.
    pub base: &'a ParamStore,
    /// Existing domains' data; only read by [`ExtensionMode::AllMasksJoint`].
    pub existing: &'a [&'a DomainDataset],
    pub spec: PruneSpec,
    /// Settings for the fine-tune that precedes pruning.
    pub mask_cfg: &'a TrainConfig,
    /// Settings for the extension training itself.
    pub train_cfg: &'a TrainConfig,
}

#[derive(Debug, Clone)]
pub struct ExtensionOutcome {
    pub params: ParamStore,
    pub masks: MaskSet,
    /// Popcount of the mask trained for the new domain.
    pub trainable: u64,
    pub log: TrainLog,
}

/// Adds `new_data` as a domain of the model `trained` according to `mode`.
/// Optimizer state starts fresh.
pub fn extend_domain(
    ext: &Extension<'_>,
    trained: &ParamStore,
    masks: &MaskSet,
    new_data: &DomainDataset,
    mode: ExtensionMode,
) -> Result<ExtensionOutcome> {
    let id = new_data.domain_id();
    if masks.get(id).is_some() {
        return Err(Error::Mask(format!("domain {id} already has a mask")));
    }
    masks.check_registry(ext.registry)?;
    ext.registry.check_store(trained)?;
    ext.registry.check_store(ext.base)?;
    ext.spec.validate()?;
    let new_mask = match mode {
        ExtensionMode::FtAllOnes => DomainMask::all_ones(id, ext.registry),
        ExtensionMode::NewOnlyUnconstrained | ExtensionMode::AllMasksJoint => {
            create_domain_mask(ext.base, ext.registry, ext.model, new_data, ext.spec, ext.mask_cfg, None)?
        }
        ExtensionMode::NewOnlyDisjoint => {
            if masks.is_empty() {
                return Err(Error::Mask("disjoint extension needs at least one existing mask".into()));
            }
            create_domain_mask(ext.base, ext.registry, ext.model, new_data, ext.spec, ext.mask_cfg, Some(masks))?
        }
    };
    let mut trainable = new_mask.count_ones();
    let mut out_masks = masks.clone();
    let (params, log) = match mode {
        ExtensionMode::AllMasksJoint => {
            if ext.existing.len() != masks.len() {
                return Err(Error::Mask(format!(
                    "joint extension needs data for all {} existing domains, got {}",
                    masks.len(),
                    ext.existing.len()
                )));
            }
            if out_masks.is_disjoint() {
                out_masks = MaskSet::from_masks(masks.iter().cloned().collect(), false)?;
            }
            out_masks.push(new_mask)?;
            let mut data: Vec<&DomainDataset> = ext.existing.to_vec();
            data.push(new_data);
            // every mask keeps training, so the union is what moves
            trainable = out_masks.union()?.map_or(0, |u| u.count_ones());
            train_doss_from(ext.base, trained, ext.registry, ext.model, &out_masks, &data, ext.train_cfg)?
        }
        _ => {
            let r = train_masked(ext.base, trained, ext.registry, ext.model, &new_mask, new_data, ext.train_cfg)?;
            if mode != ExtensionMode::NewOnlyDisjoint {
                // the new mask may overlap existing ones, so the record is not disjoint
                out_masks = MaskSet::from_masks(masks.iter().cloned().collect(), false)?;
            }
            out_masks.push(new_mask)?;
            r
        }
    };
    Ok(ExtensionOutcome { params, masks: out_masks, trainable, log })
}
