use std::collections::BTreeMap;

use bitvec::prelude::*;

use super::{Bits, DomainMask, MaskSet, PruneSpec};
use crate::error::{Error, Result};
use crate::model::{ParamStore, ParameterRegistry, Region};

/// Sets the largest-magnitude `(1 − fraction)` share of each region's pool.
///
/// Pruning is global within a region: all maskable tensors of the encoder
/// (resp. decoder) are ranked together by absolute value. Equal magnitudes are
/// ordered by tensor name, then flat index, so the result is a pure function
/// of the values.
pub fn magnitude_prune(finetuned: &ParamStore, registry: &ParameterRegistry, spec: &PruneSpec) -> Result<DomainMask> {
    spec.validate()?;
    registry.check_store(finetuned)?;
    let mut bits: BTreeMap<String, Bits> = registry
        .maskable()
        .map(|p| (p.name.clone(), bitvec![u8, Lsb0; 0; p.numel()]))
        .collect();
    for region in [Region::Encoder, Region::Decoder] {
        let pool: Vec<&str> = registry.pool(region).map(|p| p.name.as_str()).collect();
        if pool.is_empty() {
            return Err(Error::Mask(format!("{region} has no maskable tensors")));
        }
        let mut ranked: Vec<(f64, usize, usize)> = Vec::with_capacity(registry.pool_size(region));
        for (t, name) in pool.iter().enumerate() {
            let values = finetuned.require(name)?.data();
            ranked.extend(values.iter().enumerate().map(|(i, v)| (v.abs(), t, i)));
        }
        let keep = spec.keep_count(region, ranked.len());
        if keep == 0 {
            continue;
        }
        let by_rank = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
            b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        };
        if keep < ranked.len() {
            ranked.select_nth_unstable_by(keep - 1, by_rank);
        }
        for &(_, t, i) in &ranked[..keep] {
            bits.get_mut(pool[t]).expect("pool tensor").set(i, true);
        }
    }
    Ok(DomainMask::from_bits("", *spec, bits))
}

/// As [`magnitude_prune`], then clears every element already claimed by a
/// mask in `claimed`. The freed slots are not refilled, so the result can
/// hold fewer ones than the nominal keep fraction.
pub fn magnitude_prune_disjoint(
    finetuned: &ParamStore,
    registry: &ParameterRegistry,
    spec: &PruneSpec,
    claimed: &MaskSet,
) -> Result<DomainMask> {
    claimed.check_registry(registry)?;
    let mut mask = magnitude_prune(finetuned, registry, spec)?;
    if let Some(union) = claimed.union()? {
        mask.and_not_assign(&union)?;
    }
    Ok(mask)
}
