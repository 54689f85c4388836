//! Per-domain binary masks over the maskable weights.
//!
//! A 1 marks a domain-specific element: trainable for that domain and taken
//! from the trained store at inference. A 0 marks a shared element that stays
//! at its base value. Non-maskable tensors (biases, norm parameters) carry an
//! implicit all-zero mask.

mod create;
mod io;
mod prune;

use std::collections::BTreeMap;

use bitvec::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamStore, ParameterRegistry, Region};

pub use create::{create_domain_mask, finetune_for_mask};
pub use io::{decode_mask, encode_mask, load_mask, save_mask};
pub use prune::{magnitude_prune, magnitude_prune_disjoint};

pub type Bits = BitVec<u8, Lsb0>;

/// Encoder and decoder prune ratios plus the length of the mask-creation finetune.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSpec {
    /// Fraction of the encoder pool pruned.
    pub alpha: f64,
    /// Fraction of the decoder pool pruned.
    pub beta: f64,
    #[serde(default = "PruneSpec::default_ft_epochs")]
    pub ft_epochs: usize,
}

impl PruneSpec {
    pub const DEFAULT_FT_EPOCHS: usize = 5;

    fn default_ft_epochs() -> usize {
        Self::DEFAULT_FT_EPOCHS
    }

    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let s = Self {
            alpha,
            beta,
            ft_epochs: Self::DEFAULT_FT_EPOCHS,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if self.ft_epochs == 0 {
            return Err(Error::Config("ft_epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn prune_fraction(&self, region: Region) -> f64 {
        match region {
            Region::Encoder => self.alpha,
            Region::Decoder => self.beta,
        }
    }

    /// Number of elements kept out of a pool of `pool` elements.
    pub fn keep_count(&self, region: Region, pool: usize) -> usize {
        let keep = ((1.0 - self.prune_fraction(region)) * pool as f64).round() as usize;
        keep.min(pool)
    }
}

/// How many full-density disjoint masks fit: `⌊min(1/(1−α), 1/(1−β))⌋`.
pub fn capacity(spec: &PruneSpec) -> Result<usize> {
    spec.validate()?;
    if spec.alpha >= 1.0 || spec.beta >= 1.0 {
        return Err(Error::Config("capacity is undefined when alpha or beta equals 1".into()));
    }
    let bound = (1.0 / (1.0 - spec.alpha)).min(1.0 / (1.0 - spec.beta));
    // Absorb representation error such as 1/(1-0.8) = 5.000000000000001 or 2.9999999999999996.
    Ok((bound + 1e-9).floor() as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainMask {
    pub domain_id: String,
    pub spec: PruneSpec,
    bits: BTreeMap<String, Bits>,
}

impl DomainMask {
    /// Builds a mask from explicit per-tensor bitsets.
    pub fn from_bits(domain_id: impl Into<String>, spec: PruneSpec, bits: BTreeMap<String, Bits>) -> Self {
        Self {
            domain_id: domain_id.into(),
            spec,
            bits,
        }
    }

    fn filled(domain_id: &str, registry: &ParameterRegistry, spec: PruneSpec, value: bool) -> Self {
        let bits = registry
            .maskable()
            .map(|p| (p.name.clone(), BitVec::repeat(value, p.numel())))
            .collect();
        Self::from_bits(domain_id, spec, bits)
    }

    /// Every maskable element set (trains everything except biases and norms).
    pub fn all_ones(domain_id: &str, registry: &ParameterRegistry) -> Self {
        Self::filled(domain_id, registry, PruneSpec::new(0.0, 0.0).expect("valid"), true)
    }

    pub fn all_zeros(domain_id: &str, registry: &ParameterRegistry) -> Self {
        Self::filled(domain_id, registry, PruneSpec::new(1.0, 1.0).expect("valid"), false)
    }

    pub fn tensor(&self, name: &str) -> Option<&BitSlice<u8, Lsb0>> {
        self.bits.get(name).map(|b| b.as_bitslice())
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Bits)> {
        self.bits.iter()
    }

    pub fn count_ones(&self) -> u64 {
        self.bits.values().map(|b| b.count_ones() as u64).sum()
    }

    pub fn count_ones_in(&self, registry: &ParameterRegistry, region: Region) -> u64 {
        registry
            .pool(region)
            .filter_map(|p| self.bits.get(&p.name))
            .map(|b| b.count_ones() as u64)
            .sum()
    }

    /// Checks that the mask covers exactly the registry's maskable tensors.
    pub fn check_registry(&self, registry: &ParameterRegistry) -> Result<()> {
        let maskable = registry.maskable().count();
        if self.bits.len() != maskable {
            return Err(Error::Mask(format!(
                "mask {} covers {} tensors, registry has {maskable} maskable",
                self.domain_id,
                self.bits.len()
            )));
        }
        for p in registry.maskable() {
            match self.bits.get(&p.name) {
                Some(b) if b.len() == p.numel() => {}
                Some(b) => {
                    return Err(Error::Mask(format!(
                        "mask {}: {} has {} bits for {} elements",
                        self.domain_id,
                        p.name,
                        b.len(),
                        p.numel()
                    )))
                }
                None => return Err(Error::Mask(format!("mask {} is missing {}", self.domain_id, p.name))),
            }
        }
        Ok(())
    }

    fn check_compatible(&self, other: &DomainMask) -> Result<()> {
        let same = self.bits.len() == other.bits.len()
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|((na, a), (nb, b))| na == nb && a.len() == b.len());
        if same {
            Ok(())
        } else {
            Err(Error::Mask(format!(
                "masks {} and {} are over different registries",
                self.domain_id, other.domain_id
            )))
        }
    }

    /// Number of elements set in both masks.
    pub fn shared_ones(&self, other: &DomainMask) -> Result<u64> {
        self.check_compatible(other)?;
        Ok(self
            .bits
            .values()
            .zip(other.bits.values())
            .map(|(a, b)| (a.clone() & b).count_ones() as u64)
            .sum())
    }

    /// In-place union.
    pub fn or_assign(&mut self, other: &DomainMask) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.bits.values_mut().zip(other.bits.values()) {
            *a |= b.as_bitslice();
        }
        Ok(())
    }

    /// Clears every element that is set in `other`.
    pub fn and_not_assign(&mut self, other: &DomainMask) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.bits.values_mut().zip(other.bits.values()) {
            *a &= !b.clone();
        }
        Ok(())
    }
}

/// Masks in domain presentation order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskSet {
    masks: Vec<DomainMask>,
    disjoint: bool,
}

impl MaskSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// An empty set whose members must never intersect.
    pub fn new_disjoint() -> Self {
        Self {
            masks: Vec::new(),
            disjoint: true,
        }
    }

    pub fn from_masks(masks: Vec<DomainMask>, disjoint: bool) -> Result<Self> {
        let mut set = Self { masks: Vec::new(), disjoint };
        for m in masks {
            set.push(m)?;
        }
        Ok(set)
    }

    pub fn is_disjoint(&self) -> bool {
        self.disjoint
    }

    pub fn push(&mut self, mask: DomainMask) -> Result<()> {
        if self.get(&mask.domain_id).is_some() {
            return Err(Error::Mask(format!("duplicate domain id {}", mask.domain_id)));
        }
        for m in &self.masks {
            let shared = m.shared_ones(&mask)?;
            if self.disjoint && shared != 0 {
                return Err(Error::Mask(format!(
                    "mask {} shares {shared} elements with {} in a disjoint set",
                    mask.domain_id, m.domain_id
                )));
            }
        }
        self.masks.push(mask);
        Ok(())
    }

    pub fn get(&self, domain_id: &str) -> Option<&DomainMask> {
        self.masks.iter().find(|m| m.domain_id == domain_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &DomainMask> {
        self.masks.iter()
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.masks.iter().map(|m| m.domain_id.as_str()).collect()
    }

    /// Union of all members, or `None` for an empty set.
    pub fn union(&self) -> Result<Option<DomainMask>> {
        let mut it = self.masks.iter();
        let Some(first) = it.next() else { return Ok(None) };
        let mut acc = first.clone();
        acc.domain_id = "union".into();
        for m in it {
            acc.or_assign(m)?;
        }
        Ok(Some(acc))
    }

    pub fn check_registry(&self, registry: &ParameterRegistry) -> Result<()> {
        self.masks.iter().try_for_each(|m| m.check_registry(registry))
    }
}

/// Pairwise overlap between masks.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapStats {
    pub ids: Vec<String>,
    pub ones: Vec<u64>,
    pub shared: Vec<Vec<u64>>,
    pub jaccard: Vec<Vec<f64>>,
}

impl OverlapStats {
    /// Largest shared count between two different masks.
    pub fn max_off_diagonal_shared(&self) -> u64 {
        let n = self.ids.len();
        (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.shared[i][j])
            .max()
            .unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("domain_a,domain_b,ones_a,ones_b,shared_ones,jaccard\n");
        for i in 0..self.ids.len() {
            for j in 0..self.ids.len() {
                s.push_str(&format!(
                    "{},{},{},{},{},{:.6}\n",
                    self.ids[i], self.ids[j], self.ones[i], self.ones[j], self.shared[i][j], self.jaccard[i][j]
                ));
            }
        }
        s
    }
}

pub fn overlap_stats(masks: &MaskSet) -> Result<OverlapStats> {
    let n = masks.len();
    let ones: Vec<u64> = masks.iter().map(DomainMask::count_ones).collect();
    let mut shared = vec![vec![0u64; n]; n];
    let mut jaccard = vec![vec![0f64; n]; n];
    let list: Vec<&DomainMask> = masks.iter().collect();
    for i in 0..n {
        for j in i..n {
            let s = list[i].shared_ones(list[j])?;
            let union = ones[i] + ones[j] - s;
            let jac = if union == 0 { 0.0 } else { s as f64 / union as f64 };
            shared[i][j] = s;
            shared[j][i] = s;
            jaccard[i][j] = jac;
            jaccard[j][i] = jac;
        }
    }
    Ok(OverlapStats {
        ids: list.iter().map(|m| m.domain_id.clone()).collect(),
        ones,
        shared,
        jaccard,
    })
}

/// Effective parameters for one domain: trained values where the mask is 1,
/// base values everywhere else (including all non-maskable tensors).
pub fn overlay(base: &ParamStore, trained: &ParamStore, mask: &DomainMask) -> Result<ParamStore> {
    if base.len() != trained.len() {
        return Err(Error::Shape("base and trained stores differ in tensor count".into()));
    }
    let mut out = ParamStore::new();
    for ((name, b), (tname, t)) in base.iter().zip(trained.iter()) {
        if name != tname || b.shape() != t.shape() {
            return Err(Error::Shape(format!("base tensor {name} does not match trained tensor {tname}")));
        }
        let mut merged = b.clone();
        if let Some(bits) = mask.tensor(name) {
            if bits.len() != b.len() {
                return Err(Error::Shape(format!("mask for {name} has {} bits, tensor has {}", bits.len(), b.len())));
            }
            for i in bits.iter_ones() {
                merged.data_mut()[i] = t.data()[i];
            }
        }
        out.insert(name.clone(), merged);
    }
    if let Some((name, _)) = mask.tensors().find(|(n, _)| base.get(n).is_none()) {
        return Err(Error::Shape(format!("mask refers to unknown tensor {name}")));
    }
    Ok(out)
}

/// SHA-256 over every element that no mask in `masks` selects, including all
/// non-maskable tensors. Training under `masks` must leave it unchanged.
pub fn frozen_checksum(store: &ParamStore, masks: &MaskSet) -> Result<String> {
    use sha2::{Digest, Sha256};
    let union = masks.union()?;
    let mut h = Sha256::new();
    for (name, t) in store.iter() {
        h.update(name.as_bytes());
        let bits = union.as_ref().and_then(|u| u.tensor(name));
        for (i, v) in t.data().iter().enumerate() {
            if !bits.is_some_and(|b| b[i]) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig, ParamInfo};
    use crate::tensor::Tensor;

    fn tiny_registry() -> ParameterRegistry {
        ParameterRegistry::new([ParamInfo {
            name: "enc.w".into(),
            shape: vec![4],
            region: Region::Encoder,
            maskable: true,
        }])
        .unwrap()
    }

    fn mask_of(id: &str, bits: &[bool]) -> DomainMask {
        let mut map = BTreeMap::new();
        map.insert("enc.w".to_string(), bits.iter().copied().collect::<Bits>());
        DomainMask::from_bits(id, PruneSpec::new(0.5, 0.5).unwrap(), map)
    }

    #[test]
    fn capacity_examples() {
        assert_eq!(capacity(&PruneSpec::new(0.6, 0.6).unwrap()).unwrap(), 2);
        assert_eq!(capacity(&PruneSpec::new(0.5, 0.75).unwrap()).unwrap(), 2);
        assert_eq!(capacity(&PruneSpec::new(0.9, 0.9).unwrap()).unwrap(), 10);
        assert!(capacity(&PruneSpec::new(1.0, 0.5).unwrap()).is_err());
        assert!(PruneSpec::new(1.2, 0.5).is_err());
    }

    #[test]
    fn overlap_examples() {
        let a = mask_of("a", &[true, true, false, false]);
        let b = mask_of("b", &[false, true, true, false]);
        let set = MaskSet::from_masks(vec![a.clone(), b], false).unwrap();
        let st = overlap_stats(&set).unwrap();
        assert_eq!(st.shared[0][1], 1);
        assert!((st.jaccard[0][1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(st.jaccard[0][0], 1.0);
        assert_eq!(st.shared, vec![vec![2, 1], vec![1, 2]]);

        let mut a2 = a.clone();
        a2.domain_id = "a2".into();
        let st = overlap_stats(&MaskSet::from_masks(vec![a, a2], false).unwrap()).unwrap();
        assert_eq!(st.jaccard[0][1], 1.0);
    }

    #[test]
    fn disjoint_set_rejects_overlap_and_duplicates() {
        let a = mask_of("a", &[true, false, false, false]);
        let b = mask_of("b", &[true, true, false, false]);
        let c = mask_of("c", &[false, false, true, false]);
        let mut set = MaskSet::new_disjoint();
        set.push(a.clone()).unwrap();
        assert!(set.push(b).is_err());
        set.push(c).unwrap();
        assert_eq!(overlap_stats(&set).unwrap().max_off_diagonal_shared(), 0);
        assert!(set.push(a).is_err());
    }

    #[test]
    fn overlay_elementwise() {
        let mut base = ParamStore::new();
        base.insert("enc.w", Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let mut trained = ParamStore::new();
        trained.insert("enc.w", Tensor::new(vec![4], vec![9.0; 4]).unwrap());
        let m = mask_of("a", &[true, false, true, false]);
        let eff = overlay(&base, &trained, &m).unwrap();
        assert_eq!(eff.get("enc.w").unwrap().data(), &[9.0, 1.0, 9.0, 1.0]);
        let reg = tiny_registry();
        assert_eq!(overlay(&base, &trained, &DomainMask::all_zeros("z", &reg)).unwrap(), base);
        assert_eq!(overlay(&base, &trained, &DomainMask::all_ones("o", &reg)).unwrap(), trained);
    }

    #[test]
    fn overlay_keeps_non_maskable_at_base() {
        let (base, reg) = build_model(&ModelConfig::mini(), 1).unwrap();
        let (trained, _) = build_model(&ModelConfig::mini(), 2).unwrap();
        let mut trained = trained;
        trained.get_mut("out.bias").unwrap().data_mut()[0] = 5.0;
        let eff = overlay(&base, &trained, &DomainMask::all_ones("o", &reg)).unwrap();
        for p in reg.iter() {
            let expect = if p.maskable { &trained } else { &base };
            assert_eq!(eff.get(&p.name), expect.get(&p.name), "{}", p.name);
        }
        assert_eq!(overlay(&base, &base, &DomainMask::all_ones("o", &reg)).unwrap(), base);
    }

    #[test]
    fn registry_mismatch_is_reported() {
        let (_, reg) = build_model(&ModelConfig::mini(), 1).unwrap();
        let m = mask_of("a", &[true; 4]);
        assert!(m.check_registry(&reg).is_err());
        let full = DomainMask::all_ones("o", &reg);
        assert!(full.shared_ones(&m).is_err());
        full.check_registry(&reg).unwrap();
    }
}
