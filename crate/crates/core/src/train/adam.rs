use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mask::DomainMask;
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments per tensor plus the shared step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction.
///
/// With a mask, gradients are zeroed where the mask is 0 (and on every
/// non-maskable tensor) before the moments are updated, and parameters are
/// only written where the mask is 1, so masked-out elements stay bit-identical.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hp: &AdamHyper,
    mask: Option<&DomainMask>,
) -> Result<()> {
    for (name, g) in grads {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!(
                "gradient of {name} is {} at flat index {i} (step {})",
                g.data()[i],
                state.step + 1
            )));
        }
        let p = params.require(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("{name}: gradient shape {:?} vs parameter {:?}", g.shape(), p.shape())));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - hp.beta1.powf(t);
    let bc2 = 1.0 - hp.beta2.powf(t);
    for (name, g) in grads {
        let n = g.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let bits = match mask {
            Some(mask) => match mask.tensor(name) {
                Some(b) => Some(b),
                None => {
                    // implicit all-zero mask: only the moments decay
                    m.iter_mut().for_each(|x| *x *= hp.beta1);
                    v.iter_mut().for_each(|x| *x *= hp.beta2);
                    continue;
                }
            },
            None => None,
        };
        let p = params.get_mut(name).expect("checked above").data_mut();
        for i in 0..n {
            let on = bits.is_none_or(|b| b[i]);
            let gi = if on { g.data()[i] } else { 0.0 };
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
            if on {
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::PruneSpec;
    use crate::model::{ParamInfo, ParameterRegistry, Region};
    use bitvec::prelude::*;

    const HP: AdamHyper = AdamHyper { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };

    fn setup() -> (ParamStore, BTreeMap<String, Tensor>, ParameterRegistry) {
        let mut p = ParamStore::new();
        p.insert("enc.w", Tensor::new(vec![3], vec![0.5, -0.2, 1.0]).unwrap());
        p.insert("dec.w", Tensor::new(vec![2], vec![0.1, 0.3]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("enc.w".to_string(), Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap());
        g.insert("dec.w".to_string(), Tensor::new(vec![2], vec![-0.5, 0.25]).unwrap());
        let reg = ParameterRegistry::new([
            ParamInfo { name: "enc.w".into(), shape: vec![3], region: Region::Encoder, maskable: true },
            ParamInfo { name: "dec.w".into(), shape: vec![2], region: Region::Decoder, maskable: true },
        ])
        .unwrap();
        (p, g, reg)
    }

    #[test]
    fn one_step_scalar_matches_hand_computation() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(0.0));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::scalar(1.0));
        let mut st = AdamState::new();
        adam_step(&mut p, &g, &mut st, &HP, None).unwrap();
        // m̂ = 1, v̂ = 1 ⇒ Δ = −0.1 · 1/(1 + 1e-8)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn all_zero_mask_leaves_params_bit_identical() {
        let (mut p, g, reg) = setup();
        let before = p.clone();
        let mut st = AdamState::new();
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut st, &HP, Some(&DomainMask::all_zeros("z", &reg))).unwrap();
        }
        assert_eq!(p.checksum(), before.checksum());
    }

    #[test]
    fn all_ones_mask_equals_unmasked_when_everything_is_maskable() {
        let (mut a, g, reg) = setup();
        let mut b = a.clone();
        let (mut sa, mut sb) = (AdamState::new(), AdamState::new());
        for _ in 0..4 {
            adam_step(&mut a, &g, &mut sa, &HP, None).unwrap();
            adam_step(&mut b, &g, &mut sb, &HP, Some(&DomainMask::all_ones("o", &reg))).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn partial_mask_only_moves_selected_elements() {
        let (mut p, g, _) = setup();
        let before = p.clone();
        let mut bits = BTreeMap::new();
        bits.insert("enc.w".to_string(), bitvec![u8, Lsb0; 0, 1, 0]);
        bits.insert("dec.w".to_string(), bitvec![u8, Lsb0; 1, 0]);
        let mask = DomainMask::from_bits("m", PruneSpec::new(0.5, 0.5).unwrap(), bits);
        let mut st = AdamState::new();
        adam_step(&mut p, &g, &mut st, &HP, Some(&mask)).unwrap();
        let (e0, e1) = (before.get("enc.w").unwrap().data(), p.get("enc.w").unwrap().data());
        assert_eq!(e0[0].to_bits(), e1[0].to_bits());
        assert_ne!(e0[1], e1[1]);
        assert_eq!(e0[2].to_bits(), e1[2].to_bits());
        let (d0, d1) = (before.get("dec.w").unwrap().data(), p.get("dec.w").unwrap().data());
        assert_ne!(d0[0], d1[0]);
        assert_eq!(d0[1].to_bits(), d1[1].to_bits());
    }

    #[test]
    fn nan_gradient_aborts() {
        let (mut p, mut g, _) = setup();
        g.get_mut("dec.w").unwrap().data_mut()[1] = f64::NAN;
        let err = adam_step(&mut p, &g, &mut AdamState::new(), &HP, None).unwrap_err();
        assert!(err.to_string().contains("dec.w"), "{err}");
    }
}
