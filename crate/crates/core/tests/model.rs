use doss_core::model::{build_registry, ModelConfig, Region};

/// Closed-form count of everything except embeddings and the output layer.
fn body_params(c: &ModelConfig) -> usize {
    let (d, f) = (c.d_model, c.ffn_dim);
    let attn = 4 * (d * d + d);
    let ffn = d * f + f + f * d + d;
    let ln = 2 * d;
    let enc = c.n_enc_layers * (attn + ffn + 2 * ln) + ln;
    let dec = c.n_dec_layers * (2 * attn + ffn + 3 * ln) + ln;
    enc + dec
}

#[test]
fn registry_matches_closed_form() {
    for c in [ModelConfig::mini(), ModelConfig::desk(), ModelConfig::full()] {
        let reg = build_registry(&c).unwrap();
        let body: usize = reg
            .iter()
            .filter(|p| !p.name.ends_with("embed") && !p.name.starts_with("out."))
            .map(|p| p.numel())
            .sum();
        assert_eq!(body, body_params(&c));
        let (v, d) = (c.vocab_size, c.d_model);
        let total: usize = reg.iter().map(|p| p.numel()).sum();
        assert_eq!(total, body + 2 * v * d + if c.tie_embeddings { 0 } else { d * v } + v);
    }
}

#[test]
fn full_preset_is_about_270m_without_embeddings() {
    let body = body_params(&ModelConfig::full()) as f64;
    assert!((body / 270e6 - 1.0).abs() <= 0.05, "{body}");
}

#[test]
fn every_tensor_lands_in_one_region_pool() {
    let reg = build_registry(&ModelConfig::mini()).unwrap();
    let maskable: usize = reg.maskable().map(|p| p.numel()).sum();
    assert_eq!(reg.pool_size(Region::Encoder) + reg.pool_size(Region::Decoder), maskable);
    assert!(reg.maskable().all(|p| p.shape.len() == 2));
    assert!(reg.iter().filter(|p| !p.maskable).all(|p| p.shape.len() == 1));
}
